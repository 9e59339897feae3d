use std::collections::BTreeMap;

use super::op::OpKind;

/// Per-scope totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScopeStats {
    pub forward_ops: u64,
    pub backward_ops: u64,
    pub forward_flops: u64,
    pub backward_flops: u64,
    /// Elements of op outputs kept alive for a later backward pass.
    pub retained_elements: u64,
}

/// Op and FLOP counts of one graph, by op kind and by scope.
///
/// FLOPs count one multiply-add as 2 and only cover matmul and convolution
/// work.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub forward_ops: BTreeMap<OpKind, u64>,
    pub backward_ops: BTreeMap<OpKind, u64>,
    pub forward_flops: u64,
    pub backward_flops: u64,
    pub retained_elements: u64,
    pub scopes: BTreeMap<String, ScopeStats>,
}

impl OpCounter {
    pub(crate) fn record_forward(&mut self, kind: OpKind, scope: &str, flops: u64, retained: u64) {
        *self.forward_ops.entry(kind).or_default() += 1;
        self.forward_flops += flops;
        self.retained_elements += retained;
        let s = self.scope_mut(scope);
        s.forward_ops += 1;
        s.forward_flops += flops;
        s.retained_elements += retained;
    }

    pub(crate) fn record_backward(&mut self, kind: OpKind, scope: &str, flops: u64) {
        *self.backward_ops.entry(kind).or_default() += 1;
        self.backward_flops += flops;
        let s = self.scope_mut(scope);
        s.backward_ops += 1;
        s.backward_flops += flops;
    }

    fn scope_mut(&mut self, scope: &str) -> &mut ScopeStats {
        if !self.scopes.contains_key(scope) {
            self.scopes.insert(scope.to_string(), ScopeStats::default());
        }
        self.scopes.get_mut(scope).expect("inserted above")
    }

    pub fn total_forward_ops(&self) -> u64 {
        self.forward_ops.values().sum()
    }

    pub fn total_backward_ops(&self) -> u64 {
        self.backward_ops.values().sum()
    }

    /// Sum of the stats of every scope equal to `prefix` or nested below it.
    pub fn scope_total(&self, prefix: &str) -> ScopeStats {
        let nested = format!("{}/", prefix.trim_end_matches('/'));
        self.scopes
            .iter()
            .filter(|(name, _)| name.as_str() == prefix || name.starts_with(&nested))
            .fold(ScopeStats::default(), |mut acc, (_, s)| {
                acc.forward_ops += s.forward_ops;
                acc.backward_ops += s.backward_ops;
                acc.forward_flops += s.forward_flops;
                acc.backward_flops += s.backward_flops;
                acc.retained_elements += s.retained_elements;
                acc
            })
    }

    /// Accumulates another counter into this one.
    pub fn merge(&mut self, other: &OpCounter) {
        for (k, v) in &other.forward_ops {
            *self.forward_ops.entry(*k).or_default() += v;
        }
        for (k, v) in &other.backward_ops {
            *self.backward_ops.entry(*k).or_default() += v;
        }
        self.forward_flops += other.forward_flops;
        self.backward_flops += other.backward_flops;
        self.retained_elements += other.retained_elements;
        for (name, s) in &other.scopes {
            let mine = self.scope_mut(name);
            mine.forward_ops += s.forward_ops;
            mine.backward_ops += s.backward_ops;
            mine.forward_flops += s.forward_flops;
            mine.backward_flops += s.backward_flops;
            mine.retained_elements += s.retained_elements;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_prefix_does_not_match_siblings() {
        let mut c = OpCounter::default();
        c.record_forward(OpKind::MatMul, "encoder/layer_1", 10, 0);
        c.record_forward(OpKind::MatMul, "encoder/layer_10", 20, 0);
        c.record_forward(OpKind::Add, "encoder/layer_1/adapter", 0, 4);
        assert_eq!(c.scope_total("encoder/layer_1").forward_flops, 10);
        assert_eq!(c.scope_total("encoder/layer_1").forward_ops, 2);
        assert_eq!(c.scope_total("encoder").forward_flops, 30);
        assert_eq!(c.total_forward_ops(), 3);
    }
}
