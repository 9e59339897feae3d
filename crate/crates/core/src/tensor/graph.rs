use std::collections::HashMap;
use std::sync::Arc;

use super::counter::OpCounter;
use super::kernels;
use super::op::Op;
use super::param::{GradientMap, ParamStore};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Option<Op>,
    inputs: Vec<Var>,
    requires_grad: bool,
    /// Set for leaves created from a trainable parameter.
    param: Option<String>,
    scope: u32,
}

/// Tape of primitive applications.
///
/// A node requires a gradient only if one of its inputs does, and only
/// leaves created from trainable parameters start that chain. `backward`
/// walks nodes in reverse creation order and touches only nodes that
/// require a gradient and lie on a path to the loss, so a frozen subgraph
/// costs no backward work at all.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    scopes: Vec<String>,
    scope_ids: HashMap<String, u32>,
    current_scope: u32,
    param_leaves: HashMap<String, Var>,
    counter: OpCounter,
    grad_enabled: bool,
    freed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            scopes: vec![String::new()],
            scope_ids: HashMap::from([(String::new(), 0)]),
            current_scope: 0,
            param_leaves: HashMap::new(),
            counter: OpCounter::default(),
            grad_enabled: true,
            freed: false,
        }
    }

    /// A graph that records values only; nothing requires a gradient.
    pub fn inference() -> Self {
        let mut g = Self::new();
        g.grad_enabled = false;
        g
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn counter(&self) -> &OpCounter {
        &self.counter
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Runs `f` with every op it creates attributed to `scope`.
    pub fn in_scope<R>(&mut self, scope: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let id = match self.scope_ids.get(scope) {
            Some(&id) => id,
            None => {
                let id = self.scopes.len() as u32;
                self.scopes.push(scope.to_string());
                self.scope_ids.insert(scope.to_string(), id);
                id
            }
        };
        let prev = std::mem::replace(&mut self.current_scope, id);
        let out = f(self);
        self.current_scope = prev;
        out
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    fn check_live(&self) -> Result<()> {
        if self.freed {
            Err(Error::GraphFreed)
        } else {
            Ok(())
        }
    }

    /// A leaf that never requires a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            requires_grad: false,
            param: None,
            scope: self.current_scope,
        })
    }

    /// Leaf for parameter `name` of `store`; repeated calls return the same
    /// node so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_leaves.get(name) {
            return Ok(v);
        }
        let p = store.get(name)?;
        let trainable = p.trainable && self.grad_enabled;
        let v = self.push(Node {
            value: p.value.clone(),
            op: None,
            inputs: Vec::new(),
            requires_grad: trainable,
            param: trainable.then(|| name.to_string()),
            scope: self.current_scope,
        });
        self.param_leaves.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Applies a primitive to existing nodes.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        self.check_live()?;
        let (value, flops) = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            kernels::forward(&op, &vals)?
        };
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let retained = if requires_grad { value.numel() as u64 } else { 0 };
        let scope = &self.scopes[self.current_scope as usize];
        self.counter.record_forward(op.kind(), scope, flops, retained);
        Ok(self.push(Node {
            value,
            op: Some(op),
            inputs: inputs.to_vec(),
            requires_grad,
            param: None,
            scope: self.current_scope,
        }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(Op::BiasAdd, &[x, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.apply(Op::Scale(s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }

    pub fn swish(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Swish, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn glu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Glu, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, scale: Var, offset: Var) -> Result<Var> {
        self.apply(Op::LayerNorm { eps: 1e-5 }, &[x, scale, offset])
    }

    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: (usize, usize),
        segments: &[usize],
    ) -> Result<Var> {
        self.apply(
            Op::Conv1d {
                stride,
                pad_left: pad.0,
                pad_right: pad.1,
                segments: Arc::from(segments),
            },
            &[x, w],
        )
    }

    /// Length-preserving depthwise convolution, padded per segment.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, segments: &[usize]) -> Result<Var> {
        let k = self.value(w).shape().first().copied().unwrap_or(1);
        let pad_left = k.saturating_sub(1) / 2;
        self.apply(
            Op::DepthwiseConv1d {
                pad_left,
                pad_right: k.saturating_sub(1) - pad_left,
                segments: Arc::from(segments),
            },
            &[x, w],
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, parts)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, end }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Mean, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sum, &[x])
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: Option<&[bool]>) -> Result<Var> {
        self.apply(
            Op::CrossEntropy {
                targets: Arc::from(targets),
                mask: mask.map(Arc::from),
            },
            &[logits],
        )
    }

    /// `x · w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.bias_add(h, b)
    }

    /// Gradients of `loss` for every trainable parameter it depends on.
    /// Consumes the graph: node values are released afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<GradientMap<T>> {
        let grads = self.backward_impl(loss)?;
        self.release();
        Ok(grads)
    }

    /// Like [`Graph::backward`] but keeps the graph for another pass.
    pub fn backward_retain(&mut self, loss: Var) -> Result<GradientMap<T>> {
        self.backward_impl(loss)
    }

    fn release(&mut self) {
        self.freed = true;
        for node in &mut self.nodes {
            node.value = Tensor::scalar(T::zero());
        }
        self.param_leaves.clear();
    }

    fn backward_impl(&mut self, loss: Var) -> Result<GradientMap<T>> {
        self.check_live()?;
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut out = GradientMap::new();
        if !loss_node.requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            let Some(op) = node.op.as_ref() else {
                if let Some(name) = &node.param {
                    out.insert(
                        name.clone(),
                        Tensor::from_parts(node.value.shape().to_vec(), grad),
                    );
                }
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let (input_grads, flops) = kernels::backward(op, &inputs, &node.value, &grad, &needs);
            self.counter
                .record_backward(op.kind(), &self.scopes[node.scope as usize], flops);
            for (v, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::OpKind;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn concat_along_features() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[5, 512]));
        let b = g.constant(Tensor::zeros(&[5, 512]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).shape(), &[5, 1024]);
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_flops_and_shape() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[3, 4]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[3, 5]);
        // oracle: explicit triple loop, one multiply and one add per step
        let mut loop_flops = 0;
        for _i in 0..3 {
            for _j in 0..5 {
                for _p in 0..4 {
                    loop_flops += 2;
                }
            }
        }
        assert_eq!(g.counter().forward_flops, loop_flops);
        assert_eq!(g.counter().forward_ops[&OpKind::MatMul], 1);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[3, 4]));
        let b = g.constant(Tensor::zeros(&[5, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("(3,4) x (5,2)"), "{err}");
    }

    #[test]
    fn grad_of_weighted_sum_is_input() {
        let mut store = ParamStore::new();
        store.insert("w", t(&[1, 3], &[0.5, -1.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let x = g.constant(t(&[1, 3], &[3.0, 4.0, 5.0]));
        let wx = g.mul(w, x).unwrap();
        let loss = g.sum(wx).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["w"].data(), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn frozen_params_get_no_gradient_and_no_backward_work() {
        let mut store = ParamStore::new();
        store.insert("frozen", t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        store.insert("head", t(&[2, 1], &[1.0, -1.0])).unwrap();
        store.set_trainable("frozen", false).unwrap();
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 1.0]));
        let h = g
            .in_scope("encoder", |g| {
                let w = g.param(&store, "frozen")?;
                let h = g.matmul(x, w)?;
                g.relu(h)
            })
            .unwrap();
        let loss = g
            .in_scope("head", |g| {
                let w = g.param(&store, "head")?;
                let y = g.matmul(h, w)?;
                g.sum(y)
            })
            .unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.keys().collect::<Vec<_>>(), vec!["head"]);
        assert_eq!(g.counter().scope_total("encoder").backward_ops, 0);
        assert_eq!(g.counter().scope_total("head").backward_ops, 2);
        // only dW of the head matmul: 2*1*2*1
        assert_eq!(g.counter().backward_flops, 4);
    }

    #[test]
    fn non_scalar_loss_and_freed_graph() {
        let mut store = ParamStore::new();
        store.insert("w", t(&[2], &[1.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        assert!(matches!(g.backward(w), Err(Error::NonScalarLoss(_))));
        let s = g.sum(w).unwrap();
        g.backward_retain(s).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::GraphFreed)));
    }

    #[test]
    fn repeated_param_use_accumulates() {
        let mut store = ParamStore::new();
        store.insert("w", t(&[1, 1], &[3.0])).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, "w").unwrap();
        let b = g.param(&store, "w").unwrap();
        assert_eq!(a, b);
        let sq = g.mul(a, b).unwrap();
        let loss = g.sum(sq).unwrap();
        assert_eq!(g.backward(loss).unwrap()["w"].data(), &[6.0]);
    }

    #[test]
    fn backward_flops_double_when_both_operands_need_grad() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::full(&[3, 4], 1.0f64)).unwrap();
        store.insert("b", Tensor::full(&[4, 5], 1.0)).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, "a").unwrap();
        let b = g.param(&store, "b").unwrap();
        let c = g.matmul(a, b).unwrap();
        let loss = g.sum(c).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.counter().backward_flops, 4 * 3 * 4 * 5);
    }
}
