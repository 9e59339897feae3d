use std::collections::BTreeMap;

use globset::GlobBuilder;
use indexmap::IndexMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// A named tensor with a trainable flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Gradients keyed by parameter name. Only trainable parameters appear.
pub type GradientMap<T> = BTreeMap<String, Tensor<T>>;

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    /// Adds a trainable parameter.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.params.insert(
            name.clone(),
            Parameter {
                name,
                value,
                trainable: true,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total element count over all parameters.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Element count over trainable parameters.
    pub fn trainable_elements(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn any_trainable(&self) -> bool {
        self.params.values().any(|p| p.trainable)
    }

    /// Sets `trainable = flag` on every parameter whose name matches the
    /// glob `pattern` and returns how many matched.
    ///
    /// `*` matches within one `/`-separated segment, `**` across segments.
    /// Zero matches is not an error; callers decide what it means.
    pub fn set_trainable(&mut self, pattern: &str, flag: bool) -> Result<usize> {
        let matcher = GlobBuilder::new(pattern)
            .literal_separator(true)
            .build()
            .map_err(|e| Error::Pattern {
                pattern: pattern.to_string(),
                reason: e.kind().to_string(),
            })?
            .compile_matcher();
        let mut count = 0;
        for p in self.params.values_mut() {
            if matcher.is_match(&p.name) {
                p.trainable = flag;
                count += 1;
            }
        }
        if count == 0 {
            log::warn!("pattern `{pattern}` matched no parameters");
        }
        Ok(count)
    }

    /// Adds every parameter of `other`, keeping its trainable flag.
    pub fn extend(&mut self, other: ParamStore<T>) -> Result<()> {
        for (name, p) in other.params {
            if self.params.contains_key(&name) {
                return Err(Error::DuplicateParam(name));
            }
            self.params.insert(name, p);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        for name in [
            "encoder/layer_0/ffn1/w1/weight",
            "encoder/layer_0/ffn1/w1/bias",
            "encoder/layer_0/mhsa/ln/bias",
            "encoder/layer_0/mhsa/ln/scale",
            "encoder/layer_1/ffn1/w1/weight",
            "encoder/layer_1/ffn1/w1/bias",
            "head/proj_0/weight",
        ] {
            s.insert(name, Tensor::zeros(&[2])).unwrap();
        }
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store();
        assert!(matches!(
            s.insert("head/proj_0/weight", Tensor::zeros(&[1])),
            Err(Error::DuplicateParam(_))
        ));
    }

    #[test]
    fn glob_patterns_respect_segments() {
        let mut s = store();
        assert_eq!(s.set_trainable("encoder/**", false).unwrap(), 6);
        assert_eq!(s.trainable_elements(), 2);
        assert_eq!(s.set_trainable("encoder/layer_1/**", true).unwrap(), 2);
        assert_eq!(s.set_trainable("encoder/**", false).unwrap(), 6);
        assert_eq!(s.set_trainable("**/bias", true).unwrap(), 3);
        assert!(s.get("encoder/layer_0/mhsa/ln/bias").unwrap().trainable);
        assert!(!s.get("encoder/layer_0/mhsa/ln/scale").unwrap().trainable);
        assert_eq!(s.set_trainable("encoder/*/bias", true).unwrap(), 0);
    }

    #[test]
    fn invalid_pattern_is_error() {
        let mut s = store();
        assert!(matches!(s.set_trainable("encoder/[", true), Err(Error::Pattern { .. })));
    }
}
