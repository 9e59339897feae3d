use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{GradientMap, ParamStore, Real, Tensor};

/// Adam with per-parameter learning rates supplied at each step.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Adam<T> {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter of `stores` that has a gradient.
    /// `lr` maps a parameter name to its learning rate.
    pub fn step(&mut self, stores: &mut [&mut ParamStore<T>], grads: &GradientMap<T>, lr: impl Fn(&str) -> f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one, eps) = (T::one(), T::from_f64_lossy(self.eps));
        for store in stores.iter_mut() {
            for p in store.iter_mut().filter(|p| p.trainable) {
                let Some(g) = grads.get(&p.name) else { continue };
                if g.shape() != p.value.shape() {
                    return Err(Error::Invalid(format!(
                        "gradient for `{}` has shape {:?}, parameter {:?}",
                        p.name,
                        g.shape(),
                        p.value.shape()
                    )));
                }
                let (m, v) = self
                    .moments
                    .entry(p.name.clone())
                    .or_insert_with(|| (vec![T::zero(); g.numel()], vec![T::zero(); g.numel()]));
                let step = T::from_f64_lossy(lr(&p.name) / c1);
                let c2 = T::from_f64_lossy(c2);
                for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = b1 * *mi + (one - b1) * gi;
                    *vi = b2 * *vi + (one - b2) * gi * gi;
                    *w -= step * *mi / ((*vi / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// `shadow = decay * shadow + (1 - decay) * current`, for every entry of
/// `shadow`. Both maps must hold the same names.
pub fn ema_update<T: Real>(shadow: &mut BTreeMap<String, Tensor<T>>, current: &BTreeMap<String, Tensor<T>>, decay: f64) -> Result<()> {
    if shadow.len() != current.len() || shadow.keys().any(|k| !current.contains_key(k)) {
        return Err(Error::Invalid("EMA shadow and current parameters differ in names".into()));
    }
    let d = T::from_f64_lossy(decay);
    let rest = T::one() - d;
    for (name, s) in shadow.iter_mut() {
        let c = &current[name];
        if c.shape() != s.shape() {
            return Err(Error::Invalid(format!("EMA shape mismatch for `{name}`")));
        }
        s.data_mut().iter_mut().zip(c.data()).for_each(|(s, &c)| *s = d * *s + rest * c);
    }
    Ok(())
}

/// Exponential moving average of the trainable parameters.
///
/// The effective decay at update `t` is `min(decay, (1 + t) / (10 + t))`,
/// so short runs are not dominated by the initial weights.
#[derive(Clone, Debug)]
pub struct Ema<T> {
    decay: f64,
    updates: u64,
    shadow: BTreeMap<String, Tensor<T>>,
}

fn trainable_values<T: Real>(stores: &[&ParamStore<T>]) -> BTreeMap<String, Tensor<T>> {
    stores
        .iter()
        .flat_map(|s| s.iter())
        .filter(|p| p.trainable)
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect()
}

impl<T: Real> Ema<T> {
    pub fn new(decay: f64, stores: &[&ParamStore<T>]) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::config("train.ema_decay", format!("must be in [0, 1), got {decay}")));
        }
        // tensors are copy-on-write, so the shadow never aliases live weights
        Ok(Ema {
            decay,
            updates: 0,
            shadow: trainable_values(stores),
        })
    }

    pub fn effective_decay(&self) -> f64 {
        let t = self.updates as f64;
        self.decay.min((1.0 + t) / (10.0 + t))
    }

    pub fn update(&mut self, stores: &[&ParamStore<T>]) -> Result<()> {
        let decay = self.effective_decay();
        ema_update(&mut self.shadow, &trainable_values(stores), decay)?;
        self.updates += 1;
        Ok(())
    }

    pub fn shadow(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.shadow
    }

    /// Overwrites the tracked parameters with their averages.
    pub fn apply(&self, stores: &mut [&mut ParamStore<T>]) {
        for store in stores.iter_mut() {
            for p in store.iter_mut() {
                if let Some(s) = self.shadow.get(&p.name) {
                    p.value = s.clone();
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::full(&[2], v))])
    }

    #[test]
    fn ema_update_cases() {
        let mut s = map(0.0);
        ema_update(&mut s, &map(2.0), 0.5).unwrap();
        assert_eq!(s["w"].data(), &[1.0, 1.0]);
        ema_update(&mut s, &map(2.0), 1.0).unwrap();
        assert_eq!(s["w"].data(), &[1.0, 1.0]);
        ema_update(&mut s, &map(5.0), 0.0).unwrap();
        assert_eq!(s["w"].data(), &[5.0, 5.0]);
        let other = BTreeMap::from([("x".to_string(), Tensor::full(&[2], 1.0))]);
        assert!(ema_update(&mut s, &other, 0.5).is_err());
    }

    #[test]
    fn ema_converges_monotonically_to_constant() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(&[1], 0.0f64)).unwrap();
        let mut ema = Ema::new(0.9, &[&store]).unwrap();
        store.get_mut("w").unwrap().value = Tensor::full(&[1], 1.0);
        let mut prev = 0.0;
        for _ in 0..50 {
            ema.update(&[&store]).unwrap();
            let now = ema.shadow()["w"].data()[0];
            assert!(now > prev && now <= 1.0);
            prev = now;
        }
        assert!(prev > 0.99);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap()).unwrap();
        store.insert("frozen", Tensor::full(&[1], 3.0)).unwrap();
        store.get_mut("frozen").unwrap().trainable = false;
        let grads = GradientMap::from([
            ("w".to_string(), Tensor::from_f64(&[2], &[0.5, -2.0]).unwrap()),
            ("frozen".to_string(), Tensor::full(&[1], 1.0)),
        ]);
        let mut adam = Adam::new();
        adam.step(&mut [&mut store], &grads, |_| 0.1).unwrap();
        let w = store.get("w").unwrap().value.data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{w:?}");
        assert_eq!(store.get("frozen").unwrap().value.data(), &[3.0]);
    }
}
