use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Denominator floor of the relative error. Central differences carry about
/// `1e-16 * |loss| / eps` of round-off, so a gradient that is exactly zero
/// (a key bias under softmax, say) would otherwise score a relative error
/// of 1.
pub const GRAD_FLOOR: f64 = 1e-3;

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of
    /// `|analytic - numeric| / max(GRAD_FLOOR, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients of `loss_fn` against central finite
/// differences for every trainable parameter in `store`.
///
/// Each coordinate `w` is perturbed by `±eps·(1 + |w|)`. At most
/// `max_coords` coordinates per parameter are checked, sampled with `seed`.
/// `loss_fn` must build a scalar loss deterministically in the graph it is
/// given.
pub fn finite_difference_check<F>(
    store: &ParamStore<f64>,
    eps: f64,
    max_coords: usize,
    seed: u64,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Invalid(format!("eps must be positive, got {eps}")));
    }
    let analytic = {
        let mut g = Graph::new();
        let loss = loss_fn(store, &mut g)?;
        let v = g.value(loss).item().unwrap_or(f64::NAN);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {v}")));
        }
        g.backward(loss)?
    };

    let mut eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let loss = loss_fn(s, &mut g)?;
        let v = g.value(loss).item().ok_or_else(|| {
            Error::NonScalarLoss(g.value(loss).shape().to_vec())
        })?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let names: Vec<String> = store
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.name.clone())
        .collect();
    for name in names {
        let numel = store.get(&name)?.value.numel();
        let coords: Vec<usize> = if numel <= max_coords {
            (0..numel).collect()
        } else {
            let mut picked = sample(&mut rng, numel, max_coords).into_vec();
            picked.sort_unstable();
            picked
        };
        for idx in coords {
            let w = store.get(&name)?.value.data()[idx];
            let h = eps * (1.0 + w.abs());
            probe.get_mut(&name)?.value.data_mut()[idx] = w + h;
            let plus = eval(&probe)?;
            probe.get_mut(&name)?.value.data_mut()[idx] = w - h;
            let minus = eval(&probe)?;
            probe.get_mut(&name)?.value.data_mut()[idx] = w;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(&name).map_or(0.0, |t| t.data()[idx]);
            let rel = (a - numeric).abs() / f64::max(GRAD_FLOOR, a.abs() + numeric.abs());
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap())
            .unwrap();
        let report = finite_difference_check(&store, 1e-6, 64, 0, |s, g| {
            let w = g.param(s, "w")?;
            let sq = g.mul(w, w)?;
            g.sum(sq)
        })
        .unwrap();
        assert_eq!(report.coords_checked, 2);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // relu(w) at w = 0: analytic says 0, the central difference says 1/2
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_f64(&[1], &[0.0]).unwrap()).unwrap();
        let report = finite_difference_check(&store, 1e-6, 64, 0, |s, g| {
            let w = g.param(s, "w")?;
            let r = g.relu(w)?;
            g.sum(r)
        })
        .unwrap();
        assert!(report.max_rel_error > 0.5);
    }

    #[test]
    fn structurally_zero_gradient_passes() {
        // softmax rows always sum to one
        let mut store = ParamStore::new();
        store
            .insert("x", Tensor::from_f64(&[2, 3], &[0.3, -1.2, 2.0, 0.7, 0.1, -0.4]).unwrap())
            .unwrap();
        let report = finite_difference_check(&store, 1e-6, 64, 0, |s, g| {
            let x = g.param(s, "x")?;
            let p = g.softmax(x)?;
            g.sum(p)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn non_finite_loss_is_error() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_f64(&[1], &[1.0]).unwrap()).unwrap();
        let r = finite_difference_check(&store, 1e-6, 64, 0, |s, g| {
            let w = g.param(s, "w")?;
            let big = g.scale(w, f64::INFINITY)?;
            g.sum(big)
        });
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
