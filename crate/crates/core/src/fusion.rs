//! Heads over encoder taps: single-layer probes, linear fusion, and
//! balanced / unbalanced hierarchical fusion.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncoderConfig, FeatureTaps, TapSet};
use crate::error::{Error, Result};
use crate::layers::{affine, affine_params, affine_stack, init_affine};
use crate::peft::{parse_args, parse_list, parse_usize};
use crate::tensor::{Graph, ParamStore, Real, Var};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LinearFusionSpec {
    pub taps: TapSet,
    /// Number of affine layers, 1 to 4.
    pub depth: usize,
    /// Hidden and output width.
    pub dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HffVariant {
    Balanced,
    Unbalanced,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct HffSpec {
    pub taps: TapSet,
    pub variant: HffVariant,
    /// Output width of every per-tap (or per-step) projection.
    pub fp_dim: usize,
    pub final_depth: usize,
    pub final_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum FusionSpec {
    Single(usize),
    Linear(LinearFusionSpec),
    Hff(HffSpec),
}

impl FusionSpec {
    pub fn tap_set(&self, num_layers: usize) -> Result<TapSet> {
        match self {
            FusionSpec::Single(i) => TapSet::new(vec![*i], num_layers),
            FusionSpec::Linear(s) => Ok(s.taps.clone()),
            FusionSpec::Hff(s) => Ok(s.taps.clone()),
        }
    }

    pub fn output_dim(&self, model_dim: usize) -> usize {
        match self {
            FusionSpec::Single(_) => model_dim,
            FusionSpec::Linear(s) => s.dim,
            FusionSpec::Hff(s) => s.final_dim,
        }
    }

    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        let taps = self.tap_set(cfg.num_layers)?;
        cfg.validate()?;
        if taps.max() >= cfg.num_layers {
            return Err(Error::config("fusion.taps", format!("tap {} out of range", taps.max())));
        }
        match self {
            FusionSpec::Single(_) => Ok(()),
            FusionSpec::Linear(s) => {
                if !(1..=4).contains(&s.depth) {
                    return Err(Error::config("fusion.depth", format!("must be in 1..=4, got {}", s.depth)));
                }
                if s.dim == 0 {
                    return Err(Error::config("fusion.dim", "must be positive"));
                }
                Ok(())
            }
            FusionSpec::Hff(s) => {
                let min = match s.variant {
                    HffVariant::Balanced => 2,
                    HffVariant::Unbalanced => 3,
                };
                if s.taps.len() < min {
                    return Err(Error::config(
                        "fusion.taps",
                        format!(
                            "{} needs at least {min} taps, got {}; use a single-layer head for one tap",
                            self.kind_name(),
                            s.taps.len()
                        ),
                    ));
                }
                if s.fp_dim == 0 || s.fp_dim > cfg.model_dim {
                    return Err(Error::config(
                        "fusion.fp",
                        format!("must be in 1..={}, got {}", cfg.model_dim, s.fp_dim),
                    ));
                }
                if s.final_depth == 0 || s.final_dim == 0 {
                    return Err(Error::config("fusion.depth", "depth and dim must be positive"));
                }
                Ok(())
            }
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            FusionSpec::Single(_) => "single",
            FusionSpec::Linear(_) => "linear",
            FusionSpec::Hff(HffSpec {
                variant: HffVariant::Balanced,
                ..
            }) => "hff-b",
            FusionSpec::Hff(_) => "hff-ub",
        }
    }

    /// Parses `single:I`, `linear:taps=..;depth=N;dim=N`, or
    /// `hff-b|hff-ub:taps=..;fp=N;depth=N;dim=N`. Taps are a comma list,
    /// `all`, or `spread:N` (N evenly spaced blocks ending at the top).
    /// Omitted widths default to the model width (`fp` to half of it).
    pub fn parse(text: &str, cfg: &EncoderConfig) -> Result<Self> {
        let text = text.trim();
        let (kind, args) = text.split_once(':').unwrap_or((text, ""));
        let spec = match kind.trim() {
            "single" => FusionSpec::Single(parse_usize(args, "fusion.layer")?),
            "linear" | "hff-b" | "hff-ub" => {
                let (mut taps, mut depth, mut dim, mut fp) = (None, None, None, None);
                for (key, value) in parse_args(args, "fusion")? {
                    match key {
                        "taps" => taps = Some(parse_taps(value, cfg.num_layers)?),
                        "depth" => depth = Some(parse_usize(value, "fusion.depth")?),
                        "dim" => dim = Some(parse_usize(value, "fusion.dim")?),
                        "fp" if kind != "linear" => fp = Some(parse_usize(value, "fusion.fp")?),
                        other => {
                            return Err(Error::config("fusion", format!("unknown key `{other}` for {kind}")))
                        }
                    }
                }
                let taps = taps.ok_or_else(|| Error::config("fusion.taps", "missing"))?;
                let dim = dim.unwrap_or(cfg.model_dim);
                if kind == "linear" {
                    FusionSpec::Linear(LinearFusionSpec {
                        taps,
                        depth: depth.unwrap_or(1),
                        dim,
                    })
                } else {
                    FusionSpec::Hff(HffSpec {
                        taps,
                        variant: if kind == "hff-b" {
                            HffVariant::Balanced
                        } else {
                            HffVariant::Unbalanced
                        },
                        fp_dim: fp.unwrap_or(cfg.model_dim / 2),
                        final_depth: depth.unwrap_or(3),
                        final_dim: dim,
                    })
                }
            }
            other => return Err(Error::config("fusion", format!("unknown head kind `{other}`"))),
        };
        spec.validate(cfg)?;
        Ok(spec)
    }
}

fn parse_taps(value: &str, num_layers: usize) -> Result<TapSet> {
    match value {
        "all" => Ok(TapSet::all(num_layers)),
        v => match v.strip_prefix("spread:") {
            Some(n) => TapSet::evenly_spaced(parse_usize(n, "fusion.taps")?, num_layers),
            None => TapSet::new(parse_list(v, "fusion.taps")?, num_layers),
        },
    }
}

impl fmt::Display for FusionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionSpec::Single(i) => write!(f, "single:{i}"),
            FusionSpec::Linear(s) => write!(f, "linear:taps={};depth={};dim={}", s.taps, s.depth, s.dim),
            FusionSpec::Hff(s) => write!(
                f,
                "{}:taps={};fp={};depth={};dim={}",
                self.kind_name(),
                s.taps,
                s.fp_dim,
                s.final_depth,
                s.final_dim
            ),
        }
    }
}

/// Closed-form parameter count of the head described by `spec`.
pub fn head_params(spec: &FusionSpec, model_dim: usize) -> usize {
    let stack = |fan_in: usize, width: usize, depth: usize| {
        affine_params(fan_in, width) + (depth - 1) * affine_params(width, width)
    };
    match spec {
        FusionSpec::Single(_) => 0,
        FusionSpec::Linear(s) => stack(s.taps.len() * model_dim, s.dim, s.depth),
        FusionSpec::Hff(s) => {
            let n = s.taps.len();
            match s.variant {
                HffVariant::Balanced => {
                    n * affine_params(model_dim, s.fp_dim) + stack(n * s.fp_dim, s.final_dim, s.final_depth)
                }
                HffVariant::Unbalanced => {
                    let bottom = n.div_ceil(2);
                    let top = n - bottom;
                    let chain = |len: usize| {
                        affine_params(model_dim, s.fp_dim) + (len - 1) * affine_params(s.fp_dim + model_dim, s.fp_dim)
                    };
                    chain(bottom) + chain(top) + stack(2 * s.fp_dim, s.final_dim, s.final_depth)
                }
            }
        }
    }
}

/// A fusion head and its parameters (`head/...`, all trainable).
#[derive(Clone, Debug)]
pub struct FusionHead<T> {
    spec: FusionSpec,
    model_dim: usize,
    params: ParamStore<T>,
}

fn proj_names(prefix: &str, depth: usize) -> Vec<String> {
    (0..depth).map(|i| format!("{prefix}/proj_{i}")).collect()
}

impl<T: Real> FusionHead<T> {
    pub fn build(spec: FusionSpec, cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        spec.validate(cfg)?;
        let d = cfg.model_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut stack = |params: &mut ParamStore<T>, prefix: &str, fan_in: usize, width: usize, depth: usize| {
            let mut fan = fan_in;
            for name in proj_names(prefix, depth) {
                init_affine(params, &name, fan, width, &mut rng)?;
                fan = width;
            }
            Ok::<_, Error>(())
        };
        match &spec {
            FusionSpec::Single(_) => {}
            FusionSpec::Linear(s) => stack(&mut params, "head/linear", s.taps.len() * d, s.dim, s.depth)?,
            FusionSpec::Hff(s) => {
                let n = s.taps.len();
                let mut fp = ParamStore::new();
                let mut fp_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf9);
                match s.variant {
                    HffVariant::Balanced => {
                        for i in 0..n {
                            init_affine(&mut fp, &format!("head/hff/fp_{i}"), d, s.fp_dim, &mut fp_rng)?;
                        }
                    }
                    HffVariant::Unbalanced => {
                        let bottom = n.div_ceil(2);
                        for (chain, len) in [("bottom", bottom), ("top", n - bottom)] {
                            for step in 0..len {
                                let fan_in = if step == 0 { d } else { s.fp_dim + d };
                                init_affine(&mut fp, &format!("head/hff/{chain}_{step}"), fan_in, s.fp_dim, &mut fp_rng)?;
                            }
                        }
                    }
                }
                params.extend(fp)?;
                let fan_in = match s.variant {
                    HffVariant::Balanced => n * s.fp_dim,
                    HffVariant::Unbalanced => 2 * s.fp_dim,
                };
                stack(&mut params, "head/hff/project", fan_in, s.final_dim, s.final_depth)?;
            }
        }
        Ok(FusionHead {
            spec,
            model_dim: d,
            params,
        })
    }

    pub fn spec(&self) -> &FusionSpec {
        &self.spec
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim(self.model_dim)
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn forward(&self, g: &mut Graph<T>, taps: &FeatureTaps) -> Result<Var> {
        g.in_scope("head", |g| match &self.spec {
            FusionSpec::Single(i) => single_layer_head(taps, *i),
            FusionSpec::Linear(s) => self.linear_forward(g, s, taps),
            FusionSpec::Hff(s) => match s.variant {
                HffVariant::Balanced => self.balanced_forward(g, s, taps),
                HffVariant::Unbalanced => self.unbalanced_forward(g, s, taps),
            },
        })
    }

    fn gather(&self, g: &Graph<T>, taps: &FeatureTaps, set: &TapSet) -> Result<Vec<Var>> {
        set.indices()
            .iter()
            .map(|&i| {
                let v = taps.get(i)?;
                let shape = g.value(v).shape();
                if shape.len() != 2 || shape[1] != self.model_dim {
                    return Err(Error::Invalid(format!(
                        "tap {i} has shape {shape:?}, head expects width {}",
                        self.model_dim
                    )));
                }
                Ok(v)
            })
            .collect()
    }

    fn linear_forward(&self, g: &mut Graph<T>, s: &LinearFusionSpec, taps: &FeatureTaps) -> Result<Var> {
        let parts = self.gather(g, taps, &s.taps)?;
        let x = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 1)? };
        affine_stack(g, &self.params, &proj_names("head/linear", s.depth), x)
    }

    fn balanced_forward(&self, g: &mut Graph<T>, s: &HffSpec, taps: &FeatureTaps) -> Result<Var> {
        let parts = self.gather(g, taps, &s.taps)?;
        let projected = parts
            .iter()
            .enumerate()
            .map(|(i, &x)| affine(g, &self.params, &format!("head/hff/fp_{i}"), x))
            .collect::<Result<Vec<_>>>()?;
        let pairs = projected
            .chunks(2)
            .map(|pair| if pair.len() == 2 { g.concat(pair, 1) } else { Ok(pair[0]) })
            .collect::<Result<Vec<_>>>()?;
        let x = g.concat(&pairs, 1)?;
        affine_stack(g, &self.params, &proj_names("head/hff/project", s.final_depth), x)
    }

    fn unbalanced_forward(&self, g: &mut Graph<T>, s: &HffSpec, taps: &FeatureTaps) -> Result<Var> {
        let parts = self.gather(g, taps, &s.taps)?;
        let bottom = parts.len().div_ceil(2);
        let mut top: Vec<Var> = parts[bottom..].to_vec();
        top.reverse();
        let mut states = Vec::with_capacity(2);
        for (chain, seq) in [("bottom", &parts[..bottom]), ("top", &top[..])] {
            let mut state = affine(g, &self.params, &format!("head/hff/{chain}_0"), seq[0])?;
            for (step, &next) in seq.iter().enumerate().skip(1) {
                let joined = g.concat(&[state, next], 1)?;
                state = affine(g, &self.params, &format!("head/hff/{chain}_{step}"), joined)?;
            }
            states.push(state);
        }
        let x = g.concat(&states, 1)?;
        affine_stack(g, &self.params, &proj_names("head/hff/project", s.final_depth), x)
    }

    /// Per-tap l2 norm of the first projector weight's row slab, in tap order.
    pub fn layer_weight_norms(&self) -> Result<Vec<(usize, f64)>> {
        let FusionSpec::Linear(s) = &self.spec else {
            return Err(Error::Invalid(format!(
                "layer weight norms need a linear fusion head, got {}",
                self.spec.kind_name()
            )));
        };
        let w = &self.params.get("head/linear/proj_0/weight")?.value;
        let width = w.shape()[1];
        let slab = self.model_dim * width;
        Ok(s.taps
            .indices()
            .iter()
            .zip(w.data().chunks_exact(slab))
            .map(|(&layer, rows)| (layer, rows.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()))
            .collect())
    }
}

/// The selected tap, unchanged.
pub fn single_layer_head(taps: &FeatureTaps, index: usize) -> Result<Var> {
    taps.get(index)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::tensor::Tensor;

    fn cfg(d: usize, layers: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: layers,
            model_dim: d,
            num_heads: 2,
            ffn_expansion: 2,
            conv_kernel: 3,
            frontend_subsampling: 4,
            input_dim: 4,
        }
    }

    fn taps(g: &mut Graph<f64>, layers: &[usize], rows: usize, d: usize) -> FeatureTaps {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map: BTreeMap<usize, Var> = layers
            .iter()
            .map(|&l| (l, g.constant(Tensor::randn(&[rows, d], 1.0, &mut rng))))
            .collect();
        FeatureTaps::new(map, vec![rows])
    }

    #[test]
    fn parse_and_display() {
        let c = EncoderConfig::desk();
        for text in [
            "single:3",
            "linear:taps=0,1,2;depth=1;dim=64",
            "hff-b:taps=0,1,2,3,4,5;fp=32;depth=3;dim=64",
            "hff-ub:taps=1,3,5;fp=32;depth=3;dim=64",
        ] {
            assert_eq!(FusionSpec::parse(text, &c).unwrap().to_string(), text);
        }
        assert_eq!(
            FusionSpec::parse("hff-b:taps=all", &c).unwrap().to_string(),
            "hff-b:taps=0,1,2,3,4,5;fp=32;depth=3;dim=64"
        );
        assert!(FusionSpec::parse("hff-b:taps=3", &c).unwrap_err().to_string().contains("single-layer"));
        assert!(FusionSpec::parse("hff-ub:taps=1,3", &c).is_err());
        assert!(FusionSpec::parse("linear:taps=1;depth=5", &c).is_err());
        assert!(FusionSpec::parse("linear:taps=1;fp=3", &c).is_err());
        assert!(FusionSpec::parse("hff-b:taps=1,2;fp=65", &c).is_err());
        assert!(FusionSpec::parse("single:6", &c).is_err());
    }

    #[test]
    fn concat_widths_under_balanced_pairs() {
        let c = cfg(64, 6);
        for (layers, want) in [(&[0usize, 1, 2, 3][..], 128), (&[0, 1, 2][..], 96)] {
            let spec = FusionSpec::Hff(HffSpec {
                taps: TapSet::new(layers.to_vec(), 6).unwrap(),
                variant: HffVariant::Balanced,
                fp_dim: 32,
                final_depth: 3,
                final_dim: 64,
            });
            let head = FusionHead::<f64>::build(spec, &c, 0).unwrap();
            assert_eq!(
                head.params().get("head/hff/project/proj_0/weight").unwrap().value.shape(),
                &[want, 64]
            );
            let mut g = Graph::new();
            let t = taps(&mut g, layers, 5, 64);
            let y = head.forward(&mut g, &t).unwrap();
            assert_eq!(g.value(y).shape(), &[5, 64]);
        }
    }

    #[test]
    fn identity_projector_passes_tap_through() {
        let c = cfg(8, 3);
        let spec = FusionSpec::parse("linear:taps=1;depth=1;dim=8", &c).unwrap();
        let mut head = FusionHead::<f64>::build(spec, &c, 0).unwrap();
        let mut eye = vec![0.0; 64];
        (0..8).for_each(|i| eye[i * 9] = 1.0);
        head.params_mut().get_mut("head/linear/proj_0/weight").unwrap().value = Tensor::from_f64(&[8, 8], &eye).unwrap();
        let mut g = Graph::new();
        let t = taps(&mut g, &[1], 4, 8);
        let y = head.forward(&mut g, &t).unwrap();
        assert_eq!(g.value(y).data(), g.value(t.get(1).unwrap()).data());
    }

    #[test]
    fn counts_match_instances() {
        let c = cfg(16, 6);
        for text in [
            "single:2",
            "linear:taps=0,2,4;depth=3;dim=12",
            "hff-b:taps=0,1,2,3,4;fp=8;depth=3;dim=10",
            "hff-ub:taps=0,1,2,3,4,5;fp=8;depth=2;dim=10",
            "hff-ub:taps=1,2,3;fp=4;depth=3;dim=6",
        ] {
            let spec = FusionSpec::parse(text, &c).unwrap();
            let head = FusionHead::<f32>::build(spec.clone(), &c, 1).unwrap();
            assert_eq!(head.params().num_elements(), head_params(&spec, 16), "{text}");
        }
    }

    #[test]
    fn weight_norms_symmetric_when_uniform() {
        let c = cfg(4, 6);
        let spec = FusionSpec::parse("linear:taps=0,2,5;depth=2;dim=3", &c).unwrap();
        let mut head = FusionHead::<f64>::build(spec, &c, 0).unwrap();
        head.params_mut().get_mut("head/linear/proj_0/weight").unwrap().value = Tensor::full(&[12, 3], 1.0);
        let norms = head.layer_weight_norms().unwrap();
        assert_eq!(norms.iter().map(|n| n.0).collect::<Vec<_>>(), vec![0, 2, 5]);
        assert!(norms.iter().all(|n| (n.1 - 12f64.sqrt()).abs() < 1e-12));
        let hff = FusionHead::<f64>::build(FusionSpec::parse("hff-b:taps=0,1", &c).unwrap(), &c, 0).unwrap();
        assert!(hff.layer_weight_norms().is_err());
    }

    #[test]
    fn unbalanced_chain_split() {
        let c = cfg(8, 6);
        let spec = FusionSpec::parse("hff-ub:taps=all;fp=4;depth=1;dim=8", &c).unwrap();
        let head = FusionHead::<f64>::build(spec, &c, 0).unwrap();
        let names: Vec<&str> = head.params().names().filter(|n| n.ends_with("weight")).collect();
        for chain in ["bottom", "top"] {
            assert_eq!(names.iter().filter(|n| n.contains(chain)).count(), 3);
        }
        // first step of each chain reads one tap, later steps read state + tap
        assert_eq!(head.params().get("head/hff/top_0/weight").unwrap().value.shape(), &[8, 4]);
        assert_eq!(head.params().get("head/hff/top_2/weight").unwrap().value.shape(), &[12, 4]);
    }
}
