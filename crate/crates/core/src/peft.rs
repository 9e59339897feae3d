//! Fine-tuning strategies applied to an encoder: full, top block only,
//! bias-only, and residual bottleneck adapters.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{layer_prefix, Encoder, EncoderConfig, TapSet};
use crate::error::{Error, Result};
use crate::layers::{affine, init_affine, init_norm, norm};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

/// Blocks that receive an adapter.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum AdapterLayers {
    All,
    Subset(TapSet),
}

impl AdapterLayers {
    pub fn resolve(&self, num_layers: usize) -> Result<TapSet> {
        match self {
            AdapterLayers::All => Ok(TapSet::all(num_layers)),
            AdapterLayers::Subset(t) => TapSet::new(t.indices().to_vec(), num_layers),
        }
    }

    /// Every other block of the upper half, ending at the top block
    /// (`{13, 15, ..., 23}` for 24 blocks, `{3, 5}` for 6).
    pub fn upper_alternate(num_layers: usize) -> Result<Self> {
        let idx = (num_layers / 2..num_layers)
            .filter(|i| (num_layers - 1 - i) % 2 == 0)
            .collect();
        Ok(AdapterLayers::Subset(TapSet::new(idx, num_layers)?))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum PeftSpec {
    /// Encoder fully frozen.
    None,
    Full,
    /// Only the highest block is trained.
    Fths,
    /// Only bias vectors and layer-norm offsets of the encoder are trained.
    BitFit,
    Adapter { layers: AdapterLayers, bottleneck: usize },
}

impl PeftSpec {
    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        if let PeftSpec::Adapter { layers, bottleneck } = self {
            layers.resolve(cfg.num_layers)?;
            if *bottleneck == 0 || *bottleneck >= cfg.model_dim {
                return Err(Error::config(
                    "peft.bottleneck",
                    format!("must be in 1..{}, got {bottleneck}", cfg.model_dim),
                ));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> &'static str {
        match self {
            PeftSpec::None => "none",
            PeftSpec::Full => "full",
            PeftSpec::Fths => "fths",
            PeftSpec::BitFit => "bitfit",
            PeftSpec::Adapter { .. } => "adapter",
        }
    }

    /// Parses `none`, `full`, `fths`, `bitfit`, or
    /// `adapter:layers=all|i,j,..|upper;d=N`.
    pub fn parse(text: &str, cfg: &EncoderConfig) -> Result<Self> {
        let text = text.trim();
        let (kind, args) = text.split_once(':').unwrap_or((text, ""));
        let plain = |spec: PeftSpec| {
            if args.trim().is_empty() {
                Ok(spec)
            } else {
                Err(Error::config("peft", format!("`{kind}` takes no arguments")))
            }
        };
        let spec = match kind.trim() {
            "none" => plain(PeftSpec::None)?,
            "full" => plain(PeftSpec::Full)?,
            "fths" => plain(PeftSpec::Fths)?,
            "bitfit" => plain(PeftSpec::BitFit)?,
            "adapter" => {
                let mut layers = None;
                let mut bottleneck = None;
                for (key, value) in parse_args(args, "peft")? {
                    match key {
                        "layers" => {
                            layers = Some(match value {
                                "all" => AdapterLayers::All,
                                "upper" => AdapterLayers::upper_alternate(cfg.num_layers)?,
                                list => AdapterLayers::Subset(TapSet::new(
                                    parse_list(list, "peft.layers")?,
                                    cfg.num_layers,
                                )?),
                            })
                        }
                        "d" => bottleneck = Some(parse_usize(value, "peft.d")?),
                        other => return Err(Error::config("peft", format!("unknown adapter key `{other}`"))),
                    }
                }
                PeftSpec::Adapter {
                    layers: layers.unwrap_or(AdapterLayers::All),
                    bottleneck: bottleneck.unwrap_or(cfg.model_dim / 8),
                }
            }
            other => return Err(Error::config("peft", format!("unknown strategy `{other}`"))),
        };
        spec.validate(cfg)?;
        Ok(spec)
    }
}

impl fmt::Display for PeftSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PeftSpec::Adapter { layers, bottleneck } => {
                let layers = match layers {
                    AdapterLayers::All => "all".to_string(),
                    AdapterLayers::Subset(t) => t.to_string(),
                };
                write!(f, "adapter:layers={layers};d={bottleneck}")
            }
            other => f.write_str(other.label()),
        }
    }
}

/// Splits `k=v;k=v` into pairs.
pub(crate) fn parse_args<'a>(args: &'a str, field: &str) -> Result<Vec<(&'a str, &'a str)>> {
    args.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::config(field, format!("expected key=value, got `{kv}`")))
        })
        .collect()
}

pub(crate) fn parse_usize(value: &str, field: &str) -> Result<usize> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(field, format!("expected a non-negative integer, got `{value}`")))
}

pub(crate) fn parse_list(value: &str, field: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse_usize(v, field)).collect()
}

/// Adapter parameter count: pre-norm, down and up projections.
pub const fn adapter_params(model_dim: usize, bottleneck: usize) -> usize {
    2 * model_dim + model_dim * bottleneck + bottleneck + bottleneck * model_dim + model_dim
}

/// Inserts a zero-initialized (identity) adapter after block `layer`.
pub fn insert_adapter<T: Real>(enc: &mut Encoder<T>, layer: usize, bottleneck: usize, seed: u64) -> Result<()> {
    let cfg = *enc.config();
    if layer >= cfg.num_layers {
        return Err(Error::config(
            "peft.layers",
            format!("adapter layer {layer} out of range for {} layers", cfg.num_layers),
        ));
    }
    if bottleneck == 0 || bottleneck >= cfg.model_dim {
        return Err(Error::config(
            "peft.bottleneck",
            format!("must be in 1..{}, got {bottleneck}", cfg.model_dim),
        ));
    }
    let d = cfg.model_dim;
    let prefix = format!("{}/adapter", layer_prefix(layer));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xada9_7e00 + layer as u64));
    let mut store = ParamStore::new();
    init_norm(&mut store, &format!("{prefix}/ln"), d)?;
    init_affine(&mut store, &format!("{prefix}/down"), d, bottleneck, &mut rng)?;
    store.insert(format!("{prefix}/up/weight"), Tensor::zeros(&[bottleneck, d]))?;
    store.insert(format!("{prefix}/up/bias"), Tensor::zeros(&[d]))?;
    enc.params_mut().extend(store)?;
    enc.register_adapter(layer, bottleneck);
    Ok(())
}

/// `x + up(relu(down(norm(x))))`.
pub fn adapter_forward<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = norm(g, store, &format!("{prefix}/ln"), x)?;
    let h = affine(g, store, &format!("{prefix}/down"), h)?;
    let h = g.relu(h)?;
    let h = affine(g, store, &format!("{prefix}/up"), h)?;
    g.add(x, h)
}

/// Applies `spec` to an encoder whose parameters are all present; adapters
/// are inserted as needed. Returns the number of trainable encoder
/// elements afterwards.
pub fn configure_peft<T: Real>(enc: &mut Encoder<T>, spec: &PeftSpec, seed: u64) -> Result<usize> {
    let cfg = *enc.config();
    spec.validate(&cfg)?;
    let params = enc.params_mut();
    params.set_trainable("**", false)?;
    match spec {
        PeftSpec::None => {}
        PeftSpec::Full => {
            params.set_trainable("**", true)?;
        }
        PeftSpec::Fths => {
            params.set_trainable(&format!("{}/**", layer_prefix(cfg.num_layers - 1)), true)?;
        }
        PeftSpec::BitFit => {
            params.set_trainable("encoder/**/bias", true)?;
        }
        PeftSpec::Adapter { layers, bottleneck } => {
            for layer in layers.resolve(cfg.num_layers)?.indices() {
                if !enc.adapters().contains_key(layer) {
                    insert_adapter(enc, *layer, *bottleneck, seed)?;
                }
            }
            let params = enc.params_mut();
            params.set_trainable("**", false)?;
            params.set_trainable("encoder/*/adapter/**", true)?;
        }
    }
    Ok(enc.params().trainable_elements())
}

/// Smallest block index holding a trainable parameter, or `None` when the
/// encoder blocks are fully frozen.
pub fn lowest_trainable_depth<T: Real>(enc: &Encoder<T>) -> Option<usize> {
    enc.trainable_layers().into_iter().next()
}

/// Names and sizes of the parameters BitFit trains.
pub fn bitfit_inventory<T: Real>(enc: &Encoder<T>) -> Vec<(String, usize)> {
    enc.params()
        .iter()
        .filter(|p| p.name.ends_with("/bias") && !p.name.contains("/adapter/"))
        .map(|p| (p.name.clone(), p.value.numel()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            num_layers: 4,
            model_dim: 8,
            num_heads: 2,
            ffn_expansion: 2,
            conv_kernel: 3,
            frontend_subsampling: 4,
            input_dim: 4,
        }
    }

    #[test]
    fn parse_round_trip() {
        let cfg = EncoderConfig::desk();
        for text in ["none", "full", "fths", "bitfit", "adapter:layers=all;d=8", "adapter:layers=3,5;d=16"] {
            assert_eq!(PeftSpec::parse(text, &cfg).unwrap().to_string(), text);
        }
        assert_eq!(
            PeftSpec::parse("adapter:layers=upper;d=8", &cfg).unwrap().to_string(),
            "adapter:layers=3,5;d=8"
        );
        assert!(PeftSpec::parse("adapter:d=64", &cfg).is_err());
        assert!(PeftSpec::parse("adapter:layers=6", &cfg).is_err());
        assert!(PeftSpec::parse("lora", &cfg).is_err());
        assert!(PeftSpec::parse("full:x=1", &cfg).is_err());
    }

    #[test]
    fn upper_alternate_matches_reference_sets() {
        let AdapterLayers::Subset(t) = AdapterLayers::upper_alternate(24).unwrap() else { panic!() };
        assert_eq!(t.indices(), &[13, 15, 17, 19, 21, 23]);
        let AdapterLayers::Subset(t) = AdapterLayers::upper_alternate(6).unwrap() else { panic!() };
        assert_eq!(t.indices(), &[3, 5]);
    }

    #[test]
    fn strategies_select_expected_params() {
        let mut enc = Encoder::<f64>::build(small(), 0).unwrap();
        configure_peft(&mut enc, &PeftSpec::Fths, 0).unwrap();
        assert_eq!(lowest_trainable_depth(&enc), Some(3));
        assert!(!enc.frontend_trainable());

        configure_peft(&mut enc, &PeftSpec::None, 0).unwrap();
        assert_eq!(lowest_trainable_depth(&enc), None);

        let n = configure_peft(&mut enc, &PeftSpec::BitFit, 0).unwrap();
        let expect: usize = bitfit_inventory(&enc).iter().map(|(_, n)| n).sum();
        assert_eq!(n, expect);
        assert!(enc.params().iter().filter(|p| p.trainable).all(|p| p.name.ends_with("/bias")));

        let spec = PeftSpec::Adapter {
            layers: AdapterLayers::Subset(TapSet::new(vec![1, 3], 4).unwrap()),
            bottleneck: 2,
        };
        let n = configure_peft(&mut enc, &spec, 0).unwrap();
        assert_eq!(n, 2 * adapter_params(8, 2));
        assert_eq!(lowest_trainable_depth(&enc), Some(1));
    }

    #[test]
    fn adapter_errors() {
        let mut enc = Encoder::<f64>::build(small(), 0).unwrap();
        assert!(insert_adapter(&mut enc, 4, 2, 0).unwrap_err().to_string().contains("out of range"));
        assert!(insert_adapter(&mut enc, 0, 8, 0).is_err());
    }

    #[test]
    fn adapter_hand_computed() {
        // dim 2, bottleneck 1: ln(x) of [1, 3] is [-1, 1] (up to eps)
        let mut s = ParamStore::<f64>::new();
        init_norm(&mut s, "a/ln", 2).unwrap();
        s.insert("a/down/weight", Tensor::from_f64(&[2, 1], &[0.0, 2.0]).unwrap()).unwrap();
        s.insert("a/down/bias", Tensor::from_f64(&[1], &[0.5]).unwrap()).unwrap();
        s.insert("a/up/weight", Tensor::from_f64(&[1, 2], &[1.0, -1.0]).unwrap()).unwrap();
        s.insert("a/up/bias", Tensor::from_f64(&[2], &[0.0, 0.25]).unwrap()).unwrap();
        let mut g = Graph::inference();
        let x = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 3.0]).unwrap());
        let y = adapter_forward(&mut g, &s, "a", x).unwrap();
        let n = 1.0 / (1.0f64 + 1e-5).sqrt();
        // h = relu(2n + 0.5); out = x + [h, -h + 0.25]
        let h = 2.0 * n + 0.5;
        let want = [1.0 + h, 3.0 - h + 0.25];
        for (a, b) in g.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
