//! Experiment configuration in INI form.
//!
//! Every key is listed in [`SCHEMA`]; anything else is rejected. Fusion and
//! PEFT specs use the text forms of [`FusionSpec::parse`] and
//! [`PeftSpec::parse`]. List values are separated by whitespace.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::{Ini, ParseOption};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionSpec;
use crate::harness::{PretrainConfig, SynthConfig, TrainConfig};
use crate::peft::PeftSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Six-block encoder; every subcommand is available.
    Desk,
    /// 24-block encoder; parameter counting only.
    PaperCounting,
}

impl Preset {
    pub fn encoder(self) -> EncoderConfig {
        match self {
            Preset::Desk => EncoderConfig::desk(),
            Preset::PaperCounting => EncoderConfig::large(),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "desk" => Ok(Preset::Desk),
            "paper-counting" => Ok(Preset::PaperCounting),
            other => Err(Error::config("experiment.preset", format!("expected desk or paper-counting, got `{other}`"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::PaperCounting => "paper-counting",
        })
    }
}

/// Every accepted `section.key`.
pub const SCHEMA: &[&str] = &[
    "experiment.preset",
    "experiment.seed",
    "experiment.checkpoint",
    "experiment.probe_taps",
    "encoder.num_layers",
    "encoder.model_dim",
    "encoder.num_heads",
    "encoder.ffn_expansion",
    "encoder.conv_kernel",
    "encoder.subsampling",
    "encoder.input_dim",
    "synth.vocab",
    "synth.min_frames_per_symbol",
    "synth.max_frames_per_symbol",
    "synth.emission_rank",
    "synth.noise_std",
    "synth.channel_std",
    "synth.self_transition",
    "synth.min_symbols",
    "synth.max_symbols",
    "synth.pretrain_utterances",
    "synth.train_utterances",
    "synth.test_utterances",
    "pretrain.steps",
    "pretrain.batch_size",
    "pretrain.lr",
    "pretrain.warmup_steps",
    "pretrain.mask_prob",
    "pretrain.mask_span",
    "pretrain.codebook_size",
    "pretrain.codebook_dim",
    "pretrain.gate_window",
    "pretrain.gate_ratio",
    "train.steps",
    "train.batch_size",
    "train.lr",
    "train.encoder_lr",
    "train.warmup_steps",
    "train.ema_decay",
    "train.log_every",
    "train.eval_batch_size",
    "train.cache_frozen_features",
    "fusion.spec",
    "fusion.variants",
    "peft.spec",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub synth: SynthConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    /// Pretrained encoder; defaults to `encoder.ffck` in the output directory.
    pub checkpoint: Option<PathBuf>,
    /// Layers probed by `probe-layers`; all layers when empty.
    pub probe_taps: Vec<usize>,
    fusion: Option<String>,
    fusion_variants: Vec<String>,
    peft: Option<String>,
    /// Grid axes of a sweep, in file order.
    pub sweep: Vec<(String, Vec<String>)>,
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn words(value: &str) -> Vec<String> {
    value.split_whitespace().map(str::to_string).collect()
}

impl ExperimentConfig {
    pub fn new(preset: Preset) -> Self {
        ExperimentConfig {
            preset,
            seed: 0,
            encoder: preset.encoder(),
            synth: SynthConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            checkpoint: None,
            probe_taps: Vec::new(),
            fusion: None,
            fusion_variants: Vec::new(),
            peft: None,
            sweep: Vec::new(),
        }
    }

    /// Parses INI text. `preset` overrides `experiment.preset` and selects
    /// the defaults the file's keys are applied to.
    pub fn from_ini_str(text: &str, preset: Option<Preset>) -> Result<Self> {
        let opt = ParseOption {
            enabled_quote: false,
            enabled_escape: false,
            ..ParseOption::default()
        };
        let ini = Ini::load_from_str_opt(text, opt).map_err(|e| Error::config("config", e.to_string()))?;
        let mut entries = Vec::new();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(Error::config(k, "key outside of any section"));
                }
                continue;
            };
            for (k, v) in props.iter() {
                let key = format!("{section}.{k}");
                if entries.iter().any(|(e, _): &(String, String)| *e == key) {
                    return Err(Error::config(key, "given more than once"));
                }
                entries.push((key, v.to_string()));
            }
        }
        let file_preset = entries
            .iter()
            .find(|(k, _)| k == "experiment.preset")
            .map(|(_, v)| v.parse())
            .transpose()?;
        let mut cfg = ExperimentConfig::new(preset.or(file_preset).unwrap_or(Preset::Desk));
        for (key, value) in entries {
            if key == "experiment.preset" {
                continue;
            }
            if let Some(axis) = key.strip_prefix("sweep.") {
                cfg.add_sweep_axis(axis, &value)?;
            } else {
                cfg.set(&key, &value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_ini_str(&text, preset)
    }

    fn add_sweep_axis(&mut self, axis: &str, value: &str) -> Result<()> {
        let key = format!("sweep.{axis}");
        if !SCHEMA.contains(&axis) || axis == "experiment.preset" {
            return Err(Error::config(key, format!("`{axis}` is not a sweepable config key")));
        }
        let values = words(value);
        if values.is_empty() {
            return Err(Error::config(key, "no values"));
        }
        self.sweep.push((axis.to_string(), values));
        Ok(())
    }

    /// Sets one `section.key`. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let e = &mut self.encoder;
        let s = &mut self.synth;
        let p = &mut self.pretrain;
        let t = &mut self.train;
        match key {
            "experiment.preset" => {
                let preset: Preset = v.parse()?;
                if preset != self.preset {
                    return Err(Error::config(key, "the preset cannot be changed after loading"));
                }
            }
            "experiment.seed" => self.seed = parse(key, v)?,
            "experiment.checkpoint" => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "experiment.probe_taps" => {
                self.probe_taps = words(v).iter().map(|w| parse(key, w)).collect::<Result<_>>()?;
            }
            "encoder.num_layers" => e.num_layers = parse(key, v)?,
            "encoder.model_dim" => e.model_dim = parse(key, v)?,
            "encoder.num_heads" => e.num_heads = parse(key, v)?,
            "encoder.ffn_expansion" => e.ffn_expansion = parse(key, v)?,
            "encoder.conv_kernel" => e.conv_kernel = parse(key, v)?,
            "encoder.subsampling" => e.frontend_subsampling = parse(key, v)?,
            "encoder.input_dim" => e.input_dim = parse(key, v)?,
            "synth.vocab" => s.vocab = parse(key, v)?,
            "synth.min_frames_per_symbol" => s.min_frames_per_symbol = parse(key, v)?,
            "synth.max_frames_per_symbol" => s.max_frames_per_symbol = parse(key, v)?,
            "synth.emission_rank" => s.emission_rank = parse(key, v)?,
            "synth.noise_std" => s.noise_std = parse(key, v)?,
            "synth.channel_std" => s.channel_std = parse(key, v)?,
            "synth.self_transition" => s.self_transition = parse(key, v)?,
            "synth.min_symbols" => s.min_symbols = parse(key, v)?,
            "synth.max_symbols" => s.max_symbols = parse(key, v)?,
            "synth.pretrain_utterances" => s.pretrain_utterances = parse(key, v)?,
            "synth.train_utterances" => s.train_utterances = parse(key, v)?,
            "synth.test_utterances" => s.test_utterances = parse(key, v)?,
            "pretrain.steps" => p.steps = parse(key, v)?,
            "pretrain.batch_size" => p.batch_size = parse(key, v)?,
            "pretrain.lr" => p.lr = parse(key, v)?,
            "pretrain.warmup_steps" => p.warmup_steps = parse(key, v)?,
            "pretrain.mask_prob" => p.mask_prob = parse(key, v)?,
            "pretrain.mask_span" => p.mask_span = parse(key, v)?,
            "pretrain.codebook_size" => p.codebook_size = parse(key, v)?,
            "pretrain.codebook_dim" => p.codebook_dim = parse(key, v)?,
            "pretrain.gate_window" => p.gate_window = parse(key, v)?,
            "pretrain.gate_ratio" => p.gate_ratio = parse(key, v)?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.encoder_lr" => t.encoder_lr = parse(key, v)?,
            "train.warmup_steps" => t.warmup_steps = parse(key, v)?,
            "train.ema_decay" => t.ema_decay = parse(key, v)?,
            "train.log_every" => t.log_every = parse(key, v)?,
            "train.eval_batch_size" => t.eval_batch_size = parse(key, v)?,
            "train.cache_frozen_features" => t.cache_frozen_features = parse(key, v)?,
            "fusion.spec" => self.fusion = (!v.is_empty()).then(|| v.to_string()),
            "fusion.variants" => self.fusion_variants = words(v),
            "peft.spec" => self.peft = (!v.is_empty()).then(|| v.to_string()),
            other => return Err(Error::config(other, "unknown config key")),
        }
        Ok(())
    }

    /// Checks every section and that the synthetic frames fit the encoder.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        if self.preset == Preset::Desk {
            self.synth.validate()?;
            if self.synth.input_dim != self.encoder.input_dim {
                return Err(Error::config("encoder.input_dim", format!("synthetic frames have {} features", self.synth.input_dim)));
            }
            if self.synth.subsampling != self.encoder.frontend_subsampling {
                return Err(Error::config("encoder.subsampling", "must match the label window of the corpus"));
            }
        }
        for &tap in &self.probe_taps {
            if tap >= self.encoder.num_layers {
                return Err(Error::config("experiment.probe_taps", format!("layer {tap} out of range")));
            }
        }
        self.fusion()?;
        self.fusion_variants()?;
        self.peft()?;
        Ok(())
    }

    pub fn fusion(&self) -> Result<Option<FusionSpec>> {
        self.fusion.as_deref().map(|f| FusionSpec::parse(f, &self.encoder)).transpose()
    }

    pub fn fusion_variants(&self) -> Result<Vec<FusionSpec>> {
        self.fusion_variants
            .iter()
            .map(|f| FusionSpec::parse(f, &self.encoder))
            .collect()
    }

    pub fn peft(&self) -> Result<Option<PeftSpec>> {
        self.peft.as_deref().map(|p| PeftSpec::parse(p, &self.encoder)).transpose()
    }

    pub fn checkpoint_path(&self, out: &Path) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| out.join("encoder.ffck"))
    }

    /// The fully resolved configuration, every key present. Loading the
    /// result gives back an equal config without sweep axes.
    pub fn to_ini_string(&self) -> String {
        let e = &self.encoder;
        let s = &self.synth;
        let p = &self.pretrain;
        let t = &self.train;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let mut ini = Ini::new();
        ini.with_section(Some("experiment"))
            .set("preset", self.preset.to_string())
            .set("seed", self.seed.to_string())
            .set("checkpoint", self.checkpoint.as_ref().map_or(String::new(), |c| c.display().to_string()))
            .set("probe_taps", list(&self.probe_taps));
        ini.with_section(Some("encoder"))
            .set("num_layers", e.num_layers.to_string())
            .set("model_dim", e.model_dim.to_string())
            .set("num_heads", e.num_heads.to_string())
            .set("ffn_expansion", e.ffn_expansion.to_string())
            .set("conv_kernel", e.conv_kernel.to_string())
            .set("subsampling", e.frontend_subsampling.to_string())
            .set("input_dim", e.input_dim.to_string());
        ini.with_section(Some("synth"))
            .set("vocab", s.vocab.to_string())
            .set("min_frames_per_symbol", s.min_frames_per_symbol.to_string())
            .set("max_frames_per_symbol", s.max_frames_per_symbol.to_string())
            .set("emission_rank", s.emission_rank.to_string())
            .set("noise_std", s.noise_std.to_string())
            .set("channel_std", s.channel_std.to_string())
            .set("self_transition", s.self_transition.to_string())
            .set("min_symbols", s.min_symbols.to_string())
            .set("max_symbols", s.max_symbols.to_string())
            .set("pretrain_utterances", s.pretrain_utterances.to_string())
            .set("train_utterances", s.train_utterances.to_string())
            .set("test_utterances", s.test_utterances.to_string());
        ini.with_section(Some("pretrain"))
            .set("steps", p.steps.to_string())
            .set("batch_size", p.batch_size.to_string())
            .set("lr", p.lr.to_string())
            .set("warmup_steps", p.warmup_steps.to_string())
            .set("mask_prob", p.mask_prob.to_string())
            .set("mask_span", p.mask_span.to_string())
            .set("codebook_size", p.codebook_size.to_string())
            .set("codebook_dim", p.codebook_dim.to_string())
            .set("gate_window", p.gate_window.to_string())
            .set("gate_ratio", p.gate_ratio.to_string());
        ini.with_section(Some("train"))
            .set("steps", t.steps.to_string())
            .set("batch_size", t.batch_size.to_string())
            .set("lr", t.lr.to_string())
            .set("encoder_lr", t.encoder_lr.to_string())
            .set("warmup_steps", t.warmup_steps.to_string())
            .set("ema_decay", t.ema_decay.to_string())
            .set("log_every", t.log_every.to_string())
            .set("eval_batch_size", t.eval_batch_size.to_string())
            .set("cache_frozen_features", t.cache_frozen_features.to_string());
        ini.with_section(Some("fusion"))
            .set("spec", self.fusion.clone().unwrap_or_default())
            .set("variants", self.fusion_variants.join(" "));
        ini.with_section(Some("peft")).set("spec", self.peft.clone().unwrap_or_default());
        let mut out = Vec::new();
        ini.write_to(&mut out).expect("writing to memory");
        String::from_utf8(out).expect("ini output is UTF-8")
    }

    /// Seeds of the pretraining and training stages follow the experiment
    /// seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_ini_str("[train]\nstepz = 3\n", None).unwrap_err();
        assert!(err.to_string().contains("train.stepz"), "{err}");
        let err = ExperimentConfig::from_ini_str("[sweep]\ntrain.nope = 1 2\n", None).unwrap_err();
        assert!(err.to_string().contains("sweep.train.nope"), "{err}");
        assert!(ExperimentConfig::from_ini_str("seed = 1\n", None).is_err());
    }

    #[test]
    fn specs_with_separators_survive() {
        let text = "[fusion]\nspec = linear:taps=1,3,5;depth=2\nvariants = single:5 hff-b:taps=all\n[peft]\nspec = adapter:layers=3,5;d=8\n";
        let cfg = ExperimentConfig::from_ini_str(text, None).unwrap();
        assert!(matches!(cfg.fusion().unwrap(), Some(FusionSpec::Linear(s)) if s.depth == 2 && s.taps.len() == 3));
        assert_eq!(cfg.fusion_variants().unwrap().len(), 2);
        assert_eq!(cfg.peft().unwrap().unwrap().to_string(), "adapter:layers=3,5;d=8");
    }

    #[test]
    fn resolved_config_round_trips() {
        let text = "[experiment]\nseed = 9\nprobe_taps = 0 2 5\n[train]\nlr = 0.003\n[fusion]\nspec = hff-ub:taps=all;fp=16\n";
        let cfg = ExperimentConfig::from_ini_str(text, None).unwrap();
        let again = ExperimentConfig::from_ini_str(&cfg.to_ini_string(), None).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn preset_flag_wins_and_bad_values_name_the_field() {
        let cfg = ExperimentConfig::from_ini_str("[experiment]\npreset = desk\n", Some(Preset::PaperCounting)).unwrap();
        assert_eq!(cfg.encoder.num_layers, 24);
        let err = ExperimentConfig::from_ini_str("[train]\nema_decay = 1.5\n", None).unwrap_err();
        assert!(err.to_string().contains("train.ema_decay"));
        let err = ExperimentConfig::from_ini_str("[encoder]\nmodel_dim = x\n", None).unwrap_err();
        assert!(err.to_string().contains("encoder.model_dim"));
    }

    #[test]
    fn sweep_axes_keep_file_order() {
        let cfg = ExperimentConfig::from_ini_str("[sweep]\nexperiment.seed = 1 2 3\ntrain.lr = 0.001 0.0003\n", None).unwrap();
        assert_eq!(cfg.sweep[0].0, "experiment.seed");
        assert_eq!(cfg.sweep[1].1, vec!["0.001", "0.0003"]);
    }
}
