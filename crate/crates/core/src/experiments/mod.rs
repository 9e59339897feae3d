//! Subcommand bodies: pretraining, layer probes, fusion tables, the
//! baseline comparison, parameter counting and sweeps.
//!
//! Every command that trains writes its resolved config, seed, metrics and
//! resource report into its output directory.

mod sweep;

use std::fs;
use std::path::{Path, PathBuf};

pub use sweep::{cmd_sweep, expand_grid, SweepRun};

use crate::accounting::{
    count_trainable_params, measure_throughput, paper_count_rows, write_reports_csv, CountRow, ResourceReport, StepSpec,
};
use crate::config::{ExperimentConfig, Preset};
use crate::encoder::{Encoder, TapSet};
use crate::error::{Error, Result};
use crate::fusion::{FusionSpec, HffSpec, HffVariant, LinearFusionSpec};
use crate::harness::{
    generate_corpus, pretrain_masked_prediction, timed_step, train_downstream, write_metrics_csv, Adam, Batch, Corpus, Metrics,
    Model, PretrainOutcome,
};
use crate::peft::{configure_peft, AdapterLayers, PeftSpec};

/// Input frames per utterance used for analytic cost reports.
pub const REPORT_SEQ_LEN: usize = 128;

/// A fusion head plus encoder adaptation strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub fusion: FusionSpec,
    pub peft: PeftSpec,
}

impl Variant {
    pub fn new(label: impl Into<String>, fusion: FusionSpec, peft: PeftSpec) -> Self {
        Variant {
            label: label.into(),
            fusion,
            peft,
        }
    }

    /// Frozen encoder with the given head, labelled by the head's text form.
    pub fn frozen(fusion: FusionSpec) -> Self {
        Variant::new(fusion.to_string(), fusion, PeftSpec::None)
    }
}

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub variant: Variant,
    pub head_params: usize,
    pub encoder_trainable: usize,
    pub test_fer: f64,
    pub history: Vec<Metrics>,
    /// Per-tap weight norms of linear fusion heads.
    pub weight_norms: Option<Vec<(usize, f64)>>,
    pub report: ResourceReport,
}

pub(crate) fn require_desk(cfg: &ExperimentConfig, command: &str) -> Result<()> {
    if cfg.preset != Preset::Desk {
        return Err(Error::config(
            "experiment.preset",
            format!("`{command}` trains models; the paper-counting preset only supports count-params"),
        ));
    }
    Ok(())
}

/// Creates `dir` (and parents) and records the resolved config and seed.
pub fn init_run_dir(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.ini"), cfg.to_ini_string())?;
    fs::write(dir.join("seed.txt"), format!("{}\n", cfg.seed))?;
    Ok(())
}

pub fn corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    generate_corpus(&cfg.synth, cfg.seed)
}

#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub outcome: PretrainOutcome,
    pub gate_passed: bool,
    pub checkpoint: PathBuf,
}

/// Pretrains a fresh encoder on the pretraining split and saves it.
pub fn pretrain_encoder(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<(Encoder<f32>, PretrainOutcome)> {
    let mut encoder = Encoder::build(cfg.encoder, cfg.seed)?;
    let mut pcfg = cfg.pretrain.clone();
    pcfg.seed = cfg.seed;
    let outcome = pretrain_masked_prediction(&mut encoder, &corpus.pretrain, &pcfg)?;
    Ok((encoder, outcome))
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<PretrainSummary> {
    require_desk(cfg, "pretrain")?;
    init_run_dir(out, cfg)?;
    let corpus = corpus(cfg)?;
    let (encoder, outcome) = pretrain_encoder(cfg, &corpus)?;
    let checkpoint = cfg.checkpoint_path(out);
    encoder.save(&checkpoint)?;
    let mut w = csv::Writer::from_path(out.join("pretrain_loss.csv"))?;
    w.write_record(["step", "loss"])?;
    for (i, l) in outcome.losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l:.6}")])?;
    }
    w.flush()?;
    let gate_passed = outcome.gate_passed(cfg.pretrain.gate_ratio);
    fs::write(
        out.join("pretrain_gate.txt"),
        format!(
            "initial_loss {:.6}\nfinal_loss {:.6}\nratio {:.4}\nrequired {:.4}\npassed {gate_passed}\n",
            outcome.initial_loss,
            outcome.final_loss,
            outcome.final_loss / outcome.initial_loss,
            cfg.pretrain.gate_ratio
        ),
    )?;
    Ok(PretrainSummary {
        outcome,
        gate_passed,
        checkpoint,
    })
}

/// Loads the pretrained encoder named by the config.
pub fn load_pretrained(cfg: &ExperimentConfig, out: &Path) -> Result<Encoder<f32>> {
    let path = cfg.checkpoint_path(out);
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "no pretrained encoder at {}; run `hfflab pretrain` with the same --out first or set experiment.checkpoint",
            path.display()
        )));
    }
    Encoder::load(cfg.encoder, &path)
}

pub fn build_model(cfg: &ExperimentConfig, encoder: &Encoder<f32>, variant: &Variant) -> Result<Model<f32>> {
    let mut encoder = encoder.clone();
    configure_peft(&mut encoder, &variant.peft, cfg.seed)?;
    Model::new(encoder, variant.fusion.clone(), cfg.synth.vocab, cfg.seed)
}

pub fn analytic_report(cfg: &ExperimentConfig, variant: &Variant) -> Result<ResourceReport> {
    let spec = StepSpec {
        encoder: &cfg.encoder,
        fusion: &variant.fusion,
        peft: &variant.peft,
        num_classes: cfg.synth.vocab,
    };
    ResourceReport::analytic(variant.label.clone(), spec, cfg.train.batch_size, REPORT_SEQ_LEN)
}

/// Trains one variant from the pretrained encoder and evaluates it.
pub fn train_variant(cfg: &ExperimentConfig, corpus: &Corpus, encoder: &Encoder<f32>, variant: &Variant) -> Result<VariantResult> {
    let mut model = build_model(cfg, encoder, variant)?;
    let counts = count_trainable_params(&cfg.encoder, Some(&variant.fusion), Some(&variant.peft))?;
    let mut tcfg = cfg.train.clone();
    tcfg.seed = cfg.seed;
    let outcome = train_downstream(&mut model, &corpus.train, &corpus.test, &tcfg)?;
    let weight_norms = match variant.fusion {
        FusionSpec::Linear(_) => Some(model.head.layer_weight_norms()?),
        _ => None,
    };
    log::info!("{}: FER {:.4}", variant.label, outcome.test_fer);
    Ok(VariantResult {
        variant: variant.clone(),
        head_params: counts.head_trainable,
        encoder_trainable: counts.encoder_trainable,
        test_fer: outcome.test_fer,
        history: outcome.history,
        weight_norms,
        report: analytic_report(cfg, variant)?,
    })
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn write_variant_outputs(out: &Path, results: &[VariantResult]) -> Result<()> {
    let dir = out.join("metrics");
    fs::create_dir_all(&dir)?;
    for r in results {
        write_metrics_csv(fs::File::create(dir.join(format!("{}.csv", file_stem(&r.variant.label))))?, &r.history)?;
    }
    let reports: Vec<ResourceReport> = results.iter().map(|r| r.report.clone()).collect();
    write_reports_csv(fs::File::create(out.join("resources.csv"))?, &reports)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub layer: usize,
    pub fer: f64,
}

/// Trains one single-layer probe per tap on the frozen pretrained encoder.
pub fn run_probes(cfg: &ExperimentConfig, corpus: &Corpus, encoder: &Encoder<f32>, taps: &TapSet) -> Result<Vec<VariantResult>> {
    taps.indices()
        .iter()
        .map(|&layer| train_variant(cfg, corpus, encoder, &Variant::frozen(FusionSpec::Single(layer))))
        .collect()
}

pub fn probe_taps(cfg: &ExperimentConfig) -> Result<TapSet> {
    if cfg.probe_taps.is_empty() {
        Ok(TapSet::all(cfg.encoder.num_layers))
    } else {
        TapSet::new(cfg.probe_taps.clone(), cfg.encoder.num_layers)
    }
}

pub fn cmd_probe_layers(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ProbeRow>> {
    require_desk(cfg, "probe-layers")?;
    let taps = probe_taps(cfg)?;
    let encoder = load_pretrained(cfg, out)?;
    let run = out.join("probe-layers");
    init_run_dir(&run, cfg)?;
    let results = run_probes(cfg, &corpus(cfg)?, &encoder, &taps)?;
    write_variant_outputs(&run, &results)?;
    let rows: Vec<ProbeRow> = taps
        .indices()
        .iter()
        .zip(&results)
        .map(|(&layer, r)| ProbeRow { layer, fer: r.test_fer })
        .collect();
    let mut w = csv::Writer::from_path(run.join("probe_layers.csv"))?;
    w.write_record(["layer", "fer"])?;
    for r in &rows {
        w.write_record([r.layer.to_string(), format!("{:.6}", r.fer)])?;
    }
    w.flush()?;
    let mut plot = String::from("# layer fer\n");
    for r in &rows {
        plot.push_str(&format!("{} {:.6}\n", r.layer, r.fer));
    }
    fs::write(run.join("probe_layers.dat"), plot)?;
    Ok(rows)
}

/// Tap counts, projector depths and the two hierarchical variants.
pub fn default_fusion_variants(cfg: &ExperimentConfig) -> Result<Vec<FusionSpec>> {
    let n = cfg.encoder.num_layers;
    let d = cfg.encoder.model_dim;
    let mut out = Vec::new();
    for count in [1, 2, 4, n] {
        out.push(FusionSpec::Linear(LinearFusionSpec {
            taps: TapSet::evenly_spaced(count, n)?,
            depth: 1,
            dim: d,
        }));
    }
    for depth in 2..=4 {
        out.push(FusionSpec::Linear(LinearFusionSpec {
            taps: TapSet::all(n),
            depth,
            dim: d,
        }));
    }
    for variant in [HffVariant::Balanced, HffVariant::Unbalanced] {
        out.push(FusionSpec::Hff(HffSpec {
            taps: TapSet::all(n),
            variant,
            fp_dim: d / 2,
            final_depth: 3,
            final_dim: d,
        }));
    }
    Ok(out)
}

pub fn cmd_fusion_table(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<VariantResult>> {
    require_desk(cfg, "fusion-table")?;
    let mut specs = cfg.fusion_variants()?;
    if specs.is_empty() {
        specs = default_fusion_variants(cfg)?;
    }
    let encoder = load_pretrained(cfg, out)?;
    let run = out.join("fusion-table");
    init_run_dir(&run, cfg)?;
    let corpus = corpus(cfg)?;
    let results = specs
        .into_iter()
        .map(|s| train_variant(cfg, &corpus, &encoder, &Variant::frozen(s)))
        .collect::<Result<Vec<_>>>()?;
    write_variant_outputs(&run, &results)?;
    let mut w = csv::Writer::from_path(run.join("fusion_table.csv"))?;
    w.write_record(["variant", "head_params", "fer"])?;
    for r in &results {
        w.write_record([r.variant.label.clone(), r.head_params.to_string(), format!("{:.6}", r.test_fer)])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(run.join("weight_norms.csv"))?;
    w.write_record(["variant", "layer", "norm"])?;
    for r in &results {
        for (layer, norm) in r.weight_norms.iter().flatten() {
            w.write_record([r.variant.label.clone(), layer.to_string(), format!("{norm:.6}")])?;
        }
    }
    w.flush()?;
    Ok(results)
}

/// Whether the interior taps carry more weight than the two outermost ones.
/// Returns `None` for fewer than three taps.
pub fn middle_heavier_than_extremes(norms: &[(usize, f64)]) -> Option<bool> {
    if norms.len() < 3 {
        return None;
    }
    let ends = (norms[0].1 + norms[norms.len() - 1].1) / 2.0;
    let inner = &norms[1..norms.len() - 1];
    let middle = inner.iter().map(|n| n.1).sum::<f64>() / inner.len() as f64;
    Some(middle > ends)
}

/// The eight rows of the baseline comparison at the config's scale.
pub fn comparison_variants(cfg: &ExperimentConfig) -> Result<Vec<Variant>> {
    let n = cfg.encoder.num_layers;
    let d = cfg.encoder.model_dim;
    let top = FusionSpec::Single(n - 1);
    let hff_b = FusionSpec::Hff(HffSpec {
        taps: TapSet::all(n),
        variant: HffVariant::Balanced,
        fp_dim: d / 2,
        final_depth: 3,
        final_dim: d,
    });
    let adapter = |layers: AdapterLayers| PeftSpec::Adapter {
        layers,
        bottleneck: d / 8,
    };
    let upper = AdapterLayers::upper_alternate(n)?;
    Ok(vec![
        Variant::new("fine-tune all", top.clone(), PeftSpec::Full),
        Variant::new("FTHS", top.clone(), PeftSpec::Fths),
        Variant::new("BitFit", top.clone(), PeftSpec::BitFit),
        Variant::new("adapter, all layers", top.clone(), adapter(AdapterLayers::All)),
        Variant::new("adapter, upper layers", top, adapter(upper.clone())),
        Variant::new("HFF-b", hff_b.clone(), PeftSpec::None),
        Variant::new("HFF-b + adapter, upper layers", hff_b.clone(), adapter(upper)),
        Variant::new("HFF-b + adapter, all layers", hff_b, adapter(AdapterLayers::All)),
    ])
}

#[derive(Clone, Debug)]
pub struct ComparisonRow {
    pub result: VariantResult,
    pub examples_per_sec: f64,
}

/// Median examples/sec of full training steps on a fixed batch, without
/// the frozen-feature cache.
pub fn measure_variant_throughput(cfg: &ExperimentConfig, corpus: &Corpus, encoder: &Encoder<f32>, variant: &Variant) -> Result<f64> {
    let mut model = build_model(cfg, encoder, variant)?;
    let idx: Vec<usize> = (0..cfg.train.batch_size.min(corpus.train.len())).collect();
    let batch = Batch::<f32>::gather(&corpus.train, &idx, cfg.encoder.input_dim)?;
    let mut adam = Adam::new();
    let lr = cfg.train.lr;
    let t = measure_throughput(|| timed_step(&mut model, &mut adam, &batch, lr), 2, 10)?;
    Ok(t.examples_per_sec)
}

pub fn cmd_comparison(cfg: &ExperimentConfig, out: &Path) -> Result<(Vec<ComparisonRow>, Vec<CountRow>)> {
    require_desk(cfg, "comparison")?;
    let encoder = load_pretrained(cfg, out)?;
    let run = out.join("comparison");
    init_run_dir(&run, cfg)?;
    let corpus = corpus(cfg)?;
    let mut rows = Vec::new();
    for variant in comparison_variants(cfg)? {
        let result = train_variant(cfg, &corpus, &encoder, &variant)?;
        let examples_per_sec = measure_variant_throughput(cfg, &corpus, &encoder, &variant)?;
        rows.push(ComparisonRow {
            result,
            examples_per_sec,
        });
    }
    let results: Vec<VariantResult> = rows.iter().map(|r| r.result.clone()).collect();
    write_variant_outputs(&run, &results)?;
    let mut w = csv::Writer::from_path(run.join("comparison.csv"))?;
    w.write_record([
        "row",
        "encoder_trainable",
        "head_params",
        "activation_bytes",
        "examples_per_sec",
        "fer",
    ])?;
    for r in &rows {
        w.write_record([
            r.result.variant.label.clone(),
            r.result.encoder_trainable.to_string(),
            r.result.head_params.to_string(),
            r.result.report.activation_bytes.to_string(),
            format!("{:.2}", r.examples_per_sec),
            format!("{:.6}", r.result.test_fer),
        ])?;
    }
    w.flush()?;
    let reference = paper_count_rows()?;
    write_count_rows(fs::File::create(run.join("reference_counts.csv"))?, &reference)?;
    Ok((rows, reference))
}

pub fn write_count_rows<W: std::io::Write>(out: W, rows: &[CountRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row", "group", "reference", "computed", "deviation_pct", "tolerance_pct", "status"])?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.group.to_string(),
            format!("{:.0}", r.reference),
            r.computed.to_string(),
            format!("{:+.2}", 100.0 * r.deviation()),
            r.tolerance.map_or(String::new(), |t| format!("{:.0}", 100.0 * t)),
            r.status().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Closed-form count of one variant at the config's scale.
#[derive(Clone, Debug, PartialEq)]
pub struct CountLine {
    pub label: String,
    pub encoder_trainable: usize,
    pub head_params: usize,
}

/// Reference rows for the 24-layer model, plus closed-form counts of the
/// comparison rows and configured fusion variants at the config's scale.
pub fn cmd_count_params(cfg: &ExperimentConfig) -> Result<(Vec<CountRow>, Vec<CountLine>)> {
    let mut variants = comparison_variants(cfg)?;
    variants.extend(cfg.fusion_variants()?.into_iter().map(Variant::frozen));
    let lines = variants
        .iter()
        .map(|v| {
            let c = count_trainable_params(&cfg.encoder, Some(&v.fusion), Some(&v.peft))?;
            Ok(CountLine {
                label: v.label.clone(),
                encoder_trainable: c.encoder_trainable,
                head_params: c.head_trainable,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((paper_count_rows()?, lines))
}
