use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use hfflab::accounting::{render_table, CountRow};
use hfflab::config::{ExperimentConfig, Preset};
use hfflab::experiments::{
    cmd_comparison, cmd_count_params, cmd_fusion_table, cmd_pretrain, cmd_probe_layers, cmd_sweep, middle_heavier_than_extremes,
    write_count_rows,
};
use hfflab::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_GATE: u8 = 3;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    PaperCounting,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::PaperCounting => Preset::PaperCounting,
        }
    }
}

/// Fusion heads over a frozen conformer encoder: training, probing and cost
/// accounting on a synthetic frame-labelling task.
#[derive(Debug, Parser)]
#[command(name = "hfflab", version)]
struct Cli {
    /// INI experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides experiment.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Masked-prediction pretraining; writes the encoder checkpoint.
    Pretrain,
    /// One single-layer probe per tap on the frozen encoder.
    ProbeLayers,
    /// Linear and hierarchical fusion variants on the frozen encoder.
    FusionTable,
    /// Fine-tuning baselines, PEFT methods and fusion heads side by side.
    Comparison,
    /// Closed-form parameter counts against the published ones.
    CountParams,
    /// Cartesian grid over the [sweep] section.
    Sweep,
}

enum Failure {
    Error(Error),
    Gate(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let preset = cli.preset.map(Preset::from);
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path, preset)?,
        None => ExperimentConfig::new(preset.unwrap_or(Preset::Desk)),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_counts(rows: &[CountRow]) {
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.group.to_string(),
                format!("{:.1}M", r.reference / 1e6),
                r.computed.to_string(),
                format!("{:+.2}%", 100.0 * r.deviation()),
                r.status().to_string(),
            ]
        })
        .collect();
    print!(
        "{}",
        render_table(&["row", "source", "reference", "computed", "deviation", "status"], &table)
    );
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Pretrain => {
            let s = cmd_pretrain(&cfg, out)?;
            println!(
                "pretrain loss {:.4} -> {:.4} (ratio {:.3}, gate {:.2})",
                s.outcome.initial_loss,
                s.outcome.final_loss,
                s.outcome.final_loss / s.outcome.initial_loss,
                cfg.pretrain.gate_ratio
            );
            println!("checkpoint {}", s.checkpoint.display());
            if !s.gate_passed {
                return Err(Failure::Gate("pretraining loss did not fall enough".into()));
            }
        }
        Command::ProbeLayers => {
            let rows = cmd_probe_layers(&cfg, out)?;
            let table: Vec<Vec<String>> = rows.iter().map(|r| vec![r.layer.to_string(), format!("{:.4}", r.fer)]).collect();
            print!("{}", render_table(&["layer", "fer"], &table));
        }
        Command::FusionTable => {
            let results = cmd_fusion_table(&cfg, out)?;
            let table: Vec<Vec<String>> = results
                .iter()
                .map(|r| vec![r.variant.label.clone(), r.head_params.to_string(), format!("{:.4}", r.test_fer)])
                .collect();
            print!("{}", render_table(&["variant", "head params", "fer"], &table));
            for r in &results {
                if let Some(norms) = &r.weight_norms {
                    let text: Vec<String> = norms.iter().map(|(l, n)| format!("{l}:{n:.3}")).collect();
                    let pattern = match middle_heavier_than_extremes(norms) {
                        Some(true) => "middle taps heavier than the extremes",
                        Some(false) => "middle taps not heavier than the extremes",
                        None => "too few taps to compare",
                    };
                    println!("weight norms {}: {} ({pattern})", r.variant.label, text.join(" "));
                }
            }
        }
        Command::Comparison => {
            let (rows, reference) = cmd_comparison(&cfg, out)?;
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.result.variant.label.clone(),
                        r.result.encoder_trainable.to_string(),
                        r.result.head_params.to_string(),
                        r.result.report.activation_bytes.to_string(),
                        format!("{:.1}", r.examples_per_sec),
                        format!("{:.4}", r.result.test_fer),
                    ]
                })
                .collect();
            print!(
                "{}",
                render_table(
                    &["row", "encoder trainable", "head params", "activation bytes", "examples/s", "fer"],
                    &table
                )
            );
            println!();
            print_counts(&reference);
        }
        Command::CountParams => {
            let (rows, lines) = cmd_count_params(&cfg)?;
            if cfg.preset == Preset::PaperCounting {
                print_counts(&rows);
                std::fs::create_dir_all(out).map_err(Error::from)?;
                write_count_rows(std::fs::File::create(out.join("count_params.csv")).map_err(Error::from)?, &rows)?;
            }
            let table: Vec<Vec<String>> = lines
                .iter()
                .map(|l| vec![l.label.clone(), l.encoder_trainable.to_string(), l.head_params.to_string()])
                .collect();
            println!();
            print!("{}", render_table(&["configured row", "encoder trainable", "head params"], &table));
            if cfg.preset == Preset::PaperCounting && rows.iter().any(|r| r.gated && !r.within_tolerance()) {
                return Err(Failure::Gate("a gated parameter count is outside its tolerance".into()));
            }
        }
        Command::Sweep => {
            let runs = cmd_sweep(&cfg, out)?;
            let table: Vec<Vec<String>> = runs
                .iter()
                .map(|r| {
                    let axes: Vec<String> = r.assignment.iter().map(|(k, v)| format!("{k}={v}")).collect();
                    vec![display(&r.dir), axes.join(" "), format!("{:.4}", r.test_fer)]
                })
                .collect();
            print!("{}", render_table(&["run", "assignment", "fer"], &table));
        }
    }
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Gate(msg)) => {
            eprintln!("gate failed: {msg}");
            ExitCode::from(EXIT_GATE)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config { .. }) { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}
