use std::fs;
use std::path::{Path, PathBuf};

use super::{corpus, init_run_dir, load_pretrained, require_desk, train_variant, Variant};
use crate::accounting::write_reports_csv;
use crate::config::ExperimentConfig;
use crate::encoder::TapSet;
use crate::error::{Error, Result};
use crate::fusion::{FusionSpec, HffSpec, HffVariant};
use crate::harness::write_metrics_csv;
use crate::peft::PeftSpec;

/// Every combination of the axis values, first axis slowest. No axes gives
/// one empty assignment.
pub fn expand_grid(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut out = vec![Vec::new()];
    for (key, values) in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut next = prefix.clone();
                    next.push((key.clone(), v.clone()));
                    next
                })
            })
            .collect();
    }
    out
}

#[derive(Clone, Debug)]
pub struct SweepRun {
    pub dir: PathBuf,
    pub assignment: Vec<(String, String)>,
    pub test_fer: f64,
    pub final_loss: f64,
    pub trainable_params: usize,
}

fn default_variant(cfg: &ExperimentConfig) -> Result<Variant> {
    let fusion = match cfg.fusion()? {
        Some(f) => f,
        None => FusionSpec::Hff(HffSpec {
            taps: TapSet::all(cfg.encoder.num_layers),
            variant: HffVariant::Balanced,
            fp_dim: cfg.encoder.model_dim / 2,
            final_depth: 3,
            final_dim: cfg.encoder.model_dim,
        }),
    };
    let peft = cfg.peft()?.unwrap_or(PeftSpec::None);
    Ok(Variant::new(format!("{fusion} + {peft}"), fusion, peft))
}

/// Trains the configured head and PEFT strategy once per grid point. All
/// configs are resolved and every run directory is checked before the first
/// run starts; existing directories are never reused.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SweepRun>> {
    require_desk(cfg, "sweep")?;
    let checkpoint = cfg.checkpoint_path(out);
    let mut base = cfg.clone();
    base.sweep.clear();
    base.checkpoint = Some(checkpoint);
    let mut plans = Vec::new();
    for (i, assignment) in expand_grid(&cfg.sweep).into_iter().enumerate() {
        let mut run = base.clone();
        for (key, value) in &assignment {
            run.set(key, value)?;
        }
        run.validate()?;
        plans.push((out.join(format!("run_{i:03}")), assignment, run));
    }
    let summary = out.join("summary.csv");
    for path in plans.iter().map(|p| &p.0).chain([&summary]) {
        if path.exists() {
            return Err(Error::Invalid(format!("{} already exists; refusing to overwrite", path.display())));
        }
    }
    let encoder = load_pretrained(&base, out)?;
    let mut runs = Vec::with_capacity(plans.len());
    for (dir, assignment, run) in plans {
        init_run_dir(&dir, &run)?;
        let variant = default_variant(&run)?;
        let result = train_variant(&run, &corpus(&run)?, &encoder, &variant)?;
        write_metrics_csv(fs::File::create(dir.join("metrics.csv"))?, &result.history)?;
        write_reports_csv(fs::File::create(dir.join("resources.csv"))?, &[result.report.clone()])?;
        fs::write(dir.join("result.txt"), format!("fer {:.6}\n", result.test_fer))?;
        runs.push(SweepRun {
            dir,
            assignment,
            test_fer: result.test_fer,
            final_loss: result.history.last().map_or(f64::NAN, |m| m.loss),
            trainable_params: result.report.trainable_params,
        });
    }
    let mut w = csv::Writer::from_path(&summary)?;
    let mut header = vec!["run".to_string()];
    header.extend(cfg.sweep.iter().map(|(k, _)| k.clone()));
    header.extend(["fer", "final_loss", "trainable_params"].map(String::from));
    w.write_record(&header)?;
    for r in &runs {
        let mut row = vec![r.dir.file_name().map_or(String::new(), |n| n.to_string_lossy().into_owned())];
        row.extend(r.assignment.iter().map(|(_, v)| v.clone()));
        row.extend([format!("{:.6}", r.test_fer), format!("{:.6}", r.final_loss), r.trainable_params.to_string()]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_expansion() {
        assert_eq!(expand_grid(&[]), vec![Vec::<(String, String)>::new()]);
        let axes = vec![
            ("a".to_string(), vec!["1".to_string(), "2".to_string()]),
            ("b".to_string(), vec!["x".to_string(), "y".to_string(), "z".to_string()]),
        ];
        let g = expand_grid(&axes);
        assert_eq!(g.len(), 6);
        assert_eq!(g[1], vec![("a".into(), "1".into()), ("b".into(), "y".into())]);
    }
}
