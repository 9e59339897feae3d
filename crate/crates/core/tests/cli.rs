//! End-to-end runs of the `hfflab` binary on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
[experiment]
seed = 3

[synth]
pretrain_utterances = 16
train_utterances = 16
test_utterances = 4
min_symbols = 4
max_symbols = 6

[pretrain]
steps = 12
batch_size = 4
warmup_steps = 2
gate_window = 4

[train]
steps = 6
batch_size = 4
warmup_steps = 2
log_every = 3
eval_batch_size = 8
";

fn hfflab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfflab"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.ini"), TINY).unwrap();
    dir
}

#[test]
fn count_params_large_preset_passes_its_gate() {
    let dir = tempfile::tempdir().unwrap();
    let o = hfflab(&["count-params", "--preset", "paper-counting", "--out", "counts"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("linear fusion, 12 taps, depth 1"), "{text}");
    assert!(text.contains("7864960"), "{text}");
    assert!(!text.contains("FAIL"), "{text}");
    let csv = fs::read_to_string(dir.path().join("counts/count_params.csv")).unwrap();
    assert!(csv.starts_with("row,group,reference,computed"));
}

#[test]
fn config_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.ini"), "[train]\nstepz = 3\n").unwrap();
    let o = hfflab(&["count-params", "--config", "bad.ini"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("stepz"), "{}", stderr(&o));

    fs::write(dir.path().join("bad2.ini"), "[pretrain]\nmask_prob = 0\n").unwrap();
    let o = hfflab(&["pretrain", "--config", "bad2.ini"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    let o = hfflab(&["probe-layers", "--preset", "paper-counting"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tiny_dir();
    let o = hfflab(&["probe-layers", "--config", "tiny.ini", "--out", "none"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("hfflab pretrain"), "{}", stderr(&o));
}

#[test]
fn pretrain_then_downstream_commands() {
    let dir = tiny_dir();
    let p = dir.path();
    let o = hfflab(&["pretrain", "--config", "tiny.ini", "--out", "run"], p);
    // twelve steps rarely clear the loss gate; both outcomes are legal here
    assert!(matches!(o.status.code(), Some(0) | Some(3)), "{}", stderr(&o));
    assert!(p.join("run/encoder.ffck").exists());
    assert!(p.join("run/pretrain_gate.txt").exists());
    let losses = fs::read_to_string(p.join("run/pretrain_loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 13);
    assert_eq!(fs::read_to_string(p.join("run/seed.txt")).unwrap().trim(), "3");

    let o = hfflab(&["probe-layers", "--config", "tiny.ini", "--out", "run"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let probes = fs::read_to_string(p.join("run/probe-layers/probe_layers.csv")).unwrap();
    assert_eq!(probes.lines().count(), 7);
    let metrics = fs::read_to_string(p.join("run/probe-layers/metrics/single_0.csv")).unwrap();
    assert!(metrics.starts_with("step,loss,fer,examples_per_sec"));
    assert_eq!(metrics.lines().count(), 3);

    let o = hfflab(&["fusion-table", "--config", "tiny.ini", "--out", "run"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("weight norms"));
    let table = fs::read_to_string(p.join("run/fusion-table/fusion_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 10);
    assert!(p.join("run/fusion-table/resources.csv").exists());

    let o = hfflab(&["comparison", "--config", "tiny.ini", "--out", "run"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = fs::read_to_string(p.join("run/comparison/comparison.csv")).unwrap();
    assert_eq!(rows.lines().count(), 9);
    assert!(rows.contains("HFF-b + adapter, all layers"));
}

#[test]
fn sweep_runs_grid_and_refuses_to_overwrite() {
    let dir = tiny_dir();
    let p = dir.path();
    let o = hfflab(&["pretrain", "--config", "tiny.ini", "--out", "sw"], p);
    assert!(matches!(o.status.code(), Some(0) | Some(3)), "{}", stderr(&o));
    let grid = format!("{TINY}\n[sweep]\ntrain.lr = 1e-3 3e-3\nfusion.spec = single:1 linear:taps=all;depth=1;dim=16\n");
    fs::write(p.join("grid.ini"), grid).unwrap();
    let o = hfflab(&["sweep", "--config", "grid.ini", "--out", "sw"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(p.join("sw/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5, "{summary}");
    assert!(summary.starts_with("run,train.lr,fusion.spec,fer"));
    for i in 0..4 {
        let run = p.join(format!("sw/run_{i:03}"));
        for f in ["config.ini", "seed.txt", "metrics.csv", "resources.csv", "result.txt"] {
            assert!(run.join(f).exists(), "run_{i:03}/{f}");
        }
    }
    let frozen = fs::read_to_string(p.join("sw/run_003/config.ini")).unwrap();
    assert!(frozen.contains("3e-3") || frozen.contains("0.003"), "{frozen}");

    let o = hfflab(&["sweep", "--config", "grid.ini", "--out", "sw"], p);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("already exists"));
}
