use std::io::Write;
use std::time::Instant;

use sha2::{Digest, Sha256};

use super::trace::{trace_train_step, StepSpec};
use super::{classifier_params, count_trainable_params};
use crate::error::{Error, Result};

pub const FLOP_CONVENTION: &str = "FLOPs count one multiply-add as 2 and cover matmul and convolution work only";
/// Activations and optimizer state are costed as float32.
pub const BYTES_PER_ELEMENT: u64 = 4;
/// Parameter, gradient, and two Adam moments.
pub const OPTIMIZER_BYTES_PER_PARAM: u64 = 4 * BYTES_PER_ELEMENT;

/// Cost summary for one configuration at a fixed batch shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ResourceReport {
    pub label: String,
    /// Encoder, fusion head and classifier.
    pub trainable_params: usize,
    pub encoder_trainable: usize,
    pub head_trainable: usize,
    pub frozen_params: usize,
    /// Retained-for-backward activation bytes for the whole batch.
    pub activation_bytes: u64,
    /// Activation bytes plus parameter, gradient and Adam state of every
    /// trainable parameter.
    pub memory_bytes: u64,
    pub forward_flops: u64,
    pub backward_flops: u64,
    pub batch: usize,
    pub seq_len: usize,
    pub throughput: Option<f64>,
    pub config_fingerprint: String,
}

impl ResourceReport {
    /// Analytic report for `batch` utterances of `seq_len` input frames.
    /// FLOPs are per example.
    pub fn analytic(label: impl Into<String>, spec: StepSpec<'_>, batch: usize, seq_len: usize) -> Result<Self> {
        let counts = count_trainable_params(spec.encoder, Some(spec.fusion), Some(spec.peft))?;
        let classifier = classifier_params(spec.fusion.output_dim(spec.encoder.model_dim), spec.num_classes);
        let trainable = counts.encoder_trainable + counts.head_trainable + classifier;
        let lengths = vec![seq_len; batch];
        let counter = trace_train_step(spec, &lengths)?;
        let activation_bytes = counter.retained_elements * BYTES_PER_ELEMENT;
        let per = |total: u64| if batch == 0 { 0 } else { total / batch as u64 };
        let fingerprint = {
            let text = format!(
                "{:?}|{}|{}|{}|{}|{}",
                spec.encoder, spec.fusion, spec.peft, spec.num_classes, batch, seq_len
            );
            let digest = Sha256::digest(text.as_bytes());
            digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
        };
        Ok(ResourceReport {
            label: label.into(),
            trainable_params: trainable,
            encoder_trainable: counts.encoder_trainable,
            head_trainable: counts.head_trainable,
            frozen_params: counts.encoder_frozen(),
            activation_bytes,
            memory_bytes: activation_bytes + trainable as u64 * OPTIMIZER_BYTES_PER_PARAM,
            forward_flops: per(counter.forward_flops),
            backward_flops: per(counter.backward_flops),
            batch,
            seq_len,
            throughput: None,
            config_fingerprint: fingerprint,
        })
    }
}

pub fn write_reports_csv<W: Write>(out: W, reports: &[ResourceReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "label",
        "trainable_params",
        "encoder_trainable",
        "head_trainable",
        "frozen_params",
        "activation_bytes",
        "memory_bytes",
        "forward_flops",
        "backward_flops",
        "batch",
        "seq_len",
        "examples_per_sec",
        "config_fingerprint",
    ])?;
    for r in reports {
        w.write_record([
            r.label.clone(),
            r.trainable_params.to_string(),
            r.encoder_trainable.to_string(),
            r.head_trainable.to_string(),
            r.frozen_params.to_string(),
            r.activation_bytes.to_string(),
            r.memory_bytes.to_string(),
            r.forward_flops.to_string(),
            r.backward_flops.to_string(),
            r.batch.to_string(),
            r.seq_len.to_string(),
            r.throughput.map_or(String::new(), |t| format!("{t:.2}")),
            r.config_fingerprint.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text table with right-aligned columns after the first.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(headers.to_vec());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1)));
    for row in rows {
        out.push('\n');
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out.push('\n');
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Throughput {
    /// Median over timed steps.
    pub examples_per_sec: f64,
    pub step_seconds: Vec<f64>,
    pub environment: String,
}

pub fn environment_descriptor() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{}-{}, {threads} hardware threads, {} build",
        std::env::consts::OS,
        std::env::consts::ARCH,
        if cfg!(debug_assertions) { "debug" } else { "release" }
    )
}

/// Runs `step` (which returns the number of examples it processed)
/// `warmup` times untimed, then `timed` times, and reports the median rate.
pub fn measure_throughput(mut step: impl FnMut() -> Result<usize>, warmup: usize, timed: usize) -> Result<Throughput> {
    if timed < 10 {
        return Err(Error::Invalid(format!("need at least 10 timed steps, got {timed}")));
    }
    for _ in 0..warmup {
        step()?;
    }
    let mut rates = Vec::with_capacity(timed);
    let mut seconds = Vec::with_capacity(timed);
    for _ in 0..timed {
        let start = Instant::now();
        let n = step()?;
        let s = start.elapsed().as_secs_f64().max(1e-9);
        seconds.push(s);
        rates.push(n as f64 / s);
    }
    rates.sort_by(f64::total_cmp);
    let mid = rates.len() / 2;
    let median = if rates.len() % 2 == 0 {
        (rates[mid - 1] + rates[mid]) / 2.0
    } else {
        rates[mid]
    };
    Ok(Throughput {
        examples_per_sec: median,
        step_seconds: seconds,
        environment: environment_descriptor(),
    })
}
