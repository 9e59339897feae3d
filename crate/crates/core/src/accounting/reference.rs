//! Published parameter counts for the 24-layer, 1024-wide model and the
//! configurations that reproduce them.

use super::{count_trainable_params, encoder_params};
use crate::encoder::{EncoderConfig, TapSet};
use crate::error::Result;
use crate::fusion::{FusionSpec, HffSpec, HffVariant, LinearFusionSpec};
use crate::peft::{AdapterLayers, PeftSpec};

/// One reference count and how our closed-form count compares to it.
#[derive(Clone, Debug, PartialEq)]
pub struct CountRow {
    pub label: String,
    /// Where the reference number is printed.
    pub group: &'static str,
    pub reference: f64,
    pub computed: usize,
    /// Allowed relative deviation; `None` when only reported.
    pub tolerance: Option<f64>,
    /// Whether the row takes part in the pass/fail gate.
    pub gated: bool,
}

impl CountRow {
    /// Signed relative deviation of the computed count from the reference.
    pub fn deviation(&self) -> f64 {
        (self.computed as f64 - self.reference) / self.reference
    }

    pub fn within_tolerance(&self) -> bool {
        self.tolerance.is_none_or(|tol| self.deviation().abs() <= tol)
    }

    pub fn status(&self) -> &'static str {
        match (self.within_tolerance(), self.gated) {
            (true, true) => "ok",
            (false, true) => "FAIL",
            (true, false) => "reported",
            (false, false) => "reported (outside tolerance)",
        }
    }
}

fn linear(taps: TapSet, depth: usize) -> FusionSpec {
    FusionSpec::Linear(LinearFusionSpec { taps, depth, dim: 640 })
}

fn hff(taps: TapSet, variant: HffVariant) -> FusionSpec {
    FusionSpec::Hff(HffSpec {
        taps,
        variant,
        fp_dim: 512,
        final_depth: 3,
        final_dim: 768,
    })
}

/// Reference rows at the 24-layer preset. Linear projectors use width 640
/// and hierarchical heads FP width 512 with a 768-wide final stack; both
/// widths are the only ones consistent with the published totals.
pub fn paper_count_rows() -> Result<Vec<CountRow>> {
    let cfg = EncoderConfig::large();
    let n = cfg.num_layers;
    let taps = |idx: &[usize]| TapSet::new(idx.to_vec(), n);
    let twelve = TapSet::evenly_spaced(12, n)?;
    let upper = AdapterLayers::upper_alternate(n)?;
    let adapter = |layers: AdapterLayers, d: usize| PeftSpec::Adapter { layers, bottleneck: d };

    let head = |spec: &FusionSpec| count_trainable_params(&cfg, Some(spec), None).map(|c| c.head_trainable);
    let enc = |spec: &PeftSpec| count_trainable_params(&cfg, None, Some(spec)).map(|c| c.encoder_trainable);
    let hff_b = hff(twelve.clone(), HffVariant::Balanced);

    let mut rows = Vec::new();
    let mut push = |label: String, group, reference: f64, computed, tolerance, gated| {
        rows.push(CountRow {
            label,
            group,
            reference,
            computed,
            tolerance,
            gated,
        })
    };

    for layer in [11, 23] {
        push(
            format!("linear fusion, tap {{{layer}}}, depth 1"),
            "taps",
            0.6e6,
            head(&linear(taps(&[layer])?, 1))?,
            Some(0.15),
            true,
        );
    }
    for (idx, reference) in [
        (&[11, 23][..], 1.3e6),
        (&[5, 11, 17, 23][..], 2.6e6),
        (&[2, 5, 8, 11, 14, 17, 20, 23][..], 5.2e6),
    ] {
        let t = taps(idx)?;
        push(format!("linear fusion, {} taps, depth 1", t.len()), "taps", reference, head(&linear(t, 1))?, Some(0.02), true);
    }
    for (depth, reference, group) in [(1, 7.9e6, "taps, depth"), (2, 8.3e6, "depth"), (3, 8.7e6, "depth"), (4, 9.1e6, "depth")] {
        push(
            format!("linear fusion, 12 taps, depth {depth}"),
            group,
            reference,
            head(&linear(twelve.clone(), depth))?,
            Some(0.02),
            true,
        );
    }
    push("HFF-b, 12 taps".into(), "HFF comparison table", 12.3e6, head(&hff_b)?, Some(0.02), true);
    push(
        "HFF-ub, 12 taps".into(),
        "HFF comparison table",
        12.3e6,
        head(&hff(twelve.clone(), HffVariant::Unbalanced))?,
        None,
        false,
    );
    for (d, reference) in [(128, 6.4e6), (256, 13.3e6), (512, 25.9e6)] {
        push(
            format!("adapter d={d}, all layers"),
            "comparison",
            reference,
            enc(&adapter(AdapterLayers::All, d))?,
            Some(0.05),
            true,
        );
    }
    push(
        format!("adapter d=128, layers {{{}}}", upper_label(&upper)),
        "comparison",
        2.3e6,
        enc(&adapter(upper.clone(), 128))?,
        Some(0.05),
        false,
    );
    push("FTHS (top block)".into(), "comparison", 25.4e6, enc(&PeftSpec::Fths)?, Some(0.05), true);
    push("BitFit".into(), "comparison", 0.1e6, enc(&PeftSpec::BitFit)?, Some(1.0), false);
    push("fine-tune all".into(), "comparison", 606.6e6, encoder_params(&cfg), Some(0.05), false);
    push(
        "HFF-b + adapter d=128, upper layers".into(),
        "comparison",
        13.9e6,
        head(&hff_b)? + enc(&adapter(upper, 128))?,
        Some(0.05),
        false,
    );
    push(
        "HFF-b + adapter d=128, all layers".into(),
        "comparison",
        18.6e6,
        head(&hff_b)? + enc(&adapter(AdapterLayers::All, 128))?,
        Some(0.05),
        false,
    );
    Ok(rows)
}

fn upper_label(layers: &AdapterLayers) -> String {
    match layers {
        AdapterLayers::All => "all".into(),
        AdapterLayers::Subset(t) => t.indices().iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", "),
    }
}
