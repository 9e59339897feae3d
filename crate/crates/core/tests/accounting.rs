//! Closed-form parameter counts, the analytic cost model and the live op
//! counters must agree with each other and with hand arithmetic.

use hfflab::accounting::{count_trainable_params, paper_count_rows, trace_train_step, ResourceReport, StepSpec};
use hfflab::config::{ExperimentConfig, Preset};
use hfflab::encoder::{Encoder, EncoderConfig};
use hfflab::experiments::{comparison_variants, default_fusion_variants, REPORT_SEQ_LEN};
use hfflab::fusion::FusionSpec;
use hfflab::harness::{generate_corpus, Batch, Model, SynthConfig};
use hfflab::peft::{configure_peft, PeftSpec};
use hfflab::tensor::Graph;
use proptest::prelude::*;

fn affine(fan_in: usize, fan_out: usize) -> usize {
    fan_in * fan_out + fan_out
}

#[test]
fn reference_rows_match_hand_arithmetic() {
    let rows = paper_count_rows().unwrap();
    let get = |label: &str| rows.iter().find(|r| r.label == label).unwrap_or_else(|| panic!("{label}")).computed;
    let d = 1024;
    for depth in 1..=4 {
        let expected = affine(12 * d, 640) + (depth - 1) * affine(640, 640);
        assert_eq!(get(&format!("linear fusion, 12 taps, depth {depth}")), expected);
    }
    assert_eq!(get("linear fusion, 12 taps, depth 1"), 7_864_960);
    let hff_b = 12 * affine(d, 512) + affine(12 * 512, 768) + 2 * affine(768, 768);
    assert_eq!(hff_b, 12_198_144);
    assert_eq!(get("HFF-b, 12 taps"), hff_b);
    for (bottleneck, expected) in [(128, 6_368_256), (256, 12_662_784), (512, 25_251_840)] {
        let layer_norm = 2 * d;
        assert_eq!(24 * (layer_norm + affine(d, bottleneck) + affine(bottleneck, d)), expected);
        assert_eq!(get(&format!("adapter d={bottleneck}, all layers")), expected);
    }
    // 23 D^2 + K D + 30 D with K = 32
    assert_eq!(get("FTHS (top block)"), 23 * d * d + 32 * d + 30 * d);
}

#[test]
fn gated_reference_rows_are_within_tolerance() {
    for row in paper_count_rows().unwrap() {
        if row.gated {
            assert!(row.within_tolerance(), "{} deviates {:+.2}%", row.label, 100.0 * row.deviation());
        }
    }
}

fn instantiated_counts(cfg: EncoderConfig, fusion: &FusionSpec, peft: &PeftSpec) -> (usize, usize, usize) {
    let mut enc: Encoder<f32> = Encoder::build(cfg, 0).unwrap();
    configure_peft(&mut enc, peft, 0).unwrap();
    let m = Model::new(enc, fusion.clone(), 12, 0).unwrap();
    (
        m.encoder.params().trainable_elements(),
        m.encoder.params().num_elements(),
        m.head.params().num_elements(),
    )
}

fn desk_variants() -> Vec<(FusionSpec, PeftSpec)> {
    let cfg = ExperimentConfig::new(Preset::Desk);
    let mut out: Vec<(FusionSpec, PeftSpec)> = comparison_variants(&cfg)
        .unwrap()
        .into_iter()
        .map(|v| (v.fusion, v.peft))
        .collect();
    out.extend(default_fusion_variants(&cfg).unwrap().into_iter().map(|f| (f, PeftSpec::None)));
    out
}

#[test]
fn closed_form_counts_match_instantiated_models_at_desk_scale() {
    let cfg = EncoderConfig::desk();
    for (fusion, peft) in desk_variants() {
        let c = count_trainable_params(&cfg, Some(&fusion), Some(&peft)).unwrap();
        let (trainable, total, head) = instantiated_counts(cfg, &fusion, &peft);
        assert_eq!(c.encoder_trainable, trainable, "{fusion} + {peft}");
        assert_eq!(c.encoder_total, total, "{fusion} + {peft}");
        assert_eq!(c.head_trainable, head, "{fusion} + {peft}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn closed_form_counts_match_random_configs(
        num_layers in 3usize..6,
        heads in 1usize..4,
        head_dim in 2usize..6,
        kernel in 1usize..6,
        bottleneck in 1usize..4,
        fp_pick in 0usize..64,
        depth in 1usize..4,
        which in 0usize..4,
    ) {
        let cfg = EncoderConfig {
            num_layers,
            model_dim: heads * head_dim * 2,
            num_heads: heads,
            ffn_expansion: 4,
            conv_kernel: kernel,
            frontend_subsampling: 4,
            input_dim: 5,
        };
        let fp = 1 + fp_pick % cfg.model_dim;
        let fusion = match which {
            0 => format!("single:{}", num_layers - 1),
            1 => format!("linear:taps=all;depth={depth};dim={fp}"),
            2 => format!("hff-b:taps=all;fp={fp};depth={depth};dim=7"),
            _ => format!("hff-ub:taps=all;fp={fp};depth={depth};dim=7"),
        };
        let peft = ["none", "full", "fths", "bitfit"]
            .iter()
            .map(|s| s.to_string())
            .chain([format!("adapter:layers=all;d={bottleneck}")])
            .collect::<Vec<_>>();
        let fusion = FusionSpec::parse(&fusion, &cfg).unwrap();
        for p in &peft {
            let peft = PeftSpec::parse(p, &cfg).unwrap();
            let c = count_trainable_params(&cfg, Some(&fusion), Some(&peft)).unwrap();
            let (trainable, total, head) = instantiated_counts(cfg, &fusion, &peft);
            prop_assert_eq!(c.encoder_trainable, trainable, "{}", p);
            prop_assert_eq!(c.encoder_total, total);
            prop_assert_eq!(c.head_trainable, head);
        }
    }
}

#[test]
fn analytic_trace_matches_live_counter() {
    let cfg = EncoderConfig::desk();
    let synth = SynthConfig {
        pretrain_utterances: 0,
        train_utterances: 4,
        test_utterances: 1,
        ..SynthConfig::default()
    };
    let corpus = generate_corpus(&synth, 9).unwrap();
    let batch = Batch::<f32>::gather(&corpus.train, &[0, 1, 2, 3], cfg.input_dim).unwrap();
    for (fusion, peft) in desk_variants() {
        let mut enc: Encoder<f32> = Encoder::build(cfg, 0).unwrap();
        configure_peft(&mut enc, &peft, 0).unwrap();
        let m = Model::new(enc, fusion.clone(), synth.vocab, 0).unwrap();
        let mut g = Graph::new();
        let loss = m.loss(&mut g, &batch).unwrap();
        g.backward(loss).unwrap();
        let live = g.counter();
        let spec = StepSpec {
            encoder: &cfg,
            fusion: &fusion,
            peft: &peft,
            num_classes: synth.vocab,
        };
        let traced = trace_train_step(spec, &batch.lengths).unwrap();
        assert_eq!(traced.forward_flops, live.forward_flops, "{fusion} + {peft}");
        assert_eq!(traced.backward_flops, live.backward_flops, "{fusion} + {peft}");
        assert_eq!(traced.retained_elements, live.retained_elements, "{fusion} + {peft}");
        assert_eq!(traced.forward_ops, live.forward_ops, "{fusion} + {peft}");
        assert_eq!(traced.backward_ops, live.backward_ops, "{fusion} + {peft}");
        for (scope, stats) in &live.scopes {
            assert_eq!(traced.scopes.get(scope), Some(stats), "{fusion} + {peft}: scope {scope}");
        }
    }
}

#[test]
fn cost_ordering_at_desk_scale() {
    let cfg = ExperimentConfig::new(Preset::Desk);
    let variants = comparison_variants(&cfg).unwrap();
    let report = |label: &str| {
        let v = variants.iter().find(|v| v.label == label).unwrap();
        let spec = StepSpec {
            encoder: &cfg.encoder,
            fusion: &v.fusion,
            peft: &v.peft,
            num_classes: cfg.synth.vocab,
        };
        ResourceReport::analytic(label, spec, cfg.train.batch_size, REPORT_SEQ_LEN).unwrap()
    };
    let order = ["HFF-b", "adapter, upper layers", "adapter, all layers", "fine-tune all"].map(report);
    for pair in order.windows(2) {
        assert!(pair[0].backward_flops < pair[1].backward_flops, "{} vs {}", pair[0].label, pair[1].label);
        assert!(pair[0].activation_bytes < pair[1].activation_bytes, "{} vs {}", pair[0].label, pair[1].label);
    }
}
