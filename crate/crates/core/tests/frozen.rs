//! Frozen-encoder guarantees: no encoder gradients, no backward work below
//! the lowest trainable block, and untouched encoder weights.

use hfflab::encoder::{Encoder, EncoderConfig};
use hfflab::fusion::FusionSpec;
use hfflab::harness::{encoder_gradient_keys, generate_corpus, train_downstream, Batch, Corpus, Model, SynthConfig, TrainConfig};
use hfflab::peft::{configure_peft, lowest_trainable_depth, PeftSpec};
use hfflab::tensor::{bitwise_eq, Graph};

const FUSION_ONLY: [&str; 8] = [
    "single:0",
    "single:5",
    "linear:taps=all;depth=1;dim=64",
    "linear:taps=1,3,5;depth=2;dim=32",
    "linear:taps=all;depth=3;dim=64",
    "linear:taps=2;depth=4;dim=16",
    "hff-b:taps=all;fp=32;depth=3;dim=64",
    "hff-ub:taps=0,2,4,5;fp=16;depth=2;dim=32",
];

fn small_corpus() -> Corpus {
    let cfg = SynthConfig {
        pretrain_utterances: 0,
        train_utterances: 24,
        test_utterances: 6,
        min_symbols: 4,
        max_symbols: 8,
        ..SynthConfig::default()
    };
    generate_corpus(&cfg, 5).unwrap()
}

fn model(fusion: &str, peft: &str) -> Model<f32> {
    let cfg = EncoderConfig::desk();
    let mut enc: Encoder<f32> = Encoder::build(cfg, 1).unwrap();
    configure_peft(&mut enc, &PeftSpec::parse(peft, &cfg).unwrap(), 2).unwrap();
    Model::new(enc, FusionSpec::parse(fusion, &cfg).unwrap(), 12, 3).unwrap()
}

fn train_cfg(steps: usize, cache: bool) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        warmup_steps: 10,
        log_every: 25,
        eval_batch_size: 8,
        cache_frozen_features: cache,
        ..TrainConfig::default()
    }
}

#[test]
fn fusion_only_backward_never_enters_the_encoder() {
    let corpus = small_corpus();
    let batch = Batch::<f32>::gather(&corpus.train, &[0, 1, 2], 16).unwrap();
    for spec in FUSION_ONLY {
        let m = model(spec, "none");
        let mut g = Graph::new();
        let loss = m.loss(&mut g, &batch).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(encoder_gradient_keys(&grads).is_empty(), "{spec}");
        assert!(grads.keys().any(|k| k.starts_with("classifier/")), "{spec}");
        let enc = g.counter().scope_total("encoder");
        assert!(enc.forward_ops > 0, "{spec}");
        assert_eq!(enc.backward_ops, 0, "{spec}");
        assert_eq!(enc.backward_flops, 0, "{spec}");
    }
}

#[test]
fn fusion_only_training_leaves_encoder_bitwise_unchanged() {
    let corpus = small_corpus();
    for spec in FUSION_ONLY {
        for cache in [false, true] {
            let mut m = model(spec, "none");
            let before = m.encoder.params().clone();
            let head_before = m.head.params().clone();
            train_downstream(&mut m, &corpus.train, &corpus.test, &train_cfg(100, cache)).unwrap();
            for p in before.iter() {
                let now = &m.encoder.params().get(&p.name).unwrap().value;
                assert!(bitwise_eq(&p.value, now), "{spec}: {} moved", p.name);
            }
            if !m.head.params().is_empty() {
                let moved = head_before
                    .iter()
                    .any(|p| !bitwise_eq(&p.value, &m.head.params().get(&p.name).unwrap().value));
                assert!(moved, "{spec}: head did not train");
            }
        }
    }
}

#[test]
fn upper_adapters_prune_backward_below_lowest_trainable_block() {
    let corpus = small_corpus();
    let batch = Batch::<f32>::gather(&corpus.train, &[3, 4], 16).unwrap();
    let m = model("single:5", "adapter:layers=3,4,5;d=8");
    let lowest = lowest_trainable_depth(&m.encoder).unwrap();
    assert_eq!(lowest, 3);
    let mut g = Graph::new();
    let loss = m.loss(&mut g, &batch).unwrap();
    let grads = g.backward(loss).unwrap();
    let keys = encoder_gradient_keys(&grads);
    assert!(!keys.is_empty());
    assert!(keys.iter().all(|k| k.contains("/adapter/")), "{keys:?}");
    let counter = g.counter();
    assert_eq!(counter.scope_total("encoder/frontend").backward_ops, 0);
    for layer in 0..lowest {
        assert_eq!(counter.scope_total(&format!("encoder/layer_{layer}")).backward_ops, 0, "layer {layer}");
    }
    for layer in lowest..6 {
        assert!(counter.scope_total(&format!("encoder/layer_{layer}")).backward_ops > 0, "layer {layer}");
    }
}

#[test]
fn cached_and_live_training_agree_bitwise() {
    let corpus = small_corpus();
    for (fusion, peft) in [
        ("linear:taps=all;depth=2;dim=32", "none"),
        ("hff-b:taps=all;fp=32;depth=3;dim=64", "adapter:layers=3,4,5;d=8"),
        ("single:5", "fths"),
    ] {
        let mut live = model(fusion, peft);
        let mut cached = model(fusion, peft);
        let a = train_downstream(&mut live, &corpus.train, &corpus.test, &train_cfg(30, false)).unwrap();
        let b = train_downstream(&mut cached, &corpus.train, &corpus.test, &train_cfg(30, true)).unwrap();
        assert_eq!(a.test_fer, b.test_fer, "{fusion} + {peft}");
        let losses = |h: &[hfflab::harness::Metrics]| h.iter().map(|m| m.loss).collect::<Vec<_>>();
        assert_eq!(losses(&a.history), losses(&b.history), "{fusion} + {peft}");
        for (x, y) in live.stores().iter().zip(cached.stores()) {
            for p in x.iter() {
                assert!(bitwise_eq(&p.value, &y.get(&p.name).unwrap().value), "{fusion} + {peft}: {}", p.name);
            }
        }
    }
}

#[test]
fn all_frozen_is_an_error() {
    let corpus = small_corpus();
    let mut m = model("single:2", "none");
    for s in m.stores_mut() {
        s.iter_mut().for_each(|p| p.trainable = false);
    }
    let err = train_downstream(&mut m, &corpus.train, &corpus.test, &train_cfg(5, true)).unwrap_err();
    assert!(matches!(err, hfflab::Error::NothingToTrain(_)), "{err}");
}
