//! Reverse-mode gradients against central differences, op by op and for
//! the composite modules.

use hfflab::encoder::{Encoder, EncoderConfig};
use hfflab::fusion::{FusionHead, FusionSpec};
use hfflab::peft::{configure_peft, PeftSpec};
use hfflab::tensor::{finite_difference_check, Graph, ParamStore, Tensor, Var};
use hfflab::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const MAX_COORDS: usize = 64;
/// Composite modules.
const TOL: f64 = 1e-5;
/// Single primitive ops.
const OP_TOL: f64 = 1e-6;

/// Entries in `±[0.1, 1]` so kinks (relu at 0) are never straddled.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Sum of the output weighted by fixed random coefficients, so every output
/// coordinate reaches the loss with a different weight.
fn probe_loss(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check(store: &ParamStore<f64>, f: impl FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>) -> f64 {
    let report = finite_difference_check(store, EPS, MAX_COORDS, 7, f).unwrap();
    assert!(report.coords_checked > 0);
    if report.max_rel_error >= OP_TOL {
        eprintln!("worst coordinate {:?}", report.worst);
    }
    report.max_rel_error
}

fn store_of(entries: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, t) in entries {
        s.insert(*name, t.clone()).unwrap();
    }
    s
}

type Unary = fn(&mut Graph<f64>, Var) -> Result<Var>;

fn unary_ops() -> Vec<(&'static str, Unary)> {
    vec![
        ("relu", |g, x| g.relu(x)),
        ("swish", |g, x| g.swish(x)),
        ("sigmoid", |g, x| g.sigmoid(x)),
        ("softmax", |g, x| g.softmax(x)),
        ("scale", |g, x| g.scale(x, -1.7)),
        ("transpose", |g, x| g.transpose(x)),
        ("mean", |g, x| g.mean(x)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unary_op_gradients(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = store_of(&[("x", away_from_zero(&[rows, cols], &mut rng))]);
        for (name, op) in unary_ops() {
            let err = check(&store, |s, g| {
                let x = g.param(s, "x")?;
                let y = op(g, x)?;
                probe_loss(g, y, seed ^ 1)
            });
            prop_assert!(err < OP_TOL, "{name}: rel error {err:e}");
        }
    }

    #[test]
    fn glu_gradient(rows in 1usize..6, half in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = store_of(&[("x", away_from_zero(&[rows, 2 * half], &mut rng))]);
        let err = check(&store, |s, g| {
            let x = g.param(s, "x")?;
            let y = g.glu(x)?;
            probe_loss(g, y, seed)
        });
        prop_assert!(err < OP_TOL, "rel error {err:e}");
    }

    #[test]
    fn binary_op_gradients(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = store_of(&[
            ("a", away_from_zero(&[m, k], &mut rng)),
            ("b", away_from_zero(&[k, n], &mut rng)),
            ("c", away_from_zero(&[m, k], &mut rng)),
            ("bias", away_from_zero(&[k], &mut rng)),
        ]);
        let err = check(&store, |s, g| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            let y = g.matmul(a, b)?;
            probe_loss(g, y, seed)
        });
        prop_assert!(err < OP_TOL, "matmul: {err:e}");
        let err = check(&store, |s, g| {
            let (a, c) = (g.param(s, "a")?, g.param(s, "c")?);
            let sum = g.add(a, c)?;
            let prod = g.mul(sum, c)?;
            probe_loss(g, prod, seed)
        });
        prop_assert!(err < OP_TOL, "add/mul: {err:e}");
        let err = check(&store, |s, g| {
            let (a, bias) = (g.param(s, "a")?, g.param(s, "bias")?);
            let y = g.bias_add(a, bias)?;
            probe_loss(g, y, seed)
        });
        prop_assert!(err < OP_TOL, "bias_add: {err:e}");
    }

    #[test]
    fn layer_norm_gradient(rows in 1usize..5, cols in 2usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = store_of(&[
            ("x", away_from_zero(&[rows, cols], &mut rng)),
            ("scale", away_from_zero(&[cols], &mut rng)),
            ("offset", away_from_zero(&[cols], &mut rng)),
        ]);
        let err = check(&store, |s, g| {
            let x = g.param(s, "x")?;
            let (sc, off) = (g.param(s, "scale")?, g.param(s, "offset")?);
            let y = g.layer_norm(x, sc, off)?;
            probe_loss(g, y, seed)
        });
        prop_assert!(err < OP_TOL, "rel error {err:e}");
    }

    #[test]
    fn conv_gradients(
        segs in prop::collection::vec(3usize..9, 1..4),
        cin in 1usize..4,
        cout in 1usize..4,
        k in 1usize..5,
        stride in 1usize..3,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total: usize = segs.iter().sum();
        let store = store_of(&[
            ("x", away_from_zero(&[total, cin], &mut rng)),
            ("w", away_from_zero(&[k, cin, cout], &mut rng)),
            ("dw", away_from_zero(&[k, cin], &mut rng)),
        ]);
        let pad = (k / 2, 0);
        let err = check(&store, |s, g| {
            let (x, w) = (g.param(s, "x")?, g.param(s, "w")?);
            let y = g.conv1d(x, w, stride, pad, &segs)?;
            probe_loss(g, y, seed)
        });
        prop_assert!(err < OP_TOL, "conv1d: {err:e}");
        let err = check(&store, |s, g| {
            let (x, w) = (g.param(s, "x")?, g.param(s, "dw")?);
            let y = g.depthwise_conv1d(x, w, &segs)?;
            probe_loss(g, y, seed)
        });
        prop_assert!(err < OP_TOL, "depthwise: {err:e}");
    }

    #[test]
    fn shape_op_gradients(rows in 2usize..6, cols in 2usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = store_of(&[
            ("a", away_from_zero(&[rows, cols], &mut rng)),
            ("b", away_from_zero(&[rows, cols + 1], &mut rng)),
            ("c", away_from_zero(&[rows + 1, cols], &mut rng)),
        ]);
        let err = check(&store, |s, g| {
            let (a, b, c) = (g.param(s, "a")?, g.param(s, "b")?, g.param(s, "c")?);
            let wide = g.concat(&[a, b], 1)?;
            let cut = g.slice(wide, 1, 1, 2 * cols)?;
            let tall = g.concat(&[a, c], 0)?;
            let top = g.slice(tall, 0, 1, rows + 1)?;
            let l1 = probe_loss(g, cut, seed)?;
            let l2 = probe_loss(g, top, seed ^ 2)?;
            g.add(l1, l2)
        });
        prop_assert!(err < OP_TOL, "rel error {err:e}");
    }

    #[test]
    fn cross_entropy_gradient(rows in 1usize..6, classes in 2usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = store_of(&[("z", away_from_zero(&[rows, classes], &mut rng))]);
        let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..classes)).collect();
        let mut mask: Vec<bool> = (0..rows).map(|_| rng.gen()).collect();
        mask[0] = true;
        let err = check(&store, |s, g| {
            let z = g.param(s, "z")?;
            g.cross_entropy(z, &targets, Some(&mask))
        });
        prop_assert!(err < OP_TOL, "rel error {err:e}");
    }
}

fn small_config(num_layers: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers,
        model_dim: 16,
        num_heads: 2,
        ffn_expansion: 4,
        conv_kernel: 3,
        frontend_subsampling: 4,
        input_dim: 6,
    }
}

fn frames(lengths: &[usize], dim: usize, seed: u64) -> Tensor<f64> {
    let total: usize = lengths.iter().sum();
    Tensor::randn(&[total, dim], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn conformer_block_gradient() {
    let cfg = small_config(1);
    let enc: Encoder<f64> = Encoder::build(cfg, 3).unwrap();
    let lengths = [5, 3];
    let x = Tensor::randn(&[8, cfg.model_dim], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    let mut store = enc.params().clone();
    store.set_trainable("encoder/frontend/**", false).unwrap();
    let err = check(&store, |s, g| {
        let mut e = enc.clone();
        *e.params_mut() = s.clone();
        let xv = g.constant(x.clone());
        let y = e.block_forward(g, 0, xv, &lengths)?;
        probe_loss(g, y, 5)
    });
    assert!(err < TOL, "block rel error {err:e}");
}

#[test]
fn adapter_gradient() {
    let cfg = small_config(2);
    let mut enc: Encoder<f64> = Encoder::build(cfg, 3).unwrap();
    configure_peft(&mut enc, &PeftSpec::parse("adapter:layers=1;d=4", &cfg).unwrap(), 9).unwrap();
    // Zero-initialized up-projection would leave the down-projection
    // gradient identically zero; perturb it so both paths are exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for p in enc.params_mut().iter_mut().filter(|p| p.name.contains("/adapter/")) {
        p.value = Tensor::randn(p.value.shape(), 0.3, &mut rng);
    }
    let lengths = [6, 4];
    let x = Tensor::randn(&[10, cfg.model_dim], 1.0, &mut rng);
    let err = check(enc.params(), |s, g| {
        let mut e = enc.clone();
        *e.params_mut() = s.clone();
        let xv = g.constant(x.clone());
        let y = e.block_forward(g, 1, xv, &lengths)?;
        probe_loss(g, y, 11)
    });
    assert!(err < TOL, "adapter rel error {err:e}");
}

fn fusion_check(spec: &str) {
    let cfg = small_config(4);
    let mut enc: Encoder<f64> = Encoder::build(cfg, 1).unwrap();
    enc.params_mut().iter_mut().for_each(|p| p.trainable = false);
    let spec = FusionSpec::parse(spec, &cfg).unwrap();
    let head: FusionHead<f64> = FusionHead::build(spec.clone(), &cfg, 2).unwrap();
    let lengths = [16, 12];
    let input = frames(&lengths, cfg.input_dim, 3);
    let taps = spec.tap_set(cfg.num_layers).unwrap();
    let err = check(head.params(), |s, g| {
        let mut h = head.clone();
        *h.params_mut() = s.clone();
        let features = enc.encode_with_taps(g, &input, &lengths, &taps)?;
        let y = h.forward(g, &features)?;
        probe_loss(g, y, 4)
    });
    assert!(err < TOL, "{spec}: rel error {err:e}");
}

#[test]
fn linear_fusion_depth3_gradient() {
    fusion_check("linear:taps=all;depth=3;dim=8");
}

#[test]
fn hff_balanced_gradient() {
    fusion_check("hff-b:taps=all;fp=6;depth=2;dim=8");
}

#[test]
fn hff_unbalanced_gradient() {
    fusion_check("hff-ub:taps=all;fp=6;depth=2;dim=8");
}
