//! Analytic per-step cost model.
//!
//! Walks the same op sequence a training step builds, tracking only shapes
//! and which values depend on a trainable parameter, and books forward and
//! backward FLOPs and retained output elements exactly as the engine's
//! counters do.

use crate::encoder::{layer_prefix, EncoderConfig, FRONTEND_KERNEL, FRONTEND_PAD, FRONTEND_STRIDE};
use crate::error::{Error, Result};
use crate::fusion::{FusionSpec, HffVariant};
use crate::peft::PeftSpec;
use crate::tensor::{OpCounter, OpKind};

/// A model configuration as seen by the cost model.
#[derive(Clone, Copy, Debug)]
pub struct StepSpec<'a> {
    pub encoder: &'a EncoderConfig,
    pub fusion: &'a FusionSpec,
    pub peft: &'a PeftSpec,
    pub num_classes: usize,
}

impl StepSpec<'_> {
    fn trainable(&self, name: &str) -> bool {
        if !name.starts_with("encoder/") {
            return true;
        }
        match self.peft {
            PeftSpec::None => false,
            PeftSpec::Full => true,
            PeftSpec::Fths => name.starts_with(&format!("{}/", layer_prefix(self.encoder.num_layers - 1))),
            PeftSpec::BitFit => name.ends_with("/bias"),
            PeftSpec::Adapter { .. } => name.contains("/adapter/"),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Sym {
    rows: usize,
    cols: usize,
    grad: bool,
}

struct Tracer<'a> {
    spec: StepSpec<'a>,
    counter: OpCounter,
    scope: String,
}

impl Tracer<'_> {
    fn constant(rows: usize, cols: usize) -> Sym {
        Sym { rows, cols, grad: false }
    }

    fn param(&self, name: &str) -> bool {
        self.spec.trainable(name)
    }

    fn emit(&mut self, kind: OpKind, out: Sym, forward: u64, backward: u64) -> Sym {
        let retained = if out.grad { (out.rows * out.cols) as u64 } else { 0 };
        self.counter.record_forward(kind, &self.scope, forward, retained);
        if out.grad {
            self.counter.record_backward(kind, &self.scope, backward);
        }
        out
    }

    fn in_scope<R>(&mut self, scope: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let prev = std::mem::replace(&mut self.scope, scope.to_string());
        let out = f(self);
        self.scope = prev;
        out
    }

    fn matmul_grads(&mut self, a: Sym, a_grad: bool, b_grad: bool, n: usize) -> Sym {
        let work = 2 * (a.rows * a.cols * n) as u64;
        let out = Sym {
            rows: a.rows,
            cols: n,
            grad: a_grad || b_grad,
        };
        self.emit(OpKind::MatMul, out, work, work * (a_grad as u64 + b_grad as u64))
    }

    fn matmul(&mut self, a: Sym, b: Sym) -> Sym {
        self.matmul_grads(a, a.grad, b.grad, b.cols)
    }

    fn unary(&mut self, kind: OpKind, x: Sym) -> Sym {
        self.emit(kind, x, 0, 0)
    }

    fn binary(&mut self, kind: OpKind, a: Sym, b_grad: bool) -> Sym {
        let out = Sym { grad: a.grad || b_grad, ..a };
        self.emit(kind, out, 0, 0)
    }

    fn affine(&mut self, prefix: &str, x: Sym, fan_out: usize) -> Sym {
        let w = self.param(&format!("{prefix}/weight"));
        let b = self.param(&format!("{prefix}/bias"));
        let h = self.matmul_grads(x, x.grad, w, fan_out);
        self.binary(OpKind::BiasAdd, h, b)
    }

    fn norm(&mut self, prefix: &str, x: Sym) -> Sym {
        let g = self.param(&format!("{prefix}/scale")) || self.param(&format!("{prefix}/bias"));
        self.binary(OpKind::LayerNorm, x, g)
    }

    fn slice(&mut self, x: Sym, rows: usize, cols: usize) -> Sym {
        self.emit(OpKind::Slice, Sym { rows, cols, grad: x.grad }, 0, 0)
    }

    fn concat(&mut self, parts: &[Sym], axis: usize) -> Sym {
        let grad = parts.iter().any(|p| p.grad);
        let out = if axis == 0 {
            Sym {
                rows: parts.iter().map(|p| p.rows).sum(),
                cols: parts[0].cols,
                grad,
            }
        } else {
            Sym {
                rows: parts[0].rows,
                cols: parts.iter().map(|p| p.cols).sum(),
                grad,
            }
        };
        self.emit(OpKind::Concat, out, 0, 0)
    }

    /// Concat that is skipped for a single part, as the model code does.
    fn concat_parts(&mut self, parts: &[Sym], axis: usize) -> Sym {
        if parts.len() == 1 {
            parts[0]
        } else {
            self.concat(parts, axis)
        }
    }

    fn stack(&mut self, prefix: &str, mut x: Sym, width: usize, depth: usize) -> Sym {
        for i in 0..depth {
            if i > 0 {
                x = self.unary(OpKind::Relu, x);
            }
            x = self.affine(&format!("{prefix}/proj_{i}"), x, width);
        }
        x
    }

    fn conv(&mut self, x: Sym, w_name: &str, cout: usize, out_rows: usize) -> Sym {
        let w = self.param(w_name);
        let work = 2 * (out_rows * FRONTEND_KERNEL * x.cols * cout) as u64;
        let out = Sym {
            rows: out_rows,
            cols: cout,
            grad: x.grad || w,
        };
        self.emit(OpKind::Conv1d, out, work, work * (x.grad as u64 + w as u64))
    }

    fn frontend(&mut self, lengths: &[usize]) -> Sym {
        let cfg = *self.spec.encoder;
        let d = cfg.model_dim;
        let mut x = Self::constant(lengths.iter().sum(), cfg.input_dim);
        let mut seg = lengths.to_vec();
        for name in ["conv1", "conv2"] {
            seg = seg
                .iter()
                .map(|&l| (l + FRONTEND_PAD.0 + FRONTEND_PAD.1 - FRONTEND_KERNEL) / FRONTEND_STRIDE + 1)
                .collect();
            x = self.conv(x, &format!("encoder/frontend/{name}/weight"), d, seg.iter().sum());
            let b = self.param(&format!("encoder/frontend/{name}/bias"));
            x = self.binary(OpKind::BiasAdd, x, b);
            x = self.unary(OpKind::Swish, x);
        }
        let x = self.affine("encoder/frontend/proj", x, d);
        let x = self.unary(OpKind::Scale, x);
        self.binary(OpKind::Add, x, false)
    }

    fn block(&mut self, prefix: &str, x: Sym, lengths: &[usize]) -> Sym {
        let cfg = *self.spec.encoder;
        let d = cfg.model_dim;
        let x = self.ffn(&format!("{prefix}/ffn1"), x);

        let p = format!("{prefix}/mhsa");
        let h = self.norm(&format!("{p}/ln"), x);
        let q = self.affine(&format!("{p}/q"), h, d);
        let q = self.unary(OpKind::Scale, q);
        let k = self.affine(&format!("{p}/k"), h, d);
        let v = self.affine(&format!("{p}/v"), h, d);
        let dh = cfg.head_dim();
        let mut utts = Vec::with_capacity(lengths.len());
        for &len in lengths {
            let (qs, ks, vs) = (self.slice(q, len, d), self.slice(k, len, d), self.slice(v, len, d));
            let mut heads = Vec::with_capacity(cfg.num_heads);
            for _ in 0..cfg.num_heads {
                let qh = self.slice(qs, len, dh);
                let kh = self.slice(ks, len, dh);
                let vh = self.slice(vs, len, dh);
                let kt = self.emit(OpKind::Transpose, Sym { rows: dh, cols: len, grad: kh.grad }, 0, 0);
                let scores = self.matmul(qh, kt);
                let weights = self.unary(OpKind::Softmax, scores);
                heads.push(self.matmul(weights, vh));
            }
            utts.push(self.concat_parts(&heads, 1));
        }
        let ctx = self.concat_parts(&utts, 0);
        let out = self.affine(&format!("{p}/out"), ctx, d);
        let x = self.binary(OpKind::Add, x, out.grad);

        let p = format!("{prefix}/conv");
        let h = self.norm(&format!("{p}/ln"), x);
        let h = self.affine(&format!("{p}/pw1"), h, 2 * d);
        let h = self.emit(OpKind::Glu, Sym { cols: d, ..h }, 0, 0);
        let w = self.param(&format!("{p}/dw/weight"));
        let work = 2 * (h.rows * cfg.conv_kernel * d) as u64;
        let h = self.emit(
            OpKind::DepthwiseConv1d,
            Sym { grad: h.grad || w, ..h },
            work,
            work * (h.grad as u64 + w as u64),
        );
        let b = self.param(&format!("{p}/dw/bias"));
        let h = self.binary(OpKind::BiasAdd, h, b);
        let h = self.norm(&format!("{p}/norm"), h);
        let h = self.unary(OpKind::Swish, h);
        let h = self.affine(&format!("{p}/pw2"), h, d);
        let x = self.binary(OpKind::Add, x, h.grad);

        let x = self.ffn(&format!("{prefix}/ffn2"), x);
        self.norm(&format!("{prefix}/final_ln"), x)
    }

    fn ffn(&mut self, prefix: &str, x: Sym) -> Sym {
        let d = self.spec.encoder.model_dim;
        let h = self.norm(&format!("{prefix}/ln"), x);
        let h = self.affine(&format!("{prefix}/w1"), h, d * self.spec.encoder.ffn_expansion);
        let h = self.unary(OpKind::Swish, h);
        let h = self.affine(&format!("{prefix}/w2"), h, d);
        let h = self.unary(OpKind::Scale, h);
        self.binary(OpKind::Add, x, h.grad)
    }

    fn adapter(&mut self, prefix: &str, x: Sym, bottleneck: usize) -> Sym {
        let d = self.spec.encoder.model_dim;
        let h = self.norm(&format!("{prefix}/ln"), x);
        let h = self.affine(&format!("{prefix}/down"), h, bottleneck);
        let h = self.unary(OpKind::Relu, h);
        let h = self.affine(&format!("{prefix}/up"), h, d);
        self.binary(OpKind::Add, x, h.grad)
    }

    fn head(&mut self, taps: &[Sym]) -> Sym {
        match self.spec.fusion {
            FusionSpec::Single(_) => taps[0],
            FusionSpec::Linear(s) => {
                let x = self.concat_parts(taps, 1);
                self.stack("head/linear", x, s.dim, s.depth)
            }
            FusionSpec::Hff(s) => {
                let x = match s.variant {
                    HffVariant::Balanced => {
                        let fp: Vec<Sym> = taps
                            .iter()
                            .enumerate()
                            .map(|(i, &t)| self.affine(&format!("head/hff/fp_{i}"), t, s.fp_dim))
                            .collect();
                        let pairs: Vec<Sym> = fp.chunks(2).map(|p| self.concat_parts(p, 1)).collect();
                        self.concat(&pairs, 1)
                    }
                    HffVariant::Unbalanced => {
                        let bottom = taps.len().div_ceil(2);
                        let mut top = taps[bottom..].to_vec();
                        top.reverse();
                        let mut states = Vec::new();
                        for (chain, seq) in [("bottom", &taps[..bottom]), ("top", &top[..])] {
                            let mut state = self.affine(&format!("head/hff/{chain}_0"), seq[0], s.fp_dim);
                            for (step, &next) in seq.iter().enumerate().skip(1) {
                                let joined = self.concat(&[state, next], 1);
                                state = self.affine(&format!("head/hff/{chain}_{step}"), joined, s.fp_dim);
                            }
                            states.push(state);
                        }
                        self.concat(&states, 1)
                    }
                };
                self.stack("head/hff/project", x, s.final_dim, s.final_depth)
            }
        }
    }
}

/// Op counts, FLOPs and retained elements of one uncached training step
/// (forward, loss, backward) on a batch with the given frame lengths.
pub fn trace_train_step(spec: StepSpec<'_>, lengths: &[usize]) -> Result<OpCounter> {
    let cfg = *spec.encoder;
    cfg.validate()?;
    spec.fusion.validate(&cfg)?;
    spec.peft.validate(&cfg)?;
    if lengths.is_empty() {
        return Ok(OpCounter::default());
    }
    let out_lengths = lengths
        .iter()
        .map(|&l| {
            cfg.output_len(l)
                .ok_or_else(|| Error::Invalid(format!("sequence of {l} frames is shorter than the frontend")))
        })
        .collect::<Result<Vec<_>>>()?;
    let taps = spec.fusion.tap_set(cfg.num_layers)?;
    let adapters: Vec<usize> = match spec.peft {
        PeftSpec::Adapter { layers, .. } => layers.resolve(cfg.num_layers)?.indices().to_vec(),
        _ => Vec::new(),
    };
    let bottleneck = match spec.peft {
        PeftSpec::Adapter { bottleneck, .. } => *bottleneck,
        _ => 0,
    };

    let mut t = Tracer {
        spec,
        counter: OpCounter::default(),
        scope: String::new(),
    };
    let mut x = t.in_scope("encoder/frontend", |t| t.frontend(lengths));
    let mut tapped = Vec::with_capacity(taps.len());
    for layer in 0..=taps.max() {
        let prefix = layer_prefix(layer);
        x = t.in_scope(&prefix, |t| t.block(&prefix, x, &out_lengths));
        if adapters.contains(&layer) {
            let scope = format!("{prefix}/adapter");
            x = t.in_scope(&scope, |t| t.adapter(&scope, x, bottleneck));
        }
        if taps.contains(layer) {
            tapped.push(x);
        }
    }
    let h = t.in_scope("head", |t| t.head(&tapped));
    t.in_scope("classifier", |t| {
        let logits = t.affine("classifier", h, spec.num_classes);
        let loss = Sym {
            rows: 1,
            cols: 1,
            grad: logits.grad,
        };
        t.emit(OpKind::CrossEntropy, loss, 0, 0);
    });
    Ok(t.counter)
}
