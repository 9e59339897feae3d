//! Forward and backward kernels for every primitive.
//!
//! FLOPs count multiply-accumulate work only (matmul and the convolutions),
//! one multiply-add = 2 FLOPs. Elementwise, normalization and data-movement
//! ops are counted as ops but contribute no FLOPs.

use super::op::{Op, OpKind};
use super::{Real, Tensor};
use crate::error::{Error, Result};

pub(crate) type Grads<T> = Vec<Option<Vec<T>>>;

fn dims2<T: Real>(kind: OpKind, t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| {
        Error::shape(kind, format!("{what} must be rank 2, got {:?}", t.shape()))
    })
}

fn arity<T: Real>(kind: OpKind, inputs: &[&Tensor<T>], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::shape(
            kind,
            format!("expected {n} inputs, got {}", inputs.len()),
        ));
    }
    Ok(())
}

fn same_shape<T: Real>(kind: OpKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            kind,
            format!("operands differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn segments_out(
    kind: OpKind,
    segments: &[usize],
    rows: usize,
    k: usize,
    stride: usize,
    pad: (usize, usize),
) -> Result<Vec<usize>> {
    let total: usize = segments.iter().sum();
    if total != rows {
        return Err(Error::shape(
            kind,
            format!("segments sum to {total} but input has {rows} rows"),
        ));
    }
    if stride == 0 || k == 0 {
        return Err(Error::shape(kind, "kernel and stride must be positive"));
    }
    segments
        .iter()
        .map(|&len| {
            let padded = len + pad.0 + pad.1;
            if len == 0 || padded < k {
                Err(Error::shape(
                    kind,
                    format!("segment of length {len} is shorter than kernel {k} with padding {pad:?}"),
                ))
            } else {
                Ok((padded - k) / stride + 1)
            }
        })
        .collect()
}

/// Row index into the packed input for output row `t` and tap `j`, or
/// `None` when the tap falls into the padding.
#[inline]
fn tap_row(seg_start: usize, seg_len: usize, t: usize, j: usize, stride: usize, pad_left: usize) -> Option<usize> {
    let pos = (t * stride + j) as isize - pad_left as isize;
    (pos >= 0 && (pos as usize) < seg_len).then(|| seg_start + pos as usize)
}

struct ConvGeom {
    k: usize,
    cin: usize,
    cout: usize,
    out_segments: Vec<usize>,
    out_rows: usize,
}

fn conv_geometry<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: (usize, usize),
    segments: &[usize],
) -> Result<ConvGeom> {
    let kind = OpKind::Conv1d;
    let (rows, cin) = dims2(kind, x, "input")?;
    let [k, wcin, cout] = *w.shape() else {
        return Err(Error::shape(kind, format!("weight must be (k, cin, cout), got {:?}", w.shape())));
    };
    if wcin != cin {
        return Err(Error::shape(kind, format!("input has {cin} channels, weight expects {wcin}")));
    }
    let out_segments = segments_out(kind, segments, rows, k, stride, pad)?;
    let out_rows = out_segments.iter().sum();
    Ok(ConvGeom {
        k,
        cin,
        cout,
        out_segments,
        out_rows,
    })
}

fn im2col<T: Real>(x: &[T], geom: &ConvGeom, segments: &[usize], stride: usize, pad_left: usize) -> Vec<T> {
    let width = geom.k * geom.cin;
    let mut col = vec![T::zero(); geom.out_rows * width];
    let (mut in_start, mut out_row) = (0, 0);
    for (&len, &out_len) in segments.iter().zip(&geom.out_segments) {
        for t in 0..out_len {
            let dst = &mut col[(out_row + t) * width..(out_row + t + 1) * width];
            for j in 0..geom.k {
                if let Some(r) = tap_row(in_start, len, t, j, stride, pad_left) {
                    dst[j * geom.cin..(j + 1) * geom.cin]
                        .copy_from_slice(&x[r * geom.cin..(r + 1) * geom.cin]);
                }
            }
        }
        in_start += len;
        out_row += out_len;
    }
    col
}

/// Runs `op` forward, returning the output and its FLOP count.
pub(crate) fn forward<T: Real>(op: &Op, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, u64)> {
    let kind = op.kind();
    match op {
        Op::MatMul => {
            arity(kind, inputs, 2)?;
            let (m, k) = dims2(kind, inputs[0], "lhs")?;
            let (k2, n) = dims2(kind, inputs[1], "rhs")?;
            if k != k2 {
                return Err(Error::shape(kind, format!("({m},{k}) x ({k2},{n}): inner dims differ")));
            }
            let mut out = vec![T::zero(); m * n];
            T::gemm(m, k, n, inputs[0].data(), k, 1, inputs[1].data(), n, 1, &mut out, false);
            Ok((Tensor::from_parts(vec![m, n], out), 2 * (m * k * n) as u64))
        }
        Op::BiasAdd => {
            arity(kind, inputs, 2)?;
            let (m, n) = dims2(kind, inputs[0], "input")?;
            if inputs[1].shape() != [n] {
                return Err(Error::shape(kind, format!("bias {:?} does not match ({m},{n})", inputs[1].shape())));
            }
            let b = inputs[1].data();
            let mut out = inputs[0].data().to_vec();
            for row in out.chunks_exact_mut(n) {
                row.iter_mut().zip(b).for_each(|(o, &bv)| *o += bv);
            }
            Ok((Tensor::from_parts(vec![m, n], out), 0))
        }
        Op::Add | Op::Mul => {
            arity(kind, inputs, 2)?;
            same_shape(kind, inputs[0], inputs[1])?;
            let (a, b) = (inputs[0].data(), inputs[1].data());
            let out = if matches!(op, Op::Add) {
                a.iter().zip(b).map(|(&x, &y)| x + y).collect()
            } else {
                a.iter().zip(b).map(|(&x, &y)| x * y).collect()
            };
            Ok((Tensor::from_parts(inputs[0].shape().to_vec(), out), 0))
        }
        Op::Scale(s) => {
            arity(kind, inputs, 1)?;
            let s = T::from_f64_lossy(*s);
            let out = inputs[0].data().iter().map(|&x| x * s).collect();
            Ok((Tensor::from_parts(inputs[0].shape().to_vec(), out), 0))
        }
        Op::Relu | Op::Swish | Op::Sigmoid => {
            arity(kind, inputs, 1)?;
            let f: fn(T) -> T = match op {
                Op::Relu => |x| if x > T::zero() { x } else { T::zero() },
                Op::Swish => |x| x * sigmoid(x),
                _ => sigmoid,
            };
            let out = inputs[0].data().iter().map(|&x| f(x)).collect();
            Ok((Tensor::from_parts(inputs[0].shape().to_vec(), out), 0))
        }
        Op::Glu => {
            arity(kind, inputs, 1)?;
            let (m, n2) = dims2(kind, inputs[0], "input")?;
            if n2 % 2 != 0 {
                return Err(Error::shape(kind, format!("feature dim {n2} is odd")));
            }
            let n = n2 / 2;
            let mut out = Vec::with_capacity(m * n);
            for row in inputs[0].data().chunks_exact(n2) {
                let (a, b) = row.split_at(n);
                out.extend(a.iter().zip(b).map(|(&a, &b)| a * sigmoid(b)));
            }
            Ok((Tensor::from_parts(vec![m, n], out), 0))
        }
        Op::Softmax => {
            arity(kind, inputs, 1)?;
            let (m, n) = dims2(kind, inputs[0], "input")?;
            let mut out = inputs[0].data().to_vec();
            for row in out.chunks_exact_mut(n) {
                softmax_in_place(row);
            }
            Ok((Tensor::from_parts(vec![m, n], out), 0))
        }
        Op::LayerNorm { eps } => {
            arity(kind, inputs, 3)?;
            let (m, n) = dims2(kind, inputs[0], "input")?;
            for (p, name) in [(inputs[1], "scale"), (inputs[2], "offset")] {
                if p.shape() != [n] {
                    return Err(Error::shape(kind, format!("{name} {:?} does not match width {n}", p.shape())));
                }
            }
            let eps = T::from_f64_lossy(*eps);
            let (g, b) = (inputs[1].data(), inputs[2].data());
            let mut out = Vec::with_capacity(m * n);
            for row in inputs[0].data().chunks_exact(n) {
                let (mean, rstd) = row_stats(row, eps);
                out.extend(row.iter().zip(g).zip(b).map(|((&x, &g), &b)| (x - mean) * rstd * g + b));
            }
            Ok((Tensor::from_parts(vec![m, n], out), 0))
        }
        Op::Conv1d {
            stride,
            pad_left,
            pad_right,
            segments,
        } => {
            arity(kind, inputs, 2)?;
            let geom = conv_geometry(inputs[0], inputs[1], *stride, (*pad_left, *pad_right), segments)?;
            let col = im2col(inputs[0].data(), &geom, segments, *stride, *pad_left);
            let width = geom.k * geom.cin;
            let mut out = vec![T::zero(); geom.out_rows * geom.cout];
            T::gemm(geom.out_rows, width, geom.cout, &col, width, 1, inputs[1].data(), geom.cout, 1, &mut out, false);
            let flops = 2 * (geom.out_rows * width * geom.cout) as u64;
            Ok((Tensor::from_parts(vec![geom.out_rows, geom.cout], out), flops))
        }
        Op::DepthwiseConv1d {
            pad_left,
            pad_right,
            segments,
        } => {
            arity(kind, inputs, 2)?;
            let (rows, c) = dims2(kind, inputs[0], "input")?;
            let (k, wc) = dims2(kind, inputs[1], "weight")?;
            if wc != c {
                return Err(Error::shape(kind, format!("input has {c} channels, weight has {wc}")));
            }
            if pad_left + pad_right + 1 != k {
                return Err(Error::shape(kind, format!("padding {pad_left}+{pad_right} does not preserve length for kernel {k}")));
            }
            segments_out(kind, segments, rows, k, 1, (*pad_left, *pad_right))?;
            let (x, w) = (inputs[0].data(), inputs[1].data());
            let mut out = vec![T::zero(); rows * c];
            let mut start = 0;
            for &len in segments.iter() {
                for t in 0..len {
                    let dst = &mut out[(start + t) * c..(start + t + 1) * c];
                    for j in 0..k {
                        if let Some(r) = tap_row(start, len, t, j, 1, *pad_left) {
                            let (src, wj) = (&x[r * c..(r + 1) * c], &w[j * c..(j + 1) * c]);
                            for ((o, &xv), &wv) in dst.iter_mut().zip(src).zip(wj) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
                start += len;
            }
            Ok((Tensor::from_parts(vec![rows, c], out), 2 * (rows * k * c) as u64))
        }
        Op::Concat { axis } => {
            if inputs.is_empty() {
                return Err(Error::shape(kind, "no inputs"));
            }
            let dims = inputs
                .iter()
                .map(|t| dims2(kind, t, "input"))
                .collect::<Result<Vec<_>>>()?;
            match axis {
                0 => {
                    let cols = dims[0].1;
                    if let Some(bad) = dims.iter().find(|d| d.1 != cols) {
                        return Err(Error::shape(kind, format!("feature dims differ: {cols} vs {}", bad.1)));
                    }
                    let rows = dims.iter().map(|d| d.0).sum();
                    let mut out = Vec::with_capacity(rows * cols);
                    inputs.iter().for_each(|t| out.extend_from_slice(t.data()));
                    Ok((Tensor::from_parts(vec![rows, cols], out), 0))
                }
                1 => {
                    let rows = dims[0].0;
                    if let Some(bad) = dims.iter().find(|d| d.0 != rows) {
                        return Err(Error::shape(kind, format!("row counts differ: {rows} vs {}", bad.0)));
                    }
                    let cols: usize = dims.iter().map(|d| d.1).sum();
                    let mut out = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        for (t, &(_, c)) in inputs.iter().zip(&dims) {
                            out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                        }
                    }
                    Ok((Tensor::from_parts(vec![rows, cols], out), 0))
                }
                _ => Err(Error::shape(kind, format!("axis {axis} out of range for rank 2"))),
            }
        }
        Op::Slice { axis, start, end } => {
            arity(kind, inputs, 1)?;
            let (m, n) = dims2(kind, inputs[0], "input")?;
            let extent = match axis {
                0 => m,
                1 => n,
                _ => return Err(Error::shape(kind, format!("axis {axis} out of range for rank 2"))),
            };
            if start >= end || *end > extent {
                return Err(Error::shape(kind, format!("range {start}..{end} invalid for extent {extent}")));
            }
            let x = inputs[0].data();
            let (out, shape) = if *axis == 0 {
                (x[start * n..end * n].to_vec(), vec![end - start, n])
            } else {
                let mut out = Vec::with_capacity(m * (end - start));
                for row in x.chunks_exact(n) {
                    out.extend_from_slice(&row[*start..*end]);
                }
                (out, vec![m, end - start])
            };
            Ok((Tensor::from_parts(shape, out), 0))
        }
        Op::Transpose => {
            arity(kind, inputs, 1)?;
            let (m, n) = dims2(kind, inputs[0], "input")?;
            Ok((Tensor::from_parts(vec![n, m], transpose(inputs[0].data(), m, n)), 0))
        }
        Op::Mean | Op::Sum => {
            arity(kind, inputs, 1)?;
            let total: T = inputs[0].data().iter().copied().sum();
            let v = if matches!(op, Op::Mean) {
                total / T::from_usize(inputs[0].numel()).expect("count")
            } else {
                total
            };
            Ok((Tensor::scalar(v), 0))
        }
        Op::CrossEntropy { targets, mask } => {
            arity(kind, inputs, 1)?;
            let (m, classes) = dims2(kind, inputs[0], "logits")?;
            check_targets(targets, mask.as_deref(), m, classes)?;
            let mut total = T::zero();
            let mut count = 0usize;
            for (i, row) in inputs[0].data().chunks_exact(classes).enumerate() {
                if mask.as_ref().is_some_and(|mk| !mk[i]) {
                    continue;
                }
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&z| (z - mx).exp()).sum::<T>().ln() + mx;
                total += lse - row[targets[i]];
                count += 1;
            }
            let loss = if count == 0 {
                T::zero()
            } else {
                total / T::from_usize(count).expect("count")
            };
            Ok((Tensor::scalar(loss), 0))
        }
    }
}

fn check_targets(targets: &[usize], mask: Option<&[bool]>, m: usize, classes: usize) -> Result<()> {
    let kind = OpKind::CrossEntropy;
    if targets.len() != m {
        return Err(Error::shape(kind, format!("{} targets for {m} rows", targets.len())));
    }
    if let Some(mk) = mask {
        if mk.len() != m {
            return Err(Error::shape(kind, format!("mask has {} entries for {m} rows", mk.len())));
        }
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::shape(kind, format!("target {bad} out of range for {classes} classes")));
    }
    Ok(())
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        total += *v;
    }
    let inv = T::one() / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

fn row_stats<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_usize(row.len()).expect("width");
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

fn transpose<T: Real>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// Gradients of `op` with respect to each input flagged in `needs`,
/// together with the backward FLOP count.
pub(crate) fn backward<T: Real>(
    op: &Op,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    grad: &[T],
    needs: &[bool],
) -> (Grads<T>, u64) {
    let mut grads: Grads<T> = vec![None; inputs.len()];
    let mut flops = 0u64;
    match op {
        Op::MatMul => {
            let (m, k) = inputs[0].dims2().expect("checked in forward");
            let n = inputs[1].shape()[1];
            let (a, b) = (inputs[0].data(), inputs[1].data());
            if needs[0] {
                let mut da = vec![T::zero(); m * k];
                T::gemm(m, n, k, grad, n, 1, b, 1, n, &mut da, false);
                grads[0] = Some(da);
                flops += 2 * (m * k * n) as u64;
            }
            if needs[1] {
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, m, n, a, 1, k, grad, n, 1, &mut db, false);
                grads[1] = Some(db);
                flops += 2 * (m * k * n) as u64;
            }
        }
        Op::BiasAdd => {
            let n = inputs[1].numel();
            if needs[0] {
                grads[0] = Some(grad.to_vec());
            }
            if needs[1] {
                let mut db = vec![T::zero(); n];
                for row in grad.chunks_exact(n) {
                    db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                }
                grads[1] = Some(db);
            }
        }
        Op::Add => {
            for i in 0..2 {
                if needs[i] {
                    grads[i] = Some(grad.to_vec());
                }
            }
        }
        Op::Mul => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            if needs[0] {
                grads[0] = Some(grad.iter().zip(b).map(|(&g, &y)| g * y).collect());
            }
            if needs[1] {
                grads[1] = Some(grad.iter().zip(a).map(|(&g, &x)| g * x).collect());
            }
        }
        Op::Scale(s) => {
            let s = T::from_f64_lossy(*s);
            grads[0] = Some(grad.iter().map(|&g| g * s).collect());
        }
        Op::Relu => {
            let x = inputs[0].data();
            grads[0] = Some(
                grad.iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect(),
            );
        }
        Op::Swish => {
            let x = inputs[0].data();
            grads[0] = Some(
                grad.iter()
                    .zip(x)
                    .map(|(&g, &x)| {
                        let s = sigmoid(x);
                        g * s * (T::one() + x * (T::one() - s))
                    })
                    .collect(),
            );
        }
        Op::Sigmoid => {
            let y = output.data();
            grads[0] = Some(grad.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect());
        }
        Op::Glu => {
            let (m, n2) = inputs[0].dims2().expect("checked in forward");
            let n = n2 / 2;
            let x = inputs[0].data();
            let mut dx = vec![T::zero(); m * n2];
            for r in 0..m {
                let (a, b) = x[r * n2..(r + 1) * n2].split_at(n);
                let g = &grad[r * n..(r + 1) * n];
                let (da, db) = dx[r * n2..(r + 1) * n2].split_at_mut(n);
                for j in 0..n {
                    let s = sigmoid(b[j]);
                    da[j] = g[j] * s;
                    db[j] = g[j] * a[j] * s * (T::one() - s);
                }
            }
            grads[0] = Some(dx);
        }
        Op::Softmax => {
            let n = output.shape()[1];
            let mut dx = vec![T::zero(); output.numel()];
            for ((dxr, yr), gr) in dx
                .chunks_exact_mut(n)
                .zip(output.data().chunks_exact(n))
                .zip(grad.chunks_exact(n))
            {
                let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                for ((d, &y), &g) in dxr.iter_mut().zip(yr).zip(gr) {
                    *d = y * (g - dot);
                }
            }
            grads[0] = Some(dx);
        }
        Op::LayerNorm { eps } => {
            let (m, n) = inputs[0].dims2().expect("checked in forward");
            let eps = T::from_f64_lossy(*eps);
            let (x, gamma) = (inputs[0].data(), inputs[1].data());
            let mut dx = needs[0].then(|| vec![T::zero(); m * n]);
            let mut dgamma = needs[1].then(|| vec![T::zero(); n]);
            let mut dbeta = needs[2].then(|| vec![T::zero(); n]);
            let nf = T::from_usize(n).expect("width");
            let mut xhat = vec![T::zero(); n];
            let mut dxhat = vec![T::zero(); n];
            for r in 0..m {
                let row = &x[r * n..(r + 1) * n];
                let g = &grad[r * n..(r + 1) * n];
                let (mean, rstd) = row_stats(row, eps);
                for j in 0..n {
                    xhat[j] = (row[j] - mean) * rstd;
                    dxhat[j] = g[j] * gamma[j];
                }
                if let Some(dg) = dgamma.as_mut() {
                    for j in 0..n {
                        dg[j] += g[j] * xhat[j];
                    }
                }
                if let Some(db) = dbeta.as_mut() {
                    db.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
                if let Some(dx) = dx.as_mut() {
                    let mean_d = dxhat.iter().copied().sum::<T>() / nf;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for j in 0..n {
                        dx[r * n + j] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
            }
            grads[0] = dx;
            grads[1] = dgamma;
            grads[2] = dbeta;
        }
        Op::Conv1d {
            stride,
            pad_left,
            pad_right,
            segments,
        } => {
            let geom = conv_geometry(inputs[0], inputs[1], *stride, (*pad_left, *pad_right), segments)
                .expect("checked in forward");
            let width = geom.k * geom.cin;
            let work = 2 * (geom.out_rows * width * geom.cout) as u64;
            if needs[1] {
                let col = im2col(inputs[0].data(), &geom, segments, *stride, *pad_left);
                let mut dw = vec![T::zero(); width * geom.cout];
                T::gemm(width, geom.out_rows, geom.cout, &col, 1, width, grad, geom.cout, 1, &mut dw, false);
                grads[1] = Some(dw);
                flops += work;
            }
            if needs[0] {
                let mut dcol = vec![T::zero(); geom.out_rows * width];
                T::gemm(geom.out_rows, geom.cout, width, grad, geom.cout, 1, inputs[1].data(), 1, geom.cout, &mut dcol, false);
                let mut dx = vec![T::zero(); inputs[0].numel()];
                let (mut in_start, mut out_row) = (0, 0);
                for (&len, &out_len) in segments.iter().zip(&geom.out_segments) {
                    for t in 0..out_len {
                        let src = &dcol[(out_row + t) * width..(out_row + t + 1) * width];
                        for j in 0..geom.k {
                            if let Some(r) = tap_row(in_start, len, t, j, *stride, *pad_left) {
                                let dst = &mut dx[r * geom.cin..(r + 1) * geom.cin];
                                dst.iter_mut()
                                    .zip(&src[j * geom.cin..(j + 1) * geom.cin])
                                    .for_each(|(d, &s)| *d += s);
                            }
                        }
                    }
                    in_start += len;
                    out_row += out_len;
                }
                grads[0] = Some(dx);
                flops += work;
            }
        }
        Op::DepthwiseConv1d {
            pad_left, segments, ..
        } => {
            let (rows, c) = inputs[0].dims2().expect("checked in forward");
            let k = inputs[1].shape()[0];
            let (x, w) = (inputs[0].data(), inputs[1].data());
            let mut dx = needs[0].then(|| vec![T::zero(); rows * c]);
            let mut dw = needs[1].then(|| vec![T::zero(); k * c]);
            let mut start = 0;
            for &len in segments.iter() {
                for t in 0..len {
                    let g = &grad[(start + t) * c..(start + t + 1) * c];
                    for j in 0..k {
                        let Some(r) = tap_row(start, len, t, j, 1, *pad_left) else {
                            continue;
                        };
                        if let Some(dx) = dx.as_mut() {
                            let wj = &w[j * c..(j + 1) * c];
                            for ((d, &gv), &wv) in dx[r * c..(r + 1) * c].iter_mut().zip(g).zip(wj) {
                                *d += gv * wv;
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            let xr = &x[r * c..(r + 1) * c];
                            for ((d, &gv), &xv) in dw[j * c..(j + 1) * c].iter_mut().zip(g).zip(xr) {
                                *d += gv * xv;
                            }
                        }
                    }
                }
                start += len;
            }
            let work = 2 * (rows * k * c) as u64;
            flops += work * (needs[0] as u64 + needs[1] as u64);
            grads[0] = dx;
            grads[1] = dw;
        }
        Op::Concat { axis } => {
            let (rows, cols) = output.dims2().expect("rank 2");
            let mut offset = 0;
            for (i, t) in inputs.iter().enumerate() {
                let (r, c) = t.dims2().expect("rank 2");
                if needs[i] {
                    grads[i] = Some(if *axis == 0 {
                        grad[offset * cols..(offset + r) * cols].to_vec()
                    } else {
                        let mut g = Vec::with_capacity(rows * c);
                        for row in grad.chunks_exact(cols) {
                            g.extend_from_slice(&row[offset..offset + c]);
                        }
                        g
                    });
                }
                offset += if *axis == 0 { r } else { c };
            }
        }
        Op::Slice { axis, start, end } => {
            let (m, n) = inputs[0].dims2().expect("rank 2");
            let mut dx = vec![T::zero(); m * n];
            if *axis == 0 {
                dx[start * n..end * n].copy_from_slice(grad);
            } else {
                let w = end - start;
                for (r, g) in grad.chunks_exact(w).enumerate() {
                    dx[r * n + start..r * n + end].copy_from_slice(g);
                }
            }
            grads[0] = Some(dx);
        }
        Op::Transpose => {
            let (m, n) = inputs[0].dims2().expect("rank 2");
            grads[0] = Some(transpose(grad, n, m));
        }
        Op::Mean | Op::Sum => {
            let numel = inputs[0].numel();
            let g = if matches!(op, Op::Mean) {
                grad[0] / T::from_usize(numel).expect("count")
            } else {
                grad[0]
            };
            grads[0] = Some(vec![g; numel]);
        }
        Op::CrossEntropy { targets, mask } => {
            let (m, classes) = inputs[0].dims2().expect("rank 2");
            let selected = mask
                .as_ref()
                .map_or(m, |mk| mk.iter().filter(|&&b| b).count());
            let mut dx = vec![T::zero(); m * classes];
            if selected > 0 {
                let scale = grad[0] / T::from_usize(selected).expect("count");
                for (i, (dr, zr)) in dx
                    .chunks_exact_mut(classes)
                    .zip(inputs[0].data().chunks_exact(classes))
                    .enumerate()
                {
                    if mask.as_ref().is_some_and(|mk| !mk[i]) {
                        continue;
                    }
                    dr.copy_from_slice(zr);
                    softmax_in_place(dr);
                    dr[targets[i]] -= T::one();
                    dr.iter_mut().for_each(|v| *v *= scale);
                }
            }
            grads[0] = Some(dx);
        }
    }
    (grads, flops)
}
