use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::Error;

/// Primitive operation kinds, without attributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    MatMul,
    BiasAdd,
    Add,
    Mul,
    Scale,
    Relu,
    Swish,
    Sigmoid,
    Glu,
    Softmax,
    LayerNorm,
    Conv1d,
    DepthwiseConv1d,
    Concat,
    Slice,
    Transpose,
    Mean,
    Sum,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 19] = [
        OpKind::MatMul,
        OpKind::BiasAdd,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Swish,
        OpKind::Sigmoid,
        OpKind::Glu,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Conv1d,
        OpKind::DepthwiseConv1d,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Transpose,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::BiasAdd => "bias_add",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Swish => "swish",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Glu => "glu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Conv1d => "conv1d",
            OpKind::DepthwiseConv1d => "depthwise_conv1d",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Transpose => "transpose",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

/// A primitive operation together with its attributes.
///
/// All tensors flowing through ops are rank 2 `(rows, features)` unless
/// stated otherwise. Sequence ops take `segments`, the row counts of the
/// sequences packed into the input; each segment is padded independently.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// `(m, k) · (k, n)`.
    MatMul,
    /// `(m, n) + (n)` broadcast over rows.
    BiasAdd,
    Add,
    Mul,
    Scale(f64),
    Relu,
    Swish,
    Sigmoid,
    /// `(m, 2n) → (m, n)`: first half gated by sigmoid of the second half.
    Glu,
    /// Row-wise softmax.
    Softmax,
    /// Inputs `x (m, n)`, `scale (n)`, `offset (n)`; normalizes each row.
    LayerNorm { eps: f64 },
    /// Inputs `x (T, cin)`, `w (k, cin, cout)`.
    Conv1d {
        stride: usize,
        pad_left: usize,
        pad_right: usize,
        segments: Arc<[usize]>,
    },
    /// Inputs `x (T, c)`, `w (k, c)`; stride 1.
    DepthwiseConv1d {
        pad_left: usize,
        pad_right: usize,
        segments: Arc<[usize]>,
    },
    /// Concatenation of any number of inputs along `axis` (0 rows, 1 features).
    Concat { axis: usize },
    /// `[start, end)` along `axis`.
    Slice { axis: usize, start: usize, end: usize },
    Transpose,
    /// Mean over all elements, producing a scalar.
    Mean,
    /// Sum over all elements, producing a scalar.
    Sum,
    /// Mean softmax cross-entropy over the rows of `logits (m, classes)`
    /// selected by `mask` (all rows when `None`).
    CrossEntropy {
        targets: Arc<[usize]>,
        mask: Option<Arc<[bool]>>,
    },
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::MatMul => OpKind::MatMul,
            Op::BiasAdd => OpKind::BiasAdd,
            Op::Add => OpKind::Add,
            Op::Mul => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::Relu => OpKind::Relu,
            Op::Swish => OpKind::Swish,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Glu => OpKind::Glu,
            Op::Softmax => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::DepthwiseConv1d { .. } => OpKind::DepthwiseConv1d,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Transpose => OpKind::Transpose,
            Op::Mean => OpKind::Mean,
            Op::Sum => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_parse_back() {
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
        assert!(matches!("gelu".parse::<OpKind>(), Err(Error::UnknownOp(_))));
    }
}
