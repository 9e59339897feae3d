//! Dense tensors with a tape-based reverse-mode differentiation graph.
//!
//! Values live in [`Tensor`]; differentiation happens on a [`Graph`] whose
//! nodes are addressed by [`Var`] handles. Parameters are named tensors held
//! in a [`ParamStore`] and carry a trainable flag. A frozen parameter never
//! makes its consumers differentiable, so `backward` never visits subgraphs
//! that cannot reach a trainable parameter.

mod counter;
mod gradcheck;
mod graph;
mod kernels;
mod op;
mod param;

use std::fmt;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

pub use counter::{OpCounter, ScopeStats};
pub use gradcheck::{finite_difference_check, GradCheckReport, GRAD_FLOOR};
pub use graph::{Graph, Var};
pub use op::{Op, OpKind};
pub use param::{GradientMap, ParamStore, Parameter};

use crate::error::{Error, Result};

/// Element type of a tensor buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// On-disk code used by the checkpoint format.
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "float32",
            DType::F64 => "float64",
        })
    }
}

/// Floating-point element types supported by the engine.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const DTYPE: DType;

    /// `c = a · b (+ c if accumulate)` with arbitrary element strides.
    ///
    /// `a` is `m × k` addressed as `a[i * a_rs + p * a_cs]`, likewise `b`
    /// (`k × n`) and `c` (`m × n`, row-major contiguous).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_rs: usize,
        a_cs: usize,
        b: &[Self],
        b_rs: usize,
        b_cs: usize,
        c: &mut [Self],
        accumulate: bool,
    );

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    fn bits(self) -> u64;

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_gemm_bounds(
    m: usize,
    k: usize,
    n: usize,
    a_len: usize,
    a_strides: (usize, usize),
    b_len: usize,
    b_strides: (usize, usize),
    c_len: usize,
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * a_strides.0 + (k - 1) * a_strides.1 < a_len, "gemm: lhs out of bounds");
    assert!((k - 1) * b_strides.0 + (n - 1) * b_strides.1 < b_len, "gemm: rhs out of bounds");
    assert!(m * n <= c_len, "gemm: output out of bounds");
}

macro_rules! impl_real {
    ($ty:ty, $dtype:expr, $gemm:path) => {
        impl Real for $ty {
            const DTYPE: DType = $dtype;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_rs: usize,
                a_cs: usize,
                b: &[Self],
                b_rs: usize,
                b_cs: usize,
                c: &mut [Self],
                accumulate: bool,
            ) {
                check_gemm_bounds(m, k, n, a.len(), (a_rs, a_cs), b.len(), (b_rs, b_cs), c.len());
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c[..m * n].iter_mut().for_each(|x| *x = 0.0);
                    }
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds of every addressed element were checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_rs as isize,
                        a_cs as isize,
                        b.as_ptr(),
                        b_rs as isize,
                        b_cs as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$ty>::from_le_bytes(bytes.try_into().expect("element width"))
            }

            fn bits(self) -> u64 {
                self.to_bits() as u64
            }
        }
    };
}

impl_real!(f32, DType::F32, matrixmultiply::sgemm);
impl_real!(f64, DType::F64, matrixmultiply::dgemm);

/// Dense row-major tensor. Cloning shares the buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Invalid(format!("tensor dims must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Invalid(format!(
                "shape {shape:?} holds {numel} elements but buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for kernels whose output shape is known good.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![T::zero(); n])
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64_lossy(z * std)
            })
            .collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// Element-type conversion.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        )
    }

    /// Stacks rank-2 tensors with equal column counts along rows.
    pub fn concat_rows(parts: &[&Tensor<T>]) -> Result<Self> {
        let cols = parts
            .first()
            .and_then(|t| t.dims2())
            .ok_or_else(|| Error::Invalid("concat_rows needs rank-2 inputs".into()))?
            .1;
        let mut rows = 0;
        let mut data = Vec::new();
        for part in parts {
            match part.dims2() {
                Some((r, c)) if c == cols => {
                    rows += r;
                    data.extend_from_slice(part.data());
                }
                _ => {
                    return Err(Error::Invalid(format!(
                        "concat_rows: expected (_, {cols}), got {:?}",
                        part.shape()
                    )))
                }
            }
        }
        Self::new(vec![rows, cols], data)
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Bitwise equality (distinguishes `-0.0` from `0.0` and compares NaN payloads).
pub fn bitwise_eq<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.shape() == b.shape()
        && a.data().iter().zip(b.data()).all(|(x, y)| x.bits() == y.bits())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_buffer() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn gemm_strided_transpose() {
        // a = [[1,2],[3,4]], b = a^T via strides
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let mut c = [0.0; 4];
        f64::gemm(2, 2, 2, &a, 2, 1, &a, 1, 2, &mut c, false);
        assert_eq!(c, [5.0, 11.0, 11.0, 25.0]);
        f64::gemm(2, 2, 2, &a, 2, 1, &a, 1, 2, &mut c, true);
        assert_eq!(c, [10.0, 22.0, 22.0, 50.0]);
    }

    #[test]
    fn dtype_codes_round_trip() {
        for d in [DType::F32, DType::F64] {
            assert_eq!(DType::from_code(d.code()), Some(d));
        }
        assert_eq!(DType::from_code(7), None);
    }
}
