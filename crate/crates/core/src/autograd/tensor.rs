//! Dense row-major tensors and the scalar abstraction shared by the f32
//! training path and the f64 gradient-check path.

use std::fmt::Debug;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type usable by the autograd engine.
pub trait Scalar:
    Float + Default + Debug + AddAssign + SubAssign + MulAssign + DivAssign + Send + Sync + 'static
{
    /// `c = alpha * a * b + beta * c` over strided views.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (for `c`) buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn cast_from(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Little-endian byte width.
    const BYTES: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn cast_from(x: f64) -> f32 {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn cast_from(x: f64) -> f64 {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![F::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self::new(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: F) -> Self {
        Self::new(&[1], vec![value])
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::new(shape, data.iter().map(|&x| F::cast_from(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of rows when viewed as `[rows, cols]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols().max(1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::cast_from(x.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Split `shape` into (batch, rows, cols) treating all leading axes as batch.
pub(crate) fn matrix_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        0 => (1, 1, 1),
        1 => (1, 1, shape[0]),
        n => (
            shape[..n - 2].iter().product(),
            shape[n - 2],
            shape[n - 1],
        ),
    }
}

/// Batched `c[i] (+)= op(a[i]) * op(b[i])`. Either operand may have batch 1,
/// in which case it is broadcast across the batch.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_gemm<F: Scalar>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    a_batched: bool,
    a_trans: bool,
    b: &[F],
    b_batched: bool,
    b_trans: bool,
    c: &mut [F],
    c_batched: bool,
    accumulate: bool,
) {
    // a is stored [m,k] (or [k,m] when transposed); b is [k,n] (or [n,k]).
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let a_stride = if a_batched { m * k } else { 0 };
    let b_stride = if b_batched { k * n } else { 0 };
    let c_stride = if c_batched { m * n } else { 0 };
    let mut beta = if accumulate { F::one() } else { F::zero() };
    if m == 0 || n == 0 {
        return;
    }
    for i in 0..batch {
        // SAFETY: slices are bounds-checked below; matrixmultiply reads/writes only
        // the described views.
        unsafe {
            let ap = a[i * a_stride..i * a_stride + m * k].as_ptr();
            let bp = b[i * b_stride..i * b_stride + k * n].as_ptr();
            let cp = c[i * c_stride..i * c_stride + m * n].as_mut_ptr();
            F::gemm(m, k, n, F::one(), ap, rsa, csa, bp, rsb, csb, beta, cp, n as isize, 1);
        }
        if !c_batched {
            beta = F::one();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|x| x as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5 - 1.0).collect(); // 3x4
        let mut c = vec![0.0; 8];
        batched_gemm(1, 2, 3, 4, &a, false, false, &b, false, false, &mut c, false, false);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // aT stored as 3x2, bT stored as 4x3
        let at: Vec<f64> = (0..6).map(|x| a[(x % 2) * 3 + x / 2]).collect();
        let bt: Vec<f64> = (0..12).map(|x| b[(x % 3) * 4 + x / 3]).collect();
        let mut c2 = vec![0.0; 8];
        batched_gemm(1, 2, 3, 4, &at, false, true, &bt, false, true, &mut c2, false, false);
        assert_eq!(c, c2);
    }

    #[test]
    fn matrix_dims_folds_leading_axes() {
        assert_eq!(matrix_dims(&[2, 3, 4, 5]), (6, 4, 5));
        assert_eq!(matrix_dims(&[7]), (1, 1, 7));
    }
}
