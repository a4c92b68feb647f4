//! Dense row-major tensors generic over the storage scalar.
//!
//! Training runs at 32-bit, verification (gradient checks, linear algebra
//! oracles) at 64-bit; everything downstream is generic over [`Scalar`].

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point storage type for tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + num_traits::FromPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C <- alpha * A(m x k) * B(k x n) + beta * C, with explicit row/col
    /// strides so transposed operands reuse the same kernel.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
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
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn of_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
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
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::zero(); n],
        }
    }

    pub fn scalar(x: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn of_f64(shape: Vec<usize>, data: &[f64]) -> Self {
        Tensor::new(shape, data.iter().map(|&x| E::of_f64(x)).collect()).unwrap()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows/cols when the tensor is viewed as a matrix over its last axis.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        let rows = if cols == 0 { 0 } else { self.numel() / cols };
        (rows, cols)
    }

    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn map_precision<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::of_f64(x.as_f64())).collect(),
        }
    }
}

/// C(m x n) = A(m x k) * B(k x n)
pub fn matmul_nn<E: Scalar>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    E::gemm(m, k, n, E::one(), a, k as isize, 1, b, n as isize, 1, E::zero(), c);
}

/// C(m x n) += A(m x k) * B(n x k)^T
pub fn matmul_nt_acc<E: Scalar>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    E::gemm(m, k, n, E::one(), a, k as isize, 1, b, 1, k as isize, E::one(), c);
}

/// C(m x n) = A(m x k) * B(n x k)^T
pub fn matmul_nt<E: Scalar>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    E::gemm(m, k, n, E::one(), a, k as isize, 1, b, 1, k as isize, E::zero(), c);
}

/// C(m x n) += A(k x m)^T * B(k x n)
pub fn matmul_tn_acc<E: Scalar>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    E::gemm(m, k, n, E::one(), a, 1, m as isize, b, n as isize, 1, E::one(), c);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_shape() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn gemm_routes_match_naive() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f64; 4];
        matmul_nn(2, 3, 2, &a, &b, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // A * B^T with B stored as 2x3
        let bt = [7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0f64; 4];
        matmul_nt(2, 3, 2, &a, &bt, &mut c2);
        assert_eq!(c2, [58.0, 64.0, 139.0, 154.0]);
    }
}
