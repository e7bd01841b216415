//! Dense row-major matrices over f32/f64.
//!
//! The model runs in f32 by default; the same code instantiated at f64 is
//! the 64-bit mode used for gradient checking. Reductions that affect
//! invariants (softmax normalization, weighted means) accumulate in f64
//! regardless of the element type.

use num_traits::Float;

/// Element scalar for model math.
pub trait Real:
    Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }
}

/// Affine map with weights stored (fan_in x fan_out) so that `x * w`
/// walks both operands contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T> {
    pub w: Matrix<T>,
    pub b: Vec<T>,
}

impl<T: Real> Affine<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Affine {
            w: Matrix::zeros(fan_in, fan_out),
            b: vec![T::zero(); fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.rows
    }

    pub fn fan_out(&self) -> usize {
        self.w.cols
    }

    /// y = x.w + b, with x of shape (n x fan_in).
    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        debug_assert_eq!(x.cols, self.fan_in());
        let (n, k, m) = (x.rows, self.fan_in(), self.fan_out());
        let mut y = Matrix::zeros(n, m);
        for i in 0..n {
            let yi = &mut y.data[i * m..(i + 1) * m];
            yi.copy_from_slice(&self.b);
            let xi = &x.data[i * k..(i + 1) * k];
            for (p, &xv) in xi.iter().enumerate() {
                if xv == T::zero() {
                    continue;
                }
                let wrow = &self.w.data[p * m..(p + 1) * m];
                for (yj, &wj) in yi.iter_mut().zip(wrow) {
                    *yj = *yj + xv * wj;
                }
            }
        }
        y
    }

    /// dx = dy.w^T, with dy of shape (n x fan_out).
    pub fn backward_input(&self, dy: &Matrix<T>) -> Matrix<T> {
        debug_assert_eq!(dy.cols, self.fan_out());
        let (n, k, m) = (dy.rows, self.fan_in(), self.fan_out());
        let mut dx = Matrix::zeros(n, k);
        for i in 0..n {
            let dyi = &dy.data[i * m..(i + 1) * m];
            let dxi = &mut dx.data[i * k..(i + 1) * k];
            for (p, dst) in dxi.iter_mut().enumerate() {
                let wrow = &self.w.data[p * m..(p + 1) * m];
                let mut acc = T::zero();
                for (&dv, &wv) in dyi.iter().zip(wrow) {
                    acc = acc + dv * wv;
                }
                *dst = acc;
            }
        }
        dx
    }

    /// Accumulate dW += x^T.dy and db += column sums of dy.
    pub fn accumulate_grads(x: &Matrix<T>, dy: &Matrix<T>, dw: &mut Matrix<T>, db: &mut [T]) {
        debug_assert_eq!(x.rows, dy.rows);
        debug_assert_eq!(dw.rows, x.cols);
        debug_assert_eq!(dw.cols, dy.cols);
        let (n, k, m) = (x.rows, x.cols, dy.cols);
        for i in 0..n {
            let xi = &x.data[i * k..(i + 1) * k];
            let dyi = &dy.data[i * m..(i + 1) * m];
            for (p, &xv) in xi.iter().enumerate() {
                if xv == T::zero() {
                    continue;
                }
                let drow = &mut dw.data[p * m..(p + 1) * m];
                for (dwj, &dv) in drow.iter_mut().zip(dyi) {
                    *dwj = *dwj + xv * dv;
                }
            }
            for (bj, &dv) in db.iter_mut().zip(dyi) {
                *bj = *bj + dv;
            }
        }
    }
}

/// Numerically stable softmax; accumulation in f64.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |acc, &v| acc.max(v.as_f64()));
    let exps: Vec<f64> = logits.iter().map(|&v| (v.as_f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter()
        .map(|e| T::from_f64_lossy(e / sum))
        .collect()
}

/// Log-sum-exp in f64, for exact loss computation.
pub fn log_sum_exp<T: Real>(logits: &[T]) -> f64 {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |acc, &v| acc.max(v.as_f64()));
    let sum: f64 = logits.iter().map(|&v| (v.as_f64() - max).exp()).sum();
    max + sum.ln()
}
