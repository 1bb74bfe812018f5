//! Dense row-major matrices of `f64`.
//!
//! Everything in this crate is desk-scale, so a plain `Vec<f64>` with
//! hand-rolled loops is both simple and fast enough; gradient checks
//! stay strict because all arithmetic is 64-bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A rows x cols matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::InvalidParameter {
                name: "values",
                reason: format!(
                    "expected {} entries for {rows}x{cols}, got {}",
                    rows * cols,
                    values.len()
                ),
            });
        }
        Ok(Self { rows, cols, values })
    }

    /// Identity matrix of size n.
    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Frobenius / flattened L2 norm.
    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn add_in_place(&mut self, other: &Tensor2D) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    /// self + other, allocating.
    pub fn add(&self, other: &Tensor2D) -> Tensor2D {
        let mut out = self.clone();
        out.add_in_place(other);
        out
    }

    /// Dense product self (m x k) * other (k x n).
    pub fn matmul(&self, other: &Tensor2D) -> Tensor2D {
        debug_assert_eq!(self.cols, other.rows);
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor2D::zeros(m, n);
        for i in 0..m {
            let a_row = &self.values[i * k..(i + 1) * k];
            let o_row = &mut out.values[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.values[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// self (m x k) * other^T (n x k) -> m x n.
    pub fn matmul_nt(&self, other: &Tensor2D) -> Tensor2D {
        debug_assert_eq!(self.cols, other.cols);
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Tensor2D::zeros(m, n);
        for i in 0..m {
            let a_row = &self.values[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.values[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (a, b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out.values[i * n + j] = acc;
            }
        }
        out
    }

    /// self^T (k x m) * other (k x n)... i.e. transpose(self) * other.
    pub fn matmul_tn(&self, other: &Tensor2D) -> Tensor2D {
        debug_assert_eq!(self.rows, other.rows);
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor2D::zeros(m, n);
        for p in 0..k {
            let a_row = &self.values[p * m..(p + 1) * m];
            let b_row = &other.values[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out.values[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.values[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_returns_operand() {
        let w = Tensor2D::from_values(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let i = Tensor2D::identity(3);
        assert_eq!(i.matmul(&w), w);
    }

    #[test]
    fn matmul_variants_agree_with_explicit_transpose() {
        let a = Tensor2D::from_values(2, 3, vec![1.0, -2.0, 0.5, 3.0, 1.0, -1.0]).unwrap();
        let b = Tensor2D::from_values(4, 3, vec![2.0, 0.0, 1.0, -1.0, 1.5, 0.0, 0.25, 2.0, -3.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(a.matmul_nt(&b), a.matmul(&b.transpose()));
        let c = Tensor2D::from_values(2, 4, vec![1.0, 0.0, 2.0, -1.0, 0.5, 1.0, 0.0, 3.0]).unwrap();
        assert_eq!(a.matmul_tn(&c), a.transpose().matmul(&c));
    }

    #[test]
    fn from_values_rejects_wrong_length() {
        assert!(Tensor2D::from_values(2, 2, vec![0.0; 3]).is_err());
    }
}
