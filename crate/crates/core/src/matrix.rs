//! Small dense matrices over the rationals.

use nalgebra::DMatrix;
use num::traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::exact::{to_f64, Q};

/// Square matrix stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QMatrix {
    pub size: usize,
    #[serde(with = "crate::exact::qvec")]
    pub data: Vec<Q>,
}

impl QMatrix {
    pub fn zeros(size: usize) -> Self {
        QMatrix { size, data: vec![Q::zero(); size * size] }
    }

    pub fn identity(size: usize) -> Self {
        let mut m = QMatrix::zeros(size);
        for i in 0..size {
            m.data[i * size + i] = Q::one();
        }
        m
    }

    pub fn diagonal(entries: &[Q]) -> Self {
        let mut m = QMatrix::zeros(entries.len());
        for (i, e) in entries.iter().enumerate() {
            m.data[i * entries.len() + i] = e.clone();
        }
        m
    }

    pub fn from_columns(cols: &[Vec<Q>]) -> Self {
        let size = cols.len();
        let mut m = QMatrix::zeros(size);
        for (j, col) in cols.iter().enumerate() {
            assert_eq!(col.len(), size);
            for (i, v) in col.iter().enumerate() {
                m.data[i * size + j] = v.clone();
            }
        }
        m
    }

    pub fn get(&self, i: usize, j: usize) -> &Q {
        &self.data[i * self.size + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: Q) {
        self.data[i * self.size + j] = v;
    }

    pub fn is_identity(&self) -> bool {
        *self == QMatrix::identity(self.size)
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.size).all(|i| (0..self.size).all(|j| i == j || self.get(i, j).is_zero()))
    }

    pub fn is_lower_triangular(&self) -> bool {
        (0..self.size).all(|i| ((i + 1)..self.size).all(|j| self.get(i, j).is_zero()))
    }

    pub fn is_upper_triangular(&self) -> bool {
        (0..self.size).all(|i| (0..i).all(|j| self.get(i, j).is_zero()))
    }

    pub fn mul(&self, other: &QMatrix) -> QMatrix {
        let n = self.size;
        let mut out = QMatrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                if a.is_zero() {
                    continue;
                }
                for j in 0..n {
                    let b = other.get(k, j);
                    if !b.is_zero() {
                        out.data[i * n + j] += a * b;
                    }
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[Q]) -> Vec<Q> {
        (0..self.size)
            .map(|i| {
                (0..self.size)
                    .filter(|&j| !self.get(i, j).is_zero())
                    .fold(Q::zero(), |acc, j| acc + self.get(i, j) * &v[j])
            })
            .collect()
    }

    /// Exact determinant: diagonal product for triangular input, Gaussian elimination otherwise.
    pub fn det(&self) -> Q {
        let n = self.size;
        if self.is_lower_triangular() || self.is_upper_triangular() {
            return (0..n).fold(Q::one(), |acc, i| acc * self.get(i, i));
        }
        let mut a = self.data.clone();
        let mut det = Q::one();
        for col in 0..n {
            let Some(piv) = (col..n).find(|&r| !a[r * n + col].is_zero()) else {
                return Q::zero();
            };
            if piv != col {
                for j in 0..n {
                    a.swap(piv * n + j, col * n + j);
                }
                det = -det;
            }
            let p = a[col * n + col].clone();
            det *= &p;
            for r in (col + 1)..n {
                let f = &a[r * n + col] / &p;
                if f.is_zero() {
                    continue;
                }
                for j in col..n {
                    let v = &f * &a[col * n + j];
                    a[r * n + j] -= v;
                }
            }
        }
        det
    }

    /// Exact inverse by Gauss-Jordan; None when singular.
    pub fn inverse(&self) -> Option<QMatrix> {
        let n = self.size;
        let mut a = self.data.clone();
        let mut inv = QMatrix::identity(n).data;
        for col in 0..n {
            let piv = (col..n).find(|&r| !a[r * n + col].is_zero())?;
            if piv != col {
                for j in 0..n {
                    a.swap(piv * n + j, col * n + j);
                    inv.swap(piv * n + j, col * n + j);
                }
            }
            let p = a[col * n + col].clone();
            for j in 0..n {
                a[col * n + j] /= &p;
                inv[col * n + j] /= &p;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = a[r * n + col].clone();
                if f.is_zero() {
                    continue;
                }
                for j in 0..n {
                    let va = &f * &a[col * n + j];
                    a[r * n + j] -= va;
                    let vi = &f * &inv[col * n + j];
                    inv[r * n + j] -= vi;
                }
            }
        }
        Some(QMatrix { size: n, data: inv })
    }

    pub fn to_f64(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.size, self.size, self.data.iter().map(to_f64))
    }

    /// Frobenius norm squared, exact.
    pub fn frobenius_sq(&self) -> Q {
        self.data.iter().map(|v| v * v).fold(Q::zero(), |a, b| a + b)
    }
}

/// Smallest singular value of a floating-point matrix.
pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}
