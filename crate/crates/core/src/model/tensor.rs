//! Row-major dense matrices and the handful of kernels the transformer needs.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        Matrix {
            rows,
            cols,
            data: (0..rows * cols).map(|_| std * rng.normal()).collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// `y = x · w (+ bias)` for `x` of shape `t × w.rows`.
pub fn matmul(x: &[f64], t: usize, w: &Matrix, bias: Option<&[f64]>) -> Vec<f64> {
    let (m, n) = (w.rows, w.cols);
    debug_assert_eq!(x.len(), t * m);
    let mut y = vec![0.0; t * n];
    for (xr, yr) in x.chunks_exact(m).zip(y.chunks_exact_mut(n)) {
        if let Some(b) = bias {
            yr.copy_from_slice(b);
        }
        for (i, &xi) in xr.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (yv, wv) in yr.iter_mut().zip(w.row(i)) {
                *yv += xi * wv;
            }
        }
    }
    y
}

/// `dx += dy · wᵀ` for `dy` of shape `t × w.cols`.
pub fn matmul_t_acc(dy: &[f64], t: usize, w: &Matrix, dx: &mut [f64]) {
    let (m, n) = (w.rows, w.cols);
    debug_assert_eq!(dy.len(), t * n);
    for (dyr, dxr) in dy.chunks_exact(n).zip(dx.chunks_exact_mut(m)) {
        for (i, dxv) in dxr.iter_mut().enumerate() {
            *dxv += dot(dyr, w.row(i));
        }
    }
}

/// `dw += xᵀ · dy` for `x` of shape `t × dw.rows` and `dy` of shape `t × dw.cols`.
pub fn outer_acc(x: &[f64], dy: &[f64], t: usize, dw: &mut Matrix) {
    let (m, n) = (dw.rows, dw.cols);
    for r in 0..t {
        let xr = &x[r * m..(r + 1) * m];
        let dyr = &dy[r * n..(r + 1) * n];
        for (i, &xi) in xr.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (g, d) in dw.data[i * n..(i + 1) * n].iter_mut().zip(dyr) {
                *g += xi * d;
            }
        }
    }
}

/// `db += Σ_t dy[t]`.
pub fn col_sum_acc(dy: &[f64], n: usize, db: &mut [f64]) {
    for row in dy.chunks_exact(n) {
        for (b, d) in db.iter_mut().zip(row) {
            *b += d;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
