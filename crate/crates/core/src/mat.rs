//! A small dense row-major matrix used for parameters, covariances and
//! test fixtures. Heavy lifting (products, factorizations) happens on the
//! [`crate::tape::Tape`]; this type is plain storage with a few helpers.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = Mat::zeros(n, n);
        for (i, &e) in entries.iter().enumerate() {
            m.data[i * n + i] = e;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Maximum absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Lower Cholesky factor of `self + jitter*I`, reading the symmetrized
    /// matrix. Returns None if a pivot is not strictly positive.
    pub fn cholesky_lower(&self, jitter: f64) -> Option<Mat> {
        assert_eq!(self.rows, self.cols, "cholesky wants square");
        let n = self.rows;
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut s = self.get(j, j) + jitter;
            for k in 0..j {
                s -= l.get(j, k) * l.get(j, k);
            }
            if !(s > 0.0) || !s.is_finite() {
                return None;
            }
            let ljj = s.sqrt();
            l.set(j, j, ljj);
            for i in j + 1..n {
                let mut t = 0.5 * (self.get(i, j) + self.get(j, i));
                for k in 0..j {
                    t -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, t / ljj);
            }
        }
        Some(l)
    }
}
