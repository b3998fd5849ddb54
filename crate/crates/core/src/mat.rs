//! Dense row-major `f64` matrices.
//!
//! One type serves every tabular value in the crate: particle batches,
//! network activations, velocity fields, upstream gradient weights. Rows are
//! contiguous, which is what the hot loops in [`crate::net`] want.

use crate::{Error, Result};

/// A dense `rows x cols` matrix of `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// A batch of `n` points in `R^m`, one point per row.
pub type PointBatch = Matrix;

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds from a flat row-major buffer. Errors if the length is not
    /// `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "buffer of length {} cannot fill a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds from explicit rows; all rows must share one length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "row {} has length {}, expected {}",
                    i,
                    r.len(),
                    cols
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1))
    }

    /// New matrix holding the listed rows, in order (repeats allowed).
    pub fn gather(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (k, &i) in indices.iter().enumerate() {
            out.row_mut(k).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-column means.
    pub fn col_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        for r in self.iter_rows() {
            for (acc, v) in m.iter_mut().zip(r) {
                *acc += v;
            }
        }
        let n = self.rows.max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Per-column sample standard deviations (denominator `n - 1`).
    pub fn col_stds(&self) -> Vec<f64> {
        let means = self.col_means();
        let mut s = vec![0.0; self.cols];
        for r in self.iter_rows() {
            for ((acc, v), m) in s.iter_mut().zip(r).zip(&means) {
                let d = v - m;
                *acc += d * d;
            }
        }
        let denom = (self.rows.max(2) - 1) as f64;
        s.iter_mut().for_each(|v| *v = (*v / denom).sqrt());
        s
    }

    /// Axis-aligned bounding box `(mins, maxs)`, inflated on each side by
    /// `inflate` times the axis span. A zero-span axis is widened by 1.0 so
    /// the box always has positive volume.
    pub fn bounding_box(&self, inflate: f64) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.cols];
        let mut hi = vec![f64::NEG_INFINITY; self.cols];
        for r in self.iter_rows() {
            for j in 0..self.cols {
                lo[j] = lo[j].min(r[j]);
                hi[j] = hi[j].max(r[j]);
            }
        }
        for j in 0..self.cols {
            if !lo[j].is_finite() || !hi[j].is_finite() {
                lo[j] = 0.0;
                hi[j] = 0.0;
            }
            let mut span = hi[j] - lo[j];
            if span <= 0.0 {
                span = 1.0;
                lo[j] -= 0.5;
                hi[j] += 0.5;
            }
            lo[j] -= inflate * span;
            hi[j] += inflate * span;
        }
        (lo, hi)
    }

    /// Stacks `other` below `self`. Column counts must match.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "cannot stack {} columns onto {}",
                other.cols, self.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0]).is_err());
        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn gather_repeats_rows() {
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let g = m.gather(&[1, 1, 0]);
        assert_eq!(g.rows(), 3);
        assert_eq!(g.row(0), &[3.0, 4.0]);
        assert_eq!(g.row(2), &[1.0, 2.0]);
    }

    #[test]
    fn bounding_box_inflates_each_side() {
        let m = Matrix::from_rows(&[&[0.0, -1.0], &[2.0, 3.0]]).unwrap();
        let (lo, hi) = m.bounding_box(0.1);
        assert_eq!(lo, vec![-0.2, -1.4]);
        assert_eq!(hi, vec![2.2, 3.4]);
    }

    #[test]
    fn bounding_box_degenerate_axis_gets_width() {
        let m = Matrix::from_rows(&[&[1.0, 5.0], &[1.0, 6.0]]).unwrap();
        let (lo, hi) = m.bounding_box(0.0);
        assert!(lo[0] < 1.0 && hi[0] > 1.0);
    }

    #[test]
    fn col_stats() {
        let m = Matrix::from_rows(&[&[0.0, 1.0], &[2.0, 3.0]]).unwrap();
        assert_eq!(m.col_means(), vec![1.0, 2.0]);
        let s = m.col_stds();
        assert!((s[0] - std::f64::consts::SQRT_2).abs() < 1e-12);
    }
}
