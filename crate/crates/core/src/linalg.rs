//! Dense direct solves with residual certification.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Relative residual `|Ax - b|_inf / |b|_inf` a solve must reach.
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;
/// Smallest admissible `min |u_ii| / max |u_ii|` of the LU factor.
pub const PIVOT_RATIO: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("singular system of size {size}: {detail}")]
    Singular { size: usize, detail: String },
}

/// Triplet (row, col, value) accumulator; duplicates are summed on conversion.
#[derive(Debug, Clone, Default)]
pub struct Triplets {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(rows: usize, cols: usize) -> Self {
        Triplets {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.rows && col < self.cols);
        if value != 0.0 {
            self.entries.push((row, col, value));
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for &(r, c, v) in &self.entries {
            m[(r, c)] += v;
        }
        m
    }

    /// `y = A x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        for &(r, c, v) in &self.entries {
            y[r] += v * x[c];
        }
        y
    }
}

pub fn solve(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(LinalgError::Singular {
            size: n,
            detail: format!("shape {}x{} with rhs {}", a.nrows(), a.ncols(), b.len()),
        });
    }
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    let lu = a.clone().lu();
    let u = lu.u();
    let diag = u.diagonal();
    let max = diag.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let min = diag.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
    if !(max > 0.0) || min < PIVOT_RATIO * max {
        return Err(LinalgError::Singular {
            size: n,
            detail: format!("pivot ratio {:.3e}", if max > 0.0 { min / max } else { 0.0 }),
        });
    }
    let x = lu.solve(b).ok_or_else(|| LinalgError::Singular {
        size: n,
        detail: "zero pivot".into(),
    })?;
    let r = &a * &x - b;
    let scale = b.amax().max(a.amax() * x.amax()).max(f64::MIN_POSITIVE);
    let rel = r.amax() / scale;
    if !rel.is_finite() || rel > RESIDUAL_TOLERANCE {
        return Err(LinalgError::Singular {
            size: n,
            detail: format!("relative residual {rel:.3e}"),
        });
    }
    Ok(x)
}
