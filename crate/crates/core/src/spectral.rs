//! Dense SVD with a fixed ordering and sign convention, numerical rank, and
//! projector whitening.
//!
//! Factorization is delegated to nalgebra's Golub-Kahan bidiagonal SVD; this
//! module pins down what nalgebra leaves open (ordering, signs, rank cut-off)
//! so that two calls on equal inputs yield bitwise-equal factors.

use crate::error::{Error, Result};
use crate::Matrix;

/// Rank-revealing SVD `M = U · diag(s) · Vᵀ` truncated to the numerical rank.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition {
    /// `m × r`, orthonormal columns.
    pub u: Matrix,
    /// `r` singular values, non-increasing.
    pub s: Vec<f64>,
    /// `n × r`, orthonormal columns.
    pub v: Matrix,
    /// All `min(m, n)` singular values, including those below the rank threshold.
    pub full_spectrum: Vec<f64>,
}

impl SpectralDecomposition {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (j, &sigma) in self.s.iter().enumerate() {
            us.column_mut(j).scale_mut(sigma);
        }
        us * self.v.transpose()
    }
}

pub(crate) fn check_finite(m: &Matrix) -> Result<()> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(Error::NonFinite { row: i, col: j });
            }
        }
    }
    Ok(())
}

/// Singular value decomposition with non-increasing singular values, truncated
/// at [`numerical_rank`]. In every column of `U` the entry of largest magnitude
/// (first one on ties) is non-negative; `V` is flipped to match.
pub fn svd(m: &Matrix) -> Result<SpectralDecomposition> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::Degenerate(format!(
            "cannot decompose a {rows}x{cols} matrix"
        )));
    }
    check_finite(m)?;

    let raw = nalgebra::linalg::SVD::try_new(m.clone(), true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let u_raw = raw.u.expect("requested U");
    let vt_raw = raw.v_t.expect("requested Vᵀ");
    let sigma = raw.singular_values;

    let mut order: Vec<usize> = (0..sigma.len()).collect();
    // Stable sort keeps the original index order among equal values.
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));
    let full_spectrum: Vec<f64> = order.iter().map(|&k| sigma[k].max(0.0)).collect();

    let r = numerical_rank(&full_spectrum, rows, cols);
    let mut u = Matrix::zeros(rows, r);
    let mut v = Matrix::zeros(cols, r);
    for (j, &k) in order.iter().take(r).enumerate() {
        let uc = u_raw.column(k);
        let pivot = uc
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bi, bv), (i, &x)| {
                if x.abs() > bv {
                    (i, x.abs())
                } else {
                    (bi, bv)
                }
            })
            .0;
        let sign = if uc[pivot] < 0.0 { -1.0 } else { 1.0 };
        u.column_mut(j).copy_from(&(uc * sign));
        v.column_mut(j)
            .copy_from(&(vt_raw.row(k).transpose() * sign));
    }

    Ok(SpectralDecomposition {
        u,
        s: full_spectrum[..r].to_vec(),
        v,
        full_spectrum,
    })
}

/// Number of singular values above `σ₁ · max(m, n) · ε`.
pub fn numerical_rank(s: &[f64], m: usize, n: usize) -> usize {
    let Some(&top) = s.first() else { return 0 };
    if top <= 0.0 {
        return 0;
    }
    let threshold = top * m.max(n) as f64 * f64::EPSILON;
    s.iter().take_while(|&&x| x > threshold).count()
}

/// Flattens the spectrum of `w`: `U·Vᵀ` from `w = U·Σ·Vᵀ`.
pub fn whiten(w: &Matrix) -> Result<Matrix> {
    let dec = svd(w)?;
    if dec.rank() == 0 {
        return Err(Error::Degenerate("cannot whiten a rank-0 matrix".into()));
    }
    Ok(&dec.u * dec.v.transpose())
}
