//! SVD-based pseudoinverse and rank.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Default singular-value cutoff: `max(rows, cols) * sigma_max * eps`.
pub fn default_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * sigma_max * f64::EPSILON
}

fn singular_values(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(Vec::new());
    }
    let svd = m
        .clone()
        .try_svd(false, false, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
    Ok(svd.singular_values.iter().copied().collect())
}

/// Numerical rank with the default or a caller-supplied tolerance.
pub fn rank(m: &DMatrix<f64>, tol: Option<f64>) -> Result<usize> {
    let sv = singular_values(m)?;
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let tol = tol.unwrap_or_else(|| default_tolerance(m.nrows(), m.ncols(), smax));
    Ok(sv.iter().filter(|s| **s > tol).count())
}

/// Moore-Penrose pseudoinverse plus diagnostics.
#[derive(Debug, Clone)]
pub struct PseudoInverse {
    pub matrix: DMatrix<f64>,
    pub rank: usize,
    /// `sigma_min / sigma_max` over all singular values (0 when rank deficient).
    pub rcond: f64,
}

pub fn pinv(m: &DMatrix<f64>) -> Result<PseudoInverse> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return Ok(PseudoInverse {
            matrix: DMatrix::zeros(c, r),
            rank: 0,
            rcond: 0.0,
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("pseudoinverse of non-finite matrix".into()));
    }
    let svd = m
        .clone()
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let sv = &svd.singular_values;
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = default_tolerance(r, c, smax);
    let mut out = DMatrix::zeros(c, r);
    let mut rank = 0;
    for (k, s) in sv.iter().enumerate() {
        if *s > tol {
            rank += 1;
            out += (v_t.row(k).transpose() * u.column(k).transpose()) / *s;
        }
    }
    let full = r.min(c);
    let rcond = if smax > 0.0 && rank == full { smin / smax } else { 0.0 };
    Ok(PseudoInverse {
        matrix: out,
        rank,
        rcond,
    })
}
