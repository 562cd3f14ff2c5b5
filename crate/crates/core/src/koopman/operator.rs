//! DMD / EDMD Koopman matrices and their spectra.

use nalgebra::{DMatrix, Schur};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::dictionary::Dictionary;
use super::linalg::pinv;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KoopmanMethod {
    Dmd,
    Edmd,
}

/// Finite-dimensional Koopman approximation.
///
/// `k` is stored in the forward orientation, `Psi(y) ~= k * Psi(x)`, for both
/// methods. The least-squares solution `G^+ A` of the EDMD normal equations
/// is its transpose ([`KoopmanMatrix::gram_solution`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KoopmanMatrix {
    pub k: DMatrix<f64>,
    pub method: KoopmanMethod,
    /// Reciprocal condition of `G` (EDMD) or `X` (DMD); 0 when rank deficient.
    pub rcond: f64,
    /// `||G K - A||_F` for EDMD, `||K X - Y||_F` for DMD.
    pub residual: f64,
    /// Set when the regressor was numerically singular and the
    /// pseudoinverse truncated it.
    pub singular: bool,
}

impl KoopmanMatrix {
    pub fn gram_solution(&self) -> DMatrix<f64> {
        self.k.transpose()
    }
}

/// Empirical Gram and cross-covariance matrices, both scaled by `1/M`.
pub fn gram_matrices(psi_x: &DMatrix<f64>, psi_y: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = psi_x.ncols().max(1) as f64;
    (psi_x * psi_x.transpose() / m, psi_x * psi_y.transpose() / m)
}

fn check_pair(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if x.ncols() != y.ncols() || x.nrows() != y.nrows() {
        return Err(Error::dim(format!(
            "X is {:?} but Y is {:?}",
            x.shape(),
            y.shape()
        )));
    }
    if x.ncols() == 0 {
        return Err(Error::EmptyDataset("no snapshots".into()));
    }
    Ok(())
}

/// EDMD on already-lifted data.
pub fn edmd_from_lifted(psi_x: &DMatrix<f64>, psi_y: &DMatrix<f64>, ridge: f64) -> Result<KoopmanMatrix> {
    check_pair(psi_x, psi_y)?;
    if psi_x.iter().chain(psi_y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite lifted data".into()));
    }
    if ridge < 0.0 {
        return Err(Error::InvalidInput("ridge must be non-negative".into()));
    }
    let n = psi_x.nrows();
    let (g, a) = gram_matrices(psi_x, psi_y);
    let regularized = &g + DMatrix::identity(n, n) * ridge;
    let inv = pinv(&regularized)?;
    let solution = &inv.matrix * &a;
    let residual = (&g * &solution - &a).norm();
    Ok(KoopmanMatrix {
        k: solution.transpose(),
        method: KoopmanMethod::Edmd,
        rcond: inv.rcond,
        residual,
        singular: inv.rank < n,
    })
}

pub fn edmd_koopman(x: &DMatrix<f64>, y: &DMatrix<f64>, dict: &Dictionary, ridge: f64) -> Result<KoopmanMatrix> {
    check_pair(x, y)?;
    edmd_from_lifted(&dict.lift(x)?, &dict.lift(y)?, ridge)
}

/// `K = Y X^+`.
pub fn dmd_koopman(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<KoopmanMatrix> {
    check_pair(x, y)?;
    let inv = pinv(x)?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite data".into()));
    }
    let k = y * &inv.matrix;
    let residual = (&k * x - y).norm();
    Ok(KoopmanMatrix {
        k,
        method: KoopmanMethod::Dmd,
        rcond: inv.rcond,
        residual,
        singular: inv.rank < x.nrows().min(x.ncols()),
    })
}

/// Eigen-decomposition of a Koopman matrix, sorted by descending `|lambda|`.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vec<Complex64>,
    /// Unit-norm right eigenvectors of `k`, one per column.
    pub right_eigenvectors: DMatrix<Complex64>,
    /// Coefficients `w_j` with `phi_j(x) = Psi(x)^T w_j`; these are the right
    /// eigenvectors of the least-squares solution `G^+ A` (left eigenvectors
    /// of `k`).
    pub eigenfunction_coeffs: DMatrix<Complex64>,
}

impl SpectralDecomposition {
    /// `phi_j` evaluated at every lifted column: result is `(#eig) x M`.
    pub fn eigenfunctions(&self, psi: &DMatrix<f64>) -> DMatrix<Complex64> {
        let psi_c = psi.map(|v| Complex64::new(v, 0.0));
        self.eigenfunction_coeffs.transpose() * psi_c
    }
}

fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|v| Complex64::new(v, 0.0))
}

fn order(a: &Complex64, b: &Complex64) -> std::cmp::Ordering {
    b.norm()
        .total_cmp(&a.norm())
        .then(b.re.total_cmp(&a.re))
        .then(b.im.total_cmp(&a.im))
}

/// Null-space basis vectors of `m - lambda I` for an eigenvalue cluster of size `count`.
fn null_vectors(m: &DMatrix<Complex64>, lambda: Complex64, count: usize) -> Result<Vec<Vec<Complex64>>> {
    let n = m.nrows();
    let shifted = m - DMatrix::<Complex64>::identity(n, n) * lambda;
    let svd = shifted
        .try_svd(false, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("eigenvector SVD did not converge".into()))?;
    let v_t = svd.v_t.expect("requested V^H");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|a, b| svd.singular_values[*a].total_cmp(&svd.singular_values[*b]));
    Ok(idx
        .into_iter()
        .take(count)
        .map(|i| {
            let mut v: Vec<Complex64> = v_t.row(i).iter().map(|c| c.conj()).collect();
            normalize_phase(&mut v);
            v
        })
        .collect())
}

/// Unit norm, with the largest-magnitude entry made real and positive.
fn normalize_phase(v: &mut [Complex64]) {
    let norm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let pivot = v
        .iter()
        .copied()
        .fold(Complex64::new(0.0, 0.0), |best, c| if c.norm() > best.norm() + 1e-12 { c } else { best });
    if norm == 0.0 || pivot.norm() == 0.0 {
        return;
    }
    let phase = pivot.conj() / pivot.norm();
    v.iter_mut().for_each(|c| *c = *c * phase / norm);
}

fn eigenvectors_for(m: &DMatrix<f64>, eigenvalues: &[Complex64], tol: f64) -> Result<DMatrix<Complex64>> {
    let n = m.nrows();
    let mc = to_complex(m);
    let mut cols: Vec<Vec<Complex64>> = Vec::with_capacity(n);
    let mut i = 0;
    while i < eigenvalues.len() {
        let mut j = i + 1;
        while j < eigenvalues.len() && (eigenvalues[j] - eigenvalues[i]).norm() <= tol {
            j += 1;
        }
        let cluster = &eigenvalues[i..j];
        let mean = cluster.iter().sum::<Complex64>() / cluster.len() as f64;
        cols.extend(null_vectors(&mc, mean, cluster.len())?);
        i = j;
    }
    Ok(DMatrix::from_fn(n, n, |r, c| cols[c][r]))
}

pub fn koopman_spectrum(km: &KoopmanMatrix) -> Result<SpectralDecomposition> {
    let k = &km.k;
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("Koopman matrix has non-finite entries".into()));
    }
    let n = k.nrows();
    let schur = Schur::try_new(k.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric("eigensolver did not converge".into()))?;
    let mut eigenvalues: Vec<Complex64> = schur.complex_eigenvalues().iter().copied().collect();
    eigenvalues.sort_by(order);
    let cluster_tol = 1e-10 * k.norm().max(1.0);
    let right = eigenvectors_for(k, &eigenvalues, cluster_tol)?;
    let left = eigenvectors_for(&k.transpose(), &eigenvalues, cluster_tol)?;
    debug_assert_eq!(right.ncols(), n);
    Ok(SpectralDecomposition {
        eigenvalues,
        right_eigenvectors: right,
        eigenfunction_coeffs: left,
    })
}
