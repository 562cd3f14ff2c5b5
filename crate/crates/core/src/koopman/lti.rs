//! Lifted linear state-space fits and their admissibility checks.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::linalg::{pinv, rank};
use crate::error::{Error, Result};

/// `X_{t+1} = A X_t + B u_t`, `x = C X_t` (D is always zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLiftedSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub lift_dim: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    /// Reciprocal condition of the regularized `Z Z^T / M`.
    pub rcond: f64,
}

impl LinearLiftedSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n_lift = a.nrows();
        if a.ncols() != n_lift || b.nrows() != n_lift || c.ncols() != n_lift {
            return Err(Error::dim(format!(
                "A {:?}, B {:?}, C {:?} are not conformant",
                a.shape(),
                b.shape(),
                c.shape()
            )));
        }
        let (n, m) = (c.nrows(), b.ncols());
        Ok(Self {
            a,
            b,
            c,
            d: DMatrix::zeros(n, m),
            lift_dim: n_lift,
            state_dim: n,
            control_dim: m,
            rcond: 1.0,
        })
    }

    pub fn step(&self, z: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a * z + &self.b * u
    }

    pub fn readout(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        &self.c * z
    }

    pub fn is_finite(&self) -> bool {
        [&self.a, &self.b, &self.c].iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Writes `A.csv`, `B.csv` and `C.csv` into `dir`.
    pub fn export_csv(&self, dir: &Path) -> Result<()> {
        for (name, m) in [("A", &self.a), ("B", &self.b), ("C", &self.c)] {
            let path = dir.join(format!("{name}.csv"));
            fs::write(&path, matrix_csv(m)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for r in 0..m.nrows() {
        let row: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Least-squares `[A, B]` over `Z = [X_lift; U]` and `C = X_raw X_lift^+`.
///
/// `[A, B] = (Y Z^T / M) (Z Z^T / M + ridge I)^+`, so duplicating the whole
/// data set leaves the fit unchanged.
pub fn fit_lifted_lti(
    x_lift: &DMatrix<f64>,
    y_lift: &DMatrix<f64>,
    u: &DMatrix<f64>,
    x_raw: &DMatrix<f64>,
    ridge: f64,
) -> Result<LinearLiftedSystem> {
    let m = x_lift.ncols();
    if y_lift.ncols() != m || u.ncols() != m || x_raw.ncols() != m || y_lift.nrows() != x_lift.nrows() {
        return Err(Error::dim(format!(
            "X_lift {:?}, Y_lift {:?}, U {:?}, X {:?} disagree",
            x_lift.shape(),
            y_lift.shape(),
            u.shape(),
            x_raw.shape()
        )));
    }
    if m == 0 {
        return Err(Error::EmptyDataset("no snapshots".into()));
    }
    if ridge < 0.0 {
        return Err(Error::InvalidInput("ridge must be non-negative".into()));
    }
    let (n_lift, n_u) = (x_lift.nrows(), u.nrows());
    if n_lift < x_raw.nrows() {
        return Err(Error::dim(format!(
            "lifting dimension {n_lift} is below the state dimension {}",
            x_raw.nrows()
        )));
    }
    let mut z = DMatrix::zeros(n_lift + n_u, m);
    z.rows_mut(0, n_lift).copy_from(x_lift);
    z.rows_mut(n_lift, n_u).copy_from(u);
    let scale = 1.0 / m as f64;
    let gram = &z * z.transpose() * scale + DMatrix::identity(n_lift + n_u, n_lift + n_u) * ridge;
    let cross = y_lift * z.transpose() * scale;
    let inv = pinv(&gram)?;
    let ab = cross * &inv.matrix;
    let a = ab.columns(0, n_lift).into_owned();
    let b = ab.columns(n_lift, n_u).into_owned();
    let c = x_raw * pinv(x_lift)?.matrix;
    let mut sys = LinearLiftedSystem::new(a, b, c)?;
    sys.rcond = inv.rcond;
    if !sys.is_finite() {
        return Err(Error::Numeric("lifted system fit produced non-finite entries".into()));
    }
    Ok(sys)
}

/// `Q = [B, AB, ..., A^{N-1} B]` and its numerical rank.
pub fn controllability(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: Option<f64>) -> Result<(DMatrix<f64>, usize)> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::dim(format!("A {:?} and B {:?}", a.shape(), b.shape())));
    }
    let m = b.ncols();
    let mut q = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for k in 0..n {
        q.columns_mut(k * m, m).copy_from(&block);
        block = a * block;
    }
    let r = rank(&q, tol)?;
    Ok((q, r))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearizationResidual {
    /// Largest absolute entry of `Y_lift - (A X_lift + B U)`.
    pub max_abs: f64,
    /// `||Y_lift - (A X_lift + B U)||_F / sqrt(M)`.
    pub frobenius_rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub lift_dim: usize,
    pub h1: LinearizationResidual,
    pub ctrb_rank: usize,
    /// `lift_dim - ctrb_rank`.
    pub h2: usize,
    pub epsilon: f64,
    pub admissible: bool,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

pub fn linearization_residual(
    sys: &LinearLiftedSystem,
    x_lift: &DMatrix<f64>,
    y_lift: &DMatrix<f64>,
    u: &DMatrix<f64>,
) -> Result<LinearizationResidual> {
    if x_lift.nrows() != sys.lift_dim || u.nrows() != sys.control_dim || x_lift.shape() != y_lift.shape() {
        return Err(Error::dim("residual inputs do not match the system"));
    }
    let r = y_lift - sys.step(x_lift, u);
    let m = x_lift.ncols().max(1) as f64;
    Ok(LinearizationResidual {
        max_abs: r.iter().fold(0.0, |acc, v| acc.max(v.abs())),
        frobenius_rms: r.norm() / m.sqrt(),
    })
}

/// Residual and controllability heuristics; admissible when the max-abs
/// residual is below `epsilon` and `Q` has full rank.
pub fn heuristics(
    sys: &LinearLiftedSystem,
    x_lift: &DMatrix<f64>,
    y_lift: &DMatrix<f64>,
    u: &DMatrix<f64>,
    epsilon: f64,
    ctrb_tol: Option<f64>,
) -> Result<IdentificationReport> {
    let h1 = linearization_residual(sys, x_lift, y_lift, u)?;
    let (_, r) = controllability(&sys.a, &sys.b, ctrb_tol)?;
    let h2 = sys.lift_dim - r;
    Ok(IdentificationReport {
        lift_dim: sys.lift_dim,
        h1,
        ctrb_rank: r,
        h2,
        epsilon,
        admissible: h1.max_abs < epsilon && h2 == 0,
        metadata: Default::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn double_integrator_is_controllable() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let (q, r) = controllability(&a, &b, None).unwrap();
        assert_eq!(q, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 1.0]));
        assert_eq!(r, 2);
    }

    #[test]
    fn identity_dynamics_rank_one() {
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let (q, r) = controllability(&a, &b, None).unwrap();
        assert_eq!(q, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]));
        assert_eq!(r, 1);
        let (_, r0) = controllability(&a, &DMatrix::zeros(2, 1), None).unwrap();
        assert_eq!(r0, 0);
    }

    fn toy_data(a0: &DMatrix<f64>, b0: &DMatrix<f64>, m: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let n = a0.nrows();
        let x = DMatrix::from_fn(n, m, |i, j| ((i * 17 + j * 29) % 23) as f64 / 11.0 - 1.0 + (j as f64 * 0.1).sin());
        let u = DMatrix::from_fn(b0.ncols(), m, |i, j| ((i + j * 13) % 7) as f64 / 3.0 - 1.0);
        let y = a0 * &x + b0 * &u;
        (x, y, u)
    }

    #[test]
    fn heuristics_on_exact_data() {
        let a0 = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.7]);
        let b0 = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let (x, y, u) = toy_data(&a0, &b0, 50);
        let sys = fit_lifted_lti(&x, &y, &u, &x, 0.0).unwrap();
        let rep = heuristics(&sys, &x, &y, &u, 1e-6, None).unwrap();
        assert!(rep.h1.max_abs < 1e-9);
        assert_eq!(rep.h2, 0);
        assert!(rep.admissible);
        assert_relative_eq!(sys.c, DMatrix::identity(2, 2), epsilon = 1e-10);
        assert_eq!(sys.d, DMatrix::zeros(2, 1));

        let infinite = heuristics(&sys, &x, &y, &u, f64::INFINITY, None).unwrap();
        assert!(infinite.admissible);

        let mut dead = sys.clone();
        dead.b = DMatrix::zeros(2, 1);
        let rep = heuristics(&dead, &x, &y, &u, f64::INFINITY, None).unwrap();
        assert_eq!(rep.h2, 2);
        assert!(!rep.admissible);
    }

    #[test]
    fn zero_input_matches_dmd() {
        let a0 = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.6]);
        let (x, _, _) = toy_data(&a0, &DMatrix::zeros(2, 1), 40);
        let y = &a0 * &x;
        let u = DMatrix::zeros(1, 40);
        let sys = fit_lifted_lti(&x, &y, &u, &x, 1e-12).unwrap();
        let dmd = super::super::operator::dmd_koopman(&x, &y).unwrap();
        assert_relative_eq!(sys.a, dmd.k, epsilon = 1e-9);
        assert!(sys.b.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn readout_reproduces_raw_when_lift_contains_state() {
        let x = DMatrix::from_fn(2, 30, |i, j| ((i * 3 + j * 5) % 11) as f64 - 5.0);
        let mut lift = DMatrix::zeros(3, 30);
        lift.rows_mut(0, 2).copy_from(&x);
        for j in 0..30 {
            lift[(2, j)] = x[(0, j)].sin();
        }
        let u = DMatrix::from_fn(1, 30, |_, j| (j as f64).cos());
        let sys = fit_lifted_lti(&lift, &lift, &u, &x, 1e-8).unwrap();
        assert_relative_eq!(sys.readout(&lift), x, epsilon = 1e-10);
    }

    #[test]
    fn shape_errors() {
        let x = DMatrix::zeros(3, 4);
        assert!(fit_lifted_lti(&x, &DMatrix::zeros(3, 5), &DMatrix::zeros(1, 4), &DMatrix::zeros(2, 4), 0.0).is_err());
        assert!(controllability(&DMatrix::zeros(2, 3), &DMatrix::zeros(2, 1), None).is_err());
    }
}
