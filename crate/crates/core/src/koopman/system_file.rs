//! JSON form of an identified lifted system.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::dictionary::Dictionary;
use super::lti::{IdentificationReport, LinearLiftedSystem};
use crate::error::{Error, Result};

pub const SYSTEM_FORMAT: &str = "ksid-system";
pub const SYSTEM_VERSION: u32 = 1;

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn from_rows(name: &str, data: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if data.len() != nrows || data.iter().any(|r| r.len() != ncols) {
        return Err(Error::Format(format!("matrix {name} is not {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| data[i][j]))
}

/// `A, B, C, D` as row-major nested arrays, with the lifting dictionary
/// (including any trained encoders and their normalization) and the
/// identification report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemFile {
    pub format: String,
    pub version: u32,
    pub lift_dim: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub rcond: f64,
    pub dictionary: Dictionary,
    pub report: IdentificationReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl SystemFile {
    pub fn new(sys: &LinearLiftedSystem, dictionary: &Dictionary, report: &IdentificationReport) -> Self {
        Self {
            format: SYSTEM_FORMAT.into(),
            version: SYSTEM_VERSION,
            lift_dim: sys.lift_dim,
            state_dim: sys.state_dim,
            control_dim: sys.control_dim,
            a: rows(&sys.a),
            b: rows(&sys.b),
            c: rows(&sys.c),
            d: rows(&sys.d),
            rcond: sys.rcond,
            dictionary: dictionary.clone(),
            report: report.clone(),
            config_hash: None,
        }
    }

    pub fn system(&self) -> Result<LinearLiftedSystem> {
        let (n_lift, n, m) = (self.lift_dim, self.state_dim, self.control_dim);
        let a = from_rows("A", &self.a, n_lift, n_lift)?;
        let b = from_rows("B", &self.b, n_lift, m)?;
        let c = from_rows("C", &self.c, n, n_lift)?;
        let d = from_rows("D", &self.d, n, m)?;
        if d.iter().any(|v| *v != 0.0) {
            return Err(Error::Format("D must be zero".into()));
        }
        if self.dictionary.output_dim() != n_lift {
            return Err(Error::Format(format!(
                "dictionary lifts to {}, file declares N = {n_lift}",
                self.dictionary.output_dim()
            )));
        }
        let mut sys = LinearLiftedSystem::new(a, b, c)?;
        sys.rcond = self.rcond;
        if !sys.is_finite() {
            return Err(Error::Format("system matrices contain non-finite values".into()));
        }
        Ok(sys)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(text)?;
        if f.format != SYSTEM_FORMAT {
            return Err(Error::Format(format!("not a system file (format '{}')", f.format)));
        }
        if f.version != SYSTEM_VERSION {
            return Err(Error::Format(format!("unsupported system file version {}", f.version)));
        }
        f.system()?;
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::koopman::heuristics;
    use crate::neuralnet::build_ae;

    fn sample() -> SystemFile {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0 / 3.0]);
        let sys = LinearLiftedSystem::new(a, b, DMatrix::identity(2, 2)).unwrap();
        let x = DMatrix::from_fn(2, 5, |i, j| (i + 2 * j) as f64 * 0.1);
        let u = DMatrix::from_fn(1, 5, |_, j| j as f64);
        let y = sys.step(&x, &u);
        let report = heuristics(&sys, &x, &y, &u, 1e-2, None).unwrap();
        SystemFile::new(&sys, &Dictionary::UnitBasis { dim: 2 }, &report)
    }

    #[test]
    fn json_round_trip_is_byte_stable() {
        let f = sample();
        let text = f.to_json().unwrap();
        let back = SystemFile::from_json(&text).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn encoder_dictionary_round_trip() {
        let mut f = sample();
        let net = build_ae(2, 3, 4).unwrap();
        f.dictionary = Dictionary::Encoder(Box::new(crate::koopman::EncoderDictionary {
            net,
            state_dim: 2,
            image: None,
        }));
        f.lift_dim = 3;
        f.a = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        f.b = vec![vec![0.0], vec![0.0], vec![1.0]];
        f.c = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let text = f.to_json().unwrap();
        assert_eq!(SystemFile::from_json(&text).unwrap().to_json().unwrap(), text);
    }

    #[test]
    fn rejects_malformed() {
        let mut f = sample();
        f.a.pop();
        assert!(SystemFile::from_json(&serde_json::to_string(&f).unwrap()).is_err());
        let mut g = sample();
        g.d[0][0] = 1.0;
        assert!(g.system().is_err());
        let mut h = sample();
        h.version = 9;
        assert!(SystemFile::from_json(&serde_json::to_string(&h).unwrap()).is_err());
        assert!(SystemFile::from_json("{").is_err());
    }
}
