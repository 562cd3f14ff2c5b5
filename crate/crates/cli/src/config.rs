use std::fs;
use std::path::{Path, PathBuf};

use koopman_sysid::dynamics::DataConfig;
use koopman_sysid::eval::{CompareConfig, EvalConfig};
use koopman_sysid::koopman::{FeatureMode, SupervisedConfig};
use koopman_sysid::neuralnet::{ArchConfig, TrainConfig};
use koopman_sysid::spectrogram::ImageConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "KSID_OUT";
pub const DEFAULT_OUT: &str = "ksid-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaeSection {
    pub latent_dim: usize,
    pub arch: ArchConfig,
    pub train: TrainConfig,
}

impl Default for CaeSection {
    fn default() -> Self {
        let base = SupervisedConfig::default();
        Self {
            latent_dim: base.image_latent_dim,
            arch: base.arch,
            train: base.cae,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KoopmanSection {
    pub epsilon: f64,
    pub n_start: Option<usize>,
    pub n_max: usize,
    pub ridge: f64,
    pub ctrb_tol: Option<f64>,
}

impl Default for KoopmanSection {
    fn default() -> Self {
        let base = SupervisedConfig::default();
        Self {
            epsilon: base.epsilon,
            n_start: base.n_start,
            n_max: base.n_max,
            ridge: base.ridge,
            ctrb_tol: base.ctrb_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub dims: Vec<usize>,
    pub modes: Vec<FeatureMode>,
    pub seeds: Vec<u64>,
    pub horizon: usize,
    pub trials: usize,
    pub initial_speed: f64,
    pub wrap_theta: bool,
    pub workers: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let c = CompareConfig::default();
        Self {
            dims: c.dims,
            modes: c.modes,
            seeds: c.seeds,
            horizon: c.eval.horizon,
            trials: c.eval.trials,
            initial_speed: c.eval.initial_speed,
            wrap_theta: c.eval.wrap_theta,
            workers: c.workers,
        }
    }
}

/// Everything a pipeline run depends on. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Output directory; `--out`, then this, then `$KSID_OUT`, then `ksid-out`.
    pub output_dir: Option<PathBuf>,
    pub dynamics: DataConfig,
    pub spectrogram: ImageConfig,
    pub cae: CaeSection,
    pub ae: TrainConfig,
    pub koopman: KoopmanSection,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            dynamics: DataConfig::default(),
            spectrogram: ImageConfig::default(),
            cae: CaeSection::default(),
            ae: SupervisedConfig::default().ae,
            koopman: KoopmanSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: koopman_sysid::Error| CliError::Usage(e.to_string());
        self.dynamics.params.validate().map_err(usage)?;
        self.spectrogram.spectrogram.validate().map_err(usage)?;
        self.ae.validate().map_err(usage)?;
        self.cae.train.validate().map_err(usage)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn supervised(&self, mode: FeatureMode) -> SupervisedConfig {
        SupervisedConfig {
            epsilon: self.koopman.epsilon,
            n_start: self.koopman.n_start,
            n_max: self.koopman.n_max,
            ridge: self.koopman.ridge,
            mode,
            ae: self.ae.clone(),
            cae: self.cae.train.clone(),
            arch: self.cae.arch.clone(),
            image_latent_dim: self.cae.latent_dim,
            images: self.spectrogram.clone(),
            ctrb_tol: self.koopman.ctrb_tol,
            seed: self.seed,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            horizon: self.eval.horizon,
            trials: self.eval.trials,
            initial_speed: self.eval.initial_speed,
            wrap_theta: self.eval.wrap_theta,
        }
    }

    pub fn compare(&self) -> CompareConfig {
        CompareConfig {
            dims: self.eval.dims.clone(),
            modes: self.eval.modes.clone(),
            seeds: self.eval.seeds.clone(),
            data: self.dynamics.clone(),
            dkrc: self.supervised(FeatureMode::RawOnly),
            eval: self.eval_config(),
            workers: self.eval.workers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(PipelineConfig::parse("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::parse("sed = 1").is_err());
        assert!(PipelineConfig::parse("[koopman]\nepsilon = 0.1\nnmax = 4").is_err());
        assert!(PipelineConfig::parse("[ae]\nlearning_rat = 0.1").is_err());
    }

    #[test]
    fn sections_override_defaults() {
        let text = r#"
seed = 9
[dynamics]
n_trajectories = 4
steps = 300
policy = { kind = "sinusoidal", amplitude = 1.0, frequency_hz = 0.5, phase = 0.0 }
[koopman]
epsilon = 0.5
n_max = 6
[eval]
dims = [3]
modes = ["raw+latent"]
"#;
        let c = PipelineConfig::parse(text).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.dynamics.n_trajectories, 4);
        assert_eq!(c.koopman.n_max, 6);
        assert_eq!(c.eval.modes, vec![FeatureMode::RawLatent]);
        assert_eq!(c.supervised(FeatureMode::RawOnly).epsilon, 0.5);
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
