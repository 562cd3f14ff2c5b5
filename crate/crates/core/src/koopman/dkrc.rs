//! Deep Koopman representation drivers: the supervised dimension search and
//! the loss-driven unsupervised trainer.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::dictionary::{images_to_tensor, Dictionary, EncoderDictionary, ImageFeaturizer};
use super::lti::{controllability, fit_lifted_lti, heuristics, IdentificationReport, LinearLiftedSystem};
use crate::derive_seed;
use crate::dynamics::SnapshotDataset;
use crate::error::{Error, Result};
use crate::neuralnet::{
    build_ae, build_cae, dense_autoencoder, train, ArchConfig, Layer, Network, Standardizer, Tensor, TrainConfig,
    TrainReport,
};
use crate::spectrogram::{ImageConfig, PixelImage, TrajectoryImages};

/// Encoder input features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureMode {
    #[serde(rename = "raw-only")]
    RawOnly,
    #[serde(rename = "raw+latent")]
    RawLatent,
}

impl FeatureMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureMode::RawOnly => "raw-only",
            FeatureMode::RawLatent => "raw+latent",
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw-only" => Ok(FeatureMode::RawOnly),
            "raw+latent" => Ok(FeatureMode::RawLatent),
            other => Err(Error::InvalidInput(format!(
                "unknown feature mode '{other}' (expected raw-only or raw+latent)"
            ))),
        }
    }
}

impl std::fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_ae_train() -> TrainConfig {
    TrainConfig {
        epochs: 200,
        batch_size: 64,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    }
}

fn default_cae_train() -> TrainConfig {
    TrainConfig {
        epochs: 50,
        batch_size: 32,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    /// Threshold on the max-abs lifted residual.
    pub epsilon: f64,
    /// First lifting dimension tried; `None` means state dimension + 1.
    pub n_start: Option<usize>,
    pub n_max: usize,
    pub ridge: f64,
    pub mode: FeatureMode,
    pub ae: TrainConfig,
    pub cae: TrainConfig,
    pub arch: ArchConfig,
    pub image_latent_dim: usize,
    pub images: ImageConfig,
    /// Singular-value cutoff for the controllability rank; `None` uses the default.
    pub ctrb_tol: Option<f64>,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-2,
            n_start: None,
            n_max: 32,
            ridge: 1e-8,
            mode: FeatureMode::RawOnly,
            ae: default_ae_train(),
            cae: default_cae_train(),
            arch: ArchConfig::default(),
            image_latent_dim: 8,
            images: ImageConfig::default(),
            ctrb_tol: None,
            seed: 0,
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self, state_dim: usize) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::InvalidInput("epsilon must be non-negative".into()));
        }
        if self.ridge < 0.0 {
            return Err(Error::InvalidInput("ridge must be non-negative".into()));
        }
        let start = self.start_dim(state_dim);
        if start == 0 || start > self.n_max {
            return Err(Error::InvalidInput(format!(
                "lifting dimension range {start}..={} is empty",
                self.n_max
            )));
        }
        if self.mode == FeatureMode::RawOnly && start < state_dim + 1 {
            return Err(Error::InvalidInput(format!(
                "raw-only lifting must start at state_dim + 1 = {} or above",
                state_dim + 1
            )));
        }
        if self.mode == FeatureMode::RawLatent {
            if self.image_latent_dim == 0 {
                return Err(Error::InvalidInput("image_latent_dim must be positive".into()));
            }
            self.images.spectrogram.validate()?;
            self.cae.validate()?;
        }
        self.ae.validate()
    }

    pub fn start_dim(&self, state_dim: usize) -> usize {
        self.n_start.unwrap_or(state_dim + 1)
    }
}

/// Heuristics of one lifting dimension tried by the supervised search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub lift_dim: usize,
    pub h1_max_abs: f64,
    pub h1_frobenius_rms: f64,
    pub h2: usize,
    pub admissible: bool,
    pub ae_final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct DkrcResult {
    pub system: LinearLiftedSystem,
    pub dictionary: Dictionary,
    pub report: IdentificationReport,
    pub candidates: Vec<Candidate>,
    pub ae_report: TrainReport,
    /// Present only when a CAE was built and trained.
    pub cae_report: Option<TrainReport>,
}

/// Per-snapshot image latents for `X` and `Y`.
struct SnapshotLatents {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

fn unique_frames(images: &[TrajectoryImages]) -> Vec<PixelImage> {
    images.iter().flat_map(|t| t.images.iter().cloned()).collect()
}

fn train_cae(images: &[TrajectoryImages], cfg: &SupervisedConfig) -> Result<(ImageFeaturizer, TrainReport)> {
    let frames = unique_frames(images);
    let tensor = images_to_tensor(&frames)?;
    let (h, w) = (frames[0].height, frames[0].width);
    let arch = ArchConfig {
        seed: derive_seed(cfg.seed, 0xCAE),
        ..cfg.arch.clone()
    };
    let mut cae = build_cae(h, w, cfg.image_latent_dim, &arch)?;
    let tcfg = TrainConfig {
        seed: derive_seed(cfg.seed, 0xCAE + 1),
        ..cfg.cae.clone()
    };
    let rep = train(&mut cae, &tensor, &tensor, &tcfg)?;
    Ok((
        ImageFeaturizer {
            cae,
            config: cfg.images.clone(),
        },
        rep,
    ))
}

fn snapshot_latents(
    data: &SnapshotDataset,
    images: &[TrajectoryImages],
    featurizer: &ImageFeaturizer,
) -> Result<SnapshotLatents> {
    let codes: Vec<DMatrix<f64>> = images
        .iter()
        .map(|t| featurizer.encode_images(&t.images))
        .collect::<Result<_>>()?;
    let d = featurizer.latent_dim();
    let m = data.len();
    let mut x = DMatrix::zeros(d, m);
    let mut y = DMatrix::zeros(d, m);
    for (j, &(ti, step)) in data.origins.iter().enumerate() {
        let traj = images
            .get(ti)
            .ok_or_else(|| Error::InvalidInput(format!("no images for trajectory {ti}")))?;
        if step + 1 >= traj.step_frame.len() {
            return Err(Error::InvalidInput(format!(
                "images of trajectory {ti} cover {} steps, snapshot needs {}",
                traj.step_frame.len(),
                step + 2
            )));
        }
        x.set_column(j, &codes[ti].column(traj.step_frame[step]));
        y.set_column(j, &codes[ti].column(traj.step_frame[step + 1]));
    }
    Ok(SnapshotLatents { x, y })
}

fn encoder_rows(x: &DMatrix<f64>, latents: Option<&DMatrix<f64>>) -> Vec<Vec<f64>> {
    (0..x.ncols())
        .map(|j| {
            let mut row: Vec<f64> = x.column(j).iter().copied().collect();
            if let Some(l) = latents {
                row.extend(l.column(j).iter());
            }
            row
        })
        .collect()
}

fn standardized_tensor(rows: &[Vec<f64>], norm: &Standardizer) -> Result<Tensor> {
    let std_rows: Vec<Vec<f64>> = rows.iter().map(|r| norm.apply(r)).collect();
    Tensor::from_rows(&std_rows)
}

struct Fitted {
    system: LinearLiftedSystem,
    dictionary: Dictionary,
    report: IdentificationReport,
    ae_report: TrainReport,
}

fn fit_dimension(
    data: &SnapshotDataset,
    latents: Option<&SnapshotLatents>,
    featurizer: Option<&ImageFeaturizer>,
    lift_dim: usize,
    cfg: &SupervisedConfig,
) -> Result<Fitted> {
    let n = data.state_dim();
    let rows = encoder_rows(&data.x, latents.map(|l| &l.x));
    let input_dim = rows[0].len();
    let norm = Standardizer::fit(&rows)?;
    let net_seed = derive_seed(cfg.seed, lift_dim as u64);
    let mut net = match cfg.mode {
        FeatureMode::RawOnly => build_ae(input_dim, lift_dim, net_seed)?,
        FeatureMode::RawLatent => dense_autoencoder(input_dim, lift_dim, net_seed)?,
    };
    let inputs = standardized_tensor(&rows, &norm)?;
    let tcfg = TrainConfig {
        seed: derive_seed(cfg.seed, 0x1000 + lift_dim as u64),
        ..cfg.ae.clone()
    };
    let ae_report = train(&mut net, &inputs, &inputs, &tcfg)?;
    net.input_norm = Some(norm);
    let dictionary = Dictionary::Encoder(Box::new(EncoderDictionary {
        net,
        state_dim: n,
        image: featurizer.cloned(),
    }));
    let x_lift = dictionary.lift_with_latents(&data.x, latents.map(|l| &l.x))?;
    let y_lift = dictionary.lift_with_latents(&data.y, latents.map(|l| &l.y))?;
    let system = fit_lifted_lti(&x_lift, &y_lift, &data.u, &data.x, cfg.ridge)?;
    let mut report = heuristics(&system, &x_lift, &y_lift, &data.u, cfg.epsilon, cfg.ctrb_tol)?;
    report
        .metadata
        .insert("mode".into(), serde_json::Value::from(cfg.mode.as_str()));
    report
        .metadata
        .insert("ae_final_loss".into(), serde_json::Value::from(ae_report.final_loss));
    report
        .metadata
        .insert("ae_attempts".into(), serde_json::Value::from(ae_report.attempts));
    report
        .metadata
        .insert("snapshots".into(), serde_json::Value::from(data.len()));
    Ok(Fitted {
        system,
        dictionary,
        report,
        ae_report,
    })
}

/// Supervised search over lifting dimensions.
///
/// For `N = n_start, n_start + 1, ..., n_max` an autoencoder with an
/// `N`-unit tanh code is trained on the (standardized) encoder inputs, the
/// data are lifted, `A, B, C` are fitted and the residual and
/// controllability heuristics evaluated. The first admissible `N` wins. If
/// none is admissible the candidate with the smallest max-abs residual is
/// returned with `report.admissible == false`.
///
/// In [`FeatureMode::RawLatent`] a CAE is trained once on every spectrogram
/// frame in `images` (one entry per trajectory, indexed like
/// `data.origins`) and its codes are appended to the raw state.
pub fn supervised_dkrc(
    data: &SnapshotDataset,
    images: Option<&[TrajectoryImages]>,
    cfg: &SupervisedConfig,
) -> Result<DkrcResult> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("no snapshots".into()));
    }
    cfg.validate(data.state_dim())?;
    let (featurizer, cae_report, latents) = match cfg.mode {
        FeatureMode::RawOnly => (None, None, None),
        FeatureMode::RawLatent => {
            let images = images
                .filter(|i| !i.is_empty())
                .ok_or_else(|| Error::InvalidInput("raw+latent mode needs spectrogram images".into()))?;
            let (feat, rep) = train_cae(images, cfg)?;
            let lat = snapshot_latents(data, images, &feat)?;
            (Some(feat), Some(rep), Some(lat))
        }
    };
    let mut candidates = Vec::new();
    let mut best: Option<Fitted> = None;
    for lift_dim in cfg.start_dim(data.state_dim())..=cfg.n_max {
        let fitted = fit_dimension(data, latents.as_ref(), featurizer.as_ref(), lift_dim, cfg)?;
        let r = &fitted.report;
        candidates.push(Candidate {
            lift_dim,
            h1_max_abs: r.h1.max_abs,
            h1_frobenius_rms: r.h1.frobenius_rms,
            h2: r.h2,
            admissible: r.admissible,
            ae_final_loss: fitted.ae_report.final_loss,
        });
        let admissible = r.admissible;
        let better = match &best {
            None => true,
            Some(b) => r.h1.max_abs < b.report.h1.max_abs,
        };
        if admissible || better {
            best = Some(fitted);
        }
        if admissible {
            break;
        }
    }
    let best = best.expect("at least one lifting dimension is tried");
    Ok(DkrcResult {
        system: best.system,
        dictionary: best.dictionary,
        report: best.report,
        candidates,
        ae_report: best.ae_report,
        cae_report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnsupervisedConfig {
    pub lift_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub ridge: f64,
    pub epsilon: f64,
    pub ctrb_tol: Option<f64>,
    /// Start from `tanh(s x)` with decoder `x / s` (needs `lift_dim == n`).
    pub identity_init: bool,
    pub identity_scale: f64,
    pub seed: u64,
}

impl Default for UnsupervisedConfig {
    fn default() -> Self {
        Self {
            lift_dim: 3,
            epochs: 1000,
            learning_rate: 1e-3,
            ridge: 1e-8,
            epsilon: 1e-2,
            ctrb_tol: None,
            identity_init: false,
            identity_scale: 0.1,
            seed: 0,
        }
    }
}

/// Per-epoch losses of the unsupervised trainer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    /// Mean squared lifted linearization residual.
    pub l1: f64,
    /// Controllability rank deficiency of the epoch's `[A, B]`.
    pub l2: usize,
    /// Mean squared error of the decoded one-step prediction.
    pub l3: f64,
    /// `||R||_F / sqrt(M)` of the lifted residual.
    pub l1_frobenius_rms: f64,
}

impl EpochLoss {
    pub fn total(&self) -> f64 {
        self.l1 + self.l2 as f64 + self.l3
    }
}

#[derive(Debug, Clone)]
pub struct UnsupervisedResult {
    pub system: LinearLiftedSystem,
    pub dictionary: Dictionary,
    pub report: IdentificationReport,
    pub history: Vec<EpochLoss>,
    pub best_epoch: usize,
    /// False when no epoch had a controllable `[A, B]`; the lowest-loss epoch is kept instead.
    pub controllable_checkpoint: bool,
}

fn set_identity(net: &mut Network, scale: f64) -> Result<()> {
    let n = net.input_shape[0];
    for (li, layer) in net.layers.iter_mut().enumerate() {
        let Layer::Dense(d) = layer else {
            continue;
        };
        if d.inputs != n || d.outputs != n {
            return Err(Error::InvalidInput("identity init needs lift_dim == state_dim".into()));
        }
        let s = if li == 0 { scale } else { 1.0 / scale };
        d.weights.iter_mut().for_each(|w| *w = 0.0);
        for i in 0..n {
            d.weights[i * n + i] = s;
        }
        d.bias.iter_mut().for_each(|b| *b = 0.0);
    }
    Ok(())
}

fn code_matrix(t: &Tensor) -> DMatrix<f64> {
    let n = t.item_len();
    DMatrix::from_fn(n, t.batch(), |k, j| t.data[j * n + k])
}

fn matrix_tensor(m: &DMatrix<f64>) -> Result<Tensor> {
    let data = (0..m.ncols()).flat_map(|j| m.column(j).iter().copied().collect::<Vec<_>>()).collect();
    Tensor::new(vec![m.ncols(), m.nrows()], data)
}

/// Loss-driven training of the lifting at a fixed dimension.
///
/// Each epoch lifts the data with the current encoder, solves for `[A, B]`
/// (held fixed for that epoch's gradient), and takes one full-batch Adam
/// step on `L1 + L3`, where `L1` is the lifted linearization residual and
/// `L3` the error of decoding `A psi(x_t) + B u_t` against the standardized
/// `x_{t+1}`. The controllability deficiency `L2` gates which epoch is kept:
/// the lowest `L1 + L3` among epochs with `L2 == 0`.
pub fn unsupervised_dkrc(data: &SnapshotDataset, cfg: &UnsupervisedConfig) -> Result<UnsupervisedResult> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("no snapshots".into()));
    }
    if cfg.epochs == 0 || !(cfg.learning_rate > 0.0) || cfg.ridge < 0.0 || cfg.lift_dim == 0 {
        return Err(Error::InvalidInput("invalid unsupervised configuration".into()));
    }
    let n = data.state_dim();
    let m = data.len();
    let rows = encoder_rows(&data.x, None);
    let norm = Standardizer::fit(&rows)?;
    let xs = standardized_tensor(&rows, &norm)?;
    let ys = standardized_tensor(&encoder_rows(&data.y, None), &norm)?;
    let mut net = dense_autoencoder(n, cfg.lift_dim, derive_seed(cfg.seed, cfg.lift_dim as u64))?;
    if cfg.identity_init {
        set_identity(&mut net, cfg.identity_scale)?;
    }
    let adam_cfg = TrainConfig {
        learning_rate: cfg.learning_rate,
        ..TrainConfig::default()
    };
    let mut adam = crate::neuralnet::Adam::new(&adam_cfg, net.param_count());
    let boundary = net.latent_boundary;
    let n_lift = cfg.lift_dim;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, bool, Vec<f64>)> = None;
    for epoch in 0..cfg.epochs {
        let (zx_t, cache_x) = net.encode_cached(&xs)?;
        let (zy_t, cache_y) = net.encode_cached(&ys)?;
        let zx = code_matrix(&zx_t);
        let zy = code_matrix(&zy_t);
        let sys = fit_lifted_lti(&zx, &zy, &data.u, &data.x, cfg.ridge)?;
        let (_, rank) = controllability(&sys.a, &sys.b, cfg.ctrb_tol)?;
        let pred = sys.step(&zx, &data.u);
        let r = &zy - &pred;
        let total1 = (n_lift * m) as f64;
        let l1 = r.norm_squared() / total1;

        let (dec, cache_d) = net.decode_cached(&matrix_tensor(&pred)?)?;
        let total3 = (n * m) as f64;
        let diff: Vec<f64> = dec.data.iter().zip(&ys.data).map(|(p, t)| p - t).collect();
        let l3 = diff.iter().map(|d| d * d).sum::<f64>() / total3;
        let loss = EpochLoss {
            l1,
            l2: n_lift - rank,
            l3,
            l1_frobenius_rms: r.norm() / (m as f64).sqrt(),
        };
        if !(l1.is_finite() && l3.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        history.push(loss);

        let score = l1 + l3;
        let controllable = loss.l2 == 0;
        let replace = match &best {
            None => true,
            Some((_, s, c, _)) => (controllable && !c) || (controllable == *c && score < *s),
        };
        if replace {
            best = Some((epoch, score, controllable, net.flat_params()));
        }

        // L3 through the decoder, then into the code via A.
        let mut grads = net.zero_gradients();
        let g3 = Tensor::new(dec.shape.clone(), diff.iter().map(|d| 2.0 * d / total3).collect())?;
        let dpred = code_matrix(&net.backward_block(boundary, &cache_d, &g3, &mut grads));
        let g_r = r * (2.0 / total1);
        let d_zy = g_r.clone();
        let d_zx = sys.a.transpose() * (dpred - g_r);
        net.backward_block(0, &cache_x, &matrix_tensor(&d_zx)?, &mut grads);
        net.backward_block(0, &cache_y, &matrix_tensor(&d_zy)?, &mut grads);
        adam.step(&mut net, &grads);
    }

    let (best_epoch, _, controllable_checkpoint, params) = best.expect("epochs >= 1");
    net.set_flat_params(&params)?;
    net.input_norm = Some(norm);
    let dictionary = Dictionary::Encoder(Box::new(EncoderDictionary {
        net,
        state_dim: n,
        image: None,
    }));
    let x_lift = dictionary.lift(&data.x)?;
    let y_lift = dictionary.lift(&data.y)?;
    let system = fit_lifted_lti(&x_lift, &y_lift, &data.u, &data.x, cfg.ridge)?;
    let mut report = heuristics(&system, &x_lift, &y_lift, &data.u, cfg.epsilon, cfg.ctrb_tol)?;
    report
        .metadata
        .insert("best_epoch".into(), serde_json::Value::from(best_epoch));
    report.metadata.insert(
        "controllable_checkpoint".into(),
        serde_json::Value::from(controllable_checkpoint),
    );
    Ok(UnsupervisedResult {
        system,
        dictionary,
        report,
        history,
        best_epoch,
        controllable_checkpoint,
    })
}
