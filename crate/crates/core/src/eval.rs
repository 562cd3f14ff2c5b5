//! Open-loop rollouts of identified systems against the simulator, and
//! MAE tables over lifting dimensions and feature modes.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::dynamics::{
    build_snapshots, generate_trajectories, random_initial_state, simulate, wrap_angle, DataConfig, PendulumParams,
    Policy, State, Trajectory,
};
use crate::error::{Error, Result};
use crate::koopman::{supervised_dkrc, Dictionary, FeatureMode, LinearLiftedSystem, SupervisedConfig};
use crate::spectrogram::{trajectory_images, ImageConfig, TrajectoryImages};

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// `n x (H + 1)`; column 0 is `C psi(x0)`.
    pub predicted: DMatrix<f64>,
    pub truth: DMatrix<f64>,
    /// `m x H`.
    pub controls: DMatrix<f64>,
    /// `|predicted - truth|`, unwrapped.
    pub abs_error: DMatrix<f64>,
    pub dt: f64,
}

/// Open-loop prediction from `x0`: `z_0 = psi(x0)`, `z_{t+1} = A z_t + B u_t`,
/// `x_t = C z_t`. Returns `n x (H + 1)` with `H = controls.ncols()`.
pub fn predict(
    sys: &LinearLiftedSystem,
    dict: &Dictionary,
    x0: &[f64],
    latent0: Option<&[f64]>,
    controls: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if x0.len() != sys.state_dim {
        return Err(Error::dim(format!(
            "x0 has {} entries, system state dimension is {}",
            x0.len(),
            sys.state_dim
        )));
    }
    if controls.nrows() != sys.control_dim {
        return Err(Error::dim(format!(
            "controls have {} rows, system takes {}",
            controls.nrows(),
            sys.control_dim
        )));
    }
    if dict.output_dim() != sys.lift_dim {
        return Err(Error::dim(format!(
            "dictionary lifts to {}, system is {}-dimensional",
            dict.output_dim(),
            sys.lift_dim
        )));
    }
    let horizon = controls.ncols();
    let mut z = DVector::from_vec(dict.lift_state(x0, latent0)?);
    let mut out = DMatrix::zeros(sys.state_dim, horizon + 1);
    out.set_column(0, &(&sys.c * &z));
    for t in 0..horizon {
        z = &sys.a * &z + &sys.b * controls.column(t);
        out.set_column(t + 1, &(&sys.c * &z));
    }
    Ok(out)
}

/// [`predict`] scored against `truth` (`n x (H + 1)`); `truth` is never fed
/// back into the prediction.
pub fn rollout(
    sys: &LinearLiftedSystem,
    dict: &Dictionary,
    x0: &[f64],
    latent0: Option<&[f64]>,
    controls: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    dt: f64,
) -> Result<RolloutResult> {
    if truth.ncols() != controls.ncols() + 1 || truth.nrows() != sys.state_dim {
        return Err(Error::dim(format!(
            "truth is {:?}, expected {}x{}",
            truth.shape(),
            sys.state_dim,
            controls.ncols() + 1
        )));
    }
    let predicted = predict(sys, dict, x0, latent0, controls)?;
    let abs_error = (&predicted - truth).abs();
    Ok(RolloutResult {
        predicted,
        truth: truth.clone(),
        controls: controls.clone(),
        abs_error,
        dt,
    })
}

/// Mean absolute error per state over all time steps. With `wrap_theta`
/// the first state's error is the wrapped angular difference.
pub fn mae(result: &RolloutResult, wrap_theta: bool) -> Vec<f64> {
    let (n, t) = result.predicted.shape();
    (0..n)
        .map(|i| {
            let sum: f64 = (0..t)
                .map(|k| {
                    let d = result.predicted[(i, k)] - result.truth[(i, k)];
                    if i == 0 && wrap_theta {
                        wrap_angle(d).abs()
                    } else {
                        d.abs()
                    }
                })
                .sum();
            sum / t.max(1) as f64
        })
        .collect()
}

impl RolloutResult {
    pub fn horizon(&self) -> usize {
        self.controls.ncols()
    }

    /// `t,theta_true,theta_pred,thetadot_true,thetadot_pred`, one row per step.
    pub fn plot_csv(&self) -> Result<String> {
        if self.truth.nrows() != 2 {
            return Err(Error::dim("plot CSV needs a two-state (theta, theta_dot) rollout"));
        }
        let mut out = String::from("t,theta_true,theta_pred,thetadot_true,thetadot_pred\n");
        for k in 0..self.truth.ncols() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                k as f64 * self.dt,
                self.truth[(0, k)],
                self.predicted[(0, k)],
                self.truth[(1, k)],
                self.predicted[(1, k)]
            ));
        }
        Ok(out)
    }

    pub fn write_plot_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.plot_csv()?).map_err(|e| Error::io(path, e))
    }
}

/// Samples of history needed for a full spectrogram image at the last step.
pub fn history_len(cfg: &ImageConfig) -> usize {
    cfg.spectrogram.window_len + (cfg.width.saturating_sub(1)) * cfg.spectrogram.hop
}

/// The unforced history of length `len` that ends at `x0`, obtained by
/// inverting the simulator's semi-implicit Euler step.
pub fn unforced_history(params: &PendulumParams, x0: State, len: usize) -> Vec<State> {
    let mut out = vec![x0; len.max(1)];
    let mut x = x0;
    for k in (0..len.saturating_sub(1)).rev() {
        let theta = x.theta - x.theta_dot * params.dt;
        let accel = 3.0 * params.gravity / (2.0 * params.length) * theta.sin();
        let theta_dot = x.theta_dot - accel * params.dt;
        x = State { theta, theta_dot };
        out[k] = x;
    }
    out
}

/// Image latent that an encoder dictionary needs at `x0`, computed from the
/// unforced history leading up to it. `None` for dictionaries without images.
pub fn initial_latent(dict: &Dictionary, params: &PendulumParams, x0: State) -> Result<Option<Vec<f64>>> {
    let Dictionary::Encoder(e) = dict else {
        return Ok(None);
    };
    let Some(feat) = &e.image else {
        return Ok(None);
    };
    let hist = unforced_history(params, x0, history_len(&feat.config) + 1);
    let theta: Vec<f64> = hist.iter().map(|s| s.theta).collect();
    let theta_dot: Vec<f64> = hist.iter().map(|s| s.theta_dot).collect();
    feat.latent_for_history(&theta, &theta_dot).map(Some)
}

fn trajectory_matrices(traj: &Trajectory) -> (DMatrix<f64>, DMatrix<f64>) {
    let truth = DMatrix::from_fn(2, traj.states.len(), |i, k| traj.states[k].as_array()[i]);
    let controls = DMatrix::from_fn(1, traj.controls.len(), |_, k| traj.controls[k].torque);
    (truth, controls)
}

/// Simulates the pendulum from `x0` under `torques` and rolls the identified
/// system out along the same inputs.
pub fn pendulum_rollout(
    sys: &LinearLiftedSystem,
    dict: &Dictionary,
    params: &PendulumParams,
    x0: State,
    torques: &[f64],
) -> Result<RolloutResult> {
    let (truth, controls) = if torques.is_empty() {
        (DMatrix::from_column_slice(2, 1, &x0.as_array()), DMatrix::zeros(1, 0))
    } else {
        let traj = simulate(
            params,
            x0,
            &Policy::Replay {
                torques: torques.to_vec(),
            },
            torques.len(),
            0,
        )?;
        trajectory_matrices(&traj)
    };
    let latent0 = initial_latent(dict, params, x0)?;
    rollout(sys, dict, &x0.as_array(), latent0.as_deref(), &controls, &truth, params.dt)
}

/// Evaluation protocol: unforced rollouts from random initial states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub horizon: usize,
    pub trials: usize,
    pub initial_speed: f64,
    pub wrap_theta: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizon: 5000,
            trials: 10,
            initial_speed: 1.0,
            wrap_theta: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Per-state MAE averaged over trials.
    pub mae: Vec<f64>,
    pub per_trial: Vec<Vec<f64>>,
    /// False if any prediction left the finite range.
    pub finite: bool,
}

/// Initial states of the evaluation trials for `seed`.
pub fn eval_initial_states(cfg: &EvalConfig, seed: u64) -> Vec<State> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.trials)
        .map(|_| random_initial_state(&mut rng, cfg.initial_speed))
        .collect()
}

pub fn evaluate(
    sys: &LinearLiftedSystem,
    dict: &Dictionary,
    params: &PendulumParams,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalSummary> {
    if cfg.trials == 0 {
        return Err(Error::InvalidInput("trials must be at least 1".into()));
    }
    let torques = vec![0.0; cfg.horizon];
    let mut per_trial = Vec::with_capacity(cfg.trials);
    let mut finite = true;
    for x0 in eval_initial_states(cfg, seed) {
        let r = pendulum_rollout(sys, dict, params, x0, &torques)?;
        finite &= r.predicted.iter().all(|v| v.is_finite());
        per_trial.push(mae(&r, cfg.wrap_theta));
    }
    let n = per_trial[0].len();
    let mean = (0..n)
        .map(|i| per_trial.iter().map(|t| t[i]).sum::<f64>() / per_trial.len() as f64)
        .collect();
    Ok(EvalSummary {
        mae: mean,
        per_trial,
        finite,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub dims: Vec<usize>,
    pub modes: Vec<FeatureMode>,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    /// Template for each cell; `n_start`, `n_max`, `mode` and `seed` are overridden.
    pub dkrc: SupervisedConfig,
    pub eval: EvalConfig,
    /// Cells run concurrently on up to this many threads.
    pub workers: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            dims: vec![3, 5, 12],
            modes: vec![FeatureMode::RawOnly, FeatureMode::RawLatent],
            seeds: vec![0, 1, 2],
            data: DataConfig::default(),
            dkrc: SupervisedConfig::default(),
            eval: EvalConfig::default(),
            workers: 1,
        }
    }
}

/// One (dimension, mode, seed) identification and its evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub seed: u64,
    pub admissible: bool,
    pub h1_max_abs: f64,
    pub h1_frobenius_rms: f64,
    pub h2: usize,
    pub mae: Vec<f64>,
    pub finite: bool,
    /// Set when identification or evaluation failed; the other fields are then NaN/zero.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub lift_dim: usize,
    pub mode: FeatureMode,
    /// Seed-averaged MAE of theta and theta_dot over successful cells (NaN if none).
    pub mae_theta: f64,
    pub mae_theta_dot: f64,
    pub h1_frobenius_rms: f64,
    /// True only if every seed produced an admissible system.
    pub admissible: bool,
    pub cells: Vec<CellResult>,
}

impl ErrorRow {
    pub fn succeeded(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_none()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub rows: Vec<ErrorRow>,
    pub seeds: Vec<u64>,
    pub horizon: usize,
    pub trials: usize,
    pub wrap_theta: bool,
}

impl ErrorTable {
    pub fn row(&self, lift_dim: usize, mode: FeatureMode) -> Option<&ErrorRow> {
        self.rows.iter().find(|r| r.lift_dim == lift_dim && r.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("lift_dim,mode,mae_theta,mae_theta_dot,h1_frobenius_rms,admissible,seeds_ok,seeds_total\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.lift_dim,
                r.mode,
                r.mae_theta,
                r.mae_theta_dot,
                r.h1_frobenius_rms,
                r.admissible,
                r.succeeded(),
                r.cells.len()
            ));
        }
        out
    }
}

fn mode_index(m: FeatureMode) -> u64 {
    match m {
        FeatureMode::RawOnly => 0,
        FeatureMode::RawLatent => 1,
    }
}

/// Seed of the identification run for a cell; independent of the cell's
/// position in the table.
pub fn cell_seed(seed: u64, lift_dim: usize, mode: FeatureMode) -> u64 {
    derive_seed(seed, 0x100 + 2 * lift_dim as u64 + mode_index(mode))
}

/// Seed of the training data for a base seed.
pub fn data_seed(seed: u64) -> u64 {
    derive_seed(seed, 1)
}

/// Seed of the evaluation initial states for a base seed.
pub fn eval_seed(seed: u64) -> u64 {
    derive_seed(seed, 2)
}

struct SeedData {
    snapshots: crate::dynamics::SnapshotDataset,
    images: Option<Vec<TrajectoryImages>>,
}

fn prepare_seed(cfg: &CompareConfig, seed: u64) -> Result<SeedData> {
    let trajs = generate_trajectories(&cfg.data, data_seed(seed))?;
    let snapshots = build_snapshots(&trajs)?;
    let images = if cfg.modes.contains(&FeatureMode::RawLatent) {
        Some(
            trajs
                .iter()
                .map(|t| trajectory_images(&t.thetas(), &t.theta_dots(), &cfg.dkrc.images))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(SeedData { snapshots, images })
}

fn run_cell(cfg: &CompareConfig, data: &SeedData, seed: u64, lift_dim: usize, mode: FeatureMode) -> CellResult {
    let dkrc = SupervisedConfig {
        n_start: Some(lift_dim),
        n_max: lift_dim,
        mode,
        seed: cell_seed(seed, lift_dim, mode),
        ..cfg.dkrc.clone()
    };
    let outcome = supervised_dkrc(&data.snapshots, data.images.as_deref(), &dkrc).and_then(|res| {
        let summary = evaluate(&res.system, &res.dictionary, &cfg.data.params, &cfg.eval, eval_seed(seed))?;
        Ok((res, summary))
    });
    match outcome {
        Ok((res, summary)) => CellResult {
            seed,
            admissible: res.report.admissible,
            h1_max_abs: res.report.h1.max_abs,
            h1_frobenius_rms: res.report.h1.frobenius_rms,
            h2: res.report.h2,
            mae: summary.mae,
            finite: summary.finite,
            error: None,
        },
        Err(e) => CellResult {
            seed,
            admissible: false,
            h1_max_abs: f64::NAN,
            h1_frobenius_rms: f64::NAN,
            h2: 0,
            mae: vec![f64::NAN; 2],
            finite: false,
            error: Some(e.to_string()),
        },
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (s, k) = values.fold((0.0, 0usize), |(s, k), v| (s + v, k + 1));
    if k == 0 {
        f64::NAN
    } else {
        s / k as f64
    }
}

/// Identifies and evaluates every (dimension, mode, seed) cell.
///
/// Each seed gets its own training set and evaluation initial states, shared
/// by all cells of that seed. Failed cells are kept with their error message
/// and left out of the averages.
pub fn compare(cfg: &CompareConfig) -> Result<ErrorTable> {
    if cfg.dims.is_empty() || cfg.modes.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::InvalidInput("dims, modes and seeds must be nonempty".into()));
    }
    let prepared: Vec<SeedData> = cfg.seeds.iter().map(|&s| prepare_seed(cfg, s)).collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for &dim in &cfg.dims {
        for &mode in &cfg.modes {
            for si in 0..cfg.seeds.len() {
                jobs.push((dim, mode, si));
            }
        }
    }
    let run = |&(dim, mode, si): &(usize, FeatureMode, usize)| run_cell(cfg, &prepared[si], cfg.seeds[si], dim, mode);
    let workers = cfg.workers.max(1).min(jobs.len());
    let results: Vec<CellResult> = if workers == 1 {
        jobs.iter().map(run).collect()
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let mut slots: Vec<Option<CellResult>> = vec![None; jobs.len()];
        let done: Vec<Vec<(usize, CellResult)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    s.spawn(|| {
                        let mut out = Vec::new();
                        loop {
                            let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                            if i >= jobs.len() {
                                break out;
                            }
                            out.push((i, run(&jobs[i])));
                        }
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("compare worker panicked")).collect()
        });
        for (i, r) in done.into_iter().flatten() {
            slots[i] = Some(r);
        }
        slots.into_iter().map(|r| r.expect("every cell ran")).collect()
    };

    let mut rows = Vec::new();
    for (chunk, cells) in jobs.chunks(cfg.seeds.len()).zip(results.chunks(cfg.seeds.len())) {
        let (dim, mode, _) = chunk[0];
        let ok = || cells.iter().filter(|c| c.error.is_none());
        rows.push(ErrorRow {
            lift_dim: dim,
            mode,
            mae_theta: mean_of(ok().map(|c| c.mae[0])),
            mae_theta_dot: mean_of(ok().map(|c| c.mae[1])),
            h1_frobenius_rms: mean_of(ok().map(|c| c.h1_frobenius_rms)),
            admissible: cells.iter().all(|c| c.admissible),
            cells: cells.to_vec(),
        });
    }
    Ok(ErrorTable {
        rows,
        seeds: cfg.seeds.clone(),
        horizon: cfg.eval.horizon,
        trials: cfg.eval.trials,
        wrap_theta: cfg.eval.wrap_theta,
    })
}
