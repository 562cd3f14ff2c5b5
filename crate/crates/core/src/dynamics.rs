//! Forced pendulum simulator and Koopman snapshot assembly.
//!
//! The pendulum follows the classic gym `Pendulum` convention: the angle is
//! measured from the upright position, torque and angular speed are
//! saturated, and integration is semi-implicit Euler (velocity first).

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical and numerical parameters of the pendulum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumParams {
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    /// Seconds per step.
    pub dt: f64,
    pub max_torque: f64,
    pub max_speed: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            dt: 0.001,
            max_torque: 2.0,
            max_speed: 8.0,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("mass", self.mass),
            ("length", self.length),
            ("max_torque", self.max_torque),
            ("max_speed", self.max_speed),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.gravity.is_finite() {
            return Err(Error::InvalidInput("gravity must be finite".into()));
        }
        Ok(())
    }

    /// Total mechanical energy of a uniform rod about its pivot.
    pub fn energy(&self, x: State) -> f64 {
        let inertia = self.mass * self.length * self.length / 3.0;
        0.5 * inertia * x.theta_dot * x.theta_dot
            + 0.5 * self.mass * self.gravity * self.length * x.theta.cos()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    /// Angle from upright, unwrapped.
    pub theta: f64,
    pub theta_dot: f64,
}

impl State {
    pub fn new(theta: f64, theta_dot: f64) -> Self {
        Self { theta, theta_dot }
    }

    /// Angle reduced into (-pi, pi].
    pub fn wrapped_theta(&self) -> f64 {
        wrap_angle(self.theta)
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.theta, self.theta_dot]
    }

    pub fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.theta_dot.is_finite()
    }
}

/// Reduces an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub torque: f64,
}

impl Control {
    pub fn new(torque: f64) -> Self {
        Self { torque }
    }
}

/// One simulated run: `controls[i]` drives `states[i]` to `states[i + 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub controls: Vec<Control>,
    pub t0: f64,
    pub dt: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.theta).collect()
    }

    pub fn theta_dots(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.theta_dot).collect()
    }

    /// Writes `t,theta,theta_dot,torque`; the final row has an empty torque.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("t,theta,theta_dot,torque\n");
        for (i, s) in self.states.iter().enumerate() {
            let torque = self
                .controls
                .get(i)
                .map(|c| c.torque.to_string())
                .unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", self.time(i), s.theta, s.theta_dot, torque));
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("t,theta,theta_dot,torque") => {}
            other => {
                return Err(Error::Format(format!("unexpected trajectory header {other:?}")))
            }
        }
        let mut times = Vec::new();
        let mut states = Vec::new();
        let mut torques: Vec<Option<f64>> = Vec::new();
        for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Format(format!("line {}: expected 4 fields", lineno + 2)));
            }
            let num = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 2)))
            };
            times.push(num(fields[0])?);
            states.push(State::new(num(fields[1])?, num(fields[2])?));
            torques.push(if fields[3].trim().is_empty() {
                None
            } else {
                Some(num(fields[3])?)
            });
        }
        if states.is_empty() {
            return Err(Error::Format("trajectory file has no rows".into()));
        }
        let n = states.len();
        let controls = torques[..n - 1]
            .iter()
            .map(|t| t.map(Control::new).ok_or_else(|| Error::Format("missing torque".into())))
            .collect::<Result<Vec<_>>>()?;
        let t0 = times[0];
        let dt = if n > 1 { times[1] - times[0] } else { 0.0 };
        Ok(Trajectory {
            states,
            controls,
            t0,
            dt,
        })
    }
}

/// Source of control inputs for [`simulate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Policy {
    Zero,
    /// Uniform torque in `[-max_torque, max_torque]`, resampled every step.
    RandomUniform,
    Sinusoidal {
        amplitude: f64,
        frequency_hz: f64,
        phase: f64,
    },
    Replay {
        torques: Vec<f64>,
    },
}

fn clamp(v: f64, limit: f64) -> f64 {
    v.clamp(-limit, limit)
}

/// Advances the pendulum by one step.
pub fn step(params: &PendulumParams, x: State, u: Control) -> Result<State> {
    if !x.is_finite() || !u.torque.is_finite() {
        return Err(Error::InvalidInput(format!(
            "non-finite state or control: {x:?}, {u:?}"
        )));
    }
    let PendulumParams {
        gravity: g,
        mass: m,
        length: l,
        dt,
        max_torque,
        max_speed,
    } = *params;
    let torque = clamp(u.torque, max_torque);
    let accel = 3.0 * g / (2.0 * l) * x.theta.sin() + 3.0 / (m * l * l) * torque;
    let theta_dot = clamp(x.theta_dot + accel * dt, max_speed);
    let theta = x.theta + theta_dot * dt;
    Ok(State { theta, theta_dot })
}

/// Simulates `n_steps` steps from `x0`. Random policies draw from a
/// ChaCha8 stream seeded with `seed`.
pub fn simulate(
    params: &PendulumParams,
    x0: State,
    policy: &Policy,
    n_steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    params.validate()?;
    if n_steps == 0 {
        return Err(Error::InvalidInput("n_steps must be at least 1".into()));
    }
    if let Policy::Replay { torques } = policy {
        if torques.len() < n_steps {
            return Err(Error::LengthMismatch {
                expected: n_steps,
                actual: torques.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut controls = Vec::with_capacity(n_steps);
    states.push(x0);
    let mut x = x0;
    for i in 0..n_steps {
        let torque = match policy {
            Policy::Zero => 0.0,
            Policy::RandomUniform => rng.random_range(-params.max_torque..=params.max_torque),
            Policy::Sinusoidal {
                amplitude,
                frequency_hz,
                phase,
            } => amplitude * (2.0 * PI * frequency_hz * i as f64 * params.dt + phase).sin(),
            Policy::Replay { torques } => torques[i],
        };
        let u = Control::new(clamp(torque, params.max_torque));
        x = step(params, x, u)?;
        controls.push(u);
        states.push(x);
    }
    Ok(Trajectory {
        states,
        controls,
        t0: 0.0,
        dt: params.dt,
    })
}

/// Paired snapshot matrices: `y[:, j]` is the successor of `x[:, j]` under `u[:, j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotDataset {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub u: DMatrix<f64>,
    /// `(trajectory index, step index)` of each column's `x`.
    pub origins: Vec<(usize, usize)>,
}

impl SnapshotDataset {
    pub fn from_matrices(x: DMatrix<f64>, y: DMatrix<f64>, u: DMatrix<f64>) -> Result<Self> {
        let m = x.ncols();
        if y.ncols() != m || u.ncols() != m || y.nrows() != x.nrows() {
            return Err(Error::dim(format!(
                "snapshot shapes disagree: X {:?}, Y {:?}, U {:?}",
                x.shape(),
                y.shape(),
                u.shape()
            )));
        }
        if m == 0 {
            return Err(Error::EmptyDataset("no snapshot columns".into()));
        }
        Ok(Self {
            x,
            y,
            u,
            origins: (0..m).map(|j| (0, j)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.u.nrows()
    }
}

/// Concatenates `(x_t, x_{t+1}, u_t)` triples trajectory by trajectory.
pub fn build_snapshots(trajectories: &[Trajectory]) -> Result<SnapshotDataset> {
    if trajectories.is_empty() {
        return Err(Error::EmptyDataset("no trajectories".into()));
    }
    for (i, tr) in trajectories.iter().enumerate() {
        if tr.states.len() < 2 {
            return Err(Error::InvalidInput(format!("trajectory {i} has fewer than 2 states")));
        }
        if tr.controls.len() + 1 != tr.states.len() {
            return Err(Error::InvalidInput(format!(
                "trajectory {i}: {} controls for {} states",
                tr.controls.len(),
                tr.states.len()
            )));
        }
    }
    let m: usize = trajectories.iter().map(|t| t.states.len() - 1).sum();
    let mut x = DMatrix::zeros(2, m);
    let mut y = DMatrix::zeros(2, m);
    let mut u = DMatrix::zeros(1, m);
    let mut origins = Vec::with_capacity(m);
    let mut col = 0;
    for (ti, tr) in trajectories.iter().enumerate() {
        for (t, pair) in tr.states.windows(2).enumerate() {
            x[(0, col)] = pair[0].theta;
            x[(1, col)] = pair[0].theta_dot;
            y[(0, col)] = pair[1].theta;
            y[(1, col)] = pair[1].theta_dot;
            u[(0, col)] = tr.controls[t].torque;
            origins.push((ti, t));
            col += 1;
        }
    }
    Ok(SnapshotDataset { x, y, u, origins })
}

/// Describes a directory of trajectory CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub files: Vec<String>,
    pub params: PendulumParams,
    pub policy: Policy,
    pub seed: u64,
    pub steps_per_trajectory: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl DatasetManifest {
    pub const VERSION: u32 = 1;

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.version != Self::VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    /// Reads every listed trajectory, resolving paths against the manifest's directory.
    pub fn load_trajectories(&self, manifest_path: &Path) -> Result<Vec<Trajectory>> {
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        self.files
            .iter()
            .map(|f| Trajectory::read_csv(&dir.join(f)))
            .collect()
    }
}

/// Random initial condition with `theta` in `[-pi, pi]` and `theta_dot` in
/// `[-speed, speed]`.
pub fn random_initial_state(rng: &mut impl Rng, speed: f64) -> State {
    State::new(rng.random_range(-PI..=PI), rng.random_range(-speed..=speed))
}

/// How a training set of trajectories is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub params: PendulumParams,
    pub policy: Policy,
    pub n_trajectories: usize,
    pub steps: usize,
    /// Initial `|theta_dot|` bound; initial `theta` is uniform in `[-pi, pi]`.
    pub initial_speed: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            params: PendulumParams::default(),
            policy: Policy::RandomUniform,
            n_trajectories: 20,
            steps: 2000,
            initial_speed: 1.0,
        }
    }
}

/// Simulates `cfg.n_trajectories` trajectories. Initial states come from a
/// ChaCha8 stream seeded with `seed`; trajectory `i` draws its controls from
/// `derive_seed(seed, i)`.
pub fn generate_trajectories(cfg: &DataConfig, seed: u64) -> Result<Vec<Trajectory>> {
    if cfg.n_trajectories == 0 {
        return Err(Error::InvalidInput("n_trajectories must be at least 1".into()));
    }
    if !(cfg.initial_speed >= 0.0) {
        return Err(Error::InvalidInput("initial_speed must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.n_trajectories)
        .map(|i| {
            let x0 = random_initial_state(&mut rng, cfg.initial_speed);
            simulate(&cfg.params, x0, &cfg.policy, cfg.steps, crate::derive_seed(seed, i as u64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn upright_and_hanging_are_fixed_points() {
        let p = PendulumParams::default();
        let up = step(&p, State::new(0.0, 0.0), Control::new(0.0)).unwrap();
        assert_eq!(up, State::new(0.0, 0.0));
        let down = step(&p, State::new(PI, 0.0), Control::new(0.0)).unwrap();
        // sin(PI) is 1.2e-16 in floating point, so the hanging state creeps by ~1e-21.
        assert!((down.theta - PI).abs() < 1e-18 && down.theta_dot.abs() < 1e-15);
    }

    #[test]
    fn single_step_from_horizontal() {
        let p = PendulumParams::default();
        let x = step(&p, State::new(PI / 2.0, 0.0), Control::new(0.0)).unwrap();
        assert_relative_eq!(x.theta_dot, 0.015, epsilon = 1e-15);
        assert_relative_eq!(x.theta, PI / 2.0 + 1.5e-5, epsilon = 1e-15);
    }

    #[test]
    fn speed_and_torque_are_clamped() {
        let p = PendulumParams::default();
        let x = step(&p, State::new(1.0, 7.999), Control::new(100.0)).unwrap();
        assert_eq!(x.theta_dot, 8.0);
        let tr = simulate(&p, State::new(0.0, 0.0), &Policy::Replay { torques: vec![50.0; 3] }, 3, 0)
            .unwrap();
        assert!(tr.controls.iter().all(|c| c.torque == 2.0));
    }

    #[test]
    fn non_finite_input_rejected() {
        let p = PendulumParams::default();
        assert!(matches!(
            step(&p, State::new(f64::NAN, 0.0), Control::new(0.0)),
            Err(Error::InvalidInput(_))
        ));
        assert!(step(&p, State::new(0.0, 0.0), Control::new(f64::INFINITY)).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let p = PendulumParams {
            dt: 0.0,
            ..Default::default()
        };
        assert!(simulate(&p, State::new(0.0, 0.0), &Policy::Zero, 1, 0).is_err());
    }

    #[test]
    fn hanging_trajectory_stays_put() {
        let p = PendulumParams::default();
        let tr = simulate(&p, State::new(PI, 0.0), &Policy::Zero, 100, 0).unwrap();
        assert_eq!(tr.states.len(), 101);
        for s in &tr.states {
            assert!((s.theta - PI).abs() < 1e-12 && s.theta_dot.abs() < 1e-12);
        }
    }

    #[test]
    fn energy_drift_is_small() {
        let p = PendulumParams::default();
        let tr = simulate(&p, State::new(0.1, 0.0), &Policy::Zero, 1000, 0).unwrap();
        let e0 = p.energy(tr.states[0]);
        let worst = tr
            .states
            .iter()
            .map(|s| (p.energy(*s) - e0).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.01 * e0.abs(), "drift {worst} vs {e0}");
    }

    #[test]
    fn replay_too_short_errors() {
        let p = PendulumParams::default();
        let err = simulate(&p, State::new(0.0, 0.0), &Policy::Replay { torques: vec![0.0; 4] }, 5, 0)
            .unwrap_err();
        assert!(matches!(err, Error::LengthMismatch { expected: 5, actual: 4 }));
    }

    #[test]
    fn generated_trajectories_are_reproducible() {
        let cfg = DataConfig {
            n_trajectories: 3,
            steps: 50,
            ..Default::default()
        };
        let a = generate_trajectories(&cfg, 7).unwrap();
        assert_eq!(a, generate_trajectories(&cfg, 7).unwrap());
        assert_ne!(a, generate_trajectories(&cfg, 8).unwrap());
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|t| t.states.len() == 51));
        assert!(a.iter().all(|t| t.states[0].theta_dot.abs() <= 1.0));
        let zero = DataConfig { n_trajectories: 0, ..cfg };
        assert!(generate_trajectories(&zero, 7).is_err());
    }

    #[test]
    fn snapshot_counts_skip_trajectory_boundaries() {
        let p = PendulumParams::default();
        let a = simulate(&p, State::new(0.3, 0.0), &Policy::RandomUniform, 4, 1).unwrap();
        let b = simulate(&p, State::new(-0.3, 0.0), &Policy::RandomUniform, 6, 2).unwrap();
        let ds = build_snapshots(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(ds.len(), 10);
        // column 3 is the last pair of `a`; column 4 starts `b`
        assert_eq!(ds.y[(0, 3)], a.states[4].theta);
        assert_eq!(ds.x[(0, 4)], b.states[0].theta);
        assert_eq!(ds.origins[4], (1, 0));

        let one = simulate(&p, State::new(0.3, 0.0), &Policy::Zero, 2, 0).unwrap();
        assert_eq!(build_snapshots(&[one]).unwrap().len(), 2);
        assert!(matches!(build_snapshots(&[]), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn wrap_angle_range() {
        assert_relative_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(-PI), PI, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(0.5 + 4.0 * PI), 0.5, epsilon = 1e-12);
        assert_relative_eq!(State::new(-3.0 * PI / 2.0, 0.0).wrapped_theta(), PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let p = PendulumParams::default();
        let tr = simulate(&p, State::new(0.2, 0.1), &Policy::RandomUniform, 20, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tr.csv");
        tr.write_csv(&path).unwrap();
        let back = Trajectory::read_csv(&path).unwrap();
        assert_eq!(back.states, tr.states);
        assert_eq!(back.controls, tr.controls);
        assert!(Trajectory::parse_csv("a,b\n1,2").is_err());
    }
}
