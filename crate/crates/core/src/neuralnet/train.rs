use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{Gradients, Network};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    Mae,
}

impl Loss {
    /// Mean over every element, and its gradient scaled for a batch of
    /// `total` elements (so chunked gradients sum to the full-batch one).
    pub fn eval(&self, pred: &Tensor, target: &Tensor, total: usize) -> (f64, Tensor) {
        let n = total as f64;
        let mut value = 0.0;
        let grad = pred
            .data
            .iter()
            .zip(&target.data)
            .map(|(p, t)| {
                let r = p - t;
                match self {
                    Loss::Mse => {
                        value += r * r;
                        2.0 * r / n
                    }
                    Loss::Mae => {
                        value += r.abs();
                        r.signum() / n
                    }
                }
            })
            .collect();
        (
            value / n,
            Tensor {
                shape: pred.shape.clone(),
                data: grad,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: Loss,
    pub shuffle: bool,
    /// Data-parallel gradient workers; the reduction order is fixed, so a
    /// given worker count is bit-reproducible.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            loss: Loss::Mse,
            shuffle: true,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidInput("learning_rate must be positive".into()));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::InvalidInput("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam state over a network's flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, n_params: usize) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let mut off = 0;
        for (layer, g) in net.layers.iter_mut().zip(grads) {
            let Some((w, b)) = layer.params_mut() else {
                continue;
            };
            for (p, gi) in w.iter_mut().chain(b.iter_mut()).zip(g) {
                let m = &mut self.m[off];
                let v = &mut self.v[off];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                off += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch of the accepted attempt.
    pub loss_history: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub attempts: usize,
    pub learning_rate: f64,
}

/// Full-data loss without gradients.
pub fn evaluate_loss(net: &Network, inputs: &Tensor, targets: &Tensor, loss: Loss) -> Result<f64> {
    let pred = net.predict(inputs)?;
    Ok(loss.eval(&pred, targets, pred.data.len()).0)
}

fn add_into(acc: &mut Gradients, g: &Gradients) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

fn batch_gradient(
    net: &Network,
    x: &Tensor,
    y: &Tensor,
    loss: Loss,
    workers: usize,
) -> Result<(f64, Gradients)> {
    let b = x.batch();
    let total = y.data.len();
    let chunk = |range: std::ops::Range<usize>| -> Result<(f64, Gradients)> {
        let idx: Vec<usize> = range.collect();
        let (xs, ys) = (x.select(&idx), y.select(&idx));
        let (pred, cache) = net.forward_cached(&xs)?;
        let (l, g) = loss.eval(&pred, &ys, total);
        let (grads, _) = net.backward_from(&cache, &g)?;
        Ok((l, grads))
    };
    if workers <= 1 || b < 2 * workers {
        return chunk(0..b);
    }
    let per = b.div_ceil(workers);
    let ranges: Vec<_> = (0..workers)
        .map(|w| (w * per).min(b)..((w + 1) * per).min(b))
        .filter(|r| !r.is_empty())
        .collect();
    let results: Vec<Result<(f64, Gradients)>> = std::thread::scope(|s| {
        let handles: Vec<_> = ranges.iter().cloned().map(|r| s.spawn(move || chunk(r))).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut total_loss = 0.0;
    let mut grads = net.zero_gradients();
    for r in results {
        let (l, g) = r?;
        total_loss += l;
        add_into(&mut grads, &g);
    }
    Ok((total_loss, grads))
}

fn run_epochs(net: &mut Network, inputs: &Tensor, targets: &Tensor, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg, net.param_count());
    let n = inputs.batch();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let (xb, yb) = (inputs.select(idx), targets.select(idx));
            let (l, grads) = batch_gradient(net, &xb, &yb, cfg.loss, cfg.workers)?;
            if !l.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            adam.step(net, &grads);
            epoch_loss += l;
            batches += 1;
        }
        history.push(epoch_loss / batches as f64);
    }
    Ok(history)
}

/// Minibatch Adam training.
///
/// If the full-data loss ends above where it started, the initial weights
/// are restored and training is retried with half the learning rate, at
/// most three times.
pub fn train(net: &mut Network, inputs: &Tensor, targets: &Tensor, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if inputs.batch() != targets.batch() {
        return Err(Error::dim(format!(
            "{} inputs vs {} targets",
            inputs.batch(),
            targets.batch()
        )));
    }
    if inputs.batch() == 0 {
        return Err(Error::EmptyDataset("no training samples".into()));
    }
    let initial_params = net.flat_params();
    let initial_loss = evaluate_loss(net, inputs, targets, cfg.loss)?;
    if !initial_loss.is_finite() {
        return Err(Error::Divergence { epoch: 0 });
    }
    let mut attempt_cfg = cfg.clone();
    let mut attempts = 0;
    loop {
        attempts += 1;
        let history = run_epochs(net, inputs, targets, &attempt_cfg)?;
        let final_loss = evaluate_loss(net, inputs, targets, cfg.loss)?;
        if !final_loss.is_finite() {
            return Err(Error::Divergence { epoch: cfg.epochs - 1 });
        }
        if final_loss <= initial_loss || attempts > 3 {
            return Ok(TrainReport {
                loss_history: history,
                initial_loss,
                final_loss,
                attempts,
                learning_rate: attempt_cfg.learning_rate,
            });
        }
        net.set_flat_params(&initial_params)?;
        attempt_cfg.learning_rate *= 0.5;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::network::{build_ae, dense_autoencoder};

    #[test]
    fn memorizes_repeated_vector() {
        let mut net = build_ae(3, 4, 1).unwrap();
        let row = vec![0.3, -0.7, 0.5];
        let x = Tensor::from_rows(&vec![row; 8]).unwrap();
        let cfg = TrainConfig {
            epochs: 2000,
            batch_size: 8,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let rep = train(&mut net, &x, &x, &cfg).unwrap();
        assert!(rep.final_loss < 1e-6, "{}", rep.final_loss);
    }

    #[test]
    fn same_seed_same_history() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos()]).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 7,
            seed: 9,
            ..Default::default()
        };
        let run = || {
            let mut net = build_ae(2, 3, 4).unwrap();
            train(&mut net, &x, &x, &cfg).unwrap().loss_history
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn workers_are_deterministic_and_close_to_serial() {
        let rows: Vec<Vec<f64>> = (0..64).map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos()]).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 32,
            workers: 4,
            ..Default::default()
        };
        let run = |cfg: &TrainConfig| {
            let mut net = build_ae(2, 5, 4).unwrap();
            let rep = train(&mut net, &x, &x, cfg).unwrap();
            (rep.loss_history, net.flat_params())
        };
        let (h1, p1) = run(&cfg);
        let (h2, p2) = run(&cfg);
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
        let (_, serial) = run(&TrainConfig { workers: 1, ..cfg.clone() });
        for (a, b) in p1.iter().zip(&serial) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn divergence_names_epoch() {
        let mut net = dense_autoencoder(1, 1, 0).unwrap();
        let x = Tensor::from_rows(&[vec![1e300], vec![-1e300]]).unwrap();
        let err = train(&mut net, &x, &x, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn mismatched_batches_rejected() {
        let mut net = build_ae(2, 3, 0).unwrap();
        let x = Tensor::zeros(vec![3, 2]);
        let y = Tensor::zeros(vec![2, 2]);
        assert!(train(&mut net, &x, &y, &TrainConfig::default()).is_err());
    }
}
