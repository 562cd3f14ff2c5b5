use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Activation, Conv2dLayer, DenseLayer, Layer, LayerCache};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-channel affine standardization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Statistics over rows of `samples`. Channels with zero spread keep
    /// unit scale.
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n == 0 {
            return Err(Error::EmptyDataset("cannot standardize zero samples".into()));
        }
        let d = samples[0].len();
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for s in samples {
            for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Per-parameter gradients, one flat vector per layer (empty for layers
/// without parameters).
pub type Gradients = Vec<Vec<f64>>;

/// Cached intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn layers(&self) -> &[LayerCache] {
        &self.layers
    }
}

/// Feed-forward stack split into an encoder (`layers[..latent_boundary]`)
/// and a decoder (the rest).
#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub latent_boundary: usize,
    /// Per-item input shape.
    pub input_shape: Vec<usize>,
    /// Standardization the caller applies to raw inputs before the first layer.
    pub input_norm: Option<Standardizer>,
    pub seed: u64,
    cache: Option<ForwardCache>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.latent_boundary == other.latent_boundary
            && self.input_shape == other.input_shape
            && self.input_norm == other.input_norm
            && self.seed == other.seed
    }
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, latent_boundary: usize) -> Result<Self> {
        if latent_boundary > layers.len() {
            return Err(Error::dim(format!(
                "latent boundary {latent_boundary} beyond {} layers",
                layers.len()
            )));
        }
        let mut shape = input_shape.clone();
        for layer in &layers {
            if let Layer::Dense(DenseLayer { activation, .. })
            | Layer::Conv2d(Conv2dLayer { activation, .. }) = layer
            {
                activation.validate()?;
            }
            shape = layer.output_shape(&shape)?;
        }
        Ok(Self {
            layers,
            latent_boundary,
            input_shape,
            input_norm: None,
            seed: 0,
            cache: None,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.shape_after(self.layers.len())
    }

    pub fn latent_shape(&self) -> Vec<usize> {
        self.shape_after(self.latent_boundary)
    }

    fn shape_after(&self, n: usize) -> Vec<usize> {
        self.layers[..n]
            .iter()
            .fold(self.input_shape.clone(), |s, l| l.output_shape(&s).expect("validated"))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// All parameters concatenated in layer order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::dim(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                p.len()
            )));
        }
        let mut off = 0;
        for layer in &mut self.layers {
            let n = layer.param_count();
            layer.set_params(&p[off..off + n]);
            off += n;
        }
        self.cache = None;
        Ok(())
    }

    pub fn zero_gradients(&self) -> Gradients {
        self.layers.iter().map(|l| vec![0.0; l.param_count()]).collect()
    }

    fn run(&self, range: std::ops::Range<usize>, input: &Tensor) -> Result<(Tensor, Vec<LayerCache>)> {
        let mut caches = Vec::with_capacity(range.len());
        let mut x = input.clone();
        for layer in &self.layers[range] {
            let c = layer.forward(&x)?;
            x = c.output.clone();
            caches.push(c);
        }
        Ok((x, caches))
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape.len() != self.input_shape.len() + 1 || input.shape[1..] != self.input_shape[..] {
            return Err(Error::dim(format!(
                "network expects [batch, {:?}], got {:?}",
                self.input_shape, input.shape
            )));
        }
        Ok(())
    }

    /// Forward pass without touching the stored cache.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        Ok(self.run(0..self.layers.len(), input)?.0)
    }

    /// Forward pass returning the intermediates needed by [`Network::backward_from`].
    pub fn forward_cached(&self, input: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.check_input(input)?;
        let (out, layers) = self.run(0..self.layers.len(), input)?;
        Ok((out, ForwardCache { layers }))
    }

    /// Forward pass that keeps its cache for a following [`Network::backward`].
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let (out, cache) = self.forward_cached(input)?;
        self.cache = Some(cache);
        Ok(out)
    }

    /// Gradients for the most recent [`Network::forward`]. The cache is consumed.
    pub fn backward(&mut self, loss_grad: &Tensor) -> Result<(Gradients, Tensor)> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a forward cache".into()))?;
        self.backward_from(&cache, loss_grad)
    }

    pub fn backward_from(&self, cache: &ForwardCache, loss_grad: &Tensor) -> Result<(Gradients, Tensor)> {
        let last = cache
            .layers
            .last()
            .map(|c| &c.output)
            .ok_or_else(|| Error::State("empty forward cache".into()))?;
        if last.shape != loss_grad.shape {
            return Err(Error::dim(format!(
                "loss gradient shape {:?} does not match output {:?}",
                loss_grad.shape, last.shape
            )));
        }
        let mut grads = self.zero_gradients();
        let mut g = loss_grad.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            g = layer.backward(&cache.layers[i], &g, &mut grads[i]);
        }
        Ok((grads, g))
    }

    pub fn encode(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        Ok(self.run(0..self.latent_boundary, input)?.0)
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        Ok(self.run(self.latent_boundary..self.layers.len(), latent)?.0)
    }

    /// Encoder-only forward pass with cache, for training through the encoder alone.
    pub(crate) fn encode_cached(&self, input: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.check_input(input)?;
        let (out, layers) = self.run(0..self.latent_boundary, input)?;
        Ok((out, ForwardCache { layers }))
    }

    pub(crate) fn decode_cached(&self, latent: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let (out, layers) = self.run(self.latent_boundary..self.layers.len(), latent)?;
        Ok((out, ForwardCache { layers }))
    }

    /// Backward through a contiguous block of layers starting at `offset`,
    /// accumulating into the full-network gradient vector.
    pub(crate) fn backward_block(
        &self,
        offset: usize,
        cache: &ForwardCache,
        loss_grad: &Tensor,
        grads: &mut Gradients,
    ) -> Tensor {
        let mut g = loss_grad.clone();
        for (i, c) in cache.layers.iter().enumerate().rev() {
            g = self.layers[offset + i].backward(c, &g, &mut grads[offset + i]);
        }
        g
    }
}

/// Hyperparameters shared by the two autoencoder builders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub seed: u64,
    pub leaky_alpha: f64,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            leaky_alpha: 0.1,
            conv1_filters: 8,
            conv2_filters: 16,
            kernel: 3,
            stride: 2,
        }
    }
}

/// Convolutional autoencoder for single-channel images.
///
/// Encoder: two strided "same" convolutions with LeakyReLU, flatten, linear
/// dense code. Decoder: dense, unflatten, then upsample + convolution back to
/// the input size with a Sigmoid output.
pub fn build_cae(image_h: usize, image_w: usize, latent_dim: usize, cfg: &ArchConfig) -> Result<Network> {
    if image_h == 0 || image_w == 0 || latent_dim == 0 {
        return Err(Error::InvalidInput("CAE dimensions must be positive".into()));
    }
    let s = cfg.stride.max(1);
    let k = (cfg.kernel, cfg.kernel);
    if !image_h.is_multiple_of(s * s) || !image_w.is_multiple_of(s * s) {
        return Err(Error::dim(format!(
            "image {image_h}x{image_w} must be divisible by stride^2 = {}",
            s * s
        )));
    }
    let leaky = Activation::LeakyRelu {
        alpha: cfg.leaky_alpha,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h1, w1) = (image_h / s, image_w / s);
    let (h2, w2) = (h1 / s, w1 / s);
    let flat = cfg.conv2_filters * h2 * w2;
    let layers = vec![
        Layer::Conv2d(Conv2dLayer::new(1, cfg.conv1_filters, k, (s, s), leaky, &mut rng)),
        Layer::Conv2d(Conv2dLayer::new(cfg.conv1_filters, cfg.conv2_filters, k, (s, s), leaky, &mut rng)),
        Layer::Flatten,
        Layer::Dense(DenseLayer::new(flat, latent_dim, Activation::Linear, &mut rng)),
        Layer::Dense(DenseLayer::new(latent_dim, flat, leaky, &mut rng)),
        Layer::Unflatten(vec![cfg.conv2_filters, h2, w2]),
        Layer::Upsample { factor: (s, s) },
        Layer::Conv2d(Conv2dLayer::new(cfg.conv2_filters, cfg.conv1_filters, k, (1, 1), leaky, &mut rng)),
        Layer::Upsample { factor: (s, s) },
        Layer::Conv2d(Conv2dLayer::new(cfg.conv1_filters, 1, k, (1, 1), Activation::Sigmoid, &mut rng)),
    ];
    let mut net = Network::new(vec![1, image_h, image_w], layers, 4)?;
    net.seed = cfg.seed;
    Ok(net)
}

/// Dense autoencoder: `input_dim -> tanh(lift_dim) -> linear(input_dim)`.
/// The lifting must add at least one dimension.
pub fn build_ae(input_dim: usize, lift_dim: usize, seed: u64) -> Result<Network> {
    if lift_dim < input_dim + 1 {
        return Err(Error::InvalidInput(format!(
            "lift_dim {lift_dim} must be at least input_dim + 1 = {}",
            input_dim + 1
        )));
    }
    dense_autoencoder(input_dim, lift_dim, seed)
}

/// Same shape as [`build_ae`] without the minimum lifting constraint.
pub fn dense_autoencoder(input_dim: usize, lift_dim: usize, seed: u64) -> Result<Network> {
    if input_dim == 0 || lift_dim == 0 {
        return Err(Error::InvalidInput("autoencoder dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        Layer::Dense(DenseLayer::new(input_dim, lift_dim, Activation::Tanh, &mut rng)),
        Layer::Dense(DenseLayer::new(lift_dim, input_dim, Activation::Linear, &mut rng)),
    ];
    let mut net = Network::new(vec![input_dim], layers, 1)?;
    net.seed = seed;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(weights: Vec<f64>, bias: Vec<f64>, inputs: usize, act: Activation) -> Layer {
        Layer::Dense(DenseLayer {
            inputs,
            outputs: bias.len(),
            weights,
            bias,
            activation: act,
        })
    }

    #[test]
    fn identity_dense_passes_through() {
        let net = Network::new(
            vec![3],
            vec![dense(vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], vec![0.; 3], 3, Activation::Linear)],
            1,
        )
        .unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.5]]).unwrap();
        assert_eq!(net.predict(&x).unwrap(), x);
    }

    #[test]
    fn zero_tanh_layer_outputs_zero() {
        let net = Network::new(vec![2], vec![dense(vec![0.; 6], vec![0.; 3], 2, Activation::Tanh)], 1)
            .unwrap();
        let y = net.predict(&Tensor::from_rows(&[vec![4.0, -9.0]]).unwrap()).unwrap();
        assert!(y.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn one_by_one_conv_doubles() {
        let layer = Layer::Conv2d(Conv2dLayer {
            in_channels: 1,
            out_channels: 1,
            kernel: (1, 1),
            stride: (1, 1),
            kernels: vec![2.0],
            bias: vec![0.0],
            activation: Activation::Linear,
        });
        let net = Network::new(vec![1, 2, 3], vec![layer], 1).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(net.predict(&x).unwrap().data, vec![2., 4., 6., 8., 10., 12.]);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let net = build_ae(2, 3, 0).unwrap();
        let bad = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(net.predict(&bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut net = build_ae(2, 3, 0).unwrap();
        let g = Tensor::zeros(vec![1, 2]);
        assert!(matches!(net.backward(&g), Err(Error::State(_))));
    }

    #[test]
    fn linear_layer_closed_form_gradient() {
        let mut net = Network::new(vec![2], vec![dense(vec![0.5, -1.0], vec![0.25], 2, Activation::Linear)], 1)
            .unwrap();
        let x = [2.0, 3.0];
        let y = 1.0;
        let out = net.forward(&Tensor::from_rows(&[x.to_vec()]).unwrap()).unwrap();
        let r = out.data[0] - y;
        let (grads, _) = net.backward(&Tensor::new(vec![1, 1], vec![2.0 * r]).unwrap()).unwrap();
        assert_eq!(grads[0], vec![2.0 * r * x[0], 2.0 * r * x[1], 2.0 * r]);
    }

    #[test]
    fn zero_loss_grad_gives_zero_gradients() {
        let mut net = build_cae(8, 8, 3, &ArchConfig::default()).unwrap();
        let x = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let out = net.forward(&x).unwrap();
        let (grads, dx) = net.backward(&Tensor::zeros(out.shape)).unwrap();
        assert!(grads.iter().flatten().all(|g| *g == 0.0));
        assert!(dx.data.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn cae_architecture() {
        let net = build_cae(32, 16, 8, &ArchConfig::default()).unwrap();
        let convs = net.layers[..net.latent_boundary]
            .iter()
            .filter(|l| matches!(l, Layer::Conv2d(_)))
            .count();
        assert_eq!(convs, 2);
        assert_eq!(net.latent_shape(), vec![8]);
        assert_eq!(net.output_shape(), vec![1, 32, 16]);
        let x = Tensor::new(vec![1, 1, 32, 16], (0..512).map(|i| (i % 11) as f64 / 11.0).collect())
            .unwrap();
        let y = net.predict(&x).unwrap();
        assert!(y.data.iter().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn ae_architecture_and_ranges() {
        assert!(build_ae(2, 2, 0).is_err());
        let net = build_ae(2, 3, 5).unwrap();
        assert_eq!(net.latent_shape(), vec![3]);
        assert_eq!(net.output_shape(), vec![2]);
        let x = Tensor::from_rows(&[vec![5.0, -8.0], vec![0.1, 0.2]]).unwrap();
        let code = net.encode(&x).unwrap();
        assert!(code.data.iter().all(|v| v.abs() < 1.0));
        let round = net.decode(&code).unwrap();
        assert_eq!(round, net.predict(&x).unwrap());
    }

    #[test]
    fn standardizer_handles_constant_channels() {
        let s = Standardizer::fit(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        assert_eq!(s.apply(&[3.0, 5.0]), vec![1.0, 0.0]);
    }
}
