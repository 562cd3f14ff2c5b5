use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    LeakyRelu { alpha: f64 },
    Sigmoid,
    Linear,
}

impl Activation {
    pub fn validate(&self) -> Result<()> {
        match self {
            Activation::LeakyRelu { alpha } if !(*alpha > 0.0 && *alpha < 1.0) => Err(
                Error::InvalidInput(format!("leaky_relu alpha {alpha} outside (0, 1)")),
            ),
            _ => Ok(()),
        }
    }

    pub fn apply(&self, z: f64) -> f64 {
        match *self {
            Activation::Tanh => z.tanh(),
            Activation::LeakyRelu { alpha } => {
                if z > 0.0 {
                    z
                } else {
                    alpha * z
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Linear => z,
        }
    }

    /// Derivative given pre-activation `z` and output `a`.
    pub fn derivative(&self, z: f64, a: f64) -> f64 {
        match *self {
            Activation::Tanh => 1.0 - a * a,
            Activation::LeakyRelu { alpha } => {
                if z > 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Linear => 1.0,
        }
    }
}

/// Uniform in +-sqrt(6 / (fan_in + fan_out)).
fn glorot(rng: &mut impl Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-limit..=limit)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs x inputs`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(inputs: usize, outputs: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        Self {
            inputs,
            outputs,
            weights: glorot(rng, inputs * outputs, inputs, outputs),
            bias: vec![0.0; outputs],
            activation,
        }
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.shape.len() != 2 || x.shape[1] != self.inputs {
            return Err(Error::dim(format!(
                "dense layer expects [batch, {}], got {:?}",
                self.inputs, x.shape
            )));
        }
        let b = x.batch();
        let mut z = Tensor::zeros(vec![b, self.outputs]);
        for i in 0..b {
            let xi = x.item(i);
            for o in 0..self.outputs {
                let w = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                z.data[i * self.outputs + o] =
                    self.bias[o] + w.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let a = activate(&z, self.activation);
        Ok((z, a))
    }

    fn backward(&self, x: &Tensor, dz: &Tensor, grads: &mut [f64]) -> Tensor {
        let b = x.batch();
        let (gw, gb) = grads.split_at_mut(self.weights.len());
        let mut dx = Tensor::zeros(x.shape.clone());
        for i in 0..b {
            let xi = x.item(i);
            let dzi = dz.item(i);
            let dxi = &mut dx.data[i * self.inputs..(i + 1) * self.inputs];
            for o in 0..self.outputs {
                let g = dzi[o];
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                let w = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                let gwo = &mut gw[o * self.inputs..(o + 1) * self.inputs];
                for k in 0..self.inputs {
                    gwo[k] += g * xi[k];
                    dxi[k] += g * w[k];
                }
            }
        }
        dx
    }
}

/// 2-D convolution with TensorFlow-style "same" padding over `[batch, ch, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    /// `out_ch x in_ch x kh x kw`, row-major.
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

impl Conv2dLayer {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let area = kernel.0 * kernel.1;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            kernels: glorot(
                rng,
                out_channels * in_channels * area,
                in_channels * area,
                out_channels * area,
            ),
            bias: vec![0.0; out_channels],
            activation,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride.0), w.div_ceil(self.stride.1))
    }

    fn kidx(&self, o: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + c) * self.kernel.0 + ky) * self.kernel.1 + kx
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        if x.shape.len() != 4 || x.shape[1] != self.in_channels {
            return Err(Error::dim(format!(
                "conv layer expects [batch, {}, h, w], got {:?}",
                self.in_channels, x.shape
            )));
        }
        Ok((x.shape[0], x.shape[2], x.shape[3]))
    }

    /// Calls `f(out_index, in_index, kernel_index)` for every tap that lands
    /// inside the input.
    fn for_each_tap(&self, b: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, pad_y) = same_padding(h, self.kernel.0, self.stride.0);
        let (ow, pad_x) = same_padding(w, self.kernel.1, self.stride.1);
        for n in 0..b {
            for o in 0..self.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let out_i = ((n * self.out_channels + o) * oh + oy) * ow + ox;
                        for c in 0..self.in_channels {
                            for ky in 0..self.kernel.0 {
                                let iy = (oy * self.stride.0 + ky) as isize - pad_y as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..self.kernel.1 {
                                    let ix = (ox * self.stride.1 + kx) as isize - pad_x as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let in_i = ((n * self.in_channels + c) * h + iy as usize) * w
                                        + ix as usize;
                                    f(out_i, in_i, self.kidx(o, c, ky, kx));
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, h, w) = self.check(x)?;
        let (oh, ow) = self.output_hw(h, w);
        let mut z = Tensor::zeros(vec![b, self.out_channels, oh, ow]);
        let plane = oh * ow;
        for (i, v) in z.data.iter_mut().enumerate() {
            *v = self.bias[(i / plane) % self.out_channels];
        }
        self.for_each_tap(b, h, w, |oi, ii, ki| z.data[oi] += self.kernels[ki] * x.data[ii]);
        let a = activate(&z, self.activation);
        Ok((z, a))
    }

    fn backward(&self, x: &Tensor, dz: &Tensor, grads: &mut [f64]) -> Tensor {
        let (b, h, w) = (x.shape[0], x.shape[2], x.shape[3]);
        let (gk, gb) = grads.split_at_mut(self.kernels.len());
        let plane = dz.shape[2] * dz.shape[3];
        for (i, g) in dz.data.iter().enumerate() {
            gb[(i / plane) % self.out_channels] += g;
        }
        let mut dx = Tensor::zeros(x.shape.clone());
        self.for_each_tap(b, h, w, |oi, ii, ki| {
            let g = dz.data[oi];
            gk[ki] += g * x.data[ii];
            dx.data[ii] += g * self.kernels[ki];
        });
        dx
    }
}

fn activate(z: &Tensor, act: Activation) -> Tensor {
    Tensor {
        shape: z.shape.clone(),
        data: z.data.iter().map(|v| act.apply(*v)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Conv2d(Conv2dLayer),
    Flatten,
    /// Reshapes each batch item to `shape`.
    Unflatten(Vec<usize>),
    /// Nearest-neighbour upsampling over `[batch, ch, h, w]`.
    Upsample { factor: (usize, usize) },
}

/// What a layer must remember for its backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Tensor,
    pub pre_activation: Option<Tensor>,
    pub output: Tensor,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weights.len() + d.bias.len(),
            Layer::Conv2d(c) => c.kernels.len() + c.bias.len(),
            _ => 0,
        }
    }

    /// Parameters in declared order: weights (or kernels) then bias.
    pub fn params(&self) -> Vec<f64> {
        match self {
            Layer::Dense(d) => [d.weights.as_slice(), d.bias.as_slice()].concat(),
            Layer::Conv2d(c) => [c.kernels.as_slice(), c.bias.as_slice()].concat(),
            _ => Vec::new(),
        }
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let (w, b) = match self {
            Layer::Dense(d) => (&mut d.weights, &mut d.bias),
            Layer::Conv2d(c) => (&mut c.kernels, &mut c.bias),
            _ => return,
        };
        let (nw, nb) = (w.len(), b.len());
        w.copy_from_slice(&p[..nw]);
        b.copy_from_slice(&p[nw..nw + nb]);
    }

    pub fn params_mut(&mut self) -> Option<(&mut Vec<f64>, &mut Vec<f64>)> {
        match self {
            Layer::Dense(d) => Some((&mut d.weights, &mut d.bias)),
            Layer::Conv2d(c) => Some((&mut c.kernels, &mut c.bias)),
            _ => None,
        }
    }

    /// Per-item output shape for a per-item input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = || Error::dim(format!("layer {self:?} cannot take item shape {input:?}"));
        match self {
            Layer::Dense(d) => {
                if input == [d.inputs] {
                    Ok(vec![d.outputs])
                } else {
                    Err(mismatch())
                }
            }
            Layer::Conv2d(c) => match input {
                [ch, h, w] if *ch == c.in_channels => {
                    let (oh, ow) = c.output_hw(*h, *w);
                    Ok(vec![c.out_channels, oh, ow])
                }
                _ => Err(mismatch()),
            },
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Unflatten(shape) => {
                if input.iter().product::<usize>() == shape.iter().product::<usize>() {
                    Ok(shape.clone())
                } else {
                    Err(mismatch())
                }
            }
            Layer::Upsample { factor } => match input {
                [ch, h, w] => Ok(vec![*ch, h * factor.0, w * factor.1]),
                _ => Err(mismatch()),
            },
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<LayerCache> {
        let (pre, out) = match self {
            Layer::Dense(d) => {
                let (z, a) = d.forward(x)?;
                (Some(z), a)
            }
            Layer::Conv2d(c) => {
                let (z, a) = c.forward(x)?;
                (Some(z), a)
            }
            Layer::Flatten | Layer::Unflatten(_) => {
                let item = self.output_shape(&x.shape[1..])?;
                let mut shape = vec![x.batch()];
                shape.extend(item);
                (None, Tensor::new(shape, x.data.clone())?)
            }
            Layer::Upsample { factor } => {
                let item = self.output_shape(&x.shape[1..])?;
                let (b, ch, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let (oh, ow) = (item[1], item[2]);
                let mut out = Tensor::zeros(vec![b, ch, oh, ow]);
                for p in 0..b * ch {
                    for y in 0..oh {
                        for xx in 0..ow {
                            out.data[(p * oh + y) * ow + xx] =
                                x.data[(p * h + y / factor.0) * w + xx / factor.1];
                        }
                    }
                }
                (None, out)
            }
        };
        Ok(LayerCache {
            input: x.clone(),
            pre_activation: pre,
            output: out,
        })
    }

    /// Accumulates parameter gradients into `grads` and returns dL/dinput.
    pub fn backward(&self, cache: &LayerCache, d_out: &Tensor, grads: &mut [f64]) -> Tensor {
        let through_activation = |act: Activation| {
            let z = cache.pre_activation.as_ref().expect("parametric layer caches z");
            Tensor {
                shape: d_out.shape.clone(),
                data: d_out
                    .data
                    .iter()
                    .zip(&z.data)
                    .zip(&cache.output.data)
                    .map(|((g, z), a)| g * act.derivative(*z, *a))
                    .collect(),
            }
        };
        match self {
            Layer::Dense(d) => d.backward(&cache.input, &through_activation(d.activation), grads),
            Layer::Conv2d(c) => c.backward(&cache.input, &through_activation(c.activation), grads),
            Layer::Flatten | Layer::Unflatten(_) => Tensor {
                shape: cache.input.shape.clone(),
                data: d_out.data.clone(),
            },
            Layer::Upsample { factor } => {
                let x = &cache.input;
                let (b, ch, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let (oh, ow) = (d_out.shape[2], d_out.shape[3]);
                let mut dx = Tensor::zeros(x.shape.clone());
                for p in 0..b * ch {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dx.data[(p * h + y / factor.0) * w + xx / factor.1] +=
                                d_out.data[(p * oh + y) * ow + xx];
                        }
                    }
                }
                dx
            }
        }
    }
}
