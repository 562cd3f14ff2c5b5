use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralnet::{ModelFile, Network, Tensor};
use crate::spectrogram::{trajectory_images, ImageConfig, PixelImage};

/// Spectrogram-image encoder that supplies latent features to an
/// [`EncoderDictionary`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeaturizer {
    pub cae: Network,
    pub config: ImageConfig,
}

impl ImageFeaturizer {
    pub fn latent_dim(&self) -> usize {
        self.cae.latent_shape().iter().product()
    }

    /// Latent codes of `images`, one column each.
    pub fn encode_images(&self, images: &[PixelImage]) -> Result<DMatrix<f64>> {
        let d = self.latent_dim();
        let mut out = DMatrix::zeros(d, images.len());
        for (chunk_i, chunk) in images.chunks(256).enumerate() {
            let t = images_to_tensor(chunk)?;
            let code = self.cae.encode(&t)?;
            for (k, col) in code.data.chunks(d).enumerate() {
                out.column_mut(chunk_i * 256 + k).copy_from_slice(col);
            }
        }
        Ok(out)
    }

    /// Latent code for the last sample of a measured state history.
    pub fn latent_for_history(&self, theta: &[f64], theta_dot: &[f64]) -> Result<Vec<f64>> {
        let imgs = trajectory_images(theta, theta_dot, &self.config)?;
        let last = imgs.image_for_step(theta.len() - 1).clone();
        Ok(self.encode_images(&[last])?.column(0).iter().copied().collect())
    }
}

/// Stacks equally sized single-channel images into `[k, 1, h, w]`.
pub fn images_to_tensor(images: &[PixelImage]) -> Result<Tensor> {
    let (h, w) = images
        .first()
        .map(|i| (i.height, i.width))
        .ok_or_else(|| Error::EmptyDataset("no images".into()))?;
    if images.iter().any(|i| i.height != h || i.width != w) {
        return Err(Error::dim("images differ in size"));
    }
    let data = images.iter().flat_map(|i| i.pixels.iter().copied()).collect();
    Tensor::new(vec![images.len(), 1, h, w], data)
}

/// Lifting through a trained autoencoder's encoder. Raw inputs (state,
/// then image latents when present) are standardized with the statistics
/// stored on the network before encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDictionary {
    pub net: Network,
    pub state_dim: usize,
    pub image: Option<ImageFeaturizer>,
}

impl EncoderDictionary {
    pub fn latent_dim(&self) -> usize {
        self.image.as_ref().map_or(0, ImageFeaturizer::latent_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.net.latent_shape().iter().product()
    }

    /// Encoder input rows: `[x; latents]`, standardized, as a batch tensor.
    pub fn encoder_input(&self, x: &DMatrix<f64>, latents: Option<&DMatrix<f64>>) -> Result<Tensor> {
        let m = x.ncols();
        let ld = self.latent_dim();
        match (ld, latents) {
            (0, _) => {}
            (_, Some(l)) if l.nrows() == ld && l.ncols() == m => {}
            (_, Some(l)) => {
                return Err(Error::dim(format!(
                    "latents are {:?}, expected {ld}x{m}",
                    l.shape()
                )))
            }
            (_, None) => {
                return Err(Error::InvalidInput(
                    "this dictionary needs image latents for every column".into(),
                ))
            }
        }
        let width = self.state_dim + ld;
        let mut data = Vec::with_capacity(width * m);
        let mut row = vec![0.0; width];
        for j in 0..m {
            for i in 0..self.state_dim {
                row[i] = x[(i, j)];
            }
            if let Some(l) = latents.filter(|_| ld > 0) {
                for i in 0..ld {
                    row[self.state_dim + i] = l[(i, j)];
                }
            }
            match &self.net.input_norm {
                Some(norm) => data.extend(norm.apply(&row)),
                None => data.extend_from_slice(&row),
            }
        }
        Tensor::new(vec![m, width], data)
    }
}

/// Observable functions that lift an `n`-vector to an `N`-vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "DictionaryRepr", try_from = "DictionaryRepr")]
pub enum Dictionary {
    /// Identity embedding; DMD is EDMD with this dictionary.
    UnitBasis { dim: usize },
    /// Products of powers, one exponent vector per output.
    Monomials { input_dim: usize, exponents: Vec<Vec<u32>> },
    /// Gaussian bumps `exp(-|x - c|^2 / width^2)`.
    Rbf { centers: Vec<Vec<f64>>, width: f64 },
    Encoder(Box<EncoderDictionary>),
}

/// Exponent vectors of total degree `0..=max_degree` in graded
/// lexicographic order (e.g. `1, x1, x2, x1^2, x1 x2, x2^2`).
pub fn graded_lex_exponents(input_dim: usize, max_degree: u32) -> Vec<Vec<u32>> {
    fn fill(rest: usize, remaining: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if rest == 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for p in (0..=remaining).rev() {
            prefix.push(p);
            fill(rest - 1, remaining - p, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if input_dim == 0 {
        return out;
    }
    for d in 0..=max_degree {
        fill(input_dim, d, &mut Vec::new(), &mut out);
    }
    out
}

impl Dictionary {
    pub fn monomials(input_dim: usize, max_degree: u32) -> Self {
        Dictionary::Monomials {
            input_dim,
            exponents: graded_lex_exponents(input_dim, max_degree),
        }
    }

    pub fn input_dim(&self) -> Option<usize> {
        match self {
            Dictionary::UnitBasis { dim } => Some(*dim),
            Dictionary::Monomials { input_dim, .. } => Some(*input_dim),
            Dictionary::Rbf { centers, .. } => centers.first().map(Vec::len),
            Dictionary::Encoder(e) => Some(e.state_dim),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Dictionary::UnitBasis { dim } => *dim,
            Dictionary::Monomials { exponents, .. } => exponents.len(),
            Dictionary::Rbf { centers, .. } => centers.len(),
            Dictionary::Encoder(e) => e.output_dim(),
        }
    }

    /// Number of image-latent features each column must be accompanied by.
    pub fn latent_dim(&self) -> usize {
        match self {
            Dictionary::Encoder(e) => e.latent_dim(),
            _ => 0,
        }
    }

    /// Column-wise lift `X (n x M) -> Psi(X) (N x M)`.
    pub fn lift(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.lift_with_latents(x, None)
    }

    pub fn lift_with_latents(&self, x: &DMatrix<f64>, latents: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
        if let Some(n) = self.input_dim() {
            if x.nrows() != n {
                return Err(Error::dim(format!(
                    "dictionary takes {n}-vectors, data has {} rows",
                    x.nrows()
                )));
            }
        }
        let m = x.ncols();
        let out = match self {
            Dictionary::UnitBasis { .. } => x.clone(),
            Dictionary::Monomials { exponents, .. } => DMatrix::from_fn(exponents.len(), m, |k, j| {
                exponents[k]
                    .iter()
                    .enumerate()
                    .map(|(i, p)| x[(i, j)].powi(*p as i32))
                    .product()
            }),
            Dictionary::Rbf { centers, width } => DMatrix::from_fn(centers.len(), m, |k, j| {
                let d2: f64 = centers[k]
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (x[(i, j)] - c).powi(2))
                    .sum();
                (-d2 / (width * width)).exp()
            }),
            Dictionary::Encoder(e) => {
                let input = e.encoder_input(x, latents)?;
                let code = e.net.encode(&input)?;
                let n = e.output_dim();
                DMatrix::from_fn(n, m, |k, j| code.data[j * n + k])
            }
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("dictionary produced non-finite features".into()));
        }
        Ok(out)
    }

    /// Lift of a single state.
    pub fn lift_state(&self, x: &[f64], latent: Option<&[f64]>) -> Result<Vec<f64>> {
        let xm = DMatrix::from_column_slice(x.len(), 1, x);
        let lm = latent.map(|l| DMatrix::from_column_slice(l.len(), 1, l));
        Ok(self.lift_with_latents(&xm, lm.as_ref())?.column(0).iter().copied().collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ImageRepr {
    config: ImageConfig,
    cae: ModelFile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum DictionaryRepr {
    UnitBasis {
        dim: usize,
    },
    Monomials {
        input_dim: usize,
        exponents: Vec<Vec<u32>>,
    },
    Rbf {
        centers: Vec<Vec<f64>>,
        width: f64,
    },
    Encoder {
        state_dim: usize,
        model: ModelFile,
        image: Option<ImageRepr>,
    },
}

impl From<Dictionary> for DictionaryRepr {
    fn from(d: Dictionary) -> Self {
        match d {
            Dictionary::UnitBasis { dim } => DictionaryRepr::UnitBasis { dim },
            Dictionary::Monomials { input_dim, exponents } => DictionaryRepr::Monomials { input_dim, exponents },
            Dictionary::Rbf { centers, width } => DictionaryRepr::Rbf { centers, width },
            Dictionary::Encoder(e) => DictionaryRepr::Encoder {
                state_dim: e.state_dim,
                model: ModelFile::from_network(&e.net, None),
                image: e.image.as_ref().map(|i| ImageRepr {
                    config: i.config.clone(),
                    cae: ModelFile::from_network(&i.cae, None),
                }),
            },
        }
    }
}

impl TryFrom<DictionaryRepr> for Dictionary {
    type Error = Error;

    fn try_from(r: DictionaryRepr) -> Result<Self> {
        Ok(match r {
            DictionaryRepr::UnitBasis { dim } => Dictionary::UnitBasis { dim },
            DictionaryRepr::Monomials { input_dim, exponents } => {
                if exponents.iter().any(|e| e.len() != input_dim) {
                    return Err(Error::Format("monomial exponent length mismatch".into()));
                }
                Dictionary::Monomials { input_dim, exponents }
            }
            DictionaryRepr::Rbf { centers, width } => Dictionary::Rbf { centers, width },
            DictionaryRepr::Encoder { state_dim, model, image } => {
                Dictionary::Encoder(Box::new(EncoderDictionary {
                    net: model.to_network()?,
                    state_dim,
                    image: image
                        .map(|i| -> Result<ImageFeaturizer> {
                            Ok(ImageFeaturizer {
                                cae: i.cae.to_network()?,
                                config: i.config,
                            })
                        })
                        .transpose()?,
                }))
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::{build_ae, Standardizer};

    #[test]
    fn unit_basis_is_identity() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        assert_eq!(Dictionary::UnitBasis { dim: 2 }.lift(&x).unwrap(), x);
    }

    #[test]
    fn quadratic_monomials_in_graded_lex_order() {
        let d = Dictionary::monomials(2, 2);
        let x = DMatrix::from_column_slice(2, 1, &[2.0, 3.0]);
        let out = d.lift(&x).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let d = Dictionary::monomials(3, 1);
        assert!(matches!(d.lift(&DMatrix::zeros(2, 4)), Err(Error::Dimension(_))));
    }

    #[test]
    fn encoder_dictionary_delegates_to_network() {
        let mut net = build_ae(2, 4, 3).unwrap();
        net.input_norm = Some(Standardizer {
            mean: vec![1.0, -1.0],
            std: vec![2.0, 0.5],
        });
        let dict = Dictionary::Encoder(Box::new(EncoderDictionary {
            net: net.clone(),
            state_dim: 2,
            image: None,
        }));
        let x = DMatrix::from_row_slice(2, 2, &[0.3, 2.0, 1.0, -4.0]);
        let lifted = dict.lift(&x).unwrap();
        for j in 0..2 {
            let std = net.input_norm.as_ref().unwrap().apply(&[x[(0, j)], x[(1, j)]]);
            let code = net.encode(&Tensor::from_rows(&[std]).unwrap()).unwrap();
            assert_eq!(lifted.column(j).iter().copied().collect::<Vec<_>>(), code.data);
        }
        let json = serde_json::to_string(&dict).unwrap();
        let back: Dictionary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, dict);
    }

    #[test]
    fn rbf_peaks_at_center() {
        let d = Dictionary::Rbf {
            centers: vec![vec![0.0, 0.0], vec![1.0, 1.0]],
            width: 1.0,
        };
        let out = d.lift(&DMatrix::from_column_slice(2, 1, &[1.0, 1.0])).unwrap();
        assert_eq!(out[(1, 0)], 1.0);
        assert!((out[(0, 0)] - (-2.0f64).exp()).abs() < 1e-15);
    }
}
