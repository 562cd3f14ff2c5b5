//! Small feed-forward network engine with reverse-mode gradients.
//!
//! Supports dense and "same"-padded 2-D convolution layers, enough to train
//! the spectrogram convolutional autoencoder (CAE) and the dense lifting
//! autoencoder (AE).

mod layers;
mod model_file;
mod network;
mod tensor;
mod train;

pub use layers::{Activation, Conv2dLayer, DenseLayer, Layer, LayerCache};
pub use model_file::{LayerSpec, ModelFile, MODEL_FORMAT, MODEL_VERSION};
pub use network::{
    build_ae, build_cae, dense_autoencoder, ArchConfig, ForwardCache, Gradients, Network, Standardizer,
};
pub use tensor::Tensor;
pub use train::{evaluate_loss, train, Adam, Loss, TrainConfig, TrainReport};
