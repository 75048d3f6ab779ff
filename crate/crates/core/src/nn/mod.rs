//! Minimal convolutional network: im2col convolutions, ReLU, max pooling,
//! global average pooling and a dense classifier, with exact backward
//! passes to any named layer.

pub mod checkpoint;
pub mod layers;
mod model;
pub mod network;
pub mod optim;

pub use model::{
    argmax, image_tensor, ActivationSource, Extractor, ExtractorConfig, LayerInfo, LayerKind,
    Model, FC_LAYER,
};
