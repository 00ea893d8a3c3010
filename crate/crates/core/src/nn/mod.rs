//! From-scratch tensors and layers sufficient for AlexNet: convolution, max
//! pooling, LRN, dense, ReLU, dropout and softmax cross-entropy, with exact
//! backpropagation, Adam and a versioned weights format.

pub mod adam;
pub mod layers;
pub mod network;
pub mod tensor;
pub mod weights;

use thiserror::Error;

pub use adam::AdamState;
pub use network::{build_alexnet, build_alexnet_with, rank_desc, rank_of, LayerSpec, Mode, Network, NetworkConfig, Parameters, Preset};
pub use tensor::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("layer {layer} ({kind}): {message}")]
    LayerShape {
        layer: usize,
        kind: &'static str,
        message: String,
    },
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("k = {k} must be between 1 and {classes}")]
    BadK { k: usize, classes: usize },
    #[error("not a weights file (bad magic)")]
    BadMagic,
    #[error("unsupported weights format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("i/o error: {0}")]
    Io(String),
}
