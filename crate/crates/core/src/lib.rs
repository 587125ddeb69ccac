//! Temporal attention for motion-enhanced segmentation, with the small
//! autodiff engine, UNet backbone, losses, metrics, synthetic data and cost
//! model needed to train and evaluate it on a desk.

pub mod autodiff;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tam;
pub mod tensor;
pub mod unet;
pub mod tnsr;

pub use autodiff::{NormMode, Tape, Var};
pub use error::{Error, Result};
pub use kernels::{count_macs, Padding};
pub use optim::{Adam, AdamConfig};
pub use params::{Parameters, Session};
pub use tensor::{DType, Scalar, Tensor};
pub use tam::{FeatureStack, TamConfig, TamParams};
