//! Saliency-guided U-Net training with radiologist eye-gaze supervision.
//!
//! The crate covers dense tensor primitives with rule-parameterized backward
//! passes ([`ops`]), a multi-head U-Net ([`model`]), saliency generators and
//! their differentiable replay ([`saliency`]), gaze heatmap rendering
//! ([`gaze`]), the loss regimes and training loop ([`train`]), bootstrap
//! ROC-AUC evaluation ([`eval`]) and dataset handling ([`data`]).

pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gaze;
pub mod layer;
pub mod model;
pub mod ops;
pub mod saliency;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use exec::Execution;
pub use layer::LayerSpec;
pub use model::{ForwardRecord, Gradients, UNetConfig, UNetModel};
pub use ops::BackwardRule;
pub use saliency::{Heatmap, HeatmapSource};
pub use tensor::{Scalar, Tensor};
