//! Loss-aware post-training quantization.
//!
//! The pipeline calibrates one step size per tensor by minimizing the Lp
//! quantization error for several `p`, picks the best point on that
//! trajectory with a quadratic fit, and then jointly refines all step sizes
//! against the network's cross-entropy loss with Powell's method. The
//! [`landscape`] module provides the loss-surface diagnostics (Hessian,
//! Gaussian curvature, interaction term, 2-D scans).

// `!(x > 0.0)` is deliberate: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bias;
pub mod calib;
pub mod error;
pub mod graph;
pub mod landscape;
pub mod lapq;
pub mod powell;
pub mod qtn;
pub mod quantizer;
pub mod search;
pub mod steps;
pub mod tensor;

pub use bias::BiasCorrection;
pub use calib::{calibrate_model, calibrate_tensor, PNormSample};
pub use error::{Error, Result};
pub use graph::{CalibSet, Evaluation, Layer, LayerKind, Model, ModelManifest, QuantConfig, QuantizedModel};
pub use lapq::{lapq, LapqConfig, LapqResult, Phase};
pub use powell::{powell, PowellConfig};
pub use quantizer::QuantParams;
pub use steps::{SlotKind, StepEntry, StepLayout, StepVector};
pub use tensor::Tensor;
