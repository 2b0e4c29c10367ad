//! Multi-focus image fusion driven by the spatial frequency of deep features.
//!
//! A small convolutional autoencoder (a 3x3 stem followed by a dense block
//! with squeeze-and-excitation gating, and a four-layer decoder) is trained to
//! reconstruct grayscale patches. At fusion time the encoder's per-pixel
//! feature vectors feed a windowed spatial-frequency activity measure; the
//! comparison of two such maps gives a binary decision map that is cleaned by
//! morphology and small-region removal, softened with a guided filter, and
//! used to blend the source images.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod fusion;
pub mod image;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod postprocess;
pub mod ssim;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod weights;

pub use autodiff::{GradientSet, Tape, Var};
pub use fusion::{DecisionMap, FusionConfig, FusionMode, FusionResult, SFMap, Stage};
pub use error::{Error, ImageError, Result, WeightFileError};
pub use image::{ImageBuffer, Plane, RealImage};
pub use metrics::MetricReport;
pub use network::{ChannelPlan, FeatureMap, NetworkParams};
pub use tensor::{Shape, Tensor};
