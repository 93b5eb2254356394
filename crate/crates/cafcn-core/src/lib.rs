//! Co-saliency detection with a co-attention fully convolutional network.
//!
//! The crate implements a twin-branch encoder/decoder that detects objects
//! common to a pair (or group) of images: a small convolutional encoder, a
//! cross-image co-attention module, consistency-feature merging, and a
//! deconvolution decoder with skip connections. Training uses a weighted
//! cross-entropy loss with SGD plus momentum, all gradients written by hand
//! and verified against central finite differences. The evaluation side
//! provides the standard saliency metric suite: 256-threshold PR/ROC curves,
//! F-beta, MAE, AUC, AP, weighted F-beta and the S-measure.

pub mod coattention;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod selftest;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use metrics::{GroundTruthMask, MetricReport, SaliencyMap};
pub use tensor::{ConvKernel, Tensor};
