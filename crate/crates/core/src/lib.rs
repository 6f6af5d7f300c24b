//! Single-shot grid object detector with float and 8-bit inference.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! * [`tensor`] float32 conv/pool/activation primitives (channels-last),
//! * [`quant`] 8-bit affine quantization and the fixed-point conv path,
//! * [`model`] network description, forward pass and the binary model file,
//! * [`detector`] grid decoding and non-maximum suppression,
//! * [`train`] grid targets, the multi-part detection loss, backprop, Adam and
//!   a synthetic rectangle dataset,
//! * [`eval`] discrete-score TP/FP evaluation and IoU sweeps,
//! * [`perfsim`] parameter/OP/byte accounting and a bandwidth-bound frame-rate model.

pub mod detector;
pub mod error;
pub mod eval;
pub mod model;
pub mod par;
pub mod perfsim;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
