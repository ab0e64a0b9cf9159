//! Open-set video facial expression recognition by prompting a frozen dual
//! encoder.
//!
//! Learnable per-class text contexts and a pixel patch placed on the most
//! salient region of each video adapt the encoder to known expression
//! classes, while per-class negative representations (fixed "not" text
//! prompts and a learnable bank of negative frames) supply a second,
//! distance-based prediction. The two predictions are fused into a single
//! known-ness score used to flag unknown classes.
//!
//! Module map:
//! - [`data`]: samples, manifests, synthetic data, frame sampling, openness splits
//! - [`encoder`]: the dual-encoder contract and the linear mock encoder
//! - [`text_prompt`], [`visual_prompt`]: the learnable prompt parameters
//! - [`objectives`]: the multi-task loss and its gradients
//! - [`inference`]: probability heads, fusion, thresholding
//! - [`metrics`]: AUROC and OSCR
//! - [`model`]: forward/backward composition over a batch
//! - [`train`]: configuration, training loop, checkpoints, protocol runner

pub mod data;
pub mod encoder;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod text_prompt;
pub mod train;
pub mod visual_prompt;

pub use error::{HespError, Result};
