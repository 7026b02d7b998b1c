//! Micro multimodal transformer: RiT image encoder, token embedding,
//! self- and cross-modal attention, anchored multimodal fusion, NLL
//! training with exact analytic gradients, and greedy decoding.
//!
//! Everything runs in 64-bit arithmetic so finite-difference gradient
//! checks are clean; all weights live in plain `Vec<f64>` tensors.

pub mod attention;
pub mod backward;
pub mod decode;
pub mod forward;
pub(crate) mod linalg;
pub mod params;
pub mod train;
pub mod vocab;

use std::fmt;

pub use attention::{cross_attention, self_attention, AttnWeights};
pub use backward::backward;
pub use decode::{greedy_decode, Verdict};
pub use forward::{
    build_model_input, forward_multimodal, forward_with_cache, nll_loss, rit_encode,
    roi_patch_embed, Cache, ForwardTrace, ModelInput, SeqSpan,
};
pub use params::Params;
pub use train::{train, TrainConfig, TrainItem, TrainOutcome};
pub use vocab::Vocab;

#[derive(Debug)]
pub enum ModelError {
    UnknownToken(String),
    ShapeMismatch(String),
    AnchorMismatch(String),
    EmptyTarget,
    NonFiniteActivation(String),
    DivergedLoss(usize),
    EmptyTrace,
    BadCheckpoint(String),
    Io(std::io::Error),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::UnknownToken(w) => write!(f, "unknown token {w:?}"),
            ModelError::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            ModelError::AnchorMismatch(m) => write!(f, "anchor mismatch: {m}"),
            ModelError::EmptyTarget => write!(f, "no target positions"),
            ModelError::NonFiniteActivation(m) => write!(f, "non-finite activation in {m}"),
            ModelError::DivergedLoss(step) => write!(f, "loss diverged at step {step}"),
            ModelError::EmptyTrace => write!(f, "empty forward trace"),
            ModelError::BadCheckpoint(m) => write!(f, "bad checkpoint: {m}"),
            ModelError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        ModelError::Io(e)
    }
}

/// Model hyperparameters. Shapes of every weight tensor derive from this
/// alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_text: usize,
    pub n_layers_rit: usize,
    /// Cubic patch edge length S; patches flatten to S^3 inputs.
    pub patch_size: usize,
    /// Fixed ROI count N; the anchor expands to N image tokens.
    pub n_rois: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0
            || self.n_heads == 0
            || self.patch_size == 0
            || self.n_rois == 0
            || self.max_seq_len == 0
            || self.vocab_size == 0
        {
            return Err(ModelError::ShapeMismatch("all config fields must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::ShapeMismatch(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn patch_flat(&self) -> usize {
        self.patch_size * self.patch_size * self.patch_size
    }

    /// Desk-scale defaults: small enough to train on one CPU core.
    pub fn desk(patch_size: usize, n_rois: usize, vocab_size: usize, max_seq_len: usize) -> Self {
        ModelConfig {
            d_model: 32,
            n_heads: 2,
            n_layers_text: 2,
            n_layers_rit: 1,
            patch_size,
            n_rois,
            max_seq_len,
            vocab_size,
        }
    }
}
