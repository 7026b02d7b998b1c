//! rgenima: a desk-scale imaging–genetics pipeline.
//!
//! The library covers the full chain: portable 3D volume I/O, atlas-driven
//! ROI parcellation into fixed-length patch sequences, SNP quality control
//! and prompt serialization, a from-scratch multimodal transformer trained
//! by autoregressive NLL, attention-rollout attribution of ROI–gene
//! associations, bootstrap stability statistics, and enrichment testing.
//! Every stage is seed-deterministic; the `rgenima` binary chains the
//! stages over files.

pub mod attribution;
pub mod config;
pub mod genome;
pub mod model;
pub mod parcel;
pub mod pipeline;
pub mod rng;
pub mod stability;
pub mod volume;

pub use volume::{LabelVolume, RoiTable, Volume};
