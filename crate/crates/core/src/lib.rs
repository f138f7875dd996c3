//! Rate-adaptive multi-stage vector quantization.
//!
//! A feature vector is split into variance-ordered sub-vectors, each quantized by a
//! cascade of residual codebooks. A per-sub-vector stage count, chosen greedily from an
//! offline marginal-loss table, trades reconstruction quality against a bit budget.
//! Indices are sent either at fixed length or Huffman-coded against learned priors.

pub mod bits;
pub mod bitstream;
pub mod cli;
pub mod codebook;
pub mod entropy;
pub mod error;
pub mod layout;
pub mod matrix;
pub mod oracle;
pub mod quantizer;
pub mod rate;
pub mod sweep;
pub mod synth;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use bitstream::{decode_batch, encode_batch, read_model, write_model, DecodedBatch, EncodedBatch};
pub use codebook::{Codebook, MsvqModel};
pub use error::{Error, Result};
pub use layout::{allocation_preset, build_layout, compute_stats, AllocationPreset, BitMatrix, SubVectorLayout};
pub use matrix::FeatureMatrix;
pub use quantizer::{decode, encode, EncodedFeature, SelectionPlan};
pub use rate::{build_table, select_stages, BitMode, MarginalLossTable};
pub use trainer::{train, TrainConfig, TrainReport};
