//! Learning analytics over diarized, code-switched classroom discussion
//! transcripts: per-segment features, group-level aggregation, statistical
//! screening against exam outcomes, and outcome classification.

pub mod acoustics;
pub mod audio;
pub mod audiosync;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod features;
pub mod grouping;
pub mod pipeline;
pub mod predict;
pub mod semantics;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
