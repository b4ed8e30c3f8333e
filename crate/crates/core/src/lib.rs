//! Token pruning for a small CLIP-style vision transformer: golden token
//! rankings from sliding-window removal, a learned ranking predictor,
//! progressive pruning at inference and prompt tuning to recover accuracy.

pub mod bench;
pub mod clipcore;
pub mod data;
pub mod error;
pub mod golden;
pub mod nncore;
pub mod predictor;
pub mod prompt;
pub mod pruning;

pub use error::{Error, Result};
