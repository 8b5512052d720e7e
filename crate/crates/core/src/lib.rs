//! Entropy-gated token-level fine-tuning objectives and the tooling around them:
//! probability statistics, a toy language model, a synthetic forgetting
//! benchmark and landscape diagnostics.

pub mod error;
pub mod forgebench;
pub mod gradcheck;
pub mod landscape;
pub mod objectives;
pub mod probstats;
pub mod toylm;

pub use error::{Error, Result};
pub use objectives::{GateSpec, ObjectiveSpec, TokenLossResult};
pub use probstats::{NormMode, ProbVector, TokenDistribution};
