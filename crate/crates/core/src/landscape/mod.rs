//! Token-level diagnostics over scored or ingested records.

mod dynamics;
pub mod export;
mod fidelity;
mod histogram;
mod quadrant;
mod records;

pub use dynamics::{dynamics_track, DynamicsConfig, DynamicsRow};
pub use fidelity::{
    default_k_grid, synthetic_fidelity_study, topk_fidelity_study, CostModel, FidelityAccumulator, FidelityRow,
    SyntheticSpec, MIN_TOKENS,
};
pub use histogram::{histogram2d, Axis, Histogram2D, HistogramSpec};
pub use quadrant::{
    label_records, quadrant_stats, quadrant_stats_with, quadrant_token_ranking, EntropyAxis, Quadrant, QuadrantStats,
    RankingRow, Thresholds, DEFAULT_QUANTILE,
};
pub use records::{
    export_records_jsonl, ingest_records, read_records, score_corpus, score_corpus_with, write_records, TokenRecord,
};
