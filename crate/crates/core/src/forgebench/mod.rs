//! Synthetic two-domain forgetting benchmark.

mod bench;
mod domain;
mod report;

pub use bench::{
    classify_conflicts, classify_with, conflict_recall, derive_seed, finetune, finetune_with, landscape_gap, pretrain,
    resolve_objective, run_bench, run_cell, seeded_domain, self_rollouts, BenchCell, BenchProtocol, BenchRun,
    CellOutput, ConflictClassification, LandscapeGap, Pretrained, SeedSummary, TrainingProtocol, FLAT_GATE,
    OBJECTIVE_NAMES,
};
pub use domain::{
    build_truth, generate_domains, sample_chain, ConflictSpec, CorpusSizes, DomainSpec, Domains, GroundTruth,
    Injection, InjectionKind, RowKind,
};
pub use report::{
    cells_table, mean_sd, pareto_report, pareto_table, seeds_table, wilcoxon_signed_rank_less, ParetoRow,
};
