use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::bench::{BenchCell, SeedSummary};
use crate::error::{invalid_arg, Result};
use crate::landscape::export::{fmt_opt_real, fmt_real, CsvTable};

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub objective: String,
    pub cells: usize,
    pub retention_mean: f64,
    pub retention_sd: f64,
    pub acquisition_nll_mean: f64,
    pub acquisition_nll_sd: f64,
    pub acquisition_acc_mean: f64,
    pub acquisition_acc_sd: f64,
}

/// Seed aggregates per objective, sorted by objective name.
pub fn pareto_report(cells: &[BenchCell]) -> Result<Vec<ParetoRow>> {
    if cells.is_empty() {
        return Err(invalid_arg("report needs at least one cell"));
    }
    let mut groups: BTreeMap<&str, Vec<&BenchCell>> = BTreeMap::new();
    for c in cells {
        groups.entry(&c.objective).or_default().push(c);
    }
    Ok(groups
        .into_iter()
        .map(|(name, mut cs)| {
            cs.sort_by_key(|c| c.seed);
            let col = |f: fn(&BenchCell) -> f64| mean_sd(&cs.iter().map(|c| f(c)).collect::<Vec<_>>());
            let (rm, rs) = col(|c| c.retention_delta);
            let (nm, ns) = col(|c| c.acquisition_nll);
            let (am, asd) = col(|c| c.acquisition_acc);
            ParetoRow {
                objective: name.to_string(),
                cells: cs.len(),
                retention_mean: rm,
                retention_sd: rs,
                acquisition_nll_mean: nm,
                acquisition_nll_sd: ns,
                acquisition_acc_mean: am,
                acquisition_acc_sd: asd,
            }
        })
        .collect())
}

pub fn pareto_table(rows: &[ParetoRow]) -> CsvTable {
    let mut t = CsvTable::new(&[
        "objective",
        "cells",
        "retention_delta_mean",
        "retention_delta_sd",
        "acquisition_nll_mean",
        "acquisition_nll_sd",
        "acquisition_acc_mean",
        "acquisition_acc_sd",
    ]);
    for r in rows {
        t.push(vec![
            r.objective.clone(),
            r.cells.to_string(),
            fmt_real(r.retention_mean),
            fmt_real(r.retention_sd),
            fmt_real(r.acquisition_nll_mean),
            fmt_real(r.acquisition_nll_sd),
            fmt_real(r.acquisition_acc_mean),
            fmt_real(r.acquisition_acc_sd),
        ]);
    }
    t
}

pub fn cells_table(cells: &[BenchCell]) -> CsvTable {
    let mut t = CsvTable::new(&[
        "objective",
        "seed",
        "retention_delta",
        "acquisition_nll",
        "acquisition_acc",
        "conflict_quadrant_share",
        "eval_a_nll_before",
        "eval_a_nll_after",
        "acquisition_nll_before",
    ]);
    for c in cells {
        t.push(vec![
            c.objective.clone(),
            c.seed.to_string(),
            fmt_real(c.retention_delta),
            fmt_real(c.acquisition_nll),
            fmt_real(c.acquisition_acc),
            fmt_real(c.conflict_quadrant_share),
            fmt_real(c.eval_a_nll_before),
            fmt_real(c.eval_a_nll_after),
            fmt_real(c.acquisition_nll_before),
        ]);
    }
    t
}

pub fn seeds_table(seeds: &[SeedSummary]) -> CsvTable {
    let mut t = CsvTable::new(&[
        "seed",
        "tau_entropy",
        "tau_prob",
        "finetune_conflict_share",
        "rollout_conflict_share",
        "conflict_recall",
        "eval_a_nll",
        "eval_b_nll",
    ]);
    for s in seeds {
        t.push(vec![
            s.seed.to_string(),
            fmt_real(s.thresholds.tau_entropy),
            fmt_real(s.thresholds.tau_prob),
            fmt_real(s.gap.finetune_share),
            fmt_real(s.gap.rollout_share),
            fmt_opt_real(s.gap.conflict_recall),
            fmt_real(s.eval_a_nll),
            fmt_real(s.eval_b_nll),
        ]);
    }
    t
}

/// Exact one-sided Wilcoxon signed-rank p-value for `H1: median(d) < 0`.
///
/// Zero differences are dropped and tied magnitudes get average ranks. The null
/// distribution is enumerated over all sign patterns, so at most 24 non-zero
/// differences are accepted.
pub fn wilcoxon_signed_rank_less(diffs: &[f64]) -> Result<f64> {
    let d: Vec<f64> = diffs.iter().copied().filter(|&x| x != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Ok(1.0);
    }
    if n > 24 {
        return Err(invalid_arg(format!("exact test limited to 24 differences, got {n}")));
    }
    if d.iter().any(|x| !x.is_finite()) {
        return Err(invalid_arg("differences must be finite"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[idx[j + 1]].abs() == d[idx[i]].abs() {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    // W+ small is evidence for negative differences
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let mut at_most = 0u64;
    for mask in 0u64..(1u64 << n) {
        let w: f64 = (0..n).filter(|&b| mask >> b & 1 == 1).map(|b| ranks[b]).sum();
        if w <= w_plus + 1e-9 {
            at_most += 1;
        }
    }
    Ok(at_most as f64 / (1u64 << n) as f64)
}
