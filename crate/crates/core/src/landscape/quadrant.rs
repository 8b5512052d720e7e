//! Joint-percentile partition of tokens by entropy and target probability.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::records::TokenRecord;
use crate::error::{invalid_arg, Result};
use crate::probstats::percentile_threshold;

/// Default joint percentile for the confident-conflict corner.
pub const DEFAULT_QUANTILE: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrant {
    /// Low entropy, low probability.
    ConfidentConflict,
    /// Low entropy, high probability.
    ConfidentCorrect,
    /// High entropy, low probability.
    Exploratory,
    /// High entropy, high probability.
    Other,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] =
        [Quadrant::ConfidentConflict, Quadrant::ConfidentCorrect, Quadrant::Exploratory, Quadrant::Other];

    pub fn name(self) -> &'static str {
        match self {
            Quadrant::ConfidentConflict => "confident-conflict",
            Quadrant::ConfidentCorrect => "confident-correct",
            Quadrant::Exploratory => "exploratory",
            Quadrant::Other => "other",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for Quadrant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Quadrant::ALL.into_iter().find(|q| q.name() == s).ok_or_else(|| invalid_arg(format!("unknown quadrant '{s}'")))
    }
}

/// Which entropy statistic drives the entropy axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropyAxis {
    /// Normalized top-K entropy, the same units as masking thresholds.
    #[default]
    Gate,
    /// Full-vocabulary entropy in nats.
    Full,
}

impl EntropyAxis {
    pub fn value(self, r: &TokenRecord) -> Option<f64> {
        match self {
            EntropyAxis::Gate => Some(r.gate),
            EntropyAxis::Full => r.entropy_full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_entropy: f64,
    pub tau_prob: f64,
}

impl Thresholds {
    /// Nearest-rank percentile `q` of each axis over `records`.
    pub fn from_records(records: &[TokenRecord], q: f64, axis: EntropyAxis) -> Result<Self> {
        let h = entropy_values(records, axis)?;
        let p: Vec<f64> = records.iter().map(|r| r.p_target).collect();
        Ok(Self { tau_entropy: percentile_threshold(&h, q)?, tau_prob: percentile_threshold(&p, q)? })
    }

    pub fn classify(&self, entropy: f64, p_target: f64) -> Quadrant {
        match (entropy <= self.tau_entropy, p_target <= self.tau_prob) {
            (true, true) => Quadrant::ConfidentConflict,
            (true, false) => Quadrant::ConfidentCorrect,
            (false, true) => Quadrant::Exploratory,
            (false, false) => Quadrant::Other,
        }
    }
}

fn entropy_values(records: &[TokenRecord], axis: EntropyAxis) -> Result<Vec<f64>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| axis.value(r).ok_or_else(|| invalid_arg(format!("record {i} has no entropy_full"))))
        .collect()
}

/// Labels every record against fixed thresholds.
pub fn label_records(records: &[TokenRecord], thresholds: &Thresholds, axis: EntropyAxis) -> Result<Vec<Quadrant>> {
    let h = entropy_values(records, axis)?;
    Ok(records.iter().zip(h).map(|(r, h)| thresholds.classify(h, r.p_target)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadrantStats {
    pub thresholds: Thresholds,
    pub labels: Vec<Quadrant>,
    /// Indexed in [`Quadrant::ALL`] order.
    pub counts: [usize; 4],
    pub shares: [f64; 4],
}

impl QuadrantStats {
    pub fn count(&self, q: Quadrant) -> usize {
        self.counts[q.index()]
    }

    pub fn share(&self, q: Quadrant) -> f64 {
        self.shares[q.index()]
    }
}

/// Partition counts and shares under the given thresholds.
pub fn quadrant_stats_with(
    records: &[TokenRecord],
    thresholds: Thresholds,
    axis: EntropyAxis,
) -> Result<QuadrantStats> {
    if records.is_empty() {
        return Err(invalid_arg("quadrant statistics need at least one record"));
    }
    let labels = label_records(records, &thresholds, axis)?;
    let mut counts = [0usize; 4];
    for l in &labels {
        counts[l.index()] += 1;
    }
    let n = records.len() as f64;
    let shares = counts.map(|c| c as f64 / n);
    Ok(QuadrantStats { thresholds, labels, counts, shares })
}

/// Thresholds at percentile `q` of the records themselves, then the partition.
pub fn quadrant_stats(records: &[TokenRecord], q: f64, axis: EntropyAxis) -> Result<QuadrantStats> {
    if records.is_empty() {
        return Err(invalid_arg("quadrant statistics need at least one record"));
    }
    quadrant_stats_with(records, Thresholds::from_records(records, q, axis)?, axis)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingRow {
    pub token_id: u64,
    pub token_text: Option<String>,
    pub count: usize,
    pub mean_gate: f64,
}

/// Most frequent tokens inside one quadrant; ties broken by token id.
pub fn quadrant_token_ranking(
    records: &[TokenRecord],
    labels: &[Quadrant],
    quadrant: Quadrant,
    top_n: usize,
) -> Result<Vec<RankingRow>> {
    if records.len() != labels.len() {
        return Err(invalid_arg(format!("{} records but {} labels", records.len(), labels.len())));
    }
    let mut groups: BTreeMap<u64, (Option<String>, usize, f64)> = BTreeMap::new();
    for (r, _) in records.iter().zip(labels).filter(|(_, &l)| l == quadrant) {
        let e = groups.entry(r.token_id).or_insert_with(|| (r.token_text.clone(), 0, 0.0));
        if e.0.is_none() {
            e.0.clone_from(&r.token_text);
        }
        e.1 += 1;
        e.2 += r.gate;
    }
    let mut rows: Vec<RankingRow> = groups
        .into_iter()
        .map(|(token_id, (token_text, count, gate_sum))| RankingRow {
            token_id,
            token_text,
            count,
            mean_gate: gate_sum / count as f64,
        })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then(a.token_id.cmp(&b.token_id)));
    rows.truncate(top_n);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(token: u64, gate: f64, p: f64) -> TokenRecord {
        TokenRecord {
            source_id: "s".into(),
            position: 0,
            token_id: token,
            token_text: None,
            p_target: p,
            entropy_full: Some(gate * 3.0),
            entropy_topk: gate * 3.0,
            gate,
            weight: None,
            grad_norm: None,
            step: None,
        }
    }

    #[test]
    fn identical_records_collapse_to_one_quadrant() {
        let recs = vec![rec(1, 0.4, 0.2); 10];
        let s = quadrant_stats(&recs, 0.15, EntropyAxis::Gate).unwrap();
        // nearest rank picks the common value, so everything is <= both thresholds
        assert_eq!(s.count(Quadrant::ConfidentConflict), 10);
        assert_eq!(s.share(Quadrant::ConfidentConflict), 1.0);
    }

    #[test]
    fn constructed_fifteen_percent_corner() {
        // 15 of 100 records sit strictly below all others on both axes
        let mut recs = Vec::new();
        for i in 0..15 {
            recs.push(rec(i, 0.01 + i as f64 * 1e-3, 0.001 + i as f64 * 1e-4));
        }
        for i in 15..100 {
            recs.push(rec(i, 0.5 + i as f64 * 1e-3, 0.3 + i as f64 * 1e-3));
        }
        let s = quadrant_stats(&recs, 0.15, EntropyAxis::Gate).unwrap();
        assert_eq!(s.count(Quadrant::ConfidentConflict), 15);
        assert!((s.share(Quadrant::ConfidentConflict) - 0.15).abs() < 1e-15);
        assert_eq!(s.counts.iter().sum::<usize>(), 100);
        assert!((s.shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_threshold_share_bounded() {
        let recs: Vec<_> =
            (0..200).map(|i| rec(i, (i * 37 % 200) as f64 / 200.0, (i * 91 % 200) as f64 / 200.0)).collect();
        let s = quadrant_stats(&recs, 0.15, EntropyAxis::Gate).unwrap();
        let low_h = recs.iter().filter(|r| r.gate <= s.thresholds.tau_entropy).count();
        assert_eq!(low_h, 30);
    }

    #[test]
    fn ranking_examples() {
        let mut recs = vec![rec(7, 0.1, 0.01); 5];
        recs.push(rec(3, 0.9, 0.9));
        let labels = label_records(&recs, &Thresholds { tau_entropy: 0.2, tau_prob: 0.05 }, EntropyAxis::Gate).unwrap();
        let rows = quadrant_token_ranking(&recs, &labels, Quadrant::ConfidentConflict, 10).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].count, 5);
        assert!((rows[0].mean_gate - 0.1).abs() < 1e-15);
        assert!(quadrant_token_ranking(&recs, &labels, Quadrant::ConfidentConflict, 0).unwrap().is_empty());

        let recs = vec![rec(9, 0.1, 0.01), rec(2, 0.1, 0.01), rec(9, 0.1, 0.01), rec(5, 0.1, 0.01), rec(2, 0.1, 0.01)];
        let labels = vec![Quadrant::ConfidentConflict; 5];
        let a = quadrant_token_ranking(&recs, &labels, Quadrant::ConfidentConflict, 3).unwrap();
        let b = quadrant_token_ranking(&recs, &labels, Quadrant::ConfidentConflict, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|r| r.token_id).collect::<Vec<_>>(), vec![2, 9, 5]);
    }
}
