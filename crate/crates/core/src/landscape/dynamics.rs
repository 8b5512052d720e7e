use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::records::TokenRecord;
use crate::error::{invalid_arg, Error, Result};

/// Entropy cut-offs (nats) for the subgroup curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    #[serde(default = "default_hi")]
    pub high_entropy_min: f64,
    #[serde(default = "default_lo")]
    pub low_entropy_max: f64,
}

fn default_hi() -> f64 {
    2.0
}
fn default_lo() -> f64 {
    0.5
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self { high_entropy_min: default_hi(), low_entropy_max: default_lo() }
    }
}

impl DynamicsConfig {
    pub fn new(high_entropy_min: f64, low_entropy_max: f64) -> Result<Self> {
        let c = Self { high_entropy_min, low_entropy_max };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.low_entropy_max.is_finite() && self.high_entropy_min.is_finite()) {
            return Err(invalid_arg("dynamics thresholds must be finite"));
        }
        if self.low_entropy_max >= self.high_entropy_min {
            return Err(invalid_arg(format!(
                "low_entropy_max ({}) must be below high_entropy_min ({})",
                self.low_entropy_max, self.high_entropy_min
            )));
        }
        Ok(())
    }
}

/// Subgroup cross-entropy at one capture step. Means are `None` for empty groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRow {
    pub step: u64,
    pub high_mean_ce: Option<f64>,
    pub high_count: usize,
    pub low_mean_ce: Option<f64>,
    pub low_count: usize,
}

/// Groups records by `step` and by their capture-time full entropy.
pub fn dynamics_track(records: &[TokenRecord], cfg: &DynamicsConfig) -> Result<Vec<DynamicsRow>> {
    cfg.validate()?;
    let mut by_step: BTreeMap<u64, [(f64, usize); 2]> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let step = r.step.ok_or_else(|| Error::Validation { line: i + 1, message: "record has no step".into() })?;
        let h = r
            .entropy_full
            .ok_or_else(|| Error::Validation { line: i + 1, message: "record has no entropy_full".into() })?;
        let slot = by_step.entry(step).or_default();
        let ce = r.cross_entropy();
        if h >= cfg.high_entropy_min {
            slot[0].0 += ce;
            slot[0].1 += 1;
        } else if h <= cfg.low_entropy_max {
            slot[1].0 += ce;
            slot[1].1 += 1;
        }
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    Ok(by_step
        .into_iter()
        .map(|(step, [hi, lo])| DynamicsRow {
            step,
            high_mean_ce: mean(hi),
            high_count: hi.1,
            low_mean_ce: mean(lo),
            low_count: lo.1,
        })
        .collect())
}
