use serde::{Deserialize, Serialize};

use super::records::TokenRecord;
use crate::error::{invalid_arg, Result};

/// A per-record quantity that can be binned or averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    PTarget,
    Entropy,
    EntropyTopk,
    Gate,
    GradNorm,
}

impl Axis {
    pub fn value(self, r: &TokenRecord) -> Option<f64> {
        match self {
            Axis::PTarget => Some(r.p_target),
            Axis::Entropy => r.entropy_full,
            Axis::EntropyTopk => Some(r.entropy_topk),
            Axis::Gate => Some(r.gate),
            Axis::GradNorm => r.grad_norm,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::PTarget => "p_target",
            Axis::Entropy => "entropy_full",
            Axis::EntropyTopk => "entropy_topk",
            Axis::Gate => "gate",
            Axis::GradNorm => "grad_norm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramSpec {
    pub x_axis: Axis,
    pub y_axis: Axis,
    pub x_bins: usize,
    pub y_bins: usize,
    /// Explicit `(lo, hi)`; data min/max when absent.
    pub x_range: Option<(f64, f64)>,
    pub y_range: Option<(f64, f64)>,
    /// Quantity summed per cell for a mean overlay (e.g. gradient norm).
    pub overlay: Option<Axis>,
}

impl HistogramSpec {
    pub fn new(x_axis: Axis, y_axis: Axis, bins: usize) -> Self {
        Self { x_axis, y_axis, x_bins: bins, y_bins: bins, x_range: None, y_range: None, overlay: None }
    }

    pub fn with_overlay(mut self, axis: Axis) -> Self {
        self.overlay = Some(axis);
        self
    }
}

/// Counts (and optional overlay sums) over an `x_bins × y_bins` grid; `counts[x][y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram2D {
    pub x_axis: Axis,
    pub y_axis: Axis,
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    pub counts: Vec<Vec<u64>>,
    pub weights_sum: Option<Vec<Vec<f64>>>,
    pub overlay: Option<Axis>,
}

impl Histogram2D {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Mean overlay value in a cell, `None` when empty or no overlay.
    pub fn cell_mean(&self, x: usize, y: usize) -> Option<f64> {
        let sums = self.weights_sum.as_ref()?;
        let c = self.counts[x][y];
        (c > 0).then(|| sums[x][y] / c as f64)
    }
}

fn linear_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo, lo + 1.0) };
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|i| lo + width * i as f64).collect();
    edges.push(hi);
    edges
}

/// Interior edges are lower-inclusive; the upper edge belongs to the last bin.
fn bin_of(edges: &[f64], v: f64) -> Option<usize> {
    let bins = edges.len() - 1;
    if v < edges[0] || v > edges[bins] {
        return None;
    }
    let idx = edges[1..bins].partition_point(|&e| e <= v);
    Some(idx.min(bins - 1))
}

fn data_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

/// Bins records that carry both axis values. Records outside an explicit range are skipped.
pub fn histogram2d(records: &[TokenRecord], spec: &HistogramSpec) -> Result<Histogram2D> {
    if records.is_empty() {
        return Err(invalid_arg("histogram needs at least one record"));
    }
    if spec.x_bins == 0 || spec.y_bins == 0 {
        return Err(invalid_arg("bin counts must be >= 1"));
    }
    let points: Vec<(f64, f64, Option<f64>)> = records
        .iter()
        .filter_map(|r| {
            let x = spec.x_axis.value(r)?;
            let y = spec.y_axis.value(r)?;
            let w = match spec.overlay {
                Some(a) => Some(a.value(r)?),
                None => None,
            };
            Some((x, y, w))
        })
        .collect();
    let resolve = |explicit: Option<(f64, f64)>, vals: &mut dyn Iterator<Item = f64>| -> Result<(f64, f64)> {
        match explicit {
            Some((lo, hi)) if hi > lo => Ok((lo, hi)),
            Some((lo, hi)) => Err(invalid_arg(format!("range ({lo}, {hi}) is not ascending"))),
            None => Ok(data_range(vals).unwrap_or((0.0, 1.0))),
        }
    };
    let (xlo, xhi) = resolve(spec.x_range, &mut points.iter().map(|p| p.0))?;
    let (ylo, yhi) = resolve(spec.y_range, &mut points.iter().map(|p| p.1))?;
    let x_edges = linear_edges(xlo, xhi, spec.x_bins);
    let y_edges = linear_edges(ylo, yhi, spec.y_bins);

    let mut counts = vec![vec![0u64; spec.y_bins]; spec.x_bins];
    let mut sums = spec.overlay.map(|_| vec![vec![0.0; spec.y_bins]; spec.x_bins]);
    for (x, y, w) in points {
        if let (Some(i), Some(j)) = (bin_of(&x_edges, x), bin_of(&y_edges, y)) {
            counts[i][j] += 1;
            if let (Some(s), Some(w)) = (sums.as_mut(), w) {
                s[i][j] += w;
            }
        }
    }
    Ok(Histogram2D {
        x_axis: spec.x_axis,
        y_axis: spec.y_axis,
        x_edges,
        y_edges,
        counts,
        weights_sum: sums,
        overlay: spec.overlay,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(p: f64, h: f64) -> TokenRecord {
        TokenRecord {
            source_id: "s".into(),
            position: 0,
            token_id: 0,
            token_text: None,
            p_target: p,
            entropy_full: Some(h),
            entropy_topk: h,
            gate: 0.5,
            weight: None,
            grad_norm: Some(p + h),
            step: None,
        }
    }

    #[test]
    fn single_record_lands_in_one_cell() {
        let h = histogram2d(&[rec(0.3, 1.0)], &HistogramSpec::new(Axis::PTarget, Axis::Entropy, 4)).unwrap();
        assert_eq!(h.total(), 1);
        assert_eq!(h.counts.iter().flatten().filter(|&&c| c > 0).count(), 1);
    }

    #[test]
    fn counts_are_conserved() {
        let recs: Vec<_> = (0..97).map(|i| rec((i % 10) as f64 / 10.0, (i % 7) as f64)).collect();
        let h = histogram2d(&recs, &HistogramSpec::new(Axis::PTarget, Axis::Entropy, 5).with_overlay(Axis::GradNorm))
            .unwrap();
        assert_eq!(h.total(), 97);
        assert!(h.x_edges.windows(2).all(|w| w[0] < w[1]));
        let overlay_total: f64 = h.weights_sum.as_ref().unwrap().iter().flatten().sum();
        let expected: f64 = recs.iter().map(|r| r.grad_norm.unwrap()).sum();
        assert!((overlay_total - expected).abs() < 1e-9);
    }

    #[test]
    fn boundary_rule() {
        let spec = HistogramSpec {
            x_range: Some((0.0, 1.0)),
            y_range: Some((0.0, 1.0)),
            ..HistogramSpec::new(Axis::PTarget, Axis::Gate, 4)
        };
        // 0.5 is an interior edge: both records go to bin 2 (lower-inclusive)
        let h = histogram2d(&[rec(0.5, 0.0), rec(0.5, 0.0)], &spec).unwrap();
        assert_eq!(h.counts[2].iter().sum::<u64>(), 2);
        // the top edge goes to the last bin
        let h = histogram2d(&[rec(1.0, 0.0)], &spec).unwrap();
        assert_eq!(h.counts[3].iter().sum::<u64>(), 1);
    }

    #[test]
    fn degenerate_data_range_and_errors() {
        let h =
            histogram2d(&[rec(0.2, 1.0), rec(0.2, 1.0)], &HistogramSpec::new(Axis::PTarget, Axis::Entropy, 3)).unwrap();
        assert_eq!(h.counts[0][0], 2);
        assert!(histogram2d(&[], &HistogramSpec::new(Axis::PTarget, Axis::Entropy, 3)).is_err());
        assert!(histogram2d(&[rec(0.1, 0.1)], &HistogramSpec::new(Axis::PTarget, Axis::Entropy, 0)).is_err());
    }
}
