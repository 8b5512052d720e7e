//! Probability, entropy, gating and correlation primitives.
//!
//! All entropies are in nats. Every function here is pure.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};

/// Tolerance on `Σ p = 1` accepted when constructing a [`ProbVector`].
pub const SUM_TOLERANCE: f64 = 1e-12;

/// The `top-20 / 3.0` shorthand is only meaningful at this K.
pub const FIXED_NORM_K: usize = 20;

/// A probability vector over a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    probs: Vec<f64>,
}

impl ProbVector {
    /// Validates non-negativity, finiteness and unit mass.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("empty probability vector".into()));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidInput(format!(
                "probability {} at index {i} is not a finite non-negative number",
                probs[i]
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    /// Uniform distribution over `vocab_size` outcomes.
    pub fn uniform(vocab_size: usize) -> Result<Self> {
        if vocab_size == 0 {
            return Err(invalid_arg("vocab_size must be positive"));
        }
        Ok(Self { probs: vec![1.0 / vocab_size as f64; vocab_size] })
    }

    /// Point mass on `index`.
    pub fn one_hot(vocab_size: usize, index: usize) -> Result<Self> {
        if index >= vocab_size {
            return Err(invalid_arg(format!("index {index} out of range for vocab {vocab_size}")));
        }
        let mut probs = vec![0.0; vocab_size];
        probs[index] = 1.0;
        Ok(Self { probs })
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.probs
    }

    pub fn get(&self, index: usize) -> Option<f64> {
        self.probs.get(index).copied()
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, index: usize) -> &f64 {
        &self.probs[index]
    }
}

/// How the top-K entropy is mapped into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NormMode {
    /// Divide by `ln K`, the maximum entropy of K outcomes.
    #[default]
    #[serde(rename = "exact-ln")]
    ExactLn,
    /// Divide by the constant 3.0 (`ln 20 ≈ 2.996`); valid only for K = 20.
    #[serde(rename = "fixed-3.0")]
    Fixed3,
}

impl std::str::FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact-ln" => Ok(Self::ExactLn),
            "fixed-3.0" => Ok(Self::Fixed3),
            other => Err(invalid_arg(format!("unknown norm mode '{other}'"))),
        }
    }
}

/// One next-token distribution together with its entropy statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    pub probs: ProbVector,
    pub target_id: usize,
    pub p_target: f64,
    pub entropy_full: f64,
    pub entropy_topk: f64,
    pub gate: f64,
    /// Effective K, i.e. the requested K capped at the vocabulary size.
    pub k: usize,
}

impl TokenDistribution {
    pub fn new(probs: ProbVector, target_id: usize, k: usize, norm: NormMode) -> Result<Self> {
        let p_target = probs
            .get(target_id)
            .ok_or_else(|| invalid_arg(format!("target {target_id} out of range for vocab {}", probs.vocab_size())))?;
        if norm == NormMode::Fixed3 && k != FIXED_NORM_K {
            return Err(invalid_arg(format!("fixed-3.0 normalization requires k = 20, got {k}")));
        }
        if k == 0 {
            return Err(invalid_arg("k must be >= 1"));
        }
        // a vocabulary smaller than K keeps every token
        let k = k.min(probs.vocab_size());
        let entropy_full = entropy(&probs);
        let entropy_topk = topk_entropy(&probs, k)?;
        let gate = match norm {
            NormMode::ExactLn => gate_from_topk_entropy(entropy_topk, k, norm)?,
            NormMode::Fixed3 => gate_from_topk_entropy(entropy_topk, FIXED_NORM_K, norm)?,
        };
        Ok(Self { probs, target_id, p_target, entropy_full, entropy_topk, gate, k })
    }

    /// Builds the distribution straight from logits.
    pub fn from_logits(logits: &[f64], target_id: usize, k: usize, norm: NormMode) -> Result<Self> {
        Self::new(softmax(logits)?, target_id, k, norm)
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.vocab_size()
    }
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("empty logits".into()));
    }
    if let Some(i) = logits.iter().position(|z| !z.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite logit {} at index {i}", logits[i])));
    }
    Ok(())
}

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    check_logits(logits)?;
    let m = max_of(logits);
    let mut probs: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    Ok(ProbVector { probs })
}

/// `logit - logsumexp(logits)` for every entry.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_logits(logits)?;
    let m = max_of(logits);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|z| z - lse).collect())
}

/// Shannon entropy with `0 ln 0 = 0`, clamped to `[0, ln V]`.
pub fn entropy(p: &ProbVector) -> f64 {
    let h = entropy_of_slice(p.as_slice());
    h.clamp(0.0, (p.vocab_size() as f64).ln())
}

pub(crate) fn entropy_of_slice(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    h.max(0.0)
}

/// Orders indices by descending probability, lower index first on ties.
fn rank_order(probs: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b))
}

/// Indices of the `k` largest probabilities, in descending order.
pub fn topk_indices(p: &ProbVector, k: usize) -> Result<Vec<usize>> {
    let v = p.vocab_size();
    if k == 0 || k > v {
        return Err(invalid_arg(format!("k = {k} must lie in 1..={v}")));
    }
    let probs = p.as_slice();
    let mut idx: Vec<usize> = (0..v).collect();
    let cmp = rank_order(probs);
    if k < v {
        idx.select_nth_unstable_by(k - 1, &cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(&cmp);
    Ok(idx)
}

/// Entropy of the renormalized top-`k` probabilities.
pub fn topk_entropy(p: &ProbVector, k: usize) -> Result<f64> {
    let idx = topk_indices(p, k)?;
    if k == p.vocab_size() {
        return Ok(entropy(p));
    }
    let top: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
    let mass: f64 = top.iter().sum();
    if mass <= 0.0 {
        return Ok(0.0);
    }
    let renorm: Vec<f64> = top.iter().map(|x| x / mass).collect();
    Ok(entropy_of_slice(&renorm).min((k as f64).ln()))
}

/// Maps a top-K entropy into the `[0, 1]` gate.
///
/// With a single outcome there is no uncertainty to normalize, so K = 1
/// yields a gate of 0.
pub fn gate_from_topk_entropy(entropy_topk: f64, k: usize, norm: NormMode) -> Result<f64> {
    let denom = match norm {
        NormMode::ExactLn => (k as f64).ln(),
        NormMode::Fixed3 => {
            if k != FIXED_NORM_K {
                return Err(invalid_arg(format!("fixed-3.0 normalization requires k = 20, got {k}")));
            }
            3.0
        }
    };
    if denom <= 0.0 {
        return Ok(0.0);
    }
    Ok((entropy_topk / denom).clamp(0.0, 1.0))
}

/// Normalized top-K entropy `H^topK / ln K` (or `/ 3.0`), clamped to `[0, 1]`.
pub fn normalized_gate(p: &ProbVector, k: usize, norm: NormMode) -> Result<f64> {
    if norm == NormMode::Fixed3 && k != FIXED_NORM_K {
        return Err(invalid_arg(format!("fixed-3.0 normalization requires k = 20, got {k}")));
    }
    gate_from_topk_entropy(topk_entropy(p, k)?, k, norm)
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(invalid_arg(format!("length mismatch: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(invalid_arg("pearson needs at least two points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateVariance("pearson input is constant".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based nearest rank `ceil(q·N)`, robust to `q·N` landing a hair above an integer.
pub(crate) fn nearest_rank(q: f64, n: usize) -> usize {
    let r = q * n as f64;
    let rounded = r.round();
    let rank = if (r - rounded).abs() < 1e-9 { rounded } else { r.ceil() };
    (rank as usize).clamp(1, n)
}

/// Nearest-rank percentile: the value at rank `ceil(q·N)` in ascending order.
pub fn percentile_threshold(values: &[f64], q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(invalid_arg(format!("quantile {q} must lie in (0, 1)")));
    }
    if values.is_empty() {
        return Err(Error::InvalidInput("percentile of empty values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("percentile input contains non-finite values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(sorted[nearest_rank(q, sorted.len()) - 1])
}
