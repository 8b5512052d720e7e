//! How well the top-k entropy tracks the exact entropy, and what it costs to store.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::probstats::{entropy, pearson, softmax, topk_entropy, ProbVector};
use crate::toylm::{forward, Corpus, ToyModelParams};

pub const DEFAULT_FLOAT_BYTES: usize = 8;
pub const DEFAULT_INDEX_BYTES: usize = 4;
/// Fewest tokens a study accepts.
pub const MIN_TOKENS: usize = 1000;

/// Storage model: `k·(float_bytes + index_bytes)` extra bytes per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub float_bytes: usize,
    pub index_bytes: usize,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { float_bytes: DEFAULT_FLOAT_BYTES, index_bytes: DEFAULT_INDEX_BYTES }
    }
}

impl CostModel {
    pub fn extra_bytes(&self, k: usize) -> usize {
        k * (self.float_bytes + self.index_bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub k: usize,
    /// `None` when the top-k column is constant (always the case at k = 1).
    pub pearson_r: Option<f64>,
    pub extra_bytes_per_token: usize,
}

/// The default grid `{1, 2, 5, 10, 20, 50, 100, V}`, trimmed to `V`.
pub fn default_k_grid(vocab_size: usize) -> Vec<usize> {
    let mut g: Vec<usize> = [1, 2, 5, 10, 20, 50, 100].into_iter().filter(|&k| k < vocab_size).collect();
    g.push(vocab_size);
    g
}

/// Collects exact and per-k entropies token by token so nothing V-sized is retained.
#[derive(Debug, Clone)]
pub struct FidelityAccumulator {
    k_grid: Vec<usize>,
    vocab_size: usize,
    exact: Vec<f64>,
    topk: Vec<Vec<f64>>,
}

impl FidelityAccumulator {
    pub fn new(k_grid: &[usize], vocab_size: usize) -> Result<Self> {
        if k_grid.is_empty() {
            return Err(invalid_arg("k grid is empty"));
        }
        if k_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid_arg("k grid must be strictly ascending"));
        }
        if k_grid[0] == 0 || *k_grid.last().unwrap() > vocab_size {
            return Err(invalid_arg(format!("k grid must lie in 1..={vocab_size}")));
        }
        Ok(Self { k_grid: k_grid.to_vec(), vocab_size, exact: Vec::new(), topk: vec![Vec::new(); k_grid.len()] })
    }

    pub fn push(&mut self, p: &ProbVector) -> Result<()> {
        if p.vocab_size() != self.vocab_size {
            return Err(Error::ShapeMismatch(format!(
                "distribution over {} tokens, study expects {}",
                p.vocab_size(),
                self.vocab_size
            )));
        }
        self.exact.push(entropy(p));
        for (col, &k) in self.topk.iter_mut().zip(&self.k_grid) {
            col.push(topk_entropy(p, k)?);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.exact.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exact.is_empty()
    }

    pub fn finish(&self, cost: CostModel) -> Result<Vec<FidelityRow>> {
        if self.len() < MIN_TOKENS {
            return Err(invalid_arg(format!("fidelity study needs at least {MIN_TOKENS} tokens, got {}", self.len())));
        }
        let first = self.exact[0];
        if self.exact.iter().all(|&h| h == first) {
            return Err(Error::DegenerateVariance("all exact entropies are equal".into()));
        }
        self.k_grid
            .iter()
            .zip(&self.topk)
            .map(|(&k, col)| {
                let pearson_r = match pearson(&self.exact, col) {
                    Ok(r) => Some(r),
                    Err(Error::DegenerateVariance(_)) => None,
                    Err(e) => return Err(e),
                };
                Ok(FidelityRow { k, pearson_r, extra_bytes_per_token: cost.extra_bytes(k) })
            })
            .collect()
    }
}

/// Study over every predicted position of `corpus` under `params`.
pub fn topk_fidelity_study(
    params: &ToyModelParams,
    corpus: &Corpus,
    k_grid: &[usize],
    cost: CostModel,
) -> Result<Vec<FidelityRow>> {
    let mut acc = FidelityAccumulator::new(k_grid, params.config.vocab_size)?;
    for ex in corpus.examples(params.config.context_len) {
        acc.push(&softmax(&forward(params, &ex.context)?)?)?;
    }
    acc.finish(cost)
}

/// The fixed synthetic corpus: softmax of scaled Gaussian logits with a
/// per-token temperature drawn log-uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub num_tokens: usize,
    pub logit_std: f64,
    pub temp_min: f64,
    pub temp_max: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { vocab_size: 4096, num_tokens: 10_000, logit_std: 12.0, temp_min: 0.3, temp_max: 2.0, seed: 0 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(invalid_arg("vocab_size must be >= 2"));
        }
        if !(self.logit_std > 0.0 && self.logit_std.is_finite()) {
            return Err(invalid_arg("logit_std must be positive"));
        }
        if !(self.temp_min > 0.0 && self.temp_min <= self.temp_max && self.temp_max.is_finite()) {
            return Err(invalid_arg("temperatures must satisfy 0 < temp_min <= temp_max"));
        }
        Ok(())
    }

    /// Calls `f` with each distribution in order; the stream is a pure function of the spec.
    pub fn for_each(&self, mut f: impl FnMut(ProbVector) -> Result<()>) -> Result<()> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (lmin, lmax) = (self.temp_min.ln(), self.temp_max.ln());
        let mut logits = vec![0.0; self.vocab_size];
        for _ in 0..self.num_tokens {
            let t = if lmax > lmin { rng.random_range(lmin..lmax).exp() } else { self.temp_min };
            let scale = self.logit_std / t;
            for z in &mut logits {
                *z = scale * rng.sample::<f64, _>(StandardNormal);
            }
            f(softmax(&logits)?)?;
        }
        Ok(())
    }
}

pub fn synthetic_fidelity_study(spec: &SyntheticSpec, k_grid: &[usize], cost: CostModel) -> Result<Vec<FidelityRow>> {
    let mut acc = FidelityAccumulator::new(k_grid, spec.vocab_size)?;
    spec.for_each(|p| acc.push(&p))?;
    acc.finish(cost)
}
