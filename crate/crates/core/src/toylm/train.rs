use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, Example};
use super::model::{grad_global_norm, loss_and_grads, ToyModelParams};
use super::optim::{OptimizerConfig, OptimizerState};
use crate::error::{invalid_arg, Result};
use crate::landscape::export::{fmt_opt_real, fmt_real, CsvTable};
use crate::landscape::{DynamicsConfig, TokenRecord};
use crate::objectives::{token_loss, ObjectiveSpec, TokenLossResult};

/// Where captured token records come from.
#[derive(Debug, Clone, PartialEq)]
pub enum CaptureSource {
    /// The tokens of the batch drawn at that step.
    Batch,
    /// A fixed probe set, re-scored at every capture and once more after the last step.
    Examples(Vec<Example>),
}

#[derive(Debug, Clone)]
pub struct TrainRun<'a> {
    pub init: ToyModelParams,
    pub corpus: &'a Corpus,
    pub objective: ObjectiveSpec,
    /// Frozen model for KL-regularized objectives.
    pub reference: Option<&'a ToyModelParams>,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Capture every this many steps; 0 disables capture.
    pub capture_every: usize,
    pub capture: CaptureSource,
    pub sample_seed: u64,
    /// Entropy cut-offs for the per-step subgroup columns.
    pub subgroups: DynamicsConfig,
}

impl<'a> TrainRun<'a> {
    pub fn new(init: ToyModelParams, corpus: &'a Corpus, objective: ObjectiveSpec) -> Self {
        Self {
            init,
            corpus,
            objective,
            reference: None,
            optimizer: OptimizerConfig::default(),
            steps: 500,
            batch_size: 64,
            capture_every: 0,
            capture: CaptureSource::Batch,
            sample_seed: 0,
            subgroups: DynamicsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: u64,
    pub mean_loss: f64,
    pub mean_gate: f64,
    pub high_entropy_ce: Option<f64>,
    pub high_entropy_count: usize,
    pub low_entropy_ce: Option<f64>,
    pub low_entropy_count: usize,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_table(&self) -> CsvTable {
        let mut t = CsvTable::new(&[
            "step",
            "mean_loss",
            "mean_gate",
            "high_entropy_ce",
            "high_entropy_count",
            "low_entropy_ce",
            "low_entropy_count",
            "grad_norm",
        ]);
        for e in &self.entries {
            t.push(vec![
                e.step.to_string(),
                fmt_real(e.mean_loss),
                fmt_real(e.mean_gate),
                fmt_opt_real(e.high_entropy_ce),
                e.high_entropy_count.to_string(),
                fmt_opt_real(e.low_entropy_ce),
                e.low_entropy_count.to_string(),
                fmt_real(e.grad_norm),
            ]);
        }
        t
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ToyModelParams,
    pub log: TrainLog,
    /// Captured records, each tagged with its step.
    pub captures: Vec<TokenRecord>,
}

fn subgroup_means(per_token: &[TokenLossResult], cfg: &DynamicsConfig) -> [(Option<f64>, usize); 2] {
    let (mut hs, mut hn, mut ls, mut ln) = (0.0, 0usize, 0.0, 0usize);
    for r in per_token {
        let h = r.stats.entropy_full;
        if h >= cfg.high_entropy_min {
            hs += r.cross_entropy();
            hn += 1;
        } else if h <= cfg.low_entropy_max {
            ls += r.cross_entropy();
            ln += 1;
        }
    }
    let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    [(mean(hs, hn), hn), (mean(ls, ln), ln)]
}

fn batch_records(batch: &[Example], per_token: &[TokenLossResult], step: u64) -> Vec<TokenRecord> {
    batch
        .iter()
        .zip(per_token)
        .map(|(ex, r)| TokenRecord::from_loss(format!("seq{}", ex.sequence), ex.position, r, Some(step)))
        .collect()
}

/// Scores `examples` under the objective without touching the parameters.
pub fn probe_records(
    params: &ToyModelParams,
    examples: &[Example],
    objective: &ObjectiveSpec,
    reference: Option<&ToyModelParams>,
    step: u64,
) -> Result<Vec<TokenRecord>> {
    examples
        .iter()
        .map(|ex| {
            let logits = super::model::forward(params, &ex.context)?;
            let ref_logits = match (objective.needs_reference(), reference) {
                (true, Some(r)) => Some(super::model::forward(r, &ex.context)?),
                _ => None,
            };
            let res = token_loss(objective, &logits, ex.target, ref_logits.as_deref())?;
            Ok(TokenRecord::from_loss(format!("seq{}", ex.sequence), ex.position, &res, Some(step)))
        })
        .collect()
}

/// Seeded with-replacement minibatch training.
///
/// Log entry `s` describes the batch drawn at step `s` under the parameters
/// before update `s`.
pub fn train(run: &TrainRun<'_>) -> Result<TrainOutput> {
    let cfg = run.init.config;
    cfg.validate()?;
    run.objective.validate()?;
    run.subgroups.validate()?;
    if run.corpus.is_empty() {
        return Err(invalid_arg("training corpus is empty"));
    }
    run.corpus.check_vocab(cfg.vocab_size)?;
    let pool = run.corpus.examples(cfg.context_len);
    if pool.is_empty() {
        return Err(invalid_arg(format!("no sequence is longer than the context length {}", cfg.context_len)));
    }
    if run.steps > 0 && run.batch_size == 0 {
        return Err(invalid_arg("batch_size must be >= 1"));
    }
    let mut params = run.init.clone();
    let mut opt = OptimizerState::new(run.optimizer, &params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.sample_seed);
    let mut log = TrainLog::default();
    let mut captures = Vec::new();
    for step in 0..run.steps {
        let batch: Vec<Example> = (0..run.batch_size).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect();
        let res = loss_and_grads(&params, &batch, &run.objective, run.reference)?;
        let b = res.per_token.len() as f64;
        let [(high_entropy_ce, high_entropy_count), (low_entropy_ce, low_entropy_count)] =
            subgroup_means(&res.per_token, &run.subgroups);
        log.entries.push(TrainLogEntry {
            step: step as u64,
            mean_loss: res.per_token.iter().map(|r| r.loss).sum::<f64>() / b,
            mean_gate: res.per_token.iter().map(|r| r.weight).sum::<f64>() / b,
            high_entropy_ce,
            high_entropy_count,
            low_entropy_ce,
            low_entropy_count,
            grad_norm: grad_global_norm(&res.grads),
        });
        if run.capture_every > 0 && step % run.capture_every == 0 {
            match &run.capture {
                CaptureSource::Batch => captures.extend(batch_records(&batch, &res.per_token, step as u64)),
                CaptureSource::Examples(ex) => {
                    captures.extend(probe_records(&params, ex, &run.objective, run.reference, step as u64)?)
                }
            }
        }
        opt.apply(&mut params, &res.grads)?;
    }
    if run.capture_every > 0 {
        if let CaptureSource::Examples(ex) = &run.capture {
            captures.extend(probe_records(&params, ex, &run.objective, run.reference, run.steps as u64)?);
        }
    }
    Ok(TrainOutput { params, log, captures })
}
