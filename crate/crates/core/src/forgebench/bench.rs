use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::domain::{generate_domains, ConflictSpec, CorpusSizes, DomainSpec, Domains, InjectionKind};
use crate::error::{invalid_arg, Result};
use crate::landscape::{label_records, score_corpus, EntropyAxis, Quadrant, Thresholds, TokenRecord, DEFAULT_QUANTILE};
use crate::objectives::{ObjectiveSpec, DEFAULT_TOPK, SFT_KL_BETA};
use crate::probstats::softmax;
use crate::toylm::{
    evaluate, forward, init_model, train, CaptureSource, Corpus, ModelConfig, OptimizerConfig, ToyModelParams,
    TrainLog, TrainRun,
};

/// Objective names understood by the benchmark, in report order.
pub const OBJECTIVE_NAMES: [&str; 9] =
    ["ce", "conflict-mask", "dft", "eaft", "eaft-sig", "eaft2", "eaft3", "hard-mask", "sft-kl"];

/// Maps a benchmark name to its objective. Mask thresholds come from the fine-tune-start snapshot.
pub fn resolve_objective(name: &str, thresholds: &Thresholds, k: usize) -> Result<ObjectiveSpec> {
    let spec = match name {
        "ce" => ObjectiveSpec::cross_entropy(),
        "eaft" => ObjectiveSpec::eaft(),
        "eaft2" => ObjectiveSpec::eaft_power(2.0),
        "eaft3" => ObjectiveSpec::eaft_power(3.0),
        "eaft-sig" => ObjectiveSpec::eaft_sigmoid(),
        "hard-mask" => ObjectiveSpec::hard_mask(thresholds.tau_entropy),
        "conflict-mask" => ObjectiveSpec::conflict_mask(thresholds.tau_entropy, thresholds.tau_prob),
        "dft" => ObjectiveSpec::dft(),
        "sft-kl" => ObjectiveSpec::sft_kl(SFT_KL_BETA),
        other => return Err(invalid_arg(format!("unknown objective '{other}'"))),
    };
    Ok(ObjectiveSpec { k, ..spec })
}

fn default_quantile() -> f64 {
    DEFAULT_QUANTILE
}
fn default_k() -> usize {
    DEFAULT_TOPK
}
fn default_pretrain_steps() -> usize {
    2500
}
fn default_finetune_steps() -> usize {
    200
}
fn default_batch() -> usize {
    64
}
fn default_capture_every() -> usize {
    10
}
fn default_finetune_optimizer() -> OptimizerConfig {
    OptimizerConfig::sgd(0.02)
}
fn default_probe() -> usize {
    50
}
fn default_rollouts() -> usize {
    200
}
fn default_version() -> String {
    "1".into()
}

/// Stage lengths and optimizers of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingProtocol {
    #[serde(default = "default_pretrain_steps")]
    pub pretrain_steps: usize,
    #[serde(default = "default_finetune_steps")]
    pub finetune_steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub pretrain_optimizer: OptimizerConfig,
    /// Plain momentum SGD by default: Adam's per-parameter scaling undoes small gate weights.
    #[serde(default = "default_finetune_optimizer")]
    pub finetune_optimizer: OptimizerConfig,
    /// Joint percentile for the frozen mask thresholds and the quadrant share.
    #[serde(default = "default_quantile")]
    pub mask_quantile: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Fine-tuning capture interval for the subgroup curves; 0 disables capture.
    #[serde(default = "default_capture_every")]
    pub capture_every: usize,
    /// Leading fine-tune sequences re-scored at each capture.
    #[serde(default = "default_probe")]
    pub probe_sequences: usize,
    /// Self-sampled sequences for the landscape comparison.
    #[serde(default = "default_rollouts")]
    pub rollout_sequences: usize,
}

impl Default for TrainingProtocol {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

/// A full benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchProtocol {
    #[serde(default = "default_version")]
    pub version: String,
    #[serde(default)]
    pub domain: DomainSpec,
    #[serde(default)]
    pub conflict: ConflictSpec,
    #[serde(default)]
    pub sizes: CorpusSizes,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingProtocol,
    pub objectives: Vec<String>,
    pub seeds: Vec<u64>,
}

impl BenchProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.version != "1" {
            return Err(invalid_arg(format!("unsupported protocol version '{}'", self.version)));
        }
        self.domain.validate()?;
        self.conflict.validate()?;
        self.sizes.validate(self.domain.markov_order)?;
        self.model.validate()?;
        if self.model.vocab_size != self.domain.vocab_size {
            return Err(invalid_arg(format!(
                "model vocab {} differs from domain vocab {}",
                self.model.vocab_size, self.domain.vocab_size
            )));
        }
        if self.model.context_len < self.domain.markov_order {
            return Err(invalid_arg("model context_len must be >= markov_order"));
        }
        let t = &self.training;
        t.pretrain_optimizer.validate()?;
        t.finetune_optimizer.validate()?;
        if t.batch_size == 0 {
            return Err(invalid_arg("batch_size must be >= 1"));
        }
        if !(t.mask_quantile > 0.0 && t.mask_quantile < 1.0) {
            return Err(invalid_arg("mask_quantile must lie in (0, 1)"));
        }
        if t.k == 0 {
            return Err(invalid_arg("k must be >= 1"));
        }
        if self.objectives.is_empty() || self.seeds.is_empty() {
            return Err(invalid_arg("objective grid and seed list must be non-empty"));
        }
        let placeholder = Thresholds { tau_entropy: 0.0, tau_prob: 0.0 };
        for name in &self.objectives {
            resolve_objective(name, &placeholder, t.k)?;
        }
        let mut seen = HashSet::new();
        for name in &self.objectives {
            if !seen.insert(name) {
                return Err(invalid_arg(format!("objective '{name}' listed twice")));
            }
        }
        let mut seen = HashSet::new();
        for s in &self.seeds {
            if !seen.insert(s) {
                return Err(invalid_arg(format!("seed {s} listed twice")));
            }
        }
        Ok(())
    }
}

/// SplitMix64 finalizer; decorrelates per-cell seeds from the base seeds.
pub fn derive_seed(base: u64, seed: u64, tag: u64) -> u64 {
    let mut z = base
        .wrapping_add(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(tag.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-token quadrant labels of `corpus` plus the thresholds that produced them.
#[derive(Debug, Clone)]
pub struct ConflictClassification {
    pub records: Vec<TokenRecord>,
    pub labels: Vec<Quadrant>,
    pub thresholds: Thresholds,
}

impl ConflictClassification {
    pub fn share(&self, q: Quadrant) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|&&l| l == q).count() as f64 / self.labels.len() as f64
    }
}

/// Gates this close to 1 come from a flat top-K and never count as low entropy.
pub const FLAT_GATE: f64 = 1.0 - 1e-9;

fn conflict_labels(records: &[TokenRecord], thresholds: &Thresholds) -> Result<Vec<Quadrant>> {
    let mut labels = label_records(records, thresholds, EntropyAxis::Gate)?;
    for (l, r) in labels.iter_mut().zip(records) {
        if r.gate >= FLAT_GATE {
            *l = match *l {
                Quadrant::ConfidentConflict => Quadrant::Exploratory,
                Quadrant::ConfidentCorrect => Quadrant::Other,
                other => other,
            };
        }
    }
    Ok(labels)
}

/// Thresholds at percentile `q` of the gate and of `p_target` over `corpus`, then the labels.
///
/// Unlike the plain quadrant partition, a token whose top-K is flat is never
/// low-entropy, so an untrained (uniform) model has no confident conflicts even
/// though every gate ties at the threshold.
pub fn classify_conflicts(
    params: &ToyModelParams,
    corpus: &Corpus,
    q: f64,
    k: usize,
) -> Result<ConflictClassification> {
    let records = score_corpus(params, corpus, k)?;
    if records.is_empty() {
        return Err(invalid_arg("corpus has no scorable positions"));
    }
    let thresholds = Thresholds::from_records(&records, q, EntropyAxis::Gate)?;
    let labels = conflict_labels(&records, &thresholds)?;
    Ok(ConflictClassification { records, labels, thresholds })
}

/// Labels `corpus` against thresholds computed elsewhere.
pub fn classify_with(
    params: &ToyModelParams,
    corpus: &Corpus,
    thresholds: Thresholds,
    k: usize,
) -> Result<ConflictClassification> {
    let records = score_corpus(params, corpus, k)?;
    let labels = conflict_labels(&records, &thresholds)?;
    Ok(ConflictClassification { records, labels, thresholds })
}

/// Sequences sampled from the model at temperature 1, each started from uniform random tokens.
pub fn self_rollouts(params: &ToyModelParams, num: usize, len: usize, seed: u64) -> Result<Corpus> {
    let cfg = params.config;
    if len <= cfg.context_len {
        return Err(invalid_arg("rollout length must exceed the context length"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seqs = Vec::with_capacity(num);
    for _ in 0..num {
        let mut seq: Vec<usize> = (0..cfg.context_len).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
        while seq.len() < len {
            let p = softmax(&forward(params, &seq[seq.len() - cfg.context_len..])?)?;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut tok = cfg.vocab_size - 1;
            for (t, &pt) in p.as_slice().iter().enumerate() {
                acc += pt;
                if u < acc {
                    tok = t;
                    break;
                }
            }
            seq.push(tok);
        }
        seqs.push(seq);
    }
    Ok(Corpus::new(seqs))
}

/// Fraction of scorable conflict injections labeled confident-conflict.
pub fn conflict_recall(domains: &Domains, cls: &ConflictClassification) -> Option<f64> {
    let conflict: HashSet<(usize, usize)> = domains
        .injections
        .iter()
        .filter(|i| i.kind == InjectionKind::Conflict)
        .map(|i| (i.sequence, i.position))
        .collect();
    let mut hit = 0usize;
    let mut total = 0usize;
    for (r, l) in cls.records.iter().zip(&cls.labels) {
        let seq: usize = r.source_id.strip_prefix("seq").and_then(|s| s.parse().ok())?;
        if conflict.contains(&(seq, r.position as usize)) {
            total += 1;
            if *l == Quadrant::ConfidentConflict {
                hit += 1;
            }
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Everything fixed before fine-tuning starts for one seed.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub seed: u64,
    pub domains: Domains,
    pub snapshot: ToyModelParams,
    pub pretrain_log: TrainLog,
    pub classification: ConflictClassification,
    pub eval_a_nll: f64,
    pub eval_b_nll: f64,
    pub eval_b_acc: f64,
}

/// Tags for [`derive_seed`].
const TAG_DOMAIN: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_PRETRAIN_BATCHES: u64 = 3;
const TAG_FINETUNE_BATCHES: u64 = 4;
const TAG_ROLLOUTS: u64 = 5;

/// The domain spec a given bench seed runs on.
pub fn seeded_domain(protocol: &BenchProtocol, seed: u64) -> DomainSpec {
    DomainSpec { seed: derive_seed(protocol.domain.seed, seed, TAG_DOMAIN), ..protocol.domain }
}

pub fn pretrain(protocol: &BenchProtocol, seed: u64) -> Result<Pretrained> {
    protocol.validate()?;
    let domain = seeded_domain(protocol, seed);
    let domains = generate_domains(&domain, &protocol.conflict, &protocol.sizes)?;
    let cfg = ModelConfig { seed: derive_seed(protocol.model.seed, seed, TAG_INIT), ..protocol.model };
    let t = &protocol.training;
    let run = TrainRun {
        optimizer: t.pretrain_optimizer,
        steps: t.pretrain_steps,
        batch_size: t.batch_size,
        sample_seed: derive_seed(0, seed, TAG_PRETRAIN_BATCHES),
        ..TrainRun::new(init_model(cfg)?, &domains.pretrain, ObjectiveSpec::cross_entropy())
    };
    let out = train(&run)?;
    let snapshot = out.params;
    let classification = classify_conflicts(&snapshot, &domains.finetune, t.mask_quantile, t.k)?;
    let n = cfg.context_len;
    let eval_a = evaluate(&snapshot, &domains.eval_a(n))?;
    let eval_b = evaluate(&snapshot, &nonempty(domains.eval_b(n))?)?;
    Ok(Pretrained {
        seed,
        domains,
        snapshot,
        pretrain_log: out.log,
        classification,
        eval_a_nll: eval_a.mean_nll,
        eval_b_nll: eval_b.mean_nll,
        eval_b_acc: eval_b.top1_accuracy,
    })
}

fn nonempty<T>(v: Vec<T>) -> Result<Vec<T>> {
    if v.is_empty() {
        Err(invalid_arg("novel-transition eval set is empty; raise novelty_rate, broad_fraction or eval_b"))
    } else {
        Ok(v)
    }
}

/// Landscape comparison of the fine-tune corpus against self-rollouts, both under the snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGap {
    pub finetune_share: f64,
    pub rollout_share: f64,
    pub conflict_recall: Option<f64>,
}

/// Rollouts are labeled with the fine-tune corpus thresholds, so both shares refer to the same quadrant.
pub fn landscape_gap(protocol: &BenchProtocol, pre: &Pretrained) -> Result<LandscapeGap> {
    let rollouts = self_rollouts(
        &pre.snapshot,
        protocol.training.rollout_sequences,
        protocol.sizes.seq_len,
        derive_seed(0, pre.seed, TAG_ROLLOUTS),
    )?;
    let rcls = classify_with(&pre.snapshot, &rollouts, pre.classification.thresholds, protocol.training.k)?;
    Ok(LandscapeGap {
        finetune_share: pre.classification.share(Quadrant::ConfidentConflict),
        rollout_share: rcls.share(Quadrant::ConfidentConflict),
        conflict_recall: conflict_recall(&pre.domains, &pre.classification),
    })
}

/// One (objective, seed) result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub objective: String,
    pub seed: u64,
    /// Held-out pretraining-chain NLL after fine-tuning minus before; positive means forgetting.
    pub retention_delta: f64,
    pub acquisition_nll: f64,
    pub acquisition_acc: f64,
    pub conflict_quadrant_share: f64,
    pub eval_a_nll_before: f64,
    pub eval_a_nll_after: f64,
    pub acquisition_nll_before: f64,
}

#[derive(Debug, Clone)]
pub struct CellOutput {
    pub cell: BenchCell,
    pub params: ToyModelParams,
    pub log: TrainLog,
    pub captures: Vec<TokenRecord>,
}

/// Fine-tunes the snapshot with an explicit objective.
pub fn finetune_with(
    protocol: &BenchProtocol,
    pre: &Pretrained,
    name: &str,
    objective: ObjectiveSpec,
) -> Result<CellOutput> {
    let t = &protocol.training;
    let n = protocol.model.context_len;
    let probe_corpus = Corpus::new(pre.domains.finetune.sequences.iter().take(t.probe_sequences).cloned().collect());
    let run = TrainRun {
        reference: objective.needs_reference().then_some(&pre.snapshot),
        optimizer: t.finetune_optimizer,
        steps: t.finetune_steps,
        batch_size: t.batch_size,
        capture_every: t.capture_every,
        capture: CaptureSource::Examples(probe_corpus.examples(n)),
        sample_seed: derive_seed(0, pre.seed, TAG_FINETUNE_BATCHES),
        ..TrainRun::new(pre.snapshot.clone(), &pre.domains.finetune, objective)
    };
    let out = train(&run)?;
    let eval_a = evaluate(&out.params, &pre.domains.eval_a(n))?;
    let eval_b = evaluate(&out.params, &nonempty(pre.domains.eval_b(n))?)?;
    let cell = BenchCell {
        objective: name.to_string(),
        seed: pre.seed,
        retention_delta: eval_a.mean_nll - pre.eval_a_nll,
        acquisition_nll: eval_b.mean_nll,
        acquisition_acc: eval_b.top1_accuracy,
        conflict_quadrant_share: pre.classification.share(Quadrant::ConfidentConflict),
        eval_a_nll_before: pre.eval_a_nll,
        eval_a_nll_after: eval_a.mean_nll,
        acquisition_nll_before: pre.eval_b_nll,
    };
    Ok(CellOutput { cell, params: out.params, log: out.log, captures: out.captures })
}

pub fn finetune(protocol: &BenchProtocol, pre: &Pretrained, name: &str) -> Result<CellOutput> {
    let spec = resolve_objective(name, &pre.classification.thresholds, protocol.training.k)?;
    finetune_with(protocol, pre, name, spec)
}

/// Pretrain, snapshot, fine-tune and evaluate one cell.
pub fn run_cell(protocol: &BenchProtocol, name: &str, seed: u64) -> Result<CellOutput> {
    let pre = pretrain(protocol, seed)?;
    finetune(protocol, &pre, name)
}

/// Per-seed facts fixed at fine-tune start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub thresholds: Thresholds,
    pub gap: LandscapeGap,
    pub eval_a_nll: f64,
    pub eval_b_nll: f64,
}

#[derive(Debug, Clone)]
pub struct BenchRun {
    /// Sorted by seed.
    pub seeds: Vec<SeedSummary>,
    /// Sorted by (objective, seed).
    pub cells: Vec<CellOutput>,
}

/// Runs every (objective, seed) cell on up to `threads` workers.
///
/// Pretraining is shared per seed. Results are sorted, so the output does not
/// depend on `threads`.
pub fn run_bench(protocol: &BenchProtocol, threads: usize) -> Result<BenchRun> {
    use rayon::prelude::*;
    protocol.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| crate::Error::InvalidInput(format!("thread pool: {e}")))?;
    pool.install(|| {
        let pres: Vec<Pretrained> = protocol.seeds.par_iter().map(|&s| pretrain(protocol, s)).collect::<Result<_>>()?;
        let mut seeds: Vec<SeedSummary> = pres
            .par_iter()
            .map(|p| {
                Ok(SeedSummary {
                    seed: p.seed,
                    thresholds: p.classification.thresholds,
                    gap: landscape_gap(protocol, p)?,
                    eval_a_nll: p.eval_a_nll,
                    eval_b_nll: p.eval_b_nll,
                })
            })
            .collect::<Result<_>>()?;
        seeds.sort_by_key(|s| s.seed);
        let jobs: Vec<(&str, &Pretrained)> =
            protocol.objectives.iter().flat_map(|o| pres.iter().map(move |p| (o.as_str(), p))).collect();
        let mut cells: Vec<CellOutput> =
            jobs.par_iter().map(|&(o, p)| finetune(protocol, p, o)).collect::<Result<_>>()?;
        cells.sort_by(|a, b| a.cell.objective.cmp(&b.cell.objective).then(a.cell.seed.cmp(&b.cell.seed)));
        Ok(BenchRun { seeds, cells })
    })
}
