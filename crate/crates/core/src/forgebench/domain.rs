//! Synthetic pretraining chain plus a fine-tuning corpus with injected conflicts and novel transitions.
//!
//! Every context (the last `markov_order` tokens) gets one of three row kinds:
//!
//! * peaked: one dominant token carries `peak_mass`, the rest is spread over all other tokens;
//! * broad: uniform over `broad_support` tokens, the high-entropy regime;
//! * medium: weights drawn uniformly from [0.5, 1) over `medium_support` tokens, then normalized.
//!
//! Conflicts are assigned per context: a `conflict_rate` share of peaked
//! contexts get a fixed non-dominant conflict token, and every fine-tuning
//! position in such a context is relabeled to it. Novelty is per position: in
//! a broad context the target is replaced by that context's off-support novel
//! token with probability `novelty_rate`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::toylm::{Corpus, Example, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    #[serde(default = "d::markov_order")]
    pub markov_order: usize,
    #[serde(default = "d::vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "d::peaked_fraction")]
    pub peaked_fraction: f64,
    #[serde(default = "d::peak_mass")]
    pub peak_mass: f64,
    /// Share of contexts with broad rows; the remainder after peaked and broad is medium.
    #[serde(default = "d::broad_fraction")]
    pub broad_fraction: f64,
    #[serde(default = "d::broad_support")]
    pub broad_support: usize,
    #[serde(default = "d::medium_support")]
    pub medium_support: usize,
    #[serde(default)]
    pub seed: u64,
}

mod d {
    pub fn markov_order() -> usize {
        2
    }
    pub fn vocab_size() -> usize {
        64
    }
    pub fn peaked_fraction() -> f64 {
        0.6
    }
    pub fn peak_mass() -> f64 {
        0.95
    }
    pub fn broad_fraction() -> f64 {
        0.2
    }
    pub fn broad_support() -> usize {
        32
    }
    pub fn medium_support() -> usize {
        3
    }
    pub fn conflict_rate() -> f64 {
        0.3
    }
    pub fn novelty_rate() -> f64 {
        0.3
    }
    pub fn seq_len() -> usize {
        32
    }
    pub fn sequences() -> usize {
        200
    }
    pub fn eval_sequences() -> usize {
        100
    }
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            markov_order: d::markov_order(),
            vocab_size: d::vocab_size(),
            peaked_fraction: d::peaked_fraction(),
            peak_mass: d::peak_mass(),
            broad_fraction: d::broad_fraction(),
            broad_support: d::broad_support(),
            medium_support: d::medium_support(),
            seed: 0,
        }
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid_arg(format!("{name} = {v} must lie in [0, 1]")))
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.markov_order == 0 {
            return Err(invalid_arg("markov_order must be >= 1"));
        }
        if self.vocab_size < 2 {
            return Err(invalid_arg("vocab_size must be >= 2"));
        }
        check_unit("peaked_fraction", self.peaked_fraction)?;
        check_unit("broad_fraction", self.broad_fraction)?;
        if self.peaked_fraction + self.broad_fraction > 1.0 + 1e-12 {
            return Err(invalid_arg("peaked_fraction + broad_fraction must not exceed 1"));
        }
        if !(self.peak_mass > 1.0 / self.vocab_size as f64 && self.peak_mass <= 1.0) {
            return Err(invalid_arg(format!("peak_mass {} must lie in (1/V, 1]", self.peak_mass)));
        }
        if self.broad_support == 0 || self.broad_support >= self.vocab_size {
            return Err(invalid_arg("broad_support must lie in 1..V so a novel token exists"));
        }
        if self.medium_support == 0 || self.medium_support > self.vocab_size {
            return Err(invalid_arg("medium_support must lie in 1..=V"));
        }
        let contexts = (self.vocab_size as f64).powi(self.markov_order as i32);
        if contexts > 1e6 {
            return Err(invalid_arg(format!("{contexts} contexts is too many for a dense table")));
        }
        Ok(())
    }

    pub fn num_contexts(&self) -> usize {
        self.vocab_size.pow(self.markov_order as u32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConflictSpec {
    #[serde(default = "d::conflict_rate")]
    pub conflict_rate: f64,
    #[serde(default = "d::novelty_rate")]
    pub novelty_rate: f64,
}

impl Default for ConflictSpec {
    fn default() -> Self {
        Self { conflict_rate: d::conflict_rate(), novelty_rate: d::novelty_rate() }
    }
}

impl ConflictSpec {
    pub fn validate(&self) -> Result<()> {
        check_unit("conflict_rate", self.conflict_rate)?;
        check_unit("novelty_rate", self.novelty_rate)?;
        if self.conflict_rate + self.novelty_rate > 1.0 + 1e-12 {
            return Err(invalid_arg(format!(
                "conflict_rate + novelty_rate = {} exceeds 1",
                self.conflict_rate + self.novelty_rate
            )));
        }
        Ok(())
    }
}

/// Sequence counts and length for each generated corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSizes {
    #[serde(default = "d::sequences")]
    pub pretrain: usize,
    #[serde(default = "d::sequences")]
    pub finetune: usize,
    #[serde(default = "d::eval_sequences")]
    pub eval_a: usize,
    #[serde(default = "d::eval_sequences")]
    pub eval_b: usize,
    #[serde(default = "d::seq_len")]
    pub seq_len: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        Self {
            pretrain: d::sequences(),
            finetune: d::sequences(),
            eval_a: d::eval_sequences(),
            eval_b: d::eval_sequences(),
            seq_len: d::seq_len(),
        }
    }
}

impl CorpusSizes {
    pub fn validate(&self, order: usize) -> Result<()> {
        for (name, n) in
            [("pretrain", self.pretrain), ("finetune", self.finetune), ("eval_a", self.eval_a), ("eval_b", self.eval_b)]
        {
            if n < 100 {
                return Err(invalid_arg(format!("{name} needs at least 100 sequences, got {n}")));
            }
        }
        if self.seq_len <= order {
            return Err(invalid_arg(format!("seq_len {} must exceed markov_order {order}", self.seq_len)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowKind {
    Peaked,
    Broad,
    Medium,
}

/// The chain's transition table and the per-context injection targets.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub order: usize,
    pub vocab_size: usize,
    /// Row-major `contexts × V`.
    pub probs: Vec<f64>,
    pub kinds: Vec<RowKind>,
    pub dominant: Vec<Option<TokenId>>,
    pub conflict_token: Vec<Option<TokenId>>,
    pub novel_token: Vec<Option<TokenId>>,
}

impl GroundTruth {
    pub fn num_contexts(&self) -> usize {
        self.kinds.len()
    }

    /// Index of the context formed by the last `order` tokens of `history`.
    pub fn context_index(&self, history: &[TokenId]) -> usize {
        history[history.len() - self.order..].iter().fold(0, |acc, &t| acc * self.vocab_size + t)
    }

    pub fn row(&self, ctx: usize) -> &[f64] {
        &self.probs[ctx * self.vocab_size..(ctx + 1) * self.vocab_size]
    }

    fn successor(&self, ctx: usize, tok: TokenId) -> usize {
        (ctx * self.vocab_size + tok) % self.num_contexts()
    }

    /// Expected share of positions in each row kind under the chain's stationary distribution.
    pub fn stationary_shares(&self) -> [(RowKind, f64); 3] {
        let n = self.num_contexts();
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..500 {
            let mut next = vec![0.0; n];
            for (c, &w) in pi.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (t, &p) in self.row(c).iter().enumerate() {
                    if p > 0.0 {
                        next[self.successor(c, t)] += w * p;
                    }
                }
            }
            pi = next;
        }
        let share = |k: RowKind| pi.iter().zip(&self.kinds).filter(|(_, &kk)| kk == k).map(|(w, _)| w).sum();
        [RowKind::Peaked, RowKind::Broad, RowKind::Medium].map(|k| (k, share(k)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InjectionKind {
    Conflict,
    Novel,
}

/// One relabeled fine-tuning position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Injection {
    pub sequence: usize,
    pub position: usize,
    pub kind: InjectionKind,
    pub context: usize,
    /// What the chain drew before relabeling.
    pub chain_token: TokenId,
    pub target: TokenId,
}

#[derive(Debug, Clone)]
pub struct Domains {
    pub pretrain: Corpus,
    pub finetune: Corpus,
    pub eval_a: Corpus,
    /// Held-out fine-tune-style sequences; only their novel positions are scored.
    pub eval_b_corpus: Corpus,
    pub eval_b_positions: Vec<(usize, usize)>,
    pub truth: GroundTruth,
    pub injections: Vec<Injection>,
}

impl Domains {
    /// Novel-transition pairs of the held-out set that a model with `context_len` can score.
    pub fn eval_b(&self, context_len: usize) -> Vec<Example> {
        let mut keep = self.eval_b_positions.clone();
        keep.sort_unstable();
        self.eval_b_corpus
            .examples(context_len)
            .into_iter()
            .filter(|ex| keep.binary_search(&(ex.sequence, ex.position)).is_ok())
            .collect()
    }

    pub fn eval_a(&self, context_len: usize) -> Vec<Example> {
        self.eval_a.examples(context_len)
    }
}

/// Independent generator streams; any two differ in at least one stream id.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Table = 1,
    Pretrain = 2,
    Finetune = 3,
    FinetuneNovelty = 4,
    EvalA = 5,
    EvalB = 6,
    EvalBNovelty = 7,
    Conflict = 8,
}

fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn counts(n: usize, peaked: f64, broad: f64) -> (usize, usize) {
    let np = ((peaked * n as f64).round() as usize).min(n);
    let nb = ((broad * n as f64).round() as usize).min(n - np);
    (np, nb)
}

pub fn build_truth(domain: &DomainSpec, conflict: &ConflictSpec) -> Result<GroundTruth> {
    domain.validate()?;
    conflict.validate()?;
    let v = domain.vocab_size;
    let n = domain.num_contexts();
    let mut rng = rng_for(domain.seed, Stream::Table);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (np, nb) = counts(n, domain.peaked_fraction, domain.broad_fraction);
    let mut kinds = vec![RowKind::Medium; n];
    for &c in &order[..np] {
        kinds[c] = RowKind::Peaked;
    }
    for &c in &order[np..np + nb] {
        kinds[c] = RowKind::Broad;
    }
    let peaked_ctx: Vec<usize> = order[..np].to_vec();
    let num_conflicted = ((conflict.conflict_rate * np as f64).round() as usize).min(np);

    let mut truth = GroundTruth {
        order: domain.markov_order,
        vocab_size: v,
        probs: vec![0.0; n * v],
        kinds,
        dominant: vec![None; n],
        conflict_token: vec![None; n],
        novel_token: vec![None; n],
    };
    let tokens: Vec<TokenId> = (0..v).collect();
    for c in 0..n {
        let row = &mut truth.probs[c * v..(c + 1) * v];
        match truth.kinds[c] {
            RowKind::Peaked => {
                // prefer a dominant token that leads out of the peaked regime, so
                // the chain does not lock into long deterministic runs
                let mut cand = tokens.clone();
                cand.shuffle(&mut rng);
                let dom =
                    cand.iter().copied().find(|&t| truth.kinds[(c * v + t) % n] != RowKind::Peaked).unwrap_or(cand[0]);
                let tail = if v > 1 { (1.0 - domain.peak_mass) / (v - 1) as f64 } else { 0.0 };
                row.fill(tail);
                row[dom] = domain.peak_mass;
                truth.dominant[c] = Some(dom);
            }
            RowKind::Broad => {
                let mut cand = tokens.clone();
                cand.shuffle(&mut rng);
                let w = 1.0 / domain.broad_support as f64;
                for &t in &cand[..domain.broad_support] {
                    row[t] = w;
                }
                let off = &cand[domain.broad_support..];
                truth.novel_token[c] = Some(off[rng.random_range(0..off.len())]);
            }
            RowKind::Medium => {
                let mut cand = tokens.clone();
                cand.shuffle(&mut rng);
                let ws: Vec<f64> = (0..domain.medium_support).map(|_| rng.random_range(0.5..1.0)).collect();
                let total: f64 = ws.iter().sum();
                for (&t, w) in cand.iter().zip(&ws) {
                    row[t] = w / total;
                }
            }
        }
    }
    // separate stream: the chain itself does not depend on the conflict rate
    let mut crng = rng_for(domain.seed, Stream::Conflict);
    for &c in &peaked_ctx[..num_conflicted] {
        let dom = truth.dominant[c].expect("peaked row has a dominant token");
        let off: Vec<TokenId> = tokens.iter().copied().filter(|&t| t != dom).collect();
        truth.conflict_token[c] = Some(off[crng.random_range(0..off.len())]);
    }
    Ok(truth)
}

fn draw(row: &[f64], rng: &mut ChaCha8Rng) -> TokenId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (t, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return t;
        }
    }
    // rounding slack: the last token with positive mass
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Samples `num` sequences from the chain. Relabeling, when enabled, draws its
/// coin flips from `novelty_rng` so the token stream itself is unaffected.
fn sample(
    truth: &GroundTruth,
    num: usize,
    len: usize,
    rng: &mut ChaCha8Rng,
    mut relabel: Option<(&ConflictSpec, &mut ChaCha8Rng, &mut Vec<Injection>)>,
) -> Corpus {
    let v = truth.vocab_size;
    let mut seqs = Vec::with_capacity(num);
    for si in 0..num {
        let mut seq: Vec<TokenId> = (0..truth.order).map(|_| rng.random_range(0..v)).collect();
        while seq.len() < len {
            let ctx = truth.context_index(&seq);
            let chain_token = draw(truth.row(ctx), rng);
            let mut tok = chain_token;
            if let Some((spec, nrng, log)) = relabel.as_mut() {
                let kind = if let Some(ct) = truth.conflict_token[ctx] {
                    tok = ct;
                    Some(InjectionKind::Conflict)
                } else if let Some(nt) = truth.novel_token[ctx] {
                    let flip: f64 = nrng.random();
                    if flip < spec.novelty_rate {
                        tok = nt;
                        Some(InjectionKind::Novel)
                    } else {
                        None
                    }
                } else {
                    None
                };
                if let Some(kind) = kind {
                    log.push(Injection {
                        sequence: si,
                        position: seq.len(),
                        kind,
                        context: ctx,
                        chain_token,
                        target: tok,
                    });
                }
            }
            seq.push(tok);
        }
        seqs.push(seq);
    }
    Corpus::new(seqs)
}

/// The pretraining chain sampled on its own stream; `ρ = ν = 0` fine-tuning reproduces it on the fine-tune stream.
pub fn sample_chain(truth: &GroundTruth, seed: u64, num: usize, len: usize) -> Corpus {
    sample(truth, num, len, &mut rng_for(seed, Stream::Finetune), None)
}

pub fn generate_domains(domain: &DomainSpec, conflict: &ConflictSpec, sizes: &CorpusSizes) -> Result<Domains> {
    sizes.validate(domain.markov_order)?;
    let truth = build_truth(domain, conflict)?;
    let seed = domain.seed;
    let len = sizes.seq_len;
    let pretrain = sample(&truth, sizes.pretrain, len, &mut rng_for(seed, Stream::Pretrain), None);
    let eval_a = sample(&truth, sizes.eval_a, len, &mut rng_for(seed, Stream::EvalA), None);

    let mut injections = Vec::new();
    let finetune = sample(
        &truth,
        sizes.finetune,
        len,
        &mut rng_for(seed, Stream::Finetune),
        Some((conflict, &mut rng_for(seed, Stream::FinetuneNovelty), &mut injections)),
    );
    let mut eval_b_log = Vec::new();
    let eval_b_corpus = sample(
        &truth,
        sizes.eval_b,
        len,
        &mut rng_for(seed, Stream::EvalB),
        Some((conflict, &mut rng_for(seed, Stream::EvalBNovelty), &mut eval_b_log)),
    );
    let eval_b_positions =
        eval_b_log.iter().filter(|i| i.kind == InjectionKind::Novel).map(|i| (i.sequence, i.position)).collect();
    Ok(Domains { pretrain, finetune, eval_a, eval_b_corpus, eval_b_positions, truth, injections })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DomainSpec {
        DomainSpec { vocab_size: 16, markov_order: 2, broad_support: 10, ..DomainSpec::default() }
    }

    #[test]
    fn rows_are_distributions_and_counts_exact() {
        let spec = small();
        let t = build_truth(&spec, &ConflictSpec::default()).unwrap();
        for c in 0..t.num_contexts() {
            let s: f64 = t.row(c).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let np = t.kinds.iter().filter(|&&k| k == RowKind::Peaked).count();
        assert_eq!(np, (0.6f64 * 256.0).round() as usize);
        let nc = t.conflict_token.iter().flatten().count();
        assert_eq!(nc, (0.3 * np as f64).round() as usize);
        for c in 0..t.num_contexts() {
            if let Some(ct) = t.conflict_token[c] {
                assert_eq!(t.kinds[c], RowKind::Peaked);
                assert_ne!(Some(ct), t.dominant[c]);
            }
            if let Some(nt) = t.novel_token[c] {
                assert_eq!(t.kinds[c], RowKind::Broad);
                assert_eq!(t.row(c)[nt], 0.0);
            }
        }
    }

    #[test]
    fn rates_must_sum_to_at_most_one() {
        let bad = ConflictSpec { conflict_rate: 0.7, novelty_rate: 0.4 };
        assert!(generate_domains(&small(), &bad, &CorpusSizes::default()).is_err());
        let tiny = CorpusSizes { finetune: 50, ..CorpusSizes::default() };
        assert!(generate_domains(&small(), &ConflictSpec::default(), &tiny).is_err());
    }

    #[test]
    fn no_injection_reproduces_chain_sampling() {
        let spec = small();
        let none = ConflictSpec { conflict_rate: 0.0, novelty_rate: 0.0 };
        let sizes = CorpusSizes::default();
        let d = generate_domains(&spec, &none, &sizes).unwrap();
        assert!(d.injections.is_empty());
        assert_eq!(d.finetune, sample_chain(&d.truth, spec.seed, sizes.finetune, sizes.seq_len));
        assert!(d.eval_b_positions.is_empty());
    }

    #[test]
    fn full_conflict_relabels_every_target() {
        let spec = DomainSpec { peaked_fraction: 1.0, broad_fraction: 0.0, ..small() };
        let all = ConflictSpec { conflict_rate: 1.0, novelty_rate: 0.0 };
        let d = generate_domains(&spec, &all, &CorpusSizes::default()).unwrap();
        for seq in &d.finetune.sequences {
            for t in spec.markov_order..seq.len() {
                let ctx = d.truth.context_index(&seq[..t]);
                assert_ne!(Some(seq[t]), d.truth.dominant[ctx]);
            }
        }
    }

    #[test]
    fn injections_match_the_table() {
        let d = generate_domains(&small(), &ConflictSpec::default(), &CorpusSizes::default()).unwrap();
        assert!(d.injections.iter().any(|i| i.kind == InjectionKind::Conflict));
        assert!(d.injections.iter().any(|i| i.kind == InjectionKind::Novel));
        for inj in &d.injections {
            let seq = &d.finetune.sequences[inj.sequence];
            assert_eq!(seq[inj.position], inj.target);
            let ctx = d.truth.context_index(&seq[..inj.position]);
            assert_eq!(ctx, inj.context);
            match inj.kind {
                InjectionKind::Conflict => {
                    assert_eq!(d.truth.kinds[ctx], RowKind::Peaked);
                    assert_ne!(Some(inj.target), d.truth.dominant[ctx]);
                }
                InjectionKind::Novel => assert_eq!(Some(inj.target), d.truth.novel_token[ctx]),
            }
        }
        let eb = d.eval_b(3);
        assert!(!eb.is_empty());
        for ex in &eb {
            let ctx = d.truth.context_index(&ex.context);
            assert_eq!(Some(ex.target), d.truth.novel_token[ctx]);
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_domains(&small(), &ConflictSpec::default(), &CorpusSizes::default()).unwrap();
        let b = generate_domains(&small(), &ConflictSpec::default(), &CorpusSizes::default()).unwrap();
        assert_eq!(a.finetune, b.finetune);
        assert_eq!(a.injections, b.injections);
        let shares = a.truth.stationary_shares();
        assert!((shares.iter().map(|s| s.1).sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
