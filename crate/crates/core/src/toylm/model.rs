//! Concatenated-context feedforward language model with hand-written backprop.
//!
//! ```text
//! x      = concat(E[c_1], …, E[c_n])            (n·d)
//! a      = tanh(b_h + W_hᵀ x)                   (h)
//! logits = b_o + W_oᵀ a                         (V)
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Example, TokenId};
use crate::error::{invalid_arg, Error, Result};
use crate::objectives::{l2_norm, token_loss, Aggregation, ObjectiveSpec, TokenLossResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "defaults::vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "defaults::context_len")]
    pub context_len: usize,
    #[serde(default = "defaults::embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "defaults::hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn vocab_size() -> usize {
        64
    }
    pub fn context_len() -> usize {
        3
    }
    pub fn embed_dim() -> usize {
        16
    }
    pub fn hidden_dim() -> usize {
        64
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: defaults::vocab_size(),
            context_len: defaults::context_len(),
            embed_dim: defaults::embed_dim(),
            hidden_dim: defaults::hidden_dim(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(invalid_arg(format!("vocab_size {} must be >= 2", self.vocab_size)));
        }
        for (name, v) in
            [("context_len", self.context_len), ("embed_dim", self.embed_dim), ("hidden_dim", self.hidden_dim)]
        {
            if v == 0 {
                return Err(invalid_arg(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.context_len * self.embed_dim
    }

    /// Lengths of the five parameter tensors in declaration order.
    pub fn tensor_lens(&self) -> [usize; 5] {
        let (v, h) = (self.vocab_size, self.hidden_dim);
        [v * self.embed_dim, self.input_dim() * h, h, h * v, v]
    }

    pub fn num_params(&self) -> usize {
        self.tensor_lens().iter().sum()
    }

    /// Same shape, ignoring the seed.
    pub fn same_shape(&self, other: &Self) -> bool {
        self.vocab_size == other.vocab_size
            && self.context_len == other.context_len
            && self.embed_dim == other.embed_dim
            && self.hidden_dim == other.hidden_dim
    }
}

/// Model parameters; also used as the gradient and optimizer-moment container.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelParams {
    pub config: ModelConfig,
    /// `V × d`, row-major.
    pub embedding: Vec<f64>,
    /// `(n·d) × h`, row-major.
    pub hidden_weight: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    /// `h × V`, row-major.
    pub out_weight: Vec<f64>,
    pub out_bias: Vec<f64>,
}

pub const TENSOR_NAMES: [&str; 5] = ["embedding", "hidden_weight", "hidden_bias", "out_weight", "out_bias"];

impl ToyModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let [e, w, b, o, ob] = config.tensor_lens();
        Ok(Self {
            config,
            embedding: vec![0.0; e],
            hidden_weight: vec![0.0; w],
            hidden_bias: vec![0.0; b],
            out_weight: vec![0.0; o],
            out_bias: vec![0.0; ob],
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("config already validated")
    }

    pub fn tensors(&self) -> [&[f64]; 5] {
        [&self.embedding, &self.hidden_weight, &self.hidden_bias, &self.out_weight, &self.out_bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [&mut self.embedding, &mut self.hidden_weight, &mut self.hidden_bias, &mut self.out_weight, &mut self.out_bias]
    }

    pub fn check_shapes(&self) -> Result<()> {
        self.config.validate()?;
        for ((t, len), name) in self.tensors().iter().zip(self.config.tensor_lens()).zip(TENSOR_NAMES) {
            if t.len() != len {
                return Err(Error::ShapeMismatch(format!("{name} has {} entries, expected {len}", t.len())));
            }
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.config.same_shape(&other.config)
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Seeded uniform(−s, s) init with `s = 1/√fan_in` per matrix; biases start at zero.
pub fn init_model(config: ModelConfig) -> Result<ToyModelParams> {
    let mut params = ToyModelParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let fan_ins = [config.vocab_size, config.input_dim(), config.hidden_dim];
    let matrices = [&mut params.embedding, &mut params.hidden_weight, &mut params.out_weight];
    for (m, fan_in) in matrices.into_iter().zip(fan_ins) {
        let s = 1.0 / (fan_in as f64).sqrt();
        for x in m.iter_mut() {
            *x = rng.random_range(-s..s);
        }
    }
    Ok(params)
}

/// Activations kept for the backward pass.
pub(crate) struct ForwardCache {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

fn check_context(params: &ToyModelParams, context: &[TokenId]) -> Result<()> {
    let cfg = &params.config;
    if context.len() != cfg.context_len {
        return Err(invalid_arg(format!("context has {} tokens, model expects {}", context.len(), cfg.context_len)));
    }
    if let Some(&bad) = context.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(invalid_arg(format!("token {bad} out of range for vocab {}", cfg.vocab_size)));
    }
    Ok(())
}

pub(crate) fn forward_cached(params: &ToyModelParams, context: &[TokenId]) -> Result<ForwardCache> {
    check_context(params, context)?;
    let cfg = &params.config;
    let (d, h, v) = (cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size);

    let mut input = Vec::with_capacity(cfg.input_dim());
    for &tok in context {
        input.extend_from_slice(&params.embedding[tok * d..(tok + 1) * d]);
    }

    let mut hidden = params.hidden_bias.clone();
    for (i, &xi) in input.iter().enumerate() {
        let row = &params.hidden_weight[i * h..(i + 1) * h];
        for (hj, wij) in hidden.iter_mut().zip(row) {
            *hj += xi * wij;
        }
    }
    for hj in &mut hidden {
        *hj = hj.tanh();
    }

    let mut logits = params.out_bias.clone();
    for (j, &aj) in hidden.iter().enumerate() {
        let row = &params.out_weight[j * v..(j + 1) * v];
        for (zv, ojv) in logits.iter_mut().zip(row) {
            *zv += aj * ojv;
        }
    }
    Ok(ForwardCache { input, hidden, logits })
}

/// Next-token logits for one context window.
pub fn forward(params: &ToyModelParams, context: &[TokenId]) -> Result<Vec<f64>> {
    let logits = forward_cached(params, context)?.logits;
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::InvalidInput("forward pass produced non-finite logits".into()));
    }
    Ok(logits)
}

/// Accumulates `∂L/∂θ` into `grads` given `∂L/∂logits` for one example.
pub(crate) fn backprop(
    params: &ToyModelParams,
    context: &[TokenId],
    cache: &ForwardCache,
    dlogits: &[f64],
    grads: &mut ToyModelParams,
) {
    let cfg = &params.config;
    let (d, h, v) = (cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size);

    for (g, dz) in grads.out_bias.iter_mut().zip(dlogits) {
        *g += dz;
    }
    let mut dhidden = vec![0.0; h];
    for (j, &aj) in cache.hidden.iter().enumerate() {
        let row = &params.out_weight[j * v..(j + 1) * v];
        let grow = &mut grads.out_weight[j * v..(j + 1) * v];
        let mut acc = 0.0;
        for ((g, &o), &dz) in grow.iter_mut().zip(row).zip(dlogits) {
            *g += aj * dz;
            acc += o * dz;
        }
        dhidden[j] = acc * (1.0 - aj * aj);
    }
    for (g, dh) in grads.hidden_bias.iter_mut().zip(&dhidden) {
        *g += dh;
    }
    for (i, &xi) in cache.input.iter().enumerate() {
        let row = &params.hidden_weight[i * h..(i + 1) * h];
        let grow = &mut grads.hidden_weight[i * h..(i + 1) * h];
        let mut acc = 0.0;
        for ((g, &w), &dh) in grow.iter_mut().zip(row).zip(&dhidden) {
            *g += xi * dh;
            acc += w * dh;
        }
        let (slot, k) = (i / d, i % d);
        grads.embedding[context[slot] * d + k] += acc;
    }
}

/// Batch objective value, exact parameter gradients and per-token diagnostics.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss: f64,
    pub grads: ToyModelParams,
    pub per_token: Vec<TokenLossResult>,
}

/// Batch-aggregated objective and its exact gradient (gate treated as a constant).
pub fn loss_and_grads(
    params: &ToyModelParams,
    batch: &[Example],
    objective: &ObjectiveSpec,
    ref_params: Option<&ToyModelParams>,
) -> Result<BatchResult> {
    loss_and_grads_with(
        params,
        batch,
        ref_params,
        |logits, target, ref_logits| token_loss(objective, logits, target, ref_logits),
        objective.aggregation,
        objective.needs_reference(),
    )
}

pub(crate) fn loss_and_grads_with<F>(
    params: &ToyModelParams,
    batch: &[Example],
    ref_params: Option<&ToyModelParams>,
    mut per_token: F,
    aggregation: Aggregation,
    needs_reference: bool,
) -> Result<BatchResult>
where
    F: FnMut(&[f64], TokenId, Option<&[f64]>) -> Result<TokenLossResult>,
{
    if batch.is_empty() {
        return Err(invalid_arg("batch must be non-empty"));
    }
    let reference = match (needs_reference, ref_params) {
        (true, None) => return Err(invalid_arg("objective needs reference parameters")),
        (true, Some(r)) if !r.same_shape(params) => {
            return Err(Error::ShapeMismatch("reference model shape differs".into()));
        }
        (true, Some(r)) => Some(r),
        (false, _) => None,
    };
    let scale = match aggregation {
        Aggregation::TokenMean => 1.0 / batch.len() as f64,
        Aggregation::TokenSum => 1.0,
    };

    let mut grads = params.zeros_like();
    let mut results = Vec::with_capacity(batch.len());
    let mut total = 0.0;
    let mut dlogits = vec![0.0; params.config.vocab_size];
    for ex in batch {
        let cache = forward_cached(params, &ex.context)?;
        let ref_logits = match reference {
            Some(r) => Some(forward(r, &ex.context)?),
            None => None,
        };
        let res = per_token(&cache.logits, ex.target, ref_logits.as_deref())?;
        total += res.loss;
        if res.grad_logits.iter().any(|&g| g != 0.0) {
            for (dz, g) in dlogits.iter_mut().zip(&res.grad_logits) {
                *dz = g * scale;
            }
            backprop(params, &ex.context, &cache, &dlogits, &mut grads);
        }
        results.push(res);
    }
    Ok(BatchResult { loss: total * scale, grads, per_token: results })
}

/// Mean NLL and top-1 accuracy on a set of pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mean_nll: f64,
    pub top1_accuracy: f64,
}

/// Order-invariant evaluation: per-example NLLs are summed in sorted order.
pub fn evaluate(params: &ToyModelParams, eval_set: &[Example]) -> Result<EvalMetrics> {
    if eval_set.is_empty() {
        return Err(invalid_arg("evaluation set must be non-empty"));
    }
    let mut nlls = Vec::with_capacity(eval_set.len());
    let mut correct = 0usize;
    for ex in eval_set {
        let logits = forward(params, &ex.context)?;
        if ex.target >= logits.len() {
            return Err(invalid_arg(format!("target {} out of range", ex.target)));
        }
        let logp = crate::probstats::log_softmax(&logits)?;
        nlls.push(-logp[ex.target]);
        if argmax(&logits) == ex.target {
            correct += 1;
        }
    }
    nlls.sort_unstable_by(f64::total_cmp);
    let n = eval_set.len() as f64;
    Ok(EvalMetrics { mean_nll: nlls.iter().sum::<f64>() / n, top1_accuracy: correct as f64 / n })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// L2 norm over every gradient entry.
pub fn grad_global_norm(grads: &ToyModelParams) -> f64 {
    let flat: Vec<f64> = grads.tensors().iter().flat_map(|t| t.iter().copied()).collect();
    l2_norm(&flat)
}
