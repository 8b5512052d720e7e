//! Token-level training objectives and their analytic logit gradients.
//!
//! Every objective has the form
//!
//! ```text
//! loss_t = w_t · CE_t + β_KL · KL(P_θ ‖ P_ref)
//! ```
//!
//! where `w_t` is a gate evaluated on the live distribution and treated as a
//! constant (stop-gradient). Plain cross-entropy is the gate `w_t ≡ 1`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::probstats::{log_softmax, softmax, NormMode, ProbVector, TokenDistribution};

/// Centre of the sigmoid gate, in gate units.
pub const SIGMOID_BETA: f64 = 0.17;
/// Steepness of the sigmoid gate.
pub const SIGMOID_ALPHA: f64 = 30.0;
/// KL coefficient of the KL-regularized baseline.
pub const SFT_KL_BETA: f64 = 0.5;
/// Entropy top-K used by the gate.
pub const DEFAULT_TOPK: usize = 20;

/// Per-token weighting function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", try_from = "RawGate")]
pub enum GateSpec {
    /// `w = 1`: plain cross-entropy.
    ConstantOne,
    /// `w = H̃`.
    Linear,
    /// `w = H̃^p`.
    Power { p_exponent: f64 },
    /// `w = σ(α (H̃ − β))`.
    Sigmoid { alpha: f64, beta: f64 },
    /// `w = 1[H̃ > τ_H]`.
    HardMask { tau_entropy: f64 },
    /// `w = p_target`.
    ProbWeight,
    /// `w = 0` iff `H̃ ≤ τ_H` and `p_target ≤ τ_p`, else 1.
    ConflictMask { tau_entropy: f64, tau_prob: f64 },
}

/// Flat wire form; serde's internally tagged enums do not reject stray keys on unit variants.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGate {
    kind: String,
    p_exponent: Option<f64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    tau_entropy: Option<f64>,
    tau_prob: Option<f64>,
}

impl TryFrom<RawGate> for GateSpec {
    type Error = String;

    fn try_from(r: RawGate) -> std::result::Result<Self, String> {
        let present = [
            ("p_exponent", r.p_exponent.is_some()),
            ("alpha", r.alpha.is_some()),
            ("beta", r.beta.is_some()),
            ("tau_entropy", r.tau_entropy.is_some()),
            ("tau_prob", r.tau_prob.is_some()),
        ];
        let allowed: &[&str] = match r.kind.as_str() {
            "constant-one" | "linear" | "prob-weight" => &[],
            "power" => &["p_exponent"],
            "sigmoid" => &["alpha", "beta"],
            "hard-mask" => &["tau_entropy"],
            "conflict-mask" => &["tau_entropy", "tau_prob"],
            other => return Err(format!("unknown gate kind `{other}`")),
        };
        if let Some((name, _)) = present.iter().find(|(n, p)| *p && !allowed.contains(n)) {
            return Err(format!("field `{name}` is not valid for gate kind `{}`", r.kind));
        }
        let need = |name: &str, v: Option<f64>| v.ok_or_else(|| format!("gate kind `{}` needs `{name}`", r.kind));
        Ok(match r.kind.as_str() {
            "constant-one" => Self::ConstantOne,
            "linear" => Self::Linear,
            "prob-weight" => Self::ProbWeight,
            "power" => Self::Power { p_exponent: need("p_exponent", r.p_exponent)? },
            "sigmoid" => {
                Self::Sigmoid { alpha: r.alpha.unwrap_or(SIGMOID_ALPHA), beta: r.beta.unwrap_or(SIGMOID_BETA) }
            }
            "hard-mask" => Self::HardMask { tau_entropy: need("tau_entropy", r.tau_entropy)? },
            _ => Self::ConflictMask {
                tau_entropy: need("tau_entropy", r.tau_entropy)?,
                tau_prob: need("tau_prob", r.tau_prob)?,
            },
        })
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid_arg(format!("{name} = {v} must lie in [0, 1]")))
    }
}

impl GateSpec {
    pub fn sigmoid() -> Self {
        Self::Sigmoid { alpha: SIGMOID_ALPHA, beta: SIGMOID_BETA }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Power { p_exponent } if !(p_exponent > 0.0 && p_exponent.is_finite()) => {
                Err(invalid_arg(format!("power exponent {p_exponent} must be positive")))
            }
            Self::Sigmoid { alpha, beta } if !(alpha.is_finite() && beta.is_finite()) => {
                Err(invalid_arg("sigmoid alpha and beta must be finite"))
            }
            Self::HardMask { tau_entropy } => check_unit("tau_entropy", tau_entropy),
            Self::ConflictMask { tau_entropy, tau_prob } => {
                check_unit("tau_entropy", tau_entropy)?;
                check_unit("tau_prob", tau_prob)
            }
            _ => Ok(()),
        }
    }
}

/// Evaluates the gate weight `w_t ∈ [0, 1]` for one token.
pub fn eval_gate(spec: &GateSpec, dist: &TokenDistribution) -> Result<f64> {
    spec.validate()?;
    let h = dist.gate;
    let w = match *spec {
        GateSpec::ConstantOne => 1.0,
        GateSpec::Linear => h,
        GateSpec::Power { p_exponent } => h.powf(p_exponent),
        GateSpec::Sigmoid { alpha, beta } => 1.0 / (1.0 + (-alpha * (h - beta)).exp()),
        GateSpec::HardMask { tau_entropy } => {
            if h > tau_entropy {
                1.0
            } else {
                0.0
            }
        }
        GateSpec::ProbWeight => dist.p_target,
        GateSpec::ConflictMask { tau_entropy, tau_prob } => {
            if h <= tau_entropy && dist.p_target <= tau_prob {
                0.0
            } else {
                1.0
            }
        }
    };
    Ok(w.clamp(0.0, 1.0))
}

/// How per-token losses are reduced over a batch or sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    TokenMean,
    TokenSum,
}

/// Declarative description of a training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub gate: GateSpec,
    #[serde(default)]
    pub kl_coefficient: f64,
    #[serde(default)]
    pub norm_mode: NormMode,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub aggregation: Aggregation,
}

fn default_k() -> usize {
    DEFAULT_TOPK
}

impl ObjectiveSpec {
    pub fn with_gate(gate: GateSpec) -> Self {
        Self {
            gate,
            kl_coefficient: 0.0,
            norm_mode: NormMode::ExactLn,
            k: DEFAULT_TOPK,
            aggregation: Aggregation::TokenMean,
        }
    }

    /// Plain cross-entropy (standard SFT).
    pub fn cross_entropy() -> Self {
        Self::with_gate(GateSpec::ConstantOne)
    }

    /// Linear entropy gate.
    pub fn eaft() -> Self {
        Self::with_gate(GateSpec::Linear)
    }

    pub fn eaft_power(p_exponent: f64) -> Self {
        Self::with_gate(GateSpec::Power { p_exponent })
    }

    pub fn eaft_sigmoid() -> Self {
        Self::with_gate(GateSpec::sigmoid())
    }

    pub fn hard_mask(tau_entropy: f64) -> Self {
        Self::with_gate(GateSpec::HardMask { tau_entropy })
    }

    pub fn conflict_mask(tau_entropy: f64, tau_prob: f64) -> Self {
        Self::with_gate(GateSpec::ConflictMask { tau_entropy, tau_prob })
    }

    /// Probability-weighted cross-entropy (DFT).
    pub fn dft() -> Self {
        Self::with_gate(GateSpec::ProbWeight)
    }

    /// Cross-entropy plus `beta · KL(P_θ ‖ P_ref)`.
    pub fn sft_kl(beta: f64) -> Self {
        Self { kl_coefficient: beta, ..Self::cross_entropy() }
    }

    pub fn with_aggregation(mut self, aggregation: Aggregation) -> Self {
        self.aggregation = aggregation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.gate.validate()?;
        if !(self.kl_coefficient >= 0.0 && self.kl_coefficient.is_finite()) {
            return Err(invalid_arg(format!("kl_coefficient {} must be >= 0", self.kl_coefficient)));
        }
        if self.k == 0 {
            return Err(invalid_arg("k must be >= 1"));
        }
        if self.norm_mode == NormMode::Fixed3 && self.k != crate::probstats::FIXED_NORM_K {
            return Err(invalid_arg("fixed-3.0 normalization requires k = 20"));
        }
        Ok(())
    }

    pub fn needs_reference(&self) -> bool {
        self.kl_coefficient > 0.0
    }
}

/// Loss, applied weight and logit gradient for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLossResult {
    pub loss: f64,
    pub weight: f64,
    pub grad_logits: Vec<f64>,
    pub grad_norm: f64,
    pub stats: TokenDistribution,
}

impl TokenLossResult {
    /// Cross-entropy of the target under the live distribution, `−ln p_t`.
    pub fn cross_entropy(&self) -> f64 {
        -self.stats.p_target.ln()
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-token objective value and its gradient with respect to the logits.
pub fn token_loss(
    spec: &ObjectiveSpec,
    logits: &[f64],
    target_id: usize,
    ref_logits: Option<&[f64]>,
) -> Result<TokenLossResult> {
    spec.validate()?;
    let v = logits.len();
    if target_id >= v {
        return Err(invalid_arg(format!("target {target_id} out of range for vocab {v}")));
    }
    let reference = match (spec.needs_reference(), ref_logits) {
        (true, None) => {
            return Err(invalid_arg("kl_coefficient > 0 requires reference logits"));
        }
        (true, Some(r)) if r.len() != v => {
            return Err(invalid_arg(format!("reference logits have length {}, expected {v}", r.len())));
        }
        (true, Some(r)) => Some(r),
        (false, _) => None,
    };

    let logp = log_softmax(logits)?;
    let stats = TokenDistribution::new(softmax(logits)?, target_id, spec.k, spec.norm_mode)?;
    let weight = eval_gate(&spec.gate, &stats)?;
    let ce = -logp[target_id];
    let p = stats.probs.as_slice();

    let mut loss = weight * ce;
    let mut grad = if weight == 0.0 {
        vec![0.0; v]
    } else {
        p.iter().enumerate().map(|(i, &pi)| weight * if i == target_id { pi - 1.0 } else { pi }).collect()
    };

    if let Some(r) = reference {
        let beta = spec.kl_coefficient;
        let logr = log_softmax(r)?;
        let diff: Vec<f64> = logp.iter().zip(&logr).map(|(a, b)| a - b).collect();
        let kl: f64 = p.iter().zip(&diff).map(|(pi, d)| pi * d).sum();
        loss += beta * kl.max(0.0);
        for ((g, pi), d) in grad.iter_mut().zip(p).zip(&diff) {
            *g += beta * pi * (d - kl);
        }
    }

    let grad_norm = l2_norm(&grad);
    Ok(TokenLossResult { loss, weight, grad_logits: grad, grad_norm, stats })
}

/// Gradient of [`token_loss`] with respect to the logits.
pub fn token_grad(
    spec: &ObjectiveSpec,
    logits: &[f64],
    target_id: usize,
    ref_logits: Option<&[f64]>,
) -> Result<Vec<f64>> {
    token_loss(spec, logits, target_id, ref_logits).map(|r| r.grad_logits)
}

/// Aggregated loss over a sequence of positions plus every per-token result.
pub fn sequence_loss<R: AsRef<[f64]>>(
    spec: &ObjectiveSpec,
    logit_rows: &[R],
    targets: &[usize],
    ref_rows: Option<&[R]>,
) -> Result<(f64, Vec<TokenLossResult>)> {
    if logit_rows.len() != targets.len() {
        return Err(invalid_arg(format!("{} logit rows but {} targets", logit_rows.len(), targets.len())));
    }
    if logit_rows.is_empty() {
        return Err(invalid_arg("sequence must have at least one position"));
    }
    if let Some(refs) = ref_rows {
        if refs.len() != logit_rows.len() {
            return Err(invalid_arg(format!("{} reference rows for {} positions", refs.len(), logit_rows.len())));
        }
    }
    let per_token = logit_rows
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(t, (row, &target))| {
            let r = ref_rows.map(|refs| refs[t].as_ref());
            token_loss(spec, row.as_ref(), target, r)
        })
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = per_token.iter().map(|r| r.loss).sum();
    let loss = match spec.aggregation {
        Aggregation::TokenSum => total,
        Aggregation::TokenMean => total / per_token.len() as f64,
    };
    Ok((loss, per_token))
}

/// `KL(p ‖ q) = Σ p ln(p / q)`.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.vocab_size() != q.vocab_size() {
        return Err(invalid_arg(format!("vocab mismatch: {} vs {}", p.vocab_size(), q.vocab_size())));
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.as_slice().iter().zip(q.as_slice()).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::DivergenceUndefined { index: i });
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// One point of the gradient-magnitude landscape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradPoint {
    pub p_target: f64,
    pub entropy_full: f64,
    pub grad_norm: f64,
}

/// Projects token results onto `(p_t, H_t, ‖∇‖)`.
pub fn grad_magnitude_landscape(records: &[TokenLossResult]) -> Vec<GradPoint> {
    records
        .iter()
        .map(|r| GradPoint { p_target: r.stats.p_target, entropy_full: r.stats.entropy_full, grad_norm: r.grad_norm })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(logits: &[f64], target: usize) -> TokenDistribution {
        TokenDistribution::from_logits(logits, target, 2.min(logits.len()), NormMode::ExactLn).unwrap()
    }

    fn dist_with_gate(gate: f64, p_target: f64) -> TokenDistribution {
        let mut d = dist(&[0.0, 0.0], 0);
        d.gate = gate;
        d.p_target = p_target;
        d
    }

    #[test]
    fn gate_examples() {
        let d = dist_with_gate(0.5, 0.3);
        assert_eq!(eval_gate(&GateSpec::Linear, &d).unwrap(), 0.5);
        assert_eq!(eval_gate(&GateSpec::Power { p_exponent: 2.0 }, &d).unwrap(), 0.25);
        let centre = dist_with_gate(0.17, 0.3);
        assert!((eval_gate(&GateSpec::sigmoid(), &centre).unwrap() - 0.5).abs() < 1e-15);
        let conflict = dist_with_gate(0.1, 0.01);
        let mask = GateSpec::ConflictMask { tau_entropy: 0.17, tau_prob: 0.05 };
        assert_eq!(eval_gate(&mask, &conflict).unwrap(), 0.0);
        assert_eq!(eval_gate(&mask, &dist_with_gate(0.1, 0.5)).unwrap(), 1.0);
        assert_eq!(eval_gate(&mask, &dist_with_gate(0.5, 0.01)).unwrap(), 1.0);
        let hard = GateSpec::HardMask { tau_entropy: 0.2 };
        assert_eq!(eval_gate(&hard, &dist_with_gate(0.2, 0.5)).unwrap(), 0.0);
        assert_eq!(eval_gate(&hard, &dist_with_gate(0.21, 0.5)).unwrap(), 1.0);
        assert_eq!(eval_gate(&GateSpec::ProbWeight, &d).unwrap(), 0.3);
        assert_eq!(eval_gate(&GateSpec::ConstantOne, &d).unwrap(), 1.0);
    }

    #[test]
    fn gate_validation() {
        let d = dist_with_gate(0.5, 0.5);
        assert!(eval_gate(&GateSpec::Power { p_exponent: 0.0 }, &d).is_err());
        assert!(eval_gate(&GateSpec::HardMask { tau_entropy: 1.5 }, &d).is_err());
        assert!(eval_gate(&GateSpec::Sigmoid { alpha: f64::NAN, beta: 0.1 }, &d).is_err());
    }

    #[test]
    fn gates_are_monotone_in_entropy() {
        let gates = [
            GateSpec::Linear,
            GateSpec::Power { p_exponent: 2.0 },
            GateSpec::Power { p_exponent: 3.0 },
            GateSpec::sigmoid(),
        ];
        for g in gates {
            let mut prev = -1.0;
            for i in 0..=200 {
                let w = eval_gate(&g, &dist_with_gate(i as f64 / 200.0, 0.5)).unwrap();
                assert!((0.0..=1.0).contains(&w));
                assert!(w >= prev, "{g:?} not monotone at {i}");
                prev = w;
            }
        }
    }

    #[test]
    fn token_loss_examples() {
        let ce = token_loss(&ObjectiveSpec::cross_entropy(), &[0.0, 0.0], 0, None).unwrap();
        assert!((ce.loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(ce.grad_logits, vec![-0.5, 0.5]);
        assert!((ce.grad_norm - 0.5f64.sqrt()).abs() < 1e-15);

        let dft = token_loss(&ObjectiveSpec::dft(), &[0.0, 0.0], 0, None).unwrap();
        assert!((dft.loss - 0.5 * 2f64.ln()).abs() < 1e-15);

        let mut peaked = vec![-40.0; 64];
        peaked[3] = 40.0;
        for target in [3, 10] {
            let r = token_loss(&ObjectiveSpec::eaft(), &peaked, target, None).unwrap();
            assert!(r.weight < 1e-30);
            assert!(r.loss < 1e-20, "loss {} for target {target}", r.loss);
        }
    }

    #[test]
    fn zero_weight_gives_exact_zero_gradient() {
        let spec = ObjectiveSpec::hard_mask(1.0);
        let r = token_loss(&spec, &[0.3, -1.0, 2.0], 1, None).unwrap();
        assert_eq!(r.weight, 0.0);
        assert!(r.grad_logits.iter().all(|&g| g == 0.0));
        assert_eq!(r.grad_norm, 0.0);
    }

    #[test]
    fn reference_required_for_kl() {
        let spec = ObjectiveSpec::sft_kl(SFT_KL_BETA);
        assert!(token_loss(&spec, &[0.0, 1.0], 0, None).is_err());
        assert!(token_loss(&spec, &[0.0, 1.0], 0, Some(&[0.0])).is_err());
        let same = token_loss(&spec, &[0.0, 1.0], 0, Some(&[0.0, 1.0])).unwrap();
        let ce = token_loss(&ObjectiveSpec::cross_entropy(), &[0.0, 1.0], 0, None).unwrap();
        assert!((same.loss - ce.loss).abs() < 1e-15);
    }

    #[test]
    fn token_target_out_of_range() {
        assert!(token_loss(&ObjectiveSpec::cross_entropy(), &[0.0, 0.0], 2, None).is_err());
    }

    #[test]
    fn sequence_loss_examples() {
        let spec = ObjectiveSpec::eaft();
        let rows = vec![vec![0.2, -0.4, 1.0], vec![0.2, -0.4, 1.0]];
        let (single, _) = sequence_loss(&spec, &rows[..1], &[2], None).unwrap();
        let tok = token_loss(&spec, &rows[0], 2, None).unwrap();
        assert_eq!(single, tok.loss);
        let (mean, per) = sequence_loss(&spec, &rows, &[2, 2], None).unwrap();
        let (sum, _) = sequence_loss(&spec.with_aggregation(Aggregation::TokenSum), &rows, &[2, 2], None).unwrap();
        assert_eq!(per.len(), 2);
        assert!((sum - 2.0 * mean).abs() < 1e-15);
        assert!(sequence_loss(&spec, &rows, &[2], None).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = ProbVector::new(vec![0.3, 0.7]).unwrap();
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let half = ProbVector::uniform(2).unwrap();
        let one = ProbVector::one_hot(2, 0).unwrap();
        assert!((kl_divergence(&one, &half).unwrap() - 2f64.ln()).abs() < 1e-15);
        let p = ProbVector::new(vec![0.75, 0.25]).unwrap();
        // 0.75 ln 1.5 + 0.25 ln 0.5
        assert!((kl_divergence(&p, &half).unwrap() - 0.130_812_035_941_137_9).abs() < 1e-12);
        assert!(matches!(kl_divergence(&half, &one), Err(Error::DivergenceUndefined { index: 1 })));
    }

    #[test]
    fn landscape_projection_examples() {
        let ce = token_loss(&ObjectiveSpec::cross_entropy(), &[0.0, 0.0], 0, None).unwrap();
        let pts = grad_magnitude_landscape(std::slice::from_ref(&ce));
        assert!((pts[0].grad_norm - 0.707_106_781_186_547_5).abs() < 1e-15);
        let masked = token_loss(&ObjectiveSpec::hard_mask(1.0), &[0.0, 0.0], 0, None).unwrap();
        assert_eq!(grad_magnitude_landscape(&[masked])[0].grad_norm, 0.0);

        let logits = [1.0, -0.5, 0.25, 2.0];
        let ce = token_loss(&ObjectiveSpec::cross_entropy(), &logits, 1, None).unwrap();
        let eaft = token_loss(&ObjectiveSpec { k: 3, ..ObjectiveSpec::eaft() }, &logits, 1, None).unwrap();
        assert!((eaft.grad_norm / ce.grad_norm - eaft.weight).abs() < 1e-12);
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let a: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (p, q) = (softmax(&a).unwrap(), softmax(&b).unwrap());
            let kl = kl_divergence(&p, &q).unwrap();
            assert!(kl >= 0.0);
            let max_diff = p.as_slice().iter().zip(q.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            if kl == 0.0 {
                assert!(max_diff < 1e-12);
            }
        }
    }

    #[test]
    fn gate_spec_json_shape() {
        let g: GateSpec = serde_json::from_str(r#"{"kind":"power","p_exponent":3}"#).unwrap();
        assert_eq!(g, GateSpec::Power { p_exponent: 3.0 });
        let g: GateSpec = serde_json::from_str(r#"{"kind":"sigmoid"}"#).unwrap();
        assert_eq!(g, GateSpec::sigmoid());
        assert!(serde_json::from_str::<GateSpec>(r#"{"kind":"linear","alpha":1}"#).is_err());
        let spec: ObjectiveSpec = serde_json::from_str(r#"{"gate":{"kind":"linear"}}"#).unwrap();
        assert_eq!(spec, ObjectiveSpec::eaft());
        assert!(serde_json::from_str::<ObjectiveSpec>(r#"{"gate":{"kind":"linear"},"kk":3}"#).is_err());
    }
}
