//! Central finite-difference checks for the analytic gradients.
//!
//! The gate is detached: each token's weight is evaluated once at the base
//! point and held fixed while the logits or parameters are perturbed.

use crate::error::{invalid_arg, Result};
use crate::objectives::{token_loss, ObjectiveSpec};
use crate::probstats::log_softmax;
use crate::toylm::{forward, loss_and_grads, Example, ToyModelParams};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = crate::objectives::l2_norm(a).max(crate::objectives::l2_norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Token objective with a frozen weight `w`.
fn frozen_loss(spec: &ObjectiveSpec, w: f64, logits: &[f64], target: usize, ref_logits: Option<&[f64]>) -> Result<f64> {
    let logp = log_softmax(logits)?;
    let mut loss = w * -logp[target];
    if let (true, Some(r)) = (spec.needs_reference(), ref_logits) {
        let logr = log_softmax(r)?;
        let kl: f64 = logp.iter().zip(&logr).map(|(a, b)| a.exp() * (a - b)).sum();
        loss += spec.kl_coefficient * kl;
    }
    Ok(loss)
}

/// Central differences of the detached-gate token loss with respect to the logits.
pub fn logit_fd(
    spec: &ObjectiveSpec,
    logits: &[f64],
    target: usize,
    ref_logits: Option<&[f64]>,
    step: f64,
) -> Result<Vec<f64>> {
    if step.is_nan() || step <= 0.0 {
        return Err(invalid_arg("finite-difference step must be positive"));
    }
    let w = token_loss(spec, logits, target, ref_logits)?.weight;
    let mut z = logits.to_vec();
    (0..z.len())
        .map(|i| {
            let x = z[i];
            z[i] = x + step;
            let up = frozen_loss(spec, w, &z, target, ref_logits)?;
            z[i] = x - step;
            let down = frozen_loss(spec, w, &z, target, ref_logits)?;
            z[i] = x;
            Ok((up - down) / (2.0 * step))
        })
        .collect()
}

/// Relative error between [`token_loss`]'s gradient and [`logit_fd`].
pub fn check_logits(
    spec: &ObjectiveSpec,
    logits: &[f64],
    target: usize,
    ref_logits: Option<&[f64]>,
    step: f64,
) -> Result<f64> {
    let analytic = token_loss(spec, logits, target, ref_logits)?.grad_logits;
    Ok(relative_error(&analytic, &logit_fd(spec, logits, target, ref_logits, step)?))
}

/// Central differences over every model parameter, weights frozen per token.
pub fn params_fd(
    params: &ToyModelParams,
    batch: &[Example],
    spec: &ObjectiveSpec,
    reference: Option<&ToyModelParams>,
    step: f64,
) -> Result<ToyModelParams> {
    let base = loss_and_grads(params, batch, spec, reference)?;
    let weights: Vec<f64> = base.per_token.iter().map(|r| r.weight).collect();
    let scale = match spec.aggregation {
        crate::objectives::Aggregation::TokenMean => 1.0 / batch.len() as f64,
        crate::objectives::Aggregation::TokenSum => 1.0,
    };
    let total = |p: &ToyModelParams| -> Result<f64> {
        let mut s = 0.0;
        for (ex, &w) in batch.iter().zip(&weights) {
            let logits = forward(p, &ex.context)?;
            let r = match reference {
                Some(r) if spec.needs_reference() => Some(forward(r, &ex.context)?),
                _ => None,
            };
            s += frozen_loss(spec, w, &logits, ex.target, r.as_deref())?;
        }
        Ok(s * scale)
    };
    let mut probe = params.clone();
    let mut out = params.zeros_like();
    for t in 0..5 {
        for i in 0..params.tensors()[t].len() {
            let x = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = x + step;
            let up = total(&probe)?;
            probe.tensors_mut()[t][i] = x - step;
            let down = total(&probe)?;
            probe.tensors_mut()[t][i] = x;
            out.tensors_mut()[t][i] = (up - down) / (2.0 * step);
        }
    }
    Ok(out)
}

/// Largest per-tensor relative error between the backprop gradient and [`params_fd`].
pub fn check_params(
    params: &ToyModelParams,
    batch: &[Example],
    spec: &ObjectiveSpec,
    reference: Option<&ToyModelParams>,
    step: f64,
) -> Result<f64> {
    let analytic = loss_and_grads(params, batch, spec, reference)?.grads;
    let fd = params_fd(params, batch, spec, reference, step)?;
    Ok(analytic.tensors().iter().zip(fd.tensors()).map(|(a, f)| relative_error(a, f)).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ce_logit_check() {
        let z = [0.3, -1.2, 2.0, 0.0, 0.7];
        assert!(check_logits(&ObjectiveSpec::cross_entropy(), &z, 1, None, DEFAULT_STEP).unwrap() < 1e-7);
        assert!(logit_fd(&ObjectiveSpec::cross_entropy(), &z, 1, None, 0.0).is_err());
    }
}
