//! Risk terms: cross-entropy, IRM and V-REx penalties, the environment
//! loss `L_E`, and the combined objective `L_E + delta * L_I`.
//!
//! Each term exists as a plain function over values and as a tape
//! builder for training.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Tape, Var, LOG_EPS};
use crate::error::{IgmError, Result};

fn check_finite(a: &Array2<f64>, what: &'static str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(IgmError::NonFinite(what))
    }
}

/// Mean over rows of `-sum_c t_c ln(p_c + 1e-12)`.
pub fn cross_entropy(probs: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
    check_finite(probs, "probabilities")?;
    check_finite(targets, "targets")?;
    if probs.dim() != targets.dim() {
        return Err(IgmError::DimensionMismatch {
            expected: probs.ncols(),
            actual: targets.ncols(),
            context: "cross_entropy targets",
        });
    }
    let n = probs.nrows().max(1) as f64;
    Ok(probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| -t * (p + LOG_EPS).ln())
        .sum::<f64>()
        / n)
}

/// `(d/dw CE(softmax(w z), t) at w = 1)^2` with one scale shared by the
/// whole batch.
pub fn irm_penalty(logits: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
    check_finite(logits, "logits")?;
    let p = softmax(logits);
    let n = logits.nrows().max(1) as f64;
    let slope: f64 = p
        .iter()
        .zip(targets)
        .zip(logits)
        .map(|((&p, &t), &z)| (p - t) * z)
        .sum::<f64>()
        / n;
    Ok(slope * slope)
}

/// Population variance of per-environment risks.
pub fn vrex_penalty(risks: &[f64]) -> Result<f64> {
    if risks.is_empty() {
        return Err(IgmError::Config("V-REx needs at least one environment".into()));
    }
    if risks.iter().any(|r| !r.is_finite()) {
        return Err(IgmError::NonFinite("risks"));
    }
    // shifting by the first risk keeps equal risks exactly zero
    let n = risks.len() as f64;
    let shifted: Vec<f64> = risks.iter().map(|r| r - risks[0]).collect();
    let mean = shifted.iter().sum::<f64>() / n;
    Ok(shifted.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n)
}

/// `sum_e (R^e + gamma * IRM^e) + mu * Var_e(R^e)`.
pub fn environment_loss(risks: &[f64], irm: &[f64], gamma: f64, mu: f64) -> Result<f64> {
    if risks.len() != irm.len() {
        return Err(IgmError::DimensionMismatch {
            expected: risks.len(),
            actual: irm.len(),
            context: "IRM penalties vs environments",
        });
    }
    let base: f64 = risks.iter().zip(irm).map(|(r, p)| r + gamma * p).sum();
    Ok(base + mu * vrex_penalty(risks)?)
}

pub fn total_loss(env_loss: f64, inv_loss: f64, delta: f64) -> f64 {
    env_loss + delta * inv_loss
}

/// Tape version of [`vrex_penalty`].
pub fn vrex_on_tape(tape: &mut Tape, risks: &[Var]) -> Var {
    let n = risks.len() as f64;
    let first = tape.scalar_value(risks[0]);
    let shifted: Vec<Var> = risks.iter().map(|&r| tape.affine(r, 1.0, -first)).collect();
    let s = tape.sum(&shifted);
    let mean = tape.scale(s, 1.0 / n);
    let sq: Vec<Var> = shifted
        .iter()
        .map(|&r| {
            let d = tape.sub(r, mean);
            tape.square(d)
        })
        .collect();
    let total = tape.sum(&sq);
    tape.scale(total, 1.0 / n)
}

/// Per-environment terms recorded on the tape.
#[derive(Debug, Clone)]
pub struct EnvTerms {
    pub risks: Vec<Var>,
    pub irm: Vec<Var>,
    pub vrex: Var,
    pub loss: Var,
}

/// Builds `L_E` from per-environment logits and targets.
pub fn environment_loss_on_tape(
    tape: &mut Tape,
    env_logits: &[(Var, Array2<f64>)],
    gamma: f64,
    mu: f64,
) -> EnvTerms {
    let mut risks = Vec::with_capacity(env_logits.len());
    let mut irm = Vec::with_capacity(env_logits.len());
    let mut parts = Vec::with_capacity(2 * env_logits.len() + 1);
    for (z, t) in env_logits {
        let r = tape.cross_entropy(*z, t.clone());
        let p = tape.irm_penalty(*z, t.clone());
        risks.push(r);
        irm.push(p);
        parts.push(r);
        if gamma != 0.0 {
            let w = tape.scale(p, gamma);
            parts.push(w);
        }
    }
    let vrex = vrex_on_tape(tape, &risks);
    if mu != 0.0 {
        let w = tape.scale(vrex, mu);
        parts.push(w);
    }
    let loss = tape.sum(&parts);
    EnvTerms {
        risks,
        irm,
        vrex,
        loss,
    }
}

/// All loss components of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub risks: Vec<f64>,
    pub irm: Vec<f64>,
    pub vrex: f64,
    pub env_loss: f64,
    pub inv_loss: f64,
    pub total: f64,
}

impl RiskReport {
    pub fn is_finite(&self) -> bool {
        self.risks.iter().chain(&self.irm).all(|x| x.is_finite())
            && [self.vrex, self.env_loss, self.inv_loss, self.total]
                .iter()
                .all(|x| x.is_finite())
    }
}
