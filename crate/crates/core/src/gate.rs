//! Log-space idea gate.
//!
//! Idea logits are read as independent Bernoulli probabilities
//! `p = sigmoid(z_idea)`. The gate is `max(alpha * ln(p + eps), beta)` and is
//! added to the token logits. The clamp bounds how far any single token can
//! be pushed down, so a confidently wrong idea head cannot remove a token
//! outright.

use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub alpha_max: f32,
    pub ramp_steps: usize,
    pub beta: f32,
    pub epsilon: f32,
    /// Gate strength used for decoding and final evaluation.
    pub inference_alpha: f32,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            alpha_max: 0.5,
            ramp_steps: 1000,
            beta: -2.0,
            epsilon: 1e-6,
            inference_alpha: 0.5,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha_max >= 0.0
            && self.ramp_steps >= 1
            && self.beta < 0.0
            && self.epsilon > 0.0
            && self.epsilon < 1.0
            && self.inference_alpha >= 0.0;
        if !ok {
            return Err(Error::Config(format!(
                "gate config requires alpha_max >= 0, ramp_steps >= 1, beta < 0, 0 < epsilon < 1, inference_alpha >= 0; got {self:?}"
            )));
        }
        Ok(())
    }

    /// Probability at or below which the gate sits on the clamp:
    /// `p + eps <= exp(beta / alpha)`.
    pub fn clamp_threshold(&self, alpha: f32) -> f64 {
        if alpha <= 0.0 {
            0.0
        } else {
            ((self.beta as f64 / alpha as f64).exp() - self.epsilon as f64).max(0.0)
        }
    }
}

/// Linear ramp: `alpha_max * min(1, step / ramp_steps)`.
pub fn alpha_at(step: usize, cfg: &GateConfig) -> f32 {
    let ramp = cfg.ramp_steps.max(1);
    let frac = step.min(ramp) as f64 / ramp as f64;
    (cfg.alpha_max as f64 * frac) as f32
}

/// Records the clamped gate for `z_idea` (any shape) on the tape.
pub fn compute_gate(tape: &mut Tape, z_idea: Var, alpha: f32, cfg: &GateConfig) -> Result<Var> {
    if let Some(bad) = tape.value(z_idea).data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("idea logits contain non-finite value {bad}")));
    }
    let p = tape.sigmoid(z_idea);
    let shifted = tape.add_scalar(p, cfg.epsilon);
    let log_p = tape.log(shifted)?;
    let scaled = tape.mul_scalar(log_p, alpha);
    Ok(tape.max_scalar(scaled, cfg.beta))
}

/// `z_token + gate`.
pub fn fuse(tape: &mut Tape, z_token: Var, gate: Var) -> Result<Var> {
    Ok(tape.add(z_token, gate)?)
}

/// Gate values for a plain slice of idea logits.
pub fn gate_values(z_idea: &[f32], alpha: f32, cfg: &GateConfig) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::vector(z_idea.to_vec()));
    let g = compute_gate(&mut tape, z, alpha, cfg)?;
    Ok(tape.value(g).data().to_vec())
}

/// Fused logits for plain slices.
pub fn fused_logits(z_token: &[f32], z_idea: &[f32], alpha: f32, cfg: &GateConfig) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let zt = tape.constant(Tensor::vector(z_token.to_vec()));
    let zi = tape.constant(Tensor::vector(z_idea.to_vec()));
    let g = compute_gate(&mut tape, zi, alpha, cfg)?;
    let f = fuse(&mut tape, zt, g)?;
    Ok(tape.value(f).data().to_vec())
}
