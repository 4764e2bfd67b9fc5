//! Per-token comparison of ungated and gated next-token distributions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::decode::next_logits;
use crate::gate::GateConfig;
use crate::model::Model;
use crate::tensor::softmax;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XrayRow {
    pub id: u32,
    pub token: String,
    pub p_base: f64,
    pub p_gated: f64,
    /// `100 * (p_gated - p_base) / p_base`.
    pub delta_pct: f64,
    pub gate_value: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XrayReport {
    pub prompt: String,
    pub alpha: f32,
    /// One row per vocabulary entry, in id order.
    pub rows: Vec<XrayRow>,
    /// Up to `top_k` rows with `delta_pct > 0`, largest first.
    pub boosted: Vec<XrayRow>,
    /// Up to `top_k` rows with `delta_pct < 0`, most negative first.
    pub suppressed: Vec<XrayRow>,
}

impl XrayReport {
    pub fn row(&self, token: &str) -> Option<&XrayRow> {
        self.rows.iter().find(|r| r.token == token)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["token", "p_base", "p_gated", "delta_pct", "gate_value"])?;
        for r in &self.rows {
            w.serialize((&r.token, r.p_base, r.p_gated, r.delta_pct, r.gate_value))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "prompt: \"{}\"  alpha={}", self.prompt, self.alpha);
        for (title, rows) in [("boosted", &self.boosted), ("suppressed", &self.suppressed)] {
            let _ = writeln!(out, "{title}:");
            for r in rows {
                let _ = writeln!(
                    out,
                    "  {:<16} p_base={:.4} p_gated={:.4} delta={:+.1}% gate={:.3}",
                    r.token, r.p_base, r.p_gated, r.delta_pct, r.gate_value
                );
            }
        }
        out
    }
}

/// `(p_base, p_gated, delta_pct)` per token for token logits and a gate.
pub fn compare(z_token: &[f32], gate: &[f32]) -> Vec<(f64, f64, f64)> {
    let fused: Vec<f32> = z_token.iter().zip(gate).map(|(z, g)| z + g).collect();
    let (base, gated) = (softmax(z_token), softmax(&fused));
    base.iter()
        .zip(&gated)
        .map(|(&b, &g)| {
            let (b, g) = (b as f64, g as f64);
            (b, g, if b > 0.0 { 100.0 * (g - b) / b } else { 0.0 })
        })
        .collect()
}

/// Runs one forward pass over `prompt` and reports how the gate at `alpha`
/// reshapes the distribution over the next token.
pub fn xray(
    model: &Model,
    vocab: &Vocab,
    prompt: &[u32],
    alpha: f32,
    gate_cfg: &GateConfig,
    top_k: usize,
) -> Result<XrayReport> {
    if !model.has_idea_head() {
        return Err(Error::Config("x-ray requires a model with an idea head".into()));
    }
    let step = next_logits(model, prompt, alpha, gate_cfg)?;
    let gate = step.gate.unwrap_or_else(|| vec![0.0; step.token.len()]);
    let rows: Vec<XrayRow> = compare(&step.token, &gate)
        .into_iter()
        .enumerate()
        .map(|(i, (p_base, p_gated, delta_pct))| XrayRow {
            id: i as u32,
            token: vocab.token(i as u32).to_string(),
            p_base,
            p_gated,
            delta_pct,
            gate_value: gate[i],
        })
        .collect();
    let mut order: Vec<&XrayRow> = rows.iter().collect();
    order.sort_by(|a, b| b.delta_pct.total_cmp(&a.delta_pct).then(a.id.cmp(&b.id)));
    let boosted = order.iter().filter(|r| r.delta_pct > 0.0).take(top_k).map(|r| (*r).clone()).collect();
    let suppressed = order.iter().rev().filter(|r| r.delta_pct < 0.0).take(top_k).map(|r| (*r).clone()).collect();
    Ok(XrayReport {
        prompt: crate::corpus::detokenize(prompt, vocab),
        alpha,
        rows,
        boosted,
        suppressed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamped_token_loses_probability() {
        // three tokens, only the last one sits on the clamp
        let rows = compare(&[1.0, 0.5, 0.8], &[0.0, 0.0, -2.0]);
        assert!(rows[2].2 < 0.0);
        assert!(rows[0].2 > 0.0 && rows[1].2 > 0.0);
        // oracle: p_gated(2) = e^{0.8-2} / (e^1 + e^0.5 + e^{-1.2})
        let expected = (-1.2f64).exp() / (1f64.exp() + 0.5f64.exp() + (-1.2f64).exp());
        assert!((rows[2].1 - expected).abs() < 1e-6);
    }

    #[test]
    fn zero_gate_changes_nothing() {
        for (_, _, d) in compare(&[0.3, -1.0, 2.0, 0.0], &[0.0; 4]) {
            assert_eq!(d, 0.0);
        }
    }
}
