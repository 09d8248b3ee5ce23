use serde::{Deserialize, Serialize};

use super::dispatch::{LoadStats, StatsTiming};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

/// `M · Σ w_i v_i`: 1 under uniform routing, `M` when one expert takes
/// every token with gate 1.
pub fn balance_loss(stats: &LoadStats) -> f64 {
    let m = stats.w.len() as f64;
    m * stats.w.iter().zip(&stats.v).map(|(w, v)| w * v).sum::<f64>()
}

fn timed(stats: &LoadStats, want: StatsTiming, name: &str) -> Result<f64> {
    if stats.timing != want {
        return Err(Error::invalid(format!(
            "{name} expects {want:?} statistics, got {:?}",
            stats.timing
        )));
    }
    Ok(balance_loss(stats))
}

/// Balance loss on statistics measured before capacity truncation.
pub fn balance_loss_gshard(stats: &LoadStats) -> Result<f64> {
    timed(stats, StatsTiming::PreCapacity, "balance_loss_gshard")
}

/// Balance loss on statistics measured after capacity truncation.
pub fn balance_loss_switch(stats: &LoadStats) -> Result<f64> {
    timed(stats, StatsTiming::PostCapacity, "balance_loss_switch")
}

/// Differentiable balance loss: gradients reach the router through `v`
/// (the mean of `gate` rows); `w` is a constant.
pub fn balance_loss_graph<F: Real>(graph: &mut Graph<F>, gate: Var, stats: &LoadStats) -> Result<Var> {
    let m = stats.w.len();
    if graph.shape(gate).get(1) != Some(&m) {
        return Err(Error::shape("balance_loss", graph.shape(gate), &[0, m]));
    }
    let v = graph.mean_rows(gate)?;
    let w: Vec<F> = stats.w.iter().map(|&x| F::from_f64_lossy(x)).collect();
    let dot = graph.dot_const(v, &w)?;
    graph.scale(dot, F::from_usize(m).expect("expert count"))
}

/// Mean cross-entropy of type labels under the router's type head, given
/// its logits. Positions with `mask[i] == false` are skipped.
pub fn error_type_loss<F: Real>(graph: &mut Graph<F>, p_logits: Var, labels: &[usize], mask: Option<&[bool]>) -> Result<Var> {
    let targets = masked_targets(labels, mask)?;
    graph.cross_entropy(p_logits, &targets, Some(usize::MAX))
}

/// Same loss on probabilities: mean of `-ln p[i, label_i]` over unmasked rows.
pub fn error_type_loss_probs<F: Real>(p: &Tensor<F>, labels: &[usize], mask: Option<&[bool]>) -> Result<f64> {
    let (n, t) = p.dims2()?;
    let targets = masked_targets(labels, mask)?;
    if targets.len() != n {
        return Err(Error::shape("error_type_loss", &[n, t], &[targets.len()]));
    }
    let mut total = 0.0;
    let mut count = 0;
    for (i, &y) in targets.iter().enumerate() {
        if y == usize::MAX {
            continue;
        }
        if y >= t {
            return Err(Error::invalid(format!("label {y} outside {t} error types")));
        }
        total -= p.at2(i, y).as_f64().ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("error_type_loss: every position is masked"));
    }
    let loss = total / count as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "error_type_loss" });
    }
    Ok(loss)
}

fn masked_targets(labels: &[usize], mask: Option<&[bool]>) -> Result<Vec<usize>> {
    match mask {
        None => Ok(labels.to_vec()),
        Some(m) if m.len() == labels.len() => Ok(labels
            .iter()
            .zip(m)
            .map(|(&l, &keep)| if keep { l } else { usize::MAX })
            .collect()),
        Some(m) => Err(Error::shape("error_type_loss", &[labels.len()], &[m.len()])),
    }
}

/// Components of the training objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_e: Vec<f64>,
    pub l_b: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub total: f64,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// `total = L_c + α·mean(L_e) + β·mean(L_b)`. Both lists must have one
/// entry per MoE layer; a dense model passes `num_layers = 0`.
pub fn total_loss(l_c: f64, l_e: &[f64], l_b: &[f64], alpha: f64, beta: f64, num_layers: usize) -> Result<LossBreakdown> {
    if l_e.len() != num_layers || l_b.len() != num_layers {
        return Err(Error::invalid(format!(
            "expected {num_layers} per-layer losses, got {} type and {} balance terms",
            l_e.len(),
            l_b.len()
        )));
    }
    let total = l_c + alpha * mean(l_e) + beta * mean(l_b);
    if !total.is_finite() {
        return Err(Error::NonFinite { op: "total_loss" });
    }
    Ok(LossBreakdown {
        l_c,
        l_e: l_e.to_vec(),
        l_b: l_b.to_vec(),
        alpha,
        beta,
        total,
    })
}

impl LossBreakdown {
    pub fn mean_l_e(&self) -> f64 {
        mean(&self.l_e)
    }

    pub fn mean_l_b(&self) -> f64 {
        mean(&self.l_b)
    }
}

/// Graph form of [`total_loss`]; returns the scalar to differentiate.
pub fn total_loss_graph<F: Real>(graph: &mut Graph<F>, l_c: Var, l_e: &[Var], l_b: &[Var], alpha: f64, beta: f64) -> Result<Var> {
    if l_e.len() != l_b.len() {
        return Err(Error::invalid("per-layer loss lists differ in length"));
    }
    let mut total = l_c;
    for (terms, coef) in [(l_e, alpha), (l_b, beta)] {
        if terms.is_empty() || coef == 0.0 {
            continue;
        }
        let mut s = terms[0];
        for &t in &terms[1..] {
            s = graph.add(s, t)?;
        }
        let s = graph.scale(s, F::from_f64_lossy(coef / terms.len() as f64))?;
        total = graph.add(total, s)?;
    }
    Ok(total)
}
