use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{capacity, K1Weighting, SecondExpertRule};
use crate::error::{Error, Result};
use crate::numerics::{topk, Real, Tensor};

/// When the load fractions `w` were measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsTiming {
    PreCapacity,
    PostCapacity,
}

/// Load statistics for the balance loss.
///
/// `w[i]` is the fraction of tokens whose first choice is expert `i` (so the
/// entries sum to 1 before capacity and at most 1 after); `v[i]` is the mean
/// gate score of expert `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadStats {
    pub w: Vec<f64>,
    pub v: Vec<f64>,
    /// Tokens left with no expert because every selection overflowed.
    pub dropped_tokens: usize,
    pub overflow_assignments: usize,
    pub timing: StatsTiming,
}

/// One selected expert of one token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub expert: usize,
    /// Raw gate value `g[token, expert]`.
    pub gate: f64,
    /// Combine weight applied to the expert output.
    pub weight: f64,
    pub overflow: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchPlan {
    pub num_tokens: usize,
    pub num_experts: usize,
    pub top_k: usize,
    /// `None` means unlimited.
    pub capacity: Option<usize>,
    /// Per token, kept selections in rank order (first choice first).
    pub choices: Vec<Vec<Choice>>,
    /// Per expert, the tokens it processes (ascending, no overflow).
    pub expert_tokens: Vec<Vec<usize>>,
    pub weighting: Weighting,
    pub stats: LoadStats,
}

/// How combine weights relate to gate values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Weight equals the raw gate value.
    Raw,
    /// Weight is 1.
    One,
    /// Gates normalized over each token's kept selections.
    Normalized,
}

impl DispatchPlan {
    pub fn first_choice(&self, token: usize) -> usize {
        self.choices[token][0].expert
    }

    /// Largest number of tokens any expert processes.
    pub fn max_load(&self) -> usize {
        self.expert_tokens.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// `(token, rank)` of every non-overflow selection, grouped by expert.
    pub fn assignments(&self) -> Vec<Vec<(usize, usize)>> {
        let mut out = vec![Vec::new(); self.num_experts];
        for (t, cs) in self.choices.iter().enumerate() {
            for (r, c) in cs.iter().enumerate() {
                if !c.overflow {
                    out[c.expert].push((t, r));
                }
            }
        }
        out
    }
}

fn gate_rows<F: Real>(g: &Tensor<F>) -> Result<(usize, usize, Vec<f64>)> {
    let (n, m) = g.dims2()?;
    if n == 0 {
        return Err(Error::invalid("dispatch of zero tokens"));
    }
    if m < 2 {
        return Err(Error::invalid(format!("dispatch needs at least 2 experts, got {m}")));
    }
    Ok((n, m, g.to_f64_vec()))
}

fn mean_gate(n: usize, m: usize, g: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; m];
    for row in g.chunks(m) {
        v.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    v.iter_mut().for_each(|a| *a /= n as f64);
    v
}

/// Marks selections beyond capacity as overflow. Selections are visited by
/// rank (all first choices, then all second choices), tokens ascending.
fn apply_capacity(choices: &mut [Vec<Choice>], m: usize, cap: Option<usize>) -> (Vec<Vec<usize>>, usize) {
    let mut load = vec![0usize; m];
    let mut overflow = 0;
    let max_rank = choices.iter().map(Vec::len).max().unwrap_or(0);
    for r in 0..max_rank {
        for cs in choices.iter_mut() {
            if let Some(c) = cs.get_mut(r) {
                if cap.is_some_and(|cap| load[c.expert] >= cap) {
                    c.overflow = true;
                    overflow += 1;
                } else {
                    load[c.expert] += 1;
                }
            }
        }
    }
    let mut expert_tokens = vec![Vec::new(); m];
    for (t, cs) in choices.iter().enumerate() {
        for c in cs.iter().filter(|c| !c.overflow) {
            expert_tokens[c.expert].push(t);
        }
    }
    (expert_tokens, overflow)
}

/// Top-1 dispatch. Statistics are taken after capacity truncation.
pub fn plan_dispatch_switch<F: Real>(
    g: &Tensor<F>,
    capacity_factor: Option<f64>,
    k1_weighting: K1Weighting,
) -> Result<DispatchPlan> {
    let (n, m, gv) = gate_rows(g)?;
    let weighting = match k1_weighting {
        K1Weighting::RawGate => Weighting::Raw,
        K1Weighting::Normalized => Weighting::One,
    };
    let mut choices = Vec::with_capacity(n);
    for row in gv.chunks(m) {
        let (_, idx) = topk(row, 1)?;
        let e = idx[0];
        choices.push(vec![Choice {
            expert: e,
            gate: row[e],
            weight: if weighting == Weighting::Raw { row[e] } else { 1.0 },
            overflow: false,
        }]);
    }
    let cap = capacity_factor.map(|cf| capacity(cf, n, 1, m));
    let (expert_tokens, overflow) = apply_capacity(&mut choices, m, cap);
    let mut w = vec![0.0; m];
    for cs in &choices {
        if !cs[0].overflow {
            w[cs[0].expert] += 1.0 / n as f64;
        }
    }
    let stats = LoadStats {
        w,
        v: mean_gate(n, m, &gv),
        dropped_tokens: overflow,
        overflow_assignments: overflow,
        timing: StatsTiming::PostCapacity,
    };
    Ok(DispatchPlan {
        num_tokens: n,
        num_experts: m,
        top_k: 1,
        capacity: cap,
        choices,
        expert_tokens,
        weighting,
        stats,
    })
}

/// Top-2 dispatch. The second expert is kept according to `rule`; combine
/// weights are the kept gates normalized per token. Statistics are taken
/// before capacity truncation.
pub fn plan_dispatch_gshard<F: Real, R: Rng + ?Sized>(
    g: &Tensor<F>,
    capacity_factor: Option<f64>,
    rule: SecondExpertRule,
    scale: f64,
    rng: &mut R,
) -> Result<DispatchPlan> {
    let (n, m, gv) = gate_rows(g)?;
    let mut choices = Vec::with_capacity(n);
    let mut w = vec![0.0; m];
    for row in gv.chunks(m) {
        let (_, idx) = topk(row, 2)?;
        let (e1, e2) = (idx[0], idx[1]);
        w[e1] += 1.0 / n as f64;
        let p2 = (scale * row[e2]).min(1.0);
        let keep = match rule {
            SecondExpertRule::Always => true,
            SecondExpertRule::Threshold => p2 >= 0.5,
            // Draw unconditionally so the stream does not depend on p2.
            SecondExpertRule::Sample => rng.random::<f64>() < p2,
        };
        let mut cs = vec![Choice {
            expert: e1,
            gate: row[e1],
            weight: 1.0,
            overflow: false,
        }];
        let denom = row[e1] + row[e2];
        if keep && denom > 0.0 {
            cs[0].weight = row[e1] / denom;
            cs.push(Choice {
                expert: e2,
                gate: row[e2],
                weight: row[e2] / denom,
                overflow: false,
            });
        }
        choices.push(cs);
    }
    let cap = capacity_factor.map(|cf| capacity(cf, n, 2, m));
    let (expert_tokens, overflow) = apply_capacity(&mut choices, m, cap);
    let dropped = choices.iter().filter(|cs| cs.iter().all(|c| c.overflow)).count();
    let stats = LoadStats {
        w,
        v: mean_gate(n, m, &gv),
        dropped_tokens: dropped,
        overflow_assignments: overflow,
        timing: StatsTiming::PreCapacity,
    };
    Ok(DispatchPlan {
        num_tokens: n,
        num_experts: m,
        top_k: 2,
        capacity: cap,
        choices,
        expert_tokens,
        weighting: Weighting::Normalized,
        stats,
    })
}
