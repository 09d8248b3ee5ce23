use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per error type: mean gate vector and primary-expert counts at one MoE
/// layer. Types with no tokens have `mean_gate == None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub layer: usize,
    pub num_experts: usize,
    pub mean_gate: Vec<Option<Vec<f64>>>,
    /// `assignments[t][e]`: tokens of type `t` whose first choice is `e`.
    pub assignments: Vec<Vec<usize>>,
    pub token_counts: Vec<usize>,
}

/// Accumulates gate rows by token type.
#[derive(Debug, Clone)]
pub struct RoutingAccumulator {
    layer: usize,
    m: usize,
    sums: Vec<Vec<f64>>,
    assignments: Vec<Vec<usize>>,
    counts: Vec<usize>,
}

impl RoutingAccumulator {
    pub fn new(layer: usize, num_types: usize, num_experts: usize) -> Self {
        Self {
            layer,
            m: num_experts,
            sums: vec![vec![0.0; num_experts]; num_types],
            assignments: vec![vec![0; num_experts]; num_types],
            counts: vec![0; num_types],
        }
    }

    /// Adds one token of type `label` with gate row `g` and first choice `expert`.
    pub fn add(&mut self, label: usize, g: &[f64], expert: usize) -> Result<()> {
        if label >= self.counts.len() || g.len() != self.m || expert >= self.m {
            return Err(Error::invalid(format!(
                "routing record out of range: type {label}, {} gates, expert {expert}",
                g.len()
            )));
        }
        for (s, x) in self.sums[label].iter_mut().zip(g) {
            *s += x;
        }
        self.assignments[label][expert] += 1;
        self.counts[label] += 1;
        Ok(())
    }

    pub fn finish(self) -> RoutingStats {
        let mean_gate = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(s, &c)| (c > 0).then(|| s.iter().map(|x| x / c as f64).collect()))
            .collect();
        RoutingStats {
            layer: self.layer,
            num_experts: self.m,
            mean_gate,
            assignments: self.assignments,
            token_counts: self.counts,
        }
    }
}

/// Routing statistics from explicit per-token records: `(type, gate row)`,
/// with the first choice taken as the arg-max gate (lowest index on ties).
pub fn routing_stats_from_rows(layer: usize, num_types: usize, rows: &[(usize, Vec<f64>)]) -> Result<RoutingStats> {
    let m = rows.first().map_or(0, |r| r.1.len());
    let mut acc = RoutingAccumulator::new(layer, num_types, m);
    for (t, g) in rows {
        let mut best = 0;
        for (i, &x) in g.iter().enumerate() {
            if x > g[best] {
                best = i;
            }
        }
        acc.add(*t, g, best)?;
    }
    Ok(acc.finish())
}

impl RoutingStats {
    /// Rows of present types, in type order.
    pub fn present_rows(&self) -> Vec<(usize, &[f64])> {
        self.mean_gate
            .iter()
            .enumerate()
            .filter_map(|(t, r)| r.as_deref().map(|r| (t, r)))
            .collect()
    }
}
