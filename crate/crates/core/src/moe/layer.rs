use rand::Rng;

use super::dispatch::{DispatchPlan, Weighting};
use crate::error::{Error, Result};
use crate::numerics::{dropout, Graph, Real, Tensor, Var};

/// Bound router parameters: a shared linear trunk `h` with a type head
/// (`p`, over error types) and a dispatch head (`g`, over experts).
#[derive(Debug, Clone, Copy)]
pub struct RouterVars {
    pub wh: Var,
    pub bh: Var,
    pub wp: Var,
    pub bp: Var,
    pub wg: Var,
    pub bg: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct RouteOutput {
    pub p_logits: Var,
    pub p: Var,
    pub g: Var,
}

/// `h = x Wh + bh`, `p = softmax(h Wp + bp)`, `g = softmax(h Wg + bg)`.
pub fn route<F: Real>(graph: &mut Graph<F>, router: &RouterVars, x: Var) -> Result<RouteOutput> {
    let h = graph.matmul(x, router.wh)?;
    let h = graph.add_row(h, router.bh)?;
    let pl = graph.matmul(h, router.wp)?;
    let p_logits = graph.add_row(pl, router.bp)?;
    let p = graph.softmax(p_logits, 1)?;
    let gl = graph.matmul(h, router.wg)?;
    let gl = graph.add_row(gl, router.bg)?;
    let g = graph.softmax(gl, 1)?;
    Ok(RouteOutput { p_logits, p, g })
}

/// Bound expert feed-forward `W2 relu(W1 x + b1) + b2`.
///
/// A merged expert's hidden units are the expert's own block followed by a
/// copy of the shared feed-forward; `b2` is the expert bias and
/// `b2_shared` the shared one.
#[derive(Debug, Clone, Copy)]
pub struct ExpertVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub merged: Option<MergedPart>,
}

#[derive(Debug, Clone, Copy)]
pub struct MergedPart {
    pub d_expert: usize,
    pub b2_shared: Var,
}

/// Mixture output for every token: `Σ weight · E_k(x)` over non-overflow
/// selections. Rows with no surviving selection are zero.
///
/// For merged experts the shared block of selection `k` is scaled by
/// `weight_k / Σ weight` so that the shared feed-forward is added exactly once.
pub fn moe_forward<F: Real, R: Rng + ?Sized>(
    graph: &mut Graph<F>,
    x: Var,
    gate: Var,
    plan: &DispatchPlan,
    experts: &[ExpertVars],
    mut dropout_cfg: Option<(f64, &mut R)>,
) -> Result<Var> {
    let (n, d) = match graph.shape(x) {
        [n, d] => (*n, *d),
        other => return Err(Error::shape("moe_forward", other, &[plan.num_tokens, 0])),
    };
    let m = plan.num_experts;
    if n != plan.num_tokens || graph.shape(gate) != [n, m] || experts.len() != m {
        return Err(Error::shape("moe_forward", &[n, m, experts.len()], &[plan.num_tokens, plan.num_experts, m]));
    }

    // Flat list of kept selections, token-major.
    let mut flat = Vec::new();
    let mut groups = Vec::new();
    for (t, cs) in plan.choices.iter().enumerate() {
        groups.push((flat.len(), cs.len()));
        for c in cs {
            flat.push((t, *c));
        }
    }
    if flat.is_empty() {
        return Ok(graph.constant(Tensor::zeros(&[n, d])));
    }
    let gate_idx: Vec<usize> = flat.iter().map(|(t, c)| t * m + c.expert).collect();
    let weights = match plan.weighting {
        Weighting::Raw => graph.gather_flat(gate, &gate_idx)?,
        Weighting::One => graph.constant(Tensor::full(&[flat.len()], F::one())),
        Weighting::Normalized => {
            let raw = graph.gather_flat(gate, &gate_idx)?;
            graph.group_normalize(raw, &groups)?
        }
    };

    let any_merged = experts.iter().any(|e| e.merged.is_some());
    // Shared-block scale: weight / Σ weight over the token's non-overflow selections.
    let mut shared_pos = vec![usize::MAX; flat.len()];
    let shared_scale = if any_merged {
        let mut live = Vec::new();
        let mut live_groups = Vec::new();
        for (t, cs) in plan.choices.iter().enumerate() {
            let start = live.len();
            let first = groups[t].0;
            for (r, c) in cs.iter().enumerate() {
                if !c.overflow {
                    shared_pos[first + r] = live.len();
                    live.push(first + r);
                }
            }
            if live.len() > start {
                live_groups.push((start, live.len() - start));
            }
        }
        if live.is_empty() {
            None
        } else {
            let a = graph.gather_flat(weights, &live)?;
            Some(graph.group_normalize(a, &live_groups)?)
        }
    } else {
        None
    };

    let mut total: Option<Var> = None;
    for (e, ex) in experts.iter().enumerate() {
        let sel: Vec<usize> = (0..flat.len())
            .filter(|&i| flat[i].1.expert == e && !flat[i].1.overflow)
            .collect();
        if sel.is_empty() {
            continue;
        }
        let tokens: Vec<usize> = sel.iter().map(|&i| flat[i].0).collect();
        let xe = graph.gather_rows(x, &tokens)?;
        let a = graph.gather_flat(weights, &sel)?;
        let h = graph.matmul(xe, ex.w1)?;
        let h = graph.add_row(h, ex.b1)?;
        let mut h = graph.relu(h)?;
        if let Some((p, rng)) = dropout_cfg.as_mut() {
            h = dropout(graph, h, *p, *rng)?;
        }
        let y = match ex.merged {
            None => {
                let y = graph.matmul(h, ex.w2)?;
                let y = graph.add_row(y, ex.b2)?;
                graph.scale_rows(y, a)?
            }
            Some(mp) => {
                let scale = shared_scale.ok_or_else(|| Error::invalid("merged expert without live selections"))?;
                let c_idx: Vec<usize> = sel.iter().map(|&i| shared_pos[i]).collect();
                let c = graph.gather_flat(scale, &c_idx)?;
                let width = graph.shape(h)[1];
                let he = graph.slice_cols(h, 0, mp.d_expert)?;
                let hs = graph.slice_cols(h, mp.d_expert, width)?;
                let he = graph.scale_rows(he, a)?;
                let hs = graph.scale_rows(hs, c)?;
                let hh = graph.concat_cols(&[he, hs])?;
                let y = graph.matmul(hh, ex.w2)?;
                let be = graph.outer(a, ex.b2)?;
                let bs = graph.outer(c, mp.b2_shared)?;
                let y = graph.add(y, be)?;
                graph.add(y, bs)?
            }
        };
        let y = graph.scatter_add_rows(y, &tokens, n)?;
        total = Some(match total {
            None => y,
            Some(t) => graph.add(t, y)?,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => graph.constant(Tensor::zeros(&[n, d])),
    })
}
