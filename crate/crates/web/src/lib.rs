//! Browser entry points. Each exported function takes plain values and
//! returns a JSON string; the `*_json` functions underneath are ordinary
//! Rust and are what the tests call.

use moece::corpus::{apply_edits, extract_edits, tokenize, type_edits, Edit};
use moece::eval::{hypothesis_edits, score};
use moece::moe::{balance_loss, capacity, plan_dispatch_gshard, plan_dispatch_switch, Choice, K1Weighting, Variant};
use moece::numerics::Tensor;
use moece::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

type Result<T> = std::result::Result<T, Error>;

/// Parses rows separated by newlines or `;`, values by whitespace or commas,
/// and scales each row to sum to one.
pub fn parse_gates(text: &str) -> Result<Tensor<f64>> {
    let rows: Vec<Vec<f64>> = text
        .split(['\n', ';'])
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .map(|r| {
            r.split(|c: char| c.is_whitespace() || c == ',')
                .filter(|v| !v.is_empty())
                .map(|v| v.parse::<f64>().map_err(|_| Error::InvalidArgument(format!("`{v}` is not a number"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let m = rows.first().map_or(0, Vec::len);
    if m < 2 {
        return Err(Error::InvalidArgument("need at least one row with two or more experts".into()));
    }
    let mut data = Vec::with_capacity(rows.len() * m);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != m {
            return Err(Error::InvalidArgument(format!("row {} has {} values, expected {m}", i + 1, r.len())));
        }
        if r.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::InvalidArgument(format!("row {} has a negative or non-finite value", i + 1)));
        }
        let s: f64 = r.iter().sum();
        if s <= 0.0 {
            return Err(Error::InvalidArgument(format!("row {} sums to zero", i + 1)));
        }
        data.extend(r.iter().map(|x| x / s));
    }
    Tensor::from_vec(&[rows.len(), m], data)
}

/// Random gate rows; larger `sharpness` concentrates each row on fewer experts.
pub fn random_gates_text(n: usize, m: usize, sharpness: f64, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let row: Vec<f64> = (0..m).map(|_| (sharpness * rng.random::<f64>()).exp()).collect();
            let s: f64 = row.iter().sum();
            row.iter().map(|x| format!("{:.3}", x / s)).collect::<Vec<_>>().join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Serialize)]
pub struct DispatchView {
    pub tokens: usize,
    pub experts: usize,
    pub top_k: usize,
    pub capacity: Option<usize>,
    pub choices: Vec<Vec<Choice>>,
    /// Kept assignments per expert.
    pub load: Vec<usize>,
    pub w: Vec<f64>,
    pub v: Vec<f64>,
    pub balance_loss: f64,
    pub dropped_tokens: usize,
    pub overflow_assignments: usize,
}

/// Plans dispatch for the gate rows in `gates`. A non-positive
/// `capacity_factor` disables the capacity limit.
pub fn dispatch_json(gates: &str, variant: &str, capacity_factor: f64, second_expert: &str, seed: u64) -> Result<String> {
    let g = parse_gates(gates)?;
    let variant: Variant = variant.parse()?;
    let cf = (capacity_factor > 0.0).then_some(capacity_factor);
    let plan = match variant {
        Variant::Switch => plan_dispatch_switch(&g, cf, K1Weighting::RawGate)?,
        Variant::Gshard => plan_dispatch_gshard(&g, cf, second_expert.parse()?, 2.0, &mut ChaCha8Rng::seed_from_u64(seed))?,
    };
    let (n, m) = g.dims2()?;
    let mut load = vec![0; m];
    for c in plan.choices.iter().flatten().filter(|c| !c.overflow) {
        load[c.expert] += 1;
    }
    let view = DispatchView {
        tokens: n,
        experts: m,
        top_k: plan.top_k,
        capacity: cf.map(|cf| capacity(cf, n, plan.top_k, m)),
        balance_loss: balance_loss(&plan.stats),
        load,
        w: plan.stats.w.clone(),
        v: plan.stats.v.clone(),
        dropped_tokens: plan.stats.dropped_tokens,
        overflow_assignments: plan.stats.overflow_assignments,
        choices: plan.choices,
    };
    Ok(serde_json::to_string(&view)?)
}

#[derive(Debug, Serialize)]
pub struct EditsView {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub edits: Vec<Edit>,
    /// Applying the edits to the source reproduces the target.
    pub round_trip: bool,
}

pub fn edits_json(source: &str, target: &str) -> Result<String> {
    let (s, t) = (tokenize(source), tokenize(target));
    let mut edits = extract_edits(&s, &t);
    type_edits(&mut edits, &s)?;
    let round_trip = apply_edits(&s, &edits)? == t;
    Ok(serde_json::to_string(&EditsView {
        source: s,
        target: t,
        edits,
        round_trip,
    })?)
}

#[derive(Debug, Serialize)]
pub struct ScoreView {
    pub hypothesis_edits: Vec<Edit>,
    pub gold_edits: Vec<Edit>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f05: f64,
}

/// Scores one corrected sentence against one reference correction.
pub fn score_json(source: &str, hypothesis: &str, reference: &str) -> Result<String> {
    let s = tokenize(source);
    let hyp = hypothesis_edits(&s, &tokenize(hypothesis))?;
    let gold = hypothesis_edits(&s, &tokenize(reference))?;
    let r = score(std::slice::from_ref(&hyp), std::slice::from_ref(&gold))?;
    Ok(serde_json::to_string(&ScoreView {
        hypothesis_edits: hyp,
        gold_edits: gold,
        tp: r.counts.tp,
        fp: r.counts.fp,
        fn_: r.counts.fn_,
        precision: r.precision,
        recall: r.recall,
        f05: r.f05,
    })?)
}

fn js(r: Result<String>) -> std::result::Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn dispatch(gates: &str, variant: &str, capacity_factor: f64, second_expert: &str, seed: u32) -> std::result::Result<String, JsValue> {
    js(dispatch_json(gates, variant, capacity_factor, second_expert, seed.into()))
}

#[wasm_bindgen]
pub fn random_gates(n: usize, m: usize, sharpness: f64, seed: u32) -> String {
    random_gates_text(n, m, sharpness, seed.into())
}

#[wasm_bindgen]
pub fn edits(source: &str, target: &str) -> std::result::Result<String, JsValue> {
    js(edits_json(source, target))
}

#[wasm_bindgen]
pub fn score_sentence(source: &str, hypothesis: &str, reference: &str) -> std::result::Result<String, JsValue> {
    js(score_json(source, hypothesis, reference))
}
