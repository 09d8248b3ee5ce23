//! Fast invariant suites run by `moece selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{apply_edits, extract_edits, generate_corpus, tokenize, type_edits, ErrorType};
use crate::error::Result;
use crate::eval::{f05, score};
use crate::moe::{
    balance_loss_gshard, balance_loss_switch, capacity, expand_dense_to_moe, merge_shared_into_experts, plan_dispatch_gshard,
    plan_dispatch_switch, K1Weighting, MoeConfig, SecondExpertRule, Sharing, Variant,
};
use crate::numerics::{grad_check, Graph, Real, ScalarFn, Tensor, Var};
use crate::transformer::{ModelConfig, RunMode, Seq2SeqModel, Session};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

type Suite = fn() -> Result<(bool, String)>;

/// Runs every suite; an error inside a suite counts as a failure.
pub fn run_all() -> Vec<SuiteResult> {
    let suites: [(&'static str, Suite); 8] = [
        ("numerics.grad_check", numerics),
        ("moe.balance_identities", balance),
        ("moe.capacity", capacity_suite),
        ("moe.keep_rate", keep_rate),
        ("moe.merge_equivalence", merge),
        ("eval.scorer", scorer),
        ("corpus.extraction", extraction),
        ("corpus.generation", generation),
    ];
    suites
        .iter()
        .map(|&(name, f)| match f() {
            Ok((pass, detail)) => SuiteResult { name, pass, detail },
            Err(e) => SuiteResult {
                name,
                pass: false,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}

struct Composite {
    targets: Vec<usize>,
}

impl ScalarFn for Composite {
    fn eval<F: Real>(&self, g: &mut Graph<F>, v: &[Var]) -> Result<Var> {
        let h = g.matmul(v[0], v[1])?;
        let h = g.rms_norm(h, v[2], 1e-6)?;
        let p = g.softmax(h, 1)?;
        let l = g.matmul(p, v[3])?;
        g.cross_entropy(l, &self.targets, None)
    }
}

fn numerics() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let f = Composite { targets: vec![0, 2, 1, 3, 2] };
    let inputs = vec![
        Tensor::randn(&[5, 4], 1.0, &mut rng),
        Tensor::randn(&[4, 6], 0.5, &mut rng),
        Tensor::randn(&[6], 0.2, &mut rng).map(|x| x + 1.0),
        Tensor::randn(&[6, 4], 1.0, &mut rng),
    ];
    let a = grad_check::<f64, _>(&f, &inputs, 1e-5, 1e-5)?;
    let b = grad_check::<f32, _>(&f, &inputs, 1e-5, 1e-3)?;
    Ok((
        a.pass && b.pass,
        format!("rel err f64 {:.1e}, f32 {:.1e}", a.max_rel_err, b.max_rel_err),
    ))
}

fn balance() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for m in [2usize, 4, 7] {
        let n = 4 * m;
        let uniform: Vec<f64> = (0..n * m).map(|k| 1.0 / m as f64 + if k % m == (k / m) % m { 1e-12 } else { 0.0 }).collect();
        let hot: Vec<f64> = (0..n * m).map(|k| if k % m == 0 { 1.0 } else { 0.0 }).collect();
        for (d, want) in [(uniform, 1.0), (hot, m as f64)] {
            let g = Tensor::from_vec(&[n, m], d)?;
            let st = plan_dispatch_switch(&g, None, K1Weighting::RawGate)?;
            let gs = plan_dispatch_gshard(&g, None, SecondExpertRule::Always, 2.0, &mut ChaCha8Rng::seed_from_u64(0))?;
            worst = worst
                .max((balance_loss_switch(&st.stats)? - want).abs())
                .max((balance_loss_gshard(&gs.stats)? - want).abs());
        }
    }
    Ok((worst < 1e-6, format!("max deviation {worst:.1e}")))
}

fn random_gates(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let mut d = Vec::with_capacity(n * m);
    for _ in 0..n {
        let row: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = row.iter().sum();
        d.extend(row.iter().map(|x| x / s));
    }
    Tensor::from_vec(&[n, m], d)
}

fn capacity_suite() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut violations = 0;
    for t in 0..1000 {
        let (n, m) = (rng.random_range(1..25), rng.random_range(2..8));
        let cf = rng.random_range(0.25..2.0);
        let g = random_gates(n, m, &mut rng)?;
        let (plan, k) = if t % 2 == 0 {
            (plan_dispatch_switch(&g, Some(cf), K1Weighting::RawGate)?, 1)
        } else {
            (plan_dispatch_gshard(&g, Some(cf), SecondExpertRule::Sample, 2.0, &mut rng)?, 2)
        };
        if plan.max_load() > capacity(cf, n, k, m) {
            violations += 1;
        }
    }
    Ok((violations == 0, format!("{violations} of 1000 plans over capacity")))
}

fn keep_rate() -> Result<(bool, String)> {
    let n = 10_000;
    let d: Vec<f64> = (0..n).flat_map(|_| [0.5, 0.25, 0.15, 0.10]).collect();
    let g = Tensor::from_vec(&[n, 4], d)?;
    let plan = plan_dispatch_gshard(&g, None, SecondExpertRule::Sample, 2.0, &mut ChaCha8Rng::seed_from_u64(13))?;
    let rate = plan.choices.iter().filter(|c| c.len() == 2).count() as f64 / n as f64;
    Ok(((rate - 0.5).abs() < 0.02, format!("keep rate {rate:.3}")))
}

fn merge() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = ModelConfig {
        vocab_size: 20,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        enc_layers: 1,
        dec_layers: 2,
        max_len: 10,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let dense: Seq2SeqModel<f64> = Seq2SeqModel::new_dense(cfg, &mut rng)?;
    let mut worst: f64 = 0.0;
    for variant in [Variant::Switch, Variant::Gshard] {
        let moe = MoeConfig {
            variant,
            num_experts: 3,
            d_expert: 16,
            router_hidden: 4,
            sharing: Sharing::Layer,
            expert_dropout: 0.0,
            expert_init_std: 0.3,
            ..MoeConfig::default()
        };
        let (model, _) = expand_dense_to_moe(&dense, &moe, &mut rng)?;
        let merged = merge_shared_into_experts(&model)?;
        for _ in 0..10 {
            let src: Vec<usize> = (0..rng.random_range(1..8)).map(|_| rng.random_range(4..20)).collect();
            let dec: Vec<usize> = (0..rng.random_range(1..8)).map(|_| rng.random_range(4..20)).collect();
            let run = |m: &Seq2SeqModel<f64>| -> Result<Tensor<f64>> {
                let mut s = Session::new(m, false);
                let mut mode = RunMode::eval().with_second_expert(SecondExpertRule::Always);
                let o = s.forward(std::slice::from_ref(&src), std::slice::from_ref(&dec), &mut mode)?;
                Ok(s.graph.value(o.logits).clone())
            };
            worst = worst.max(run(&model)?.max_abs_diff(&run(&merged)?)?);
        }
    }
    Ok((worst < 1e-9, format!("max abs logit difference {worst:.1e}")))
}

fn scorer() -> Result<(bool, String)> {
    let f = f05(72.43, 48.38);
    let src = tokenize("he go to the school");
    let tgt = tokenize("he goes to school");
    let mut gold = extract_edits(&src, &tgt);
    type_edits(&mut gold, &src)?;
    let same = score(&[gold.clone()], &[gold.clone()])?;
    let none = score(&[Vec::new()], &[gold])?;
    let pass = (f - 65.88).abs() < 0.01 && same.f05 == 1.0 && none.counts.tp == 0 && none.counts.fn_ == 2;
    Ok((pass, format!("F0.5(72.43, 48.38) = {f:.2}")))
}

fn extraction() -> Result<(bool, String)> {
    let src = tokenize("The rich people will buy a car but the poor people will not .");
    let tgt = tokenize("Rich people will buy a car , but poor people will not .");
    let mut e = extract_edits(&src, &tgt);
    type_edits(&mut e, &src)?;
    let got: Vec<(usize, usize, &str, ErrorType)> = e.iter().map(|e| (e.start, e.end, e.replacement.as_str(), e.error_type)).collect();
    let want = vec![(0, 2, "Rich", ErrorType::Det), (7, 7, ",", ErrorType::Punct), (8, 9, "", ErrorType::Det)];
    Ok((got == want && apply_edits(&src, &e)? == tgt, format!("{} edits", e.len())))
}

fn generation() -> Result<(bool, String)> {
    let a = generate_corpus(200, 5, 0.5)?;
    let b = generate_corpus(200, 5, 0.5)?;
    let mut consistent = true;
    for ex in &a {
        consistent &= apply_edits(&ex.source, &ex.edits)? == ex.target;
    }
    Ok((a == b && consistent, format!("{} pairs regenerate identically and apply cleanly", a.len())))
}
