use moece::moe::*;
use moece::numerics::{grad_check, Graph, Real, ScalarFn, Tensor, Var};
use moece::transformer::{ModelConfig, RunMode, Seq2SeqModel, Session};
use moece::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn uniform(n: usize, m: usize) -> Tensor<f64> {
    Tensor::full(&[n, m], 1.0 / m as f64)
}

fn one_hot_rows(n: usize, m: usize, e: usize) -> Tensor<f64> {
    let mut d = vec![0.0; n * m];
    for i in 0..n {
        d[i * m + e] = 1.0;
    }
    t(&[n, m], &d)
}

fn random_gates(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut d = Vec::with_capacity(n * m);
    for _ in 0..n {
        let row: Vec<f64> = (0..m).map(|_| rng.random::<f64>().powi(3) + 1e-3).collect();
        let s: f64 = row.iter().sum();
        d.extend(row.iter().map(|x| x / s));
    }
    t(&[n, m], &d)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn route_zero_weights_give_uniform_gates() {
    let mut g = Graph::<f64>::new();
    let z = |g: &mut Graph<f64>, s: &[usize]| g.param(Tensor::zeros(s));
    let r = RouterVars {
        wh: z(&mut g, &[4, 6]),
        bh: z(&mut g, &[6]),
        wp: z(&mut g, &[6, 8]),
        bp: z(&mut g, &[8]),
        wg: z(&mut g, &[6, 7]),
        bg: z(&mut g, &[7]),
    };
    let x = g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng(1)));
    let out = route(&mut g, &r, x).unwrap();
    for v in g.value(out.g).data() {
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }
    for v in g.value(out.p).data() {
        assert!((v - 0.125).abs() < 1e-12);
    }
}

#[test]
fn route_matches_hand_evaluation() {
    let mut g = Graph::<f64>::new();
    let wh = g.param(t(&[2, 2], &[1.0, 0.5, -1.0, 2.0]));
    let bh = g.param(t(&[2], &[0.1, -0.2]));
    let wp = g.param(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let bp = g.param(t(&[2], &[0.0, 0.0]));
    let wg = g.param(t(&[2, 3], &[1.0, -1.0, 0.0, 0.5, 0.5, 0.0]));
    let bg = g.param(t(&[3], &[0.0, 0.0, 1.0]));
    let x = g.constant(t(&[2, 2], &[1.0, 2.0, -0.5, 0.0]));
    let r = route(&mut g, &RouterVars { wh, bh, wp, bp, wg, bg }, x).unwrap();
    let softmax = |z: &[f64]| {
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    for (i, xr) in [[1.0, 2.0], [-0.5, 0.0]].iter().enumerate() {
        let h = [xr[0] * 1.0 + -xr[1] + 0.1, xr[0] * 0.5 + xr[1] * 2.0 - 0.2];
        let p = softmax(&[h[0], h[1]]);
        let gl = softmax(&[h[0] + 0.5 * h[1], -h[0] + 0.5 * h[1], 1.0]);
        for k in 0..2 {
            assert!((g.value(r.p).at2(i, k) - p[k]).abs() < 1e-12);
        }
        for k in 0..3 {
            assert!((g.value(r.g).at2(i, k) - gl[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn switch_capacity_example() {
    // Tokens 0, 2, 4, 5, 7 prefer expert 0; the rest prefer experts 1..3.
    let prefs = [0, 1, 0, 2, 0, 0, 3, 0];
    let mut d = Vec::new();
    for &p in &prefs {
        let mut row = vec![0.1; 4];
        row[p] = 0.7;
        d.extend(row);
    }
    let plan = plan_dispatch_switch(&t(&[8, 4], &d), Some(1.0), K1Weighting::RawGate).unwrap();
    assert_eq!(plan.capacity, Some(2));
    let overflow: Vec<usize> = (0..8).filter(|&i| plan.choices[i][0].overflow).collect();
    assert_eq!(overflow, vec![4, 5, 7]);
    assert_eq!(plan.expert_tokens[0], vec![0, 2]);
    assert!((plan.choices[0][0].weight - 0.7).abs() < 1e-12);
    assert_eq!(plan.stats.timing, StatsTiming::PostCapacity);
    assert_eq!(plan.stats.dropped_tokens, 3);
}

#[test]
fn switch_uniform_gates_fill_expert_zero_first() {
    let plan = plan_dispatch_switch(&uniform(8, 4), Some(1.0), K1Weighting::Normalized).unwrap();
    assert_eq!(plan.expert_tokens[0], vec![0, 1]);
    assert!(plan.choices[2..].iter().all(|c| c[0].expert == 0 && c[0].overflow));
    assert!(plan.choices.iter().all(|c| c[0].weight == 1.0));
}

#[test]
fn large_capacity_factor_never_overflows() {
    let mut r = rng(3);
    for _ in 0..50 {
        let g = random_gates(16, 4, &mut r);
        let p = plan_dispatch_switch(&g, Some(4.0), K1Weighting::RawGate).unwrap();
        assert_eq!(p.stats.overflow_assignments, 0);
        let p = plan_dispatch_gshard(&g, Some(4.0), SecondExpertRule::Always, 2.0, &mut r).unwrap();
        assert_eq!(p.stats.overflow_assignments, 0);
    }
}

#[test]
fn gshard_forced_keep_and_one_hot() {
    let mut r = rng(4);
    let g = t(&[1, 4], &[0.5, 0.5, 0.0, 0.0]);
    for _ in 0..20 {
        let p = plan_dispatch_gshard(&g, None, SecondExpertRule::Sample, 2.0, &mut r).unwrap();
        assert_eq!(p.choices[0].len(), 2);
        assert!((p.choices[0][0].weight - 0.5).abs() < 1e-12);
        assert!((p.choices[0][1].weight - 0.5).abs() < 1e-12);
    }
    let p = plan_dispatch_gshard(&one_hot_rows(3, 4, 2), None, SecondExpertRule::Sample, 2.0, &mut r).unwrap();
    for c in &p.choices {
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].expert, 2);
        assert_eq!(c[0].weight, 1.0);
    }
}

#[test]
fn gshard_second_expert_keep_rate() {
    let n = 10_000;
    let mut d = Vec::with_capacity(n * 4);
    for _ in 0..n {
        d.extend([0.5, 0.25, 0.15, 0.10]);
    }
    let p = plan_dispatch_gshard(&t(&[n, 4], &d), None, SecondExpertRule::Sample, 2.0, &mut rng(5)).unwrap();
    let kept = p.choices.iter().filter(|c| c.len() == 2).count() as f64 / n as f64;
    assert!((kept - 0.5).abs() < 0.02, "keep rate {kept}");
}

#[test]
fn gshard_weights_normalize_over_kept_experts() {
    let mut r = rng(6);
    let g = random_gates(200, 5, &mut r);
    let p = plan_dispatch_gshard(&g, None, SecondExpertRule::Sample, 2.0, &mut r).unwrap();
    for cs in &p.choices {
        let s: f64 = cs.iter().map(|c| c.weight).sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(cs.iter().all(|c| c.weight >= 0.0));
    }
    assert_eq!(p.stats.timing, StatsTiming::PreCapacity);
    assert!((p.stats.v.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!((p.stats.w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn capacity_is_never_exceeded(n in 1usize..64, m in 2usize..9, cf in 0.1f64..3.0, seed in any::<u64>(), gshard in any::<bool>()) {
        let mut r = rng(seed);
        let g = random_gates(n, m, &mut r);
        let (plan, k) = if gshard {
            (plan_dispatch_gshard(&g, Some(cf), SecondExpertRule::Sample, 2.0, &mut r).unwrap(), 2)
        } else {
            (plan_dispatch_switch(&g, Some(cf), K1Weighting::RawGate).unwrap(), 1)
        };
        let cap = capacity(cf, n, k, m);
        prop_assert_eq!(plan.capacity, Some(cap));
        prop_assert!(plan.max_load() <= cap);
        for (e, toks) in plan.expert_tokens.iter().enumerate() {
            for &tk in toks {
                prop_assert!(plan.choices[tk].iter().any(|c| c.expert == e && !c.overflow));
            }
        }
    }
}

#[test]
fn capacity_formula() {
    assert_eq!(capacity(1.0, 8, 1, 4), 2);
    assert_eq!(capacity(1.25, 10, 2, 7), 4);
    assert_eq!(capacity(1.1, 10, 1, 1), 11);
    assert_eq!(capacity(1.0, 7, 1, 7), 1);
}

#[test]
fn balance_loss_identities() {
    for m in [2usize, 4, 7] {
        let n = 14 * m;
        let mut d = vec![0.0; n * m];
        // Uniform routing: each expert first for n/m tokens with flat gates.
        for i in 0..n {
            for e in 0..m {
                d[i * m + e] = 1.0 / m as f64;
            }
            d[i * m + i % m] += 1e-9;
        }
        let g = t(&[n, m], &d);
        let st = plan_dispatch_switch(&g, None, K1Weighting::RawGate).unwrap();
        assert!((balance_loss_switch(&st.stats).unwrap() - 1.0).abs() < 1e-6, "switch M={m}");
        let gs = plan_dispatch_gshard(&g, None, SecondExpertRule::Always, 2.0, &mut rng(1)).unwrap();
        assert!((balance_loss_gshard(&gs.stats).unwrap() - 1.0).abs() < 1e-6, "gshard M={m}");

        let hot = one_hot_rows(n, m, 0);
        let st = plan_dispatch_switch(&hot, None, K1Weighting::RawGate).unwrap();
        assert!((balance_loss_switch(&st.stats).unwrap() - m as f64).abs() < 1e-6);
        let gs = plan_dispatch_gshard(&hot, None, SecondExpertRule::Always, 2.0, &mut rng(1)).unwrap();
        assert!((balance_loss_gshard(&gs.stats).unwrap() - m as f64).abs() < 1e-6);
    }
}

#[test]
fn balance_loss_decreases_toward_uniform() {
    let v = vec![0.5, 0.3, 0.2];
    let loss = |w: Vec<f64>| {
        balance_loss(&LoadStats {
            w,
            v: v.clone(),
            dropped_tokens: 0,
            overflow_assignments: 0,
            timing: StatsTiming::PreCapacity,
        })
    };
    // Shift mass from the most loaded (and highest-v) expert to the least.
    let steps: Vec<f64> = (0..=10).map(|i| i as f64 * 0.05).collect();
    for pair in steps.windows(2) {
        let a = loss(vec![1.0 - pair[0], 0.0, pair[0]]);
        let b = loss(vec![1.0 - pair[1], 0.0, pair[1]]);
        assert!(b < a);
    }
}

#[test]
fn balance_timing_rules() {
    let prefs = [0, 0, 0, 0, 1, 2, 3, 0];
    let mut d = Vec::new();
    for &p in &prefs {
        let mut row = vec![0.1; 4];
        row[p] = 0.7;
        d.extend(row);
    }
    let g = t(&[8, 4], &d);
    let capped_st = plan_dispatch_switch(&g, Some(1.0), K1Weighting::RawGate).unwrap();
    let capped_gs = plan_dispatch_gshard(&g, Some(1.0), SecondExpertRule::Threshold, 2.0, &mut rng(1)).unwrap();
    assert!(capped_st.stats.overflow_assignments > 0);
    assert_ne!(
        balance_loss_switch(&capped_st.stats).unwrap(),
        balance_loss_gshard(&capped_gs.stats).unwrap()
    );
    let free_st = plan_dispatch_switch(&g, None, K1Weighting::RawGate).unwrap();
    let free_gs = plan_dispatch_gshard(&g, None, SecondExpertRule::Threshold, 2.0, &mut rng(1)).unwrap();
    assert_eq!(
        balance_loss_switch(&free_st.stats).unwrap(),
        balance_loss_gshard(&free_gs.stats).unwrap()
    );
    assert!(balance_loss_gshard(&capped_st.stats).is_err());
}

#[test]
fn balance_loss_graph_matches_and_flows_through_v_only() {
    let g0 = random_gates(10, 4, &mut rng(8));
    let plan = plan_dispatch_switch(&g0, Some(1.0), K1Weighting::RawGate).unwrap();
    let mut g = Graph::<f64>::new();
    let gate = g.param(g0.clone());
    let l = balance_loss_graph(&mut g, gate, &plan.stats).unwrap();
    assert!((g.value(l).item() - balance_loss(&plan.stats)).abs() < 1e-12);
    g.backward(l).unwrap();
    let grad = g.grad(gate).unwrap();
    // d/dg[i,e] of M Σ w v = M w_e / N.
    for i in 0..10 {
        for e in 0..4 {
            assert!((grad.at2(i, e) - 4.0 * plan.stats.w[e] / 10.0).abs() < 1e-12);
        }
    }
}

#[test]
fn error_type_loss_cases() {
    let labels = [0, 3, 7, 1];
    let p = Tensor::<f64>::full(&[4, 8], 0.125);
    assert!((error_type_loss_probs(&p, &labels, None).unwrap() - 8f64.ln()).abs() < 1e-12);
    let mut d = vec![0.0; 32];
    for (i, &l) in labels.iter().enumerate() {
        d[i * 8 + l] = 1.0;
    }
    assert_eq!(error_type_loss_probs(&t(&[4, 8], &d), &labels, None).unwrap(), 0.0);
    assert!(error_type_loss_probs(&p, &labels, Some(&[false; 4])).is_err());

    // Graph form on logits agrees with the probability form.
    let logits = Tensor::randn(&[4, 8], 1.0, &mut rng(9));
    let probs = moece::numerics::softmax(&logits, 1).unwrap();
    let mask = [true, false, true, true];
    let mut g = Graph::<f64>::new();
    let lv = g.constant(logits);
    let l = error_type_loss(&mut g, lv, &labels, Some(&mask)).unwrap();
    let want = error_type_loss_probs(&probs, &labels, Some(&mask)).unwrap();
    assert!((g.value(l).item() - want).abs() < 1e-12);
}

#[test]
fn total_loss_arithmetic() {
    let b = total_loss(2.0, &[1.0, 2.0], &[1.0, 1.0], 0.1, 1.0, 2).unwrap();
    assert!((b.total - 3.15).abs() < 1e-12);
    let b = total_loss(2.0, &[1.0, 2.0], &[1.0, 1.0], 0.1, 0.0, 2).unwrap();
    assert!((b.total - 2.15).abs() < 1e-12);
    let b = total_loss(2.0, &[1.0, 2.0], &[1.0, 1.0], 0.0, 1.0, 2).unwrap();
    assert!((b.total - 3.0).abs() < 1e-12);
    assert!(total_loss(2.0, &[], &[], 0.1, 1.0, 2).is_err());
    assert_eq!(total_loss(2.0, &[], &[], 0.1, 1.0, 0).unwrap().total, 2.0);

    let mut g = Graph::<f64>::new();
    let c = |g: &mut Graph<f64>, x: f64| g.constant(Tensor::scalar(x));
    let (lc, e1, e2, b1, b2) = (c(&mut g, 2.0), c(&mut g, 1.0), c(&mut g, 2.0), c(&mut g, 1.0), c(&mut g, 1.0));
    let tl = total_loss_graph(&mut g, lc, &[e1, e2], &[b1, b2], 0.1, 1.0).unwrap();
    assert!((g.value(tl).item() - 3.15).abs() < 1e-12);
}

/// Expert bank of `m` experts with input width `d` and hidden width `h`.
fn experts<F: Real>(g: &mut Graph<F>, m: usize, d: usize, h: usize, r: &mut ChaCha8Rng) -> Vec<ExpertVars> {
    (0..m)
        .map(|_| ExpertVars {
            w1: g.param(Tensor::randn(&[d, h], 0.5, r)),
            b1: g.param(Tensor::randn(&[h], 0.1, r)),
            w2: g.param(Tensor::randn(&[h, d], 0.5, r)),
            b2: g.param(Tensor::randn(&[d], 0.1, r)),
            merged: None,
        })
        .collect()
}

fn expert_eval(g: &Graph<f64>, e: &ExpertVars, x: &[f64]) -> Vec<f64> {
    let (w1, b1, w2, b2) = (g.value(e.w1), g.value(e.b1), g.value(e.w2), g.value(e.b2));
    let (d, h) = w1.dims2().unwrap();
    let hid: Vec<f64> = (0..h)
        .map(|j| ((0..d).map(|i| x[i] * w1.at2(i, j)).sum::<f64>() + b1.data()[j]).max(0.0))
        .collect();
    (0..d)
        .map(|k| (0..h).map(|j| hid[j] * w2.at2(j, k)).sum::<f64>() + b2.data()[k])
        .collect()
}

#[test]
fn moe_forward_single_token_matches_direct_formula() {
    let mut r = rng(10);
    let mut g = Graph::<f64>::new();
    let ex = experts(&mut g, 3, 4, 5, &mut r);
    let xv = Tensor::randn(&[1, 4], 1.0, &mut r);
    let x = g.constant(xv.clone());
    let gate = g.constant(t(&[1, 3], &[0.2, 0.7, 0.1]));
    let plan = plan_dispatch_switch(g.value(gate), None, K1Weighting::RawGate).unwrap();
    let y = moe_forward::<f64, ChaCha8Rng>(&mut g, x, gate, &plan, &ex, None).unwrap();
    let want = expert_eval(&g, &ex[1], xv.data());
    for k in 0..4 {
        assert!((g.value(y).data()[k] - 0.7 * want[k]).abs() < 1e-12);
    }
}

#[test]
fn overflow_tokens_get_zero_expert_output() {
    let mut r = rng(11);
    for _ in 0..20 {
        let n = 12;
        let mut g = Graph::<f64>::new();
        let ex = experts(&mut g, 4, 3, 4, &mut r);
        let x = g.constant(Tensor::randn(&[n, 3], 1.0, &mut r));
        let gate = g.constant(random_gates(n, 4, &mut r));
        let plan = plan_dispatch_switch(g.value(gate), Some(0.5), K1Weighting::RawGate).unwrap();
        let y = moe_forward::<f64, ChaCha8Rng>(&mut g, x, gate, &plan, &ex, None).unwrap();
        let yv = g.value(y);
        let mut overflowed = 0;
        for i in 0..n {
            if plan.choices[i][0].overflow {
                overflowed += 1;
                assert!(yv.row(i).iter().all(|&v| v == 0.0));
            }
        }
        assert!(overflowed > 0);
    }
}

struct MoeBlock {
    plan: DispatchPlan,
    n: usize,
    d: usize,
    m: usize,
    h: usize,
    rh: usize,
    t: usize,
    labels: Vec<usize>,
}

impl ScalarFn for MoeBlock {
    // Inputs: x, router (6), shared ffn (4), experts (4 each), norm gain.
    fn eval<F: Real>(&self, g: &mut Graph<F>, v: &[Var]) -> Result<Var> {
        let x = v[0];
        let router = RouterVars {
            wh: v[1],
            bh: v[2],
            wp: v[3],
            bp: v[4],
            wg: v[5],
            bg: v[6],
        };
        let r = route(g, &router, x)?;
        let ex: Vec<ExpertVars> = (0..self.m)
            .map(|e| {
                let b = 11 + 4 * e;
                ExpertVars {
                    w1: v[b],
                    b1: v[b + 1],
                    w2: v[b + 2],
                    b2: v[b + 3],
                    merged: None,
                }
            })
            .collect();
        let y = moe_forward::<F, ChaCha8Rng>(g, x, r.g, &self.plan, &ex, None)?;
        let f = moece::transformer::ffn_forward(g, x, v[7], v[8], v[9], v[10])?;
        let s = g.add(x, f)?;
        let s = g.add(s, y)?;
        let out = g.rms_norm(s, v[11 + 4 * self.m], 1e-6)?;
        let c = g.constant(Tensor::from_f64(&[self.n, self.d], &(0..self.n * self.d).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>())?);
        let prod = g.mul(out, c)?;
        let task = g.sum(prod)?;
        let le = error_type_loss(g, r.p_logits, &self.labels, None)?;
        let lb = balance_loss_graph(g, r.g, &self.plan.stats)?;
        total_loss_graph(g, task, &[le], &[lb], 0.1, 1.0)
    }
}

fn moe_block_inputs(b: &MoeBlock, r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let (d, h, rh, t, m) = (b.d, b.h, b.rh, b.t, b.m);
    let mut v = vec![
        Tensor::randn(&[b.n, d], 1.0, r),
        Tensor::randn(&[d, rh], 0.5, r),
        Tensor::randn(&[rh], 0.1, r),
        Tensor::randn(&[rh, t], 0.5, r),
        Tensor::randn(&[t], 0.1, r),
        Tensor::randn(&[rh, m], 0.5, r),
        Tensor::randn(&[m], 0.1, r),
        Tensor::randn(&[d, h], 0.5, r),
        Tensor::randn(&[h], 0.1, r),
        Tensor::randn(&[h, d], 0.5, r),
        Tensor::randn(&[d], 0.1, r),
    ];
    for _ in 0..m {
        v.push(Tensor::randn(&[d, h], 0.5, r));
        v.push(Tensor::randn(&[h], 0.1, r));
        v.push(Tensor::randn(&[h, d], 0.5, r));
        v.push(Tensor::randn(&[d], 0.1, r));
    }
    v.push(Tensor::randn(&[d], 0.3, r).map(|x| x + 1.0));
    v
}

/// Router gates for the block inputs, used to fix the dispatch plan.
fn block_gates(inputs: &[Tensor<f64>]) -> Tensor<f64> {
    let mut g = Graph::<f64>::new();
    let vs: Vec<Var> = inputs[..7].iter().map(|x| g.constant(x.clone())).collect();
    let r = route(
        &mut g,
        &RouterVars {
            wh: vs[1],
            bh: vs[2],
            wp: vs[3],
            bp: vs[4],
            wg: vs[5],
            bg: vs[6],
        },
        vs[0],
    )
    .unwrap();
    g.value(r.g).clone()
}

#[test]
fn moe_block_gradients_match_finite_differences() {
    let mut r = rng(12);
    for gshard in [false, true] {
        let mut b = MoeBlock {
            plan: plan_dispatch_switch(&uniform(5, 3), None, K1Weighting::RawGate).unwrap(),
            n: 5,
            d: 4,
            m: 3,
            h: 3,
            rh: 3,
            t: 4,
            labels: vec![0, 1, 3, 2, 0],
        };
        let inputs = moe_block_inputs(&b, &mut r);
        let gates = block_gates(&inputs);
        b.plan = if gshard {
            plan_dispatch_gshard(&gates, Some(1.0), SecondExpertRule::Always, 2.0, &mut r).unwrap()
        } else {
            plan_dispatch_switch(&gates, Some(1.0), K1Weighting::RawGate).unwrap()
        };
        let r64 = grad_check::<f64, _>(&b, &inputs, 1e-6, 1e-5).unwrap();
        assert!(r64.pass, "f64 {gshard}: {r64:?}");
    }
}

#[test]
fn task_loss_reaches_dispatch_head_and_type_loss_reaches_trunk() {
    let mut r = rng(13);
    let b = MoeBlock {
        plan: plan_dispatch_switch(&uniform(5, 3), None, K1Weighting::RawGate).unwrap(),
        n: 5,
        d: 4,
        m: 3,
        h: 3,
        rh: 3,
        t: 4,
        labels: vec![0, 1, 3, 2, 0],
    };
    let inputs = moe_block_inputs(&b, &mut r);
    let plan = plan_dispatch_switch(&block_gates(&inputs), None, K1Weighting::RawGate).unwrap();

    let mut g = Graph::<f64>::new();
    let v: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let router = RouterVars {
        wh: v[1],
        bh: v[2],
        wp: v[3],
        bp: v[4],
        wg: v[5],
        bg: v[6],
    };
    let rt = route(&mut g, &router, v[0]).unwrap();
    let ex: Vec<ExpertVars> = (0..3)
        .map(|e| ExpertVars {
            w1: v[11 + 4 * e],
            b1: v[12 + 4 * e],
            w2: v[13 + 4 * e],
            b2: v[14 + 4 * e],
            merged: None,
        })
        .collect();
    let y = moe_forward::<f64, ChaCha8Rng>(&mut g, v[0], rt.g, &plan, &ex, None).unwrap();
    let task = g.sum(y).unwrap();
    g.backward(task).unwrap();
    assert!(g.grad(v[5]).unwrap().data().iter().any(|x| x.abs() > 1e-9));

    let mut g = Graph::<f64>::new();
    let v: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let router = RouterVars {
        wh: v[1],
        bh: v[2],
        wp: v[3],
        bp: v[4],
        wg: v[5],
        bg: v[6],
    };
    let rt = route(&mut g, &router, v[0]).unwrap();
    let le = error_type_loss(&mut g, rt.p_logits, &b.labels, None).unwrap();
    g.backward(le).unwrap();
    for i in [1, 3] {
        assert!(g.grad(v[i]).unwrap().data().iter().any(|x| x.abs() > 1e-9));
    }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        enc_layers: 1,
        dec_layers: 3,
        max_len: 10,
        dropout: 0.0,
        num_error_types: 8,
    }
}

fn random_seqs(r: &mut ChaCha8Rng, n: usize, vocab: usize, max: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| {
            let len = r.random_range(1..=max);
            (0..len).map(|_| r.random_range(4..vocab)).collect()
        })
        .collect()
}

fn logits<F: Real>(model: &Seq2SeqModel<F>, src: &[Vec<usize>], dec: &[Vec<usize>], mode: &mut RunMode) -> Tensor<F> {
    let mut s = Session::new(model, false);
    let out = s.forward(src, dec, mode).unwrap();
    s.graph.value(out.logits).clone()
}

fn moe_cfg(variant: Variant, sharing: Sharing) -> MoeConfig {
    MoeConfig {
        num_experts: 4,
        variant,
        sharing,
        d_expert: 16,
        router_hidden: 6,
        expert_dropout: 0.0,
        expert_init_std: 0.3,
        ..MoeConfig::default()
    }
}

#[test]
fn null_experts_reproduce_the_dense_model() {
    let mut r = rng(14);
    let dense: Seq2SeqModel<f64> = Seq2SeqModel::new_dense(tiny_config(), &mut r).unwrap();
    for sharing in [Sharing::Layer, Sharing::Frozen] {
        let cfg = MoeConfig {
            zero_init_expert_output: true,
            ..moe_cfg(Variant::Gshard, sharing)
        };
        let (moe, _) = expand_dense_to_moe(&dense, &cfg, &mut r).unwrap();
        let src = random_seqs(&mut r, 4, 20, 8);
        let dec = random_seqs(&mut r, 4, 20, 8);
        let a = logits(&dense, &src, &dec, &mut RunMode::eval());
        let b = logits(&moe, &src, &dec, &mut RunMode::eval());
        assert_eq!(a.max_abs_diff(&b).unwrap(), 0.0);
    }
}

#[test]
fn unshared_copies_without_noise_reproduce_the_dense_model() {
    let mut r = rng(15);
    let dense: Seq2SeqModel<f64> = Seq2SeqModel::new_dense(tiny_config(), &mut r).unwrap();
    let cfg = MoeConfig {
        expert_noise_std: 0.0,
        k1_weighting: K1Weighting::Normalized,
        ..moe_cfg(Variant::Switch, Sharing::None)
    };
    let (moe, warnings) = expand_dense_to_moe(&dense, &cfg, &mut r).unwrap();
    assert!(warnings.is_empty());
    assert!(!moe.params.contains("dec.1.ffn.w1"));
    let src = random_seqs(&mut r, 4, 20, 8);
    let dec = random_seqs(&mut r, 4, 20, 8);
    let a = logits(&dense, &src, &dec, &mut RunMode::eval());
    let b = logits(&moe, &src, &dec, &mut RunMode::eval());
    assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
}

#[test]
fn expansion_warns_on_mismatched_expert_width() {
    let mut r = rng(16);
    let dense: Seq2SeqModel<f32> = Seq2SeqModel::new_dense(tiny_config(), &mut r).unwrap();
    let cfg = MoeConfig {
        d_expert: 4,
        ..moe_cfg(Variant::Switch, Sharing::None)
    };
    let (moe, warnings) = expand_dense_to_moe(&dense, &cfg, &mut r).unwrap();
    assert_eq!(warnings.len(), 1);
    assert_eq!(moe.params.value("dec.1.expert.0.w1").unwrap().shape(), &[8, 4]);
    assert!(expand_dense_to_moe(&moe, &cfg, &mut r).is_err());
}

#[test]
fn frozen_sharing_marks_shared_path_untrainable() {
    let mut r = rng(17);
    let dense: Seq2SeqModel<f32> = Seq2SeqModel::new_dense(tiny_config(), &mut r).unwrap();
    let (moe, _) = expand_dense_to_moe(&dense, &moe_cfg(Variant::Switch, Sharing::Frozen), &mut r).unwrap();
    for l in [1, 2] {
        for p in ["w1", "b1", "w2", "b2"] {
            assert!(!moe.params.get(&format!("dec.{l}.ffn.{p}")).unwrap().trainable);
        }
    }
    assert!(moe.params.get("dec.0.ffn.w1").unwrap().trainable);
    assert!(moe.params.get("router.wg").unwrap().trainable);
}

fn merge_max_diff<F: Real>(variant: Variant, inputs: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let dense: Seq2SeqModel<F> = Seq2SeqModel::new_dense(tiny_config(), &mut r).unwrap();
    let (moe, _) = expand_dense_to_moe(&dense, &moe_cfg(variant, Sharing::Layer), &mut r).unwrap();
    let merged = merge_shared_into_experts(&moe).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..inputs {
        let src = random_seqs(&mut r, 1, 20, 9);
        let dec = random_seqs(&mut r, 1, 20, 9);
        let mode = || RunMode::eval().with_second_expert(SecondExpertRule::Always);
        let a = logits(&moe, &src, &dec, &mut mode());
        let b = logits(&merged, &src, &dec, &mut mode());
        worst = worst.max(a.max_abs_diff(&b).unwrap());
    }
    worst
}

#[test]
fn merged_models_match_unmerged() {
    for v in [Variant::Switch, Variant::Gshard] {
        let d64 = merge_max_diff::<f64>(v, 100, 18);
        assert!(d64 < 1e-10, "{v} f64 {d64}");
        let d32 = merge_max_diff::<f32>(v, 100, 18);
        assert!(d32 < 1e-5, "{v} f32 {d32}");
    }
}

#[test]
fn merge_guards() {
    let mut r = rng(19);
    let dense: Seq2SeqModel<f32> = Seq2SeqModel::new_dense(tiny_config(), &mut r).unwrap();
    assert!(merge_shared_into_experts(&dense).is_err());
    let (none, _) = expand_dense_to_moe(&dense, &moe_cfg(Variant::Switch, Sharing::None), &mut r).unwrap();
    assert!(merge_shared_into_experts(&none).is_err());
    let (layer, _) = expand_dense_to_moe(&dense, &moe_cfg(Variant::Switch, Sharing::Layer), &mut r).unwrap();
    let merged = merge_shared_into_experts(&layer).unwrap();
    assert!(merge_shared_into_experts(&merged).is_err());
    assert!(!merged.params.contains("dec.1.ffn.w1"));
    assert_eq!(merged.params.value("dec.2.expert.3.w1").unwrap().shape(), &[8, 32]);
}

#[test]
fn routing_stats_fixtures() {
    let rows = vec![
        (1, vec![0.2, 0.8]),
        (1, vec![0.6, 0.4]),
        (3, vec![0.5, 0.5]),
    ];
    let s = routing_stats_from_rows(2, 8, &rows).unwrap();
    let r1 = s.mean_gate[1].as_ref().unwrap();
    assert!((r1[0] - 0.4).abs() < 1e-12 && (r1[1] - 0.6).abs() < 1e-12);
    assert_eq!(s.mean_gate[3].as_deref(), Some(&[0.5, 0.5][..]));
    assert!(s.mean_gate[0].is_none() && s.mean_gate[2].is_none());
    assert_eq!(s.assignments[1], vec![1, 1]);
    assert_eq!(s.assignments[3], vec![1, 0]);
    assert_eq!(s.token_counts[1], 2);

    let mut r = rng(20);
    let g = random_gates(50, 5, &mut r);
    let rows: Vec<(usize, Vec<f64>)> = (0..50).map(|i| (4, g.row(i).to_vec())).collect();
    let s = routing_stats_from_rows(1, 8, &rows).unwrap();
    assert_eq!(s.present_rows().len(), 1);
    assert!((s.mean_gate[4].as_ref().unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-6);
}
