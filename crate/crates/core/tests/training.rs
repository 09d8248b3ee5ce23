use moece::corpus::{generate_corpus, Example, Vocabulary};
use moece::moe::{expand_dense_to_moe, MoeConfig, Sharing, Variant};
use moece::training::*;
use moece::transformer::{ModelConfig, Seq2SeqModel};
use moece::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    train: Vec<Example>,
    dev: Vec<Example>,
    vocab: Vocabulary,
}

fn fixture(n: usize) -> Fixture {
    let data = generate_corpus(n, 11, 0.5).unwrap();
    let dev = data[..n / 10].to_vec();
    let train = data[n / 10..].to_vec();
    let vocab = Vocabulary::build(&data).unwrap();
    Fixture { train, dev, vocab }
}

fn small_model(vocab: &Vocabulary, seed: u64) -> Seq2SeqModel<f32> {
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        enc_layers: 1,
        dec_layers: 2,
        max_len: 24,
        dropout: 0.1,
        num_error_types: 8,
    };
    Seq2SeqModel::new_dense(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn small_moe(vocab: &Vocabulary, moe: MoeConfig) -> Seq2SeqModel<f32> {
    let dense = small_model(vocab, 1);
    expand_dense_to_moe(&dense, &MoeConfig { d_expert: 32, router_hidden: 16, ..moe }, &mut ChaCha8Rng::seed_from_u64(2))
        .unwrap()
        .0
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_tokens: 128,
        eval_interval: 0,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_steps_leave_the_model_untouched() {
    let f = fixture(60);
    let m = small_model(&f.vocab, 1);
    let out = train(m.clone(), &f.train, &f.dev, &f.vocab, &quick(0)).unwrap();
    assert_eq!(out.model, m);
    assert!(out.log.is_empty() && out.best.is_none());
    assert!(train(m, &[], &f.dev, &f.vocab, &quick(3)).is_err());
}

#[test]
fn training_is_deterministic_per_seed() {
    let f = fixture(80);
    let m = small_moe(&f.vocab, MoeConfig::default());
    let a = train(m.clone(), &f.train, &f.dev, &f.vocab, &quick(10)).unwrap();
    let b = train(m.clone(), &f.train, &f.dev, &f.vocab, &quick(10)).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
    let c = train(m, &f.train, &f.dev, &f.vocab, &TrainConfig { seed: 2, ..quick(10) }).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn loss_falls_on_a_small_corpus() {
    let f = fixture(1000);
    let out = train(small_model(&f.vocab, 3), &f.train, &f.dev, &f.vocab, &quick(200)).unwrap();
    let l: Vec<f64> = out.log.losses().iter().map(|b| b.l_c).collect();
    assert_eq!(l.len(), 200);
    assert!(l[199] < l[0], "{} -> {}", l[0], l[199]);
}

#[test]
fn logged_total_is_the_weighted_sum() {
    let f = fixture(80);
    for variant in [Variant::Gshard, Variant::Switch] {
        let moe = MoeConfig {
            variant,
            alpha: 0.3,
            beta: 0.7,
            ..MoeConfig::default()
        };
        let out = train(small_moe(&f.vocab, moe), &f.train, &f.dev, &f.vocab, &quick(5)).unwrap();
        for b in out.log.losses() {
            assert_eq!(b.l_e.len(), 1);
            assert_eq!(b.l_b.len(), 1);
            let want = b.l_c + 0.3 * b.l_e[0] + 0.7 * b.l_b[0];
            assert!((b.total - want).abs() < 1e-6);
            assert!((b.alpha, b.beta) == (0.3, 0.7));
        }
    }
}

#[test]
fn ablated_terms_are_logged_as_zero_weight() {
    let f = fixture(80);
    for (alpha, beta) in [(0.0, 1.0), (0.1, 0.0), (0.0, 0.0)] {
        let moe = MoeConfig { alpha, beta, ..MoeConfig::default() };
        let out = train(small_moe(&f.vocab, moe), &f.train, &f.dev, &f.vocab, &quick(3)).unwrap();
        for b in out.log.losses() {
            assert_eq!((b.alpha, b.beta), (alpha, beta));
            assert!(b.l_e[0] > 0.0 && b.l_b[0] > 0.0);
            let want = b.l_c + alpha * b.l_e[0] + beta * b.l_b[0];
            assert!((b.total - want).abs() < 1e-6);
        }
    }
}

#[test]
fn frozen_shared_parameters_stay_bit_identical() {
    let f = fixture(80);
    let moe = MoeConfig {
        sharing: Sharing::Frozen,
        ..MoeConfig::default()
    };
    let m = small_moe(&f.vocab, moe);
    let out = train(m.clone(), &f.train, &f.dev, &f.vocab, &quick(10)).unwrap();
    for p in ["w1", "b1", "w2", "b2"] {
        let name = format!("dec.1.ffn.{p}");
        assert_eq!(out.model.params.value(&name).unwrap(), m.params.value(&name).unwrap());
    }
    assert_ne!(out.model.params.value("dec.1.expert.0.w1").unwrap(), m.params.value("dec.1.expert.0.w1").unwrap());
    assert_ne!(out.model.params.value("dec.0.ffn.w1").unwrap(), m.params.value("dec.0.ffn.w1").unwrap());
}

#[test]
fn non_finite_parameters_report_divergence() {
    let f = fixture(40);
    let mut m = small_model(&f.vocab, 1);
    m.params.get_mut("out.b").unwrap().value.data_mut()[5] = f32::NAN;
    match train(m, &f.train, &f.dev, &f.vocab, &quick(3)) {
        Err(Error::Diverged { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn interval_evaluations_and_best_snapshot() {
    let f = fixture(80);
    let cfg = TrainConfig {
        eval_interval: 4,
        eval_examples: 3,
        ..quick(10)
    };
    let out = train(small_moe(&f.vocab, MoeConfig::default()), &f.train, &f.dev, &f.vocab, &cfg).unwrap();
    let steps: Vec<usize> = out.log.evals().iter().map(|e| e.0).collect();
    assert_eq!(steps, vec![4, 8, 10]);
    let best = out.best.as_ref().unwrap();
    assert_eq!(best.f05, out.log.evals().iter().map(|e| e.1).fold(f64::MIN, f64::max));
    for r in &out.log.records {
        if let MetricRecord::Eval { sentences, router_accuracy, .. } = r {
            assert_eq!(*sentences, 3);
            assert!(router_accuracy.is_some());
        }
    }
}

#[test]
fn metrics_round_trip_and_ordering() {
    let f = fixture(60);
    let cfg = TrainConfig {
        eval_interval: 2,
        eval_examples: 2,
        ..quick(4)
    };
    let out = train(small_model(&f.vocab, 1), &f.train, &f.dev, &f.vocab, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.jsonl");
    out.log.write_jsonl(&p).unwrap();
    let first = std::fs::read_to_string(&p).unwrap().lines().next().unwrap().to_string();
    assert_eq!(first, r#"{"format":"moece-metrics","version":1}"#);
    assert_eq!(MetricsLog::read_jsonl(&p).unwrap(), out.log);

    let text = std::fs::read_to_string(&p).unwrap();
    std::fs::write(&p, text.lines().skip(1).collect::<Vec<_>>().join("\n")).unwrap();
    assert!(MetricsLog::read_jsonl(&p).is_err());

    let mut log = MetricsLog::default();
    let rec = out.log.records[0].clone();
    log.push(rec.clone()).unwrap();
    assert!(log.push(rec).is_err());
}

#[test]
fn batches_respect_the_token_budget() {
    let f = fixture(100);
    let order: Vec<usize> = (0..f.train.len()).rev().collect();
    let batches = make_batches(&f.train, &order, 64);
    let flat: Vec<usize> = batches.iter().flatten().copied().collect();
    assert_eq!(flat, order);
    for b in &batches {
        let used: usize = b.iter().map(|&i| f.train[i].target.len() + 1).sum();
        assert!(used <= 64 || b.len() == 1);
    }
    let one = make_batches(&f.train, &order, 1);
    assert_eq!(one.len(), order.len());
}

#[test]
fn config_key_values() {
    let c = RunConfig::from_kv("# comment\nseed = 5\nmoe.variant = switch  # trailing\nmoe.alpha=0.25\n\nmodel.d_model = 32\n").unwrap();
    assert_eq!(c.seed, 5);
    assert_eq!(c.moe.variant, Variant::Switch);
    assert_eq!(c.moe.alpha, 0.25);
    assert_eq!(c.model.d_model, 32);
    assert_eq!(RunConfig::from_kv(&c.to_kv()).unwrap(), c);
    assert_eq!(RunConfig::from_kv("").unwrap(), RunConfig::default());

    assert!(RunConfig::from_kv("nope = 1").is_err());
    assert!(RunConfig::from_kv("moe = 1").is_err());
    assert!(RunConfig::from_kv("seed = -1").is_err());
    assert!(RunConfig::from_kv("moe.variant = dense").is_err());
    assert!(RunConfig::from_kv("just words").is_err());
    let err = RunConfig::from_kv("seed = 1\nmodel.d_modle = 2").unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
    assert_eq!(parse_kv("a = b = c").unwrap()[0].2, "b = c");

    let mut c = RunConfig::default();
    c.set("moe_train.lr", "2e-3").unwrap();
    c.set("moe.beta", "0").unwrap();
    assert_eq!((c.moe_train.lr, c.moe.beta), (2e-3, 0.0));
    assert!(c.validate().is_ok());
    c.set("split.dev_frac", "0.95").unwrap();
    assert!(c.validate().is_err());
}

fn tiny_run_config() -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("corpus.n", "80"),
        ("model.d_model", "16"),
        ("model.n_heads", "2"),
        ("model.d_ff", "32"),
        ("model.enc_layers", "1"),
        ("model.dec_layers", "2"),
        ("moe.d_expert", "32"),
        ("moe.router_hidden", "8"),
        ("dense_train.steps", "3"),
        ("dense_train.eval_interval", "0"),
        ("moe_train.steps", "3"),
        ("moe_train.eval_interval", "0"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

#[test]
fn pipeline_writes_the_experiment_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run_config();
    let rep = run_pipeline(&cfg, dir.path(), Stages { moe: true }).unwrap();
    assert!(rep.moe.as_ref().unwrap().router_accuracy.is_some());
    assert!(rep.dense.router_accuracy.is_none());
    for f in [
        "config.txt",
        "data/train.jsonl",
        "data/dev.jsonl",
        "data/test.jsonl",
        "data/vocab.json",
        "checkpoints/dense.ckpt",
        "checkpoints/dense-last.ckpt",
        "checkpoints/expanded.ckpt",
        "checkpoints/moe.ckpt",
        "metrics/dense.jsonl",
        "metrics/moe.jsonl",
        "reports/pipeline.json",
        "reports/eval-dense-dev.json",
        "reports/eval-moe-dev.json",
    ] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let written = std::fs::read_to_string(dir.path().join("config.txt")).unwrap();
    assert_eq!(RunConfig::from_kv(&written).unwrap(), cfg);

    let ed = ExperimentDir::new(dir.path());
    merge(&ed, "moe", "merged").unwrap();
    let a = analyze(&ed, "moe", "dev").unwrap();
    assert_eq!(a.routing.num_experts, cfg.moe.num_experts);
    assert!(dir.path().join("reports/routing-moe-dev.tsv").exists());
    assert!(merge(&ed, "dense", "x").is_err());
}

#[test]
fn pipeline_failures_name_their_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run_config();
    cfg.set("split.dev_frac", "0.99").unwrap();
    match run_pipeline(&cfg, dir.path(), Stages { moe: false }) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "config"),
        other => panic!("{other:?}"),
    }
    let mut cfg = tiny_run_config();
    cfg.set("model.n_heads", "3").unwrap();
    match run_pipeline(&cfg, dir.path(), Stages { moe: false }) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "train-dense"),
        other => panic!("{other:?}"),
    }
    let empty = tempfile::tempdir().unwrap();
    assert!(train_dense(&ExperimentDir::new(empty.path()), &tiny_run_config(), "dense").is_err());
}

#[test]
fn train_moe_applies_runtime_settings_and_rejects_layout_changes() {
    let dir = tempfile::tempdir().unwrap();
    let ed = ExperimentDir::new(dir.path());
    let cfg = tiny_run_config();
    gen_data(&ed, &cfg).unwrap();
    train_dense(&ed, &cfg, "dense").unwrap();
    expand(&ed, &cfg, "dense", "init").unwrap();

    let mut tuned = cfg.clone();
    tuned.moe.alpha = 0.25;
    tuned.moe.beta = 0.5;
    tuned.moe.variant = moece::moe::Variant::Switch;
    tuned.moe.capacity_factor = 2.0;
    let out = train_moe(&ed, &tuned, "init", "moe").unwrap();
    assert!(out.log.losses().iter().all(|b| b.alpha == 0.25 && b.beta == 0.5));
    let saved = ed.load("moe").unwrap().model.moe.unwrap().config;
    assert_eq!(saved.variant, moece::moe::Variant::Switch);
    assert_eq!(saved.capacity_factor, 2.0);

    let mut wider = cfg.clone();
    wider.moe.num_experts += 1;
    match train_moe(&ed, &wider, "init", "x") {
        Err(moece::Error::ConfigMismatch { field, .. }) => assert_eq!(field, "moe.num_experts"),
        other => panic!("{:?}", other.map(|_| ())),
    }
    assert!(train_moe(&ed, &cfg, "dense", "x").is_err());
}
