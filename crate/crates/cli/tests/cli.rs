use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use moece::corpus::{detokenize, read_dataset};

fn moece(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moece")).args(args).output().expect("binary runs")
}

fn moece_stdin(args: &[&str], input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_moece"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("binary runs");
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&moece(&[])), 1);
    assert_eq!(code(&moece(&["frobnicate"])), 1);
    assert_eq!(code(&moece(&["gen-data", "--no-such-flag"])), 1);
    assert_eq!(code(&moece(&["train-moe", "--variant", "expert-choice"])), 1);
    assert_eq!(code(&moece(&["eval", "--alpha", "lots"])), 1);
    assert_eq!(code(&moece(&["--help"])), 0);
}

#[test]
fn config_problems_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "model.d_model = 16\nmodel.wings = 2\n").unwrap();
    let o = moece(&["gen-data", "--config", p(&bad), "--out", p(&out)]);
    assert_eq!(code(&o), 1, "{}", text(&o.stderr));
    assert!(text(&o.stderr).contains("wings"));

    let o = moece(&["gen-data", "--set", "corpus.n", "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    let o = moece(&["gen-data", "--steps", "5", "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    let o = moece(&["gen-data", "--config", p(&tmp.path().join("missing.txt")), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn runtime_failures_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = moece(&["eval", "--checkpoint", "nothing", "--out", p(&out)]);
    assert_eq!(code(&o), 2, "{}", text(&o.stderr));
    let o = moece(&["train-dense", "--steps", "1", "--out", p(&out)]);
    assert_eq!(code(&o), 2, "no data yet: {}", text(&o.stderr));
}

#[test]
fn gen_data_is_reproducible_and_records_config() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = moece(&["gen-data", "--n", "5000", "--seed", "7", "--out", p(d)]);
        assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    }
    for f in ["train.jsonl", "train.m2", "dev.jsonl", "dev.m2", "test.jsonl", "test.m2", "vocab.json"] {
        let x = fs::read(a.join("data").join(f)).unwrap();
        assert!(!x.is_empty(), "{f}");
        assert_eq!(x, fs::read(b.join("data").join(f)).unwrap(), "{f}");
    }
    let cfg = fs::read_to_string(a.join("config.txt")).unwrap();
    assert!(cfg.lines().any(|l| l == "corpus.n = 5000"), "{cfg}");
    assert!(cfg.lines().any(|l| l == "corpus.seed = 7"), "{cfg}");
    assert_eq!(cfg, fs::read_to_string(a.join("configs/gen-data.txt")).unwrap());
}

#[test]
fn config_file_is_embedded_verbatim_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let src = "# small corpus\ncorpus.n = 60   # pairs\nmoe.alpha = 0.3\n";
    let file = tmp.path().join("exp.txt");
    fs::write(&file, src).unwrap();
    let o = moece(&["gen-data", "--config", p(&file), "--alpha", "0.05", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("config.source.txt")).unwrap(), src);
    let cfg = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(cfg.lines().any(|l| l == "corpus.n = 60"));
    assert!(cfg.lines().any(|l| l == "moe.alpha = 0.05"));
    // Later stages inherit the resolved record.
    let o = moece(&["expand", "--out", p(&out), "--from", "absent"]);
    assert_eq!(code(&o), 2);
    let cfg = fs::read_to_string(out.join("configs/expand.txt")).unwrap();
    assert!(cfg.lines().any(|l| l == "moe.alpha = 0.05"));
}

#[test]
fn selftest_passes() {
    let o = moece(&["selftest"]);
    assert_eq!(code(&o), 0, "{}{}", text(&o.stdout), text(&o.stderr));
    let out = text(&o.stdout);
    assert!(out.lines().count() >= 8);
    assert!(!out.contains("FAIL"));
}

#[test]
fn small_pipeline_through_every_subcommand() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = p(&out);
    let small = [
        "--set", "model.d_model=16", "--set", "model.d_ff=32", "--set", "moe.router_hidden=8",
        "--set", "dense_train.eval_interval=0", "--set", "moe_train.eval_interval=0",
    ];
    let run = |args: &[&str]| {
        let mut v = args.to_vec();
        v.extend(["--out", o]);
        let r = moece(&v);
        assert_eq!(code(&r), 0, "{args:?}: {}", text(&r.stderr));
        text(&r.stdout)
    };
    run(&[&["gen-data", "--n", "120"][..], &small[..]].concat());
    run(&["train-dense", "--steps", "3"]);
    run(&["expand", "--variant", "switch", "--experts", "3", "--d-expert", "32", "--capacity-factor", "1.5"]);
    run(&["train-moe", "--steps", "2", "--alpha", "0.2", "--beta", "0.5"]);
    let eval: serde_json::Value = serde_json::from_str(&run(&["eval", "--checkpoint", "moe"])).unwrap();
    assert!(eval["router_accuracy"].is_number());
    run(&["analyze"]);
    let tsv = fs::read_to_string(out.join("reports/routing-moe-dev.tsv")).unwrap();
    assert_eq!(tsv.lines().next().unwrap(), "type\texpert0\texpert1\texpert2\ttokens");
    assert!(out.join("reports/expert-accuracy-moe-dev.tsv").exists());
    run(&["merge"]);
    let metrics = fs::read_to_string(out.join("metrics/moe.jsonl")).unwrap();
    assert!(metrics.contains("\"alpha\":0.2"), "{metrics}");
    for stage in ["gen-data", "train-dense", "expand", "train-moe", "eval", "analyze", "merge"] {
        assert!(out.join(format!("configs/{stage}.txt")).exists(), "{stage}");
    }
    let cfg = fs::read_to_string(out.join("config.txt")).unwrap();
    for line in ["moe.variant = switch", "moe.num_experts = 3", "moe.capacity_factor = 1.5", "moe_train.steps = 2", "dense_train.steps = 3"] {
        assert!(cfg.lines().any(|l| l == line), "{line}");
    }

    let r = moece_stdin(&["infer", "--out", o], "the cat sit on mat .\n\nzyzzyva\n");
    assert_eq!(code(&r), 0, "{}", text(&r.stderr));
    let lines: Vec<String> = text(&r.stdout).lines().map(String::from).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1], "");
    for l in [&lines[0], &lines[2]] {
        let (sent, types) = l.split_once('\t').expect("tab separated");
        assert_eq!(sent.split_whitespace().count(), types.split_whitespace().count());
    }
    let r = moece_stdin(&["infer", "--json", "--out", o], "a b\n");
    let v: serde_json::Value = serde_json::from_str(text(&r.stdout).trim()).unwrap();
    assert!(v["types"].is_array() && v["corrected"].is_string());
}

/// Trains at the default model size, then checks the clean-sentence and
/// merge behavior of `infer`.
#[test]
fn trained_model_infer_behavior() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = p(&out);
    for args in [
        vec!["gen-data", "--n", "5000", "--seed", "7"],
        vec!["train-dense", "--steps", "1500"],
        vec!["expand", "--variant", "gshard"],
        vec!["train-moe", "--steps", "600"],
        vec!["merge", "--from", "moe", "--to", "merged"],
    ] {
        let mut v = args.clone();
        v.extend(["--out", o]);
        let r = moece(&v);
        assert_eq!(code(&r), 0, "{args:?}: {}", text(&r.stderr));
    }
    let dev = read_dataset(&out.join("data/dev.jsonl")).unwrap();
    let clean: Vec<String> = dev.iter().filter(|e| e.edits.is_empty()).map(|e| detokenize(&e.source)).collect();
    assert!(!clean.is_empty());
    let input = clean.join("\n") + "\n";

    let unmerged = moece_stdin(&["infer", "--checkpoint", "moe", "--out", o], &input);
    assert_eq!(code(&unmerged), 0, "{}", text(&unmerged.stderr));
    let lines: Vec<String> = text(&unmerged.stdout).lines().map(String::from).collect();
    assert_eq!(lines.len(), clean.len());
    let unchanged = lines
        .iter()
        .zip(&clean)
        .filter(|(l, s)| {
            let (sent, types) = l.split_once('\t').unwrap();
            sent == s.as_str() && types.split_whitespace().all(|t| t == "NONE")
        })
        .count();
    let rate = unchanged as f64 / clean.len() as f64;
    println!("clean dev sentences reproduced with all-NONE types: {unchanged}/{} = {rate:.3}", clean.len());
    assert!(rate >= 0.90, "{rate}");

    let merged = moece_stdin(&["infer", "--checkpoint", "merged", "--out", o], &input);
    assert_eq!(code(&merged), 0);
    assert_eq!(text(&merged.stdout), text(&unmerged.stdout));
}
