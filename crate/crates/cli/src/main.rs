use std::fs;
use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moece::corpus::{detokenize, tokenize};
use moece::training::{self, ExperimentDir, RunConfig};
use moece::transformer::greedy_decode;
use moece::{selftest, Error};

#[derive(Parser)]
#[command(name = "moece", version, about = "Mixture-of-experts grammatical error correction on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, its splits and the vocabulary.
    GenData(Common),
    /// Train a dense model from scratch.
    TrainDense {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "dense")]
        name: String,
    },
    /// Convert a dense checkpoint into an MoE model.
    Expand {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "dense")]
        from: String,
        #[arg(long, default_value = "expanded")]
        to: String,
    },
    /// Fine-tune an MoE checkpoint with the combined objective.
    TrainMoe {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "expanded")]
        from: String,
        #[arg(long, default_value = "moe")]
        to: String,
    },
    /// Score a checkpoint with F0.5 on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "moe")]
        checkpoint: String,
        #[arg(long, default_value = "dev")]
        split: String,
    },
    /// Write per-type gate and expert-accuracy matrices plus router accuracy.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "moe")]
        checkpoint: String,
        #[arg(long, default_value = "dev")]
        split: String,
    },
    /// Fold the shared feed-forward layers into the experts.
    Merge {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "moe")]
        from: String,
        #[arg(long, default_value = "merged")]
        to: String,
    },
    /// Correct sentences read from standard input, one per line.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "moe")]
        checkpoint: String,
        /// One JSON object per line instead of tab-separated text.
        #[arg(long)]
        json: bool,
    },
    /// Run the invariant suites.
    Selftest {
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Experiment directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long, value_parser = ["gshard", "switch"])]
    variant: Option<String>,
    #[arg(long, value_parser = ["layer", "frozen", "none"])]
    sharing: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Number of experts M.
    #[arg(long = "experts", value_name = "M")]
    experts: Option<usize>,
    #[arg(long)]
    capacity_factor: Option<f64>,
    #[arg(long)]
    d_expert: Option<usize>,
    /// Training steps of the stage being run.
    #[arg(long)]
    steps: Option<usize>,
    /// Number of generated sentence pairs.
    #[arg(long)]
    n: Option<usize>,
    /// Any other setting, as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// Starts from `--config`, else the directory's resolved config, else
/// defaults; then applies flags. Records both the resolved config and the
/// verbatim source.
fn resolve(c: &Common, command: &str, steps_key: Option<&str>) -> Result<(ExperimentDir, RunConfig), Failure> {
    let dir = ExperimentDir::new(&c.out);
    let source = match &c.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?),
        None => None,
    };
    let mut cfg = match (&source, dir.config().exists()) {
        (Some(text), _) => RunConfig::from_kv(text)?,
        (None, true) => RunConfig::from_kv(&fs::read_to_string(dir.config())?)?,
        (None, false) => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.corpus.seed = s;
        cfg.dense_train.seed = s;
        cfg.moe_train.seed = s;
    }
    let mut sets: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            sets.push((k.to_string(), v));
        }
    };
    put("corpus.n", c.n.map(|v| v.to_string()));
    put("moe.variant", c.variant.clone());
    put("moe.sharing", c.sharing.clone());
    put("moe.alpha", c.alpha.map(|v| v.to_string()));
    put("moe.beta", c.beta.map(|v| v.to_string()));
    put("moe.num_experts", c.experts.map(|v| v.to_string()));
    put("moe.capacity_factor", c.capacity_factor.map(|v| v.to_string()));
    put("moe.d_expert", c.d_expert.map(|v| v.to_string()));
    if let Some(k) = steps_key {
        put(k, c.steps.map(|v| v.to_string()));
    } else if c.steps.is_some() {
        return Err(Failure::Usage(format!("--steps has no meaning for {command}")));
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        sets.push((k.trim().to_string(), v.trim().to_string()));
    }
    for (k, v) in sets {
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    dir.create()?;
    dir.write_config(&cfg, source.as_deref())?;
    let runs = dir.root.join("configs");
    fs::create_dir_all(&runs)?;
    fs::write(runs.join(format!("{command}.txt")), cfg.to_kv())?;
    Ok((dir, cfg))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    match cli.command {
        Command::GenData(c) => {
            let (dir, cfg) = resolve(&c, "gen-data", None)?;
            let (split, vocab) = training::gen_data(&dir, &cfg)?;
            writeln!(
                out,
                "wrote {} train, {} dev, {} test pairs and {} vocabulary entries to {}",
                split.train.len(),
                split.dev.len(),
                split.test.len(),
                vocab.len(),
                dir.root.join("data").display()
            )?;
        }
        Command::TrainDense { common, name } => {
            let (dir, cfg) = resolve(&common, "train-dense", Some("dense_train.steps"))?;
            let o = training::train_dense(&dir, &cfg, &name)?;
            report_training(&mut out, &name, &o)?;
        }
        Command::Expand { common, from, to } => {
            let (dir, cfg) = resolve(&common, "expand", None)?;
            for w in training::expand(&dir, &cfg, &from, &to)? {
                eprintln!("warning: {w}");
            }
            writeln!(out, "expanded {from} into {to} ({} experts, {})", cfg.moe.num_experts, cfg.moe.variant)?;
        }
        Command::TrainMoe { common, from, to } => {
            let (dir, cfg) = resolve(&common, "train-moe", Some("moe_train.steps"))?;
            let o = training::train_moe(&dir, &cfg, &from, &to)?;
            report_training(&mut out, &to, &o)?;
        }
        Command::Eval { common, checkpoint, split } => {
            let (dir, _) = resolve(&common, "eval", None)?;
            let s = training::eval_checkpoint(&dir, &checkpoint, &split)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&s).map_err(Error::from)?)?;
        }
        Command::Analyze { common, checkpoint, split } => {
            let (dir, _) = resolve(&common, "analyze", None)?;
            let a = training::analyze(&dir, &checkpoint, &split)?;
            writeln!(out, "router accuracy {:.4} over {} tokens (majority baseline {:.4})", a.router_accuracy(), a.tokens, a.majority_class_rate)?;
            for f in [
                format!("routing-{checkpoint}-{split}.tsv"),
                format!("expert-accuracy-{checkpoint}-{split}.tsv"),
                format!("analyze-{checkpoint}-{split}.json"),
            ] {
                writeln!(out, "wrote {}", dir.report(&f).display())?;
            }
        }
        Command::Merge { common, from, to } => {
            let (dir, _) = resolve(&common, "merge", None)?;
            training::merge(&dir, &from, &to)?;
            writeln!(out, "merged {from} into {to}")?;
        }
        Command::Infer { common, checkpoint, json } => {
            let (dir, _) = resolve(&common, "infer", None)?;
            let ck = dir.load(&checkpoint)?;
            let vocab = ck.vocab.ok_or_else(|| Failure::Runtime("checkpoint carries no vocabulary".into()))?;
            let limit = ck.model.config.max_len - 1;
            let lines: Vec<String> = io::stdin().lock().lines().collect::<Result<_, _>>()?;
            for chunk in lines.chunks(32) {
                let src: Vec<Vec<usize>> = chunk.iter().map(|l| vocab.encode(&tokenize(l))).collect();
                let non_empty: Vec<Vec<usize>> = src.iter().filter(|s| !s.is_empty()).cloned().collect();
                let mut decoded = greedy_decode(&ck.model, &non_empty, limit)?.into_iter();
                for s in &src {
                    if s.is_empty() {
                        writeln!(out)?;
                        continue;
                    }
                    let d = decoded.next().expect("one result per sentence");
                    let toks = vocab.decode(&d.tokens)?;
                    let types: Vec<&str> = d.types.iter().take(toks.len()).map(|t| t.name()).collect();
                    if json {
                        let v = serde_json::json!({
                            "corrected": detokenize(&toks),
                            "tokens": toks,
                            "types": types,
                            "end_type": d.types.get(toks.len()).map(|t| t.name()),
                            "truncated": d.truncated,
                        });
                        writeln!(out, "{v}")?;
                    } else {
                        writeln!(out, "{}\t{}", detokenize(&toks), types.join(" "))?;
                    }
                }
            }
        }
        Command::Selftest { json } => {
            let results = selftest::run_all();
            for r in &results {
                if json {
                    writeln!(out, "{}", serde_json::to_string(r).map_err(Error::from)?)?;
                } else {
                    writeln!(out, "{} {}: {}", if r.pass { "ok  " } else { "FAIL" }, r.name, r.detail)?;
                }
            }
            let failed = results.iter().filter(|r| !r.pass).count();
            if failed > 0 {
                return Err(Failure::Runtime(format!("{failed} selftest suites failed")));
            }
        }
    }
    Ok(())
}

fn report_training(out: &mut impl Write, name: &str, o: &training::TrainOutcome) -> io::Result<()> {
    let losses = o.log.losses();
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        writeln!(out, "{name}: {} steps, loss {:.4} -> {:.4}", losses.len(), first.total, last.total)?;
    }
    if let Some(b) = &o.best {
        writeln!(out, "{name}: best dev F0.5 {:.4} at step {}", b.f05, b.step)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
