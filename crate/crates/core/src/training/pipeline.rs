//! Experiment directory and the stage functions run by the pipeline and CLI.
//!
//! ```text
//! <root>/config.txt             resolved configuration (key = value)
//! <root>/config.source.txt      configuration file as given, verbatim
//! <root>/data/{train,dev,test}.jsonl (+ .m2), data/vocab.json
//! <root>/checkpoints/<name>.ckpt
//! <root>/metrics/<name>.jsonl
//! <root>/reports/...
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{train, RunConfig, TrainConfig, TrainOutcome};
use crate::corpus::{generate_with, read_dataset, split_corpus, write_dataset, CorpusSplit, Example, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, per_type_score, teacher_forced_analysis, Counts, Prf, TeacherForcedAnalysis};
use crate::moe::{expand_dense_to_moe, merge_shared_into_experts};
use crate::transformer::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, Seq2SeqModel};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentDir {
    pub root: PathBuf,
}

impl ExperimentDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn create(&self) -> Result<()> {
        for sub in ["data", "checkpoints", "metrics", "reports"] {
            fs::create_dir_all(self.root.join(sub))?;
        }
        Ok(())
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn config_source(&self) -> PathBuf {
        self.root.join("config.source.txt")
    }

    pub fn data(&self, split: &str) -> PathBuf {
        self.root.join("data").join(format!("{split}.jsonl"))
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("data").join("vocab.json")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{name}.jsonl"))
    }

    pub fn report(&self, file: &str) -> PathBuf {
        self.root.join("reports").join(file)
    }

    /// Writes the resolved configuration, and the source text when given.
    pub fn write_config(&self, cfg: &RunConfig, source: Option<&str>) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        fs::write(self.config(), cfg.to_kv())?;
        if let Some(s) = source {
            fs::write(self.config_source(), s)?;
        }
        Ok(())
    }

    pub fn write_data(&self, split: &CorpusSplit, vocab: &Vocabulary) -> Result<()> {
        self.create()?;
        write_dataset(&self.data("train"), &split.train)?;
        write_dataset(&self.data("dev"), &split.dev)?;
        write_dataset(&self.data("test"), &split.test)?;
        fs::write(self.vocab(), serde_json::to_string(vocab)?)?;
        Ok(())
    }

    pub fn read_split(&self, split: &str) -> Result<Vec<Example>> {
        read_dataset(&self.data(split))
    }

    pub fn read_vocab(&self) -> Result<Vocabulary> {
        Ok(serde_json::from_str(&fs::read_to_string(self.vocab())?)?)
    }

    pub fn load(&self, name: &str) -> Result<Checkpoint> {
        load_checkpoint(&self.checkpoint(name))
    }

    pub fn save(&self, name: &str, model: &Seq2SeqModel<f32>, vocab: &Vocabulary) -> Result<()> {
        self.create()?;
        save_checkpoint(model, Some(vocab), &self.checkpoint(name))
    }

    pub fn write_json<T: Serialize>(&self, file: &str, value: &T) -> Result<()> {
        self.create()?;
        fs::write(self.report(file), serde_json::to_string_pretty(value)?)?;
        Ok(())
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// Generates, splits and writes the corpus and vocabulary.
pub fn gen_data(dir: &ExperimentDir, cfg: &RunConfig) -> Result<(CorpusSplit, Vocabulary)> {
    let examples = generate_with(&cfg.corpus)?;
    let split = split_corpus(examples, cfg.split.dev_frac, cfg.split.test_frac)?;
    let vocab = Vocabulary::build(&split.train)?;
    dir.write_data(&split, &vocab)?;
    Ok((split, vocab))
}

fn model_config(cfg: &RunConfig, vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    }
}

fn finish_training(dir: &ExperimentDir, name: &str, out: &TrainOutcome, vocab: &Vocabulary) -> Result<()> {
    dir.save(name, out.best_model(), vocab)?;
    dir.save(&format!("{name}-last"), &out.model, vocab)?;
    out.log.write_jsonl(&dir.metrics(name))
}

/// Trains a fresh dense model; saves `<name>.ckpt` (best dev) and
/// `<name>-last.ckpt`, and `metrics/<name>.jsonl`.
pub fn train_dense(dir: &ExperimentDir, cfg: &RunConfig, name: &str) -> Result<TrainOutcome> {
    let vocab = dir.read_vocab()?;
    let (tr, dev) = (dir.read_split("train")?, dir.read_split("dev")?);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Seq2SeqModel::new_dense(model_config(cfg, &vocab), &mut rng)?;
    let out = train(model, &tr, &dev, &vocab, &cfg.dense_train)?;
    finish_training(dir, name, &out, &vocab)?;
    Ok(out)
}

/// Expands checkpoint `from` with `cfg.moe` into `to`; returns warnings.
pub fn expand(dir: &ExperimentDir, cfg: &RunConfig, from: &str, to: &str) -> Result<Vec<String>> {
    let ck = dir.load(from)?;
    let vocab = ck.vocab.ok_or_else(|| Error::invalid("checkpoint carries no vocabulary"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let (model, warnings) = expand_dense_to_moe(&ck.model, &cfg.moe, &mut rng)?;
    dir.save(to, &model, &vocab)?;
    Ok(warnings)
}

/// Fine-tunes checkpoint `from` (MoE or dense) with `train_cfg` into `to`.
pub fn train_from(dir: &ExperimentDir, train_cfg: &TrainConfig, from: &str, to: &str) -> Result<TrainOutcome> {
    let ck = dir.load(from)?;
    let vocab = ck.vocab.ok_or_else(|| Error::invalid("checkpoint carries no vocabulary"))?;
    let (tr, dev) = (dir.read_split("train")?, dir.read_split("dev")?);
    let out = train(ck.model, &tr, &dev, &vocab, train_cfg)?;
    finish_training(dir, to, &out, &vocab)?;
    Ok(out)
}

/// Fine-tunes MoE checkpoint `from` into `to` with `cfg.moe_train`. Settings
/// that leave the parameter layout alone (variant, capacity factor, loss
/// weights, second-expert scale, K=1 weighting, expert dropout) come from
/// `cfg.moe`; the layout settings must match the checkpoint.
pub fn train_moe(dir: &ExperimentDir, cfg: &RunConfig, from: &str, to: &str) -> Result<TrainOutcome> {
    let mut ck = dir.load(from)?;
    let vocab = ck.vocab.ok_or_else(|| Error::invalid("checkpoint carries no vocabulary"))?;
    let ms = ck
        .model
        .moe
        .as_mut()
        .ok_or_else(|| Error::invalid(format!("checkpoint `{from}` is dense; expand it first")))?;
    let want = &cfg.moe;
    let c = &mut ms.config;
    for (field, expected, found) in [
        ("moe.num_experts", want.num_experts.to_string(), c.num_experts.to_string()),
        ("moe.d_expert", want.d_expert.to_string(), c.d_expert.to_string()),
        ("moe.router_hidden", want.router_hidden.to_string(), c.router_hidden.to_string()),
        ("moe.sharing", want.sharing.to_string(), c.sharing.to_string()),
    ] {
        if expected != found {
            return Err(Error::ConfigMismatch {
                field: field.into(),
                expected,
                found,
            });
        }
    }
    c.variant = want.variant;
    c.capacity_factor = want.capacity_factor;
    c.alpha = want.alpha;
    c.beta = want.beta;
    c.second_expert_scale = want.second_expert_scale;
    c.k1_weighting = want.k1_weighting;
    c.expert_dropout = want.expert_dropout;
    let (tr, dev) = (dir.read_split("train")?, dir.read_split("dev")?);
    let out = train(ck.model, &tr, &dev, &vocab, &cfg.moe_train)?;
    finish_training(dir, to, &out, &vocab)?;
    Ok(out)
}

pub fn merge(dir: &ExperimentDir, from: &str, to: &str) -> Result<()> {
    let ck = dir.load(from)?;
    let vocab = ck.vocab.ok_or_else(|| Error::invalid("checkpoint carries no vocabulary"))?;
    dir.save(to, &merge_shared_into_experts(&ck.model)?, &vocab)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub checkpoint: String,
    pub split: String,
    pub sentences: usize,
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f05: f64,
    pub per_type: BTreeMap<String, Prf>,
    pub router_accuracy: Option<f64>,
    pub total_params: usize,
    pub effective_params: usize,
    pub merged_convention_epc: usize,
}

/// Scores checkpoint `name` on `split`; writes `reports/eval-<name>-<split>.json`.
pub fn eval_checkpoint(dir: &ExperimentDir, name: &str, split: &str) -> Result<EvalSummary> {
    let ck = dir.load(name)?;
    let vocab = ck.vocab.ok_or_else(|| Error::invalid("checkpoint carries no vocabulary"))?;
    let data = dir.read_split(split)?;
    let (report, _) = evaluate_model(&ck.model, &data, &vocab)?;
    let router_accuracy = if ck.model.is_dense() {
        None
    } else {
        Some(teacher_forced_analysis(&ck.model, &data, &vocab, 64)?.router_accuracy())
    };
    let s = EvalSummary {
        checkpoint: name.into(),
        split: split.into(),
        sentences: data.len(),
        counts: report.counts,
        precision: report.precision,
        recall: report.recall,
        f05: report.f05,
        per_type: per_type_score(&report),
        router_accuracy,
        total_params: ck.model.total_param_count(),
        effective_params: ck.model.effective_param_count(),
        merged_convention_epc: ck.model.merged_convention_epc(),
    };
    dir.write_json(&format!("eval-{name}-{split}.json"), &s)?;
    Ok(s)
}

/// Teacher-forced routing analysis of checkpoint `name` on `split`. Writes
/// the JSON record plus tab-separated matrices: mean gate per type
/// (`routing-<name>.tsv`) and expert accuracy (`expert-accuracy-<name>.tsv`).
pub fn analyze(dir: &ExperimentDir, name: &str, split: &str) -> Result<TeacherForcedAnalysis> {
    let ck = dir.load(name)?;
    let vocab = ck.vocab.ok_or_else(|| Error::invalid("checkpoint carries no vocabulary"))?;
    let data = dir.read_split(split)?;
    let a = teacher_forced_analysis(&ck.model, &data, &vocab, 64)?;
    dir.write_json(&format!("analyze-{name}-{split}.json"), &a)?;
    let m = a.routing.num_experts;
    let header = |first: &str| {
        let mut h = vec![first.to_string()];
        h.extend((0..m).map(|e| format!("expert{e}")));
        h.push("tokens".into());
        h.join("\t")
    };
    let mut gate = vec![header("type")];
    let mut acc = vec![header("type")];
    for t in crate::corpus::ErrorType::ALL {
        let i = t.index();
        let n = a.routing.token_counts[i];
        let cells: Vec<String> = match &a.routing.mean_gate[i] {
            Some(r) => r.iter().map(|x| format!("{x:.6}")).collect(),
            None => vec!["absent".into(); m],
        };
        gate.push(format!("{}\t{}\t{n}", t.name(), cells.join("\t")));
        let cells: Vec<String> = (0..m)
            .map(|e| match a.expert.accuracy(i, e) {
                Some(x) if !a.expert.low_support(i, e) => format!("{x:.4}"),
                Some(x) => format!("{x:.4}*"),
                None => "-".into(),
            })
            .collect();
        acc.push(format!("{}\t{}\t{n}", t.name(), cells.join("\t")));
    }
    fs::write(dir.report(&format!("routing-{name}-{split}.tsv")), gate.join("\n") + "\n")?;
    fs::write(dir.report(&format!("expert-accuracy-{name}-{split}.tsv")), acc.join("\n") + "\n")?;
    Ok(a)
}

/// Which optional stages `run_pipeline` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub moe: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub dense: EvalSummary,
    pub moe: Option<EvalSummary>,
    pub expand_warnings: Vec<String>,
}

/// gen-data, train-dense, then (optionally) expand, train-moe, and dev
/// evaluation of every trained model. Failures name their stage.
pub fn run_pipeline(cfg: &RunConfig, dir: &Path, stages: Stages) -> Result<PipelineReport> {
    let dir = ExperimentDir::new(dir);
    stage("config", cfg.validate().and_then(|_| dir.write_config(cfg, None)))?;
    stage("gen-data", gen_data(&dir, cfg))?;
    stage("train-dense", train_dense(&dir, cfg, "dense"))?;
    let dense = stage("eval", eval_checkpoint(&dir, "dense", "dev"))?;
    let (moe, expand_warnings) = if stages.moe {
        let w = stage("expand", expand(&dir, cfg, "dense", "expanded"))?;
        stage("train-moe", train_moe(&dir, cfg, "expanded", "moe"))?;
        (Some(stage("eval", eval_checkpoint(&dir, "moe", "dev"))?), w)
    } else {
        (None, Vec::new())
    };
    let report = PipelineReport {
        dense,
        moe,
        expand_warnings,
    };
    stage("report", dir.write_json("pipeline.json", &report))?;
    Ok(report)
}
