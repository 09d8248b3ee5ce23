//! Training loop, metrics log and the experiment pipeline.

mod config;
mod pipeline;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{parse_kv, RunConfig, SplitConfig};
pub use pipeline::{
    analyze, eval_checkpoint, expand, gen_data, merge, run_pipeline, train_dense, train_from, train_moe, EvalSummary, ExperimentDir, PipelineReport,
    Stages,
};

use crate::corpus::{Example, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, per_type_score, teacher_forced_analysis};
use crate::moe::{balance_loss_graph, error_type_loss, total_loss, total_loss_graph, LossBreakdown};
use crate::numerics::{adam_step, clip_grad_norm, AdamConfig, AdamState, Var};
use crate::transformer::{Batch, RunMode, Seq2SeqModel, Session};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Target positions per batch (target tokens plus end tokens).
    pub batch_tokens: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Dev evaluation every this many steps (and after the last); 0 disables.
    pub eval_interval: usize,
    /// Dev sentences used by interval evaluations; 0 means all.
    pub eval_examples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_tokens: 512,
            lr: 3e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            eval_interval: 100,
            eval_examples: 0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_tokens == 0 {
            return Err(Error::Config("batch_tokens must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config("clip_norm must be non-negative".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadSummary {
    pub layer: usize,
    pub w: Vec<f64>,
    pub v: Vec<f64>,
    pub dropped_tokens: usize,
    pub overflow_assignments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Step {
        step: usize,
        positions: usize,
        loss: LossBreakdown,
        grad_norm: f64,
        load: Vec<LoadSummary>,
    },
    Eval {
        step: usize,
        sentences: usize,
        precision: f64,
        recall: f64,
        f05: f64,
        per_type_f05: BTreeMap<String, f64>,
        router_accuracy: Option<f64>,
    },
}

impl MetricRecord {
    pub fn step(&self) -> usize {
        match self {
            MetricRecord::Step { step, .. } | MetricRecord::Eval { step, .. } => *step,
        }
    }
}

const METRICS_FORMAT: &str = "moece-metrics";

/// Step and evaluation records; steps count completed updates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub records: Vec<MetricRecord>,
}

impl MetricsLog {
    /// Appends a record; step indices must increase strictly within each kind.
    pub fn push(&mut self, r: MetricRecord) -> Result<()> {
        let same_kind = self
            .records
            .iter()
            .rev()
            .find(|x| std::mem::discriminant(*x) == std::mem::discriminant(&r));
        if let Some(prev) = same_kind {
            if prev.step() >= r.step() {
                return Err(Error::invalid(format!("metrics step {} does not follow {}", r.step(), prev.step())));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> Vec<&LossBreakdown> {
        self.records
            .iter()
            .filter_map(|r| match r {
                MetricRecord::Step { loss, .. } => Some(loss),
                _ => None,
            })
            .collect()
    }

    /// `(step, f05)` of every evaluation.
    pub fn evals(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                MetricRecord::Eval { step, f05, .. } => Some((*step, *f05)),
                _ => None,
            })
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "{}", serde_json::json!({"format": METRICS_FORMAT, "version": 1}))?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let r = BufReader::new(fs::File::open(path)?);
        let mut log = MetricsLog::default();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let perr = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            if i == 0 {
                let h: serde_json::Value = serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?;
                if h["format"] != METRICS_FORMAT {
                    return Err(perr("missing metrics header".into()));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?;
            log.push(rec).map_err(|e| perr(e.to_string()))?;
        }
        Ok(log)
    }
}

/// Greedy token-budget batches over `order`: sentences are added until the
/// next one would exceed `budget` target positions.
pub fn make_batches(examples: &[Example], order: &[usize], budget: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut used = 0;
    for &i in order {
        let n = examples[i].target.len() + 1;
        if !cur.is_empty() && used + n > budget {
            out.push(std::mem::take(&mut cur));
            used = 0;
        }
        cur.push(i);
        used += n;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Builds the training objective for one batch: `L_c` alone for dense
/// models, else `L_c + α mean(L_e) + β mean(L_b)` with the model's MoE
/// coefficients. Returns the scalar to differentiate and its breakdown.
pub fn batch_loss(session: &mut Session<'_, f32>, batch: &Batch, mode: &mut RunMode) -> Result<(Var, LossBreakdown, Vec<LoadSummary>)> {
    let out = session.forward_teacher_forced(batch, mode)?;
    let g = &mut session.graph;
    let l_c = g.cross_entropy(out.logits, &batch.dec_targets(), None)?;
    let (alpha, beta) = session
        .model()
        .moe_config()
        .map_or((0.0, 0.0), |c| (c.alpha, c.beta));
    let g = &mut session.graph;
    let labels = if out.routing.is_empty() {
        Vec::new()
    } else {
        batch
            .flat_labels()
            .ok_or_else(|| Error::invalid("MoE training needs error-type labels"))?
    };
    let mut le = Vec::new();
    let mut lb = Vec::new();
    let mut load = Vec::new();
    for r in &out.routing {
        le.push(error_type_loss(g, r.route.p_logits, &labels, None)?);
        lb.push(balance_loss_graph(g, r.route.g, &r.plan.stats)?);
        load.push(LoadSummary {
            layer: r.layer,
            w: r.plan.stats.w.clone(),
            v: r.plan.stats.v.clone(),
            dropped_tokens: r.plan.stats.dropped_tokens,
            overflow_assignments: r.plan.stats.overflow_assignments,
        });
    }
    let total = total_loss_graph(g, l_c, &le, &lb, alpha, beta)?;
    let val = |v: &Var| g.value(*v).item().into();
    let breakdown = total_loss(
        val(&l_c),
        &le.iter().map(val).collect::<Vec<f64>>(),
        &lb.iter().map(val).collect::<Vec<f64>>(),
        alpha,
        beta,
        le.len(),
    )?;
    Ok((total, breakdown, load))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last step.
    pub model: Seq2SeqModel<f32>,
    /// Snapshot with the best dev F0.5 seen at an evaluation.
    pub best: Option<BestSnapshot>,
    pub log: MetricsLog,
}

#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub step: usize,
    pub f05: f64,
    pub model: Seq2SeqModel<f32>,
}

impl TrainOutcome {
    /// The best-dev snapshot, or the final model when no evaluation ran.
    pub fn best_model(&self) -> &Seq2SeqModel<f32> {
        self.best.as_ref().map_or(&self.model, |b| &b.model)
    }
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            step,
            msg: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Teacher-forced training with Adam. Data order, dropout and sampled
/// routing all derive from `cfg.seed`. A non-finite loss aborts with the step.
pub fn train(mut model: Seq2SeqModel<f32>, train: &[Example], dev: &[Example], vocab: &Vocabulary, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.check_layout()?;
    let mut log = MetricsLog::default();
    if cfg.steps == 0 {
        return Ok(TrainOutcome { model, best: None, log });
    }
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005E_ED0F_D00D);
    let mut adam = AdamState::new();
    let adam_cfg = cfg.adam();
    let dev_eval = if cfg.eval_examples == 0 {
        dev
    } else {
        &dev[..cfg.eval_examples.min(dev.len())]
    };
    let mut best: Option<BestSnapshot> = None;
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut next = 0;
    for step in 1..=cfg.steps {
        if next == batches.len() {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut data_rng);
            batches = make_batches(train, &order, cfg.batch_tokens);
            next = 0;
        }
        let batch = Batch::from_examples(batches[next].iter().map(|&i| &train[i]), vocab);
        next += 1;
        let (breakdown, load, grad_norm, grads) = {
            let mut session = Session::new(&model, true);
            let mut mode = RunMode::train(&mut model_rng);
            let (total, breakdown, load) = batch_loss(&mut session, &batch, &mut mode).map_err(|e| diverged(step, e))?;
            if !breakdown.total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    msg: format!("loss {}", breakdown.total),
                });
            }
            session.graph.backward(total).map_err(|e| diverged(step, e))?;
            let mut grads = session.grads();
            let norm = if cfg.clip_norm > 0.0 {
                clip_grad_norm(&mut grads, cfg.clip_norm)
            } else {
                clip_grad_norm(&mut grads, f64::INFINITY)
            };
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    step,
                    msg: "non-finite gradient norm".into(),
                });
            }
            (breakdown, load, norm, grads)
        };
        adam_step(model.params.trainable_mut(), &grads, &mut adam, &adam_cfg)?;
        log.push(MetricRecord::Step {
            step,
            positions: batch.num_target_positions(),
            loss: breakdown,
            grad_norm,
            load,
        })?;
        let at_interval = cfg.eval_interval > 0 && (step % cfg.eval_interval == 0 || step == cfg.steps);
        if at_interval && !dev_eval.is_empty() {
            let (report, _) = evaluate_model(&model, dev_eval, vocab)?;
            let router_accuracy = if model.is_dense() {
                None
            } else {
                Some(teacher_forced_analysis(&model, dev_eval, vocab, 64)?.router_accuracy())
            };
            log.push(MetricRecord::Eval {
                step,
                sentences: dev_eval.len(),
                precision: report.precision,
                recall: report.recall,
                f05: report.f05,
                per_type_f05: per_type_score(&report).into_iter().map(|(k, v)| (k, v.f05)).collect(),
                router_accuracy,
            })?;
            if best.as_ref().is_none_or(|b| report.f05 > b.f05) {
                best = Some(BestSnapshot {
                    step,
                    f05: report.f05,
                    model: model.clone(),
                });
            }
        }
    }
    Ok(TrainOutcome { model, best, log })
}
