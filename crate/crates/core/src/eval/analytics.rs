use serde::{Deserialize, Serialize};

use super::{hypothesis_edits, score, EvalReport};
use crate::corpus::{ErrorType, Example, Vocabulary};
use crate::error::{Error, Result};
use crate::moe::{RoutingAccumulator, RoutingStats};
use crate::numerics::{Real, Tensor};
use crate::transformer::{greedy_decode, vote_error_type, Batch, Decoded, RunMode, Seq2SeqModel, Session};

/// Cells backed by fewer tokens than this are flagged low-support.
pub const LOW_SUPPORT: usize = 10;

/// Teacher-forced correctness per `(error type, primary expert)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertAccuracy {
    pub correct: Vec<Vec<usize>>,
    pub total: Vec<Vec<usize>>,
}

impl ExpertAccuracy {
    pub fn new(num_types: usize, num_experts: usize) -> Self {
        Self {
            correct: vec![vec![0; num_experts]; num_types],
            total: vec![vec![0; num_experts]; num_types],
        }
    }

    pub fn accuracy(&self, t: usize, e: usize) -> Option<f64> {
        let n = self.total[t][e];
        (n > 0).then(|| self.correct[t][e] as f64 / n as f64)
    }

    pub fn low_support(&self, t: usize, e: usize) -> bool {
        self.total[t][e] < LOW_SUPPORT
    }

    fn add(&mut self, t: usize, e: usize, ok: bool) -> Result<()> {
        if t >= self.total.len() || e >= self.total[t].len() {
            return Err(Error::invalid(format!("expert accuracy cell ({t}, {e}) out of range")));
        }
        self.total[t][e] += 1;
        self.correct[t][e] += usize::from(ok);
        Ok(())
    }
}

/// One teacher-forced sweep over a labelled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherForcedAnalysis {
    pub tokens: usize,
    pub router_correct: usize,
    /// Share of the most frequent label, the accuracy of a constant guess.
    pub majority_class_rate: f64,
    pub token_correct: usize,
    /// Statistics at the deepest MoE layer.
    pub routing: RoutingStats,
    pub expert: ExpertAccuracy,
}

impl TeacherForcedAnalysis {
    pub fn router_accuracy(&self) -> f64 {
        self.router_correct as f64 / self.tokens.max(1) as f64
    }

    pub fn token_accuracy(&self) -> f64 {
        self.token_correct as f64 / self.tokens.max(1) as f64
    }
}

fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn voted(probs: &[&Tensor<impl Real>], row: usize) -> ErrorType {
    let votes: Vec<ErrorType> = probs
        .iter()
        .map(|p| ErrorType::from_index(argmax(p.row(row))).unwrap_or(ErrorType::None))
        .collect();
    vote_error_type(&votes).unwrap_or(ErrorType::None)
}

/// Accuracy of voted per-layer type predictions (`probs` shallow to deep).
pub fn router_accuracy_from<F: Real>(probs: &[Tensor<F>], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::invalid("router accuracy needs at least one MoE layer"));
    }
    if labels.is_empty() {
        return Err(Error::invalid("router accuracy over zero tokens"));
    }
    let refs: Vec<&Tensor<F>> = probs.iter().collect();
    for p in &refs {
        if p.dims2()?.0 != labels.len() {
            return Err(Error::shape("router_accuracy", p.shape(), &[labels.len()]));
        }
    }
    let hits = (0..labels.len())
        .filter(|&i| voted(&refs, i).index() == labels[i])
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Expert accuracy cells from per-token predicted ids, reference ids, type
/// labels and primary experts.
pub fn expert_accuracy_from(
    predicted: &[usize],
    reference: &[usize],
    labels: &[usize],
    experts: &[usize],
    num_types: usize,
    num_experts: usize,
) -> Result<ExpertAccuracy> {
    let n = predicted.len();
    if reference.len() != n || labels.len() != n || experts.len() != n {
        return Err(Error::invalid("expert accuracy inputs differ in length"));
    }
    let mut acc = ExpertAccuracy::new(num_types, num_experts);
    for i in 0..n {
        acc.add(labels[i], experts[i], predicted[i] == reference[i])?;
    }
    Ok(acc)
}

/// Teacher-forced pass in deterministic mode collecting router accuracy,
/// routing statistics and expert accuracy.
pub fn teacher_forced_analysis<F: Real>(
    model: &Seq2SeqModel<F>,
    examples: &[Example],
    vocab: &Vocabulary,
    batch_size: usize,
) -> Result<TeacherForcedAnalysis> {
    let ms = model
        .moe
        .as_ref()
        .ok_or_else(|| Error::invalid("routing analysis needs an MoE model"))?;
    if examples.is_empty() {
        return Err(Error::invalid("routing analysis over an empty dataset"));
    }
    let t = model.config.num_error_types;
    let m = ms.config.num_experts;
    let layer = *model.moe_layers().last().expect("MoE model has MoE layers");
    let mut routing = RoutingAccumulator::new(layer, t, m);
    let mut expert = ExpertAccuracy::new(t, m);
    let mut label_counts = vec![0usize; t];
    let (mut tokens, mut router_correct, mut token_correct) = (0, 0, 0);
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = Batch::from_examples(chunk, vocab);
        let labels = batch.flat_labels().expect("labels from examples");
        let targets = batch.dec_targets();
        let mut s = Session::new(model, false);
        let out = s.forward_teacher_forced(&batch, &mut RunMode::eval())?;
        let logits = s.graph.value(out.logits);
        let probs: Vec<&Tensor<F>> = out.routing.iter().map(|r| s.graph.value(r.route.p)).collect();
        let deepest = out.routing.last().expect("routing for MoE layers");
        let g = s.graph.value(deepest.route.g);
        for i in 0..labels.len() {
            let y = labels[i];
            if y >= t {
                return Err(Error::invalid(format!("label {y} outside {t} error types")));
            }
            label_counts[y] += 1;
            tokens += 1;
            router_correct += usize::from(voted(&probs, i).index() == y);
            let ok = argmax(logits.row(i)) == targets[i];
            token_correct += usize::from(ok);
            let e = deepest.plan.first_choice(i);
            let row: Vec<f64> = g.row(i).iter().map(|v| v.as_f64()).collect();
            routing.add(y, &row, e)?;
            expert.add(y, e, ok)?;
        }
    }
    Ok(TeacherForcedAnalysis {
        tokens,
        router_correct,
        majority_class_rate: *label_counts.iter().max().unwrap_or(&0) as f64 / tokens as f64,
        token_correct,
        routing: routing.finish(),
        expert,
    })
}

/// Fraction of target positions (end included) whose voted router type
/// equals the label. Errors on dense models.
pub fn router_accuracy<F: Real>(model: &Seq2SeqModel<F>, examples: &[Example], vocab: &Vocabulary) -> Result<f64> {
    Ok(teacher_forced_analysis(model, examples, vocab, 64)?.router_accuracy())
}

pub fn routing_stats<F: Real>(model: &Seq2SeqModel<F>, examples: &[Example], vocab: &Vocabulary) -> Result<RoutingStats> {
    Ok(teacher_forced_analysis(model, examples, vocab, 64)?.routing)
}

pub fn expert_accuracy<F: Real>(model: &Seq2SeqModel<F>, examples: &[Example], vocab: &Vocabulary) -> Result<ExpertAccuracy> {
    Ok(teacher_forced_analysis(model, examples, vocab, 64)?.expert)
}

/// Greedy outputs for every example's source, in batches.
pub fn decode_examples<F: Real>(model: &Seq2SeqModel<F>, examples: &[Example], vocab: &Vocabulary, batch_size: usize) -> Result<Vec<Decoded>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let src: Vec<Vec<usize>> = chunk.iter().map(|e| vocab.encode(&e.source)).collect();
        out.extend(greedy_decode(model, &src, model.config.max_len)?);
    }
    Ok(out)
}

/// Decodes every source, extracts typed hypothesis edits and scores them
/// against the gold edits. Also returns the output token strings.
pub fn evaluate_model<F: Real>(model: &Seq2SeqModel<F>, examples: &[Example], vocab: &Vocabulary) -> Result<(EvalReport, Vec<Vec<String>>)> {
    let decoded = decode_examples(model, examples, vocab, 64)?;
    let mut hyps = Vec::with_capacity(examples.len());
    let mut outputs = Vec::with_capacity(examples.len());
    for (ex, d) in examples.iter().zip(&decoded) {
        let out = vocab.decode(&d.tokens)?;
        hyps.push(hypothesis_edits(&ex.source, &out)?);
        outputs.push(out);
    }
    let gold: Vec<_> = examples.iter().map(|e| e.edits.clone()).collect();
    Ok((score(&hyps, &gold)?, outputs))
}
