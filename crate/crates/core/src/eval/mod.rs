//! Edit-based scoring, routing analytics and paired bootstrap comparison.

mod analytics;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use analytics::{
    decode_examples, evaluate_model, expert_accuracy, expert_accuracy_from, router_accuracy, router_accuracy_from,
    routing_stats, teacher_forced_analysis, ExpertAccuracy, TeacherForcedAnalysis, LOW_SUPPORT,
};

use crate::corpus::{extract_edits, type_edits, Edit, ErrorType};
use crate::error::{Error, Result};

/// Precision-weighted F-measure: `1.25 P R / (0.25 P + R)`, 0 when both are 0.
pub fn f05(precision: f64, recall: f64) -> f64 {
    let d = 0.25 * precision + recall;
    if d == 0.0 {
        0.0
    } else {
        1.25 * precision * recall / d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f05(&self) -> f64 {
        f05(self.precision(), self.recall())
    }

    pub fn prf(&self) -> Prf {
        Prf {
            precision: self.precision(),
            recall: self.recall(),
            f05: self.f05(),
        }
    }

    fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f05: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Tp,
    Fp,
    Fn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub sentence: usize,
    pub edit: Edit,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f05: f64,
    pub per_type: BTreeMap<ErrorType, Counts>,
    pub records: Vec<EditRecord>,
}

/// Typed hypothesis edits turning `source` into `output`.
pub fn hypothesis_edits(source: &[String], output: &[String]) -> Result<Vec<Edit>> {
    let mut edits = extract_edits(source, output);
    type_edits(&mut edits, source)?;
    Ok(edits)
}

/// Per-sentence counts; a hypothesis edit matches a gold edit iff start,
/// end and replacement are equal.
fn sentence_counts(hyp: &[Edit], gold: &[Edit]) -> Counts {
    let mut c = Counts::default();
    let mut open: Vec<bool> = vec![true; gold.len()];
    for h in hyp {
        match gold.iter().enumerate().find(|(i, g)| open[*i] && g.key() == h.key()) {
            Some((i, _)) => {
                open[i] = false;
                c.tp += 1;
            }
            None => c.fp += 1,
        }
    }
    c.fn_ = open.iter().filter(|&&o| o).count();
    c
}

/// Exact-match corpus scoring. True positives and misses are attributed to
/// the gold type, false positives to the hypothesis edit's own type.
pub fn score(hyp: &[Vec<Edit>], gold: &[Vec<Edit>]) -> Result<EvalReport> {
    if hyp.len() != gold.len() {
        return Err(Error::invalid(format!(
            "hypothesis has {} sentences, gold has {}",
            hyp.len(),
            gold.len()
        )));
    }
    let mut counts = Counts::default();
    let mut per_type: BTreeMap<ErrorType, Counts> = BTreeMap::new();
    let mut records = Vec::new();
    for (s, (h, g)) in hyp.iter().zip(gold).enumerate() {
        let mut open: Vec<bool> = vec![true; g.len()];
        for e in h {
            let hit = g.iter().enumerate().find(|(i, ge)| open[*i] && ge.key() == e.key());
            let (edit, outcome) = match hit {
                Some((i, ge)) => {
                    open[i] = false;
                    (ge.clone(), Outcome::Tp)
                }
                None => (e.clone(), Outcome::Fp),
            };
            records.push(EditRecord {
                sentence: s,
                edit,
                outcome,
            });
        }
        for (i, ge) in g.iter().enumerate() {
            if open[i] {
                records.push(EditRecord {
                    sentence: s,
                    edit: ge.clone(),
                    outcome: Outcome::Fn,
                });
            }
        }
    }
    for r in &records {
        let c = per_type.entry(r.edit.error_type).or_default();
        match r.outcome {
            Outcome::Tp => {
                c.tp += 1;
                counts.tp += 1;
            }
            Outcome::Fp => {
                c.fp += 1;
                counts.fp += 1;
            }
            Outcome::Fn => {
                c.fn_ += 1;
                counts.fn_ += 1;
            }
        }
    }
    Ok(EvalReport {
        counts,
        precision: counts.precision(),
        recall: counts.recall(),
        f05: counts.f05(),
        per_type,
        records,
    })
}

/// Scores per error type plus an `ALL` row equal to the overall report.
pub fn per_type_score(report: &EvalReport) -> BTreeMap<String, Prf> {
    let mut out: BTreeMap<String, Prf> = report
        .per_type
        .iter()
        .map(|(t, c)| (t.name().to_string(), c.prf()))
        .collect();
    out.insert("ALL".into(), report.counts.prf());
    out
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid(format!(
            "pearson needs two equal-length series of at least 2 values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("pearson: a series has zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Jensen-Shannon divergence in bits, in `[0, 1]`.
pub fn jensen_shannon(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::shape("jensen_shannon", &[p.len()], &[q.len()]));
    }
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).log2())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * kl(p, &m) + 0.5 * kl(q, &m)).max(0.0))
}

/// Mean Jensen-Shannon divergence over all unordered pairs of rows.
pub fn mean_pairwise_jsd(rows: &[&[f64]]) -> Result<f64> {
    if rows.len() < 2 {
        return Err(Error::invalid("mean pairwise divergence needs at least two rows"));
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            total += jensen_shannon(rows[i], rows[j])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// F0.5(A) - F0.5(B) on the full set.
    pub delta_f05: f64,
    /// Fraction of resamples with F0.5(A) <= F0.5(B).
    pub p_value: f64,
    pub a_wins: usize,
    pub b_wins: usize,
    pub ties: usize,
}

/// Paired bootstrap over sentences, testing whether A beats B.
pub fn bootstrap_compare(a: &[Vec<Edit>], b: &[Vec<Edit>], gold: &[Vec<Edit>], n_resamples: usize, seed: u64) -> Result<BootstrapResult> {
    if a.len() != gold.len() || b.len() != gold.len() {
        return Err(Error::invalid(format!(
            "misaligned systems: {} and {} sentences against {} gold",
            a.len(),
            b.len(),
            gold.len()
        )));
    }
    if n_resamples == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    if gold.is_empty() {
        return Err(Error::invalid("bootstrap needs at least one sentence"));
    }
    let ca: Vec<Counts> = a.iter().zip(gold).map(|(h, g)| sentence_counts(h, g)).collect();
    let cb: Vec<Counts> = b.iter().zip(gold).map(|(h, g)| sentence_counts(h, g)).collect();
    let total = |c: &[Counts], idx: &mut dyn Iterator<Item = usize>| {
        let mut t = Counts::default();
        for i in idx {
            t.add(&c[i]);
        }
        t.f05()
    };
    let n = gold.len();
    let delta = total(&ca, &mut (0..n)) - total(&cb, &mut (0..n));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut a_wins, mut b_wins, mut ties) = (0, 0, 0);
    for _ in 0..n_resamples {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let fa = total(&ca, &mut idx.iter().copied());
        let fb = total(&cb, &mut idx.iter().copied());
        if fa > fb {
            a_wins += 1;
        } else if fa < fb {
            b_wins += 1;
        } else {
            ties += 1;
        }
    }
    Ok(BootstrapResult {
        delta_f05: delta,
        p_value: (b_wins + ties) as f64 / n_resamples as f64,
        a_wins,
        b_wins,
        ties,
    })
}
