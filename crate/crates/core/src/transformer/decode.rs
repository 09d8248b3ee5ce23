use super::forward::{RunMode, Session};
use super::Seq2SeqModel;
use crate::corpus::{ErrorType, END, START};
use crate::error::{Error, Result};
use crate::numerics::Real;

/// Greedy output for one source sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    /// Generated ids, without the end token.
    pub tokens: Vec<usize>,
    /// Voted router type at every generation step, the end step included
    /// when the end token was produced. Always NONE for dense models.
    pub types: Vec<ErrorType>,
    /// The length limit was hit before an end token.
    pub truncated: bool,
}

/// Majority vote over per-layer predictions, listed shallow to deep. Ties
/// go to the deepest layer among the tied types.
pub fn vote_error_type(votes: &[ErrorType]) -> Option<ErrorType> {
    let mut counts = [0usize; ErrorType::COUNT];
    for v in votes {
        counts[v.index()] += 1;
    }
    let best = *counts.iter().max()?;
    if best == 0 {
        return None;
    }
    votes.iter().rev().find(|v| counts[v.index()] == best).copied()
}

/// Greedy decoding of a batch. Runs deterministically (no dropout, no
/// capacity limit, thresholded second expert). Each sentence stops at the
/// end token or after `max_len` tokens.
pub fn greedy_decode<F: Real>(model: &Seq2SeqModel<F>, src: &[Vec<usize>], max_len: usize) -> Result<Vec<Decoded>> {
    if src.is_empty() {
        return Ok(Vec::new());
    }
    // The decoder input holds START plus the generated prefix.
    let limit = max_len.min(model.config.max_len.saturating_sub(1));
    if limit == 0 {
        return Err(Error::invalid("max_len leaves no room for output tokens"));
    }
    let enc = {
        let mut s = Session::new(model, false);
        let e = s.encode(src, &mut RunMode::eval())?;
        s.graph.value(e).clone()
    };
    let src_lens: Vec<usize> = src.iter().map(Vec::len).collect();
    let d = model.config.d_model;
    let mut out: Vec<Decoded> = src
        .iter()
        .map(|_| Decoded {
            tokens: Vec::new(),
            types: Vec::new(),
            truncated: false,
        })
        .collect();
    let mut active: Vec<usize> = (0..src.len()).collect();
    while !active.is_empty() {
        // Encoder rows of the active sentences, packed.
        let mut rows = Vec::new();
        let mut offs = Vec::with_capacity(src.len());
        let mut acc = 0;
        for &l in &src_lens {
            offs.push(acc);
            acc += l;
        }
        let mut lens = Vec::with_capacity(active.len());
        for &i in &active {
            rows.extend_from_slice(&enc.data()[offs[i] * d..(offs[i] + src_lens[i]) * d]);
            lens.push(src_lens[i]);
        }
        let enc_t = crate::numerics::Tensor::from_vec(&[rows.len() / d, d], rows)?;
        let dec_in: Vec<Vec<usize>> = active
            .iter()
            .map(|&i| std::iter::once(START).chain(out[i].tokens.iter().copied()).collect())
            .collect();

        let mut s = Session::new(model, false);
        let ev = s.graph.constant(enc_t);
        let (logits, routing) = s.decode(ev, &lens, &dec_in, &mut RunMode::eval())?;
        let lv = s.graph.value(logits);
        let probs: Vec<_> = routing.iter().map(|r| s.graph.value(r.route.p)).collect();

        let mut row = 0;
        let mut still = Vec::with_capacity(active.len());
        for (j, &i) in active.iter().enumerate() {
            row += dec_in[j].len();
            let last = row - 1;
            let next = argmax(lv.row(last));
            let votes: Vec<ErrorType> = probs
                .iter()
                .map(|p| ErrorType::from_index(argmax(p.row(last))).unwrap_or(ErrorType::None))
                .collect();
            out[i].types.push(vote_error_type(&votes).unwrap_or(ErrorType::None));
            if next == END {
                continue;
            }
            if out[i].tokens.len() == limit {
                out[i].truncated = true;
                out[i].types.pop();
                continue;
            }
            out[i].tokens.push(next);
            still.push(i);
        }
        active = still;
    }
    Ok(out)
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
