use super::{Edit, ErrorType};
use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Op {
    Match,
    Delete,
    Insert,
    Substitute,
}

/// Token-level Levenshtein alignment turned into span edits.
///
/// The backtrace from the end prefers match, then deletion, insertion and
/// substitution, which pushes non-matching operations as far left as
/// possible. Runs of consecutive non-match operations become one edit.
/// Returned edits carry `ErrorType::None` until typed.
pub fn extract_edits(source: &[String], target: &[String]) -> Vec<Edit> {
    let (n, m) = (source.len(), target.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(source[i - 1] != target[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }

    // (op, source index before the op, target index before the op)
    let mut ops = Vec::with_capacity(n + m);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cur = d[i * w + j];
        let op = if i > 0 && j > 0 && source[i - 1] == target[j - 1] && d[(i - 1) * w + j - 1] == cur {
            Op::Match
        } else if i > 0 && d[(i - 1) * w + j] + 1 == cur {
            Op::Delete
        } else if j > 0 && d[i * w + j - 1] + 1 == cur {
            Op::Insert
        } else {
            Op::Substitute
        };
        match op {
            Op::Match | Op::Substitute => {
                i -= 1;
                j -= 1;
            }
            Op::Delete => i -= 1,
            Op::Insert => j -= 1,
        }
        ops.push((op, i, j));
    }
    ops.reverse();

    let mut edits = Vec::new();
    let mut k = 0;
    while k < ops.len() {
        if ops[k].0 == Op::Match {
            k += 1;
            continue;
        }
        let (_, s0, t0) = ops[k];
        let (mut s1, mut t1) = (s0, t0);
        while k < ops.len() && ops[k].0 != Op::Match {
            match ops[k].0 {
                Op::Delete => s1 += 1,
                Op::Insert => t1 += 1,
                _ => {
                    s1 += 1;
                    t1 += 1;
                }
            }
            k += 1;
        }
        edits.push(Edit::new(s0, s1, target[t0..t1].join(" "), ErrorType::None));
    }
    edits
}

/// Applies edits (sorted by start, non-overlapping) to `source`.
pub fn apply_edits(source: &[String], edits: &[Edit]) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(source.len() + 4);
    let mut cursor = 0;
    let mut last_insertion_at = None;
    for e in edits {
        if e.start > e.end || e.end > source.len() {
            return Err(Error::invalid(format!(
                "edit span {}..{} out of range for a {}-token source",
                e.start,
                e.end,
                source.len()
            )));
        }
        if e.start < cursor {
            return Err(Error::invalid(format!(
                "edit {}..{} overlaps or precedes the previous edit",
                e.start, e.end
            )));
        }
        if e.start == e.end {
            if last_insertion_at == Some(e.start) {
                return Err(Error::invalid(format!("two insertions at position {}", e.start)));
            }
            last_insertion_at = Some(e.start);
        }
        out.extend_from_slice(&source[cursor..e.start]);
        out.extend(e.replacement_tokens().map(str::to_string));
        cursor = e.end;
    }
    out.extend_from_slice(&source[cursor..]);
    Ok(out)
}
