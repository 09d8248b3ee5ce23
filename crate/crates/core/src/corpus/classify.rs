use super::lexicon::{is_determiner, is_noun_pair, is_preposition, is_punctuation, is_verb_pair};
use super::{Edit, ErrorType};
use crate::error::{Error, Result};

/// Result of typing one edit. `unmatched` is set when no rule fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Classification {
    pub error_type: ErrorType,
    pub unmatched: bool,
}

/// Rule-based typer. The first rule that fires wins, in this order:
/// PUNCT, ORTH, DET, PREP, VERB_SVA, NOUN_NUM, SPELL.
///
/// Past the first two rules, tokens common to both sides (as lowercase
/// multisets) are removed, so "The rich" -> "Rich" is a determiner edit.
pub fn classify_edit(edit: &Edit, source: &[String]) -> Result<Classification> {
    if edit.start > edit.end || edit.end > source.len() {
        return Err(Error::invalid(format!(
            "edit span {}..{} out of range for a {}-token source",
            edit.start,
            edit.end,
            source.len()
        )));
    }
    let old: Vec<&str> = source[edit.start..edit.end].iter().map(String::as_str).collect();
    let new: Vec<&str> = edit.replacement_tokens().collect();
    let hit = |t| Ok(Classification { error_type: t, unmatched: false });

    let all: Vec<&str> = old.iter().chain(&new).copied().collect();
    if all.is_empty() {
        return Ok(Classification {
            error_type: ErrorType::None,
            unmatched: true,
        });
    }
    if all.iter().all(|t| is_punctuation(t)) {
        return hit(ErrorType::Punct);
    }
    if old.len() == new.len() && old != new && old.iter().zip(&new).all(|(a, b)| a.to_lowercase() == b.to_lowercase()) {
        return hit(ErrorType::Orth);
    }

    let (removed, added) = multiset_diff(&old, &new);
    let changed: Vec<&str> = removed.iter().chain(&added).copied().collect();
    if changed.is_empty() {
        return Ok(Classification {
            error_type: ErrorType::None,
            unmatched: true,
        });
    }
    if changed.iter().all(|t| is_determiner(&t.to_lowercase())) {
        return hit(ErrorType::Det);
    }
    if changed.iter().all(|t| is_preposition(&t.to_lowercase())) {
        return hit(ErrorType::Prep);
    }
    if let ([a], [b]) = (removed.as_slice(), added.as_slice()) {
        let (a, b) = (a.to_lowercase(), b.to_lowercase());
        if is_verb_pair(&a, &b) {
            return hit(ErrorType::VerbSva);
        }
        if is_noun_pair(&a, &b) {
            return hit(ErrorType::NounNum);
        }
        if same_letters(&a, &b) || char_distance(&a, &b) == 1 {
            return hit(ErrorType::Spell);
        }
    }
    Ok(Classification {
        error_type: ErrorType::None,
        unmatched: true,
    })
}

/// Types each edit in place; returns how many edits no rule matched.
pub fn type_edits(edits: &mut [Edit], source: &[String]) -> Result<usize> {
    let mut unmatched = 0;
    for e in edits.iter_mut() {
        let c = classify_edit(e, source)?;
        e.error_type = c.error_type;
        unmatched += usize::from(c.unmatched);
    }
    Ok(unmatched)
}

fn multiset_diff<'a>(old: &[&'a str], new: &[&'a str]) -> (Vec<&'a str>, Vec<&'a str>) {
    let mut added: Vec<&str> = new.to_vec();
    let mut removed = Vec::new();
    for &t in old {
        match added.iter().position(|a| a.eq_ignore_ascii_case(t)) {
            Some(p) => {
                added.remove(p);
            }
            None => removed.push(t),
        }
    }
    (removed, added)
}

fn same_letters(a: &str, b: &str) -> bool {
    if a == b {
        return false;
    }
    let mut x: Vec<char> = a.chars().collect();
    let mut y: Vec<char> = b.chars().collect();
    x.sort_unstable();
    y.sort_unstable();
    x == y
}

fn char_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}
