use super::{Edit, ErrorType};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLabels {
    pub labels: Vec<ErrorType>,
    pub end_label: ErrorType,
}

/// Target-side labels from typed source-side edits.
///
/// Tokens produced by a replacement take the edit's type. A pure deletion
/// labels the target token right after the deletion point, or the end
/// position when nothing follows.
pub fn label_tokens(target: &[String], edits: &[Edit]) -> Result<TokenLabels> {
    let mut labels = vec![ErrorType::None; target.len()];
    let mut end_label = ErrorType::None;
    let mut offset: isize = 0;
    let mut prev_end: Option<usize> = None;
    let mut deleted_at = Vec::new();
    for e in edits {
        if e.start > e.end {
            return Err(Error::invalid(format!("edit span {}..{} is reversed", e.start, e.end)));
        }
        if let Some(pe) = prev_end {
            if e.start < pe {
                return Err(Error::invalid(format!(
                    "edit {}..{} overlaps the previous edit ending at {pe}",
                    e.start, e.end
                )));
            }
        }
        prev_end = Some(e.end);
        let t_start = e.start as isize + offset;
        let n_new = e.replacement_tokens().count();
        if t_start < 0 || t_start as usize + n_new > target.len() {
            return Err(Error::invalid(format!(
                "edit {}..{} maps outside the {}-token target",
                e.start,
                e.end,
                target.len()
            )));
        }
        let t_start = t_start as usize;
        if n_new == 0 {
            deleted_at.push((t_start, e.error_type));
        } else {
            for l in &mut labels[t_start..t_start + n_new] {
                *l = e.error_type;
            }
        }
        offset += n_new as isize - (e.end - e.start) as isize;
    }
    // Replacement tokens keep their own type over a neighbouring deletion.
    for (pos, ty) in deleted_at {
        match labels.get_mut(pos) {
            Some(l) if *l == ErrorType::None => *l = ty,
            Some(_) => {}
            None => end_label = ty,
        }
    }
    Ok(TokenLabels { labels, end_label })
}
