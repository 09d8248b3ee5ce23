use super::real::Real;
use crate::error::{Error, Result};

/// The `k` largest entries in descending order; equal values keep the lower
/// index first. Selection is a plain index computation and is never recorded
/// on a tape.
pub fn topk<F: Real>(x: &[F], k: usize) -> Result<(Vec<F>, Vec<usize>)> {
    if k == 0 || k > x.len() {
        return Err(Error::invalid(format!(
            "topk: k = {k} outside 1..={}",
            x.len()
        )));
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, v) in x.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            match best {
                Some(b) if x[b] >= *v => {}
                _ => best = Some(i),
            }
        }
        chosen.push(best.expect("k <= len"));
    }
    Ok((chosen.iter().map(|&i| x[i]).collect(), chosen))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maximum_and_tie_break() {
        let (v, i) = topk(&[0.1f64, 0.7, 0.2], 1).unwrap();
        assert_eq!((v[0], i[0]), (0.7, 1));
        let (_, i) = topk(&[0.5f64, 0.5], 1).unwrap();
        assert_eq!(i, vec![0]);
        let (_, i) = topk(&[0.2f64, 0.5, 0.5, 0.1], 3).unwrap();
        assert_eq!(i, vec![1, 2, 0]);
    }

    #[test]
    fn k_out_of_range() {
        assert!(topk(&[1.0f32, 2.0], 0).is_err());
        assert!(topk(&[1.0f32, 2.0], 3).is_err());
    }
}
