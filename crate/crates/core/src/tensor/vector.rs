use crate::error::{Error, Result};

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Indices of the `k` largest entries, in descending value order.
/// Ties go to the lower index.
pub fn top_k_select(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::InvalidArgument(format!(
            "top-k with k = {k} over {} values",
            v.len()
        )));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| {
        v[b].partial_cmp(&v[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_and_singleton() {
        let s = softmax(&[0.0, 0.0, 0.0]);
        for x in s {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax(&[42.0]), vec![1.0]);
    }

    #[test]
    fn softmax_closed_form() {
        let s = softmax(&[2f64.ln(), 0.0]);
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let s = softmax(&[1000.0, 999.0, -1000.0]);
        assert!(s.iter().all(|x| x.is_finite()));
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn top_k_cases() {
        assert_eq!(top_k_select(&[3.0, 1.0, 2.0], 3).unwrap().len(), 3);
        assert_eq!(top_k_select(&[5.0, 5.0, 1.0], 1).unwrap(), vec![0]);
        let mut sel = top_k_select(&[0.1, 0.9, 0.5, 0.7], 2).unwrap();
        sel.sort();
        assert_eq!(sel, vec![1, 3]);
    }

    #[test]
    fn top_k_range_errors() {
        assert!(top_k_select(&[1.0], 0).is_err());
        assert!(top_k_select(&[1.0], 2).is_err());
    }
}
