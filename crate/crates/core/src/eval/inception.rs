//! Inception score over class posteriors.

use crate::error::{Error, Result};

/// `exp(E_x KL(p(y|x) ‖ p(y)))` per split of the rows of `probs`; returns the mean and
/// population standard deviation over splits. `0 · log 0` is taken as 0.
pub fn inception_score_from_probs(probs: &[Vec<f64>], n_splits: usize) -> Result<(f64, f64)> {
    let n = probs.len();
    if n_splits == 0 || n_splits > n {
        return Err(Error::Validation(format!(
            "{n_splits} splits for {n} images"
        )));
    }
    let k = probs[0].len();
    if k == 0 || probs.iter().any(|p| p.len() != k) {
        return Err(Error::Shape(
            "class posteriors must share a non-zero class count".into(),
        ));
    }
    let mut scores = Vec::with_capacity(n_splits);
    for s in 0..n_splits {
        let part = &probs[s * n / n_splits..(s + 1) * n / n_splits];
        let mut marginal = vec![0.0; k];
        for p in part {
            for (m, &v) in marginal.iter_mut().zip(p) {
                *m += v / part.len() as f64;
            }
        }
        let kl: f64 = part
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&marginal)
                    .filter(|(&v, _)| v > 0.0)
                    .map(|(&v, &m)| v * (v / m).ln())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / part.len() as f64;
        scores.push(kl.exp());
    }
    let mean = scores.iter().sum::<f64>() / n_splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n_splits as f64;
    Ok((mean, var.sqrt()))
}
