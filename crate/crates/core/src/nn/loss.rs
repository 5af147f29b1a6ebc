//! Softmax cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    if logits.shape().len() != 2 {
        return Err(Error::dim(format!(
            "logits must be batch × classes, got shape {:?}",
            logits.shape()
        )));
    }
    if logits.rows() != labels.len() {
        return Err(Error::dim(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let classes = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::domain(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(classes)
}

/// Numerically stable `ln Σ exp(row)`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

/// Per-example losses `lse(z) - z_y`.
pub fn per_example_losses(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = logits.row(i);
            (log_sum_exp(row) - row[y]).max(0.0)
        })
        .collect())
}

/// Mean cross-entropy over the batch.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::domain("cross-entropy of an empty batch"));
    }
    let losses = per_example_losses(logits, labels)?;
    Ok(losses.iter().sum::<f64>() / labels.len() as f64)
}

/// Losses and the unscaled logit gradient `softmax(z) - onehot(y)` for every row.
pub(crate) fn losses_and_delta(logits: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let classes = check_labels(logits, labels)?;
    let mut losses = Vec::with_capacity(labels.len());
    let mut delta = Vec::with_capacity(logits.len());
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        losses.push((log_sum_exp(row) - row[y]).max(0.0));
        let mut p = softmax(row);
        p[y] -= 1.0;
        delta.extend_from_slice(&p);
    }
    debug_assert_eq!(delta.len(), labels.len() * classes);
    Ok((losses, delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_ln_classes() {
        let logits = Tensor::new(vec![2, 10], vec![3.7; 20]).unwrap();
        let l = cross_entropy(&logits, &[4, 9]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_is_near_zero() {
        let logits = Tensor::new(vec![1, 2], vec![30.0, -30.0]).unwrap();
        assert!(cross_entropy(&logits, &[0]).unwrap() <= 1e-9);
        // Saturated wrong: no overflow.
        let huge = Tensor::new(vec![1, 2], vec![800.0, -800.0]).unwrap();
        assert!((cross_entropy(&huge, &[1]).unwrap() - 1600.0).abs() < 1e-9);
    }

    #[test]
    fn matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (b, c) = (16, 7);
        let data: Vec<f64> = (0..b * c).map(|_| rng.random_range(-4.0..4.0)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let logits = Tensor::new(vec![b, c], data.clone()).unwrap();
        // Direct: -ln(exp(z_y) / Σ exp(z_j)), no max shift.
        let direct: f64 = (0..b)
            .map(|i| {
                let row = &data[i * c..(i + 1) * c];
                let denom: f64 = row.iter().map(|z| z.exp()).sum();
                -(row[labels[i]].exp() / denom).ln()
            })
            .sum::<f64>()
            / b as f64;
        let got = cross_entropy(&logits, &labels).unwrap();
        assert!((got - direct).abs() <= 1e-12 * direct.abs().max(1.0));
    }

    #[test]
    fn label_out_of_range_is_domain_error() {
        let logits = Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(cross_entropy(&logits, &[3]), Err(Error::Domain(_))));
        assert!(matches!(cross_entropy(&logits, &[0, 1]), Err(Error::Dimension(_))));
    }
}
