//! Regression losses.

use crate::error::{Error, Result};

/// Squared error `(p − q)²`.
pub fn mse_loss(prediction: f64, score: f64) -> f64 {
    let d = prediction - score;
    d * d
}

/// Mean squared error over a batch.
pub fn batch_mse(predictions: &[f64], scores: &[f64]) -> Result<f64> {
    if predictions.len() != scores.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions, {} scores",
            predictions.len(),
            scores.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyBatch("batch_mse".into()));
    }
    let total: f64 = predictions.iter().zip(scores).map(|(&p, &q)| mse_loss(p, q)).sum();
    Ok(total / predictions.len() as f64)
}

/// Unweighted sum of the three per-format losses.
pub fn multitask_loss(ref_loss: f64, src_loss: f64, src_ref_loss: f64) -> f64 {
    ref_loss + src_loss + src_ref_loss
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(0.5, 0.5), 0.0);
        assert_eq!(mse_loss(1.0, 0.0), 1.0);
        assert!((mse_loss(0.3, 0.7) - 0.16).abs() < 1e-15);
        assert_eq!(batch_mse(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
        assert!(batch_mse(&[], &[]).is_err());
    }

    #[test]
    fn multitask_examples() {
        assert!((multitask_loss(0.1, 0.2, 0.3) - 0.6).abs() < 1e-15);
        assert_eq!(multitask_loss(0.0, 0.0, 0.0), 0.0);
        assert_eq!(multitask_loss(1.0, 2.0, 4.0), multitask_loss(4.0, 1.0, 2.0));
    }
}
