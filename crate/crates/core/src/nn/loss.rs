use ndarray::Array2;

use crate::error::{shape_err, Error, Result};

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `softmax(logits)` against `target`, with its gradient
/// `softmax(logits) - onehot(target)`.
pub fn softmax_ce(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::OutOfRange(format!(
            "target {target} outside [0, {})",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - logits[target];
    let mut grad: Vec<f64> = logits.iter().map(|&l| (l - log_sum).exp()).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Mean squared error and its gradient `2 (pred - target) / n`.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(shape_err(format!(
            "mse over {} vs {} elements",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
    Ok((loss, grad))
}

/// Batched MSE over equally shaped matrices.
pub fn mse_matrix(pred: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() {
        return Err(shape_err(format!("mse over {:?} vs {:?}", pred.dim(), target.dim())));
    }
    let n = pred.len() as f64;
    let diff = pred - target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff * (2.0 / n)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{finite_difference, max_rel_error};

    #[test]
    fn ce_examples() {
        let (l, g) = softmax_ce(&[0.0, 0.0], 0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);

        let (l, _) = softmax_ce(&[10.0, -10.0], 0).unwrap();
        // ln(1 + e^-20)
        assert!((l - 2.061_153_618_190_204_5e-9).abs() < 1e-15);

        assert!(matches!(softmax_ce(&[0.0, 1.0], 2), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn ce_gradient() {
        let mut x = vec![0.3, -1.2, 2.5, 0.0];
        let (_, g) = softmax_ce(&x, 2).unwrap();
        let fd = finite_difference(&mut x, 1e-5, |v| softmax_ce(v, 2).unwrap().0);
        assert!(max_rel_error(&g, &fd) < 1e-6);
    }

    #[test]
    fn ce_extreme_logits_finite() {
        let (l, g) = softmax_ce(&[1e3, -1e3, 0.0], 1).unwrap();
        assert!(l.is_finite() && g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mse_examples() {
        let (l, g) = mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
        let (l, _) = mse(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(l, 0.5);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mse_gradient() {
        let t = [0.5, -0.25, 1.0];
        let mut p = vec![0.1, 0.2, -0.3];
        let (_, g) = mse(&p, &t).unwrap();
        let fd = finite_difference(&mut p, 1e-5, |v| mse(v, &t).unwrap().0);
        assert!(max_rel_error(&g, &fd) < 1e-8);
    }
}
