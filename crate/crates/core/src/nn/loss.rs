use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Numerically stable softmax of a logit slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of a single logit vector against a class index.
///
/// Returns the loss and its gradient `softmax(logits) - onehot(label)`.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let k = logits.len();
    if logits.shape().len() != 1 || k < 2 {
        return Err(Error::ShapeMismatch {
            context: "softmax_cross_entropy logits",
            left: logits.shape().to_vec(),
            right: vec![2],
        });
    }
    if label >= k {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    logits.ensure_finite("softmax_cross_entropy logits")?;
    let probs = softmax(logits.data());
    let loss = -probs[label].ln();
    let mut grad = probs;
    grad[label] -= 1.0;
    Ok((loss, Tensor::from_vec(grad)))
}

/// Summed cross-entropy over a `[N, K]` logit batch.
///
/// The gradient is per-row `softmax - onehot`; divide by `N` at the call
/// site if a mean is wanted.
pub fn softmax_cross_entropy_batch(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "softmax_cross_entropy_batch",
            left: shape.to_vec(),
            right: vec![labels.len(), 0],
        });
    }
    let k = shape[1];
    let mut total = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (row, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let lo = &logits.data()[row * k..(row + 1) * k];
        let probs = softmax(lo);
        total -= probs[label].ln();
        let grow = &mut grad[row * k..(row + 1) * k];
        grow.copy_from_slice(&probs);
        grow[label] -= 1.0;
    }
    Ok((total, Tensor::new(shape.to_vec(), grad)?))
}

/// Mean squared error and its gradient `2 (pred - target) / n`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    pred.same_shape(target, "mse_loss")?;
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (g, (&p, &t)) in grad.iter_mut().zip(pred.data().iter().zip(target.data().iter())) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, Tensor::new(pred.shape().to_vec(), grad)?))
}
