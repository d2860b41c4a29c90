use super::layers::sigmoid_scalar;
use super::Tensor;
use crate::error::{Error, Result};

/// Mean softmax cross-entropy over the rows of `logits: [n, C]`.
///
/// Returns the loss and `∂loss/∂logits`, already divided by `n`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, classes) = (logits.rows(), logits.cols());
    if n != labels.len() {
        return Err(Error::input(format!(
            "{n} logit rows but {} labels",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::input("empty batch"));
    }
    let mut grad = Tensor::zeros(&[n, classes]);
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::input(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - row[label];
        let g = &mut grad.data_mut()[i * classes..(i + 1) * classes];
        for (gc, &v) in g.iter_mut().zip(row) {
            *gc = (v - log_z).exp() * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok((total * inv_n, grad))
}

/// Mean binary cross-entropy of sigmoid(logit) against 0/1 targets,
/// averaged over every element of `logits`.
pub fn sigmoid_bce(logits: &Tensor, targets: &[f64]) -> Result<(f64, Tensor)> {
    if logits.len() != targets.len() {
        return Err(Error::input(format!(
            "{} logits but {} targets",
            logits.len(),
            targets.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let inv = 1.0 / logits.len() as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for ((g, &z), &t) in grad.data_mut().iter_mut().zip(logits.data()).zip(targets) {
        // max(z, 0) - z t + ln(1 + e^{-|z|})
        total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        *g = (sigmoid_scalar(z) - t) * inv;
    }
    Ok((total * inv, grad))
}
