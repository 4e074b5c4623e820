//! Classification losses.
//!
//! A model with `k >= 2` outputs is a softmax classifier. A model with a single
//! output is a binary logit model: `P(y = 1) = sigmoid(z)`, and its class
//! probabilities are reported as `[1 - p, p]` so downstream metrics see two
//! columns either way.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean loss, class probabilities and the gradient of the mean loss with
/// respect to the logits.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub probs: Tensor,
    pub dlogits: Tensor,
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::dim(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::input(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.cols();
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::from_raw(vec![logits.rows(), k], out)
}

/// Class probabilities for either head type.
pub fn class_probs(logits: &Tensor) -> Tensor {
    if logits.cols() == 1 {
        let data = logits
            .data()
            .iter()
            .flat_map(|&z| {
                let p = sigmoid(z);
                [1.0 - p, p]
            })
            .collect();
        Tensor::from_raw(vec![logits.rows(), 2], data)
    } else {
        softmax_rows(logits)
    }
}

/// Mean softmax cross-entropy and the probability rows.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let out = softmax_loss(logits, labels)?;
    Ok((out.loss, out.probs))
}

fn softmax_loss(logits: &Tensor, labels: &[usize]) -> Result<LossOutput> {
    logits.ensure_matrix("logits")?;
    let (b, k) = (logits.rows(), logits.cols());
    if k < 2 {
        return Err(Error::input("softmax needs at least two classes"));
    }
    check_labels(labels, b, k)?;
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = probs.data().to_vec();
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        grad[i * k + y] -= 1.0;
    }
    let inv = 1.0 / b as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(LossOutput {
        loss: loss * inv,
        probs,
        dlogits: Tensor::from_raw(vec![b, k], grad),
    })
}

fn logistic_loss(logits: &Tensor, labels: &[usize]) -> Result<LossOutput> {
    let b = logits.rows();
    check_labels(labels, b, 2)?;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b);
    for (&z, &y) in logits.data().iter().zip(labels) {
        let t = y as f64;
        loss += softplus(z) - t * z;
        grad.push((sigmoid(z) - t) / b as f64);
    }
    Ok(LossOutput {
        loss: loss / b as f64,
        probs: class_probs(logits),
        dlogits: Tensor::from_raw(vec![b, 1], grad),
    })
}

/// Dispatches on the head: one logit column means binary logistic loss.
pub fn classification_loss(logits: &Tensor, labels: &[usize]) -> Result<LossOutput> {
    logits.ensure_matrix("logits")?;
    if logits.cols() == 1 {
        logistic_loss(logits, labels)
    } else {
        softmax_loss(logits, labels)
    }
}
