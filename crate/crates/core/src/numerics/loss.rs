use super::Matrix;
use crate::error::{Error, Result};

/// Squared error summed over dimensions and averaged over the batch.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f32, Matrix)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            op: "mse_loss",
            left: pred.shape(),
            right: target.shape(),
        });
    }
    let batch = pred.rows().max(1) as f32;
    let mut total = 0.0f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    for ((g, &p), &t) in grad
        .data_mut()
        .iter_mut()
        .zip(pred.data())
        .zip(target.data())
    {
        let d = p - t;
        total += (d as f64) * (d as f64);
        *g = 2.0 * d / batch;
    }
    Ok(((total / batch as f64) as f32, grad))
}

/// Mean negative log-softmax of the true class. The gradient rows are
/// `(softmax − onehot) / batch`.
pub fn softmax_xent_loss(logits: &Matrix, labels: &[usize]) -> Result<(f32, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::Shape {
            op: "softmax_xent_loss",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    let classes = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let batch = logits.rows().max(1) as f32;
    let mut total = 0.0f64;
    let mut grad = Matrix::zeros(logits.rows(), classes);
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
        let log_sum = sum.ln();
        total += log_sum - (row[label] - max) as f64;
        let g = grad.row_mut(r);
        for (c, gv) in g.iter_mut().enumerate() {
            let p = (((row[c] - max) as f64).exp() / sum) as f32;
            *gv = (p - if c == label { 1.0 } else { 0.0 }) / batch;
        }
    }
    Ok(((total / batch as f64) as f32, grad))
}
