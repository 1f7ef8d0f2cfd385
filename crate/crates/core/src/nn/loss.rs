use super::Tensor;
use crate::error::{Error, Result};

/// One-hot `[B, K]` rows for integer labels.
pub fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * k];
    for (row, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Label(format!("label {l} out of range for {k} classes")));
        }
        data[row * k + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), k], data)
}

/// Row-wise softmax of `[B, K]` logits, stabilized by subtracting the row max.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    logits.expect_rank(2, "softmax")?;
    let k = logits.shape()[1];
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(k.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean cross-entropy over the batch and its gradient `(S - y) / B`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<(f64, Tensor)> {
    logits.expect_rank(2, "softmax_cross_entropy")?;
    if labels.shape() != logits.shape() {
        return Err(Error::Shape(format!(
            "labels {:?} do not match logits {:?}",
            labels.shape(),
            logits.shape()
        )));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if b == 0 || k == 0 {
        return Err(Error::Shape("softmax_cross_entropy on an empty batch".into()));
    }
    for (r, row) in labels.data().chunks_exact(k).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Label(format!("label row {r} is not one-hot")));
        }
    }
    let mut grad = Vec::with_capacity(b * k);
    let mut loss = 0.0;
    for (o, y) in logits.data().chunks_exact(k).zip(labels.data().chunks_exact(k)) {
        let max = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + o.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (&oi, &yi) in o.iter().zip(y) {
            let log_s = oi - lse;
            if yi == 1.0 {
                loss -= log_s;
            }
            grad.push((log_s.exp() - yi) / b as f64);
        }
    }
    Ok((loss / b as f64, Tensor::new(vec![b, k], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::zeros(&[3, 45]);
        let (loss, _) = softmax_cross_entropy(&logits, &one_hot(&[0, 7, 44], 45).unwrap()).unwrap();
        assert!((loss - 45f64.ln()).abs() < 1e-12);
        assert!((loss - 3.8067).abs() < 1e-4);
    }

    #[test]
    fn confident_logits_give_zero_loss() {
        let mut logits = Tensor::zeros(&[1, 4]);
        logits.data_mut()[2] = 1e6;
        let (loss, grad) = softmax_cross_entropy(&logits, &one_hot(&[2], 4).unwrap()).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.all_finite());
    }

    #[test]
    fn rows_sum_to_one_and_labels_are_checked() {
        let logits = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 700.0]).unwrap();
        let s = softmax(&logits).unwrap();
        for row in s.data().chunks_exact(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let bad = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(softmax_cross_entropy(&logits, &bad), Err(Error::Label(_))));
        assert!(one_hot(&[3], 3).is_err());
    }
}
