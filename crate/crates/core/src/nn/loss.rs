use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits. Uses log-sum-exp so large logits stay finite.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    if logits.shape().len() != 2 || logits.batch() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let classes = logits.row_len();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let batch = labels.len();
    let inv_batch = T::one() / T::from_usize(batch.max(1)).unwrap();
    let mut grad = Vec::with_capacity(logits.len());
    let mut total = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[label];
        for (c, &v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            let target = if c == label { T::one() } else { T::zero() };
            grad.push((p - target) * inv_batch);
        }
    }
    Ok((total * inv_batch, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Row-wise argmax (first maximum wins).
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.batch())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Number of rows whose argmax equals the label.
pub fn count_correct<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}
