use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Mean negative log-likelihood of the true class under a softmax of `logits [N, K]`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let [n, k] = logits.dims() else {
        return Err(Error::shape("cross_entropy", format!("logits must be [N, K], got {}", logits.shape())));
    };
    let (n, k) = (*n, *k);
    if labels.len() != n {
        return Err(Error::invalid("cross_entropy", format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid("cross_entropy", format!("label {bad} outside [0, {k})")));
    }
    let mut probs = logits.to_vec();
    let mut total = 0.0;
    for (row, &label) in probs.chunks_mut(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        total += (lse - row[label]).as_f64();
        row.iter_mut().for_each(|v| *v = (*v - lse).exp());
    }
    let labels = labels.to_vec();
    let loss = T::of(total / n as f64);
    Tensor::from_op("cross_entropy", Shape::scalar(), vec![loss], vec![logits.clone()], move |ctx| {
        let scale = ctx.grad[0] / T::of(n as f64);
        let mut g = probs.clone();
        for (row, &label) in g.chunks_mut(k).zip(&labels) {
            row[label] -= T::one();
            row.iter_mut().for_each(|v| *v *= scale);
        }
        vec![Some(g)]
    })
}
