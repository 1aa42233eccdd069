//! Fused softmax cross-entropy with a numerically stable log-sum-exp forward.

use super::{Error, Gradients, Result, Tensor};
use crate::num::Element;

impl<T: Element> Tensor<T> {
    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    ///
    /// `self` is `[B, C]`; returns a scalar. The backward rule is the usual
    /// `(softmax - onehot) / B`.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Tensor<T>> {
        if self.shape.len() != 2 {
            return Err(Error::contract(format!(
                "softmax_cross_entropy expects [B,C] logits, got {:?}",
                self.shape
            )));
        }
        let (b, c) = (self.shape[0], self.shape[1]);
        if labels.len() != b {
            return Err(Error::contract(format!(
                "label count {} does not match batch size {}",
                labels.len(),
                b
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::contract(format!(
                "label {} out of range for {} classes",
                bad, c
            )));
        }
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for i in 0..b {
            let row = &self.data[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..c {
                let e = (row[j] - m).exp();
                probs[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                probs[i * c + j] /= z;
            }
            let lse = m + z.ln();
            total += lse - row[labels[i]];
        }
        let mean = total / T::from_usize_(b);
        let tape = self.tape.clone();
        let node = self.node;
        let labels = labels.to_vec();
        Ok(Tensor::result(tape, vec![mean], vec![], move || {
            Box::new(move |gout: &[T], grads: &mut Gradients<T>| {
                if let Some(node) = node {
                    let slot = grads.slot_mut(node, b * c);
                    let scale = gout[0] / T::from_usize_(b);
                    for i in 0..b {
                        for j in 0..c {
                            let indicator = if labels[i] == j { T::one() } else { T::zero() };
                            slot[i * c + j] += (probs[i * c + j] - indicator) * scale;
                        }
                    }
                }
            })
        }))
    }
}
