use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Param};

/// Affine classifier `softmax(f·W + b)` over raw embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxLayer {
    pub weight: Param,
    pub bias: Param,
}

impl SoftmaxLayer {
    /// Weights uniform in `[−1/√e, 1/√e]`, zero bias.
    pub fn new<R: Rng + ?Sized>(embed_dim: usize, classes: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (embed_dim as f64).sqrt();
        SoftmaxLayer {
            weight: Param::new(
                "softmax.weight",
                Matrix::from_fn(embed_dim, classes, |_, _| rng.gen_range(-bound..=bound)),
            ),
            bias: Param::new("softmax.bias", Matrix::zeros(1, classes)),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn probabilities(&self, emb: &Matrix) -> Result<Matrix> {
        let mut logits = emb.matmul(&self.weight.value)?;
        for i in 0..logits.rows() {
            let row = logits.row_mut(i);
            for (v, b) in row.iter_mut().zip(self.bias.value.as_slice()) {
                *v += b;
            }
            softmax_in_place(row);
        }
        Ok(logits)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// `(1 − γ)·onehot(label) + γ/C`
pub fn smoothed_targets(label: usize, classes: usize, gamma: f64) -> Vec<f64> {
    let c = classes as f64;
    let mut t = vec![gamma / c; classes];
    // 1 − γ(C−1)/C rounds better than (1 − γ) + γ/C
    t[label] = 1.0 - gamma * (c - 1.0) / c;
    t
}

#[derive(Debug, Clone)]
pub struct SmoothedCeOutput {
    pub loss: f64,
    pub grad_emb: Matrix,
    pub grad_weight: Matrix,
    pub grad_bias: Matrix,
}

/// Label-smoothed cross-entropy, averaged over the batch.
pub fn smoothed_ce(emb: &Matrix, labels: &[usize], layer: &SoftmaxLayer, gamma: f64) -> Result<SmoothedCeOutput> {
    let n = emb.rows();
    let classes = layer.classes();
    if labels.len() != n {
        return Err(Error::shape("smoothed_ce (labels)", n, labels.len()));
    }
    if emb.cols() != layer.weight.value.rows() {
        return Err(Error::shape("smoothed_ce (embedding)", layer.weight.value.rows(), emb.cols()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let probs = layer.probabilities(emb)?;
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    // ∂ℓ/∂logits = p − yˢ since yˢ sums to one
    let mut grad_logits = Matrix::zeros(n, classes);
    for (i, &y) in labels.iter().enumerate() {
        let targets = smoothed_targets(y, classes, gamma);
        for (k, &t) in targets.iter().enumerate() {
            let p = probs[(i, k)];
            if t > 0.0 {
                loss -= t * p.max(f64::MIN_POSITIVE).ln();
            }
            grad_logits[(i, k)] = (p - t) * scale;
        }
    }
    let grad_weight = emb.t_matmul(&grad_logits)?;
    let mut grad_bias = Matrix::zeros(1, classes);
    for i in 0..n {
        for k in 0..classes {
            grad_bias[(0, k)] += grad_logits[(i, k)];
        }
    }
    let grad_emb = grad_logits.matmul_t(&layer.weight.value)?;
    Ok(SmoothedCeOutput {
        loss: loss * scale,
        grad_emb,
        grad_weight,
        grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(weight: Matrix, bias: Vec<f64>) -> SoftmaxLayer {
        let c = bias.len();
        SoftmaxLayer {
            weight: Param::new("w", weight),
            bias: Param::new("b", Matrix::from_vec(1, c, bias).unwrap()),
        }
    }

    #[test]
    fn targets_two_classes() {
        assert_eq!(smoothed_targets(0, 2, 0.15), vec![0.925, 0.075]);
        assert_eq!(smoothed_targets(1, 2, 0.15), vec![0.075, 0.925]);
    }

    #[test]
    fn confident_one_hot_is_zero() {
        // logits (800, 0): probability of class 0 rounds to exactly 1
        let l = layer(Matrix::from_rows(&[vec![800.0, 0.0]]).unwrap(), vec![0.0, 0.0]);
        let emb = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let out = smoothed_ce(&emb, &[0], &l, 0.0).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn matching_distribution_gives_entropy() {
        // bias chosen so softmax = (0.925, 0.075)
        let l = layer(Matrix::zeros(1, 2), vec![0.925f64.ln(), 0.075f64.ln()]);
        let emb = Matrix::from_rows(&[vec![0.3]]).unwrap();
        let out = smoothed_ce(&emb, &[0], &l, 0.15).unwrap();
        let entropy = -(0.925f64 * 0.925f64.ln() + 0.075 * 0.075f64.ln());
        assert!((out.loss - entropy).abs() < 1e-12);
        assert!((out.loss - 0.2664).abs() < 1e-4);
        assert!(out.grad_bias.as_slice().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn label_out_of_range() {
        let l = layer(Matrix::zeros(1, 2), vec![0.0, 0.0]);
        let emb = Matrix::from_rows(&[vec![0.3]]).unwrap();
        assert!(smoothed_ce(&emb, &[2], &l, 0.15).is_err());
    }
}
