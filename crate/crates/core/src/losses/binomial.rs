use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{dot, Matrix};

use super::LossOutput;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub similar: bool,
}

pub type PairSet = Vec<Pair>;

/// Every unordered pair `i < j` of the batch, labelled by class equality.
pub fn enumerate_pairs(labels: &[usize]) -> PairSet {
    let n = labels.len();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            out.push(Pair {
                i,
                j,
                similar: labels[i] == labels[j],
            });
        }
    }
    out
}

/// Where the negative-pair balance constant enters the deviance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NegativeBalance {
    /// `ln(1 + exp(β1 (s − β2) · C))`
    #[default]
    Exponent,
    /// `C · ln(1 + exp(β1 (s − β2)))`
    Multiplier,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinomialConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub c_neg: f64,
    pub c_mode: NegativeBalance,
}

impl Default for BinomialConfig {
    fn default() -> Self {
        BinomialConfig {
            beta1: 2.0,
            beta2: 0.5,
            c_neg: 25.0,
            c_mode: NegativeBalance::Exponent,
        }
    }
}

/// `ln(1 + eᶻ)` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss and `∂loss/∂s` of a single pair with cosine similarity `s`.
pub fn pair_deviance(s: f64, similar: bool, cfg: &BinomialConfig) -> (f64, f64) {
    let BinomialConfig {
        beta1,
        beta2,
        c_neg,
        c_mode,
    } = *cfg;
    if similar {
        let z = -beta1 * (s - beta2);
        (softplus(z), -beta1 * sigmoid(z))
    } else {
        match c_mode {
            NegativeBalance::Exponent => {
                let z = beta1 * (s - beta2) * c_neg;
                (softplus(z), beta1 * c_neg * sigmoid(z))
            }
            NegativeBalance::Multiplier => {
                let z = beta1 * (s - beta2);
                (c_neg * softplus(z), c_neg * beta1 * sigmoid(z))
            }
        }
    }
}

/// Binomial deviance over unit-normalized embeddings: mean over similar
/// pairs plus mean over dissimilar pairs (an empty side contributes 0).
pub fn binomial_deviance(emb: &Matrix, pairs: &[Pair], cfg: &BinomialConfig) -> Result<LossOutput> {
    let n = emb.rows();
    let mut grad = Matrix::zeros(n, emb.cols());
    let positives = pairs.iter().filter(|p| p.similar).count();
    let negatives = pairs.len() - positives;
    if pairs.is_empty() {
        return Ok(LossOutput {
            loss: 0.0,
            grad_emb: grad,
            empty: true,
        });
    }
    let (mut pos_sum, mut neg_sum) = (0.0, 0.0);
    for p in pairs {
        if p.i >= n || p.j >= n {
            return Err(Error::InvalidArgument(format!("pair {p:?} out of range for {n} rows")));
        }
        let s = dot(emb.row(p.i), emb.row(p.j));
        let (loss, dloss) = pair_deviance(s, p.similar, cfg);
        let weight = if p.similar {
            pos_sum += loss;
            1.0 / positives as f64
        } else {
            neg_sum += loss;
            1.0 / negatives as f64
        };
        let g = dloss * weight;
        for k in 0..emb.cols() {
            let (xi, xj) = (emb[(p.i, k)], emb[(p.j, k)]);
            grad[(p.i, k)] += g * xj;
            grad[(p.j, k)] += g * xi;
        }
    }
    let mean = |sum: f64, count: usize| if count == 0 { 0.0 } else { sum / count as f64 };
    Ok(LossOutput {
        loss: mean(pos_sum, positives) + mean(neg_sum, negatives),
        grad_emb: grad,
        empty: false,
    })
}
