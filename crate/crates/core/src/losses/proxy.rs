use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numcore::{normalize_rows, sq_dist, Matrix, Param};

/// One learnable proxy per training class.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyBank {
    pub proxies: Param,
}

impl ProxyBank {
    /// Random unit-length proxies.
    pub fn new<R: Rng + ?Sized>(classes: usize, embed_dim: usize, rng: &mut R) -> Self {
        let raw = Matrix::from_fn(classes, embed_dim, |_, _| StandardNormal.sample(rng));
        let mut bank = ProxyBank {
            proxies: Param::new("proxies", raw),
        };
        bank.renormalize();
        bank
    }

    pub fn from_matrix(m: Matrix) -> Self {
        ProxyBank {
            proxies: Param::new("proxies", m),
        }
    }

    pub fn classes(&self) -> usize {
        self.proxies.value.rows()
    }

    /// Projects every proxy row back to unit length.
    pub fn renormalize(&mut self) {
        self.proxies.value = normalize_rows(&self.proxies.value).unit;
    }
}

#[derive(Debug, Clone)]
pub struct ProxyNcaOutput {
    pub loss: f64,
    pub grad_emb: Matrix,
    /// Gradient with respect to the raw (pre-normalization) proxy rows.
    pub grad_proxies: Matrix,
}

/// Proxy-NCA over unit-normalized embeddings.
///
/// Per sample: `d(x, p_y) + ln Σ_{z≠y} exp(−d(x, p_z))` with squared
/// Euclidean `d` against the unit-normalized proxies, averaged over the
/// batch. The denominator excludes the positive proxy, so the loss can be
/// negative.
pub fn proxy_nca(emb: &Matrix, labels: &[usize], bank: &ProxyBank) -> Result<ProxyNcaOutput> {
    let n = emb.rows();
    let classes = bank.classes();
    if labels.len() != n {
        return Err(Error::shape("proxy_nca (labels)", n, labels.len()));
    }
    if classes < 2 {
        return Err(Error::InvalidArgument(
            "Proxy-NCA needs at least 2 training classes".into(),
        ));
    }
    if bank.proxies.value.cols() != emb.cols() {
        return Err(Error::shape("proxy_nca (proxies)", emb.cols(), bank.proxies.value.cols()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} has no proxy ({classes} proxies)"
        )));
    }

    let normalized = normalize_rows(&bank.proxies.value);
    let proxies = &normalized.unit;
    let mut grad_emb = Matrix::zeros(n, emb.cols());
    let mut grad_unit = Matrix::zeros(classes, emb.cols());
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    let mut dists = vec![0.0; classes];
    let mut coef = vec![0.0; classes];

    for (i, &y) in labels.iter().enumerate() {
        let x = emb.row(i);
        for (z, d) in dists.iter_mut().enumerate() {
            *d = sq_dist(x, proxies.row(z));
        }
        // log-sum-exp of −d over the negatives
        let max_neg = dists
            .iter()
            .enumerate()
            .filter(|&(z, _)| z != y)
            .map(|(_, &d)| -d)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (z, &d) in dists.iter().enumerate() {
            if z != y {
                sum += (-d - max_neg).exp();
            }
        }
        let lse = max_neg + sum.ln();
        total += dists[y] + lse;

        // ∂ℓ/∂d_y = 1, ∂ℓ/∂d_z = −softmax_z(−d) over negatives
        for (z, c) in coef.iter_mut().enumerate() {
            *c = if z == y {
                1.0
            } else {
                -(-dists[z] - lse).exp()
            };
        }
        for (z, &c) in coef.iter().enumerate() {
            let p = proxies.row(z);
            let g = 2.0 * c * scale;
            for k in 0..emb.cols() {
                let diff = x[k] - p[k];
                grad_emb[(i, k)] += g * diff;
                grad_unit[(z, k)] -= g * diff;
            }
        }
    }
    let grad_proxies = normalized.backward(&grad_unit);
    Ok(ProxyNcaOutput {
        loss: total * scale,
        grad_emb,
        grad_proxies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_distances_give_zero() {
        // x on the bisector of two unit proxies
        let bank = ProxyBank::from_matrix(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let h = 0.5f64.sqrt();
        let emb = Matrix::from_rows(&[vec![h, h]]).unwrap();
        let out = proxy_nca(&emb, &[0], &bank).unwrap();
        assert!(out.loss.abs() < 1e-12);
    }

    #[test]
    fn at_own_proxy_with_one_negative_is_minus_two() {
        // d⁺ = 0, orthogonal negative proxy at d = 2
        let bank = ProxyBank::from_matrix(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let emb = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let out = proxy_nca(&emb, &[0], &bank).unwrap();
        assert!((out.loss + 2.0).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = ProxyBank::new(1, 3, &mut rng);
        let emb = Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert!(proxy_nca(&emb, &[0], &one).is_err());
        let two = ProxyBank::new(2, 3, &mut rng);
        assert!(proxy_nca(&emb, &[2], &two).is_err());
    }

    #[test]
    fn new_proxies_are_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = ProxyBank::new(5, 4, &mut rng);
        for r in bank.proxies.value.iter_rows() {
            assert!((crate::numcore::norm(r) - 1.0).abs() < 1e-12);
        }
    }
}
