//! Linear embedding heads `f(x) = xᵀW`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Param};

/// A bias-free `d × e` linear map from features to embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingHead {
    pub weight: Param,
}

impl EmbeddingHead {
    /// Entries are i.i.d. uniform in `[−1/√d, 1/√d]`.
    pub fn new<R: Rng + ?Sized>(name: impl Into<String>, dim: usize, embed_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let w = Matrix::from_fn(dim, embed_dim, |_, _| rng.gen_range(-bound..=bound));
        EmbeddingHead {
            weight: Param::new(name, w),
        }
    }

    pub fn from_weight(name: impl Into<String>, w: Matrix) -> Self {
        EmbeddingHead {
            weight: Param::new(name, w),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.value.cols()
    }

    /// `X · W` for an `N × d` input.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("embed", self.input_dim(), x.cols()));
        }
        x.matmul(&self.weight.value)
    }

    /// Accumulates `Xᵀ · upstream` into the weight gradient and returns the
    /// input gradient `upstream · Wᵀ`.
    pub fn embed_backward(&mut self, x: &Matrix, upstream: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() || upstream.cols() != self.embed_dim() || x.rows() != upstream.rows() {
            return Err(Error::shape(
                "embed_backward",
                format!("X: N×{}, upstream: N×{}", self.input_dim(), self.embed_dim()),
                format!("X: {:?}, upstream: {:?}", x.shape(), upstream.shape()),
            ));
        }
        if self.weight.grad.shape() != self.weight.value.shape() {
            self.weight.zero_grad();
        }
        let grad_w = x.t_matmul(upstream)?;
        self.weight.grad.add_scaled(&grad_w, 1.0)?;
        upstream.matmul_t(&self.weight.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_product(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                for k in 0..a.cols() {
                    out[(i, j)] += a[(i, k)] * b[(k, j)];
                }
            }
        }
        out
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_and_zero() {
        let head = EmbeddingHead::from_weight("w", Matrix::identity(3));
        let x = Matrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64);
        assert_eq!(head.embed(&x).unwrap(), x);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = EmbeddingHead::new("w", 3, 2, &mut rng);
        assert_eq!(head.embed(&Matrix::zeros(4, 3)).unwrap(), Matrix::zeros(4, 2));
    }

    #[test]
    fn init_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = EmbeddingHead::new("w", 16, 8, &mut rng);
        assert!(head.weight.value.as_slice().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn forward_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(5, 7, &mut rng);
        let head = EmbeddingHead::new("w", 7, 3, &mut rng);
        let got = head.embed(&x).unwrap();
        let want = naive_product(&x, &head.weight.value);
        for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn scalar_chain_rule() {
        let mut head = EmbeddingHead::from_weight("w", Matrix::from_vec(1, 1, vec![3.0]).unwrap());
        let x = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let up = Matrix::from_vec(1, 1, vec![5.0]).unwrap();
        let gx = head.embed_backward(&x, &up).unwrap();
        assert_eq!(head.weight.grad[(0, 0)], 10.0);
        assert_eq!(gx[(0, 0)], 15.0);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut head = EmbeddingHead::new("w", 4, 2, &mut rng);
        let x = random(3, 4, &mut rng);
        let gx = head.embed_backward(&x, &Matrix::zeros(3, 2)).unwrap();
        assert!(gx.as_slice().iter().all(|&v| v == 0.0));
        assert!(head.weight.grad.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut head = EmbeddingHead::new("w", 4, 2, &mut rng);
        assert!(head.embed(&Matrix::zeros(2, 3)).is_err());
        assert!(head.embed_backward(&Matrix::zeros(2, 4), &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(4, 5, &mut rng);
        let up = random(4, 3, &mut rng);
        let mut head = EmbeddingHead::new("w", 5, 3, &mut rng);
        // objective: <upstream, X·W>
        let gx = head.embed_backward(&x, &up).unwrap();
        let w0 = head.weight.value.clone();
        let check_w = finite_diff_check(
            |w| {
                let wm = Matrix::from_vec(5, 3, w.to_vec())?;
                Ok(crate::numcore::dot(x.matmul(&wm)?.as_slice(), up.as_slice()))
            },
            w0.as_slice(),
            head.weight.grad.as_slice(),
            1e-6,
        )
        .unwrap();
        let check_x = finite_diff_check(
            |xs| {
                let xm = Matrix::from_vec(4, 5, xs.to_vec())?;
                Ok(crate::numcore::dot(xm.matmul(&w0)?.as_slice(), up.as_slice()))
            },
            x.as_slice(),
            gx.as_slice(),
            1e-6,
        )
        .unwrap();
        assert!(check_w.max_rel_error <= 1e-6);
        assert!(check_x.max_rel_error <= 1e-6);
    }

    proptest::proptest! {
        #[test]
        fn forward_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let head = EmbeddingHead::new("w", 6, 4, &mut rng);
            let x = random(3, 6, &mut rng);
            let y = random(3, 6, &mut rng);
            let mut combo = x.clone();
            combo.scale(a);
            combo.add_scaled(&y, b).unwrap();
            let lhs = head.embed(&combo).unwrap();
            let mut rhs = head.embed(&x).unwrap();
            rhs.scale(a);
            rhs.add_scaled(&head.embed(&y).unwrap(), b).unwrap();
            for (l, r) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                proptest::prop_assert!((l - r).abs() <= 1e-10);
            }
        }
    }
}
