//! Dense numeric kernel: matrices, trainable parameters, Adam, cosine
//! annealing, row normalization and a finite-difference gradient checker.

mod adam;
mod gradcheck;
mod matrix;

pub use adam::{cosine_anneal, Adam, AdamConfig};
pub use gradcheck::{finite_diff_check, GradCheck};
pub use matrix::{dot, norm, sq_dist, Matrix};

/// Norm floor used by every normalization in the crate.
pub const NORM_EPS: f64 = 1e-12;

/// A trainable tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    /// Multiplier on the optimizer's base learning rate.
    pub lr_scale: f64,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Param {
            name: name.into(),
            value,
            grad,
            lr_scale: 1.0,
        }
    }

    pub fn with_lr_scale(mut self, lr_scale: f64) -> Self {
        self.lr_scale = lr_scale;
        self
    }

    pub fn zero_grad(&mut self) {
        if self.grad.shape() != self.value.shape() {
            self.grad = Matrix::zeros(self.value.rows(), self.value.cols());
        } else {
            self.grad.fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.value.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Returns `v / max(‖v‖, 1e-12)` and whether the input was degenerate
/// (norm below 1e-12).
pub fn l2_normalize(v: &[f64]) -> (Vec<f64>, bool) {
    let n = norm(v);
    let degenerate = n < NORM_EPS;
    let d = n.max(NORM_EPS);
    (v.iter().map(|x| x / d).collect(), degenerate)
}

/// Row-wise unit normalization that remembers the norms for the backward pass.
#[derive(Debug, Clone)]
pub struct RowNormalized {
    pub unit: Matrix,
    norms: Vec<f64>,
}

pub fn normalize_rows(x: &Matrix) -> RowNormalized {
    let mut unit = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let n = norm(x.row(i));
        norms.push(n);
        let d = n.max(NORM_EPS);
        unit.row_mut(i).iter_mut().for_each(|v| *v /= d);
    }
    RowNormalized { unit, norms }
}

impl RowNormalized {
    /// Maps a gradient with respect to the unit rows back to the raw rows:
    /// `(g − u·(uᵀg)) / ‖x‖`, or `g / 1e-12` inside the guard.
    pub fn backward(&self, upstream: &Matrix) -> Matrix {
        let mut out = upstream.clone();
        for (i, &n) in self.norms.iter().enumerate() {
            let row = out.row_mut(i);
            if n < NORM_EPS {
                row.iter_mut().for_each(|g| *g /= NORM_EPS);
                continue;
            }
            let u = self.unit.row(i);
            let proj = dot(u, row);
            for (g, &uk) in row.iter_mut().zip(u) {
                *g = (*g - uk * proj) / n;
            }
        }
        out
    }
}
