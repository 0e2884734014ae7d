//! Compression of a trained multi-head ensemble into a single embedding.
//!
//! Per-head unit embeddings are concatenated with block weights `√w_j`, so
//! the squared Euclidean distance between concatenations equals the weighted
//! ensemble distance. A `tanh` affine regressor maps the concatenation to an
//! `e`-dimensional embedding and is fitted so that the sum-normalized
//! pairwise distance matrix of its outputs matches that of the ensemble.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleModel;
use crate::error::{Error, Result};
use crate::featstore::{sample_from_groups, FeatureDataset};
use crate::numcore::{sq_dist, Adam, AdamConfig, Matrix, Param};

/// `g(f_con) = tanh(Aᵀ f_con + b)`
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionRegressor {
    pub weight: Param,
    pub bias: Param,
}

impl CompressionRegressor {
    /// Weights uniform in `[−1/√(M·e), 1/√(M·e)]`, zero bias.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input_dim as f64).sqrt();
        CompressionRegressor {
            weight: Param::new(
                "regressor.weight",
                Matrix::from_fn(input_dim, output_dim, |_, _| rng.gen_range(-bound..=bound)),
            ),
            bias: Param::new("regressor.bias", Matrix::zeros(1, output_dim)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn compress(&self, f_con: &[f64]) -> Result<Vec<f64>> {
        let x = Matrix::from_vec(1, f_con.len(), f_con.to_vec())?;
        Ok(self.compress_rows(&x)?.into_vec())
    }

    /// Row-wise [`compress`](Self::compress) of an `N × (M·e)` matrix.
    pub fn compress_rows(&self, f_con: &Matrix) -> Result<Matrix> {
        if f_con.cols() != self.input_dim() {
            return Err(Error::shape("compress", self.input_dim(), f_con.cols()));
        }
        let mut z = f_con.matmul(&self.weight.value)?;
        let b = self.bias.value.as_slice();
        for i in 0..z.rows() {
            for (v, bk) in z.row_mut(i).iter_mut().zip(b) {
                *v = (*v + bk).tanh();
            }
        }
        Ok(z)
    }

    /// Back-propagates `∂ℓ/∂g` through the regressor; returns `(∂A, ∂b)`.
    pub fn backward(&self, f_con: &Matrix, output: &Matrix, grad_out: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut grad_z = grad_out.clone();
        for (gz, g) in grad_z.as_mut_slice().iter_mut().zip(output.as_slice()) {
            *gz *= 1.0 - g * g;
        }
        let grad_a = f_con.t_matmul(&grad_z)?;
        let mut grad_b = Matrix::zeros(1, grad_z.cols());
        for i in 0..grad_z.rows() {
            for (db, g) in grad_b.as_mut_slice().iter_mut().zip(grad_z.row(i)) {
                *db += g;
            }
        }
        Ok((grad_a, grad_b))
    }
}

/// `[√w_1·f_1; …; √w_M·f_M]`
pub fn concat_weighted(per_head: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    if per_head.len() != weights.len() {
        return Err(Error::shape("concat_weighted", weights.len(), per_head.len()));
    }
    let e = per_head.first().map_or(0, |h| h.len());
    let mut out = Vec::with_capacity(e * per_head.len());
    for (h, &w) in per_head.iter().zip(weights) {
        if h.len() != e {
            return Err(Error::shape("concat_weighted (embedding)", e, h.len()));
        }
        if !(w > 0.0) {
            return Err(Error::InvalidArgument(format!("concatenation weight {w} must be > 0")));
        }
        let s = w.sqrt();
        out.extend(h.iter().map(|v| v * s));
    }
    Ok(out)
}

/// Row-wise [`concat_weighted`] of per-head `N × e` matrices.
pub fn concat_rows(per_head: &[Matrix], weights: &[f64]) -> Result<Matrix> {
    let n = per_head.first().map_or(0, |h| h.rows());
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let parts: Vec<&[f64]> = per_head.iter().map(|h| h.row(i)).collect();
        rows.push(concat_weighted(&parts, weights)?);
    }
    Matrix::from_rows(&rows)
}

/// Pairwise distances divided by their total over all ordered pairs.
pub fn normalized_distance_matrix<F>(points: &Matrix, dist: F) -> Result<Matrix>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    let n = points.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("distance matrix needs >= 2 points, got {n}")));
    }
    let mut d = Matrix::zeros(n, n);
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = dist(points.row(i), points.row(j));
            d[(i, j)] = v;
            d[(j, i)] = v;
            total += 2.0 * v;
        }
    }
    if !(total > 0.0) {
        return Err(Error::InvalidArgument(
            "all points coincide: total pairwise distance is zero".into(),
        ));
    }
    d.scale(1.0 / total);
    Ok(d)
}

/// `(1/N²)·‖K − K'‖²_F` and its gradient with respect to `K'`.
pub fn distance_loss(target: &Matrix, predicted: &Matrix) -> Result<(f64, Matrix)> {
    if target.shape() != predicted.shape() || target.rows() != target.cols() {
        return Err(Error::shape(
            "distance_loss",
            format!("square {:?}", target.shape()),
            format!("{:?}", predicted.shape()),
        ));
    }
    let n2 = (target.rows() * target.rows()) as f64;
    let mut grad = Matrix::zeros(target.rows(), target.cols());
    let mut loss = 0.0;
    for ((g, &k), &kp) in grad.as_mut_slice().iter_mut().zip(target.as_slice()).zip(predicted.as_slice()) {
        let diff = k - kp;
        loss += diff * diff;
        *g = -2.0 * diff / n2;
    }
    Ok((loss / n2, grad))
}

/// Normalized distance loss of the regressor on one batch of
/// concatenations, with gradients `(∂A, ∂b)`.
pub fn regressor_loss(reg: &CompressionRegressor, f_con: &Matrix, target: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    let g = reg.compress_rows(f_con)?;
    let n = g.rows();
    let predicted = normalized_distance_matrix(&g, sq_dist)?;
    let (loss, grad_k) = distance_loss(target, &predicted)?;

    // K' = D'/S with S = Σ D': ∂ℓ/∂D'_ij = (G_ij − Σ_kl G_kl K'_kl) / S
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += sq_dist(g.row(i), g.row(j));
            }
        }
    }
    let inner: f64 = grad_k.as_slice().iter().zip(predicted.as_slice()).map(|(a, b)| a * b).sum();
    let mut grad_g = Matrix::zeros(n, g.cols());
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let h = (grad_k[(i, j)] - inner) / total + (grad_k[(j, i)] - inner) / total;
            for k in 0..g.cols() {
                grad_g[(i, k)] += 2.0 * h * (g[(i, k)] - g[(j, k)]);
            }
        }
    }
    let (grad_a, grad_b) = reg.backward(f_con, &g, &grad_g)?;
    Ok((loss, grad_a, grad_b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressConfig {
    pub epochs: usize,
    pub batch_classes: usize,
    pub batch_per_class: usize,
    pub adam: AdamConfig,
}

impl Default for CompressConfig {
    fn default() -> Self {
        CompressConfig {
            epochs: 30,
            batch_classes: 8,
            batch_per_class: 4,
            adam: AdamConfig {
                lr: 1e-3,
                eps: 1e-8,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressEpoch {
    pub epoch: usize,
    pub distance_loss: f64,
    pub skipped_batches: usize,
}

/// Weighted concatenations of every sample under the frozen model.
pub fn ensemble_concat(model: &EnsembleModel, features: &Matrix) -> Result<Matrix> {
    let heads = model.embed_unit(features)?;
    concat_rows(&heads, &model.head_weights())
}

/// Target matrix from the weighted ensemble distance of a batch.
pub fn target_matrix(f_con: &Matrix) -> Result<Matrix> {
    normalized_distance_matrix(f_con, sq_dist)
}

/// Fits a regressor on top of a frozen per-loss-head model.
pub fn train_compressor<R: Rng + ?Sized>(
    model: &EnsembleModel,
    data: &FeatureDataset,
    config: &CompressConfig,
    rng: &mut R,
) -> Result<(CompressionRegressor, Vec<CompressEpoch>)> {
    if !model.mode.head_per_loss() {
        return Err(Error::InvalidArgument(format!(
            "compression needs a per-loss-head model, got {}",
            model.mode
        )));
    }
    let f_con_all = ensemble_concat(model, &data.features())?;
    let mut reg = CompressionRegressor::new(f_con_all.cols(), model.config.embed_dim, rng);
    let mut log = Vec::with_capacity(config.epochs);
    if config.epochs == 0 {
        return Ok((reg, log));
    }
    let groups = data.class_indices();
    let batches = data
        .len()
        .div_ceil((config.batch_classes * config.batch_per_class).max(1))
        .max(1);
    let mut adam = Adam::new(config.adam);
    for epoch in 1..=config.epochs {
        let mut sum = 0.0;
        let mut used = 0;
        let mut skipped = 0;
        for batch_idx in 0..batches {
            let batch = sample_from_groups(data, &groups, config.batch_classes, config.batch_per_class, rng)?;
            let f_con = f_con_all.select_rows(&batch.indices);
            let target = match target_matrix(&f_con) {
                Ok(t) => t,
                Err(_) => {
                    log::warn!("compressor epoch {epoch} batch {batch_idx}: degenerate batch skipped");
                    skipped += 1;
                    continue;
                }
            };
            let (loss, grad_a, grad_b) = match regressor_loss(&reg, &f_con, &target) {
                Ok(v) => v,
                Err(Error::InvalidArgument(_)) => {
                    log::warn!("compressor epoch {epoch} batch {batch_idx}: collapsed outputs, batch skipped");
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    reason: "non-finite distance loss".into(),
                });
            }
            reg.weight.zero_grad();
            reg.bias.zero_grad();
            reg.weight.grad.add_scaled(&grad_a, 1.0)?;
            reg.bias.grad.add_scaled(&grad_b, 1.0)?;
            adam.step(&mut [&mut reg.weight, &mut reg.bias], 1.0)?;
            sum += loss;
            used += 1;
        }
        log.push(CompressEpoch {
            epoch,
            distance_loss: if used == 0 { 0.0 } else { sum / used as f64 },
            skipped_batches: skipped,
        });
    }
    Ok((reg, log))
}
