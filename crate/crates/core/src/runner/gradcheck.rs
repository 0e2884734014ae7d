//! Finite-difference verification of every analytic gradient in the crate.
//!
//! Each component is checked on freshly drawn small instances. Objectives
//! are rescaled so the largest analytic gradient entry has magnitude one,
//! which makes the `max(1, |numeric|)` relative error meaningful even for
//! losses whose raw gradients are tiny. Instances that sit within a small
//! distance of a non-differentiable point (hinge boundaries, mining ties)
//! are redrawn before any gradient is computed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::compressor::{concat_rows, regressor_loss, target_matrix, CompressionRegressor};
use crate::ensemble::{diversity, Coefficients, DistanceForm, EmaState, EnsembleConfig, EnsembleMode, EnsembleModel};
use crate::error::{Error, Result};
use crate::heads::EmbeddingHead;
use crate::losses::{LossKind, LossMember, LossSettings};
use crate::numcore::{dot, finite_diff_check, normalize_rows, sq_dist, Matrix};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Instances closer than this to a kink are redrawn.
const KINK_GAP: f64 = 1e-4;
const MAX_REDRAWS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub component: String,
    pub instances: usize,
    pub max_rel_error: f64,
    /// Instance index with the largest error.
    pub worst_instance: usize,
    pub redrawn: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub const COMPONENTS: [&str; 10] = [
    "head",
    "triplet",
    "binomial",
    "proxy_nca",
    "classification",
    "diversity",
    "objective:WEL",
    "objective:WEL-equal",
    "objective:WEDL",
    "compressor",
];

/// Runs every component on `instances` random instances.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<GradReport>> {
    COMPONENTS
        .iter()
        .enumerate()
        .map(|(i, name)| check_component(name, instances, seed.wrapping_add(i as u64)))
        .collect()
}

pub fn check_component(name: &str, instances: usize, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport {
        component: name.to_string(),
        instances,
        max_rel_error: 0.0,
        worst_instance: 0,
        redrawn: 0,
    };
    for i in 0..instances {
        let mut attempts = 0;
        let err = loop {
            let outcome = match name {
                "head" => head_instance(&mut rng).map(Some)?,
                "triplet" => member_instance(LossKind::Triplet, &mut rng)?,
                "binomial" => member_instance(LossKind::Binomial, &mut rng)?,
                "proxy_nca" => member_instance(LossKind::ProxyNca, &mut rng)?,
                "classification" => member_instance(LossKind::Classification, &mut rng)?,
                "diversity" => diversity_instance(&mut rng)?,
                "objective:WEL" => objective_instance(EnsembleMode::Wel, &mut rng)?,
                "objective:WEL-equal" => objective_instance(EnsembleMode::WelEqual, &mut rng)?,
                "objective:WEDL" => objective_instance(EnsembleMode::Wedl, &mut rng)?,
                "compressor" => compressor_instance(&mut rng).map(Some)?,
                other => return Err(Error::InvalidArgument(format!("unknown gradient component `{other}`"))),
            };
            match outcome {
                Some(e) => break e,
                None => {
                    attempts += 1;
                    report.redrawn += 1;
                    if attempts >= MAX_REDRAWS {
                        return Err(Error::InvalidArgument(format!("{name}: no smooth instance found")));
                    }
                }
            }
        };
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst_instance = i;
        }
    }
    Ok(report)
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Balanced labels: `classes` classes with `per_class` samples each.
fn balanced_labels(classes: usize, per_class: usize) -> Vec<usize> {
    (0..classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect()
}

fn small_batch(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let classes = rng.gen_range(2..=4);
    let per_class = rng.gen_range(2..=12 / classes);
    balanced_labels(classes, per_class)
}

/// Scaled central-difference check.
fn scaled_check<F>(mut f: F, x: &[f64], analytic: &[f64]) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let peak = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let s = if peak > 0.0 { 1.0 / peak } else { 1.0 };
    let scaled: Vec<f64> = analytic.iter().map(|g| g * s).collect();
    Ok(finite_diff_check(|v| Ok(f(v)? * s), x, &scaled, FD_STEP)?.max_rel_error)
}

/// Whether semi-hard mining and the hinge are locally constant around `raw`.
fn triplet_is_smooth(raw: &Matrix, labels: &[usize], margin: f64) -> bool {
    let unit = normalize_rows(raw).unit;
    let n = unit.rows();
    for a in 0..n {
        let mut neg: Vec<f64> = (0..n)
            .filter(|&j| labels[j] != labels[a])
            .map(|j| sq_dist(unit.row(a), unit.row(j)))
            .collect();
        neg.sort_by(f64::total_cmp);
        if neg.windows(2).any(|w| w[1] - w[0] < KINK_GAP) {
            return false;
        }
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            let d_ap = sq_dist(unit.row(a), unit.row(p));
            if neg
                .iter()
                .any(|&d| (d - d_ap).abs() < KINK_GAP || (d - d_ap - margin).abs() < KINK_GAP)
            {
                return false;
            }
        }
    }
    true
}

fn head_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let d = rng.gen_range(1..=8);
    let e = rng.gen_range(1..=4);
    let n = rng.gen_range(1..=12);
    let head = EmbeddingHead::new("h", d, e, rng);
    let x = gaussian(n, d, rng);
    let upstream = gaussian(n, e, rng);
    let mut h = head.clone();
    h.weight.zero_grad();
    let grad_x = h.embed_backward(&x, &upstream)?;
    let objective = |w: &[f64], x: &Matrix| -> Result<f64> {
        let head = EmbeddingHead::from_weight("h", Matrix::from_vec(d, e, w.to_vec())?);
        let out = head.embed(x)?;
        Ok(out.as_slice().iter().zip(upstream.as_slice()).map(|(a, b)| a * b).sum())
    };
    let ew = scaled_check(|w| objective(w, &x), head.weight.value.as_slice(), h.weight.grad.as_slice())?;
    let ex = scaled_check(
        |v| objective(head.weight.value.as_slice(), &Matrix::from_vec(n, d, v.to_vec())?),
        x.as_slice(),
        grad_x.as_slice(),
    )?;
    Ok(ew.max(ex))
}

/// Checks a loss member with respect to its raw input and own parameters.
fn member_instance(kind: LossKind, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let labels = small_batch(rng);
    let classes = labels.iter().max().unwrap() + 1;
    let e = rng.gen_range(2..=4);
    let n = labels.len();
    let settings = LossSettings::default();
    let member = LossMember::new(kind, classes, e, rng);
    let raw = gaussian(n, e, rng);
    if kind == LossKind::Triplet && !triplet_is_smooth(&raw, &labels, settings.margin) {
        return Ok(None);
    }
    let out = member.forward_backward(&raw, &labels, &settings)?;

    let mut x = raw.as_slice().to_vec();
    let mut analytic = out.grad_emb.as_slice().to_vec();
    for (p, g) in member.params().iter().zip(&out.param_grads) {
        x.extend_from_slice(p.value.as_slice());
        analytic.extend_from_slice(g.as_slice());
    }
    let eval = |v: &[f64]| -> Result<f64> {
        let mut m = member.clone();
        let mut offset = n * e;
        for p in m.params_mut() {
            let len = p.value.as_slice().len();
            p.value.as_mut_slice().copy_from_slice(&v[offset..offset + len]);
            offset += len;
        }
        let emb = Matrix::from_vec(n, e, v[..n * e].to_vec())?;
        Ok(m.forward_backward(&emb, &labels, &settings)?.loss)
    };
    scaled_check(eval, &x, &analytic).map(Some)
}

/// Unit embeddings of `m` heads around a shared direction, so the mean
/// distance stays below the hinge threshold.
fn correlated_units(m: usize, n: usize, e: usize, spread: f64, rng: &mut ChaCha8Rng) -> Vec<Matrix> {
    let base = gaussian(n, e, rng);
    (0..m)
        .map(|_| {
            let mut h = gaussian(n, e, rng);
            h.scale(spread);
            h.add_scaled(&base, 1.0).expect("same shape");
            normalize_rows(&h).unit
        })
        .collect()
}

fn diversity_instance(rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let m = rng.gen_range(2..=4);
    let n = rng.gen_range(1..=12);
    let e = rng.gen_range(2..=4);
    let form = DistanceForm::Corrected;
    let units = correlated_units(m, n, e, 0.8, rng);
    for j in 0..m {
        for k in (j + 1)..m {
            if (0..n).any(|i| dot(units[j].row(i), units[k].row(i)) > 1.0 - KINK_GAP) {
                return Ok(None);
            }
        }
    }
    let out = diversity(&units, form)?;
    if out.loss < KINK_GAP {
        return Ok(None);
    }
    let x: Vec<f64> = units.iter().flat_map(|u| u.as_slice().to_vec()).collect();
    let analytic: Vec<f64> = out.grads.iter().flat_map(|g| g.as_slice().to_vec()).collect();
    let eval = |v: &[f64]| -> Result<f64> {
        let heads = v
            .chunks(n * e)
            .map(|c| Matrix::from_vec(n, e, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(diversity(&heads, form)?.loss)
    };
    scaled_check(eval, &x, &analytic).map(Some)
}

fn set_params(model: &mut EnsembleModel, v: &[f64]) {
    let mut offset = 0;
    for p in model.params_mut() {
        let len = p.value.as_slice().len();
        p.value.as_mut_slice().copy_from_slice(&v[offset..offset + len]);
        offset += len;
    }
}

fn objective_instance(mode: EnsembleMode, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let labels = small_batch(rng);
    let classes = labels.iter().max().unwrap() + 1;
    let d = rng.gen_range(2..=8);
    let e = rng.gen_range(2..=4);
    let config = EnsembleConfig {
        embed_dim: e,
        ..EnsembleConfig::default()
    };
    let mut model = EnsembleModel::new(mode, config, d, classes, rng)?;
    if model.heads.len() > 1 {
        // correlated heads keep the diversity hinge active
        let base = model.heads[0].weight.value.clone();
        for h in model.heads.iter_mut().skip(1) {
            h.weight.value.scale(0.5);
            h.weight.value.add_scaled(&base, 1.0)?;
        }
    }
    if let Some(c) = &model.coefficients {
        let values: Vec<f64> = (0..model.member_count()).map(|_| rng.gen_range(0.2..0.8)).collect();
        model.coefficients = Some(Coefficients::from_values(&values, c.floor, c.penalty));
    }
    let x = gaussian(labels.len(), d, rng);
    for (j, m) in model.members.iter().enumerate() {
        if m.kind == LossKind::Triplet {
            let raw = model.heads[model.head_of(j)].embed(&x)?;
            if !triplet_is_smooth(&raw, &labels, model.config.loss.margin) {
                return Ok(None);
            }
        }
    }
    let seed_raw: Vec<f64> = (0..model.member_count()).map(|_| rng.gen_range(0.5..2.0)).collect();
    model.ema = Some(EmaState::init(&seed_raw, model.config.smoothing));
    let obj = model.objective(&x, &labels)?;
    if let Some((_, l_div)) = obj.diversity {
        if l_div < KINK_GAP {
            return Ok(None);
        }
    }

    let flat: Vec<f64> = model.params().iter().flat_map(|p| p.value.as_slice().to_vec()).collect();
    let analytic: Vec<f64> = obj.grads.iter().flat_map(|g| g.as_slice().to_vec()).collect();
    let eval = |v: &[f64]| -> Result<f64> {
        let mut m = model.clone();
        set_params(&mut m, v);
        Ok(m.objective(&x, &labels)?.total)
    };
    scaled_check(eval, &flat, &analytic).map(Some)
}

fn compressor_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let m = rng.gen_range(2..=4);
    let e = rng.gen_range(2..=4);
    let n = rng.gen_range(3..=12);
    let units = correlated_units(m, n, e, 2.0, rng);
    let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let f_con = concat_rows(&units, &weights)?;
    let target = target_matrix(&f_con)?;
    let mut reg = CompressionRegressor::new(m * e, e, rng);
    for b in reg.bias.value.as_mut_slice() {
        *b = rng.gen_range(-0.5..0.5);
    }
    let (_, grad_a, grad_b) = regressor_loss(&reg, &f_con, &target)?;
    let mut x = reg.weight.value.as_slice().to_vec();
    x.extend_from_slice(reg.bias.value.as_slice());
    let mut analytic = grad_a.into_vec();
    analytic.extend(grad_b.into_vec());
    let split = m * e * e;
    let eval = |v: &[f64]| -> Result<f64> {
        let mut r = reg.clone();
        r.weight.value.as_mut_slice().copy_from_slice(&v[..split]);
        r.bias.value.as_mut_slice().copy_from_slice(&v[split..]);
        Ok(regressor_loss(&r, &f_con, &target)?.0)
    };
    scaled_check(eval, &x, &analytic)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_component_passes_on_a_few_instances() {
        for r in gradient_suite(3, 11).unwrap() {
            assert!(r.passes(1e-4), "{r:?}");
        }
    }

    #[test]
    fn unknown_component_is_an_error() {
        assert!(check_component("npair", 1, 0).is_err());
    }
}
