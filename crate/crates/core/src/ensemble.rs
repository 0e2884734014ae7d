//! Weighted ensembles of metric losses.
//!
//! Every member loss is rescaled by the ratio of the grand mean of the
//! running loss means to its own running mean, so members with large raw
//! values do not dominate. The rescaled losses are combined with effective
//! weights `w_j = c_j² + α_w` where the raw coefficients `c_j` are learned and
//! a quadratic penalty `η (Σ w_j − 1)²` keeps the weights on the simplex. In
//! the per-loss-head mode each member owns an embedding head and a hinge on
//! the mean pairwise distance between heads pushes them apart. At test time
//! the heads are combined through the weighted distance
//! `Σ_j w_j ‖f_j(x) − f_j(x')‖²`.
//!
//! Three ensemble modes are provided, plus single-loss baselines:
//!
//! | mode        | heads | weights             | diversity |
//! |-------------|-------|---------------------|-----------|
//! | `WEL`       | 1     | learned             | no        |
//! | `WEL-equal` | 1     | fixed `1/M`         | no        |
//! | `WEDL`      | M     | learned             | yes       |
//! | `baseline:*`| 1     | fixed `1`           | no        |

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featstore::{sample_from_groups, FeatureDataset};
use crate::heads::EmbeddingHead;
use crate::losses::{LossKind, LossMember, LossSettings};
use crate::numcore::{cosine_anneal, dot, normalize_rows, Adam, AdamConfig, Matrix, Param, NORM_EPS};

/// Running per-loss means used to rescale member losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub means: Vec<f64>,
    pub smoothing: f64,
    /// Number of observations folded in so far (1 after initialization).
    pub iteration: u64,
}

/// Relative floor on a running mean's magnitude, as a fraction of the grand
/// mean. Caps any single rescaling factor at 1000.
const MEAN_FLOOR_FRACTION: f64 = 1e-3;

impl EmaState {
    /// Seeds the means with the first observed losses (floored at 1e-12).
    pub fn init(first_raw: &[f64], smoothing: f64) -> Self {
        EmaState {
            means: first_raw.iter().map(|&l| l.max(NORM_EPS)).collect(),
            smoothing,
            iteration: 1,
        }
    }

    /// `l̄_j ← l_j·a + l̄_j·(1 − a)` with `a = s/(1 + k)` clamped to (0, 1],
    /// then `k ← k + 1`.
    pub fn update(&mut self, raw: &[f64]) -> Result<()> {
        if raw.len() != self.means.len() {
            return Err(Error::shape("EmaState::update", self.means.len(), raw.len()));
        }
        if let Some(bad) = raw.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("loss value {bad} in running mean update")));
        }
        let a = self.update_weight();
        for (m, &l) in self.means.iter_mut().zip(raw) {
            *m = l * a + *m * (1.0 - a);
        }
        self.iteration += 1;
        Ok(())
    }

    pub fn update_weight(&self) -> f64 {
        let a = self.smoothing / (1.0 + self.iteration as f64);
        a.clamp(f64::MIN_POSITIVE, 1.0)
    }

    /// Per-loss rescaling factors `l̄ / l̄_j`.
    ///
    /// Magnitudes are used so a member whose mean drifts negative (Proxy-NCA
    /// can) keeps a positive factor; for positive means this is exactly the
    /// ratio of the grand mean to the member mean.
    pub fn scales(&self) -> Vec<f64> {
        let m = self.means.len() as f64;
        let grand = self.means.iter().map(|v| v.abs()).sum::<f64>() / m;
        let floor = (grand * MEAN_FLOOR_FRACTION).max(NORM_EPS);
        self.means.iter().map(|v| grand / v.abs().max(floor)).collect()
    }

    pub fn normalize(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.means.len() {
            return Err(Error::shape("normalize_losses", self.means.len(), raw.len()));
        }
        Ok(raw.iter().zip(self.scales()).map(|(l, s)| l * s).collect())
    }
}

/// Rescales raw member losses by the running means; fails when the running
/// means have not been initialized yet.
pub fn normalize_losses(raw: &[f64], ema: Option<&EmaState>) -> Result<Vec<f64>> {
    ema.ok_or_else(|| Error::InvalidArgument("loss running means are not initialized".into()))?
        .normalize(raw)
}

/// Learnable raw coefficients `c_j` with floor `α_w` and penalty `η`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub raw: Param,
    pub floor: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTerms {
    pub weights: Vec<f64>,
    pub penalty: f64,
    /// `∂(Σ w_j l̂_j + η(Σw − 1)²)/∂c_j`
    pub grad_c: Vec<f64>,
}

impl Coefficients {
    /// Starts every `c_j` at `√(1/M − α_w)`, so the weights are equal and sum to one.
    pub fn new(members: usize, floor: f64, penalty: f64) -> Self {
        let c = (1.0 / members as f64 - floor).max(0.0).sqrt();
        Coefficients {
            raw: Param::new("coefficients", Matrix::from_vec(1, members, vec![c; members]).unwrap()),
            floor,
            penalty,
        }
    }

    pub fn from_values(c: &[f64], floor: f64, penalty: f64) -> Self {
        Coefficients {
            raw: Param::new("coefficients", Matrix::from_vec(1, c.len(), c.to_vec()).unwrap()),
            floor,
            penalty,
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.raw.value.as_slice().iter().map(|c| c * c + self.floor).collect()
    }

    /// Effective weights, the simplex penalty, and the coefficient gradient
    /// of the weighted sum plus penalty given the normalized losses.
    pub fn effective_weights(&self, normalized: &[f64]) -> Result<WeightTerms> {
        let c = self.raw.value.as_slice();
        if normalized.len() != c.len() {
            return Err(Error::shape("effective_weights", c.len(), normalized.len()));
        }
        let weights = self.weights();
        let excess = weights.iter().sum::<f64>() - 1.0;
        let grad_c = c
            .iter()
            .zip(normalized)
            .map(|(&cj, &lj)| 2.0 * cj * lj + 4.0 * self.penalty * cj * excess)
            .collect();
        Ok(WeightTerms {
            weights,
            penalty: self.penalty * excess * excess,
            grad_c,
        })
    }
}

/// How the squared distance between two unit vectors is evaluated in the
/// diversity term and the ensemble distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DistanceForm {
    /// `‖a − b‖² = 2 − 2aᵀb`
    #[default]
    Corrected,
    /// `2 − aᵀb`, kept only for comparison runs.
    Literal,
}

impl DistanceForm {
    #[inline]
    pub fn unit_sq_dist(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            DistanceForm::Corrected => (2.0 - 2.0 * dot(a, b)).max(0.0),
            DistanceForm::Literal => 2.0 - dot(a, b),
        }
    }

    fn dot_factor(self) -> f64 {
        match self {
            DistanceForm::Corrected => 2.0,
            DistanceForm::Literal => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiversityOutput {
    /// Mean over head pairs of the batch-mean squared distance.
    pub mean_distance: f64,
    /// `max(0, 2 − D)`
    pub loss: f64,
    /// Gradients with respect to each head's unit embeddings.
    pub grads: Vec<Matrix>,
}

pub const DIVERSITY_THRESHOLD: f64 = 2.0;

/// Hinge on the mean squared distance between the unit embeddings that
/// different heads assign to the same sample.
pub fn diversity(per_head: &[Matrix], form: DistanceForm) -> Result<DiversityOutput> {
    let m = per_head.len();
    if m < 2 {
        return Err(Error::InvalidArgument(format!("diversity needs at least 2 heads, got {m}")));
    }
    let shape = per_head[0].shape();
    if let Some(bad) = per_head.iter().find(|h| h.shape() != shape) {
        return Err(Error::shape("diversity", format!("{shape:?}"), format!("{:?}", bad.shape())));
    }
    let (n, e) = shape;
    if n == 0 {
        return Err(Error::InvalidArgument("diversity over an empty batch".into()));
    }
    let pair_count = (m * (m - 1) / 2) as f64;
    let mut total = 0.0;
    for j in 0..m {
        for k in (j + 1)..m {
            let mut pair_sum = 0.0;
            for i in 0..n {
                pair_sum += form.unit_sq_dist(per_head[j].row(i), per_head[k].row(i));
            }
            total += pair_sum / n as f64;
        }
    }
    let mean_distance = total / pair_count;
    let loss = (DIVERSITY_THRESHOLD - mean_distance).max(0.0);

    let mut grads = vec![Matrix::zeros(n, e); m];
    if loss > 0.0 {
        // ∂l_div/∂D = −1; ∂D/∂u_j(i) = −factor · u_k(i) / (pairs · N)
        let g = form.dot_factor() / (pair_count * n as f64);
        for j in 0..m {
            for k in 0..m {
                if j == k {
                    continue;
                }
                for i in 0..n {
                    let other = per_head[k].row(i);
                    for (dst, &o) in grads[j].row_mut(i).iter_mut().zip(other) {
                        *dst += g * o;
                    }
                }
            }
        }
    }
    Ok(DiversityOutput {
        mean_distance,
        loss,
        grads,
    })
}

/// `Σ_j w_j ‖f_j(x) − f_j(x')‖²` over unit vectors.
pub fn ensemble_distance(x: &[&[f64]], y: &[&[f64]], weights: &[f64], form: DistanceForm) -> Result<f64> {
    if x.len() != y.len() || x.len() != weights.len() {
        return Err(Error::shape(
            "ensemble_distance",
            format!("{} heads and weights", weights.len()),
            format!("{} and {} embeddings", x.len(), y.len()),
        ));
    }
    let mut total = 0.0;
    for ((a, b), w) in x.iter().zip(y).zip(weights) {
        if a.len() != b.len() {
            return Err(Error::shape("ensemble_distance (embedding)", a.len(), b.len()));
        }
        total += w * form.unit_sq_dist(a, b);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnsembleMode {
    /// Shared head, learned weights.
    Wel,
    /// Shared head, equal fixed weights.
    WelEqual,
    /// One head per loss, learned weights, diversity term.
    Wedl,
    /// A single loss on a single head.
    Baseline(LossKind),
}

impl EnsembleMode {
    pub fn learns_weights(self) -> bool {
        matches!(self, EnsembleMode::Wel | EnsembleMode::Wedl)
    }

    pub fn head_per_loss(self) -> bool {
        matches!(self, EnsembleMode::Wedl)
    }
}

impl fmt::Display for EnsembleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnsembleMode::Wel => f.write_str("WEL"),
            EnsembleMode::WelEqual => f.write_str("WEL-equal"),
            EnsembleMode::Wedl => f.write_str("WEDL"),
            EnsembleMode::Baseline(k) => write!(f, "baseline:{k}"),
        }
    }
}

impl FromStr for EnsembleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "WEL" => Ok(EnsembleMode::Wel),
            "WEL-equal" => Ok(EnsembleMode::WelEqual),
            "WEDL" => Ok(EnsembleMode::Wedl),
            other => match other.strip_prefix("baseline:") {
                Some(loss) => Ok(EnsembleMode::Baseline(loss.parse()?)),
                None => Err(Error::InvalidArgument(format!(
                    "unknown mode `{other}` (expected WEL, WEL-equal, WEDL or baseline:<loss>)"
                ))),
            },
        }
    }
}

impl Serialize for EnsembleMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EnsembleMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Model-shape and objective hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub embed_dim: usize,
    /// Members of the ensemble modes, in order.
    pub losses: Vec<LossKind>,
    pub loss: LossSettings,
    /// Diversity weight λ.
    pub lambda: f64,
    /// Simplex penalty η.
    pub eta: f64,
    /// Weight floor α_w; `None` means `1/(4M)`.
    pub weight_floor: Option<f64>,
    /// EMA smoothing factor s.
    pub smoothing: f64,
    pub distance_form: DistanceForm,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            embed_dim: 64,
            losses: LossKind::ALL.to_vec(),
            loss: LossSettings::default(),
            lambda: 0.01,
            eta: 100.0,
            weight_floor: None,
            smoothing: 2.0,
            distance_form: DistanceForm::Corrected,
        }
    }
}

impl EnsembleConfig {
    pub fn floor_for(&self, members: usize) -> f64 {
        self.weight_floor.unwrap_or(1.0 / (4.0 * members as f64))
    }
}

/// Per-group learning-rate multipliers (relative to the Adam base rate).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrScales {
    pub heads: f64,
    /// Absolute learning rate of the proxies.
    pub proxy_lr: f64,
    pub softmax: f64,
    pub coefficients: f64,
}

impl Default for LrScales {
    fn default() -> Self {
        LrScales {
            heads: 10.0,
            proxy_lr: 0.01,
            softmax: 1.0,
            coefficients: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub mode: EnsembleMode,
    pub config: EnsembleConfig,
    pub heads: Vec<EmbeddingHead>,
    pub members: Vec<LossMember>,
    pub coefficients: Option<Coefficients>,
    pub ema: Option<EmaState>,
}

/// Everything one evaluation of the combined objective produces.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: f64,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub weights: Vec<f64>,
    pub penalty: f64,
    /// `(D, l_div)` in the per-loss-head mode.
    pub diversity: Option<(f64, f64)>,
    /// Gradients aligned with [`EnsembleModel::params`].
    pub grads: Vec<Matrix>,
}

impl EnsembleModel {
    pub fn new<R: Rng + ?Sized>(
        mode: EnsembleMode,
        config: EnsembleConfig,
        input_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let kinds = match mode {
            EnsembleMode::Baseline(k) => vec![k],
            _ => config.losses.clone(),
        };
        if kinds.is_empty() {
            return Err(Error::InvalidArgument("ensemble has no member losses".into()));
        }
        if !matches!(mode, EnsembleMode::Baseline(_)) && kinds.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "mode {mode} needs at least 2 member losses, got {}",
                kinds.len()
            )));
        }
        if config.embed_dim == 0 || input_dim == 0 {
            return Err(Error::InvalidArgument("dimensions must be >= 1".into()));
        }
        let head_count = if mode.head_per_loss() { kinds.len() } else { 1 };
        let heads = (0..head_count)
            .map(|j| EmbeddingHead::new(format!("head{j}"), input_dim, config.embed_dim, rng))
            .collect();
        let members = kinds
            .iter()
            .map(|&k| LossMember::new(k, classes, config.embed_dim, rng))
            .collect();
        let coefficients = mode
            .learns_weights()
            .then(|| Coefficients::new(kinds.len(), config.floor_for(kinds.len()), config.eta));
        Ok(EnsembleModel {
            mode,
            config,
            heads,
            members,
            coefficients,
            ema: None,
        })
    }

    pub fn member_count(&self) -> usize {
        self.members.len()
    }

    pub fn head_of(&self, member: usize) -> usize {
        if self.mode.head_per_loss() {
            member
        } else {
            0
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        match (&self.coefficients, self.mode) {
            (Some(c), _) => c.weights(),
            (None, EnsembleMode::Baseline(_)) => vec![1.0],
            (None, _) => vec![1.0 / self.members.len() as f64; self.members.len()],
        }
    }

    /// Weights used to combine heads at test time (one per head).
    pub fn head_weights(&self) -> Vec<f64> {
        if self.mode.head_per_loss() {
            self.weights()
        } else {
            vec![1.0]
        }
    }

    /// Trainable parameters in a fixed order: heads, member parameters,
    /// coefficients.
    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.heads.iter().map(|h| &h.weight).collect();
        for m in &self.members {
            out.extend(m.params());
        }
        if let Some(c) = &self.coefficients {
            out.push(&c.raw);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.heads.iter_mut().map(|h| &mut h.weight).collect();
        for m in &mut self.members {
            out.extend(m.params_mut());
        }
        if let Some(c) = &mut self.coefficients {
            out.push(&mut c.raw);
        }
        out
    }

    /// Assigns learning-rate multipliers per parameter group.
    pub fn set_lr_scales(&mut self, scales: &LrScales, base_lr: f64) {
        for h in &mut self.heads {
            h.weight.lr_scale = scales.heads;
        }
        for m in &mut self.members {
            let scale = match m.kind {
                LossKind::ProxyNca => scales.proxy_lr / base_lr,
                _ => scales.softmax,
            };
            for p in m.params_mut() {
                p.lr_scale = scale;
            }
        }
        if let Some(c) = &mut self.coefficients {
            c.raw.lr_scale = scales.coefficients;
        }
    }

    /// Unit-normalized embeddings of every head.
    pub fn embed_unit(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        self.heads
            .iter()
            .map(|h| Ok(normalize_rows(&h.embed(x)?).unit))
            .collect()
    }

    /// Evaluates the combined objective and its gradients without touching
    /// any state. Rescaling factors come from the current running means, or
    /// from the batch itself before the first update; they are constants
    /// with respect to the gradient.
    pub fn objective(&self, x: &Matrix, labels: &[usize]) -> Result<Objective> {
        let head_out: Vec<Matrix> = self.heads.iter().map(|h| h.embed(x)).collect::<Result<_>>()?;
        let outputs: Vec<_> = self
            .members
            .iter()
            .enumerate()
            .map(|(j, m)| m.forward_backward(&head_out[self.head_of(j)], labels, &self.config.loss))
            .collect::<Result<_>>()?;
        let raw: Vec<f64> = outputs.iter().map(|o| o.loss).collect();
        if let Some(j) = raw.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} loss", self.members[j].kind)));
        }

        let seeded;
        let ema = match &self.ema {
            Some(e) => e,
            None => {
                seeded = EmaState::init(&raw, self.config.smoothing);
                &seeded
            }
        };
        let scales = ema.scales();
        let normalized: Vec<f64> = raw.iter().zip(&scales).map(|(l, s)| l * s).collect();

        let (weights, penalty, grad_c) = match &self.coefficients {
            Some(c) => {
                let t = c.effective_weights(&normalized)?;
                (t.weights, t.penalty, Some(t.grad_c))
            }
            None => (self.weights(), 0.0, None),
        };
        let mut total = penalty + weights.iter().zip(&normalized).map(|(w, l)| w * l).sum::<f64>();

        let mut grad_emb: Vec<Matrix> = head_out.iter().map(|h| Matrix::zeros(h.rows(), h.cols())).collect();
        let mut member_grads = Vec::with_capacity(self.members.len());
        for (j, out) in outputs.into_iter().enumerate() {
            let factor = weights[j] * scales[j];
            grad_emb[self.head_of(j)].add_scaled(&out.grad_emb, factor)?;
            member_grads.push(
                out.param_grads
                    .into_iter()
                    .map(|mut g| {
                        g.scale(factor);
                        g
                    })
                    .collect::<Vec<_>>(),
            );
        }

        let mut diversity_stats = None;
        if self.mode.head_per_loss() && self.heads.len() >= 2 {
            let normalized_heads: Vec<_> = head_out.iter().map(normalize_rows).collect();
            let units: Vec<Matrix> = normalized_heads.iter().map(|n| n.unit.clone()).collect();
            let div = diversity(&units, self.config.distance_form)?;
            total += self.config.lambda * div.loss;
            diversity_stats = Some((div.mean_distance, div.loss));
            if div.loss > 0.0 && self.config.lambda != 0.0 {
                for (h, g) in div.grads.iter().enumerate() {
                    let back = normalized_heads[h].backward(g);
                    grad_emb[h].add_scaled(&back, self.config.lambda)?;
                }
            }
        }

        let mut grads = Vec::new();
        for (head, g) in self.heads.iter().zip(&grad_emb) {
            if x.cols() != head.input_dim() {
                return Err(Error::shape("objective input", head.input_dim(), x.cols()));
            }
            grads.push(x.t_matmul(g)?);
        }
        for g in member_grads {
            grads.extend(g);
        }
        if let Some(gc) = grad_c {
            grads.push(Matrix::from_vec(1, gc.len(), gc)?);
        }

        Ok(Objective {
            total,
            raw,
            normalized,
            weights,
            penalty,
            diversity: diversity_stats,
            grads,
        })
    }

    /// One optimization step on a batch: objective, backprop, Adam, proxy
    /// renormalization, then the running-mean update.
    pub fn train_step(&mut self, x: &Matrix, labels: &[usize], adam: &mut Adam, lr_factor: f64) -> Result<Objective> {
        let obj = self.objective(x, labels)?;
        if !obj.total.is_finite() {
            return Err(Error::NonFinite("ensemble objective".into()));
        }
        {
            let mut params = self.params_mut();
            for (p, g) in params.iter_mut().zip(&obj.grads) {
                p.zero_grad();
                p.grad.add_scaled(g, 1.0)?;
            }
            adam.step(&mut params, lr_factor)?;
        }
        for m in &mut self.members {
            m.after_step();
        }
        match &mut self.ema {
            Some(e) => e.update(&obj.raw)?,
            None => self.ema = Some(EmaState::init(&obj.raw, self.config.smoothing)),
        }
        Ok(obj)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Classes per batch (P).
    pub batch_classes: usize,
    /// Samples per class (K).
    pub batch_per_class: usize,
    pub adam: AdamConfig,
    pub lr_scales: LrScales,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_classes: 8,
            batch_per_class: 4,
            adam: AdamConfig::default(),
            lr_scales: LrScales::default(),
        }
    }
}

impl TrainConfig {
    pub fn batches_per_epoch(&self, train_len: usize) -> usize {
        let batch = self.batch_classes * self.batch_per_class;
        train_len.div_ceil(batch.max(1)).max(1)
    }
}

/// Per-epoch averages over the batches of the epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    /// Effective weights at the end of the epoch.
    pub weights: Vec<f64>,
    pub diversity: Option<f64>,
    pub total: f64,
    /// Learning-rate factor of the last step in the epoch.
    pub lr: f64,
    pub test_nmi: Option<f64>,
    pub test_recall_at_1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub weight_sum: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Σw after every step (learned-weight modes only).
    pub weight_sums: Vec<f64>,
}

/// Trains the model on the training split with class-balanced batches,
/// Adam and cosine annealing over the whole run.
///
/// `on_epoch` runs after every epoch and may fill the test metrics.
pub fn train<R, F>(
    model: &mut EnsembleModel,
    train_set: &FeatureDataset,
    config: &TrainConfig,
    rng: &mut R,
    mut on_epoch: F,
) -> Result<TrainLog>
where
    R: Rng + ?Sized,
    F: FnMut(&EnsembleModel, &mut EpochRecord) -> Result<()>,
{
    let mut log = TrainLog::default();
    if config.epochs == 0 {
        return Ok(log);
    }
    model.set_lr_scales(&config.lr_scales, config.adam.lr);
    let mut adam = Adam::new(config.adam);
    let groups = train_set.class_indices();
    let batches = config.batches_per_epoch(train_set.len());
    let horizon = config.epochs * batches;
    let members = model.member_count();
    let mut step = 0;

    for epoch in 1..=config.epochs {
        let mut raw_sum = vec![0.0; members];
        let mut norm_sum = vec![0.0; members];
        let mut div_sum = 0.0;
        let mut total_sum = 0.0;
        let mut lr = 0.0;
        for batch_idx in 0..batches {
            let batch = sample_from_groups(train_set, &groups, config.batch_classes, config.batch_per_class, rng)?;
            lr = cosine_anneal(1.0, step, horizon)?;
            let diverged = |reason: String| Error::Diverged {
                epoch,
                batch: batch_idx,
                reason,
            };
            let obj = model
                .train_step(&batch.features, &batch.labels, &mut adam, lr)
                .map_err(|e| match e {
                    Error::NonFinite(_) | Error::NonFiniteGradient(_) => diverged(e.to_string()),
                    other => other,
                })?;
            if !obj.total.is_finite() {
                return Err(diverged("non-finite objective".into()));
            }
            step += 1;
            for j in 0..members {
                raw_sum[j] += obj.raw[j];
                norm_sum[j] += obj.normalized[j];
            }
            div_sum += obj.diversity.map_or(0.0, |d| d.0);
            total_sum += obj.total;
            if model.mode.learns_weights() {
                log.weight_sums.push(model.weights().iter().sum());
            }
        }
        let avg = |v: f64| v / batches as f64;
        let mut record = EpochRecord {
            epoch,
            raw: raw_sum.into_iter().map(avg).collect(),
            normalized: norm_sum.into_iter().map(avg).collect(),
            weights: model.weights(),
            diversity: model.mode.head_per_loss().then(|| avg(div_sum)),
            total: avg(total_sum),
            lr: lr * config.adam.lr,
            test_nmi: None,
            test_recall_at_1: None,
        };
        on_epoch(model, &mut record)?;
        log.epochs.push(record);
    }
    Ok(log)
}
