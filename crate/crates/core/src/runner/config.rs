use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compressor::CompressConfig;
use crate::ensemble::{EnsembleConfig, EnsembleMode, TrainConfig};
use crate::error::{Error, Result};
use crate::featstore::{FileFormat, SynthSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    File {
        path: PathBuf,
        /// Inferred from the extension when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        format: Option<FileFormat>,
    },
    Synthetic(SynthSpec),
}

/// A complete experiment description. Only `dataset`, `mode` and `seed` are
/// required; everything else has a documented default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub mode: EnsembleMode,
    pub seed: u64,
    #[serde(default)]
    pub model: EnsembleConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Fit a compression regressor after training (per-loss-head mode only).
    #[serde(default)]
    pub compress: bool,
    #[serde(default)]
    pub compressor: CompressConfig,
    /// Evaluate on the unseen-class split after every epoch.
    #[serde(default = "default_true")]
    pub eval_every_epoch: bool,
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn new(dataset: DatasetSource, mode: EnsembleMode, seed: u64) -> Self {
        RunConfig {
            dataset,
            mode,
            seed,
            model: EnsembleConfig::default(),
            train: TrainConfig::default(),
            compress: false,
            compressor: CompressConfig::default(),
            eval_every_epoch: true,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (compact) JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn member_count(&self) -> usize {
        match self.mode {
            EnsembleMode::Baseline(_) => 1,
            _ => self.model.losses.len(),
        }
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        let positive = |v: f64| v > 0.0 && v.is_finite();

        let train_classes = match &self.dataset {
            DatasetSource::Synthetic(s) => {
                check(s.classes >= 2, format!("dataset.synthetic.classes must be >= 2 (got {})", s.classes));
                check(s.per_class >= 2, format!("dataset.synthetic.per_class must be >= 2 (got {})", s.per_class));
                check(s.dim >= 1, format!("dataset.synthetic.dim must be >= 1 (got {})", s.dim));
                check(s.sep >= 0.0 && s.sep.is_finite(), format!("dataset.synthetic.sep must be finite and >= 0 (got {})", s.sep));
                Some(s.classes.div_ceil(2))
            }
            DatasetSource::File { path, .. } => {
                check(path.is_file(), format!("dataset.file.path {} does not exist", path.display()));
                None
            }
        };

        let m = &self.model;
        check(m.embed_dim >= 1, format!("model.embed_dim must be >= 1 (got {})", m.embed_dim));
        if !matches!(self.mode, EnsembleMode::Baseline(_)) {
            check(m.losses.len() >= 2, format!("mode {} needs at least 2 losses (got {})", self.mode, m.losses.len()));
        }
        let mut sorted = m.losses.clone();
        sorted.sort();
        sorted.dedup();
        check(sorted.len() == m.losses.len(), "model.losses contains duplicates".into());
        check(positive(m.loss.margin), format!("model.loss.margin must be > 0 (got {})", m.loss.margin));
        check(positive(m.loss.binomial.beta1), format!("model.loss.binomial.beta1 must be > 0 (got {})", m.loss.binomial.beta1));
        check(m.loss.binomial.beta2.is_finite(), "model.loss.binomial.beta2 must be finite".into());
        check(positive(m.loss.binomial.c_neg), format!("model.loss.binomial.c_neg must be > 0 (got {})", m.loss.binomial.c_neg));
        check(
            (0.0..1.0).contains(&m.loss.smoothing),
            format!("model.loss.smoothing must be in [0, 1) (got {})", m.loss.smoothing),
        );
        check(m.lambda >= 0.0 && m.lambda.is_finite(), format!("model.lambda must be >= 0 (got {})", m.lambda));
        check(m.eta >= 0.0 && m.eta.is_finite(), format!("model.eta must be >= 0 (got {})", m.eta));
        check(positive(m.smoothing), format!("model.smoothing must be > 0 (got {})", m.smoothing));
        if let Some(floor) = m.weight_floor {
            let members = self.member_count().max(1) as f64;
            check(
                floor > 0.0 && floor <= 1.0 / members,
                format!("model.weight_floor must be in (0, 1/M] (got {floor})"),
            );
        }

        let t = &self.train;
        check(t.batch_classes >= 2, format!("train.batch_classes must be >= 2 (got {})", t.batch_classes));
        check(t.batch_per_class >= 2, format!("train.batch_per_class must be >= 2 (got {})", t.batch_per_class));
        if let Some(c) = train_classes {
            check(
                c >= t.batch_classes,
                format!("train split has {c} classes, fewer than train.batch_classes = {}", t.batch_classes),
            );
        }
        for (name, adam) in [("train.adam", &t.adam), ("compressor.adam", &self.compressor.adam)] {
            check(positive(adam.lr), format!("{name}.lr must be > 0 (got {})", adam.lr));
            check(positive(adam.eps), format!("{name}.eps must be > 0 (got {})", adam.eps));
            check((0.0..1.0).contains(&adam.beta1), format!("{name}.beta1 must be in [0, 1) (got {})", adam.beta1));
            check((0.0..1.0).contains(&adam.beta2), format!("{name}.beta2 must be in [0, 1) (got {})", adam.beta2));
            check(
                adam.weight_decay >= 0.0 && adam.weight_decay.is_finite(),
                format!("{name}.weight_decay must be >= 0 (got {})", adam.weight_decay),
            );
        }
        let s = &t.lr_scales;
        for (name, v) in [
            ("heads", s.heads),
            ("proxy_lr", s.proxy_lr),
            ("softmax", s.softmax),
            ("coefficients", s.coefficients),
        ] {
            check(positive(v), format!("train.lr_scales.{name} must be > 0 (got {v})"));
        }

        if self.compress {
            check(
                self.mode == EnsembleMode::Wedl,
                format!("compress requires mode WEDL (got {})", self.mode),
            );
            check(self.compressor.batch_classes >= 2, "compressor.batch_classes must be >= 2".into());
            check(self.compressor.batch_per_class >= 2, "compressor.batch_per_class must be >= 2".into());
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}
