//! Experiment orchestration: configuration, train → evaluate → compress →
//! evaluate, checkpoints and plot data.
//!
//! Every random draw of a run comes from the run seed through a separate
//! ChaCha stream per stage (data, initialization, batches, compressor), so
//! changing one stage never shifts the draws of another.

mod checkpoint;
mod config;
pub mod gradcheck;

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::{DatasetSource, RunConfig};

use crate::compressor::{ensemble_concat, train_compressor, CompressEpoch, CompressionRegressor};
use crate::ensemble::{train, EnsembleModel, EpochRecord};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, DistanceSource, MetricsReport, DEFAULT_RECALL_KS};
use crate::featstore::{load_features, synth_gaussians, FeatureDataset, FileFormat, ZslSplit};
use crate::losses::LossKind;
use crate::numcore::Matrix;

pub const REPORT_FILE: &str = "report.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

const STREAM_DATA: u64 = 0;
const STREAM_INIT: u64 = 1;
const STREAM_BATCHES: u64 = 2;
const STREAM_COMPRESS: u64 = 3;

/// ChaCha8 generator for one stage of a run.
pub fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub epochs: Vec<CompressEpoch>,
    /// Metrics of the compressed single embedding on the unseen classes.
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub config: RunConfig,
    pub members: Vec<LossKind>,
    pub train_samples: usize,
    pub train_classes: usize,
    pub test_samples: usize,
    pub test_classes: usize,
    pub epochs: Vec<EpochRecord>,
    /// Σw after every step, for modes with learned weights.
    pub weight_sums: Vec<f64>,
    pub final_weights: Vec<f64>,
    /// Unseen-class metrics of the trained model under its test-time distance.
    pub metrics: MetricsReport,
    pub compression: Option<CompressionReport>,
}

/// Result of [`run`]: the report plus the trained artifacts.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub checkpoint: Checkpoint,
}

pub fn load_dataset(source: &DatasetSource, seed: u64) -> Result<FeatureDataset> {
    match source {
        DatasetSource::File { path, format } => {
            load_features(path, format.unwrap_or_else(|| FileFormat::from_path(path)))
        }
        DatasetSource::Synthetic(spec) => synth_gaussians(spec, &mut stage_rng(seed, STREAM_DATA)),
    }
}

pub fn prepare_split(config: &RunConfig) -> Result<ZslSplit> {
    crate::featstore::zsl_split(&load_dataset(&config.dataset, config.seed)?)
}

/// Test-time distance of a model: the weighted per-head distance for the
/// per-loss-head mode, squared Euclidean between unit embeddings otherwise.
pub fn distance_source(model: &EnsembleModel, features: &Matrix) -> Result<DistanceSource> {
    let mut heads = model.embed_unit(features)?;
    if model.mode.head_per_loss() {
        Ok(DistanceSource::Ensemble {
            heads,
            weights: model.head_weights(),
            form: model.config.distance_form,
        })
    } else {
        Ok(DistanceSource::Single(heads.remove(0)))
    }
}

pub fn compressed_source(model: &EnsembleModel, reg: &CompressionRegressor, features: &Matrix) -> Result<DistanceSource> {
    Ok(DistanceSource::Single(reg.compress_rows(&ensemble_concat(model, features)?)?))
}

pub fn evaluate_model(model: &EnsembleModel, test: &FeatureDataset, seed: u64) -> Result<MetricsReport> {
    evaluate(&distance_source(model, &test.features())?, &test.labels(), &DEFAULT_RECALL_KS, None, seed)
}

pub fn evaluate_compressed(
    model: &EnsembleModel,
    reg: &CompressionRegressor,
    test: &FeatureDataset,
    seed: u64,
) -> Result<MetricsReport> {
    evaluate(
        &compressed_source(model, reg, &test.features())?,
        &test.labels(),
        &DEFAULT_RECALL_KS,
        None,
        seed,
    )
}

/// Fits the compressor on the training split and evaluates it.
pub fn compress_stage(
    config: &RunConfig,
    model: &EnsembleModel,
    split: &ZslSplit,
) -> Result<(CompressionRegressor, CompressionReport)> {
    let mut rng = stage_rng(config.seed, STREAM_COMPRESS);
    let (reg, epochs) = train_compressor(model, &split.train, &config.compressor, &mut rng)?;
    let metrics = evaluate_compressed(model, &reg, &split.test, config.seed)?;
    Ok((reg, CompressionReport { epochs, metrics }))
}

/// Validates the configuration, then trains, evaluates and optionally
/// compresses. Nothing is written to disk.
pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let split = prepare_split(config)?;
    if split.train.class_count() < config.train.batch_classes {
        return Err(Error::Config(vec![format!(
            "train split has {} classes, fewer than train.batch_classes = {}",
            split.train.class_count(),
            config.train.batch_classes
        )]));
    }
    let input_dim = split.train.dim();
    let classes = split.train.class_count();
    let mut model = EnsembleModel::new(
        config.mode,
        config.model.clone(),
        input_dim,
        classes,
        &mut stage_rng(config.seed, STREAM_INIT),
    )?;

    let test_x = split.test.features();
    let test_labels = split.test.labels();
    let log = train(
        &mut model,
        &split.train,
        &config.train,
        &mut stage_rng(config.seed, STREAM_BATCHES),
        |m, record| {
            if config.eval_every_epoch {
                let metrics = evaluate(&distance_source(m, &test_x)?, &test_labels, &[1], None, config.seed)?;
                record.test_nmi = Some(metrics.nmi);
                record.test_recall_at_1 = metrics.recall_at(1);
            }
            log::info!(
                "epoch {} total {:.6} lr {:.3e} weights {:?}",
                record.epoch,
                record.total,
                record.lr,
                record.weights
            );
            Ok(())
        },
    )?;
    let metrics = evaluate_model(&model, &split.test, config.seed)?;

    let (regressor, compression) = if config.compress {
        let (reg, rep) = compress_stage(config, &model, &split)?;
        (Some(reg), Some(rep))
    } else {
        (None, None)
    };

    let report = RunReport {
        config_hash: config.hash(),
        config: config.clone(),
        members: model.members.iter().map(|m| m.kind).collect(),
        train_samples: split.train.len(),
        train_classes: classes,
        test_samples: split.test.len(),
        test_classes: split.test.class_count(),
        epochs: log.epochs,
        weight_sums: log.weight_sums,
        final_weights: model.weights(),
        metrics,
        compression,
    };
    Ok(RunOutcome {
        report,
        checkpoint: Checkpoint {
            config: config.clone(),
            input_dim,
            classes,
            model,
            regressor,
        },
    })
}

/// [`run`], then writes `report.json`, `curves.csv`, `metrics.json` and
/// `model.ckpt` into `out_dir`.
pub fn run_to_dir(config: &RunConfig, out_dir: impl AsRef<Path>) -> Result<RunOutcome> {
    let out_dir = out_dir.as_ref();
    let outcome = run(config)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(&out_dir.join(REPORT_FILE), &outcome.report)?;
    emit_plot_data(&outcome.report, out_dir)?;
    outcome.checkpoint.save(out_dir.join(CHECKPOINT_FILE))?;
    Ok(outcome)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Per-epoch table: raw, normalized and weight columns per member, then
/// diversity, total, lr and the unseen-class NMI and Recall@1. Missing
/// values are left empty.
pub fn curves_csv(report: &RunReport) -> String {
    let mut out = String::from("epoch");
    for prefix in ["raw", "norm", "w"] {
        for m in &report.members {
            write!(out, ",{prefix}_{m}").unwrap();
        }
    }
    out.push_str(",diversity,total,lr,test_nmi,test_recall_at_1\n");
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in &report.epochs {
        write!(out, "{}", r.epoch).unwrap();
        for v in r.raw.iter().chain(&r.normalized).chain(&r.weights) {
            write!(out, ",{v}").unwrap();
        }
        writeln!(
            out,
            ",{},{},{},{},{}",
            opt(r.diversity),
            r.total,
            r.lr,
            opt(r.test_nmi),
            opt(r.test_recall_at_1)
        )
        .unwrap();
    }
    out
}

/// Final metrics in a compact stand-alone document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub config_hash: String,
    pub mode: String,
    pub final_weights: Vec<f64>,
    pub metrics: MetricsReport,
    pub compressed: Option<MetricsReport>,
}

impl FinalMetrics {
    pub fn from_report(report: &RunReport) -> Self {
        FinalMetrics {
            config_hash: report.config_hash.clone(),
            mode: report.config.mode.to_string(),
            final_weights: report.final_weights.clone(),
            metrics: report.metrics.clone(),
            compressed: report.compression.as_ref().map(|c| c.metrics.clone()),
        }
    }
}

/// Writes `curves.csv` and `metrics.json` into `dir`.
pub fn emit_plot_data(report: &RunReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let curves = dir.join(CURVES_FILE);
    std::fs::write(&curves, curves_csv(report)).map_err(|e| Error::io(&curves, e))?;
    write_json(&dir.join(METRICS_FILE), &FinalMetrics::from_report(report))
}

/// Metrics of a saved checkpoint, recomputed from its configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub metrics: MetricsReport,
    pub compressed: Option<MetricsReport>,
}

pub fn evaluate_checkpoint(ck: &Checkpoint) -> Result<EvalReport> {
    let split = prepare_split(&ck.config)?;
    let metrics = evaluate_model(&ck.model, &split.test, ck.config.seed)?;
    let compressed = ck
        .regressor
        .as_ref()
        .map(|reg| evaluate_compressed(&ck.model, reg, &split.test, ck.config.seed))
        .transpose()?;
    Ok(EvalReport {
        config_hash: ck.config.hash(),
        metrics,
        compressed,
    })
}

/// Fits a compressor onto a trained per-loss-head checkpoint in place.
pub fn compress_checkpoint(ck: &mut Checkpoint) -> Result<CompressionReport> {
    if !ck.model.mode.head_per_loss() {
        return Err(Error::InvalidArgument(format!(
            "compression needs a WEDL checkpoint, got {}",
            ck.model.mode
        )));
    }
    let split = prepare_split(&ck.config)?;
    let (reg, report) = compress_stage(&ck.config, &ck.model, &split)?;
    ck.regressor = Some(reg);
    Ok(report)
}
