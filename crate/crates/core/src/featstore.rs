//! Feature datasets: file formats, synthetic generation, disjoint-class
//! splits and class-balanced mini-batch sampling.
//!
//! Two on-disk formats are supported:
//!
//! * text: comma-separated with header `f0,...,f{d-1},label`, one record per
//!   line, decimal 64-bit floats;
//! * binary: magic `FSTO`, little-endian `u32 n`, `u32 d`, then `n·d`
//!   little-endian `f64` features (row-major), then `n` little-endian `u32`
//!   labels.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{norm, Matrix};

const BIN_MAGIC: &[u8; 4] = b"FSTO";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub features: Vec<f64>,
    pub label: usize,
}

/// Records sharing one feature dimension, with labels in `[0, class_count)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    records: Vec<FeatureRecord>,
    dim: usize,
    class_count: usize,
}

impl FeatureDataset {
    /// Validates the records and remaps labels to a contiguous range.
    ///
    /// Labels that already form `[0, C)` are kept; otherwise they are
    /// renumbered in order of first appearance.
    pub fn new(mut records: Vec<FeatureRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::InvalidArgument("dataset has no records".into()))?;
        let dim = first.features.len();
        if dim == 0 {
            return Err(Error::InvalidArgument("feature dimension must be >= 1".into()));
        }
        for (i, r) in records.iter().enumerate() {
            if r.features.len() != dim {
                return Err(Error::InvalidArgument(format!(
                    "record {i}: dimension {} differs from {dim}",
                    r.features.len()
                )));
            }
            if let Some(j) = r.features.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "record {i}: feature {j} is not finite"
                )));
            }
        }

        let mut order: HashMap<usize, usize> = HashMap::new();
        for r in &records {
            let next = order.len();
            order.entry(r.label).or_insert(next);
        }
        let class_count = order.len();
        let contiguous = order.keys().all(|&l| l < class_count);
        if !contiguous {
            for r in &mut records {
                r.label = order[&r.label];
            }
        }
        Ok(FeatureDataset {
            records,
            dim,
            class_count,
        })
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn features(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.len() * self.dim);
        for r in &self.records {
            data.extend_from_slice(&r.features);
        }
        Matrix::from_vec(self.len(), self.dim, data).expect("validated at construction")
    }

    /// Record indices grouped by class, each group in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.class_count];
        for (i, r) in self.records.iter().enumerate() {
            groups[r.label].push(i);
        }
        groups
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Csv,
    Bin,
}

impl FileFormat {
    /// `.csv` / `.txt` map to text, anything else to binary.
    pub fn from_path(path: &Path) -> FileFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") | Some("txt") => FileFormat::Csv,
            _ => FileFormat::Bin,
        }
    }
}

impl FromStr for FileFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(FileFormat::Csv),
            "bin" => Ok(FileFormat::Bin),
            other => Err(Error::InvalidArgument(format!("unknown feature format `{other}`"))),
        }
    }
}

impl fmt::Display for FileFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FileFormat::Csv => "csv",
            FileFormat::Bin => "bin",
        })
    }
}

pub fn load_features(path: impl AsRef<Path>, format: FileFormat) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let records = match format {
        FileFormat::Csv => parse_csv(path, &bytes)?,
        FileFormat::Bin => parse_bin(path, &bytes)?,
    };
    FeatureDataset::new(records)
}

fn format_err(path: &Path, row: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        row,
        reason: reason.into(),
    }
}

/// Rows are numbered from 1 at the first data line (the header is row 0).
fn parse_csv(path: &Path, bytes: &[u8]) -> Result<Vec<FeatureRecord>> {
    let text = std::str::from_utf8(bytes).map_err(|_| format_err(path, 0, "not valid UTF-8"))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| format_err(path, 0, "empty file"))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let dim = columns.len().saturating_sub(1);
    let header_ok = dim >= 1
        && columns[dim] == "label"
        && columns[..dim]
            .iter()
            .enumerate()
            .all(|(i, c)| *c == format!("f{i}"));
    if !header_ok {
        return Err(format_err(path, 0, "malformed header, expected `f0,...,f{d-1},label`"));
    }

    let mut records = Vec::new();
    for (row0, line) in lines.enumerate() {
        let row = row0 + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(format_err(
                path,
                row,
                format!("inconsistent dimension: {} columns, expected {}", fields.len(), dim + 1),
            ));
        }
        let mut features = Vec::with_capacity(dim);
        for f in &fields[..dim] {
            let v: f64 = f
                .parse()
                .map_err(|_| format_err(path, row, format!("malformed row: `{f}` is not a number")))?;
            if !v.is_finite() {
                return Err(format_err(path, row, "non-finite feature value"));
            }
            features.push(v);
        }
        let label: usize = fields[dim]
            .parse()
            .map_err(|_| format_err(path, row, format!("malformed row: bad label `{}`", fields[dim])))?;
        records.push(FeatureRecord { features, label });
    }
    if records.is_empty() {
        return Err(format_err(path, 0, "empty file: no records"));
    }
    Ok(records)
}

fn parse_bin(path: &Path, bytes: &[u8]) -> Result<Vec<FeatureRecord>> {
    if bytes.is_empty() {
        return Err(format_err(path, 0, "empty file"));
    }
    if bytes.len() < 12 || &bytes[..4] != BIN_MAGIC {
        return Err(format_err(path, 0, "missing FSTO header"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if n == 0 {
        return Err(format_err(path, 0, "empty file: no records"));
    }
    if dim == 0 {
        return Err(format_err(path, 0, "feature dimension must be >= 1"));
    }
    let expected = 12 + n * dim * 8 + n * 4;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            0,
            format!("length {} does not match n={n}, d={dim} (expected {expected})", bytes.len()),
        ));
    }
    let feats = &bytes[12..12 + n * dim * 8];
    let labels = &bytes[12 + n * dim * 8..];
    let mut records = Vec::with_capacity(n);
    for row in 0..n {
        let mut features = Vec::with_capacity(dim);
        for chunk in feats[row * dim * 8..(row + 1) * dim * 8].chunks_exact(8) {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(format_err(path, row + 1, "non-finite feature value"));
            }
            features.push(v);
        }
        let label = u32::from_le_bytes(labels[row * 4..row * 4 + 4].try_into().unwrap()) as usize;
        records.push(FeatureRecord { features, label });
    }
    Ok(records)
}

pub fn save_features(ds: &FeatureDataset, path: impl AsRef<Path>, format: FileFormat) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = match format {
        FileFormat::Csv => write_csv(ds, &mut w),
        FileFormat::Bin => write_bin(ds, &mut w),
    };
    res.and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn write_csv(ds: &FeatureDataset, w: &mut impl Write) -> std::io::Result<()> {
    let header: Vec<String> = (0..ds.dim).map(|i| format!("f{i}")).collect();
    writeln!(w, "{},label", header.join(","))?;
    for r in &ds.records {
        for v in &r.features {
            // Display prints the shortest representation that round-trips.
            write!(w, "{v},")?;
        }
        writeln!(w, "{}", r.label)?;
    }
    Ok(())
}

fn write_bin(ds: &FeatureDataset, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(BIN_MAGIC)?;
    w.write_all(&(ds.len() as u32).to_le_bytes())?;
    w.write_all(&(ds.dim as u32).to_le_bytes())?;
    for r in &ds.records {
        for v in &r.features {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for r in &ds.records {
        w.write_all(&(r.label as u32).to_le_bytes())?;
    }
    Ok(())
}

/// Disjoint-class split: seen classes for training, unseen for testing.
#[derive(Debug, Clone)]
pub struct ZslSplit {
    pub train: FeatureDataset,
    pub test: FeatureDataset,
}

/// Classes `[0, ⌈C/2⌉)` go to train and the rest to test; both sides are
/// re-indexed from zero with record order preserved.
pub fn zsl_split(ds: &FeatureDataset) -> Result<ZslSplit> {
    if ds.class_count < 2 {
        return Err(Error::InvalidArgument(format!(
            "a disjoint-class split needs at least 2 classes, got {}",
            ds.class_count
        )));
    }
    let cut = ds.class_count.div_ceil(2);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in &ds.records {
        if r.label < cut {
            train.push(r.clone());
        } else {
            test.push(FeatureRecord {
                features: r.features.clone(),
                label: r.label - cut,
            });
        }
    }
    Ok(ZslSplit {
        train: FeatureDataset {
            records: train,
            dim: ds.dim,
            class_count: cut,
        },
        test: FeatureDataset {
            records: test,
            dim: ds.dim,
            class_count: ds.class_count - cut,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub indices: Vec<usize>,
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Draws `classes` distinct classes and `per_class` samples of each.
///
/// Samples are drawn without replacement when a class has enough of them,
/// with replacement otherwise.
pub fn sample_batch<R: Rng + ?Sized>(
    ds: &FeatureDataset,
    classes: usize,
    per_class: usize,
    rng: &mut R,
) -> Result<MiniBatch> {
    let groups = ds.class_indices();
    sample_from_groups(ds, &groups, classes, per_class, rng)
}

/// [`sample_batch`] with precomputed [`FeatureDataset::class_indices`].
pub fn sample_from_groups<R: Rng + ?Sized>(
    ds: &FeatureDataset,
    groups: &[Vec<usize>],
    classes: usize,
    per_class: usize,
    rng: &mut R,
) -> Result<MiniBatch> {
    if classes < 2 || per_class < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch shape P={classes}, K={per_class}: both must be >= 2"
        )));
    }
    if ds.class_count < classes {
        return Err(Error::InvalidArgument(format!(
            "batch needs {classes} classes, dataset has {}",
            ds.class_count
        )));
    }
    let mut indices = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for class in index::sample(rng, ds.class_count, classes).into_iter() {
        let members = &groups[class];
        if members.len() >= per_class {
            for k in index::sample(rng, members.len(), per_class).into_iter() {
                indices.push(members[k]);
            }
        } else {
            for _ in 0..per_class {
                indices.push(members[rng.gen_range(0..members.len())]);
            }
        }
        labels.extend(std::iter::repeat_n(class, per_class));
    }
    let features = Matrix::from_rows(
        &indices
            .iter()
            .map(|&i| ds.records[i].features.as_slice())
            .collect::<Vec<_>>(),
    )?;
    Ok(MiniBatch {
        indices,
        features,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Warp {
    #[default]
    None,
    /// A fixed random layer `A₂ · tanh(A₁ · x)` with Gaussian `A₁, A₂`
    /// scaled by `1/√d`, shared by every sample of the dataset.
    TanhMix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub sep: f64,
    #[serde(default)]
    pub warp: Warp,
}

/// Isotropic Gaussian classes with means drawn uniformly on a sphere of
/// radius `sep` and unit-variance noise. Records are emitted class by class.
pub fn synth_gaussians<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Result<FeatureDataset> {
    let SynthSpec {
        classes,
        per_class,
        dim,
        sep,
        warp,
    } = *spec;
    if classes < 2 || per_class < 2 || dim < 1 {
        return Err(Error::InvalidArgument(format!(
            "synthetic dataset needs classes >= 2, per_class >= 2, dim >= 1 (got {classes}, {per_class}, {dim})"
        )));
    }
    if !(sep >= 0.0 && sep.is_finite()) {
        return Err(Error::InvalidArgument(format!("separation must be finite and >= 0, got {sep}")));
    }

    let gaussian = |n: usize, rng: &mut R| -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    };
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let mut dir = gaussian(dim, rng);
            let n = norm(&dir).max(f64::MIN_POSITIVE);
            dir.iter_mut().for_each(|v| *v *= sep / n);
            dir
        })
        .collect();
    let mixing = match warp {
        Warp::None => None,
        Warp::TanhMix => {
            let scale = 1.0 / (dim as f64).sqrt();
            let inner = Matrix::from_vec(dim, dim, gaussian(dim * dim, rng))?;
            let outer = Matrix::from_vec(dim, dim, gaussian(dim * dim, rng))?;
            Some((inner, outer, scale))
        }
    };

    let mut records = Vec::with_capacity(classes * per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let noise = gaussian(dim, rng);
            let mut x: Vec<f64> = mean.iter().zip(&noise).map(|(m, z)| m + z).collect();
            if let Some((inner, outer, scale)) = &mixing {
                let hidden: Vec<f64> = (0..dim)
                    .map(|i| (scale * crate::numcore::dot(inner.row(i), &x)).tanh())
                    .collect();
                x = (0..dim)
                    .map(|i| scale * crate::numcore::dot(outer.row(i), &hidden))
                    .collect();
            }
            records.push(FeatureRecord { features: x, label });
        }
    }
    FeatureDataset::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(features: &[f64], label: usize) -> FeatureRecord {
        FeatureRecord {
            features: features.to_vec(),
            label,
        }
    }

    #[test]
    fn csv_four_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "f0,f1,f2,label\n1,2,3,0\n4,5,6,0\n7,8,9,1\n1.5,-2,0,1\n").unwrap();
        let ds = load_features(&p, FileFormat::Csv).unwrap();
        assert_eq!(ds.dim(), 3);
        assert_eq!(ds.class_count(), 2);
        assert_eq!(ds.labels(), vec![0, 0, 1, 1]);
        assert_eq!(ds.records()[3].features, vec![1.5, -2.0, 0.0]);
    }

    #[test]
    fn labels_remap_first_appearance() {
        let ds = FeatureDataset::new(vec![rec(&[1.0], 5), rec(&[2.0], 5), rec(&[3.0], 9)]).unwrap();
        assert_eq!(ds.labels(), vec![0, 0, 1]);
        assert_eq!(ds.class_count(), 2);
        // already contiguous labels are kept even when out of order
        let ds = FeatureDataset::new(vec![rec(&[1.0], 1), rec(&[2.0], 0)]).unwrap();
        assert_eq!(ds.labels(), vec![1, 0]);
    }

    #[test]
    fn csv_errors_carry_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "f0,f1,label\n1,2,0\n1,abc,1\n").unwrap();
        let err = load_features(&p, FileFormat::Csv).unwrap_err();
        match err {
            Error::Format { row, reason, .. } => {
                assert_eq!(row, 2);
                assert!(reason.contains("malformed row"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }

        fs::write(&p, "f0,f1,label\n1,2,0\n1,1\n").unwrap();
        assert!(matches!(
            load_features(&p, FileFormat::Csv).unwrap_err(),
            Error::Format { row: 2, .. }
        ));

        fs::write(&p, "f0,f1,label\n1,NaN,0\n").unwrap();
        assert!(matches!(
            load_features(&p, FileFormat::Csv).unwrap_err(),
            Error::Format { row: 1, .. }
        ));

        fs::write(&p, "").unwrap();
        assert!(load_features(&p, FileFormat::Csv).is_err());
        fs::write(&p, "f0,label\n").unwrap();
        assert!(load_features(&p, FileFormat::Csv).is_err());
    }

    #[test]
    fn bin_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        fs::write(&p, b"").unwrap();
        assert!(load_features(&p, FileFormat::Bin).is_err());
        fs::write(&p, b"XXXX\x01\0\0\0\x01\0\0\0").unwrap();
        assert!(load_features(&p, FileFormat::Bin).is_err());
        let mut bytes = b"FSTO".to_vec();
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(f64::INFINITY.to_le_bytes());
        bytes.extend(0u32.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_features(&p, FileFormat::Bin).unwrap_err(),
            Error::Format { row: 1, .. }
        ));
    }

    #[test]
    fn split_examples() {
        let make = |c: usize| {
            FeatureDataset::new((0..c).map(|l| rec(&[l as f64], l)).collect()).unwrap()
        };
        let s = zsl_split(&make(200)).unwrap();
        assert_eq!(s.train.class_count(), 100);
        assert_eq!(s.test.class_count(), 100);
        assert_eq!(s.test.records()[0].features, vec![100.0]);
        assert_eq!(s.test.records()[0].label, 0);

        let s = zsl_split(&make(2)).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (1, 1));

        let s = zsl_split(&make(5)).unwrap();
        assert_eq!(s.train.labels(), vec![0, 1, 2]);
        assert_eq!(s.test.labels(), vec![0, 1]);
        assert_eq!(s.test.records()[1].features, vec![4.0]);

        assert!(zsl_split(&make(1).clone()).is_err());
    }

    #[test]
    fn batch_shape_and_replacement() {
        let ds = FeatureDataset::new(vec![
            rec(&[0.0], 0),
            rec(&[1.0], 0),
            rec(&[2.0], 1),
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = sample_batch(&ds, 2, 2, &mut rng).unwrap();
        assert_eq!(b.len(), 4);
        let mut sorted = b.labels.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 0, 1, 1]);
        // class 1 has a single sample; it must appear twice
        let ones: Vec<usize> = b
            .indices
            .iter()
            .zip(&b.labels)
            .filter(|(_, &l)| l == 1)
            .map(|(&i, _)| i)
            .collect();
        assert_eq!(ones, vec![2, 2]);
        assert_eq!(b.features.row(0), ds.records()[b.indices[0]].features.as_slice());
        assert!(sample_batch(&ds, 3, 2, &mut rng).is_err());
        assert!(sample_batch(&ds, 2, 1, &mut rng).is_err());
    }

    #[test]
    fn batch_is_deterministic() {
        let ds = synth_gaussians(
            &SynthSpec { classes: 6, per_class: 5, dim: 3, sep: 1.0, warp: Warp::None },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let a = sample_batch(&ds, 3, 4, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = sample_batch(&ds, 3, 4, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synth_is_deterministic_and_validated() {
        let spec = SynthSpec { classes: 4, per_class: 3, dim: 5, sep: 2.0, warp: Warp::TanhMix };
        let a = synth_gaussians(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = synth_gaussians(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        assert_eq!(a.class_count(), 4);
        let bad = SynthSpec { classes: 1, ..spec };
        assert!(synth_gaussians(&bad, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
        let bad = SynthSpec { sep: -1.0, ..spec };
        assert!(synth_gaussians(&bad, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn synth_means_lie_on_sphere() {
        // one sample per class would be noisy; average many to recover the mean radius
        let spec = SynthSpec { classes: 2, per_class: 4000, dim: 3, sep: 5.0, warp: Warp::None };
        let ds = synth_gaussians(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for group in ds.class_indices() {
            let mut mean = [0.0; 3];
            for &i in &group {
                for (m, v) in mean.iter_mut().zip(&ds.records()[i].features) {
                    *m += v / group.len() as f64;
                }
            }
            assert!((norm(&mean) - 5.0).abs() < 0.1);
        }
    }
}
