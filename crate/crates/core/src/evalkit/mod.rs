//! Retrieval and clustering metrics on learned embeddings: Recall@k,
//! k-means NMI and leave-one-out kNN accuracy.
//!
//! Neighbors are ranked by `(distance, index)`, so ties always resolve to
//! the lowest index and every metric is reproducible.

mod kmeans;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::ensemble::{ensemble_distance, DistanceForm};
use crate::error::{Error, Result};
use crate::numcore::{sq_dist, Matrix};

pub use kmeans::{kmeans, KMeans};

/// Where pairwise distances come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DistanceSource {
    /// Squared Euclidean distance between rows.
    Single(Matrix),
    /// Weighted per-head distance over unit-normalized head embeddings.
    Ensemble {
        heads: Vec<Matrix>,
        weights: Vec<f64>,
        form: DistanceForm,
    },
}

impl DistanceSource {
    pub fn len(&self) -> usize {
        match self {
            DistanceSource::Single(m) => m.rows(),
            DistanceSource::Ensemble { heads, .. } => heads.first().map_or(0, Matrix::rows),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        if let DistanceSource::Ensemble { heads, weights, .. } = self {
            if heads.is_empty() || heads.len() != weights.len() {
                return Err(Error::shape("DistanceSource", weights.len(), heads.len()));
            }
            let shape = heads[0].shape();
            if heads.iter().any(|h| h.shape() != shape) {
                return Err(Error::InvalidArgument("ensemble heads differ in shape".into()));
            }
        }
        Ok(())
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        match self {
            DistanceSource::Single(m) => sq_dist(m.row(i), m.row(j)),
            DistanceSource::Ensemble { heads, weights, form } => {
                let x: Vec<&[f64]> = heads.iter().map(|h| h.row(i)).collect();
                let y: Vec<&[f64]> = heads.iter().map(|h| h.row(j)).collect();
                ensemble_distance(&x, &y, weights, *form).expect("validated shapes")
            }
        }
    }

    /// Symmetric `N × N` distance matrix with a zero diagonal.
    pub fn pairwise(&self) -> Result<Matrix> {
        self.validate()?;
        let n = self.len();
        let mut d = Matrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = self.distance(i, j);
                d[(i, j)] = v;
                d[(j, i)] = v;
            }
        }
        Ok(d)
    }

    /// Coordinates whose squared Euclidean distances reproduce the source
    /// (the `√w`-weighted concatenation for ensembles); used for clustering.
    pub fn points(&self) -> Result<Matrix> {
        self.validate()?;
        match self {
            DistanceSource::Single(m) => Ok(m.clone()),
            DistanceSource::Ensemble { heads, weights, .. } => crate::compressor::concat_rows(heads, weights),
        }
    }
}

/// For every query, the indices of its `k` nearest non-self points.
pub fn ranked_neighbors(dist: &Matrix, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = dist.rows();
    if k >= n {
        return Err(Error::InvalidArgument(format!("k={k} needs more than {n} points")));
    }
    let mut out = Vec::with_capacity(n);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        let row = dist.row(i);
        let cmp = |a: &usize, b: &usize| row[*a].total_cmp(&row[*b]).then(a.cmp(b));
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_by(cmp);
        out.push(order[..k].to_vec());
    }
    Ok(out)
}

fn check_labels(src_len: usize, labels: &[usize]) -> Result<()> {
    if src_len != labels.len() {
        return Err(Error::shape("metric labels", src_len, labels.len()));
    }
    Ok(())
}

fn recall_from_neighbors(neighbors: &[Vec<usize>], labels: &[usize], k: usize) -> f64 {
    let hits = neighbors
        .iter()
        .enumerate()
        .filter(|(i, nb)| nb[..k].iter().any(|&j| labels[j] == labels[*i]))
        .count();
    hits as f64 / neighbors.len() as f64
}

fn knn_from_neighbors(neighbors: &[Vec<usize>], labels: &[usize], k: usize) -> f64 {
    let needed = k.div_ceil(2);
    let correct = neighbors
        .iter()
        .enumerate()
        .filter(|(i, nb)| nb[..k].iter().filter(|&&j| labels[j] == labels[*i]).count() >= needed)
        .count();
    correct as f64 / neighbors.len() as f64
}

/// Fraction of queries with at least one same-class point among their `k`
/// nearest neighbors.
pub fn recall_at_k(src: &DistanceSource, labels: &[usize], k: usize) -> Result<f64> {
    check_labels(src.len(), labels)?;
    if k == 0 {
        return Err(Error::InvalidArgument("Recall@0 is undefined".into()));
    }
    let nb = ranked_neighbors(&src.pairwise()?, k)?;
    Ok(recall_from_neighbors(&nb, labels, k))
}

/// Fraction of queries for which at least `⌈k/2⌉` of the `k` nearest
/// neighbors (query excluded) share the query's class.
pub fn knn_accuracy(src: &DistanceSource, labels: &[usize], k: usize) -> Result<f64> {
    check_labels(src.len(), labels)?;
    if k == 0 {
        return Err(Error::InvalidArgument("kNN with k=0".into()));
    }
    let nb = ranked_neighbors(&src.pairwise()?, k)?;
    Ok(knn_from_neighbors(&nb, labels, k))
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `2·I(Y;C) / (H(Y) + H(C))` with natural logarithms; 0 when both
/// partitions are trivial.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::InvalidArgument("NMI of an empty assignment".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::shape("nmi", truth.len(), pred.len()));
    }
    let n = pred.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut pc: BTreeMap<usize, usize> = BTreeMap::new();
    let mut tc: BTreeMap<usize, usize> = BTreeMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *joint.entry((p, t)).or_default() += 1;
        *pc.entry(p).or_default() += 1;
        *tc.entry(t).or_default() += 1;
    }
    let h_pred = entropy(pc.values().copied(), n);
    let h_truth = entropy(tc.values().copied(), n);
    let mut mi = 0.0;
    for (&(p, t), &c) in &joint {
        let pxy = c as f64 / n;
        mi += pxy * (pxy * n * n / (pc[&p] as f64 * tc[&t] as f64)).ln();
    }
    let denom = h_pred + h_truth;
    if denom <= 0.0 {
        return Ok(0.0);
    }
    Ok((2.0 * mi / denom).clamp(0.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::shape("spearman", a.len(), b.len()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        va += (x - mean) * (x - mean);
        vb += (y - mean) * (y - mean);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(num / (va.sqrt() * vb.sqrt()))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]).then(i.cmp(&j)));
    let mut out = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            out[i] = avg;
        }
        start = end;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Recall@k keyed by k.
    pub recall: BTreeMap<usize, f64>,
    pub nmi: f64,
    pub knn_accuracy: f64,
    pub clusters: usize,
    pub kmeans_seed: u64,
}

impl MetricsReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }
}

pub const DEFAULT_RECALL_KS: [usize; 4] = [1, 2, 4, 8];
pub const KNN_K: usize = 3;
const KMEANS_MAX_ITER: usize = 100;

/// Full metric suite. `cluster_k` defaults to the number of distinct labels.
pub fn evaluate(
    src: &DistanceSource,
    labels: &[usize],
    ks: &[usize],
    cluster_k: Option<usize>,
    seed: u64,
) -> Result<MetricsReport> {
    check_labels(src.len(), labels)?;
    let kmax = ks.iter().copied().chain([KNN_K]).max().unwrap_or(KNN_K);
    if ks.contains(&0) {
        return Err(Error::InvalidArgument("Recall@0 is undefined".into()));
    }
    let neighbors = ranked_neighbors(&src.pairwise()?, kmax)?;
    let recall = ks
        .iter()
        .map(|&k| (k, recall_from_neighbors(&neighbors, labels, k)))
        .collect();
    let knn = knn_from_neighbors(&neighbors, labels, KNN_K);
    let distinct: HashMap<usize, ()> = labels.iter().map(|&l| (l, ())).collect();
    let clusters = cluster_k.unwrap_or(distinct.len());
    let km = kmeans(&src.points()?, clusters, seed, KMEANS_MAX_ITER)?;
    Ok(MetricsReport {
        recall,
        nmi: nmi(&km.assignments, labels)?,
        knn_accuracy: knn,
        clusters,
        kmeans_seed: seed,
    })
}
