use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wedl_core::featstore::{
    load_features, sample_batch, save_features, synth_gaussians, zsl_split, FeatureDataset, FeatureRecord,
    FileFormat, SynthSpec, Warp,
};
use wedl_core::numcore::sq_dist;

fn dataset_strategy() -> impl Strategy<Value = FeatureDataset> {
    (1usize..6, 1usize..20).prop_flat_map(|(dim, n)| {
        prop::collection::vec(
            (prop::collection::vec(-1e6f64..1e6, dim), 0usize..5),
            n,
        )
        .prop_map(|rows| {
            let records = rows.into_iter().map(|(features, label)| FeatureRecord { features, label }).collect();
            FeatureDataset::new(records).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binary_round_trip_is_exact(ds in dataset_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        save_features(&ds, &path, FileFormat::Bin).unwrap();
        prop_assert_eq!(load_features(&path, FileFormat::Bin).unwrap(), ds);
    }

    #[test]
    fn csv_round_trip_within_tolerance(ds in dataset_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        save_features(&ds, &path, FileFormat::Csv).unwrap();
        let back = load_features(&path, FileFormat::Csv).unwrap();
        prop_assert_eq!(back.labels(), ds.labels());
        for (a, b) in back.records().iter().zip(ds.records()) {
            for (x, y) in a.features.iter().zip(&b.features) {
                prop_assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn split_is_disjoint_and_complete(classes in 2usize..30, per in 1usize..4) {
        let records = (0..classes * per)
            .map(|i| FeatureRecord { features: vec![i as f64], label: i % classes })
            .collect();
        let ds = FeatureDataset::new(records).unwrap();
        let split = zsl_split(&ds).unwrap();
        prop_assert_eq!(split.train.class_count(), classes.div_ceil(2));
        prop_assert_eq!(split.train.class_count() + split.test.class_count(), classes);
        // features carry the original index, so original labels are recoverable
        let original = |d: &FeatureDataset| -> BTreeSet<usize> {
            d.records().iter().map(|r| r.features[0] as usize % classes).collect()
        };
        prop_assert!(original(&split.train).is_disjoint(&original(&split.test)));
        prop_assert_eq!(split.train.len() + split.test.len(), ds.len());
    }

    #[test]
    fn batch_histogram_is_exact(p in 2usize..6, k in 2usize..5, seed in any::<u64>()) {
        let records = (0..60)
            .map(|i| FeatureRecord { features: vec![i as f64], label: i % 6 })
            .collect();
        let ds = FeatureDataset::new(records).unwrap();
        let batch = sample_batch(&ds, p, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
        for l in &batch.labels {
            *hist.entry(*l).or_default() += 1;
        }
        prop_assert_eq!(hist.len(), p);
        prop_assert!(hist.values().all(|&c| c == k));
    }
}

/// Leave-one-out 1-NN accuracy of `test` against `reference` by brute force.
fn one_nn_accuracy(reference: &[FeatureRecord], test: &[FeatureRecord]) -> f64 {
    let hits = test
        .iter()
        .filter(|q| {
            let nearest = reference
                .iter()
                .min_by(|a, b| sq_dist(&a.features, &q.features).total_cmp(&sq_dist(&b.features, &q.features)))
                .unwrap();
            nearest.label == q.label
        })
        .count();
    hits as f64 / test.len() as f64
}

fn halves(ds: &FeatureDataset) -> (Vec<FeatureRecord>, Vec<FeatureRecord>) {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (i, r) in ds.records().iter().enumerate() {
        if i % 2 == 0 { a.push(r.clone()) } else { b.push(r.clone()) }
    }
    (a, b)
}

#[test]
fn far_apart_classes_are_perfectly_separable() {
    let spec = SynthSpec { classes: 2, per_class: 50, dim: 8, sep: 100.0, warp: Warp::None };
    let ds = synth_gaussians(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let (fit, held) = halves(&ds);
    assert_eq!(one_nn_accuracy(&fit, &held), 1.0);
}

#[test]
fn coincident_means_give_chance_accuracy() {
    // Monte-Carlo average over seeds; chance level is 1/classes
    let classes = 5;
    let mut total = 0.0;
    let runs = 40;
    for seed in 0..runs {
        let spec = SynthSpec { classes, per_class: 20, dim: 4, sep: 0.0, warp: Warp::None };
        let ds = synth_gaussians(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (fit, held) = halves(&ds);
        total += one_nn_accuracy(&fit, &held);
    }
    let mean = total / runs as f64;
    assert!((mean - 1.0 / classes as f64).abs() < 0.03, "mean 1-NN accuracy {mean}");
}

#[test]
fn warped_data_is_deterministic_and_finite() {
    let spec = SynthSpec { classes: 4, per_class: 5, dim: 6, sep: 3.0, warp: Warp::TanhMix };
    let a = synth_gaussians(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = synth_gaussians(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
    assert!(a.records().iter().all(|r| r.features.iter().all(|v| v.is_finite())));
}
