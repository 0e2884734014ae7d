use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wedl_core::ensemble::{
    ensemble_distance, train, Coefficients, DistanceForm, EmaState, EnsembleConfig, EnsembleMode, EnsembleModel,
    TrainConfig,
};
use wedl_core::featstore::{synth_gaussians, FeatureDataset, SynthSpec, Warp};
use wedl_core::numcore::l2_normalize;

fn ten_classes() -> FeatureDataset {
    let spec = SynthSpec { classes: 10, per_class: 30, dim: 12, sep: 3.0, warp: Warp::TanhMix };
    synth_gaussians(&spec, &mut ChaCha8Rng::seed_from_u64(10)).unwrap()
}

fn model(mode: EnsembleMode, seed: u64) -> EnsembleModel {
    let config = EnsembleConfig { embed_dim: 8, ..EnsembleConfig::default() };
    EnsembleModel::new(mode, config, 12, 10, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn total_loss_falls_over_twenty_epochs() {
    let ds = ten_classes();
    for mode in ["WEL-equal", "WEL", "WEDL", "baseline:binomial", "baseline:classification"] {
        let mut m = model(mode.parse().unwrap(), 1);
        let cfg = TrainConfig { epochs: 20, ..TrainConfig::default() };
        let log = train(&mut m, &ds, &cfg, &mut ChaCha8Rng::seed_from_u64(2), |_, _| Ok(())).unwrap();
        let first = log.epochs.first().unwrap().total;
        let last = log.epochs.last().unwrap().total;
        assert!(last < first, "{mode}: {first} -> {last}");
        assert!(log.epochs.windows(2).all(|w| w[1].epoch == w[0].epoch + 1));
    }
}

#[test]
fn same_seed_gives_identical_logs() {
    let ds = ten_classes();
    let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
    let run = || {
        let mut m = model(EnsembleMode::Wedl, 4);
        let log = train(&mut m, &ds, &cfg, &mut ChaCha8Rng::seed_from_u64(5), |_, _| Ok(())).unwrap();
        (m, log)
    };
    let (m1, l1) = run();
    let (m2, l2) = run();
    assert_eq!(l1, l2);
    assert_eq!(m1, m2);
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let ds = ten_classes();
    let mut m = model(EnsembleMode::Wel, 6);
    let before = m.clone();
    let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
    let log = train(&mut m, &ds, &cfg, &mut ChaCha8Rng::seed_from_u64(7), |_, _| Ok(())).unwrap();
    assert!(log.epochs.is_empty());
    assert_eq!(m, before);
}

#[test]
fn wedl_objective_hand_value() {
    // w = (0.5, 0.5), l̂ = (6, 3), penalty 0, λ = 0.01, l_div = 2
    let coeffs = Coefficients::from_values(&[0.25f64.sqrt(), 0.25f64.sqrt()], 0.25, 100.0);
    let terms = coeffs.effective_weights(&[6.0, 3.0]).unwrap();
    assert_eq!(terms.weights, vec![0.5, 0.5]);
    assert_eq!(terms.penalty, 0.0);
    let combined: f64 = terms.weights.iter().zip([6.0, 3.0]).map(|(w, l)| w * l).sum();
    assert!((combined + terms.penalty + 0.01 * 2.0 - 4.52).abs() < 1e-12);
}

#[test]
fn rescaling_is_invariant_to_a_common_factor() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let stream: Vec<Vec<f64>> = (0..50).map(|_| (0..3).map(|_| rng.gen_range(0.1..5.0)).collect()).collect();
    let mut a = EmaState::init(&stream[0], 2.0);
    let scaled = |v: &[f64]| v.iter().map(|x| x * 7.5).collect::<Vec<_>>();
    let mut b = EmaState::init(&scaled(&stream[0]), 2.0);
    for raw in &stream[1..] {
        a.update(raw).unwrap();
        b.update(&scaled(raw)).unwrap();
    }
    let last = stream.last().unwrap();
    let na = a.normalize(last).unwrap();
    let nb = b.normalize(&scaled(last)).unwrap();
    for j in 1..3 {
        assert!((na[j] / na[0] - nb[j] / nb[0]).abs() < 1e-12);
    }
}

#[test]
fn ensemble_distance_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut unit = |e: usize| l2_normalize(&(0..e).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()).0;
    for _ in 0..50 {
        let x: Vec<Vec<f64>> = (0..3).map(|_| unit(5)).collect();
        let y: Vec<Vec<f64>> = (0..3).map(|_| unit(5)).collect();
        let xs: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
        let ys: Vec<&[f64]> = y.iter().map(Vec::as_slice).collect();
        let w = [0.2, 0.3, 0.5];
        let d = ensemble_distance(&xs, &ys, &w, DistanceForm::Corrected).unwrap();
        let back = ensemble_distance(&ys, &xs, &w, DistanceForm::Corrected).unwrap();
        assert!(d > 0.0);
        assert_eq!(d, back);
        assert!(ensemble_distance(&xs, &xs, &w, DistanceForm::Corrected).unwrap().abs() < 1e-15);
    }
}
