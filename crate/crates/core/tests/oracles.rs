//! Independent re-derivations checked against the library: finite
//! differences, explicit matrix inversion, metric formulas and brute-force
//! tallies.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use prt::clustering::{kmeans_fit, KMeansConfig};
use prt::crc::{CrcConfig, FeatureDictionary};
use prt::metrics::{
    compute_metrics, confusion_counts, fuse_predict, mean_std, ConfusionCounts, ProbabilityVector,
};
use prt::nn::{Activation, Group, LayerSpec, NetworkState};
use prt::Matrix;

fn specs_with_rep(input: usize, labels: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(input, input, Activation::Identity, Group::Representation),
        LayerSpec::new(input, labels, Activation::Identity, Group::Classification),
    ]
}

#[test]
fn gradients_match_central_differences() {
    let worst = gradient_check(20);
    assert!(worst < 1e-4, "relative error {worst:e}");
}

#[test]
fn two_layer_softmax_example() {
    // identity weights on [1, 0] give logits [1, 0]
    let specs = specs_with_rep(2, 2);
    let mut net = NetworkState::zeros(&specs).unwrap();
    for layer in net.layers_mut() {
        *layer.weights_mut() = Matrix::identity(2);
    }
    let p = net
        .forward(&Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap())
        .unwrap();
    let e = std::f64::consts::E;
    assert!((p[(0, 0)] - e / (e + 1.0)).abs() < 1e-12);
    assert!((p[(0, 1)] - 1.0 / (e + 1.0)).abs() < 1e-12);
}

#[test]
fn crc_matches_explicit_inverse() {
    let (alpha, sum, q) = crc_check(100);
    assert!(alpha < 1e-8, "alpha error {alpha:e}");
    assert!(sum < 1e-9, "sum error {sum:e}");
    assert!(q < 1e-9, "q error {q:e}");
}

#[test]
fn crc_small_examples() {
    let cfg = CrcConfig::default();
    // 8×5 dictionary from the worked example shape
    let inst = CrcInstance {
        features: random_matrix(&mut ChaCha8Rng::seed_from_u64(8), 5, 8),
        labels: vec![0, 0, 1, 1, 1],
        classes: 2,
        y: (0..8).map(|i| (i as f64 - 3.5) / 4.0).collect(),
    };
    let dict = FeatureDictionary::from_features(&inst.features, &inst.labels, 2).unwrap();
    let alpha = dict.coder(&cfg).unwrap().code(&inst.y).unwrap();
    for (a, b) in alpha.iter().zip(oracle_alpha(&inst, 1e-3)) {
        assert!((a - b).abs() < 1e-8);
    }

    let u = Matrix::from_rows(&[vec![0.6, 0.8]]).unwrap();
    let single = FeatureDictionary::from_features(&u, &[0], 1).unwrap();
    let tiny = CrcConfig {
        lambda: 1e-10,
        ..cfg
    };
    let a = single.coder(&tiny).unwrap().code(&[0.6, 0.8]).unwrap();
    assert!((a[0] - 1.0).abs() < 1e-6);

    let heavy = CrcConfig { lambda: 1e6, ..cfg };
    let a = dict.coder(&heavy).unwrap().code(&inst.y).unwrap();
    assert!(a.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-3);
}

#[test]
fn metrics_match_formula_oracle() {
    let worst = metric_check(200);
    assert!(worst < 1e-12, "{worst:e}");
}

#[test]
fn worked_metric_examples() {
    let m = compute_metrics(&ConfusionCounts {
        tp: 62,
        tn: 81,
        fp: 19,
        fn_: 38,
    })
    .unwrap();
    assert!((m.sen - 62.0).abs() < 1e-12);
    assert!((m.spe - 81.0).abs() < 1e-12);
    let perfect = compute_metrics(&ConfusionCounts {
        tp: 3,
        tn: 2,
        fp: 0,
        fn_: 0,
    })
    .unwrap();
    assert_eq!(
        (perfect.sen, perfect.spe, perfect.f1, perfect.acc),
        (100.0, 100.0, 1.0, 100.0)
    );
    let (mean, std) = mean_std(&[60.0, 70.0, 80.0]).unwrap();
    assert!((mean - 70.0).abs() < 1e-12 && (std - 10.0).abs() < 1e-12);
}

#[test]
fn confusion_tally_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20 {
        let truth: Vec<usize> = (0..100).map(|_| rng.random_range(0..2)).collect();
        let pred: Vec<usize> = (0..100).map(|_| rng.random_range(0..2)).collect();
        let c = confusion_counts(&pred, &truth, 1).unwrap();
        let mut expected = [0usize; 4];
        for i in 0..100 {
            let slot = match (pred[i], truth[i]) {
                (1, 1) => 0,
                (0, 0) => 1,
                (1, 0) => 2,
                _ => 3,
            };
            expected[slot] += 1;
        }
        assert_eq!([c.tp, c.tn, c.fp, c.fn_], expected);
    }
}

#[test]
fn fusion_examples() {
    let pv = |v: Vec<f64>| ProbabilityVector::new(v).unwrap();
    let (label, fused) = fuse_predict(&pv(vec![0.7, 0.3]), &pv(vec![0.2, 0.8])).unwrap();
    assert_eq!(label, 1);
    assert!((fused.values()[0] - 0.45).abs() < 1e-12);
    let (label, _) = fuse_predict(&pv(vec![0.5, 0.5]), &pv(vec![0.5, 0.5])).unwrap();
    assert_eq!(label, 0);
}

#[test]
fn kmeans_labels_agree_with_assign() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, 120, 3);
        let fit = kmeans_fit(
            &x,
            &KMeansConfig {
                k: 4,
                seed,
                ..KMeansConfig::default()
            },
        )
        .unwrap();
        assert_eq!(fit.model.assign(&x).unwrap(), fit.labels);
        // brute-force inertia under the final centroids
        let c = fit.model.centroids();
        let inertia: f64 = x
            .row_iter()
            .zip(&fit.labels)
            .map(|(row, &l)| {
                row.iter()
                    .zip(c.row(l))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            })
            .sum();
        assert!((inertia - fit.model.inertia()).abs() <= 1e-9 * inertia.max(1.0));
    }
}
