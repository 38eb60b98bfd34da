mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::random_matrix;
use prt::clustering::{kmeans_fit, KMeansConfig};
use prt::crc::{CrcConfig, FeatureDictionary};
use prt::metrics::{fuse_predict, ProbabilityVector};
use prt::nn::{Activation, Gradients, Group, LayerSpec, NetworkState, TrainConfig};
use prt::Matrix;

fn prob(raw: Vec<f64>) -> ProbabilityVector {
    let total: f64 = raw.iter().sum();
    ProbabilityVector::new(raw.into_iter().map(|v| v / total).collect()).unwrap()
}

fn weights() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, 2..6)
}

proptest! {
    #[test]
    fn fusion_is_symmetric(a in weights(), b in weights()) {
        let n = a.len().min(b.len());
        let (rho, q) = (prob(a[..n].to_vec()), prob(b[..n].to_vec()));
        let (l1, f1) = fuse_predict(&rho, &q).unwrap();
        let (l2, f2) = fuse_predict(&q, &rho).unwrap();
        prop_assert_eq!(l1, l2);
        prop_assert_eq!(&f1, &f2);
        prop_assert!((f1.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shared_argmax_wins_fusion(a in weights(), b in weights(), pick in 0usize..6) {
        let n = a.len().min(b.len());
        let i = pick % n;
        let (mut a, mut b) = (a[..n].to_vec(), b[..n].to_vec());
        a[i] = 5.0;
        b[i] = 5.0;
        let (label, _) = fuse_predict(&prob(a), &prob(b)).unwrap();
        prop_assert_eq!(label, i);
    }

    #[test]
    fn q_ignores_order_within_a_class(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, p) = (rng.random_range(4..20usize), rng.random_range(2..8usize));
        let x = random_matrix(&mut rng, n, p);
        let labels: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
        let y: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        // reverse each class block
        let mut order: Vec<usize> = (0..n / 2).rev().collect();
        order.extend((n / 2..n).rev());
        let shuffled = x.select_rows(&order);
        let cfg = CrcConfig::default();
        let q = |m: &Matrix| {
            FeatureDictionary::from_features(m, &labels, 2).unwrap().coder(&cfg).unwrap().classify(&y).unwrap()
        };
        for (a, b) in q(&x).iter().zip(q(&shuffled)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicated_class_keeps_q_valid(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, 10, 4);
        let labels = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let mut rows: Vec<Vec<f64>> = x.row_iter().map(<[f64]>::to_vec).collect();
        rows.splice(5..5, rows[..5].to_vec());
        let mut dup_labels = vec![0; 10];
        dup_labels.extend([1; 5]);
        let dict = FeatureDictionary::from_features(&Matrix::from_rows(&rows).unwrap(), &dup_labels, 2).unwrap();
        let base = FeatureDictionary::from_features(&x, &labels, 2).unwrap();
        prop_assert_eq!(&dict.atoms().as_slice()[40..], &base.atoms().as_slice()[20..]);
        let q = dict.coder(&CrcConfig::default()).unwrap().classify(&[0.3, -0.2, 0.5, 0.1]).unwrap();
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(q.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn inertia_never_increases(seed in 0u64..500, k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, 60, 3);
        let fit = kmeans_fit(&x, &KMeansConfig { k, seed, ..KMeansConfig::default() }).unwrap();
        for w in fit.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn frozen_group_is_bit_identical(seed in 0u64..500, steps in 1usize..8, frozen_rep in any::<bool>()) {
        let specs = [
            LayerSpec::new(3, 5, Activation::Relu, Group::Representation),
            LayerSpec::new(5, 4, Activation::Relu, Group::Classification),
            LayerSpec::new(4, 3, Activation::Identity, Group::Classification),
        ];
        let frozen = if frozen_rep { Group::Representation } else { Group::Classification };
        let cfg = TrainConfig {
            frozen_groups: [frozen].into_iter().collect(),
            base_lr: 0.05,
            ..TrainConfig::default()
        };
        let start = NetworkState::init(&specs, seed).unwrap();
        let mut net = start.clone();
        let mut velocity = Gradients::zeros_like(&net);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..steps {
            let x = random_matrix(&mut rng, 6, 3);
            let y: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
            let (_, g) = net.loss_and_grad(&x, &y).unwrap();
            net.sgd_update(&g, &mut velocity, &cfg).unwrap();
        }
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        prop_assert_eq!(bits(net.group_parameters(frozen)), bits(start.group_parameters(frozen)));
    }

    #[test]
    fn forward_rows_are_distributions(seed in 0u64..500) {
        let specs = [
            LayerSpec::new(4, 6, Activation::Relu, Group::Representation),
            LayerSpec::new(6, 3, Activation::Identity, Group::Classification),
        ];
        let net = NetworkState::init(&specs, seed).unwrap();
        let x = random_matrix(&mut ChaCha8Rng::seed_from_u64(seed), 10, 4);
        let p = net.forward(&x).unwrap();
        for row in p.row_iter() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
