//! Oracles shared by the integration targets.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prt::crc::{CrcConfig, FeatureDictionary};
use prt::metrics::{compute_metrics, ConfusionCounts};
use prt::nn::{Activation, Group, LayerSpec, NetworkState};
use prt::Matrix;

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Network with 2 or 3 layers and random widths. Hidden layers are ReLU,
/// the first always in the representation group. Biases are random so no
/// pre-activation sits exactly on the ReLU kink (a zero bias behind a fully
/// dead layer does).
pub fn random_network(rng: &mut ChaCha8Rng, seed: u64) -> NetworkState {
    let depth = rng.random_range(2..=3usize);
    let input = rng.random_range(2..6usize);
    let labels = rng.random_range(2..5usize);
    let mut specs = Vec::new();
    let mut width = input;
    for layer in 0..depth {
        let last = layer + 1 == depth;
        let out = if last {
            labels
        } else {
            rng.random_range(2..7usize)
        };
        let group = if layer == 0 {
            Group::Representation
        } else {
            Group::Classification
        };
        let act = if last {
            Activation::Identity
        } else {
            Activation::Relu
        };
        specs.push(LayerSpec::new(width, out, act, group));
        width = out;
    }
    let mut net = NetworkState::init(&specs, seed).unwrap();
    for layer in net.layers_mut() {
        for b in layer.bias_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    net
}

fn perturbed_loss(net: &NetworkState, index: usize, delta: f64, x: &Matrix, y: &[usize]) -> f64 {
    let mut net = net.clone();
    let mut offset = index;
    for layer in net.layers_mut() {
        let w = layer.weights().as_slice().len();
        if offset < w {
            layer.weights_mut().as_mut_slice()[offset] += delta;
            return net.loss(x, y).unwrap();
        }
        offset -= w;
        let b = layer.bias().len();
        if offset < b {
            layer.bias_mut()[offset] += delta;
            return net.loss(x, y).unwrap();
        }
        offset -= b;
    }
    unreachable!("parameter index out of range")
}

/// Worst relative error between analytic and central-difference gradients
/// over `instances` seeded (network, batch) pairs.
pub fn gradient_check(instances: u64) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let net = random_network(&mut rng, seed);
        let n = rng.random_range(1..=16usize);
        let x = random_matrix(&mut rng, n, net.input_dim());
        let y: Vec<usize> = (0..n)
            .map(|_| rng.random_range(0..net.label_count()))
            .collect();
        let (_, grads) = net.loss_and_grad(&x, &y).unwrap();
        let analytic = grads.flat();
        let numeric: Vec<f64> = (0..analytic.len())
            .map(|i| {
                (perturbed_loss(&net, i, h, &x, &y) - perturbed_loss(&net, i, -h, &x, &y))
                    / (2.0 * h)
            })
            .collect();
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
            + numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(if scale > 0.0 { diff / scale } else { diff });
    }
    worst
}

/// Random dictionary, labels and test vector for the CRC oracle.
pub struct CrcInstance {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub y: Vec<f64>,
}

pub fn crc_instance(seed: u64) -> CrcInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.random_range(2..=16usize);
    let classes = rng.random_range(2..=4usize);
    let n = rng.random_range(classes..=50usize);
    let mut labels: Vec<usize> = (0..n)
        .map(|i| {
            if i < classes {
                i
            } else {
                rng.random_range(0..classes)
            }
        })
        .collect();
    labels.sort_unstable();
    CrcInstance {
        features: random_matrix(&mut rng, n, p),
        labels,
        classes,
        y: (0..p).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

/// α from `(DᵀD + λI)⁻¹ Dᵀŷ` by explicit inversion, with D built here from
/// the raw rows.
pub fn oracle_alpha(inst: &CrcInstance, lambda: f64) -> Vec<f64> {
    let n = inst.features.rows();
    let p = inst.features.cols();
    let d = DMatrix::from_fn(p, n, |i, j| {
        let row = inst.features.row(j);
        row[i] / row.iter().map(|v| v * v).sum::<f64>().sqrt()
    });
    let ynorm = inst.y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let y = DVector::from_iterator(p, inst.y.iter().map(|v| v / ynorm));
    let system = d.transpose() * &d + DMatrix::identity(n, n) * lambda;
    let inverse = system.try_inverse().expect("ridge system is invertible");
    (inverse * d.transpose() * y).iter().copied().collect()
}

/// q recomputed by masking α outside each class and normalising
/// inverse-squared residuals.
pub fn oracle_q(inst: &CrcInstance, alpha: &[f64], eps: f64) -> Vec<f64> {
    let p = inst.features.cols();
    let ynorm = inst.y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut weights = Vec::new();
    for c in 0..inst.classes {
        let mut recon = vec![0.0; p];
        for (j, row) in inst.features.row_iter().enumerate() {
            if inst.labels[j] != c {
                continue;
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for k in 0..p {
                recon[k] += alpha[j] * row[k] / norm;
            }
        }
        let r = (0..p)
            .map(|k| (inst.y[k] / ynorm - recon[k]).powi(2))
            .sum::<f64>()
            .sqrt();
        weights.push(1.0 / ((r + eps) * (r + eps)));
    }
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

/// (max |α − α_oracle|, max |Σq − 1|, max |q − q_oracle|) over `count`
/// instances.
pub fn crc_check(count: u64) -> (f64, f64, f64) {
    let cfg = CrcConfig::default();
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..count {
        let inst = crc_instance(seed);
        let dict =
            FeatureDictionary::from_features(&inst.features, &inst.labels, inst.classes).unwrap();
        let coder = dict.coder(&cfg).unwrap();
        let alpha = coder.code(&inst.y).unwrap();
        let expected = oracle_alpha(&inst, cfg.lambda);
        let err = alpha
            .iter()
            .zip(&expected)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let q = coder.probability(&alpha, &inst.y).unwrap();
        let sum_err = (q.iter().sum::<f64>() - 1.0).abs();
        let q_err = q
            .iter()
            .zip(oracle_q(&inst, &alpha, cfg.epsilon))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = (worst.0.max(err), worst.1.max(sum_err), worst.2.max(q_err));
    }
    worst
}

/// Metric formulas written out from the definitions.
pub fn oracle_metrics(tp: f64, tn: f64, fp: f64, fn_: f64) -> [f64; 4] {
    let safe = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
    let sen = 100.0 * safe(tp, tp + fn_);
    let spe = 100.0 * safe(tn, tn + fp);
    let f1 = safe(2.0 * tp, 2.0 * tp + fp + fn_);
    let acc = 100.0 * safe(tp + tn, tp + tn + fp + fn_);
    [sen, spe, f1, acc]
}

/// Worst absolute deviation from the formula oracle over `count` tuples.
pub fn metric_check(count: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let c = ConfusionCounts {
            tp: rng.random_range(0..200),
            tn: rng.random_range(0..200),
            fp: rng.random_range(0..200),
            fn_: rng.random_range(0..200),
        };
        if c.total() == 0 {
            continue;
        }
        let m = compute_metrics(&c).unwrap();
        let o = oracle_metrics(c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
        for (got, want) in [m.sen, m.spe, m.f1, m.acc].iter().zip(o) {
            worst = worst.max((got - want).abs());
        }
    }
    worst
}

/// Small grid that runs every stage in well under a second.
pub const SMALL_CONFIG: &str = "\
# reduced grid
ratios = 10, 100
folds = 3
synth.samples_per_class = 40
synth.unlabeled = 200
synth.positives = 30
synth.negatives = 30
model.representation = 16, 8
source.epochs = 5
prt.epochs = 2
tl.epochs = 2
";
