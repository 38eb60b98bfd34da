//! Datasets, the synthetic two-domain generator, sequential fold splitting
//! and positive-class subsampling.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{PrtError, Result};
use crate::linalg::{norm2, squared_distance, Matrix};

/// Feature rows with integer class labels in `[0, class_count)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    features: Matrix,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledSet {
    pub fn new(features: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.rows() == 0 {
            return Err(PrtError::invalid("labeled set has no samples"));
        }
        if labels.len() != features.rows() {
            return Err(PrtError::shape(format!(
                "{} labels for {} samples",
                labels.len(),
                features.rows()
            )));
        }
        if class_count == 0 {
            return Err(PrtError::invalid("class_count must be positive"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(PrtError::invalid(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        if !features.all_finite() {
            return Err(PrtError::invalid("features contain NaN or Inf"));
        }
        Ok(LabeledSet {
            features,
            labels,
            class_count,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Sample count of every class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledSet> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(PrtError::invalid(format!(
                "index {bad} outside a set of {} samples",
                self.len()
            )));
        }
        LabeledSet::new(
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.class_count,
        )
    }
}

/// Feature rows without labels.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    features: Matrix,
}

impl UnlabeledSet {
    pub fn new(features: Matrix) -> Result<Self> {
        if features.rows() == 0 {
            return Err(PrtError::invalid("unlabeled set has no samples"));
        }
        if !features.all_finite() {
            return Err(PrtError::invalid("features contain NaN or Inf"));
        }
        Ok(UnlabeledSet { features })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// Parameters of the synthetic source / target domains.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub source_class_count: usize,
    pub dim: usize,
    pub samples_per_source_class: usize,
    pub unlabeled_count: usize,
    pub target_positives: usize,
    pub target_negatives: usize,
    /// Standard deviation of the source class means around the origin.
    pub mean_spread: f64,
    /// Distance each target class mean is moved from its source mean.
    pub domain_shift: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            source_class_count: 10,
            dim: 16,
            samples_per_source_class: 200,
            unlabeled_count: 2000,
            target_positives: 349,
            target_negatives: 349,
            mean_spread: 1.0,
            domain_shift: 3.0,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.source_class_count < 2 {
            return Err(PrtError::invalid("source_class_count must be at least 2"));
        }
        if self.dim == 0 || self.samples_per_source_class == 0 || self.unlabeled_count == 0 {
            return Err(PrtError::invalid(
                "dim, samples_per_source_class and unlabeled_count must be positive",
            ));
        }
        if self.target_positives == 0 || self.target_negatives == 0 {
            return Err(PrtError::invalid("both target classes need samples"));
        }
        if !(self.noise_std > 0.0) || !self.noise_std.is_finite() {
            return Err(PrtError::invalid("noise_std must be positive and finite"));
        }
        if !(self.mean_spread >= 0.0) || !self.mean_spread.is_finite() {
            return Err(PrtError::invalid(
                "mean_spread must be non-negative and finite",
            ));
        }
        if !(self.domain_shift >= 0.0) || !self.domain_shift.is_finite() {
            return Err(PrtError::invalid(
                "domain_shift must be non-negative and finite",
            ));
        }
        Ok(())
    }
}

/// Output of [`generate_domains`]. Target label 0 is negative, 1 positive.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDomains {
    pub source: LabeledSet,
    pub unlabeled: UnlabeledSet,
    pub target: LabeledSet,
    /// `[source_class_count × dim]`
    pub source_means: Matrix,
    /// `[2 × dim]`, row `c` is the mean of target class `c`.
    pub target_means: Matrix,
    /// Source class each target class is derived from.
    pub anchors: [usize; 2],
}

/// The two closest source means, lowest indices first on ties. Anchoring the
/// target there keeps it harder than the average source pair.
pub fn closest_pair(means: &Matrix) -> [usize; 2] {
    let mut best = ([0, 1], f64::INFINITY);
    for a in 0..means.rows() {
        for b in a + 1..means.rows() {
            let d = squared_distance(means.row(a), means.row(b));
            if d < best.1 {
                best = ([a, b], d);
            }
        }
    }
    best.0
}

/// Draws the source set, the unlabeled target pool and the labeled target set.
///
/// Source classes are isotropic Gaussians around random means. The target
/// classes are anchored on the closest pair of source means, each moved by
/// `domain_shift` along its own random unit direction. The unlabeled pool alternates draws
/// from the two target classes and keeps no labels. All sets are stored
/// grouped by class.
pub fn generate_domains(cfg: &SynthConfig) -> Result<SyntheticDomains> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let spread = Normal::new(0.0, cfg.mean_spread).map_err(|e| PrtError::invalid(e.to_string()))?;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| PrtError::invalid(e.to_string()))?;

    let mut source_means = Matrix::zeros(cfg.source_class_count, d);
    for v in source_means.as_mut_slice() {
        *v = spread.sample(&mut rng);
    }

    let anchors = closest_pair(&source_means);
    let mut target_means = Matrix::zeros(2, d);
    for (c, &anchor) in anchors.iter().enumerate() {
        let direction = random_unit(d, &mut rng);
        for j in 0..d {
            target_means[(c, j)] = source_means[(anchor, j)] + cfg.domain_shift * direction[j];
        }
    }

    let draw = |mean: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        mean.iter().map(|&m| m + noise.sample(rng)).collect()
    };

    let mut rows = Vec::with_capacity(cfg.source_class_count * cfg.samples_per_source_class);
    let mut labels = Vec::with_capacity(rows.capacity());
    for k in 0..cfg.source_class_count {
        for _ in 0..cfg.samples_per_source_class {
            rows.push(draw(source_means.row(k), &mut rng));
            labels.push(k);
        }
    }
    let source = LabeledSet::new(Matrix::from_rows(&rows)?, labels, cfg.source_class_count)?;

    let mut rows = Vec::with_capacity(cfg.target_negatives + cfg.target_positives);
    let mut labels = Vec::with_capacity(rows.capacity());
    for (class, count) in [(0, cfg.target_negatives), (1, cfg.target_positives)] {
        for _ in 0..count {
            rows.push(draw(target_means.row(class), &mut rng));
            labels.push(class);
        }
    }
    let target = LabeledSet::new(Matrix::from_rows(&rows)?, labels, 2)?;

    let rows: Vec<Vec<f64>> = (0..cfg.unlabeled_count)
        .map(|i| draw(target_means.row(i % 2), &mut rng))
        .collect();
    let unlabeled = UnlabeledSet::new(Matrix::from_rows(&rows)?)?;

    Ok(SyntheticDomains {
        source,
        unlabeled,
        target,
        source_means,
        target_means,
        anchors,
    })
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm2(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Train/test indices of one fold, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub fold_count: usize,
    pub folds: Vec<Fold>,
}

/// Sizes of `fold_count` contiguous blocks covering `n` items; the remainder
/// goes to the earliest blocks.
pub fn block_sizes(n: usize, fold_count: usize) -> Vec<usize> {
    let base = n / fold_count;
    let rem = n % fold_count;
    (0..fold_count)
        .map(|k| base + usize::from(k < rem))
        .collect()
}

/// Sequential per-class split: each class, in stored order, is cut into
/// `fold_count` contiguous blocks and fold `k` tests on block `k` of every
/// class.
pub fn make_folds(set: &LabeledSet, fold_count: usize) -> Result<FoldPlan> {
    if fold_count < 2 {
        return Err(PrtError::invalid("fold_count must be at least 2"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); set.class_count()];
    for (i, &y) in set.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < fold_count {
            return Err(PrtError::invalid(format!(
                "class {class} has {} samples, fewer than {fold_count} folds",
                members.len()
            )));
        }
    }
    let mut test_sets: Vec<Vec<usize>> = vec![Vec::new(); fold_count];
    for members in &by_class {
        let mut start = 0;
        for (k, size) in block_sizes(members.len(), fold_count)
            .into_iter()
            .enumerate()
        {
            test_sets[k].extend_from_slice(&members[start..start + size]);
            start += size;
        }
    }
    let folds = test_sets
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let mut in_test = vec![false; set.len()];
            for &i in &test {
                in_test[i] = true;
            }
            let train = (0..set.len()).filter(|&i| !in_test[i]).collect();
            Fold { train, test }
        })
        .collect();
    Ok(FoldPlan { fold_count, folds })
}

/// Percentage of positive training samples retained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeepPercent(u32);

impl KeepPercent {
    pub const ALLOWED: [u32; 5] = [10, 25, 50, 75, 100];

    pub fn new(percent: u32) -> Result<Self> {
        if Self::ALLOWED.contains(&percent) {
            Ok(KeepPercent(percent))
        } else {
            Err(PrtError::invalid(format!(
                "keep percent {percent} is not one of {:?}",
                Self::ALLOWED
            )))
        }
    }

    pub fn all() -> Vec<KeepPercent> {
        Self::ALLOWED.iter().map(|&p| KeepPercent(p)).collect()
    }

    pub fn get(self) -> u32 {
        self.0
    }

    /// `ceil(n · percent / 100)`.
    pub fn kept(self, n: usize) -> usize {
        (n * self.0 as usize).div_ceil(100)
    }
}

impl fmt::Display for KeepPercent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Keeps the first `ceil(n_pos · keep / 100)` positives in stored order and
/// every other sample.
pub fn apply_imbalance(
    train: &LabeledSet,
    positive_class: usize,
    keep: KeepPercent,
) -> Result<LabeledSet> {
    let n_pos = train
        .labels()
        .iter()
        .filter(|&&y| y == positive_class)
        .count();
    if n_pos == 0 {
        return Err(PrtError::invalid(format!(
            "positive class {positive_class} has no samples"
        )));
    }
    let mut budget = keep.kept(n_pos);
    let indices: Vec<usize> = train
        .labels()
        .iter()
        .enumerate()
        .filter(|&(_, &y)| {
            if y != positive_class {
                return true;
            }
            if budget > 0 {
                budget -= 1;
                true
            } else {
                false
            }
        })
        .map(|(i, _)| i)
        .collect();
    train.subset(&indices)
}
