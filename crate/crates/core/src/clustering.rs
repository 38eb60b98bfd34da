//! Pseudo-labels for unlabeled target data: project with the source model's
//! representation component, then K-means cluster the projections.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{LabeledSet, UnlabeledSet};
use crate::error::{PrtError, Result};
use crate::linalg::{squared_distance, Matrix};
use crate::nn::NetworkState;

/// Fitted centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    centroids: Matrix,
    seed: u64,
    inertia: f64,
}

impl ClusterModel {
    pub fn from_parts(centroids: Matrix, seed: u64, inertia: f64) -> Result<Self> {
        if centroids.rows() < 2 {
            return Err(PrtError::invalid("a cluster model needs K >= 2"));
        }
        if !centroids.all_finite() {
            return Err(PrtError::invalid("centroids contain NaN or Inf"));
        }
        if !(inertia >= 0.0) {
            return Err(PrtError::invalid("inertia must be non-negative"));
        }
        Ok(ClusterModel {
            centroids,
            seed,
            inertia,
        })
    }

    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Within-cluster sum of squared distances at the end of the fit.
    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    /// Nearest centroid per row; ties go to the lowest centroid index.
    pub fn assign(&self, features: &Matrix) -> Result<Vec<usize>> {
        if features.cols() != self.dim() {
            return Err(PrtError::invalid(format!(
                "features have dimension {}, centroids {}",
                features.cols(),
                self.dim()
            )));
        }
        Ok(nearest(&self.centroids, features)
            .into_iter()
            .map(|(j, _)| j)
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 10,
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

/// Result of [`kmeans_fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub model: ClusterModel,
    /// Assignment of every training row under the final centroids.
    pub labels: Vec<usize>,
    /// Inertia after each assignment step, first entry from the seeding.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

/// `(index, squared distance)` of the nearest centroid for every row.
fn nearest(centroids: &Matrix, features: &Matrix) -> Vec<(usize, f64)> {
    features
        .row_iter()
        .map(|x| {
            let mut best = (0, squared_distance(x, centroids.row(0)));
            for j in 1..centroids.rows() {
                let d = squared_distance(x, centroids.row(j));
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// k-means++ seeding: first centre uniform, later ones drawn with
/// probability proportional to squared distance from the nearest chosen
/// centre.
fn seed_plus_plus(features: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let m = features.rows();
    let mut centroids = Matrix::zeros(k, features.cols());
    let first = rng.random_range(0..m);
    centroids.row_mut(0).copy_from_slice(features.row(first));
    let mut dist: Vec<f64> = features
        .row_iter()
        .map(|x| squared_distance(x, features.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &d) in dist.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc >= target {
                    chosen = Some(i);
                    break;
                }
            }
            // rounding can leave `acc` a hair below `target`
            chosen.unwrap_or_else(|| dist.iter().rposition(|&d| d > 0.0).expect("total > 0"))
        } else {
            rng.random_range(0..m)
        };
        centroids.row_mut(c).copy_from_slice(features.row(pick));
        for (i, x) in features.row_iter().enumerate() {
            dist[i] = dist[i].min(squared_distance(x, features.row(pick)));
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops once the largest centroid move falls below `tol` (or is exactly
/// zero) or after `max_iters` updates. A cluster that loses all members is
/// moved onto the sample farthest from its own centroid.
pub fn kmeans_fit(features: &Matrix, cfg: &KMeansConfig) -> Result<KMeansFit> {
    let m = features.rows();
    let k = cfg.k;
    if k < 2 {
        return Err(PrtError::invalid("K must be at least 2"));
    }
    if m < k {
        return Err(PrtError::invalid(format!(
            "{m} samples cannot form {k} clusters"
        )));
    }
    if cfg.max_iters == 0 || !(cfg.tol >= 0.0) {
        return Err(PrtError::invalid(
            "max_iters must be positive and tol non-negative",
        ));
    }
    if !features.all_finite() {
        return Err(PrtError::invalid("features contain NaN or Inf"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = seed_plus_plus(features, k, &mut rng);
    let mut assigned = nearest(&centroids, features);
    let mut history = vec![assigned.iter().map(|&(_, d)| d).sum::<f64>()];
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        iterations += 1;
        let updated = update_centroids(features, &assigned, k);
        let shift = (0..k)
            .map(|j| squared_distance(centroids.row(j), updated.row(j)).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        assigned = nearest(&centroids, features);
        history.push(assigned.iter().map(|&(_, d)| d).sum());
        if shift < cfg.tol || shift == 0.0 {
            break;
        }
    }

    let inertia = *history.last().expect("seeded history");
    Ok(KMeansFit {
        model: ClusterModel::from_parts(centroids, cfg.seed, inertia)?,
        labels: assigned.into_iter().map(|(j, _)| j).collect(),
        inertia_history: history,
        iterations,
    })
}

fn update_centroids(features: &Matrix, assigned: &[(usize, f64)], k: usize) -> Matrix {
    let d = features.cols();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (x, &(j, _)) in features.row_iter().zip(assigned) {
        counts[j] += 1;
        for (s, &v) in sums.row_mut(j).iter_mut().zip(x) {
            *s += v;
        }
    }
    let mut empty = Vec::new();
    for (j, &count) in counts.iter().enumerate() {
        if count == 0 {
            empty.push(j);
        } else {
            for s in sums.row_mut(j) {
                *s /= count as f64;
            }
        }
    }
    if !empty.is_empty() {
        // farthest samples first; stable sort keeps lower indices ahead on ties
        let mut order: Vec<usize> = (0..features.rows()).collect();
        order.sort_by(|&a, &b| assigned[b].1.total_cmp(&assigned[a].1));
        for (j, &i) in empty.iter().zip(&order) {
            sums.row_mut(*j).copy_from_slice(features.row(i));
        }
    }
    sums
}

/// Representation-component activations of `model` on `samples`.
pub fn extract_projection(model: &NetworkState, samples: &Matrix) -> Result<Matrix> {
    model.represent(samples)
}

/// Projects the unlabeled pool through `model`, clusters it and returns the
/// original samples labelled by cluster index.
pub fn pseudo_label(
    model: &NetworkState,
    unlabeled: &UnlabeledSet,
    cfg: &KMeansConfig,
) -> Result<(KMeansFit, LabeledSet)> {
    let projected = extract_projection(model, unlabeled.features())?;
    let fit = kmeans_fit(&projected, cfg)?;
    let pseudo = LabeledSet::new(unlabeled.features().clone(), fit.labels.clone(), cfg.k)?;
    Ok((fit, pseudo))
}
