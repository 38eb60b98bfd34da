//! Collaborative-representation classifier over a structured feature
//! dictionary.
//!
//! The dictionary `D = [d_0 | d_1 | ... ]` stacks unit-norm training features
//! class by class; classes may contribute different column counts. A test
//! feature `y` is coded over all of `D` with ridge-regularised least squares,
//! and each class is scored by how well its own columns reconstruct `y`.

use crate::data::LabeledSet;
use crate::error::{PrtError, Result};
use crate::linalg::{norm2, Cholesky, Matrix};
use crate::nn::NetworkState;

/// Columns `start..start + count` of the dictionary belong to `class`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassBlock {
    pub class: usize,
    pub start: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDictionary {
    /// `[N × p]`: row `i` is dictionary column `i`.
    atoms: Matrix,
    blocks: Vec<ClassBlock>,
}

const NORM_TOL: f64 = 1e-9;

impl FeatureDictionary {
    pub fn from_parts(atoms: Matrix, blocks: Vec<ClassBlock>) -> Result<Self> {
        let mut next = 0;
        for (i, b) in blocks.iter().enumerate() {
            if b.class != i || b.start != next || b.count == 0 {
                return Err(PrtError::invalid(format!(
                    "class block {i} ({b:?}) does not continue a contiguous class-ordered partition"
                )));
            }
            next += b.count;
        }
        if next != atoms.rows() {
            return Err(PrtError::invalid(format!(
                "class blocks cover {next} columns, dictionary has {}",
                atoms.rows()
            )));
        }
        if blocks.is_empty() {
            return Err(PrtError::invalid("dictionary has no classes"));
        }
        for (i, atom) in atoms.row_iter().enumerate() {
            if (norm2(atom) - 1.0).abs() > NORM_TOL {
                return Err(PrtError::invalid(format!("column {i} is not unit norm")));
            }
        }
        Ok(FeatureDictionary { atoms, blocks })
    }

    /// Normalises each feature row and groups rows by ascending class,
    /// preserving stored order within a class.
    pub fn from_features(features: &Matrix, labels: &[usize], class_count: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(PrtError::shape(format!(
                "{} labels for {} features",
                labels.len(),
                features.rows()
            )));
        }
        let mut rows = Vec::with_capacity(labels.len());
        let mut blocks = Vec::with_capacity(class_count);
        for class in 0..class_count {
            let start = rows.len();
            for (i, _) in labels.iter().enumerate().filter(|&(_, &y)| y == class) {
                let x = features.row(i);
                let n = norm2(x);
                if !(n > 0.0) || !n.is_finite() {
                    return Err(PrtError::invalid(format!(
                        "sample {i} of class {class} has a zero or non-finite feature norm"
                    )));
                }
                rows.push(x.iter().map(|v| v / n).collect::<Vec<f64>>());
            }
            let count = rows.len() - start;
            if count == 0 {
                return Err(PrtError::invalid(format!(
                    "class {class} has no training samples for the dictionary"
                )));
            }
            blocks.push(ClassBlock {
                class,
                start,
                count,
            });
        }
        let atoms = Matrix::from_rows(&rows)?;
        Ok(FeatureDictionary { atoms, blocks })
    }

    pub fn atoms(&self) -> &Matrix {
        &self.atoms
    }

    /// `D` as a `[p × N]` matrix.
    pub fn matrix(&self) -> Matrix {
        self.atoms.transpose()
    }

    pub fn blocks(&self) -> &[ClassBlock] {
        &self.blocks
    }

    pub fn class_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn column_count(&self) -> usize {
        self.atoms.rows()
    }

    pub fn dim(&self) -> usize {
        self.atoms.cols()
    }

    /// Pre-factors `DᵀD + λI` for repeated coding.
    pub fn coder(&self, cfg: &CrcConfig) -> Result<CrcCoder<'_>> {
        cfg.validate()?;
        let mut system = self.atoms.matmul(&self.atoms.transpose())?;
        for i in 0..system.rows() {
            system[(i, i)] += cfg.lambda;
        }
        let factor = Cholesky::factor(&system)?;
        Ok(CrcCoder {
            dict: self,
            cfg: *cfg,
            system,
            factor,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrcConfig {
    /// Ridge weight on `‖α‖²`.
    pub lambda: f64,
    /// Added to class residuals before inversion.
    pub epsilon: f64,
}

impl Default for CrcConfig {
    fn default() -> Self {
        CrcConfig {
            lambda: 1e-3,
            epsilon: 1e-12,
        }
    }
}

impl CrcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !(self.epsilon > 0.0) {
            return Err(PrtError::config("CRC lambda and epsilon must be positive"));
        }
        Ok(())
    }
}

/// A dictionary with its normal-equation matrix factored.
#[derive(Debug, Clone)]
pub struct CrcCoder<'a> {
    dict: &'a FeatureDictionary,
    cfg: CrcConfig,
    system: Matrix,
    factor: Cholesky,
}

impl CrcCoder<'_> {
    fn normalized(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.dict.dim() {
            return Err(PrtError::invalid(format!(
                "test feature has dimension {}, dictionary {}",
                y.len(),
                self.dict.dim()
            )));
        }
        let n = norm2(y);
        if !(n > 0.0) || !n.is_finite() {
            return Err(PrtError::invalid(
                "test feature has zero or non-finite norm",
            ));
        }
        Ok(y.iter().map(|v| v / n).collect())
    }

    /// Coding vector `α = argmin ‖ŷ − Dα‖² + λ‖α‖²` for the normalised `ŷ`.
    pub fn code(&self, y: &[f64]) -> Result<Vec<f64>> {
        let y = self.normalized(y)?;
        let rhs = self.dict.atoms.mul_vec(&y)?;
        let mut alpha = self.factor.solve(&rhs)?;
        // one step of iterative refinement
        let applied = self.system.mul_vec(&alpha)?;
        let residual: Vec<f64> = rhs.iter().zip(&applied).map(|(b, a)| b - a).collect();
        let correction = self.factor.solve(&residual)?;
        for (a, c) in alpha.iter_mut().zip(correction) {
            *a += c;
        }
        Ok(alpha)
    }

    /// Class probabilities from per-class reconstruction residuals:
    /// `q_c ∝ (‖ŷ − d_c α_c‖ + ε)⁻²`.
    pub fn probability(&self, alpha: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        if alpha.len() != self.dict.column_count() {
            return Err(PrtError::invalid(format!(
                "coding vector has {} entries, dictionary {} columns",
                alpha.len(),
                self.dict.column_count()
            )));
        }
        let y = self.normalized(y)?;
        let weights: Vec<f64> = self
            .dict
            .blocks
            .iter()
            .map(|b| {
                let mut recon = vec![0.0; y.len()];
                for (i, &a) in alpha[b.start..b.start + b.count].iter().enumerate() {
                    for (r, &v) in recon.iter_mut().zip(self.dict.atoms.row(b.start + i)) {
                        *r += a * v;
                    }
                }
                let residual = y
                    .iter()
                    .zip(&recon)
                    .map(|(u, v)| (u - v) * (u - v))
                    .sum::<f64>()
                    .sqrt();
                (residual + self.cfg.epsilon).powi(-2)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        Ok(weights.into_iter().map(|w| w / total).collect())
    }

    pub fn classify(&self, y: &[f64]) -> Result<Vec<f64>> {
        let alpha = self.code(y)?;
        self.probability(&alpha, y)
    }

    /// Probability rows for every feature row, `[n × C]`.
    pub fn classify_all(&self, features: &Matrix) -> Result<Matrix> {
        let rows = features
            .row_iter()
            .map(|y| self.classify(y))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Matrix::from_rows(&rows)?;
        if rows.is_empty() {
            out = Matrix::zeros(0, self.dict.class_count());
        }
        Ok(out)
    }

    /// `‖(DᵀD + λI)α − Dᵀŷ‖ / ‖Dᵀŷ‖`.
    pub fn relative_system_residual(&self, alpha: &[f64], y: &[f64]) -> Result<f64> {
        let y = self.normalized(y)?;
        let rhs = self.dict.atoms.mul_vec(&y)?;
        let applied = self.system.mul_vec(alpha)?;
        let diff: Vec<f64> = rhs.iter().zip(&applied).map(|(b, a)| b - a).collect();
        let scale = norm2(&rhs);
        Ok(if scale > 0.0 {
            norm2(&diff) / scale
        } else {
            norm2(&diff)
        })
    }
}

/// Dictionary of `m1` representation features over the training set.
pub fn build_dictionary(m1: &NetworkState, train: &LabeledSet) -> Result<FeatureDictionary> {
    let features = m1.represent(train.features())?;
    FeatureDictionary::from_features(&features, train.labels(), train.class_count())
}

pub fn crc_code(dict: &FeatureDictionary, y: &[f64], cfg: &CrcConfig) -> Result<Vec<f64>> {
    dict.coder(cfg)?.code(y)
}

pub fn crc_probability(
    dict: &FeatureDictionary,
    alpha: &[f64],
    y: &[f64],
    cfg: &CrcConfig,
) -> Result<Vec<f64>> {
    dict.coder(cfg)?.probability(alpha, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Group, LayerSpec};

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = norm2(v);
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn self_representation() {
        let u = unit(&[1.0, 2.0, -0.5]);
        let dict =
            FeatureDictionary::from_features(&Matrix::from_rows(&[u.clone()]).unwrap(), &[0], 1)
                .unwrap();
        let alpha = crc_code(
            &dict,
            &u,
            &CrcConfig {
                lambda: 1e-10,
                epsilon: 1e-12,
            },
        )
        .unwrap();
        assert!((alpha[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn heavy_regularization_shrinks_code() {
        let x = Matrix::from_rows(&[
            vec![1.0, 0.0, 1.0],
            vec![0.0, 1.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ])
        .unwrap();
        let dict = FeatureDictionary::from_features(&x, &[0, 1, 1], 2).unwrap();
        let alpha = crc_code(
            &dict,
            &[0.3, -0.2, 0.9],
            &CrcConfig {
                lambda: 1e6,
                epsilon: 1e-12,
            },
        )
        .unwrap();
        assert!(norm2(&alpha) < 1e-3);
    }

    #[test]
    fn zero_residual_dominates() {
        let x = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let dict = FeatureDictionary::from_features(&x, &[0, 0, 1], 2).unwrap();
        let cfg = CrcConfig::default();
        let coder = dict.coder(&cfg).unwrap();
        let y = [0.6, 0.8, 0.0];
        // exact code: class 0 reconstructs y with no error
        let q = coder.probability(&[0.6, 0.8, 0.0], &y).unwrap();
        assert!(q[0] > 0.999999);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn equal_residuals_split_evenly() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let dict = FeatureDictionary::from_features(&x, &[0, 1], 2).unwrap();
        let q = crc_probability(&dict, &[0.0, 0.0], &[1.0, 1.0], &CrcConfig::default()).unwrap();
        assert_eq!(q, vec![0.5, 0.5]);
    }

    #[test]
    fn unequal_class_sizes_and_order() {
        let x = Matrix::from_rows(&[
            vec![3.0, 4.0],
            vec![1.0, 0.0],
            vec![0.0, 2.0],
            vec![1.0, 1.0],
        ])
        .unwrap();
        let dict = FeatureDictionary::from_features(&x, &[1, 0, 1, 1], 2).unwrap();
        assert_eq!(
            dict.blocks(),
            &[
                ClassBlock {
                    class: 0,
                    start: 0,
                    count: 1
                },
                ClassBlock {
                    class: 1,
                    start: 1,
                    count: 3
                }
            ]
        );
        assert_eq!(dict.atoms().row(1), &[0.6, 0.8]);
        for atom in dict.atoms().row_iter() {
            assert!((norm2(atom) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn construction_errors() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let err = FeatureDictionary::from_features(&x, &[0, 1], 2).unwrap_err();
        assert!(err.to_string().contains("zero"));
        let y = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let err = FeatureDictionary::from_features(&y, &[0, 0], 3).unwrap_err();
        assert!(err.to_string().contains("class 1"));
    }

    #[test]
    fn dimension_mismatch() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let dict = FeatureDictionary::from_features(&x, &[0, 1], 2).unwrap();
        assert!(matches!(
            crc_code(&dict, &[1.0, 0.0, 0.0], &CrcConfig::default()),
            Err(PrtError::Validation(_))
        ));
        assert!(crc_probability(&dict, &[1.0], &[1.0, 0.0], &CrcConfig::default()).is_err());
    }

    #[test]
    fn dictionary_from_identity_projection() {
        let specs = [
            LayerSpec::new(2, 2, Activation::Identity, Group::Representation),
            LayerSpec::new(2, 2, Activation::Identity, Group::Classification),
        ];
        let mut net = NetworkState::zeros(&specs).unwrap();
        *net.layers_mut()[0].weights_mut() = Matrix::identity(2);
        let train = LabeledSet::new(
            Matrix::from_rows(&[vec![0.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            vec![1, 0],
            2,
        )
        .unwrap();
        let dict = build_dictionary(&net, &train).unwrap();
        assert_eq!(
            dict.matrix(),
            Matrix::from_rows(&[vec![0.6, 0.0], vec![0.8, 1.0]]).unwrap()
        );
    }

    #[test]
    fn from_parts_validates_partition() {
        let atoms = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let gap = vec![
            ClassBlock {
                class: 0,
                start: 0,
                count: 1,
            },
            ClassBlock {
                class: 1,
                start: 2,
                count: 1,
            },
        ];
        assert!(FeatureDictionary::from_parts(atoms.clone(), gap).is_err());
        let ok = vec![
            ClassBlock {
                class: 0,
                start: 0,
                count: 1,
            },
            ClassBlock {
                class: 1,
                start: 1,
                count: 1,
            },
        ];
        assert!(FeatureDictionary::from_parts(atoms, ok).is_ok());
    }
}
