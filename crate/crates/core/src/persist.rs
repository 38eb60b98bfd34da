//! On-disk format shared by checkpoints, cluster models, dictionaries and
//! datasets.
//!
//! A file is a UTF-8 header followed by a binary payload:
//!
//! ```text
//! prt <kind> v1
//! key = value
//! ...
//! end_header
//! <payload bytes>
//! ```
//!
//! Real values in the payload are little-endian `f64`, integers are
//! little-endian `i32`. Header floats use Rust's shortest round-trip
//! formatting so they reload bit-identically.

use std::fs;
use std::path::Path;

use crate::clustering::ClusterModel;
use crate::crc::{ClassBlock, FeatureDictionary};
use crate::data::{LabeledSet, UnlabeledSet};
use crate::error::{PrtError, Result};
use crate::linalg::Matrix;
use crate::nn::{Layer, LayerSpec, NetworkState};

const END_HEADER: &str = "end_header\n";

/// Ordered key-value header.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    fn require<'a>(&'a self, key: &str, path: &Path) -> Result<&'a str> {
        self.get(key).ok_or_else(|| PrtError::Format {
            path: path.to_path_buf(),
            message: format!("missing header key `{key}`"),
        })
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, path: &Path) -> Result<T> {
        let raw = self.require(key, path)?;
        raw.parse().map_err(|_| PrtError::Format {
            path: path.to_path_buf(),
            message: format!("header key `{key}` has unparsable value `{raw}`"),
        })
    }
}

/// Writes `header + payload` to `path`, creating parent directories.
pub fn write_artifact(path: &Path, kind: &str, manifest: &Manifest, payload: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| PrtError::io(parent, e))?;
    }
    let mut bytes = format!("prt {kind} v1\n").into_bytes();
    for (k, v) in &manifest.entries {
        bytes.extend_from_slice(format!("{k} = {v}\n").as_bytes());
    }
    bytes.extend_from_slice(END_HEADER.as_bytes());
    bytes.extend_from_slice(payload);
    fs::write(path, bytes).map_err(|e| PrtError::io(path, e))
}

/// Reads an artifact of the given kind, returning its header and payload.
pub fn read_artifact(path: &Path, kind: &str) -> Result<(Manifest, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| PrtError::io(path, e))?;
    let format_err = |message: String| PrtError::Format {
        path: path.to_path_buf(),
        message,
    };
    let marker = END_HEADER.as_bytes();
    let split = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| format_err("no end_header marker".into()))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| format_err("header is not UTF-8".into()))?;
    let mut lines = header.lines();
    let expected = format!("prt {kind} v1");
    match lines.next() {
        Some(first) if first == expected => {}
        other => {
            return Err(format_err(format!(
                "expected `{expected}`, found `{}`",
                other.unwrap_or("")
            )))
        }
    }
    let mut manifest = Manifest::default();
    for line in lines {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| format_err(format!("malformed header line `{line}`")))?;
        manifest.set(k, v);
    }
    Ok((manifest, bytes[split + marker.len()..].to_vec()))
}

pub fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn bytes_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

fn expect_len(path: &Path, payload: &[u8], len: usize) -> Result<()> {
    if payload.len() != len {
        return Err(PrtError::Format {
            path: path.to_path_buf(),
            message: format!("payload has {} bytes, expected {len}", payload.len()),
        });
    }
    Ok(())
}

impl NetworkState {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut m = Manifest::default();
        m.set("seed", self.seed())
            .set("label_count", self.label_count())
            .set("layers", self.layers().len());
        for (i, l) in self.layers().iter().enumerate() {
            let s = l.spec();
            m.set(
                &format!("layer.{i}"),
                format!(
                    "{} {} {} {}",
                    s.input_dim, s.output_dim, s.activation, s.group
                ),
            );
        }
        m.set("parameters", self.parameter_count());
        write_artifact(path, "network", &m, &f64s_to_bytes(&self.flat_parameters()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, payload) = read_artifact(path, "network")?;
        let count: usize = m.parse("layers", path)?;
        let mut specs = Vec::with_capacity(count);
        for i in 0..count {
            let raw = m.require(&format!("layer.{i}"), path)?;
            let parts: Vec<&str> = raw.split_whitespace().collect();
            let bad = || PrtError::Format {
                path: path.to_path_buf(),
                message: format!("bad layer spec `{raw}`"),
            };
            if parts.len() != 4 {
                return Err(bad());
            }
            specs.push(LayerSpec::new(
                parts[0].parse().map_err(|_| bad())?,
                parts[1].parse().map_err(|_| bad())?,
                parts[2].parse().map_err(|_| bad())?,
                parts[3].parse().map_err(|_| bad())?,
            ));
        }
        let total: usize = specs.iter().map(|s| s.output_dim * (s.input_dim + 1)).sum();
        expect_len(path, &payload, total * 8)?;
        let values = bytes_to_f64s(&payload);
        let mut offset = 0;
        let mut layers = Vec::with_capacity(count);
        for s in specs {
            let nw = s.output_dim * s.input_dim;
            let w = Matrix::from_vec(
                s.output_dim,
                s.input_dim,
                values[offset..offset + nw].to_vec(),
            )?;
            offset += nw;
            let b = values[offset..offset + s.output_dim].to_vec();
            offset += s.output_dim;
            layers.push(Layer::from_parts(s, w, b)?);
        }
        let state = NetworkState::from_layers(layers, m.parse("seed", path)?)?;
        let declared: usize = m.parse("label_count", path)?;
        if declared != state.label_count() {
            return Err(PrtError::Format {
                path: path.to_path_buf(),
                message: format!(
                    "label_count {declared} disagrees with final layer width {}",
                    state.label_count()
                ),
            });
        }
        Ok(state)
    }
}

impl ClusterModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let c = self.centroids();
        let mut m = Manifest::default();
        m.set("k", c.rows())
            .set("dim", c.cols())
            .set("seed", self.seed())
            .set("inertia", self.inertia());
        write_artifact(path, "clusters", &m, &f64s_to_bytes(c.as_slice()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, payload) = read_artifact(path, "clusters")?;
        let k: usize = m.parse("k", path)?;
        let dim: usize = m.parse("dim", path)?;
        expect_len(path, &payload, k * dim * 8)?;
        let centroids = Matrix::from_vec(k, dim, bytes_to_f64s(&payload))?;
        ClusterModel::from_parts(centroids, m.parse("seed", path)?, m.parse("inertia", path)?)
    }
}

impl FeatureDictionary {
    /// Header lists `class.i = <class> <start> <count>`; the payload holds the
    /// dictionary columns one after another.
    pub fn save(&self, path: &Path) -> Result<()> {
        let atoms = self.atoms();
        let mut m = Manifest::default();
        m.set("dim", atoms.cols())
            .set("columns", atoms.rows())
            .set("classes", self.blocks().len());
        for (i, b) in self.blocks().iter().enumerate() {
            m.set(
                &format!("class.{i}"),
                format!("{} {} {}", b.class, b.start, b.count),
            );
        }
        write_artifact(path, "dictionary", &m, &f64s_to_bytes(atoms.as_slice()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, payload) = read_artifact(path, "dictionary")?;
        let dim: usize = m.parse("dim", path)?;
        let columns: usize = m.parse("columns", path)?;
        let classes: usize = m.parse("classes", path)?;
        let mut blocks = Vec::with_capacity(classes);
        for i in 0..classes {
            let raw = m.require(&format!("class.{i}"), path)?;
            let nums: Vec<usize> = raw
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| PrtError::Format {
                    path: path.to_path_buf(),
                    message: format!("bad class block `{raw}`"),
                })?;
            if nums.len() != 3 {
                return Err(PrtError::Format {
                    path: path.to_path_buf(),
                    message: format!("bad class block `{raw}`"),
                });
            }
            blocks.push(ClassBlock {
                class: nums[0],
                start: nums[1],
                count: nums[2],
            });
        }
        expect_len(path, &payload, dim * columns * 8)?;
        let atoms = Matrix::from_vec(columns, dim, bytes_to_f64s(&payload))?;
        FeatureDictionary::from_parts(atoms, blocks)
    }
}

fn save_dataset(path: &Path, features: &Matrix, labels: Option<(&[usize], usize)>) -> Result<()> {
    let mut m = Manifest::default();
    m.set("n", features.rows())
        .set("d", features.cols())
        .set("class_count", labels.map_or(0, |(_, c)| c))
        .set("labeled", u8::from(labels.is_some()));
    let mut payload = f64s_to_bytes(features.as_slice());
    if let Some((labels, _)) = labels {
        for &y in labels {
            let y = i32::try_from(y).map_err(|_| PrtError::invalid("label exceeds i32"))?;
            payload.extend_from_slice(&y.to_le_bytes());
        }
    }
    write_artifact(path, "dataset", &m, &payload)
}

struct RawDataset {
    features: Matrix,
    labels: Option<Vec<usize>>,
    class_count: usize,
}

fn load_dataset(path: &Path) -> Result<RawDataset> {
    let (m, payload) = read_artifact(path, "dataset")?;
    let n: usize = m.parse("n", path)?;
    let d: usize = m.parse("d", path)?;
    let class_count: usize = m.parse("class_count", path)?;
    let labeled: u8 = m.parse("labeled", path)?;
    let feature_bytes = n * d * 8;
    let expected = feature_bytes + if labeled == 1 { n * 4 } else { 0 };
    expect_len(path, &payload, expected)?;
    let features = Matrix::from_vec(n, d, bytes_to_f64s(&payload[..feature_bytes]))?;
    let labels = if labeled == 1 {
        let labels = payload[feature_bytes..]
            .chunks_exact(4)
            .map(|c| {
                let v = i32::from_le_bytes(c.try_into().expect("4-byte chunk"));
                usize::try_from(v).map_err(|_| PrtError::Format {
                    path: path.to_path_buf(),
                    message: format!("negative label {v}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Some(labels)
    } else {
        None
    };
    Ok(RawDataset {
        features,
        labels,
        class_count,
    })
}

impl LabeledSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_dataset(
            path,
            self.features(),
            Some((self.labels(), self.class_count())),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = load_dataset(path)?;
        let labels = raw.labels.ok_or_else(|| PrtError::Format {
            path: path.to_path_buf(),
            message: "dataset carries no labels".into(),
        })?;
        LabeledSet::new(raw.features, labels, raw.class_count)
    }
}

impl UnlabeledSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_dataset(path, self.features(), None)
    }

    /// Loads any dataset file, dropping labels if present.
    pub fn load(path: &Path) -> Result<Self> {
        UnlabeledSet::new(load_dataset(path)?.features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Group};
    use proptest::prelude::*;

    fn specs() -> Vec<LayerSpec> {
        vec![
            LayerSpec::new(3, 5, Activation::Relu, Group::Representation),
            LayerSpec::new(5, 4, Activation::Relu, Group::Classification),
            LayerSpec::new(4, 2, Activation::Identity, Group::Classification),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn network_round_trip_is_bit_identical(seed in any::<u64>()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("net.ckpt");
            let net = NetworkState::init(&specs(), seed).unwrap();
            net.save(&path).unwrap();
            let back = NetworkState::load(&path).unwrap();
            let a: Vec<u64> = net.flat_parameters().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.flat_parameters().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(net, back);
        }

        #[test]
        fn header_floats_round_trip(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
            let parsed: f64 = v.to_string().parse().unwrap();
            prop_assert_eq!(parsed.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        NetworkState::init(&specs(), 1)
            .unwrap()
            .save(&path)
            .unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            NetworkState::load(&path),
            Err(PrtError::Format { .. })
        ));
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        NetworkState::init(&specs(), 1)
            .unwrap()
            .save(&path)
            .unwrap();
        assert!(ClusterModel::load(&path).is_err());
    }

    #[test]
    fn missing_file_is_named() {
        let err = NetworkState::load(Path::new("/nonexistent/source.ckpt")).unwrap_err();
        assert!(err.to_string().contains("source.ckpt"));
        assert!(matches!(err, PrtError::MissingFile(_)));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let features =
            Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 3.25], vec![1e-300, 7.0]]).unwrap();
        let set = LabeledSet::new(features.clone(), vec![0, 2, 1], 3).unwrap();
        let path = dir.path().join("target.bin");
        set.save(&path).unwrap();
        assert_eq!(LabeledSet::load(&path).unwrap(), set);
        assert_eq!(UnlabeledSet::load(&path).unwrap().features(), &features);

        let unlabeled = UnlabeledSet::new(features).unwrap();
        let upath = dir.path().join("unlabeled.bin");
        unlabeled.save(&upath).unwrap();
        assert_eq!(UnlabeledSet::load(&upath).unwrap(), unlabeled);
        assert!(LabeledSet::load(&upath).is_err());
    }
}
