//! Pre-text representation transfer.
//!
//! A source classifier is adapted to an unlabeled target domain by training
//! only its representation layers to predict K-means cluster indices through
//! its frozen classification layers. The adapted model is then fine-tuned
//! conventionally on the small labeled target set and, in parallel, used as a
//! feature extractor for a collaborative-representation dictionary
//! classifier whose probabilities are fused with the fine-tuned network's.
//!
//! Module map:
//!
//! * [`nn`]: dense classifier with representation / classification groups
//! * [`clustering`]: projection and K-means pseudo-labelling
//! * [`transfer`]: source pretraining, pre-text transfer, fine-tuning
//! * [`crc`]: structured dictionary and collaborative coding
//! * [`metrics`]: fusion, confusion metrics, fold aggregation
//! * [`data`]: synthetic domains, folds, imbalance emulation
//! * [`experiment`] and [`cli`]: the evaluation grid and its command line

pub mod cli;
pub mod clustering;
pub mod crc;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod persist;
pub mod seed;
pub mod transfer;

pub use error::{PrtError, Result};
pub use linalg::Matrix;
