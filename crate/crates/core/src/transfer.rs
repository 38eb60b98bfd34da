//! The three training stages: source pretraining, pre-text representation
//! transfer (PRT) and conventional transfer learning (TL).

use std::fmt;
use std::str::FromStr;

use crate::data::LabeledSet;
use crate::error::{PrtError, Result};
use crate::nn::{Group, LayerSpec, NetworkState, RunLog, TrainConfig};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Source,
    Prt,
    Tl,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Source => "source",
            Stage::Prt => "prt",
            Stage::Tl => "tl",
        })
    }
}

impl FromStr for Stage {
    type Err = PrtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Stage::Source),
            "prt" => Ok(Stage::Prt),
            "tl" => Ok(Stage::Tl),
            other => Err(PrtError::invalid(format!("unknown stage `{other}`"))),
        }
    }
}

/// Training settings bound to a stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub train: TrainConfig,
}

/// Classifier learning-rate multiplier during fine-tuning.
pub const TL_CLASSIFIER_LR_MULTIPLIER: f64 = 10.0;

impl StageConfig {
    /// 30 epochs of plain supervised training at a higher rate than the
    /// transfer stages.
    pub fn source(seed: u64) -> Self {
        StageConfig {
            stage: Stage::Source,
            train: TrainConfig {
                epochs: 30,
                base_lr: 1e-2,
                seed,
                ..TrainConfig::default()
            },
        }
    }

    /// 15 epochs, lr 3e-4, batch 16, classification group frozen.
    pub fn prt(seed: u64) -> Self {
        StageConfig {
            stage: Stage::Prt,
            train: TrainConfig {
                epochs: 15,
                frozen_groups: [Group::Classification].into_iter().collect(),
                seed,
                ..TrainConfig::default()
            },
        }
    }

    /// 7 epochs, lr 3e-4 for the representation and 10× for the new head.
    pub fn tl(seed: u64) -> Self {
        StageConfig {
            stage: Stage::Tl,
            train: TrainConfig {
                epochs: 7,
                classifier_lr_multiplier: TL_CLASSIFIER_LR_MULTIPLIER,
                seed,
                ..TrainConfig::default()
            },
        }
    }

    pub fn for_stage(stage: Stage, seed: u64) -> Self {
        match stage {
            Stage::Source => Self::source(seed),
            Stage::Prt => Self::prt(seed),
            Stage::Tl => Self::tl(seed),
        }
    }

    /// Checks the freezing / multiplier pattern the stage requires.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let frozen = &self.train.frozen_groups;
        let mult = self.train.classifier_lr_multiplier;
        let ok = match self.stage {
            Stage::Source => frozen.is_empty() && mult == 1.0,
            Stage::Prt => {
                frozen.len() == 1 && frozen.contains(&Group::Classification) && mult == 1.0
            }
            Stage::Tl => frozen.is_empty() && mult == TL_CLASSIFIER_LR_MULTIPLIER,
        };
        if ok {
            Ok(())
        } else {
            Err(PrtError::config(format!(
                "stage `{}` does not allow frozen groups {:?} with classifier multiplier {mult}",
                self.stage, frozen
            )))
        }
    }

    fn expect(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(PrtError::config(format!(
                "expected a `{stage}` stage config, got `{}`",
                self.stage
            )));
        }
        self.validate()
    }
}

/// Trains the source model `M̃` from scratch on the labeled source set.
pub fn pretrain_source(
    specs: &[LayerSpec],
    source: &LabeledSet,
    cfg: &StageConfig,
    log: &mut RunLog,
) -> Result<NetworkState> {
    cfg.expect(Stage::Source)?;
    let mut model = NetworkState::init(specs, derive_seed(&[cfg.train.seed, 0]))?;
    if source.class_count() != model.label_count() {
        return Err(PrtError::invalid(format!(
            "source set has {} classes, network emits {}",
            source.class_count(),
            model.label_count()
        )));
    }
    model.train(
        source.features(),
        source.labels(),
        &cfg.train,
        "source",
        log,
    )?;
    Ok(model)
}

/// Pre-text representation transfer: trains the representation of the
/// source model to predict cluster pseudo-labels through the unchanged
/// source classifier. Returns `M1`.
pub fn prt_train(
    source_model: &NetworkState,
    pseudo: &LabeledSet,
    cfg: &StageConfig,
    log: &mut RunLog,
) -> Result<NetworkState> {
    cfg.expect(Stage::Prt)?;
    if pseudo.class_count() != source_model.label_count() {
        return Err(PrtError::config(format!(
            "pseudo-labels span {} clusters but the source classifier has {} outputs; K must equal the source label count",
            pseudo.class_count(),
            source_model.label_count()
        )));
    }
    let mut model = source_model.clone();
    model.train(pseudo.features(), pseudo.labels(), &cfg.train, "prt", log)?;
    Ok(model)
}

/// Conventional transfer: swap in a fresh `label_count`-way head and train
/// the whole network, the head at the multiplied rate.
pub fn tl_train(
    start: &NetworkState,
    target_train: &LabeledSet,
    label_count: usize,
    cfg: &StageConfig,
    log: &mut RunLog,
) -> Result<NetworkState> {
    cfg.expect(Stage::Tl)?;
    if target_train.class_count() != label_count {
        return Err(PrtError::invalid(format!(
            "target set declares {} classes, head needs {label_count}",
            target_train.class_count()
        )));
    }
    for (class, &count) in target_train.class_counts().iter().enumerate() {
        if count == 0 {
            log.warn(format!("class {class} has no training samples"));
        }
    }
    let mut model = start.replace_head(label_count, derive_seed(&[cfg.train.seed, 1]))?;
    model.train(
        target_train.features(),
        target_train.labels(),
        &cfg.train,
        "tl",
        log,
    )?;
    Ok(model)
}

/// Fraction of samples whose argmax prediction matches the label.
pub fn accuracy(model: &NetworkState, set: &LabeledSet) -> Result<f64> {
    let predicted = model.predict(set.features())?;
    let hits = predicted
        .iter()
        .zip(set.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / set.len() as f64)
}
