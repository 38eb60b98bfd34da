//! The evaluation grid: data generation, the three training stages, the
//! dictionary, fusion and per-fold scoring for every (ratio, fold, method)
//! cell.
//!
//! Every stage reads its inputs from and writes its outputs to the output
//! directory, so the staged CLI commands and `run-all` share one code path:
//!
//! ```text
//! out/source.bin  out/unlabeled.bin  out/target.bin  out/provenance.txt
//! out/source.ckpt out/clusters.ckpt  out/pseudo.bin  out/prt.ckpt
//! out/<ratio>/<fold>/{tl,prt_tl,dict}.ckpt  (+ .log for trained stages)
//! out/report.csv  out/report.txt  out/folds.csv
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;

use crate::clustering::{pseudo_label, ClusterModel, KMeansConfig};
use crate::crc::{build_dictionary, CrcConfig, FeatureDictionary};
use crate::data::{
    apply_imbalance, generate_domains, make_folds, FoldPlan, KeepPercent, LabeledSet, SynthConfig,
    UnlabeledSet,
};
use crate::error::{PrtError, Result};
use crate::metrics::{
    aggregate_folds, compute_metrics, confusion_counts, fuse_predict, FoldRow, Method,
    MetricsReport, ProbabilityVector,
};
use crate::nn::{Activation, Group, LayerSpec, NetworkState, RunLog};
use crate::seed::{derive_seed, tag};
use crate::transfer::{accuracy, pretrain_source, prt_train, tl_train, Stage, StageConfig};

/// Number of target classes.
pub const TARGET_CLASSES: usize = 2;

/// Hidden widths of the two components; the classifier always ends in a
/// linear layer with one output per label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub representation: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    /// Activation of the last representation layer, the one features and
    /// projections are read from.
    pub embedding: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            representation: vec![64, 32],
            classifier_hidden: Vec::new(),
            embedding: Activation::Identity,
        }
    }
}

impl Architecture {
    pub fn layer_specs(&self, input_dim: usize, label_count: usize) -> Result<Vec<LayerSpec>> {
        if self.representation.is_empty() {
            return Err(PrtError::config("representation needs at least one layer"));
        }
        let mut specs = Vec::new();
        let mut width = input_dim;
        let last = self.representation.len() - 1;
        for (i, &w) in self.representation.iter().enumerate() {
            let act = if i == last {
                self.embedding
            } else {
                Activation::Relu
            };
            specs.push(LayerSpec::new(width, w, act, Group::Representation));
            width = w;
        }
        for &w in &self.classifier_hidden {
            specs.push(LayerSpec::new(
                width,
                w,
                Activation::Relu,
                Group::Classification,
            ));
            width = w;
        }
        specs.push(LayerSpec::new(
            width,
            label_count,
            Activation::Identity,
            Group::Classification,
        ));
        crate::nn::validate_specs(&specs)?;
        Ok(specs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub architecture: Architecture,
    pub source: StageConfig,
    pub prt: StageConfig,
    pub tl: StageConfig,
    /// `k` is forced to the source class count.
    pub kmeans: KMeansConfig,
    pub crc: CrcConfig,
    pub ratios: Vec<KeepPercent>,
    pub fold_count: usize,
    pub methods: BTreeSet<Method>,
    pub positive_class: usize,
    pub out_dir: PathBuf,
    pub master_seed: u64,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synth: SynthConfig::default(),
            architecture: Architecture::default(),
            source: StageConfig::source(0),
            prt: StageConfig::prt(0),
            tl: StageConfig::tl(0),
            kmeans: KMeansConfig::default(),
            crc: CrcConfig::default(),
            ratios: KeepPercent::all(),
            fold_count: 5,
            methods: Method::ALL.into_iter().collect(),
            positive_class: 1,
            out_dir: PathBuf::from("out"),
            master_seed: 0,
            workers: 1,
        }
    }
}

fn parse_list<T>(raw: &str, line: usize, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            f(s).map_err(|e| PrtError::Parse {
                line,
                message: e.to_string(),
            })
        })
        .collect()
}

fn parse_value<T: std::str::FromStr>(key: &str, raw: &str, line: usize) -> Result<T> {
    raw.parse().map_err(|_| PrtError::Parse {
        line,
        message: format!("invalid value `{raw}` for `{key}`"),
    })
}

impl ExperimentConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are
    /// errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw_line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| PrtError::Parse {
                line,
                message: format!("expected `key = value`, found `{content}`"),
            })?;
            cfg.set(key.trim(), value.trim(), line)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PrtError::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        macro_rules! v {
            () => {
                parse_value(key, value, line)?
            };
        }
        fn stage_mut<'a>(cfg: &'a mut ExperimentConfig, name: &str) -> Option<&'a mut StageConfig> {
            match name {
                "source" => Some(&mut cfg.source),
                "prt" => Some(&mut cfg.prt),
                "tl" => Some(&mut cfg.tl),
                _ => None,
            }
        }
        match key {
            "seed" => self.master_seed = v!(),
            "out" => self.out_dir = PathBuf::from(value),
            "folds" => self.fold_count = v!(),
            "workers" => self.workers = v!(),
            "positive_class" => self.positive_class = v!(),
            "ratios" => {
                self.ratios = parse_list(value, line, |s| {
                    KeepPercent::new(
                        s.parse()
                            .map_err(|_| PrtError::invalid(format!("bad ratio `{s}`")))?,
                    )
                })?
            }
            "methods" => {
                self.methods = parse_list(value, line, |s| s.parse::<Method>())?
                    .into_iter()
                    .collect()
            }
            "synth.source_classes" => self.synth.source_class_count = v!(),
            "synth.dim" => self.synth.dim = v!(),
            "synth.samples_per_class" => self.synth.samples_per_source_class = v!(),
            "synth.unlabeled" => self.synth.unlabeled_count = v!(),
            "synth.positives" => self.synth.target_positives = v!(),
            "synth.negatives" => self.synth.target_negatives = v!(),
            "synth.mean_spread" => self.synth.mean_spread = v!(),
            "synth.shift" => self.synth.domain_shift = v!(),
            "synth.noise" => self.synth.noise_std = v!(),
            "model.representation" => {
                self.architecture.representation = parse_list(value, line, |s| {
                    s.parse()
                        .map_err(|_| PrtError::invalid(format!("bad width `{s}`")))
                })?
            }
            "model.embedding" => self.architecture.embedding = parse_value(key, value, line)?,
            "model.classifier_hidden" => {
                self.architecture.classifier_hidden = parse_list(value, line, |s| {
                    s.parse()
                        .map_err(|_| PrtError::invalid(format!("bad width `{s}`")))
                })?
            }
            "kmeans.max_iters" => self.kmeans.max_iters = v!(),
            "kmeans.tol" => self.kmeans.tol = v!(),
            "crc.lambda" => self.crc.lambda = v!(),
            "crc.epsilon" => self.crc.epsilon = v!(),
            other => {
                let (stage, field) = other.split_once('.').ok_or_else(|| PrtError::Parse {
                    line,
                    message: format!("unknown key `{other}`"),
                })?;
                let stage = stage_mut(self, stage).ok_or_else(|| PrtError::Parse {
                    line,
                    message: format!("unknown key `{other}`"),
                })?;
                match field {
                    "epochs" => stage.train.epochs = v!(),
                    "batch" => stage.train.batch_size = v!(),
                    "lr" => stage.train.base_lr = v!(),
                    "momentum" => stage.train.momentum = v!(),
                    _ => {
                        return Err(PrtError::Parse {
                            line,
                            message: format!("unknown key `{other}`"),
                        })
                    }
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        for stage in [&self.source, &self.prt, &self.tl] {
            stage.validate()?;
        }
        if self.source.stage != Stage::Source
            || self.prt.stage != Stage::Prt
            || self.tl.stage != Stage::Tl
        {
            return Err(PrtError::config(
                "stage configs are attached to the wrong stages",
            ));
        }
        self.crc.validate()?;
        if self.ratios.is_empty() || self.methods.is_empty() {
            return Err(PrtError::config("ratios and methods must be non-empty"));
        }
        if self.fold_count < 2 {
            return Err(PrtError::config("folds must be at least 2"));
        }
        if self.positive_class >= TARGET_CLASSES {
            return Err(PrtError::config("positive_class must be 0 or 1"));
        }
        if self.workers == 0 {
            return Err(PrtError::config("workers must be positive"));
        }
        let smallest = self.synth.target_positives.min(self.synth.target_negatives);
        if smallest < self.fold_count {
            return Err(PrtError::config(format!(
                "each target class needs at least {} samples",
                self.fold_count
            )));
        }
        self.architecture
            .layer_specs(self.synth.dim, self.synth.source_class_count)?;
        Ok(())
    }

    fn stage_seed(&self, name: &str) -> u64 {
        derive_seed(&[self.master_seed, tag(name)])
    }

    /// Seed of one grid cell; independent of which other cells run.
    pub fn cell_seed(&self, method: Method, ratio: KeepPercent, fold: usize) -> u64 {
        derive_seed(&[
            self.master_seed,
            tag(method.slug()),
            u64::from(ratio.get()),
            fold as u64,
        ])
    }

    fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.stage_seed("data"),
            ..self.synth.clone()
        }
    }

    fn stage_config(&self, stage: Stage, seed: u64) -> StageConfig {
        let template = match stage {
            Stage::Source => &self.source,
            Stage::Prt => &self.prt,
            Stage::Tl => &self.tl,
        };
        let mut cfg = template.clone();
        cfg.train.seed = seed;
        cfg
    }

    fn kmeans_config(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.synth.source_class_count,
            seed: self.stage_seed("kmeans"),
            ..self.kmeans
        }
    }

    fn needs_prt(&self) -> bool {
        self.methods.contains(&Method::PrtTl) || self.methods.contains(&Method::All)
    }

    /// Methods whose fine-tuned network must exist.
    fn trained_methods(&self) -> Vec<Method> {
        let mut out = Vec::new();
        if self.methods.contains(&Method::Tl) {
            out.push(Method::Tl);
        }
        if self.needs_prt() {
            out.push(Method::PrtTl);
        }
        out
    }

    fn cells(&self) -> Vec<(KeepPercent, usize)> {
        self.ratios
            .iter()
            .flat_map(|&r| (0..self.fold_count).map(move |f| (r, f)))
            .collect()
    }

    /// Canonical `key = value` echo, used in the provenance file.
    pub fn render(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        let mut lines = vec![
            format!("seed = {}", self.master_seed),
            format!("out = {}", self.out_dir.display()),
            format!("folds = {}", self.fold_count),
            format!("workers = {}", self.workers),
            format!("positive_class = {}", self.positive_class),
            format!(
                "ratios = {}",
                join(self.ratios.iter().map(ToString::to_string).collect())
            ),
            format!(
                "methods = {}",
                join(self.methods.iter().map(ToString::to_string).collect())
            ),
            format!("synth.source_classes = {}", self.synth.source_class_count),
            format!("synth.dim = {}", self.synth.dim),
            format!(
                "synth.samples_per_class = {}",
                self.synth.samples_per_source_class
            ),
            format!("synth.unlabeled = {}", self.synth.unlabeled_count),
            format!("synth.positives = {}", self.synth.target_positives),
            format!("synth.negatives = {}", self.synth.target_negatives),
            format!("synth.mean_spread = {}", self.synth.mean_spread),
            format!("synth.shift = {}", self.synth.domain_shift),
            format!("synth.noise = {}", self.synth.noise_std),
            format!(
                "model.representation = {}",
                join(
                    self.architecture
                        .representation
                        .iter()
                        .map(ToString::to_string)
                        .collect()
                )
            ),
            format!(
                "model.classifier_hidden = {}",
                join(
                    self.architecture
                        .classifier_hidden
                        .iter()
                        .map(ToString::to_string)
                        .collect()
                )
            ),
            format!("model.embedding = {}", self.architecture.embedding),
        ];
        for (name, s) in [
            ("source", &self.source),
            ("prt", &self.prt),
            ("tl", &self.tl),
        ] {
            lines.push(format!("{name}.epochs = {}", s.train.epochs));
            lines.push(format!("{name}.batch = {}", s.train.batch_size));
            lines.push(format!("{name}.lr = {}", s.train.base_lr));
            lines.push(format!("{name}.momentum = {}", s.train.momentum));
        }
        lines.push(format!("kmeans.max_iters = {}", self.kmeans.max_iters));
        lines.push(format!("kmeans.tol = {}", self.kmeans.tol));
        lines.push(format!("crc.lambda = {}", self.crc.lambda));
        lines.push(format!("crc.epsilon = {}", self.crc.epsilon));
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

/// Output directory plus a log of every artifact read, tagged by job.
#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    reads: Mutex<Vec<(String, PathBuf)>>,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace {
            root: root.into(),
            reads: Mutex::new(Vec::new()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn cell_path(&self, ratio: KeepPercent, fold: usize, file: &str) -> PathBuf {
        self.root
            .join(ratio.to_string())
            .join(fold.to_string())
            .join(file)
    }

    /// `(job, path)` for every artifact loaded so far.
    pub fn reads(&self) -> Vec<(String, PathBuf)> {
        self.reads.lock().expect("read log poisoned").clone()
    }

    fn record(&self, job: &str, path: &Path) {
        self.reads
            .lock()
            .expect("read log poisoned")
            .push((job.to_string(), path.to_path_buf()));
    }

    fn load_network(&self, job: &str, path: &Path) -> Result<NetworkState> {
        self.record(job, path);
        NetworkState::load(path)
    }

    fn load_labeled(&self, job: &str, path: &Path) -> Result<LabeledSet> {
        self.record(job, path);
        LabeledSet::load(path)
    }

    fn load_unlabeled(&self, job: &str, path: &Path) -> Result<UnlabeledSet> {
        self.record(job, path);
        UnlabeledSet::load(path)
    }

    fn load_dictionary(&self, job: &str, path: &Path) -> Result<FeatureDictionary> {
        self.record(job, path);
        FeatureDictionary::load(path)
    }

    fn write_text(&self, path: &Path, text: &str) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| PrtError::io(parent, e))?;
        }
        fs::write(path, text).map_err(|e| PrtError::io(path, e))
    }
}

fn with_pool<T: Send>(workers: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PrtError::config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(job))
}

/// Writes `source.bin`, `unlabeled.bin`, `target.bin` and `provenance.txt`.
pub fn stage_generate(cfg: &ExperimentConfig, ws: &Workspace) -> Result<()> {
    cfg.validate()?;
    let synth = cfg.synth_config();
    let domains = generate_domains(&synth)?;
    domains.source.save(&ws.path("source.bin"))?;
    domains.unlabeled.save(&ws.path("unlabeled.bin"))?;
    domains.target.save(&ws.path("target.bin"))?;
    let provenance = format!("data_seed = {}\n{}", synth.seed, cfg.render());
    ws.write_text(&ws.path("provenance.txt"), &provenance)
}

/// Trains `M̃` into `source.ckpt`; returns its training accuracy.
pub fn stage_pretrain(cfg: &ExperimentConfig, ws: &Workspace) -> Result<f64> {
    cfg.validate()?;
    let source = ws.load_labeled("source", &ws.path("source.bin"))?;
    let specs = cfg
        .architecture
        .layer_specs(source.dim(), source.class_count())?;
    let mut log = RunLog::default();
    let stage = cfg.stage_config(Stage::Source, cfg.stage_seed("source"));
    let model = pretrain_source(&specs, &source, &stage, &mut log)?;
    let acc = accuracy(&model, &source)?;
    if acc < 0.9 {
        log.warn(format!("source training accuracy {acc:.3} is below 0.9"));
    }
    model.save(&ws.path("source.ckpt"))?;
    ws.write_text(&ws.path("source.log"), &log.render())?;
    Ok(acc)
}

/// Clusters the projected unlabeled pool into `clusters.ckpt` and
/// `pseudo.bin`.
pub fn stage_cluster(cfg: &ExperimentConfig, ws: &Workspace) -> Result<ClusterModel> {
    cfg.validate()?;
    let model = ws.load_network("cluster", &ws.path("source.ckpt"))?;
    let unlabeled = ws.load_unlabeled("cluster", &ws.path("unlabeled.bin"))?;
    let (fit, pseudo) = pseudo_label(&model, &unlabeled, &cfg.kmeans_config())?;
    fit.model.save(&ws.path("clusters.ckpt"))?;
    pseudo.save(&ws.path("pseudo.bin"))?;
    Ok(fit.model)
}

/// Pre-text transfer of `source.ckpt` on `pseudo.bin` into `prt.ckpt`.
pub fn stage_prt(cfg: &ExperimentConfig, ws: &Workspace) -> Result<()> {
    cfg.validate()?;
    let source = ws.load_network("prt", &ws.path("source.ckpt"))?;
    let pseudo = ws.load_labeled("prt", &ws.path("pseudo.bin"))?;
    let mut log = RunLog::default();
    let stage = cfg.stage_config(Stage::Prt, cfg.stage_seed("prt"));
    let m1 = prt_train(&source, &pseudo, &stage, &mut log)?;
    m1.save(&ws.path("prt.ckpt"))?;
    ws.write_text(&ws.path("prt.log"), &log.render())
}

struct FoldData {
    plan: FoldPlan,
    target: LabeledSet,
}

impl FoldData {
    fn load(cfg: &ExperimentConfig, ws: &Workspace, job: &str) -> Result<Self> {
        let target = ws.load_labeled(job, &ws.path("target.bin"))?;
        if target.class_count() != TARGET_CLASSES {
            return Err(PrtError::config(format!(
                "target set has {} classes, expected {TARGET_CLASSES}",
                target.class_count()
            )));
        }
        let plan = make_folds(&target, cfg.fold_count)?;
        Ok(FoldData { plan, target })
    }

    fn train_split(
        &self,
        cfg: &ExperimentConfig,
        ratio: KeepPercent,
        fold: usize,
    ) -> Result<LabeledSet> {
        let train = self.target.subset(&self.plan.folds[fold].train)?;
        apply_imbalance(&train, cfg.positive_class, ratio)
    }

    fn test_split(&self, fold: usize) -> Result<LabeledSet> {
        self.target.subset(&self.plan.folds[fold].test)
    }
}

fn job_name(method: Method, ratio: KeepPercent, fold: usize) -> String {
    format!("{}/{ratio}/{fold}", method.slug())
}

/// Fine-tunes `tl.ckpt` (from `source.ckpt`) and/or `prt_tl.ckpt` (from
/// `prt.ckpt`) for every cell.
pub fn stage_tl(cfg: &ExperimentConfig, ws: &Workspace) -> Result<()> {
    cfg.validate()?;
    let folds = FoldData::load(cfg, ws, "tl")?;
    let jobs: Vec<(Method, KeepPercent, usize)> = cfg
        .trained_methods()
        .into_iter()
        .flat_map(|m| cfg.cells().into_iter().map(move |(r, f)| (m, r, f)))
        .collect();
    let results = with_pool(cfg.workers, || {
        jobs.par_iter()
            .map(|&(method, ratio, fold)| {
                let job = job_name(method, ratio, fold);
                let start = match method {
                    Method::Tl => ws.load_network(&job, &ws.path("source.ckpt"))?,
                    _ => ws.load_network(&job, &ws.path("prt.ckpt"))?,
                };
                let train = folds.train_split(cfg, ratio, fold)?;
                let stage = cfg.stage_config(Stage::Tl, cfg.cell_seed(method, ratio, fold));
                let mut log = RunLog::default();
                let m2 = tl_train(&start, &train, TARGET_CLASSES, &stage, &mut log)
                    .map_err(|e| annotate(e, &job))?;
                m2.save(&ws.cell_path(ratio, fold, &format!("{}.ckpt", method.slug())))?;
                ws.write_text(
                    &ws.cell_path(ratio, fold, &format!("{}.log", method.slug())),
                    &log.render(),
                )
            })
            .collect::<Vec<Result<()>>>()
    })?;
    results.into_iter().collect()
}

fn annotate(err: PrtError, job: &str) -> PrtError {
    match err {
        PrtError::Divergence { stage, detail } => PrtError::Divergence {
            stage,
            detail: format!("{detail} (cell {job})"),
        },
        other => other,
    }
}

/// Builds `dict.ckpt` from `prt.ckpt` features of each imbalanced training
/// fold.
pub fn stage_dict(cfg: &ExperimentConfig, ws: &Workspace) -> Result<()> {
    cfg.validate()?;
    if !cfg.methods.contains(&Method::All) {
        return Ok(());
    }
    let folds = FoldData::load(cfg, ws, "dict")?;
    let cells = cfg.cells();
    let results = with_pool(cfg.workers, || {
        cells
            .par_iter()
            .map(|&(ratio, fold)| {
                let job = format!("dict/{ratio}/{fold}");
                let m1 = ws.load_network(&job, &ws.path("prt.ckpt"))?;
                let train = folds.train_split(cfg, ratio, fold)?;
                build_dictionary(&m1, &train)?.save(&ws.cell_path(ratio, fold, "dict.ckpt"))
            })
            .collect::<Vec<Result<()>>>()
    })?;
    results.into_iter().collect()
}

fn score(
    cfg: &ExperimentConfig,
    predictions: &[usize],
    test: &LabeledSet,
    ratio: KeepPercent,
    fold: usize,
    method: Method,
) -> Result<FoldRow> {
    let counts = confusion_counts(predictions, test.labels(), cfg.positive_class)?;
    Ok(FoldRow {
        fold,
        ratio: ratio.get(),
        method,
        metrics: compute_metrics(&counts)?,
    })
}

fn evaluate_cell(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    folds: &FoldData,
    method: Method,
    ratio: KeepPercent,
    fold: usize,
) -> Result<FoldRow> {
    let job = job_name(method, ratio, fold);
    let test = folds.test_split(fold)?;
    let predictions = match method {
        Method::Tl | Method::PrtTl => {
            let path = ws.cell_path(ratio, fold, &format!("{}.ckpt", method.slug()));
            ws.load_network(&job, &path)?.predict(test.features())?
        }
        Method::All => {
            let m2 = ws.load_network(&job, &ws.cell_path(ratio, fold, "prt_tl.ckpt"))?;
            let m1 = ws.load_network(&job, &ws.path("prt.ckpt"))?;
            let dict = ws.load_dictionary(&job, &ws.cell_path(ratio, fold, "dict.ckpt"))?;
            fused_predictions(&m2, &m1, &dict, &cfg.crc, &test)?
        }
    };
    score(cfg, &predictions, &test, ratio, fold, method)
}

/// Labels from averaging `m2`'s softmax with the dictionary probabilities
/// of `m1` features.
pub fn fused_predictions(
    m2: &NetworkState,
    m1: &NetworkState,
    dict: &FeatureDictionary,
    crc: &CrcConfig,
    test: &LabeledSet,
) -> Result<Vec<usize>> {
    let rho = m2.forward(test.features())?;
    let features = m1.represent(test.features())?;
    let coder = dict.coder(crc)?;
    rho.row_iter()
        .zip(features.row_iter())
        .map(|(r, y)| {
            let q = coder.classify(y)?;
            let (label, _) = fuse_predict(
                &ProbabilityVector::new(r.to_vec())?,
                &ProbabilityVector::new(q)?,
            )?;
            Ok(label)
        })
        .collect()
}

/// Scores every requested cell and writes `report.csv`, `report.txt` and
/// `folds.csv`.
pub fn stage_evaluate(cfg: &ExperimentConfig, ws: &Workspace) -> Result<MetricsReport> {
    cfg.validate()?;
    let folds = FoldData::load(cfg, ws, "evaluate")?;
    let jobs: Vec<(KeepPercent, usize, Method)> = cfg
        .cells()
        .into_iter()
        .flat_map(|(r, f)| cfg.methods.iter().map(move |&m| (r, f, m)))
        .collect();
    let rows = with_pool(cfg.workers, || {
        jobs.par_iter()
            .map(|&(ratio, fold, method)| evaluate_cell(cfg, ws, &folds, method, ratio, fold))
            .collect::<Result<Vec<FoldRow>>>()
    })??;
    let report = aggregate_folds(rows)?;
    ws.write_text(&ws.path("report.csv"), &report.to_csv())?;
    ws.write_text(&ws.path("report.txt"), &report.to_text())?;
    ws.write_text(&ws.path("folds.csv"), &report.per_fold_csv())?;
    Ok(report)
}

/// Runs every stage in order and returns the aggregated report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    run_in(cfg, &Workspace::new(&cfg.out_dir))
}

/// [`run_experiment`] against an explicit workspace, whose read log stays
/// inspectable afterwards.
pub fn run_in(cfg: &ExperimentConfig, ws: &Workspace) -> Result<MetricsReport> {
    cfg.validate()?;
    stage_generate(cfg, ws)?;
    let acc = stage_pretrain(cfg, ws)?;
    log::info!("source model training accuracy {acc:.4}");
    if cfg.needs_prt() {
        let clusters = stage_cluster(cfg, ws)?;
        log::info!("k-means inertia {:.4}", clusters.inertia());
        stage_prt(cfg, ws)?;
    }
    stage_tl(cfg, ws)?;
    stage_dict(cfg, ws)?;
    stage_evaluate(cfg, ws)
}
