//! Experiment grid: full fine-tuning, ablation, and few-shot protocols over
//! backbones x datasets x scales x seeds, plus the comparison tables built
//! from their results.
//!
//! A plan is a TOML file:
//!
//! ```toml
//! backbones = ["scratch", "toy"]
//! scenario = "full"            # full | ablate_msg | ablate_code | few_shot
//! scales = []                  # few_shot only
//! seeds = [0]
//! embedding_dim = 16           # toy/scratch width; pre-trained widths come from weights
//! epochs_multiplier = 1.0
//!
//! [[datasets]]
//! name = "qt"
//! path = "data/qt.jsonl"       # relative to the plan file
//!
//! [[datasets]]
//! name = "toy"
//! synthetic = { records = 2400, signal = "code", seed = 1 }
//!
//! [split]                      # train_fraction, mode, seed
//! [train]                      # epochs, batch_size, learning_rate, ...
//! [head]                       # window_size, num_filters, hidden_dim, ...
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::synthetic::{synthetic_corpus, SyntheticSpec};
use crate::corpus::{self, Corpus, CorpusError, SplitSpec, DEFAULT_VALIDATION_FRACTION};
use crate::encode::{
    Backbone, BackboneCache, BackboneLoader, BackboneName, EncodeError, EncoderSpec,
    NoPretrainedLoader,
};
use crate::head::{HeadConfig, InputMask};
use crate::metrics::{
    evaluate, metrics_table_tsv, t_test_matrix, thresholded, MetricsError, MetricsReport,
    PredictionResult, TTestMatrix, DEFAULT_THRESHOLD,
};
use crate::model::JitModel;
use crate::train::{measure, EfficiencyRecord, Snapshot, StepLoss, TrainConfig, Trainer, TrainingTrace};
use crate::Scalar;

/// Few-shot runs below this size train without a validation split.
pub const MIN_VALIDATED_SHOTS: usize = 50;
pub const HISTOGRAM_BINS: usize = 20;
pub const REPORT_FILE: &str = "report.json";
pub const CELL_FILE: &str = "cell.json";
pub const CHECKPOINT_FILE: &str = "best.ckpt";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("cannot read plan {path}: {source}")]
    PlanIo {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error(transparent)]
    UnknownBackbone(EncodeError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed report {path}: {message}")]
    Report { path: PathBuf, message: String },
    #[error("test set for {dataset} changed between cells ({first} vs {second})")]
    TestSetDrift {
        dataset: String,
        first: String,
        second: String,
    },
    #[error("score vectors differ: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    #[default]
    Full,
    AblateMsg,
    AblateCode,
    FewShot,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Full => "full",
            Scenario::AblateMsg => "ablate_msg",
            Scenario::AblateCode => "ablate_code",
            Scenario::FewShot => "few_shot",
        }
    }

    /// Branches present in models trained under this scenario.
    pub fn branches(self) -> InputMask {
        match self {
            Scenario::AblateMsg => InputMask::CodeOnly,
            Scenario::AblateCode => InputMask::MessageOnly,
            Scenario::Full | Scenario::FewShot => InputMask::Full,
        }
    }
}

/// Input branch removed by an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Drop {
    Msg,
    Code,
}

impl Drop {
    pub fn scenario(self) -> Scenario {
        match self {
            Drop::Msg => Scenario::AblateMsg,
            Drop::Code => Scenario::AblateCode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSource {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

impl DatasetSource {
    pub fn file(name: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        DatasetSource {
            name: name.into(),
            path: Some(path.into()),
            synthetic: None,
        }
    }

    pub fn synthetic(name: impl Into<String>, spec: SyntheticSpec) -> Self {
        DatasetSource {
            name: name.into(),
            path: None,
            synthetic: Some(spec),
        }
    }

    fn load(&self, base: &Path) -> std::result::Result<Corpus, CorpusError> {
        match (&self.path, &self.synthetic) {
            (Some(p), _) => {
                let path = if p.is_absolute() { p.clone() } else { base.join(p) };
                let mut c = corpus::load_corpus(path)?;
                c.name = self.name.clone();
                Ok(c)
            }
            (None, Some(spec)) => Ok(synthetic_corpus(&self.name, spec)),
            (None, None) => Err(CorpusError::EmptyCorpus(self.name.clone())),
        }
    }
}

/// Training settings; an unset learning rate follows the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    pub freeze_backbone: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positive_weight: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: None,
            freeze_backbone: d.freeze_backbone,
            max_grad_norm: d.max_grad_norm,
            positive_weight: d.positive_weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub backbones: Vec<String>,
    pub datasets: Vec<DatasetSource>,
    #[serde(default)]
    pub scenario: Scenario,
    #[serde(default)]
    pub scales: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
    #[serde(default = "one")]
    pub epochs_multiplier: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub head: HeadConfig,
    /// Directory that relative dataset paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn one() -> f64 {
    1.0
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}
fn default_validation_fraction() -> f64 {
    DEFAULT_VALIDATION_FRACTION
}

/// One grid cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub backbone: BackboneName,
    pub dataset: String,
    pub scenario: Scenario,
    pub scale: Option<usize>,
    pub seed: u64,
}

impl CellKey {
    /// Relative directory `<model>/<dataset>/<scenario>[_n<scale>]_s<seed>`.
    pub fn dir(&self) -> PathBuf {
        let mut tag = self.scenario.as_str().to_string();
        if let Some(n) = self.scale {
            let _ = write!(tag, "_n{n}");
        }
        let _ = write!(tag, "_s{}", self.seed);
        PathBuf::from(self.backbone.as_str()).join(&self.dataset).join(tag)
    }

    /// Row label used in tables.
    pub fn label(&self) -> String {
        let mut s = format!("{}/{}", self.backbone.model_name(), self.dataset);
        match self.scenario {
            Scenario::Full => {}
            Scenario::AblateMsg => s.push_str("/-msg"),
            Scenario::AblateCode => s.push_str("/-code"),
            Scenario::FewShot => {}
        }
        if let Some(n) = self.scale {
            let _ = write!(s, "/n={n}");
        }
        let _ = write!(s, "/s={}", self.seed);
        s
    }
}

impl ExperimentPlan {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut plan: ExperimentPlan =
            toml::from_str(text).map_err(|e| ExperimentError::Plan(e.to_string()))?;
        plan.base_dir = base_dir.into();
        plan.validate()?;
        Ok(plan)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::PlanIo {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }

    pub fn backbone_names(&self) -> Result<Vec<BackboneName>> {
        self.backbones
            .iter()
            .map(|b| b.parse::<BackboneName>().map_err(ExperimentError::UnknownBackbone))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ExperimentError::Plan(m));
        if self.backbones.is_empty() {
            return fail("backbones: list is empty".into());
        }
        self.backbone_names()?;
        if self.datasets.is_empty() {
            return fail("datasets: list is empty".into());
        }
        for (i, d) in self.datasets.iter().enumerate() {
            if d.path.is_some() == d.synthetic.is_some() {
                return fail(format!("datasets[{i}] ({}): set exactly one of `path`, `synthetic`", d.name));
            }
            if d.name.is_empty() || d.name.contains(['/', '\\']) {
                return fail(format!("datasets[{i}].name: {:?} is not a usable directory name", d.name));
            }
        }
        let mut names: Vec<&str> = self.datasets.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return fail("datasets: names must be unique".into());
        }
        match (self.scenario, self.scales.is_empty()) {
            (Scenario::FewShot, true) => return fail("scales: few_shot needs at least one scale".into()),
            (s, false) if s != Scenario::FewShot => {
                return fail(format!("scales: only valid with scenario = \"few_shot\", not {:?}", s.as_str()))
            }
            _ => {}
        }
        if self.seeds.is_empty() {
            return fail("seeds: list is empty".into());
        }
        if !(self.epochs_multiplier > 0.0) || !self.epochs_multiplier.is_finite() {
            return fail("epochs_multiplier: must be positive".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return fail("validation_fraction: must lie in (0, 1)".into());
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return fail("split.train_fraction: must lie in (0, 1)".into());
        }
        if let Some(0) = self.embedding_dim {
            return fail("embedding_dim: must be positive".into());
        }
        self.train_config(BackboneName::Toy, 0)
            .validate()
            .map_err(|e| ExperimentError::Plan(format!("train: {e}")))?;
        self.head
            .with_embedding_dim(self.embedding_dim.unwrap_or(1))
            .validate()
            .map_err(|e| ExperimentError::Plan(format!("head: {e}")))?;
        Ok(())
    }

    /// Every cell of the grid in a fixed order.
    pub fn grid(&self) -> Result<Vec<CellKey>> {
        let scales: Vec<Option<usize>> = if self.scenario == Scenario::FewShot {
            self.scales.iter().copied().map(Some).collect()
        } else {
            vec![None]
        };
        let mut cells = Vec::new();
        for backbone in self.backbone_names()? {
            for d in &self.datasets {
                for &scale in &scales {
                    for &seed in &self.seeds {
                        cells.push(CellKey {
                            backbone,
                            dataset: d.name.clone(),
                            scenario: self.scenario,
                            scale,
                            seed,
                        });
                    }
                }
            }
        }
        Ok(cells)
    }

    /// Short stable hash of the plan contents.
    pub fn plan_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("plan serializes");
        hex::encode(&Sha256::digest(&json)[..6])
    }

    pub fn epochs(&self) -> usize {
        (self.train.epochs as f64 * self.epochs_multiplier).round() as usize
    }

    pub fn train_config(&self, backbone: BackboneName, seed: u64) -> TrainConfig {
        let trainable = !backbone.is_pretrained() && !self.train.freeze_backbone && backbone == BackboneName::Scratch;
        let base = TrainConfig::for_backbone(backbone, trainable);
        TrainConfig {
            epochs: self.epochs(),
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate.unwrap_or(base.learning_rate),
            seed,
            freeze_backbone: self.train.freeze_backbone,
            threshold: self.threshold,
            max_grad_norm: self.train.max_grad_norm,
            positive_weight: self.train.positive_weight,
        }
    }

    pub fn encoder_spec(&self, backbone: BackboneName) -> EncoderSpec {
        let spec = EncoderSpec::for_backbone(backbone);
        match (backbone.is_pretrained(), self.embedding_dim) {
            (false, Some(d)) => spec.with_dim(d),
            _ => spec,
        }
    }
}

/// Everything that determines a cell's result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedCell {
    pub encoder: EncoderSpec,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    /// `None` when the cell trains without a validation split.
    pub validation_fraction: Option<f64>,
    pub precision: Precision,
    pub dataset_hash: String,
}

impl ResolvedCell {
    pub fn config_hash(&self, key: &CellKey) -> String {
        let json = serde_json::to_vec(&(key, self, env!("CARGO_PKG_VERSION"))).expect("serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub metrics: MetricsReport,
    pub trace: TrainingTrace,
    pub efficiency: EfficiencyRecord,
    pub scores: Vec<PredictionResult>,
    pub fit_size: usize,
    pub validation_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellOutcome {
    Ok(Box<CellResult>),
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub key: CellKey,
    pub config_hash: Option<String>,
    pub resolved: Option<ResolvedCell>,
    pub test_hash: Option<String>,
    pub notes: Vec<String>,
    pub outcome: CellOutcome,
    /// Loaded from an earlier run of the same plan.
    #[serde(skip)]
    pub resumed: bool,
}

impl CellReport {
    pub fn result(&self) -> Option<&CellResult> {
        match &self.outcome {
            CellOutcome::Ok(r) => Some(r),
            CellOutcome::Failed { .. } => None,
        }
    }

    pub fn error(&self) -> Option<&str> {
        match &self.outcome {
            CellOutcome::Ok(_) => None,
            CellOutcome::Failed { error } => Some(error),
        }
    }

    fn failed(key: CellKey, error: impl ToString) -> Self {
        CellReport {
            key,
            config_hash: None,
            resolved: None,
            test_hash: None,
            notes: Vec::new(),
            outcome: CellOutcome::Failed { error: error.to_string() },
            resumed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub plan_hash: String,
    pub scenario: Scenario,
    pub cells: Vec<CellReport>,
}

impl ExperimentReport {
    pub fn ok_cells(&self) -> impl Iterator<Item = (&CellKey, &CellResult)> {
        self.cells.iter().filter_map(|c| c.result().map(|r| (&c.key, r)))
    }

    pub fn failed_cells(&self) -> impl Iterator<Item = &CellReport> {
        self.cells.iter().filter(|c| c.error().is_some())
    }
}

/// Where and how a plan executes.
#[derive(Clone)]
pub struct RunContext {
    /// Output root; `None` keeps everything in memory.
    pub out: Option<PathBuf>,
    pub cache: BackboneCache,
    pub loader: Arc<dyn BackboneLoader>,
    /// Cells trained concurrently.
    pub workers: usize,
    /// Re-run cells even when a matching result exists.
    pub force: bool,
}

impl RunContext {
    pub fn in_memory() -> Self {
        RunContext {
            out: None,
            cache: BackboneCache::from_env(),
            loader: Arc::new(NoPretrainedLoader),
            workers: 1,
            force: false,
        }
    }

    pub fn with_out(mut self, out: impl Into<PathBuf>) -> Self {
        self.out = Some(out.into());
        self
    }
}

struct PreparedDataset {
    train: Corpus,
    test: Corpus,
    hash: String,
    test_hash: String,
}

fn prepare(plan: &ExperimentPlan) -> BTreeMap<String, std::result::Result<Arc<PreparedDataset>, String>> {
    plan.datasets
        .iter()
        .map(|d| {
            let prepared = d
                .load(&plan.base_dir)
                .and_then(|c| {
                    let hash = c.content_hash();
                    let (train, test) = corpus::split(&c, &plan.split)?;
                    let test_hash = test.content_hash();
                    Ok(Arc::new(PreparedDataset {
                        train,
                        test,
                        hash,
                        test_hash,
                    }))
                })
                .map_err(|e| format!("dataset {}: {e}", d.name));
            (d.name.clone(), prepared)
        })
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn build_model<F: Scalar>(
    plan: &ExperimentPlan,
    key: &CellKey,
    data: &PreparedDataset,
    ctx: &RunContext,
) -> std::result::Result<JitModel<F>, String> {
    let spec = plan.encoder_spec(key.backbone);
    let backbone = match key.backbone {
        BackboneName::Toy => Backbone::toy(spec.embedding_dim),
        BackboneName::Scratch => Backbone::scratch(spec.embedding_dim, &data.train, key.seed),
        _ => Backbone::pretrained(spec, &ctx.cache, ctx.loader.as_ref()).map_err(|e| e.to_string())?,
    };
    let head = HeadConfig {
        embedding_dim: backbone.dim(),
        branches: key.scenario.branches(),
        ..plan.head
    };
    JitModel::new(backbone, head, key.seed).map_err(|e| e.to_string())
}

fn run_cell_typed<F: Scalar>(
    plan: &ExperimentPlan,
    key: &CellKey,
    data: &PreparedDataset,
    ctx: &RunContext,
    cell_dir: Option<&Path>,
) -> CellReport {
    let mut notes = Vec::new();
    let train_cfg = plan.train_config(key.backbone, key.seed);

    // fit / validation sets
    let sets = match key.scale {
        Some(0) => Ok((Corpus::new("0-shot", Vec::new()), None)),
        Some(n) => corpus::few_shot_sample(&data.train, n, key.seed).and_then(|sample| {
            if n < MIN_VALIDATED_SHOTS {
                notes.push(format!(
                    "{n}-shot sample is below {MIN_VALIDATED_SHOTS}; trained without validation, last epoch kept"
                ));
                Ok((sample, None))
            } else {
                corpus::carve_validation(&sample, plan.validation_fraction, key.seed).map(|(f, v)| (f, Some(v)))
            }
        }),
        None => corpus::carve_validation(&data.train, plan.validation_fraction, key.seed).map(|(f, v)| (f, Some(v))),
    };
    let (fit, val) = match sets {
        Ok(s) => s,
        Err(e) => return CellReport::failed(key.clone(), e),
    };
    let train_cfg = if key.scale == Some(0) {
        notes.push("zero-shot: untrained head, no gradient steps".into());
        TrainConfig { epochs: 0, ..train_cfg }
    } else {
        train_cfg
    };

    let model = match build_model::<F>(plan, key, data, ctx) {
        Ok(m) => m,
        Err(e) => return CellReport::failed(key.clone(), e),
    };
    let resolved = ResolvedCell {
        encoder: model.backbone.spec.clone(),
        head: model.config,
        train: train_cfg,
        split: plan.split,
        validation_fraction: val.as_ref().map(|_| plan.validation_fraction),
        precision: plan.precision,
        dataset_hash: data.hash.clone(),
    };
    let config_hash = resolved.config_hash(key);

    let mut trainer = Trainer::new(train_cfg).monitor(&data.test);
    if let Some(v) = &val {
        trainer = trainer.validation(v);
    }
    if let Some(dir) = cell_dir {
        trainer = trainer.checkpoint(dir.join(CHECKPOINT_FILE), config_hash.clone());
    }
    let outcome = trainer
        .run(model, &fit)
        .map_err(|e| e.to_string())
        .and_then(|(model, trace)| {
            let scores = model.predict(&data.test).map_err(|e| e.to_string())?;
            let metrics = evaluate(&scores, plan.threshold).map_err(|e| e.to_string())?;
            let efficiency = measure(&model, &trace);
            if let (Some(dir), None) = (cell_dir, trace.checkpoint_bytes) {
                // untrained models are saved too, so every cell has a checkpoint
                crate::checkpoint::save_checkpoint(&model, &config_hash, dir.join(CHECKPOINT_FILE))
                    .map_err(|e| e.to_string())?;
            }
            Ok(CellResult {
                metrics,
                trace,
                efficiency,
                scores,
                fit_size: fit.len(),
                validation_size: val.as_ref().map_or(0, Corpus::len),
            })
        });
    if let Ok(r) = &outcome {
        if r.metrics.f1.undefined {
            notes.push("F1 undefined: zero division".into());
        }
    }
    CellReport {
        key: key.clone(),
        config_hash: Some(config_hash),
        resolved: Some(resolved),
        test_hash: Some(data.test_hash.clone()),
        notes,
        outcome: match outcome {
            Ok(r) => CellOutcome::Ok(Box::new(r)),
            Err(error) => CellOutcome::Failed { error },
        },
        resumed: false,
    }
}

fn cached_cell(dir: &Path, expected_hash: Option<&str>) -> Option<CellReport> {
    let text = fs::read_to_string(dir.join(CELL_FILE)).ok()?;
    let mut cell: CellReport = serde_json::from_str(&text).ok()?;
    let matches = expected_hash.is_some() && cell.config_hash.as_deref() == expected_hash;
    (matches && cell.result().is_some()).then(|| {
        cell.resumed = true;
        cell
    })
}

fn write_cell(dir: &Path, cell: &CellReport) -> Result<()> {
    write_file(&dir.join(CELL_FILE), serde_json::to_vec_pretty(cell).expect("serializes"))?;
    if let Some(r) = cell.result() {
        write_file(&dir.join("trace.tsv"), r.trace.to_tsv())?;
        let mut scores = String::from("commit_id\tscore\tlabel\n");
        for p in &r.scores {
            let _ = writeln!(scores, "{}\t{}\t{}", p.commit_id, p.score, p.label.as_u8());
        }
        write_file(&dir.join("scores.tsv"), scores)?;
    }
    Ok(())
}

/// The config hash a cell would get, without training it.
fn expected_hash(plan: &ExperimentPlan, key: &CellKey, data: &PreparedDataset) -> Option<String> {
    let spec = plan.encoder_spec(key.backbone);
    let mut train = plan.train_config(key.backbone, key.seed);
    let validation_fraction = match key.scale {
        Some(0) => {
            train.epochs = 0;
            None
        }
        Some(n) if n < MIN_VALIDATED_SHOTS => None,
        _ => Some(plan.validation_fraction),
    };
    let resolved = ResolvedCell {
        head: HeadConfig {
            embedding_dim: spec.embedding_dim,
            branches: key.scenario.branches(),
            ..plan.head
        },
        encoder: spec,
        train,
        split: plan.split,
        validation_fraction,
        precision: plan.precision,
        dataset_hash: data.hash.clone(),
    };
    Some(resolved.config_hash(key))
}

/// Runs every cell of `plan` and writes results under
/// `<out>/<plan-hash>/` when an output root is set.
pub fn run_plan(plan: &ExperimentPlan, ctx: &RunContext) -> Result<ExperimentReport> {
    plan.validate()?;
    let grid = plan.grid()?;
    let plan_hash = plan.plan_hash();
    let root = ctx.out.as_ref().map(|o| o.join(&plan_hash));
    if let Some(root) = &root {
        write_file(&root.join("plan.toml"), plan.to_toml())?;
    }
    let datasets = prepare(plan);

    let run_one = |key: &CellKey| -> Result<CellReport> {
        let data = match &datasets[&key.dataset] {
            Ok(d) => d,
            Err(e) => return Ok(CellReport::failed(key.clone(), e)),
        };
        let dir = root.as_ref().map(|r| r.join(key.dir()));
        if let (Some(dir), false) = (&dir, ctx.force) {
            if let Some(cell) = cached_cell(dir, expected_hash(plan, key, data).as_deref()) {
                return Ok(cell);
            }
        }
        if let Some(dir) = &dir {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let cell = match plan.precision {
            Precision::F32 => run_cell_typed::<f32>(plan, key, data, ctx, dir.as_deref()),
            Precision::F64 => run_cell_typed::<f64>(plan, key, data, ctx, dir.as_deref()),
        };
        if let Some(dir) = &dir {
            write_cell(dir, &cell)?;
        }
        Ok(cell)
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.workers.max(1))
        .build()
        .map_err(|e| ExperimentError::Plan(format!("workers: {e}")))?;
    let cells: Vec<CellReport> = if ctx.workers <= 1 {
        grid.iter().map(run_one).collect::<Result<_>>()?
    } else {
        pool.install(|| grid.par_iter().map(run_one).collect::<Result<_>>())?
    };

    let report = ExperimentReport {
        plan_hash,
        scenario: plan.scenario,
        cells,
    };
    check_test_constancy(&report)?;
    if let Some(root) = &root {
        write_file(&root.join(REPORT_FILE), serde_json::to_vec_pretty(&report).expect("serializes"))?;
    }
    Ok(report)
}

/// Trains on each dataset's training split and evaluates on its test split.
pub fn run_full(plan: &ExperimentPlan, ctx: &RunContext) -> Result<ExperimentReport> {
    let plan = ExperimentPlan {
        scenario: Scenario::Full,
        scales: Vec::new(),
        ..plan.clone()
    };
    run_plan(&plan, ctx)
}

/// Trains models with one input branch structurally removed.
pub fn run_ablation(plan: &ExperimentPlan, drop: Drop, ctx: &RunContext) -> Result<ExperimentReport> {
    let plan = ExperimentPlan {
        scenario: drop.scenario(),
        scales: Vec::new(),
        ..plan.clone()
    };
    run_plan(&plan, ctx)
}

/// Trains on balanced samples of each scale; scale 0 evaluates the untrained model.
pub fn run_few_shot(plan: &ExperimentPlan, ctx: &RunContext) -> Result<ExperimentReport> {
    let plan = ExperimentPlan {
        scenario: Scenario::FewShot,
        ..plan.clone()
    };
    run_plan(&plan, ctx)
}

fn check_test_constancy(report: &ExperimentReport) -> Result<()> {
    let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
    for c in &report.cells {
        if let Some(h) = &c.test_hash {
            match seen.get(c.key.dataset.as_str()) {
                Some(first) if *first != h => {
                    return Err(ExperimentError::TestSetDrift {
                        dataset: c.key.dataset.clone(),
                        first: first.to_string(),
                        second: h.clone(),
                    })
                }
                _ => {
                    seen.insert(&c.key.dataset, h);
                }
            }
        }
    }
    Ok(())
}

pub fn load_report(dir: impl AsRef<Path>) -> Result<ExperimentReport> {
    let dir = dir.as_ref();
    let path = if dir.is_file() { dir.to_path_buf() } else { dir.join(REPORT_FILE) };
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Report {
        path,
        message: e.to_string(),
    })
}

/// Counts of `scores` in `bins` equal-width bins over [0, 1]; 1.0 lands in the last bin.
pub fn histogram(scores: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &s in scores {
        let i = ((s.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[i] += 1;
    }
    counts
}

/// A named run for comparison.
#[derive(Debug, Clone, Copy)]
pub struct NamedRun<'a> {
    pub name: &'a str,
    pub result: &'a CellResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonBundle {
    pub ttest: TTestMatrix,
    pub efficiency: Vec<(String, EfficiencyRecord)>,
    pub loss_curves: Vec<(String, Vec<StepLoss>)>,
    pub validation_curves: Vec<(String, Vec<(usize, f64)>)>,
    pub snapshots: Vec<(String, Vec<Snapshot>)>,
}

/// Builds the t-test matrix, efficiency table and training series for
/// runs evaluated on the same test set.
pub fn compare_runs(runs: &[NamedRun<'_>], thresholded_scores: Option<f64>) -> Result<ComparisonBundle> {
    if let Some(first) = runs.first() {
        for r in &runs[1..] {
            if r.result.scores.len() != first.result.scores.len() {
                return Err(ExperimentError::Mismatch(format!(
                    "{} has {} scores, {} has {}",
                    first.name,
                    first.result.scores.len(),
                    r.name,
                    r.result.scores.len()
                )));
            }
            let same_ids = r
                .result
                .scores
                .iter()
                .zip(&first.result.scores)
                .all(|(a, b)| a.commit_id == b.commit_id);
            if !same_ids {
                return Err(ExperimentError::Mismatch(format!(
                    "{} and {} were scored on different commits",
                    first.name, r.name
                )));
            }
        }
    }
    let samples: Vec<(String, Vec<f64>)> = runs
        .iter()
        .map(|r| {
            let s: Vec<f64> = r.result.scores.iter().map(|p| p.score).collect();
            let s = match thresholded_scores {
                Some(t) => thresholded(&s, t),
                None => s,
            };
            (r.name.to_string(), s)
        })
        .collect();
    let ttest = t_test_matrix(&samples)?;
    let named = |f: &dyn Fn(&CellResult) -> _| runs.iter().map(|r| (r.name.to_string(), f(r.result))).collect();
    Ok(ComparisonBundle {
        ttest,
        efficiency: runs.iter().map(|r| (r.name.to_string(), r.result.efficiency)).collect(),
        loss_curves: named(&|c: &CellResult| c.trace.steps.clone()),
        validation_curves: runs
            .iter()
            .map(|r| {
                let v = r.result.trace.epochs.iter().filter_map(|e| e.val_loss.map(|l| (e.epoch, l))).collect();
                (r.name.to_string(), v)
            })
            .collect(),
        snapshots: runs.iter().map(|r| (r.name.to_string(), r.result.trace.snapshots.clone())).collect(),
    })
}

/// File name and contents of every table derived from `report`.
pub fn report_tables(report: &ExperimentReport) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    let labelled: Vec<(&str, String, &CellResult)> =
        report.ok_cells().map(|(k, r)| (k.dataset.as_str(), k.label(), r)).collect();

    files.push((
        "metrics.tsv".to_string(),
        metrics_table_tsv(labelled.iter().map(|(_, l, r)| (l.as_str(), &r.metrics))),
    ));

    let mut cells = String::from("model\tdataset\tscenario\tscale\tseed\tstatus\tnotes\n");
    for c in &report.cells {
        let status = c.error().map_or("ok".to_string(), |e| format!("failed: {}", e.replace(['\t', '\n'], " ")));
        let _ = writeln!(
            cells,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            c.key.backbone.model_name(),
            c.key.dataset,
            c.key.scenario.as_str(),
            c.key.scale.map_or("-".to_string(), |n| n.to_string()),
            c.key.seed,
            status,
            c.notes.join("; ")
        );
    }
    files.push(("cells.tsv".to_string(), cells));

    if let Some(summary) = seed_summary(report) {
        files.push(("summary.tsv".to_string(), summary));
    }

    let mut hist = String::from("model\tbin\tlo\thi\tcount\n");
    for (_, label, r) in &labelled {
        let scores: Vec<f64> = r.scores.iter().map(|p| p.score).collect();
        for (i, c) in histogram(&scores, HISTOGRAM_BINS).iter().enumerate() {
            let lo = i as f64 / HISTOGRAM_BINS as f64;
            let hi = (i + 1) as f64 / HISTOGRAM_BINS as f64;
            let _ = writeln!(hist, "{label}\t{i}\t{lo}\t{hi}\t{c}");
        }
    }
    files.push(("histograms.tsv".to_string(), hist));

    let mut by_dataset: BTreeMap<&str, Vec<NamedRun<'_>>> = BTreeMap::new();
    for (dataset, label, r) in &labelled {
        by_dataset.entry(dataset).or_default().push(NamedRun { name: label, result: r });
    }

    let mut loss = String::from("model\tstep\tsplit\tloss\tseconds\n");
    let mut eff = String::from("model\tseconds\tparams\tcheckpoint_bytes\n");
    let mut snaps = String::from("model\tepoch\tseconds\taccuracy\trecall\n");
    for (dataset, runs) in &by_dataset {
        let bundle = compare_runs(runs, None)?;
        for (name, steps) in &bundle.loss_curves {
            for s in steps {
                let _ = writeln!(loss, "{name}\t{}\ttrain\t{}\t{}", s.step, s.loss, s.seconds);
            }
        }
        for (name, epochs) in &bundle.validation_curves {
            let run = runs.iter().find(|r| r.name == name).expect("same runs");
            for (epoch, v) in epochs {
                let step = run
                    .result
                    .trace
                    .steps
                    .iter()
                    .filter(|s| s.epoch == *epoch)
                    .map(|s| s.step)
                    .max()
                    .unwrap_or(0);
                let secs = run.result.trace.epochs[epoch - 1].seconds;
                let _ = writeln!(loss, "{name}\t{step}\tval\t{v}\t{secs}");
            }
        }
        for (name, e) in &bundle.efficiency {
            let _ = writeln!(eff, "{name}\t{}\t{}\t{}", e.seconds, e.param_count, e.checkpoint_bytes);
        }
        for (name, series) in &bundle.snapshots {
            for s in series {
                let _ = writeln!(snaps, "{name}\t{}\t{}\t{}\t{}", s.epoch, s.seconds, s.accuracy, s.recall);
            }
        }
        if runs.len() >= 2 {
            files.push((format!("ttest_{dataset}.tsv"), bundle.ttest.to_tsv()));
            files.push((format!("ttest_{dataset}.txt"), bundle.ttest.render()));
        }
    }
    files.push(("loss_curves.tsv".to_string(), loss));
    files.push(("efficiency.tsv".to_string(), eff));
    files.push(("accuracy_recall.tsv".to_string(), snaps));
    Ok(files)
}

/// Writes [`report_tables`] into `dir`; returns the written paths.
pub fn write_report_tables(report: &ExperimentReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut written = Vec::new();
    for (name, contents) in report_tables(report)? {
        let path = dir.join(name);
        write_file(&path, contents)?;
        written.push(path);
    }
    Ok(written)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

// mean ± sample std over seeds, for plans with more than one seed
fn seed_summary(report: &ExperimentReport) -> Option<String> {
    let mut groups: BTreeMap<(BackboneName, &str, Scenario, Option<usize>), Vec<&MetricsReport>> = BTreeMap::new();
    for (k, r) in report.ok_cells() {
        groups
            .entry((k.backbone, k.dataset.as_str(), k.scenario, k.scale))
            .or_default()
            .push(&r.metrics);
    }
    if groups.values().all(|g| g.len() < 2) {
        return None;
    }
    let mut out = String::from("model\tdataset\tscenario\tscale\tseeds\tauc\tauc_std\taccuracy\taccuracy_std\tprecision\tprecision_std\trecall\trecall_std\tf1\tf1_std\n");
    for ((b, d, s, n), ms) in groups {
        let _ = write!(
            out,
            "{}\t{d}\t{}\t{}\t{}",
            b.model_name(),
            s.as_str(),
            n.map_or("-".to_string(), |n| n.to_string()),
            ms.len()
        );
        let cols: [fn(&MetricsReport) -> f64; 5] = [
            |m| m.auc.value,
            |m| m.accuracy.value,
            |m| m.precision.value,
            |m| m.recall.value,
            |m| m.f1.value,
        ];
        for col in cols {
            let (mean, std) = mean_std(&ms.iter().map(|m| col(m)).collect::<Vec<_>>());
            let _ = write!(out, "\t{mean}\t{std}");
        }
        out.push('\n');
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::Signal;

    fn toy_plan(scenario: Scenario) -> ExperimentPlan {
        let text = r#"
            backbones = ["toy", "scratch"]
            embedding_dim = 8
            [[datasets]]
            name = "a"
            synthetic = { records = 120, seed = 1 }
            [[datasets]]
            name = "b"
            synthetic = { records = 100, seed = 2, signal = "message" }
            [train]
            epochs = 2
            [head]
            num_filters = 4
            hidden_dim = 4
            fusion_dim = 4
        "#;
        let mut plan = ExperimentPlan::from_toml(text, ".").unwrap();
        plan.scenario = scenario;
        if scenario == Scenario::FewShot {
            plan.scales = vec![0, 10];
        }
        plan
    }

    #[test]
    fn grid_has_one_cell_per_combination() {
        let plan = toy_plan(Scenario::Full);
        assert_eq!(plan.grid().unwrap().len(), 4);
        let mut p = toy_plan(Scenario::FewShot);
        p.seeds = vec![0, 1, 2];
        assert_eq!(p.grid().unwrap().len(), 2 * 2 * 2 * 3);
    }

    #[test]
    fn plan_rejects_bad_fields() {
        let base = "[[datasets]]\nname = \"a\"\nsynthetic = { records = 10 }\n";
        let err = ExperimentPlan::from_toml(&format!("backbones = [\"bert\"]\n{base}"), ".").unwrap_err();
        assert!(err.to_string().contains("codebert"), "{err}");
        let err = ExperimentPlan::from_toml(&format!("backbones = [\"toy\"]\nscales = [10]\n{base}"), ".").unwrap_err();
        assert!(err.to_string().contains("scales"), "{err}");
        let err = ExperimentPlan::from_toml(&format!("backbones = []\n{base}"), ".").unwrap_err();
        assert!(err.to_string().contains("backbones"), "{err}");
        let err = ExperimentPlan::from_toml("backbones = [\"toy\"]\ndatasets = []\n", ".").unwrap_err();
        assert!(err.to_string().contains("datasets"), "{err}");
        let err = ExperimentPlan::from_toml(&format!("backbones = [\"toy\"]\nbogus = 1\n{base}"), ".").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn plan_round_trips_through_toml() {
        let plan = toy_plan(Scenario::Full);
        let again = ExperimentPlan::from_toml(&plan.to_toml(), ".").unwrap();
        assert_eq!(plan, again);
        assert_eq!(plan.plan_hash(), again.plan_hash());
    }

    #[test]
    fn full_run_reports_every_cell() {
        let report = run_full(&toy_plan(Scenario::Full), &RunContext::in_memory()).unwrap();
        assert_eq!(report.cells.len(), 4);
        assert_eq!(report.ok_cells().count(), 4);
        for (_, r) in report.ok_cells() {
            assert_eq!(r.trace.epochs.len(), 2);
            assert!(r.trace.best_epoch.is_some());
        }
    }

    #[test]
    fn pretrained_without_loader_fails_but_is_recorded() {
        let mut plan = toy_plan(Scenario::Full);
        plan.backbones = vec!["codebert".into(), "toy".into()];
        let report = run_plan(&plan, &RunContext::in_memory()).unwrap();
        assert_eq!(report.cells.len(), 4);
        assert_eq!(report.failed_cells().count(), 2);
        assert!(report.failed_cells().all(|c| c.key.backbone == BackboneName::Codebert));
    }

    #[test]
    fn ablation_removes_branch_structurally() {
        let report = run_ablation(&toy_plan(Scenario::Full), Drop::Msg, &RunContext::in_memory()).unwrap();
        for c in &report.cells {
            let r = c.resolved.as_ref().unwrap();
            assert_eq!(r.head.branches, InputMask::CodeOnly);
            assert_eq!(r.head.fused_dim(), r.head.num_filters);
        }
        let report = run_ablation(&toy_plan(Scenario::Full), Drop::Code, &RunContext::in_memory()).unwrap();
        let r = report.cells[0].resolved.as_ref().unwrap();
        assert_eq!(r.head.fused_dim(), r.head.hidden_dim);
    }

    #[test]
    fn few_shot_zero_is_untrained_and_small_scales_skip_validation() {
        let report = run_few_shot(&toy_plan(Scenario::FewShot), &RunContext::in_memory()).unwrap();
        for c in &report.cells {
            let r = c.result().unwrap();
            match c.key.scale {
                Some(0) => {
                    assert!(r.trace.steps.is_empty());
                    assert_eq!(r.fit_size, 0);
                }
                Some(10) => {
                    assert_eq!(r.fit_size, 10);
                    assert_eq!(r.validation_size, 0);
                    assert!(c.notes.iter().any(|n| n.contains("without validation")));
                }
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn test_split_is_shared_across_scenarios() {
        let ctx = RunContext::in_memory();
        let a = run_full(&toy_plan(Scenario::Full), &ctx).unwrap();
        let b = run_few_shot(&toy_plan(Scenario::FewShot), &ctx).unwrap();
        let hash = |r: &ExperimentReport, d: &str| {
            r.cells.iter().find(|c| c.key.dataset == d).unwrap().test_hash.clone().unwrap()
        };
        assert_eq!(hash(&a, "a"), hash(&b, "a"));
        assert_ne!(hash(&a, "a"), hash(&a, "b"));
    }

    #[test]
    fn rerun_resumes_completed_cells() {
        let dir = tempfile::tempdir().unwrap();
        let plan = toy_plan(Scenario::Full);
        let ctx = RunContext::in_memory().with_out(dir.path());
        let first = run_plan(&plan, &ctx).unwrap();
        assert!(first.cells.iter().all(|c| !c.resumed));
        let root = dir.path().join(plan.plan_hash());
        assert!(root.join(REPORT_FILE).is_file());
        for c in &first.cells {
            assert!(root.join(c.key.dir()).join(CHECKPOINT_FILE).is_file());
        }
        let second = run_plan(&plan, &ctx).unwrap();
        assert!(second.cells.iter().all(|c| c.resumed));
        assert_eq!(
            first.cells.iter().map(|c| c.result().unwrap().scores.clone()).collect::<Vec<_>>(),
            second.cells.iter().map(|c| c.result().unwrap().scores.clone()).collect::<Vec<_>>()
        );
        assert_eq!(load_report(&root).unwrap().cells.len(), 4);
    }

    #[test]
    fn compare_rejects_different_test_sets() {
        let report = run_full(&toy_plan(Scenario::Full), &RunContext::in_memory()).unwrap();
        let runs: Vec<NamedRun<'_>> = report
            .cells
            .iter()
            .map(|c| NamedRun { name: &c.key.dataset, result: c.result().unwrap() })
            .collect();
        let a = runs.iter().find(|r| r.name == "a").unwrap();
        let b = runs.iter().find(|r| r.name == "b").unwrap();
        assert!(matches!(compare_runs(&[*a, *b], None), Err(ExperimentError::Mismatch(_))));
        let bundle = compare_runs(&[*a, *a], None).unwrap();
        let cell = bundle.ttest.cells[0][1].unwrap();
        assert_eq!((cell.t, cell.p), (0.0, 1.0));
    }

    #[test]
    fn tables_cover_every_run() {
        let mut plan = toy_plan(Scenario::Full);
        plan.seeds = vec![0, 1];
        let report = run_full(&plan, &RunContext::in_memory()).unwrap();
        let files: BTreeMap<String, String> = report_tables(&report).unwrap().into_iter().collect();
        assert_eq!(files["metrics.tsv"].lines().count(), 1 + 8);
        assert!(files.contains_key("summary.tsv"));
        assert!(files.contains_key("ttest_a.txt"));
        let hist = &files["histograms.tsv"];
        let per_model: usize = hist.lines().skip(1).filter(|l| l.starts_with("ToyJIT/a/s=0")).map(|l| l.rsplit('\t').next().unwrap().parse::<usize>().unwrap()).sum();
        assert_eq!(per_model, report.cells[0].result().unwrap().scores.len());
    }

    #[test]
    fn histogram_edges() {
        assert_eq!(histogram(&[0.0, 0.05, 0.999, 1.0], 20), {
            let mut v = vec![0; 20];
            v[0] = 1;
            v[1] = 1;
            v[19] = 2;
            v
        });
    }

    #[test]
    fn synthetic_signal_parses() {
        let plan = toy_plan(Scenario::Full);
        assert_eq!(plan.datasets[1].synthetic.unwrap().signal, Signal::Message);
    }
}
