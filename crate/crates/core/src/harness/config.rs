//! Experiment configuration, stored as TOML with one table per subsystem.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::FisherMode;
use crate::nn::{Activation, Arch};
use crate::subnet::{LevelSpec, MaskKind};
use crate::sysmodel::{CostConfig, FleetConfig, MarkovConfig};

/// Client training policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Everyone trains the full model.
    Fedavg,
    /// Fixed nested-width submodel at the device cap.
    Heterofl,
    /// Random neurons at the device cap, resampled every round.
    Feddropout,
    /// Rolling window at the device cap.
    Fedrolex,
    /// Adaptive level, nested-width masks.
    Whale,
    WhaleDropout,
    WhaleRolex,
    /// Adaptive level with training efficiency pinned to 1.
    WhaleSeOnly,
    /// Adaptive level with system efficiency pinned to 1.
    WhaleTeOnly,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::Fedavg,
        Strategy::Heterofl,
        Strategy::Feddropout,
        Strategy::Fedrolex,
        Strategy::Whale,
        Strategy::WhaleDropout,
        Strategy::WhaleRolex,
        Strategy::WhaleSeOnly,
        Strategy::WhaleTeOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Fedavg => "fedavg",
            Strategy::Heterofl => "heterofl",
            Strategy::Feddropout => "feddropout",
            Strategy::Fedrolex => "fedrolex",
            Strategy::Whale => "whale",
            Strategy::WhaleDropout => "whale_dropout",
            Strategy::WhaleRolex => "whale_rolex",
            Strategy::WhaleSeOnly => "whale_se_only",
            Strategy::WhaleTeOnly => "whale_te_only",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn mask_kind(self) -> MaskKind {
        match self {
            Strategy::Feddropout | Strategy::WhaleDropout => MaskKind::Dropout,
            Strategy::Fedrolex | Strategy::WhaleRolex => MaskKind::Rolling,
            _ => MaskKind::Width,
        }
    }

    pub fn is_adaptive(self) -> bool {
        matches!(
            self,
            Strategy::Whale
                | Strategy::WhaleDropout
                | Strategy::WhaleRolex
                | Strategy::WhaleSeOnly
                | Strategy::WhaleTeOnly
        )
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: vec![784, 128, 10],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Mnist,
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding the four MNIST IDX files.
    pub mnist_dir: PathBuf,
    pub train_limit: Option<usize>,
    /// Test examples used for per-round evaluation.
    pub test_limit: Option<usize>,
    pub blob_classes: usize,
    pub blob_train_per_class: usize,
    pub blob_test_per_class: usize,
    pub blob_dim: usize,
    pub blob_spread: f64,
    /// Classes per client.
    pub sigma: usize,
    pub batch_size: usize,
    pub reshuffle: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Mnist,
            mnist_dir: PathBuf::from("data/mnist"),
            train_limit: Some(10_000),
            test_limit: None,
            blob_classes: 10,
            blob_train_per_class: 200,
            blob_test_per_class: 100,
            blob_dim: 20,
            blob_spread: 0.5,
            sigma: 2,
            batch_size: 32,
            reshuffle: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TraceConfig {
    Markov(MarkovConfig),
    File { path: PathBuf },
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig::Markov(MarkovConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub learning_rate: f64,
    /// Fraction of clients sampled each round.
    pub participation: f64,
    /// Also evaluate the global model on the training set every round.
    pub eval_train_loss: bool,
    /// Local training drops classes absent from the client's shard from the
    /// softmax. Evaluation always uses every class.
    pub mask_absent_classes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            local_epochs: 1,
            learning_rate: 0.05,
            participation: 1.0,
            eval_train_loss: false,
            mask_absent_classes: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bootstrap {
    /// Train at the device cap until Fisher history exists.
    Cap,
    /// Train at a fixed level (still capped).
    Level(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    /// Use `u_threshold` as given.
    Fixed,
    /// Set the threshold to `calibration_scale ×` the largest utility seen
    /// the first time utilities are available.
    Calibrate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub beta: f64,
    pub round_seconds: f64,
    pub u_threshold: f64,
    pub threshold_mode: ThresholdMode,
    pub calibration_scale: f64,
    pub levels: usize,
    pub shrink: f64,
    /// Fisher smoothing window `D`.
    pub window: usize,
    pub history_capacity: usize,
    pub fisher_mode: FisherMode,
    pub bootstrap: Bootstrap,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            round_seconds: 60.0,
            u_threshold: 30.0,
            threshold_mode: ThresholdMode::Fixed,
            calibration_scale: 1.0,
            levels: 5,
            shrink: 0.5,
            window: 10,
            history_capacity: 10,
            fisher_mode: FisherMode::Sampled,
            bootstrap: Bootstrap::Cap,
        }
    }
}

impl SchedulerConfig {
    pub fn level_spec(&self) -> LevelSpec {
        LevelSpec {
            levels: self.levels,
            shrink: self.shrink,
        }
    }
}

/// Named seeds for every stochastic component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub partition: u64,
    pub batching: u64,
    pub trace: u64,
    pub dropout: u64,
    pub fisher: u64,
    pub participation: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self::from_base(0)
    }
}

impl Seeds {
    /// Distinct seeds derived from one number.
    pub fn from_base(base: u64) -> Self {
        Self {
            init: base,
            data: base,
            partition: base,
            batching: base,
            trace: base,
            dropout: base,
            fisher: base,
            participation: base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub strategy: Strategy,
    pub rounds: usize,
    pub target_accuracy: Option<f64>,
    /// Stop after the first round that reaches `target_accuracy`.
    pub stop_at_target: bool,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub fleet: FleetConfig,
    pub trace: TraceConfig,
    pub cost: CostConfig,
    pub train: TrainConfig,
    pub scheduler: SchedulerConfig,
    pub seeds: Seeds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            strategy: Strategy::Whale,
            rounds: 300,
            target_accuracy: Some(0.85),
            stop_at_target: false,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            fleet: FleetConfig::default(),
            trace: TraceConfig::default(),
            cost: CostConfig::default(),
            train: TrainConfig::default(),
            scheduler: SchedulerConfig::default(),
            seeds: Seeds::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn arch(&self) -> Result<Arch> {
        Arch::new(self.model.widths.clone(), self.model.activation)
    }

    pub fn client_count(&self) -> usize {
        self.fleet.devices_per_tier * 5
    }

    /// Every problem found, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.rounds == 0 {
            errs.push("rounds must be ≥ 1".to_string());
        }
        if let Some(t) = self.target_accuracy {
            if !(0.0..=1.0).contains(&t) {
                errs.push(format!("target_accuracy {t} outside [0, 1]"));
            }
        }
        if self.stop_at_target && self.target_accuracy.is_none() {
            errs.push("stop_at_target needs target_accuracy".into());
        }
        match self.arch() {
            Err(e) => errs.push(e.to_string()),
            Ok(arch) => {
                let (dim, classes) = match self.data.source {
                    DataSource::Mnist => (784, 10),
                    DataSource::Blobs => (self.data.blob_dim, self.data.blob_classes),
                };
                if arch.input_dim() != dim {
                    errs.push(format!(
                        "model input width {} but data dimension {dim}",
                        arch.input_dim()
                    ));
                }
                if arch.class_count() != classes {
                    errs.push(format!(
                        "model output width {} but {classes} classes",
                        arch.class_count()
                    ));
                }
            }
        }
        let d = &self.data;
        if d.batch_size == 0 {
            errs.push("batch_size must be ≥ 1".into());
        }
        if d.source == DataSource::Blobs
            && (d.blob_classes == 0
                || d.blob_train_per_class == 0
                || d.blob_test_per_class == 0
                || d.blob_dim == 0)
        {
            errs.push("blob sizes must be ≥ 1".into());
        }
        if d.sigma == 0 {
            errs.push("sigma must be ≥ 1".into());
        }
        let t = &self.train;
        if t.local_epochs == 0 {
            errs.push("local_epochs must be ≥ 1".into());
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            errs.push(format!("learning_rate {} must be > 0", t.learning_rate));
        }
        if !(t.participation > 0.0 && t.participation <= 1.0) {
            errs.push(format!("participation {} outside (0, 1]", t.participation));
        }
        let s = &self.scheduler;
        if let Err(e) = s.level_spec().validate() {
            errs.push(e.to_string());
        }
        if !(s.beta >= 0.0 && s.beta.is_finite()) {
            errs.push(format!("beta {} must be ≥ 0", s.beta));
        }
        if !(s.round_seconds > 0.0) {
            errs.push(format!("round_seconds {} must be > 0", s.round_seconds));
        }
        if !(s.u_threshold > 0.0) {
            errs.push(format!("u_threshold {} must be > 0", s.u_threshold));
        }
        if !(s.calibration_scale > 0.0) {
            errs.push(format!(
                "calibration_scale {} must be > 0",
                s.calibration_scale
            ));
        }
        if s.window == 0 || s.history_capacity < s.window {
            errs.push(format!(
                "need 1 ≤ window ({}) ≤ history_capacity ({})",
                s.window, s.history_capacity
            ));
        }
        if let Bootstrap::Level(l) = s.bootstrap {
            if l == 0 || l > s.levels {
                errs.push(format!("bootstrap level {l} outside 1..={}", s.levels));
            }
        }
        if let Err(e) = self.fleet.validate(s.levels) {
            errs.push(format!("fleet: {e}"));
        }
        if let TraceConfig::Markov(m) = &self.trace {
            if let Err(e) = m.validate() {
                errs.push(format!("trace: {e}"));
            }
        }
        if !(self.cost.bits_per_param > 0.0) {
            errs.push("bits_per_param must be > 0".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::ConfigParse(msg) => Error::ConfigParse(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        // relative paths in a config resolve against the config's directory
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.data.mnist_dir.is_relative() && !cfg.data.mnist_dir.exists() {
            cfg.data.mnist_dir = base.join(&cfg.data.mnist_dir);
        }
        if let TraceConfig::File { path: p } = &mut cfg.trace {
            if p.is_relative() && !p.exists() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}
