//! Run configuration: a flat key-value file with section headers, parsed as a
//! TOML subset. The keys are listed in the README.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::data::{DEFAULT_HIGH, DEFAULT_LOW};
use crate::diagnostics::DEFAULT_PERIOD;
use crate::models::{default_dropout, ModelKind, SearchConfig, TrainConfig};
use crate::split::{WindowConfig, HORIZON, SEQ_LEN};

use super::{ErrorKind, PipelineError, Stage};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    run: RawRun,
    #[serde(default)]
    data: BTreeMap<String, String>,
    #[serde(default)]
    split: RawSplit,
    #[serde(default)]
    window: RawWindow,
    #[serde(default)]
    dropout: BTreeMap<String, f64>,
    #[serde(default)]
    train: RawTrain,
    #[serde(default)]
    sarima: RawSarima,
    #[serde(default)]
    diagnostics: RawDiagnostics,
    #[serde(default)]
    ingest: RawIngest,
    #[serde(default)]
    dm: RawDm,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    #[serde(default = "default_seed")]
    seed: u64,
    #[serde(default = "default_output")]
    output_dir: String,
    models: Option<Vec<String>>,
}

impl Default for RawRun {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            output_dir: default_output(),
            models: None,
        }
    }
}

fn default_seed() -> u64 {
    42
}

fn default_output() -> String {
    "results".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSplit {
    train: f64,
    val: f64,
    test: f64,
}

impl Default for RawSplit {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWindow {
    seq_len: Option<usize>,
    horizon: Option<usize>,
    stride: Option<usize>,
    eval_stride: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    lr: Option<f64>,
    batch_size: Option<usize>,
    max_epochs: Option<usize>,
    plateau_factor: Option<f64>,
    plateau_patience: Option<usize>,
    early_stop_patience: Option<usize>,
    min_delta: Option<f64>,
    huber_delta: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSarima {
    period: Option<usize>,
    stepwise: Option<bool>,
    max_iter: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDiagnostics {
    period: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIngest {
    low: Option<f64>,
    high: Option<f64>,
    interpolate_zeros: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDm {
    pairs: Option<Vec<String>>,
}

/// A DM comparison: positive statistics favour `comparison`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DmPair {
    pub comparison: ModelKind,
    pub reference: ModelKind,
}

/// Fully resolved run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Commodity name to input file, ordered by name.
    pub data: BTreeMap<String, PathBuf>,
    pub fractions: [f64; 3],
    pub window: WindowConfig,
    /// Stride between evaluated test windows.
    pub eval_stride: usize,
    /// Per-commodity dropout overrides; others use [`default_dropout`].
    pub dropout: BTreeMap<String, f64>,
    pub models: Vec<ModelKind>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    pub sarima: SearchConfig,
    pub diagnostics_period: usize,
    pub low: f64,
    pub high: f64,
    pub interpolate_zeros: bool,
    pub dm_pairs: Vec<DmPair>,
}

fn config_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::new(Stage::Config, ErrorKind::Config, msg)
}

impl RunConfig {
    /// Reads and validates a configuration file. Relative paths resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let models = match raw.run.models {
            None => ModelKind::ALL.to_vec(),
            Some(names) => names
                .iter()
                .map(|n| n.parse::<ModelKind>().map_err(|e| config_err(e.to_string())))
                .collect::<Result<Vec<_>, _>>()?,
        };
        let dm_pairs = match raw.dm.pairs {
            None => vec![DmPair {
                comparison: ModelKind::T2vTransformer,
                reference: ModelKind::Transformer,
            }],
            Some(pairs) => pairs.iter().map(|p| parse_pair(p)).collect::<Result<Vec<_>, _>>()?,
        };
        let mut train = TrainConfig {
            seed: raw.run.seed,
            ..TrainConfig::default()
        };
        let t = raw.train;
        macro_rules! apply {
            ($($f:ident),*) => { $(if let Some(v) = t.$f { train.$f = v; })* };
        }
        apply!(lr, batch_size, max_epochs, plateau_factor, plateau_patience, early_stop_patience, min_delta, huber_delta);
        let mut sarima = SearchConfig::default();
        if let Some(m) = raw.sarima.period {
            sarima.m = m;
        }
        if let Some(s) = raw.sarima.stepwise {
            sarima.stepwise = s;
        }
        if let Some(i) = raw.sarima.max_iter {
            sarima.max_iter = i;
        }
        let defaults = WindowConfig::default();
        let cfg = RunConfig {
            data: raw.data.iter().map(|(k, v)| (k.clone(), resolve(v))).collect(),
            fractions: [raw.split.train, raw.split.val, raw.split.test],
            window: WindowConfig {
                seq_len: raw.window.seq_len.unwrap_or(SEQ_LEN),
                horizon: raw.window.horizon.unwrap_or(HORIZON),
                stride: raw.window.stride.unwrap_or(defaults.stride),
            },
            eval_stride: raw.window.eval_stride.unwrap_or(1),
            dropout: raw.dropout,
            models,
            seed: raw.run.seed,
            output_dir: resolve(&raw.run.output_dir),
            train,
            sarima,
            diagnostics_period: raw.diagnostics.period.unwrap_or(DEFAULT_PERIOD),
            low: raw.ingest.low.unwrap_or(DEFAULT_LOW),
            high: raw.ingest.high.unwrap_or(DEFAULT_HIGH),
            interpolate_zeros: raw.ingest.interpolate_zeros.unwrap_or(false),
            dm_pairs,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Structural checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.data.is_empty() {
            return Err(config_err("no commodities in [data]"));
        }
        for name in self.data.keys() {
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(config_err(format!("commodity name `{name}` must be [A-Za-z0-9_-]+")));
            }
        }
        if self.models.is_empty() {
            return Err(config_err("model list is empty"));
        }
        let mut seen = self.models.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.models.len() {
            return Err(config_err("model list contains duplicates"));
        }
        let total: f64 = self.fractions.iter().sum();
        if self.fractions.iter().any(|f| !(*f > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(config_err(format!("split fractions {:?} must be positive and sum to 1", self.fractions)));
        }
        let w = self.window;
        if w.seq_len == 0 || w.horizon == 0 || w.stride == 0 || self.eval_stride == 0 {
            return Err(config_err("window lengths and strides must be positive"));
        }
        for (name, p) in &self.dropout {
            if !self.data.contains_key(name) {
                return Err(config_err(format!("dropout override for unknown commodity `{name}`")));
            }
            if !(0.0..1.0).contains(p) {
                return Err(config_err(format!("dropout {p} for `{name}` outside [0, 1)")));
            }
        }
        self.train_config("").map_err(|e| config_err(e.to_string()))?;
        if !(self.low < self.high) {
            return Err(config_err(format!("validity band [{}, {}] is empty", self.low, self.high)));
        }
        if self.diagnostics_period < 2 || self.sarima.m < 2 {
            return Err(config_err("seasonal periods must be at least 2"));
        }
        for p in &self.dm_pairs {
            if p.comparison == p.reference {
                return Err(config_err(format!("DM pair compares {} with itself", p.comparison)));
            }
        }
        Ok(())
    }

    /// Errors unless every input file exists.
    pub fn check_inputs(&self) -> Result<(), PipelineError> {
        for (name, path) in &self.data {
            if !path.is_file() {
                return Err(config_err(format!("input for `{name}` not found: {}", path.display())));
            }
        }
        Ok(())
    }

    pub fn dropout_for(&self, commodity: &str) -> f64 {
        self.dropout
            .get(commodity)
            .copied()
            .unwrap_or_else(|| default_dropout(commodity))
    }

    pub fn train_config(&self, commodity: &str) -> Result<TrainConfig, crate::models::ModelError> {
        let cfg = TrainConfig {
            dropout: self.dropout_for(commodity),
            ..self.train.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// DM pairs whose two models are both selected.
    pub fn active_dm_pairs(&self) -> Vec<DmPair> {
        self.dm_pairs
            .iter()
            .copied()
            .filter(|p| self.models.contains(&p.comparison) && self.models.contains(&p.reference))
            .collect()
    }

    /// Settings that determine results, one `key = value` per line. Paths and
    /// the output directory are excluded; input contents enter the hash
    /// through [`RunConfig::hash`].
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let t = &self.train;
        let _ = writeln!(s, "seed = {}", self.seed);
        let models: Vec<_> = self.models.iter().map(|m| m.as_str()).collect();
        let _ = writeln!(s, "models = {}", models.join(","));
        let _ = writeln!(s, "fractions = {:?}", self.fractions);
        let _ = writeln!(s, "window = {:?} eval_stride {}", self.window, self.eval_stride);
        for c in self.data.keys() {
            let _ = writeln!(s, "dropout.{c} = {:?}", self.dropout_for(c));
        }
        let _ = writeln!(
            s,
            "train = lr {:?} batch {} epochs {} plateau {:?}/{} early {} min_delta {:?} huber {:?}",
            t.lr,
            t.batch_size,
            t.max_epochs,
            t.plateau_factor,
            t.plateau_patience,
            t.early_stop_patience,
            t.min_delta,
            t.huber_delta
        );
        let _ = writeln!(s, "sarima = {:?}", self.sarima);
        let _ = writeln!(s, "diagnostics.period = {}", self.diagnostics_period);
        let _ = writeln!(
            s,
            "ingest = low {:?} high {:?} interpolate {}",
            self.low, self.high, self.interpolate_zeros
        );
        for p in &self.dm_pairs {
            let _ = writeln!(s, "dm = {}:{}", p.comparison, p.reference);
        }
        s
    }

    /// First 16 hex digits of SHA-256 over [`RunConfig::canonical`] and the
    /// bytes of every input file.
    pub fn hash(&self) -> Result<String, PipelineError> {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        for (name, path) in &self.data {
            let bytes = std::fs::read(path).map_err(|e| {
                PipelineError::new(
                    Stage::Config,
                    ErrorKind::Data,
                    format!("cannot read input for `{name}` ({}): {e}", path.display()),
                )
            })?;
            h.update(name.as_bytes());
            h.update(Sha256::digest(&bytes));
        }
        Ok(hex::encode(&h.finalize()[..8]))
    }
}

fn parse_pair(s: &str) -> Result<DmPair, PipelineError> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| config_err(format!("DM pair `{s}` must be `comparison:reference`")))?;
    let kind = |x: &str| x.trim().parse::<ModelKind>().map_err(|e| config_err(e.to_string()));
    Ok(DmPair {
        comparison: kind(a)?,
        reference: kind(b)?,
    })
}
