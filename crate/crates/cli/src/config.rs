//! `section.key = value` run configuration with layered overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use idm_core::data::{ScenarioKind, ScenarioSpec};
use idm_core::model::{DiffusionConfig, ModelKind};
use idm_core::networks::NetworkConfig;
use idm_core::training::TrainConfig;
use sha2::{Digest, Sha256};

/// A configuration problem; the process exits with status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl From<idm_core::Error> for ConfigError {
    fn from(e: idm_core::Error) -> Self {
        ConfigError(e.to_string())
    }
}

type Result<T> = std::result::Result<T, ConfigError>;

/// Raw key/value layers, later layers winning.
#[derive(Clone, Debug, Default)]
pub struct Layers {
    entries: BTreeMap<String, String>,
}

impl Layers {
    pub fn parse_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                ConfigError(format!(
                    "{}:{}: expected `section.key = value`",
                    path.display(),
                    i + 1
                ))
            })?;
            let k = k.trim();
            if !k.contains('.') {
                return Err(ConfigError(format!(
                    "{}:{}: key {k:?} lacks a section prefix",
                    path.display(),
                    i + 1
                )));
            }
            self.entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    /// Parses a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("--set expects key=value, got {pair:?}")))?;
        self.set(k.trim(), v.trim());
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub modes: Option<PathBuf>,
    pub t_p: usize,
    pub t_q: usize,
    pub stride: usize,
    /// Tail fraction of windows held out for evaluation.
    pub holdout: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictConfig {
    pub count: usize,
    pub stochastic: bool,
    /// Agents per sampling batch.
    pub chunk: usize,
}

/// Fully resolved configuration of one run.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub scenario: ScenarioSpec,
    pub network: NetworkConfig,
    pub diffusion: DiffusionConfig,
    pub model: ModelKind,
    pub train: TrainConfig,
    pub predict: PredictConfig,
    /// Mode-recall radius; 0 derives a quarter of the smallest inter-mode distance.
    pub recall_radius: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            data: DataConfig {
                path: None,
                modes: None,
                t_p: 8,
                t_q: 12,
                stride: 1,
                holdout: 0.1,
            },
            scenario: ScenarioSpec::new(ScenarioKind::Crossroad),
            network: NetworkConfig::default(),
            diffusion: DiffusionConfig::default(),
            model: ModelKind::Idm,
            train: TrainConfig::default(),
            predict: PredictConfig {
                count: 20,
                stochastic: false,
                chunk: 64,
            },
            recall_radius: 0.0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| ConfigError(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

impl RunConfig {
    /// Defaults, then `config`, then `IDM_SEED`, then `overrides`.
    pub fn resolve(config: Option<&Path>, overrides: &Layers) -> Result<Self> {
        let mut layers = Layers::default();
        if let Some(path) = config {
            layers.parse_file(path)?;
        }
        if let Ok(seed) = std::env::var("IDM_SEED") {
            layers.set("run.seed", seed);
        }
        layers.entries.extend(overrides.entries.clone());
        Self::from_entries(&layers.entries)
    }

    pub fn from_entries(entries: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        let mut kind_probabilities: Option<Vec<f64>> = None;
        for (key, value) in entries {
            let v = value.as_str();
            match key.as_str() {
                "run.seed" => cfg.seed = parse(key, v)?,
                "run.output_dir" => cfg.output_dir = PathBuf::from(v),
                "data.path" => cfg.data.path = Some(PathBuf::from(v)),
                "data.modes" => cfg.data.modes = Some(PathBuf::from(v)),
                "data.t_p" => cfg.data.t_p = parse(key, v)?,
                "data.t_q" => cfg.data.t_q = parse(key, v)?,
                "data.stride" => cfg.data.stride = parse(key, v)?,
                "data.holdout" => cfg.data.holdout = parse(key, v)?,
                "scenario.kind" => {
                    let kind = ScenarioKind::parse(v)?;
                    cfg.scenario.mode_probabilities = ScenarioSpec::new(kind).mode_probabilities;
                    cfg.scenario.kind = kind;
                }
                "scenario.samples" => cfg.scenario.samples = parse(key, v)?,
                "scenario.sigma" => cfg.scenario.sigma = parse(key, v)?,
                "scenario.speed_min" => cfg.scenario.speed_range.0 = parse(key, v)?,
                "scenario.speed_max" => cfg.scenario.speed_range.1 = parse(key, v)?,
                "scenario.neighbors" => cfg.scenario.neighbor_count = parse(key, v)?,
                "scenario.dt" => cfg.scenario.dt = parse(key, v)?,
                "scenario.probabilities" => {
                    kind_probabilities = Some(
                        v.split(',')
                            .map(|p| parse::<f64>(key, p.trim()))
                            .collect::<Result<_>>()?,
                    )
                }
                "train.model" => cfg.model = ModelKind::parse(v)?,
                "train.batch_size" => cfg.train.batch_size = parse(key, v)?,
                "train.learning_rate" => cfg.train.learning_rate = parse(key, v)?,
                "train.lambda1" => cfg.train.lambda1 = parse(key, v)?,
                "train.lambda2" => cfg.train.lambda2 = parse(key, v)?,
                "train.epochs" => cfg.train.epochs = parse(key, v)?,
                "train.clip_norm" => cfg.train.clip_norm = parse(key, v)?,
                "train.divergence_threshold" => cfg.train.divergence_threshold = parse(key, v)?,
                "train.time_budget_secs" => cfg.train.time_budget_secs = parse(key, v)?,
                "predict.count" => cfg.predict.count = parse(key, v)?,
                "predict.stochastic" => cfg.predict.stochastic = parse_bool(key, v)?,
                "predict.chunk" => cfg.predict.chunk = parse(key, v)?,
                "eval.radius" => cfg.recall_radius = parse(key, v)?,
                k if k.starts_with("network.") || k.starts_with("diffusion.") => {}
                other => return Err(ConfigError(format!("unknown configuration key {other}"))),
            }
        }
        if let Some(p) = kind_probabilities {
            cfg.scenario.mode_probabilities = p;
        }
        cfg.network.apply_kv(entries)?;
        cfg.diffusion.apply_kv(entries)?;
        cfg.scenario.seed = cfg.seed;
        cfg.scenario.t_p = cfg.data.t_p;
        cfg.scenario.t_q = cfg.data.t_q;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.train.validate()?;
        if self.data.stride == 0 {
            return Err(ConfigError("data.stride must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.data.holdout) {
            return Err(ConfigError("data.holdout must be in [0, 1)".into()));
        }
        if self.predict.count == 0 {
            return Err(ConfigError("predict.count must be >= 1".into()));
        }
        if !(self.recall_radius >= 0.0) {
            return Err(ConfigError("eval.radius must be >= 0".into()));
        }
        Ok(())
    }

    pub fn require_data_path(&self) -> Result<&Path> {
        self.data
            .path
            .as_deref()
            .ok_or_else(|| ConfigError("missing required key data.path (dataset CSV)".into()))
    }

    /// Every resolved value as sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        put("run.seed", self.seed.to_string());
        put("run.output_dir", self.output_dir.display().to_string());
        if let Some(p) = &self.data.path {
            put("data.path", p.display().to_string());
        }
        if let Some(p) = &self.data.modes {
            put("data.modes", p.display().to_string());
        }
        put("data.t_p", self.data.t_p.to_string());
        put("data.t_q", self.data.t_q.to_string());
        put("data.stride", self.data.stride.to_string());
        put("data.holdout", format!("{:?}", self.data.holdout));
        put("scenario.kind", self.scenario.kind.name().to_string());
        put("scenario.samples", self.scenario.samples.to_string());
        put("scenario.sigma", format!("{:?}", self.scenario.sigma));
        put(
            "scenario.speed_min",
            format!("{:?}", self.scenario.speed_range.0),
        );
        put(
            "scenario.speed_max",
            format!("{:?}", self.scenario.speed_range.1),
        );
        put(
            "scenario.neighbors",
            self.scenario.neighbor_count.to_string(),
        );
        put("scenario.dt", format!("{:?}", self.scenario.dt));
        put(
            "scenario.probabilities",
            self.scenario
                .mode_probabilities
                .iter()
                .map(|p| format!("{p:?}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        put("train.model", self.model.name().to_string());
        put("train.batch_size", self.train.batch_size.to_string());
        put(
            "train.learning_rate",
            format!("{:?}", self.train.learning_rate),
        );
        put("train.lambda1", format!("{:?}", self.train.lambda1));
        put("train.lambda2", format!("{:?}", self.train.lambda2));
        put("train.epochs", self.train.epochs.to_string());
        put("train.clip_norm", format!("{:?}", self.train.clip_norm));
        put(
            "train.divergence_threshold",
            format!("{:?}", self.train.divergence_threshold),
        );
        put(
            "train.time_budget_secs",
            format!("{:?}", self.train.time_budget_secs),
        );
        put("predict.count", self.predict.count.to_string());
        put("predict.stochastic", self.predict.stochastic.to_string());
        put("predict.chunk", self.predict.chunk.to_string());
        put("eval.radius", format!("{:?}", self.recall_radius));
        for (k, v) in self
            .network
            .to_kv()
            .into_iter()
            .chain(self.diffusion.to_kv())
        {
            put(&k, v);
        }
        kv.into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Writes the resolved configuration next to a run's outputs.
    pub fn write_provenance(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("resolved_config.txt"), self.to_text())
    }
}
