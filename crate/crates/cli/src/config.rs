//! Flat `key = value` run configuration.
//!
//! Values come from defaults, then an optional config file or manifest,
//! then `--key value` flags, later sources winning. Every key is listed in
//! [`KEYS`]; anything else is rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mlada::analysis::{FeatureSpace, LabelMode};
use mlada::experiments::BlobsTask;
use mlada::trainer::{MarginMode, ReversalSchedule, TrainConfig};

use crate::CliError;

/// Every accepted key, in manifest order.
pub const KEYS: &[&str] = &[
    // training
    "gamma",
    "lambda",
    "alpha0",
    "mu",
    "batch_size",
    "momentum",
    "base_lr",
    "head_lr_multiplier",
    "max_iters",
    "seed",
    "reversal",
    "reversal_scale",
    "margin_mode",
    "enable_domain",
    "enable_triplet",
    "enable_entropy",
    "extractor",
    "classifier_hidden",
    "discriminator_hidden",
    "metric_hidden",
    "metric_dim",
    // generated data
    "classes",
    "n_per_class",
    "dim",
    "rotation_deg",
    "scale",
    "translation",
    "noise_sigma",
    "downsample",
    // file data
    "source_csv",
    "target_csv",
    "header",
    "target_labeled",
    // run options
    "out_dir",
    "eval_every",
    "params",
    "intensities",
    "space",
    "label_mode",
    "grid",
    "seeds",
    "margins",
];

const GENERATION_KEYS: &[&str] = &[
    "classes",
    "n_per_class",
    "dim",
    "rotation_deg",
    "scale",
    "translation",
    "noise_sigma",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    Loss,
    Margin,
}

/// Where the source and target data come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Generated(BlobsTask),
    Files {
        source: PathBuf,
        target: PathBuf,
        header: bool,
        target_labeled: bool,
        downsample: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub task: BlobsTask,
    pub rotation_deg: f64,
    /// Ignored by the ramp schedule.
    pub reversal_scale: f64,
    pub reversal_ramp: bool,
    pub source_csv: Option<PathBuf>,
    pub target_csv: Option<PathBuf>,
    pub header: bool,
    pub target_labeled: bool,
    pub out_dir: PathBuf,
    pub eval_every: usize,
    pub params: Option<PathBuf>,
    pub intensities: Vec<f64>,
    pub space: FeatureSpace,
    pub label_mode: LabelMode,
    pub grid: Grid,
    pub seeds: Vec<u64>,
    pub margins: Vec<f64>,
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let task = BlobsTask::default();
        RunConfig {
            train: TrainConfig::default(),
            rotation_deg: task.shift.rotation.to_degrees().round(),
            task,
            reversal_scale: 1.0,
            reversal_ramp: false,
            source_csv: None,
            target_csv: None,
            header: false,
            target_labeled: false,
            out_dir: PathBuf::from("out"),
            eval_every: 100,
            params: None,
            intensities: vec![0.0, 3.5, 5.0],
            space: FeatureSpace::Feature,
            label_mode: LabelMode::Pseudo,
            grid: Grid::Loss,
            seeds: vec![0, 1, 2, 3, 4],
            margins: vec![1.0, 5.0, 10.0, 20.0],
            explicit: BTreeSet::new(),
        }
    }
}

fn bad(key: &str, value: &str, expected: &str) -> CliError {
    CliError::Usage(format!("{}: expected {}, got {:?}", key, expected, value))
}

fn num<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| bad(key, value, expected))
}

fn real(key: &str, value: &str) -> Result<f64, CliError> {
    let v: f64 = num(key, value, "a number")?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(bad(key, value, "a finite number"))
    }
}

fn flag(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn list<T>(
    key: &str,
    value: &str,
    item: impl Fn(&str, &str) -> Result<T, CliError>,
) -> Result<Vec<T>, CliError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|s| item(key, s.trim())).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn join_reals(items: &[f64]) -> String {
    items
        .iter()
        .map(|v| format!("{:?}", v))
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        match key {
            "gamma" => self.train.gamma = real(key, value)?,
            "lambda" => self.train.lambda = real(key, value)?,
            "alpha0" => self.train.alpha0 = real(key, value)?,
            "mu" => {
                self.train.mu = match value {
                    "auto" => None,
                    v => Some(real(key, v)?),
                }
            }
            "batch_size" => self.train.batch_size = num(key, value, "a positive integer")?,
            "momentum" => self.train.momentum = real(key, value)?,
            "base_lr" => self.train.base_lr = real(key, value)?,
            "head_lr_multiplier" => self.train.head_lr_multiplier = real(key, value)?,
            "max_iters" => self.train.max_iters = num(key, value, "a non-negative integer")?,
            "seed" => self.train.seed = num(key, value, "a non-negative integer")?,
            "reversal" => {
                self.reversal_ramp = match value {
                    "constant" => false,
                    "ramp" => true,
                    _ => return Err(bad(key, value, "constant or ramp")),
                };
                self.sync_reversal();
            }
            "reversal_scale" => {
                self.reversal_scale = real(key, value)?;
                self.sync_reversal();
            }
            "margin_mode" => {
                self.train.margin_mode = match value {
                    "per_group" => MarginMode::PerGroup,
                    "batch_mean" => MarginMode::BatchMean,
                    "constant" => MarginMode::Constant,
                    _ => return Err(bad(key, value, "per_group, batch_mean or constant")),
                }
            }
            "enable_domain" => self.train.enable_domain = flag(key, value)?,
            "enable_triplet" => self.train.enable_triplet = flag(key, value)?,
            "enable_entropy" => self.train.enable_entropy = flag(key, value)?,
            "extractor" => {
                self.train.arch.extractor = list(key, value, |k, v| num(k, v, "a list of widths"))?
            }
            "classifier_hidden" => {
                self.train.arch.classifier_hidden =
                    list(key, value, |k, v| num(k, v, "a list of widths"))?
            }
            "discriminator_hidden" => {
                self.train.arch.discriminator_hidden =
                    list(key, value, |k, v| num(k, v, "a list of widths"))?
            }
            "metric_hidden" => {
                self.train.arch.metric_hidden =
                    list(key, value, |k, v| num(k, v, "a list of widths"))?
            }
            "metric_dim" => self.train.arch.metric_dim = num(key, value, "a positive integer")?,
            "classes" => self.task.classes = num(key, value, "a positive integer")?,
            "n_per_class" => self.task.n_per_class = num(key, value, "a positive integer")?,
            "dim" => self.task.dim = num(key, value, "a positive integer")?,
            "rotation_deg" => {
                self.rotation_deg = real(key, value)?;
                self.task.shift.rotation = self.rotation_deg.to_radians();
            }
            "scale" => self.task.shift.scale = real(key, value)?,
            "translation" => self.task.shift.translation = list(key, value, real)?,
            "noise_sigma" => self.task.shift.noise_sigma = real(key, value)?,
            "downsample" => self.task.source_divisor = num(key, value, "a positive integer")?,
            "source_csv" => self.source_csv = (!value.is_empty()).then(|| PathBuf::from(value)),
            "target_csv" => self.target_csv = (!value.is_empty()).then(|| PathBuf::from(value)),
            "header" => self.header = flag(key, value)?,
            "target_labeled" => self.target_labeled = flag(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "eval_every" => self.eval_every = num(key, value, "a non-negative integer")?,
            "params" => self.params = (!value.is_empty()).then(|| PathBuf::from(value)),
            "intensities" => self.intensities = list(key, value, real)?,
            "space" => {
                self.space = match value {
                    "feature" => FeatureSpace::Feature,
                    "metric" => FeatureSpace::Metric,
                    _ => return Err(bad(key, value, "feature or metric")),
                }
            }
            "label_mode" => {
                self.label_mode = match value {
                    "pseudo" => LabelMode::Pseudo,
                    "true" => LabelMode::True,
                    _ => return Err(bad(key, value, "pseudo or true")),
                }
            }
            "grid" => {
                self.grid = match value {
                    "loss" => Grid::Loss,
                    "margin" => Grid::Margin,
                    _ => return Err(bad(key, value, "loss or margin")),
                }
            }
            "seeds" => self.seeds = list(key, value, |k, v| num(k, v, "a list of seeds"))?,
            "margins" => self.margins = list(key, value, real)?,
            _ => return Err(CliError::Usage(format!("unknown key {:?}", key))),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    fn sync_reversal(&mut self) {
        self.train.reversal = if self.reversal_ramp {
            ReversalSchedule::DannRamp
        } else {
            ReversalSchedule::Constant(self.reversal_scale)
        };
    }

    /// Current textual value of `key`; parsing it back reproduces the
    /// value exactly.
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let s = |v: &f64| format!("{:?}", v);
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or(String::new(), |p| p.display().to_string())
        };
        Some(match key {
            "gamma" => s(&t.gamma),
            "lambda" => s(&t.lambda),
            "alpha0" => s(&t.alpha0),
            "mu" => t.mu.map_or("auto".into(), |m| s(&m)),
            "batch_size" => t.batch_size.to_string(),
            "momentum" => s(&t.momentum),
            "base_lr" => s(&t.base_lr),
            "head_lr_multiplier" => s(&t.head_lr_multiplier),
            "max_iters" => t.max_iters.to_string(),
            "seed" => t.seed.to_string(),
            "reversal" => if self.reversal_ramp {
                "ramp"
            } else {
                "constant"
            }
            .into(),
            "reversal_scale" => s(&self.reversal_scale),
            "margin_mode" => match t.margin_mode {
                MarginMode::PerGroup => "per_group".into(),
                MarginMode::BatchMean => "batch_mean".into(),
                MarginMode::Constant => "constant".into(),
            },
            "enable_domain" => t.enable_domain.to_string(),
            "enable_triplet" => t.enable_triplet.to_string(),
            "enable_entropy" => t.enable_entropy.to_string(),
            "extractor" => join(&t.arch.extractor),
            "classifier_hidden" => join(&t.arch.classifier_hidden),
            "discriminator_hidden" => join(&t.arch.discriminator_hidden),
            "metric_hidden" => join(&t.arch.metric_hidden),
            "metric_dim" => t.arch.metric_dim.to_string(),
            "classes" => self.task.classes.to_string(),
            "n_per_class" => self.task.n_per_class.to_string(),
            "dim" => self.task.dim.to_string(),
            "rotation_deg" => s(&self.rotation_deg),
            "scale" => s(&self.task.shift.scale),
            "translation" => join_reals(&self.task.shift.translation),
            "noise_sigma" => s(&self.task.shift.noise_sigma),
            "downsample" => self.task.source_divisor.to_string(),
            "source_csv" => path(&self.source_csv),
            "target_csv" => path(&self.target_csv),
            "header" => self.header.to_string(),
            "target_labeled" => self.target_labeled.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "eval_every" => self.eval_every.to_string(),
            "params" => path(&self.params),
            "intensities" => join_reals(&self.intensities),
            "space" => match self.space {
                FeatureSpace::Feature => "feature".into(),
                FeatureSpace::Metric => "metric".into(),
            },
            "label_mode" => match self.label_mode {
                LabelMode::Pseudo => "pseudo".into(),
                LabelMode::True => "true".into(),
            },
            "grid" => match self.grid {
                Grid::Loss => "loss".into(),
                Grid::Margin => "margin".into(),
            },
            "seeds" => join(&self.seeds),
            "margins" => join_reals(&self.margins),
            _ => return None,
        })
    }

    /// Every key with its resolved value.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        KEYS.iter()
            .map(|k| (k.to_string(), self.get(k).expect("listed key")))
            .collect()
    }

    /// Applies the lines of a flat config text. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("{}: line {}: expected key = value", origin, n + 1))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| CliError::Usage(format!("{}: line {}: {}", origin, n + 1, e)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config {}: {}", path.display(), e))
        })?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies the `config` object of a manifest written by an earlier run.
    pub fn apply_manifest(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read manifest {}: {}", path.display(), e))
        })?;
        let manifest: crate::Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e)))?;
        // a manifest lists every key; only user-given keys count as explicit
        let explicit = self.explicit.clone();
        for (k, v) in &manifest.config {
            self.set(k, v)?;
        }
        self.explicit = explicit;
        Ok(())
    }

    /// Resolves the data source and checks the combination of keys.
    pub fn data_source(&self) -> Result<DataSource, CliError> {
        match (&self.source_csv, &self.target_csv) {
            (None, None) => Ok(DataSource::Generated(self.task.clone())),
            (Some(source), Some(target)) => {
                if let Some(k) = GENERATION_KEYS.iter().find(|k| self.explicit.contains(**k)) {
                    return Err(CliError::Usage(format!(
                        "{} describes generated data but source_csv/target_csv are set; choose one data source",
                        k
                    )));
                }
                Ok(DataSource::Files {
                    source: source.clone(),
                    target: target.clone(),
                    header: self.header,
                    target_labeled: self.target_labeled,
                    downsample: self.task.source_divisor,
                })
            }
            _ => Err(CliError::Usage(
                "source_csv and target_csv must be given together".into(),
            )),
        }
    }
}

/// Applies `--config`/`--manifest` files and `--key value` flags in
/// order: files first, then flags.
pub fn parse_args(args: &[String]) -> Result<RunConfig, CliError> {
    let mut files = Vec::new();
    let mut flags = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("expected --key, got {:?}", arg)))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Usage(format!("--{} needs a value", key)))?;
                (key.to_string(), v.clone())
            }
        };
        match key.as_str() {
            "config" | "manifest" => files.push((key, value)),
            _ => flags.push((key.replace('-', "_"), value)),
        }
    }
    let mut cfg = RunConfig::default();
    for (kind, path) in files {
        if kind == "config" {
            cfg.apply_file(Path::new(&path))?;
        } else {
            cfg.apply_manifest(Path::new(&path))?;
        }
    }
    for (key, value) in flags {
        cfg.set(&key, &value)?;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_settings() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("", "empty").unwrap();
        let t = &cfg.train;
        assert_eq!(
            (t.gamma, t.lambda, t.alpha0, t.momentum, t.batch_size),
            (0.08, 0.1, 5.0, 0.9, 32)
        );
        assert_eq!((t.base_lr, t.head_lr_multiplier), (0.01, 10.0));
    }

    #[test]
    fn type_errors_name_the_key() {
        let err = RunConfig::default()
            .apply_text("gamma = abc", "f")
            .unwrap_err();
        assert!(err.to_string().contains("gamma"));
        let err = RunConfig::default().set("batch_size", "-3").unwrap_err();
        assert!(err.to_string().contains("batch_size"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::default()
            .apply_text("gama = 0.1", "f")
            .unwrap_err();
        assert!(err.to_string().contains("gama"));
    }

    #[test]
    fn every_key_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "gamma = 0.30000000000000004\nreversal = ramp\ntranslation = 1.5,-2\nmu = 2.5",
            "f",
        )
        .unwrap();
        let mut back = RunConfig::default();
        for (k, v) in cfg.resolved() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back.train, cfg.train);
        assert_eq!(back.resolved(), cfg.resolved());
    }

    #[test]
    fn reversal_scale_survives_either_order() {
        let mut a = RunConfig::default();
        a.apply_text("reversal_scale = 0.5\nreversal = constant", "f")
            .unwrap();
        let mut b = RunConfig::default();
        b.apply_text("reversal = constant\nreversal_scale = 0.5", "f")
            .unwrap();
        assert_eq!(a.train.reversal, ReversalSchedule::Constant(0.5));
        assert_eq!(b.train.reversal, ReversalSchedule::Constant(0.5));
    }

    #[test]
    fn flags_override_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "gamma = 0.5\nseed = 3\n").unwrap();
        let args: Vec<String> = ["--config", path.to_str().unwrap(), "--gamma", "0.2"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let cfg = parse_args(&args).unwrap();
        assert_eq!(cfg.train.gamma, 0.2);
        assert_eq!(cfg.train.seed, 3);
    }

    #[test]
    fn one_data_source() {
        let mut cfg = RunConfig::default();
        cfg.set("source_csv", "a.csv").unwrap();
        assert!(cfg.data_source().is_err());
        cfg.set("target_csv", "b.csv").unwrap();
        assert!(matches!(cfg.data_source(), Ok(DataSource::Files { .. })));
        cfg.set("rotation_deg", "10").unwrap();
        assert!(cfg.data_source().is_err());
    }
}
