//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments run to the end of the line
//! seed = 1
//! norm.mode = mbn
//! train.lambda_schedule = 0:0.1,0.4:0.5,0.6:0.9
//! ```
//!
//! Unknown keys are rejected. [`RunConfig::resolved`] prints every key in a
//! fixed order with round-trip exact numbers, so feeding it back reproduces
//! the run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{load_csv, load_idx, BlobSpec, Dataset, Split, TrainTest};
use crate::error::{Error, Result};
use crate::norm::NormConfig;
use crate::train::{Arch, Experiment, ForwardScheme, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Blobs,
    Idx,
    Csv,
}

impl DataKind {
    fn as_str(self) -> &'static str {
        match self {
            DataKind::Blobs => "blobs",
            DataKind::Idx => "idx",
            DataKind::Csv => "csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub drift: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub train_csv: PathBuf,
    pub test_csv: PathBuf,
    pub standardize: bool,
    /// Keep only the first `limit` samples of each split (0 keeps all).
    pub limit: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Blobs,
            classes: 10,
            dim: 16,
            separation: 2.0,
            drift: 0.0,
            train_per_class: 400,
            test_per_class: 200,
            train_images: PathBuf::new(),
            train_labels: PathBuf::new(),
            test_images: PathBuf::new(),
            test_labels: PathBuf::new(),
            train_csv: PathBuf::new(),
            test_csv: PathBuf::new(),
            standardize: false,
            limit: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub arch: Arch,
    pub norm: NormConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            data: DataConfig::default(),
            arch: Arch::Mlp {
                hidden: vec![64, 64, 64],
            },
            norm: NormConfig::default(),
            train: TrainConfig {
                batch_size: 8,
                epochs: 5,
                ..TrainConfig::default()
            },
        }
    }
}

/// Every recognised key, in the order [`RunConfig::resolved`] prints them.
pub const KEYS: &[&str] = &[
    "seed",
    "data.kind",
    "data.classes",
    "data.dim",
    "data.separation",
    "data.drift",
    "data.train_per_class",
    "data.test_per_class",
    "data.train_images",
    "data.train_labels",
    "data.test_images",
    "data.test_labels",
    "data.train_csv",
    "data.test_csv",
    "data.standardize",
    "data.limit",
    "model.arch",
    "model.hidden",
    "model.channels",
    "norm.mode",
    "norm.eps",
    "norm.theta",
    "norm.memory",
    "norm.eta",
    "norm.lambda",
    "train.lr",
    "train.momentum",
    "train.weight_decay",
    "train.batch_size",
    "train.epochs",
    "train.lr_drops",
    "train.lambda_schedule",
    "train.brn_r_max",
    "train.brn_d_max",
    "train.brn_ramp",
    "train.scheme",
    "train.drop_last",
];

/// Parses `key = value` lines; later duplicates are an error.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(out)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn pairs(key: &str, v: &str) -> Result<Vec<(f64, f64)>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let (a, b) = s
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("{key}: expected `fraction:value`, got `{s}`")))?;
            Ok((num(key, a.trim())?, num(key, b.trim())?))
        })
        .collect()
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{v}`"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.data;
        let t = &mut self.train;
        let n = &mut self.norm;
        match key {
            "seed" => self.seed = num(key, v)?,
            "data.kind" => {
                d.kind = match v {
                    "blobs" => DataKind::Blobs,
                    "idx" => DataKind::Idx,
                    "csv" => DataKind::Csv,
                    _ => return Err(Error::Config(format!("data.kind: expected blobs, idx or csv, got `{v}`"))),
                }
            }
            "data.classes" => d.classes = num(key, v)?,
            "data.dim" => d.dim = num(key, v)?,
            "data.separation" => d.separation = num(key, v)?,
            "data.drift" => d.drift = num(key, v)?,
            "data.train_per_class" => d.train_per_class = num(key, v)?,
            "data.test_per_class" => d.test_per_class = num(key, v)?,
            "data.train_images" => d.train_images = v.into(),
            "data.train_labels" => d.train_labels = v.into(),
            "data.test_images" => d.test_images = v.into(),
            "data.test_labels" => d.test_labels = v.into(),
            "data.train_csv" => d.train_csv = v.into(),
            "data.test_csv" => d.test_csv = v.into(),
            "data.standardize" => d.standardize = flag(key, v)?,
            "data.limit" => d.limit = num(key, v)?,
            "model.arch" => {
                self.arch = match (v, &self.arch) {
                    ("mlp", Arch::Mlp { .. }) | ("cnn", Arch::Cnn { .. }) => return Ok(()),
                    ("mlp", _) => Arch::Mlp {
                        hidden: vec![64, 64, 64],
                    },
                    ("cnn", _) => Arch::Cnn {
                        channels: vec![8, 8],
                    },
                    _ => return Err(Error::Config(format!("model.arch: expected mlp or cnn, got `{v}`"))),
                }
            }
            "model.hidden" => match &mut self.arch {
                Arch::Mlp { hidden } => *hidden = list(key, v)?,
                Arch::Cnn { .. } => return Err(Error::Config("model.hidden applies to model.arch = mlp".into())),
            },
            "model.channels" => match &mut self.arch {
                Arch::Cnn { channels } => *channels = list(key, v)?,
                Arch::Mlp { .. } => return Err(Error::Config("model.channels applies to model.arch = cnn".into())),
            },
            "norm.mode" => n.mode = v.parse().map_err(|e: Error| Error::Config(format!("norm.mode: {e}")))?,
            "norm.eps" => n.eps = num(key, v)?,
            "norm.theta" => n.theta = num(key, v)?,
            "norm.memory" => n.memory = num(key, v)?,
            "norm.eta" => n.eta = num(key, v)?,
            "norm.lambda" => n.lambda = num(key, v)?,
            "train.lr" => t.lr0 = num(key, v)?,
            "train.momentum" => t.momentum = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.lr_drops" => t.lr_drops = list(key, v)?,
            "train.lambda_schedule" => t.lambda_schedule = pairs(key, v)?,
            "train.brn_r_max" => t.brn_max.0 = num(key, v)?,
            "train.brn_d_max" => t.brn_max.1 = num(key, v)?,
            "train.brn_ramp" => {
                let r: Vec<f64> = list(key, v)?;
                let [a, b] = r[..] else {
                    return Err(Error::Config("train.brn_ramp: expected `start,end`".into()));
                };
                t.brn_ramp = (a, b);
            }
            "train.scheme" => {
                t.scheme = v
                    .parse::<ForwardScheme>()
                    .map_err(|e| Error::Config(format!("train.scheme: {e}")))?
            }
            "train.drop_last" => t.drop_last = flag(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn value(&self, key: &str) -> String {
        let d = &self.data;
        let t = &self.train;
        let n = &self.norm;
        let path = |p: &PathBuf| p.display().to_string();
        match key {
            "seed" => self.seed.to_string(),
            "data.kind" => d.kind.as_str().into(),
            "data.classes" => d.classes.to_string(),
            "data.dim" => d.dim.to_string(),
            "data.separation" => d.separation.to_string(),
            "data.drift" => d.drift.to_string(),
            "data.train_per_class" => d.train_per_class.to_string(),
            "data.test_per_class" => d.test_per_class.to_string(),
            "data.train_images" => path(&d.train_images),
            "data.train_labels" => path(&d.train_labels),
            "data.test_images" => path(&d.test_images),
            "data.test_labels" => path(&d.test_labels),
            "data.train_csv" => path(&d.train_csv),
            "data.test_csv" => path(&d.test_csv),
            "data.standardize" => d.standardize.to_string(),
            "data.limit" => d.limit.to_string(),
            "model.arch" => match self.arch {
                Arch::Mlp { .. } => "mlp".into(),
                Arch::Cnn { .. } => "cnn".into(),
            },
            "model.hidden" => match &self.arch {
                Arch::Mlp { hidden } => join(hidden),
                Arch::Cnn { .. } => String::new(),
            },
            "model.channels" => match &self.arch {
                Arch::Cnn { channels } => join(channels),
                Arch::Mlp { .. } => String::new(),
            },
            "norm.mode" => n.mode.to_string(),
            "norm.eps" => n.eps.to_string(),
            "norm.theta" => n.theta.to_string(),
            "norm.memory" => n.memory.to_string(),
            "norm.eta" => n.eta.to_string(),
            "norm.lambda" => n.lambda.to_string(),
            "train.lr" => t.lr0.to_string(),
            "train.momentum" => t.momentum.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.lr_drops" => join(&t.lr_drops),
            "train.lambda_schedule" => t
                .lambda_schedule
                .iter()
                .map(|(f, l)| format!("{f}:{l}"))
                .collect::<Vec<_>>()
                .join(","),
            "train.brn_r_max" => t.brn_max.0.to_string(),
            "train.brn_d_max" => t.brn_max.1.to_string(),
            "train.brn_ramp" => format!("{},{}", t.brn_ramp.0, t.brn_ramp.1),
            "train.scheme" => t.scheme.to_string(),
            "train.drop_last" => t.drop_last.to_string(),
            _ => unreachable!("every key in KEYS has a value"),
        }
    }

    /// The full effective configuration as config-file text.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            // keys of the other architecture would not parse back
            let v = self.value(key);
            if v.is_empty() && matches!(*key, "model.hidden" | "model.channels") {
                continue;
            }
            s.push_str(key);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            seed: self.seed,
            arch: self.arch.clone(),
            norm: self.norm.clone(),
            train: self.train.clone(),
        }
    }

    /// Loads or generates the train and test splits.
    pub fn load_data(&self) -> Result<TrainTest> {
        let d = &self.data;
        let (train, test) = match d.kind {
            DataKind::Blobs => {
                let spec = BlobSpec {
                    num_classes: d.classes,
                    dim: d.dim,
                    separation: d.separation,
                    drift_per_batch: d.drift,
                };
                (
                    spec.generate(self.seed, Split::Train, d.train_per_class)?,
                    spec.generate(self.seed, Split::Test, d.test_per_class)?,
                )
            }
            DataKind::Idx => {
                let train = load_idx(&d.train_images, &d.train_labels, false)?;
                let mut test = load_idx(&d.test_images, &d.test_labels, false)?;
                test.split = Split::Test;
                (train, test)
            }
            DataKind::Csv => (
                load_csv(&d.train_csv, Split::Train)?,
                load_csv(&d.test_csv, Split::Test)?,
            ),
        };
        let mut train = train.truncate(d.limit)?;
        let mut test = test.truncate(d.limit)?;
        if d.standardize {
            let s = crate::data::Standardizer::fit(&train);
            s.apply(&mut train);
            s.apply(&mut test);
        }
        let classes = train.num_classes.max(test.num_classes);
        let widen = |ds: Dataset| Dataset { num_classes: classes, ..ds };
        Ok(TrainTest {
            train: widen(train),
            test: widen(test),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::NormMode;

    #[test]
    fn parses_comments_and_keys() {
        let cfg = RunConfig::from_text(
            "# run\nseed = 9\nnorm.mode = bn  # baseline\n\ntrain.lambda_schedule = 0:0.2, 0.5:0.7\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.norm.mode, NormMode::Bn);
        assert_eq!(cfg.train.lambda_schedule, vec![(0.0, 0.2), (0.5, 0.7)]);
    }

    #[test]
    fn rejects_bad_input() {
        for text in ["nope = 1", "seed = x", "seed", "seed = 1\nseed = 2", "train.scheme = triple"] {
            assert!(matches!(RunConfig::from_text(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn resolved_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("norm.lambda=0.30000000000000004").unwrap();
        cfg.apply_override("train.lr_drops=").unwrap();
        cfg.apply_override("model.hidden=5,7").unwrap();
        let text = cfg.resolved();
        assert_eq!(RunConfig::from_text(&text).unwrap(), cfg);

        cfg.apply_override("model.arch=cnn").unwrap();
        cfg.apply_override("model.channels=4").unwrap();
        assert_eq!(RunConfig::from_text(&cfg.resolved()).unwrap(), cfg);
    }

    #[test]
    fn every_key_is_settable() {
        let cfg = RunConfig::default();
        for key in KEYS {
            let mut c = cfg.clone();
            let v = c.value(key);
            if v.is_empty() {
                continue;
            }
            c.set(key, &v).unwrap();
            assert_eq!(c, cfg, "{key}");
        }
    }
}
