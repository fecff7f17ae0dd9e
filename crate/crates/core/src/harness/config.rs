//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::covert::PairPolicy;
use crate::data::TransformKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("{key}: cannot parse {value:?}")]
    BadValue { key: String, value: String },
    #[error("{key}: {reason}")]
    OutOfRange { key: &'static str, reason: String },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameSize {
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub selection: u64,
    pub bits: u64,
    pub jam: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Idx { images: PathBuf, labels: PathBuf },
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n_c: usize,
    pub p_c: f64,
    /// Architecture family; only the dense `NN` network is available.
    pub tau: String,
    pub hidden: Vec<usize>,
    pub f: FrameSize,
    pub k: usize,
    pub n_b: usize,
    pub w: String,
    /// Selections the Receiver waits for when estimating the frame size.
    pub t_select: usize,
    pub pretrain_rounds: usize,
    pub seeds: Seeds,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub train_size: usize,
    pub test_size: usize,
    pub synthetic_side: usize,
    pub synthetic_classes: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub edge_pairs: usize,
    /// `None` picks same-label pairs for image files and any pair otherwise.
    pub pair_policy: Option<PairPolicy>,
    pub edge_transforms: Vec<TransformKind>,
    /// `None` uses the average honest shard size.
    pub poison_copies: Option<usize>,
    pub sender_dc_cap: Option<f64>,
    pub detection: bool,
    pub jam_sigma: f64,
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_c: 10,
            p_c: 0.5,
            tau: "NN".into(),
            hidden: vec![200, 200, 200],
            f: FrameSize::Auto,
            k: 1,
            n_b: 10,
            w: "auto".into(),
            t_select: 4,
            pretrain_rounds: 200,
            seeds: Seeds {
                data: 1,
                init: 2,
                selection: 3,
                bits: 4,
                jam: 5,
            },
            images: None,
            labels: None,
            train_size: 10000,
            test_size: 2000,
            synthetic_side: 8,
            synthetic_classes: 10,
            synthetic_train: 2000,
            synthetic_test: 500,
            epochs: 1,
            batch_size: 32,
            learning_rate: 0.05,
            edge_pairs: 2000,
            pair_policy: None,
            edge_transforms: vec![TransformKind::VMix, TransformKind::HMix],
            poison_copies: None,
            sender_dc_cap: None,
            detection: true,
            jam_sigma: 0.0,
            checkpoint_every: 0,
            out_dir: None,
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "n_c",
    "p_c",
    "tau",
    "hidden",
    "f",
    "k",
    "n_b",
    "w",
    "T",
    "pretrain_rounds",
    "seed_data",
    "seed_init",
    "seed_selection",
    "seed_bits",
    "seed_jam",
    "images",
    "labels",
    "train_size",
    "test_size",
    "synthetic_side",
    "synthetic_classes",
    "synthetic_train",
    "synthetic_test",
    "epochs",
    "batch_size",
    "learning_rate",
    "edge_pairs",
    "pair_policy",
    "edge_transforms",
    "poison_copies",
    "sender_dc_cap",
    "detection",
    "jam_sigma",
    "checkpoint_every",
    "out_dir",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
    })
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError> {
    match value {
        "auto" | "none" | "" => Ok(None),
        v => parse_num(key, v).map(Some),
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
        }),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    match value {
        "" | "none" => None,
        v => Some(PathBuf::from(v)),
    }
}

fn opt_text<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
}

fn is_pattern(w: &str) -> bool {
    let lower = w.trim().to_ascii_lowercase();
    if lower == "auto" || lower == "random" {
        return true;
    }
    if !lower.is_empty() && lower.chars().all(|c| c == '0' || c == '1') {
        return true;
    }
    let hex = lower.strip_prefix("0x").unwrap_or(&lower);
    !hex.is_empty() && hex.len() % 2 == 0 && hex.chars().all(|c| c.is_ascii_hexdigit())
}

impl ExperimentConfig {
    /// Assigns one key from its textual value, without range checks.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key.trim() {
            "n_c" => self.n_c = parse_num(key, v)?,
            "p_c" => self.p_c = parse_num(key, v)?,
            "tau" => self.tau = v.to_string(),
            "hidden" => {
                self.hidden = if v.is_empty() || v == "none" {
                    Vec::new()
                } else {
                    v.split(',').map(|p| parse_num(key, p.trim())).collect::<Result<_, _>>()?
                }
            }
            "f" => {
                self.f = match v {
                    "auto" => FrameSize::Auto,
                    n => FrameSize::Fixed(parse_num(key, n)?),
                }
            }
            "k" => self.k = parse_num(key, v)?,
            "n_b" => self.n_b = parse_num(key, v)?,
            "w" => self.w = v.to_string(),
            "T" => self.t_select = parse_num(key, v)?,
            "pretrain_rounds" => self.pretrain_rounds = parse_num(key, v)?,
            "seed_data" => self.seeds.data = parse_num(key, v)?,
            "seed_init" => self.seeds.init = parse_num(key, v)?,
            "seed_selection" => self.seeds.selection = parse_num(key, v)?,
            "seed_bits" => self.seeds.bits = parse_num(key, v)?,
            "seed_jam" => self.seeds.jam = parse_num(key, v)?,
            "images" => self.images = parse_path(v),
            "labels" => self.labels = parse_path(v),
            "train_size" => self.train_size = parse_num(key, v)?,
            "test_size" => self.test_size = parse_num(key, v)?,
            "synthetic_side" => self.synthetic_side = parse_num(key, v)?,
            "synthetic_classes" => self.synthetic_classes = parse_num(key, v)?,
            "synthetic_train" => self.synthetic_train = parse_num(key, v)?,
            "synthetic_test" => self.synthetic_test = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "edge_pairs" => self.edge_pairs = parse_num(key, v)?,
            "pair_policy" => {
                self.pair_policy = match v {
                    "auto" => None,
                    p => Some(PairPolicy::parse(p).ok_or_else(|| ConfigError::BadValue {
                        key: key.into(),
                        value: v.into(),
                    })?),
                }
            }
            "edge_transforms" => {
                self.edge_transforms = v
                    .split(',')
                    .map(|p| {
                        TransformKind::parse(p).ok_or_else(|| ConfigError::BadValue {
                            key: key.into(),
                            value: p.into(),
                        })
                    })
                    .collect::<Result<_, _>>()?
            }
            "poison_copies" => self.poison_copies = parse_opt(key, v)?,
            "sender_dc_cap" => self.sender_dc_cap = parse_opt(key, v)?,
            "detection" => self.detection = parse_bool(key, v)?,
            "jam_sigma" => self.jam_sigma = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "out_dir" => self.out_dir = parse_path(v),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Current value of `key` in the textual form `set` accepts.
    pub fn get(&self, key: &str) -> Result<String, ConfigError> {
        Ok(match key {
            "n_c" => self.n_c.to_string(),
            "p_c" => self.p_c.to_string(),
            "tau" => self.tau.clone(),
            "hidden" => {
                if self.hidden.is_empty() {
                    "none".into()
                } else {
                    self.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
                }
            }
            "f" => match self.f {
                FrameSize::Auto => "auto".into(),
                FrameSize::Fixed(n) => n.to_string(),
            },
            "k" => self.k.to_string(),
            "n_b" => self.n_b.to_string(),
            "w" => self.w.clone(),
            "T" => self.t_select.to_string(),
            "pretrain_rounds" => self.pretrain_rounds.to_string(),
            "seed_data" => self.seeds.data.to_string(),
            "seed_init" => self.seeds.init.to_string(),
            "seed_selection" => self.seeds.selection.to_string(),
            "seed_bits" => self.seeds.bits.to_string(),
            "seed_jam" => self.seeds.jam.to_string(),
            "images" => path_text(&self.images),
            "labels" => path_text(&self.labels),
            "train_size" => self.train_size.to_string(),
            "test_size" => self.test_size.to_string(),
            "synthetic_side" => self.synthetic_side.to_string(),
            "synthetic_classes" => self.synthetic_classes.to_string(),
            "synthetic_train" => self.synthetic_train.to_string(),
            "synthetic_test" => self.synthetic_test.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "edge_pairs" => self.edge_pairs.to_string(),
            "pair_policy" => self.pair_policy.map_or("auto", |p| p.name()).to_string(),
            "edge_transforms" => self
                .edge_transforms
                .iter()
                .map(|k| k.name())
                .collect::<Vec<_>>()
                .join(","),
            "poison_copies" => opt_text(&self.poison_copies, "auto"),
            "sender_dc_cap" => opt_text(&self.sender_dc_cap, "none"),
            "detection" => self.detection.to_string(),
            "jam_sigma" => self.jam_sigma.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "out_dir" => path_text(&self.out_dir),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        })
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_str(&text)
    }

    /// Every key with its value; `parse_str` reads it back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |key: &'static str, reason: &str| {
            Err(ConfigError::OutOfRange {
                key,
                reason: reason.to_string(),
            })
        };
        if self.n_c < 1 {
            return fail("n_c", "must be at least 1");
        }
        if !(self.p_c > 0.0 && self.p_c <= 1.0) {
            return fail("p_c", "must lie in (0, 1]");
        }
        if self.tau != "NN" {
            return fail("tau", "only NN is implemented");
        }
        if self.hidden.contains(&0) {
            return fail("hidden", "layer widths must be positive");
        }
        if let FrameSize::Fixed(f) = self.f {
            if f < 2 {
                return fail("f", "must be at least 2");
            }
        }
        if self.n_b < 1 {
            return fail("n_b", "must be at least 1");
        }
        if !is_pattern(&self.w) {
            return fail("w", "expected a 0/1 string, hex bytes, or auto");
        }
        if self.t_select < 1 {
            return fail("T", "must be at least 1");
        }
        if self.images.is_some() != self.labels.is_some() {
            return fail("images", "images and labels must be given together");
        }
        let (train, test) = self.split_sizes();
        if train < self.n_c || test < self.n_c {
            return fail("train_size", "every client needs a train and a test example");
        }
        if self.synthetic_side < 1 || self.synthetic_classes < 2 {
            return fail("synthetic_classes", "need at least two classes");
        }
        if self.batch_size < 1 {
            return fail("batch_size", "must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate", "must be positive");
        }
        if self.edge_transforms.is_empty() {
            return fail("edge_transforms", "need at least one transformation");
        }
        if self.poison_copies == Some(0) {
            return fail("poison_copies", "must be positive");
        }
        if let Some(cap) = self.sender_dc_cap {
            if !(cap > 0.0 && cap.is_finite()) {
                return fail("sender_dc_cap", "must be positive");
            }
        }
        if !(self.jam_sigma >= 0.0 && self.jam_sigma.is_finite()) {
            return fail("jam_sigma", "must be non-negative");
        }
        Ok(())
    }

    pub fn source(&self) -> DataSource {
        match (&self.images, &self.labels) {
            (Some(images), Some(labels)) => DataSource::Idx {
                images: images.clone(),
                labels: labels.clone(),
            },
            _ => DataSource::Synthetic,
        }
    }

    /// Train and test example counts for the active source.
    pub fn split_sizes(&self) -> (usize, usize) {
        match self.source() {
            DataSource::Idx { .. } => (self.train_size, self.test_size),
            DataSource::Synthetic => (self.synthetic_train, self.synthetic_test),
        }
    }

    pub fn effective_pair_policy(&self) -> PairPolicy {
        self.pair_policy.unwrap_or(match self.source() {
            DataSource::Idx { .. } => PairPolicy::SameLabel,
            DataSource::Synthetic => PairPolicy::Any,
        })
    }

    /// Canonical text of every field that influences pretraining; equal keys
    /// mean the pretrained global models are identical.
    pub fn pretrain_key(&self) -> String {
        const PRETRAIN_KEYS: &[&str] = &[
            "n_c",
            "p_c",
            "tau",
            "hidden",
            "pretrain_rounds",
            "seed_data",
            "seed_init",
            "images",
            "labels",
            "train_size",
            "test_size",
            "synthetic_side",
            "synthetic_classes",
            "synthetic_train",
            "synthetic_test",
            "epochs",
            "batch_size",
            "learning_rate",
        ];
        let mut out = String::new();
        for key in PRETRAIN_KEYS {
            let _ = write!(out, "{key}={};", self.get(key).expect("listed key"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_defaults() {
        let cfg = ExperimentConfig::parse_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!((cfg.n_c, cfg.p_c, cfg.tau.as_str(), cfg.f, cfg.k, cfg.n_b, cfg.w.as_str()), (
            10,
            0.5,
            "NN",
            FrameSize::Auto,
            1,
            10,
            "auto"
        ));
    }

    #[test]
    fn range_errors_name_the_key() {
        let err = ExperimentConfig::parse_str("p_c = 1.5").unwrap_err();
        assert!(matches!(err, ConfigError::OutOfRange { key: "p_c", .. }));
        assert!(err.to_string().contains("p_c"));
        assert!(matches!(
            ExperimentConfig::parse_str("w = 012"),
            Err(ConfigError::OutOfRange { key: "w", .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse_str("bogus = 1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(ExperimentConfig::parse_str("n_c 4"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(ExperimentConfig::parse_str("k = -1"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn echo_round_trips() {
        let text = "n_c = 4\np_c = 0.7\nf = 9\nw = 0F\nhidden = 16,8\npoison_copies = 12\n\
                    sender_dc_cap = 2.5\nimages = a.gz\nlabels = b.gz\npair_policy = any\n\
                    edge_transforms = erase\njam_sigma = 0.001 # comment\n";
        let cfg = ExperimentConfig::parse_str(text).unwrap();
        assert_eq!(cfg.p_c, 0.7);
        assert_eq!(cfg.hidden, vec![16, 8]);
        assert_eq!(ExperimentConfig::parse_str(&cfg.to_text()).unwrap(), cfg);
        let defaults = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse_str(&defaults.to_text()).unwrap(), defaults);
    }

    #[test]
    fn pretrain_key_ignores_attack_fields() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seeds.bits = 99;
        b.k = 5;
        b.jam_sigma = 0.1;
        assert_eq!(a.pretrain_key(), b.pretrain_key());
        b.seeds.init = 17;
        assert_ne!(a.pretrain_key(), b.pretrain_key());
    }
}
