//! Flat `key = value` run configuration.
//!
//! Every key has a default, so an empty file is a valid config. Unknown keys,
//! duplicates and malformed values are errors that name the offending line.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use codim_core::data::{BlobSpec, RingSpec};
use codim_core::noise::{adjacent_pair_map, NoiseKind, NoiseSpec};
use codim_core::ssl::UnlabeledLoss;
use codim_core::trainers::{Mode, TrainConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{origin}:{line}: unknown key '{key}'")]
    UnknownKey { origin: String, line: usize, key: String },
    #[error("{origin}:{line}: duplicate key '{key}'")]
    Duplicate { origin: String, line: usize, key: String },
    #[error("{origin}:{line}: expected 'key = value'")]
    Syntax { origin: String, line: usize },
    #[error("{origin}:{line}: bad value for '{key}': {message}")]
    Value {
        origin: String,
        line: usize,
        key: String,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    Blobs,
    Rings,
    Idx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseChoice {
    None,
    Symmetric,
    SymmetricStrict,
    /// Adjacent class pairs swap (`0↔1, 2↔3, …`).
    Asymmetric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdxSource {
    pub images: PathBuf,
    pub labels: PathBuf,
    /// 0 keeps every sample.
    pub max_samples: usize,
    /// Side length of the average-pooled image; 0 keeps full resolution.
    pub downsample: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub data_kind: DataKind,
    pub data_seed: u64,
    pub blobs: BlobSpec,
    pub rings: RingSpec,
    pub idx: IdxSource,
    pub noise: NoiseChoice,
    pub noise_ratio: f64,
    pub noise_seed: u64,
    pub train: TrainConfig,
    pub labeled_ratio: f64,
    /// Pre-trained checkpoint used by `train` instead of pre-training in-run.
    pub pretrained_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            data_kind: DataKind::Blobs,
            data_seed: 0,
            blobs: BlobSpec::default(),
            rings: RingSpec::default(),
            idx: IdxSource {
                images: PathBuf::new(),
                labels: PathBuf::new(),
                max_samples: 0,
                downsample: 0,
            },
            noise: NoiseChoice::Symmetric,
            noise_ratio: 0.4,
            noise_seed: 1000,
            train: TrainConfig::default(),
            labeled_ratio: 0.2,
            pretrained_checkpoint: None,
        }
    }
}

/// Every accepted key, in snapshot order.
pub const KEYS: &[&str] = &[
    "out_dir",
    "data.kind",
    "data.seed",
    "blobs.num_classes",
    "blobs.dim",
    "blobs.samples_per_class",
    "blobs.class_separation",
    "blobs.intra_std",
    "rings.num_classes",
    "rings.samples_per_class",
    "rings.radius_step",
    "rings.width",
    "idx.images",
    "idx.labels",
    "idx.max_samples",
    "idx.downsample",
    "noise.kind",
    "noise.ratio",
    "noise.seed",
    "train.seed",
    "train.mode",
    "train.pretrain_steps",
    "train.warmup_epochs",
    "train.epochs",
    "train.iters_per_epoch",
    "train.batch_size",
    "train.lr",
    "train.lr_drop_epoch",
    "train.lr_drop_factor",
    "train.momentum",
    "train.weight_decay",
    "train.lambda_cl",
    "train.lambda_sup",
    "train.lambda_self",
    "train.tau1",
    "train.tau2",
    "train.tau3",
    "train.gmm_threshold",
    "train.label_correction",
    "train.correction_epochs",
    "train.consistency_neighbors",
    "ssl.lambda_u",
    "ssl.lambda_r",
    "ssl.sharpen_t",
    "ssl.mixup_alpha",
    "ssl.num_augs",
    "ssl.ramp_epochs",
    "ssl.unlabeled_loss",
    "aug.weak_sigma",
    "aug.strong_sigma",
    "aug.mask_prob",
    "aug.scale_min",
    "aug.scale_max",
    "cssl.labeled_ratio",
    "pretrained_checkpoint",
];

fn parse_num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got '{v}'")),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses config text; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                origin: origin.into(),
                line,
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    origin: origin.into(),
                    line,
                    key: key.into(),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    origin: origin.into(),
                    line,
                    key: key.into(),
                });
            }
            cfg.set(key, value).map_err(|message| ConfigError::Value {
                origin: origin.into(),
                line,
                key: key.into(),
                message,
            })?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let t = &mut self.train;
        match key {
            "out_dir" => self.out_dir = PathBuf::from(v),
            "data.kind" => {
                self.data_kind = match v {
                    "blobs" => DataKind::Blobs,
                    "rings" => DataKind::Rings,
                    "idx" => DataKind::Idx,
                    _ => return Err(format!("expected blobs, rings or idx, got '{v}'")),
                }
            }
            "data.seed" => self.data_seed = parse_num(v)?,
            "blobs.num_classes" => self.blobs.num_classes = parse_num(v)?,
            "blobs.dim" => self.blobs.dim = parse_num(v)?,
            "blobs.samples_per_class" => self.blobs.samples_per_class = parse_num(v)?,
            "blobs.class_separation" => self.blobs.class_separation = parse_num(v)?,
            "blobs.intra_std" => self.blobs.intra_std = parse_num(v)?,
            "rings.num_classes" => self.rings.num_classes = parse_num(v)?,
            "rings.samples_per_class" => self.rings.samples_per_class = parse_num(v)?,
            "rings.radius_step" => self.rings.radius_step = parse_num(v)?,
            "rings.width" => self.rings.width = parse_num(v)?,
            "idx.images" => self.idx.images = PathBuf::from(v),
            "idx.labels" => self.idx.labels = PathBuf::from(v),
            "idx.max_samples" => self.idx.max_samples = parse_num(v)?,
            "idx.downsample" => self.idx.downsample = parse_num(v)?,
            "noise.kind" => {
                self.noise = match v {
                    "none" => NoiseChoice::None,
                    "symmetric" => NoiseChoice::Symmetric,
                    "symmetric_strict" => NoiseChoice::SymmetricStrict,
                    "asymmetric" => NoiseChoice::Asymmetric,
                    _ => return Err(format!("expected none, symmetric, symmetric_strict or asymmetric, got '{v}'")),
                }
            }
            "noise.ratio" => self.noise_ratio = parse_num(v)?,
            "noise.seed" => self.noise_seed = parse_num(v)?,
            "train.seed" => t.seed = parse_num(v)?,
            "train.mode" => t.mode = v.parse::<Mode>().map_err(|e| e.to_string())?,
            "train.pretrain_steps" => t.pretrain_steps = parse_num(v)?,
            "train.warmup_epochs" => t.warmup_epochs = parse_num(v)?,
            "train.epochs" => t.epochs = parse_num(v)?,
            "train.iters_per_epoch" => t.iters_per_epoch = parse_num(v)?,
            "train.batch_size" => t.batch_size = parse_num(v)?,
            "train.lr" => t.lr.initial = parse_num(v)?,
            "train.lr_drop_epoch" => {
                let e: usize = parse_num(v)?;
                t.lr.drop_epoch = (e > 0).then_some(e);
            }
            "train.lr_drop_factor" => t.lr.drop_factor = parse_num(v)?,
            "train.momentum" => t.momentum = parse_num(v)?,
            "train.weight_decay" => t.weight_decay = parse_num(v)?,
            "train.lambda_cl" => t.lambda_cl = parse_num(v)?,
            "train.lambda_sup" => t.lambda_sup = parse_num(v)?,
            "train.lambda_self" => t.lambda_self = parse_num(v)?,
            "train.tau1" => t.tau1 = parse_num(v)?,
            "train.tau2" => t.tau2 = parse_num(v)?,
            "train.tau3" => t.tau3 = parse_num(v)?,
            "train.gmm_threshold" => t.gmm_threshold = parse_num(v)?,
            "train.label_correction" => t.label_correction = parse_bool(v)?,
            "train.correction_epochs" => t.correction_epochs = parse_num(v)?,
            "train.consistency_neighbors" => t.consistency_neighbors = parse_num(v)?,
            "ssl.lambda_u" => t.ssl.lambda_u = parse_num(v)?,
            "ssl.lambda_r" => t.ssl.lambda_r = parse_num(v)?,
            "ssl.sharpen_t" => t.ssl.sharpen_t = parse_num(v)?,
            "ssl.mixup_alpha" => t.ssl.mixup_alpha = parse_num(v)?,
            "ssl.num_augs" => t.ssl.num_augs = parse_num(v)?,
            "ssl.ramp_epochs" => t.ssl.ramp_epochs = parse_num(v)?,
            "ssl.unlabeled_loss" => {
                t.ssl.unlabeled_loss = match v {
                    "l2" => UnlabeledLoss::L2,
                    "ce" => UnlabeledLoss::CrossEntropy,
                    _ => return Err(format!("expected l2 or ce, got '{v}'")),
                }
            }
            "aug.weak_sigma" => t.aug.weak_sigma = parse_num(v)?,
            "aug.strong_sigma" => t.aug.strong_sigma = parse_num(v)?,
            "aug.mask_prob" => t.aug.mask_prob = parse_num(v)?,
            "aug.scale_min" => t.aug.scale_range.0 = parse_num(v)?,
            "aug.scale_max" => t.aug.scale_range.1 = parse_num(v)?,
            "cssl.labeled_ratio" => self.labeled_ratio = parse_num(v)?,
            "pretrained_checkpoint" => self.pretrained_checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(format!("no setter for '{key}'")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let t = &self.train;
        match key {
            "out_dir" => self.out_dir.display().to_string(),
            "data.kind" => match self.data_kind {
                DataKind::Blobs => "blobs",
                DataKind::Rings => "rings",
                DataKind::Idx => "idx",
            }
            .into(),
            "data.seed" => self.data_seed.to_string(),
            "blobs.num_classes" => self.blobs.num_classes.to_string(),
            "blobs.dim" => self.blobs.dim.to_string(),
            "blobs.samples_per_class" => self.blobs.samples_per_class.to_string(),
            "blobs.class_separation" => self.blobs.class_separation.to_string(),
            "blobs.intra_std" => self.blobs.intra_std.to_string(),
            "rings.num_classes" => self.rings.num_classes.to_string(),
            "rings.samples_per_class" => self.rings.samples_per_class.to_string(),
            "rings.radius_step" => self.rings.radius_step.to_string(),
            "rings.width" => self.rings.width.to_string(),
            "idx.images" => self.idx.images.display().to_string(),
            "idx.labels" => self.idx.labels.display().to_string(),
            "idx.max_samples" => self.idx.max_samples.to_string(),
            "idx.downsample" => self.idx.downsample.to_string(),
            "noise.kind" => match self.noise {
                NoiseChoice::None => "none",
                NoiseChoice::Symmetric => "symmetric",
                NoiseChoice::SymmetricStrict => "symmetric_strict",
                NoiseChoice::Asymmetric => "asymmetric",
            }
            .into(),
            "noise.ratio" => self.noise_ratio.to_string(),
            "noise.seed" => self.noise_seed.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.mode" => t.mode.name().into(),
            "train.pretrain_steps" => t.pretrain_steps.to_string(),
            "train.warmup_epochs" => t.warmup_epochs.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.iters_per_epoch" => t.iters_per_epoch.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.lr" => t.lr.initial.to_string(),
            "train.lr_drop_epoch" => t.lr.drop_epoch.unwrap_or(0).to_string(),
            "train.lr_drop_factor" => t.lr.drop_factor.to_string(),
            "train.momentum" => t.momentum.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.lambda_cl" => t.lambda_cl.to_string(),
            "train.lambda_sup" => t.lambda_sup.to_string(),
            "train.lambda_self" => t.lambda_self.to_string(),
            "train.tau1" => t.tau1.to_string(),
            "train.tau2" => t.tau2.to_string(),
            "train.tau3" => t.tau3.to_string(),
            "train.gmm_threshold" => t.gmm_threshold.to_string(),
            "train.label_correction" => t.label_correction.to_string(),
            "train.correction_epochs" => t.correction_epochs.to_string(),
            "train.consistency_neighbors" => t.consistency_neighbors.to_string(),
            "ssl.lambda_u" => t.ssl.lambda_u.to_string(),
            "ssl.lambda_r" => t.ssl.lambda_r.to_string(),
            "ssl.sharpen_t" => t.ssl.sharpen_t.to_string(),
            "ssl.mixup_alpha" => t.ssl.mixup_alpha.to_string(),
            "ssl.num_augs" => t.ssl.num_augs.to_string(),
            "ssl.ramp_epochs" => t.ssl.ramp_epochs.to_string(),
            "ssl.unlabeled_loss" => match t.ssl.unlabeled_loss {
                UnlabeledLoss::L2 => "l2",
                UnlabeledLoss::CrossEntropy => "ce",
            }
            .into(),
            "aug.weak_sigma" => t.aug.weak_sigma.to_string(),
            "aug.strong_sigma" => t.aug.strong_sigma.to_string(),
            "aug.mask_prob" => t.aug.mask_prob.to_string(),
            "aug.scale_min" => t.aug.scale_range.0.to_string(),
            "aug.scale_max" => t.aug.scale_range.1.to_string(),
            "cssl.labeled_ratio" => self.labeled_ratio.to_string(),
            "pretrained_checkpoint" => self
                .pretrained_checkpoint
                .as_ref()
                .map_or(String::new(), |p| p.display().to_string()),
            _ => unreachable!("key table and getter disagree on '{key}'"),
        }
    }

    /// Every key with its effective value, parseable by [`RunConfig::parse`].
    pub fn snapshot(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }

    /// Cross-field checks, run before any work starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        self.train.validate().map_err(|e| invalid(e.to_string()))?;
        self.train.aug.validate().map_err(|e| invalid(e.to_string()))?;
        if self.noise != NoiseChoice::None && !(0.0..=1.0).contains(&self.noise_ratio) {
            return Err(invalid(format!("noise.ratio must lie in [0, 1], got {}", self.noise_ratio)));
        }
        if !(self.labeled_ratio > 0.0 && self.labeled_ratio < 1.0) {
            return Err(invalid(format!("cssl.labeled_ratio must lie in (0, 1), got {}", self.labeled_ratio)));
        }
        if self.data_kind == DataKind::Idx && (self.idx.images.as_os_str().is_empty() || self.idx.labels.as_os_str().is_empty()) {
            return Err(invalid("data.kind = idx needs idx.images and idx.labels".into()));
        }
        Ok(())
    }

    pub fn blob_spec(&self) -> BlobSpec {
        BlobSpec {
            seed: self.data_seed,
            ..self.blobs.clone()
        }
    }

    pub fn ring_spec(&self) -> RingSpec {
        RingSpec {
            seed: self.data_seed,
            ..self.rings.clone()
        }
    }

    /// `None` when no noise is configured.
    pub fn noise_spec(&self, num_classes: usize) -> Option<NoiseSpec> {
        let kind = match self.noise {
            NoiseChoice::None => return None,
            NoiseChoice::Symmetric => NoiseKind::Symmetric { strict: false },
            NoiseChoice::SymmetricStrict => NoiseKind::Symmetric { strict: true },
            NoiseChoice::Asymmetric => NoiseKind::Asymmetric {
                class_map: adjacent_pair_map(num_classes),
            },
        };
        Some(NoiseSpec {
            kind,
            ratio: self.noise_ratio,
            seed: self.noise_seed,
        })
    }
}
