//! Run configuration as flat `key=value` text.

use std::path::PathBuf;
use std::str::FromStr;

use crate::augment::AugmentConfig;
use crate::data::Synthetic;
use crate::error::{Error, Result};
use crate::model::{MlaVariant, ModelConfig, PatchInit, PosEmbed};
use crate::optim::{default_lr_wd, OptimizerKind};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// CIFAR-10 binary batches; `None` falls back to `$DATA_DIR`, then `data`.
    Cifar { dir: Option<PathBuf> },
    Synthetic { kind: Synthetic, train: usize, test: usize },
}

impl DataSource {
    pub fn cifar_dir(dir: &Option<PathBuf>) -> PathBuf {
        dir.clone()
            .or_else(|| std::env::var_os("DATA_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// `None` picks the optimizer's default.
    pub lr_peak: Option<f64>,
    pub weight_decay: Option<f64>,
    pub warmup_epochs: usize,
    pub workers: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub subset_per_class: Option<usize>,
    /// Multiply the peak rate by `batch_size / 256`.
    pub scale_lr: bool,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub data: DataSource,
    pub out: Option<PathBuf>,
    /// Bench rows whose activation estimate exceeds this are skipped.
    pub memory_budget: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 256,
            optimizer: OptimizerKind::AdamW,
            lr_peak: None,
            weight_decay: None,
            warmup_epochs: 10,
            workers: 1,
            seed: 0,
            eval_every: 1,
            subset_per_class: None,
            scale_lr: false,
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            data: DataSource::Cifar { dir: None },
            out: None,
            memory_budget: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad value {v:?} for {key}, expected true or false"))),
    }
}

fn opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    match v {
        "" | "none" | "default" => Ok(None),
        _ => parse(key, v).map(Some),
    }
}

fn show<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

impl TrainConfig {
    pub fn lr(&self) -> f64 {
        let base = self.lr_peak.unwrap_or(default_lr_wd(self.optimizer).0);
        if self.scale_lr {
            base * self.batch_size as f64 / 256.0
        } else {
            base
        }
    }

    pub fn wd(&self) -> f64 {
        self.weight_decay.unwrap_or(default_lr_wd(self.optimizer).1)
    }

    /// Sets one key. Dashes and underscores are interchangeable.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        let v = v.trim();
        let m = &mut self.model;
        let a = &mut self.augment;
        match k {
            "epochs" => self.epochs = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "optimizer" => self.optimizer = v.parse()?,
            "lr" | "lr_peak" => self.lr_peak = opt(k, v)?,
            "weight_decay" | "wd" => self.weight_decay = opt(k, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(k, v)?,
            "workers" => self.workers = parse(k, v)?,
            "seed" => self.seed = parse(k, v)?,
            "eval_every" => self.eval_every = parse(k, v)?,
            "subset_per_class" => self.subset_per_class = opt(k, v)?,
            "scale_lr" => self.scale_lr = parse_bool(k, v)?,
            "out" => self.out = opt(k, v)?,
            "memory_budget" => self.memory_budget = opt(k, v)?,
            "data" => {
                self.data = match v {
                    "cifar" | "cifar10" => DataSource::Cifar { dir: None },
                    s => {
                        let (train, test) = match &self.data {
                            DataSource::Synthetic { train, test, .. } => (*train, *test),
                            DataSource::Cifar { .. } => (512, 256),
                        };
                        DataSource::Synthetic { kind: s.parse()?, train, test }
                    }
                }
            }
            "data_dir" => match &mut self.data {
                DataSource::Cifar { dir } => *dir = opt(k, v)?,
                DataSource::Synthetic { .. } => {
                    return Err(Error::Config("data_dir given for a synthetic dataset".into()))
                }
            },
            "synthetic_train" | "synthetic_test" => match &mut self.data {
                DataSource::Synthetic { train, test, .. } => {
                    *(if k == "synthetic_train" { train } else { test }) = parse(k, v)?
                }
                DataSource::Cifar { .. } => {
                    return Err(Error::Config(format!("{k} needs a synthetic data source")))
                }
            },
            "image_size" => m.image_size = parse(k, v)?,
            "patch_size" => m.patch_size = parse(k, v)?,
            "dim" | "embed_dim" => m.embed_dim = parse(k, v)?,
            "heads" | "num_heads" => m.num_heads = parse(k, v)?,
            "depth" => m.depth = parse(k, v)?,
            "ffn_ratio" => m.ffn_ratio = parse(k, v)?,
            "num_classes" => m.num_classes = parse(k, v)?,
            "num_cls" | "num_cls_tokens" => m.num_cls_tokens = parse(k, v)?,
            "pos_embed" => m.pos_embed = v.parse::<PosEmbed>()?,
            "patch_init" => m.patch_init = v.parse::<PatchInit>()?,
            "mla" => m.mla.variant = v.parse::<MlaVariant>()?,
            "dc" | "d_c" => m.mla.d_c = parse(k, v)?,
            "drop_path" => m.drop_path_rate = parse(k, v)?,
            "crop_flip" => a.use_crop_flip = parse_bool(k, v)?,
            "aa" | "autoaugment" => a.use_autoaugment = parse_bool(k, v)?,
            "mixup" => a.use_mixup = parse_bool(k, v)?,
            "cutmix" => a.use_cutmix = parse_bool(k, v)?,
            "erase" | "random_erasing" => a.use_random_erasing = parse_bool(k, v)?,
            "repeated_augment" => a.use_repeated_augment = parse_bool(k, v)?,
            "repeated_factor" => a.repeated_factor = parse(k, v)?,
            "mixup_alpha" => a.mixup_alpha = parse(k, v)?,
            "cutmix_alpha" => a.cutmix_alpha = parse(k, v)?,
            "erase_prob" => a.erase_prob = parse(k, v)?,
            "label_smoothing" => a.label_smoothing = parse(k, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key=value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every key, in an order `from_text` reads back to an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let a = &self.augment;
        let mut kv: Vec<(&str, String)> = vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("lr", show(&self.lr_peak)),
            ("weight_decay", show(&self.weight_decay)),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("workers", self.workers.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("subset_per_class", show(&self.subset_per_class)),
            ("scale_lr", self.scale_lr.to_string()),
            ("out", show(&self.out.as_ref().map(|p| p.display().to_string()))),
            ("memory_budget", show(&self.memory_budget)),
        ];
        match &self.data {
            DataSource::Cifar { dir } => {
                kv.push(("data", "cifar".into()));
                kv.push(("data_dir", show(&dir.as_ref().map(|p| p.display().to_string()))));
            }
            DataSource::Synthetic { kind, train, test } => {
                kv.push(("data", kind.to_string()));
                kv.push(("synthetic_train", train.to_string()));
                kv.push(("synthetic_test", test.to_string()));
            }
        }
        kv.extend([
            ("image_size", m.image_size.to_string()),
            ("patch_size", m.patch_size.to_string()),
            ("dim", m.embed_dim.to_string()),
            ("heads", m.num_heads.to_string()),
            ("depth", m.depth.to_string()),
            ("ffn_ratio", m.ffn_ratio.to_string()),
            ("num_classes", m.num_classes.to_string()),
            ("num_cls", m.num_cls_tokens.to_string()),
            ("pos_embed", m.pos_embed.to_string()),
            ("patch_init", m.patch_init.to_string()),
            ("mla", m.mla.variant.to_string()),
            ("dc", m.mla.d_c.to_string()),
            ("drop_path", m.drop_path_rate.to_string()),
            ("crop_flip", a.use_crop_flip.to_string()),
            ("aa", a.use_autoaugment.to_string()),
            ("mixup", a.use_mixup.to_string()),
            ("cutmix", a.use_cutmix.to_string()),
            ("erase", a.use_random_erasing.to_string()),
            ("repeated_augment", a.use_repeated_augment.to_string()),
            ("repeated_factor", a.repeated_factor.to_string()),
            ("mixup_alpha", a.mixup_alpha.to_string()),
            ("cutmix_alpha", a.cutmix_alpha.to_string()),
            ("erase_prob", a.erase_prob.to_string()),
            ("label_smoothing", a.label_smoothing.to_string()),
        ]);
        kv.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return err("epochs must be at least 1".into());
        }
        if self.workers == 0 || self.batch_size == 0 || self.batch_size % self.workers != 0 {
            return err(format!(
                "batch size {} is not divisible by {} workers",
                self.batch_size, self.workers
            ));
        }
        if self.eval_every == 0 {
            return err("eval_every must be at least 1".into());
        }
        if self.subset_per_class == Some(0) {
            return err("subset_per_class must be at least 1".into());
        }
        if !(self.lr() > 0.0 && self.lr().is_finite()) || !(self.wd() >= 0.0) {
            return err(format!("bad learning rate {} or weight decay {}", self.lr(), self.wd()));
        }
        if let DataSource::Synthetic { kind, train, test } = &self.data {
            if *train < 2 || *test < 2 {
                return err(format!("synthetic {kind} needs at least 2 train and test samples"));
            }
            if self.model.num_classes != 2 {
                return err(format!("synthetic {kind} has 2 classes, model has {}", self.model.num_classes));
            }
        }
        self.model.validate()?;
        self.augment.validate()
    }
}
