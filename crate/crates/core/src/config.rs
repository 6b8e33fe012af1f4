//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::aggregator::{AggregationVariant, ModelConfig};
use crate::dataset::{GenerateOptions, NoiseConfig, Split, DEFAULT_VIEWS};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::optim::StepSchedule;
use crate::train::{LossReduction, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: AggregationVariant,
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    pub class_count: usize,
    pub shapes_per_class: usize,
    pub image_size: usize,
    pub views: usize,
    pub train_fraction: f64,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub middle_tap: usize,
    pub feature_dim: usize,
    pub d_h1: usize,
    pub d_k: usize,
    pub d_h2: usize,
    pub stage1_epochs: usize,
    pub stage1_lr: f64,
    pub stage1_anneal_epoch: usize,
    pub stage2_epochs: usize,
    pub stage2_lr: f64,
    pub stage2_anneal_epoch: usize,
    pub batch1: usize,
    pub batch2: usize,
    pub loss_reduction: LossReduction,
    pub missing_views: usize,
    pub occluder_scale: f64,
    pub clutter_count: usize,
    pub noise_seed: u64,
    pub f1_k: usize,
    pub eval_split: Split,
    pub export_confidence: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let gen = GenerateOptions::default();
        RunConfig {
            seed: 0,
            variant: AggregationVariant::Prema,
            dataset_dir: PathBuf::from("dataset"),
            out_dir: PathBuf::from("runs"),
            class_count: gen.class_count,
            shapes_per_class: gen.shapes_per_class,
            image_size: gen.image_size,
            views: DEFAULT_VIEWS,
            train_fraction: gen.train_fraction,
            channels: enc.channels,
            kernel: enc.kernel,
            stride: enc.stride,
            pad: enc.pad,
            middle_tap: enc.middle_tap,
            feature_dim: enc.feature_dim,
            d_h1: model.d_h1,
            d_k: model.d_k,
            d_h2: model.d_h2,
            stage1_epochs: train.stage1.epochs,
            stage1_lr: train.stage1.initial_lr,
            stage1_anneal_epoch: train.stage1.anneal_epoch,
            stage2_epochs: train.stage2.epochs,
            stage2_lr: train.stage2.initial_lr,
            stage2_anneal_epoch: train.stage2.anneal_epoch,
            batch1: train.batch1,
            batch2: train.batch2,
            loss_reduction: train.reduction,
            missing_views: 0,
            occluder_scale: 0.0,
            clutter_count: 0,
            noise_seed: 0,
            f1_k: 10,
            eval_split: Split::Test,
            export_confidence: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 34] = [
        "seed",
        "variant",
        "dataset_dir",
        "out_dir",
        "class_count",
        "shapes_per_class",
        "image_size",
        "views",
        "train_fraction",
        "channels",
        "kernel",
        "stride",
        "pad",
        "middle_tap",
        "feature_dim",
        "d_h1",
        "d_k",
        "d_h2",
        "stage1_epochs",
        "stage1_lr",
        "stage1_anneal_epoch",
        "stage2_epochs",
        "stage2_lr",
        "stage2_anneal_epoch",
        "batch1",
        "batch2",
        "loss_reduction",
        "missing_views",
        "occluder_scale",
        "clutter_count",
        "noise_seed",
        "f1_k",
        "eval_split",
        "export_confidence",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "dataset_dir" => self.dataset_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "class_count" => self.class_count = parse(key, v)?,
            "shapes_per_class" => self.shapes_per_class = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "views" => self.views = parse(key, v)?,
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "channels" => {
                self.channels = v
                    .split(',')
                    .map(|c| parse(key, c.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "kernel" => self.kernel = parse(key, v)?,
            "stride" => self.stride = parse(key, v)?,
            "pad" => self.pad = parse(key, v)?,
            "middle_tap" => self.middle_tap = parse(key, v)?,
            "feature_dim" => self.feature_dim = parse(key, v)?,
            "d_h1" => self.d_h1 = parse(key, v)?,
            "d_k" => self.d_k = parse(key, v)?,
            "d_h2" => self.d_h2 = parse(key, v)?,
            "stage1_epochs" => self.stage1_epochs = parse(key, v)?,
            "stage1_lr" => self.stage1_lr = parse(key, v)?,
            "stage1_anneal_epoch" => self.stage1_anneal_epoch = parse(key, v)?,
            "stage2_epochs" => self.stage2_epochs = parse(key, v)?,
            "stage2_lr" => self.stage2_lr = parse(key, v)?,
            "stage2_anneal_epoch" => self.stage2_anneal_epoch = parse(key, v)?,
            "batch1" => self.batch1 = parse(key, v)?,
            "batch2" => self.batch2 = parse(key, v)?,
            "loss_reduction" => self.loss_reduction = v.parse()?,
            "missing_views" => self.missing_views = parse(key, v)?,
            "occluder_scale" => self.occluder_scale = parse(key, v)?,
            "clutter_count" => self.clutter_count = parse(key, v)?,
            "noise_seed" => self.noise_seed = parse(key, v)?,
            "f1_k" => self.f1_k = parse(key, v)?,
            "eval_split" => self.eval_split = v.parse()?,
            "export_confidence" => self.export_confidence = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Keys may appear once.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, config_reason(e))))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Fully-resolved configuration in the file format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("variant", self.variant.to_string());
        kv("dataset_dir", self.dataset_dir.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("class_count", self.class_count.to_string());
        kv("shapes_per_class", self.shapes_per_class.to_string());
        kv("image_size", self.image_size.to_string());
        kv("views", self.views.to_string());
        kv("train_fraction", self.train_fraction.to_string());
        kv(
            "channels",
            self.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        );
        kv("kernel", self.kernel.to_string());
        kv("stride", self.stride.to_string());
        kv("pad", self.pad.to_string());
        kv("middle_tap", self.middle_tap.to_string());
        kv("feature_dim", self.feature_dim.to_string());
        kv("d_h1", self.d_h1.to_string());
        kv("d_k", self.d_k.to_string());
        kv("d_h2", self.d_h2.to_string());
        kv("stage1_epochs", self.stage1_epochs.to_string());
        kv("stage1_lr", self.stage1_lr.to_string());
        kv("stage1_anneal_epoch", self.stage1_anneal_epoch.to_string());
        kv("stage2_epochs", self.stage2_epochs.to_string());
        kv("stage2_lr", self.stage2_lr.to_string());
        kv("stage2_anneal_epoch", self.stage2_anneal_epoch.to_string());
        kv("batch1", self.batch1.to_string());
        kv("batch2", self.batch2.to_string());
        kv(
            "loss_reduction",
            match self.loss_reduction {
                LossReduction::Mean => "mean",
                LossReduction::Sum => "sum",
            }
            .into(),
        );
        kv("missing_views", self.missing_views.to_string());
        kv("occluder_scale", self.occluder_scale.to_string());
        kv("clutter_count", self.clutter_count.to_string());
        kv("noise_seed", self.noise_seed.to_string());
        kv("f1_k", self.f1_k.to_string());
        kv(
            "eval_split",
            match self.eval_split {
                Split::Train => "train",
                Split::Test => "test",
            }
            .into(),
        );
        kv("export_confidence", self.export_confidence.to_string());
        s
    }

    pub fn generate_options(&self) -> GenerateOptions {
        GenerateOptions {
            global_seed: self.seed,
            class_count: self.class_count,
            shapes_per_class: self.shapes_per_class,
            image_size: self.image_size,
            views: self.views,
            train_fraction: self.train_fraction,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_size: self.image_size,
                channels: self.channels.clone(),
                kernel: self.kernel,
                stride: self.stride,
                pad: self.pad,
                middle_tap: self.middle_tap,
                feature_dim: self.feature_dim,
            },
            d_h1: self.d_h1,
            d_k: self.d_k,
            d_h2: self.d_h2,
            classes: self.class_count,
            variant: self.variant,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            stage1: StepSchedule {
                epochs: self.stage1_epochs,
                initial_lr: self.stage1_lr,
                anneal_epoch: self.stage1_anneal_epoch,
            },
            stage2: StepSchedule {
                epochs: self.stage2_epochs,
                initial_lr: self.stage2_lr,
                anneal_epoch: self.stage2_anneal_epoch,
            },
            batch1: self.batch1,
            batch2: self.batch2,
            seed: self.seed,
            reduction: self.loss_reduction,
        }
    }

    pub fn noise(&self) -> NoiseConfig {
        NoiseConfig {
            missing_view_count: self.missing_views,
            occluder_scale: self.occluder_scale,
            clutter_count: self.clutter_count,
            noise_seed: self.noise_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generate_options().validate()?;
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.noise()
            .validate(self.views)
            .map_err(|e| Error::Config(config_reason(e)))?;
        if self.f1_k == 0 {
            return Err(Error::Config("f1_k must be positive".into()));
        }
        Ok(())
    }
}

fn config_reason(e: Error) -> String {
    match e {
        Error::Config(m) | Error::Argument(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_module_defaults() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.model_config(), ModelConfig::default());
        assert_eq!(c.train_config(), TrainConfig::default());
    }

    #[test]
    fn text_roundtrip() {
        let mut c = RunConfig::default();
        c.set("variant", "DoubleLSTMs").unwrap();
        c.set("channels", "4, 8").unwrap();
        c.set("stage2_lr", "0.0005").unwrap();
        c.set("export_confidence", "true").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("seed 1").is_err());
        assert!(RunConfig::parse("seed = x").is_err());
        let c = RunConfig::parse("# comment\n\nseed = 5 # trailing\n").unwrap();
        assert_eq!(c.seed, 5);
    }

    #[test]
    fn validation() {
        let c = RunConfig::parse("class_count = 1").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = RunConfig::parse("missing_views = 13").unwrap();
        assert!(c.validate().is_err());
    }
}
