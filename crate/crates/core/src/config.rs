//! Flat `key = value` configuration with `#` comments.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adacof::AdaCofConfig;
use crate::arch::{EnhanceConfig, UNetConfig};
use crate::compressor::Strategy;
use crate::data::GenParams;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Settings of one training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_halve_every: Option<usize>,
    /// Side of the random square crop used for training; `None` trains on full frames.
    pub crop: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data_dir: PathBuf,
    pub gen: GenParams,
    pub unet: UNetConfig,
    pub adacof: AdaCofConfig,
    pub loss: LossWeights,
    pub feature_loss: bool,
    pub train: TrainSettings,
    pub sparsify_epochs: usize,
    pub sparsify_p_epochs: usize,
    pub sparsify_lr: f64,
    pub lambda: f64,
    /// Number of training triplets used while sparsifying; 0 uses all.
    pub sparsify_subset: usize,
    /// Keep the feature term in the sparsification objective.
    pub sparsify_feature_loss: bool,
    pub strategy: Strategy,
    pub retrain_epochs: usize,
    pub enhance: EnhanceConfig,
    pub enhance_epochs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            data_dir: PathBuf::from("data"),
            gen: GenParams::default(),
            unet: UNetConfig::default(),
            adacof: AdaCofConfig::default(),
            loss: LossWeights::default(),
            feature_loss: false,
            train: TrainSettings {
                epochs: 40,
                batch_size: 8,
                lr: 0.001,
                lr_halve_every: Some(20),
                crop: Some(32),
            },
            sparsify_epochs: 20,
            sparsify_p_epochs: 10,
            sparsify_lr: 0.01,
            lambda: 0.1,
            sparsify_subset: 0,
            sparsify_feature_loss: false,
            strategy: Strategy::Min,
            retrain_epochs: 40,
            enhance: EnhanceConfig::default(),
            enhance_epochs: 20,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {v:?} for {key}"))),
    }
}

fn parse_opt(key: &str, v: &str) -> Result<Option<usize>> {
    match v {
        "none" | "0" => Ok(None),
        _ => parse(key, v).map(Some),
    }
}

fn parse_range(key: &str, v: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok((parse(key, a)?, parse(key, b)?)),
        _ => Err(Error::Config(format!("{key} expects two comma-separated numbers"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn opt(v: Option<usize>) -> String {
    v.map_or("none".into(), |n| n.to_string())
}

impl PipelineConfig {
    /// Set one key; used for both file lines and command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "data_dir" => self.data_dir = PathBuf::from(v),
            "frame_size" => self.gen.size = parse(key, v)?,
            "train_count" => self.gen.train_count = parse(key, v)?,
            "val_count" => self.gen.val_count = parse(key, v)?,
            "min_shapes" => self.gen.min_shapes = parse(key, v)?,
            "max_shapes" => self.gen.max_shapes = parse(key, v)?,
            "velocity_range" => self.gen.velocity = parse_range(key, v)?,
            "rotation_range" => self.gen.rotation = parse_range(key, v)?,
            "widths" => self.unet.widths = parse_list(key, v)?,
            "head_width" => self.unet.head_width = parse(key, v)?,
            "kernel_size" => self.adacof.kernel_size = parse(key, v)?,
            "dilation" => self.adacof.dilation = parse(key, v)?,
            "lambda_vgg" => self.loss.lambda_vgg = parse(key, v)?,
            "lambda_tv" => self.loss.lambda_tv = parse(key, v)?,
            "epsilon" => self.loss.epsilon = parse(key, v)?,
            "feature_loss" => self.feature_loss = parse_bool(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "lr_halve_every" => self.train.lr_halve_every = parse_opt(key, v)?,
            "crop" => self.train.crop = parse_opt(key, v)?,
            "sparsify_epochs" => self.sparsify_epochs = parse(key, v)?,
            "sparsify_p_epochs" => self.sparsify_p_epochs = parse(key, v)?,
            "sparsify_lr" => self.sparsify_lr = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "sparsify_subset" => self.sparsify_subset = parse(key, v)?,
            "sparsify_feature_loss" => self.sparsify_feature_loss = parse_bool(key, v)?,
            "strategy" => self.strategy = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "retrain_epochs" => self.retrain_epochs = parse(key, v)?,
            "enhance_epochs" => self.enhance_epochs = parse(key, v)?,
            "pyramid_widths" => self.enhance.pyramid_widths = parse_list(key, v)?,
            "one_by_one" => self.enhance.one_by_one = parse_bool(key, v)?,
            "path_select" => self.enhance.path_select = parse_bool(key, v)?,
            "grid_rows" => self.enhance.grid_rows = parse(key, v)?,
            "grid_cols" => self.enhance.grid_cols = parse(key, v)?,
            "grid_widths" => self.enhance.grid_widths = parse_list(key, v)?,
            "enhance_head_width" => self.enhance.head_width = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Apply every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.adacof.validate()?;
        self.loss.validate()?;
        if self.unet.widths.is_empty() || self.unet.widths.contains(&0) || self.unet.head_width == 0 {
            return Err(Error::Config("widths and head_width must be positive".into()));
        }
        if self.train.batch_size == 0 || !(self.train.lr > 0.0) || !(self.sparsify_lr > 0.0) {
            return Err(Error::Config("batch_size, lr and sparsify_lr must be positive".into()));
        }
        if self.sparsify_p_epochs > self.sparsify_epochs {
            return Err(Error::Config("sparsify_p_epochs exceeds sparsify_epochs".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if let Some(c) = self.train.crop {
            if c > self.gen.size {
                return Err(Error::Config(format!("crop {c} exceeds frame size {}", self.gen.size)));
            }
        }
        Ok(())
    }

    /// The config in file syntax; parsing it back yields `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("frame_size", self.gen.size.to_string());
        kv("train_count", self.gen.train_count.to_string());
        kv("val_count", self.gen.val_count.to_string());
        kv("min_shapes", self.gen.min_shapes.to_string());
        kv("max_shapes", self.gen.max_shapes.to_string());
        kv("velocity_range", format!("{},{}", self.gen.velocity.0, self.gen.velocity.1));
        kv("rotation_range", format!("{},{}", self.gen.rotation.0, self.gen.rotation.1));
        kv("widths", join(&self.unet.widths));
        kv("head_width", self.unet.head_width.to_string());
        kv("kernel_size", self.adacof.kernel_size.to_string());
        kv("dilation", self.adacof.dilation.to_string());
        kv("lambda_vgg", self.loss.lambda_vgg.to_string());
        kv("lambda_tv", self.loss.lambda_tv.to_string());
        kv("epsilon", self.loss.epsilon.to_string());
        kv("feature_loss", self.feature_loss.to_string());
        kv("epochs", self.train.epochs.to_string());
        kv("batch_size", self.train.batch_size.to_string());
        kv("lr", self.train.lr.to_string());
        kv("lr_halve_every", opt(self.train.lr_halve_every));
        kv("crop", opt(self.train.crop));
        kv("sparsify_epochs", self.sparsify_epochs.to_string());
        kv("sparsify_p_epochs", self.sparsify_p_epochs.to_string());
        kv("sparsify_lr", self.sparsify_lr.to_string());
        kv("lambda", self.lambda.to_string());
        kv("sparsify_subset", self.sparsify_subset.to_string());
        kv("sparsify_feature_loss", self.sparsify_feature_loss.to_string());
        kv("strategy", self.strategy.to_string());
        kv("retrain_epochs", self.retrain_epochs.to_string());
        kv("enhance_epochs", self.enhance_epochs.to_string());
        kv("pyramid_widths", join(&self.enhance.pyramid_widths));
        kv("one_by_one", self.enhance.one_by_one.to_string());
        kv("path_select", self.enhance.path_select.to_string());
        kv("grid_rows", self.enhance.grid_rows.to_string());
        kv("grid_cols", self.enhance.grid_cols.to_string());
        kv("grid_widths", join(&self.enhance.grid_widths));
        kv("enhance_head_width", self.enhance.head_width.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_lines_and_comments() {
        let c = PipelineConfig::parse_text("# toy\nseed = 5\nwidths = 8, 16 # small\n\nstrategy=max\ncrop = none\n").unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.unet.widths, vec![8, 16]);
        assert_eq!(c.strategy, Strategy::Max);
        assert_eq!(c.train.crop, None);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(PipelineConfig::parse_text("nope = 1").is_err());
        assert!(PipelineConfig::parse_text("seed").is_err());
        assert!(PipelineConfig::parse_text("seed = x").is_err());
        assert!(PipelineConfig::parse_text("sparsify_p_epochs = 50").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = PipelineConfig::default();
        c.lambda = 0.25;
        c.enhance.grid_widths = vec![4, 5, 6];
        assert_eq!(PipelineConfig::parse_text(&c.to_text()).unwrap(), c);
    }
}
