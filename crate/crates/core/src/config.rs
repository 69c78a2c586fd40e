//! Run configuration as flat `section.key = value` TOML.
//!
//! Every field of [`RunConfig`] is addressable by its dotted path, either in
//! a file (`train.lr_policy = 0.001` or a `[train]` table) or through
//! `--set train.lr_policy=0.001` overrides. Unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backbone::BackboneConfig;
use crate::baselines::{FixedPatcher, DEFAULT_VARIANCE_WINDOW};
use crate::data::{SplitSpec, ETT_HOURLY_MONTH, ETT_MINUTE_MONTH};
use crate::error::{Error, Result};
use crate::eval::Selection;
use crate::partition::CompressionConfig;
use crate::policy::PolicyConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// CSV to train on; empty generates a piecewise-constant toy series.
    pub path: String,
    pub name: String,
    /// `auto`, `ett_hourly`, `ett_minute` or `ratio`.
    pub split: String,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    /// Channel names to keep; empty keeps all.
    pub channels: Vec<String>,
    pub zscore: bool,
    pub train_stride: usize,
    pub eval_stride: usize,
    /// Toy series length and channel count when `path` is empty.
    pub synth_length: usize,
    pub synth_channels: usize,
    pub synth_noise: f64,
    pub synth_min_segment: usize,
    pub synth_max_segment: usize,
    pub synth_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: String::new(),
            name: "toy".into(),
            split: "auto".into(),
            train_ratio: 0.7,
            val_ratio: 0.1,
            test_ratio: 0.2,
            channels: Vec::new(),
            zscore: true,
            train_stride: 1,
            eval_stride: 1,
            synth_length: 2000,
            synth_channels: 1,
            synth_noise: 0.1,
            synth_min_segment: 8,
            synth_max_segment: 48,
            synth_seed: 0,
        }
    }
}

impl DataConfig {
    /// `auto` picks the month borders for files named like ETTh*/ETTm*.
    pub fn split_spec(&self) -> Result<SplitSpec> {
        let stem = Path::new(&self.path)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        match self.split.as_str() {
            "ett_hourly" => Ok(SplitSpec::EttMonths { rows_per_month: ETT_HOURLY_MONTH }),
            "ett_minute" => Ok(SplitSpec::EttMonths { rows_per_month: ETT_MINUTE_MONTH }),
            "auto" if stem.starts_with("etth") => Ok(SplitSpec::EttMonths { rows_per_month: ETT_HOURLY_MONTH }),
            "auto" if stem.starts_with("ettm") => Ok(SplitSpec::EttMonths { rows_per_month: ETT_MINUTE_MONTH }),
            "auto" | "ratio" => Ok(SplitSpec::Ratios {
                train: self.train_ratio,
                val: self.val_ratio,
                test: self.test_ratio,
            }),
            other => Err(Error::Config(format!("data.split: unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatcherConfig {
    /// `reinpatch`, `static`, `random` or `variance`.
    pub kind: String,
    pub patch_size: usize,
    /// Rate for the random and variance patchers.
    pub rate: f64,
    pub window: usize,
    /// Pretrained patcher to load frozen instead of learning one.
    pub pretrained: String,
    /// How the learned policy picks boundaries at evaluation time:
    /// `modal`, `sample`, `expected_k` or `topk` (at `compression.target_rate`).
    pub selection: String,
}

impl Default for PatcherConfig {
    fn default() -> Self {
        Self {
            kind: "reinpatch".into(),
            patch_size: 16,
            rate: 8.0,
            window: DEFAULT_VARIANCE_WINDOW,
            pretrained: String::new(),
            selection: "modal".into(),
        }
    }
}

impl PatcherConfig {
    pub fn selection(&self, target_rate: Option<f64>) -> Result<Selection> {
        Ok(match self.selection.as_str() {
            "modal" => Selection::Modal,
            "sample" => Selection::Sample,
            "expected_k" => Selection::ExpectedK,
            "topk" => Selection::TopK {
                rate: target_rate.ok_or_else(|| Error::Config("patcher.selection = topk needs compression.target_rate".into()))?,
            },
            other => return Err(Error::Config(format!("patcher.selection: unknown selection `{other}`"))),
        })
    }

    /// `None` means the learned policy.
    pub fn fixed(&self) -> Result<Option<FixedPatcher>> {
        Ok(match self.kind.as_str() {
            "reinpatch" => None,
            "static" => Some(FixedPatcher::Static { patch_size: self.patch_size }),
            "random" => Some(FixedPatcher::Random { rate: self.rate }),
            "variance" => Some(FixedPatcher::Variance {
                rate: self.rate,
                window: self.window,
            }),
            other => return Err(Error::Config(format!("patcher.kind: unknown patcher `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelRates {
    /// Minimum rates for levels above the first.
    pub level_rates: Vec<f64>,
    pub target_rate: Option<f64>,
}

impl Default for LevelRates {
    fn default() -> Self {
        Self {
            level_rates: Vec::new(),
            target_rate: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub backbone: BackboneConfig,
    pub policy: PolicyConfig,
    pub compression: LevelRates,
    pub patcher: PatcherConfig,
}

impl RunConfig {
    /// Small piecewise-constant forecasting setup (look-back 64, horizon 16,
    /// minimum rate 4) that trains in minutes on one core.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.data.synth_length = 20_000;
        c.data.synth_noise = 0.05;
        c.data.synth_min_segment = 8;
        c.data.synth_max_segment = 48;
        c.data.eval_stride = 16;
        c.backbone.lookback = 64;
        c.backbone.horizon = 16;
        c.backbone.d_model = 16;
        c.backbone.d_latent = 32;
        c.backbone.heads = 2;
        c.backbone.latent_depth = 1;
        c.backbone.encoder_depth = 0;
        c.backbone.decoder_depth = 0;
        c.policy.d_patch = 16;
        c.policy.depth = 1;
        c.policy.heads = 2;
        c.policy.context_limit = 64;
        c.train.min_rate = 4.0;
        c.train.batch_size = 8;
        c.train.lr_backbone = 1e-3;
        c.train.lr_policy = 1e-3;
        c.train.epochs = 100;
        c.train.max_steps = 1500;
        c.patcher.selection = "expected_k".into();
        c
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_toml(text)?;
        Ok(cfg)
    }

    /// Overlay the keys present in `text`.
    pub fn merge_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let mut tree = serde_json::to_value(&*self)?;
        for (section, body) in table {
            match body {
                toml::Value::Table(fields) => {
                    for (key, value) in fields {
                        if let toml::Value::Table(_) = value {
                            return Err(Error::UnknownKey(format!("{section}.{key}")));
                        }
                        assign(&mut tree, &section, &key, to_json(value)?)?;
                    }
                }
                _ => return Err(Error::UnknownKey(section)),
            }
        }
        *self = from_tree(tree)?;
        Ok(())
    }

    /// Apply one `section.key=value` override. Values parse as TOML; bare
    /// words that are not valid TOML are taken as strings.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::UnknownKey(path.trim().to_string()))?;
        let raw = raw.trim();
        let value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(mut t) => to_json(t.remove("v").expect("parsed key"))?,
            Err(_) => Value::String(raw.to_string()),
        };
        let mut tree = serde_json::to_value(&*self)?;
        assign(&mut tree, section, key, value)?;
        *self = from_tree(tree)?;
        Ok(())
    }

    pub fn compression(&self) -> Result<CompressionConfig> {
        let mut c = self.train.compression()?.with_level_rates(self.compression.level_rates.clone())?;
        c.target_rate = self.compression.target_rate;
        c.validate()?;
        Ok(c)
    }

    /// Every addressable key with its current value, sorted.
    pub fn to_flat_toml(&self) -> Result<String> {
        let tree = serde_json::to_value(self)?;
        let mut out = String::new();
        if let Value::Object(sections) = tree {
            for (section, body) in sections {
                if let Value::Object(fields) = body {
                    for (key, value) in fields {
                        if value.is_null() {
                            continue;
                        }
                        let v: toml::Value = serde_json::from_value(value)?;
                        out.push_str(&format!("{section}.{key} = {v}\n"));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn to_json(v: toml::Value) -> Result<Value> {
    serde_json::to_value(v).map_err(Error::from)
}

fn assign(tree: &mut Value, section: &str, key: &str, value: Value) -> Result<()> {
    let fields: &mut Map<String, Value> = tree
        .get_mut(section)
        .and_then(Value::as_object_mut)
        .ok_or_else(|| Error::UnknownKey(format!("{section}.{key}")))?;
    match fields.get_mut(key) {
        Some(slot) => {
            *slot = value;
            Ok(())
        }
        None => Err(Error::UnknownKey(format!("{section}.{key}"))),
    }
}

fn from_tree(tree: Value) -> Result<RunConfig> {
    serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyMode;

    #[test]
    fn dotted_and_table_forms() {
        let a = RunConfig::from_toml("train.lr_policy = 0.01\npolicy.mode = \"causal\"\n").unwrap();
        let b = RunConfig::from_toml("[train]\nlr_policy = 0.01\n[policy]\nmode = \"causal\"\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.lr_policy, 0.01);
        assert_eq!(a.policy.mode, PolicyMode::Causal);
        assert_eq!(a.train.epochs, TrainConfig::default().epochs);
    }

    #[test]
    fn unknown_keys_are_named() {
        match RunConfig::from_toml("train.learning_rate = 1.0") {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "train.learning_rate"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(RunConfig::from_toml("nope = 1"), Err(Error::UnknownKey(_))));
        let mut c = RunConfig::default();
        assert!(matches!(c.set("backbone.widht=3"), Err(Error::UnknownKey(_))));
    }

    #[test]
    fn overrides_and_types() {
        let mut c = RunConfig::default();
        c.set("train.seed=7").unwrap();
        c.set("policy.init_boundary_rate=4").unwrap();
        c.set("data.path=/tmp/x.csv").unwrap();
        c.set("backbone.normalize=false").unwrap();
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.policy.init_boundary_rate, Some(4.0));
        assert_eq!(c.data.path, "/tmp/x.csv");
        assert!(!c.backbone.normalize);
        assert!(matches!(c.set("train.seed=\"x\""), Err(Error::Config(_))));
    }

    #[test]
    fn flat_dump_roundtrips() {
        let mut c = RunConfig::default();
        c.set("train.lr_backbone=0.0005").unwrap();
        c.set("compression.level_rates=[2.0]").unwrap();
        let text = c.to_flat_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn split_selection() {
        let mut d = DataConfig::default();
        d.path = "data/ETTh1.csv".into();
        assert_eq!(d.split_spec().unwrap(), SplitSpec::EttMonths { rows_per_month: ETT_HOURLY_MONTH });
        d.path = "weather.csv".into();
        assert!(matches!(d.split_spec().unwrap(), SplitSpec::Ratios { .. }));
        d.split = "bogus".into();
        assert!(d.split_spec().is_err());
    }
}
