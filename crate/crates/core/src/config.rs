//! Run configuration: sectioned TOML with dotted-key overrides.
//!
//! Precedence is built-in defaults < file < overrides. Every section uses
//! `deny_unknown_fields`, so a misspelled key is reported with its path.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{load_cifar10, synth_split, LabeledImageDataset, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::evalkit::{KnnConfig, ProbeConfig};
use crate::model::EncoderSpec;
use crate::numcore::DType;

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Moco,
    Ressl,
    Msv,
    Mq,
    Msvq,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Moco, Method::Ressl, Method::Msv, Method::Mq, Method::Msvq];

    pub fn name(self) -> &'static str {
        match self {
            Method::Moco => "moco",
            Method::Ressl => "ressl",
            Method::Msv => "msv",
            Method::Mq => "mq",
            Method::Msvq => "msvq",
        }
    }

    /// Whether the second weak view of teacher 1 enters the loss.
    pub fn uses_view3(self) -> bool {
        matches!(self, Method::Msv | Method::Msvq)
    }

    /// Whether teacher 2 and the second queue are active.
    pub fn uses_queue2(self) -> bool {
        matches!(self, Method::Mq | Method::Msvq)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("pretraining.method", format!("unknown method `{s}` (expected moco, ressl, msv, mq or msvq)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub method: Method,
    pub seed: u64,
    pub epochs: u64,
    pub batch_size: usize,
    pub warmup_epochs: u64,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub m1: f64,
    pub m2: f64,
    pub tau_s: f64,
    pub tau_t: f64,
    pub queue_size: usize,
    pub precision: DType,
    /// Queues carry class labels for the false-negative analysis.
    pub analysis_mode: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            method: Method::Msvq,
            seed: 0,
            epochs: 200,
            batch_size: 256,
            warmup_epochs: 5,
            base_lr: 0.06,
            momentum: 0.9,
            weight_decay: 5e-4,
            m1: 0.99,
            m2: 0.95,
            tau_s: 0.1,
            tau_t: 0.04,
            queue_size: 4096,
            precision: DType::F32,
            analysis_mode: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

/// Flat dataset section; fields irrelevant to `kind` are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub class_count: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f32,
    pub seed: u64,
    pub dir: Option<PathBuf>,
    /// Stratified subset sizes for CIFAR desk runs (0 keeps the full split).
    pub train_subset: usize,
    pub test_subset: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            class_count: 4,
            per_class: 128,
            test_per_class: 64,
            channels: 3,
            height: 16,
            width: 16,
            noise_sigma: 0.1,
            seed: 7,
            dir: None,
            train_subset: 0,
            test_subset: 0,
        }
    }
}

impl DatasetConfig {
    /// Human-readable dataset name for reports.
    pub fn name(&self) -> String {
        match self.kind {
            DatasetKind::Synthetic => format!("synthetic-{}c-{}x{}", self.class_count, self.height, self.width),
            DatasetKind::Cifar10 => "cifar10".to_string(),
        }
    }

    /// `(channels, height, width)` of the images this section produces.
    pub fn dims(&self) -> (usize, usize, usize) {
        match self.kind {
            DatasetKind::Synthetic => (self.channels, self.height, self.width),
            DatasetKind::Cifar10 => (3, 32, 32),
        }
    }

    fn synth_spec(&self, split: Split) -> SynthSpec {
        SynthSpec {
            class_count: self.class_count,
            per_class: match split {
                Split::Train => self.per_class,
                Split::Test => self.test_per_class,
            },
            channels: self.channels,
            height: self.height,
            width: self.width,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn load(&self, split: Split) -> Result<LabeledImageDataset> {
        match self.kind {
            DatasetKind::Synthetic => synth_split(&self.synth_spec(split), split),
            DatasetKind::Cifar10 => {
                let dir = self
                    .dir
                    .as_deref()
                    .ok_or_else(|| Error::config("dataset.dir", "required for cifar10"))?;
                let full = load_cifar10(dir, split)?;
                let k = match split {
                    Split::Train => self.train_subset,
                    Split::Test => self.test_subset,
                };
                Ok(if k == 0 || k >= full.len() {
                    full
                } else {
                    full.stratified_subset(k, self.seed)
                })
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kind == DatasetKind::Synthetic {
            if self.class_count < 2 {
                return Err(Error::config("dataset.class_count", "need at least 2 classes"));
            }
            for (field, v) in [
                ("dataset.per_class", self.per_class),
                ("dataset.test_per_class", self.test_per_class),
                ("dataset.channels", self.channels),
                ("dataset.height", self.height),
                ("dataset.width", self.width),
            ] {
                if v == 0 {
                    return Err(Error::config(field, "must be positive"));
                }
            }
            if !(self.noise_sigma >= 0.0) {
                return Err(Error::config("dataset.noise_sigma", "must be non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Conv,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub conv1: usize,
    pub conv2: usize,
    /// Backbone width of the MLP encoder.
    pub feat_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub center_embeddings: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Conv,
            conv1: 32,
            conv2: 64,
            feat_dim: 64,
            hidden: 128,
            embed_dim: 32,
            center_embeddings: true,
        }
    }
}

impl EncoderConfig {
    pub fn to_spec(&self, (channels, height, width): (usize, usize, usize)) -> EncoderSpec {
        let mut spec = match self.kind {
            EncoderKind::Conv => {
                let mut spec = EncoderSpec::conv(channels, height, width);
                if let crate::model::BackboneSpec::Conv { conv1, conv2, .. } = &mut spec.backbone {
                    *conv1 = self.conv1;
                    *conv2 = self.conv2;
                }
                spec.hidden = self.hidden;
                spec.embed_dim = self.embed_dim;
                spec
            }
            EncoderKind::Mlp => EncoderSpec::mlp(channels, height, width, self.feat_dim, self.hidden, self.embed_dim),
        };
        spec.center_embeddings = self.center_embeddings;
        spec
    }
}

/// Everything a run needs: pretraining, fine-tuning, evaluation, data and encoder.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretraining: PretrainConfig,
    pub fine_tuning: ProbeConfig,
    pub evaluation: KnnConfig,
    pub dataset: DatasetConfig,
    pub encoder: EncoderConfig,
}

impl TrainConfig {
    /// Parses TOML text on top of the defaults, then applies `key=value`
    /// overrides such as `pretraining.tau_t=0.09`.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<config>", e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let merged = toml::to_string(&value).expect("table serializes");
        let cfg: TrainConfig =
            toml::from_str(&merged).map_err(|e: toml::de::Error| Error::config(error_field(&merged, &e), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        self.encoder.to_spec(self.dataset.dims())
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.pretraining;
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive and finite, got {v}")))
            }
        };
        let unit = |field: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(field, format!("must lie in [0, 1], got {v}")))
            }
        };
        positive("pretraining.tau_s", p.tau_s)?;
        positive("pretraining.tau_t", p.tau_t)?;
        if p.tau_t >= p.tau_s {
            return Err(Error::config(
                "pretraining.tau_t",
                format!(
                    "teacher temperature {} must be below student temperature {} (sharpening constraint tau_t < tau_s)",
                    p.tau_t, p.tau_s
                ),
            ));
        }
        unit("pretraining.m1", p.m1)?;
        unit("pretraining.m2", p.m2)?;
        unit("pretraining.momentum", p.momentum)?;
        if p.batch_size == 0 {
            return Err(Error::config("pretraining.batch_size", "must be at least 1"));
        }
        if p.batch_size < 2 && self.encoder.center_embeddings {
            return Err(Error::config(
                "pretraining.batch_size",
                "centered embeddings need at least 2 samples per batch",
            ));
        }
        if p.queue_size < p.batch_size {
            return Err(Error::config(
                "pretraining.queue_size",
                format!("queue size {} is smaller than batch size {}", p.queue_size, p.batch_size),
            ));
        }
        if !(p.base_lr >= 0.0 && p.base_lr.is_finite()) {
            return Err(Error::config("pretraining.base_lr", "must be non-negative"));
        }
        if !(p.weight_decay >= 0.0) {
            return Err(Error::config("pretraining.weight_decay", "must be non-negative"));
        }
        self.fine_tuning.validate()?;
        self.evaluation.validate()?;
        self.dataset.validate()?;
        self.encoder_spec().build_backbone::<f32>().map(|_| ())
    }
}

/// `section.key` of the line a deserialization error points at.
fn error_field(text: &str, e: &toml::de::Error) -> String {
    let Some(span) = e.span() else {
        return "<config>".to_string();
    };
    let mut section = String::new();
    let mut offset = 0;
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            section = trimmed.trim_matches(|c| c == '[' || c == ']').to_string();
        }
        if span.start < offset + line.len() + 1 {
            return match trimmed.split_once('=') {
                Some((key, _)) if section.is_empty() => key.trim().to_string(),
                Some((key, _)) => format!("{section}.{}", key.trim()),
                None if !section.is_empty() => section,
                None => "<config>".to_string(),
            };
        }
        offset += line.len() + 1;
    }
    "<config>".to_string()
}

/// Sets `a.b.c = value` inside a TOML table, creating sections as needed.
/// The value is parsed as TOML, falling back to a bare string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like section.key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty key segment"));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut table = root;
    for seg in &path[..path.len() - 1] {
        let entry = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{seg}` is not a section")))?;
    }
    table.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_table_values() {
        let c = TrainConfig::default();
        let p = &c.pretraining;
        assert_eq!((p.epochs, p.batch_size, p.warmup_epochs, p.queue_size), (200, 256, 5, 4096));
        assert_eq!((p.base_lr, p.m1, p.m2, p.weight_decay), (0.06, 0.99, 0.95, 5e-4));
        assert_eq!((p.tau_s, p.tau_t), (0.1, 0.04));
        assert_eq!((c.fine_tuning.epochs, c.fine_tuning.lr, c.fine_tuning.weight_decay), (100, 1.0, 0.0));
        assert_eq!(c.evaluation.k, 200);
        c.validate().unwrap();
    }

    #[test]
    fn overrides_beat_file() {
        let text = "[pretraining]\nepochs = 3\nmethod = \"mq\"\n";
        let c = TrainConfig::from_toml_str(text, &["pretraining.epochs=5".into(), "pretraining.method=ressl".into()]).unwrap();
        assert_eq!(c.pretraining.epochs, 5);
        assert_eq!(c.pretraining.method, Method::Ressl);
    }

    #[test]
    fn sharpening_violation_names_field() {
        let err = TrainConfig::from_toml_str("[pretraining]\ntau_t = 0.2\ntau_s = 0.1\n", &[]).unwrap_err();
        match err {
            Error::Config { field, reason } => {
                assert_eq!(field, "pretraining.tau_t");
                assert!(reason.contains("tau_t < tau_s"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_keys_and_methods() {
        assert!(TrainConfig::from_toml_str("[pretraining]\nepoch = 3\n", &[]).is_err());
        assert!(TrainConfig::from_toml_str("[pretraining]\nmethod = \"simclr\"\n", &[]).is_err());
        assert!(TrainConfig::from_toml_str("", &["pretraining.queue_size=8".into()]).is_err());
        assert!(TrainConfig::from_toml_str("", &["pretraining.m1=1.5".into()]).is_err());
        assert!(TrainConfig::from_toml_str("", &["nonsense".into()]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = TrainConfig::default();
        c.pretraining.method = Method::Msv;
        c.dataset.noise_sigma = 0.25;
        let back = TrainConfig::from_toml_str(&c.to_toml_string(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn method_gating() {
        assert!(!Method::Ressl.uses_view3() && !Method::Ressl.uses_queue2());
        assert!(Method::Msv.uses_view3() && !Method::Msv.uses_queue2());
        assert!(!Method::Mq.uses_view3() && Method::Mq.uses_queue2());
        assert!(Method::Msvq.uses_view3() && Method::Msvq.uses_queue2());
        assert_eq!("msvq".parse::<Method>().unwrap(), Method::Msvq);
    }
}
