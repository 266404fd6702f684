//! Flat `key = value` run configuration shared by every command.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! repeated keys are rejected. [`RunConfig::to_text`] writes every key, so
//! its output parses back to an identical configuration.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use crate::data::PreprocessConfig;
use crate::error::{Error, Result};
use crate::models::EncoderSpec;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub encoder: EncoderSpec,
    pub hidden_size: usize,
    pub vocab_threshold: usize,
    /// Greedy decoding length cap, `<start>` and `<end>` included.
    pub max_len: usize,
    pub probe_l2: f64,
}

const KEYS: &[&str] = &[
    "resize_to",
    "crop_size",
    "hflip_prob",
    "channel_mean",
    "channel_std",
    "batch_size",
    "epochs",
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "label_fraction",
    "seed",
    "optimizer",
    "grad_clip",
    "lr_decay",
    "freeze_encoder_epochs",
    "rotation_mode",
    "stem_channels",
    "encoder_stages",
    "embed_size",
    "hidden_size",
    "skip_connections",
    "feature_norm",
    "vocab_threshold",
    "max_len",
    "probe_l2",
];

impl RunConfig {
    fn with_train(train: TrainConfig) -> Self {
        Self {
            preprocess: PreprocessConfig::default(),
            train,
            encoder: EncoderSpec::default(),
            hidden_size: 512,
            vocab_threshold: 4,
            max_len: 20,
            probe_l2: 1e-4,
        }
    }

    /// Defaults for rotation pretraining and probing.
    pub fn pretext() -> Self {
        Self::with_train(TrainConfig::pretext())
    }

    /// Defaults for caption training and evaluation.
    pub fn captioning() -> Self {
        Self::with_train(TrainConfig::captioning())
    }

    /// Applies the settings in `text` on top of `self`.
    pub fn apply(mut self, text: &str, origin: &Path) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, found {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(parse_err(format!("unknown key {key:?}")));
            }
            if !seen.insert(key.to_string()) {
                return Err(parse_err(format!("key {key:?} given twice")));
            }
            self.set(key, value).map_err(parse_err)?;
        }
        self.validate()?;
        Ok(self)
    }

    /// Reads `path` over `self`; `None` keeps `self` unchanged.
    pub fn load(self, path: Option<&Path>) -> Result<Self> {
        match path {
            None => {
                self.validate()?;
                Ok(self)
            }
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                self.apply(&text, p)
            }
        }
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let p = &mut self.preprocess;
        let t = &mut self.train;
        match key {
            "resize_to" => p.resize_to = num(key, value)?,
            "crop_size" => p.crop_size = num(key, value)?,
            "hflip_prob" => p.hflip_prob = num(key, value)?,
            "channel_mean" => p.channel_mean = triple(key, value)?,
            "channel_std" => p.channel_std = triple(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "learning_rate" => t.learning_rate = num(key, value)?,
            "beta1" => t.beta1 = num(key, value)?,
            "beta2" => t.beta2 = num(key, value)?,
            "epsilon" => t.epsilon = num(key, value)?,
            "label_fraction" => t.label_fraction = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "optimizer" => t.optimizer = value.parse().map_err(|e: Error| e.to_string())?,
            "grad_clip" => {
                t.grad_clip = match value {
                    "none" | "off" => None,
                    v => Some(num(key, v)?),
                }
            }
            "lr_decay" => t.lr_decay = num(key, value)?,
            "freeze_encoder_epochs" => t.freeze_encoder_epochs = num(key, value)?,
            "rotation_mode" => t.rotation_mode = value.parse().map_err(|e: Error| e.to_string())?,
            "stem_channels" => self.encoder.stem_channels = num(key, value)?,
            "encoder_stages" => self.encoder.stages = EncoderSpec::parse_stages(value).map_err(|e| e.to_string())?,
            "embed_size" => self.encoder.embed_size = num(key, value)?,
            "hidden_size" => self.hidden_size = num(key, value)?,
            "skip_connections" => self.encoder.skip_connections = num(key, value)?,
            "feature_norm" => self.encoder.feature_norm = value.parse().map_err(|e: Error| e.to_string())?,
            "vocab_threshold" => self.vocab_threshold = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "probe_l2" => self.probe_l2 = num(key, value)?,
            _ => unreachable!("key list and setter disagree on {key}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.train.validate()?;
        self.encoder.validate()?;
        if self.hidden_size == 0 {
            return Err(Error::Config("hidden_size must be >= 1".into()));
        }
        if self.vocab_threshold == 0 {
            return Err(Error::Config("vocab_threshold must be >= 1".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be >= 2".into()));
        }
        if !(self.probe_l2 >= 0.0 && self.probe_l2.is_finite()) {
            return Err(Error::Config("probe_l2 must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Every setting, one `key = value` per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let p = &self.preprocess;
        let t = &self.train;
        let joined = |v: &[f64; 3]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let values = [
            p.resize_to.to_string(),
            p.crop_size.to_string(),
            p.hflip_prob.to_string(),
            joined(&p.channel_mean),
            joined(&p.channel_std),
            t.batch_size.to_string(),
            t.epochs.to_string(),
            t.learning_rate.to_string(),
            t.beta1.to_string(),
            t.beta2.to_string(),
            t.epsilon.to_string(),
            t.label_fraction.to_string(),
            t.seed.to_string(),
            t.optimizer.to_string(),
            t.grad_clip.map_or("none".to_string(), |c| c.to_string()),
            t.lr_decay.to_string(),
            t.freeze_encoder_epochs.to_string(),
            t.rotation_mode.to_string(),
            self.encoder.stem_channels.to_string(),
            self.encoder.stages_string(),
            self.encoder.embed_size.to_string(),
            self.hidden_size.to_string(),
            self.encoder.skip_connections.to_string(),
            self.encoder.feature_norm.to_string(),
            self.vocab_threshold.to_string(),
            self.max_len.to_string(),
            self.probe_l2.to_string(),
        ];
        KEYS.iter()
            .zip(values.iter())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("bad value {value:?} for {key}"))
}

fn triple(key: &str, value: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|s| num(key, s.trim()))
        .collect::<std::result::Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| format!("{key} needs exactly three comma-separated numbers"))
}

/// Independent seed for the named component, derived from one run seed.
pub fn child_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the seed through splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
