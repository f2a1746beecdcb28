//! `key = value` run configuration with command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use conr::network::ModelConfig;
use conr::synth::SampleConfig;
use conr::training::{LossWeights, TrainConfig};
use conr::AdamWConfig;

use crate::CliError;

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "seed for data, weights and sampling"),
    ("resolution", "64", "square image side; a multiple of 16"),
    ("characters", "17", "characters generated by synth-data"),
    ("split_ratio", "16:1", "train:val ratio by character"),
    ("crop", "true", "random 7/8 crop of each sample"),
    ("color_jitter", "0", "brightness jitter of augmented views"),
    ("unlabeled_fraction", "0", "fraction of samples without dense-pose labels"),
    ("m", "4", "sheet views per training sample"),
    ("k", "4", "augmented detector views per target"),
    ("n", "4", "sheet views at evaluation"),
    ("iterations", "1000", "total optimisation steps"),
    ("batch_size", "4", "samples per step"),
    ("log_every", "10", "steps per metrics line"),
    ("prefetch", "2", "batches prepared ahead of the optimizer"),
    ("base_channels", "16", "renderer base width"),
    ("detector_channels", "8", "detector base width"),
    ("message_blocks", "3", "decoder blocks exchanging messages, 0 to 3"),
    ("cinn", "true", "cross-view exchange and weighted averaging"),
    ("grid_sample", "true", "flow warping of remote features"),
    ("share_encoder", "false", "detector reuses the renderer encoder"),
    ("learning_rate", "3e-4", "AdamW step size"),
    ("beta1", "0.9", "AdamW first moment decay"),
    ("beta2", "0.999", "AdamW second moment decay"),
    ("epsilon", "1e-8", "AdamW denominator floor"),
    ("weight_decay", "1e-4", "AdamW decoupled weight decay"),
    ("alpha", "1.0", "mask loss weight"),
    ("beta", "0.05", "perceptual loss weight"),
    ("gamma", "1.0", "photometric loss weight"),
    ("theta", "1.0", "detector consistency loss weight"),
    ("camera", "orthographic", "orthographic or perspective, for bake-udp"),
    ("fov_degrees", "30", "vertical field of view of the perspective camera"),
    ("camera_offset", "0,0,0", "world-space shift of the bake-udp camera"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str, origin: &Path) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{}:{}: expected key = value", origin.display(), i + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| CliError::Usage(format!("{}:{}: {e}", origin.display(), i + 1)))?;
        }
        Ok(())
    }

    /// `KEY=VALUE` from the command line.
    pub fn apply_override(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {pair:?} is not KEY=VALUE")))?;
        self.set(k.trim(), v)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.raw(key);
        raw.parse().map_err(|_| CliError::Usage(format!("config key {key}: cannot parse {raw:?}")))
    }

    /// The effective configuration, one `key = value` line per key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _, doc) in KEYS {
            let _ = writeln!(out, "# {doc}\n{k} = {}", self.values[*k]);
        }
        out
    }

    pub fn split_ratio(&self) -> Result<(usize, usize), CliError> {
        let raw = self.raw("split_ratio");
        raw.split_once(':')
            .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
            .ok_or_else(|| CliError::Usage(format!("split_ratio {raw:?} is not TRAIN:VAL")))
    }

    pub fn vec3(&self, key: &str) -> Result<[f64; 3], CliError> {
        let raw = self.raw(key);
        let parts: Vec<f64> = raw
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Usage(format!("config key {key}: {raw:?} is not x,y,z")))?;
        parts.try_into().map_err(|_| CliError::Usage(format!("config key {key}: {raw:?} is not x,y,z")))
    }

    pub fn model(&self) -> Result<ModelConfig, CliError> {
        Ok(ModelConfig {
            base_channels: self.get("base_channels")?,
            detector_channels: self.get("detector_channels")?,
            message_blocks: self.get("message_blocks")?,
            cinn: self.get("cinn")?,
            grid_sample: self.get("grid_sample")?,
            share_encoder: self.get("share_encoder")?,
        })
    }

    pub fn sample(&self) -> Result<SampleConfig, CliError> {
        let mut s = SampleConfig::new(self.get("m")?, self.get("k")?, self.get("resolution")?);
        s.crop = self.get("crop")?;
        s.color_jitter = self.get("color_jitter")?;
        Ok(s)
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            m: self.get("m")?,
            k: self.get("k")?,
            n: self.get("n")?,
            iterations: self.get("iterations")?,
            batch_size: self.get("batch_size")?,
            resolution: self.get("resolution")?,
            model: self.model()?,
            optimizer: AdamWConfig {
                learning_rate: self.get("learning_rate")?,
                beta1: self.get("beta1")?,
                beta2: self.get("beta2")?,
                epsilon: self.get("epsilon")?,
                weight_decay: self.get("weight_decay")?,
            },
            weights: LossWeights {
                alpha: self.get("alpha")?,
                beta: self.get("beta")?,
                gamma: self.get("gamma")?,
                theta: self.get("theta")?,
            },
            seed: self.get("seed")?,
            unlabeled_fraction: self.get("unlabeled_fraction")?,
            log_every: self.get("log_every")?,
            prefetch: self.get("prefetch")?,
        })
    }
}
