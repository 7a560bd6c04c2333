//! Training configuration in flat `key = value` form.
//!
//! ```text
//! # LeNet on Fashion-MNIST
//! epochs = 30
//! batch_size = 128
//! seed = 1
//! schedule = 1:0.001, 26:0.0001
//! augment = true
//! mean_subtract = false
//! backbone = 1x28x28: conv(6,5,1,0) > relu > maxpool(2,2) > conv(16,5,1,0) > relu > maxpool(2,2) > flatten
//! ```
//!
//! `#` starts a comment. Unknown or repeated keys are errors. Schedule
//! entries are `epoch:rate` with 1-based epochs; a rate applies from its
//! epoch until the next entry.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::optim::AdamConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Vec<(u32, f64)>,
    pub augment: bool,
    pub mean_subtract: bool,
    pub backbone: BackboneConfig,
    pub adam: AdamConfig,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Use only the first `n` training samples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            seed: 0,
            schedule: vec![(1, 1e-3), (26, 1e-4)],
            augment: false,
            mean_subtract: false,
            backbone: BackboneConfig::lenet(),
            adam: AdamConfig::default(),
            clip_norm: None,
            train_limit: None,
            test_limit: None,
        }
    }
}

const KEYS: [&str; 13] = [
    "epochs",
    "batch_size",
    "seed",
    "schedule",
    "augment",
    "mean_subtract",
    "backbone",
    "beta1",
    "beta2",
    "epsilon",
    "clip_norm",
    "train_limit",
    "test_limit",
];

fn parse_schedule(s: &str) -> std::result::Result<Vec<(u32, f64)>, String> {
    s.split(',')
        .map(|entry| {
            let (e, r) = entry
                .split_once(':')
                .ok_or_else(|| format!("schedule entry '{}' is not epoch:rate", entry.trim()))?;
            let e = e.trim().parse::<u32>().map_err(|_| format!("bad schedule epoch '{}'", e.trim()))?;
            let r = r.trim().parse::<f64>().map_err(|_| format!("bad schedule rate '{}'", r.trim()))?;
            Ok((e, r))
        })
        .collect()
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("expected a boolean, got '{s}'")),
    }
}

fn parse_num<T: FromStr>(s: &str) -> std::result::Result<T, String> {
    s.parse::<T>().map_err(|_| format!("bad number '{s}'"))
}

fn parse_opt<T: FromStr>(s: &str) -> std::result::Result<Option<T>, String> {
    if s == "none" {
        Ok(None)
    } else {
        parse_num(s).map(Some)
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        let mut last_line = 0;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            last_line = line;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config { line, message };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got '{content}'")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(err(format!("unknown key '{key}'")));
            }
            if seen.contains(&key) {
                return Err(err(format!("duplicate key '{key}'")));
            }
            seen.push(key);
            let applied: std::result::Result<(), String> = (|| {
                match key {
                    "epochs" => cfg.epochs = parse_num(value)?,
                    "batch_size" => cfg.batch_size = parse_num(value)?,
                    "seed" => cfg.seed = parse_num(value)?,
                    "schedule" => cfg.schedule = parse_schedule(value)?,
                    "augment" => cfg.augment = parse_bool(value)?,
                    "mean_subtract" => cfg.mean_subtract = parse_bool(value)?,
                    "backbone" => cfg.backbone = value.parse().map_err(|e: Error| e.to_string())?,
                    "beta1" => cfg.adam.beta1 = parse_num(value)?,
                    "beta2" => cfg.adam.beta2 = parse_num(value)?,
                    "epsilon" => cfg.adam.epsilon = parse_num(value)?,
                    "clip_norm" => cfg.clip_norm = parse_opt(value)?,
                    "train_limit" => cfg.train_limit = parse_opt(value)?,
                    "test_limit" => cfg.test_limit = parse_opt(value)?,
                    _ => unreachable!(),
                }
                Ok(())
            })();
            applied.map_err(err)?;
        }
        cfg.validate().map_err(|message| Error::Config { line: last_line, message })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if self.schedule.is_empty() {
            return Err("schedule needs at least one entry".into());
        }
        if self.schedule[0].0 != 1 {
            return Err("schedule must start at epoch 1".into());
        }
        if self.schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err("schedule epochs must be strictly increasing".into());
        }
        if self.schedule.iter().any(|(_, r)| !(r.is_finite() && *r > 0.0)) {
            return Err("learning rates must be positive".into());
        }
        let AdamConfig { beta1, beta2, epsilon } = self.adam;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(epsilon > 0.0) {
            return Err("epsilon must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err("clip_norm must be positive".into());
            }
        }
        if matches!(self.train_limit, Some(0)) || matches!(self.test_limit, Some(0)) {
            return Err("sample limits must be positive".into());
        }
        self.backbone.validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_at(&self, epoch: u32) -> f64 {
        self.schedule
            .iter()
            .take_while(|(e, _)| *e <= epoch)
            .last()
            .map_or(self.schedule[0].1, |(_, r)| *r)
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |o: Option<String>| o.unwrap_or_else(|| "none".into());
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "seed = {}", self.seed)?;
        let sched: Vec<String> = self.schedule.iter().map(|(e, r)| format!("{e}:{r:e}")).collect();
        writeln!(f, "schedule = {}", sched.join(", "))?;
        writeln!(f, "augment = {}", self.augment)?;
        writeln!(f, "mean_subtract = {}", self.mean_subtract)?;
        writeln!(f, "backbone = {}", self.backbone)?;
        writeln!(f, "beta1 = {:e}", self.adam.beta1)?;
        writeln!(f, "beta2 = {:e}", self.adam.beta2)?;
        writeln!(f, "epsilon = {:e}", self.adam.epsilon)?;
        writeln!(f, "clip_norm = {}", opt(self.clip_norm.map(|c| format!("{c:e}"))))?;
        writeln!(f, "train_limit = {}", opt(self.train_limit.map(|n| n.to_string())))?;
        writeln!(f, "test_limit = {}", opt(self.test_limit.map(|n| n.to_string())))
    }
}
