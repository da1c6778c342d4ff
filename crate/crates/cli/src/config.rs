//! `key = value` settings files.

use ftta_core::data::BenchmarkConfig;
use ftta_core::harness::AdaptationConfig;
use ftta_core::importance::PrePassConfig;
use ftta_core::model::Arch;
use ftta_core::optim::OptimizerConfig;
use ftta_core::train::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum Toggle {
    Off,
    /// Enabled with the method's default value.
    Default,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub bench: BenchmarkConfig,
    pub arch: Arch,
    pub train: TrainConfig,
    pub optimizer: String,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub css: Toggle,
    pub cr: Toggle,
    pub bn_blend: f64,
    pub prepass_subset: Option<usize>,
    pub prepass_ratio: f64,
    pub include_bias: bool,
    pub ratios: Vec<f64>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            bench: BenchmarkConfig::default(),
            arch: Arch::CnnSmall,
            train: TrainConfig::default(),
            optimizer: "sgd".into(),
            lr: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            css: Toggle::Off,
            cr: Toggle::Off,
            bn_blend: 1.0,
            prepass_subset: None,
            prepass_ratio: 0.9,
            include_bias: false,
            ratios: vec![0.0, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95],
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {v:?}")))
}

fn toggle(key: &str, v: &str) -> Result<Toggle, CliError> {
    match v {
        "off" | "false" => Ok(Toggle::Off),
        "on" | "true" | "default" => Ok(Toggle::Default),
        _ => num(key, v).map(Toggle::Value),
    }
}

impl Settings {
    /// Parse settings text on top of the defaults. Blank lines and `#` comments are
    /// ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut s = Settings::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            s.set(key.trim(), value.trim())?;
        }
        Ok(s)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        match key {
            "classes" => self.bench.classes = num(key, v)?,
            "size" => self.bench.size = num(key, v)?,
            "train_count" => self.bench.train_count = num(key, v)?,
            "test_count" => self.bench.test_count = num(key, v)?,
            "segment_count" => self.bench.segment_count = num(key, v)?,
            "severity" => self.bench.severity = num(key, v)?,
            "batch_size" => self.bench.batch_size = num(key, v)?,
            "arch" => self.arch = v.parse().map_err(|e: ftta_core::Error| CliError::Config(e.to_string()))?,
            "epochs" => self.train.epochs = num(key, v)?,
            "train_lr" => self.train.lr = num(key, v)?,
            "train_momentum" => self.train.momentum = num(key, v)?,
            "train_batch_size" => self.train.batch_size = num(key, v)?,
            "optimizer" => match v {
                "sgd" | "adam" => self.optimizer = v.to_string(),
                _ => return Err(CliError::Config(format!("optimizer: expected sgd or adam, got {v:?}"))),
            },
            "lr" => self.lr = num(key, v)?,
            "momentum" => self.momentum = num(key, v)?,
            "beta1" => self.beta1 = num(key, v)?,
            "beta2" => self.beta2 = num(key, v)?,
            "css" => self.css = toggle(key, v)?,
            "cr" => self.cr = toggle(key, v)?,
            "bn_blend" => self.bn_blend = num(key, v)?,
            "prepass_subset" => self.prepass_subset = Some(num(key, v)?),
            "prepass_ratio" => self.prepass_ratio = num(key, v)?,
            "include_bias" => self.include_bias = num(key, v)?,
            "ratios" => {
                self.ratios = v
                    .split(',')
                    .map(|r| num(key, r.trim()))
                    .collect::<Result<_, _>>()?;
                if self.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
                    return Err(CliError::Config("ratios must lie in [0, 1]".into()));
                }
            }
            _ => return Err(CliError::Config(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        match self.optimizer.as_str() {
            "adam" => OptimizerConfig::Adam {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: 1e-8,
            },
            _ => OptimizerConfig::Sgd {
                lr: self.lr,
                momentum: self.momentum,
            },
        }
    }

    /// Adaptation settings for `method`; validated so that bad values surface as
    /// configuration errors.
    pub fn adaptation(&self, method: ftta_core::harness::Method, seed: u64) -> Result<AdaptationConfig, CliError> {
        let cfg = AdaptationConfig {
            method,
            optimizer: self.optimizer_config(),
            prepass: PrePassConfig {
                subset_size: self.prepass_subset,
                prune_ratio: self.prepass_ratio,
                seed: 0,
                include_bias: self.include_bias,
            },
            css: match self.css {
                Toggle::Off => None,
                Toggle::Default => Some(AdaptationConfig::default_css_threshold(self.bench.classes)),
                Toggle::Value(t) => Some(t),
            },
            cr: match self.cr {
                Toggle::Off => None,
                Toggle::Default => Some(1.0),
                Toggle::Value(l) => Some(l),
            },
            bn_blend: self.bn_blend,
            seed,
            force_zero_ratios: false,
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}
