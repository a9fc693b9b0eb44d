//! Flat `key=value` configuration shared by run directories and the CLI.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::encoder::{AttentionMode, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::optim::AdamConfig;
use crate::tokenizer::TokenGrid;

use super::synthetic::{PatternFamily, SyntheticTaskConfig};

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// duplicate keys and lines without `=` are errors.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(Error::InvalidArgument(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.clone(), v).is_some() {
            return Err(Error::InvalidArgument(format!("line {}: duplicate key {k:?}", n + 1)));
        }
    }
    Ok(out)
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("invalid value {value:?} for key {key:?}")))
}

/// How a run learns its sequence of tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainMode {
    /// One trunk fine-tuned on every task in turn; a fresh head per task.
    ModelSequential,
    /// An independent trunk and head per task, all started from the same
    /// initial weights.
    ModelIncremental,
    /// A frozen shared trunk; per-task convolutional adapters and head.
    AdapterIncremental,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [
        TrainMode::ModelSequential,
        TrainMode::ModelIncremental,
        TrainMode::AdapterIncremental,
    ];

    /// Attention used by default: the adapter mode pairs adapters with
    /// factorized attention, the two baselines keep global attention.
    pub fn default_attention(self) -> AttentionMode {
        match self {
            TrainMode::AdapterIncremental => AttentionMode::Factorized,
            _ => AttentionMode::Global,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::ModelSequential => "model-seq",
            TrainMode::ModelIncremental => "model-inc",
            TrainMode::AdapterIncremental => "adapter-inc",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model-seq" => Ok(TrainMode::ModelSequential),
            "model-inc" => Ok(TrainMode::ModelIncremental),
            "adapter-inc" => Ok(TrainMode::AdapterIncremental),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode {other:?} (expected model-seq, model-inc or adapter-inc)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainOptions {
    /// Desk-scale schedule: 30 epochs of batch 16 with Adam at 3e-4.
    fn default() -> Self {
        TrainOptions {
            epochs: 30,
            batch_size: 16,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainOptions {
    /// Full-scale schedules for the three reference benchmarks, by name
    /// (`scv2`, `esc50`, `ave`).
    pub fn benchmark_preset(name: &str) -> Option<Self> {
        let (epochs, batch_size) = match name {
            "scv2" => (5, 128),
            "esc50" => (20, 32),
            "ave" => (15, 12),
            _ => return None,
        };
        Some(TrainOptions {
            epochs,
            batch_size,
            adam: AdamConfig::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.adam.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need epochs >= 1, batch_size >= 1 and lr > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Everything that determines a run, and nothing else: the same
/// `RunConfig` reproduces the same run bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: TrainMode,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainOptions,
    pub data: SyntheticTaskConfig,
    pub tasks: usize,
}

/// Keys accepted by [`RunConfig::apply`], in the order they are written.
pub const RUN_KEYS: &[&str] = &[
    "mode",
    "seed",
    "tasks",
    "attention",
    "embed_dim",
    "layers",
    "heads",
    "mlp_ratio",
    "bottleneck",
    "kernel",
    "stride",
    "epochs",
    "batch_size",
    "lr",
    "classes",
    "train_per_class",
    "test_per_class",
    "freq_bins",
    "frames",
    "family",
    "noise",
];

impl RunConfig {
    /// The committed desk-scale reference: d = 32, 2 layers, d' = 8,
    /// 3 synthetic 4-class tasks on 46 x 56 spectrograms (a 4 x 5 grid).
    pub fn reference(mode: TrainMode, seed: u64) -> Self {
        let data = SyntheticTaskConfig::reference(seed);
        let grid = grid_for(data.freq_bins, data.frames, 16, 10).expect("reference shape tokenizes");
        let mut model = ModelConfig::desk(grid);
        model.encoder.attention = mode.default_attention();
        RunConfig {
            mode,
            seed,
            model,
            train: TrainOptions::default(),
            data,
            tasks: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.tasks == 0 {
            return Err(Error::InvalidArgument("tasks must be >= 1".into()));
        }
        let grid = self.data_grid()?;
        if grid != self.model.pos_grid {
            return Err(Error::InvalidArgument(format!(
                "synthetic spectrogram grid {grid} differs from the position grid {}",
                self.model.pos_grid
            )));
        }
        Ok(())
    }

    /// Overrides fields from `key=value` pairs; unknown keys are rejected.
    /// The position grid follows the synthetic spectrogram shape.
    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            match k.as_str() {
                "mode" => self.mode = v.parse()?,
                "seed" => {
                    self.seed = parse_value(k, v)?;
                    self.data.seed = self.seed;
                }
                "tasks" => self.tasks = parse_value(k, v)?,
                "attention" => self.model.encoder.attention = v.parse()?,
                "embed_dim" => {
                    let d: usize = parse_value(k, v)?;
                    self.model.encoder.embed_dim = d;
                    self.model.tokenizer.embed_dim = d;
                    if !kv.contains_key("heads") {
                        self.model.encoder.heads = (d / 64).max(1);
                    }
                }
                "layers" => self.model.encoder.layers = parse_value(k, v)?,
                "heads" => self.model.encoder.heads = parse_value(k, v)?,
                "mlp_ratio" => self.model.encoder.mlp_ratio = parse_value(k, v)?,
                "bottleneck" => self.model.bottleneck = parse_value(k, v)?,
                "kernel" => self.model.tokenizer.kernel = parse_value(k, v)?,
                "stride" => self.model.tokenizer.stride = parse_value(k, v)?,
                "epochs" => self.train.epochs = parse_value(k, v)?,
                "batch_size" => self.train.batch_size = parse_value(k, v)?,
                "lr" => self.train.adam.lr = parse_value(k, v)?,
                "classes" => self.data.classes = parse_value(k, v)?,
                "train_per_class" => self.data.train_per_class = parse_value(k, v)?,
                "test_per_class" => self.data.test_per_class = parse_value(k, v)?,
                "freq_bins" => self.data.freq_bins = parse_value(k, v)?,
                "frames" => self.data.frames = parse_value(k, v)?,
                "family" => self.data.family = v.parse::<PatternFamily>()?,
                "noise" => self.data.noise = parse_value(k, v)?,
                other => return Err(Error::InvalidArgument(format!("unknown config key {other:?}"))),
            }
        }
        self.model.pos_grid = self.data_grid()?;
        Ok(())
    }

    /// Token grid of the synthetic spectrograms under the model's tokenizer.
    pub fn data_grid(&self) -> Result<TokenGrid> {
        let t = &self.model.tokenizer;
        grid_for(self.data.freq_bins, self.data.frames, t.kernel, t.stride)
    }

    /// Values for every key in [`RUN_KEYS`], in that order.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let d = &self.data;
        let values = [
            self.mode.to_string(),
            self.seed.to_string(),
            self.tasks.to_string(),
            m.encoder.attention.to_string(),
            m.embed_dim().to_string(),
            m.encoder.layers.to_string(),
            m.encoder.heads.to_string(),
            m.encoder.mlp_ratio.to_string(),
            m.bottleneck.to_string(),
            m.tokenizer.kernel.to_string(),
            m.tokenizer.stride.to_string(),
            self.train.epochs.to_string(),
            self.train.batch_size.to_string(),
            format!("{:e}", self.train.adam.lr),
            d.classes.to_string(),
            d.train_per_class.to_string(),
            d.test_per_class.to_string(),
            d.freq_bins.to_string(),
            d.frames.to_string(),
            d.family.to_string(),
            format!("{:e}", d.noise),
        ];
        RUN_KEYS.iter().copied().zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_kv().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Inverse of [`RunConfig::to_text`]; every key must be present.
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        for key in RUN_KEYS {
            if !kv.contains_key(*key) {
                return Err(Error::Format(format!("run config is missing key {key:?}")));
            }
        }
        let mut cfg = RunConfig::reference(TrainMode::AdapterIncremental, 0);
        cfg.apply(&kv)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Token grid of a `freq_bins x frames` spectrogram under this patch geometry.
pub fn grid_for(freq_bins: usize, frames: usize, kernel: usize, stride: usize) -> Result<TokenGrid> {
    let cfg = crate::tokenizer::TokenizerConfig {
        kernel,
        stride,
        ..crate::tokenizer::TokenizerConfig::new(1)
    };
    crate::tokenizer::token_grid(freq_bins, frames, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_parsing() {
        let kv = parse_kv("# c\n a = 1\n\nb=x=y\n").unwrap();
        assert_eq!(kv["a"], "1");
        assert_eq!(kv["b"], "x=y");
        assert!(parse_kv("a=1\na=2").is_err());
        assert!(parse_kv("novalue").is_err());
    }

    #[test]
    fn run_config_text_round_trip() {
        for mode in TrainMode::ALL {
            let cfg = RunConfig::reference(mode, 7);
            cfg.validate().unwrap();
            assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = RunConfig::reference(TrainMode::ModelSequential, 1);
        let kv = parse_kv("colour=blue").unwrap();
        assert!(cfg.apply(&kv).is_err());
    }

    #[test]
    fn presets() {
        assert_eq!(TrainOptions::benchmark_preset("scv2").unwrap().batch_size, 128);
        assert_eq!(TrainOptions::benchmark_preset("esc50").unwrap().epochs, 20);
        assert_eq!(TrainOptions::benchmark_preset("ave").unwrap().batch_size, 12);
        assert!(TrainOptions::benchmark_preset("imagenet").is_none());
    }
}
