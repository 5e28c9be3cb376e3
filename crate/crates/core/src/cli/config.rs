use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::bwmap::{GeneratorConfig, Weighting, DEFAULT_BETA, DEFAULT_GAMMA, DEFAULT_ITERATIONS};
use crate::error::{Error, Result};
use crate::nnkernel::{LrSchedule, NonFinitePolicy, QuantMode, StagePolicy, TrainConfig};

pub const DEFAULT_MODEL: &str = "conv:16,relu,maxpool,conv:32,relu,maxpool,linear:10";
pub const DATA_ROOT_ENV: &str = "BLOCKPREC_DATA_ROOT";

/// Run mode as written in config files and on the command line:
/// `dynamic`, `static<b>` (for example `static8`) or `fp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode(pub QuantMode);

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let mode = match s.as_str() {
            "dynamic" => QuantMode::Dynamic,
            "fp" | "full-precision" | "full_precision" => QuantMode::FullPrecision,
            _ => {
                let bits = s
                    .strip_prefix("static-uniform-")
                    .or_else(|| s.strip_prefix("static"))
                    .and_then(|b| b.parse::<u8>().ok())
                    .ok_or_else(|| Error::config(format!("unknown mode `{s}` (dynamic, static<b>, fp)")))?;
                if bits > crate::bfp::MAX_BITWIDTH {
                    return Err(Error::config(format!("static bit-width {bits} exceeds 8")));
                }
                QuantMode::StaticUniform(bits)
            }
        };
        Ok(Mode(mode))
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            QuantMode::Dynamic => f.write_str("dynamic"),
            QuantMode::StaticUniform(b) => write!(f, "static{b}"),
            QuantMode::FullPrecision => f.write_str("fp"),
        }
    }
}

impl Serialize for Mode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    Mnist,
    Cifar10,
    /// Generated class templates plus noise; needs no files.
    Synthetic,
}

impl DatasetId {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub id: DatasetId,
    /// Directory holding the files; empty means `$BLOCKPREC_DATA_ROOT/<id>`
    /// (or `data/<id>`).
    pub path: String,
    /// Use only the first `train_subset` training samples (0 = all).
    pub train_subset: usize,
    pub val_subset: usize,
    /// Sample counts for the synthetic set.
    pub synthetic_train: usize,
    pub synthetic_val: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            id: DatasetId::Mnist,
            path: String::new(),
            train_subset: 0,
            val_subset: 0,
            synthetic_train: 1024,
            synthetic_val: 256,
        }
    }
}

impl DatasetConfig {
    pub fn resolve_path(&self) -> PathBuf {
        if !self.path.is_empty() {
            return PathBuf::from(&self.path);
        }
        let root = std::env::var_os(DATA_ROOT_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from);
        root.join(self.id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantConfig {
    pub alpha_weights: f64,
    pub alpha_activations: f64,
    pub beta: f64,
    pub gamma: f64,
    pub iterations: usize,
    /// Tune λ each epoch; when false the raw estimate is used.
    pub tuning: bool,
    pub weighting: Weighting,
    pub non_finite: NonFinitePolicy,
    pub policy: StagePolicy,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            alpha_weights: 4.0,
            alpha_activations: 4.0,
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            iterations: DEFAULT_ITERATIONS,
            tuning: true,
            weighting: Weighting::Unweighted,
            non_finite: NonFinitePolicy::Abort,
            policy: StagePolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr: 0.1,
            warmup_epochs: 0,
            decay_epochs: Vec::new(),
            decay_factor: 0.2,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Comma-separated layer list, e.g. `conv:16,relu,maxpool,linear:10`.
    pub model: String,
    pub epochs: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Where artifacts go; relative paths resolve against the working directory.
    pub output_dir: String,
    pub dataset: DatasetConfig,
    pub quant: QuantConfig,
    pub schedule: ScheduleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: DEFAULT_MODEL.into(),
            epochs: 10,
            seed: 1,
            mode: Mode(QuantMode::Dynamic),
            output_dir: "runs/default".into(),
            dataset: DatasetConfig::default(),
            quant: QuantConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.train_config()?.validate()?;
        if cfg.epochs == 0 {
            return Err(Error::config("epochs must be ≥ 1"));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::internal(format!("serializing config: {e}")))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let s = &self.schedule;
        let q = &self.quant;
        Ok(TrainConfig {
            batch_size: s.batch_size,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
            lr: LrSchedule {
                initial: s.lr,
                warmup_epochs: s.warmup_epochs,
                decay_epochs: s.decay_epochs.clone(),
                decay_factor: s.decay_factor,
            },
            mode: self.mode.0,
            policy: q.policy,
            alpha_weights: q.alpha_weights,
            alpha_activations: q.alpha_activations,
            beta: q.beta,
            iterations: q.iterations,
            generator: GeneratorConfig {
                gamma: q.gamma,
                weighting: q.weighting,
                tuning: q.tuning,
            },
            non_finite: q.non_finite,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.schedule.batch_size, 128);
        assert_eq!(cfg.schedule.lr, 0.1);
        assert_eq!(cfg.model, DEFAULT_MODEL);
        let text = cfg.to_toml().unwrap();
        let again = RunConfig::parse(&text).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_toml().unwrap(), text);
    }

    #[test]
    fn parses_a_full_file() {
        let text = r#"
model = "conv:8,relu,maxpool,linear:10"
epochs = 3
seed = 42
mode = "static8"

[dataset]
id = "synthetic"
train_subset = 500

[quant]
alpha_weights = 3.0
alpha_activations = 2.5
gamma = 0.0
tuning = false
weighting = "compute"

[schedule]
batch_size = 64
decay_epochs = [2]
"#;
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.mode, Mode(QuantMode::StaticUniform(8)));
        assert_eq!(cfg.dataset.id, DatasetId::Synthetic);
        let tc = cfg.train_config().unwrap();
        assert_eq!(tc.alpha_activations, 2.5);
        assert!(!tc.generator.tuning);
        assert_eq!(tc.lr.decay_epochs, vec![2]);
        let again = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::parse("mode = \"static9\"").is_err());
        assert!(RunConfig::parse("mode = \"turbo\"").is_err());
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("[quant]\nalpha_weights = 9.0").is_err());
        assert!(RunConfig::parse("epochs = 0").is_err());
        assert!(RunConfig::parse("[schedule]\nbatch_size = 0").is_err());
    }

    #[test]
    fn mode_strings() {
        for (s, m) in [
            ("dynamic", QuantMode::Dynamic),
            ("static8", QuantMode::StaticUniform(8)),
            ("static-uniform-2", QuantMode::StaticUniform(2)),
            ("fp", QuantMode::FullPrecision),
        ] {
            assert_eq!(s.parse::<Mode>().unwrap().0, m);
        }
        assert_eq!(Mode(QuantMode::StaticUniform(2)).to_string(), "static2");
    }
}
