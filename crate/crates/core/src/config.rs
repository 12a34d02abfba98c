//! Training configuration and its flat `key = value` file format.
//!
//! Every field can be set from a config file; unknown keys are rejected so
//! typos fail loudly. `to_text` emits the same format, which is what gets
//! echoed into checkpoints.

use std::fmt;
use std::path::Path;

use crate::cadm::{CadmConfig, DropoutDim, SpatialMaxScope};
use crate::gcm::{FusionMode, GcmConfig};

#[derive(Debug)]
pub enum ConfigError {
    Io(String),
    BadLine(String),
    BadValue { key: String, value: String, expected: &'static str },
    UnknownKey(String),
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(msg) => write!(f, "{msg}"),
            ConfigError::BadLine(line) => write!(f, "config line is not `key = value`: {line:?}"),
            ConfigError::BadValue { key, value, expected } => {
                write!(f, "bad value {value:?} for {key} (expected {expected})")
            }
            ConfigError::UnknownKey(key) => write!(f, "unknown config key {key:?}"),
            ConfigError::Invalid(msg) => write!(f, "invalid config: {msg}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Iteration at which the learning rate switches to `lr_final`.
    pub decay_iteration: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub cadm_enabled: bool,
    pub cadm: CadmConfig,
    pub gcm_enabled: bool,
    pub gcm: GcmConfig,
    pub k_refine: usize,
    pub flip_augment: bool,
    /// Average the distillation head into inference scores.
    pub eval_include_distill: bool,
    pub data_dir: String,
    pub proposal_scales: Vec<usize>,
    pub proposal_ratios: Vec<f64>,
    pub proposal_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            decay_iteration: 1200,
            lr_initial: 5e-4,
            lr_final: 5e-5,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 4,
            seed: 7,
            cadm_enabled: true,
            cadm: CadmConfig::default(),
            gcm_enabled: true,
            gcm: GcmConfig::default(),
            k_refine: 3,
            flip_augment: false,
            eval_include_distill: true,
            data_dir: String::new(),
            proposal_scales: vec![21, 28],
            proposal_ratios: vec![1.0],
            proposal_stride: 6,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: v.into(),
            expected: "true/false",
        }),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str, expected: &'static str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::BadValue { key: key.into(), value: v.into(), expected })
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str, expected: &'static str) -> Result<Vec<T>, ConfigError> {
    v.split(',')
        .map(|item| parse_num(key, item.trim(), expected))
        .collect()
}

impl TrainConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "iterations" => self.iterations = parse_num(key, v, "integer")?,
            "decay_iteration" => self.decay_iteration = parse_num(key, v, "integer")?,
            "lr_initial" => self.lr_initial = parse_num(key, v, "number")?,
            "lr_final" => self.lr_final = parse_num(key, v, "number")?,
            "momentum" => self.momentum = parse_num(key, v, "number")?,
            "weight_decay" => self.weight_decay = parse_num(key, v, "number")?,
            "batch_size" => self.batch_size = parse_num(key, v, "integer")?,
            "seed" => self.seed = parse_num(key, v, "integer")?,
            "cadm_enabled" => self.cadm_enabled = parse_bool(key, v)?,
            "lambda1" => self.cadm.lambda1 = parse_num(key, v, "number")?,
            "lambda2" => self.cadm.lambda2 = parse_num(key, v, "number")?,
            "drop_rate" => self.cadm.drop_rate = parse_num(key, v, "number")?,
            "spatial_max_scope" => {
                self.cadm.spatial_max_scope = match v {
                    "row" => SpatialMaxScope::Row,
                    "map" => SpatialMaxScope::Map,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: v.into(),
                            expected: "row/map",
                        })
                    }
                }
            }
            "dropout_dim" => {
                self.cadm.dropout_dim = match v {
                    "channel" => DropoutDim::Channel,
                    "spatial" => DropoutDim::Spatial,
                    "cascade" => DropoutDim::Cascade,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: v.into(),
                            expected: "channel/spatial/cascade",
                        })
                    }
                }
            }
            "gcm_enabled" => self.gcm_enabled = parse_bool(key, v)?,
            "fusion_mode" => {
                self.gcm.fusion_mode = match v {
                    "multiplication" => FusionMode::Multiplication,
                    "addition" => FusionMode::Addition,
                    "multiplication_then_addition" => FusionMode::MultiplicationThenAddition,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: v.into(),
                            expected: "multiplication/addition/multiplication_then_addition",
                        })
                    }
                }
            }
            "bottleneck_ratio" => self.gcm.bottleneck_ratio = parse_num(key, v, "integer")?,
            "ln_eps" => self.gcm.ln_eps = parse_num(key, v, "number")?,
            "k_refine" => self.k_refine = parse_num(key, v, "integer")?,
            "flip_augment" => self.flip_augment = parse_bool(key, v)?,
            "eval_include_distill" => self.eval_include_distill = parse_bool(key, v)?,
            "data_dir" => self.data_dir = v.to_string(),
            "proposal_scales" => self.proposal_scales = parse_list(key, v, "integer")?,
            "proposal_ratios" => self.proposal_ratios = parse_list(key, v, "number")?,
            "proposal_stride" => self.proposal_stride = parse_num(key, v, "integer")?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parse a whole config file body on top of the defaults.
    pub fn from_text(text: &str) -> Result<TrainConfig, ConfigError> {
        let mut cfg = TrainConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::BadLine(line.into()))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<TrainConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        TrainConfig::from_text(&text)
    }

    /// Serialize every field as `key = value` lines; `from_text` of the
    /// result reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let scope = match self.cadm.spatial_max_scope {
            SpatialMaxScope::Row => "row",
            SpatialMaxScope::Map => "map",
        };
        let dim = match self.cadm.dropout_dim {
            DropoutDim::Channel => "channel",
            DropoutDim::Spatial => "spatial",
            DropoutDim::Cascade => "cascade",
        };
        let fusion = match self.gcm.fusion_mode {
            FusionMode::Multiplication => "multiplication",
            FusionMode::Addition => "addition",
            FusionMode::MultiplicationThenAddition => "multiplication_then_addition",
        };
        let scales =
            self.proposal_scales.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
        let ratios =
            self.proposal_ratios.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "iterations = {}\ndecay_iteration = {}\nlr_initial = {}\nlr_final = {}\n\
             momentum = {}\nweight_decay = {}\nbatch_size = {}\nseed = {}\n\
             cadm_enabled = {}\nlambda1 = {}\nlambda2 = {}\ndrop_rate = {}\n\
             spatial_max_scope = {scope}\ndropout_dim = {dim}\n\
             gcm_enabled = {}\nfusion_mode = {fusion}\nbottleneck_ratio = {}\nln_eps = {}\n\
             k_refine = {}\nflip_augment = {}\neval_include_distill = {}\ndata_dir = {}\n\
             proposal_scales = {scales}\nproposal_ratios = {ratios}\nproposal_stride = {}\n",
            self.iterations,
            self.decay_iteration,
            self.lr_initial,
            self.lr_final,
            self.momentum,
            self.weight_decay,
            self.batch_size,
            self.seed,
            self.cadm_enabled,
            self.cadm.lambda1,
            self.cadm.lambda2,
            self.cadm.drop_rate,
            self.gcm_enabled,
            self.gcm.bottleneck_ratio,
            self.gcm.ln_eps,
            self.k_refine,
            self.flip_augment,
            self.eval_include_distill,
            self.data_dir,
            self.proposal_stride,
        )
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.lr_initial <= 0.0 || self.lr_final <= 0.0 {
            return Err(ConfigError::Invalid("learning rates must be positive".into()));
        }
        if self.iterations == 0 || self.decay_iteration >= self.iterations {
            return Err(ConfigError::Invalid(format!(
                "decay iteration {} must be below total iterations {}",
                self.decay_iteration, self.iterations
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ConfigError::Invalid("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(ConfigError::Invalid("weight decay must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch size must be positive".into()));
        }
        if self.k_refine == 0 {
            return Err(ConfigError::Invalid("need at least one refinement branch".into()));
        }
        self.cadm.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.gcm.bottleneck_ratio == 0 || self.gcm.ln_eps <= 0.0 {
            return Err(ConfigError::Invalid("bad bottleneck ratio or epsilon".into()));
        }
        if self.proposal_scales.is_empty()
            || self.proposal_ratios.is_empty()
            || self.proposal_stride == 0
        {
            return Err(ConfigError::Invalid("empty proposal grid".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at a 0-based iteration.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration < self.decay_iteration {
            self.lr_initial
        } else {
            self.lr_final
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn every_field_round_trips_through_text() {
        let mut cfg = TrainConfig::default();
        cfg.iterations = 500;
        cfg.decay_iteration = 300;
        cfg.lr_initial = 1e-3;
        cfg.seed = 99;
        cfg.cadm_enabled = false;
        cfg.cadm.lambda1 = 0.7;
        cfg.cadm.spatial_max_scope = SpatialMaxScope::Map;
        cfg.cadm.dropout_dim = DropoutDim::Spatial;
        cfg.gcm.fusion_mode = FusionMode::Addition;
        cfg.flip_augment = true;
        cfg.data_dir = "/tmp/data".into();
        cfg.proposal_scales = vec![8, 12];
        cfg.proposal_ratios = vec![0.5, 2.0];
        let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(
            TrainConfig::from_text("no_such_key = 1\n"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            TrainConfig::from_text("lambda1 = banana\n"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(TrainConfig::from_text("lambda1\n"), Err(ConfigError::BadLine(_))));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = TrainConfig::from_text("# a comment\n\nseed = 3\n").unwrap();
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(TrainConfig::from_text("lr_initial = 0\n").is_err());
        assert!(TrainConfig::from_text("iterations = 100\ndecay_iteration = 100\n").is_err());
        assert!(TrainConfig::from_text("drop_rate = 1.5\n").is_err());
        assert!(TrainConfig::from_text("batch_size = 0\n").is_err());
    }

    #[test]
    fn lr_schedule_switches_at_decay_iteration() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 5e-4);
        assert_eq!(cfg.lr_at(1199), 5e-4);
        assert_eq!(cfg.lr_at(1200), 5e-5);
        assert_eq!(cfg.lr_at(1999), 5e-5);
    }
}
