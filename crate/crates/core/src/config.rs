//! `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors.

use std::path::Path;
use std::str::FromStr;

use crate::detector::InferenceMode;
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: Architecture,
    pub train: TrainConfig,
    /// Fraction of real images used for training.
    pub split: f64,
    /// Head dimension up to which Laplace solves are dense.
    pub dense_limit: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: Architecture::full(),
            train: TrainConfig::default(),
            split: 0.8,
            dense_limit: crate::bayes::DEFAULT_DENSE_LIMIT,
        }
    }
}

impl RunConfig {
    /// Reduced network, toy-scale batch and learning rate.
    pub fn toy() -> Self {
        RunConfig {
            arch: Architecture::reduced(),
            train: TrainConfig { batch_size: 32, lr0: TOY_LR0, epochs: TOY_EPOCHS, ..TrainConfig::default() },
            ..RunConfig::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        if !(self.split > 0.0 && self.split < 1.0) {
            return crate::error::invalid(format!("split must lie in (0, 1), got {}", self.split));
        }
        Ok(())
    }
}

/// Learning rate for the reduced network on the procedural dataset.
pub const TOY_LR0: f64 = 1e-2;
pub const TOY_EPOCHS: usize = 20;

fn parse_num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config { line, msg: format!("{key}: cannot parse {v:?}") })
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        // the architecture preset resets its fields, so apply it before per-field overrides
        let mut overrides = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| Error::Config { line, msg: format!("expected key = value, got {content:?}") })?;
            let (k, v) = (k.trim(), v.trim());
            if v.is_empty() {
                return Err(Error::Config { line, msg: format!("{k}: missing value") });
            }
            if k == "architecture" {
                cfg = match v {
                    "full" => RunConfig { arch: Architecture::full(), ..cfg },
                    "reduced" => RunConfig { arch: Architecture::reduced(), ..cfg },
                    _ => return Err(Error::Config { line, msg: format!("architecture must be full or reduced, got {v:?}") }),
                };
            } else {
                overrides.push((line, k, v));
            }
        }
        for (line, k, v) in overrides {
            let t = &mut cfg.train;
            match k {
                "lr0" => t.lr0 = parse_num(line, k, v)?,
                "decay" => t.decay = parse_num(line, k, v)?,
                "epochs" => t.epochs = parse_num(line, k, v)?,
                "batch_size" => t.batch_size = parse_num(line, k, v)?,
                "improvement_threshold" => t.improvement_threshold = parse_num(line, k, v)?,
                "early_stop_gap" => t.early_stop_gap = parse_num(line, k, v)?,
                "seed" => t.seed = parse_num(line, k, v)?,
                "alpha" => t.alpha = parse_num(line, k, v)?,
                "beta" => t.beta = parse_num(line, k, v)?,
                "percentile" => t.percentile = parse_num(line, k, v)?,
                "proxy_fraction" => t.proxy_fraction = parse_num(line, k, v)?,
                "n_mc" => t.n_mc = parse_num(line, k, v)?,
                "q_init_std" => t.q_init_std = parse_num(line, k, v)?,
                "inference_mode" => {
                    t.inference_mode = match v {
                        "map" => InferenceMode::Map,
                        "variational" => InferenceMode::Variational,
                        _ => return Err(Error::Config { line, msg: format!("inference_mode must be map or variational, got {v:?}") }),
                    }
                }
                "input_size" => cfg.arch.input_size = parse_num(line, k, v)?,
                "hidden" => cfg.arch.hidden = parse_num(line, k, v)?,
                "dropout" => cfg.arch.dropout = parse_num(line, k, v)?,
                "split" => cfg.split = parse_num(line, k, v)?,
                "dense_limit" => cfg.dense_limit = parse_num(line, k, v)?,
                _ => return Err(Error::Config { line, msg: format!("unknown key {k:?}") }),
            }
        }
        cfg.validate().map_err(|e| Error::Config { line: 0, msg: e.to_string() })?;
        Ok(cfg)
    }
}

/// Comma-separated parameter list, e.g. `0,1,2.5` or `1/2,1/4`.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for item in s.split(',') {
        let item = item.trim();
        let v = match item.split_once('/') {
            Some((n, d)) => {
                let n: f64 = n.trim().parse().map_err(|_| grid_err(item))?;
                let d: f64 = d.trim().parse().map_err(|_| grid_err(item))?;
                if d == 0.0 {
                    return Err(grid_err(item));
                }
                n / d
            }
            None => item.parse().map_err(|_| grid_err(item))?,
        };
        if !v.is_finite() {
            return Err(grid_err(item));
        }
        out.push(v);
    }
    Ok(out)
}

fn grid_err(item: &str) -> Error {
    Error::InvalidArgument(format!("bad grid value {item:?}"))
}
