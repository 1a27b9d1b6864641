//! Flat key=value experiment configuration.
//!
//! The format is deliberately plain: one `section.key=value` pair per line,
//! `#` comments, every key optional with a documented default, unknown keys
//! rejected. Command-line flags apply on top via [`ExperimentConfig::set`].
//! The canonical rendering (all keys, fixed order) is hashed into every
//! output file so results are traceable to their exact configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{DataError, FactorizedTaskSpec, MoonsShiftSpec};
use crate::models::ModelWidths;
use crate::nn::ScheduleParams;
use crate::training::{TrainConfig, UpdateMode, Variant};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {reason}")]
    BadValue { key: String, reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    Factorized,
    Moons,
}

/// Everything a run needs, with defaults matching the standard benchmark
/// task and training recipe.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    // dataset section: either a file to load, or generator parameters.
    pub dataset_path: Option<PathBuf>,
    pub generator: GeneratorKind,
    pub num_classes: usize,
    pub input_dim: usize,
    pub class_dim: usize,
    pub nuisance_dim: usize,
    pub noise: f64,
    pub n_source: usize,
    pub n_target: usize,
    pub n_target_test: usize,
    pub map_shift: f64,
    pub nuisance_shift: f64,
    pub dataset_seed: u64,
    pub moons_angle_deg: f64,
    pub moons_noise: f64,
    // model section.
    pub variant: Variant,
    pub extractor_hidden: Vec<usize>,
    pub m_s: usize,
    pub m_d: usize,
    pub head_hidden: usize,
    // train section.
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_c: f64,
    pub k_pred: usize,
    pub train_seed: u64,
    pub update_mode: UpdateMode,
    pub schedule: ScheduleParams,
    pub n_runs: usize,
    // probes section.
    pub probe_seed: u64,
    // output section.
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset_path: None,
            generator: GeneratorKind::Factorized,
            num_classes: 4,
            input_dim: 20,
            class_dim: 4,
            nuisance_dim: 4,
            noise: 0.25,
            n_source: 2000,
            n_target: 2000,
            n_target_test: 2000,
            map_shift: 0.3,
            nuisance_shift: 1.0,
            dataset_seed: 0,
            moons_angle_deg: 30.0,
            moons_noise: 0.1,
            variant: Variant::CifeDann,
            extractor_hidden: vec![32],
            m_s: 8,
            m_d: 4,
            head_hidden: 64,
            epochs: 160,
            batch_size: 128,
            lambda_c: 0.5,
            k_pred: 32,
            train_seed: 0,
            update_mode: UpdateMode::Reversal,
            schedule: ScheduleParams::default(),
            n_runs: 3,
            probe_seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        reason: format!("{e}"),
    })
}

impl ExperimentConfig {
    /// Parse a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Apply one `section.key = value` assignment (also used for CLI flag
    /// overrides).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "dataset.path" => {
                self.dataset_path = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                };
            }
            "dataset.generator" => {
                self.generator = match value {
                    "factorized" => GeneratorKind::Factorized,
                    "moons" => GeneratorKind::Moons,
                    other => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            reason: format!("unknown generator {other:?}"),
                        })
                    }
                };
            }
            "dataset.num_classes" => self.num_classes = parse_num(key, value)?,
            "dataset.input_dim" => self.input_dim = parse_num(key, value)?,
            "dataset.class_dim" => self.class_dim = parse_num(key, value)?,
            "dataset.nuisance_dim" => self.nuisance_dim = parse_num(key, value)?,
            "dataset.noise" => self.noise = parse_num(key, value)?,
            "dataset.n_source" => self.n_source = parse_num(key, value)?,
            "dataset.n_target" => self.n_target = parse_num(key, value)?,
            "dataset.n_target_test" => self.n_target_test = parse_num(key, value)?,
            "dataset.map_shift" => self.map_shift = parse_num(key, value)?,
            "dataset.nuisance_shift" => self.nuisance_shift = parse_num(key, value)?,
            "dataset.seed" => self.dataset_seed = parse_num(key, value)?,
            "dataset.moons_angle_deg" => self.moons_angle_deg = parse_num(key, value)?,
            "dataset.moons_noise" => self.moons_noise = parse_num(key, value)?,
            "model.variant" => {
                self.variant = value.parse().map_err(|e| ConfigError::BadValue {
                    key: key.into(),
                    reason: e,
                })?;
            }
            "model.extractor_hidden" => {
                self.extractor_hidden = value
                    .split(',')
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<_, _>>()?;
            }
            "model.m_s" => self.m_s = parse_num(key, value)?,
            "model.m_d" => self.m_d = parse_num(key, value)?,
            "model.head_hidden" => self.head_hidden = parse_num(key, value)?,
            "train.epochs" => self.epochs = parse_num(key, value)?,
            "train.batch_size" => self.batch_size = parse_num(key, value)?,
            "train.lambda_c" => self.lambda_c = parse_num(key, value)?,
            "train.k_pred" => self.k_pred = parse_num(key, value)?,
            "train.seed" => self.train_seed = parse_num(key, value)?,
            "train.update_mode" => {
                self.update_mode = value.parse().map_err(|e| ConfigError::BadValue {
                    key: key.into(),
                    reason: e,
                })?;
            }
            "train.eta0" => self.schedule.eta0 = parse_num(key, value)?,
            "train.theta" => self.schedule.theta = parse_num(key, value)?,
            "train.beta" => self.schedule.beta = parse_num(key, value)?,
            "train.delta" => self.schedule.delta = parse_num(key, value)?,
            "train.n_runs" => self.n_runs = parse_num(key, value)?,
            "probes.seed" => self.probe_seed = parse_num(key, value)?,
            "output.dir" => self.output_dir = PathBuf::from(value),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Render every key in fixed order. Parsing the rendering reproduces the
    /// config; the sha-256 of this text is the config hash embedded in
    /// outputs.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        let path = self
            .dataset_path
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let gen = match self.generator {
            GeneratorKind::Factorized => "factorized",
            GeneratorKind::Moons => "moons",
        };
        let hidden = self
            .extractor_hidden
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(s, "dataset.path={path}");
        let _ = writeln!(s, "dataset.generator={gen}");
        let _ = writeln!(s, "dataset.num_classes={}", self.num_classes);
        let _ = writeln!(s, "dataset.input_dim={}", self.input_dim);
        let _ = writeln!(s, "dataset.class_dim={}", self.class_dim);
        let _ = writeln!(s, "dataset.nuisance_dim={}", self.nuisance_dim);
        let _ = writeln!(s, "dataset.noise={}", self.noise);
        let _ = writeln!(s, "dataset.n_source={}", self.n_source);
        let _ = writeln!(s, "dataset.n_target={}", self.n_target);
        let _ = writeln!(s, "dataset.n_target_test={}", self.n_target_test);
        let _ = writeln!(s, "dataset.map_shift={}", self.map_shift);
        let _ = writeln!(s, "dataset.nuisance_shift={}", self.nuisance_shift);
        let _ = writeln!(s, "dataset.seed={}", self.dataset_seed);
        let _ = writeln!(s, "dataset.moons_angle_deg={}", self.moons_angle_deg);
        let _ = writeln!(s, "dataset.moons_noise={}", self.moons_noise);
        let _ = writeln!(s, "model.variant={}", self.variant);
        let _ = writeln!(s, "model.extractor_hidden={hidden}");
        let _ = writeln!(s, "model.m_s={}", self.m_s);
        let _ = writeln!(s, "model.m_d={}", self.m_d);
        let _ = writeln!(s, "model.head_hidden={}", self.head_hidden);
        let _ = writeln!(s, "train.epochs={}", self.epochs);
        let _ = writeln!(s, "train.batch_size={}", self.batch_size);
        let _ = writeln!(s, "train.lambda_c={}", self.lambda_c);
        let _ = writeln!(s, "train.k_pred={}", self.k_pred);
        let _ = writeln!(s, "train.seed={}", self.train_seed);
        let _ = writeln!(s, "train.update_mode={}", self.update_mode);
        let _ = writeln!(s, "train.eta0={}", self.schedule.eta0);
        let _ = writeln!(s, "train.theta={}", self.schedule.theta);
        let _ = writeln!(s, "train.beta={}", self.schedule.beta);
        let _ = writeln!(s, "train.delta={}", self.schedule.delta);
        let _ = writeln!(s, "train.n_runs={}", self.n_runs);
        let _ = writeln!(s, "probes.seed={}", self.probe_seed);
        let _ = writeln!(s, "output.dir={}", self.output_dir.display());
        s
    }

    /// Hex sha-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest.iter().fold(String::new(), |mut acc, b| {
            let _ = write!(acc, "{b:02x}");
            acc
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            variant: self.variant,
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: self.schedule,
            lambda_c: self.lambda_c,
            k_pred: self.k_pred,
            seed: self.train_seed,
            update_mode: self.update_mode,
        }
    }

    /// Model widths for a dataset with the given input dimension and class
    /// count.
    pub fn widths(&self, input_dim: usize, num_classes: usize) -> ModelWidths {
        ModelWidths {
            input_dim,
            num_classes,
            extractor_hidden: self.extractor_hidden.clone(),
            m_s: self.m_s,
            m_d: self.m_d,
            head_hidden: self.head_hidden,
        }
    }

    pub fn factorized_spec(&self) -> Result<FactorizedTaskSpec, ConfigError> {
        Ok(FactorizedTaskSpec::seeded(
            self.num_classes,
            self.input_dim,
            self.class_dim,
            self.nuisance_dim,
            self.noise,
            self.n_source,
            self.n_target,
            self.n_target_test,
            self.map_shift,
            self.nuisance_shift,
            self.dataset_seed,
        )?)
    }

    pub fn moons_spec(&self) -> MoonsShiftSpec {
        MoonsShiftSpec {
            angle_deg: self.moons_angle_deg,
            noise: self.moons_noise,
            n_source: self.n_source,
            n_target: self.n_target,
            n_target_test: self.n_target_test,
            seed: self.dataset_seed,
        }
    }
}
