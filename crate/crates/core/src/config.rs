//! Experiment configuration: a flat `key = value` file with dotted section
//! keys. `#` starts a comment. Unknown keys are rejected by name.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::boost::BoostParams;
use crate::datamodel::{BankId, SynthConfig};
use crate::fednet::{Backend, Fault};
use crate::game::{rr_caps, solve_optimal_mechanism, GameError, GameSpec, PrivacyMetric, SquareMatrix};
use crate::ldp::{laplace_matrix, rr_matrix, LdpError, TransformationMatrix};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Repeated { line: usize, key: String },
    #[error("bad value {value:?} for `{key}`: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Ldp(#[from] LdpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MechanismSource {
    Rr,
    Laplace,
    /// Optimal mechanism under the configured caps.
    Game,
    /// Optimal mechanism with the flip out of `game.variant_from` capped at
    /// 90% of the RR flip probability; the other flip is uncapped.
    GameVariant,
    Identity,
}

impl MechanismSource {
    pub fn name(self) -> &'static str {
        match self {
            MechanismSource::Rr => "rr",
            MechanismSource::Laplace => "laplace",
            MechanismSource::Game => "game",
            MechanismSource::GameVariant => "game-variant",
            MechanismSource::Identity => "identity",
        }
    }
}

impl FromStr for MechanismSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rr" => Ok(Self::Rr),
            "laplace" => Ok(Self::Laplace),
            "game" => Ok(Self::Game),
            "game-variant" => Ok(Self::GameVariant),
            "identity" => Ok(Self::Identity),
            _ => Err("expected rr, laplace, game, game-variant or identity".into()),
        }
    }
}

impl fmt::Display for MechanismSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapSource {
    None,
    Rr,
}

#[derive(Debug, Clone)]
pub struct GameSettings {
    pub prior: Vec<f64>,
    pub caps: CapSource,
    /// Flag value whose flip is capped at 90% of RR in the variant.
    pub variant_from: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub mechanism: MechanismSource,
    pub epsilon: f64,
    pub noise_discrepancy: bool,
    pub game: GameSettings,
    pub boost: BoostParams,
    pub backend: Backend,
    pub key_bits: usize,
    pub test_fraction: f64,
    pub equality_bit: bool,
    pub silent_clients: Vec<BankId>,
    pub faults: Vec<Fault>,
    pub sweep_mechanisms: Vec<MechanismSource>,
    pub sweep_epsilons: Vec<f64>,
    pub sweep_backend: Backend,
    pub repetitions: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data_dir: None,
            synth: SynthConfig::default(),
            mechanism: MechanismSource::Rr,
            epsilon: 10.0,
            noise_discrepancy: false,
            game: GameSettings { prior: vec![0.9, 0.1], caps: CapSource::Rr, variant_from: 1 },
            boost: BoostParams::default(),
            backend: Backend::SecureBoost,
            key_bits: 2048,
            test_fraction: 0.3,
            equality_bit: false,
            silent_clients: Vec::new(),
            faults: Vec::new(),
            sweep_mechanisms: vec![MechanismSource::Rr, MechanismSource::Laplace, MechanismSource::GameVariant],
            sweep_epsilons: vec![10.0, 4.0, 2.0, 1.0, 0.5],
            sweep_backend: Backend::Centralized,
            repetitions: 5,
            output_dir: PathBuf::from("out"),
        }
    }
}

pub const KEYS: [&str; 38] = [
    "seed",
    "data.dir",
    "synth.n_transactions",
    "synth.n_banks",
    "synth.accounts_per_bank",
    "synth.anomaly_rate",
    "synth.flag_given_anomaly",
    "synth.flag_given_normal",
    "synth.discrepancy_given_anomaly",
    "synth.discrepancy_given_normal",
    "synth.seed",
    "mechanism.source",
    "mechanism.epsilon",
    "mechanism.noise_discrepancy",
    "game.prior",
    "game.caps",
    "game.variant_from",
    "boost.n_trees",
    "boost.max_depth",
    "boost.lambda_l2",
    "boost.gamma",
    "boost.learning_rate",
    "boost.direct_sampling_rate",
    "boost.goss_top",
    "boost.goss_other",
    "boost.n_bins",
    "train.backend",
    "train.key_bits",
    "train.test_fraction",
    "train.equality_bit",
    "run.silent_clients",
    "run.faults",
    "sweep.mechanisms",
    "sweep.epsilons",
    "sweep.backend",
    "sweep.repetitions",
    "output.dir",
    "boost.seed",
];

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    raw.parse::<T>().map_err(|e| ConfigError::Value { key: key.into(), value: raw.into(), reason: e.to_string() })
}

fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| value(key, s)).collect()
}

fn bad(key: &str, raw: &str, reason: &str) -> ConfigError {
    ConfigError::Value { key: key.into(), value: raw.into(), reason: reason.into() }
}

fn backend(key: &str, raw: &str) -> Result<Backend, ConfigError> {
    match raw {
        "secureboost" => Ok(Backend::SecureBoost),
        "centralized" => Ok(Backend::Centralized),
        _ => Err(bad(key, raw, "expected secureboost or centralized")),
    }
}

fn fault(key: &str, raw: &str) -> Result<Fault, ConfigError> {
    match raw {
        "raw_flag_to_srv" => Ok(Fault::CopyRawFlagToSrv),
        "identity_to_fc" => Ok(Fault::IdentityToFc),
        "non_intersection_to_client" => Ok(Fault::NonIntersectionToClient),
        _ => Err(bad(key, raw, "expected raw_flag_to_srv, identity_to_fc or non_intersection_to_client")),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        text.parse()
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        let s = &mut self.synth;
        let b = &mut self.boost;
        match key {
            "seed" => self.seed = value(key, raw)?,
            "data.dir" => self.data_dir = Some(PathBuf::from(raw)),
            "synth.n_transactions" => s.n_transactions = value(key, raw)?,
            "synth.n_banks" => s.n_banks = value(key, raw)?,
            "synth.accounts_per_bank" => s.accounts_per_bank = value(key, raw)?,
            "synth.anomaly_rate" => s.anomaly_rate = value(key, raw)?,
            "synth.flag_given_anomaly" => s.flag_given_anomaly = value(key, raw)?,
            "synth.flag_given_normal" => s.flag_given_normal = value(key, raw)?,
            "synth.discrepancy_given_anomaly" => s.discrepancy_given_anomaly = value(key, raw)?,
            "synth.discrepancy_given_normal" => s.discrepancy_given_normal = value(key, raw)?,
            "synth.seed" => s.seed = value(key, raw)?,
            "mechanism.source" => self.mechanism = value(key, raw)?,
            "mechanism.epsilon" => self.epsilon = value(key, raw)?,
            "mechanism.noise_discrepancy" => self.noise_discrepancy = value(key, raw)?,
            "game.prior" => self.game.prior = list(key, raw)?,
            "game.caps" => {
                self.game.caps = match raw {
                    "none" => CapSource::None,
                    "rr" => CapSource::Rr,
                    _ => return Err(bad(key, raw, "expected none or rr")),
                }
            }
            "game.variant_from" => self.game.variant_from = value(key, raw)?,
            "boost.n_trees" => b.n_trees = value(key, raw)?,
            "boost.max_depth" => b.max_depth = value(key, raw)?,
            "boost.lambda_l2" => b.lambda_l2 = value(key, raw)?,
            "boost.gamma" => b.gamma = value(key, raw)?,
            "boost.learning_rate" => b.learning_rate = value(key, raw)?,
            "boost.direct_sampling_rate" => b.direct_sampling_rate = value(key, raw)?,
            "boost.goss_top" => b.goss = Some((value(key, raw)?, b.goss.map_or(0.1, |g| g.1))),
            "boost.goss_other" => b.goss = Some((b.goss.map_or(0.1, |g| g.0), value(key, raw)?)),
            "boost.n_bins" => b.n_bins = value(key, raw)?,
            "boost.seed" => b.seed = value(key, raw)?,
            "train.backend" => self.backend = backend(key, raw)?,
            "train.key_bits" => self.key_bits = value(key, raw)?,
            "train.test_fraction" => self.test_fraction = value(key, raw)?,
            "train.equality_bit" => self.equality_bit = value(key, raw)?,
            "run.silent_clients" => self.silent_clients = raw.split(',').map(|s| BankId(s.trim().into())).collect(),
            "run.faults" => {
                self.faults = raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| fault(key, s)).collect::<Result<_, _>>()?
            }
            "sweep.mechanisms" => self.sweep_mechanisms = list(key, raw)?,
            "sweep.epsilons" => self.sweep_epsilons = list(key, raw)?,
            "sweep.backend" => self.sweep_backend = backend(key, raw)?,
            "sweep.repetitions" => self.repetitions = value(key, raw)?,
            "output.dir" => self.output_dir = PathBuf::from(raw),
            _ => unreachable!("key list and setter disagree on {key}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.synth.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.boost.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.repetitions == 0 {
            return Err(ConfigError::Invalid("sweep.repetitions must be at least 1".into()));
        }
        if self.sweep_epsilons.is_empty() {
            return Err(ConfigError::Invalid("sweep.epsilons is empty".into()));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(ConfigError::Invalid(format!("mechanism.epsilon = {} is negative", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(ConfigError::Invalid(format!("train.test_fraction = {} is not in [0, 1)", self.test_fraction)));
        }
        if self.game.prior.len() != 2 || self.game.variant_from > 1 {
            return Err(ConfigError::Invalid("game settings must describe a binary flag".into()));
        }
        Ok(())
    }

    /// Binary flag mechanism for `source` at `epsilon`.
    pub fn mechanism_for(&self, source: MechanismSource, epsilon: f64) -> Result<TransformationMatrix, ConfigError> {
        let caps = |kind: CapSource| -> Result<SquareMatrix, ConfigError> {
            Ok(match kind {
                CapSource::None => SquareMatrix::filled(2, 1.0),
                CapSource::Rr => rr_caps(epsilon, 2)?,
            })
        };
        let game = |caps: SquareMatrix| -> Result<TransformationMatrix, ConfigError> {
            let spec = GameSpec { prior: self.game.prior.clone(), metric: PrivacyMetric::Hamming(2), caps, epsilon };
            Ok(solve_optimal_mechanism(&spec)?.mechanism)
        };
        match source {
            MechanismSource::Rr => Ok(rr_matrix(epsilon, 2)?),
            MechanismSource::Laplace => Ok(laplace_matrix(epsilon, 2)?),
            MechanismSource::Identity => Ok(TransformationMatrix::identity(2)?),
            MechanismSource::Game => game(caps(self.game.caps)?),
            MechanismSource::GameVariant => {
                let rr = rr_matrix(epsilon, 2)?;
                let (from, to) = (self.game.variant_from, 1 - self.game.variant_from);
                let mut c = SquareMatrix::filled(2, 1.0);
                c.set(from, to, 0.9 * rr.get(from, to));
                game(c)
            }
        }
    }
}

impl FromStr for ExperimentConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, val) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, val) = (key.trim(), val.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey { line, key: key.into() });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Repeated { line, key: key.into() });
            }
            cfg.set(key, val)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
