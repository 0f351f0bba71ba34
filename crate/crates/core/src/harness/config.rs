//! Flat `key = value` experiment configuration.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Every key has a default, so an empty file is a valid configuration.
//! List values are comma separated. [`ExperimentConfig::to_text`] writes
//! every key and parses back to the same configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::dynamics::{ModelTrainConfig, ModelVariant};
use crate::env::CartPole;
use crate::regularize::Mechanism;
use crate::{Error, Result};

/// Configuration parameter swept by [`run_sweep`](super::run_sweep).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Beta,
    Lambda,
    Epsilon,
    Mechanism,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Beta => "beta",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::Mechanism => "mechanism",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SweepAxis::Beta),
            "lambda" => Ok(SweepAxis::Lambda),
            "epsilon" => Ok(SweepAxis::Epsilon),
            "mechanism" => Ok(SweepAxis::Mechanism),
            other => Err(Error::Config(format!("unknown sweep axis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: CartPole,
    /// Transitions collected with uniform random actions.
    pub dataset_size: usize,
    pub model_variant: ModelVariant,
    /// Ensemble size; 1 trains a single model.
    pub ensemble_size: usize,
    pub model: ModelTrainConfig,
    pub agent: AgentConfig,
    pub sweep_axis: Option<SweepAxis>,
    pub sweep_values: Vec<String>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Also write model and agent checkpoints for each run.
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: CartPole::default(),
            dataset_size: 10_000,
            model_variant: ModelVariant::Deterministic,
            ensemble_size: 1,
            model: ModelTrainConfig::default(),
            agent: AgentConfig::default(),
            sweep_axis: None,
            sweep_values: Vec::new(),
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
            save_checkpoints: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {value:?}: expected true or false"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Every recognised key, in [`ExperimentConfig::to_text`] order.
pub const KEYS: &[&str] = &[
    "env.gravity",
    "env.mass_cart",
    "env.mass_pole",
    "env.half_length",
    "env.force_mag",
    "env.dt",
    "env.x_max",
    "env.theta_max",
    "env.v_max",
    "env.max_steps",
    "dataset_size",
    "model.variant",
    "model.ensemble_size",
    "model.epochs",
    "model.batch_size",
    "model.lr",
    "model.holdout_fraction",
    "model.hidden",
    "model.activation",
    "model.residual",
    "model.loss",
    "agent.gamma",
    "agent.k_iters",
    "agent.h",
    "agent.n_batch",
    "agent.q_lr",
    "agent.policy_lr",
    "agent.q_hidden",
    "agent.policy_hidden",
    "agent.activation",
    "agent.target_noise",
    "agent.target_samples",
    "agent.reward_source",
    "agent.rho_refresh",
    "agent.rho_random_prob",
    "agent.eval_every",
    "agent.eval_episodes",
    "agent.diag_states",
    "agent.lip_pairs",
    "agent.lip_epsilon",
    "reg.mechanism",
    "reg.beta",
    "reg.epsilon",
    "reg.lambda",
    "reg.norm_order",
    "reg.pgd_steps",
    "reg.loss_policy",
    "reg.search_policy",
    "sweep.axis",
    "sweep.values",
    "seeds",
    "out_dir",
    "save_checkpoints",
];

impl ExperimentConfig {
    /// Parse configuration text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Assign one key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let e = &mut self.env;
        let m = &mut self.model;
        let a = &mut self.agent;
        match key {
            "env.gravity" => e.gravity = parse(key, v)?,
            "env.mass_cart" => e.mass_cart = parse(key, v)?,
            "env.mass_pole" => e.mass_pole = parse(key, v)?,
            "env.half_length" => e.half_length = parse(key, v)?,
            "env.force_mag" => e.force_mag = parse(key, v)?,
            "env.dt" => e.dt = parse(key, v)?,
            "env.x_max" => e.x_max = parse(key, v)?,
            "env.theta_max" => e.theta_max = parse(key, v)?,
            "env.v_max" => e.v_max = parse(key, v)?,
            "env.max_steps" => e.max_steps = parse(key, v)?,
            "dataset_size" => self.dataset_size = parse(key, v)?,
            "model.variant" => self.model_variant = v.parse()?,
            "model.ensemble_size" => self.ensemble_size = parse(key, v)?,
            "model.epochs" => m.epochs = parse(key, v)?,
            "model.batch_size" => m.batch_size = parse(key, v)?,
            "model.lr" => m.lr = parse(key, v)?,
            "model.holdout_fraction" => m.holdout_fraction = parse(key, v)?,
            "model.hidden" => m.hidden = parse_list(key, v)?,
            "model.activation" => m.activation = v.parse()?,
            "model.residual" => m.residual = parse_bool(key, v)?,
            "model.loss" => m.loss = v.parse()?,
            "agent.gamma" => a.gamma = parse(key, v)?,
            "agent.k_iters" => a.k_iters = parse(key, v)?,
            "agent.h" => a.h = parse(key, v)?,
            "agent.n_batch" => a.n_batch = parse(key, v)?,
            "agent.q_lr" => a.q_lr = parse(key, v)?,
            "agent.policy_lr" => a.policy_lr = parse(key, v)?,
            "agent.q_hidden" => a.q_hidden = parse_list(key, v)?,
            "agent.policy_hidden" => a.policy_hidden = parse_list(key, v)?,
            "agent.activation" => a.activation = v.parse()?,
            "agent.target_noise" => a.target_noise = parse_bool(key, v)?,
            "agent.target_samples" => a.target_samples = parse(key, v)?,
            "agent.reward_source" => a.reward_source = v.parse()?,
            "agent.rho_refresh" => a.rho_refresh = parse(key, v)?,
            "agent.rho_random_prob" => a.rho_random_prob = parse(key, v)?,
            "agent.eval_every" => a.eval_every = parse(key, v)?,
            "agent.eval_episodes" => a.eval_episodes = parse(key, v)?,
            "agent.diag_states" => a.diag_states = parse(key, v)?,
            "agent.lip_pairs" => a.lip_pairs = parse(key, v)?,
            "agent.lip_epsilon" => a.lip_epsilon = parse(key, v)?,
            "reg.mechanism" => a.regularizer.mechanism = v.parse()?,
            "reg.beta" => a.regularizer.beta = parse(key, v)?,
            "reg.epsilon" => a.regularizer.epsilon = parse(key, v)?,
            "reg.lambda" => a.regularizer.lambda = parse(key, v)?,
            "reg.norm_order" => a.regularizer.norm_order = v.parse()?,
            "reg.pgd_steps" => a.regularizer.pgd_steps = parse(key, v)?,
            "reg.loss_policy" => a.regularizer.loss_policy = v.parse()?,
            "reg.search_policy" => a.regularizer.search_policy = v.parse()?,
            "sweep.axis" => {
                self.sweep_axis = match v {
                    "" | "none" => None,
                    other => Some(other.parse()?),
                }
            }
            "sweep.values" => self.sweep_values = parse_list(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "save_checkpoints" => self.save_checkpoints = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Current value of a key, formatted as [`set`](Self::set) accepts it.
    pub fn get(&self, key: &str) -> Result<String> {
        let e = &self.env;
        let m = &self.model;
        let a = &self.agent;
        let r = &a.regularizer;
        Ok(match key {
            "env.gravity" => e.gravity.to_string(),
            "env.mass_cart" => e.mass_cart.to_string(),
            "env.mass_pole" => e.mass_pole.to_string(),
            "env.half_length" => e.half_length.to_string(),
            "env.force_mag" => e.force_mag.to_string(),
            "env.dt" => e.dt.to_string(),
            "env.x_max" => e.x_max.to_string(),
            "env.theta_max" => e.theta_max.to_string(),
            "env.v_max" => e.v_max.to_string(),
            "env.max_steps" => e.max_steps.to_string(),
            "dataset_size" => self.dataset_size.to_string(),
            "model.variant" => self.model_variant.as_str().into(),
            "model.ensemble_size" => self.ensemble_size.to_string(),
            "model.epochs" => m.epochs.to_string(),
            "model.batch_size" => m.batch_size.to_string(),
            "model.lr" => m.lr.to_string(),
            "model.holdout_fraction" => m.holdout_fraction.to_string(),
            "model.hidden" => join(&m.hidden),
            "model.activation" => m.activation.as_str().into(),
            "model.residual" => m.residual.to_string(),
            "model.loss" => m.loss.as_str().into(),
            "agent.gamma" => a.gamma.to_string(),
            "agent.k_iters" => a.k_iters.to_string(),
            "agent.h" => a.h.to_string(),
            "agent.n_batch" => a.n_batch.to_string(),
            "agent.q_lr" => a.q_lr.to_string(),
            "agent.policy_lr" => a.policy_lr.to_string(),
            "agent.q_hidden" => join(&a.q_hidden),
            "agent.policy_hidden" => join(&a.policy_hidden),
            "agent.activation" => a.activation.as_str().into(),
            "agent.target_noise" => a.target_noise.to_string(),
            "agent.target_samples" => a.target_samples.to_string(),
            "agent.reward_source" => a.reward_source.as_str().into(),
            "agent.rho_refresh" => a.rho_refresh.to_string(),
            "agent.rho_random_prob" => a.rho_random_prob.to_string(),
            "agent.eval_every" => a.eval_every.to_string(),
            "agent.eval_episodes" => a.eval_episodes.to_string(),
            "agent.diag_states" => a.diag_states.to_string(),
            "agent.lip_pairs" => a.lip_pairs.to_string(),
            "agent.lip_epsilon" => a.lip_epsilon.to_string(),
            "reg.mechanism" => r.mechanism.as_str().into(),
            "reg.beta" => r.beta.to_string(),
            "reg.epsilon" => r.epsilon.to_string(),
            "reg.lambda" => r.lambda.to_string(),
            "reg.norm_order" => r.norm_order.as_str().into(),
            "reg.pgd_steps" => r.pgd_steps.to_string(),
            "reg.loss_policy" => r.loss_policy.as_str().into(),
            "reg.search_policy" => r.search_policy.as_str().into(),
            "sweep.axis" => self.sweep_axis.map_or("none", SweepAxis::as_str).into(),
            "sweep.values" => self.sweep_values.join(","),
            "seeds" => join(&self.seeds),
            "out_dir" => self.out_dir.display().to_string(),
            "save_checkpoints" => self.save_checkpoints.to_string(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        })
    }

    /// All keys with their current values.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    /// Model training settings with the run seed applied.
    pub fn model_config(&self, seed: u64) -> ModelTrainConfig {
        ModelTrainConfig {
            seed,
            ..self.model.clone()
        }
    }

    /// Apply one sweep value to the configured axis.
    pub fn with_sweep_value(&self, value: &str) -> Result<Self> {
        let axis = self
            .sweep_axis
            .ok_or_else(|| Error::Config("no sweep axis configured".into()))?;
        let mut cfg = self.clone();
        let r = &mut cfg.agent.regularizer;
        match axis {
            SweepAxis::Beta => {
                r.beta = parse("sweep.values", value)?;
                if r.mechanism == Mechanism::None {
                    r.mechanism = Mechanism::Spectral;
                }
            }
            SweepAxis::Lambda => r.lambda = parse("sweep.values", value)?,
            SweepAxis::Epsilon => r.epsilon = parse("sweep.values", value)?,
            SweepAxis::Mechanism => r.mechanism = value.parse()?,
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset_size == 0 {
            return Err(Error::Config("dataset_size must be >= 1".into()));
        }
        if self.ensemble_size == 0 {
            return Err(Error::Config("model.ensemble_size must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.sweep_axis.is_some() && self.sweep_values.is_empty() {
            return Err(Error::Config("sweep.values must not be empty".into()));
        }
        for v in &self.sweep_values {
            if self.sweep_axis.is_some() {
                self.with_sweep_value(v)?.agent.validate()?;
            }
        }
        self.model.validate()?;
        self.agent.validate()
    }
}
