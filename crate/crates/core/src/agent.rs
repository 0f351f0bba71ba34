//! Model-based approximate value iteration with a deterministic policy.
//!
//! Each outer iteration draws `N` state-action pairs from the data
//! distribution `ρ`, draws model next states `ŝ′`, takes `H` ascent steps on
//! `mean Q(s, π(s))` for the policy, then `H` descent steps on
//! `mean (Q(s, a) - y)²` (plus the configured regularizer) for the critic,
//! with targets `y = r + γ (1 - terminal) Q_{k-1}(ŝ′, π(ŝ′))` fixed for the
//! whole iteration.

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    lipschitz_upper_bound, local_lipschitz_estimate, regression_residual, value_aware_model_error,
    DiagnosticsRecord,
};
use crate::diffcore::{grad, mlp_init, Activation, AdamConfig, AdamState, Matrix, MlpParams};
use crate::dynamics::{model_mse, NextStateModel};
use crate::env::{
    collect_dataset, evaluate_policy, Behavior, CartPole, TransitionBatch, TransitionDataset,
    ACTION_DIM, STATE_DIM,
};
use crate::regularize::{
    apply_spectral_normalization, robust_loss, Mechanism, PerturbBatch, RegularizerConfig,
    SpectralState,
};
use crate::rng::{mix, Rng};
use crate::value::{critic_input, ActorCritic};
use crate::{Error, Result};

/// Where the rewards `r_i` in the targets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSource {
    /// The recorded reward of the sampled transition.
    Dataset,
    /// A learned reward regressor `r̂(s, a)`.
    Model,
}

impl RewardSource {
    pub fn as_str(self) -> &'static str {
        match self {
            RewardSource::Dataset => "dataset",
            RewardSource::Model => "model",
        }
    }
}

impl FromStr for RewardSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dataset" => Ok(RewardSource::Dataset),
            "model" => Ok(RewardSource::Model),
            other => Err(Error::Config(format!("unknown reward source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub gamma: f64,
    pub k_iters: usize,
    /// Gradient steps per inner loop.
    pub h: usize,
    /// State-action pairs per iteration.
    pub n_batch: usize,
    pub seed: u64,
    pub q_lr: f64,
    pub policy_lr: f64,
    pub q_hidden: Vec<usize>,
    pub policy_hidden: Vec<usize>,
    pub activation: Activation,
    /// Sample `ŝ′` from the model; false uses the member-mean prediction.
    pub target_noise: bool,
    /// Model draws averaged per target.
    pub target_samples: usize,
    pub reward_source: RewardSource,
    /// Re-collect `ρ` from the current policy every this many iterations;
    /// 0 keeps `ρ` fixed.
    pub rho_refresh: usize,
    /// Random-action probability of the refreshed behaviour.
    pub rho_random_prob: f64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Dataset records used for the per-iteration diagnostics.
    pub diag_states: usize,
    /// Sampled pairs per state for the local Lipschitz estimate.
    pub lip_pairs: usize,
    pub lip_epsilon: f64,
    pub regularizer: RegularizerConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: 0.99,
            k_iters: 1000,
            h: 32,
            n_batch: 256,
            seed: 0,
            q_lr: 1e-3,
            policy_lr: 1e-3,
            q_hidden: vec![64, 64],
            policy_hidden: vec![64, 64],
            activation: Activation::Relu,
            target_noise: true,
            target_samples: 1,
            reward_source: RewardSource::Dataset,
            rho_refresh: 0,
            rho_random_prob: 0.5,
            eval_every: 10,
            eval_episodes: 20,
            diag_states: 256,
            lip_pairs: 8,
            lip_epsilon: 0.1,
            regularizer: RegularizerConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail(format!("gamma must be in (0, 1), got {}", self.gamma));
        }
        for (name, v) in [
            ("h", self.h),
            ("n_batch", self.n_batch),
            ("target_samples", self.target_samples),
            ("eval_every", self.eval_every),
            ("eval_episodes", self.eval_episodes),
            ("diag_states", self.diag_states),
            ("lip_pairs", self.lip_pairs),
        ] {
            if v == 0 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        if !(self.q_lr > 0.0 && self.policy_lr > 0.0) {
            return fail("learning rates must be > 0".into());
        }
        if !(self.lip_epsilon > 0.0) {
            return fail("lip_epsilon must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.rho_random_prob) {
            return fail("rho_random_prob must be in [0, 1]".into());
        }
        self.regularizer.validate()
    }
}

/// Critic, policy and their optimisers.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub q: MlpParams,
    pub policy: MlpParams,
    pub q_opt: AdamState,
    pub policy_opt: AdamState,
    /// Power-iteration vectors when spectral normalization is active.
    pub spectral: Option<SpectralState>,
    pub iteration: usize,
}

/// Losses of one critic step, measured before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueStepLoss {
    pub regression: f64,
    pub penalty: f64,
}

/// Rows `(s, a, s′, y)` for a critic step; `s′` feeds the robust penalty.
#[derive(Debug, Clone, Copy)]
pub struct ValueBatch<'a> {
    pub states: &'a Matrix,
    pub actions: &'a [f64],
    pub next_states: &'a Matrix,
    pub targets: &'a [f64],
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut v = vec![input];
    v.extend_from_slice(hidden);
    v.push(output);
    v
}

impl AgentState {
    /// Fresh networks. The critic's last layer is scaled down if needed so
    /// that `|Q₀| ≤ R_max / (1 - γ)` on the whole state box `|s| ≤ D`.
    pub fn new(cfg: &AgentConfig, env: &CartPole) -> Result<Self> {
        cfg.validate()?;
        let mut q = mlp_init(
            &sizes(STATE_DIM + ACTION_DIM, &cfg.q_hidden, 1),
            cfg.activation,
            mix(cfg.seed, 0x0C),
        )?;
        let policy = mlp_init(
            &sizes(STATE_DIM, &cfg.policy_hidden, ACTION_DIM),
            cfg.activation,
            mix(cfg.seed, 0x0B),
        )?;
        // Zero biases give Q(0) = 0, so |Q(x)| ≤ L ‖x‖.
        let d = env.state_bound();
        let reach = lipschitz_upper_bound(&q) * (d * d + 1.0).sqrt();
        let cap = env.max_reward() / (1.0 - cfg.gamma);
        if reach > cap {
            let last = q.layers_mut().last_mut().expect("non-empty");
            last.weight.scale(cap / reach);
        }
        let spectral = (cfg.regularizer.mechanism == Mechanism::Spectral)
            .then(|| SpectralState::new(&q, mix(cfg.seed, 0x5E)));
        Ok(AgentState {
            q_opt: AdamState::new(&q, AdamConfig::with_lr(cfg.q_lr)),
            policy_opt: AdamState::new(&policy, AdamConfig::with_lr(cfg.policy_lr)),
            q,
            policy,
            spectral,
            iteration: 0,
        })
    }

    pub fn actor_critic(&self) -> ActorCritic<'_> {
        ActorCritic {
            q: &self.q,
            policy: &self.policy,
        }
    }

    /// One ascent step on `mean Q(s, π(s))`, critic frozen. Returns the
    /// objective before the step.
    pub fn policy_step(&mut self, states: &Matrix) -> Result<f64> {
        let (objective, mut g) = self.actor_critic().policy_objective_grad(states)?;
        if !g.is_finite() {
            return Err(Error::non_finite("policy gradient"));
        }
        g.scale(-1.0);
        self.policy_opt.step(&mut self.policy, &g)?;
        Ok(objective)
    }

    /// One descent step on `mean (Q(s, a) - y)² + λ L_reg`, followed by
    /// the spectral projection when configured.
    pub fn value_step(
        &mut self,
        batch: ValueBatch<'_>,
        reg: &RegularizerConfig,
        rng: &mut Rng,
    ) -> Result<ValueStepLoss> {
        let (regression, mut g) = regression_loss_grad(&self.q, batch.states, batch.actions, batch.targets)?;
        let mut penalty = 0.0;
        if reg.has_penalty() {
            let pb = PerturbBatch {
                states: batch.states,
                actions: batch.actions,
                next_states: batch.next_states,
            };
            let (p, pg) = robust_loss(&self.actor_critic(), pb, reg, rng)?;
            penalty = p;
            g.add_scaled(reg.lambda, &pg);
        }
        if !g.is_finite() {
            return Err(Error::non_finite("critic gradient"));
        }
        self.q_opt.step(&mut self.q, &g)?;
        if let Some(state) = self.spectral.as_mut() {
            apply_spectral_normalization(&mut self.q, reg.beta, state)?;
        }
        Ok(ValueStepLoss { regression, penalty })
    }
}

/// `mean (Q(s, a) - y)²` and its critic gradient.
pub fn regression_loss_grad(
    q: &MlpParams,
    states: &Matrix,
    actions: &[f64],
    targets: &[f64],
) -> Result<(f64, crate::diffcore::Gradients)> {
    let n = targets.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if n != states.rows() {
        return Err(Error::DimensionMismatch {
            expected: states.rows(),
            got: n,
        });
    }
    let x = critic_input(states, actions)?;
    grad(q, &x, |out| {
        let mut d = Matrix::zeros(n, 1);
        let mut loss = 0.0;
        for i in 0..n {
            let r = out.get(i, 0) - targets[i];
            loss += r * r;
            d.set(i, 0, 2.0 * r / n as f64);
        }
        (loss / n as f64, d)
    })
}

/// `r + γ Q(ŝ′, π(ŝ′))` for one sample; computed from frozen networks.
pub fn q_target(r: f64, next_state: &[f64], ac: &ActorCritic<'_>, gamma: f64) -> f64 {
    r + gamma * ac.value(next_state)
}

/// Batch targets `r_i + γ (1 - terminal_i) mean_m V(ŝ′_{m,i})` over the
/// supplied draws of next states.
pub fn bellman_targets(
    ac: &ActorCritic<'_>,
    rewards: &[f64],
    terminal: &[bool],
    next_draws: &[Matrix],
    gamma: f64,
) -> Result<Vec<f64>> {
    if next_draws.is_empty() {
        return Err(Error::Config("need at least one next-state draw".into()));
    }
    let n = rewards.len();
    let mut boot = vec![0.0; n];
    for draw in next_draws {
        if draw.rows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: draw.rows(),
            });
        }
        for (b, v) in boot.iter_mut().zip(ac.values(draw)?) {
            *b += v / next_draws.len() as f64;
        }
    }
    let y: Vec<f64> = (0..n)
        .map(|i| rewards[i] + if terminal[i] { 0.0 } else { gamma * boot[i] })
        .collect();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("bellman targets"));
    }
    Ok(y)
}

/// Inputs of the loop besides the model.
#[derive(Debug, Clone, Copy)]
pub struct DataSource<'a> {
    pub env: &'a CartPole,
    /// Initial `ρ`; also the records the diagnostics are computed on.
    pub data: &'a TransitionDataset,
    /// Needed for [`RewardSource::Model`].
    pub reward_model: Option<&'a MlpParams>,
}

fn at(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| Error::AtIteration {
        iteration,
        source: Box::new(e),
    }
}

/// Run `cfg.k_iters` iterations and return the final networks with one
/// diagnostics record per iteration.
///
/// Evaluation returns and the local Lipschitz estimate are refreshed every
/// `eval_every` iterations and on the last one; other rows repeat the most
/// recent values.
pub fn run_value_iteration<M: NextStateModel + ?Sized>(
    cfg: &AgentConfig,
    model: &M,
    source: DataSource<'_>,
) -> Result<(AgentState, Vec<DiagnosticsRecord>)> {
    cfg.validate()?;
    source.data.require_non_empty()?;
    if cfg.reward_source == RewardSource::Model && source.reward_model.is_none() {
        return Err(Error::Config("reward_source = model needs a reward model".into()));
    }
    let start = Instant::now();
    let mut state = AgentState::new(cfg, source.env)?;
    let mut trace = Vec::with_capacity(cfg.k_iters);
    if cfg.k_iters == 0 {
        return Ok((state, trace));
    }

    let mut batch_rng = Rng::derived(cfg.seed, 0xBA7C);
    let mut model_rng = Rng::derived(cfg.seed, 0x30DE);
    let mut reg_rng = Rng::derived(cfg.seed, 0x1267);
    let eval_seed = mix(cfg.seed, 0xE7A1);

    // Fixed diagnostic subset of the initial data.
    let mut idx: Vec<usize> = (0..source.data.len()).collect();
    Rng::derived(cfg.seed, 0xD1A6).shuffle(&mut idx);
    idx.truncate(cfg.diag_states);
    idx.sort_unstable();
    let diag = TransitionDataset {
        transitions: idx.iter().map(|&i| source.data.transitions[i]).collect(),
        seed: source.data.seed,
        behavior: source.data.behavior.clone(),
    };
    let diag_states = diag.to_batch().states;
    let mse = model_mse(model, &diag, 1, mix(cfg.seed, 0x35E)).map_err(at(0))?;

    let mut rho = source.data.clone();
    let mut eval = (0.0, 0.0);
    let mut local_lip = 0.0;

    for k in 0..cfg.k_iters {
        let err = at(k);
        let picks: Vec<usize> = (0..cfg.n_batch).map(|_| batch_rng.index(rho.len())).collect();
        let batch: TransitionBatch = rho.select(&picks);
        let draws = (0..cfg.target_samples)
            .map(|_| model.next_states(&batch.states, &batch.actions, &mut model_rng, cfg.target_noise))
            .collect::<Result<Vec<_>>>()
            .map_err(&err)?;
        let rewards = match (cfg.reward_source, source.reward_model) {
            (RewardSource::Model, Some(r)) => {
                let x = critic_input(&batch.states, &batch.actions).map_err(&err)?;
                r.forward_batch(&x).map_err(&err)?.into_vec()
            }
            _ => batch.rewards.clone(),
        };

        for _ in 0..cfg.h {
            state.policy_step(&batch.states).map_err(&err)?;
        }
        let targets =
            bellman_targets(&state.actor_critic(), &rewards, &batch.terminal, &draws, cfg.gamma)
                .map_err(&err)?;

        let vb = ValueBatch {
            states: &batch.states,
            actions: &batch.actions,
            next_states: &batch.next_states,
            targets: &targets,
        };
        for _ in 0..cfg.h {
            state.value_step(vb, &cfg.regularizer, &mut reg_rng).map_err(&err)?;
        }
        state.iteration = k + 1;

        let regression = regression_residual(&state.q, &batch.states, &batch.actions, &targets)
            .map_err(&err)?;
        let ac = state.actor_critic();
        let vame = value_aware_model_error(&ac, model, &diag, cfg.gamma, 1, mix(cfg.seed, k as u64))
            .map_err(&err)?;
        let lip = lipschitz_upper_bound(&state.q);
        if k % cfg.eval_every == 0 || k + 1 == cfg.k_iters {
            let r = evaluate_policy(source.env, &state.policy, cfg.eval_episodes, eval_seed)
                .map_err(&err)?;
            eval = (r.mean_return, r.best_return);
            local_lip = local_lipschitz_estimate(
                &ac,
                &diag_states,
                cfg.lip_epsilon,
                cfg.lip_pairs,
                mix(cfg.seed, 0x11F ^ k as u64),
            )
            .map_err(&err)?;
        }
        let record = DiagnosticsRecord {
            iteration: k,
            eval_return_mean: eval.0,
            eval_return_best: eval.1,
            regression_error: regression,
            vame,
            lip_upper_bound: lip,
            local_lipschitz_estimate: local_lip,
            model_mse: mse,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        if !record.is_finite() {
            return Err(err(Error::non_finite("diagnostics")));
        }
        trace.push(record);

        if cfg.rho_refresh > 0 && (k + 1) % cfg.rho_refresh == 0 && k + 1 < cfg.k_iters {
            let behavior = Behavior::Mixture {
                policy: &state.policy,
                random_prob: cfg.rho_random_prob,
            };
            rho = collect_dataset(source.env, behavior, source.data.len(), mix(cfg.seed, 0x4E0 + k as u64))
                .map_err(&err)?;
        }
    }
    Ok((state, trace))
}
