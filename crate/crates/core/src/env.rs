//! Deterministic cart-pole with a survival reward.
//!
//! Dynamics are the classic Barto–Sutton–Anderson cart-pole integrated with
//! semi-implicit Euler (velocities first, then positions). `θ = 0` is the
//! upright pole. Velocities are clamped to `±v_max` after every step, which
//! keeps every reachable state inside a ball of radius [`CartPole::state_bound`].
//!
//! Reward is `1.0` for every step whose next state is still inside the
//! thresholds and `0.0` for the step that leaves them, so a rollout that
//! survives the 1000-step cap collects exactly 1000.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Matrix, MlpParams};
use crate::rng::{mix, Rng};
use crate::{Error, Result};

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 1;

/// `[x, ẋ, θ, θ̇]`
pub type State = [f64; STATE_DIM];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PendulumState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl PendulumState {
    pub fn to_array(self) -> State {
        [self.x, self.x_dot, self.theta, self.theta_dot]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        PendulumState {
            x: s[0],
            x_dot: s[1],
            theta: s[2],
            theta_dot: s[3],
        }
    }
}

impl From<State> for PendulumState {
    fn from(s: State) -> Self {
        PendulumState::from_slice(&s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartPole {
    pub gravity: f64,
    pub mass_cart: f64,
    pub mass_pole: f64,
    /// Half the pole length (m).
    pub half_length: f64,
    /// Force applied for action `±1` (N).
    pub force_mag: f64,
    pub dt: f64,
    pub x_max: f64,
    pub theta_max: f64,
    pub v_max: f64,
    pub max_steps: usize,
}

impl Default for CartPole {
    fn default() -> Self {
        CartPole {
            gravity: 9.8,
            mass_cart: 1.0,
            mass_pole: 0.1,
            half_length: 0.5,
            force_mag: 10.0,
            dt: 0.02,
            x_max: 2.4,
            theta_max: 0.2,
            v_max: 10.0,
            max_steps: 1000,
        }
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub next_state: PendulumState,
    pub reward: f64,
    /// Next state left the thresholds.
    pub failed: bool,
}

impl CartPole {
    /// Initial state with each coordinate uniform in `[-0.05, 0.05]`.
    pub fn reset(&self, seed: u64) -> PendulumState {
        let mut rng = Rng::new(seed);
        let mut c = || rng.uniform_in(-0.05, 0.05);
        PendulumState {
            x: c(),
            x_dot: c(),
            theta: c(),
            theta_dot: c(),
        }
    }

    pub fn is_failed(&self, s: &PendulumState) -> bool {
        s.x.abs() > self.x_max || s.theta.abs() > self.theta_max
    }

    /// Second derivatives `(ẍ, θ̈)` under force `force`.
    fn accelerations(&self, s: &PendulumState, force: f64) -> (f64, f64) {
        let total = self.mass_cart + self.mass_pole;
        let pml = self.mass_pole * self.half_length;
        let (sin, cos) = s.theta.sin_cos();
        let temp = (force + pml * s.theta_dot * s.theta_dot * sin) / total;
        let theta_acc = (self.gravity * sin - cos * temp)
            / (self.half_length * (4.0 / 3.0 - self.mass_pole * cos * cos / total));
        let x_acc = temp - pml * theta_acc * cos / total;
        (x_acc, theta_acc)
    }

    /// Integrate one step of length `dt` (no threshold checks).
    pub fn integrate(&self, s: &PendulumState, action: f64, dt: f64) -> PendulumState {
        let force = self.force_mag * action.clamp(-1.0, 1.0);
        let (x_acc, theta_acc) = self.accelerations(s, force);
        let x_dot = (s.x_dot + dt * x_acc).clamp(-self.v_max, self.v_max);
        let theta_dot = (s.theta_dot + dt * theta_acc).clamp(-self.v_max, self.v_max);
        PendulumState {
            x: s.x + dt * x_dot,
            x_dot,
            theta: s.theta + dt * theta_dot,
            theta_dot,
        }
    }

    /// One environment step. Fails on already-terminal states.
    pub fn step(&self, s: &PendulumState, action: f64) -> Result<Step> {
        if self.is_failed(s) {
            return Err(Error::TerminalState);
        }
        let next_state = self.integrate(s, action, self.dt);
        let failed = self.is_failed(&next_state);
        Ok(Step {
            next_state,
            reward: if failed { 0.0 } else { 1.0 },
            failed,
        })
    }

    /// Radius `D` with `‖s‖₂ ≤ D` for every reachable state, including the
    /// first state past a threshold.
    pub fn state_bound(&self) -> f64 {
        let x = self.x_max + self.dt * self.v_max;
        let th = self.theta_max + self.dt * self.v_max;
        (x * x + th * th + 2.0 * self.v_max * self.v_max).sqrt()
    }

    /// Largest per-step reward.
    pub fn max_reward(&self) -> f64 {
        1.0
    }
}

pub fn env_reset(seed: u64) -> PendulumState {
    CartPole::default().reset(seed)
}

pub fn env_step(state: &PendulumState, action: f64) -> Result<Step> {
    CartPole::default().step(state, action)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: PendulumState,
    pub action: f64,
    pub next_state: PendulumState,
    pub reward: f64,
    /// Episode ended here: threshold crossed or step cap reached.
    pub done: bool,
}

impl Transition {
    /// The pole or cart left the thresholds (as opposed to a step-cap cut).
    pub fn is_terminal(&self) -> bool {
        self.done && self.reward == 0.0
    }
}

/// Action source used to collect data.
#[derive(Debug, Clone, Copy)]
pub enum Behavior<'a> {
    UniformRandom,
    /// Deterministic `tanh(net(s))` policy.
    Policy(&'a MlpParams),
    /// With probability `random_prob` a uniform action, else the policy's.
    Mixture {
        policy: &'a MlpParams,
        random_prob: f64,
    },
}

impl Behavior<'_> {
    fn describe(&self) -> String {
        match self {
            Behavior::UniformRandom => "uniform_random".into(),
            Behavior::Policy(_) => "policy".into(),
            Behavior::Mixture { random_prob, .. } => format!("mixture(p_random={random_prob})"),
        }
    }

    fn act(&self, s: &PendulumState, rng: &mut Rng) -> f64 {
        match self {
            Behavior::UniformRandom => rng.uniform_in(-1.0, 1.0),
            Behavior::Policy(p) => policy_action(p, s),
            Behavior::Mixture {
                policy,
                random_prob,
            } => {
                // Draw both so the stream position does not depend on the branch.
                let coin = rng.uniform();
                let random = rng.uniform_in(-1.0, 1.0);
                if coin < *random_prob {
                    random
                } else {
                    policy_action(policy, s)
                }
            }
        }
    }
}

/// `tanh` of the first network output.
pub fn policy_action(policy: &MlpParams, s: &PendulumState) -> f64 {
    policy.forward_unchecked(&s.to_array())[0].tanh()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransitionDataset {
    pub transitions: Vec<Transition>,
    pub seed: u64,
    pub behavior: String,
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Transition> {
        self.transitions.iter()
    }

    pub fn to_batch(&self) -> TransitionBatch {
        TransitionBatch::from_transitions(&self.transitions)
    }

    /// Rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> TransitionBatch {
        TransitionBatch::from_transitions(idx.iter().map(|&i| &self.transitions[i]))
    }

    pub(crate) fn require_non_empty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::EmptyDataset)
        } else {
            Ok(())
        }
    }
}

/// Column view of a set of transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub states: Matrix,
    pub actions: Vec<f64>,
    pub next_states: Matrix,
    pub rewards: Vec<f64>,
    pub terminal: Vec<bool>,
}

impl TransitionBatch {
    pub fn from_transitions<'a>(rows: impl IntoIterator<Item = &'a Transition>) -> Self {
        let mut s = Vec::new();
        let mut sn = Vec::new();
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        let mut terminal = Vec::new();
        for t in rows {
            s.extend_from_slice(&t.state.to_array());
            sn.extend_from_slice(&t.next_state.to_array());
            actions.push(t.action);
            rewards.push(t.reward);
            terminal.push(t.is_terminal());
        }
        let n = actions.len();
        TransitionBatch {
            states: Matrix::from_vec(n, STATE_DIM, s).expect("sized"),
            actions,
            next_states: Matrix::from_vec(n, STATE_DIM, sn).expect("sized"),
            rewards,
            terminal,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Collect exactly `n` transitions, restarting episodes when they end.
pub fn collect_dataset(
    env: &CartPole,
    behavior: Behavior<'_>,
    n: usize,
    seed: u64,
) -> Result<TransitionDataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    let mut rng = Rng::new(seed);
    let mut transitions = Vec::with_capacity(n);
    let mut state = env.reset(rng.next_u64());
    let mut t = 0;
    while transitions.len() < n {
        let action = behavior.act(&state, &mut rng);
        let step = env.step(&state, action)?;
        t += 1;
        let done = step.failed || t >= env.max_steps;
        transitions.push(Transition {
            state,
            action: action.clamp(-1.0, 1.0),
            next_state: step.next_state,
            reward: step.reward,
            done,
        });
        if done {
            state = env.reset(rng.next_u64());
            t = 0;
        } else {
            state = step.next_state;
        }
    }
    Ok(TransitionDataset {
        transitions,
        seed,
        behavior: behavior.describe(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub mean_return: f64,
    pub best_return: f64,
}

/// Roll out `act` from `episodes` seeded resets; episode `i` starts from
/// `reset(mix(seed, i))`.
pub fn evaluate_with<F>(env: &CartPole, mut act: F, episodes: usize, seed: u64) -> Result<EvalResult>
where
    F: FnMut(&PendulumState) -> f64,
{
    if episodes == 0 {
        return Err(Error::Config("episodes must be >= 1".into()));
    }
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut s = env.reset(mix(seed, ep as u64));
        let mut ret = 0.0;
        for _ in 0..env.max_steps {
            let step = env.step(&s, act(&s))?;
            ret += step.reward;
            if step.failed {
                break;
            }
            s = step.next_state;
        }
        returns.push(ret);
    }
    Ok(EvalResult {
        mean_return: returns.iter().sum::<f64>() / episodes as f64,
        best_return: returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Evaluate the deterministic policy `a = tanh(net(s))`.
pub fn evaluate_policy(
    env: &CartPole,
    policy: &MlpParams,
    episodes: usize,
    seed: u64,
) -> Result<EvalResult> {
    if policy.input_dim() != STATE_DIM {
        return Err(Error::DimensionMismatch {
            expected: STATE_DIM,
            got: policy.input_dim(),
        });
    }
    evaluate_with(env, |s| policy_action(policy, s), episodes, seed)
}

pub const DATASET_HEADER: &str =
    "x,x_dot,theta,theta_dot,a,x_next,x_dot_next,theta_next,theta_dot_next,r,done";

impl TransitionDataset {
    /// CSV with [`DATASET_HEADER`]; floats use shortest round-trip decimals,
    /// `done` is `0`/`1`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{DATASET_HEADER}")?;
        for t in &self.transitions {
            let s = t.state.to_array();
            let n = t.next_state.to_array();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                s[0],
                s[1],
                s[2],
                s[3],
                t.action,
                n[0],
                n[1],
                n[2],
                n[3],
                t.reward,
                u8::from(t.done)
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let bad = |line: usize, detail: String| Error::Format {
            what: "dataset csv",
            detail: format!("line {line}: {detail}"),
        };
        let mut lines = BufReader::new(r).lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == DATASET_HEADER => {}
            _ => return Err(bad(1, "missing or wrong header".into())),
        }
        let mut transitions = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| bad(i + 2, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(i + 2, e.to_string()))?;
            if vals.len() != 11 {
                return Err(bad(i + 2, format!("{} fields", vals.len())));
            }
            transitions.push(Transition {
                state: PendulumState::from_slice(&vals[0..4]),
                action: vals[4],
                next_state: PendulumState::from_slice(&vals[5..9]),
                reward: vals[9],
                done: vals[10] != 0.0,
            });
        }
        Ok(TransitionDataset {
            transitions,
            seed: 0,
            behavior: "csv".into(),
        })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_csv(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        TransitionDataset::read_csv(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Activation, Dense, Matrix};

    /// Linear `tanh(k·s)` controller that balances the default cart-pole.
    pub(crate) fn stabilizing_policy() -> MlpParams {
        MlpParams::from_layers(
            vec![Dense {
                weight: Matrix::from_vec(1, 4, vec![0.1, 0.25, 3.0, 0.5]).unwrap(),
                bias: vec![0.0],
            }],
            Activation::Relu,
            0,
        )
        .unwrap()
    }

    #[test]
    fn reset_deterministic_and_bounded() {
        assert_eq!(env_reset(11), env_reset(11));
        for seed in 0..10_000 {
            let s = env_reset(seed).to_array();
            assert!(s.iter().all(|v| v.abs() <= 0.05));
        }
    }

    #[test]
    fn reset_mean_near_zero() {
        let n = 100_000;
        let mut sum = [0.0; 4];
        for seed in 0..n {
            for (acc, v) in sum.iter_mut().zip(env_reset(seed).to_array()) {
                *acc += v;
            }
        }
        // std of U(-a, a) is a/sqrt(3)
        let sigma = 0.05 / 3f64.sqrt() / (n as f64).sqrt();
        for acc in sum {
            assert!((acc / n as f64).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn upright_equilibrium_is_fixed() {
        let s = PendulumState::default();
        let step = env_step(&s, 0.0).unwrap();
        assert_eq!(step.next_state, s);
        assert_eq!(step.reward, 1.0);
        assert!(!step.failed);
    }

    #[test]
    fn stepping_terminal_state_errors() {
        let s = PendulumState {
            theta: 0.3,
            ..Default::default()
        };
        assert!(matches!(env_step(&s, 0.0), Err(Error::TerminalState)));
    }

    #[test]
    fn one_step_matches_fine_integration() {
        let env = CartPole::default();
        let s = PendulumState {
            x: 0.1,
            x_dot: -0.3,
            theta: 0.05,
            theta_dot: 0.2,
        };
        for action in [-0.3, 0.0, 0.25] {
            let coarse = env.integrate(&s, action, env.dt).to_array();
            let mut fine = s;
            for _ in 0..20 {
                fine = env.integrate(&fine, action, env.dt / 20.0);
            }
            for (c, f) in coarse.iter().zip(fine.to_array()) {
                assert!((c - f).abs() < 1e-3, "{c} vs {f}");
            }
        }
    }

    #[test]
    fn stabilizing_policy_survives_cap() {
        let env = CartPole::default();
        let r = evaluate_policy(&env, &stabilizing_policy(), 5, 3).unwrap();
        assert_eq!(r.best_return, 1000.0);
        assert_eq!(r.mean_return, 1000.0);
    }

    #[test]
    fn constant_push_falls_quickly() {
        let env = CartPole::default();
        let r = evaluate_with(&env, |_| 1.0, 3, 0).unwrap();
        assert!(r.best_return < 100.0);
        let single = evaluate_with(&env, |_| 1.0, 1, 0).unwrap();
        assert_eq!(single.mean_return, single.best_return);
    }

    #[test]
    fn collect_sizes_and_determinism() {
        let env = CartPole::default();
        let one = collect_dataset(&env, Behavior::UniformRandom, 1, 0).unwrap();
        assert_eq!(one.len(), 1);
        let a = collect_dataset(&env, Behavior::UniformRandom, 500, 9).unwrap();
        let b = collect_dataset(&env, Behavior::UniformRandom, 500, 9).unwrap();
        assert_eq!(a, b);
        assert!(collect_dataset(&env, Behavior::UniformRandom, 0, 9).is_err());
    }

    #[test]
    fn uniform_actions_average_to_zero() {
        let env = CartPole::default();
        let n = 20_000;
        let d = collect_dataset(&env, Behavior::UniformRandom, n, 5).unwrap();
        let mean = d.iter().map(|t| t.action).sum::<f64>() / n as f64;
        let sigma = (1.0f64 / 3.0).sqrt() / (n as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma);
    }

    #[test]
    fn trajectories_stay_bounded() {
        let env = CartPole::default();
        let d = collect_dataset(&env, Behavior::UniformRandom, 20_000, 1).unwrap();
        let bound = env.state_bound();
        let norm = |s: &PendulumState| s.to_array().iter().map(|v| v * v).sum::<f64>().sqrt();
        for t in d.iter() {
            assert!(norm(&t.state) <= bound && norm(&t.next_state) <= bound);
            assert!(t.reward == 0.0 || t.reward == 1.0);
            assert!(!env.is_failed(&t.state));
            assert_eq!(t.is_terminal(), env.is_failed(&t.next_state));
        }
        assert!(d.iter().any(|t| t.is_terminal()));
    }

    #[test]
    fn mixture_and_policy_behaviors() {
        let env = CartPole::default();
        let pol = stabilizing_policy();
        let d = collect_dataset(&env, Behavior::Policy(&pol), 1500, 2).unwrap();
        // A balancing policy runs into the cap, not the thresholds.
        assert!(d.iter().filter(|t| t.done).all(|t| !t.is_terminal()));
        let m = collect_dataset(
            &env,
            Behavior::Mixture {
                policy: &pol,
                random_prob: 0.5,
            },
            300,
            2,
        )
        .unwrap();
        assert_eq!(m.len(), 300);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let env = CartPole::default();
        let d = collect_dataset(&env, Behavior::UniformRandom, 200, 4).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(DATASET_HEADER));
        let back = TransitionDataset::read_csv(&buf[..]).unwrap();
        assert_eq!(back.transitions, d.transitions);
        assert!(TransitionDataset::read_csv(&b"a,b\n1,2\n"[..]).is_err());
    }
}
