//! Observables of a value-iteration run: Lipschitz bounds and estimates of
//! the value network, value-aware model error, regression error.
//!
//! Throughout, the state value is `V(s) = Q(s, π(s))`.

use serde::{Deserialize, Serialize};

use crate::agent::bellman_targets;
use crate::diffcore::{norm2, Matrix, MlpParams};
use crate::dynamics::NextStateModel;
use crate::env::TransitionDataset;
use crate::rng::Rng;
use crate::value::ActorCritic;
use crate::{Error, Result};

/// One row of a run's trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub iteration: usize,
    pub eval_return_mean: f64,
    pub eval_return_best: f64,
    /// `δ_k²`: mean squared residual of the new critic against the targets
    /// it was fitted to.
    pub regression_error: f64,
    pub vame: f64,
    pub lip_upper_bound: f64,
    pub local_lipschitz_estimate: f64,
    pub model_mse: f64,
    /// Seconds since the start of the run. Not part of the CSV row.
    pub wall_time_s: f64,
}

/// Column order of [`DiagnosticsRecord::csv_row`].
pub const TRACE_HEADER: &str = "iteration,eval_return_mean,eval_return_best,regression_error,vame,lip_upper_bound,local_lipschitz_estimate,model_mse";

impl DiagnosticsRecord {
    /// Comma-separated values in [`TRACE_HEADER`] order, shortest
    /// round-trip decimals. Wall time is left out so traces are
    /// reproducible byte for byte.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration,
            self.eval_return_mean,
            self.eval_return_best,
            self.regression_error,
            self.vame,
            self.lip_upper_bound,
            self.local_lipschitz_estimate,
            self.model_mse
        )
    }

    /// Inverse of [`csv_row`](Self::csv_row); wall time reads back as 0.
    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "trace row",
            detail,
        };
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 8 {
            return Err(bad(format!("expected 8 fields, got {}", fields.len())));
        }
        let f = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| bad(format!("field {i}: {e}")))
        };
        Ok(DiagnosticsRecord {
            iteration: fields[0]
                .parse()
                .map_err(|e| bad(format!("iteration: {e}")))?,
            eval_return_mean: f(1)?,
            eval_return_best: f(2)?,
            regression_error: f(3)?,
            vame: f(4)?,
            lip_upper_bound: f(5)?,
            local_lipschitz_estimate: f(6)?,
            model_mse: f(7)?,
            wall_time_s: 0.0,
        })
    }

    pub fn is_finite(&self) -> bool {
        [
            self.eval_return_mean,
            self.eval_return_best,
            self.regression_error,
            self.vame,
            self.lip_upper_bound,
            self.local_lipschitz_estimate,
            self.model_mse,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

const SPECTRAL_TOL: f64 = 1e-9;
const SPECTRAL_MAX_STEPS: usize = 1000;

/// Largest singular value of `w` by power iteration on `WᵀW`, from a fixed
/// seeded start, until the relative change drops below 1e-9 or 1000 steps.
pub fn spectral_norm(w: &Matrix) -> f64 {
    if w.as_slice().iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    let mut rng = Rng::new(0x5BEC);
    let mut x: Vec<f64> = (0..w.cols()).map(|_| rng.normal()).collect();
    let mut sigma = 0.0;
    for _ in 0..SPECTRAL_MAX_STEPS {
        let n = norm2(&x);
        if n == 0.0 {
            break;
        }
        x.iter_mut().for_each(|v| *v /= n);
        let wx = w.matvec(&x);
        let next = norm2(&wx);
        x = w.matvec_t(&wx);
        let done = (next - sigma).abs() <= SPECTRAL_TOL * next;
        sigma = next;
        if done {
            break;
        }
    }
    sigma
}

/// Product of per-layer spectral norms; valid for 1-Lipschitz activations.
pub fn lipschitz_upper_bound(net: &MlpParams) -> f64 {
    net.layers().iter().map(|l| spectral_norm(&l.weight)).product()
}

/// Upper bound on the Lipschitz constant of `s ↦ Q(s, π(s))`:
/// `L_Q · sqrt(1 + L_π²)`, since `tanh` is 1-Lipschitz.
pub fn value_lipschitz_bound(ac: &ActorCritic<'_>) -> f64 {
    let lq = lipschitz_upper_bound(ac.q);
    let lp = lipschitz_upper_bound(ac.policy);
    lq * (1.0 + lp * lp).sqrt()
}

fn ball_point(center: &[f64], eps: f64, rng: &mut Rng) -> Vec<f64> {
    // Uniform in the Euclidean ball: Gaussian direction, radius U^{1/d}.
    let d = center.len();
    let dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let n = norm2(&dir).max(f64::MIN_POSITIVE);
    let r = eps * rng.uniform().powf(1.0 / d as f64);
    center.iter().zip(&dir).map(|(c, u)| c + r * u / n).collect()
}

/// Sampled estimate of the local `(X, ε)`-Lipschitz constant of `V` with
/// the Euclidean norm: the largest difference quotient over
/// `pairs_per_state` uniform pairs in each ball. A lower bound on the true
/// supremum.
pub fn local_lipschitz_estimate(
    ac: &ActorCritic<'_>,
    states: &Matrix,
    eps: f64,
    pairs_per_state: usize,
    seed: u64,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("epsilon must be > 0, got {eps}")));
    }
    if states.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = Rng::new(seed);
    let d = states.cols();
    let n = states.rows() * pairs_per_state;
    let mut y1 = Vec::with_capacity(n * d);
    let mut y2 = Vec::with_capacity(n * d);
    for s in states.iter_rows() {
        for _ in 0..pairs_per_state {
            y1.extend(ball_point(s, eps, &mut rng));
            y2.extend(ball_point(s, eps, &mut rng));
        }
    }
    let y1 = Matrix::from_vec(n, d, y1)?;
    let y2 = Matrix::from_vec(n, d, y2)?;
    let v1 = ac.values(&y1)?;
    let v2 = ac.values(&y2)?;
    let mut best = 0.0f64;
    for i in 0..n {
        let dist: f64 = y1
            .row(i)
            .iter()
            .zip(y2.row(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if dist > 0.0 {
            best = best.max((v1[i] - v2[i]).abs() / dist);
        }
    }
    if !best.is_finite() {
        return Err(Error::non_finite("local Lipschitz estimate"));
    }
    Ok(best)
}

/// Per-draw squared value gaps `(V(ŝ′) - V(s′))²` and squared model errors
/// `‖ŝ′ - s′‖²`, `noise_samples` draws per record in draw-major order.
fn value_gaps<M: NextStateModel + ?Sized>(
    ac: &ActorCritic<'_>,
    model: &M,
    data: &TransitionDataset,
    noise_samples: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    data.require_non_empty()?;
    let batch = data.to_batch();
    let v_true = ac.values(&batch.next_states)?;
    let mut rng = Rng::new(seed);
    let mut gaps = Vec::new();
    let mut errs = Vec::new();
    for _ in 0..noise_samples.max(1) {
        let pred = model.next_states(&batch.states, &batch.actions, &mut rng, true)?;
        let v_pred = ac.values(&pred)?;
        for i in 0..batch.len() {
            gaps.push((v_pred[i] - v_true[i]).powi(2));
            errs.push(
                pred.row(i)
                    .iter()
                    .zip(batch.next_states.row(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum(),
            );
        }
    }
    Ok((gaps, errs))
}

/// `γ² · mean (V(ŝ′) - V(s′))²` over the data, averaging over
/// `noise_samples` model draws per record.
pub fn value_aware_model_error<M: NextStateModel + ?Sized>(
    ac: &ActorCritic<'_>,
    model: &M,
    data: &TransitionDataset,
    gamma: f64,
    noise_samples: usize,
    seed: u64,
) -> Result<f64> {
    let (gaps, _) = value_gaps(ac, model, data, noise_samples, seed)?;
    let vame = gamma * gamma * gaps.iter().sum::<f64>() / gaps.len() as f64;
    if !vame.is_finite() {
        return Err(Error::non_finite("value-aware model error"));
    }
    Ok(vame)
}

/// Mean squared residual `mean (Q(s, a) - y)²`.
pub fn regression_residual(q: &MlpParams, states: &Matrix, actions: &[f64], targets: &[f64]) -> Result<f64> {
    if targets.len() != states.rows() {
        return Err(Error::DimensionMismatch {
            expected: states.rows(),
            got: targets.len(),
        });
    }
    if targets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let x = crate::value::critic_input(states, actions)?;
    let pred = q.forward_batch(&x)?;
    let sum: f64 = pred
        .as_slice()
        .iter()
        .zip(targets)
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    Ok(sum / targets.len() as f64)
}

/// Empirical regression error of `q_new` against the model-based Bellman
/// targets of `old` over the whole dataset: targets are
/// `r + γ (1 - terminal) Q_old(ŝ′, π(ŝ′))` with one model draw per record.
pub fn regression_error<M: NextStateModel + ?Sized>(
    q_new: &MlpParams,
    old: &ActorCritic<'_>,
    model: &M,
    data: &TransitionDataset,
    gamma: f64,
    seed: u64,
) -> Result<f64> {
    data.require_non_empty()?;
    let batch = data.to_batch();
    let mut rng = Rng::new(seed);
    let pred = model.next_states(&batch.states, &batch.actions, &mut rng, true)?;
    let targets = bellman_targets(old, &batch.rewards, &batch.terminal, &[pred], gamma)?;
    regression_residual(q_new, &batch.states, &batch.actions, &targets)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub vame: f64,
    /// `γ² L_V² max_i ‖ŝ′_i - s′_i‖²`
    pub bound: f64,
    /// `max_i ‖ŝ′_i - s′_i‖`
    pub model_error: f64,
    pub holds: bool,
}

/// Evaluate `vame ≤ γ² L_V² max_i ‖ŝ′_i - s′_i‖²` on the same model draws,
/// with `L_V` from [`value_lipschitz_bound`].
pub fn theorem2_bound_check<M: NextStateModel + ?Sized>(
    ac: &ActorCritic<'_>,
    model: &M,
    data: &TransitionDataset,
    gamma: f64,
    noise_samples: usize,
    seed: u64,
) -> Result<BoundCheck> {
    let (gaps, errs) = value_gaps(ac, model, data, noise_samples, seed)?;
    let vame = gamma * gamma * gaps.iter().sum::<f64>() / gaps.len() as f64;
    let max_err = errs.iter().copied().fold(0.0, f64::max);
    let l = value_lipschitz_bound(ac);
    let bound = gamma * gamma * l * l * max_err;
    if !vame.is_finite() || !bound.is_finite() {
        return Err(Error::non_finite("bound check"));
    }
    // Relative slack for the rounding in both sides.
    let holds = vame <= bound * (1.0 + 1e-9) + 1e-300;
    Ok(BoundCheck {
        vame,
        bound,
        model_error: max_err.sqrt(),
        holds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{mlp_init, Activation, Dense};
    use crate::dynamics::{DynamicsModel, ModelVariant, LOGVAR_MAX, LOGVAR_MIN};
    use crate::env::{PendulumState, Transition};

    fn dense(rows: usize, cols: usize, w: Vec<f64>, b: Vec<f64>) -> Dense {
        Dense {
            weight: Matrix::from_vec(rows, cols, w).unwrap(),
            bias: b,
        }
    }

    fn linear(w: Vec<f64>, b: f64) -> MlpParams {
        let n = w.len();
        MlpParams::from_layers(vec![dense(1, n, w, vec![b])], Activation::Relu, 0).unwrap()
    }

    fn svd_norm(w: &Matrix) -> f64 {
        let m = nalgebra::DMatrix::from_row_slice(w.rows(), w.cols(), w.as_slice());
        m.singular_values().max()
    }

    #[test]
    fn single_layer_bound_is_its_norm() {
        let mut rng = Rng::new(4);
        let w: Vec<f64> = (0..15).map(|_| rng.normal()).collect();
        let net = MlpParams::from_layers(vec![dense(3, 5, w, vec![0.0; 3])], Activation::Tanh, 0).unwrap();
        let want = svd_norm(&net.layers()[0].weight);
        assert!((lipschitz_upper_bound(&net) - want).abs() < 1e-6 * want);
    }

    #[test]
    fn two_layer_bound_multiplies() {
        let l1 = dense(2, 2, vec![2.0, 0.0, 0.0, 1.0], vec![0.0; 2]);
        let l2 = dense(1, 2, vec![3.0, 0.0], vec![0.0]);
        let net = MlpParams::from_layers(vec![l1, l2], Activation::Relu, 0).unwrap();
        assert!((lipschitz_upper_bound(&net) - 6.0).abs() < 1e-9);
        assert_eq!(spectral_norm(&Matrix::zeros(2, 3)), 0.0);
    }

    #[test]
    fn spectral_norm_matches_svd() {
        let mut rng = Rng::new(5);
        for trial in 0..20 {
            let (r, c) = (1 + trial % 6, 1 + (trial * 7) % 9);
            let w = Matrix::from_vec(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap();
            let want = svd_norm(&w);
            assert!((spectral_norm(&w) - want).abs() <= 1e-6 * want, "{r}x{c}");
        }
    }

    #[test]
    fn local_estimate_of_affine_value() {
        // Q(s, a) = g·s + 0·a; π arbitrary.
        let g = [0.3, -1.2, 0.5, 2.0];
        let q = linear(vec![0.3, -1.2, 0.5, 2.0, 0.0], 0.7);
        let policy = mlp_init(&[4, 3, 1], Activation::Tanh, 1).unwrap();
        let ac = ActorCritic::new(&q, &policy).unwrap();
        let states = Matrix::from_rows(&[[0.0; 4], [1.0, 0.0, -1.0, 0.5]]).unwrap();
        let gn = norm2(&g);
        let est = local_lipschitz_estimate(&ac, &states, 0.1, 20_000, 3).unwrap();
        assert!(est <= gn * (1.0 + 1e-9));
        assert!(est >= 0.97 * gn, "{est} vs {gn}");
        let flat = linear(vec![0.0; 5], 2.0);
        let ac0 = ActorCritic::new(&flat, &policy).unwrap();
        assert_eq!(local_lipschitz_estimate(&ac0, &states, 0.1, 100, 3).unwrap(), 0.0);
        assert!(local_lipschitz_estimate(&ac0, &states, 0.0, 100, 3).is_err());
    }

    fn dataset(rows: &[([f64; 4], f64, [f64; 4])]) -> TransitionDataset {
        TransitionDataset {
            transitions: rows
                .iter()
                .map(|(s, a, sn)| Transition {
                    state: PendulumState::from_slice(s),
                    action: *a,
                    next_state: PendulumState::from_slice(sn),
                    reward: 1.0,
                    done: false,
                })
                .collect(),
            seed: 0,
            behavior: "hand".into(),
        }
    }

    /// Deterministic linear model `ŝ′ = M [s, a]`.
    fn linear_model(m: Vec<f64>) -> DynamicsModel {
        DynamicsModel {
            variant: ModelVariant::Deterministic,
            members: vec![MlpParams::from_layers(vec![dense(4, 5, m, vec![0.0; 4])], Activation::Relu, 0).unwrap()],
            residual: false,
            logvar_min: LOGVAR_MIN,
            logvar_max: LOGVAR_MAX,
        }
    }

    fn identity_model() -> DynamicsModel {
        let mut m = vec![0.0; 20];
        for i in 0..4 {
            m[i * 5 + i] = 1.0;
        }
        linear_model(m)
    }

    #[test]
    fn vame_hand_computed() {
        // Q(s, a) = w·s + c·a with a = tanh(p·s).
        let q = linear(vec![1.0, 2.0, -1.0, 0.5, 0.25], 0.1);
        let policy = linear(vec![0.5, 0.0, 1.0, 0.0], 0.2);
        let ac = ActorCritic::new(&q, &policy).unwrap();
        let data = dataset(&[
            ([0.1, 0.2, 0.0, 0.0], 0.5, [0.3, -0.1, 0.05, 0.2]),
            ([-0.2, 0.0, 0.1, 0.4], -0.3, [-0.1, 0.2, 0.0, 0.1]),
        ]);
        let model = identity_model();
        let v = |s: [f64; 4]| {
            let a = (0.5 * s[0] + s[2] + 0.2f64).tanh();
            s[0] + 2.0 * s[1] - s[2] + 0.5 * s[3] + 0.25 * a + 0.1
        };
        let gamma = 0.9f64;
        let expect = gamma * gamma
            * ((v([0.1, 0.2, 0.0, 0.0]) - v([0.3, -0.1, 0.05, 0.2])).powi(2)
                + (v([-0.2, 0.0, 0.1, 0.4]) - v([-0.1, 0.2, 0.0, 0.1])).powi(2))
            / 2.0;
        let got = value_aware_model_error(&ac, &model, &data, gamma, 1, 0).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn vame_zero_cases() {
        let mut rng = Rng::new(2);
        let rows: Vec<_> = (0..20)
            .map(|_| {
                let s: [f64; 4] = std::array::from_fn(|_| rng.normal());
                let a = rng.uniform_in(-1.0, 1.0);
                (s, a, s)
            })
            .collect();
        let data = dataset(&rows);
        let q = mlp_init(&[5, 8, 1], Activation::Relu, 1).unwrap();
        let policy = mlp_init(&[4, 8, 1], Activation::Relu, 2).unwrap();
        let ac = ActorCritic::new(&q, &policy).unwrap();
        // Model equal to the true (identity) dynamics.
        assert_eq!(value_aware_model_error(&ac, &identity_model(), &data, 0.99, 3, 0).unwrap(), 0.0);
        // Constant critic, arbitrary model.
        let flat = linear(vec![0.0; 5], -3.0);
        let ac0 = ActorCritic::new(&flat, &policy).unwrap();
        let model = linear_model((0..20).map(|i| i as f64 * 0.1).collect());
        assert_eq!(value_aware_model_error(&ac0, &model, &data, 0.99, 3, 0).unwrap(), 0.0);
        let check = theorem2_bound_check(&ac0, &model, &data, 0.99, 1, 0).unwrap();
        assert!(check.holds && check.vame == 0.0);
        let check = theorem2_bound_check(&ac, &identity_model(), &data, 0.99, 1, 0).unwrap();
        assert!(check.holds && check.bound == 0.0);
    }

    #[test]
    fn regression_error_two_pass() {
        let data = dataset(&[
            ([0.1, 0.2, 0.0, 0.0], 0.5, [0.3, -0.1, 0.05, 0.2]),
            ([-0.2, 0.0, 0.1, 0.4], -0.3, [-0.1, 0.2, 0.0, 0.1]),
            ([0.0, 0.3, -0.1, 0.0], 0.9, [0.0, 0.3, -0.1, 0.0]),
        ]);
        let q_old = mlp_init(&[5, 6, 1], Activation::Tanh, 3).unwrap();
        let q_new = mlp_init(&[5, 6, 1], Activation::Tanh, 4).unwrap();
        let policy = mlp_init(&[4, 6, 1], Activation::Tanh, 5).unwrap();
        let old = ActorCritic::new(&q_old, &policy).unwrap();
        let model = identity_model();
        let gamma = 0.8;
        let mut sum = 0.0;
        for t in data.iter() {
            let s = t.state.to_array();
            let y = t.reward + gamma * old.value(&s);
            let mut x = s.to_vec();
            x.push(t.action);
            sum += (q_new.forward(&x).unwrap()[0] - y).powi(2);
        }
        let want = sum / 3.0;
        let got = regression_error(&q_new, &old, &model, &data, gamma, 0).unwrap();
        assert!((got - want).abs() < 1e-12);

        // γ = 0: plain reward regression.
        let got0 = regression_error(&q_new, &old, &model, &data, 0.0, 0).unwrap();
        let want0 = data
            .iter()
            .map(|t| {
                let mut x = t.state.to_array().to_vec();
                x.push(t.action);
                (q_new.forward(&x).unwrap()[0] - 1.0).powi(2)
            })
            .sum::<f64>()
            / 3.0;
        assert!((got0 - want0).abs() < 1e-12);
    }

    #[test]
    fn csv_row_round_trips() {
        let r = DiagnosticsRecord {
            iteration: 17,
            eval_return_mean: 123.25,
            eval_return_best: 1000.0,
            regression_error: 0.1 + 0.2,
            vame: 1e-300,
            lip_upper_bound: 8.5e3,
            local_lipschitz_estimate: std::f64::consts::PI,
            model_mse: 2.0f64.sqrt(),
            wall_time_s: 3.0,
        };
        let back = DiagnosticsRecord::parse_csv_row(&r.csv_row()).unwrap();
        assert_eq!(back, DiagnosticsRecord { wall_time_s: 0.0, ..r });
        assert_eq!(TRACE_HEADER.split(',').count(), 8);
        assert!(DiagnosticsRecord::parse_csv_row("1,2").is_err());
    }
}
