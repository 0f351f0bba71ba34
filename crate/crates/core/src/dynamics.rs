//! Learned transition models.
//!
//! A [`DynamicsModel`] holds `K ≥ 1` member networks over inputs `[s, a]`.
//! Deterministic members output the next state; probabilistic members output
//! `[μ, raw log-variance]` of a diagonal Gaussian. With `residual = true` the
//! mean is `s + net(s, a)` instead of `net(s, a)`.
//!
//! Log-variances are squashed into `[logvar_min, logvar_max]` with the
//! softplus clamp
//! `lv = max - softplus(max - raw); lv = min + softplus(lv - min)`,
//! which keeps gradients alive at the bounds.

use serde::{Deserialize, Serialize};

use crate::diffcore::checkpoint::Checkpoint;
use crate::diffcore::{mlp_init, Activation, AdamConfig, AdamState, Matrix, MlpParams};
use crate::env::{CartPole, PendulumState, Transition, TransitionDataset, ACTION_DIM, STATE_DIM};
use crate::rng::{mix, Rng};
use crate::{Error, Result};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Deterministic,
    Probabilistic,
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(ModelVariant::Deterministic),
            "probabilistic" => Ok(ModelVariant::Probabilistic),
            other => Err(Error::Config(format!("unknown model variant `{other}`"))),
        }
    }
}

impl ModelVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Deterministic => "deterministic",
            ModelVariant::Probabilistic => "probabilistic",
        }
    }
}

/// Loss for deterministic members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitLoss {
    /// `mean ‖f(s,a) - s′‖²`
    SquaredL2,
    /// `mean ‖f(s,a) - s′‖`
    L2,
}

impl std::str::FromStr for FitLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared_l2" => Ok(FitLoss::SquaredL2),
            "l2" => Ok(FitLoss::L2),
            other => Err(Error::Config(format!("unknown model loss `{other}`"))),
        }
    }
}

impl FitLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            FitLoss::SquaredL2 => "squared_l2",
            FitLoss::L2 => "l2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of the data held out for reporting, in `[0, 0.5]`.
    pub holdout_fraction: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub residual: bool,
    pub loss: FitLoss,
}

impl Default for ModelTrainConfig {
    fn default() -> Self {
        ModelTrainConfig {
            epochs: 30,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
            holdout_fraction: 0.1,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            residual: true,
            loss: FitLoss::SquaredL2,
        }
    }
}

impl ModelTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must be in [0, 0.5]".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("model lr must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Mean training loss per epoch, per member.
    pub epoch_losses: Vec<Vec<f64>>,
    /// Holdout MSE of the mean prediction, if a holdout was kept.
    pub holdout_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    pub variant: ModelVariant,
    pub members: Vec<MlpParams>,
    pub residual: bool,
    pub logvar_min: f64,
    pub logvar_max: f64,
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Bounded log-variance and its derivative with respect to the raw output.
fn clamp_logvar(raw: f64, lo: f64, hi: f64) -> (f64, f64) {
    let upper = hi - softplus(hi - raw);
    let lv = lo + softplus(upper - lo);
    if lv > hi {
        // softplus overshoots by at most log(1 + e^{lo - hi})
        return (hi, 0.0);
    }
    let d = sigmoid(hi - raw) * sigmoid(upper - lo);
    (lv, d)
}

/// Per-sample Gaussian NLL without constants:
/// `Σ_d (μ_d - y_d)² e^{-lv_d} + lv_d`.
pub fn gaussian_nll(mean: &[f64], logvar: &[f64], target: &[f64]) -> f64 {
    mean.iter()
        .zip(logvar)
        .zip(target)
        .map(|((m, lv), y)| (m - y) * (m - y) * (-lv).exp() + lv)
        .sum()
}

fn inputs_of<'a>(rows: impl Iterator<Item = &'a Transition>) -> (Matrix, Matrix) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut n = 0;
    for t in rows {
        x.extend_from_slice(&t.state.to_array());
        x.push(t.action);
        y.extend_from_slice(&t.next_state.to_array());
        n += 1;
    }
    (
        Matrix::from_vec(n, STATE_DIM + ACTION_DIM, x).expect("sized"),
        Matrix::from_vec(n, STATE_DIM, y).expect("sized"),
    )
}

impl DynamicsModel {
    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn state_dim(&self) -> usize {
        self.members[0].input_dim() - ACTION_DIM
    }

    /// Per-member forward: means and (probabilistic only) bounded
    /// log-variances, one row per input row.
    fn member_forward(&self, member: usize, x: &Matrix) -> Result<(Matrix, Option<Matrix>)> {
        let out = self.members[member].forward_batch(x)?;
        let d = self.state_dim();
        let mut mean = out.columns(0, d);
        if self.residual {
            for r in 0..x.rows() {
                for j in 0..d {
                    let v = mean.get(r, j) + x.get(r, j);
                    mean.set(r, j, v);
                }
            }
        }
        let logvar = match self.variant {
            ModelVariant::Deterministic => None,
            ModelVariant::Probabilistic => {
                let mut lv = out.columns(d, 2 * d);
                for v in lv.as_mut_slice() {
                    *v = clamp_logvar(*v, self.logvar_min, self.logvar_max).0;
                }
                Some(lv)
            }
        };
        Ok((mean, logvar))
    }

    /// Mean of member `member` and its bounded log-variance at one input.
    pub fn member_gaussian(&self, member: usize, s: &[f64], a: f64) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let x = model_input(s, a)?;
        let (m, lv) = self.member_forward(member, &x)?;
        Ok((m.into_vec(), lv.map(Matrix::into_vec)))
    }

    /// Batched sampling: each row picks a uniform member; probabilistic
    /// members add `N(0, diag(e^{lv}))` noise when `sample_noise` is set.
    pub fn predict_batch(
        &self,
        states: &Matrix,
        actions: &[f64],
        rng: &mut Rng,
        sample_noise: bool,
    ) -> Result<Matrix> {
        let x = crate::value::critic_input(states, actions)?;
        let n = x.rows();
        let d = self.state_dim();
        let picks: Vec<usize> = (0..n)
            .map(|_| if self.k() > 1 { rng.index(self.k()) } else { 0 })
            .collect();
        let mut out = Matrix::zeros(n, d);
        let mut logvar = Matrix::zeros(n, d);
        for m in 0..self.k() {
            let rows: Vec<usize> = (0..n).filter(|&i| picks[i] == m).collect();
            if rows.is_empty() {
                continue;
            }
            let sub = Matrix::from_rows(&rows.iter().map(|&i| x.row(i)).collect::<Vec<_>>())?;
            let (mean, lv) = self.member_forward(m, &sub)?;
            for (k, &i) in rows.iter().enumerate() {
                out.row_mut(i).copy_from_slice(mean.row(k));
                if let Some(lv) = &lv {
                    logvar.row_mut(i).copy_from_slice(lv.row(k));
                }
            }
        }
        if sample_noise && self.variant == ModelVariant::Probabilistic {
            // Noise is drawn in row order after all member picks.
            for i in 0..n {
                for j in 0..d {
                    let z = rng.normal();
                    out.set(i, j, out.get(i, j) + (0.5 * logvar.get(i, j)).exp() * z);
                }
            }
        }
        Ok(out)
    }

    /// Average of the member means.
    pub fn mean_batch(&self, states: &Matrix, actions: &[f64]) -> Result<Matrix> {
        let x = crate::value::critic_input(states, actions)?;
        let mut acc = Matrix::zeros(x.rows(), self.state_dim());
        for m in 0..self.k() {
            let (mean, _) = self.member_forward(m, &x)?;
            for (a, b) in acc.as_mut_slice().iter_mut().zip(mean.as_slice()) {
                *a += b;
            }
        }
        acc.scale(1.0 / self.k() as f64);
        Ok(acc)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new("dynamics", self.members.clone()).with_extra(serde_json::json!({
            "variant": self.variant,
            "k": self.k(),
            "residual": self.residual,
            "logvar_min": self.logvar_min,
            "logvar_max": self.logvar_max,
        }))
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let bad = |d: &str| Error::Format {
            what: "dynamics checkpoint",
            detail: d.to_string(),
        };
        if ck.kind != "dynamics" {
            return Err(bad("kind is not `dynamics`"));
        }
        let variant: ModelVariant = serde_json::from_value(ck.extra["variant"].clone())?;
        let k = ck.extra["k"].as_u64().ok_or_else(|| bad("missing k"))? as usize;
        if k != ck.nets.len() || k == 0 {
            return Err(bad("member count disagrees with k"));
        }
        Ok(DynamicsModel {
            variant,
            members: ck.nets,
            residual: ck.extra["residual"].as_bool().ok_or_else(|| bad("missing residual"))?,
            logvar_min: ck.extra["logvar_min"].as_f64().unwrap_or(LOGVAR_MIN),
            logvar_max: ck.extra["logvar_max"].as_f64().unwrap_or(LOGVAR_MAX),
        })
    }
}

/// A source of next-state proposals for batches of `(s, a)`.
pub trait NextStateModel {
    /// One next state per row; `sample` enables the model's own noise.
    fn next_states(&self, states: &Matrix, actions: &[f64], rng: &mut Rng, sample: bool) -> Result<Matrix>;
}

impl NextStateModel for DynamicsModel {
    fn next_states(&self, states: &Matrix, actions: &[f64], rng: &mut Rng, sample: bool) -> Result<Matrix> {
        self.predict_batch(states, actions, rng, sample)
    }
}

/// The true dynamics as a model: one integration step, no noise.
impl NextStateModel for CartPole {
    fn next_states(&self, states: &Matrix, actions: &[f64], _rng: &mut Rng, _sample: bool) -> Result<Matrix> {
        if actions.len() != states.rows() || states.cols() != STATE_DIM {
            return Err(Error::ShapeMismatch("oracle model batch".into()));
        }
        let mut out = Matrix::zeros(states.rows(), STATE_DIM);
        for (i, (s, &a)) in states.iter_rows().zip(actions).enumerate() {
            let next = self.integrate(&PendulumState::from_slice(s), a, self.dt);
            out.row_mut(i).copy_from_slice(&next.to_array());
        }
        Ok(out)
    }
}

fn model_input(s: &[f64], a: f64) -> Result<Matrix> {
    let mut v = s.to_vec();
    v.push(a);
    Matrix::from_vec(1, v.len(), v)
}

/// One next-state sample for `(s, a)`.
pub fn predict_next(model: &DynamicsModel, s: &[f64], a: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    let states = Matrix::from_vec(1, s.len(), s.to_vec())?;
    Ok(model.predict_batch(&states, &[a], rng, true)?.into_vec())
}

/// Noise-free prediction: the average of the member means.
pub fn mean_prediction(model: &DynamicsModel, s: &[f64], a: f64) -> Result<Vec<f64>> {
    let states = Matrix::from_vec(1, s.len(), s.to_vec())?;
    Ok(model.mean_batch(&states, &[a])?.into_vec())
}

/// `mean_i ‖s′_i - ŝ′_i‖²` with `ŝ′` from [`predict_next`], averaged over
/// `draws` samples per record.
pub fn model_mse<M: NextStateModel + ?Sized>(
    model: &M,
    data: &TransitionDataset,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    data.require_non_empty()?;
    let draws = draws.max(1);
    let (x, y) = inputs_of(data.iter());
    let states = x.columns(0, STATE_DIM);
    let actions = x.column(STATE_DIM);
    let mut rng = Rng::new(seed);
    let mut total = 0.0;
    for _ in 0..draws {
        let pred = model.next_states(&states, &actions, &mut rng, true)?;
        total += pred
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>();
    }
    Ok(total / (draws * data.len()) as f64)
}

fn split_holdout(data: &TransitionDataset, cfg: &ModelTrainConfig) -> (Vec<Transition>, Vec<Transition>) {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    Rng::derived(cfg.seed, 0xB01D).shuffle(&mut idx);
    let n_hold = ((data.len() as f64) * cfg.holdout_fraction).floor() as usize;
    let n_hold = n_hold.min(data.len().saturating_sub(1));
    let hold = idx[..n_hold].iter().map(|&i| data.transitions[i]).collect();
    let train = idx[n_hold..].iter().map(|&i| data.transitions[i]).collect();
    (train, hold)
}

/// Gradient of the per-batch loss with respect to raw member outputs.
fn batch_loss_grad(
    variant: ModelVariant,
    loss: FitLoss,
    residual: bool,
    bounds: (f64, f64),
    x: &Matrix,
    raw: &Matrix,
    y: &Matrix,
) -> (f64, Matrix) {
    let n = x.rows();
    let d = y.cols();
    let mut grad = Matrix::zeros(n, raw.cols());
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let mean = |j: usize| raw.get(i, j) + if residual { x.get(i, j) } else { 0.0 };
        match variant {
            ModelVariant::Deterministic => {
                let r: Vec<f64> = (0..d).map(|j| mean(j) - y.get(i, j)).collect();
                let sq: f64 = r.iter().map(|v| v * v).sum();
                match loss {
                    FitLoss::SquaredL2 => {
                        total += sq;
                        for j in 0..d {
                            grad.set(i, j, 2.0 * r[j] * inv_n);
                        }
                    }
                    FitLoss::L2 => {
                        let norm = sq.sqrt();
                        total += norm;
                        if norm > 0.0 {
                            for j in 0..d {
                                grad.set(i, j, r[j] / norm * inv_n);
                            }
                        }
                    }
                }
            }
            ModelVariant::Probabilistic => {
                for j in 0..d {
                    let r = mean(j) - y.get(i, j);
                    let (lv, dlv) = clamp_logvar(raw.get(i, d + j), bounds.0, bounds.1);
                    let inv_var = (-lv).exp();
                    total += r * r * inv_var + lv;
                    grad.set(i, j, 2.0 * r * inv_var * inv_n);
                    grad.set(i, d + j, (1.0 - r * r * inv_var) * dlv * inv_n);
                }
            }
        }
    }
    (total * inv_n, grad)
}

/// Mean training loss and gradient of one member over `(x, y)`; exposed for
/// gradient checks.
pub fn member_loss_grad(
    model: &DynamicsModel,
    member: usize,
    x: &Matrix,
    y: &Matrix,
    loss: FitLoss,
) -> Result<(f64, crate::diffcore::Gradients)> {
    let net = &model.members[member];
    let tape = net.forward_tape(x)?;
    let (value, d_out) = batch_loss_grad(
        model.variant,
        loss,
        model.residual,
        (model.logvar_min, model.logvar_max),
        x,
        tape.output(),
        y,
    );
    if !value.is_finite() {
        return Err(Error::non_finite("model loss"));
    }
    let (g, _) = net.backward(&tape, &d_out)?;
    Ok((value, g))
}

fn train_member(
    train: &[Transition],
    cfg: &ModelTrainConfig,
    variant: ModelVariant,
    member_seed: u64,
) -> Result<(MlpParams, Vec<f64>)> {
    let d = STATE_DIM;
    let out_dim = match variant {
        ModelVariant::Deterministic => d,
        ModelVariant::Probabilistic => 2 * d,
    };
    let mut sizes = vec![d + ACTION_DIM];
    sizes.extend(&cfg.hidden);
    sizes.push(out_dim);
    let net = mlp_init(&sizes, cfg.activation, member_seed)?;
    let mut model = DynamicsModel {
        variant,
        members: vec![net],
        residual: cfg.residual,
        logvar_min: LOGVAR_MIN,
        logvar_max: LOGVAR_MAX,
    };
    let mut adam = AdamState::new(&model.members[0], AdamConfig::with_lr(cfg.lr));
    let mut rng = Rng::derived(member_seed, 1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = inputs_of(chunk.iter().map(|&i| &train[i]));
            let (loss, g) = member_loss_grad(&model, 0, &x, &y, cfg.loss).map_err(|e| {
                Error::non_finite(format!("model training epoch {epoch}: {e}"))
            })?;
            adam.step(&mut model.members[0], &g)?;
            sum += loss * chunk.len() as f64;
            count += chunk.len();
        }
        epoch_losses.push(sum / count as f64);
    }
    Ok((model.members.pop().expect("one member"), epoch_losses))
}

/// Train one member per seed on the same data (shared holdout split).
pub fn train_members(
    data: &TransitionDataset,
    cfg: &ModelTrainConfig,
    variant: ModelVariant,
    seeds: &[u64],
) -> Result<(DynamicsModel, TrainReport)> {
    data.require_non_empty()?;
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("need at least one member".into()));
    }
    let (train, hold) = split_holdout(data, cfg);
    let mut members = Vec::with_capacity(seeds.len());
    let mut epoch_losses = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (net, losses) = train_member(&train, cfg, variant, seed)?;
        members.push(net);
        epoch_losses.push(losses);
    }
    let model = DynamicsModel {
        variant,
        members,
        residual: cfg.residual,
        logvar_min: LOGVAR_MIN,
        logvar_max: LOGVAR_MAX,
    };
    let holdout_mse = if hold.is_empty() {
        None
    } else {
        let (x, y) = inputs_of(hold.iter());
        let pred = model.mean_batch(&x.columns(0, STATE_DIM), &x.column(STATE_DIM))?;
        let se: f64 = pred
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Some(se / hold.len() as f64)
    };
    Ok((
        model,
        TrainReport {
            epoch_losses,
            holdout_mse,
        },
    ))
}

pub fn train_deterministic(
    data: &TransitionDataset,
    cfg: &ModelTrainConfig,
) -> Result<(DynamicsModel, TrainReport)> {
    train_members(data, cfg, ModelVariant::Deterministic, &[cfg.seed])
}

pub fn train_probabilistic(
    data: &TransitionDataset,
    cfg: &ModelTrainConfig,
) -> Result<(DynamicsModel, TrainReport)> {
    train_members(data, cfg, ModelVariant::Probabilistic, &[cfg.seed])
}

/// `k ≥ 2` members with seeds `mix(cfg.seed, i)`.
pub fn train_ensemble(
    data: &TransitionDataset,
    cfg: &ModelTrainConfig,
    k: usize,
    variant: ModelVariant,
) -> Result<(DynamicsModel, TrainReport)> {
    if k < 2 {
        return Err(Error::Config("an ensemble needs k >= 2".into()));
    }
    let seeds: Vec<u64> = (0..k as u64).map(|i| mix(cfg.seed, i)).collect();
    train_members(data, cfg, variant, &seeds)
}

/// Least-squares reward regressor `r̂(s, a)`.
pub fn train_reward_model(data: &TransitionDataset, cfg: &ModelTrainConfig) -> Result<MlpParams> {
    data.require_non_empty()?;
    cfg.validate()?;
    let mut sizes = vec![STATE_DIM + ACTION_DIM];
    sizes.extend(&cfg.hidden);
    sizes.push(1);
    let mut net = mlp_init(&sizes, cfg.activation, mix(cfg.seed, 0x5EED))?;
    let mut adam = AdamState::new(&net, AdamConfig::with_lr(cfg.lr));
    let mut rng = Rng::derived(cfg.seed, 0x5EED);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, _) = inputs_of(chunk.iter().map(|&i| &data.transitions[i]));
            let r: Vec<f64> = chunk.iter().map(|&i| data.transitions[i].reward).collect();
            let n = chunk.len() as f64;
            let (_, g) = crate::diffcore::grad(&net, &x, |out| {
                let mut d = Matrix::zeros(out.rows(), 1);
                let mut l = 0.0;
                for i in 0..out.rows() {
                    let e = out.get(i, 0) - r[i];
                    l += e * e / n;
                    d.set(i, 0, 2.0 * e / n);
                }
                (l, d)
            })?;
            adam.step(&mut net, &g)?;
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Dense;
    use crate::env::PendulumState;
    use proptest::prelude::{prop_assert, proptest};

    fn synthetic(n: usize, seed: u64, f: impl Fn(&[f64], f64) -> [f64; 4]) -> TransitionDataset {
        let mut rng = Rng::new(seed);
        let transitions = (0..n)
            .map(|_| {
                let s: Vec<f64> = (0..4).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
                let a = rng.uniform_in(-1.0, 1.0);
                Transition {
                    state: PendulumState::from_slice(&s),
                    action: a,
                    next_state: PendulumState::from_slice(&f(&s, a)),
                    reward: 1.0,
                    done: false,
                }
            })
            .collect();
        TransitionDataset {
            transitions,
            seed,
            behavior: "synthetic".into(),
        }
    }

    const A: [[f64; 4]; 4] = [
        [1.0, 0.02, 0.0, 0.0],
        [0.0, 0.9, -0.3, 0.1],
        [0.05, 0.0, 1.1, 0.02],
        [0.0, -0.2, 0.4, 0.8],
    ];
    const B: [f64; 4] = [0.0, 0.2, -0.1, 0.5];

    fn linear_step(s: &[f64], a: f64) -> [f64; 4] {
        let mut out = [0.0; 4];
        for i in 0..4 {
            out[i] = (0..4).map(|j| A[i][j] * s[j]).sum::<f64>() + B[i] * a;
        }
        out
    }

    fn linear_member(weight: Vec<f64>, out: usize) -> MlpParams {
        MlpParams::from_layers(
            vec![Dense {
                weight: Matrix::from_vec(out, 5, weight).unwrap(),
                bias: vec![0.0; out],
            }],
            Activation::Relu,
            0,
        )
        .unwrap()
    }

    #[test]
    fn nll_of_exact_mean_and_unit_variance_is_zero() {
        assert_eq!(gaussian_nll(&[0.3, -1.0], &[0.0, 0.0], &[0.3, -1.0]), 0.0);
    }

    #[test]
    fn nll_hand_computed_2d() {
        let mean = [1.0, -0.5];
        let lv = [0.5, -1.0];
        let y = [0.4, 0.0];
        // (0.6)² e^{-0.5} + 0.5 + (0.5)² e^{1} - 1
        let expect = 0.36 * (-0.5f64).exp() + 0.5 + 0.25 * 1f64.exp() - 1.0;
        assert!((gaussian_nll(&mean, &lv, &y) - expect).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn logvar_clamp_in_bounds_and_nll_finite(raw in -1e6f64..1e6, r in -1e3f64..1e3) {
            let (lv, d) = clamp_logvar(raw, LOGVAR_MIN, LOGVAR_MAX);
            prop_assert!((LOGVAR_MIN..=LOGVAR_MAX).contains(&lv));
            prop_assert!(d.is_finite() && d >= 0.0);
            prop_assert!(gaussian_nll(&[r], &[lv], &[0.0]).is_finite());
        }
    }

    #[test]
    fn identity_targets_are_learned() {
        let data = synthetic(400, 1, |s, _| [s[0], s[1], s[2], s[3]]);
        let cfg = ModelTrainConfig {
            epochs: 300,
            batch_size: 32,
            lr: 1e-2,
            hidden: vec![32],
            residual: false,
            holdout_fraction: 0.2,
            ..Default::default()
        };
        let (_, report) = train_deterministic(&data, &cfg).unwrap();
        assert!(report.holdout_mse.unwrap() < 1e-3, "{:?}", report.holdout_mse);
    }

    #[test]
    fn single_sample_is_memorised() {
        let data = synthetic(1, 2, |s, a| [s[1], a, -s[0], 0.3]);
        let cfg = ModelTrainConfig {
            epochs: 800,
            batch_size: 1,
            lr: 1e-2,
            hidden: vec![16],
            holdout_fraction: 0.0,
            ..Default::default()
        };
        let (model, report) = train_deterministic(&data, &cfg).unwrap();
        assert!(report.holdout_mse.is_none());
        let t = data.transitions[0];
        let pred = mean_prediction(&model, &t.state.to_array(), t.action).unwrap();
        let err: f64 = pred.iter().zip(t.next_state.to_array()).map(|(p, y)| (p - y).powi(2)).sum();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_dynamics_recover_least_squares_solution() {
        let data = synthetic(512, 3, linear_step);
        // Least-squares oracle on [s, a, 1] via normal equations.
        let n = data.len();
        let mut xm = nalgebra::DMatrix::<f64>::zeros(n, 6);
        let mut ym = nalgebra::DMatrix::<f64>::zeros(n, 4);
        for (i, t) in data.iter().enumerate() {
            let s = t.state.to_array();
            for j in 0..4 {
                xm[(i, j)] = s[j];
                ym[(i, j)] = t.next_state.to_array()[j];
            }
            xm[(i, 4)] = t.action;
            xm[(i, 5)] = 1.0;
        }
        let xtx = xm.transpose() * &xm;
        let coef = xtx.lu().solve(&(xm.transpose() * &ym)).unwrap();

        let cfg = ModelTrainConfig {
            epochs: 400,
            batch_size: 64,
            lr: 1e-2,
            hidden: vec![],
            residual: false,
            holdout_fraction: 0.0,
            ..Default::default()
        };
        let (model, report) = train_deterministic(&data, &cfg).unwrap();
        let layer = &model.members[0].layers()[0];
        for i in 0..4 {
            for j in 0..5 {
                assert!((layer.weight.get(i, j) - coef[(j, i)]).abs() < 1e-2);
            }
            assert!((layer.bias[i] - coef[(5, i)]).abs() < 1e-2);
        }
        // Loss trends down: later epochs have a lower median.
        let l = &report.epoch_losses[0];
        let median = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        assert!(median(&l[l.len() / 2..]) <= median(&l[..l.len() / 2]));
    }

    #[test]
    fn beats_mean_predictor_on_linear_data() {
        let data = synthetic(2000, 4, linear_step);
        let cfg = ModelTrainConfig {
            epochs: 40,
            hidden: vec![32, 32],
            residual: false,
            holdout_fraction: 0.2,
            ..Default::default()
        };
        let (_, report) = train_deterministic(&data, &cfg).unwrap();
        let (_, hold) = split_holdout(&data, &cfg);
        let (train, _) = split_holdout(&data, &cfg);
        let mut mean = [0.0; 4];
        for t in &train {
            for j in 0..4 {
                mean[j] += t.next_state.to_array()[j] / train.len() as f64;
            }
        }
        let baseline: f64 = hold
            .iter()
            .map(|t| {
                t.next_state
                    .to_array()
                    .iter()
                    .zip(mean)
                    .map(|(y, m)| (y - m).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / hold.len() as f64;
        assert!(report.holdout_mse.unwrap() * 10.0 <= baseline);
    }

    #[test]
    fn ensemble_seeds_control_member_identity() {
        let data = synthetic(200, 5, linear_step);
        let cfg = ModelTrainConfig {
            epochs: 3,
            hidden: vec![8],
            ..Default::default()
        };
        let (same, _) = train_members(&data, &cfg, ModelVariant::Deterministic, &[7, 7]).unwrap();
        assert_eq!(same.members[0], same.members[1]);
        let (diff, _) = train_ensemble(&data, &cfg, 2, ModelVariant::Deterministic).unwrap();
        let probe = [0.3, -0.2, 0.1, 0.5];
        let a = diff.member_gaussian(0, &probe, 0.2).unwrap().0;
        let b = diff.member_gaussian(1, &probe, 0.2).unwrap().0;
        assert_ne!(a, b);
        assert!(train_ensemble(&data, &cfg, 1, ModelVariant::Deterministic).is_err());
    }

    #[test]
    fn ensemble_of_seven_probabilistic_members() {
        let data = synthetic(100, 6, linear_step);
        let cfg = ModelTrainConfig {
            epochs: 1,
            hidden: vec![8],
            ..Default::default()
        };
        let (m, r) = train_ensemble(&data, &cfg, 7, ModelVariant::Probabilistic).unwrap();
        assert_eq!(m.k(), 7);
        assert_eq!(r.epoch_losses.len(), 7);
        assert_eq!(m.members[0].output_dim(), 8);
    }

    #[test]
    fn single_deterministic_prediction_is_forward() {
        let net = linear_member((0..20).map(|i| i as f64 * 0.1 - 1.0).collect(), 4);
        let model = DynamicsModel {
            variant: ModelVariant::Deterministic,
            members: vec![net.clone()],
            residual: false,
            logvar_min: LOGVAR_MIN,
            logvar_max: LOGVAR_MAX,
        };
        let s = [0.1, 0.2, 0.3, 0.4];
        let expect = net.forward(&[0.1, 0.2, 0.3, 0.4, -0.5]).unwrap();
        assert_eq!(predict_next(&model, &s, -0.5, &mut Rng::new(1)).unwrap(), expect);
        assert_eq!(predict_next(&model, &s, -0.5, &mut Rng::new(2)).unwrap(), expect);
        assert_eq!(mean_prediction(&model, &s, -0.5).unwrap(), expect);
    }

    #[test]
    fn tiny_variance_sample_sits_on_mean() {
        let mut w = vec![0.0; 40];
        for i in 0..4 {
            w[i * 5 + i] = 1.0;
        }
        let mut net = linear_member(w, 8);
        for j in 4..8 {
            net.layers_mut()[0].bias[j] = -1e3; // log-variance pinned at the lower bound
        }
        let model = DynamicsModel {
            variant: ModelVariant::Probabilistic,
            members: vec![net],
            residual: false,
            logvar_min: LOGVAR_MIN,
            logvar_max: LOGVAR_MAX,
        };
        let s = [0.5, -0.5, 0.1, 0.0];
        let (_, lv) = model.member_gaussian(0, &s, 0.0).unwrap();
        assert!(lv.unwrap().iter().all(|&v| (v - LOGVAR_MIN).abs() < 1e-9));
        let sigma = (0.5 * LOGVAR_MIN).exp();
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let x = predict_next(&model, &s, 0.0, &mut rng).unwrap();
            for (a, b) in x.iter().zip(s) {
                assert!((a - b).abs() < 5.0 * sigma);
            }
        }
    }

    #[test]
    fn mean_prediction_averages_members() {
        let m1 = linear_member(vec![1.0; 20], 4);
        let m2 = linear_member(vec![-0.5; 20], 4);
        let model = DynamicsModel {
            variant: ModelVariant::Deterministic,
            members: vec![m1.clone(), m2.clone()],
            residual: false,
            logvar_min: LOGVAR_MIN,
            logvar_max: LOGVAR_MAX,
        };
        let x = [0.1, 0.2, 0.3, 0.4, 0.5];
        let a = m1.forward(&x).unwrap();
        let b = m2.forward(&x).unwrap();
        let m = mean_prediction(&model, &x[..4], 0.5).unwrap();
        for j in 0..4 {
            assert!((m[j] - (a[j] + b[j]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn monte_carlo_samples_average_to_mean() {
        // Two probabilistic members with unit-scale variance.
        let mk = |scale: f64, lv: f64| {
            let mut net = linear_member((0..40).map(|i| scale * ((i % 7) as f64 - 3.0) * 0.1).collect(), 8);
            for j in 0..4 {
                for c in 0..5 {
                    net.layers_mut()[0].weight.set(4 + j, c, 0.0);
                }
                net.layers_mut()[0].bias[4 + j] = lv;
            }
            net
        };
        let model = DynamicsModel {
            variant: ModelVariant::Probabilistic,
            members: vec![mk(1.0, -1.0), mk(-2.0, -2.0)],
            residual: true,
            logvar_min: LOGVAR_MIN,
            logvar_max: LOGVAR_MAX,
        };
        let s = [0.2, -0.1, 0.05, 0.3];
        let a = 0.4;
        let mean = mean_prediction(&model, &s, a).unwrap();
        let n = 100_000;
        let mut rng = Rng::new(8);
        let mut sum = [0.0; 4];
        let mut sum_sq = [0.0; 4];
        for _ in 0..n {
            let x = predict_next(&model, &s, a, &mut rng).unwrap();
            for j in 0..4 {
                sum[j] += x[j];
                sum_sq[j] += x[j] * x[j];
            }
        }
        for j in 0..4 {
            let m = sum[j] / n as f64;
            let var = sum_sq[j] / n as f64 - m * m;
            assert!((m - mean[j]).abs() < 3.0 * (var / n as f64).sqrt(), "dim {j}");
        }
    }

    #[test]
    fn model_mse_oracles() {
        let data = synthetic(300, 9, linear_step);
        let mut w = Vec::new();
        for i in 0..4 {
            w.extend_from_slice(&A[i]);
            w.push(B[i]);
        }
        let exact = DynamicsModel {
            variant: ModelVariant::Deterministic,
            members: vec![linear_member(w, 4)],
            residual: false,
            logvar_min: LOGVAR_MIN,
            logvar_max: LOGVAR_MAX,
        };
        assert!(model_mse(&exact, &data, 1, 0).unwrap() < 1e-28);

        let zero = DynamicsModel {
            members: vec![linear_member(vec![0.0; 20], 4)],
            ..exact.clone()
        };
        let mse = model_mse(&zero, &data, 3, 0).unwrap();
        let direct = data
            .iter()
            .map(|t| t.next_state.to_array().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / data.len() as f64;
        assert!((mse - direct).abs() < 1e-12);
        assert!(model_mse(&zero, &TransitionDataset::default(), 1, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = synthetic(50, 10, linear_step);
        let cfg = ModelTrainConfig {
            epochs: 1,
            hidden: vec![4],
            ..Default::default()
        };
        let (m, _) = train_ensemble(&data, &cfg, 3, ModelVariant::Probabilistic).unwrap();
        let bytes = m.to_checkpoint().to_bytes();
        let back = DynamicsModel::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn reward_model_fits_constant_reward() {
        let data = synthetic(200, 11, linear_step);
        let cfg = ModelTrainConfig {
            epochs: 200,
            hidden: vec![8],
            lr: 1e-2,
            ..Default::default()
        };
        let r = train_reward_model(&data, &cfg).unwrap();
        let out = r.forward(&[0.1, 0.2, -0.3, 0.0, 0.5]).unwrap()[0];
        assert!((out - 1.0).abs() < 0.05, "{out}");
    }
}
