//! Lipschitz control for the critic.
//!
//! - Spectral normalization: one power-iteration step per layer refreshes a
//!   spectral-norm estimate `σ̂`, and the layer is rescaled by
//!   `1 / max(1, σ̂ / β)`, i.e. clipped to `β` when larger.
//! - Robust regularization: penalise `(Q(s̃, π(·)) - Q(s, a))²` at an
//!   adversarial `s̃` inside the `ε`-ball around `s`, found by FGSM (one
//!   signed-gradient step from a Gaussian start) or PGD.
//! - Uniform noise: same penalty with `s̃` drawn uniformly from the box.

use serde::{Deserialize, Serialize};

use crate::diffcore::{norm2, Gradients, Matrix, MlpParams};
use crate::rng::Rng;
use crate::value::{critic_input, ActionSource, ActorCritic};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    None,
    Spectral,
    Robust,
    UniformNoise,
}

impl std::str::FromStr for Mechanism {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Mechanism::None),
            "spectral" => Ok(Mechanism::Spectral),
            "robust" => Ok(Mechanism::Robust),
            "uniform_noise" => Ok(Mechanism::UniformNoise),
            other => Err(Error::Config(format!("unknown mechanism `{other}`"))),
        }
    }
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::None => "none",
            Mechanism::Spectral => "spectral",
            Mechanism::Robust => "robust",
            Mechanism::UniformNoise => "uniform_noise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormOrder {
    LInf,
    L2,
}

impl std::str::FromStr for NormOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l_inf" | "linf" | "inf" => Ok(NormOrder::LInf),
            "l_2" | "l2" | "2" => Ok(NormOrder::L2),
            other => Err(Error::Config(format!("unknown norm order `{other}`"))),
        }
    }
}

impl NormOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            NormOrder::LInf => "l_inf",
            NormOrder::L2 => "l_2",
        }
    }
}

/// Which state the policy sees inside a robust-penalty term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyInput {
    /// `π(s′)`, the recorded next state.
    NextState,
    /// `π(s̃)`, the perturbed state.
    Perturbed,
}

impl std::str::FromStr for PolicyInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "next_state" => Ok(PolicyInput::NextState),
            "perturbed" => Ok(PolicyInput::Perturbed),
            other => Err(Error::Config(format!("unknown policy input `{other}`"))),
        }
    }
}

impl PolicyInput {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyInput::NextState => "next_state",
            PolicyInput::Perturbed => "perturbed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub mechanism: Mechanism,
    /// Per-layer spectral-norm cap.
    pub beta: f64,
    /// Perturbation radius.
    pub epsilon: f64,
    /// Weight of the robust penalty.
    pub lambda: f64,
    pub norm_order: NormOrder,
    /// 1 = FGSM.
    pub pgd_steps: usize,
    /// Policy input in the penalty term.
    pub loss_policy: PolicyInput,
    /// Policy input in the objective the perturbation ascends.
    pub search_policy: PolicyInput,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            mechanism: Mechanism::None,
            beta: 1.0e6,
            epsilon: 0.1,
            lambda: 0.1,
            norm_order: NormOrder::LInf,
            pgd_steps: 1,
            loss_policy: PolicyInput::NextState,
            search_policy: PolicyInput::Perturbed,
        }
    }
}

impl RegularizerConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn spectral(beta: f64) -> Self {
        RegularizerConfig {
            mechanism: Mechanism::Spectral,
            beta,
            ..Self::default()
        }
    }

    pub fn robust(epsilon: f64, lambda: f64) -> Self {
        RegularizerConfig {
            mechanism: Mechanism::Robust,
            epsilon,
            lambda,
            ..Self::default()
        }
    }

    pub fn uniform_noise(epsilon: f64, lambda: f64) -> Self {
        RegularizerConfig {
            mechanism: Mechanism::UniformNoise,
            epsilon,
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.epsilon >= 0.0) {
            return fail("epsilon must be >= 0");
        }
        if !(self.lambda >= 0.0) {
            return fail("lambda must be >= 0");
        }
        if !(self.beta > 0.0) {
            return fail("beta must be > 0");
        }
        if self.pgd_steps == 0 {
            return fail("pgd_steps must be >= 1");
        }
        Ok(())
    }

    /// The penalty contributes to the critic loss.
    pub fn has_penalty(&self) -> bool {
        matches!(self.mechanism, Mechanism::Robust | Mechanism::UniformNoise) && self.lambda > 0.0
    }
}

// ---------------------------------------------------------------------------
// Spectral normalization

#[derive(Debug, Clone, PartialEq)]
pub struct PowerStep {
    pub sigma: f64,
    /// Right singular vector estimate (input side), unit norm.
    pub u: Vec<f64>,
    /// Left singular vector estimate (output side), unit norm.
    pub v: Vec<f64>,
}

/// One power-iteration step:
/// `v ← W u, α = ‖v‖, v ← v/α; u ← Wᵀ v, ρ = ‖u‖, u ← u/ρ; σ̂ = max(α, ρ)`.
///
/// `u` is normalised first. If `W` is all zeros the result is `σ̂ = 0` with
/// `u` unchanged and `v = 0`. If `u` lies in the null space of a nonzero
/// `W`, the iteration restarts from the direction of the largest row.
pub fn power_iteration_step(w: &Matrix, u: &[f64]) -> Result<PowerStep> {
    if u.len() != w.cols() {
        return Err(Error::DimensionMismatch {
            expected: w.cols(),
            got: u.len(),
        });
    }
    let un = norm2(u);
    if !(un > 0.0) || !un.is_finite() {
        return Err(Error::Config("power iteration needs a nonzero finite u".into()));
    }
    let mut u: Vec<f64> = u.iter().map(|x| x / un).collect();
    let mut v = w.matvec(&u);
    let mut alpha = norm2(&v);
    if alpha == 0.0 {
        let Some(row) = w
            .iter_rows()
            .max_by(|a, b| norm2(a).total_cmp(&norm2(b)))
            .filter(|r| norm2(r) > 0.0)
        else {
            return Ok(PowerStep {
                sigma: 0.0,
                u,
                v: vec![0.0; w.rows()],
            });
        };
        let rn = norm2(row);
        u = row.iter().map(|x| x / rn).collect();
        v = w.matvec(&u);
        alpha = norm2(&v);
    }
    v.iter_mut().for_each(|x| *x /= alpha);
    let mut u_next = w.matvec_t(&v);
    let rho = norm2(&u_next);
    u_next.iter_mut().for_each(|x| *x /= rho);
    Ok(PowerStep {
        sigma: alpha.max(rho),
        u: u_next,
        v,
    })
}

/// Persistent right-vector estimates, one per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    pub u: Vec<Vec<f64>>,
}

impl SpectralState {
    /// Random unit start vectors.
    pub fn new(net: &MlpParams, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let u = net
            .layers()
            .iter()
            .map(|l| {
                let mut v: Vec<f64> = (0..l.in_dim()).map(|_| rng.normal()).collect();
                let n = norm2(&v).max(f64::MIN_POSITIVE);
                v.iter_mut().for_each(|x| *x /= n);
                v
            })
            .collect();
        SpectralState { u }
    }
}

/// Refresh `σ̂` with one power step; scale `W` by `β/σ̂` if `σ̂ > β`.
/// Returns `σ̂`. `u` is updated in place.
pub fn spectral_project(w: &mut Matrix, beta: f64, u: &mut Vec<f64>) -> Result<f64> {
    let step = power_iteration_step(w, u)?;
    *u = step.u;
    if step.sigma > beta {
        w.scale(beta / step.sigma);
    }
    Ok(step.sigma)
}

/// [`spectral_project`] on every layer. Returns the per-layer estimates.
pub fn apply_spectral_normalization(
    net: &mut MlpParams,
    beta: f64,
    state: &mut SpectralState,
) -> Result<Vec<f64>> {
    if state.u.len() != net.layers().len() {
        return Err(Error::ShapeMismatch("spectral state does not match network".into()));
    }
    net.layers_mut()
        .iter_mut()
        .zip(&mut state.u)
        .map(|(layer, u)| spectral_project(&mut layer.weight, beta, u))
        .collect()
}

// ---------------------------------------------------------------------------
// Perturbations

fn project_row(x: &mut [f64], center: &[f64], eps: f64, norm: NormOrder) {
    match norm {
        NormOrder::LInf => {
            for (xi, ci) in x.iter_mut().zip(center) {
                *xi = xi.clamp(ci - eps, ci + eps);
            }
        }
        NormOrder::L2 => {
            let d: f64 = x
                .iter()
                .zip(center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if d > eps {
                let s = eps / d;
                for (xi, ci) in x.iter_mut().zip(center) {
                    *xi = ci + (*xi - ci) * s;
                }
            }
        }
    }
}

fn ascent_step(x: &mut [f64], g: &[f64], step: f64, norm: NormOrder) {
    match norm {
        NormOrder::LInf => {
            for (xi, gi) in x.iter_mut().zip(g) {
                // sign(0) = 0
                if *gi > 0.0 {
                    *xi += step;
                } else if *gi < 0.0 {
                    *xi -= step;
                }
            }
        }
        NormOrder::L2 => {
            let n = norm2(g);
            if n > 0.0 {
                for (xi, gi) in x.iter_mut().zip(g) {
                    *xi += step * gi / n;
                }
            }
        }
    }
}

/// A batch of `(s, a, s′)` rows.
#[derive(Debug, Clone, Copy)]
pub struct PerturbBatch<'a> {
    pub states: &'a Matrix,
    pub actions: &'a [f64],
    pub next_states: &'a Matrix,
}

impl PerturbBatch<'_> {
    fn check(&self) -> Result<()> {
        let n = self.states.rows();
        if self.actions.len() != n || self.next_states.rows() != n {
            return Err(Error::ShapeMismatch("perturbation batch rows disagree".into()));
        }
        if self.states.cols() != self.next_states.cols() {
            return Err(Error::ShapeMismatch("state widths disagree".into()));
        }
        Ok(())
    }
}

/// Inner objective `(Q(s̃, π(·)) - Q(s, a))²` per row, with the policy input
/// chosen by `input`.
pub fn inner_objective(
    ac: &ActorCritic<'_>,
    batch: PerturbBatch<'_>,
    perturbed: &Matrix,
    input: PolicyInput,
) -> Result<Vec<f64>> {
    batch.check()?;
    let anchors = ac.q_batch(batch.states, batch.actions)?;
    let actions = match input {
        PolicyInput::Perturbed => ac.actions(perturbed)?,
        PolicyInput::NextState => ac.actions(batch.next_states)?,
    };
    let q = ac.q_batch(perturbed, &actions)?;
    Ok(q.iter()
        .zip(&anchors)
        .map(|(a, b)| (a - b) * (a - b))
        .collect())
}

/// Gaussian start `s₀ ~ N(s, ε²I)` projected into the ball around `s`.
fn gaussian_start(states: &Matrix, eps: f64, norm: NormOrder, rng: &mut Rng) -> Matrix {
    let mut s0 = states.clone();
    for r in 0..s0.rows() {
        let row = s0.row_mut(r);
        for x in row.iter_mut() {
            *x += eps * rng.normal();
        }
        project_row(row, states.row(r), eps, norm);
    }
    s0
}

/// Projected signed-gradient ascent from `start`; every iterate is projected
/// onto the ball of radius `eps` around the clean states.
fn projected_ascent(
    ac: &ActorCritic<'_>,
    batch: PerturbBatch<'_>,
    start: Matrix,
    eps: f64,
    step: f64,
    steps: usize,
    norm: NormOrder,
    input: PolicyInput,
) -> Result<Matrix> {
    let anchors = ac.q_batch(batch.states, batch.actions)?;
    let fixed = match input {
        PolicyInput::NextState => Some(ac.actions(batch.next_states)?),
        PolicyInput::Perturbed => None,
    };
    let mut x = start;
    for _ in 0..steps {
        let source = match &fixed {
            Some(a) => ActionSource::Fixed(a),
            None => ActionSource::PolicyOfInput,
        };
        let (_, g) = ac.squared_change_grad(&x, &anchors, source)?;
        for r in 0..x.rows() {
            let row = x.row_mut(r);
            ascent_step(row, g.row(r), step, norm);
            project_row(row, batch.states.row(r), eps, norm);
        }
    }
    Ok(x)
}

/// FGSM: `s̃ = proj(s₀ + ε·sign(∇ (Q(s̃, π(s̃)) − Q(s, a))² |_{s₀}))` with
/// `s₀ ~ N(s, ε²I)` clipped into the ball, projection onto `B(s, ε)`.
/// Under the `l_2` norm the sign is replaced by the normalised gradient.
pub fn fgsm_perturb(
    ac: &ActorCritic<'_>,
    batch: PerturbBatch<'_>,
    cfg: &RegularizerConfig,
    rng: &mut Rng,
) -> Result<Matrix> {
    pgd_perturb_with_step(ac, batch, cfg, 1, cfg.epsilon, rng)
}

/// PGD: `steps` projected signed-gradient steps of size `ε / steps` from the
/// same Gaussian start as FGSM. `steps = 1` is exactly FGSM.
pub fn pgd_perturb(
    ac: &ActorCritic<'_>,
    batch: PerturbBatch<'_>,
    cfg: &RegularizerConfig,
    steps: usize,
    rng: &mut Rng,
) -> Result<Matrix> {
    if steps == 0 {
        return Err(Error::Config("pgd steps must be >= 1".into()));
    }
    pgd_perturb_with_step(ac, batch, cfg, steps, cfg.epsilon / steps as f64, rng)
}

fn pgd_perturb_with_step(
    ac: &ActorCritic<'_>,
    batch: PerturbBatch<'_>,
    cfg: &RegularizerConfig,
    steps: usize,
    step: f64,
    rng: &mut Rng,
) -> Result<Matrix> {
    batch.check()?;
    let eps = cfg.epsilon;
    if eps == 0.0 {
        return Ok(batch.states.clone());
    }
    let start = gaussian_start(batch.states, eps, cfg.norm_order, rng);
    projected_ascent(
        ac,
        batch,
        start,
        eps,
        step,
        steps,
        cfg.norm_order,
        cfg.search_policy,
    )
}

/// `s̃ = s + U([-ε, ε]^d)` per row.
pub fn uniform_noise_perturb(states: &Matrix, eps: f64, rng: &mut Rng) -> Matrix {
    let mut out = states.clone();
    for x in out.as_mut_slice() {
        *x += rng.uniform_in(-eps, eps);
    }
    out
}

/// The perturbation the configured mechanism uses.
pub fn perturb(
    ac: &ActorCritic<'_>,
    batch: PerturbBatch<'_>,
    cfg: &RegularizerConfig,
    rng: &mut Rng,
) -> Result<Matrix> {
    match cfg.mechanism {
        Mechanism::UniformNoise => Ok(uniform_noise_perturb(batch.states, cfg.epsilon, rng)),
        _ if cfg.pgd_steps > 1 => pgd_perturb(ac, batch, cfg, cfg.pgd_steps, rng),
        _ => fgsm_perturb(ac, batch, cfg, rng),
    }
}

/// Robust penalty `mean_i (Q(s̃_i, π(s′_i)) − Q(s_i, a_i))²` at given
/// perturbed states, with its gradient with respect to the critic. Both
/// critic terms carry gradient; the perturbation and the policy do not.
pub fn robust_loss_at(
    ac: &ActorCritic<'_>,
    batch: PerturbBatch<'_>,
    perturbed: &Matrix,
    input: PolicyInput,
) -> Result<(f64, Gradients)> {
    batch.check()?;
    let n = batch.states.rows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let pert_actions = match input {
        PolicyInput::NextState => ac.actions(batch.next_states)?,
        PolicyInput::Perturbed => ac.actions(perturbed)?,
    };
    let x_pert = critic_input(perturbed, &pert_actions)?;
    let x_clean = critic_input(batch.states, batch.actions)?;
    let tape_pert = ac.q.forward_tape(&x_pert)?;
    let tape_clean = ac.q.forward_tape(&x_clean)?;
    let mut d_pert = Matrix::zeros(n, 1);
    let mut d_clean = Matrix::zeros(n, 1);
    let mut loss = 0.0;
    for i in 0..n {
        let diff = tape_pert.output().get(i, 0) - tape_clean.output().get(i, 0);
        loss += diff * diff;
        d_pert.set(i, 0, 2.0 * diff / n as f64);
        d_clean.set(i, 0, -2.0 * diff / n as f64);
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::non_finite("robust loss"));
    }
    let (mut g, _) = ac.q.backward(&tape_pert, &d_pert)?;
    let (g_clean, _) = ac.q.backward(&tape_clean, &d_clean)?;
    g.add_scaled(1.0, &g_clean);
    Ok((loss, g))
}

/// Robust penalty with the perturbation drawn by the configured solver.
pub fn robust_loss(
    ac: &ActorCritic<'_>,
    batch: PerturbBatch<'_>,
    cfg: &RegularizerConfig,
    rng: &mut Rng,
) -> Result<(f64, Gradients)> {
    let perturbed = perturb(ac, batch, cfg, rng)?;
    robust_loss_at(ac, batch, &perturbed, cfg.loss_policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{mlp_init, Activation, Dense};
    use crate::rng::Rng;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn diag(a: f64, b: f64) -> Matrix {
        Matrix::from_vec(2, 2, vec![a, 0.0, 0.0, b]).unwrap()
    }

    #[test]
    fn identity_has_unit_norm() {
        let s = power_iteration_step(&Matrix::identity(2), &[1.0, 0.0]).unwrap();
        assert_eq!(s.sigma, 1.0);
        assert_eq!(s.u, vec![1.0, 0.0]);
    }

    #[test]
    fn diagonal_converges_to_dominant_value() {
        let w = diag(3.0, 1.0);
        let mut u = vec![1.0 / 2f64.sqrt(); 2];
        let mut sigma = 0.0;
        for _ in 0..50 {
            let s = power_iteration_step(&w, &u).unwrap();
            sigma = s.sigma;
            u = s.u;
        }
        assert!((sigma - 3.0).abs() < 1e-6);
    }

    #[test]
    fn zero_matrix_and_null_space_start() {
        let z = Matrix::zeros(3, 2);
        let s = power_iteration_step(&z, &[0.0, 2.0]).unwrap();
        assert_eq!(s.sigma, 0.0);
        assert_eq!(s.u, vec![0.0, 1.0]);

        // u in the null space of W
        let w = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let s = power_iteration_step(&w, &[0.0, 1.0]).unwrap();
        assert_eq!(s.sigma, 1.0);
        assert!(power_iteration_step(&w, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn projection_scales_by_cap_ratio() {
        let mut w = diag(3.0, 1.0);
        let mut u = vec![1.0, 0.0];
        let sigma = spectral_project(&mut w, 2.0, &mut u).unwrap();
        assert_eq!(sigma, 3.0);
        assert_eq!(w.as_slice(), &[3.0 * (2.0 / 3.0), 0.0, 0.0, 2.0 / 3.0]);

        let mut w = diag(1.5, 1.0);
        let before = w.clone();
        let mut u = vec![1.0, 0.0];
        spectral_project(&mut w, 2.0, &mut u).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn huge_cap_is_identity_and_small_cap_shrinks_all_layers() {
        let mut net = mlp_init(&[4, 8, 8, 1], Activation::Relu, 3).unwrap();
        let before = net.clone();
        let mut st = SpectralState::new(&net, 1);
        apply_spectral_normalization(&mut net, 1e12, &mut st).unwrap();
        assert_eq!(net, before);

        let sig = apply_spectral_normalization(&mut net, 0.1, &mut st).unwrap();
        assert!(sig.iter().all(|&s| s > 0.1));
        for (a, b) in net.layers().iter().zip(before.layers()) {
            let ratio = a.weight.get(0, 0) / b.weight.get(0, 0);
            assert!(ratio < 1.0);
        }
    }

    fn toy_nets(seed: u64) -> (MlpParams, MlpParams) {
        (
            mlp_init(&[5, 16, 16, 1], Activation::Relu, seed).unwrap(),
            mlp_init(&[4, 16, 1], Activation::Tanh, seed + 1000).unwrap(),
        )
    }

    fn toy_batch(n: usize, seed: u64) -> (Matrix, Vec<f64>, Matrix) {
        let mut rng = Rng::new(seed);
        let states = Matrix::from_vec(n, 4, (0..4 * n).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            .unwrap();
        let actions = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let next = Matrix::from_vec(n, 4, (0..4 * n).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            .unwrap();
        (states, actions, next)
    }

    #[test]
    fn zero_radius_returns_clean_state() {
        let (q, p) = toy_nets(1);
        let ac = ActorCritic::new(&q, &p).unwrap();
        let (s, a, n) = toy_batch(6, 2);
        let batch = PerturbBatch {
            states: &s,
            actions: &a,
            next_states: &n,
        };
        let cfg = RegularizerConfig {
            epsilon: 0.0,
            ..RegularizerConfig::robust(0.0, 0.1)
        };
        assert_eq!(fgsm_perturb(&ac, batch, &cfg, &mut Rng::new(0)).unwrap(), s);
        assert_eq!(uniform_noise_perturb(&s, 0.0, &mut Rng::new(0)), s);
    }

    #[test]
    fn fgsm_steps_along_gradient_sign() {
        // Linear critic, constant policy: the inner gradient is
        // 2 (Q(s0) - Q(s, a)) * w_s, so the step direction is its sign.
        let w = vec![0.7, -1.3, 0.2, -0.05, 0.4];
        let q = MlpParams::from_layers(
            vec![Dense {
                weight: Matrix::from_vec(1, 5, w.clone()).unwrap(),
                bias: vec![0.0],
            }],
            Activation::Relu,
            0,
        )
        .unwrap();
        let p = MlpParams::from_layers(
            vec![Dense {
                weight: Matrix::zeros(1, 4),
                bias: vec![0.0],
            }],
            Activation::Tanh,
            0,
        )
        .unwrap();
        let ac = ActorCritic::new(&q, &p).unwrap();
        let s = Matrix::from_vec(1, 4, vec![0.1, 0.2, -0.1, 0.0]).unwrap();
        let a = vec![0.5];
        let batch = PerturbBatch {
            states: &s,
            actions: &a,
            next_states: &s,
        };
        let cfg = RegularizerConfig::robust(0.1, 1.0);
        let mut rng = Rng::new(17);
        let s0 = gaussian_start(&s, 0.1, NormOrder::LInf, &mut rng.clone());
        let out = fgsm_perturb(&ac, batch, &cfg, &mut rng).unwrap();
        let c = ac.q_value(s.row(0), 0.5);
        let diff = ac.q_value(s0.row(0), 0.0) - c;
        for j in 0..4 {
            let dir = (diff * w[j]).signum();
            let expect = (s0.get(0, j) + 0.1 * dir).clamp(s.get(0, j) - 0.1, s.get(0, j) + 0.1);
            assert_eq!(out.get(0, j), expect);
        }
    }

    #[test]
    fn single_step_pgd_is_fgsm() {
        let (q, p) = toy_nets(4);
        let ac = ActorCritic::new(&q, &p).unwrap();
        let (s, a, n) = toy_batch(8, 5);
        let batch = PerturbBatch {
            states: &s,
            actions: &a,
            next_states: &n,
        };
        for norm in [NormOrder::LInf, NormOrder::L2] {
            let cfg = RegularizerConfig {
                norm_order: norm,
                ..RegularizerConfig::robust(0.1, 1.0)
            };
            let f = fgsm_perturb(&ac, batch, &cfg, &mut Rng::new(9)).unwrap();
            let g = pgd_perturb(&ac, batch, &cfg, 1, &mut Rng::new(9)).unwrap();
            assert_eq!(f, g);
        }
    }

    #[test]
    fn uniform_noise_mean_is_zero() {
        let s = Matrix::zeros(1, 4);
        let mut rng = Rng::new(8);
        let n = 100_000;
        let mut sum = [0.0; 4];
        for _ in 0..n {
            let x = uniform_noise_perturb(&s, 0.1, &mut rng);
            for j in 0..4 {
                sum[j] += x.get(0, j);
            }
        }
        let sigma = 0.1 / 3f64.sqrt() / (n as f64).sqrt();
        assert!(sum.iter().all(|t| (t / n as f64).abs() < 3.0 * sigma));
    }

    #[test]
    fn robust_loss_vanishes_for_constant_critic() {
        let (mut q, p) = toy_nets(6);
        for l in q.layers_mut() {
            l.weight.as_mut_slice().iter_mut().for_each(|w| *w = 0.0);
        }
        q.layers_mut()[2].bias[0] = 3.0;
        let ac = ActorCritic::new(&q, &p).unwrap();
        let (s, a, n) = toy_batch(10, 7);
        let batch = PerturbBatch {
            states: &s,
            actions: &a,
            next_states: &n,
        };
        let (loss, g) =
            robust_loss(&ac, batch, &RegularizerConfig::robust(0.1, 1.0), &mut Rng::new(1)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn robust_loss_matches_manual_recomputation() {
        let (q, p) = toy_nets(8);
        let ac = ActorCritic::new(&q, &p).unwrap();
        let (s, a, n) = toy_batch(12, 9);
        let batch = PerturbBatch {
            states: &s,
            actions: &a,
            next_states: &n,
        };
        let cfg = RegularizerConfig::robust(0.1, 1.0);
        let pert = fgsm_perturb(&ac, batch, &cfg, &mut Rng::new(2)).unwrap();
        let (loss, _) = robust_loss_at(&ac, batch, &pert, PolicyInput::NextState).unwrap();
        let mut manual = 0.0;
        for i in 0..12 {
            let a_next = p.forward(n.row(i)).unwrap()[0].tanh();
            let mut xp = pert.row(i).to_vec();
            xp.push(a_next);
            let mut xc = s.row(i).to_vec();
            xc.push(a[i]);
            let d = q.forward(&xp).unwrap()[0] - q.forward(&xc).unwrap()[0];
            manual += d * d;
        }
        manual /= 12.0;
        assert!((loss - manual).abs() <= 1e-12 * manual.max(1.0));
        // Same draw through the public entry point.
        let (again, _) = robust_loss(&ac, batch, &cfg, &mut Rng::new(2)).unwrap();
        assert_eq!(again, loss);
    }

    #[test]
    fn config_validation() {
        assert!(RegularizerConfig::robust(0.1, 0.1).validate().is_ok());
        assert!(RegularizerConfig::robust(-0.1, 0.1).validate().is_err());
        assert!(RegularizerConfig::robust(0.1, -1.0).validate().is_err());
        assert!(RegularizerConfig::spectral(0.0).validate().is_err());
        let mut c = RegularizerConfig::default();
        c.pgd_steps = 0;
        assert!(c.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn perturbations_stay_in_ball(seed in 0u64..1000, eps in 0.0f64..0.5, steps in 1usize..6, l2 in any::<bool>()) {
            let (q, p) = toy_nets(seed);
            let ac = ActorCritic::new(&q, &p).unwrap();
            let (s, a, n) = toy_batch(5, seed + 1);
            let batch = PerturbBatch { states: &s, actions: &a, next_states: &n };
            let cfg = RegularizerConfig {
                norm_order: if l2 { NormOrder::L2 } else { NormOrder::LInf },
                pgd_steps: steps,
                ..RegularizerConfig::robust(eps, 1.0)
            };
            let mut rng = Rng::new(seed);
            for out in [
                fgsm_perturb(&ac, batch, &cfg, &mut rng).unwrap(),
                pgd_perturb(&ac, batch, &cfg, steps, &mut rng).unwrap(),
                uniform_noise_perturb(&s, eps, &mut rng),
            ] {
                for (x, c) in out.as_slice().iter().zip(s.as_slice()) {
                    prop_assert!((x - c).abs() <= eps + 1e-12);
                }
            }
        }

        #[test]
        fn projection_output_norm_is_cap(scale in 1.5f64..50.0, seed in 0u64..200) {
            // Converge u first, then the projected norm equals beta for any
            // input scale above the cap.
            let base = mlp_init(&[6, 5], Activation::Relu, seed).unwrap().layers()[0].weight.clone();
            let mut u = vec![1.0; 6];
            for _ in 0..500 {
                u = power_iteration_step(&base, &u).unwrap().u;
            }
            let top = power_iteration_step(&base, &u).unwrap().sigma;
            let beta = top;
            let mut w = base.clone();
            w.scale(scale);
            let mut uu = u.clone();
            spectral_project(&mut w, beta, &mut uu).unwrap();
            let mut u2 = uu.clone();
            for _ in 0..200 {
                u2 = power_iteration_step(&w, &u2).unwrap().u;
            }
            let after = power_iteration_step(&w, &u2).unwrap().sigma;
            prop_assert!((after - beta).abs() <= 1e-6 * beta);
        }
    }
}
