//! Critic `Q(s, a)` paired with a tanh-squashed policy `π(s) = tanh(net(s))`.
//!
//! The critic's input is `[s, a]`; the derived state value is
//! `V(s) = Q(s, π(s))`.

use crate::diffcore::{Gradients, Matrix, MlpParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct ActorCritic<'a> {
    pub q: &'a MlpParams,
    pub policy: &'a MlpParams,
}

/// Where the action in a critic term comes from.
#[derive(Debug, Clone, Copy)]
pub enum ActionSource<'a> {
    /// `π` of the state being differentiated.
    PolicyOfInput,
    /// Fixed actions, one per row.
    Fixed(&'a [f64]),
}

impl<'a> ActorCritic<'a> {
    pub fn new(q: &'a MlpParams, policy: &'a MlpParams) -> Result<Self> {
        if q.input_dim() != policy.input_dim() + 1 || q.output_dim() != 1 || policy.output_dim() != 1
        {
            return Err(Error::ShapeMismatch(format!(
                "critic {:?} and policy {:?} are incompatible",
                q.layer_sizes(),
                policy.layer_sizes()
            )));
        }
        Ok(ActorCritic { q, policy })
    }

    pub fn state_dim(&self) -> usize {
        self.policy.input_dim()
    }

    pub fn action(&self, s: &[f64]) -> f64 {
        self.policy.forward_unchecked(s)[0].tanh()
    }

    pub fn q_value(&self, s: &[f64], a: f64) -> f64 {
        let mut x = Vec::with_capacity(s.len() + 1);
        x.extend_from_slice(s);
        x.push(a);
        self.q.forward_unchecked(&x)[0]
    }

    pub fn value(&self, s: &[f64]) -> f64 {
        self.q_value(s, self.action(s))
    }

    pub fn actions(&self, states: &Matrix) -> Result<Vec<f64>> {
        let out = self.policy.forward_batch(states)?;
        Ok(out.as_slice().iter().map(|z| z.tanh()).collect())
    }

    pub fn q_batch(&self, states: &Matrix, actions: &[f64]) -> Result<Vec<f64>> {
        let x = critic_input(states, actions)?;
        Ok(self.q.forward_batch(&x)?.into_vec())
    }

    pub fn values(&self, states: &Matrix) -> Result<Vec<f64>> {
        let a = self.actions(states)?;
        self.q_batch(states, &a)
    }

    /// Per row: `(Q(s̃, a) - c)²` and its gradient with respect to `s̃`,
    /// where `a` is `π(s̃)` or a fixed action.
    pub fn squared_change_grad(
        &self,
        states: &Matrix,
        anchors: &[f64],
        source: ActionSource<'_>,
    ) -> Result<(Vec<f64>, Matrix)> {
        let n = states.rows();
        let d = self.state_dim();
        let (actions, policy_tape) = match source {
            ActionSource::Fixed(a) => (a.to_vec(), None),
            ActionSource::PolicyOfInput => {
                let tape = self.policy.forward_tape(states)?;
                let a: Vec<f64> = tape.output().as_slice().iter().map(|z| z.tanh()).collect();
                (a, Some(tape))
            }
        };
        let x = critic_input(states, &actions)?;
        let q_tape = self.q.forward_tape(&x)?;
        let q = q_tape.output().as_slice();
        let mut objective = Vec::with_capacity(n);
        let mut d_q = Matrix::zeros(n, 1);
        for i in 0..n {
            let diff = q[i] - anchors[i];
            objective.push(diff * diff);
            d_q.set(i, 0, 2.0 * diff);
        }
        let (_, d_x) = self.q.backward(&q_tape, &d_q)?;
        let mut grad = d_x.columns(0, d);
        if let Some(tape) = policy_tape {
            let mut d_logit = Matrix::zeros(n, 1);
            for i in 0..n {
                d_logit.set(i, 0, d_x.get(i, d) * (1.0 - actions[i] * actions[i]));
            }
            let (_, d_s) = self.policy.backward(&tape, &d_logit)?;
            for (g, extra) in grad.as_mut_slice().iter_mut().zip(d_s.as_slice()) {
                *g += extra;
            }
        }
        Ok((objective, grad))
    }

    /// Mean over rows of `Q(s, π(s))` and its gradient with respect to the
    /// policy parameters (critic held fixed).
    pub fn policy_objective_grad(&self, states: &Matrix) -> Result<(f64, Gradients)> {
        let n = states.rows();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let d = self.state_dim();
        let tape = self.policy.forward_tape(states)?;
        let actions: Vec<f64> = tape.output().as_slice().iter().map(|z| z.tanh()).collect();
        let x = critic_input(states, &actions)?;
        let q_tape = self.q.forward_tape(&x)?;
        let objective = q_tape.output().as_slice().iter().sum::<f64>() / n as f64;
        if !objective.is_finite() {
            return Err(Error::non_finite("policy objective"));
        }
        let d_q = Matrix::from_vec(n, 1, vec![1.0 / n as f64; n])?;
        let (_, d_x) = self.q.backward(&q_tape, &d_q)?;
        let mut d_logit = Matrix::zeros(n, 1);
        for i in 0..n {
            d_logit.set(i, 0, d_x.get(i, d) * (1.0 - actions[i] * actions[i]));
        }
        let (grads, _) = self.policy.backward(&tape, &d_logit)?;
        Ok((objective, grads))
    }
}

/// `[states | actions]`
pub fn critic_input(states: &Matrix, actions: &[f64]) -> Result<Matrix> {
    if actions.len() != states.rows() {
        return Err(Error::DimensionMismatch {
            expected: states.rows(),
            got: actions.len(),
        });
    }
    let a = Matrix::from_vec(actions.len(), 1, actions.to_vec())?;
    states.hcat(&a)
}
