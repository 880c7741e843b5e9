//! Squashed-Gaussian policy and state-action Q network.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use saq_autodiff::{Activation, Mlp, Tape, Tensor, Var};

use crate::error::{Result, SaqError};
use crate::nets::layer_sizes;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Dataset actions are clamped to this magnitude before `atanh`.
pub const ATANH_CLAMP: f64 = 1.0 - 1e-6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `ln(1 - tanh(u)^2)`, stable for large `|u|`.
pub fn log_tanh_jacobian(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn atanh_clamped(a: f64) -> f64 {
    a.clamp(-ATANH_CLAMP, ATANH_CLAMP).atanh()
}

fn selector(action_dim: usize, offset: usize) -> Tensor {
    let mut data = vec![0.0; 2 * action_dim * action_dim];
    for j in 0..action_dim {
        data[(offset + j) * action_dim + j] = 1.0;
    }
    Tensor::matrix(2 * action_dim, action_dim, data).expect("selector is finite")
}

/// Policy network emitting a pre-squash mean and log-std per action
/// dimension; actions are `tanh` of a Gaussian draw.
#[derive(Clone, Debug, PartialEq)]
pub struct SquashedGaussianPolicy {
    pub net: Mlp,
    action_dim: usize,
}

/// Mean and clamped log-std rows for a batch of states.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub log_std: Tensor,
}

pub(crate) struct GaussianVars {
    pub mean: Var,
    pub log_std: Var,
}

impl SquashedGaussianPolicy {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        Self {
            net: Mlp::new(&layer_sizes(state_dim, hidden, 2 * action_dim), Activation::Relu, rng),
            action_dim,
        }
    }

    pub fn from_net(net: Mlp) -> Result<Self> {
        if !net.output_dim().is_multiple_of(2) || net.output_dim() == 0 {
            return Err(SaqError::format(0, "policy output width must be twice the action dimension"));
        }
        let action_dim = net.output_dim() / 2;
        Ok(Self { net, action_dim })
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn params(&self, states: &Tensor) -> Result<GaussianParams> {
        let out = self.net.predict(states)?;
        let d = self.action_dim;
        let n = out.rows();
        let (mut mean, mut log_std) = (Vec::with_capacity(n * d), Vec::with_capacity(n * d));
        for i in 0..n {
            let row = out.row(i);
            mean.extend_from_slice(&row[..d]);
            log_std.extend(row[d..].iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)));
        }
        Ok(GaussianParams {
            mean: Tensor::matrix(n, d, mean)?,
            log_std: Tensor::matrix(n, d, log_std)?,
        })
    }

    pub(crate) fn forward(&self, tape: &mut Tape, bound: &[Var], states: Var) -> Result<GaussianVars> {
        let out = self.net.forward(tape, bound, states)?;
        let d = self.action_dim;
        let sel_mean = tape.constant(selector(d, 0));
        let sel_std = tape.constant(selector(d, d));
        let mean = tape.matmul(out, sel_mean)?;
        let raw = tape.matmul(out, sel_std)?;
        let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        Ok(GaussianVars { mean, log_std })
    }

    /// Deterministic action `tanh(mean)`.
    pub fn mean_action(&self, states: &Tensor) -> Result<Tensor> {
        Ok(self.params(states)?.mean.map(f64::tanh))
    }

    /// Log-density of squashed actions under the policy at each state.
    pub fn log_prob(&self, states: &Tensor, actions: &Tensor) -> Result<Vec<f64>> {
        let p = self.params(states)?;
        check_actions(actions, states.rows(), self.action_dim)?;
        Ok((0..states.rows())
            .map(|i| squashed_log_density(p.mean.row(i), p.log_std.row(i), actions.row(i)))
            .collect())
    }

    /// Draws `per_state` actions for every state row; output rows are grouped
    /// by state (`per_state` consecutive rows each).
    pub fn sample<R: Rng + ?Sized>(&self, states: &Tensor, per_state: usize, rng: &mut R) -> Result<(Tensor, Vec<f64>)> {
        let p = self.params(states)?;
        let d = self.action_dim;
        let n = states.rows();
        let mut actions = Vec::with_capacity(n * per_state * d);
        let mut logp = Vec::with_capacity(n * per_state);
        for i in 0..n {
            let (mu, ls) = (p.mean.row(i), p.log_std.row(i));
            for _ in 0..per_state {
                let mut lp = 0.0;
                for j in 0..d {
                    let eps: f64 = StandardNormal.sample(rng);
                    let u = mu[j] + ls[j].exp() * eps;
                    lp += -0.5 * eps * eps - ls[j] - HALF_LN_2PI - log_tanh_jacobian(u);
                    actions.push(u.tanh());
                }
                logp.push(lp);
            }
        }
        Ok((Tensor::matrix(n * per_state, d, actions)?, logp))
    }
}

fn check_actions(actions: &Tensor, rows: usize, action_dim: usize) -> Result<()> {
    if actions.shape().len() != 2 || actions.cols() != action_dim {
        return Err(SaqError::Dimension {
            what: "action",
            expected: action_dim,
            got: actions.cols(),
        });
    }
    if actions.rows() != rows {
        return Err(SaqError::Dimension {
            what: "action rows",
            expected: rows,
            got: actions.rows(),
        });
    }
    Ok(())
}

/// Log-density of a squashed action given pre-squash Gaussian parameters.
/// Boundary actions are pulled inside by [`ATANH_CLAMP`].
pub fn squashed_log_density(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    let mut lp = 0.0;
    for ((&mu, &ls), &a) in mean.iter().zip(log_std).zip(action) {
        let u = atanh_clamped(a);
        let z = (u - mu) * (-ls).exp();
        lp += -0.5 * z * z - ls - HALF_LN_2PI - log_tanh_jacobian(u);
    }
    lp
}

/// `Q(s, a)` over the concatenated state and action.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousQ {
    pub net: Mlp,
    state_dim: usize,
}

impl ContinuousQ {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        Self {
            net: Mlp::new(&layer_sizes(state_dim + action_dim, hidden, 1), Activation::Relu, rng),
            state_dim,
        }
    }

    pub fn from_net(net: Mlp, state_dim: usize) -> Result<Self> {
        if net.output_dim() != 1 || net.input_dim() <= state_dim {
            return Err(SaqError::format(0, "Q network shape disagrees with its dimensions"));
        }
        Ok(Self { net, state_dim })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.net.input_dim() - self.state_dim
    }

    pub fn predict(&self, states: &Tensor, actions: &Tensor) -> Result<Vec<f64>> {
        check_actions(actions, states.rows(), self.action_dim())?;
        if states.cols() != self.state_dim {
            return Err(SaqError::Dimension {
                what: "Q state",
                expected: self.state_dim,
                got: states.cols(),
            });
        }
        let d = self.net.input_dim();
        let mut x = Vec::with_capacity(states.rows() * d);
        for i in 0..states.rows() {
            x.extend_from_slice(states.row(i));
            x.extend_from_slice(actions.row(i));
        }
        Ok(self.net.predict(&Tensor::matrix(states.rows(), d, x)?)?.into_data())
    }

    /// Taped `Q` of `[n, state_dim]` and `[n, action_dim]` inputs, as a length-`n` vector.
    pub(crate) fn forward(&self, tape: &mut Tape, bound: &[Var], states: Var, actions: Var) -> Result<Var> {
        let x = tape.concat(states, actions)?;
        let n = tape.shape(x)[0];
        let out = self.net.forward(tape, bound, x)?;
        Ok(tape.reshape(out, vec![n])?)
    }
}

/// Each state row repeated `times` times consecutively.
pub(crate) fn repeat_rows(states: &Tensor, times: usize) -> Tensor {
    let d = states.cols();
    let mut data = Vec::with_capacity(states.len() * times);
    for i in 0..states.rows() {
        for _ in 0..times {
            data.extend_from_slice(states.row(i));
        }
    }
    Tensor::matrix(states.rows() * times, d, data).expect("repeated rows are finite")
}
