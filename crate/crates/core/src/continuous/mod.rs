//! Continuous-action baselines: CQL with a sampled conservatism estimator and
//! unimodal BC, plus a grid-quadrature oracle for the exact penalty over the
//! 2-D action box.

mod nets;

use std::f64::consts::LN_2;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use saq_autodiff::{logsumexp, Mlp, Tape, Tensor, Var};

use crate::container::{Container, ContainerWriter, RAW_GROUP};
use crate::envs::data::{Batch, TransitionDataset};
use crate::error::{Result, SaqError};
use crate::metrics::MetricTrace;
use crate::nets::{mlp_from_group, Normalizer};
use crate::seed::rng_for;

pub use nets::{
    atanh_clamped, log_tanh_jacobian, squashed_log_density, ContinuousQ, GaussianParams, SquashedGaussianPolicy,
    ATANH_CLAMP, LOG_STD_MAX, LOG_STD_MIN,
};
use nets::repeat_rows;

pub const CONTINUOUS_MAGIC: &[u8; 4] = b"SAQC";

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const TAPED_JACOBIAN_EPS: f64 = 1e-6;

/// Log-density of the uniform distribution on `[-1, 1]^action_dim`.
pub fn uniform_log_density(action_dim: usize) -> f64 {
    -(action_dim as f64) * LN_2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContinuousAlgorithm {
    Cql,
    Bc,
}

impl ContinuousAlgorithm {
    pub fn name(self) -> &'static str {
        match self {
            ContinuousAlgorithm::Cql => "cont-cql",
            ContinuousAlgorithm::Bc => "cont-bc",
        }
    }

    fn code(self) -> u32 {
        match self {
            ContinuousAlgorithm::Cql => 0,
            ContinuousAlgorithm::Bc => 1,
        }
    }
}

impl fmt::Display for ContinuousAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ContinuousAlgorithm {
    type Err = SaqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cont-cql" => Ok(ContinuousAlgorithm::Cql),
            "cont-bc" => Ok(ContinuousAlgorithm::Bc),
            other => Err(SaqError::InvalidConfig(format!("unknown continuous algorithm '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousConfig {
    pub algorithm: ContinuousAlgorithm,
    pub alpha: f64,
    pub gamma: f64,
    /// Entropy weight of the actor objective.
    pub alpha_ent: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub target_update_period: usize,
    pub hidden: Vec<usize>,
    /// Policy samples and uniform samples per state in the penalty estimator.
    pub n_samples: usize,
    pub grid_resolution: usize,
    /// Dataset states (evenly spaced) on which logged penalties are measured.
    pub penalty_states: usize,
    pub log_every: usize,
    /// Evaluation every this many steps (0 = only after the last step).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for ContinuousConfig {
    fn default() -> Self {
        Self {
            algorithm: ContinuousAlgorithm::Cql,
            alpha: 1.0,
            gamma: 0.99,
            alpha_ent: 0.1,
            learning_rate: 1e-3,
            batch_size: 64,
            steps: 20_000,
            target_update_period: 200,
            hidden: vec![64, 64],
            n_samples: 10,
            grid_resolution: 32,
            penalty_states: 64,
            log_every: 100,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl ContinuousConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SaqError::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        for (name, v) in [("alpha", self.alpha), ("alpha_ent", self.alpha_ent)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if self.n_samples == 0 {
            return bad("n_samples must be at least 1".into());
        }
        if self.grid_resolution < 16 {
            return bad(format!("grid resolution must be at least 16, got {}", self.grid_resolution));
        }
        if !(self.learning_rate > 0.0)
            || self.batch_size == 0
            || self.target_update_period == 0
            || self.log_every == 0
            || self.penalty_states == 0
        {
            return bad("learning rate, batch size, periods and penalty states must be positive".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }
}

/// Values of the three continuous CQL terms on one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContinuousCqlLoss {
    pub total: f64,
    pub bellman: f64,
    pub estimated_penalty: f64,
}

/// Proposal draws for the penalty estimator: per state, `n` policy samples
/// then `n` uniform samples, with their proposal log-densities.
fn penalty_proposals<R: Rng + ?Sized>(
    policy: &SquashedGaussianPolicy,
    states: &Tensor,
    n: usize,
    rng: &mut R,
) -> Result<(Tensor, Vec<f64>)> {
    let d = policy.action_dim();
    let (pi_actions, pi_logp) = policy.sample(states, n, rng)?;
    let uniform = uniform_log_density(d);
    let rows = states.rows();
    let mut actions = Vec::with_capacity(rows * 2 * n * d);
    let mut log_q = Vec::with_capacity(rows * 2 * n);
    for i in 0..rows {
        for j in 0..n {
            actions.extend_from_slice(pi_actions.row(i * n + j));
            log_q.push(pi_logp[i * n + j]);
        }
        for _ in 0..n * d {
            actions.push(rng.gen_range(-1.0..1.0));
        }
        log_q.extend(std::iter::repeat_n(uniform, n));
    }
    Ok((Tensor::matrix(rows * 2 * n, d, actions)?, log_q))
}

/// Importance-weighted estimate of `log ∫ exp Q(s, a) da` at each state,
/// mixing `n_samples` policy draws with `n_samples` uniform draws.
pub fn estimate_log_integral<R: Rng + ?Sized>(
    q: &ContinuousQ,
    policy: &SquashedGaussianPolicy,
    states: &Tensor,
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n_samples == 0 {
        return Err(SaqError::InvalidConfig("n_samples must be at least 1".into()));
    }
    let (actions, log_q) = penalty_proposals(policy, states, n_samples, rng)?;
    let values = q.predict(&repeat_rows(states, 2 * n_samples), &actions)?;
    let m = 2 * n_samples;
    let ln_m = (m as f64).ln();
    Ok((0..states.rows())
        .map(|i| {
            let w: Vec<f64> = (0..m).map(|j| values[i * m + j] - log_q[i * m + j]).collect();
            logsumexp(&w) - ln_m
        })
        .collect())
}

/// Midpoint-rule `log ∫ exp Q(s, a) da` over `[-1, 1]^2` at each state.
pub fn grid_log_integral(q: &ContinuousQ, states: &Tensor, resolution: usize) -> Result<Vec<f64>> {
    if q.action_dim() != 2 {
        return Err(SaqError::Unsupported(format!(
            "grid integration needs 2-D actions, got {}",
            q.action_dim()
        )));
    }
    if resolution < 16 {
        return Err(SaqError::InvalidConfig(format!("grid resolution must be at least 16, got {resolution}")));
    }
    let h = 2.0 / resolution as f64;
    let mut grid = Vec::with_capacity(resolution * resolution * 2);
    for i in 0..resolution {
        for j in 0..resolution {
            grid.push(-1.0 + (i as f64 + 0.5) * h);
            grid.push(-1.0 + (j as f64 + 0.5) * h);
        }
    }
    let cells = resolution * resolution;
    let grid = Tensor::matrix(cells, 2, grid)?;
    let log_cell = 2.0 * h.ln();
    let mut out = Vec::with_capacity(states.rows());
    for i in 0..states.rows() {
        let s = repeat_rows(&Tensor::matrix(1, states.cols(), states.row(i).to_vec())?, cells);
        out.push(logsumexp(&q.predict(&s, &grid)?) + log_cell);
    }
    Ok(out)
}

/// Exact conservatism penalty: grid `log ∫ exp Q` minus mean dataset `Q`.
pub fn exact_penalty_grid(q: &ContinuousQ, batch: &Batch, resolution: usize) -> Result<f64> {
    let lse = grid_log_integral(q, &batch.states, resolution)?;
    let q_data = q.predict(&batch.states, &batch.actions)?;
    Ok(mean(&lse) - mean(&q_data))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

struct CriticVars {
    total: Var,
    bellman: Var,
    penalty: Var,
    q_data: Var,
}

#[allow(clippy::too_many_arguments)]
fn critic_terms<R: Rng + ?Sized>(
    tape: &mut Tape,
    q: &ContinuousQ,
    bound: &[Var],
    policy: &SquashedGaussianPolicy,
    states: &Tensor,
    actions: &Tensor,
    targets: &[f64],
    alpha: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<CriticVars> {
    let rows = states.rows();
    let m = 2 * n_samples;
    let (proposals, log_q) = penalty_proposals(policy, states, n_samples, rng)?;
    let s_rep = tape.constant(repeat_rows(states, m));
    let a_rep = tape.constant(proposals);
    let q_samp = q.forward(tape, bound, s_rep, a_rep)?;
    let q_samp = tape.reshape(q_samp, vec![rows, m])?;
    let log_q = tape.constant(Tensor::matrix(rows, m, log_q)?);
    let weighted = tape.sub(q_samp, log_q)?;
    let lse = tape.logsumexp(weighted);
    let lse = tape.add_scalar(lse, -(m as f64).ln());
    let lse = tape.mean(lse);

    let s = tape.constant(states.clone());
    let a = tape.constant(actions.clone());
    let q_data = q.forward(tape, bound, s, a)?;
    let q_mean = tape.mean(q_data);
    let penalty = tape.sub(lse, q_mean)?;

    let y = tape.constant(Tensor::vector(targets.to_vec()));
    let mse = tape.mse(q_data, y)?;
    let bellman = tape.scale(mse, 0.5);
    let weighted_penalty = tape.scale(penalty, alpha);
    let total = tape.add(bellman, weighted_penalty)?;
    Ok(CriticVars {
        total,
        bellman,
        penalty,
        q_data: q_mean,
    })
}

/// `r + γ (1 - terminal) Q̄(s', a')` with `a'` drawn from the policy.
pub fn continuous_targets<R: Rng + ?Sized>(
    target_q: &ContinuousQ,
    policy: &SquashedGaussianPolicy,
    batch: &Batch,
    gamma: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let (a_next, _) = policy.sample(&batch.next_states, 1, rng)?;
    let q_next = target_q.predict(&batch.next_states, &a_next)?;
    Ok(batch
        .rewards
        .iter()
        .zip(&batch.terminals)
        .zip(&q_next)
        .map(|((r, &t), qn)| if t { *r } else { r + gamma * qn })
        .collect())
}

/// Continuous CQL objective on one batch: half mean squared TD error against
/// policy-sampled targets, plus `alpha` times the sampled penalty.
#[allow(clippy::too_many_arguments)]
pub fn continuous_cql_loss<R: Rng + ?Sized>(
    q: &ContinuousQ,
    target_q: &ContinuousQ,
    policy: &SquashedGaussianPolicy,
    batch: &Batch,
    alpha: f64,
    gamma: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<ContinuousCqlLoss> {
    if n_samples == 0 {
        return Err(SaqError::InvalidConfig("n_samples must be at least 1".into()));
    }
    let y = continuous_targets(target_q, policy, batch, gamma, rng)?;
    let mut tape = Tape::new();
    let bound = q.net.bind_frozen(&mut tape);
    let v = critic_terms(&mut tape, q, &bound, policy, &batch.states, &batch.actions, &y, alpha, n_samples, rng)?;
    Ok(ContinuousCqlLoss {
        total: tape.value(v.total).item(),
        bellman: tape.value(v.bellman).item(),
        estimated_penalty: tape.value(v.penalty).item(),
    })
}

fn bc_term(
    tape: &mut Tape,
    policy: &SquashedGaussianPolicy,
    bound: &[Var],
    states: &Tensor,
    actions: &Tensor,
) -> Result<Var> {
    if actions.cols() != policy.action_dim() || actions.rows() != states.rows() {
        return Err(SaqError::Dimension {
            what: "action",
            expected: policy.action_dim(),
            got: actions.cols(),
        });
    }
    let s = tape.constant(states.clone());
    let g = policy.forward(tape, bound, s)?;
    let u = actions.map(atanh_clamped);
    let jac: f64 = u.data().iter().map(|&v| log_tanh_jacobian(v)).sum::<f64>() / states.rows() as f64;
    let u = tape.constant(u);
    let diff = tape.sub(u, g.mean)?;
    let neg_ls = tape.neg(g.log_std);
    let inv_std = tape.exp(neg_ls);
    let z = tape.mul(diff, inv_std)?;
    let z2 = tape.square(z);
    let half = tape.scale(z2, 0.5);
    let per = tape.add(half, g.log_std)?;
    let per = tape.sum_last(per);
    let nll = tape.mean(per);
    Ok(tape.add_scalar(nll, policy.action_dim() as f64 * HALF_LN_2PI + jac))
}

/// Mean negative log-density of the batch actions under the squashed
/// Gaussian, including the `tanh` correction.
pub fn continuous_bc_loss(policy: &SquashedGaussianPolicy, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = policy.net.bind_frozen(&mut tape);
    let loss = bc_term(&mut tape, policy, &bound, &batch.states, &batch.actions)?;
    Ok(tape.value(loss).item())
}

/// Reparameterized actor objective `mean(alpha_ent * log π(ã|s) - Q(s, ã))`.
fn actor_term(
    tape: &mut Tape,
    policy: &SquashedGaussianPolicy,
    bound: &[Var],
    q: &ContinuousQ,
    q_bound: &[Var],
    states: &Tensor,
    eps: &Tensor,
    alpha_ent: f64,
) -> Result<Var> {
    let s = tape.constant(states.clone());
    let g = policy.forward(tape, bound, s)?;
    let std = tape.exp(g.log_std);
    let e = tape.constant(eps.clone());
    let noise = tape.mul(std, e)?;
    let u = tape.add(g.mean, noise)?;
    let a = tape.tanh(u);
    let q_pi = q.forward(tape, q_bound, s, a)?;

    let a2 = tape.square(a);
    let one_minus = tape.neg(a2);
    let one_minus = tape.add_scalar(one_minus, 1.0 + TAPED_JACOBIAN_EPS);
    let log_jac = tape.log(one_minus);
    let per = tape.add(g.log_std, log_jac)?;
    let per = tape.sum_last(per);
    let gauss = eps.data().chunks(eps.cols()).map(|r| r.iter().map(|v| 0.5 * v * v).sum::<f64>() + HALF_LN_2PI * r.len() as f64);
    let gauss = tape.constant(Tensor::vector(gauss.collect()));
    let neg_logp = tape.add(per, gauss)?;
    let logp = tape.neg(neg_logp);
    let ent = tape.scale(logp, alpha_ent);
    let obj = tape.sub(ent, q_pi)?;
    Ok(tape.mean(obj))
}

/// Trained continuous agent; BC agents carry no Q network.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousAgent {
    algorithm: ContinuousAlgorithm,
    norm: Normalizer,
    pub policy: SquashedGaussianPolicy,
    pub q: Option<ContinuousQ>,
}

impl ContinuousAgent {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        config: &ContinuousConfig,
        norm: Normalizer,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if norm.dim() != state_dim {
            return Err(SaqError::Dimension {
                what: "agent normalizer",
                expected: state_dim,
                got: norm.dim(),
            });
        }
        let policy = SquashedGaussianPolicy::new(state_dim, action_dim, &config.hidden, rng);
        let q = match config.algorithm {
            ContinuousAlgorithm::Cql => Some(ContinuousQ::new(state_dim, action_dim, &config.hidden, rng)),
            ContinuousAlgorithm::Bc => None,
        };
        Ok(Self {
            algorithm: config.algorithm,
            norm,
            policy,
            q,
        })
    }

    pub fn algorithm(&self) -> ContinuousAlgorithm {
        self.algorithm
    }

    pub fn state_dim(&self) -> usize {
        self.policy.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.policy.action_dim()
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.norm
    }

    fn normalize(&self, states: &Tensor) -> Result<Tensor> {
        if states.shape().len() != 2 || states.cols() != self.state_dim() {
            return Err(SaqError::Dimension {
                what: "agent state",
                expected: self.state_dim(),
                got: states.cols(),
            });
        }
        Ok(self.norm.apply(states))
    }

    /// Deterministic action `tanh(mean)` at one raw state.
    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        let s = self.normalize(&Tensor::matrix(1, state.len(), state.to_vec())?)?;
        Ok(self.policy.mean_action(&s)?.into_data())
    }

    /// Stochastic action at one raw state.
    pub fn act_sampled<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let s = self.normalize(&Tensor::matrix(1, state.len(), state.to_vec())?)?;
        Ok(self.policy.sample(&s, 1, rng)?.0.into_data())
    }

    /// `Q` at raw states and actions.
    pub fn q_values(&self, states: &Tensor, actions: &Tensor) -> Result<Vec<f64>> {
        let q = self.q.as_ref().ok_or_else(|| SaqError::Unsupported("BC agent has no Q network".into()))?;
        q.predict(&self.normalize(states)?, actions)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = [
            self.state_dim() as u32,
            self.action_dim() as u32,
            self.algorithm.code(),
            self.q.is_some() as u32,
        ];
        let norm = self.norm.to_tensors();
        let mut w = ContainerWriter::new(CONTINUOUS_MAGIC, &header);
        w.group(RAW_GROUP, norm.iter());
        w.group(self.policy.net.activation().code(), self.policy.net.params.tensors());
        if let Some(q) = &self.q {
            w.group(q.net.activation().code(), q.net.params.tensors());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::parse(bytes, CONTINUOUS_MAGIC, 4)?;
        let (state_dim, action_dim) = (c.header[0] as usize, c.header[1] as usize);
        let algorithm = match c.header[2] {
            0 => ContinuousAlgorithm::Cql,
            1 => ContinuousAlgorithm::Bc,
            _ => return Err(SaqError::format(14, "unknown algorithm code")),
        };
        let has_q = c.header[3] == 1;
        if c.header[3] > 1 || has_q != (algorithm == ContinuousAlgorithm::Cql) {
            return Err(SaqError::format(18, "Q network flag disagrees with the algorithm"));
        }
        let expected = 2 + has_q as usize;
        if c.groups.len() != expected {
            return Err(SaqError::format(22, format!("expected {expected} groups, found {}", c.groups.len())));
        }
        let norm = Normalizer::from_group(&c.groups[0])?;
        let policy = SquashedGaussianPolicy::from_net(mlp_from_group(&c.groups[1])?)?;
        let q = if has_q {
            Some(ContinuousQ::from_net(mlp_from_group(&c.groups[2])?, state_dim)?)
        } else {
            None
        };
        let shapes_ok = norm.dim() == state_dim
            && policy.state_dim() == state_dim
            && policy.action_dim() == action_dim
            && q.as_ref().is_none_or(|q| q.action_dim() == action_dim);
        if !shapes_ok {
            return Err(SaqError::format(6, "network shapes disagree with header"));
        }
        Ok(Self {
            algorithm,
            norm,
            policy,
            q,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Periodic evaluation hook for continuous agents.
pub type ContinuousEvaluator<'a> = dyn FnMut(&ContinuousAgent) -> Result<f64> + 'a;

pub fn continuous_trace_columns(algorithm: ContinuousAlgorithm) -> &'static [&'static str] {
    match algorithm {
        ContinuousAlgorithm::Cql => &[
            "step",
            "total",
            "bellman",
            "penalty",
            "policy_loss",
            "estimated_penalty",
            "exact_penalty",
            "penalty_gap",
            "q_data",
            "eval_success",
        ],
        ContinuousAlgorithm::Bc => &["step", "bc_loss", "eval_success"],
    }
}

fn penalty_probe(dataset: &TransitionDataset, count: usize) -> Batch {
    let n = dataset.len();
    let m = count.min(n);
    let idx: Vec<usize> = (0..m).map(|i| i * n / m).collect();
    dataset.batch(&idx)
}

fn normalized(norm: &Normalizer, batch: &Batch) -> Batch {
    Batch {
        states: norm.apply(&batch.states),
        actions: batch.actions.clone(),
        rewards: batch.rewards.clone(),
        next_states: norm.apply(&batch.next_states),
        terminals: batch.terminals.clone(),
    }
}

/// Trains continuous CQL or BC. CQL rows log the sampled penalty estimate and
/// the grid-exact penalty on a fixed set of dataset states, and their gap.
pub fn train_continuous(
    dataset: &TransitionDataset,
    config: &ContinuousConfig,
    mut evaluator: Option<&mut ContinuousEvaluator<'_>>,
) -> Result<(ContinuousAgent, MetricTrace)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(SaqError::EmptyDataset);
    }
    let (state_dim, action_dim) = (dataset.meta.state_dim, dataset.meta.action_dim);
    if config.algorithm == ContinuousAlgorithm::Cql && action_dim != 2 {
        return Err(SaqError::Unsupported(format!(
            "continuous CQL logs a grid-exact penalty and needs 2-D actions, got {action_dim}"
        )));
    }
    let norm = Normalizer::fit(&dataset.states());
    let mut init_rng = rng_for(config.seed, "cont-init");
    let mut agent = ContinuousAgent::new(state_dim, action_dim, config, norm, &mut init_rng)?;
    let mut target = agent.q.clone();
    let mut batch_rng = rng_for(config.seed, "cont-batches");
    let mut sample_rng = rng_for(config.seed, "cont-samples");
    let mut probe_rng = rng_for(config.seed, "cont-penalty-probe");
    let probe = normalized(&agent.norm, &penalty_probe(dataset, config.penalty_states));
    let mut trace = MetricTrace::new(continuous_trace_columns(config.algorithm));
    let lr = config.learning_rate;

    for step in 1..=config.steps {
        let batch = normalized(&agent.norm, &dataset.sample_batch(config.batch_size, &mut batch_rng));
        let mut row: Vec<(&str, f64)> = Vec::new();
        match config.algorithm {
            ContinuousAlgorithm::Cql => {
                let q = agent.q.as_mut().expect("cql has Q");
                let tq = target.as_ref().expect("cql has target");
                let y = continuous_targets(tq, &agent.policy, &batch, config.gamma, &mut sample_rng)?;
                let mut tape = Tape::new();
                let bound = q.net.bind(&mut tape);
                let v = critic_terms(
                    &mut tape,
                    q,
                    &bound,
                    &agent.policy,
                    &batch.states,
                    &batch.actions,
                    &y,
                    config.alpha,
                    config.n_samples,
                    &mut sample_rng,
                )?;
                row.push(("total", tape.value(v.total).item()));
                row.push(("bellman", tape.value(v.bellman).item()));
                row.push(("penalty", tape.value(v.penalty).item()));
                row.push(("q_data", tape.value(v.q_data).item()));
                let grads = tape.backward(v.total)?;
                q.net.apply_gradients(&grads, &bound, lr)?;

                let rows = batch.states.rows();
                let eps: Vec<f64> = (0..rows * action_dim).map(|_| StandardNormal.sample(&mut sample_rng)).collect();
                let eps = Tensor::matrix(rows, action_dim, eps)?;
                let mut tape = Tape::new();
                let pbound = agent.policy.net.bind(&mut tape);
                let qbound = q.net.bind_frozen(&mut tape);
                let loss =
                    actor_term(&mut tape, &agent.policy, &pbound, q, &qbound, &batch.states, &eps, config.alpha_ent)?;
                row.push(("policy_loss", tape.value(loss).item()));
                let grads = tape.backward(loss)?;
                agent.policy.net.apply_gradients(&grads, &pbound, lr)?;

                if step % config.target_update_period == 0 {
                    target.as_mut().expect("cql has target").net.copy_from(&q.net);
                }
            }
            ContinuousAlgorithm::Bc => {
                let mut tape = Tape::new();
                let bound = agent.policy.net.bind(&mut tape);
                let loss = bc_term(&mut tape, &agent.policy, &bound, &batch.states, &batch.actions)?;
                row.push(("bc_loss", tape.value(loss).item()));
                let grads = tape.backward(loss)?;
                agent.policy.net.apply_gradients(&grads, &bound, lr)?;
            }
        }
        let last = step == config.steps;
        if step % config.log_every == 0 || last {
            if let Some(q) = agent.q.as_ref() {
                let q_data = mean(&q.predict(&probe.states, &probe.actions)?);
                let est = mean(&estimate_log_integral(q, &agent.policy, &probe.states, config.n_samples, &mut probe_rng)?);
                let exact = mean(&grid_log_integral(q, &probe.states, config.grid_resolution)?);
                row.push(("estimated_penalty", est - q_data));
                row.push(("exact_penalty", exact - q_data));
                row.push(("penalty_gap", (est - exact).abs()));
            }
            let due = if config.eval_every == 0 { last } else { step % config.eval_every == 0 || last };
            if due {
                if let Some(eval) = evaluator.as_mut() {
                    row.push(("eval_success", eval(&agent)?));
                }
            }
            row.push(("step", step as f64));
            trace.push_named(&row);
        }
    }
    Ok((agent, trace))
}

/// [`train_continuous`] with the algorithm forced to CQL.
pub fn train_continuous_cql(
    dataset: &TransitionDataset,
    config: &ContinuousConfig,
    evaluator: Option<&mut ContinuousEvaluator<'_>>,
) -> Result<(ContinuousAgent, MetricTrace)> {
    let config = ContinuousConfig {
        algorithm: ContinuousAlgorithm::Cql,
        ..config.clone()
    };
    train_continuous(dataset, &config, evaluator)
}

/// Builds a `Q` network computing a fixed affine function of the action,
/// `bias + Σ weights[j] a_j`, independent of state.
pub fn affine_action_q(state_dim: usize, weights: &[f64], bias: f64) -> Result<ContinuousQ> {
    let d = state_dim + weights.len();
    let mut w = vec![0.0; d];
    w[state_dim..].copy_from_slice(weights);
    let net = Mlp::from_tensors(
        vec![Tensor::matrix(d, 1, w)?, Tensor::vector(vec![bias])],
        saq_autodiff::Activation::Relu,
    )?;
    ContinuousQ::from_net(net, state_dim)
}
