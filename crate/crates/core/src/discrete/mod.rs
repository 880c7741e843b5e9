//! Offline RL over quantizer codes: CQL, IQL, BRAC and BC with exact sums
//! over the `K` discrete actions.

pub mod losses;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use saq_autodiff::{argmax, Activation, Mlp, Tape, Tensor};

use crate::container::{Container, ContainerWriter, RAW_GROUP};
use crate::envs::data::{DiscreteBatch, DiscreteTransitionDataset};
use crate::error::{Result, SaqError};
use crate::metrics::MetricTrace;
use crate::nets::{layer_sizes, mlp_from_group, Normalizer};
use crate::quantizer::QuantizerModel;
use crate::seed::rng_for;

pub use losses::{
    bc_loss, brac_policy_loss, brac_q_loss, brac_targets, cql_bc_identity, cql_loss, cql_penalty, cql_targets,
    exact_kl, expectile, iql_closed_form_policy, iql_q_loss, iql_targets, iql_value_loss, sample_index, Backup,
    CqlLoss, PenaltyIdentity, LOG_PROB_FLOOR,
};
use losses::{
    bc_term, brac_policy_term, cql_terms, expectile_term, floored_log_softmax, iql_policy_from_logs, softmax_rows,
    td_term,
};

pub const AGENT_MAGIC: &[u8; 4] = b"SAQA";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Cql,
    Iql,
    Brac,
    Bc,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Cql => "cql",
            Algorithm::Iql => "iql",
            Algorithm::Brac => "brac",
            Algorithm::Bc => "bc",
        }
    }

    fn code(self) -> u32 {
        match self {
            Algorithm::Cql => 0,
            Algorithm::Iql => 1,
            Algorithm::Brac => 2,
            Algorithm::Bc => 3,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        [Algorithm::Cql, Algorithm::Iql, Algorithm::Brac, Algorithm::Bc].into_iter().find(|a| a.code() == c)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = SaqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cql" => Ok(Algorithm::Cql),
            "iql" => Ok(Algorithm::Iql),
            "brac" => Ok(Algorithm::Brac),
            "bc" => Ok(Algorithm::Bc),
            other => Err(SaqError::InvalidConfig(format!("unknown discrete algorithm '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlgoConfig {
    pub algorithm: Algorithm,
    /// CQL penalty weight.
    pub alpha: f64,
    /// IQL expectile.
    pub tau: f64,
    /// IQL temperature of the closed-form policy.
    pub lambda: f64,
    /// BRAC behavior weight.
    pub beta: f64,
    /// BRAC entropy weight.
    pub alpha_ent: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub target_update_period: usize,
    pub hidden: Vec<usize>,
    pub backup: Backup,
    /// Trace row every this many steps.
    pub log_every: usize,
    /// Evaluation every this many steps (0 = only after the last step).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Cql,
            alpha: 1.0,
            tau: 0.7,
            lambda: 1.0,
            beta: 1.0,
            alpha_ent: 0.1,
            gamma: 0.99,
            learning_rate: 1e-3,
            batch_size: 64,
            steps: 20_000,
            target_update_period: 200,
            hidden: vec![64, 64],
            backup: Backup::Sampled,
            log_every: 10,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl AlgoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SaqError::InvalidConfig(m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("alpha_ent", self.alpha_ent)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(self.lambda > 0.0) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.target_update_period == 0 || self.log_every == 0
        {
            return bad("learning rate, batch size, target period and log period must be positive".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }
}

/// Greedy takes the most probable code (lowest index on ties); sample draws
/// from the policy distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Greedy,
    Sample,
}

impl FromStr for ActMode {
    type Err = SaqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(ActMode::Greedy),
            "sample" => Ok(ActMode::Sample),
            other => Err(SaqError::InvalidConfig(format!("unknown action mode '{other}'"))),
        }
    }
}

/// Trained discrete agent. Which networks are present depends on the
/// algorithm: CQL keeps `q`; IQL keeps `q`, `v`, `behavior`; BRAC keeps `q`,
/// `policy`, `behavior`; BC keeps `policy`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteAgent {
    algorithm: Algorithm,
    codebook_size: usize,
    state_dim: usize,
    norm: Normalizer,
    lambda: f64,
    q: Option<Mlp>,
    v: Option<Mlp>,
    policy: Option<Mlp>,
    behavior: Option<Mlp>,
}

impl DiscreteAgent {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        codebook_size: usize,
        config: &AlgoConfig,
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
        let mut net = |out: usize| Mlp::new(&layer_sizes(state_dim, &config.hidden, out), Activation::Relu, rng);
        let k = codebook_size;
        let (q, v, policy, behavior) = match config.algorithm {
            Algorithm::Cql => (Some(net(k)), None, None, None),
            Algorithm::Iql => (Some(net(k)), Some(net(1)), None, Some(net(k))),
            Algorithm::Brac => (Some(net(k)), None, Some(net(k)), Some(net(k))),
            Algorithm::Bc => (None, None, Some(net(k)), None),
        };
        Ok(Self {
            algorithm: config.algorithm,
            codebook_size,
            state_dim,
            norm,
            lambda: config.lambda,
            q,
            v,
            policy,
            behavior,
        })
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn normalize(&self, states: &Tensor) -> Result<Tensor> {
        if states.shape().len() != 2 || states.cols() != self.state_dim {
            return Err(SaqError::Dimension {
                what: "agent state",
                expected: self.state_dim,
                got: states.cols(),
            });
        }
        Ok(self.norm.apply(states))
    }

    fn net<'a>(&'a self, slot: &'a Option<Mlp>, name: &str) -> Result<&'a Mlp> {
        slot.as_ref()
            .ok_or_else(|| SaqError::Unsupported(format!("{} agent has no {name} network", self.algorithm)))
    }

    /// `Q(s, ·)` for each row of `states`.
    pub fn q_values(&self, states: &Tensor) -> Result<Tensor> {
        Ok(self.net(&self.q, "Q")?.predict(&self.normalize(states)?)?)
    }

    pub fn values(&self, states: &Tensor) -> Result<Vec<f64>> {
        Ok(self.net(&self.v, "value")?.predict(&self.normalize(states)?)?.into_data())
    }

    /// Behavior log-probabilities, floored.
    pub fn behavior_log_probs(&self, states: &Tensor) -> Result<Tensor> {
        let logits = self.net(&self.behavior, "behavior")?.predict(&self.normalize(states)?)?;
        Ok(floored_log_softmax(&logits))
    }

    /// Policy distribution over codes for each row of `states`.
    pub fn policy_probs(&self, states: &Tensor) -> Result<Tensor> {
        match self.algorithm {
            Algorithm::Cql => Ok(softmax_rows(&self.q_values(states)?)),
            Algorithm::Brac | Algorithm::Bc => {
                let logits = self.net(&self.policy, "policy")?.predict(&self.normalize(states)?)?;
                Ok(softmax_rows(&logits))
            }
            Algorithm::Iql => {
                let q = self.q_values(states)?;
                let v = self.values(states)?;
                let lb = self.behavior_log_probs(states)?;
                let mut out = Vec::with_capacity(q.len());
                for i in 0..q.rows() {
                    let adv: Vec<f64> = q.row(i).iter().map(|x| x - v[i]).collect();
                    out.extend(iql_policy_from_logs(&adv, lb.row(i), self.lambda));
                }
                Ok(Tensor::matrix(q.rows(), q.cols(), out)?)
            }
        }
    }

    /// Chosen code at one state.
    pub fn select_code<R: Rng + ?Sized>(&self, state: &[f64], mode: ActMode, rng: &mut R) -> Result<usize> {
        let s = Tensor::matrix(1, state.len(), state.to_vec())?;
        match mode {
            ActMode::Greedy if self.algorithm == Algorithm::Cql => Ok(argmax(self.q_values(&s)?.row(0))),
            ActMode::Greedy => Ok(argmax(self.policy_probs(&s)?.row(0))),
            ActMode::Sample => Ok(sample_index(self.policy_probs(&s)?.row(0), rng)),
        }
    }

    /// Continuous action: choose a code, then decode it.
    pub fn act<R: Rng + ?Sized>(
        &self,
        quantizer: &QuantizerModel,
        state: &[f64],
        mode: ActMode,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        self.check_quantizer(quantizer)?;
        let code = self.select_code(state, mode, rng)?;
        quantizer.decode_action(state, code)
    }

    pub fn check_quantizer(&self, quantizer: &QuantizerModel) -> Result<()> {
        if quantizer.codebook_size() != self.codebook_size {
            return Err(SaqError::Dimension {
                what: "quantizer codebook size",
                expected: self.codebook_size,
                got: quantizer.codebook_size(),
            });
        }
        if quantizer.state_dim() != self.state_dim {
            return Err(SaqError::Dimension {
                what: "quantizer state",
                expected: self.state_dim,
                got: quantizer.state_dim(),
            });
        }
        Ok(())
    }

    /// Conservatism penalty of the current Q on a whole dataset.
    pub fn dataset_penalty(&self, dataset: &DiscreteTransitionDataset) -> Result<f64> {
        let b = dataset.full_batch();
        cql_penalty(&self.q_values(&b.states)?, &b.codes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let slots = [&self.q, &self.v, &self.policy, &self.behavior];
        let mask = slots.iter().enumerate().fold(0u32, |m, (i, s)| if s.is_some() { m | 1 << i } else { m });
        let header = [self.state_dim as u32, self.codebook_size as u32, self.algorithm.code(), mask];
        let norm = self.norm.to_tensors();
        let lambda = Tensor::vector(vec![self.lambda]);
        let mut w = ContainerWriter::new(AGENT_MAGIC, &header);
        w.group(RAW_GROUP, norm.iter()).group(RAW_GROUP, [&lambda]);
        for net in slots.into_iter().flatten() {
            w.group(net.activation().code(), net.params.tensors());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::parse(bytes, AGENT_MAGIC, 4)?;
        let state_dim = c.header[0] as usize;
        let k = c.header[1] as usize;
        let algorithm =
            Algorithm::from_code(c.header[2]).ok_or_else(|| SaqError::format(14, "unknown algorithm code"))?;
        let mask = c.header[3];
        let expected = 2 + mask.count_ones() as usize;
        if mask > 0b1111 || c.groups.len() != expected {
            return Err(SaqError::format(18, format!("expected {expected} groups, found {}", c.groups.len())));
        }
        let norm = Normalizer::from_group(&c.groups[0])?;
        let lambda = c.groups[1].blocks.first().map(|t| t.data()[0]).unwrap_or(1.0);
        let mut nets = c.groups[2..].iter();
        let mut slot = |bit: u32, out: usize| -> Result<Option<Mlp>> {
            if mask & (1 << bit) == 0 {
                return Ok(None);
            }
            let net = mlp_from_group(nets.next().expect("group count checked"))?;
            if net.input_dim() != state_dim || net.output_dim() != out {
                return Err(SaqError::format(0, "network shape disagrees with header"));
            }
            Ok(Some(net))
        };
        let q = slot(0, k)?;
        let v = slot(1, 1)?;
        let policy = slot(2, k)?;
        let behavior = slot(3, k)?;
        if norm.dim() != state_dim {
            return Err(SaqError::format(6, "normalizer width disagrees with header"));
        }
        Ok(Self {
            algorithm,
            codebook_size: k,
            state_dim,
            norm,
            lambda,
            q,
            v,
            policy,
            behavior,
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

/// Periodic evaluation hook: returns a success rate for the current agent.
pub type Evaluator<'a> = dyn FnMut(&DiscreteAgent) -> Result<f64> + 'a;

pub fn trace_columns(algorithm: Algorithm) -> &'static [&'static str] {
    match algorithm {
        Algorithm::Cql => &["step", "total", "bellman", "penalty", "exact_penalty", "q_data", "eval_success"],
        Algorithm::Iql => &["step", "value_loss", "q_loss", "behavior_loss", "eval_success"],
        Algorithm::Brac => &["step", "q_loss", "policy_loss", "behavior_loss", "kl", "eval_success"],
        Algorithm::Bc => &["step", "bc_loss", "eval_success"],
    }
}

struct Trainer<'d> {
    config: AlgoConfig,
    dataset: &'d DiscreteTransitionDataset,
    agent: DiscreteAgent,
    target_q: Option<Mlp>,
}

impl Trainer<'_> {
    fn normalized(&self, batch: &DiscreteBatch) -> (Tensor, Tensor) {
        (self.agent.norm.apply(&batch.states), self.agent.norm.apply(&batch.next_states))
    }

    fn cql_step<R: Rng + ?Sized>(&mut self, batch: &DiscreteBatch, rng: &mut R) -> Result<Vec<(&'static str, f64)>> {
        let (s, s2) = self.normalized(batch);
        let q = self.agent.q.as_mut().expect("cql has Q");
        let target = self.target_q.as_ref().expect("cql has target");
        let q_next = q.predict(&s2)?;
        let t_next = target.predict(&s2)?;
        let y = cql_targets(&q_next, &t_next, &batch.rewards, &batch.terminals, self.config.gamma, self.config.backup, rng);
        let mut tape = Tape::new();
        let bound = q.bind(&mut tape);
        let x = tape.constant(s);
        let q_s = q.forward(&mut tape, &bound, x)?;
        let vars = cql_terms(&mut tape, q_s, &batch.codes, &y, self.config.alpha)?;
        let out = vec![
            ("total", tape.value(vars.total).item()),
            ("bellman", tape.value(vars.bellman).item()),
            ("penalty", tape.value(vars.penalty).item()),
        ];
        let grads = tape.backward(vars.total)?;
        q.apply_gradients(&grads, &bound, self.config.learning_rate)?;
        Ok(out)
    }

    fn behavior_step(&mut self, s: &Tensor, codes: &[usize]) -> Result<f64> {
        let net = self.agent.behavior.as_mut().expect("behavior network");
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let x = tape.constant(s.clone());
        let logits = net.forward(&mut tape, &bound, x)?;
        let loss = bc_term(&mut tape, logits, codes)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        net.apply_gradients(&grads, &bound, self.config.learning_rate)?;
        Ok(value)
    }

    fn iql_step(&mut self, batch: &DiscreteBatch) -> Result<Vec<(&'static str, f64)>> {
        let (s, s2) = self.normalized(batch);
        let lr = self.config.learning_rate;
        let behavior_loss = self.behavior_step(&s, &batch.codes)?;

        let target = self.target_q.as_ref().expect("iql has target");
        let tq = target.predict(&s)?;
        let q_hat: Vec<f64> = batch.codes.iter().enumerate().map(|(i, &c)| tq.row(i)[c]).collect();
        let v = self.agent.v.as_mut().expect("iql has V");
        let mut tape = Tape::new();
        let bound = v.bind(&mut tape);
        let x = tape.constant(s.clone());
        let out = v.forward(&mut tape, &bound, x)?;
        let out = tape.reshape(out, vec![batch.len()])?;
        let vloss = expectile_term(&mut tape, out, &q_hat, self.config.tau)?;
        let value_loss = tape.value(vloss).item();
        let grads = tape.backward(vloss)?;
        v.apply_gradients(&grads, &bound, lr)?;

        let v_next = v.predict(&s2)?.into_data();
        let y = iql_targets(&v_next, &batch.rewards, &batch.terminals, self.config.gamma);
        let q = self.agent.q.as_mut().expect("iql has Q");
        let mut tape = Tape::new();
        let bound = q.bind(&mut tape);
        let x = tape.constant(s);
        let q_s = q.forward(&mut tape, &bound, x)?;
        let qloss = td_term(&mut tape, q_s, &batch.codes, &y)?;
        let q_loss = tape.value(qloss).item();
        let grads = tape.backward(qloss)?;
        q.apply_gradients(&grads, &bound, lr)?;
        Ok(vec![("value_loss", value_loss), ("q_loss", q_loss), ("behavior_loss", behavior_loss)])
    }

    fn brac_step(&mut self, batch: &DiscreteBatch) -> Result<Vec<(&'static str, f64)>> {
        let (s, s2) = self.normalized(batch);
        let lr = self.config.learning_rate;
        let (gamma, beta, alpha_ent) = (self.config.gamma, self.config.beta, self.config.alpha_ent);
        let behavior_loss = self.behavior_step(&s, &batch.codes)?;
        let behavior = self.agent.behavior.as_ref().expect("brac has behavior");
        let lb_next = floored_log_softmax(&behavior.predict(&s2)?);
        let lb = floored_log_softmax(&behavior.predict(&s)?);

        let policy = self.agent.policy.as_ref().expect("brac has policy");
        let pi_next = softmax_rows(&policy.predict(&s2)?);
        let t_next = self.target_q.as_ref().expect("brac has target").predict(&s2)?;
        let y = brac_targets(&t_next, &pi_next, &lb_next, &batch.rewards, &batch.terminals, gamma, beta);
        let q = self.agent.q.as_mut().expect("brac has Q");
        let mut tape = Tape::new();
        let bound = q.bind(&mut tape);
        let x = tape.constant(s.clone());
        let q_s = q.forward(&mut tape, &bound, x)?;
        let qloss = td_term(&mut tape, q_s, &batch.codes, &y)?;
        let q_loss = tape.value(qloss).item();
        let grads = tape.backward(qloss)?;
        q.apply_gradients(&grads, &bound, lr)?;

        let q_now = q.predict(&s)?;
        let policy = self.agent.policy.as_mut().expect("brac has policy");
        let mut tape = Tape::new();
        let bound = policy.bind(&mut tape);
        let x = tape.constant(s);
        let logits = policy.forward(&mut tape, &bound, x)?;
        let ploss = brac_policy_term(&mut tape, logits, &q_now, &lb, beta, alpha_ent)?;
        let policy_loss = tape.value(ploss).item();
        let probs = softmax_rows(tape.value(logits));
        let grads = tape.backward(ploss)?;
        policy.apply_gradients(&grads, &bound, lr)?;

        let beh_probs = softmax_rows(&lb);
        let kl = (0..probs.rows()).map(|i| exact_kl(probs.row(i), beh_probs.row(i))).sum::<f64>() / probs.rows() as f64;
        Ok(vec![("q_loss", q_loss), ("policy_loss", policy_loss), ("behavior_loss", behavior_loss), ("kl", kl)])
    }

    fn bc_step(&mut self, batch: &DiscreteBatch) -> Result<Vec<(&'static str, f64)>> {
        let s = self.agent.norm.apply(&batch.states);
        let net = self.agent.policy.as_mut().expect("bc has policy");
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let x = tape.constant(s);
        let logits = net.forward(&mut tape, &bound, x)?;
        let loss = bc_term(&mut tape, logits, &batch.codes)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        net.apply_gradients(&grads, &bound, self.config.learning_rate)?;
        Ok(vec![("bc_loss", value)])
    }

    fn sync_target(&mut self) {
        if let (Some(t), Some(q)) = (self.target_q.as_mut(), self.agent.q.as_ref()) {
            t.copy_from(q);
        }
    }
}

/// Trains the configured algorithm on a quantized dataset. The trace gets a
/// row every `log_every` steps and after the final step; `eval_success` is
/// filled whenever the evaluator runs.
pub fn train_agent(
    dataset: &DiscreteTransitionDataset,
    quantizer: Option<&QuantizerModel>,
    config: &AlgoConfig,
    mut evaluator: Option<&mut Evaluator<'_>>,
) -> Result<(DiscreteAgent, MetricTrace)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(SaqError::EmptyDataset);
    }
    let k = dataset.codebook_size;
    let state_dim = dataset.meta.state_dim;
    let mut init_rng = rng_for(config.seed, "agent-init");
    let norm = Normalizer::fit(&dataset.full_batch().states);
    let agent = DiscreteAgent::new(state_dim, k, config, norm, &mut init_rng)?;
    if let Some(qz) = quantizer {
        agent.check_quantizer(qz)?;
    }
    let mut trace = MetricTrace::new(trace_columns(config.algorithm));
    let target_q = agent.q.clone();
    let mut trainer = Trainer {
        config: config.clone(),
        dataset,
        agent,
        target_q,
    };
    let mut batch_rng = rng_for(config.seed, "agent-batches");
    let mut backup_rng = rng_for(config.seed, "agent-backup");

    for step in 1..=config.steps {
        let batch = trainer.dataset.sample_batch(config.batch_size, &mut batch_rng);
        let mut row = match config.algorithm {
            Algorithm::Cql => trainer.cql_step(&batch, &mut backup_rng)?,
            Algorithm::Iql => trainer.iql_step(&batch)?,
            Algorithm::Brac => trainer.brac_step(&batch)?,
            Algorithm::Bc => trainer.bc_step(&batch)?,
        };
        if step % config.target_update_period == 0 {
            trainer.sync_target();
        }
        let last = step == config.steps;
        if step % config.log_every == 0 || last {
            if config.algorithm == Algorithm::Cql {
                let full = trainer.dataset.full_batch();
                let q = trainer.agent.q_values(&full.states)?;
                row.push(("exact_penalty", cql_penalty(&q, &full.codes)?));
                let q_data = full.codes.iter().enumerate().map(|(i, &c)| q.row(i)[c]).sum::<f64>() / full.len() as f64;
                row.push(("q_data", q_data));
            }
            let due = if config.eval_every == 0 { last } else { step % config.eval_every == 0 || last };
            if due {
                if let Some(eval) = evaluator.as_mut() {
                    row.push(("eval_success", eval(&trainer.agent)?));
                }
            }
            row.push(("step", step as f64));
            trace.push_named(&row);
        }
    }
    Ok((trainer.agent, trace))
}
