//! State-conditioned action quantization.
//!
//! An encoder maps `(state, action)` to a `D`-dimensional embedding, which is
//! snapped to the nearest of `K` codebook vectors; a decoder maps
//! `(state, code vector)` back to an action. Each action therefore becomes a
//! single integer code whose meaning depends on the state.
//!
//! Training minimizes reconstruction error plus the usual codebook and
//! commitment terms. Reconstruction gradients reach the encoder through a
//! straight-through copy past the nearest-code selection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use saq_autodiff::{Activation, Mlp, ParameterSet, Tape, Tensor, Var};

use crate::container::{Container, ContainerWriter, RAW_GROUP};
use crate::envs::data::{DiscreteTransition, DiscreteTransitionDataset, TransitionDataset};
use crate::error::{Result, SaqError};
use crate::metrics::MetricTrace;
use crate::nets::{layer_sizes, mlp_from_group, Normalizer};
use crate::seed::rng_for;

pub const MODEL_MAGIC: &[u8; 4] = b"SAQM";

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerConfig {
    pub codebook_size: usize,
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub commitment_weight: f64,
    /// Dead codes are re-seeded every this many epochs.
    pub dead_code_period: usize,
    pub seed: u64,
    /// When false, neither encoder nor decoder sees the state.
    pub state_conditioned: bool,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            codebook_size: 32,
            embedding_dim: 8,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            commitment_weight: 0.25,
            dead_code_period: 5,
            seed: 0,
            state_conditioned: true,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SaqError::InvalidConfig(m.to_string()));
        if self.codebook_size < 2 {
            return bad("codebook size must be at least 2");
        }
        if self.embedding_dim == 0 || self.batch_size == 0 || self.dead_code_period == 0 {
            return bad("embedding dim, batch size and dead-code period must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.commitment_weight > 0.0) {
            return bad("learning rate and commitment weight must be positive");
        }
        Ok(())
    }
}

/// `K × D` matrix of code vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    params: ParameterSet,
}

impl Codebook {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() == 0 || vectors.cols() == 0 {
            return Err(SaqError::InvalidConfig(format!(
                "codebook must be a non-empty K x D matrix, got {:?}",
                vectors.shape()
            )));
        }
        let mut params = ParameterSet::new();
        params.insert("codebook", vectors);
        Ok(Self { params })
    }

    pub fn vectors(&self) -> &Tensor {
        self.params.tensor(0)
    }

    pub fn size(&self) -> usize {
        self.vectors().rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors().cols()
    }

    pub fn vector(&self, code: usize) -> &[f64] {
        self.vectors().row(code)
    }

    /// Smallest pairwise Euclidean distance between code vectors.
    pub fn min_separation(&self) -> f64 {
        let k = self.size();
        let mut best = f64::INFINITY;
        for i in 0..k {
            for j in i + 1..k {
                best = best.min(sq_dist(self.vector(i), self.vector(j)).sqrt());
            }
        }
        best
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the code vector closest to `embedding` in Euclidean distance;
/// ties go to the lowest index.
pub fn nearest_code(embedding: &[f64], codebook: &Codebook) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for j in 0..codebook.size() {
        let d = sq_dist(embedding, codebook.vector(j));
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Loss values for one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantizerLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerModel {
    encoder: Mlp,
    decoder: Mlp,
    codebook: Codebook,
    state_norm: Normalizer,
    state_dim: usize,
    action_dim: usize,
    state_conditioned: bool,
    commitment_weight: f64,
}

struct Bound {
    encoder: Vec<Var>,
    decoder: Vec<Var>,
    codebook: Var,
}

struct Terms {
    embedding: Var,
    codes: Vec<usize>,
    reconstruction: Var,
    codebook: Var,
    commitment: Var,
    total: Var,
}

impl QuantizerModel {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        config: &QuantizerConfig,
        state_norm: Normalizer,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if state_norm.dim() != state_dim {
            return Err(SaqError::Dimension {
                what: "normalizer",
                expected: state_dim,
                got: state_norm.dim(),
            });
        }
        let cond = config.state_conditioned;
        let enc_in = if cond { state_dim + action_dim } else { action_dim };
        let dec_in = if cond { state_dim + config.embedding_dim } else { config.embedding_dim };
        let encoder = Mlp::new(&layer_sizes(enc_in, &config.hidden, config.embedding_dim), config.activation, rng);
        let decoder = Mlp::new(&layer_sizes(dec_in, &config.hidden, action_dim), config.activation, rng);
        let k = config.codebook_size;
        let d = config.embedding_dim;
        let cb: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Ok(Self {
            encoder,
            decoder,
            codebook: Codebook::new(Tensor::matrix(k, d, cb)?)?,
            state_norm,
            state_dim,
            action_dim,
            state_conditioned: cond,
            commitment_weight: config.commitment_weight,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook.size()
    }

    pub fn embedding_dim(&self) -> usize {
        self.codebook.dim()
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn is_state_conditioned(&self) -> bool {
        self.state_conditioned
    }

    pub fn commitment_weight(&self) -> f64 {
        self.commitment_weight
    }

    pub fn set_commitment_weight(&mut self, w: f64) {
        self.commitment_weight = w;
    }

    fn check_batch(&self, states: &Tensor, actions: &Tensor) -> Result<()> {
        if states.cols() != self.state_dim || states.shape().len() != 2 {
            return Err(SaqError::Dimension {
                what: "quantizer state",
                expected: self.state_dim,
                got: states.cols(),
            });
        }
        if actions.cols() != self.action_dim || actions.rows() != states.rows() {
            return Err(SaqError::Dimension {
                what: "quantizer action",
                expected: self.action_dim,
                got: actions.cols(),
            });
        }
        if states.rows() == 0 {
            return Err(SaqError::EmptyDataset);
        }
        Ok(())
    }

    fn encoder_input(&self, states: &Tensor, actions: &Tensor) -> Tensor {
        if !self.state_conditioned {
            return actions.clone();
        }
        let s = self.state_norm.apply(states);
        concat_rows(&s, actions)
    }

    /// Continuous encoder embeddings, `[n, D]`.
    pub fn embed(&self, states: &Tensor, actions: &Tensor) -> Result<Tensor> {
        self.check_batch(states, actions)?;
        Ok(self.encoder.predict(&self.encoder_input(states, actions))?)
    }

    /// Code index for each `(state, action)` row.
    pub fn encode_batch(&self, states: &Tensor, actions: &Tensor) -> Result<Vec<usize>> {
        let emb = self.embed(states, actions)?;
        Ok((0..emb.rows()).map(|i| nearest_code(emb.row(i), &self.codebook)).collect())
    }

    pub fn encode(&self, state: &[f64], action: &[f64]) -> Result<usize> {
        let s = Tensor::matrix(1, state.len(), state.to_vec())?;
        let a = Tensor::matrix(1, action.len(), action.to_vec())?;
        Ok(self.encode_batch(&s, &a)?[0])
    }

    /// Decoded actions for each `(state, code)` row, `[n, action_dim]`.
    pub fn decode_batch(&self, states: &Tensor, codes: &[usize]) -> Result<Tensor> {
        if states.cols() != self.state_dim || states.rows() != codes.len() {
            return Err(SaqError::Dimension {
                what: "decoder state",
                expected: self.state_dim,
                got: states.cols(),
            });
        }
        let k = self.codebook_size();
        let mut z = Vec::with_capacity(codes.len() * self.embedding_dim());
        for &c in codes {
            if c >= k {
                return Err(SaqError::CodeOutOfRange { code: c, k });
            }
            z.extend_from_slice(self.codebook.vector(c));
        }
        let z = Tensor::matrix(codes.len(), self.embedding_dim(), z)?;
        let input = if self.state_conditioned {
            concat_rows(&self.state_norm.apply(states), &z)
        } else {
            z
        };
        Ok(self.decoder.predict(&input)?)
    }

    /// Deterministic decoder output for one state and code.
    pub fn decode_action(&self, state: &[f64], code: usize) -> Result<Vec<f64>> {
        let s = Tensor::matrix(1, state.len(), state.to_vec())?;
        Ok(self.decode_batch(&s, &[code])?.into_data())
    }

    /// Every code decoded at one state, `[K, action_dim]`.
    pub fn decode_all(&self, state: &[f64]) -> Result<Tensor> {
        let k = self.codebook_size();
        let rows: Vec<&[f64]> = (0..k).map(|_| state).collect();
        let states = Tensor::from_rows(&rows)?;
        let codes: Vec<usize> = (0..k).collect();
        self.decode_batch(&states, &codes)
    }

    fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            encoder: self.encoder.bind(tape),
            decoder: self.decoder.bind(tape),
            codebook: self.codebook.params.bind(tape)[0],
        }
    }

    fn forward_terms(&self, tape: &mut Tape, bound: &Bound, states: &Tensor, actions: &Tensor) -> Result<Terms> {
        let enc_in = tape.constant(self.encoder_input(states, actions));
        let embedding = self.encoder.forward(tape, &bound.encoder, enc_in)?;
        let emb_values = tape.value(embedding);
        let codes: Vec<usize> = (0..emb_values.rows())
            .map(|i| nearest_code(emb_values.row(i), &self.codebook))
            .collect();
        let selected = tape.select_rows(bound.codebook, &codes)?;

        // Straight-through: forward value is the code vector, gradient flows
        // to the embedding unchanged.
        let diff = tape.sub(selected, embedding)?;
        let diff = tape.stop_gradient(diff);
        let quantized = tape.add(embedding, diff)?;

        let dec_in = if self.state_conditioned {
            let s = tape.constant(self.state_norm.apply(states));
            tape.concat(s, quantized)?
        } else {
            quantized
        };
        let decoded = self.decoder.forward(tape, &bound.decoder, dec_in)?;
        let target = tape.constant(actions.clone());
        let reconstruction = tape.mse(decoded, target)?;

        let emb_sg = tape.stop_gradient(embedding);
        let d = tape.sub(emb_sg, selected)?;
        let d = tape.sq_norm(d);
        let codebook = tape.mean(d);

        let sel_sg = tape.stop_gradient(selected);
        let d = tape.sub(embedding, sel_sg)?;
        let d = tape.sq_norm(d);
        let d = tape.mean(d);
        let commitment = tape.scale(d, self.commitment_weight);

        let total = tape.add(reconstruction, codebook)?;
        let total = tape.add(total, commitment)?;
        Ok(Terms {
            embedding,
            codes,
            reconstruction,
            codebook,
            commitment,
            total,
        })
    }

    /// Three-term objective on a batch.
    pub fn loss(&self, states: &Tensor, actions: &Tensor) -> Result<QuantizerLoss> {
        self.check_batch(states, actions)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let t = self.forward_terms(&mut tape, &bound, states, actions)?;
        Ok(QuantizerLoss {
            total: tape.value(t.total).item(),
            reconstruction: tape.value(t.reconstruction).item(),
            codebook: tape.value(t.codebook).item(),
            commitment: tape.value(t.commitment).item(),
        })
    }

    /// One Adam step on the full objective. Returns the pre-step losses and
    /// the codes chosen for the batch.
    pub fn train_step(&mut self, states: &Tensor, actions: &Tensor, lr: f64) -> Result<(QuantizerLoss, Vec<usize>, Tensor)> {
        self.check_batch(states, actions)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let t = self.forward_terms(&mut tape, &bound, states, actions)?;
        let loss = QuantizerLoss {
            total: tape.value(t.total).item(),
            reconstruction: tape.value(t.reconstruction).item(),
            codebook: tape.value(t.codebook).item(),
            commitment: tape.value(t.commitment).item(),
        };
        let embeddings = tape.value(t.embedding).clone();
        let grads = tape.backward(t.total)?;
        self.encoder.apply_gradients(&grads, &bound.encoder, lr)?;
        self.decoder.apply_gradients(&grads, &bound.decoder, lr)?;
        let g = self.codebook.params.collect(&grads, &[bound.codebook]);
        self.codebook.params.adam_step(&g, lr)?;
        Ok((loss, t.codes, embeddings))
    }

    /// Mean squared reconstruction error (per action element) after
    /// encode → nearest code → decode.
    pub fn reconstruction_mse(&self, dataset: &TransitionDataset) -> Result<f64> {
        if dataset.is_empty() {
            return Err(SaqError::EmptyDataset);
        }
        let states = dataset.states();
        let actions = dataset.actions();
        let codes = self.encode_batch(&states, &actions)?;
        let decoded = self.decode_batch(&states, &codes)?;
        Ok(mean_sq_diff(decoded.data(), actions.data()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = [
            self.state_dim as u32,
            self.action_dim as u32,
            self.codebook_size() as u32,
            self.embedding_dim() as u32,
        ];
        let norm = self.state_norm.to_tensors();
        let commit = Tensor::vector(vec![self.commitment_weight]);
        let mut w = ContainerWriter::new(MODEL_MAGIC, &header);
        w.group(self.encoder.activation().code(), self.encoder.params.tensors())
            .group(self.decoder.activation().code(), self.decoder.params.tensors())
            .group(RAW_GROUP, [self.codebook.vectors()])
            .group(RAW_GROUP, norm.iter())
            .group(RAW_GROUP, [&commit]);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::parse(bytes, MODEL_MAGIC, 4)?;
        let [state_dim, action_dim, k, d] = [0, 1, 2, 3].map(|i| c.header[i] as usize);
        if c.groups.len() != 5 {
            return Err(SaqError::format(0, format!("expected 5 parameter groups, found {}", c.groups.len())));
        }
        let encoder = mlp_from_group(&c.groups[0])?;
        let decoder = mlp_from_group(&c.groups[1])?;
        let codebook = Codebook::new(c.groups[2].blocks.first().cloned().ok_or_else(|| SaqError::format(0, "missing codebook"))?)?;
        let state_norm = Normalizer::from_group(&c.groups[3])?;
        let commitment_weight = c.groups[4].blocks.first().map(|t| t.data()[0]).unwrap_or(0.25);
        let state_conditioned = encoder.input_dim() == state_dim + action_dim;
        let consistent = codebook.size() == k
            && codebook.dim() == d
            && state_norm.dim() == state_dim
            && encoder.output_dim() == d
            && decoder.output_dim() == action_dim
            && (state_conditioned || encoder.input_dim() == action_dim)
            && decoder.input_dim() == if state_conditioned { state_dim + d } else { d };
        if !consistent {
            return Err(SaqError::format(6, "parameter shapes disagree with header dimensions"));
        }
        Ok(Self {
            encoder,
            decoder,
            codebook,
            state_norm,
            state_dim,
            action_dim,
            state_conditioned,
            commitment_weight,
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

pub(crate) fn concat_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let rows = a.rows();
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..rows {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    Tensor::matrix(rows, a.cols() + b.cols(), data).expect("finite rows")
}

fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// Replaces the codebook with `K` rows drawn from the embeddings (without
/// replacement when possible) plus tiny jitter so no two codes coincide.
fn init_codebook_from<R: Rng + ?Sized>(model: &mut QuantizerModel, embeddings: &Tensor, rng: &mut R) {
    let k = model.codebook_size();
    let d = model.embedding_dim();
    let n = embeddings.rows();
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(rng);
    let jitter = Normal::new(0.0, 1e-3).unwrap();
    let cb = model.codebook.params.tensor_mut(0).data_mut();
    for j in 0..k {
        let src = if j < n { rows[j] } else { rng.gen_range(0..n) };
        for c in 0..d {
            cb[j * d + c] = embeddings.row(src)[c] + jitter.sample(rng);
        }
    }
}

fn reseed_dead_codes<R: Rng + ?Sized>(model: &mut QuantizerModel, usage: &[usize], embeddings: &Tensor, rng: &mut R) -> usize {
    let d = model.embedding_dim();
    let noise = Normal::new(0.0, 1e-2).unwrap();
    let cb = model.codebook.params.tensor_mut(0).data_mut();
    let mut reseeded = 0;
    for (j, &u) in usage.iter().enumerate() {
        if u == 0 && embeddings.rows() > 0 {
            let src = rng.gen_range(0..embeddings.rows());
            for c in 0..d {
                cb[j * d + c] = embeddings.row(src)[c] + noise.sample(rng);
            }
            reseeded += 1;
        }
    }
    reseeded
}

/// Cosine decay from `lr` to `lr / 100` over the run.
fn annealed_lr(lr: f64, epoch: usize, epochs: usize) -> f64 {
    let t = epoch as f64 / epochs.max(1) as f64;
    lr * (0.01 + 0.495 * (1.0 + (std::f64::consts::PI * t).cos()))
}

pub const QUANTIZER_TRACE_COLUMNS: [&str; 8] = [
    "epoch",
    "total",
    "reconstruction",
    "codebook",
    "commitment",
    "live_codes",
    "dead_codes",
    "reseeded",
];

/// Trains a quantizer on the dataset's `(state, action)` pairs. Fully
/// determined by the dataset and config.
pub fn train_quantizer(dataset: &TransitionDataset, config: &QuantizerConfig) -> Result<(QuantizerModel, MetricTrace)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(SaqError::EmptyDataset);
    }
    let mut rng = rng_for(config.seed, "quantizer");
    let norm = Normalizer::fit(&dataset.states());
    let mut model = QuantizerModel::new(dataset.meta.state_dim, dataset.meta.action_dim, config, norm, &mut rng)?;
    let mut trace = MetricTrace::new(&QUANTIZER_TRACE_COLUMNS);
    let k = config.codebook_size;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut initialized = false;

    for epoch in 0..config.epochs {
        let lr = annealed_lr(config.learning_rate, epoch, config.epochs);
        order.shuffle(&mut rng);
        let mut usage = vec![0usize; k];
        let mut sums = [0.0; 4];
        let mut last_embeddings = Tensor::zeros(vec![0, config.embedding_dim]);
        for chunk in order.chunks(config.batch_size) {
            let batch = dataset.batch(chunk);
            if !initialized {
                let emb = model.embed(&batch.states, &batch.actions)?;
                init_codebook_from(&mut model, &emb, &mut rng);
                initialized = true;
            }
            let (loss, codes, emb) = model.train_step(&batch.states, &batch.actions, lr)?;
            let w = chunk.len() as f64;
            sums[0] += w * loss.total;
            sums[1] += w * loss.reconstruction;
            sums[2] += w * loss.codebook;
            sums[3] += w * loss.commitment;
            for c in codes {
                usage[c] += 1;
            }
            last_embeddings = emb;
        }
        let n = dataset.len() as f64;
        let dead = usage.iter().filter(|&&u| u == 0).count();
        let reseeded = if (epoch + 1) % config.dead_code_period == 0 && epoch + 1 < config.epochs {
            reseed_dead_codes(&mut model, &usage, &last_embeddings, &mut rng)
        } else {
            0
        };
        trace.push(vec![
            epoch as f64,
            sums[0] / n,
            sums[1] / n,
            sums[2] / n,
            sums[3] / n,
            (k - dead) as f64,
            dead as f64,
            reseeded as f64,
        ]);
    }
    Ok((model, trace))
}

/// Replaces each continuous action by its code; everything else is kept.
pub fn quantize_dataset(dataset: &TransitionDataset, model: &QuantizerModel) -> Result<DiscreteTransitionDataset> {
    if dataset.meta.state_dim != model.state_dim() {
        return Err(SaqError::Dimension {
            what: "dataset state",
            expected: model.state_dim(),
            got: dataset.meta.state_dim,
        });
    }
    if dataset.meta.action_dim != model.action_dim() {
        return Err(SaqError::Dimension {
            what: "dataset action",
            expected: model.action_dim(),
            got: dataset.meta.action_dim,
        });
    }
    let mut out = DiscreteTransitionDataset::new(dataset.meta.clone(), model.codebook_size());
    if dataset.is_empty() {
        return Ok(out);
    }
    let codes = model.encode_batch(&dataset.states(), &dataset.actions())?;
    for (t, code) in dataset.transitions().iter().zip(codes) {
        out.push(DiscreteTransition {
            state: t.state.clone(),
            action: t.action.clone(),
            code,
            reward: t.reward,
            next_state: t.next_state.clone(),
            terminal: t.terminal,
        })?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utilization {
    pub histogram: Vec<usize>,
    pub dead: usize,
}

impl Utilization {
    pub fn live(&self) -> usize {
        self.histogram.len() - self.dead
    }
}

/// Code occupancy over a discrete dataset.
pub fn codebook_utilization(dataset: &DiscreteTransitionDataset) -> Utilization {
    let mut histogram = vec![0; dataset.codebook_size];
    for t in dataset.transitions() {
        histogram[t.code] += 1;
    }
    let dead = histogram.iter().filter(|&&c| c == 0).count();
    Utilization { histogram, dead }
}
