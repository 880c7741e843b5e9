use crate::error::{AutodiffError, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

/// Named trainable tensors plus the Adam state that goes with them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    entries: Vec<Entry>,
    step: u64,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter. Declaration order is the serialization order.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let n = value.len();
        self.entries.push(Entry {
            name: name.into(),
            value,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.entries[index].value
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].value
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|e| &e.value)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Puts every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries.iter().map(|e| tape.leaf(e.value.clone())).collect()
    }

    /// Puts every parameter on the tape as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| tape.constant(e.value.clone()))
            .collect()
    }

    /// Pulls the gradients for previously bound parameters.
    pub fn collect(&self, grads: &Gradients, bound: &[Var]) -> Vec<Tensor> {
        bound.iter().map(|&v| grads.wrt(v)).collect()
    }

    /// One Adam update with bias correction.
    pub fn adam_step(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.entries.len() {
            return Err(AutodiffError::GradientCount {
                expected: self.entries.len(),
                got: grads.len(),
            });
        }
        for (e, g) in self.entries.iter().zip(grads) {
            if e.value.shape() != g.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    lhs: e.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (e, g) in self.entries.iter_mut().zip(grads) {
            let values = e.value.data_mut();
            for (((p, m), v), &gi) in values
                .iter_mut()
                .zip(e.first_moment.iter_mut())
                .zip(e.second_moment.iter_mut())
                .zip(g.data())
            {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gi;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }

    /// Copies values from `other` (same layout), leaving optimizer state alone.
    pub fn copy_values_from(&mut self, other: &ParameterSet) {
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            dst.value = src.value.clone();
        }
    }
}
