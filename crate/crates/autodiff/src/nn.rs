use rand::Rng;

use crate::error::{AutodiffError, Result};
use crate::params::ParameterSet;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// Fully connected network with a linear output layer.
///
/// Parameters are stored as `w0, b0, w1, b1, ...` with weights shaped
/// `[fan_in, fan_out]` so a batch `[n, fan_in]` multiplies on the left.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub params: ParameterSet,
    sizes: Vec<usize>,
    activation: Activation,
}

impl Mlp {
    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an Mlp needs input and output sizes");
        let mut params = ParameterSet::new();
        for (layer, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            params.insert(format!("w{layer}"), Tensor::raw(vec![fan_in, fan_out], w));
            params.insert(format!("b{layer}"), Tensor::zeros(vec![fan_out]));
        }
        Self {
            params,
            sizes: sizes.to_vec(),
            activation,
        }
    }

    /// Rebuilds a network from its parameter tensors in declaration order.
    pub fn from_tensors(tensors: Vec<Tensor>, activation: Activation) -> Result<Self> {
        if tensors.is_empty() || !tensors.len().is_multiple_of(2) {
            return Err(AutodiffError::GradientCount {
                expected: 2,
                got: tensors.len(),
            });
        }
        let mut sizes = vec![tensors[0].shape().first().copied().unwrap_or(0)];
        let mut params = ParameterSet::new();
        for (layer, pair) in tensors.chunks(2).enumerate() {
            let (w, b) = (&pair[0], &pair[1]);
            let fan_in = *sizes.last().unwrap();
            if w.shape().len() != 2 || w.shape()[0] != fan_in || b.shape() != [w.shape()[1]] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "mlp layer",
                    lhs: w.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            sizes.push(w.shape()[1]);
            params.insert(format!("w{layer}"), w.clone());
            params.insert(format!("b{layer}"), b.clone());
        }
        Ok(Self {
            params,
            sizes,
            activation,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.bind(tape)
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.bind_frozen(tape)
    }

    /// Forward pass of a `[n, input_dim]` batch using bound parameters.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        let layers = bound.len() / 2;
        let mut h = x;
        for layer in 0..layers {
            let z = tape.matmul(h, bound[2 * layer])?;
            h = tape.add(z, bound[2 * layer + 1])?;
            if layer + 1 < layers {
                h = self.activation.apply(tape, h);
            }
        }
        Ok(h)
    }

    /// Forward pass without recording gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let cols = x.cols();
        if cols != self.input_dim() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mlp input",
                lhs: x.shape().to_vec(),
                rhs: vec![self.input_dim()],
            });
        }
        let rows = x.rows();
        let mut h = x.data().to_vec();
        let layers = self.sizes.len() - 1;
        for layer in 0..layers {
            let w = self.params.tensor(2 * layer);
            let b = self.params.tensor(2 * layer + 1);
            let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
            let mut z = crate::tape::matmul_raw(&h, w.data(), rows, fan_in, fan_out);
            for row in z.chunks_mut(fan_out.max(1)) {
                for (v, bias) in row.iter_mut().zip(b.data()) {
                    *v += bias;
                    if layer + 1 < layers {
                        *v = match self.activation {
                            Activation::Tanh => v.tanh(),
                            Activation::Relu => v.max(0.0),
                        };
                    }
                }
            }
            h = z;
        }
        Ok(Tensor::raw(vec![rows, self.output_dim()], h))
    }

    /// Applies one Adam step from the gradients of previously bound parameters.
    pub fn apply_gradients(
        &mut self,
        grads: &crate::tape::Gradients,
        bound: &[Var],
        lr: f64,
    ) -> Result<()> {
        let g = self.params.collect(grads, bound);
        self.params.adam_step(&g, lr)
    }

    /// Copies parameter values from a network of the same architecture.
    pub fn copy_from(&mut self, other: &Mlp) {
        self.params.copy_values_from(&other.params);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&[16, 8, 3], Activation::Tanh, &mut rng);
        let w0 = mlp.params.tensor(0);
        assert!(w0.data().iter().all(|v| v.abs() <= 0.25));
        assert!(mlp.params.tensor(1).data().iter().all(|&v| v == 0.0));
        assert_eq!(mlp.params.numel(), 16 * 8 + 8 + 8 * 3 + 3);
    }

    #[test]
    fn predict_matches_taped_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for act in [Activation::Tanh, Activation::Relu] {
            let mlp = Mlp::new(&[3, 5, 2], act, &mut rng);
            let x = Tensor::matrix(2, 3, vec![0.1, -0.4, 0.9, 1.5, 0.0, -2.0]).unwrap();
            let mut tape = Tape::new();
            let bound = mlp.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let y = mlp.forward(&mut tape, &bound, xv).unwrap();
            assert_eq!(tape.value(y), &mlp.predict(&x).unwrap());
        }
    }

    #[test]
    fn round_trips_through_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(&[4, 6, 6, 1], Activation::Relu, &mut rng);
        let rebuilt = Mlp::from_tensors(mlp.params.tensors().cloned().collect(), Activation::Relu).unwrap();
        assert_eq!(rebuilt.sizes(), mlp.sizes());
        assert_eq!(rebuilt.params.tensors().collect::<Vec<_>>(), mlp.params.tensors().collect::<Vec<_>>());
    }
}
