//! Central finite-difference gradient checking.
//!
//! Only forward values are used to form the numeric estimate, so the check is
//! independent of every backward rule it audits.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest mismatch found by [`check_gradients`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// Whether every coordinate met `rel < rel_tol` or `abs < abs_floor`.
    pub passed: bool,
}

/// Compares analytic gradients of a scalar function against central
/// differences with step `h`, coordinate by coordinate.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64, rel_tol: f64, abs_floor: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheck {
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        passed: true,
    };
    let mut probe = inputs.to_vec();
    for (i, &var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        for j in 0..inputs[i].len() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            report.max_abs_error = report.max_abs_error.max(abs);
            if abs > abs_floor {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= rel_tol {
                    report.passed = false;
                }
            }
        }
    }
    Ok(report)
}

/// Tolerances used for the primitive catalog.
pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-6;

/// One differentiable primitive with a random instance generator.
pub struct OpCase {
    pub name: &'static str,
    run: fn(&mut dyn rand::RngCore) -> Result<GradCheck>,
}

impl OpCase {
    /// Draws one random instance and checks it.
    pub fn check(&self, rng: &mut dyn rand::RngCore) -> Result<GradCheck> {
        (self.run)(rng)
    }
}

fn uniform(rng: &mut dyn rand::RngCore, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    use rand::Rng;
    let n = shape.iter().product();
    Tensor::raw(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Uniform values kept at least `gap` away from every point in `kinks`.
fn away_from(rng: &mut dyn rand::RngCore, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor {
    use rand::Rng;
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::raw(shape.to_vec(), data)
}

fn dims(rng: &mut dyn rand::RngCore) -> (usize, usize) {
    use rand::Rng;
    (rng.gen_range(1..5), rng.gen_range(1..6))
}

/// Reduces an arbitrary-shape output to a scalar with fixed random weights so
/// every output coordinate carries a distinct sensitivity.
fn weighted(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.reshape(tape.shape(y).to_vec())?);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check(inputs: Vec<Tensor>, out_len: usize, rng: &mut dyn rand::RngCore, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<GradCheck> {
    let w = uniform(rng, &[out_len], -1.0, 1.0);
    check_gradients(
        |t, v| {
            let y = f(t, v)?;
            weighted(t, y, &w)
        },
        &inputs,
        FD_STEP,
        REL_TOL,
        ABS_FLOOR,
    )
}

macro_rules! case {
    ($name:expr, $body:expr) => {
        OpCase {
            name: $name,
            run: $body,
        }
    };
}

/// Every differentiable primitive of the engine plus a small network.
pub fn primitive_catalog() -> Vec<OpCase> {
    vec![
        case!("matmul", |rng| {
            use rand::Rng;
            let (m, k) = dims(rng);
            let n = rng.gen_range(1..5);
            let a = uniform(rng, &[m, k], -1.0, 1.0);
            let b = uniform(rng, &[k, n], -1.0, 1.0);
            check(vec![a, b], m * n, rng, |t, v| t.matmul(v[0], v[1]))
        }),
        case!("add_row_broadcast", |rng| {
            let (r, c) = dims(rng);
            let a = uniform(rng, &[r, c], -2.0, 2.0);
            let b = uniform(rng, &[c], -2.0, 2.0);
            check(vec![a, b], r * c, rng, |t, v| t.add(v[0], v[1]))
        }),
        case!("sub_column_broadcast", |rng| {
            let (r, c) = dims(rng);
            let a = uniform(rng, &[r, c], -2.0, 2.0);
            let b = uniform(rng, &[r, 1], -2.0, 2.0);
            check(vec![a, b], r * c, rng, |t, v| t.sub(v[0], v[1]))
        }),
        case!("mul", |rng| {
            let (r, c) = dims(rng);
            let a = uniform(rng, &[r, c], -2.0, 2.0);
            let b = uniform(rng, &[r, c], -2.0, 2.0);
            check(vec![a, b], r * c, rng, |t, v| t.mul(v[0], v[1]))
        }),
        case!("mul_scalar_broadcast", |rng| {
            let (r, c) = dims(rng);
            let a = uniform(rng, &[r, c], -2.0, 2.0);
            let b = uniform(rng, &[], -2.0, 2.0);
            check(vec![a, b], r * c, rng, |t, v| t.mul(v[0], v[1]))
        }),
        case!("scale", |rng| {
            let (r, c) = dims(rng);
            let a = uniform(rng, &[r, c], -2.0, 2.0);
            check(vec![a], r * c, rng, |t, v| Ok(t.scale(v[0], -1.7)))
        }),
        case!("add_scalar", |rng| {
            let (r, c) = dims(rng);
            let a = uniform(rng, &[r, c], -2.0, 2.0);
            check(vec![a], r * c, rng, |t, v| Ok(t.add_scalar(v[0], 0.3)))
        }),
        case!("tanh", |rng| {
            let (r, c) = dims(rng);
            let a = uniform(rng, &[r, c], -3.0, 3.0);
            check(vec![a], r * c, rng, |t, v| Ok(t.tanh(v[0])))
        }),
        case!("relu", |rng| {
            let (r, c) = dims(rng);
            let a = away_from(rng, &[r, c], -2.0, 2.0, &[0.0], 1e-3);
            check(vec![a], r * c, rng, |t, v| Ok(t.relu(v[0])))
        }),
        case!("exp", |rng| {
            let (r, c) = dims(rng);
            let a = uniform(rng, &[r, c], -3.0, 3.0);
            check(vec![a], r * c, rng, |t, v| Ok(t.exp(v[0])))
        }),
        case!("log", |rng| {
            let (r, c) = dims(rng);
            let a = uniform(rng, &[r, c], 0.1, 5.0);
            check(vec![a], r * c, rng, |t, v| Ok(t.log(v[0])))
        }),
        case!("square", |rng| {
            let (r, c) = dims(rng);
            let a = uniform(rng, &[r, c], -3.0, 3.0);
            check(vec![a], r * c, rng, |t, v| Ok(t.square(v[0])))
        }),
        case!("clamp", |rng| {
            let (r, c) = dims(rng);
            let a = away_from(rng, &[r, c], -3.0, 3.0, &[-1.0, 1.5], 1e-3);
            check(vec![a], r * c, rng, |t, v| Ok(t.clamp(v[0], -1.0, 1.5)))
        }),
        case!("softmax", |rng| {
            let (r, c) = dims(rng);
            let a = uniform(rng, &[r, c], -3.0, 3.0);
            check(vec![a], r * c, rng, |t, v| Ok(t.softmax(v[0])))
        }),
        case!("log_softmax", |rng| {
            let (r, c) = dims(rng);
            let a = uniform(rng, &[r, c], -3.0, 3.0);
            check(vec![a], r * c, rng, |t, v| Ok(t.log_softmax(v[0])))
        }),
        case!("logsumexp", |rng| {
            let (r, c) = dims(rng);
            let a = uniform(rng, &[r, c], -3.0, 3.0);
            check(vec![a], r, rng, |t, v| Ok(t.logsumexp(v[0])))
        }),
        case!("gather", |rng| {
            use rand::Rng;
            let (r, c) = dims(rng);
            let a = uniform(rng, &[r, c], -3.0, 3.0);
            let idx: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
            check(vec![a], r, rng, move |t, v| t.gather(v[0], &idx))
        }),
        case!("select_rows", |rng| {
            use rand::Rng;
            let (r, c) = dims(rng);
            let n = rng.gen_range(1..6);
            let a = uniform(rng, &[r, c], -3.0, 3.0);
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..r)).collect();
            check(vec![a], n * c, rng, move |t, v| t.select_rows(v[0], &idx))
        }),
        case!("concat", |rng| {
            let (r, c) = dims(rng);
            let (_, c2) = dims(rng);
            let a = uniform(rng, &[r, c], -3.0, 3.0);
            let b = uniform(rng, &[r, c2], -3.0, 3.0);
            check(vec![a, b], r * (c + c2), rng, |t, v| t.concat(v[0], v[1]))
        }),
        case!("reshape", |rng| {
            let (r, c) = dims(rng);
            let a = uniform(rng, &[r, c], -3.0, 3.0);
            check(vec![a], r * c, rng, move |t, v| t.reshape(v[0], vec![r * c]))
        }),
        case!("sum", |rng| {
            let (r, c) = dims(rng);
            let a = uniform(rng, &[r, c], -3.0, 3.0);
            check(vec![a], 1, rng, |t, v| Ok(t.sum(v[0])))
        }),
        case!("mean", |rng| {
            let (r, c) = dims(rng);
            let a = uniform(rng, &[r, c], -3.0, 3.0);
            check(vec![a], 1, rng, |t, v| Ok(t.mean(v[0])))
        }),
        case!("sum_last", |rng| {
            let (r, c) = dims(rng);
            let a = uniform(rng, &[r, c], -3.0, 3.0);
            check(vec![a], r, rng, |t, v| Ok(t.sum_last(v[0])))
        }),
        case!("sq_norm", |rng| {
            let (r, c) = dims(rng);
            let a = uniform(rng, &[r, c], -3.0, 3.0);
            check(vec![a], r, rng, |t, v| Ok(t.sq_norm(v[0])))
        }),
        case!("mse", |rng| {
            let (r, c) = dims(rng);
            let a = uniform(rng, &[r, c], -3.0, 3.0);
            let b = uniform(rng, &[r, c], -3.0, 3.0);
            check(vec![a, b], 1, rng, |t, v| t.mse(v[0], v[1]))
        }),
        case!("two_layer_network", |rng| {
            use rand::Rng;
            let (n, d) = dims(rng);
            let h = rng.gen_range(2..6);
            let o = rng.gen_range(1..4);
            let x = uniform(rng, &[n, d], -1.0, 1.0);
            let w0 = uniform(rng, &[d, h], -1.0, 1.0);
            let b0 = uniform(rng, &[h], -0.5, 0.5);
            let w1 = uniform(rng, &[h, o], -1.0, 1.0);
            let b1 = uniform(rng, &[o], -0.5, 0.5);
            check(vec![x, w0, b0, w1, b1], n * o, rng, |t, v| {
                let z = t.matmul(v[0], v[1])?;
                let z = t.add(z, v[2])?;
                let z = t.tanh(z);
                let z = t.matmul(z, v[3])?;
                t.add(z, v[4])
            })
        }),
    ]
}
