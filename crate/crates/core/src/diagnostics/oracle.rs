//! Numeric solver for `max_π E_π[A]` subject to `KL(π ‖ π_β) ≤ ε` on the
//! simplex, independent of the closed form it is checked against.

use saq_autodiff::logsumexp;

use crate::discrete::exact_kl;

/// Base step; the solver uses `MIRROR_STEP · max(1, 1/λ)`.
pub const MIRROR_STEP: f64 = 0.05;
pub const MIRROR_ITERATIONS: usize = 10_000;
pub const KL_TOLERANCE: f64 = 1e-6;
const MULTIPLIER_RANGE: (f64, f64) = (1e-3, 20.0);
const MAX_BISECTIONS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSolution {
    pub policy: Vec<f64>,
    /// KL multiplier at the solution: `0` when the constraint is slack,
    /// `+inf` when `ε = 0`.
    pub multiplier: f64,
    pub kl: f64,
    pub converged: bool,
}

/// Mirror ascent on `E_π[A] - λ KL(π ‖ π_β)` from `π_β`, in log space.
/// Each step contracts the distance to the maximizer by `1 - step·λ`.
/// Codes with zero behavior probability stay at zero.
pub fn mirror_ascent(advantages: &[f64], behavior: &[f64], lambda: f64, step: f64, iterations: usize) -> Vec<f64> {
    let log_b: Vec<f64> = behavior.iter().map(|&b| if b > 0.0 { b.ln() } else { f64::NEG_INFINITY }).collect();
    let mut log_p = log_b.clone();
    let support: Vec<usize> = (0..behavior.len()).filter(|&i| behavior[i] > 0.0).collect();
    let mut buf = vec![0.0; support.len()];
    for _ in 0..iterations {
        for (slot, &i) in buf.iter_mut().zip(&support) {
            let grad = advantages[i] - lambda * (log_p[i] - log_b[i] + 1.0);
            *slot = log_p[i] + step * grad;
        }
        let z = logsumexp(&buf);
        for (v, &i) in buf.iter().zip(&support) {
            log_p[i] = v - z;
        }
    }
    log_p.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() }).collect()
}

/// Solves the KL-constrained advantage maximization. The slack case is
/// detected by checking the best vertex for feasibility; otherwise the
/// multiplier is bisected (in log space) until the penalized solution's KL
/// meets `epsilon` within [`KL_TOLERANCE`].
pub fn solve_kl_constrained(advantages: &[f64], behavior: &[f64], epsilon: f64) -> OracleSolution {
    if epsilon <= 0.0 {
        return OracleSolution {
            policy: behavior.to_vec(),
            multiplier: f64::INFINITY,
            kl: 0.0,
            converged: true,
        };
    }
    let best = (0..behavior.len())
        .filter(|&i| behavior[i] > 0.0)
        .fold(None::<usize>, |acc, i| match acc {
            Some(j) if advantages[j] >= advantages[i] => Some(j),
            _ => Some(i),
        })
        .expect("behavior has support");
    if -behavior[best].ln() <= epsilon {
        let mut policy = vec![0.0; behavior.len()];
        policy[best] = 1.0;
        return OracleSolution {
            kl: exact_kl(&policy, behavior),
            policy,
            multiplier: 0.0,
            converged: true,
        };
    }
    let kl_at = |lambda: f64| {
        let step = MIRROR_STEP * (1.0 / lambda).max(1.0);
        let p = mirror_ascent(advantages, behavior, lambda, step, MIRROR_ITERATIONS);
        let kl = exact_kl(&p, behavior);
        (p, kl)
    };
    let (mut lo, mut hi) = (MULTIPLIER_RANGE.0.ln(), MULTIPLIER_RANGE.1.ln());
    let mut best_sol = None;
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let lambda = mid.exp();
        let (p, kl) = kl_at(lambda);
        let done = (kl - epsilon).abs() <= KL_TOLERANCE;
        // KL shrinks as the multiplier grows.
        if kl > epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
        best_sol = Some(OracleSolution {
            policy: p,
            multiplier: lambda,
            kl,
            converged: done,
        });
        if done || hi - lo < 1e-15 {
            break;
        }
    }
    best_sol.expect("at least one bisection step")
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_budget_returns_behavior() {
        let b = [0.2, 0.5, 0.3];
        let s = solve_kl_constrained(&[1.0, -1.0, 0.0], &b, 0.0);
        assert_eq!(s.policy, b.to_vec());
        assert!(s.multiplier.is_infinite());
    }

    #[test]
    fn slack_budget_returns_best_vertex() {
        let s = solve_kl_constrained(&[0.1, 0.9, 0.3], &[0.3, 0.3, 0.4], f64::INFINITY);
        assert_eq!(s.policy, vec![0.0, 1.0, 0.0]);
        assert_eq!(s.multiplier, 0.0);
    }

    #[test]
    fn binding_budget_is_met() {
        let b = [0.25, 0.25, 0.25, 0.25];
        let s = solve_kl_constrained(&[1.0, 0.0, -0.5, 0.2], &b, 0.1);
        assert!(s.converged);
        assert!((s.kl - 0.1).abs() <= KL_TOLERANCE);
        assert!(s.policy[0] > s.policy[3] && s.policy[3] > s.policy[1]);
    }

    #[test]
    fn mirror_ascent_keeps_zero_mass_codes_at_zero() {
        let p = mirror_ascent(&[5.0, 0.0, 1.0], &[0.0, 0.5, 0.5], 1.0, MIRROR_STEP, 500);
        assert_eq!(p[0], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
