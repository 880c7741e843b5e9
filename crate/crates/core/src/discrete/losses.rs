//! Losses over discrete codes. Every expectation over the `K` codes is an
//! exact sum; nothing here samples except the optional CQL backup.
//!
//! Each loss exists twice: a tape builder used during training, and a
//! value-level wrapper over Q/logit tables used by tests and diagnostics.
//! The wrappers call the builders, so both paths share one formula.

use rand::Rng;
use saq_autodiff::{logsumexp, softmax, Tape, Tensor, Var};

use crate::error::{Result, SaqError};

/// Floor applied to behavior log-probabilities.
pub const LOG_PROB_FLOOR: f64 = -30.0;

fn check_codes(q: &Tensor, codes: &[usize]) -> Result<()> {
    if q.shape().len() != 2 || q.rows() != codes.len() {
        return Err(SaqError::Dimension {
            what: "codes per Q row",
            expected: q.rows(),
            got: codes.len(),
        });
    }
    let k = q.cols();
    if let Some(&code) = codes.iter().find(|&&c| c >= k) {
        return Err(SaqError::CodeOutOfRange { code, k });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct CqlVars {
    pub total: Var,
    pub bellman: Var,
    pub penalty: Var,
}

/// `bellman = ½·mean (Q(s,â) − y)²`, `penalty = mean [lse Q(s,·) − Q(s,â)]`.
pub(crate) fn cql_terms(tape: &mut Tape, q_s: Var, codes: &[usize], targets: &[f64], alpha: f64) -> Result<CqlVars> {
    let q_sa = tape.gather(q_s, codes)?;
    let y = tape.constant(Tensor::vector(targets.to_vec()));
    let d = tape.sub(q_sa, y)?;
    let d = tape.square(d);
    let d = tape.mean(d);
    let bellman = tape.scale(d, 0.5);
    let lse = tape.logsumexp(q_s);
    let gap = tape.sub(lse, q_sa)?;
    let penalty = tape.mean(gap);
    let weighted = tape.scale(penalty, alpha);
    let total = tape.add(bellman, weighted)?;
    Ok(CqlVars { total, bellman, penalty })
}

pub(crate) fn bc_term(tape: &mut Tape, logits: Var, codes: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits);
    let picked = tape.gather(lp, codes)?;
    let m = tape.mean(picked);
    Ok(tape.neg(m))
}

/// Plain mean squared TD error `mean (Q(s,â) − y)²`.
pub(crate) fn td_term(tape: &mut Tape, q_s: Var, codes: &[usize], targets: &[f64]) -> Result<Var> {
    let q_sa = tape.gather(q_s, codes)?;
    let y = tape.constant(Tensor::vector(targets.to_vec()));
    let d = tape.sub(q_sa, y)?;
    let d = tape.square(d);
    Ok(tape.mean(d))
}

/// Expectile regression of `v` (shape `[n]`) toward fixed `q_hat`.
pub(crate) fn expectile_term(tape: &mut Tape, v: Var, q_hat: &[f64], tau: f64) -> Result<Var> {
    let target = tape.constant(Tensor::vector(q_hat.to_vec()));
    let u = tape.sub(target, v)?;
    let weights: Vec<f64> = tape
        .value(u)
        .data()
        .iter()
        .map(|&u| if u < 0.0 { 1.0 - tau } else { tau })
        .collect();
    let w = tape.constant(Tensor::vector(weights));
    let sq = tape.square(u);
    let wsq = tape.mul(w, sq)?;
    Ok(tape.mean(wsq))
}

/// `−mean Σ_i π(i|s)·[Q(s,i) + β log π̂_β(i|s) − α_ent log π(i|s)]`.
pub(crate) fn brac_policy_term(
    tape: &mut Tape,
    logits: Var,
    q: &Tensor,
    log_behavior: &Tensor,
    beta: f64,
    alpha_ent: f64,
) -> Result<Var> {
    let p = tape.softmax(logits);
    let lp = tape.log_softmax(logits);
    let inner: Vec<f64> = q.data().iter().zip(log_behavior.data()).map(|(q, lb)| q + beta * lb).collect();
    let inner = tape.constant(Tensor::new(q.shape().to_vec(), inner)?);
    let ent = tape.scale(lp, alpha_ent);
    let inner = tape.sub(inner, ent)?;
    let prod = tape.mul(p, inner)?;
    let per_state = tape.sum_last(prod);
    let m = tape.mean(per_state);
    Ok(tape.neg(m))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CqlLoss {
    pub total: f64,
    pub bellman: f64,
    pub penalty: f64,
}

/// How `â′` is chosen for the CQL backup.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backup {
    /// One code sampled from `softmax(Q_θ(s′))`.
    Sampled,
    /// Exact expectation of `Q̄(s′,·)` under `softmax(Q_θ(s′))`.
    Expected,
}

impl std::str::FromStr for Backup {
    type Err = SaqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampled" => Ok(Backup::Sampled),
            "expected" => Ok(Backup::Expected),
            other => Err(SaqError::InvalidConfig(format!("unknown backup '{other}'"))),
        }
    }
}

impl Backup {
    pub fn name(self) -> &'static str {
        match self {
            Backup::Sampled => "sampled",
            Backup::Expected => "expected",
        }
    }
}

/// Backup targets `r + γ(1−d)·Q̄(s′,â′)`.
pub fn cql_targets<R: Rng + ?Sized>(
    q_next: &Tensor,
    target_next: &Tensor,
    rewards: &[f64],
    terminals: &[bool],
    gamma: f64,
    backup: Backup,
    rng: &mut R,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(rewards.len());
    for i in 0..rewards.len() {
        let probs = softmax(q_next.row(i));
        let tq = target_next.row(i);
        let next = match backup {
            Backup::Sampled => tq[sample_index(&probs, rng)],
            Backup::Expected => probs.iter().zip(tq).map(|(p, q)| p * q).sum(),
        };
        let cont = if terminals[i] { 0.0 } else { 1.0 };
        out.push(rewards[i] + gamma * cont * next);
    }
    out
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// CQL objective on a Q table `[n, K]` with precomputed backup targets.
pub fn cql_loss(q: &Tensor, codes: &[usize], targets: &[f64], alpha: f64) -> Result<CqlLoss> {
    check_codes(q, codes)?;
    let mut tape = Tape::new();
    let q_s = tape.constant(q.clone());
    let v = cql_terms(&mut tape, q_s, codes, targets, alpha)?;
    Ok(CqlLoss {
        total: tape.value(v.total).item(),
        bellman: tape.value(v.bellman).item(),
        penalty: tape.value(v.penalty).item(),
    })
}

/// Conservatism penalty alone: `mean [lse Q(s,·) − Q(s,â)]`.
pub fn cql_penalty(q: &Tensor, codes: &[usize]) -> Result<f64> {
    check_codes(q, codes)?;
    let total: f64 = codes.iter().enumerate().map(|(i, &c)| logsumexp(q.row(i)) - q.row(i)[c]).sum();
    Ok(total / codes.len().max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PenaltyIdentity {
    pub penalty: f64,
    pub nll: f64,
    pub gap: f64,
}

/// Both sides of the penalty / softmax-NLL identity.
pub fn cql_bc_identity(q: &Tensor, codes: &[usize]) -> Result<PenaltyIdentity> {
    let penalty = cql_penalty(q, codes)?;
    let nll = bc_loss(q, codes)?;
    Ok(PenaltyIdentity {
        penalty,
        nll,
        gap: (penalty - nll).abs(),
    })
}

/// Mean negative log softmax probability of the dataset codes.
pub fn bc_loss(logits: &Tensor, codes: &[usize]) -> Result<f64> {
    check_codes(logits, codes)?;
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = bc_term(&mut tape, l, codes)?;
    Ok(tape.value(loss).item())
}

/// `|τ − 1[u<0]|·u²`.
pub fn expectile(u: f64, tau: f64) -> f64 {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    w * u * u
}

/// Mean expectile loss with `u = q_hat − v`.
pub fn iql_value_loss(q_hat: &[f64], v: &[f64], tau: f64) -> Result<f64> {
    if q_hat.len() != v.len() {
        return Err(SaqError::Dimension {
            what: "value batch",
            expected: q_hat.len(),
            got: v.len(),
        });
    }
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::vector(v.to_vec()));
    let loss = expectile_term(&mut tape, v, q_hat, tau)?;
    Ok(tape.value(loss).item())
}

/// IQL TD targets `r + γ·V(s′)·(1−d)`.
pub fn iql_targets(v_next: &[f64], rewards: &[f64], terminals: &[bool], gamma: f64) -> Vec<f64> {
    (0..rewards.len())
        .map(|i| rewards[i] + if terminals[i] { 0.0 } else { gamma * v_next[i] })
        .collect()
}

/// `mean (r + γ·V(s′)·(1−d) − Q(s,â))²`.
pub fn iql_q_loss(q: &Tensor, codes: &[usize], v_next: &[f64], rewards: &[f64], terminals: &[bool], gamma: f64) -> Result<f64> {
    check_codes(q, codes)?;
    let y = iql_targets(v_next, rewards, terminals, gamma);
    let mut tape = Tape::new();
    let q_s = tape.constant(q.clone());
    let loss = td_term(&mut tape, q_s, codes, &y)?;
    Ok(tape.value(loss).item())
}

/// `π*(i) ∝ exp(A_i/λ + log π_β(i))`; codes with zero behavior probability
/// get probability zero.
pub fn iql_closed_form_policy(advantages: &[f64], behavior: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if advantages.len() != behavior.len() || advantages.is_empty() {
        return Err(SaqError::Dimension {
            what: "behavior distribution",
            expected: advantages.len(),
            got: behavior.len(),
        });
    }
    if !(lambda > 0.0) {
        return Err(SaqError::InvalidConfig("lambda must be positive".into()));
    }
    let logits: Vec<f64> = advantages
        .iter()
        .zip(behavior)
        .map(|(a, &b)| if b > 0.0 { a / lambda + b.ln() } else { f64::NEG_INFINITY })
        .collect();
    Ok(softmax_masked(&logits))
}

/// Softmax that tolerates `-inf` entries (they get probability zero).
fn softmax_masked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { (l - max).exp() }).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Same closed form from behavior log-probabilities already floored.
pub(crate) fn iql_policy_from_logs(advantages: &[f64], log_behavior: &[f64], lambda: f64) -> Vec<f64> {
    let logits: Vec<f64> = advantages.iter().zip(log_behavior).map(|(a, lb)| a / lambda + lb).collect();
    softmax(&logits)
}

/// BRAC backup targets
/// `r + γ(1−d)·Σ_i π(i|s′)·[Q̄(s′,i) + β log π̂_β(i|s′)]`.
pub fn brac_targets(
    target_next: &Tensor,
    policy_next: &Tensor,
    log_behavior_next: &Tensor,
    rewards: &[f64],
    terminals: &[bool],
    gamma: f64,
    beta: f64,
) -> Vec<f64> {
    (0..rewards.len())
        .map(|i| {
            let e: f64 = policy_next
                .row(i)
                .iter()
                .zip(target_next.row(i))
                .zip(log_behavior_next.row(i))
                .map(|((p, q), lb)| p * (q + beta * lb))
                .sum();
            rewards[i] + if terminals[i] { 0.0 } else { gamma * e }
        })
        .collect()
}

/// `mean (y − Q(s,â))²` with exact BRAC targets.
#[allow(clippy::too_many_arguments)]
pub fn brac_q_loss(
    q: &Tensor,
    codes: &[usize],
    target_next: &Tensor,
    policy_next: &Tensor,
    log_behavior_next: &Tensor,
    rewards: &[f64],
    terminals: &[bool],
    gamma: f64,
    beta: f64,
) -> Result<f64> {
    check_codes(q, codes)?;
    let y = brac_targets(target_next, policy_next, log_behavior_next, rewards, terminals, gamma, beta);
    let mut tape = Tape::new();
    let q_s = tape.constant(q.clone());
    let loss = td_term(&mut tape, q_s, codes, &y)?;
    Ok(tape.value(loss).item())
}

/// Negated BRAC policy objective, from policy logits `[n, K]`.
pub fn brac_policy_loss(logits: &Tensor, q: &Tensor, log_behavior: &Tensor, beta: f64, alpha_ent: f64) -> Result<f64> {
    if logits.shape() != q.shape() || q.shape() != log_behavior.shape() {
        return Err(SaqError::Dimension {
            what: "policy table",
            expected: q.len(),
            got: logits.len(),
        });
    }
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = brac_policy_term(&mut tape, l, q, log_behavior, beta, alpha_ent)?;
    Ok(tape.value(loss).item())
}

/// `Σ p_i (log p_i − log q_i)`, with `0·log 0 = 0` and `+∞` when `p` puts
/// mass where `q` has none.
pub fn exact_kl(p: &[f64], q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return f64::INFINITY;
            }
            kl += pi * (pi.ln() - qi.ln());
        }
    }
    kl
}

/// Row-wise log-softmax with the floor applied.
pub(crate) fn floored_log_softmax(logits: &Tensor) -> Tensor {
    let k = logits.cols();
    let mut out = Vec::with_capacity(logits.len());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let lse = logsumexp(row);
        out.extend(row.iter().map(|l| (l - lse).max(LOG_PROB_FLOOR)));
    }
    Tensor::matrix(logits.rows(), k, out).expect("finite log-probabilities")
}

pub(crate) fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(logits.len());
    for i in 0..logits.rows() {
        out.extend(softmax(logits.row(i)));
    }
    Tensor::matrix(logits.rows(), logits.cols(), out).expect("finite probabilities")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn uniform_q_penalty_is_log_k() {
        for c in [-3.0, 0.0, 7.5] {
            let q = Tensor::matrix(1, 4, vec![c; 4]).unwrap();
            assert!(close(cql_penalty(&q, &[2]).unwrap(), 4f64.ln(), 1e-12));
        }
    }

    #[test]
    fn one_hot_large_q_penalty_vanishes() {
        let q = Tensor::matrix(1, 3, vec![0.0, 20.0, 0.0]).unwrap();
        let p = cql_penalty(&q, &[1]).unwrap();
        assert!(p > 0.0 && p < 1e-8);
    }

    #[test]
    fn identity_hand_values() {
        let q = Tensor::matrix(1, 2, vec![0.0, 3f64.ln()]).unwrap();
        let id = cql_bc_identity(&q, &[1]).unwrap();
        assert!(close(id.penalty, -(0.75f64).ln(), 1e-12));
        assert!(close(id.nll, 0.287682, 1e-6));
        let q1 = Tensor::matrix(2, 1, vec![4.0, -2.0]).unwrap();
        assert_eq!(cql_penalty(&q1, &[0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn cql_total_combines_terms() {
        let q = Tensor::matrix(2, 3, vec![0.1, 0.5, -0.2, 1.0, 0.0, 0.3]).unwrap();
        let l = cql_loss(&q, &[1, 0], &[0.4, 0.6], 2.0).unwrap();
        let bell = 0.5 * ((0.5f64 - 0.4).powi(2) + (1.0f64 - 0.6).powi(2)) / 2.0;
        assert!(close(l.bellman, bell, 1e-12));
        assert!(close(l.total, l.bellman + 2.0 * l.penalty, 1e-12));
        let l0 = cql_loss(&q, &[1, 0], &[0.4, 0.6], 0.0).unwrap();
        assert_eq!(l0.total, l0.bellman);
    }

    #[test]
    fn out_of_range_code_is_an_error() {
        let q = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(cql_penalty(&q, &[2]), Err(SaqError::CodeOutOfRange { code: 2, k: 2 })));
        assert!(cql_loss(&q, &[5], &[0.0], 1.0).is_err());
    }

    #[test]
    fn terminal_targets_ignore_next_state() {
        let qn = Tensor::matrix(2, 2, vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = cql_targets(&qn, &qn, &[1.0, 1.0], &[true, false], 0.5, Backup::Sampled, &mut rng);
        assert_eq!(y, vec![1.0, 3.5]);
        let y = cql_targets(&qn, &qn, &[1.0, 1.0], &[true, false], 0.5, Backup::Expected, &mut rng);
        assert_eq!(y, vec![1.0, 3.5]);
    }

    #[test]
    fn expectile_hand_values() {
        assert_eq!(expectile(2.0, 0.5), 2.0);
        assert!(close(expectile(-1.0, 0.9), 0.1, 1e-12));
        assert!(close(expectile(1.0, 0.9), 0.9, 1e-12));
        let q = [1.0, -2.0, 0.5];
        let v = [0.0, 0.0, 1.0];
        let half_mse = q.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 3.0 * 0.5;
        assert!(close(iql_value_loss(&q, &v, 0.5).unwrap(), half_mse, 1e-12));
    }

    #[test]
    fn iql_q_loss_cases() {
        let q = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(iql_q_loss(&q, &[1], &[9.0], &[1.0], &[true], 0.9).unwrap(), 0.0);
        let q = Tensor::matrix(2, 2, vec![0.3, 1.0, -0.4, 0.2]).unwrap();
        let r = [1.0, 0.5];
        let base = iql_q_loss(&q, &[0, 1], &[0.0, 0.0], &r, &[false, false], 0.9).unwrap();
        let direct = ((1.0f64 - 0.3).powi(2) + (0.5f64 - 0.2).powi(2)) / 2.0;
        assert!(close(base, direct, 1e-12));
        let g0 = iql_q_loss(&q, &[0, 1], &[4.0, -3.0], &r, &[false, false], 0.0).unwrap();
        assert_eq!(g0, base);
    }

    #[test]
    fn closed_form_policy_cases() {
        let p = iql_closed_form_policy(&[1.0, 0.0], &[0.5, 0.5], 1.0).unwrap();
        assert!(close(p[0], 0.731059, 1e-6) && close(p[1], 0.268941, 1e-6));
        let beh = [0.1, 0.6, 0.3];
        let p = iql_closed_form_policy(&[3.0, -1.0, 0.5], &beh, 1e6).unwrap();
        let tv: f64 = p.iter().zip(&beh).map(|(a, b)| (a - b).abs()).sum::<f64>() * 0.5;
        assert!(tv < 1e-5);
        let p = iql_closed_form_policy(&[10.0, 0.0], &[0.0, 1.0], 1.0).unwrap();
        assert_eq!(p, vec![0.0, 1.0]);
    }

    #[test]
    fn brac_target_hand_value() {
        let u = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let lb = Tensor::matrix(1, 2, vec![0.5f64.ln(); 2]).unwrap();
        let z = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let y = brac_targets(&z, &u, &lb, &[0.0], &[false], 0.9, 2.0);
        assert!(close(y[0], 0.9 * 2.0 * 0.5f64.ln(), 1e-12));
        let q = Tensor::matrix(1, 2, vec![0.3, -0.1]).unwrap();
        let l = brac_q_loss(&q, &[0], &z, &u, &lb, &[0.0], &[false], 0.9, 2.0).unwrap();
        assert!(close(l, (y[0] - 0.3).powi(2), 1e-12));
    }

    #[test]
    fn brac_policy_entropy_case() {
        let q = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        let lb = Tensor::matrix(1, 3, vec![(1.0f64 / 3.0).ln(); 3]).unwrap();
        let logits = Tensor::matrix(1, 3, vec![0.2, -0.7, 1.1]).unwrap();
        let p = softmax(logits.row(0));
        let h: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        let l = brac_policy_loss(&logits, &q, &lb, 0.0, 0.1).unwrap();
        assert!(close(l, -0.1 * h, 1e-12));
        let uniform = brac_policy_loss(&Tensor::matrix(1, 3, vec![0.0; 3]).unwrap(), &q, &lb, 0.0, 0.1).unwrap();
        assert!(uniform < l);
    }

    #[test]
    fn kl_cases() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(exact_kl(&p, &p), 0.0);
        assert!(close(exact_kl(&[1.0, 0.0], &[0.5, 0.5]), 2f64.ln(), 1e-12));
        assert_eq!(exact_kl(&[0.5, 0.5], &[1.0, 0.0]), f64::INFINITY);
    }

    #[test]
    fn bc_uniform_logits() {
        let l = Tensor::matrix(2, 8, vec![0.0; 16]).unwrap();
        assert!(close(bc_loss(&l, &[3, 7]).unwrap(), 8f64.ln(), 1e-12));
    }

    #[test]
    fn sampling_follows_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = [0.2, 0.0, 0.8];
        let mut counts = [0; 3];
        for _ in 0..20_000 {
            counts[sample_index(&p, &mut rng)] += 1;
        }
        assert_eq!(counts[1], 0);
        assert!((counts[0] as f64 / 20_000.0 - 0.2).abs() < 0.02);
    }
}
