//! Randomized identity and oracle checks over the exact discrete quantities.

use std::collections::BTreeMap;

use rand::distributions::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use saq_autodiff::Tensor;

use super::oracle::{solve_kl_constrained, total_variation, KL_TOLERANCE, MIRROR_ITERATIONS, MIRROR_STEP};
use super::report::{Cell, ExperimentReport, Relation, SummaryRow, Verdict};
use crate::discrete::{brac_targets, cql_bc_identity, exact_kl, iql_closed_form_policy};
use crate::error::{Result, SaqError};
use crate::metrics::MetricTrace;
use crate::seed::rng_for;

pub const IDENTITY_TOLERANCE: f64 = 1e-12;
pub const ORACLE_TV_TOLERANCE: f64 = 1e-3;
pub const ORACLE_OBJECTIVE_TOLERANCE: f64 = 1e-4;
pub const MC_SAMPLES: usize = 100_000;
pub const MC_SIGMAS: f64 = 3.0;
/// Stand-in multiplier for the closed form's `λ → 0⁺` limit.
const VANISHING_MULTIPLIER: f64 = 1e-12;

fn random_distribution<R: Rng + ?Sized>(k: usize, spread: f64, rng: &mut R) -> Vec<f64> {
    let logits: Vec<f64> = (0..k).map(|_| spread * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>();
    saq_autodiff::softmax(&logits)
}

fn expectation(p: &[f64], values: &[f64]) -> f64 {
    p.iter().zip(values).map(|(a, b)| a * b).sum()
}

/// Closed form evaluated at the oracle's multiplier, including both limits.
fn closed_form_at(advantages: &[f64], behavior: &[f64], multiplier: f64) -> Result<Vec<f64>> {
    let lambda = if multiplier == 0.0 { VANISHING_MULTIPLIER } else { multiplier };
    iql_closed_form_policy(advantages, behavior, lambda)
}

/// Compares the closed-form KL-constrained policy with the numeric oracle on
/// `n_instances` random instances with `2 <= K <= k_max`. Instance 0 has
/// `ε = 0` and instance 1 has `ε = ∞`.
pub fn run_iql_oracle_check(n_instances: usize, k_max: usize, seed: u64) -> Result<ExperimentReport> {
    if n_instances < 100 {
        return Err(SaqError::InvalidConfig(format!("need at least 100 instances, got {n_instances}")));
    }
    if k_max < 2 {
        return Err(SaqError::InvalidConfig("k_max must be at least 2".into()));
    }
    let mut rng = rng_for(seed, "iql-oracle");
    let mut trace = MetricTrace::new(&[
        "instance",
        "k",
        "epsilon",
        "multiplier",
        "oracle_kl",
        "tv_gap",
        "objective_gap",
        "converged",
    ]);
    for i in 0..n_instances {
        let k = rng.gen_range(2..=k_max);
        let adv: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let behavior = random_distribution(k, 1.0, &mut rng);
        let epsilon = match i {
            0 => 0.0,
            1 => f64::INFINITY,
            _ => {
                let best = (0..k).fold(0, |j, m| if adv[m] > adv[j] { m } else { j });
                rng.gen_range(0.05..0.8) * -behavior[best].ln()
            }
        };
        let sol = solve_kl_constrained(&adv, &behavior, epsilon);
        let closed = closed_form_at(&adv, &behavior, sol.multiplier)?;
        trace.push(vec![
            i as f64,
            k as f64,
            epsilon,
            sol.multiplier,
            sol.kl,
            total_variation(&sol.policy, &closed),
            (expectation(&sol.policy, &adv) - expectation(&closed, &adv)).abs(),
            if sol.converged { 1.0 } else { 0.0 },
        ]);
    }
    let config = BTreeMap::from([
        ("instances".to_string(), n_instances.to_string()),
        ("k_max".to_string(), k_max.to_string()),
        ("seed".to_string(), seed.to_string()),
        ("mirror_step".to_string(), MIRROR_STEP.to_string()),
        ("mirror_iterations".to_string(), MIRROR_ITERATIONS.to_string()),
        ("kl_tolerance".to_string(), KL_TOLERANCE.to_string()),
    ]);
    let cells = vec![Cell::new("instances", &[], trace)];
    super::assemble("iql-oracle", config, cells)
}

pub(crate) fn iql_oracle_verdicts(cells: &[Cell]) -> Result<(Vec<SummaryRow>, Vec<Verdict>)> {
    let t = &super::cell(cells, "instances")?.trace;
    let col = |name: &str| t.column(name).ok_or_else(|| SaqError::InvalidConfig(format!("missing column {name}")));
    let tv = col("tv_gap")?;
    let obj = col("objective_gap")?;
    let conv = col("converged")?;
    let unconverged = conv.iter().filter(|&&c| c != 1.0).count();
    let max = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
    let summary = vec![SummaryRow::of("tv_gap", &tv), SummaryRow::of("objective_gap", &obj)];
    let verdicts = vec![
        Verdict::new(
            "max total-variation gap",
            max(&tv),
            Relation::Lt,
            ORACLE_TV_TOLERANCE,
            "the Lagrangian derivation gives the exact maximizer of the KL-constrained advantage objective",
        ),
        Verdict::new(
            "zero-budget limit gap",
            tv[0],
            Relation::Le,
            IDENTITY_TOLERANCE,
            "a binding constraint returns the behavior policy",
        ),
        Verdict::new(
            "unbounded-budget limit gap",
            tv[1],
            Relation::Le,
            IDENTITY_TOLERANCE,
            "without the constraint the policy is greedy in the advantage",
        ),
        Verdict::new(
            "max objective gap",
            max(&obj),
            Relation::Le,
            ORACLE_OBJECTIVE_TOLERANCE,
            "closed form and numeric solution attain the same expected advantage",
        ),
        Verdict::new(
            "unconverged oracle instances",
            unconverged as f64,
            Relation::Le,
            0.0,
            "(oracle health: every instance solved to the KL tolerance)",
        ),
    ];
    Ok((summary, verdicts))
}

/// Independent negative log-likelihood of `codes` under `softmax(q)`.
fn softmax_nll(q: &Tensor, codes: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &c) in codes.iter().enumerate() {
        let row = q.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        total -= ((row[c] - m).exp() / z).ln();
    }
    total / codes.len() as f64
}

fn mc_mean<R: Rng + ?Sized>(p: &[f64], values: &[f64], n: usize, rng: &mut R) -> Result<(f64, f64)> {
    let dist = WeightedIndex::new(p).map_err(|e| SaqError::InvalidConfig(format!("sampling weights: {e}")))?;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let v = values[dist.sample(rng)];
        s += v;
        s2 += v * v;
    }
    let mean = s / n as f64;
    let var = (s2 / n as f64 - mean * mean).max(0.0) * n as f64 / (n - 1) as f64;
    Ok((mean, (var / n as f64).sqrt()))
}

fn z_score(exact: f64, (mean, se): (f64, f64)) -> f64 {
    let d = (exact - mean).abs();
    if se > 0.0 {
        d / se
    } else if d <= IDENTITY_TOLERANCE {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Randomized checks of the penalty/NLL identity, KL properties, sampled
/// versus exact expectations, and closed-form normalization.
pub fn run_identity_suite(seed: u64) -> Result<ExperimentReport> {
    let mut rng = rng_for(seed, "identity-suite");

    let mut nll = MetricTrace::new(&["instance", "k", "batch", "penalty", "nll", "gap"]);
    for i in 0..1000 {
        let k = if i == 0 { 1 } else if i == 1 { 128 } else { rng.gen_range(1..=128) };
        let b = rng.gen_range(1..=32);
        let scale = rng.gen_range(0.1..5.0);
        let q: Vec<f64> = (0..b * k).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let q = Tensor::matrix(b, k, q)?;
        let codes: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        let id = cql_bc_identity(&q, &codes)?;
        let reference = softmax_nll(&q, &codes);
        nll.push(vec![i as f64, k as f64, b as f64, id.penalty, reference, (id.penalty - reference).abs()]);
    }

    let mut gibbs = MetricTrace::new(&["instance", "k", "kl_pq", "kl_pp"]);
    for i in 0..1000 {
        let k = rng.gen_range(2..=32);
        let p = random_distribution(k, 1.5, &mut rng);
        let q = random_distribution(k, 1.5, &mut rng);
        gibbs.push(vec![i as f64, k as f64, exact_kl(&p, &q), exact_kl(&p, &p)]);
    }

    let mut kl_mc = MetricTrace::new(&["instance", "k", "exact", "estimate", "std_error", "z"]);
    let mut brac_mc = MetricTrace::new(&["instance", "k", "exact", "estimate", "std_error", "z"]);
    for i in 0..100 {
        let k = rng.gen_range(2..=32);
        let p = random_distribution(k, 1.0, &mut rng);
        let q = random_distribution(k, 1.0, &mut rng);
        let log_ratio: Vec<f64> = p.iter().zip(&q).map(|(a, b)| a.ln() - b.ln()).collect();
        let exact = exact_kl(&p, &q);
        let est = mc_mean(&p, &log_ratio, MC_SAMPLES, &mut rng)?;
        kl_mc.push(vec![i as f64, k as f64, exact, est.0, est.1, z_score(exact, est)]);

        let k = rng.gen_range(2..=32);
        let pi = random_distribution(k, 1.0, &mut rng);
        let behavior = random_distribution(k, 1.0, &mut rng);
        let q_next: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let beta = rng.gen_range(0.0..2.0);
        let lb: Vec<f64> = behavior.iter().map(|b| b.ln()).collect();
        let exact = brac_targets(
            &Tensor::matrix(1, k, q_next.clone())?,
            &Tensor::matrix(1, k, pi.clone())?,
            &Tensor::matrix(1, k, lb.clone())?,
            &[0.0],
            &[false],
            1.0,
            beta,
        )[0];
        let inner: Vec<f64> = q_next.iter().zip(&lb).map(|(qv, l)| qv + beta * l).collect();
        let est = mc_mean(&pi, &inner, MC_SAMPLES, &mut rng)?;
        brac_mc.push(vec![i as f64, k as f64, exact, est.0, est.1, z_score(exact, est)]);
    }

    let mut norm = MetricTrace::new(&["instance", "k", "sum_error"]);
    for i in 0..1000 {
        let k = rng.gen_range(1..=64);
        let adv: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let behavior = random_distribution(k, 2.0, &mut rng);
        let lambda = (rng.gen_range(-3.0..3.0f64)).exp();
        let pi = iql_closed_form_policy(&adv, &behavior, lambda)?;
        norm.push(vec![i as f64, k as f64, (pi.iter().sum::<f64>() - 1.0).abs()]);
    }

    let config = BTreeMap::from([
        ("seed".to_string(), seed.to_string()),
        ("mc_samples".to_string(), MC_SAMPLES.to_string()),
        ("identity_tolerance".to_string(), IDENTITY_TOLERANCE.to_string()),
        ("mc_sigmas".to_string(), MC_SIGMAS.to_string()),
    ]);
    let cells = vec![
        Cell::new("penalty_nll", &[], nll),
        Cell::new("kl_gibbs", &[], gibbs),
        Cell::new("kl_monte_carlo", &[], kl_mc),
        Cell::new("brac_target_monte_carlo", &[], brac_mc),
        Cell::new("closed_form_normalization", &[], norm),
    ];
    super::assemble("identities", config, cells)
}

pub(crate) fn identity_verdicts(cells: &[Cell]) -> Result<(Vec<SummaryRow>, Vec<Verdict>)> {
    let col = |cell: &str, name: &str| -> Result<Vec<f64>> {
        super::cell(cells, cell)?
            .trace
            .column(name)
            .ok_or_else(|| SaqError::InvalidConfig(format!("cell {cell} lacks column {name}")))
    };
    let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let gap = col("penalty_nll", "gap")?;
    let kl_pq = col("kl_gibbs", "kl_pq")?;
    let kl_pp = col("kl_gibbs", "kl_pp")?;
    let kl_z = col("kl_monte_carlo", "z")?;
    let brac_z = col("brac_target_monte_carlo", "z")?;
    let sums = col("closed_form_normalization", "sum_error")?;
    let summary = vec![
        SummaryRow::of("penalty_nll_gap", &gap),
        SummaryRow::of("kl_monte_carlo_z", &kl_z),
        SummaryRow::of("brac_target_monte_carlo_z", &brac_z),
    ];
    let abs_max = |v: &[f64]| v.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let verdicts = vec![
        Verdict::new(
            "max |penalty - NLL|",
            max(&gap),
            Relation::Lt,
            IDENTITY_TOLERANCE,
            "the discrete conservatism penalty is exactly a negative log-likelihood behavioral cloning loss",
        ),
        Verdict::new(
            "min KL(p||q)",
            min(&kl_pq),
            Relation::Ge,
            0.0,
            "the exact discrete KL is a divergence (non-negative)",
        ),
        Verdict::new(
            "max |KL(p||p)|",
            abs_max(&kl_pp),
            Relation::Le,
            IDENTITY_TOLERANCE,
            "the exact discrete KL vanishes on equal distributions",
        ),
        Verdict::new(
            "max KL Monte-Carlo z-score",
            max(&kl_z),
            Relation::Le,
            MC_SIGMAS,
            "summing over discrete actions computes the KL exactly instead of estimating it",
        ),
        Verdict::new(
            "max BRAC target Monte-Carlo z-score",
            max(&brac_z),
            Relation::Le,
            MC_SIGMAS,
            "the BRAC backup expectation is computed exactly by summation over codes",
        ),
        Verdict::new(
            "max |sum(closed-form policy) - 1|",
            max(&sums),
            Relation::Le,
            IDENTITY_TOLERANCE,
            "the normalizer z(s) is computed exactly over the discrete actions",
        ),
    ];
    Ok((summary, verdicts))
}
