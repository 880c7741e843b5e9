//! Maze experiments: penalty gap, codebook size, state conditioning and
//! constraint strength.

use std::collections::BTreeMap;

use super::report::{final_value, monotone_fraction, Cell, ExperimentReport, Relation, SummaryRow, Verdict};
use crate::continuous::{train_continuous_cql, ContinuousAgent, ContinuousConfig};
use crate::discrete::{train_agent, ActMode, AlgoConfig, DiscreteAgent};
use crate::envs::{generate_bimodal_bandit, generate_demonstrations, generate_single_mode, MazeSpec, TransitionDataset};
use crate::error::{Result, SaqError};
use crate::eval::{evaluate_discrete, evaluate_policy, EvalConfig};
use crate::metrics::MetricTrace;
use crate::quantizer::{quantize_dataset, train_quantizer, QuantizerConfig, QuantizerModel};

pub const SUCCESS_FLOOR: f64 = 0.9;
pub const CONTINUOUS_CEILING: f64 = 0.5;
pub const MONOTONE_WINDOW: usize = 100;
pub const MONOTONE_FLOOR: f64 = 0.95;
pub const CODEBOOK_SPREAD: f64 = 0.15;
pub const CODEBOOK_VERDICT_SIZES: [usize; 3] = [8, 16, 32];
pub const BLINDING_MSE_RATIO: f64 = 5.0;
pub const GAP_REFERENCE_FRACTION: f64 = 0.1;

/// Shared settings of every maze cell. Per-cell seeds replace the seeds in
/// the nested configs.
#[derive(Clone, Debug, PartialEq)]
pub struct MazeSetup {
    pub maze: MazeSpec,
    pub demonstrations: usize,
    pub noise: f64,
    pub quantizer: QuantizerConfig,
    pub agent: AlgoConfig,
    pub continuous: ContinuousConfig,
    pub eval: EvalConfig,
    /// Codebook size of the state-conditioning arms.
    pub conditioning_codebook: usize,
    pub bandit_samples: usize,
    pub bandit_noise: f64,
    pub bandit_codebook: usize,
}

impl Default for MazeSetup {
    fn default() -> Self {
        Self {
            maze: MazeSpec::default_maze(),
            demonstrations: 3,
            noise: 0.3,
            quantizer: QuantizerConfig {
                codebook_size: 32,
                ..Default::default()
            },
            agent: AlgoConfig {
                alpha: 10.0,
                steps: 10_000,
                log_every: 10,
                eval_every: 2_000,
                ..Default::default()
            },
            continuous: ContinuousConfig {
                alpha: 10.0,
                steps: 10_000,
                log_every: 100,
                eval_every: 2_000,
                ..Default::default()
            },
            eval: EvalConfig::default(),
            conditioning_codebook: 3,
            bandit_samples: 2_000,
            bandit_noise: 0.01,
            bandit_codebook: 8,
        }
    }
}

impl MazeSetup {
    pub fn dataset(&self, seed: u64) -> Result<TransitionDataset> {
        generate_demonstrations(&self.maze, self.demonstrations, self.noise, seed)
    }

    fn eval_config(&self, seed: u64) -> EvalConfig {
        EvalConfig {
            seed,
            ..self.eval.clone()
        }
    }

    pub fn describe(&self) -> BTreeMap<String, String> {
        let q = &self.quantizer;
        let a = &self.agent;
        let c = &self.continuous;
        [
            ("demonstrations", self.demonstrations.to_string()),
            ("demo_noise", self.noise.to_string()),
            ("codebook_size", q.codebook_size.to_string()),
            ("embedding_dim", q.embedding_dim.to_string()),
            ("quantizer_epochs", q.epochs.to_string()),
            ("alpha", a.alpha.to_string()),
            ("gamma", a.gamma.to_string()),
            ("agent_steps", a.steps.to_string()),
            ("agent_log_every", a.log_every.to_string()),
            ("continuous_alpha", c.alpha.to_string()),
            ("continuous_steps", c.steps.to_string()),
            ("continuous_n_samples", c.n_samples.to_string()),
            ("continuous_grid_resolution", c.grid_resolution.to_string()),
            ("eval_episodes", self.eval.episodes.to_string()),
            ("eval_start_jitter", self.eval.start_jitter.to_string()),
            ("conditioning_codebook", self.conditioning_codebook.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Result of one SAQ-CQL pipeline run.
pub struct SaqRun {
    pub quantizer: QuantizerModel,
    pub agent: DiscreteAgent,
    pub trace: MetricTrace,
    pub reconstruction_mse: f64,
}

/// Quantizer, quantization, SAQ-CQL training and periodic evaluation on the
/// maze dataset for one seed.
pub fn run_saq_cell(setup: &MazeSetup, seed: u64, codebook_size: usize, conditioned: bool, alpha: f64) -> Result<SaqRun> {
    let data = setup.dataset(seed)?;
    let qcfg = QuantizerConfig {
        codebook_size,
        state_conditioned: conditioned,
        seed,
        ..setup.quantizer.clone()
    };
    let (quantizer, _) = train_quantizer(&data, &qcfg)?;
    let reconstruction_mse = quantizer.reconstruction_mse(&data)?;
    let discrete = quantize_dataset(&data, &quantizer)?;
    let acfg = AlgoConfig {
        alpha,
        seed,
        ..setup.agent.clone()
    };
    let ecfg = setup.eval_config(seed);
    let maze = &setup.maze;
    let mut eval = |agent: &DiscreteAgent| Ok(evaluate_discrete(maze, &ecfg, agent, &quantizer, ActMode::Greedy)?.success_rate);
    let (agent, mut trace) = train_agent(&discrete, Some(&quantizer), &acfg, Some(&mut eval))?;
    if trace.is_empty() {
        let success = eval(&agent)?;
        trace.push_named(&[("step", 0.0), ("eval_success", success)]);
    }
    Ok(SaqRun {
        quantizer,
        agent,
        trace,
        reconstruction_mse,
    })
}

/// Continuous CQL on the same maze dataset for one seed.
pub fn run_continuous_cell(setup: &MazeSetup, seed: u64) -> Result<(ContinuousAgent, MetricTrace)> {
    let data = setup.dataset(seed)?;
    let cfg = ContinuousConfig {
        seed,
        ..setup.continuous.clone()
    };
    let ecfg = setup.eval_config(seed);
    let maze = &setup.maze;
    let mut eval = |agent: &ContinuousAgent| Ok(evaluate_policy(maze, &ecfg, |s, _| agent.act(s))?.success_rate);
    let (agent, mut trace) = train_continuous_cql(&data, &cfg, Some(&mut eval))?;
    if trace.is_empty() {
        let success = eval(&agent)?;
        trace.push_named(&[("step", 0.0), ("eval_success", success)]);
    }
    Ok((agent, trace))
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.len() < 3 {
        return Err(SaqError::InvalidConfig(format!("need at least 3 seeds, got {}", seeds.len())));
    }
    Ok(())
}

fn seed_list(seeds: &[u64]) -> String {
    seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

fn final_success(cell: &Cell) -> Result<f64> {
    final_value(&cell.trace, "eval_success")
        .ok_or_else(|| SaqError::InvalidConfig(format!("cell {} has no evaluation", cell.name)))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Value of `column` at the first logged row at or after `fraction` of the
/// final logged step.
pub fn value_at_fraction(trace: &MetricTrace, column: &str, fraction: f64) -> Option<f64> {
    let series = trace.series(column);
    let last = series.last()?.0;
    series.iter().find(|(step, _)| *step >= fraction * last).map(|p| p.1)
}

pub fn run_penalty_gap_diagnostic(setup: &MazeSetup, seeds: &[u64]) -> Result<ExperimentReport> {
    check_seeds(seeds)?;
    let mut cells = Vec::new();
    for &seed in seeds {
        let saq = run_saq_cell(setup, seed, setup.quantizer.codebook_size, true, setup.agent.alpha)?;
        let labels = [("arm", "saq-cql".to_string()), ("seed", seed.to_string())];
        cells.push(Cell::new(format!("saq-cql_seed{seed}"), &labels, saq.trace));
        let (_, trace) = run_continuous_cell(setup, seed)?;
        let labels = [("arm", "continuous-cql".to_string()), ("seed", seed.to_string())];
        cells.push(Cell::new(format!("continuous-cql_seed{seed}"), &labels, trace));
    }
    let mut config = setup.describe();
    config.insert("seeds".into(), seed_list(seeds));
    super::assemble("penalty-gap", config, cells)
}

fn arm<'a>(cells: &'a [Cell], name: &'a str) -> impl Iterator<Item = &'a Cell> + 'a {
    cells.iter().filter(move |c| c.label("arm") == Some(name))
}

pub(crate) fn penalty_gap_verdicts(cells: &[Cell]) -> Result<(Vec<SummaryRow>, Vec<Verdict>)> {
    let saq: Vec<&Cell> = arm(cells, "saq-cql").collect();
    let cont: Vec<&Cell> = arm(cells, "continuous-cql").collect();
    let saq_success = saq.iter().map(|c| final_success(c)).collect::<Result<Vec<_>>>()?;
    let cont_success = cont.iter().map(|c| final_success(c)).collect::<Result<Vec<_>>>()?;
    let mut growth = Vec::new();
    for c in &cont {
        let end = final_value(&c.trace, "penalty_gap");
        let early = value_at_fraction(&c.trace, "penalty_gap", GAP_REFERENCE_FRACTION);
        growth.push(match (end, early) {
            (Some(e), Some(a)) => e - a,
            _ => f64::NAN,
        });
    }
    let monotone: Vec<f64> = saq
        .iter()
        .map(|c| {
            let v: Vec<f64> = c.trace.series("exact_penalty").iter().map(|p| p.1).collect();
            monotone_fraction(&v, MONOTONE_WINDOW)
        })
        .collect();
    let mut paired = Vec::new();
    for c in &cont {
        let partner = saq.iter().find(|s| s.label("seed") == c.label("seed"));
        if let Some(s) = partner {
            paired.push(final_success(s)? - final_success(c)?);
        }
    }
    let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, |a, b| if b.is_nan() { f64::NAN } else { a.min(b) });
    let summary = vec![
        SummaryRow::of("saq-cql final success", &saq_success),
        SummaryRow::of("continuous-cql final success", &cont_success),
        SummaryRow::of("continuous gap growth (end - 10%)", &growth),
        SummaryRow::of("saq-cql penalty monotone fraction", &monotone),
    ];
    let verdicts = vec![
        Verdict::new(
            "saq-cql mean final success",
            mean(&saq_success),
            Relation::Ge,
            SUCCESS_FLOOR,
            "SAQ-CQL learns stably and solves the 3-demonstration maze",
        ),
        Verdict::new(
            "continuous-cql mean final success",
            mean(&cont_success),
            Relation::Le,
            CONTINUOUS_CEILING,
            "performance of continuous CQL rapidly degrades",
        ),
        Verdict::new(
            "min continuous gap growth over seeds",
            min(&growth),
            Relation::Gt,
            0.0,
            "the estimated and exact continuous CQL penalties diverge over training",
        ),
        Verdict::new(
            "min saq-cql penalty monotone fraction",
            min(&monotone),
            Relation::Ge,
            MONOTONE_FLOOR,
            "SAQ-CQL smoothly minimizes the exact penalty",
        ),
        Verdict::new(
            "min paired success advantage (saq - continuous)",
            min(&paired),
            Relation::Ge,
            0.0,
            "continuous CQL does no better than SAQ-CQL on the same data",
        ),
    ];
    Ok((summary, verdicts))
}

pub fn run_codebook_ablation(setup: &MazeSetup, codebook_sizes: &[usize], seeds: &[u64]) -> Result<ExperimentReport> {
    check_seeds(seeds)?;
    if codebook_sizes.is_empty() {
        return Err(SaqError::InvalidConfig("need at least one codebook size".into()));
    }
    let mut cells = Vec::new();
    for &k in codebook_sizes {
        for &seed in seeds {
            let run = run_saq_cell(setup, seed, k, true, setup.agent.alpha)?;
            let labels = [
                ("k", k.to_string()),
                ("seed", seed.to_string()),
                ("reconstruction_mse", run.reconstruction_mse.to_string()),
            ];
            cells.push(Cell::new(format!("k{k}_seed{seed}"), &labels, run.trace));
        }
    }
    let mut config = setup.describe();
    config.insert("seeds".into(), seed_list(seeds));
    config.insert(
        "codebook_sizes".into(),
        codebook_sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
    );
    super::assemble("codebook", config, cells)
}

pub(crate) fn codebook_verdicts(cells: &[Cell]) -> Result<(Vec<SummaryRow>, Vec<Verdict>)> {
    let mut by_k: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for c in cells {
        let k = c.label_f64("k")? as usize;
        by_k.entry(k).or_default().push(final_success(c)?);
    }
    let summary: Vec<SummaryRow> = by_k.iter().map(|(k, v)| SummaryRow::of(format!("K={k} final success"), v)).collect();
    let means: Vec<f64> = by_k
        .iter()
        .filter(|(k, _)| CODEBOOK_VERDICT_SIZES.contains(k))
        .map(|(_, v)| mean(v))
        .collect();
    let (spread, range) = if means.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let grand = mean(&means);
        let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
        (means.iter().map(|m| (m - grand).abs()).fold(0.0, f64::max), hi - lo)
    };
    let claim = "SAQ performance is largely invariant to codebook size";
    let verdicts = vec![
        Verdict::new("max |mean success(K) - grand mean|, K in {8,16,32}", spread, Relation::Le, CODEBOOK_SPREAD, claim),
        Verdict::new("max - min mean success over K in {8,16,32}", range, Relation::Le, CODEBOOK_SPREAD, claim),
    ];
    Ok((summary, verdicts))
}

pub fn run_state_conditioning_ablation(setup: &MazeSetup, seeds: &[u64]) -> Result<ExperimentReport> {
    check_seeds(seeds)?;
    let mut cells = Vec::new();
    let qcfg = |seed: u64, conditioned: bool, k: usize| QuantizerConfig {
        codebook_size: k,
        state_conditioned: conditioned,
        seed,
        ..setup.quantizer.clone()
    };
    let mut bandit = MetricTrace::new(&["seed", "conditioned_mse", "blinded_mse"]);
    let mut control = MetricTrace::new(&["seed", "conditioned_mse", "blinded_mse"]);
    for &seed in seeds {
        let data = generate_bimodal_bandit(setup.bandit_samples, setup.bandit_noise, seed)?;
        let cond = train_quantizer(&data, &qcfg(seed, true, setup.bandit_codebook))?.0.reconstruction_mse(&data)?;
        let blind = train_quantizer(&data, &qcfg(seed, false, setup.bandit_codebook))?.0.reconstruction_mse(&data)?;
        bandit.push(vec![seed as f64, cond, blind]);

        let data = generate_single_mode(setup.bandit_samples / 2, seed)?;
        let cond = train_quantizer(&data, &qcfg(seed, true, setup.bandit_codebook))?.0.reconstruction_mse(&data)?;
        let blind = train_quantizer(&data, &qcfg(seed, false, setup.bandit_codebook))?.0.reconstruction_mse(&data)?;
        control.push(vec![seed as f64, cond, blind]);

        for conditioned in [true, false] {
            let run = run_saq_cell(setup, seed, setup.conditioning_codebook, conditioned, setup.agent.alpha)?;
            let name = if conditioned { "conditioned" } else { "blinded" };
            let labels = [
                ("arm", name.to_string()),
                ("seed", seed.to_string()),
                ("reconstruction_mse", run.reconstruction_mse.to_string()),
            ];
            cells.push(Cell::new(format!("maze_{name}_seed{seed}"), &labels, run.trace));
        }
    }
    cells.push(Cell::new("bandit", &[], bandit));
    cells.push(Cell::new("single_mode_control", &[], control));
    let mut config = setup.describe();
    config.insert("seeds".into(), seed_list(seeds));
    config.insert("bandit_samples".into(), setup.bandit_samples.to_string());
    config.insert("bandit_noise".into(), setup.bandit_noise.to_string());
    config.insert("bandit_codebook".into(), setup.bandit_codebook.to_string());
    super::assemble("state-cond", config, cells)
}

pub(crate) fn state_conditioning_verdicts(cells: &[Cell]) -> Result<(Vec<SummaryRow>, Vec<Verdict>)> {
    let bandit = &super::cell(cells, "bandit")?.trace;
    let cond = bandit.column("conditioned_mse").unwrap_or_default();
    let blind = bandit.column("blinded_mse").unwrap_or_default();
    let ratios: Vec<f64> = cond.iter().zip(&blind).map(|(c, b)| b / c).collect();
    let mut success_margin = Vec::new();
    let mut mse_margin = Vec::new();
    let (mut cond_success, mut blind_success) = (Vec::new(), Vec::new());
    for c in arm(cells, "conditioned") {
        let partner = arm(cells, "blinded")
            .find(|b| b.label("seed") == c.label("seed"))
            .ok_or_else(|| SaqError::InvalidConfig(format!("no blinded partner for {}", c.name)))?;
        let (sc, sb) = (final_success(c)?, final_success(partner)?);
        cond_success.push(sc);
        blind_success.push(sb);
        success_margin.push(sc - sb);
        mse_margin.push(partner.label_f64("reconstruction_mse")? - c.label_f64("reconstruction_mse")?);
    }
    let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let bandit_margin: Vec<f64> = cond.iter().zip(&blind).map(|(c, b)| b - c).collect();
    let summary = vec![
        SummaryRow::of("bandit conditioned mse", &cond),
        SummaryRow::of("bandit blinded mse", &blind),
        SummaryRow::of("maze conditioned success", &cond_success),
        SummaryRow::of("maze blinded success", &blind_success),
    ];
    let claim = "state-conditioned discretization beats a state-unconditioned one";
    let verdicts = vec![
        Verdict::new("min bandit blinded/conditioned mse ratio", min(&ratios), Relation::Ge, BLINDING_MSE_RATIO, claim),
        Verdict::new("min bandit mse margin (blinded - conditioned)", min(&bandit_margin), Relation::Gt, 0.0, claim),
        Verdict::new("min maze mse margin (blinded - conditioned)", min(&mse_margin), Relation::Gt, 0.0, claim),
        Verdict::new("min maze success margin (conditioned - blinded)", min(&success_margin), Relation::Gt, 0.0, claim),
    ];
    Ok((summary, verdicts))
}

pub fn run_constraint_sweep(setup: &MazeSetup, alphas: &[f64], seeds: &[u64]) -> Result<ExperimentReport> {
    check_seeds(seeds)?;
    let positive: Vec<f64> = alphas.iter().cloned().filter(|&a| a > 0.0).collect();
    let lo = positive.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = positive.iter().cloned().fold(0.0, f64::max);
    if positive.len() < 3 || hi / lo < 100.0 {
        return Err(SaqError::InvalidConfig(
            "need at least 3 positive alpha values spanning two orders of magnitude".into(),
        ));
    }
    let mut cells = Vec::new();
    for &alpha in alphas {
        for &seed in seeds {
            let run = run_saq_cell(setup, seed, setup.quantizer.codebook_size, true, alpha)?;
            let labels = [("alpha", alpha.to_string()), ("seed", seed.to_string())];
            cells.push(Cell::new(format!("alpha{alpha}_seed{seed}"), &labels, run.trace));
        }
    }
    let mut config = setup.describe();
    config.insert("seeds".into(), seed_list(seeds));
    config.insert("alphas".into(), alphas.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
    super::assemble("constraint-sweep", config, cells)
}

pub(crate) fn constraint_sweep_verdicts(cells: &[Cell]) -> Result<(Vec<SummaryRow>, Vec<Verdict>)> {
    let mut by_alpha: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::new();
    for c in cells {
        let a = c.label_f64("alpha")?;
        let s = final_success(c)?;
        let p = final_value(&c.trace, "exact_penalty").unwrap_or(f64::NAN);
        match by_alpha.iter_mut().find(|e| e.0 == a) {
            Some(e) => {
                e.1.push(s);
                e.2.push(p);
            }
            None => by_alpha.push((a, vec![s], vec![p])),
        }
    }
    by_alpha.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut summary = Vec::new();
    for (a, s, p) in &by_alpha {
        summary.push(SummaryRow::of(format!("alpha={a} final success"), s));
        summary.push(SummaryRow::of(format!("alpha={a} final exact penalty"), p));
    }
    let swept: Vec<(f64, f64)> = by_alpha.iter().filter(|e| e.0 > 0.0).map(|e| (e.0, mean(&e.1))).collect();
    let smallest = swept.first().map_or(f64::NAN, |e| e.1);
    let best = swept.iter().map(|e| e.1).fold(f64::NAN, f64::max);
    let verdicts = vec![Verdict::new(
        "success(smallest alpha) - success(best alpha)",
        smallest - best,
        Relation::Le,
        0.0,
        "performance ramps up with the policy constraint level before converging",
    )];
    Ok((summary, verdicts))
}
