use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use saq_autodiff::Activation;
use saq_core::continuous::{train_continuous, ContinuousAgent, ContinuousAlgorithm, ContinuousConfig, CONTINUOUS_MAGIC};
use saq_core::diagnostics::{self, ExperimentReport, MazeSetup};
use saq_core::discrete::{train_agent, ActMode, AlgoConfig, Algorithm, Backup, DiscreteAgent, AGENT_MAGIC};
use saq_core::envs::{
    generate_bimodal_bandit, generate_demonstrations, generate_single_mode, AnyDataset, MazeSpec, TransitionDataset,
};
use saq_core::eval::{evaluate_discrete, evaluate_policy, EvalConfig, EvalSummary};
use saq_core::quantizer::{
    codebook_utilization, quantize_dataset, train_quantizer, QuantizerConfig, QuantizerModel,
};
use saq_core::MetricTrace;

use crate::rundir::{check_output_file, run_root, RunDir, CONFIG_FILE, METRICS_FILE};
use crate::settings::Settings;
use crate::{
    Command, Common, DiagnoseArgs, EvalArgs, GenDataArgs, QuantizeArgs, TrainArgs, TrainQuantizerArgs, UsageError,
    VerdictFailed,
};

macro_rules! forward {
    ($settings:expr, $args:expr; $($field:ident),* $(,)?) => {
        $( $settings.set(stringify!($field), $args.$field.as_ref()); )*
    };
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::TrainQuantizer(a) => train_quantizer_cmd(a),
        Command::Quantize(a) => quantize(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Diagnose(a) => diagnose(a),
    }
}

fn settings(common: &Common) -> Result<Settings> {
    let mut s = Settings::from_file(common.config.as_deref())?;
    s.set("out", common.out.as_ref());
    Ok(s)
}

fn maze_spec(s: &mut Settings) -> Result<MazeSpec> {
    match s.optional_path("maze")? {
        Some(p) => {
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading maze {}", p.display()))?;
            Ok(MazeSpec::parse(&text)?)
        }
        None => Ok(MazeSpec::default_maze()),
    }
}

fn parse_activation(s: &mut Settings) -> Result<Activation> {
    match s.get("activation", "relu".to_string())?.as_str() {
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        other => Err(UsageError(format!("unknown activation '{other}' (relu or tanh)")).into()),
    }
}

fn out_dir(s: &mut Settings, default_name: &str) -> Result<PathBuf> {
    let default = run_root().join(default_name);
    Ok(PathBuf::from(s.get("out", default.display().to_string())?))
}

/// Creates the run directory and writes the resolved config first, so it is
/// present even if the command fails later.
fn open_run(s: &Settings, dir: &Path, force: bool) -> Result<RunDir> {
    s.finish()?;
    let run = RunDir::create(dir, force)?;
    run.write(CONFIG_FILE, s.resolved_text())?;
    Ok(run)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut s = settings(&a.common)?;
    forward!(s, a; env, n, noise, seed, maze);
    let env = s.get("env", "maze".to_string())?;
    let seed = s.get("seed", 0u64)?;
    let data = match env.as_str() {
        "maze" => {
            let spec = maze_spec(&mut s)?;
            let n = s.get("n", 3usize)?;
            let noise = s.get("noise", 0.3)?;
            generate_demonstrations(&spec, n, noise, seed)?
        }
        "bandit" => {
            let n = s.get("n", 2000usize)?;
            let noise = s.get("noise", 0.01)?;
            generate_bimodal_bandit(n, noise, seed)?
        }
        "single-mode" => generate_single_mode(s.get("n", 1000usize)?, seed)?,
        other => bail!(UsageError(format!("unknown env '{other}' (maze, bandit or single-mode)"))),
    };
    let out = PathBuf::from(s.get("out", run_root().join(format!("{env}-seed{seed}.saqd")).display().to_string())?);
    s.finish()?;
    check_output_file(&out, a.common.force)?;
    data.save(&out)?;
    println!("wrote {} transitions ({env}) to {}", data.len(), out.display());
    Ok(())
}

fn load_continuous(path: &Path) -> Result<TransitionDataset> {
    TransitionDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_quantizer(path: &Path) -> Result<QuantizerModel> {
    QuantizerModel::load(path).with_context(|| format!("loading quantizer {}", path.display()))
}

fn train_quantizer_cmd(a: TrainQuantizerArgs) -> Result<()> {
    let mut s = settings(&a.common)?;
    forward!(s, a; dataset, k, d, epochs, batch_size, learning_rate, hidden, activation, commitment_weight,
        dead_code_period, state_conditioned, seed);
    let dataset = s.require_path("dataset")?;
    let d = QuantizerConfig::default();
    let cfg = QuantizerConfig {
        codebook_size: s.get("k", d.codebook_size)?,
        embedding_dim: s.get("d", d.embedding_dim)?,
        hidden: s.list("hidden", &d.hidden)?,
        activation: parse_activation(&mut s)?,
        epochs: s.get("epochs", d.epochs)?,
        batch_size: s.get("batch_size", d.batch_size)?,
        learning_rate: s.get("learning_rate", d.learning_rate)?,
        commitment_weight: s.get("commitment_weight", d.commitment_weight)?,
        dead_code_period: s.get("dead_code_period", d.dead_code_period)?,
        seed: s.get("seed", d.seed)?,
        state_conditioned: s.get("state_conditioned", d.state_conditioned)?,
    };
    cfg.validate()?;
    let dir = out_dir(&mut s, &format!("quantizer-k{}-seed{}", cfg.codebook_size, cfg.seed))?;
    let data = load_continuous(&dataset)?;
    let run = open_run(&s, &dir, a.common.force)?;
    let (model, trace) = train_quantizer(&data, &cfg)?;
    model.save(&run.join("quantizer.saqm"))?;
    trace.write_csv(&run.join(METRICS_FILE))?;
    let mse = model.reconstruction_mse(&data)?;
    let util = codebook_utilization(&quantize_dataset(&data, &model)?);
    let path = run.finish()?;
    println!(
        "quantizer K={} reconstruction_mse={mse} live_codes={} -> {}",
        cfg.codebook_size,
        util.live(),
        path.display()
    );
    Ok(())
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let mut s = settings(&a.common)?;
    forward!(s, a; dataset, model);
    let dataset = s.require_path("dataset")?;
    let model_path = s.require_path("model")?;
    let out = s.require_path("out")?;
    s.finish()?;
    let data = load_continuous(&dataset)?;
    let model = load_quantizer(&model_path)?;
    check_output_file(&out, a.common.force)?;
    let discrete = quantize_dataset(&data, &model)?;
    discrete.save(&out)?;
    let util = codebook_utilization(&discrete);
    println!(
        "quantized {} transitions, {} of {} codes used -> {}",
        discrete.len(),
        util.live(),
        discrete.codebook_size,
        out.display()
    );
    Ok(())
}

fn eval_config(s: &mut Settings, seed: u64) -> Result<EvalConfig> {
    let d = EvalConfig::default();
    Ok(EvalConfig {
        episodes: s.get("episodes", d.episodes)?,
        start_jitter: s.get("jitter", d.start_jitter)?,
        seed,
    })
}

fn train(a: TrainArgs) -> Result<()> {
    let mut s = settings(&a.common)?;
    forward!(s, a; algo, dataset, quantizer, alpha, tau, lambda, beta, alpha_ent, gamma, learning_rate, batch_size,
        steps, target_update_period, hidden, backup, log_every, eval_every, episodes, jitter, n_samples,
        grid_resolution, penalty_states, maze, seed);
    let algo = s.require::<String>("algo")?;
    if let Ok(c) = algo.parse::<ContinuousAlgorithm>() {
        return train_continuous_cmd(s, c, a.common.force);
    }
    let algorithm: Algorithm = algo
        .parse()
        .map_err(|_| UsageError(format!("unknown algorithm '{algo}' (cql, iql, brac, bc, cont-cql, cont-bc)")))?;
    let dataset = s.require_path("dataset")?;
    let quantizer_path = s.require_path("quantizer")?;
    let d = AlgoConfig::default();
    let cfg = AlgoConfig {
        algorithm,
        alpha: s.get("alpha", d.alpha)?,
        tau: s.get("tau", d.tau)?,
        lambda: s.get("lambda", d.lambda)?,
        beta: s.get("beta", d.beta)?,
        alpha_ent: s.get("alpha_ent", d.alpha_ent)?,
        gamma: s.get("gamma", d.gamma)?,
        learning_rate: s.get("learning_rate", d.learning_rate)?,
        batch_size: s.get("batch_size", d.batch_size)?,
        steps: s.get("steps", d.steps)?,
        target_update_period: s.get("target_update_period", d.target_update_period)?,
        hidden: s.list("hidden", &d.hidden)?,
        backup: s.get::<String>("backup", d.backup.name().into())?.parse::<Backup>()?,
        log_every: s.get("log_every", d.log_every)?,
        eval_every: s.get("eval_every", d.eval_every)?,
        seed: s.get("seed", d.seed)?,
    };
    cfg.validate()?;
    let episodes = s.get("episodes", 0usize)?;
    let ecfg = EvalConfig {
        episodes: episodes.max(1),
        start_jitter: s.get("jitter", EvalConfig::default().start_jitter)?,
        seed: cfg.seed,
    };
    let spec = maze_spec(&mut s)?;
    let dir = out_dir(&mut s, &format!("{}-seed{}", algorithm.name(), cfg.seed))?;

    let quantizer = load_quantizer(&quantizer_path)?;
    let discrete = match AnyDataset::load(&dataset).with_context(|| format!("loading dataset {}", dataset.display()))? {
        AnyDataset::Discrete(d) => d,
        AnyDataset::Continuous(c) => quantize_dataset(&c, &quantizer)?,
    };
    let run = open_run(&s, &dir, a.common.force)?;
    let mut evaluator =
        |agent: &DiscreteAgent| Ok(evaluate_discrete(&spec, &ecfg, agent, &quantizer, ActMode::Greedy)?.success_rate);
    let eval_ref: Option<&mut saq_core::discrete::Evaluator<'_>> =
        if episodes > 0 { Some(&mut evaluator) } else { None };
    let (agent, trace) = train_agent(&discrete, Some(&quantizer), &cfg, eval_ref)?;
    agent.save(&run.join("agent.bin"))?;
    trace.write_csv(&run.join(METRICS_FILE))?;
    let path = run.finish()?;
    println!("trained {} for {} steps -> {}", algorithm.name(), cfg.steps, path.display());
    Ok(())
}

fn train_continuous_cmd(mut s: Settings, algorithm: ContinuousAlgorithm, force: bool) -> Result<()> {
    let dataset = s.require_path("dataset")?;
    let d = ContinuousConfig::default();
    let cfg = ContinuousConfig {
        algorithm,
        alpha: s.get("alpha", d.alpha)?,
        gamma: s.get("gamma", d.gamma)?,
        alpha_ent: s.get("alpha_ent", d.alpha_ent)?,
        learning_rate: s.get("learning_rate", d.learning_rate)?,
        batch_size: s.get("batch_size", d.batch_size)?,
        steps: s.get("steps", d.steps)?,
        target_update_period: s.get("target_update_period", d.target_update_period)?,
        hidden: s.list("hidden", &d.hidden)?,
        n_samples: s.get("n_samples", d.n_samples)?,
        grid_resolution: s.get("grid_resolution", d.grid_resolution)?,
        penalty_states: s.get("penalty_states", d.penalty_states)?,
        log_every: s.get("log_every", d.log_every)?,
        eval_every: s.get("eval_every", d.eval_every)?,
        seed: s.get("seed", d.seed)?,
    };
    cfg.validate()?;
    let episodes = s.get("episodes", 0usize)?;
    let ecfg = EvalConfig {
        episodes: episodes.max(1),
        start_jitter: s.get("jitter", EvalConfig::default().start_jitter)?,
        seed: cfg.seed,
    };
    let spec = maze_spec(&mut s)?;
    let dir = out_dir(&mut s, &format!("{}-seed{}", algorithm.name(), cfg.seed))?;
    let data = load_continuous(&dataset)?;
    let run = open_run(&s, &dir, force)?;
    let mut evaluator = |agent: &ContinuousAgent| Ok(evaluate_policy(&spec, &ecfg, |st, _| agent.act(st))?.success_rate);
    let eval_ref: Option<&mut saq_core::continuous::ContinuousEvaluator<'_>> =
        if episodes > 0 { Some(&mut evaluator) } else { None };
    let (agent, trace) = train_continuous(&data, &cfg, eval_ref)?;
    agent.save(&run.join("agent.bin"))?;
    trace.write_csv(&run.join(METRICS_FILE))?;
    let path = run.finish()?;
    println!("trained {} for {} steps -> {}", algorithm.name(), cfg.steps, path.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut s = settings(&a.common)?;
    forward!(s, a; agent, quantizer, env, maze, episodes, jitter, mode, seed);
    let agent_path = s.require_path("agent")?;
    let env = s.get("env", "maze".to_string())?;
    if env != "maze" {
        bail!(UsageError(format!("evaluation supports only the maze env, got '{env}'")));
    }
    let spec = maze_spec(&mut s)?;
    let seed = s.get("seed", 0u64)?;
    let ecfg = eval_config(&mut s, seed)?;
    let mode: ActMode = s.get::<String>("mode", "greedy".into())?.parse()?;
    let quantizer_path = s.optional_path("quantizer")?;
    let out = s.optional_path("out")?;
    s.finish()?;

    let bytes = std::fs::read(&agent_path).with_context(|| format!("reading agent {}", agent_path.display()))?;
    let summary = if bytes.starts_with(AGENT_MAGIC) {
        let agent = DiscreteAgent::from_bytes(&bytes)?;
        let qp = quantizer_path.ok_or_else(|| UsageError("discrete agents need --quantizer".into()))?;
        evaluate_discrete(&spec, &ecfg, &agent, &load_quantizer(&qp)?, mode)?
    } else if bytes.starts_with(CONTINUOUS_MAGIC) {
        let agent = ContinuousAgent::from_bytes(&bytes)?;
        evaluate_policy(&spec, &ecfg, |st, rng| match mode {
            ActMode::Greedy => agent.act(st),
            ActMode::Sample => agent.act_sampled(st, rng),
        })?
    } else {
        bail!("{} is not an agent file", agent_path.display());
    };
    print_summary(&summary, ecfg.episodes);
    if let Some(dir) = out {
        let run = open_run(&s, &dir, a.common.force)?;
        let mut t = MetricTrace::new(&["episodes", "success_rate", "mean_return", "mean_steps"]);
        t.push(vec![ecfg.episodes as f64, summary.success_rate, summary.mean_return, summary.mean_steps]);
        t.write_csv(&run.join(METRICS_FILE))?;
        run.finish()?;
    }
    Ok(())
}

fn print_summary(s: &EvalSummary, episodes: usize) {
    println!("episodes={episodes}");
    println!("success_rate={}", s.success_rate);
    println!("mean_return={}", s.mean_return);
    println!("mean_steps={}", s.mean_steps);
}

fn maze_setup(s: &mut Settings) -> Result<MazeSetup> {
    let d = MazeSetup::default();
    let mut quantizer = d.quantizer.clone();
    quantizer.codebook_size = s.get("k", quantizer.codebook_size)?;
    quantizer.epochs = s.get("epochs", quantizer.epochs)?;
    let mut agent = d.agent.clone();
    agent.alpha = s.get("alpha", agent.alpha)?;
    agent.steps = s.get("steps", agent.steps)?;
    agent.log_every = s.get("log_every", agent.log_every)?;
    agent.eval_every = s.get("eval_every", agent.eval_every)?;
    agent.backup = s.get::<String>("backup", agent.backup.name().into())?.parse()?;
    let mut continuous = d.continuous.clone();
    continuous.alpha = s.get("continuous_alpha", continuous.alpha)?;
    continuous.steps = s.get("continuous_steps", continuous.steps)?;
    continuous.log_every = s.get("continuous_log_every", continuous.log_every)?;
    continuous.eval_every = s.get("continuous_eval_every", continuous.eval_every)?;
    continuous.n_samples = s.get("n_samples", continuous.n_samples)?;
    continuous.grid_resolution = s.get("grid_resolution", continuous.grid_resolution)?;
    let eval = EvalConfig {
        episodes: s.get("episodes", d.eval.episodes)?,
        start_jitter: s.get("jitter", d.eval.start_jitter)?,
        seed: 0,
    };
    Ok(MazeSetup {
        maze: maze_spec(s)?,
        demonstrations: s.get("demos", d.demonstrations)?,
        noise: s.get("noise", d.noise)?,
        quantizer,
        agent,
        continuous,
        eval,
        conditioning_codebook: s.get("conditioning_k", d.conditioning_codebook)?,
        bandit_samples: s.get("bandit_samples", d.bandit_samples)?,
        bandit_noise: s.get("bandit_noise", d.bandit_noise)?,
        bandit_codebook: s.get("bandit_k", d.bandit_codebook)?,
    })
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let mut s = settings(&a.common)?;
    forward!(s, a; seeds, seed, instances, k_max, demos, noise, k, k_sizes, conditioning_k, epochs, alpha, alphas,
        steps, log_every, eval_every, backup, continuous_alpha, continuous_steps, continuous_log_every,
        continuous_eval_every, n_samples, grid_resolution, episodes, jitter, bandit_samples, bandit_noise, bandit_k,
        maze);
    let experiment = a.experiment.as_str();
    if !diagnostics::EXPERIMENTS.contains(&experiment) {
        bail!(UsageError(format!(
            "unknown experiment '{experiment}' ({})",
            diagnostics::EXPERIMENTS.join(", ")
        )));
    }
    s.record("experiment", experiment);
    let dir = out_dir(&mut s, &format!("diagnose-{experiment}"))?;
    let job: Box<dyn FnOnce() -> saq_core::Result<ExperimentReport>> = match experiment {
        "iql-oracle" => {
            let n = s.get("instances", 100usize)?;
            let k_max = s.get("k_max", 16usize)?;
            let seed = s.get("seed", 0u64)?;
            Box::new(move || diagnostics::run_iql_oracle_check(n, k_max, seed))
        }
        "identities" => {
            let seed = s.get("seed", 0u64)?;
            Box::new(move || diagnostics::run_identity_suite(seed))
        }
        _ => {
            let setup = maze_setup(&mut s)?;
            let seeds = s.list("seeds", &[1u64, 2, 3])?;
            match experiment {
                "penalty-gap" => Box::new(move || diagnostics::run_penalty_gap_diagnostic(&setup, &seeds)),
                "codebook" => {
                    let sizes = s.list("k_sizes", &[8usize, 16, 32])?;
                    Box::new(move || diagnostics::run_codebook_ablation(&setup, &sizes, &seeds))
                }
                "state-cond" => Box::new(move || diagnostics::run_state_conditioning_ablation(&setup, &seeds)),
                _ => {
                    let alphas = s.list("alphas", &[0.01, 1.0, 10.0])?;
                    Box::new(move || diagnostics::run_constraint_sweep(&setup, &alphas, &seeds))
                }
            }
        }
    };
    let run = open_run(&s, &dir, a.common.force)?;
    let report = job()?;
    report.write_dir(run.path())?;
    let mut t = MetricTrace::new(&["verdict", "observed", "threshold", "passed"]);
    for (i, v) in report.verdicts.iter().enumerate() {
        t.push(vec![i as f64, v.observed, v.threshold, if v.passed { 1.0 } else { 0.0 }]);
    }
    t.write_csv(&run.join(METRICS_FILE))?;
    let path = run.finish()?;
    print!("{}", report.summary_text());
    println!("report: {}", path.display());
    if !report.passed() {
        let failed: Vec<&str> = report.verdicts.iter().filter(|v| !v.passed).map(|v| v.name.as_str()).collect();
        bail!(VerdictFailed(failed.join("; ")));
    }
    Ok(())
}
