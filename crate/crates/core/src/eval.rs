//! Maze rollouts for policy evaluation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::discrete::{ActMode, DiscreteAgent};
use crate::envs::maze::MazeSpec;
use crate::error::{Result, SaqError};
use crate::quantizer::QuantizerModel;
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Episodes start at the start-cell center plus a uniform offset in
    /// `[-start_jitter, start_jitter]` per axis.
    pub start_jitter: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 20,
            start_jitter: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub success_rate: f64,
    pub mean_return: f64,
    pub mean_steps: f64,
}

/// Runs `episodes` rollouts of `policy` and reports how often the goal is
/// reached. Actions are clipped to `[-1, 1]` before stepping.
pub fn evaluate_policy<F>(spec: &MazeSpec, config: &EvalConfig, mut policy: F) -> Result<EvalSummary>
where
    F: FnMut(&[f64], &mut ChaCha8Rng) -> Result<Vec<f64>>,
{
    if config.episodes == 0 {
        return Err(SaqError::InvalidConfig("evaluation needs at least one episode".into()));
    }
    if !(0.0..0.5).contains(&config.start_jitter) {
        return Err(SaqError::InvalidConfig("start jitter must lie in [0, 0.5)".into()));
    }
    let mut start_rng = rng_for(config.seed, "eval-starts");
    let mut policy_rng = rng_for(config.seed, "eval-policy");
    let (mut successes, mut ret, mut steps) = (0usize, 0.0, 0usize);
    for _ in 0..config.episodes {
        let c = spec.start_position();
        let j = config.start_jitter;
        let mut pos = if j > 0.0 {
            [c[0] + start_rng.gen_range(-j..j), c[1] + start_rng.gen_range(-j..j)]
        } else {
            c
        };
        for _ in 0..spec.max_steps {
            let a = policy(&pos, &mut policy_rng)?;
            if a.len() != 2 {
                return Err(SaqError::Dimension {
                    what: "maze action",
                    expected: 2,
                    got: a.len(),
                });
            }
            let out = spec.step(pos, [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)]);
            steps += 1;
            ret += out.reward;
            pos = out.next;
            if out.reached {
                successes += 1;
                break;
            }
        }
    }
    let n = config.episodes as f64;
    Ok(EvalSummary {
        success_rate: successes as f64 / n,
        mean_return: ret / n,
        mean_steps: steps as f64 / n,
    })
}

/// Evaluates a discrete agent through its quantizer's decoder.
pub fn evaluate_discrete(
    spec: &MazeSpec,
    config: &EvalConfig,
    agent: &DiscreteAgent,
    quantizer: &QuantizerModel,
    mode: ActMode,
) -> Result<EvalSummary> {
    agent.check_quantizer(quantizer)?;
    evaluate_policy(spec, config, |s, rng| agent.act(quantizer, s, mode, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::maze::ScriptedExpert;

    #[test]
    fn expert_always_succeeds_and_idle_never_does() {
        let spec = MazeSpec::default_maze();
        let expert = ScriptedExpert::new(&spec).unwrap();
        let cfg = EvalConfig {
            episodes: 10,
            ..Default::default()
        };
        let good = evaluate_policy(&spec, &cfg, |s, _| Ok(expert.act([s[0], s[1]]).to_vec())).unwrap();
        assert_eq!(good.success_rate, 1.0);
        assert_eq!(good.mean_return, 1.0);
        let idle = evaluate_policy(&spec, &cfg, |_, _| Ok(vec![0.0, 0.0])).unwrap();
        assert_eq!(idle.success_rate, 0.0);
        assert_eq!(idle.mean_steps, spec.max_steps as f64);
    }

    #[test]
    fn evaluation_is_seeded() {
        let spec = MazeSpec::default_maze();
        let cfg = EvalConfig::default();
        let run = || {
            evaluate_policy(&spec, &cfg, |_, rng| Ok(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])).unwrap()
        };
        assert_eq!(run(), run());
    }
}
