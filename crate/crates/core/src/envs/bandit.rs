use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::envs::data::{DatasetMeta, Transition, TransitionDataset};
use crate::error::{Result, SaqError};
use crate::seed::derive_seed;

/// Single-step bandit whose data has two action modes per state: `a = s` or
/// `a = -s` with equal probability, plus Gaussian noise, clipped to `[-1, 1]`.
/// Both modes pay reward 1.
pub fn generate_bimodal_bandit(n_samples: usize, noise_sigma: f64, seed: u64) -> Result<TransitionDataset> {
    if n_samples == 0 {
        return Err(SaqError::InvalidConfig("need at least one sample".into()));
    }
    let noise = Normal::new(0.0, noise_sigma.max(0.0))
        .map_err(|e| SaqError::InvalidConfig(format!("noise sigma: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "bimodal-bandit"));
    let mut ds = TransitionDataset::new(DatasetMeta {
        env: "bandit".into(),
        state_dim: 2,
        action_dim: 2,
        seed,
    });
    for _ in 0..n_samples {
        let s = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let action: Vec<f64> = s
            .iter()
            .map(|&x| {
                let eps = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (sign * x + eps).clamp(-1.0, 1.0)
            })
            .collect();
        ds.push(Transition {
            state: s.to_vec(),
            action,
            reward: 1.0,
            next_state: s.to_vec(),
            terminal: true,
        })?;
    }
    Ok(ds)
}

/// Single-mode control: `a = s/2` exactly, reward 1.
pub fn generate_single_mode(n_samples: usize, seed: u64) -> Result<TransitionDataset> {
    if n_samples == 0 {
        return Err(SaqError::InvalidConfig("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "single-mode"));
    let mut ds = TransitionDataset::new(DatasetMeta {
        env: "single-mode".into(),
        state_dim: 2,
        action_dim: 2,
        seed,
    });
    for _ in 0..n_samples {
        let s = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        ds.push(Transition {
            state: s.to_vec(),
            action: vec![0.5 * s[0], 0.5 * s[1]],
            reward: 1.0,
            next_state: s.to_vec(),
            terminal: true,
        })?;
    }
    Ok(ds)
}
