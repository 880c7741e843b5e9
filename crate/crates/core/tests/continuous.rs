use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use saq_autodiff::{Activation, Mlp, Tensor};
use saq_core::continuous::{
    affine_action_q, continuous_bc_loss, estimate_log_integral, exact_penalty_grid, grid_log_integral,
    squashed_log_density, train_continuous, ContinuousAgent, ContinuousAlgorithm, ContinuousConfig, ContinuousQ,
    SquashedGaussianPolicy,
};
use saq_core::envs::data::{Batch, DatasetMeta, Transition, TransitionDataset};
use saq_core::nets::Normalizer;
use saq_core::SaqError;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Policy whose mean and log-std are the given constants at every state.
fn constant_policy(state_dim: usize, mean: &[f64], log_std: &[f64]) -> SquashedGaussianPolicy {
    let d = mean.len();
    let bias: Vec<f64> = mean.iter().chain(log_std).cloned().collect();
    let net = Mlp::from_tensors(
        vec![Tensor::matrix(state_dim, 2 * d, vec![0.0; state_dim * 2 * d]).unwrap(), Tensor::vector(bias)],
        Activation::Relu,
    )
    .unwrap();
    SquashedGaussianPolicy::from_net(net).unwrap()
}

fn states(n: usize) -> Tensor {
    Tensor::matrix(n, 2, (0..2 * n).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
}

/// `ln ∫_{[-1,1]^2} exp(b + w·a) da`, evaluated per axis.
fn linear_log_integral(w: &[f64], b: f64) -> f64 {
    b + w.iter().map(|&wi| if wi == 0.0 { 2f64.ln() } else { (2.0 * wi.sinh() / wi).ln() }).sum::<f64>()
}

fn unit_gaussian_nll(a: f64) -> f64 {
    let u = a.atanh();
    0.5 * u * u + 0.5 * (2.0 * std::f64::consts::PI).ln() + (1.0 - a * a).ln()
}

#[test]
fn estimator_of_constant_q_is_near_c_plus_ln4() {
    let c = 0.7;
    let q = affine_action_q(2, &[0.0, 0.0], c).unwrap();
    let policy = constant_policy(2, &[0.2, -0.1], &[-0.5, -0.5]);
    let est = estimate_log_integral(&q, &policy, &states(4), 10_000, &mut rng(3)).unwrap();
    for e in est {
        assert!((e - (c + 4f64.ln())).abs() < 0.05, "{e}");
    }
}

#[test]
fn estimator_variance_shrinks_with_samples() {
    let q = affine_action_q(2, &[2.0, -1.0], 0.0).unwrap();
    let policy = constant_policy(2, &[0.0, 0.0], &[-1.0, -1.0]);
    let s = states(1);
    let variance = |n: usize| {
        let mut r = rng(n as u64);
        let v: Vec<f64> = (0..200).map(|_| estimate_log_integral(&q, &policy, &s, n, &mut r).unwrap()[0]).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let (small, large) = (variance(10), variance(1000));
    assert!(small > large, "{small} vs {large}");
}

#[test]
fn grid_integral_of_linear_q_matches_closed_form() {
    let (w, b) = ([1.2, -0.4], 0.3);
    let q = affine_action_q(2, &w, b).unwrap();
    let got = grid_log_integral(&q, &states(3), 512).unwrap();
    let want = linear_log_integral(&w, b);
    for g in got {
        assert!((g - want).abs() < 1e-5, "{g} vs {want}");
    }
}

#[test]
fn exact_penalty_subtracts_mean_data_q() {
    let (w, b) = ([0.5, 1.0], -0.2);
    let q = affine_action_q(2, &w, b).unwrap();
    let actions = vec![0.1, 0.2, -0.3, 0.4];
    let batch = Batch {
        states: states(2),
        actions: Tensor::matrix(2, 2, actions.clone()).unwrap(),
        rewards: vec![0.0; 2],
        next_states: states(2),
        terminals: vec![false; 2],
    };
    let q_data = actions.chunks(2).map(|a| b + w[0] * a[0] + w[1] * a[1]).sum::<f64>() / 2.0;
    let want = linear_log_integral(&w, b) - q_data;
    let got = exact_penalty_grid(&q, &batch, 256).unwrap();
    assert!((got - want).abs() < 1e-4, "{got} vs {want}");
}

#[test]
fn grid_integral_converges_under_refinement() {
    let mut r = rng(11);
    for _ in 0..5 {
        let net = Mlp::new(&[4, 16, 16, 1], Activation::Tanh, &mut r);
        let q = ContinuousQ::from_net(net, 2).unwrap();
        let s = Tensor::matrix(4, 2, (0..8).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let coarse = grid_log_integral(&q, &s, 256).unwrap();
        let fine = grid_log_integral(&q, &s, 512).unwrap();
        for (c, f) in coarse.iter().zip(&fine) {
            assert!((c - f).abs() < 1e-3, "{c} vs {f}");
        }
    }
}

#[test]
fn grid_rejects_coarse_resolution() {
    let q = affine_action_q(2, &[0.0, 0.0], 0.0).unwrap();
    assert!(matches!(grid_log_integral(&q, &states(1), 8), Err(SaqError::InvalidConfig(_))));
}

#[test]
fn bc_loss_of_unit_gaussian_matches_density() {
    let policy = constant_policy(2, &[0.0, 0.0], &[0.0, 0.0]);
    let actions = vec![0.1, -0.5, 0.9, 0.0, -0.7, 0.3];
    let batch = Batch {
        states: states(3),
        actions: Tensor::matrix(3, 2, actions.clone()).unwrap(),
        rewards: vec![0.0; 3],
        next_states: states(3),
        terminals: vec![false; 3],
    };
    let want = actions.iter().map(|&a| unit_gaussian_nll(a)).sum::<f64>() / 3.0;
    let got = continuous_bc_loss(&policy, &batch).unwrap();
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    let direct = -squashed_log_density(&[0.0, 0.0], &[0.0, 0.0], &actions[..2]);
    assert!((direct - unit_gaussian_nll(0.1) - unit_gaussian_nll(-0.5)).abs() < 1e-9);
}

#[test]
fn squashed_density_integrates_to_one() {
    let (mean, log_std) = ([0.3, -0.2], [-0.5, -0.3]);
    let mut r = rng(11);
    let n = 100_000;
    let total: f64 = (0..n)
        .map(|_| {
            let a = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
            squashed_log_density(&mean, &log_std, &a).exp()
        })
        .sum();
    let integral = 4.0 * total / n as f64;
    assert!((integral - 1.0).abs() < 0.02, "{integral}");
}

#[test]
fn sampled_log_probs_match_density() {
    let policy = constant_policy(2, &[0.4, -0.3], &[-0.7, -0.2]);
    let s = states(5);
    let (actions, logp) = policy.sample(&s, 3, &mut rng(5)).unwrap();
    assert_eq!(actions.rows(), 15);
    for (i, lp) in logp.iter().enumerate() {
        let want = squashed_log_density(&[0.4, -0.3], &[-0.7, -0.2], actions.row(i));
        assert!((lp - want).abs() < 1e-6, "{lp} vs {want}");
    }
}

fn dataset(action_dim: usize, rows: Vec<(Vec<f64>, Vec<f64>, f64)>) -> TransitionDataset {
    let mut ds = TransitionDataset::new(DatasetMeta {
        env: "synthetic".into(),
        state_dim: 2,
        action_dim,
        seed: 0,
    });
    for (state, action, reward) in rows {
        ds.push(Transition {
            next_state: state.clone(),
            state,
            action,
            reward,
            terminal: false,
        })
        .unwrap();
    }
    ds
}

#[test]
fn bc_recovers_gaussian_parameters() {
    let (mu, sigma) = (0.4, 0.5);
    let noise: Normal<f64> = Normal::new(mu, sigma).unwrap();
    let mut r = rng(21);
    let rows = (0..2000)
        .map(|_| (vec![0.0, 0.0], vec![noise.sample(&mut r).tanh()], 0.0))
        .collect();
    let ds = dataset(1, rows);
    let cfg = ContinuousConfig {
        algorithm: ContinuousAlgorithm::Bc,
        hidden: vec![16],
        steps: 3000,
        log_every: 500,
        learning_rate: 3e-3,
        seed: 2,
        ..Default::default()
    };
    let (agent, trace) = train_continuous(&ds, &cfg, None).unwrap();
    assert_eq!(trace.columns(), ["step", "bc_loss", "eval_success"]);
    assert!(agent.q.is_none());
    let p = agent.policy.params(&Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()).unwrap();
    assert!((p.mean.data()[0] - mu).abs() < 0.05, "{:?}", p.mean);
    assert!((p.log_std.data()[0].exp() - sigma).abs() < 0.05, "{:?}", p.log_std);
}

#[test]
fn zero_discount_zero_alpha_regresses_rewards() {
    let mut r = rng(4);
    let rows: Vec<_> = (0..500)
        .map(|_| {
            let s = vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
            let a = vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
            let reward = 0.5 * s[0] + a[0] - 0.5 * a[1];
            (s, a, reward)
        })
        .collect();
    let ds = dataset(2, rows);
    let cfg = ContinuousConfig {
        alpha: 0.0,
        gamma: 0.0,
        hidden: vec![32, 32],
        steps: 2000,
        n_samples: 1,
        penalty_states: 8,
        log_every: 1000,
        seed: 6,
        ..Default::default()
    };
    let (agent, _) = train_continuous(&ds, &cfg, None).unwrap();
    let q = agent.q_values(&ds.states(), &ds.actions()).unwrap();
    let mse = q.iter().zip(ds.transitions()).map(|(q, t)| (q - t.reward).powi(2)).sum::<f64>() / ds.len() as f64;
    assert!(mse < 0.05, "{mse}");
}

#[test]
fn cql_rejects_non_planar_actions() {
    let ds = dataset(1, vec![(vec![0.0, 0.0], vec![0.1], 0.0)]);
    let cfg = ContinuousConfig {
        steps: 1,
        ..Default::default()
    };
    assert!(matches!(train_continuous(&ds, &cfg, None), Err(SaqError::Unsupported(_))));
}

#[test]
fn agent_round_trips_and_detects_corruption() {
    let cfg = ContinuousConfig {
        hidden: vec![8],
        ..Default::default()
    };
    let agent = ContinuousAgent::new(2, 2, &cfg, Normalizer::identity(2), &mut rng(9)).unwrap();
    let bytes = agent.to_bytes();
    assert_eq!(&bytes[..4], b"SAQC");
    assert_eq!(ContinuousAgent::from_bytes(&bytes).unwrap(), agent);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("agent.bin");
    agent.save(&path).unwrap();
    assert_eq!(ContinuousAgent::load(&path).unwrap(), agent);

    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x40;
    assert!(ContinuousAgent::from_bytes(&bad).is_err());
    assert!(ContinuousAgent::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}
