use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use saq_autodiff::{primitive_catalog, Activation, Mlp, Tape, Tensor};

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for case in primitive_catalog() {
        for instance in 0..100 {
            let report = case.check(&mut rng).unwrap();
            assert!(
                report.passed,
                "{} instance {instance}: rel {} abs {}",
                case.name, report.max_rel_error, report.max_abs_error
            );
        }
    }
}

#[test]
fn mlp_parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mlp = Mlp::new(&[3, 7, 2], Activation::Tanh, &mut rng);
    let x = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let y = Tensor::matrix(4, 2, (0..8).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();

    let loss_of = |m: &Mlp| {
        let p = m.predict(&x).unwrap();
        p.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 8.0
    };

    let mut tape = Tape::new();
    let bound = mlp.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let out = mlp.forward(&mut tape, &bound, xv).unwrap();
    let loss = tape.mse(out, yv).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic = mlp.params.collect(&grads, &bound);

    let h = 1e-5;
    for p in 0..mlp.params.len() {
        for j in 0..mlp.params.tensor(p).len() {
            let orig = mlp.params.tensor(p).data()[j];
            mlp.params.tensor_mut(p).data_mut()[j] = orig + h;
            let up = loss_of(&mlp);
            mlp.params.tensor_mut(p).data_mut()[j] = orig - h;
            let down = loss_of(&mlp);
            mlp.params.tensor_mut(p).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[p].data()[j];
            let err = (a - numeric).abs();
            assert!(err < 1e-6 || err / a.abs().max(numeric.abs()) < 1e-4, "param {p}[{j}]: {a} vs {numeric}");
        }
    }
}
