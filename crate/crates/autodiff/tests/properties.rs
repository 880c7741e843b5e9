use proptest::prelude::*;
use saq_autodiff::{logsumexp, softmax, Tape, Tensor};

proptest! {
    #[test]
    fn softmax_is_a_probability_vector(v in prop::collection::vec(-50.0f64..50.0, 1..64)) {
        let p = softmax(&v);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_shift_equivariance(v in prop::collection::vec(-20.0f64..20.0, 1..32), c in -500.0f64..500.0) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        prop_assert!((logsumexp(&shifted) - logsumexp(&v) - c).abs() < 1e-9);
    }

    #[test]
    fn stop_gradient_blocks_upstream(v in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(v.clone()));
        let y = t.tanh(x);
        let s = t.stop_gradient(y);
        let e = t.exp(s);
        let loss = t.sum(e);
        let g = t.backward(loss).unwrap();
        prop_assert!(g.wrt(x).data().iter().all(|&d| d == 0.0));
    }
}
