//! Optimizers on scalar quadratics.

use fcdd::numerics::Tensor;
use fcdd::train::{adam_step, sgd_nesterov_step, AdamState, DecayMode, SgdState};

fn scalar(v: f64) -> Tensor<f64> {
    Tensor::new(vec![1], vec![v]).unwrap()
}

#[test]
fn nesterov_decreases_a_quadratic_monotonically() {
    let (lr, mu) = (1e-3, 0.9);
    let mut theta = scalar(3.0);
    let mut state = SgdState::default();
    let (mut t, mut v) = (3.0f64, 0.0f64);
    let mut last = 4.5;
    for _ in 0..100 {
        let g = scalar(theta.data()[0]);
        sgd_nesterov_step(&mut [&mut theta], &[g], &mut state, lr, mu, 0.0).unwrap();
        v = mu * v + t;
        t -= lr * (t + mu * v);
        assert!((theta.data()[0] - t).abs() < 1e-14);
        let loss = 0.5 * theta.data()[0].powi(2);
        assert!(loss < last, "{loss} >= {last}");
        last = loss;
    }
}

#[test]
fn adam_converges_on_a_quadratic() {
    let mut theta = scalar(2.0);
    let mut state = AdamState::default();
    let steps = (1..=500)
        .find(|_| {
            let g = scalar(theta.data()[0]);
            adam_step(&mut [&mut theta], &[g], &mut state, 0.05, (0.9, 0.999), 0.0, 1e-8, DecayMode::Decoupled).unwrap();
            theta.data()[0].abs() < 1e-3
        })
        .expect("no convergence in 500 steps");
    assert!(steps <= 500);
}

#[test]
fn adam_first_step_moves_by_lr() {
    for g in [1e-3, 0.5, -40.0] {
        let mut theta = scalar(1.0);
        let mut state = AdamState::default();
        adam_step(&mut [&mut theta], &[scalar(g)], &mut state, 0.01, (0.9, 0.999), 0.0, 1e-8, DecayMode::Coupled).unwrap();
        let expected = 0.01 * g.abs() / (g.abs() + 1e-8);
        assert!(((1.0 - theta.data()[0]).abs() - expected).abs() < 1e-12);
    }
}
