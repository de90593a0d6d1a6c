mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpcate::model::{Ablation, HyperParams, ModelParams, ResidualMode};
use rpcate::data::to_pid_var;
use rpcate::tape::Tape;
use rpcate::tensor::Tensor;

use common::*;

fn check(hp: HyperParams, m: usize, n: usize, seed: u64) {
    check_with_step(hp, m, n, seed, Step::Central(1e-5));
}

enum Step {
    Central(f64),
    Richardson(f64),
}

fn check_with_step(hp: HyperParams, m: usize, n: usize, seed: u64, step: Step) {
    let hp = hp.resolved(n).unwrap();
    let dims = hp.dims(n).unwrap();
    let params = ModelParams::init(&hp, &dims, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let x = Tensor::matrix(m, n, (0..m * n).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let y = Tensor::column(&(0..m).map(|_| rng.gen_range(-0.5..0.5)).collect::<Vec<_>>());
    let analytic = model_grads(&x, &y, &hp, &params);
    let numeric = match step {
        Step::Central(h) => central_differences(&x, &y, &hp, &params, h),
        Step::Richardson(h) => richardson(&x, &y, &hp, &params, h),
    };
    let mut failures = Vec::new();
    for ((name, a), num) in analytic.iter().zip(&numeric) {
        for (i, (&ga, &gn)) in a.data().iter().zip(num).enumerate() {
            if let Some(err) = grad_mismatch(ga, gn) {
                failures.push(format!("{name}[{i}]: analytic {ga:e} numeric {gn:e} err {err:e}"));
            }
        }
    }
    assert!(failures.is_empty(), "{} mismatches:\n{}", failures.len(), failures.join("\n"));
}

#[test]
fn full_model_text_residual() {
    let hp = HyperParams { w: 9, repetitions: 2, d_h: Some(4), d_m: Some(4), lambda: 1e-3, ..HyperParams::default() };
    check(hp, 12, 3, 7);
}

#[test]
fn literal_residual_and_squared_norm() {
    let hp = HyperParams {
        w: 4,
        repetitions: 3,
        residual: ResidualMode::Literal,
        regularizer: rpcate::model::Regularizer::SquaredNorm,
        lambda: 1e-2,
        ..HyperParams::default()
    };
    check(hp, 7, 2, 3);
}

#[test]
fn ablations_and_shared_params() {
    // Several gradients here sit near 1e-8, where plain central differences
    // lose about four digits.
    for ablation in [Ablation::NoRp, Ablation::NoCa] {
        let hp = HyperParams { w: 4, repetitions: 2, ablation, ..HyperParams::default() };
        check_with_step(hp, 6, 3, 11, Step::Richardson(1e-4));
    }
    let hp = HyperParams { w: 9, repetitions: 2, shared_params: true, ..HyperParams::default() };
    check_with_step(hp, 10, 2, 5, Step::Richardson(1e-4));
}

#[test]
fn pseudo_image_gather_gradients() {
    let (m, n, w) = (7, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = Tensor::matrix(m, n, (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let weights = Tensor::new(vec![m, 2, 2, n], (0..m * w * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let run = |a: &Tensor, grad: bool| {
        let mut tape = Tape::new();
        let av = if grad { tape.param(a.clone()) } else { tape.constant(a.clone()) };
        let pid = to_pid_var(&mut tape, av, w).unwrap();
        let s = tape.sigmoid(pid).unwrap();
        let c = tape.constant(weights.clone());
        let h = tape.hadamard(s, c).unwrap();
        let l = tape.sum(h).unwrap();
        let value = tape.value(l).data()[0];
        let g = grad.then(|| tape.backward(l).unwrap().get(av));
        (value, g)
    };
    let analytic = run(&a, true).1.unwrap();
    let h = 1e-5;
    for i in 0..a.len() {
        let mut plus = a.clone();
        plus.data_mut()[i] += h;
        let mut minus = a.clone();
        minus.data_mut()[i] -= h;
        let numeric = (run(&plus, false).0 - run(&minus, false).0) / (2.0 * h);
        assert!(grad_mismatch(analytic.data()[i], numeric).is_none(), "entry {i}: {} vs {numeric}", analytic.data()[i]);
    }
}
