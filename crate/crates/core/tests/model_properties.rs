use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpcate::data::cyclic_windows;
use rpcate::model::{model_forward, rp_forward, Ablation, HyperParams, ModelParams, ResidualMode};
use rpcate::tape::Tape;
use rpcate::tensor::Tensor;

fn random_x(m: usize, n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(m, n, (0..m * n).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn setup(hp: HyperParams, n: usize, seed: u64, gain: f64) -> (HyperParams, ModelParams) {
    let hp = hp.resolved(n).unwrap();
    let dims = hp.dims(n).unwrap();
    let mut params = ModelParams::init(&hp, &dims, seed);
    for t in params.values_mut() {
        *t = t.map(|v| v * gain);
    }
    (hp, params)
}

/// Predictions in PSD order plus every attention map.
fn forward(x: &Tensor, hp: &HyperParams, params: &ModelParams) -> (Vec<f64>, Vec<Tensor>) {
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let pass = model_forward(&mut tape, xv, hp, &vars).unwrap();
    let atts = pass.attentions.iter().map(|&a| tape.value(a).clone()).collect();
    (tape.value(pass.prediction).data().to_vec(), atts)
}

fn window() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![1usize, 4, 9])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_distributions(
        seed in any::<u64>(),
        n in 1usize..5,
        w in window(),
        extra in 0usize..12,
        reps in 1usize..4,
        gain in 0.1f64..6.0,
    ) {
        let m = w + extra;
        let hp = HyperParams { w, repetitions: reps, ..HyperParams::default() };
        let (hp, params) = setup(hp, n, seed, gain);
        let (pred, atts) = forward(&random_x(m, n, seed ^ 1), &hp, &params);
        prop_assert_eq!(pred.len(), m);
        prop_assert_eq!(atts.len(), reps);
        for a in &atts {
            prop_assert_eq!(a.shape(), &[m, n]);
            for i in 0..m {
                let sum: f64 = a.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-9);
                prop_assert!(a.row(i).iter().all(|&v| v > 0.0 && v < 1.0 || n == 1 && v == 1.0));
            }
        }
    }

    #[test]
    fn output_is_one_column_for_any_valid_shape(
        seed in any::<u64>(),
        n in 1usize..4,
        w in window(),
        extra in 0usize..10,
        reps in 1usize..4,
        ablation in prop::sample::select(vec![Ablation::Full, Ablation::NoRp, Ablation::NoCa]),
        literal in any::<bool>(),
    ) {
        let m = w + extra;
        let residual = if literal { ResidualMode::Literal } else { ResidualMode::Text };
        let hp = HyperParams { w, repetitions: reps, ablation, residual, ..HyperParams::default() };
        let (hp, params) = setup(hp, n, seed, 1.0);
        let mut tape = Tape::new();
        let vars = params.register_frozen(&mut tape);
        let xv = tape.constant(random_x(m, n, seed));
        let pass = model_forward(&mut tape, xv, &hp, &vars).unwrap();
        prop_assert_eq!(tape.value(pass.prediction).shape(), &[m, 1]);
    }

    #[test]
    fn recurrent_perceptron_is_causal(seed in any::<u64>(), m in 2usize..15, n in 1usize..4, j_frac in 0.0f64..1.0) {
        let hp = HyperParams { w: 1, repetitions: 1, ..HyperParams::default() };
        let (_, params) = setup(hp, n, seed, 2.0);
        let j = 1 + ((m - 1) as f64 * j_frac) as usize % (m - 1);
        let x = random_x(m, n, seed ^ 7);
        let mut bumped = x.clone();
        for c in 0..n {
            bumped.data_mut()[j * n + c] += 0.5;
        }
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let vars = params.register_frozen(&mut tape);
            let xv = tape.constant(x.clone());
            let y = rp_forward(&mut tape, xv, vars.rep(0).rp.as_ref().unwrap()).unwrap();
            tape.value(y).clone()
        };
        let (a, b) = (run(&x), run(&bumped));
        for i in 0..j {
            prop_assert_eq!(a.row(i), b.row(i), "row {} changed after perturbing row {}", i, j);
        }
        prop_assert_ne!(a.row(j), b.row(j));
    }

    #[test]
    fn shuffling_input_rows_leaves_sorted_output_unchanged(seed in any::<u64>(), extra in 0usize..10, shuffle_seed in any::<u64>()) {
        let (n, w) = (3, 4);
        let m = w + extra;
        let hp = HyperParams { w, repetitions: 2, ..HyperParams::default() };
        let (hp, params) = setup(hp, n, seed, 1.0);
        let x = random_x(m, n, seed ^ 3);
        let mut order: Vec<usize> = (0..m).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        for i in (1..m).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| x.row(i).to_vec()).collect();
        let shuffled = Tensor::from_rows(&rows).unwrap();
        let (a, atts_a) = forward(&x, &hp, &params);
        let (b, atts_b) = forward(&shuffled, &hp, &params);
        prop_assert_eq!(a, b);
        prop_assert_eq!(atts_a, atts_b);
    }

    #[test]
    fn without_recurrence_a_row_only_reaches_windows_containing_it(
        seed in any::<u64>(),
        extra in 0usize..12,
        j_frac in 0.0f64..1.0,
    ) {
        let (n, w) = (3, 4);
        let m = w + extra;
        let hp = HyperParams { w, repetitions: 1, ablation: Ablation::NoRp, ..HyperParams::default() };
        let (hp, params) = setup(hp, n, seed, 2.0);
        // sort key strictly increasing so PSD order is the row order
        let mut x = random_x(m, n, seed ^ 5);
        for i in 0..m {
            x.data_mut()[i * n] = i as f64;
        }
        let j = ((m as f64 * j_frac) as usize).min(m - 1);
        let mut bumped = x.clone();
        bumped.data_mut()[j * n + 1] += 0.75;
        let (a, _) = forward(&x, &hp, &params);
        let (b, _) = forward(&bumped, &hp, &params);
        let windows = cyclic_windows(m, w).unwrap();
        for i in 0..m {
            if !windows[i].contains(&j) {
                prop_assert_eq!(a[i], b[i], "row {} moved though its window excludes {}", i, j);
            }
        }
        prop_assert_ne!(a[j], b[j]);
    }

    #[test]
    fn backward_is_bit_deterministic(seed in any::<u64>()) {
        let hp = HyperParams { w: 4, repetitions: 2, lambda: 1e-3, ..HyperParams::default() };
        let (hp, params) = setup(hp, 3, seed, 1.0);
        let x = random_x(7, 3, seed);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let xv = tape.constant(x);
        let pass = model_forward(&mut tape, xv, &hp, &vars).unwrap();
        let y = tape.constant(Tensor::column(&[0.1, -0.2, 0.3, 0.0, 0.5, -0.4, 0.2]));
        let loss = rpcate::train::loss_var(&mut tape, pass.prediction, y, &vars, hp.lambda, hp.regularizer).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        for (_, &v) in vars.named() {
            let bits = |t: Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(g1.get(v)), bits(g2.get(v)));
        }
    }
}

#[test]
fn zero_parameters_give_uniform_attention() {
    for n in 1..5 {
        let hp = HyperParams { w: 4, repetitions: 3, ..HyperParams::default() }.resolved(n).unwrap();
        let params = ModelParams::zeros(&hp, &hp.dims(n).unwrap());
        let (_, atts) = forward(&random_x(6, n, 2), &hp, &params);
        for a in atts {
            assert!(a.data().iter().all(|&v| v == 1.0 / n as f64));
        }
    }
}

#[test]
fn no_ca_attention_is_exactly_uniform() {
    let hp = HyperParams { w: 4, repetitions: 2, ablation: Ablation::NoCa, ..HyperParams::default() };
    let (hp, params) = setup(hp, 3, 9, 1.0);
    let (_, atts) = forward(&random_x(8, 3, 1), &hp, &params);
    for a in atts {
        assert!(a.data().iter().all(|&v| v == 1.0 / 3.0));
    }
}
