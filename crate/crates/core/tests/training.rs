use rpcate::data::Dataset;
use rpcate::error::TrainError;
use rpcate::metrics::MetricsReport;
use rpcate::model::{HyperParams, Regularizer};
use rpcate::synth::{generate, BiasKind, GenConfig};
use rpcate::tensor::Tensor;
use rpcate::train::{evaluate, grid_search, grid_search_with, train, train_observed, Grid, TrainConfig};

fn small_task(seed: u64) -> (Dataset, Dataset) {
    let d = generate(&GenConfig::new(48, BiasKind::Monotone, 0.01, seed)).unwrap();
    d.split_at(36).unwrap()
}

fn small_hp() -> HyperParams {
    HyperParams {
        w: 4,
        repetitions: 2,
        lr: 0.01,
        epochs: 40,
        ..HyperParams::default()
    }
}

fn zero_dataset(m: usize) -> Dataset {
    Dataset::new(
        Tensor::zeros(&[m, 3]),
        vec![1.0; m],
        vec![1.0; m],
        vec!["a".into(), "b".into(), "c".into()],
    )
    .unwrap()
}

fn norm_trace(regularizer: Regularizer, epochs: usize) -> Vec<f64> {
    let hp = HyperParams {
        w: 4,
        repetitions: 2,
        lambda: 0.1,
        regularizer,
        lr: 0.001,
        epochs,
        ..HyperParams::default()
    };
    let mut norms = Vec::new();
    train_observed(&zero_dataset(10), &TrainConfig::new(hp), |_, _, p| norms.push(p.norm())).unwrap();
    norms
}

#[test]
fn regularizer_shrinks_norm_on_degenerate_data() {
    for regularizer in [Regularizer::Norm, Regularizer::SquaredNorm] {
        let norms = norm_trace(regularizer, 400);
        let tail = &norms[norms.len() - norms.len() / 10..];
        assert!(
            tail.windows(2).all(|w| w[1] <= w[0]),
            "{regularizer:?}: norm rose in the last 10% of epochs"
        );
        assert!(norms.last().unwrap() < &norms[0]);
    }
}

#[test]
fn regularized_norm_stays_bounded() {
    // Near zero Adam moves every coordinate by about lr per step, so the
    // norm settles into a small band instead of decreasing forever.
    let norms = norm_trace(Regularizer::Norm, 1500);
    assert!(norms.iter().all(|&v| v <= norms[0]));
    assert!(norms[1000..].iter().all(|&v| v < 0.01), "{:e}", norms[1000..].iter().cloned().fold(0.0, f64::max));
}

#[test]
fn same_seed_is_bit_identical() {
    let (tr, _) = small_task(3);
    let cfg = TrainConfig::new(HyperParams { seed: 5, ..small_hp() });
    let a = train(&tr, &cfg).unwrap();
    let b = train(&tr, &cfg).unwrap();
    let bits = |h: &[f64]| h.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.history), bits(&b.history));
    assert_eq!(a.model, b.model);
    let c = train(&tr, &TrainConfig::new(HyperParams { seed: 6, ..small_hp() })).unwrap();
    assert_ne!(a.model.params, c.model.params);
}

#[test]
fn training_reduces_loss() {
    let (tr, _) = small_task(1);
    let out = train(&tr, &TrainConfig::new(HyperParams { epochs: 150, ..small_hp() })).unwrap();
    assert_eq!(out.history.len(), 150);
    assert!(out.history.last().unwrap() < &(0.5 * out.history[0]), "{:?}", (out.history[0], out.history.last()));
}

#[test]
fn window_larger_than_split_fails_before_training() {
    let (tr, _) = small_task(1);
    let hp = HyperParams { w: 49, ..small_hp() };
    let mut calls = 0;
    let err = train_observed(&tr, &TrainConfig::new(hp), |_, _, _| calls += 1).unwrap_err();
    assert!(matches!(err, TrainError::Model(_)), "{err}");
    assert_eq!(calls, 0);
}

fn fake_report(mir: f64, mae: f64) -> MetricsReport {
    MetricsReport {
        variant: "RP-CATE".into(),
        m: 12,
        mae,
        rmse: mae,
        are_percent: Some(1.0),
        err_lt_1pct: 6,
        err_gt_5pct: 0,
        mir_percent: mir,
        zero_denominator: 0,
    }
}

#[test]
fn default_grid_has_twenty_rows_and_ranks_by_mir() {
    let (tr, ev) = small_task(2);
    let cfg = TrainConfig {
        hp: small_hp(),
        grid: Some(Grid::default()),
    };
    let result = grid_search_with(&tr, &ev, &cfg, 1, |hp| {
        Ok(fake_report(10.0 * hp.repetitions as f64 + hp.lr, 0.1))
    })
    .unwrap();
    assert_eq!(result.rows.len(), 20);
    let best = result.best_hp();
    assert_eq!((best.w, best.repetitions, best.lr), (9, 5, 0.01));
    assert_eq!(result.to_csv().lines().count(), 21);
    assert!(result.to_csv().starts_with("w,N,lr,MAE,RMSE,ARE,#Err<1%,#Err>5%,MIR,status\n"));
}

#[test]
fn failed_cell_is_recorded_and_grid_completes() {
    let (tr, ev) = small_task(2);
    let cfg = TrainConfig {
        hp: small_hp(),
        grid: Some(Grid { w: vec![4], repetitions: vec![1, 2, 3], lr: vec![0.01] }),
    };
    let result = grid_search_with(&tr, &ev, &cfg, 2, |hp| {
        if hp.repetitions == 3 {
            Err(TrainError::Diverged { epoch: 7, loss: f64::NAN })
        } else {
            Ok(fake_report(hp.repetitions as f64, 0.1))
        }
    })
    .unwrap();
    assert_eq!(result.rows.len(), 3);
    assert!(result.rows[2].result.is_err());
    assert_eq!(result.best_hp().repetitions, 2);
    assert!(result.to_csv().lines().nth(3).unwrap().contains("failed: training diverged at epoch 7"));

    let all_fail = grid_search_with(&tr, &ev, &cfg, 1, |_| Err(TrainError::EmptyGrid));
    assert!(matches!(all_fail, Err(TrainError::AllCellsFailed)));
}

#[test]
fn ties_prefer_lower_mae_then_fewer_repetitions() {
    let (tr, ev) = small_task(2);
    let cfg = TrainConfig {
        hp: small_hp(),
        grid: Some(Grid { w: vec![1, 4], repetitions: vec![1, 2], lr: vec![0.01] }),
    };
    let result = grid_search_with(&tr, &ev, &cfg, 1, |_| Ok(fake_report(50.0, 0.1))).unwrap();
    assert_eq!((result.best_hp().w, result.best_hp().repetitions), (1, 1));
    let result = grid_search_with(&tr, &ev, &cfg, 1, |hp| Ok(fake_report(50.0, 0.1 / hp.w as f64))).unwrap();
    assert_eq!((result.best_hp().w, result.best_hp().repetitions), (4, 1));
}

#[test]
fn grid_result_ignores_cell_order_and_job_count() {
    let (tr, ev) = small_task(4);
    let hp = HyperParams { epochs: 15, ..small_hp() };
    let forward = TrainConfig {
        hp: hp.clone(),
        grid: Some(Grid { w: vec![1, 4], repetitions: vec![1, 2], lr: vec![0.01, 0.001] }),
    };
    let reversed = TrainConfig {
        hp,
        grid: Some(Grid { w: vec![4, 1], repetitions: vec![2, 1], lr: vec![0.001, 0.01] }),
    };
    let a = grid_search(&tr, &ev, &forward, 1).unwrap();
    let b = grid_search(&tr, &ev, &reversed, 3).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.best, b.best);
    assert_eq!(a.best_hp(), b.best_hp());
}

#[test]
fn best_cell_retrains_to_the_same_report() {
    let (tr, ev) = small_task(5);
    let cfg = TrainConfig {
        hp: HyperParams { epochs: 15, ..small_hp() },
        grid: Some(Grid { w: vec![4], repetitions: vec![1, 2], lr: vec![0.01] }),
    };
    let result = grid_search(&tr, &ev, &cfg, 1).unwrap();
    let best = result.best_hp().clone();
    let text = toml::to_string(&best).unwrap();
    let reloaded: HyperParams = toml::from_str(&text).unwrap();
    let retrained = train(&tr, &TrainConfig::new(reloaded)).unwrap();
    let report = evaluate(&retrained.model, &ev).unwrap().hybrid;
    assert_eq!(&report, result.rows[result.best].result.as_ref().unwrap());
}
