//! Full-batch Adam training on the regularized squared-error loss, the
//! `(w, N, lr)` grid search and ablation variants.

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, MinMaxScaler};
use crate::error::{ModelError, TensorError, TrainError};
use crate::metrics::{full_report, MetricsReport};
use crate::model::{model_forward, Ablation, HyperParams, Model, ModelParams, Params, Prediction, Regularizer};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `(1/m) Σ (y − ŷ)² + λ R(Θ)` on the tape, with `R` the Euclidean norm of
/// every parameter (or its square).
pub fn loss_var(
    tape: &mut Tape,
    prediction: Var,
    target: Var,
    params: &Params<Var>,
    lambda: f64,
    regularizer: Regularizer,
) -> Result<Var, TensorError> {
    let m = tape.shape(prediction)[0];
    let diff = tape.sub(prediction, target)?;
    let sq = tape.hadamard(diff, diff)?;
    let total = tape.sum(sq)?;
    let mse = tape.scale(total, 1.0 / m as f64)?;
    if lambda == 0.0 {
        return Ok(mse);
    }
    let mut norm_sq: Option<Var> = None;
    for (_, &p) in params.named() {
        let p2 = tape.hadamard(p, p)?;
        let s = tape.sum(p2)?;
        norm_sq = Some(match norm_sq {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let norm_sq = norm_sq.expect("model has parameters");
    let penalty = match regularizer {
        Regularizer::Norm => tape.sqrt(norm_sq)?,
        Regularizer::SquaredNorm => norm_sq,
    };
    let penalty = tape.scale(penalty, lambda)?;
    tape.add(mse, penalty)
}

/// Loss value for fixed predictions and parameters.
pub fn loss(
    prediction: &[f64],
    target: &[f64],
    params: &ModelParams,
    lambda: f64,
    regularizer: Regularizer,
) -> Result<f64, TensorError> {
    if prediction.len() != target.len() {
        return Err(TensorError::ShapeMismatch {
            op: "loss",
            lhs: vec![prediction.len(), 1],
            rhs: vec![target.len(), 1],
        });
    }
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::column(prediction));
    let t = tape.constant(Tensor::column(target));
    let vars = params.register_frozen(&mut tape);
    let l = loss_var(&mut tape, p, t, &vars, lambda, regularizer)?;
    Ok(tape.value(l).data()[0])
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Lists of values to search over; every combination is one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub w: Vec<usize>,
    #[serde(alias = "N")]
    pub repetitions: Vec<usize>,
    pub lr: Vec<f64>,
}

impl Default for Grid {
    /// `w ∈ {9, 25}`, `N ∈ {1..5}`, `lr ∈ {0.01, 0.001}`.
    fn default() -> Self {
        Self {
            w: vec![9, 25],
            repetitions: vec![1, 2, 3, 4, 5],
            lr: vec![0.01, 0.001],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub hp: HyperParams,
    #[serde(default)]
    pub grid: Option<Grid>,
}

impl TrainConfig {
    pub fn new(hp: HyperParams) -> Self {
        Self { hp, grid: None }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.hp.validate()?;
        if let Some(g) = &self.grid {
            if g.w.is_empty() || g.repetitions.is_empty() || g.lr.is_empty() {
                return Err(TrainError::EmptyGrid);
            }
            for &w in &g.w {
                data::window_side(w).map_err(|e| TrainError::Config(e.to_string()))?;
            }
            if g.repetitions.contains(&0) {
                return Err(TrainError::Config("grid repetitions must be >= 1".into()));
            }
            if g.lr.iter().any(|lr| !(lr.is_finite() && *lr >= 0.0)) {
                return Err(TrainError::Config("grid learning rates must be finite and >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Hyperparameters for an ablation variant: `full`, `no_rp` or `no_ca`.
pub fn build_ablation(hp: &HyperParams, variant: &str) -> Result<HyperParams, TrainError> {
    let ablation: Ablation = variant.parse().map_err(TrainError::Config)?;
    Ok(HyperParams {
        ablation,
        ..hp.clone()
    })
}

impl Ablation {
    /// Display name used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "RP-CATE",
            Ablation::NoRp => "(RP-)CATE",
            Ablation::NoCa => "RP-(CA)TE",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Training loss at the start of each epoch.
    pub history: Vec<f64>,
}

fn diverged(epoch: usize, e: ModelError) -> TrainError {
    match e {
        ModelError::Tensor(TensorError::NonFinite { .. }) => TrainError::Diverged { epoch, loss: f64::NAN },
        other => TrainError::Model(other),
    }
}

/// Train one model with full-batch Adam (`β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8`).
/// The output bias is first shifted so the mean prediction matches the mean
/// training residual.
pub fn train(d: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_observed(d, cfg, |_, _, _| {})
}

/// [`train`], calling `observer(epoch, loss, params)` after every update.
pub fn train_observed<F>(d: &Dataset, cfg: &TrainConfig, mut observer: F) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(usize, f64, &ModelParams),
{
    cfg.validate()?;
    let hp = cfg.hp.resolved(d.n())?;
    if d.m() < hp.w {
        return Err(ModelError::TooFewSamples { m: d.m(), w: hp.w }.into());
    }
    let dims = hp.dims(d.n())?;
    let scaler = if hp.scale_features {
        Some(MinMaxScaler::fit(d.features()).map_err(ModelError::from)?)
    } else {
        None
    };
    let mut model = Model {
        params: ModelParams::init(&hp, &dims, hp.seed),
        hp,
        scaler,
        feature_names: d.feature_names().to_vec(),
    };
    let x = model.prepare(d.features())?;
    let perm = data::sort_permutation(&(0..d.m()).map(|i| x.get2(i, model.hp.x_prime)).collect::<Vec<_>>());
    let target = Tensor::column(&perm.iter().map(|&i| d.y()[i]).collect::<Vec<_>>());

    // Start the output bias at the residual mean.
    let pred = model.predict(d.features())?;
    let shift = (d.y().iter().sum::<f64>() - pred.sorted.iter().sum::<f64>()) / d.m() as f64;
    model.params.head.b_l.data_mut()[0] += shift;
    let mut adam = Adam::new(model.hp.lr);
    let mut history = Vec::with_capacity(model.hp.epochs);
    for epoch in 1..=model.hp.epochs {
        let mut tape = Tape::new();
        let vars = model.params.register(&mut tape);
        let xv = tape.constant(x.clone());
        let pass = model_forward(&mut tape, xv, &model.hp, &vars).map_err(|e| diverged(epoch, e))?;
        debug_assert_eq!(pass.perm, perm);
        let tv = tape.constant(target.clone());
        let l = loss_var(&mut tape, pass.prediction, tv, &vars, model.hp.lambda, model.hp.regularizer)
            .map_err(|e| diverged(epoch, e.into()))?;
        let value = tape.value(l).data()[0];
        if !value.is_finite() {
            return Err(TrainError::Diverged { epoch, loss: value });
        }
        history.push(value);
        let grads = tape.backward(l).map_err(ModelError::from)?;
        let grads: Vec<Tensor> = vars.named().into_iter().map(|(_, &v)| grads.get(v)).collect();
        adam.step(&mut model.params.values_mut(), &grads);
        if !model.params.is_finite() {
            return Err(TrainError::Diverged { epoch, loss: value });
        }
        observer(epoch, value, &model.params);
        if epoch == 1 || epoch % 500 == 0 {
            log::debug!("epoch {epoch}: loss {value:.6e}");
        }
    }
    Ok(TrainOutcome { model, history })
}

/// Evaluation of a model on a dataset split.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub mechanistic: MetricsReport,
    pub hybrid: MetricsReport,
    pub prediction: Prediction,
}

/// Predict the whole split at once and score it.
pub fn evaluate(model: &Model, d: &Dataset) -> Result<Evaluation, TrainError> {
    let prediction = model.predict(d.features())?;
    let (mechanistic, hybrid) = full_report(&prediction.original, d, model.hp.ablation.label())?;
    Ok(Evaluation {
        mechanistic,
        hybrid,
        prediction,
    })
}

/// One grid cell and its result.
#[derive(Debug, Clone)]
pub struct GridRow {
    pub hp: HyperParams,
    pub result: Result<MetricsReport, String>,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub best: usize,
    pub mechanistic: MetricsReport,
}

impl GridResult {
    pub fn best_hp(&self) -> &HyperParams {
        &self.rows[self.best].hp
    }

    /// CSV with columns `w,N,lr,MAE,RMSE,ARE,#Err<1%,#Err>5%,MIR,status`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("w,N,lr,MAE,RMSE,ARE,#Err<1%,#Err>5%,MIR,status\n");
        for row in &self.rows {
            let (w, n, lr) = (row.hp.w, row.hp.repetitions, row.hp.lr);
            match &row.result {
                Ok(r) => {
                    let are = r.are_percent.map(|a| format!("{a:?}")).unwrap_or_default();
                    s.push_str(&format!(
                        "{w},{n},{lr:?},{:?},{:?},{are},{},{},{:?},ok\n",
                        r.mae, r.rmse, r.err_lt_1pct, r.err_gt_5pct, r.mir_percent
                    ));
                }
                Err(e) => {
                    let e = e.replace([',', '\n'], ";");
                    s.push_str(&format!("{w},{n},{lr:?},,,,,,,failed: {e}\n"));
                }
            }
        }
        s
    }
}

/// Cells of a grid in canonical `(w, N, lr)` order, each with seed
/// `base seed + cell index`. Duplicate values are dropped.
pub fn grid_cells(base: &HyperParams, grid: &Grid) -> Vec<HyperParams> {
    let mut ws = grid.w.clone();
    ws.sort_unstable();
    ws.dedup();
    let mut ns = grid.repetitions.clone();
    ns.sort_unstable();
    ns.dedup();
    let mut lrs = grid.lr.clone();
    lrs.sort_by(f64::total_cmp);
    lrs.dedup();
    let mut cells = Vec::with_capacity(ws.len() * ns.len() * lrs.len());
    for &w in &ws {
        for &n in &ns {
            for &lr in &lrs {
                cells.push(HyperParams {
                    w,
                    repetitions: n,
                    lr,
                    seed: base.seed.wrapping_add(cells.len() as u64),
                    ..base.clone()
                });
            }
        }
    }
    cells
}

/// Ranks by higher MIR, then lower MAE, fewer repetitions, smaller window.
fn better(a: (&HyperParams, &MetricsReport), b: (&HyperParams, &MetricsReport)) -> bool {
    let key = |(hp, r): (&HyperParams, &MetricsReport)| (-r.mir_percent, r.mae, hp.repetitions, hp.w);
    let (ka, kb) = (key(a), key(b));
    ka.0.total_cmp(&kb.0)
        .then(ka.1.total_cmp(&kb.1))
        .then(ka.2.cmp(&kb.2))
        .then(ka.3.cmp(&kb.3))
        .is_lt()
}

/// Train every cell on `train_set`, score on `val_set` by MIR.
pub fn grid_search(train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig, jobs: usize) -> Result<GridResult, TrainError> {
    grid_search_with(train_set, val_set, cfg, jobs, |hp| {
        let outcome = train(train_set, &TrainConfig::new(hp.clone()))?;
        Ok(evaluate(&outcome.model, val_set)?.hybrid)
    })
}

/// [`grid_search`] with a custom per-cell runner.
pub fn grid_search_with<F>(
    _train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    jobs: usize,
    runner: F,
) -> Result<GridResult, TrainError>
where
    F: Fn(&HyperParams) -> Result<MetricsReport, TrainError> + Sync,
{
    use rayon::prelude::*;

    cfg.validate()?;
    let grid = cfg.grid.clone().ok_or(TrainError::EmptyGrid)?;
    let cells = grid_cells(&cfg.hp, &grid);
    let run = |hp: &HyperParams| {
        let result = runner(hp).map_err(|e| {
            log::warn!("grid cell w={} N={} lr={} failed: {e}", hp.w, hp.repetitions, hp.lr);
            e.to_string()
        });
        GridRow { hp: hp.clone(), result }
    };
    let rows: Vec<GridRow> = if jobs <= 1 {
        cells.iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        pool.install(|| cells.par_iter().map(run).collect())
    };

    let mut best: Option<usize> = None;
    for (i, row) in rows.iter().enumerate() {
        let Ok(report) = &row.result else { continue };
        let wins = match best {
            None => true,
            Some(b) => better((&row.hp, report), (&rows[b].hp, rows[b].result.as_ref().expect("best is ok"))),
        };
        if wins {
            best = Some(i);
        }
    }
    let best = best.ok_or(TrainError::AllCellsFailed)?;
    let (mechanistic, _) = full_report(&vec![0.0; val_set.m()], val_set, "mechanistic")?;
    Ok(GridResult { rows, best, mechanistic })
}
