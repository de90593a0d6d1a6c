//! Shared helpers for the integration suites. The finite-difference oracle
//! only evaluates the loss forward; it never touches `Tape::backward`.
#![allow(dead_code)]

use rpcate::model::{model_forward, HyperParams, ModelParams};
use rpcate::tape::Tape;
use rpcate::tensor::Tensor;
use rpcate::train::loss_var;

/// Loss of the full model for fixed inputs.
pub fn model_loss(x: &Tensor, target_sorted: &Tensor, hp: &HyperParams, params: &ModelParams) -> f64 {
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let pass = model_forward(&mut tape, xv, hp, &vars).unwrap();
    let tv = tape.constant(target_sorted.clone());
    let l = loss_var(&mut tape, pass.prediction, tv, &vars, hp.lambda, hp.regularizer).unwrap();
    tape.value(l).data()[0]
}

/// Analytic gradients in `ModelParams::named` order.
pub fn model_grads(x: &Tensor, target_sorted: &Tensor, hp: &HyperParams, params: &ModelParams) -> Vec<(String, Tensor)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let xv = tape.constant(x.clone());
    let pass = model_forward(&mut tape, xv, hp, &vars).unwrap();
    let tv = tape.constant(target_sorted.clone());
    let l = loss_var(&mut tape, pass.prediction, tv, &vars, hp.lambda, hp.regularizer).unwrap();
    let g = tape.backward(l).unwrap();
    vars.named().into_iter().map(|(n, &v)| (n, g.get(v))).collect()
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h` for every scalar parameter.
pub fn central_differences(
    x: &Tensor,
    target_sorted: &Tensor,
    hp: &HyperParams,
    params: &ModelParams,
    h: f64,
) -> Vec<Vec<f64>> {
    let count = params.named().len();
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let len = params.named()[k].1.len();
        let mut g = Vec::with_capacity(len);
        for i in 0..len {
            let mut plus = params.clone();
            plus.values_mut()[k].data_mut()[i] += h;
            let mut minus = params.clone();
            minus.values_mut()[k].data_mut()[i] -= h;
            g.push((model_loss(x, target_sorted, hp, &plus) - model_loss(x, target_sorted, hp, &minus)) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

/// Central differences at `h` and `2h` combined to cancel the `h²` term.
pub fn richardson(x: &Tensor, target_sorted: &Tensor, hp: &HyperParams, params: &ModelParams, h: f64) -> Vec<Vec<f64>> {
    let fine = central_differences(x, target_sorted, hp, params, h);
    let coarse = central_differences(x, target_sorted, hp, params, 2.0 * h);
    fine.iter()
        .zip(&coarse)
        .map(|(f, c)| f.iter().zip(c).map(|(a, b)| (4.0 * a - b) / 3.0).collect())
        .collect()
}

/// Relative error where `|g| > 1e-8`, absolute error otherwise.
pub fn grad_mismatch(analytic: f64, numeric: f64) -> Option<f64> {
    let scale = analytic.abs().max(numeric.abs());
    if scale > 1e-8 {
        let rel = (analytic - numeric).abs() / scale;
        (rel > 1e-4).then_some(rel)
    } else {
        let abs = (analytic - numeric).abs();
        (abs > 1e-7).then_some(abs)
    }
}
