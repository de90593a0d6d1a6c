//! The RP-CATE forward graph.
//!
//! One repetition runs the recurrent perceptron over the sorted rows, derives
//! per-feature channel attention from pooled pseudo-images of its output,
//! reweights the output by that attention and passes it through a three-layer
//! sigmoid network. Repetitions after the first consume the previous output
//! plus the initial sorted input. A linear head maps the final output to one
//! prediction per row.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, sort_permutation, MinMaxScaler};
use crate::error::ModelError;
use crate::tape::{PoolMode, Tape, Var};
use crate::tensor::Tensor;

macro_rules! param_group {
    ($(#[$meta:meta])* $name:ident { $($field:ident => $label:literal),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            pub const NAMES: &'static [&'static str] = &[$($label),*];

            pub fn fields(&self) -> Vec<(&'static str, &T)> {
                vec![$(($label, &self.$field)),*]
            }

            pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut T)> {
                vec![$(($label, &mut self.$field)),*]
            }

            pub fn try_map<U, E>(
                &self,
                mut f: impl FnMut(&'static str, &T) -> Result<U, E>,
            ) -> Result<$name<U>, E> {
                Ok($name { $($field: f($label, &self.$field)?,)* })
            }
        }
    };
}

param_group!(
    /// Recurrent perceptron: recurrent hidden layer then a two-layer perceptron.
    RpParams {
        u => "U",
        w => "W",
        b_hl1 => "b_HL1",
        v => "V",
        b_hl2 => "b_HL2",
        w_hl2 => "W_HL2",
        b => "b",
    }
);

param_group!(
    /// The two excitation networks fed by max- and average-pooled features.
    AttentionParams {
        ffn1_w1 => "FFN1.W1",
        ffn1_b1 => "FFN1.b1",
        ffn1_w2 => "FFN1.W2",
        ffn1_b2 => "FFN1.b2",
        ffn2_w1 => "FFN2.W1",
        ffn2_b1 => "FFN2.b1",
        ffn2_w2 => "FFN2.W2",
        ffn2_b2 => "FFN2.b2",
    }
);

param_group!(
    FfmParams {
        w1 => "FFN3.W1",
        b1 => "FFN3.b1",
        w2 => "FFN3.W2",
        b2 => "FFN3.b2",
        w3 => "FFN3.W3",
        b3 => "FFN3.b3",
    }
);

param_group!(
    HeadParams {
        w_l => "W_L",
        b_l => "b_L",
    }
);

/// Parameters of one repetition. Modules removed by an ablation are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct RepParams<T> {
    pub rp: Option<RpParams<T>>,
    pub attention: Option<AttentionParams<T>>,
    pub ffm: FfmParams<T>,
}

/// Every trainable array of one model. `T` is `Tensor` for stored values and
/// [`Var`] once registered on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub reps: Vec<RepParams<T>>,
    pub head: HeadParams<T>,
}

pub type ModelParams = Params<Tensor>;

impl<T> Params<T> {
    /// `(name, value)` pairs in canonical order. Repetition-scoped names carry
    /// a `.r` suffix, 1-based.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (r, rep) in self.reps.iter().enumerate() {
            let mut fields = Vec::new();
            if let Some(rp) = &rep.rp {
                fields.extend(rp.fields());
            }
            if let Some(att) = &rep.attention {
                fields.extend(att.fields());
            }
            fields.extend(rep.ffm.fields());
            out.extend(fields.into_iter().map(|(label, v)| (format!("{label}.{}", r + 1), v)));
        }
        out.extend(self.head.fields().into_iter().map(|(l, v)| (l.to_string(), v)));
        out
    }

    /// Same order as [`Params::named`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        for rep in &mut self.reps {
            if let Some(rp) = &mut rep.rp {
                out.extend(rp.fields_mut().into_iter().map(|(_, v)| v));
            }
            if let Some(att) = &mut rep.attention {
                out.extend(att.fields_mut().into_iter().map(|(_, v)| v));
            }
            out.extend(rep.ffm.fields_mut().into_iter().map(|(_, v)| v));
        }
        out.extend(self.head.fields_mut().into_iter().map(|(_, v)| v));
        out
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(String, &T) -> Result<U, E>) -> Result<Params<U>, E> {
        let mut reps = Vec::with_capacity(self.reps.len());
        for (r, rep) in self.reps.iter().enumerate() {
            let suffix = r + 1;
            let mut g = |label: &'static str, v: &T| f(format!("{label}.{suffix}"), v);
            reps.push(RepParams {
                rp: rep.rp.as_ref().map(|p| p.try_map(&mut g)).transpose()?,
                attention: rep.attention.as_ref().map(|p| p.try_map(&mut g)).transpose()?,
                ffm: rep.ffm.try_map(&mut g)?,
            });
        }
        let head = self.head.try_map(|label, v| f(label.to_string(), v))?;
        Ok(Params { reps, head })
    }

    /// Parameters used by repetition `r` (0-based).
    pub fn rep(&self, r: usize) -> &RepParams<T> {
        &self.reps[r.min(self.reps.len() - 1)]
    }
}

impl ModelParams {
    /// Euclidean norm of all parameters concatenated.
    pub fn norm(&self) -> f64 {
        self.named().iter().map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn num_values(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Register every array as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> Params<Var> {
        self.try_map::<_, std::convert::Infallible>(|_, t| Ok(tape.param(t.clone())))
            .expect("infallible")
    }

    /// Register every array as a constant leaf (inference only).
    pub fn register_frozen(&self, tape: &mut Tape) -> Params<Var> {
        self.try_map::<_, std::convert::Infallible>(|_, t| Ok(tape.constant(t.clone())))
            .expect("infallible")
    }

    /// Seeded initialization: weights `U(−1/√fan_in, 1/√fan_in)` with
    /// `fan_in` the row count, biases zero.
    pub fn init(hp: &HyperParams, dims: &Dims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        shape_template(hp, dims)
            .try_map::<_, std::convert::Infallible>(|name, shape| {
                let shape = shape.clone();
                if is_bias(&name) {
                    return Ok(Tensor::zeros(&shape));
                }
                let bound = 1.0 / (shape[0] as f64).sqrt();
                let numel = shape.iter().product();
                let data = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
                Ok(Tensor::new(shape, data).expect("template shape"))
            })
            .expect("infallible")
    }

    /// Same structure, every array zero.
    pub fn zeros(hp: &HyperParams, dims: &Dims) -> Self {
        shape_template(hp, dims)
            .try_map::<_, std::convert::Infallible>(|_, s| Ok(Tensor::zeros(s)))
            .expect("infallible")
    }
}

fn is_bias(name: &str) -> bool {
    let label = name.split('.').rev().find(|part| part.parse::<usize>().is_err()).unwrap_or(name);
    label.starts_with('b')
}

/// Shapes of every parameter array for a configuration.
pub fn shape_template(hp: &HyperParams, dims: &Dims) -> Params<Vec<usize>> {
    let Dims {
        n,
        d_h,
        d_m,
        n1,
        n2,
        n3,
        n4,
    } = *dims;
    let rep = RepParams {
        rp: (hp.ablation != Ablation::NoRp).then(|| RpParams {
            u: vec![n, d_h],
            w: vec![d_h, d_h],
            b_hl1: vec![1, d_h],
            v: vec![d_h, d_m],
            b_hl2: vec![1, d_m],
            w_hl2: vec![d_m, n],
            b: vec![1, n],
        }),
        attention: (hp.ablation != Ablation::NoCa).then(|| AttentionParams {
            ffn1_w1: vec![n, n1],
            ffn1_b1: vec![1, n1],
            ffn1_w2: vec![n1, n],
            ffn1_b2: vec![1, n],
            ffn2_w1: vec![n, n2],
            ffn2_b1: vec![1, n2],
            ffn2_w2: vec![n2, n],
            ffn2_b2: vec![1, n],
        }),
        ffm: FfmParams {
            w1: vec![n, n3],
            b1: vec![1, n3],
            w2: vec![n3, n4],
            b2: vec![1, n4],
            w3: vec![n4, n],
            b3: vec![1, n],
        },
    };
    let count = if hp.shared_params { 1 } else { hp.repetitions };
    Params {
        reps: vec![rep; count],
        head: HeadParams {
            w_l: vec![n, 1],
            b_l: vec![1, 1],
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Recurrent perceptron replaced by the identity.
    NoRp,
    /// Attention replaced by the uniform `1/n` map.
    NoCa,
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Self::Full),
            "no_rp" => Ok(Self::NoRp),
            "no_ca" => Ok(Self::NoCa),
            other => Err(format!("unknown ablation `{other}` (expected full, no_rp or no_ca)")),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::NoRp => "no_rp",
            Self::NoCa => "no_ca",
        })
    }
}

/// How repetitions after the first build their input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// Previous feed-forward output plus the initial sorted input.
    #[default]
    Text,
    /// Previous repetition's input plus the initial sorted input.
    Literal,
}

impl FromStr for ResidualMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(Self::Text),
            "literal" => Ok(Self::Literal),
            other => Err(format!("unknown residual mode `{other}` (expected text or literal)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    /// `λ‖Θ‖₂`
    #[default]
    Norm,
    /// `λ‖Θ‖₂²`
    SquaredNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Column the rows are sorted by.
    pub x_prime: usize,
    /// Window size, a perfect square.
    pub w: usize,
    /// Number of repetitions of the RP / attention / feed-forward block.
    #[serde(alias = "N")]
    pub repetitions: usize,
    pub lr: f64,
    pub d_h: Option<usize>,
    pub d_m: Option<usize>,
    pub n1: Option<usize>,
    pub n2: Option<usize>,
    pub n3: Option<usize>,
    pub n4: Option<usize>,
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub residual: ResidualMode,
    pub regularizer: Regularizer,
    pub shared_params: bool,
    pub scale_features: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            x_prime: 0,
            w: 25,
            repetitions: 2,
            lr: 0.001,
            d_h: None,
            d_m: None,
            n1: None,
            n2: None,
            n3: None,
            n4: None,
            lambda: 0.0,
            epochs: 2000,
            seed: 0,
            ablation: Ablation::Full,
            residual: ResidualMode::Text,
            regularizer: Regularizer::Norm,
            shared_params: false,
            scale_features: false,
        }
    }
}

/// Resolved layer widths for `n` input features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub d_h: usize,
    pub d_m: usize,
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    pub n4: usize,
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        data::window_side(self.w).map_err(|e| ModelError::Config(e.to_string()))?;
        if self.repetitions < 1 {
            return bad("repetitions must be >= 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be >= 0, got {}", self.lr));
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        Ok(())
    }

    /// Widths for `n` features: `d_h = d_m = 4n` and `n¹..n⁴ = 2n` unless set.
    pub fn dims(&self, n: usize) -> Result<Dims, ModelError> {
        if n == 0 {
            return Err(ModelError::Config("need at least one feature".into()));
        }
        if self.x_prime >= n {
            return Err(ModelError::Config(format!(
                "x_prime {} out of range for {n} features",
                self.x_prime
            )));
        }
        let dims = Dims {
            n,
            d_h: self.d_h.unwrap_or(4 * n),
            d_m: self.d_m.unwrap_or(4 * n),
            n1: self.n1.unwrap_or(2 * n),
            n2: self.n2.unwrap_or(2 * n),
            n3: self.n3.unwrap_or(2 * n),
            n4: self.n4.unwrap_or(2 * n),
        };
        if dims.d_h == 0 || dims.d_m == 0 {
            return Err(ModelError::Config("hidden widths must be positive".into()));
        }
        if dims.n1 != dims.n2 || dims.n1 <= n {
            return Err(ModelError::Config(format!(
                "attention widths need n1 = n2 > n (n1 = {}, n2 = {}, n = {n})",
                dims.n1, dims.n2
            )));
        }
        if dims.n3 <= n || dims.n4 <= n {
            return Err(ModelError::Config(format!(
                "feed-forward widths need n3 > n and n4 > n (n3 = {}, n4 = {}, n = {n})",
                dims.n3, dims.n4
            )));
        }
        Ok(dims)
    }

    /// Copy with every optional width filled in for `n` features.
    pub fn resolved(&self, n: usize) -> Result<Self, ModelError> {
        let d = self.dims(n)?;
        Ok(Self {
            d_h: Some(d.d_h),
            d_m: Some(d.d_m),
            n1: Some(d.n1),
            n2: Some(d.n2),
            n3: Some(d.n3),
            n4: Some(d.n4),
            ..self.clone()
        })
    }
}

fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, ModelError> {
    let xw = tape.matmul(x, w)?;
    Ok(tape.add(xw, b)?)
}

/// Recurrent perceptron over the rows of `psd`, `h₀ = 0`:
/// `hᵢ = σ(PSDᵢU + hᵢ₋₁W + b_HL1)`, `y_RP,ᵢ = σ(σ(hᵢV + b_HL2)W_HL2 + b)`.
pub fn rp_forward(tape: &mut Tape, psd: Var, p: &RpParams<Var>) -> Result<Var, ModelError> {
    let (m, _) = tape.value(psd).dims2()?;
    // input projections for every step at once
    let drive = dense(tape, psd, p.u, p.b_hl1)?;
    let mut hidden = Vec::with_capacity(m);
    let mut prev: Option<Var> = None;
    for i in 0..m {
        let x_i = tape.gather_rows(drive, &[i])?;
        let pre = match prev {
            Some(h) => {
                let hw = tape.matmul(h, p.w)?;
                tape.add(x_i, hw)?
            }
            None => x_i,
        };
        let h = tape.sigmoid(pre)?;
        hidden.push(h);
        prev = Some(h);
    }
    let h_all = tape.concat_rows(&hidden)?;
    let z = dense(tape, h_all, p.v, p.b_hl2)?;
    let z = tape.sigmoid(z)?;
    let y = dense(tape, z, p.w_hl2, p.b)?;
    Ok(tape.sigmoid(y)?)
}

fn excitation(tape: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var, ModelError> {
    let h = dense(tape, x, w1, b1)?;
    let h = tape.relu(h)?;
    dense(tape, h, w2, b2)
}

/// Per-row, per-feature attention: pool the pseudo-image of `y_rp`, excite
/// both pooled views, then `softmax(σ(H₁ + H₂))` along features.
pub fn channel_attention(tape: &mut Tape, y_rp: Var, w: usize, p: &AttentionParams<Var>) -> Result<Var, ModelError> {
    let pid = data::to_pid_var(tape, y_rp, w)?;
    let h_max = tape.pool_spatial(pid, PoolMode::Max)?;
    let h_avg = tape.pool_spatial(pid, PoolMode::Avg)?;
    let h1 = excitation(tape, h_max, p.ffn1_w1, p.ffn1_b1, p.ffn1_w2, p.ffn1_b2)?;
    let h2 = excitation(tape, h_avg, p.ffn2_w1, p.ffn2_b1, p.ffn2_w2, p.ffn2_b2)?;
    let sum = tape.add(h1, h2)?;
    let gate = tape.sigmoid(sum)?;
    Ok(tape.softmax_rows(gate)?)
}

/// Three dense layers `n → n³ → n⁴ → n`, each followed by a sigmoid.
pub fn ffm_forward(tape: &mut Tape, x: Var, p: &FfmParams<Var>) -> Result<Var, ModelError> {
    let mut h = x;
    for (w, b) in [(p.w1, p.b1), (p.w2, p.b2), (p.w3, p.b3)] {
        let z = dense(tape, h, w, b)?;
        h = tape.sigmoid(z)?;
    }
    Ok(h)
}

/// `y_FFM W_L + b_L`, with scalar `b_L` broadcast over rows.
pub fn predict_head(tape: &mut Tape, y_ffm: Var, p: &HeadParams<Var>) -> Result<Var, ModelError> {
    dense(tape, y_ffm, p.w_l, p.b_l)
}

/// Handles produced by [`model_forward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `m × 1` predictions in sorted (PSD) order.
    pub prediction: Var,
    /// Attention map of every repetition, `m × n`, sorted order.
    pub attentions: Vec<Var>,
    /// `perm[j]` is the original row at sorted position `j`.
    pub perm: Vec<usize>,
}

/// Full forward pass over `x` (original row order, `m × n`).
pub fn model_forward(tape: &mut Tape, x: Var, hp: &HyperParams, params: &Params<Var>) -> Result<ForwardPass, ModelError> {
    let (m, n) = tape.value(x).dims2()?;
    if m < hp.w {
        return Err(ModelError::TooFewSamples { m, w: hp.w });
    }
    if hp.x_prime >= n {
        return Err(ModelError::Config(format!("x_prime {} out of range for {n} features", hp.x_prime)));
    }
    let keys: Vec<f64> = (0..m).map(|i| tape.value(x).get2(i, hp.x_prime)).collect();
    let perm = sort_permutation(&keys);
    let initial = tape.gather_rows(x, &perm)?;

    let uniform = (hp.ablation == Ablation::NoCa).then(|| tape.constant(Tensor::full(&[m, n], 1.0 / n as f64)));
    let mut attentions = Vec::with_capacity(hp.repetitions);
    let mut input = initial;
    let mut y_ffm = None;
    for r in 0..hp.repetitions {
        if r > 0 {
            let carried = match hp.residual {
                ResidualMode::Text => y_ffm.expect("set by previous repetition"),
                ResidualMode::Literal => input,
            };
            input = tape.add(carried, initial)?;
        }
        let rep = params.rep(r);
        let y_rp = match &rep.rp {
            Some(rp) => rp_forward(tape, input, rp)?,
            None => input,
        };
        let att = match (&rep.attention, uniform) {
            (Some(p), _) => channel_attention(tape, y_rp, hp.w, p)?,
            (None, Some(u)) => u,
            (None, None) => return Err(ModelError::Config("attention parameters missing".into())),
        };
        attentions.push(att);
        let weighted = tape.hadamard(y_rp, att)?;
        y_ffm = Some(ffm_forward(tape, weighted, &rep.ffm)?);
    }
    let prediction = predict_head(tape, y_ffm.expect("at least one repetition"), &params.head)?;
    Ok(ForwardPass {
        prediction,
        attentions,
        perm,
    })
}

/// Output of [`Model::predict`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub sorted: Vec<f64>,
    /// Predictions aligned with the input rows.
    pub original: Vec<f64>,
    pub perm: Vec<usize>,
    /// Per repetition, `m × n` in original row order.
    pub attentions: Vec<Tensor>,
}

/// A parameter set together with everything needed to evaluate it.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub hp: HyperParams,
    pub params: ModelParams,
    pub scaler: Option<MinMaxScaler>,
    pub feature_names: Vec<String>,
}

impl Model {
    pub fn n_features(&self) -> usize {
        self.params.head.w_l.shape()[0]
    }

    /// Apply the stored feature scaler, checking the feature count.
    pub fn prepare(&self, features: &Tensor) -> Result<Tensor, ModelError> {
        let (_, n) = features.dims2()?;
        if n != self.n_features() {
            return Err(ModelError::FeatureMismatch {
                expected: self.n_features(),
                got: n,
            });
        }
        Ok(match &self.scaler {
            Some(s) => s.transform(features)?,
            None => features.clone(),
        })
    }

    pub fn predict(&self, features: &Tensor) -> Result<Prediction, ModelError> {
        let x = self.prepare(features)?;
        let mut tape = Tape::new();
        let params = self.params.register_frozen(&mut tape);
        let xv = tape.constant(x);
        let pass = model_forward(&mut tape, xv, &self.hp, &params)?;
        let sorted = tape.value(pass.prediction).data().to_vec();
        let original = data::unsort_values(&sorted, &pass.perm)?;
        let inverse = data::invert_permutation(&pass.perm);
        let attentions = pass
            .attentions
            .iter()
            .map(|&a| {
                let t = tape.value(a);
                let rows: Vec<Vec<f64>> = inverse.iter().map(|&j| t.row(j).to_vec()).collect();
                Tensor::from_rows(&rows)
            })
            .collect::<Result<_, _>>()?;
        Ok(Prediction {
            sorted,
            original,
            perm: pass.perm,
            attentions,
        })
    }
}
