//! JSON checkpoints. Each parameter is stored by name with its shape and
//! row-major values; floats are written in shortest round-trip form, so a
//! save/load cycle reproduces every bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::MinMaxScaler;
use crate::error::ModelError;
use crate::model::{shape_template, Ablation, HyperParams, Model};
use crate::tensor::Tensor;

pub const FORMAT: &str = "rpcate-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub variant: Ablation,
    pub hyperparams: HyperParams,
    pub feature_names: Vec<String>,
    pub scaler: Option<MinMaxScaler>,
    pub params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            format: FORMAT.to_string(),
            variant: model.hp.ablation,
            hyperparams: model.hp.clone(),
            feature_names: model.feature_names.clone(),
            scaler: model.scaler.clone(),
            params: model
                .params
                .named()
                .into_iter()
                .map(|(name, t)| ParamEntry {
                    name,
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<Model, ModelError> {
        let bad = |msg: String| ModelError::Checkpoint(msg);
        if self.format != FORMAT {
            return Err(bad(format!("unsupported format `{}`", self.format)));
        }
        if self.variant != self.hyperparams.ablation {
            return Err(bad("variant label disagrees with hyperparameters".into()));
        }
        self.hyperparams.validate()?;
        let n = self.feature_names.len();
        let dims = self.hyperparams.dims(n)?;
        let mut stored: BTreeMap<String, ParamEntry> = BTreeMap::new();
        for entry in self.params {
            if stored.contains_key(&entry.name) {
                return Err(bad(format!("duplicate parameter `{}`", entry.name)));
            }
            stored.insert(entry.name.clone(), entry);
        }
        let params = shape_template(&self.hyperparams, &dims).try_map(|name, shape| {
            let entry = stored
                .remove(&name)
                .ok_or_else(|| bad(format!("missing parameter `{name}`")))?;
            if &entry.shape != shape {
                return Err(bad(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    entry.shape
                )));
            }
            let t = Tensor::new(entry.shape, entry.values)?;
            if !t.is_finite() {
                return Err(bad(format!("parameter `{name}` has non-finite values")));
            }
            Ok(t)
        })?;
        if let Some(extra) = stored.keys().next() {
            return Err(bad(format!("unexpected parameter `{extra}`")));
        }
        if let Some(s) = &self.scaler {
            if s.min.len() != n || s.max.len() != n {
                return Err(bad("scaler width differs from feature count".into()));
            }
        }
        Ok(Model {
            hp: self.hyperparams,
            params,
            scaler: self.scaler,
            feature_names: self.feature_names,
        })
    }
}

pub fn to_string(model: &Model) -> String {
    serde_json::to_string_pretty(&Checkpoint::from_model(model)).expect("checkpoint serializes")
}

pub fn from_str(text: &str) -> Result<Model, ModelError> {
    let ck: Checkpoint = serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    ck.into_model()
}

pub fn save(model: &Model, path: &Path) -> Result<(), ModelError> {
    fs::write(path, to_string(model) + "\n").map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<Model, ModelError> {
    let text = fs::read_to_string(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;

    fn model(ablation: Ablation, scale: bool) -> Model {
        let hp = HyperParams {
            w: 9,
            ablation,
            scale_features: scale,
            ..HyperParams::default()
        }
        .resolved(3)
        .unwrap();
        let dims = hp.dims(3).unwrap();
        Model {
            params: ModelParams::init(&hp, &dims, 42),
            hp,
            scaler: scale.then(|| MinMaxScaler {
                min: vec![0.1, -2.0, 1.0 / 3.0],
                max: vec![0.9, 7.5, 2.0],
            }),
            feature_names: vec!["a".into(), "b".into(), "c".into()],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for (ab, scale) in [(Ablation::Full, false), (Ablation::NoRp, true), (Ablation::NoCa, false)] {
            let m = model(ab, scale);
            let back = from_str(&to_string(&m)).unwrap();
            assert_eq!(back, m);
            for ((_, a), (_, b)) in m.params.named().iter().zip(back.params.named().iter()) {
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a), bits(b));
            }
        }
    }

    #[test]
    fn variant_label_is_written() {
        let text = to_string(&model(Ablation::NoCa, false));
        assert!(text.contains("\"variant\": \"no_ca\""));
    }

    #[test]
    fn tampered_checkpoints_rejected() {
        let m = model(Ablation::Full, false);
        let mut ck = Checkpoint::from_model(&m);
        ck.params.pop();
        assert!(ck.into_model().is_err());

        let mut ck = Checkpoint::from_model(&m);
        ck.params[0].shape = vec![1, 1];
        assert!(ck.into_model().is_err());

        let mut ck = Checkpoint::from_model(&m);
        ck.format = "other".into();
        assert!(ck.into_model().is_err());
    }
}
