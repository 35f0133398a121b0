use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Trained parameters by name plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub step: usize,
    pub config: TrainConfig,
    pub params: BTreeMap<String, ParamEntry>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &TrainConfig, step: usize) -> Self {
        let params = model
            .store
            .iter()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    ParamEntry {
                        shape: t.shape().to_vec(),
                        values: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Self {
            step,
            config: config.clone(),
            params,
        }
    }

    /// Rebuilds the model described by the embedded configuration.
    pub fn to_model(&self) -> Result<Model> {
        self.to_model_with(&self.config.model)
    }

    /// Loads the parameters into the layout of `model_config`. Every
    /// parameter must be present with the expected shape.
    pub fn to_model_with(&self, model_config: &ModelConfig) -> Result<Model> {
        let mut model = Model::new(model_config, self.config.seed)?;
        let mut values = Vec::with_capacity(model.store.len());
        for (name, expected) in model.store.iter() {
            let entry = self.params.get(name).ok_or_else(|| {
                Error::Checkpoint(format!(
                    "shape mismatch: parameter {name} with shape {:?} is missing from the checkpoint",
                    expected.shape()
                ))
            })?;
            if entry.shape != expected.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch: parameter {name} has shape {:?} in the checkpoint, the config expects {:?}",
                    entry.shape,
                    expected.shape()
                )));
            }
            let t = Tensor::new(entry.shape.clone(), entry.values.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
            values.push(t);
        }
        if let Some(extra) = self
            .params
            .keys()
            .find(|k| !model.store.iter().any(|(n, _)| n == k.as_str()))
        {
            return Err(Error::Checkpoint(format!(
                "shape mismatch: checkpoint parameter {extra} has no place in the configured model"
            )));
        }
        model.store.set_values(values)?;
        Ok(model)
    }

    /// One parameter per line so large checkpoints stay diffable.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{{");
        let _ = writeln!(out, "  \"step\": {},", self.step);
        let _ = writeln!(
            out,
            "  \"config\": {},",
            serde_json::to_string(&self.config).expect("serializable")
        );
        let _ = writeln!(out, "  \"params\": {{");
        for (i, (name, entry)) in self.params.iter().enumerate() {
            let sep = if i + 1 < self.params.len() { "," } else { "" };
            let _ = writeln!(
                out,
                "    {}: {}{sep}",
                serde_json::to_string(name).expect("string"),
                serde_json::to_string(entry).expect("serializable")
            );
        }
        let _ = writeln!(out, "  }}");
        let _ = writeln!(out, "}}");
        out
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {} column {}: {e}", e.line(), e.column()),
    })?;
    for (name, entry) in &ckpt.params {
        let n: usize = entry.shape.iter().product();
        if n != entry.values.len() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} declares shape {:?} but stores {} values",
                entry.shape,
                entry.values.len()
            )));
        }
    }
    Ok(ckpt)
}
