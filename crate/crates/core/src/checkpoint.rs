//! JSON checkpoints: learned parameters plus everything needed to rebuild
//! the frozen parts.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::encoders::EncoderSpec;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::ParameterSet;
use crate::train::{TrainConfig, TrainLog};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub config_hash: String,
    /// Hash of the manifest the model was trained on.
    pub manifest_hash: String,
    pub d: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub class_names: Vec<String>,
    pub fine_descriptors: Vec<String>,
    pub encoder: EncoderSpec,
    pub encoder_checksum: String,
    pub params: ParameterSet,
    pub log: TrainLog,
}

impl Checkpoint {
    pub fn new(model: &Model, config: &TrainConfig, dataset: &Dataset, log: TrainLog) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            config_hash: config.hash(),
            manifest_hash: dataset.hash.clone(),
            d: model.dim,
            classes: model.classes(),
            class_names: dataset.manifest.class_names.clone(),
            fine_descriptors: dataset.manifest.fine_descriptors.clone(),
            encoder: model.encoder.spec(),
            encoder_checksum: model.encoder.checksum(),
            params: model.params.clone(),
            log,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("checkpoint version {} is not supported", ckpt.version),
            });
        }
        Ok(ckpt)
    }

    /// Rebuilds the model and checks that the frozen encoder regenerates
    /// bit-identically.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(
            self.config.model.clone(),
            self.d,
            &self.class_names,
            &self.fine_descriptors,
            self.config.seed,
        )?;
        if model.encoder.checksum() != self.encoder_checksum || model.encoder.spec() != self.encoder {
            return Err(Error::Config(
                "frozen encoder does not match the checkpoint checksum".into(),
            ));
        }
        let expected: Vec<&str> = model.params.names().collect();
        let found: Vec<&str> = self.params.names().collect();
        if expected != found {
            return Err(Error::Config(
                "checkpoint parameters do not match the model layout".into(),
            ));
        }
        for (name, p) in self.params.iter() {
            model.params.set_value(name, p.value.clone())?;
        }
        Ok(model)
    }

    /// Errors unless `dataset` has the dimension and classes this checkpoint
    /// was trained for.
    pub fn check_compatible(&self, dataset: &Dataset) -> Result<()> {
        let m = &dataset.manifest;
        let mut problems = Vec::new();
        if m.d != self.d {
            problems.push(format!("d {} vs {}", self.d, m.d));
        }
        if m.classes != self.classes {
            problems.push(format!("C {} vs {}", self.classes, m.classes));
        } else if m.class_names != self.class_names {
            problems.push("class names differ".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Incompatible {
                checkpoint_hash: self.config_hash.clone(),
                manifest_hash: dataset.hash.clone(),
                detail: problems.join(", "),
            })
        }
    }
}
