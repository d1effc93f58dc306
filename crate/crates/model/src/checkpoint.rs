//! Versioned JSON checkpoints holding everything needed to rebuild a model and
//! its input scaling.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use gridflow_core::features::Standardizer;

use crate::error::{ModelError, ModelResult};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::train::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_KIND: &str = "gridflow-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: String,
    pub model: ModelConfig,
    pub standardizer: Standardizer,
    /// Systems seen during training, in order of first appearance.
    pub systems: Vec<String>,
    /// Configuration of the most recent training run.
    pub train: TrainConfig,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(model: &Model, standardizer: &Standardizer, systems: Vec<String>, train: &TrainConfig) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            kind: CHECKPOINT_KIND.into(),
            model: model.config.clone(),
            standardizer: standardizer.clone(),
            systems,
            train: train.clone(),
            params: model.params.clone(),
        }
    }

    pub fn to_model(&self) -> ModelResult<Model> {
        Model::from_params(self.model.clone(), self.params.clone())
    }

    pub fn write(&self, writer: impl Write) -> ModelResult<()> {
        let mut w = BufWriter::new(writer);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn read(reader: impl Read) -> ModelResult<Self> {
        let ckpt: Self = serde_json::from_reader(BufReader::new(reader))?;
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(ModelError::Format(format!("unexpected kind {:?}", ckpt.kind)));
        }
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(ModelError::Format(format!(
                "unsupported format version {}",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> ModelResult<()> {
        self.write(File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> ModelResult<Self> {
        Self::read(File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::Batch;
    use crate::testutil::prepared;

    #[test]
    fn round_trip_is_bit_exact() {
        let (graphs, std) = prepared("case9", 4, 3);
        let model = Model::new(ModelConfig::default(), 5).unwrap();
        let ckpt = Checkpoint::new(&model, &std, vec!["case9".into()], &TrainConfig::default());
        let mut bytes = Vec::new();
        ckpt.write(&mut bytes).unwrap();
        let back = Checkpoint::read(bytes.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        let rebuilt = back.to_model().unwrap();
        assert_eq!(
            rebuilt.params.flat_values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            model.params.flat_values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let batch = Batch::new(graphs);
        assert_eq!(rebuilt.predict(&batch).unwrap(), model.predict(&batch).unwrap());
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn rejects_foreign_kind_and_version() {
        let (_, std) = prepared("case4gs", 2, 1);
        let model = Model::new(ModelConfig::default(), 1).unwrap();
        let mut ckpt = Checkpoint::new(&model, &std, vec![], &TrainConfig::default());
        ckpt.kind = "other".into();
        let mut bytes = Vec::new();
        ckpt.write(&mut bytes).unwrap();
        assert!(matches!(Checkpoint::read(bytes.as_slice()), Err(ModelError::Format(_))));
        ckpt.kind = CHECKPOINT_KIND.into();
        ckpt.format_version = 99;
        bytes.clear();
        ckpt.write(&mut bytes).unwrap();
        assert!(matches!(Checkpoint::read(bytes.as_slice()), Err(ModelError::Format(_))));
    }

    #[test]
    fn mismatched_parameters_are_rejected() {
        let (_, std) = prepared("case4gs", 2, 1);
        let model = Model::new(ModelConfig::default(), 1).unwrap();
        let mut ckpt = Checkpoint::new(&model, &std, vec![], &TrainConfig::default());
        ckpt.model.hidden_dim = 16;
        assert!(ckpt.to_model().is_err());
    }
}
