use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::{Model, ModelSpec};
use crate::nn::optim::Adam;
use crate::nn::params::ParameterSet;
use crate::scalar::Scalar;
use crate::windowing::{ChannelStats, WindowingConfig};

pub const CHECKPOINT_FORMAT: &str = "keyscreen-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to score new windows: model, input normalization and
/// the window geometry it was trained with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    pub params: ParameterSet<T>,
    pub stats: ChannelStats<T>,
    pub windowing: WindowingConfig,
    pub optimizer: Option<Adam<T>>,
    pub epoch: usize,
    pub lr: f64,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(
        model: &Model<T>,
        stats: &ChannelStats<T>,
        windowing: WindowingConfig,
        optimizer: Option<&Adam<T>>,
        epoch: usize,
        lr: f64,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            spec: model.spec.clone(),
            params: model.params.clone(),
            stats: stats.clone(),
            windowing,
            optimizer: optimizer.cloned(),
            epoch,
            lr,
        }
    }

    pub fn model(&self) -> Model<T> {
        Model { spec: self.spec.clone(), params: self.params.clone() }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        // the stored parameters must match what the spec builds
        let fresh = Model::<T>::new(ck.spec.clone())?;
        let mut check = fresh.params.clone();
        check.load_values(&ck.params)?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
