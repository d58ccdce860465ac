use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use super::loops::TrainConfig;
use super::optim::OptimizerState;
use crate::data::SyntheticConfig;
use crate::model::{ModelConfig, Stage};
use crate::numerics::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume or evaluate a run. The byte layout lives in
/// the std companion crate.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub stage: Stage,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// Synthetic dataset the run used, if any.
    pub data: Option<SyntheticConfig>,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
    pub seeds: Vec<u64>,
    /// Free-form recorded measurements, e.g. final test accuracy.
    pub metrics: BTreeMap<String, f64>,
}

impl ModelCheckpoint {
    pub fn new(stage: Stage, model: ModelConfig, params: ParamStore) -> Self {
        ModelCheckpoint {
            version: CHECKPOINT_VERSION,
            stage,
            model,
            train: None,
            data: None,
            params,
            optimizer: None,
            seeds: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }
}
