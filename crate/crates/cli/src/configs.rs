//! JSON config files. Every file carries a versioned `schema` string and
//! rejects unknown keys, so a typo fails loudly instead of silently falling
//! back to a default.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use transfusion_core::network::ModelConfig;
use transfusion_core::trainer::{AdamConfig, LrSchedule, TrainConfig};

use crate::CmdError;

pub const PHANTOM_SCHEMA: &str = "phantom-config/1";
pub const TRAIN_SCHEMA: &str = "train-config/1";

/// Dataset generation settings; command-line flags override each count.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub schema: String,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

/// On-disk training profile; converts into the core trainer config.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub schema: String,
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub schedule: LrSchedule,
    #[serde(default)]
    pub adam: AdamConfig,
    pub augment: bool,
    pub seed: u64,
}

impl TrainFile {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr0: self.lr0,
            schedule: self.schedule.clone(),
            adam: self.adam,
            augment: self.augment,
            seed: self.seed,
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CmdError> {
    let bytes = fs::read(path)
        .map_err(|e| CmdError::validation(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CmdError::validation(format!("{}: {e}", path.display())))
}

fn expect_schema(path: &Path, got: &str, want: &str) -> Result<(), CmdError> {
    if got == want {
        Ok(())
    } else {
        Err(CmdError::validation(format!(
            "{}: schema {got:?}, this build expects {want:?}",
            path.display()
        )))
    }
}

pub fn load_phantom(path: &Path) -> Result<PhantomSpec, CmdError> {
    let spec: PhantomSpec = read_json(path)?;
    expect_schema(path, &spec.schema, PHANTOM_SCHEMA)?;
    Ok(spec)
}

pub fn load_train(path: &Path) -> Result<TrainFile, CmdError> {
    let file: TrainFile = read_json(path)?;
    expect_schema(path, &file.schema, TRAIN_SCHEMA)?;
    if file.epochs == 0 || file.batch == 0 {
        return Err(CmdError::validation(format!(
            "{}: epochs and batch must be positive",
            path.display()
        )));
    }
    Ok(file)
}

pub fn load_model(path: &Path) -> Result<ModelConfig, CmdError> {
    let cfg: ModelConfig = read_json(path)?;
    cfg.validate()
        .map_err(|e| CmdError::validation(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}
