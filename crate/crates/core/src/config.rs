use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{hex_digest, json_error};
use crate::data::SyntheticTask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdMode {
    Ka,
    Mse,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairedMode {
    Dataset,
    /// Targets are the teacher's outputs on the training inputs.
    Teacher,
}

/// Every trainer and pruner knob, as one flat key set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub task_seed: u64,
    pub image_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub lambda_adv: f64,
    pub lambda_recon: f64,
    pub lambda_dist: f64,
    pub kd: KdMode,
    pub paired: PairedMode,
    pub floor: usize,
    pub budget_macs: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            epochs: 20,
            batch_size: 8,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            task_seed: 0,
            image_size: 32,
            n_train: 256,
            n_val: 64,
            lambda_adv: 1.0,
            lambda_recon: 100.0,
            lambda_dist: 1.0,
            kd: KdMode::Ka,
            paired: PairedMode::Dataset,
            floor: crate::prune::DEFAULT_FLOOR,
            budget_macs: None,
        }
    }
}

/// Pretty JSON with sorted keys and a trailing newline.
pub(crate) fn canonical_json<T: Serialize>(v: &T) -> String {
    let value = serde_json::to_value(v).expect("serializable value");
    let mut s = serde_json::to_string_pretty(&value).expect("json value");
    s.push('\n');
    s
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        for (name, v) in [
            ("lambda_adv", self.lambda_adv),
            ("lambda_recon", self.lambda_recon),
            ("lambda_dist", self.lambda_dist),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and non-negative")));
            }
        }
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return bad("image_size must be a multiple of 4 and at least 8");
        }
        if self.n_train == 0 || self.n_val == 0 {
            return bad("n_train and n_val must be positive");
        }
        if self.floor == 0 {
            return bad("floor must be at least 1");
        }
        if self.budget_macs == Some(0) {
            return bad("budget_macs must be positive");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(json_error)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_json().as_bytes());
        hex_digest(h)
    }

    pub fn task(&self) -> SyntheticTask {
        SyntheticTask {
            seed: self.task_seed,
            image_size: self.image_size,
            n_train: self.n_train,
            n_val: self.n_val,
            ..SyntheticTask::default()
        }
    }
}
