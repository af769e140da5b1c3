//! The experiment document tying every section together.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::gradram::GradRamConfig;
use crate::phantom::{PhantomConfig, SplitRatios};
use crate::rnc::RncConfig;
use crate::train::TrainingConfig;
use crate::util::{read_json, sha256_hex};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Total phantoms across all splits.
    pub size: usize,
    pub ratios: SplitRatios,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            size: 750,
            ratios: SplitRatios {
                train: 0.8,
                val: 0.1,
                test: 0.1,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Volumes per inference batch.
    pub chunk: usize,
    /// Also report metrics restricted to ages ≥ this value.
    pub subgroup_min_age: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            chunk: 16,
            subgroup_min_age: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Copied into every section seed by [`ExperimentConfig::apply_seed`].
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub phantom: PhantomConfig,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub rnc: RncConfig,
    pub training: TrainingConfig,
    pub gradram: GradRamConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            out: None,
            dataset: DatasetConfig::default(),
            phantom: PhantomConfig::default(),
            augment: AugmentConfig::default(),
            encoder: EncoderConfig::default(),
            rnc: RncConfig::default(),
            training: TrainingConfig::default(),
            gradram: GradRamConfig::default(),
            eval: EvalConfig::default(),
        };
        c.apply_seed(0);
        c
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.phantom.seed = seed;
        self.augment.seed = seed;
        self.encoder.seed = seed;
        self.training.seed = seed;
    }

    /// Checks every section and their mutual consistency.
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.dataset.ratios.validate()?;
        if self.dataset.size < 10 {
            return Err(Error::invalid("dataset size", format!("{} below 10", self.dataset.size)));
        }
        self.augment.validate()?;
        self.encoder.validate()?;
        self.rnc.validate()?;
        self.training.validate()?;
        self.gradram.validate()?;
        if self.eval.chunk == 0 {
            return Err(Error::invalid("eval chunk", "must be ≥ 1"));
        }
        if self.encoder.input_dims != self.phantom.dims {
            return Err(Error::invalid(
                "config",
                format!("encoder input {:?} differs from phantom dims {:?}", self.encoder.input_dims, self.phantom.dims),
            ));
        }
        if let Some(layer) = &self.gradram.target_layer {
            self.encoder.layer_index(layer)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let c = Self { out: None, ..self.clone() };
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    /// Provenance block stamped into every output.
    pub fn provenance(&self) -> serde_json::Value {
        serde_json::json!({
            "config_hash": self.hash(),
            "seed": self.seed,
            "version": env!("CARGO_PKG_VERSION"),
            "temperature": self.rnc.temperature,
            "similarity": self.rnc.similarity,
            "relu_mode": self.gradram.relu_mode,
            "config": self,
        })
    }

    /// Rescales phantom geometry and the encoder input to an isotropic grid.
    pub fn set_resolution(&mut self, n: usize) {
        self.phantom = self.phantom.scaled_to([n, n, n]);
        self.encoder.input_dims = [n, n, n];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_documents_fill_defaults_and_unknown_keys_fail() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"training": {"batch_size": 8}}"#).unwrap();
        assert_eq!(c.training.batch_size, 8);
        assert_eq!(c.rnc, RncConfig::default());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"trainig": {}}"#).is_err());
    }

    #[test]
    fn mismatched_sections_are_rejected() {
        let mut c = ExperimentConfig::default();
        c.encoder.input_dims = [16, 16, 16];
        assert!(c.validate().unwrap_err().is_validation());
        c.set_resolution(16);
        c.validate().unwrap();
        c.gradram.target_layer = Some("stage9".into());
        assert!(c.validate().is_err());
    }
}
