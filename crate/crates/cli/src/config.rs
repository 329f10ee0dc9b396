use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use retinareg::dataset::{ModalityTransform, SynthConfig};
use retinareg::features::{Modality, ReferenceExtractorConfig};
use retinareg::losses::{LossConfig, ToyTrainConfig};
use retinareg::matching::{RansacConfig, RegistrationConfig};
use retinareg::metrics::Thresholds;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Hand-crafted junction detector and gradient-histogram descriptor.
    Reference,
    /// Precomputed feature-map files only.
    File,
}

/// Settings shared by `extract`, `register` and `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub n_max: usize,
    pub nms_radius: f64,
    pub min_confidence: f64,
    pub ransac: RansacConfig,
    pub backend: Backend,
    /// Expected descriptor length of every feature map, when set.
    pub descriptor_dim: Option<usize>,
    pub extractor: ReferenceExtractorConfig,
    pub thresholds: Thresholds,
    /// Overrides `ransac.seed`.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let reg = RegistrationConfig::default();
        Self {
            n_max: reg.n_max,
            nms_radius: reg.nms_radius,
            min_confidence: reg.min_confidence,
            ransac: reg.ransac,
            backend: Backend::Reference,
            descriptor_dim: None,
            extractor: ReferenceExtractorConfig::default(),
            thresholds: Thresholds::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Copies the top-level seed into the RANSAC settings and validates.
    pub fn resolve(mut self) -> Result<Self> {
        self.ransac.seed = self.seed;
        self.registration().validate()?;
        self.extractor.validate()?;
        self.thresholds.validate()?;
        if self.thresholds.mir != self.ransac.reproj_threshold {
            return Err(CliError::config(format!(
                "thresholds.mir ({}) must equal ransac.reproj_threshold ({})",
                self.thresholds.mir, self.ransac.reproj_threshold
            )));
        }
        match self.descriptor_dim {
            Some(d) if d < 2 => {
                return Err(CliError::config("descriptor_dim must be at least 2"));
            }
            Some(d)
                if self.backend == Backend::Reference && d != self.extractor.descriptor_dim() =>
            {
                return Err(CliError::config(format!(
                    "descriptor_dim {d} disagrees with the reference extractor ({})",
                    self.extractor.descriptor_dim()
                )));
            }
            _ => {}
        }
        Ok(self)
    }

    pub fn registration(&self) -> RegistrationConfig {
        RegistrationConfig {
            n_max: self.n_max,
            nms_radius: self.nms_radius,
            min_confidence: self.min_confidence,
            ransac: RansacConfig {
                seed: self.seed,
                ..self.ransac.clone()
            },
        }
    }
}

/// Settings of the `synth` command. Pair `k` uses
/// `modality_b_variants[k % len]` and a seed derived from `seed` and `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthDatasetConfig {
    pub scene: SynthConfig,
    pub modality_b_variants: Vec<ModalityTransform>,
    pub seed: u64,
}

impl Default for SynthDatasetConfig {
    fn default() -> Self {
        let scene = SynthConfig::default();
        let octa = scene.modality_b.clone();
        Self {
            scene,
            modality_b_variants: vec![
                octa,
                ModalityTransform {
                    modality: Modality::SynthB,
                    gamma: 1.4,
                    blur_sigma: 1.0,
                    noise_sigma: 0.03,
                    ..Default::default()
                },
            ],
            seed: 0,
        }
    }
}

impl SynthDatasetConfig {
    pub fn resolve(mut self) -> Result<Self> {
        if self.modality_b_variants.is_empty() {
            return Err(CliError::config("modality_b_variants must not be empty"));
        }
        self.scene.seed = self.seed;
        for m in &self.modality_b_variants {
            SynthConfig {
                modality_b: m.clone(),
                ..self.scene.clone()
            }
            .validate()?;
        }
        Ok(self)
    }
}

/// Settings of the `train-toy` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainToyConfig {
    pub train: ToyTrainConfig,
    pub loss: LossConfig,
    /// Share of manifest pairs (the last ones by id) held out for validation.
    pub validation_fraction: f64,
}

impl Default for TrainToyConfig {
    fn default() -> Self {
        Self {
            train: ToyTrainConfig::default(),
            loss: LossConfig::default(),
            validation_fraction: 0.2,
        }
    }
}

impl TrainToyConfig {
    pub fn resolve(self) -> Result<Self> {
        self.train.validate()?;
        self.loss.validate()?;
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(CliError::config("validation_fraction must lie in (0, 1)"));
        }
        Ok(self)
    }
}

/// Parses a JSON config file, or returns the defaults when `path` is `None`.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| retinareg::Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Pretty JSON with a trailing newline.
pub(crate) fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}
