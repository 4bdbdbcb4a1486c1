//! Training configuration and the model configurations derived from it.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{AnchorConfig, DetectorConfig, PatchConfig};
use crate::generator::{Branches, GeneratorConfig, DOWNSAMPLING};
use crate::losses::LossWeights;
use crate::marker::MarkerPolicy;
use crate::perceptual::PerceptualSpec;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscKind {
    /// Dense marker detector (the object-aware discriminator).
    Detector,
    /// Patch-score discriminator with hinge losses.
    Patch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_steps: u64,
    pub seed: u64,
    /// Square side every sample is resized to.
    pub image_size: usize,
    pub marker: MarkerPolicy,
    pub disc: DiscKind,
    pub branches: Branches,
    pub generator_widths: (usize, usize),
    pub detector_widths: Vec<usize>,
    pub patch_widths: Vec<usize>,
    pub perceptual: PerceptualSpec,
    /// Stamp pseudo markers on stored corrupted inputs as augmentation.
    pub augment: bool,
    /// Snapshot grid every this many epochs; 0 disables snapshots.
    pub snapshot_every: u64,
    /// Checkpoint every this many steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            batch_size: 4,
            learning_rate: 1e-4,
            max_steps: 1000,
            seed: 0,
            image_size: 64,
            marker: MarkerPolicy::default(),
            disc: DiscKind::Detector,
            branches: Branches::Two,
            generator_widths: (32, 64),
            detector_widths: vec![16, 32, 64, 64],
            patch_widths: vec![16, 32, 64],
            perceptual: PerceptualSpec::default(),
            augment: true,
            snapshot_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Every problem with the configuration, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size == 0 {
            out.push("batch_size must be at least 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if let Err(e) = self.weights.validate() {
            out.push(e.to_string());
        }
        if let Err(e) = self.marker.validate() {
            out.push(e.to_string());
        }
        let largest = match self.disc {
            DiscKind::Detector => 16,
            DiscKind::Patch => 1 << (self.patch_widths.len() + 1),
        };
        let factor = largest.max(DOWNSAMPLING);
        if self.image_size == 0 || !self.image_size.is_multiple_of(factor) {
            out.push(format!(
                "image_size must be a positive multiple of {factor}, got {}",
                self.image_size
            ));
        }
        if self.generator_widths.0 == 0 || self.generator_widths.1 == 0 {
            out.push("generator_widths must be positive".to_string());
        }
        if self.detector_widths.len() < 4 || self.detector_widths.contains(&0) {
            out.push("detector_widths needs at least 4 positive stage widths".to_string());
        }
        if self.patch_widths.contains(&0) {
            out.push("patch_widths must be positive".to_string());
        }
        out
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            widths: self.generator_widths,
            branches: self.branches,
            seed: seed::derive(&[self.seed, 1]),
            ..GeneratorConfig::default()
        }
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            widths: self.detector_widths.clone(),
            anchors: AnchorConfig::for_image_side(self.image_size),
            seed: seed::derive(&[self.seed, 2]),
        }
    }

    pub fn patch_config(&self) -> PatchConfig {
        PatchConfig {
            widths: self.patch_widths.clone(),
            seed: seed::derive(&[self.seed, 3]),
        }
    }

    /// Hash of everything that shapes the model and its training trajectory.
    /// Run-length settings (`max_steps`, snapshot and checkpoint cadence) are
    /// left out so a run can be resumed with a larger budget.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.max_steps = 0;
        c.snapshot_every = 0;
        c.checkpoint_every = 0;
        let json = serde_json::to_vec(&c).expect("config serialises");
        hex(&Sha256::digest(json))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
