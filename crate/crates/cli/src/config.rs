//! The flat run configuration shared by every subcommand.
//!
//! The same struct is read from a TOML file and parsed from flags, so every
//! file key `foo_bar` is also the flag `--foo-bar`. Flags win over the file,
//! the file wins over the built-in defaults, and the fully resolved result
//! is what gets echoed into the run directory.

use std::path::{Path, PathBuf};

use blindfill::config::{DiscKind, TrainConfig};
use blindfill::dataset::{Layout, Split};
use blindfill::generator::Branches;
use blindfill::losses::LossWeights;
use blindfill::marker::{IntensityMode, MarkerPolicy};
use blindfill::perceptual::PerceptualSpec;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LayoutArg {
    Paired,
    CleanOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DiscArg {
    Detector,
    Patch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum IntensityArg {
    White,
    Black,
    Sampled,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

impl From<LayoutArg> for Layout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::Paired => Layout::Paired,
            LayoutArg::CleanOnly => Layout::CleanOnly,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Run name; artifacts go to `<runs_dir>/<name>/`.
    #[arg(long)]
    pub name: Option<String>,
    /// Parent of all run directories.
    #[arg(long)]
    pub runs_dir: Option<PathBuf>,
    /// Corpus root holding `<split>/clean/` (and `corrupted/`, `mask/`, `boxes.jsonl`).
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub layout: Option<LayoutArg>,
    #[arg(long, value_enum)]
    pub train_split: Option<SplitArg>,
    #[arg(long, value_enum)]
    pub eval_split: Option<SplitArg>,
    /// Splits processed by `synth`.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub synth_splits: Option<Vec<SplitArg>>,
    /// Write this many synthetic phantom clean images per split before stamping markers.
    #[arg(long)]
    pub phantoms: Option<usize>,
    /// Side length of synthetic phantoms.
    #[arg(long)]
    pub phantom_size: Option<usize>,

    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda_rec: Option<f64>,
    #[arg(long)]
    pub lambda_per: Option<f64>,
    #[arg(long)]
    pub lambda_adv: Option<f64>,
    #[arg(long, value_enum)]
    pub disc: Option<DiscArg>,
    /// 2 = inpainting + mask branches, 1 = inpainting only.
    #[arg(long)]
    pub branches: Option<u8>,
    #[arg(long, value_delimiter = ',')]
    pub generator_widths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub detector_widths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub patch_widths: Option<Vec<usize>>,
    /// VGG16 feature weights (safetensors); unset uses a fixed random extractor.
    #[arg(long)]
    pub perceptual_weights: Option<PathBuf>,
    /// Stamp extra pseudo markers on stored corrupted inputs while training.
    #[arg(long)]
    pub augment: Option<bool>,
    /// Snapshot grid every N epochs (0 = never).
    #[arg(long)]
    pub snapshot_every: Option<u64>,
    /// Checkpoint every N steps (0 = final checkpoint only).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue training from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,

    #[arg(long)]
    pub marker_count_min: Option<usize>,
    #[arg(long)]
    pub marker_count_max: Option<usize>,
    #[arg(long)]
    pub marker_arm_min: Option<usize>,
    #[arg(long)]
    pub marker_arm_max: Option<usize>,
    #[arg(long)]
    pub marker_thickness_min: Option<usize>,
    #[arg(long)]
    pub marker_thickness_max: Option<usize>,
    #[arg(long, value_enum)]
    pub marker_intensity: Option<IntensityArg>,
    #[arg(long)]
    pub marker_scale_with_image: Option<bool>,

    /// Minimum detection confidence for `infer --emit-detections`.
    #[arg(long)]
    pub conf_threshold: Option<f32>,
    #[arg(long)]
    pub nms_iou: Option<f32>,
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($f:ident),* $(,)?) => {
        RunConfig { $($f: $top.$f.or($base.$f)),* }
    };
}

impl RunConfig {
    pub fn defaults() -> Self {
        let t = TrainConfig::default();
        let m = MarkerPolicy::default();
        RunConfig {
            name: Some("run".into()),
            runs_dir: Some("runs".into()),
            data_root: None,
            layout: Some(LayoutArg::CleanOnly),
            train_split: Some(SplitArg::Train),
            eval_split: Some(SplitArg::Test),
            synth_splits: Some(vec![SplitArg::Train, SplitArg::Val, SplitArg::Test]),
            phantoms: None,
            phantom_size: Some(64),
            image_size: Some(t.image_size),
            batch_size: Some(t.batch_size),
            learning_rate: Some(t.learning_rate),
            max_steps: Some(t.max_steps),
            seed: Some(t.seed),
            lambda_rec: Some(t.weights.rec),
            lambda_per: Some(t.weights.per),
            lambda_adv: Some(t.weights.adv),
            disc: Some(DiscArg::Detector),
            branches: Some(2),
            generator_widths: Some(vec![t.generator_widths.0, t.generator_widths.1]),
            detector_widths: Some(t.detector_widths),
            patch_widths: Some(t.patch_widths),
            perceptual_weights: None,
            augment: Some(t.augment),
            snapshot_every: Some(t.snapshot_every),
            checkpoint_every: Some(t.checkpoint_every),
            resume: None,
            marker_count_min: Some(m.count_range.0),
            marker_count_max: Some(m.count_range.1),
            marker_arm_min: Some(m.arm_range.0),
            marker_arm_max: Some(m.arm_range.1),
            marker_thickness_min: Some(m.thickness_range.0),
            marker_thickness_max: Some(m.thickness_range.1),
            marker_intensity: Some(IntensityArg::White),
            marker_scale_with_image: Some(m.scale_with_image),
            conf_threshold: Some(0.5),
            nms_iou: Some(0.45),
        }
    }

    /// `top`'s keys where set, `self`'s otherwise.
    pub fn overlay(self, top: RunConfig) -> RunConfig {
        let base = self;
        overlay!(base, top;
            name, runs_dir, data_root, layout, train_split, eval_split, synth_splits, phantoms,
            phantom_size, image_size, batch_size, learning_rate, max_steps, seed, lambda_rec,
            lambda_per, lambda_adv, disc, branches, generator_widths, detector_widths,
            patch_widths, perceptual_weights, augment, snapshot_every, checkpoint_every, resume,
            marker_count_min, marker_count_max, marker_arm_min, marker_arm_max,
            marker_thickness_min, marker_thickness_max, marker_intensity,
            marker_scale_with_image, conf_threshold, nms_iou,
        )
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config file: {}", e.message())))
    }

    /// Defaults, then the optional file, then flags.
    pub fn resolve(file: Option<&Path>, flags: RunConfig) -> Result<Self, CliError> {
        let from_file = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Usage(format!("cannot read config file {}: {e}", p.display()))
                })?;
                RunConfig::from_toml(&text)?
            }
            None => RunConfig::default(),
        };
        Ok(RunConfig::defaults().overlay(from_file).overlay(flags))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.runs_dir
            .clone()
            .unwrap_or_default()
            .join(self.name.as_deref().unwrap_or("run"))
    }

    /// The corpus root, or a usage error naming the key.
    pub fn data_root(&self) -> Result<&Path, CliError> {
        let root = self.data_root.as_deref().ok_or_else(|| {
            CliError::Usage("missing required key `data_root` (flag --data-root)".into())
        })?;
        if !root.is_dir() {
            return Err(CliError::Usage(format!(
                "`data_root` points to {}, which is not a directory",
                root.display()
            )));
        }
        Ok(root)
    }

    pub fn marker_policy(&self) -> MarkerPolicy {
        MarkerPolicy {
            count_range: (
                self.marker_count_min.unwrap_or(0),
                self.marker_count_max.unwrap_or(0),
            ),
            arm_range: (
                self.marker_arm_min.unwrap_or(0),
                self.marker_arm_max.unwrap_or(0),
            ),
            thickness_range: (
                self.marker_thickness_min.unwrap_or(0),
                self.marker_thickness_max.unwrap_or(0),
            ),
            intensity: match self.marker_intensity.unwrap_or(IntensityArg::White) {
                IntensityArg::White => IntensityMode::FixedWhite,
                IntensityArg::Black => IntensityMode::FixedBlack,
                IntensityArg::Sampled => IntensityMode::Sampled,
            },
            scale_with_image: self.marker_scale_with_image.unwrap_or(true),
            seed: self.seed.unwrap_or(0),
        }
    }

    /// The trainer configuration, or every problem found with it.
    pub fn train_config(&self) -> Result<TrainConfig, Vec<String>> {
        let mut problems = Vec::new();
        let widths = self.generator_widths.clone().unwrap_or_default();
        if widths.len() != 2 {
            problems.push(format!(
                "`generator_widths` needs exactly 2 values, got {widths:?}"
            ));
        }
        let branches = match self.branches {
            Some(2) => Branches::Two,
            Some(1) => Branches::Single,
            other => {
                problems.push(format!("`branches` must be 1 or 2, got {other:?}"));
                Branches::Two
            }
        };
        let config = TrainConfig {
            weights: LossWeights {
                rec: self.lambda_rec.unwrap_or_default(),
                per: self.lambda_per.unwrap_or_default(),
                adv: self.lambda_adv.unwrap_or_default(),
            },
            batch_size: self.batch_size.unwrap_or_default(),
            learning_rate: self.learning_rate.unwrap_or_default(),
            max_steps: self.max_steps.unwrap_or_default(),
            seed: self.seed.unwrap_or_default(),
            image_size: self.image_size.unwrap_or_default(),
            marker: self.marker_policy(),
            disc: match self.disc.unwrap_or(DiscArg::Detector) {
                DiscArg::Detector => DiscKind::Detector,
                DiscArg::Patch => DiscKind::Patch,
            },
            branches,
            generator_widths: (
                widths.first().copied().unwrap_or(0),
                widths.get(1).copied().unwrap_or(0),
            ),
            detector_widths: self.detector_widths.clone().unwrap_or_default(),
            patch_widths: self.patch_widths.clone().unwrap_or_default(),
            perceptual: match &self.perceptual_weights {
                Some(p) => PerceptualSpec::Vgg16 {
                    weights: p.to_string_lossy().into_owned(),
                },
                None => PerceptualSpec::default(),
            },
            augment: self.augment.unwrap_or(true),
            snapshot_every: self.snapshot_every.unwrap_or_default(),
            checkpoint_every: self.checkpoint_every.unwrap_or_default(),
        };
        problems.extend(
            config
                .problems()
                .into_iter()
                .map(|p| format!("invalid training setting: {p}")),
        );
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(problems)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_produce_the_library_training_config() {
        let c = RunConfig::defaults().train_config().unwrap();
        assert_eq!(c, TrainConfig::default());
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let file = RunConfig::from_toml("batch_size = 2\nseed = 9\n").unwrap();
        let flags = RunConfig {
            seed: Some(3),
            ..RunConfig::default()
        };
        let r = RunConfig::defaults().overlay(file).overlay(flags);
        assert_eq!(
            (r.batch_size, r.seed, r.max_steps),
            (Some(2), Some(3), Some(1000))
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("batch_sise = 2\n").unwrap_err();
        assert!(err.to_string().contains("batch_sise"), "{err}");
    }

    #[test]
    fn resolved_config_echo_round_trips() {
        let r = RunConfig::defaults();
        assert_eq!(RunConfig::from_toml(&r.to_toml()).unwrap(), r);
    }

    #[test]
    fn all_problems_are_reported() {
        let r = RunConfig {
            batch_size: Some(0),
            branches: Some(3),
            generator_widths: Some(vec![8, 16, 32]),
            ..RunConfig::defaults()
        };
        assert_eq!(r.train_config().unwrap_err().len(), 3);
    }
}
