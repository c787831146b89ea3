//! The single declarative run configuration: every stage's knobs in one
//! file, with presets at paper scale and at desk-test (toy) scale.
//!
//! Missing keys deserialize to their paper-scale defaults; unknown keys are
//! rejected with the offending name.

use std::path::{Path, PathBuf};

use sha2::Digest;

use crate::backbone::ViTConfig;
use crate::distillation::{
    ScheduleSpec, DEFAULT_CENTER_MOMENTUM, DEFAULT_TEACHER_MOMENTUM,
};
use crate::error::{Error, Result};
use crate::evaluation::BatchExclusion;
use crate::imaging::PreprocessParams;
use crate::manifest::CHANNEL_NAMES;
use crate::sampling::{CropSpec, LabelKind};
use crate::synthgen::SyntheticSpec;

/// Where the pipeline reads and writes its artifacts.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Raw synthetic dataset (PNGs + manifest).
    pub data: PathBuf,
    /// Pre-processed float rasters + manifest.
    pub corrected: PathBuf,
    /// Per-run training and evaluation artifacts.
    pub runs: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data/raw"),
            corrected: PathBuf::from("data/corrected"),
            runs: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    /// Master seed; every stream is derived from it by purpose tags.
    pub seed: u64,
    /// True keeps training on seed-derived streams; false draws a fresh
    /// training seed from OS entropy (recorded in the effective config).
    pub determinism: bool,
    pub label_kind: LabelKind,
    /// Channels that get their own trained model and embedding.
    pub channels: Vec<String>,
    pub paths: PathsConfig,
    pub data: SyntheticSpec,
    pub preprocess: PreprocessParams,
    pub vit: ViTConfig,
    pub crops: CropSpec,
    pub schedule: ScheduleSpec,
    pub batch_size: usize,
    pub teacher_momentum: f64,
    pub center_momentum: f64,
    pub centering: bool,
    pub checkpoint_interval: usize,
    pub include_controls: bool,
    /// Embed with the teacher parameters (the averaged model); false uses
    /// the student.
    pub embed_teacher: bool,
    /// Side of each of the four embedding crops.
    pub embed_crop: usize,
    pub tvn_eps: f64,
    pub tvn_whiten: bool,
    pub batch_exclusion: BatchExclusion,
    /// Inclusive epoch window for the mean-score report.
    pub eval_window: (usize, usize),
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl RunConfig {
    /// Full-scale defaults; desk runs should start from `toy`.
    pub fn paper() -> Self {
        Self {
            run_id: "paper".into(),
            seed: 0,
            determinism: true,
            label_kind: LabelKind::Compound,
            channels: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
            paths: PathsConfig::default(),
            data: SyntheticSpec::toy(),
            preprocess: PreprocessParams::default(),
            vit: ViTConfig::paper(),
            crops: CropSpec::paper(),
            schedule: ScheduleSpec::paper(),
            batch_size: 16,
            teacher_momentum: DEFAULT_TEACHER_MOMENTUM,
            center_momentum: DEFAULT_CENTER_MOMENTUM,
            centering: true,
            checkpoint_interval: 10,
            include_controls: false,
            embed_teacher: true,
            embed_crop: 224,
            tvn_eps: crate::normalization::DEFAULT_EIGEN_FLOOR,
            tvn_whiten: true,
            batch_exclusion: BatchExclusion::Union,
            eval_window: (50, 250),
        }
    }

    /// Desk-scale preset: one channel, toy encoder, 96-pixel synthetic
    /// images, minutes instead of GPU-days.
    pub fn toy() -> Self {
        Self {
            run_id: "toy".into(),
            channels: vec!["dna".into()],
            // Smoothing scale stays above the blob scale so the correction
            // ratio keeps the phenotype.
            preprocess: PreprocessParams {
                filter_size: 96,
                target_rows: 96,
                target_cols: 96,
                cutoff: 10_000.0,
            },
            vit: ViTConfig::toy(),
            crops: CropSpec::toy(),
            schedule: ScheduleSpec::toy(),
            embed_crop: 48,
            eval_window: (20, 60),
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.vit.validate()?;
        self.crops.validate()?;
        self.schedule.validate()?;
        if self.run_id.is_empty()
            || self
                .run_id
                .chars()
                .any(|c| !(c.is_ascii_alphanumeric() || c == '-' || c == '_'))
        {
            return Err(Error::Parameter(format!(
                "run_id '{}' must be non-empty [A-Za-z0-9_-]",
                self.run_id
            )));
        }
        if self.channels.is_empty() {
            return Err(Error::Parameter("at least one channel must be selected".into()));
        }
        for c in &self.channels {
            if !CHANNEL_NAMES.contains(&c.as_str()) {
                return Err(Error::Parameter(format!(
                    "unknown channel '{}', expected one of {:?}",
                    c, CHANNEL_NAMES
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be positive".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Parameter("checkpoint_interval must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.teacher_momentum) {
            return Err(Error::Parameter("teacher_momentum must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return Err(Error::Parameter("center_momentum must be in [0, 1)".into()));
        }
        if self.embed_crop == 0 || self.embed_crop % self.vit.patch_size != 0 {
            return Err(Error::Parameter(format!(
                "embed_crop {} must be a positive multiple of patch size {}",
                self.embed_crop, self.vit.patch_size
            )));
        }
        if self.tvn_eps <= 0.0 {
            return Err(Error::Parameter("tvn_eps must be positive".into()));
        }
        if self.eval_window.0 > self.eval_window.1 {
            return Err(Error::Parameter(format!(
                "eval_window ({}, {}) is inverted",
                self.eval_window.0, self.eval_window.1
            )));
        }
        Ok(())
    }

    /// Stable content hash of the effective configuration.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_string(self)?;
        let mut hasher = sha2::Sha256::new();
        hasher.update(canonical.as_bytes());
        Ok(hex(&hasher.finalize()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Parameter(format!("config serialization failed: {}", e)))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Dependency(format!("cannot read config {}: {}", path.display(), e)))?;
    let config: RunConfig = toml::from_str(&text)
        .map_err(|e| Error::Parameter(format!("config {}: {}", path.display(), e)))?;
    config.validate()?;
    Ok(config)
}

pub fn write_config(path: &Path, config: &RunConfig) -> Result<()> {
    std::fs::write(path, config.to_toml()?)?;
    Ok(())
}

/// Sha256 of a file, for artifact lineage stamps.
pub fn file_hash(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::Dependency(format!("cannot hash {}: {}", path.display(), e)))?;
    let mut hasher = sha2::Sha256::new();
    std::io::copy(&mut file, &mut hasher)?;
    Ok(hex(&hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_is_identical() {
        let config = RunConfig::toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        write_config(&path, &config).unwrap();
        let back = read_config(&path).unwrap();
        assert_eq!(back, config);
        assert_eq!(back.hash().unwrap(), config.hash().unwrap());
    }

    #[test]
    fn missing_keys_fall_back_to_paper_values() {
        let config: RunConfig = toml::from_str("run_id = \"partial\"").unwrap();
        assert_eq!(config.batch_size, 16);
        assert_eq!(config.schedule.base_lr, 4e-6);
        assert_eq!(config.schedule.total_epochs, 400);
        assert_eq!(config.crops.global.size, 224);
        assert_eq!(config.crops.n_local, 8);
        assert_eq!(config.teacher_momentum, 0.99);
        assert_eq!(config.eval_window, (50, 250));
        assert_eq!(config.run_id, "partial");
    }

    #[test]
    fn unknown_keys_are_named_in_the_error() {
        let err = toml::from_str::<RunConfig>("no_such_knob = 3").unwrap_err();
        assert!(err.to_string().contains("no_such_knob"), "{}", err);
    }

    #[test]
    fn hash_tracks_content_not_identity() {
        let a = RunConfig::toy();
        let mut b = RunConfig::toy();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn validation_names_the_bad_field() {
        let mut config = RunConfig::toy();
        config.channels = vec!["nuclei".into()];
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("nuclei"));
        assert_eq!(err.exit_code(), 1);

        let mut config = RunConfig::toy();
        config.embed_crop = 50;
        assert!(config.validate().is_err());
    }

    #[test]
    fn presets_validate() {
        RunConfig::paper().validate().unwrap();
        RunConfig::toy().validate().unwrap();
    }
}
