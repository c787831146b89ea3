//! The epoch loop: weak-label pair sampling, view construction, stepped
//! schedules, step logging, checkpoint cadence, and resume.
//!
//! Each epoch draws a manifest-sized pair sequence from its own derived
//! RNG stream, so a resumed run replays exactly the epochs a straight run
//! would have seen.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use ndarray::Array2;

use crate::backbone::ViTConfig;
use crate::distillation::{
    schedule_value, train_step, ScheduleSpec, TrainState, DEFAULT_CENTER_MOMENTUM,
    DEFAULT_TEACHER_MOMENTUM,
};
use crate::error::{Error, Result};
use crate::manifest::ImageRecord;
use crate::sampling::{build_index, epoch_pairs, make_views, CropSpec, LabelKind};
use crate::seeding::derive_rng;

/// Everything a single-channel training run needs besides data.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainLoopConfig {
    pub vit: ViTConfig,
    pub crops: CropSpec,
    pub schedule: ScheduleSpec,
    pub label_kind: LabelKind,
    pub batch_size: usize,
    pub teacher_momentum: f64,
    pub center_momentum: f64,
    pub centering: bool,
    pub seed: u64,
    /// Checkpoint every this many epochs (and always at the end).
    pub checkpoint_interval: usize,
    /// Vehicle controls join training when set; default keeps them out and
    /// reserves them for the normalization fit.
    pub include_controls: bool,
}

impl TrainLoopConfig {
    pub fn toy() -> Self {
        Self {
            vit: ViTConfig::toy(),
            crops: CropSpec::toy(),
            schedule: ScheduleSpec::toy(),
            label_kind: LabelKind::Compound,
            batch_size: 16,
            teacher_momentum: DEFAULT_TEACHER_MOMENTUM,
            center_momentum: DEFAULT_CENTER_MOMENTUM,
            centering: true,
            seed: 0,
            checkpoint_interval: 10,
            include_controls: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.crops.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Parameter("checkpoint interval must be positive".into()));
        }
        Ok(())
    }
}

/// One logged step.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub teacher_temp: f64,
}

/// Loop results: the step log and every checkpoint stem written.
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

pub fn checkpoint_stem(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("ckpt-{:04}", epoch))
}

fn write_log_line(file: &mut std::fs::File, entry: &StepLog) -> Result<()> {
    writeln!(
        file,
        "{}\t{}\t{:.6}\t{:.6e}\t{:.4}",
        entry.epoch, entry.step, entry.loss, entry.lr, entry.teacher_temp
    )?;
    Ok(())
}

/// Run (or resume) one per-channel training to completion.
///
/// `records` must be a single channel's manifest slice; `images` maps
/// image_id to its corrected pixels. Writes `train_log.tsv` and numbered
/// checkpoint stems under `out_dir`.
pub fn train_loop(
    config: &TrainLoopConfig,
    records: &[ImageRecord],
    images: &BTreeMap<String, Array2<f32>>,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainReport> {
    config.validate()?;
    let scope: Vec<ImageRecord> = records
        .iter()
        .filter(|r| config.include_controls || !r.is_control())
        .cloned()
        .collect();
    if scope.is_empty() {
        return Err(Error::Structure("no trainable images in scope".into()));
    }
    for rec in &scope {
        if !images.contains_key(&rec.image_id) {
            return Err(Error::Dependency(format!(
                "no pixels loaded for image '{}'",
                rec.image_id
            )));
        }
    }
    let index = build_index(&scope, config.label_kind)?;
    let n_draws = scope.len();
    let steps_per_epoch = n_draws.div_ceil(config.batch_size);

    std::fs::create_dir_all(out_dir)?;
    let device = Device::Cpu;
    let mut state = match resume_from {
        Some(stem) => {
            let state = TrainState::load(stem, &device, DType::F32)?;
            if state.student.config != config.vit {
                return Err(Error::Parameter(
                    "checkpoint encoder config differs from the requested run".into(),
                ));
            }
            state
        }
        None => TrainState::new(
            config.vit,
            config.seed,
            &device,
            DType::F32,
            config.teacher_momentum,
            config.center_momentum,
            config.centering,
        )?,
    };

    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("train_log.tsv"))?;

    let mut steps = Vec::new();
    let mut checkpoints = Vec::new();
    let start_epoch = state.epoch;
    if resume_from.is_none() {
        // Epoch-0 snapshot: the random-init baseline, and a stem that makes
        // resume-from-scratch indistinguishable from a fresh start.
        let stem = checkpoint_stem(out_dir, 0);
        state.save(&stem)?;
        checkpoints.push(stem);
    }
    for epoch in start_epoch..config.schedule.total_epochs {
        let mut rng = derive_rng(config.seed, &format!("epoch/{}", epoch));
        let pairs = epoch_pairs(&index, n_draws, &mut rng)?;
        for (step_in_epoch, chunk) in pairs.chunks(config.batch_size).enumerate() {
            let mut batch = Vec::with_capacity(chunk.len());
            for (i, j) in chunk {
                let views = make_views(
                    &images[i],
                    &images[j],
                    &config.crops,
                    (i.clone(), j.clone()),
                    &mut rng,
                )?;
                batch.push(views);
            }
            let lr = schedule_value(&config.schedule, "lr", epoch, step_in_epoch, steps_per_epoch)?;
            let teacher_temp = schedule_value(
                &config.schedule,
                "teacher_temp",
                epoch,
                step_in_epoch,
                steps_per_epoch,
            )?;
            let student_temp = config.schedule.student_temp;
            let outcome = train_step(&mut state, &batch, lr, teacher_temp, student_temp)?;
            let entry = StepLog {
                epoch,
                step: state.step,
                loss: outcome.loss,
                lr,
                teacher_temp,
            };
            write_log_line(&mut log_file, &entry)?;
            log::debug!(
                "epoch {} step {} loss {:.5} lr {:.3e} tt {:.3}",
                entry.epoch,
                entry.step,
                entry.loss,
                entry.lr,
                entry.teacher_temp
            );
            steps.push(entry);
        }
        state.epoch = epoch + 1;
        if (epoch + 1) % config.checkpoint_interval == 0
            || epoch + 1 == config.schedule.total_epochs
        {
            let stem = checkpoint_stem(out_dir, epoch + 1);
            state.save(&stem)?;
            checkpoints.push(stem);
        }
        log::info!(
            "epoch {} done, last loss {:.5}",
            epoch,
            steps.last().map(|s| s.loss).unwrap_or(f64::NAN)
        );
    }
    let final_checkpoint = checkpoints
        .last()
        .cloned()
        .unwrap_or_else(|| checkpoint_stem(out_dir, state.epoch));
    if !TrainState::tensor_path(&final_checkpoint).exists() {
        state.save(&final_checkpoint)?;
    }
    Ok(TrainReport { steps, checkpoints, final_checkpoint })
}
