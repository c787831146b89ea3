//! End-to-end orchestration: synthesize, pre-process, train per channel,
//! embed per checkpoint, normalize, and score. The CLI subcommands and the
//! end-to-end tests both drive these functions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use ndarray::Array2;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::distillation::TrainState;
use crate::embedding::{
    field_embedding, fuse_channel_subset, EmbeddingRecord, TeacherEncoder,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::imaging::{preprocess_image, PreprocessParams};
use crate::imgio;
use crate::manifest::{filter_channel, read_manifest, write_manifest, ImageRecord};
use crate::normalization::{
    control_vectors, fit_tvn, normalize_and_aggregate, TreatmentProfile, TvnTransform,
};
use crate::sampling::LabelKind;
use crate::seeding::derive_rng;
use crate::synthgen::{self, SyntheticSpec};
use crate::trainer::{train_loop, TrainLoopConfig, TrainReport};

pub const MANIFEST_NAME: &str = "manifest.csv";

/// Render the treated fields and the vehicle controls, write the combined
/// manifest, and return it.
pub fn datagen(spec: &SyntheticSpec, out_dir: &Path) -> Result<Vec<ImageRecord>> {
    std::fs::create_dir_all(out_dir)?;
    let mut records = synthgen::generate_dataset(spec, out_dir)?;
    records.extend(synthgen::dmso_controls(spec, out_dir)?);
    write_manifest(&out_dir.join(MANIFEST_NAME), &records)?;
    Ok(records)
}

/// Run the correction chain over every raw image, store float rasters, and
/// write the corrected manifest.
pub fn preprocess_dataset(
    records: &[ImageRecord],
    src_dir: &Path,
    out_dir: &Path,
    params: &PreprocessParams,
) -> Result<Vec<ImageRecord>> {
    if records.is_empty() {
        return Err(Error::Structure("nothing to preprocess".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let corrected: Vec<ImageRecord> = records
        .par_iter()
        .map(|record| -> Result<ImageRecord> {
            let raw = imgio::read_png_f32(&src_dir.join(&record.path))?;
            let done = preprocess_image(&raw, params, &record.image_id)?;
            let out_name = format!(
                "{}.f32",
                record.path.strip_suffix(".png").unwrap_or(&record.path)
            );
            imgio::write_f32(&out_dir.join(&out_name), &done.pixels)?;
            let mut out = record.clone();
            out.path = out_name;
            Ok(out)
        })
        .collect::<Result<_>>()?;
    write_manifest(&out_dir.join(MANIFEST_NAME), &corrected)?;
    Ok(corrected)
}

/// Float rasters for one channel's records, keyed by image id.
pub fn load_channel_images(
    records: &[&ImageRecord],
    dir: &Path,
) -> Result<BTreeMap<String, Array2<f32>>> {
    let loaded: Vec<(String, Array2<f32>)> = records
        .par_iter()
        .map(|r| Ok((r.image_id.clone(), imgio::read_f32(&dir.join(&r.path))?)))
        .collect::<Result<_>>()?;
    Ok(loaded.into_iter().collect())
}

/// Per-channel training seed, derived so channels never share streams.
pub fn channel_seed(seed: u64, channel: &str) -> u64 {
    use rand::RngCore;
    derive_rng(seed, &format!("train-seed/{}", channel)).next_u64()
}

pub fn loop_config(config: &RunConfig, channel: &str) -> TrainLoopConfig {
    TrainLoopConfig {
        vit: config.vit,
        crops: config.crops,
        schedule: config.schedule,
        label_kind: config.label_kind,
        batch_size: config.batch_size,
        teacher_momentum: config.teacher_momentum,
        center_momentum: config.center_momentum,
        centering: config.centering,
        seed: channel_seed(config.seed, channel),
        checkpoint_interval: config.checkpoint_interval,
        include_controls: config.include_controls,
    }
}

pub fn channel_run_dir(run_dir: &Path, channel: &str) -> PathBuf {
    run_dir.join(channel)
}

/// Train one channel's model under this run's config.
pub fn train_channel(
    config: &RunConfig,
    channel: &str,
    corrected: &[ImageRecord],
    corrected_dir: &Path,
    run_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainReport> {
    let channel_records: Vec<ImageRecord> =
        filter_channel(corrected, channel).into_iter().cloned().collect();
    if channel_records.is_empty() {
        return Err(Error::Structure(format!(
            "manifest has no '{}' channel images",
            channel
        )));
    }
    let refs: Vec<&ImageRecord> = channel_records.iter().collect();
    let images = load_channel_images(&refs, corrected_dir)?;
    train_loop(
        &loop_config(config, channel),
        &channel_records,
        &images,
        &channel_run_dir(run_dir, channel),
        resume_from,
    )
}

/// Checkpoint epochs present under a channel's run directory, ascending.
pub fn checkpoint_epochs(channel_dir: &Path) -> Result<Vec<usize>> {
    let mut epochs = Vec::new();
    for entry in std::fs::read_dir(channel_dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".safetensors") {
            if let Some(num) = stem.strip_prefix("ckpt-") {
                if let Ok(epoch) = num.parse::<usize>() {
                    epochs.push(epoch);
                }
            }
        }
    }
    epochs.sort_unstable();
    Ok(epochs)
}

/// Embed every field of one channel with a trained-model snapshot.
pub fn embed_channel(
    encoder: &TeacherEncoder,
    channel_records: &[&ImageRecord],
    images: &BTreeMap<String, Array2<f32>>,
    crop_side: usize,
    channel: &str,
) -> Result<Vec<EmbeddingRecord>> {
    channel_records
        .par_iter()
        .map(|record| {
            let pixels = images.get(&record.image_id).ok_or_else(|| {
                Error::Dependency(format!("no pixels for image '{}'", record.image_id))
            })?;
            let vector = field_embedding(pixels, crop_side, encoder)?;
            Ok(EmbeddingRecord::from_record(record, channel, vector))
        })
        .collect()
}

/// Load one channel's checkpoint and pick the embedding parameter set.
pub fn encoder_for_checkpoint(
    config: &RunConfig,
    run_dir: &Path,
    channel: &str,
    epoch: usize,
) -> Result<TeacherEncoder> {
    let stem = crate::trainer::checkpoint_stem(&channel_run_dir(run_dir, channel), epoch);
    let state = TrainState::load(&stem, &Device::Cpu, DType::F32)?;
    if state.student.config != config.vit {
        return Err(Error::Parameter(format!(
            "checkpoint {} was trained with a different encoder config",
            stem.display()
        )));
    }
    Ok(TeacherEncoder::new(if config.embed_teacher {
        &state.teacher
    } else {
        &state.student
    }))
}

/// All selected channels of one checkpoint epoch, fused per field.
pub fn embed_checkpoint(
    config: &RunConfig,
    run_dir: &Path,
    epoch: usize,
    corrected: &[ImageRecord],
    images_by_channel: &BTreeMap<String, BTreeMap<String, Array2<f32>>>,
) -> Result<Vec<EmbeddingRecord>> {
    let mut rows = Vec::new();
    for channel in &config.channels {
        let encoder = encoder_for_checkpoint(config, run_dir, channel, epoch)?;
        let channel_records = filter_channel(corrected, channel);
        let images = images_by_channel.get(channel).ok_or_else(|| {
            Error::Dependency(format!("channel '{}' images not loaded", channel))
        })?;
        rows.extend(embed_channel(
            &encoder,
            &channel_records,
            images,
            config.embed_crop,
            channel,
        )?);
    }
    fuse_channel_subset(&rows, &config.channels)
}

/// TVN fit on controls, applied everywhere, aggregated, scored.
pub struct EvalOutcome {
    pub transform: TvnTransform,
    pub profiles: Vec<TreatmentProfile>,
    pub report: EvalReport,
}

pub fn eval_embeddings(config: &RunConfig, fused: &[EmbeddingRecord]) -> Result<EvalOutcome> {
    let controls = control_vectors(fused);
    let transform = fit_tvn(&controls, config.tvn_eps, config.tvn_whiten)?;
    let treated: Vec<EmbeddingRecord> =
        fused.iter().filter(|r| !r.moa.is_empty()).cloned().collect();
    if treated.is_empty() {
        return Err(Error::Structure("no treated fields to profile".into()));
    }
    let profiles = normalize_and_aggregate(&treated, &transform)?;
    let report = evaluate(&profiles, config.batch_exclusion)?;
    Ok(EvalOutcome { transform, profiles, report })
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointScore {
    pub epoch: usize,
    pub nsc: f64,
    pub nscb: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ExperimentReport {
    pub label_kind: LabelKind,
    pub scores: Vec<CheckpointScore>,
    pub best_epoch: usize,
    pub best: EvalReport,
    /// Mean NSC/NSCB over checkpoints inside the configured epoch window.
    pub window_nsc: Option<f64>,
    pub window_nscb: Option<f64>,
}

/// Train every selected channel, then score every checkpoint epoch and pick
/// the best by NSC (earliest on ties).
pub fn run_experiment(
    config: &RunConfig,
    corrected: &[ImageRecord],
    corrected_dir: &Path,
    run_dir: &Path,
) -> Result<ExperimentReport> {
    config.validate()?;
    for channel in &config.channels {
        train_channel(config, channel, corrected, corrected_dir, run_dir, None)?;
    }
    score_checkpoints(config, corrected, corrected_dir, run_dir)
}

/// The evaluation half of `run_experiment`, usable on an already-trained
/// run directory.
pub fn score_checkpoints(
    config: &RunConfig,
    corrected: &[ImageRecord],
    corrected_dir: &Path,
    run_dir: &Path,
) -> Result<ExperimentReport> {
    let epochs = checkpoint_epochs(&channel_run_dir(run_dir, &config.channels[0]))?;
    if epochs.is_empty() {
        return Err(Error::Dependency(format!(
            "no checkpoints under {}",
            run_dir.display()
        )));
    }
    let mut images_by_channel = BTreeMap::new();
    for channel in &config.channels {
        let channel_records = filter_channel(corrected, channel);
        images_by_channel.insert(
            channel.clone(),
            load_channel_images(&channel_records, corrected_dir)?,
        );
    }
    let mut scores = Vec::new();
    let mut reports = Vec::new();
    for &epoch in &epochs {
        let fused = embed_checkpoint(config, run_dir, epoch, corrected, &images_by_channel)?;
        let outcome = eval_embeddings(config, &fused)?;
        log::info!(
            "epoch {}: nsc {:.4} nscb {:.4}",
            epoch,
            outcome.report.nsc,
            outcome.report.nscb
        );
        scores.push(CheckpointScore {
            epoch,
            nsc: outcome.report.nsc,
            nscb: outcome.report.nscb,
        });
        reports.push(outcome.report);
    }
    let nsc_series: Vec<f64> = scores.iter().map(|s| s.nsc).collect();
    let best_idx = crate::evaluation::best_epoch(&nsc_series)?;
    let in_window: Vec<&CheckpointScore> = scores
        .iter()
        .filter(|s| config.eval_window.0 <= s.epoch && s.epoch <= config.eval_window.1)
        .collect();
    let window_mean = |f: fn(&CheckpointScore) -> f64| {
        if in_window.is_empty() {
            None
        } else {
            Some(in_window.iter().map(|s| f(s)).sum::<f64>() / in_window.len() as f64)
        }
    };
    let report = ExperimentReport {
        label_kind: config.label_kind,
        best_epoch: scores[best_idx].epoch,
        best: reports[best_idx].clone(),
        window_nsc: window_mean(|s| s.nsc),
        window_nscb: window_mean(|s| s.nscb),
        scores,
    };
    write_scores(&run_dir.join("scores.tsv"), &report)?;
    let file = std::io::BufWriter::new(std::fs::File::create(run_dir.join("report.json"))?);
    serde_json::to_writer_pretty(file, &report)?;
    Ok(report)
}

fn write_scores(path: &Path, report: &ExperimentReport) -> Result<()> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "epoch\tnsc\tnscb")?;
    for s in &report.scores {
        writeln!(file, "{}\t{:.6}\t{:.6}", s.epoch, s.nsc, s.nscb)?;
    }
    file.flush()?;
    Ok(())
}

/// Convenience for tests and the CLI: read a corrected manifest.
pub fn read_corrected(dir: &Path) -> Result<Vec<ImageRecord>> {
    read_manifest(&dir.join(MANIFEST_NAME))
}
