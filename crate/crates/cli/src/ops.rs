//! Subcommand implementations. Every op reads its declared input artifacts,
//! writes its outputs, and leaves a lineage sidecar beside them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use ndarray::Array2;
use wsdino_core::backbone;
use wsdino_core::config::{read_config, write_config, RunConfig};
use wsdino_core::distillation::TrainState;
use wsdino_core::embedding::{read_embeddings, write_embeddings};
use wsdino_core::error::{Error, Result};
use wsdino_core::evaluation::{self, evaluate, format_percent, EvalReport};
use wsdino_core::imgio;
use wsdino_core::manifest::{filter_channel, read_manifest, ImageRecord};
use wsdino_core::normalization::{
    control_vectors, fit_tvn, normalize_and_aggregate, read_profiles, write_profiles, write_tvn,
};
use wsdino_core::pipeline::{self, CheckpointScore, ExperimentReport, MANIFEST_NAME};
use wsdino_core::trainer::checkpoint_stem;

use crate::lineage;
use crate::plot;

fn require_manifest(dir: &Path) -> Result<Vec<ImageRecord>> {
    let path = dir.join(MANIFEST_NAME);
    if !path.exists() {
        return Err(Error::Dependency(format!(
            "no manifest at {}; run the producing stage first",
            path.display()
        )));
    }
    read_manifest(&path)
}

fn run_dir(config: &RunConfig) -> PathBuf {
    config.paths.runs.join(&config.run_id)
}

pub fn datagen(config: &RunConfig) -> Result<()> {
    let dir = &config.paths.data;
    let records = pipeline::datagen(&config.data, dir)?;
    lineage::write(dir, "datagen", config, &[], &[dir.join(MANIFEST_NAME)])?;
    println!(
        "datagen: {} images under {}",
        records.len(),
        dir.display()
    );
    Ok(())
}

pub fn preprocess(config: &RunConfig) -> Result<()> {
    let records = require_manifest(&config.paths.data)?;
    let corrected = pipeline::preprocess_dataset(
        &records,
        &config.paths.data,
        &config.paths.corrected,
        &config.preprocess,
    )?;
    lineage::write(
        &config.paths.corrected,
        "preprocess",
        config,
        &[config.paths.data.join(MANIFEST_NAME)],
        &[config.paths.corrected.join(MANIFEST_NAME)],
    )?;
    println!(
        "preprocess: {} images corrected into {}",
        corrected.len(),
        config.paths.corrected.display()
    );
    Ok(())
}

pub fn train(config: &RunConfig, resume: bool) -> Result<()> {
    let mut config = config.clone();
    if !config.determinism && !resume {
        // Non-deterministic runs still record their effective seed, so the
        // run stays reproducible after the fact. 32 bits keeps the recorded
        // value inside TOML's integer range.
        config.seed = u64::from(rand::random::<u32>());
        log::info!("determinism off: recording fresh training seed {}", config.seed);
    }
    let run_dir = run_dir(&config);
    std::fs::create_dir_all(&run_dir)?;
    let recorded_path = run_dir.join("config.toml");
    if recorded_path.exists() {
        let recorded = read_config(&recorded_path)?;
        if recorded.hash()? != config.hash()? {
            return Err(Error::Parameter(format!(
                "run '{}' is recorded with config hash {} but this invocation resolves to {}; \
                 pass --config {} or choose a new run_id",
                config.run_id,
                &recorded.hash()?[..12],
                &config.hash()?[..12],
                recorded_path.display()
            )));
        }
    } else if resume {
        return Err(Error::Dependency(format!(
            "nothing to resume: {} does not exist",
            recorded_path.display()
        )));
    } else {
        write_config(&recorded_path, &config)?;
    }
    let corrected = require_manifest(&config.paths.corrected)?;
    let mut outputs = vec![recorded_path];
    for channel in &config.channels {
        let channel_dir = pipeline::channel_run_dir(&run_dir, channel);
        let resume_stem = if resume {
            if !channel_dir.exists() {
                return Err(Error::Dependency(format!(
                    "no training output under {}",
                    channel_dir.display()
                )));
            }
            let epochs = pipeline::checkpoint_epochs(&channel_dir)?;
            let last = *epochs.last().ok_or_else(|| {
                Error::Dependency(format!("no checkpoint under {}", channel_dir.display()))
            })?;
            log::info!("resuming channel '{}' from epoch {}", channel, last);
            Some(checkpoint_stem(&channel_dir, last))
        } else {
            None
        };
        let report = pipeline::train_channel(
            &config,
            channel,
            &corrected,
            &config.paths.corrected,
            &run_dir,
            resume_stem.as_deref(),
        )?;
        println!(
            "train[{}]: {} steps, final checkpoint {}",
            channel,
            report.steps.len(),
            report.final_checkpoint.display()
        );
        outputs.push(TrainState::tensor_path(&report.final_checkpoint));
    }
    lineage::write(
        &run_dir,
        "train",
        &config,
        &[config.paths.corrected.join(MANIFEST_NAME)],
        &outputs,
    )
}

/// Checkpoint epochs present for every selected channel.
fn available_epochs(config: &RunConfig, run_dir: &Path) -> Result<Vec<usize>> {
    let mut common: Option<BTreeSet<usize>> = None;
    for channel in &config.channels {
        let dir = pipeline::channel_run_dir(run_dir, channel);
        if !dir.exists() {
            return Err(Error::Dependency(format!(
                "no training output under {}; run train first",
                dir.display()
            )));
        }
        let set: BTreeSet<usize> = pipeline::checkpoint_epochs(&dir)?.into_iter().collect();
        common = Some(match common {
            None => set,
            Some(held) => held.intersection(&set).copied().collect(),
        });
    }
    let epochs: Vec<usize> = common.unwrap_or_default().into_iter().collect();
    if epochs.is_empty() {
        return Err(Error::Dependency(format!(
            "no common checkpoint epochs under {}",
            run_dir.display()
        )));
    }
    Ok(epochs)
}

fn select_epochs(
    config: &RunConfig,
    run_dir: &Path,
    requested: Option<usize>,
) -> Result<Vec<usize>> {
    let all = available_epochs(config, run_dir)?;
    match requested {
        Some(e) if all.contains(&e) => Ok(vec![e]),
        Some(e) => Err(Error::Dependency(format!(
            "no checkpoint for epoch {}; available: {:?}",
            e, all
        ))),
        None => Ok(all),
    }
}

fn epoch_file(dir: &Path, prefix: &str, epoch: usize, suffix: &str) -> PathBuf {
    dir.join(format!("{}{:04}{}", prefix, epoch, suffix))
}

/// Files named `<prefix><epoch:04><suffix>` in one directory, ascending.
fn scan_epoch_files(dir: &Path, prefix: &str, suffix: &str) -> Result<Vec<(usize, PathBuf)>> {
    if !dir.exists() {
        return Err(Error::Dependency(format!(
            "no artifacts under {}; run the producing stage first",
            dir.display()
        )));
    }
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_prefix(prefix).and_then(|s| s.strip_suffix(suffix)) {
            if let Ok(epoch) = stem.parse::<usize>() {
                found.push((epoch, entry.path()));
            }
        }
    }
    found.sort_unstable_by_key(|(e, _)| *e);
    Ok(found)
}

pub fn embed(config: &RunConfig, epoch: Option<usize>) -> Result<()> {
    let run_dir = run_dir(config);
    let corrected = require_manifest(&config.paths.corrected)?;
    let epochs = select_epochs(config, &run_dir, epoch)?;
    let mut images_by_channel = BTreeMap::new();
    for channel in &config.channels {
        let channel_records = filter_channel(&corrected, channel);
        images_by_channel.insert(
            channel.clone(),
            pipeline::load_channel_images(&channel_records, &config.paths.corrected)?,
        );
    }
    let out_dir = run_dir.join("embeddings");
    std::fs::create_dir_all(&out_dir)?;
    let mut inputs = vec![config.paths.corrected.join(MANIFEST_NAME)];
    let mut outputs = Vec::new();
    for &e in &epochs {
        let fused = pipeline::embed_checkpoint(config, &run_dir, e, &corrected, &images_by_channel)?;
        let table = epoch_file(&out_dir, "epoch-", e, ".tsv");
        let meta = epoch_file(&out_dir, "epoch-", e, ".meta.csv");
        write_embeddings(&table, &meta, &fused)?;
        println!("embed: epoch {} -> {} fields, {}", e, fused.len(), table.display());
        for channel in &config.channels {
            let stem = checkpoint_stem(&pipeline::channel_run_dir(&run_dir, channel), e);
            inputs.push(TrainState::tensor_path(&stem));
        }
        outputs.push(table);
        outputs.push(meta);
    }
    lineage::write(&out_dir, "embed", config, &inputs, &outputs)
}

pub fn tvn(config: &RunConfig, epoch: Option<usize>) -> Result<()> {
    let run_dir = run_dir(config);
    let embed_dir = run_dir.join("embeddings");
    let mut tables = scan_epoch_files(&embed_dir, "epoch-", ".tsv")?;
    if let Some(e) = epoch {
        tables.retain(|(found, _)| *found == e);
        if tables.is_empty() {
            return Err(Error::Dependency(format!(
                "no embedding table for epoch {} under {}",
                e,
                embed_dir.display()
            )));
        }
    }
    let tvn_dir = run_dir.join("tvn");
    let profile_dir = run_dir.join("profiles");
    std::fs::create_dir_all(&tvn_dir)?;
    std::fs::create_dir_all(&profile_dir)?;
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    for (e, table) in tables {
        let meta = epoch_file(&embed_dir, "epoch-", e, ".meta.csv");
        let rows = read_embeddings(&table, &meta)?;
        let controls = control_vectors(&rows);
        let transform = fit_tvn(&controls, config.tvn_eps, config.tvn_whiten)?;
        let tvn_path = epoch_file(&tvn_dir, "tvn-", e, ".json");
        write_tvn(&tvn_path, &transform)?;
        let treated: Vec<_> = rows.iter().filter(|r| !r.moa.is_empty()).cloned().collect();
        if treated.is_empty() {
            return Err(Error::Structure("no treated fields to profile".into()));
        }
        let profiles = normalize_and_aggregate(&treated, &transform)?;
        let profile_path = epoch_file(&profile_dir, "profiles-", e, ".tsv");
        write_profiles(&profile_path, &profiles)?;
        println!(
            "tvn: epoch {} -> {} controls fitted, {} profiles, {}",
            e,
            controls.len(),
            profiles.len(),
            profile_path.display()
        );
        inputs.push(table);
        inputs.push(meta);
        outputs.push(tvn_path);
        outputs.push(profile_path);
    }
    lineage::write(&profile_dir, "tvn", config, &inputs, &outputs)
}

fn report_text(report: &EvalReport) -> String {
    let nsc_correct = report.nsc_matches.iter().filter(|m| m.correct).count();
    let nscb_correct = report.nscb_matches.iter().filter(|m| m.correct).count();
    let mut text = String::new();
    let _ = writeln!(
        text,
        "NSC:  {}  ({}/{} correct)",
        format_percent(report.nsc),
        nsc_correct,
        report.nsc_matches.len()
    );
    let _ = writeln!(
        text,
        "NSCB: {}  ({}/{} correct; {} excluded, {} skipped)",
        format_percent(report.nscb),
        nscb_correct,
        report.nscb_matches.len(),
        report.nscb_excluded.len(),
        report.nscb_skipped.len()
    );
    if !report.nscb_excluded.is_empty() {
        let _ = writeln!(
            text,
            "excluded (single-batch mechanism): {}",
            report.nscb_excluded.join(", ")
        );
    }
    if !report.nscb_skipped.is_empty() {
        let _ = writeln!(
            text,
            "skipped (no eligible candidates): {}",
            report.nscb_skipped.join(", ")
        );
    }
    text
}

fn write_matches(path: &Path, report: &EvalReport) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "metric\tquery\tmatched\tdistance\tcorrect")?;
    for (metric, matches) in [("nsc", &report.nsc_matches), ("nscb", &report.nscb_matches)] {
        for m in matches {
            writeln!(
                file,
                "{}\t{}\t{}\t{:.6}\t{}",
                metric, m.query, m.matched, m.distance, m.correct
            )?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn eval(config: &RunConfig, epoch: Option<usize>, profiles: Option<&Path>) -> Result<()> {
    if let Some(table) = profiles {
        let rows = read_profiles(table)?;
        let report = evaluate(&rows, config.batch_exclusion)?;
        let text = report_text(&report);
        print!("{}", text);
        let stem = table.with_extension("");
        let stem_name = stem.file_name().unwrap_or_default().to_string_lossy();
        let dir = table.parent().unwrap_or(Path::new(".")).to_path_buf();
        let text_path = dir.join(format!("{}.report.txt", stem_name));
        let matches_path = dir.join(format!("{}.matches.tsv", stem_name));
        std::fs::write(&text_path, text)?;
        write_matches(&matches_path, &report)?;
        return lineage::write(
            &dir,
            "eval",
            config,
            &[table.to_path_buf()],
            &[text_path, matches_path],
        );
    }

    let run_dir = run_dir(config);
    let profile_dir = run_dir.join("profiles");
    let mut tables = scan_epoch_files(&profile_dir, "profiles-", ".tsv")?;
    if let Some(e) = epoch {
        tables.retain(|(found, _)| *found == e);
        if tables.is_empty() {
            return Err(Error::Dependency(format!(
                "no profile table for epoch {} under {}",
                e,
                profile_dir.display()
            )));
        }
    }
    let eval_dir = run_dir.join("eval");
    std::fs::create_dir_all(&eval_dir)?;
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    let mut scores = Vec::new();
    let mut reports = Vec::new();
    for (e, table) in &tables {
        let rows = read_profiles(table)?;
        let report = evaluate(&rows, config.batch_exclusion)?;
        let text_path = epoch_file(&eval_dir, "report-", *e, ".txt");
        let matches_path = epoch_file(&eval_dir, "matches-", *e, ".tsv");
        std::fs::write(&text_path, report_text(&report))?;
        write_matches(&matches_path, &report)?;
        println!(
            "eval: epoch {} NSC {} NSCB {}",
            e,
            format_percent(report.nsc),
            format_percent(report.nscb)
        );
        scores.push(CheckpointScore { epoch: *e, nsc: report.nsc, nscb: report.nscb });
        reports.push(report);
        inputs.push(table.clone());
        outputs.push(text_path);
        outputs.push(matches_path);
    }
    let nsc_series: Vec<f64> = scores.iter().map(|s| s.nsc).collect();
    let best_idx = evaluation::best_epoch(&nsc_series)?;
    let in_window: Vec<&CheckpointScore> = scores
        .iter()
        .filter(|s| config.eval_window.0 <= s.epoch && s.epoch <= config.eval_window.1)
        .collect();
    let window = |f: fn(&CheckpointScore) -> f64| {
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
        window_nsc: window(|s| s.nsc),
        window_nscb: window(|s| s.nscb),
        scores,
    };
    let scores_path = run_dir.join("scores.tsv");
    let mut file = std::io::BufWriter::new(std::fs::File::create(&scores_path)?);
    writeln!(file, "epoch\tnsc\tnscb")?;
    for s in &report.scores {
        writeln!(file, "{}\t{:.6}\t{:.6}", s.epoch, s.nsc, s.nscb)?;
    }
    file.flush()?;
    drop(file);
    let report_path = run_dir.join("report.json");
    let json = std::io::BufWriter::new(std::fs::File::create(&report_path)?);
    serde_json::to_writer_pretty(json, &report)?;
    println!(
        "eval: best epoch {} NSC {} NSCB {}",
        report.best_epoch,
        format_percent(report.best.nsc),
        format_percent(report.best.nscb)
    );
    if let (Some(nsc), Some(nscb)) = (report.window_nsc, report.window_nscb) {
        println!(
            "eval: window {}..{} mean NSC {} NSCB {}",
            config.eval_window.0,
            config.eval_window.1,
            format_percent(nsc),
            format_percent(nscb)
        );
    }
    outputs.push(scores_path);
    outputs.push(report_path);
    lineage::write(&eval_dir, "eval", config, &inputs, &outputs)
}

/// Nearest-neighbor upscale so grid maps stay viewable as images.
fn upscaled_png(map: &Array2<f32>, factor: usize) -> Array2<u16> {
    let (h, w) = map.dim();
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in map.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    Array2::from_shape_fn((h * factor, w * factor), |(r, c)| {
        let v = (map[(r / factor, c / factor)] - lo) / span;
        (v * 65535.0).round() as u16
    })
}

pub fn attn(
    config: &RunConfig,
    image_id: &str,
    channel: Option<&str>,
    epoch: Option<usize>,
) -> Result<()> {
    let channel = channel.unwrap_or(&config.channels[0]).to_string();
    if !config.channels.contains(&channel) {
        return Err(Error::Parameter(format!(
            "channel '{}' is not selected by this config",
            channel
        )));
    }
    let corrected = require_manifest(&config.paths.corrected)?;
    let record = corrected
        .iter()
        .find(|r| r.image_id == image_id && r.channel == channel)
        .ok_or_else(|| {
            Error::Dependency(format!(
                "image '{}' channel '{}' is not in the corrected manifest",
                image_id, channel
            ))
        })?;
    let run_dir = run_dir(config);
    let channel_dir = pipeline::channel_run_dir(&run_dir, &channel);
    let epoch = match epoch {
        Some(e) => e,
        None => *pipeline::checkpoint_epochs(&channel_dir)?.last().ok_or_else(|| {
            Error::Dependency(format!("no checkpoint under {}", channel_dir.display()))
        })?,
    };
    let stem = checkpoint_stem(&channel_dir, epoch);
    if !TrainState::tensor_path(&stem).exists() {
        return Err(Error::Dependency(format!(
            "no checkpoint at {}",
            stem.display()
        )));
    }
    let state = TrainState::load(&stem, &Device::Cpu, DType::F32)?;
    let params = if config.embed_teacher { &state.teacher } else { &state.student };
    let pixels = imgio::read_f32(&config.paths.corrected.join(&record.path))?;
    let maps = backbone::attention_maps(params, &pixels)?;

    let out_dir = run_dir.join("attn");
    std::fs::create_dir_all(&out_dir)?;
    let base = format!("{}-{}-epoch-{:04}", image_id, channel, epoch);
    let factor = (192 / maps.head_mean.dim().0.max(1)).max(1);
    let mut outputs = Vec::new();
    for (h, map) in maps.per_head.iter().enumerate() {
        let path = out_dir.join(format!("{}-head{}.png", base, h));
        imgio::write_png_u16(&path, &upscaled_png(map, factor))?;
        outputs.push(path);
    }
    let mean_path = out_dir.join(format!("{}-mean.png", base));
    imgio::write_png_u16(&mean_path, &upscaled_png(&maps.head_mean, factor))?;
    outputs.push(mean_path);
    let meta_path = out_dir.join(format!("{}.json", base));
    let meta = serde_json::json!({
        "image_id": image_id,
        "channel": channel,
        "epoch": epoch,
        "grid": [maps.head_mean.dim().0, maps.head_mean.dim().1],
        "heads": maps.per_head.len(),
        "cls_self": maps.cls_self,
    });
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
    outputs.push(meta_path);
    println!(
        "attn: {} heads on a {}x{} grid under {}",
        maps.per_head.len(),
        maps.head_mean.dim().0,
        maps.head_mean.dim().1,
        out_dir.display()
    );
    lineage::write(
        &out_dir,
        "attn",
        config,
        &[
            config.paths.corrected.join(&record.path),
            TrainState::tensor_path(&stem),
        ],
        &outputs,
    )
}

pub fn plot(config: &RunConfig, epoch: Option<usize>) -> Result<()> {
    let run_dir = run_dir(config);
    let profile_dir = run_dir.join("profiles");
    let tables = scan_epoch_files(&profile_dir, "profiles-", ".tsv")?;
    let (e, table) = match epoch {
        Some(e) => tables
            .into_iter()
            .find(|(found, _)| *found == e)
            .ok_or_else(|| {
                Error::Dependency(format!(
                    "no profile table for epoch {} under {}",
                    e,
                    profile_dir.display()
                ))
            })?,
        None => tables.into_iter().next_back().ok_or_else(|| {
            Error::Dependency(format!("no profile tables under {}", profile_dir.display()))
        })?,
    };
    let profiles = read_profiles(&table)?;
    let points = plot::project(&profiles)?;
    let plot_dir = run_dir.join("plot");
    std::fs::create_dir_all(&plot_dir)?;
    let coords_path = epoch_file(&plot_dir, "plot-", e, ".tsv");
    let png_path = epoch_file(&plot_dir, "plot-", e, ".png");
    plot::write_coords(&coords_path, &points)?;
    plot::render_png(&png_path, &points)?;
    println!(
        "plot: {} treatments projected, {} and {}",
        points.len(),
        coords_path.display(),
        png_path.display()
    );
    lineage::write(&plot_dir, "plot", config, &[table], &[coords_path, png_path])
}
