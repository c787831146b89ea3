//! Scratch harness: run the toy pipeline end to end for one label kind and
//! print per-phase wall times plus the checkpoint score table.
//!
//! Usage: tune <none|treatment|compound|moa> <out_dir> [epochs] [base_lr] [teacher_temp]

use std::path::PathBuf;
use std::time::Instant;

use wsdino_core::config::RunConfig;
use wsdino_core::pipeline;
use wsdino_core::sampling::LabelKind;

fn main() {
    let mut args = std::env::args().skip(1);
    let kind = args.next().expect("label kind");
    let out: PathBuf = args.next().expect("out dir").into();
    let epochs: Option<usize> = args.next().map(|s| s.parse().expect("epochs"));
    let base_lr: Option<f64> = args.next().map(|s| s.parse().expect("base_lr"));
    let teacher_temp: Option<f64> = args.next().map(|s| s.parse().expect("teacher_temp"));

    let mut config = RunConfig::toy();
    config.label_kind = match kind.as_str() {
        "none" => LabelKind::None,
        "treatment" => LabelKind::Treatment,
        "compound" => LabelKind::Compound,
        "moa" => LabelKind::Moa,
        other => panic!("unknown label kind {other}"),
    };
    config.run_id = kind.clone();
    if let Some(e) = epochs {
        config.schedule.total_epochs = e;
    }
    if let Some(lr) = base_lr {
        config.schedule.base_lr = lr;
        config.schedule.final_lr = lr / 10.0;
        config.run_id = format!("{}-lr{:.0e}", config.run_id, lr);
    }
    if let Some(tt) = teacher_temp {
        config.schedule.teacher_temp = tt;
        config.schedule.teacher_temp_start = tt;
        config.run_id = format!("{}-tt{}", config.run_id, (tt * 1000.0).round() as i64);
    }
    config.paths.data = out.join("raw");
    config.paths.corrected = out.join("corrected");
    config.paths.runs = out.join("runs");
    config.validate().unwrap();

    let t0 = Instant::now();
    let records = if config.paths.data.join(pipeline::MANIFEST_NAME).exists() {
        pipeline::read_corrected(&config.paths.data).unwrap()
    } else {
        pipeline::datagen(&config.data, &config.paths.data).unwrap()
    };
    println!("datagen: {} images in {:.1?}", records.len(), t0.elapsed());

    let t1 = Instant::now();
    let corrected = if config.paths.corrected.join(pipeline::MANIFEST_NAME).exists() {
        pipeline::read_corrected(&config.paths.corrected).unwrap()
    } else {
        pipeline::preprocess_dataset(
            &records,
            &config.paths.data,
            &config.paths.corrected,
            &config.preprocess,
        )
        .unwrap()
    };
    println!("preprocess: {:.1?}", t1.elapsed());

    let run_dir = config.paths.runs.join(&config.run_id);
    let t2 = Instant::now();
    for channel in config.channels.clone() {
        pipeline::train_channel(
            &config,
            &channel,
            &corrected,
            &config.paths.corrected,
            &run_dir,
            None,
        )
        .unwrap();
    }
    let train_time = t2.elapsed();
    println!("train: {:.1?}", train_time);

    let t3 = Instant::now();
    let report =
        pipeline::score_checkpoints(&config, &corrected, &config.paths.corrected, &run_dir)
            .unwrap();
    println!("eval: {:.1?}", t3.elapsed());

    println!("label_kind={kind}");
    println!("epoch\tnsc\tnscb");
    for s in &report.scores {
        println!("{}\t{:.4}\t{:.4}", s.epoch, s.nsc, s.nscb);
    }
    println!(
        "best_epoch={} nsc={:.4} nscb={:.4} window_nsc={:?} window_nscb={:?}",
        report.best_epoch,
        report.best.nsc,
        report.best.nscb,
        report.window_nsc,
        report.window_nscb
    );
}
