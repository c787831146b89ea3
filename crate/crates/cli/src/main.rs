//! `wsdino`: drive the full pipeline from one declarative config file.
//!
//! Subcommands exchange artifacts only through files, so any stage can be
//! re-run or inspected in isolation. Exit codes: 0 success, 1 config error,
//! 2 data error, 3 numerical failure.

mod lineage;
mod ops;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wsdino_core::config::RunConfig;
use wsdino_core::error::{Error, Result};

#[derive(Parser)]
#[command(
    name = "wsdino",
    version,
    about = "Weakly supervised self-distillation for microscopy profiling"
)]
struct Cli {
    /// TOML config; keys it omits fall back to the preset.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Baseline parameter set: full-scale defaults or the desk-scale preset.
    #[arg(long, global = true, value_parser = ["paper", "toy"], default_value = "paper")]
    preset: String,

    /// Override one config key, e.g. --set batch_size=8 or
    /// --set schedule.total_epochs=20 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// More -v, more logging (default info, -v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic screen and write its manifest.
    Datagen,
    /// Apply illumination correction, resizing, and intensity normalization.
    Preprocess,
    /// Train one model per selected channel.
    Train {
        /// Continue from each channel's latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Embed every field at one checkpoint epoch (default: all epochs).
    Embed {
        #[arg(long)]
        epoch: Option<usize>,
    },
    /// Fit the control-based normalization and write treatment profiles.
    Tvn {
        #[arg(long)]
        epoch: Option<usize>,
    },
    /// Score treatment profiles by nearest-neighbor label retrieval.
    Eval {
        #[arg(long)]
        epoch: Option<usize>,
        /// Score one profile table instead of a run directory.
        #[arg(long, value_name = "FILE")]
        profiles: Option<PathBuf>,
    },
    /// Export class-token attention grids for one image.
    Attn {
        /// Image id from the manifest.
        #[arg(long)]
        image: String,
        /// Channel to visualize (default: first configured channel).
        #[arg(long)]
        channel: Option<String>,
        #[arg(long)]
        epoch: Option<usize>,
    },
    /// Project treatment profiles to two dimensions and draw the scatter.
    Plot {
        #[arg(long)]
        epoch: Option<usize>,
    },
}

/// Preset, then config file, then --set overrides, then path env vars.
fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let base = match cli.preset.as_str() {
        "toy" => RunConfig::toy(),
        _ => RunConfig::paper(),
    };
    let mut value = toml::Value::try_from(&base)
        .map_err(|e| Error::Parameter(format!("preset serialization failed: {}", e)))?;
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Dependency(format!("cannot read config {}: {}", path.display(), e))
        })?;
        let overlay: toml::Value = toml::from_str(&text).map_err(|e| {
            Error::Parameter(format!("config {} does not parse: {}", path.display(), e))
        })?;
        merge_value(&mut value, overlay);
    }
    for entry in &cli.overrides {
        let Some((key, raw)) = entry.split_once('=') else {
            return Err(Error::Parameter(format!(
                "override '{}' is not KEY=VALUE",
                entry
            )));
        };
        let overlay = parse_override(key.trim(), raw.trim())?;
        merge_value(&mut value, overlay);
    }
    let mut config: RunConfig = value.try_into().map_err(|e| {
        Error::Parameter(format!("config does not match the schema: {}", e))
    })?;
    for (var, slot) in [
        ("WSDINO_DATA_DIR", &mut config.paths.data),
        ("WSDINO_CORRECTED_DIR", &mut config.paths.corrected),
        ("WSDINO_RUNS_DIR", &mut config.paths.runs),
    ] {
        if let Ok(path) = std::env::var(var) {
            *slot = PathBuf::from(path);
        }
    }
    config.validate()?;
    Ok(config)
}

/// A dotted KEY=VALUE override parsed as a one-line TOML document; values
/// that do not parse as TOML are retried as strings.
fn parse_override(key: &str, raw: &str) -> Result<toml::Value> {
    if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c)) {
        return Err(Error::Parameter(format!("override key '{}' is malformed", key)));
    }
    let typed = toml::from_str::<toml::Value>(&format!("{} = {}", key, raw));
    match typed {
        Ok(v) => Ok(v),
        Err(_) => {
            let quoted = raw.replace('\\', "\\\\").replace('"', "\\\"");
            toml::from_str(&format!("{} = \"{}\"", key, quoted)).map_err(|e| {
                Error::Parameter(format!("override '{}={}' does not parse: {}", key, raw, e))
            })
        }
    }
}

/// Recursive table merge; scalars and arrays replace wholesale.
fn merge_value(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(base), toml::Value::Table(overlay)) => {
            for (key, value) in overlay {
                match base.get_mut(&key) {
                    Some(slot) => merge_value(slot, value),
                    None => {
                        base.insert(key, value);
                    }
                }
            }
        }
        (base, overlay) => *base = overlay,
    }
}

fn run(cli: &Cli) -> Result<()> {
    let config = resolve_config(cli)?;
    match &cli.command {
        Command::Datagen => ops::datagen(&config),
        Command::Preprocess => ops::preprocess(&config),
        Command::Train { resume } => ops::train(&config, *resume),
        Command::Embed { epoch } => ops::embed(&config, *epoch),
        Command::Tvn { epoch } => ops::tvn(&config, *epoch),
        Command::Eval { epoch, profiles } => ops::eval(&config, *epoch, profiles.as_deref()),
        Command::Attn { image, channel, epoch } => {
            ops::attn(&config, image, channel.as_deref(), *epoch)
        }
        Command::Plot { epoch } => ops::plot(&config, *epoch),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version displays are successes; anything else is a
            // malformed invocation, which is a config error.
            use clap::error::ErrorKind;
            let ok = matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = err.print();
            return ExitCode::from(if ok { 0 } else { 1 });
        }
    };
    env_logger::Builder::new()
        .filter_level(match cli.verbose {
            0 => log::LevelFilter::Info,
            1 => log::LevelFilter::Debug,
            _ => log::LevelFilter::Trace,
        })
        .format_timestamp(None)
        .parse_default_env()
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err);
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_merge_into_nested_tables() {
        let mut base = toml::Value::try_from(RunConfig::toy()).unwrap();
        let overlay = parse_override("schedule.total_epochs", "7").unwrap();
        merge_value(&mut base, overlay);
        let config: RunConfig = base.try_into().unwrap();
        assert_eq!(config.schedule.total_epochs, 7);
        assert_eq!(config.schedule.warmup_epochs, RunConfig::toy().schedule.warmup_epochs);
    }

    #[test]
    fn bare_strings_parse_as_strings() {
        let mut base = toml::Value::try_from(RunConfig::toy()).unwrap();
        merge_value(&mut base, parse_override("run_id", "exp-3").unwrap());
        let config: RunConfig = base.try_into().unwrap();
        assert_eq!(config.run_id, "exp-3");
    }

    #[test]
    fn unknown_override_keys_fail_the_schema() {
        let mut base = toml::Value::try_from(RunConfig::toy()).unwrap();
        merge_value(&mut base, parse_override("batch_sise", "8").unwrap());
        let err = base.try_into::<RunConfig>().unwrap_err();
        assert!(err.to_string().contains("batch_sise"));
    }
}
