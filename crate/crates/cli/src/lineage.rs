//! Provenance sidecars: every subcommand records the config hash plus the
//! checksums of the files it read and wrote.

use std::path::{Path, PathBuf};

use serde::Serialize;
use wsdino_core::config::{file_hash, RunConfig};
use wsdino_core::error::Result;

#[derive(Serialize)]
struct FileStamp {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Lineage {
    subcommand: String,
    config_hash: String,
    inputs: Vec<FileStamp>,
    outputs: Vec<FileStamp>,
}

fn stamp(paths: &[PathBuf]) -> Result<Vec<FileStamp>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileStamp {
                path: p.display().to_string(),
                sha256: file_hash(p)?,
            })
        })
        .collect()
}

/// Write `<dir>/<name>.lineage.json` describing one subcommand invocation.
pub fn write(
    dir: &Path,
    name: &str,
    config: &RunConfig,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<()> {
    let record = Lineage {
        subcommand: name.to_string(),
        config_hash: config.hash()?,
        inputs: stamp(inputs)?,
        outputs: stamp(outputs)?,
    };
    let path = dir.join(format!("{}.lineage.json", name));
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(file, &record)?;
    Ok(())
}
