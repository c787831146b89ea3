//! Image manifest: one row per (field of view, fluorescent channel).
//!
//! The manifest is the contract between pipeline stages. Every stage reads
//! and writes the same delimited layout:
//! `image_id,path,channel,compound,concentration,treatment,moa,batch,plate`.
//! `image_id` identifies the field; `(image_id, channel)` identifies the row.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Compound label reserved for the vehicle control group.
pub const CONTROL_COMPOUND: &str = "DMSO";

/// Canonical channel names in the fixed concatenation order.
pub const CHANNEL_NAMES: [&str; 3] = ["dna", "tubulin", "actin"];

/// One image row: a single channel of a single field of view plus metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub path: String,
    pub channel: String,
    pub compound: String,
    pub concentration: f64,
    pub treatment: String,
    /// Empty for control records.
    #[serde(default)]
    pub moa: String,
    pub batch: String,
    pub plate: String,
}

impl ImageRecord {
    /// True when this row belongs to the vehicle control group.
    pub fn is_control(&self) -> bool {
        self.compound == CONTROL_COMPOUND
    }

    /// Unique key for this row.
    pub fn record_key(&self) -> String {
        format!("{}/{}", self.image_id, self.channel)
    }
}

/// Deterministic treatment label from compound and concentration.
pub fn treatment_label(compound: &str, concentration: f64) -> String {
    format!("{}@{}", compound, format_concentration(concentration))
}

/// Shortest decimal form so labels round-trip through text tables.
pub fn format_concentration(c: f64) -> String {
    format!("{}", c)
}

/// Channel name for index `i` (falls back to `ch{i}` past the named three).
pub fn channel_name(i: usize) -> String {
    if i < CHANNEL_NAMES.len() {
        CHANNEL_NAMES[i].to_string()
    } else {
        format!("ch{}", i)
    }
}

/// Write records as a delimited manifest table.
pub fn write_manifest(path: &Path, records: &[ImageRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut writer = csv::Writer::from_path(path)?;
    for r in records {
        writer.serialize(r)?;
    }
    writer.flush()?;
    Ok(())
}

/// Read a manifest table.
pub fn read_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    if !path.exists() {
        return Err(Error::Dependency(format!(
            "manifest not found: {}",
            path.display()
        )));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let mut records = Vec::new();
    for row in reader.deserialize() {
        records.push(row?);
    }
    Ok(records)
}

/// Distinct values of a metadata column, in first-seen order.
pub fn distinct<'a, F>(records: &'a [ImageRecord], f: F) -> Vec<String>
where
    F: Fn(&'a ImageRecord) -> &'a str,
{
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for r in records {
        let v = f(r);
        if seen.insert(v) {
            out.push(v.to_string());
        }
    }
    out
}

/// Records for one channel, preserving manifest order.
pub fn filter_channel<'a>(records: &'a [ImageRecord], channel: &str) -> Vec<&'a ImageRecord> {
    records.iter().filter(|r| r.channel == channel).collect()
}
