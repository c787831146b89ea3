//! Field-level embedding extraction: four center crops per image, an
//! elementwise median over their class-token embeddings, then fixed-order
//! channel concatenation and L2 normalization.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use candle_core::{DType, Device};
use ndarray::Array2;

use crate::backbone::{crops_to_tensor, encode_batch, ParamSet};
use crate::error::{Error, Result};
use crate::manifest::{ImageRecord, CHANNEL_NAMES};

/// Anything that maps a pixel crop to a fixed-length vector.
pub trait CropEncoder {
    fn embed_dim(&self) -> usize;
    fn encode_crop(&self, crop: &Array2<f32>) -> Result<Vec<f32>>;
    /// Batched hook; the default just loops.
    fn encode_crops(&self, crops: &[Array2<f32>]) -> Result<Vec<Vec<f32>>> {
        crops.iter().map(|c| self.encode_crop(c)).collect()
    }
}

/// Inference over a frozen snapshot of a parameter set, class-token output
/// only. Owns detached tensors, so it is cheap to share across threads.
pub struct TeacherEncoder {
    config: crate::backbone::ViTConfig,
    params: std::collections::BTreeMap<String, candle_core::Tensor>,
}

impl TeacherEncoder {
    pub fn new(params: &ParamSet) -> Self {
        Self { config: params.config, params: params.detached_params() }
    }
}

impl CropEncoder for TeacherEncoder {
    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn encode_crop(&self, crop: &Array2<f32>) -> Result<Vec<f32>> {
        Ok(self.encode_crops(std::slice::from_ref(crop))?.remove(0))
    }

    fn encode_crops(&self, crops: &[Array2<f32>]) -> Result<Vec<Vec<f32>>> {
        let refs: Vec<&Array2<f32>> = crops.iter().collect();
        let (patches, grid) = crops_to_tensor(&refs, &self.config, &Device::Cpu, DType::F32)?;
        let encoded = encode_batch(&self.config, &self.params, &patches, grid, false)?;
        Ok(encoded.cls.to_dtype(DType::F32)?.to_vec2::<f32>()?)
    }
}

/// The four non-overlapping s-sized tiles of the centered 2s-square window,
/// in order top-left, top-right, bottom-left, bottom-right.
pub fn quadrant_crops(image: &Array2<f32>, s: usize) -> Result<[Array2<f32>; 4]> {
    let (h, w) = image.dim();
    if s == 0 {
        return Err(Error::Parameter("crop side must be positive".into()));
    }
    if h < 2 * s || w < 2 * s {
        return Err(Error::Shape(format!(
            "image {}x{} cannot host a centered {}x{} window",
            h,
            w,
            2 * s,
            2 * s
        )));
    }
    let top = (h - 2 * s) / 2;
    let left = (w - 2 * s) / 2;
    let tile = |r0: usize, c0: usize| {
        image
            .slice(ndarray::s![r0..r0 + s, c0..c0 + s])
            .to_owned()
    };
    Ok([
        tile(top, left),
        tile(top, left + s),
        tile(top + s, left),
        tile(top + s, left + s),
    ])
}

/// Per-coordinate median; an even count takes the mean of the two middle
/// values.
pub fn elementwise_median(vectors: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Structure("median of zero vectors".into()))?;
    let dim = first.len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape("median inputs differ in length".into()));
    }
    let n = vectors.len();
    let mut out = Vec::with_capacity(dim);
    let mut column = vec![0.0f32; n];
    for d in 0..dim {
        for (slot, v) in column.iter_mut().zip(vectors) {
            *slot = v[d];
        }
        column.sort_by(|a, b| a.total_cmp(b));
        let mid = n / 2;
        out.push(if n % 2 == 1 {
            column[mid]
        } else {
            0.5 * (column[mid - 1] + column[mid])
        });
    }
    Ok(out)
}

/// One image's embedding: encode the four center tiles and take their
/// elementwise median.
pub fn field_embedding(
    image: &Array2<f32>,
    crop_side: usize,
    encoder: &dyn CropEncoder,
) -> Result<Vec<f32>> {
    let crops = quadrant_crops(image, crop_side)?;
    let encoded = encoder.encode_crops(&crops)?;
    elementwise_median(&encoded)
}

/// Fixed channel concatenation (dna, tubulin, actin) followed by L2
/// normalization.
pub fn concat_and_normalize(per_channel: &BTreeMap<String, Vec<f32>>) -> Result<Vec<f32>> {
    concat_subset(per_channel, &CHANNEL_NAMES.map(String::from))
}

/// concat_and_normalize over an explicit channel selection, kept in the
/// canonical channel order regardless of the selection's order.
pub fn concat_subset(
    per_channel: &BTreeMap<String, Vec<f32>>,
    channels: &[String],
) -> Result<Vec<f32>> {
    if channels.is_empty() {
        return Err(Error::Parameter("no channels selected".into()));
    }
    for name in channels {
        if !CHANNEL_NAMES.contains(&name.as_str()) {
            return Err(Error::Parameter(format!("unknown channel '{}'", name)));
        }
    }
    let mut out = Vec::new();
    for name in CHANNEL_NAMES.iter().filter(|n| channels.iter().any(|c| c == *n)) {
        let v = per_channel
            .get(*name)
            .ok_or_else(|| Error::Structure(format!("channel '{}' missing for field", name)))?;
        out.extend_from_slice(v);
    }
    let norm: f64 = out.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm <= 0.0 || !norm.is_finite() {
        return Err(Error::Degenerate(
            "concatenated embedding has no direction (zero or non-finite norm)".into(),
        ));
    }
    for x in &mut out {
        *x = (*x as f64 / norm) as f32;
    }
    Ok(out)
}

/// One row of the embedding table with the manifest metadata it inherits.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EmbeddingRecord {
    pub image_id: String,
    /// A manifest channel name, or "concat" after channel fusion.
    pub channel: String,
    pub compound: String,
    pub concentration: f64,
    pub treatment: String,
    pub moa: String,
    pub batch: String,
    pub plate: String,
    pub vector: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn from_record(record: &ImageRecord, channel: &str, vector: Vec<f32>) -> Self {
        Self {
            image_id: record.image_id.clone(),
            channel: channel.to_string(),
            compound: record.compound.clone(),
            concentration: record.concentration,
            treatment: record.treatment.clone(),
            moa: record.moa.clone(),
            batch: record.batch.clone(),
            plate: record.plate.clone(),
            vector,
        }
    }
}

/// Fuse per-channel rows into one "concat" row per field. Every field must
/// carry all three channels.
pub fn fuse_channels(rows: &[EmbeddingRecord]) -> Result<Vec<EmbeddingRecord>> {
    fuse_channel_subset(rows, &CHANNEL_NAMES.map(String::from))
}

/// Per-field fusion over an explicit channel selection.
pub fn fuse_channel_subset(
    rows: &[EmbeddingRecord],
    channels: &[String],
) -> Result<Vec<EmbeddingRecord>> {
    let mut by_field: BTreeMap<String, Vec<&EmbeddingRecord>> = BTreeMap::new();
    for row in rows {
        by_field.entry(row.image_id.clone()).or_default().push(row);
    }
    let mut fused = Vec::with_capacity(by_field.len());
    for (image_id, group) in by_field {
        let mut per_channel = BTreeMap::new();
        for row in &group {
            if per_channel.insert(row.channel.clone(), row.vector.clone()).is_some() {
                return Err(Error::Structure(format!(
                    "field '{}' has duplicate channel '{}'",
                    image_id, row.channel
                )));
            }
        }
        let vector = concat_subset(&per_channel, channels)?;
        fused.push(EmbeddingRecord {
            image_id,
            channel: "concat".into(),
            compound: group[0].compound.clone(),
            concentration: group[0].concentration,
            treatment: group[0].treatment.clone(),
            moa: group[0].moa.clone(),
            batch: group[0].batch.clone(),
            plate: group[0].plate.clone(),
            vector,
        });
    }
    Ok(fused)
}

/// Write the vector table (channel order in the header line) plus a sidecar
/// metadata table keyed by image_id.
pub fn write_embeddings(table_path: &Path, meta_path: &Path, rows: &[EmbeddingRecord]) -> Result<()> {
    let mut table = std::io::BufWriter::new(std::fs::File::create(table_path)?);
    writeln!(table, "#channel_order={}", CHANNEL_NAMES.join(","))?;
    for row in rows {
        write!(table, "{}", row.image_id)?;
        for v in &row.vector {
            write!(table, "\t{}", v)?;
        }
        writeln!(table)?;
    }
    table.flush()?;

    let mut meta = csv::Writer::from_path(meta_path)?;
    meta.write_record([
        "image_id",
        "channel",
        "compound",
        "concentration",
        "treatment",
        "moa",
        "batch",
        "plate",
    ])?;
    for row in rows {
        meta.write_record([
            row.image_id.as_str(),
            row.channel.as_str(),
            row.compound.as_str(),
            &row.concentration.to_string(),
            row.treatment.as_str(),
            row.moa.as_str(),
            row.batch.as_str(),
            row.plate.as_str(),
        ])?;
    }
    meta.flush()?;
    Ok(())
}

pub fn read_embeddings(table_path: &Path, meta_path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let mut meta_by_id: BTreeMap<String, EmbeddingRecord> = BTreeMap::new();
    let mut meta = csv::Reader::from_path(meta_path)?;
    for row in meta.deserialize::<MetaRow>() {
        let row = row?;
        meta_by_id.insert(
            row.image_id.clone(),
            EmbeddingRecord {
                image_id: row.image_id,
                channel: row.channel,
                compound: row.compound,
                concentration: row.concentration,
                treatment: row.treatment,
                moa: row.moa,
                batch: row.batch,
                plate: row.plate,
                vector: Vec::new(),
            },
        );
    }

    let file = std::io::BufReader::new(std::fs::File::open(table_path)?);
    let mut rows = Vec::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            let expected = format!("#channel_order={}", CHANNEL_NAMES.join(","));
            if line != expected {
                return Err(Error::Structure(format!(
                    "embedding table declares unsupported {}",
                    line
                )));
            }
            continue;
        }
        let mut parts = line.split('\t');
        let image_id = parts
            .next()
            .ok_or_else(|| Error::Structure(format!("empty embedding row {}", lineno + 1)))?;
        let vector: Vec<f32> = parts
            .map(|p| {
                p.parse::<f32>().map_err(|_| {
                    Error::Structure(format!("bad number '{}' in embedding row {}", p, lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        let mut record = meta_by_id
            .get(image_id)
            .cloned()
            .ok_or_else(|| Error::Structure(format!("no metadata for image '{}'", image_id)))?;
        record.vector = vector;
        rows.push(record);
    }
    Ok(rows)
}

#[derive(serde::Deserialize)]
struct MetaRow {
    image_id: String,
    channel: String,
    compound: String,
    concentration: f64,
    treatment: String,
    moa: String,
    batch: String,
    plate: String,
}
