//! Deterministic synthetic fluorescent-microscopy dataset with known
//! MOA / compound / treatment / batch structure.
//!
//! Morphology (blob count, eccentricity, texture frequency, blob size) is a
//! function of MOA, modulated by concentration through a saturating dose
//! response. Batch effects are a multiplicative per-batch gain plus an
//! additive low-frequency intensity field, both scaled by
//! `batch_effect_strength`. Rendering is pure per (field, channel) given the
//! spec seed, so regeneration is bit-identical and parallelization is safe.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imgio;
use crate::manifest::{channel_name, treatment_label, ImageRecord, CONTROL_COMPOUND};

/// Layout and rendering knobs for one synthetic dataset.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub n_moa: usize,
    pub compounds_per_moa: usize,
    pub concentrations_per_compound: usize,
    pub fields_per_treatment: usize,
    pub n_batches: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    pub channels: usize,
    pub batch_effect_strength: f64,
    pub seed: u64,
    /// Vehicle-control fields rendered per batch.
    #[serde(default = "default_control_fields")]
    pub control_fields_per_batch: usize,
}

fn default_control_fields() -> usize {
    44
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::toy()
    }
}

impl SyntheticSpec {
    /// Desk-scale preset: 4 MOA x 3 compounds x 2 concentrations,
    /// 8 fields per treatment, 3 batches, batch effects on.
    pub fn toy() -> Self {
        Self {
            n_moa: 4,
            compounds_per_moa: 3,
            concentrations_per_compound: 2,
            fields_per_treatment: 8,
            n_batches: 3,
            image_size: 96,
            channels: 3,
            batch_effect_strength: 1.0,
            seed: 7,
            // Control count must exceed twice the fused embedding dimension
            // so the whitening covariance is well conditioned.
            control_fields_per_batch: 44,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_moa == 0
            || self.compounds_per_moa == 0
            || self.concentrations_per_compound == 0
            || self.n_batches == 0
            || self.channels == 0
        {
            return Err(Error::Structure(
                "all layout counts must be >= 1".into(),
            ));
        }
        if self.image_size < 64 {
            return Err(Error::Structure(format!(
                "image_size must be >= 64, got {}",
                self.image_size
            )));
        }
        if self.batch_effect_strength < 0.0 {
            return Err(Error::Structure(
                "batch_effect_strength must be >= 0".into(),
            ));
        }
        // A treatment never crosses batches, so a compound can only span
        // several batches through several concentrations.
        if self.n_batches >= 2 && self.concentrations_per_compound < 2 {
            return Err(Error::Structure(
                "compounds must span >= 2 batches, which needs >= 2 concentrations per compound"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn n_compounds(&self) -> usize {
        self.n_moa * self.compounds_per_moa
    }

    pub fn n_treatments(&self) -> usize {
        self.n_compounds() * self.concentrations_per_compound
    }

    /// MOA index of compound `k` (contiguous blocks).
    pub fn moa_of_compound(&self, k: usize) -> usize {
        k / self.compounds_per_moa
    }

    /// Batch index of treatment (compound `k`, concentration slot `t`).
    /// Staggering by compound spreads each compound over
    /// `min(concentrations, n_batches)` batches.
    pub fn batch_of_treatment(&self, k: usize, t: usize) -> usize {
        (k + t) % self.n_batches
    }

    /// Concentration value for slot `t`: geometric series 3, 9, 27, ...
    /// Starting at 3 keeps the lowest dose at weight 0.75 under the
    /// saturating response, so every treatment expresses most of its
    /// phenotype instead of sitting halfway to the control.
    pub fn concentration(&self, t: usize) -> f64 {
        3f64.powi(t as i32 + 1)
    }
}

/// Rendering parameters for one phenotype.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Morphology {
    pub blob_count: f64,
    pub eccentricity: f64,
    /// Texture base frequency in cycles per pixel.
    pub texture_freq: f64,
    /// Blob radius as a fraction of the image side.
    pub radius_frac: f64,
    pub texture_amp: f64,
    pub intensity: f64,
}

/// Phenotype of the vehicle control group.
pub fn neutral_morphology() -> Morphology {
    Morphology {
        blob_count: 6.0,
        eccentricity: 0.25,
        texture_freq: 0.12,
        radius_frac: 0.065,
        texture_amp: 0.30,
        intensity: 1.0,
    }
}

// Twelve well-separated phenotypes; MOAs beyond twelve reuse rows with a
// small deterministic shift.
const MOA_TABLE: [Morphology; 12] = [
    Morphology { blob_count: 3.0, eccentricity: 0.15, texture_freq: 0.08, radius_frac: 0.095, texture_amp: 0.25, intensity: 1.15 },
    Morphology { blob_count: 16.0, eccentricity: 0.70, texture_freq: 0.28, radius_frac: 0.045, texture_amp: 0.55, intensity: 0.95 },
    Morphology { blob_count: 9.0, eccentricity: 0.45, texture_freq: 0.18, radius_frac: 0.070, texture_amp: 0.70, intensity: 1.25 },
    Morphology { blob_count: 5.0, eccentricity: 0.80, texture_freq: 0.10, radius_frac: 0.080, texture_amp: 0.20, intensity: 0.85 },
    Morphology { blob_count: 13.0, eccentricity: 0.20, texture_freq: 0.33, radius_frac: 0.055, texture_amp: 0.45, intensity: 1.10 },
    Morphology { blob_count: 7.0, eccentricity: 0.60, texture_freq: 0.24, radius_frac: 0.090, texture_amp: 0.60, intensity: 0.90 },
    Morphology { blob_count: 18.0, eccentricity: 0.35, texture_freq: 0.14, radius_frac: 0.040, texture_amp: 0.30, intensity: 1.20 },
    Morphology { blob_count: 4.0, eccentricity: 0.50, texture_freq: 0.30, radius_frac: 0.075, texture_amp: 0.65, intensity: 1.00 },
    Morphology { blob_count: 11.0, eccentricity: 0.75, texture_freq: 0.20, radius_frac: 0.060, texture_amp: 0.35, intensity: 1.30 },
    Morphology { blob_count: 6.0, eccentricity: 0.10, texture_freq: 0.26, radius_frac: 0.085, texture_amp: 0.50, intensity: 0.80 },
    Morphology { blob_count: 15.0, eccentricity: 0.55, texture_freq: 0.12, radius_frac: 0.050, texture_amp: 0.40, intensity: 1.05 },
    Morphology { blob_count: 8.0, eccentricity: 0.30, texture_freq: 0.22, radius_frac: 0.065, texture_amp: 0.75, intensity: 0.92 },
];

/// Phenotype for MOA index `m` at full effect.
pub fn moa_morphology(m: usize) -> Morphology {
    let mut morph = MOA_TABLE[m % MOA_TABLE.len()];
    let wrap = (m / MOA_TABLE.len()) as f64;
    if wrap > 0.0 {
        morph.blob_count = (morph.blob_count + 2.0 * wrap).min(24.0);
        morph.texture_freq = (morph.texture_freq + 0.02 * wrap).min(0.4);
    }
    morph
}

/// Relative half-width of each compound's deviation from its MOA phenotype.
/// Small against the between-MOA contrasts (which differ by 2x and more),
/// so mechanism structure still dominates.
pub const COMPOUND_SPREAD: f64 = 0.07;

/// Within-MOA individuality: compound `k` perturbs its mechanism phenotype
/// by a fixed factor per morphology field. Compounds sharing a mechanism
/// stay similar without being identical, so an encoder has to learn to pull
/// them together rather than getting it for free from pixel statistics.
pub fn compound_morphology(moa: &Morphology, k: usize) -> Morphology {
    // Golden-ratio sequence: deterministic, well spread in [-1, 1], and a
    // pure function of (compound, field).
    let golden = 0.618_033_988_749_894_9_f64;
    let wobble = |field: usize| -> f64 {
        let u = ((k * 6 + field + 1) as f64 * golden).fract();
        1.0 + (2.0 * u - 1.0) * COMPOUND_SPREAD
    };
    Morphology {
        blob_count: moa.blob_count * wobble(0),
        eccentricity: moa.eccentricity * wobble(1),
        texture_freq: moa.texture_freq * wobble(2),
        radius_frac: moa.radius_frac * wobble(3),
        texture_amp: moa.texture_amp * wobble(4),
        intensity: moa.intensity * wobble(5),
    }
}

/// Saturating dose response pulling the neutral phenotype toward the MOA
/// phenotype: weight = c / (c + 1).
pub fn dose_morphology(moa: &Morphology, concentration: f64) -> Morphology {
    let w = concentration / (concentration + 1.0);
    let n = neutral_morphology();
    let lerp = |a: f64, b: f64| a + w * (b - a);
    Morphology {
        blob_count: lerp(n.blob_count, moa.blob_count),
        eccentricity: lerp(n.eccentricity, moa.eccentricity),
        texture_freq: lerp(n.texture_freq, moa.texture_freq),
        radius_frac: lerp(n.radius_frac, moa.radius_frac),
        texture_amp: lerp(n.texture_amp, moa.texture_amp),
        intensity: lerp(n.intensity, moa.intensity),
    }
}

/// Per-batch nuisance parameters (gain, field direction, field phase).
#[derive(Debug, Clone, Copy)]
pub struct BatchEffect {
    pub gain: f64,
    pub field_angle: f64,
    pub field_phase: f64,
    pub field_amp: f64,
}

const GAIN_OFFSETS: [f64; 6] = [0.25, -0.22, 0.12, -0.18, 0.20, -0.10];

/// Deterministic nuisance model for batch `b`.
pub fn batch_effect(spec: &SyntheticSpec, b: usize) -> BatchEffect {
    let s = spec.batch_effect_strength;
    let golden = 0.618_033_988_749_894_9_f64;
    BatchEffect {
        gain: 1.0 + s * GAIN_OFFSETS[b % GAIN_OFFSETS.len()],
        field_angle: std::f64::consts::TAU * ((b as f64 * golden).fract()),
        field_phase: std::f64::consts::TAU * ((b as f64 * golden * golden).fract()),
        field_amp: s * 0.35,
    }
}

use crate::seeding::derive_rng;

struct Blob {
    row: f64,
    col: f64,
    major: f64,
    minor: f64,
    angle: f64,
    peak: f64,
}

/// Value-noise lattice: uniform [-1, 1] node values, bilinear interpolation.
struct ValueNoise {
    nodes: Array2<f64>,
    spacing: f64,
}

impl ValueNoise {
    fn new(size: usize, freq: f64, rng: &mut ChaCha8Rng) -> Self {
        let spacing = (1.0 / freq.max(1e-3)).max(2.0);
        let n = (size as f64 / spacing).ceil() as usize + 2;
        let nodes = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        Self { nodes, spacing }
    }

    fn sample(&self, row: f64, col: f64) -> f64 {
        let r = row / self.spacing;
        let c = col / self.spacing;
        let r0 = r.floor() as usize;
        let c0 = c.floor() as usize;
        let (n_rows, n_cols) = self.nodes.dim();
        let r1 = (r0 + 1).min(n_rows - 1);
        let c1 = (c0 + 1).min(n_cols - 1);
        let fr = r - r0 as f64;
        let fc = c - c0 as f64;
        let top = self.nodes[(r0, c0)] * (1.0 - fc) + self.nodes[(r0, c1)] * fc;
        let bottom = self.nodes[(r1, c0)] * (1.0 - fc) + self.nodes[(r1, c1)] * fc;
        top * (1.0 - fr) + bottom * fr
    }
}

const BACKGROUND: [f64; 3] = [180.0, 240.0, 210.0];
const BLOB_GAIN: [f64; 3] = [1.0, 0.80, 1.20];
const TEXTURE_GAIN: [f64; 3] = [0.65, 1.30, 1.00];
const PEAK_BASE: f64 = 2200.0;
const NOISE_SIGMA: f64 = 6.0;

/// The channel-independent part of one field: blob layout plus texture.
pub struct FieldScene {
    blobs: Vec<Blob>,
    noise_coarse: ValueNoise,
    noise_fine: ValueNoise,
    texture_amp: f64,
    size: usize,
}

/// Build the scene for one field. Shared by all channels of the field so
/// the channels image the same simulated cells.
pub fn build_scene(spec: &SyntheticSpec, morph: &Morphology, image_id: &str) -> FieldScene {
    let size = spec.image_size;
    let mut rng = derive_rng(spec.seed, &format!("scene/{}", image_id));
    let count = (morph.blob_count + rng.gen_range(-0.5..0.5)).round().max(1.0) as usize;
    let radius = morph.radius_frac * size as f64;
    let margin = size as f64 * 0.12;
    let blobs = (0..count)
        .map(|_| {
            let major = radius * rng.gen_range(0.85..1.15);
            let minor = major * (1.0 - 0.75 * morph.eccentricity).max(0.15);
            Blob {
                row: rng.gen_range(margin..size as f64 - margin),
                col: rng.gen_range(margin..size as f64 - margin),
                major,
                minor,
                angle: rng.gen_range(0.0..std::f64::consts::PI),
                peak: PEAK_BASE * morph.intensity * rng.gen_range(0.9..1.1),
            }
        })
        .collect();
    let noise_coarse = ValueNoise::new(size, morph.texture_freq, &mut rng);
    let noise_fine = ValueNoise::new(size, morph.texture_freq * 2.0, &mut rng);
    FieldScene {
        blobs,
        noise_coarse,
        noise_fine,
        texture_amp: morph.texture_amp,
        size,
    }
}

/// Render one channel of a scene as 16-bit intensities.
pub fn render_channel(
    spec: &SyntheticSpec,
    scene: &FieldScene,
    batch_idx: usize,
    channel_idx: usize,
    image_id: &str,
) -> Array2<u16> {
    let size = scene.size;
    let effect = batch_effect(spec, batch_idx);
    let ch = channel_idx % 3;
    let mut noise_rng = derive_rng(spec.seed, &format!("noise/{}/{}", image_id, channel_idx));
    let (sin_a, cos_a) = effect.field_angle.sin_cos();

    let mut out = Array2::<u16>::zeros((size, size));
    for r in 0..size {
        for c in 0..size {
            let (rf, cf) = (r as f64, c as f64);
            let mut blob_layer = 0.0;
            for blob in &scene.blobs {
                let dr = rf - blob.row;
                let dc = cf - blob.col;
                let (sin_t, cos_t) = blob.angle.sin_cos();
                let u = cos_t * dc + sin_t * dr;
                let v = -sin_t * dc + cos_t * dr;
                let d2 = (u / blob.major).powi(2) + (v / blob.minor).powi(2);
                if d2 < 16.0 {
                    blob_layer += blob.peak * (-0.5 * d2).exp();
                }
            }
            let texture = 0.6 * scene.noise_coarse.sample(rf, cf)
                + 0.4 * scene.noise_fine.sample(rf, cf);
            let textured = blob_layer
                * BLOB_GAIN[ch]
                * (1.0 + scene.texture_amp * TEXTURE_GAIN[ch] * texture).max(0.0);
            let field_wave = (std::f64::consts::TAU * (cos_a * cf + sin_a * rf)
                / size as f64
                + effect.field_phase)
                .sin();
            let field = effect.field_amp * PEAK_BASE * 0.5 * (1.0 + field_wave);
            // Box-Muller from two uniforms keeps the draw count per pixel fixed.
            let (u1, u2): (f64, f64) = (noise_rng.gen_range(1e-12..1.0), noise_rng.gen());
            let gauss = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            let value = (BACKGROUND[ch] + textured) * effect.gain + field + NOISE_SIGMA * gauss;
            out[(r, c)] = value.round().clamp(0.0, 65535.0) as u16;
        }
    }
    out
}

fn image_path(out_dir: &Path, image_id: &str, channel: &str) -> String {
    out_dir
        .join(format!("{}_{}.png", image_id, channel))
        .to_string_lossy()
        .into_owned()
}

struct FieldPlan {
    image_id: String,
    compound: String,
    concentration: f64,
    treatment: String,
    moa: String,
    batch: String,
    morphology: Morphology,
    batch_idx: usize,
}

fn render_plans(
    spec: &SyntheticSpec,
    plans: &[FieldPlan],
    out_dir: &Path,
) -> Result<Vec<ImageRecord>> {
    std::fs::create_dir_all(out_dir)?;
    let results: Vec<Result<Vec<ImageRecord>>> = plans
        .par_iter()
        .map(|plan| {
            let scene = build_scene(spec, &plan.morphology, &plan.image_id);
            let mut rows = Vec::with_capacity(spec.channels);
            for ch in 0..spec.channels {
                let channel = channel_name(ch);
                let pixels = render_channel(spec, &scene, plan.batch_idx, ch, &plan.image_id);
                let path = image_path(out_dir, &plan.image_id, &channel);
                imgio::write_png_u16(Path::new(&path), &pixels)?;
                rows.push(ImageRecord {
                    image_id: plan.image_id.clone(),
                    path,
                    channel,
                    compound: plan.compound.clone(),
                    concentration: plan.concentration,
                    treatment: plan.treatment.clone(),
                    moa: plan.moa.clone(),
                    batch: plan.batch.clone(),
                    plate: format!("plate-{}", plan.batch_idx),
                });
            }
            Ok(rows)
        })
        .collect();
    // Manifest assembly stays single-threaded and ordered.
    let mut records = Vec::new();
    for r in results {
        records.extend(r?);
    }
    Ok(records)
}

/// Generate all treated fields and return their manifest rows.
pub fn generate_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<Vec<ImageRecord>> {
    spec.validate()?;
    let mut plans = Vec::new();
    for k in 0..spec.n_compounds() {
        let compound = format!("cmpd-{:02}", k);
        let moa_idx = spec.moa_of_compound(k);
        let moa = format!("moa-{:02}", moa_idx);
        for t in 0..spec.concentrations_per_compound {
            let concentration = spec.concentration(t);
            let treatment = treatment_label(&compound, concentration);
            let batch_idx = spec.batch_of_treatment(k, t);
            let phenotype = compound_morphology(&moa_morphology(moa_idx), k);
            let morphology = dose_morphology(&phenotype, concentration);
            for f in 0..spec.fields_per_treatment {
                plans.push(FieldPlan {
                    image_id: format!("img-{}-c{}-f{:02}", compound, t, f),
                    compound: compound.clone(),
                    concentration,
                    treatment: treatment.clone(),
                    moa: moa.clone(),
                    batch: format!("batch-{}", batch_idx),
                    morphology,
                    batch_idx,
                });
            }
        }
    }
    render_plans(spec, &plans, out_dir)
}

/// Generate vehicle-control fields, present in every batch.
pub fn dmso_controls(spec: &SyntheticSpec, out_dir: &Path) -> Result<Vec<ImageRecord>> {
    spec.validate()?;
    let morphology = neutral_morphology();
    let mut plans = Vec::new();
    for b in 0..spec.n_batches {
        for f in 0..spec.control_fields_per_batch {
            plans.push(FieldPlan {
                image_id: format!("img-dmso-b{}-f{:02}", b, f),
                compound: CONTROL_COMPOUND.to_string(),
                concentration: 0.0,
                treatment: CONTROL_COMPOUND.to_string(),
                moa: String::new(),
                batch: format!("batch-{}", b),
                morphology,
                batch_idx: b,
            });
        }
    }
    render_plans(spec, &plans, out_dir)
}
