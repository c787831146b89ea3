//! Field-of-view pre-processing: illumination correction, bicubic resize,
//! intensity clipping and per-image normalization.
//!
//! The stages run in a fixed order (correct -> resize -> clip -> normalize)
//! and are all deterministic. Images are single-channel `Array2<f32>` in
//! (row, col) layout; intermediate arithmetic is f64.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Floor applied to intensities and to the illumination function so the
/// pixelwise division is defined everywhere.
pub const ILLUMINATION_EPS: f64 = 1e-6;

/// Default smoothing scale in pixels.
pub const DEFAULT_FILTER_SIZE: usize = 320;

/// Default intensity cut-off before normalization.
pub const DEFAULT_CUTOFF: f32 = 10_000.0;

/// Default resize target (width, height) = 640 x 512, stored as (rows, cols).
pub const DEFAULT_TARGET: (usize, usize) = (512, 640);

/// A fully pre-processed image plus the provenance of the steps applied.
#[derive(Debug, Clone)]
pub struct CorrectedImage {
    pub pixels: Array2<f32>,
    pub source_id: String,
    pub steps: Vec<String>,
}

/// Parameters for the pre-processing chain.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PreprocessParams {
    pub filter_size: usize,
    /// Resize target as (rows, cols).
    pub target_rows: usize,
    pub target_cols: usize,
    pub cutoff: f32,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        Self {
            filter_size: DEFAULT_FILTER_SIZE,
            target_rows: DEFAULT_TARGET.0,
            target_cols: DEFAULT_TARGET.1,
            cutoff: DEFAULT_CUTOFF,
        }
    }
}

/// Half-sample reflection of an out-of-range index into `[0, n)`.
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    debug_assert!(n > 0);
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Normalized Gaussian taps for `sigma`, radius `ceil(3 sigma)`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut taps = Vec::with_capacity(2 * radius + 1);
    let mut sum = 0.0;
    for offset in -(radius as isize)..=(radius as isize) {
        let x = offset as f64;
        let w = (-0.5 * (x / sigma) * (x / sigma)).exp();
        taps.push(w);
        sum += w;
    }
    for w in &mut taps {
        *w /= sum;
    }
    taps
}

/// Separable Gaussian smoothing with reflective boundaries.
///
/// `sigma = filter_size / 6` so the kernel support matches the stated
/// filter scale.
pub fn gaussian_smooth(image: &Array2<f32>, filter_size: usize) -> Result<Array2<f32>> {
    if filter_size == 0 {
        return Err(Error::Parameter("filter_size must be >= 1".into()));
    }
    let (rows, cols) = image.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::Shape("cannot smooth an empty image".into()));
    }
    let sigma = filter_size as f64 / 6.0;
    let taps = gaussian_kernel(sigma);
    let radius = taps.len() / 2;

    // Rows pass.
    let mut horizontal = Array2::<f64>::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for (k, w) in taps.iter().enumerate() {
                let src = reflect(c as isize + k as isize - radius as isize, cols);
                acc += w * image[(r, src)] as f64;
            }
            horizontal[(r, c)] = acc;
        }
    }
    // Columns pass.
    let mut out = Array2::<f32>::zeros((rows, cols));
    for c in 0..cols {
        for r in 0..rows {
            let mut acc = 0.0;
            for (k, w) in taps.iter().enumerate() {
                let src = reflect(r as isize + k as isize - radius as isize, rows);
                acc += w * horizontal[(src, c)];
            }
            out[(r, c)] = acc as f32;
        }
    }
    Ok(out)
}

/// Divide the image by its own smoothed illumination function.
///
/// Intensities are floored at [`ILLUMINATION_EPS`] before smoothing, and the
/// illumination function is floored again before the division. Scale
/// invariant: `correct(a * x) == correct(x)` for any gain `a > 0`.
pub fn illumination_correct(image: &Array2<f32>, filter_size: usize) -> Result<Array2<f32>> {
    let floored = image.mapv(|p| (p as f64).max(ILLUMINATION_EPS) as f32);
    let illumination = gaussian_smooth(&floored, filter_size)?;
    let mut out = Array2::<f32>::zeros(image.dim());
    ndarray::Zip::from(&mut out)
        .and(&floored)
        .and(&illumination)
        .for_each(|o, &p, &f| {
            *o = (p as f64 / (f as f64).max(ILLUMINATION_EPS)) as f32;
        });
    Ok(out)
}

/// Catmull-Rom cubic kernel (a = -0.5).
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

fn resample_axis(length_in: usize, length_out: usize) -> Vec<(isize, [f64; 4])> {
    let scale = length_in as f64 / length_out as f64;
    (0..length_out)
        .map(|t| {
            let src = (t as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let weights = [
                cubic(frac + 1.0),
                cubic(frac),
                cubic(frac - 1.0),
                cubic(frac - 2.0),
            ];
            (base as isize - 1, weights)
        })
        .collect()
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Bicubic resize to `(rows, cols)` with edge clamping.
pub fn resize_bicubic(image: &Array2<f32>, rows: usize, cols: usize) -> Result<Array2<f32>> {
    let (in_rows, in_cols) = image.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::Parameter("resize target must be non-empty".into()));
    }
    if in_rows < 4 || in_cols < 4 {
        return Err(Error::Shape(format!(
            "bicubic resize needs an input of at least 4x4, got {}x{}",
            in_rows, in_cols
        )));
    }

    let col_taps = resample_axis(in_cols, cols);
    let row_taps = resample_axis(in_rows, rows);

    // Columns pass.
    let mut horizontal = Array2::<f64>::zeros((in_rows, cols));
    for r in 0..in_rows {
        for (c, (base, weights)) in col_taps.iter().enumerate() {
            let mut acc = 0.0;
            for (k, w) in weights.iter().enumerate() {
                acc += w * image[(r, clamp_index(base + k as isize, in_cols))] as f64;
            }
            horizontal[(r, c)] = acc;
        }
    }
    // Rows pass.
    let mut out = Array2::<f32>::zeros((rows, cols));
    for (r, (base, weights)) in row_taps.iter().enumerate() {
        for c in 0..cols {
            let mut acc = 0.0;
            for (k, w) in weights.iter().enumerate() {
                acc += w * horizontal[(clamp_index(base + k as isize, in_rows), c)];
            }
            out[(r, c)] = acc as f32;
        }
    }
    Ok(out)
}

/// Clip intensities at `cutoff`, then shift/scale to mean 0, std 1.
///
/// A zero-variance result is refused: a constant field is a data-quality
/// failure worth surfacing, not something to silently zero out.
pub fn clip_normalize(image: &Array2<f32>, cutoff: f32) -> Result<Array2<f32>> {
    if image.is_empty() {
        return Err(Error::Shape("cannot normalize an empty image".into()));
    }
    let clipped = image.mapv(|p| p.min(cutoff));
    let n = clipped.len() as f64;
    let mean = clipped.iter().map(|&p| p as f64).sum::<f64>() / n;
    let var = clipped
        .iter()
        .map(|&p| {
            let d = p as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    if var <= 0.0 {
        return Err(Error::Degenerate(
            "image has zero variance after clipping".into(),
        ));
    }
    let std = var.sqrt();
    Ok(clipped.mapv(|p| ((p as f64 - mean) / std) as f32))
}

/// Full chain: correct -> resize -> clip -> normalize.
pub fn preprocess_image(
    image: &Array2<f32>,
    params: &PreprocessParams,
    source_id: &str,
) -> Result<CorrectedImage> {
    let corrected = illumination_correct(image, params.filter_size)?;
    let resized = resize_bicubic(&corrected, params.target_rows, params.target_cols)?;
    let normalized = clip_normalize(&resized, params.cutoff)?;
    Ok(CorrectedImage {
        pixels: normalized,
        source_id: source_id.to_string(),
        steps: vec![
            format!("illumination_correct(filter_size={})", params.filter_size),
            format!("resize_bicubic({}x{})", params.target_rows, params.target_cols),
            format!("clip(cutoff={})", params.cutoff),
            "normalize(mean=0,std=1)".to_string(),
        ],
    })
}
