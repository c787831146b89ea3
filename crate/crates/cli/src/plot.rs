//! Deterministic 2-D view of treatment profiles: the first two principal
//! components with a fixed sign convention, drawn as a scatter colored by
//! mechanism label.

use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use wsdino_core::error::{Error, Result};
use wsdino_core::normalization::TreatmentProfile;

pub struct PlotPoint {
    pub treatment: String,
    pub compound: String,
    pub moa: String,
    pub x: f64,
    pub y: f64,
}

/// Project onto the top two principal axes. Axes are ordered by singular
/// value and sign-fixed so the largest-magnitude loading is positive, which
/// pins the projection across runs.
pub fn project(profiles: &[TreatmentProfile]) -> Result<Vec<PlotPoint>> {
    if profiles.len() < 2 {
        return Err(Error::Structure("projection needs at least 2 profiles".into()));
    }
    let dim = profiles[0].vector.len();
    if dim < 2 {
        return Err(Error::Structure("projection needs at least 2 coordinates".into()));
    }
    if profiles.iter().any(|p| p.vector.len() != dim) {
        return Err(Error::Shape("profiles disagree in dimension".into()));
    }
    let n = profiles.len();
    let mut mean = vec![0.0f64; dim];
    for p in profiles {
        for (m, v) in mean.iter_mut().zip(&p.vector) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, dim, |i, j| profiles[i].vector[j] - mean[j]);
    let svd = centered.clone().svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numerical("singular value decomposition failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut axes = Vec::with_capacity(2);
    for &k in order.iter().take(2) {
        let mut axis: Vec<f64> = v_t.row(k).iter().copied().collect();
        let lead = (0..dim)
            .max_by(|&a, &b| axis[a].abs().total_cmp(&axis[b].abs()))
            .unwrap_or(0);
        if axis[lead] < 0.0 {
            for a in &mut axis {
                *a = -*a;
            }
        }
        axes.push(axis);
    }
    Ok(profiles
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let coord = |axis: &[f64]| {
                axis.iter()
                    .enumerate()
                    .map(|(j, a)| a * centered[(i, j)])
                    .sum::<f64>()
            };
            PlotPoint {
                treatment: p.treatment.clone(),
                compound: p.compound.clone(),
                moa: p.moa.clone(),
                x: coord(&axes[0]),
                y: coord(&axes[1]),
            }
        })
        .collect())
}

pub fn write_coords(path: &Path, points: &[PlotPoint]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "treatment\tcompound\tmoa\tx\ty")?;
    for p in points {
        writeln!(
            file,
            "{}\t{}\t{}\t{:.6}\t{:.6}",
            p.treatment, p.compound, p.moa, p.x, p.y
        )?;
    }
    file.flush()?;
    Ok(())
}

/// Distinguishable fill colors, reused cyclically past twelve mechanisms.
const PALETTE: [[u8; 3]; 12] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
    [0, 0, 0],
    [255, 0, 255],
];

const SIDE: u32 = 800;
const MARGIN: u32 = 60;
const RADIUS: i64 = 5;

pub fn render_png(path: &Path, points: &[PlotPoint]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Structure("nothing to draw".into()));
    }
    let mut moas: Vec<&str> = points.iter().map(|p| p.moa.as_str()).collect();
    moas.sort_unstable();
    moas.dedup();

    let bound = |f: fn(&PlotPoint) -> f64| {
        let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        let pad = if hi > lo { 0.05 * (hi - lo) } else { 1.0 };
        (lo - pad, hi + pad)
    };
    let (x_lo, x_hi) = bound(|p| p.x);
    let (y_lo, y_hi) = bound(|p| p.y);

    let mut canvas = image::RgbImage::from_pixel(SIDE, SIDE, image::Rgb([255, 255, 255]));
    let inner = (SIDE - 2 * MARGIN) as f64;
    for b in MARGIN..SIDE - MARGIN {
        for (x, y) in [
            (b, MARGIN),
            (b, SIDE - MARGIN),
            (MARGIN, b),
            (SIDE - MARGIN, b),
        ] {
            canvas.put_pixel(x, y, image::Rgb([120, 120, 120]));
        }
    }
    for p in points {
        let px = MARGIN as f64 + inner * (p.x - x_lo) / (x_hi - x_lo);
        // Larger y plots higher on screen.
        let py = MARGIN as f64 + inner * (y_hi - p.y) / (y_hi - y_lo);
        let idx = moas.iter().position(|m| *m == p.moa).unwrap_or(0);
        let color = PALETTE[idx % PALETTE.len()];
        let (cx, cy) = (px.round() as i64, py.round() as i64);
        for dy in -RADIUS..=RADIUS {
            for dx in -RADIUS..=RADIUS {
                if dx * dx + dy * dy > RADIUS * RADIUS {
                    continue;
                }
                let (x, y) = (cx + dx, cy + dy);
                if x >= 0 && y >= 0 && (x as u32) < SIDE && (y as u32) < SIDE {
                    canvas.put_pixel(x as u32, y as u32, image::Rgb(color));
                }
            }
        }
    }
    canvas
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(Error::Image)?;
    Ok(())
}
