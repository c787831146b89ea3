//! Checks that the synthetic dataset carries recoverable mechanism signal:
//! hand-rolled classical features (component count, size, elongation,
//! texture, intensity) aggregated per treatment must recover MOA by
//! nearest-neighbor lookup with same-compound candidates excluded.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use wsdino_core::imgio;
use wsdino_core::manifest::ImageRecord;
use wsdino_core::synthgen::{generate_dataset, SyntheticSpec};

const THRESHOLD: f64 = 400.0;
const MIN_AREA: usize = 5;

/// Connected components above THRESHOLD, 4-connectivity.
fn components(img: &Array2<u16>) -> Vec<Vec<(usize, usize)>> {
    let (rows, cols) = img.dim();
    let mut seen = vec![false; rows * cols];
    let mut out = Vec::new();
    for start_r in 0..rows {
        for start_c in 0..cols {
            if seen[start_r * cols + start_c] || (img[(start_r, start_c)] as f64) < THRESHOLD {
                continue;
            }
            let mut stack = vec![(start_r, start_c)];
            seen[start_r * cols + start_c] = true;
            let mut comp = Vec::new();
            while let Some((r, c)) = stack.pop() {
                comp.push((r, c));
                let mut push = |nr: usize, nc: usize| {
                    if !seen[nr * cols + nc] && (img[(nr, nc)] as f64) >= THRESHOLD {
                        seen[nr * cols + nc] = true;
                        stack.push((nr, nc));
                    }
                };
                if r > 0 {
                    push(r - 1, c);
                }
                if r + 1 < rows {
                    push(r + 1, c);
                }
                if c > 0 {
                    push(r, c - 1);
                }
                if c + 1 < cols {
                    push(r, c + 1);
                }
            }
            if comp.len() >= MIN_AREA {
                out.push(comp);
            }
        }
    }
    out
}

/// Elongation proxy from second moments: 1 - sqrt(lambda_min / lambda_max).
fn elongation(comp: &[(usize, usize)]) -> f64 {
    let n = comp.len() as f64;
    let (mr, mc) = comp.iter().fold((0.0, 0.0), |(ar, ac), &(r, c)| {
        (ar + r as f64 / n, ac + c as f64 / n)
    });
    let (mut srr, mut scc, mut src) = (0.0, 0.0, 0.0);
    for &(r, c) in comp {
        let dr = r as f64 - mr;
        let dc = c as f64 - mc;
        srr += dr * dr;
        scc += dc * dc;
        src += dr * dc;
    }
    srr /= n;
    scc /= n;
    src /= n;
    let tr = srr + scc;
    let det = srr * scc - src * src;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let l_max = (tr / 2.0 + disc).max(1e-9);
    let l_min = (tr / 2.0 - disc).max(0.0);
    1.0 - (l_min / l_max).sqrt()
}

fn image_features(img: &Array2<u16>) -> [f64; 5] {
    let comps = components(img);
    let n = comps.len().max(1) as f64;
    let mean_area = comps.iter().map(|c| c.len() as f64).sum::<f64>() / n;
    let mean_elong = comps.iter().map(|c| elongation(c)).sum::<f64>() / n;
    let fg: Vec<f64> = comps
        .iter()
        .flatten()
        .map(|&(r, c)| img[(r, c)] as f64)
        .collect();
    let (fg_mean, fg_cv) = if fg.is_empty() {
        (0.0, 0.0)
    } else {
        let m = fg.iter().sum::<f64>() / fg.len() as f64;
        let v = fg.iter().map(|x| (x - m).powi(2)).sum::<f64>() / fg.len() as f64;
        (m, v.sqrt() / m)
    };
    [comps.len() as f64, mean_area, mean_elong, fg_cv, fg_mean]
}

fn zscore_columns(rows: &mut [[f64; 5]]) {
    for j in 0..5 {
        let n = rows.len() as f64;
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-9);
        for r in rows.iter_mut() {
            r[j] = (r[j] - mean) / std;
        }
    }
}

fn cosine_distance(a: &[f64; 5], b: &[f64; 5]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb).max(1e-12)
}

#[test]
fn classical_features_recover_moa_without_batch_effects() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SyntheticSpec::toy();
    spec.fields_per_treatment = 4;
    spec.channels = 1;
    spec.batch_effect_strength = 0.0;
    let records: Vec<ImageRecord> = generate_dataset(&spec, dir.path()).unwrap();

    // Per-treatment mean feature vector.
    let mut groups: BTreeMap<String, (Vec<[f64; 5]>, String, String)> = BTreeMap::new();
    for rec in &records {
        let img = imgio::read_png_u16(Path::new(&rec.path)).unwrap();
        let entry = groups
            .entry(rec.treatment.clone())
            .or_insert_with(|| (Vec::new(), rec.compound.clone(), rec.moa.clone()));
        entry.0.push(image_features(&img));
    }
    let mut profiles: Vec<[f64; 5]> = Vec::new();
    let mut compounds = Vec::new();
    let mut moas = Vec::new();
    for (_, (feats, compound, moa)) in &groups {
        let mut mean = [0.0; 5];
        for f in feats {
            for j in 0..5 {
                mean[j] += f[j] / feats.len() as f64;
            }
        }
        profiles.push(mean);
        compounds.push(compound.clone());
        moas.push(moa.clone());
    }
    zscore_columns(&mut profiles);

    // Brute-force 1-NN in cosine distance, same-compound candidates excluded.
    let mut hits = 0usize;
    for i in 0..profiles.len() {
        let mut best: Option<(f64, usize)> = None;
        for j in 0..profiles.len() {
            if compounds[j] == compounds[i] {
                continue;
            }
            let d = cosine_distance(&profiles[i], &profiles[j]);
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        if moas[best.unwrap().1] == moas[i] {
            hits += 1;
        }
    }
    let nsc = hits as f64 / profiles.len() as f64;
    assert!(
        nsc >= 0.8,
        "classical baseline should separate mechanisms, got {:.3} ({} / {})",
        nsc,
        hits,
        profiles.len()
    );
}
