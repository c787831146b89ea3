//! Typical variation normalization: a whitening transform fit on vehicle
//! controls, applied to every field embedding, then plate-mean /
//! treatment-median aggregation into one profile per treatment.

use std::collections::BTreeSet;
use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;

use crate::embedding::EmbeddingRecord;
use crate::error::{Error, Result};

pub const DEFAULT_EIGEN_FLOOR: f64 = 1e-6;

/// Centering + linear map learned from control embeddings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TvnTransform {
    pub mean: Vec<f64>,
    /// Row-major square matrix, dimension = embedding dimension.
    pub matrix: Vec<Vec<f64>>,
    pub eps: f64,
    /// True = scale by inverse sqrt eigenvalues; false = rotate only.
    pub whiten: bool,
}

impl TvnTransform {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Fit the control mean and the (floored) eigendecomposition of the control
/// covariance. `whiten` false keeps the pure rotation.
pub fn fit_tvn(controls: &[Vec<f64>], eps: f64, whiten: bool) -> Result<TvnTransform> {
    if controls.len() < 2 {
        return Err(Error::Structure(format!(
            "TVN fit needs at least 2 control embeddings, got {}",
            controls.len()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Parameter("eigenvalue floor must be positive".into()));
    }
    let dim = controls[0].len();
    if dim == 0 || controls.iter().any(|c| c.len() != dim) {
        return Err(Error::Shape("control embeddings disagree in dimension".into()));
    }
    let n = controls.len();
    let mut mean = vec![0.0f64; dim];
    for c in controls {
        for (m, x) in mean.iter_mut().zip(c) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, dim, |i, j| controls[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eigen = cov.symmetric_eigen();
    // Rows of W are eigenvectors, scaled when whitening.
    let mut matrix = vec![vec![0.0f64; dim]; dim];
    for k in 0..dim {
        let scale = if whiten {
            1.0 / eigen.eigenvalues[k].max(eps).sqrt()
        } else {
            1.0
        };
        for j in 0..dim {
            matrix[k][j] = eigen.eigenvectors[(j, k)] * scale;
        }
    }
    Ok(TvnTransform { mean, matrix, eps, whiten })
}

/// W (x − μ).
pub fn apply_tvn(transform: &TvnTransform, x: &[f64]) -> Result<Vec<f64>> {
    let dim = transform.dim();
    if x.len() != dim {
        return Err(Error::Shape(format!(
            "embedding dimension {} does not match transform dimension {}",
            x.len(),
            dim
        )));
    }
    let centered: Vec<f64> = x.iter().zip(&transform.mean).map(|(a, m)| a - m).collect();
    Ok(transform
        .matrix
        .iter()
        .map(|row| row.iter().zip(&centered).map(|(w, c)| w * c).sum())
        .collect())
}

pub fn write_tvn(path: &Path, transform: &TvnTransform) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(file, transform)?;
    Ok(())
}

pub fn read_tvn(path: &Path) -> Result<TvnTransform> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let transform: TvnTransform = serde_json::from_reader(file)?;
    if transform.matrix.len() != transform.dim()
        || transform.matrix.iter().any(|r| r.len() != transform.dim())
    {
        return Err(Error::Structure("TVN matrix is not square".into()));
    }
    Ok(transform)
}

/// One treatment's aggregated, post-TVN profile.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TreatmentProfile {
    pub treatment: String,
    pub compound: String,
    pub moa: String,
    pub batches: BTreeSet<String>,
    pub vector: Vec<f64>,
}

fn elementwise_median64(rows: &[Vec<f64>]) -> Vec<f64> {
    let dim = rows[0].len();
    let n = rows.len();
    let mut out = Vec::with_capacity(dim);
    let mut column = vec![0.0f64; n];
    for d in 0..dim {
        for (slot, r) in column.iter_mut().zip(rows) {
            *slot = r[d];
        }
        column.sort_by(|a, b| a.total_cmp(b));
        let mid = n / 2;
        out.push(if n % 2 == 1 {
            column[mid]
        } else {
            0.5 * (column[mid - 1] + column[mid])
        });
    }
    out
}

/// Mean per (treatment, plate), then elementwise median across plates, with
/// the contributing batch set recorded. `vectors` must parallel `rows` and
/// carries the post-TVN field embeddings.
pub fn aggregate_profiles(
    rows: &[EmbeddingRecord],
    vectors: &[Vec<f64>],
) -> Result<Vec<TreatmentProfile>> {
    if rows.is_empty() {
        return Err(Error::Structure("no field embeddings to aggregate".into()));
    }
    if rows.len() != vectors.len() {
        return Err(Error::Shape(format!(
            "{} metadata rows but {} vectors",
            rows.len(),
            vectors.len()
        )));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape("field embeddings disagree in dimension".into()));
    }
    struct PlateAccum {
        sum: Vec<f64>,
        count: usize,
    }
    let mut per_plate: BTreeMap<(String, String), PlateAccum> = BTreeMap::new();
    let mut labels: BTreeMap<String, (String, String)> = BTreeMap::new();
    let mut batches: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (row, vector) in rows.iter().zip(vectors) {
        let key = (row.treatment.clone(), row.plate.clone());
        let accum = per_plate
            .entry(key)
            .or_insert_with(|| PlateAccum { sum: vec![0.0; dim], count: 0 });
        for (s, v) in accum.sum.iter_mut().zip(vector) {
            *s += v;
        }
        accum.count += 1;
        let label = labels
            .entry(row.treatment.clone())
            .or_insert_with(|| (row.compound.clone(), row.moa.clone()));
        if label.0 != row.compound || label.1 != row.moa {
            return Err(Error::Structure(format!(
                "treatment '{}' carries conflicting compound or moa labels",
                row.treatment
            )));
        }
        batches.entry(row.treatment.clone()).or_default().insert(row.batch.clone());
    }
    let mut plate_means: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for ((treatment, _plate), accum) in per_plate {
        let mean: Vec<f64> =
            accum.sum.iter().map(|s| s / accum.count as f64).collect();
        plate_means.entry(treatment).or_default().push(mean);
    }
    let mut profiles = Vec::with_capacity(plate_means.len());
    for (treatment, means) in plate_means {
        let (compound, moa) = labels[&treatment].clone();
        profiles.push(TreatmentProfile {
            vector: elementwise_median64(&means),
            batches: batches[&treatment].clone(),
            treatment,
            compound,
            moa,
        });
    }
    Ok(profiles)
}

/// TVN-transform every row and aggregate; the usual pipeline step between
/// channel fusion and evaluation.
pub fn normalize_and_aggregate(
    rows: &[EmbeddingRecord],
    transform: &TvnTransform,
) -> Result<Vec<TreatmentProfile>> {
    let vectors = rows
        .iter()
        .map(|r| apply_tvn(transform, &to_f64(&r.vector)))
        .collect::<Result<Vec<_>>>()?;
    aggregate_profiles(rows, &vectors)
}

/// Per-image control vectors (the TVN fit set) from fused embedding rows.
pub fn control_vectors(rows: &[EmbeddingRecord]) -> Vec<Vec<f64>> {
    rows.iter()
        .filter(|r| r.moa.is_empty())
        .map(|r| to_f64(&r.vector))
        .collect()
}

pub fn write_profiles(path: &Path, profiles: &[TreatmentProfile]) -> Result<()> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "treatment\tcompound\tmoa\tbatches\tvector")?;
    for p in profiles {
        let batches: Vec<&str> = p.batches.iter().map(|s| s.as_str()).collect();
        let vector: Vec<String> = p.vector.iter().map(|v| format!("{:e}", v)).collect();
        writeln!(
            file,
            "{}\t{}\t{}\t{}\t{}",
            p.treatment,
            p.compound,
            p.moa,
            batches.join(";"),
            vector.join(",")
        )?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_profiles(path: &Path) -> Result<Vec<TreatmentProfile>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("treatment\tcompound\tmoa\tbatches\tvector") => {}
        _ => return Err(Error::Structure("profile table header mismatch".into())),
    }
    let mut profiles = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 5 {
            return Err(Error::Structure(format!(
                "profile row {} has {} columns, expected 5",
                lineno + 2,
                parts.len()
            )));
        }
        let vector = parts[4]
            .split(',')
            .map(|p| {
                p.parse::<f64>().map_err(|_| {
                    Error::Structure(format!("bad number '{}' in profile row {}", p, lineno + 2))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        profiles.push(TreatmentProfile {
            treatment: parts[0].to_string(),
            compound: parts[1].to_string(),
            moa: parts[2].to_string(),
            batches: parts[3]
                .split(';')
                .filter(|s| !s.is_empty())
                .map(|s| s.to_string())
                .collect(),
            vector,
        });
    }
    Ok(profiles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn gaussian_controls(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = crate::seeding::derive_rng(seed, "tvn-test");
        let mut draw = move || {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        (0..n).map(|_| (0..dim).map(|_| draw()).collect()).collect()
    }

    fn sample_covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
        let n = rows.len();
        let dim = rows[0].len();
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x / n as f64;
            }
        }
        let centered = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);
        centered.transpose() * &centered / (n as f64 - 1.0)
    }

    #[test]
    fn whitening_makes_gaussian_controls_white() {
        let controls = gaussian_controls(200, 16, 11);
        let t = fit_tvn(&controls, DEFAULT_EIGEN_FLOOR, true).unwrap();
        let transformed: Vec<Vec<f64>> =
            controls.iter().map(|c| apply_tvn(&t, c).unwrap()).collect();
        let cov = sample_covariance(&transformed);
        for i in 0..16 {
            for j in 0..16 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (cov[(i, j)] - want).abs() < 1e-6,
                    "cov[{},{}] = {}",
                    i,
                    j,
                    cov[(i, j)]
                );
            }
        }
    }

    #[test]
    fn transformed_control_mean_is_zero() {
        let controls = gaussian_controls(64, 8, 5);
        let t = fit_tvn(&controls, DEFAULT_EIGEN_FLOOR, true).unwrap();
        let dim = 8;
        let mut mean = vec![0.0f64; dim];
        for c in &controls {
            for (m, y) in mean.iter_mut().zip(apply_tvn(&t, c).unwrap()) {
                *m += y / controls.len() as f64;
            }
        }
        for m in mean {
            assert!(m.abs() < 1e-8, "residual mean {}", m);
        }
    }

    #[test]
    fn zero_variance_coordinate_is_floored_not_fatal() {
        let mut controls = gaussian_controls(40, 4, 2);
        for c in &mut controls {
            c[3] = 7.5;
        }
        let t = fit_tvn(&controls, DEFAULT_EIGEN_FLOOR, true).unwrap();
        for c in &controls {
            let y = apply_tvn(&t, c).unwrap();
            assert!(y.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn mean_input_maps_to_origin() {
        let controls = gaussian_controls(30, 5, 9);
        let t = fit_tvn(&controls, DEFAULT_EIGEN_FLOOR, true).unwrap();
        let y = apply_tvn(&t, &t.mean.clone()).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn transform_is_affine() {
        let controls = gaussian_controls(30, 6, 13);
        let t = fit_tvn(&controls, DEFAULT_EIGEN_FLOOR, true).unwrap();
        let x = &controls[3];
        let y = &controls[17];
        let lhs: Vec<f64> = apply_tvn(&t, x)
            .unwrap()
            .iter()
            .zip(apply_tvn(&t, y).unwrap())
            .map(|(a, b)| a - b)
            .collect();
        let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        let rhs: Vec<f64> = t
            .matrix
            .iter()
            .map(|row| row.iter().zip(&diff).map(|(w, d)| w * d).sum())
            .collect();
        for (a, b) in lhs.iter().zip(rhs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rotate_only_matrix_is_orthogonal() {
        let controls = gaussian_controls(50, 6, 21);
        let t = fit_tvn(&controls, DEFAULT_EIGEN_FLOOR, false).unwrap();
        let w = DMatrix::from_fn(6, 6, |i, j| t.matrix[i][j]);
        let gram = &w * w.transpose();
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn too_few_controls_is_structural() {
        assert!(matches!(
            fit_tvn(&[vec![1.0, 2.0]], DEFAULT_EIGEN_FLOOR, true),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn apply_rejects_dimension_mismatch() {
        let controls = gaussian_controls(10, 3, 1);
        let t = fit_tvn(&controls, DEFAULT_EIGEN_FLOOR, true).unwrap();
        assert!(matches!(apply_tvn(&t, &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn tvn_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let controls = gaussian_controls(20, 4, 3);
        let t = fit_tvn(&controls, DEFAULT_EIGEN_FLOOR, true).unwrap();
        let path = dir.path().join("tvn.json");
        write_tvn(&path, &t).unwrap();
        assert_eq!(read_tvn(&path).unwrap(), t);
    }

    fn row(treatment: &str, plate: &str, batch: &str, moa: &str) -> EmbeddingRecord {
        EmbeddingRecord {
            image_id: format!("{}-{}-{}", treatment, plate, rand::random::<u32>()),
            channel: "concat".into(),
            compound: treatment.split('@').next().unwrap().to_string(),
            concentration: 1.0,
            treatment: treatment.into(),
            moa: moa.into(),
            batch: batch.into(),
            plate: plate.into(),
            vector: Vec::new(),
        }
    }

    #[test]
    fn single_plate_mean() {
        let rows = vec![
            row("a@1", "plate-0", "batch-0", "m0"),
            row("a@1", "plate-0", "batch-0", "m0"),
        ];
        let vectors = vec![vec![1.0, 1.0], vec![3.0, 3.0]];
        let profiles = aggregate_profiles(&rows, &vectors).unwrap();
        assert_eq!(profiles.len(), 1);
        assert_eq!(profiles[0].vector, vec![2.0, 2.0]);
        assert_eq!(profiles[0].compound, "a");
        assert_eq!(
            profiles[0].batches.iter().collect::<Vec<_>>(),
            vec!["batch-0"]
        );
    }

    #[test]
    fn median_across_plates() {
        let rows = vec![
            row("a@1", "plate-A", "batch-0", "m0"),
            row("a@1", "plate-B", "batch-1", "m0"),
        ];
        let vectors = vec![vec![0.0, 0.0], vec![2.0, 2.0]];
        let profiles = aggregate_profiles(&rows, &vectors).unwrap();
        assert_eq!(profiles[0].vector, vec![1.0, 1.0]);
        assert_eq!(profiles[0].batches.len(), 2);
    }

    #[test]
    fn screen_shaped_input_yields_one_profile_per_treatment() {
        // 38 compounds: 27 at three concentrations, 11 at two = 103.
        let mut rows = Vec::new();
        let mut vectors = Vec::new();
        let mut expected = 0usize;
        for k in 0..38 {
            let doses = if k < 27 { 3 } else { 2 };
            for d in 0..doses {
                expected += 1;
                for f in 0..2 {
                    rows.push(row(
                        &format!("c{:02}@{}", k, d),
                        &format!("plate-{}", f),
                        &format!("batch-{}", f),
                        &format!("m{}", k % 12),
                    ));
                    vectors.push(vec![k as f64, d as f64]);
                }
            }
        }
        let profiles = aggregate_profiles(&rows, &vectors).unwrap();
        assert_eq!(profiles.len(), 103);
        assert_eq!(expected, 103);
    }

    #[test]
    fn empty_input_is_structural() {
        assert!(matches!(
            aggregate_profiles(&[], &[]),
            Err(Error::Structure(_))
        ));
    }

    proptest! {
        #[test]
        fn aggregation_ignores_row_order(perm_seed in 0u64..1000) {
            let rows = vec![
                row("a@1", "plate-A", "batch-0", "m0"),
                row("a@1", "plate-A", "batch-0", "m0"),
                row("a@1", "plate-B", "batch-1", "m0"),
                row("b@1", "plate-A", "batch-0", "m1"),
            ];
            let vectors = vec![
                vec![1.0, 0.0],
                vec![3.0, 2.0],
                vec![5.0, 5.0],
                vec![-1.0, 4.0],
            ];
            let baseline = aggregate_profiles(&rows, &vectors).unwrap();
            let mut order: Vec<usize> = (0..rows.len()).collect();
            use rand::seq::SliceRandom;
            let mut rng = crate::seeding::derive_rng(perm_seed, "perm");
            order.shuffle(&mut rng);
            let rows2: Vec<EmbeddingRecord> = order.iter().map(|&i| rows[i].clone()).collect();
            let vectors2: Vec<Vec<f64>> = order.iter().map(|&i| vectors[i].clone()).collect();
            let shuffled = aggregate_profiles(&rows2, &vectors2).unwrap();
            prop_assert_eq!(baseline, shuffled);
        }

        #[test]
        fn aggregation_commutes_with_coordinate_permutation(swap in 0usize..3) {
            let rows = vec![
                row("a@1", "plate-A", "batch-0", "m0"),
                row("a@1", "plate-B", "batch-1", "m0"),
                row("a@1", "plate-C", "batch-2", "m0"),
            ];
            let vectors = vec![
                vec![1.0, 2.0, 3.0],
                vec![4.0, 0.0, -1.0],
                vec![2.0, 2.0, 2.0],
            ];
            let baseline = aggregate_profiles(&rows, &vectors).unwrap();
            let permute = |v: &[f64]| {
                let mut p = v.to_vec();
                p.swap(swap, (swap + 1) % 3);
                p
            };
            let permuted_inputs: Vec<Vec<f64>> = vectors.iter().map(|v| permute(v)).collect();
            let permuted = aggregate_profiles(&rows, &permuted_inputs).unwrap();
            prop_assert_eq!(permute(&baseline[0].vector), permuted[0].vector.clone());
        }
    }

    #[test]
    fn profile_table_roundtrip() {
        let profiles = vec![TreatmentProfile {
            treatment: "a@1".into(),
            compound: "a".into(),
            moa: "m0".into(),
            batches: ["batch-0", "batch-2"].iter().map(|s| s.to_string()).collect(),
            vector: vec![1.5, -2.25, 1e-9],
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("profiles.tsv");
        write_profiles(&path, &profiles).unwrap();
        assert_eq!(read_profiles(&path).unwrap(), profiles);
    }
}
