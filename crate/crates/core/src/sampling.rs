//! Weak-label grouping, even group sampling, the cross-image pair
//! constraint, and multi-crop view construction.
//!
//! Teacher crops always come from image i; student local crops come from a
//! second image j drawn from the same weak-label group, j != i whenever the
//! group allows it. Singleton groups (and `LabelKind::None`) fall back to
//! (i, i), which recovers plain same-image cropping.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::resize_bicubic;
use crate::manifest::ImageRecord;

/// Which manifest column defines the weak label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    /// One group per image: unsupervised fallback.
    None,
    Treatment,
    Compound,
    Moa,
}

impl std::str::FromStr for LabelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "treatment" => Ok(Self::Treatment),
            "compound" => Ok(Self::Compound),
            "moa" => Ok(Self::Moa),
            other => Err(Error::Parameter(format!(
                "unknown weak label kind '{}', expected none|treatment|compound|moa",
                other
            ))),
        }
    }
}

impl std::fmt::Display for LabelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::None => "none",
            Self::Treatment => "treatment",
            Self::Compound => "compound",
            Self::Moa => "moa",
        };
        f.write_str(s)
    }
}

/// Image ids partitioned by weak-label value.
#[derive(Debug, Clone)]
pub struct WeakLabelIndex {
    pub label_kind: LabelKind,
    pub groups: BTreeMap<String, Vec<String>>,
}

impl WeakLabelIndex {
    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_images(&self) -> usize {
        self.groups.values().map(|g| g.len()).sum()
    }
}

/// Group the manifest rows by weak label. Rows are expected to come from a
/// single channel; ids must be unique within the slice.
pub fn build_index(records: &[ImageRecord], label_kind: LabelKind) -> Result<WeakLabelIndex> {
    if records.is_empty() {
        return Err(Error::Structure("cannot index an empty manifest".into()));
    }
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for rec in records {
        let key = match label_kind {
            LabelKind::None => rec.image_id.clone(),
            LabelKind::Treatment => rec.treatment.clone(),
            LabelKind::Compound => rec.compound.clone(),
            LabelKind::Moa => rec.moa.clone(),
        };
        groups.entry(key).or_default().push(rec.image_id.clone());
    }
    Ok(WeakLabelIndex { label_kind, groups })
}

/// Per-image draw probability: 1 / (group size * number of groups), so
/// every group carries the same total mass.
pub fn sampler_weights(index: &WeakLabelIndex) -> Result<BTreeMap<String, f64>> {
    let n_groups = index.groups.len();
    let mut weights = BTreeMap::new();
    for group in index.groups.values() {
        if group.is_empty() {
            return Err(Error::Structure("weak label group is empty".into()));
        }
        let w = 1.0 / (group.len() as f64 * n_groups as f64);
        for id in group {
            weights.insert(id.clone(), w);
        }
    }
    Ok(weights)
}

/// Draw an ordered image pair from one group: i feeds the teacher's global
/// crops, j the student's local crops. Falls back to (i, i) for singleton
/// groups.
pub fn sample_pair(
    index: &WeakLabelIndex,
    group_key: &str,
    rng: &mut ChaCha8Rng,
) -> Result<(String, String)> {
    let group = index
        .groups
        .get(group_key)
        .ok_or_else(|| Error::Parameter(format!("no weak label group '{}'", group_key)))?;
    if group.is_empty() {
        return Err(Error::Structure("weak label group is empty".into()));
    }
    let i = rng.gen_range(0..group.len());
    if group.len() == 1 {
        log::warn!(
            "weak label group '{}' has a single image; pairing it with itself",
            group_key
        );
        return Ok((group[0].clone(), group[0].clone()));
    }
    let mut j = rng.gen_range(0..group.len() - 1);
    if j >= i {
        j += 1;
    }
    Ok((group[i].clone(), group[j].clone()))
}

/// Group-key sequence for one epoch of `n_draws` draws. Groups receive
/// floor(n/G) or ceil(n/G) draws each, realizing the even per-group mass of
/// `sampler_weights` exactly; the sequence order is shuffled.
pub fn epoch_group_sequence(
    index: &WeakLabelIndex,
    n_draws: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let keys: Vec<&String> = index.groups.keys().collect();
    let n_groups = keys.len();
    let base = n_draws / n_groups;
    let remainder = n_draws % n_groups;
    let mut extra: Vec<usize> = (0..n_groups).collect();
    extra.shuffle(rng);
    let mut quota = vec![base; n_groups];
    for &g in extra.iter().take(remainder) {
        quota[g] += 1;
    }
    let mut sequence = Vec::with_capacity(n_draws);
    for (g, key) in keys.iter().enumerate() {
        sequence.extend(std::iter::repeat((*key).clone()).take(quota[g]));
    }
    sequence.shuffle(rng);
    sequence
}

/// One epoch worth of ordered image pairs.
pub fn epoch_pairs(
    index: &WeakLabelIndex,
    n_draws: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(String, String)>> {
    epoch_group_sequence(index, n_draws, rng)
        .iter()
        .map(|key| sample_pair(index, key, rng))
        .collect()
}

/// Output size and area-fraction range for one crop family.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CropPlan {
    pub size: usize,
    pub scale: (f64, f64),
}

/// Full multi-crop recipe.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CropSpec {
    pub global: CropPlan,
    pub local: CropPlan,
    pub n_local: usize,
    /// Independent horizontal and vertical flip probability per crop.
    pub flip_prob: f64,
}

impl CropSpec {
    /// Full-scale recipe: 2 global 224 crops at 10-20% area, 8 local 96
    /// crops at 4-8% area.
    pub fn paper() -> Self {
        Self {
            global: CropPlan { size: 224, scale: (0.10, 0.20) },
            local: CropPlan { size: 96, scale: (0.04, 0.08) },
            n_local: 8,
            flip_prob: 0.5,
        }
    }

    /// Desk-scale recipe for 96 px synthetic fields.
    pub fn toy() -> Self {
        Self {
            global: CropPlan { size: 48, scale: (0.25, 0.45) },
            local: CropPlan { size: 24, scale: (0.05, 0.15) },
            n_local: 8,
            flip_prob: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, plan) in [("global", &self.global), ("local", &self.local)] {
            let (lo, hi) = plan.scale;
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::Parameter(format!(
                    "{} scale range ({}, {}) must satisfy 0 < lo <= hi <= 1",
                    name, lo, hi
                )));
            }
            if plan.size == 0 {
                return Err(Error::Parameter(format!("{} crop size must be > 0", name)));
            }
        }
        if self.local.scale.1 >= self.global.scale.0 {
            return Err(Error::Parameter(
                "local scale range must sit strictly below the global range".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Parameter("flip probability must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// The crops for one training example.
#[derive(Debug, Clone)]
pub struct ViewSet {
    /// Two global crops of image i; the teacher sees exactly these.
    pub globals: Vec<Array2<f32>>,
    /// n local crops of image j; the student sees globals + locals.
    pub locals: Vec<Array2<f32>>,
    pub source: (String, String),
}

impl ViewSet {
    pub fn n_teacher(&self) -> usize {
        self.globals.len()
    }

    pub fn n_student(&self) -> usize {
        self.globals.len() + self.locals.len()
    }
}

const CROP_RETRIES: usize = 10;

/// One random-resized crop: area fraction from `plan.scale`, aspect ratio
/// log-uniform in (3/4, 4/3), resized to `plan.size`, then independent
/// horizontal/vertical flips.
pub fn random_resized_crop(
    image: &Array2<f32>,
    plan: &CropPlan,
    flip_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f32>> {
    let (rows, cols) = image.dim();
    let full_area = (rows * cols) as f64;
    let (ar_lo, ar_hi) = ((3f64 / 4.0).ln(), (4f64 / 3.0).ln());
    let mut accepted = None;
    for _ in 0..CROP_RETRIES {
        let area = full_area * rng.gen_range(plan.scale.0..=plan.scale.1);
        let aspect = rng.gen_range(ar_lo..=ar_hi).exp();
        let crop_cols = (area * aspect).sqrt().round() as usize;
        let crop_rows = (area / aspect).sqrt().round() as usize;
        if crop_rows >= 4 && crop_cols >= 4 && crop_rows <= rows && crop_cols <= cols {
            accepted = Some((crop_rows, crop_cols));
            break;
        }
    }
    let (crop_rows, crop_cols) = accepted.ok_or_else(|| {
        Error::Shape(format!(
            "no feasible crop of a {}x{} image for scale range ({}, {})",
            rows, cols, plan.scale.0, plan.scale.1
        ))
    })?;
    let top = rng.gen_range(0..=rows - crop_rows);
    let left = rng.gen_range(0..=cols - crop_cols);
    let window = image
        .slice(ndarray::s![top..top + crop_rows, left..left + crop_cols])
        .to_owned();
    let mut out = resize_bicubic(&window, plan.size, plan.size)?;
    if rng.gen_range(0.0..1.0) < flip_prob {
        out.invert_axis(Axis(1));
    }
    if rng.gen_range(0.0..1.0) < flip_prob {
        out.invert_axis(Axis(0));
    }
    Ok(out)
}

/// Build the full view set for the ordered pair (i, j).
pub fn make_views(
    image_i: &Array2<f32>,
    image_j: &Array2<f32>,
    spec: &CropSpec,
    source: (String, String),
    rng: &mut ChaCha8Rng,
) -> Result<ViewSet> {
    spec.validate()?;
    let globals = (0..2)
        .map(|_| random_resized_crop(image_i, &spec.global, spec.flip_prob, rng))
        .collect::<Result<Vec<_>>>()?;
    let locals = (0..spec.n_local)
        .map(|_| random_resized_crop(image_j, &spec.local, spec.flip_prob, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(ViewSet { globals, locals, source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn record(id: &str, compound: &str, treatment: &str, moa: &str) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            path: format!("{}.png", id),
            channel: "dna".into(),
            compound: compound.into(),
            concentration: 1.0,
            treatment: treatment.into(),
            moa: moa.into(),
            batch: "batch-0".into(),
            plate: "plate-0".into(),
        }
    }

    /// 38 compounds / 103 treatments: 27 compounds with 3 concentrations
    /// plus 11 with 2, one image per treatment.
    fn benchmark_shaped_manifest() -> Vec<ImageRecord> {
        let mut records = Vec::new();
        for k in 0..38 {
            let n_conc = if k < 27 { 3 } else { 2 };
            for t in 0..n_conc {
                let compound = format!("c{:02}", k);
                let treatment = format!("{}@{}", compound, t);
                let moa = format!("moa-{:02}", k % 12);
                let id = format!("img-{}-{}", k, t);
                records.push(record(&id, &compound, &treatment, &moa));
            }
        }
        assert_eq!(records.len(), 103);
        records
    }

    #[test]
    fn label_none_gives_singleton_groups() {
        let records: Vec<_> = (0..5)
            .map(|i| record(&format!("im{}", i), "c", "c@1", "m"))
            .collect();
        let index = build_index(&records, LabelKind::None).unwrap();
        assert_eq!(index.n_groups(), 5);
        assert!(index.groups.values().all(|g| g.len() == 1));
    }

    #[test]
    fn benchmark_shaped_group_counts() {
        let records = benchmark_shaped_manifest();
        let by_treatment = build_index(&records, LabelKind::Treatment).unwrap();
        assert_eq!(by_treatment.n_groups(), 103);
        let by_compound = build_index(&records, LabelKind::Compound).unwrap();
        assert_eq!(by_compound.n_groups(), 38);
        assert_eq!(by_compound.n_images(), 103);
    }

    #[test]
    fn weights_for_equal_groups_are_uniform() {
        let records = vec![
            record("a", "c1", "t1", "m"),
            record("b", "c1", "t1", "m"),
            record("c", "c2", "t2", "m"),
            record("d", "c2", "t2", "m"),
        ];
        let index = build_index(&records, LabelKind::Compound).unwrap();
        let weights = sampler_weights(&index).unwrap();
        for w in weights.values() {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_balance_uneven_groups() {
        let records = vec![
            record("a", "c1", "t1", "m"),
            record("b", "c2", "t2", "m"),
            record("c", "c2", "t2", "m"),
            record("d", "c2", "t2", "m"),
        ];
        let index = build_index(&records, LabelKind::Compound).unwrap();
        let weights = sampler_weights(&index).unwrap();
        assert!((weights["a"] - 0.5).abs() < 1e-15);
        for id in ["b", "c", "d"] {
            assert!((weights[id] - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn pair_orderings_are_balanced_in_a_two_image_group() {
        let records = vec![record("a", "c1", "t1", "m"), record("b", "c1", "t1", "m")];
        let index = build_index(&records, LabelKind::Compound).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ab = 0usize;
        let n = 10_000;
        for _ in 0..n {
            let (i, j) = sample_pair(&index, "c1", &mut rng).unwrap();
            assert_ne!(i, j);
            if i == "a" {
                ab += 1;
            }
        }
        let freq = ab as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.05, "ordering frequency {}", freq);
    }

    #[test]
    fn singleton_group_pairs_with_itself() {
        let records = vec![record("solo", "c1", "t1", "m")];
        let index = build_index(&records, LabelKind::Compound).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (i, j) = sample_pair(&index, "c1", &mut rng).unwrap();
        assert_eq!(i, "solo");
        assert_eq!(j, "solo");
    }

    #[test]
    fn label_none_always_self_pairs() {
        let records: Vec<_> = (0..4)
            .map(|i| record(&format!("im{}", i), "c", "c@1", "m"))
            .collect();
        let index = build_index(&records, LabelKind::None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for key in index.groups.keys() {
            let (i, j) = sample_pair(&index, key, &mut rng).unwrap();
            assert_eq!(i, j);
        }
    }

    #[test]
    fn epoch_pairs_never_cross_labels_or_repeat_images() {
        let records = benchmark_shaped_manifest();
        let index = build_index(&records, LabelKind::Compound).unwrap();
        let compound_of: BTreeMap<String, String> = records
            .iter()
            .map(|r| (r.image_id.clone(), r.compound.clone()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pairs = epoch_pairs(&index, 1000, &mut rng).unwrap();
        assert_eq!(pairs.len(), 1000);
        for (i, j) in &pairs {
            assert_ne!(i, j, "same-image pair drawn from a multi-image group");
            assert_eq!(compound_of[i], compound_of[j], "cross-label pair");
        }
    }

    #[test]
    fn epoch_masses_match_even_group_targets() {
        let records = benchmark_shaped_manifest();
        let index = build_index(&records, LabelKind::Compound).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let n = 10_000usize;
        let seq = epoch_group_sequence(&index, n, &mut rng);
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for key in &seq {
            *counts.entry(key.as_str()).or_default() += 1;
        }
        let target = n as f64 / index.n_groups() as f64;
        for (key, count) in counts {
            let rel = (count as f64 - target).abs() / target;
            assert!(rel <= 0.02, "group {} mass off by {:.4}", key, rel);
        }
    }

    #[test]
    fn view_multiplicities_and_sizes() {
        let image = Array2::from_shape_fn((96, 96), |(r, c)| (r * 96 + c) as f32);
        let spec = CropSpec::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let views = make_views(&image, &image, &spec, ("i".into(), "i".into()), &mut rng).unwrap();
        assert_eq!(views.n_teacher(), 2);
        assert_eq!(views.n_student(), 2 + spec.n_local);
        for g in &views.globals {
            assert_eq!(g.dim(), (48, 48));
        }
        for l in &views.locals {
            assert_eq!(l.dim(), (24, 24));
        }
    }

    #[test]
    fn collapsed_randomness_gives_deterministic_crops() {
        let image = Array2::from_shape_fn((96, 96), |(r, c)| ((r * 7 + c * 3) % 41) as f32);
        let mut spec = CropSpec::toy();
        spec.flip_prob = 0.0;
        let mut rng_a = ChaCha8Rng::seed_from_u64(12);
        let mut rng_b = ChaCha8Rng::seed_from_u64(12);
        let va = make_views(&image, &image, &spec, ("x".into(), "x".into()), &mut rng_a).unwrap();
        let vb = make_views(&image, &image, &spec, ("x".into(), "x".into()), &mut rng_b).unwrap();
        for (a, b) in va.globals.iter().zip(vb.globals.iter()) {
            assert_eq!(a, b);
        }
        for (a, b) in va.locals.iter().zip(vb.locals.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn infeasible_crop_errors_after_retries() {
        // A 6x20 strip cannot host a square-ish crop of its full area.
        let image = Array2::from_elem((6, 20), 1.0f32);
        let plan = CropPlan { size: 4, scale: (1.0, 1.0) };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            random_resized_crop(&image, &plan, 0.0, &mut rng),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn disjoint_scale_ranges_are_enforced() {
        let mut spec = CropSpec::toy();
        spec.local.scale = (0.05, 0.30);
        assert!(matches!(spec.validate(), Err(Error::Parameter(_))));
    }

    proptest! {
        #[test]
        fn group_masses_are_equal_for_random_indices(sizes in proptest::collection::vec(1usize..6, 2..10)) {
            let mut records = Vec::new();
            for (g, n) in sizes.iter().enumerate() {
                for k in 0..*n {
                    records.push(record(
                        &format!("im-{}-{}", g, k),
                        &format!("c{}", g),
                        &format!("c{}@1", g),
                        "m",
                    ));
                }
            }
            let index = build_index(&records, LabelKind::Compound).unwrap();
            let weights = sampler_weights(&index).unwrap();
            let total: f64 = weights.values().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let expected = 1.0 / sizes.len() as f64;
            for group in index.groups.values() {
                let mass: f64 = group.iter().map(|id| weights[id]).sum();
                prop_assert!((mass - expected).abs() < 1e-12);
            }
        }

        #[test]
        fn groups_partition_the_manifest(n_images in 1usize..40, n_compounds in 1usize..8) {
            let records: Vec<_> = (0..n_images)
                .map(|i| record(
                    &format!("im{}", i),
                    &format!("c{}", i % n_compounds),
                    &format!("c{}@1", i % n_compounds),
                    "m",
                ))
                .collect();
            let index = build_index(&records, LabelKind::Compound).unwrap();
            prop_assert_eq!(index.n_images(), n_images);
            let mut seen = std::collections::BTreeSet::new();
            for group in index.groups.values() {
                for id in group {
                    prop_assert!(seen.insert(id.clone()), "image in two groups");
                }
            }
        }

        #[test]
        fn crops_always_match_requested_size(
            rows in 48usize..128,
            cols in 48usize..128,
            seed in 0u64..50,
        ) {
            let image = Array2::from_shape_fn((rows, cols), |(r, c)| (r + c) as f32);
            let plan = CropPlan { size: 24, scale: (0.05, 0.3) };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let crop = random_resized_crop(&image, &plan, 0.5, &mut rng).unwrap();
            prop_assert_eq!(crop.dim(), (24, 24));
        }
    }
}
