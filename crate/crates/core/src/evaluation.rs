//! Mechanism-of-action transfer scoring: 1-NN matching over treatment
//! profiles under cosine distance, with not-same-compound (NSC) and
//! not-same-compound-and-batch (NSCB) candidate exclusions, plus epoch
//! selection helpers.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::normalization::TreatmentProfile;

/// 1 − cos(u, v), in [0, 2].
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine distance over dims {} and {}",
            u.len(),
            v.len()
        )));
    }
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu <= 0.0 || nv <= 0.0 {
        return Err(Error::Degenerate("cosine distance of a zero vector".into()));
    }
    Ok(1.0 - dot / (nu * nv).sqrt())
}

/// How the batch constraint removes candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchExclusion {
    /// Candidates sharing the query's compound or any of its batches are
    /// removed; the candidate pool is always a subset of the NSC pool.
    Union,
    /// Only candidates sharing both the compound and a batch are removed.
    Conjunction,
}

impl std::str::FromStr for BatchExclusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "union" => Ok(Self::Union),
            "conjunction" => Ok(Self::Conjunction),
            other => Err(Error::Parameter(format!(
                "unknown batch exclusion '{}', expected union or conjunction",
                other
            ))),
        }
    }
}

impl std::fmt::Display for BatchExclusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Union => "union",
            Self::Conjunction => "conjunction",
        })
    }
}

impl Default for BatchExclusion {
    fn default() -> Self {
        Self::Union
    }
}

/// One scored query.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MatchRecord {
    pub query: String,
    pub matched: String,
    pub distance: f64,
    pub correct: bool,
}

/// One metric's outcome: accuracy over the scored queries, the matches, and
/// the treatments left out of the denominator.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MatchOutcome {
    pub accuracy: f64,
    pub matches: Vec<MatchRecord>,
    /// Treatments excluded up front (NSCB single-batch-MOA rule).
    pub excluded: Vec<String>,
    /// Treatments skipped because every candidate was removed.
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub nsc: f64,
    pub nscb: f64,
    pub nsc_matches: Vec<MatchRecord>,
    pub nscb_matches: Vec<MatchRecord>,
    pub nscb_excluded: Vec<String>,
    pub nscb_skipped: Vec<String>,
}

fn validate_profiles(profiles: &[TreatmentProfile]) -> Result<()> {
    let compounds: BTreeSet<&str> =
        profiles.iter().map(|p| p.compound.as_str()).collect();
    if compounds.len() < 2 {
        return Err(Error::Structure(format!(
            "matching needs at least 2 compounds, got {}",
            compounds.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for p in profiles {
        if !seen.insert(p.treatment.as_str()) {
            return Err(Error::Structure(format!(
                "duplicate treatment profile '{}'",
                p.treatment
            )));
        }
        if p.vector.len() != profiles[0].vector.len() {
            return Err(Error::Shape("profiles disagree in dimension".into()));
        }
    }
    Ok(())
}

fn shares_batch(a: &TreatmentProfile, b: &TreatmentProfile) -> bool {
    a.batches.intersection(&b.batches).next().is_some()
}

pub(crate) fn nsc_candidates(profiles: &[TreatmentProfile], query: usize) -> Vec<usize> {
    (0..profiles.len())
        .filter(|&j| j != query && profiles[j].compound != profiles[query].compound)
        .collect()
}

pub(crate) fn nscb_candidates(
    profiles: &[TreatmentProfile],
    query: usize,
    mode: BatchExclusion,
) -> Vec<usize> {
    (0..profiles.len())
        .filter(|&j| {
            if j == query {
                return false;
            }
            let same_compound = profiles[j].compound == profiles[query].compound;
            let same_batch = shares_batch(&profiles[j], &profiles[query]);
            match mode {
                BatchExclusion::Union => !same_compound && !same_batch,
                BatchExclusion::Conjunction => !(same_compound && same_batch),
            }
        })
        .collect()
}

/// Nearest candidate by cosine distance; ties resolve to the lowest index.
fn nearest(
    profiles: &[TreatmentProfile],
    query: usize,
    candidates: &[usize],
) -> Result<MatchRecord> {
    let mut best: Option<(usize, f64)> = None;
    for &j in candidates {
        let d = cosine_distance(&profiles[query].vector, &profiles[j].vector)?;
        best = match best {
            Some((_, bd)) if bd <= d => best,
            _ => Some((j, d)),
        };
    }
    let (j, distance) =
        best.ok_or_else(|| Error::Structure("nearest over empty candidate set".into()))?;
    Ok(MatchRecord {
        query: profiles[query].treatment.clone(),
        matched: profiles[j].treatment.clone(),
        distance,
        correct: profiles[j].moa == profiles[query].moa,
    })
}

/// Not-same-compound matching: every treatment is scored against the nearest
/// profile of a different compound.
pub fn nsc(profiles: &[TreatmentProfile]) -> Result<MatchOutcome> {
    validate_profiles(profiles)?;
    let mut matches = Vec::with_capacity(profiles.len());
    for i in 0..profiles.len() {
        let candidates = nsc_candidates(profiles, i);
        if candidates.is_empty() {
            return Err(Error::Structure(format!(
                "every candidate for '{}' shares its compound",
                profiles[i].treatment
            )));
        }
        matches.push(nearest(profiles, i, &candidates)?);
    }
    let correct = matches.iter().filter(|m| m.correct).count();
    Ok(MatchOutcome {
        accuracy: correct as f64 / matches.len() as f64,
        matches,
        excluded: Vec::new(),
        skipped: Vec::new(),
    })
}

/// Like nsc with the batch constraint added; treatments whose MOA lives in a
/// single batch are excluded from scoring, and queries whose candidate pool
/// empties out are skipped with a logged reason.
pub fn nscb(profiles: &[TreatmentProfile], mode: BatchExclusion) -> Result<MatchOutcome> {
    validate_profiles(profiles)?;
    let mut moa_batches: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for p in profiles {
        let set = moa_batches.entry(p.moa.as_str()).or_default();
        set.extend(p.batches.iter().map(|b| b.as_str()));
    }
    let mut matches = Vec::new();
    let mut excluded = Vec::new();
    let mut skipped = Vec::new();
    for i in 0..profiles.len() {
        if moa_batches[profiles[i].moa.as_str()].len() < 2 {
            excluded.push(profiles[i].treatment.clone());
            continue;
        }
        let candidates = nscb_candidates(profiles, i, mode);
        if candidates.is_empty() {
            log::warn!(
                "treatment '{}' has no candidates after batch exclusion, skipping",
                profiles[i].treatment
            );
            skipped.push(profiles[i].treatment.clone());
            continue;
        }
        matches.push(nearest(profiles, i, &candidates)?);
    }
    if matches.is_empty() {
        return Err(Error::Degenerate(
            "no treatment survives the batch exclusions".into(),
        ));
    }
    let correct = matches.iter().filter(|m| m.correct).count();
    Ok(MatchOutcome {
        accuracy: correct as f64 / matches.len() as f64,
        matches,
        excluded,
        skipped,
    })
}

pub fn evaluate(profiles: &[TreatmentProfile], mode: BatchExclusion) -> Result<EvalReport> {
    let nsc_out = nsc(profiles)?;
    let nscb_out = nscb(profiles, mode)?;
    Ok(EvalReport {
        nsc: nsc_out.accuracy,
        nscb: nscb_out.accuracy,
        nsc_matches: nsc_out.matches,
        nscb_matches: nscb_out.matches,
        nscb_excluded: nscb_out.excluded,
        nscb_skipped: nscb_out.skipped,
    })
}

/// Argmax over per-epoch scores, earliest epoch on ties.
pub fn best_epoch(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Structure("no per-epoch scores to rank".into()));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Mean score over the inclusive epoch window `[lo, hi]`.
pub fn window_mean(scores: &[f64], lo: usize, hi: usize) -> Result<f64> {
    if lo > hi || hi >= scores.len() {
        return Err(Error::Parameter(format!(
            "window [{}, {}] does not fit {} epochs",
            lo,
            hi,
            scores.len()
        )));
    }
    let slice = &scores[lo..=hi];
    Ok(slice.iter().sum::<f64>() / slice.len() as f64)
}

/// Two-decimal percentage, the report's display convention.
pub fn format_percent(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}
