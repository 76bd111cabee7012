//! MMPMR, worst-case bounds, DET curves and detector error rates.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::ResolvedPair;
use crate::fr::{FrBackend, ScoreSet};
use crate::imaging::Image;
use crate::geometry::{worst_case_angular, worst_case_euclidean, Embedding, ScoreFunction};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorphScoreRow {
    pub morph_id: String,
    /// Dissimilarity to the first identity's probe.
    pub d1: f64,
    pub d2: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MorphScoreTable {
    pub rows: Vec<MorphScoreRow>,
}

impl MorphScoreTable {
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        Self {
            rows: pairs
                .iter()
                .enumerate()
                .map(|(i, &(d1, d2))| MorphScoreRow {
                    morph_id: format!("m{i}"),
                    d1,
                    d2,
                })
                .collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("morph_id,d1,d2\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.morph_id, r.d1, r.d2);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with("morph_id")) {
                continue;
            }
            let bad = || Error::InvalidArgument(format!("score table line {}: expected morph_id,d1,d2", i + 1));
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 3 {
                return Err(bad());
            }
            rows.push(MorphScoreRow {
                morph_id: cols[0].to_string(),
                d1: cols[1].parse().map_err(|_| bad())?,
                d2: cols[2].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Fraction of morphs with `max(d1, d2) < t`.
pub fn mmpmr(table: &MorphScoreTable, t: f64) -> Result<f64> {
    if table.rows.is_empty() {
        return Err(Error::Empty("morph score table".into()));
    }
    if table.rows.iter().any(|r| !(r.d1.is_finite() && r.d2.is_finite())) {
        return Err(Error::NonFinite("morph score table".into()));
    }
    let hits = table.rows.iter().filter(|r| r.d1.max(r.d2) < t).count();
    Ok(hits as f64 / table.rows.len() as f64)
}

/// Worst-case embedding of two probes with its scores against both.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundRow {
    pub target: Embedding,
    pub d1: f64,
    pub d2: f64,
    pub matched: bool,
}

pub fn worst_case_target(metric: ScoreFunction, y1: &Embedding, y2: &Embedding) -> Result<Embedding> {
    match metric {
        ScoreFunction::EuclideanDissimilarity => worst_case_euclidean(y1, y2),
        _ => worst_case_angular(y1, y2),
    }
}

pub fn worst_case_bound(probe1: &Embedding, probe2: &Embedding, fr: &FrBackend) -> Result<BoundRow> {
    let t = fr.threshold()?;
    let target = worst_case_target(fr.metric, probe1, probe2)?;
    let d1 = fr.dissimilarity(&target, probe1)?;
    let d2 = fr.dissimilarity(&target, probe2)?;
    Ok(BoundRow {
        target,
        d1,
        d2,
        matched: d1.max(d2) < t,
    })
}

/// Per-pair bound rows and the bound's MMPMR.
pub fn worst_case_bound_table(probes: &[(Embedding, Embedding)], fr: &FrBackend) -> Result<(Vec<BoundRow>, f64)> {
    let rows = probes
        .iter()
        .map(|(a, b)| worst_case_bound(a, b, fr))
        .collect::<Result<Vec<_>>>()?;
    let table = MorphScoreTable::from_pairs(&rows.iter().map(|r| (r.d1, r.d2)).collect::<Vec<_>>());
    let m = mmpmr(&table, fr.threshold()?)?;
    Ok((rows, m))
}

/// Embeddings of both probes of every pair.
pub fn probe_embeddings(fr: &FrBackend, pairs: &[ResolvedPair<'_>]) -> Result<Vec<(Embedding, Embedding)>> {
    let p1 = fr.embed_images(&pairs.iter().map(|p| p.probe1).collect::<Vec<_>>())?;
    let p2 = fr.embed_images(&pairs.iter().map(|p| p.probe2).collect::<Vec<_>>())?;
    Ok(p1.into_iter().zip(p2).collect())
}

/// Scores each morph against the two probes of its pair.
pub fn morph_score_table(
    fr: &FrBackend,
    pair_ids: &[String],
    morphs: &[&Image],
    probes: &[(Embedding, Embedding)],
) -> Result<MorphScoreTable> {
    if morphs.len() != probes.len() || pair_ids.len() != probes.len() {
        return Err(Error::DimensionMismatch(probes.len(), morphs.len()));
    }
    let e = fr.embed_images(morphs)?;
    let rows = e
        .iter()
        .zip(probes)
        .zip(pair_ids)
        .map(|((m, (p1, p2)), id)| {
            Ok(MorphScoreRow {
                morph_id: id.clone(),
                d1: fr.dissimilarity(m, p1)?,
                d2: fr.dissimilarity(m, p2)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MorphScoreTable { rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub rate1: f64,
    pub rate2: f64,
}

/// Error-rate pairs at every distinct score plus both extremes.
///
/// `rate1(t)` is the fraction of `low` below `t` and `rate2(t)` the fraction of
/// `high` at or above `t`: FMR/FNMR for (impostor, genuine) dissimilarities,
/// APCER/BPCER for (attack, bona fide) detector scores.
pub fn det_points(low: &[f64], high: &[f64]) -> Result<Vec<DetPoint>> {
    if low.is_empty() || high.is_empty() {
        return Err(Error::Empty("both classes need scores".into()));
    }
    let set = ScoreSet {
        genuine: high.to_vec(),
        impostor: low.to_vec(),
    };
    set.validate()?;
    let mut lo = low.to_vec();
    lo.sort_by(f64::total_cmp);
    let mut hi = high.to_vec();
    hi.sort_by(f64::total_cmp);
    Ok(crate::fr::threshold_candidates(&set)
        .into_iter()
        .map(|t| DetPoint {
            threshold: t,
            rate1: lo.partition_point(|&d| d < t) as f64 / lo.len() as f64,
            rate2: (hi.len() - hi.partition_point(|&d| d < t)) as f64 / hi.len() as f64,
        })
        .collect())
}

pub fn det_points_scores(scores: &ScoreSet) -> Result<Vec<DetPoint>> {
    det_points(&scores.impostor, &scores.genuine)
}

/// Minimal BPCER over thresholds with `APCER <= apcer_bound`; an image is
/// flagged as an attack when its score is at least the threshold.
pub fn bpcer_at_apcer(bona_fide: &[f64], attack: &[f64], apcer_bound: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&apcer_bound) {
        return Err(Error::config("apcer_bound", "must lie in [0, 1]"));
    }
    Ok(det_points(attack, bona_fide)?
        .into_iter()
        .filter(|p| p.rate1 <= apcer_bound)
        .map(|p| p.rate2)
        .fold(1.0, f64::min))
}

/// Mean of the two rates where they are closest.
pub fn equal_error_rate(scores: &ScoreSet) -> Result<f64> {
    let pts = det_points_scores(scores)?;
    let best = pts
        .iter()
        .min_by(|a, b| (a.rate1 - a.rate2).abs().total_cmp(&(b.rate1 - b.rate2).abs()))
        .expect("at least two points");
    Ok(0.5 * (best.rate1 + best.rate2))
}

pub fn det_csv(points: &[DetPoint], names: (&str, &str)) -> String {
    let mut s = format!("threshold,{},{}\n", names.0, names.1);
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.threshold, p.rate1, p.rate2);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmpmrReportRow {
    pub backend: String,
    pub morph_set: String,
    pub threshold: f64,
    pub mmpmr: f64,
}

pub fn mmpmr_report_csv(rows: &[MmpmrReportRow]) -> String {
    let mut s = String::from("backend,morph_set,t,mmpmr\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.backend, r.morph_set, r.threshold, r.mmpmr);
    }
    s
}

pub fn bounds_csv(backend: &str, pair_ids: &[String], rows: &[BoundRow]) -> String {
    let mut s = String::from("backend,pair_id,d1,d2,matched\n");
    for (id, r) in pair_ids.iter().zip(rows) {
        let _ = writeln!(s, "{backend},{id},{},{},{}", r.d1, r.d2, r.matched as u8);
    }
    s
}
