//! Worst-case embeddings and the score functions they optimize.
//!
//! For two identity embeddings `y1`, `y2` the worst-case embedding is the
//! point that minimizes the larger of its two dissimilarities to them. Under
//! Euclidean distance this is the midpoint; under angular distance on the
//! unit sphere it is the normalized bisector, whose similarity to both
//! inputs is `cos(θ/2)`.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosine values are clamped to `[-1 + COS_CLAMP, 1 - COS_CLAMP]` before `acos`.
pub const COS_CLAMP: f64 = 1e-7;

const UNIT_TOL: f64 = 1e-6;
const ANTIPODAL_TOL: f64 = 1e-9;

/// A face-recognition template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
    normalized: bool,
}

impl Embedding {
    /// Wraps raw values; requires `D >= 2` finite entries. The `normalized`
    /// flag is set when the vector already has unit norm.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidEmbedding(format!(
                "dimension {} < 2",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        let normalized = (l2(&values) - 1.0).abs() < UNIT_TOL;
        Ok(Self { values, normalized })
    }

    /// Builds a unit embedding by normalizing `values`.
    pub fn unit(values: Vec<f64>) -> Result<Self> {
        let e = Self::new(values)?;
        e.normalize()
    }

    pub fn normalize(&self) -> Result<Self> {
        let n = l2(&self.values);
        if n == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok(Self {
            values: self.values.iter().map(|v| v / n).collect(),
            normalized: true,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        l2(&self.values)
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn same_dim(a: &Embedding, b: &Embedding) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(a.dim(), b.dim()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    /// Lower is a better match.
    Dissimilarity,
    /// Higher is a better match.
    Similarity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFunction {
    EuclideanDissimilarity,
    AngularDissimilarity,
    CosineSimilarity,
}

impl ScoreFunction {
    pub fn orientation(self) -> Orientation {
        match self {
            ScoreFunction::CosineSimilarity => Orientation::Similarity,
            _ => Orientation::Dissimilarity,
        }
    }

    /// Dissimilarity form of this score, used by matching rules of the form `d < t`.
    pub fn as_dissimilarity(self, score: f64) -> f64 {
        match self.orientation() {
            Orientation::Dissimilarity => score,
            Orientation::Similarity => -score,
        }
    }
}

/// Cosine similarity of two nonzero vectors, without clamping.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    same_dim(a, b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(dot(a.values(), b.values()) / (na * nb))
}

/// Evaluates `f(a, b)`. Symmetric in its arguments.
pub fn score(f: ScoreFunction, a: &Embedding, b: &Embedding) -> Result<f64> {
    same_dim(a, b)?;
    match f {
        ScoreFunction::EuclideanDissimilarity => Ok(a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()),
        ScoreFunction::CosineSimilarity => cosine(a, b),
        ScoreFunction::AngularDissimilarity => {
            let c = cosine(a, b)?;
            Ok(c.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP).acos())
        }
    }
}

/// Midpoint of `y1` and `y2`: equidistant from both at half their distance.
pub fn worst_case_euclidean(y1: &Embedding, y2: &Embedding) -> Result<Embedding> {
    same_dim(y1, y2)?;
    let mid = y1
        .values()
        .iter()
        .zip(y2.values())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    Embedding::new(mid)
}

fn unit_input(y: &Embedding) -> Result<Embedding> {
    if y.is_normalized() {
        return Ok(y.clone());
    }
    log::warn!("non-unit embedding (norm {:.6}) normalized before angular op", y.norm());
    y.normalize()
}

/// Normalized bisector of two unit embeddings.
pub fn worst_case_angular(y1: &Embedding, y2: &Embedding) -> Result<Embedding> {
    worst_case_alpha(y1, y2, 0.5)
}

/// Normalized `alpha·y1 + (1 − alpha)·y2`; `alpha = 0.5` is the bisector.
pub fn worst_case_alpha(y1: &Embedding, y2: &Embedding, alpha: f64) -> Result<Embedding> {
    same_dim(y1, y2)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let (u1, u2) = (unit_input(y1)?, unit_input(y2)?);
    let mixed: Vec<f64> = u1
        .values()
        .iter()
        .zip(u2.values())
        .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
        .collect();
    if l2(&mixed) < ANTIPODAL_TOL {
        return Err(Error::Degenerate(
            "weighted sum of embeddings vanishes (antipodal inputs)".into(),
        ));
    }
    Embedding::unit(mixed)
}

/// Sidecar metadata for an embedding CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub dimension: usize,
    pub normalized: bool,
    pub fr_backend_id: String,
}

/// One row of an embedding exchange file.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub image_id: String,
    pub embedding: Embedding,
}

/// Writes `path` (CSV `id,image_id,e0..e{D-1}`) and `path.json` sidecar.
pub fn write_embeddings(path: &Path, backend_id: &str, rows: &[EmbeddingRecord]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.embedding.dim());
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "id,image_id")?;
    for i in 0..dim {
        write!(out, ",e{i}")?;
    }
    writeln!(out)?;
    for r in rows {
        if r.embedding.dim() != dim {
            return Err(Error::DimensionMismatch(dim, r.embedding.dim()));
        }
        write!(out, "{},{}", r.id, r.image_id)?;
        for v in r.embedding.values() {
            write!(out, ",{v:e}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    let sidecar = EmbeddingSidecar {
        dimension: dim,
        normalized: rows.iter().all(|r| r.embedding.is_normalized()),
        fr_backend_id: backend_id.to_string(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn read_embeddings(path: &Path) -> Result<(EmbeddingSidecar, Vec<EmbeddingRecord>)> {
    let sidecar: EmbeddingSidecar =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut rows = Vec::new();
    for (n, line) in file.lines().enumerate().skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let id = cols.next().unwrap_or_default().to_string();
        let image_id = cols.next().unwrap_or_default().to_string();
        let values = cols
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("line {}: {e}", n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != sidecar.dimension {
            return Err(Error::DimensionMismatch(sidecar.dimension, values.len()));
        }
        rows.push(EmbeddingRecord {
            id,
            image_id,
            embedding: Embedding::new(values)?,
        });
    }
    Ok((sidecar, rows))
}
