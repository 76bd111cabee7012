//! Face recognition backends, threshold calibration and toy embedder training.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wali_autograd::{grad, Tensor, Var};

use crate::datasets::Dataset;
use crate::geometry::{score, Embedding, ScoreFunction};
use crate::imaging::{to_batch, Image};
use crate::nets::{Checkpoint, FrNet, Module, NetworkConfig, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::{Error, Result};

pub const FR_CHECKPOINT_KIND: &str = "fr";
const EMBED_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrRole {
    WhiteBox,
    BlackBox,
}

/// An embedder plus its comparison rule and decision threshold.
#[derive(Clone, Debug)]
pub struct FrBackend {
    pub id: String,
    pub net: FrNet<f32>,
    pub metric: ScoreFunction,
    pub threshold: Option<f64>,
    pub role: FrRole,
}

impl FrBackend {
    pub fn new(id: impl Into<String>, net: FrNet<f32>, role: FrRole) -> Self {
        Self {
            id: id.into(),
            net,
            metric: ScoreFunction::AngularDissimilarity,
            threshold: None,
            role,
        }
    }

    pub fn dim(&self) -> usize {
        self.net.config().fr_dim
    }

    pub fn image_size(&self) -> usize {
        self.net.config().image_size
    }

    pub fn embed_tensor(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.net.embed_tensor(x)
    }

    pub fn embed_images(&self, images: &[&Image]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EMBED_CHUNK) {
            out.extend(self.net.fr_embed(&to_batch(chunk)?)?);
        }
        Ok(out)
    }

    /// Dissimilarity under this backend's metric.
    pub fn dissimilarity(&self, a: &Embedding, b: &Embedding) -> Result<f64> {
        Ok(self.metric.as_dissimilarity(score(self.metric, a, b)?))
    }

    pub fn threshold(&self) -> Result<f64> {
        self.threshold.ok_or_else(|| Error::Uncalibrated(self.id.clone()))
    }

    /// Match rule `d < t`.
    pub fn is_match(&self, d: f64) -> Result<bool> {
        Ok(d < self.threshold()?)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(FR_CHECKPOINT_KIND, serde_json::to_value(self.net.config())?);
        ck.add_params(self.net.params());
        Ok(ck)
    }

    pub fn load_net(path: &Path) -> Result<FrNet<f32>> {
        let ck = Checkpoint::load(path)?;
        if ck.kind != FR_CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected kind `fr`, found `{}`", ck.kind)));
        }
        let cfg: NetworkConfig = serde_json::from_value(ck.config.clone())?;
        let mut net = FrNet::new(&cfg, 0)?;
        ck.restore(net.params_mut())?;
        Ok(net)
    }
}

/// Bona fide comparison scores as dissimilarities.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn validate(&self) -> Result<()> {
        if self.genuine.is_empty() {
            return Err(Error::Empty("genuine scores".into()));
        }
        if self.impostor.is_empty() {
            return Err(Error::Empty("impostor scores".into()));
        }
        if self.genuine.iter().chain(&self.impostor).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score set".into()));
        }
        Ok(())
    }

    /// Fraction of impostor scores with `d < t`.
    pub fn fmr(&self, t: f64) -> f64 {
        self.impostor.iter().filter(|&&d| d < t).count() as f64 / self.impostor.len() as f64
    }

    /// Fraction of genuine scores with `d >= t`.
    pub fn fnmr(&self, t: f64) -> f64 {
        self.genuine.iter().filter(|&&d| d >= t).count() as f64 / self.genuine.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub fmr: f64,
    pub fnmr: f64,
}

/// Candidate thresholds: every observed score plus one value below and one
/// above all of them.
pub fn threshold_candidates(scores: &ScoreSet) -> Vec<f64> {
    let mut c: Vec<f64> = scores.genuine.iter().chain(&scores.impostor).copied().collect();
    c.sort_by(f64::total_cmp);
    c.dedup();
    let (lo, hi) = (c[0], c[c.len() - 1]);
    let pad = 1.0 + (hi - lo).abs();
    c.insert(0, lo - pad);
    c.push(hi + pad);
    c
}

/// Threshold with minimal FNMR subject to `FMR < fmr_bound`, preferring the
/// larger threshold on ties.
pub fn calibrate_threshold(scores: &ScoreSet, fmr_bound: f64) -> Result<Calibration> {
    scores.validate()?;
    if !(fmr_bound > 0.0 && fmr_bound < 1.0) {
        return Err(Error::config("fmr_bound", "must lie in (0, 1)"));
    }
    let mut imp = scores.impostor.clone();
    imp.sort_by(f64::total_cmp);
    let mut gen = scores.genuine.clone();
    gen.sort_by(f64::total_cmp);
    let mut best: Option<Calibration> = None;
    for t in threshold_candidates(scores) {
        let fmr = imp.partition_point(|&d| d < t) as f64 / imp.len() as f64;
        if fmr >= fmr_bound {
            continue;
        }
        let fnmr = (gen.len() - gen.partition_point(|&d| d < t)) as f64 / gen.len() as f64;
        if best.map_or(true, |b| fnmr <= b.fnmr) {
            best = Some(Calibration { threshold: t, fmr, fnmr });
        }
    }
    // The candidate below every score always has FMR 0.
    Ok(best.expect("lowest candidate is admissible"))
}

/// Genuine pairs are all same-identity pairs; impostor pairs are a seeded
/// sample of at most `max_impostor` cross-identity pairs.
pub fn score_set(
    embeddings: &[Embedding],
    labels: &[usize],
    metric: ScoreFunction,
    max_impostor: usize,
    seed: u64,
) -> Result<ScoreSet> {
    let d = |i: usize, j: usize| -> Result<f64> {
        Ok(metric.as_dissimilarity(score(metric, &embeddings[i], &embeddings[j])?))
    };
    let mut genuine = Vec::new();
    let mut cross = Vec::new();
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            if labels[i] == labels[j] {
                genuine.push(d(i, j)?);
            } else {
                cross.push((i, j));
            }
        }
    }
    if cross.len() > max_impostor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cross.shuffle(&mut rng);
        cross.truncate(max_impostor);
    }
    let impostor = cross.into_iter().map(|(i, j)| d(i, j)).collect::<Result<_>>()?;
    Ok(ScoreSet { genuine, impostor })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrTrainConfig {
    pub network: NetworkConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Additive cosine margin.
    pub margin: f64,
    /// Logit scale.
    pub scale: f64,
    pub seed: u64,
}

impl Default for FrTrainConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            epochs: 30,
            batch_size: 32,
            optimizer: AdamConfig {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            margin: 0.35,
            scale: 16.0,
            seed: 0,
        }
    }
}

impl FrTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.optimizer.validate("optimizer")?;
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if !(self.margin >= 0.0 && self.margin < 1.0) {
            return Err(Error::config("margin", "must lie in [0, 1)"));
        }
        if !(self.scale > 0.0) {
            return Err(Error::config("scale", "must be positive"));
        }
        Ok(())
    }
}

/// Large-margin cosine loss over normalized class centres.
fn margin_loss(emb: &Var<f32>, centres: &Var<f32>, onehot: &Tensor<f32>, margin: f32, scale: f32) -> Var<f32> {
    let w = centres.l2_normalize_rows(1e-12);
    let cos = emb.matmul_t(&w, false, true);
    let onehot = Var::constant(onehot.clone());
    let logits = cos.sub(&onehot.scale(margin)).scale(scale);
    let lse = logits.exp().sum_cols().ln();
    lse.sub(&logits.row_dot(&onehot)).mean()
}

/// Trains an embedder by identity classification and drops the class head.
pub fn train_toy_fr(ds: &Dataset, cfg: &FrTrainConfig, id: &str, role: FrRole) -> Result<FrBackend> {
    cfg.validate()?;
    let k = ds.identities.len();
    if k < 10 {
        return Err(Error::InvalidArgument(format!("need at least 10 identities, got {k}")));
    }
    if ds.size != cfg.network.image_size {
        return Err(Error::config("network.image_size", "does not match the dataset"));
    }
    let mut net = FrNet::<f32>::new(&cfg.network, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let dim = cfg.network.fr_dim;
    let mut head = ParamStore::<f32>::default();
    head.push(
        "fr.classes".into(),
        Tensor::new(&[k, dim], (0..k * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()),
    );
    let mut opt = Adam::new(cfg.optimizer);
    let images = ds.images();
    let labels = ds.labels();
    let n = ds.len();
    let bs = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(bs).filter(|c| c.len() == bs) {
            let batch: Vec<&Image> = chunk.iter().map(|&i| images[i]).collect();
            let x = to_batch(&batch)?;
            let mut onehot = vec![0.0f32; bs * k];
            for (r, &i) in chunk.iter().enumerate() {
                onehot[r * k + labels[i]] = 1.0;
            }
            let mut params = net.params().vars(true);
            params.extend(head.vars(true));
            let emb = net.forward_with(&params, &Var::constant(x));
            let loss = margin_loss(
                &emb,
                params.last().expect("head present"),
                &Tensor::new(&[bs, k], onehot),
                cfg.margin as f32,
                cfg.scale as f32,
            );
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Divergence(format!("FR loss non-finite at epoch {epoch}")));
            }
            total += value as f64;
            batches += 1;
            let grads: Vec<Tensor<f32>> = grad(&loss, &params, false).iter().map(|g| g.value().clone()).collect();
            let mut current: Vec<Tensor<f32>> = net.params().tensors().to_vec();
            current.extend(head.tensors().iter().cloned());
            let mut updated = opt.step(&current, &grads);
            let head_t = updated.pop().expect("head present");
            net.params_mut().replace(updated)?;
            head.replace(vec![head_t])?;
        }
        log::info!("fr {id} epoch {epoch}: loss {:.4}", total / batches.max(1) as f64);
    }
    Ok(FrBackend::new(id, net, role))
}

/// One line of the backend registry file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub id: String,
    pub checkpoint: PathBuf,
    pub metric: ScoreFunction,
    pub threshold: Option<f64>,
    pub role: FrRole,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub backends: Vec<RegistryEntry>,
}

impl Registry {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&RegistryEntry> {
        self.backends
            .iter()
            .find(|b| b.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown FR backend `{id}`")))
    }

    /// Inserts or replaces the entry with the same id.
    pub fn upsert(&mut self, entry: RegistryEntry) {
        match self.backends.iter_mut().find(|b| b.id == entry.id) {
            Some(b) => *b = entry,
            None => self.backends.push(entry),
        }
    }

    /// Loads a backend; relative checkpoint paths resolve against `base`.
    pub fn backend(&self, id: &str, base: &Path) -> Result<FrBackend> {
        let e = self.get(id)?;
        let path = if e.checkpoint.is_absolute() {
            e.checkpoint.clone()
        } else {
            base.join(&e.checkpoint)
        };
        Ok(FrBackend {
            id: e.id.clone(),
            net: FrBackend::load_net(&path)?,
            metric: e.metric,
            threshold: e.threshold,
            role: e.role,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(g: &[f64], i: &[f64]) -> ScoreSet {
        ScoreSet {
            genuine: g.to_vec(),
            impostor: i.to_vec(),
        }
    }

    #[test]
    fn calibration_examples() {
        let c = calibrate_threshold(&set(&[0.1, 0.2, 0.4], &[0.3, 0.5, 0.6]), 0.001).unwrap();
        assert_eq!(c.threshold, 0.3);
        assert!((c.fnmr - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(c.fmr, 0.0);

        let c = calibrate_threshold(&set(&[0.1, 0.2], &[0.5, 0.7]), 0.001).unwrap();
        assert_eq!((c.threshold, c.fnmr), (0.5, 0.0));

        let s = [0.2, 0.4, 0.6];
        let c = calibrate_threshold(&set(&s, &s), 0.001).unwrap();
        assert_eq!(c.fnmr, 1.0);
    }

    #[test]
    fn calibration_errors() {
        assert!(matches!(calibrate_threshold(&set(&[0.1], &[]), 0.001), Err(Error::Empty(_))));
        assert!(calibrate_threshold(&set(&[], &[0.1]), 0.001).is_err());
        assert!(matches!(
            calibrate_threshold(&set(&[0.1], &[0.2]), 1.0),
            Err(Error::Config { field, .. }) if field == "fmr_bound"
        ));
    }

    #[test]
    fn rates_use_strict_match_rule() {
        let s = set(&[0.3, 0.5], &[0.3, 0.9]);
        assert_eq!(s.fmr(0.3), 0.0);
        assert_eq!(s.fnmr(0.3), 1.0);
        assert_eq!(s.fmr(0.31), 0.5);
        assert_eq!(s.fnmr(0.31), 0.5);
    }

    #[test]
    fn score_set_counts_pairs() {
        let e: Vec<Embedding> = [[1.0, 0.0], [0.8, 0.6], [0.0, 1.0], [-0.6, 0.8]]
            .iter()
            .map(|v| Embedding::unit(v.to_vec()).unwrap())
            .collect();
        let s = score_set(&e, &[0, 0, 1, 1], ScoreFunction::AngularDissimilarity, 100, 0).unwrap();
        assert_eq!(s.genuine.len(), 2);
        assert_eq!(s.impostor.len(), 4);
        let s = score_set(&e, &[0, 0, 1, 1], ScoreFunction::AngularDissimilarity, 3, 0).unwrap();
        assert_eq!(s.impostor.len(), 3);
    }

    #[test]
    fn registry_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = Registry::default();
        reg.upsert(RegistryEntry {
            id: "a".into(),
            checkpoint: "a.bin".into(),
            metric: ScoreFunction::AngularDissimilarity,
            threshold: None,
            role: FrRole::WhiteBox,
        });
        reg.upsert(RegistryEntry {
            id: "a".into(),
            checkpoint: "a.bin".into(),
            metric: ScoreFunction::AngularDissimilarity,
            threshold: Some(0.5),
            role: FrRole::WhiteBox,
        });
        assert_eq!(reg.backends.len(), 1);
        let path = dir.path().join("registry.json");
        reg.save(&path).unwrap();
        assert_eq!(Registry::load(&path).unwrap(), reg);
        assert!(reg.get("b").is_err());
    }
}
