//! Two-phase latent optimization of morphs towards the worst-case embedding.
//!
//! Phase 1 inverts each source image: starting from the encoder mean it
//! minimizes `‖x − G(z)‖² + Σ wₖ‖φₖ(x) − φₖ(G(z))‖²`. Phase 2 starts at the
//! midpoint of the two inverted latents and minimizes `Σ wₖ‖yₖ* − φₖ(G(z))‖²`
//! where `yₖ*` is the worst-case embedding of the sources under backend `k`.
//! Rows of a batch are independent jobs: the loss is a sum over rows, Adam is
//! elementwise, and a row stops updating once its loss drops below
//! `early_stop`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use wali_autograd::{grad, no_grad, Tensor, Var};

use crate::datasets::ResolvedPair;
use crate::fr::FrBackend;
use crate::imaging::{from_batch, to_batch, Image};
use crate::geometry::{score, worst_case_angular, Embedding, ScoreFunction};
use crate::losses::targets_tensor;
use crate::nets::Module;
use crate::optim::{Adam, AdamConfig};
use crate::training::WaliModel;
use crate::{Error, Result};

/// Image ↔ latent mapping with a decoder differentiable in the latent.
pub trait GeneratorBackend {
    fn descriptor(&self) -> String;
    fn latent_dim(&self) -> usize;
    fn image_dim(&self) -> usize;
    /// Initial latents `[n, latent_dim]` for images `[n, image_dim]`.
    fn encode(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
    fn decode_var(&self, z: &Var<f32>) -> Var<f32>;

    fn decode(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        if z.shape().len() != 2 || z.shape()[1] != self.latent_dim() {
            return Err(Error::Shape {
                expected: vec![0, self.latent_dim()],
                got: z.shape().to_vec(),
            });
        }
        let _g = no_grad();
        Ok(self.decode_var(&Var::constant(z.clone())).value().clone())
    }
}

/// The trained model's encoder mean and decoder.
pub struct WaliBackend<'a> {
    pub model: &'a WaliModel,
}

impl GeneratorBackend for WaliBackend<'_> {
    fn descriptor(&self) -> String {
        let c = self.model.config();
        format!("wali-{}px-z{}", c.image_size, c.latent_dim)
    }

    fn latent_dim(&self) -> usize {
        self.model.config().latent_dim
    }

    fn image_dim(&self) -> usize {
        self.model.config().image_dim()
    }

    fn encode(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.model.encode_mu(x)
    }

    fn decode_var(&self, z: &Var<f32>) -> Var<f32> {
        self.model.decoder.forward_with(&self.model.decoder.params().vars(false), z)
    }
}

/// An identity embedder usable inside the optimization graph.
pub trait Embedder {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    /// Unit embeddings `[n, dim]`, differentiable in `x`.
    fn embed_var(&self, x: &Var<f32>) -> Var<f32>;

    fn embed(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let _g = no_grad();
        self.embed_var(&Var::constant(x.clone())).value().clone()
    }
}

impl Embedder for FrBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        FrBackend::dim(self)
    }

    fn embed_var(&self, x: &Var<f32>) -> Var<f32> {
        self.net.forward_with(&self.net.params().vars(false), x)
    }
}

#[derive(Clone, Copy)]
pub struct WeightedFr<'a> {
    pub fr: &'a dyn Embedder,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizationConfig {
    pub steps_phase1: usize,
    pub steps_phase2: usize,
    pub adam_alpha: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// `(backend id, weight)`; backends not listed get weight 1.
    pub fr_weights: Vec<(String, f64)>,
    /// Phase-1 weight of the image term.
    pub pixel_weight: f64,
    /// Phase-1 weight applied on top of each backend's embedding term.
    pub embedding_weight: f64,
    pub early_stop: f64,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        Self {
            steps_phase1: 150,
            steps_phase2: 150,
            adam_alpha: 0.05,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            fr_weights: Vec::new(),
            pixel_weight: 1.0,
            embedding_weight: 1.0,
            early_stop: 1e-8,
        }
    }
}

impl OptimizationConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.adam_alpha,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate("adam")?;
        for (id, w) in &self.fr_weights {
            if !(*w > 0.0 && w.is_finite()) {
                return Err(Error::config(format!("fr_weights.{id}"), "must be positive"));
            }
        }
        if !(self.pixel_weight >= 0.0) {
            return Err(Error::config("pixel_weight", "must be non-negative"));
        }
        if !(self.embedding_weight >= 0.0) {
            return Err(Error::config("embedding_weight", "must be non-negative"));
        }
        if !(self.early_stop >= 0.0) {
            return Err(Error::config("early_stop", "must be non-negative"));
        }
        Ok(())
    }

    pub fn weight_of(&self, id: &str) -> f64 {
        self.fr_weights.iter().find(|(i, _)| i == id).map_or(1.0, |(_, w)| *w)
    }

    /// Pairs each backend with its configured weight.
    pub fn weighted<'a, E: Embedder>(&self, backends: &'a [E]) -> Vec<WeightedFr<'a>> {
        backends
            .iter()
            .map(|b| WeightedFr {
                fr: b,
                weight: self.weight_of(b.id()),
            })
            .collect()
    }
}

/// Loss of one row at one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub total: f64,
    /// Unweighted per-term values: image term first in phase 1, then one
    /// entry per backend.
    pub terms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseResult {
    /// Lowest-loss latent seen for each row.
    pub z: Tensor<f32>,
    /// Per row, the loss before each update and after the last one.
    pub trajectories: Vec<Vec<TrajectoryPoint>>,
    /// Updates applied to each row.
    pub steps: Vec<usize>,
}

impl PhaseResult {
    pub fn initial(&self, row: usize) -> f64 {
        self.trajectories[row][0].total
    }

    /// Loss at the returned latent.
    pub fn best(&self, row: usize) -> f64 {
        self.trajectories[row].iter().map(|p| p.total).fold(f64::INFINITY, f64::min)
    }
}

fn validate_frs(frs: &[WeightedFr<'_>]) -> Result<()> {
    for f in frs {
        if !(f.weight > 0.0 && f.weight.is_finite()) {
            return Err(Error::config(format!("fr_weights.{}", f.fr.id()), "must be positive"));
        }
    }
    Ok(())
}

/// Per-row squared distance `‖a − b‖²` as `[n]`.
fn row_sq_dist(a: &Var<f32>, b: &Var<f32>) -> Var<f32> {
    a.sub(b).row_sq_norm()
}

/// Generic per-row Adam loop. `objective(z)` returns the per-row weighted
/// loss `[n]` and the per-row unweighted terms.
fn optimize_rows(
    z0: &Tensor<f32>,
    steps: usize,
    cfg: &OptimizationConfig,
    weights: &[f64],
    objective: impl Fn(&Var<f32>) -> (Var<f32>, Vec<Var<f32>>),
) -> Result<PhaseResult> {
    let (n, d) = z0.dims2();
    let mut opt = Adam::<f32>::new(cfg.adam());
    let mut z = z0.clone();
    let mut best = z0.to_vec();
    let mut best_loss = vec![f64::INFINITY; n];
    let mut traj: Vec<Vec<TrajectoryPoint>> = vec![Vec::new(); n];
    let mut done = vec![false; n];
    let mut applied = vec![0usize; n];
    for k in 0..=steps {
        let zv = Var::param(z.clone());
        let (loss, terms) = objective(&zv);
        let per_row = loss.data().to_vec();
        for i in 0..n {
            if done[i] {
                continue;
            }
            let t: Vec<f64> = terms.iter().map(|t| t.data()[i] as f64).collect();
            let total = t.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>();
            if !total.is_finite() || !(per_row[i] as f64).is_finite() {
                return Err(Error::NonFinite(format!("latent loss at step {k}")));
            }
            traj[i].push(TrajectoryPoint { total, terms: t });
            if total < best_loss[i] {
                best_loss[i] = total;
                best[i * d..(i + 1) * d].copy_from_slice(&z.data()[i * d..(i + 1) * d]);
            }
            if total < cfg.early_stop {
                done[i] = true;
            }
        }
        if k == steps || done.iter().all(|&x| x) {
            break;
        }
        let g = grad(&loss.sum(), &[zv], false).remove(0).value().clone();
        let next = opt.step(&[z.clone()], &[g]).remove(0);
        let mut data = next.to_vec();
        for i in 0..n {
            if done[i] {
                data[i * d..(i + 1) * d].copy_from_slice(&z.data()[i * d..(i + 1) * d]);
            } else {
                applied[i] += 1;
            }
        }
        z = Tensor::new(&[n, d], data);
    }
    Ok(PhaseResult {
        z: Tensor::new(&[n, d], best),
        trajectories: traj,
        steps: applied,
    })
}

fn check_images<G: GeneratorBackend + ?Sized>(backend: &G, x: &Tensor<f32>) -> Result<()> {
    match x.shape() {
        [_, d] if *d == backend.image_dim() => Ok(()),
        got => Err(Error::Shape {
            expected: vec![0, backend.image_dim()],
            got: got.to_vec(),
        }),
    }
}

/// Phase 1: faithful inversion of each row of `x`, starting from `encode(x)`.
pub fn optimize_phase1<G: GeneratorBackend + ?Sized>(
    backend: &G,
    frs: &[WeightedFr<'_>],
    x: &Tensor<f32>,
    cfg: &OptimizationConfig,
) -> Result<PhaseResult> {
    cfg.validate()?;
    validate_frs(frs)?;
    check_images(backend, x)?;
    let z0 = backend.encode(x)?;
    let xv = Var::constant(x.clone());
    let targets: Vec<Var<f32>> = frs.iter().map(|f| Var::constant(f.fr.embed(x))).collect();
    let mut weights = vec![cfg.pixel_weight];
    weights.extend(frs.iter().map(|f| f.weight * cfg.embedding_weight));
    optimize_rows(&z0, cfg.steps_phase1, cfg, &weights, |z| {
        let img = backend.decode_var(z);
        let mut terms = vec![row_sq_dist(&xv, &img)];
        for (f, t) in frs.iter().zip(&targets) {
            terms.push(row_sq_dist(t, &f.fr.embed_var(&img)));
        }
        let loss = weighted_sum(&terms, &weights);
        (loss, terms)
    })
}

fn weighted_sum(terms: &[Var<f32>], weights: &[f64]) -> Var<f32> {
    let mut it = terms.iter().zip(weights).map(|(t, &w)| t.scale(w as f32));
    let first = it.next().expect("at least one term");
    it.fold(first, |acc, t| acc.add(&t))
}

/// Phase 2: from the midpoint of `z1` and `z2`, pull each backend's embedding
/// of the decoded morph towards its target.
pub fn optimize_phase2<G: GeneratorBackend + ?Sized>(
    backend: &G,
    frs: &[WeightedFr<'_>],
    z1: &Tensor<f32>,
    z2: &Tensor<f32>,
    targets: &[Vec<Embedding>],
    cfg: &OptimizationConfig,
) -> Result<PhaseResult> {
    cfg.validate()?;
    validate_frs(frs)?;
    if z1.shape() != z2.shape() {
        return Err(Error::Shape {
            expected: z1.shape().to_vec(),
            got: z2.shape().to_vec(),
        });
    }
    if targets.len() != frs.len() {
        return Err(Error::DimensionMismatch(frs.len(), targets.len()));
    }
    let n = z1.dims2().0;
    let target_vars = frs
        .iter()
        .zip(targets)
        .map(|(f, t)| {
            if t.len() != n {
                return Err(Error::DimensionMismatch(n, t.len()));
            }
            Ok(Var::constant(targets_tensor::<f32>(t, f.fr.dim())?))
        })
        .collect::<Result<Vec<_>>>()?;
    let z0 = z1.zip(z2, |a, b| (a + b) * 0.5);
    if frs.is_empty() {
        return optimize_rows(&z0, 0, cfg, &[], |z| (z.row_sq_norm().scale(0.0), Vec::new()));
    }
    let weights: Vec<f64> = frs.iter().map(|f| f.weight).collect();
    optimize_rows(&z0, cfg.steps_phase2, cfg, &weights, |z| {
        let img = backend.decode_var(z);
        let terms: Vec<Var<f32>> = frs
            .iter()
            .zip(&target_vars)
            .map(|(f, t)| row_sq_dist(t, &f.fr.embed_var(&img)))
            .collect();
        (weighted_sum(&terms, &weights), terms)
    })
}

/// Output of the full procedure for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MorphResult {
    pub image: Tensor<f32>,
    pub z1: Vec<f32>,
    pub z2: Vec<f32>,
    pub z_morph: Vec<f32>,
    pub phase1: [Vec<TrajectoryPoint>; 2],
    pub phase1_steps: [usize; 2],
    pub phase2: Vec<TrajectoryPoint>,
    pub phase2_steps: usize,
    /// Per backend: angular distance between the morph's embedding and the
    /// target, before and after phase 2.
    pub target_distance: BTreeMap<String, (f64, f64)>,
}

fn rows_to_embeddings(t: &Tensor<f32>) -> Result<Vec<Embedding>> {
    let (_, d) = t.dims2();
    t.data()
        .chunks_exact(d)
        .map(|r| Embedding::unit(r.iter().map(|&v| v as f64).collect()))
        .collect()
}

fn row(t: &Tensor<f32>, i: usize) -> Vec<f32> {
    let d = t.dims2().1;
    t.data()[i * d..(i + 1) * d].to_vec()
}

/// Runs phase 1 on every source image and phase 2 on every pair of rows of
/// `x1` and `x2`.
pub fn generate_morphs<G: GeneratorBackend + ?Sized>(
    backend: &G,
    frs: &[WeightedFr<'_>],
    x1: &Tensor<f32>,
    x2: &Tensor<f32>,
    cfg: &OptimizationConfig,
) -> Result<Vec<MorphResult>> {
    check_images(backend, x1)?;
    if x1.shape() != x2.shape() {
        return Err(Error::Shape {
            expected: x1.shape().to_vec(),
            got: x2.shape().to_vec(),
        });
    }
    let n = x1.dims2().0;
    let both = Var::concat_rows(&[Var::constant(x1.clone()), Var::constant(x2.clone())])
        .value()
        .clone();
    let p1 = optimize_phase1(backend, frs, &both, cfg)?;
    let z1 = Tensor::new(&[n, backend.latent_dim()], p1.z.data()[..n * backend.latent_dim()].to_vec());
    let z2 = Tensor::new(&[n, backend.latent_dim()], p1.z.data()[n * backend.latent_dim()..].to_vec());

    let mut targets = Vec::with_capacity(frs.len());
    for f in frs {
        let e1 = rows_to_embeddings(&f.fr.embed(x1))?;
        let e2 = rows_to_embeddings(&f.fr.embed(x2))?;
        targets.push(
            e1.iter()
                .zip(&e2)
                .map(|(a, b)| worst_case_angular(a, b))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let mid = z1.zip(&z2, |a, b| (a + b) * 0.5);
    let before = backend.decode(&mid)?;
    let p2 = optimize_phase2(backend, frs, &z1, &z2, &targets, cfg)?;
    let images = backend.decode(&p2.z)?;

    let mut distances: Vec<BTreeMap<String, (f64, f64)>> = vec![BTreeMap::new(); n];
    for (f, t) in frs.iter().zip(&targets) {
        let e0 = rows_to_embeddings(&f.fr.embed(&before))?;
        let e1 = rows_to_embeddings(&f.fr.embed(&images))?;
        for i in 0..n {
            let d0 = score(ScoreFunction::AngularDissimilarity, &e0[i], &t[i])?;
            let d1 = score(ScoreFunction::AngularDissimilarity, &e1[i], &t[i])?;
            distances[i].insert(f.fr.id().to_string(), (d0, d1));
        }
    }
    Ok((0..n)
        .map(|i| MorphResult {
            image: Tensor::new(&[1, backend.image_dim()], row(&images, i)),
            z1: row(&z1, i),
            z2: row(&z2, i),
            z_morph: row(&p2.z, i),
            phase1: [p1.trajectories[i].clone(), p1.trajectories[n + i].clone()],
            phase1_steps: [p1.steps[i], p1.steps[n + i]],
            phase2: p2.trajectories[i].clone(),
            phase2_steps: p2.steps[i],
            target_distance: std::mem::take(&mut distances[i]),
        })
        .collect())
}

/// Single-pair convenience wrapper.
pub fn generate_morph<G: GeneratorBackend + ?Sized>(
    backend: &G,
    frs: &[WeightedFr<'_>],
    x1: &Tensor<f32>,
    x2: &Tensor<f32>,
    cfg: &OptimizationConfig,
) -> Result<MorphResult> {
    if x1.dims2().0 != 1 {
        return Err(Error::InvalidArgument("generate_morph expects single images".into()));
    }
    Ok(generate_morphs(backend, frs, x1, x2, cfg)?.remove(0))
}

/// One JSON line of morph metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorphMetadata {
    pub pair_id: String,
    pub target_distance: BTreeMap<String, f64>,
    pub initial_target_distance: BTreeMap<String, f64>,
    pub steps_phase1: [usize; 2],
    pub steps_phase2: usize,
    pub initial_loss_phase1: [f64; 2],
    pub initial_loss_phase2: f64,
    /// Loss at the returned latents.
    pub final_loss_phase1: [f64; 2],
    pub final_loss_phase2: f64,
}

impl MorphMetadata {
    pub fn from_result(pair_id: &str, r: &MorphResult) -> Self {
        let best = |t: &[TrajectoryPoint]| t.iter().map(|p| p.total).fold(f64::INFINITY, f64::min);
        let first = |t: &[TrajectoryPoint]| t.first().map_or(0.0, |p| p.total);
        Self {
            pair_id: pair_id.into(),
            target_distance: r.target_distance.iter().map(|(k, v)| (k.clone(), v.1)).collect(),
            initial_target_distance: r.target_distance.iter().map(|(k, v)| (k.clone(), v.0)).collect(),
            steps_phase1: r.phase1_steps,
            steps_phase2: r.phase2_steps,
            initial_loss_phase1: [first(&r.phase1[0]), first(&r.phase1[1])],
            initial_loss_phase2: first(&r.phase2),
            final_loss_phase1: [best(&r.phase1[0]), best(&r.phase1[1])],
            final_loss_phase2: if r.phase2.is_empty() { 0.0 } else { best(&r.phase2) },
        }
    }
}

/// Morphs every pair in batches of `batch_size`, returning each image with
/// its metadata.
pub fn generate_protocol_morphs<G: GeneratorBackend + ?Sized>(
    backend: &G,
    frs: &[WeightedFr<'_>],
    pairs: &[ResolvedPair<'_>],
    pair_ids: &[String],
    cfg: &OptimizationConfig,
    batch_size: usize,
) -> Result<Vec<(Image, MorphMetadata)>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    if pairs.len() != pair_ids.len() {
        return Err(Error::DimensionMismatch(pairs.len(), pair_ids.len()));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for (chunk, ids) in pairs.chunks(batch_size).zip(pair_ids.chunks(batch_size)) {
        let (size, ch) = (chunk[0].image1.size, chunk[0].image1.channels);
        let x1 = to_batch(&chunk.iter().map(|p| p.image1).collect::<Vec<_>>())?;
        let x2 = to_batch(&chunk.iter().map(|p| p.image2).collect::<Vec<_>>())?;
        for (r, id) in generate_morphs(backend, frs, &x1, &x2, cfg)?.iter().zip(ids) {
            let image = from_batch(&r.image, size, ch)?.remove(0);
            out.push((image, MorphMetadata::from_result(id, r)));
        }
        log::info!("morphed {}/{} pairs", out.len(), pairs.len());
    }
    Ok(out)
}

/// Mean of a trajectory over a sliding window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    if values.len() < window || window == 0 {
        return values.to_vec();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

/// Whether the smoothed series never rises by more than a relative `tol`.
pub fn trend_non_increasing(values: &[f64], window: usize, tol: f64) -> bool {
    smoothed(values, window)
        .windows(2)
        .all(|w| w[1] <= w[0] + tol * w[0].abs().max(1e-12))
}

#[cfg(test)]
mod tests;
