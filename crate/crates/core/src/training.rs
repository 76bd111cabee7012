//! Adversarial training of the encoder/decoder/critic triple, followed by
//! finetuning with reconstruction and identity losses.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use wali_autograd::{grad, no_grad, Tensor, Var};

use crate::datasets::Dataset;
use crate::geometry::{worst_case_alpha, Embedding};
use crate::imaging::{to_batch, Image};
use crate::losses::{
    angular_distance_rows, combined_generator_loss, focal_frequency_loss_var, gradient_penalties,
    input_gradient_norms, pixel_loss_var, targets_tensor, GeneratorTerms, LossReport, LossWeights, Spectrum,
};
use crate::manifest::{write_timing, RunManifest};
use crate::nets::{Checkpoint, Critic, Decoder, Encoder, FrNet, JointCritic, Module, NetworkConfig, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::{Error, Result};

pub const WALI_CHECKPOINT_KIND: &str = "wali";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub network: NetworkConfig,
    pub batch_size: usize,
    pub critic_updates_per_gen: usize,
    pub baseline_epochs: usize,
    pub finetune_epochs: usize,
    pub critic_optimizer: AdamConfig,
    pub generator_optimizer: AdamConfig,
    pub weights: LossWeights,
    /// Any loss above this magnitude aborts training.
    pub divergence_limit: f64,
    pub baseline_only: bool,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            batch_size: 32,
            critic_updates_per_gen: 5,
            baseline_epochs: 60,
            finetune_epochs: 15,
            critic_optimizer: AdamConfig::training(),
            generator_optimizer: AdamConfig::training(),
            weights: LossWeights::default(),
            divergence_limit: 1e6,
            baseline_only: false,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.weights.validate()?;
        self.critic_optimizer.validate("critic_optimizer")?;
        self.generator_optimizer.validate("generator_optimizer")?;
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2 for morph pairing"));
        }
        if self.critic_updates_per_gen == 0 {
            return Err(Error::config("critic_updates_per_gen", "must be at least 1"));
        }
        if !(self.divergence_limit > 0.0) {
            return Err(Error::config("divergence_limit", "must be positive"));
        }
        Ok(())
    }
}

/// Partner index `j(i) = i + 1 mod n`: each sample is morphed with the next.
pub fn batch_pairing(n: usize) -> Vec<usize> {
    (0..n).map(|i| (i + 1) % n).collect()
}

#[derive(Clone, Debug)]
pub struct WaliModel {
    pub encoder: Encoder<f32>,
    pub decoder: Decoder<f32>,
    pub critic: Critic<f32>,
}

impl WaliModel {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::new(cfg, seed.wrapping_mul(3).wrapping_add(1))?,
            decoder: Decoder::new(cfg, seed.wrapping_mul(3).wrapping_add(2))?,
            critic: Critic::new(cfg, seed.wrapping_mul(3).wrapping_add(3))?,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        self.encoder.config()
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(WALI_CHECKPOINT_KIND, serde_json::to_value(self.config())?);
        ck.add_params(self.encoder.params());
        ck.add_params(self.decoder.params());
        ck.add_params(self.critic.params());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != WALI_CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected kind `wali`, found `{}`", ck.kind)));
        }
        let cfg: NetworkConfig = serde_json::from_value(ck.config.clone())?;
        let mut m = Self::new(&cfg, 0)?;
        ck.restore(m.encoder.params_mut())?;
        ck.restore(m.decoder.params_mut())?;
        ck.restore(m.critic.params_mut())?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn all_finite(&self) -> bool {
        self.encoder.params().all_finite() && self.decoder.params().all_finite() && self.critic.params().all_finite()
    }

    /// Mean latents `μ(x)`.
    pub fn encode_mu(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.encoder.encode(x)?.mu)
    }

    /// `G_x(α μ(x₁) + (1 − α) μ(x₂))` without any optimization.
    pub fn interpolate(&self, x1: &Tensor<f32>, x2: &Tensor<f32>, alpha: f32) -> Result<Tensor<f32>> {
        let z1 = self.encode_mu(x1)?;
        let z2 = self.encode_mu(x2)?;
        let z = z1.zip(&z2, |a, b| alpha * a + (1.0 - alpha) * b);
        self.decoder.decode(&z)
    }
}

/// Optimizers, noise source and update counters.
pub struct TrainState {
    pub model: WaliModel,
    critic_opt: Adam<f32>,
    gen_opt: Adam<f32>,
    rng: ChaCha8Rng,
    calls: u64,
    pub critic_updates: u64,
    pub generator_updates: u64,
}

impl TrainState {
    pub fn new(model: WaliModel, cfg: &TrainingConfig, seed: u64) -> Self {
        Self {
            model,
            critic_opt: Adam::new(cfg.critic_optimizer),
            gen_opt: Adam::new(cfg.generator_optimizer),
            rng: ChaCha8Rng::seed_from_u64(seed),
            calls: 0,
            critic_updates: 0,
            generator_updates: 0,
        }
    }
}

/// Scalars produced by one call of a training step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub critic_loss: f64,
    pub s_real: f64,
    pub s_fake: f64,
    pub r_x: f64,
    pub r_z: f64,
    pub generator: Option<LossReport>,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f32> {
    Tensor::new(&[n], (0..n).map(|_| rng.gen::<f32>()).collect())
}

/// `u x + (1 − u) y` with one mixing weight per row.
fn mix_rows(u: &Tensor<f32>, x: &Tensor<f32>, y: &Tensor<f32>) -> Tensor<f32> {
    let (n, d) = x.dims2();
    let data = (0..n * d)
        .map(|k| {
            let w = u.data()[k / d];
            w * x.data()[k] + (1.0 - w) * y.data()[k]
        })
        .collect();
    Tensor::new(&[n, d], data)
}

fn check(name: &str, v: f64, limit: f64) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::NonFinite(name.into()));
    }
    if v.abs() > limit {
        return Err(Error::Divergence(format!("{name} = {v:e} exceeds {limit:e}")));
    }
    Ok(v)
}

fn tensors(vars: &[Var<f32>]) -> Vec<Tensor<f32>> {
    vars.iter().map(|v| v.value().clone()).collect()
}

fn critic_update(state: &mut TrainState, x: &Tensor<f32>, cfg: &TrainingConfig) -> Result<StepReport> {
    let (n, _) = x.dims2();
    let ld = cfg.network.latent_dim;
    let eps = normal(&mut state.rng, &[n, ld]);
    let z_prior = normal(&mut state.rng, &[n, ld]);
    let u = uniform(&mut state.rng, n);
    let m = &state.model;
    let (z_enc, x_gen) = {
        let _g = no_grad();
        let out = m.encoder.encode(x)?;
        let z = out
            .mu
            .data()
            .iter()
            .zip(out.sigma.data())
            .zip(eps.data())
            .map(|((mu, s), e)| mu + s * e)
            .collect();
        (Tensor::new(&[n, ld], z), m.decoder.decode(&z_prior)?)
    };
    let p = m.critic.params().vars(true);
    let s_real = m.critic.score_with(&p, &Var::constant(x.clone()), &Var::constant(z_enc.clone())).mean();
    let s_fake = m.critic.score_with(&p, &Var::constant(x_gen.clone()), &Var::constant(z_prior.clone())).mean();
    let x_hat = mix_rows(&u, x, &x_gen);
    let z_hat = mix_rows(&u, &z_enc, &z_prior);
    let (rx, rz) = gradient_penalties(&m.critic, &p, &x_hat, &z_hat)?;
    let lambda = cfg.weights.lambda_gp as f32;
    let loss = s_fake.sub(&s_real).add(&rx.add(&rz).scale(lambda));
    let report = StepReport {
        critic_loss: check("critic loss", loss.item() as f64, cfg.divergence_limit)?,
        s_real: s_real.item() as f64,
        s_fake: s_fake.item() as f64,
        r_x: rx.item() as f64,
        r_z: rz.item() as f64,
        generator: None,
    };
    let g = tensors(&grad(&loss, &p, false));
    let updated = state.critic_opt.step(m.critic.params().tensors(), &g);
    state.model.critic.params_mut().replace(updated)?;
    state.critic_updates += 1;
    Ok(report)
}

/// Per-call random draws for the generator objective.
struct GenNoise {
    eps: Tensor<f32>,
    z_prior: Tensor<f32>,
    alpha: f32,
}

/// The five finetuning terms on the graph, in [`crate::losses::TERM_NAMES`] order.
struct FinetuneGraph {
    terms: [Var<f32>; 5],
}

/// Worst-case targets for pairs `(i, j(i))` of live FR embeddings.
fn pair_targets(y: &Tensor<f32>, alpha: f64) -> Result<Tensor<f32>> {
    let (n, d) = y.dims2();
    let rows: Vec<Embedding> = y
        .data()
        .chunks_exact(d)
        .map(|r| Embedding::new(r.iter().map(|&v| v as f64).collect()))
        .collect::<Result<_>>()?;
    let j = batch_pairing(n);
    let targets = (0..n)
        .map(|i| worst_case_alpha(&rows[i], &rows[j[i]], alpha))
        .collect::<Result<Vec<_>>>()?;
    targets_tensor(&targets, d)
}

fn finetune_terms(
    m: &WaliModel,
    pd: &[Var<f32>],
    fr: &FrNet<f32>,
    spec: &Spectrum<f32>,
    x: &Tensor<f32>,
    mu: &Var<f32>,
    alpha: f32,
) -> Result<FinetuneGraph> {
    let n = x.dims2().0;
    let j = batch_pairing(n);
    let mu_j = mu.select_rows(&j);
    let z_morph = mu.add(&mu_j).scale(0.5);
    let z_alpha = mu.scale(alpha).add(&mu_j.scale(1.0 - alpha));
    let decoded = m.decoder.forward_with(pd, &Var::concat_rows(&[mu.clone(), z_morph, z_alpha]));
    let x_recon = decoded.slice_rows(0, n);
    let xv = Var::constant(x.clone());
    let frp = fr.params().vars(false);
    let y_real = {
        let _g = no_grad();
        fr.forward_with(&frp, &xv).value().clone()
    };
    let y_gen = fr.forward_with(&frp, &decoded);
    let target_morph = pair_targets(&y_real, 0.5)?;
    let target_alpha = pair_targets(&y_real, alpha as f64)?;
    let dist = |rows: (usize, usize), target: Tensor<f32>| {
        angular_distance_rows(&y_gen.slice_rows(rows.0, rows.1), &Var::constant(target)).mean()
    };
    Ok(FinetuneGraph {
        terms: [
            pixel_loss_var(&xv, &x_recon),
            focal_frequency_loss_var(spec, &xv, &x_recon),
            dist((0, n), y_real),
            dist((n, 2 * n), target_morph),
            dist((2 * n, 3 * n), target_alpha),
        ],
    })
}

/// `(L_FR_Morph, L_FR_Morph_α)` for a batch at a given `α`, as used in finetuning.
pub fn fr_morph_terms(model: &WaliModel, fr: &FrNet<f32>, x: &Tensor<f32>, alpha: f32) -> Result<(f64, f64)> {
    let _g = no_grad();
    let spec = Spectrum::new(model.config().image_size, model.config().channels);
    let mu = Var::constant(model.encode_mu(x)?);
    let g = finetune_terms(model, &model.decoder.params().vars(false), fr, &spec, x, &mu, alpha)?;
    Ok((g.terms[3].item() as f64, g.terms[4].item() as f64))
}

fn generator_update(
    state: &mut TrainState,
    x: &Tensor<f32>,
    cfg: &TrainingConfig,
    finetune: Option<(&FrNet<f32>, &Spectrum<f32>)>,
) -> Result<LossReport> {
    let (n, _) = x.dims2();
    let ld = cfg.network.latent_dim;
    let noise = GenNoise {
        eps: normal(&mut state.rng, &[n, ld]),
        z_prior: normal(&mut state.rng, &[n, ld]),
        alpha: state.rng.gen::<f32>(),
    };
    let m = &state.model;
    let pe = m.encoder.params().vars(true);
    let pd = m.decoder.params().vars(true);
    let pc = m.critic.params().vars(false);
    let (mu, sigma) = m.encoder.forward_with(&pe, &Var::constant(x.clone()));
    let z_enc = mu.add(&sigma.mul(&Var::constant(noise.eps.clone())));
    let zp = Var::constant(noise.z_prior.clone());
    let x_gen = m.decoder.forward_with(&pd, &zp);
    let s_real = m.critic.score_with(&pc, &Var::constant(x.clone()), &z_enc).mean();
    let s_fake = m.critic.score_with(&pc, &x_gen, &zp).mean();
    let adversarial = s_real.sub(&s_fake).abs();

    let mut total = adversarial.clone();
    let mut values = GeneratorTerms {
        adversarial: adversarial.item() as f64,
        finetune: [0.0; 5],
    };
    let w = &cfg.weights;
    if let Some((fr, spec)) = finetune.filter(|_| w.finetuning_active()) {
        let ft = finetune_terms(m, &pd, fr, spec, x, &mu, noise.alpha)?;
        for (k, (term, g)) in ft.terms.iter().zip(w.gamma).enumerate() {
            values.finetune[k] = term.item() as f64;
            if g != 0.0 {
                total = total.add(&term.scale(g as f32));
            }
        }
    }
    let report = combined_generator_loss(&values, w)?;
    check("generator loss", total.item() as f64, cfg.divergence_limit)?;
    for (name, v) in &report.terms {
        check(name, *v, cfg.divergence_limit)?;
    }
    let mut params = pe;
    params.extend(pd);
    let g = tensors(&grad(&total, &params, false));
    let mut current = m.encoder.params().tensors().to_vec();
    current.extend(m.decoder.params().tensors().iter().cloned());
    let mut updated = state.gen_opt.step(&current, &g);
    let dec = updated.split_off(m.encoder.params().len());
    state.model.encoder.params_mut().replace(updated)?;
    state.model.decoder.params_mut().replace(dec)?;
    state.generator_updates += 1;
    Ok(report)
}

fn step(
    state: &mut TrainState,
    x: &Tensor<f32>,
    cfg: &TrainingConfig,
    finetune: Option<(&FrNet<f32>, &Spectrum<f32>)>,
) -> Result<StepReport> {
    if x.dims2().0 < 2 {
        return Err(Error::InvalidArgument("batch needs at least two images".into()));
    }
    let mut report = critic_update(state, x, cfg)?;
    state.calls += 1;
    if state.calls % cfg.critic_updates_per_gen as u64 == 0 {
        report.generator = Some(generator_update(state, x, cfg, finetune)?);
    }
    if !state.model.all_finite() {
        return Err(Error::NonFinite("parameters after update".into()));
    }
    Ok(report)
}

/// One critic update, plus an encoder/decoder update on every
/// `critic_updates_per_gen`-th call.
pub fn baseline_step(state: &mut TrainState, x: &Tensor<f32>, cfg: &TrainingConfig) -> Result<StepReport> {
    step(state, x, cfg, None)
}

/// Like [`baseline_step`], with the finetuning terms added to the generator
/// objective using `fr` as the white-box embedder.
pub fn finetune_step(
    state: &mut TrainState,
    x: &Tensor<f32>,
    fr: &FrNet<f32>,
    spec: &Spectrum<f32>,
    cfg: &TrainingConfig,
) -> Result<StepReport> {
    if fr.config().image_size != cfg.network.image_size {
        return Err(Error::config("network.image_size", "does not match the FR backend"));
    }
    step(state, x, cfg, Some((fr, spec)))
}

/// Loss curves as `(step, term, value)` rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<(String, u64, String, f64)>,
}

impl LossLog {
    fn record(&mut self, phase: &str, step: u64, r: &StepReport) {
        for (name, v) in [
            ("critic", r.critic_loss),
            ("s_real", r.s_real),
            ("s_fake", r.s_fake),
            ("r_x", r.r_x),
            ("r_z", r.r_z),
        ] {
            self.rows.push((phase.into(), step, name.into(), v));
        }
        if let Some(g) = &r.generator {
            for (name, v) in &g.terms {
                self.rows.push((phase.into(), step, format!("g_{name}"), *v));
            }
            self.rows.push((phase.into(), step, "g_total".into(), g.total));
        }
    }

    /// Values of one term in step order.
    pub fn series(&self, phase: &str, term: &str) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.0 == phase && r.2 == term)
            .map(|r| (r.1, r.3))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("phase,step,term,value\n");
        for (p, step, t, v) in &self.rows {
            let _ = writeln!(s, "{p},{step},{t},{v}");
        }
        s
    }
}

fn batches(n: usize, bs: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(bs).filter(|c| c.len() == bs).map(<[usize]>::to_vec).collect()
}

fn batch_tensor(images: &[&Image], idx: &[usize]) -> Result<Tensor<f32>> {
    let b: Vec<&Image> = idx.iter().map(|&i| images[i]).collect();
    to_batch(&b)
}

/// Runs `epochs` passes over `images`; `on_step` sees every report.
pub fn run_epochs(
    state: &mut TrainState,
    images: &[&Image],
    cfg: &TrainingConfig,
    epochs: usize,
    fr: Option<&FrNet<f32>>,
    phase: &str,
    log: &mut LossLog,
    mut on_step: impl FnMut(u64, &StepReport),
) -> Result<()> {
    let bs = cfg.batch_size;
    if images.len() < bs {
        return Err(Error::InvalidArgument(format!(
            "{} images cannot fill a batch of {bs}",
            images.len()
        )));
    }
    let spec = Spectrum::new(cfg.network.image_size, cfg.network.channels);
    let mut order_rng = ChaCha8Rng::seed_from_u64(state.rng.gen());
    let mut k = 0;
    for epoch in 0..epochs {
        for idx in batches(images.len(), bs, &mut order_rng) {
            let x = batch_tensor(images, &idx)?;
            let r = match fr {
                Some(fr) => finetune_step(state, &x, fr, &spec, cfg)?,
                None => baseline_step(state, &x, cfg)?,
            };
            log.record(phase, k, &r);
            on_step(k, &r);
            k += 1;
        }
        log::info!("{phase} epoch {}/{epochs} done ({k} steps)", epoch + 1);
    }
    Ok(())
}

/// Mean `‖∇ₓC‖` at random interpolates between encoder and decoder pairs.
pub fn interpolate_gradient_norm(model: &WaliModel, x: &Tensor<f32>, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, _) = x.dims2();
    let ld = model.config().latent_dim;
    let z_prior = normal(&mut rng, &[n, ld]);
    let u = uniform(&mut rng, n);
    let (z_enc, x_gen) = {
        let _g = no_grad();
        (model.encode_mu(x)?, model.decoder.decode(&z_prior)?)
    };
    let x_hat = mix_rows(&u, x, &x_gen);
    let z_hat = mix_rows(&u, &z_enc, &z_prior);
    let norms = input_gradient_norms(&model.critic, &x_hat, &z_hat);
    Ok(norms.iter().sum::<f64>() / norms.len() as f64)
}

pub struct TrainOutcome {
    pub baseline: WaliModel,
    pub finetuned: Option<WaliModel>,
    pub log: LossLog,
}

fn check_dataset(cfg: &TrainingConfig, ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset".into()));
    }
    if ds.size != cfg.network.image_size {
        return Err(Error::config("network.image_size", "does not match the dataset"));
    }
    Ok(())
}

/// A failed phase with the parameters it stopped at.
pub struct PhaseFailure {
    pub error: Error,
    pub snapshot: WaliModel,
}

/// Runs one phase from `start` with fresh optimizer state: adversarial only
/// without `fr`, finetuning with it.
pub fn train_phase(
    cfg: &TrainingConfig,
    start: WaliModel,
    ds: &Dataset,
    fr: Option<&FrNet<f32>>,
    log: &mut LossLog,
) -> std::result::Result<WaliModel, PhaseFailure> {
    let (epochs, phase, seed) = match fr {
        None => (cfg.baseline_epochs, "baseline", cfg.seed),
        Some(_) => (cfg.finetune_epochs, "finetune", cfg.seed.wrapping_add(1)),
    };
    let mut state = TrainState::new(start, cfg, seed);
    let r = cfg
        .validate()
        .and_then(|_| check_dataset(cfg, ds))
        .and_then(|_| run_epochs(&mut state, &ds.images(), cfg, epochs, fr, phase, log, |_, _| {}));
    match r {
        Ok(()) => Ok(state.model),
        Err(error) => Err(PhaseFailure {
            error,
            snapshot: state.model,
        }),
    }
}

/// Adversarial phase from scratch.
pub fn train_baseline(cfg: &TrainingConfig, ds: &Dataset, log: &mut LossLog) -> Result<WaliModel> {
    let start = WaliModel::new(&cfg.network, cfg.seed)?;
    train_phase(cfg, start, ds, None, log).map_err(|f| f.error)
}

/// Finetuning phase starting from `baseline`.
pub fn finetune(cfg: &TrainingConfig, baseline: &WaliModel, ds: &Dataset, fr: &FrNet<f32>, log: &mut LossLog) -> Result<WaliModel> {
    train_phase(cfg, baseline.clone(), ds, Some(fr), log).map_err(|f| f.error)
}

/// Writes `config.json`, `manifest.json`, `checkpoints/{name}.bin` and
/// `logs/losses.csv` under `dir`.
pub fn save_run(
    dir: &Path,
    command: &str,
    cfg: &TrainingConfig,
    log: &LossLog,
    models: &[(&str, &WaliModel)],
    notes: &[(&str, serde_json::Value)],
) -> Result<()> {
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::create_dir_all(dir.join("logs"))?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    fs::write(dir.join("logs/losses.csv"), log.to_csv())?;
    let mut manifest = RunManifest::new(command, cfg, cfg.seed)?;
    for (name, m) in models {
        let rel = format!("checkpoints/{name}.bin");
        m.checkpoint()?.save(&dir.join(&rel))?;
        manifest.add_artifact(dir, &rel)?;
    }
    manifest.add_artifact(dir, "logs/losses.csv")?;
    manifest.note("loss_weights", &cfg.weights)?;
    for (k, v) in notes {
        manifest.note(k, v)?;
    }
    manifest.write(dir)
}

/// Writes the parameters a failed phase stopped at to `checkpoints/divergence.bin`.
pub fn save_snapshot(dir: &Path, failure: &PhaseFailure, log: &LossLog) -> Result<()> {
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::create_dir_all(dir.join("logs"))?;
    failure.snapshot.checkpoint()?.save(&dir.join("checkpoints/divergence.bin"))?;
    fs::write(dir.join("logs/losses.csv"), log.to_csv())?;
    fs::write(dir.join("logs/divergence.txt"), failure.error.to_string())?;
    Ok(())
}

/// Both phases. With `run_dir` set, writes the run layout there, or a
/// divergence snapshot if a phase fails.
pub fn train(cfg: &TrainingConfig, ds: &Dataset, fr: Option<(&str, &FrNet<f32>)>, run_dir: Option<&Path>) -> Result<TrainOutcome> {
    let clock = std::time::Instant::now();
    let mut log = LossLog::default();
    if !cfg.baseline_only && fr.is_none() {
        return Err(Error::InvalidArgument("finetuning needs an FR backend".into()));
    }
    let fail = |f: PhaseFailure, log: &LossLog| -> Error {
        if let Some(dir) = run_dir {
            if let Err(e) = save_snapshot(dir, &f, log) {
                log::error!("could not write divergence snapshot: {e}");
            }
        }
        f.error
    };
    let start = WaliModel::new(&cfg.network, cfg.seed)?;
    let baseline = train_phase(cfg, start, ds, None, &mut log).map_err(|f| fail(f, &log))?;
    let finetuned = match fr.filter(|_| !cfg.baseline_only) {
        Some((_, net)) => Some(train_phase(cfg, baseline.clone(), ds, Some(net), &mut log).map_err(|f| fail(f, &log))?),
        None => None,
    };
    if let Some(dir) = run_dir {
        let mut models = vec![("baseline", &baseline)];
        if let Some(f) = &finetuned {
            models.push(("finetune", f));
        }
        let mut notes = vec![("baseline_only", serde_json::Value::Bool(finetuned.is_none()))];
        if let Some((id, _)) = fr {
            notes.push(("fr_backend", serde_json::Value::String(id.into())));
        }
        save_run(dir, "train", cfg, &log, &models, &notes)?;
        write_timing(dir, "train", clock.elapsed().as_secs_f64())?;
    }
    Ok(TrainOutcome { baseline, finetuned, log })
}

/// Parameter checksum of all three networks, for determinism checks.
pub fn model_checksum(m: &WaliModel) -> String {
    let mut all: ParamStore<f32> = ParamStore::default();
    for s in [m.encoder.params(), m.decoder.params(), m.critic.params()] {
        for (n, t) in s.names().iter().zip(s.tensors()) {
            all.push(n.clone(), t.clone());
        }
    }
    all.checksum()
}
