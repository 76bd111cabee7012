//! Critic, generator and finetuning loss terms.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use wali_autograd::{grad, Float, Tensor, Var};

use crate::error::{Error, Result};
use crate::geometry::{Embedding, COS_CLAMP};
use crate::nets::{FrNet, JointCritic};

/// Names of the five finetuning terms, in weight order.
pub const TERM_NAMES: [&str; 5] = ["pixel", "ffl", "fr", "fr_morph", "fr_morph_alpha"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_gp: f64,
    /// Weights for pixel, FFL, FR, FR-morph and FR-morph-alpha terms.
    pub gamma: [f64; 5],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_gp: 10.0,
            gamma: [1.0; 5],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_gp >= 0.0 && self.lambda_gp.is_finite()) {
            return Err(Error::config("lambda_gp", "must be finite and >= 0"));
        }
        for (i, g) in self.gamma.iter().enumerate() {
            if !(*g >= 0.0 && g.is_finite()) {
                return Err(Error::config(
                    format!("gamma[{i}]"),
                    "must be finite and >= 0",
                ));
            }
        }
        Ok(())
    }

    pub fn baseline() -> Self {
        Self {
            gamma: [0.0; 5],
            ..Self::default()
        }
    }

    pub fn finetuning_active(&self) -> bool {
        self.gamma.iter().any(|&g| g > 0.0)
    }
}

fn finite(name: &str, vals: &[f64]) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.into()))
    }
}

/// `s_fake − s_real + λ(R_x + R_z)`.
pub fn critic_loss(s_fake: f64, s_real: f64, r_x: f64, r_z: f64, w: &LossWeights) -> Result<f64> {
    finite("critic loss input", &[s_fake, s_real, r_x, r_z])?;
    if r_x < 0.0 || r_z < 0.0 {
        return Err(Error::InvalidArgument("penalties must be >= 0".into()));
    }
    Ok(s_fake - s_real + w.lambda_gp * (r_x + r_z))
}

/// `|s_real − s_fake|`.
pub fn generator_adv_loss(s_fake: f64, s_real: f64) -> Result<f64> {
    finite("generator loss input", &[s_fake, s_real])?;
    Ok((s_real - s_fake).abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PenaltyTarget {
    Image,
    Latent,
}

/// Input-gradient penalties `(R_x, R_z)` at interpolated pairs.
///
/// Each is the batch mean of `(‖∇C‖₂ − 1)²`; the returned values stay on the
/// graph so they can be differentiated with respect to critic parameters.
pub fn gradient_penalties<T: Float, C: JointCritic<T> + ?Sized>(
    critic: &C,
    params: &[Var<T>],
    x_hat: &Tensor<T>,
    z_hat: &Tensor<T>,
) -> Result<(Var<T>, Var<T>)> {
    let x = Var::param(x_hat.clone());
    let z = Var::param(z_hat.clone());
    let s = critic.score_with(params, &x, &z).sum();
    if !s.item().is_finite() {
        return Err(Error::NonFinite("critic score at interpolates".into()));
    }
    let g = grad(&s, &[x, z], true);
    let penalty = |g: &Var<T>| {
        let norm = g.row_sq_norm().add_scalar(T::of(1e-12)).sqrt();
        norm.add_scalar(-T::one()).square().mean()
    };
    let (rx, rz) = (penalty(&g[0]), penalty(&g[1]));
    if !(rx.item().is_finite() && rz.item().is_finite()) {
        return Err(Error::NonFinite("critic input gradient".into()));
    }
    Ok((rx, rz))
}

pub fn gradient_penalty<T: Float, C: JointCritic<T> + ?Sized>(
    critic: &C,
    params: &[Var<T>],
    x_hat: &Tensor<T>,
    z_hat: &Tensor<T>,
    wrt: PenaltyTarget,
) -> Result<Var<T>> {
    let (rx, rz) = gradient_penalties(critic, params, x_hat, z_hat)?;
    Ok(match wrt {
        PenaltyTarget::Image => rx,
        PenaltyTarget::Latent => rz,
    })
}

/// Per-sample gradient norms `‖∇_x C‖₂` at `(x, z)`.
pub fn input_gradient_norms<T: Float, C: JointCritic<T> + ?Sized>(
    critic: &C,
    x: &Tensor<T>,
    z: &Tensor<T>,
) -> Vec<f64> {
    let xv = Var::param(x.clone());
    let s = critic
        .score_with(&critic.params().vars(false), &xv, &Var::constant(z.clone()))
        .sum();
    let g = grad(&s, &[xv], false).remove(0);
    g.row_sq_norm()
        .data()
        .iter()
        .map(|v| v.to_f64_lossy().sqrt())
        .collect()
}

/// Mean squared error over all elements.
pub fn pixel_loss_var<T: Float>(x: &Var<T>, recon: &Var<T>) -> Var<T> {
    recon.sub(x).square().mean()
}

pub fn pixel_loss(x: &Tensor<f64>, recon: &Tensor<f64>) -> Result<f64> {
    same_shape(x, recon)?;
    Ok(pixel_loss_var(&Var::constant(x.clone()), &Var::constant(recon.clone())).item())
}

fn same_shape<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Orthonormal 2-D DFT of square images as dense real/imaginary matrices.
#[derive(Clone, Debug)]
pub struct Spectrum<T: Float> {
    size: usize,
    channels: usize,
    cos: Tensor<T>,
    sin: Tensor<T>,
}

impl<T: Float> Spectrum<T> {
    pub fn new(size: usize, channels: usize) -> Self {
        let hw = size * size;
        let scale = 1.0 / (hw as f64).sqrt();
        let mut cos = Vec::with_capacity(hw * hw);
        let mut sin = Vec::with_capacity(hw * hw);
        for y in 0..size {
            for x in 0..size {
                for u in 0..size {
                    for v in 0..size {
                        // Reduce the phase index mod size before scaling for accuracy.
                        let k = ((y * u) % size) as f64 / size as f64 + ((x * v) % size) as f64 / size as f64;
                        let ph = -2.0 * std::f64::consts::PI * k;
                        cos.push(T::of(ph.cos() * scale));
                        sin.push(T::of(ph.sin() * scale));
                    }
                }
            }
        }
        Self {
            size,
            channels,
            cos: Tensor::new(&[hw, hw], cos),
            sin: Tensor::new(&[hw, hw], sin),
        }
    }

    /// Reorders `[n, h·w·c]` into `[n·c, h·w]` planes.
    fn planes(&self, x: &Var<T>) -> Var<T> {
        let n = x.shape()[0];
        let (hw, c) = (self.size * self.size, self.channels);
        let idx: Vec<u32> = (0..n)
            .flat_map(|i| {
                (0..c).flat_map(move |ch| (0..hw).map(move |p| (i * hw * c + p * c + ch) as u32))
            })
            .collect();
        x.gather(Arc::new(idx), &[n * c, hw])
    }

    /// Real and imaginary parts, `[n·c, h·w]` each.
    pub fn transform(&self, x: &Var<T>) -> (Var<T>, Var<T>) {
        let p = self.planes(x);
        (
            p.matmul(&Var::constant(self.cos.clone())),
            p.matmul(&Var::constant(self.sin.clone())),
        )
    }
}

/// Focal frequency loss with exponent 1.
///
/// The spectral weight `|F(recon) − F(x)|`, divided by its maximum over each
/// image, is held constant during differentiation.
pub fn focal_frequency_loss_var<T: Float>(spec: &Spectrum<T>, x: &Var<T>, recon: &Var<T>) -> Var<T> {
    let n = x.shape()[0];
    let (re, im) = spec.transform(&recon.sub(x));
    let dist = re.square().add(&im.square());
    let per_image = dist.len() / n.max(1);
    let mut weight = dist.value().map(|d| d.sqrt()).to_vec();
    for chunk in weight.chunks_mut(per_image.max(1)) {
        let max = chunk.iter().copied().fold(T::zero(), T::max);
        for w in chunk.iter_mut() {
            *w = if max > T::zero() { *w / max } else { T::zero() };
        }
    }
    let weight = Var::constant(Tensor::new(dist.shape(), weight));
    dist.mul(&weight).mean()
}

pub fn focal_frequency_loss(
    x: &Tensor<f64>,
    recon: &Tensor<f64>,
    size: usize,
    channels: usize,
) -> Result<f64> {
    same_shape(x, recon)?;
    if x.shape().len() != 2 || x.shape()[1] != size * size * channels {
        return Err(Error::Shape {
            expected: vec![0, size * size * channels],
            got: x.shape().to_vec(),
        });
    }
    let spec = Spectrum::new(size, channels);
    Ok(focal_frequency_loss_var(&spec, &Var::constant(x.clone()), &Var::constant(recon.clone())).item())
}

/// Row-wise angle between unit embeddings, `[n]`, with clamped cosine.
pub fn angular_distance_rows<T: Float>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    let c = T::of(COS_CLAMP);
    a.row_dot(b).clamp(-T::one() + c, T::one() - c).acos()
}

/// Mean angular distance between `φ(x_recon)` and `φ(x)`.
pub fn fr_recon_loss<T: Float>(fr: &FrNet<T>, x: &Tensor<T>, x_recon: &Tensor<T>) -> Result<f64> {
    same_shape(x, x_recon)?;
    let a = fr.embed_tensor(x)?;
    let b = fr.embed_tensor(x_recon)?;
    Ok(angular_distance_rows(&Var::constant(a), &Var::constant(b))
        .mean()
        .item()
        .to_f64_lossy())
}

/// Mean angular distance between `φ(x_morph)` and per-sample targets.
pub fn fr_morph_alpha_loss<T: Float>(
    fr: &FrNet<T>,
    x_morph: &Tensor<T>,
    targets: &[Embedding],
) -> Result<f64> {
    let y = fr.embed_tensor(x_morph)?;
    let target = targets_tensor::<T>(targets, fr.config().fr_dim)?;
    if target.shape() != y.shape() {
        return Err(Error::Shape {
            expected: y.shape().to_vec(),
            got: target.shape().to_vec(),
        });
    }
    Ok(angular_distance_rows(&Var::constant(y), &Var::constant(target))
        .mean()
        .item()
        .to_f64_lossy())
}

/// Stacks unit targets into `[n, dim]`.
pub fn targets_tensor<T: Float>(targets: &[Embedding], dim: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(targets.len() * dim);
    for t in targets {
        if t.dim() != dim {
            return Err(Error::DimensionMismatch(dim, t.dim()));
        }
        if !t.is_normalized() {
            return Err(Error::InvalidEmbedding("target must be unit-normalized".into()));
        }
        data.extend(t.values().iter().map(|&v| T::of(v)));
    }
    Ok(Tensor::new(&[targets.len(), dim], data))
}

/// Scalar values of the generator objective's terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneratorTerms {
    pub adversarial: f64,
    /// Pixel, FFL, FR, FR-morph, FR-morph-alpha.
    pub finetune: [f64; 5],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: Vec<(String, f64)>,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// `adversarial + Σ γᵢ·termᵢ`; the adversarial term has weight 1.
pub fn combined_generator_loss(terms: &GeneratorTerms, w: &LossWeights) -> Result<LossReport> {
    w.validate()?;
    let mut all = vec![terms.adversarial];
    all.extend_from_slice(&terms.finetune);
    finite("generator terms", &all)?;
    let mut report = vec![("adversarial".to_string(), terms.adversarial)];
    let mut total = terms.adversarial;
    for ((name, v), g) in TERM_NAMES.iter().zip(terms.finetune).zip(w.gamma) {
        report.push((name.to_string(), v));
        total += g * v;
    }
    Ok(LossReport {
        terms: report,
        total,
    })
}
