//! Encoder, decoder, critic and toy face-recognition networks.
//!
//! Activations between convolutions are stored as `[n·h·w, channels]`
//! matrices so that a 3×3 convolution is a gather followed by one matmul.
//! Image batches are `[n, size·size·channels]` tensors in the same
//! row-major HWC order.

mod checkpoint;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wali_autograd::{no_grad, Float, Tensor, Var};

pub use checkpoint::Checkpoint;
use layers::{upsample2, Conv3, Dense, Geom};

use crate::error::{Error, Result};
use crate::geometry::Embedding;

/// Lower bound added to the softplus that produces encoder `sigma`.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "slope")]
pub enum Activation {
    LeakyRelu(f64),
    Tanh,
    Softplus,
}

impl Activation {
    pub fn apply<T: Float>(self, x: &Var<T>) -> Var<T> {
        match self {
            Activation::LeakyRelu(s) => x.leaky_relu(T::of(s)),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => x.softplus(),
        }
    }

    fn gain(self) -> f64 {
        match self {
            Activation::LeakyRelu(s) => (2.0 / (1.0 + s * s)).sqrt(),
            Activation::Tanh => 5.0 / 3.0,
            Activation::Softplus => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub image_size: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub base_width: usize,
    /// Channel multiplier cap for deeper levels.
    pub max_width_mult: usize,
    /// Width of the dense layers after the convolutional trunks.
    pub hidden: usize,
    pub fr_dim: usize,
    pub activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            latent_dim: 128,
            base_width: 64,
            max_width_mult: 4,
            hidden: 256,
            fr_dim: 64,
            activation: Activation::LeakyRelu(0.2),
        }
    }
}

pub const IMAGE_SIZES: [usize; 7] = [8, 16, 32, 64, 128, 256, 512];

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !IMAGE_SIZES.contains(&self.image_size) {
            return Err(Error::config(
                "image_size",
                format!("{} not in {IMAGE_SIZES:?}", self.image_size),
            ));
        }
        for (field, v) in [
            ("channels", self.channels),
            ("latent_dim", self.latent_dim),
            ("base_width", self.base_width),
            ("max_width_mult", self.max_width_mult),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.fr_dim < 2 {
            return Err(Error::config("fr_dim", "must be at least 2"));
        }
        Ok(())
    }

    /// Number of stride-2 levels between the input resolution and 4×4.
    pub fn levels(&self) -> usize {
        self.image_size.trailing_zeros() as usize - 2
    }

    pub fn image_dim(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    fn width(&self, level: usize) -> usize {
        self.base_width * (1usize << level.min(16)).min(self.max_width_mult)
    }

    fn trunk_features(&self) -> usize {
        16 * self.width(self.levels())
    }
}

/// Named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Float> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Float> ParamStore<T> {
    pub(crate) fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Binds the parameters as graph leaves; `trainable` leaves accept gradients.
    pub fn vars(&self, trainable: bool) -> Vec<Var<T>> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    Var::param(t.clone())
                } else {
                    Var::constant(t.clone())
                }
            })
            .collect()
    }

    pub fn replace(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for (name, (old, new)) in self.names.iter().zip(self.tensors.iter().zip(&tensors)) {
            if old.shape() != new.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} != {:?}",
                    new.shape(),
                    old.shape()
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// SHA-256 over names, shapes and little-endian `f32` values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u32).to_le_bytes());
            }
            for v in t.data() {
                h.update((v.to_f64_lossy() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Anything that owns a [`ParamStore`].
pub trait Module<T: Float> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
}

/// A critic over joint `(image, latent)` pairs.
pub trait JointCritic<T: Float>: Module<T> {
    /// Scores `[n]` for images `[n, d_x]` and latents `[n, d_z]`.
    fn score_with(&self, p: &[Var<T>], x: &Var<T>, z: &Var<T>) -> Var<T>;
}

fn check_cols<T: Float>(t: &Tensor<T>, cols: usize) -> Result<usize> {
    match t.shape() {
        [n, c] if *c == cols => Ok(*n),
        got => Err(Error::Shape {
            expected: vec![0, cols],
            got: got.to_vec(),
        }),
    }
}

/// Full-resolution convolution followed by stride-2 convolutions down to 4×4.
#[derive(Clone, Debug)]
struct ConvTrunk {
    conv_in: Conv3,
    down: Vec<Conv3>,
    size: usize,
    channels: usize,
    act: Activation,
}

impl ConvTrunk {
    fn new<T: Float>(
        cfg: &NetworkConfig,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
    ) -> Self {
        let g = cfg.activation.gain();
        let conv_in = Conv3::new(store, rng, &format!("{name}.conv_in"), cfg.channels, cfg.width(0), 1, g);
        let down = (0..cfg.levels())
            .map(|i| {
                Conv3::new(
                    store,
                    rng,
                    &format!("{name}.down{i}"),
                    cfg.width(i),
                    cfg.width(i + 1),
                    2,
                    g,
                )
            })
            .collect();
        Self {
            conv_in,
            down,
            size: cfg.image_size,
            channels: cfg.channels,
            act: cfg.activation,
        }
    }

    fn forward<T: Float>(&self, p: &[Var<T>], x: &Var<T>) -> Var<T> {
        let n = x.shape()[0];
        let mut g = Geom {
            n,
            h: self.size,
            w: self.size,
        };
        let h = x.reshape(&[g.rows(), self.channels]);
        let (mut h, g2) = self.conv_in.forward(p, &h, g);
        h = self.act.apply(&h);
        g = g2;
        for conv in &self.down {
            let (h2, g2) = conv.forward(p, &h, g);
            h = self.act.apply(&h2);
            g = g2;
        }
        let features = h.len() / n;
        h.reshape(&[n, features])
    }
}

/// Per-sample encoder outputs, `[n, latent_dim]` each.
#[derive(Clone, Debug)]
pub struct EncoderOutput<T: Float> {
    pub mu: Tensor<T>,
    pub sigma: Tensor<T>,
}

/// Image → latent distribution `(mu, sigma)`.
#[derive(Clone, Debug)]
pub struct Encoder<T: Float> {
    cfg: NetworkConfig,
    params: ParamStore<T>,
    trunk: ConvTrunk,
    fc: Dense,
    head: Dense,
}

impl<T: Float> Encoder<T> {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let trunk = ConvTrunk::new(cfg, &mut params, &mut rng, "encoder");
        let g = cfg.activation.gain();
        let fc = Dense::new(&mut params, &mut rng, "encoder.fc", cfg.trunk_features(), cfg.hidden, g);
        let head = Dense::new(&mut params, &mut rng, "encoder.head", cfg.hidden, 2 * cfg.latent_dim, 1.0);
        Ok(Self {
            cfg: cfg.clone(),
            params,
            trunk,
            fc,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// `(mu, sigma)` for images `[n, image_dim]`; sigma is strictly positive.
    pub fn forward_with(&self, p: &[Var<T>], x: &Var<T>) -> (Var<T>, Var<T>) {
        let h = self.trunk.forward(p, x);
        let h = self.cfg.activation.apply(&self.fc.forward(p, &h));
        let out = self.head.forward(p, &h);
        let l = self.cfg.latent_dim;
        let mu = out.slice_cols(0, l);
        let sigma = out.slice_cols(l, 2 * l).softplus().add_scalar(T::of(SIGMA_FLOOR));
        (mu, sigma)
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<EncoderOutput<T>> {
        check_cols(x, self.cfg.image_dim())?;
        let _g = no_grad();
        let (mu, sigma) = self.forward_with(&self.params.vars(false), &Var::constant(x.clone()));
        Ok(EncoderOutput {
            mu: mu.value().clone(),
            sigma: sigma.value().clone(),
        })
    }

    pub fn cast<U: Float>(&self) -> Encoder<U> {
        Encoder {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            trunk: self.trunk.clone(),
            fc: self.fc.clone(),
            head: self.head.clone(),
        }
    }
}

/// `z = mu + sigma ⊙ eps`.
pub fn reparameterize<T: Float>(out: &EncoderOutput<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if eps.shape() != out.mu.shape() {
        return Err(Error::Shape {
            expected: out.mu.shape().to_vec(),
            got: eps.shape().to_vec(),
        });
    }
    let scaled = out.sigma.zip(eps, |s, e| s * e);
    Ok(out.mu.zip(&scaled, |m, s| m + s))
}

/// Latent → image in `[0, 1]`, by nearest upsampling and same-size convolutions.
#[derive(Clone, Debug)]
pub struct Decoder<T: Float> {
    cfg: NetworkConfig,
    params: ParamStore<T>,
    fc: Dense,
    up: Vec<Conv3>,
    conv_out: Conv3,
}

impl<T: Float> Decoder<T> {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let g = cfg.activation.gain();
        let l = cfg.levels();
        let fc = Dense::new(&mut params, &mut rng, "decoder.fc", cfg.latent_dim, cfg.trunk_features(), g);
        let up = (0..l)
            .rev()
            .map(|i| {
                Conv3::new(
                    &mut params,
                    &mut rng,
                    &format!("decoder.up{i}"),
                    cfg.width(i + 1),
                    cfg.width(i),
                    1,
                    g,
                )
            })
            .collect();
        let conv_out = Conv3::new(&mut params, &mut rng, "decoder.conv_out", cfg.width(0), cfg.channels, 1, 1.0);
        Ok(Self {
            cfg: cfg.clone(),
            params,
            fc,
            up,
            conv_out,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn forward_with(&self, p: &[Var<T>], z: &Var<T>) -> Var<T> {
        let n = z.shape()[0];
        let act = self.cfg.activation;
        let h = act.apply(&self.fc.forward(p, z));
        let mut g = Geom { n, h: 4, w: 4 };
        let mut h = h.reshape(&[g.rows(), self.cfg.width(self.cfg.levels())]);
        for conv in &self.up {
            let (u, g2) = upsample2(&h, g);
            let (c, g3) = conv.forward(p, &u, g2);
            h = act.apply(&c);
            g = g3;
        }
        let (out, _) = self.conv_out.forward(p, &h, g);
        out.sigmoid().reshape(&[n, self.cfg.image_dim()])
    }

    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        check_cols(z, self.cfg.latent_dim)?;
        let _g = no_grad();
        Ok(self
            .forward_with(&self.params.vars(false), &Var::constant(z.clone()))
            .value()
            .clone())
    }

    pub fn cast<U: Float>(&self) -> Decoder<U> {
        Decoder {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            fc: self.fc.clone(),
            up: self.up.clone(),
            conv_out: self.conv_out.clone(),
        }
    }
}

/// Unbounded score for joint `(image, latent)` pairs.
#[derive(Clone, Debug)]
pub struct Critic<T: Float> {
    cfg: NetworkConfig,
    params: ParamStore<T>,
    trunk: ConvTrunk,
    z_fc: Dense,
    joint: Dense,
    out: Dense,
}

impl<T: Float> Critic<T> {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let g = cfg.activation.gain();
        let trunk = ConvTrunk::new(cfg, &mut params, &mut rng, "critic");
        let z_fc = Dense::new(&mut params, &mut rng, "critic.z_fc", cfg.latent_dim, cfg.hidden, g);
        let joint = Dense::new(
            &mut params,
            &mut rng,
            "critic.joint",
            cfg.trunk_features() + cfg.hidden,
            cfg.hidden,
            g,
        );
        let out = Dense::new(&mut params, &mut rng, "critic.out", cfg.hidden, 1, 1.0);
        Ok(Self {
            cfg: cfg.clone(),
            params,
            trunk,
            z_fc,
            joint,
            out,
        })
    }

    /// Scores for a batch; no gradient tracking.
    pub fn critic_score(&self, x: &Tensor<T>, z: &Tensor<T>) -> Result<Vec<T>> {
        let n = check_cols(x, self.cfg.image_dim())?;
        let nz = check_cols(z, self.cfg.latent_dim)?;
        if n != nz {
            return Err(Error::Shape {
                expected: vec![n, self.cfg.latent_dim],
                got: z.shape().to_vec(),
            });
        }
        let _g = no_grad();
        let s = self.score_with(
            &self.params.vars(false),
            &Var::constant(x.clone()),
            &Var::constant(z.clone()),
        );
        Ok(s.data().to_vec())
    }

    pub fn cast<U: Float>(&self) -> Critic<U> {
        Critic {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            trunk: self.trunk.clone(),
            z_fc: self.z_fc.clone(),
            joint: self.joint.clone(),
            out: self.out.clone(),
        }
    }
}

impl<T: Float> JointCritic<T> for Critic<T> {
    fn score_with(&self, p: &[Var<T>], x: &Var<T>, z: &Var<T>) -> Var<T> {
        let act = self.cfg.activation;
        let n = x.shape()[0];
        let fx = self.trunk.forward(p, x);
        let fz = act.apply(&self.z_fc.forward(p, z));
        let h = act.apply(&self.joint.forward(p, &Var::concat_cols(&[fx, fz])));
        self.out.forward(p, &h).reshape(&[n])
    }
}

/// Three dense layers over `concat(x, z)`; a small critic for derivative checks.
#[derive(Clone, Debug)]
pub struct MlpCritic<T: Float> {
    params: ParamStore<T>,
    layers: [Dense; 3],
    act: Activation,
}

impl<T: Float> MlpCritic<T> {
    pub fn new(x_dim: usize, z_dim: usize, hidden: usize, act: Activation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let g = act.gain();
        let layers = [
            Dense::new(&mut params, &mut rng, "mlp.l0", x_dim + z_dim, hidden, g),
            Dense::new(&mut params, &mut rng, "mlp.l1", hidden, hidden, g),
            Dense::new(&mut params, &mut rng, "mlp.l2", hidden, 1, 1.0),
        ];
        Self { params, layers, act }
    }
}

impl<T: Float> JointCritic<T> for MlpCritic<T> {
    fn score_with(&self, p: &[Var<T>], x: &Var<T>, z: &Var<T>) -> Var<T> {
        let n = x.shape()[0];
        let mut h = Var::concat_cols(&[x.clone(), z.clone()]);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, &h);
            if i < 2 {
                h = self.act.apply(&h);
            }
        }
        h.reshape(&[n])
    }
}

/// Image → unit identity embedding.
#[derive(Clone, Debug)]
pub struct FrNet<T: Float> {
    cfg: NetworkConfig,
    params: ParamStore<T>,
    trunk: ConvTrunk,
    fc: Dense,
    head: Dense,
}

impl<T: Float> FrNet<T> {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let g = cfg.activation.gain();
        let trunk = ConvTrunk::new(cfg, &mut params, &mut rng, "fr");
        let fc = Dense::new(&mut params, &mut rng, "fr.fc", cfg.trunk_features(), cfg.hidden, g);
        let head = Dense::new(&mut params, &mut rng, "fr.head", cfg.hidden, cfg.fr_dim, 1.0);
        Ok(Self {
            cfg: cfg.clone(),
            params,
            trunk,
            fc,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Unit-norm embeddings `[n, fr_dim]`.
    pub fn forward_with(&self, p: &[Var<T>], x: &Var<T>) -> Var<T> {
        let h = self.trunk.forward(p, x);
        let h = self.cfg.activation.apply(&self.fc.forward(p, &h));
        self.head.forward(p, &h).l2_normalize_rows(T::of(1e-12))
    }

    pub fn embed_tensor(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_cols(x, self.cfg.image_dim())?;
        let _g = no_grad();
        Ok(self
            .forward_with(&self.params.vars(false), &Var::constant(x.clone()))
            .value()
            .clone())
    }

    /// One [`Embedding`] per image row.
    pub fn fr_embed(&self, x: &Tensor<T>) -> Result<Vec<Embedding>> {
        let e = self.embed_tensor(x)?;
        e.data()
            .chunks_exact(self.cfg.fr_dim)
            .map(|row| Embedding::unit(row.iter().map(|v| v.to_f64_lossy()).collect()))
            .collect()
    }

    pub fn cast<U: Float>(&self) -> FrNet<U> {
        FrNet {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            trunk: self.trunk.clone(),
            fc: self.fc.clone(),
            head: self.head.clone(),
        }
    }
}

macro_rules! impl_module {
    ($($ty:ident),*) => {$(
        impl<T: Float> Module<T> for $ty<T> {
            fn params(&self) -> &ParamStore<T> {
                &self.params
            }
            fn params_mut(&mut self) -> &mut ParamStore<T> {
                &mut self.params
            }
        }
    )*};
}

impl_module!(Encoder, Decoder, Critic, MlpCritic, FrNet);
