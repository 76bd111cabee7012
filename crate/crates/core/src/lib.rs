//! Worst-case morph generation and evaluation.
//!
//! A Wasserstein bidirectional GAN (encoder, decoder, joint critic) is trained
//! with gradient penalties, finetuned with identity-preserving and
//! worst-case-morph losses, and then used to optimize latent codes so that
//! decoded morphs approach the worst-case embedding of two identities.
//! Morphs are scored with MMPMR, compared against the worst-case upper
//! bound, and screened by two morphing-attack detectors.

pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod fr;
pub mod geometry;
pub mod imaging;
pub mod latent;
pub mod losses;
pub mod mad;
pub mod manifest;
pub mod nets;
pub mod optim;
pub mod training;

pub use error::{Error, Result};
pub use wali_autograd as autograd;
