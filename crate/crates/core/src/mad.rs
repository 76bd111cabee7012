//! Morphing attack detection: LBP texture features with a linear SVM, and
//! differential detection on FR embedding differences.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fr::FrBackend;
use crate::imaging::Image;
use crate::{Error, Result};

/// Tag stored with every classifier so codes are never mixed across conventions.
pub const TIE_CONVENTION: &str = "neighbor>=center";

/// Neighbour offsets `(dy, dx)`, clockwise from the top-left; offset `k` sets bit `k`.
pub const NEIGHBOURS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbpConfig {
    /// Cells per side.
    pub grid: usize,
    /// 59-bin uniform histograms instead of 256 bins.
    pub uniform: bool,
}

impl Default for LbpConfig {
    fn default() -> Self {
        Self {
            grid: 4,
            uniform: false,
        }
    }
}

impl LbpConfig {
    pub fn bins(&self) -> usize {
        if self.uniform {
            59
        } else {
            256
        }
    }

    pub fn feature_len(&self) -> usize {
        self.grid * self.grid * self.bins()
    }
}

/// Code of the pixel at `(y, x)`; the pixel must not lie on the border.
pub fn lbp_code(gray: &[f32], size: usize, y: usize, x: usize) -> u8 {
    let c = gray[y * size + x];
    let mut code = 0u8;
    for (bit, (dy, dx)) in NEIGHBOURS.iter().enumerate() {
        let n = gray[(y as isize + dy) as usize * size + (x as isize + dx) as usize];
        if n >= c {
            code |= 1 << bit;
        }
    }
    code
}

fn transitions(code: u8) -> u32 {
    (code ^ code.rotate_right(1)).count_ones()
}

/// Uniform-pattern bin: 58 patterns with at most two transitions, then one
/// shared bin for the rest.
pub fn uniform_bin(code: u8) -> usize {
    if transitions(code) > 2 {
        return 58;
    }
    (0..code).filter(|&c| transitions(c) <= 2).count()
}

/// Concatenated per-cell histograms over the interior (non-border) pixels.
pub fn lbp_features(gray: &[f32], size: usize, cfg: &LbpConfig) -> Result<Vec<f64>> {
    if gray.len() != size * size {
        return Err(Error::Shape {
            expected: vec![size, size],
            got: vec![gray.len()],
        });
    }
    if cfg.grid == 0 || size < 2 || (size - 2) / cfg.grid < 3 {
        return Err(Error::InvalidArgument(format!(
            "{size}x{size} image gives cells smaller than 3x3 for a {g}x{g} grid",
            g = cfg.grid
        )));
    }
    let inner = size - 2;
    let bins = cfg.bins();
    let mut hist = vec![0.0; cfg.feature_len()];
    for y in 1..size - 1 {
        for x in 1..size - 1 {
            let code = lbp_code(gray, size, y, x);
            let cy = (y - 1) * cfg.grid / inner;
            let cx = (x - 1) * cfg.grid / inner;
            let bin = if cfg.uniform { uniform_bin(code) } else { code as usize };
            hist[(cy * cfg.grid + cx) * bins + bin] += 1.0;
        }
    }
    Ok(hist)
}

pub fn lbp_image_features(image: &Image, cfg: &LbpConfig) -> Result<Vec<f64>> {
    lbp_features(&image.to_gray(), image.size, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    pub lambda: f64,
    pub iterations: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            iterations: 1000,
        }
    }
}

/// Linear max-margin classifier over standardized features; positive scores
/// lean towards the attack class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub lbp: Option<LbpConfig>,
    pub convention: String,
}

impl LinearSvm {
    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::DimensionMismatch(self.weights.len(), x.len()));
        }
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .zip(&self.weights)
            .map(|(((v, m), s), w)| (v - m) / s * w)
            .sum::<f64>()
            + self.bias)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Full-batch Pegasos on the hinge loss with L2 regularization; the bias is
/// an extra constant feature. The returned weights average the second half of
/// the iterates. Deterministic for a given input.
pub fn train_linear_svm(features: &[Vec<f64>], attack: &[bool], cfg: &SvmConfig) -> Result<LinearSvm> {
    if features.len() != attack.len() {
        return Err(Error::DimensionMismatch(features.len(), attack.len()));
    }
    if !attack.iter().any(|&a| a) || !attack.iter().any(|&a| !a) {
        return Err(Error::InvalidArgument("training set needs both classes".into()));
    }
    if !(cfg.lambda > 0.0) || cfg.iterations == 0 {
        return Err(Error::config("svm", "lambda and iterations must be positive"));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::InvalidArgument("feature vectors differ in length".into()));
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; d];
    for f in features {
        for ((s, v), m) in scale.iter_mut().zip(f).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    for s in &mut scale {
        *s = if *s > 1e-12 { s.sqrt() } else { 1.0 };
    }
    let xs: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            let mut x: Vec<f64> = f.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect();
            x.push(1.0);
            x
        })
        .collect();
    let ys: Vec<f64> = attack.iter().map(|&a| if a { 1.0 } else { -1.0 }).collect();

    let lambda = cfg.lambda;
    let radius = 1.0 / lambda.sqrt();
    let mut w = vec![0.0; d + 1];
    let mut avg = vec![0.0; d + 1];
    let start = cfg.iterations / 2;
    let mut step_sum = vec![0.0; d + 1];
    for t in 1..=cfg.iterations {
        let eta = 1.0 / (lambda * t as f64);
        step_sum.iter_mut().for_each(|s| *s = 0.0);
        for (x, &y) in xs.iter().zip(&ys) {
            let margin = y * dot(&w, x);
            if margin < 1.0 {
                for (s, v) in step_sum.iter_mut().zip(x) {
                    *s += y * v;
                }
            }
        }
        for (wi, s) in w.iter_mut().zip(&step_sum) {
            *wi = (1.0 - eta * lambda) * *wi + eta * s / n;
        }
        let norm = dot(&w, &w).sqrt();
        if norm > radius {
            w.iter_mut().for_each(|v| *v *= radius / norm);
        }
        if t > start {
            for (a, v) in avg.iter_mut().zip(&w) {
                *a += v / (cfg.iterations - start) as f64;
            }
        }
    }
    let bias = avg.pop().expect("bias feature present");
    Ok(LinearSvm {
        weights: avg,
        bias,
        mean,
        scale,
        lbp: None,
        convention: TIE_CONVENTION.into(),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trains the texture detector on images labelled attack / bona fide.
pub fn smad_train(images: &[&Image], attack: &[bool], lbp: &LbpConfig, svm: &SvmConfig) -> Result<LinearSvm> {
    let feats = images
        .iter()
        .map(|im| lbp_image_features(im, lbp))
        .collect::<Result<Vec<_>>>()?;
    let mut clf = train_linear_svm(&feats, attack, svm)?;
    clf.lbp = Some(*lbp);
    Ok(clf)
}

/// `φ(suspect) − φ(probe)`.
pub fn dmad_features(fr: &FrBackend, suspect: &Image, probe: &Image) -> Result<Vec<f64>> {
    let e = fr.embed_images(&[suspect, probe])?;
    Ok(e[0].values().iter().zip(e[1].values()).map(|(a, b)| a - b).collect())
}

/// Classifier input for D-MAD: the difference and its elementwise square, so a
/// linear rule can respond to the difference magnitude.
pub fn dmad_classifier_input(diff: &[f64]) -> Vec<f64> {
    diff.iter().copied().chain(diff.iter().map(|v| v * v)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub score: f64,
    pub attack: bool,
}

/// Splits labelled scores into (bona fide, attack) lists.
pub fn split_scores(scores: &[LabeledScore]) -> (Vec<f64>, Vec<f64>) {
    let bona = scores.iter().filter(|s| !s.attack).map(|s| s.score).collect();
    let attack = scores.iter().filter(|s| s.attack).map(|s| s.score).collect();
    (bona, attack)
}

pub fn mad_evaluate(clf: &LinearSvm, features: &[Vec<f64>], attack: &[bool]) -> Result<Vec<LabeledScore>> {
    if features.is_empty() {
        return Err(Error::Empty("MAD test set".into()));
    }
    if features.len() != attack.len() {
        return Err(Error::DimensionMismatch(features.len(), attack.len()));
    }
    features
        .iter()
        .zip(attack)
        .map(|(f, &a)| {
            Ok(LabeledScore {
                score: clf.decision(f)?,
                attack: a,
            })
        })
        .collect()
}

/// S-MAD scores for images using the classifier's own LBP settings.
pub fn smad_evaluate(clf: &LinearSvm, images: &[&Image], attack: &[bool]) -> Result<Vec<LabeledScore>> {
    let lbp = clf
        .lbp
        .ok_or_else(|| Error::InvalidArgument("classifier has no LBP configuration".into()))?;
    let feats = images
        .iter()
        .map(|im| lbp_image_features(im, &lbp))
        .collect::<Result<Vec<_>>>()?;
    mad_evaluate(clf, &feats, attack)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_codes_are_all_ones() {
        let cfg = LbpConfig::default();
        let f = lbp_features(&[0.4; 16 * 16], 16, &cfg).unwrap();
        assert_eq!(f.len(), 4096);
        for cell in f.chunks(256) {
            assert!(cell[255] > 0.0);
            assert_eq!(cell.iter().sum::<f64>(), cell[255]);
        }
        assert_eq!(f.iter().sum::<f64>(), 14.0 * 14.0);
    }

    #[test]
    fn hand_evaluated_code() {
        // Neighbours 1..4, 6..9 clockwise from the top-left around centre 5;
        // only 6, 7, 8, 9 (bits 4..7) are >= 5.
        #[rustfmt::skip]
        let g = [
            1.0, 2.0, 3.0,
            9.0, 5.0, 4.0,
            8.0, 7.0, 6.0,
        ];
        assert_eq!(lbp_code(&g, 3, 1, 1), 0b1111_0000);
    }

    #[test]
    fn rejects_tiny_cells() {
        assert!(lbp_features(&[0.0; 64], 8, &LbpConfig::default()).is_err());
        assert!(lbp_features(&[0.0; 64], 8, &LbpConfig { grid: 2, uniform: false }).is_ok());
    }

    #[test]
    fn uniform_bins_cover_58_patterns() {
        let mut seen: Vec<usize> = (0..=255u8).map(uniform_bin).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 59);
        assert_eq!(uniform_bin(0), 0);
        assert_eq!(uniform_bin(0b0101_0101), 58);
    }

    fn toy() -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut f = Vec::new();
        let mut y = Vec::new();
        for i in 0..20 {
            let v = i as f64 / 10.0;
            f.push(vec![1.0 + v, v * 0.5 - 1.0]);
            y.push(true);
            f.push(vec![-1.0 - v, 0.3 * v]);
            y.push(false);
        }
        (f, y)
    }

    #[test]
    fn separable_training_error_is_zero() {
        let (f, y) = toy();
        let clf = train_linear_svm(&f, &y, &SvmConfig::default()).unwrap();
        for (x, &a) in f.iter().zip(&y) {
            assert_eq!(clf.decision(x).unwrap() > 0.0, a);
        }
    }

    #[test]
    fn label_flip_negates_scores() {
        let (f, y) = toy();
        let flipped: Vec<bool> = y.iter().map(|a| !a).collect();
        let a = train_linear_svm(&f, &y, &SvmConfig::default()).unwrap();
        let b = train_linear_svm(&f, &flipped, &SvmConfig::default()).unwrap();
        for x in &f {
            assert!((a.decision(x).unwrap() + b.decision(x).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicated_training_set_gives_same_classifier() {
        let (f, y) = toy();
        let a = train_linear_svm(&f, &y, &SvmConfig::default()).unwrap();
        let f2: Vec<Vec<f64>> = f.iter().chain(&f).cloned().collect();
        let y2: Vec<bool> = y.iter().chain(&y).copied().collect();
        let b = train_linear_svm(&f2, &y2, &SvmConfig::default()).unwrap();
        for (u, v) in a.weights.iter().zip(&b.weights) {
            assert!((u - v).abs() < 1e-6);
        }
        assert!((a.bias - b.bias).abs() < 1e-6);
    }

    #[test]
    fn single_class_and_empty_errors() {
        let (f, _) = toy();
        assert!(train_linear_svm(&f, &vec![true; f.len()], &SvmConfig::default()).is_err());
        let (f, y) = toy();
        let clf = train_linear_svm(&f, &y, &SvmConfig::default()).unwrap();
        assert!(matches!(mad_evaluate(&clf, &[], &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn classifier_json_round_trip() {
        let (f, y) = toy();
        let clf = train_linear_svm(&f, &y, &SvmConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clf.json");
        clf.save(&p).unwrap();
        assert_eq!(LinearSvm::load(&p).unwrap(), clf);
    }
}
