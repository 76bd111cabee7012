//! Synthetic identities, on-disk datasets, morph protocols and colour
//! correction.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::fr::FrBackend;
use crate::geometry::{cosine, Embedding};
use crate::imaging::Image;
use crate::{Error, Result};

/// Procedural parameters of one synthetic identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticIdentitySpec {
    pub seed: u64,
    pub skin: [f32; 3],
    pub hair: [f32; 3],
    pub iris: [f32; 3],
    pub lips: [f32; 3],
    /// Face centre and radii, in unit image coordinates.
    pub face: [f32; 4],
    /// Fraction of the face height covered by hair.
    pub hair_cover: f32,
    pub eye_y: f32,
    pub eye_spacing: f32,
    pub eye_radius: f32,
    pub brow_tilt: f32,
    pub nose_length: f32,
    pub mouth_y: f32,
    pub mouth_width: f32,
    pub mouth_height: f32,
}

impl SyntheticIdentitySpec {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |lo: f32, hi: f32| rng.gen_range(lo..hi);
        let tone = u(0.3, 0.92);
        let skin = [tone, tone * u(0.68, 0.86), tone * u(0.5, 0.75)];
        Self {
            seed,
            skin,
            hair: [u(0.02, 0.7), u(0.02, 0.55), u(0.02, 0.45)],
            iris: [u(0.05, 0.6), u(0.05, 0.6), u(0.05, 0.7)],
            lips: [u(0.5, 0.9), u(0.15, 0.45), u(0.2, 0.45)],
            face: [u(0.44, 0.56), u(0.5, 0.6), u(0.24, 0.36), u(0.3, 0.42)],
            hair_cover: u(0.15, 0.65),
            eye_y: u(-0.14, -0.03),
            eye_spacing: u(0.09, 0.17),
            eye_radius: u(0.035, 0.07),
            brow_tilt: u(-0.35, 0.35),
            nose_length: u(0.04, 0.13),
            mouth_y: u(0.12, 0.24),
            mouth_width: u(0.05, 0.15),
            mouth_height: u(0.015, 0.05),
        }
    }
}

/// Per-sample nuisance parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub dx: f32,
    pub dy: f32,
    pub scale: f32,
    pub brightness: f32,
    pub background: [f32; 3],
    pub noise_seed: u64,
}

impl Jitter {
    pub fn none() -> Self {
        Self {
            dx: 0.0,
            dy: 0.0,
            scale: 1.0,
            brightness: 0.0,
            background: [0.5; 3],
            noise_seed: 0,
        }
    }

    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let g = rng.gen_range(0.15..0.85);
        Self {
            dx: rng.gen_range(-0.035..0.035),
            dy: rng.gen_range(-0.035..0.035),
            scale: rng.gen_range(0.94..1.06),
            brightness: rng.gen_range(-0.06..0.06),
            background: [
                g + rng.gen_range(-0.05..0.05),
                g + rng.gen_range(-0.05..0.05),
                g + rng.gen_range(-0.05..0.05),
            ],
            noise_seed: rng.gen(),
        }
    }
}

const NOISE_STD: f32 = 0.015;
const SUPERSAMPLE: usize = 3;

fn inside_ellipse(u: f32, v: f32, cx: f32, cy: f32, rx: f32, ry: f32) -> bool {
    let (a, b) = ((u - cx) / rx, (v - cy) / ry);
    a * a + b * b <= 1.0
}

fn shade(s: &SyntheticIdentitySpec, bg: [f32; 3], u: f32, v: f32) -> [f32; 3] {
    let [cx, cy, rx, ry] = s.face;
    let hair_line = cy - ry + 2.0 * ry * s.hair_cover * 0.5;
    if inside_ellipse(u, v, cx, cy - 0.02, rx * 1.1, ry * 1.06) && v < hair_line {
        return s.hair;
    }
    if !inside_ellipse(u, v, cx, cy, rx, ry) {
        return bg;
    }
    let ey = cy + s.eye_y;
    for side in [-1.0f32, 1.0] {
        let ex = cx + side * s.eye_spacing;
        if inside_ellipse(u, v, ex, ey, s.eye_radius, s.eye_radius * 0.7) {
            return if inside_ellipse(u, v, ex, ey, s.eye_radius * 0.5, s.eye_radius * 0.5) {
                s.iris
            } else {
                [0.95, 0.95, 0.95]
            };
        }
        let by = ey - s.eye_radius * 1.6 + side * s.brow_tilt * (u - ex);
        if (u - ex).abs() < s.eye_radius * 1.3 && (v - by).abs() < 0.018 {
            return s.hair;
        }
    }
    if (u - cx).abs() < 0.022 && v > ey + 0.02 && v < ey + 0.02 + s.nose_length {
        return [s.skin[0] * 0.8, s.skin[1] * 0.8, s.skin[2] * 0.8];
    }
    if inside_ellipse(u, v, cx, cy + s.mouth_y, s.mouth_width, s.mouth_height) {
        return s.lips;
    }
    s.skin
}

/// Renders one sample, quantized to 8 bits so in-memory and on-disk images agree.
pub fn render(spec: &SyntheticIdentitySpec, jitter: &Jitter, size: usize) -> Image {
    let mut noise_rng = ChaCha8Rng::seed_from_u64(jitter.noise_seed);
    let noise = Normal::new(0.0f32, NOISE_STD).unwrap();
    let mut data = Vec::with_capacity(size * size * 3);
    let ss = SUPERSAMPLE as f32;
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0f32; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = (x as f32 + (sx as f32 + 0.5) / ss) / size as f32;
                    let v = (y as f32 + (sy as f32 + 0.5) / ss) / size as f32;
                    let u = (u - 0.5 - jitter.dx) / jitter.scale + 0.5;
                    let v = (v - 0.5 - jitter.dy) / jitter.scale + 0.5;
                    let c = shade(spec, jitter.background, u, v);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for a in acc {
                let v = a / (ss * ss) + jitter.brightness + noise.sample(&mut noise_rng);
                data.push(quantize(v));
            }
        }
    }
    Image::new(size, 3, data).expect("rendered image has consistent shape")
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub identity: usize,
    pub index: usize,
    pub image: Image,
}

impl Sample {
    /// `identity/sample`, also the relative path stem on disk.
    pub fn key(&self, identities: &[String]) -> String {
        format!("{}/{}", identities[self.identity], self.index)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub size: usize,
    pub identities: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.identity).collect()
    }

    pub fn images(&self) -> Vec<&Image> {
        self.samples.iter().map(|s| &s.image).collect()
    }

    /// Indices of the samples of each identity.
    pub fn by_identity(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.identities.len()];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.identity].push(i);
        }
        out
    }

    pub fn find(&self, key: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.key(&self.identities) == key)
    }

    /// Keeps only the listed identities, relabelled densely in the given order.
    pub fn subset(&self, identities: &[usize]) -> Dataset {
        let mut samples = Vec::new();
        for (new, &old) in identities.iter().enumerate() {
            for s in self.samples.iter().filter(|s| s.identity == old) {
                samples.push(Sample {
                    identity: new,
                    ..s.clone()
                });
            }
        }
        Dataset {
            size: self.size,
            identities: identities.iter().map(|&i| self.identities[i].clone()).collect(),
            samples,
        }
    }

    /// Writes `images/{identity}/{sample}.png` and `labels.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut labels = String::from("path,identity,sample\n");
        for s in &self.samples {
            let rel = format!("images/{}.png", s.key(&self.identities));
            let path = dir.join(&rel);
            fs::create_dir_all(path.parent().expect("image path has a parent"))?;
            s.image.save_png(&path)?;
            labels.push_str(&format!("{rel},{},{}\n", self.identities[s.identity], s.index));
        }
        fs::write(dir.join("labels.csv"), labels)?;
        Ok(())
    }

    /// Reads a dataset written by [`Dataset::save`] or laid out the same way,
    /// resizing images to `size`.
    pub fn load(dir: &Path, size: usize) -> Result<Self> {
        let text = fs::read_to_string(dir.join("labels.csv"))?;
        let mut identities: Vec<String> = Vec::new();
        let mut samples = Vec::new();
        for (line_no, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::InvalidArgument(format!(
                    "labels.csv line {}: expected path,identity,sample",
                    line_no + 1
                )));
            }
            let identity = match identities.iter().position(|i| i == cols[1]) {
                Some(i) => i,
                None => {
                    identities.push(cols[1].to_string());
                    identities.len() - 1
                }
            };
            let index = cols[2].parse().map_err(|_| {
                Error::InvalidArgument(format!("labels.csv line {}: bad sample index", line_no + 1))
            })?;
            samples.push(Sample {
                identity,
                index,
                image: Image::load_png(&dir.join(cols[0]), size)?,
            });
        }
        if samples.is_empty() {
            return Err(Error::Empty("dataset".into()));
        }
        Ok(Self {
            size,
            identities,
            samples,
        })
    }
}

/// Per-identity parameter seeds are drawn from a stream keyed by `seed`.
pub fn generate_synthetic_dataset(
    n_identities: usize,
    samples_per_identity: usize,
    size: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_identities < 10 {
        return Err(Error::config("n_identities", "need at least 10 identities"));
    }
    if samples_per_identity == 0 {
        return Err(Error::config("samples_per_identity", "must be positive"));
    }
    if size < 8 {
        return Err(Error::config("image_size", "must be at least 8"));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_identities * samples_per_identity);
    for id in 0..n_identities {
        let spec = SyntheticIdentitySpec::from_seed(master.gen());
        let mut rng = ChaCha8Rng::seed_from_u64(master.gen());
        for index in 0..samples_per_identity {
            let jitter = Jitter::sample(&mut rng);
            samples.push(Sample {
                identity: id,
                index,
                image: render(&spec, &jitter, size),
            });
        }
    }
    Ok(Dataset {
        size,
        identities: (0..n_identities).map(|i| format!("id{i:04}")).collect(),
        samples,
    })
}

/// One morph job: two source images and a disjoint probe per identity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolEntry {
    pub pair_id: String,
    pub identity1: String,
    pub identity2: String,
    pub image1: String,
    pub image2: String,
    pub probe1: String,
    pub probe2: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MorphProtocol {
    pub entries: Vec<ProtocolEntry>,
}

impl MorphProtocol {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = BufReader::new(fs::File::open(path)?);
        let mut entries = Vec::new();
        for line in f.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { entries })
    }
}

/// Images referenced by one protocol entry.
#[derive(Clone, Copy, Debug)]
pub struct ResolvedPair<'a> {
    pub image1: &'a Image,
    pub image2: &'a Image,
    pub probe1: &'a Image,
    pub probe2: &'a Image,
}

impl MorphProtocol {
    pub fn pair_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.pair_id.clone()).collect()
    }

    /// Looks up every referenced sample in `ds`.
    pub fn resolve<'a>(&self, ds: &'a Dataset) -> Result<Vec<ResolvedPair<'a>>> {
        let get = |key: &str| {
            ds.find(key)
                .map(|s| &s.image)
                .ok_or_else(|| Error::InvalidArgument(format!("protocol references unknown sample `{key}`")))
        };
        self.entries
            .iter()
            .map(|e| {
                Ok(ResolvedPair {
                    image1: get(&e.image1)?,
                    image2: get(&e.image2)?,
                    probe1: get(&e.probe1)?,
                    probe2: get(&e.probe2)?,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairSelectionConfig {
    pub n_pairs: usize,
    /// Number of most similar identity pairs kept; defaults to the top 10%.
    pub identity_pairs: Option<usize>,
    /// Fraction of each identity's samples reserved as probes.
    pub probe_fraction: f64,
    pub seed: u64,
}

impl Default for PairSelectionConfig {
    fn default() -> Self {
        Self {
            n_pairs: 100,
            identity_pairs: None,
            probe_fraction: 0.5,
            seed: 0,
        }
    }
}

/// Normalized average of each identity's embeddings.
pub fn mean_embeddings(embeddings: &[Embedding], labels: &[usize], n_identities: usize) -> Result<Vec<Embedding>> {
    let dim = embeddings.first().ok_or_else(|| Error::Empty("embeddings".into()))?.dim();
    let mut sums = vec![vec![0.0; dim]; n_identities];
    for (e, &l) in embeddings.iter().zip(labels) {
        for (s, v) in sums[l].iter_mut().zip(e.values()) {
            *s += v;
        }
    }
    sums.into_iter().map(Embedding::unit).collect()
}

/// All identity pairs `(i, j, cosine)` with `i < j`, most similar first.
pub fn rank_identity_pairs(means: &[Embedding]) -> Result<Vec<(usize, usize, f64)>> {
    let mut pairs = Vec::new();
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            pairs.push((i, j, cosine(&means[i], &means[j])?));
        }
    }
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    Ok(pairs)
}

/// Splits each identity's samples into (sources, probes) with a fixed seed.
pub fn split_sources_probes(ds: &Dataset, probe_fraction: f64, seed: u64) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ds.by_identity()
        .into_iter()
        .map(|mut idx| {
            idx.shuffle(&mut rng);
            let n_probe = ((idx.len() as f64 * probe_fraction).round() as usize).clamp(1, idx.len().saturating_sub(1).max(1));
            let probes = idx.split_off(idx.len() - n_probe);
            (idx, probes)
        })
        .collect()
}

/// Ranks identities by mean-embedding similarity under `fr` and samples
/// image pairs from the most similar identity pairs.
pub fn select_pairs(ds: &Dataset, fr: &FrBackend, cfg: &PairSelectionConfig) -> Result<MorphProtocol> {
    if cfg.n_pairs == 0 {
        return Ok(MorphProtocol::default());
    }
    let n_ids = ds.identities.len();
    if n_ids < 2 {
        return Err(Error::InvalidArgument("need at least two identities".into()));
    }
    if !(cfg.probe_fraction > 0.0 && cfg.probe_fraction < 1.0) {
        return Err(Error::config("probe_fraction", "must lie in (0, 1)"));
    }
    let embeddings = fr.embed_images(&ds.images())?;
    let means = mean_embeddings(&embeddings, &ds.labels(), n_ids)?;
    let ranked = rank_identity_pairs(&means)?;
    let keep = cfg
        .identity_pairs
        .unwrap_or_else(|| ((ranked.len() as f64 * 0.1).ceil() as usize).max(1));
    if keep == 0 || keep > ranked.len() {
        return Err(Error::InvalidArgument(format!(
            "requested {keep} identity pairs but only {} exist",
            ranked.len()
        )));
    }
    let split = split_sources_probes(ds, cfg.probe_fraction, cfg.seed);
    if split.iter().any(|(s, p)| s.is_empty() || p.is_empty()) {
        return Err(Error::InvalidArgument(
            "every identity needs at least two samples to separate sources and probes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let key = |i: usize| ds.samples[i].key(&ds.identities);
    let entries = (0..cfg.n_pairs)
        .map(|p| {
            let (a, b, _) = ranked[p % keep];
            let pick = |v: &[usize], rng: &mut ChaCha8Rng| v[rng.gen_range(0..v.len())];
            ProtocolEntry {
                pair_id: format!("pair{p:05}"),
                identity1: ds.identities[a].clone(),
                identity2: ds.identities[b].clone(),
                image1: key(pick(&split[a].0, &mut rng)),
                image2: key(pick(&split[b].0, &mut rng)),
                probe1: key(pick(&split[a].1, &mut rng)),
                probe2: key(pick(&split[b].1, &mut rng)),
            }
        })
        .collect();
    Ok(MorphProtocol { entries })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStat {
    pub mean: f64,
    pub std: f64,
}

/// Per-channel statistics keyed by channel index.
pub type ReferenceStats = BTreeMap<String, ChannelStat>;

pub const COLOUR_EPS: f64 = 1e-6;

pub fn channel_stats(images: &[&Image]) -> Result<ReferenceStats> {
    let first = images.first().ok_or_else(|| Error::Empty("images".into()))?;
    let ch = first.channels;
    let mut out = ReferenceStats::new();
    for c in 0..ch {
        let vals: Vec<f64> = images
            .iter()
            .flat_map(|im| im.data.iter().skip(c).step_by(ch).map(|&v| v as f64))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        out.insert(c.to_string(), ChannelStat { mean, std: var.sqrt() });
    }
    Ok(out)
}

/// Matches each channel's mean and standard deviation to `reference`.
pub fn colour_correct(x: &Image, reference: &ReferenceStats) -> Result<Image> {
    let src = channel_stats(&[x])?;
    let mut data = x.data.clone();
    for c in 0..x.channels {
        let key = c.to_string();
        let r = reference
            .get(&key)
            .ok_or_else(|| Error::config(format!("reference_stats.{key}"), "missing channel"))?;
        let s = src[&key];
        for v in data.iter_mut().skip(c).step_by(x.channels) {
            let out = (*v as f64 - s.mean) / s.std.max(COLOUR_EPS) * r.std + r.mean;
            *v = out.clamp(0.0, 1.0) as f32;
        }
    }
    Image::new(x.size, x.channels, data)
}
