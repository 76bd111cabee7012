use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use wali_morph::datasets::{
    channel_stats, colour_correct, generate_synthetic_dataset, select_pairs, Dataset, MorphProtocol,
    PairSelectionConfig,
};
use wali_morph::evaluation::{
    bounds_csv, bpcer_at_apcer, det_csv, det_points, det_points_scores, equal_error_rate, mmpmr,
    mmpmr_report_csv, morph_score_table, probe_embeddings, worst_case_bound_table, MmpmrReportRow,
    MorphScoreTable,
};
use wali_morph::fr::{
    calibrate_threshold, score_set, train_toy_fr, FrBackend, FrRole, FrTrainConfig, Registry, RegistryEntry,
    ScoreSet,
};
use wali_morph::geometry::ScoreFunction;
use wali_morph::imaging::Image;
use wali_morph::latent::{generate_protocol_morphs, OptimizationConfig, WaliBackend};
use wali_morph::mad::{
    dmad_classifier_input, dmad_features, lbp_image_features, mad_evaluate, split_scores, train_linear_svm,
    LbpConfig, LinearSvm, SvmConfig,
};
use wali_morph::manifest::{write_timing, RunManifest};
use wali_morph::training::{save_run, save_snapshot, train_phase, LossLog, TrainingConfig, WaliModel};
use wali_morph::Error;

pub const DATASET_META: &str = "dataset.json";

/// Output directory plus the manifest being assembled for it.
pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    clock: Instant,
}

impl Run {
    pub fn new<T: Serialize>(dir: &Path, command: &str, cfg: &T, seed: u64) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest::new(command, cfg, seed)?,
            clock: Instant::now(),
        })
    }

    pub fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
        let path = self.dir.join(rel);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p)?;
        }
        fs::write(&path, contents)?;
        self.manifest.add_artifact(&self.dir, rel)?;
        Ok(())
    }

    pub fn finish(mut self) -> anyhow::Result<()> {
        if self.dir.join("config.json").exists() && !self.manifest.artifacts.contains_key("config.json") {
            self.manifest.add_artifact(&self.dir, "config.json")?;
        }
        self.manifest.write(&self.dir)?;
        write_timing(&self.dir, &self.manifest.command, self.clock.elapsed().as_secs_f64())?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    image_size: usize,
}

/// Loads a dataset directory; `identities` keeps the half-open identity range.
pub fn load_dataset(dir: &Path, identities: Option<[usize; 2]>) -> anyhow::Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_str(
        &fs::read_to_string(dir.join(DATASET_META))
            .with_context(|| format!("dataset {}: missing {DATASET_META}", dir.display()))?,
    )?;
    let ds = Dataset::load(dir, meta.image_size).with_context(|| format!("dataset {}", dir.display()))?;
    Ok(match identities {
        None => ds,
        Some([a, b]) => {
            if a >= b || b > ds.identities.len() {
                return Err(Error::config("identities", format!("range {a}..{b} outside 0..{}", ds.identities.len())).into());
            }
            ds.subset(&(a..b).collect::<Vec<_>>())
        }
    })
}

fn required<'a, T>(v: &'a Option<T>, field: &str) -> anyhow::Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::config(field, "is required").into())
}

fn load_registry(path: &Path) -> anyhow::Result<Registry> {
    Registry::load(path).with_context(|| format!("registry {}", path.display()))
}

fn registry_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_backends(registry: &Path, ids: &[String]) -> anyhow::Result<Vec<FrBackend>> {
    let reg = load_registry(registry)?;
    ids.iter()
        .map(|id| Ok(reg.backend(id, &registry_base(registry))?))
        .collect()
}

fn morph_rel(pair_id: &str) -> String {
    format!("morphs/{pair_id}.png")
}

// ---------------------------------------------------------------- synth-data

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub identities: usize,
    pub samples_per_identity: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            identities: 40,
            samples_per_identity: 10,
            image_size: 16,
            seed: 0,
        }
    }
}

pub fn synth_data(cfg: &SynthConfig, out: &Path) -> anyhow::Result<()> {
    let ds = generate_synthetic_dataset(cfg.identities, cfg.samples_per_identity, cfg.image_size, cfg.seed)?;
    let mut run = Run::new(out, "synth-data", cfg, cfg.seed)?;
    ds.save(out)?;
    run.manifest.add_artifact(out, "labels.csv")?;
    run.write(DATASET_META, serde_json::to_string(&DatasetMeta { image_size: cfg.image_size })?)?;
    run.manifest.note("samples", ds.len())?;
    println!("wrote {} images of {} identities to {}", ds.len(), ds.identities.len(), out.display());
    run.finish()
}

// ------------------------------------------------------------------ train-fr

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFrConfig {
    pub dataset: Option<PathBuf>,
    pub identities: Option<[usize; 2]>,
    pub id: String,
    pub role: FrRole,
    pub metric: ScoreFunction,
    /// Defaults to `registry.json` in the output directory.
    pub registry: Option<PathBuf>,
    pub fr: FrTrainConfig,
    pub seed: u64,
}

impl Default for TrainFrConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            identities: None,
            id: "fr-a".into(),
            role: FrRole::WhiteBox,
            metric: ScoreFunction::AngularDissimilarity,
            registry: None,
            fr: FrTrainConfig::default(),
            seed: 0,
        }
    }
}

pub fn train_fr(cfg: &TrainFrConfig, out: &Path) -> anyhow::Result<()> {
    let ds_dir = required(&cfg.dataset, "dataset")?;
    let ds = load_dataset(ds_dir, cfg.identities)?;
    let mut fr_cfg = cfg.fr.clone();
    fr_cfg.seed = cfg.seed;
    fr_cfg.network.image_size = ds.size;
    let mut run = Run::new(out, "train-fr", cfg, cfg.seed)?;
    run.manifest.add_input("dataset/labels.csv", &ds_dir.join("labels.csv"))?;
    let mut backend = train_toy_fr(&ds, &fr_cfg, &cfg.id, cfg.role)?;
    backend.metric = cfg.metric;
    let rel = format!("{}.bin", cfg.id);
    backend.checkpoint()?.save(&out.join(&rel))?;
    run.manifest.add_artifact(out, &rel)?;

    let reg_path = cfg.registry.clone().unwrap_or_else(|| out.join("registry.json"));
    let mut reg = if reg_path.exists() { load_registry(&reg_path)? } else { Registry::default() };
    reg.upsert(RegistryEntry {
        id: cfg.id.clone(),
        checkpoint: fs::canonicalize(out.join(&rel))?,
        metric: cfg.metric,
        threshold: None,
        role: cfg.role,
    });
    reg.save(&reg_path)?;
    run.manifest.note("registry", reg_path.display().to_string())?;
    println!("trained FR backend {} ({} identities)", cfg.id, ds.identities.len());
    run.finish()
}

// ----------------------------------------------------------------- calibrate

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    pub dataset: Option<PathBuf>,
    pub identities: Option<[usize; 2]>,
    pub registry: Option<PathBuf>,
    pub backend: Option<String>,
    pub fmr_bound: f64,
    pub max_impostor: usize,
    pub seed: u64,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            identities: None,
            registry: None,
            backend: None,
            fmr_bound: 1e-3,
            max_impostor: 20_000,
            seed: 0,
        }
    }
}

#[derive(Serialize)]
struct CalibrationReport<'a> {
    backend: &'a str,
    threshold: f64,
    fmr: f64,
    fnmr: f64,
    eer: f64,
    genuine: usize,
    impostor: usize,
}

pub fn calibrate(cfg: &CalibrateConfig, out: &Path) -> anyhow::Result<()> {
    if !(cfg.fmr_bound > 0.0 && cfg.fmr_bound <= 1.0) {
        return Err(Error::config("fmr_bound", "must lie in (0, 1]").into());
    }
    let ds_dir = required(&cfg.dataset, "dataset")?;
    let reg_path = required(&cfg.registry, "registry")?;
    let id = required(&cfg.backend, "backend")?;
    let ds = load_dataset(ds_dir, cfg.identities)?;
    let mut reg = load_registry(reg_path)?;
    let fr = reg.backend(id, &registry_base(reg_path))?;
    let mut run = Run::new(out, "calibrate", cfg, cfg.seed)?;
    run.manifest.add_input("dataset/labels.csv", &ds_dir.join("labels.csv"))?;

    let emb = fr.embed_images(&ds.images())?;
    let scores = score_set(&emb, &ds.labels(), fr.metric, cfg.max_impostor, cfg.seed)?;
    let cal = calibrate_threshold(&scores, cfg.fmr_bound)?;
    let report = CalibrationReport {
        backend: id,
        threshold: cal.threshold,
        fmr: cal.fmr,
        fnmr: cal.fnmr,
        eer: equal_error_rate(&scores)?,
        genuine: scores.genuine.len(),
        impostor: scores.impostor.len(),
    };
    run.write("scores.json", serde_json::to_string(&scores)?)?;
    run.write("calibration.json", serde_json::to_string_pretty(&report)?)?;
    run.write("det.csv", det_csv(&det_points_scores(&scores)?, ("fmr", "fnmr")))?;

    let mut entry = reg.get(id)?.clone();
    entry.threshold = Some(cal.threshold);
    reg.upsert(entry);
    reg.save(reg_path)?;
    println!(
        "{id}: threshold {:.6} (FMR {:.4}, FNMR {:.4})",
        cal.threshold, cal.fmr, cal.fnmr
    );
    run.finish()
}

// ------------------------------------------------------ train-wali / finetune

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainWaliConfig {
    pub dataset: Option<PathBuf>,
    pub identities: Option<[usize; 2]>,
    pub training: TrainingConfig,
    pub seed: u64,
}

fn train_or_snapshot(
    out: &Path,
    cfg: &TrainingConfig,
    start: WaliModel,
    ds: &Dataset,
    fr: Option<&FrBackend>,
    log: &mut LossLog,
) -> anyhow::Result<WaliModel> {
    train_phase(cfg, start, ds, fr.map(|f| &f.net), log).map_err(|f| {
        if let Err(e) = save_snapshot(out, &f, log) {
            log::error!("could not write divergence snapshot: {e}");
        }
        anyhow::Error::from(f.error)
    })
}

fn add_dataset_input(out: &Path, ds_dir: &Path) -> anyhow::Result<()> {
    let mut m = RunManifest::load(out)?;
    m.add_input("dataset/labels.csv", &ds_dir.join("labels.csv"))?;
    m.write(out)?;
    Ok(())
}

pub fn train_wali(cfg: &TrainWaliConfig, out: &Path) -> anyhow::Result<()> {
    let clock = Instant::now();
    let ds_dir = required(&cfg.dataset, "dataset")?;
    let ds = load_dataset(ds_dir, cfg.identities)?;
    let mut t = cfg.training.clone();
    t.seed = cfg.seed;
    t.baseline_only = true;
    t.network.image_size = ds.size;
    fs::create_dir_all(out)?;
    let mut log = LossLog::default();
    let start = WaliModel::new(&t.network, t.seed)?;
    let model = train_or_snapshot(out, &t, start, &ds, None, &mut log)?;
    save_run(out, "train-wali", &t, &log, &[("baseline", &model)], &[("baseline_only", true.into())])?;
    add_dataset_input(out, ds_dir)?;
    write_timing(out, "train-wali", clock.elapsed().as_secs_f64())?;
    println!("baseline checkpoint: {}", out.join("checkpoints/baseline.bin").display());
    Ok(())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub dataset: Option<PathBuf>,
    pub identities: Option<[usize; 2]>,
    pub baseline: Option<PathBuf>,
    pub registry: Option<PathBuf>,
    pub backend: Option<String>,
    pub training: TrainingConfig,
    pub seed: u64,
}

pub fn finetune_wali(cfg: &FinetuneConfig, out: &Path) -> anyhow::Result<()> {
    let clock = Instant::now();
    let ds_dir = required(&cfg.dataset, "dataset")?;
    let baseline_path = required(&cfg.baseline, "baseline")?;
    let reg_path = required(&cfg.registry, "registry")?;
    let id = required(&cfg.backend, "backend")?;
    let ds = load_dataset(ds_dir, cfg.identities)?;
    let baseline = WaliModel::load(baseline_path).with_context(|| format!("baseline {}", baseline_path.display()))?;
    let fr = load_registry(reg_path)?.backend(id, &registry_base(reg_path))?;
    let mut t = cfg.training.clone();
    t.seed = cfg.seed;
    t.baseline_only = false;
    t.network = baseline.config().clone();
    fs::create_dir_all(out)?;
    let mut log = LossLog::default();
    let model = train_or_snapshot(out, &t, baseline.clone(), &ds, Some(&fr), &mut log)?;
    save_run(
        out,
        "finetune-wali",
        &t,
        &log,
        &[("baseline", &baseline), ("finetune", &model)],
        &[("fr_backend", id.as_str().into()), ("baseline_only", false.into())],
    )?;
    add_dataset_input(out, ds_dir)?;
    write_timing(out, "finetune-wali", clock.elapsed().as_secs_f64())?;
    println!("finetuned checkpoint: {}", out.join("checkpoints/finetune.bin").display());
    Ok(())
}

// ---------------------------------------------------------------- gen-morphs

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenMorphsConfig {
    pub model: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub identities: Option<[usize; 2]>,
    /// Existing protocol; when absent pairs are selected with `selection_backend`.
    pub protocol: Option<PathBuf>,
    pub selection: PairSelectionConfig,
    pub selection_backend: Option<String>,
    pub registry: Option<PathBuf>,
    /// Backends driving the latent optimization.
    pub backends: Vec<String>,
    pub optimization: OptimizationConfig,
    pub batch_size: usize,
    pub colour_correction: bool,
    pub seed: u64,
}

impl Default for GenMorphsConfig {
    fn default() -> Self {
        Self {
            model: None,
            dataset: None,
            identities: None,
            protocol: None,
            selection: PairSelectionConfig::default(),
            selection_backend: None,
            registry: None,
            backends: Vec::new(),
            optimization: OptimizationConfig::default(),
            batch_size: 16,
            colour_correction: false,
            seed: 0,
        }
    }
}

pub fn gen_morphs(cfg: &GenMorphsConfig, out: &Path) -> anyhow::Result<()> {
    cfg.optimization.validate()?;
    let model_path = required(&cfg.model, "model")?;
    let ds_dir = required(&cfg.dataset, "dataset")?;
    let ds = load_dataset(ds_dir, cfg.identities)?;
    let model = WaliModel::load(model_path).with_context(|| format!("model {}", model_path.display()))?;
    let mut run = Run::new(out, "gen-morphs", cfg, cfg.seed)?;
    run.manifest.add_input("model", model_path)?;
    run.manifest.add_input("dataset/labels.csv", &ds_dir.join("labels.csv"))?;

    let protocol = match &cfg.protocol {
        Some(p) => {
            run.manifest.add_input("protocol", p)?;
            MorphProtocol::load(p).with_context(|| format!("protocol {}", p.display()))?
        }
        None => {
            let reg = required(&cfg.registry, "registry")?;
            let id = required(&cfg.selection_backend, "selection_backend")?;
            let fr = load_backends(reg, std::slice::from_ref(id))?.remove(0);
            let mut sel = cfg.selection.clone();
            sel.seed = cfg.seed;
            select_pairs(&ds, &fr, &sel)?
        }
    };
    run.write("protocol.jsonl", protocol.to_jsonl()?)?;
    let pairs = protocol.resolve(&ds)?;
    let ids = protocol.pair_ids();

    let backends = if cfg.backends.is_empty() {
        Vec::new()
    } else {
        load_backends(required(&cfg.registry, "registry")?, &cfg.backends)?
    };
    let frs = cfg.optimization.weighted(&backends);
    let gen = WaliBackend { model: &model };
    let morphs = generate_protocol_morphs(&gen, &frs, &pairs, &ids, &cfg.optimization, cfg.batch_size)?;

    let mut meta = String::new();
    for ((image, m), p) in morphs.iter().zip(&pairs) {
        let image = if cfg.colour_correction {
            colour_correct(image, &channel_stats(&[p.image1, p.image2])?)?
        } else {
            image.clone()
        };
        let rel = morph_rel(&m.pair_id);
        fs::create_dir_all(out.join("morphs"))?;
        image.save_png(&out.join(&rel))?;
        run.manifest.add_artifact(out, &rel)?;
        meta.push_str(&serde_json::to_string(m)?);
        meta.push('\n');
    }
    run.write("metadata.jsonl", meta)?;
    println!("wrote {} morphs to {}", morphs.len(), out.join("morphs").display());
    run.finish()
}

// ---------------------------------------------------------------- eval-mmpmr

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalMmpmrConfig {
    /// A `morph_id,d1,d2` table; needs `threshold`.
    pub scores: Option<PathBuf>,
    /// Overrides registry thresholds.
    pub threshold: Option<f64>,
    /// A gen-morphs output directory.
    pub morphs: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub identities: Option<[usize; 2]>,
    pub registry: Option<PathBuf>,
    pub backends: Vec<String>,
    pub morph_set: String,
    pub seed: u64,
}

impl Default for EvalMmpmrConfig {
    fn default() -> Self {
        Self {
            scores: None,
            threshold: None,
            morphs: None,
            dataset: None,
            identities: None,
            registry: None,
            backends: Vec::new(),
            morph_set: "morphs".into(),
            seed: 0,
        }
    }
}

pub fn eval_mmpmr(cfg: &EvalMmpmrConfig, out: &Path) -> anyhow::Result<()> {
    let mut run = Run::new(out, "eval-mmpmr", cfg, cfg.seed)?;
    let mut rows = Vec::new();
    match (&cfg.scores, &cfg.morphs) {
        (Some(path), None) => {
            let t = *required(&cfg.threshold, "threshold")?;
            run.manifest.add_input("scores", path)?;
            let table = MorphScoreTable::load(path).with_context(|| format!("scores {}", path.display()))?;
            let m = mmpmr(&table, t)?;
            println!("{m:.4}");
            rows.push(MmpmrReportRow {
                backend: "table".into(),
                morph_set: cfg.morph_set.clone(),
                threshold: t,
                mmpmr: m,
            });
        }
        (None, Some(dir)) => {
            let ds = load_dataset(required(&cfg.dataset, "dataset")?, cfg.identities)?;
            let protocol = MorphProtocol::load(&dir.join("protocol.jsonl"))?;
            let pairs = protocol.resolve(&ds)?;
            let ids = protocol.pair_ids();
            let images = ids
                .iter()
                .map(|id| Image::load_png(&dir.join(morph_rel(id)), ds.size))
                .collect::<wali_morph::Result<Vec<_>>>()?;
            let refs: Vec<&Image> = images.iter().collect();
            if cfg.backends.is_empty() {
                return Err(Error::config("backends", "list at least one backend").into());
            }
            for fr in load_backends(required(&cfg.registry, "registry")?, &cfg.backends)? {
                let t = match cfg.threshold {
                    Some(t) => t,
                    None => fr.threshold()?,
                };
                let table = morph_score_table(&fr, &ids, &refs, &probe_embeddings(&fr, &pairs)?)?;
                run.write(&format!("scores_{}.csv", fr.id), table.to_csv())?;
                let m = mmpmr(&table, t)?;
                println!("{} {m:.4}", fr.id);
                rows.push(MmpmrReportRow {
                    backend: fr.id.clone(),
                    morph_set: cfg.morph_set.clone(),
                    threshold: t,
                    mmpmr: m,
                });
            }
        }
        _ => return Err(Error::config("scores", "set exactly one of `scores` and `morphs`").into()),
    }
    run.write("mmpmr_report.csv", mmpmr_report_csv(&rows))?;
    run.finish()
}

// ---------------------------------------------------------------- eval-bound

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalBoundConfig {
    pub protocol: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub identities: Option<[usize; 2]>,
    pub registry: Option<PathBuf>,
    pub backends: Vec<String>,
    pub seed: u64,
}

pub fn eval_bound(cfg: &EvalBoundConfig, out: &Path) -> anyhow::Result<()> {
    let protocol_path = required(&cfg.protocol, "protocol")?;
    let ds = load_dataset(required(&cfg.dataset, "dataset")?, cfg.identities)?;
    if cfg.backends.is_empty() {
        return Err(Error::config("backends", "list at least one backend").into());
    }
    let mut run = Run::new(out, "eval-bound", cfg, cfg.seed)?;
    run.manifest.add_input("protocol", protocol_path)?;
    let protocol = MorphProtocol::load(protocol_path)?;
    let pairs = protocol.resolve(&ds)?;
    let ids = protocol.pair_ids();
    let mut rows = Vec::new();
    for fr in load_backends(required(&cfg.registry, "registry")?, &cfg.backends)? {
        let (bound, m) = worst_case_bound_table(&probe_embeddings(&fr, &pairs)?, &fr)?;
        run.write(&format!("bounds_{}.csv", fr.id), bounds_csv(&fr.id, &ids, &bound))?;
        println!("{} {m:.4}", fr.id);
        rows.push(MmpmrReportRow {
            backend: fr.id.clone(),
            morph_set: "worst-case-bound".into(),
            threshold: fr.threshold()?,
            mmpmr: m,
        });
    }
    run.write("mmpmr_report.csv", mmpmr_report_csv(&rows))?;
    run.finish()
}

// --------------------------------------------------------- mad-train / eval

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MadKind {
    #[default]
    Smad,
    Dmad,
}

/// One labelled MAD sample; paths are relative to the sample list.
struct MadSample {
    path: PathBuf,
    attack: bool,
    probe: Option<PathBuf>,
}

/// Reads a `path,attack[,probe]` list where `attack` is 0 or 1.
fn read_samples(list: &Path) -> anyhow::Result<Vec<MadSample>> {
    let base = list.parent().unwrap_or(Path::new(""));
    let text = fs::read_to_string(list).with_context(|| format!("samples {}", list.display()))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let attack = match cols.get(1) {
            Some(&"1") => true,
            Some(&"0") => false,
            _ => bail!("{} line {}: attack must be 0 or 1", list.display(), n + 1),
        };
        out.push(MadSample {
            path: base.join(cols[0]),
            attack,
            probe: cols.get(2).filter(|p| !p.is_empty()).map(|p| base.join(p)),
        });
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("sample list {}", list.display())).into());
    }
    Ok(out)
}

fn mad_features(
    kind: MadKind,
    samples: &[MadSample],
    size: usize,
    lbp: &LbpConfig,
    fr: Option<&FrBackend>,
) -> anyhow::Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| {
            let img = Image::load_png(&s.path, size)?;
            Ok(match kind {
                MadKind::Smad => lbp_image_features(&img, lbp)?,
                MadKind::Dmad => {
                    let probe = s
                        .probe
                        .as_ref()
                        .ok_or_else(|| anyhow::anyhow!("{}: D-MAD samples need a probe", s.path.display()))?;
                    let fr = fr.expect("D-MAD runs with a backend");
                    dmad_classifier_input(&dmad_features(fr, &img, &Image::load_png(probe, size)?)?)
                }
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MadModel {
    pub kind: MadKind,
    pub backend: Option<String>,
    pub image_size: usize,
    pub svm: LinearSvm,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MadTrainConfig {
    pub kind: MadKind,
    pub samples: Option<PathBuf>,
    pub image_size: usize,
    pub lbp: LbpConfig,
    pub svm: SvmConfig,
    pub registry: Option<PathBuf>,
    pub backend: Option<String>,
    pub seed: u64,
}

impl Default for MadTrainConfig {
    fn default() -> Self {
        Self {
            kind: MadKind::Smad,
            samples: None,
            image_size: 16,
            lbp: LbpConfig::default(),
            svm: SvmConfig::default(),
            registry: None,
            backend: None,
            seed: 0,
        }
    }
}

fn mad_backend(kind: MadKind, registry: &Option<PathBuf>, backend: &Option<String>) -> anyhow::Result<Option<FrBackend>> {
    Ok(match kind {
        MadKind::Smad => None,
        MadKind::Dmad => {
            let reg = required(registry, "registry")?;
            Some(load_backends(reg, std::slice::from_ref(required(backend, "backend")?))?.remove(0))
        }
    })
}

pub fn mad_train(cfg: &MadTrainConfig, out: &Path) -> anyhow::Result<()> {
    let list = required(&cfg.samples, "samples")?;
    let samples = read_samples(list)?;
    let fr = mad_backend(cfg.kind, &cfg.registry, &cfg.backend)?;
    let mut run = Run::new(out, "mad-train", cfg, cfg.seed)?;
    run.manifest.add_input("samples", list)?;
    let feats = mad_features(cfg.kind, &samples, cfg.image_size, &cfg.lbp, fr.as_ref())?;
    let attack: Vec<bool> = samples.iter().map(|s| s.attack).collect();
    let mut svm = train_linear_svm(&feats, &attack, &cfg.svm)?;
    if cfg.kind == MadKind::Smad {
        svm.lbp = Some(cfg.lbp);
    }
    let model = MadModel {
        kind: cfg.kind,
        backend: fr.map(|f| f.id),
        image_size: cfg.image_size,
        svm,
    };
    run.write("mad.json", serde_json::to_string_pretty(&model)?)?;
    println!("trained {:?} detector on {} samples", cfg.kind, samples.len());
    run.finish()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MadEvalConfig {
    pub model: Option<PathBuf>,
    pub samples: Option<PathBuf>,
    pub registry: Option<PathBuf>,
    pub apcer_bound: f64,
    pub seed: u64,
}

impl Default for MadEvalConfig {
    fn default() -> Self {
        Self {
            model: None,
            samples: None,
            registry: None,
            apcer_bound: 0.1,
            seed: 0,
        }
    }
}

pub fn mad_eval(cfg: &MadEvalConfig, out: &Path) -> anyhow::Result<()> {
    let model_path = required(&cfg.model, "model")?;
    let list = required(&cfg.samples, "samples")?;
    let model: MadModel = serde_json::from_str(&fs::read_to_string(model_path)?)?;
    let samples = read_samples(list)?;
    let fr = mad_backend(model.kind, &cfg.registry, &model.backend)?;
    let mut run = Run::new(out, "mad-eval", cfg, cfg.seed)?;
    run.manifest.add_input("model", model_path)?;
    run.manifest.add_input("samples", list)?;
    let lbp = model.svm.lbp.unwrap_or_default();
    let feats = mad_features(model.kind, &samples, model.image_size, &lbp, fr.as_ref())?;
    let attack: Vec<bool> = samples.iter().map(|s| s.attack).collect();
    let scores = mad_evaluate(&model.svm, &feats, &attack)?;
    let mut csv = String::from("path,score,attack\n");
    for (s, l) in samples.iter().zip(&scores) {
        csv.push_str(&format!("{},{},{}\n", s.path.display(), l.score, l.attack as u8));
    }
    run.write("scores.csv", csv)?;
    let (bona, att) = split_scores(&scores);
    let bpcer = bpcer_at_apcer(&bona, &att, cfg.apcer_bound)?;
    run.write("det.csv", det_csv(&det_points(&att, &bona)?, ("apcer", "bpcer")))?;
    run.write(
        "metrics.json",
        serde_json::to_string_pretty(&serde_json::json!({
            "apcer_bound": cfg.apcer_bound,
            "bpcer_at_apcer": bpcer,
        }))?,
    )?;
    println!("BPCER@APCER<={}: {bpcer:.4}", cfg.apcer_bound);
    run.finish()
}

// ---------------------------------------------------------------- det-export

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetExportConfig {
    /// `scores.json` from calibrate, or a `...,score,attack` CSV from mad-eval.
    pub scores: Option<PathBuf>,
    pub seed: u64,
}

fn labelled_csv(text: &str) -> anyhow::Result<(Vec<f64>, Vec<f64>)> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| anyhow::anyhow!("score CSV lacks a `{name}` column"))
    };
    let (si, ai) = (col("score")?, col("attack")?);
    let (mut bona, mut attack) = (Vec::new(), Vec::new());
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        let s: f64 = cols.get(si).and_then(|v| v.trim().parse().ok()).context("bad score value")?;
        match cols.get(ai).map(|v| v.trim()) {
            Some("1") => attack.push(s),
            Some("0") => bona.push(s),
            _ => bail!("attack column must be 0 or 1"),
        }
    }
    Ok((bona, attack))
}

pub fn det_export(cfg: &DetExportConfig, out: &Path) -> anyhow::Result<()> {
    let path = required(&cfg.scores, "scores")?;
    let text = fs::read_to_string(path).with_context(|| format!("scores {}", path.display()))?;
    let mut run = Run::new(out, "det-export", cfg, cfg.seed)?;
    run.manifest.add_input("scores", path)?;
    let csv = if path.extension().and_then(|e| e.to_str()) == Some("json") {
        let s: ScoreSet = serde_json::from_str(&text)?;
        det_csv(&det_points_scores(&s)?, ("fmr", "fnmr"))
    } else {
        let (bona, attack) = labelled_csv(&text)?;
        det_csv(&det_points(&attack, &bona)?, ("apcer", "bpcer"))
    };
    let n = csv.lines().count() - 1;
    run.write("det.csv", csv)?;
    println!("wrote {n} DET points to {}", out.join("det.csv").display());
    run.finish()
}
