//! Training runs and the per-checkpoint commands.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::GRID_YAWS;
use crate::camera::{CameraPose, PoseDistribution};
use crate::conditioning::ConditionEmbedder;
use crate::error::{Error, Result};
use crate::gan::{
    load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, ConditionTable, Generator, TrainBatch,
    TrainState,
};
use crate::inversion::{
    fixed_condition, invert, novel_view_eval, render_pivot, ConditionSource, InversionResult, InversionTask,
};
use crate::metrics::{
    collapse_monitor, mknnd, protocol_inputs, CollapseReport, EvalProtocol, EvalReport, Evaluator, FakeSource,
    FeatureExtractor, ProtocolKind, COLLAPSE_THETA, DEFAULT_K,
};
use crate::raster::{hstack, load_mask_png, load_png, save_png, Image, Mask};
use crate::renderer::tensor_to_image;
use crate::synthdata::{dataset_read, dataset_write, generate_dataset, Dataset, ViewTag};

pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "log.tsv";
pub const DIVERSITY_FILE: &str = "diversity.tsv";
pub const ARTIFACT_FILE: &str = "artifacts.tsv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
const HASH_LINE: &str = "# config_hash=";
const LOG_HEADER: &str =
    "step\tkimg\tp_swap\tloss_g\tloss_d\tr1\tvicico\tlogit_real\tlogit_fake\tmask_mean\tconfig_hash";
const DIVERSITY_HEADER: &str = "step\tkimg\tmknnd\tconfig_hash";
const GRID_ROWS: usize = 4;
const RENDER_CHUNK: usize = 32;

pub(crate) fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Appends `config_hash` as the last column of a tab-separated table.
pub fn stamp_tsv(tsv: &str, config_hash: &str) -> String {
    let mut out = String::with_capacity(tsv.len() + 80 * tsv.lines().count());
    for (i, line) in tsv.lines().enumerate() {
        out.push_str(line);
        out.push('\t');
        out.push_str(if i == 0 { "config_hash" } else { config_hash });
        out.push('\n');
    }
    out
}

/// Header and rows of a tab-separated table.
pub fn read_tsv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::invalid(format!("{} is empty", path.display())))?
        .split('\t')
        .map(str::to_string)
        .collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}

fn append_row(path: &Path, header: &str, row: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    }
    writeln!(f, "{row}").map_err(|e| Error::io(path, e))
}

/// Drops rows whose leading step is at or beyond `step`.
fn truncate_from(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kept: String = text
        .lines()
        .enumerate()
        .filter(|(i, l)| {
            *i == 0
                || l.split('\t')
                    .next()
                    .and_then(|s| s.parse::<u64>().ok())
                    .is_some_and(|s| s < step)
        })
        .map(|(_, l)| format!("{l}\n"))
        .collect();
    write_file(path, &kept)
}

/// Registry of emitted files: relative path, SHA-256 and config hash.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArtifactLog {
    pub entries: BTreeMap<String, (String, String)>,
}

impl ArtifactLog {
    pub const HEADER: &'static str = "path\tsha256\tconfig_hash";

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(ARTIFACT_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let (_, rows) = read_tsv(&path)?;
        let mut entries = BTreeMap::new();
        for r in rows {
            if r.len() != 3 {
                return Err(Error::invalid(format!("malformed row in {}: {r:?}", path.display())));
            }
            entries.insert(r[0].clone(), (r[1].clone(), r[2].clone()));
        }
        Ok(Self { entries })
    }

    pub fn record(&mut self, run_dir: &Path, file: &Path, config_hash: &str) -> Result<()> {
        let rel = file.strip_prefix(run_dir).unwrap_or(file).to_string_lossy().to_string();
        self.entries.insert(rel, (sha256_file(file)?, config_hash.to_string()));
        self.save(run_dir)
    }

    fn save(&self, run_dir: &Path) -> Result<()> {
        let mut s = format!("{}\n", Self::HEADER);
        for (p, (h, c)) in &self.entries {
            s.push_str(&format!("{p}\t{h}\t{c}\n"));
        }
        write_file(&run_dir.join(ARTIFACT_FILE), &s)
    }
}

/// The configured dataset: read from disk, or synthesized in memory.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.dataset.as_os_str().is_empty() {
        generate_dataset(&cfg.synth_config())
    } else {
        dataset_read(&cfg.dataset)
    }
}

/// Writes the configured synthetic dataset to `dir`.
pub fn cmd_synth(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    let ds = generate_dataset(&cfg.synth_config())?;
    dataset_write(&ds, dir)?;
    Ok(ds)
}

/// A validated configuration with its dataset and condition table.
#[derive(Debug)]
pub struct Session {
    pub cfg: RunConfig,
    pub ds: Dataset,
    pub embedder: ConditionEmbedder,
    pub table: ConditionTable,
}

impl Session {
    pub fn new(cfg: RunConfig, ds: Dataset) -> Result<Self> {
        cfg.validate()?;
        cfg.check_dataset(&ds)?;
        let embedder = ConditionEmbedder::new(ds.meta.embed_seed, ds.meta.embed_dim, ds.meta.normalized)?;
        let table = ConditionTable::build(&ds, cfg.strategy, &embedder)?;
        Ok(Self {
            cfg,
            ds,
            embedder,
            table,
        })
    }

    pub fn open(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let ds = load_dataset(&cfg)?;
        Self::new(cfg, ds)
    }

    fn batch_rng(&self, step: u64) -> ChaCha8Rng {
        let c = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(
            c.data_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
                ^ c.model_seed.rotate_left(32)
                ^ step.wrapping_mul(0xd1b5_4a32_d192_ed03),
        );
        rng.set_stream(3);
        rng
    }
}

/// Renders `(z, cond, pose)` triples in chunks and returns the HR images.
fn render_images(g: &Generator, z: &[Vec<f64>], conds: &[Vec<f64>], poses: &[CameraPose]) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(z.len());
    for s in (0..z.len()).step_by(RENDER_CHUNK) {
        let e = (s + RENDER_CHUNK).min(z.len());
        let (r, _) = g.generate(&z[s..e], &conds[s..e], &poses[s..e])?;
        for b in 0..e - s {
            out.push(tensor_to_image(&r.image_hr, b)?);
        }
    }
    Ok(out)
}

fn vstack(rows: &[Image]) -> Result<Image> {
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Rows of samples, each rendered at the grid yaws.
fn yaw_grid(g: &Generator, z: &[Vec<f64>], conds: &[Vec<f64>]) -> Result<Image> {
    let poses: Vec<CameraPose> = GRID_YAWS
        .iter()
        .map(|y| CameraPose::from_degrees(*y, 0.0))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(z.len());
    for (zi, ci) in z.iter().zip(conds) {
        let n = poses.len();
        let imgs = render_images(g, &vec![zi.clone(); n], &vec![ci.clone(); n], &poses)?;
        rows.push(hstack(&imgs)?);
    }
    vstack(&rows)
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub config_hash: String,
    pub steps: u64,
    pub resumed_from: Option<u64>,
    pub final_checkpoint: PathBuf,
    pub checkpoint_hash: String,
    /// `(step, kimg, mknnd)` of every diversity snapshot.
    pub diversity: Vec<(u64, f64, f64)>,
    pub collapse: Option<CollapseReport>,
}

impl TrainSummary {
    /// Kimg of the first collapsed snapshot.
    pub fn collapse_kimg(&self) -> Option<f64> {
        let at = self.collapse.as_ref()?.collapsed_at?;
        self.diversity.get(at).map(|d| d.1)
    }
}

fn checkpoint_stem(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("ckpt_{step:08}"))
}

/// Checkpoint stems of a run, by step.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().is_some_and(|e| e == "manifest") {
            let stem = path.with_extension("");
            let step = stem
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("ckpt_"))
                .and_then(|n| n.parse::<u64>().ok());
            if let Some(step) = step {
                out.push((step, stem));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Reads the config hash stamped into a run's config file.
pub(crate) fn stamped_hash(run_dir: &Path) -> Result<(RunConfig, String)> {
    let path = run_dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let stamp = text
        .lines()
        .find_map(|l| l.strip_prefix(HASH_LINE))
        .ok_or_else(|| Error::invalid(format!("{} lacks a config hash line", path.display())))?;
    Ok((RunConfig::from_text(&text)?, stamp.trim().to_string()))
}

struct Run<'a> {
    session: &'a Session,
    dir: &'a Path,
    hash: String,
    artifacts: ArtifactLog,
    extractor: FeatureExtractor,
    evaluator: Option<Evaluator>,
}

impl Run<'_> {
    fn checkpoint(&mut self, state: &TrainState) -> Result<PathBuf> {
        let stem = checkpoint_stem(self.dir, state.step);
        save_checkpoint(state, &stem, &self.hash, &self.session.cfg.pairs())?;
        log::info!("{}: checkpoint {}", self.session.cfg.name, stem.display());
        for ext in ["safetensors", "manifest"] {
            self.artifacts.record(self.dir, &stem.with_extension(ext), &self.hash)?;
        }
        Ok(stem)
    }

    /// Diversity of front renders for fixed latents and conditions, plus a
    /// yaw grid of the first few of them.
    fn snapshot(&mut self, state: &TrainState) -> Result<f64> {
        let cfg = &self.session.cfg;
        let proto = EvalProtocol::new(ProtocolKind::FidFront, cfg.snapshot_samples, cfg.eval_seed);
        let (z, conds, poses) = protocol_inputs(&state.g, &self.session.table, &self.session.ds, &proto)?;
        let mut feats = Vec::new();
        for s in (0..z.len()).step_by(RENDER_CHUNK) {
            let e = (s + RENDER_CHUNK).min(z.len());
            let (r, _) = state.g.generate(&z[s..e], &conds[s..e], &poses[s..e])?;
            feats.push(self.extractor.features_of(&r.image_hr)?);
        }
        let views: Vec<_> = feats.iter().map(|f| f.view()).collect();
        let f = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let m = mknnd(&f, DEFAULT_K)?;
        log::info!("{}: step {} kimg {:.3} mknnd {m:.4}", cfg.name, state.step, cfg.kimg_at(state.step));
        let row = format!("{}\t{}\t{m:.9}\t{}", state.step, cfg.kimg_at(state.step), self.hash);
        append_row(&self.dir.join(DIVERSITY_FILE), DIVERSITY_HEADER, &row)?;
        let n = GRID_ROWS.min(z.len());
        let grid = yaw_grid(&state.g, &z[..n], &conds[..n])?;
        let path = self.dir.join("grids").join(format!("grid_{:08}.png", state.step));
        if let Some(d) = path.parent() {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        save_png(&grid, &path)?;
        self.artifacts.record(self.dir, &path, &self.hash)?;
        Ok(m)
    }

    fn evaluate(&mut self, state: &TrainState) -> Result<()> {
        let cfg = &self.session.cfg;
        if self.evaluator.is_none() {
            self.evaluator = Some(Evaluator::new(
                &self.session.ds,
                self.extractor.clone(),
                cfg.output_resolution(),
            )?);
        }
        let ev = self.evaluator.as_ref().expect("evaluator was just built");
        let report = eval_report(ev, &state.g, self.session, cfg)?;
        let path = self.dir.join("evals").join(format!("eval_{:08}.tsv", state.step));
        write_file(&path, &stamp_tsv(&report.to_tsv(), &self.hash))?;
        self.artifacts.record(self.dir, &path, &self.hash)
    }
}

fn eval_report(ev: &Evaluator, g: &Generator, session: &Session, cfg: &RunConfig) -> Result<EvalReport> {
    let protocols: Vec<EvalProtocol> = cfg
        .protocols
        .iter()
        .map(|k| EvalProtocol::new(*k, cfg.n_eval, cfg.eval_seed))
        .collect();
    let source = FakeSource::Generator {
        g,
        table: &session.table,
    };
    ev.report(source, &session.ds, &protocols)
}

/// Trains to `total_kimg`, writing logs, snapshots and checkpoints under
/// `run_dir`. With `resume`, continues from the newest checkpoint, whose
/// config hash must match; without it the run directory must be new.
pub fn cmd_train(session: &Session, run_dir: &Path, resume: bool) -> Result<TrainSummary> {
    let cfg = &session.cfg;
    let hash = cfg.hash();
    let existing = list_checkpoints(run_dir)?;
    if !existing.is_empty() && !resume {
        return Err(Error::invalid(format!(
            "{} already holds checkpoints; resume it or choose another run directory",
            run_dir.display()
        )));
    }
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let gan = cfg.gan_config();
    let mut state = TrainState::new(&gan, cfg.model_seed)?;
    let mut resumed_from = None;
    if let Some((step, stem)) = existing.last() {
        let manifest = read_manifest(stem)?;
        if manifest.config_hash != hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint {} has config hash {}, the run config hashes to {hash}",
                stem.display(),
                manifest.config_hash
            )));
        }
        load_checkpoint(&mut state, stem)?;
        resumed_from = Some(*step);
        truncate_from(&run_dir.join(LOG_FILE), *step)?;
        truncate_from(&run_dir.join(DIVERSITY_FILE), *step)?;
    } else {
        for f in [LOG_FILE, DIVERSITY_FILE, ARTIFACT_FILE] {
            let p = run_dir.join(f);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    write_file(&run_dir.join(CONFIG_FILE), &format!("{}{HASH_LINE}{hash}\n", cfg.to_text()))?;
    let mut run = Run {
        session,
        dir: run_dir,
        hash: hash.clone(),
        artifacts: ArtifactLog::load(run_dir)?,
        extractor: FeatureExtractor::default(),
        evaluator: None,
    };
    run.artifacts.record(run_dir, &run_dir.join(CONFIG_FILE), &hash)?;

    let total = cfg.total_steps();
    let every_ckpt = cfg.every_steps(cfg.checkpoint_every_kimg);
    let every_snap = cfg.every_steps(cfg.snapshot_every_kimg);
    let every_eval = cfg.every_steps(cfg.eval_every_kimg);
    let poses = PoseDistribution::full_sphere();
    let mut last_ckpt = resumed_from.map(|s| checkpoint_stem(run_dir, s));
    loop {
        let s = state.step;
        let done = s >= total;
        if resumed_from != Some(s) && (s == 0 || done || (every_ckpt > 0 && s % every_ckpt == 0)) {
            last_ckpt = Some(run.checkpoint(&state)?);
        }
        if total > 0 && (done || (every_snap > 0 && s % every_snap == 0)) {
            run.snapshot(&state)?;
        }
        if total > 0 && every_eval > 0 && (done || s % every_eval == 0) {
            run.evaluate(&state)?;
        }
        if done {
            break;
        }
        state.p_swap = cfg.p_swap.value_at(cfg.kimg_at(s), cfg.strategy);
        let mut rng = session.batch_rng(s);
        let batch = TrainBatch::sample(&state.g, &session.ds, &session.table, cfg.batch, &poses, &mut rng)?;
        let sc = state.train_step(&batch)?;
        let row = format!(
            "{s}\t{}\t{}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{hash}",
            cfg.kimg_at(s),
            state.p_swap,
            sc.loss_g,
            sc.loss_d,
            sc.r1,
            sc.vicico,
            sc.logit_real,
            sc.logit_fake,
            sc.mask_mean
        );
        append_row(&run_dir.join(LOG_FILE), LOG_HEADER, &row)?;
    }
    let log = run_dir.join(LOG_FILE);
    if log.exists() {
        run.artifacts.record(run_dir, &log, &hash)?;
    }
    let diversity = read_diversity(run_dir)?;
    if !diversity.is_empty() {
        run.artifacts.record(run_dir, &run_dir.join(DIVERSITY_FILE), &hash)?;
    }
    let series: Vec<f64> = diversity.iter().map(|d| d.2).collect();
    let collapse = if series.is_empty() {
        None
    } else {
        Some(collapse_monitor(&series, COLLAPSE_THETA)?)
    };
    let final_checkpoint = last_ckpt.ok_or_else(|| Error::Checkpoint("run emitted no checkpoint".into()))?;
    Ok(TrainSummary {
        config_hash: hash,
        steps: state.step,
        resumed_from,
        checkpoint_hash: read_manifest(&final_checkpoint)?.checkpoint_hash,
        final_checkpoint,
        diversity,
        collapse,
    })
}

fn read_diversity(run_dir: &Path) -> Result<Vec<(u64, f64, f64)>> {
    let path = run_dir.join(DIVERSITY_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let (_, rows) = read_tsv(&path)?;
    rows.iter()
        .map(|r| {
            let bad = || Error::invalid(format!("malformed diversity row {r:?}"));
            Ok((
                r.first().and_then(|v| v.parse().ok()).ok_or_else(bad)?,
                r.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?,
                r.get(2).and_then(|v| v.parse().ok()).ok_or_else(bad)?,
            ))
        })
        .collect()
}

/// A trained model restored from a checkpoint, with the configuration
/// recorded in it.
#[derive(Debug)]
pub struct LoadedModel {
    pub cfg: RunConfig,
    pub state: TrainState,
    pub manifest: CheckpointManifest,
}

/// Restores a checkpoint; the embedded configuration must hash to the
/// recorded config hash.
pub fn load_model(stem: &Path) -> Result<LoadedModel> {
    let manifest = read_manifest(stem)?;
    let mut cfg = RunConfig::default();
    cfg.apply(&manifest.config)?;
    if cfg.hash() != manifest.config_hash {
        return Err(Error::Checkpoint(format!(
            "embedded config hashes to {}, manifest records {}",
            cfg.hash(),
            manifest.config_hash
        )));
    }
    let mut state = TrainState::new(&cfg.gan_config(), cfg.model_seed)?;
    load_checkpoint(&mut state, stem)?;
    Ok(LoadedModel { cfg, state, manifest })
}

/// Evaluates a checkpoint on its own dataset and writes the stamped table
/// to `out` when given.
pub fn cmd_eval(model: &LoadedModel, session: &Session, out: Option<&Path>) -> Result<EvalReport> {
    let ev = Evaluator::new(&session.ds, FeatureExtractor::default(), model.cfg.output_resolution())?;
    let report = eval_report(&ev, &model.state.g, session, &session.cfg)?;
    if let Some(path) = out {
        write_file(path, &stamp_tsv(&report.to_tsv(), &model.manifest.config_hash))?;
    }
    Ok(report)
}

/// Renders each seed at each yaw to `seed{SSSS}_yaw{YYY}.png`. Seed `s`
/// uses latent stream `s` and the front-view condition of record
/// `s mod N`.
pub fn cmd_grid(model: &LoadedModel, session: &Session, seeds: &[u64], yaws: &[f64], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let g = &model.state.g;
    let mut files = Vec::with_capacity(seeds.len() * yaws.len());
    let mut log = ArtifactLog::load(out_dir)?;
    for &seed in seeds {
        let z = g.sample_z(&mut ChaCha8Rng::seed_from_u64(seed));
        let r = (seed % session.ds.len() as u64) as usize;
        let cond = front_condition(session, r)?;
        for &yaw in yaws {
            let pose = CameraPose::from_degrees(yaw, 0.0)?;
            let img = render_images(g, &[z.clone()], &[cond.clone()], &[pose])?.remove(0);
            let path = out_dir.join(format!("seed{seed:04}_yaw{:03}.png", yaw.round() as i64));
            save_png(&img, &path)?;
            log.record(out_dir, &path, &model.manifest.config_hash)?;
            files.push(path);
        }
    }
    Ok(files)
}

fn front_condition(session: &Session, r: usize) -> Result<Vec<f64>> {
    let rec = &session.ds.records[r];
    let v = rec
        .views
        .iter()
        .position(|v| v.tag == ViewTag::Front)
        .ok_or_else(|| Error::invalid(format!("subject {} has no front view", rec.subject_id)))?;
    Ok(match session.cfg.strategy {
        crate::conditioning::StrategyKind::View => CameraPose::front().to_label().0.to_vec(),
        _ => session.table.cond[r][v].clone(),
    })
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// For each sample, the index and similarity of its most similar pool
/// entry (first index on ties).
pub fn nearest_pairs(samples: &[Vec<f64>], pool: &[Vec<f64>]) -> Vec<(usize, f64)> {
    samples
        .iter()
        .map(|s| {
            pool.iter()
                .enumerate()
                .map(|(j, p)| (j, cosine_similarity(s, p)))
                .fold((usize::MAX, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NearestPair {
    pub sample: usize,
    pub subject_id: u64,
    pub similarity: f64,
}

impl NearestPair {
    pub const HEADER: &'static str = "sample\tsubject_id\tsimilarity";
}

/// Embeds `n` generated front views and pairs each with the dataset
/// subject whose front view is most similar.
pub fn cmd_nearest(model: &LoadedModel, session: &Session, n: usize, out: Option<&Path>) -> Result<Vec<NearestPair>> {
    let proto = EvalProtocol::new(ProtocolKind::FidFront, n, session.cfg.eval_seed);
    let (z, conds, poses) = protocol_inputs(&model.state.g, &session.table, &session.ds, &proto)?;
    let imgs = render_images(&model.state.g, &z, &conds, &poses)?;
    let samples = imgs
        .iter()
        .map(|i| session.embedder.embed(i).map(|c| c.values))
        .collect::<Result<Vec<_>>>()?;
    let mut ids = Vec::with_capacity(session.ds.len());
    let mut pool = Vec::with_capacity(session.ds.len());
    for rec in &session.ds.records {
        ids.push(rec.subject_id);
        pool.push(session.embedder.embed(&rec.front_view()?.image)?.values);
    }
    let pairs: Vec<NearestPair> = nearest_pairs(&samples, &pool)
        .into_iter()
        .enumerate()
        .map(|(i, (j, sim))| NearestPair {
            sample: i,
            subject_id: ids[j],
            similarity: sim,
        })
        .collect();
    if let Some(path) = out {
        let mut s = format!("{}\n", NearestPair::HEADER);
        for p in &pairs {
            s.push_str(&format!("{}\t{}\t{:.9}\n", p.sample, p.subject_id, p.similarity));
        }
        write_file(path, &stamp_tsv(&s, &model.manifest.config_hash))?;
    }
    Ok(pairs)
}

#[derive(Debug, Clone)]
pub struct InvertOptions {
    pub source: ConditionSource,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub w_plus: bool,
    pub seed: u64,
}

impl Default for InvertOptions {
    fn default() -> Self {
        Self {
            source: ConditionSource::TargetEmbedding,
            stage1_steps: crate::inversion::DEFAULT_STEPS,
            stage2_steps: crate::inversion::DEFAULT_STEPS,
            w_plus: false,
            seed: 0,
        }
    }
}

/// Inverts a target image and writes the reconstruction, a yaw grid of the
/// fitted model and the loss curves to `out_dir`.
pub fn cmd_invert(
    model: &LoadedModel,
    session: &Session,
    target: &Path,
    mask: &Path,
    pose: CameraPose,
    opts: &InvertOptions,
    out_dir: &Path,
) -> Result<InversionResult> {
    let image = load_png(target)?;
    let mask: Mask = load_mask_png(mask)?;
    let g = &model.state.g;
    let c = fixed_condition(opts.source, model.cfg.strategy, &image, &pose, &session.embedder, Some(&session.table))?;
    let mut task = InversionTask::new(image, mask, pose, c);
    task.stage1_steps = opts.stage1_steps;
    task.stage2_steps = opts.stage2_steps;
    task.w_plus = opts.w_plus;
    task.seed = opts.seed;
    let ext = FeatureExtractor::default();
    let result = invert(&task, g, &ext)?;
    write_inversion(&result, &model.manifest.config_hash, out_dir)?;
    Ok(result)
}

fn write_inversion(result: &InversionResult, config_hash: &str, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut log = ArtifactLog::load(out_dir)?;
    let rec = out_dir.join("reconstruction.png");
    save_png(&result.reconstruction, &rec)?;
    log.record(out_dir, &rec, config_hash)?;
    let mut views = Vec::with_capacity(GRID_YAWS.len());
    for y in GRID_YAWS {
        let out = render_pivot(&result.generator, &result.pivot, result.w_plus, &CameraPose::from_degrees(y, 0.0)?)?;
        views.push(tensor_to_image(&out.image_hr, 0)?);
    }
    let grid = out_dir.join("novel_views.png");
    save_png(&hstack(&views)?, &grid)?;
    log.record(out_dir, &grid, config_hash)?;
    let mut s = String::from("stage\tstep\tloss\n");
    for (stage, curve) in [(1, &result.stage1_losses), (2, &result.stage2_losses)] {
        for (i, l) in curve.iter().enumerate() {
            s.push_str(&format!("{stage}\t{i}\t{l:.9}\n"));
        }
    }
    let losses = out_dir.join("losses.tsv");
    write_file(&losses, &stamp_tsv(&s, config_hash))?;
    log.record(out_dir, &losses, config_hash)
}

/// Per-view scores of an inversion against a full ground-truth record.
pub fn novel_view_table(result: &InversionResult, record: &crate::synthdata::MultiViewRecord) -> Result<String> {
    let scores = novel_view_eval(result, record, &FeatureExtractor::default())?;
    let mut s = String::from("tag\tyaw\tpitch\tperceptual\tiou\n");
    for v in scores {
        s.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.9}\t{:.9}\n",
            v.tag.name(),
            v.pose.yaw,
            v.pose.pitch,
            v.perceptual,
            v.iou
        ));
    }
    Ok(s)
}
