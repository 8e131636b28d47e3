//! Run configuration: a flat key=value file, overridable key by key, with a
//! canonical serialization whose hash stamps every artifact of a run.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::DType;
use sha2::{Digest, Sha256};

use crate::camera::PoseDistribution;
use crate::conditioning::{ConditionStrategy, StrategyKind, DEFAULT_EMBED_DIM, DEFAULT_EMBED_SEED};
use crate::error::{Error, Result};
use crate::gan::GanConfig;
use crate::metrics::{ProtocolKind, DEFAULT_EVAL};
use crate::neural_field::{PlaneKind, PlaneLayout};
use crate::renderer::RenderConfig;
use crate::synthdata::{Dataset, SynthConfig};

/// Piecewise-constant swap probability over training progress.
#[derive(Debug, Clone, PartialEq)]
pub enum SwapSchedule {
    /// The strategy's default constant.
    Auto,
    /// `(kimg, value)` breakpoints sorted by kimg; the value of the last
    /// breakpoint at or before the current kimg applies.
    Steps(Vec<(f64, f64)>),
}

impl SwapSchedule {
    pub fn constant(v: f64) -> Self {
        SwapSchedule::Steps(vec![(0.0, v)])
    }

    /// The collapse experiment: 0.5, then 1 from `mid` kimg on.
    pub fn swap_to_one(mid: f64) -> Self {
        SwapSchedule::Steps(vec![(0.0, 0.5), (mid, 1.0)])
    }

    pub fn value_at(&self, kimg: f64, strategy: StrategyKind) -> f64 {
        match self {
            SwapSchedule::Auto => default_p_swap(strategy),
            SwapSchedule::Steps(s) => s
                .iter()
                .take_while(|(k, _)| *k <= kimg)
                .last()
                .or(s.first())
                .map_or(0.0, |(_, v)| *v),
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if let SwapSchedule::Steps(s) = self {
            if s.is_empty() {
                p.push("p_swap schedule is empty".to_string());
            }
            if s.windows(2).any(|w| w[1].0 < w[0].0) {
                p.push("p_swap breakpoints must be sorted by kimg".to_string());
            }
            for (k, v) in s {
                if !(0.0..=1.0).contains(v) || !(*k >= 0.0) {
                    p.push(format!("p_swap breakpoint {k}:{v} needs kimg >= 0 and value in [0, 1]"));
                }
            }
        }
        p
    }
}

pub fn default_p_swap(strategy: StrategyKind) -> f64 {
    if strategy.is_view_dependent() {
        0.5
    } else {
        0.0
    }
}

impl fmt::Display for SwapSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SwapSchedule::Auto => f.write_str("auto"),
            SwapSchedule::Steps(s) => {
                let parts: Vec<String> = s.iter().map(|(k, v)| format!("{k}:{v}")).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for SwapSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "auto" {
            return Ok(SwapSchedule::Auto);
        }
        if let Ok(v) = s.parse::<f64>() {
            return Ok(SwapSchedule::constant(v));
        }
        s.split(',')
            .map(|part| {
                let (k, v) = part
                    .split_once(':')
                    .ok_or_else(|| Error::invalid(format!("p_swap breakpoint '{part}' is not kimg:value")))?;
                Ok((parse_num(k.trim(), "p_swap kimg")?, parse_num(v.trim(), "p_swap value")?))
            })
            .collect::<Result<Vec<_>>>()
            .map(SwapSchedule::Steps)
    }
}

fn parse_num<T: FromStr>(v: &str, key: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::invalid(format!("{key}: cannot parse '{v}'")))
}

fn parse_bool(v: &str, key: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::invalid(format!("{key}: expected true or false, got '{v}'"))),
    }
}

/// Everything one training run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub representation: PlaneKind,
    pub strategy: StrategyKind,
    pub vicico: bool,
    pub lambda_vicico: f64,
    pub p_swap: SwapSchedule,
    pub render_resolution: usize,
    pub upsample_factor: usize,
    pub samples_per_ray: usize,
    pub stratified: bool,
    pub plane_resolution: usize,
    pub plane_channels: usize,
    pub grid_depth: usize,
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    pub synth_channels: usize,
    pub decoder_hidden: usize,
    pub upsampler_hidden: usize,
    pub d_channels: usize,
    pub d_features: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lambda_r1: f64,
    pub r1_interval: usize,
    pub batch: usize,
    pub total_kimg: f64,
    pub data_seed: u64,
    pub model_seed: u64,
    pub eval_seed: u64,
    /// Dataset directory; empty means synthesize in memory from the
    /// `subjects`, `views`, `data_resolution`, `jitter` and `embed_*` keys.
    pub dataset: PathBuf,
    pub subjects: usize,
    pub views: usize,
    pub data_resolution: usize,
    pub jitter: f64,
    pub embed_dim: usize,
    pub embed_seed: u64,
    pub checkpoint_every_kimg: f64,
    pub snapshot_every_kimg: f64,
    pub snapshot_samples: usize,
    pub eval_every_kimg: f64,
    pub n_eval: usize,
    pub protocols: Vec<ProtocolKind>,
    pub double_precision: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            representation: PlaneKind::HyPlane,
            strategy: StrategyKind::SemanticFront,
            vicico: false,
            lambda_vicico: 1.0,
            p_swap: SwapSchedule::Auto,
            render_resolution: 16,
            upsample_factor: 2,
            samples_per_ray: 24,
            stratified: true,
            plane_resolution: 32,
            plane_channels: 16,
            grid_depth: 3,
            z_dim: 64,
            w_dim: 64,
            mapping_layers: 2,
            synth_channels: 32,
            decoder_hidden: 32,
            upsampler_hidden: 16,
            d_channels: 32,
            d_features: 64,
            lr_g: 2.5e-3,
            lr_d: 2.5e-3,
            lambda_r1: 1.0,
            r1_interval: 16,
            batch: 8,
            total_kimg: 300.0,
            data_seed: 0,
            model_seed: 0,
            eval_seed: 0,
            dataset: PathBuf::new(),
            subjects: 500,
            views: 8,
            data_resolution: 32,
            jitter: 0.0,
            embed_dim: DEFAULT_EMBED_DIM,
            embed_seed: DEFAULT_EMBED_SEED,
            checkpoint_every_kimg: 50.0,
            snapshot_every_kimg: 10.0,
            snapshot_samples: 64,
            eval_every_kimg: 0.0,
            n_eval: DEFAULT_EVAL,
            protocols: ProtocolKind::ALL.to_vec(),
            double_precision: false,
        }
    }
}

/// Keys in canonical order.
pub const KEYS: &[&str] = &[
    "name",
    "representation",
    "strategy",
    "vicico",
    "lambda_vicico",
    "p_swap",
    "render_resolution",
    "upsample_factor",
    "samples_per_ray",
    "stratified",
    "plane_resolution",
    "plane_channels",
    "grid_depth",
    "z_dim",
    "w_dim",
    "mapping_layers",
    "synth_channels",
    "decoder_hidden",
    "upsampler_hidden",
    "d_channels",
    "d_features",
    "lr_g",
    "lr_d",
    "lambda_r1",
    "r1_interval",
    "batch",
    "total_kimg",
    "data_seed",
    "model_seed",
    "eval_seed",
    "dataset",
    "subjects",
    "views",
    "data_resolution",
    "jitter",
    "embed_dim",
    "embed_seed",
    "checkpoint_every_kimg",
    "snapshot_every_kimg",
    "snapshot_samples",
    "eval_every_kimg",
    "n_eval",
    "protocols",
    "double_precision",
];

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "name" => self.name.clone(),
            "representation" => self.representation.to_string(),
            "strategy" => self.strategy.to_string(),
            "vicico" => self.vicico.to_string(),
            "lambda_vicico" => self.lambda_vicico.to_string(),
            "p_swap" => self.p_swap.to_string(),
            "render_resolution" => self.render_resolution.to_string(),
            "upsample_factor" => self.upsample_factor.to_string(),
            "samples_per_ray" => self.samples_per_ray.to_string(),
            "stratified" => self.stratified.to_string(),
            "plane_resolution" => self.plane_resolution.to_string(),
            "plane_channels" => self.plane_channels.to_string(),
            "grid_depth" => self.grid_depth.to_string(),
            "z_dim" => self.z_dim.to_string(),
            "w_dim" => self.w_dim.to_string(),
            "mapping_layers" => self.mapping_layers.to_string(),
            "synth_channels" => self.synth_channels.to_string(),
            "decoder_hidden" => self.decoder_hidden.to_string(),
            "upsampler_hidden" => self.upsampler_hidden.to_string(),
            "d_channels" => self.d_channels.to_string(),
            "d_features" => self.d_features.to_string(),
            "lr_g" => self.lr_g.to_string(),
            "lr_d" => self.lr_d.to_string(),
            "lambda_r1" => self.lambda_r1.to_string(),
            "r1_interval" => self.r1_interval.to_string(),
            "batch" => self.batch.to_string(),
            "total_kimg" => self.total_kimg.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "model_seed" => self.model_seed.to_string(),
            "eval_seed" => self.eval_seed.to_string(),
            "dataset" => self.dataset.display().to_string(),
            "subjects" => self.subjects.to_string(),
            "views" => self.views.to_string(),
            "data_resolution" => self.data_resolution.to_string(),
            "jitter" => self.jitter.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "embed_seed" => self.embed_seed.to_string(),
            "checkpoint_every_kimg" => self.checkpoint_every_kimg.to_string(),
            "snapshot_every_kimg" => self.snapshot_every_kimg.to_string(),
            "snapshot_samples" => self.snapshot_samples.to_string(),
            "eval_every_kimg" => self.eval_every_kimg.to_string(),
            "n_eval" => self.n_eval.to_string(),
            "protocols" => self.protocols.iter().map(|p| p.name()).collect::<Vec<_>>().join(","),
            "double_precision" => self.double_precision.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "name" => {
                if v.is_empty() || v.contains(|c: char| c == '/' || c == '\\' || c.is_whitespace()) {
                    return Err(Error::invalid(format!("name: '{v}' must be a non-empty single path segment")));
                }
                self.name = v.to_string();
            }
            "representation" => self.representation = v.parse()?,
            "strategy" => self.strategy = v.parse()?,
            "vicico" => self.vicico = parse_bool(v, key)?,
            "lambda_vicico" => self.lambda_vicico = parse_num(v, key)?,
            "p_swap" => self.p_swap = v.parse()?,
            "render_resolution" => self.render_resolution = parse_num(v, key)?,
            "upsample_factor" => self.upsample_factor = parse_num(v, key)?,
            "samples_per_ray" => self.samples_per_ray = parse_num(v, key)?,
            "stratified" => self.stratified = parse_bool(v, key)?,
            "plane_resolution" => self.plane_resolution = parse_num(v, key)?,
            "plane_channels" => self.plane_channels = parse_num(v, key)?,
            "grid_depth" => self.grid_depth = parse_num(v, key)?,
            "z_dim" => self.z_dim = parse_num(v, key)?,
            "w_dim" => self.w_dim = parse_num(v, key)?,
            "mapping_layers" => self.mapping_layers = parse_num(v, key)?,
            "synth_channels" => self.synth_channels = parse_num(v, key)?,
            "decoder_hidden" => self.decoder_hidden = parse_num(v, key)?,
            "upsampler_hidden" => self.upsampler_hidden = parse_num(v, key)?,
            "d_channels" => self.d_channels = parse_num(v, key)?,
            "d_features" => self.d_features = parse_num(v, key)?,
            "lr_g" => self.lr_g = parse_num(v, key)?,
            "lr_d" => self.lr_d = parse_num(v, key)?,
            "lambda_r1" => self.lambda_r1 = parse_num(v, key)?,
            "r1_interval" => self.r1_interval = parse_num(v, key)?,
            "batch" => self.batch = parse_num(v, key)?,
            "total_kimg" => self.total_kimg = parse_num(v, key)?,
            "data_seed" => self.data_seed = parse_num(v, key)?,
            "model_seed" => self.model_seed = parse_num(v, key)?,
            "eval_seed" => self.eval_seed = parse_num(v, key)?,
            "dataset" => self.dataset = PathBuf::from(v),
            "subjects" => self.subjects = parse_num(v, key)?,
            "views" => self.views = parse_num(v, key)?,
            "data_resolution" => self.data_resolution = parse_num(v, key)?,
            "jitter" => self.jitter = parse_num(v, key)?,
            "embed_dim" => self.embed_dim = parse_num(v, key)?,
            "embed_seed" => self.embed_seed = parse_num(v, key)?,
            "checkpoint_every_kimg" => self.checkpoint_every_kimg = parse_num(v, key)?,
            "snapshot_every_kimg" => self.snapshot_every_kimg = parse_num(v, key)?,
            "snapshot_samples" => self.snapshot_samples = parse_num(v, key)?,
            "eval_every_kimg" => self.eval_every_kimg = parse_num(v, key)?,
            "n_eval" => self.n_eval = parse_num(v, key)?,
            "protocols" => {
                self.protocols = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<Vec<_>>>()?
            }
            "double_precision" => self.double_precision = parse_bool(v, key)?,
            _ => return Err(Error::invalid(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key=value` pairs, collecting every failure.
    pub fn apply<K: AsRef<str>, V: AsRef<str>>(&mut self, pairs: &[(K, V)]) -> Result<()> {
        let errors: Vec<String> = pairs
            .iter()
            .filter_map(|(k, v)| self.set(k.as_ref().trim(), v.as_ref()).err().map(|e| e.to_string()))
            .collect();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
        let mut pairs = Vec::new();
        let mut errors = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => pairs.push((k.trim().to_string(), v.trim().to_string())),
                None => errors.push(format!("line {}: expected key=value, got '{line}'", i + 1)),
            }
        }
        if errors.is_empty() {
            Ok(pairs)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&Self::parse_pairs(text)?)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Ordered `(key, value)` pairs of every key.
    pub fn pairs(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .map(|k| (k.to_string(), self.get(k).expect("every listed key has a value")))
            .collect()
    }

    /// Canonical text: every key in fixed order.
    pub fn to_text(&self) -> String {
        self.pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }

    pub fn dtype(&self) -> DType {
        if self.double_precision {
            DType::F64
        } else {
            DType::F32
        }
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            resolution: self.render_resolution,
            upsample_factor: self.upsample_factor,
            samples_per_ray: self.samples_per_ray,
            stratified: self.stratified,
            ..RenderConfig::default()
        }
    }

    pub fn output_resolution(&self) -> usize {
        self.render_resolution * self.upsample_factor
    }

    pub fn gan_config(&self) -> GanConfig {
        let layout = PlaneLayout {
            kind: self.representation,
            resolution: self.plane_resolution,
            channels: self.plane_channels,
            grid_depth: self.grid_depth,
        };
        let mut g = GanConfig::new(
            ConditionStrategy::new(self.strategy, self.embed_dim),
            layout,
            self.render_config(),
        );
        g.z_dim = self.z_dim;
        g.w_dim = self.w_dim;
        g.mapping_layers = self.mapping_layers;
        g.synth_channels = self.synth_channels;
        g.decoder_hidden = self.decoder_hidden;
        g.upsampler_hidden = self.upsampler_hidden;
        g.d_channels = self.d_channels;
        g.d_features = self.d_features;
        g.lr_g = self.lr_g;
        g.lr_d = self.lr_d;
        g.lambda_r1 = self.lambda_r1;
        g.r1_interval = self.r1_interval as u64;
        g.vicico = self.vicico;
        g.lambda_vicico = self.lambda_vicico;
        g.p_swap = self.p_swap.value_at(0.0, self.strategy);
        g.dtype = self.dtype();
        g
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            subjects: self.subjects,
            views: self.views,
            jitter: self.jitter,
            seed: self.data_seed,
            resolution: self.data_resolution,
            embed_dim: self.embed_dim,
            embed_seed: self.embed_seed,
            normalize: true,
            poses: PoseDistribution::full_sphere(),
        }
    }

    pub fn total_steps(&self) -> u64 {
        (self.total_kimg * 1000.0 / self.batch.max(1) as f64).ceil() as u64
    }

    /// Steps between events scheduled every `kimg`; 0 disables.
    pub fn every_steps(&self, kimg: f64) -> u64 {
        if kimg <= 0.0 {
            0
        } else {
            ((kimg * 1000.0 / self.batch.max(1) as f64).round() as u64).max(1)
        }
    }

    pub fn kimg_at(&self, step: u64) -> f64 {
        step as f64 * self.batch as f64 / 1000.0
    }

    /// Every violated constraint.
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.gan_config().problems();
        p.extend(self.p_swap.problems());
        if self.batch == 0 {
            p.push("batch must be >= 1".into());
        }
        if self.vicico && self.batch < 2 {
            p.push(format!("vicico needs batch >= 2 to form negative pairs, got {}", self.batch));
        }
        if !(self.total_kimg >= 0.0 && self.total_kimg.is_finite()) {
            p.push(format!("total_kimg must be finite and >= 0, got {}", self.total_kimg));
        }
        let out = self.output_resolution();
        if out > 0 && (self.data_resolution < out || self.data_resolution % out != 0) {
            p.push(format!(
                "data_resolution {} must be a multiple of the output resolution {out}",
                self.data_resolution
            ));
        }
        if self.subjects == 0 || self.views < 2 {
            p.push("synthetic datasets need subjects >= 1 and views >= 2".into());
        }
        if self.embed_dim == 0 {
            p.push("embed_dim must be positive".into());
        }
        if self.snapshot_samples <= crate::metrics::DEFAULT_K {
            p.push(format!(
                "snapshot_samples must exceed the MKNND k = {}, got {}",
                crate::metrics::DEFAULT_K,
                self.snapshot_samples
            ));
        }
        if self.n_eval < crate::metrics::MIN_EVAL {
            p.push(format!("n_eval must be >= {}, got {}", crate::metrics::MIN_EVAL, self.n_eval));
        }
        for (k, v) in [
            ("checkpoint_every_kimg", self.checkpoint_every_kimg),
            ("snapshot_every_kimg", self.snapshot_every_kimg),
            ("eval_every_kimg", self.eval_every_kimg),
            ("jitter", self.jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                p.push(format!("{k} must be finite and >= 0, got {v}"));
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Checks that a dataset can feed this configuration.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let mut p = Vec::new();
        if ds.is_empty() {
            p.push("dataset is empty".to_string());
        }
        let out = self.output_resolution();
        if ds.meta.resolution % out != 0 {
            p.push(format!(
                "dataset resolution {} is not a multiple of the output resolution {out}",
                ds.meta.resolution
            ));
        }
        if self.strategy.is_semantic() && ds.meta.embed_dim != self.embed_dim {
            p.push(format!(
                "dataset conditions have {} dims, config embed_dim is {}",
                ds.meta.embed_dim, self.embed_dim
            ));
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut c = RunConfig::default();
        c.apply(&[("strategy", "view"), ("p_swap", "0:0.5,150:1"), ("lr_g", "0.0012345678901")])
            .unwrap();
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(RunConfig::default().hash(), c.hash());
        for k in KEYS {
            assert!(c.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn overrides_report_every_bad_key() {
        let mut c = RunConfig::default();
        match c.apply(&[("batch", "x"), ("nope", "1"), ("vicico", "maybe")]) {
            Err(Error::Config(list)) => assert_eq!(list.len(), 3),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::parse_pairs("a=1\n# c\n\nbroken").is_err());
    }

    #[test]
    fn validation_lists_all_problems() {
        let mut c = RunConfig::default();
        c.batch = 1;
        c.vicico = true;
        c.data_resolution = 20;
        c.n_eval = 10;
        let p = c.problems();
        assert!(p.iter().any(|s| s.contains("vicico")));
        assert!(p.iter().any(|s| s.contains("data_resolution")));
        assert!(p.iter().any(|s| s.contains("n_eval")));
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn swap_schedule_values() {
        let s: SwapSchedule = "0:0.5,150:1".parse().unwrap();
        assert_eq!(s, SwapSchedule::swap_to_one(150.0));
        assert_eq!(s.value_at(0.0, StrategyKind::View), 0.5);
        assert_eq!(s.value_at(149.9, StrategyKind::View), 0.5);
        assert_eq!(s.value_at(150.0, StrategyKind::View), 1.0);
        assert_eq!(SwapSchedule::Auto.value_at(10.0, StrategyKind::View), 0.5);
        assert_eq!(SwapSchedule::Auto.value_at(10.0, StrategyKind::SemanticFront), 0.0);
        assert_eq!("0.25".parse::<SwapSchedule>().unwrap(), SwapSchedule::constant(0.25));
        assert!("0:2".parse::<SwapSchedule>().map(|s| s.problems().len()).unwrap() == 1);
    }

    #[test]
    fn step_arithmetic() {
        let mut c = RunConfig::default();
        c.batch = 8;
        c.total_kimg = 0.1;
        assert_eq!(c.total_steps(), 13);
        assert_eq!(c.every_steps(0.0), 0);
        assert_eq!(c.every_steps(0.004), 1);
        assert_eq!(c.kimg_at(125), 1.0);
    }
}
