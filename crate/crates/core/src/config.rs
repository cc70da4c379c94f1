//! Run configuration and its line-based `key = value` file format.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::csd::{OverlapMetric, DEFAULT_MATCH_THRESHOLD, DEFAULT_WINDOW};
use crate::denoise::DenoiseParams;
use crate::error::{Error, Result};
use crate::optim::OptimizerKind;
use crate::render::DEFAULT_REGION_THRESHOLD;
use crate::synth::{NoiseSpec, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewSchedule {
    RoundRobin,
    Random,
}

impl FromStr for ViewSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "round_robin" => Ok(ViewSchedule::RoundRobin),
            "random" => Ok(ViewSchedule::Random),
            other => Err(Error::Config(format!("unknown view schedule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub global_steps: usize,
    pub local_steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Clusters per depth; empty means derive from the mask forests.
    pub k_schedule: Vec<usize>,
    pub position_weight: f64,
    pub csd_enabled: bool,
    pub csd_window: usize,
    pub match_threshold: f64,
    pub overlap_metric: OverlapMetric,
    pub csd_interval: usize,
    pub region_threshold: f64,
    pub denoise_enabled: bool,
    pub denoise: DenoiseParams,
    pub max_tree_depth: usize,
    pub min_cluster_points: usize,
    /// Mask size floor; `None` scales the full-resolution default.
    pub min_mask_pixels: Option<usize>,
    pub init_range: f64,
    /// Largest allowed gradient norm per step; 0 disables clipping.
    pub grad_clip: f64,
    pub view_schedule: ViewSchedule,
    pub kmeans_iters: usize,
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            global_steps: 2000,
            local_steps: 3000,
            lr: 2.5e-3,
            optimizer: OptimizerKind::adam(),
            k_schedule: Vec::new(),
            position_weight: 1.0,
            csd_enabled: true,
            csd_window: DEFAULT_WINDOW,
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            overlap_metric: OverlapMetric::Recall,
            csd_interval: 100,
            region_threshold: DEFAULT_REGION_THRESHOLD,
            denoise_enabled: true,
            denoise: DenoiseParams::default(),
            max_tree_depth: 2,
            min_cluster_points: crate::cluster::DEFAULT_MIN_CLUSTER_POINTS,
            min_mask_pixels: None,
            init_range: 0.01,
            grad_clip: 1000.0,
            view_schedule: ViewSchedule::RoundRobin,
            kmeans_iters: crate::cluster::DEFAULT_MAX_ITERS,
            kmeans_restarts: crate::cluster::DEFAULT_RESTARTS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.global_steps == 0 || self.local_steps == 0 {
            return Err(Error::Config("step counts must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.max_tree_depth == 0 {
            return Err(Error::Config("max_tree_depth must be at least 1".into()));
        }
        if self.k_schedule.contains(&0) {
            return Err(Error::Config("k_schedule entries must be at least 1".into()));
        }
        if self.kmeans_restarts == 0 {
            return Err(Error::Config("kmeans_restarts must be at least 1".into()));
        }
        if self.csd_window == 0 || self.csd_interval == 0 {
            return Err(Error::Config("csd_window and csd_interval must be at least 1".into()));
        }
        if self.position_weight < 0.0 || self.init_range < 0.0 || !(self.grad_clip >= 0.0) {
            return Err(Error::Config(
                "position_weight, init_range and grad_clip must be non-negative".into(),
            ));
        }
        let d = &self.denoise;
        if !(d.position_multiplier > 0.0 && d.feature_multiplier > 0.0) {
            return Err(Error::Config("denoise multipliers must be positive".into()));
        }
        if d.obb_scale < 1.0 {
            return Err(Error::Config("denoise.obb_scale must be at least 1".into()));
        }
        if d.pair_sample_cap == 0 {
            return Err(Error::Config("denoise.pair_sample_cap must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub sweep: NoiseSpec,
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("invalid value {raw:?} for `{key}`")))
}

fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|v| value(key, v.trim())).collect()
}

fn flag(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {raw:?} for `{key}`"))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), raw.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        if self.sweep.taus.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::Config("sweep.taus must be non-negative".into()));
        }
        Ok(())
    }

    /// Sets one key; the same names the file format uses.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "global_steps" => t.global_steps = value(key, raw)?,
            "local_steps" => t.local_steps = value(key, raw)?,
            "lr" => t.lr = value(key, raw)?,
            "optimizer" => {
                let kind: OptimizerKind = raw.parse()?;
                // keep moment settings already given
                t.optimizer = match (kind, t.optimizer) {
                    (OptimizerKind::Adam { .. }, prev @ OptimizerKind::Adam { .. }) => prev,
                    (k, _) => k,
                };
            }
            "beta1" | "beta2" | "eps" => {
                let v: f64 = value(key, raw)?;
                let OptimizerKind::Adam { beta1, beta2, eps } = &mut t.optimizer else {
                    return Err(Error::Config(format!("`{key}` needs optimizer = adam")));
                };
                *match key {
                    "beta1" => beta1,
                    "beta2" => beta2,
                    _ => eps,
                } = v;
            }
            "k_schedule" => t.k_schedule = list(key, raw)?,
            "position_weight" => t.position_weight = value(key, raw)?,
            "csd_enabled" => t.csd_enabled = flag(key, raw)?,
            "csd_window" => t.csd_window = value(key, raw)?,
            "match_threshold" => t.match_threshold = value(key, raw)?,
            "overlap_metric" => t.overlap_metric = raw.parse().map_err(Error::Config)?,
            "csd_interval" => t.csd_interval = value(key, raw)?,
            "region_threshold" => t.region_threshold = value(key, raw)?,
            "denoise_enabled" => t.denoise_enabled = flag(key, raw)?,
            "denoise.position_multiplier" => t.denoise.position_multiplier = value(key, raw)?,
            "denoise.feature_multiplier" => t.denoise.feature_multiplier = value(key, raw)?,
            "denoise.obb_scale" => t.denoise.obb_scale = value(key, raw)?,
            "denoise.pair_sample_cap" => t.denoise.pair_sample_cap = value(key, raw)?,
            "denoise.square_thresholds" => t.denoise.square_thresholds = flag(key, raw)?,
            "max_tree_depth" => t.max_tree_depth = value(key, raw)?,
            "min_cluster_points" => t.min_cluster_points = value(key, raw)?,
            "min_mask_pixels" => t.min_mask_pixels = if raw == "auto" { None } else { Some(value(key, raw)?) },
            "init_range" => t.init_range = value(key, raw)?,
            "grad_clip" => t.grad_clip = value(key, raw)?,
            "view_schedule" => t.view_schedule = raw.parse()?,
            "kmeans_iters" => t.kmeans_iters = value(key, raw)?,
            "kmeans_restarts" => t.kmeans_restarts = value(key, raw)?,
            "seed" => {
                t.seed = value(key, raw)?;
                s.seed = t.seed;
            }
            "synth.objects" => s.objects = value(key, raw)?,
            "synth.parts_per_object" => s.parts_per_object = value(key, raw)?,
            "synth.points_per_part" => s.points_per_part = value(key, raw)?,
            "synth.object_spacing" => s.object_spacing = value(key, raw)?,
            "synth.part_spacing" => s.part_spacing = value(key, raw)?,
            "synth.part_std" => s.part_std = value(key, raw)?,
            "synth.point_scale" => s.point_scale = value(key, raw)?,
            "synth.opacity_min" => s.opacity_min = value(key, raw)?,
            "synth.opacity_max" => s.opacity_max = value(key, raw)?,
            "synth.feature_dim" => s.feature_dim = value(key, raw)?,
            "synth.views" => s.views = value(key, raw)?,
            "synth.orbit_radius" => s.orbit_radius = value(key, raw)?,
            "synth.arc_degrees" => s.arc_degrees = value(key, raw)?,
            "synth.elevation_degrees" => s.elevation_degrees = value(key, raw)?,
            "synth.image_size" => s.image_size = value(key, raw)?,
            "synth.focal" => s.focal = value(key, raw)?,
            "synth.merge_prob" => s.merge_prob = value(key, raw)?,
            "synth.split_prob" => s.split_prob = value(key, raw)?,
            "synth.noisy_view_fraction" => s.noisy_view_fraction = value(key, raw)?,
            "sweep.taus" => self.sweep.taus = list(key, raw)?,
            "sweep.seed" => self.sweep.seed = value(key, raw)?,
            "sweep.seeds" => self.sweep.seeds = value(key, raw)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, parseable by [`Config::parse`].
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let s = &self.synth;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", t.seed.to_string());
        kv("global_steps", t.global_steps.to_string());
        kv("local_steps", t.local_steps.to_string());
        kv("lr", t.lr.to_string());
        kv("optimizer", t.optimizer.to_string());
        if let OptimizerKind::Adam { beta1, beta2, eps } = t.optimizer {
            kv("beta1", beta1.to_string());
            kv("beta2", beta2.to_string());
            kv("eps", eps.to_string());
        }
        kv("k_schedule", join(&t.k_schedule));
        kv("position_weight", t.position_weight.to_string());
        kv("csd_enabled", t.csd_enabled.to_string());
        kv("csd_window", t.csd_window.to_string());
        kv("match_threshold", t.match_threshold.to_string());
        kv("overlap_metric", t.overlap_metric.to_string());
        kv("csd_interval", t.csd_interval.to_string());
        kv("region_threshold", t.region_threshold.to_string());
        kv("denoise_enabled", t.denoise_enabled.to_string());
        kv("denoise.position_multiplier", t.denoise.position_multiplier.to_string());
        kv("denoise.feature_multiplier", t.denoise.feature_multiplier.to_string());
        kv("denoise.obb_scale", t.denoise.obb_scale.to_string());
        kv("denoise.pair_sample_cap", t.denoise.pair_sample_cap.to_string());
        kv("denoise.square_thresholds", t.denoise.square_thresholds.to_string());
        kv("max_tree_depth", t.max_tree_depth.to_string());
        kv("min_cluster_points", t.min_cluster_points.to_string());
        kv(
            "min_mask_pixels",
            t.min_mask_pixels.map_or("auto".into(), |v| v.to_string()),
        );
        kv("init_range", t.init_range.to_string());
        kv("grad_clip", t.grad_clip.to_string());
        kv(
            "view_schedule",
            match t.view_schedule {
                ViewSchedule::RoundRobin => "round_robin",
                ViewSchedule::Random => "random",
            }
            .into(),
        );
        kv("kmeans_iters", t.kmeans_iters.to_string());
        kv("kmeans_restarts", t.kmeans_restarts.to_string());
        kv("synth.objects", s.objects.to_string());
        kv("synth.parts_per_object", s.parts_per_object.to_string());
        kv("synth.points_per_part", s.points_per_part.to_string());
        kv("synth.object_spacing", s.object_spacing.to_string());
        kv("synth.part_spacing", s.part_spacing.to_string());
        kv("synth.part_std", s.part_std.to_string());
        kv("synth.point_scale", s.point_scale.to_string());
        kv("synth.opacity_min", s.opacity_min.to_string());
        kv("synth.opacity_max", s.opacity_max.to_string());
        kv("synth.feature_dim", s.feature_dim.to_string());
        kv("synth.views", s.views.to_string());
        kv("synth.orbit_radius", s.orbit_radius.to_string());
        kv("synth.arc_degrees", s.arc_degrees.to_string());
        kv("synth.elevation_degrees", s.elevation_degrees.to_string());
        kv("synth.image_size", s.image_size.to_string());
        kv("synth.focal", s.focal.to_string());
        kv("synth.merge_prob", s.merge_prob.to_string());
        kv("synth.split_prob", s.split_prob.to_string());
        kv("synth.noisy_view_fraction", s.noisy_view_fraction.to_string());
        kv("sweep.taus", join(&self.sweep.taus));
        kv("sweep.seed", self.sweep.seed.to_string());
        kv("sweep.seeds", self.sweep.seeds.to_string());
        out
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}
