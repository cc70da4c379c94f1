//! Synthetic multi-view scenes with known object/part hierarchies.
//!
//! Each part is an isotropic blob of splats. Objects sit side by side along
//! x and their parts are stacked along y. Cameras orbit the origin on an arc
//! around the y axis. Label maps are produced by splatting ground-truth ids
//! and taking the heaviest id per pixel, then optionally corrupted.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::render::{label_by_weight, rasterize};
use crate::scene::{GaussianPoint, GroundTruth, Intrinsics, LabelMap, Scene, View};

/// Pixels need at least this much accumulated opacity to carry a label.
pub const LABEL_COVERAGE: f64 = 0.5;
const MAX_PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub objects: usize,
    pub parts_per_object: usize,
    pub points_per_part: usize,
    pub object_spacing: f64,
    pub part_spacing: f64,
    /// Standard deviation of every part blob.
    pub part_std: f64,
    pub point_scale: f64,
    pub opacity_min: f64,
    pub opacity_max: f64,
    pub feature_dim: usize,
    pub views: usize,
    pub orbit_radius: f64,
    /// Total azimuth sweep of the camera arc.
    pub arc_degrees: f64,
    pub elevation_degrees: f64,
    pub image_size: usize,
    pub focal: f64,
    /// Per-view probability of merging one part mask into its sibling.
    pub merge_prob: f64,
    /// Per-view probability of bisecting one part mask.
    pub split_prob: f64,
    /// Fraction of views eligible for corruption.
    pub noisy_view_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            objects: 2,
            parts_per_object: 2,
            points_per_part: 125,
            object_spacing: 2.0,
            part_spacing: 0.8,
            part_std: 0.12,
            point_scale: 0.06,
            opacity_min: 0.3,
            opacity_max: 0.7,
            feature_dim: 6,
            views: 8,
            orbit_radius: 5.0,
            arc_degrees: 90.0,
            elevation_degrees: 10.0,
            image_size: 64,
            focal: 70.0,
            merge_prob: 0.0,
            split_prob: 0.0,
            noisy_view_fraction: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("objects", self.objects),
            ("parts_per_object", self.parts_per_object),
            ("points_per_part", self.points_per_part),
            ("feature_dim", self.feature_dim),
            ("views", self.views),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Synth(format!("{name} must be at least 1")));
            }
        }
        for (name, p) in [
            ("merge_prob", self.merge_prob),
            ("split_prob", self.split_prob),
            ("noisy_view_fraction", self.noisy_view_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Synth(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.image_size < 8 {
            return Err(Error::Synth("image_size must be at least 8".into()));
        }
        if !(self.opacity_min > 0.0 && self.opacity_min <= self.opacity_max && self.opacity_max <= 1.0) {
            return Err(Error::Synth("opacity range must satisfy 0 < min ≤ max ≤ 1".into()));
        }
        if !(self.point_scale > 0.0 && self.part_std >= 0.0 && self.orbit_radius > 0.0 && self.focal > 0.0) {
            return Err(Error::Synth("scales, radius and focal length must be positive".into()));
        }
        Ok(())
    }

    pub fn part_count(&self) -> usize {
        self.objects * self.parts_per_object
    }
}

/// What the noise model did to one view's finest map. Part ids are global
/// ground-truth part ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ViewNoise {
    pub view_index: usize,
    /// `(part, sibling)`: the part's pixels took the sibling's label.
    pub merged: Option<(usize, usize)>,
    pub split: Option<usize>,
}

impl ViewNoise {
    pub fn is_corrupted(&self) -> bool {
        self.merged.is_some() || self.split.is_some()
    }

    /// Whether the corruption touched a part of `object`.
    pub fn touches_object(&self, object: usize, parts_per_object: usize) -> bool {
        let of = |p: usize| p / parts_per_object == object;
        self.merged.is_some_and(|(a, b)| of(a) || of(b)) || self.split.is_some_and(of)
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub scene: Scene,
    pub views: Vec<View>,
    /// Supervision maps per view, levels coarse to fine, after corruption.
    pub labels: Vec<Vec<LabelMap>>,
    /// Uncorrupted maps with the same ids as `labels` where untouched.
    pub clean_labels: Vec<Vec<LabelMap>>,
    pub noise: Vec<ViewNoise>,
}

fn part_centers(spec: &SynthSpec, jitter: f64, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let mut centers = Vec::with_capacity(spec.part_count());
    for o in 0..spec.objects {
        let mut base = Vector3::new(
            (o as f64 - (spec.objects as f64 - 1.0) / 2.0) * spec.object_spacing,
            0.0,
            0.0,
        );
        if jitter > 0.0 {
            base.x += rng.random_range(-jitter..=jitter);
            base.z += rng.random_range(-jitter..=jitter);
        }
        for p in 0..spec.parts_per_object {
            let dy = (p as f64 - (spec.parts_per_object as f64 - 1.0) / 2.0) * spec.part_spacing;
            centers.push(base + Vector3::new(0.0, dy, 0.0));
        }
    }
    centers
}

fn separated(spec: &SynthSpec, centers: &[Vector3<f64>]) -> bool {
    let min_gap = 6.0 * spec.part_std + 2.0 * spec.point_scale;
    let ppo = spec.parts_per_object;
    (0..centers.len())
        .all(|a| (a + 1..centers.len()).all(|b| a / ppo == b / ppo || (centers[a] - centers[b]).norm() >= min_gap))
}

/// Cameras on an arc around the y axis, all looking at the origin.
pub fn orbit_views(spec: &SynthSpec) -> Vec<View> {
    let size = spec.image_size;
    let intr = Intrinsics {
        fx: spec.focal,
        fy: spec.focal,
        cx: size as f64 / 2.0,
        cy: size as f64 / 2.0,
    };
    let el = spec.elevation_degrees.to_radians();
    (0..spec.views)
        .map(|v| {
            let t = if spec.views == 1 {
                0.5
            } else {
                v as f64 / (spec.views - 1) as f64
            };
            let az = (t - 0.5) * spec.arc_degrees.to_radians();
            let eye = spec.orbit_radius * Vector3::new(az.sin() * el.cos(), el.sin(), az.cos() * el.cos());
            View::look_at(eye, Vector3::zeros(), Vector3::y(), intr, size, size, v)
        })
        .collect()
}

/// Distinct random ids in `1..=4·count+16` for one view.
fn view_ids(count: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut pool: Vec<u32> = (1..=(4 * count + 16) as u32).collect();
    pool.shuffle(rng);
    pool.truncate(count);
    pool
}

fn split_mask(map: &mut LabelMap, label: u32, rng: &mut ChaCha8Rng) -> bool {
    let pixels: Vec<usize> = (0..map.labels.len()).filter(|&i| map.labels[i] == label).collect();
    if pixels.len() < 2 {
        return false;
    }
    let w = map.width;
    let n = pixels.len() as f64;
    let cy = pixels.iter().map(|&i| (i / w) as f64).sum::<f64>() / n;
    let cx = pixels.iter().map(|&i| (i % w) as f64).sum::<f64>() / n;
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (s, c) = theta.sin_cos();
    let fresh = map.max_label() + 1;
    let mut moved = 0;
    for &i in &pixels {
        if ((i % w) as f64 - cx) * c + ((i / w) as f64 - cy) * s > 0.0 {
            map.labels[i] = fresh;
            moved += 1;
        }
    }
    moved > 0 && moved < pixels.len()
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut centers = None;
    for attempt in 0..MAX_PLACEMENT_ATTEMPTS {
        let jitter = if attempt == 0 {
            0.0
        } else {
            0.25 * spec.object_spacing.max(spec.part_std)
        };
        let c = part_centers(spec, jitter, &mut rng);
        if separated(spec, &c) {
            centers = Some(c);
            break;
        }
    }
    let centers = centers.ok_or_else(|| {
        Error::Synth(format!(
            "objects still overlap after {MAX_PLACEMENT_ATTEMPTS} placements"
        ))
    })?;

    let blob = Normal::new(0.0, spec.part_std).map_err(|e| Error::Synth(e.to_string()))?;
    let mut scene = Scene::new(spec.feature_dim);
    let mut truth = Vec::new();
    for (part, center) in centers.iter().enumerate() {
        let object = part / spec.parts_per_object;
        let shade = (part + 1) as f64 / (spec.part_count() + 1) as f64;
        for _ in 0..spec.points_per_part {
            let offset = Vector3::new(blob.sample(&mut rng), blob.sample(&mut rng), blob.sample(&mut rng));
            let opacity = rng.random_range(spec.opacity_min..=spec.opacity_max);
            let mut p = GaussianPoint::new(center + offset, spec.point_scale, opacity, spec.feature_dim);
            p.color = [shade, 1.0 - shade, (object as f64 + 0.5) / spec.objects as f64];
            scene.points.push(p);
            truth.push(GroundTruth {
                whole: object as i64,
                part: part as i64,
                subpart: part as i64,
            });
        }
    }
    scene.ground_truth = Some(truth);
    scene.validate()?;

    let views = orbit_views(spec);
    let eligible = {
        let count = (spec.noisy_view_fraction * spec.views as f64).round() as usize;
        let mut order: Vec<usize> = (0..spec.views).collect();
        order.shuffle(&mut rng);
        let mut e = vec![false; spec.views];
        order.into_iter().take(count).for_each(|v| e[v] = true);
        e
    };

    let mut labels = Vec::new();
    let mut clean_labels = Vec::new();
    let mut noise = Vec::new();
    let gt = scene.ground_truth.as_ref().expect("set above");
    for view in &views {
        let table = rasterize(&scene, view);
        let whole_ids = view_ids(spec.objects, &mut rng);
        let part_ids = view_ids(spec.part_count(), &mut rng);
        let coarse: Vec<Option<u32>> = gt.iter().map(|g| Some(whole_ids[g.whole as usize])).collect();
        let fine: Vec<Option<u32>> = gt.iter().map(|g| Some(part_ids[g.part as usize])).collect();
        let clean = vec![
            label_by_weight(&table, &coarse, LABEL_COVERAGE, 0),
            label_by_weight(&table, &fine, LABEL_COVERAGE, 1),
        ];
        let mut noisy = clean.clone();
        let mut record = ViewNoise {
            view_index: view.view_index,
            ..Default::default()
        };
        if eligible[view.view_index] {
            let visible: Vec<usize> = (0..spec.part_count())
                .filter(|&p| noisy[1].labels.contains(&part_ids[p]))
                .collect();
            if spec.parts_per_object > 1 && rng.random::<f64>() < spec.merge_prob {
                let candidates: Vec<(usize, usize)> = visible
                    .iter()
                    .flat_map(|&p| {
                        let base = p / spec.parts_per_object * spec.parts_per_object;
                        let visible = &visible;
                        (base..base + spec.parts_per_object)
                            .filter(move |&q| q != p && visible.contains(&q))
                            .map(move |q| (p, q))
                    })
                    .collect();
                if let Some(&(p, q)) = candidates.get(rng.random_range(0..candidates.len().max(1))) {
                    for l in noisy[1].labels.iter_mut() {
                        if *l == part_ids[p] {
                            *l = part_ids[q];
                        }
                    }
                    record.merged = Some((p, q));
                }
            }
            if rng.random::<f64>() < spec.split_prob && !visible.is_empty() {
                let untouched: Vec<usize> = visible
                    .iter()
                    .copied()
                    .filter(|&p| record.merged.is_none_or(|(a, _)| a != p))
                    .collect();
                if !untouched.is_empty() {
                    let p = untouched[rng.random_range(0..untouched.len())];
                    if split_mask(&mut noisy[1], part_ids[p], &mut rng) {
                        record.split = Some(p);
                    }
                }
            }
        }
        labels.push(noisy);
        clean_labels.push(clean);
        noise.push(record);
    }
    Ok(SynthData {
        scene,
        views,
        labels,
        clean_labels,
        noise,
    })
}

/// Perturbation levels for the robustness sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub taus: Vec<f64>,
    /// Base seed for noise draws; each run offsets it by the scene seed.
    pub seed: u64,
    /// Scene seeds per cell.
    pub seeds: usize,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            taus: vec![0.0, 0.05, 0.10, 0.15, 0.20],
            seed: 0,
            seeds: 10,
        }
    }
}

/// Adds `τ·σ_c·z` to every feature channel, where `σ_c` is the population
/// standard deviation of channel `c` over all points and `z ~ N(0, 1)`.
pub fn perturb_features(scene: &Scene, tau: f64, seed: u64) -> Scene {
    let mut out = scene.clone();
    if tau == 0.0 || scene.is_empty() {
        return out;
    }
    let sigma = channel_std(scene);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    for p in &mut out.points {
        for (v, s) in p.feature.iter_mut().zip(&sigma) {
            let z: f64 = unit.sample(&mut rng);
            *v += tau * s * z;
        }
    }
    out
}

pub fn channel_std(scene: &Scene) -> Vec<f64> {
    let n = scene.len().max(1) as f64;
    (0..scene.feature_dim)
        .map(|c| {
            let mean = scene.points.iter().map(|p| p.feature[c]).sum::<f64>() / n;
            (scene.points.iter().map(|p| (p.feature[c] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}
