//! Feature optimization: the global stage over the whole scene and the local
//! stage over one cluster's subscene.
//!
//! Geometry is frozen, so every contribution table is built once and reused
//! for all steps. Only point features change.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{TrainConfig, ViewSchedule};
use crate::csd::{csd_pass, matched_masks, CsdInput, CsdMode, CsdRecord};
use crate::error::{Error, Result};
use crate::forest::{build_view_forest, MaskForest};
use crate::loss::{global_loss, local_loss, LossTerms, Mask};
use crate::render::{
    backprop_features, rasterize, rasterize_subset, region_from_table, render_features, ContributionTable,
};
use crate::scene::{LabelMap, Scene, View};

/// A view with its refined supervision and cached full-scene table.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub view: View,
    pub forest: MaskForest,
    pub table: ContributionTable,
    /// Refined masks per level, ordered by label.
    pub masks: Vec<Vec<Mask>>,
}

impl TrainView {
    pub fn new(scene: &Scene, view: View, forest: MaskForest) -> Self {
        let table = rasterize(scene, &view);
        let masks = (0..forest.level_count())
            .map(|l| forest.masks(l).into_iter().map(|(id, px)| Mask::new(id, px)).collect())
            .collect();
        Self {
            view,
            forest,
            table,
            masks,
        }
    }

    pub fn level_masks(&self, level: usize) -> &[Mask] {
        self.masks.get(level).map_or(&[], Vec::as_slice)
    }
}

/// Refines every view's maps into a forest and rasterizes the view.
pub fn prepare_views(
    scene: &Scene,
    views: &[View],
    labels: &[Vec<LabelMap>],
    min_mask_pixels: usize,
) -> Result<Vec<TrainView>> {
    if views.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} views but {} label sets",
            views.len(),
            labels.len()
        )));
    }
    views
        .par_iter()
        .zip(labels)
        .map(|(view, maps)| {
            let forest = build_view_forest(maps, view.view_index, min_mask_pixels)?;
            Ok(TrainView::new(scene, view.clone(), forest))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub stage: String,
    pub view: usize,
    pub m: usize,
    pub pull: f64,
    pub push: f64,
    pub total: f64,
    pub grad_norm: f64,
}

pub fn logs_to_csv(logs: &[StepLog]) -> String {
    let mut out = String::from("step,stage,view,m,pull,push,total,grad_norm\n");
    for l in logs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            l.step, l.stage, l.view, l.m, l.pull, l.push, l.total, l.grad_norm
        ));
    }
    out
}

/// Uniform features in `[-range, range]` per channel.
pub fn init_features(scene: &mut Scene, range: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in &mut scene.points {
        for v in &mut p.feature {
            *v = if range > 0.0 {
                rng.random_range(-range..=range)
            } else {
                0.0
            };
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub logs: Vec<StepLog>,
    pub csd: Vec<CsdRecord>,
    pub warnings: Vec<String>,
}

struct Schedule {
    kind: ViewSchedule,
    rng: ChaCha8Rng,
}

impl Schedule {
    fn new(kind: ViewSchedule, seed: u64) -> Self {
        Self {
            kind,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn pick(&mut self, step: usize, len: usize) -> usize {
        match self.kind {
            ViewSchedule::RoundRobin => step % len,
            ViewSchedule::Random => self.rng.random_range(0..len),
        }
    }
}

fn gather(scene: &Scene, points: &[usize]) -> Vec<f64> {
    points
        .iter()
        .flat_map(|&i| scene.points[i].feature.iter().copied())
        .collect()
}

fn scatter(scene: &mut Scene, points: &[usize], params: &[f64]) {
    let d = scene.feature_dim;
    for (k, &i) in points.iter().enumerate() {
        scene.points[i].feature.copy_from_slice(&params[k * d..(k + 1) * d]);
    }
}

/// Loss gradient restricted to `points`, flattened in the same order.
fn point_grad(terms: &LossTerms, table: &ContributionTable, points: &[usize], dim: usize) -> Result<Vec<f64>> {
    let full = backprop_features(&terms.grad, table)?;
    Ok(points
        .iter()
        .flat_map(|&i| full[i * dim..(i + 1) * dim].iter().copied())
        .collect())
}

fn clip(mut grad: Vec<f64>, max_norm: f64) -> Vec<f64> {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    grad
}

fn log_step(stage: &str, step: usize, view: usize, terms: &LossTerms, grad: &[f64]) -> Result<StepLog> {
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !terms.total().is_finite() || !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            stage: stage.to_string(),
            step,
        });
    }
    Ok(StepLog {
        step,
        stage: stage.to_string(),
        view,
        m: terms.mask_count,
        pull: terms.pull,
        push: terms.push,
        total: terms.total(),
        grad_norm,
    })
}

/// Pull plus push on each view's coarsest masks, one view per step.
pub fn train_global(scene: &mut Scene, views: &[TrainView], cfg: &TrainConfig) -> Result<TrainReport> {
    train_global_steps(scene, views, cfg, cfg.global_steps)
}

pub fn train_global_steps(
    scene: &mut Scene,
    views: &[TrainView],
    cfg: &TrainConfig,
    steps: usize,
) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    let active: Vec<&TrainView> = views
        .iter()
        .filter(|v| {
            let ok = !v.level_masks(0).is_empty();
            if !ok {
                report
                    .warnings
                    .push(format!("view {} has no level-0 masks; skipped", v.view.view_index));
            }
            ok
        })
        .collect();
    if active.is_empty() || steps == 0 {
        return Ok(report);
    }
    let all: Vec<usize> = (0..scene.len()).collect();
    let mut params = gather(scene, &all);
    let mut opt = crate::optim::Optimizer::new(cfg.optimizer, cfg.lr, params.len());
    let mut schedule = Schedule::new(cfg.view_schedule, cfg.seed);
    for step in 0..steps {
        let tv = active[schedule.pick(step, active.len())];
        let fmap = render_features(scene, &tv.table)?;
        let terms = global_loss(&fmap, tv.level_masks(0));
        let grad = point_grad(&terms, &tv.table, &all, scene.feature_dim)?;
        report
            .logs
            .push(log_step("global", step, tv.view.view_index, &terms, &grad)?);
        opt.step(&mut params, &clip(grad, cfg.grad_clip));
        scatter(scene, &all, &params);
    }
    Ok(report)
}

struct LocalView<'a> {
    source: &'a TrainView,
    table: ContributionTable,
    region: Vec<bool>,
    matched: Vec<Mask>,
}

/// Local contrastive training of one node's points on its subscene.
///
/// Supervision comes from the masks at `level` that the node's rendered
/// region matches. With CSD enabled each view's terms are gated by its
/// segmentation mode; otherwise pull and push always apply. Features of
/// points outside `points` are never touched.
pub fn train_local(
    scene: &mut Scene,
    points: &[usize],
    level: usize,
    views: &[TrainView],
    cfg: &TrainConfig,
    stage: &str,
) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    if points.is_empty() {
        report.warnings.push(format!("{stage}: empty node; skipped"));
        return Ok(report);
    }
    let mut locals = Vec::new();
    for tv in views {
        let table = rasterize_subset(scene, &tv.view, points)?;
        let region = region_from_table(&table, cfg.region_threshold);
        if !region.iter().any(|b| *b) {
            continue;
        }
        let masks = tv.level_masks(level);
        let matched = matched_masks(&region, masks, cfg.match_threshold, cfg.overlap_metric)
            .into_iter()
            .map(|i| masks[i].clone())
            .collect();
        locals.push(LocalView {
            source: tv,
            table,
            region,
            matched,
        });
    }
    if locals.is_empty() {
        report
            .warnings
            .push(format!("{stage}: node invisible from every view; skipped"));
        return Ok(report);
    }
    let run_csd = |locals: &[LocalView]| -> Vec<CsdRecord> {
        let inputs: Vec<CsdInput> = locals
            .iter()
            .map(|l| CsdInput {
                view_index: l.source.view.view_index,
                region: &l.region,
                masks: l.source.level_masks(level),
            })
            .collect();
        csd_pass(&inputs, cfg.csd_window, cfg.match_threshold, cfg.overlap_metric)
    };
    let mut records = run_csd(&locals);
    let mut modes: HashMap<usize, CsdMode> = records.iter().map(|r| (r.view_index, r.mode)).collect();

    let mut params = gather(scene, points);
    let mut opt = crate::optim::Optimizer::new(cfg.optimizer, cfg.lr, params.len());
    let mut schedule = Schedule::new(cfg.view_schedule, cfg.seed ^ points[0] as u64);
    for step in 0..cfg.local_steps {
        if step > 0 && step % cfg.csd_interval == 0 {
            records = run_csd(&locals);
            modes = records.iter().map(|r| (r.view_index, r.mode)).collect();
        }
        let lv = &locals[schedule.pick(step, locals.len())];
        let vi = lv.source.view.view_index;
        let mode = if cfg.csd_enabled { modes[&vi] } else { CsdMode::Optimal };
        let fmap = render_features(scene, &lv.table)?;
        let terms = local_loss(&fmap, &lv.matched, &lv.region, mode);
        let grad = point_grad(&terms, &lv.table, points, scene.feature_dim)?;
        report.logs.push(log_step(stage, step, vi, &terms, &grad)?);
        opt.step(&mut params, &clip(grad, cfg.grad_clip));
        scatter(scene, points, &params);
    }
    report.csd = records;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::forest::{default_min_mask_pixels, FULL_RES_PIXELS};
    use crate::loss::prototype;
    use crate::metrics::cosine_summary;
    use crate::synth::{generate, SynthSpec};

    fn setup(spec: &SynthSpec) -> (Scene, Vec<TrainView>) {
        let data = generate(spec).unwrap();
        let min = default_min_mask_pixels(spec.image_size, spec.image_size, FULL_RES_PIXELS);
        let mut scene = data.scene;
        init_features(&mut scene, 0.01, spec.seed);
        let views = prepare_views(&scene, &data.views, &data.labels, min).unwrap();
        (scene, views)
    }

    fn short(steps: usize) -> TrainConfig {
        TrainConfig {
            global_steps: steps,
            local_steps: steps,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_leave_scene_unchanged() {
        let (mut scene, views) = setup(&SynthSpec::default());
        let before = scene.clone();
        let r = train_global_steps(&mut scene, &views, &short(1), 0).unwrap();
        assert!(r.logs.is_empty());
        assert_eq!(scene, before);
    }

    #[test]
    fn geometry_frozen_and_loss_finite() {
        let (mut scene, views) = setup(&SynthSpec::default());
        let before = scene.clone();
        let r = train_global(&mut scene, &views, &short(200)).unwrap();
        assert_eq!(r.logs.len(), 200);
        assert!(r.logs.iter().all(|l| l.total.is_finite()));
        for (a, b) in scene.points.iter().zip(&before.points) {
            assert_eq!(
                (a.position, a.scale, a.opacity, a.color),
                (b.position, b.scale, b.opacity, b.color)
            );
        }
        assert_ne!(scene.features(), before.features());
        let gt: Vec<i64> = scene.ground_truth.as_ref().unwrap().iter().map(|g| g.whole).collect();
        let s = cosine_summary(&scene.features(), &gt);
        assert!(s.intra > s.inter);
    }

    #[test]
    fn local_training_is_isolated() {
        let (mut scene, views) = setup(&SynthSpec::default());
        let node: Vec<usize> = (0..250).collect();
        let before = scene.clone();
        let r = train_local(&mut scene, &node, 1, &views, &short(50), "local:0").unwrap();
        assert_eq!(r.logs.len(), 50);
        assert!(!r.csd.is_empty());
        for i in 250..500 {
            assert_eq!(scene.points[i].feature, before.points[i].feature);
        }
        assert_ne!(scene.points[0].feature, before.points[0].feature);
    }

    #[test]
    fn invisible_node_is_a_no_op() {
        let (mut scene, views) = setup(&SynthSpec::default());
        scene.points[0].position.z = 1000.0;
        scene.points[0].position.x = 1000.0;
        let before = scene.clone();
        let r = train_local(&mut scene, &[0], 1, &views, &short(10), "local:x").unwrap();
        assert!(r.logs.is_empty());
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(scene, before);
    }

    #[test]
    fn optimal_views_match_ungated_training() {
        let (scene, views) = setup(&SynthSpec::default());
        let node: Vec<usize> = (0..250).collect();
        let mut a = scene.clone();
        let mut b = scene.clone();
        let ra = train_local(&mut a, &node, 1, &views, &short(1), "a").unwrap();
        assert_eq!(ra.csd[0].mode, CsdMode::Optimal);
        let off = TrainConfig {
            csd_enabled: false,
            ..short(1)
        };
        train_local(&mut b, &node, 1, &views, &off, "b").unwrap();
        assert_eq!(a.features(), b.features());
    }

    #[test]
    fn over_segmented_views_tighten_prototypes() {
        // one single-part object, so clean views carry one mask and never push
        let spec = SynthSpec {
            objects: 1,
            parts_per_object: 1,
            split_prob: 1.0,
            noisy_view_fraction: 0.25,
            seed: 2,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        let (mut scene, views) = setup(&spec);
        let node: Vec<usize> = (0..scene.len()).collect();
        let over: Vec<&TrainView> = views
            .iter()
            .filter(|v| data.noise[v.view.view_index].split.is_some())
            .collect();
        assert_eq!(over.len(), 2);
        let spread = |scene: &Scene| -> f64 {
            let mut total = 0.0;
            for tv in &over {
                let table = rasterize_subset(scene, &tv.view, &node).unwrap();
                let region = region_from_table(&table, 0.5);
                let fmap = render_features(scene, &table).unwrap();
                for m in tv.level_masks(1) {
                    let p = prototype(&fmap, m, Some(&region)).unwrap();
                    for &px in m.pixels.iter().filter(|&&px| region[px as usize]) {
                        total += fmap
                            .pixel(px as usize)
                            .iter()
                            .zip(&p.vector)
                            .map(|(a, b)| (a - b).powi(2))
                            .sum::<f64>();
                    }
                }
            }
            total
        };
        let mut trace = vec![spread(&scene)];
        for _ in 0..10 {
            let rep = train_local(&mut scene, &node, 1, &views, &short(10), "local").unwrap();
            for r in &rep.csd {
                let corrupted = data.noise[r.view_index].split.is_some();
                assert_eq!(r.mode, if corrupted { CsdMode::Over } else { CsdMode::Optimal });
            }
            assert!(rep.logs.iter().all(|l| l.push == 0.0));
            trace.push(spread(&scene));
        }
        assert!(trace[10] < 0.5 * trace[0], "{trace:?}");
    }
}
