//! End-to-end runs: global training, clustering with local refinement,
//! denoising, evaluation, artifacts and the perturbation sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{recursive_partition, ClusterTree, PartitionParams};
use crate::config::TrainConfig;
use crate::csd::{records_to_csv, CsdRecord};
use crate::denoise::{denoise_cluster, DenoiseOutcome, DenoiseParams};
use crate::error::{Error, Result};
use crate::forest::{default_min_mask_pixels, FULL_RES_PIXELS};
use crate::io::{load_labelmap, load_scene, save_labelmap, save_scene};
use crate::metrics::{adjusted_rand_index, cosine_summary, median, miou_macc, DEFAULT_ACC_THRESHOLD};
use crate::query::refresh_centroids;
use crate::render::label_by_weight;
use crate::scene::{validate_views, LabelMap, Scene, View};
use crate::synth::{generate, perturb_features, NoiseSpec, SynthData, SynthSpec, ViewNoise};
use crate::train::{init_features, logs_to_csv, prepare_views, train_global, train_local, StepLog, TrainView};

/// Everything a run consumes.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scene: Scene,
    pub views: Vec<View>,
    /// Supervision maps per view, coarse to fine.
    pub labels: Vec<Vec<LabelMap>>,
    /// Reference maps for evaluation, when known.
    pub truth: Option<Vec<Vec<LabelMap>>>,
    pub noise: Option<Vec<ViewNoise>>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    views: Vec<View>,
    levels: usize,
    has_truth: bool,
}

impl From<SynthData> for Dataset {
    fn from(d: SynthData) -> Self {
        Dataset {
            scene: d.scene,
            views: d.views,
            labels: d.labels,
            truth: Some(d.clean_labels),
            noise: Some(d.noise),
        }
    }
}

fn map_path(dir: &Path, kind: &str, view: usize, level: usize) -> std::path::PathBuf {
    dir.join(kind).join(format!("view{view:03}_l{level}.pgm"))
}

impl Dataset {
    pub fn synthetic(spec: &SynthSpec) -> Result<Self> {
        Ok(generate(spec)?.into())
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        validate_views(&self.views)?;
        if self.labels.len() != self.views.len() {
            return Err(Error::Shape(format!(
                "{} views but {} label sets",
                self.views.len(),
                self.labels.len()
            )));
        }
        for (v, maps) in self.views.iter().zip(&self.labels) {
            if maps.is_empty() {
                return Err(Error::LabelMap(format!("view {} has no label maps", v.view_index)));
            }
            for m in maps {
                if (m.height, m.width) != (v.height, v.width) {
                    return Err(Error::LabelMap(format!(
                        "view {} map size differs from the image",
                        v.view_index
                    )));
                }
            }
        }
        Ok(())
    }

    /// Layout: `scene.ply`, `views.json`, `labels/viewNNN_lL.pgm`, and
    /// optionally `truth/…` and `noise.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("labels"))?;
        save_scene(&self.scene, dir.join("scene.ply"))?;
        let levels = self.labels.first().map_or(0, Vec::len);
        let manifest = Manifest {
            views: self.views.clone(),
            levels,
            has_truth: self.truth.is_some(),
        };
        fs::write(dir.join("views.json"), serde_json::to_string_pretty(&manifest)?)?;
        for (v, maps) in self.labels.iter().enumerate() {
            for (l, m) in maps.iter().enumerate() {
                save_labelmap(m, map_path(dir, "labels", v, l))?;
            }
        }
        if let Some(truth) = &self.truth {
            fs::create_dir_all(dir.join("truth"))?;
            for (v, maps) in truth.iter().enumerate() {
                for (l, m) in maps.iter().enumerate() {
                    save_labelmap(m, map_path(dir, "truth", v, l))?;
                }
            }
        }
        if let Some(noise) = &self.noise {
            fs::write(dir.join("noise.json"), serde_json::to_string_pretty(noise)?)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let scene = load_scene(dir.join("scene.ply"))?;
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("views.json"))?)?;
        let read = |kind: &str| -> Result<Vec<Vec<LabelMap>>> {
            (0..manifest.views.len())
                .map(|v| {
                    (0..manifest.levels)
                        .map(|l| load_labelmap(map_path(dir, kind, v, l), l))
                        .collect()
                })
                .collect()
        };
        let labels = read("labels")?;
        let truth = if manifest.has_truth { Some(read("truth")?) } else { None };
        let noise_path = dir.join("noise.json");
        let noise = if noise_path.exists() {
            let text = fs::read_to_string(noise_path)?;
            Some(
                serde_json::from_str::<Vec<NoiseRecord>>(&text)?
                    .into_iter()
                    .map(Into::into)
                    .collect(),
            )
        } else {
            None
        };
        let data = Dataset {
            scene,
            views: manifest.views,
            labels,
            truth,
            noise,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn min_mask_pixels(&self, cfg: &TrainConfig) -> usize {
        cfg.min_mask_pixels.unwrap_or_else(|| {
            let v = &self.views[0];
            default_min_mask_pixels(v.height, v.width, FULL_RES_PIXELS)
        })
    }
}

#[derive(Deserialize)]
struct NoiseRecord {
    view_index: usize,
    merged: Option<(usize, usize)>,
    split: Option<usize>,
}

impl From<NoiseRecord> for ViewNoise {
    fn from(r: NoiseRecord) -> Self {
        ViewNoise {
            view_index: r.view_index,
            merged: r.merged,
            split: r.split,
        }
    }
}

/// Clusters per depth derived from the forests: the median root count, then
/// the median number of children per parent at each following level.
pub fn auto_k_schedule(views: &[TrainView], depth: usize) -> Vec<usize> {
    let mut ks = Vec::new();
    let roots: Vec<f64> = views.iter().map(|v| v.forest.roots.len() as f64).collect();
    ks.push(median(&roots).round().max(1.0) as usize);
    for level in 1..depth {
        let counts: Vec<f64> = views
            .iter()
            .flat_map(|v| {
                v.forest
                    .nodes
                    .iter()
                    .filter(|n| n.level + 1 == level)
                    .map(|n| n.children.len() as f64)
            })
            .filter(|&c| c > 0.0)
            .collect();
        ks.push(if counts.is_empty() {
            1
        } else {
            median(&counts).round().max(1.0) as usize
        });
    }
    ks
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeCsd {
    pub node: usize,
    pub depth: usize,
    pub records: Vec<CsdRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    /// ARI of each tree depth against the matching ground-truth level.
    pub ari: Vec<f64>,
    pub miou: f64,
    pub macc: f64,
    pub mask_count: usize,
    pub intra_cosine: f64,
    pub inter_cosine: f64,
}

/// State of a run; partially filled when a stage fails.
#[derive(Debug, Clone)]
pub struct Run {
    pub scene: Scene,
    pub k_schedule: Vec<usize>,
    pub tree: Option<ClusterTree>,
    pub logs: Vec<StepLog>,
    pub csd: Vec<NodeCsd>,
    pub denoise: Vec<(usize, DenoiseOutcome)>,
    pub metrics: Option<Metrics>,
    pub warnings: Vec<String>,
}

impl Run {
    fn new(scene: Scene) -> Self {
        Run {
            scene,
            k_schedule: Vec::new(),
            tree: None,
            logs: Vec::new(),
            csd: Vec::new(),
            denoise: Vec::new(),
            metrics: None,
            warnings: Vec::new(),
        }
    }
}

/// Refined forests and cached tables for a dataset.
pub fn prepare(data: &Dataset, cfg: &TrainConfig) -> Result<Vec<TrainView>> {
    data.validate()?;
    prepare_views(&data.scene, &data.views, &data.labels, data.min_mask_pixels(cfg)).map_err(|e| e.in_stage("forest"))
}

/// Feature initialization and the global stage.
pub fn global_stage(data: &Dataset, views: &[TrainView], cfg: &TrainConfig, run: &mut Run) -> Result<()> {
    init_features(&mut run.scene, cfg.init_range, cfg.seed);
    let report = train_global(&mut run.scene, views, cfg).map_err(|e| e.in_stage("global"))?;
    run.logs.extend(report.logs);
    run.warnings.extend(report.warnings);
    run.k_schedule = if cfg.k_schedule.is_empty() {
        auto_k_schedule(views, cfg.max_tree_depth)
    } else {
        cfg.k_schedule.clone()
    };
    let _ = data;
    Ok(())
}

/// Clustering with local refinement, denoising and point tags.
pub fn cascade_stage(views: &[TrainView], cfg: &TrainConfig, run: &mut Run) -> Result<()> {
    let params = PartitionParams {
        max_depth: cfg.max_tree_depth,
        k_schedule: run.k_schedule.clone(),
        position_weight: cfg.position_weight,
        seed: cfg.seed,
        max_iters: cfg.kmeans_iters,
        restarts: cfg.kmeans_restarts,
        min_cluster_points: cfg.min_cluster_points,
    };
    let mut logs = Vec::new();
    let mut csd = Vec::new();
    let mut warnings = Vec::new();
    let tree = recursive_partition(&mut run.scene, &params, |scene, node| {
        let stage = format!("local:{}", node.id);
        let report = train_local(scene, &node.point_indices, node.depth + 1, views, cfg, &stage)?;
        logs.extend(report.logs);
        warnings.extend(report.warnings);
        csd.push(NodeCsd {
            node: node.id,
            depth: node.depth,
            records: report.csd,
        });
        Ok(())
    });
    run.logs.extend(logs);
    run.csd.extend(csd);
    run.warnings.extend(warnings);
    let mut tree = tree.map_err(|e| e.in_stage("cluster"))?;
    refresh_centroids(&run.scene, &mut tree);

    if cfg.denoise_enabled {
        run.denoise = denoise_tree(&run.scene, &mut tree, &cfg.denoise);
    } else {
        for node in &mut tree.nodes {
            node.kept_indices.clone_from(&node.point_indices);
        }
    }
    tag_points(&mut run.scene, &tree);
    run.tree = Some(tree);
    Ok(())
}

/// Denoises every node of `tree` in place and returns the outcomes by node id.
pub fn denoise_tree(scene: &Scene, tree: &mut ClusterTree, params: &DenoiseParams) -> Vec<(usize, DenoiseOutcome)> {
    let outcomes: Vec<DenoiseOutcome> = tree
        .nodes
        .par_iter()
        .map(|n| denoise_cluster(scene, &n.point_indices, params))
        .collect();
    tree.nodes
        .iter_mut()
        .zip(outcomes)
        .map(|(node, out)| {
            node.denoised = !out.skipped;
            node.kept_indices.clone_from(&out.kept);
            (node.id, out)
        })
        .collect()
}

/// Rebuilds the tree recorded in a scene's point tags, with leaf kept sets
/// and refreshed centroids. `None` when the scene carries no cluster ids.
pub fn tree_from_tags(scene: &Scene) -> Option<ClusterTree> {
    let l0 = scene.tags.cluster_l1.as_ref()?;
    let mut tree = ClusterTree::from_tags(l0, scene.tags.cluster_l2.as_deref());
    if let Some(kept) = &scene.tags.kept {
        for node in tree.nodes.iter_mut().filter(|n| n.children.is_empty()) {
            node.kept_indices.retain(|&i| kept[i] != 0);
        }
    }
    refresh_centroids(scene, &mut tree);
    Some(tree)
}

/// Writes depth-0/depth-1 node ids and the leaf-level kept flag per point.
pub fn tag_points(scene: &mut Scene, tree: &ClusterTree) {
    let n = scene.len();
    let id = |d: usize| -> Vec<i64> {
        let mut v = vec![-1; n];
        for node in tree.at_depth(d) {
            node.point_indices.iter().for_each(|&i| v[i] = node.id as i64);
        }
        v
    };
    scene.tags.cluster_l1 = Some(id(0));
    scene.tags.cluster_l2 = Some(id(1));
    let mut kept = vec![0; n];
    for node in tree.nodes.iter().filter(|n| n.children.is_empty()) {
        node.kept_indices.iter().for_each(|&i| kept[i] = 1);
    }
    scene.tags.kept = Some(kept);
}

/// Rendered labels of the tree at `depth` using only kept points.
pub fn render_tree_labels(tree: &ClusterTree, views: &[TrainView], depth: usize, point_count: usize) -> Vec<LabelMap> {
    let mut labels: Vec<Option<u32>> = vec![None; point_count];
    for node in &tree.nodes {
        if node.depth == depth || (node.depth < depth && node.children.is_empty()) {
            node.kept_indices
                .iter()
                .for_each(|&i| labels[i] = Some(node.id as u32 + 1));
        }
    }
    views
        .iter()
        .map(|v| label_by_weight(&v.table, &labels, crate::synth::LABEL_COVERAGE, depth))
        .collect()
}

pub fn evaluate(data: &Dataset, views: &[TrainView], run: &Run) -> Option<Metrics> {
    let tree = run.tree.as_ref()?;
    let gt = data.scene.ground_truth.as_ref()?;
    let n = run.scene.len();
    let depths = tree.max_depth() + 1;
    let ari = (0..depths.max(2))
        .map(|d| {
            let truth: Vec<i64> = gt
                .iter()
                .map(|g| match d {
                    0 => g.whole,
                    1 => g.part,
                    _ => g.subpart,
                })
                .collect();
            let pred: Vec<i64> = tree
                .labels_at_depth(d, n)
                .iter()
                .map(|l| l.map_or(-1, |v| v as i64))
                .collect();
            adjusted_rand_index(&pred, &truth)
        })
        .collect();
    let reference = data.truth.as_ref().unwrap_or(&data.labels);
    let levels = reference.first().map_or(1, Vec::len);
    let depth = (tree.max_depth()).min(levels - 1);
    let predicted = render_tree_labels(tree, views, depth, n);
    let truth_maps: Vec<LabelMap> = reference.iter().map(|maps| maps[depth].clone()).collect();
    let scores = miou_macc(&predicted, &truth_maps, DEFAULT_ACC_THRESHOLD);
    let wholes: Vec<i64> = gt.iter().map(|g| g.whole).collect();
    let cos = cosine_summary(&run.scene.features(), &wholes);
    Some(Metrics {
        ari,
        miou: scores.miou,
        macc: scores.macc,
        mask_count: scores.mask_count,
        intra_cosine: cos.intra,
        inter_cosine: cos.inter,
    })
}

/// Runs every stage. On failure `run` keeps whatever was produced so far.
pub fn run_into(data: &Dataset, cfg: &TrainConfig, run: &mut Run) -> Result<()> {
    cfg.validate()?;
    let views = prepare(data, cfg)?;
    global_stage(data, &views, cfg, run)?;
    cascade_stage(&views, cfg, run)?;
    run.metrics = evaluate(data, &views, run);
    Ok(())
}

pub fn run_pipeline(data: &Dataset, cfg: &TrainConfig) -> Result<Run> {
    let mut run = Run::new(data.scene.clone());
    run_into(data, cfg, &mut run)?;
    Ok(run)
}

pub fn empty_run(data: &Dataset) -> Run {
    Run::new(data.scene.clone())
}

/// A run resumed from a trained or clustered scene.
pub fn run_from_scene(scene: Scene) -> Run {
    let mut run = Run::new(scene);
    run.tree = tree_from_tags(&run.scene);
    run
}

pub fn denoise_csv(run: &Run) -> String {
    let mut out = String::from("node,n,removed,restored,sigma_pos,sigma_feat\n");
    for (node, d) in &run.denoise {
        let (sp, sf) = d.scales.map_or((f64::NAN, f64::NAN), |s| (s.sigma_pos, s.sigma_feat));
        let n = d.kept.len() + d.removed.len();
        let _ = writeln!(out, "{node},{n},{},{},{sp},{sf}", d.removed.len(), d.restored.len());
    }
    out
}

/// CSD rows for every node, prefixed with node id and depth.
pub fn csd_csv(run: &Run) -> String {
    let mut out = String::from("node,depth,");
    let header_done = out.len();
    for nc in &run.csd {
        let body = records_to_csv(&nc.records);
        let mut lines = body.lines();
        if out.len() == header_done {
            out.push_str(lines.next().unwrap_or_default());
            out.push('\n');
        } else {
            lines.next();
        }
        for l in lines {
            let _ = writeln!(out, "{},{},{l}", nc.node, nc.depth);
        }
    }
    if out.len() == header_done {
        out.push_str("view_index,n,n_smoothed,n_hat,mode\n");
    }
    out
}

/// Writes `scene.ply`, `tree.jsonl`, `train_log.csv`, `csd.csv`,
/// `denoise.csv`, `metrics.json` and `warnings.txt` for whatever exists.
pub fn write_artifacts(dir: impl AsRef<Path>, run: &Run) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    save_scene(&run.scene, dir.join("scene.ply"))?;
    fs::write(dir.join("train_log.csv"), logs_to_csv(&run.logs))?;
    fs::write(dir.join("csd.csv"), csd_csv(run))?;
    if let Some(tree) = &run.tree {
        fs::write(dir.join("tree.jsonl"), tree.to_json_lines())?;
    }
    if !run.denoise.is_empty() {
        fs::write(dir.join("denoise.csv"), denoise_csv(run))?;
    }
    if let Some(m) = &run.metrics {
        fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(m)?)?;
    }
    if !run.warnings.is_empty() {
        fs::write(dir.join("warnings.txt"), run.warnings.join("\n") + "\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Arm {
    Position,
    FeatureOnly,
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arm::Position => "position",
            Arm::FeatureOnly => "feature",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub tau: f64,
    pub arm: Arm,
    pub seed: u64,
    pub ari: f64,
    pub miou: f64,
    pub runtime_s: f64,
}

/// Perturbs the globally trained features by each τ before depth-0
/// clustering and finishes the run with and without the position block.
///
/// Global training is shared by all cells of one seed.
pub fn sweep_seed(spec: &SynthSpec, noise: &NoiseSpec, cfg: &TrainConfig, seed: u64) -> Result<Vec<SweepRow>> {
    let spec = SynthSpec { seed, ..spec.clone() };
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let data = Dataset::synthetic(&spec)?;
    let views = prepare(&data, &cfg)?;
    let mut base = Run::new(data.scene.clone());
    let start = Instant::now();
    global_stage(&data, &views, &cfg, &mut base)?;
    let global_time = start.elapsed().as_secs_f64();
    let jobs: Vec<(f64, Arm)> = noise
        .taus
        .iter()
        .flat_map(|&t| [(t, Arm::Position), (t, Arm::FeatureOnly)])
        .collect();
    jobs.par_iter()
        .map(|&(tau, arm)| {
            let start = Instant::now();
            let mut run = Run::new(perturb_features(&base.scene, tau, noise.seed.wrapping_add(seed)));
            run.k_schedule.clone_from(&base.k_schedule);
            let arm_cfg = TrainConfig {
                position_weight: if arm == Arm::Position { cfg.position_weight } else { 0.0 },
                ..cfg.clone()
            };
            cascade_stage(&views, &arm_cfg, &mut run)?;
            let m =
                evaluate(&data, &views, &run).ok_or_else(|| Error::Synth("sweep scene lacks ground truth".into()))?;
            Ok(SweepRow {
                tau,
                arm,
                seed,
                ari: m.ari[1.min(m.ari.len() - 1)],
                miou: m.miou,
                runtime_s: global_time + start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

pub fn noise_sweep(spec: &SynthSpec, noise: &NoiseSpec, cfg: &TrainConfig) -> Result<Vec<SweepRow>> {
    let seeds: Vec<u64> = (0..noise.seeds as u64).map(|s| spec.seed + s).collect();
    let rows: Result<Vec<Vec<SweepRow>>> = seeds.par_iter().map(|&s| sweep_seed(spec, noise, cfg, s)).collect();
    Ok(rows?.into_iter().flatten().collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("tau,arm,seed,ari,miou,runtime_s\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.3}",
            r.tau, r.arm, r.seed, r.ari, r.miou, r.runtime_s
        );
    }
    out
}

/// Median ARI per (arm, τ), τ ascending.
pub fn sweep_medians(rows: &[SweepRow], arm: Arm) -> Vec<(f64, f64)> {
    let mut taus: Vec<f64> = rows.iter().filter(|r| r.arm == arm).map(|r| r.tau).collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    taus.into_iter()
        .map(|t| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.arm == arm && r.tau == t)
                .map(|r| r.ari)
                .collect();
            (t, median(&v))
        })
        .collect()
}

/// Line plot of median ARI against τ, one line per arm.
pub fn sweep_svg(rows: &[SweepRow]) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let lines: Vec<(Arm, &str, Vec<(f64, f64)>)> = vec![
        (Arm::Position, "#1f77b4", sweep_medians(rows, Arm::Position)),
        (Arm::FeatureOnly, "#d62728", sweep_medians(rows, Arm::FeatureOnly)),
    ];
    let tmax = lines
        .iter()
        .flat_map(|l| l.2.iter().map(|p| p.0))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let x = |t: f64| pad + t / tmax * (w - 2.0 * pad);
    let y = |a: f64| h - pad - a.clamp(0.0, 1.0) * (h - 2.0 * pad);
    let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n");
    let _ = writeln!(svg, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<path d=\"M{pad} {pad} V{} H{}\" stroke=\"black\" fill=\"none\"/>",
        h - pad,
        w - pad
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{tick}</text>",
            pad - 6.0,
            y(tick) + 4.0
        );
    }
    for (t, _) in &lines[0].2 {
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{t}</text>",
            x(*t),
            h - pad + 16.0
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">tau</text>",
        w / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">median ARI</text>",
        h / 2.0,
        h / 2.0
    );
    for (k, (arm, color, pts)) in lines.iter().enumerate() {
        let d: Vec<String> = pts.iter().map(|&(t, a)| format!("{:.1},{:.1}", x(t), y(a))).collect();
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" stroke=\"{color}\" stroke-width=\"2\" fill=\"none\"/>",
            d.join(" ")
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{arm}</text>",
            w - pad - 70.0,
            pad + 16.0 * k as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}
