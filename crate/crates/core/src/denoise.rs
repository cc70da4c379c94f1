//! Graph-based outlier removal inside a cluster with box restoration.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::scene::Scene;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseParams {
    pub position_multiplier: f64,
    pub feature_multiplier: f64,
    pub obb_scale: f64,
    pub pair_sample_cap: usize,
    /// Compare squared distances against squared thresholds. When false the
    /// raw thresholds are compared against squared distances.
    pub square_thresholds: bool,
    pub seed: u64,
}

impl Default for DenoiseParams {
    fn default() -> Self {
        Self {
            position_multiplier: 100.0,
            feature_multiplier: 50.0,
            obb_scale: 1.2,
            pair_sample_cap: 100_000,
            square_thresholds: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scales {
    pub sigma_pos: f64,
    pub sigma_feat: f64,
    pub tau_pos: f64,
    pub tau_feat: f64,
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

fn min_nonzero(rows: &[Vec<f64>]) -> Option<f64> {
    let n = rows.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| sq(&rows[i], &rows[j]))
                .filter(|&d| d > 0.0)
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(|| f64::INFINITY, f64::min)
        .sqrt()
        .into_finite()
}

trait IntoFinite {
    fn into_finite(self) -> Option<f64>;
}

impl IntoFinite for f64 {
    fn into_finite(self) -> Option<f64> {
        self.is_finite().then_some(self)
    }
}

/// Pairwise-distance standard deviations and thresholds for one cluster.
///
/// σ uses every pair unless there are more than `pair_sample_cap`, then a
/// seeded uniform sample of pairs. Thresholds use the exhaustive minimum
/// nonzero distance. `None` when either space has no nonzero distance.
pub fn estimate_scales(positions: &[Vec<f64>], features: &[Vec<f64>], params: &DenoiseParams) -> Option<Scales> {
    let n = positions.len();
    if n < 2 {
        return None;
    }
    let d_pos = min_nonzero(positions)?;
    let d_feat = min_nonzero(features)?;
    let total = n * (n - 1) / 2;
    let (mut dp, mut df) = (Vec::new(), Vec::new());
    if total <= params.pair_sample_cap {
        for i in 0..n {
            for j in i + 1..n {
                dp.push(sq(&positions[i], &positions[j]).sqrt());
                df.push(sq(&features[i], &features[j]).sqrt());
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        while dp.len() < params.pair_sample_cap {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i == j {
                continue;
            }
            dp.push(sq(&positions[i], &positions[j]).sqrt());
            df.push(sq(&features[i], &features[j]).sqrt());
        }
    }
    Some(Scales {
        sigma_pos: population_std(&dp),
        sigma_feat: population_std(&df),
        tau_pos: params.position_multiplier * d_pos,
        tau_feat: params.feature_multiplier * d_feat,
    })
}

/// Symmetric weights stored row-wise as (column, weight), zero entries omitted.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl Adjacency {
    pub fn strength(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().map(|(_, w)| w).sum()).collect()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i].iter().find(|(c, _)| *c == j).map_or(0.0, |(_, w)| *w)
    }
}

fn kernel(d2: f64, sigma: f64) -> f64 {
    if d2 == 0.0 {
        1.0
    } else if sigma == 0.0 {
        0.0
    } else {
        (-d2 / (2.0 * sigma * sigma)).exp()
    }
}

pub fn adjacency(positions: &[Vec<f64>], features: &[Vec<f64>], scales: &Scales, square_thresholds: bool) -> Adjacency {
    let (t_pos, t_feat) = if square_thresholds {
        (scales.tau_pos * scales.tau_pos, scales.tau_feat * scales.tau_feat)
    } else {
        (scales.tau_pos, scales.tau_feat)
    };
    let n = positions.len();
    let rows = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .filter_map(|j| {
                    let dp = sq(&positions[i], &positions[j]);
                    let df = sq(&features[i], &features[j]);
                    (dp < t_pos && df < t_feat)
                        .then(|| (j, kernel(dp, scales.sigma_pos) + kernel(df, scales.sigma_feat)))
                })
                .collect()
        })
        .collect();
    Adjacency { rows }
}

/// Splits local indices into (kept, removed) by comparing each connection
/// strength with the mean over all points.
pub fn filter_by_strength(w: &Adjacency) -> (Vec<usize>, Vec<usize>) {
    let c = w.strength();
    let mean = c.iter().sum::<f64>() / c.len().max(1) as f64;
    (0..c.len()).partition(|&i| c[i] >= mean)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrientedBox {
    pub center: Vector3<f64>,
    /// Box axes as columns.
    pub axes: Matrix3<f64>,
    pub half_extents: Vector3<f64>,
}

impl OrientedBox {
    /// Boundary-inclusive membership.
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let local = self.axes.transpose() * (p - self.center);
        (0..3).all(|a| local[a].abs() <= self.half_extents[a] * (1.0 + 1e-12) + 1e-12)
    }
}

/// PCA box around `points`, half-extents scaled by `scale`.
///
/// Centered on the mean; each half-extent is the largest absolute projection
/// on its axis. Fewer than three points or a collinear set fall back to
/// world axes.
pub fn fit_obb(points: &[Vector3<f64>], scale: f64) -> OrientedBox {
    let n = points.len().max(1) as f64;
    let center = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - center;
        cov += d * d.transpose();
    }
    cov /= n;
    let mut axes = Matrix3::identity();
    if points.len() >= 3 {
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = eig.eigenvalues[order[0]];
        if top > 0.0 && eig.eigenvalues[order[1]] > 1e-12 * top {
            for (c, &k) in order.iter().enumerate() {
                axes.set_column(c, &eig.eigenvectors.column(k));
            }
            if axes.determinant() < 0.0 {
                let flipped = -axes.column(2);
                axes.set_column(2, &flipped);
            }
        }
    }
    let mut half = Vector3::zeros();
    for p in points {
        let local = axes.transpose() * (p - center);
        for a in 0..3 {
            half[a] = f64::max(half[a], local[a].abs());
        }
    }
    OrientedBox {
        center,
        axes,
        half_extents: half * scale,
    }
}

pub fn restore_in_obb(removed: &[usize], positions: &[Vector3<f64>], obb: &OrientedBox) -> Vec<usize> {
    removed
        .iter()
        .copied()
        .filter(|&i| obb.contains(&positions[i]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DenoiseOutcome {
    /// Scene indices surviving denoising (kept ∪ restored), ascending.
    pub kept: Vec<usize>,
    pub removed: Vec<usize>,
    pub restored: Vec<usize>,
    pub scales: Option<Scales>,
    pub obb: Option<OrientedBox>,
    /// True when the cluster passed through untouched.
    pub skipped: bool,
}

/// Full per-cluster pass over scene indices `indices`.
pub fn denoise_cluster(scene: &Scene, indices: &[usize], params: &DenoiseParams) -> DenoiseOutcome {
    let positions: Vec<Vec<f64>> = indices
        .iter()
        .map(|&i| scene.points[i].position.iter().copied().collect())
        .collect();
    let features: Vec<Vec<f64>> = indices.iter().map(|&i| scene.points[i].feature.clone()).collect();
    let Some(scales) = estimate_scales(&positions, &features, params) else {
        return DenoiseOutcome {
            kept: indices.to_vec(),
            removed: Vec::new(),
            restored: Vec::new(),
            scales: None,
            obb: None,
            skipped: true,
        };
    };
    let w = adjacency(&positions, &features, &scales, params.square_thresholds);
    let (kept, removed) = filter_by_strength(&w);
    let vecs: Vec<Vector3<f64>> = indices.iter().map(|&i| scene.points[i].position).collect();
    let kept_pos: Vec<Vector3<f64>> = kept.iter().map(|&i| vecs[i]).collect();
    let obb = fit_obb(&kept_pos, params.obb_scale);
    let restored = restore_in_obb(&removed, &vecs, &obb);
    let mut survivors: Vec<usize> = kept.iter().chain(&restored).map(|&i| indices[i]).collect();
    survivors.sort_unstable();
    let mut restored: Vec<usize> = restored.iter().map(|&i| indices[i]).collect();
    restored.sort_unstable();
    let mut removed_global: Vec<usize> = removed
        .iter()
        .map(|&i| indices[i])
        .filter(|i| !restored.contains(i))
        .collect();
    removed_global.sort_unstable();
    DenoiseOutcome {
        kept: survivors,
        removed: removed_global,
        restored,
        scales: Some(scales),
        obb: Some(obb),
        skipped: false,
    }
}
