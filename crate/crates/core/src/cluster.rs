//! K-means in a joint feature/position space and the learned object tree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scene::Scene;

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_MIN_CLUSTER_POINTS: usize = 10;
pub const DEFAULT_RESTARTS: usize = 10;

/// `[f/‖f‖ ; λ·(p − p_min)/(p_max − p_min)]` per point of `indices`.
///
/// Normalization statistics come from `indices` only. A zero feature stays
/// zero and a degenerate position range maps to 0.
pub fn joint_embed(scene: &Scene, indices: &[usize], position_weight: f64) -> Vec<Vec<f64>> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in indices {
        let p = &scene.points[i].position;
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    indices
        .iter()
        .map(|&i| {
            let pt = &scene.points[i];
            let norm = pt.feature.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut row: Vec<f64> = if norm > 0.0 {
                pt.feature.iter().map(|v| v / norm).collect()
            } else {
                vec![0.0; pt.feature.len()]
            };
            for a in 0..3 {
                let span = hi[a] - lo[a];
                row.push(if span > 0.0 {
                    position_weight * (pt.position[a] - lo[a]) / span
                } else {
                    0.0
                });
            }
            row
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub trace: Vec<f64>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lowest centroid index wins ties.
fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = dist2(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus_init(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![data[rng.random_range(0..data.len())].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| dist2(x, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = data.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..data.len())
        };
        centroids.push(data[pick].clone());
        for (d, x) in d2.iter_mut().zip(data) {
            *d = d.min(dist2(x, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// Stops at an assignment fixpoint or after `max_iters` rounds. A cluster
/// left empty is re-seeded with the point farthest from its centroid.
pub fn kmeans(data: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    let n = data.len();
    if k == 0 || k > n {
        return Err(Error::TooFewPoints { k, n });
    }
    let dim = data[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(data, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut trace = Vec::new();

    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut cost = vec![0.0; n];
        for (i, x) in data.iter().enumerate() {
            let (c, d) = nearest(x, &centroids);
            changed |= assignments[i] != c;
            assignments[i] = c;
            cost[i] = d;
        }
        // re-seed empty clusters from the worst-served points
        let mut counts = vec![0usize; k];
        assignments.iter().for_each(|&a| counts[a] += 1);
        let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        for empty in empties {
            let far = (0..n)
                .filter(|&i| counts[assignments[i]] > 1)
                .max_by(|&a, &b| cost[a].total_cmp(&cost[b]).then(b.cmp(&a)))
                .expect("k <= n leaves a cluster with two points");
            counts[assignments[far]] -= 1;
            counts[empty] += 1;
            assignments[far] = empty;
            cost[far] = 0.0;
            changed = true;
        }
        trace.push(cost.iter().sum());
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        for (x, &a) in data.iter().zip(&assignments) {
            for (s, v) in sums[a].iter_mut().zip(x) {
                *s += v;
            }
        }
        for (c, (s, &m)) in centroids.iter_mut().zip(sums.iter().zip(&counts)) {
            *c = s.iter().map(|v| v / m as f64).collect();
        }
    }
    let inertia = data
        .iter()
        .zip(&assignments)
        .map(|(x, &a)| dist2(x, &centroids[a]))
        .sum();
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia,
        trace,
    })
}

/// Best of `restarts` seeded runs by final inertia; earlier runs win ties.
pub fn kmeans_restarts(
    data: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
    restarts: usize,
) -> Result<KMeansResult> {
    let mut best = kmeans(data, k, seed, max_iters)?;
    for r in 1..restarts as u64 {
        let run = kmeans(
            data,
            k,
            seed.wrapping_add(r.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            max_iters,
        )?;
        if run.inertia < best.inertia {
            best = run;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterNode {
    pub id: usize,
    pub depth: usize,
    pub parent: Option<usize>,
    pub point_indices: Vec<usize>,
    /// Joint-space centroid from the k-means run that created the node.
    pub centroid: Vec<f64>,
    pub children: Vec<usize>,
    pub denoised: bool,
    pub kept_indices: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ClusterTree {
    pub nodes: Vec<ClusterNode>,
    pub roots: Vec<usize>,
}

impl ClusterTree {
    pub fn at_depth(&self, depth: usize) -> impl Iterator<Item = &ClusterNode> {
        self.nodes.iter().filter(move |n| n.depth == depth)
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Node id per point at `depth`; leaves above `depth` stand in for their
    /// missing descendants, so every clustered point gets a label.
    pub fn labels_at_depth(&self, depth: usize, point_count: usize) -> Vec<Option<usize>> {
        let mut labels = vec![None; point_count];
        for n in &self.nodes {
            if n.depth == depth || (n.depth < depth && n.children.is_empty()) {
                for &i in &n.point_indices {
                    labels[i] = Some(n.id);
                }
            }
        }
        labels
    }

    /// Two-level tree from per-point depth-0 and depth-1 ids (-1 = none).
    ///
    /// Nodes are renumbered: roots by ascending id, then children. Centroids
    /// are left empty.
    pub fn from_tags(level0: &[i64], level1: Option<&[i64]>) -> Self {
        let mut tree = ClusterTree::default();
        let mut roots: Vec<i64> = level0.iter().copied().filter(|&l| l >= 0).collect();
        roots.sort_unstable();
        roots.dedup();
        for &r in &roots {
            let id = tree.nodes.len();
            tree.roots.push(id);
            let pts: Vec<usize> = (0..level0.len()).filter(|&i| level0[i] == r).collect();
            tree.nodes.push(ClusterNode {
                id,
                depth: 0,
                parent: None,
                kept_indices: pts.clone(),
                point_indices: pts,
                centroid: Vec::new(),
                children: Vec::new(),
                denoised: false,
            });
        }
        if let Some(l1) = level1 {
            for root in tree.roots.clone() {
                let mut kids: Vec<i64> = tree.nodes[root]
                    .point_indices
                    .iter()
                    .map(|&i| l1[i])
                    .filter(|&l| l >= 0)
                    .collect();
                kids.sort_unstable();
                kids.dedup();
                for k in kids {
                    let id = tree.nodes.len();
                    let pts: Vec<usize> = tree.nodes[root]
                        .point_indices
                        .iter()
                        .copied()
                        .filter(|&i| l1[i] == k)
                        .collect();
                    tree.nodes.push(ClusterNode {
                        id,
                        depth: 1,
                        parent: Some(root),
                        kept_indices: pts.clone(),
                        point_indices: pts,
                        centroid: Vec::new(),
                        children: Vec::new(),
                        denoised: false,
                    });
                    tree.nodes[root].children.push(id);
                }
            }
        }
        tree
    }

    /// One node per line: id, depth, parent, children, size, kept.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let row = serde_json::json!({
                "id": n.id,
                "depth": n.depth,
                "parent": n.parent,
                "children": n.children,
                "size": n.point_indices.len(),
                "denoised": n.denoised,
                "kept": n.kept_indices.len(),
                "centroid": n.centroid,
            });
            out.push_str(&row.to_string());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionParams {
    /// Number of tree levels; 1 means flat clustering.
    pub max_depth: usize,
    /// Clusters per split at each depth; the last entry repeats.
    pub k_schedule: Vec<usize>,
    pub position_weight: f64,
    pub seed: u64,
    pub max_iters: usize,
    pub restarts: usize,
    pub min_cluster_points: usize,
}

impl PartitionParams {
    pub fn k_at(&self, depth: usize) -> usize {
        let last = self.k_schedule.len().saturating_sub(1);
        self.k_schedule.get(depth.min(last)).copied().unwrap_or(1)
    }
}

fn node_seed(seed: u64, node: usize) -> u64 {
    seed ^ (node as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Splits `indices` into `k` groups; groups come back in cluster order.
pub fn split_points(
    scene: &Scene,
    indices: &[usize],
    k: usize,
    params: &PartitionParams,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<f64>)>> {
    let emb = joint_embed(scene, indices, params.position_weight);
    let km = kmeans_restarts(&emb, k, seed, params.max_iters, params.restarts.max(1))?;
    let mut groups: Vec<(Vec<usize>, Vec<f64>)> = km.centroids.into_iter().map(|c| (Vec::new(), c)).collect();
    for (&i, &a) in indices.iter().zip(&km.assignments) {
        groups[a].0.push(i);
    }
    Ok(groups)
}

/// Builds the object tree top-down.
///
/// Depth 0 clusters the whole scene. Before a node is split, `refine` is
/// called with it (local training happens there).
/// Nodes with fewer than `max(K, min_cluster_points)` points stay leaves.
pub fn recursive_partition<F>(scene: &mut Scene, params: &PartitionParams, mut refine: F) -> Result<ClusterTree>
where
    F: FnMut(&mut Scene, &ClusterNode) -> Result<()>,
{
    let mut tree = ClusterTree::default();
    let all: Vec<usize> = (0..scene.len()).collect();
    let k0 = params.k_at(0);
    for (points, centroid) in split_points(scene, &all, k0, params, params.seed)? {
        let id = tree.nodes.len();
        tree.roots.push(id);
        tree.nodes.push(ClusterNode {
            id,
            depth: 0,
            parent: None,
            point_indices: points,
            centroid,
            children: Vec::new(),
            denoised: false,
            kept_indices: Vec::new(),
        });
    }
    // breadth-first so all nodes of one depth are finished before the next
    let mut cursor = 0;
    while cursor < tree.nodes.len() {
        let (depth, id) = (tree.nodes[cursor].depth, tree.nodes[cursor].id);
        cursor += 1;
        if depth + 1 >= params.max_depth {
            continue;
        }
        let k = params.k_at(depth + 1);
        let points = tree.nodes[id].point_indices.clone();
        if points.len() < k.max(params.min_cluster_points) || k < 2 {
            continue;
        }
        refine(scene, &tree.nodes[id])?;
        let groups = split_points(scene, &points, k, params, node_seed(params.seed, id))?;
        for (child_points, centroid) in groups {
            let child = tree.nodes.len();
            tree.nodes.push(ClusterNode {
                id: child,
                depth: depth + 1,
                parent: Some(id),
                point_indices: child_points,
                centroid,
                children: Vec::new(),
                denoised: false,
                kept_indices: Vec::new(),
            });
            tree.nodes[id].children.push(child);
        }
    }
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::adjusted_rand_index;
    use crate::scene::GaussianPoint;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(seed: u64, centers: &[[f64; 2]], per: usize, spread: f64) -> (Vec<Vec<f64>>, Vec<i64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, spread).unwrap();
        let mut data = Vec::new();
        let mut truth = Vec::new();
        for (k, c) in centers.iter().enumerate() {
            for _ in 0..per {
                data.push(vec![c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]);
                truth.push(k as i64);
            }
        }
        (data, truth)
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let (data, _) = blobs(1, &[[1.0, -2.0]], 50, 0.5);
        let km = kmeans(&data, 1, 0, 100).unwrap();
        let mean: Vec<f64> = (0..2).map(|c| data.iter().map(|x| x[c]).sum::<f64>() / 50.0).collect();
        let var: f64 = data.iter().map(|x| dist2(x, &mean)).sum();
        assert!(dist2(&km.centroids[0], &mean) < 1e-20);
        assert!((km.inertia - var).abs() < 1e-9);
    }

    #[test]
    fn separated_blobs_are_recovered() {
        for seed in 0..10 {
            let (data, truth) = blobs(seed, &[[0.0, 0.0], [50.0, 0.0]], 40, 1.0);
            let km = kmeans(&data, 2, seed, 100).unwrap();
            let pred: Vec<i64> = km.assignments.iter().map(|&a| a as i64).collect();
            assert_eq!(adjusted_rand_index(&pred, &truth), 1.0);
        }
    }

    #[test]
    fn too_many_clusters() {
        let data = vec![vec![0.0], vec![1.0]];
        assert!(matches!(kmeans(&data, 3, 0, 10), Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn duplicate_points_fill_every_cluster() {
        let data = vec![vec![1.0, 1.0]; 6];
        let km = kmeans(&data, 3, 4, 10).unwrap();
        for c in 0..3 {
            assert!(km.assignments.contains(&c));
        }
    }

    #[test]
    fn joint_embedding_blocks() {
        let mut s = Scene::new(3);
        let mut p = GaussianPoint::new(Vector3::new(1.0, 2.0, 3.0), 0.1, 0.5, 3);
        p.feature = vec![3.0, 0.0, 4.0];
        s.points.push(p);
        let e = joint_embed(&s, &[0], 2.0);
        assert_eq!(e[0], vec![0.6, 0.0, 0.8, 0.0, 0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = Scene::new(6);
        for i in 0..40 {
            let mut p = GaussianPoint::new(
                Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(0.0..1.0), 7.0),
                0.1,
                0.5,
                6,
            );
            if i % 7 != 0 {
                p.feature = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            }
            s.points.push(p);
        }
        let idx: Vec<usize> = (0..40).collect();
        for (i, row) in joint_embed(&s, &idx, 1.5).iter().enumerate() {
            let n: f64 = row[..6].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(if i % 7 == 0 { n == 0.0 } else { (n - 1.0).abs() < 1e-12 });
            assert!(row[6..8].iter().all(|v| (0.0..=1.5).contains(v)));
            assert_eq!(row[8], 0.0);
        }
        // no position block influence
        assert!(joint_embed(&s, &idx, 0.0)
            .iter()
            .all(|r| r[6..].iter().all(|v| *v == 0.0)));
    }

    fn two_level_scene() -> (Scene, Vec<i64>, Vec<i64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut s = Scene::new(6);
        let (mut whole, mut part) = (Vec::new(), Vec::new());
        for o in 0..2 {
            for q in 0..2 {
                for _ in 0..30 {
                    let pos = Vector3::new(o as f64 * 4.0, q as f64, 0.0);
                    let mut p = GaussianPoint::new(pos.map(|v| v + noise.sample(&mut rng)), 0.1, 0.5, 6);
                    p.feature[o] = 1.0;
                    p.feature[2 + q] = 0.3;
                    s.points.push(p);
                    whole.push(o as i64);
                    part.push((o * 2 + q) as i64);
                }
            }
        }
        (s, whole, part)
    }

    #[test]
    fn partition_refines_parents() {
        let (mut s, whole, part) = two_level_scene();
        let params = PartitionParams {
            max_depth: 2,
            k_schedule: vec![2, 2],
            position_weight: 1.0,
            seed: 5,
            max_iters: 100,
            restarts: 1,
            min_cluster_points: 10,
        };
        let mut calls = Vec::new();
        let tree = recursive_partition(&mut s, &params, |_, n| {
            calls.push((n.point_indices.len(), n.depth));
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, vec![(60, 0), (60, 0)]);
        assert_eq!(tree.roots.len(), 2);
        assert_eq!(tree.nodes.len(), 6);
        let l0: Vec<i64> = tree.labels_at_depth(0, 120).iter().map(|l| l.unwrap() as i64).collect();
        let l1: Vec<i64> = tree.labels_at_depth(1, 120).iter().map(|l| l.unwrap() as i64).collect();
        assert_eq!(adjusted_rand_index(&l0, &whole), 1.0);
        assert_eq!(adjusted_rand_index(&l1, &part), 1.0);
        for n in &tree.nodes {
            if let Some(p) = n.parent {
                assert!(n.point_indices.iter().all(|i| tree.nodes[p].point_indices.contains(i)));
            }
        }
        assert_eq!(tree.to_json_lines().lines().count(), 6);

        let flat = recursive_partition(
            &mut s,
            &PartitionParams {
                max_depth: 1,
                ..params.clone()
            },
            |_, _| panic!("no local stage in flat clustering"),
        )
        .unwrap();
        assert_eq!(flat.nodes.len(), 2);
        // depth-1 labels fall back to the leaves
        assert!(flat.labels_at_depth(1, 120).iter().all(|l| l.is_some()));
    }

    #[test]
    fn tree_from_tags() {
        let l0 = [5, 5, 5, 2, 2, -1];
        let l1 = [7, 8, 7, 1, 1, -1];
        let t = ClusterTree::from_tags(&l0, Some(&l1));
        assert_eq!(t.roots, vec![0, 1]);
        assert_eq!(t.nodes[0].point_indices, vec![3, 4]);
        assert_eq!(t.nodes[1].children.len(), 2);
        let l = t.labels_at_depth(1, 6);
        assert_eq!(l[0], l[2]);
        assert_ne!(l[0], l[1]);
        assert_eq!(l[5], None);
    }

    #[test]
    fn small_nodes_stay_leaves() {
        let (mut s, ..) = two_level_scene();
        let params = PartitionParams {
            max_depth: 3,
            k_schedule: vec![2, 2, 2],
            position_weight: 1.0,
            seed: 1,
            max_iters: 100,
            restarts: 1,
            min_cluster_points: 31,
        };
        let tree = recursive_partition(&mut s, &params, |_, _| Ok(())).unwrap();
        // depth-1 nodes have 30 points < 31
        assert_eq!(tree.max_depth(), 1);
        assert!(tree.at_depth(1).all(|n| n.children.is_empty()));
    }

    proptest! {
        #[test]
        fn inertia_never_increases(seed in 0u64..500, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<Vec<f64>> = (0..60).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let km = kmeans(&data, k, seed, 100).unwrap();
            for w in km.trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
            prop_assert_eq!(km.clone(), kmeans(&data, k, seed, 100).unwrap());
            let best = kmeans_restarts(&data, k, seed, 100, 4).unwrap();
            prop_assert!(best.inertia <= km.inertia);
        }
    }
}
