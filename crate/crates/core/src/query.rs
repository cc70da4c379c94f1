//! Click-based selection: match a rendered pixel feature against the tree.

use serde::Serialize;

use crate::cluster::ClusterTree;
use crate::error::{Error, Result};
use crate::metrics::cosine;
use crate::render::{rasterize, render_features, ContributionTable};
use crate::scene::{Scene, View};

/// Pixels whose residual transmittance exceeds this are background.
pub const BACKGROUND_TRANSMITTANCE: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    /// Best node per depth, root first.
    pub nodes: Vec<usize>,
    pub similarity: Vec<f64>,
}

/// Mean unit feature of each node's points, written into the feature block
/// of its centroid. Run after training so centroids match final features.
pub fn refresh_centroids(scene: &Scene, tree: &mut ClusterTree) {
    let d = scene.feature_dim;
    for node in &mut tree.nodes {
        let mut mean = vec![0.0; d];
        for &i in &node.point_indices {
            let f = &scene.points[i].feature;
            let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / n);
            }
        }
        let count = node.point_indices.len().max(1) as f64;
        if node.centroid.len() < d {
            node.centroid.resize(d, 0.0);
        }
        node.centroid[..d]
            .iter_mut()
            .zip(&mean)
            .for_each(|(c, m)| *c = m / count);
    }
}

/// Selects the node best matching the feature at pixel `(x, y)`, descending
/// from the roots through each chosen node's children.
///
/// Returns `None` on a background pixel.
pub fn click_query_with_table(
    scene: &Scene,
    tree: &ClusterTree,
    table: &ContributionTable,
    x: usize,
    y: usize,
) -> Result<Option<Selection>> {
    if x >= table.width || y >= table.height {
        return Err(Error::Shape(format!(
            "pixel ({x}, {y}) outside {}x{} image",
            table.width, table.height
        )));
    }
    let pix = y * table.width + x;
    if table.residual(pix) > BACKGROUND_TRANSMITTANCE {
        return Ok(None);
    }
    let fmap = render_features(scene, table)?;
    let feature = fmap.pixel(pix);
    let d = scene.feature_dim;
    let mut selection = Selection {
        nodes: Vec::new(),
        similarity: Vec::new(),
    };
    let mut candidates = tree.roots.clone();
    while !candidates.is_empty() {
        let (best, sim) = candidates
            .iter()
            .map(|&c| (c, cosine(feature, &tree.nodes[c].centroid[..d])))
            .fold(
                (usize::MAX, f64::NEG_INFINITY),
                |acc, x| if x.1 > acc.1 { x } else { acc },
            );
        if best == usize::MAX {
            break;
        }
        selection.nodes.push(best);
        selection.similarity.push(sim);
        candidates = tree.nodes[best].children.clone();
    }
    Ok(Some(selection))
}

pub fn click_query(scene: &Scene, tree: &ClusterTree, view: &View, x: usize, y: usize) -> Result<Option<Selection>> {
    click_query_with_table(scene, tree, &rasterize(scene, view), x, y)
}
