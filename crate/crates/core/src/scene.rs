//! Scene, camera and image-space containers.
//!
//! Geometry (position, scale, opacity, color) is frozen once a scene is
//! built; only the per-point instance features change during training.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default instance-feature dimensionality.
pub const DEFAULT_FEATURE_DIM: usize = 6;

/// Ground-truth hierarchy ids carried by synthetic scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroundTruth {
    pub whole: i64,
    pub part: i64,
    pub subpart: i64,
}

/// An isotropic Gaussian with a learnable instance feature.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPoint {
    pub position: Vector3<f64>,
    /// Radius in world units.
    pub scale: f64,
    pub opacity: f64,
    /// Debug color, each channel in `[0, 1]`.
    pub color: [f64; 3],
    pub feature: Vec<f64>,
}

impl GaussianPoint {
    pub fn new(position: Vector3<f64>, scale: f64, opacity: f64, feature_dim: usize) -> Self {
        Self {
            position,
            scale,
            opacity,
            color: [0.5; 3],
            feature: vec![0.0; feature_dim],
        }
    }

    fn validate(&self, index: usize, dim: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidPoint { index, msg });
        if !self.position.iter().all(|v| v.is_finite()) {
            return bad("non-finite position".into());
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return bad(format!("opacity out of range: {}", self.opacity));
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return bad("color out of range".into());
        }
        if self.feature.len() != dim {
            return bad(format!(
                "feature length {} does not match scene dimension {dim}",
                self.feature.len()
            ));
        }
        if !self.feature.iter().all(|v| v.is_finite()) {
            return bad("non-finite feature".into());
        }
        Ok(())
    }
}

/// Learned cluster ids written alongside the points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointTags {
    pub cluster_l1: Option<Vec<i64>>,
    pub cluster_l2: Option<Vec<i64>>,
    pub kept: Option<Vec<i64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub points: Vec<GaussianPoint>,
    pub feature_dim: usize,
    pub background_feature: Vec<f64>,
    pub ground_truth: Option<Vec<GroundTruth>>,
    pub tags: PointTags,
}

impl Scene {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            points: Vec::new(),
            feature_dim,
            background_feature: vec![0.0; feature_dim],
            ground_truth: None,
            tags: PointTags::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks every point invariant and the ground-truth hierarchy.
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Shape("feature dimension must be positive".into()));
        }
        if self.background_feature.len() != self.feature_dim {
            return Err(Error::Shape("background feature length".into()));
        }
        for (i, p) in self.points.iter().enumerate() {
            p.validate(i, self.feature_dim)?;
        }
        if let Some(gt) = &self.ground_truth {
            if gt.len() != self.points.len() {
                return Err(Error::Shape(format!(
                    "{} ground-truth rows for {} points",
                    gt.len(),
                    self.points.len()
                )));
            }
            // Equal part ids must imply equal whole ids.
            let mut owner = std::collections::HashMap::new();
            for (i, g) in gt.iter().enumerate() {
                if let Some(&w) = owner.get(&g.part) {
                    if w != g.whole {
                        return Err(Error::InvalidPoint {
                            index: i,
                            msg: format!("part {} spans wholes {w} and {}", g.part, g.whole),
                        });
                    }
                } else {
                    owner.insert(g.part, g.whole);
                }
            }
        }
        for (name, tag) in [
            ("cluster_l1", &self.tags.cluster_l1),
            ("cluster_l2", &self.tags.cluster_l2),
            ("kept", &self.tags.kept),
        ] {
            if let Some(t) = tag {
                if t.len() != self.points.len() {
                    return Err(Error::Shape(format!("{name} has {} rows", t.len())));
                }
            }
        }
        Ok(())
    }

    /// Copy of all features as one row per point.
    pub fn features(&self) -> Vec<Vec<f64>> {
        self.points.iter().map(|p| p.feature.clone()).collect()
    }

    pub fn set_features(&mut self, features: &[Vec<f64>]) -> Result<()> {
        if features.len() != self.points.len() {
            return Err(Error::Shape("feature row count".into()));
        }
        for (p, f) in self.points.iter_mut().zip(features) {
            if f.len() != self.feature_dim {
                return Err(Error::Shape("feature row length".into()));
            }
            p.feature.clone_from(f);
        }
        Ok(())
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// A camera. The pose maps world to camera coordinates, +z forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub intrinsics: Intrinsics,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub height: usize,
    pub width: usize,
    pub view_index: usize,
}

impl View {
    /// Camera at `eye` looking at `target`; image rows grow along -`up`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        intrinsics: Intrinsics,
        height: usize,
        width: usize,
        view_index: usize,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self {
            intrinsics,
            rotation,
            translation,
            height,
            width,
            view_index,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| {
            Err(Error::InvalidView {
                index: self.view_index,
                msg: msg.to_string(),
            })
        };
        if self.height < 8 || self.width < 8 {
            return bad("image must be at least 8x8");
        }
        let gram = self.rotation.transpose() * self.rotation;
        if (gram - Matrix3::identity()).abs().max() > 1e-6 {
            return bad("rotation is not orthonormal");
        }
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0 && k.cx.is_finite() && k.cy.is_finite()) {
            return bad("bad intrinsics");
        }
        Ok(())
    }
}

/// Checks that a view sequence is ordered by strictly increasing index.
pub fn validate_views(views: &[View]) -> Result<()> {
    for v in views {
        v.validate()?;
    }
    for pair in views.windows(2) {
        if pair[1].view_index <= pair[0].view_index {
            return Err(Error::InvalidView {
                index: pair[1].view_index,
                msg: "view indices must be strictly increasing".into(),
            });
        }
    }
    Ok(())
}

/// Per-pixel integer labels for one scale; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub level: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, level: usize) -> Self {
        Self {
            height,
            width,
            level,
            labels: vec![0; height * width],
        }
    }

    pub fn from_rows(rows: &[Vec<u32>], level: usize) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == width), "ragged label rows");
        Self {
            height,
            width,
            level,
            labels: rows.concat(),
        }
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize) -> u32 {
        self.labels[h * self.width + w]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, v: u32) {
        self.labels[h * self.width + w] = v;
    }

    pub fn same_shape(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Distinct nonzero labels in ascending order.
    pub fn distinct(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Pixel indices of every nonzero label, keyed by label.
    pub fn masks(&self) -> std::collections::BTreeMap<u32, Vec<u32>> {
        let mut out: std::collections::BTreeMap<u32, Vec<u32>> = Default::default();
        for (i, &l) in self.labels.iter().enumerate() {
            if l != 0 {
                out.entry(l).or_default().push(i as u32);
            }
        }
        out
    }
}

/// Rendered H x W x D feature image, channel-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self {
            height,
            width,
            dim,
            values: vec![0.0; height * width * dim],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.values[index * self.dim..(index + 1) * self.dim]
    }

    #[inline]
    pub fn pixel_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.values[index * self.dim..(index + 1) * self.dim]
    }
}
