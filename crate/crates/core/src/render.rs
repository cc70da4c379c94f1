//! Software splatting of isotropic Gaussians.
//!
//! Rasterization produces a [`ContributionTable`]: for every pixel the
//! depth-ordered list of `(point, α·T)` blend weights plus the residual
//! transmittance. Geometry is frozen during feature learning, so one table
//! per view serves every training step; feature rendering and its adjoint
//! are then plain weighted sums over the table.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::{FeatureMap, GaussianPoint, LabelMap, Scene, View};

/// Points closer than this to the camera plane are invisible.
pub const NEAR_PLANE: f64 = 0.01;
/// Footprints are cut off at this many screen radii.
pub const TRUNCATION: f64 = 3.0;
/// Per-pixel traversal stops once transmittance drops below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Default accumulated-opacity threshold for binary regions.
pub const DEFAULT_REGION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
    pub radius: f64,
}

/// Pinhole projection; `None` when the point is behind the near plane.
pub fn project(point: &GaussianPoint, view: &View) -> Option<Projection> {
    let cam = view.rotation * point.position + view.translation;
    if !(cam.z > NEAR_PLANE) {
        return None;
    }
    let k = &view.intrinsics;
    Some(Projection {
        x: k.fx * cam.x / cam.z + k.cx,
        y: k.fy * cam.y / cam.z + k.cy,
        depth: cam.z,
        radius: point.scale * k.fx / cam.z,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub point: u32,
    pub weight: f64,
}

/// Per-pixel blend weights, front to back.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionTable {
    pub height: usize,
    pub width: usize,
    /// Number of points in the scene the table was built from.
    pub point_count: usize,
    offsets: Vec<usize>,
    entries: Vec<Contribution>,
    t_end: Vec<f64>,
}

impl ContributionTable {
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn pixel(&self, index: usize) -> &[Contribution] {
        &self.entries[self.offsets[index]..self.offsets[index + 1]]
    }

    /// Residual transmittance behind the last contributing point.
    #[inline]
    pub fn residual(&self, index: usize) -> f64 {
        self.t_end[index]
    }

    /// Accumulated opacity `Σ w` at a pixel.
    pub fn coverage(&self, index: usize) -> f64 {
        self.pixel(index).iter().map(|c| c.weight).sum()
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    fn check(&self, scene: &Scene) -> Result<()> {
        if self.point_count != scene.len() {
            return Err(Error::StaleTable {
                table: self.point_count,
                scene: scene.len(),
            });
        }
        Ok(())
    }
}

/// Rasterizes every point of the scene.
pub fn rasterize(scene: &Scene, view: &View) -> ContributionTable {
    let all: Vec<usize> = (0..scene.len()).collect();
    build_table(scene, view, &all)
}

/// Rasterizes only `subset`; entries keep their scene-wide indices.
pub fn rasterize_subset(scene: &Scene, view: &View, subset: &[usize]) -> Result<ContributionTable> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    Ok(build_table(scene, view, subset))
}

/// Tables for many views, computed in parallel.
pub fn rasterize_views(scene: &Scene, views: &[View]) -> Vec<ContributionTable> {
    views.par_iter().map(|v| rasterize(scene, v)).collect()
}

fn build_table(scene: &Scene, view: &View, subset: &[usize]) -> ContributionTable {
    let (height, width) = (view.height, view.width);
    let mut visible: Vec<(usize, Projection)> = subset
        .iter()
        .filter_map(|&i| project(&scene.points[i], view).map(|p| (i, p)))
        .collect();
    // stable: equal depths keep index order
    visible.sort_by(|a, b| a.1.depth.total_cmp(&b.1.depth).then(a.0.cmp(&b.0)));

    let footprint = |p: &Projection| {
        let reach = TRUNCATION * p.radius;
        let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
        let w0 = clamp((p.x - reach - 0.5).ceil(), width);
        let w1 = clamp((p.x + reach - 0.5).floor() + 1.0, width);
        let h0 = clamp((p.y - reach - 0.5).ceil(), height);
        let h1 = clamp((p.y + reach - 0.5).floor() + 1.0, height);
        (h0, h1, w0, w1)
    };

    // Bin candidates per pixel in depth order (count, prefix-sum, fill).
    let mut counts = vec![0usize; height * width + 1];
    for (_, p) in &visible {
        let (h0, h1, w0, w1) = footprint(p);
        for h in h0..h1 {
            for w in w0..w1 {
                counts[h * width + w + 1] += 1;
            }
        }
    }
    for i in 1..counts.len() {
        counts[i] += counts[i - 1];
    }
    let mut cursor = counts.clone();
    let mut candidates = vec![0usize; counts[height * width]];
    for (slot, (_, p)) in visible.iter().enumerate() {
        let (h0, h1, w0, w1) = footprint(p);
        for h in h0..h1 {
            for w in w0..w1 {
                let c = &mut cursor[h * width + w];
                candidates[*c] = slot;
                *c += 1;
            }
        }
    }

    let per_pixel: Vec<(Vec<Contribution>, f64)> = (0..height * width)
        .into_par_iter()
        .map(|pix| {
            let (px, py) = ((pix % width) as f64 + 0.5, (pix / width) as f64 + 0.5);
            let mut list = Vec::new();
            let mut transmittance = 1.0;
            for &slot in &candidates[counts[pix]..counts[pix + 1]] {
                let (index, p) = &visible[slot];
                let d2 = (px - p.x).powi(2) + (py - p.y).powi(2);
                let cutoff = TRUNCATION * p.radius;
                if d2 > cutoff * cutoff {
                    continue;
                }
                let alpha = scene.points[*index].opacity * (-d2 / (2.0 * p.radius * p.radius)).exp();
                if alpha <= 0.0 {
                    continue;
                }
                list.push(Contribution {
                    point: *index as u32,
                    weight: alpha * transmittance,
                });
                transmittance *= 1.0 - alpha;
                if transmittance < MIN_TRANSMITTANCE {
                    break;
                }
            }
            (list, transmittance)
        })
        .collect();

    let mut offsets = Vec::with_capacity(height * width + 1);
    let mut entries = Vec::new();
    let mut t_end = Vec::with_capacity(height * width);
    offsets.push(0);
    for (list, t) in per_pixel {
        entries.extend(list);
        offsets.push(entries.len());
        t_end.push(t);
    }
    ContributionTable {
        height,
        width,
        point_count: scene.len(),
        offsets,
        entries,
        t_end,
    }
}

/// `F(p) = Σ w_i f_i + T_end · background`.
pub fn render_features(scene: &Scene, table: &ContributionTable) -> Result<FeatureMap> {
    table.check(scene)?;
    let dim = scene.feature_dim;
    let mut out = FeatureMap::zeros(table.height, table.width, dim);
    for pix in 0..table.pixel_count() {
        let px = out.pixel_mut(pix);
        for c in table.pixel(pix) {
            let f = &scene.points[c.point as usize].feature;
            for (o, v) in px.iter_mut().zip(f) {
                *o += c.weight * v;
            }
        }
        let t = table.residual(pix);
        if t > 0.0 {
            for (o, b) in px.iter_mut().zip(&scene.background_feature) {
                *o += t * b;
            }
        }
    }
    Ok(out)
}

/// Debug color render (black background).
pub fn render_colors(scene: &Scene, table: &ContributionTable) -> Result<FeatureMap> {
    table.check(scene)?;
    let mut out = FeatureMap::zeros(table.height, table.width, 3);
    for pix in 0..table.pixel_count() {
        let px = out.pixel_mut(pix);
        for c in table.pixel(pix) {
            for (o, v) in px.iter_mut().zip(&scene.points[c.point as usize].color) {
                *o += c.weight * v;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`render_features`]: `∂L/∂f_i = Σ_p w_{i,p} ∂L/∂F(p)`.
///
/// Returns a flat `point_count × dim` buffer. Pixels are visited in index
/// order so the reduction is deterministic.
pub fn backprop_features(grad: &FeatureMap, table: &ContributionTable) -> Result<Vec<f64>> {
    if grad.height != table.height || grad.width != table.width {
        return Err(Error::Shape(format!(
            "gradient is {}x{}, table is {}x{}",
            grad.height, grad.width, table.height, table.width
        )));
    }
    let dim = grad.dim;
    let mut out = vec![0.0; table.point_count * dim];
    for pix in 0..table.pixel_count() {
        let g = grad.pixel(pix);
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        for c in table.pixel(pix) {
            let dst = &mut out[c.point as usize * dim..(c.point as usize + 1) * dim];
            for (d, v) in dst.iter_mut().zip(g) {
                *d += c.weight * v;
            }
        }
    }
    Ok(out)
}

/// `B(p) = 1` iff accumulated opacity exceeds `threshold`.
pub fn region_from_table(table: &ContributionTable, threshold: f64) -> Vec<bool> {
    (0..table.pixel_count())
        .map(|p| table.coverage(p) > threshold)
        .collect()
}

/// Renders `subset` alone and binarizes its accumulated opacity.
pub fn render_subscene_region(scene: &Scene, subset: &[usize], view: &View, threshold: f64) -> Result<Vec<bool>> {
    let table = rasterize_subset(scene, view, subset)?;
    Ok(region_from_table(&table, threshold))
}

/// Labels every pixel with the point label carrying the most blend weight.
///
/// Pixels whose accumulated opacity is below `min_coverage`, or whose
/// contributors are all unlabeled (`None`), stay 0. Ties go to the smaller
/// label.
pub fn label_by_weight(
    table: &ContributionTable,
    point_labels: &[Option<u32>],
    min_coverage: f64,
    level: usize,
) -> LabelMap {
    let mut map = LabelMap::new(table.height, table.width, level);
    let mut acc: Vec<(u32, f64)> = Vec::new();
    for pix in 0..table.pixel_count() {
        let contribs = table.pixel(pix);
        if table.coverage(pix) < min_coverage {
            continue;
        }
        acc.clear();
        for c in contribs {
            if let Some(l) = point_labels[c.point as usize] {
                match acc.iter_mut().find(|(k, _)| *k == l) {
                    Some(slot) => slot.1 += c.weight,
                    None => acc.push((l, c.weight)),
                }
            }
        }
        let best = acc
            .iter()
            .copied()
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((l, _)) = best {
            map.labels[pix] = l;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Intrinsics;
    use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_view(size: usize, f: f64) -> View {
        View {
            intrinsics: Intrinsics {
                fx: f,
                fy: f,
                cx: size as f64 / 2.0,
                cy: size as f64 / 2.0,
            },
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            height: size,
            width: size,
            view_index: 0,
        }
    }

    fn point_at(x: f64, y: f64, z: f64, scale: f64, opacity: f64) -> GaussianPoint {
        GaussianPoint::new(Vector3::new(x, y, z), scale, opacity, 6)
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> Scene {
        let mut s = Scene::new(6);
        for _ in 0..n {
            let mut p = point_at(
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(2.0..4.0),
                rng.random_range(0.03..0.15),
                rng.random_range(0.05..1.0),
            );
            p.feature = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            s.points.push(p);
        }
        s
    }

    #[test]
    fn project_on_axis() {
        let view = axis_view(16, 20.0);
        let p = project(&point_at(0.0, 0.0, 4.0, 0.2, 1.0), &view).unwrap();
        assert_eq!((p.x, p.y, p.depth), (8.0, 8.0, 4.0));
        assert!((p.radius - 0.2 * 20.0 / 4.0).abs() < 1e-15);
        assert!(project(&point_at(0.0, 0.0, -1.0, 0.2, 1.0), &view).is_none());
    }

    #[test]
    fn project_matches_matrix_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let eye = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), -6.0);
            let view = View::look_at(
                eye,
                Vector3::new(rng.random_range(-0.5..0.5), 0.0, 0.0),
                Vector3::y(),
                Intrinsics {
                    fx: 41.0,
                    fy: 37.0,
                    cx: 15.5,
                    cy: 17.0,
                },
                32,
                32,
                0,
            );
            let pt = point_at(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                0.1,
                1.0,
            );
            // independent route: homogeneous [K|0] * [R t; 0 1]
            let mut extr = Matrix4::identity();
            extr.fixed_view_mut::<3, 3>(0, 0).copy_from(&view.rotation);
            extr.fixed_view_mut::<3, 1>(0, 3).copy_from(&view.translation);
            let k = &view.intrinsics;
            let intr = Matrix4::new(
                k.fx, 0.0, k.cx, 0.0, 0.0, k.fy, k.cy, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
            );
            let h = intr * extr * Vector4::new(pt.position.x, pt.position.y, pt.position.z, 1.0);
            let p = project(&pt, &view).unwrap();
            assert!((p.x - h.x / h.z).abs() < 1e-6);
            assert!((p.y - h.y / h.z).abs() < 1e-6);
            assert!((p.depth - h.z).abs() < 1e-6);
        }
    }

    #[test]
    fn opaque_point_on_pixel_center() {
        let view = axis_view(16, 20.0);
        let mut s = Scene::new(6);
        // lands on the centre of pixel (8, 8)
        s.points
            .push(point_at(0.5 / 20.0 * 4.0, 0.5 / 20.0 * 4.0, 4.0, 0.2, 1.0));
        let t = rasterize(&s, &view);
        let pix = 8 * 16 + 8;
        assert_eq!(t.pixel(pix), &[Contribution { point: 0, weight: 1.0 }]);
        assert_eq!(t.residual(pix), 0.0);
    }

    #[test]
    fn colocated_pair_splits_weight() {
        let view = axis_view(16, 20.0);
        let mut s = Scene::new(6);
        let c = 0.5 / 20.0 * 4.0;
        // equal depth: index order decides, so the o=0.5 point is in front
        let mut front = point_at(c, c, 4.0, 0.2, 0.5);
        front.feature[0] = 1.0;
        let mut back = point_at(c, c, 4.0, 0.2, 1.0);
        back.feature[1] = 1.0;
        s.points.push(front);
        s.points.push(back);
        let t = rasterize(&s, &view);
        let pix = 8 * 16 + 8;
        let ws: Vec<(u32, f64)> = t.pixel(pix).iter().map(|c| (c.point, c.weight)).collect();
        assert_eq!(ws, vec![(0, 0.5), (1, 0.5)]);
        let f = render_features(&s, &t).unwrap();
        assert_eq!(&f.pixel(pix)[..2], &[0.5, 0.5]);
    }

    #[test]
    fn empty_scene_is_transparent() {
        let t = rasterize(&Scene::new(6), &axis_view(8, 10.0));
        assert_eq!(t.entry_count(), 0);
        assert!((0..64).all(|p| t.residual(p) == 1.0));
    }

    #[test]
    fn partition_of_unity_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let view = axis_view(16, 25.0);
        for _ in 0..10 {
            let s = random_scene(&mut rng, 40);
            let t = rasterize(&s, &view);
            for pix in 0..t.pixel_count() {
                let list = t.pixel(pix);
                let total: f64 = list.iter().map(|c| c.weight).sum::<f64>() + t.residual(pix);
                assert!((total - 1.0).abs() < 1e-6);
                assert!(list.iter().all(|c| c.weight > 0.0 && c.weight <= 1.0));
                let depths: Vec<f64> = list.iter().map(|c| s.points[c.point as usize].position.z).collect();
                assert!(depths.windows(2).all(|d| d[0] <= d[1]));
            }
            assert_eq!(t, rasterize(&s, &view));
        }
    }

    #[test]
    fn uniform_feature_scales_by_coverage() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let view = axis_view(16, 25.0);
        let mut s = random_scene(&mut rng, 30);
        let v = [0.3, -1.0, 2.0, 0.0, 0.5, 0.25];
        for p in &mut s.points {
            p.feature = v.to_vec();
        }
        let t = rasterize(&s, &view);
        let f = render_features(&s, &t).unwrap();
        for pix in 0..t.pixel_count() {
            // brute force: Σ over the pixel's entries
            let alpha: f64 = t.pixel(pix).iter().map(|c| c.weight).sum();
            for (got, want) in f.pixel(pix).iter().zip(v) {
                assert!((got - alpha * want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stale_table_rejected() {
        let view = axis_view(8, 10.0);
        let mut s = Scene::new(6);
        s.points.push(point_at(0.0, 0.0, 2.0, 0.1, 1.0));
        let t = rasterize(&s, &view);
        s.points.push(point_at(0.0, 0.0, 2.0, 0.1, 1.0));
        assert!(matches!(render_features(&s, &t), Err(Error::StaleTable { .. })));
    }

    #[test]
    fn backprop_single_pixel() {
        let view = axis_view(16, 20.0);
        let mut s = Scene::new(6);
        let c = 0.5 / 20.0 * 4.0;
        s.points.push(point_at(c, c, 4.0, 0.2, 1.0));
        let t = rasterize(&s, &view);
        let mut g = FeatureMap::zeros(16, 16, 6);
        assert!(backprop_features(&g, &t).unwrap().iter().all(|v| *v == 0.0));
        g.pixel_mut(8 * 16 + 8)[2] = 1.0;
        let grad = backprop_features(&g, &t).unwrap();
        assert_eq!(grad[2], 1.0);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let view = axis_view(16, 25.0);
        let mut s = random_scene(&mut rng, 25);
        let t = rasterize(&s, &view);
        // L(F) = Σ_p Σ_c a_{p,c} F² + b_{p,c} F
        let a: Vec<f64> = (0..16 * 16 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..16 * 16 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |s: &Scene| -> f64 {
            let f = render_features(s, &t).unwrap();
            f.values.iter().enumerate().map(|(i, v)| a[i] * v * v + b[i] * v).sum()
        };
        let f = render_features(&s, &t).unwrap();
        let mut g = f.clone();
        for (i, v) in g.values.iter_mut().enumerate() {
            *v = 2.0 * a[i] * f.values[i] + b[i];
        }
        let analytic = backprop_features(&g, &t).unwrap();
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        for i in 0..s.len() {
            for c in 0..6 {
                let orig = s.points[i].feature[c];
                s.points[i].feature[c] = orig + eps;
                let up = loss(&s);
                s.points[i].feature[c] = orig - eps;
                let down = loss(&s);
                s.points[i].feature[c] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic[i * 6 + c];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn subscene_region() {
        let view = axis_view(16, 20.0);
        let mut s = Scene::new(6);
        let c = 0.5 / 20.0 * 4.0;
        s.points.push(point_at(c, c, 4.0, 0.2, 1.0));
        s.points.push(point_at(0.0, 0.0, -4.0, 0.2, 1.0));
        let b = render_subscene_region(&s, &[0], &view, 0.5).unwrap();
        assert!(b[8 * 16 + 8]);
        assert!(render_subscene_region(&s, &[1], &view, 0.5).unwrap().iter().all(|v| !v));
        assert!(matches!(
            render_subscene_region(&s, &[], &view, 0.5),
            Err(Error::EmptySubset)
        ));
    }

    #[test]
    fn region_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let view = axis_view(16, 25.0);
        let s = random_scene(&mut rng, 40);
        let subset: Vec<usize> = (0..40).step_by(2).collect();
        let t = rasterize_subset(&s, &view, &subset).unwrap();
        let mut prev = region_from_table(&t, 0.0);
        for k in 1..=20 {
            let next = region_from_table(&t, k as f64 * 0.05);
            assert!(prev.iter().zip(&next).all(|(a, b)| *a || !*b));
            prev = next;
        }
    }

    #[test]
    fn argmax_labels() {
        let view = axis_view(16, 20.0);
        let mut s = Scene::new(6);
        let c = 0.5 / 20.0 * 4.0;
        s.points.push(point_at(c, c, 4.0, 0.2, 0.3));
        s.points.push(point_at(c, c, 4.1, 0.2, 1.0));
        let t = rasterize(&s, &view);
        let m = label_by_weight(&t, &[Some(4), Some(9)], 0.5, 1);
        assert_eq!(m.get(8, 8), 9);
        assert_eq!(m.get(0, 0), 0);
        assert_eq!(m.level, 1);
    }
}
