//! Per-view object trees built from multi-scale label maps.
//!
//! Raw multi-scale maps overlap and leave gaps. Refinement runs four steps
//! in a fixed order (fill, edge zeroing, cutting, size filtering) after which
//! every finer mask sits inside exactly one coarser mask; a depth-first walk
//! from the coarsest level then links the masks into trees.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scene::LabelMap;

/// Minimum mask size at full SAM resolution.
pub const FULL_RES_MIN_MASK_PIXELS: usize = 2500;
/// Full-resolution image area the size filter was tuned on.
pub const FULL_RES_PIXELS: usize = 738 * 994;

/// Size filter scaled to an `height x width` image.
pub fn default_min_mask_pixels(height: usize, width: usize, full_res_pixels: usize) -> usize {
    let scaled = FULL_RES_MIN_MASK_PIXELS as f64 * (height * width) as f64 / full_res_pixels as f64;
    (scaled.round() as usize).max(8)
}

const NEIGHBORS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

fn neighbors(h: usize, w: usize, height: usize, width: usize) -> impl Iterator<Item = (usize, usize)> {
    NEIGHBORS.iter().filter_map(move |&(dh, dw)| {
        let (nh, nw) = (h as isize + dh, w as isize + dw);
        (nh >= 0 && nw >= 0 && (nh as usize) < height && (nw as usize) < width).then_some((nh as usize, nw as usize))
    })
}

fn check_shapes(levels: &[LabelMap]) -> Result<()> {
    if let Some(first) = levels.first() {
        if let Some(bad) = levels.iter().find(|m| !m.same_shape(first)) {
            return Err(Error::Shape(format!(
                "level {} is {}x{}, level {} is {}x{}",
                first.level, first.height, first.width, bad.level, bad.height, bad.width
            )));
        }
    }
    Ok(())
}

/// Order in which other levels are consulted when filling level `level`:
/// nearest first, the coarser side before the finer side on ties.
fn fill_order(level: usize, count: usize) -> Vec<usize> {
    let mut order = Vec::new();
    for dist in 1..count {
        if level >= dist {
            order.push(level - dist);
        }
        if level + dist < count {
            order.push(level + dist);
        }
    }
    order
}

/// Fills each level's gaps from the nearest level that labels the pixel.
///
/// Levels are ordered coarse to fine. Every 8-connected gap region sharing
/// one source mask receives one fresh label above the level's existing ids.
/// Sources are always the input maps, so the result does not depend on the
/// order levels are processed in.
pub fn fill_missing(levels: &[LabelMap]) -> Result<Vec<LabelMap>> {
    check_shapes(levels)?;
    let mut out = levels.to_vec();
    let Some(first) = levels.first() else {
        return Ok(out);
    };
    let (height, width) = (first.height, first.width);
    for (li, target) in out.iter_mut().enumerate() {
        let order = fill_order(li, levels.len());
        // source (level, label) per gap pixel
        let source: Vec<Option<(usize, u32)>> = (0..height * width)
            .map(|p| {
                if levels[li].labels[p] != 0 {
                    return None;
                }
                order
                    .iter()
                    .find(|&&o| levels[o].labels[p] != 0)
                    .map(|&o| (o, levels[o].labels[p]))
            })
            .collect();
        let mut next = levels[li].max_label() + 1;
        let mut assigned = vec![false; height * width];
        let mut stack = Vec::new();
        for seed in 0..height * width {
            let Some(src) = source[seed] else { continue };
            if assigned[seed] {
                continue;
            }
            let fresh = next;
            next += 1;
            assigned[seed] = true;
            stack.push(seed);
            while let Some(p) = stack.pop() {
                target.labels[p] = fresh;
                for (nh, nw) in neighbors(p / width, p % width, height, width) {
                    let q = nh * width + nw;
                    if !assigned[q] && source[q] == Some(src) {
                        assigned[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Pixels with an in-bounds 8-neighbour carrying a different nonzero label.
pub fn edge_pixels(map: &LabelMap) -> Vec<bool> {
    let (height, width) = (map.height, map.width);
    (0..height * width)
        .map(|p| {
            let l = map.labels[p];
            l != 0
                && neighbors(p / width, p % width, height, width).any(|(nh, nw)| {
                    let n = map.get(nh, nw);
                    n != 0 && n != l
                })
        })
        .collect()
}

/// Zeroes every pixel that borders a different mask.
pub fn zero_edges(map: &LabelMap) -> LabelMap {
    let mut out = map.clone();
    for (l, edge) in out.labels.iter_mut().zip(edge_pixels(map)) {
        if edge {
            *l = 0;
        }
    }
    out
}

/// Zeroes, at every level, the union of all levels' edge pixels.
pub fn zero_edges_joint(levels: &[LabelMap]) -> Result<Vec<LabelMap>> {
    check_shapes(levels)?;
    let Some(first) = levels.first() else {
        return Ok(Vec::new());
    };
    let mut union = vec![false; first.labels.len()];
    for m in levels {
        for (u, e) in union.iter_mut().zip(edge_pixels(m)) {
            *u |= e;
        }
    }
    Ok(levels
        .iter()
        .map(|m| {
            let mut out = m.clone();
            for (l, &e) in out.labels.iter_mut().zip(&union) {
                if e {
                    *l = 0;
                }
            }
            out
        })
        .collect())
}

/// Restricts `fine` to the support of `coarse`.
///
/// A fine mask spread over several coarse labels is split into one fragment
/// per coarse label; the fragment in the coarse label holding most of its
/// pixels keeps the original id, the others get fresh ids.
pub fn cut(fine: &LabelMap, coarse: &LabelMap) -> Result<LabelMap> {
    if !fine.same_shape(coarse) {
        return Err(Error::Shape("cut: level shapes differ".into()));
    }
    let mut overlap: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
    for (&f, &c) in fine.labels.iter().zip(&coarse.labels) {
        if f != 0 && c != 0 {
            *overlap.entry(f).or_default().entry(c).or_default() += 1;
        }
    }
    let mut next = fine.max_label() + 1;
    let mut rename: HashMap<(u32, u32), u32> = HashMap::new();
    for (&f, parents) in &overlap {
        let keeper = parents
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&c, _)| c)
            .expect("non-empty overlap");
        for &c in parents.keys() {
            let id = if c == keeper {
                f
            } else {
                next += 1;
                next - 1
            };
            rename.insert((f, c), id);
        }
    }
    let mut out = fine.clone();
    for (l, &c) in out.labels.iter_mut().zip(&coarse.labels) {
        *l = if *l == 0 || c == 0 { 0 } else { rename[&(*l, c)] };
    }
    Ok(out)
}

/// Zeroes masks smaller than `min_pixels`.
pub fn filter_small(map: &LabelMap, min_pixels: usize) -> LabelMap {
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for &l in &map.labels {
        if l != 0 {
            *counts.entry(l).or_default() += 1;
        }
    }
    let mut out = map.clone();
    for l in out.labels.iter_mut() {
        if *l != 0 && counts[l] < min_pixels {
            *l = 0;
        }
    }
    out
}

/// Full refinement: fill, joint edge zeroing, coarse-to-fine cutting and
/// size filtering.
pub fn refine(levels: &[LabelMap], min_pixels: usize) -> Result<Vec<LabelMap>> {
    let filled = fill_missing(levels)?;
    let mut maps = zero_edges_joint(&filled)?;
    for li in 1..maps.len() {
        maps[li] = cut(&maps[li], &maps[li - 1])?;
    }
    Ok(maps.iter().map(|m| filter_small(m, min_pixels)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskNode {
    pub id: usize,
    pub level: usize,
    pub view_index: usize,
    pub label: u32,
    pub pixel_count: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

/// Refined maps of one view plus their mask trees.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskForest {
    pub view_index: usize,
    pub levels: Vec<LabelMap>,
    /// Nodes in depth-first order; `id` is the position in this list.
    pub nodes: Vec<MaskNode>,
    pub roots: Vec<usize>,
    /// Fine masks dropped because no surviving coarser mask contains them.
    pub dropped_orphans: usize,
}

impl MaskForest {
    /// Pixel lists of all masks at `level`, keyed by label.
    pub fn masks(&self, level: usize) -> BTreeMap<u32, Vec<u32>> {
        self.levels.get(level).map(|m| m.masks()).unwrap_or_default()
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn node(&self, level: usize, label: u32) -> Option<&MaskNode> {
        self.nodes.iter().find(|n| n.level == level && n.label == label)
    }

    /// One JSON object per node: id, view, level, parent, pixel_count.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let row = serde_json::json!({
                "id": n.id,
                "view": n.view_index,
                "level": n.level,
                "parent": n.parent,
                "pixel_count": n.pixel_count,
            });
            out.push_str(&row.to_string());
            out.push('\n');
        }
        out
    }
}

/// Links refined levels into trees by depth-first search from level 0.
pub fn build_forest(levels: &[LabelMap], view_index: usize) -> Result<MaskForest> {
    check_shapes(levels)?;
    let mut maps = levels.to_vec();
    let mut dropped = 0;
    // parent label of every mask, per level; orphans are zeroed on the way down
    let mut parent_of: Vec<BTreeMap<u32, u32>> = vec![BTreeMap::new(); maps.len()];
    for li in 1..maps.len() {
        let mut touched: BTreeMap<u32, (Vec<u32>, bool)> = BTreeMap::new();
        for (&f, &c) in maps[li].labels.iter().zip(&maps[li - 1].labels) {
            if f == 0 {
                continue;
            }
            let e = touched.entry(f).or_default();
            if c == 0 {
                e.1 = true;
            } else if !e.0.contains(&c) {
                e.0.push(c);
            }
        }
        let mut orphans = Vec::new();
        for (&f, (parents, outside)) in &touched {
            match (parents.len(), outside) {
                (1, false) => {
                    parent_of[li].insert(f, parents[0]);
                }
                (0 | 1, _) => orphans.push(f),
                (n, _) => {
                    return Err(Error::Containment {
                        level: li,
                        label: f,
                        parents: n,
                    })
                }
            }
        }
        if !orphans.is_empty() {
            dropped += orphans.len();
            for l in maps[li].labels.iter_mut() {
                if orphans.contains(l) {
                    *l = 0;
                }
            }
        }
    }

    let sizes: Vec<BTreeMap<u32, usize>> = maps
        .iter()
        .map(|m| m.masks().into_iter().map(|(l, px)| (l, px.len())).collect())
        .collect();
    let mut children_of: Vec<BTreeMap<u32, Vec<u32>>> = vec![BTreeMap::new(); maps.len()];
    for li in 1..maps.len() {
        for (&f, &c) in &parent_of[li] {
            children_of[li - 1].entry(c).or_default().push(f);
        }
    }

    let mut forest = MaskForest {
        view_index,
        levels: Vec::new(),
        nodes: Vec::new(),
        roots: Vec::new(),
        dropped_orphans: dropped,
    };
    let Some(top) = sizes.first() else {
        return Ok(forest);
    };
    // explicit stack DFS: (level, label, parent id)
    for &root in top.keys() {
        let mut stack = vec![(0usize, root, None::<usize>)];
        while let Some((level, label, parent)) = stack.pop() {
            let id = forest.nodes.len();
            forest.nodes.push(MaskNode {
                id,
                level,
                view_index,
                label,
                pixel_count: sizes[level][&label],
                parent,
                children: Vec::new(),
            });
            match parent {
                Some(p) => forest.nodes[p].children.push(id),
                None => forest.roots.push(id),
            }
            if let Some(kids) = children_of[level].get(&label) {
                for &k in kids.iter().rev() {
                    stack.push((level + 1, k, Some(id)));
                }
            }
        }
    }
    forest.levels = maps;
    Ok(forest)
}

/// Refines raw levels and builds the view's forest.
pub fn build_view_forest(levels: &[LabelMap], view_index: usize, min_pixels: usize) -> Result<MaskForest> {
    build_forest(&refine(levels, min_pixels)?, view_index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map<const W: usize>(rows: &[[u32; W]], level: usize) -> LabelMap {
        LabelMap::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), level)
    }

    fn support(m: &LabelMap) -> Vec<bool> {
        m.labels.iter().map(|&l| l != 0).collect()
    }

    #[test]
    fn min_mask_pixels_scaling() {
        assert_eq!(default_min_mask_pixels(738, 994, FULL_RES_PIXELS), 2500);
        assert_eq!(default_min_mask_pixels(64, 64, FULL_RES_PIXELS), 14);
        assert_eq!(default_min_mask_pixels(16, 16, FULL_RES_PIXELS), 8);
    }

    #[test]
    fn fill_hole_from_fine_mask() {
        let coarse = map(&[[1, 1, 1, 1], [1, 0, 0, 1], [1, 0, 0, 1], [1, 1, 1, 1]], 0);
        let fine = map(&[[0, 0, 0, 0], [0, 5, 5, 0], [0, 5, 5, 0], [0, 0, 0, 0]], 1);
        let out = fill_missing(&[coarse.clone(), fine.clone()]).unwrap();
        let fresh = out[0].get(1, 1);
        assert!(fresh > 1);
        for (p, &l) in fine.labels.iter().enumerate() {
            assert_eq!(out[0].labels[p] == fresh, l == 5);
        }
        // fine gaps are filled from the coarse ring
        assert!(out[1].labels.iter().all(|&l| l != 0));
        assert_eq!(out[1].get(1, 1), 5);
    }

    #[test]
    fn fill_leaves_global_background() {
        let a = map(&[[0, 1], [0, 0]], 0);
        let b = map(&[[0, 0], [0, 0]], 1);
        let out = fill_missing(&[a, b]).unwrap();
        assert_eq!(out[0].get(0, 0), 0);
        assert_eq!(out[1].get(1, 1), 0);
        assert_eq!(out[1].get(0, 1), 1);
    }

    #[test]
    fn fill_rejects_size_mismatch() {
        assert!(fill_missing(&[LabelMap::new(2, 2, 0), LabelMap::new(3, 2, 1)]).is_err());
    }

    #[test]
    fn edges_uniform_and_split() {
        let uniform = LabelMap::from_rows(&vec![vec![4; 5]; 5], 0);
        assert_eq!(zero_edges(&uniform), uniform);
        let split = map(&[[1, 1, 2, 2], [1, 1, 2, 2], [1, 1, 2, 2], [1, 1, 2, 2]], 0);
        let want = map(&[[1, 0, 0, 2], [1, 0, 0, 2], [1, 0, 0, 2], [1, 0, 0, 2]], 0);
        assert_eq!(zero_edges(&split), want);
    }

    #[test]
    fn cut_examples() {
        let coarse = map(&[[3, 3, 3, 3]; 2], 0);
        let fine = map(&[[1, 1, 2, 2]; 2], 1);
        assert_eq!(cut(&fine, &coarse).unwrap(), fine);

        let coarse = map(&[[7, 7, 0, 0]; 2], 0);
        let fine = map(&[[1, 1, 1, 1]; 2], 1);
        assert_eq!(cut(&fine, &coarse).unwrap(), map(&[[1, 1, 0, 0]; 2], 1));

        // straddling mask: larger fragment keeps the id
        let coarse = map(&[[7, 7, 7, 8]], 0);
        let fine = map(&[[1, 1, 1, 1]], 1);
        assert_eq!(cut(&fine, &coarse).unwrap(), map(&[[1, 1, 1, 2]], 1));
    }

    #[test]
    fn filter_threshold_is_inclusive() {
        let mut m = LabelMap::new(4, 4, 0);
        for p in 0..5 {
            m.labels[p] = 1;
        }
        for p in 5..9 {
            m.labels[p] = 2;
        }
        let out = filter_small(&m, 5);
        assert_eq!(out.labels.iter().filter(|&&l| l == 1).count(), 5);
        assert_eq!(out.labels.iter().filter(|&&l| l == 2).count(), 0);
    }

    #[test]
    fn forest_one_root_two_children() {
        let coarse = map(&[[1, 1, 1, 1, 1]; 3], 0);
        let fine = map(&[[2, 2, 0, 3, 3]; 3], 1);
        let f = build_forest(&[coarse, fine], 4).unwrap();
        assert_eq!(f.roots, vec![0]);
        assert_eq!(f.nodes[0].children.len(), 2);
        assert_eq!(f.nodes[1].parent, Some(0));
        assert_eq!(f.nodes[1].pixel_count, 6);
        assert!(f.nodes.iter().all(|n| n.view_index == 4));
        assert_eq!(f.to_json_lines().lines().count(), 3);
        let row: serde_json::Value = serde_json::from_str(f.to_json_lines().lines().nth(1).unwrap()).unwrap();
        assert_eq!(row["parent"], 0);
        assert_eq!(row["level"], 1);
    }

    #[test]
    fn forest_with_empty_fine_level() {
        let coarse = map(&[[1, 1, 0, 2, 2]], 0);
        let f = build_forest(&[coarse, LabelMap::new(1, 5, 1)], 0).unwrap();
        assert_eq!(f.roots.len(), 2);
        assert!(f.nodes.iter().all(|n| n.children.is_empty()));
    }

    #[test]
    fn forest_drops_orphans_and_flags_ambiguity() {
        let coarse = map(&[[1, 1, 0, 0]], 0);
        let fine = map(&[[0, 0, 5, 5]], 1);
        let f = build_forest(&[coarse, fine], 0).unwrap();
        assert_eq!(f.dropped_orphans, 1);
        assert!(f.levels[1].labels.iter().all(|&l| l == 0));

        let coarse = map(&[[1, 1, 2, 2]], 0);
        let fine = map(&[[5, 5, 5, 5]], 1);
        assert!(matches!(
            build_forest(&[coarse, fine], 0),
            Err(Error::Containment { .. })
        ));
    }

    fn arb_levels(max_side: usize) -> impl Strategy<Value = (usize, usize, Vec<u32>, Vec<u32>)> {
        (4..max_side, 4..max_side).prop_flat_map(|(h, w)| {
            (
                Just(h),
                Just(w),
                proptest::collection::vec(0u32..4, h * w),
                proptest::collection::vec(0u32..6, h * w),
            )
        })
    }

    fn blocky(h: usize, w: usize, seeds: &[u32], level: usize, block: usize) -> LabelMap {
        // piecewise-constant blocks look more like masks than i.i.d. noise
        let bw = w.div_ceil(block);
        let mut m = LabelMap::new(h, w, level);
        for r in 0..h {
            for c in 0..w {
                m.set(r, c, seeds[(r / block) * bw + c / block]);
            }
        }
        m
    }

    proptest! {
        #[test]
        fn fill_covers_union((h, w, a, b) in arb_levels(14)) {
            let coarse = LabelMap { height: h, width: w, level: 0, labels: a };
            let fine = LabelMap { height: h, width: w, level: 1, labels: b };
            let out = fill_missing(&[coarse.clone(), fine.clone()]).unwrap();
            let (sc, sf, so) = (support(&coarse), support(&fine), support(&out[0]));
            for p in 0..h * w {
                prop_assert!(!(sc[p] || sf[p]) || so[p]);
                prop_assert_eq!(so[p], sc[p] || sf[p]);
                if sc[p] {
                    prop_assert_eq!(out[0].labels[p], coarse.labels[p]);
                } else if sf[p] {
                    prop_assert!(out[0].labels[p] > coarse.max_label());
                }
            }
        }

        #[test]
        fn zero_edges_matches_neighbor_scan((h, w, a, _b) in arb_levels(14)) {
            let m = LabelMap { height: h, width: w, level: 0, labels: a };
            let out = zero_edges(&m);
            for r in 0..h {
                for c in 0..w {
                    let l = m.get(r, c);
                    let mut edge = false;
                    for dr in -1i64..=1 {
                        for dc in -1i64..=1 {
                            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                            if (dr, dc) == (0, 0) || nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                                continue;
                            }
                            let n = m.get(nr as usize, nc as usize);
                            edge |= n != 0 && n != l;
                        }
                    }
                    let want = if l != 0 && edge { 0 } else { l };
                    prop_assert_eq!(out.get(r, c), want);
                }
            }
        }

        #[test]
        fn cut_yields_single_parent((h, w, a, b) in arb_levels(14)) {
            let coarse = LabelMap { height: h, width: w, level: 0, labels: a };
            let fine = LabelMap { height: h, width: w, level: 1, labels: b };
            let out = cut(&fine, &coarse).unwrap();
            let mut parent: HashMap<u32, u32> = HashMap::new();
            for (&f, &c) in out.labels.iter().zip(&coarse.labels) {
                if f == 0 { continue; }
                prop_assert!(c != 0);
                prop_assert_eq!(*parent.entry(f).or_insert(c), c);
            }
        }

        #[test]
        fn filter_survivors_large_enough((h, w, a, _b) in arb_levels(14), min in 1usize..12) {
            let m = LabelMap { height: h, width: w, level: 0, labels: a };
            let out = filter_small(&m, min);
            let mut hist: HashMap<u32, usize> = HashMap::new();
            for &l in out.labels.iter().filter(|&&l| l != 0) {
                *hist.entry(l).or_default() += 1;
            }
            prop_assert!(hist.values().all(|&n| n >= min));
            for (o, i) in out.labels.iter().zip(&m.labels) {
                prop_assert!(*o == 0 || o == i);
            }
        }

        #[test]
        fn forest_accounts_for_every_pixel(
            (h, w) in (8usize..20, 8usize..20),
            seeds in proptest::collection::vec((0u32..4, 0u32..9), 100),
            min in 1usize..10,
        ) {
            let a: Vec<u32> = seeds.iter().map(|s| s.0).collect();
            let b: Vec<u32> = seeds.iter().map(|s| s.1).collect();
            let coarse = blocky(h, w, &a, 0, 4);
            let fine = blocky(h, w, &b, 1, 2);
            let f = build_view_forest(&[coarse, fine], 0, min).unwrap();
            for (level, m) in f.levels.iter().enumerate() {
                let mut from_nodes: Vec<(u32, usize)> = f.nodes.iter()
                    .filter(|n| n.level == level)
                    .map(|n| (n.label, n.pixel_count))
                    .collect();
                from_nodes.sort_unstable();
                let from_map: Vec<(u32, usize)> = m.masks().into_iter().map(|(l, px)| (l, px.len())).collect();
                prop_assert_eq!(from_nodes, from_map);
            }
        }
    }
}
