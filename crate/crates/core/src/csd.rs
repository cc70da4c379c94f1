//! Consistent segmentation detection.
//!
//! For a cluster rendered alone, each view counts how many fine masks its
//! binary region covers (the split number). The counts are smoothed along
//! the view sequence and rounded; a view whose count exceeds the rounded
//! reference is over-segmented, one below it under-segmented.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::loss::Mask;

/// Sliding-window width across views.
pub const DEFAULT_WINDOW: usize = 9;
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum CsdMode {
    /// More masks than the reference: pull only.
    Over,
    /// Fewer masks than the reference: push only.
    Under,
    /// Pull and push.
    Optimal,
}

impl fmt::Display for CsdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CsdMode::Over => "over",
            CsdMode::Under => "under",
            CsdMode::Optimal => "optimal",
        })
    }
}

/// How a mask is matched against the region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverlapMetric {
    /// `|B ∩ M| / |M|`
    #[default]
    Recall,
    /// `|B ∩ M| / |B ∪ M|`
    Iou,
}

impl FromStr for OverlapMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "recall" => Ok(Self::Recall),
            "iou" => Ok(Self::Iou),
            _ => Err(format!("unknown overlap metric `{s}` (expected recall or iou)")),
        }
    }
}

impl fmt::Display for OverlapMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Recall => "recall",
            Self::Iou => "iou",
        })
    }
}

/// Indices into `masks` of the masks matched by `region`.
pub fn matched_masks(region: &[bool], masks: &[Mask], threshold: f64, metric: OverlapMetric) -> Vec<usize> {
    let region_size = region.iter().filter(|b| **b).count();
    if region_size == 0 {
        return Vec::new();
    }
    masks
        .iter()
        .enumerate()
        .filter(|(_, m)| {
            if m.pixels.is_empty() {
                return false;
            }
            let inter = m.pixels.iter().filter(|&&p| region[p as usize]).count() as f64;
            let score = match metric {
                OverlapMetric::Recall => inter / m.pixels.len() as f64,
                OverlapMetric::Iou => inter / ((region_size + m.pixels.len()) as f64 - inter),
            };
            score >= threshold
        })
        .map(|(i, _)| i)
        .collect()
}

/// Number of fine masks the region covers; 0 for an empty region.
pub fn split_number(region: &[bool], masks: &[Mask], threshold: f64, metric: OverlapMetric) -> usize {
    matched_masks(region, masks, threshold, metric).len()
}

/// Centred moving average; the window shrinks at the sequence ends.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let before = (window - 1) / 2;
    let after = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(before);
            let hi = (i + after + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

pub fn decide_mode(split: usize, reference: i64) -> CsdMode {
    match (split as i64).cmp(&reference) {
        std::cmp::Ordering::Greater => CsdMode::Over,
        std::cmp::Ordering::Less => CsdMode::Under,
        std::cmp::Ordering::Equal => CsdMode::Optimal,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CsdRecord {
    pub view_index: usize,
    pub split_number: usize,
    pub smoothed: f64,
    /// Smoothed count rounded half away from zero.
    pub reference: i64,
    pub mode: CsdMode,
}

/// One view's inputs: its index, the cluster's binary region and the view's
/// fine masks.
pub struct CsdInput<'a> {
    pub view_index: usize,
    pub region: &'a [bool],
    pub masks: &'a [Mask],
}

/// Split numbers, smoothing, rounding and mode per view.
///
/// Inputs must be ordered by view index. Views with an empty region are
/// excluded and produce no record.
pub fn csd_pass(inputs: &[CsdInput<'_>], window: usize, threshold: f64, metric: OverlapMetric) -> Vec<CsdRecord> {
    let included: Vec<(usize, usize)> = inputs
        .iter()
        .filter(|v| v.region.iter().any(|b| *b))
        .map(|v| (v.view_index, split_number(v.region, v.masks, threshold, metric)))
        .collect();
    let raw: Vec<f64> = included.iter().map(|&(_, n)| n as f64).collect();
    let smoothed = smooth(&raw, window);
    included
        .iter()
        .zip(smoothed)
        .map(|(&(view_index, n), s)| {
            let reference = s.round() as i64;
            CsdRecord {
                view_index,
                split_number: n,
                smoothed: s,
                reference,
                mode: decide_mode(n, reference),
            }
        })
        .collect()
}

/// `view_index,n,n_smoothed,n_hat,mode` rows with a header.
pub fn records_to_csv(records: &[CsdRecord]) -> String {
    let mut out = String::from("view_index,n,n_smoothed,n_hat,mode\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.view_index, r.split_number, r.smoothed, r.reference, r.mode
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn masks_of(owner: &[usize], count: usize) -> Vec<Mask> {
        (0..count)
            .map(|m| {
                Mask::new(
                    m as u32 + 1,
                    owner
                        .iter()
                        .enumerate()
                        .filter(|(_, &o)| o == m + 1)
                        .map(|(p, _)| p as u32)
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn split_number_examples() {
        let owner = [1, 1, 2, 2, 3, 3, 0, 0];
        let masks = masks_of(&owner, 3);
        let all = vec![true; 8];
        assert_eq!(split_number(&all, &masks, 0.5, OverlapMetric::Recall), 3);
        let none = vec![false, false, false, false, false, false, true, true];
        assert_eq!(split_number(&none, &masks, 0.5, OverlapMetric::Recall), 0);
        assert_eq!(split_number(&[false; 8], &masks, 0.5, OverlapMetric::Recall), 0);
        // a small part inside a large region: recall 1, IoU 2/8
        assert_eq!(split_number(&all, &masks[..1], 0.5, OverlapMetric::Iou), 0);
        assert_eq!(split_number(&all, &masks[..1], 0.5, OverlapMetric::Recall), 1);
    }

    #[test]
    fn split_number_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let owner: Vec<usize> = (0..100).map(|_| rng.random_range(0..6)).collect();
            let masks = masks_of(&owner, 5);
            let region: Vec<bool> = (0..100).map(|_| rng.random_bool(0.5)).collect();
            let t = rng.random_range(0.2..0.8);
            for metric in [OverlapMetric::Recall, OverlapMetric::Iou] {
                let mut count = 0;
                for m in 1..=5 {
                    let (mut inter, mut size, mut uni) = (0, 0, 0);
                    for p in 0..100 {
                        let in_m = owner[p] == m;
                        size += in_m as usize;
                        inter += (in_m && region[p]) as usize;
                        uni += (in_m || region[p]) as usize;
                    }
                    let score = match metric {
                        OverlapMetric::Recall if size > 0 => inter as f64 / size as f64,
                        OverlapMetric::Iou if size > 0 => inter as f64 / uni as f64,
                        _ => -1.0,
                    };
                    count += (score >= t) as usize;
                }
                assert_eq!(split_number(&region, &masks, t, metric), count);
            }
        }
    }

    #[test]
    fn smoothing_examples() {
        assert_eq!(smooth(&[4.0; 12], 9), vec![4.0; 12]);
        let s = smooth(&[3.0, 3.0, 7.0, 3.0, 3.0], 5);
        assert!((s[2] - 19.0 / 5.0).abs() < 1e-15);
        // shrinking window at the ends
        assert!((s[0] - 13.0 / 3.0).abs() < 1e-15);
        assert!(smooth(&[], 9).is_empty());
    }

    #[test]
    fn smoothing_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<f64> = (0..40).map(|_| rng.random_range(0..7) as f64).collect();
        let got = smooth(&xs, 9);
        for i in 0..xs.len() {
            let (mut s, mut n) = (0.0, 0);
            for j in 0..xs.len() {
                if (i as i64 - j as i64).abs() <= 4 {
                    s += xs[j];
                    n += 1;
                }
            }
            assert!((got[i] - s / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn modes() {
        assert_eq!(decide_mode(7, 4), CsdMode::Over);
        assert_eq!(decide_mode(3, 4), CsdMode::Under);
        assert_eq!(decide_mode(4, 4), CsdMode::Optimal);
        assert_eq!((2.5f64).round() as i64, 3);
    }

    #[test]
    fn pass_with_outlier_and_empty_views() {
        // 11 views: every view covers 2 masks, view 5 covers 4, view 8 is empty
        let owner = [1, 1, 2, 2, 3, 3, 4, 4];
        let masks = masks_of(&owner, 4);
        let two = vec![true, true, true, true, false, false, false, false];
        let four = vec![true; 8];
        let empty = vec![false; 8];
        let regions: Vec<&Vec<bool>> = (0..11)
            .map(|v| match v {
                5 => &four,
                8 => &empty,
                _ => &two,
            })
            .collect();
        let inputs: Vec<CsdInput> = (0..11)
            .map(|v| CsdInput {
                view_index: v * 10,
                region: regions[v],
                masks: &masks,
            })
            .collect();
        let recs = csd_pass(&inputs, 9, 0.5, OverlapMetric::Recall);
        assert_eq!(recs.len(), 10);
        assert!(recs.iter().all(|r| r.view_index != 80));
        for r in &recs {
            // the outlier raises every mean it enters by at most 2/5 < 0.5
            assert_eq!(r.reference, 2);
            let want = if r.view_index == 50 {
                CsdMode::Over
            } else {
                CsdMode::Optimal
            };
            assert_eq!(r.mode, want);
        }
        let csv = records_to_csv(&recs);
        assert!(csv.starts_with("view_index,n,n_smoothed,n_hat,mode\n0,2,"));
        assert!(csv.contains("50,4,"));
    }

    #[test]
    fn identical_views_are_optimal() {
        let owner = [1, 2, 3, 0];
        let masks = masks_of(&owner, 3);
        let region = vec![true, true, false, false];
        let inputs: Vec<CsdInput> = (0..6)
            .map(|v| CsdInput {
                view_index: v,
                region: &region,
                masks: &masks,
            })
            .collect();
        assert!(csd_pass(&inputs, 9, 0.5, OverlapMetric::Recall)
            .iter()
            .all(|r| r.mode == CsdMode::Optimal));
    }

    proptest! {
        #[test]
        fn raising_split_never_moves_toward_under(reference in 0i64..10, n in 0usize..10, bump in 0usize..5) {
            let rank = |m: CsdMode| match m { CsdMode::Under => 0, CsdMode::Optimal => 1, CsdMode::Over => 2 };
            prop_assert!(rank(decide_mode(n + bump, reference)) >= rank(decide_mode(n, reference)));
        }

        #[test]
        fn smoothing_shift_equivariant(xs in proptest::collection::vec(0.0f64..10.0, 1..30), c in -5.0f64..5.0) {
            let a = smooth(&xs, 9);
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let b = smooth(&shifted, 9);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x + c - y).abs() < 1e-9);
            }
        }
    }
}
