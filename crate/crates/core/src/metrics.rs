//! Partition agreement, mask overlap scores and feature similarity summaries.

use std::collections::HashMap;

use crate::scene::LabelMap;

pub const DEFAULT_ACC_THRESHOLD: f64 = 0.25;

fn pairs(n: u64) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index from the contingency table of two labelings.
///
/// Returns 1 when both partitions are trivially identical (all one cluster
/// or all singletons on both sides), where the chance correction is 0/0.
pub fn adjusted_rand_index<A, B>(a: &[A], b: &[B]) -> f64
where
    A: std::hash::Hash + Eq + Copy,
    B: std::hash::Hash + Eq + Copy,
{
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len() as u64;
    let mut table: HashMap<(A, B), u64> = HashMap::new();
    let mut rows: HashMap<A, u64> = HashMap::new();
    let mut cols: HashMap<B, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| pairs(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| pairs(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskScores {
    pub miou: f64,
    pub macc: f64,
    pub mask_count: usize,
}

/// Each ground-truth mask is scored by its best IoU against any predicted
/// mask of the same view. With no ground-truth masks both scores are 0.
pub fn miou_macc(predicted: &[LabelMap], truth: &[LabelMap], acc_threshold: f64) -> MaskScores {
    assert_eq!(predicted.len(), truth.len(), "view counts differ");
    let mut ious = Vec::new();
    for (p, t) in predicted.iter().zip(truth) {
        assert!(p.same_shape(t), "map shapes differ");
        let mut inter: HashMap<(u32, u32), u64> = HashMap::new();
        let mut p_area: HashMap<u32, u64> = HashMap::new();
        let mut t_area: HashMap<u32, u64> = HashMap::new();
        for (&pl, &tl) in p.labels.iter().zip(&t.labels) {
            if pl != 0 {
                *p_area.entry(pl).or_default() += 1;
            }
            if tl != 0 {
                *t_area.entry(tl).or_default() += 1;
                if pl != 0 {
                    *inter.entry((tl, pl)).or_default() += 1;
                }
            }
        }
        let mut best: HashMap<u32, f64> = t_area.keys().map(|&l| (l, 0.0)).collect();
        for (&(tl, pl), &i) in &inter {
            let iou = i as f64 / (t_area[&tl] + p_area[&pl] - i) as f64;
            let b = best.get_mut(&tl).expect("gt label counted");
            *b = b.max(iou);
        }
        let mut labels: Vec<_> = best.into_iter().collect();
        labels.sort_by_key(|(l, _)| *l);
        ious.extend(labels.into_iter().map(|(_, v)| v));
    }
    if ious.is_empty() {
        return MaskScores {
            miou: 0.0,
            macc: 0.0,
            mask_count: 0,
        };
    }
    let n = ious.len() as f64;
    MaskScores {
        miou: ious.iter().sum::<f64>() / n,
        macc: ious.iter().filter(|&&v| v > acc_threshold).count() as f64 / n,
        mask_count: ious.len(),
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSummary {
    /// Mean cosine over pairs sharing a group.
    pub intra: f64,
    /// Mean cosine over pairs from different groups.
    pub inter: f64,
}

/// Mean pairwise cosine similarity within and across groups.
pub fn cosine_summary(features: &[Vec<f64>], groups: &[i64]) -> CosineSummary {
    let unit: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            f.iter().map(|v| if n > 0.0 { v / n } else { 0.0 }).collect()
        })
        .collect();
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0u64, 0.0, 0u64);
    for i in 0..unit.len() {
        for j in i + 1..unit.len() {
            let c: f64 = unit[i].iter().zip(&unit[j]).map(|(x, y)| x * y).sum();
            if groups[i] == groups[j] {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                nx += 1;
            }
        }
    }
    CosineSummary {
        intra: if ni > 0 { intra / ni as f64 } else { f64::NAN },
        inter: if nx > 0 { inter / nx as f64 } else { f64::NAN },
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
