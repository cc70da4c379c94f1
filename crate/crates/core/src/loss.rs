//! Prototype contrastive terms on rendered feature maps.
//!
//! A prototype is the mean rendered feature over a mask (optionally
//! intersected with a binary region). The pull term draws every supported
//! pixel toward its mask prototype; the push term repels prototypes by
//! inverse squared distance. All gradients are returned with respect to the
//! feature map, ready for [`crate::render::backprop_features`].

use crate::csd::CsdMode;
use crate::scene::FeatureMap;

/// Squared prototype distances are clamped from below by this value.
pub const PUSH_EPS: f64 = 1e-8;

/// A mask as a list of pixel indices (row-major).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub id: u32,
    pub pixels: Vec<u32>,
}

impl Mask {
    pub fn new(id: u32, pixels: Vec<u32>) -> Self {
        Self { id, pixels }
    }

    fn support<'a>(&'a self, region: Option<&'a [bool]>) -> impl Iterator<Item = usize> + 'a {
        self.pixels
            .iter()
            .map(|&p| p as usize)
            .filter(move |&p| region.is_none_or(|r| r[p]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub mask_id: u32,
    pub vector: Vec<f64>,
    pub support_size: usize,
}

/// Mean feature over `mask ∧ region`; `None` when that support is empty.
pub fn prototype(fmap: &FeatureMap, mask: &Mask, region: Option<&[bool]>) -> Option<Prototype> {
    let mut sum = vec![0.0; fmap.dim];
    let mut n = 0usize;
    for p in mask.support(region) {
        for (s, v) in sum.iter_mut().zip(fmap.pixel(p)) {
            *s += v;
        }
        n += 1;
    }
    if n == 0 {
        return None;
    }
    sum.iter_mut().for_each(|s| *s /= n as f64);
    Some(Prototype {
        mask_id: mask.id,
        vector: sum,
        support_size: n,
    })
}

/// `Σ_i Σ_p [B]·M_i(p)·‖F(p) − f̄_i‖²` and its gradient.
///
/// `prototypes[i]` belongs to `masks[i]`. Prototypes are held constant; as
/// each is the mean over the same support, the gradient through it is zero
/// anyway.
pub fn pull_loss(
    fmap: &FeatureMap,
    masks: &[&Mask],
    prototypes: &[Prototype],
    region: Option<&[bool]>,
) -> (f64, FeatureMap) {
    assert_eq!(masks.len(), prototypes.len(), "one prototype per mask");
    let mut grad = FeatureMap::zeros(fmap.height, fmap.width, fmap.dim);
    let mut loss = 0.0;
    for (mask, proto) in masks.iter().zip(prototypes) {
        for p in mask.support(region) {
            let g = grad.pixel_mut(p);
            for ((gv, f), c) in g.iter_mut().zip(fmap.pixel(p)).zip(&proto.vector) {
                let d = f - c;
                loss += d * d;
                *gv += 2.0 * d;
            }
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PushOutcome {
    pub loss: f64,
    /// Gradient with respect to each prototype vector.
    pub grads: Vec<Vec<f64>>,
    /// Fewer than two prototypes: the term is undefined and reported as 0.
    pub skipped: bool,
}

/// `1/(m(m−1)) Σ_{i≠j} 1 / max(‖f̄_i − f̄_j‖², ε)`.
pub fn push_loss(prototypes: &[Prototype]) -> PushOutcome {
    let m = prototypes.len();
    let dim = prototypes.first().map_or(0, |p| p.vector.len());
    let mut grads = vec![vec![0.0; dim]; m];
    if m < 2 {
        return PushOutcome {
            loss: 0.0,
            grads,
            skipped: true,
        };
    }
    let scale = 1.0 / (m * (m - 1)) as f64;
    let mut loss = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            let (a, b) = (&prototypes[i].vector, &prototypes[j].vector);
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            // each unordered pair appears twice in the double sum
            if d2 > PUSH_EPS {
                loss += 2.0 * scale / d2;
                let k = -4.0 * scale / (d2 * d2);
                for c in 0..dim {
                    let g = k * (a[c] - b[c]);
                    grads[i][c] += g;
                    grads[j][c] -= g;
                }
            } else {
                loss += 2.0 * scale / PUSH_EPS;
            }
        }
    }
    PushOutcome {
        loss,
        grads,
        skipped: false,
    }
}

/// Loss values and the combined gradient with respect to the feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub pull: f64,
    pub push: f64,
    pub push_skipped: bool,
    /// Number of masks with non-empty support (m₁ or m₂).
    pub mask_count: usize,
    pub grad: FeatureMap,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.pull + self.push
    }
}

fn contrastive(
    fmap: &FeatureMap,
    masks: &[Mask],
    region: Option<&[bool]>,
    with_pull: bool,
    with_push: bool,
) -> LossTerms {
    let mut used: Vec<&Mask> = Vec::new();
    let mut protos = Vec::new();
    for mask in masks {
        if let Some(p) = prototype(fmap, mask, region) {
            used.push(mask);
            protos.push(p);
        }
    }
    let (pull, mut grad) = if with_pull {
        pull_loss(fmap, &used, &protos, region)
    } else {
        (0.0, FeatureMap::zeros(fmap.height, fmap.width, fmap.dim))
    };
    let (mut push, mut push_skipped) = (0.0, !with_push);
    if with_push {
        let out = push_loss(&protos);
        push = out.loss;
        push_skipped = out.skipped;
        // chain through the prototype means
        for ((mask, proto), g) in used.iter().zip(&protos).zip(&out.grads) {
            let inv = 1.0 / proto.support_size as f64;
            for p in mask.support(region) {
                for (gv, v) in grad.pixel_mut(p).iter_mut().zip(g) {
                    *gv += inv * v;
                }
            }
        }
    }
    LossTerms {
        pull,
        push,
        push_skipped,
        mask_count: used.len(),
        grad,
    }
}

/// Pull plus push over the view's coarsest masks.
pub fn global_loss(fmap: &FeatureMap, masks: &[Mask]) -> LossTerms {
    contrastive(fmap, masks, None, true, true)
}

/// Local terms inside `region`, gated by the view's segmentation mode.
pub fn local_loss(fmap: &FeatureMap, masks: &[Mask], region: &[bool], mode: CsdMode) -> LossTerms {
    let (pull, push) = match mode {
        CsdMode::Over => (true, false),
        CsdMode::Under => (false, true),
        CsdMode::Optimal => (true, true),
    };
    contrastive(fmap, masks, Some(region), pull, push)
}
