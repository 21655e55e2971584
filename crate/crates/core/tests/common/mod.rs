#![allow(dead_code)]

use hoigen::model::{BBox, Detection, GtAnnotation};
use rand::Rng;

/// Integer box used by the exact oracle.
#[derive(Debug, Clone, Copy)]
pub struct IBox(pub i64, pub i64, pub i64, pub i64);

impl IBox {
    fn area(self) -> i64 {
        (self.2 - self.0) * (self.3 - self.1)
    }

    pub fn to_bbox(self) -> BBox {
        BBox::new(self.0 as f64, self.1 as f64, self.2 as f64, self.3 as f64).unwrap()
    }
}

/// IoU as an exact fraction `(inter, union)`.
fn iou_frac(a: IBox, b: IBox) -> (i64, i64) {
    let iw = (a.2.min(b.2) - a.0.max(b.0)).max(0);
    let ih = (a.3.min(b.3) - a.1.max(b.1)).max(0);
    let inter = iw * ih;
    (inter, a.area() + b.area() - inter)
}

fn frac_min(x: (i64, i64), y: (i64, i64)) -> (i64, i64) {
    if x.0 * y.1 <= y.0 * x.1 {
        x
    } else {
        y
    }
}

/// a > b for non-negative fractions.
fn frac_gt(a: (i64, i64), b: (i64, i64)) -> bool {
    a.0 * b.1 > b.0 * a.1
}

#[derive(Debug, Clone)]
pub struct Instance {
    /// `(image, human, object, score)`
    pub dets: Vec<(usize, IBox, IBox, f64)>,
    /// `(image, human, object)`
    pub gt: Vec<(usize, IBox, IBox)>,
}

fn random_box(rng: &mut impl Rng) -> IBox {
    let x1 = rng.random_range(0..5);
    let y1 = rng.random_range(0..5);
    IBox(x1, y1, x1 + rng.random_range(1..4), y1 + rng.random_range(1..4))
}

/// Small instance whose detections are often jittered copies of ground truth,
/// with repeated scores so tie handling is exercised.
pub fn random_instance(rng: &mut impl Rng, max_dets: usize, max_gt: usize) -> Instance {
    let n_gt = rng.random_range(1..=max_gt);
    let gt: Vec<(usize, IBox, IBox)> = (0..n_gt)
        .map(|_| (rng.random_range(0..2), random_box(rng), random_box(rng)))
        .collect();
    let n_det = rng.random_range(0..=max_dets);
    let dets = (0..n_det)
        .map(|_| {
            let score = rng.random_range(1..=5) as f64 / 5.0;
            if rng.random_bool(0.6) {
                let (img, h, o) = gt[rng.random_range(0..gt.len())];
                let dh = rng.random_range(0..=1);
                let doo = rng.random_range(0..=1);
                (img, IBox(h.0, h.1, h.2 + dh, h.3), IBox(o.0, o.1, o.2 + doo, o.3), score)
            } else {
                (rng.random_range(0..2), random_box(rng), random_box(rng), score)
            }
        })
        .collect();
    Instance { dets, gt }
}

pub fn image_name(i: usize) -> String {
    format!("img{i}")
}

pub fn to_library(inst: &Instance, composition: usize) -> (Vec<Detection>, Vec<GtAnnotation>) {
    let dets = inst
        .dets
        .iter()
        .map(|&(img, h, o, score)| Detection {
            image_id: image_name(img),
            human_box: h.to_bbox(),
            object_box: o.to_bbox(),
            composition,
            score,
        })
        .collect();
    let gt = inst
        .gt
        .iter()
        .map(|&(img, h, o)| GtAnnotation {
            image_id: image_name(img),
            human_box: h.to_bbox(),
            object_box: o.to_bbox(),
            composition,
        })
        .collect();
    (dets, gt)
}

/// Per ranked detection: matched GT index, if any.
type Assignment = Vec<Option<usize>>;

fn enumerate(
    ranked: &[usize],
    inst: &Instance,
    k: usize,
    used: &mut Vec<bool>,
    current: &mut Assignment,
    out: &mut Vec<Assignment>,
) {
    if k == ranked.len() {
        out.push(current.clone());
        return;
    }
    current.push(None);
    enumerate(ranked, inst, k + 1, used, current, out);
    current.pop();
    let img = inst.dets[ranked[k]].0;
    for g in 0..inst.gt.len() {
        if used[g] || inst.gt[g].0 != img {
            continue;
        }
        used[g] = true;
        current.push(Some(g));
        enumerate(ranked, inst, k + 1, used, current, out);
        current.pop();
        used[g] = false;
    }
}

/// Pair overlap of a ranked detection with a GT, `None` below the 1/2 threshold.
fn overlap(inst: &Instance, d: usize, g: usize) -> Option<(i64, i64)> {
    let (_, h, o, _) = inst.dets[d];
    let (_, gh, go) = inst.gt[g];
    let m = frac_min(iou_frac(h, gh), iou_frac(o, go));
    (m.0 > 0 && 2 * m.0 >= m.1).then_some(m)
}

/// Compares two assignments rank by rank: a match beats no match, a larger
/// overlap beats a smaller one, and among equal overlaps the earlier GT wins.
fn better(a: &Assignment, b: &Assignment, ranked: &[usize], inst: &Instance) -> bool {
    for k in 0..a.len() {
        let key = |m: Option<usize>| m.map(|g| (overlap(inst, ranked[k], g).unwrap(), g));
        match (key(a[k]), key(b[k])) {
            (None, None) => continue,
            (Some(_), None) => return true,
            (None, Some(_)) => return false,
            (Some((fa, ga)), Some((fb, gb))) => {
                if frac_gt(fa, fb) {
                    return true;
                }
                if frac_gt(fb, fa) {
                    return false;
                }
                if ga != gb {
                    return ga < gb;
                }
            }
        }
    }
    false
}

/// AP by exhaustive enumeration of matchings. Every valid partial matching
/// (one GT per detection at most, overlap at or above one half) is listed,
/// and the one preferred rank by rank is taken as the protocol's outcome.
pub fn oracle_ap(inst: &Instance) -> f64 {
    let n_gt = inst.gt.len();
    let mut ranked: Vec<usize> = (0..inst.dets.len()).collect();
    // Stable: equal scores keep input order.
    ranked.sort_by(|&a, &b| inst.dets[b].3.partial_cmp(&inst.dets[a].3).unwrap());
    let mut all = Vec::new();
    enumerate(&ranked, inst, 0, &mut vec![false; n_gt], &mut Vec::new(), &mut all);
    let valid: Vec<Assignment> = all
        .into_iter()
        .filter(|a| {
            a.iter()
                .enumerate()
                .all(|(k, m)| m.is_none_or(|g| overlap(inst, ranked[k], g).is_some()))
        })
        .collect();
    let mut best = valid[0].clone();
    for a in &valid[1..] {
        if better(a, &best, &ranked, inst) {
            best = a.clone();
        }
    }
    // Precision at each rank, recall levels k / n_gt.
    let mut hits = 0usize;
    let mut precision = Vec::new();
    let mut recall_hits = Vec::new();
    for (k, m) in best.iter().enumerate() {
        hits += m.is_some() as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall_hits.push(hits);
    }
    let mut total = 0.0;
    for level in 1..=n_gt {
        let interp = (0..best.len())
            .filter(|&k| recall_hits[k] >= level)
            .map(|k| precision[k])
            .fold(0.0f64, f64::max);
        total += interp;
    }
    total / n_gt as f64
}

/// Relative error with a floor so near-zero gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
