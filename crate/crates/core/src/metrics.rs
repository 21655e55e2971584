//! Per-composition average precision, subset mAP, and mean performance
//! degradation (mPD).
//!
//! A detection is a true positive when some unmatched ground-truth pair in
//! the same image overlaps it with `min(IoU_human, IoU_object) >= threshold`;
//! it claims the unmatched candidate with the largest such overlap (first in
//! input order on ties). Detections are ranked by descending score, ties in
//! input order. AP is the all-points interpolated area under the
//! precision/recall curve.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{iou, CompositionId, Detection, GtAnnotation, ObjectId, VerbId, Vocabulary};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Every test image counts.
    Default,
    /// Only images whose ground truth contains the composition's object.
    KnownObject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Full,
    Rare,
    NonRare,
    Seen,
    Unseen,
}

impl Subset {
    pub const ALL: [Subset; 5] = [
        Subset::Full,
        Subset::Rare,
        Subset::NonRare,
        Subset::Seen,
        Subset::Unseen,
    ];

    fn admits(self, vocab: &Vocabulary, c: CompositionId) -> bool {
        match self {
            Subset::Full => true,
            Subset::Rare => vocab.is_rare(c),
            Subset::NonRare => !vocab.is_rare(c),
            Subset::Seen => !vocab.is_unseen(c),
            Subset::Unseen => vocab.is_unseen(c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    pub n_gt: usize,
    /// One point per ranked detection.
    pub curve: Vec<PrPoint>,
    /// True-positive flag per ranked detection.
    pub tp: Vec<bool>,
}

/// Ranking order for detections: descending score, stable.
fn rank<'a>(dets: &[&'a Detection]) -> Vec<&'a Detection> {
    let mut ranked = dets.to_vec();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    ranked
}

/// Greedy matching of already-ranked detections; returns TP flags.
fn match_ranked(ranked: &[&Detection], gt: &[&GtAnnotation], threshold: f64) -> Result<Vec<bool>> {
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gt.iter().enumerate() {
        by_image.entry(g.image_id.as_str()).or_default().push(i);
    }
    let mut used = vec![false; gt.len()];
    let mut flags = Vec::with_capacity(ranked.len());
    for d in ranked {
        let mut best: Option<(usize, f64)> = None;
        if let Some(candidates) = by_image.get(d.image_id.as_str()) {
            for &g in candidates {
                if used[g] {
                    continue;
                }
                let overlap = iou(&d.human_box, &gt[g].human_box)?
                    .min(iou(&d.object_box, &gt[g].object_box)?);
                if overlap >= threshold && best.is_none_or(|(_, b)| overlap > b) {
                    best = Some((g, overlap));
                }
            }
        }
        match best {
            Some((g, _)) => {
                used[g] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    Ok(flags)
}

/// All-points interpolated AP from ranked TP flags.
pub(crate) fn ap_from_flags(tp: &[bool], n_gt: usize) -> (f64, Vec<PrPoint>) {
    let mut curve = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        curve.push(PrPoint {
            recall: hits as f64 / n_gt as f64,
            precision: hits as f64 / (k + 1) as f64,
        });
    }
    let mut envelope = 0.0f64;
    let mut env = vec![0.0; tp.len()];
    for k in (0..tp.len()).rev() {
        envelope = envelope.max(curve[k].precision);
        env[k] = envelope;
    }
    let total: f64 = tp
        .iter()
        .zip(&env)
        .filter_map(|(&t, &e)| t.then_some(e))
        .sum();
    (total / n_gt as f64, curve)
}

fn ap_for(dets: &[&Detection], gt: &[&GtAnnotation], threshold: f64) -> Result<ApResult> {
    if gt.is_empty() {
        return Err(Error::Undefined("AP with zero ground-truth instances".into()));
    }
    let ranked = rank(dets);
    let tp = match_ranked(&ranked, gt, threshold)?;
    let (ap, curve) = ap_from_flags(&tp, gt.len());
    Ok(ApResult {
        ap,
        n_gt: gt.len(),
        curve,
        tp,
    })
}

/// AP of one composition. Inputs may contain other compositions; they are
/// filtered out first.
pub fn compute_ap(
    detections: &[Detection],
    gt: &[GtAnnotation],
    composition: CompositionId,
    iou_threshold: f64,
) -> Result<ApResult> {
    let dets: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.composition == composition)
        .collect();
    let gts: Vec<&GtAnnotation> = gt.iter().filter(|g| g.composition == composition).collect();
    ap_for(&dets, &gts, iou_threshold)
}

/// AP per composition, defined only where ground truth exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApTable {
    pub mode: EvalMode,
    pub iou_threshold: f64,
    pub ap: BTreeMap<CompositionId, f64>,
    pub n_gt: BTreeMap<CompositionId, usize>,
}

impl ApTable {
    /// Table from known AP values, e.g. for reporting externally computed APs.
    pub fn from_values(values: impl IntoIterator<Item = (CompositionId, f64)>) -> Self {
        let ap: BTreeMap<_, _> = values.into_iter().collect();
        let n_gt = ap.keys().map(|&c| (c, 1)).collect();
        Self {
            mode: EvalMode::Default,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            ap,
            n_gt,
        }
    }

    pub fn get(&self, c: CompositionId) -> Option<f64> {
        self.ap.get(&c).copied()
    }
}

/// AP for every composition of `vocab`. Compositions run in parallel; the
/// ordered table makes later reductions independent of thread count.
pub fn evaluate(
    detections: &[Detection],
    gt: &[GtAnnotation],
    vocab: &Vocabulary,
    mode: EvalMode,
    iou_threshold: f64,
) -> Result<ApTable> {
    let n = vocab.n_compositions();
    let mut dets_by: Vec<Vec<&Detection>> = vec![Vec::new(); n];
    let mut gt_by: Vec<Vec<&GtAnnotation>> = vec![Vec::new(); n];
    for d in detections {
        if !vocab.contains(d.composition) {
            return Err(Error::Validation(format!("unknown composition {}", d.composition)));
        }
        dets_by[d.composition].push(d);
    }
    for g in gt {
        if !vocab.contains(g.composition) {
            return Err(Error::Validation(format!("unknown composition {}", g.composition)));
        }
        gt_by[g.composition].push(g);
    }
    let known: HashSet<(&str, ObjectId)> = gt
        .iter()
        .map(|g| (g.image_id.as_str(), vocab.composition(g.composition).1))
        .collect();

    let results: Vec<Option<Result<(f64, usize)>>> = (0..n)
        .into_par_iter()
        .map(|c| {
            if gt_by[c].is_empty() {
                return None;
            }
            let object = vocab.composition(c).1;
            let dets: Vec<&Detection> = match mode {
                EvalMode::Default => dets_by[c].clone(),
                EvalMode::KnownObject => dets_by[c]
                    .iter()
                    .copied()
                    .filter(|d| known.contains(&(d.image_id.as_str(), object)))
                    .collect(),
            };
            Some(ap_for(&dets, &gt_by[c], iou_threshold).map(|r| (r.ap, r.n_gt)))
        })
        .collect();

    let mut table = ApTable {
        mode,
        iou_threshold,
        ap: BTreeMap::new(),
        n_gt: BTreeMap::new(),
    };
    for (c, r) in results.into_iter().enumerate() {
        if let Some(r) = r {
            let (ap, n_gt) = r?;
            table.ap.insert(c, ap);
            table.n_gt.insert(c, n_gt);
        }
    }
    Ok(table)
}

/// Mean AP over the compositions of `subset` that have a defined AP.
pub fn compute_map(table: &ApTable, vocab: &Vocabulary, subset: Subset) -> Result<f64> {
    let values: Vec<f64> = table
        .ap
        .iter()
        .filter(|(&c, _)| vocab.contains(c) && subset.admits(vocab, c))
        .map(|(_, &ap)| ap)
        .collect();
    if values.is_empty() {
        return Err(Error::Undefined(format!("{subset:?} subset has no evaluated compositions")));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerbDegradation {
    pub o_max: ObjectId,
    pub ap_max: f64,
    pub mean_ap: f64,
    pub degradation: f64,
    pub n_objects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpdWarning {
    pub verb: VerbId,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpdReport {
    pub mpd: f64,
    pub per_verb: BTreeMap<VerbId, VerbDegradation>,
    pub excluded: Vec<MpdWarning>,
}

/// Mean performance degradation, averaged uniformly over verbs with at least
/// two evaluated objects and a positive best AP.
pub fn compute_mpd(table: &ApTable, vocab: &Vocabulary) -> Result<MpdReport> {
    let mut per_verb = BTreeMap::new();
    let mut excluded = Vec::new();
    for verb in 0..vocab.n_verbs() {
        let aps: Vec<(ObjectId, f64)> = vocab
            .objects_for_verb(verb)
            .into_iter()
            .filter_map(|o| {
                let c = vocab.lookup(verb, o)?;
                table.get(c).map(|ap| (o, ap))
            })
            .collect();
        if aps.len() < 2 {
            continue;
        }
        let (o_max, ap_max) = aps
            .iter()
            .copied()
            .fold((aps[0].0, f64::NEG_INFINITY), |best, (o, ap)| {
                if ap > best.1 {
                    (o, ap)
                } else {
                    best
                }
            });
        if ap_max <= 0.0 {
            excluded.push(MpdWarning {
                verb,
                reason: "best AP is zero".into(),
            });
            continue;
        }
        let mean_ap = aps.iter().map(|&(_, ap)| ap).sum::<f64>() / aps.len() as f64;
        // Summing gaps to the max keeps equal APs at exactly zero.
        let gaps: f64 = aps.iter().map(|&(_, ap)| ap_max - ap).sum();
        let degradation = gaps / (aps.len() as f64 * ap_max);
        per_verb.insert(
            verb,
            VerbDegradation {
                o_max,
                ap_max,
                mean_ap,
                degradation,
                n_objects: aps.len(),
            },
        );
    }
    if per_verb.is_empty() {
        return Err(Error::Undefined("no verb contributes to mPD".into()));
    }
    let mpd = per_verb.values().map(|d| d.degradation).sum::<f64>() / per_verb.len() as f64;
    Ok(MpdReport {
        mpd,
        per_verb,
        excluded,
    })
}
