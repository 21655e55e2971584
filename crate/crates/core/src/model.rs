//! Domain types shared by every stage: the HOI vocabulary, boxes, poses,
//! candidate pairs and the evaluation records.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type VerbId = usize;
pub type ObjectId = usize;
/// Index into [`Vocabulary::compositions`].
pub type CompositionId = usize;

/// Verbs, object categories and the legal (verb, object) compositions.
///
/// Immutable after construction. Rare and unseen flags are stored as
/// composition-index lists on disk and as dense masks in memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    verbs: Vec<String>,
    objects: Vec<String>,
    compositions: Vec<(VerbId, ObjectId)>,
    rare: Vec<bool>,
    unseen: Vec<bool>,
    #[serde(skip)]
    index: HashMap<(VerbId, ObjectId), CompositionId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabularyFile {
    verbs: Vec<String>,
    objects: Vec<String>,
    compositions: Vec<[usize; 2]>,
    rare: Vec<usize>,
    unseen: Vec<usize>,
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = Error;

    fn try_from(file: VocabularyFile) -> Result<Self> {
        let n = file.compositions.len();
        let mask = |ids: &[usize], what: &str| -> Result<Vec<bool>> {
            let mut mask = vec![false; n];
            for &c in ids {
                if c >= n {
                    return Err(Error::Validation(format!(
                        "{what} index {c} out of range for {n} compositions"
                    )));
                }
                mask[c] = true;
            }
            Ok(mask)
        };
        let rare = mask(&file.rare, "rare")?;
        let unseen = mask(&file.unseen, "unseen")?;
        Vocabulary::new(
            file.verbs,
            file.objects,
            file.compositions.into_iter().map(|[v, o]| (v, o)).collect(),
            rare,
            unseen,
        )
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        let ids = |mask: &[bool]| {
            mask.iter()
                .enumerate()
                .filter_map(|(i, &m)| m.then_some(i))
                .collect()
        };
        VocabularyFile {
            rare: ids(&v.rare),
            unseen: ids(&v.unseen),
            compositions: v.compositions.iter().map(|&(a, b)| [a, b]).collect(),
            verbs: v.verbs,
            objects: v.objects,
        }
    }
}

impl Vocabulary {
    pub fn new(
        verbs: Vec<String>,
        objects: Vec<String>,
        compositions: Vec<(VerbId, ObjectId)>,
        rare: Vec<bool>,
        unseen: Vec<bool>,
    ) -> Result<Self> {
        fn no_duplicates(names: &[String], what: &str) -> Result<()> {
            let mut seen = HashSet::new();
            for name in names {
                if !seen.insert(name.as_str()) {
                    return Err(Error::Validation(format!("duplicate {what} name `{name}`")));
                }
            }
            Ok(())
        }
        no_duplicates(&verbs, "verb")?;
        no_duplicates(&objects, "object")?;
        if rare.len() != compositions.len() || unseen.len() != compositions.len() {
            return Err(Error::Validation(format!(
                "rare/unseen masks have {}/{} entries for {} compositions",
                rare.len(),
                unseen.len(),
                compositions.len()
            )));
        }
        let mut index = HashMap::with_capacity(compositions.len());
        for (c, &(v, o)) in compositions.iter().enumerate() {
            if v >= verbs.len() || o >= objects.len() {
                return Err(Error::Validation(format!(
                    "composition {c} references verb {v} / object {o} outside the vocabulary"
                )));
            }
            if index.insert((v, o), c).is_some() {
                return Err(Error::Validation(format!(
                    "composition ({v}, {o}) listed twice"
                )));
            }
        }
        Ok(Self {
            verbs,
            objects,
            compositions,
            rare,
            unseen,
            index,
        })
    }

    pub fn verbs(&self) -> &[String] {
        &self.verbs
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn n_verbs(&self) -> usize {
        self.verbs.len()
    }

    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn n_compositions(&self) -> usize {
        self.compositions.len()
    }

    pub fn compositions(&self) -> &[(VerbId, ObjectId)] {
        &self.compositions
    }

    pub fn composition(&self, id: CompositionId) -> (VerbId, ObjectId) {
        self.compositions[id]
    }

    pub fn lookup(&self, verb: VerbId, object: ObjectId) -> Option<CompositionId> {
        self.index.get(&(verb, object)).copied()
    }

    pub fn contains(&self, id: CompositionId) -> bool {
        id < self.compositions.len()
    }

    pub fn is_rare(&self, id: CompositionId) -> bool {
        self.rare[id]
    }

    pub fn is_unseen(&self, id: CompositionId) -> bool {
        self.unseen[id]
    }

    pub fn rare_mask(&self) -> &[bool] {
        &self.rare
    }

    pub fn unseen_mask(&self) -> &[bool] {
        &self.unseen
    }

    /// `O_v`: object categories that legally compose with `verb`, in
    /// composition-index order.
    pub fn objects_for_verb(&self, verb: VerbId) -> Vec<ObjectId> {
        self.compositions
            .iter()
            .filter(|&&(v, _)| v == verb)
            .map(|&(_, o)| o)
            .collect()
    }

    pub fn verbs_for_object(&self, object: ObjectId) -> Vec<VerbId> {
        self.compositions
            .iter()
            .filter(|&&(_, o)| o == object)
            .map(|&(v, _)| v)
            .collect()
    }

    /// Copy of this vocabulary with new rare/unseen masks.
    pub fn with_flags(&self, rare: Vec<bool>, unseen: Vec<bool>) -> Result<Self> {
        Self::new(
            self.verbs.clone(),
            self.objects.clone(),
            self.compositions.clone(),
            rare,
            unseen,
        )
    }
}

/// Axis-aligned box in corner format, pixel coordinates.
///
/// Fields are public so that raw, possibly corrupt, input can be represented
/// and reported by [`validate_dataset`]; parsing always validates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let c = [self.x1, self.y1, self.x2, self.y2];
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite box {c:?}")));
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(Error::Validation(format!(
                "degenerate box {c:?}: need x1 < x2 and y1 < y2"
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Tight box around both inputs.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return Ok(0.0);
    }
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// 2D human keypoints in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pose2D {
    pub keypoints: Vec<[f64; 2]>,
}

impl Pose2D {
    pub fn new(keypoints: Vec<[f64; 2]>) -> Result<Self> {
        let p = Self { keypoints };
        if p.keypoints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite keypoint".into()));
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

/// One human-object candidate pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub image_id: String,
    #[serde(rename = "hbox")]
    pub human_box: BBox,
    #[serde(rename = "obox")]
    pub object_box: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<Pose2D>,
    #[serde(rename = "object")]
    pub object_category: ObjectId,
    pub det_h: f64,
    pub det_o: f64,
    /// Stream name to feature vector. Usually loaded from separate feature files.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub features: BTreeMap<String, Vec<f64>>,
    #[serde(rename = "verbs", default, skip_serializing_if = "Option::is_none")]
    pub verb_labels: Option<Vec<bool>>,
}

impl PairRecord {
    pub fn feature(&self, stream: &str) -> Result<&[f64]> {
        self.features
            .get(stream)
            .map(Vec::as_slice)
            .ok_or_else(|| {
                Error::Validation(format!("pair {} has no `{stream}` feature", self.pair_id))
            })
    }

    /// Labels as 0/1 floats, if present.
    pub fn label_vector(&self) -> Option<Vec<f64>> {
        self.verb_labels
            .as_ref()
            .map(|l| l.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }
}

/// Ground-truth HOI instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtAnnotation {
    pub image_id: String,
    #[serde(rename = "hbox")]
    pub human_box: BBox,
    #[serde(rename = "obox")]
    pub object_box: BBox,
    #[serde(rename = "hoi")]
    pub composition: CompositionId,
}

/// Scored HOI detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    #[serde(rename = "hbox")]
    pub human_box: BBox,
    #[serde(rename = "obox")]
    pub object_box: BBox,
    #[serde(rename = "hoi")]
    pub composition: CompositionId,
    pub score: f64,
}

/// Per-dataset shape declarations used by [`validate_dataset`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub feature_dims: BTreeMap<String, usize>,
    pub pose_keypoints: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Record(usize),
    Gt(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub location: Location,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            return Ok(());
        }
        let lines: Vec<String> = self
            .violations
            .iter()
            .map(|v| format!("{:?}: {}", v.location, v.message))
            .collect();
        Err(Error::Validation(lines.join("; ")))
    }
}

/// Lists every invariant violation in `records` and `gt`.
pub fn validate_dataset(
    records: &[PairRecord],
    gt: &[GtAnnotation],
    vocab: &Vocabulary,
    schema: &DatasetSchema,
) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |location, message: String| violations.push(Violation { location, message });

    let mut ids = HashSet::new();
    for (i, r) in records.iter().enumerate() {
        let at = Location::Record(i);
        if !ids.insert(r.pair_id.as_str()) {
            push(at, format!("duplicate pair_id `{}`", r.pair_id));
        }
        for (name, b) in [("human_box", &r.human_box), ("object_box", &r.object_box)] {
            if let Err(e) = b.validate() {
                push(at, format!("{name}: {e}"));
            }
        }
        if r.object_category >= vocab.n_objects() {
            push(at, format!("object category {} not in vocabulary", r.object_category));
        }
        for (name, d) in [("det_h", r.det_h), ("det_o", r.det_o)] {
            if !(0.0..=1.0).contains(&d) {
                push(at, format!("{name} = {d} outside [0, 1]"));
            }
        }
        match (&r.pose, schema.pose_keypoints) {
            (Some(p), Some(k)) if p.len() != k => {
                push(at, format!("pose has {} keypoints, expected {k}", p.len()))
            }
            (Some(p), _) if p.keypoints.iter().flatten().any(|v| !v.is_finite()) => {
                push(at, "non-finite keypoint".into())
            }
            _ => {}
        }
        for (stream, &dim) in &schema.feature_dims {
            if let Some(f) = r.features.get(stream) {
                if f.len() != dim {
                    push(at, format!("`{stream}` feature has {} entries, expected {dim}", f.len()));
                } else if f.iter().any(|v| !v.is_finite()) {
                    push(at, format!("`{stream}` feature has non-finite entries"));
                }
            }
        }
        if let Some(labels) = &r.verb_labels {
            if labels.len() != vocab.n_verbs() {
                push(
                    at,
                    format!("{} verb labels, expected {}", labels.len(), vocab.n_verbs()),
                );
            } else if r.object_category < vocab.n_objects() {
                for (v, _) in labels.iter().enumerate().filter(|(_, &l)| l) {
                    if vocab.lookup(v, r.object_category).is_none() {
                        push(
                            at,
                            format!(
                                "composition ({}, {}) not in vocabulary",
                                vocab.verbs()[v],
                                vocab.objects()[r.object_category]
                            ),
                        );
                    }
                }
            }
        }
    }

    for (i, g) in gt.iter().enumerate() {
        let at = Location::Gt(i);
        for (name, b) in [("human_box", &g.human_box), ("object_box", &g.object_box)] {
            if let Err(e) = b.validate() {
                push(at, format!("{name}: {e}"));
            }
        }
        if !vocab.contains(g.composition) {
            push(at, format!("composition {} not in vocabulary", g.composition));
        }
    }

    ValidationReport { violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn toy_vocab() -> Vocabulary {
        Vocabulary::new(
            vec!["eat".into(), "ride".into()],
            vec!["apple".into(), "bike".into()],
            vec![(0, 0), (1, 1)],
            vec![false, true],
            vec![false, false],
        )
        .unwrap()
    }

    fn record(id: &str) -> PairRecord {
        PairRecord {
            pair_id: id.into(),
            image_id: "img".into(),
            human_box: bx(0.0, 0.0, 2.0, 2.0),
            object_box: bx(1.0, 1.0, 3.0, 3.0),
            pose: None,
            object_category: 0,
            det_h: 0.9,
            det_o: 0.8,
            features: BTreeMap::new(),
            verb_labels: Some(vec![true, false]),
        }
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &bx(2.0, 2.0, 4.0, 4.0)).unwrap(), 0.0);
        let v = iou(&a, &bx(1.0, 1.0, 3.0, 3.0)).unwrap();
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn iou_rejects_invalid_box() {
        let bad = BBox { x1: 3.0, y1: 0.0, x2: 1.0, y2: 2.0 };
        assert!(iou(&bad, &bx(0.0, 0.0, 1.0, 1.0)).is_err());
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn vocabulary_invariants() {
        assert!(Vocabulary::new(
            vec!["a".into(), "a".into()],
            vec!["o".into()],
            vec![],
            vec![],
            vec![]
        )
        .is_err());
        assert!(Vocabulary::new(
            vec!["a".into()],
            vec!["o".into()],
            vec![(0, 1)],
            vec![false],
            vec![false]
        )
        .is_err());
        assert!(Vocabulary::new(
            vec!["a".into()],
            vec!["o".into()],
            vec![(0, 0)],
            vec![],
            vec![false]
        )
        .is_err());
    }

    #[test]
    fn vocabulary_file_uses_index_lists() {
        let v = toy_vocab();
        let json = serde_json::to_value(&v).unwrap();
        assert_eq!(json["rare"], serde_json::json!([1]));
        assert_eq!(json["unseen"], serde_json::json!([]));
        assert_eq!(json["compositions"], serde_json::json!([[0, 0], [1, 1]]));
        let back: Vocabulary = serde_json::from_value(json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.lookup(1, 1), Some(1));
    }

    #[test]
    fn validate_clean_dataset() {
        let records = vec![record("a"), record("b")];
        let gt = vec![GtAnnotation {
            image_id: "img".into(),
            human_box: bx(0.0, 0.0, 2.0, 2.0),
            object_box: bx(1.0, 1.0, 3.0, 3.0),
            composition: 0,
        }];
        let report = validate_dataset(&records, &gt, &toy_vocab(), &DatasetSchema::default());
        assert!(report.is_valid(), "{report:?}");
    }

    #[test]
    fn validate_flags_inverted_box() {
        let mut r = record("b");
        r.human_box = BBox { x1: 5.0, y1: 0.0, x2: 1.0, y2: 2.0 };
        let report = validate_dataset(
            &[record("a"), r],
            &[],
            &toy_vocab(),
            &DatasetSchema::default(),
        );
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].location, Location::Record(1));
    }

    #[test]
    fn validate_flags_unknown_composition() {
        let mut r = record("a");
        r.verb_labels = Some(vec![false, true]); // ride apple
        let report = validate_dataset(&[r], &[], &toy_vocab(), &DatasetSchema::default());
        assert_eq!(report.violations.len(), 1);

        let gt = GtAnnotation {
            image_id: "img".into(),
            human_box: bx(0.0, 0.0, 2.0, 2.0),
            object_box: bx(1.0, 1.0, 3.0, 3.0),
            composition: 7,
        };
        let report = validate_dataset(&[], &[gt], &toy_vocab(), &DatasetSchema::default());
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].location, Location::Gt(0));
    }

    #[test]
    fn validate_flags_feature_dims_and_confidences() {
        let mut r = record("a");
        r.det_o = 1.5;
        r.features.insert("object".into(), vec![1.0, 2.0]);
        let schema = DatasetSchema {
            feature_dims: [("object".to_string(), 3)].into_iter().collect(),
            pose_keypoints: None,
        };
        let report = validate_dataset(&[r], &[], &toy_vocab(), &schema);
        assert_eq!(report.violations.len(), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_box() -> impl Strategy<Value = BBox> {
            (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64)
                .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
        }

        proptest! {
            #[test]
            fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
                let ab = iou(&a, &b).unwrap();
                let ba = iou(&b, &a).unwrap();
                prop_assert_eq!(ab, ba);
                prop_assert!((0.0..=1.0).contains(&ab));
                if ab == 1.0 {
                    prop_assert!((a.x1 - b.x1).abs() < 1e-9 && (a.y2 - b.y2).abs() < 1e-9);
                }
                prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
            }

            #[test]
            fn vocabulary_round_trips(n_v in 1usize..5, n_o in 1usize..5, seed in any::<u64>()) {
                let mut comps = Vec::new();
                for v in 0..n_v {
                    for o in 0..n_o {
                        if (seed >> ((v * n_o + o) % 64)) & 1 == 1 {
                            comps.push((v, o));
                        }
                    }
                }
                let n = comps.len();
                let rare = (0..n).map(|i| i % 3 == 0).collect();
                let unseen = (0..n).map(|i| i % 4 == 1).collect();
                let vocab = Vocabulary::new(
                    (0..n_v).map(|i| format!("v{i}")).collect(),
                    (0..n_o).map(|i| format!("o{i}")).collect(),
                    comps, rare, unseen,
                ).unwrap();
                let text = serde_json::to_string(&vocab).unwrap();
                let back: Vocabulary = serde_json::from_str(&text).unwrap();
                prop_assert_eq!(back, vocab);
            }
        }
    }
}
