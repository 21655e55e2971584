//! Object-category-immune learning for the object stream.
//!
//! Three sequential stages: an object classifier is trained on the original
//! features and frozen; a synthesizer learns to blend two object features so
//! that the frozen classifier splits its belief evenly between the two
//! categories; the verb classifier is then trained on synthesized features
//! with averaged ("intermediate") verb labels.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::model::{ObjectId, Vocabulary};
use crate::nn::{softmax, Gradients, Mlp};
use crate::stream::{train_stream, StreamModel, StreamOutput, TrainConfig};
use crate::ugt::{train_stream_ugt, UgtConfig, VerdictCounts};

pub const DEFAULT_DUP_PROB: f64 = 0.5;

/// Softmax classifier over object categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectClassifier {
    net: Mlp,
    frozen: bool,
}

impl ObjectClassifier {
    pub fn new(input_dim: usize, hidden: &[usize], n_objects: usize, seed: u64) -> Result<Self> {
        let mut widths = vec![input_dim];
        widths.extend(hidden);
        widths.push(n_objects);
        Ok(Self {
            net: Mlp::new(&widths, seed)?,
            frozen: false,
        })
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn n_objects(&self) -> usize {
        self.net.output_dim()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.net.forward(x)?))
    }

    /// Cross-entropy against `target` with gradients for the parameters and
    /// for the input.
    fn cross_entropy(&self, x: &[f64], target: &[f64]) -> Result<(f64, Gradients, Vec<f64>)> {
        let trace = self.net.forward_trace(x)?;
        let p = softmax(trace.output());
        let loss = cross_entropy(&p, target);
        let d: Vec<f64> = p.iter().zip(target).map(|(p, t)| p - t).collect();
        let (grads, d_x) = self.net.backward(&trace, &d);
        Ok((loss, grads, d_x))
    }
}

fn cross_entropy(p: &[f64], target: &[f64]) -> f64 {
    -p.iter()
        .zip(target)
        .filter(|(_, &t)| t > 0.0)
        .map(|(p, t)| t * p.max(1e-300).ln())
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            train: TrainConfig {
                lr: 0.05,
                epochs: 30,
                batch_size: 16,
                seed: 0,
                clip_norm: None,
            },
        }
    }
}

/// Trains an object classifier with cross-entropy and returns it frozen.
pub fn train_object_classifier(
    features: &[Vec<f64>],
    categories: &[ObjectId],
    n_objects: usize,
    spec: &ClassifierSpec,
) -> Result<ObjectClassifier> {
    if features.len() != categories.len() {
        return Err(Error::Shape(format!(
            "{} features for {} category labels",
            features.len(),
            categories.len()
        )));
    }
    if let Some(&c) = categories.iter().find(|&&c| c >= n_objects) {
        return Err(Error::Validation(format!("object category {c} out of range")));
    }
    let distinct: BTreeSet<ObjectId> = categories.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Validation(format!(
            "object classifier needs at least 2 categories, got {}",
            distinct.len()
        )));
    }
    let dim = features[0].len();
    let mut clf = ObjectClassifier::new(dim, &spec.hidden, n_objects, spec.train.seed)?;
    let targets: Vec<Vec<f64>> = categories.iter().map(|&c| one_hot(c, n_objects)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.train.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    for _ in 0..spec.train.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(spec.train.batch_size.max(1)) {
            let mut grads = clf.net.zero_gradients();
            for &i in chunk {
                let (_, g, _) = clf.cross_entropy(&features[i], &targets[i])?;
                grads.add(&g);
            }
            grads.scale(1.0 / chunk.len() as f64);
            if !grads.is_finite() {
                return Err(Error::NonFinite("object classifier gradient".into()));
            }
            if let Some(max) = spec.train.clip_norm {
                grads.clip_norm(max);
            }
            clf.net.sgd_step(&grads, spec.train.lr);
        }
    }
    clf.freeze();
    Ok(clf)
}

fn one_hot(c: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[c] = 1.0;
    v
}

/// Classifier target for a blend of categories `a` and `b`.
pub fn synthesis_target(a: ObjectId, b: ObjectId, n_objects: usize) -> Vec<f64> {
    let mut t = vec![0.0; n_objects];
    t[a] += 0.5;
    t[b] += 0.5;
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizerSpec {
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

/// `synth(a, b) = (a + b) / 2 + r([a; b])` where `r` is an MLP whose last
/// layer starts at zero, so an untrained synthesizer is the midpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Synthesizer {
    residual: Mlp,
}

impl Synthesizer {
    pub fn new(spec: &SynthesizerSpec) -> Result<Self> {
        let mut widths = vec![2 * spec.feature_dim];
        widths.extend(&spec.hidden);
        widths.push(spec.feature_dim);
        let mut residual = Mlp::new(&widths, spec.seed)?;
        if let Some(last) = residual.layers_mut().last_mut() {
            last.weights.iter_mut().for_each(|w| *w = 0.0);
            last.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        Self::from_residual(residual)
    }

    pub fn from_residual(residual: Mlp) -> Result<Self> {
        if residual.input_dim() != 2 * residual.output_dim() {
            return Err(Error::Shape(format!(
                "synthesizer residual maps {} -> {}, expected 2d -> d",
                residual.input_dim(),
                residual.output_dim()
            )));
        }
        Ok(Self { residual })
    }

    pub fn feature_dim(&self) -> usize {
        self.residual.output_dim()
    }

    pub fn residual(&self) -> &Mlp {
        &self.residual
    }

    fn concat(&self, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        let d = self.feature_dim();
        if a.len() != d || b.len() != d {
            return Err(Error::Shape(format!(
                "synthesizer inputs of length {} and {}, expected {d}",
                a.len(),
                b.len()
            )));
        }
        Ok(a.iter().chain(b).copied().collect())
    }

    pub fn synthesize(&self, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        let r = self.residual.forward(&self.concat(a, b)?)?;
        Ok(a.iter().zip(b).zip(r).map(|((x, y), r)| 0.5 * (x + y) + r).collect())
    }
}

/// Cross-entropy of the frozen classifier on `synth(a, b)` against the
/// two-hot target, with its gradient for the synthesizer parameters.
pub fn synthesizer_objective(
    synth: &Synthesizer,
    classifier: &ObjectClassifier,
    fa: &[f64],
    fb: &[f64],
    a: ObjectId,
    b: ObjectId,
) -> Result<(f64, Gradients)> {
    let n = classifier.n_objects();
    if a >= n || b >= n {
        return Err(Error::Validation(format!("categories ({a}, {b}) out of range")));
    }
    let trace = synth.residual.forward_trace(&synth.concat(fa, fb)?)?;
    let x: Vec<f64> = fa
        .iter()
        .zip(fb)
        .zip(trace.output())
        .map(|((p, q), r)| 0.5 * (p + q) + r)
        .collect();
    let (loss, _, d_x) = classifier.cross_entropy(&x, &synthesis_target(a, b, n))?;
    let (grads, _) = synth.residual.backward(&trace, &d_x);
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTrainConfig {
    pub train: TrainConfig,
    /// Probability that a training pair is a feature with itself.
    pub self_pair_prob: f64,
}

impl Default for SynthTrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                lr: 0.02,
                epochs: 10,
                batch_size: 16,
                seed: 0,
                clip_norm: None,
            },
            self_pair_prob: 0.2,
        }
    }
}

/// Trains the synthesizer through a frozen classifier on random feature pairs.
pub fn train_synthesizer(
    synth: &mut Synthesizer,
    features: &[Vec<f64>],
    categories: &[ObjectId],
    classifier: &ObjectClassifier,
    cfg: &SynthTrainConfig,
) -> Result<Vec<f64>> {
    if !classifier.is_frozen() {
        return Err(Error::Validation(
            "synthesizer training requires a frozen object classifier".into(),
        ));
    }
    if features.len() != categories.len() || features.is_empty() {
        return Err(Error::Shape("synthesizer features/categories empty or mismatched".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut history = Vec::with_capacity(cfg.train.epochs);
    for _ in 0..cfg.train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.train.batch_size.max(1)) {
            let mut grads = synth.residual.zero_gradients();
            for &i in chunk {
                let j = if rng.random_bool(cfg.self_pair_prob) {
                    i
                } else {
                    rng.random_range(0..features.len())
                };
                let (l, g) = synthesizer_objective(
                    synth,
                    classifier,
                    &features[i],
                    &features[j],
                    categories[i],
                    categories[j],
                )?;
                grads.add(&g);
                total += l;
            }
            grads.scale(1.0 / chunk.len() as f64);
            if !grads.is_finite() {
                return Err(Error::NonFinite("synthesizer gradient".into()));
            }
            if let Some(max) = cfg.train.clip_norm {
                grads.clip_norm(max);
            }
            synth.residual.sgd_step(&grads, cfg.train.lr);
        }
        history.push(total / features.len() as f64);
    }
    Ok(history)
}

/// For each object category, the categories it shares a verb with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityTable {
    similar: Vec<BTreeSet<ObjectId>>,
}

impl SimilarityTable {
    pub fn n_objects(&self) -> usize {
        self.similar.len()
    }

    pub fn similar_to(&self, object: ObjectId) -> &BTreeSet<ObjectId> {
        &self.similar[object]
    }

    pub fn is_similar(&self, a: ObjectId, b: ObjectId) -> bool {
        self.similar.get(a).is_some_and(|s| s.contains(&b))
    }
}

pub fn build_similarity(vocab: &Vocabulary) -> SimilarityTable {
    let n = vocab.n_objects();
    let mut similar: Vec<BTreeSet<ObjectId>> = (0..n).map(|o| BTreeSet::from([o])).collect();
    for v in 0..vocab.n_verbs() {
        let objs = vocab.objects_for_verb(v);
        for &a in &objs {
            similar[a].extend(objs.iter().copied());
        }
    }
    SimilarityTable { similar }
}

/// A labeled object-stream training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSample {
    pub feature: Vec<f64>,
    pub category: ObjectId,
    pub labels: Vec<f64>,
}

/// Records grouped for partner sampling.
#[derive(Debug, Clone)]
pub struct PartnerPool<'a> {
    samples: &'a [ObjectSample],
    by_category: Vec<Vec<usize>>,
}

impl<'a> PartnerPool<'a> {
    /// For every category, the indices of records whose category is similar.
    pub fn new(samples: &'a [ObjectSample], similarity: &SimilarityTable) -> Result<Self> {
        let n = similarity.n_objects();
        let mut own: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, s) in samples.iter().enumerate() {
            if s.category >= n {
                return Err(Error::Validation(format!("object category {} out of range", s.category)));
            }
            own[s.category].push(i);
        }
        let by_category = (0..n)
            .map(|o| {
                let mut idx: Vec<usize> = similarity
                    .similar_to(o)
                    .iter()
                    .flat_map(|&b| own[b].iter().copied())
                    .collect();
                idx.sort_unstable();
                idx
            })
            .collect();
        Ok(Self {
            samples,
            by_category,
        })
    }

    pub fn samples(&self) -> &'a [ObjectSample] {
        self.samples
    }

    /// Candidate partners for record `index`, excluding the record itself.
    pub fn partners(&self, index: usize) -> impl Iterator<Item = usize> + '_ {
        self.by_category[self.samples[index].category]
            .iter()
            .copied()
            .filter(move |&j| j != index)
    }
}

/// Synthesized input and intermediate verb label for record `index`.
pub fn synth_sample(
    index: usize,
    pool: &PartnerPool<'_>,
    synth: &Synthesizer,
    dup_prob: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..=1.0).contains(&dup_prob) {
        return Err(Error::Config(format!("dup_prob {dup_prob} outside [0, 1]")));
    }
    let rec = &pool.samples()[index];
    if rng.random_bool(dup_prob) {
        return Ok((synth.synthesize(&rec.feature, &rec.feature)?, rec.labels.clone()));
    }
    let partners: Vec<usize> = pool.partners(index).collect();
    let Some(&j) = partners.choose(rng) else {
        return Ok((synth.synthesize(&rec.feature, &rec.feature)?, rec.labels.clone()));
    };
    let other = &pool.samples()[j];
    let label = rec
        .labels
        .iter()
        .zip(&other.labels)
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    Ok((synth.synthesize(&rec.feature, &other.feature)?, label))
}

/// One epoch of synthesized inputs and intermediate labels.
pub fn synthesize_epoch(
    pool: &PartnerPool<'_>,
    synth: &Synthesizer,
    dup_prob: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut inputs = Vec::with_capacity(pool.samples().len());
    let mut labels = Vec::with_capacity(pool.samples().len());
    for i in 0..pool.samples().len() {
        let (x, y) = synth_sample(i, pool, synth, dup_prob, rng)?;
        inputs.push(x);
        labels.push(y);
    }
    Ok((inputs, labels))
}

/// Inference path of the object stream: the feature is paired with itself.
pub fn infer_object_stream(
    model: &StreamModel,
    synth: &Synthesizer,
    feature: &[f64],
) -> Result<StreamOutput> {
    ensure_finite(feature, "object feature")?;
    model.forward(&synth.synthesize(feature, feature)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OilConfig {
    pub dup_prob: f64,
    pub train: TrainConfig,
}

/// Trains the object verb stream on freshly synthesized samples each epoch.
/// With `unlabeled` given, each epoch is an uncertainty-guided epoch over the
/// unlabeled features passed through `synth(f, f)`.
pub fn train_object_stream_oil(
    model: &mut StreamModel,
    pool: &PartnerPool<'_>,
    synth: &Synthesizer,
    cfg: &OilConfig,
    unlabeled: Option<(&[Vec<f64>], &UgtConfig)>,
) -> Result<(Vec<f64>, Option<VerdictCounts>)> {
    if pool.samples().is_empty() {
        return Err(Error::Validation("empty object-stream training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let synthesized_unlabeled = match unlabeled {
        Some((u, _)) => Some(
            u.iter()
                .map(|f| synth.synthesize(f, f))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let mut history = Vec::with_capacity(cfg.train.epochs);
    let mut counts = None;
    for epoch in 0..cfg.train.epochs {
        let (inputs, targets) = synthesize_epoch(pool, synth, cfg.dup_prob, &mut rng)?;
        let epoch_cfg = TrainConfig {
            epochs: 1,
            seed: cfg.train.seed.wrapping_add(1 + epoch as u64),
            ..cfg.train.clone()
        };
        let loss = match (&synthesized_unlabeled, unlabeled) {
            (Some(u), Some((_, ugt))) => {
                let (h, c) = train_stream_ugt(model, &inputs, &targets, u, &epoch_cfg, ugt)?;
                counts = Some(c);
                h[0]
            }
            _ => train_stream(model, &inputs, &targets, &epoch_cfg)?[0],
        };
        history.push(loss);
    }
    Ok((history, counts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Vocabulary;
    use rand_distr::{Distribution, Normal};

    fn clusters(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<ObjectId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let centre = if c == 0 { [2.0, 0.0, 1.0] } else { [-2.0, 1.0, -1.0] };
            xs.push(centre.iter().map(|m| m + noise.sample(&mut rng)).collect());
            ys.push(c);
        }
        (xs, ys)
    }

    fn vocab() -> Vocabulary {
        Vocabulary::new(
            vec!["eat".into(), "ride".into()],
            vec!["apple".into(), "banana".into(), "horse".into()],
            vec![(0, 0), (0, 1), (1, 2)],
            vec![false; 3],
            vec![false; 3],
        )
        .unwrap()
    }

    #[test]
    fn synthesis_targets() {
        assert_eq!(synthesis_target(1, 1, 3), vec![0.0, 1.0, 0.0]);
        assert_eq!(synthesis_target(0, 2, 3), vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn classifier_rejects_bad_inputs() {
        let (xs, ys) = clusters(10, 1);
        let spec = ClassifierSpec::default();
        assert!(train_object_classifier(&xs, &ys[..9], 2, &spec).is_err());
        assert!(train_object_classifier(&xs, &vec![0; 10], 2, &spec).is_err());
    }

    #[test]
    fn classifier_separates_clusters_and_is_frozen() {
        let (xs, ys) = clusters(200, 2);
        let clf = train_object_classifier(&xs, &ys, 2, &ClassifierSpec::default()).unwrap();
        assert!(clf.is_frozen());
        let (tx, ty) = clusters(200, 3);
        let correct = tx
            .iter()
            .zip(&ty)
            .filter(|(x, &y)| {
                let p = clf.predict_proba(x).unwrap();
                (p[1] > p[0]) == (y == 1)
            })
            .count();
        assert!(correct as f64 / 200.0 > 0.95);
        let again = train_object_classifier(&xs, &ys, 2, &ClassifierSpec::default()).unwrap();
        assert_eq!(again, clf);
    }

    #[test]
    fn synthesizer_needs_frozen_classifier() {
        let (xs, ys) = clusters(20, 4);
        let mut clf = train_object_classifier(&xs, &ys, 2, &ClassifierSpec::default()).unwrap();
        clf.unfreeze();
        let mut synth = Synthesizer::new(&SynthesizerSpec {
            feature_dim: 3,
            hidden: vec![8],
            seed: 0,
        })
        .unwrap();
        assert!(train_synthesizer(&mut synth, &xs, &ys, &clf, &SynthTrainConfig::default()).is_err());
    }

    #[test]
    fn untrained_synthesizer_is_midpoint() {
        let synth = Synthesizer::new(&SynthesizerSpec {
            feature_dim: 2,
            hidden: vec![4],
            seed: 9,
        })
        .unwrap();
        assert_eq!(synth.synthesize(&[1.0, 2.0], &[3.0, -2.0]).unwrap(), vec![2.0, 0.0]);
        assert!(synth.synthesize(&[1.0], &[3.0, -2.0]).is_err());
    }

    #[test]
    fn similarity_from_shared_verbs() {
        let t = build_similarity(&vocab());
        assert!(t.is_similar(0, 1));
        assert!(t.is_similar(1, 0));
        assert!(!t.is_similar(0, 2));
        assert_eq!(t.similar_to(2), &BTreeSet::from([2]));
        for a in 0..3 {
            assert!(t.is_similar(a, a));
        }
    }

    fn samples() -> Vec<ObjectSample> {
        vec![
            ObjectSample { feature: vec![1.0, 0.0], category: 0, labels: vec![1.0, 0.0] },
            ObjectSample { feature: vec![0.0, 1.0], category: 1, labels: vec![0.0, 0.0] },
            ObjectSample { feature: vec![5.0, 5.0], category: 2, labels: vec![0.0, 1.0] },
        ]
    }

    fn midpoint() -> Synthesizer {
        Synthesizer::new(&SynthesizerSpec { feature_dim: 2, hidden: vec![3], seed: 0 }).unwrap()
    }

    #[test]
    fn dup_prob_one_keeps_labels() {
        let s = samples();
        let pool = PartnerPool::new(&s, &build_similarity(&vocab())).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..3 {
            let (x, y) = synth_sample(i, &pool, &midpoint(), 1.0, &mut rng).unwrap();
            assert_eq!(x, s[i].feature);
            assert_eq!(y, s[i].labels);
        }
    }

    #[test]
    fn partner_labels_average() {
        let s = samples();
        let pool = PartnerPool::new(&s, &build_similarity(&vocab())).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, y) = synth_sample(0, &pool, &midpoint(), 0.0, &mut rng).unwrap();
        assert_eq!(y, vec![0.5, 0.0]);
        assert_eq!(x, vec![0.5, 0.5]);
        // Horse has no similar partner: falls back to duplication.
        let (x, y) = synth_sample(2, &pool, &midpoint(), 0.0, &mut rng).unwrap();
        assert_eq!((x, y), (vec![5.0, 5.0], vec![0.0, 1.0]));
        assert!(synth_sample(0, &pool, &midpoint(), 1.5, &mut rng).is_err());
    }
}
