//! Synthetic HOI benchmark generator.
//!
//! Every pair carries exactly one verb. Human features encode the verb
//! through a shared latent; object features add a per-object centroid scaled
//! by the spurious strength `rho`, and `rho` also skews the training set
//! towards each object's dominant verb. Boxes and poses follow verb-specific
//! geometry. Each stream is independently degraded for a fraction of pairs,
//! with a visibility cue appended to the human and object features, so the
//! per-sample noise is heteroscedastic and partly observable.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{DatasetBundle, Split};
use crate::model::{
    BBox, DatasetSchema, GtAnnotation, ObjectId, PairRecord, Pose2D, VerbId,
    Vocabulary,
};
use crate::stream::StreamKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HoldoutStrategy {
    NonRareFirst,
    RareFirst,
    Random,
}

impl std::str::FromStr for HoldoutStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non-rare-first" => Ok(Self::NonRareFirst),
            "rare-first" => Ok(Self::RareFirst),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!("unknown holdout strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_verbs: usize,
    pub n_objects: usize,
    /// Probability that a (verb, object) pair is a legal composition.
    pub composition_density: f64,
    /// `rho` in `[0, 1]`.
    pub spurious_strength: f64,
    pub latent_dim: usize,
    pub human_dim: usize,
    pub object_dim: usize,
    pub pose_keypoints: usize,
    /// Planned training count of the most frequent composition.
    pub max_train_per_composition: usize,
    pub min_train_per_composition: usize,
    /// Power-law exponent over composition frequency ranks.
    pub long_tail_exponent: f64,
    pub val_per_composition: usize,
    pub unlabeled_per_composition: usize,
    pub test_per_composition: usize,
    /// Compositions with fewer planned training pairs are rare.
    pub rare_threshold: usize,
    pub unseen_fraction: f64,
    pub holdout: HoldoutStrategy,
    /// Scale of the shared verb signal relative to unit feature noise.
    pub signal_strength: f64,
    /// Weight of the object-specific part of the verb signal in object features.
    pub object_specificity: f64,
    pub centroid_scale: f64,
    pub noise: f64,
    /// Probability that a stream is degraded for a given pair.
    pub corruption_prob: f64,
    /// Box and keypoint jitter, as a fraction of the human box size.
    pub spatial_jitter: f64,
    /// Probability that a train/val annotation names another legal verb of
    /// the object instead of the one the features were drawn from.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_verbs: 6,
            n_objects: 8,
            composition_density: 0.45,
            spurious_strength: 0.8,
            latent_dim: 8,
            human_dim: 12,
            object_dim: 12,
            pose_keypoints: 4,
            max_train_per_composition: 150,
            min_train_per_composition: 2,
            long_tail_exponent: 1.0,
            val_per_composition: 6,
            unlabeled_per_composition: 20,
            test_per_composition: 30,
            rare_threshold: 10,
            unseen_fraction: 0.0,
            holdout: HoldoutStrategy::NonRareFirst,
            signal_strength: 1.0,
            object_specificity: 0.9,
            centroid_scale: 1.5,
            noise: 1.0,
            corruption_prob: 0.25,
            spatial_jitter: 0.15,
            label_noise: 0.2,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_verbs == 0 {
            return fail("n_verbs must be positive".into());
        }
        if self.n_objects < 2 {
            return fail("n_objects must be at least 2".into());
        }
        if !(self.composition_density > 0.0 && self.composition_density <= 1.0) {
            return fail(format!("composition_density {} outside (0, 1]", self.composition_density));
        }
        if !(0.0..=1.0).contains(&self.spurious_strength) {
            return fail(format!("spurious_strength {} outside [0, 1]", self.spurious_strength));
        }
        if !(0.0..1.0).contains(&self.unseen_fraction) {
            return fail(format!("unseen_fraction {} outside [0, 1)", self.unseen_fraction));
        }
        if !(0.0..=1.0).contains(&self.corruption_prob) {
            return fail(format!("corruption_prob {} outside [0, 1]", self.corruption_prob));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return fail(format!("label_noise {} outside [0, 1]", self.label_noise));
        }
        if !(0.0..=1.0).contains(&self.object_specificity) {
            return fail(format!("object_specificity {} outside [0, 1]", self.object_specificity));
        }
        if self.latent_dim == 0 || self.human_dim == 0 || self.object_dim == 0 {
            return fail("feature dimensions must be positive".into());
        }
        if self.min_train_per_composition == 0
            || self.max_train_per_composition < self.min_train_per_composition
        {
            return fail("need 1 <= min_train_per_composition <= max_train_per_composition".into());
        }
        if self.test_per_composition == 0 {
            return fail("test_per_composition must be positive".into());
        }
        let nums = [
            self.long_tail_exponent,
            self.signal_strength,
            self.centroid_scale,
            self.noise,
            self.spatial_jitter,
        ];
        if nums.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return fail("scale parameters must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Marks `round(fraction * n)` compositions unseen.
///
/// Candidates are ordered by descending `counts` (non-rare-first), ascending
/// counts (rare-first) or a seeded shuffle; ties keep index order. A
/// candidate is skipped while taking it would leave its verb without a seen
/// composition; skipped candidates are used only if the quota cannot be met
/// otherwise.
pub fn holdout_split(
    vocab: &Vocabulary,
    counts: &[usize],
    fraction: f64,
    strategy: HoldoutStrategy,
    seed: u64,
) -> Result<Vec<bool>> {
    let n = vocab.n_compositions();
    if counts.len() != n {
        return Err(Error::Shape(format!("{} counts for {n} compositions", counts.len())));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("holdout fraction {fraction} outside [0, 1)")));
    }
    let k = (fraction * n as f64).round() as usize;
    if k >= n {
        return Err(Error::Config(format!(
            "holdout of {k} compositions leaves none of {n} seen"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    match strategy {
        HoldoutStrategy::NonRareFirst => order.sort_by(|&a, &b| counts[b].cmp(&counts[a])),
        HoldoutStrategy::RareFirst => order.sort_by(|&a, &b| counts[a].cmp(&counts[b])),
        HoldoutStrategy::Random => order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    let mut seen_per_verb = vec![0usize; vocab.n_verbs()];
    for &(v, _) in vocab.compositions() {
        seen_per_verb[v] += 1;
    }
    let mut mask = vec![false; n];
    let mut skipped = Vec::new();
    let mut taken = 0;
    for &c in &order {
        if taken == k {
            break;
        }
        let (v, _) = vocab.compositions()[c];
        if seen_per_verb[v] > 1 {
            mask[c] = true;
            seen_per_verb[v] -= 1;
            taken += 1;
        } else {
            skipped.push(c);
        }
    }
    for c in skipped {
        if taken == k {
            break;
        }
        mask[c] = true;
        taken += 1;
    }
    Ok(mask)
}

/// Mutual information (nats) between object category and verb over the
/// positive labels of `split`.
pub fn object_verb_mutual_information(bundle: &DatasetBundle, split: Split) -> f64 {
    let nv = bundle.vocabulary.n_verbs();
    let no = bundle.vocabulary.n_objects();
    let mut joint = vec![0.0; nv * no];
    let mut total = 0.0;
    for i in bundle.indices(split) {
        let r = &bundle.records[i];
        if let Some(labels) = &r.verb_labels {
            for (v, &on) in labels.iter().enumerate() {
                if on {
                    joint[r.object_category * nv + v] += 1.0;
                    total += 1.0;
                }
            }
        }
    }
    if total == 0.0 {
        return 0.0;
    }
    let p_o: Vec<f64> = (0..no)
        .map(|o| (0..nv).map(|v| joint[o * nv + v]).sum::<f64>() / total)
        .collect();
    let p_v: Vec<f64> = (0..nv)
        .map(|v| (0..no).map(|o| joint[o * nv + v]).sum::<f64>() / total)
        .collect();
    let mut mi = 0.0;
    for o in 0..no {
        for v in 0..nv {
            let p = joint[o * nv + v] / total;
            if p > 0.0 {
                mi += p * (p / (p_o[o] * p_v[v])).ln();
            }
        }
    }
    mi
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * normal(rng)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v = normal_vec(rng, n, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

/// `rows x cols` row-major matrix with `N(0, 1/cols)` entries.
fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    normal_vec(rng, rows * cols, 1.0 / (cols as f64).sqrt())
}

fn mat_vec(m: &[f64], x: &[f64]) -> Vec<f64> {
    m.chunks_exact(x.len())
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Fixed generative parameters drawn once per dataset.
struct World {
    vocab_compositions: Vec<(VerbId, ObjectId)>,
    verb_latent: Vec<Vec<f64>>,
    human_map: Vec<f64>,
    object_map: Vec<f64>,
    object_specific_maps: Vec<Vec<f64>>,
    centroids: Vec<Vec<f64>>,
    /// Object offset from the human centre in human-box units.
    offsets: Vec<[f64; 2]>,
    size_ratio: Vec<f64>,
    aspect: Vec<f64>,
    keypoint_shift: Vec<Vec<[f64; 2]>>,
}

const KEYPOINT_TEMPLATE: [[f64; 2]; 6] = [
    [0.5, 0.1],
    [0.2, 0.45],
    [0.8, 0.45],
    [0.5, 0.55],
    [0.35, 0.95],
    [0.65, 0.95],
];

fn draw_vocabulary(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<(VerbId, ObjectId)> {
    let (nv, no) = (cfg.n_verbs, cfg.n_objects);
    let mut legal = vec![vec![false; no]; nv];
    for row in legal.iter_mut() {
        for cell in row.iter_mut() {
            *cell = rng.random_bool(cfg.composition_density);
        }
    }
    for o in 0..no {
        if !(0..nv).any(|v| legal[v][o]) {
            legal[rng.random_range(0..nv)][o] = true;
        }
    }
    for row in legal.iter_mut() {
        while row.iter().filter(|&&b| b).count() < 2.min(no) {
            let o = rng.random_range(0..no);
            row[o] = true;
        }
    }
    let mut comps = Vec::new();
    for (v, row) in legal.iter().enumerate() {
        for (o, &on) in row.iter().enumerate() {
            if on {
                comps.push((v, o));
            }
        }
    }
    comps
}

fn draw_world(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> World {
    let vocab_compositions = draw_vocabulary(cfg, rng);
    let k = cfg.pose_keypoints;
    let mut world = World {
        verb_latent: (0..cfg.n_verbs).map(|_| unit_vec(rng, cfg.latent_dim)).collect(),
        human_map: random_matrix(rng, cfg.human_dim, cfg.latent_dim),
        object_map: random_matrix(rng, cfg.object_dim, cfg.latent_dim),
        object_specific_maps: Vec::new(),
        centroids: (0..cfg.n_objects)
            .map(|_| unit_vec(rng, cfg.object_dim).iter().map(|x| x * (cfg.object_dim as f64).sqrt()).collect())
            .collect(),
        offsets: (0..cfg.n_verbs)
            .map(|_| [rng.random_range(-0.8..0.8), rng.random_range(-0.6..0.6)])
            .collect(),
        size_ratio: (0..cfg.n_verbs).map(|_| rng.random_range(0.3..1.1)).collect(),
        aspect: (0..cfg.n_objects).map(|_| rng.random_range(0.6..1.5)).collect(),
        keypoint_shift: (0..cfg.n_verbs)
            .map(|_| {
                (0..k)
                    .map(|_| [rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25)])
                    .collect()
            })
            .collect(),
        vocab_compositions,
    };
    // Object-specific verb appearance varies linearly with the object centroid,
    // so nearby categories render a verb alike.
    let basis: Vec<Vec<f64>> = (0..cfg.object_dim)
        .map(|_| random_matrix(rng, cfg.object_dim, cfg.latent_dim))
        .collect();
    let norm = 1.0 / (cfg.object_dim as f64).sqrt();
    world.object_specific_maps = world
        .centroids
        .iter()
        .map(|c| {
            let mut m = vec![0.0; cfg.object_dim * cfg.latent_dim];
            for (ck, b) in c.iter().zip(&basis) {
                m.iter_mut().zip(b).for_each(|(x, y)| *x += norm * ck * y);
            }
            m
        })
        .collect();
    world
}

fn dominant_verbs(comps: &[(VerbId, ObjectId)], n_objects: usize, rng: &mut ChaCha8Rng) -> Vec<VerbId> {
    (0..n_objects)
        .map(|o| {
            let verbs: Vec<VerbId> = comps.iter().filter(|c| c.1 == o).map(|c| c.0).collect();
            verbs[rng.random_range(0..verbs.len())]
        })
        .collect()
}

/// Planned long-tail training counts, skewed towards dominant verbs by `rho`.
fn planned_counts(
    cfg: &GeneratorConfig,
    comps: &[(VerbId, ObjectId)],
    dominant: &[VerbId],
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut ranks: Vec<usize> = (0..comps.len()).collect();
    ranks.shuffle(rng);
    let rho = cfg.spurious_strength;
    let verbs_per_object: Vec<usize> = (0..cfg.n_objects)
        .map(|o| comps.iter().filter(|c| c.1 == o).count())
        .collect();
    let mut counts = vec![0; comps.len()];
    for (rank, &c) in ranks.iter().enumerate() {
        let base = cfg.max_train_per_composition as f64 * ((rank + 1) as f64).powf(-cfg.long_tail_exponent);
        let (v, o) = comps[c];
        let k = verbs_per_object[o] as f64;
        let skew = if dominant[o] == v { 1.0 - rho + rho * k } else { 1.0 - rho };
        counts[c] = ((base * skew).round() as usize).max(cfg.min_train_per_composition);
    }
    counts
}

struct Sampler<'a> {
    cfg: &'a GeneratorConfig,
    world: &'a World,
}

impl Sampler<'_> {
    fn quality(&self, rng: &mut ChaCha8Rng) -> f64 {
        if rng.random_bool(self.cfg.corruption_prob) {
            rng.random_range(0.05..0.35)
        } else {
            rng.random_range(0.8..1.0)
        }
    }

    fn with_cue(&self, mut x: Vec<f64>, q: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        x.push(q + 0.05 * normal(rng));
        x
    }

    fn human_feature(&self, v: VerbId, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let q = self.quality(rng);
        let signal = mat_vec(&self.world.human_map, &self.world.verb_latent[v]);
        let x = signal
            .iter()
            .map(|s| q * self.cfg.signal_strength * s * 2.0 + self.cfg.noise * normal(rng))
            .collect();
        self.with_cue(x, q, rng)
    }

    fn object_feature(&self, v: VerbId, o: ObjectId, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let q = self.quality(rng);
        let u = &self.world.verb_latent[v];
        let shared = mat_vec(&self.world.object_map, u);
        let specific = mat_vec(&self.world.object_specific_maps[o], u);
        let eta = self.cfg.object_specificity;
        let rho = self.cfg.spurious_strength;
        let x = (0..self.cfg.object_dim)
            .map(|d| {
                let verb = 2.0 * self.cfg.signal_strength * ((1.0 - eta) * shared[d] + eta * specific[d]);
                let centroid = rho * self.cfg.centroid_scale * self.world.centroids[o][d];
                q * (verb + centroid) + self.cfg.noise * normal(rng)
            })
            .collect();
        self.with_cue(x, q, rng)
    }

    fn geometry(&self, v: VerbId, o: ObjectId, rng: &mut ChaCha8Rng) -> (BBox, BBox, Pose2D) {
        let q = self.quality(rng);
        let jitter = self.cfg.spatial_jitter / q;
        let w = rng.random_range(60.0..120.0);
        let h = w * rng.random_range(1.6..2.4);
        let x1 = rng.random_range(0.0..300.0);
        let y1 = rng.random_range(0.0..200.0);
        let hbox = BBox { x1, y1, x2: x1 + w, y2: y1 + h };
        let [gx, gy] = self.world.offsets[v];
        let cx = x1 + 0.5 * w + (gx + jitter * normal(rng)) * w;
        let cy = y1 + 0.5 * h + (gy + jitter * normal(rng)) * h;
        let ow = (self.world.size_ratio[v] * w * (1.0 + 0.5 * jitter * normal(rng))).max(4.0);
        let oh = (ow * self.world.aspect[o]).max(4.0);
        let obox = BBox {
            x1: cx - 0.5 * ow,
            y1: cy - 0.5 * oh,
            x2: cx + 0.5 * ow,
            y2: cy + 0.5 * oh,
        };
        let keypoints = (0..self.cfg.pose_keypoints)
            .map(|j| {
                let base = KEYPOINT_TEMPLATE[j % KEYPOINT_TEMPLATE.len()];
                let [dx, dy] = self.world.keypoint_shift[v][j];
                [
                    x1 + (base[0] + dx + jitter * normal(rng)) * w,
                    y1 + (base[1] + dy + jitter * normal(rng)) * h,
                ]
            })
            .collect();
        (hbox, obox, Pose2D { keypoints })
    }
}

fn one_verb(n: usize, v: VerbId) -> Vec<bool> {
    let mut l = vec![false; n];
    l[v] = true;
    l
}

/// Planned composition counts and hidden generative choices, exposed for
/// inspection and tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub planned_train_counts: Vec<usize>,
    pub dominant_verbs: Vec<VerbId>,
}

pub fn generate(cfg: &GeneratorConfig) -> Result<DatasetBundle> {
    Ok(generate_with_summary(cfg)?.0)
}

pub fn generate_with_summary(cfg: &GeneratorConfig) -> Result<(DatasetBundle, GenerationSummary)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = draw_world(cfg, &mut rng);
    let comps = world.vocab_compositions.clone();
    let n_comp = comps.len();
    let unseen_count = (cfg.unseen_fraction * n_comp as f64).round() as usize;
    if unseen_count >= n_comp {
        return Err(Error::Config(format!(
            "unseen fraction {} holds out all {n_comp} compositions",
            cfg.unseen_fraction
        )));
    }
    let dominant = dominant_verbs(&comps, cfg.n_objects, &mut rng);
    let counts = planned_counts(cfg, &comps, &dominant, &mut rng);
    let rare: Vec<bool> = counts.iter().map(|&c| c < cfg.rare_threshold).collect();
    let verbs: Vec<String> = (0..cfg.n_verbs).map(|v| format!("verb{v:02}")).collect();
    let objects: Vec<String> = (0..cfg.n_objects).map(|o| format!("object{o:02}")).collect();
    let plain = Vocabulary::new(verbs, objects, comps.clone(), rare.clone(), vec![false; n_comp])?;
    let unseen = holdout_split(&plain, &counts, cfg.unseen_fraction, cfg.holdout, cfg.seed)?;
    let vocabulary = plain.with_flags(rare, unseen.clone())?;

    let sampler = Sampler { cfg, world: &world };
    let verbs_of: Vec<Vec<VerbId>> = (0..cfg.n_objects).map(|o| vocabulary.verbs_for_object(o)).collect();
    let mut records = Vec::new();
    let mut splits = Vec::new();
    let mut gt = Vec::new();
    for split in [Split::Train, Split::Val, Split::Unlabeled, Split::Test] {
        for (c, &(v, o)) in comps.iter().enumerate() {
            let n = match split {
                Split::Test => cfg.test_per_composition,
                _ if unseen[c] => 0,
                Split::Train => counts[c],
                Split::Val => cfg.val_per_composition,
                Split::Unlabeled => cfg.unlabeled_per_composition,
            };
            for _ in 0..n {
                let id = records.len();
                let pair_id = format!("p{id:06}");
                let image_id = format!("img{id:06}");
                let (hbox, obox, pose) = sampler.geometry(v, o, &mut rng);
                let mut features = BTreeMap::new();
                features.insert(StreamKind::Human.name().to_string(), sampler.human_feature(v, &mut rng));
                features.insert(
                    StreamKind::Object.name().to_string(),
                    sampler.object_feature(v, o, &mut rng),
                );
                let det_h = rng.random_range(0.7..1.0);
                let det_o = rng.random_range(0.7..1.0);
                let labels = match split {
                    Split::Unlabeled => None,
                    Split::Test => Some(one_verb(cfg.n_verbs, v)),
                    Split::Train | Split::Val => {
                        let mut named = v;
                        // Noise never names a held-out composition.
                        let others: Vec<VerbId> = verbs_of[o]
                            .iter()
                            .copied()
                            .filter(|&w| w != v && vocabulary.lookup(w, o).is_some_and(|k| !unseen[k]))
                            .collect();
                        if !others.is_empty() && rng.random_bool(cfg.label_noise) {
                            named = others[rng.random_range(0..others.len())];
                        }
                        Some(one_verb(cfg.n_verbs, named))
                    }
                };
                if split == Split::Test {
                    gt.push(GtAnnotation {
                        image_id: image_id.clone(),
                        human_box: hbox,
                        object_box: obox,
                        composition: c,
                    });
                }
                records.push(PairRecord {
                    pair_id,
                    image_id,
                    human_box: hbox,
                    object_box: obox,
                    pose: Some(pose),
                    object_category: o,
                    det_h,
                    det_o,
                    features,
                    verb_labels: labels,
                });
                splits.push(split);
            }
        }
    }
    let schema = DatasetSchema {
        feature_dims: BTreeMap::from([
            (StreamKind::Human.name().to_string(), cfg.human_dim + 1),
            (StreamKind::Object.name().to_string(), cfg.object_dim + 1),
        ]),
        pose_keypoints: Some(cfg.pose_keypoints),
    };
    let bundle = DatasetBundle {
        vocabulary,
        schema,
        gt,
        records,
        splits,
    };
    Ok((
        bundle,
        GenerationSummary {
            planned_train_counts: counts,
            dominant_verbs: dominant,
        },
    ))
}
