//! End-to-end experiment: data, three streams, optional object-immune
//! synthesis, uncertainty-guided training, calibration and evaluation.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::bench::{generate, GeneratorConfig};
use crate::calibration::{
    calibration_terms, fit_calibration, predict, CalibrationConfig, CalibrationParams,
    CalibrationSample, CalibrationTerms,
};
use crate::error::{Error, Result};
use crate::io::{DatasetBundle, Split};
use crate::metrics::{
    compute_map, compute_mpd, evaluate, EvalMode, MpdReport, Subset, DEFAULT_IOU_THRESHOLD,
};
use crate::model::{Detection, GtAnnotation, PairRecord, Pose2D, Vocabulary};
use crate::ocimmune::{
    build_similarity, infer_object_stream, train_object_classifier, train_object_stream_oil,
    train_synthesizer, ClassifierSpec, ObjectSample, OilConfig, PartnerPool, SynthTrainConfig,
    Synthesizer, SynthesizerSpec, DEFAULT_DUP_PROB,
};
use crate::stream::{encode_spatial, train_stream, MlpSpec, StreamKind, StreamModel, StreamOutput, TrainConfig};
use crate::ugt::{train_stream_ugt, UgtConfig, VerdictCounts};

/// Stage switches, one per ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    /// Object-category-immune training of the object stream.
    pub oil: bool,
    /// Log-variance heads and the uncertainty loss.
    pub uqm: bool,
    /// Calibration-aware unified inference; off means `w = 1, c = 0` and equal fusion.
    pub cui: bool,
    /// Uncertainty-guided training on the unlabeled split; needs `uqm`.
    pub extra_data: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            oil: true,
            uqm: true,
            cui: true,
            extra_data: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset directory in the bundle layout; when absent the generator runs.
    pub data_dir: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub toggles: Toggles,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip for stream training.
    pub clip_norm: Option<f64>,
    pub alpha: f64,
    pub unlabeled_ratio: f64,
    pub dup_prob: f64,
    pub classifier_hidden: Vec<usize>,
    pub classifier_lr: f64,
    pub classifier_epochs: usize,
    pub synth_hidden: Vec<usize>,
    pub synth_lr: f64,
    pub synth_epochs: usize,
    pub beta: f64,
    pub gamma: f64,
    pub calib_epochs: usize,
    pub calib_lr: f64,
    pub calib_batch_size: usize,
    pub iou_threshold: f64,
    pub seed: u64,
    /// Also run the same configuration with `oil` off.
    pub compare: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            generator: GeneratorConfig::default(),
            toggles: Toggles::default(),
            hidden: vec![32],
            lr: 0.05,
            epochs: 40,
            batch_size: 16,
            clip_norm: Some(1.0),
            alpha: 0.1,
            unlabeled_ratio: 1.0,
            dup_prob: DEFAULT_DUP_PROB,
            classifier_hidden: vec![32],
            classifier_lr: 0.05,
            classifier_epochs: 30,
            synth_hidden: vec![32],
            synth_lr: 0.02,
            synth_epochs: 10,
            beta: 1.0,
            gamma: 0.1,
            calib_epochs: 2,
            calib_lr: 1e-3,
            calib_batch_size: 16,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            seed: 0,
            compare: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.toggles.extra_data && !self.toggles.uqm {
            return fail("extra_data needs uqm: pseudo-label verdicts use the variance head");
        }
        if self.hidden.is_empty() || self.classifier_hidden.is_empty() {
            return fail("hidden layer lists must be non-empty");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.calib_batch_size == 0 {
            return fail("epochs and batch sizes must be positive");
        }
        if !(0.0..=1.0).contains(&self.dup_prob) {
            return fail("dup_prob must lie in [0, 1]");
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return fail("iou_threshold must lie in (0, 1]");
        }
        let rates = [
            self.lr,
            self.classifier_lr,
            self.synth_lr,
            self.calib_lr,
            self.alpha,
            self.beta,
            self.gamma,
            self.unlabeled_ratio,
        ];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return fail("rates and loss weights must be finite and non-negative");
        }
        if let Some(dir) = &self.data_dir {
            if !dir.is_dir() {
                return Err(Error::Validation(format!("data_dir {} does not exist", dir.display())));
            }
        } else {
            self.generator.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeMetrics {
    /// `None` when the subset has no evaluated composition.
    pub map: BTreeMap<String, Option<f64>>,
    pub mpd: Option<MpdReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub toggles: Toggles,
    pub default: ModeMetrics,
    pub known_object: ModeMetrics,
    pub calibration: CalibrationParams,
    pub calibration_terms_val: CalibrationTerms,
    /// Final-epoch verdict counts per stream, when pseudo-labeling ran.
    pub pseudo_labels: BTreeMap<String, VerdictCounts>,
    pub n_train: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub runs: Vec<RunReport>,
}

impl ExperimentReport {
    pub fn run(&self, name: &str) -> Option<&RunReport> {
        self.runs.iter().find(|r| r.name == name)
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<DatasetBundle> {
    let bundle = match &cfg.data_dir {
        Some(dir) => DatasetBundle::read_dir(dir)?,
        None => generate(&cfg.generator)?,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Per-record input vectors for the three streams, `[human, object, spatial]`.
pub fn stream_inputs(bundle: &DatasetBundle) -> Result<Vec<[Vec<f64>; 3]>> {
    let empty = Pose2D { keypoints: Vec::new() };
    bundle
        .records
        .iter()
        .map(|r: &PairRecord| {
            Ok([
                r.feature(StreamKind::Human.name())?.to_vec(),
                r.feature(StreamKind::Object.name())?.to_vec(),
                encode_spatial(&r.human_box, &r.object_box, r.pose.as_ref().unwrap_or(&empty))?,
            ])
        })
        .collect()
}

fn label_vector(r: &PairRecord) -> Vec<f64> {
    r.label_vector().unwrap_or_default()
}

/// Trained streams and the optional synthesizer in front of the object stream.
pub struct TrainedStreams {
    pub models: [StreamModel; 3],
    pub synthesizer: Option<Synthesizer>,
    pub pseudo_labels: BTreeMap<String, VerdictCounts>,
}

impl TrainedStreams {
    pub fn outputs(&self, inputs: &[Vec<f64>; 3]) -> Result<[StreamOutput; 3]> {
        let object = match &self.synthesizer {
            Some(s) => infer_object_stream(&self.models[1], s, &inputs[1])?,
            None => self.models[1].forward(&inputs[1])?,
        };
        Ok([self.models[0].forward(&inputs[0])?, object, self.models[2].forward(&inputs[2])?])
    }
}

pub fn train_streams(
    cfg: &ExperimentConfig,
    toggles: Toggles,
    bundle: &DatasetBundle,
    inputs: &[[Vec<f64>; 3]],
) -> Result<TrainedStreams> {
    let n_verbs = bundle.vocabulary.n_verbs();
    let train = bundle.indices(Split::Train);
    let unlabeled = bundle.indices(Split::Unlabeled);
    if train.is_empty() {
        return Err(Error::Validation("no training pairs".into()));
    }
    let targets: Vec<Vec<f64>> = train.iter().map(|&i| label_vector(&bundle.records[i])).collect();
    let ugt = UgtConfig {
        alpha: cfg.alpha,
        unlabeled_ratio: cfg.unlabeled_ratio,
    };
    let use_unlabeled = toggles.extra_data && !unlabeled.is_empty();
    let mut pseudo_labels = BTreeMap::new();
    let mut models = Vec::with_capacity(3);
    let mut synthesizer = None;
    for (k, kind) in StreamKind::ALL.iter().enumerate() {
        let seed = cfg.seed.wrapping_mul(31).wrapping_add(k as u64 + 1);
        let x: Vec<Vec<f64>> = train.iter().map(|&i| inputs[i][k].clone()).collect();
        let u: Vec<Vec<f64>> = unlabeled.iter().map(|&i| inputs[i][k].clone()).collect();
        let mut model = StreamModel::new(&MlpSpec {
            input_dim: x[0].len(),
            hidden: cfg.hidden.clone(),
            n_verbs,
            uncertainty: toggles.uqm,
            seed,
        })?;
        let train_cfg = TrainConfig {
            lr: cfg.lr,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            seed,
            clip_norm: cfg.clip_norm,
        };
        if *kind == StreamKind::Object && toggles.oil {
            let categories: Vec<usize> =
                train.iter().map(|&i| bundle.records[i].object_category).collect();
            let classifier = stage(
                "synth",
                train_object_classifier(
                    &x,
                    &categories,
                    bundle.vocabulary.n_objects(),
                    &ClassifierSpec {
                        hidden: cfg.classifier_hidden.clone(),
                        train: TrainConfig {
                            lr: cfg.classifier_lr,
                            epochs: cfg.classifier_epochs,
                            batch_size: cfg.batch_size,
                            seed: seed ^ 0x5eed,
                            clip_norm: None,
                        },
                    },
                ),
            )?;
            let mut synth = Synthesizer::new(&SynthesizerSpec {
                feature_dim: x[0].len(),
                hidden: cfg.synth_hidden.clone(),
                seed: seed ^ 0x5ab,
            })?;
            stage(
                "synth",
                train_synthesizer(
                    &mut synth,
                    &x,
                    &categories,
                    &classifier,
                    &SynthTrainConfig {
                        train: TrainConfig {
                            lr: cfg.synth_lr,
                            epochs: cfg.synth_epochs,
                            batch_size: cfg.batch_size,
                            seed: seed ^ 0xa11,
                            clip_norm: None,
                        },
                        ..SynthTrainConfig::default()
                    },
                ),
            )?;
            let samples: Vec<ObjectSample> = x
                .iter()
                .zip(&categories)
                .zip(&targets)
                .map(|((f, &c), y)| ObjectSample {
                    feature: f.clone(),
                    category: c,
                    labels: y.clone(),
                })
                .collect();
            let similarity = build_similarity(&bundle.vocabulary);
            let pool = PartnerPool::new(&samples, &similarity)?;
            let oil = OilConfig {
                dup_prob: cfg.dup_prob,
                train: train_cfg,
            };
            let extra = use_unlabeled.then_some((u.as_slice(), &ugt));
            let (_, counts) = stage("train", train_object_stream_oil(&mut model, &pool, &synth, &oil, extra))?;
            if let Some(c) = counts {
                pseudo_labels.insert(kind.name().to_string(), c);
            }
            synthesizer = Some(synth);
        } else if use_unlabeled {
            let (_, counts) = stage("train", train_stream_ugt(&mut model, &x, &targets, &u, &train_cfg, &ugt))?;
            pseudo_labels.insert(kind.name().to_string(), counts);
        } else {
            stage("train", train_stream(&mut model, &x, &targets, &train_cfg))?;
        }
        models.push(model);
    }
    let models: [StreamModel; 3] = models
        .try_into()
        .map_err(|_| Error::Shape("expected three streams".into()))?;
    Ok(TrainedStreams {
        models,
        synthesizer,
        pseudo_labels,
    })
}

fn samples_for(
    bundle: &DatasetBundle,
    streams: &TrainedStreams,
    inputs: &[[Vec<f64>; 3]],
    split: Split,
) -> Result<Vec<CalibrationSample>> {
    bundle
        .indices(split)
        .into_iter()
        .map(|i| {
            let r = &bundle.records[i];
            Ok(CalibrationSample {
                outputs: streams.outputs(&inputs[i])?,
                det_h: r.det_h,
                det_o: r.det_o,
                labels: label_vector(r),
                split,
            })
        })
        .collect()
}

/// One scored detection per test pair and legal verb of its object.
pub fn detections(
    bundle: &DatasetBundle,
    streams: &TrainedStreams,
    inputs: &[[Vec<f64>; 3]],
    params: &CalibrationParams,
) -> Result<Vec<Detection>> {
    let vocab = &bundle.vocabulary;
    let mut out = Vec::new();
    for i in bundle.indices(Split::Test) {
        let r = &bundle.records[i];
        let pred = predict(&streams.outputs(&inputs[i])?, r.det_h, r.det_o, params)?;
        for v in vocab.verbs_for_object(r.object_category) {
            let c = vocab
                .lookup(v, r.object_category)
                .ok_or_else(|| Error::Validation("composition lookup".into()))?;
            out.push(Detection {
                image_id: r.image_id.clone(),
                human_box: r.human_box,
                object_box: r.object_box,
                composition: c,
                score: pred.fused[v].max(f64::MIN_POSITIVE),
            });
        }
    }
    Ok(out)
}

/// mAP for every subset and mPD; undefined values become `None`.
pub fn mode_metrics(
    dets: &[Detection],
    gt: &[GtAnnotation],
    vocab: &Vocabulary,
    mode: EvalMode,
    thr: f64,
) -> Result<ModeMetrics> {
    let table = evaluate(dets, gt, vocab, mode, thr)?;
    let mut map = BTreeMap::new();
    for subset in Subset::ALL {
        let key = serde_json::to_value(subset)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        let value = match compute_map(&table, vocab, subset) {
            Ok(m) => Some(m),
            Err(Error::Undefined(_)) => None,
            Err(e) => return Err(e),
        };
        map.insert(key, value);
    }
    let mpd = match compute_mpd(&table, vocab) {
        Ok(r) => Some(r),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(ModeMetrics { map, mpd })
}

pub fn run_single(
    cfg: &ExperimentConfig,
    name: &str,
    toggles: Toggles,
    bundle: &DatasetBundle,
    inputs: &[[Vec<f64>; 3]],
) -> Result<RunReport> {
    let streams = train_streams(cfg, toggles, bundle, inputs)?;
    let val = stage("calibrate", samples_for(bundle, &streams, inputs, Split::Val))?;
    let n_verbs = bundle.vocabulary.n_verbs();
    let calibration = if toggles.cui {
        stage(
            "calibrate",
            fit_calibration(
                &val,
                &CalibrationConfig {
                    beta: cfg.beta,
                    gamma: cfg.gamma,
                    epochs: cfg.calib_epochs,
                    lr: cfg.calib_lr,
                    batch_size: cfg.calib_batch_size,
                    seed: cfg.seed,
                },
            ),
        )?
        .params
    } else {
        CalibrationParams {
            beta: cfg.beta,
            gamma: cfg.gamma,
            ..CalibrationParams::identity(n_verbs)
        }
    };
    let terms = stage("calibrate", calibration_terms(&val, &calibration))?;
    let dets = stage("eval", detections(bundle, &streams, inputs, &calibration))?;
    let default = stage("eval", mode_metrics(&dets, &bundle.gt, &bundle.vocabulary, EvalMode::Default, cfg.iou_threshold))?;
    let known_object = stage(
        "eval",
        mode_metrics(&dets, &bundle.gt, &bundle.vocabulary, EvalMode::KnownObject, cfg.iou_threshold),
    )?;
    Ok(RunReport {
        name: name.to_string(),
        toggles,
        default,
        known_object,
        calibration,
        calibration_terms_val: terms,
        pseudo_labels: streams.pseudo_labels,
        n_train: bundle.indices(Split::Train).len(),
        n_unlabeled: bundle.indices(Split::Unlabeled).len(),
        n_test: bundle.indices(Split::Test).len(),
    })
}

/// Runs the configured experiment; with `compare` also the `oil = false`
/// baseline on the same data and seeds.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    stage("config", cfg.validate())?;
    let bundle = stage("gen", load_data(cfg))?;
    let inputs = stage("gen", stream_inputs(&bundle))?;
    let mut runs = vec![run_single(cfg, "main", cfg.toggles, &bundle, &inputs)?];
    if cfg.compare {
        let baseline = Toggles {
            oil: false,
            ..cfg.toggles
        };
        runs.push(run_single(cfg, "baseline", baseline, &bundle, &inputs)?);
    }
    Ok(ExperimentReport {
        config: cfg.clone(),
        runs,
    })
}
