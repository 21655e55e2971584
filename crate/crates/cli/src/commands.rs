use std::collections::BTreeMap;
use std::path::Path;

use hoigen::bench::{generate, GeneratorConfig};
use hoigen::calibration::{
    calibration_terms, fit_calibration, predict, CalibrationConfig, CalibrationParams,
    CalibrationSample,
};
use hoigen::io::{
    emit_report, parse_detections, parse_features, parse_gt, read_json, read_jsonl, write_json,
    write_jsonl, DatasetBundle, LabelLine, ScoreLine, Split, SplitLine,
};
use hoigen::metrics::{evaluate, EvalMode};
use hoigen::model::{CompositionId, Detection, PairRecord, Vocabulary};
use hoigen::ocimmune::{
    build_similarity, infer_object_stream, train_object_classifier, train_object_stream_oil,
    train_synthesizer, ClassifierSpec, ObjectClassifier, ObjectSample, OilConfig, PartnerPool,
    SynthTrainConfig, Synthesizer, SynthesizerSpec,
};
use hoigen::pipeline::{mode_metrics, run_pipeline, stream_inputs, ExperimentConfig, ModeMetrics};
use hoigen::stream::{train_stream, MlpSpec, StreamKind, StreamModel, StreamOutput, TrainConfig};
use hoigen::ugt::{pseudo_label, train_stream_ugt, UgtConfig};
use hoigen::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::{
    CalibrateArgs, EvalArgs, GenArgs, ModeArg, PipelineArgs, PseudoArgs, StreamArg, SynthArgs,
    TrainArgs,
};

/// Saved object classifier and synthesizer.
#[derive(Serialize, Deserialize)]
pub struct SynthCheckpoint {
    pub dup_prob: f64,
    pub classifier: ObjectClassifier,
    pub synthesizer: Synthesizer,
}

/// Saved verb stream, with the synthesizer that must precede it at inference.
#[derive(Serialize, Deserialize)]
pub struct StreamCheckpoint {
    pub stream: StreamKind,
    pub model: StreamModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesizer: Option<Synthesizer>,
}

impl StreamCheckpoint {
    fn output(&self, x: &[f64]) -> Result<StreamOutput> {
        match &self.synthesizer {
            Some(s) => infer_object_stream(&self.model, s, x),
            None => self.model.forward(x),
        }
    }
}

#[derive(Serialize)]
struct EvalReport {
    mode: EvalMode,
    iou_threshold: f64,
    metrics: ModeMetrics,
    ap: BTreeMap<CompositionId, f64>,
    n_gt: BTreeMap<CompositionId, usize>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn kind_of(s: StreamArg) -> StreamKind {
    match s {
        StreamArg::Human => StreamKind::Human,
        StreamArg::Object => StreamKind::Object,
        StreamArg::Spatial => StreamKind::Spatial,
    }
}

fn stream_index(kind: StreamKind) -> usize {
    StreamKind::ALL.iter().position(|&k| k == kind).unwrap_or(0)
}

pub fn gen(a: GenArgs) -> Result<()> {
    let mut cfg: GeneratorConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => GeneratorConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.spurious_strength {
        cfg.spurious_strength = r;
    }
    if let Some(f) = a.unseen_fraction {
        cfg.unseen_fraction = f;
    }
    if let Some(h) = &a.holdout {
        cfg.holdout = h.parse()?;
    }
    let bundle = generate(&cfg)?;
    bundle.write_dir(&a.out_dir)?;
    let labels: Vec<LabelLine> = bundle
        .records
        .iter()
        .filter_map(|r| {
            r.label_vector().map(|labels| LabelLine {
                pair_id: r.pair_id.clone(),
                labels,
            })
        })
        .collect();
    write_jsonl(&a.out_dir.join("labels.jsonl"), &labels)?;
    write_json(&a.out_dir.join("gen.json"), &cfg)?;
    eprintln!(
        "wrote {} pairs, {} compositions to {}",
        bundle.records.len(),
        bundle.vocabulary.n_compositions(),
        a.out_dir.display()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let kind = kind_of(a.stream);
    let k = stream_index(kind);
    let bundle = DatasetBundle::read_dir(&a.data)?;
    let inputs = stream_inputs(&bundle)?;
    let train = bundle.indices(Split::Train);
    let unlabeled = bundle.indices(Split::Unlabeled);
    if train.is_empty() {
        return Err(invalid("no training pairs"));
    }
    let x: Vec<Vec<f64>> = train.iter().map(|&i| inputs[i][k].clone()).collect();
    let y: Vec<Vec<f64>> = train
        .iter()
        .map(|&i| bundle.records[i].label_vector().unwrap_or_default())
        .collect();
    let u: Vec<Vec<f64>> = unlabeled.iter().map(|&i| inputs[i][k].clone()).collect();
    let mut model = StreamModel::new(&MlpSpec {
        input_dim: x[0].len(),
        hidden: a.hidden.clone(),
        n_verbs: bundle.vocabulary.n_verbs(),
        uncertainty: !a.no_uqm,
        seed: a.seed,
    })?;
    let cfg = TrainConfig {
        lr: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        clip_norm: (a.clip_norm > 0.0).then_some(a.clip_norm),
    };
    let ugt = UgtConfig {
        alpha: a.alpha,
        unlabeled_ratio: a.unlabeled_ratio,
    };
    if a.extra_data && u.is_empty() {
        return Err(invalid("--extra-data given but the unlabeled split is empty"));
    }
    let mut synthesizer = None;
    let history = match &a.synth {
        Some(path) => {
            if kind != StreamKind::Object {
                return Err(invalid("--synth applies to the object stream only"));
            }
            let ckpt: SynthCheckpoint = read_json(path)?;
            let samples: Vec<ObjectSample> = train
                .iter()
                .zip(x.iter().zip(&y))
                .map(|(&i, (f, l))| ObjectSample {
                    feature: f.clone(),
                    category: bundle.records[i].object_category,
                    labels: l.clone(),
                })
                .collect();
            let similarity = build_similarity(&bundle.vocabulary);
            let pool = PartnerPool::new(&samples, &similarity)?;
            let oil = OilConfig {
                dup_prob: ckpt.dup_prob,
                train: cfg,
            };
            let extra = a.extra_data.then_some((u.as_slice(), &ugt));
            let (h, _) = train_object_stream_oil(&mut model, &pool, &ckpt.synthesizer, &oil, extra)?;
            synthesizer = Some(ckpt.synthesizer);
            h
        }
        None if a.extra_data => train_stream_ugt(&mut model, &x, &y, &u, &cfg, &ugt)?.0,
        None => train_stream(&mut model, &x, &y, &cfg)?,
    };
    let ckpt = StreamCheckpoint {
        stream: kind,
        model,
        synthesizer,
    };
    if let Some(path) = &a.scores_out {
        let lines = bundle
            .records
            .iter()
            .zip(&bundle.splits)
            .zip(&inputs)
            .map(|((r, &split), inp)| {
                let out = ckpt.output(&inp[k])?;
                Ok(ScoreLine {
                    pair_id: r.pair_id.clone(),
                    stream: kind.name().to_string(),
                    s: out.s,
                    e: out.e,
                    det_h: r.det_h,
                    det_o: r.det_o,
                    split,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_jsonl(path, &lines)?;
    }
    write_json(&a.out, &ckpt)?;
    if let Some(last) = history.last() {
        eprintln!("{} stream: final epoch loss {last:.6}", kind.name());
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let vocab: Vocabulary = read_json(&a.vocab)?;
    let pairs: Vec<PairRecord> = read_jsonl(&a.pairs)?;
    let keep: Option<BTreeMap<String, Split>> = match &a.splits {
        Some(p) => Some(
            read_jsonl::<SplitLine>(p)?
                .into_iter()
                .map(|l| (l.pair_id, l.split))
                .collect(),
        ),
        None => None,
    };
    let dim = {
        let text = std::fs::read_to_string(&a.features).map_err(|e| Error::io(&a.features, e))?;
        let first = text
            .lines()
            .find(|l| !l.trim().is_empty())
            .ok_or_else(|| invalid(format!("{} is empty", a.features.display())))?;
        let v: serde_json::Value = serde_json::from_str(first).map_err(|e| Error::Parse {
            path: a.features.clone(),
            line: 1,
            message: e.to_string(),
        })?;
        v["vec"].as_array().map(Vec::len).unwrap_or(0)
    };
    let feats = parse_features(&a.features, dim)?;
    let mut x = Vec::new();
    let mut categories = Vec::new();
    for r in &pairs {
        if let Some(k) = &keep {
            if k.get(&r.pair_id) != Some(&Split::Train) {
                continue;
            }
        }
        if let Some(f) = feats.get(&r.pair_id) {
            x.push(f.clone());
            categories.push(r.object_category);
        }
    }
    if x.is_empty() {
        return Err(invalid("no object features matched the pair file"));
    }
    let base = TrainConfig {
        batch_size: 16,
        seed: a.seed,
        clip_norm: None,
        ..TrainConfig::default()
    };
    let classifier = train_object_classifier(
        &x,
        &categories,
        vocab.n_objects(),
        &ClassifierSpec {
            hidden: a.classifier_hidden.clone(),
            train: TrainConfig {
                lr: 0.05,
                epochs: a.classifier_epochs,
                ..base.clone()
            },
        },
    )?;
    let mut synthesizer = Synthesizer::new(&SynthesizerSpec {
        feature_dim: dim,
        hidden: a.synth_hidden.clone(),
        seed: a.seed,
    })?;
    train_synthesizer(
        &mut synthesizer,
        &x,
        &categories,
        &classifier,
        &SynthTrainConfig {
            train: TrainConfig {
                lr: 0.02,
                epochs: a.synth_epochs,
                seed: a.seed.wrapping_add(1),
                ..base
            },
            ..SynthTrainConfig::default()
        },
    )?;
    if !(0.0..=1.0).contains(&a.dup_prob) {
        return Err(invalid("--dup-prob must lie in [0, 1]"));
    }
    write_json(
        &a.out,
        &SynthCheckpoint {
            dup_prob: a.dup_prob,
            classifier,
            synthesizer,
        },
    )
}

fn read_scores(paths: &[std::path::PathBuf]) -> Result<BTreeMap<String, ([Option<StreamOutput>; 3], ScoreLine)>> {
    let mut by_pair: BTreeMap<String, ([Option<StreamOutput>; 3], ScoreLine)> = BTreeMap::new();
    for path in paths {
        for line in read_jsonl::<ScoreLine>(path)? {
            let kind = StreamKind::ALL
                .into_iter()
                .find(|k| k.name() == line.stream)
                .ok_or_else(|| invalid(format!("{}: unknown stream `{}`", path.display(), line.stream)))?;
            let out = StreamOutput {
                s: line.s.clone(),
                e: line.e.clone(),
            };
            let entry = by_pair
                .entry(line.pair_id.clone())
                .or_insert_with(|| (Default::default(), line.clone()));
            let slot = &mut entry.0[stream_index(kind)];
            if slot.is_some() {
                return Err(invalid(format!("duplicate {} score for `{}`", kind.name(), line.pair_id)));
            }
            *slot = Some(out);
        }
    }
    Ok(by_pair)
}

fn complete(id: &str, outs: &[Option<StreamOutput>; 3]) -> Result<[StreamOutput; 3]> {
    let get = |k: usize| {
        outs[k]
            .clone()
            .ok_or_else(|| invalid(format!("pair `{id}` lacks {} scores", StreamKind::ALL[k].name())))
    };
    Ok([get(0)?, get(1)?, get(2)?])
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let scores = read_scores(&a.val_scores)?;
    let labels: BTreeMap<String, Vec<f64>> = read_jsonl::<LabelLine>(&a.labels)?
        .into_iter()
        .map(|l| (l.pair_id, l.labels))
        .collect();
    let mut samples = Vec::new();
    for (id, (outs, line)) in &scores {
        if line.split != Split::Val {
            continue;
        }
        let y = labels
            .get(id)
            .ok_or_else(|| invalid(format!("validation pair `{id}` has no labels")))?;
        samples.push(CalibrationSample {
            outputs: complete(id, outs)?,
            det_h: line.det_h,
            det_o: line.det_o,
            labels: y.clone(),
            split: Split::Val,
        });
    }
    let fit = fit_calibration(
        &samples,
        &CalibrationConfig {
            beta: a.beta,
            gamma: a.gamma,
            epochs: a.epochs,
            lr: a.lr,
            batch_size: a.batch_size,
            seed: a.seed,
        },
    )?;
    let terms = calibration_terms(&samples, &fit.params)?;
    eprintln!(
        "calibrated on {} pairs: stream bce {:.6?}, agreement {:.6}, unified bce {:.6}",
        samples.len(),
        terms.stream_bce,
        terms.agreement,
        terms.unified_bce
    );
    write_json(&a.out, &fit.params)?;
    if let (Some(det_out), Some(pairs), Some(vocab)) = (&a.det_out, &a.pairs, &a.vocab) {
        write_detections(&scores, &fit.params, pairs, vocab, det_out)?;
    }
    Ok(())
}

fn write_detections(
    scores: &BTreeMap<String, ([Option<StreamOutput>; 3], ScoreLine)>,
    params: &CalibrationParams,
    pairs: &Path,
    vocab: &Path,
    out: &Path,
) -> Result<()> {
    let vocab: Vocabulary = read_json(vocab)?;
    let pairs: Vec<PairRecord> = read_jsonl(pairs)?;
    let mut dets = Vec::new();
    for r in &pairs {
        let Some((outs, line)) = scores.get(&r.pair_id) else { continue };
        if line.split != Split::Test {
            continue;
        }
        let pred = predict(&complete(&r.pair_id, outs)?, r.det_h, r.det_o, params)?;
        for v in vocab.verbs_for_object(r.object_category) {
            let c = vocab
                .lookup(v, r.object_category)
                .ok_or_else(|| invalid("composition lookup"))?;
            dets.push(Detection {
                image_id: r.image_id.clone(),
                human_box: r.human_box,
                object_box: r.object_box,
                composition: c,
                score: pred.fused[v].max(f64::MIN_POSITIVE),
            });
        }
    }
    write_jsonl(out, &dets)
}

pub fn pseudo(a: PseudoArgs) -> Result<()> {
    let bundle = DatasetBundle::read_dir(&a.data)?;
    let inputs = stream_inputs(&bundle)?;
    let ckpt: StreamCheckpoint = read_json(&a.model)?;
    let k = stream_index(ckpt.stream);
    let mut labeled = Vec::new();
    let mut labels = Vec::new();
    for i in bundle.indices(Split::Train) {
        labeled.push(ckpt.output(&inputs[i][k])?);
        labels.push(bundle.records[i].label_vector().unwrap_or_default());
    }
    let unlabeled = bundle
        .indices(Split::Unlabeled)
        .into_iter()
        .map(|i| Ok((bundle.records[i].pair_id.clone(), ckpt.output(&inputs[i][k])?)))
        .collect::<Result<Vec<_>>>()?;
    let lines = pseudo_label(&labeled, &labels, &unlabeled)?;
    write_jsonl(&a.out, &lines)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let vocab: Vocabulary = read_json(&a.vocab)?;
    let gt = parse_gt(&a.gt, &vocab)?;
    let dets = parse_detections(&a.det, &vocab)?;
    let mode = match a.mode {
        ModeArg::Default => EvalMode::Default,
        ModeArg::Known => EvalMode::KnownObject,
    };
    let table = evaluate(&dets, &gt, &vocab, mode, a.iou)?;
    let metrics = mode_metrics(&dets, &gt, &vocab, mode, a.iou)?;
    emit_report(
        &EvalReport {
            mode,
            iou_threshold: a.iou,
            metrics,
            ap: table.ap,
            n_gt: table.n_gt,
        },
        &a.out,
    )
}

pub fn pipeline(a: PipelineArgs) -> Result<()> {
    let mut cfg: ExperimentConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ExperimentConfig::default(),
    };
    if a.data_dir.is_some() {
        cfg.data_dir = a.data_dir;
    }
    macro_rules! set {
        ($($flag:expr => $field:expr),* $(,)?) => {
            $(if let Some(v) = $flag { $field = v; })*
        };
    }
    set! {
        a.seed => cfg.seed,
        a.oil => cfg.toggles.oil,
        a.uqm => cfg.toggles.uqm,
        a.cui => cfg.toggles.cui,
        a.extra_data => cfg.toggles.extra_data,
        a.lr => cfg.lr,
        a.epochs => cfg.epochs,
        a.alpha => cfg.alpha,
        a.beta => cfg.beta,
        a.gamma => cfg.gamma,
        a.dup_prob => cfg.dup_prob,
    }
    if a.compare {
        cfg.compare = true;
    }
    let report = run_pipeline(&cfg)?;
    emit_report(&report, &a.out)
}
