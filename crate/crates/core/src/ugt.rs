//! Uncertainty-guided training with unlabeled pairs.
//!
//! Each mixed mini-batch yields per-verb thresholds from its labeled half.
//! Unlabeled predictions above `p_p` or below `p_n` become pseudo positives
//! or negatives; their variance against the labeled mean variance `eps`
//! decides whether the pseudo label is trusted (TP/TN, BCE toward 1/0) or
//! not (FP/FN, BCE toward `p_m` minus `e`). Everything in between is
//! unfamiliar and contributes nothing.
//!
//! Boundary convention: `sigma(s) == p_p` or `== p_n` is unfamiliar, and
//! `exp(e) == eps` counts as the untrusted branch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::nn::{sigmoid, Trace};
use crate::stream::{StreamModel, StreamOutput, TrainConfig, E_CLAMP};

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside [`bce`].
pub const BCE_EPS: f64 = 1e-7;

/// `-(log(1 - p)(1 - y) + log(p) y)` with `p` clamped away from 0 and 1.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -((1.0 - p).ln() * (1.0 - y) + p.ln() * y)
}

/// `d bce / d p`; zero where the clamp is active.
pub(crate) fn bce_dp(p: f64, y: f64) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
        return 0.0;
    }
    (1.0 - y) / (1.0 - p) - y / p
}

/// `d bce(sigmoid(s), y) / d s`.
fn bce_ds(p: f64, y: f64) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
        return 0.0;
    }
    p - y
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchThresholds {
    pub p_p: f64,
    pub p_n: f64,
    pub p_m: f64,
    pub eps: f64,
}

/// Thresholds for `verb` from labeled outputs. Labels above 0.5 count as
/// positives, below 0.5 as negatives. `None` when either side is missing,
/// in which case the verb is not pseudo-labeled for this batch.
pub fn compute_thresholds(
    outputs: &[StreamOutput],
    labels: &[Vec<f64>],
    verb: usize,
) -> Result<Option<BatchThresholds>> {
    if outputs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} outputs for {} label vectors",
            outputs.len(),
            labels.len()
        )));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut var_sum = 0.0;
    for (out, y) in outputs.iter().zip(labels) {
        if verb >= out.s.len() || verb >= y.len() {
            return Err(Error::Shape(format!("verb {verb} out of range")));
        }
        let p = sigmoid(out.s[verb]);
        if y[verb] > 0.5 {
            pos.push(p);
        } else if y[verb] < 0.5 {
            neg.push(p);
        }
        var_sum += out.e[verb].exp();
    }
    if pos.is_empty() || neg.is_empty() {
        return Ok(None);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let p_p = mean(&pos).max(neg.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let p_n = mean(&neg).min(pos.iter().copied().fold(f64::INFINITY, f64::min));
    Ok(Some(BatchThresholds {
        p_p,
        p_n,
        p_m: 0.5 * (p_p + p_n),
        eps: var_sum / outputs.len() as f64,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "TP")]
    TruePositive,
    #[serde(rename = "FP")]
    FalsePositive,
    #[serde(rename = "TN")]
    TrueNegative,
    #[serde(rename = "FN")]
    FalseNegative,
    #[serde(rename = "unfamiliar")]
    Unfamiliar,
}

/// Verdict, loss and `(dL/ds, dL/de)` for one unlabeled prediction.
fn unlabeled_terms(s: f64, e: f64, th: &BatchThresholds) -> (Verdict, f64, f64, f64) {
    let p = sigmoid(s);
    let trusted = e.exp() < th.eps;
    if p > th.p_p {
        if trusted {
            (Verdict::TruePositive, bce(p, 1.0), bce_ds(p, 1.0), 0.0)
        } else {
            (Verdict::FalsePositive, bce(p, th.p_m) - e, bce_ds(p, th.p_m), -1.0)
        }
    } else if p < th.p_n {
        if trusted {
            (Verdict::TrueNegative, bce(p, 0.0), bce_ds(p, 0.0), 0.0)
        } else {
            (Verdict::FalseNegative, bce(p, th.p_m) - e, bce_ds(p, th.p_m), -1.0)
        }
    } else {
        (Verdict::Unfamiliar, 0.0, 0.0, 0.0)
    }
}

/// Pseudo verdict and loss for one unlabeled logit / log-variance.
pub fn unlabeled_loss(s_u: f64, e_u: f64, thresholds: &BatchThresholds) -> Result<(Verdict, f64)> {
    ensure_finite(&[s_u, e_u], "unlabeled output")?;
    let (v, l, _, _) = unlabeled_terms(s_u, e_u, thresholds);
    Ok((v, l))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    /// `[sample][verb]`; `None` where the verb was skipped for lack of
    /// labeled positives or negatives.
    pub verdicts: Vec<Vec<Option<Verdict>>>,
    pub thresholds: Vec<Option<BatchThresholds>>,
}

fn labeled_uncertainty_sum(out: &StreamOutput, y: &[f64]) -> f64 {
    out.s
        .iter()
        .zip(&out.e)
        .zip(y)
        .map(|((&s, &e), &y)| {
            let p = sigmoid(s);
            (p - y).powi(2) * (-2.0 * e).exp() + 0.5 * e
        })
        .sum()
}

/// Combined objective of one mixed batch:
/// `(1/|V|) (sum_labeled sum_v L^s / |B^s| + sum_unlabeled sum_v alpha L^u / |B^u|)`.
pub fn batch_loss(
    labeled: &[(StreamOutput, Vec<f64>)],
    unlabeled: &[StreamOutput],
    alpha: f64,
) -> Result<BatchLoss> {
    if labeled.is_empty() {
        return Err(Error::Validation("mixed batch has no labeled samples".into()));
    }
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha = {alpha} must be >= 0")));
    }
    let n_verbs = labeled[0].0.s.len();
    let outputs: Vec<StreamOutput> = labeled.iter().map(|(o, _)| o.clone()).collect();
    let labels: Vec<Vec<f64>> = labeled.iter().map(|(_, y)| y.clone()).collect();
    let thresholds = (0..n_verbs)
        .map(|v| compute_thresholds(&outputs, &labels, v))
        .collect::<Result<Vec<_>>>()?;

    let sup: f64 = labeled
        .iter()
        .map(|(o, y)| labeled_uncertainty_sum(o, y))
        .sum::<f64>()
        / labeled.len() as f64;

    let mut unsup = 0.0;
    let mut verdicts = Vec::with_capacity(unlabeled.len());
    for out in unlabeled {
        ensure_finite(&out.s, "unlabeled logits")?;
        let mut row = Vec::with_capacity(n_verbs);
        for v in 0..n_verbs {
            match &thresholds[v] {
                Some(th) => {
                    let (verdict, l, _, _) = unlabeled_terms(out.s[v], out.e[v], th);
                    unsup += alpha * l;
                    row.push(Some(verdict));
                }
                None => row.push(None),
            }
        }
        verdicts.push(row);
    }
    if !unlabeled.is_empty() {
        unsup /= unlabeled.len() as f64;
    }
    Ok(BatchLoss {
        loss: (sup + unsup) / n_verbs as f64,
        verdicts,
        thresholds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UgtConfig {
    pub alpha: f64,
    /// Unlabeled samples per labeled sample in each mixed batch.
    pub unlabeled_ratio: f64,
}

impl Default for UgtConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            unlabeled_ratio: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub unfamiliar: usize,
    pub skipped: usize,
}

impl VerdictCounts {
    pub fn record(&mut self, v: Option<Verdict>) {
        match v {
            Some(Verdict::TruePositive) => self.tp += 1,
            Some(Verdict::FalsePositive) => self.fp += 1,
            Some(Verdict::TrueNegative) => self.tn += 1,
            Some(Verdict::FalseNegative) => self.fn_ += 1,
            Some(Verdict::Unfamiliar) => self.unfamiliar += 1,
            None => self.skipped += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_ + self.unfamiliar + self.skipped
    }
}

/// Trains `model` on mixed labeled/unlabeled batches. Returns per-epoch mean
/// batch loss and the verdict counts of the final epoch.
pub fn train_stream_ugt(
    model: &mut StreamModel,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    unlabeled: &[Vec<f64>],
    cfg: &TrainConfig,
    ugt: &UgtConfig,
) -> Result<(Vec<f64>, VerdictCounts)> {
    if !model.uncertainty {
        return Err(Error::Config(
            "uncertainty-guided training needs a stream with a log-variance head".into(),
        ));
    }
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::Shape("labeled inputs/targets empty or mismatched".into()));
    }
    let v = model.n_verbs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut u_order: Vec<usize> = (0..unlabeled.len()).collect();
    let batch = cfg.batch_size.max(1);
    let u_batch = ((batch as f64) * ugt.unlabeled_ratio).round() as usize;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut counts = VerdictCounts::default();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        u_order.shuffle(&mut rng);
        let mut u_cursor = 0usize;
        counts = VerdictCounts::default();
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(batch) {
            let traces: Vec<Trace> = chunk
                .iter()
                .map(|&i| model.network().forward_trace(&inputs[i]))
                .collect::<Result<_>>()?;
            let mut u_idx = Vec::with_capacity(u_batch);
            if !unlabeled.is_empty() {
                for _ in 0..u_batch {
                    u_idx.push(u_order[u_cursor % unlabeled.len()]);
                    u_cursor += 1;
                }
            }
            let u_traces: Vec<Trace> = u_idx
                .iter()
                .map(|&i| model.network().forward_trace(&unlabeled[i]))
                .collect::<Result<_>>()?;

            let outputs: Vec<StreamOutput> = traces
                .iter()
                .map(|t| split_output(t.output(), v))
                .collect();
            let labels: Vec<Vec<f64>> = chunk.iter().map(|&i| targets[i].clone()).collect();
            let thresholds = (0..v)
                .map(|j| compute_thresholds(&outputs, &labels, j))
                .collect::<Result<Vec<_>>>()?;

            let mut grads = model.network().zero_gradients();
            let mut loss = 0.0;
            let inv_b = 1.0 / chunk.len() as f64;
            for (t, &i) in traces.iter().zip(chunk) {
                let (l, mut d) = model.output_loss(t.output(), &targets[i])?;
                d.iter_mut().for_each(|x| *x *= inv_b);
                model.network().backward_into(t, &d, &mut grads);
                loss += l * inv_b;
            }
            if !u_traces.is_empty() {
                let scale = ugt.alpha / (u_traces.len() as f64 * v as f64);
                for t in &u_traces {
                    let raw = t.output();
                    let mut d = vec![0.0; raw.len()];
                    for j in 0..v {
                        let Some(th) = &thresholds[j] else {
                            counts.record(None);
                            continue;
                        };
                        let e_raw = raw[v + j];
                        let e = e_raw.clamp(-E_CLAMP, E_CLAMP);
                        let (verdict, l, ds, de) = unlabeled_terms(raw[j], e, th);
                        counts.record(Some(verdict));
                        loss += l * scale;
                        d[j] = ds * scale;
                        if (-E_CLAMP..=E_CLAMP).contains(&e_raw) {
                            d[v + j] = de * scale;
                        }
                    }
                    model.network().backward_into(t, &d, &mut grads);
                }
            }
            if !grads.is_finite() {
                return Err(Error::NonFinite("uncertainty-guided gradient".into()));
            }
            if let Some(max) = cfg.clip_norm {
                grads.clip_norm(max);
            }
            model.sgd_step(&grads, cfg.lr);
            epoch_loss += loss;
            n_batches += 1;
        }
        history.push(epoch_loss / n_batches as f64);
    }
    Ok((history, counts))
}

fn split_output(raw: &[f64], v: usize) -> StreamOutput {
    StreamOutput {
        s: raw[..v].to_vec(),
        e: raw[v..2 * v].iter().map(|e| e.clamp(-E_CLAMP, E_CLAMP)).collect(),
    }
}

/// One line of the pseudo-label verdict report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLine {
    pub pair_id: String,
    pub verb: usize,
    pub verdict: Verdict,
    pub sigma_s: f64,
    pub var: f64,
    pub loss: f64,
}

/// Verdicts for every unlabeled `(pair, verb)` with thresholds taken from
/// the whole labeled set; verbs without both label polarities are omitted.
pub fn pseudo_label(
    labeled: &[StreamOutput],
    labels: &[Vec<f64>],
    unlabeled: &[(String, StreamOutput)],
) -> Result<Vec<PseudoLine>> {
    let n_verbs = labeled.first().map(|o| o.s.len()).unwrap_or(0);
    let thresholds = (0..n_verbs)
        .map(|v| compute_thresholds(labeled, labels, v))
        .collect::<Result<Vec<_>>>()?;
    let mut lines = Vec::new();
    for (id, out) in unlabeled {
        for (v, th) in thresholds.iter().enumerate() {
            let Some(th) = th else { continue };
            let (verdict, loss) = unlabeled_loss(out.s[v], out.e[v], th)?;
            lines.push(PseudoLine {
                pair_id: id.clone(),
                verb: v,
                verdict,
                sigma_s: sigmoid(out.s[v]),
                var: out.e[v].exp(),
                loss,
            });
        }
    }
    Ok(lines)
}

/// Share of correct / incorrect predictions among pseudo TP and pseudo FP
/// verdicts, given the hidden truth of the unlabeled samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoQuality {
    pub pseudo_tp_correct: f64,
    pub pseudo_tp_wrong: f64,
    pub pseudo_fp_correct: f64,
    pub pseudo_fp_wrong: f64,
}

/// `truth(pair_id, verb)` returns whether the verb is really present.
pub fn pseudo_label_quality(
    lines: &[PseudoLine],
    truth: impl Fn(&str, usize) -> bool,
) -> PseudoQuality {
    let (mut tp_ok, mut tp_bad, mut fp_ok, mut fp_bad) = (0usize, 0usize, 0usize, 0usize);
    for l in lines {
        let actual = truth(&l.pair_id, l.verb);
        match l.verdict {
            Verdict::TruePositive if actual => tp_ok += 1,
            Verdict::TruePositive => tp_bad += 1,
            Verdict::FalsePositive if actual => fp_ok += 1,
            Verdict::FalsePositive => fp_bad += 1,
            _ => {}
        }
    }
    let frac = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    PseudoQuality {
        pseudo_tp_correct: frac(tp_ok, tp_bad),
        pseudo_tp_wrong: frac(tp_bad, tp_ok),
        pseudo_fp_correct: frac(fp_ok, fp_bad),
        pseudo_fp_wrong: frac(fp_bad, fp_ok),
    }
}
