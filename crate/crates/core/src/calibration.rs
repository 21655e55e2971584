//! Calibration-aware unified inference.
//!
//! Each stream's logits are Platt-scaled per verb and divided by the
//! predicted standard scale `exp(e)`, then multiplied by both detector
//! confidences. The three calibrated streams are fused by a convex
//! combination. Fitting minimizes
//! `beta * (L_h + L_o + L_sp) + gamma * L_agree + L_uni` on validation
//! pairs with the stream networks frozen; the fusion weights are kept on the
//! simplex by a softmax over three free logits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::io::Split;
use crate::nn::{sigmoid, softmax};
use crate::stream::{StreamKind, StreamOutput};
use crate::ugt::{bce, bce_dp};

pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Per-verb Platt scaling for one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamScaling {
    pub w: Vec<f64>,
    pub c: Vec<f64>,
}

impl StreamScaling {
    pub fn identity(n_verbs: usize) -> Self {
        Self {
            w: vec![1.0; n_verbs],
            c: vec![0.0; n_verbs],
        }
    }
}

/// Fusion weights in `[human, object, spatial]` order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fusion {
    pub human: f64,
    pub object: f64,
    pub spatial: f64,
}

impl Fusion {
    pub fn uniform() -> Self {
        let t = 1.0 / 3.0;
        Self {
            human: t,
            object: t,
            spatial: t,
        }
    }

    pub fn from_array(f: [f64; 3]) -> Self {
        Self {
            human: f[0],
            object: f[1],
            spatial: f[2],
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.human, self.object, self.spatial]
    }

    pub fn check(&self) -> Result<()> {
        let f = self.to_array();
        if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation(format!("fusion weights {f:?} must be finite and >= 0")));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::Validation(format!("fusion weights sum to {sum}, not 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub human: StreamScaling,
    pub object: StreamScaling,
    pub spatial: StreamScaling,
    pub fusion: Fusion,
    pub beta: f64,
    pub gamma: f64,
}

impl CalibrationParams {
    /// Uncalibrated fusion: `w = 1`, `c = 0`, equal weights.
    pub fn identity(n_verbs: usize) -> Self {
        Self {
            human: StreamScaling::identity(n_verbs),
            object: StreamScaling::identity(n_verbs),
            spatial: StreamScaling::identity(n_verbs),
            fusion: Fusion::uniform(),
            beta: 1.0,
            gamma: 0.1,
        }
    }

    pub fn stream(&self, kind: StreamKind) -> &StreamScaling {
        match kind {
            StreamKind::Human => &self.human,
            StreamKind::Object => &self.object,
            StreamKind::Spatial => &self.spatial,
        }
    }

    fn streams(&self) -> [&StreamScaling; 3] {
        [&self.human, &self.object, &self.spatial]
    }
}

/// `sigmoid((w * s + c) / exp(e)) * det_h * det_o`, elementwise over verbs.
pub fn calibrate_stream(
    output: &StreamOutput,
    scaling: &StreamScaling,
    det_h: f64,
    det_o: f64,
) -> Result<Vec<f64>> {
    let v = output.s.len();
    if output.e.len() != v || scaling.w.len() != v || scaling.c.len() != v {
        return Err(Error::Shape(format!(
            "calibration shapes: s {}, e {}, w {}, c {}",
            v,
            output.e.len(),
            scaling.w.len(),
            scaling.c.len()
        )));
    }
    ensure_finite(&output.s, "logits")?;
    ensure_finite(&scaling.w, "w")?;
    ensure_finite(&scaling.c, "c")?;
    if output.e.iter().any(|e| e.is_nan()) {
        return Err(Error::NonFinite("log-variance is NaN".into()));
    }
    for d in [det_h, det_o] {
        if !(0.0..=1.0).contains(&d) {
            return Err(Error::Validation(format!("detector confidence {d} outside [0, 1]")));
        }
    }
    Ok((0..v)
        .map(|j| {
            sigmoid((scaling.w[j] * output.s[j] + scaling.c[j]) / output.e[j].exp()) * det_h * det_o
        })
        .collect())
}

const PAIRS: [(usize, usize); 3] = [(0, 1), (1, 2), (2, 0)];

/// Distributional agreement: per verb, the absolute differences of the
/// three pairwise stream means over samples, summed; averaged over verbs.
/// Inputs are `[sample][verb]`.
pub fn agreement_loss(p_h: &[Vec<f64>], p_o: &[Vec<f64>], p_sp: &[Vec<f64>]) -> Result<f64> {
    let n = p_h.len();
    if p_o.len() != n || p_sp.len() != n {
        return Err(Error::Shape(format!(
            "agreement over {n}/{}/{} samples",
            p_o.len(),
            p_sp.len()
        )));
    }
    if n == 0 {
        return Err(Error::Validation("agreement over zero samples".into()));
    }
    let v = p_h[0].len();
    let streams = [p_h, p_o, p_sp];
    if streams.iter().flat_map(|s| s.iter()).any(|row| row.len() != v) {
        return Err(Error::Shape("ragged prediction rows".into()));
    }
    let means = stream_means(&streams, v);
    Ok(agreement_from_means(&means, v))
}

fn stream_means(streams: &[&[Vec<f64>]; 3], v: usize) -> [Vec<f64>; 3] {
    let n = streams[0].len() as f64;
    let mean = |s: &[Vec<f64>]| -> Vec<f64> {
        (0..v).map(|j| s.iter().map(|row| row[j]).sum::<f64>() / n).collect()
    };
    [mean(streams[0]), mean(streams[1]), mean(streams[2])]
}

fn agreement_from_means(means: &[Vec<f64>; 3], v: usize) -> f64 {
    (0..v)
        .map(|j| {
            PAIRS
                .iter()
                .map(|&(a, b)| (means[a][j] - means[b][j]).abs())
                .sum::<f64>()
        })
        .sum::<f64>()
        / v as f64
}

/// `f_h * p_h + f_o * p_o + f_sp * p_sp`, per verb.
pub fn fuse(p_h: &[f64], p_o: &[f64], p_sp: &[f64], fusion: &Fusion) -> Result<Vec<f64>> {
    fusion.check()?;
    if p_o.len() != p_h.len() || p_sp.len() != p_h.len() {
        return Err(Error::Shape("stream predictions differ in length".into()));
    }
    Ok(p_h
        .iter()
        .zip(p_o)
        .zip(p_sp)
        .map(|((h, o), s)| fusion.human * h + fusion.object * o + fusion.spatial * s)
        .collect())
}

/// Frozen stream outputs and label of one validation pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    /// `[human, object, spatial]`.
    pub outputs: [StreamOutput; 3],
    pub det_h: f64,
    pub det_o: f64,
    pub labels: Vec<f64>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedPrediction {
    pub p_h: Vec<f64>,
    pub p_o: Vec<f64>,
    pub p_sp: Vec<f64>,
    pub fused: Vec<f64>,
}

pub fn predict(
    outputs: &[StreamOutput; 3],
    det_h: f64,
    det_o: f64,
    params: &CalibrationParams,
) -> Result<CalibratedPrediction> {
    let [h, o, sp] = params.streams();
    let p_h = calibrate_stream(&outputs[0], h, det_h, det_o)?;
    let p_o = calibrate_stream(&outputs[1], o, det_h, det_o)?;
    let p_sp = calibrate_stream(&outputs[2], sp, det_h, det_o)?;
    let fused = fuse(&p_h, &p_o, &p_sp, &params.fusion)?;
    Ok(CalibratedPrediction {
        p_h,
        p_o,
        p_sp,
        fused,
    })
}

/// Free parameters of the calibration objective. The fusion simplex is
/// `softmax(theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationState {
    pub w: [Vec<f64>; 3],
    pub c: [Vec<f64>; 3],
    pub theta: [f64; 3],
}

impl CalibrationState {
    pub fn from_params(p: &CalibrationParams) -> Self {
        let f = p.fusion.to_array();
        Self {
            w: p.streams().map(|s| s.w.clone()),
            c: p.streams().map(|s| s.c.clone()),
            theta: f.map(|v| v.max(1e-300).ln()),
        }
    }

    pub fn fusion(&self) -> Fusion {
        let f = softmax(&self.theta);
        Fusion::from_array([f[0], f[1], f[2]])
    }

    pub fn to_params(&self, beta: f64, gamma: f64) -> CalibrationParams {
        let scaling = |k: usize| StreamScaling {
            w: self.w[k].clone(),
            c: self.c[k].clone(),
        };
        CalibrationParams {
            human: scaling(0),
            object: scaling(1),
            spatial: scaling(2),
            fusion: self.fusion(),
            beta,
            gamma,
        }
    }

    /// `w` per stream, then `c` per stream, then `theta`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.w
            .iter()
            .chain(self.c.iter())
            .flat_map(|v| v.iter().copied())
            .chain(self.theta)
            .collect()
    }

    pub fn from_vec(values: &[f64], n_verbs: usize) -> Result<Self> {
        if values.len() != 6 * n_verbs + 3 {
            return Err(Error::Shape(format!(
                "{} calibration parameters for {n_verbs} verbs",
                values.len()
            )));
        }
        let block = |k: usize| values[k * n_verbs..(k + 1) * n_verbs].to_vec();
        Ok(Self {
            w: [block(0), block(1), block(2)],
            c: [block(3), block(4), block(5)],
            theta: [values[6 * n_verbs], values[6 * n_verbs + 1], values[6 * n_verbs + 2]],
        })
    }
}

/// Value and gradient (in [`CalibrationState::to_vec`] order) of the
/// calibration objective over `batch`.
pub fn calibration_objective(
    batch: &[&CalibrationSample],
    state: &CalibrationState,
    beta: f64,
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Validation("calibration batch is empty".into()));
    }
    let v = state.w[0].len();
    let fusion = softmax(&state.theta);
    let norm = 1.0 / (n as f64 * v as f64);

    // Forward: calibrated probabilities and the pieces the backward pass needs.
    let mut p = [vec![vec![0.0; v]; n], vec![vec![0.0; v]; n], vec![vec![0.0; v]; n]];
    // dp / d(pre-activation numerator), i.e. det * q (1 - q) / exp(e)
    let mut slope = p.clone();
    let mut loss_streams = 0.0;
    let mut loss_uni = 0.0;
    for (i, sample) in batch.iter().enumerate() {
        if sample.labels.len() != v {
            return Err(Error::Shape(format!("{} labels for {v} verbs", sample.labels.len())));
        }
        let det = sample.det_h * sample.det_o;
        for k in 0..3 {
            let out = &sample.outputs[k];
            if out.s.len() != v || out.e.len() != v {
                return Err(Error::Shape("stream output length".into()));
            }
            for j in 0..v {
                let inv_scale = (-out.e[j]).exp();
                let q = sigmoid((state.w[k][j] * out.s[j] + state.c[k][j]) * inv_scale);
                p[k][i][j] = q * det;
                slope[k][i][j] = det * q * (1.0 - q) * inv_scale;
                loss_streams += bce(p[k][i][j], sample.labels[j]);
            }
        }
        for j in 0..v {
            let fused: f64 = (0..3).map(|k| fusion[k] * p[k][i][j]).sum();
            loss_uni += bce(fused, sample.labels[j]);
        }
    }
    let means = stream_means(&[&p[0], &p[1], &p[2]], v);
    let agree = agreement_from_means(&means, v);
    let loss = beta * loss_streams * norm + gamma * agree + loss_uni * norm;

    // Backward.
    let mut grad_w = [vec![0.0; v], vec![0.0; v], vec![0.0; v]];
    let mut grad_c = grad_w.clone();
    let mut grad_f = [0.0; 3];
    // d L_agree / d p_{k,i,j} = (gamma / V) (1/N) sum over pairs of +-sign(mean diff)
    let mut agree_coef = [vec![0.0; v], vec![0.0; v], vec![0.0; v]];
    for j in 0..v {
        for &(a, b) in &PAIRS {
            let sign = sign(means[a][j] - means[b][j]);
            agree_coef[a][j] += sign;
            agree_coef[b][j] -= sign;
        }
    }
    let agree_scale = gamma / (v as f64 * n as f64);
    for (i, sample) in batch.iter().enumerate() {
        for j in 0..v {
            let y = sample.labels[j];
            let fused: f64 = (0..3).map(|k| fusion[k] * p[k][i][j]).sum();
            let d_fused = bce_dp(fused, y) * norm;
            for k in 0..3 {
                let pk = p[k][i][j];
                grad_f[k] += d_fused * pk;
                let d_p = beta * bce_dp(pk, y) * norm
                    + fusion[k] * d_fused
                    + agree_scale * agree_coef[k][j];
                let d_num = d_p * slope[k][i][j];
                grad_w[k][j] += d_num * sample.outputs[k].s[j];
                grad_c[k][j] += d_num;
            }
        }
    }
    let mut grad_theta = [0.0; 3];
    for (m, g) in grad_theta.iter_mut().enumerate() {
        *g = (0..3)
            .map(|k| grad_f[k] * fusion[k] * (if k == m { 1.0 } else { 0.0 } - fusion[m]))
            .sum();
    }
    let grad: Vec<f64> = grad_w
        .iter()
        .chain(grad_c.iter())
        .flat_map(|g| g.iter().copied())
        .chain(grad_theta)
        .collect();
    Ok((loss, grad))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub beta: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            gamma: 0.1,
            epochs: 2,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFit {
    pub params: CalibrationParams,
    /// Mean batch objective per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Objective terms over a full sample set, for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTerms {
    pub stream_bce: [f64; 3],
    pub agreement: f64,
    pub unified_bce: f64,
}

pub fn calibration_terms(
    samples: &[CalibrationSample],
    params: &CalibrationParams,
) -> Result<CalibrationTerms> {
    if samples.is_empty() {
        return Err(Error::Validation("no samples".into()));
    }
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        preds.push(predict(&s.outputs, s.det_h, s.det_o, params)?);
    }
    let v = samples[0].labels.len() as f64;
    let n = samples.len() as f64;
    let mut stream_bce = [0.0; 3];
    let mut unified_bce = 0.0;
    for (s, p) in samples.iter().zip(&preds) {
        for (j, &y) in s.labels.iter().enumerate() {
            stream_bce[0] += bce(p.p_h[j], y);
            stream_bce[1] += bce(p.p_o[j], y);
            stream_bce[2] += bce(p.p_sp[j], y);
            unified_bce += bce(p.fused[j], y);
        }
    }
    let ph: Vec<Vec<f64>> = preds.iter().map(|p| p.p_h.clone()).collect();
    let po: Vec<Vec<f64>> = preds.iter().map(|p| p.p_o.clone()).collect();
    let psp: Vec<Vec<f64>> = preds.iter().map(|p| p.p_sp.clone()).collect();
    Ok(CalibrationTerms {
        stream_bce: stream_bce.map(|b| b / (n * v)),
        agreement: agreement_loss(&ph, &po, &psp)?,
        unified_bce: unified_bce / (n * v),
    })
}

/// Mini-batch gradient descent on the calibration objective from the
/// identity initialization. Only validation-split samples are accepted.
/// `observe(step, fusion)` sees the fusion weights after every update.
pub fn fit_calibration_observed(
    samples: &[CalibrationSample],
    cfg: &CalibrationConfig,
    mut observe: impl FnMut(usize, &Fusion),
) -> Result<CalibrationFit> {
    if samples.is_empty() {
        return Err(Error::Validation("empty validation set".into()));
    }
    if let Some(bad) = samples.iter().find(|s| s.split != Split::Val) {
        return Err(Error::Validation(format!(
            "calibration must only see validation pairs, got a {:?} pair",
            bad.split
        )));
    }
    let n_verbs = samples[0].labels.len();
    let mut state = CalibrationState::from_params(&CalibrationParams::identity(n_verbs));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&CalibrationSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, grad) = calibration_objective(&batch, &state, cfg.beta, cfg.gamma)?;
            ensure_finite(&grad, "calibration gradient")?;
            let mut flat = state.to_vec();
            flat.iter_mut().zip(&grad).for_each(|(x, g)| *x -= cfg.lr * g);
            state = CalibrationState::from_vec(&flat, n_verbs)?;
            step += 1;
            observe(step, &state.fusion());
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(CalibrationFit {
        params: state.to_params(cfg.beta, cfg.gamma),
        epoch_losses,
    })
}

pub fn fit_calibration(
    samples: &[CalibrationSample],
    cfg: &CalibrationConfig,
) -> Result<CalibrationFit> {
    fit_calibration_observed(samples, cfg, |_, _| {})
}
