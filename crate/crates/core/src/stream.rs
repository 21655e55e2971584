//! Verb-classification streams: a shared rectifier trunk with a logit head
//! `s` and a log-variance head `e`, trained with the aleatoric uncertainty
//! loss, plus the spatial-configuration encoder.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::model::{BBox, Pose2D};
use crate::nn::{sigmoid, Gradients, Mlp};

/// Log-variance outputs are clamped to `[-E_CLAMP, E_CLAMP]` before use.
pub const E_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Human,
    Object,
    Spatial,
}

impl StreamKind {
    pub const ALL: [StreamKind; 3] = [StreamKind::Human, StreamKind::Object, StreamKind::Spatial];

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Human => "human",
            StreamKind::Object => "object",
            StreamKind::Spatial => "spatial",
        }
    }
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StreamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "human" => Ok(StreamKind::Human),
            "object" => Ok(StreamKind::Object),
            "spatial" => Ok(StreamKind::Spatial),
            other => Err(Error::Config(format!("unknown stream `{other}`"))),
        }
    }
}

/// Per-pair stream prediction: verb logits and log-variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamOutput {
    pub s: Vec<f64>,
    pub e: Vec<f64>,
}

/// Box corners and keypoints normalized by the tight union box of the human
/// and object boxes, flattened to `2 * (4 + k)` values.
pub fn encode_spatial(hbox: &BBox, obox: &BBox, pose: &Pose2D) -> Result<Vec<f64>> {
    hbox.validate()?;
    obox.validate()?;
    let u = hbox.union(obox);
    let (w, h) = (u.width(), u.height());
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::Validation(format!("degenerate union box {u}")));
    }
    let mut out = Vec::with_capacity(2 * (4 + pose.len()));
    let mut push = |x: f64, y: f64| {
        out.push((x - u.x1) / w);
        out.push((y - u.y1) / h);
    };
    for b in [hbox, obox] {
        push(b.x1, b.y1);
        push(b.x2, b.y2);
    }
    for &[x, y] in &pose.keypoints {
        push(x, y);
    }
    ensure_finite(&out, "spatial feature")?;
    Ok(out)
}

/// `((sigmoid(s) - y) / exp(e))^2 + e / 2` for one verb.
pub fn uncertainty_loss(s: f64, e: f64, y: f64) -> Result<f64> {
    ensure_finite(&[s, e, y], "uncertainty loss input")?;
    Ok(uncertainty_terms(s, e, y).0)
}

/// Loss value and its partial derivatives in `s` and `e`.
pub(crate) fn uncertainty_terms(s: f64, e: f64, y: f64) -> (f64, f64, f64) {
    let p = sigmoid(s);
    let r = p - y;
    let inv_var = (-2.0 * e).exp();
    let loss = r * r * inv_var + 0.5 * e;
    let ds = 2.0 * r * inv_var * p * (1.0 - p);
    let de = -2.0 * r * r * inv_var + 0.5;
    (loss, ds, de)
}

/// Binary cross-entropy on a logit, stable for large `|s|`; gradient is `sigmoid(s) - y`.
pub(crate) fn bce_with_logit(s: f64, y: f64) -> (f64, f64) {
    let loss = s.max(0.0) - s * y + (-s.abs()).exp().ln_1p();
    (loss, sigmoid(s) - y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub n_verbs: usize,
    /// Attach the log-variance head and train with the uncertainty loss.
    /// When false the stream is trained with logit BCE and reports `e = 0`.
    pub uncertainty: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamModel {
    pub n_verbs: usize,
    pub uncertainty: bool,
    net: Mlp,
}

impl StreamModel {
    pub fn new(spec: &MlpSpec) -> Result<Self> {
        if spec.hidden.is_empty() {
            return Err(Error::Config("stream MLP needs at least one hidden layer".into()));
        }
        if spec.n_verbs == 0 {
            return Err(Error::Config("stream MLP needs at least one verb".into()));
        }
        let heads = if spec.uncertainty { 2 } else { 1 } * spec.n_verbs;
        let mut widths = vec![spec.input_dim];
        widths.extend(&spec.hidden);
        widths.push(heads);
        Ok(Self {
            n_verbs: spec.n_verbs,
            uncertainty: spec.uncertainty,
            net: Mlp::new(&widths, spec.seed)?,
        })
    }

    pub fn from_network(net: Mlp, n_verbs: usize, uncertainty: bool) -> Result<Self> {
        let heads = if uncertainty { 2 } else { 1 } * n_verbs;
        if net.output_dim() != heads {
            return Err(Error::Shape(format!(
                "network has {} outputs, expected {heads}",
                net.output_dim()
            )));
        }
        Ok(Self {
            n_verbs,
            uncertainty,
            net,
        })
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn split(&self, raw: &[f64]) -> StreamOutput {
        let v = self.n_verbs;
        let s = raw[..v].to_vec();
        let e = if self.uncertainty {
            raw[v..2 * v].iter().map(|e| e.clamp(-E_CLAMP, E_CLAMP)).collect()
        } else {
            vec![0.0; v]
        };
        StreamOutput { s, e }
    }

    pub fn forward(&self, x: &[f64]) -> Result<StreamOutput> {
        Ok(self.split(&self.net.forward(x)?))
    }

    /// Mean per-verb training loss and its gradient with respect to the raw
    /// network output.
    pub fn output_loss(&self, raw: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
        let v = self.n_verbs;
        if y.len() != v {
            return Err(Error::Shape(format!("{} labels for {v} verbs", y.len())));
        }
        let scale = 1.0 / v as f64;
        let mut d = vec![0.0; raw.len()];
        let mut total = 0.0;
        for j in 0..v {
            if self.uncertainty {
                let e_raw = raw[v + j];
                let e = e_raw.clamp(-E_CLAMP, E_CLAMP);
                let (l, ds, de) = uncertainty_terms(raw[j], e, y[j]);
                total += l;
                d[j] = ds * scale;
                d[v + j] = if (-E_CLAMP..=E_CLAMP).contains(&e_raw) {
                    de * scale
                } else {
                    0.0
                };
            } else {
                let (l, ds) = bce_with_logit(raw[j], y[j]);
                total += l;
                d[j] = ds * scale;
            }
        }
        Ok((total * scale, d))
    }

    /// Gradient of the mean per-verb loss for one sample.
    pub fn backward(&self, x: &[f64], y: &[f64]) -> Result<(Gradients, f64)> {
        let trace = self.net.forward_trace(x)?;
        let (loss, d) = self.output_loss(trace.output(), y)?;
        let (grads, _) = self.net.backward(&trace, &d);
        Ok((grads, loss))
    }

    /// Mean gradient and mean loss over a batch.
    pub fn batch_gradients(&self, batch: &[(&[f64], &[f64])]) -> Result<(Gradients, f64)> {
        let mut grads = self.net.zero_gradients();
        let mut total = 0.0;
        for (x, y) in batch {
            let trace = self.net.forward_trace(x)?;
            let (loss, d) = self.output_loss(trace.output(), y)?;
            self.net.backward_into(&trace, &d, &mut grads);
            total += loss;
        }
        let n = batch.len().max(1) as f64;
        grads.scale(1.0 / n);
        Ok((grads, total / n))
    }

    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        self.net.sgd_step(grads, lr);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip applied before each step.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 7e-3,
            epochs: 40,
            batch_size: 16,
            seed: 0,
            clip_norm: Some(1.0),
        }
    }
}

/// Mini-batch SGD over `(input, target)` pairs. Sample order is shuffled per
/// epoch from `cfg.seed`, so identical inputs give identical parameters.
/// Returns the mean loss of each epoch.
pub fn train_stream(
    model: &mut StreamModel,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if inputs.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} inputs for {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if inputs.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<(&[f64], &[f64])> = chunk
                .iter()
                .map(|&i| (inputs[i].as_slice(), targets[i].as_slice()))
                .collect();
            let (mut grads, loss) = model.batch_gradients(&batch)?;
            if !grads.is_finite() {
                return Err(Error::NonFinite("stream gradient".into()));
            }
            if let Some(max) = cfg.clip_norm {
                grads.clip_norm(max);
            }
            model.sgd_step(&grads, cfg.lr);
            epoch_loss += loss * chunk.len() as f64;
        }
        history.push(epoch_loss / inputs.len() as f64);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn spatial_hand_example() {
        let pose = Pose2D::new(vec![[1.0, 1.0]]).unwrap();
        let f = encode_spatial(&bx(0.0, 0.0, 2.0, 2.0), &bx(1.0, 1.0, 3.0, 3.0), &pose).unwrap();
        let t = 1.0 / 3.0;
        let expected = [0.0, 0.0, 2.0 * t, 2.0 * t, t, t, 1.0, 1.0, t, t];
        assert_eq!(f.len(), 10);
        for (a, b) in f.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{f:?}");
        }
    }

    #[test]
    fn spatial_union_box_normalizes_to_unit_square() {
        let h = bx(0.0, 0.0, 10.0, 8.0);
        let f = encode_spatial(&h, &bx(2.0, 3.0, 5.0, 6.0), &Pose2D::new(vec![]).unwrap()).unwrap();
        assert_eq!(&f[..4], &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn spatial_translation_invariant() {
        let pose = Pose2D::new(vec![[1.0, 1.5], [0.2, 0.3]]).unwrap();
        let moved = Pose2D::new(vec![[11.0, 11.5], [10.2, 10.3]]).unwrap();
        let a = encode_spatial(&bx(0.0, 0.0, 2.0, 2.0), &bx(1.0, 1.0, 3.0, 3.0), &pose).unwrap();
        let b =
            encode_spatial(&bx(10.0, 10.0, 12.0, 12.0), &bx(11.0, 11.0, 13.0, 13.0), &moved).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_rejects_bad_box() {
        let bad = BBox { x1: 1.0, y1: 0.0, x2: 1.0, y2: 2.0 };
        assert!(encode_spatial(&bad, &bx(0.0, 0.0, 1.0, 1.0), &Pose2D::new(vec![]).unwrap()).is_err());
    }

    #[test]
    fn uncertainty_loss_values() {
        assert_eq!(uncertainty_loss(40.0, 0.0, 1.0).unwrap(), 0.0);
        assert_eq!(uncertainty_loss(0.0, 0.0, 1.0).unwrap(), 0.25);
        let l = uncertainty_loss(0.0, 2f64.ln(), 1.0).unwrap();
        assert!((l - (0.0625 + 0.5 * 2f64.ln())).abs() < 1e-15);
        assert!(uncertainty_loss(f64::NAN, 0.0, 1.0).is_err());
    }

    #[test]
    fn uncertainty_loss_stationary_in_e() {
        // dL/de = 0 where exp(2e) = 4 r^2.
        for s in [-1.0, 0.3, 2.0] {
            let r: f64 = sigmoid(s) - 1.0;
            let e_star = 0.5 * (4.0 * r * r).ln();
            let (_, _, de) = uncertainty_terms(s, e_star, 1.0);
            assert!(de.abs() < 1e-12);
            let l = |e| uncertainty_terms(s, e, 1.0).0;
            assert!(l(e_star) < l(e_star + 0.1) && l(e_star) < l(e_star - 0.1));
        }
    }

    #[test]
    fn uncertainty_loss_monotone() {
        let e = 0.4;
        let residual_loss = |r: f64| uncertainty_terms(0.0, e, 0.5 - r).0;
        assert!(residual_loss(0.3) >= residual_loss(0.1));
        // r = 0: strictly increasing in e
        assert!(uncertainty_terms(0.0, 1.0, 0.5).0 > uncertainty_terms(0.0, 0.5, 0.5).0);
    }

    fn spec(uncertainty: bool) -> MlpSpec {
        MlpSpec {
            input_dim: 3,
            hidden: vec![4],
            n_verbs: 2,
            uncertainty,
            seed: 3,
        }
    }

    #[test]
    fn zero_network_has_finite_gradients() {
        let mut m = StreamModel::new(&spec(true)).unwrap();
        for i in 0..m.network().n_params() {
            *m.network_mut().parameter_mut(i) = 0.0;
        }
        let (g, loss) = m.backward(&[1.0, -1.0, 0.5], &[1.0, 0.0]).unwrap();
        assert!(g.is_finite());
        assert_eq!(loss, 0.25);
    }

    #[test]
    fn outputs_have_verb_length() {
        for u in [true, false] {
            let m = StreamModel::new(&spec(u)).unwrap();
            let out = m.forward(&[0.1, 0.2, 0.3]).unwrap();
            assert_eq!(out.s.len(), 2);
            assert_eq!(out.e.len(), 2);
        }
        let m = StreamModel::new(&spec(true)).unwrap();
        assert!(m.forward(&[0.1]).is_err());
        assert!(m.backward(&[0.1, 0.2, 0.3], &[1.0]).is_err());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let inputs: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let t = i as f64 / 40.0;
                vec![t, 1.0 - t, (i % 2) as f64]
            })
            .collect();
        let targets: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![(i % 2) as f64, (i >= 20) as u8 as f64])
            .collect();
        let cfg = TrainConfig {
            lr: 0.5,
            epochs: 60,
            batch_size: 8,
            seed: 9,
            clip_norm: None,
        };
        let mut a = StreamModel::new(&spec(true)).unwrap();
        let mut b = StreamModel::new(&spec(true)).unwrap();
        let ha = train_stream(&mut a, &inputs, &targets, &cfg).unwrap();
        let hb = train_stream(&mut b, &inputs, &targets, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert!(ha.last().unwrap() < &ha[0]);
    }
}
