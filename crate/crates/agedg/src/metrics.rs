//! Losses and evaluation metrics.
//!
//! The training objective combines cross-entropy over the emotion classes
//! with three continuous-affect terms (MSE, Pearson correlation,
//! concordance correlation), convexly reweighted by shake-shake
//! coefficients redrawn every step:
//!
//! `L = L_CE + (a/s)·L_MSE + (b/s)·L_PCC + (g/s)·L_CCC`, `s = a+b+g`.
//!
//! Correlation statistics use population (divide-by-n) moments
//! throughout. The raw `pcc`/`ccc` functions refuse near-constant inputs;
//! the batch-level loss functions substitute correlation 0 there (the
//! maximal loss contribution) and log a warning, so training survives the
//! constant-output phase without hiding the issue.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};

use crate::data::{EmotionClass, Sample, EMOTION_CLASS_COUNT};
use crate::error::{AgedgError, Result};
use crate::nn::Scalar;

/// Variance floor below which a correlation is treated as undefined.
pub const VARIANCE_EPSILON: f64 = 1e-8;

/// Convex loss-term weights, each drawn from the open interval (0, 1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShakeWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl ShakeWeights {
    /// Deterministic equal weighting (each normalized weight exactly 1/3);
    /// used by model selection and evaluation to keep scores stochastic-free.
    pub fn uniform() -> ShakeWeights {
        ShakeWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }

    pub fn normalized(&self) -> (f64, f64, f64) {
        let s = self.alpha + self.beta + self.gamma;
        (self.alpha / s, self.beta / s, self.gamma / s)
    }
}

/// Draws the three weights independently from the open unit interval.
pub fn sample_shake_weights(rng: &mut impl Rng) -> ShakeWeights {
    ShakeWeights {
        alpha: rng.sample(Open01),
        beta: rng.sample(Open01),
        gamma: rng.sample(Open01),
    }
}

/// Model outputs for a batch: class logits plus bounded valence/arousal.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBatch {
    pub logits: Array2<f64>,
    pub valence: Array1<f64>,
    pub arousal: Array1<f64>,
}

impl PredictionBatch {
    pub fn len(&self) -> usize {
        self.logits.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Emotion targets, either plain class labels or convex soft rows (the
/// latter arise from mixup's label mixing).
#[derive(Clone, Debug, PartialEq)]
pub enum EmotionTargets {
    Hard(Vec<EmotionClass>),
    Soft(Array2<f64>),
}

impl EmotionTargets {
    pub fn len(&self) -> usize {
        match self {
            EmotionTargets::Hard(v) => v.len(),
            EmotionTargets::Soft(m) => m.nrows(),
        }
    }

    /// Dense soft rows; one-hot for hard labels.
    pub fn soft_rows(&self) -> Array2<f64> {
        match self {
            EmotionTargets::Soft(m) => m.clone(),
            EmotionTargets::Hard(v) => {
                let mut m = Array2::zeros((v.len(), EMOTION_CLASS_COUNT));
                for (i, c) in v.iter().enumerate() {
                    m[[i, c.index()]] = 1.0;
                }
                m
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelBatch {
    pub emotion: EmotionTargets,
    pub valence: Array1<f64>,
    pub arousal: Array1<f64>,
}

impl LabelBatch {
    pub fn len(&self) -> usize {
        self.emotion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> LabelBatch {
        let mut emotion = Vec::new();
        let mut valence = Vec::new();
        let mut arousal = Vec::new();
        for s in samples {
            emotion.push(s.annotation.emotion);
            valence.push(s.annotation.valence);
            arousal.push(s.annotation.arousal);
        }
        LabelBatch {
            emotion: EmotionTargets::Hard(emotion),
            valence: Array1::from(valence),
            arousal: Array1::from(arousal),
        }
    }

    /// Convex combination `lambda * a + (1 - lambda) * b`; emotion labels
    /// become soft rows.
    pub fn mix(a: &LabelBatch, b: &LabelBatch, lambda: f64) -> LabelBatch {
        let qa = a.emotion.soft_rows();
        let qb = b.emotion.soft_rows();
        LabelBatch {
            emotion: EmotionTargets::Soft(&qa * lambda + &qb * (1.0 - lambda)),
            valence: &a.valence * lambda + &b.valence * (1.0 - lambda),
            arousal: &a.arousal * lambda + &b.arousal * (1.0 - lambda),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.valence.len() != n || self.arousal.len() != n {
            return Err(AgedgError::ShapeMismatch {
                context: "label batch".into(),
                detail: format!(
                    "emotion {} vs valence {} vs arousal {}",
                    n,
                    self.valence.len(),
                    self.arousal.len()
                ),
            });
        }
        for v in self.valence.iter().chain(self.arousal.iter()) {
            if !v.is_finite() || !(-1.0..=1.0).contains(v) {
                return Err(AgedgError::Config(format!("label value {v} outside [-1, 1]")));
            }
        }
        if let EmotionTargets::Soft(m) = &self.emotion {
            if m.ncols() != EMOTION_CLASS_COUNT {
                return Err(AgedgError::ShapeMismatch {
                    context: "soft labels".into(),
                    detail: format!("{} columns, want {EMOTION_CLASS_COUNT}", m.ncols()),
                });
            }
            for (i, row) in m.rows().into_iter().enumerate() {
                let sum: f64 = row.sum();
                if row.iter().any(|&q| q < 0.0) || (sum - 1.0).abs() > 1e-6 {
                    return Err(AgedgError::Config(format!(
                        "soft label row {i} invalid (sum {sum})"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_same_len(context: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(AgedgError::ShapeMismatch {
            context: context.into(),
            detail: format!("lengths {a} and {b}"),
        });
    }
    Ok(())
}

/// Mean squared error.
pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_same_len("mse", y.len(), yhat.len())?;
    if y.is_empty() {
        return Err(AgedgError::Config("mse of empty vectors".into()));
    }
    let n = y.len() as f64;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

struct Moments {
    mean_y: f64,
    mean_x: f64,
    syy: f64,
    sxx: f64,
    sxy: f64,
}

fn moments(y: &[f64], x: &[f64]) -> Moments {
    let n = y.len() as f64;
    let mean_y = y.iter().sum::<f64>() / n;
    let mean_x = x.iter().sum::<f64>() / n;
    let mut syy = 0.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (a, b) in y.iter().zip(x) {
        let cy = a - mean_y;
        let cx = b - mean_x;
        syy += cy * cy;
        sxx += cx * cx;
        sxy += cy * cx;
    }
    Moments {
        mean_y,
        mean_x,
        syy: syy / n,
        sxx: sxx / n,
        sxy: sxy / n,
    }
}

/// Population Pearson correlation. Errors when either input is (near-)
/// constant; see [`VARIANCE_EPSILON`].
pub fn pcc(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_same_len("pcc", y.len(), yhat.len())?;
    if y.len() < 2 {
        return Err(AgedgError::Config("pcc needs at least 2 points".into()));
    }
    let m = moments(y, yhat);
    let denom = m.syy * m.sxx;
    if m.syy <= VARIANCE_EPSILON || m.sxx <= VARIANCE_EPSILON {
        return Err(AgedgError::DegenerateVariance {
            context: "pcc".into(),
            value: m.syy.min(m.sxx),
            threshold: VARIANCE_EPSILON,
        });
    }
    Ok(m.sxy / denom.sqrt())
}

/// Population concordance correlation:
/// `2·cov / (var(y) + var(yhat) + (mean(y) - mean(yhat))^2)`.
pub fn ccc(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_same_len("ccc", y.len(), yhat.len())?;
    if y.len() < 2 {
        return Err(AgedgError::Config("ccc needs at least 2 points".into()));
    }
    let m = moments(y, yhat);
    let gap = m.mean_y - m.mean_x;
    let denom = m.syy + m.sxx + gap * gap;
    if denom <= VARIANCE_EPSILON {
        return Err(AgedgError::DegenerateVariance {
            context: "ccc".into(),
            value: denom,
            threshold: VARIANCE_EPSILON,
        });
    }
    Ok(2.0 * m.sxy / denom)
}

/// Training/evaluation wrapper: a degenerate correlation becomes 0 (the
/// maximal loss contribution) with a logged warning instead of an error.
pub fn pcc_or_zero(y: &[f64], yhat: &[f64]) -> Result<f64> {
    match pcc(y, yhat) {
        Ok(v) => Ok(v),
        Err(AgedgError::DegenerateVariance { .. }) => {
            log::warn!("pcc: degenerate variance, substituting correlation 0");
            Ok(0.0)
        }
        Err(e) => Err(e),
    }
}

/// See [`pcc_or_zero`].
pub fn ccc_or_zero(y: &[f64], yhat: &[f64]) -> Result<f64> {
    match ccc(y, yhat) {
        Ok(v) => Ok(v),
        Err(AgedgError::DegenerateVariance { .. }) => {
            log::warn!("ccc: degenerate variance, substituting correlation 0");
            Ok(0.0)
        }
        Err(e) => Err(e),
    }
}

/// The three continuous-affect loss terms over a batch:
/// `l_mse = mse(val) + mse(ar)`, `l_pcc = 1 - (pcc(val) + pcc(ar)) / 2`,
/// `l_ccc = 1 - (ccc(val) + ccc(ar)) / 2`. Degenerate correlations follow
/// the substitute-zero rule.
pub fn loss_continuous(pred: &PredictionBatch, labels: &LabelBatch) -> Result<(f64, f64, f64)> {
    check_same_len("loss_continuous", pred.len(), labels.len())?;
    let yv = labels.valence.as_slice().unwrap();
    let ya = labels.arousal.as_slice().unwrap();
    let pv = pred.valence.as_slice().unwrap();
    let pa = pred.arousal.as_slice().unwrap();
    let l_mse = mse(yv, pv)? + mse(ya, pa)?;
    let l_pcc = 1.0 - (pcc_or_zero(yv, pv)? + pcc_or_zero(ya, pa)?) / 2.0;
    let l_ccc = 1.0 - (ccc_or_zero(yv, pv)? + ccc_or_zero(ya, pa)?) / 2.0;
    Ok((l_mse, l_pcc, l_ccc))
}

/// Mean cross-entropy between logits and (possibly soft) class targets,
/// stabilized by per-row max subtraction.
pub fn cross_entropy(logits: &Array2<f64>, targets: &EmotionTargets) -> Result<f64> {
    let core = cross_entropy_core(logits, targets)?;
    Ok(core.0)
}

/// Argmax-class accuracy; ties resolve to the lowest class index.
/// Defined for hard labels only.
pub fn accuracy(pred: &PredictionBatch, labels: &LabelBatch) -> Result<f64> {
    let classes = match &labels.emotion {
        EmotionTargets::Hard(v) => v,
        EmotionTargets::Soft(_) => {
            return Err(AgedgError::Config(
                "accuracy requires hard labels, got soft rows".into(),
            ))
        }
    };
    check_same_len("accuracy", pred.len(), classes.len())?;
    if classes.is_empty() {
        return Err(AgedgError::Config("accuracy of an empty batch".into()));
    }
    let mut correct = 0usize;
    for (row, label) in pred.logits.rows().into_iter().zip(classes) {
        let mut best = 0usize;
        for k in 1..row.len() {
            if row[k] > row[best] {
                best = k;
            }
        }
        if best == label.index() {
            correct += 1;
        }
    }
    Ok(correct as f64 / classes.len() as f64)
}

/// Loss values produced alongside a gradient or diagnostic record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub l_mse: f64,
    pub l_pcc: f64,
    pub l_ccc: f64,
    pub total: f64,
}

/// Composite training loss under the given shake weights.
pub fn composite_loss(pred: &PredictionBatch, labels: &LabelBatch, w: &ShakeWeights) -> Result<f64> {
    Ok(composite_loss_breakdown(pred, labels, w)?.total)
}

pub fn composite_loss_breakdown(
    pred: &PredictionBatch,
    labels: &LabelBatch,
    w: &ShakeWeights,
) -> Result<LossBreakdown> {
    let ce = cross_entropy(&pred.logits, &labels.emotion)?;
    let (l_mse, l_pcc, l_ccc) = loss_continuous(pred, labels)?;
    let (wa, wb, wc) = w.normalized();
    Ok(LossBreakdown {
        ce,
        l_mse,
        l_pcc,
        l_ccc,
        total: ce + wa * l_mse + wb * l_pcc + wc * l_ccc,
    })
}

/// Gradient of [`composite_loss`] with respect to every prediction entry.
#[derive(Clone, Debug)]
pub struct PredictionGrad {
    pub logits: Array2<f64>,
    pub valence: Array1<f64>,
    pub arousal: Array1<f64>,
}

pub fn composite_loss_grad(
    pred: &PredictionBatch,
    labels: &LabelBatch,
    w: &ShakeWeights,
) -> Result<(LossBreakdown, PredictionGrad)> {
    let out = composite_loss_core(&pred.logits, &pred.valence, &pred.arousal, labels, w)?;
    Ok((
        out.breakdown,
        PredictionGrad {
            logits: out.d_logits,
            valence: out.d_valence,
            arousal: out.d_arousal,
        },
    ))
}

// ---------------------------------------------------------------------------
// Generic value-and-gradient core. Instantiated at f64 for training and at
// Dual for exact Hessian-vector products, so every loss derivative below is
// written once.

pub(crate) struct LossCoreOut<S> {
    pub total: S,
    pub breakdown: LossBreakdown,
    pub d_logits: Array2<S>,
    pub d_valence: Array1<S>,
    pub d_arousal: Array1<S>,
}

fn cross_entropy_core<S: Scalar>(logits: &Array2<S>, targets: &EmotionTargets) -> Result<(f64, S, Array2<S>)> {
    let n = logits.nrows();
    check_same_len("cross_entropy", n, targets.len())?;
    if n == 0 {
        return Err(AgedgError::Config("cross_entropy of an empty batch".into()));
    }
    if logits.ncols() != EMOTION_CLASS_COUNT {
        return Err(AgedgError::ShapeMismatch {
            context: "cross_entropy".into(),
            detail: format!("{} logit columns, want {EMOTION_CLASS_COUNT}", logits.ncols()),
        });
    }
    let q = targets.soft_rows();
    let inv_n = S::from_f64(1.0 / n as f64);
    let mut total = S::zero();
    let mut grad = Array2::zeros(logits.raw_dim());
    for i in 0..n {
        let row = logits.row(i);
        // Max-subtraction constant: drops out of the value exactly and
        // carries no derivative, so a plain f64 is correct here.
        let m = row.iter().map(|z| z.value()).fold(f64::NEG_INFINITY, f64::max);
        let m = S::from_f64(m);
        let mut sum_exp = S::zero();
        for &z in row.iter() {
            sum_exp += (z - m).exp();
        }
        let lse = m + sum_exp.ln();
        let mut row_loss = lse;
        for (k, &z) in row.iter().enumerate() {
            row_loss -= S::from_f64(q[[i, k]]) * z;
        }
        total += row_loss * inv_n;
        for (k, &z) in row.iter().enumerate() {
            let softmax_k = (z - lse).exp();
            grad[[i, k]] = (softmax_k - S::from_f64(q[[i, k]])) * inv_n;
        }
    }
    Ok((total.value(), total, grad))
}

struct ContCore<S> {
    value: S,
    grad: Array1<S>,
}

/// PCC of labels `y` (constants) against predictions `x`, with gradient.
/// Returns None when a variance is degenerate (substitute-zero rule).
fn pcc_core<S: Scalar>(y: &[f64], x: &Array1<S>) -> Option<ContCore<S>> {
    let n = y.len();
    let nf = S::from_f64(n as f64);
    let mean_y = y.iter().sum::<f64>() / n as f64;
    let mut mean_x = S::zero();
    for &v in x.iter() {
        mean_x += v;
    }
    mean_x = mean_x / nf;

    let cy: Vec<f64> = y.iter().map(|v| v - mean_y).collect();
    let cx: Vec<S> = x.iter().map(|&v| v - mean_x).collect();
    let syy = cy.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let mut sxx = S::zero();
    let mut sxy = S::zero();
    for i in 0..n {
        sxx += cx[i] * cx[i];
        sxy += S::from_f64(cy[i]) * cx[i];
    }
    sxx = sxx / nf;
    sxy = sxy / nf;

    if syy <= VARIANCE_EPSILON || sxx.value() <= VARIANCE_EPSILON {
        return None;
    }
    let denom = (sxx * S::from_f64(syy)).sqrt();
    let value = sxy / denom;
    // d pcc / d x_i = (cy_i - (sxy/sxx)·cx_i) / (n·sqrt(sxx·syy))
    let ratio = sxy / sxx;
    let scale = S::one() / (nf * denom);
    let grad = Array1::from_iter(
        (0..n).map(|i| (S::from_f64(cy[i]) - ratio * cx[i]) * scale),
    );
    Some(ContCore { value, grad })
}

/// CCC of labels `y` against predictions `x`, with gradient. None on a
/// degenerate denominator.
fn ccc_core<S: Scalar>(y: &[f64], x: &Array1<S>) -> Option<ContCore<S>> {
    let n = y.len();
    let nf = S::from_f64(n as f64);
    let mean_y = y.iter().sum::<f64>() / n as f64;
    let mut mean_x = S::zero();
    for &v in x.iter() {
        mean_x += v;
    }
    mean_x = mean_x / nf;

    let cy: Vec<f64> = y.iter().map(|v| v - mean_y).collect();
    let cx: Vec<S> = x.iter().map(|&v| v - mean_x).collect();
    let syy = cy.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let mut sxx = S::zero();
    let mut sxy = S::zero();
    for i in 0..n {
        sxx += cx[i] * cx[i];
        sxy += S::from_f64(cy[i]) * cx[i];
    }
    sxx = sxx / nf;
    sxy = sxy / nf;

    let gap = mean_x - S::from_f64(mean_y);
    let denom = sxx + S::from_f64(syy) + gap * gap;
    if denom.value() <= VARIANCE_EPSILON {
        return None;
    }
    let two = S::from_f64(2.0);
    let value = two * sxy / denom;
    // d ccc / d x_i = (2/(n·D))·cy_i - (2c/(n·D))·(cx_i + gap)
    let scale = two / (nf * denom);
    let grad = Array1::from_iter(
        (0..n).map(|i| scale * (S::from_f64(cy[i]) - value * (cx[i] + gap))),
    );
    Some(ContCore { value, grad })
}

fn mse_core<S: Scalar>(y: &[f64], x: &Array1<S>) -> ContCore<S> {
    let n = y.len();
    let inv_n = S::from_f64(1.0 / n as f64);
    let two = S::from_f64(2.0);
    let mut value = S::zero();
    let mut grad = Array1::zeros(n);
    for i in 0..n {
        let diff = x[i] - S::from_f64(y[i]);
        value += diff * diff * inv_n;
        grad[i] = two * diff * inv_n;
    }
    ContCore { value, grad }
}

/// One affect channel's contribution and gradient under the substitute-zero
/// rule for degenerate correlations.
struct ChannelOut<S> {
    mse: ContCore<S>,
    pcc: Option<ContCore<S>>,
    ccc: Option<ContCore<S>>,
}

fn channel_core<S: Scalar>(name: &str, y: &Array1<f64>, x: &Array1<S>) -> ChannelOut<S> {
    let ys = y.as_slice().expect("label arrays are contiguous");
    let pcc = pcc_core(ys, x);
    if pcc.is_none() {
        log::warn!("{name}: degenerate variance in pcc, substituting correlation 0");
    }
    let ccc = ccc_core(ys, x);
    if ccc.is_none() {
        log::warn!("{name}: degenerate variance in ccc, substituting correlation 0");
    }
    ChannelOut {
        mse: mse_core(ys, x),
        pcc,
        ccc,
    }
}

pub(crate) fn composite_loss_core<S: Scalar>(
    logits: &Array2<S>,
    valence: &Array1<S>,
    arousal: &Array1<S>,
    labels: &LabelBatch,
    w: &ShakeWeights,
) -> Result<LossCoreOut<S>> {
    let n = logits.nrows();
    check_same_len("composite_loss", n, labels.len())?;
    check_same_len("composite_loss valence", valence.len(), n)?;
    check_same_len("composite_loss arousal", arousal.len(), n)?;
    if n < 2 {
        return Err(AgedgError::Config(
            "composite_loss needs a batch of at least 2".into(),
        ));
    }

    let (ce_val, ce, d_ce) = cross_entropy_core(logits, &labels.emotion)?;
    let val = channel_core("valence", &labels.valence, valence);
    let ar = channel_core("arousal", &labels.arousal, arousal);

    let (wa, wb, wc) = w.normalized();
    let (wa_s, wb_s, wc_s) = (S::from_f64(wa), S::from_f64(wb), S::from_f64(wc));
    let half = S::from_f64(0.5);
    let one = S::one();

    let l_mse = val.mse.value + ar.mse.value;
    let corr_value = |c: &Option<ContCore<S>>| c.as_ref().map_or(S::zero(), |v| v.value);
    let l_pcc = one - (corr_value(&val.pcc) + corr_value(&ar.pcc)) * half;
    let l_ccc = one - (corr_value(&val.ccc) + corr_value(&ar.ccc)) * half;

    let total = ce + wa_s * l_mse + wb_s * l_pcc + wc_s * l_ccc;

    // d total / d valence_i = wa·d mse - (wb/2)·d pcc - (wc/2)·d ccc.
    let assemble = |ch: &ChannelOut<S>| -> Array1<S> {
        let mut g: Array1<S> = ch.mse.grad.mapv(|v| wa_s * v);
        if let Some(p) = &ch.pcc {
            let c = wb_s * half;
            ndarray::Zip::from(&mut g).and(&p.grad).for_each(|a, &d| *a -= c * d);
        }
        if let Some(p) = &ch.ccc {
            let c = wc_s * half;
            ndarray::Zip::from(&mut g).and(&p.grad).for_each(|a, &d| *a -= c * d);
        }
        g
    };

    Ok(LossCoreOut {
        total,
        breakdown: LossBreakdown {
            ce: ce_val,
            l_mse: l_mse.value(),
            l_pcc: l_pcc.value(),
            l_ccc: l_ccc.value(),
            total: total.value(),
        },
        d_logits: d_ce,
        d_valence: assemble(&val),
        d_arousal: assemble(&ar),
    })
}

// ---------------------------------------------------------------------------
// Maximum mean discrepancy.

/// Default kernel bandwidths for the MMD regulariser.
pub const DEFAULT_MMD_BANDWIDTHS: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];

fn multi_kernel(sq_dist: f64, bandwidths: &[f64]) -> f64 {
    bandwidths
        .iter()
        .map(|s| (-sq_dist / (2.0 * s * s)).exp())
        .sum()
}

fn mean_cross_kernel(x: &Array2<f64>, y: &Array2<f64>, bandwidths: &[f64]) -> f64 {
    let (n, m) = (x.nrows(), y.nrows());
    let mut total = 0.0;
    for i in 0..n {
        let xi = x.row(i);
        for j in 0..m {
            let sq: f64 = xi
                .iter()
                .zip(y.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += multi_kernel(sq, bandwidths);
        }
    }
    total / (n * m) as f64
}

/// Biased (V-statistic) squared MMD with a sum-of-Gaussians kernel.
/// Identical inputs give exactly 0 because the three kernel means cancel
/// term for term.
pub fn mmd_squared(x: &Array2<f64>, y: &Array2<f64>, bandwidths: &[f64]) -> Result<f64> {
    if bandwidths.is_empty() {
        return Err(AgedgError::Config("mmd_squared needs at least one bandwidth".into()));
    }
    if bandwidths.iter().any(|&s| !(s > 0.0)) {
        return Err(AgedgError::Config("mmd bandwidths must be positive".into()));
    }
    if x.nrows() < 2 || y.nrows() < 2 {
        return Err(AgedgError::Config("mmd_squared needs at least 2 rows per side".into()));
    }
    if x.ncols() != y.ncols() {
        return Err(AgedgError::ShapeMismatch {
            context: "mmd_squared".into(),
            detail: format!("feature widths {} and {}", x.ncols(), y.ncols()),
        });
    }
    let kxx = mean_cross_kernel(x, x, bandwidths);
    let kyy = mean_cross_kernel(y, y, bandwidths);
    let kxy = mean_cross_kernel(x, y, bandwidths);
    Ok(kxx + kyy - 2.0 * kxy)
}

/// [`mmd_squared`] plus its gradient with respect to every row of both
/// inputs.
pub fn mmd_squared_with_grad(
    x: &Array2<f64>,
    y: &Array2<f64>,
    bandwidths: &[f64],
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let value = mmd_squared(x, y, bandwidths)?;
    let (n, m) = (x.nrows(), y.nrows());
    let d = x.ncols();
    let mut dx = Array2::zeros((n, d));
    let mut dy = Array2::zeros((m, d));

    // d k(a,b) / d a = sum_s exp(-|a-b|^2 / (2 s^2)) * (b - a) / s^2
    let add_pair_grad = |a: ndarray::ArrayView1<f64>,
                             b: ndarray::ArrayView1<f64>,
                             mut ga: ndarray::ArrayViewMut1<f64>,
                             scale: f64| {
        let sq: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
        for s in bandwidths {
            let k = (-sq / (2.0 * s * s)).exp();
            let c = scale * k / (s * s);
            for t in 0..d {
                ga[t] += c * (b[t] - a[t]);
            }
        }
    };

    // Within-X term: each unordered pair contributes twice via symmetry.
    let sxx = 2.0 / (n * n) as f64;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            add_pair_grad(x.row(i), x.row(j), dx.row_mut(i), sxx);
        }
    }
    let syy = 2.0 / (m * m) as f64;
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            add_pair_grad(y.row(i), y.row(j), dy.row_mut(i), syy);
        }
    }
    // Cross term weighs each ordered pair by -2/(n m), hitting both sides.
    let sxy = -2.0 / (n * m) as f64;
    for i in 0..n {
        for j in 0..m {
            add_pair_grad(x.row(i), y.row(j), dx.row_mut(i), sxy);
            add_pair_grad(y.row(j), x.row(i), dy.row_mut(j), sxy);
        }
    }
    Ok((value, dx, dy))
}

/// Mean pairwise squared MMD between the rows-by-domain feature blocks;
/// a convenience used by diagnostics and tests.
pub fn mean_pairwise_mmd(blocks: &[Array2<f64>], bandwidths: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..blocks.len() {
        for j in i + 1..blocks.len() {
            total += mmd_squared(&blocks[i], &blocks[j], bandwidths)?;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(AgedgError::Config("mean_pairwise_mmd needs at least two blocks".into()));
    }
    Ok(total / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{array, Axis};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_hand_values() {
        assert_eq!(mse(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(mse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 6.0]).unwrap(), 3.0);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn pcc_hand_values() {
        assert_relative_eq!(pcc(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(pcc(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap(), -1.0, epsilon = 1e-14);
        assert_relative_eq!(
            pcc(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap(),
            0.8,
            epsilon = 1e-14
        );
        assert!(matches!(
            pcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(AgedgError::DegenerateVariance { .. })
        ));
    }

    #[test]
    fn ccc_hand_values() {
        let y = [0.3, -0.2, 0.9, 0.1];
        assert_relative_eq!(ccc(&y, &y).unwrap(), 1.0, epsilon = 1e-14);
        // cov = 4/3, var(y) = 2/3, var(x) = 8/3, mean gap = 2:
        // 2*(4/3) / (2/3 + 8/3 + 4) = (8/3)/(22/3) = 4/11.
        assert_relative_eq!(
            ccc(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(),
            4.0 / 11.0,
            epsilon = 1e-12
        );
        // Reversal is perfectly anti-concordant: cov = -2/3, both vars
        // 2/3, mean gap 0, so 2*(-2/3) / (2/3 + 2/3) = -1.
        assert_relative_eq!(
            ccc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(),
            -1.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn ccc_population_vs_sample_moments_pinned() {
        // Divide-by-n is load-bearing: with divide-by-(n-1) moments the
        // [1,2,3] vs [2,4,6] value would be 4/9 instead of 4/11.
        let v = ccc(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((v - 4.0 / 11.0).abs() < 1e-12);
        assert!((v - 4.0 / 9.0).abs() > 0.07);
    }

    #[test]
    fn lenient_wrappers_substitute_zero() {
        let constant = [0.5, 0.5, 0.5];
        let varying = [0.1, 0.9, 0.4];
        assert_eq!(pcc_or_zero(&varying, &constant).unwrap(), 0.0);
        assert_eq!(ccc_or_zero(&constant, &constant).unwrap(), 0.0);
        assert!(pcc_or_zero(&varying, &[0.1]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let logits = Array2::zeros((4, 8));
        let hard = EmotionTargets::Hard(vec![EmotionClass::Happy; 4]);
        assert_relative_eq!(cross_entropy(&logits, &hard).unwrap(), (8.0f64).ln(), epsilon = 1e-12);

        let mut dominant = Array2::zeros((2, 8));
        dominant[[0, 3]] = 30.0;
        dominant[[1, 0]] = 30.0;
        let labels = EmotionTargets::Hard(vec![EmotionClass::Surprise, EmotionClass::Neutral]);
        assert!(cross_entropy(&dominant, &labels).unwrap() < 1e-9);

        let mut soft = Array2::zeros((1, 8));
        soft[[0, 1]] = 0.5;
        soft[[0, 2]] = 0.5;
        let logits1 = Array2::zeros((1, 8));
        assert_relative_eq!(
            cross_entropy(&logits1, &EmotionTargets::Soft(soft)).unwrap(),
            (8.0f64).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn shake_weights_normalize_and_reproduce() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = sample_shake_weights(&mut rng);
        let (a, b, c) = w.normalized();
        assert!((a + b + c - 1.0).abs() <= 2.0 * f64::EPSILON);
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(w, sample_shake_weights(&mut rng2));
        for v in [w.alpha, w.beta, w.gamma] {
            assert!(v > 0.0 && v < 1.0);
        }
        let (ua, ub, uc) = ShakeWeights::uniform().normalized();
        assert_eq!((ua, ub, uc), (ua, ua, ua));
        assert_relative_eq!(ub + uc + ua, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn accuracy_tie_breaks_to_lowest_index() {
        let pred = PredictionBatch {
            logits: Array2::zeros((2, 8)),
            valence: Array1::zeros(2),
            arousal: Array1::zeros(2),
        };
        let all_neutral = LabelBatch {
            emotion: EmotionTargets::Hard(vec![EmotionClass::Neutral; 2]),
            valence: Array1::zeros(2),
            arousal: Array1::zeros(2),
        };
        assert_eq!(accuracy(&pred, &all_neutral).unwrap(), 1.0);

        let soft = LabelBatch {
            emotion: EmotionTargets::Soft(Array2::from_elem((2, 8), 0.125)),
            valence: Array1::zeros(2),
            arousal: Array1::zeros(2),
        };
        assert!(accuracy(&pred, &soft).is_err());
    }

    #[test]
    fn accuracy_fraction() {
        let mut logits = Array2::zeros((4, 8));
        logits[[0, 1]] = 5.0;
        logits[[1, 2]] = 5.0;
        logits[[2, 2]] = 5.0;
        logits[[3, 7]] = 5.0;
        let pred = PredictionBatch {
            logits,
            valence: Array1::zeros(4),
            arousal: Array1::zeros(4),
        };
        let labels = LabelBatch {
            emotion: EmotionTargets::Hard(vec![
                EmotionClass::Happy,
                EmotionClass::Sad,
                EmotionClass::Sad,
                EmotionClass::Neutral,
            ]),
            valence: Array1::zeros(4),
            arousal: Array1::zeros(4),
        };
        assert_eq!(accuracy(&pred, &labels).unwrap(), 0.75);
    }

    fn random_batch(n: usize, seed: u64) -> (PredictionBatch, LabelBatch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = PredictionBatch {
            logits: Array2::from_shape_fn((n, 8), |_| rng.random_range(-2.0..2.0)),
            valence: Array1::from_shape_fn(n, |_| rng.random_range(-0.99..0.99)),
            arousal: Array1::from_shape_fn(n, |_| rng.random_range(-0.99..0.99)),
        };
        let labels = LabelBatch {
            emotion: EmotionTargets::Hard(
                (0..n)
                    .map(|_| EmotionClass::from_index(rng.random_range(0..8)).unwrap())
                    .collect(),
            ),
            valence: Array1::from_shape_fn(n, |_| rng.random_range(-0.99..0.99)),
            arousal: Array1::from_shape_fn(n, |_| rng.random_range(-0.99..0.99)),
        };
        (pred, labels)
    }

    #[test]
    fn loss_continuous_perfect_and_negated() {
        let (mut pred, labels) = random_batch(16, 3);
        pred.valence = labels.valence.clone();
        pred.arousal = labels.arousal.clone();
        let (l_mse, l_pcc, l_ccc) = loss_continuous(&pred, &labels).unwrap();
        assert_relative_eq!(l_mse, 0.0, epsilon = 1e-14);
        assert_relative_eq!(l_pcc, 0.0, epsilon = 1e-12);
        assert_relative_eq!(l_ccc, 0.0, epsilon = 1e-12);

        // Zero-mean labels, predictions exactly negated: both PCC terms -1.
        let mut labels2 = labels.clone();
        let center = |v: &Array1<f64>| {
            let m = v.mean().unwrap();
            v.mapv(|x| x - m)
        };
        labels2.valence = center(&labels.valence);
        labels2.arousal = center(&labels.arousal);
        let pred2 = PredictionBatch {
            logits: pred.logits.clone(),
            valence: labels2.valence.mapv(|v| -v),
            arousal: labels2.arousal.mapv(|v| -v),
        };
        let (_, l_pcc2, _) = loss_continuous(&pred2, &labels2).unwrap();
        assert_relative_eq!(l_pcc2, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let (pred, labels) = random_batch(8, 11);
        let w = ShakeWeights {
            alpha: 0.3,
            beta: 0.9,
            gamma: 0.4,
        };
        let (_, grad) = composite_loss_grad(&pred, &labels, &w).unwrap();
        let h = 1e-6;
        let eval = |p: &PredictionBatch| composite_loss(p, &labels, &w).unwrap();
        for idx in [(0usize, 0usize), (3, 5), (7, 7)] {
            let mut pp = pred.clone();
            pp.logits[idx] += h;
            let mut pm = pred.clone();
            pm.logits[idx] -= h;
            let fd = (eval(&pp) - eval(&pm)) / (2.0 * h);
            assert_relative_eq!(grad.logits[idx], fd, max_relative = 1e-5, epsilon = 1e-10);
        }
        for i in [0usize, 4, 7] {
            let mut pp = pred.clone();
            pp.valence[i] += h;
            let mut pm = pred.clone();
            pm.valence[i] -= h;
            let fd = (eval(&pp) - eval(&pm)) / (2.0 * h);
            assert_relative_eq!(grad.valence[i], fd, max_relative = 1e-5, epsilon = 1e-10);

            let mut pp = pred.clone();
            pp.arousal[i] += h;
            let mut pm = pred.clone();
            pm.arousal[i] -= h;
            let fd = (eval(&pp) - eval(&pm)) / (2.0 * h);
            assert_relative_eq!(grad.arousal[i], fd, max_relative = 1e-5, epsilon = 1e-10);
        }
    }

    #[test]
    fn composite_equal_weights_are_thirds() {
        let (pred, labels) = random_batch(12, 4);
        let b1 = composite_loss_breakdown(&pred, &labels, &ShakeWeights::uniform()).unwrap();
        let b2 = composite_loss_breakdown(
            &pred,
            &labels,
            &ShakeWeights {
                alpha: 0.77,
                beta: 0.77,
                gamma: 0.77,
            },
        )
        .unwrap();
        assert_relative_eq!(b1.total, b2.total, epsilon = 1e-12);
        assert_relative_eq!(
            b1.total,
            b1.ce + (b1.l_mse + b1.l_pcc + b1.l_ccc) / 3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn composite_with_perfect_continuous_reduces_to_ce() {
        let (mut pred, labels) = random_batch(10, 9);
        pred.valence = labels.valence.clone();
        pred.arousal = labels.arousal.clone();
        let w = ShakeWeights {
            alpha: 0.2,
            beta: 0.5,
            gamma: 0.9,
        };
        let total = composite_loss(&pred, &labels, &w).unwrap();
        let ce = cross_entropy(&pred.logits, &labels.emotion).unwrap();
        assert_relative_eq!(total, ce, epsilon = 1e-12);
    }

    #[test]
    fn mixed_labels_are_valid_soft_rows() {
        let (_, a) = random_batch(6, 21);
        let (_, b) = random_batch(6, 22);
        let mixed = LabelBatch::mix(&a, &b, 0.3);
        mixed.validate().unwrap();
        // Lambda 0.5 across Happy and Sad puts half the mass on each.
        let happy = LabelBatch {
            emotion: EmotionTargets::Hard(vec![EmotionClass::Happy]),
            valence: array![0.8],
            arousal: array![0.5],
        };
        let sad = LabelBatch {
            emotion: EmotionTargets::Hard(vec![EmotionClass::Sad]),
            valence: array![-0.6],
            arousal: array![-0.3],
        };
        let half = LabelBatch::mix(&happy, &sad, 0.5);
        let rows = half.emotion.soft_rows();
        assert_eq!(rows[[0, EmotionClass::Happy.index()]], 0.5);
        assert_eq!(rows[[0, EmotionClass::Sad.index()]], 0.5);
        assert_relative_eq!(half.valence[0], 0.1, epsilon = 1e-15);
    }

    #[test]
    fn mmd_identical_inputs_are_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Array2::from_shape_fn((40, 6), |_| rng.random_range(-1.0..1.0));
        let v = mmd_squared(&x, &x.clone(), &DEFAULT_MMD_BANDWIDTHS).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn mmd_detects_mean_shift_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((128, 4), |_| rng.random_range(-1.0..1.0));
        let y = x.mapv(|v| v + 1.5);
        let a = mmd_squared(&x, &y, &[1.0]).unwrap();
        let b = mmd_squared(&y, &x, &[1.0]).unwrap();
        assert!(a > 0.05, "{a}");
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn mmd_is_a_mean_so_duplication_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array2::from_shape_fn((10, 3), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((12, 3), |_| rng.random_range(0.0..2.0));
        let doubled = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let a = mmd_squared(&x, &y, &DEFAULT_MMD_BANDWIDTHS).unwrap();
        let b = mmd_squared(&doubled, &y, &DEFAULT_MMD_BANDWIDTHS).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn mmd_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((5, 3), |_| rng.random_range(-0.5..1.5));
        let (_, dx, dy) = mmd_squared_with_grad(&x, &y, &DEFAULT_MMD_BANDWIDTHS).unwrap();
        let h = 1e-6;
        for idx in [(0usize, 0usize), (3, 2), (5, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (mmd_squared(&xp, &y, &DEFAULT_MMD_BANDWIDTHS).unwrap()
                - mmd_squared(&xm, &y, &DEFAULT_MMD_BANDWIDTHS).unwrap())
                / (2.0 * h);
            assert_relative_eq!(dx[idx], fd, max_relative = 1e-4, epsilon = 1e-9);
        }
        for idx in [(0usize, 1usize), (4, 0)] {
            let mut yp = y.clone();
            yp[idx] += h;
            let mut ym = y.clone();
            ym[idx] -= h;
            let fd = (mmd_squared(&x, &yp, &DEFAULT_MMD_BANDWIDTHS).unwrap()
                - mmd_squared(&x, &ym, &DEFAULT_MMD_BANDWIDTHS).unwrap())
                / (2.0 * h);
            assert_relative_eq!(dy[idx], fd, max_relative = 1e-4, epsilon = 1e-9);
        }
    }

    #[test]
    fn mmd_rejects_bad_bandwidths() {
        let x = Array2::zeros((3, 2));
        assert!(mmd_squared(&x, &x.clone(), &[]).is_err());
        assert!(mmd_squared(&x, &x.clone(), &[0.0]).is_err());
        assert!(mmd_squared(&x, &x.clone(), &[-1.0]).is_err());
    }

    proptest! {
        #[test]
        fn pcc_invariant_under_positive_affine_maps(
            seed in any::<u64>(),
            a in 0.01f64..50.0,
            b in -5.0f64..5.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let scaled: Vec<f64> = y.iter().map(|v| a * v + b).collect();
            let p1 = pcc(&y, &x);
            let p2 = pcc(&scaled, &x);
            if let (Ok(p1), Ok(p2)) = (p1, p2) {
                prop_assert!((p1 - p2).abs() < 1e-10, "{p1} vs {p2}");
            }
        }

        #[test]
        fn ccc_magnitude_never_exceeds_pcc(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
            if let (Ok(c), Ok(p)) = (ccc(&y, &x), pcc(&y, &x)) {
                prop_assert!(c.abs() <= p.abs() + 1e-12, "ccc {c} pcc {p}");
            }
        }

        #[test]
        fn metrics_are_permutation_invariant(seed in any::<u64>(), swap in 0usize..15) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut yp = y.clone();
            let mut xp = x.clone();
            yp.swap(swap, swap + 1);
            xp.swap(swap, swap + 1);
            prop_assert!((mse(&y, &x).unwrap() - mse(&yp, &xp).unwrap()).abs() < 1e-15);
            if let (Ok(a), Ok(b)) = (pcc(&y, &x), pcc(&yp, &xp)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            if let (Ok(a), Ok(b)) = (ccc(&y, &x), ccc(&yp, &xp)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn shake_normalization_sums_to_one(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = sample_shake_weights(&mut rng);
            let (a, b, c) = w.normalized();
            prop_assert!((a + b + c - 1.0).abs() <= 2.0 * f64::EPSILON);
        }
    }
}
