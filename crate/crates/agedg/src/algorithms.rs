//! The five domain-generalisation update rules.
//!
//! Every rule consumes the same ingredients: a model state, one batch per
//! training domain (uniform batch size), shake-shake loss weights drawn
//! once per step, and a learning rate. Each returns a fresh state plus
//! diagnostics; no rule mutates its inputs. The task gradient is always
//! the mean of the composite loss over the domain batches, computed by
//! one shared routine, so switching a regulariser off reproduces the ERM
//! update bit for bit rather than merely approximately.
//!
//! Per-step randomness is confined to a caller-supplied rng and consumed
//! in a documented order (shake weights first, then any rule-specific
//! draws), which keeps cross-rule comparisons under a shared seed
//! meaningful. The `*_step` functions do the drawing; the `*_update`
//! cores take the drawn values explicitly and are deterministic, which is
//! what reproduction scripts and the identity checks call.

use ndarray::{concatenate, s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Auxiliary, ExtractorCache, ModelState, NetGrads, NetworkG};
use crate::data::{mix_seed, AgeGroup, Sample, DOMAIN_COUNT, EMOTION_CLASS_COUNT};
use crate::error::{AgedgError, Result};
use crate::metrics::{
    composite_loss_core, mmd_squared_with_grad, sample_shake_weights, LabelBatch, LossBreakdown,
    ShakeWeights, DEFAULT_MMD_BANDWIDTHS,
};
use crate::nn::{Dual, Mlp, Scalar};

/// Discriminator parameters are seeded from the model seed, not the step
/// rng, so lazily creating them never perturbs the task-side stream.
const DISCRIMINATOR_SEED_SALT: u64 = 0xD15C;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmId {
    Cdann,
    Erm,
    Mixup,
    Mldg,
    Mmd,
}

impl AlgorithmId {
    pub const ALL: [AlgorithmId; 5] = [
        AlgorithmId::Cdann,
        AlgorithmId::Erm,
        AlgorithmId::Mixup,
        AlgorithmId::Mldg,
        AlgorithmId::Mmd,
    ];

    /// Lowercase identifier used in configs and file names.
    pub fn id(self) -> &'static str {
        match self {
            AlgorithmId::Cdann => "cdann",
            AlgorithmId::Erm => "erm",
            AlgorithmId::Mixup => "mixup",
            AlgorithmId::Mldg => "mldg",
            AlgorithmId::Mmd => "mmd",
        }
    }

    /// Conventional display form used in result tables.
    pub fn name(self) -> &'static str {
        match self {
            AlgorithmId::Cdann => "CDANN",
            AlgorithmId::Erm => "ERM",
            AlgorithmId::Mixup => "Mixup",
            AlgorithmId::Mldg => "MLDG",
            AlgorithmId::Mmd => "MMD",
        }
    }
}

impl std::fmt::Display for AlgorithmId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

impl std::str::FromStr for AlgorithmId {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        Self::ALL
            .iter()
            .find(|a| a.id() == t)
            .copied()
            .ok_or_else(|| format!("unknown algorithm {s:?}, expected one of cdann, erm, mixup, mldg, mmd"))
    }
}

/// Hyperparameters for all five rules. Unused fields are ignored by rules
/// that do not read them, so one config type serves every run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub algorithm: AlgorithmId,
    pub learning_rate: f64,
    /// Concentration of the Beta(a, a) that draws mixup's lambda.
    pub mixup_beta_param: f64,
    /// Mix raw inputs instead of extracted features.
    pub mixup_input_space: bool,
    pub mmd_weight: f64,
    pub mmd_bandwidths: Vec<f64>,
    pub cdann_adv_weight: f64,
    pub cdann_hidden: Vec<usize>,
    /// Inner adaptation rate; absent means "same as learning_rate".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mldg_inner_lr: Option<f64>,
    pub mldg_meta_weight: f64,
    pub mldg_first_order: bool,
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        AlgorithmConfig {
            algorithm: AlgorithmId::Erm,
            learning_rate: 0.05,
            mixup_beta_param: 0.2,
            mixup_input_space: false,
            mmd_weight: 1.0,
            mmd_bandwidths: DEFAULT_MMD_BANDWIDTHS.to_vec(),
            cdann_adv_weight: 1.0,
            cdann_hidden: vec![16],
            mldg_inner_lr: None,
            mldg_meta_weight: 1.0,
            mldg_first_order: true,
        }
    }
}

impl AlgorithmConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("learning_rate", self.learning_rate),
            ("mmd_weight", self.mmd_weight),
            ("cdann_adv_weight", self.cdann_adv_weight),
            ("mldg_meta_weight", self.mldg_meta_weight),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(AgedgError::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !self.mixup_beta_param.is_finite() || self.mixup_beta_param <= 0.0 {
            return Err(AgedgError::Config(format!(
                "mixup_beta_param must be positive, got {}",
                self.mixup_beta_param
            )));
        }
        if let Some(lr) = self.mldg_inner_lr {
            if !lr.is_finite() || lr < 0.0 {
                return Err(AgedgError::Config(format!(
                    "mldg_inner_lr must be finite and non-negative, got {lr}"
                )));
            }
        }
        if self.mmd_bandwidths.is_empty()
            || self.mmd_bandwidths.iter().any(|&b| !b.is_finite() || b <= 0.0)
        {
            return Err(AgedgError::Config(
                "mmd_bandwidths must be a non-empty list of positive reals".into(),
            ));
        }
        if self.cdann_hidden.iter().any(|&h| h == 0) {
            return Err(AgedgError::Config(
                "cdann_hidden sizes must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn inner_lr(&self) -> f64 {
        self.mldg_inner_lr.unwrap_or(self.learning_rate)
    }
}

/// One minibatch drawn from a single domain's training split.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub domain: AgeGroup,
    pub inputs: Array2<f64>,
    pub labels: LabelBatch,
}

/// Builds a batch from sample references, checking label ranges and that
/// every sample really belongs to the stated domain.
pub fn batch_from_samples(domain: AgeGroup, samples: &[&Sample]) -> Result<DomainBatch> {
    if samples.is_empty() {
        return Err(AgedgError::EmptyDomain {
            domain: domain.to_string(),
            split: "batch".into(),
        });
    }
    let width = samples[0].input.len();
    for s in samples {
        if s.domain != domain {
            return Err(AgedgError::Config(format!(
                "sample {} belongs to domain {}, not {}",
                s.id, s.domain, domain
            )));
        }
        if s.input.len() != width {
            return Err(AgedgError::ShapeMismatch {
                context: "batch_from_samples".into(),
                detail: format!("sample {} has width {}, expected {width}", s.id, s.input.len()),
            });
        }
    }
    let mut inputs = Array2::zeros((samples.len(), width));
    for (i, s) in samples.iter().enumerate() {
        for (j, &v) in s.input.iter().enumerate() {
            inputs[[i, j]] = v;
        }
    }
    let labels = LabelBatch::from_samples(samples.iter().copied());
    labels.validate()?;
    Ok(DomainBatch {
        domain,
        inputs,
        labels,
    })
}

/// One batch per active training domain, uniform size, distinct domains.
#[derive(Clone, Debug)]
pub struct DomainBatchSet {
    batches: Vec<DomainBatch>,
}

impl DomainBatchSet {
    pub fn new(batches: Vec<DomainBatch>) -> Result<DomainBatchSet> {
        if batches.is_empty() {
            return Err(AgedgError::Config("a step needs at least one domain batch".into()));
        }
        let size = batches[0].inputs.nrows();
        if size < 2 {
            return Err(AgedgError::Config(format!(
                "batch size must be at least 2 (correlation terms need it), got {size}"
            )));
        }
        let width = batches[0].inputs.ncols();
        let mut seen = std::collections::HashSet::new();
        for b in &batches {
            if b.inputs.nrows() != size {
                return Err(AgedgError::Config(format!(
                    "uneven batch sizes: domain {} has {}, expected {size}",
                    b.domain,
                    b.inputs.nrows()
                )));
            }
            if b.inputs.ncols() != width {
                return Err(AgedgError::ShapeMismatch {
                    context: "DomainBatchSet".into(),
                    detail: format!(
                        "domain {} inputs are {} wide, expected {width}",
                        b.domain,
                        b.inputs.ncols()
                    ),
                });
            }
            if b.labels.len() != size {
                return Err(AgedgError::ShapeMismatch {
                    context: "DomainBatchSet".into(),
                    detail: format!("domain {} has {} labels for {size} inputs", b.domain, b.labels.len()),
                });
            }
            b.labels.validate()?;
            if !seen.insert(b.domain) {
                return Err(AgedgError::Config(format!(
                    "domain {} appears twice in one batch set",
                    b.domain
                )));
            }
        }
        Ok(DomainBatchSet { batches })
    }

    pub fn batches(&self) -> &[DomainBatch] {
        &self.batches
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.batches[0].inputs.nrows()
    }

    pub fn input_width(&self) -> usize {
        self.batches[0].inputs.ncols()
    }
}

/// What a step reports about itself: the pooled task loss and its terms,
/// the rule's regulariser value if it has one (mean pairwise MMD, the
/// domain discriminator's cross-entropy, or the meta-test loss), and the
/// l2 norm of the applied parameter gradient.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub loss: LossBreakdown,
    pub regulariser: Option<f64>,
    pub grad_norm: f64,
}

fn zero_breakdown() -> LossBreakdown {
    LossBreakdown {
        ce: 0.0,
        l_mse: 0.0,
        l_pcc: 0.0,
        l_ccc: 0.0,
        total: 0.0,
    }
}

fn add_scaled_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown, c: f64) {
    acc.ce += c * b.ce;
    acc.l_mse += c * b.l_mse;
    acc.l_pcc += c * b.l_pcc;
    acc.l_ccc += c * b.l_ccc;
    acc.total += c * b.total;
}

/// Forward through the heads plus loss plus backward to the features.
/// Shared verbatim by the pooled gradient and mixup so their overlapping
/// cases agree exactly.
fn heads_pass<S: Scalar>(
    net: &NetworkG<S>,
    features: &Array2<S>,
    labels: &LabelBatch,
    w: &ShakeWeights,
) -> Result<(
    S,
    LossBreakdown,
    crate::nn::DenseG<S>,
    crate::nn::DenseG<S>,
    Array2<S>,
)> {
    let outputs = net.heads_forward(features);
    let out = composite_loss_core(
        &outputs.logits,
        &outputs.valence(),
        &outputs.arousal(),
        labels,
        w,
    )?;
    let d_affect = ndarray::stack![Axis(1), out.d_valence, out.d_arousal];
    let (lg, ag, d_feat) = net.heads_backward(features, &outputs, &out.d_logits, &d_affect);
    Ok((out.total, out.breakdown, lg, ag, d_feat))
}

struct DomainPass<S: Scalar> {
    features: Array2<S>,
    cache: ExtractorCache<S>,
}

/// Mean of the composite loss over the given domain batches (equal weight
/// per domain) and its gradient. The per-domain features and extractor
/// caches ride along so regularisers can push extra gradient through the
/// extractor without a second forward pass.
fn pooled_task_gradient<S: Scalar>(
    net: &NetworkG<S>,
    inputs: &[&Array2<S>],
    labels: &[&LabelBatch],
    w: &ShakeWeights,
) -> Result<(S, LossBreakdown, NetGrads<S>, Vec<DomainPass<S>>)> {
    assert!(!inputs.is_empty() && inputs.len() == labels.len());
    let kw = S::from_f64(1.0 / inputs.len() as f64);
    let kw_f = 1.0 / inputs.len() as f64;
    let mut grads = net.zero_grads();
    let mut total = S::zero();
    let mut bd = zero_breakdown();
    let mut passes = Vec::with_capacity(inputs.len());
    for (x, l) in inputs.iter().zip(labels) {
        let (features, cache) = net.extract_cached(x);
        let (tot, pass_bd, lg, ag, d_feat) = heads_pass(net, &features, l, w)?;
        let ext = net.extract_backward(&cache, &d_feat);
        grads.scaled_add_extractor(kw, &ext);
        grads.logits_head.scaled_add(kw, &lg);
        grads.affect_head.scaled_add(kw, &ag);
        total += kw * tot;
        add_scaled_breakdown(&mut bd, &pass_bd, kw_f);
        passes.push(DomainPass { features, cache });
    }
    Ok((total, bd, grads, passes))
}

/// Public view of the pooled gradient: the ERM direction at the current
/// parameters for the given batches. Reproduction scripts and identity
/// checks build reference gradients from this.
pub fn task_gradient(
    state: &ModelState,
    set: &DomainBatchSet,
    w: &ShakeWeights,
) -> Result<(LossBreakdown, NetGrads<f64>)> {
    check_widths(state, set)?;
    let inputs: Vec<&Array2<f64>> = set.batches().iter().map(|b| &b.inputs).collect();
    let labels: Vec<&LabelBatch> = set.batches().iter().map(|b| &b.labels).collect();
    let (total, bd, grads, _) = pooled_task_gradient(&state.network, &inputs, &labels, w)?;
    ensure_finite_loss(total, &bd, w)?;
    Ok((bd, grads))
}

fn check_widths(state: &ModelState, set: &DomainBatchSet) -> Result<()> {
    let want = state.input_shape.len();
    if set.input_width() != want {
        return Err(AgedgError::ShapeMismatch {
            context: "algorithm step".into(),
            detail: format!("batch width {}, model expects {want}", set.input_width()),
        });
    }
    Ok(())
}

fn ensure_finite_loss(total: f64, bd: &LossBreakdown, w: &ShakeWeights) -> Result<()> {
    if !total.is_finite() {
        return Err(AgedgError::Divergence(format!(
            "non-finite composite loss {total} (terms {bd:?}, shake weights {w:?})"
        )));
    }
    Ok(())
}

fn apply_update(
    state: &ModelState,
    grads: &NetGrads<f64>,
    lr: f64,
    loss: LossBreakdown,
    regulariser: Option<f64>,
) -> Result<(ModelState, StepDiagnostics)> {
    let mut next = state.clone();
    next.network.scaled_add(-lr, grads);
    if !next.network.all_finite() {
        return Err(AgedgError::Divergence(
            "non-finite parameters after update".into(),
        ));
    }
    Ok((
        next,
        StepDiagnostics {
            loss,
            regulariser,
            grad_norm: grads.l2_norm(),
        },
    ))
}

// ---------------------------------------------------------------------------
// ERM

pub fn erm_step(
    state: &ModelState,
    batches: &DomainBatchSet,
    cfg: &AlgorithmConfig,
    rng: &mut impl Rng,
) -> Result<(ModelState, StepDiagnostics)> {
    let w = sample_shake_weights(rng);
    erm_update(state, batches, cfg, &w)
}

/// One SGD step on the pooled composite loss with the given shake weights.
pub fn erm_update(
    state: &ModelState,
    batches: &DomainBatchSet,
    cfg: &AlgorithmConfig,
    w: &ShakeWeights,
) -> Result<(ModelState, StepDiagnostics)> {
    cfg.validate()?;
    let (bd, grads) = task_gradient(state, batches, w)?;
    apply_update(state, &grads, cfg.learning_rate, bd, None)
}

// ---------------------------------------------------------------------------
// Mixup

pub fn mixup_step(
    state: &ModelState,
    batches: &DomainBatchSet,
    cfg: &AlgorithmConfig,
    rng: &mut impl Rng,
) -> Result<(ModelState, StepDiagnostics)> {
    let w = sample_shake_weights(rng);
    let k = batches.len();
    if k < 2 {
        return Err(AgedgError::Config(
            "mixup needs at least two domain batches".into(),
        ));
    }
    // Random disjoint pairing: shuffle the domain indices and walk them two
    // at a time. With an odd count the leftover domain sits this step out.
    let mut idx: Vec<usize> = (0..k).collect();
    idx.shuffle(rng);
    let pairs: Vec<(usize, usize)> = idx.chunks_exact(2).map(|c| (c[0], c[1])).collect();
    let beta = rand_distr::Beta::new(cfg.mixup_beta_param, cfg.mixup_beta_param)
        .map_err(|e| AgedgError::Config(format!("invalid mixup_beta_param: {e}")))?;
    let lambdas: Vec<f64> = pairs.iter().map(|_| rng.sample(beta)).collect();
    mixup_update_with(state, batches, &pairs, &lambdas, cfg, &w)
}

/// Mixup with the pairing and lambdas fixed by the caller. Lambda 1 (or 0)
/// short-circuits to the plain per-domain pass on the surviving batch, so
/// those edge cases coincide exactly with the ERM computation.
pub fn mixup_update_with(
    state: &ModelState,
    batches: &DomainBatchSet,
    pairs: &[(usize, usize)],
    lambdas: &[f64],
    cfg: &AlgorithmConfig,
    w: &ShakeWeights,
) -> Result<(ModelState, StepDiagnostics)> {
    cfg.validate()?;
    check_widths(state, batches)?;
    if pairs.is_empty() || pairs.len() != lambdas.len() {
        return Err(AgedgError::Config(
            "mixup needs a non-empty pairing with one lambda per pair".into(),
        ));
    }
    let k = batches.len();
    let mut used = std::collections::HashSet::new();
    for &(a, b) in pairs {
        if a >= k || b >= k || a == b || !used.insert(a) || !used.insert(b) {
            return Err(AgedgError::Config(format!(
                "invalid mixup pairing ({a}, {b}) over {k} batches"
            )));
        }
    }
    for &l in lambdas {
        if !l.is_finite() || !(0.0..=1.0).contains(&l) {
            return Err(AgedgError::Config(format!("mixup lambda {l} outside [0, 1]")));
        }
    }

    let net = &state.network;
    let pw = 1.0 / pairs.len() as f64;
    let mut grads = net.zero_grads();
    let mut total = 0.0;
    let mut bd = zero_breakdown();

    // The plain per-domain pass, shared by both short-circuit arms.
    let plain = |b: &DomainBatch,
                     grads: &mut NetGrads<f64>,
                     total: &mut f64,
                     bd: &mut LossBreakdown|
     -> Result<()> {
        let (features, cache) = net.extract_cached(&b.inputs);
        let (tot, pass_bd, lg, ag, d_feat) = heads_pass(net, &features, &b.labels, w)?;
        let ext = net.extract_backward(&cache, &d_feat);
        grads.scaled_add_extractor(pw, &ext);
        grads.logits_head.scaled_add(pw, &lg);
        grads.affect_head.scaled_add(pw, &ag);
        *total += pw * tot;
        add_scaled_breakdown(bd, &pass_bd, pw);
        Ok(())
    };

    for (&(i, j), &lam) in pairs.iter().zip(lambdas) {
        let b0 = &batches.batches()[i];
        let b1 = &batches.batches()[j];
        if lam == 1.0 {
            plain(b0, &mut grads, &mut total, &mut bd)?;
            continue;
        }
        if lam == 0.0 {
            plain(b1, &mut grads, &mut total, &mut bd)?;
            continue;
        }
        let labels = LabelBatch::mix(&b0.labels, &b1.labels, lam);
        if cfg.mixup_input_space {
            let mixed_x = ndarray::Zip::from(&b0.inputs)
                .and(&b1.inputs)
                .map_collect(|&a, &b| lam * a + (1.0 - lam) * b);
            let (features, cache) = net.extract_cached(&mixed_x);
            let (tot, pass_bd, lg, ag, d_feat) = heads_pass(net, &features, &labels, w)?;
            let ext = net.extract_backward(&cache, &d_feat);
            grads.scaled_add_extractor(pw, &ext);
            grads.logits_head.scaled_add(pw, &lg);
            grads.affect_head.scaled_add(pw, &ag);
            total += pw * tot;
            add_scaled_breakdown(&mut bd, &pass_bd, pw);
        } else {
            let (f0, c0) = net.extract_cached(&b0.inputs);
            let (f1, c1) = net.extract_cached(&b1.inputs);
            let mixed = ndarray::Zip::from(&f0)
                .and(&f1)
                .map_collect(|&a, &b| lam * a + (1.0 - lam) * b);
            let (tot, pass_bd, lg, ag, d_feat) = heads_pass(net, &mixed, &labels, w)?;
            let d0 = d_feat.mapv(|v| v * lam);
            let d1 = d_feat.mapv(|v| v * (1.0 - lam));
            let e0 = net.extract_backward(&c0, &d0);
            let e1 = net.extract_backward(&c1, &d1);
            grads.scaled_add_extractor(pw, &e0);
            grads.scaled_add_extractor(pw, &e1);
            grads.logits_head.scaled_add(pw, &lg);
            grads.affect_head.scaled_add(pw, &ag);
            total += pw * tot;
            add_scaled_breakdown(&mut bd, &pass_bd, pw);
        }
    }
    ensure_finite_loss(total, &bd, w)?;
    apply_update(state, &grads, cfg.learning_rate, bd, None)
}

// ---------------------------------------------------------------------------
// MMD

pub fn mmd_step(
    state: &ModelState,
    batches: &DomainBatchSet,
    cfg: &AlgorithmConfig,
    rng: &mut impl Rng,
) -> Result<(ModelState, StepDiagnostics)> {
    let w = sample_shake_weights(rng);
    mmd_update(state, batches, cfg, &w)
}

/// ERM plus `mmd_weight` times the mean squared MMD over all unordered
/// domain pairs, measured between per-domain feature blocks. The penalty
/// differentiates through the feature extractor only. Weight zero skips
/// the penalty code path entirely, leaving the exact ERM update.
pub fn mmd_update(
    state: &ModelState,
    batches: &DomainBatchSet,
    cfg: &AlgorithmConfig,
    w: &ShakeWeights,
) -> Result<(ModelState, StepDiagnostics)> {
    cfg.validate()?;
    check_widths(state, batches)?;
    let net = &state.network;
    let inputs: Vec<&Array2<f64>> = batches.batches().iter().map(|b| &b.inputs).collect();
    let labels: Vec<&LabelBatch> = batches.batches().iter().map(|b| &b.labels).collect();
    let (total, bd, mut grads, passes) = pooled_task_gradient(net, &inputs, &labels, w)?;
    ensure_finite_loss(total, &bd, w)?;

    let k = batches.len();
    let mut reg = None;
    if cfg.mmd_weight != 0.0 && k >= 2 {
        let pair_count = (k * (k - 1) / 2) as f64;
        let mut mmd_sum = 0.0;
        let mut d_features: Vec<Array2<f64>> = passes
            .iter()
            .map(|p| Array2::zeros(p.features.raw_dim()))
            .collect();
        for i in 0..k {
            for j in (i + 1)..k {
                let (v, gx, gy) =
                    mmd_squared_with_grad(&passes[i].features, &passes[j].features, &cfg.mmd_bandwidths)?;
                mmd_sum += v;
                d_features[i] += &gx;
                d_features[j] += &gy;
            }
        }
        let scale = cfg.mmd_weight / pair_count;
        for (pass, df) in passes.iter().zip(&d_features) {
            let ext = net.extract_backward(&pass.cache, df);
            grads.scaled_add_extractor(scale, &ext);
        }
        reg = Some(mmd_sum / pair_count);
    }
    apply_update(state, &grads, cfg.learning_rate, bd, reg)
}

// ---------------------------------------------------------------------------
// CDANN

pub fn cdann_step(
    state: &ModelState,
    batches: &DomainBatchSet,
    cfg: &AlgorithmConfig,
    rng: &mut impl Rng,
) -> Result<(ModelState, StepDiagnostics)> {
    let w = sample_shake_weights(rng);
    cdann_update(state, batches, cfg, &w)
}

/// Class-conditional adversary: a discriminator reads (features, one-hot
/// emotion) and predicts the domain. Its parameters descend their own
/// cross-entropy; the extractor receives that gradient reversed and scaled
/// by `cdann_adv_weight` on top of the task gradient; the heads see only
/// the task gradient. Everything is computed at the incoming parameters
/// and applied as one simultaneous update.
pub fn cdann_update(
    state: &ModelState,
    batches: &DomainBatchSet,
    cfg: &AlgorithmConfig,
    w: &ShakeWeights,
) -> Result<(ModelState, StepDiagnostics)> {
    cfg.validate()?;
    check_widths(state, batches)?;
    let net = &state.network;
    let inputs: Vec<&Array2<f64>> = batches.batches().iter().map(|b| &b.inputs).collect();
    let labels: Vec<&LabelBatch> = batches.batches().iter().map(|b| &b.labels).collect();
    let (total, bd, mut grads, passes) = pooled_task_gradient(net, &inputs, &labels, w)?;
    ensure_finite_loss(total, &bd, w)?;

    let disc_in = state.feature_dim + EMOTION_CLASS_COUNT;
    let disc = match &state.auxiliary {
        Some(Auxiliary::DomainDiscriminator(m)) => {
            if m.layers[0].in_dim() != disc_in {
                return Err(AgedgError::Config(format!(
                    "domain discriminator expects {} inputs, model features need {disc_in}",
                    m.layers[0].in_dim()
                )));
            }
            m.clone()
        }
        None => {
            let mut dims = vec![disc_in];
            dims.extend_from_slice(&cfg.cdann_hidden);
            dims.push(DOMAIN_COUNT);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(state.seed, DISCRIMINATOR_SEED_SALT));
            Mlp::init(&dims, false, &mut rng)
        }
    };

    // Stack (features, one-hot emotion) across domains, rows kept in batch
    // order so the input gradient can be sliced back apart.
    let blocks: Vec<Array2<f64>> = passes
        .iter()
        .zip(batches.batches())
        .map(|(p, b)| {
            let onehot = b.labels.emotion.soft_rows();
            concatenate![Axis(1), p.features.view(), onehot.view()]
        })
        .collect();
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let disc_input = concatenate(Axis(0), &views).expect("uniform widths");
    let mut targets = Vec::with_capacity(disc_input.nrows());
    for b in batches.batches() {
        targets.extend(std::iter::repeat_n(b.domain.ordinal(), b.inputs.nrows()));
    }

    let acts = disc.forward_cached(&disc_input);
    let (disc_ce, d_logits) = domain_cross_entropy(acts.last().unwrap(), &targets);
    if !disc_ce.is_finite() {
        return Err(AgedgError::Divergence(format!(
            "non-finite discriminator loss {disc_ce}"
        )));
    }
    let (disc_grads, d_disc_input) = disc.backward(&acts, &d_logits);

    // Reversal: the extractor ascends the discriminator loss. Skipped
    // outright at weight zero so the task update stays untouched.
    if cfg.cdann_adv_weight != 0.0 {
        let b = batches.batch_size();
        for (i, pass) in passes.iter().enumerate() {
            let rows = d_disc_input.slice(s![i * b..(i + 1) * b, ..state.feature_dim]);
            let ext = net.extract_backward(&pass.cache, &rows.to_owned());
            grads.scaled_add_extractor(-cfg.cdann_adv_weight, &ext);
        }
    }

    let (mut next, diag) = apply_update(state, &grads, cfg.learning_rate, bd, Some(disc_ce))?;
    let mut disc_next = disc;
    disc_next.scaled_add(-cfg.learning_rate, &disc_grads);
    next.auxiliary = Some(Auxiliary::DomainDiscriminator(disc_next));
    Ok((next, diag))
}

/// Softmax cross-entropy against integer targets, mean over rows, with
/// the gradient already divided by the row count.
fn domain_cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    assert_eq!(n, targets.len());
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (i, row) in logits.outer_iter().enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
        loss += lse - row[targets[i]];
        for (j, &z) in row.iter().enumerate() {
            let soft = (z - lse).exp();
            grad[[i, j]] = (soft - if j == targets[i] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

// ---------------------------------------------------------------------------
// MLDG

pub fn mldg_step(
    state: &ModelState,
    batches: &DomainBatchSet,
    cfg: &AlgorithmConfig,
    rng: &mut impl Rng,
) -> Result<(ModelState, StepDiagnostics)> {
    let w = sample_shake_weights(rng);
    let k = batches.len();
    if k < 2 {
        return Err(AgedgError::Config(
            "mldg needs at least two domain batches".into(),
        ));
    }
    let meta_test = rng.random_range(0..k);
    mldg_update_with(state, batches, meta_test, cfg, &w)
}

pub fn mldg_update_with(
    state: &ModelState,
    batches: &DomainBatchSet,
    meta_test: usize,
    cfg: &AlgorithmConfig,
    w: &ShakeWeights,
) -> Result<(ModelState, StepDiagnostics)> {
    let (outer, bd, te_loss) = mldg_outer_gradient(state, batches, meta_test, cfg, w)?;
    apply_update(state, &outer, cfg.learning_rate, bd, Some(te_loss))
}

/// Gradient of `L_metatrain(theta) + beta * L_metatest(theta - eta *
/// grad L_metatrain(theta))`. First-order mode treats the adapted
/// parameters' Jacobian as the identity; exact mode adds the missing
/// `-beta * eta * H_metatrain · grad L_metatest` term via a dual-number
/// pass (forward-over-reverse, so the Hessian is never materialised).
///
/// Returns the outer gradient, the meta-train loss terms, and the
/// meta-test loss at the adapted parameters.
pub fn mldg_outer_gradient(
    state: &ModelState,
    batches: &DomainBatchSet,
    meta_test: usize,
    cfg: &AlgorithmConfig,
    w: &ShakeWeights,
) -> Result<(NetGrads<f64>, LossBreakdown, f64)> {
    cfg.validate()?;
    check_widths(state, batches)?;
    let k = batches.len();
    if k < 2 {
        return Err(AgedgError::Config(
            "mldg needs at least two domain batches".into(),
        ));
    }
    if meta_test >= k {
        return Err(AgedgError::Config(format!(
            "meta-test index {meta_test} out of range for {k} batches"
        )));
    }
    let net = &state.network;
    let tr: Vec<&DomainBatch> = batches
        .batches()
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != meta_test)
        .map(|(_, b)| b)
        .collect();
    let te = &batches.batches()[meta_test];
    let inner_lr = cfg.inner_lr();
    let beta = cfg.mldg_meta_weight;

    let tr_inputs: Vec<&Array2<f64>> = tr.iter().map(|b| &b.inputs).collect();
    let tr_labels: Vec<&LabelBatch> = tr.iter().map(|b| &b.labels).collect();
    let (tr_total, tr_bd, g_tr, _) = pooled_task_gradient(net, &tr_inputs, &tr_labels, w)?;
    ensure_finite_loss(tr_total, &tr_bd, w)?;

    let mut adapted = net.clone();
    adapted.scaled_add(-inner_lr, &g_tr);
    let (te_total, te_bd, g_te, _) =
        pooled_task_gradient(&adapted, &[&te.inputs], &[&te.labels], w)?;
    ensure_finite_loss(te_total, &te_bd, w)?;

    let mut outer = g_tr;
    if beta != 0.0 {
        outer.scaled_add(beta, &g_te);
        if !cfg.mldg_first_order && inner_lr != 0.0 {
            // Exact correction: lift the ORIGINAL parameters along g_te and
            // redo the meta-train backward in dual arithmetic; the tangent
            // of the resulting gradient is H_metatrain(theta) · g_te.
            let lifted = net.lift(&g_te);
            let dual_inputs: Vec<Array2<Dual>> =
                tr.iter().map(|b| b.inputs.mapv(Dual::constant)).collect();
            let input_refs: Vec<&Array2<Dual>> = dual_inputs.iter().collect();
            let (_, _, dual_g, _) = pooled_task_gradient(&lifted, &input_refs, &tr_labels, w)?;
            let hvp = dual_g.tangent();
            outer.scaled_add(-beta * inner_lr, &hvp);
        }
    }
    Ok((outer, tr_bd, te_total))
}

/// The scalar objective the outer gradient differentiates; exposed so
/// gradient checks can finite-difference it.
pub fn mldg_outer_objective(
    state: &ModelState,
    batches: &DomainBatchSet,
    meta_test: usize,
    cfg: &AlgorithmConfig,
    w: &ShakeWeights,
) -> Result<f64> {
    cfg.validate()?;
    check_widths(state, batches)?;
    let k = batches.len();
    if k < 2 || meta_test >= k {
        return Err(AgedgError::Config(format!(
            "invalid meta split: {meta_test} of {k}"
        )));
    }
    let net = &state.network;
    let tr: Vec<&DomainBatch> = batches
        .batches()
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != meta_test)
        .map(|(_, b)| b)
        .collect();
    let te = &batches.batches()[meta_test];
    let tr_inputs: Vec<&Array2<f64>> = tr.iter().map(|b| &b.inputs).collect();
    let tr_labels: Vec<&LabelBatch> = tr.iter().map(|b| &b.labels).collect();
    let (tr_total, _, g_tr, _) = pooled_task_gradient(net, &tr_inputs, &tr_labels, w)?;
    let mut adapted = net.clone();
    adapted.scaled_add(-cfg.inner_lr(), &g_tr);
    let (te_total, _, _, _) = pooled_task_gradient(&adapted, &[&te.inputs], &[&te.labels], w)?;
    Ok(tr_total + cfg.mldg_meta_weight * te_total)
}

// ---------------------------------------------------------------------------
// Dispatch

/// Runs one step of whichever rule the config names.
pub fn algorithm_step(
    state: &ModelState,
    batches: &DomainBatchSet,
    cfg: &AlgorithmConfig,
    rng: &mut impl Rng,
) -> Result<(ModelState, StepDiagnostics)> {
    match cfg.algorithm {
        AlgorithmId::Erm => erm_step(state, batches, cfg, rng),
        AlgorithmId::Mixup => mixup_step(state, batches, cfg, rng),
        AlgorithmId::Mmd => mmd_step(state, batches, cfg, rng),
        AlgorithmId::Cdann => cdann_step(state, batches, cfg, rng),
        AlgorithmId::Mldg => mldg_step(state, batches, cfg, rng),
    }
}
