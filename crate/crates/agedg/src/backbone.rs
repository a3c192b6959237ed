//! The feature-extractor / classifier pair every update rule manipulates.
//!
//! A model is split at the penultimate representation: `feature_extract`
//! maps inputs to a `feature_dim`-wide activation (post-nonlinearity),
//! and `classify` maps those features to class logits plus bounded
//! valence/arousal. Domain-generalisation regularisers act on the
//! features; the task loss acts on the classifier outputs; the split
//! point is therefore part of the public contract, not an internal
//! detail.
//!
//! Two extractor families exist: an MLP for vector inputs and a small
//! conv stack (3x3 valid convolutions, tanh, 2x2 average pooling) for
//! image inputs. Both apply tanh after every layer including the last,
//! so features land in (-1, 1). No dropout or normalisation layers:
//! forward passes are pure functions and gradient checks stay exact.

use std::path::Path;

use ndarray::{Array1, Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{InputShape, EMOTION_CLASS_COUNT};
use crate::error::{AgedgError, Result};
use crate::metrics::PredictionBatch;
use crate::nn::{Conv2d, Conv2dG, Dense, DenseG, Dual, Mlp, MlpG, Scalar};

pub const AFFECT_DIMS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ExtractorG<S> {
    Mlp(MlpG<S>),
    Conv {
        input: (usize, usize, usize),
        convs: Vec<Conv2dG<S>>,
        dense: DenseG<S>,
    },
}

pub type Extractor = ExtractorG<f64>;

/// Extractor, class-logit head, and tanh-squashed affect head. The same
/// struct shape doubles as the gradient container ([`NetGrads`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkG<S> {
    pub extractor: ExtractorG<S>,
    pub logits_head: DenseG<S>,
    pub affect_head: DenseG<S>,
}

pub type Network = NetworkG<f64>;

/// Gradients for every parameter of a [`NetworkG`], in the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGrads<S> {
    pub extractor: ExtractorGrads<S>,
    pub logits_head: DenseG<S>,
    pub affect_head: DenseG<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExtractorGrads<S> {
    Mlp(Vec<DenseG<S>>),
    Conv {
        convs: Vec<Conv2dG<S>>,
        dense: DenseG<S>,
    },
}

/// Per-batch activations the backward pass needs; produced by
/// [`NetworkG::extract_cached`] and never stored on the model.
pub enum ExtractorCache<S> {
    Mlp(Vec<Array2<S>>),
    Conv {
        /// Input to each conv stage.
        stage_in: Vec<Array4<S>>,
        /// Post-tanh conv output of each stage (pre-pool).
        stage_act: Vec<Array4<S>>,
        /// Flattened pooled output feeding the dense layer.
        flat: Array2<S>,
        /// Final features (post-tanh dense output).
        features: Array2<S>,
    },
}

/// Classifier outputs in whichever scalar the pass runs in. `affect`
/// holds the post-tanh (valence, arousal) columns.
pub struct NetOutputs<S> {
    pub logits: Array2<S>,
    pub affect: Array2<S>,
}

impl<S: Scalar> NetOutputs<S> {
    pub fn valence(&self) -> Array1<S> {
        self.affect.column(0).to_owned()
    }

    pub fn arousal(&self) -> Array1<S> {
        self.affect.column(1).to_owned()
    }
}

impl NetOutputs<f64> {
    pub fn into_prediction(self) -> PredictionBatch {
        PredictionBatch {
            valence: self.valence(),
            arousal: self.arousal(),
            logits: self.logits,
        }
    }
}

impl<S: Scalar> NetworkG<S> {
    pub fn feature_dim(&self) -> usize {
        self.logits_head.in_dim()
    }

    /// Runs the extractor, keeping the activations for a later backward.
    pub fn extract_cached(&self, x: &Array2<S>) -> (Array2<S>, ExtractorCache<S>) {
        match &self.extractor {
            ExtractorG::Mlp(mlp) => {
                let acts = mlp.forward_cached(x);
                (acts.last().unwrap().clone(), ExtractorCache::Mlp(acts))
            }
            ExtractorG::Conv { input, convs, dense } => {
                let (c, h, w) = *input;
                let n = x.nrows();
                let mut cur = x
                    .to_owned()
                    .into_shape_with_order((n, c, h, w))
                    .expect("input width checked by caller");
                let mut stage_in = Vec::with_capacity(convs.len());
                let mut stage_act = Vec::with_capacity(convs.len());
                for conv in convs {
                    stage_in.push(cur.clone());
                    let act = conv.forward(&cur).mapv(Scalar::tanh);
                    cur = crate::nn::avg_pool2(&act);
                    stage_act.push(act);
                }
                let (n, c2, h2, w2) = cur.dim();
                let flat = cur
                    .into_shape_with_order((n, c2 * h2 * w2))
                    .expect("contiguous after pooling");
                let features = dense.forward(&flat).mapv(Scalar::tanh);
                (
                    features.clone(),
                    ExtractorCache::Conv {
                        stage_in,
                        stage_act,
                        flat,
                        features,
                    },
                )
            }
        }
    }

    /// Backward through the extractor alone. Linear in `d_features`, so
    /// regulariser contributions can be propagated in a separate call and
    /// summed into the same parameter gradients.
    pub fn extract_backward(
        &self,
        cache: &ExtractorCache<S>,
        d_features: &Array2<S>,
    ) -> ExtractorGrads<S> {
        match (&self.extractor, cache) {
            (ExtractorG::Mlp(mlp), ExtractorCache::Mlp(acts)) => {
                let (grads, _) = mlp.backward(acts, d_features);
                ExtractorGrads::Mlp(grads)
            }
            (
                ExtractorG::Conv { convs, dense, .. },
                ExtractorCache::Conv {
                    stage_in,
                    stage_act,
                    flat,
                    features,
                },
            ) => {
                // d through the final tanh + dense.
                let d_pre = ndarray::Zip::from(d_features)
                    .and(features)
                    .map_collect(|&g, &y| g * (S::one() - y * y));
                let (dense_grad, d_flat) = dense.backward(flat, &d_pre);

                let mut conv_grads: Vec<Conv2dG<S>> = Vec::with_capacity(convs.len());
                if convs.is_empty() {
                    return ExtractorGrads::Conv {
                        convs: conv_grads,
                        dense: dense_grad,
                    };
                }
                let last_act = stage_act.last().unwrap();
                let (an, ac, ah, aw) = last_act.dim();
                let d_pooled = d_flat
                    .into_shape_with_order((an, ac, ah / 2, aw / 2))
                    .expect("pooled shape");
                let mut d_cur = crate::nn::avg_pool2_backward(last_act.dim(), &d_pooled);
                for (i, conv) in convs.iter().enumerate().rev() {
                    // d_cur currently sits after tanh of stage i.
                    let d_z = ndarray::Zip::from(&d_cur)
                        .and(&stage_act[i])
                        .map_collect(|&g, &y| g * (S::one() - y * y));
                    let (cg, d_in) = conv.backward(&stage_in[i], &d_z);
                    conv_grads.push(cg);
                    if i > 0 {
                        d_cur = crate::nn::avg_pool2_backward(stage_act[i - 1].dim(), &d_in);
                    }
                }
                conv_grads.reverse();
                ExtractorGrads::Conv {
                    convs: conv_grads,
                    dense: dense_grad,
                }
            }
            _ => unreachable!("cache kind always matches extractor kind"),
        }
    }

    /// Applies both heads to a feature batch.
    pub fn heads_forward(&self, features: &Array2<S>) -> NetOutputs<S> {
        let logits = self.logits_head.forward(features);
        let affect = self.affect_head.forward(features).mapv(Scalar::tanh);
        NetOutputs { logits, affect }
    }

    /// Backward through both heads; returns head gradients and the
    /// gradient reaching the features. `d_affect` is with respect to the
    /// post-tanh affect columns.
    pub fn heads_backward(
        &self,
        features: &Array2<S>,
        outputs: &NetOutputs<S>,
        d_logits: &Array2<S>,
        d_affect: &Array2<S>,
    ) -> (DenseG<S>, DenseG<S>, Array2<S>) {
        let (logits_grad, d_feat_l) = self.logits_head.backward(features, d_logits);
        let d_affect_pre = ndarray::Zip::from(d_affect)
            .and(&outputs.affect)
            .map_collect(|&g, &y| g * (S::one() - y * y));
        let (affect_grad, d_feat_a) = self.affect_head.backward(features, &d_affect_pre);
        (logits_grad, affect_grad, d_feat_l + d_feat_a)
    }

    pub fn zero_grads(&self) -> NetGrads<S> {
        NetGrads {
            extractor: match &self.extractor {
                ExtractorG::Mlp(mlp) => ExtractorGrads::Mlp(mlp.zeros_like()),
                ExtractorG::Conv { convs, dense, .. } => ExtractorGrads::Conv {
                    convs: convs.iter().map(|c| c.zeros_like()).collect(),
                    dense: dense.zeros_like(),
                },
            },
            logits_head: self.logits_head.zeros_like(),
            affect_head: self.affect_head.zeros_like(),
        }
    }

    /// `params += c * grads`, the SGD primitive.
    pub fn scaled_add(&mut self, c: S, grads: &NetGrads<S>) {
        match (&mut self.extractor, &grads.extractor) {
            (ExtractorG::Mlp(mlp), ExtractorGrads::Mlp(gs)) => mlp.scaled_add(c, gs),
            (
                ExtractorG::Conv { convs, dense, .. },
                ExtractorGrads::Conv {
                    convs: gcs,
                    dense: gd,
                },
            ) => {
                for (conv, g) in convs.iter_mut().zip(gcs) {
                    conv.scaled_add(c, g);
                }
                dense.scaled_add(c, gd);
            }
            _ => unreachable!("gradient layout always matches the network"),
        }
        self.logits_head.scaled_add(c, &grads.logits_head);
        self.affect_head.scaled_add(c, &grads.affect_head);
    }

    pub fn param_count(&self) -> usize {
        let ext = match &self.extractor {
            ExtractorG::Mlp(mlp) => mlp.param_count(),
            ExtractorG::Conv { convs, dense, .. } => {
                convs.iter().map(|c| c.param_count()).sum::<usize>() + dense.param_count()
            }
        };
        ext + self.logits_head.param_count() + self.affect_head.param_count()
    }

    /// Parameters as a flat f64 vector: extractor stages in order, then
    /// the logits head, then the affect head (weights before bias).
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        match &self.extractor {
            ExtractorG::Mlp(mlp) => mlp.flatten_into(&mut out),
            ExtractorG::Conv { convs, dense, .. } => {
                for c in convs {
                    c.flatten_into(&mut out);
                }
                dense.flatten_into(&mut out);
            }
        }
        self.logits_head.flatten_into(&mut out);
        self.affect_head.flatten_into(&mut out);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.flatten_params().iter().all(|v| v.is_finite())
    }
}

impl Network {
    pub fn set_params(&mut self, v: &[f64]) {
        let mut pos = 0;
        match &mut self.extractor {
            ExtractorG::Mlp(mlp) => mlp.assign_from_slice(v, &mut pos),
            ExtractorG::Conv { convs, dense, .. } => {
                for c in convs {
                    c.assign_from_slice(v, &mut pos);
                }
                dense.assign_from_slice(v, &mut pos);
            }
        }
        self.logits_head.assign_from_slice(v, &mut pos);
        self.affect_head.assign_from_slice(v, &mut pos);
        assert_eq!(pos, v.len(), "parameter vector length mismatch");
    }

    /// Pairs every parameter with the matching direction component,
    /// producing the dual network whose backward pass yields exact
    /// Hessian-vector products.
    pub fn lift(&self, dir: &NetGrads<f64>) -> NetworkG<Dual> {
        let extractor = match (&self.extractor, &dir.extractor) {
            (ExtractorG::Mlp(mlp), ExtractorGrads::Mlp(dirs)) => ExtractorG::Mlp(MlpG {
                layers: mlp
                    .layers
                    .iter()
                    .zip(dirs)
                    .map(|(l, d)| l.lift(d))
                    .collect(),
                tanh_last: mlp.tanh_last,
            }),
            (
                ExtractorG::Conv { input, convs, dense },
                ExtractorGrads::Conv {
                    convs: dcs,
                    dense: dd,
                },
            ) => ExtractorG::Conv {
                input: *input,
                convs: convs.iter().zip(dcs).map(|(c, d)| c.lift(d)).collect(),
                dense: dense.lift(dd),
            },
            _ => unreachable!("direction layout always matches the network"),
        };
        NetworkG {
            extractor,
            logits_head: self.logits_head.lift(&dir.logits_head),
            affect_head: self.affect_head.lift(&dir.affect_head),
        }
    }
}

impl<S: Scalar> NetGrads<S> {
    /// `self += c * other`, entry-wise over every gradient array.
    pub fn scaled_add(&mut self, c: S, other: &NetGrads<S>) {
        match (&mut self.extractor, &other.extractor) {
            (ExtractorGrads::Mlp(a), ExtractorGrads::Mlp(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    x.scaled_add(c, y);
                }
            }
            (
                ExtractorGrads::Conv { convs: a, dense: ad },
                ExtractorGrads::Conv { convs: b, dense: bd },
            ) => {
                for (x, y) in a.iter_mut().zip(b) {
                    x.scaled_add(c, y);
                }
                ad.scaled_add(c, bd);
            }
            _ => unreachable!("gradient layouts always match"),
        }
        self.logits_head.scaled_add(c, &other.logits_head);
        self.affect_head.scaled_add(c, &other.affect_head);
    }

    /// Adds `c * ext` into the extractor part only; heads untouched.
    pub fn scaled_add_extractor(&mut self, c: S, ext: &ExtractorGrads<S>) {
        match (&mut self.extractor, ext) {
            (ExtractorGrads::Mlp(a), ExtractorGrads::Mlp(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    x.scaled_add(c, y);
                }
            }
            (
                ExtractorGrads::Conv { convs: a, dense: ad },
                ExtractorGrads::Conv { convs: b, dense: bd },
            ) => {
                for (x, y) in a.iter_mut().zip(b) {
                    x.scaled_add(c, y);
                }
                ad.scaled_add(c, bd);
            }
            _ => unreachable!("gradient layouts always match"),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        match &self.extractor {
            ExtractorGrads::Mlp(layers) => {
                for l in layers {
                    l.flatten_into(&mut out);
                }
            }
            ExtractorGrads::Conv { convs, dense } => {
                for c in convs {
                    c.flatten_into(&mut out);
                }
                dense.flatten_into(&mut out);
            }
        }
        self.logits_head.flatten_into(&mut out);
        self.affect_head.flatten_into(&mut out);
        out
    }

    pub fn l2_norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl NetGrads<Dual> {
    /// The derivative payload of every entry: with parameters lifted along
    /// direction v this is exactly `H·v`.
    pub fn tangent(&self) -> NetGrads<f64> {
        fn dense(d: &DenseG<Dual>) -> DenseG<f64> {
            DenseG {
                w: d.w.mapv(|x| x.du),
                b: d.b.mapv(|x| x.du),
            }
        }
        fn conv(c: &Conv2dG<Dual>) -> Conv2dG<f64> {
            Conv2dG {
                w: c.w.mapv(|x| x.du),
                b: c.b.mapv(|x| x.du),
            }
        }
        NetGrads {
            extractor: match &self.extractor {
                ExtractorGrads::Mlp(layers) => ExtractorGrads::Mlp(layers.iter().map(dense).collect()),
                ExtractorGrads::Conv { convs, dense: d } => ExtractorGrads::Conv {
                    convs: convs.iter().map(conv).collect(),
                    dense: dense(d),
                },
            },
            logits_head: dense(&self.logits_head),
            affect_head: dense(&self.affect_head),
        }
    }
}

/// Lifts an f64 network into dual numbers with zero tangents everywhere;
/// combined with [`Network::lift`] this covers both constant and seeded
/// parameter sets.
pub fn lift_constant(net: &Network) -> NetworkG<Dual> {
    net.lift(&net.zero_grads())
}

// ---------------------------------------------------------------------------
// Model state and the public ops.

/// Algorithm-owned parameters living alongside the backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Auxiliary {
    /// CDANN's domain discriminator.
    DomainDiscriminator(Mlp),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub network: Network,
    pub input_shape: InputShape,
    pub feature_dim: usize,
    pub seed: u64,
    pub auxiliary: Option<Auxiliary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input: InputShape,
    /// MLP widths (vector mode) or conv channel counts (image mode).
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

/// Builds the reference backbone: scaled-uniform fan-in init, zero
/// biases, deterministic in `seed`.
pub fn init_reference_backbone(cfg: &BackboneConfig, seed: u64) -> Result<ModelState> {
    if cfg.feature_dim == 0 {
        return Err(AgedgError::Config("feature_dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extractor = match cfg.input {
        InputShape::Vector { dim } => {
            if dim == 0 {
                return Err(AgedgError::Config("input dim must be positive".into()));
            }
            let mut dims = vec![dim];
            dims.extend_from_slice(&cfg.hidden);
            dims.push(cfg.feature_dim);
            ExtractorG::Mlp(Mlp::init(&dims, true, &mut rng))
        }
        InputShape::Image { c, h, w } => {
            if c == 0 || h == 0 || w == 0 {
                return Err(AgedgError::Config("image dims must be positive".into()));
            }
            let mut convs = Vec::new();
            let (mut ch, mut hh, mut ww) = (c, h, w);
            for &out_c in &cfg.hidden {
                if hh < 3 || ww < 3 {
                    return Err(AgedgError::Config(format!(
                        "image collapses to {hh}x{ww} before conv stage {}; use fewer stages",
                        convs.len()
                    )));
                }
                convs.push(Conv2d::init(ch, out_c, 3, &mut rng));
                ch = out_c;
                hh = (hh - 2) / 2;
                ww = (ww - 2) / 2;
                if hh == 0 || ww == 0 {
                    return Err(AgedgError::Config(
                        "image pooled away entirely; use fewer conv stages".into(),
                    ));
                }
            }
            let flat = ch * hh * ww;
            ExtractorG::Conv {
                input: (c, h, w),
                convs,
                dense: Dense::init(flat, cfg.feature_dim, &mut rng),
            }
        }
    };
    let network = Network {
        extractor,
        logits_head: Dense::init(cfg.feature_dim, EMOTION_CLASS_COUNT, &mut rng),
        affect_head: Dense::init(cfg.feature_dim, AFFECT_DIMS, &mut rng),
    };
    Ok(ModelState {
        network,
        input_shape: cfg.input,
        feature_dim: cfg.feature_dim,
        seed,
        auxiliary: None,
    })
}

fn check_input_width(state: &ModelState, x: &Array2<f64>) -> Result<()> {
    let want = state.input_shape.len();
    if x.ncols() != want {
        return Err(AgedgError::ShapeMismatch {
            context: "feature_extract".into(),
            detail: format!("input width {}, model expects {want}", x.ncols()),
        });
    }
    Ok(())
}

/// Maps an input batch to its feature rows (order preserved).
pub fn feature_extract(state: &ModelState, x: &Array2<f64>) -> Result<Array2<f64>> {
    check_input_width(state, x)?;
    Ok(state.network.extract_cached(x).0)
}

/// Applies the classifier heads to feature rows.
pub fn classify(state: &ModelState, features: &Array2<f64>) -> Result<PredictionBatch> {
    if features.ncols() != state.feature_dim {
        return Err(AgedgError::ShapeMismatch {
            context: "classify".into(),
            detail: format!(
                "feature width {}, model expects {}",
                features.ncols(),
                state.feature_dim
            ),
        });
    }
    Ok(state.network.heads_forward(features).into_prediction())
}

/// `classify(feature_extract(x))` in one call.
pub fn forward(state: &ModelState, x: &Array2<f64>) -> Result<PredictionBatch> {
    let features = feature_extract(state, x)?;
    classify(state, &features)
}

// ---------------------------------------------------------------------------
// Checkpoints.

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    state: ModelState,
}

/// Serializes the full state as JSON. Identical states produce identical
/// bytes (field order is fixed and float formatting is canonical).
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        state: state.clone(),
    };
    let text = serde_json::to_string(&file)?;
    std::fs::write(path, text).map_err(|e| AgedgError::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let text =
        std::fs::read_to_string(path).map_err(|e| AgedgError::io(path.display().to_string(), e))?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| AgedgError::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(AgedgError::Checkpoint(format!(
            "{}: version {} unsupported (expected {CHECKPOINT_VERSION})",
            path.display(),
            file.version
        )));
    }
    if !file.state.network.all_finite() {
        return Err(AgedgError::Checkpoint(format!(
            "{}: non-finite parameters",
            path.display()
        )));
    }
    Ok(file.state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{
        composite_loss, composite_loss_core, EmotionTargets, LabelBatch, ShakeWeights,
    };
    use approx::assert_relative_eq;
    use ndarray::Array1;
    use rand::Rng;

    fn vector_state(seed: u64) -> ModelState {
        init_reference_backbone(
            &BackboneConfig {
                input: InputShape::Vector { dim: 6 },
                hidden: vec![8],
                feature_dim: 5,
            },
            seed,
        )
        .unwrap()
    }

    fn random_inputs(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    fn random_labels(n: usize, seed: u64) -> LabelBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LabelBatch {
            emotion: EmotionTargets::Hard(
                (0..n)
                    .map(|_| crate::data::EmotionClass::from_index(rng.random_range(0..8)).unwrap())
                    .collect(),
            ),
            valence: Array1::from_shape_fn(n, |_| rng.random_range(-0.9..0.9)),
            arousal: Array1::from_shape_fn(n, |_| rng.random_range(-0.9..0.9)),
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = vector_state(9);
        let b = vector_state(9);
        assert_eq!(a, b);
        let c = vector_state(10);
        assert_ne!(a, c);
    }

    #[test]
    fn forward_is_deterministic_and_order_preserving() {
        let state = vector_state(1);
        let x = random_inputs(7, 6, 2);
        let p1 = forward(&state, &x).unwrap();
        let p2 = forward(&state, &x).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.logits.nrows(), 7);

        // Row i of a batch equals a singleton forward of row i.
        let row = x.row(3).insert_axis(ndarray::Axis(0)).to_owned();
        let single = forward(&state, &row).unwrap();
        for k in 0..8 {
            assert_relative_eq!(single.logits[[0, k]], p1.logits[[3, k]], epsilon = 1e-12);
        }
    }

    #[test]
    fn affect_outputs_live_in_unit_interval_and_compose() {
        let state = vector_state(3);
        let x = random_inputs(20, 6, 4);
        let features = feature_extract(&state, &x).unwrap();
        assert_eq!(features.ncols(), 5);
        let via_two_calls = classify(&state, &features).unwrap();
        let via_forward = forward(&state, &x).unwrap();
        assert_eq!(via_two_calls, via_forward);
        for v in via_forward.valence.iter().chain(via_forward.arousal.iter()) {
            assert!((-1.0..=1.0).contains(v));
        }
    }

    #[test]
    fn zero_classifier_gives_neutral_outputs() {
        let mut state = vector_state(5);
        state.network.logits_head = state.network.logits_head.zeros_like();
        state.network.affect_head = state.network.affect_head.zeros_like();
        let p = forward(&state, &random_inputs(4, 6, 6)).unwrap();
        assert!(p.logits.iter().all(|&v| v == 0.0));
        assert!(p.valence.iter().all(|&v| v == 0.0));
        assert!(p.arousal.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_final_extractor_layer_zeroes_features() {
        let mut state = vector_state(5);
        if let ExtractorG::Mlp(mlp) = &mut state.network.extractor {
            let last = mlp.layers.last_mut().unwrap();
            *last = last.zeros_like();
        }
        let f = feature_extract(&state, &random_inputs(3, 6, 7)).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_width_mismatch_is_an_error() {
        let state = vector_state(0);
        assert!(forward(&state, &random_inputs(3, 7, 0)).is_err());
        assert!(classify(&state, &random_inputs(3, 4, 0)).is_err());
    }

    /// End-to-end gradient of the composite loss through every network
    /// parameter, against central finite differences.
    fn check_network_gradient(state: &ModelState, x: &Array2<f64>, tol: f64) {
        let labels = random_labels(x.nrows(), 31);
        let w = ShakeWeights {
            alpha: 0.6,
            beta: 0.3,
            gamma: 0.8,
        };

        let net = &state.network;
        let (features, cache) = net.extract_cached(x);
        let outputs = net.heads_forward(&features);
        let out = composite_loss_core(
            &outputs.logits,
            &outputs.valence(),
            &outputs.arousal(),
            &labels,
            &w,
        )
        .unwrap();
        let d_affect = ndarray::stack![
            ndarray::Axis(1),
            out.d_valence,
            out.d_arousal
        ];
        let (lg, ag, d_feat) = net.heads_backward(&features, &outputs, &out.d_logits, &d_affect);
        let ext = net.extract_backward(&cache, &d_feat);
        let mut grads = net.zero_grads();
        grads.extractor = ext;
        grads.logits_head = lg;
        grads.affect_head = ag;
        let flat_grad = grads.flatten();

        let theta = net.flatten_params();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..theta.len() {
            let eval = |v: &[f64]| {
                let mut n2 = net.clone();
                n2.set_params(v);
                let (f, _) = n2.extract_cached(x);
                let o = n2.heads_forward(&f);
                composite_loss(&o.into_prediction(), &labels, &w).unwrap()
            };
            let mut tp = theta.clone();
            tp[i] += h;
            let mut tm = theta.clone();
            tm[i] -= h;
            let fd = (eval(&tp) - eval(&tm)) / (2.0 * h);
            let rel = (flat_grad[i] - fd).abs() / flat_grad[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(
                rel < tol,
                "param {i}: analytic {} vs fd {fd} (rel {rel})",
                flat_grad[i]
            );
        }
        assert!(worst < tol);
    }

    #[test]
    fn mlp_network_gradient_matches_finite_differences() {
        let state = vector_state(12);
        let x = random_inputs(4, 6, 30);
        check_network_gradient(&state, &x, 1e-4);
    }

    #[test]
    fn conv_network_gradient_matches_finite_differences() {
        let state = init_reference_backbone(
            &BackboneConfig {
                input: InputShape::Image { c: 1, h: 8, w: 8 },
                hidden: vec![2],
                feature_dim: 4,
            },
            77,
        )
        .unwrap();
        let x = random_inputs(4, 64, 31);
        check_network_gradient(&state, &x, 1e-4);
    }

    #[test]
    fn conv_feature_width_matches_feature_dim() {
        let state = init_reference_backbone(
            &BackboneConfig {
                input: InputShape::Image { c: 1, h: 16, w: 16 },
                hidden: vec![3, 4],
                feature_dim: 10,
            },
            2,
        )
        .unwrap();
        let f = feature_extract(&state, &random_inputs(2, 256, 3)).unwrap();
        assert_eq!(f.dim(), (2, 10));
    }

    #[test]
    fn oversized_conv_stack_rejected() {
        let err = init_reference_backbone(
            &BackboneConfig {
                input: InputShape::Image { c: 1, h: 8, w: 8 },
                hidden: vec![2, 2, 2],
                feature_dim: 4,
            },
            0,
        );
        assert!(err.is_err());
    }

    #[test]
    fn param_flatten_set_round_trip() {
        let state = vector_state(8);
        let theta = state.network.flatten_params();
        assert_eq!(theta.len(), state.network.param_count());
        let mut other = vector_state(9).network;
        other.set_params(&theta);
        assert_eq!(other, state.network);
    }

    #[test]
    fn scaled_add_updates_without_shape_change() {
        let state = vector_state(4);
        let mut net = state.network.clone();
        let mut grads = net.zero_grads();
        grads.logits_head.w[[0, 0]] = 2.0;
        net.scaled_add(-0.5, &grads);
        assert_eq!(net.param_count(), state.network.param_count());
        assert_relative_eq!(
            net.logits_head.w[[0, 0]],
            state.network.logits_head.w[[0, 0]] - 1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn checkpoint_round_trip_and_byte_stability() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = vector_state(123);
        state.auxiliary = Some(Auxiliary::DomainDiscriminator(Mlp::init(
            &[13, 6, 5],
            false,
            &mut ChaCha8Rng::seed_from_u64(5),
        )));
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        save_checkpoint(&state, &p1).unwrap();
        save_checkpoint(&state, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded, state);
    }

    #[test]
    fn checkpoint_version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        save_checkpoint(&vector_state(1), &p).unwrap();
        let text = std::fs::read_to_string(&p)
            .unwrap()
            .replacen("\"version\":1", "\"version\":9", 1);
        std::fs::write(&p, text).unwrap();
        match load_checkpoint(&p) {
            Err(AgedgError::Checkpoint(msg)) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn dual_backward_tangent_matches_directional_derivative_of_gradient() {
        // Finite-difference check of the Hessian-vector product: compare
        // (grad(theta + h v) - grad(theta - h v)) / 2h with the tangent of
        // the dual backward pass.
        let state = vector_state(44);
        let x = random_inputs(5, 6, 45);
        let labels = random_labels(5, 46);
        let w = ShakeWeights::uniform();

        let grad_at = |params: &[f64]| -> Vec<f64> {
            let mut net = state.network.clone();
            net.set_params(params);
            let (features, cache) = net.extract_cached(&x);
            let outputs = net.heads_forward(&features);
            let out = composite_loss_core(
                &outputs.logits,
                &outputs.valence(),
                &outputs.arousal(),
                &labels,
                &w,
            )
            .unwrap();
            let d_affect = ndarray::stack![ndarray::Axis(1), out.d_valence, out.d_arousal];
            let (lg, ag, d_feat) =
                net.heads_backward(&features, &outputs, &out.d_logits, &d_affect);
            let mut grads = net.zero_grads();
            grads.extractor = net.extract_backward(&cache, &d_feat);
            grads.logits_head = lg;
            grads.affect_head = ag;
            grads.flatten()
        };

        // A deterministic direction: the gradient itself.
        let theta = state.network.flatten_params();
        let g0 = grad_at(&theta);
        let mut dir = state.network.zero_grads();
        // Reuse the flatten layout to load the direction.
        {
            let mut net = state.network.clone();
            net.set_params(&g0);
            dir.extractor = match net.extractor {
                ExtractorG::Mlp(m) => ExtractorGrads::Mlp(m.layers),
                ExtractorG::Conv { convs, dense, .. } => ExtractorGrads::Conv { convs, dense },
            };
            dir.logits_head = net.logits_head;
            dir.affect_head = net.affect_head;
        }

        let lifted = state.network.lift(&dir);
        let xd = x.mapv(Dual::constant);
        let (features, cache) = lifted.extract_cached(&xd);
        let outputs = lifted.heads_forward(&features);
        let out = composite_loss_core(
            &outputs.logits,
            &outputs.valence(),
            &outputs.arousal(),
            &labels,
            &w,
        )
        .unwrap();
        let d_affect = ndarray::stack![ndarray::Axis(1), out.d_valence, out.d_arousal];
        let (lg, ag, d_feat) = lifted.heads_backward(&features, &outputs, &out.d_logits, &d_affect);
        let mut dual_grads = lifted.zero_grads();
        dual_grads.extractor = lifted.extract_backward(&cache, &d_feat);
        dual_grads.logits_head = lg;
        dual_grads.affect_head = ag;
        let hvp = dual_grads.tangent().flatten();

        let h = 1e-5;
        let tp: Vec<f64> = theta.iter().zip(&g0).map(|(t, d)| t + h * d).collect();
        let tm: Vec<f64> = theta.iter().zip(&g0).map(|(t, d)| t - h * d).collect();
        let gp = grad_at(&tp);
        let gm = grad_at(&tm);
        for i in 0..theta.len() {
            let fd = (gp[i] - gm[i]) / (2.0 * h);
            let rel = (hvp[i] - fd).abs() / hvp[i].abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-3, "hvp[{i}] = {} vs fd {fd}", hvp[i]);
        }
    }
}
