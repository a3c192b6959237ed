//! Minimal dense / convolutional layers with hand-written backward passes.
//!
//! Everything is generic over [`Scalar`] so the identical code path serves
//! f64 training and dual-number Hessian-vector products. Layers store no
//! activations; callers keep the forward caches and pass them back in,
//! which keeps forward evaluation pure.

pub mod scalar;

pub use scalar::{Dual, Scalar};

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Fully connected layer, `y = x·w + b`, weights laid out `[in, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseG<S> {
    pub w: Array2<S>,
    pub b: Array1<S>,
}

pub type Dense = DenseG<f64>;

impl Dense {
    /// Scaled-uniform fan-in init: `U(-1/sqrt(in), 1/sqrt(in))`, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Dense {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = Array2::from_shape_fn((in_dim, out_dim), |_| rng.random_range(-bound..bound));
        DenseG {
            w,
            b: Array1::zeros(out_dim),
        }
    }

    /// Pairs each parameter with a direction component, producing the dual
    /// layer used for Hessian-vector products.
    pub fn lift(&self, dir: &Dense) -> DenseG<Dual> {
        DenseG {
            w: ndarray::Zip::from(&self.w)
                .and(&dir.w)
                .map_collect(|&re, &du| Dual::new(re, du)),
            b: ndarray::Zip::from(&self.b)
                .and(&dir.b)
                .map_collect(|&re, &du| Dual::new(re, du)),
        }
    }
}

impl<S: Scalar> DenseG<S> {
    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<S>) -> Array2<S> {
        x.dot(&self.w) + &self.b
    }

    /// Returns parameter gradients and the input gradient for upstream
    /// gradient `dy` (shape `[n, out]`) at input `x` (shape `[n, in]`).
    pub fn backward(&self, x: &Array2<S>, dy: &Array2<S>) -> (DenseG<S>, Array2<S>) {
        let dw = x.t().dot(dy);
        let db = dy.sum_axis(Axis(0));
        let dx = dy.dot(&self.w.t());
        (DenseG { w: dw, b: db }, dx)
    }

    pub fn zeros_like(&self) -> DenseG<S> {
        DenseG {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Appends all parameters (row-major weights, then bias) as f64.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend(self.w.iter().map(|s| s.value()));
        out.extend(self.b.iter().map(|s| s.value()));
    }

    /// `self += c * other`, entry-wise.
    pub fn scaled_add(&mut self, c: S, other: &DenseG<S>) {
        ndarray::Zip::from(&mut self.w)
            .and(&other.w)
            .for_each(|a, &g| *a += c * g);
        ndarray::Zip::from(&mut self.b)
            .and(&other.b)
            .for_each(|a, &g| *a += c * g);
    }
}

impl DenseG<f64> {
    /// Reads parameters back in `flatten_into` order, advancing `pos`.
    pub fn assign_from_slice(&mut self, v: &[f64], pos: &mut usize) {
        for a in self.w.iter_mut() {
            *a = v[*pos];
            *pos += 1;
        }
        for a in self.b.iter_mut() {
            *a = v[*pos];
            *pos += 1;
        }
    }
}

/// Stack of dense layers with tanh between them; `tanh_last` controls
/// whether the final layer's output is also squashed (the feature
/// extractor says yes, the CDANN discriminator's logit layer says no).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpG<S> {
    pub layers: Vec<DenseG<S>>,
    pub tanh_last: bool,
}

pub type Mlp = MlpG<f64>;

impl Mlp {
    pub fn init(dims: &[usize], tanh_last: bool, rng: &mut impl Rng) -> Mlp {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], rng))
            .collect();
        MlpG { layers, tanh_last }
    }

    pub fn lift(&self, dir: &Mlp) -> MlpG<Dual> {
        MlpG {
            layers: self
                .layers
                .iter()
                .zip(&dir.layers)
                .map(|(l, d)| l.lift(d))
                .collect(),
            tanh_last: self.tanh_last,
        }
    }
}

impl<S: Scalar> MlpG<S> {
    /// Activations per stage: `acts[0]` is the input, `acts[i+1]` the
    /// output of layer `i` (after tanh where tanh applies).
    pub fn forward_cached(&self, x: &Array2<S>) -> Vec<Array2<S>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(acts.last().unwrap());
            let squash = self.tanh_last || i + 1 < self.layers.len();
            acts.push(if squash { z.mapv(Scalar::tanh) } else { z });
        }
        acts
    }

    pub fn forward(&self, x: &Array2<S>) -> Array2<S> {
        self.forward_cached(x).pop().unwrap()
    }

    /// Backward through the whole stack given the caches from
    /// [`MlpG::forward_cached`]; returns per-layer gradients (same order
    /// as `layers`) and the gradient at the input.
    pub fn backward(&self, acts: &[Array2<S>], d_out: &Array2<S>) -> (Vec<DenseG<S>>, Array2<S>) {
        assert_eq!(acts.len(), self.layers.len() + 1);
        let mut grads: Vec<DenseG<S>> = Vec::with_capacity(self.layers.len());
        let mut d = d_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let squash = self.tanh_last || i + 1 < self.layers.len();
            if squash {
                let a = &acts[i + 1];
                d = ndarray::Zip::from(&d)
                    .and(a)
                    .map_collect(|&g, &y| g * (S::one() - y * y));
            }
            let (lg, dx) = layer.backward(&acts[i], &d);
            grads.push(lg);
            d = dx;
        }
        grads.reverse();
        (grads, d)
    }

    pub fn zeros_like(&self) -> Vec<DenseG<S>> {
        self.layers.iter().map(|l| l.zeros_like()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            l.flatten_into(out);
        }
    }

    pub fn scaled_add(&mut self, c: S, grads: &[DenseG<S>]) {
        assert_eq!(grads.len(), self.layers.len());
        for (l, g) in self.layers.iter_mut().zip(grads) {
            l.scaled_add(c, g);
        }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty MLP").out_dim()
    }
}

impl MlpG<f64> {
    pub fn assign_from_slice(&mut self, v: &[f64], pos: &mut usize) {
        for l in &mut self.layers {
            l.assign_from_slice(v, pos);
        }
    }
}

/// 3x3 valid convolution. Weights `[out_c, in_c, kh, kw]`, inputs
/// `[n, c, h, w]`. Loop-based: the reference image mode is 16x16 with a
/// handful of channels, so clarity beats throughput here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2dG<S> {
    pub w: Array4<S>,
    pub b: Array1<S>,
}

pub type Conv2d = Conv2dG<f64>;

impl Conv2d {
    pub fn init(in_c: usize, out_c: usize, k: usize, rng: &mut impl Rng) -> Conv2d {
        let fan_in = (in_c * k * k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let w = Array4::from_shape_fn((out_c, in_c, k, k), |_| rng.random_range(-bound..bound));
        Conv2dG {
            w,
            b: Array1::zeros(out_c),
        }
    }

    pub fn lift(&self, dir: &Conv2d) -> Conv2dG<Dual> {
        Conv2dG {
            w: ndarray::Zip::from(&self.w)
                .and(&dir.w)
                .map_collect(|&re, &du| Dual::new(re, du)),
            b: ndarray::Zip::from(&self.b)
                .and(&dir.b)
                .map_collect(|&re, &du| Dual::new(re, du)),
        }
    }
}

impl<S: Scalar> Conv2dG<S> {
    pub fn forward(&self, x: &Array4<S>) -> Array4<S> {
        let (n, in_c, h, w) = x.dim();
        let (out_c, wc, kh, kw) = self.w.dim();
        assert_eq!(in_c, wc, "channel mismatch in conv forward");
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let mut y = Array4::zeros((n, out_c, oh, ow));
        for ni in 0..n {
            for o in 0..out_c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = self.b[o];
                        for c in 0..in_c {
                            for di in 0..kh {
                                for dj in 0..kw {
                                    acc += x[[ni, c, i + di, j + dj]] * self.w[[o, c, di, dj]];
                                }
                            }
                        }
                        y[[ni, o, i, j]] = acc;
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, x: &Array4<S>, dy: &Array4<S>) -> (Conv2dG<S>, Array4<S>) {
        let (n, in_c, _, _) = x.dim();
        let (out_c, _, kh, kw) = self.w.dim();
        let (_, _, oh, ow) = dy.dim();
        let mut dw = Array4::zeros(self.w.raw_dim());
        let mut db = Array1::zeros(self.b.raw_dim());
        let mut dx = Array4::zeros(x.raw_dim());
        for ni in 0..n {
            for o in 0..out_c {
                for i in 0..oh {
                    for j in 0..ow {
                        let g = dy[[ni, o, i, j]];
                        db[o] += g;
                        for c in 0..in_c {
                            for di in 0..kh {
                                for dj in 0..kw {
                                    dw[[o, c, di, dj]] += g * x[[ni, c, i + di, j + dj]];
                                    dx[[ni, c, i + di, j + dj]] += g * self.w[[o, c, di, dj]];
                                }
                            }
                        }
                    }
                }
            }
        }
        (Conv2dG { w: dw, b: db }, dx)
    }

    pub fn zeros_like(&self) -> Conv2dG<S> {
        Conv2dG {
            w: Array4::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend(self.w.iter().map(|s| s.value()));
        out.extend(self.b.iter().map(|s| s.value()));
    }

    pub fn scaled_add(&mut self, c: S, other: &Conv2dG<S>) {
        ndarray::Zip::from(&mut self.w)
            .and(&other.w)
            .for_each(|a, &g| *a += c * g);
        ndarray::Zip::from(&mut self.b)
            .and(&other.b)
            .for_each(|a, &g| *a += c * g);
    }
}

impl Conv2dG<f64> {
    pub fn assign_from_slice(&mut self, v: &[f64], pos: &mut usize) {
        for a in self.w.iter_mut() {
            *a = v[*pos];
            *pos += 1;
        }
        for a in self.b.iter_mut() {
            *a = v[*pos];
            *pos += 1;
        }
    }
}

/// 2x2 average pooling, stride 2, trailing odd row/column dropped.
pub fn avg_pool2<S: Scalar>(x: &Array4<S>) -> Array4<S> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::from_f64(0.25);
    let mut y = Array4::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let s = x[[ni, ci, 2 * i, 2 * j]]
                        + x[[ni, ci, 2 * i, 2 * j + 1]]
                        + x[[ni, ci, 2 * i + 1, 2 * j]]
                        + x[[ni, ci, 2 * i + 1, 2 * j + 1]];
                    y[[ni, ci, i, j]] = s * quarter;
                }
            }
        }
    }
    y
}

pub fn avg_pool2_backward<S: Scalar>(input_dim: (usize, usize, usize, usize), dy: &Array4<S>) -> Array4<S> {
    let (_, _, oh, ow) = dy.dim();
    let quarter = S::from_f64(0.25);
    let mut dx = Array4::zeros(input_dim);
    let (n, c, _, _) = input_dim;
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let g = dy[[ni, ci, i, j]] * quarter;
                    dx[[ni, ci, 2 * i, 2 * j]] += g;
                    dx[[ni, ci, 2 * i, 2 * j + 1]] += g;
                    dx[[ni, ci, 2 * i + 1, 2 * j]] += g;
                    dx[[ni, ci, 2 * i + 1, 2 * j + 1]] += g;
                }
            }
        }
    }
    dx
}
