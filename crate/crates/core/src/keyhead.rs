//! Toy transformer encoder with the gated-sum keypoint head.
//!
//! The image is cut into non-overlapping patches, each patch is linearly
//! embedded and a fixed 2D sinusoidal positional encoding is added. `N`
//! pre-norm encoder layers follow. The head mean-pools every layer output
//! into an intermediate representation (IR), projects each IR to a compact
//! 2K-dimensional representation (CR), and mixes the CRs with softmax gate
//! weights computed from the last IR. A ReLU yields the coordinates.
//!
//! Weights use the `out × in` layout: `y = W·x + b`, token matrices are
//! `P × d` and multiply as `X·Wᵀ`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{DataError, FrameRecord, Keypoints2D, NUM_KEYPOINTS};
use crate::synth::{render_frame, RasterImage, SynthError};

/// Output width of the head: (x, y) for every keypoint.
pub const OUTPUT_DIM: usize = 2 * NUM_KEYPOINTS;
pub const CHECKPOINT_FORMAT: &str = "dronekey-checkpoint-v1";
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum KeyheadError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error("trace does not belong to this model")]
    StaleTrace,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Render(#[from] SynthError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_width: 64,
            image_height: 64,
            patch: 8,
            d_model: 64,
            heads: 4,
            layers: 6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), KeyheadError> {
        let bad = |m: &str| Err(KeyheadError::Dimension(m.to_string()));
        if self.patch == 0
            || !self.image_width.is_multiple_of(self.patch)
            || !self.image_height.is_multiple_of(self.patch)
        {
            return bad("image size must be divisible by the patch size");
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be a positive multiple of heads");
        }
        if !self.d_model.is_multiple_of(4) {
            return bad("d_model must be divisible by 4 for the 2D positional encoding");
        }
        if self.layers == 0 {
            return bad("at least one encoder layer is required");
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_height / self.patch,
            self.image_width / self.patch,
        )
    }

    pub fn num_tokens(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// All trainable parameters. The same type doubles as a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub patch_w: Array2<f64>,
    pub patch_b: Array1<f64>,
    pub layers: Vec<LayerParams>,
    /// Per-layer CR projection, `2K × d`.
    pub cr_w: Vec<Array2<f64>>,
    pub cr_b: Vec<Array1<f64>>,
    /// Gate projection, `N × d`.
    pub gate_w: Array2<f64>,
    pub gate_b: Array1<f64>,
}

fn xavier<R: Rng>(rng: &mut R, out: usize, inp: usize) -> Array2<f64> {
    let limit = (6.0 / (out + inp) as f64).sqrt();
    Array2::from_shape_fn((out, inp), |_| rng.random_range(-limit..limit))
}

impl EncoderModel {
    /// Xavier-uniform projections, zero biases, unit layer-norm gains.
    /// CR biases start at the raster center so the ReLU output is active.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, KeyheadError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let f = config.ffn_dim();
        let n = config.layers;
        let patch_w = xavier(&mut rng, d, config.patch_dim());
        let layers = (0..n)
            .map(|_| LayerParams {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                wq: xavier(&mut rng, d, d),
                bq: Array1::zeros(d),
                wk: xavier(&mut rng, d, d),
                bk: Array1::zeros(d),
                wv: xavier(&mut rng, d, d),
                bv: Array1::zeros(d),
                wo: xavier(&mut rng, d, d),
                bo: Array1::zeros(d),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w1: xavier(&mut rng, f, d),
                b1: Array1::zeros(f),
                w2: xavier(&mut rng, d, f),
                b2: Array1::zeros(d),
            })
            .collect();
        let center = Array1::from_shape_fn(OUTPUT_DIM, |i| {
            if i % 2 == 0 {
                config.image_width as f64 / 2.0
            } else {
                config.image_height as f64 / 2.0
            }
        });
        let cr_w = (0..n).map(|_| xavier(&mut rng, OUTPUT_DIM, d)).collect();
        let cr_b = vec![center; n];
        let gate_w = xavier(&mut rng, n, d);
        Ok(Self {
            config,
            patch_w,
            patch_b: Array1::zeros(d),
            layers,
            cr_w,
            cr_b,
            gate_w,
            gate_b: Array1::zeros(n),
        })
    }

    /// Same shapes, all entries zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_param_mut(|_, p| p.fill(0.0));
        z
    }

    /// Visits every parameter tensor in a fixed order with its checkpoint name.
    pub fn for_each_param(&self, mut f: impl FnMut(&str, &[f64])) {
        let mut visit = |name: String, p: &[f64]| f(&name, p);
        visit("patch_embed.w".into(), self.patch_w.as_slice().unwrap());
        visit("patch_embed.b".into(), self.patch_b.as_slice().unwrap());
        for (i, l) in self.layers.iter().enumerate() {
            let n = i + 1;
            visit(format!("layer{n}.ln1.g"), l.ln1_g.as_slice().unwrap());
            visit(format!("layer{n}.ln1.b"), l.ln1_b.as_slice().unwrap());
            visit(format!("layer{n}.attn.q.w"), l.wq.as_slice().unwrap());
            visit(format!("layer{n}.attn.q.b"), l.bq.as_slice().unwrap());
            visit(format!("layer{n}.attn.k.w"), l.wk.as_slice().unwrap());
            visit(format!("layer{n}.attn.k.b"), l.bk.as_slice().unwrap());
            visit(format!("layer{n}.attn.v.w"), l.wv.as_slice().unwrap());
            visit(format!("layer{n}.attn.v.b"), l.bv.as_slice().unwrap());
            visit(format!("layer{n}.attn.o.w"), l.wo.as_slice().unwrap());
            visit(format!("layer{n}.attn.o.b"), l.bo.as_slice().unwrap());
            visit(format!("layer{n}.ln2.g"), l.ln2_g.as_slice().unwrap());
            visit(format!("layer{n}.ln2.b"), l.ln2_b.as_slice().unwrap());
            visit(format!("layer{n}.ffn.fc1.w"), l.w1.as_slice().unwrap());
            visit(format!("layer{n}.ffn.fc1.b"), l.b1.as_slice().unwrap());
            visit(format!("layer{n}.ffn.fc2.w"), l.w2.as_slice().unwrap());
            visit(format!("layer{n}.ffn.fc2.b"), l.b2.as_slice().unwrap());
        }
        for (i, (w, b)) in self.cr_w.iter().zip(&self.cr_b).enumerate() {
            visit(format!("cr_proj.{}.w", i + 1), w.as_slice().unwrap());
            visit(format!("cr_proj.{}.b", i + 1), b.as_slice().unwrap());
        }
        visit("gate_proj.w".into(), self.gate_w.as_slice().unwrap());
        visit("gate_proj.b".into(), self.gate_b.as_slice().unwrap());
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        let mut visit = |name: String, p: &mut [f64]| f(&name, p);
        visit("patch_embed.w".into(), self.patch_w.as_slice_mut().unwrap());
        visit("patch_embed.b".into(), self.patch_b.as_slice_mut().unwrap());
        for (i, l) in self.layers.iter_mut().enumerate() {
            let n = i + 1;
            visit(format!("layer{n}.ln1.g"), l.ln1_g.as_slice_mut().unwrap());
            visit(format!("layer{n}.ln1.b"), l.ln1_b.as_slice_mut().unwrap());
            visit(format!("layer{n}.attn.q.w"), l.wq.as_slice_mut().unwrap());
            visit(format!("layer{n}.attn.q.b"), l.bq.as_slice_mut().unwrap());
            visit(format!("layer{n}.attn.k.w"), l.wk.as_slice_mut().unwrap());
            visit(format!("layer{n}.attn.k.b"), l.bk.as_slice_mut().unwrap());
            visit(format!("layer{n}.attn.v.w"), l.wv.as_slice_mut().unwrap());
            visit(format!("layer{n}.attn.v.b"), l.bv.as_slice_mut().unwrap());
            visit(format!("layer{n}.attn.o.w"), l.wo.as_slice_mut().unwrap());
            visit(format!("layer{n}.attn.o.b"), l.bo.as_slice_mut().unwrap());
            visit(format!("layer{n}.ln2.g"), l.ln2_g.as_slice_mut().unwrap());
            visit(format!("layer{n}.ln2.b"), l.ln2_b.as_slice_mut().unwrap());
            visit(format!("layer{n}.ffn.fc1.w"), l.w1.as_slice_mut().unwrap());
            visit(format!("layer{n}.ffn.fc1.b"), l.b1.as_slice_mut().unwrap());
            visit(format!("layer{n}.ffn.fc2.w"), l.w2.as_slice_mut().unwrap());
            visit(format!("layer{n}.ffn.fc2.b"), l.b2.as_slice_mut().unwrap());
        }
        for (i, (w, b)) in self.cr_w.iter_mut().zip(self.cr_b.iter_mut()).enumerate() {
            visit(format!("cr_proj.{}.w", i + 1), w.as_slice_mut().unwrap());
            visit(format!("cr_proj.{}.b", i + 1), b.as_slice_mut().unwrap());
        }
        visit("gate_proj.w".into(), self.gate_w.as_slice_mut().unwrap());
        visit("gate_proj.b".into(), self.gate_b.as_slice_mut().unwrap());
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, p| n += p.len());
        n
    }

    /// Elementwise `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &EncoderModel) {
        let mut theirs = Vec::new();
        other.for_each_param(|_, p| theirs.push(p.to_vec()));
        let mut it = theirs.into_iter();
        self.for_each_param_mut(|_, p| {
            let o = it.next().expect("matching parameter layout");
            for (a, b) in p.iter_mut().zip(o) {
                *a += b;
            }
        });
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_param_mut(|_, p| p.iter_mut().for_each(|v| *v *= factor));
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_param(|_, p| ok &= p.iter().all(|v| v.is_finite()));
        ok
    }

    /// FNV-1a over parameter bits; used to detect traces from another model.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        self.for_each_param(|_, p| {
            for v in p {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        });
        h
    }
}

/// 2D sinusoidal encoding: the first half of the channels encodes the patch
/// row, the second half the patch column.
pub fn positional_encoding(config: &ModelConfig) -> Array2<f64> {
    let (rows, cols) = config.grid();
    let d = config.d_model;
    let half = d / 2;
    let mut pe = Array2::zeros((rows * cols, d));
    for r in 0..rows {
        for c in 0..cols {
            let p = r * cols + c;
            for (offset, pos) in [(0, r as f64), (half, c as f64)] {
                for i in 0..half / 2 {
                    let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                    pe[[p, offset + 2 * i]] = (pos * freq).sin();
                    pe[[p, offset + 2 * i + 1]] = (pos * freq).cos();
                }
            }
        }
    }
    pe
}

/// `P × d` token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub tokens: Array2<f64>,
}

fn extract_patches(img: &RasterImage, config: &ModelConfig) -> Result<Array2<f64>, KeyheadError> {
    if img.width != config.image_width || img.height != config.image_height {
        return Err(KeyheadError::Dimension(format!(
            "image {}x{} does not match model input {}x{}",
            img.width, img.height, config.image_width, config.image_height
        )));
    }
    let ps = config.patch;
    let (rows, cols) = config.grid();
    let mut out = Array2::zeros((rows * cols, ps * ps));
    for r in 0..rows {
        for c in 0..cols {
            let p = r * cols + c;
            for y in 0..ps {
                for x in 0..ps {
                    out[[p, y * ps + x]] = img.get(c * ps + x, r * ps + y);
                }
            }
        }
    }
    Ok(out)
}

pub fn tokenize(img: &RasterImage, model: &EncoderModel) -> Result<TokenGrid, KeyheadError> {
    let patches = extract_patches(img, &model.config)?;
    Ok(TokenGrid {
        tokens: embed(&patches, model),
    })
}

fn embed(patches: &Array2<f64>, model: &EncoderModel) -> Array2<f64> {
    patches.dot(&model.patch_w.t()) + &model.patch_b + positional_encoding(&model.config)
}

fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(&w.t()) + b
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mean = x.mean_axis(Axis(1)).unwrap();
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * inv_std.view().insert_axis(Axis(1));
    let y = &xhat * g + b;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    g: &Array1<f64>,
    cache: &LnCache,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let mean_dxhat = dxhat.mean_axis(Axis(1)).unwrap();
    let mean_dxhat_xhat = (&dxhat * &cache.xhat).mean_axis(Axis(1)).unwrap();
    let inner = dxhat
        - mean_dxhat.view().insert_axis(Axis(1))
        - &(&cache.xhat * &mean_dxhat_xhat.view().insert_axis(Axis(1)));
    inner * cache.inv_std.view().insert_axis(Axis(1))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let sum = row.sum();
        row /= sum;
    }
}

pub fn softmax(v: &Array1<f64>) -> Array1<f64> {
    let m = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = v.mapv(|x| (x - m).exp());
    let s = e.sum();
    e / s
}

/// Activations retained from one encoder layer.
#[derive(Debug, Clone)]
pub struct LayerCache {
    ln1_xhat: Array2<f64>,
    ln1_inv_std: Array1<f64>,
    normed1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    heads_out: Array2<f64>,
    ln2_xhat: Array2<f64>,
    ln2_inv_std: Array1<f64>,
    normed2: Array2<f64>,
    pre_act: Array2<f64>,
    hidden: Array2<f64>,
}

fn layer_forward(x: &Array2<f64>, p: &LayerParams, heads: usize) -> (Array2<f64>, LayerCache) {
    let (tokens, d) = x.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (normed1, ln1) = layer_norm(x, &p.ln1_g, &p.ln1_b);
    let q = linear(&normed1, &p.wq, &p.bq);
    let k = linear(&normed1, &p.wk, &p.bk);
    let v = linear(&normed1, &p.wv, &p.bv);
    let mut heads_out = Array2::zeros((tokens, d));
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut a);
        heads_out.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
        attn.push(a);
    }
    let x1 = x + &linear(&heads_out, &p.wo, &p.bo);
    let (normed2, ln2) = layer_norm(&x1, &p.ln2_g, &p.ln2_b);
    let pre_act = linear(&normed2, &p.w1, &p.b1);
    let hidden = pre_act.mapv(gelu);
    let out = &x1 + &linear(&hidden, &p.w2, &p.b2);
    let cache = LayerCache {
        ln1_xhat: ln1.xhat,
        ln1_inv_std: ln1.inv_std,
        normed1,
        q,
        k,
        v,
        attn,
        heads_out,
        ln2_xhat: ln2.xhat,
        ln2_inv_std: ln2.inv_std,
        normed2,
        pre_act,
        hidden,
    };
    (out, cache)
}

/// Returns the gradient with respect to the layer input and accumulates
/// parameter gradients into `g`.
fn layer_backward(
    dout: &Array2<f64>,
    p: &LayerParams,
    c: &LayerCache,
    heads: usize,
    g: &mut LayerParams,
) -> Array2<f64> {
    let d = dout.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // feed-forward branch
    g.w2 += &dout.t().dot(&c.hidden);
    g.b2 += &dout.sum_axis(Axis(0));
    let dhidden = dout.dot(&p.w2);
    let dpre = dhidden * &c.pre_act.mapv(gelu_grad);
    g.w1 += &dpre.t().dot(&c.normed2);
    g.b1 += &dpre.sum_axis(Axis(0));
    let dnormed2 = dpre.dot(&p.w1);
    let ln2 = LnCache {
        xhat: c.ln2_xhat.clone(),
        inv_std: c.ln2_inv_std.clone(),
    };
    let dx1 = dout + &layer_norm_backward(&dnormed2, &p.ln2_g, &ln2, &mut g.ln2_g, &mut g.ln2_b);

    // attention branch
    g.wo += &dx1.t().dot(&c.heads_out);
    g.bo += &dx1.sum_axis(Axis(0));
    let dheads = dx1.dot(&p.wo);
    let mut dq = Array2::zeros(c.q.dim());
    let mut dk = Array2::zeros(c.k.dim());
    let mut dv = Array2::zeros(c.v.dim());
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let a = &c.attn[h];
        let dho = dheads.slice(cols);
        let da = dho.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&dho));
        let row_dot = (&da * a).sum_axis(Axis(1));
        let ds = (da - row_dot.view().insert_axis(Axis(1))) * a * scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    g.wq += &dq.t().dot(&c.normed1);
    g.bq += &dq.sum_axis(Axis(0));
    g.wk += &dk.t().dot(&c.normed1);
    g.bk += &dk.sum_axis(Axis(0));
    g.wv += &dv.t().dot(&c.normed1);
    g.bv += &dv.sum_axis(Axis(0));
    let dnormed1 = dq.dot(&p.wq) + dk.dot(&p.wk) + dv.dot(&p.wv);
    let ln1 = LnCache {
        xhat: c.ln1_xhat.clone(),
        inv_std: c.ln1_inv_std.clone(),
    };
    dx1 + layer_norm_backward(&dnormed1, &p.ln1_g, &ln1, &mut g.ln1_g, &mut g.ln1_b)
}

/// Runs the encoder stack; returns every layer output `X_EN^(l)`.
pub fn encoder_forward(
    tokens: &TokenGrid,
    model: &EncoderModel,
) -> Result<Vec<Array2<f64>>, KeyheadError> {
    Ok(encoder_forward_cached(tokens, model)?.0)
}

fn encoder_forward_cached(
    tokens: &TokenGrid,
    model: &EncoderModel,
) -> Result<(Vec<Array2<f64>>, Vec<LayerCache>), KeyheadError> {
    let cfg = &model.config;
    if tokens.tokens.dim() != (cfg.num_tokens(), cfg.d_model) {
        return Err(KeyheadError::Dimension(format!(
            "tokens {:?} vs model ({}, {})",
            tokens.tokens.dim(),
            cfg.num_tokens(),
            cfg.d_model
        )));
    }
    let mut outputs = Vec::with_capacity(cfg.layers);
    let mut caches = Vec::with_capacity(cfg.layers);
    let mut x = tokens.tokens.clone();
    for (l, p) in model.layers.iter().enumerate() {
        let (out, cache) = layer_forward(&x, p, cfg.heads);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(KeyheadError::NonFinite { layer: l + 1 });
        }
        outputs.push(out.clone());
        caches.push(cache);
        x = out;
    }
    Ok((outputs, caches))
}

/// Head activations plus everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub encoder_outputs: Vec<Array2<f64>>,
    /// `X_IR^(l)`, one d-vector per layer.
    pub ir: Vec<Array1<f64>>,
    /// `X_CR^(l)`, one 2K-vector per layer.
    pub cr: Vec<Array1<f64>>,
    pub gate_logits: Array1<f64>,
    pub gate: Array1<f64>,
    /// Gated sum before the ReLU.
    pub gated: Array1<f64>,
    pub prediction: Array1<f64>,
    patches: Option<Array2<f64>>,
    layer_caches: Vec<LayerCache>,
    model_fingerprint: u64,
}

impl ForwardTrace {
    pub fn keypoints(&self) -> Keypoints2D {
        Keypoints2D::from_flat(self.prediction.as_slice().unwrap())
    }
}

/// Mean pooling, CR projections, softmax gate, gated sum and ReLU.
pub fn head_forward(
    enc_outputs: &[Array2<f64>],
    model: &EncoderModel,
) -> Result<ForwardTrace, KeyheadError> {
    head_forward_inner(enc_outputs.to_vec(), Vec::new(), None, model)
}

fn head_forward_inner(
    encoder_outputs: Vec<Array2<f64>>,
    layer_caches: Vec<LayerCache>,
    patches: Option<Array2<f64>>,
    model: &EncoderModel,
) -> Result<ForwardTrace, KeyheadError> {
    let n = model.config.layers;
    if encoder_outputs.len() != n {
        return Err(KeyheadError::Dimension(format!(
            "expected {n} encoder outputs, got {}",
            encoder_outputs.len()
        )));
    }
    let ir: Vec<Array1<f64>> = encoder_outputs
        .iter()
        .map(|x| x.mean_axis(Axis(0)).unwrap())
        .collect();
    let cr: Vec<Array1<f64>> = ir
        .iter()
        .zip(model.cr_w.iter().zip(&model.cr_b))
        .map(|(x, (w, b))| w.dot(x) + b)
        .collect();
    let gate_logits = model.gate_w.dot(&ir[n - 1]) + &model.gate_b;
    let gate = softmax(&gate_logits);
    let mut gated = Array1::zeros(OUTPUT_DIM);
    for (w, c) in gate.iter().zip(&cr) {
        gated.scaled_add(*w, c);
    }
    if gated.iter().any(|v| !v.is_finite()) {
        return Err(KeyheadError::NonFinite { layer: n });
    }
    let prediction = gated.mapv(|v| v.max(0.0));
    Ok(ForwardTrace {
        encoder_outputs,
        ir,
        cr,
        gate_logits,
        gate,
        gated,
        prediction,
        patches,
        layer_caches,
        model_fingerprint: model.fingerprint(),
    })
}

/// Full forward pass from a raster image.
pub fn forward(img: &RasterImage, model: &EncoderModel) -> Result<ForwardTrace, KeyheadError> {
    let patches = extract_patches(img, &model.config)?;
    let tokens = TokenGrid {
        tokens: embed(&patches, model),
    };
    let (outs, caches) = encoder_forward_cached(&tokens, model)?;
    head_forward_inner(outs, caches, Some(patches), model)
}

/// Reverse-mode gradients of every parameter given `∂L/∂y_pred`.
pub fn backward(
    trace: &ForwardTrace,
    model: &EncoderModel,
    loss_grad: &[f64],
) -> Result<EncoderModel, KeyheadError> {
    let cfg = &model.config;
    let n = cfg.layers;
    if loss_grad.len() != OUTPUT_DIM {
        return Err(KeyheadError::Dimension(format!(
            "loss gradient has {} entries, expected {OUTPUT_DIM}",
            loss_grad.len()
        )));
    }
    let patches = trace.patches.as_ref().ok_or(KeyheadError::StaleTrace)?;
    if trace.layer_caches.len() != n || trace.model_fingerprint != model.fingerprint() {
        return Err(KeyheadError::StaleTrace);
    }
    let mut g = model.zeros_like();

    let dgated = Array1::from_shape_fn(OUTPUT_DIM, |i| {
        if trace.gated[i] > 0.0 {
            loss_grad[i]
        } else {
            0.0
        }
    });
    // gated sum: X_G = Σ w_l CR_l
    let dgate = Array1::from_shape_fn(n, |l| trace.cr[l].dot(&dgated));
    let weighted = trace.gate.dot(&dgate);
    let dlogits = &trace.gate * &(dgate - weighted);

    let mut dir: Vec<Array1<f64>> = vec![Array1::zeros(cfg.d_model); n];
    for l in 0..n {
        let dcr = &dgated * trace.gate[l];
        g.cr_w[l] += &outer(&dcr, &trace.ir[l]);
        g.cr_b[l] += &dcr;
        dir[l] += &model.cr_w[l].t().dot(&dcr);
    }
    g.gate_w += &outer(&dlogits, &trace.ir[n - 1]);
    g.gate_b += &dlogits;
    dir[n - 1] += &model.gate_w.t().dot(&dlogits);

    let tokens = cfg.num_tokens() as f64;
    let mut dx = Array2::<f64>::zeros((cfg.num_tokens(), cfg.d_model));
    for l in (0..n).rev() {
        dx += &(&dir[l] / tokens);
        dx = layer_backward(
            &dx,
            &model.layers[l],
            &trace.layer_caches[l],
            cfg.heads,
            &mut g.layers[l],
        );
    }
    g.patch_w += &dx.t().dot(patches);
    g.patch_b += &dx.sum_axis(Axis(0));
    Ok(g)
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    a.view()
        .insert_axis(Axis(1))
        .dot(&b.view().insert_axis(Axis(0)))
}

/// How a dataset frame maps onto the model's input raster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterMapping {
    pub scale_x: f64,
    pub scale_y: f64,
}

impl RasterMapping {
    pub fn for_record(record: &FrameRecord, config: &ModelConfig) -> Self {
        Self {
            scale_x: config.image_width as f64 / record.intrinsics.width as f64,
            scale_y: config.image_height as f64 / record.intrinsics.height as f64,
        }
    }

    pub fn to_raster(&self, kp: &Keypoints2D) -> Keypoints2D {
        Keypoints2D::new(
            kp.points
                .map(|p| nalgebra::Vector2::new(p.x * self.scale_x, p.y * self.scale_y)),
        )
    }

    pub fn to_image(&self, kp: &Keypoints2D) -> Keypoints2D {
        Keypoints2D::new(
            kp.points
                .map(|p| nalgebra::Vector2::new(p.x / self.scale_x, p.y / self.scale_y)),
        )
    }
}

/// Renders the model input for a record from its ground-truth keypoints.
/// Returns the image and the keypoints in raster pixels.
pub fn frame_input(
    record: &FrameRecord,
    config: &ModelConfig,
) -> Result<(RasterImage, Keypoints2D, RasterMapping), KeyheadError> {
    let mapping = RasterMapping::for_record(record, config);
    let kp = mapping.to_raster(&record.kp2d_gt);
    let raster_intr = crate::datamodel::CameraIntrinsics {
        fx: record.intrinsics.fx * mapping.scale_x,
        fy: record.intrinsics.fy * mapping.scale_y,
        cx: record.intrinsics.cx * mapping.scale_x,
        cy: record.intrinsics.cy * mapping.scale_y,
        width: config.image_width as u32,
        height: config.image_height as u32,
    };
    let frame = render_frame(&kp, &raster_intr, config.patch)?;
    Ok((frame.image, kp, mapping))
}

/// Mean gate weight per layer over all frames of a dataset.
pub fn dump_gate_weights(
    model: &EncoderModel,
    records: &[FrameRecord],
) -> Result<Vec<f64>, KeyheadError> {
    if records.is_empty() {
        return Err(KeyheadError::EmptyDataset);
    }
    let mut sum = Array1::<f64>::zeros(model.config.layers);
    for r in records {
        let (img, _, _) = frame_input(r, &model.config)?;
        sum += &forward(&img, model)?.gate;
    }
    Ok((sum / records.len() as f64).to_vec())
}

/// `layer,gate_weight` CSV with 1-based layer indices.
pub fn gate_weights_csv(weights: &[f64]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "gate_weight"]).unwrap();
    for (l, v) in weights.iter().enumerate() {
        w.write_record([(l + 1).to_string(), v.to_string()])
            .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    params: BTreeMap<String, ParamEntry>,
}

fn param_shapes(model: &EncoderModel) -> BTreeMap<String, Vec<usize>> {
    let mut shapes = BTreeMap::new();
    shapes.insert("patch_embed.w".to_string(), model.patch_w.shape().to_vec());
    let mut names = Vec::new();
    model.for_each_param(|name, p| names.push((name.to_string(), p.len())));
    for (name, len) in names {
        shapes.entry(name).or_insert(vec![len]);
    }
    for (i, l) in model.layers.iter().enumerate() {
        let n = i + 1;
        for (suffix, w) in [
            ("attn.q.w", &l.wq),
            ("attn.k.w", &l.wk),
            ("attn.v.w", &l.wv),
            ("attn.o.w", &l.wo),
            ("ffn.fc1.w", &l.w1),
            ("ffn.fc2.w", &l.w2),
        ] {
            shapes.insert(format!("layer{n}.{suffix}"), w.shape().to_vec());
        }
    }
    for (i, w) in model.cr_w.iter().enumerate() {
        shapes.insert(format!("cr_proj.{}.w", i + 1), w.shape().to_vec());
    }
    shapes.insert("gate_proj.w".to_string(), model.gate_w.shape().to_vec());
    shapes
}

pub fn checkpoint_to_string(model: &EncoderModel) -> String {
    let shapes = param_shapes(model);
    let mut params = BTreeMap::new();
    model.for_each_param(|name, p| {
        params.insert(
            name.to_string(),
            ParamEntry {
                shape: shapes[name].clone(),
                data: p.to_vec(),
            },
        );
    });
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        config: model.config,
        params,
    };
    serde_json::to_string(&file).expect("checkpoint serialization is infallible")
}

pub fn checkpoint_from_str(text: &str) -> Result<EncoderModel, KeyheadError> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| KeyheadError::Checkpoint(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(KeyheadError::Checkpoint(format!(
            "unsupported format tag {:?}",
            file.format
        )));
    }
    let mut model = EncoderModel::init(file.config, 0)?;
    let shapes = param_shapes(&model);
    let mut err = None;
    model.for_each_param_mut(|name, p| match file.params.get(name) {
        Some(e) if e.data.len() == p.len() && e.shape == shapes[name] => p.copy_from_slice(&e.data),
        Some(_) => err = Some(format!("shape mismatch for {name}")),
        None => err = Some(format!("missing parameter {name}")),
    });
    if let Some(e) = err {
        return Err(KeyheadError::Checkpoint(e));
    }
    if file.params.len() != shapes.len() {
        return Err(KeyheadError::Checkpoint(
            "unexpected extra parameters".into(),
        ));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &EncoderModel, path: &Path) -> Result<(), KeyheadError> {
    fs::write(path, checkpoint_to_string(model)).map_err(|e| DataError::io(path, e).into())
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderModel, KeyheadError> {
    let text = fs::read_to_string(path).map_err(|e| KeyheadError::from(DataError::io(path, e)))?;
    checkpoint_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(layers: usize) -> EncoderModel {
        EncoderModel::init(
            ModelConfig {
                image_width: 8,
                image_height: 8,
                patch: 4,
                d_model: 16,
                heads: 2,
                layers,
            },
            1,
        )
        .unwrap()
    }

    fn noise_image(w: usize, h: usize, seed: u64) -> RasterImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RasterImage {
            width: w,
            height: h,
            pixels: (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect(),
        }
    }

    #[test]
    fn token_count_for_default_raster() {
        let model = EncoderModel::init(
            ModelConfig {
                layers: 1,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let t = tokenize(&RasterImage::zeros(64, 64), &model).unwrap();
        assert_eq!(t.tokens.dim(), (64, 64));
    }

    #[test]
    fn zero_image_tokens_are_bias_plus_encoding() {
        let mut model = tiny(1);
        model
            .patch_b
            .iter_mut()
            .enumerate()
            .for_each(|(i, b)| *b = 0.1 * i as f64);
        let t = tokenize(&RasterImage::zeros(8, 8), &model).unwrap();
        let expected = positional_encoding(&model.config) + &model.patch_b;
        assert_eq!(t.tokens, expected);
    }

    #[test]
    fn single_patch_change_is_local() {
        let model = tiny(1);
        let a = noise_image(8, 8, 3);
        let mut b = a.clone();
        b.pixels[8 * 5 + 6] += 0.5; // patch (row 1, col 1) = token 3
        let ta = tokenize(&a, &model).unwrap().tokens;
        let tb = tokenize(&b, &model).unwrap().tokens;
        for p in 0..4 {
            let same = ta.row(p) == tb.row(p);
            assert_eq!(same, p != 3, "token {p}");
        }
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        assert!(matches!(
            tokenize(&RasterImage::zeros(16, 8), &tiny(1)),
            Err(KeyheadError::Dimension(_))
        ));
    }

    #[test]
    fn encoder_output_count_matches_layers() {
        for n in [2, 3, 6, 8, 12] {
            let m = tiny(n);
            let t = tokenize(&noise_image(8, 8, 1), &m).unwrap();
            assert_eq!(encoder_forward(&t, &m).unwrap().len(), n);
        }
    }

    /// Straight-line evaluation of one pre-norm layer with zero projection
    /// weights on two tokens of width 4.
    #[test]
    fn zero_weight_layer_matches_manual_evaluation() {
        let cfg = ModelConfig {
            image_width: 2,
            image_height: 1,
            patch: 1,
            d_model: 4,
            heads: 1,
            layers: 1,
        };
        let mut m = EncoderModel::init(cfg, 0).unwrap();
        m.for_each_param_mut(|name, p| {
            if name.starts_with("layer1.") && !name.contains(".g") {
                p.fill(0.0);
            }
        });
        m.layers[0].bv = Array1::from(vec![0.5, -1.0, 2.0, 0.25]);
        m.layers[0].wo = Array2::eye(4);
        m.layers[0].b2 = Array1::from(vec![0.1, 0.2, 0.3, 0.4]);
        let x = ndarray::arr2(&[[1.0, 2.0, 3.0, 4.0], [-1.0, 0.0, 1.0, 5.0]]);
        let out = encoder_forward(&TokenGrid { tokens: x.clone() }, &m).unwrap();
        // Q = K = 0 -> uniform attention; V rows are all bv; Wo = I.
        // FFN: fc1 weights zero -> hidden = gelu(0) = 0; output adds b2.
        for p in 0..2 {
            for j in 0..4 {
                let expected = x[[p, j]] + m.layers[0].bv[j] + m.layers[0].b2[j];
                assert!((out[0][[p, j]] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn permuting_tokens_permutes_outputs() {
        let m = tiny(2);
        let t = tokenize(&noise_image(8, 8, 4), &m).unwrap();
        let mut swapped = t.clone();
        let r0 = t.tokens.row(0).to_owned();
        let r2 = t.tokens.row(2).to_owned();
        swapped.tokens.row_mut(0).assign(&r2);
        swapped.tokens.row_mut(2).assign(&r0);
        let a = encoder_forward(&t, &m).unwrap();
        let b = encoder_forward(&swapped, &m).unwrap();
        for (la, lb) in a.iter().zip(&b) {
            for (i, j) in [(0, 2), (2, 0), (1, 1), (3, 3)] {
                let diff = (&la.row(i) - &lb.row(j)).mapv(f64::abs).sum();
                assert!(diff < 1e-12);
            }
        }
    }

    #[test]
    fn equal_gate_logits_give_uniform_weights() {
        let mut m = tiny(3);
        m.gate_w.fill(0.0);
        m.gate_b.fill(0.7);
        let tr = forward(&noise_image(8, 8, 2), &m).unwrap();
        for w in tr.gate.iter() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gated_sum_arithmetic() {
        let mut m = tiny(2);
        let outs = vec![Array2::zeros((4, 16)); 2];
        for b in m.cr_b.iter_mut() {
            b.fill(0.0);
        }
        m.cr_b[0][0] = 1.0;
        m.cr_b[1][1] = 1.0;
        m.gate_w.fill(0.0);
        m.gate_b = Array1::from(vec![0.0, (0.7f64 / 0.3).ln()]);
        let tr = head_forward(&outs, &m).unwrap();
        assert!((tr.gate[0] - 0.3).abs() < 1e-15);
        assert!((tr.gated[0] - 0.3).abs() < 1e-15);
        assert!((tr.gated[1] - 0.7).abs() < 1e-15);
        assert!(tr.gated.iter().skip(2).all(|&v| v == 0.0));
    }

    #[test]
    fn relu_clamps_negative_coordinates() {
        let mut m = tiny(1);
        let outs = vec![Array2::zeros((4, 16))];
        m.cr_b[0].fill(1.0);
        m.cr_b[0][3] = -3.2;
        let tr = head_forward(&outs, &m).unwrap();
        assert_eq!(tr.gated[3], -3.2);
        assert_eq!(tr.prediction[3], 0.0);
        assert_eq!(tr.prediction.len(), OUTPUT_DIM);
    }

    #[test]
    fn zero_loss_gradient_gives_zero_parameter_gradients() {
        let m = tiny(2);
        let tr = forward(&noise_image(8, 8, 5), &m).unwrap();
        let g = backward(&tr, &m, &[0.0; 8]).unwrap();
        let mut all_zero = true;
        g.for_each_param(|_, p| all_zero &= p.iter().all(|&v| v == 0.0));
        assert!(all_zero);
    }

    #[test]
    fn deeper_cr_path_gets_gradient() {
        let m = tiny(3);
        let tr = forward(&noise_image(8, 8, 6), &m).unwrap();
        assert!(tr.gate[2] > 0.0);
        let g = backward(&tr, &m, &[1.0; 8]).unwrap();
        assert!(g.cr_w[1].iter().any(|&v| v != 0.0));
        assert!(g.cr_w[2].iter().any(|&v| v != 0.0));
        assert!(g.layers[2].w2.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut m = tiny(1);
        let tr = forward(&noise_image(8, 8, 7), &m).unwrap();
        m.gate_b[0] += 1.0;
        assert!(matches!(
            backward(&tr, &m, &[1.0; 8]),
            Err(KeyheadError::StaleTrace)
        ));
        let head_only = head_forward(&tr.encoder_outputs, &m).unwrap();
        assert!(matches!(
            backward(&head_only, &m, &[1.0; 8]),
            Err(KeyheadError::StaleTrace)
        ));
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let m = tiny(2);
        let img = noise_image(8, 8, 8);
        let a = forward(&img, &m).unwrap();
        let b = forward(&img, &m).unwrap();
        assert_eq!(a.prediction, b.prediction);
        assert_eq!(a.encoder_outputs, b.encoder_outputs);
        assert_eq!(a.gate, b.gate);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny(2);
        let text = checkpoint_to_string(&m);
        assert!(text.contains("\"layer1.attn.q.w\""));
        assert!(text.contains("\"cr_proj.2.w\""));
        assert!(text.contains("\"gate_proj.w\""));
        let back = checkpoint_from_str(&text).unwrap();
        assert_eq!(back, m);
        let bad = text.replace(CHECKPOINT_FORMAT, "other-v0");
        assert!(checkpoint_from_str(&bad).is_err());
    }

    #[test]
    fn gate_csv_has_one_row_per_layer() {
        let csv = gate_weights_csv(&[0.25, 0.75]);
        assert_eq!(csv, "layer,gate_weight\n1,0.25\n2,0.75\n");
    }
}
