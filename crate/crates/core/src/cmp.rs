//! Local context encoding and the convolutional message-passing (CMP) network
//! that turns per-instance latent codes into keypoint attraction maps (KAMs).
//!
//! The network is three `conv3x3 -> norm -> relu` stages over `17 * d`
//! channels followed by a `1x1` head to 17 channels and a logistic squash.
//! Layers 1 and 3 use batch normalization. Layer 2 uses either batch
//! normalization or a recalibrating variant whose per-instance scale and
//! shift come from a gated unit over the spatially pooled normalized input.
//!
//! Activations are kept channel-major as `[channels, N * k * k]` so each
//! convolution is a single GEMM against an im2col buffer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::model::KemGrid;
use crate::sample::BilinearTaps;
use crate::skeleton::NUM_KEYPOINTS;
use crate::tensor::Tensor;

pub const NUM_LAYERS: usize = 3;
pub const DEFAULT_LATENT_DIM: usize = 64;
pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;
/// Layer (0-based) that carries the recalibrating norm when enabled.
pub const RECALIBRATED_LAYER: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormVariant {
    Plain,
    Recalibrating,
}

impl std::str::FromStr for NormVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(NormVariant::Plain),
            "recalibrating" => Ok(NormVariant::Recalibrating),
            other => Err(Error::InvalidArgument(format!(
                "unknown norm variant {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for NormVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormVariant::Plain => "plain",
            NormVariant::Recalibrating => "recalibrating",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated in the cache.
    Train,
    /// Frozen running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmpConfig {
    pub latent_dim: usize,
    pub feature_channels: usize,
    pub window: usize,
    pub norm: NormVariant,
    pub positional: bool,
}

impl CmpConfig {
    pub fn new(latent_dim: usize, feature_channels: usize) -> Self {
        CmpConfig {
            latent_dim,
            feature_channels,
            window: crate::kem::LOCAL_WINDOW,
            norm: NormVariant::Recalibrating,
            positional: true,
        }
    }

    /// `17 * d`, the width of every hidden layer.
    pub fn channels(&self) -> usize {
        NUM_KEYPOINTS * self.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.feature_channels == 0 {
            return Err(Error::InvalidArgument(
                "latent and feature dims must be positive".into(),
            ));
        }
        if self.positional && self.latent_dim < 2 {
            return Err(Error::InvalidArgument(
                "positional encoding needs latent_dim >= 2".into(),
            ));
        }
        if self.window % 2 == 0 {
            return Err(Error::InvalidArgument("window must be odd".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    /// `[out, in * 9]`, taps in row-major `(dy, dx)` order.
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    /// `[2 * channels, channels]`: rows `0..C` gate the scale, `C..2C` the shift.
    pub gate_w: Option<Tensor>,
    pub gate_b: Option<Tensor>,
}

/// Every trainable tensor. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub layers: Vec<LayerWeights>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Projection,
    Conv(usize),
    Norm(usize),
    Head,
}

impl Weights {
    /// Trainable tensors with stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("proj.w".to_string(), &self.proj_w),
            ("proj.b".to_string(), &self.proj_b),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.conv.w"), &layer.conv_w));
            out.push((format!("layer{l}.conv.b"), &layer.conv_b));
            out.push((format!("layer{l}.norm.gamma"), &layer.gamma));
            out.push((format!("layer{l}.norm.beta"), &layer.beta));
            if let (Some(w), Some(b)) = (&layer.gate_w, &layer.gate_b) {
                out.push((format!("layer{l}.norm.gate.w"), w));
                out.push((format!("layer{l}.norm.gate.b"), b));
            }
        }
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        out
    }

    /// Mutable tensors in the same order as [`Weights::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.proj_w, &mut self.proj_b];
        for layer in self.layers.iter_mut() {
            out.push(&mut layer.conv_w);
            out.push(&mut layer.conv_b);
            out.push(&mut layer.gamma);
            out.push(&mut layer.beta);
            if let (Some(w), Some(b)) = (&mut layer.gate_w, &mut layer.gate_b) {
                out.push(w);
                out.push(b);
            }
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn zeros_like(&self) -> Weights {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        Weights {
            proj_w: z(&self.proj_w),
            proj_b: z(&self.proj_b),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    conv_w: z(&l.conv_w),
                    conv_b: z(&l.conv_b),
                    gamma: z(&l.gamma),
                    beta: z(&l.beta),
                    gate_w: l.gate_w.as_ref().map(z),
                    gate_b: l.gate_b.as_ref().map(z),
                })
                .collect(),
            head_w: z(&self.head_w),
            head_b: z(&self.head_b),
        }
    }

    pub fn zero_group(&mut self, group: ParamGroup) {
        let clear = |t: &mut Tensor| t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        match group {
            ParamGroup::Projection => {
                clear(&mut self.proj_w);
                clear(&mut self.proj_b);
            }
            ParamGroup::Conv(l) => {
                clear(&mut self.layers[l].conv_w);
                clear(&mut self.layers[l].conv_b);
            }
            ParamGroup::Norm(l) => {
                let layer = &mut self.layers[l];
                clear(&mut layer.gamma);
                clear(&mut layer.beta);
                if let Some(w) = layer.gate_w.as_mut() {
                    clear(w);
                }
                if let Some(b) = layer.gate_b.as_mut() {
                    clear(b);
                }
            }
            ParamGroup::Head => {
                clear(&mut self.head_w);
                clear(&mut self.head_b);
            }
        }
    }

    pub fn all_finite(&self) -> std::result::Result<(), String> {
        for (name, t) in self.named() {
            if !t.all_finite() {
                return Err(name);
            }
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Running normalization statistics of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmpParams {
    pub config: CmpConfig,
    pub weights: Weights,
    pub stats: Vec<NormStats>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Fan-in scaled uniform initialization. The head starts at zero so the
/// initial KAMs are the flat 0.5 plateau.
pub fn init_params(seed: u64, config: &CmpConfig) -> Result<CmpParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ch = config.channels();
    let d = config.latent_dim;
    let cf = config.feature_channels;
    let proj_w = uniform(&mut rng, &[d, cf], 1.0 / (cf as f64).sqrt());
    let mut layers = Vec::with_capacity(NUM_LAYERS);
    for l in 0..NUM_LAYERS {
        let bound = 1.0 / ((ch * 9) as f64).sqrt();
        let gated = l == RECALIBRATED_LAYER && config.norm == NormVariant::Recalibrating;
        layers.push(LayerWeights {
            conv_w: uniform(&mut rng, &[ch, ch * 9], bound),
            conv_b: Tensor::zeros(&[ch]),
            gamma: Tensor::filled(&[ch], 1.0),
            beta: Tensor::zeros(&[ch]),
            gate_w: gated.then(|| Tensor::zeros(&[2 * ch, ch])),
            gate_b: gated.then(|| Tensor::zeros(&[2 * ch])),
        });
    }
    Ok(CmpParams {
        config: config.clone(),
        weights: Weights {
            proj_w,
            proj_b: Tensor::zeros(&[d]),
            layers,
            head_w: Tensor::zeros(&[NUM_KEYPOINTS, ch]),
            head_b: Tensor::zeros(&[NUM_KEYPOINTS]),
        },
        stats: (0..NUM_LAYERS)
            .map(|_| NormStats {
                mean: Tensor::zeros(&[ch]),
                var: Tensor::filled(&[ch], 1.0),
            })
            .collect(),
    })
}

impl CmpParams {
    /// Overwrites every trainable tensor with uniform noise in `[-scale, scale]`
    /// (gamma around 1), and running statistics with plausible values. Used
    /// by gradient checks, which need a non-degenerate network.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in self.weights.layers.iter_mut() {
            for g in layer.gamma.data_mut() {
                *g = 1.0 + rng.random_range(-0.5..0.5);
            }
        }
        let names: Vec<String> = self.weights.named().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(self.weights.tensors_mut()) {
            if name.ends_with("gamma") {
                continue;
            }
            for v in t.data_mut() {
                *v = rng.random_range(-scale..=scale);
            }
        }
        for s in self.stats.iter_mut() {
            for m in s.mean.data_mut() {
                *m = rng.random_range(-0.1..0.1);
            }
            for v in s.var.data_mut() {
                *v = rng.random_range(0.5..1.5);
            }
        }
    }
}

/// Features sampled on the local KEMs, `N x 17 x k x k x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextSamples {
    pub values: Tensor,
}

impl ContextSamples {
    pub fn num_instances(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Latent codes `N x (17 d) x k x k`; keypoint `j` owns channels `j*d..(j+1)*d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalContext {
    pub codes: Tensor,
}

/// Keypoint attraction maps `N x 17 x k x k`, strictly inside `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KamSet {
    pub values: Tensor,
}

impl KamSet {
    pub fn num_instances(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn window(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Bilinearly samples the `C x h x w` feature map (texels `stride` image
/// pixels apart) at every KEM point.
pub fn sample_context(features: &Tensor, stride: usize, kems: &KemGrid) -> Result<ContextSamples> {
    if features.ndim() != 3 {
        return Err(Error::Shape(format!(
            "features must be (c, h, w), got {:?}",
            features.shape()
        )));
    }
    let (c, h, w) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
    );
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::EmptyTensor);
    }
    let k = kems.window;
    let n = kems.num_instances();
    let inv = 1.0 / stride as f64;
    let mut values = Tensor::zeros(&[n, NUM_KEYPOINTS, k, k, c]);
    let pts = kems.coords.data();
    let plane = h * w;
    let fd = features.data();
    for (p, out) in values.data_mut().chunks_exact_mut(c).enumerate() {
        let taps = BilinearTaps::new(pts[2 * p] * inv, pts[2 * p + 1] * inv, h, w);
        for (ch, o) in out.iter_mut().enumerate() {
            *o = taps.apply(&fd[ch * plane..(ch + 1) * plane]);
        }
    }
    Ok(ContextSamples { values })
}

/// Projects sampled features to `d` dims per keypoint and adds the
/// normalized in-window offset to channels 0 (x) and 1 (y).
pub fn encode(samples: &ContextSamples, params: &CmpParams) -> Result<LocalContext> {
    let cfg = &params.config;
    let shape = samples.values.shape();
    if shape[4] != cfg.feature_channels {
        return Err(Error::Shape(format!(
            "feature channels {} do not match projection input {}",
            shape[4], cfg.feature_channels
        )));
    }
    if shape[2] != cfg.window || shape[3] != cfg.window {
        return Err(Error::Shape(format!(
            "context window {}x{} does not match configured {}",
            shape[2], shape[3], cfg.window
        )));
    }
    let (n, k, cf, d) = (shape[0], cfg.window, cfg.feature_channels, cfg.latent_dim);
    let s = k * k;
    let mut codes = Tensor::zeros(&[n, NUM_KEYPOINTS * d, k, k]);
    if n == 0 {
        return Ok(LocalContext { codes });
    }
    // [N*17*S, C] x [C, d] -> [N*17*S, d]
    let rows = n * NUM_KEYPOINTS * s;
    let mut proj = vec![0.0; rows * d];
    gemm(
        rows,
        cf,
        d,
        1.0,
        samples.values.data(),
        false,
        params.weights.proj_w.data(),
        true,
        0.0,
        &mut proj,
    );
    let r = (k / 2) as f64;
    let bias = params.weights.proj_b.data();
    let out = codes.data_mut();
    for nj in 0..n * NUM_KEYPOINTS {
        for cell in 0..s {
            let src = &proj[(nj * s + cell) * d..(nj * s + cell + 1) * d];
            for e in 0..d {
                let mut v = src[e] + bias[e];
                if cfg.positional && e < 2 {
                    let (u, w) = (cell / k, cell % k);
                    v += if e == 0 {
                        (w as f64 - r) / r.max(1.0)
                    } else {
                        (u as f64 - r) / r.max(1.0)
                    };
                }
                out[(nj * d + e) * s + cell] = v;
            }
        }
    }
    Ok(LocalContext { codes })
}

/// Gradients of the projection given the gradient on the codes.
pub fn encode_backward(
    samples: &ContextSamples,
    dctx: &Tensor,
    params: &CmpParams,
) -> (Tensor, Tensor) {
    let cfg = &params.config;
    let (d, cf, k) = (cfg.latent_dim, cfg.feature_channels, cfg.window);
    let s = k * k;
    let n = samples.num_instances();
    let mut dw = Tensor::zeros(&[d, cf]);
    let mut db = Tensor::zeros(&[d]);
    if n == 0 {
        return (dw, db);
    }
    let rows = n * NUM_KEYPOINTS * s;
    // regroup dctx into [rows, d]
    let mut g = vec![0.0; rows * d];
    let src = dctx.data();
    for nj in 0..n * NUM_KEYPOINTS {
        for e in 0..d {
            let plane = &src[(nj * d + e) * s..(nj * d + e + 1) * s];
            for (cell, v) in plane.iter().enumerate() {
                g[(nj * s + cell) * d + e] = *v;
            }
        }
    }
    // [d, rows] x [rows, C]
    gemm(
        d,
        rows,
        cf,
        1.0,
        &g,
        true,
        samples.values.data(),
        false,
        0.0,
        dw.data_mut(),
    );
    let dbd = db.data_mut();
    for row in g.chunks_exact(d) {
        for (acc, v) in dbd.iter_mut().zip(row) {
            *acc += v;
        }
    }
    (dw, db)
}

/// Convenience: sample features on the KEMs and encode them.
pub fn encode_local_context(
    features: &Tensor,
    stride: usize,
    kems: &KemGrid,
    params: &CmpParams,
) -> Result<LocalContext> {
    encode(&sample_context(features, stride, kems)?, params)
}

fn im2col(x: &[f64], ch: usize, n: usize, k: usize) -> Vec<f64> {
    let s = k * k;
    let ns = n * s;
    let mut cols = vec![0.0; ch * 9 * ns];
    for c in 0..ch {
        for t in 0..9 {
            let (dy, dx) = (t as isize / 3 - 1, t as isize % 3 - 1);
            let row = &mut cols[(c * 9 + t) * ns..(c * 9 + t + 1) * ns];
            for b in 0..n {
                let src = &x[c * ns + b * s..c * ns + (b + 1) * s];
                for u in 0..k {
                    let su = u as isize + dy;
                    if su < 0 || su >= k as isize {
                        continue;
                    }
                    for v in 0..k {
                        let sv = v as isize + dx;
                        if sv < 0 || sv >= k as isize {
                            continue;
                        }
                        row[b * s + u * k + v] = src[su as usize * k + sv as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], ch: usize, n: usize, k: usize) -> Vec<f64> {
    let s = k * k;
    let ns = n * s;
    let mut x = vec![0.0; ch * ns];
    for c in 0..ch {
        for t in 0..9 {
            let (dy, dx) = (t as isize / 3 - 1, t as isize % 3 - 1);
            let row = &cols[(c * 9 + t) * ns..(c * 9 + t + 1) * ns];
            for b in 0..n {
                let dst = &mut x[c * ns + b * s..c * ns + (b + 1) * s];
                for u in 0..k {
                    let su = u as isize + dy;
                    if su < 0 || su >= k as isize {
                        continue;
                    }
                    for v in 0..k {
                        let sv = v as isize + dx;
                        if sv < 0 || sv >= k as isize {
                            continue;
                        }
                        dst[su as usize * k + sv as usize] += row[b * s + u * k + v];
                    }
                }
            }
        }
    }
    x
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct LayerCache {
    cols: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// `[N, C]` spatial means of `xhat` (recalibrating norm only).
    pooled: Vec<f64>,
    /// `[N, 2C]` gate pre-activations (recalibrating norm only).
    gate: Vec<f64>,
    /// Norm output before the ReLU.
    y: Vec<f64>,
}

/// Everything the backward pass needs from one forward pass.
pub struct CmpCache {
    n: usize,
    mode: Mode,
    layers: Vec<LayerCache>,
    last: Vec<f64>,
    kam: Vec<f64>,
    /// Running statistics after this pass (unchanged in eval mode).
    pub updated_stats: Vec<NormStats>,
}

impl CmpCache {
    /// Which ReLU inputs were positive, layer by layer.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.layers
            .iter()
            .flat_map(|l| l.y.iter().map(|v| *v > 0.0))
            .collect()
    }
}

fn check_finite(values: &[f64], layer: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation(layer.to_string()))
    }
}

pub fn cmp_forward(
    ctx: &LocalContext,
    params: &CmpParams,
    mode: Mode,
) -> Result<(KamSet, CmpCache)> {
    let cfg = &params.config;
    let ch = cfg.channels();
    let k = cfg.window;
    let s = k * k;
    let shape = ctx.codes.shape();
    if shape.len() != 4 || shape[1] != ch || shape[2] != k || shape[3] != k {
        return Err(Error::Shape(format!(
            "context {:?} does not match N x {ch} x {k} x {k}",
            shape
        )));
    }
    let n = shape[0];
    let ns = n * s;
    if n == 0 {
        return Ok((
            KamSet {
                values: Tensor::zeros(&[0, NUM_KEYPOINTS, k, k]),
            },
            CmpCache {
                n,
                mode,
                layers: Vec::new(),
                last: Vec::new(),
                kam: Vec::new(),
                updated_stats: params.stats.clone(),
            },
        ));
    }
    // [N, C, S] -> [C, N*S]
    let mut act = vec![0.0; ch * ns];
    let codes = ctx.codes.data();
    for b in 0..n {
        for c in 0..ch {
            act[c * ns + b * s..c * ns + (b + 1) * s]
                .copy_from_slice(&codes[(b * ch + c) * s..(b * ch + c + 1) * s]);
        }
    }
    let mut layers = Vec::with_capacity(NUM_LAYERS);
    let mut updated_stats = params.stats.clone();
    for (l, lw) in params.weights.layers.iter().enumerate() {
        let cols = im2col(&act, ch, n, k);
        let mut z = vec![0.0; ch * ns];
        for (c, row) in z.chunks_exact_mut(ns).enumerate() {
            row.fill(lw.conv_b.data()[c]);
        }
        gemm(
            ch,
            ch * 9,
            ns,
            1.0,
            lw.conv_w.data(),
            false,
            &cols,
            false,
            1.0,
            &mut z,
        );
        check_finite(&z, &format!("layer{l}.conv"))?;

        let mut xhat = vec![0.0; ch * ns];
        let mut inv_std = vec![0.0; ch];
        for c in 0..ch {
            let row = &z[c * ns..(c + 1) * ns];
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = row.iter().sum::<f64>() / ns as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / ns as f64;
                    let st = &mut updated_stats[l];
                    let unbiased = if ns > 1 {
                        var * ns as f64 / (ns - 1) as f64
                    } else {
                        var
                    };
                    let rm = st.mean.data()[c];
                    let rv = st.var.data()[c];
                    st.mean.data_mut()[c] = (1.0 - NORM_MOMENTUM) * rm + NORM_MOMENTUM * mean;
                    st.var.data_mut()[c] = (1.0 - NORM_MOMENTUM) * rv + NORM_MOMENTUM * unbiased;
                    (mean, var)
                }
                Mode::Eval => (
                    params.stats[l].mean.data()[c],
                    params.stats[l].var.data()[c],
                ),
            };
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[c] = inv;
            for (o, v) in xhat[c * ns..(c + 1) * ns].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }

        let gamma = lw.gamma.data();
        let beta = lw.beta.data();
        let mut y = vec![0.0; ch * ns];
        let mut pooled = Vec::new();
        let mut gate = Vec::new();
        match (&lw.gate_w, &lw.gate_b) {
            (Some(gw), Some(gb)) => {
                pooled = vec![0.0; n * ch];
                for c in 0..ch {
                    for b in 0..n {
                        let seg = &xhat[c * ns + b * s..c * ns + (b + 1) * s];
                        pooled[b * ch + c] = seg.iter().sum::<f64>() / s as f64;
                    }
                }
                gate = vec![0.0; n * 2 * ch];
                for row in gate.chunks_exact_mut(2 * ch) {
                    row.copy_from_slice(gb.data());
                }
                gemm(
                    n,
                    ch,
                    2 * ch,
                    1.0,
                    &pooled,
                    false,
                    gw.data(),
                    true,
                    1.0,
                    &mut gate,
                );
                for c in 0..ch {
                    for b in 0..n {
                        let scale = gamma[c] * 2.0 * sigmoid(gate[b * 2 * ch + c]);
                        let shift = beta[c] + gate[b * 2 * ch + ch + c];
                        let base = c * ns + b * s;
                        for i in base..base + s {
                            y[i] = xhat[i] * scale + shift;
                        }
                    }
                }
            }
            _ => {
                for c in 0..ch {
                    for i in c * ns..(c + 1) * ns {
                        y[i] = xhat[i] * gamma[c] + beta[c];
                    }
                }
            }
        }
        check_finite(&y, &format!("layer{l}.norm"))?;
        act = y.iter().map(|v| v.max(0.0)).collect();
        layers.push(LayerCache {
            cols,
            xhat,
            inv_std,
            pooled,
            gate,
            y,
        });
    }

    let mut logits = vec![0.0; NUM_KEYPOINTS * ns];
    for (j, row) in logits.chunks_exact_mut(ns).enumerate() {
        row.fill(params.weights.head_b.data()[j]);
    }
    gemm(
        NUM_KEYPOINTS,
        ch,
        ns,
        1.0,
        params.weights.head_w.data(),
        false,
        &act,
        false,
        1.0,
        &mut logits,
    );
    check_finite(&logits, "head")?;
    let kam: Vec<f64> = logits.iter().map(|&v| sigmoid(v)).collect();

    let mut values = Tensor::zeros(&[n, NUM_KEYPOINTS, k, k]);
    let out = values.data_mut();
    for j in 0..NUM_KEYPOINTS {
        for b in 0..n {
            out[(b * NUM_KEYPOINTS + j) * s..(b * NUM_KEYPOINTS + j + 1) * s]
                .copy_from_slice(&kam[j * ns + b * s..j * ns + (b + 1) * s]);
        }
    }
    Ok((
        KamSet { values },
        CmpCache {
            n,
            mode,
            layers,
            last: act,
            kam,
            updated_stats,
        },
    ))
}

/// Gradients for the network weights (projection left at zero) and for the
/// input codes.
pub fn cmp_backward(
    cache: &CmpCache,
    params: &CmpParams,
    dkam: &Tensor,
    frozen: &[ParamGroup],
) -> Result<(Weights, Tensor)> {
    let cfg = &params.config;
    let ch = cfg.channels();
    let k = cfg.window;
    let s = k * k;
    let n = cache.n;
    let ns = n * s;
    if dkam.shape() != [n, NUM_KEYPOINTS, k, k] {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match KAMs {:?}",
            dkam.shape(),
            [n, NUM_KEYPOINTS, k, k]
        )));
    }
    let mut grads = params.weights.zeros_like();
    let mut dctx = Tensor::zeros(&[n, ch, k, k]);
    if n == 0 {
        return Ok((grads, dctx));
    }
    // [N, 17, S] -> [17, N*S], through the logistic
    let mut dlogit = vec![0.0; NUM_KEYPOINTS * ns];
    let up = dkam.data();
    for j in 0..NUM_KEYPOINTS {
        for b in 0..n {
            for i in 0..s {
                let o = j * ns + b * s + i;
                let p = cache.kam[o];
                dlogit[o] = up[(b * NUM_KEYPOINTS + j) * s + i] * p * (1.0 - p);
            }
        }
    }
    gemm(
        NUM_KEYPOINTS,
        ns,
        ch,
        1.0,
        &dlogit,
        false,
        &cache.last,
        true,
        0.0,
        grads.head_w.data_mut(),
    );
    for (j, row) in dlogit.chunks_exact(ns).enumerate() {
        grads.head_b.data_mut()[j] = row.iter().sum();
    }
    let mut dact = vec![0.0; ch * ns];
    gemm(
        ch,
        NUM_KEYPOINTS,
        ns,
        1.0,
        params.weights.head_w.data(),
        true,
        &dlogit,
        false,
        0.0,
        &mut dact,
    );

    for l in (0..NUM_LAYERS).rev() {
        let lc = &cache.layers[l];
        let lw = &params.weights.layers[l];
        let lg = &mut grads.layers[l];
        // relu
        let dy: Vec<f64> = dact
            .iter()
            .zip(&lc.y)
            .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
            .collect();

        let gamma = lw.gamma.data();
        let mut dxhat = vec![0.0; ch * ns];
        match (&lw.gate_w, &lw.gate_b) {
            (Some(gw), Some(_)) => {
                let mut dgate = vec![0.0; n * 2 * ch];
                for c in 0..ch {
                    for b in 0..n {
                        let base = c * ns + b * s;
                        let zs = lc.gate[b * 2 * ch + c];
                        let sg = sigmoid(zs);
                        let scale = gamma[c] * 2.0 * sg;
                        let mut dscale = 0.0;
                        let mut dshift = 0.0;
                        for i in base..base + s {
                            dscale += dy[i] * lc.xhat[i];
                            dshift += dy[i];
                            dxhat[i] = dy[i] * scale;
                        }
                        lg.gamma.data_mut()[c] += dscale * 2.0 * sg;
                        lg.beta.data_mut()[c] += dshift;
                        dgate[b * 2 * ch + c] = dscale * gamma[c] * 2.0 * sg * (1.0 - sg);
                        dgate[b * 2 * ch + ch + c] = dshift;
                    }
                }
                // gate_w: [2C, C] += dgate^T [2C, N] x pooled [N, C]
                let gwg = lg.gate_w.as_mut().expect("gated layer");
                gemm(
                    2 * ch,
                    n,
                    ch,
                    1.0,
                    &dgate,
                    true,
                    &lc.pooled,
                    false,
                    0.0,
                    gwg.data_mut(),
                );
                let gbg = lg.gate_b.as_mut().expect("gated layer");
                for row in dgate.chunks_exact(2 * ch) {
                    for (acc, v) in gbg.data_mut().iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                // dpooled [N, C] = dgate [N, 2C] x gate_w [2C, C]
                let mut dpooled = vec![0.0; n * ch];
                gemm(
                    n,
                    2 * ch,
                    ch,
                    1.0,
                    &dgate,
                    false,
                    gw.data(),
                    false,
                    0.0,
                    &mut dpooled,
                );
                for c in 0..ch {
                    for b in 0..n {
                        let g = dpooled[b * ch + c] / s as f64;
                        let base = c * ns + b * s;
                        for v in &mut dxhat[base..base + s] {
                            *v += g;
                        }
                    }
                }
            }
            _ => {
                for c in 0..ch {
                    let mut dg = 0.0;
                    let mut dbeta = 0.0;
                    for i in c * ns..(c + 1) * ns {
                        dg += dy[i] * lc.xhat[i];
                        dbeta += dy[i];
                        dxhat[i] = dy[i] * gamma[c];
                    }
                    lg.gamma.data_mut()[c] = dg;
                    lg.beta.data_mut()[c] = dbeta;
                }
            }
        }

        // normalization statistics
        let mut dz = vec![0.0; ch * ns];
        for c in 0..ch {
            let inv = lc.inv_std[c];
            let r = c * ns..(c + 1) * ns;
            match cache.mode {
                Mode::Train => {
                    let mean_d = dxhat[r.clone()].iter().sum::<f64>() / ns as f64;
                    let mean_dx = dxhat[r.clone()]
                        .iter()
                        .zip(&lc.xhat[r.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / ns as f64;
                    for i in r {
                        dz[i] = inv * (dxhat[i] - mean_d - lc.xhat[i] * mean_dx);
                    }
                }
                Mode::Eval => {
                    for i in r {
                        dz[i] = inv * dxhat[i];
                    }
                }
            }
        }

        gemm(
            ch,
            ns,
            ch * 9,
            1.0,
            &dz,
            false,
            &lc.cols,
            true,
            0.0,
            lg.conv_w.data_mut(),
        );
        for (c, row) in dz.chunks_exact(ns).enumerate() {
            lg.conv_b.data_mut()[c] = row.iter().sum();
        }
        let mut dcols = vec![0.0; ch * 9 * ns];
        gemm(
            ch * 9,
            ch,
            ns,
            1.0,
            lw.conv_w.data(),
            true,
            &dz,
            false,
            0.0,
            &mut dcols,
        );
        dact = col2im(&dcols, ch, n, k);
    }

    let out = dctx.data_mut();
    for b in 0..n {
        for c in 0..ch {
            out[(b * ch + c) * s..(b * ch + c + 1) * s]
                .copy_from_slice(&dact[c * ns + b * s..c * ns + (b + 1) * s]);
        }
    }
    for &g in frozen {
        grads.zero_group(g);
    }
    Ok((grads, dctx))
}

/// Full trainable path: sampled features -> codes -> KAMs, with the cache
/// kept for a later backward call.
pub struct CmpNet {
    pub params: CmpParams,
    cache: Option<(ContextSamples, CmpCache)>,
}

impl CmpNet {
    pub fn new(params: CmpParams) -> Self {
        CmpNet {
            params,
            cache: None,
        }
    }

    pub fn forward(&mut self, samples: ContextSamples, mode: Mode) -> Result<KamSet> {
        let ctx = encode(&samples, &self.params)?;
        let (kams, cache) = cmp_forward(&ctx, &self.params, mode)?;
        self.cache = Some((samples, cache));
        Ok(kams)
    }

    /// Running statistics produced by the last training-mode forward pass.
    pub fn commit_stats(&mut self) {
        if let Some((_, cache)) = &self.cache {
            if cache.mode == Mode::Train && cache.n > 0 {
                self.params.stats = cache.updated_stats.clone();
            }
        }
    }

    pub fn backward(&self, dkam: &Tensor, frozen: &[ParamGroup]) -> Result<Weights> {
        let (samples, cache) = self.cache.as_ref().ok_or(Error::MissingCache)?;
        let (mut grads, dctx) = cmp_backward(cache, &self.params, dkam, frozen)?;
        if !frozen.contains(&ParamGroup::Projection) {
            let (dw, db) = encode_backward(samples, &dctx, &self.params);
            grads.proj_w = dw;
            grads.proj_b = db;
        }
        Ok(grads)
    }

    pub fn relu_pattern(&self) -> Option<Vec<bool>> {
        self.cache.as_ref().map(|(_, c)| c.relu_pattern())
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(norm: NormVariant) -> CmpConfig {
        CmpConfig {
            latent_dim: 2,
            feature_channels: 3,
            window: 5,
            norm,
            positional: true,
        }
    }

    fn random_samples(n: usize, cfg: &CmpConfig, seed: u64) -> ContextSamples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = cfg.window;
        let shape = [n, NUM_KEYPOINTS, k, k, cfg.feature_channels];
        ContextSamples {
            values: uniform(&mut rng, &shape, 1.0),
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let cfg = small_config(NormVariant::Recalibrating);
        let a = init_params(3, &cfg).unwrap();
        let b = init_params(3, &cfg).unwrap();
        let c = init_params(4, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.weights.layers[0].conv_w, c.weights.layers[0].conv_w);
        assert!(a.weights.layers[1].gate_w.is_some());
        assert!(a.weights.layers[0].gate_w.is_none());
    }

    #[test]
    fn zero_head_gives_half_plateau() {
        let cfg = small_config(NormVariant::Recalibrating);
        let params = init_params(0, &cfg).unwrap();
        let ctx = encode(&random_samples(2, &cfg, 1), &params).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let (kam, _) = cmp_forward(&ctx, &params, mode).unwrap();
            assert!(kam.values.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn empty_batch() {
        let cfg = small_config(NormVariant::Plain);
        let params = init_params(0, &cfg).unwrap();
        let ctx = encode(&random_samples(0, &cfg, 1), &params).unwrap();
        assert_eq!(ctx.codes.shape(), &[0, 34, 5, 5]);
        let (kam, cache) = cmp_forward(&ctx, &params, Mode::Train).unwrap();
        assert_eq!(kam.values.shape(), &[0, 17, 5, 5]);
        let (g, dctx) = cmp_backward(&cache, &params, &kam.values, &[]).unwrap();
        assert_eq!(g, params.weights.zeros_like());
        assert_eq!(dctx.shape(), &[0, 34, 5, 5]);
    }

    #[test]
    fn context_shape_at_default_dims() {
        let cfg = CmpConfig::new(64, 4);
        let params = init_params(0, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let samples = ContextSamples {
            values: uniform(&mut rng, &[2, 17, 11, 11, 4], 1.0),
        };
        let ctx = encode(&samples, &params).unwrap();
        assert_eq!(ctx.codes.shape(), &[2, 1088, 11, 11]);
    }

    #[test]
    fn constant_features_vary_only_in_positional_channels() {
        let cfg = small_config(NormVariant::Plain);
        let params = init_params(0, &cfg).unwrap();
        let samples = ContextSamples {
            values: Tensor::filled(&[1, 17, 5, 5, 3], 0.3),
        };
        let ctx = encode(&samples, &params).unwrap();
        for j in 0..17 {
            for e in 0..2 {
                let plane = ctx.codes.slab(&[0, j * 2 + e]);
                let v0 = plane[0];
                // x offset changes along a row, y offset along a column
                assert!(plane.iter().any(|&v| v != v0));
                let base = plane[12];
                assert!(
                    (base - (0.3 * params.weights.proj_w.slab(&[e]).iter().sum::<f64>())).abs()
                        < 1e-12
                );
            }
        }
        let mut no_pos = params.clone();
        no_pos.config.positional = false;
        let ctx = encode(&samples, &no_pos).unwrap();
        for c in 0..34 {
            let plane = ctx.codes.slab(&[0, c]);
            assert!(plane.iter().all(|&v| v == plane[0]));
        }
    }

    #[test]
    fn feature_mismatch_errors() {
        let cfg = small_config(NormVariant::Plain);
        let params = init_params(0, &cfg).unwrap();
        let samples = ContextSamples {
            values: Tensor::zeros(&[1, 17, 5, 5, 4]),
        };
        assert!(encode(&samples, &params).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = small_config(NormVariant::Recalibrating);
        let mut params = init_params(0, &cfg).unwrap();
        params.randomize(1, 0.3);
        let mut net = CmpNet::new(params);
        let kam = net
            .forward(random_samples(2, &cfg, 2), Mode::Train)
            .unwrap();
        let g = net
            .backward(&Tensor::zeros(kam.values.shape()), &[])
            .unwrap();
        for (name, t) in g.named() {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }

    #[test]
    fn backward_without_forward_errors() {
        let cfg = small_config(NormVariant::Plain);
        let net = CmpNet::new(init_params(0, &cfg).unwrap());
        let err = net
            .backward(&Tensor::zeros(&[1, 17, 5, 5]), &[])
            .unwrap_err();
        assert!(matches!(err, Error::MissingCache));
    }

    #[test]
    fn frozen_groups_report_zero() {
        let cfg = small_config(NormVariant::Recalibrating);
        let mut params = init_params(0, &cfg).unwrap();
        params.randomize(5, 0.3);
        let mut net = CmpNet::new(params);
        let kam = net
            .forward(random_samples(2, &cfg, 3), Mode::Train)
            .unwrap();
        let up = Tensor::filled(kam.values.shape(), 1.0);
        let g = net
            .backward(
                &up,
                &[
                    ParamGroup::Projection,
                    ParamGroup::Conv(1),
                    ParamGroup::Norm(1),
                ],
            )
            .unwrap();
        assert!(g.proj_w.data().iter().all(|&v| v == 0.0));
        assert!(g.layers[1].conv_w.data().iter().all(|&v| v == 0.0));
        assert!(g.layers[1]
            .gate_w
            .as_ref()
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(g.layers[0].conv_w.data().iter().any(|&v| v != 0.0));
        assert!(g.head_w.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn non_finite_input_names_layer() {
        let cfg = small_config(NormVariant::Plain);
        let params = init_params(0, &cfg).unwrap();
        let mut ctx = encode(&random_samples(1, &cfg, 1), &params).unwrap();
        ctx.codes.data_mut()[0] = f64::NAN;
        let err = cmp_forward(&ctx, &params, Mode::Eval).err().unwrap();
        assert!(err.to_string().contains("layer0"), "{err}");
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let cfg = small_config(NormVariant::Plain);
        let params = init_params(0, &cfg).unwrap();
        let mut net = CmpNet::new(params.clone());
        net.forward(random_samples(2, &cfg, 9), Mode::Train)
            .unwrap();
        net.commit_stats();
        assert_ne!(net.params.stats, params.stats);
        let before = net.params.stats.clone();
        net.forward(random_samples(2, &cfg, 9), Mode::Eval).unwrap();
        net.commit_stats();
        assert_eq!(net.params.stats, before);
    }
}
