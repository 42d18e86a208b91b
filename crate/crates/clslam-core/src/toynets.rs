//! Miniature DepthNet and PoseNet with exact reverse-mode gradients, an Adam
//! optimizer, and the differentiable triplet objective that online adaptation
//! trains on.
//!
//! DepthNet is an encoder-decoder in miniature: two strided 3x3 conv layers
//! down, two upsample+conv layers back up with one skip connection, and a
//! bounded-disparity output head. PoseNet runs a two-layer conv stem over the
//! concatenated image pair, pools globally, and maps through a
//! zero-initialized linear head to a 6-vector twist, so the untrained
//! prediction is identity motion. The first stem layer of each network is the
//! frozen "encoder" prefix: it never receives gradient.

use crate::geometry::{CameraIntrinsics, Twist};
use crate::kernels;
use crate::photometric::{
    dissimilarity_with, DisparityMap, Image, ImageTriplet, LossBreakdown, LossWeights, Mask,
    PhotometricError, MAX_DISPARITY, WARP_Z_EPS,
};
use crate::tape::{Gradients, NodeId, Tape, TapeError};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;
// Needed for float math in no_std builds; std builds resolve these
// methods inherently and then see this import as unused.
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use thiserror::Error;

/// Lower disparity bound of the output head (no upper depth bound).
pub const MIN_DISPARITY: f64 = 1e-4;
/// Guard inside the predicted-translation norm; keeps the velocity term
/// differentiable at the zero-initialized head where the translation is 0.
pub const NORM_EPS: f64 = 1e-24;

#[derive(Debug, Error, PartialEq)]
pub enum ToyNetError {
    #[error("input dims {got:?} do not match network config {expected:?}")]
    DimensionMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid network config: {0}")]
    InvalidConfig(&'static str),
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(&'static str),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Photometric(#[from] PhotometricError),
}

/// Architecture spec shared by both networks: input size and the two hidden
/// widths. Spatial dims must be divisible by 4 (two stride-2 stages).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub height: usize,
    pub width: usize,
    pub c1: usize,
    pub c2: usize,
}

impl NetConfig {
    pub fn new(height: usize, width: usize, c1: usize, c2: usize) -> Result<Self, ToyNetError> {
        if height % 4 != 0 || width % 4 != 0 || height < 4 || width < 4 {
            return Err(ToyNetError::InvalidConfig("height and width must be multiples of 4"));
        }
        if c1 == 0 || c2 == 0 {
            return Err(ToyNetError::InvalidConfig("channel widths must be positive"));
        }
        Ok(NetConfig { height, width, c1, c2 })
    }
}

/// Flat parameter array with a frozen prefix that never receives gradient.
/// The prefix length must align with a layer boundary of the owning network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
    frozen_len: usize,
}

impl ParamVector {
    pub fn new(data: Vec<f64>, frozen_len: usize) -> Result<Self, ToyNetError> {
        if frozen_len > data.len() {
            return Err(ToyNetError::InvalidConfig("frozen prefix exceeds parameter count"));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(ToyNetError::InvalidConfig("parameters must be finite"));
        }
        Ok(ParamVector { data, frozen_len })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frozen_len(&self) -> usize {
        self.frozen_len
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// One layer's slice of the flat parameter vector.
#[derive(Debug, Clone)]
struct Layer {
    weights: Range<usize>,
    bias: Range<usize>,
    /// (cout, cin) for convs, (out, in) for the linear head.
    dims: (usize, usize),
}

fn conv_layer(offset: &mut usize, cout: usize, cin: usize) -> Layer {
    let w = *offset..*offset + cout * cin * 9;
    let b = w.end..w.end + cout;
    *offset = b.end;
    Layer { weights: w, bias: b, dims: (cout, cin) }
}

fn linear_layer(offset: &mut usize, out: usize, input: usize) -> Layer {
    let w = *offset..*offset + out * input;
    let b = w.end..w.end + out;
    *offset = b.end;
    Layer { weights: w, bias: b, dims: (out, input) }
}

fn depth_layers(cfg: &NetConfig) -> ([Layer; 4], usize) {
    let mut off = 0;
    let enc1 = conv_layer(&mut off, cfg.c1, 1);
    let enc2 = conv_layer(&mut off, cfg.c2, cfg.c1);
    let dec1 = conv_layer(&mut off, cfg.c1, cfg.c2);
    let dec2 = conv_layer(&mut off, 1, cfg.c1);
    ([enc1, enc2, dec1, dec2], off)
}

fn pose_layers(cfg: &NetConfig) -> ([Layer; 3], usize) {
    let mut off = 0;
    let stem1 = conv_layer(&mut off, cfg.c1, 2);
    let stem2 = conv_layer(&mut off, cfg.c2, cfg.c1);
    let head = linear_layer(&mut off, 6, cfg.c2);
    ([stem1, stem2, head], off)
}

fn layer_boundary_aligned(layers: &[Layer], frozen_len: usize) -> bool {
    frozen_len == 0 || layers.iter().any(|l| l.bias.end == frozen_len)
}

fn xavier_fill(data: &mut [f64], range: &Range<usize>, fan_in: usize, fan_out: usize, rng: &mut rand_chacha::ChaCha8Rng) {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in &mut data[range.clone()] {
        *v = rng.random_range(-s..s);
    }
}

/// Depth prediction network; owns its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthNetToy {
    config: NetConfig,
    params: ParamVector,
}

impl DepthNetToy {
    /// Parameters drawn from a seeded stream; first stem layer frozen.
    pub fn seeded(config: NetConfig, seed: u64) -> Self {
        let (layers, total) = depth_layers(&config);
        let mut data = vec![0.0; total];
        let mut rng = crate::rng::stream(seed, "toynets:depth-init");
        for l in &layers {
            let (cout, cin) = l.dims;
            xavier_fill(&mut data, &l.weights, cin * 9, cout * 9, &mut rng);
        }
        let frozen = layers[0].bias.end;
        DepthNetToy { config, params: ParamVector::new(data, frozen).unwrap() }
    }

    /// All-zero parameters (constant mid-range disparity); for tests.
    pub fn zeros(config: NetConfig) -> Self {
        let (layers, total) = depth_layers(&config);
        let frozen = layers[0].bias.end;
        DepthNetToy { config, params: ParamVector::new(vec![0.0; total], frozen).unwrap() }
    }

    pub fn from_params(config: NetConfig, params: ParamVector) -> Result<Self, ToyNetError> {
        let (layers, total) = depth_layers(&config);
        if params.len() != total {
            return Err(ToyNetError::ShapeMismatch { expected: total, got: params.len() });
        }
        if !layer_boundary_aligned(&layers, params.frozen_len()) {
            return Err(ToyNetError::InvalidConfig("frozen prefix not on a layer boundary"));
        }
        Ok(DepthNetToy { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Plain inference; identical arithmetic to the tape graph.
    pub fn forward(&self, image: &Image) -> Result<DisparityMap, ToyNetError> {
        let cfg = &self.config;
        if image.dims() != (cfg.height, cfg.width) {
            return Err(ToyNetError::DimensionMismatch {
                expected: (cfg.height, cfg.width),
                got: image.dims(),
            });
        }
        let (layers, _) = depth_layers(cfg);
        let p = self.params.data();
        let (h, w) = (cfg.height, cfg.width);
        let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);
        let slice = |l: &Layer| (&p[l.weights.clone()], &p[l.bias.clone()]);

        let (w1, b1) = slice(&layers[0]);
        let mut e1 = kernels::conv3x3(image.data(), 1, h, w, w1, b1, cfg.c1, 2);
        e1.iter_mut().for_each(|v| *v = v.tanh());

        let (w2s, b2) = slice(&layers[1]);
        let mut e2 = kernels::conv3x3(&e1, cfg.c1, h2, w2, w2s, b2, cfg.c2, 2);
        e2.iter_mut().for_each(|v| *v = v.tanh());

        let (w3, b3) = slice(&layers[2]);
        let up1 = kernels::upsample2x(&e2, cfg.c2, h4, w4);
        let mut d1 = kernels::conv3x3(&up1, cfg.c2, h2, w2, w3, b3, cfg.c1, 1);
        for (v, s) in d1.iter_mut().zip(&e1) {
            *v = (*v + s).tanh();
        }

        let (w4s, b4) = slice(&layers[3]);
        let up2 = kernels::upsample2x(&d1, cfg.c1, h2, w2);
        let raw = kernels::conv3x3(&up2, cfg.c1, h, w, w4s, b4, 1, 1);

        let disp: Vec<f64> = raw
            .iter()
            .map(|r| MIN_DISPARITY + kernels::sigmoid(*r) * (MAX_DISPARITY - MIN_DISPARITY))
            .collect();
        Ok(DisparityMap::new(h, w, disp)?)
    }
}

/// Relative-pose prediction network; owns its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseNetToy {
    config: NetConfig,
    params: ParamVector,
}

impl PoseNetToy {
    /// Seeded stem, zero-initialized head; first stem layer frozen.
    pub fn seeded(config: NetConfig, seed: u64) -> Self {
        let (layers, total) = pose_layers(&config);
        let mut data = vec![0.0; total];
        let mut rng = crate::rng::stream(seed, "toynets:pose-init");
        for l in &layers[..2] {
            let (cout, cin) = l.dims;
            xavier_fill(&mut data, &l.weights, cin * 9, cout * 9, &mut rng);
        }
        // Head stays zero: untrained odometry is identity motion.
        let frozen = layers[0].bias.end;
        PoseNetToy { config, params: ParamVector::new(data, frozen).unwrap() }
    }

    pub fn from_params(config: NetConfig, params: ParamVector) -> Result<Self, ToyNetError> {
        let (layers, total) = pose_layers(&config);
        if params.len() != total {
            return Err(ToyNetError::ShapeMismatch { expected: total, got: params.len() });
        }
        if !layer_boundary_aligned(&layers, params.frozen_len()) {
            return Err(ToyNetError::InvalidConfig("frozen prefix not on a layer boundary"));
        }
        Ok(PoseNetToy { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Plain inference; identical arithmetic to the tape graph.
    pub fn forward(&self, a: &Image, b: &Image) -> Result<Twist, ToyNetError> {
        let cfg = &self.config;
        for img in [a, b] {
            if img.dims() != (cfg.height, cfg.width) {
                return Err(ToyNetError::DimensionMismatch {
                    expected: (cfg.height, cfg.width),
                    got: img.dims(),
                });
            }
        }
        let (layers, _) = pose_layers(cfg);
        let p = self.params.data();
        let (h, w) = (cfg.height, cfg.width);
        let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);

        let mut pair = Vec::with_capacity(2 * h * w);
        pair.extend_from_slice(a.data());
        pair.extend_from_slice(b.data());

        let s1 = &layers[0];
        let mut f1 = kernels::conv3x3(
            &pair,
            2,
            h,
            w,
            &p[s1.weights.clone()],
            &p[s1.bias.clone()],
            cfg.c1,
            2,
        );
        f1.iter_mut().for_each(|v| *v = v.tanh());

        let s2 = &layers[1];
        let mut f2 = kernels::conv3x3(
            &f1,
            cfg.c1,
            h2,
            w2,
            &p[s2.weights.clone()],
            &p[s2.bias.clone()],
            cfg.c2,
            2,
        );
        f2.iter_mut().for_each(|v| *v = v.tanh());

        let hw = h4 * w4;
        let mut pooled = vec![0.0; cfg.c2];
        for (ch, out) in pooled.iter_mut().enumerate() {
            *out = f2[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64;
        }

        let head = &layers[2];
        let (hw_, hb) = (&p[head.weights.clone()], &p[head.bias.clone()]);
        let mut out = [0.0; 6];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = hb[j];
            for i in 0..cfg.c2 {
                acc += hw_[j * cfg.c2 + i] * pooled[i];
            }
            *o = acc;
        }
        Ok(Twist::from_array(out))
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update in place. Frozen parameters stay fixed because their
/// gradients are zero and their moments start (and stay) zero.
pub fn adam_step(
    params: &mut ParamVector,
    grads: &[f64],
    state: &mut AdamState,
) -> Result<(), ToyNetError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(ToyNetError::ShapeMismatch { expected: params.len(), got: grads.len() });
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let data = params.data_mut();
    for i in 0..data.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        data[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
    }
    Ok(())
}

/// Central finite differences `(f(x + h e_i) - f(x - h e_i)) / 2h`; gradient
/// oracle for the backward pass.
pub fn finite_difference_gradient(
    f: impl Fn(&[f64]) -> f64,
    params: &[f64],
    h: f64,
) -> Vec<f64> {
    debug_assert!(h > 0.0);
    let mut g = vec![0.0; params.len()];
    let mut x = params.to_vec();
    for i in 0..params.len() {
        x[i] = params[i] + h;
        let up = f(&x);
        x[i] = params[i] - h;
        let dn = f(&x);
        x[i] = params[i];
        g[i] = (up - dn) / (2.0 * h);
    }
    g
}

/// Per-layer leaf (or constant, when frozen) nodes for one network.
struct NetLeaves {
    /// (parameter range, weight node, bias node, frozen)
    entries: Vec<(Layer, NodeId, NodeId, bool)>,
}

impl NetLeaves {
    fn nodes(&self, i: usize) -> (NodeId, NodeId) {
        (self.entries[i].1, self.entries[i].2)
    }
}

fn push_layers(
    tape: &mut Tape,
    params: &ParamVector,
    layers: &[Layer],
    shapes: &[([usize; 4], [usize; 4])],
) -> NetLeaves {
    let mut entries = Vec::with_capacity(layers.len());
    for (l, (ws, bs)) in layers.iter().zip(shapes) {
        let frozen = l.bias.end <= params.frozen_len();
        let wdata = params.data()[l.weights.clone()].to_vec();
        let bdata = params.data()[l.bias.clone()].to_vec();
        let (wn, bn) = if frozen {
            (tape.constant(wdata, *ws), tape.constant(bdata, *bs))
        } else {
            (tape.leaf(wdata, *ws), tape.leaf(bdata, *bs))
        };
        entries.push((l.clone(), wn, bn, frozen));
    }
    NetLeaves { entries }
}

fn collect_grads(leaves: &NetLeaves, grads: &Gradients, total: usize) -> Vec<f64> {
    let mut out = vec![0.0; total];
    for (layer, wn, bn, frozen) in &leaves.entries {
        if *frozen {
            continue;
        }
        out[layer.weights.clone()]
            .copy_from_slice(&grads.dense(*wn, layer.weights.len()));
        out[layer.bias.clone()].copy_from_slice(&grads.dense(*bn, layer.bias.len()));
    }
    out
}

/// DepthNet forward on the tape; returns the disparity node.
fn depth_graph(tape: &mut Tape, net: &DepthNetToy, image: &Image, leaves: &NetLeaves) -> NodeId {
    let cfg = &net.config;
    let (h, w) = (cfg.height, cfg.width);
    let input = tape.constant(image.data().to_vec(), [1, 1, h, w]);
    let (e1w, e1b) = leaves.nodes(0);
    let c1 = tape.conv2d(input, e1w, e1b, 2);
    let e1 = tape.tanh(c1);
    let (e2w, e2b) = leaves.nodes(1);
    let c2 = tape.conv2d(e1, e2w, e2b, 2);
    let e2 = tape.tanh(c2);
    let (d1w, d1b) = leaves.nodes(2);
    let u1 = tape.upsample2x(e2);
    let c3 = tape.conv2d(u1, d1w, d1b, 1);
    let skip = tape.add(c3, e1);
    let d1 = tape.tanh(skip);
    let (d2w, d2b) = leaves.nodes(3);
    let u2 = tape.upsample2x(d1);
    let raw = tape.conv2d(u2, d2w, d2b, 1);
    let sig = tape.sigmoid(raw);
    let scaled = tape.mul_c(sig, MAX_DISPARITY - MIN_DISPARITY);
    tape.add_c(scaled, MIN_DISPARITY)
}

/// PoseNet forward on the tape; returns the six twist component nodes.
fn pose_graph(
    tape: &mut Tape,
    net: &PoseNetToy,
    a: &Image,
    b: &Image,
    leaves: &NetLeaves,
) -> [NodeId; 6] {
    let cfg = &net.config;
    let (h, w) = (cfg.height, cfg.width);
    let mut pair = Vec::with_capacity(2 * h * w);
    pair.extend_from_slice(a.data());
    pair.extend_from_slice(b.data());
    let input = tape.constant(pair, [1, 2, h, w]);
    let (s1w, s1b) = leaves.nodes(0);
    let c1 = tape.conv2d(input, s1w, s1b, 2);
    let f1 = tape.tanh(c1);
    let (s2w, s2b) = leaves.nodes(1);
    let c2 = tape.conv2d(f1, s2w, s2b, 2);
    let f2 = tape.tanh(c2);
    let pooled = tape.mean_chw(f2);
    let (hw, hb) = leaves.nodes(2);
    let out = tape.linear(pooled, hw, hb);
    core::array::from_fn(|i| tape.index(out, i))
}

/// SE(3) exponential as scalar tape nodes: rotation-matrix entries (row
/// major) and translation. Mirrors `geometry::se3_exp` including the Taylor
/// branch, selected by value; at the zero twist the series keeps every
/// partial derivative finite.
fn se3_exp_nodes(tape: &mut Tape, xi: &[NodeId; 6]) -> ([NodeId; 9], [NodeId; 3]) {
    let [w0, w1, w2, u0, u1, u2] = *xi;
    let sq0 = tape.mul(w0, w0);
    let sq1 = tape.mul(w1, w1);
    let sq2 = tape.mul(w2, w2);
    let theta_sq = tape.sum_n(&[sq0, sq1, sq2]);
    let ts = tape.scalar_value(theta_sq);

    // Series coefficients a = sin(t)/t, b = (1-cos t)/t^2, c = (1-a)/t^2.
    let (a, b, c) = if ts < crate::geometry::SMALL_ANGLE * crate::geometry::SMALL_ANGLE {
        let s2 = tape.mul(theta_sq, theta_sq);
        let a1 = tape.mul_c(theta_sq, -1.0 / 6.0);
        let a2 = tape.mul_c(s2, 1.0 / 120.0);
        let a12 = tape.add(a1, a2);
        let a = tape.add_c(a12, 1.0);
        let b1 = tape.mul_c(theta_sq, -1.0 / 24.0);
        let b2 = tape.mul_c(s2, 1.0 / 720.0);
        let b12 = tape.add(b1, b2);
        let b = tape.add_c(b12, 0.5);
        let c1 = tape.mul_c(theta_sq, -1.0 / 120.0);
        let c2 = tape.mul_c(s2, 1.0 / 5040.0);
        let c12 = tape.add(c1, c2);
        let c = tape.add_c(c12, 1.0 / 6.0);
        (a, b, c)
    } else {
        let theta = tape.sqrt(theta_sq);
        let st = tape.sin(theta);
        let a = tape.div(st, theta);
        let ct = tape.cos(theta);
        let nct = tape.neg(ct);
        let one_m_ct = tape.add_c(nct, 1.0);
        let b = tape.div(one_m_ct, theta_sq);
        let na = tape.neg(a);
        let one_m_a = tape.add_c(na, 1.0);
        let c = tape.div(one_m_a, theta_sq);
        (a, b, c)
    };

    let wv = [w0, w1, w2];
    // hat(w) entries: hat[i][j]; hat2[i][j] = w_i w_j - delta_ij theta_sq.
    let zero = tape.scalar_const(0.0);
    let nw0 = tape.neg(w0);
    let nw1 = tape.neg(w1);
    let nw2 = tape.neg(w2);
    let hat = [
        [zero, nw2, w1],
        [w2, zero, nw0],
        [nw1, w0, zero],
    ];
    let mut rot = [zero; 9];
    let mut v_mat = [zero; 9];
    for i in 0..3 {
        for j in 0..3 {
            let wiwj = tape.mul(wv[i], wv[j]);
            let hat2 = if i == j {
                tape.sub(wiwj, theta_sq)
            } else {
                wiwj
            };
            // R = I + a hat + b hat2; V = I + b hat + c hat2.
            let ra = tape.mul(a, hat[i][j]);
            let rb = tape.mul(b, hat2);
            let rsum = tape.add(ra, rb);
            rot[i * 3 + j] = if i == j { tape.add_c(rsum, 1.0) } else { rsum };
            let vb = tape.mul(b, hat[i][j]);
            let vc = tape.mul(c, hat2);
            let vsum = tape.add(vb, vc);
            v_mat[i * 3 + j] = if i == j { tape.add_c(vsum, 1.0) } else { vsum };
        }
    }
    let uv = [u0, u1, u2];
    let trans = core::array::from_fn(|i| {
        let p0 = tape.mul(v_mat[i * 3], uv[0]);
        let p1 = tape.mul(v_mat[i * 3 + 1], uv[1]);
        let p2 = tape.mul(v_mat[i * 3 + 2], uv[2]);
        tape.sum_n(&[p0, p1, p2])
    });
    (rot, trans)
}

/// Warp of `source` onto the target grid on the tape, given the target's
/// depth node and the target-to-source transform as scalar nodes.
fn warp_graph(
    tape: &mut Tape,
    source: &Image,
    depth: NodeId,
    rot: &[NodeId; 9],
    trans: &[NodeId; 3],
    k: &CameraIntrinsics,
) -> (NodeId, Vec<bool>) {
    let (h, w) = (k.height, k.width);
    let mut dir_x = vec![0.0; h * w];
    let mut dir_y = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            dir_x[y * w + x] = (x as f64 - k.cx) / k.fx;
            dir_y[y * w + x] = (y as f64 - k.cy) / k.fy;
        }
    }
    let dx = tape.constant(dir_x, [1, 1, h, w]);
    let dy = tape.constant(dir_y, [1, 1, h, w]);
    let px = tape.mul(depth, dx);
    let py = tape.mul(depth, dy);
    let xs = tape.lin_comb3([px, py, depth], [rot[0], rot[1], rot[2]], trans[0]);
    let ys = tape.lin_comb3([px, py, depth], [rot[3], rot[4], rot[5]], trans[1]);
    let zs = tape.lin_comb3([px, py, depth], [rot[6], rot[7], rot[8]], trans[2]);
    let premask: Vec<bool> = tape.value(zs).iter().map(|z| *z > WARP_Z_EPS).collect();
    let zc = tape.clamp_min(zs, WARP_Z_EPS);
    let un = tape.div(xs, zc);
    let uf = tape.mul_c(un, k.fx);
    let u = tape.add_c(uf, k.cx);
    let vn = tape.div(ys, zc);
    let vf = tape.mul_c(vn, k.fy);
    let v = tape.add_c(vf, k.cy);
    tape.sample_bilinear(source.data(), h, w, u, v, &premask)
}

/// Dissimilarity map node between a fixed target and a warped node.
fn dissim_graph(
    tape: &mut Tape,
    target: &Image,
    warped: NodeId,
    weights: &LossWeights,
) -> NodeId {
    let (h, w) = target.dims();
    let t_const = tape.constant(target.data().to_vec(), [1, 1, h, w]);
    let mu_t = tape.box_filter3(t_const);
    let tt = tape.mul(t_const, t_const);
    let m_tt = tape.box_filter3(tt);
    let mu_w = tape.box_filter3(warped);
    let ww = tape.mul(warped, warped);
    let m_ww = tape.box_filter3(ww);
    let tw = tape.mul(t_const, warped);
    let m_tw = tape.box_filter3(tw);

    let mu_t2 = tape.mul(mu_t, mu_t);
    let mu_w2 = tape.mul(mu_w, mu_w);
    let var_t = tape.sub(m_tt, mu_t2);
    let var_w = tape.sub(m_ww, mu_w2);
    let mu_tw = tape.mul(mu_t, mu_w);
    let cov = tape.sub(m_tw, mu_tw);

    let mu_prod2 = tape.mul_c(mu_tw, 2.0);
    let num_l = tape.add_c(mu_prod2, weights.c1);
    let cov2 = tape.mul_c(cov, 2.0);
    let num_r = tape.add_c(cov2, weights.c2);
    let num = tape.mul(num_l, num_r);
    let mu_sum = tape.add(mu_t2, mu_w2);
    let den_l = tape.add_c(mu_sum, weights.c1);
    let var_sum = tape.add(var_t, var_w);
    let den_r = tape.add_c(var_sum, weights.c2);
    let den = tape.mul(den_l, den_r);
    let ssim = tape.div(num, den);

    let nssim = tape.neg(ssim);
    let one_m = tape.add_c(nssim, 1.0);
    let ssim_part = tape.mul_c(one_m, weights.alpha / 2.0);
    let diff = tape.sub(t_const, warped);
    let adiff = tape.abs(diff);
    let l1_part = tape.mul_c(adiff, 1.0 - weights.alpha);
    tape.add(ssim_part, l1_part)
}

/// Loss value, per-term breakdown, and flat gradients for both networks on
/// one triplet. The pose network runs twice (pairs (0,1) and (1,2)); its
/// gradients accumulate at shared parameter leaves.
pub struct TripletGradients {
    pub breakdown: LossBreakdown,
    pub depth_grad: Vec<f64>,
    pub pose_grad: Vec<f64>,
}

pub fn triplet_loss_and_gradients(
    triplet: &ImageTriplet,
    depth_net: &DepthNetToy,
    pose_net: &PoseNetToy,
    k: &CameraIntrinsics,
    weights: &LossWeights,
) -> Result<TripletGradients, ToyNetError> {
    let cfg = depth_net.config;
    if pose_net.config != cfg {
        return Err(ToyNetError::InvalidConfig("depth and pose configs differ"));
    }
    let (h, w) = (cfg.height, cfg.width);
    if triplet.frames[0].dims() != (h, w) {
        return Err(ToyNetError::DimensionMismatch {
            expected: (h, w),
            got: triplet.frames[0].dims(),
        });
    }
    if (k.height, k.width) != (h, w) {
        return Err(ToyNetError::DimensionMismatch { expected: (h, w), got: (k.height, k.width) });
    }
    weights.validate()?;

    let mut tape = Tape::new();
    let (dlayers, dtotal) = depth_layers(&cfg);
    let depth_leaves = push_layers(
        &mut tape,
        depth_net.params(),
        &dlayers,
        &[
            ([cfg.c1, 1, 3, 3], [1, 1, 1, cfg.c1]),
            ([cfg.c2, cfg.c1, 3, 3], [1, 1, 1, cfg.c2]),
            ([cfg.c1, cfg.c2, 3, 3], [1, 1, 1, cfg.c1]),
            ([1, cfg.c1, 3, 3], [1, 1, 1, 1]),
        ],
    );
    let (players, ptotal) = pose_layers(&cfg);
    let pose_leaves = push_layers(
        &mut tape,
        pose_net.params(),
        &players,
        &[
            ([cfg.c1, 2, 3, 3], [1, 1, 1, cfg.c1]),
            ([cfg.c2, cfg.c1, 3, 3], [1, 1, 1, cfg.c2]),
            ([1, 1, 6, cfg.c2], [1, 1, 1, 6]),
        ],
    );

    let target = &triplet.frames[1];
    let disparity = depth_graph(&mut tape, depth_net, target, &depth_leaves);
    let depth = tape.recip(disparity);

    // Relative poses: xi1 for the (0,1) pair, xi2 for (1,2). Warping frame 0
    // uses exp(xi1) directly (increment maps later-frame coords to earlier);
    // warping frame 2 needs the inverse, exp(-xi2).
    let xi1 = pose_graph(&mut tape, pose_net, &triplet.frames[0], target, &pose_leaves);
    let xi2 = pose_graph(&mut tape, pose_net, target, &triplet.frames[2], &pose_leaves);
    let (r1, t1) = se3_exp_nodes(&mut tape, &xi1);
    let xi2n = core::array::from_fn(|i| tape.neg(xi2[i]));
    let (r2i, t2i) = se3_exp_nodes(&mut tape, &xi2n);

    let (warp_prev, valid_prev) =
        warp_graph(&mut tape, &triplet.frames[0], depth, &r1, &t1, k);
    let (warp_next, valid_next) =
        warp_graph(&mut tape, &triplet.frames[2], depth, &r2i, &t2i, k);

    let err_prev = dissim_graph(&mut tape, target, warp_prev, weights);
    let err_next = dissim_graph(&mut tape, target, warp_next, weights);
    let (min_err, _choice) = tape.min_select(err_prev, err_next, &valid_prev, &valid_next);

    // Auto-mask from forward values: strict improvement over the best
    // unwarped source error, with at least one valid warp.
    let unwarped_prev = dissimilarity_with(target, &triplet.frames[0], weights.alpha, weights.c1, weights.c2)?;
    let unwarped_next = dissimilarity_with(target, &triplet.frames[2], weights.alpha, weights.c1, weights.c2)?;
    let min_vals = tape.value(min_err);
    let mut automask = vec![false; h * w];
    for p in 0..h * w {
        let any_valid = valid_prev[p] || valid_next[p];
        let best_unwarped = unwarped_prev[p].min(unwarped_next[p]);
        automask[p] = any_valid && min_vals[p] < best_unwarped;
    }
    let l_pr = tape.masked_mean(min_err, &automask);

    // Edge-aware smoothness of mean-normalized disparity.
    let disp_mean = tape.mean_all(disparity);
    let disp_norm = tape.div_s(disparity, disp_mean);
    let t_node = tape.constant(target.data().to_vec(), [1, 1, h, w]);
    let sdx = tape.diff_x(disp_norm);
    let asdx = tape.abs(sdx);
    let idx = tape.diff_x(t_node);
    let aidx = tape.abs(idx);
    let naidx = tape.neg(aidx);
    let wx = tape.exp(naidx);
    let term_x = tape.mul(asdx, wx);
    let mean_x = tape.mean_all(term_x);
    let sdy = tape.diff_y(disp_norm);
    let asdy = tape.abs(sdy);
    let idy = tape.diff_y(t_node);
    let aidy = tape.abs(idy);
    let naidy = tape.neg(aidy);
    let wy = tape.exp(naidy);
    let term_y = tape.mul(asdy, wy);
    let mean_y = tape.mean_all(term_y);
    let l_sm = tape.add(mean_x, mean_y);

    // Velocity supervision on predicted translation magnitudes; the inverted
    // direction for pair (1,2) has the same magnitude. The zero-initialized
    // head starts at the norm's zero point, where the subgradient is taken
    // along the optical axis: +z for the forward pair, -z for the inverted
    // one, so both pulls agree on forward motion through the shared head.
    let n1 = tape.norm3(t1[0], t1[1], t1[2], NORM_EPS, 1.0);
    let n2 = tape.norm3(t2i[0], t2i[1], t2i[2], NORM_EPS, -1.0);
    let dt0 = triplet.timestamps[1] - triplet.timestamps[0];
    let dt1 = triplet.timestamps[2] - triplet.timestamps[1];
    let d1 = tape.add_c(n1, -triplet.velocities[0] * dt0);
    let a1 = tape.abs(d1);
    let d2 = tape.add_c(n2, -triplet.velocities[1] * dt1);
    let a2 = tape.abs(d2);
    let l_vel = tape.add(a1, a2);

    let sm_w = tape.mul_c(l_sm, weights.gamma);
    let vel_w = tape.mul_c(l_vel, weights.lambda);
    let partial = tape.add(l_pr, sm_w);
    let total = tape.add(partial, vel_w);

    let grads = tape.backward(total)?;
    let depth_grad = collect_grads(&depth_leaves, &grads, dtotal);
    let pose_grad = collect_grads(&pose_leaves, &grads, ptotal);

    let breakdown = LossBreakdown {
        photometric: tape.scalar_value(l_pr),
        smoothness: tape.scalar_value(l_sm),
        velocity: tape.scalar_value(l_vel),
        total: tape.scalar_value(total),
        mask: Mask { height: h, width: w, data: automask },
    };
    Ok(TripletGradients { breakdown, depth_grad, pose_grad })
}

/// Network kind tag used in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    Depth,
    Pose,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"TNET";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes a parameter vector with its architecture header
/// (little-endian; magic, version, kind, config, frozen length, values).
pub fn encode_checkpoint(kind: NetKind, config: &NetConfig, params: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 + 1 + 16 + 16 + params.len() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(match kind {
        NetKind::Depth => 0,
        NetKind::Pose => 1,
    });
    for v in [config.height, config.width, config.c1, config.c2] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.frozen_len() as u64).to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Inverse of [`encode_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(NetKind, NetConfig, ParamVector), ToyNetError> {
    let fail = |m: &'static str| ToyNetError::InvalidCheckpoint(m);
    if bytes.len() < 41 {
        return Err(fail("truncated header"));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic"));
    }
    let ver = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if ver != CHECKPOINT_VERSION {
        return Err(fail("unsupported version"));
    }
    let kind = match bytes[8] {
        0 => NetKind::Depth,
        1 => NetKind::Pose,
        _ => return Err(fail("unknown network kind")),
    };
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (h, w, c1, c2) = (u32_at(9), u32_at(13), u32_at(17), u32_at(21));
    let config = NetConfig::new(h, w, c1, c2).map_err(|_| fail("invalid config"))?;
    let frozen = u64::from_le_bytes(bytes[25..33].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[33..41].try_into().unwrap()) as usize;
    if bytes.len() != 41 + count * 8 {
        return Err(fail("parameter payload length mismatch"));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = 41 + i * 8;
        data.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
    }
    let params = ParamVector::new(data, frozen).map_err(|_| fail("invalid parameters"))?;
    Ok((kind, config, params))
}
