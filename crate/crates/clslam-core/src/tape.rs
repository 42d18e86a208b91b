//! Reverse-mode autodiff over dense `f64` tensors, sized for the toy
//! networks: an eager tape where every operation computes its value on
//! construction and `backward` replays the tape in reverse.
//!
//! Shapes are `[n, c, h, w]` with `n = 1` throughout; scalars are
//! `[1, 1, 1, 1]` and flat vectors `[1, 1, 1, k]`. Ops panic on shape
//! mismatches (programming errors); `backward` returns an error for an
//! invalid or non-scalar root.
//!
//! Warping-specific ops ([`Tape::sample_bilinear`], [`Tape::min_select`],
//! [`Tape::masked_mean`]) bake their pixel validity decisions at forward time
//! and expose them to the caller, so masking logic stays identical between
//! this graph and the reference path in `photometric`.

use crate::kernels;
use crate::kernels::sigmoid;
use alloc::vec;
use alloc::vec::Vec;
// Needed for float math in no_std builds; std builds resolve these
// methods inherently and then see this import as unused.
#[allow(unused_imports)]
use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TapeError {
    #[error("no recorded graph for this root (node {id} of {len}, root must be scalar)")]
    GraphNotRecorded { id: usize, len: usize },
}

/// Handle to a tape node. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

pub type Shape = [usize; 4];

pub const SCALAR: Shape = [1, 1, 1, 1];

fn numel(s: &Shape) -> usize {
    s[0] * s[1] * s[2] * s[3]
}

enum Op {
    Leaf,
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddC(NodeId),
    MulC(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Abs(NodeId),
    Sqrt(NodeId),
    Exp(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Recip(NodeId),
    ClampMin(NodeId, f64),
    Conv2d { input: NodeId, weights: NodeId, bias: NodeId, stride: usize },
    Upsample2x(NodeId),
    BoxFilter3(NodeId),
    MeanChw(NodeId),
    MeanAll(NodeId),
    Linear { input: NodeId, weights: NodeId, bias: NodeId },
    Index(NodeId, usize),
    /// `sum_k coeffs[k] * maps[k] + offset` with scalar-node coefficients.
    LinComb3 { maps: [NodeId; 3], coeffs: [NodeId; 3], offset: NodeId },
    SampleBilinear {
        image: Vec<f64>,
        height: usize,
        width: usize,
        u: NodeId,
        v: NodeId,
        valid: Vec<bool>,
    },
    /// Per-pixel minimum of two maps under validity; `choice` 0 = first,
    /// 1 = second, 2 = no valid input (output 0, no gradient).
    MinSelect { a: NodeId, b: NodeId, choice: Vec<u8> },
    MaskedMean { x: NodeId, mask: Vec<bool>, count: usize },
    SumN(Vec<NodeId>),
    DiffX(NodeId),
    DiffY(NodeId),
    /// Broadcast multiply of a map by a scalar node.
    MulS { x: NodeId, s: NodeId },
    /// Broadcast divide of a map by a scalar node.
    DivS { x: NodeId, s: NodeId },
    /// Guarded Euclidean norm of three scalars; `zero_sign` fixes the
    /// subgradient taken at the exact zero point (see [`Tape::norm3`]).
    Norm3 { x: NodeId, y: NodeId, z: NodeId, zero_sign: f64 },
}

struct Node {
    op: Op,
    data: Vec<f64>,
    shape: Shape,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. the node, or `None` when no gradient
    /// flowed there (constants, or unreached subgraphs).
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient as an owned vector, zeros when absent.
    pub fn dense(&self, id: NodeId, len: usize) -> Vec<f64> {
        match self.get(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; len],
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].shape, SCALAR);
        self.nodes[id.0].data[0]
    }

    fn push(&mut self, op: Op, data: Vec<f64>, shape: Shape, requires_grad: bool) -> NodeId {
        debug_assert_eq!(data.len(), numel(&shape));
        self.nodes.push(Node { op, data, shape, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Differentiable input (parameters).
    pub fn leaf(&mut self, data: Vec<f64>, shape: Shape) -> NodeId {
        self.push(Op::Leaf, data, shape, true)
    }

    /// Non-differentiable input (images, fixed tensors).
    pub fn constant(&mut self, data: Vec<f64>, shape: Shape) -> NodeId {
        self.push(Op::Const, data, shape, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(vec![v], SCALAR)
    }

    fn binary_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> NodeId {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(na.shape, nb.shape, "elementwise op on mismatched shapes");
        let data = na.data.iter().zip(&nb.data).map(|(x, y)| f(*x, *y)).collect();
        let shape = na.shape;
        let rg = na.requires_grad || nb.requires_grad;
        self.push(op, data, shape, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let n = &self.nodes[x.0];
        let data = n.data.iter().map(|v| f(*v)).collect();
        let shape = n.shape;
        let rg = n.requires_grad;
        self.push(op, data, shape, rg)
    }

    pub fn add_c(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |v| v + c, Op::AddC(x))
    }

    pub fn mul_c(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |v| v * c, Op::MulC(x, c))
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.mul_c(x, -1.0)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.sin(), Op::Sin(x))
    }

    pub fn cos(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.cos(), Op::Cos(x))
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| 1.0 / v, Op::Recip(x))
    }

    pub fn clamp_min(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |v| v.max(c), Op::ClampMin(x, c))
    }

    /// `sqrt(x^2 + y^2 + z^2 + guard)` over three scalar nodes. The radial
    /// direction is undefined at the exact zero vector, where any unit
    /// direction is a valid subgradient; this op routes the full pull to the
    /// `z` input scaled by `zero_sign`. Callers pass the component along the
    /// canonical direction of travel (the optical axis for camera
    /// translations) so a zero-initialized prediction still learns from
    /// magnitude supervision instead of resting on a stationary point.
    pub fn norm3(&mut self, x: NodeId, y: NodeId, z: NodeId, guard: f64, zero_sign: f64) -> NodeId {
        for id in [x, y, z] {
            assert_eq!(self.nodes[id.0].shape, SCALAR, "norm3 expects scalar nodes");
        }
        let vx = self.nodes[x.0].data[0];
        let vy = self.nodes[y.0].data[0];
        let vz = self.nodes[z.0].data[0];
        let n = (vx * vx + vy * vy + vz * vz + guard).sqrt();
        let rg = self.needs(x) || self.needs(y) || self.needs(z);
        self.push(Op::Norm3 { x, y, z, zero_sign }, vec![n], SCALAR, rg)
    }

    /// 3x3 convolution, zero padding 1. Input `[1, cin, h, w]`, weights
    /// `[cout, cin, 3, 3]`, bias `[1, 1, 1, cout]`.
    pub fn conv2d(&mut self, input: NodeId, weights: NodeId, bias: NodeId, stride: usize) -> NodeId {
        let si = self.nodes[input.0].shape;
        let sw = self.nodes[weights.0].shape;
        let sb = self.nodes[bias.0].shape;
        assert_eq!(si[0], 1, "conv input batch must be 1");
        assert_eq!(sw[2], 3, "conv kernel must be 3x3");
        assert_eq!(sw[3], 3, "conv kernel must be 3x3");
        assert_eq!(si[1], sw[1], "conv input channels mismatch");
        assert_eq!(sb, [1, 1, 1, sw[0]], "conv bias shape mismatch");
        let (cin, h, w) = (si[1], si[2], si[3]);
        let cout = sw[0];
        let data = kernels::conv3x3(
            &self.nodes[input.0].data,
            cin,
            h,
            w,
            &self.nodes[weights.0].data,
            &self.nodes[bias.0].data,
            cout,
            stride,
        );
        let oh = kernels::conv3x3_out_dim(h, stride);
        let ow = kernels::conv3x3_out_dim(w, stride);
        let rg = self.needs(input) || self.needs(weights) || self.needs(bias);
        self.push(Op::Conv2d { input, weights, bias, stride }, data, [1, cout, oh, ow], rg)
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].shape;
        let data = kernels::upsample2x(&self.nodes[x.0].data, s[1], s[2], s[3]);
        let rg = self.needs(x);
        self.push(Op::Upsample2x(x), data, [1, s[1], s[2] * 2, s[3] * 2], rg)
    }

    /// 3x3 box mean with replicate-clamped borders over a `[1, 1, h, w]` map.
    pub fn box_filter3(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].shape;
        assert_eq!(s[1], 1, "box filter expects a single-channel map");
        let data = kernels::box3_mean(&self.nodes[x.0].data, s[2], s[3]);
        let rg = self.needs(x);
        self.push(Op::BoxFilter3(x), data, s, rg)
    }

    /// Per-channel spatial mean: `[1, c, h, w]` -> `[1, 1, 1, c]`.
    pub fn mean_chw(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].shape;
        let (c, hw) = (s[1], s[2] * s[3]);
        let mut data = vec![0.0; c];
        for (ch, out) in data.iter_mut().enumerate() {
            let plane = &self.nodes[x.0].data[ch * hw..(ch + 1) * hw];
            *out = plane.iter().sum::<f64>() / hw as f64;
        }
        let rg = self.needs(x);
        self.push(Op::MeanChw(x), data, [1, 1, 1, c], rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].data.len();
        let v = self.nodes[x.0].data.iter().sum::<f64>() / n as f64;
        let rg = self.needs(x);
        self.push(Op::MeanAll(x), vec![v], SCALAR, rg)
    }

    /// Dense layer: input `[1, 1, 1, n]`, weights `[1, 1, m, n]`, bias
    /// `[1, 1, 1, m]` -> `[1, 1, 1, m]`.
    pub fn linear(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> NodeId {
        let si = self.nodes[input.0].shape;
        let sw = self.nodes[weights.0].shape;
        let sb = self.nodes[bias.0].shape;
        let (m, n) = (sw[2], sw[3]);
        assert_eq!(si, [1, 1, 1, n], "linear input shape mismatch");
        assert_eq!(sb, [1, 1, 1, m], "linear bias shape mismatch");
        let mut data = vec![0.0; m];
        for j in 0..m {
            let mut acc = self.nodes[bias.0].data[j];
            for i in 0..n {
                acc += self.nodes[weights.0].data[j * n + i] * self.nodes[input.0].data[i];
            }
            data[j] = acc;
        }
        let rg = self.needs(input) || self.needs(weights) || self.needs(bias);
        self.push(Op::Linear { input, weights, bias }, data, [1, 1, 1, m], rg)
    }

    /// Scalar node holding `x[i]`.
    pub fn index(&mut self, x: NodeId, i: usize) -> NodeId {
        let v = self.nodes[x.0].data[i];
        let rg = self.needs(x);
        self.push(Op::Index(x, i), vec![v], SCALAR, rg)
    }

    /// `coeffs[0]*maps[0] + coeffs[1]*maps[1] + coeffs[2]*maps[2] + offset`
    /// where coefficients and offset are scalar nodes and maps share a shape.
    pub fn lin_comb3(&mut self, maps: [NodeId; 3], coeffs: [NodeId; 3], offset: NodeId) -> NodeId {
        let shape = self.nodes[maps[0].0].shape;
        for m in &maps {
            assert_eq!(self.nodes[m.0].shape, shape, "lin_comb3 map shapes differ");
        }
        for c in coeffs.iter().chain([&offset]) {
            assert_eq!(self.nodes[c.0].shape, SCALAR, "lin_comb3 coeffs must be scalars");
        }
        let n = numel(&shape);
        let c: Vec<f64> = coeffs.iter().map(|c| self.nodes[c.0].data[0]).collect();
        let off = self.nodes[offset.0].data[0];
        let mut data = vec![off; n];
        for k in 0..3 {
            let src = &self.nodes[maps[k].0].data;
            for (o, s) in data.iter_mut().zip(src) {
                *o += c[k] * s;
            }
        }
        let rg = maps.iter().chain(coeffs.iter()).chain([&offset]).any(|id| self.needs(*id));
        self.push(Op::LinComb3 { maps, coeffs, offset }, data, shape, rg)
    }

    /// Bilinear sampling of a fixed image at per-pixel coordinates `(u, v)`.
    ///
    /// `premask` marks pixels whose coordinates are meaningful (e.g. positive
    /// source depth). A pixel is valid when premasked and its snapped
    /// coordinates fall inside the image bounds (within the border fuzz
    /// used by the reference warp); invalid pixels output 0 and receive no
    /// gradient. Returns the output node and the final validity mask.
    pub fn sample_bilinear(
        &mut self,
        image: &[f64],
        height: usize,
        width: usize,
        u: NodeId,
        v: NodeId,
        premask: &[bool],
    ) -> (NodeId, Vec<bool>) {
        let shape = self.nodes[u.0].shape;
        assert_eq!(self.nodes[v.0].shape, shape, "sample coords shape mismatch");
        let n = numel(&shape);
        assert_eq!(premask.len(), n, "premask length mismatch");
        assert_eq!(image.len(), height * width, "image length mismatch");
        let mut data = vec![0.0; n];
        let mut valid = vec![false; n];
        for p in 0..n {
            if !premask[p] {
                continue;
            }
            let uu = kernels::snap_to_grid(self.nodes[u.0].data[p]);
            let vv = kernels::snap_to_grid(self.nodes[v.0].data[p]);
            let eps = crate::photometric::BORDER_EPS;
            if uu < -eps
                || uu > (width - 1) as f64 + eps
                || vv < -eps
                || vv > (height - 1) as f64 + eps
            {
                continue;
            }
            let uc = uu.clamp(0.0, (width - 1) as f64);
            let vc = vv.clamp(0.0, (height - 1) as f64);
            data[p] = kernels::bilinear_sample(image, height, width, uc, vc);
            valid[p] = true;
        }
        let rg = self.needs(u) || self.needs(v);
        let id = self.push(
            Op::SampleBilinear {
                image: image.to_vec(),
                height,
                width,
                u,
                v,
                valid: valid.clone(),
            },
            data,
            shape,
            rg,
        );
        (id, valid)
    }

    /// Per-pixel minimum of two maps restricted to their validity masks.
    /// Ties keep the first map; pixels valid in neither output 0. Returns
    /// the node and the per-pixel choice (0 first, 1 second, 2 dead).
    pub fn min_select(
        &mut self,
        a: NodeId,
        b: NodeId,
        a_valid: &[bool],
        b_valid: &[bool],
    ) -> (NodeId, Vec<u8>) {
        let shape = self.nodes[a.0].shape;
        assert_eq!(self.nodes[b.0].shape, shape, "min_select shapes differ");
        let n = numel(&shape);
        assert_eq!(a_valid.len(), n);
        assert_eq!(b_valid.len(), n);
        let mut data = vec![0.0; n];
        let mut choice = vec![2u8; n];
        for p in 0..n {
            let av = a_valid[p];
            let bv = b_valid[p];
            let (val, ch) = match (av, bv) {
                (true, true) => {
                    let (x, y) = (self.nodes[a.0].data[p], self.nodes[b.0].data[p]);
                    if y < x {
                        (y, 1)
                    } else {
                        (x, 0)
                    }
                }
                (true, false) => (self.nodes[a.0].data[p], 0),
                (false, true) => (self.nodes[b.0].data[p], 1),
                (false, false) => (0.0, 2),
            };
            data[p] = val;
            choice[p] = ch;
        }
        let rg = self.needs(a) || self.needs(b);
        let id = self.push(Op::MinSelect { a, b, choice: choice.clone() }, data, shape, rg);
        (id, choice)
    }

    /// Mean of `x` over mask-true entries; 0 when the mask is empty.
    pub fn masked_mean(&mut self, x: NodeId, mask: &[bool]) -> NodeId {
        let n = self.nodes[x.0].data.len();
        assert_eq!(mask.len(), n, "mask length mismatch");
        let count = mask.iter().filter(|m| **m).count();
        let v = if count == 0 {
            0.0
        } else {
            self.nodes[x.0]
                .data
                .iter()
                .zip(mask)
                .filter(|(_, m)| **m)
                .map(|(v, _)| *v)
                .sum::<f64>()
                / count as f64
        };
        let rg = self.needs(x);
        self.push(Op::MaskedMean { x, mask: mask.to_vec(), count }, vec![v], SCALAR, rg)
    }

    /// Elementwise sum of any number of same-shape nodes.
    pub fn sum_n(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "sum_n needs at least one node");
        let shape = self.nodes[xs[0].0].shape;
        let mut data = vec![0.0; numel(&shape)];
        for x in xs {
            assert_eq!(self.nodes[x.0].shape, shape, "sum_n shapes differ");
            for (o, v) in data.iter_mut().zip(&self.nodes[x.0].data) {
                *o += v;
            }
        }
        let rg = xs.iter().any(|x| self.needs(*x));
        self.push(Op::SumN(xs.to_vec()), data, shape, rg)
    }

    /// Forward differences along x: `[1, 1, h, w]` -> `[1, 1, h, w-1]`.
    pub fn diff_x(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].shape;
        assert_eq!(s[1], 1, "diff_x expects a single-channel map");
        let (h, w) = (s[2], s[3]);
        let mut data = vec![0.0; h * (w - 1)];
        for y in 0..h {
            for xx in 0..w - 1 {
                data[y * (w - 1) + xx] =
                    self.nodes[x.0].data[y * w + xx + 1] - self.nodes[x.0].data[y * w + xx];
            }
        }
        let rg = self.needs(x);
        self.push(Op::DiffX(x), data, [1, 1, h, w - 1], rg)
    }

    /// Forward differences along y: `[1, 1, h, w]` -> `[1, 1, h-1, w]`.
    pub fn diff_y(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].shape;
        assert_eq!(s[1], 1, "diff_y expects a single-channel map");
        let (h, w) = (s[2], s[3]);
        let mut data = vec![0.0; (h - 1) * w];
        for y in 0..h - 1 {
            for xx in 0..w {
                data[y * w + xx] =
                    self.nodes[x.0].data[(y + 1) * w + xx] - self.nodes[x.0].data[y * w + xx];
            }
        }
        let rg = self.needs(x);
        self.push(Op::DiffY(x), data, [1, 1, h - 1, w], rg)
    }

    /// Map times scalar node, broadcast.
    pub fn mul_s(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.nodes[s.0].shape, SCALAR, "mul_s scale must be scalar");
        let sv = self.nodes[s.0].data[0];
        let data = self.nodes[x.0].data.iter().map(|v| v * sv).collect();
        let shape = self.nodes[x.0].shape;
        let rg = self.needs(x) || self.needs(s);
        self.push(Op::MulS { x, s }, data, shape, rg)
    }

    /// Map divided by scalar node, broadcast.
    pub fn div_s(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.nodes[s.0].shape, SCALAR, "div_s scale must be scalar");
        let sv = self.nodes[s.0].data[0];
        let data = self.nodes[x.0].data.iter().map(|v| v / sv).collect();
        let shape = self.nodes[x.0].shape;
        let rg = self.needs(x) || self.needs(s);
        self.push(Op::DivS { x, s }, data, shape, rg)
    }

    /// Reverse-mode gradients of a scalar root w.r.t. every node that
    /// requires them.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, TapeError> {
        if root.0 >= self.nodes.len() || self.nodes[root.0].shape != SCALAR {
            return Err(TapeError::GraphNotRecorded { id: root.0, len: self.nodes.len() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.push_adjoints(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        id: NodeId,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[id.0].data.len()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn push_adjoints(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        if !self.nodes[i].requires_grad {
            return;
        }
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                self.accumulate(grads, *a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * db[k];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for k in 0..g.len() {
                        gb[k] += g[k] * da[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                self.accumulate(grads, *a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] / db[k];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for k in 0..g.len() {
                        gb[k] -= g[k] * da[k] / (db[k] * db[k]);
                    }
                });
            }
            Op::AddC(x) => {
                self.accumulate(grads, *x, |gx| {
                    for (o, y) in gx.iter_mut().zip(g) {
                        *o += y;
                    }
                });
            }
            Op::MulC(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, |gx| {
                    for (o, y) in gx.iter_mut().zip(g) {
                        *o += y * c;
                    }
                });
            }
            Op::Tanh(x) => {
                let out = &node.data;
                self.accumulate(grads, *x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * (1.0 - out[k] * out[k]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let out = &node.data;
                self.accumulate(grads, *x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * out[k] * (1.0 - out[k]);
                    }
                });
            }
            Op::Abs(x) => {
                let input = &self.nodes[x.0].data;
                self.accumulate(grads, *x, |gx| {
                    for k in 0..g.len() {
                        // Subgradient 0 at the kink.
                        let s = if input[k] > 0.0 {
                            1.0
                        } else if input[k] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gx[k] += g[k] * s;
                    }
                });
            }
            Op::Sqrt(x) => {
                let out = &node.data;
                self.accumulate(grads, *x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * 0.5 / out[k];
                    }
                });
            }
            Op::Exp(x) => {
                let out = &node.data;
                self.accumulate(grads, *x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * out[k];
                    }
                });
            }
            Op::Sin(x) => {
                let input = &self.nodes[x.0].data;
                self.accumulate(grads, *x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * input[k].cos();
                    }
                });
            }
            Op::Cos(x) => {
                let input = &self.nodes[x.0].data;
                self.accumulate(grads, *x, |gx| {
                    for k in 0..g.len() {
                        gx[k] -= g[k] * input[k].sin();
                    }
                });
            }
            Op::Recip(x) => {
                let out = &node.data;
                self.accumulate(grads, *x, |gx| {
                    for k in 0..g.len() {
                        gx[k] -= g[k] * out[k] * out[k];
                    }
                });
            }
            Op::ClampMin(x, c) => {
                let input = &self.nodes[x.0].data;
                let c = *c;
                self.accumulate(grads, *x, |gx| {
                    for k in 0..g.len() {
                        if input[k] > c {
                            gx[k] += g[k];
                        }
                    }
                });
            }
            Op::Conv2d { input, weights, bias, stride } => {
                let si = self.nodes[input.0].shape;
                let sw = self.nodes[weights.0].shape;
                let (cin, h, w) = (si[1], si[2], si[3]);
                let cout = sw[0];
                let oh = kernels::conv3x3_out_dim(h, *stride);
                let ow = kernels::conv3x3_out_dim(w, *stride);
                let in_data = &self.nodes[input.0].data;
                let w_data = &self.nodes[weights.0].data;
                // Mirror the forward loop, scattering into each operand.
                self.accumulate(grads, *bias, |gb| {
                    for co in 0..cout {
                        for p in 0..oh * ow {
                            gb[co] += g[co * oh * ow + p];
                        }
                    }
                });
                self.accumulate(grads, *weights, |gw| {
                    for co in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g[co * oh * ow + oy * ow + ox];
                                let iy0 = (oy * stride) as i64 - 1;
                                let ix0 = (ox * stride) as i64 - 1;
                                for ci in 0..cin {
                                    for ky in 0..3i64 {
                                        let yy = iy0 + ky;
                                        if yy < 0 || yy >= h as i64 {
                                            continue;
                                        }
                                        for kx in 0..3i64 {
                                            let xx = ix0 + kx;
                                            if xx < 0 || xx >= w as i64 {
                                                continue;
                                            }
                                            gw[(co * cin + ci) * 9 + (ky * 3 + kx) as usize] +=
                                                in_data
                                                    [ci * h * w + yy as usize * w + xx as usize]
                                                    * go;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *input, |gi| {
                    for co in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g[co * oh * ow + oy * ow + ox];
                                let iy0 = (oy * stride) as i64 - 1;
                                let ix0 = (ox * stride) as i64 - 1;
                                for ci in 0..cin {
                                    for ky in 0..3i64 {
                                        let yy = iy0 + ky;
                                        if yy < 0 || yy >= h as i64 {
                                            continue;
                                        }
                                        for kx in 0..3i64 {
                                            let xx = ix0 + kx;
                                            if xx < 0 || xx >= w as i64 {
                                                continue;
                                            }
                                            gi[ci * h * w + yy as usize * w + xx as usize] +=
                                                w_data[(co * cin + ci) * 9
                                                    + (ky * 3 + kx) as usize]
                                                    * go;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Upsample2x(x) => {
                let s = self.nodes[x.0].shape;
                let (c, h, w) = (s[1], s[2], s[3]);
                let (oh, ow) = (h * 2, w * 2);
                self.accumulate(grads, *x, |gx| {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                gx[ch * h * w + (y / 2) * w + xx / 2] +=
                                    g[ch * oh * ow + y * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::BoxFilter3(x) => {
                let s = node.shape;
                let adj = kernels::box3_mean_adjoint(g, s[2], s[3]);
                self.accumulate(grads, *x, |gx| {
                    for (o, v) in gx.iter_mut().zip(&adj) {
                        *o += v;
                    }
                });
            }
            Op::MeanChw(x) => {
                let s = self.nodes[x.0].shape;
                let hw = s[2] * s[3];
                self.accumulate(grads, *x, |gx| {
                    for ch in 0..s[1] {
                        let gv = g[ch] / hw as f64;
                        for p in 0..hw {
                            gx[ch * hw + p] += gv;
                        }
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].data.len();
                self.accumulate(grads, *x, |gx| {
                    let gv = g[0] / n as f64;
                    for o in gx.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::Linear { input, weights, bias } => {
                let sw = self.nodes[weights.0].shape;
                let (m, n) = (sw[2], sw[3]);
                let in_data = &self.nodes[input.0].data;
                let w_data = &self.nodes[weights.0].data;
                self.accumulate(grads, *bias, |gb| {
                    for j in 0..m {
                        gb[j] += g[j];
                    }
                });
                self.accumulate(grads, *weights, |gw| {
                    for j in 0..m {
                        for k in 0..n {
                            gw[j * n + k] += g[j] * in_data[k];
                        }
                    }
                });
                self.accumulate(grads, *input, |gi| {
                    for j in 0..m {
                        for k in 0..n {
                            gi[k] += g[j] * w_data[j * n + k];
                        }
                    }
                });
            }
            Op::Index(x, idx) => {
                let idx = *idx;
                self.accumulate(grads, *x, |gx| {
                    gx[idx] += g[0];
                });
            }
            Op::LinComb3 { maps, coeffs, offset } => {
                let cv: [f64; 3] = [
                    self.nodes[coeffs[0].0].data[0],
                    self.nodes[coeffs[1].0].data[0],
                    self.nodes[coeffs[2].0].data[0],
                ];
                for k in 0..3 {
                    self.accumulate(grads, maps[k], |gm| {
                        for (o, y) in gm.iter_mut().zip(g) {
                            *o += cv[k] * y;
                        }
                    });
                    let map = &self.nodes[maps[k].0].data;
                    self.accumulate(grads, coeffs[k], |gc| {
                        gc[0] += map.iter().zip(g).map(|(m, y)| m * y).sum::<f64>();
                    });
                }
                self.accumulate(grads, *offset, |go| {
                    go[0] += g.iter().sum::<f64>();
                });
            }
            Op::SampleBilinear { image, height, width, u, v, valid } => {
                let (h, w) = (*height, *width);
                let ud = &self.nodes[u.0].data;
                let vd = &self.nodes[v.0].data;
                let partials = |p: usize| -> (f64, f64) {
                    let uu = kernels::snap_to_grid(ud[p]).clamp(0.0, (w - 1) as f64);
                    let vv = kernels::snap_to_grid(vd[p]).clamp(0.0, (h - 1) as f64);
                    let (x0, x1, y0, y1, fx, fy) = kernels::bilinear_cell(uu, vv, h, w);
                    let du = (1.0 - fy) * (image[y0 * w + x1] - image[y0 * w + x0])
                        + fy * (image[y1 * w + x1] - image[y1 * w + x0]);
                    let dv = (1.0 - fx) * (image[y1 * w + x0] - image[y0 * w + x0])
                        + fx * (image[y1 * w + x1] - image[y0 * w + x1]);
                    (du, dv)
                };
                self.accumulate(grads, *u, |gu| {
                    for p in 0..g.len() {
                        if valid[p] {
                            gu[p] += g[p] * partials(p).0;
                        }
                    }
                });
                self.accumulate(grads, *v, |gv| {
                    for p in 0..g.len() {
                        if valid[p] {
                            gv[p] += g[p] * partials(p).1;
                        }
                    }
                });
            }
            Op::MinSelect { a, b, choice } => {
                self.accumulate(grads, *a, |ga| {
                    for p in 0..g.len() {
                        if choice[p] == 0 {
                            ga[p] += g[p];
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for p in 0..g.len() {
                        if choice[p] == 1 {
                            gb[p] += g[p];
                        }
                    }
                });
            }
            Op::MaskedMean { x, mask, count } => {
                if *count == 0 {
                    return;
                }
                let gv = g[0] / *count as f64;
                self.accumulate(grads, *x, |gx| {
                    for (o, m) in gx.iter_mut().zip(mask) {
                        if *m {
                            *o += gv;
                        }
                    }
                });
            }
            Op::SumN(xs) => {
                for x in xs {
                    self.accumulate(grads, *x, |gx| {
                        for (o, y) in gx.iter_mut().zip(g) {
                            *o += y;
                        }
                    });
                }
            }
            Op::DiffX(x) => {
                let s = self.nodes[x.0].shape;
                let (h, w) = (s[2], s[3]);
                self.accumulate(grads, *x, |gx| {
                    for y in 0..h {
                        for xx in 0..w - 1 {
                            let gv = g[y * (w - 1) + xx];
                            gx[y * w + xx + 1] += gv;
                            gx[y * w + xx] -= gv;
                        }
                    }
                });
            }
            Op::DiffY(x) => {
                let s = self.nodes[x.0].shape;
                let (h, w) = (s[2], s[3]);
                self.accumulate(grads, *x, |gx| {
                    for y in 0..h - 1 {
                        for xx in 0..w {
                            let gv = g[y * w + xx];
                            gx[(y + 1) * w + xx] += gv;
                            gx[y * w + xx] -= gv;
                        }
                    }
                });
            }
            Op::MulS { x, s } => {
                let sv = self.nodes[s.0].data[0];
                let xd = &self.nodes[x.0].data;
                self.accumulate(grads, *x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * sv;
                    }
                });
                self.accumulate(grads, *s, |gs| {
                    gs[0] += xd.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                });
            }
            Op::DivS { x, s } => {
                let sv = self.nodes[s.0].data[0];
                let xd = &self.nodes[x.0].data;
                self.accumulate(grads, *x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] / sv;
                    }
                });
                self.accumulate(grads, *s, |gs| {
                    gs[0] -=
                        xd.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / (sv * sv);
                });
            }
            Op::Norm3 { x, y, z, zero_sign } => {
                let n = node.data[0];
                let gs = g[0];
                let vx = self.nodes[x.0].data[0];
                let vy = self.nodes[y.0].data[0];
                let vz = self.nodes[z.0].data[0];
                if vx == 0.0 && vy == 0.0 && vz == 0.0 {
                    // Zero-point subgradient along the caller's canonical
                    // direction; without it the zero vector is a stationary
                    // point and magnitude supervision can never move it.
                    self.accumulate(grads, *z, |gz| gz[0] += gs * zero_sign);
                } else {
                    self.accumulate(grads, *x, |gx| gx[0] += gs * vx / n);
                    self.accumulate(grads, *y, |gy| gy[0] += gs * vy / n);
                    self.accumulate(grads, *z, |gz| gz[0] += gs * vz / n);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Central finite differences of a scalar function over a flat parameter
    /// vector; the independent oracle for every adjoint in this module.
    fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let dn = f(&xp);
            xp[i] = x[i];
            g[i] = (up - dn) / (2.0 * h);
        }
        g
    }

    fn assert_close(ad: &[f64], fd: &[f64], tol: f64, what: &str) {
        assert_eq!(ad.len(), fd.len());
        for i in 0..ad.len() {
            let denom = ad[i].abs().max(fd[i].abs()).max(1e-3);
            let rel = (ad[i] - fd[i]).abs() / denom;
            assert!(
                rel < tol,
                "{what}: grad[{i}] ad={} fd={} rel={rel}",
                ad[i],
                fd[i]
            );
        }
    }

    fn random_vec(n: usize, lo: f64, hi: f64, tag: &str) -> Vec<f64> {
        let mut rng = crate::rng::stream(1234, tag);
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    #[test]
    fn scalar_chain_matches_analytic_gradient() {
        // z = (x*y + sin(x))^2; dz/dx = 2(xy + sin x)(y + cos x),
        // dz/dy = 2(xy + sin x) x.
        let (x, y) = (0.7, -1.3);
        let mut t = Tape::new();
        let xn = t.leaf(vec![x], SCALAR);
        let yn = t.leaf(vec![y], SCALAR);
        let xy = t.mul(xn, yn);
        let sx = t.sin(xn);
        let s = t.add(xy, sx);
        let z = t.mul(s, s);
        let g = t.backward(z).unwrap();
        let base = x * y + x.sin();
        let dx = 2.0 * base * (y + x.cos());
        let dy = 2.0 * base * x;
        assert!((g.get(xn).unwrap()[0] - dx).abs() < 1e-12);
        assert!((g.get(yn).unwrap()[0] - dy).abs() < 1e-12);
    }

    #[test]
    fn norm3_matches_finite_differences_away_from_zero() {
        let v = [0.4, -1.1, 0.7];
        let f = |p: &[f64]| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2] + 1e-24).sqrt();
        let fd = fd_gradient(f, &v, 1e-6);
        let mut t = Tape::new();
        let x = t.leaf(vec![v[0]], SCALAR);
        let y = t.leaf(vec![v[1]], SCALAR);
        let z = t.leaf(vec![v[2]], SCALAR);
        let n = t.norm3(x, y, z, 1e-24, 1.0);
        assert!((t.scalar_value(n) - f(&v)).abs() < 1e-12);
        let g = t.backward(n).unwrap();
        let ad = [g.get(x).unwrap()[0], g.get(y).unwrap()[0], g.get(z).unwrap()[0]];
        assert_close(&ad, &fd, 1e-7, "norm3");
    }

    #[test]
    fn norm3_zero_point_subgradient_follows_the_requested_sign() {
        for sign in [1.0, -1.0] {
            let mut t = Tape::new();
            let x = t.leaf(vec![0.0], SCALAR);
            let y = t.leaf(vec![0.0], SCALAR);
            let z = t.leaf(vec![0.0], SCALAR);
            let n = t.norm3(x, y, z, 1e-24, sign);
            let g = t.backward(n).unwrap();
            // x and y get no contribution at the zero point at all.
            assert_eq!(g.get(x).map(|v| v[0]).unwrap_or(0.0), 0.0);
            assert_eq!(g.get(y).map(|v| v[0]).unwrap_or(0.0), 0.0);
            assert_eq!(g.get(z).unwrap()[0], sign);
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x0 = random_vec(12, 0.2, 1.5, "tape:elem");
        let f = |p: &[f64]| {
            let mut t = Tape::new();
            let x = t.leaf(p.to_vec(), [1, 1, 3, 4]);
            let a = t.tanh(x);
            let b = t.sigmoid(x);
            let c = t.mul(a, b);
            let d = t.sqrt(x);
            let e = t.add(c, d);
            let r = t.recip(x);
            let f1 = t.sub(e, r);
            let ex = t.exp(f1);
            let co = t.cos(x);
            let prod = t.mul(ex, co);
            let shifted = t.add_c(prod, 0.3);
            let scaled = t.mul_c(shifted, 0.7);
            let loss = t.mean_all(scaled);
            t.scalar_value(loss)
        };
        let mut t = Tape::new();
        let x = t.leaf(x0.clone(), [1, 1, 3, 4]);
        let a = t.tanh(x);
        let b = t.sigmoid(x);
        let c = t.mul(a, b);
        let d = t.sqrt(x);
        let e = t.add(c, d);
        let r = t.recip(x);
        let f1 = t.sub(e, r);
        let ex = t.exp(f1);
        let co = t.cos(x);
        let prod = t.mul(ex, co);
        let shifted = t.add_c(prod, 0.3);
        let scaled = t.mul_c(shifted, 0.7);
        let loss = t.mean_all(scaled);
        let g = t.backward(loss).unwrap();
        let fd = fd_gradient(f, &x0, 1e-6);
        assert_close(g.get(x).unwrap(), &fd, 1e-6, "elementwise chain");
    }

    #[test]
    fn div_abs_clamp_match_finite_differences() {
        // Values kept away from the abs/clamp kinks.
        let x0 = random_vec(8, 0.5, 2.0, "tape:div");
        let y0 = random_vec(8, 1.0, 3.0, "tape:div-y");
        let f = |p: &[f64]| {
            let mut t = Tape::new();
            let x = t.leaf(p.to_vec(), [1, 1, 2, 4]);
            let y = t.constant(y0.clone(), [1, 1, 2, 4]);
            let q = t.div(x, y);
            let shifted = t.add_c(q, -0.4);
            let a = t.abs(shifted);
            let cl = t.clamp_min(a, 0.05);
            let loss = t.mean_all(cl);
            t.scalar_value(loss)
        };
        let mut t = Tape::new();
        let x = t.leaf(x0.clone(), [1, 1, 2, 4]);
        let y = t.constant(y0.clone(), [1, 1, 2, 4]);
        let q = t.div(x, y);
        let shifted = t.add_c(q, -0.4);
        let a = t.abs(shifted);
        let cl = t.clamp_min(a, 0.05);
        let loss = t.mean_all(cl);
        let g = t.backward(loss).unwrap();
        let fd = fd_gradient(f, &x0, 1e-6);
        assert_close(g.get(x).unwrap(), &fd, 1e-5, "div/abs/clamp");
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let (cin, cout, h, w) = (2, 3, 6, 8);
        let input0 = random_vec(cin * h * w, -1.0, 1.0, "tape:conv-in");
        let weights0 = random_vec(cout * cin * 9, -0.5, 0.5, "tape:conv-w");
        let bias0 = random_vec(cout, -0.2, 0.2, "tape:conv-b");
        for stride in [1usize, 2] {
            // One packed parameter vector: input, weights, bias.
            let run = |p: &[f64]| -> (f64, Option<(Vec<f64>, Vec<f64>, Vec<f64>)>) {
                let (i_end, w_end) = (input0.len(), input0.len() + weights0.len());
                let mut t = Tape::new();
                let i = t.leaf(p[..i_end].to_vec(), [1, cin, h, w]);
                let wn = t.leaf(p[i_end..w_end].to_vec(), [cout, cin, 3, 3]);
                let b = t.leaf(p[w_end..].to_vec(), [1, 1, 1, cout]);
                let c = t.conv2d(i, wn, b, stride);
                let sq = t.mul(c, c);
                let loss = t.mean_all(sq);
                let v = t.scalar_value(loss);
                let g = t.backward(loss).unwrap();
                (
                    v,
                    Some((
                        g.get(i).unwrap().to_vec(),
                        g.get(wn).unwrap().to_vec(),
                        g.get(b).unwrap().to_vec(),
                    )),
                )
            };
            let mut packed = input0.clone();
            packed.extend_from_slice(&weights0);
            packed.extend_from_slice(&bias0);
            let (_, grads) = run(&packed);
            let (gi, gw, gb) = grads.unwrap();
            let mut ad = gi;
            ad.extend(gw);
            ad.extend(gb);
            let fd = fd_gradient(|p| run(p).0, &packed, 1e-6);
            assert_close(&ad, &fd, 1e-5, "conv2d");
        }
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let (h, w) = (4, 6);
        let x0 = random_vec(h * w, 0.3, 2.0, "tape:struct");
        let f = |p: &[f64]| {
            let mut t = Tape::new();
            let x = t.leaf(p.to_vec(), [1, 1, h, w]);
            let up = t.upsample2x(x);
            let bf = t.box_filter3(up);
            let m1 = t.mean_all(bf);
            let dx = t.diff_x(x);
            let adx = t.mul(dx, dx);
            let m2 = t.mean_all(adx);
            let dy = t.diff_y(x);
            let ady = t.mul(dy, dy);
            let m3 = t.mean_all(ady);
            let mean = t.mean_all(x);
            let norm = t.div_s(x, mean);
            let m4 = t.mean_all(norm);
            let scaled = t.mul_s(x, m1);
            let m5 = t.mean_all(scaled);
            let s1 = t.add(m1, m2);
            let s2 = t.add(m3, m4);
            let s3 = t.add(s1, s2);
            let loss = t.add(s3, m5);
            t.scalar_value(loss)
        };
        let mut t = Tape::new();
        let x = t.leaf(x0.clone(), [1, 1, h, w]);
        let up = t.upsample2x(x);
        let bf = t.box_filter3(up);
        let m1 = t.mean_all(bf);
        let dx = t.diff_x(x);
        let adx = t.mul(dx, dx);
        let m2 = t.mean_all(adx);
        let dy = t.diff_y(x);
        let ady = t.mul(dy, dy);
        let m3 = t.mean_all(ady);
        let mean = t.mean_all(x);
        let norm = t.div_s(x, mean);
        let m4 = t.mean_all(norm);
        let scaled = t.mul_s(x, m1);
        let m5 = t.mean_all(scaled);
        let s1 = t.add(m1, m2);
        let s2 = t.add(m3, m4);
        let s3 = t.add(s1, s2);
        let loss = t.add(s3, m5);
        let g = t.backward(loss).unwrap();
        let fd = fd_gradient(f, &x0, 1e-6);
        assert_close(g.get(x).unwrap(), &fd, 1e-5, "structural ops");
    }

    #[test]
    fn linear_index_lincomb_match_finite_differences() {
        let n = 5;
        let x0 = random_vec(n, -1.0, 1.0, "tape:lin-x");
        let w0 = random_vec(3 * n, -1.0, 1.0, "tape:lin-w");
        let b0 = random_vec(3, -0.5, 0.5, "tape:lin-b");
        let maps0 = random_vec(3 * 8, -1.0, 1.0, "tape:lin-maps");
        let run = |p: &[f64]| -> (f64, Vec<f64>) {
            let mut t = Tape::new();
            let x = t.leaf(p[..n].to_vec(), [1, 1, 1, n]);
            let wn = t.leaf(p[n..n + 3 * n].to_vec(), [1, 1, 3, n]);
            let b = t.leaf(p[n + 3 * n..].to_vec(), [1, 1, 1, 3]);
            let out = t.linear(x, wn, b);
            let c0 = t.index(out, 0);
            let c1 = t.index(out, 1);
            let c2 = t.index(out, 2);
            let m0 = t.constant(maps0[..8].to_vec(), [1, 1, 2, 4]);
            let m1 = t.constant(maps0[8..16].to_vec(), [1, 1, 2, 4]);
            let m2 = t.constant(maps0[16..].to_vec(), [1, 1, 2, 4]);
            let comb = t.lin_comb3([m0, m1, m2], [c0, c1, c2], c1);
            let sq = t.mul(comb, comb);
            let loss = t.mean_all(sq);
            let v = t.scalar_value(loss);
            let g = t.backward(loss).unwrap();
            let mut ad = g.dense(x, n);
            ad.extend(g.dense(wn, 3 * n));
            ad.extend(g.dense(b, 3));
            (v, ad)
        };
        let mut packed = x0;
        packed.extend(w0);
        packed.extend(b0);
        let (_, ad) = run(&packed);
        let fd = fd_gradient(|p| run(p).0, &packed, 1e-6);
        assert_close(&ad, &fd, 1e-5, "linear/index/lincomb");
    }

    #[test]
    fn sample_bilinear_matches_finite_differences() {
        let (h, w) = (5, 7);
        let image = random_vec(h * w, 0.0, 1.0, "tape:samp-img");
        // Coordinates strictly inside cells, away from integer kinks.
        let mut rng = crate::rng::stream(5, "tape:samp-uv");
        let u0: Vec<f64> = (0..h * w)
            .map(|_| rng.random_range(0.0..(w - 1) as f64).floor() + rng.random_range(0.2..0.8))
            .collect();
        let v0: Vec<f64> = (0..h * w)
            .map(|_| rng.random_range(0.0..(h - 1) as f64).floor() + rng.random_range(0.2..0.8))
            .collect();
        let premask = vec![true; h * w];
        let run = |p: &[f64]| -> (f64, Vec<f64>) {
            let mut t = Tape::new();
            let u = t.leaf(p[..h * w].to_vec(), [1, 1, h, w]);
            let v = t.leaf(p[h * w..].to_vec(), [1, 1, h, w]);
            let (s, valid) = t.sample_bilinear(&image, h, w, u, v, &premask);
            assert!(valid.iter().all(|b| *b));
            let sq = t.mul(s, s);
            let loss = t.mean_all(sq);
            let val = t.scalar_value(loss);
            let g = t.backward(loss).unwrap();
            let mut ad = g.dense(u, h * w);
            ad.extend(g.dense(v, h * w));
            (val, ad)
        };
        let mut packed = u0;
        packed.extend(v0);
        let (_, ad) = run(&packed);
        let fd = fd_gradient(|p| run(p).0, &packed, 1e-6);
        assert_close(&ad, &fd, 1e-5, "sample_bilinear");
    }

    #[test]
    fn sample_bilinear_masks_out_of_range_coordinates() {
        let image = vec![0.5; 9];
        let mut t = Tape::new();
        let u = t.leaf(vec![-2.0, 1.0, 5.0, 1.0], [1, 1, 2, 2]);
        let v = t.leaf(vec![1.0, 1.0, 1.0, 1.0], [1, 1, 2, 2]);
        let premask = [true, true, true, false];
        let (s, valid) = t.sample_bilinear(&image, 3, 3, u, v, &premask);
        assert_eq!(valid, vec![false, true, false, false]);
        assert_eq!(t.value(s), &[0.0, 0.5, 0.0, 0.0]);
        let sq = t.mul(s, s);
        let loss = t.mean_all(sq);
        let g = t.backward(loss).unwrap();
        // Invalid pixels contribute no gradient.
        let gu = g.get(u).unwrap();
        assert_eq!(gu[0], 0.0);
        assert_eq!(gu[2], 0.0);
        assert_eq!(gu[3], 0.0);
    }

    #[test]
    fn min_select_routes_gradient_to_winner() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 5.0, 3.0, 3.0], [1, 1, 2, 2]);
        let b = t.leaf(vec![2.0, 4.0, 3.0, 9.0], [1, 1, 2, 2]);
        let valid = [true, true, true, true];
        let bad = [true, true, true, false];
        let (m, choice) = t.min_select(a, b, &valid, &bad);
        // Ties pick the first map; pixel 3 has only `a` valid.
        assert_eq!(choice, vec![0, 1, 0, 0]);
        assert_eq!(t.value(m), &[1.0, 4.0, 3.0, 3.0]);
        let loss = t.mean_all(m);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap(), &[0.25, 0.0, 0.25, 0.25]);
        assert_eq!(g.get(b).unwrap(), &[0.0, 0.25, 0.0, 0.0]);
    }

    #[test]
    fn min_select_dead_pixels_output_zero() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0], [1, 1, 1, 2]);
        let b = t.leaf(vec![3.0, 4.0], [1, 1, 1, 2]);
        let none = [false, false];
        let (m, choice) = t.min_select(a, b, &none, &none);
        assert_eq!(choice, vec![2, 2]);
        assert_eq!(t.value(m), &[0.0, 0.0]);
    }

    #[test]
    fn masked_mean_and_empty_mask() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0], [1, 1, 2, 2]);
        let m = t.masked_mean(x, &[true, false, true, false]);
        assert_eq!(t.scalar_value(m), 2.0);
        let g = t.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.5, 0.0, 0.5, 0.0]);

        let mut t2 = Tape::new();
        let x2 = t2.leaf(vec![1.0, 2.0], [1, 1, 1, 2]);
        let m2 = t2.masked_mean(x2, &[false, false]);
        assert_eq!(t2.scalar_value(m2), 0.0);
        let g2 = t2.backward(m2).unwrap();
        assert!(g2.get(x2).is_none());
    }

    #[test]
    fn sum_n_accumulates_all_terms() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0], SCALAR);
        let b = t.leaf(vec![2.0], SCALAR);
        let c = t.leaf(vec![3.0], SCALAR);
        let s = t.sum_n(&[a, b, c]);
        assert_eq!(t.scalar_value(s), 6.0);
        let g = t.backward(s).unwrap();
        for id in [a, b, c] {
            assert_eq!(g.get(id).unwrap(), &[1.0]);
        }
    }

    #[test]
    fn unused_parameter_gets_no_gradient() {
        let mut t = Tape::new();
        let used = t.leaf(vec![2.0], SCALAR);
        let unused = t.leaf(vec![5.0], SCALAR);
        let loss = t.mul(used, used);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(used).unwrap(), &[4.0]);
        assert!(g.get(unused).is_none());
        assert_eq!(g.dense(unused, 1), vec![0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.5], SCALAR);
        let c = t.scalar_const(3.0);
        let y = t.mul(x, c);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn backward_rejects_invalid_roots() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], [1, 1, 1, 2]);
        assert!(matches!(
            t.backward(x),
            Err(TapeError::GraphNotRecorded { .. })
        ));
        let stale = NodeId(99);
        assert!(matches!(
            t.backward(stale),
            Err(TapeError::GraphNotRecorded { id: 99, .. })
        ));
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut t = Tape::new();
            let x = t.leaf(random_vec(24, -1.0, 1.0, "tape:det"), [1, 1, 4, 6]);
            let a = t.tanh(x);
            let b = t.box_filter3(a);
            let c = t.mul(b, b);
            let loss = t.mean_all(c);
            let g = t.backward(loss).unwrap();
            g.get(x).unwrap().to_vec()
        };
        assert_eq!(build(), build());
    }
}
