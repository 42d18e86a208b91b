//! Loop-closure detection and pose-graph optimization.
//!
//! Every frame is summarized by a handcrafted global descriptor (a coarse
//! intensity grid plus a gradient-orientation histogram) stored in an
//! append-only memory. Revisits are detected by cosine similarity against
//! that memory, subject to a temporal gap that rules out trivial matches
//! with the immediate past. Odometry and loop constraints accumulate in an
//! SE(3) pose graph that Levenberg-Marquardt relaxes around an anchored
//! first node, and the optimized path can be fused with depth maps into a
//! world-frame point cloud.

use crate::geometry::{
    compose, inverse, relative, se3_exp, se3_log, unproject_pixel, CameraIntrinsics,
    GeometryError, Pose3, Trajectory, Twist,
};
use crate::photometric::{DepthMap, Image};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;
// Needed for float math in no_std builds; std builds resolve these
// methods inherently and then see this import as unused.
#[allow(unused_imports)]
use num_traits::Float;
use thiserror::Error;

/// Side length of the downsampled intensity grid.
pub const DESCRIPTOR_GRID: usize = 8;
/// Number of gradient-orientation bins.
pub const DESCRIPTOR_BINS: usize = 8;
/// Total descriptor length.
pub const DESCRIPTOR_LEN: usize = DESCRIPTOR_GRID * DESCRIPTOR_GRID + DESCRIPTOR_BINS;
/// Cosine similarity a loop candidate must exceed.
pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.95;
/// Frames a loop candidate must lie in the past.
pub const DEFAULT_MIN_GAP: usize = 50;
/// Initial Levenberg-Marquardt damping.
pub const LM_INITIAL_LAMBDA: f64 = 1e-4;
/// Damping beyond which the solver gives up.
pub const LM_LAMBDA_CAP: f64 = 1e8;
/// Information weight on odometry edges.
pub const ODOMETRY_INFORMATION_SCALE: f64 = 1.0;
/// Information weight on loop edges; loops anchor drift, so they are
/// trusted more than individual odometry steps.
pub const LOOP_INFORMATION_SCALE: f64 = 10.0;

/// Gradient magnitude below which max|grad chi2| counts as stationary.
const LM_GRADIENT_FLOOR: f64 = 1e-12;
/// Step for the central-difference edge Jacobians.
const LM_JACOBIAN_STEP: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum BackendError {
    #[error("descriptor lengths differ: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("invalid input: {0}")]
    InvalidInput(&'static str),
    #[error("no graph node for frame {frame}")]
    UnknownNode { frame: usize },
    #[error("information matrix must be symmetric positive-definite")]
    InvalidInformation,
    #[error("pose graph is not connected")]
    NotConnected,
    #[error("damping exceeded its cap without reducing chi2")]
    SolverDiverged,
    #[error("expected {expected} depth maps, got {got}")]
    FrameMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// L2-normalized global image descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    values: Vec<f64>,
}

impl Descriptor {
    /// Wraps a precomputed feature vector, which must already be unit
    /// length within 1e-9.
    pub fn new(values: Vec<f64>) -> Result<Self, BackendError> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= 1e-9) {
            return Err(BackendError::InvalidInput("descriptor must be unit length"));
        }
        Ok(Descriptor { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Summarizes an image as an 8x8 mean-intensity grid concatenated with an
/// 8-bin gradient-orientation histogram (magnitude weighted), then
/// L2-normalizes the result.
pub fn describe(image: &Image) -> Descriptor {
    let (h, w) = image.dims();
    let mut values = Vec::with_capacity(DESCRIPTOR_LEN);
    for gy in 0..DESCRIPTOR_GRID {
        // Cell bounds round inward but always cover at least one pixel, so
        // images smaller than the grid still produce a full descriptor.
        let r0 = (gy * h / DESCRIPTOR_GRID).min(h - 1);
        let r1 = ((gy + 1) * h / DESCRIPTOR_GRID).max(r0 + 1);
        for gx in 0..DESCRIPTOR_GRID {
            let c0 = (gx * w / DESCRIPTOR_GRID).min(w - 1);
            let c1 = ((gx + 1) * w / DESCRIPTOR_GRID).max(c0 + 1);
            let mut sum = 0.0;
            for y in r0..r1 {
                for x in c0..c1 {
                    sum += image.at(y, x);
                }
            }
            values.push(sum / ((r1 - r0) * (c1 - c0)) as f64);
        }
    }
    let mut hist = [0.0; DESCRIPTOR_BINS];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let dx = (image.at(y, x + 1) - image.at(y, x - 1)) / 2.0;
            let dy = (image.at(y + 1, x) - image.at(y - 1, x)) / 2.0;
            let mag = dx.hypot(dy);
            if mag > 0.0 {
                let angle = dy.atan2(dx) + core::f64::consts::PI;
                let bin = (angle / (2.0 * core::f64::consts::PI) * DESCRIPTOR_BINS as f64)
                    as usize;
                hist[bin.min(DESCRIPTOR_BINS - 1)] += mag;
            }
        }
    }
    values.extend_from_slice(&hist);
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut values {
            *v /= norm;
        }
    } else {
        // All-black image: fall back to a uniform unit vector so the
        // normalization invariant holds and identical inputs still match.
        let uniform = 1.0 / (values.len() as f64).sqrt();
        for v in &mut values {
            *v = uniform;
        }
    }
    Descriptor { values }
}

/// Dot product of two unit vectors, clamped into [-1, 1].
pub fn cosine_similarity(a: &Descriptor, b: &Descriptor) -> Result<f64, BackendError> {
    if a.len() != b.len() {
        return Err(BackendError::LengthMismatch { a: a.len(), b: b.len() });
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// Append-only store of per-frame descriptors with strictly increasing
/// frame indices.
#[derive(Debug, Clone, Default)]
pub struct DescriptorMemory {
    entries: Vec<(usize, Descriptor)>,
}

impl DescriptorMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, frame_index: usize, descriptor: Descriptor) -> Result<(), BackendError> {
        if let Some((last, _)) = self.entries.last() {
            if frame_index <= *last {
                return Err(BackendError::InvalidInput("frame indices must strictly increase"));
            }
        }
        self.entries.push((frame_index, descriptor));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, Descriptor)] {
        &self.entries
    }
}

/// A stored frame whose descriptor clears the similarity threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopCandidate {
    pub frame_index: usize,
    pub similarity: f64,
}

/// Returns every stored frame older than `min_gap` frames whose similarity
/// to the current descriptor strictly exceeds `threshold`, most similar
/// first (ties by earlier frame).
pub fn detect_loops(
    current_index: usize,
    current: &Descriptor,
    memory: &DescriptorMemory,
    threshold: f64,
    min_gap: usize,
) -> Result<Vec<LoopCandidate>, BackendError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(BackendError::InvalidInput("threshold must lie in (0, 1]"));
    }
    let mut out = Vec::new();
    for (frame, descriptor) in &memory.entries {
        let old_enough = current_index.checked_sub(*frame).is_some_and(|d| d > min_gap);
        if !old_enough {
            continue;
        }
        let similarity = cosine_similarity(current, descriptor)?;
        if similarity > threshold {
            out.push(LoopCandidate { frame_index: *frame, similarity });
        }
    }
    out.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .expect("similarities are finite")
            .then(a.frame_index.cmp(&b.frame_index))
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Odometry,
    Loop,
}

/// Relative-pose constraint between two frames: the measurement is the pose
/// of frame `j` expressed in frame `i`, weighted by a 6x6 information
/// matrix over the [rotation, translation] twist residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub kind: EdgeKind,
    pub i: usize,
    pub j: usize,
    pub measurement: Pose3,
    pub information: [[f64; 6]; 6],
}

fn scaled_identity(scale: f64) -> [[f64; 6]; 6] {
    let mut m = [[0.0; 6]; 6];
    for (k, row) in m.iter_mut().enumerate() {
        row[k] = scale;
    }
    m
}

/// Pose graph over frames: nodes hold absolute pose estimates, edges hold
/// relative measurements. The first node is the gauge anchor and is never
/// moved by optimization.
#[derive(Debug, Clone, Default)]
pub struct PoseGraph {
    nodes: Vec<(usize, Pose3)>,
    edges: Vec<Edge>,
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, frame_index: usize, pose: Pose3) -> Result<(), BackendError> {
        if let Some((last, _)) = self.nodes.last() {
            if frame_index <= *last {
                return Err(BackendError::InvalidInput("node frame indices must increase"));
            }
        }
        self.nodes.push((frame_index, pose));
        Ok(())
    }

    pub fn add_odometry_edge(
        &mut self,
        i: usize,
        j: usize,
        measurement: Pose3,
    ) -> Result<(), BackendError> {
        self.add_edge(EdgeKind::Odometry, i, j, measurement, scaled_identity(ODOMETRY_INFORMATION_SCALE))
    }

    pub fn add_loop_edge(
        &mut self,
        i: usize,
        j: usize,
        measurement: Pose3,
    ) -> Result<(), BackendError> {
        self.add_edge(EdgeKind::Loop, i, j, measurement, scaled_identity(LOOP_INFORMATION_SCALE))
    }

    pub fn add_edge(
        &mut self,
        kind: EdgeKind,
        i: usize,
        j: usize,
        measurement: Pose3,
        information: [[f64; 6]; 6],
    ) -> Result<(), BackendError> {
        if i == j {
            return Err(BackendError::InvalidInput("edge endpoints must differ"));
        }
        for frame in [i, j] {
            if self.position(frame).is_none() {
                return Err(BackendError::UnknownNode { frame });
            }
        }
        for r in 0..6 {
            for c in 0..r {
                if (information[r][c] - information[c][r]).abs() > 1e-9 {
                    return Err(BackendError::InvalidInformation);
                }
            }
        }
        let mut chol = [0.0; 36];
        for r in 0..6 {
            for c in 0..6 {
                chol[r * 6 + c] = information[r][c];
            }
        }
        if !cholesky_in_place(&mut chol, 6) {
            return Err(BackendError::InvalidInformation);
        }
        self.edges.push(Edge { kind, i, j, measurement, information });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (usize, &Pose3)> {
        self.nodes.iter().map(|(frame, pose)| (*frame, pose))
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_pose(&self, frame_index: usize) -> Option<&Pose3> {
        self.position(frame_index).map(|pos| &self.nodes[pos].1)
    }

    /// Node list position of a frame index (nodes are sorted by frame).
    fn position(&self, frame_index: usize) -> Option<usize> {
        self.nodes.binary_search_by_key(&frame_index, |(frame, _)| *frame).ok()
    }

    fn is_connected(&self) -> bool {
        let n = self.nodes.len();
        if n <= 1 {
            return true;
        }
        let mut adjacency = vec![Vec::new(); n];
        for edge in &self.edges {
            let (a, b) = (self.position(edge.i).unwrap(), self.position(edge.j).unwrap());
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        let mut visited = 1;
        while let Some(at) = stack.pop() {
            for &next in &adjacency[at] {
                if !seen[next] {
                    seen[next] = true;
                    visited += 1;
                    stack.push(next);
                }
            }
        }
        visited == n
    }
}

/// What one optimization run did. `chi2_trace` starts at `chi2_before` and
/// appends the chi2 after every accepted step, so it never increases.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub chi2_before: f64,
    pub chi2_after: f64,
    pub iterations: usize,
    pub chi2_trace: Vec<f64>,
}

/// Twist residual of one edge: log(measurement^-1 * (node_i^-1 * node_j)).
fn edge_residual(measurement: &Pose3, pi: &Pose3, pj: &Pose3) -> Result<[f64; 6], BackendError> {
    let discrepancy = compose(&inverse(measurement), &relative(pi, pj));
    Ok(se3_log(&discrepancy)?.to_array())
}

fn weighted_chi2(residual: &[f64; 6], information: &[[f64; 6]; 6]) -> f64 {
    let mut total = 0.0;
    for r in 0..6 {
        for c in 0..6 {
            total += residual[r] * information[r][c] * residual[c];
        }
    }
    total
}

fn graph_chi2(nodes: &[(usize, Pose3)], edges: &[(usize, usize, &Edge)]) -> Result<f64, BackendError> {
    let mut total = 0.0;
    for (pi, pj, edge) in edges {
        let r = edge_residual(&edge.measurement, &nodes[*pi].1, &nodes[*pj].1)?;
        total += weighted_chi2(&r, &edge.information);
    }
    Ok(total)
}

/// Local right perturbation of a pose along one twist axis.
fn nudge(pose: &Pose3, axis: usize, step: f64) -> Pose3 {
    let mut xi = [0.0; 6];
    xi[axis] = step;
    compose(pose, &se3_exp(&Twist::from_array(xi)))
}

/// Central-difference Jacobian of an edge residual with respect to the
/// local increment of one endpoint.
fn edge_jacobian(
    measurement: &Pose3,
    pi: &Pose3,
    pj: &Pose3,
    wrt_i: bool,
) -> Result<[[f64; 6]; 6], BackendError> {
    let mut jac = [[0.0; 6]; 6];
    for axis in 0..6 {
        let (rp, rm) = if wrt_i {
            (
                edge_residual(measurement, &nudge(pi, axis, LM_JACOBIAN_STEP), pj)?,
                edge_residual(measurement, &nudge(pi, axis, -LM_JACOBIAN_STEP), pj)?,
            )
        } else {
            (
                edge_residual(measurement, pi, &nudge(pj, axis, LM_JACOBIAN_STEP))?,
                edge_residual(measurement, pi, &nudge(pj, axis, -LM_JACOBIAN_STEP))?,
            )
        };
        for row in 0..6 {
            jac[row][axis] = (rp[row] - rm[row]) / (2.0 * LM_JACOBIAN_STEP);
        }
    }
    Ok(jac)
}

/// In-place lower Cholesky factorization of a row-major n x n matrix.
/// Returns false when the matrix is not positive-definite.
fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    for k in 0..n {
        let mut diag = a[k * n + k];
        for p in 0..k {
            diag -= a[k * n + p] * a[k * n + p];
        }
        if !(diag > 0.0) {
            return false;
        }
        let diag = diag.sqrt();
        a[k * n + k] = diag;
        for r in k + 1..n {
            let mut v = a[r * n + k];
            for p in 0..k {
                v -= a[r * n + p] * a[k * n + p];
            }
            a[r * n + k] = v / diag;
        }
    }
    true
}

/// Solves A x = b for symmetric positive-definite A (row-major), returning
/// None when the factorization fails.
fn solve_spd(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = a.to_vec();
    if !cholesky_in_place(&mut l, n) {
        return None;
    }
    let mut x = b.to_vec();
    for r in 0..n {
        for c in 0..r {
            x[r] -= l[r * n + c] * x[c];
        }
        x[r] /= l[r * n + r];
    }
    for r in (0..n).rev() {
        for c in r + 1..n {
            x[r] -= l[c * n + r] * x[c];
        }
        x[r] /= l[r * n + r];
    }
    Some(x)
}

/// Relaxes all node poses except the anchored first node with
/// Levenberg-Marquardt on the weighted edge residuals. Damping starts at
/// `LM_INITIAL_LAMBDA`, grows tenfold on each rejected step, shrinks
/// tenfold on each accepted one, and `LM_LAMBDA_CAP` bounds it. Terminates
/// when an accepted step improves chi2 by less than `tol`, when the
/// gradient vanishes, or after `max_iterations`.
pub fn optimize_graph(
    graph: &mut PoseGraph,
    max_iterations: usize,
    tol: f64,
) -> Result<OptimizeReport, BackendError> {
    if !graph.is_connected() {
        return Err(BackendError::NotConnected);
    }
    // Resolve edge endpoints to node positions once.
    let edges: Vec<(usize, usize, &Edge)> = graph
        .edges
        .iter()
        .map(|e| (graph.position(e.i).unwrap(), graph.position(e.j).unwrap(), e))
        .collect();
    let mut nodes = graph.nodes.clone();
    let chi2_before = graph_chi2(&nodes, &edges)?;
    let mut chi2 = chi2_before;
    let mut trace = vec![chi2];
    let mut lambda = LM_INITIAL_LAMBDA;
    let mut iterations = 0;
    let free = nodes.len().saturating_sub(1);
    let dim = free * 6;

    'outer: for _ in 0..max_iterations {
        iterations += 1;
        // Normal equations over the free nodes (anchor excluded).
        let mut h = vec![0.0; dim * dim];
        let mut b = vec![0.0; dim];
        for (pi, pj, edge) in &edges {
            let residual = edge_residual(&edge.measurement, &nodes[*pi].1, &nodes[*pj].1)?;
            let mut blocks: [(usize, Option<[[f64; 6]; 6]>); 2] = [(*pi, None), (*pj, None)];
            if *pi > 0 {
                blocks[0].1 =
                    Some(edge_jacobian(&edge.measurement, &nodes[*pi].1, &nodes[*pj].1, true)?);
            }
            if *pj > 0 {
                blocks[1].1 =
                    Some(edge_jacobian(&edge.measurement, &nodes[*pi].1, &nodes[*pj].1, false)?);
            }
            // Information-weighted residual.
            let mut wr = [0.0; 6];
            for r in 0..6 {
                for c in 0..6 {
                    wr[r] += edge.information[r][c] * residual[c];
                }
            }
            for (pos_a, jac_a) in &blocks {
                let Some(ja) = jac_a else { continue };
                let base_a = (pos_a - 1) * 6;
                // b += J_a^T * Omega * r
                for col in 0..6 {
                    let mut acc = 0.0;
                    for row in 0..6 {
                        acc += ja[row][col] * wr[row];
                    }
                    b[base_a + col] += acc;
                }
                // Omega * J_a, reused for every pairing with this block.
                let mut wja = [[0.0; 6]; 6];
                for r in 0..6 {
                    for c in 0..6 {
                        for k in 0..6 {
                            wja[r][c] += edge.information[r][k] * ja[k][c];
                        }
                    }
                }
                for (pos_b, jac_b) in &blocks {
                    let Some(jb) = jac_b else { continue };
                    let base_b = (pos_b - 1) * 6;
                    for r in 0..6 {
                        for c in 0..6 {
                            let mut acc = 0.0;
                            for k in 0..6 {
                                acc += jb[k][r] * wja[k][c];
                            }
                            h[(base_b + r) * dim + base_a + c] += acc;
                        }
                    }
                }
            }
        }
        if b.iter().fold(0.0_f64, |m, v| m.max(v.abs())) < LM_GRADIENT_FLOOR {
            break;
        }

        // Retry with stronger damping until a step reduces chi2.
        let new_chi2 = loop {
            let mut damped = h.clone();
            for k in 0..dim {
                damped[k * dim + k] += lambda;
            }
            let neg_b: Vec<f64> = b.iter().map(|v| -v).collect();
            if let Some(delta) = solve_spd(&damped, &neg_b, dim) {
                let mut candidate = nodes.clone();
                for (f, node) in candidate.iter_mut().skip(1).enumerate() {
                    let mut xi = [0.0; 6];
                    xi.copy_from_slice(&delta[f * 6..f * 6 + 6]);
                    node.1 = compose(&node.1, &se3_exp(&Twist::from_array(xi)));
                }
                let candidate_chi2 = graph_chi2(&candidate, &edges)?;
                if candidate_chi2 <= chi2 {
                    nodes = candidate;
                    lambda /= 10.0;
                    break candidate_chi2;
                }
            }
            lambda *= 10.0;
            if lambda > LM_LAMBDA_CAP {
                return Err(BackendError::SolverDiverged);
            }
        };
        let drop = chi2 - new_chi2;
        chi2 = new_chi2;
        trace.push(chi2);
        if drop < tol {
            break 'outer;
        }
    }

    graph.nodes = nodes;
    Ok(OptimizeReport { chi2_before, chi2_after: chi2, iterations, chi2_trace: trace })
}

/// Unprojects every `stride`-th pixel of each depth map and transforms it
/// by the matching trajectory pose into the world frame.
pub fn export_pointcloud(
    trajectory: &Trajectory,
    depths: &[DepthMap],
    k: &CameraIntrinsics,
    stride: usize,
) -> Result<Vec<[f64; 3]>, BackendError> {
    if stride == 0 {
        return Err(BackendError::InvalidInput("stride must be positive"));
    }
    if trajectory.len() != depths.len() {
        return Err(BackendError::FrameMismatch { expected: trajectory.len(), got: depths.len() });
    }
    let mut points = Vec::new();
    for (frame, depth) in depths.iter().enumerate() {
        if depth.dims() != (k.height, k.width) {
            return Err(BackendError::InvalidInput("depth dims must match intrinsics"));
        }
        let pose = trajectory.pose(frame);
        for y in (0..k.height).step_by(stride) {
            for x in (0..k.width).step_by(stride) {
                let local = unproject_pixel([x as f64, y as f64], depth.at(y, x), k)?;
                points.push(pose.transform_point(local));
            }
        }
    }
    Ok(points)
}

/// Text dump of a pose graph: one `NODE i <12-number row-major [R|t]>` line
/// per node and one `EDGE kind i j <12-number measurement> <21 upper
/// triangular information entries>` line per edge.
pub fn dump_graph(graph: &PoseGraph) -> String {
    let mut out = String::new();
    for (frame, pose) in graph.nodes() {
        let _ = write!(out, "NODE {frame}");
        for v in pose.to_matrix_rows() {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    for edge in graph.edges() {
        let kind = match edge.kind {
            EdgeKind::Odometry => "odometry",
            EdgeKind::Loop => "loop",
        };
        let _ = write!(out, "EDGE {kind} {} {}", edge.i, edge.j);
        for v in edge.measurement.to_matrix_rows() {
            let _ = write!(out, " {v}");
        }
        for r in 0..6 {
            for c in r..6 {
                let _ = write!(out, " {}", edge.information[r][c]);
            }
        }
        out.push('\n');
    }
    out
}

/// Text dump of a point cloud: one `x y z` line per point.
pub fn dump_pointcloud(points: &[[f64; 3]]) -> String {
    let mut out = String::new();
    for p in points {
        let _ = writeln!(out, "{} {} {}", p[0], p[1], p[2]);
    }
    out
}
