//! Odometry quality metrics over deployment sequences.
//!
//! Trajectories are scored with the classic segment protocol: every
//! subpath of a fixed set of lengths contributes a relative translation and
//! rotation error, and the means are reported as percent and degrees per
//! 100 meters. Those raw errors remap onto unit-interval base metrics that
//! aggregate into Adaptation Quality (mean over all deployment orderings)
//! and Retention Quality (mean gain on a revisited environment relative to
//! never having left).

use crate::geometry::{relative, Pose3, Trajectory};
use alloc::vec::Vec;
// Needed for float math in no_std builds; std builds resolve these
// methods inherently and then see this import as unused.
#[allow(unused_imports)]
use num_traits::Float;
use thiserror::Error;

/// Segment lengths (meters) sized for desk-scale scenes.
pub const DEFAULT_SEGMENT_LENGTHS: [f64; 5] = [25.0, 50.0, 100.0, 150.0, 200.0];
/// The original outdoor-scale segment lengths.
pub const KITTI_SEGMENT_LENGTHS: [f64; 8] =
    [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("trajectories differ in length: gt {gt}, est {est}")]
    LengthMismatch { gt: usize, est: usize },
    #[error("trajectory too short for every segment length")]
    TooShort,
    #[error("invalid input: {0}")]
    InvalidInput(&'static str),
    #[error("records do not cover the evaluation set exactly: {0}")]
    IncompleteSet(&'static str),
    #[error("plan needs at least two environments with two scenes each")]
    NotEnoughScenes,
}

/// Mean relative errors over all evaluated segments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentErrors {
    /// Translation error in percent of segment length.
    pub t_err: f64,
    /// Rotation error in degrees per 100 meters.
    pub r_err: f64,
}

impl SegmentErrors {
    pub fn new(t_err: f64, r_err: f64) -> Result<Self, MetricsError> {
        if !(t_err >= 0.0 && t_err.is_finite() && r_err >= 0.0 && r_err.is_finite()) {
            return Err(MetricsError::InvalidInput("segment errors must be nonnegative"));
        }
        Ok(SegmentErrors { t_err, r_err })
    }
}

/// An error remapped onto [0, 1], where 1 is a perfect trajectory.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct BaseMetric(f64);

impl BaseMetric {
    /// Clamps into [0, 1]; non-finite input collapses to 0.
    pub fn new(value: f64) -> Self {
        if value.is_finite() {
            BaseMetric(value.clamp(0.0, 1.0))
        } else {
            BaseMetric(0.0)
        }
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// `t_err` maps through 1 - t/100 clamped at zero; `r_err` maps through
/// 1 - r/180 using the numeric value in degrees per 100 meters.
pub fn remap_errors(errors: &SegmentErrors) -> (BaseMetric, BaseMetric) {
    (BaseMetric::new(1.0 - errors.t_err / 100.0), BaseMetric::new(1.0 - errors.r_err / 180.0))
}

/// Identifies one scene of one environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SceneRef {
    pub env: usize,
    pub scene: usize,
}

/// Outcome of running one deployment sequence: the ordered scenes visited
/// and the segment errors of the final scene.
#[derive(Debug, Clone, PartialEq)]
pub struct DeploymentRecord {
    pub sequence: Vec<SceneRef>,
    pub errors: SegmentErrors,
}

impl DeploymentRecord {
    pub fn new(sequence: Vec<SceneRef>, errors: SegmentErrors) -> Result<Self, MetricsError> {
        if sequence.is_empty() {
            return Err(MetricsError::InvalidInput("deployment sequence must be nonempty"));
        }
        Ok(DeploymentRecord { sequence, errors })
    }
}

/// The scenes one environment contributes to an evaluation plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvironmentScenes {
    pub env: usize,
    pub scenes: Vec<usize>,
}

/// A retention sequence and its counterfactual that never left the
/// revisited environment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RqPair {
    pub mixed: Vec<SceneRef>,
    pub reference: Vec<SceneRef>,
}

/// Deployment sequences needed to aggregate adaptation and retention
/// quality. Every sequence starts with the pre-training scene.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPlan {
    pub pretrain: SceneRef,
    pub aq_sequences: Vec<Vec<SceneRef>>,
    pub rq_pairs: Vec<RqPair>,
}

/// Aggregate scores per base metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityScores {
    pub trans: f64,
    pub rot: f64,
}

/// Segment-protocol errors of an estimated trajectory against ground
/// truth. For every start frame (advancing by `step`) and every length, the
/// segment ends at the first frame whose ground-truth path distance reaches
/// that length; the relative-transform discrepancy divided by the nominal
/// length contributes to the means.
pub fn relative_segment_errors(
    gt: &Trajectory,
    est: &Trajectory,
    lengths: &[f64],
    step: usize,
) -> Result<SegmentErrors, MetricsError> {
    if gt.len() != est.len() {
        return Err(MetricsError::LengthMismatch { gt: gt.len(), est: est.len() });
    }
    if step == 0 {
        return Err(MetricsError::InvalidInput("step must be positive"));
    }
    if lengths.is_empty() || !lengths.iter().all(|l| l.is_finite() && *l > 0.0) {
        return Err(MetricsError::InvalidInput("segment lengths must be positive"));
    }
    let n = gt.len();
    let mut dist = Vec::with_capacity(n);
    let mut acc = 0.0;
    for i in 0..n {
        if i > 0 {
            let a = gt.pose(i - 1).translation();
            let b = gt.pose(i).translation();
            acc += ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
        }
        dist.push(acc);
    }

    let mut t_sum = 0.0;
    let mut r_sum = 0.0;
    let mut count = 0usize;
    for i in (0..n).step_by(step) {
        for length in lengths {
            let Some(j) = (i..n).find(|j| dist[*j] - dist[i] >= *length) else { continue };
            let rel_gt = relative(gt.pose(i), gt.pose(j));
            let rel_est = relative(est.pose(i), est.pose(j));
            let discrepancy = relative(&rel_gt, &rel_est);
            let dt = discrepancy.translation();
            let t_norm = (dt[0] * dt[0] + dt[1] * dt[1] + dt[2] * dt[2]).sqrt();
            t_sum += t_norm / length * 100.0;
            r_sum += discrepancy.rotation_angle().to_degrees() / length * 100.0;
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricsError::TooShort);
    }
    SegmentErrors::new(t_sum / count as f64, r_sum / count as f64)
}

/// Ratio that rescales the estimate onto the ground-truth path length:
/// the median over frames of the per-step distance ratios. Intended for
/// non-metric baselines behind an explicit flag; metric methods are
/// compared unscaled.
pub fn median_scale_factor(gt: &Trajectory, est: &Trajectory) -> Result<f64, MetricsError> {
    if gt.len() != est.len() {
        return Err(MetricsError::LengthMismatch { gt: gt.len(), est: est.len() });
    }
    let step = |traj: &Trajectory, i: usize| {
        let a = traj.pose(i - 1).translation();
        let b = traj.pose(i).translation();
        ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt()
    };
    let mut ratios = Vec::new();
    for i in 1..gt.len() {
        let denom = step(est, i);
        if denom > 0.0 {
            ratios.push(step(gt, i) / denom);
        }
    }
    if ratios.is_empty() {
        return Err(MetricsError::InvalidInput("estimate never moves"));
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).expect("ratios are finite"));
    let mid = ratios.len() / 2;
    Ok(if ratios.len() % 2 == 1 { ratios[mid] } else { (ratios[mid - 1] + ratios[mid]) / 2.0 })
}

/// Scales every translation of a trajectory, keeping timestamps and
/// rotations.
pub fn scale_trajectory(traj: &Trajectory, scale: f64) -> Trajectory {
    let mut out = Trajectory::new();
    for (ts, pose) in traj.iter() {
        let t = pose.translation();
        let scaled =
            Pose3::from_quat_trans(pose.rotation_quat(), [t[0] * scale, t[1] * scale, t[2] * scale]);
        out.push(*ts, scaled).expect("timestamps already increase");
    }
    out
}

/// Enumerates the deployment sequences for evaluation. Adaptation quality
/// visits every ordered arrangement of one held-out scene per environment
/// (shortest first, then lexicographic by environment position). Retention
/// quality interleaves two rounds over the environments and pairs each
/// revisit with its counterfactual reference that skips the foreign scenes
/// in between.
pub fn make_eval_plan(
    pretrain: SceneRef,
    envs: &[EnvironmentScenes],
) -> Result<EvalPlan, MetricsError> {
    if envs.len() < 2 || envs.iter().any(|e| e.scenes.len() < 2) {
        return Err(MetricsError::NotEnoughScenes);
    }
    for (k, env) in envs.iter().enumerate() {
        if envs[..k].iter().any(|other| other.env == env.env) {
            return Err(MetricsError::InvalidInput("environment ids must be distinct"));
        }
    }
    let held_out: Vec<SceneRef> =
        envs.iter().map(|e| SceneRef { env: e.env, scene: e.scenes[0] }).collect();

    let mut aq_sequences = Vec::new();
    let mut arrangement = Vec::new();
    let mut used = alloc::vec![false; envs.len()];
    for target_len in 1..=envs.len() {
        enumerate_arrangements(
            &held_out,
            target_len,
            &mut used,
            &mut arrangement,
            &mut aq_sequences,
            pretrain,
        );
    }

    // Interleaved two-round sequence: a1 b1 ... a2 b2 ...
    let mut full = alloc::vec![pretrain];
    for round in 0..2 {
        for env in envs {
            full.push(SceneRef { env: env.env, scene: env.scenes[round] });
        }
    }
    let mut rq_pairs = Vec::new();
    for (pos, scene) in full.iter().enumerate() {
        let Some(prev) = full[..pos].iter().rposition(|s| s.env == scene.env) else { continue };
        let mixed: Vec<SceneRef> = full[..=pos].to_vec();
        // The reference drops every scene between the two visits of this
        // environment, modeling a deployment that never left it.
        let mut reference = full[..=prev].to_vec();
        reference.push(*scene);
        rq_pairs.push(RqPair { mixed, reference });
    }
    Ok(EvalPlan { pretrain, aq_sequences, rq_pairs })
}

fn enumerate_arrangements(
    held_out: &[SceneRef],
    target_len: usize,
    used: &mut [bool],
    arrangement: &mut Vec<SceneRef>,
    out: &mut Vec<Vec<SceneRef>>,
    pretrain: SceneRef,
) {
    if arrangement.len() == target_len {
        let mut sequence = Vec::with_capacity(target_len + 1);
        sequence.push(pretrain);
        sequence.extend_from_slice(arrangement);
        out.push(sequence);
        return;
    }
    for k in 0..held_out.len() {
        if used[k] {
            continue;
        }
        used[k] = true;
        arrangement.push(held_out[k]);
        enumerate_arrangements(held_out, target_len, used, arrangement, out, pretrain);
        arrangement.pop();
        used[k] = false;
    }
}

fn find_record<'a>(
    records: &'a [DeploymentRecord],
    sequence: &[SceneRef],
) -> Result<&'a DeploymentRecord, MetricsError> {
    records
        .iter()
        .find(|r| r.sequence == sequence)
        .ok_or(MetricsError::IncompleteSet("a required sequence is missing"))
}

/// Mean base metric over the full adaptation-quality sequence set; the
/// records must cover exactly that set.
pub fn adaptation_quality(
    plan: &EvalPlan,
    records: &[DeploymentRecord],
) -> Result<QualityScores, MetricsError> {
    if records.len() != plan.aq_sequences.len() {
        return Err(MetricsError::IncompleteSet("record count does not match the sequence set"));
    }
    let mut trans = 0.0;
    let mut rot = 0.0;
    for sequence in &plan.aq_sequences {
        let record = find_record(records, sequence)?;
        let (t, r) = remap_errors(&record.errors);
        trans += t.value();
        rot += r.value();
    }
    let n = plan.aq_sequences.len() as f64;
    Ok(QualityScores { trans: trans / n, rot: rot / n })
}

/// Mean base-metric difference between each retention sequence and its
/// reference; the records must cover exactly the sequences the plan needs.
pub fn retention_quality(
    plan: &EvalPlan,
    records: &[DeploymentRecord],
) -> Result<QualityScores, MetricsError> {
    let mut needed: Vec<&Vec<SceneRef>> = Vec::new();
    for pair in &plan.rq_pairs {
        for sequence in [&pair.mixed, &pair.reference] {
            if !needed.contains(&sequence) {
                needed.push(sequence);
            }
        }
    }
    if records.len() != needed.len() {
        return Err(MetricsError::IncompleteSet("record count does not match the sequence set"));
    }
    let mut trans = 0.0;
    let mut rot = 0.0;
    for pair in &plan.rq_pairs {
        let (mt, mr) = remap_errors(&find_record(records, &pair.mixed)?.errors);
        let (rt, rr) = remap_errors(&find_record(records, &pair.reference)?.errors);
        trans += mt.value() - rt.value();
        rot += mr.value() - rr.value();
    }
    let n = plan.rq_pairs.len() as f64;
    Ok(QualityScores { trans: trans / n, rot: rot / n })
}
