//! Dual-network online adaptation with experience replay.
//!
//! Two copies of the depth/pose networks run side by side during a
//! deployment. The expert adapts on the live stream alone and produces the
//! emitted odometry; the generalizer adapts on the live stream mixed with
//! replayed triplets from previously visited environments, so it retains old
//! knowledge while the expert overfits to the present. At the end of a
//! deployment the generalizer's weights become the stored weights that seed
//! both copies of the next deployment.
//!
//! Baseline modes reuse the same machinery: `Fixed` and `Offline` never
//! update, `ExpertOnly` keeps a single continuously updated network without
//! replay, and `GeneralOnly` keeps a single network with replay.

use crate::geometry::{compose, CameraIntrinsics, GeometryError, Pose3, Trajectory};
use crate::photometric::{Image, ImageTriplet, LossWeights};
use crate::toynets::{
    adam_step, triplet_loss_and_gradients, AdamState, DepthNetToy, NetConfig, ParamVector,
    PoseNetToy, ToyNetError,
};
use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Distance a frame must cover since the last accepted frame (meters).
pub const DEFAULT_MIN_DISTANCE: f64 = 0.2;
/// Update cycles per accepted frame.
pub const DEFAULT_CYCLES: usize = 5;
/// Adam learning rate for online adaptation.
pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum AdaptationError {
    #[error("scene produced {accepted} accepted frames, need at least 3")]
    SceneTooShort { accepted: usize },
    #[error("invalid adaptation config: {0}")]
    InvalidConfig(&'static str),
    #[error("loss became non-finite during adaptation")]
    NonFiniteLoss,
    #[error(transparent)]
    Net(#[from] ToyNetError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Deployment behavior selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    /// Dual network: expert emits odometry, generalizer persists.
    ClSlam,
    /// No updates; odometry from the stored weights.
    Fixed,
    /// Single continuously updated network, no replay.
    ExpertOnly,
    /// Single network updated with replay batches.
    GeneralOnly,
    /// No online updates; distinguished from `Fixed` only by what the
    /// harness pre-trains the stored weights on.
    Offline,
}

/// Knobs of the per-frame update loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptationConfig {
    /// Update cycles per accepted frame, at least 1.
    pub cycles: usize,
    pub learning_rate: f64,
    /// Gate threshold in meters.
    pub min_distance: f64,
    pub mode: BaselineMode,
    /// Replay triplets sampled per foreign environment.
    pub replay_per_env: usize,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            cycles: DEFAULT_CYCLES,
            learning_rate: DEFAULT_LEARNING_RATE,
            min_distance: DEFAULT_MIN_DISTANCE,
            mode: BaselineMode::ClSlam,
            replay_per_env: 1,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<(), AdaptationError> {
        if self.cycles < 1 {
            return Err(AdaptationError::InvalidConfig("cycles must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(AdaptationError::InvalidConfig("learning rate must be nonnegative"));
        }
        if !(self.min_distance >= 0.0) {
            return Err(AdaptationError::InvalidConfig("min distance must be nonnegative"));
        }
        if self.replay_per_env < 1 {
            return Err(AdaptationError::InvalidConfig("replay count must be at least 1"));
        }
        Ok(())
    }
}

/// Accept a frame iff the driven distance `velocity * dt` reaches
/// `min_dist`. Callers accumulate distance over skipped frames by passing
/// the average speed and elapsed time since the last accepted frame.
pub fn frame_gate(velocity: f64, dt: f64, min_dist: f64) -> bool {
    debug_assert!(dt > 0.0);
    velocity * dt >= min_dist
}

/// Append-only store of past triplets keyed by environment, with a seeded
/// sampler for replay.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    triplets: Vec<ImageTriplet>,
    by_env: BTreeMap<usize, Vec<usize>>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(seed: u64) -> Self {
        ReplayBuffer {
            triplets: Vec::new(),
            by_env: BTreeMap::new(),
            rng: crate::rng::stream(seed, "adaptation:replay"),
        }
    }

    pub fn append(&mut self, triplet: ImageTriplet) {
        self.by_env.entry(triplet.env_id).or_default().push(self.triplets.len());
        self.triplets.push(triplet);
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Environments present, ascending.
    pub fn env_ids(&self) -> Vec<usize> {
        self.by_env.keys().copied().collect()
    }

    pub fn env_len(&self, env_id: usize) -> usize {
        self.by_env.get(&env_id).map_or(0, Vec::len)
    }

    /// Entry `position` within environment `env_id`, in insertion order.
    pub fn get(&self, env_id: usize, position: usize) -> Option<&ImageTriplet> {
        let idx = *self.by_env.get(&env_id)?.get(position)?;
        Some(&self.triplets[idx])
    }

    /// Uniformly samples `per_env` triplets from every environment except
    /// `current_env`, visiting environments in ascending id order so the
    /// draw sequence is reproducible.
    pub fn sample_foreign(&mut self, current_env: usize, per_env: usize) -> Vec<ImageTriplet> {
        let mut out = Vec::new();
        for (env, indices) in &self.by_env {
            if *env == current_env || indices.is_empty() {
                continue;
            }
            for _ in 0..per_env {
                let pick = indices[self.rng.random_range(0..indices.len())];
                out.push(self.triplets[pick].clone());
            }
        }
        out
    }
}

/// `[online]` followed by one uniformly sampled triplet per foreign
/// environment in the buffer.
pub fn build_generalizer_batch(
    online: &ImageTriplet,
    buffer: &mut ReplayBuffer,
    current_env: usize,
    per_env: usize,
) -> Vec<ImageTriplet> {
    let mut batch = vec![online.clone()];
    batch.extend(buffer.sample_foreign(current_env, per_env));
    batch
}

/// One depth/pose network pair with its optimizer state.
#[derive(Debug, Clone)]
pub struct NetPair {
    pub depth: DepthNetToy,
    pub pose: PoseNetToy,
    pub depth_opt: AdamState,
    pub pose_opt: AdamState,
}

impl NetPair {
    fn from_stored(
        config: NetConfig,
        depth: &ParamVector,
        pose: &ParamVector,
        lr: f64,
    ) -> Result<Self, ToyNetError> {
        let depth = DepthNetToy::from_params(config, depth.clone())?;
        let pose = PoseNetToy::from_params(config, pose.clone())?;
        let depth_opt = AdamState::new(depth.param_count(), lr);
        let pose_opt = AdamState::new(pose.param_count(), lr);
        Ok(NetPair { depth, pose, depth_opt, pose_opt })
    }
}

/// Runs `cycles` update cycles on the mean batch loss: forward + backward
/// over every triplet, average the gradients, one Adam step on each network.
/// Returns the mean batch loss observed at the start of each cycle.
pub fn adapt_step(
    net: &mut NetPair,
    batch: &[ImageTriplet],
    cycles: usize,
    k: &CameraIntrinsics,
    weights: &LossWeights,
) -> Result<Vec<f64>, AdaptationError> {
    if batch.is_empty() {
        return Err(AdaptationError::InvalidConfig("batch must be nonempty"));
    }
    if cycles < 1 {
        return Err(AdaptationError::InvalidConfig("cycles must be at least 1"));
    }
    let mut trace = Vec::with_capacity(cycles);
    let inv = 1.0 / batch.len() as f64;
    for _ in 0..cycles {
        let mut depth_grad = vec![0.0; net.depth.param_count()];
        let mut pose_grad = vec![0.0; net.pose.param_count()];
        let mut loss = 0.0;
        for triplet in batch {
            let out = triplet_loss_and_gradients(triplet, &net.depth, &net.pose, k, weights)?;
            loss += out.breakdown.total * inv;
            for (acc, g) in depth_grad.iter_mut().zip(&out.depth_grad) {
                *acc += g * inv;
            }
            for (acc, g) in pose_grad.iter_mut().zip(&out.pose_grad) {
                *acc += g * inv;
            }
        }
        if !loss.is_finite() {
            return Err(AdaptationError::NonFiniteLoss);
        }
        trace.push(loss);
        adam_step(net.depth.params_mut(), &depth_grad, &mut net.depth_opt)?;
        adam_step(net.pose.params_mut(), &pose_grad, &mut net.pose_opt)?;
    }
    Ok(trace)
}

/// Persistent state across deployments: the stored weights, both live
/// network pairs, and the replay buffer.
#[derive(Debug, Clone)]
pub struct DualState {
    config: NetConfig,
    stored_depth: ParamVector,
    stored_pose: ParamVector,
    expert: NetPair,
    generalizer: NetPair,
    buffer: ReplayBuffer,
}

impl DualState {
    pub fn new(
        config: NetConfig,
        depth: ParamVector,
        pose: ParamVector,
        replay_seed: u64,
    ) -> Result<Self, ToyNetError> {
        let expert = NetPair::from_stored(config, &depth, &pose, DEFAULT_LEARNING_RATE)?;
        let generalizer = expert.clone();
        Ok(DualState {
            config,
            stored_depth: depth,
            stored_pose: pose,
            expert,
            generalizer,
            buffer: ReplayBuffer::new(replay_seed),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn stored_depth(&self) -> &ParamVector {
        &self.stored_depth
    }

    pub fn stored_pose(&self) -> &ParamVector {
        &self.stored_pose
    }

    pub fn expert(&self) -> &NetPair {
        &self.expert
    }

    pub fn generalizer(&self) -> &NetPair {
        &self.generalizer
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    /// Both live pairs restart from the stored weights with fresh optimizer
    /// moments.
    fn begin_deployment(&mut self, lr: f64) -> Result<(), ToyNetError> {
        self.expert = NetPair::from_stored(self.config, &self.stored_depth, &self.stored_pose, lr)?;
        self.generalizer = self.expert.clone();
        Ok(())
    }

    /// Weight hand-off at deployment end. The persisting network replaces
    /// the stored weights; the other copy is discarded at the next start.
    fn end_deployment(&mut self, mode: BaselineMode) {
        let keep = match mode {
            BaselineMode::ClSlam | BaselineMode::GeneralOnly => Some(&self.generalizer),
            BaselineMode::ExpertOnly => Some(&self.expert),
            BaselineMode::Fixed | BaselineMode::Offline => None,
        };
        if let Some(pair) = keep {
            self.stored_depth = pair.depth.params().clone();
            self.stored_pose = pair.pose.params().clone();
        }
    }
}

/// Input stream for one deployment: frames with capture times and measured
/// speeds. `velocities[i]` is the speed over the interval from frame `i-1`
/// to frame `i` (entry 0 is unused by the gate).
#[derive(Debug, Clone)]
pub struct SceneStream {
    pub images: Vec<Image>,
    pub timestamps: Vec<f64>,
    pub velocities: Vec<f64>,
    pub env_id: usize,
    pub scene_id: usize,
    pub intrinsics: CameraIntrinsics,
}

impl SceneStream {
    pub fn validate(&self) -> Result<(), AdaptationError> {
        let n = self.images.len();
        if self.timestamps.len() != n || self.velocities.len() != n {
            return Err(AdaptationError::InvalidConfig("stream arrays must have equal length"));
        }
        if !self.timestamps.windows(2).all(|w| w[0] < w[1]) {
            return Err(AdaptationError::InvalidConfig("timestamps must strictly increase"));
        }
        if !self.velocities.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(AdaptationError::InvalidConfig("velocities must be nonnegative"));
        }
        for img in &self.images {
            if img.dims() != (self.intrinsics.height, self.intrinsics.width) {
                return Err(AdaptationError::InvalidConfig("image dims must match intrinsics"));
            }
        }
        Ok(())
    }
}

/// Per input frame bookkeeping from a deployment.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_index: usize,
    pub accepted: bool,
    /// Mean batch loss per update cycle; empty when no update ran.
    pub expert_losses: Vec<f64>,
    pub generalizer_losses: Vec<f64>,
    /// Odometry increment from the previous accepted frame, when emitted.
    pub odometry: Option<Pose3>,
}

/// Everything a deployment produces.
#[derive(Debug, Clone)]
pub struct DeploymentOutput {
    /// Input indices of accepted frames.
    pub accepted: Vec<usize>,
    /// Capture times of accepted frames.
    pub timestamps: Vec<f64>,
    /// `increments[i]` is the pose of accepted frame `i+1` expressed in
    /// accepted frame `i`'s camera frame.
    pub increments: Vec<Pose3>,
    pub frames: Vec<FrameRecord>,
}

/// Integrates odometry increments into a trajectory starting at `start`.
pub fn integrate_odometry(
    start: &Pose3,
    timestamps: &[f64],
    increments: &[Pose3],
) -> Result<Trajectory, AdaptationError> {
    if timestamps.len() != increments.len() + 1 {
        return Err(AdaptationError::InvalidConfig("need one timestamp per pose"));
    }
    let mut traj = Trajectory::new();
    traj.push(timestamps[0], *start)?;
    let mut pose = *start;
    for (inc, ts) in increments.iter().zip(&timestamps[1..]) {
        pose = compose(&pose, inc);
        traj.push(*ts, pose)?;
    }
    Ok(traj)
}

/// Runs one deployment over a scene: gates frames, adapts the networks per
/// the configured mode, emits expert odometry, fills the replay buffer, and
/// performs the weight hand-off at the end.
pub fn run_deployment(
    state: &mut DualState,
    scene: &SceneStream,
    config: &AdaptationConfig,
    weights: &LossWeights,
) -> Result<DeploymentOutput, AdaptationError> {
    config.validate()?;
    scene.validate()?;
    state.begin_deployment(config.learning_rate)?;

    let adapt_expert = matches!(config.mode, BaselineMode::ClSlam | BaselineMode::ExpertOnly);
    let adapt_general = matches!(config.mode, BaselineMode::ClSlam | BaselineMode::GeneralOnly);
    let k = &scene.intrinsics;

    let mut out = DeploymentOutput {
        accepted: Vec::new(),
        timestamps: Vec::new(),
        increments: Vec::new(),
        frames: Vec::with_capacity(scene.images.len()),
    };
    // Distance driven since the last accepted frame (meters).
    let mut pending_dist = 0.0;

    for i in 0..scene.images.len() {
        let mut record = FrameRecord {
            frame_index: i,
            accepted: false,
            expert_losses: Vec::new(),
            generalizer_losses: Vec::new(),
            odometry: None,
        };
        let accept = if out.accepted.is_empty() {
            true
        } else {
            pending_dist += scene.velocities[i] * (scene.timestamps[i] - scene.timestamps[i - 1]);
            let dt = scene.timestamps[i] - out.timestamps[out.timestamps.len() - 1];
            frame_gate(pending_dist / dt, dt, config.min_distance)
        };
        if !accept {
            out.frames.push(record);
            continue;
        }
        record.accepted = true;
        out.accepted.push(i);
        out.timestamps.push(scene.timestamps[i]);
        pending_dist = 0.0;

        let n_acc = out.accepted.len();
        if n_acc >= 3 && (adapt_expert || adapt_general) {
            let triplet = accepted_triplet(scene, &out)?;
            if adapt_expert {
                record.expert_losses = adapt_step(
                    &mut state.expert,
                    core::slice::from_ref(&triplet),
                    config.cycles,
                    k,
                    weights,
                )?;
            }
            if adapt_general {
                let batch = build_generalizer_batch(
                    &triplet,
                    &mut state.buffer,
                    scene.env_id,
                    config.replay_per_env,
                );
                record.generalizer_losses =
                    adapt_step(&mut state.generalizer, &batch, config.cycles, k, weights)?;
            }
            // Append after the updates so a frame never replays into its own
            // update.
            state.buffer.append(triplet);
        }
        if n_acc >= 2 {
            let emitter = match config.mode {
                BaselineMode::GeneralOnly => &state.generalizer,
                _ => &state.expert,
            };
            let prev = &scene.images[out.accepted[n_acc - 2]];
            let curr = &scene.images[out.accepted[n_acc - 1]];
            let twist = emitter.pose.forward(prev, curr)?;
            let inc = crate::geometry::se3_exp(&twist);
            out.increments.push(inc);
            record.odometry = Some(inc);
        }
        out.frames.push(record);
    }

    if out.accepted.len() < 3 {
        return Err(AdaptationError::SceneTooShort { accepted: out.accepted.len() });
    }
    state.end_deployment(config.mode);
    Ok(out)
}

/// Triplet over the last three accepted frames, with pair speeds derived
/// from driven distance between accepted frames.
fn accepted_triplet(
    scene: &SceneStream,
    out: &DeploymentOutput,
) -> Result<ImageTriplet, AdaptationError> {
    let n = out.accepted.len();
    let idx = [out.accepted[n - 3], out.accepted[n - 2], out.accepted[n - 1]];
    let ts = [scene.timestamps[idx[0]], scene.timestamps[idx[1]], scene.timestamps[idx[2]]];
    let mut speeds = [0.0; 2];
    for pair in 0..2 {
        let mut dist = 0.0;
        for j in idx[pair] + 1..=idx[pair + 1] {
            dist += scene.velocities[j] * (scene.timestamps[j] - scene.timestamps[j - 1]);
        }
        speeds[pair] = dist / (ts[pair + 1] - ts[pair]);
    }
    Ok(ImageTriplet::new(
        [
            scene.images[idx[0]].clone(),
            scene.images[idx[1]].clone(),
            scene.images[idx[2]].clone(),
        ],
        speeds,
        ts,
        scene.env_id,
        scene.scene_id,
        idx[2],
    )
    .map_err(ToyNetError::Photometric)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config() -> NetConfig {
        NetConfig::new(8, 12, 3, 5).unwrap()
    }

    fn tiny_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(9.0, 9.0, 6.0, 4.0, 12, 8).unwrap()
    }

    fn random_image(seed: u64, tag: &str) -> Image {
        let mut rng = crate::rng::stream(seed, tag);
        Image::new(8, 12, (0..96).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn triplet_for_env(env_id: usize, seed: u64) -> ImageTriplet {
        ImageTriplet::new(
            [
                random_image(seed, "adapt:t0"),
                random_image(seed, "adapt:t1"),
                random_image(seed, "adapt:t2"),
            ],
            [1.0, 1.0],
            [0.0, 0.1, 0.2],
            env_id,
            0,
            2,
        )
        .unwrap()
    }

    fn fresh_state(seed: u64) -> DualState {
        let cfg = tiny_config();
        let depth = DepthNetToy::seeded(cfg, seed);
        let pose = PoseNetToy::seeded(cfg, seed + 1);
        DualState::new(cfg, depth.params().clone(), pose.params().clone(), 7).unwrap()
    }

    fn moving_scene(frames: usize, speed: f64, seed: u64) -> SceneStream {
        SceneStream {
            images: (0..frames).map(|i| random_image(seed + i as u64, "adapt:scene")).collect(),
            timestamps: (0..frames).map(|i| i as f64 * 0.1).collect(),
            velocities: (0..frames).map(|i| if i == 0 { 0.0 } else { speed }).collect(),
            env_id: 0,
            scene_id: 0,
            intrinsics: tiny_intrinsics(),
        }
    }

    #[test]
    fn gate_examples() {
        assert!(!frame_gate(0.1, 1.0, 0.2));
        assert!(frame_gate(1.0, 0.5, 0.2));
        // Exact boundary: 0.4 * 0.5 is exactly the representation of 0.2.
        assert!(frame_gate(0.4, 0.5, 0.2));
    }

    #[test]
    fn generalizer_batch_sizes() {
        let mut buffer = ReplayBuffer::new(3);
        let online = triplet_for_env(9, 0);
        assert_eq!(build_generalizer_batch(&online, &mut buffer, 9, 1).len(), 1);

        buffer.append(triplet_for_env(0, 1));
        buffer.append(triplet_for_env(1, 2));
        assert_eq!(build_generalizer_batch(&online, &mut buffer, 1, 1).len(), 2);

        buffer.append(triplet_for_env(2, 3));
        let batch = build_generalizer_batch(&online, &mut buffer, 3, 1);
        assert_eq!(batch.len(), 4);
        assert_eq!(batch[0], online);
        // Foreign triplets arrive in ascending environment order.
        assert_eq!(batch[1].env_id, 0);
        assert_eq!(batch[2].env_id, 1);
        assert_eq!(batch[3].env_id, 2);
    }

    #[test]
    fn replay_buffer_indexes_by_env_and_position() {
        let mut buffer = ReplayBuffer::new(11);
        buffer.append(triplet_for_env(4, 0));
        buffer.append(triplet_for_env(2, 1));
        buffer.append(triplet_for_env(4, 2));
        assert_eq!(buffer.len(), 3);
        assert_eq!(buffer.env_ids(), vec![2, 4]);
        assert_eq!(buffer.env_len(4), 2);
        assert_eq!(buffer.get(4, 1).unwrap().frames[0], random_image(2, "adapt:t0"));
        assert!(buffer.get(4, 2).is_none());
        assert!(buffer.get(7, 0).is_none());
    }

    #[test]
    fn replay_sampling_is_seeded_and_covers_entries() {
        let run = |seed: u64| {
            let mut buffer = ReplayBuffer::new(seed);
            for i in 0..10 {
                buffer.append(triplet_for_env(0, i));
            }
            let mut picks = Vec::new();
            for _ in 0..30 {
                picks.push(buffer.sample_foreign(1, 1)[0].frames[0].clone());
            }
            picks
        };
        assert_eq!(run(5), run(5));
        let picks = run(5);
        assert!(picks.iter().any(|p| *p != picks[0]), "sampler should hit multiple entries");
    }

    #[test]
    fn adapt_step_traces_and_zero_lr() {
        let cfg = tiny_config();
        let mut net = NetPair::from_stored(
            cfg,
            DepthNetToy::seeded(cfg, 1).params(),
            PoseNetToy::seeded(cfg, 2).params(),
            1e-4,
        )
        .unwrap();
        let batch = vec![triplet_for_env(0, 5)];
        let k = tiny_intrinsics();
        let w = LossWeights::default();
        let trace = adapt_step(&mut net, &batch, 5, &k, &w).unwrap();
        assert_eq!(trace.len(), 5);

        let mut frozen_net = NetPair::from_stored(
            cfg,
            DepthNetToy::seeded(cfg, 1).params(),
            PoseNetToy::seeded(cfg, 2).params(),
            0.0,
        )
        .unwrap();
        let before = frozen_net.depth.params().clone();
        adapt_step(&mut frozen_net, &batch, 3, &k, &w).unwrap();
        assert_eq!(*frozen_net.depth.params(), before);
    }

    #[test]
    fn adapt_step_single_cycle_equals_manual_update() {
        let cfg = tiny_config();
        let depth = DepthNetToy::seeded(cfg, 3);
        let pose = PoseNetToy::seeded(cfg, 4);
        let triplet = triplet_for_env(0, 6);
        let k = tiny_intrinsics();
        let w = LossWeights::default();

        let mut net =
            NetPair::from_stored(cfg, depth.params(), pose.params(), 1e-4).unwrap();
        let trace = adapt_step(&mut net, core::slice::from_ref(&triplet), 1, &k, &w).unwrap();

        let out = triplet_loss_and_gradients(&triplet, &depth, &pose, &k, &w).unwrap();
        let mut manual_depth = depth.params().clone();
        let mut manual_pose = pose.params().clone();
        let mut ds = AdamState::new(manual_depth.len(), 1e-4);
        let mut ps = AdamState::new(manual_pose.len(), 1e-4);
        adam_step(&mut manual_depth, &out.depth_grad, &mut ds).unwrap();
        adam_step(&mut manual_pose, &out.pose_grad, &mut ps).unwrap();

        assert_eq!(trace, vec![out.breakdown.total]);
        assert_eq!(*net.depth.params(), manual_depth);
        assert_eq!(*net.pose.params(), manual_pose);
    }

    #[test]
    fn adapt_step_rejects_empty_batch() {
        let cfg = tiny_config();
        let mut net = NetPair::from_stored(
            cfg,
            DepthNetToy::seeded(cfg, 1).params(),
            PoseNetToy::seeded(cfg, 2).params(),
            1e-4,
        )
        .unwrap();
        assert!(matches!(
            adapt_step(&mut net, &[], 1, &tiny_intrinsics(), &LossWeights::default()),
            Err(AdaptationError::InvalidConfig(_))
        ));
    }

    #[test]
    fn gate_accumulates_distance_across_skipped_frames() {
        // 1.05 m/s at 10 Hz covers 0.105 m per frame: one frame falls short
        // of the 0.2 m threshold, two frames clear it.
        let mut state = fresh_state(21);
        let scene = moving_scene(9, 1.05, 100);
        let out = run_deployment(
            &mut state,
            &scene,
            &AdaptationConfig::default(),
            &LossWeights::default(),
        )
        .unwrap();
        assert_eq!(out.accepted, vec![0, 2, 4, 6, 8]);
        assert_eq!(out.frames.len(), 9);
        assert!(!out.frames[1].accepted);
        assert_eq!(out.increments.len(), 4);
    }

    #[test]
    fn deployment_requires_three_accepted_frames() {
        let mut state = fresh_state(22);
        let out = run_deployment(
            &mut state,
            &moving_scene(2, 5.0, 101),
            &AdaptationConfig::default(),
            &LossWeights::default(),
        );
        assert_eq!(out.unwrap_err(), AdaptationError::SceneTooShort { accepted: 2 });

        // Crawling stream: only the first frame passes the gate.
        let mut state = fresh_state(23);
        let out = run_deployment(
            &mut state,
            &moving_scene(6, 0.01, 102),
            &AdaptationConfig::default(),
            &LossWeights::default(),
        );
        assert_eq!(out.unwrap_err(), AdaptationError::SceneTooShort { accepted: 1 });
    }

    #[test]
    fn fixed_mode_changes_nothing_and_uses_stored_weights() {
        let mut state = fresh_state(24);
        let stored_depth = state.stored_depth().clone();
        let stored_pose = state.stored_pose().clone();
        let scene = moving_scene(6, 5.0, 103);
        let cfg = AdaptationConfig { mode: BaselineMode::Fixed, ..AdaptationConfig::default() };
        let out = run_deployment(&mut state, &scene, &cfg, &LossWeights::default()).unwrap();

        assert_eq!(*state.stored_depth(), stored_depth);
        assert_eq!(*state.stored_pose(), stored_pose);
        assert_eq!(*state.expert().depth.params(), stored_depth);
        assert_eq!(*state.generalizer().pose.params(), stored_pose);
        assert_eq!(state.buffer().len(), 0);
        assert!(out.frames.iter().all(|f| f.expert_losses.is_empty()));

        // Emitted odometry equals a direct forward pass of the stored net.
        let net = PoseNetToy::from_params(tiny_config(), stored_pose).unwrap();
        let twist = net.forward(&scene.images[0], &scene.images[1]).unwrap();
        assert_eq!(out.increments[0], crate::geometry::se3_exp(&twist));
    }

    #[test]
    fn cl_slam_hands_off_generalizer_weights_and_fills_buffer() {
        let mut state = fresh_state(25);
        let initial = state.stored_depth().clone();
        let scene = moving_scene(6, 5.0, 104);
        let cfg = AdaptationConfig::default();
        let out = run_deployment(&mut state, &scene, &cfg, &LossWeights::default()).unwrap();

        assert_eq!(*state.stored_depth(), *state.generalizer().depth.params());
        assert_eq!(*state.stored_pose(), *state.generalizer().pose.params());
        assert_ne!(*state.stored_depth(), initial);
        // First visit to an environment: no foreign replay exists yet, so
        // the generalizer sees the same batches as the expert.
        assert_eq!(*state.expert().depth.params(), *state.generalizer().depth.params());
        // One triplet per accepted frame from the third onward.
        assert_eq!(out.accepted.len(), 6);
        assert_eq!(state.buffer().len(), out.accepted.len() - 2);
        assert_eq!(state.buffer().env_ids(), vec![0]);

        // A second deployment in a new environment replays the old one into
        // the generalizer, so the two copies finally diverge.
        let handed = state.stored_depth().clone();
        let mut scene2 = moving_scene(6, 5.0, 105);
        scene2.env_id = 1;
        run_deployment(&mut state, &scene2, &cfg, &LossWeights::default()).unwrap();
        assert_ne!(*state.expert().depth.params(), *state.generalizer().depth.params());
        assert_ne!(*state.stored_depth(), handed);
        assert_eq!(state.buffer().env_ids(), vec![0, 1]);
    }

    #[test]
    fn expert_only_matches_cl_slam_on_first_deployment() {
        let scene = moving_scene(7, 5.0, 106);
        let w = LossWeights::default();

        let mut cl = fresh_state(26);
        let cl_cfg = AdaptationConfig::default();
        let cl_out = run_deployment(&mut cl, &scene, &cl_cfg, &w).unwrap();
        let cl_expert_depth = cl.expert().depth.params().clone();

        let mut ex = fresh_state(26);
        let ex_cfg =
            AdaptationConfig { mode: BaselineMode::ExpertOnly, ..AdaptationConfig::default() };
        let ex_out = run_deployment(&mut ex, &scene, &ex_cfg, &w).unwrap();

        // The expert never sees replay, so its update sequence is identical.
        assert_eq!(cl_expert_depth, *ex.expert().depth.params());
        assert_eq!(cl_out.increments, ex_out.increments);
        // Hand-off differs: expert-only persists the expert itself.
        assert_eq!(*ex.stored_depth(), *ex.expert().depth.params());
    }

    #[test]
    fn general_only_emits_from_the_replay_trained_network() {
        let mut state = fresh_state(27);
        let initial = state.stored_depth().clone();
        let scene = moving_scene(6, 5.0, 107);
        let cfg =
            AdaptationConfig { mode: BaselineMode::GeneralOnly, ..AdaptationConfig::default() };
        let out = run_deployment(&mut state, &scene, &cfg, &LossWeights::default()).unwrap();

        // Single network: the expert copy never updates.
        assert_eq!(*state.expert().depth.params(), initial);
        assert!(out.frames.iter().all(|f| f.expert_losses.is_empty()));
        assert!(out.frames.iter().any(|f| !f.generalizer_losses.is_empty()));
        assert_eq!(*state.stored_depth(), *state.generalizer().depth.params());
        assert_ne!(*state.stored_depth(), initial);
    }

    #[test]
    fn deployments_are_deterministic() {
        let scene = moving_scene(7, 5.0, 108);
        let run = || {
            let mut state = fresh_state(28);
            let out = run_deployment(
                &mut state,
                &scene,
                &AdaptationConfig::default(),
                &LossWeights::default(),
            )
            .unwrap();
            (out.increments.clone(), state.stored_depth().clone(), state.stored_pose().clone())
        };
        let (inc_a, d_a, p_a) = run();
        let (inc_b, d_b, p_b) = run();
        assert_eq!(inc_a, inc_b);
        assert_eq!(d_a, d_b);
        assert_eq!(p_a, p_b);
    }

    #[test]
    fn triplet_speeds_average_over_skipped_frames() {
        let mut state = fresh_state(29);
        let scene = moving_scene(9, 1.05, 109);
        let out = run_deployment(
            &mut state,
            &scene,
            &AdaptationConfig::default(),
            &LossWeights::default(),
        )
        .unwrap();
        assert_eq!(out.accepted, vec![0, 2, 4, 6, 8]);
        // Buffer triplets carry the averaged pair speed 1.05 m/s.
        let t = state.buffer().get(0, 0).unwrap();
        assert!((t.velocities[0] - 1.05).abs() < 1e-12);
        assert!((t.velocities[1] - 1.05).abs() < 1e-12);
        assert!((t.timestamps[1] - t.timestamps[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn integrate_odometry_composes_increments() {
        let inc = crate::geometry::se3_exp(&crate::geometry::Twist::new(
            [0.0, 0.1, 0.0],
            [0.0, 0.0, 1.0],
        ));
        let traj =
            integrate_odometry(&Pose3::identity(), &[0.0, 0.1, 0.2], &[inc, inc]).unwrap();
        assert_eq!(traj.len(), 3);
        let expected = compose(&compose(&Pose3::identity(), &inc), &inc);
        assert_eq!(*traj.pose(2), expected);
        assert!(matches!(
            integrate_odometry(&Pose3::identity(), &[0.0], &[inc]),
            Err(AdaptationError::InvalidConfig(_))
        ));
    }
}
