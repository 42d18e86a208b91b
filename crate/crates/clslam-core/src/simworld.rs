//! Deterministic procedural scene generator.
//!
//! A scene is a camera driving over a textured ground plane dotted with
//! boxes. Rendering is per-pixel ray casting against that analytic
//! geometry, so depth maps are exact (to f32 rounding, matching the
//! on-disk format) and ground-truth warps reproduce neighboring frames up
//! to interpolation error. Intensities are quantized to 8-bit levels for
//! the same reason. Environments parameterize
//! texture statistics, illumination, box layout, and speed so that
//! different environments exhibit a measurable appearance gap, while seeds
//! make every scene bitwise reproducible.
//!
//! Conventions: camera x right, y down, z forward. The world shares the
//! camera's y-down axis: the ground plane lies at `y = CAMERA_HEIGHT` and
//! the camera travels in the `y = 0` plane, pitched down far enough that
//! every ray is guaranteed to strike the ground.

use crate::adaptation::SceneStream;
use crate::geometry::{compose, CameraIntrinsics, Pose3, Trajectory};
use crate::photometric::{DepthMap, Image, PhotometricError};
use crate::rng::{derive_seed, stream};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::TAU;
// Needed for float math in no_std builds; std builds resolve these
// methods inherently and then see this import as unused.
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use thiserror::Error;

/// Camera center height above the ground plane (meters).
pub const CAMERA_HEIGHT: f64 = 1.5;
/// Downward camera pitch (radians). Must exceed atan(cy / fy) so that even
/// the top image row looks at the ground; with the default intrinsics that
/// bound is atan(0.4), comfortably below this value.
pub const CAMERA_PITCH: f64 = 0.45;
/// Boxes keep at least this distance (meters) from the camera path.
pub const PATH_CLEARANCE: f64 = 2.5;
/// Default capture rate (Hz).
pub const DEFAULT_FRAME_RATE: f64 = 10.0;
/// Default relative magnitude for optional speedometer noise.
pub const DEFAULT_VELOCITY_NOISE: f64 = 0.01;

/// The default desk-scale camera: 96x48 pixels.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(60.0, 60.0, 48.0, 24.0, 96, 48).expect("constants are valid")
}

#[derive(Debug, Error, PartialEq)]
pub enum SimWorldError {
    #[error("invalid spec: {0}")]
    InvalidSpec(&'static str),
    #[error("trajectory is degenerate (nonpositive length)")]
    DegenerateTrajectory,
    #[error(transparent)]
    Photometric(#[from] PhotometricError),
}

/// Rendering-domain parameterization of one environment. Environments
/// differ in texture statistics, illumination, box layout, and driving
/// speed, which together control the appearance gap between them.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentSpec {
    pub env_id: usize,
    pub texture_seed: u64,
    /// Ground texture spatial frequency (cells per meter).
    pub texture_frequency: f64,
    /// Texture amplitude around mid gray, in (0, 1].
    pub texture_contrast: f64,
    pub illumination_gain: f64,
    pub illumination_bias: f64,
    /// Expected boxes per meter of trajectory.
    pub box_density: f64,
    /// Box height bounds (meters).
    pub box_heights: (f64, f64),
    /// Driving speed bounds (m/s).
    pub velocity_range: (f64, f64),
    /// Standard deviation of additive image noise (intensity units).
    pub noise_sigma: f64,
}

impl EnvironmentSpec {
    pub fn validate(&self) -> Result<(), SimWorldError> {
        if !(self.illumination_gain > 0.0) {
            return Err(SimWorldError::InvalidSpec("illumination gain must be positive"));
        }
        if !(self.texture_contrast > 0.0 && self.texture_contrast <= 1.0) {
            return Err(SimWorldError::InvalidSpec("contrast must lie in (0, 1]"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(SimWorldError::InvalidSpec("noise sigma must be nonnegative"));
        }
        if !(self.texture_frequency > 0.0) {
            return Err(SimWorldError::InvalidSpec("texture frequency must be positive"));
        }
        if !(self.box_density >= 0.0) {
            return Err(SimWorldError::InvalidSpec("box density must be nonnegative"));
        }
        if !(self.box_heights.0 > 0.0 && self.box_heights.1 >= self.box_heights.0) {
            return Err(SimWorldError::InvalidSpec("box heights must be ordered and positive"));
        }
        if !(self.velocity_range.0 > 0.0 && self.velocity_range.1 >= self.velocity_range.0) {
            return Err(SimWorldError::InvalidSpec("velocity bounds must be ordered and positive"));
        }
        Ok(())
    }
}

/// One drive through an environment.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub scene_id: usize,
    pub waypoint_seed: u64,
    /// Path length (meters).
    pub length: f64,
    /// Curvature bounds (radians per meter).
    pub curvature: (f64, f64),
    /// Close the path back onto its start for loop-closure scenes.
    pub revisit: bool,
    pub frame_rate: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SimWorldError> {
        if !(self.length > 0.0) {
            return Err(SimWorldError::DegenerateTrajectory);
        }
        if !(self.frame_rate > 0.0) {
            return Err(SimWorldError::InvalidSpec("frame rate must be positive"));
        }
        if !(self.curvature.1 >= self.curvature.0) {
            return Err(SimWorldError::InvalidSpec("curvature bounds must be ordered"));
        }
        Ok(())
    }
}

/// A fully rendered scene with exact ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub images: Vec<Image>,
    pub depths: Vec<DepthMap>,
    pub trajectory: Trajectory,
    /// `velocities[i]` is the speed over the interval from frame `i-1` to
    /// frame `i`; entry 0 is zero by convention.
    pub velocities: Vec<f64>,
    pub timestamps: Vec<f64>,
    pub intrinsics: CameraIntrinsics,
    pub env_id: usize,
    pub scene_id: usize,
}

impl RenderedScene {
    /// Checks the cross-array invariants, including that reported speeds
    /// agree with ground-truth pose deltas within 1e-6.
    pub fn validate(&self) -> Result<(), SimWorldError> {
        let n = self.images.len();
        if self.depths.len() != n
            || self.trajectory.len() != n
            || self.velocities.len() != n
            || self.timestamps.len() != n
        {
            return Err(SimWorldError::InvalidSpec("scene arrays must have equal length"));
        }
        for i in 1..n {
            let a = self.trajectory.pose(i - 1).translation();
            let b = self.trajectory.pose(i).translation();
            let dist =
                ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
            let dt = self.timestamps[i] - self.timestamps[i - 1];
            if (dist / dt - self.velocities[i]).abs() > 1e-6 {
                return Err(SimWorldError::InvalidSpec("velocities disagree with pose deltas"));
            }
        }
        Ok(())
    }

    /// View of the scene as a deployment input stream.
    pub fn scene_stream(&self) -> SceneStream {
        SceneStream {
            images: self.images.clone(),
            timestamps: self.timestamps.clone(),
            velocities: self.velocities.clone(),
            env_id: self.env_id,
            scene_id: self.scene_id,
            intrinsics: self.intrinsics,
        }
    }
}

/// Axis-aligned box sitting on the ground plane.
#[derive(Debug, Clone, Copy)]
struct BoxObstacle {
    min: [f64; 3],
    max: [f64; 3],
    tint: f64,
}

/// Integer-lattice hash to [0, 1), SplitMix-style.
fn lattice(seed: u64, xi: i64, zi: i64) -> f64 {
    let mut h = seed
        ^ (xi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (zi as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth 2D value noise in [0, 1): bilinear blend of lattice values with a
/// cubic fade.
fn value_noise(seed: u64, x: f64, z: f64) -> f64 {
    let xf = x.floor();
    let zf = z.floor();
    let (xi, zi) = (xf as i64, zf as i64);
    let fade = |t: f64| t * t * (3.0 - 2.0 * t);
    let (u, v) = (fade(x - xf), fade(z - zf));
    let a = lattice(seed, xi, zi);
    let b = lattice(seed, xi + 1, zi);
    let c = lattice(seed, xi, zi + 1);
    let d = lattice(seed, xi + 1, zi + 1);
    a + (b - a) * u + (c - a) * v + (a - b - c + d) * u * v
}

/// Two-octave texture in [0, 1).
fn texture(seed: u64, frequency: f64, x: f64, z: f64) -> f64 {
    0.65 * value_noise(seed, x * frequency, z * frequency)
        + 0.35 * value_noise(seed ^ 0xA076_1D64_78BD_642F, x * frequency * 2.0, z * frequency * 2.0)
}

/// First intersection of the ray with an axis-aligned box, by the slab
/// method. Returns the entry parameter when it lies ahead of the origin.
fn ray_box(origin: [f64; 3], dir: [f64; 3], b: &BoxObstacle) -> Option<f64> {
    let mut t_min = 1e-9;
    let mut t_max = f64::INFINITY;
    for axis in 0..3 {
        if dir[axis].abs() < 1e-12 {
            if origin[axis] < b.min[axis] || origin[axis] > b.max[axis] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[axis];
        let (t1, t2) = ((b.min[axis] - origin[axis]) * inv, (b.max[axis] - origin[axis]) * inv);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        t_min = t_min.max(lo);
        t_max = t_max.min(hi);
        if t_min > t_max {
            return None;
        }
    }
    Some(t_min)
}

/// Per-step motion plan: speeds and headings of every integration step.
struct PathPlan {
    step_speeds: Vec<f64>,
    step_headings: Vec<f64>,
}

fn sample_range(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn plan_path(env: &EnvironmentSpec, scene: &SceneSpec) -> Result<PathPlan, SimWorldError> {
    let dt = 1.0 / scene.frame_rate;
    let (v_lo, v_hi) = env.velocity_range;
    let mut rng = stream(scene.waypoint_seed, "simworld:path");
    let mut step_speeds = Vec::new();
    let mut step_headings = Vec::new();
    if scene.revisit {
        // Regular polygon: equal steps and equal turns summing to a full
        // revolution return exactly to the start. One extra step makes the
        // last frame coincide with the second frame in both position and
        // heading, so the revisit is a genuinely repeated view.
        let v = 0.5 * (v_lo + v_hi);
        let steps = (scene.length / (v * dt)).round().max(8.0) as usize;
        let turn = TAU / steps as f64 * if rng.random::<bool>() { 1.0 } else { -1.0 };
        let mut heading = rng.random_range(0.0..TAU);
        for _ in 0..=steps {
            step_speeds.push(v);
            step_headings.push(heading);
            heading += turn;
        }
    } else {
        let (k_lo, k_hi) = scene.curvature;
        let mut speed = sample_range(&mut rng, v_lo, v_hi);
        let mut curvature = sample_range(&mut rng, k_lo, k_hi);
        let mut heading = 0.0;
        let mut traveled = 0.0;
        while traveled < scene.length {
            if step_speeds.len() > 200_000 {
                return Err(SimWorldError::InvalidSpec("scene produces too many frames"));
            }
            let ds = speed * dt;
            step_speeds.push(speed);
            step_headings.push(heading);
            heading += curvature * ds;
            traveled += ds;
            speed = (speed + rng.random_range(-1.0..1.0) * 0.03 * (v_hi - v_lo).max(1e-12))
                .clamp(v_lo, v_hi);
            curvature = (curvature + rng.random_range(-1.0..1.0) * 0.15 * (k_hi - k_lo).max(1e-12))
                .clamp(k_lo, k_hi);
        }
    }
    Ok(PathPlan { step_speeds, step_headings })
}

/// Camera pose at a planar position with the given heading, pitched down.
fn camera_pose(x: f64, z: f64, heading: f64) -> Pose3 {
    let yaw = Pose3::from_quat_trans(
        [(heading / 2.0).cos(), 0.0, (heading / 2.0).sin(), 0.0],
        [x, 0.0, z],
    );
    // With y down, tilting the forward axis toward the ground is a
    // negative rotation about the camera x-axis.
    let pitch = Pose3::from_quat_trans(
        [(CAMERA_PITCH / 2.0).cos(), -(CAMERA_PITCH / 2.0).sin(), 0.0, 0.0],
        [0.0, 0.0, 0.0],
    );
    compose(&yaw, &pitch)
}

fn place_boxes(
    env: &EnvironmentSpec,
    scene: &SceneSpec,
    positions: &[[f64; 2]],
    headings: &[f64],
) -> Vec<BoxObstacle> {
    let seed = derive_seed(env.texture_seed, "simworld:boxes") ^ scene.waypoint_seed;
    let mut rng = stream(seed, "simworld:boxes");
    let count = (env.box_density * scene.length).round() as usize;
    let mut boxes = Vec::with_capacity(count);
    'boxes: for _ in 0..count {
        // Rejection-sample a spot beside the path that keeps clearance.
        for _ in 0..8 {
            let at = rng.random_range(0..positions.len());
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let lateral = side * rng.random_range(PATH_CLEARANCE + 1.0..18.0);
            let (sin_h, cos_h) = (headings[at].sin(), headings[at].cos());
            // Heading direction is (sin, cos) in the xz plane; this is its
            // perpendicular.
            let cx = positions[at][0] + lateral * cos_h;
            let cz = positions[at][1] - lateral * sin_h;
            let half_x = rng.random_range(0.4..1.4);
            let half_z = rng.random_range(0.4..1.4);
            let height = sample_range(&mut rng, env.box_heights.0, env.box_heights.1);
            let tint = rng.random_range(0.0..1.0);
            let b = BoxObstacle {
                min: [cx - half_x, CAMERA_HEIGHT - height, cz - half_z],
                max: [cx + half_x, CAMERA_HEIGHT, cz + half_z],
                tint,
            };
            let clear = positions.iter().all(|p| {
                let dx = (b.min[0] - p[0]).max(0.0).max(p[0] - b.max[0]);
                let dz = (b.min[2] - p[1]).max(0.0).max(p[1] - b.max[2]);
                (dx * dx + dz * dz).sqrt() >= PATH_CLEARANCE
            });
            if clear {
                boxes.push(b);
                continue 'boxes;
            }
        }
    }
    boxes
}

fn render_frame(
    pose: &Pose3,
    k: &CameraIntrinsics,
    env: &EnvironmentSpec,
    boxes: &[BoxObstacle],
) -> (Vec<f64>, Vec<f64>) {
    let r = pose.rotation_matrix();
    let origin = pose.translation();
    let box_seed = derive_seed(env.texture_seed, "simworld:boxtex");
    let mut intensity = Vec::with_capacity(k.height * k.width);
    let mut depth = Vec::with_capacity(k.height * k.width);
    for y in 0..k.height {
        for x in 0..k.width {
            // Ray through the pixel center, z-normalized so the ray
            // parameter equals camera-frame depth.
            let dc = [(x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0];
            let dw = [
                r[0][0] * dc[0] + r[0][1] * dc[1] + r[0][2] * dc[2],
                r[1][0] * dc[0] + r[1][1] * dc[1] + r[1][2] * dc[2],
                r[2][0] * dc[0] + r[2][1] * dc[1] + r[2][2] * dc[2],
            ];
            // The pitch bound guarantees a downward ray.
            debug_assert!(dw[1] > 0.0);
            let mut t = (CAMERA_HEIGHT - origin[1]) / dw[1];
            let mut hit_box: Option<&BoxObstacle> = None;
            for b in boxes {
                if let Some(tb) = ray_box(origin, dw, b) {
                    if tb < t {
                        t = tb;
                        hit_box = Some(b);
                    }
                }
            }
            let p = [origin[0] + t * dw[0], origin[1] + t * dw[1], origin[2] + t * dw[2]];
            let albedo = match hit_box {
                None => texture(env.texture_seed, env.texture_frequency, p[0], p[2]),
                Some(b) => {
                    // Offset the sample by the vertical coordinate so box
                    // faces carry texture too.
                    let surface = texture(
                        box_seed,
                        env.texture_frequency * 2.0,
                        p[0] + 0.7 * p[1],
                        p[2] - 0.7 * p[1],
                    );
                    0.5 * b.tint + 0.5 * surface
                }
            };
            let shade = 0.5 + env.texture_contrast * (albedo - 0.5);
            intensity.push((env.illumination_gain * shade + env.illumination_bias).clamp(0.0, 1.0));
            // Depth is carried at f32 precision, matching the on-disk
            // format exactly.
            depth.push(t as f32 as f64);
        }
    }
    (intensity, depth)
}

/// The camera only sees the ground when even its most upward ray (through
/// the top image row) points below the horizon after the fixed downward
/// pitch, which requires `tan(CAMERA_PITCH) > cy / fy`.
pub fn validate_intrinsics(k: &CameraIntrinsics) -> Result<(), SimWorldError> {
    if k.cy / k.fy >= CAMERA_PITCH.tan() {
        return Err(SimWorldError::InvalidSpec(
            "camera field of view reaches the horizon: cy / fy must stay below tan(CAMERA_PITCH)",
        ));
    }
    Ok(())
}

/// Renders a complete scene: a seeded smooth path through the environment,
/// per-frame images with exact depth, ground-truth poses, timestamps, and
/// speeds consistent with the pose deltas.
pub fn generate_scene(
    env: &EnvironmentSpec,
    scene: &SceneSpec,
    k: &CameraIntrinsics,
) -> Result<RenderedScene, SimWorldError> {
    env.validate()?;
    scene.validate()?;
    validate_intrinsics(k)?;
    let dt = 1.0 / scene.frame_rate;
    let plan = plan_path(env, scene)?;

    let mut positions = vec![[0.0, 0.0]];
    let mut headings = vec![plan.step_headings[0]];
    for (v, heading) in plan.step_speeds.iter().zip(&plan.step_headings) {
        let ds = v * dt;
        let last = positions[positions.len() - 1];
        positions.push([last[0] + ds * heading.sin(), last[1] + ds * heading.cos()]);
        headings.push(*heading);
    }
    // Frame i's heading is the direction of its outgoing step; the final
    // frame keeps the last step's heading.
    let boxes = place_boxes(env, scene, &positions, &headings);

    let n = positions.len();
    let mut trajectory = Trajectory::new();
    let mut images = Vec::with_capacity(n);
    let mut depths = Vec::with_capacity(n);
    let mut timestamps = Vec::with_capacity(n);
    let noise_master = derive_seed(env.texture_seed, "simworld:imgnoise");
    for (i, pos) in positions.iter().enumerate() {
        let pose = camera_pose(pos[0], pos[1], headings[i]);
        timestamps.push(i as f64 * dt);
        trajectory.push(timestamps[i], pose).expect("timestamps increase");
        let (mut intensity, depth) = render_frame(&pose, k, env, &boxes);
        if env.noise_sigma > 0.0 {
            let mut rng = stream(noise_master.wrapping_add(i as u64), "simworld:imgnoise");
            for v in &mut intensity {
                let u1: f64 = rng.random::<f64>().max(1e-12);
                let u2: f64 = rng.random();
                let gauss = (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos();
                *v = (*v + env.noise_sigma * gauss).clamp(0.0, 1.0);
            }
        }
        // Intensities are quantized to 8-bit levels so images survive the
        // on-disk grayscale format bit for bit.
        for v in &mut intensity {
            *v = (*v * 255.0).round() / 255.0;
        }
        images.push(Image::new(k.height, k.width, intensity)?);
        depths.push(DepthMap::new(k.height, k.width, depth)?);
    }

    let mut velocities = vec![0.0];
    for i in 1..n {
        let a = trajectory.pose(i - 1).translation();
        let b = trajectory.pose(i).translation();
        let dist = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
        velocities.push(dist / (timestamps[i] - timestamps[i - 1]));
    }

    let rendered = RenderedScene {
        images,
        depths,
        trajectory,
        velocities,
        timestamps,
        intrinsics: *k,
        env_id: env.env_id,
        scene_id: scene.scene_id,
    };
    debug_assert!(rendered.validate().is_ok());
    Ok(rendered)
}

/// Applies seeded multiplicative noise to speed readings, emulating
/// wheel-odometry quality. Entry 0 is left alone. Scenes keep exact speeds
/// unless this is explicitly invoked.
pub fn add_velocity_noise(velocities: &mut [f64], relative_sigma: f64, seed: u64) {
    let mut rng = stream(seed, "simworld:velnoise");
    for v in velocities.iter_mut().skip(1) {
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        let gauss = (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos();
        *v = (*v * (1.0 + relative_sigma * gauss)).max(0.0);
    }
}
