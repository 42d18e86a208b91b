//! SE(3) group operations, pinhole camera projection, and trajectory
//! containers underlying warping, odometry composition, and graph
//! optimization.
//!
//! Rotations are stored as unit quaternions `(w, x, y, z)` and renormalized
//! after every composition so orthonormality cannot drift over long
//! deployments. Twists order the rotational part (axis-angle, radians) before
//! the translational part (meters); `se3_exp`/`se3_log` use the closed-form
//! Rodrigues + V-matrix maps with Taylor branches below an angle of 1e-8.

use crate::linalg::{
    dot3, hat3, mat3_add, mat3_mul, mat3_scale, mat3_transpose, mat3_vec, norm3, scale3, sub3,
    Mat3, Vec3, MAT3_IDENTITY,
};
use alloc::vec::Vec;
// Needed for float math in no_std builds; std builds resolve these
// methods inherently and then see this import as unused.
#[allow(unused_imports)]
use num_traits::Float;
use thiserror::Error;

/// Angle threshold below which exp/log switch to Taylor series.
pub const SMALL_ANGLE: f64 = 1e-8;
/// `se3_log` rejects rotations with angle at or above `pi - NEAR_PI_MARGIN`.
pub const NEAR_PI_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("rotation angle {angle} too close to pi for a stable log")]
    AngleNearPi { angle: f64 },
    #[error("point behind camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("non-positive depth {depth}")]
    NonPositiveDepth { depth: f64 },
    #[error("timestamps must be strictly increasing (violated at index {index})")]
    NonIncreasingTime { index: usize },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
}

/// Rigid transform in SE(3): rotation as a unit quaternion plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose3 {
    rotation: [f64; 4],
    translation: Vec3,
}

/// Tangent-space element: axis-angle rotation and translation parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rot: Vec3,
    pub trans: Vec3,
}

impl Twist {
    pub const ZERO: Twist = Twist { rot: [0.0; 3], trans: [0.0; 3] };

    pub fn new(rot: Vec3, trans: Vec3) -> Self {
        Twist { rot, trans }
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Twist { rot: [v[0], v[1], v[2]], trans: [v[3], v[4], v[5]] }
    }

    pub fn to_array(self) -> [f64; 6] {
        [
            self.rot[0], self.rot[1], self.rot[2], self.trans[0], self.trans[1], self.trans[2],
        ]
    }
}

fn quat_normalize(q: [f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    debug_assert!(n > 1e-12, "degenerate quaternion");
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

fn quat_conj(q: [f64; 4]) -> [f64; 4] {
    [q[0], -q[1], -q[2], -q[3]]
}

fn quat_rotate(q: [f64; 4], v: Vec3) -> Vec3 {
    // v' = v + 2 qv x (qv x v + w v)
    let qv = [q[1], q[2], q[3]];
    let cross = |a: Vec3, b: Vec3| -> Vec3 {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    };
    let t = cross(qv, [v[0] + 0.0, v[1], v[2]]);
    let t = [t[0] + q[0] * v[0], t[1] + q[0] * v[1], t[2] + q[0] * v[2]];
    let c = cross(qv, t);
    [v[0] + 2.0 * c[0], v[1] + 2.0 * c[1], v[2] + 2.0 * c[2]]
}

impl Pose3 {
    pub fn identity() -> Self {
        Pose3 { rotation: [1.0, 0.0, 0.0, 0.0], translation: [0.0; 3] }
    }

    /// Builds a pose from a quaternion (normalized here) and a translation.
    pub fn from_quat_trans(q: [f64; 4], t: Vec3) -> Self {
        Pose3 { rotation: quat_normalize(q), translation: t }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Pose3 { rotation: [1.0, 0.0, 0.0, 0.0], translation: t }
    }

    pub fn rotation_quat(&self) -> [f64; 4] {
        self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        let [w, x, y, z] = self.rotation;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Rotation angle in [0, pi].
    pub fn rotation_angle(&self) -> f64 {
        let w = self.rotation[0].abs();
        let n = (self.rotation[1] * self.rotation[1]
            + self.rotation[2] * self.rotation[2]
            + self.rotation[3] * self.rotation[3])
            .sqrt();
        2.0 * n.atan2(w)
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        let r = quat_rotate(self.rotation, p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    /// Row-major 3x4 `[R|t]` flattened to 12 numbers (pose text convention).
    pub fn to_matrix_rows(&self) -> [f64; 12] {
        let r = self.rotation_matrix();
        let t = self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
            r[2][2], t[2],
        ]
    }

    /// Inverse of [`Pose3::to_matrix_rows`]; the rotation block is converted
    /// through a quaternion and renormalized, tolerating mild round-off.
    pub fn from_matrix_rows(m: &[f64; 12]) -> Self {
        let r = [
            [m[0], m[1], m[2]],
            [m[4], m[5], m[6]],
            [m[8], m[9], m[10]],
        ];
        let t = [m[3], m[7], m[11]];
        Pose3::from_quat_trans(mat3_to_quat(&r), t)
    }
}

/// Quaternion from a rotation matrix (Shepperd's method: branch on the
/// largest of trace/diagonal for numerical stability).
fn mat3_to_quat(r: &Mat3) -> [f64; 4] {
    let trace = r[0][0] + r[1][1] + r[2][2];
    if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (r[2][1] - r[1][2]) / s,
            (r[0][2] - r[2][0]) / s,
            (r[1][0] - r[0][1]) / s,
        ]
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
        [
            (r[2][1] - r[1][2]) / s,
            0.25 * s,
            (r[0][1] + r[1][0]) / s,
            (r[0][2] + r[2][0]) / s,
        ]
    } else if r[1][1] > r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
        [
            (r[0][2] - r[2][0]) / s,
            (r[0][1] + r[1][0]) / s,
            0.25 * s,
            (r[1][2] + r[2][1]) / s,
        ]
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
        [
            (r[1][0] - r[0][1]) / s,
            (r[0][2] + r[2][0]) / s,
            (r[1][2] + r[2][1]) / s,
            0.25 * s,
        ]
    }
}

/// Group product `a * b` (apply `b` in `a`'s frame), renormalized.
pub fn compose(a: &Pose3, b: &Pose3) -> Pose3 {
    let q = quat_normalize(quat_mul(a.rotation, b.rotation));
    let t = a.transform_point(b.translation);
    Pose3 { rotation: q, translation: t }
}

pub fn inverse(p: &Pose3) -> Pose3 {
    let qi = quat_conj(p.rotation);
    let ti = quat_rotate(qi, p.translation);
    Pose3 { rotation: qi, translation: [-ti[0], -ti[1], -ti[2]] }
}

/// Relative pose of `b` expressed in `a`'s frame: `a^-1 * b`.
pub fn relative(a: &Pose3, b: &Pose3) -> Pose3 {
    compose(&inverse(a), b)
}

/// Rotation-series coefficients A = sin(t)/t, B = (1-cos(t))/t^2,
/// C = (1-A)/t^2 as functions of theta^2, with Taylor branches below
/// `SMALL_ANGLE`^2. Shared convention with the differentiable pose graph in
/// `toynets`, which mirrors these formulas on the tape.
pub fn so3_coefficients(theta_sq: f64) -> (f64, f64, f64) {
    if theta_sq < SMALL_ANGLE * SMALL_ANGLE {
        let s = theta_sq;
        (
            1.0 - s / 6.0 + s * s / 120.0,
            0.5 - s / 24.0 + s * s / 720.0,
            1.0 / 6.0 - s / 120.0 + s * s / 5040.0,
        )
    } else {
        let theta = theta_sq.sqrt();
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / theta_sq;
        (a, b, (1.0 - a) / theta_sq)
    }
}

/// Closed-form exponential map (Rodrigues + V-matrix). `exp(0)` is the
/// identity pose.
pub fn se3_exp(xi: &Twist) -> Pose3 {
    let w = xi.rot;
    let theta_sq = dot3(w, w);
    let theta = theta_sq.sqrt();

    // Quaternion from axis-angle: (cos(t/2), sinc-like * w).
    let (qw, k) = if theta < SMALL_ANGLE {
        // sin(t/2)/t = 1/2 - t^2/48 + t^4/3840
        (
            1.0 - theta_sq / 8.0 + theta_sq * theta_sq / 384.0,
            0.5 - theta_sq / 48.0 + theta_sq * theta_sq / 3840.0,
        )
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    let q = quat_normalize([qw, k * w[0], k * w[1], k * w[2]]);

    let (_, b, c) = so3_coefficients(theta_sq);
    let h = hat3(w);
    let h2 = mat3_mul(&h, &h);
    let v = mat3_add(
        &MAT3_IDENTITY,
        &mat3_add(&mat3_scale(&h, b), &mat3_scale(&h2, c)),
    );
    Pose3 { rotation: q, translation: mat3_vec(&v, xi.trans) }
}

/// Logarithm map; inverse of [`se3_exp`] for angles below `pi`.
pub fn se3_log(p: &Pose3) -> Result<Twist, GeometryError> {
    // Canonicalize the double cover so w >= 0 and the angle lands in [0, pi].
    let mut q = p.rotation;
    if q[0] < 0.0 {
        q = [-q[0], -q[1], -q[2], -q[3]];
    }
    let n = (q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let angle = 2.0 * n.atan2(q[0]);
    if angle >= core::f64::consts::PI - NEAR_PI_MARGIN {
        return Err(GeometryError::AngleNearPi { angle });
    }
    let factor = if n < 1e-9 {
        // 2*atan(n/w)/n = (2/w) (1 - (n/w)^2/3 + ...)
        (2.0 / q[0]) * (1.0 - n * n / (3.0 * q[0] * q[0]))
    } else {
        angle / n
    };
    let w = [q[1] * factor, q[2] * factor, q[3] * factor];

    let theta_sq = dot3(w, w);
    // V^-1 = I - hat/2 + D hat^2, D = (1 - A/(2B)) / theta^2.
    let d = if theta_sq < SMALL_ANGLE * SMALL_ANGLE {
        1.0 / 12.0 + theta_sq / 720.0 + theta_sq * theta_sq / 30240.0
    } else {
        let (a, b, _) = so3_coefficients(theta_sq);
        (1.0 - a / (2.0 * b)) / theta_sq
    };
    let h = hat3(w);
    let h2 = mat3_mul(&h, &h);
    let vinv = mat3_add(
        &MAT3_IDENTITY,
        &mat3_add(&mat3_scale(&h, -0.5), &mat3_scale(&h2, d)),
    );
    Ok(Twist { rot: w, trans: mat3_vec(&vinv, p.translation) })
}

/// Pinhole camera intrinsics (pixels). Integer pixel coordinates address
/// sample centers; `(cx, cy)` is expressed in the same grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive"));
        }
        if !(cx >= 0.0 && cx < width as f64) {
            return Err(GeometryError::InvalidIntrinsics("cx outside image"));
        }
        if !(cy >= 0.0 && cy < height as f64) {
            return Err(GeometryError::InvalidIntrinsics("cy outside image"));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy, width, height })
    }
}

/// Projects a camera-frame point onto the image plane.
pub fn project_point(p: Vec3, k: &CameraIntrinsics) -> Result<[f64; 2], GeometryError> {
    if p[2] <= 0.0 {
        return Err(GeometryError::BehindCamera { z: p[2] });
    }
    Ok([k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy])
}

/// Lifts a pixel at the given depth into the camera frame.
pub fn unproject_pixel(
    p: [f64; 2],
    depth: f64,
    k: &CameraIntrinsics,
) -> Result<Vec3, GeometryError> {
    if depth <= 0.0 {
        return Err(GeometryError::NonPositiveDepth { depth });
    }
    Ok([
        depth * (p[0] - k.cx) / k.fx,
        depth * (p[1] - k.cy) / k.fy,
        depth,
    ])
}

/// Time-stamped pose sequence with strictly increasing timestamps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    entries: Vec<(f64, Pose3)>,
}

impl Trajectory {
    pub fn new() -> Self {
        Trajectory { entries: Vec::new() }
    }

    pub fn push(&mut self, timestamp: f64, pose: Pose3) -> Result<(), GeometryError> {
        if let Some(&(last, _)) = self.entries.last() {
            if timestamp <= last {
                return Err(GeometryError::NonIncreasingTime { index: self.entries.len() });
            }
        }
        self.entries.push((timestamp, pose));
        Ok(())
    }

    /// Builds a trajectory from index timestamps (0, 1, 2, ...), for pose
    /// sources without timing information.
    pub fn from_poses(poses: impl IntoIterator<Item = Pose3>) -> Self {
        let entries = poses
            .into_iter()
            .enumerate()
            .map(|(i, p)| (i as f64, p))
            .collect();
        Trajectory { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pose(&self, i: usize) -> &Pose3 {
        &self.entries[i].1
    }

    pub fn timestamp(&self, i: usize) -> f64 {
        self.entries[i].0
    }

    pub fn iter(&self) -> impl Iterator<Item = &(f64, Pose3)> {
        self.entries.iter()
    }

    pub fn poses(&self) -> impl Iterator<Item = &Pose3> {
        self.entries.iter().map(|(_, p)| p)
    }
}

/// Largest absolute component difference between two poses, comparing the
/// rotation matrices and translations. Test / diagnostics helper.
pub fn pose_distance(a: &Pose3, b: &Pose3) -> f64 {
    let ra = a.rotation_matrix();
    let rb = b.rotation_matrix();
    let mut d: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            d = d.max((ra[i][j] - rb[i][j]).abs());
        }
        d = d.max((a.translation[i] - b.translation[i]).abs());
    }
    d
}

/// Frobenius orthonormality defect of the pose's rotation matrix plus its
/// determinant error; used by invariant tests.
pub fn orthonormality_defect(p: &Pose3) -> f64 {
    let r = p.rotation_matrix();
    let rt = mat3_transpose(&r);
    let id = mat3_mul(&rt, &r);
    let mut d: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            d = d.max((id[i][j] - target).abs());
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    d.max((det - 1.0).abs())
}

#[allow(unused)]
fn vec3_sub_for_tests(a: Vec3, b: Vec3) -> Vec3 {
    sub3(a, b)
}

#[allow(unused)]
fn vec3_norm_for_tests(a: Vec3) -> f64 {
    norm3(a)
}

#[allow(unused)]
fn vec3_scale_for_tests(a: Vec3, s: f64) -> Vec3 {
    scale3(a, s)
}
