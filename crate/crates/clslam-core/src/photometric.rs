//! View synthesis by image warping and the self-supervised loss stack:
//! min-reprojection photometric error with auto-masking, edge-aware disparity
//! smoothness, and a velocity supervision term.
//!
//! This is the reference (non-differentiable) evaluation path; `toynets`
//! rebuilds the same computation on the autodiff tape and is cross-checked
//! against it.

use crate::geometry::{inverse, CameraIntrinsics, Pose3};
use crate::kernels;
use alloc::vec;
use alloc::vec::Vec;
// Needed for float math in no_std builds; std builds resolve these
// methods inherently and then see this import as unused.
#[allow(unused_imports)]
use num_traits::Float;
use thiserror::Error;

/// Minimum predictable depth in meters; disparity stays in `(0, 1/MIN_DEPTH]`.
pub const MIN_DEPTH: f64 = 0.1;
/// Upper bound of the disparity range.
pub const MAX_DISPARITY: f64 = 1.0 / MIN_DEPTH;
/// SSIM stabilizer constants (0.01^2 and 0.03^2 for unit-range intensities).
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
/// Default SSIM/L1 mixing weight in the dissimilarity.
pub const DEFAULT_ALPHA: f64 = 0.85;
/// Warped points with camera-frame depth at or below this are invalid.
pub const WARP_Z_EPS: f64 = 1e-9;
/// Float-fuzz tolerance when testing projected coordinates against borders.
pub const BORDER_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum PhotometricError {
    #[error("dimension mismatch: expected {expected:?}, got {got:?} (height, width)")]
    DimensionMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("reprojection loss needs at least one source view")]
    NoSources,
    #[error("disparity map has non-positive mean")]
    ZeroMeanDisparity,
    #[error("loss parts must be finite")]
    NonFinite,
    #[error("invalid value: {0}")]
    InvalidValue(&'static str),
}

/// Single-channel intensity image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, PhotometricError> {
        if data.len() != height * width {
            return Err(PhotometricError::InvalidValue("image data length"));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(PhotometricError::InvalidValue("image intensities outside [0, 1]"));
        }
        Ok(Image { height, width, data })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self, PhotometricError> {
        Image::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Per-pixel disparity (1/meters) in `(0, MAX_DISPARITY]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DisparityMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, PhotometricError> {
        if data.len() != height * width {
            return Err(PhotometricError::InvalidValue("disparity data length"));
        }
        if !data
            .iter()
            .all(|v| v.is_finite() && *v > 0.0 && *v <= MAX_DISPARITY + 1e-9)
        {
            return Err(PhotometricError::InvalidValue("disparity outside (0, 1/min_depth]"));
        }
        Ok(DisparityMap { height, width, data })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self, PhotometricError> {
        DisparityMap::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_depth(&self) -> DepthMap {
        DepthMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|d| 1.0 / d).collect(),
        }
    }
}

/// Per-pixel depth in meters, strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, PhotometricError> {
        if data.len() != height * width {
            return Err(PhotometricError::InvalidValue("depth data length"));
        }
        if !data.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(PhotometricError::InvalidValue("depth must be positive"));
        }
        Ok(DepthMap { height, width, data })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self, PhotometricError> {
        DepthMap::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Per-pixel boolean mask. Invariant: `data.len() == height * width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Mask { height, width, data: vec![value; height * width] }
    }

    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

/// Three consecutive frames with the between-frame speeds and timestamps
/// needed by the velocity term. `frames[1]` is the warp target.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTriplet {
    pub frames: [Image; 3],
    /// Speeds (m/s) for the frame pairs (0,1) and (1,2).
    pub velocities: [f64; 2],
    pub timestamps: [f64; 3],
    pub env_id: usize,
    pub scene_id: usize,
    /// Index of the newest frame within its scene.
    pub frame_index: usize,
}

impl ImageTriplet {
    pub fn new(
        frames: [Image; 3],
        velocities: [f64; 2],
        timestamps: [f64; 3],
        env_id: usize,
        scene_id: usize,
        frame_index: usize,
    ) -> Result<Self, PhotometricError> {
        let dims = frames[0].dims();
        if frames[1].dims() != dims || frames[2].dims() != dims {
            return Err(PhotometricError::DimensionMismatch {
                expected: dims,
                got: frames[1].dims(),
            });
        }
        if !(timestamps[0] < timestamps[1] && timestamps[1] < timestamps[2]) {
            return Err(PhotometricError::InvalidValue("timestamps must strictly increase"));
        }
        if !(velocities[0] >= 0.0 && velocities[1] >= 0.0) {
            return Err(PhotometricError::InvalidValue("velocities must be nonnegative"));
        }
        Ok(ImageTriplet { frames, velocities, timestamps, env_id, scene_id, frame_index })
    }
}

/// Weights of the total loss and the dissimilarity constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Smoothness weight.
    pub gamma: f64,
    /// Velocity weight.
    pub lambda: f64,
    /// SSIM share of the dissimilarity; `1 - alpha` goes to L1.
    pub alpha: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { gamma: 0.001, lambda: 0.05, alpha: DEFAULT_ALPHA, c1: SSIM_C1, c2: SSIM_C2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), PhotometricError> {
        if !(self.gamma >= 0.0 && self.lambda >= 0.0) {
            return Err(PhotometricError::InvalidValue("loss weights must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(PhotometricError::InvalidValue("alpha outside [0, 1]"));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(PhotometricError::InvalidValue("SSIM constants must be positive"));
        }
        Ok(())
    }
}

fn check_dims(
    expected: (usize, usize),
    got: (usize, usize),
) -> Result<(), PhotometricError> {
    if expected != got {
        return Err(PhotometricError::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Synthesizes the target view from `source` given the target's depth and the
/// transform `pose_target_to_source` mapping target-frame points into the
/// source camera frame. Returns the reconstruction and its validity mask;
/// masked-out pixels carry intensity 0.
pub fn warp_image(
    source: &Image,
    depth: &DepthMap,
    pose_target_to_source: &Pose3,
    k: &CameraIntrinsics,
) -> Result<(Image, Mask), PhotometricError> {
    check_dims(source.dims(), depth.dims())?;
    check_dims(source.dims(), (k.height, k.width))?;
    let (h, w) = source.dims();
    let mut out = vec![0.0; h * w];
    let mut mask = vec![false; h * w];
    let r = pose_target_to_source.rotation_matrix();
    let t = pose_target_to_source.translation();
    for y in 0..h {
        for x in 0..w {
            let d = depth.at(y, x);
            // Unproject at the pixel center, move into the source frame.
            let px = d * (x as f64 - k.cx) / k.fx;
            let py = d * (y as f64 - k.cy) / k.fy;
            let p = [
                r[0][0] * px + r[0][1] * py + r[0][2] * d + t[0],
                r[1][0] * px + r[1][1] * py + r[1][2] * d + t[1],
                r[2][0] * px + r[2][1] * py + r[2][2] * d + t[2],
            ];
            if p[2] <= WARP_Z_EPS {
                continue;
            }
            let u = kernels::snap_to_grid(k.fx * p[0] / p[2] + k.cx);
            let v = kernels::snap_to_grid(k.fy * p[1] / p[2] + k.cy);
            if u < -BORDER_EPS
                || u > (w - 1) as f64 + BORDER_EPS
                || v < -BORDER_EPS
                || v > (h - 1) as f64 + BORDER_EPS
            {
                continue;
            }
            let uc = u.clamp(0.0, (w - 1) as f64);
            let vc = v.clamp(0.0, (h - 1) as f64);
            out[y * w + x] = kernels::bilinear_sample(source.data(), h, w, uc, vc);
            mask[y * w + x] = true;
        }
    }
    // Bilinear blends of in-range intensities stay in [0, 1].
    let image = Image { height: h, width: w, data: out };
    Ok((image, Mask { height: h, width: w, data: mask }))
}

/// Windowed SSIM map with explicit stabilizers; 3x3 box window with
/// replicate-clamped borders. Values lie in `[-1, 1]`.
pub fn ssim_with(
    a: &Image,
    b: &Image,
    c1: f64,
    c2: f64,
) -> Result<Vec<f64>, PhotometricError> {
    check_dims(a.dims(), b.dims())?;
    let (h, w) = a.dims();
    let aa: Vec<f64> = a.data().iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.data().iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let mu_a = kernels::box3_mean(a.data(), h, w);
    let mu_b = kernels::box3_mean(b.data(), h, w);
    let m_aa = kernels::box3_mean(&aa, h, w);
    let m_bb = kernels::box3_mean(&bb, h, w);
    let m_ab = kernels::box3_mean(&ab, h, w);
    let mut out = vec![0.0; h * w];
    for i in 0..h * w {
        let va = m_aa[i] - mu_a[i] * mu_a[i];
        let vb = m_bb[i] - mu_b[i] * mu_b[i];
        let cov = m_ab[i] - mu_a[i] * mu_b[i];
        out[i] = ((2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2))
            / ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
    }
    Ok(out)
}

/// [`ssim_with`] using the default stabilizers.
pub fn ssim(a: &Image, b: &Image) -> Result<Vec<f64>, PhotometricError> {
    ssim_with(a, b, SSIM_C1, SSIM_C2)
}

/// Per-pixel dissimilarity `alpha * (1 - SSIM)/2 + (1 - alpha) * |a - b|`
/// with explicit SSIM stabilizers.
pub fn dissimilarity_with(
    target: &Image,
    reconstruction: &Image,
    alpha: f64,
    c1: f64,
    c2: f64,
) -> Result<Vec<f64>, PhotometricError> {
    let s = ssim_with(target, reconstruction, c1, c2)?;
    Ok(target
        .data()
        .iter()
        .zip(reconstruction.data())
        .zip(&s)
        .map(|((t, r), sv)| alpha * (1.0 - sv) / 2.0 + (1.0 - alpha) * (t - r).abs())
        .collect())
}

/// [`dissimilarity_with`] using the default stabilizers.
pub fn photometric_dissimilarity(
    target: &Image,
    reconstruction: &Image,
    alpha: f64,
) -> Result<Vec<f64>, PhotometricError> {
    dissimilarity_with(target, reconstruction, alpha, SSIM_C1, SSIM_C2)
}

/// Min-reprojection photometric loss with auto-masking.
///
/// Per pixel, takes the minimum dissimilarity to the warped views over the
/// sources whose warp is valid there (ties keep the lowest source index). The
/// auto-mask accepts a pixel only where that minimum is strictly smaller than
/// the minimum dissimilarity to the unwarped sources, and at least one warp
/// is valid. The loss is the mean of accepted minima, 0 when nothing is
/// accepted.
pub fn reprojection_loss(
    target: &Image,
    sources: &[Image],
    warped: &[Image],
    valid: &[Mask],
    weights: &LossWeights,
) -> Result<(f64, Mask), PhotometricError> {
    if sources.is_empty() {
        return Err(PhotometricError::NoSources);
    }
    if sources.len() != warped.len() || sources.len() != valid.len() {
        return Err(PhotometricError::InvalidValue("sources, warped, valid lengths differ"));
    }
    let (h, w) = target.dims();
    let mut warp_err = Vec::with_capacity(sources.len());
    let mut src_err = Vec::with_capacity(sources.len());
    for i in 0..sources.len() {
        check_dims(target.dims(), sources[i].dims())?;
        check_dims(target.dims(), warped[i].dims())?;
        if valid[i].data.len() != h * w {
            return Err(PhotometricError::DimensionMismatch {
                expected: (h, w),
                got: (valid[i].height, valid[i].width),
            });
        }
        warp_err.push(dissimilarity_with(target, &warped[i], weights.alpha, weights.c1, weights.c2)?);
        src_err.push(dissimilarity_with(target, &sources[i], weights.alpha, weights.c1, weights.c2)?);
    }
    let mut mask = vec![false; h * w];
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..h * w {
        let mut best = f64::INFINITY;
        let mut any_valid = false;
        for s in 0..sources.len() {
            if valid[s].data[p] && warp_err[s][p] < best {
                best = warp_err[s][p];
                any_valid = true;
            }
        }
        let mut best_unwarped = f64::INFINITY;
        for s in 0..sources.len() {
            if src_err[s][p] < best_unwarped {
                best_unwarped = src_err[s][p];
            }
        }
        if any_valid && best < best_unwarped {
            mask[p] = true;
            sum += best;
            count += 1;
        }
    }
    let loss = if count == 0 { 0.0 } else { sum / count as f64 };
    Ok((loss, Mask { height: h, width: w, data: mask }))
}

/// Edge-aware smoothness of the mean-normalized disparity:
/// mean(|dx S*| e^{-|dx I|}) + mean(|dy S*| e^{-|dy I|}), each mean taken
/// over its own forward-difference region.
pub fn smoothness_loss(disparity: &DisparityMap, image: &Image) -> Result<f64, PhotometricError> {
    check_dims(disparity.dims(), image.dims())?;
    let (h, w) = disparity.dims();
    let mean = disparity.data().iter().sum::<f64>() / (h * w) as f64;
    if mean <= 0.0 {
        return Err(PhotometricError::ZeroMeanDisparity);
    }
    let mut x_sum = 0.0;
    for y in 0..h {
        for x in 0..w - 1 {
            let ds = (disparity.at(y, x + 1) - disparity.at(y, x)) / mean;
            let di = image.at(y, x + 1) - image.at(y, x);
            x_sum += ds.abs() * (-di.abs()).exp();
        }
    }
    let mut y_sum = 0.0;
    for y in 0..h - 1 {
        for x in 0..w {
            let ds = (disparity.at(y + 1, x) - disparity.at(y, x)) / mean;
            let di = image.at(y + 1, x) - image.at(y, x);
            y_sum += ds.abs() * (-di.abs()).exp();
        }
    }
    let x_region = (h * (w - 1)) as f64;
    let y_region = ((h - 1) * w) as f64;
    Ok(x_sum / x_region + y_sum / y_region)
}

/// Velocity supervision: for each frame pair, the absolute difference between
/// the predicted translation magnitude and speed times time delta.
/// `rel_prev_mid` is the relative pose for the (0,1) pair, `rel_mid_next` for
/// (1,2); translation magnitude is direction-agnostic.
pub fn velocity_loss(rel_prev_mid: &Pose3, rel_mid_next: &Pose3, triplet: &ImageTriplet) -> f64 {
    let norm = |p: &Pose3| {
        let t = p.translation();
        (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt()
    };
    let dt0 = triplet.timestamps[1] - triplet.timestamps[0];
    let dt1 = triplet.timestamps[2] - triplet.timestamps[1];
    (norm(rel_prev_mid) - triplet.velocities[0] * dt0).abs()
        + (norm(rel_mid_next) - triplet.velocities[1] * dt1).abs()
}

/// Unweighted loss terms plus bookkeeping from a full triplet evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub photometric: f64,
    pub smoothness: f64,
    pub velocity: f64,
    pub total: f64,
    pub mask: Mask,
}

/// Weighted total `L_pr + gamma * L_sm + lambda * L_vel`.
pub fn total_loss(
    photometric: f64,
    smoothness: f64,
    velocity: f64,
    weights: &LossWeights,
) -> Result<f64, PhotometricError> {
    let total = photometric + weights.gamma * smoothness + weights.lambda * velocity;
    if !total.is_finite() {
        return Err(PhotometricError::NonFinite);
    }
    Ok(total)
}

/// Full self-supervised objective for one triplet: warps both neighbor frames
/// onto the middle frame and combines the three loss terms.
///
/// `rel_prev_mid` is the relative pose of frame 1 in frame 0's coordinates
/// (the odometry increment 0 -> 1); `rel_mid_next` likewise for 1 -> 2. As a
/// point transform, an increment maps later-frame coordinates into the
/// earlier frame, so warping frame 0 uses it directly and warping frame 2
/// uses its inverse.
pub fn evaluate_triplet(
    triplet: &ImageTriplet,
    disparity_mid: &DisparityMap,
    rel_prev_mid: &Pose3,
    rel_mid_next: &Pose3,
    k: &CameraIntrinsics,
    weights: &LossWeights,
) -> Result<LossBreakdown, PhotometricError> {
    weights.validate()?;
    let depth = disparity_mid.to_depth();
    let (warp_prev, mask_prev) = warp_image(&triplet.frames[0], &depth, rel_prev_mid, k)?;
    let (warp_next, mask_next) =
        warp_image(&triplet.frames[2], &depth, &inverse(rel_mid_next), k)?;
    let sources = [triplet.frames[0].clone(), triplet.frames[2].clone()];
    let warped = [warp_prev, warp_next];
    let valid = [mask_prev, mask_next];
    let (photometric, mask) =
        reprojection_loss(&triplet.frames[1], &sources, &warped, &valid, weights)?;
    let smoothness = smoothness_loss(disparity_mid, &triplet.frames[1])?;
    let velocity = velocity_loss(rel_prev_mid, rel_mid_next, triplet);
    let total = total_loss(photometric, smoothness, velocity, weights)?;
    Ok(LossBreakdown { photometric, smoothness, velocity, total, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Twist};
    use rand::Rng;

    fn random_image(h: usize, w: usize, tag: &str) -> Image {
        let mut rng = crate::rng::stream(42, tag);
        Image::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn test_intrinsics(h: usize, w: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(
            w as f64 * 0.9,
            w as f64 * 0.9,
            w as f64 / 2.0,
            h as f64 / 2.0,
            w,
            h,
        )
        .unwrap()
    }

    #[test]
    fn warp_identity_motion_copies_image_exactly() {
        let img = random_image(12, 16, "photo:ident");
        let depth = DepthMap::constant(12, 16, 2.5).unwrap();
        let k = test_intrinsics(12, 16);
        let (out, mask) = warp_image(&img, &depth, &Pose3::identity(), &k).unwrap();
        assert_eq!(out.data(), img.data());
        assert_eq!(mask.count_true(), 12 * 16);
    }

    #[test]
    fn warp_all_points_behind_camera_masks_everything() {
        let img = random_image(8, 8, "photo:behind");
        let depth = DepthMap::constant(8, 8, 2.0).unwrap();
        let k = test_intrinsics(8, 8);
        let pose = Pose3::from_translation([0.0, 0.0, -100.0]);
        let (out, mask) = warp_image(&img, &depth, &pose, &k).unwrap();
        assert_eq!(mask.count_true(), 0);
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn warp_small_shift_marks_offscreen_columns_invalid() {
        let img = random_image(8, 8, "photo:shift");
        let depth = DepthMap::constant(8, 8, 1.0).unwrap();
        let k = CameraIntrinsics::new(4.0, 4.0, 4.0, 4.0, 8, 8).unwrap();
        // Camera translated so target pixels project one pixel to the right
        // in the source: u = x + fx*tx/d = x + 1.
        let pose = Pose3::from_translation([0.25, 0.0, 0.0]);
        let (out, mask) = warp_image(&img, &depth, &pose, &k).unwrap();
        for y in 0..8 {
            // Rightmost column projects to u = 8, outside the source.
            assert!(!mask.at(y, 7));
            for x in 0..7 {
                assert!(mask.at(y, x));
                assert_eq!(out.at(y, x), img.at(y, x + 1));
            }
        }
    }

    #[test]
    fn warp_dimension_mismatch_rejected() {
        let img = random_image(8, 8, "photo:dims");
        let depth = DepthMap::constant(4, 8, 1.0).unwrap();
        let k = test_intrinsics(8, 8);
        assert!(matches!(
            warp_image(&img, &depth, &Pose3::identity(), &k),
            Err(PhotometricError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn ssim_of_image_with_itself_is_one() {
        let img = random_image(10, 14, "photo:ssim1");
        let s = ssim(&img, &img).unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_constant_zero_vs_one_matches_closed_form() {
        let a = Image::constant(6, 6, 0.0).unwrap();
        let b = Image::constant(6, 6, 1.0).unwrap();
        let s = ssim(&a, &b).unwrap();
        let expected = SSIM_C1 / (1.0 + SSIM_C1);
        for v in s {
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let a = random_image(9, 11, "photo:sym-a");
        let b = random_image(9, 11, "photo:sym-b");
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert_eq!(ab, ba);
        for v in ab {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn dissimilarity_identical_images_zero() {
        let img = random_image(8, 8, "photo:dis0");
        let d = photometric_dissimilarity(&img, &img, DEFAULT_ALPHA).unwrap();
        for v in d {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn dissimilarity_pure_l1_branch() {
        let a = Image::constant(5, 5, 0.6).unwrap();
        let b = Image::constant(5, 5, 0.3).unwrap();
        let d = photometric_dissimilarity(&a, &b, 0.0).unwrap();
        for v in d {
            assert!((v - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn dissimilarity_stays_in_unit_range() {
        for alpha in [0.0, 0.5, 0.85, 1.0] {
            let a = random_image(10, 10, "photo:rng-a");
            let b = random_image(10, 10, "photo:rng-b");
            let d = photometric_dissimilarity(&a, &b, alpha).unwrap();
            for v in d {
                assert!((0.0..=1.0).contains(&v), "alpha {alpha} value {v}");
            }
        }
    }

    #[test]
    fn reprojection_static_triplet_masks_everything_out() {
        // Identical target / sources / warps tie everywhere; the strict
        // inequality rejects every pixel and the loss collapses to zero.
        let img = random_image(8, 10, "photo:static");
        let m = Mask::filled(8, 10, true);
        let (loss, mask) = reprojection_loss(
            &img,
            &[img.clone(), img.clone()],
            &[img.clone(), img.clone()],
            &[m.clone(), m],
            &LossWeights::default(),
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(mask.count_true(), 0);
    }

    #[test]
    fn reprojection_perfect_warp_accepts_everything() {
        let target = random_image(8, 10, "photo:perfect");
        let source = Image::constant(8, 10, 1.0).unwrap();
        let m = Mask::filled(8, 10, true);
        let (loss, mask) = reprojection_loss(
            &target,
            &[source],
            &[target.clone()],
            &[m],
            &LossWeights::default(),
        )
        .unwrap();
        assert_eq!(mask.count_true(), 8 * 10);
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn reprojection_min_over_sources_bounds_single_source_loss() {
        // With identical constant sources (far from the target) the automask
        // accepts every pixel in every configuration, so the mean of per-pixel
        // minima is bounded by each single-source mean.
        let target = random_image(8, 10, "photo:min");
        let mut rng = crate::rng::stream(4, "photo:min-noise");
        let perturb = |img: &Image, scale: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            let data = img
                .data()
                .iter()
                .map(|v| (v + rng.random_range(-scale..scale)).clamp(0.0, 0.5))
                .collect();
            Image::new(8, 10, data).unwrap()
        };
        let w1 = perturb(&target, 0.05, &mut rng);
        let w2 = perturb(&target, 0.12, &mut rng);
        let far = Image::constant(8, 10, 1.0).unwrap();
        let m = Mask::filled(8, 10, true);
        let weights = LossWeights::default();
        let (both, mask) = reprojection_loss(
            &target,
            &[far.clone(), far.clone()],
            &[w1.clone(), w2.clone()],
            &[m.clone(), m.clone()],
            &weights,
        )
        .unwrap();
        assert_eq!(mask.count_true(), 8 * 10);
        let (only1, _) =
            reprojection_loss(&target, &[far.clone()], &[w1], &[m.clone()], &weights).unwrap();
        let (only2, _) = reprojection_loss(&target, &[far], &[w2], &[m], &weights).unwrap();
        assert!(both <= only1 + 1e-15);
        assert!(both <= only2 + 1e-15);
    }

    #[test]
    fn reprojection_requires_sources() {
        let img = random_image(4, 4, "photo:nosrc");
        assert!(matches!(
            reprojection_loss(&img, &[], &[], &[], &LossWeights::default()),
            Err(PhotometricError::NoSources)
        ));
    }

    #[test]
    fn reprojection_invalid_pixels_are_excluded() {
        // Single source whose warp is perfect but only valid on the left
        // half; the mask must not accept the right half.
        let target = random_image(6, 8, "photo:half");
        let source = Image::constant(6, 8, 1.0).unwrap();
        let mut m = Mask::filled(6, 8, false);
        for y in 0..6 {
            for x in 0..4 {
                m.data[y * 8 + x] = true;
            }
        }
        let (loss, mask) = reprojection_loss(
            &target,
            &[source],
            &[target.clone()],
            &[m],
            &LossWeights::default(),
        )
        .unwrap();
        assert_eq!(mask.count_true(), 24);
        for y in 0..6 {
            for x in 4..8 {
                assert!(!mask.at(y, x));
            }
        }
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn smoothness_constant_disparity_is_zero() {
        let d = DisparityMap::constant(6, 6, 3.0).unwrap();
        let img = random_image(6, 6, "photo:smc");
        assert_eq!(smoothness_loss(&d, &img).unwrap(), 0.0);
    }

    #[test]
    fn smoothness_linear_ramp_hand_evaluated() {
        // S(y, x) = 1 + 0.5 x on a 4x4 grid, constant image.
        // mean = 1.75; every x-difference of S* is 0.5/1.75; y-differences 0.
        // Loss = 0.5 / 1.75 = 2/7.
        let mut data = vec![0.0; 16];
        for y in 0..4 {
            for x in 0..4 {
                data[y * 4 + x] = 1.0 + 0.5 * x as f64;
            }
        }
        let d = DisparityMap::new(4, 4, data).unwrap();
        let img = Image::constant(4, 4, 0.5).unwrap();
        let loss = smoothness_loss(&d, &img).unwrap();
        assert!((loss - 2.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn smoothness_edge_weight_hand_evaluated() {
        // 2x2: S columns (1, 2), image columns (0, 1). S* = (2/3, 4/3);
        // x-term mean = (2/3) e^{-1}; no y variation.
        let d = DisparityMap::new(2, 2, vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        let img = Image::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let loss = smoothness_loss(&d, &img).unwrap();
        assert!((loss - (2.0 / 3.0) * (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn smoothness_invariant_under_disparity_scaling() {
        let mut rng = crate::rng::stream(8, "photo:scale");
        let data: Vec<f64> = (0..48).map(|_| rng.random_range(0.5..5.0)).collect();
        let d1 = DisparityMap::new(6, 8, data.clone()).unwrap();
        let d2 = DisparityMap::new(6, 8, data.iter().map(|v| v * 1.9).collect()).unwrap();
        let img = random_image(6, 8, "photo:scale-img");
        let a = smoothness_loss(&d1, &img).unwrap();
        let b = smoothness_loss(&d2, &img).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn velocity_loss_examples() {
        let img = random_image(4, 4, "photo:vel");
        let triplet = ImageTriplet::new(
            [img.clone(), img.clone(), img],
            [2.0, 2.0],
            [0.0, 0.5, 1.0],
            0,
            0,
            2,
        )
        .unwrap();
        let exact = Pose3::from_translation([0.0, 0.0, 1.0]);
        assert_eq!(velocity_loss(&exact, &exact, &triplet), 0.0);
        let short = Pose3::from_translation([0.0, 0.0, 0.8]);
        let loss = velocity_loss(&short, &short, &triplet);
        assert!((loss - 0.4).abs() < 1e-12);
        let still = ImageTriplet::new(
            [
                Image::constant(4, 4, 0.1).unwrap(),
                Image::constant(4, 4, 0.1).unwrap(),
                Image::constant(4, 4, 0.1).unwrap(),
            ],
            [0.0, 0.0],
            [0.0, 0.5, 1.0],
            0,
            0,
            2,
        )
        .unwrap();
        assert_eq!(velocity_loss(&Pose3::identity(), &Pose3::identity(), &still), 0.0);
    }

    #[test]
    fn velocity_magnitude_ignores_direction() {
        let img = random_image(4, 4, "photo:vdir");
        let triplet = ImageTriplet::new(
            [img.clone(), img.clone(), img],
            [1.0, 1.0],
            [0.0, 1.0, 2.0],
            0,
            0,
            2,
        )
        .unwrap();
        let fwd = se3_exp(&Twist::new([0.0, 0.3, 0.0], [0.0, 0.0, 1.0]));
        let inv = crate::geometry::inverse(&fwd);
        let a = velocity_loss(&fwd, &fwd, &triplet);
        let b = velocity_loss(&inv, &inv, &triplet);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weighted_sum() {
        let w = LossWeights::default();
        let total = total_loss(0.5, 10.0, 2.0, &w).unwrap();
        assert!((total - 0.61).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        let bare = LossWeights { gamma: 0.0, lambda: 0.0, ..w };
        assert_eq!(total_loss(0.7, 5.0, 9.0, &bare).unwrap(), 0.7);
        assert!(matches!(
            total_loss(f64::NAN, 0.0, 0.0, &w),
            Err(PhotometricError::NonFinite)
        ));
    }

    #[test]
    fn triplet_constructor_validates() {
        let img = || Image::constant(4, 4, 0.2).unwrap();
        assert!(ImageTriplet::new(
            [img(), img(), img()],
            [1.0, 1.0],
            [0.0, 0.0, 1.0],
            0,
            0,
            2
        )
        .is_err());
        assert!(ImageTriplet::new(
            [img(), img(), img()],
            [-1.0, 1.0],
            [0.0, 0.5, 1.0],
            0,
            0,
            2
        )
        .is_err());
    }

    #[test]
    fn evaluate_triplet_static_scene_reduces_to_weighted_smoothness() {
        // Identical frames and identity motion: photometric masks out, the
        // velocity term is zero, only smoothness remains.
        let img = random_image(8, 12, "photo:full");
        let triplet = ImageTriplet::new(
            [img.clone(), img.clone(), img.clone()],
            [0.0, 0.0],
            [0.0, 0.1, 0.2],
            0,
            0,
            2,
        )
        .unwrap();
        let mut rng = crate::rng::stream(2, "photo:full-disp");
        let disp =
            DisparityMap::new(8, 12, (0..96).map(|_| rng.random_range(0.5..5.0)).collect())
                .unwrap();
        let k = test_intrinsics(8, 12);
        let w = LossWeights::default();
        let out = evaluate_triplet(&triplet, &disp, &Pose3::identity(), &Pose3::identity(), &k, &w)
            .unwrap();
        assert_eq!(out.photometric, 0.0);
        assert_eq!(out.velocity, 0.0);
        assert_eq!(out.mask.count_true(), 0);
        let sm = smoothness_loss(&disp, &img).unwrap();
        assert!((out.total - w.gamma * sm).abs() < 1e-15);
    }

    #[test]
    fn disparity_range_validation() {
        assert!(DisparityMap::constant(2, 2, 0.0).is_err());
        assert!(DisparityMap::constant(2, 2, 10.5).is_err());
        assert!(DisparityMap::constant(2, 2, 10.0).is_ok());
        assert!(DisparityMap::constant(2, 2, 1e-4).is_ok());
    }
}
