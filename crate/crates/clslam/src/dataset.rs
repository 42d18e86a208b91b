//! On-disk dataset layout, one directory per scene:
//!
//! - `calib.txt`: `fx fy cx cy width height` on one line
//! - `times.txt`: one timestamp (seconds) per line
//! - `velocities.txt`: one speed (m/s) per line, aligned to frames
//! - `images/NNNNNN.pgm`: binary 8-bit grayscale, zero-padded 6-digit index
//! - `depth/NNNNNN.bin`: little-endian f32, row-major (optional)
//! - `poses_gt.txt`: one 12-number row-major `[R|t]` line per frame (optional)
//!
//! Floats in text files use the shortest round-tripping decimal form, so
//! write-then-read returns the written scene exactly. All files are synced
//! to disk before a write returns.

use clslam_core::adaptation::SceneStream;
use clslam_core::geometry::{CameraIntrinsics, Pose3, Trajectory};
use clslam_core::photometric::{DepthMap, Image};
use clslam_core::simworld::RenderedScene;
use clslam_core::toynets::{decode_checkpoint, encode_checkpoint, NetConfig, NetKind, ParamVector};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("parse error in {file}: {detail}")]
    ParseError { file: PathBuf, detail: String },
    #[error("inconsistent lengths: {0}")]
    InconsistentLengths(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A scene read back from disk. Depth and ground-truth poses are optional:
/// without them the scene still deploys, it just cannot be scored.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedScene {
    pub images: Vec<Image>,
    pub timestamps: Vec<f64>,
    pub velocities: Vec<f64>,
    pub intrinsics: CameraIntrinsics,
    pub depths: Option<Vec<DepthMap>>,
    pub ground_truth: Option<Trajectory>,
}

impl LoadedScene {
    pub fn has_ground_truth(&self) -> bool {
        self.ground_truth.is_some()
    }

    /// View as a deployment input stream. Environment and scene ids are not
    /// part of the on-disk layout, so the caller supplies them.
    pub fn scene_stream(&self, env_id: usize, scene_id: usize) -> SceneStream {
        SceneStream {
            images: self.images.clone(),
            timestamps: self.timestamps.clone(),
            velocities: self.velocities.clone(),
            env_id,
            scene_id,
            intrinsics: self.intrinsics,
        }
    }
}

/// Writes bytes and syncs the file before returning.
fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let mut f = File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}

fn sync_dir(path: &Path) -> Result<(), DatasetError> {
    File::open(path)?.sync_all()?;
    Ok(())
}

fn float_lines(values: &[f64]) -> String {
    let mut out = String::new();
    for v in values {
        let _ = writeln!(out, "{v}");
    }
    out
}

fn encode_pgm(image: &Image) -> Vec<u8> {
    let (h, w) = image.dims();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

fn encode_depth(depth: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(depth.data().len() * 4);
    for v in depth.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

fn pose_line(pose: &Pose3) -> String {
    let rows = pose.to_matrix_rows();
    let mut out = String::new();
    for (i, value) in rows.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{value}");
    }
    out.push('\n');
    out
}

pub fn write_dataset(scene: &RenderedScene, dir: &Path) -> Result<(), DatasetError> {
    let images_dir = dir.join("images");
    let depth_dir = dir.join("depth");
    fs::create_dir_all(&images_dir)?;
    fs::create_dir_all(&depth_dir)?;

    let k = &scene.intrinsics;
    write_file(
        &dir.join("calib.txt"),
        format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height).as_bytes(),
    )?;
    write_file(&dir.join("times.txt"), float_lines(&scene.timestamps).as_bytes())?;
    write_file(&dir.join("velocities.txt"), float_lines(&scene.velocities).as_bytes())?;

    let mut poses = String::new();
    for pose in scene.trajectory.poses() {
        poses.push_str(&pose_line(pose));
    }
    write_file(&dir.join("poses_gt.txt"), poses.as_bytes())?;

    for (i, image) in scene.images.iter().enumerate() {
        write_file(&images_dir.join(format!("{i:06}.pgm")), &encode_pgm(image))?;
    }
    for (i, depth) in scene.depths.iter().enumerate() {
        write_file(&depth_dir.join(format!("{i:06}.bin")), &encode_depth(depth))?;
    }

    sync_dir(&images_dir)?;
    sync_dir(&depth_dir)?;
    sync_dir(dir)?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

fn parse_floats(path: &Path, text: &str) -> Result<Vec<f64>, DatasetError> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>().map_err(|e| DatasetError::ParseError {
                file: path.to_path_buf(),
                detail: format!("bad float {tok:?}: {e}"),
            })
        })
        .collect()
}

fn parse_calib(dir: &Path) -> Result<CameraIntrinsics, DatasetError> {
    let path = dir.join("calib.txt");
    let text = read_text(&path)?;
    let values = parse_floats(&path, &text)?;
    if values.len() != 6 {
        return Err(DatasetError::ParseError {
            file: path,
            detail: format!("expected 6 values, found {}", values.len()),
        });
    }
    CameraIntrinsics::new(
        values[0],
        values[1],
        values[2],
        values[3],
        values[4] as usize,
        values[5] as usize,
    )
    .map_err(|e| DatasetError::ParseError { file: path, detail: e.to_string() })
}

fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<Image, DatasetError> {
    let bad = |detail: String| DatasetError::ParseError { file: path.to_path_buf(), detail };
    // Header: "P5", width, height, maxval as whitespace-separated tokens,
    // then a single whitespace byte before the raster.
    let mut pos = 0usize;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header".into()));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| bad(e.to_string()))?);
    }
    if tokens[0] != "P5" {
        return Err(bad(format!("expected P5 magic, found {:?}", tokens[0])));
    }
    let w: usize = tokens[1].parse().map_err(|_| bad("bad width".into()))?;
    let h: usize = tokens[2].parse().map_err(|_| bad("bad height".into()))?;
    if tokens[3] != "255" {
        return Err(bad(format!("expected maxval 255, found {:?}", tokens[3])));
    }
    pos += 1;
    let raster = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated raster".into()))?;
    let data = raster.iter().map(|b| *b as f64 / 255.0).collect();
    Image::new(h, w, data).map_err(|e| bad(e.to_string()))
}

fn indexed_files(dir: &Path, extension: &str, count: usize) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out = Vec::new();
    let mut i = 0usize;
    loop {
        let path = dir.join(format!("{i:06}.{extension}"));
        if !path.exists() {
            break;
        }
        out.push(path);
        i += 1;
    }
    if out.len() != count {
        return Err(DatasetError::InconsistentLengths(format!(
            "{} holds {} frames, expected {count}",
            dir.display(),
            out.len()
        )));
    }
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<LoadedScene, DatasetError> {
    let intrinsics = parse_calib(dir)?;

    let times_path = dir.join("times.txt");
    let timestamps = parse_floats(&times_path, &read_text(&times_path)?)?;
    let vel_path = dir.join("velocities.txt");
    let velocities = parse_floats(&vel_path, &read_text(&vel_path)?)?;
    if velocities.len() != timestamps.len() {
        return Err(DatasetError::InconsistentLengths(format!(
            "{} velocities vs {} timestamps",
            velocities.len(),
            timestamps.len()
        )));
    }

    let images_dir = dir.join("images");
    if !images_dir.is_dir() {
        return Err(DatasetError::MissingFile(images_dir));
    }
    let mut images = Vec::with_capacity(timestamps.len());
    for path in indexed_files(&images_dir, "pgm", timestamps.len())? {
        let image = decode_pgm(&path, &fs::read(&path)?)?;
        if image.dims() != (intrinsics.height, intrinsics.width) {
            return Err(DatasetError::ParseError {
                file: path,
                detail: format!(
                    "image is {:?}, calibration says {:?}",
                    image.dims(),
                    (intrinsics.height, intrinsics.width)
                ),
            });
        }
        images.push(image);
    }

    let depth_dir = dir.join("depth");
    let depths = if depth_dir.is_dir() {
        let mut maps = Vec::with_capacity(timestamps.len());
        for path in indexed_files(&depth_dir, "bin", timestamps.len())? {
            let bytes = fs::read(&path)?;
            let expected = intrinsics.height * intrinsics.width * 4;
            if bytes.len() != expected {
                return Err(DatasetError::ParseError {
                    file: path,
                    detail: format!("{} bytes, expected {expected}", bytes.len()),
                });
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            maps.push(
                DepthMap::new(intrinsics.height, intrinsics.width, data)
                    .map_err(|e| DatasetError::ParseError { file: path, detail: e.to_string() })?,
            );
        }
        Some(maps)
    } else {
        None
    };

    let poses_path = dir.join("poses_gt.txt");
    let ground_truth = if poses_path.exists() {
        let text = fs::read_to_string(&poses_path)?;
        let mut trajectory = Trajectory::new();
        for (i, line) in text.lines().enumerate() {
            let values = parse_floats(&poses_path, line)?;
            if values.len() != 12 {
                return Err(DatasetError::ParseError {
                    file: poses_path,
                    detail: format!("line {}: expected 12 values, found {}", i + 1, values.len()),
                });
            }
            let rows: [f64; 12] =
                values.try_into().expect("length was checked just above");
            let pose = Pose3::from_matrix_rows(&rows);
            let timestamp = *timestamps.get(i).ok_or_else(|| {
                DatasetError::InconsistentLengths(format!(
                    "poses_gt.txt holds more rows than the {} timestamps",
                    timestamps.len()
                ))
            })?;
            trajectory.push(timestamp, pose).map_err(|e| DatasetError::ParseError {
                file: poses_path.clone(),
                detail: e.to_string(),
            })?;
        }
        if trajectory.len() != timestamps.len() {
            return Err(DatasetError::InconsistentLengths(format!(
                "{} ground-truth poses vs {} frames",
                trajectory.len(),
                timestamps.len()
            )));
        }
        Some(trajectory)
    } else {
        None
    };

    Ok(LoadedScene { images, timestamps, velocities, intrinsics, depths, ground_truth })
}

/// Reads a KITTI-style pose file (12 numbers per line); timestamps are the
/// line indices. Used for scoring externally supplied trajectories.
pub fn read_pose_file(path: &Path) -> Result<Trajectory, DatasetError> {
    let text = read_text(path)?;
    let mut trajectory = Trajectory::new();
    for (i, line) in text.lines().enumerate() {
        let values = parse_floats(path, line)?;
        if values.len() != 12 {
            return Err(DatasetError::ParseError {
                file: path.to_path_buf(),
                detail: format!("line {}: expected 12 values, found {}", i + 1, values.len()),
            });
        }
        let rows: [f64; 12] = values.try_into().expect("length was checked just above");
        let pose = Pose3::from_matrix_rows(&rows);
        trajectory.push(i as f64, pose).map_err(|e| DatasetError::ParseError {
            file: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    }
    Ok(trajectory)
}

pub fn save_checkpoint(
    path: &Path,
    kind: NetKind,
    config: &NetConfig,
    params: &ParamVector,
) -> Result<(), DatasetError> {
    write_file(path, &encode_checkpoint(kind, config, params))
}

pub fn load_checkpoint(path: &Path) -> Result<(NetKind, NetConfig, ParamVector), DatasetError> {
    if !path.exists() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
        .map_err(|e| DatasetError::ParseError { file: path.to_path_buf(), detail: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use clslam_core::geometry::pose_distance;
    use clslam_core::simworld::{default_intrinsics, generate_scene, EnvironmentSpec, SceneSpec};
    use clslam_core::toynets::DepthNetToy;

    fn small_scene() -> RenderedScene {
        let env = EnvironmentSpec {
            env_id: 2,
            texture_seed: 5,
            texture_frequency: 0.6,
            texture_contrast: 0.7,
            illumination_gain: 1.0,
            illumination_bias: 0.0,
            box_density: 0.1,
            box_heights: (0.5, 2.0),
            velocity_range: (4.0, 6.0),
            noise_sigma: 0.0,
        };
        let scene = SceneSpec {
            scene_id: 1,
            waypoint_seed: 21,
            length: 8.0,
            curvature: (-0.05, 0.05),
            revisit: false,
            frame_rate: 10.0,
        };
        generate_scene(&env, &scene, &default_intrinsics()).unwrap()
    }

    #[test]
    fn round_trip_preserves_the_scene() {
        let scene = small_scene();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&scene, dir.path()).unwrap();

        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.images, scene.images, "images round-trip bitwise");
        assert_eq!(back.timestamps, scene.timestamps);
        assert_eq!(back.velocities, scene.velocities);
        assert_eq!(back.intrinsics, scene.intrinsics);
        assert_eq!(back.depths.as_ref().unwrap(), &scene.depths, "depth is f32 on both sides");
        let gt = back.ground_truth.unwrap();
        assert_eq!(gt.len(), scene.trajectory.len());
        for i in 0..gt.len() {
            assert!(pose_distance(gt.pose(i), scene.trajectory.pose(i)) < 1e-12);
            assert_eq!(gt.timestamp(i), scene.trajectory.timestamp(i));
        }
    }

    #[test]
    fn layout_matches_the_documented_shape() {
        let scene = small_scene();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&scene, dir.path()).unwrap();

        let n = scene.images.len();
        for i in 0..n {
            assert!(dir.path().join(format!("images/{i:06}.pgm")).exists());
            assert!(dir.path().join(format!("depth/{i:06}.bin")).exists());
        }
        assert!(!dir.path().join(format!("images/{n:06}.pgm")).exists());

        let poses = fs::read_to_string(dir.path().join("poses_gt.txt")).unwrap();
        assert_eq!(poses.lines().count(), n);
        for line in poses.lines() {
            assert_eq!(line.split_whitespace().count(), 12);
        }
        let calib = fs::read_to_string(dir.path().join("calib.txt")).unwrap();
        assert_eq!(calib.trim(), "60 60 48 24 96 48");

        let first_image = fs::read(dir.path().join("images/000000.pgm")).unwrap();
        assert!(first_image.starts_with(b"P5\n96 48\n255\n"));
        assert_eq!(first_image.len(), "P5\n96 48\n255\n".len() + 96 * 48);
    }

    #[test]
    fn truncated_velocities_are_rejected() {
        let scene = small_scene();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&scene, dir.path()).unwrap();

        let vel_path = dir.path().join("velocities.txt");
        let text = fs::read_to_string(&vel_path).unwrap();
        let truncated: Vec<&str> = text.lines().take(scene.images.len() - 1).collect();
        fs::write(&vel_path, truncated.join("\n")).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DatasetError::InconsistentLengths(_))));
    }

    #[test]
    fn optional_files_may_be_absent() {
        let scene = small_scene();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&scene, dir.path()).unwrap();
        fs::remove_file(dir.path().join("poses_gt.txt")).unwrap();
        fs::remove_dir_all(dir.path().join("depth")).unwrap();

        let back = read_dataset(dir.path()).unwrap();
        assert!(!back.has_ground_truth());
        assert!(back.depths.is_none());
        let stream = back.scene_stream(scene.env_id, scene.scene_id);
        stream.validate().unwrap();
    }

    #[test]
    fn missing_files_are_named() {
        let dir = tempfile::tempdir().unwrap();
        match read_dataset(dir.path()) {
            Err(DatasetError::MissingFile(path)) => {
                assert!(path.ends_with("calib.txt"));
            }
            other => panic!("expected MissingFile, got {other:?}"),
        }
    }

    #[test]
    fn dropping_one_image_is_inconsistent() {
        let scene = small_scene();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&scene, dir.path()).unwrap();
        let last = scene.images.len() - 1;
        fs::remove_file(dir.path().join(format!("images/{last:06}.pgm"))).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DatasetError::InconsistentLengths(_))));
    }

    #[test]
    fn pose_files_read_back_as_trajectories() {
        let scene = small_scene();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&scene, dir.path()).unwrap();
        let traj = read_pose_file(&dir.path().join("poses_gt.txt")).unwrap();
        assert_eq!(traj.len(), scene.trajectory.len());
        assert_eq!(traj.timestamp(2), 2.0);
    }

    #[test]
    fn checkpoints_round_trip() {
        let config = NetConfig::new(8, 12, 3, 5).unwrap();
        let net = DepthNetToy::seeded(config, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("depth.tnet");
        save_checkpoint(&path, NetKind::Depth, &config, net.params()).unwrap();
        let (kind, cfg, params) = load_checkpoint(&path).unwrap();
        assert_eq!(kind, NetKind::Depth);
        assert_eq!(cfg, config);
        assert_eq!(&params, net.params());
        assert!(matches!(
            load_checkpoint(&dir.path().join("absent.tnet")),
            Err(DatasetError::MissingFile(_))
        ));
    }
}
