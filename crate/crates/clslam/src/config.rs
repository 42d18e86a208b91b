//! Experiment configuration: a single TOML file describing environments,
//! scenes, pre-training, adaptation, loop closure, and metric settings.
//!
//! ```toml
//! master_seed = 7
//! output_dir = "out"            # optional, `--out` overrides
//!
//! [camera]                      # optional, defaults to 96x48 / f=60
//! fx = 60.0
//! fy = 60.0
//! cx = 48.0
//! cy = 24.0
//! width = 96
//! height = 48
//!
//! [network]                     # optional channel widths
//! c1 = 4
//! c2 = 6
//!
//! [pretraining]
//! env_id = 0                    # the pre-training scene
//! scene_id = 0
//! epochs = 25
//!
//! [adaptation]                  # optional, defaults shown
//! cycles = 5
//! learning_rate = 1e-4
//! min_distance = 0.2
//! replay_per_env = 1
//!
//! [loops]                       # optional
//! enabled = false
//! threshold = 0.95
//! min_gap = 50
//!
//! [metrics]                     # optional
//! segment_lengths = [25.0, 50.0, 100.0, 150.0, 200.0]
//! step = 1
//!
//! [[environments]]
//! env_id = 0
//! texture_seed = 10
//! texture_frequency = 0.5
//! texture_contrast = 0.8
//! illumination_gain = 1.0
//! illumination_bias = 0.0
//! box_density = 0.12
//! box_heights = [0.6, 2.2]
//! velocity_range = [9.0, 11.0]
//! noise_sigma = 0.0
//!
//! [[scenes]]
//! env_id = 0
//! scene_id = 0
//! waypoint_seed = 100
//! length = 60.0
//! curvature = [-0.04, 0.04]
//! revisit = false
//! frame_rate = 10.0
//! ```
//!
//! The lowest scene id of each non-pretraining environment is that
//! environment's held-out deployment scene; the next one is its second
//! visit in retention sequences.

use clslam_core::adaptation::{
    AdaptationConfig, BaselineMode, DEFAULT_CYCLES, DEFAULT_LEARNING_RATE, DEFAULT_MIN_DISTANCE,
};
use clslam_core::backend::{DEFAULT_MIN_GAP, DEFAULT_SIMILARITY_THRESHOLD};
use clslam_core::geometry::CameraIntrinsics;
use clslam_core::metrics::{
    make_eval_plan, EnvironmentScenes, EvalPlan, MetricsError, SceneRef, DEFAULT_SEGMENT_LENGTHS,
};
use clslam_core::simworld::{
    default_intrinsics, validate_intrinsics, EnvironmentSpec, SceneSpec, DEFAULT_FRAME_RATE,
};
use clslam_core::toynets::NetConfig;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    master_seed: u64,
    output_dir: Option<String>,
    camera: Option<RawCamera>,
    network: Option<RawNetwork>,
    pretraining: RawPretraining,
    adaptation: Option<RawAdaptation>,
    loops: Option<RawLoops>,
    metrics: Option<RawMetrics>,
    environments: Vec<RawEnvironment>,
    scenes: Vec<RawScene>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCamera {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetwork {
    c1: usize,
    c2: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPretraining {
    env_id: usize,
    scene_id: usize,
    epochs: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAdaptation {
    cycles: Option<usize>,
    learning_rate: Option<f64>,
    min_distance: Option<f64>,
    replay_per_env: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLoops {
    enabled: Option<bool>,
    threshold: Option<f64>,
    min_gap: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMetrics {
    segment_lengths: Option<Vec<f64>>,
    step: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnvironment {
    env_id: usize,
    texture_seed: u64,
    texture_frequency: f64,
    texture_contrast: f64,
    illumination_gain: f64,
    illumination_bias: f64,
    box_density: f64,
    box_heights: [f64; 2],
    velocity_range: [f64; 2],
    noise_sigma: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    env_id: usize,
    scene_id: usize,
    waypoint_seed: u64,
    length: f64,
    curvature: [f64; 2],
    revisit: Option<bool>,
    frame_rate: Option<f64>,
}

/// Loop-closure settings for full-SLAM runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopSettings {
    pub enabled: bool,
    pub threshold: f64,
    pub min_gap: usize,
}

/// One scene and the environment it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEntry {
    pub env_id: usize,
    pub spec: SceneSpec,
}

/// Validated experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub intrinsics: CameraIntrinsics,
    pub net: NetConfig,
    pub environments: Vec<EnvironmentSpec>,
    pub scenes: Vec<SceneEntry>,
    pub pretrain: SceneRef,
    pub pretrain_epochs: usize,
    pub adaptation: AdaptationConfig,
    pub loops: LoopSettings,
    pub segment_lengths: Vec<f64>,
    pub segment_step: usize,
}

impl ExperimentConfig {
    pub fn environment(&self, env_id: usize) -> Option<&EnvironmentSpec> {
        self.environments.iter().find(|e| e.env_id == env_id)
    }

    pub fn scene(&self, r: SceneRef) -> Option<&SceneSpec> {
        self.scenes
            .iter()
            .find(|s| s.env_id == r.env && s.spec.scene_id == r.scene)
            .map(|s| &s.spec)
    }

    /// Every scene as a reference, sorted.
    pub fn scene_refs(&self) -> Vec<SceneRef> {
        let mut refs: Vec<SceneRef> =
            self.scenes.iter().map(|s| SceneRef { env: s.env_id, scene: s.spec.scene_id }).collect();
        refs.sort();
        refs
    }

    /// Non-pretraining environments with their scene ids ascending.
    pub fn eval_environments(&self) -> Vec<EnvironmentScenes> {
        let mut envs = Vec::new();
        for env in &self.environments {
            if env.env_id == self.pretrain.env {
                continue;
            }
            let mut scenes: Vec<usize> = self
                .scenes
                .iter()
                .filter(|s| s.env_id == env.env_id)
                .map(|s| s.spec.scene_id)
                .collect();
            scenes.sort_unstable();
            if !scenes.is_empty() {
                envs.push(EnvironmentScenes { env: env.env_id, scenes });
            }
        }
        envs
    }

    pub fn plan(&self) -> Result<EvalPlan, MetricsError> {
        make_eval_plan(self.pretrain, &self.eval_environments())
    }
}

fn build(raw: RawConfig) -> Result<ExperimentConfig, ConfigError> {
    let camera = raw.camera.map_or_else(default_intrinsics_tuple, |c| {
        (c.fx, c.fy, c.cx, c.cy, c.width, c.height)
    });
    let intrinsics = CameraIntrinsics::new(camera.0, camera.1, camera.2, camera.3, camera.4, camera.5)
        .map_err(|e| invalid(format!("camera: {e}")))?;
    validate_intrinsics(&intrinsics).map_err(|e| invalid(format!("camera: {e}")))?;
    let (c1, c2) = raw.network.map_or((4, 6), |n| (n.c1, n.c2));
    let net = NetConfig::new(intrinsics.height, intrinsics.width, c1, c2)
        .map_err(|e| invalid(format!("network: {e}")))?;

    let mut environments = Vec::new();
    let mut env_ids = BTreeSet::new();
    for e in raw.environments {
        if !env_ids.insert(e.env_id) {
            return Err(invalid(format!("duplicate environment id {}", e.env_id)));
        }
        let spec = EnvironmentSpec {
            env_id: e.env_id,
            texture_seed: e.texture_seed,
            texture_frequency: e.texture_frequency,
            texture_contrast: e.texture_contrast,
            illumination_gain: e.illumination_gain,
            illumination_bias: e.illumination_bias,
            box_density: e.box_density,
            box_heights: (e.box_heights[0], e.box_heights[1]),
            velocity_range: (e.velocity_range[0], e.velocity_range[1]),
            noise_sigma: e.noise_sigma.unwrap_or(0.0),
        };
        spec.validate().map_err(|err| invalid(format!("environment {}: {err}", e.env_id)))?;
        environments.push(spec);
    }
    if environments.is_empty() {
        return Err(invalid("at least one environment is required"));
    }

    let mut scenes = Vec::new();
    let mut scene_refs = BTreeSet::new();
    for s in raw.scenes {
        if !env_ids.contains(&s.env_id) {
            return Err(invalid(format!(
                "scene {} references unknown environment {}",
                s.scene_id, s.env_id
            )));
        }
        if !scene_refs.insert((s.env_id, s.scene_id)) {
            return Err(invalid(format!("duplicate scene e{}s{}", s.env_id, s.scene_id)));
        }
        let spec = SceneSpec {
            scene_id: s.scene_id,
            waypoint_seed: s.waypoint_seed,
            length: s.length,
            curvature: (s.curvature[0], s.curvature[1]),
            revisit: s.revisit.unwrap_or(false),
            frame_rate: s.frame_rate.unwrap_or(DEFAULT_FRAME_RATE),
        };
        spec.validate()
            .map_err(|err| invalid(format!("scene e{}s{}: {err}", s.env_id, s.scene_id)))?;
        scenes.push(SceneEntry { env_id: s.env_id, spec });
    }

    let pretrain = SceneRef { env: raw.pretraining.env_id, scene: raw.pretraining.scene_id };
    if !scene_refs.contains(&(pretrain.env, pretrain.scene)) {
        return Err(invalid(format!(
            "pre-training scene e{}s{} does not exist",
            pretrain.env, pretrain.scene
        )));
    }
    if raw.pretraining.epochs == 0 {
        return Err(invalid("pre-training epochs must be at least 1"));
    }

    let a = raw.adaptation.unwrap_or(RawAdaptation {
        cycles: None,
        learning_rate: None,
        min_distance: None,
        replay_per_env: None,
    });
    let adaptation = AdaptationConfig {
        cycles: a.cycles.unwrap_or(DEFAULT_CYCLES),
        learning_rate: a.learning_rate.unwrap_or(DEFAULT_LEARNING_RATE),
        min_distance: a.min_distance.unwrap_or(DEFAULT_MIN_DISTANCE),
        mode: BaselineMode::ClSlam,
        replay_per_env: a.replay_per_env.unwrap_or(1),
    };
    adaptation.validate().map_err(|e| invalid(format!("adaptation: {e}")))?;

    let l = raw.loops.unwrap_or(RawLoops { enabled: None, threshold: None, min_gap: None });
    let loops = LoopSettings {
        enabled: l.enabled.unwrap_or(false),
        threshold: l.threshold.unwrap_or(DEFAULT_SIMILARITY_THRESHOLD),
        min_gap: l.min_gap.unwrap_or(DEFAULT_MIN_GAP),
    };
    if !(loops.threshold > 0.0 && loops.threshold <= 1.0) {
        return Err(invalid("loops.threshold must lie in (0, 1]"));
    }

    let m = raw.metrics.unwrap_or(RawMetrics { segment_lengths: None, step: None });
    let segment_lengths =
        m.segment_lengths.unwrap_or_else(|| DEFAULT_SEGMENT_LENGTHS.to_vec());
    if segment_lengths.is_empty() || segment_lengths.iter().any(|l| !(*l > 0.0)) {
        return Err(invalid("metrics.segment_lengths must be positive"));
    }
    let segment_step = m.step.unwrap_or(1);
    if segment_step == 0 {
        return Err(invalid("metrics.step must be at least 1"));
    }

    let config = ExperimentConfig {
        master_seed: raw.master_seed,
        output_dir: PathBuf::from(raw.output_dir.unwrap_or_else(|| "out".into())),
        intrinsics,
        net,
        environments,
        scenes,
        pretrain,
        pretrain_epochs: raw.pretraining.epochs,
        adaptation,
        loops,
        segment_lengths,
        segment_step,
    };
    config.plan().map_err(|e| {
        invalid(format!(
            "cannot build the evaluation plan ({e}); each non-pretraining environment needs \
             at least two scenes and there must be at least two such environments"
        ))
    })?;
    Ok(config)
}

fn default_intrinsics_tuple() -> (f64, f64, f64, f64, usize, usize) {
    let k = default_intrinsics();
    (k.fx, k.fy, k.cx, k.cy, k.width, k.height)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    build(toml::from_str(text)?)
}

/// Loads and validates a config file, returning it with the raw bytes used
/// for hashing.
pub fn load_config(path: &Path) -> Result<(ExperimentConfig, Vec<u8>), ConfigError> {
    let bytes = std::fs::read(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|e| invalid(format!("config is not UTF-8: {e}")))?;
    Ok((parse_config(&text)?, bytes))
}

/// Hash identifying a run: the config bytes plus the effective seed, so a
/// `--seed` override changes it too.
pub fn config_hash(raw: &[u8], seed: u64) -> String {
    let mut hasher = Sha256::new();
    hasher.update(raw);
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
