//! Experiment orchestration: pre-training, deployment runs per method and
//! plan sequence, optional loop closure, and aggregation into a report.
//!
//! Every plan sequence starts from the shared pre-trained weights and is
//! deployed scene by scene. Because deployments are deterministic and state
//! evolves strictly forward, a sequence that is a prefix of another yields
//! exactly the longer run's intermediate results; runs are therefore done
//! once per prefix-maximal sequence and shorter rows are read off them (a
//! test pins this equivalence). Independent (method, sequence) runs execute
//! in parallel worker slots and merge in sorted order, so reports do not
//! depend on scheduling.

use crate::config::ExperimentConfig;
use crate::report::{
    sequence_label, DeploymentSummary, MethodAggregate, ReportMeta, ReportRow, ReportTable,
    RqPairLabel, RunTiming, TimingMeta,
};
use clslam_core::adaptation::{
    integrate_odometry, run_deployment, AdaptationConfig, AdaptationError, BaselineMode,
    DualState, FrameRecord,
};
use clslam_core::backend::{
    describe, detect_loops, dump_graph, optimize_graph, BackendError, DescriptorMemory, PoseGraph,
};
use clslam_core::geometry::{se3_exp, GeometryError, Pose3, Trajectory};
use clslam_core::metrics::{
    adaptation_quality, retention_quality, relative_segment_errors, DeploymentRecord, EvalPlan,
    MetricsError, SceneRef, SegmentErrors,
};
use clslam_core::photometric::{Image, LossWeights, PhotometricError};
use clslam_core::rng::derive_seed;
use clslam_core::simworld::{generate_scene, RenderedScene, SimWorldError};
use clslam_core::toynets::{DepthNetToy, ParamVector, PoseNetToy, ToyNetError};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{context}: {source}")]
    InRun {
        context: String,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error(transparent)]
    Adaptation(#[from] AdaptationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Net(#[from] ToyNetError),
    #[error(transparent)]
    Sim(#[from] SimWorldError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Photometric(#[from] PhotometricError),
}

fn with_context(context: String, source: ExperimentError) -> ExperimentError {
    ExperimentError::InRun { context, source: Box::new(source) }
}

/// The methods of the benchmark: the dual-network system and its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    ClSlam,
    Fixed,
    ExpertOnly,
    GeneralOnly,
    Offline,
}

pub const ALL_METHODS: [Method; 5] =
    [Method::ClSlam, Method::Fixed, Method::ExpertOnly, Method::GeneralOnly, Method::Offline];

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::ClSlam => "cl_slam",
            Method::Fixed => "fixed",
            Method::ExpertOnly => "expert_only",
            Method::GeneralOnly => "general_only",
            Method::Offline => "offline",
        }
    }

    pub fn mode(self) -> BaselineMode {
        match self {
            Method::ClSlam => BaselineMode::ClSlam,
            Method::Fixed => BaselineMode::Fixed,
            Method::ExpertOnly => BaselineMode::ExpertOnly,
            Method::GeneralOnly => BaselineMode::GeneralOnly,
            Method::Offline => BaselineMode::Offline,
        }
    }
}

/// Parses "all" or a comma-separated method list; result is deduplicated
/// and canonically ordered.
pub fn parse_methods(text: &str) -> Result<Vec<Method>, String> {
    if text.trim() == "all" {
        return Ok(ALL_METHODS.to_vec());
    }
    let mut out = Vec::new();
    for token in text.split(',') {
        let token = token.trim();
        let method = ALL_METHODS
            .iter()
            .find(|m| m.name() == token)
            .copied()
            .ok_or_else(|| format!("unknown method {token:?}"))?;
        if !out.contains(&method) {
            out.push(method);
        }
    }
    if out.is_empty() {
        return Err("no methods selected".into());
    }
    out.sort();
    Ok(out)
}

/// Short digest of a depth/pose weight pair.
pub fn digest_weights(depth: &ParamVector, pose: &ParamVector) -> String {
    let mut hasher = Sha256::new();
    for v in depth.data().iter().chain(pose.data()) {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Renders every configured scene.
pub fn render_scenes(
    config: &ExperimentConfig,
) -> Result<BTreeMap<SceneRef, RenderedScene>, ExperimentError> {
    let mut scenes = BTreeMap::new();
    for entry in &config.scenes {
        let env = config
            .environment(entry.env_id)
            .expect("validated config references existing environments");
        let scene = generate_scene(env, &entry.spec, &config.intrinsics).map_err(|e| {
            with_context(format!("scene e{}s{}", entry.env_id, entry.spec.scene_id), e.into())
        })?;
        scenes.insert(SceneRef { env: entry.env_id, scene: entry.spec.scene_id }, scene);
    }
    Ok(scenes)
}

fn pretrain_adaptation(config: &ExperimentConfig) -> AdaptationConfig {
    // Offline epochs already revisit the data, so a single update cycle per
    // frame keeps pre-training cost proportional to the epoch count.
    AdaptationConfig { cycles: 1, mode: BaselineMode::ExpertOnly, ..config.adaptation.clone() }
}

/// Shared pre-trained weights: seeded initialization adapted over the
/// pre-training scene for the configured number of epochs.
pub fn pretrain_weights(
    config: &ExperimentConfig,
    scenes: &BTreeMap<SceneRef, RenderedScene>,
) -> Result<(ParamVector, ParamVector), ExperimentError> {
    let depth = DepthNetToy::seeded(config.net, derive_seed(config.master_seed, "harness:init-depth"));
    let pose = PoseNetToy::seeded(config.net, derive_seed(config.master_seed, "harness:init-pose"));
    let mut state = DualState::new(
        config.net,
        depth.params().clone(),
        pose.params().clone(),
        derive_seed(config.master_seed, "harness:replay"),
    )?;
    let adapt = pretrain_adaptation(config);
    let weights = LossWeights::default();
    let stream = scenes[&config.pretrain].scene_stream();
    for epoch in 0..config.pretrain_epochs {
        run_deployment(&mut state, &stream, &adapt, &weights)
            .map_err(|e| with_context(format!("pre-training epoch {epoch}"), e.into()))?;
    }
    Ok((state.stored_depth().clone(), state.stored_pose().clone()))
}

/// Offline baseline weights: the shared pre-trained weights trained further
/// over every scene of the full interleaved sequence, for the same number
/// of epochs. The offline method then deploys them frozen.
pub fn offline_weights(
    config: &ExperimentConfig,
    plan: &EvalPlan,
    scenes: &BTreeMap<SceneRef, RenderedScene>,
    pretrained: &(ParamVector, ParamVector),
) -> Result<(ParamVector, ParamVector), ExperimentError> {
    let full = &plan.rq_pairs.last().expect("plans hold at least one pair").mixed;
    let mut state = DualState::new(
        config.net,
        pretrained.0.clone(),
        pretrained.1.clone(),
        derive_seed(config.master_seed, "harness:replay"),
    )?;
    let adapt = pretrain_adaptation(config);
    let weights = LossWeights::default();
    for epoch in 0..config.pretrain_epochs {
        for sref in full {
            let stream = scenes[sref].scene_stream();
            run_deployment(&mut state, &stream, &adapt, &weights)
                .map_err(|e| with_context(format!("offline epoch {epoch}"), e.into()))?;
        }
    }
    Ok((state.stored_depth().clone(), state.stored_pose().clone()))
}

/// Result of deploying one scene within a sequence run.
#[derive(Debug, Clone)]
pub struct PositionOutcome {
    pub errors: SegmentErrors,
    pub summary: DeploymentSummary,
    pub frames: Vec<FrameRecord>,
    pub graph_dump: Option<String>,
}

fn subsample_gt(scene: &RenderedScene, accepted: &[usize]) -> Trajectory {
    let mut gt = Trajectory::new();
    for &idx in accepted {
        gt.push(scene.timestamps[idx], *scene.trajectory.pose(idx))
            .expect("accepted frames keep increasing timestamps");
    }
    gt
}

struct LoopOutcome {
    trajectory: Trajectory,
    loop_edges: usize,
    chi2_before: f64,
    chi2_after: f64,
    dump: String,
}

/// Builds a pose graph over the accepted frames, detects loop closures by
/// descriptor similarity, measures them with the pose network, optimizes,
/// and returns the corrected trajectory.
fn close_loops(
    images: &[&Image],
    est: &Trajectory,
    increments: &[Pose3],
    pose_net: &PoseNetToy,
    threshold: f64,
    min_gap: usize,
) -> Result<Option<LoopOutcome>, ExperimentError> {
    let mut graph = PoseGraph::new();
    for i in 0..est.len() {
        graph.add_node(i, *est.pose(i))?;
    }
    for (i, increment) in increments.iter().enumerate() {
        graph.add_odometry_edge(i, i + 1, *increment)?;
    }
    let mut memory = DescriptorMemory::new();
    let mut loop_edges = 0usize;
    for (i, image) in images.iter().enumerate() {
        let descriptor = describe(image);
        let candidates = detect_loops(i, &descriptor, &memory, threshold, min_gap)?;
        if let Some(best) = candidates.first() {
            let twist = pose_net.forward(images[best.frame_index], image)?;
            graph.add_loop_edge(best.frame_index, i, se3_exp(&twist))?;
            loop_edges += 1;
        }
        memory.push(i, descriptor)?;
    }
    if loop_edges == 0 {
        return Ok(None);
    }
    let report = optimize_graph(&mut graph, 50, 1e-9)?;
    let mut trajectory = Trajectory::new();
    for (position, (_, pose)) in graph.nodes().enumerate() {
        trajectory
            .push(est.timestamp(position), *pose)
            .expect("node order follows the original timestamps");
    }
    let dump = dump_graph(&graph);
    Ok(Some(LoopOutcome {
        trajectory,
        loop_edges,
        chi2_before: report.chi2_before,
        chi2_after: report.chi2_after,
        dump,
    }))
}

/// Deploys `sequence` scene by scene from the given starting weights,
/// scoring every deployment against ground truth.
pub fn run_sequence(
    config: &ExperimentConfig,
    scenes: &BTreeMap<SceneRef, RenderedScene>,
    method: Method,
    sequence: &[SceneRef],
    start: &(ParamVector, ParamVector),
    loops_enabled: bool,
) -> Result<Vec<PositionOutcome>, ExperimentError> {
    let mut adapt = config.adaptation.clone();
    adapt.mode = method.mode();
    let mut state = DualState::new(
        config.net,
        start.0.clone(),
        start.1.clone(),
        derive_seed(config.master_seed, "harness:replay"),
    )?;
    let weights = LossWeights::default();
    let mut out = Vec::with_capacity(sequence.len());
    for sref in sequence {
        let context = format!("method {} scene {}", method.name(), sequence_label(&[*sref]));
        let scene = &scenes[sref];
        let stream = scene.scene_stream();
        let output = run_deployment(&mut state, &stream, &adapt, &weights)
            .map_err(|e| with_context(context.clone(), e.into()))?;
        let est = integrate_odometry(&Pose3::identity(), &output.timestamps, &output.increments)
            .map_err(|e| with_context(context.clone(), e.into()))?;

        let mut loop_edges = 0usize;
        let mut chi2_before = None;
        let mut chi2_after = None;
        let mut graph_dump = None;
        let scored = if loops_enabled {
            let images: Vec<&Image> =
                output.accepted.iter().map(|&idx| &stream.images[idx]).collect();
            let emitter = match method.mode() {
                BaselineMode::GeneralOnly => &state.generalizer().pose,
                _ => &state.expert().pose,
            };
            match close_loops(
                &images,
                &est,
                &output.increments,
                emitter,
                config.loops.threshold,
                config.loops.min_gap,
            )
            .map_err(|e| with_context(context.clone(), e))?
            {
                Some(outcome) => {
                    loop_edges = outcome.loop_edges;
                    chi2_before = Some(outcome.chi2_before);
                    chi2_after = Some(outcome.chi2_after);
                    graph_dump = Some(outcome.dump);
                    outcome.trajectory
                }
                None => est,
            }
        } else {
            est
        };

        let gt = subsample_gt(scene, &output.accepted);
        let errors =
            relative_segment_errors(&gt, &scored, &config.segment_lengths, config.segment_step)
                .map_err(|e| with_context(context.clone(), e.into()))?;

        let summary = DeploymentSummary {
            scene: sequence_label(&[*sref]),
            frames: stream.images.len(),
            accepted: output.accepted.len(),
            t_err: errors.t_err,
            r_err: errors.r_err,
            loop_edges,
            chi2_before,
            chi2_after,
            stored_digest: digest_weights(state.stored_depth(), state.stored_pose()),
            expert_digest: digest_weights(
                state.expert().depth.params(),
                state.expert().pose.params(),
            ),
            generalizer_digest: digest_weights(
                state.generalizer().depth.params(),
                state.generalizer().pose.params(),
            ),
        };
        out.push(PositionOutcome { errors, summary, frames: output.frames, graph_dump });
    }
    Ok(out)
}

/// Sequences that are prefixes of other needed sequences do not need their
/// own runs.
fn prefix_reduce(needed: &BTreeSet<Vec<SceneRef>>) -> Vec<Vec<SceneRef>> {
    needed
        .iter()
        .filter(|seq| {
            !needed
                .iter()
                .any(|other| other.len() > seq.len() && other[..seq.len()] == seq[..])
        })
        .cloned()
        .collect()
}

fn covering<'a>(maximal: &'a [Vec<SceneRef>], seq: &[SceneRef]) -> &'a Vec<SceneRef> {
    maximal
        .iter()
        .find(|m| m.len() >= seq.len() && m[..seq.len()] == seq[..])
        .expect("every needed sequence has a covering run")
}

/// RQ sequences in the deduplicated order retention scoring expects.
fn rq_sequences(plan: &EvalPlan) -> Vec<Vec<SceneRef>> {
    let mut out: Vec<Vec<SceneRef>> = Vec::new();
    for pair in &plan.rq_pairs {
        for seq in [&pair.mixed, &pair.reference] {
            if !out.contains(seq) {
                out.push(seq.clone());
            }
        }
    }
    out
}

/// Everything a run produces besides the table: per-run frame logs and any
/// pose-graph dumps keyed by file stem, plus the starting weights so they
/// can be checkpointed.
pub struct RunOutput {
    pub table: ReportTable,
    pub logs: BTreeMap<String, String>,
    pub graphs: BTreeMap<String, String>,
    pub pretrained: (ParamVector, ParamVector),
    pub offline: Option<(ParamVector, ParamVector)>,
}

pub fn run_experiment(
    config: &ExperimentConfig,
    config_hash: &str,
    methods: &[Method],
    loops_override: Option<bool>,
) -> Result<RunOutput, ExperimentError> {
    let total_start = Instant::now();
    let loops_enabled = loops_override.unwrap_or(config.loops.enabled);
    let plan = config.plan()?;
    let scenes = render_scenes(config)?;

    let pretrained = pretrain_weights(config, &scenes)?;
    let offline = if methods.contains(&Method::Offline) {
        Some(offline_weights(config, &plan, &scenes, &pretrained)?)
    } else {
        None
    };

    let mut needed: BTreeSet<Vec<SceneRef>> = plan.aq_sequences.iter().cloned().collect();
    for seq in rq_sequences(&plan) {
        needed.insert(seq);
    }
    let maximal = prefix_reduce(&needed);

    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();
    let jobs: Vec<(Method, &Vec<SceneRef>)> = methods
        .iter()
        .flat_map(|m| maximal.iter().map(move |seq| (*m, seq)))
        .collect();

    // Parallel worker slots over independent jobs; results merge by job
    // index, so scheduling cannot affect the report.
    let results: Mutex<Vec<Option<Result<(Vec<PositionOutcome>, f64), ExperimentError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::Relaxed);
                if index >= jobs.len() {
                    break;
                }
                let (method, seq) = &jobs[index];
                let start = match (*method, &offline) {
                    (Method::Offline, Some(w)) => w,
                    _ => &pretrained,
                };
                let t0 = Instant::now();
                let outcome = run_sequence(config, &scenes, *method, seq, start, loops_enabled)
                    .map(|positions| (positions, t0.elapsed().as_secs_f64()));
                results.lock().expect("no poisoned workers")[index] = Some(outcome);
            });
        }
    });
    let mut job_results = Vec::with_capacity(jobs.len());
    for slot in results.into_inner().expect("workers finished") {
        job_results.push(slot.expect("every job ran")?);
    }

    // Assemble rows for every needed sequence from its covering run.
    let mut rows = Vec::new();
    let mut logs = BTreeMap::new();
    let mut graphs = BTreeMap::new();
    let mut timing_rows = Vec::new();
    let mut per_method: BTreeMap<Method, BTreeMap<&Vec<SceneRef>, &PositionOutcome>> =
        BTreeMap::new();
    for ((method, seq), (positions, seconds)) in jobs.iter().zip(&job_results) {
        let stem = format!("{}_{}", method.name(), sequence_label(seq).replace('>', "-"));
        let mut log = String::new();
        for (position, outcome) in positions.iter().enumerate() {
            log.push_str(&crate::report::render_deployment_log(
                &sequence_label(&seq[position..=position]),
                &outcome.frames,
            ));
            if let Some(dump) = &outcome.graph_dump {
                graphs.insert(format!("{stem}_{position}.txt"), dump.clone());
            }
        }
        logs.insert(format!("{stem}.jsonl"), log);
        timing_rows.push(RunTiming {
            method: method.name().into(),
            sequence: sequence_label(seq),
            seconds: *seconds,
        });
        per_method.entry(*method).or_default();
    }

    for method in &methods {
        for seq in &needed {
            let cover = covering(&maximal, seq);
            let job_index = jobs
                .iter()
                .position(|(m, s)| m == method && *s == cover)
                .expect("jobs enumerate methods x maximal sequences");
            let positions = &job_results[job_index].0;
            let last = &positions[seq.len() - 1];
            rows.push(ReportRow {
                method: method.name().into(),
                sequence: sequence_label(seq),
                t_err: last.errors.t_err,
                r_err: last.errors.r_err,
                deployments: positions[..seq.len()].iter().map(|p| p.summary.clone()).collect(),
            });
        }
    }
    rows.sort_by(|a, b| (&a.method, &a.sequence).cmp(&(&b.method, &b.sequence)));

    let mut aggregates = Vec::new();
    for method in &methods {
        let errors_of = |seq: &Vec<SceneRef>| -> SegmentErrors {
            let label = sequence_label(seq);
            let row = rows
                .iter()
                .find(|r| r.method == method.name() && r.sequence == label)
                .expect("rows cover every needed sequence");
            SegmentErrors::new(row.t_err, row.r_err).expect("scored errors are valid")
        };
        let aq_records: Vec<DeploymentRecord> = plan
            .aq_sequences
            .iter()
            .map(|seq| DeploymentRecord::new(seq.clone(), errors_of(seq)))
            .collect::<Result<_, _>>()?;
        let aq = adaptation_quality(&plan, &aq_records)?;
        let rq_records: Vec<DeploymentRecord> = rq_sequences(&plan)
            .iter()
            .map(|seq| DeploymentRecord::new(seq.clone(), errors_of(seq)))
            .collect::<Result<_, _>>()?;
        let rq = retention_quality(&plan, &rq_records)?;
        aggregates.push(MethodAggregate {
            method: method.name().into(),
            aq_trans: aq.trans,
            aq_rot: aq.rot,
            rq_trans: rq.trans,
            rq_rot: rq.rot,
        });
    }

    let table = ReportTable {
        meta: ReportMeta {
            config_hash: config_hash.into(),
            seed: config.master_seed,
            methods: methods.iter().map(|m| m.name().into()).collect(),
            loops_enabled,
            aq_sequences: plan.aq_sequences.iter().map(|s| sequence_label(s)).collect(),
            rq_pairs: plan
                .rq_pairs
                .iter()
                .map(|p| RqPairLabel {
                    mixed: sequence_label(&p.mixed),
                    reference: sequence_label(&p.reference),
                })
                .collect(),
            pretrained_digest: digest_weights(&pretrained.0, &pretrained.1),
            offline_digest: offline.as_ref().map(|w| digest_weights(&w.0, &w.1)),
            timing: TimingMeta {
                total_seconds: total_start.elapsed().as_secs_f64(),
                runs: timing_rows,
            },
        },
        rows,
        aggregates,
    };
    Ok(RunOutput { table, logs, graphs, pretrained, offline })
}
