//! Temporary calibration probe for the continual-learning benchmark;
//! removed before release.

use clslam::config::{parse_config, ExperimentConfig};
use clslam::experiment::{run_experiment, Method};
use clslam_core::geometry::se3_exp;
use clslam_core::metrics::SceneRef;
use clslam_core::simworld::generate_scene;
use clslam_core::toynets::{ParamVector, PoseNetToy};
use std::time::Instant;

fn bench_toml(seed: u64, cycles: usize, lr: f64, epochs: usize, replay: usize, eval_len: f64, revisit_len: f64, c1: usize, c2: usize) -> String {
    format!(
        r#"
master_seed = {seed}

[camera]
fx = 20.0
fy = 20.0
cx = 16.0
cy = 8.0
width = 32
height = 16

[network]
c1 = {c1}
c2 = {c2}

[pretraining]
env_id = 0
scene_id = 0
epochs = {epochs}

[adaptation]
cycles = {cycles}
learning_rate = {lr}
min_distance = 0.2
replay_per_env = {replay}

[metrics]
segment_lengths = [10.0, 20.0, 30.0]

[[environments]]
env_id = 0
texture_seed = 10
texture_frequency = 0.5
texture_contrast = 0.8
illumination_gain = 1.0
illumination_bias = 0.0
box_density = 0.0
box_heights = [0.6, 2.2]
velocity_range = [9.0, 11.0]

[[environments]]
env_id = 1
texture_seed = 20
texture_frequency = 1.4
texture_contrast = 0.4
illumination_gain = 0.8
illumination_bias = 0.1
box_density = 0.0
box_heights = [0.6, 2.2]
velocity_range = [4.5, 5.5]

[[environments]]
env_id = 2
texture_seed = 30
texture_frequency = 0.9
texture_contrast = 0.9
illumination_gain = 1.1
illumination_bias = 0.0
box_density = 0.0
box_heights = [0.6, 2.2]
velocity_range = [16.0, 18.0]

[[scenes]]
env_id = 0
scene_id = 0
waypoint_seed = 100
length = 60.0
curvature = [-0.04, 0.04]

[[scenes]]
env_id = 1
scene_id = 1
waypoint_seed = 110
length = {eval_len}
curvature = [-0.04, 0.04]

[[scenes]]
env_id = 1
scene_id = 2
waypoint_seed = 111
length = {revisit_len}
curvature = [-0.04, 0.04]

[[scenes]]
env_id = 2
scene_id = 1
waypoint_seed = 120
length = {eval_len}
curvature = [-0.04, 0.04]

[[scenes]]
env_id = 2
scene_id = 2
waypoint_seed = 121
length = {revisit_len}
curvature = [-0.04, 0.04]
"#
    )
}

/// Mean ground-truth step distance and mean predicted translation magnitude
/// over consecutive frames of one scene, for a given pose parameter vector.
fn step_diag(config: &ExperimentConfig, pose_params: &ParamVector, r: SceneRef) -> (f64, f64) {
    let env = config.environment(r.env).unwrap();
    let scene = config.scene(r).unwrap();
    let rendered = generate_scene(env, scene, &config.intrinsics).unwrap();
    let pose = PoseNetToy::from_params(config.net, pose_params.clone()).unwrap();
    let n = rendered.images.len() - 1;
    let mut gt = 0.0;
    let mut pred = 0.0;
    for i in 0..n {
        let a = rendered.trajectory.pose(i).translation();
        let b = rendered.trajectory.pose(i + 1).translation();
        gt += ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
        let xi = pose.forward(&rendered.images[i], &rendered.images[i + 1]).unwrap();
        let t = se3_exp(&xi).translation();
        pred += (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
    }
    (gt / n as f64, pred / n as f64)
}

#[test]
#[ignore]
fn probe() {
    let methods = [Method::ClSlam, Method::Fixed, Method::ExpertOnly, Method::GeneralOnly];
    for (cycles, lr, epochs, replay, eval_len, revisit_len, c1, c2, seeds) in [(10usize, 1e-2, 40usize, 8usize, 40.0, 15.0, 3usize, 5usize, &[8u64, 10][..])] {
        println!("=== cycles {cycles} lr {lr} epochs {epochs} replay {replay} len {eval_len}/{revisit_len} net {c1}/{c2} ===");
        let mut pass_i = 0;
        let mut pass_ii = 0;
        for &seed in seeds {
            let t0 = Instant::now();
            let config = parse_config(&bench_toml(seed, cycles, lr, epochs, replay, eval_len, revisit_len, c1, c2)).unwrap();
            let out = run_experiment(&config, "bench", &methods, None).unwrap();
            let (gt0, pred0) =
                step_diag(&config, &out.pretrained.1, SceneRef { env: 0, scene: 0 });
            let (gt1, pred1) =
                step_diag(&config, &out.pretrained.1, SceneRef { env: 1, scene: 1 });
            println!(
                "seed {seed}: pretrained step e0s0 gt {gt0:.2} pred {pred0:.2} | e1s1 gt {gt1:.2} pred {pred1:.2}"
            );
            let full_label = out.table.meta.rq_pairs.last().unwrap().mixed.clone();
            let row = |m: &str| {
                out.table
                    .rows
                    .iter()
                    .find(|r| r.method == m && r.sequence == full_label)
                    .unwrap()
            };
            let fixed = row("fixed");
            let cl = row("cl_slam");
            let ex_row = row("expert_only");
            let ge_row = row("general_only");
            print!("  full-run t_err per scene:");
            let mut i_ok = true;
            for (((f, c), e), g) in fixed
                .deployments
                .iter()
                .zip(&cl.deployments)
                .zip(&ex_row.deployments)
                .zip(&ge_row.deployments)
                .skip(1)
            {
                print!(
                    " [{} fx {:.1} cl {:.1} ex {:.1} ge {:.1}]",
                    f.scene, f.t_err, c.t_err, e.t_err, g.t_err
                );
                if f.t_err <= c.t_err {
                    i_ok = false;
                }
            }
            println!();
            let agg = |m: &str| {
                out.table.aggregates.iter().find(|a| a.method == m).unwrap().clone()
            };
            let (cl_a, ex, ge, fx) =
                (agg("cl_slam"), agg("expert_only"), agg("general_only"), agg("fixed"));
            println!(
                "  AQ_t: cl {:.3} ex {:.3} ge {:.3} fx {:.3} | RQ_t: cl {:+.4} ex {:+.4} ge {:+.4} | {:.1} s",
                cl_a.aq_trans,
                ex.aq_trans,
                ge.aq_trans,
                fx.aq_trans,
                cl_a.rq_trans,
                ex.rq_trans,
                ge.rq_trans,
                t0.elapsed().as_secs_f64()
            );
            let ii_ok = cl_a.rq_trans >= ex.rq_trans && ge.rq_trans >= ex.rq_trans;
            println!("  joint {}", if i_ok && ii_ok { "PASS" } else { "fail" });
            if i_ok {
                pass_i += 1;
            }
            if ii_ok {
                pass_ii += 1;
            }
        }
        println!("criterion (i) {pass_i}/{}, criterion (ii) {pass_ii}/{}", seeds.len(), seeds.len());
    }
}
