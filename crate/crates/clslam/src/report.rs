//! Result tables and their file formats: JSON for machines, CSV with one
//! row per sequence and method, and a plain-text table. Wall-clock numbers
//! live only under `meta.timing`, so reports are comparable byte for byte
//! once that subtree is dropped.

use clslam_core::adaptation::FrameRecord;
use clslam_core::metrics::SceneRef;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::fmt::Write as _;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("cannot parse report {path}: {detail}")]
    Parse { path: String, detail: String },
}

/// "e0s1" style label; sequences join labels with ">".
pub fn scene_label(r: SceneRef) -> String {
    format!("e{}s{}", r.env, r.scene)
}

pub fn sequence_label(seq: &[SceneRef]) -> String {
    seq.iter().map(|r| scene_label(*r)).collect::<Vec<_>>().join(">")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub meta: ReportMeta,
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<MethodAggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_hash: String,
    pub seed: u64,
    pub methods: Vec<String>,
    pub loops_enabled: bool,
    pub aq_sequences: Vec<String>,
    pub rq_pairs: Vec<RqPairLabel>,
    /// Digest of the shared starting weights every sequence deploys from.
    pub pretrained_digest: String,
    /// Digest of the offline baseline weights, when that method ran.
    pub offline_digest: Option<String>,
    pub timing: TimingMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RqPairLabel {
    pub mixed: String,
    pub reference: String,
}

/// Wall-clock bookkeeping; excluded from determinism comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingMeta {
    pub total_seconds: f64,
    pub runs: Vec<RunTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub method: String,
    pub sequence: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub sequence: String,
    /// Final-scene segment errors: translational % and rotational degrees
    /// per 100 m.
    pub t_err: f64,
    pub r_err: f64,
    pub deployments: Vec<DeploymentSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentSummary {
    pub scene: String,
    pub frames: usize,
    pub accepted: usize,
    pub t_err: f64,
    pub r_err: f64,
    pub loop_edges: usize,
    pub chi2_before: Option<f64>,
    pub chi2_after: Option<f64>,
    /// Digests of the persisted and in-flight weights after hand-off.
    pub stored_digest: String,
    pub expert_digest: String,
    pub generalizer_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: String,
    pub aq_trans: f64,
    pub aq_rot: f64,
    pub rq_trans: f64,
    pub rq_rot: f64,
}

pub fn render_json(table: &ReportTable) -> String {
    let mut out = serde_json::to_string_pretty(table).expect("report serializes");
    out.push('\n');
    out
}

pub fn render_csv(table: &ReportTable) -> String {
    let mut out = String::from("method,sequence,t_err,r_err,frames,accepted,loop_edges\n");
    for row in &table.rows {
        let frames: usize = row.deployments.iter().map(|d| d.frames).sum();
        let accepted: usize = row.deployments.iter().map(|d| d.accepted).sum();
        let loops: usize = row.deployments.iter().map(|d| d.loop_edges).sum();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.method, row.sequence, row.t_err, row.r_err, frames, accepted, loops
        );
    }
    out
}

pub fn render_text(table: &ReportTable) -> String {
    let mut sequences: Vec<&str> = table.rows.iter().map(|r| r.sequence.as_str()).collect();
    sequences.dedup();
    sequences.sort_unstable();
    sequences.dedup();
    let methods = &table.meta.methods;

    let cell = |method: &str, sequence: &str| -> String {
        table
            .rows
            .iter()
            .find(|r| r.method == method && r.sequence == sequence)
            .map(|r| format!("{:.2} / {:.3}", r.t_err, r.r_err))
            .unwrap_or_else(|| "-".into())
    };

    let seq_width = sequences
        .iter()
        .map(|s| s.len())
        .chain(["sequence".len(), "AQ (t / r)".len()])
        .max()
        .unwrap_or(8);
    let mut col_widths = Vec::new();
    for method in methods {
        let mut width = method.len();
        for seq in &sequences {
            width = width.max(cell(method, seq).len());
        }
        width = width.max("t_err% / r_deg/100m".len() / 2);
        col_widths.push(width);
    }

    let mut out = String::new();
    let _ = writeln!(
        out,
        "config {}  seed {}  loops {}",
        &table.meta.config_hash[..12.min(table.meta.config_hash.len())],
        table.meta.seed,
        if table.meta.loops_enabled { "on" } else { "off" }
    );
    let _ = writeln!(out, "cells: t_err % / r_err deg per 100 m");
    let _ = write!(out, "{:<seq_width$}", "sequence");
    for (method, width) in methods.iter().zip(&col_widths) {
        let _ = write!(out, " | {method:<width$}");
    }
    out.push('\n');
    let total = seq_width + col_widths.iter().map(|w| w + 3).sum::<usize>();
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for seq in &sequences {
        let _ = write!(out, "{seq:<seq_width$}");
        for (method, width) in methods.iter().zip(&col_widths) {
            let _ = write!(out, " | {:<width$}", cell(method, seq));
        }
        out.push('\n');
    }
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for (label, pick) in [
        ("AQ (t / r)", 0usize),
        ("RQ (t / r)", 1usize),
    ] {
        let _ = write!(out, "{label:<seq_width$}");
        for (method, width) in methods.iter().zip(&col_widths) {
            let text = table
                .aggregates
                .iter()
                .find(|a| &a.method == method)
                .map(|a| {
                    if pick == 0 {
                        format!("{:.3} / {:.3}", a.aq_trans, a.aq_rot)
                    } else {
                        format!("{:+.4} / {:+.4}", a.rq_trans, a.rq_rot)
                    }
                })
                .unwrap_or_else(|| "-".into());
            let _ = write!(out, " | {text:<width$}");
        }
        out.push('\n');
    }
    out
}

fn write_synced(path: &Path, text: &str) -> Result<(), ReportError> {
    let mut f = File::create(path)?;
    f.write_all(text.as_bytes())?;
    f.sync_all()?;
    Ok(())
}

/// Writes report.json, report.csv, and report.txt into `dir`.
pub fn emit_report(table: &ReportTable, dir: &Path) -> Result<(), ReportError> {
    std::fs::create_dir_all(dir)?;
    write_synced(&dir.join("report.json"), &render_json(table))?;
    write_synced(&dir.join("report.csv"), &render_csv(table))?;
    write_synced(&dir.join("report.txt"), &render_text(table))?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<ReportTable, ReportError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| ReportError::Parse { path: path.display().to_string(), detail: e.to_string() })
}

/// JSON value with the volatile timing subtree removed; two runs of the
/// same config and seed must agree on this exactly.
pub fn comparable(table: &ReportTable) -> Value {
    let mut value = serde_json::to_value(table).expect("report serializes");
    if let Some(meta) = value.get_mut("meta").and_then(Value::as_object_mut) {
        meta.remove("timing");
    }
    value
}

/// One JSONL line per frame of one deployment.
pub fn render_deployment_log(scene: &str, frames: &[FrameRecord]) -> String {
    let mut out = String::new();
    for f in frames {
        let odometry: Value = match &f.odometry {
            Some(pose) => {
                Value::Array(pose.to_matrix_rows().iter().map(|v| json!(v)).collect())
            }
            None => Value::Null,
        };
        let line = json!({
            "scene": scene,
            "frame": f.frame_index,
            "accepted": f.accepted,
            "expert_losses": f.expert_losses,
            "generalizer_losses": f.generalizer_losses,
            "odometry": odometry,
        });
        let _ = writeln!(out, "{line}");
    }
    out
}

pub fn write_text_file(path: &Path, text: &str) -> Result<(), ReportError> {
    write_synced(path, text)
}
