//! JSON documents written by `eval` and `rank` and read back by `report`.

use std::fmt::Write as _;

use branchseg::difficulty::WorstKRow;
use branchseg::{DifficultyIndex, EvalConfig, Metrics, MetricsReport, ModelKind, Split};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;
pub const EVAL_FILE: &str = "eval.json";
pub const RANK_FILE: &str = "rank.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Eval,
    Rank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalModel {
    pub name: String,
    pub model_kind: ModelKind,
    pub weights_sha256: String,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub version: u32,
    pub kind: ArtifactKind,
    pub split: Split,
    pub dataset_sha256: String,
    pub config: EvalConfig,
    pub models: Vec<EvalModel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankArtifact {
    pub version: u32,
    pub kind: ArtifactKind,
    pub split: Split,
    pub dataset_sha256: String,
    pub index: DifficultyIndex,
    pub k: usize,
    pub max_depth_m: f64,
    pub config: EvalConfig,
    /// Hardest first.
    pub sample_ids: Vec<String>,
    pub worst_k: Vec<WorstKRow>,
    /// The same models over the whole split, for comparison.
    pub full_set: Vec<WorstKRow>,
}

/// Mean per-image inference time and weight size; kept apart from the
/// metrics so those stay reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub name: String,
    pub images: usize,
    pub mean_ms_per_image: f64,
    pub weights_bytes: u64,
    pub parameters: usize,
}

pub type MetricRow = (&'static str, fn(&Metrics) -> Option<f64>);

/// The six headline rows of the side-by-side table.
pub const EVAL_ROWS: [MetricRow; 6] = [
    ("Binary Accuracy", |m| Some(m.binary_accuracy)),
    ("Mean IoU", |m| Some(m.mean_iou)),
    ("Boundary F1", |m| Some(m.boundary_f1)),
    ("Branch Recall", |m| m.recall_branch),
    ("Non-branch Recall", |m| m.recall_nonbranch),
    ("Occluded Branch Recall", |m| m.recall_occluded),
];

pub type RankRow = (&'static str, fn(&WorstKRow) -> Option<f64>);

pub const RANK_ROWS: [RankRow; 3] = [
    ("Branch Recall", |r| r.branch_recall),
    ("Occluded Branch Recall", |r| r.occluded_recall),
    ("Mean IoU", |r| Some(r.mean_iou)),
];

pub fn percent(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.1}%", 100.0 * v),
        None => "n/a".into(),
    }
}

/// Markdown table with one row per metric and one column per model.
pub fn metric_table(header: &str, models: &[&str], rows: &[(&str, Vec<Option<f64>>)]) -> String {
    let mut out = String::new();
    write!(out, "| {header} |").unwrap();
    for m in models {
        write!(out, " {m} |").unwrap();
    }
    out.push_str("\n|---|");
    for _ in models {
        out.push_str("---:|");
    }
    out.push('\n');
    for (label, values) in rows {
        write!(out, "| {label} |").unwrap();
        for v in values {
            write!(out, " {} |", percent(*v)).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn eval_table(models: &[(&str, &Metrics)]) -> String {
    let names: Vec<&str> = models.iter().map(|(n, _)| *n).collect();
    let rows: Vec<(&str, Vec<Option<f64>>)> = EVAL_ROWS
        .iter()
        .map(|(label, f)| (*label, models.iter().map(|(_, m)| f(m)).collect()))
        .collect();
    metric_table("Metric", &names, &rows)
}

pub fn rank_table(rows: &[&WorstKRow]) -> String {
    let names: Vec<&str> = rows.iter().map(|r| r.model.as_str()).collect();
    let table: Vec<(&str, Vec<Option<f64>>)> = RANK_ROWS
        .iter()
        .map(|(label, f)| (*label, rows.iter().map(|r| f(r)).collect()))
        .collect();
    metric_table("Metric", &names, &table)
}

pub fn index_name(index: DifficultyIndex) -> &'static str {
    match index {
        DifficultyIndex::Occlusion => "occlusion",
        DifficultyIndex::Depth => "depth",
    }
}

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
    }
}
