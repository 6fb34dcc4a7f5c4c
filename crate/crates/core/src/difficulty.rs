//! Occlusion and depth difficulty indices and worst-k analysis.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::metrics::{aggregate, evaluate, EvalConfig, Metrics, MetricsReport, Segmenter};
use crate::sample::{DepthMap, Sample};

/// Depth readings beyond this are treated as undetected.
pub const DEFAULT_MAX_DEPTH_M: f64 = 4.0;
pub const DEFAULT_K: usize = 10;

/// |occluder ∩ label| / |label|.
pub fn occlusion_difficulty(occluder: &Mask, label: &Mask) -> Result<f64> {
    let total = label.count();
    if total == 0 {
        return Err(Error::Empty("occlusion difficulty label"));
    }
    Ok(occluder.intersection_count(label)? as f64 / total as f64)
}

/// 1 − |detected ∩ label| / |label| with detected = 0 < depth ≤ `max_depth_m`.
pub fn depth_difficulty(depth: &DepthMap, label: &Mask, max_depth_m: f64) -> Result<f64> {
    if depth.dims() != label.dims() {
        return Err(Error::shape(
            "depth difficulty",
            format!("{:?} depth vs {:?} label", depth.dims(), label.dims()),
        ));
    }
    let total = label.count();
    if total == 0 {
        return Err(Error::Empty("depth difficulty label"));
    }
    let detected = label
        .positions()
        .filter(|&(x, y)| {
            let d = depth.meters(x, y);
            d > 0.0 && d <= max_depth_m
        })
        .count();
    Ok(1.0 - detected as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyIndex {
    Occlusion,
    Depth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyScore {
    pub sample_id: String,
    pub occlusion_index: f64,
    pub depth_index: f64,
}

impl DifficultyScore {
    pub fn get(&self, which: DifficultyIndex) -> f64 {
        match which {
            DifficultyIndex::Occlusion => self.occlusion_index,
            DifficultyIndex::Depth => self.depth_index,
        }
    }
}

pub fn score_sample(sample: &Sample, max_depth_m: f64) -> Result<DifficultyScore> {
    let label = &sample.masks.branch;
    Ok(DifficultyScore {
        sample_id: sample.id.clone(),
        occlusion_index: occlusion_difficulty(&sample.masks.occluder, label)?,
        depth_index: depth_difficulty(&sample.depth, label, max_depth_m)?,
    })
}

/// Scores sorted by sample id.
pub fn score_samples(samples: &[Sample], max_depth_m: f64) -> Result<Vec<DifficultyScore>> {
    let mut scores = samples
        .iter()
        .map(|s| score_sample(s, max_depth_m))
        .collect::<Result<Vec<_>>>()?;
    scores.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(scores)
}

/// Ids of the `k` highest-scoring samples, hardest first; ties go to the lower id.
pub fn rank_worst_k(scores: &[DifficultyScore], which: DifficultyIndex, k: usize) -> Result<Vec<String>> {
    if k > scores.len() {
        return Err(Error::invalid(
            "rank worst k",
            format!("k = {k} exceeds the {} scored samples", scores.len()),
        ));
    }
    let mut order: Vec<&DifficultyScore> = scores.iter().collect();
    order.sort_by(|a, b| {
        b.get(which)
            .partial_cmp(&a.get(which))
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    Ok(order.into_iter().take(k).map(|s| s.sample_id.clone()).collect())
}

/// `sample_id,occlusion_index,depth_index` rows.
pub fn scores_csv(scores: &[DifficultyScore]) -> String {
    let mut out = String::from("sample_id,occlusion_index,depth_index\n");
    for s in scores {
        writeln!(out, "{},{},{}", s.sample_id, s.occlusion_index, s.depth_index).expect("write to string");
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstKRow {
    pub model: String,
    pub branch_recall: Option<f64>,
    pub occluded_recall: Option<f64>,
    pub mean_iou: f64,
}

impl WorstKRow {
    pub fn from_metrics(model: impl Into<String>, m: &Metrics) -> Self {
        WorstKRow {
            model: model.into(),
            branch_recall: m.recall_branch,
            occluded_recall: m.recall_occluded,
            mean_iou: m.mean_iou,
        }
    }

    /// Row for the `ids` subset of an existing per-sample report. Matches
    /// evaluating the subset directly, without running the model again.
    pub fn from_report(model: impl Into<String>, report: &MetricsReport, ids: &[String]) -> Result<Self> {
        let rows = ids
            .iter()
            .map(|id| {
                report
                    .per_sample
                    .iter()
                    .find(|r| &r.id == id)
                    .cloned()
                    .ok_or_else(|| Error::invalid("worst k row", format!("unknown sample id {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(WorstKRow::from_metrics(model, &aggregate(&rows)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstKReport {
    pub index: DifficultyIndex,
    pub k: usize,
    pub sample_ids: Vec<String>,
    pub rows: Vec<WorstKRow>,
}

/// Evaluates each named model on the `ids` subset of `samples`.
pub fn worst_k_report(
    models: &mut [(String, &mut dyn Segmenter)],
    samples: &[Sample],
    index: DifficultyIndex,
    ids: &[String],
    config: EvalConfig,
) -> Result<WorstKReport> {
    let subset: Vec<Sample> = ids
        .iter()
        .map(|id| {
            samples
                .iter()
                .find(|s| &s.id == id)
                .cloned()
                .ok_or_else(|| Error::invalid("worst k report", format!("unknown sample id {id}")))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(models.len());
    for (name, model) in models.iter_mut() {
        let report = evaluate(*model, &subset, config)?;
        rows.push(WorstKRow::from_metrics(name.clone(), &report.aggregate));
    }
    Ok(WorstKReport {
        index,
        k: ids.len(),
        sample_ids: ids.to_vec(),
        rows,
    })
}
