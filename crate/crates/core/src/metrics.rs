//! Segmentation metrics: pixel accuracy, IoU, boundary F1 and class recall,
//! per sample and as unweighted means over samples.

use serde::{Deserialize, Serialize};

use crate::data::assemble_batch;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::models::Model;
use crate::sample::Sample;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_TOLERANCE_PX: f64 = 2.0;
pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Counts over `region` when given, otherwise over the whole image.
pub fn confusion_counts(pred: &Mask, gt: &Mask, region: Option<&Mask>) -> Result<ConfusionCounts> {
    pred.check_same_size(gt, "confusion counts")?;
    if let Some(r) = region {
        pred.check_same_size(r, "confusion counts")?;
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if region.is_some_and(|r| !r.data()[i]) {
            continue;
        }
        match (p, g) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// (tp + tn) / total.
pub fn binary_accuracy(c: &ConfusionCounts) -> Result<f64> {
    if c.total() == 0 {
        return Err(Error::Empty("binary accuracy"));
    }
    Ok((c.tp + c.tn) as f64 / c.total() as f64)
}

/// tp / (tp + fp + fn); 1.0 when the class is absent from both masks.
pub fn iou(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    }
}

/// Branch-class and non-branch-class IoU.
pub fn class_ious(pred: &Mask, gt: &Mask) -> Result<(f64, f64)> {
    let c = confusion_counts(pred, gt, None)?;
    let inverted = ConfusionCounts {
        tp: c.tn,
        tn: c.tp,
        fp: c.fn_,
        fn_: c.fp,
    };
    Ok((iou(&c), iou(&inverted)))
}

pub fn mean_iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (b, nb) = class_ious(pred, gt)?;
    Ok((b + nb) / 2.0)
}

/// Offsets within Euclidean distance `tolerance` of the origin.
fn disk(tolerance: f64) -> Vec<(isize, isize)> {
    let r = tolerance.floor() as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dx * dx + dy * dy) as f64) <= tolerance * tolerance {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Fraction of `from` pixels with a `to` pixel within the disk.
fn matched_fraction(from: &Mask, to: &Mask, disk: &[(isize, isize)]) -> f64 {
    let (w, h) = (to.width() as isize, to.height() as isize);
    let total = from.count();
    let hits = from
        .positions()
        .filter(|&(x, y)| {
            disk.iter().any(|&(dx, dy)| {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                nx >= 0 && ny >= 0 && nx < w && ny < h && to.get(nx as usize, ny as usize)
            })
        })
        .count();
    hits as f64 / total as f64
}

/// Boundary F1 with pixels matched within `tolerance_px` (Euclidean).
/// Both boundaries empty gives 1.0, exactly one empty gives 0.0.
pub fn boundary_f1(pred: &Mask, gt: &Mask, tolerance_px: f64) -> Result<f64> {
    pred.check_same_size(gt, "boundary f1")?;
    if !(tolerance_px >= 0.0 && tolerance_px.is_finite()) {
        return Err(Error::invalid(
            "boundary f1",
            "tolerance must be finite and non-negative",
        ));
    }
    let (pb, gb) = (pred.boundary(), gt.boundary());
    match (pb.any(), gb.any()) {
        (false, false) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        (true, true) => {}
    }
    let d = disk(tolerance_px);
    let precision = matched_fraction(&pb, &gb, &d);
    let recall = matched_fraction(&gb, &pb, &d);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Share of `class_mask` pixels predicted positive; `None` for an empty class.
pub fn class_recall(pred: &Mask, class_mask: &Mask) -> Result<Option<f64>> {
    let total = class_mask.count();
    if total == 0 {
        pred.check_same_size(class_mask, "class recall")?;
        return Ok(None);
    }
    Ok(Some(pred.intersection_count(class_mask)? as f64 / total as f64))
}

/// Positive where probability ≥ `threshold`.
pub fn binarize(probs: &[f32], width: usize, height: usize, threshold: f64) -> Result<Mask> {
    Mask::from_vec(
        width,
        height,
        probs.iter().map(|&p| f64::from(p) >= threshold).collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub threshold: f64,
    pub tolerance_px: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: DEFAULT_THRESHOLD,
            tolerance_px: DEFAULT_TOLERANCE_PX,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid("evaluate", "threshold must lie in (0, 1)"));
        }
        if !(self.tolerance_px >= 0.0 && self.tolerance_px.is_finite()) {
            return Err(Error::invalid("evaluate", "tolerance must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Metric values shared by per-sample rows and aggregates. Recalls are absent
/// when the class has no pixels (or, in aggregates, in no sample).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub binary_accuracy: f64,
    pub iou_branch: f64,
    pub iou_nonbranch: f64,
    pub mean_iou: f64,
    pub boundary_f1: f64,
    pub recall_branch: Option<f64>,
    pub recall_nonbranch: Option<f64>,
    pub recall_occluded: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

pub fn sample_metrics(pred: &Mask, gt: &Mask, occluded: &Mask, tolerance_px: f64) -> Result<Metrics> {
    let counts = confusion_counts(pred, gt, None)?;
    let (iou_branch, iou_nonbranch) = class_ious(pred, gt)?;
    Ok(Metrics {
        binary_accuracy: binary_accuracy(&counts)?,
        iou_branch,
        iou_nonbranch,
        mean_iou: (iou_branch + iou_nonbranch) / 2.0,
        boundary_f1: boundary_f1(pred, gt, tolerance_px)?,
        recall_branch: class_recall(pred, gt)?,
        recall_nonbranch: class_recall(&pred.not(), &gt.not())?,
        recall_occluded: class_recall(pred, occluded)?,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Unweighted mean over samples; recalls average over samples where present.
pub fn aggregate(rows: &[SampleMetrics]) -> Result<Metrics> {
    if rows.is_empty() {
        return Err(Error::Empty("aggregate metrics"));
    }
    // Sort by id so the floating-point sum does not depend on input order.
    let mut sorted: Vec<&Metrics> = Vec::with_capacity(rows.len());
    let mut order: Vec<&SampleMetrics> = rows.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    sorted.extend(order.iter().map(|r| &r.metrics));
    let field = |f: fn(&Metrics) -> f64| mean(sorted.iter().map(|m| f(m))).expect("nonempty");
    let opt = |f: fn(&Metrics) -> Option<f64>| mean(sorted.iter().filter_map(|m| f(m)));
    let iou_branch = field(|m| m.iou_branch);
    let iou_nonbranch = field(|m| m.iou_nonbranch);
    Ok(Metrics {
        binary_accuracy: field(|m| m.binary_accuracy),
        iou_branch,
        iou_nonbranch,
        mean_iou: (iou_branch + iou_nonbranch) / 2.0,
        boundary_f1: field(|m| m.boundary_f1),
        recall_branch: opt(|m| m.recall_branch),
        recall_nonbranch: opt(|m| m.recall_nonbranch),
        recall_occluded: opt(|m| m.recall_occluded),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_sample: Vec<SampleMetrics>,
    pub aggregate: Metrics,
    pub config: EvalConfig,
}

impl MetricsReport {
    pub fn from_rows(mut rows: Vec<SampleMetrics>, config: EvalConfig) -> Result<Self> {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(MetricsReport {
            aggregate: aggregate(&rows)?,
            per_sample: rows,
            config,
        })
    }
}

/// Anything that maps an RGBD batch `[N,4,H,W]` to probabilities `[N,1,H,W]`.
pub trait Segmenter {
    fn segment(&mut self, inputs: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Segmenter for Model<f32> {
    fn segment(&mut self, inputs: &Tensor<f32>) -> Result<Tensor<f32>> {
        if !self.spec().is_segmenter() {
            return Err(Error::invalid("segment", "a discriminator is not a segmenter"));
        }
        self.set_mode(crate::autodiff::Mode::Infer);
        self.predict(inputs)
    }
}

/// Binarized predictions for each sample, batched `batch_size` at a time.
pub fn predict_masks(
    model: &mut dyn Segmenter,
    samples: &[Sample],
    threshold: f64,
    batch_size: usize,
) -> Result<Vec<Mask>> {
    if batch_size == 0 {
        return Err(Error::invalid("predict masks", "batch size must be at least 1"));
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = assemble_batch(&refs)?;
        let probs = model.segment(&batch.inputs)?;
        let [n, c, h, w] = probs.dims4()?;
        if (n, c) != (chunk.len(), 1) || (w, h) != (chunk[0].width(), chunk[0].height()) {
            return Err(Error::shape(
                "predict masks",
                format!("segmenter returned {:?}", probs.shape()),
            ));
        }
        for i in 0..n {
            out.push(binarize(&probs.data()[i * h * w..(i + 1) * h * w], w, h, threshold)?);
        }
    }
    Ok(out)
}

/// Scores predicted masks against their samples.
pub fn score(preds: &[Mask], samples: &[Sample], config: EvalConfig) -> Result<MetricsReport> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("evaluate"));
    }
    if preds.len() != samples.len() {
        return Err(Error::shape(
            "evaluate",
            format!("{} predictions for {} samples", preds.len(), samples.len()),
        ));
    }
    let rows = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| {
            Ok(SampleMetrics {
                id: s.id.clone(),
                metrics: sample_metrics(p, &s.masks.branch, &s.masks.occluded_branch, config.tolerance_px)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_rows(rows, config)
}

/// Runs `model` over `samples` and scores it.
pub fn evaluate(model: &mut dyn Segmenter, samples: &[Sample], config: EvalConfig) -> Result<MetricsReport> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("evaluate"));
    }
    let preds = predict_masks(model, samples, config.threshold, 8)?;
    score(&preds, samples, config)
}
