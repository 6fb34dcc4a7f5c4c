use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use branchseg::metrics::{predict_masks, score, DEFAULT_THRESHOLD, DEFAULT_TOLERANCE_PX};
use branchseg::{weights, Dataset, EvalConfig, MetricsReport, Model, Sample, Split};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    eval_table, split_name, ArtifactKind, EvalArtifact, EvalModel, TimingRow, EVAL_FILE, SCHEMA_VERSION,
};
use crate::choices::SplitChoice;
use crate::error::{CliError, CliResult};
use crate::run::{
    dataset_checksum, output_dir, parse_weights_args, prepare, require, resolve, sha256_hex, write_json, write_text,
    RESOLVED_CONFIG_FILE,
};

pub const EVAL_TABLE_FILE: &str = "eval.md";
pub const TIMING_FILE: &str = "timing.json";
const PREDICT_BATCH: usize = 8;

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Run directory (default: a fresh timestamped directory).
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// JSON file with settings; explicit flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Weight files as PATH or NAME=PATH; repeatable.
    #[arg(long, num_args = 1..)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub weights: Vec<String>,
    /// Probability at or above which a pixel counts as branch [default: 0.5].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// Boundary match distance in pixels [default: 2].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance_px: Option<f64>,
    /// [default: val]
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitChoice>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRunConfig {
    pub data: Option<PathBuf>,
    pub weights: Vec<String>,
    pub threshold: f64,
    pub tolerance_px: f64,
    pub split: SplitChoice,
}

impl Default for EvalRunConfig {
    fn default() -> Self {
        EvalRunConfig {
            data: None,
            weights: Vec::new(),
            threshold: DEFAULT_THRESHOLD,
            tolerance_px: DEFAULT_TOLERANCE_PX,
            split: SplitChoice::Val,
        }
    }
}

pub(crate) struct LoadedModel {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
    pub model: Model<f32>,
}

pub(crate) fn load_models(args: &[String]) -> CliResult<Vec<LoadedModel>> {
    parse_weights_args(args)?
        .into_iter()
        .map(|(name, path)| {
            let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
            let model = weights::from_bytes(&bytes)?;
            if !model.spec().is_segmenter() {
                return Err(CliError::Usage(format!(
                    "{}: discriminator weights cannot be evaluated",
                    path.display()
                )));
            }
            Ok(LoadedModel {
                name,
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
                model,
            })
        })
        .collect()
}

pub(crate) fn load_eval_split(data: &PathBuf, split: Split) -> CliResult<(Dataset, Vec<Sample>)> {
    let dataset = Dataset::open(data)?;
    let samples = dataset.load_split(split)?;
    if samples.is_empty() {
        return Err(CliError::Data(format!(
            "{}: the {} split is empty",
            data.display(),
            split_name(split)
        )));
    }
    Ok((dataset, samples))
}

/// Evaluates `model` on `samples` resized to its input size. Returns the
/// report and the mean inference time per image in milliseconds.
pub(crate) fn evaluate_timed(
    model: &mut Model<f32>,
    samples: &[Sample],
    cache: &mut BTreeMap<usize, Vec<Sample>>,
    config: EvalConfig,
) -> CliResult<(MetricsReport, f64)> {
    let size = model.spec().input_size;
    let prepared = match cache.entry(size) {
        std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
        std::collections::btree_map::Entry::Vacant(e) => e.insert(prepare(samples, size)?),
    };
    let started = Instant::now();
    let preds = predict_masks(model, prepared, config.threshold, PREDICT_BATCH)?;
    let ms = started.elapsed().as_secs_f64() * 1e3 / prepared.len() as f64;
    Ok((score(&preds, prepared, config)?, ms))
}

pub fn run(args: EvalArgs) -> CliResult<()> {
    let cfg: EvalRunConfig = resolve(EvalRunConfig::default(), args.config.as_deref(), &args)?;
    let data = require(cfg.data.clone(), "--data")?;
    let config = EvalConfig {
        threshold: cfg.threshold,
        tolerance_px: cfg.tolerance_px,
    };
    config.validate()?;
    let mut models = load_models(&cfg.weights)?;
    let split = Split::from(cfg.split);
    let (dataset, samples) = load_eval_split(&data, split)?;
    let checksum = dataset_checksum(&dataset)?;

    let out = output_dir(args.out.as_deref(), "eval")?;
    write_json(&out.join(RESOLVED_CONFIG_FILE), &cfg)?;

    let mut cache = BTreeMap::new();
    let mut entries = Vec::with_capacity(models.len());
    let mut timing = Vec::with_capacity(models.len());
    for m in &mut models {
        let (report, ms) = evaluate_timed(&mut m.model, &samples, &mut cache, config)?;
        timing.push(TimingRow {
            name: m.name.clone(),
            images: samples.len(),
            mean_ms_per_image: ms,
            weights_bytes: m.bytes,
            parameters: m.model.parameter_count(),
        });
        entries.push(EvalModel {
            name: m.name.clone(),
            model_kind: m.model.spec().kind(),
            weights_sha256: m.sha256.clone(),
            report,
        });
    }
    let artifact = EvalArtifact {
        version: SCHEMA_VERSION,
        kind: ArtifactKind::Eval,
        split,
        dataset_sha256: checksum,
        config,
        models: entries,
    };
    write_json(&out.join(EVAL_FILE), &artifact)?;
    write_json(&out.join(TIMING_FILE), &timing)?;
    let rows: Vec<(&str, &branchseg::Metrics)> = artifact
        .models
        .iter()
        .map(|m| (m.name.as_str(), &m.report.aggregate))
        .collect();
    let table = eval_table(&rows);
    write_text(&out.join(EVAL_TABLE_FILE), &table)?;

    println!("{} samples from the {} split\n", samples.len(), split_name(split));
    print!("{table}");
    println!();
    for t in &timing {
        println!(
            "{}: {:.2} ms per image, {} parameters, {} bytes of weights",
            t.name, t.mean_ms_per_image, t.parameters, t.weights_bytes
        );
    }
    println!("\nresults written to {}", out.display());
    Ok(())
}
