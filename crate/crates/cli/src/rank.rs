use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use branchseg::difficulty::{rank_worst_k, score_samples, scores_csv, WorstKRow, DEFAULT_K, DEFAULT_MAX_DEPTH_M};
use branchseg::metrics::{DEFAULT_THRESHOLD, DEFAULT_TOLERANCE_PX};
use branchseg::{DifficultyIndex, EvalConfig, Split};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::artifacts::{index_name, rank_table, split_name, ArtifactKind, RankArtifact, RANK_FILE, SCHEMA_VERSION};
use crate::choices::{IndexChoice, SplitChoice};
use crate::error::CliResult;
use crate::eval::{evaluate_timed, load_eval_split, load_models};
use crate::run::{dataset_checksum, output_dir, require, resolve, write_json, write_text, RESOLVED_CONFIG_FILE};

pub const SCORES_FILE: &str = "scores.csv";
pub const RANK_TABLE_FILE: &str = "rank.md";

#[derive(Debug, Args, Serialize)]
pub struct RankArgs {
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
    /// Difficulty index to rank by [default: occlusion].
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<IndexChoice>,
    /// Number of hardest samples to evaluate on [default: 10].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Weight files as PATH or NAME=PATH; repeatable. Without any, only
    /// scores and the ranking are written.
    #[arg(long, num_args = 1..)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub weights: Vec<String>,
    /// Depth readings beyond this many metres count as missing [default: 4].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_depth: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance_px: Option<f64>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitChoice>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRunConfig {
    pub data: Option<PathBuf>,
    pub index: IndexChoice,
    pub k: usize,
    pub weights: Vec<String>,
    pub max_depth: f64,
    pub threshold: f64,
    pub tolerance_px: f64,
    pub split: SplitChoice,
}

impl Default for RankRunConfig {
    fn default() -> Self {
        RankRunConfig {
            data: None,
            index: IndexChoice::Occlusion,
            k: DEFAULT_K,
            weights: Vec::new(),
            max_depth: DEFAULT_MAX_DEPTH_M,
            threshold: DEFAULT_THRESHOLD,
            tolerance_px: DEFAULT_TOLERANCE_PX,
            split: SplitChoice::Val,
        }
    }
}

pub fn run(args: RankArgs) -> CliResult<()> {
    let cfg: RankRunConfig = resolve(RankRunConfig::default(), args.config.as_deref(), &args)?;
    let data = require(cfg.data.clone(), "--data")?;
    let config = EvalConfig {
        threshold: cfg.threshold,
        tolerance_px: cfg.tolerance_px,
    };
    config.validate()?;
    if !(cfg.max_depth > 0.0 && cfg.max_depth.is_finite()) {
        return Err(crate::CliError::Usage("--max-depth must be positive".into()));
    }
    let index = DifficultyIndex::from(cfg.index);
    let split = Split::from(cfg.split);
    let mut models = if cfg.weights.is_empty() {
        Vec::new()
    } else {
        load_models(&cfg.weights)?
    };
    let (dataset, samples) = load_eval_split(&data, split)?;
    let scores = score_samples(&samples, cfg.max_depth)?;
    let ids = rank_worst_k(&scores, index, cfg.k)?;
    let checksum = dataset_checksum(&dataset)?;

    let out = output_dir(args.out.as_deref(), "rank")?;
    write_json(&out.join(RESOLVED_CONFIG_FILE), &cfg)?;
    write_text(&out.join(SCORES_FILE), &scores_csv(&scores))?;

    let mut cache = BTreeMap::new();
    let mut worst_k = Vec::with_capacity(models.len());
    let mut full_set = Vec::with_capacity(models.len());
    for m in &mut models {
        let (report, _) = evaluate_timed(&mut m.model, &samples, &mut cache, config)?;
        worst_k.push(WorstKRow::from_report(m.name.clone(), &report, &ids)?);
        full_set.push(WorstKRow::from_metrics(m.name.clone(), &report.aggregate));
    }
    let artifact = RankArtifact {
        version: SCHEMA_VERSION,
        kind: ArtifactKind::Rank,
        split,
        dataset_sha256: checksum,
        index,
        k: cfg.k,
        max_depth_m: cfg.max_depth,
        config,
        sample_ids: ids,
        worst_k,
        full_set,
    };
    write_json(&out.join(RANK_FILE), &artifact)?;
    let by_id: BTreeMap<&str, f64> = scores.iter().map(|s| (s.sample_id.as_str(), s.get(index))).collect();
    let md = rank_markdown(&artifact, &by_id);
    write_text(&out.join(RANK_TABLE_FILE), &md)?;
    print!("{md}");
    println!("\nresults written to {}", out.display());
    Ok(())
}

fn rank_markdown(a: &RankArtifact, scores: &BTreeMap<&str, f64>) -> String {
    let mut md = String::new();
    writeln!(
        md,
        "# Worst {} of the {} split by {} difficulty\n",
        a.k,
        split_name(a.split),
        index_name(a.index)
    )
    .unwrap();
    md.push_str("| Rank | Sample | Index |\n|---:|---|---:|\n");
    for (i, id) in a.sample_ids.iter().enumerate() {
        writeln!(md, "| {} | {} | {:.4} |", i + 1, id, scores[id.as_str()]).unwrap();
    }
    if !a.worst_k.is_empty() {
        md.push_str("\n## Hardest samples\n\n");
        md.push_str(&rank_table(&a.worst_k.iter().collect::<Vec<_>>()));
        md.push_str("\n## Whole split\n\n");
        md.push_str(&rank_table(&a.full_set.iter().collect::<Vec<_>>()));
    }
    md
}
