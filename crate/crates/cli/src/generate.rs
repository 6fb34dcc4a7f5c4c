use std::path::PathBuf;

use branchseg::difficulty::{score_samples, DEFAULT_MAX_DEPTH_M};
use branchseg::{generate_dataset, Dataset, Preset};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::choices::PresetChoice;
use crate::error::CliResult;
use crate::run::{dataset_checksum, output_dir, resolve, write_json, RESOLVED_CONFIG_FILE};

pub const STATS_FILE: &str = "stats.json";

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    /// Dataset directory (default: a fresh run directory).
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// JSON file with settings; explicit flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Training samples [default: 471].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    /// Validation samples [default: 50].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_val: Option<usize>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<PresetChoice>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Mean fraction of branch pixels hidden by leaves [default: preset's].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub occlusion_target: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub preset: PresetChoice,
    pub seed: u64,
    pub occlusion_target: Option<f64>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            n_train: 471,
            n_val: 50,
            preset: PresetChoice::Tiny,
            seed: 0,
            occlusion_target: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateStats {
    pub n_train: usize,
    pub n_val: usize,
    pub branch_fraction: f64,
    pub occluded_fraction: f64,
    pub occluder_fraction: f64,
    pub mean_occlusion_index: f64,
    pub mean_depth_index: f64,
    pub sha256: String,
}

pub fn run(args: GenerateArgs) -> CliResult<()> {
    let mut cfg: GenerateConfig = resolve(GenerateConfig::default(), args.config.as_deref(), &args)?;
    let preset = Preset::from(cfg.preset);
    let mut params = preset.scene_params();
    let target = *cfg.occlusion_target.get_or_insert(params.occlusion_target);
    params.occlusion_target = target;

    let out = output_dir(args.out.as_deref(), "generate")?;
    let manifest = generate_dataset(&params, cfg.n_train, cfg.n_val, cfg.seed, &out)?;
    write_json(&out.join(RESOLVED_CONFIG_FILE), &cfg)?;

    let dataset = Dataset::open(&out)?;
    let samples = dataset
        .manifest()
        .samples
        .iter()
        .map(|e| dataset.load(e))
        .collect::<branchseg::Result<Vec<_>>>()?;
    let scores = score_samples(&samples, DEFAULT_MAX_DEPTH_M)?;
    let n = scores.len() as f64;
    let stats = GenerateStats {
        n_train: cfg.n_train,
        n_val: cfg.n_val,
        branch_fraction: manifest.stats.branch_fraction,
        occluded_fraction: manifest.stats.occluded_fraction,
        occluder_fraction: manifest.stats.occluder_fraction,
        mean_occlusion_index: scores.iter().map(|s| s.occlusion_index).sum::<f64>() / n,
        mean_depth_index: scores.iter().map(|s| s.depth_index).sum::<f64>() / n,
        sha256: dataset_checksum(&dataset)?,
    };
    write_json(&out.join(STATS_FILE), &stats)?;

    println!("dataset        {}", out.display());
    println!("samples        {} train / {} val", stats.n_train, stats.n_val);
    println!("branch pixels  {:.2}%", 100.0 * stats.branch_fraction);
    println!("occluded       {:.2}%", 100.0 * stats.occluded_fraction);
    println!("mean ODI       {:.4}", stats.mean_occlusion_index);
    println!("mean DDI       {:.4}", stats.mean_depth_index);
    println!("sha256         {}", stats.sha256);
    Ok(())
}
