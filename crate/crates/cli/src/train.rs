use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use branchseg::losses::{compute_class_weights, DEFAULT_LAMBDA_L1};
use branchseg::train::{curve_csv, train_gan, train_supervised, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS};
use branchseg::{
    weights, ClassWeights, Dataset, LossConfig, LossRecord, Model, ModelKind, ModelSpec, Preset, Split, TrainConfig,
};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::choices::{check_pairing, LossChoice, ModelChoice, PresetChoice};
use crate::error::{CliError, CliResult};
use crate::run::{
    dataset_checksum, output_dir, prepare, require, resolve, write_json, write_text, RESOLVED_CONFIG_FILE,
};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const DISCRIMINATOR_FILE: &str = "discriminator.bin";
pub const CURVE_FILE: &str = "loss_curve.csv";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Run directory (default: a fresh timestamped directory).
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// JSON file with settings; explicit flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelChoice>,
    /// Training objective [default: hybrid for p2p-gan, else wdl].
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossChoice>,
    /// [default: 140]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// [default: 8]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<PresetChoice>,
    /// Weight of the L1 term in the hybrid objective [default: 100].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_l1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub data: Option<PathBuf>,
    pub model: Option<ModelChoice>,
    pub loss: Option<LossChoice>,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub preset: PresetChoice,
    pub lambda_l1: f64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            data: None,
            model: None,
            loss: None,
            epochs: DEFAULT_EPOCHS,
            batch: DEFAULT_BATCH_SIZE,
            seed: 0,
            preset: PresetChoice::Tiny,
            lambda_l1: DEFAULT_LAMBDA_L1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub version: u32,
    pub model: ModelChoice,
    pub loss: LossChoice,
    pub spec: ModelSpec,
    pub parameters: usize,
    pub dataset_sha256: String,
    pub train_samples: usize,
    pub class_weights: ClassWeights,
    pub epochs: usize,
    pub generator_steps: u64,
    pub discriminator_steps: u64,
    pub final_losses: BTreeMap<String, f64>,
}

pub fn run(args: TrainArgs) -> CliResult<()> {
    let mut cfg: TrainRunConfig = resolve(TrainRunConfig::default(), args.config.as_deref(), &args)?;
    let data = require(cfg.data.clone(), "--data")?;
    let model_choice = require(cfg.model, "--model")?;
    let loss_choice = *cfg.loss.get_or_insert(model_choice.default_loss());
    check_pairing(model_choice, loss_choice).map_err(CliError::Usage)?;
    if cfg.batch == 0 {
        return Err(CliError::Usage("--batch must be at least 1".into()));
    }

    let dataset = Dataset::open(&data)?;
    let checksum = dataset_checksum(&dataset)?;
    let preset = Preset::from(cfg.preset);
    let spec = preset.model_spec(model_choice.kind());
    let samples = prepare(&dataset.load_split(Split::Train)?, spec.input_size)?;
    if samples.is_empty() {
        return Err(CliError::Data(format!("{}: the train split is empty", data.display())));
    }

    let mut loss = LossConfig::new(loss_choice.kind());
    loss.lambda_l1 = cfg.lambda_l1;
    loss.class_weights = compute_class_weights(samples.iter().map(|s| &s.masks.branch))?;
    let mut train_cfg = TrainConfig::new(loss);
    train_cfg.epochs = cfg.epochs;
    train_cfg.batch_size = cfg.batch;
    train_cfg.seed = cfg.seed;

    let out = output_dir(args.out.as_deref(), "train")?;
    write_json(&out.join(RESOLVED_CONFIG_FILE), &cfg)?;

    let mut model = Model::<f32>::build(&spec, cfg.seed)?;
    println!(
        "training {} ({} parameters) with {} on {} samples, {} epochs",
        model_choice.name(),
        model.parameter_count(),
        loss_choice.name(),
        samples.len(),
        cfg.epochs
    );
    let started = Instant::now();
    let every = (cfg.epochs / 20).max(1);
    let epochs = cfg.epochs;
    let progress = |records: &[LossRecord]| {
        let epoch = records.first().map_or(0, |r| r.epoch);
        if epoch.is_multiple_of(every) || epoch + 1 == epochs {
            let losses: Vec<String> = records
                .iter()
                .map(|r| format!("{}={:.5}", r.loss_name, r.value))
                .collect();
            println!(
                "epoch {:>4}  {}  ({:.1}s)",
                epoch + 1,
                losses.join("  "),
                started.elapsed().as_secs_f64()
            );
        }
    };
    let report = if model_choice == ModelChoice::P2pGan {
        let disc_spec = preset.model_spec(ModelKind::PatchganDiscriminator);
        let mut disc = Model::<f32>::build(&disc_spec, cfg.seed.wrapping_add(1))?;
        let report = train_gan(&mut model, &mut disc, &samples, &train_cfg, progress)?;
        weights::save(&disc, out.join(DISCRIMINATOR_FILE))?;
        report
    } else {
        train_supervised(&mut model, &samples, &train_cfg, progress)?
    };
    weights::save(&model, out.join(WEIGHTS_FILE))?;
    write_text(&out.join(CURVE_FILE), &curve_csv(&report.curve))?;

    let mut final_losses = BTreeMap::new();
    for r in &report.curve {
        final_losses.insert(r.loss_name.clone(), r.value);
    }
    let summary = TrainSummary {
        version: 1,
        model: model_choice,
        loss: loss_choice,
        spec,
        parameters: model.parameter_count(),
        dataset_sha256: checksum,
        train_samples: samples.len(),
        class_weights: loss.class_weights,
        epochs: cfg.epochs,
        generator_steps: report.generator_steps,
        discriminator_steps: report.discriminator_steps,
        final_losses,
    };
    write_json(&out.join(TRAIN_REPORT_FILE), &summary)?;
    println!("weights written to {}", out.join(WEIGHTS_FILE).display());
    Ok(())
}
