//! Supervised and adversarial training loops.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Mode, Var};
use crate::data::{assemble_batch, epoch_batches, Batch};
use crate::error::{Error, Result};
use crate::losses::{cgan_generator_var, discriminator_var, LossConfig, LossKind, DICE_SMOOTH};
use crate::models::{Model, ModelKind};
use crate::optim::{Adam, AdamConfig};
use crate::sample::Sample;
use crate::tensor::Tensor;

pub const DEFAULT_EPOCHS: usize = 140;
pub const DEFAULT_BATCH_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn new(loss: LossConfig) -> Self {
        TrainConfig {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            loss,
            adam: AdamConfig::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("train", "batch size must be at least 1"));
        }
        self.loss.validate()
    }
}

/// Mean loss over the batches of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub loss_name: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<LossRecord>,
    pub generator_steps: u64,
    /// Zero for supervised runs.
    pub discriminator_steps: u64,
}

impl TrainReport {
    /// Value of `loss_name` at the last epoch it was recorded.
    pub fn final_loss(&self, loss_name: &str) -> Option<f64> {
        self.curve
            .iter()
            .rev()
            .find(|r| r.loss_name == loss_name)
            .map(|r| r.value)
    }
}

/// `epoch,loss_name,value` rows.
pub fn curve_csv(curve: &[LossRecord]) -> String {
    let mut out = String::from("epoch,loss_name,value\n");
    for r in curve {
        writeln!(out, "{},{},{}", r.epoch, r.loss_name, r.value).expect("write to string");
    }
    out
}

fn diverged(epoch: usize, err: Error) -> Error {
    match err {
        Error::NonFinite { op } => Error::Divergence {
            epoch,
            loss_name: op.to_string(),
            value: f64::NAN,
        },
        other => other,
    }
}

fn check_finite(epoch: usize, name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            epoch,
            loss_name: name.to_string(),
            value,
        })
    }
}

/// Gradient for each parameter leaf, summed over every forward pass that
/// recorded the parameters.
fn collect_grads(grads: &mut Gradients<f32>, passes: &[&[Var]], model: &Model<f32>) -> Vec<Tensor<f32>> {
    model
        .params()
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut acc: Option<Tensor<f32>> = None;
            for vars in passes {
                if let Some(g) = grads.take(vars[i]) {
                    acc = Some(match acc {
                        None => g,
                        Some(mut a) => {
                            a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                            a
                        }
                    });
                }
            }
            acc.unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()))
        })
        .collect()
}

struct EpochMeans {
    names: Vec<&'static str>,
    sums: Vec<f64>,
    batches: usize,
}

impl EpochMeans {
    fn new(names: &[&'static str]) -> Self {
        EpochMeans {
            names: names.to_vec(),
            sums: vec![0.0; names.len()],
            batches: 0,
        }
    }

    fn add(&mut self, values: &[f64]) {
        self.sums.iter_mut().zip(values).for_each(|(s, v)| *s += v);
        self.batches += 1;
    }

    fn records(&self, epoch: usize) -> Vec<LossRecord> {
        self.names
            .iter()
            .zip(&self.sums)
            .map(|(n, s)| LossRecord {
                epoch,
                loss_name: n.to_string(),
                value: s / self.batches as f64,
            })
            .collect()
    }
}

fn batches_for_epoch(samples: &[Sample], cfg: &TrainConfig, epoch: usize) -> Result<Vec<Batch>> {
    epoch_batches(samples.len(), cfg.batch_size, cfg.seed, epoch)?
        .into_iter()
        .map(|idx| {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            assemble_batch(&refs)
        })
        .collect()
}

/// Trains a segmenter with weighted dice or L1. `on_epoch` sees each epoch's
/// mean losses as they are produced.
pub fn train_supervised(
    model: &mut Model<f32>,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&[LossRecord]),
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if !model.spec().is_segmenter() {
        return Err(Error::invalid("train", "cannot train a discriminator on its own"));
    }
    let name = match cfg.loss.kind {
        LossKind::Wdl => "wdl",
        LossKind::L1 => "l1",
        LossKind::HybridCgan => {
            return Err(Error::invalid("train", "the hybrid objective needs a discriminator"));
        }
    };
    model.set_mode(Mode::Train);
    model.reseed_dropout(cfg.seed);
    let mut adam = Adam::new(cfg.adam, model.params().params());
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let mut means = EpochMeans::new(&[name]);
        for batch in batches_for_epoch(samples, cfg, epoch)? {
            let mut g = Graph::new();
            let x = g.constant(batch.inputs);
            let step = (|| {
                let fwd = model.forward(&mut g, x, true)?;
                let loss = match cfg.loss.kind {
                    LossKind::Wdl => g.weighted_dice(
                        fwd.output,
                        &batch.targets,
                        cfg.loss.class_weights.as_array(),
                        DICE_SMOOTH,
                    )?,
                    _ => g.l1(fwd.output, &batch.targets)?,
                };
                let value = f64::from(g.value(loss).item()?);
                let mut grads = g.backward(loss)?;
                Ok::<_, Error>((value, collect_grads(&mut grads, &[&fwd.params], model)))
            })();
            let (value, grads) = step.map_err(|e| diverged(epoch, e))?;
            check_finite(epoch, name, value)?;
            adam.step(model.params_mut().params_mut(), &grads)
                .map_err(|e| diverged(epoch, e))?;
            report.generator_steps += 1;
            means.add(&[value]);
        }
        let records = means.records(epoch);
        on_epoch(&records);
        report.curve.extend(records);
    }
    model.set_mode(Mode::Infer);
    Ok(report)
}

pub const GAN_LOSS_NAMES: [&str; 4] = [
    "discriminator",
    "generator_adversarial",
    "generator_l1",
    "generator_total",
];

/// Alternates one discriminator step and one generator step per batch.
pub fn train_gan(
    generator: &mut Model<f32>,
    discriminator: &mut Model<f32>,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&[LossRecord]),
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if generator.spec().kind() != ModelKind::Pix2pixGenerator
        || discriminator.spec().kind() != ModelKind::PatchganDiscriminator
    {
        return Err(Error::invalid(
            "train gan",
            "needs a pix2pix generator and a patchgan discriminator",
        ));
    }
    if cfg.loss.kind != LossKind::HybridCgan {
        return Err(Error::invalid(
            "train gan",
            "adversarial training uses the hybrid objective",
        ));
    }
    generator.set_mode(Mode::Train);
    discriminator.set_mode(Mode::Train);
    generator.reseed_dropout(cfg.seed);
    discriminator.reseed_dropout(cfg.seed.wrapping_add(1));
    let mut adam_g = Adam::new(cfg.adam, generator.params().params());
    let mut adam_d = Adam::new(cfg.adam, discriminator.params().params());
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let mut means = EpochMeans::new(&GAN_LOSS_NAMES);
        for batch in batches_for_epoch(samples, cfg, epoch)? {
            let mut g = Graph::new();
            let x = g.constant(batch.inputs);
            let target = g.constant(batch.targets.clone());
            let values = (|| {
                let fake = generator.forward(&mut g, x, true)?;
                let detached = g.constant(g.value(fake.output).clone());

                let real = discriminator.discriminate(&mut g, x, target, true)?;
                let fake_d = discriminator.discriminate(&mut g, x, detached, true)?;
                let d_loss = discriminator_var(&mut g, real.output, fake_d.output)?;
                let d_value = f64::from(g.value(d_loss).item()?);
                check_finite(epoch, "discriminator", d_value)?;
                let mut grads = g.backward(d_loss)?;
                let d_grads = collect_grads(&mut grads, &[&real.params, &fake_d.params], discriminator);
                adam_d.step(discriminator.params_mut().params_mut(), &d_grads)?;

                // Generator step against the updated discriminator.
                let judged = discriminator.discriminate(&mut g, x, fake.output, false)?;
                let (total, adversarial, l1) =
                    cgan_generator_var(&mut g, judged.output, fake.output, &batch.targets, cfg.loss.lambda_l1)?;
                let values = [
                    d_value,
                    f64::from(g.value(adversarial).item()?),
                    f64::from(g.value(l1).item()?),
                    f64::from(g.value(total).item()?),
                ];
                check_finite(epoch, "generator_total", values[3])?;
                let mut grads = g.backward(total)?;
                let g_grads = collect_grads(&mut grads, &[&fake.params], generator);
                adam_g.step(generator.params_mut().params_mut(), &g_grads)?;
                Ok::<_, Error>(values)
            })()
            .map_err(|e| diverged(epoch, e))?;
            report.discriminator_steps += 1;
            report.generator_steps += 1;
            means.add(&values);
        }
        let records = means.records(epoch);
        on_epoch(&records);
        report.curve.extend(records);
    }
    generator.set_mode(Mode::Infer);
    discriminator.set_mode(Mode::Infer);
    Ok(report)
}
