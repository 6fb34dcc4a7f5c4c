//! Training objectives: weighted dice, L1 and the conditional-GAN pair.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::{Float, Tensor};

pub const DICE_SMOOTH: f64 = 1.0;
pub const DEFAULT_LAMBDA_L1: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Wdl,
    L1,
    HybridCgan,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub branch: f64,
    pub non_branch: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        ClassWeights {
            branch: 1.0,
            non_branch: 1.0,
        }
    }
}

impl ClassWeights {
    pub fn as_array(&self) -> [f64; 2] {
        [self.branch, self.non_branch]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub lambda_l1: f64,
    pub class_weights: ClassWeights,
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        LossConfig {
            kind,
            lambda_l1: DEFAULT_LAMBDA_L1,
            class_weights: ClassWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l1 > 0.0 && self.lambda_l1.is_finite()) {
            return Err(Error::invalid("loss config", "lambda_l1 must be positive"));
        }
        let w = self.class_weights;
        if !(w.branch > 0.0 && w.non_branch > 0.0 && w.branch.is_finite() && w.non_branch.is_finite()) {
            return Err(Error::invalid("loss config", "class weights must be positive"));
        }
        Ok(())
    }
}

/// Weights inverse to class pixel frequency over all masks, summing to 2:
/// `w_branch = 2(1 − f)`, `w_non_branch = 2f` for branch fraction `f`.
pub fn compute_class_weights<'a>(masks: impl IntoIterator<Item = &'a Mask>) -> Result<ClassWeights> {
    let (mut branch, mut total) = (0u64, 0u64);
    for m in masks {
        branch += m.count() as u64;
        total += m.len() as u64;
    }
    if total == 0 {
        return Err(Error::Empty("class weights"));
    }
    if branch == 0 || branch == total {
        return Err(Error::invalid(
            "class weights",
            "one class has no pixels in the whole dataset",
        ));
    }
    let f = branch as f64 / total as f64;
    Ok(ClassWeights {
        branch: 2.0 * (1.0 - f),
        non_branch: 2.0 * f,
    })
}

/// Generator objective `BCE(logits, 1) + λ·L1(pred, target)` on a graph.
pub fn cgan_generator_var<T: Float>(
    g: &mut Graph<T>,
    fake_logits: Var,
    pred: Var,
    target: &Tensor<T>,
    lambda_l1: f64,
) -> Result<(Var, Var, Var)> {
    let adversarial = g.bce_with_logits(fake_logits, 1.0)?;
    let l1 = g.l1(pred, target)?;
    let weighted = g.scale(l1, lambda_l1)?;
    let total = g.add(adversarial, weighted)?;
    Ok((total, adversarial, l1))
}

/// `(BCE(real, 1) + BCE(fake, 0)) / 2` on a graph.
pub fn discriminator_var<T: Float>(g: &mut Graph<T>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let real = g.bce_with_logits(real_logits, 1.0)?;
    let fake = g.bce_with_logits(fake_logits, 0.0)?;
    let sum = g.add(real, fake)?;
    g.scale(sum, 0.5)
}

fn eval_scalar<T: Float>(build: impl FnOnce(&mut Graph<T>) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let out = build(&mut g)?;
    Ok(g.value(out).item()?.as_f64())
}

/// `1 − (2 Σ_c w_c Σ p_c g_c + ε) / (Σ_c w_c Σ (p_c + g_c) + ε)` over branch and
/// non-branch, with ε = 1.
pub fn weighted_dice_loss<T: Float>(pred: &Tensor<T>, target: &Tensor<T>, weights: ClassWeights) -> Result<f64> {
    eval_scalar(|g| {
        let p = g.constant(pred.clone());
        g.weighted_dice(p, target, weights.as_array(), DICE_SMOOTH)
    })
}

pub fn l1_loss<T: Float>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    eval_scalar(|g| {
        let p = g.constant(pred.clone());
        g.l1(p, target)
    })
}

pub fn cgan_generator_objective<T: Float>(
    fake_logits: &Tensor<T>,
    pred: &Tensor<T>,
    target: &Tensor<T>,
    lambda_l1: f64,
) -> Result<f64> {
    eval_scalar(|g| {
        let l = g.constant(fake_logits.clone());
        let p = g.constant(pred.clone());
        Ok(cgan_generator_var(g, l, p, target, lambda_l1)?.0)
    })
}

pub fn discriminator_loss<T: Float>(real_logits: &Tensor<T>, fake_logits: &Tensor<T>) -> Result<f64> {
    eval_scalar(|g| {
        let r = g.constant(real_logits.clone());
        let f = g.constant(fake_logits.clone());
        discriminator_var(g, r, f)
    })
}
