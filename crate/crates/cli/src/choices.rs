//! Flag values shared by the parser and the resolved configs.

use branchseg::{DifficultyIndex, LossKind, ModelKind, Preset, Split};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    /// Pix2pix generator trained on its own.
    P2pGen,
    /// Pix2pix generator trained against a PatchGAN discriminator.
    P2pGan,
    Unet,
    Deeplab,
}

impl ModelChoice {
    pub fn kind(self) -> ModelKind {
        match self {
            ModelChoice::P2pGen | ModelChoice::P2pGan => ModelKind::Pix2pixGenerator,
            ModelChoice::Unet => ModelKind::Unet,
            ModelChoice::Deeplab => ModelKind::Deeplab,
        }
    }

    pub fn default_loss(self) -> LossChoice {
        match self {
            ModelChoice::P2pGan => LossChoice::Hybrid,
            _ => LossChoice::Wdl,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelChoice::P2pGen => "p2p-gen",
            ModelChoice::P2pGan => "p2p-gan",
            ModelChoice::Unet => "unet",
            ModelChoice::Deeplab => "deeplab",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossChoice {
    Wdl,
    L1,
    /// Adversarial BCE plus weighted L1.
    Hybrid,
}

impl LossChoice {
    pub fn kind(self) -> LossKind {
        match self {
            LossChoice::Wdl => LossKind::Wdl,
            LossChoice::L1 => LossKind::L1,
            LossChoice::Hybrid => LossKind::HybridCgan,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossChoice::Wdl => "wdl",
            LossChoice::L1 => "l1",
            LossChoice::Hybrid => "hybrid",
        }
    }
}

/// Checks that a model can be trained with a loss.
pub fn check_pairing(model: ModelChoice, loss: LossChoice) -> Result<(), String> {
    match (model, loss) {
        (ModelChoice::P2pGan, LossChoice::Hybrid) => Ok(()),
        (ModelChoice::P2pGan, other) => Err(format!(
            "--model p2p-gan trains with --loss hybrid, not {}",
            other.name()
        )),
        (m, LossChoice::Hybrid) => Err(format!(
            "--loss hybrid needs a discriminator; use --model p2p-gan instead of {}",
            m.name()
        )),
        _ => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetChoice {
    #[default]
    Tiny,
    Paper,
}

impl From<PresetChoice> for Preset {
    fn from(p: PresetChoice) -> Preset {
        match p {
            PresetChoice::Tiny => Preset::Tiny,
            PresetChoice::Paper => Preset::Paper,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndexChoice {
    #[default]
    Occlusion,
    Depth,
}

impl From<IndexChoice> for DifficultyIndex {
    fn from(i: IndexChoice) -> DifficultyIndex {
        match i {
            IndexChoice::Occlusion => DifficultyIndex::Occlusion,
            IndexChoice::Depth => DifficultyIndex::Depth,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitChoice {
    Train,
    #[default]
    Val,
}

impl From<SplitChoice> for Split {
    fn from(s: SplitChoice) -> Split {
        match s {
            SplitChoice::Train => Split::Train,
            SplitChoice::Val => Split::Val,
        }
    }
}
