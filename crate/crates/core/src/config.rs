//! Scale presets: `tiny` for desk-scale runs and CI, `paper` for full size.

use serde::{Deserialize, Serialize};

use crate::models::{default_dilation_rates, Architecture, ModelKind, ModelSpec};
use crate::synth::SceneParams;

pub const RGBD_CHANNELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 64×64 inputs, base width 16, shallow encoders.
    #[default]
    Tiny,
    /// 256×256 inputs cropped from 480×480 scenes, base width 64, 8/8 generator.
    Paper,
}

impl Preset {
    pub fn input_size(self) -> usize {
        match self {
            Preset::Tiny => 64,
            Preset::Paper => 256,
        }
    }

    pub fn base_width(self) -> usize {
        match self {
            Preset::Tiny => 16,
            Preset::Paper => 64,
        }
    }

    /// Side of the center crop taken from generated scenes before resizing.
    pub fn crop_size(self) -> usize {
        match self {
            Preset::Tiny => 64,
            Preset::Paper => 480,
        }
    }

    pub fn scene_params(self) -> SceneParams {
        match self {
            Preset::Tiny => SceneParams::tiny(),
            Preset::Paper => SceneParams::paper(),
        }
    }

    pub fn model_spec(self, kind: ModelKind) -> ModelSpec {
        let size = self.input_size();
        let arch = match (self, kind) {
            (Preset::Tiny, ModelKind::Pix2pixGenerator) => Architecture::Pix2pixGenerator {
                blocks: 6,
                dropout_blocks: 3,
                dropout: 0.5,
            },
            (Preset::Paper, ModelKind::Pix2pixGenerator) => Architecture::Pix2pixGenerator {
                blocks: 8,
                dropout_blocks: 3,
                dropout: 0.5,
            },
            (_, ModelKind::PatchganDiscriminator) => Architecture::PatchganDiscriminator { downsampling_blocks: 3 },
            (Preset::Tiny, ModelKind::Unet) => Architecture::Unet {
                stage_depths: vec![2, 2, 2, 2],
            },
            (Preset::Paper, ModelKind::Unet) => Architecture::Unet {
                stage_depths: vec![3, 4, 6, 3],
            },
            (Preset::Tiny, ModelKind::Deeplab) => Architecture::Deeplab {
                stage_depths: vec![1, 1, 1],
                dilation_rates: default_dilation_rates(size),
            },
            (Preset::Paper, ModelKind::Deeplab) => Architecture::Deeplab {
                stage_depths: vec![3, 4, 6, 3],
                dilation_rates: default_dilation_rates(size),
            },
        };
        ModelSpec {
            arch,
            input_channels: RGBD_CHANNELS,
            base_width: self.base_width(),
            input_size: size,
        }
    }
}
