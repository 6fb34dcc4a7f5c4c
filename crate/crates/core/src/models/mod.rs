//! The three segmentation architectures and the PatchGAN discriminator.
//!
//! A [`ModelSpec`] fully determines parameter names and shapes; the build seed
//! only determines initial values.

mod deeplab;
mod pix2pix;
mod unet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, ParamSet};
use crate::tensor::{Float, Tensor};

pub use deeplab::default_dilation_rates;
use deeplab::DeepLab;
use pix2pix::{PatchGan, Pix2PixGenerator};
use unet::UNet;

/// Kind-specific architecture parameters; serialized as `kind` + `arch_params`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "arch_params", rename_all = "snake_case")]
pub enum Architecture {
    Pix2pixGenerator {
        /// Downsampling blocks; the decoder mirrors them.
        blocks: usize,
        /// Leading decoder blocks with dropout.
        dropout_blocks: usize,
        dropout: f64,
    },
    PatchganDiscriminator {
        downsampling_blocks: usize,
    },
    Unet {
        stage_depths: Vec<usize>,
    },
    Deeplab {
        stage_depths: Vec<usize>,
        dilation_rates: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Pix2pixGenerator,
    PatchganDiscriminator,
    Unet,
    Deeplab,
}

impl Architecture {
    pub fn kind(&self) -> ModelKind {
        match self {
            Architecture::Pix2pixGenerator { .. } => ModelKind::Pix2pixGenerator,
            Architecture::PatchganDiscriminator { .. } => ModelKind::PatchganDiscriminator,
            Architecture::Unet { .. } => ModelKind::Unet,
            Architecture::Deeplab { .. } => ModelKind::Deeplab,
        }
    }
}

/// Declarative description of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub arch: Architecture,
    /// Conditioning image channels (4 for RGBD). The discriminator additionally
    /// receives the candidate mask as one extra channel.
    pub input_channels: usize,
    pub base_width: usize,
    pub input_size: usize,
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        self.arch.kind()
    }

    /// Channels the network's forward pass expects.
    pub fn forward_channels(&self) -> usize {
        match self.kind() {
            ModelKind::PatchganDiscriminator => self.input_channels + 1,
            _ => self.input_channels,
        }
    }

    pub fn is_segmenter(&self) -> bool {
        self.kind() != ModelKind::PatchganDiscriminator
    }

    fn validate_common(&self) -> Result<()> {
        if self.input_channels == 0 || self.base_width == 0 {
            return Err(Error::invalid("model spec", "channel counts must be positive"));
        }
        if !self.input_size.is_power_of_two() {
            return Err(Error::invalid(
                "model spec",
                format!("input size {} is not a power of two", self.input_size),
            ));
        }
        Ok(())
    }
}

/// Channel width at downsampling level `level`: doubling, capped at 8× base.
pub(crate) fn level_width(base: usize, level: usize) -> usize {
    base << level.min(3)
}

enum Network {
    Generator(Pix2PixGenerator),
    Discriminator(PatchGan),
    Unet(UNet),
    DeepLab(DeepLab),
}

/// Result of recording a model on a [`Graph`].
pub struct Forward {
    pub output: Var,
    /// Leaf for each parameter, in [`ParamSet`] order.
    pub params: Vec<Var>,
}

/// An instantiated network.
pub struct Model<T: Float = f32> {
    spec: ModelSpec,
    params: ParamSet<T>,
    net: Network,
    mode: Mode,
    dropout_rng: ChaCha8Rng,
}

const DROPOUT_STREAM: u64 = 0x0D20_9047;

impl<T: Float> Model<T> {
    /// Builds any kind of model; parameters are initialized from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate_common()?;
        let mut b = Builder::new(seed);
        let net = match &spec.arch {
            Architecture::Pix2pixGenerator { .. } => Network::Generator(Pix2PixGenerator::build(spec, &mut b)?),
            Architecture::PatchganDiscriminator { .. } => Network::Discriminator(PatchGan::build(spec, &mut b)?),
            Architecture::Unet { .. } => Network::Unet(UNet::build(spec, &mut b)?),
            Architecture::Deeplab { .. } => Network::DeepLab(DeepLab::build(spec, &mut b)?),
        };
        Ok(Model {
            spec: spec.clone(),
            params: b.finish(),
            net,
            mode: Mode::Infer,
            dropout_rng: ChaCha8Rng::seed_from_u64(seed ^ DROPOUT_STREAM),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Restarts the dropout stream so repeated training forwards match.
    pub fn reseed_dropout(&mut self, seed: u64) {
        self.dropout_rng = ChaCha8Rng::seed_from_u64(seed ^ DROPOUT_STREAM);
    }

    /// Same architecture and values at another precision.
    pub fn cast<U: Float>(&self) -> Result<Model<U>> {
        let mut model = Model::<U>::build(&self.spec, 0)?;
        model.params = self.params.cast();
        model.mode = self.mode;
        model.dropout_rng = self.dropout_rng.clone();
        Ok(model)
    }

    /// Records the network on `g`. With `track_params` the parameters are
    /// differentiable leaves; otherwise they are constants (e.g. a frozen
    /// discriminator during a generator step).
    pub fn forward(&mut self, g: &mut Graph<T>, input: Var, track_params: bool) -> Result<Forward> {
        let [_, c, h, w] = g.value(input).dims4()?;
        if c != self.spec.forward_channels() {
            return Err(Error::shape(
                "model forward",
                format!("expected {} input channels, got {c}", self.spec.forward_channels()),
            ));
        }
        if (h, w) != (self.spec.input_size, self.spec.input_size) {
            return Err(Error::shape(
                "model forward",
                format!("expected {0}x{0} input, got {h}x{w}", self.spec.input_size),
            ));
        }
        let mut ctx = Ctx::new(g, &mut self.params, track_params, self.mode, &mut self.dropout_rng);
        let output = match &self.net {
            Network::Generator(net) => net.forward(&mut ctx, input)?,
            Network::Discriminator(net) => net.forward(&mut ctx, input)?,
            Network::Unet(net) => net.forward(&mut ctx, input)?,
            Network::DeepLab(net) => net.forward(&mut ctx, input)?,
        };
        Ok(Forward {
            output,
            params: ctx.into_vars(),
        })
    }

    /// Runs the network on a batch without recording parameter gradients.
    pub fn predict(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let out = self.forward(&mut g, x, false)?.output;
        Ok(g.value(out).clone())
    }

    /// Discriminator logits for a candidate mask conditioned on an image.
    pub fn discriminate(&mut self, g: &mut Graph<T>, image: Var, mask: Var, track_params: bool) -> Result<Forward> {
        if self.spec.kind() != ModelKind::PatchganDiscriminator {
            return Err(Error::invalid("discriminate", "model is not a discriminator"));
        }
        let joint = g.concat_channels(image, mask)?;
        self.forward(g, joint, track_params)
    }
}

pub fn build_pix2pix_generator<T: Float>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    expect_kind(spec, ModelKind::Pix2pixGenerator)?;
    Model::build(spec, seed)
}

pub fn build_patchgan_discriminator<T: Float>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    expect_kind(spec, ModelKind::PatchganDiscriminator)?;
    Model::build(spec, seed)
}

pub fn build_unet<T: Float>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    expect_kind(spec, ModelKind::Unet)?;
    Model::build(spec, seed)
}

pub fn build_deeplab<T: Float>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    expect_kind(spec, ModelKind::Deeplab)?;
    Model::build(spec, seed)
}

fn expect_kind(spec: &ModelSpec, kind: ModelKind) -> Result<()> {
    if spec.kind() == kind {
        Ok(())
    } else {
        Err(Error::invalid(
            "model build",
            format!("spec describes {:?}, expected {kind:?}", spec.kind()),
        ))
    }
}
