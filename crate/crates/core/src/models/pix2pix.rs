use crate::autodiff::{Activation, ConvParams, Padding, Var};
use crate::error::{Error, Result};
use crate::nn::{init_gain, BatchNorm, Builder, ConvBlock, ConvTranspose, Ctx};
use crate::tensor::Float;

use super::{level_width, Architecture, ModelSpec};

struct UpBlock {
    deconv: ConvTranspose,
    norm: Option<BatchNorm>,
    dropout: Option<f64>,
}

/// U-shaped encoder/decoder: stride-2 4×4 convolutions down to a 1×1
/// bottleneck (at the default block count) and transposed convolutions back up,
/// with encoder block `i` concatenated onto the decoder input at the mirrored level.
pub(super) struct Pix2PixGenerator {
    down: Vec<ConvBlock>,
    up: Vec<UpBlock>,
    head: ConvTranspose,
}

impl Pix2PixGenerator {
    pub fn build<T: Float>(spec: &ModelSpec, b: &mut Builder<T>) -> Result<Self> {
        let Architecture::Pix2pixGenerator {
            blocks,
            dropout_blocks,
            dropout,
        } = spec.arch
        else {
            unreachable!("dispatched on kind")
        };
        if blocks < 2 {
            return Err(Error::invalid("pix2pix generator", "needs at least two blocks"));
        }
        if spec.input_size >> blocks == 0 {
            return Err(Error::invalid(
                "pix2pix generator",
                format!(
                    "input size {} is too small for {blocks} downsampling blocks",
                    spec.input_size
                ),
            ));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::invalid("pix2pix generator", "dropout outside [0, 1)"));
        }
        let down_params = ConvParams::new(2, 1, Padding::Zeros(1));
        let widths: Vec<usize> = (0..blocks).map(|i| level_width(spec.base_width, i)).collect();
        let mut cin = spec.input_channels;
        let mut down = Vec::with_capacity(blocks);
        for (i, &w) in widths.iter().enumerate() {
            // The innermost map is 1×1 per sample, too little for batch statistics.
            let norm = i + 1 < blocks;
            down.push(ConvBlock::build(
                b,
                &format!("down{i}"),
                cin,
                w,
                4,
                down_params,
                norm,
                Some(Activation::leaky_relu()),
            ));
            cin = w;
        }
        let mut up = Vec::with_capacity(blocks - 1);
        for j in 0..blocks - 1 {
            let skip = blocks - 2 - j;
            let cout = widths[skip];
            let name = format!("up{j}");
            let deconv = b.conv_transpose(
                &format!("{name}.deconv"),
                cin,
                cout,
                4,
                2,
                1,
                false,
                init_gain(Some(Activation::Relu)),
            );
            let norm = Some(b.batch_norm(&format!("{name}.bn"), cout));
            up.push(UpBlock {
                deconv,
                norm,
                dropout: (j < dropout_blocks && dropout > 0.0).then_some(dropout),
            });
            cin = cout + widths[skip];
        }
        let head = b.conv_transpose("head.deconv", cin, 1, 4, 2, 1, true, init_gain(None));
        Ok(Pix2PixGenerator { down, up, head })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut skips = Vec::with_capacity(self.down.len());
        let mut y = x;
        for block in &self.down {
            y = block.forward(ctx, y)?;
            skips.push(y);
        }
        skips.pop();
        for block in &self.up {
            y = block.deconv.forward(ctx, y)?;
            if let Some(norm) = &block.norm {
                y = norm.forward(ctx, y)?;
            }
            if let Some(p) = block.dropout {
                y = ctx.dropout(y, p)?;
            }
            y = ctx.g.relu(y)?;
            let skip = skips.pop().expect("one skip per decoder block");
            y = ctx.g.concat_channels(y, skip)?;
        }
        let logits = self.head.forward(ctx, y)?;
        ctx.g.sigmoid(logits)
    }
}

/// Patch discriminator: stride-2 Conv–BN–LeakyReLU blocks followed by two
/// stride-1 convolutions, emitting a grid of real/fake logits.
pub(super) struct PatchGan {
    blocks: Vec<ConvBlock>,
    head: ConvBlock,
}

impl PatchGan {
    pub fn build<T: Float>(spec: &ModelSpec, b: &mut Builder<T>) -> Result<Self> {
        let Architecture::PatchganDiscriminator { downsampling_blocks } = spec.arch else {
            unreachable!("dispatched on kind")
        };
        if downsampling_blocks == 0 {
            return Err(Error::invalid("patchgan", "needs at least one downsampling block"));
        }
        // Two stride-1 4×4 convs with padding 1 each shrink the map by one pixel.
        if (spec.input_size >> downsampling_blocks) < 3 {
            return Err(Error::invalid(
                "patchgan",
                format!("input size {} leaves no patch grid", spec.input_size),
            ));
        }
        let act = Some(Activation::leaky_relu());
        let mut blocks = Vec::new();
        let mut cin = spec.forward_channels();
        for i in 0..downsampling_blocks {
            let w = level_width(spec.base_width, i);
            blocks.push(ConvBlock::build(
                b,
                &format!("down{i}"),
                cin,
                w,
                4,
                ConvParams::new(2, 1, Padding::Zeros(1)),
                true,
                act,
            ));
            cin = w;
        }
        let w = level_width(spec.base_width, downsampling_blocks);
        let stride1 = ConvParams::new(1, 1, Padding::Zeros(1));
        blocks.push(ConvBlock::build(b, "conv", cin, w, 4, stride1, true, act));
        let head = ConvBlock::build(b, "head", w, 1, 4, stride1, false, None);
        Ok(PatchGan { blocks, head })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut y = x;
        for block in &self.blocks {
            y = block.forward(ctx, y)?;
        }
        self.head.forward(ctx, y)
    }
}
