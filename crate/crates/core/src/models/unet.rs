use crate::autodiff::{Activation, ConvParams, Padding, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv, ConvBlock, Ctx};
use crate::tensor::Float;

use super::{level_width, Architecture, ModelSpec};

/// Basic residual block: two 3×3 Conv–BN with an identity (or projected) shortcut.
pub(super) struct ResidualBlock {
    first: ConvBlock,
    second: ConvBlock,
    shortcut: Option<ConvBlock>,
}

impl ResidualBlock {
    pub fn build<T: Float>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let relu = Some(Activation::Relu);
        let first = ConvBlock::build(
            b,
            &format!("{name}.conv1"),
            cin,
            cout,
            3,
            ConvParams::new(stride, 1, Padding::Same),
            true,
            relu,
        );
        let second = ConvBlock::build(
            b,
            &format!("{name}.conv2"),
            cout,
            cout,
            3,
            ConvParams::same(),
            true,
            None,
        );
        let shortcut = (stride != 1 || cin != cout).then(|| {
            ConvBlock::build(
                b,
                &format!("{name}.proj"),
                cin,
                cout,
                1,
                ConvParams::new(stride, 1, Padding::Zeros(0)),
                true,
                None,
            )
        });
        ResidualBlock {
            first,
            second,
            shortcut,
        }
    }

    /// Sum of the residual branch and the shortcut, before the final ReLU.
    pub fn pre_activation<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.first.forward(ctx, x)?;
        let y = self.second.forward(ctx, y)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(ctx, x)?,
            None => x,
        };
        ctx.g.add(y, skip)
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.pre_activation(ctx, x)?;
        ctx.g.relu(y)
    }
}

struct DecoderStage {
    first: ConvBlock,
    second: ConvBlock,
}

impl DecoderStage {
    fn build<T: Float>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize) -> Self {
        let relu = Some(Activation::Relu);
        DecoderStage {
            first: ConvBlock::build(
                b,
                &format!("{name}.conv1"),
                cin,
                cout,
                3,
                ConvParams::same(),
                true,
                relu,
            ),
            second: ConvBlock::build(
                b,
                &format!("{name}.conv2"),
                cout,
                cout,
                3,
                ConvParams::same(),
                true,
                relu,
            ),
        }
    }

    /// Upsamples `x` to the skip's size, concatenates the skip, then double conv.
    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var, skip: Var) -> Result<Var> {
        let [_, _, h, w] = ctx.g.value(skip).dims4()?;
        let up = ctx.g.upsample_bilinear(x, h, w)?;
        let joined = ctx.g.concat_channels(up, skip)?;
        let y = self.first.forward(ctx, joined)?;
        self.second.forward(ctx, y)
    }
}

/// U-Net with a residual encoder: a full-resolution stem, strided residual
/// stages whose outputs feed the decoder as skips, and a sigmoid head.
pub(super) struct UNet {
    stem: ConvBlock,
    stages: Vec<Vec<ResidualBlock>>,
    decoder: Vec<DecoderStage>,
    head: Conv,
}

impl UNet {
    pub fn build<T: Float>(spec: &ModelSpec, b: &mut Builder<T>) -> Result<Self> {
        let Architecture::Unet { stage_depths } = &spec.arch else {
            unreachable!("dispatched on kind")
        };
        if stage_depths.is_empty() || stage_depths.contains(&0) {
            return Err(Error::invalid("unet", "every stage needs at least one block"));
        }
        if spec.input_size >> stage_depths.len() == 0 {
            return Err(Error::invalid(
                "unet",
                format!(
                    "input size {} is too small for {} stages",
                    spec.input_size,
                    stage_depths.len()
                ),
            ));
        }
        let base = spec.base_width;
        let stem = ConvBlock::build(
            b,
            "stem",
            spec.input_channels,
            base,
            3,
            ConvParams::same(),
            true,
            Some(Activation::Relu),
        );
        let mut cin = base;
        let mut stages = Vec::new();
        for (s, &depth) in stage_depths.iter().enumerate() {
            let w = level_width(base, s);
            let blocks = (0..depth)
                .map(|i| {
                    let (bin, stride) = if i == 0 { (cin, 2) } else { (w, 1) };
                    ResidualBlock::build(b, &format!("stage{s}.block{i}"), bin, w, stride)
                })
                .collect();
            stages.push(blocks);
            cin = w;
        }
        // Decoder levels run from the deepest skip back to the stem.
        let mut decoder = Vec::new();
        for s in (0..stage_depths.len() - 1).rev() {
            let w = level_width(base, s);
            decoder.push(DecoderStage::build(b, &format!("decoder{s}"), cin + w, w));
            cin = w;
        }
        decoder.push(DecoderStage::build(b, "decoder_stem", cin + base, base));
        let head = b.conv("head", base, 1, 1, ConvParams::new(1, 1, Padding::Zeros(0)), true, 1.0);
        Ok(UNet {
            stem,
            stages,
            decoder,
            head,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut y = self.stem.forward(ctx, x)?;
        let mut skips = vec![y];
        for stage in &self.stages {
            for block in stage {
                y = block.forward(ctx, y)?;
            }
            skips.push(y);
        }
        skips.pop();
        for stage in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            y = stage.forward(ctx, y, skip)?;
        }
        let logits = self.head.forward(ctx, y)?;
        ctx.g.sigmoid(logits)
    }
}
