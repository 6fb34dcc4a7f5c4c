use crate::autodiff::{Activation, ConvParams, Padding, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv, ConvBlock, Ctx};
use crate::tensor::Float;

use super::{level_width, Architecture, ModelSpec};

/// Reference rates for a 256-pixel input.
const REFERENCE_RATES: [usize; 4] = [1, 6, 12, 18];
const REFERENCE_SIZE: usize = 256;
/// Encoder output stride: the first two stages downsample, later ones dilate.
const OUTPUT_STRIDE: usize = 4;

/// Reference rates scaled to `input_size`, clipped to the encoder feature map
/// and deduplicated.
pub fn default_dilation_rates(input_size: usize) -> Vec<usize> {
    let max_rate = (input_size / OUTPUT_STRIDE).saturating_sub(1).max(1);
    let mut rates: Vec<usize> = Vec::new();
    for r in REFERENCE_RATES {
        let scaled = ((r * input_size) as f64 / REFERENCE_SIZE as f64).round().max(1.0) as usize;
        let rate = scaled.min(max_rate);
        if !rates.contains(&rate) {
            rates.push(rate);
        }
    }
    rates
}

/// 1×1 reduce, 3×3 (strided or dilated), 1×1 expand, with a projected shortcut
/// whenever the shape changes.
struct Bottleneck {
    reduce: ConvBlock,
    spatial: ConvBlock,
    expand: ConvBlock,
    shortcut: Option<ConvBlock>,
}

impl Bottleneck {
    #[allow(clippy::too_many_arguments)]
    fn build<T: Float>(
        b: &mut Builder<T>,
        name: &str,
        cin: usize,
        mid: usize,
        cout: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        let relu = Some(Activation::Relu);
        let pointwise = ConvParams::new(1, 1, Padding::Zeros(0));
        Bottleneck {
            reduce: ConvBlock::build(b, &format!("{name}.reduce"), cin, mid, 1, pointwise, true, relu),
            spatial: ConvBlock::build(
                b,
                &format!("{name}.spatial"),
                mid,
                mid,
                3,
                ConvParams::new(stride, dilation, Padding::Same),
                true,
                relu,
            ),
            expand: ConvBlock::build(b, &format!("{name}.expand"), mid, cout, 1, pointwise, true, None),
            shortcut: (stride != 1 || cin != cout).then(|| {
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
            }),
        }
    }

    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.reduce.forward(ctx, x)?;
        let y = self.spatial.forward(ctx, y)?;
        let y = self.expand.forward(ctx, y)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(ctx, x)?,
            None => x,
        };
        let sum = ctx.g.add(y, skip)?;
        ctx.g.relu(sum)
    }
}

/// Parallel atrous 3×3 branches plus an image-pooling branch, fused by 1×1 conv.
pub(super) struct Aspp {
    branches: Vec<ConvBlock>,
    pooled: Conv,
    fuse: ConvBlock,
}

impl Aspp {
    fn build<T: Float>(b: &mut Builder<T>, cin: usize, width: usize, rates: &[usize]) -> Self {
        let relu = Some(Activation::Relu);
        let branches = rates
            .iter()
            .map(|&r| {
                ConvBlock::build(
                    b,
                    &format!("aspp.rate{r}"),
                    cin,
                    width,
                    3,
                    ConvParams::new(1, r, Padding::Same),
                    true,
                    relu,
                )
            })
            .collect();
        // Pooled features are 1×1 per sample, so this branch has a bias instead of batch norm.
        let pooled = b.conv(
            "aspp.pool",
            cin,
            width,
            1,
            ConvParams::new(1, 1, Padding::Zeros(0)),
            true,
            2f64.sqrt(),
        );
        let fuse = ConvBlock::build(
            b,
            "aspp.fuse",
            width * (rates.len() + 1),
            width,
            1,
            ConvParams::new(1, 1, Padding::Zeros(0)),
            true,
            relu,
        );
        Aspp { branches, pooled, fuse }
    }

    #[cfg(test)]
    pub fn branch_count(&self) -> usize {
        self.branches.len() + 1
    }

    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let [_, _, h, w] = ctx.g.value(x).dims4()?;
        let mut joined: Option<Var> = None;
        let mut append = |ctx: &mut Ctx<'_, T>, y: Var| -> Result<()> {
            joined = Some(match joined {
                Some(acc) => ctx.g.concat_channels(acc, y)?,
                None => y,
            });
            Ok(())
        };
        for branch in &self.branches {
            let y = branch.forward(ctx, x)?;
            append(ctx, y)?;
        }
        let pooled = ctx.g.global_avg_pool(x)?;
        let pooled = self.pooled.forward(ctx, pooled)?;
        let pooled = ctx.g.relu(pooled)?;
        let pooled = ctx.g.upsample_bilinear(pooled, h, w)?;
        append(ctx, pooled)?;
        self.fuse.forward(ctx, joined.expect("at least the pooled branch"))
    }
}

/// DeepLab-style network: residual bottleneck encoder at output stride 4,
/// ASPP, bilinear upsampling onto one full-resolution skip from the stem,
/// a 3×3 refinement and a sigmoid head.
pub(super) struct DeepLab {
    stem: ConvBlock,
    stages: Vec<Vec<Bottleneck>>,
    aspp: Aspp,
    low_level: ConvBlock,
    refine: ConvBlock,
    head: Conv,
}

impl DeepLab {
    pub fn build<T: Float>(spec: &ModelSpec, b: &mut Builder<T>) -> Result<Self> {
        let Architecture::Deeplab {
            stage_depths,
            dilation_rates,
        } = &spec.arch
        else {
            unreachable!("dispatched on kind")
        };
        if stage_depths.len() < 2 || stage_depths.contains(&0) {
            return Err(Error::invalid("deeplab", "needs at least two non-empty stages"));
        }
        if dilation_rates.is_empty() {
            return Err(Error::invalid("deeplab", "needs at least one dilation rate"));
        }
        let feature = spec.input_size / OUTPUT_STRIDE;
        if feature == 0 {
            return Err(Error::invalid("deeplab", "input size too small"));
        }
        for (i, &r) in dilation_rates.iter().enumerate() {
            if r == 0 || dilation_rates[..i].contains(&r) {
                return Err(Error::invalid(
                    "deeplab",
                    "dilation rates must be distinct positive integers",
                ));
            }
            // At rate >= feature size every off-center tap reads padding only.
            if r >= feature.max(2) {
                return Err(Error::invalid(
                    "deeplab",
                    format!("dilation rate {r} exceeds the {feature}x{feature} feature map"),
                ));
            }
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
            let mid = level_width(base, s);
            let cout = 4 * mid;
            let (stride, dilation) = if s < 2 { (2, 1) } else { (1, 1 << (s - 1)) };
            let blocks = (0..depth)
                .map(|i| {
                    let (bin, st) = if i == 0 { (cin, stride) } else { (cout, 1) };
                    Bottleneck::build(b, &format!("stage{s}.block{i}"), bin, mid, cout, st, dilation)
                })
                .collect();
            stages.push(blocks);
            cin = cout;
        }
        let width = 2 * base;
        let aspp = Aspp::build(b, cin, width, dilation_rates);
        let relu = Some(Activation::Relu);
        let low_level = ConvBlock::build(
            b,
            "decoder.low_level",
            base,
            base,
            1,
            ConvParams::new(1, 1, Padding::Zeros(0)),
            true,
            relu,
        );
        let refine = ConvBlock::build(
            b,
            "decoder.refine",
            width + base,
            width,
            3,
            ConvParams::same(),
            true,
            relu,
        );
        let head = b.conv("head", width, 1, 1, ConvParams::new(1, 1, Padding::Zeros(0)), true, 1.0);
        Ok(DeepLab {
            stem,
            stages,
            aspp,
            low_level,
            refine,
            head,
        })
    }

    #[cfg(test)]
    pub fn aspp(&self) -> &Aspp {
        &self.aspp
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let low = self.stem.forward(ctx, x)?;
        let mut y = low;
        for stage in &self.stages {
            for block in stage {
                y = block.forward(ctx, y)?;
            }
        }
        let context = self.aspp.forward(ctx, y)?;
        let [_, _, h, w] = ctx.g.value(low).dims4()?;
        let context = ctx.g.upsample_bilinear(context, h, w)?;
        let low = self.low_level.forward(ctx, low)?;
        let joined = ctx.g.concat_channels(context, low)?;
        let y = self.refine.forward(ctx, joined)?;
        let logits = self.head.forward(ctx, y)?;
        ctx.g.sigmoid(logits)
    }
}
