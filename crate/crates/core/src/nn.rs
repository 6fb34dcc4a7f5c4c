//! Named parameters and the handful of layers the architectures are built from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, BatchNormConfig, ConvParams, Graph, Mode, RunningStats, Var};
use crate::error::Result;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct StatsId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedStats<T> {
    pub name: String,
    pub stats: RunningStats<T>,
}

/// Trainable tensors plus batch-norm running statistics, in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    pub(crate) params: Vec<Parameter<T>>,
    pub(crate) stats: Vec<NamedStats<T>>,
}

impl<T: Float> ParamSet<T> {
    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn stats(&self) -> &[NamedStats<T>] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [NamedStats<T>] {
        &mut self.stats
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|s| NamedStats {
                    name: s.name.clone(),
                    stats: RunningStats {
                        mean: s.stats.mean.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                        var: s.stats.var.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                    },
                })
                .collect(),
        }
    }
}

/// Gain of the uniform fan-in initializer for the activation that follows a layer.
pub(crate) fn init_gain(next: Option<Activation>) -> f64 {
    match next {
        Some(Activation::Relu) => 2f64.sqrt(),
        Some(Activation::LeakyRelu { slope }) => (2.0 / (1.0 + slope * slope)).sqrt(),
        Some(Activation::Sigmoid) | None => 1.0,
    }
}

/// Allocates parameters deterministically from a seed. Values are drawn in
/// `f64` and cast, so `f32` and `f64` builds of one spec start identical.
pub(crate) struct Builder<T> {
    set: ParamSet<T>,
    rng: ChaCha8Rng,
}

impl<T: Float> Builder<T> {
    pub fn new(seed: u64) -> Self {
        Builder {
            set: ParamSet::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn finish(self) -> ParamSet<T> {
        self.set
    }

    fn push(&mut self, name: String, value: Tensor<T>) -> ParamId {
        self.set.params.push(Parameter { name, value });
        ParamId(self.set.params.len() - 1)
    }

    fn uniform(&mut self, shape: [usize; 4], fan_in: usize, gain: f64) -> Tensor<T> {
        let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
    }

    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        params: ConvParams,
        bias: bool,
        gain: f64,
    ) -> Conv {
        let fan_in = cin * kernel * kernel;
        let w = self.uniform([cout, cin, kernel, kernel], fan_in, gain);
        let weight = self.push(format!("{name}.weight"), w);
        let bias = bias.then(|| self.push(format!("{name}.bias"), Tensor::zeros([cout])));
        Conv { weight, bias, params }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        gain: f64,
    ) -> ConvTranspose {
        // Each output pixel receives roughly cin·k²/stride² contributions.
        let fan_in = cin * kernel * kernel / (stride * stride).max(1);
        let w = self.uniform([cin, cout, kernel, kernel], fan_in, gain);
        let weight = self.push(format!("{name}.weight"), w);
        let bias = bias.then(|| self.push(format!("{name}.bias"), Tensor::zeros([cout])));
        ConvTranspose {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> BatchNorm {
        let gamma = self.push(format!("{name}.gamma"), Tensor::ones([channels]));
        let beta = self.push(format!("{name}.beta"), Tensor::zeros([channels]));
        self.set.stats.push(NamedStats {
            name: name.to_string(),
            stats: RunningStats::new(channels),
        });
        BatchNorm {
            gamma,
            beta,
            stats: StatsId(self.set.stats.len() - 1),
        }
    }
}

/// Per-forward state: parameter leaves on the tape plus mutable layer state.
pub(crate) struct Ctx<'a, T: Float> {
    pub g: &'a mut Graph<T>,
    vars: Vec<Var>,
    stats: &'a mut [NamedStats<T>],
    pub mode: Mode,
    rng: &'a mut ChaCha8Rng,
    bn: BatchNormConfig,
}

impl<'a, T: Float> Ctx<'a, T> {
    pub fn new(
        g: &'a mut Graph<T>,
        set: &'a mut ParamSet<T>,
        track_params: bool,
        mode: Mode,
        rng: &'a mut ChaCha8Rng,
    ) -> Self {
        let vars = set
            .params
            .iter()
            .map(|p| {
                let v = p.value.clone();
                if track_params {
                    g.param(v)
                } else {
                    g.constant(v)
                }
            })
            .collect();
        Ctx {
            g,
            vars,
            stats: &mut set.stats,
            mode,
            rng,
            bn: BatchNormConfig::default(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn into_vars(self) -> Vec<Var> {
        self.vars
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        self.g.dropout(x, p, self.mode, self.rng)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    weight: ParamId,
    bias: Option<ParamId>,
    pub params: ConvParams,
}

impl Conv {
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.weight), self.bias.map(|b| ctx.var(b)));
        ctx.g.conv2d(x, w, b, self.params)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvTranspose {
    weight: ParamId,
    bias: Option<ParamId>,
    stride: usize,
    padding: usize,
}

impl ConvTranspose {
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.weight), self.bias.map(|b| ctx.var(b)));
        ctx.g.conv_transpose2d(x, w, b, self.stride, self.padding, 0)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    stats: StatsId,
}

impl BatchNorm {
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.var(self.gamma), ctx.var(self.beta));
        let stats = &mut ctx.stats[self.stats.0].stats;
        ctx.g.batch_norm(x, gamma, beta, stats, ctx.mode, ctx.bn)
    }
}

/// Convolution followed by optional batch norm and activation.
#[derive(Clone, Debug)]
pub(crate) struct ConvBlock {
    pub conv: Conv,
    pub norm: Option<BatchNorm>,
    pub act: Option<Activation>,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Float>(
        b: &mut Builder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        params: ConvParams,
        norm: bool,
        act: Option<Activation>,
    ) -> Self {
        // A bias directly before batch norm is cancelled by the mean subtraction.
        let conv = b.conv(
            &format!("{name}.conv"),
            cin,
            cout,
            kernel,
            params,
            !norm,
            init_gain(act),
        );
        let norm = norm.then(|| b.batch_norm(&format!("{name}.bn"), cout));
        ConvBlock { conv, norm, act }
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut y = self.conv.forward(ctx, x)?;
        if let Some(norm) = &self.norm {
            y = norm.forward(ctx, y)?;
        }
        match self.act {
            Some(act) => ctx.g.activation(y, act),
            None => Ok(y),
        }
    }
}
