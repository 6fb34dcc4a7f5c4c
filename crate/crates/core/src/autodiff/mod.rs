//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every op appends a node holding its output value and
//! whatever it needs for the backward pass. [`Graph::backward`] walks the tape
//! in exact reverse order, so no topological sort is ever needed.

mod conv;
mod resample;

use rand::Rng;

use conv::{ConvGeometry, ConvGrads};
pub use conv::{ConvParams, Padding};
use resample::Taps;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether stochastic and batch-statistics layers behave as in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    #[default]
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Sigmoid,
}

impl Activation {
    pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

    pub fn leaky_relu() -> Self {
        Activation::LeakyRelu {
            slope: Self::DEFAULT_LEAKY_SLOPE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Running per-channel statistics used by batch norm in inference mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Float> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        n: usize,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        n: usize,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Act {
        input: Var,
        kind: Activation,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Upsample {
        input: Var,
        rows: Taps<T>,
        cols: Taps<T>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Square {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    WeightedDice {
        pred: Var,
        target: Vec<T>,
        weights: [T; 2],
        num: T,
        den: T,
    },
    L1 {
        pred: Var,
        target: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        target: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// A gradient tape.
#[derive(Debug, Default)]
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Every activation node's kind and input, in recording order.
    pub fn pre_activations(&self) -> impl Iterator<Item = (Activation, &Tensor<T>)> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Act { input, kind } => Some((*kind, self.value(*input))),
            _ => None,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor as an input; it is differentiated iff `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    /// Records an input that is never differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// 2-D convolution, `kernel` shaped `[cout, cin, kh, kw]`.
    ///
    /// Output pixel `i` sums `input[i·stride + k·dilation − pad] · kernel[k]` over taps `k`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, params: ConvParams) -> Result<Var> {
        let (x, k) = (self.value(input), self.value(kernel));
        let (n, geom) = conv::conv_geometry("conv2d", x, k, params)?;
        let b = bias.map(|b| self.value(b));
        conv::check_bias("conv2d", b, geom.cout)?;
        let out = conv::conv2d_forward(x, k, b, n, &geom);
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                n,
                geom,
            },
            &inputs,
        )
    }

    /// Transposed convolution, `kernel` shaped `[cin, cout, kh, kw]`; the
    /// linear adjoint of [`Graph::conv2d`] with the same kernel and stride.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (y, k) = (self.value(input), self.value(kernel));
        let (n, geom) = conv::conv_transpose_geometry("conv_transpose2d", y, k, stride, padding, output_padding)?;
        let b = bias.map(|b| self.value(b));
        conv::check_bias("conv_transpose2d", b, geom.cin)?;
        let out = conv::conv_transpose2d_forward(y, k, b, n, &geom);
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            "conv_transpose2d",
            out,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                n,
                geom,
            },
            &inputs,
        )
    }

    /// Per-channel batch normalization. In [`Mode::Train`] the batch
    /// statistics are used and `stats` is updated by exponential moving average;
    /// in [`Mode::Infer`] `stats` is used as-is.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
        config: BatchNormConfig,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).numel() != c {
                return Err(Error::shape("batch_norm", format!("{name} must have {c} values")));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("running stats must have {c} channels"),
            ));
        }
        let plane = h * w;
        let count = n * plane;
        if count == 0 {
            return Err(Error::Empty("batch_norm"));
        }
        let batch_stats = mode == Mode::Train;
        if batch_stats && count < 2 {
            return Err(Error::invalid(
                "batch_norm",
                "training mode needs more than one value per channel",
            ));
        }
        let eps = T::from_f64_lossy(config.eps);
        let momentum = T::from_f64_lossy(config.momentum);
        let x = self.value(input).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut normalized = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c];
        let count_t = T::from_usize(count).expect("count fits a float");
        for ch in 0..c {
            let channel = |b: usize| (b * c + ch) * plane..(b * c + ch + 1) * plane;
            let (mean, var) = if batch_stats {
                let mean = (0..n).flat_map(|b| x[channel(b)].iter().copied()).sum::<T>() / count_t;
                let var = (0..n)
                    .flat_map(|b| x[channel(b)].iter().map(move |&v| (v - mean) * (v - mean)))
                    .sum::<T>()
                    / count_t;
                let unbiased = var * count_t / (count_t - T::one());
                stats.mean[ch] = (T::one() - momentum) * stats.mean[ch] + momentum * mean;
                stats.var[ch] = (T::one() - momentum) * stats.var[ch] + momentum * unbiased;
                (mean, var)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            let istd = T::one() / (var + eps).sqrt();
            inv_std[ch] = istd;
            for b in 0..n {
                for i in channel(b) {
                    let xn = (x[i] - mean) * istd;
                    normalized[i] = xn;
                    out[i] = g[ch] * xn + bt[ch];
                }
            }
        }
        let out = Tensor::new([n, c, h, w], out)?;
        self.push(
            "batch_norm",
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
        )
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let out = match kind {
            Activation::Relu => self.value(input).map(|v| v.max(T::zero())),
            Activation::LeakyRelu { slope } => {
                let slope = T::from_f64_lossy(slope);
                self.value(input).map(|v| if v > T::zero() { v } else { v * slope })
            }
            Activation::Sigmoid => self.value(input).map(sigmoid),
        };
        self.push("activation", out, Op::Act { input, kind }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)` in training; identity in inference.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("probability {p} outside [0, 1)")));
        }
        if mode == Mode::Infer || p == 0.0 {
            return Ok(input);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(input).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let x = self.value(input);
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        )?;
        self.push("dropout", out, Op::Dropout { input, mask }, &[input])
    }

    /// Bilinear resampling with half-pixel centers (`align_corners = false`).
    pub fn upsample_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("upsample_bilinear", "output size must be positive"));
        }
        let [n, c, h, w] = self.value(input).dims4()?;
        if (h, w) == (out_h, out_w) {
            return Ok(input);
        }
        let rows = Taps::new(h, out_h);
        let cols = Taps::new(w, out_w);
        let out = resample::forward(self.value(input).data(), n * c, &rows, &cols);
        let out = Tensor::new([n, c, out_h, out_w], out)?;
        self.push("upsample_bilinear", out, Op::Upsample { input, rows, cols }, &[input])
    }

    /// Channel concatenation, `a`'s channels first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("[{na}, _, {ha}, {wa}] vs [{nb}, _, {hb}, {wb}]"),
            ));
        }
        let plane = ha * wa;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(na * (ca + cb) * plane);
        for s in 0..na {
            data.extend_from_slice(&xa[s * ca * plane..(s + 1) * ca * plane]);
            data.extend_from_slice(&xb[s * cb * plane..(s + 1) * cb * plane]);
        }
        let out = Tensor::new([na, ca + cb, ha, wa], data)?;
        self.push("concat_channels", out, Op::Concat { a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", out, Op::Add { a, b }, &[a, b])
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let factor = T::from_f64_lossy(factor);
        let out = self.value(input).map(|v| v * factor);
        self.push("scale", out, Op::Scale { input, factor }, &[input])
    }

    pub fn square(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(|v| v * v);
        self.push("square", out, Op::Square { input }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(input).sum());
        self.push("sum", out, Op::Sum { input }, &[input])
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.numel() == 0 {
            return Err(Error::Empty("mean"));
        }
        let out = Tensor::scalar(x.sum() / T::from_usize(x.numel()).expect("count fits a float"));
        self.push("mean", out, Op::Mean { input }, &[input])
    }

    /// Spatial mean per channel: `[n, c, h, w] -> [n, c, 1, 1]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        if h * w == 0 {
            return Err(Error::Empty("global_avg_pool"));
        }
        let inv = T::one() / T::from_usize(h * w).expect("plane fits a float");
        let data = self
            .value(input)
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new([n, c, 1, 1], data)?;
        self.push("global_avg_pool", out, Op::GlobalAvgPool { input }, &[input])
    }

    /// Two-class soft dice loss with per-class weights `[branch, non_branch]`:
    /// `1 - (2·Σ_c w_c·Σ p_c·g_c + smooth) / (Σ_c w_c·Σ (p_c + g_c) + smooth)`,
    /// where the non-branch class uses `1 - p` and `1 - g`.
    pub fn weighted_dice(&mut self, pred: Var, target: &Tensor<T>, weights: [f64; 2], smooth: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape(
                "weighted_dice",
                format!("{:?} vs {:?}", p.shape(), target.shape()),
            ));
        }
        if p.data().iter().any(|&v| v < T::zero() || v > T::one()) {
            return Err(Error::invalid("weighted_dice", "predictions must lie in [0, 1]"));
        }
        if target.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::invalid("weighted_dice", "targets must be 0 or 1"));
        }
        if weights.iter().any(|&w| !(w > 0.0)) || !(smooth >= 0.0) {
            return Err(Error::invalid(
                "weighted_dice",
                "weights must be positive, smoothing non-negative",
            ));
        }
        let [wb, wn] = weights.map(T::from_f64_lossy);
        let smooth = T::from_f64_lossy(smooth);
        let (mut inter_b, mut inter_n, mut total_b, mut total_n) = (T::zero(), T::zero(), T::zero(), T::zero());
        for (&pv, &gv) in p.data().iter().zip(target.data()) {
            let (pn, gn) = (T::one() - pv, T::one() - gv);
            inter_b += pv * gv;
            inter_n += pn * gn;
            total_b += pv + gv;
            total_n += pn + gn;
        }
        let two = T::one() + T::one();
        let num = two * (wb * inter_b + wn * inter_n) + smooth;
        let den = wb * total_b + wn * total_n + smooth;
        if den <= T::zero() {
            return Err(Error::Empty("weighted_dice"));
        }
        let out = Tensor::scalar(T::one() - num / den);
        self.push(
            "weighted_dice",
            out,
            Op::WeightedDice {
                pred,
                target: target.data().to_vec(),
                weights: [wb, wn],
                num,
                den,
            },
            &[pred],
        )
    }

    /// Mean absolute error against a constant target.
    pub fn l1(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape("l1", format!("{:?} vs {:?}", p.shape(), target.shape())));
        }
        if p.numel() == 0 {
            return Err(Error::Empty("l1"));
        }
        let total: T = p.data().iter().zip(target.data()).map(|(&a, &b)| (a - b).abs()).sum();
        let out = Tensor::scalar(total / T::from_usize(p.numel()).expect("count fits a float"));
        self.push(
            "l1",
            out,
            Op::L1 {
                pred,
                target: target.data().to_vec(),
            },
            &[pred],
        )
    }

    /// Mean sigmoid binary cross-entropy of `logits` against a constant label.
    pub fn bce_with_logits(&mut self, logits: Var, target: f64) -> Result<Var> {
        let x = self.value(logits);
        if !x.is_finite() {
            return Err(Error::NonFinite { op: "bce_with_logits" });
        }
        if x.numel() == 0 {
            return Err(Error::Empty("bce_with_logits"));
        }
        let t = T::from_f64_lossy(target);
        let total: T = x
            .data()
            .iter()
            .map(|&v| v.max(T::zero()) - v * t + (-v.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / T::from_usize(x.numel()).expect("count fits a float"));
        self.push(
            "bce_with_logits",
            out,
            Op::BceWithLogits { logits, target: t },
            &[logits],
        )
    }

    /// Propagates `d(loss)/d(loss) = 1` back through the tape.
    ///
    /// Every leaf that requires grad receives a gradient of its own shape
    /// (zeros when the loss does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.value(loss);
        if !root.is_scalar() {
            return Err(Error::NotScalar(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.shape().to_vec(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(grad);
                continue;
            }
            self.backward_node(node, &grad, &mut grads);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            let is_leaf = matches!(node.op, Op::Leaf);
            if !node.requires_grad || !is_leaf {
                grads[idx] = None;
            } else if grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, grad: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let dy = grad.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                n,
                geom,
            } => {
                let need = [
                    self.requires_grad(*input),
                    self.requires_grad(*kernel),
                    bias.is_some_and(|b| self.requires_grad(b)),
                ];
                let g = conv::conv2d_backward(self.value(*input), self.value(*kernel), dy, *n, geom, need);
                self.route_conv(g, *input, *kernel, *bias, grads);
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                n,
                geom,
            } => {
                let need = [
                    self.requires_grad(*input),
                    self.requires_grad(*kernel),
                    bias.is_some_and(|b| self.requires_grad(b)),
                ];
                let g = conv::conv_transpose2d_backward(self.value(*input), self.value(*kernel), dy, *n, geom, need);
                self.route_conv(g, *input, *kernel, *bias, grads);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = node.value.dims4().expect("rank-4 batch norm");
                let plane = h * w;
                let count = T::from_usize(n * plane).expect("count fits a float");
                let g = self.value(*gamma).data();
                let mut d_gamma = vec![T::zero(); c];
                let mut d_beta = vec![T::zero(); c];
                for ch in 0..c {
                    for b in 0..n {
                        for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                            d_gamma[ch] += dy[i] * normalized[i];
                            d_beta[ch] += dy[i];
                        }
                    }
                }
                if self.requires_grad(*input) {
                    let mut dx = vec![T::zero(); dy.len()];
                    for ch in 0..c {
                        let k = g[ch] * inv_std[ch];
                        for b in 0..n {
                            for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                                dx[i] = if *batch_stats {
                                    k * (dy[i] - (d_beta[ch] + normalized[i] * d_gamma[ch]) / count)
                                } else {
                                    k * dy[i]
                                };
                            }
                        }
                    }
                    accumulate(grads, *input, self.value(*input).shape(), dx);
                }
                accumulate(grads, *gamma, self.value(*gamma).shape(), d_gamma);
                accumulate(grads, *beta, self.value(*beta).shape(), d_beta);
            }
            Op::Act { input, kind } => {
                let x = self.value(*input).data();
                let dx = match *kind {
                    Activation::Relu => x
                        .iter()
                        .zip(dy)
                        .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                        .collect(),
                    Activation::LeakyRelu { slope } => {
                        let slope = T::from_f64_lossy(slope);
                        x.iter()
                            .zip(dy)
                            .map(|(&v, &d)| if v > T::zero() { d } else { d * slope })
                            .collect()
                    }
                    Activation::Sigmoid => node
                        .value
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(&s, &d)| d * s * (T::one() - s))
                        .collect(),
                };
                accumulate(grads, *input, node.value.shape(), dx);
            }
            Op::Dropout { input, mask } => {
                let dx = dy.iter().zip(mask).map(|(&d, &m)| d * m).collect();
                accumulate(grads, *input, node.value.shape(), dx);
            }
            Op::Upsample { input, rows, cols } => {
                let shape = self.value(*input).shape();
                let planes = shape[0] * shape[1];
                let dx = resample::backward(dy, planes, rows, cols);
                accumulate(grads, *input, shape, dx);
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.value(*a).dims4().expect("rank-4 concat");
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                let mut da = Vec::with_capacity(n * ca * plane);
                let mut db = Vec::with_capacity(n * cb * plane);
                for s in 0..n {
                    let base = s * (ca + cb) * plane;
                    da.extend_from_slice(&dy[base..base + ca * plane]);
                    db.extend_from_slice(&dy[base + ca * plane..base + (ca + cb) * plane]);
                }
                accumulate(grads, *a, self.value(*a).shape(), da);
                accumulate(grads, *b, self.value(*b).shape(), db);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, node.value.shape(), dy.to_vec());
                accumulate(grads, *b, node.value.shape(), dy.to_vec());
            }
            Op::Scale { input, factor } => {
                let dx = dy.iter().map(|&d| d * *factor).collect();
                accumulate(grads, *input, node.value.shape(), dx);
            }
            Op::Square { input } => {
                let two = T::one() + T::one();
                let dx = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| two * v * d)
                    .collect();
                accumulate(grads, *input, node.value.shape(), dx);
            }
            Op::Sum { input } => {
                let shape = self.value(*input).shape();
                accumulate(grads, *input, shape, vec![dy[0]; shape.iter().product()]);
            }
            Op::Mean { input } => {
                let shape = self.value(*input).shape();
                let numel: usize = shape.iter().product();
                let d = dy[0] / T::from_usize(numel).expect("count fits a float");
                accumulate(grads, *input, shape, vec![d; numel]);
            }
            Op::GlobalAvgPool { input } => {
                let shape = self.value(*input).shape();
                let plane = shape[2] * shape[3];
                let inv = T::one() / T::from_usize(plane).expect("plane fits a float");
                let dx = dy.iter().flat_map(|&d| std::iter::repeat_n(d * inv, plane)).collect();
                accumulate(grads, *input, shape, dx);
            }
            Op::WeightedDice {
                pred,
                target,
                weights: [wb, wn],
                num,
                den,
            } => {
                let two = T::one() + T::one();
                let d_den = *wb - *wn;
                let scale = dy[0] / (*den * *den);
                let dx = target
                    .iter()
                    .map(|&g| {
                        let d_num = two * (*wb * g - *wn * (T::one() - g));
                        -(d_num * *den - *num * d_den) * scale
                    })
                    .collect();
                accumulate(grads, *pred, self.value(*pred).shape(), dx);
            }
            Op::L1 { pred, target } => {
                let p = self.value(*pred);
                let inv = dy[0] / T::from_usize(p.numel()).expect("count fits a float");
                let dx = p
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&a, &b)| {
                        if a > b {
                            inv
                        } else if a < b {
                            -inv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                accumulate(grads, *pred, p.shape(), dx);
            }
            Op::BceWithLogits { logits, target } => {
                let x = self.value(*logits);
                let inv = dy[0] / T::from_usize(x.numel()).expect("count fits a float");
                let dx = x.data().iter().map(|&v| (sigmoid(v) - *target) * inv).collect();
                accumulate(grads, *logits, x.shape(), dx);
            }
        }
    }

    fn route_conv(&self, g: ConvGrads<T>, input: Var, kernel: Var, bias: Option<Var>, grads: &mut [Option<Tensor<T>>]) {
        if let Some(dx) = g.input {
            accumulate(grads, input, self.value(input).shape(), dx);
        }
        if let Some(dk) = g.kernel {
            accumulate(grads, kernel, self.value(kernel).shape(), dk);
        }
        if let (Some(b), Some(db)) = (bias, g.bias) {
            accumulate(grads, b, self.value(b).shape(), db);
        }
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], var: Var, shape: &[usize], delta: Vec<T>) {
    match &mut grads[var.0] {
        Some(existing) => existing.data_mut().iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), delta).expect("gradient shape")),
    }
}

pub(crate) fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
