//! Gradient-check suites over every differentiable op and every model kind.

use branchseg::{
    Activation, BatchNormConfig, ConvParams, Graph, Mode, Model, ModelKind, Padding, Preset, Result, RunningStats,
    Tensor, Var,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{grad_scale, gradcheck, kink_pattern, random_tensor, rng, tensor_away_from_zero, GradError};

pub const OP_STEP: f64 = 1e-6;
pub const MODEL_STEP: f64 = 1e-6;
/// Fixed signed weights in [-1, 1) for a given shape.
fn weights(shape: &[usize]) -> Tensor<f64> {
    let mut r = rng(shape.iter().product::<usize>() as u64);
    random_tensor(&mut r, shape, -1.0, 1.0)
}

/// Scalar readout `Σ w·y` with fixed signed weights, computed as a
/// full-extent convolution per sample followed by a sum.
pub fn readout(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let [_, c, h, w] = shape[..] else {
        unreachable!("readout expects rank-4 tensors")
    };
    let k = g.constant(weights(&[1, c, h, w]));
    let per_sample = g.conv2d(y, k, None, ConvParams::new(1, 1, Padding::Zeros(0)))?;
    g.sum(per_sample)
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// `(name, inputs, function)` for every op, with inputs drawn from `rng`.
fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> {
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> = Vec::new();
    let conv_variants: [(&'static str, ConvParams); 4] = [
        ("conv2d", ConvParams::same()),
        ("conv2d stride 2", ConvParams::new(2, 1, Padding::Zeros(1))),
        ("conv2d dilation 2", ConvParams::new(1, 2, Padding::Same)),
        ("conv2d dilation 3", ConvParams::new(1, 3, Padding::Zeros(2))),
    ];
    for (name, p) in conv_variants {
        let inputs = vec![
            random_tensor(rng, &[2, 3, 7, 6], -1.0, 1.0),
            random_tensor(rng, &[4, 3, 3, 3], -0.5, 0.5),
            random_tensor(rng, &[4], -0.5, 0.5),
        ];
        cases.push((
            name,
            inputs,
            Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), p)?;
                readout(g, y)
            }),
        ));
    }
    for (name, out_pad) in [("conv_transpose2d", 0), ("conv_transpose2d output padding", 1)] {
        let inputs = vec![
            random_tensor(rng, &[2, 3, 4, 5], -1.0, 1.0),
            random_tensor(rng, &[3, 2, 4, 4], -0.5, 0.5),
            random_tensor(rng, &[2], -0.5, 0.5),
        ];
        let (stride, pad) = if out_pad == 0 { (2, 1) } else { (3, 1) };
        cases.push((
            name,
            inputs,
            Box::new(move |g, v| {
                let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad, out_pad)?;
                readout(g, y)
            }),
        ));
    }
    for (name, mode) in [("batch_norm train", Mode::Train), ("batch_norm infer", Mode::Infer)] {
        let inputs = vec![
            random_tensor(rng, &[3, 2, 3, 3], -2.0, 2.0),
            random_tensor(rng, &[2], 0.5, 1.5),
            random_tensor(rng, &[2], -0.5, 0.5),
        ];
        cases.push((
            name,
            inputs,
            Box::new(move |g, v| {
                let mut stats = RunningStats {
                    mean: vec![0.1, -0.2],
                    var: vec![1.5, 0.7],
                };
                let y = g.batch_norm(v[0], v[1], v[2], &mut stats, mode, BatchNormConfig::default())?;
                readout(g, y)
            }),
        ));
    }
    for (name, act) in [
        ("relu", Activation::Relu),
        ("leaky_relu", Activation::leaky_relu()),
        ("sigmoid", Activation::Sigmoid),
    ] {
        let inputs = vec![tensor_away_from_zero(rng, &[2, 3, 4, 4], 0.05)];
        cases.push((
            name,
            inputs,
            Box::new(move |g, v| {
                let y = g.activation(v[0], act)?;
                readout(g, y)
            }),
        ));
    }
    let drop_seed: u64 = rng.random();
    cases.push((
        "dropout",
        vec![random_tensor(rng, &[2, 3, 4, 4], -1.0, 1.0)],
        Box::new(move |g, v| {
            let mut r = ChaCha8Rng::seed_from_u64(drop_seed);
            let y = g.dropout(v[0], 0.5, Mode::Train, &mut r)?;
            readout(g, y)
        }),
    ));
    for (name, oh, ow) in [("upsample_bilinear up", 7, 9), ("upsample_bilinear down", 2, 3)] {
        cases.push((
            name,
            vec![random_tensor(rng, &[2, 2, 3, 4], -1.0, 1.0)],
            Box::new(move |g, v| {
                let y = g.upsample_bilinear(v[0], oh, ow)?;
                readout(g, y)
            }),
        ));
    }
    cases.push((
        "concat_channels",
        vec![
            random_tensor(rng, &[2, 2, 3, 3], -1.0, 1.0),
            random_tensor(rng, &[2, 3, 3, 3], -1.0, 1.0),
        ],
        Box::new(|g, v| {
            let y = g.concat_channels(v[0], v[1])?;
            readout(g, y)
        }),
    ));
    cases.push((
        "add",
        vec![
            random_tensor(rng, &[2, 2, 3, 3], -1.0, 1.0),
            random_tensor(rng, &[2, 2, 3, 3], -1.0, 1.0),
        ],
        Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            readout(g, y)
        }),
    ));
    cases.push((
        "scale",
        vec![random_tensor(rng, &[2, 2, 3, 3], -1.0, 1.0)],
        Box::new(|g, v| {
            let y = g.scale(v[0], -1.7)?;
            readout(g, y)
        }),
    ));
    cases.push((
        "square",
        vec![random_tensor(rng, &[2, 2, 3, 3], -1.0, 1.0)],
        Box::new(|g, v| {
            let y = g.square(v[0])?;
            readout(g, y)
        }),
    ));
    cases.push((
        "global_avg_pool",
        vec![random_tensor(rng, &[2, 3, 4, 5], -1.0, 1.0)],
        Box::new(|g, v| {
            let y = g.global_avg_pool(v[0])?;
            readout(g, y)
        }),
    ));
    cases.push((
        "sum",
        vec![random_tensor(rng, &[2, 2, 3, 3], -1.0, 1.0)],
        Box::new(|g, v| {
            let s = g.square(v[0])?;
            g.sum(s)
        }),
    ));
    cases.push((
        "mean",
        vec![random_tensor(rng, &[2, 2, 3, 3], -1.0, 1.0)],
        Box::new(|g, v| {
            let s = g.square(v[0])?;
            g.mean(s)
        }),
    ));
    let target = random_tensor(rng, &[2, 1, 4, 4], 0.0, 1.0).map(|v| v.round());
    let w: [f64; 2] = [rng.random_range(0.1..1.9), rng.random_range(0.1..1.9)];
    let t = target.clone();
    cases.push((
        "weighted_dice",
        vec![random_tensor(rng, &[2, 1, 4, 4], 0.0, 1.0)],
        Box::new(move |g, v| g.weighted_dice(v[0], &t, w, 1.0)),
    ));
    // Predictions kept ≥ 0.05 from the target so |p − t| stays differentiable.
    let l1_target = random_tensor(rng, &[2, 1, 4, 4], 0.0, 1.0);
    let offsets = tensor_away_from_zero(rng, &[2, 1, 4, 4], 0.05);
    let pred = Tensor::new(
        l1_target.shape().to_vec(),
        l1_target
            .data()
            .iter()
            .zip(offsets.data())
            .map(|(t, o)| t + 0.3 * o)
            .collect(),
    )
    .unwrap();
    cases.push(("l1", vec![pred], Box::new(move |g, v| g.l1(v[0], &l1_target))));
    for (name, label) in [("bce_with_logits real", 1.0), ("bce_with_logits fake", 0.0)] {
        cases.push((
            name,
            vec![random_tensor(rng, &[2, 1, 3, 3], -3.0, 3.0)],
            Box::new(move |g, v| g.bce_with_logits(v[0], label)),
        ));
    }
    cases.push((
        "sum of squared conv2d",
        vec![
            random_tensor(rng, &[2, 3, 6, 6], -1.0, 1.0),
            random_tensor(rng, &[2, 3, 3, 3], -0.5, 0.5),
        ],
        Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], None, ConvParams::same())?;
            let y = g.square(y)?;
            g.sum(y)
        }),
    ));
    cases.push((
        "conv2d, batch_norm, leaky_relu, sigmoid",
        vec![
            random_tensor(rng, &[2, 3, 6, 6], -1.0, 1.0),
            random_tensor(rng, &[4, 3, 3, 3], -0.5, 0.5),
            random_tensor(rng, &[4], 0.5, 1.5),
            random_tensor(rng, &[4], -0.5, 0.5),
        ],
        Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], None, ConvParams::same())?;
            let mut stats = RunningStats::new(4);
            let y = g.batch_norm(y, v[2], v[3], &mut stats, Mode::Train, BatchNormConfig::default())?;
            let y = g.activation(y, Activation::leaky_relu())?;
            let y = g.sigmoid(y)?;
            readout(g, y)
        }),
    ));
    cases
}

/// Every op checked once with inputs drawn from `seed`.
pub fn op_gradchecks(seed: u64) -> Vec<(&'static str, GradError)> {
    let mut r = rng(seed);
    let cases = op_cases(&mut r);
    cases
        .into_iter()
        .map(|(name, inputs, f)| (name, gradcheck(&inputs, f, OP_STEP, 24, &mut r)))
        .collect()
}

pub const MODEL_KINDS: [ModelKind; 4] = [
    ModelKind::Pix2pixGenerator,
    ModelKind::PatchganDiscriminator,
    ModelKind::Unet,
    ModelKind::Deeplab,
];

/// Loss value and kink pattern of one forward pass.
fn model_loss(model: &mut Model<f64>, x: &Tensor<f64>) -> (f64, Vec<bool>) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let loss = record_loss(model, &mut g, xv, false).unwrap().0;
    (g.value(loss).item().unwrap(), kink_pattern(&g))
}

fn record_loss(model: &mut Model<f64>, g: &mut Graph<f64>, x: Var, track: bool) -> Result<(Var, Vec<Var>)> {
    model.reseed_dropout(7);
    let fwd = model.forward(g, x, track)?;
    Ok((readout(g, fwd.output)?, fwd.params))
}

/// Central difference of the loss, or `None` when some ReLU input changes
/// sign inside the stencil (the loss is only piecewise smooth there).
fn probe(
    model: &mut Model<f64>,
    x: &Tensor<f64>,
    base: &[bool],
    step: f64,
    set: &mut dyn FnMut(&mut Model<f64>, &mut Tensor<f64>, f64),
) -> Option<f64> {
    let mut side = |delta: f64| {
        let mut xd = x.clone();
        set(model, &mut xd, delta);
        let out = model_loss(model, &xd);
        set(model, &mut xd, 0.0);
        out
    };
    let (plus, kp) = side(step);
    let (minus, km) = side(-step);
    (kp == base && km == base).then(|| (plus - minus) / (2.0 * step))
}

/// Full `tiny` model (batch statistics and a fixed dropout mask in training
/// mode): gradients of the linear readout with respect to `n_params` random
/// parameter entries and `n_inputs` random input pixels. Probes whose stencil
/// straddles a ReLU kink are redrawn, up to four times the quota.
pub fn model_gradcheck(kind: ModelKind, mode: Mode, seed: u64, n_params: usize, n_inputs: usize) -> GradError {
    let spec = Preset::Tiny.model_spec(kind);
    let mut model = Model::<f64>::build(&spec, seed).unwrap();
    model.set_mode(mode);
    let mut r = rng(seed ^ 0xA5A5);
    let x = random_tensor(
        &mut r,
        &[2, spec.forward_channels(), spec.input_size, spec.input_size],
        0.0,
        1.0,
    );

    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let (loss, params) = record_loss(&mut model, &mut g, xv, true).unwrap();
    let grads = g.backward(loss).unwrap();
    let base = kink_pattern(&g);
    drop(g);

    let mut err = GradError::default();
    let n_tensors = model.params().params().len();
    let mut attempts = 0;
    while err.checked < n_params && attempts < 4 * n_params {
        attempts += 1;
        let p = r.random_range(0..n_tensors);
        let e = r.random_range(0..model.params().params()[p].value.numel());
        let grad = grads.get(params[p]).unwrap().data();
        let original = model.params().params()[p].value.data()[e];
        let mut set = |m: &mut Model<f64>, _: &mut Tensor<f64>, delta: f64| {
            m.params_mut().params_mut()[p].value.data_mut()[e] = original + delta;
        };
        match probe(&mut model, &x, &base, MODEL_STEP, &mut set) {
            Some(numeric) => err.record(grad[e], numeric, grad_scale(grad)),
            None => err.skipped += 1,
        }
    }
    let input_grad = grads.get(xv).unwrap().data();
    let scale = grad_scale(input_grad);
    let target = err.checked + n_inputs;
    attempts = 0;
    while err.checked < target && attempts < 4 * n_inputs {
        attempts += 1;
        let e = r.random_range(0..x.numel());
        let original = x.data()[e];
        let mut set = |_: &mut Model<f64>, xd: &mut Tensor<f64>, delta: f64| {
            xd.data_mut()[e] = original + delta;
        };
        match probe(&mut model, &x, &base, MODEL_STEP, &mut set) {
            Some(numeric) => err.record(input_grad[e], numeric, scale),
            None => err.skipped += 1,
        }
    }
    err
}
