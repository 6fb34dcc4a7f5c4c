//! Naive reference implementations and helpers shared by the integration
//! tests. Everything here is written from the definitions, independently of
//! the library's kernels.
#![allow(dead_code)]

pub mod criteria;
pub mod suites;

use branchseg::{Activation, DepthMap, Graph, Mask, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values in ±[`margin`, 1], so piecewise-linear ops stay away from their kinks.
pub fn tensor_away_from_zero(rng: &mut impl Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(margin..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random_mask(rng: &mut impl Rng, w: usize, h: usize, density: f64) -> Mask {
    Mask::from_fn(w, h, |_, _| rng.random_bool(density))
}

/// Blobby masks: a few random rectangles, so boundaries are non-trivial.
pub fn random_blobs(rng: &mut impl Rng, w: usize, h: usize) -> Mask {
    let mut m = Mask::new(w, h);
    for _ in 0..rng.random_range(0..4) {
        let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
        let (x1, y1) = (rng.random_range(x0..w), rng.random_range(y0..h));
        for y in y0..=y1 {
            for x in x0..=x1 {
                m.set(x, y, true);
            }
        }
    }
    if rng.random_bool(0.5) {
        for _ in 0..rng.random_range(0..6) {
            let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
            let v = m.get(x, y);
            m.set(x, y, !v);
        }
    }
    m
}

// ---------------------------------------------------------------- convolution

fn at(t: &Tensor<f64>, idx: [usize; 4]) -> f64 {
    let s = t.shape();
    t.data()[((idx[0] * s[1] + idx[1]) * s[2] + idx[2]) * s[3] + idx[3]]
}

/// Literal definition of a (dilated, strided, zero-padded) convolution:
/// `y[n,o,i,j] = Σ_c Σ_p Σ_q x[n, c, i·s + p·r − pad, j·s + q·r − pad] · k[o,c,p,q]`.
pub fn conv2d_literal(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, dilation: usize, pad: usize) -> Tensor<f64> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
    let ho = (h + 2 * pad - dilation * (kh - 1) - 1) / stride + 1;
    let wo = (w + 2 * pad - dilation * (kw - 1) - 1) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for p in 0..kh {
                            for q in 0..kw {
                                let yy = (i * stride + p * dilation) as isize - pad as isize;
                                let xx = (j * stride + q * dilation) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                acc += at(x, [b, ic, yy as usize, xx as usize]) * at(k, [oc, ic, p, q]);
                            }
                        }
                    }
                    out[((b * o + oc) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new([n, o, ho, wo], out).unwrap()
}

/// Kernel with `r − 1` zeros inserted between taps, so an undilated
/// convolution with it equals a dilated one with the original.
pub fn zero_insert(k: &Tensor<f64>, r: usize) -> Tensor<f64> {
    let [o, c, kh, kw] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
    let (eh, ew) = ((kh - 1) * r + 1, (kw - 1) * r + 1);
    let mut out = vec![0.0; o * c * eh * ew];
    for a in 0..o {
        for b in 0..c {
            for p in 0..kh {
                for q in 0..kw {
                    out[((a * c + b) * eh + p * r) * ew + q * r] = at(k, [a, b, p, q]);
                }
            }
        }
    }
    Tensor::new([o, c, eh, ew], out).unwrap()
}

/// Transposed convolution by scattering each input pixel through the kernel
/// (`k` shaped `[in, out, kh, kw]`).
pub fn conv_transpose_scatter(
    y: &Tensor<f64>,
    k: &Tensor<f64>,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Tensor<f64> {
    let [n, ci, h, w] = [y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]];
    let [_, co, kh, kw] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
    let ho = (h - 1) * stride + kh + output_padding - 2 * pad;
    let wo = (w - 1) * stride + kw + output_padding - 2 * pad;
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for a in 0..ci {
            for i in 0..h {
                for j in 0..w {
                    let v = at(y, [b, a, i, j]);
                    for o in 0..co {
                        for p in 0..kh {
                            for q in 0..kw {
                                let yy = (i * stride + p) as isize - pad as isize;
                                let xx = (j * stride + q) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= ho as isize || xx >= wo as isize {
                                    continue;
                                }
                                out[((b * co + o) * ho + yy as usize) * wo + xx as usize] += v * at(k, [a, o, p, q]);
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, co, ho, wo], out).unwrap()
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// -------------------------------------------------------------------- metrics

pub struct Counts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

pub fn counts_naive(pred: &Mask, gt: &Mask) -> Counts {
    let mut c = Counts {
        tp: 0,
        tn: 0,
        fp: 0,
        fn_: 0,
    };
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            match (pred.get(x, y), gt.get(x, y)) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
    }
    c
}

pub fn iou_naive(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp + fn_) as f64
    }
}

/// Set pixels with a 4-neighbour that is unset or outside the image.
pub fn boundary_naive(m: &Mask) -> Vec<(i64, i64)> {
    let (w, h) = (m.width() as i64, m.height() as i64);
    let set = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && m.get(x as usize, y as usize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if set(x, y)
                && [(1, 0), (-1, 0), (0, 1), (0, -1)]
                    .iter()
                    .any(|&(dx, dy)| !set(x + dx, y + dy))
            {
                out.push((x, y));
            }
        }
    }
    out
}

/// Boundary F1 from all pairwise distances between boundary pixels.
pub fn boundary_f1_naive(pred: &Mask, gt: &Mask, tol: f64) -> f64 {
    let (pb, gb) = (boundary_naive(pred), boundary_naive(gt));
    if pb.is_empty() && gb.is_empty() {
        return 1.0;
    }
    if pb.is_empty() || gb.is_empty() {
        return 0.0;
    }
    let near = |a: (i64, i64), set: &[(i64, i64)]| {
        set.iter().any(|b| {
            let (dx, dy) = ((a.0 - b.0) as f64, (a.1 - b.1) as f64);
            (dx * dx + dy * dy).sqrt() <= tol
        })
    };
    let precision = pb.iter().filter(|&&p| near(p, &gb)).count() as f64 / pb.len() as f64;
    let recall = gb.iter().filter(|&&g| near(g, &pb)).count() as f64 / gb.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn recall_naive(pred: &Mask, class: &Mask) -> Option<f64> {
    let (mut hit, mut total) = (0u64, 0u64);
    for y in 0..class.height() {
        for x in 0..class.width() {
            if class.get(x, y) {
                total += 1;
                hit += u64::from(pred.get(x, y));
            }
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

// ----------------------------------------------------------------- difficulty

pub fn odi_naive(occluder: &Mask, label: &Mask) -> f64 {
    let (mut both, mut total) = (0u64, 0u64);
    for y in 0..label.height() {
        for x in 0..label.width() {
            if label.get(x, y) {
                total += 1;
                both += u64::from(occluder.get(x, y));
            }
        }
    }
    both as f64 / total as f64
}

pub fn ddi_naive(depth: &DepthMap, label: &Mask, max_m: f64) -> f64 {
    let (mut seen, mut total) = (0u64, 0u64);
    for y in 0..label.height() {
        for x in 0..label.width() {
            if label.get(x, y) {
                total += 1;
                let d = depth.get_mm(x, y) as f64 / 1000.0;
                seen += u64::from(d > 0.0 && d <= max_m);
            }
        }
    }
    1.0 - seen as f64 / total as f64
}

// ------------------------------------------------------------------ gradcheck

/// Denominator floor, as a fraction of the probed tensor's largest analytic
/// gradient component, for the headline error. At 1 the error is normwise,
/// `‖a − n‖∞ / ‖a‖∞`.
pub const NORMWISE: f64 = 1.0;
/// Floor of the stricter elementwise error reported alongside.
pub const ELEMENTWISE_FLOOR: f64 = 1e-2;

/// Largest relative discrepancy between analytic and central-difference
/// gradients, `|a − n| / max(|a|, |n|, floor · s)` where `s` is the largest
/// analytic component of the tensor being probed.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradError {
    /// Error with `floor = NORMWISE`.
    pub max_rel: f64,
    /// Error with `floor = ELEMENTWISE_FLOOR`.
    pub elementwise: f64,
    pub checked: usize,
    /// Probes discarded because an activation kink fell inside the stencil.
    pub skipped: usize,
    /// `(analytic, numeric, scale)` at the worst coordinate.
    pub worst: (f64, f64, f64),
}

impl GradError {
    pub fn record(&mut self, analytic: f64, numeric: f64, scale: f64) {
        let e = rel_err(analytic, numeric, NORMWISE * scale);
        if e >= self.max_rel {
            self.max_rel = e;
            self.worst = (analytic, numeric, scale);
        }
        self.elementwise = self
            .elementwise
            .max(rel_err(analytic, numeric, ELEMENTWISE_FLOOR * scale));
        self.checked += 1;
    }

    pub fn merge(self, other: GradError) -> GradError {
        let worst = if other.max_rel > self.max_rel {
            other.worst
        } else {
            self.worst
        };
        GradError {
            max_rel: self.max_rel.max(other.max_rel),
            elementwise: self.elementwise.max(other.elementwise),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
            worst,
        }
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    let d = (a - n).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / a.abs().max(n.abs()).max(floor)
}

/// Largest magnitude in `grad`.
pub fn grad_scale(grad: &[f64]) -> f64 {
    grad.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Signs of every ReLU / leaky-ReLU input on the tape.
pub fn kink_pattern(g: &Graph<f64>) -> Vec<bool> {
    g.pre_activations()
        .filter(|(kind, _)| !matches!(kind, Activation::Sigmoid))
        .flat_map(|(_, t)| t.data().iter().map(|v| *v > 0.0))
        .collect()
}

/// Checks `d loss / d inputs` for a scalar function of several tensors. At
/// most `max_coords` coordinates of each input are probed.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    step: f64,
    max_coords: usize,
    rng: &mut impl Rng,
) -> GradError {
    let eval = |values: &[Tensor<f64>]| -> (f64, Vec<bool>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        (g.value(out).item().unwrap(), kink_pattern(&g))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    let base = kink_pattern(&g);
    let mut err = GradError::default();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap().data().to_vec();
        let scale = grad_scale(&analytic);
        let n = inputs[i].numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| rng.random_range(0..n)).collect()
        };
        for c in coords {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[c] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[c] -= step;
            let ((fp, kp), (fm, km)) = (eval(&plus), eval(&minus));
            if kp != base || km != base {
                err.skipped += 1;
                continue;
            }
            err.record(analytic[c], (fp - fm) / (2.0 * step), scale);
        }
    }
    err
}
