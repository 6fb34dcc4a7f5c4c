//! Oracle comparisons over randomly drawn cases, returning the measured
//! discrepancies so callers can both assert and report them.

use branchseg::difficulty::{depth_difficulty, occlusion_difficulty};
use branchseg::metrics::{binary_accuracy, boundary_f1, class_ious, class_recall, confusion_counts};
use branchseg::{generate_scene, ConvParams, DepthMap, Graph, Mask, Padding, SceneParams, Tensor};
use rand::Rng;

use super::{
    boundary_f1_naive, conv2d_literal, conv_transpose_scatter, counts_naive, ddi_naive, iou_naive, max_abs_diff,
    odi_naive, random_blobs, random_mask, random_tensor, recall_naive, rng, zero_insert,
};

pub fn conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, dilation: usize, pad: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g
        .conv2d(xv, kv, None, ConvParams::new(stride, dilation, Padding::Zeros(pad)))
        .unwrap();
    g.value(y).clone()
}

pub fn conv_transpose(y: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize, out_pad: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let (yv, kv) = (g.constant(y.clone()), g.constant(k.clone()));
    let x = g.conv_transpose2d(yv, kv, None, stride, pad, out_pad).unwrap();
    g.value(x).clone()
}

#[derive(Debug, Default)]
pub struct ConvReport {
    pub cases: usize,
    /// Library against the literal dilated sum.
    pub literal: f64,
    /// Library against an undilated convolution with the zero-inserted kernel.
    pub zero_insert: f64,
}

/// `cases_per_rate` random convolutions for each dilation rate 1, 2, 3.
pub fn dilated_conv_oracles(seed: u64, cases_per_rate: usize) -> ConvReport {
    let mut r = rng(seed);
    let mut report = ConvReport::default();
    for rate in 1..=3usize {
        for _ in 0..cases_per_rate {
            let (n, c, o) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
            let (kh, kw) = (r.random_range(1..=3), r.random_range(1..=3));
            let stride = r.random_range(1..=2);
            let pad = r.random_range(0..=rate * 2);
            let min_side = (rate * (kh.max(kw) - 1) + 1).saturating_sub(2 * pad).max(1);
            let (h, w) = (
                r.random_range(min_side..min_side + 9),
                r.random_range(min_side..min_side + 9),
            );
            let x = random_tensor(&mut r, &[n, c, h, w], -1.0, 1.0);
            let k = random_tensor(&mut r, &[o, c, kh, kw], -1.0, 1.0);
            let y = conv(&x, &k, stride, rate, pad);
            report.literal = report
                .literal
                .max(max_abs_diff(&y, &conv2d_literal(&x, &k, stride, rate, pad)));
            let dense = conv(&x, &zero_insert(&k, rate), stride, 1, pad);
            report.zero_insert = report.zero_insert.max(max_abs_diff(&y, &dense));
            report.cases += 1;
        }
    }
    report
}

#[derive(Debug, Default)]
pub struct AdjointReport {
    pub pairs: usize,
    /// Largest `|⟨conv(x), y⟩ − ⟨x, convT(y)⟩| / (‖conv(x)‖·‖y‖)`.
    pub adjoint: f64,
    /// Library transposed convolution against the scatter oracle.
    pub scatter: f64,
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn norm(a: &Tensor<f64>) -> f64 {
    dot(a, a).sqrt()
}

/// Random shape-compatible (conv2d, conv_transpose2d) pairs sharing a kernel.
pub fn transpose_adjoint(seed: u64, pairs: usize) -> AdjointReport {
    let mut r = rng(seed);
    let mut report = AdjointReport::default();
    while report.pairs < pairs {
        let (n, c, o) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
        let k_side = r.random_range(1..=4);
        let stride = r.random_range(1..=3);
        let pad = r.random_range(0..k_side);
        let (h, w) = (r.random_range(k_side..k_side + 9), r.random_range(k_side..k_side + 9));
        let x = random_tensor(&mut r, &[n, c, h, w], -1.0, 1.0);
        let k = random_tensor(&mut r, &[o, c, k_side, k_side], -1.0, 1.0);
        let y_shape = conv(&x, &k, stride, 1, pad).shape().to_vec();
        let out_pad = |side: usize, out: usize| side + 2 * pad - (out - 1) * stride - k_side;
        let (ph, pw) = (out_pad(h, y_shape[2]), out_pad(w, y_shape[3]));
        if ph != pw {
            // One output padding covers both axes; draw again.
            continue;
        }
        let y = random_tensor(&mut r, &y_shape, -1.0, 1.0);
        let cx = conv(&x, &k, stride, 1, pad);
        let ty = conv_transpose(&y, &k, stride, pad, ph);
        assert_eq!(ty.shape(), x.shape());
        let gap = (dot(&cx, &y) - dot(&x, &ty)).abs() / (norm(&cx) * norm(&y)).max(f64::MIN_POSITIVE);
        report.adjoint = report.adjoint.max(gap);
        report.scatter = report
            .scatter
            .max(max_abs_diff(&ty, &conv_transpose_scatter(&y, &k, stride, pad, ph)));
        report.pairs += 1;
    }
    report
}

#[derive(Debug, Default)]
pub struct MetricReport {
    pub pairs: usize,
    /// Pairs where a confusion count, accuracy, IoU or recall differs at all.
    pub count_mismatches: usize,
    pub boundary_f1: f64,
}

/// Random mask pairs up to 16×16, half speckle and half blobs.
pub fn metric_oracles(seed: u64, pairs: usize) -> MetricReport {
    let mut r = rng(seed);
    let mut report = MetricReport::default();
    for i in 0..pairs {
        let (w, h) = (r.random_range(1..=16), r.random_range(1..=16));
        let (pred, gt) = if i % 2 == 0 {
            let (dp, dg) = (r.random_range(0.0..1.0), r.random_range(0.0..1.0));
            (random_mask(&mut r, w, h, dp), random_mask(&mut r, w, h, dg))
        } else {
            (random_blobs(&mut r, w, h), random_blobs(&mut r, w, h))
        };
        let occluded = random_mask(&mut r, w, h, 0.3).and(&gt).unwrap();
        let tol = [0.0, 1.0, 1.5, 2.0, 3.0][i % 5];

        let c = confusion_counts(&pred, &gt, None).unwrap();
        let naive = counts_naive(&pred, &gt);
        let (iou_b, iou_nb) = class_ious(&pred, &gt).unwrap();
        let total = (naive.tp + naive.tn + naive.fp + naive.fn_) as f64;
        let exact = (c.tp, c.tn, c.fp, c.fn_) == (naive.tp, naive.tn, naive.fp, naive.fn_)
            && binary_accuracy(&c).unwrap() == (naive.tp + naive.tn) as f64 / total
            && iou_b == iou_naive(naive.tp, naive.fp, naive.fn_)
            && iou_nb == iou_naive(naive.tn, naive.fn_, naive.fp)
            && class_recall(&pred, &gt).unwrap() == recall_naive(&pred, &gt)
            && class_recall(&pred.not(), &gt.not()).unwrap() == recall_naive(&pred.not(), &gt.not())
            && class_recall(&pred, &occluded).unwrap() == recall_naive(&pred, &occluded);
        report.count_mismatches += usize::from(!exact);
        let bf1 = boundary_f1(&pred, &gt, tol).unwrap();
        report.boundary_f1 = report.boundary_f1.max((bf1 - boundary_f1_naive(&pred, &gt, tol)).abs());
        report.pairs += 1;
    }
    report
}

#[derive(Debug, Default)]
pub struct DifficultyReport {
    pub scenes: usize,
    /// Scenes where either index differs from its counting oracle.
    pub oracle_mismatches: usize,
    /// Largest ODI over leaf-free scenes (should be 0).
    pub leaf_free_odi: f64,
    /// Largest DDI with every label pixel given a valid reading (should be 0).
    pub full_depth_ddi: f64,
    /// Monotonicity or invariance violations.
    pub violations: usize,
}

fn leaf_free(params: &SceneParams) -> SceneParams {
    let mut p = params.clone();
    p.leaf_count = branchseg::Span(0, 0);
    p
}

/// Index oracles and invariants on `scenes` generated tiny scenes.
pub fn difficulty_checks(seed: u64, scenes: usize, max_depth_m: f64) -> DifficultyReport {
    let params = SceneParams::tiny();
    let bare = leaf_free(&params);
    let mut r = rng(seed);
    let mut report = DifficultyReport::default();
    for i in 0..scenes {
        let s = generate_scene(&params, seed.wrapping_add(i as u64)).unwrap();
        let (label, occluder, depth) = (&s.masks.branch, &s.masks.occluder, &s.depth);
        let odi = occlusion_difficulty(occluder, label).unwrap();
        let ddi = depth_difficulty(depth, label, max_depth_m).unwrap();
        if odi != odi_naive(occluder, label) || ddi != ddi_naive(depth, label, max_depth_m) {
            report.oracle_mismatches += 1;
        }

        let bare_scene = generate_scene(&bare, seed.wrapping_add(i as u64)).unwrap();
        let bare_odi = occlusion_difficulty(&bare_scene.masks.occluder, &bare_scene.masks.branch).unwrap();
        report.leaf_free_odi = report.leaf_free_odi.max(bare_odi);

        let mut full = depth.clone();
        for (x, y) in label.positions() {
            full.set_meters(x, y, r.random_range(0.5..max_depth_m));
        }
        report.full_depth_ddi = report
            .full_depth_ddi
            .max(depth_difficulty(&full, label, max_depth_m).unwrap());

        report.violations += invariance_violations(&mut r, occluder, label, depth, max_depth_m, odi, ddi);
        report.violations += monotonicity_violations(&mut r, occluder, label, depth, max_depth_m, odi, ddi);
        report.scenes += 1;
    }
    report
}

/// Changing occluder or depth outside the label leaves both indices unchanged.
fn invariance_violations(
    r: &mut impl Rng,
    occluder: &Mask,
    label: &Mask,
    depth: &DepthMap,
    max_depth_m: f64,
    odi: f64,
    ddi: f64,
) -> usize {
    let (w, h) = label.dims();
    let noise = random_mask(r, w, h, 0.5);
    let outside = noise.and(&label.not()).unwrap();
    let inside = occluder.and(label).unwrap();
    let reshuffled = outside.or(&inside).unwrap();
    let extra = occluder.or(&outside).unwrap();
    let mut scrambled = depth.clone();
    for (x, y) in label.not().positions() {
        scrambled.set_mm(x, y, r.random_range(0..=u16::MAX));
    }
    [
        occlusion_difficulty(&reshuffled, label).unwrap() != odi,
        occlusion_difficulty(&extra, label).unwrap() != odi,
        depth_difficulty(&scrambled, label, max_depth_m).unwrap() != ddi,
    ]
    .into_iter()
    .filter(|&v| v)
    .count()
}

/// Occluding label pixels one at a time never lowers ODI; zeroing their depth
/// one at a time never lowers DDI.
fn monotonicity_violations(
    r: &mut impl Rng,
    occluder: &Mask,
    label: &Mask,
    depth: &DepthMap,
    max_depth_m: f64,
    odi: f64,
    ddi: f64,
) -> usize {
    let mut pixels: Vec<(usize, usize)> = label.positions().collect();
    for i in (1..pixels.len()).rev() {
        pixels.swap(i, r.random_range(0..=i));
    }
    let mut violations = 0;
    let (mut occ, mut prev_odi) = (occluder.clone(), odi);
    let (mut d, mut prev_ddi) = (depth.clone(), ddi);
    for &(x, y) in &pixels {
        occ.set(x, y, true);
        let next = occlusion_difficulty(&occ, label).unwrap();
        violations += usize::from(next < prev_odi);
        prev_odi = next;
        d.set_mm(x, y, 0);
        let next = depth_difficulty(&d, label, max_depth_m).unwrap();
        violations += usize::from(next < prev_ddi);
        prev_ddi = next;
    }
    violations += usize::from(prev_odi != 1.0) + usize::from(prev_ddi != 1.0);
    violations
}
