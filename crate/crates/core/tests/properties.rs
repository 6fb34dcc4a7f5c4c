mod common;

use branchseg::difficulty::{occlusion_difficulty, rank_worst_k};
use branchseg::losses::{cgan_generator_objective, compute_class_weights, l1_loss, weighted_dice_loss};
use branchseg::metrics::SampleMetrics;
use branchseg::metrics::{aggregate, binary_accuracy, boundary_f1, class_ious, confusion_counts, sample_metrics};
use branchseg::{
    Activation, Adam, AdamConfig, BatchNormConfig, ClassWeights, ConvParams, DifficultyIndex, DifficultyScore, Graph,
    Mask, Mode, Padding, Parameter, RunningStats, Tensor,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
    (1usize..=16, 1usize..=16).prop_flat_map(|(w, h)| {
        (
            proptest::collection::vec(any::<bool>(), w * h),
            proptest::collection::vec(any::<bool>(), w * h),
        )
            .prop_map(move |(a, b)| (Mask::from_vec(w, h, a).unwrap(), Mask::from_vec(w, h, b).unwrap()))
    })
}

/// Hard prediction and target planes of shape `[n, 1, h, w]`.
fn hard_pair() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>)> {
    (1usize..=2, 1usize..=6, 1usize..=6).prop_flat_map(|(n, h, w)| {
        let len = n * h * w;
        (
            proptest::collection::vec(any::<bool>(), len),
            proptest::collection::vec(any::<bool>(), len),
        )
            .prop_map(move |(p, g)| {
                let t =
                    |v: Vec<bool>| Tensor::new([n, 1, h, w], v.into_iter().map(|b| b as u8 as f64).collect()).unwrap();
                (t(p), t(g))
            })
    })
}

fn unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

proptest! {
    #[test]
    fn metrics_stay_in_unit_interval((pred, gt) in mask_pair(), occ in any::<u64>(), tol in 0.0f64..4.0) {
        let mut rng = common::rng(occ);
        let occluded = Mask::from_fn(gt.width(), gt.height(), |x, y| gt.get(x, y) && rng.random_bool(0.5));
        let m = sample_metrics(&pred, &gt, &occluded, tol).unwrap();
        for v in [m.binary_accuracy, m.iou_branch, m.iou_nonbranch, m.mean_iou, m.boundary_f1] {
            prop_assert!(unit(v), "{m:?}");
        }
        for r in [m.recall_branch, m.recall_nonbranch, m.recall_occluded].into_iter().flatten() {
            prop_assert!(unit(r), "{m:?}");
        }
    }

    #[test]
    fn metrics_are_symmetric_under_joint_inversion((pred, gt) in mask_pair()) {
        let (np, ng) = (pred.not(), gt.not());
        let acc = binary_accuracy(&confusion_counts(&pred, &gt, None).unwrap()).unwrap();
        let acc_inv = binary_accuracy(&confusion_counts(&np, &ng, None).unwrap()).unwrap();
        prop_assert_eq!(acc, acc_inv);
        let (branch, non_branch) = class_ious(&pred, &gt).unwrap();
        let (branch_inv, non_branch_inv) = class_ious(&np, &ng).unwrap();
        prop_assert_eq!(branch, non_branch_inv);
        prop_assert_eq!(non_branch, branch_inv);
    }

    #[test]
    fn boundary_f1_is_symmetric((a, b) in mask_pair(), tol in 0.0f64..4.0) {
        prop_assert_eq!(boundary_f1(&a, &b, tol).unwrap(), boundary_f1(&b, &a, tol).unwrap());
    }

    #[test]
    fn aggregation_ignores_sample_order(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = common::rng(seed);
        let mut rows: Vec<SampleMetrics> = (0..n)
            .map(|i| {
                let (w, h) = (rng.random_range(1..=16), rng.random_range(1..=16));
                let pred = common::random_mask(&mut rng, w, h, 0.4);
                let gt = common::random_mask(&mut rng, w, h, 0.3);
                let occ = common::random_mask(&mut rng, w, h, 0.5).and(&gt).unwrap();
                SampleMetrics { id: format!("{i:05}"), metrics: sample_metrics(&pred, &gt, &occ, 2.0).unwrap() }
            })
            .collect();
        let before = aggregate(&rows).unwrap();
        rows.shuffle(&mut rng);
        prop_assert_eq!(before, aggregate(&rows).unwrap());
    }

    #[test]
    fn weighted_dice_lies_in_unit_interval(
        (target, _) in hard_pair(),
        seed in any::<u64>(),
        wb in 0.01f64..4.0,
        wn in 0.01f64..4.0,
    ) {
        let mut rng = common::rng(seed);
        let pred = Tensor::from_fn(target.shape(), |_| rng.random::<f64>());
        let w = ClassWeights { branch: wb, non_branch: wn };
        let loss = weighted_dice_loss(&pred, &target, w).unwrap();
        prop_assert!(unit(loss), "{loss}");
    }

    #[test]
    fn weighted_dice_is_zero_exactly_on_a_match((pred, target) in hard_pair(), wb in 0.01f64..4.0, wn in 0.01f64..4.0) {
        let w = ClassWeights { branch: wb, non_branch: wn };
        prop_assert_eq!(weighted_dice_loss(&target, &target, w).unwrap(), 0.0);
        let loss = weighted_dice_loss(&pred, &target, w).unwrap();
        prop_assert_eq!(loss == 0.0, pred == target, "loss {}", loss);
        prop_assert!(loss >= 0.0);
    }

    #[test]
    fn generator_objective_is_adversarial_plus_weighted_l1(
        (target, _) in hard_pair(),
        seed in any::<u64>(),
        patches in 1usize..10,
    ) {
        let mut rng = common::rng(seed);
        let pred = Tensor::from_fn(target.shape(), |_| rng.random::<f64>());
        let logits = common::random_tensor(&mut rng, &[1, 1, patches, patches], -6.0, 6.0);
        let mut g = Graph::<f64>::new();
        let l = g.constant(logits.clone());
        let adv = g.bce_with_logits(l, 1.0).unwrap();
        let adversarial = g.value(adv).item().unwrap();
        let expected = adversarial + 100.0 * l1_loss(&pred, &target).unwrap();
        prop_assert_eq!(cgan_generator_objective(&logits, &pred, &target, 100.0).unwrap(), expected);
    }

    #[test]
    fn class_weights_ignore_order_and_duplication(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = common::rng(seed);
        let mut masks: Vec<Mask> = (0..n).map(|_| common::random_mask(&mut rng, 8, 8, 0.1)).collect();
        masks.push(Mask::from_fn(8, 8, |x, _| x == 0));
        let base = compute_class_weights(&masks).unwrap();
        masks.shuffle(&mut rng);
        prop_assert_eq!(compute_class_weights(&masks).unwrap(), base);
        let doubled: Vec<Mask> = masks.iter().chain(masks.iter()).cloned().collect();
        prop_assert_eq!(compute_class_weights(&doubled).unwrap(), base);
    }

    #[test]
    fn adam_updates_are_odd_in_the_gradient(seed in any::<u64>(), steps in 1usize..5) {
        let mut rng = common::rng(seed);
        let shape = [3, 4];
        let grads: Vec<Tensor<f32>> = (0..steps)
            .map(|_| Tensor::from_fn(shape, |_| rng.random_range(-2.0f32..2.0)))
            .collect();
        let run = |sign: f32| {
            let mut params = vec![Parameter { name: "w".into(), value: Tensor::<f32>::zeros(shape) }];
            let mut adam = Adam::new(AdamConfig::default(), &params);
            for g in &grads {
                adam.step(&mut params, &[g.map(|v| sign * v)]).unwrap();
            }
            params.remove(0).value
        };
        let (plus, minus) = (run(1.0), run(-1.0));
        prop_assert!(plus.data().iter().zip(minus.data()).all(|(a, b)| *a == -*b));
        prop_assert!(plus.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn ranking_is_the_sorted_prefix(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = common::rng(seed);
        let scores: Vec<DifficultyScore> = (0..n)
            .map(|i| DifficultyScore {
                sample_id: format!("{:05}", (i * 7919) % 100_000),
                // Coarse values so ties are common.
                occlusion_index: rng.random_range(0..5) as f64 / 4.0,
                depth_index: rng.random_range(0..5) as f64 / 4.0,
            })
            .collect();
        let k = rng.random_range(0..=n);
        for which in [DifficultyIndex::Occlusion, DifficultyIndex::Depth] {
            let mut sorted: Vec<&DifficultyScore> = scores.iter().collect();
            sorted.sort_by(|a, b| {
                b.get(which).total_cmp(&a.get(which)).then(a.sample_id.cmp(&b.sample_id))
            });
            let expected: Vec<String> = sorted[..k].iter().map(|s| s.sample_id.clone()).collect();
            let got = rank_worst_k(&scores, which, k).unwrap();
            prop_assert_eq!(&got, &expected);
            prop_assert_eq!(rank_worst_k(&scores, which, k).unwrap(), got);
        }
    }

    #[test]
    fn occlusion_ignores_occluders_off_the_label(seed in any::<u64>(), w in 1usize..16, h in 1usize..16) {
        let mut rng = common::rng(seed);
        let mut label = common::random_mask(&mut rng, w, h, 0.3);
        label.set(0, 0, true);
        let occluder = common::random_mask(&mut rng, w, h, 0.4);
        let extra = common::random_mask(&mut rng, w, h, 0.5).and(&label.not()).unwrap();
        prop_assert_eq!(
            occlusion_difficulty(&occluder.or(&extra).unwrap(), &label).unwrap(),
            occlusion_difficulty(&occluder, &label).unwrap()
        );
    }
}

/// Runs every forward op on values drawn from ±1e3 and checks outputs and
/// gradients for non-finite entries.
fn forward_ops_stay_finite(seed: u64) -> std::result::Result<(), String> {
    let mut rng = common::rng(seed);
    let big = |rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]| {
        let t = common::random_tensor(rng, shape, -1e3, 1e3);
        t.cast::<f32>()
    };
    let mut g = Graph::<f32>::new();
    let x = g.param(big(&mut rng, &[2, 3, 6, 6]));
    let k = g.param(big(&mut rng, &[4, 3, 3, 3]));
    let b = g.param(big(&mut rng, &[4]));
    let kt = g.param(big(&mut rng, &[4, 2, 3, 3]));
    let gamma = g.param(big(&mut rng, &[4]));
    let beta = g.param(big(&mut rng, &[4]));

    let mut outs = Vec::new();
    let mut push = |v| outs.push(v);
    let conv = g
        .conv2d(x, k, Some(b), ConvParams::new(1, 2, Padding::Same))
        .map_err(|e| e.to_string())?;
    push(conv);
    let strided = g
        .conv2d(x, k, None, ConvParams::new(2, 1, Padding::Zeros(1)))
        .map_err(|e| e.to_string())?;
    push(strided);
    let up = g.conv_transpose2d(conv, kt, None, 2, 1, 1).map_err(|e| e.to_string())?;
    push(up);
    for mode in [Mode::Train, Mode::Infer] {
        let mut stats = RunningStats::new(4);
        let bn = g
            .batch_norm(conv, gamma, beta, &mut stats, mode, BatchNormConfig::default())
            .map_err(|e| e.to_string())?;
        push(bn);
    }
    for kind in [Activation::Relu, Activation::leaky_relu(), Activation::Sigmoid] {
        push(g.activation(conv, kind).map_err(|e| e.to_string())?);
    }
    let sig = g.sigmoid(x).map_err(|e| e.to_string())?;
    push(sig);
    push(g.dropout(x, 0.5, Mode::Train, &mut rng).map_err(|e| e.to_string())?);
    push(g.upsample_bilinear(x, 11, 13).map_err(|e| e.to_string())?);
    push(g.upsample_bilinear(x, 3, 2).map_err(|e| e.to_string())?);
    push(g.concat_channels(x, x).map_err(|e| e.to_string())?);
    push(g.add(x, x).map_err(|e| e.to_string())?);
    push(g.scale(x, -1e3).map_err(|e| e.to_string())?);
    let sq = g.square(conv).map_err(|e| e.to_string())?;
    push(sq);
    push(g.global_avg_pool(x).map_err(|e| e.to_string())?);
    push(g.sum(x).map_err(|e| e.to_string())?);
    push(g.mean(sq).map_err(|e| e.to_string())?);
    for target in [0.0, 1.0] {
        push(g.bce_with_logits(conv, target).map_err(|e| e.to_string())?);
    }
    let target = g.value(sig).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    push(
        g.weighted_dice(sig, &target, [15.95, 0.12], 1.0)
            .map_err(|e| e.to_string())?,
    );
    push(g.l1(sig, &target).map_err(|e| e.to_string())?);

    for &v in &outs {
        if !g.value(v).is_finite() {
            return Err(format!("node {} has a non-finite value", v.index()));
        }
    }
    // One scalar touching every output, so each backward rule runs.
    let mut total = None;
    for &v in &outs {
        let m = g.mean(v).map_err(|e| e.to_string())?;
        let s = g.scale(m, 1e-6).map_err(|e| e.to_string())?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s).map_err(|e| e.to_string())?,
        });
    }
    let grads = g.backward(total.unwrap()).map_err(|e| e.to_string())?;
    for v in [x, k, b, kt, gamma, beta] {
        if !grads.get(v).is_some_and(|t| t.is_finite()) {
            return Err(format!("gradient of leaf {} is missing or non-finite", v.index()));
        }
    }
    Ok(())
}

#[test]
fn forward_ops_stay_finite_on_large_inputs() {
    for seed in 0..40 {
        if let Err(e) = forward_ops_stay_finite(seed) {
            panic!("seed {seed}: {e}");
        }
    }
}
