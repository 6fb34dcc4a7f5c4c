mod common;

use branchseg::data::{preprocess, write_dataset, DatasetStats};
use branchseg::difficulty::occlusion_difficulty;
use branchseg::{generate_scene, Dataset, DepthMap, MaskSet, Sample, SceneParams, Split};
use image::RgbImage;
use rand::Rng;

const SCENES: u64 = 200;

fn tiny_scenes() -> impl Iterator<Item = Sample> {
    let params = SceneParams::tiny();
    (0..SCENES).map(move |seed| generate_scene(&params, seed).unwrap())
}

#[test]
fn occluded_branch_is_branch_and_occluder() {
    for s in tiny_scenes() {
        let m = &s.masks;
        assert_eq!(m.occluded_branch, m.branch.and(&m.occluder).unwrap(), "{}", s.id);
    }
    let s = generate_scene(&SceneParams::paper(), 3).unwrap();
    assert_eq!(s.masks.occluded_branch, s.masks.branch.and(&s.masks.occluder).unwrap());
}

#[test]
fn thicker_dropout_detects_fewer_branch_pixels() {
    for seed in 0..10 {
        let mut previous = usize::MAX;
        for thickness in [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0] {
            let params = SceneParams {
                depth_dropout_thickness_px: thickness,
                ..SceneParams::tiny()
            };
            let s = generate_scene(&params, seed).unwrap();
            let detected = s.masks.depth_detected.intersection_count(&s.masks.branch).unwrap();
            assert!(
                detected <= previous,
                "seed {seed}: {detected} > {previous} at {thickness}px"
            );
            previous = detected;
        }
    }
}

#[test]
fn branch_fraction_is_near_six_percent() {
    let (branch, total) = tiny_scenes().fold((0, 0), |(b, t), s| {
        (b + s.masks.branch.count(), t + s.masks.branch.len())
    });
    let fraction = branch as f64 / total as f64;
    assert!((fraction - 0.059).abs() <= 0.02, "branch fraction {fraction}");
}

#[test]
fn occlusion_index_spreads_across_scenes() {
    let odi: Vec<f64> = tiny_scenes()
        .filter(|s| s.masks.branch.any())
        .map(|s| occlusion_difficulty(&s.masks.occluder, &s.masks.branch).unwrap())
        .collect();
    let lo = odi.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = odi.iter().cloned().fold(0.0, f64::max);
    assert!(lo <= 0.05 && hi >= 0.7, "occlusion index spans [{lo}, {hi}]");
}

/// A sample with extreme and random values in every plane.
fn random_sample(seed: u64, w: usize, h: usize) -> Sample {
    let mut rng = common::rng(seed);
    let rgb = RgbImage::from_fn(w as u32, h as u32, |_, _| image::Rgb(rng.random()));
    let mut mm: Vec<u16> = (0..w * h).map(|_| rng.random()).collect();
    mm[0] = 0;
    mm[w * h - 1] = u16::MAX;
    let depth = DepthMap::from_mm(w, h, mm).unwrap();
    let branch = common::random_mask(&mut rng, w, h, 0.3);
    let occluder = common::random_mask(&mut rng, w, h, 0.4);
    let detected = depth.detected();
    Sample {
        id: format!("{seed:05}"),
        rgb,
        depth,
        masks: MaskSet::new(branch, occluder, detected).unwrap(),
    }
}

#[test]
fn saved_samples_load_back_bitwise_with_recounted_stats() {
    let dir = tempfile::tempdir().unwrap();
    let params = SceneParams::tiny();
    let mut samples: Vec<(Sample, Split)> = (0..6)
        .map(|i| {
            (
                random_sample(i, 5 + i as usize, 9),
                if i < 4 { Split::Train } else { Split::Val },
            )
        })
        .collect();
    for seed in 10..14 {
        samples.push((generate_scene(&params, seed).unwrap(), Split::Train));
    }
    let manifest = write_dataset(dir.path(), &samples, None).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let mut loaded = ds.load_split(Split::Train).unwrap();
    loaded.extend(ds.load_split(Split::Val).unwrap());
    assert_eq!(loaded.len(), samples.len());
    for s in &loaded {
        let (orig, _) = samples.iter().find(|(o, _)| o.id == s.id).unwrap();
        assert_eq!(s, orig, "{}", s.id);
    }

    let branch: usize = loaded.iter().map(|s| s.masks.branch.count()).sum();
    let pixels: usize = loaded.iter().map(|s| s.masks.branch.len()).sum();
    assert_eq!(manifest.stats.pixels, pixels as u64);
    assert_eq!(manifest.stats.branch_fraction, branch as f64 / pixels as f64);
    assert_eq!(manifest.stats, DatasetStats::from_samples(loaded.iter()));
    assert_eq!(ds.manifest().stats, manifest.stats);
}

#[test]
fn preprocessing_at_native_size_is_idempotent() {
    for (seed, size) in [(1, 4), (2, 9), (3, 16), (4, 33)] {
        let s = random_sample(seed, size, size);
        let once = preprocess(&s, size, size).unwrap();
        assert_eq!(once, s);
        assert_eq!(preprocess(&once, size, size).unwrap(), once);
    }
    let scene = generate_scene(&SceneParams::tiny(), 5).unwrap();
    let once = preprocess(&scene, 64, 64).unwrap();
    assert_eq!(preprocess(&once, 64, 64).unwrap(), once);
}

#[test]
fn preprocessing_keeps_the_occlusion_identity() {
    let scene = generate_scene(&SceneParams::paper(), 8).unwrap();
    let out = preprocess(&scene, 480, 256).unwrap();
    assert_eq!((out.width(), out.height()), (256, 256));
    let m = &out.masks;
    assert_eq!(m.occluded_branch, m.branch.and(&m.occluder).unwrap());
    assert!(m.branch.any());
}
