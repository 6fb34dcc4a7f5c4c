//! Procedural 2D-open-V trellis scenes with exact label planes.
//!
//! A scene is two leaders rising as a V from the bottom centre, quadratic side
//! branches with linear taper, elliptical leaves drawn over them, and a flat
//! shaded RGB image plus a millimetre depth map. Labels come from the geometry,
//! so hidden branch pixels are known exactly.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::data::{write_dataset, Manifest, Split};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::sample::{meters_to_mm, DepthMap, MaskSet, Sample};

/// Closed interval `[lo, hi]`, serialized as a two-element array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span<T>(pub T, pub T);

impl<T: Copy + PartialOrd> Span<T> {
    pub fn lo(&self) -> T {
        self.0
    }

    pub fn hi(&self) -> T {
        self.1
    }

    fn is_ordered(&self) -> bool {
        self.0 <= self.1
    }
}

impl Span<f64> {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.random_range(self.0..self.1)
        }
    }
}

impl Span<usize> {
    fn sample(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(self.0..=self.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    /// Half-angle of the V, measured from vertical.
    pub trunk_angle_deg: Span<f64>,
    pub branch_count: Span<usize>,
    /// Thickness where a side branch leaves its leader; branches taper to
    /// `tip_taper` of this at the tip.
    pub branch_thickness_px: Span<f64>,
    pub leader_thickness_px: Span<f64>,
    /// Side branch length as a fraction of the image height.
    pub branch_length_frac: Span<f64>,
    pub tip_taper: f64,
    /// Minimum and maximum number of leaves per scene.
    pub leaf_count: Span<usize>,
    /// Major axis length of a leaf ellipse.
    pub leaf_size_px: Span<f64>,
    /// Mean per-scene occlusion difficulty the leaf placement aims for.
    pub occlusion_target: f64,
    /// Each scene's target is drawn uniformly from `occlusion_target ± occlusion_jitter`.
    pub occlusion_jitter: f64,
    /// Visible branch pixels thinner than this get no depth reading.
    pub depth_dropout_thickness_px: f64,
    /// Fraction of all pixels whose depth reading is randomly lost.
    pub depth_speckle: f64,
    pub camera_distance_m: Span<f64>,
}

impl SceneParams {
    /// 64×64 scenes, about 6% branch pixels.
    pub fn tiny() -> Self {
        SceneParams {
            width: 64,
            height: 64,
            trunk_angle_deg: Span(18.0, 32.0),
            branch_count: Span(2, 5),
            branch_thickness_px: Span(1.2, 1.9),
            leader_thickness_px: Span(1.7, 2.3),
            branch_length_frac: Span(0.15, 0.32),
            tip_taper: 0.6,
            leaf_count: Span(0, 250),
            leaf_size_px: Span(5.0, 9.0),
            occlusion_target: 0.3,
            occlusion_jitter: 0.45,
            depth_dropout_thickness_px: 1.5,
            depth_speckle: 0.01,
            camera_distance_m: Span(1.8, 2.2),
        }
    }

    /// 640×480 scenes: the tiny geometry scaled to a 480-pixel crop.
    pub fn paper() -> Self {
        let s = 480.0 / 64.0;
        let scale = |r: Span<f64>| Span(r.0 * s, r.1 * s);
        let tiny = Self::tiny();
        SceneParams {
            width: 640,
            height: 480,
            branch_thickness_px: scale(tiny.branch_thickness_px),
            leader_thickness_px: scale(tiny.leader_thickness_px),
            leaf_size_px: scale(tiny.leaf_size_px),
            depth_dropout_thickness_px: tiny.depth_dropout_thickness_px * s,
            ..tiny
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: &str| Err(Error::invalid("scene params", detail.to_string()));
        if self.width < 8 || self.height < 8 {
            return bad("scenes must be at least 8x8");
        }
        let spans_f = [
            ("trunk_angle_deg", self.trunk_angle_deg),
            ("branch_thickness_px", self.branch_thickness_px),
            ("leader_thickness_px", self.leader_thickness_px),
            ("branch_length_frac", self.branch_length_frac),
            ("leaf_size_px", self.leaf_size_px),
            ("camera_distance_m", self.camera_distance_m),
        ];
        for (name, span) in spans_f {
            if !span.is_ordered() || !(span.0 > 0.0) || !span.1.is_finite() {
                return bad(&format!("{name} must be a positive, ordered range"));
            }
        }
        if self.trunk_angle_deg.1 >= 80.0 {
            return bad("trunk_angle_deg must stay below 80");
        }
        if !self.branch_count.is_ordered() || !self.leaf_count.is_ordered() {
            return bad("count ranges must be ordered");
        }
        if self.branch_count.1 > 64 {
            return bad("at most 64 side branches");
        }
        if !(0.0..=1.0).contains(&self.occlusion_target) || !(0.0..=1.0).contains(&self.occlusion_jitter) {
            return bad("occlusion_target and occlusion_jitter must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.depth_speckle) {
            return bad("depth_speckle must lie in [0, 1]");
        }
        if !(self.tip_taper > 0.0 && self.tip_taper <= 1.0) {
            return bad("tip_taper must lie in (0, 1]");
        }
        if !(self.depth_dropout_thickness_px >= 0.0) {
            return bad("depth_dropout_thickness_px must be non-negative");
        }
        if self.camera_distance_m.0 < 0.8 || self.camera_distance_m.1 > 4.0 {
            return bad("camera_distance_m must lie within [0.8, 4]");
        }
        Ok(())
    }
}

impl Default for SceneParams {
    fn default() -> Self {
        Self::tiny()
    }
}

/// A generated scene with generator-side detail the sample does not carry.
#[derive(Clone, Debug)]
pub struct Scene {
    pub sample: Sample,
    /// Local branch thickness per pixel (0 off-branch).
    pub thickness: Vec<f32>,
    pub occlusion_target: f64,
    pub leaves: usize,
    /// The leaf budget ran out before the occlusion target was reached.
    pub budget_exhausted: bool,
}

#[derive(Clone, Copy, Debug)]
struct Point {
    x: f64,
    y: f64,
}

/// Raster being painted: branch coverage, thickness and depth per branch.
struct Canvas {
    w: usize,
    h: usize,
    branch: Mask,
    thickness: Vec<f32>,
    /// Branch surface depth in metres where painted.
    branch_depth: Vec<f64>,
    /// Brown shade factor of the branch owning each pixel.
    branch_shade: Vec<f32>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Canvas {
            w,
            h,
            branch: Mask::new(w, h),
            thickness: vec![0.0; w * h],
            branch_depth: vec![0.0; w * h],
            branch_shade: vec![1.0; w * h],
        }
    }

    /// Paints a disc of diameter `thickness` centred at `c`.
    fn disc(&mut self, c: Point, thickness: f64, depth: f64, shade: f32) {
        let r = (thickness / 2.0).max(0.5);
        let x0 = (c.x - r).floor().max(0.0) as usize;
        let y0 = (c.y - r).floor().max(0.0) as usize;
        let x1 = ((c.x + r).ceil() as isize).min(self.w as isize - 1);
        let y1 = ((c.y + r).ceil() as isize).min(self.h as isize - 1);
        if x1 < 0 || y1 < 0 {
            return;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let dx = x as f64 + 0.5 - c.x;
                let dy = y as f64 + 0.5 - c.y;
                if dx * dx + dy * dy <= r * r {
                    let i = y * self.w + x;
                    if !self.branch.get(x, y) || (self.thickness[i] as f64) < thickness {
                        self.thickness[i] = thickness as f32;
                        self.branch_depth[i] = depth;
                        self.branch_shade[i] = shade;
                    }
                    self.branch.set(x, y, true);
                }
            }
        }
    }

    /// Paints a quadratic Bézier stroke tapering linearly from `t0` to `t1`.
    #[allow(clippy::too_many_arguments)]
    fn stroke(&mut self, p0: Point, p1: Point, p2: Point, t0: f64, t1: f64, depth: f64, shade: f32) {
        let len = dist(p0, p1) + dist(p1, p2);
        let steps = (len * 4.0).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let p = bezier(p0, p1, p2, t);
            self.disc(p, t0 + (t1 - t0) * t, depth, shade);
        }
    }
}

fn dist(a: Point, b: Point) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
}

fn bezier(p0: Point, p1: Point, p2: Point, t: f64) -> Point {
    let u = 1.0 - t;
    Point {
        x: u * u * p0.x + 2.0 * u * t * p1.x + t * t * p2.x,
        y: u * u * p0.y + 2.0 * u * t * p1.y + t * t * p2.y,
    }
}

fn inside(p: Point, w: usize, h: usize) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x < w as f64 && p.y < h as f64
}

struct Leaf {
    c: Point,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Leaf {
    fn random(rng: &mut impl Rng, c: Point, size: &Span<f64>) -> Self {
        let a = size.sample(rng) / 2.0;
        let b = a * rng.random_range(0.45..0.7);
        let phi = rng.random_range(0.0..std::f64::consts::PI);
        Leaf {
            c,
            a,
            b,
            cos: phi.cos(),
            sin: phi.sin(),
        }
    }

    fn contains(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.c.x;
        let dy = y as f64 + 0.5 - self.c.y;
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v <= 1.0
    }

    /// Pixel bounds clipped to the image, inclusive.
    fn bounds(&self, w: usize, h: usize) -> Option<(usize, usize, usize, usize)> {
        let r = self.a;
        let x1 = (self.c.x + r).ceil().min(w as f64 - 1.0);
        let y1 = (self.c.y + r).ceil().min(h as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            return None;
        }
        let x0 = (self.c.x - r).floor().max(0.0) as usize;
        let y0 = (self.c.y - r).floor().max(0.0) as usize;
        Some((x0, y0, x1 as usize, y1 as usize))
    }
}

const GEOMETRY_STREAM: u64 = 1;
const LEAF_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;
const SPECKLE_STREAM: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Seed of sample `index` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Generates one scene. Identical `(params, seed)` give bitwise identical output.
pub fn generate_scene(params: &SceneParams, seed: u64) -> Result<Sample> {
    Ok(render_scene(params, seed)?.sample)
}

pub fn render_scene(params: &SceneParams, seed: u64) -> Result<Scene> {
    params.validate()?;
    let (w, h) = (params.width, params.height);
    let (wf, hf) = (w as f64, h as f64);
    let mut rng = stream(seed, GEOMETRY_STREAM);
    let camera = params.camera_distance_m.sample(&mut rng);
    let mut canvas = Canvas::new(w, h);

    // Leaders: a V rising from just below the bottom centre.
    let half_angle = params.trunk_angle_deg.sample(&mut rng).to_radians();
    let base = Point {
        x: wf / 2.0 + rng.random_range(-0.03..0.03) * wf,
        y: hf + 1.0,
    };
    let leader_len = hf * 0.85 / half_angle.cos();
    let mut leaders = Vec::with_capacity(2);
    for side in [-1.0, 1.0] {
        let angle = half_angle + rng.random_range(-0.05..0.05);
        let tip = Point {
            x: base.x + side * angle.sin() * leader_len,
            y: base.y - angle.cos() * leader_len,
        };
        let bow = rng.random_range(-0.04..0.04) * hf;
        let mid = Point {
            x: (base.x + tip.x) / 2.0 + bow,
            y: (base.y + tip.y) / 2.0,
        };
        let t0 = params.leader_thickness_px.sample(&mut rng);
        let depth = camera + rng.random_range(-0.03..0.03);
        let shade = rng.random_range(0.85..1.1) as f32;
        canvas.stroke(base, mid, tip, t0, t0 * 0.7, depth, shade);
        leaders.push((base, mid, tip, t0, side));
    }

    // Side branches leave a leader and grow outward or inward.
    let n_branches = params.branch_count.sample(&mut rng);
    let mut placed = 0;
    let mut attempts = 0;
    while placed < n_branches {
        attempts += 1;
        if attempts > 50 * n_branches.max(1) {
            return Err(Error::invalid(
                "generate scene",
                format!("could place only {placed} of {n_branches} branches in a {w}x{h} scene"),
            ));
        }
        let (lb, lm, lt, lt0, side) = leaders[rng.random_range(0..2)];
        let along = rng.random_range(0.2..0.85);
        let p0 = bezier(lb, lm, lt, along);
        let outward = if rng.random_bool(0.7) { side } else { -side };
        let elevation: f64 = rng.random_range(-0.25..0.6);
        let len = params.branch_length_frac.sample(&mut rng) * hf;
        let p2 = Point {
            x: p0.x + outward * elevation.cos() * len,
            y: p0.y - elevation.sin() * len,
        };
        let curve = rng.random_range(-0.25..0.25) * len;
        let (nx, ny) = ((p2.y - p0.y) / len, -(p2.x - p0.x) / len);
        let p1 = Point {
            x: (p0.x + p2.x) / 2.0 + nx * curve,
            y: (p0.y + p2.y) / 2.0 + ny * curve,
        };
        let inside_frac = (0..=10)
            .filter(|&i| inside(bezier(p0, p1, p2, i as f64 / 10.0), w, h))
            .count() as f64
            / 11.0;
        let t0 = params
            .branch_thickness_px
            .sample(&mut rng)
            .min(lt0 * (1.0 - 0.3 * along));
        let depth = camera + rng.random_range(-0.08..0.08);
        let shade = rng.random_range(0.8..1.2) as f32;
        if inside_frac < 0.7 {
            continue;
        }
        canvas.stroke(p0, p1, p2, t0, (t0 * params.tip_taper).max(1.0), depth, shade);
        placed += 1;
    }

    let branch_count = canvas.branch.count();
    if branch_count == 0 {
        return Err(Error::invalid("generate scene", "no branch pixel inside the image"));
    }

    // Leaves land uniformly over the branch bounding box, independent of where
    // the branches run, until the per-scene occlusion target is met or the
    // budget is spent.
    let mut rng = stream(seed, LEAF_STREAM);
    let target = (params.occlusion_target + rng.random_range(-1.0..=1.0) * params.occlusion_jitter).clamp(0.0, 1.0);
    let (bx0, by0, bx1, by1) = bounding_box(&canvas.branch);
    let mut occluder = Mask::new(w, h);
    let mut leaf_depth = vec![0.0f64; w * h];
    let mut leaf_shade = vec![1.0f32; w * h];
    let mut hidden = 0usize;
    let mut leaves = 0usize;
    let mut draw = |leaf: &Leaf, rng: &mut ChaCha8Rng, occluder: &mut Mask, hidden: &mut usize| {
        let depth = camera - rng.random_range(0.05..0.3);
        let shade = rng.random_range(0.75..1.25) as f32;
        if let Some((x0, y0, x1, y1)) = leaf.bounds(w, h) {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if leaf.contains(x, y) {
                        if !occluder.get(x, y) && canvas.branch.get(x, y) {
                            *hidden += 1;
                        }
                        occluder.set(x, y, true);
                        // Nearer leaves win.
                        let i = y * w + x;
                        if leaf_depth[i] == 0.0 || depth < leaf_depth[i] {
                            leaf_depth[i] = depth;
                            leaf_shade[i] = shade;
                        }
                    }
                }
            }
        }
    };
    let odi = |hidden: usize| hidden as f64 / branch_count as f64;
    let margin = params.leaf_size_px.hi() / 2.0;
    while leaves < params.leaf_count.lo() || (leaves < params.leaf_count.hi() && odi(hidden) < target) {
        let c = Point {
            x: rng.random_range(bx0 as f64 - margin..bx1 as f64 + 1.0 + margin),
            y: rng.random_range(by0 as f64 - margin..by1 as f64 + 1.0 + margin),
        };
        let leaf = Leaf::random(&mut rng, c, &params.leaf_size_px);
        draw(&leaf, &mut rng, &mut occluder, &mut hidden);
        leaves += 1;
    }
    let budget_exhausted = odi(hidden) < target;

    // Shading and depth.
    let mut noise = stream(seed, NOISE_STREAM);
    let horizon = hf * noise.random_range(0.3..0.45);
    let mut rgb = RgbImage::new(w as u32, h as u32);
    let mut depth = DepthMap::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let yf = y as f64 + 0.5;
            let (base_rgb, d) = if occluder.get(x, y) {
                (scale_rgb([62.0, 128.0, 52.0], leaf_shade[i]), leaf_depth[i])
            } else if canvas.branch.get(x, y) {
                (
                    scale_rgb([108.0, 76.0, 52.0], canvas.branch_shade[i]),
                    canvas.branch_depth[i],
                )
            } else if yf < horizon {
                let t = (yf / horizon) as f32;
                (lerp_rgb([130.0, 180.0, 232.0], [205.0, 222.0, 240.0], t), 0.0)
            } else {
                let t = ((yf - horizon) / (hf - horizon)) as f32;
                let far = 9.0 - 4.0 * (yf - horizon) / (hf - horizon);
                (lerp_rgb([128.0, 140.0, 112.0], [112.0, 122.0, 82.0], t), far)
            };
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().zip(base_rgb) {
                *c = (v + noise.random_range(-10.0f32..=10.0)).round().clamp(0.0, 255.0) as u8;
            }
            rgb.put_pixel(x as u32, y as u32, Rgb(px));
            let d = if d > 0.0 {
                d + noise.random_range(-0.005..=0.005)
            } else {
                0.0
            };
            depth.set_mm(x, y, meters_to_mm(d));
        }
    }

    // Thin visible branches and random speckle lose their depth reading.
    let mut speckle = stream(seed, SPECKLE_STREAM);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let lost = speckle.random::<f64>() < params.depth_speckle;
            let thin = canvas.branch.get(x, y)
                && !occluder.get(x, y)
                && (canvas.thickness[i] as f64) < params.depth_dropout_thickness_px;
            if lost || thin {
                depth.set_mm(x, y, 0);
            }
        }
    }

    let masks = MaskSet::new(canvas.branch, occluder, depth.detected())?;
    Ok(Scene {
        sample: Sample {
            id: format!("seed{seed}"),
            rgb,
            depth,
            masks,
        },
        thickness: canvas.thickness,
        occlusion_target: target,
        leaves,
        budget_exhausted,
    })
}

/// Generates `n_train + n_val` scenes and writes them under `root`.
/// Sample `i` is generated from [`sample_seed`]`(seed, i)`; the first
/// `n_train` samples form the training split.
pub fn generate_dataset(
    params: &SceneParams,
    n_train: usize,
    n_val: usize,
    seed: u64,
    root: &Path,
) -> Result<Manifest> {
    if n_train + n_val == 0 {
        return Err(Error::invalid("generate dataset", "needs at least one sample"));
    }
    params.validate()?;
    let mut samples = Vec::with_capacity(n_train + n_val);
    for i in 0..n_train + n_val {
        let mut sample = generate_scene(params, sample_seed(seed, i))?;
        sample.id = format!("{i:05}");
        let split = if i < n_train { Split::Train } else { Split::Val };
        samples.push((sample, split));
    }
    let source = serde_json::json!({
        "generator": "synthetic-orchard",
        "seed": seed,
        "params": params,
    });
    write_dataset(root, &samples, Some(source))
}

fn bounding_box(m: &Mask) -> (usize, usize, usize, usize) {
    m.positions()
        .fold((usize::MAX, usize::MAX, 0, 0), |(x0, y0, x1, y1), (x, y)| {
            (x0.min(x), y0.min(y), x1.max(x), y1.max(y))
        })
}

fn scale_rgb(c: [f32; 3], s: f32) -> [f32; 3] {
    c.map(|v| v * s)
}

fn lerp_rgb(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}
