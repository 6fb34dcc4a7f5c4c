//! Dataset layout on disk, preprocessing, RGBD batch assembly and epoch order.
//!
//! Layout: `<root>/{rgb,depth,branch,occluded,occluder}/<id>.png` plus
//! `<root>/manifest.json`. Paths in the manifest are relative to its directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::sample::{DepthMap, MaskSet, Sample};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
/// Depth at which the normalized depth channel saturates.
pub const DEPTH_NORM_M: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub rgb: String,
    pub depth: String,
    pub branch: String,
    pub occluded: String,
    pub occluder: String,
}

impl SampleFiles {
    fn for_id(id: &str) -> Self {
        let f = |dir: &str| format!("{dir}/{id}.png");
        SampleFiles {
            rgb: f("rgb"),
            depth: f("depth"),
            branch: f("branch"),
            occluded: f("occluded"),
            occluder: f("occluder"),
        }
    }

    fn all(&self) -> [&str; 5] {
        [&self.rgb, &self.depth, &self.branch, &self.occluded, &self.occluder]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub files: SampleFiles,
}

/// Pixel class fractions over every sample in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub pixels: u64,
    pub branch_fraction: f64,
    pub occluded_fraction: f64,
    pub occluder_fraction: f64,
}

impl DatasetStats {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        let (mut pixels, mut branch, mut occluded, mut occluder) = (0u64, 0u64, 0u64, 0u64);
        for s in samples {
            pixels += s.masks.branch.len() as u64;
            branch += s.masks.branch.count() as u64;
            occluded += s.masks.occluded_branch.count() as u64;
            occluder += s.masks.occluder.count() as u64;
        }
        let frac = |n: u64| if pixels == 0 { 0.0 } else { n as f64 / pixels as f64 };
        DatasetStats {
            pixels,
            branch_fraction: frac(branch),
            occluded_fraction: frac(occluded),
            occluder_fraction: frac(occluder),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub samples: Vec<ManifestEntry>,
    pub stats: DatasetStats,
    /// Free-form description of where the data came from (e.g. generator settings).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<serde_json::Value>,
}

impl Manifest {
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.samples
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.as_str())
            .collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.samples.iter().filter(|e| e.split == split).count()
    }

    fn validate(&self, root: &Path) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Format {
                what: "manifest",
                detail: format!("version {} (expected {MANIFEST_VERSION})", self.version),
            });
        }
        let mut seen = HashSet::new();
        for e in &self.samples {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Format {
                    what: "manifest",
                    detail: format!("duplicate sample id {}", e.id),
                });
            }
            for f in e.files.all() {
                let path = root.join(f);
                if !path.is_file() {
                    return Err(Error::Format {
                        what: "manifest",
                        detail: format!("{} lists missing file {}", e.id, path.display()),
                    });
                }
            }
        }
        Ok(())
    }
}

/// An opened dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    /// Opens `root/manifest.json` and checks ids and referenced files.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        manifest.validate(&root)?;
        Ok(Dataset { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<Sample> {
        load_sample(&self.root, entry)
    }

    /// Loads every sample of a split, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.manifest
            .samples
            .iter()
            .filter(|e| e.split == split)
            .map(|e| self.load(e))
            .collect()
    }
}

/// Writes a sample's planes below `root` and returns their relative paths.
pub fn save_sample(root: &Path, sample: &Sample) -> Result<SampleFiles> {
    sample.validate()?;
    let files = SampleFiles::for_id(&sample.id);
    for dir in ["rgb", "depth", "branch", "occluded", "occluder"] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let (w, h) = (sample.width() as u32, sample.height() as u32);
    save_png(&root.join(&files.rgb), |p| sample.rgb.save(p))?;
    let depth: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w, h, sample.depth.mm().to_vec()).expect("sizes agree");
    save_png(&root.join(&files.depth), |p| depth.save(p))?;
    for (file, mask) in [
        (&files.branch, &sample.masks.branch),
        (&files.occluded, &sample.masks.occluded_branch),
        (&files.occluder, &sample.masks.occluder),
    ] {
        let img = mask_to_gray(mask);
        save_png(&root.join(file), |p| img.save(p))?;
    }
    Ok(files)
}

fn save_png(path: &Path, write: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    write(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn mask_to_gray(mask: &Mask) -> GrayImage {
    GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.data().iter().map(|&v| if v { 255 } else { 0 }).collect(),
    )
    .expect("sizes agree")
}

fn load_mask(path: &Path) -> Result<Mask> {
    let img = open_image(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Mask::from_vec(w, h, img.into_raw().into_iter().map(|v| v >= 128).collect())
}

pub fn load_sample(root: &Path, entry: &ManifestEntry) -> Result<Sample> {
    let rgb: RgbImage = open_image(&root.join(&entry.files.rgb))?.into_rgb8();
    let depth_img = open_image(&root.join(&entry.files.depth))?.into_luma16();
    let depth = DepthMap::from_mm(
        depth_img.width() as usize,
        depth_img.height() as usize,
        depth_img.into_raw(),
    )?;
    let branch = load_mask(&root.join(&entry.files.branch))?;
    let occluded = load_mask(&root.join(&entry.files.occluded))?;
    let occluder = load_mask(&root.join(&entry.files.occluder))?;
    let detected = depth.detected();
    let masks = MaskSet::new(branch, occluder, detected).map_err(|_| Error::Format {
        what: "sample",
        detail: format!("{}: planes disagree in size", entry.id),
    })?;
    if masks.occluded_branch != occluded {
        return Err(Error::Format {
            what: "sample",
            detail: format!("{}: occluded plane is not branch and occluder", entry.id),
        });
    }
    let sample = Sample {
        id: entry.id.clone(),
        rgb,
        depth,
        masks,
    };
    sample.validate().map_err(|_| Error::Format {
        what: "sample",
        detail: format!("{}: planes disagree in size", entry.id),
    })?;
    Ok(sample)
}

/// Writes samples and a manifest under `root`.
pub fn write_dataset(root: &Path, samples: &[(Sample, Split)], source: Option<serde_json::Value>) -> Result<Manifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (sample, split) in samples {
        entries.push(ManifestEntry {
            id: sample.id.clone(),
            split: *split,
            files: save_sample(root, sample)?,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        samples: entries,
        stats: DatasetStats::from_samples(samples.iter().map(|(s, _)| s)),
        source,
    };
    manifest.validate(root)?;
    let path = root.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Source index and weight pairs for one output coordinate.
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel-centre bilinear taps from `src` to `dst` samples.
fn taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(src - 1);
            Tap {
                lo,
                hi: (lo + 1).min(src - 1),
                frac: s - lo as f64,
            }
        })
        .collect()
}

fn nearest(src: usize, dst: usize) -> Vec<usize> {
    (0..dst)
        .map(|d| (((d as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1))
        .collect()
}

/// Centre crop to `crop_size`² then resize to `out_size`². RGB is bilinear;
/// depth is bilinear over the taps that carry a reading (a pixel with no valid
/// tap stays a miss); masks are nearest-neighbour, so set relations between
/// label planes are preserved exactly.
pub fn preprocess(sample: &Sample, crop_size: usize, out_size: usize) -> Result<Sample> {
    let (w, h) = (sample.width(), sample.height());
    if crop_size == 0 || out_size == 0 {
        return Err(Error::invalid("preprocess", "sizes must be positive"));
    }
    if crop_size > w.min(h) {
        return Err(Error::invalid(
            "preprocess",
            format!("crop {crop_size} exceeds the {w}x{h} image"),
        ));
    }
    let (x0, y0) = ((w - crop_size) / 2, (h - crop_size) / 2);
    let bil = taps(crop_size, out_size);
    let near = nearest(crop_size, out_size);

    let mut rgb = RgbImage::new(out_size as u32, out_size as u32);
    for (oy, ty) in bil.iter().enumerate() {
        for (ox, tx) in bil.iter().enumerate() {
            let px = |x: usize, y: usize| sample.rgb.get_pixel((x0 + x) as u32, (y0 + y) as u32).0;
            let (a, b, c, d) = (px(tx.lo, ty.lo), px(tx.hi, ty.lo), px(tx.lo, ty.hi), px(tx.hi, ty.hi));
            let mut out = [0u8; 3];
            for k in 0..3 {
                let top = f64::from(a[k]) * (1.0 - tx.frac) + f64::from(b[k]) * tx.frac;
                let bottom = f64::from(c[k]) * (1.0 - tx.frac) + f64::from(d[k]) * tx.frac;
                out[k] = (top * (1.0 - ty.frac) + bottom * ty.frac).round() as u8;
            }
            rgb.put_pixel(ox as u32, oy as u32, image::Rgb(out));
        }
    }

    let mut depth = DepthMap::new(out_size, out_size);
    for (oy, ty) in bil.iter().enumerate() {
        for (ox, tx) in bil.iter().enumerate() {
            let mut acc = 0.0;
            let mut weight = 0.0;
            for (x, wx) in [(tx.lo, 1.0 - tx.frac), (tx.hi, tx.frac)] {
                for (y, wy) in [(ty.lo, 1.0 - ty.frac), (ty.hi, ty.frac)] {
                    let mm = sample.depth.get_mm(x0 + x, y0 + y);
                    if mm > 0 && wx * wy > 0.0 {
                        acc += f64::from(mm) * wx * wy;
                        weight += wx * wy;
                    }
                }
            }
            if weight > 0.0 {
                depth.set_mm(ox, oy, (acc / weight).round() as u16);
            }
        }
    }

    let resize_mask = |m: &Mask| Mask::from_fn(out_size, out_size, |x, y| m.get(x0 + near[x], y0 + near[y]));
    let branch = resize_mask(&sample.masks.branch);
    let occluder = resize_mask(&sample.masks.occluder);
    let masks = MaskSet::new(branch, occluder, depth.detected())?;
    Ok(Sample {
        id: sample.id.clone(),
        rgb,
        depth,
        masks,
    })
}

/// Network-ready tensors for a group of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[N, 4, H, W]`: RGB / 255, then depth / 4 m clipped to [0, 1] with misses at 0.
    pub inputs: Tensor<f32>,
    /// `[N, 1, H, W]` branch mask in {0, 1}.
    pub targets: Tensor<f32>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Normalized depth channel value for a reading in millimetres.
pub fn normalize_depth_mm(mm: u16) -> f32 {
    if mm == 0 {
        0.0
    } else {
        ((f64::from(mm) / 1000.0) / DEPTH_NORM_M).min(1.0) as f32
    }
}

pub fn assemble_batch(samples: &[&Sample]) -> Result<Batch> {
    let first = samples.first().ok_or(Error::Empty("assemble batch"))?;
    let (w, h) = (first.width(), first.height());
    let n = samples.len();
    let plane = w * h;
    let mut inputs = vec![0f32; n * 4 * plane];
    let mut targets = vec![0f32; n * plane];
    for (i, s) in samples.iter().enumerate() {
        if (s.width(), s.height()) != (w, h) {
            return Err(Error::shape(
                "assemble batch",
                format!("{} is {}x{}, expected {w}x{h}", s.id, s.width(), s.height()),
            ));
        }
        let base = i * 4 * plane;
        for (p, px) in s.rgb.pixels().enumerate() {
            for c in 0..3 {
                inputs[base + c * plane + p] = f32::from(px.0[c]) / 255.0;
            }
        }
        for (p, &mm) in s.depth.mm().iter().enumerate() {
            inputs[base + 3 * plane + p] = normalize_depth_mm(mm);
        }
        for (p, &b) in s.masks.branch.data().iter().enumerate() {
            targets[i * plane + p] = if b { 1.0 } else { 0.0 };
        }
    }
    Ok(Batch {
        inputs: Tensor::new([n, 4, h, w], inputs)?,
        targets: Tensor::new([n, 1, h, w], targets)?,
        ids: samples.iter().map(|s| s.id.clone()).collect(),
    })
}

/// Index groups for one epoch: a seeded shuffle of `0..n` cut into batches,
/// keeping the final partial batch. The order depends only on `(seed, epoch)`.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("epoch batches", "batch size must be at least 1"));
    }
    if n == 0 {
        return Err(Error::Empty("epoch batches"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
