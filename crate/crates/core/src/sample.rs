//! One RGBD sample with its label planes.

use image::RgbImage;

use crate::error::{Error, Result};
use crate::mask::Mask;

/// Metric depth stored as whole millimetres; 0 means the sensor returned nothing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    mm: Vec<u16>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            mm: vec![0; width * height],
        }
    }

    pub fn from_mm(width: usize, height: usize, mm: Vec<u16>) -> Result<Self> {
        if mm.len() != width * height {
            return Err(Error::shape(
                "depth map",
                format!("{} values for a {width}x{height} map", mm.len()),
            ));
        }
        Ok(DepthMap { width, height, mm })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn mm(&self) -> &[u16] {
        &self.mm
    }

    pub fn get_mm(&self, x: usize, y: usize) -> u16 {
        self.mm[y * self.width + x]
    }

    pub fn set_mm(&mut self, x: usize, y: usize, value: u16) {
        self.mm[y * self.width + x] = value;
    }

    /// Depth in metres, 0.0 for a miss.
    pub fn meters(&self, x: usize, y: usize) -> f64 {
        f64::from(self.get_mm(x, y)) / 1000.0
    }

    pub fn set_meters(&mut self, x: usize, y: usize, meters: f64) {
        self.set_mm(x, y, meters_to_mm(meters));
    }

    /// Pixels carrying any reading.
    pub fn detected(&self) -> Mask {
        Mask::from_vec(self.width, self.height, self.mm.iter().map(|&d| d > 0).collect()).expect("sizes agree")
    }
}

pub fn meters_to_mm(meters: f64) -> u16 {
    (meters * 1000.0).round().clamp(0.0, f64::from(u16::MAX)) as u16
}

/// Label planes of a sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    /// Every branch pixel, visible or hidden.
    pub branch: Mask,
    /// Branch pixels hidden behind an occluder.
    pub occluded_branch: Mask,
    /// All occluder (leaf) pixels.
    pub occluder: Mask,
    /// Pixels with a depth reading.
    pub depth_detected: Mask,
}

impl MaskSet {
    /// Builds the set, deriving the occluded plane from branch and occluder.
    pub fn new(branch: Mask, occluder: Mask, depth_detected: Mask) -> Result<Self> {
        let occluded_branch = branch.and(&occluder)?;
        branch.check_same_size(&depth_detected, "mask set")?;
        Ok(MaskSet {
            branch,
            occluded_branch,
            occluder,
            depth_detected,
        })
    }

    /// Occluded branch is exactly branch ∧ occluder and all planes agree in size.
    pub fn is_consistent(&self) -> bool {
        self.branch.dims() == self.depth_detected.dims()
            && self.branch.and(&self.occluder).ok().as_ref() == Some(&self.occluded_branch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub rgb: RgbImage,
    pub depth: DepthMap,
    pub masks: MaskSet,
}

impl Sample {
    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.depth.dims();
        let rgb_dims = (self.rgb.width() as usize, self.rgb.height() as usize);
        if rgb_dims != dims || self.masks.branch.dims() != dims || !self.masks.is_consistent() {
            return Err(Error::Format {
                what: "sample",
                detail: format!(
                    "{}: planes disagree in size or occluded != branch and occluder",
                    self.id
                ),
            });
        }
        Ok(())
    }
}
