//! Pixel containers and the segmentation metrics the whole harness is built on.
//!
//! All pixel values are `f32` in `[0, 1]`. Images are RGB, interleaved and
//! row-major; masks and probability maps are single-plane and row-major.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Rec. 601 luma weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * CHANNELS {
            return Err(Error::invalid(format!(
                "image data length {} does not match {}x{}x{}",
                data.len(),
                width,
                height,
                CHANNELS
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image from raw values, clipping each into `[0, 1]`.
    /// NaN is mapped to 0.
    pub fn from_clipped(width: usize, height: usize, mut data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * CHANNELS);
        for v in &mut data {
            *v = clip01(*v);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let rgb = rgb.map(clip01);
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            data,
        }
    }

    /// Ingests 8-bit interleaved RGB, dividing by 255.
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * CHANNELS {
            return Err(Error::invalid(format!(
                "rgb8 buffer length {} does not match {}x{}",
                bytes.len(),
                width,
                height
            )));
        }
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Per-pixel luminance plane.
    pub fn luminance(&self) -> Vec<f32> {
        self.data
            .chunks_exact(CHANNELS)
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "mask data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
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

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ProbMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "probability map length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("probability {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, p: f32) -> Self {
        Self {
            width,
            height,
            data: vec![clip01(p); width * height],
        }
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Strictly increasing probability thresholds in `(0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct ThresholdSet(Vec<f32>);

impl ThresholdSet {
    pub fn new(taus: Vec<f32>) -> Result<Self> {
        if taus.is_empty() {
            return Err(Error::invalid("threshold set is empty"));
        }
        if taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::invalid(format!(
                "thresholds {taus:?} must lie in (0, 1)"
            )));
        }
        if taus.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "thresholds {taus:?} must be strictly increasing"
            )));
        }
        Ok(Self(taus))
    }

    pub fn taus(&self) -> &[f32] {
        &self.0
    }
}

impl Default for ThresholdSet {
    fn default() -> Self {
        Self(vec![0.5, 0.9, 0.99])
    }
}

impl TryFrom<Vec<f32>> for ThresholdSet {
    type Error = Error;

    fn try_from(v: Vec<f32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ThresholdSet> for Vec<f32> {
    fn from(t: ThresholdSet) -> Self {
        t.0
    }
}

/// Multi-threshold IoU: the mean over `taus` of
/// `|{pred > τ} ∧ mask| / |{pred > τ} ∨ mask|`.
///
/// A threshold whose union is empty scores 1.
pub fn iou(pred: &ProbMap, mask: &Mask, taus: &ThresholdSet) -> Result<f64> {
    if pred.dims() != mask.dims() {
        return Err(Error::DimensionMismatch {
            expected: mask.dims(),
            actual: pred.dims(),
        });
    }
    let mut total = 0.0;
    for &tau in taus.taus() {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&p, &m) in pred.data.iter().zip(&mask.data) {
            let hit = p > tau;
            inter += (hit && m) as usize;
            union += (hit || m) as usize;
        }
        total += if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
    }
    Ok(total / taus.taus().len() as f64)
}

/// Mean IoU deterioration, `N⁻¹ Σ (baseline_i − perturbed_i)`.
pub fn deterioration(baseline: &[f64], perturbed: &[f64]) -> Result<f64> {
    if baseline.is_empty() {
        return Err(Error::invalid("deterioration over an empty image set"));
    }
    if baseline.len() != perturbed.len() {
        return Err(Error::invalid(format!(
            "deterioration needs equal lengths, got {} and {}",
            baseline.len(),
            perturbed.len()
        )));
    }
    let sum: f64 = baseline.iter().zip(perturbed).map(|(b, p)| b - p).sum();
    Ok(sum / baseline.len() as f64)
}

#[inline]
pub(crate) fn clip01(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}
