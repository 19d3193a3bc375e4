//! Ground-truth carriers: images, binary masks, boxes and samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `h × w × 3` image stored as bytes; [`Image::get`] reads it in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width * 3],
        }
    }

    pub fn from_bytes(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{} bytes for a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Quantizes `[0, 1]` values to bytes.
    pub fn from_unit_floats(height: usize, width: usize, values: &[f32]) -> Result<Self> {
        let data = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::from_bytes(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        f64::from(self.data[(r * self.width + c) * 3 + ch]) / 255.0
    }

    #[inline]
    pub fn put(&mut self, r: usize, c: usize, rgb: [u8; 3]) {
        let i = (r * self.width + c) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// A binary `h × w` mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(height, width);
        for r in 0..height {
            for c in 0..width {
                m.data[r * width + c] = f(r, c);
            }
        }
        m
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width} mask",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.width + c] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Run-length encoding in row-major order: alternating run lengths,
    /// starting with a (possibly zero-length) run of background.
    pub fn to_rle(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in &self.data {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(height: usize, width: usize, runs: &[u32]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for (i, &len) in runs.iter().enumerate() {
            data.extend(std::iter::repeat_n(i % 2 == 1, len as usize));
        }
        if data.len() != height * width {
            return Err(Error::format(
                "run-length mask",
                format!("{} pixels decoded for {height}x{width}", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Nearest-neighbour resampling to `height × width`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |r, c| {
            self.get(r * self.height / height, c * self.width / width)
        })
    }
}

/// Inclusive pixel box `(x_min, y_min, x_max, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    /// Area in pixels, counting both edges.
    pub fn area(&self) -> usize {
        (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)
    }

    pub fn to_array(self) -> [usize; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn rasterize(&self, height: usize, width: usize) -> Mask {
        Mask::from_fn(height, width, |r, c| {
            (self.y_min..=self.y_max).contains(&r) && (self.x_min..=self.x_max).contains(&c)
        })
    }
}

/// One referring example.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: usize,
    pub image: Image,
    pub token_ids: Vec<usize>,
    pub expression: String,
    pub gt_mask: Mask,
    pub gt_box: Option<BoundingBox>,
    pub no_target: bool,
}

impl SceneSample {
    /// Checks the sample-level invariants: no-target samples carry an empty
    /// mask and no box; otherwise the box is the tight box of the mask.
    pub fn check(&self) -> Result<()> {
        if self.gt_mask.shape() != (self.image.height(), self.image.width()) {
            return Err(Error::ShapeMismatch("mask and image sizes differ".into()));
        }
        if self.no_target {
            if !self.gt_mask.is_empty() || self.gt_box.is_some() {
                return Err(Error::format("sample", "no-target sample with a target"));
            }
        } else if self.gt_box != crate::predictor::box_from_mask(&self.gt_mask) {
            return Err(Error::format("sample", "box is not the tight box of the mask"));
        }
        Ok(())
    }
}
