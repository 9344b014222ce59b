//! Images, the pixel-wise chaotic operator and contrastive view pairs.
//!
//! Random draws inside [`make_view_pair`] happen in a fixed order:
//!
//! 1. standard view: flip draw, crop row offset, crop column offset;
//! 2. the iteration count `k` for the chaotic view;
//! 3. chaotic view: flip draw, crop row offset, crop column offset.
//!
//! The flip draw is consumed even when `flip_prob` is 0 or 1, so the stream
//! position never depends on configuration values.

mod io;

pub use io::{read_image, write_image};

use rand::Rng;

use crate::dynamics::{iterate, ChaoticMapSpec};
use crate::error::{Error, Result};

/// `H x W x C` intensities in `[0, 1]`, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidParam(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidParam(format!(
                "image data has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParam(format!(
                "image intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    /// Builds an image from `f(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    /// 8-bit samples normalised by `/255`.
    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    /// `round(x * 255)` clamped to `[0, 255]`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Channel-major copy (`C x H x W`), the layout the network consumes.
    pub fn to_chw(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.push(self.get(y, x, c));
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let start = (y * self.width + x) * self.channels;
                data.extend_from_slice(&self.data[start..start + self.channels]);
            }
        }
        Image { data, ..*self }
    }

    /// Square `size x size` window with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, size: usize) -> Result<Image> {
        if top + size > self.height || left + size > self.width || size == 0 {
            return Err(Error::CropTooLarge {
                crop: size,
                height: self.height.saturating_sub(top),
                width: self.width.saturating_sub(left),
            });
        }
        let mut data = Vec::with_capacity(size * size * self.channels);
        for y in top..top + size {
            let start = (y * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[start..start + size * self.channels]);
        }
        Ok(Image {
            height: size,
            width: size,
            channels: self.channels,
            data,
        })
    }
}

impl Image {
    fn with_data(&self, data: Vec<f64>) -> Image {
        Image { data, ..*self }
    }
}

/// Settings for one view pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub crop_size: usize,
    pub flip_prob: f64,
    pub map: ChaoticMapSpec,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            k_min: 1,
            k_max: 5,
            crop_size: 28,
            flip_prob: 0.5,
            map: ChaoticMapSpec::default(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_min > self.k_max {
            return Err(Error::InvalidRange {
                lo: self.k_min,
                hi: self.k_max,
            });
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::InvalidParam(format!(
                "flip probability {} outside [0, 1]",
                self.flip_prob
            )));
        }
        if self.crop_size == 0 {
            return Err(Error::InvalidParam("crop size must be positive".into()));
        }
        Ok(())
    }
}

/// Pixel-wise operator: every intensity is replaced by the `k`-th iterate
/// of the map. Channels are perturbed independently with the same `k`.
pub fn chaotic_augment(img: &Image, spec: &ChaoticMapSpec, k: usize) -> Result<Image> {
    if k == 0 {
        return Ok(img.clone());
    }
    let data = img
        .data
        .iter()
        .map(|&v| iterate(spec, v, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(img.with_data(data))
}

/// Uniform draw from `{k_min, ..., k_max}`.
pub fn sample_k<R: Rng + ?Sized>(rng: &mut R, k_min: usize, k_max: usize) -> Result<usize> {
    if k_min > k_max {
        return Err(Error::InvalidRange {
            lo: k_min,
            hi: k_max,
        });
    }
    Ok(rng.gen_range(k_min..=k_max))
}

/// Horizontal flip with probability `flip_prob`, then a uniformly placed
/// `crop_size x crop_size` crop.
pub fn standard_augment<R: Rng + ?Sized>(
    img: &Image,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<Image> {
    if cfg.crop_size > img.height || cfg.crop_size > img.width {
        return Err(Error::CropTooLarge {
            crop: cfg.crop_size,
            height: img.height,
            width: img.width,
        });
    }
    let flip = rng.gen::<f64>() < cfg.flip_prob;
    let top = rng.gen_range(0..=img.height - cfg.crop_size);
    let left = rng.gen_range(0..=img.width - cfg.crop_size);
    if flip {
        img.flip_horizontal().crop(top, left, cfg.crop_size)
    } else {
        img.crop(top, left, cfg.crop_size)
    }
}

/// Two correlated views of one source image. Only `view_j` passes through
/// the chaotic operator.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_i: Image,
    pub view_j: Image,
    /// Iteration count used for `view_j`.
    pub k: usize,
}

pub fn make_view_pair<R: Rng + ?Sized>(
    x: &Image,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<ViewPair> {
    cfg.validate()?;
    let view_i = standard_augment(x, rng, cfg)?;
    let k = sample_k(rng, cfg.k_min, cfg.k_max)?;
    let chaotic = chaotic_augment(x, &cfg.map, k)?;
    let view_j = standard_augment(&chaotic, rng, cfg)?;
    Ok(ViewPair { view_i, view_j, k })
}
