use flowlab_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// `H x W x 3` image with unit-interval intensities, stored row-major (HWC).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * CHANNELS {
            return Err(Error::invalid(format!(
                "{} values for a {height}x{width}x3 image",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Self {
            height,
            width,
            pixels: vec![v; height * width * CHANNELS],
        }
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
    }

    /// 8-bit quantisation, rounding to nearest.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Snap to the 8-bit grid.
    pub fn quantized(&self) -> Self {
        Self::from_bytes(self.height, self.width, &self.to_bytes()).expect("same shape")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, CHANNELS]
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.pixels[(row * self.width + col) * CHANNELS + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        self.pixels[(row * self.width + col) * CHANNELS + ch] = v;
    }

    pub fn rgb(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn is_valid(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.pixels {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
    }
}

/// Stacks images into an NCHW tensor.
pub fn to_nchw<F: Scalar>(images: &[&Image]) -> Tensor<F> {
    assert!(!images.is_empty(), "empty image batch");
    let (h, w) = (images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * h * w * CHANNELS);
    for img in images {
        assert!(img.height == h && img.width == w, "mixed image sizes in batch");
        for c in 0..CHANNELS {
            for p in 0..h * w {
                data.push(F::lit(f64::from(img.pixels[p * CHANNELS + c])));
            }
        }
    }
    Tensor::new(&[images.len(), CHANNELS, h, w], data)
}

/// Splits an NCHW tensor back into images (no clamping).
pub fn from_nchw<F: Scalar>(t: &Tensor<F>) -> Vec<Image> {
    let (n, c, h, w) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
    assert_eq!(c, CHANNELS);
    (0..n)
        .map(|i| {
            let base = i * c * h * w;
            let mut pixels = vec![0.0f32; h * w * CHANNELS];
            for ch in 0..CHANNELS {
                for p in 0..h * w {
                    pixels[p * CHANNELS + ch] = t.data()[base + ch * h * w + p].as_f64() as f32;
                }
            }
            Image {
                height: h,
                width: w,
                pixels,
            }
        })
        .collect()
}
