//! Pixel-space augmentation baselines. Targets are class distributions.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

fn beta<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let b = Beta::new(alpha, alpha).map_err(|e| Error::invalid(format!("bad Beta concentration {alpha}: {e}")))?;
    Ok(b.sample(rng))
}

fn check_pair(x1: &Image, y1: &[f64], x2: &Image, y2: &[f64]) -> Result<()> {
    if !x1.same_shape(x2) || y1.len() != y2.len() {
        return Err(Error::invalid("paired examples differ in shape"));
    }
    Ok(())
}

fn blend(y1: &[f64], y2: &[f64], lambda: f64) -> Vec<f64> {
    y1.iter().zip(y2).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect()
}

/// One-hot target.
pub fn one_hot(class: usize, num_classes: usize) -> Vec<f64> {
    let mut t = vec![0.0; num_classes];
    t[class] = 1.0;
    t
}

/// Convex combination of both images and both targets with weight `lambda` on the first.
pub fn mixup_with_lambda(x1: &Image, y1: &[f64], x2: &Image, y2: &[f64], lambda: f64) -> Result<(Image, Vec<f64>)> {
    check_pair(x1, y1, x2, y2)?;
    let l = lambda as f32;
    let px = x1
        .pixels()
        .iter()
        .zip(x2.pixels())
        .map(|(a, b)| (l * a + (1.0 - l) * b).clamp(0.0, 1.0))
        .collect();
    Ok((Image::new(x1.height(), x1.width(), px)?, blend(y1, y2, lambda)))
}

/// Mixup with `lambda ~ Beta(alpha, alpha)`.
pub fn mixup_batch<R: Rng + ?Sized>(
    x1: &Image,
    y1: &[f64],
    x2: &Image,
    y2: &[f64],
    alpha: f64,
    rng: &mut R,
) -> Result<(Image, Vec<f64>)> {
    let lambda = beta(alpha, rng)?;
    mixup_with_lambda(x1, y1, x2, y2, lambda)
}

/// Axis-aligned pixel rectangle (half-open).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    /// `size x size` square centred at `(cy, cx)`, clipped to an `h x w` image.
    pub fn centred(cy: usize, cx: usize, size_h: usize, size_w: usize, h: usize, w: usize) -> Self {
        let top = cy as isize - (size_h / 2) as isize;
        let left = cx as isize - (size_w / 2) as isize;
        let clip = |start: isize, len: usize, lim: usize| {
            let a = start.max(0) as usize;
            let b = ((start + len as isize).max(0) as usize).min(lim);
            (a.min(lim), b.saturating_sub(a.min(lim)))
        };
        let (top, height) = clip(top, size_h, h);
        let (left, width) = clip(left, size_w, w);
        Self { top, left, height, width }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.top && r < self.top + self.height && c >= self.left && c < self.left + self.width
    }
}

/// Sets every pixel of `rect` to `fill`.
pub fn cutout_at(x: &Image, rect: Rect, fill: f32) -> Image {
    let mut out = x.clone();
    for r in 0..x.height() {
        for c in 0..x.width() {
            if rect.contains(r, c) {
                for ch in 0..CHANNELS {
                    out.set(r, c, ch, fill);
                }
            }
        }
    }
    out
}

/// Cutout of a `size x size` square with a uniformly drawn centre, clipped at the borders.
pub fn cutout<R: Rng + ?Sized>(x: &Image, size: usize, fill: f32, rng: &mut R) -> Result<Image> {
    if !(0.0..=1.0).contains(&fill) {
        return Err(Error::invalid("cutout fill must lie in [0, 1]"));
    }
    if size == 0 {
        return Ok(x.clone());
    }
    let cy = rng.random_range(0..x.height());
    let cx = rng.random_range(0..x.width());
    Ok(cutout_at(x, Rect::centred(cy, cx, size, size, x.height(), x.width()), fill))
}

/// Pastes `rect` of `x2` into `x1`; the first target keeps weight `1 - area/HW`.
pub fn cutmix_with_rect(x1: &Image, y1: &[f64], x2: &Image, y2: &[f64], rect: Rect) -> Result<(Image, Vec<f64>)> {
    check_pair(x1, y1, x2, y2)?;
    let mut out = x1.clone();
    for r in 0..x1.height() {
        for c in 0..x1.width() {
            if rect.contains(r, c) {
                for ch in 0..CHANNELS {
                    out.set(r, c, ch, x2.get(r, c, ch));
                }
            }
        }
    }
    let lambda = 1.0 - rect.area() as f64 / (x1.height() * x1.width()) as f64;
    Ok((out, blend(y1, y2, lambda)))
}

/// Cutmix: box with area fraction `1 - lambda0`, `lambda0 ~ Beta(alpha, alpha)`,
/// uniformly placed centre; the label weight uses the clipped area.
pub fn cutmix_batch<R: Rng + ?Sized>(
    x1: &Image,
    y1: &[f64],
    x2: &Image,
    y2: &[f64],
    alpha: f64,
    rng: &mut R,
) -> Result<(Image, Vec<f64>)> {
    check_pair(x1, y1, x2, y2)?;
    let lambda0 = beta(alpha, rng)?;
    let (h, w) = (x1.height(), x1.width());
    let ratio = (1.0 - lambda0).sqrt();
    let bh = (h as f64 * ratio).round() as usize;
    let bw = (w as f64 * ratio).round() as usize;
    let cy = rng.random_range(0..h);
    let cx = rng.random_range(0..w);
    cutmix_with_rect(x1, y1, x2, y2, Rect::centred(cy, cx, bh, bw, h, w))
}
