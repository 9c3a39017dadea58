use rand::Rng;
use serde::{Deserialize, Serialize};

use super::palette::Palette;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;

/// Flat foreground primitive that carries the class signal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
    Diamond,
    Ring,
    Hbar,
    Vbar,
}

impl Shape {
    pub const ALL: [Shape; 8] = [
        Shape::Disk,
        Shape::Square,
        Shape::Triangle,
        Shape::Cross,
        Shape::Diamond,
        Shape::Ring,
        Shape::Hbar,
        Shape::Vbar,
    ];

    /// Area of the shape with half-extent `r`, divided by `r^2`.
    fn area_factor(self) -> f64 {
        use std::f64::consts::PI;
        match self {
            Shape::Disk => PI,
            Shape::Square => 4.0,
            Shape::Triangle | Shape::Diamond => 2.0,
            Shape::Cross => 2.56,
            Shape::Ring => 0.75 * PI,
            Shape::Hbar | Shape::Vbar => 1.6,
        }
    }

    /// Membership of offset `(dx, dy)` from the centre for half-extent `r`; `dy` grows downward.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Square => ax <= r && ay <= r,
            Shape::Triangle => dy >= -r && dy <= r && ax <= (dy + r) / 2.0,
            Shape::Cross => (ax <= 0.4 * r && ay <= r) || (ay <= 0.4 * r && ax <= r),
            Shape::Diamond => ax + ay <= r,
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.25 * r * r
            }
            Shape::Hbar => ax <= r && ay <= 0.4 * r,
            Shape::Vbar => ay <= r && ax <= 0.4 * r,
        }
    }
}

/// Everything needed to generate a synthetic subgroup dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub palette: Palette,
    /// One shape per class.
    pub shapes: Vec<Shape>,
    /// Palette index of each class's spuriously correlated color.
    pub class_colors: Vec<usize>,
    /// Flat foreground color per class.
    pub foreground: Vec<[f32; 3]>,
    pub n_train: usize,
    pub n_test: usize,
    pub rho: f64,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Per-pixel background noise amplitude.
    pub pixel_jitter: f32,
    /// Target foreground coverage range.
    pub coverage: [f64; 2],
}

pub const DEFAULT_FOREGROUND: [f32; 3] = [0.85, 0.25, 0.85];

impl DatasetSpec {
    /// Spec with defaults for everything except the class/color counts.
    pub fn new(num_classes: usize, num_colors: usize, n_train: usize, n_test: usize, rho: f64, seed: u64) -> Result<Self> {
        let palette = Palette::default_n(num_colors)?;
        if num_classes == 0 || num_classes > Shape::ALL.len() {
            return Err(Error::invalid(format!("num_classes must be in 1..=8, got {num_classes}")));
        }
        let spec = Self {
            num_classes,
            shapes: Shape::ALL[..num_classes].to_vec(),
            class_colors: (0..num_classes).map(|c| c % num_colors).collect(),
            foreground: vec![DEFAULT_FOREGROUND; num_classes],
            palette,
            n_train,
            n_test,
            rho,
            seed,
            height: 32,
            width: 32,
            pixel_jitter: 0.04,
            coverage: [0.25, 0.45],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_size(mut self, height: usize, width: usize) -> Result<Self> {
        self.height = height;
        self.width = width;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.palette.validate()?;
        let c = self.num_classes;
        if c == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        if self.shapes.len() != c || self.class_colors.len() != c || self.foreground.len() != c {
            return Err(Error::invalid("shapes, class_colors and foreground need one entry per class"));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if self.shapes[..i].contains(s) {
                return Err(Error::invalid(format!("shape {s:?} used by two classes")));
            }
        }
        if self.class_colors.iter().any(|&k| k >= self.palette.num_colors()) {
            return Err(Error::invalid("class color outside the renderable palette"));
        }
        for fg in &self.foreground {
            if fg.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid("foreground color outside [0, 1]"));
            }
            if let Some(g) = self.palette.colors.iter().find(|g| g.contains(*fg)) {
                return Err(Error::invalid(format!("foreground color lies inside background group {}", g.name)));
            }
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid(format!("rho must be in [0, 1], got {}", self.rho)));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::invalid("n_train and n_test must be positive"));
        }
        let cells = c * self.palette.num_colors();
        if !self.n_test.is_multiple_of(cells) {
            return Err(Error::invalid(format!(
                "n_test = {} is not a multiple of classes x colors = {cells}",
                self.n_test
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid("images must be at least 8x8"));
        }
        if !(0.0..=0.5).contains(&self.pixel_jitter) {
            return Err(Error::invalid("pixel_jitter must be in [0, 0.5]"));
        }
        let [lo, hi] = self.coverage;
        if !(0.2..=0.6).contains(&lo) || !(0.2..=0.6).contains(&hi) || lo > hi {
            return Err(Error::invalid("coverage range must lie inside [0.2, 0.6]"));
        }
        Ok(())
    }

    fn check_labels(&self, class_label: usize, bg_group: usize) -> Result<()> {
        if class_label >= self.num_classes {
            return Err(Error::invalid(format!(
                "class {class_label} out of range for {} classes",
                self.num_classes
            )));
        }
        if bg_group >= self.palette.num_colors() {
            return Err(Error::invalid(format!(
                "background group {bg_group} is not a renderable color (palette has {})",
                self.palette.num_colors()
            )));
        }
        Ok(())
    }

    fn placement(&self, class_label: usize, rng: &mut impl Rng) -> Placement {
        let shape = self.shapes[class_label];
        let k = shape.area_factor();
        let side = self.height.min(self.width) as f64;
        // keep the half-extent below 0.48 of the short side so the shape always fits
        let max_cov = (k * 0.48 * 0.48 * 0.95).min(self.coverage[1]);
        let lo = self.coverage[0].min(max_cov);
        let f = rng.random_range(lo..=max_cov);
        let r = side * (f / k).sqrt();
        let cx = rng.random_range(r..=self.width as f64 - r);
        let cy = rng.random_range(r..=self.height as f64 - r);
        Placement { shape, r, cx, cy }
    }

    /// Pixels belonging to the foreground of `render_example(class_label, _, jitter_seed)`.
    pub fn foreground_mask(&self, class_label: usize, jitter_seed: u64) -> Result<Vec<bool>> {
        self.check_labels(class_label, 0)?;
        let mut rng = seed::stream(jitter_seed, "render", 0);
        let p = self.placement(class_label, &mut rng);
        Ok(p.mask(self.height, self.width))
    }

    /// Deterministic render: class shape over a jittered background of group `bg_group`.
    pub fn render_example(&self, class_label: usize, bg_group: usize, jitter_seed: u64) -> Result<Image> {
        self.check_labels(class_label, bg_group)?;
        let mut rng = seed::stream(jitter_seed, "render", 0);
        let p = self.placement(class_label, &mut rng);
        let mask = p.mask(self.height, self.width);
        let group = &self.palette.colors[bg_group];
        let base: [f32; 3] = std::array::from_fn(|c| {
            if group.hi[c] > group.lo[c] {
                rng.random_range(group.lo[c]..=group.hi[c])
            } else {
                group.lo[c]
            }
        });
        let fg = self.foreground[class_label];
        let j = self.pixel_jitter;
        let mut img = Image::filled(self.height, self.width, 0.0);
        for (idx, &inside) in mask.iter().enumerate() {
            let (row, col) = (idx / self.width, idx % self.width);
            for ch in 0..3 {
                // draw even under the foreground so the stream layout is mask-independent
                let noise = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
                let v = if inside { fg[ch] } else { (base[ch] + noise).clamp(0.0, 1.0) };
                img.set(row, col, ch, v);
            }
        }
        Ok(img.quantized())
    }
}

struct Placement {
    shape: Shape,
    r: f64,
    cx: f64,
    cy: f64,
}

impl Placement {
    fn mask(&self, height: usize, width: usize) -> Vec<bool> {
        let mut m = Vec::with_capacity(height * width);
        for row in 0..height {
            for col in 0..width {
                let dx = col as f64 + 0.5 - self.cx;
                let dy = row as f64 + 0.5 - self.cy;
                m.push(self.shape.contains(dx, dy, self.r));
            }
        }
        m
    }
}
