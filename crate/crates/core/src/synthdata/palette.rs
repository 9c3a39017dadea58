use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OTHERS: &str = "others";

/// A named background color group with an axis-aligned RGB box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorGroup {
    pub name: String,
    pub lo: [f32; 3],
    pub hi: [f32; 3],
}

impl ColorGroup {
    pub fn new(name: &str, lo: [f32; 3], hi: [f32; 3]) -> Self {
        Self {
            name: name.to_string(),
            lo,
            hi,
        }
    }

    pub fn contains(&self, rgb: [f32; 3]) -> bool {
        (0..3).all(|c| rgb[c] >= self.lo[c] && rgb[c] <= self.hi[c])
    }
}

/// Background color groups. Index `colors.len()` is the implicit "others" group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub colors: Vec<ColorGroup>,
}

/// A palette entry as seen by labels and metrics.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BackgroundGroup {
    pub name: String,
    pub index: usize,
}

impl Palette {
    pub fn new(colors: Vec<ColorGroup>) -> Result<Self> {
        let p = Self { colors };
        p.validate()?;
        Ok(p)
    }

    /// Eight groups: blue, green, red, yellow, white, black, gray, brown.
    pub fn default_eight() -> Self {
        Self {
            colors: vec![
                ColorGroup::new("blue", [0.05, 0.15, 0.55], [0.25, 0.35, 0.85]),
                ColorGroup::new("green", [0.10, 0.45, 0.10], [0.30, 0.70, 0.30]),
                ColorGroup::new("red", [0.60, 0.05, 0.05], [0.90, 0.25, 0.20]),
                ColorGroup::new("yellow", [0.80, 0.75, 0.05], [0.98, 0.95, 0.30]),
                ColorGroup::new("white", [0.85, 0.85, 0.85], [1.00, 1.00, 1.00]),
                ColorGroup::new("black", [0.00, 0.00, 0.00], [0.12, 0.12, 0.12]),
                ColorGroup::new("gray", [0.40, 0.40, 0.40], [0.60, 0.60, 0.60]),
                ColorGroup::new("brown", [0.40, 0.22, 0.08], [0.60, 0.38, 0.20]),
            ],
        }
    }

    /// First `n` groups of [`Palette::default_eight`].
    pub fn default_n(n: usize) -> Result<Self> {
        let mut p = Self::default_eight();
        if !(2..=p.colors.len()).contains(&n) {
            return Err(Error::invalid(format!("default palette has 2..=8 colors, asked for {n}")));
        }
        p.colors.truncate(n);
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.colors.len() < 2 {
            return Err(Error::invalid("palette needs at least two color groups"));
        }
        for (i, c) in self.colors.iter().enumerate() {
            if c.name.is_empty() || c.name != c.name.to_lowercase() || c.name == OTHERS {
                return Err(Error::invalid(format!("bad palette name {:?}", c.name)));
            }
            if self.colors[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::invalid(format!("duplicate palette name {:?}", c.name)));
            }
            if (0..3).any(|k| !(0.0..=1.0).contains(&c.lo[k]) || !(0.0..=1.0).contains(&c.hi[k]) || c.lo[k] > c.hi[k]) {
                return Err(Error::invalid(format!("bad RGB box for {:?}", c.name)));
            }
        }
        Ok(())
    }

    /// Number of renderable color groups (excludes "others").
    pub fn num_colors(&self) -> usize {
        self.colors.len()
    }

    /// Total groups including "others".
    pub fn num_groups(&self) -> usize {
        self.colors.len() + 1
    }

    pub fn others_index(&self) -> usize {
        self.colors.len()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        if index < self.colors.len() {
            Some(&self.colors[index].name)
        } else if index == self.colors.len() {
            Some(OTHERS)
        } else {
            None
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        if name == OTHERS {
            return Some(self.others_index());
        }
        self.colors.iter().position(|c| c.name == name)
    }

    /// All group names, "others" last.
    pub fn names(&self) -> Vec<String> {
        (0..self.num_groups()).map(|i| self.name(i).unwrap().to_string()).collect()
    }

    pub fn groups(&self) -> Vec<BackgroundGroup> {
        self.names()
            .into_iter()
            .enumerate()
            .map(|(index, name)| BackgroundGroup { name, index })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn others_is_last_and_dense() {
        let p = Palette::default_n(6).unwrap();
        assert_eq!(p.num_groups(), 7);
        assert_eq!(p.index_of("others"), Some(6));
        assert_eq!(p.name(0), Some("blue"));
        assert_eq!(p.name(7), None);
        let g = p.groups();
        assert!(g.iter().enumerate().all(|(i, b)| b.index == i));
    }

    #[test]
    fn validation_rejects_bad_palettes() {
        assert!(Palette::new(vec![ColorGroup::new("blue", [0.0; 3], [1.0; 3])]).is_err());
        let dup = vec![
            ColorGroup::new("blue", [0.0; 3], [1.0; 3]),
            ColorGroup::new("blue", [0.0; 3], [1.0; 3]),
        ];
        assert!(Palette::new(dup).is_err());
        let inverted = vec![
            ColorGroup::new("a", [0.5; 3], [0.4; 3]),
            ColorGroup::new("b", [0.0; 3], [1.0; 3]),
        ];
        assert!(Palette::new(inverted).is_err());
        assert!(Palette::default_n(1).is_err());
    }
}
