//! Procedurally rendered images with a controllable class/background-color
//! correlation, plus readers and writers for dataset directories and
//! background-group annotation files.

mod annotations;
mod io;
mod palette;
mod render;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use annotations::{load_annotations, save_annotations, Annotation, AnnotationOptions, AnnotationTable};
pub use io::{load_dataset, save_dataset, DatasetMeta};
pub use palette::{BackgroundGroup, ColorGroup, Palette, OTHERS};
pub use render::{DatasetSpec, Shape, DEFAULT_FOREGROUND};

use crate::error::Result;
use crate::image::Image;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub image: Image,
    pub class_label: usize,
    pub bg_group: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Train and test examples with their label universe.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    pub fn palette_names(&self) -> &[String] {
        &self.meta.palette
    }

    /// Annotation table of the test split.
    pub fn test_annotations(&self) -> AnnotationTable {
        let mut t = AnnotationTable::new(self.meta.palette.clone());
        for (i, ex) in self.test.iter().enumerate() {
            t.insert(i, ex.class_label.to_string(), ex.bg_group)
                .expect("generated test indices are unique");
        }
        t
    }
}

/// Background group for training example `index` of class `class_label`.
fn train_background(spec: &DatasetSpec, class_label: usize, rng: &mut impl Rng) -> usize {
    if rng.random::<f64>() < spec.rho {
        spec.class_colors[class_label]
    } else {
        rng.random_range(0..spec.palette.num_colors())
    }
}

/// Labels of one example; a pure function of `(spec, split, index)`.
pub fn example_labels(spec: &DatasetSpec, split: Split, index: usize) -> (usize, usize, u64) {
    let c = spec.num_classes;
    let k = spec.palette.num_colors();
    let mut rng = seed::stream(spec.seed, split.tag(), index as u64);
    let class_label = index % c;
    let bg = match split {
        Split::Train => train_background(spec, class_label, &mut rng),
        Split::Test => (index / c) % k,
    };
    let jitter_seed = rng.random::<u64>();
    (class_label, bg, jitter_seed)
}

pub fn generate_example(spec: &DatasetSpec, split: Split, index: usize) -> Result<LabeledExample> {
    let (class_label, bg_group, jitter) = example_labels(spec, split, index);
    Ok(LabeledExample {
        image: spec.render_example(class_label, bg_group, jitter)?,
        class_label,
        bg_group,
    })
}

/// Train split biased toward each class's color with strength `rho`; test split
/// balanced over every (class, color) cell.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let train = (0..spec.n_train)
        .map(|i| generate_example(spec, Split::Train, i))
        .collect::<Result<Vec<_>>>()?;
    let test = (0..spec.n_test)
        .map(|i| generate_example(spec, Split::Test, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        meta: DatasetMeta::from_spec(spec),
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rho_one_forces_class_color() {
        let spec = DatasetSpec::new(4, 6, 200, 24, 1.0, 9).unwrap();
        for i in 0..spec.n_train {
            let (c, g, _) = example_labels(&spec, Split::Train, i);
            assert_eq!(g, spec.class_colors[c]);
        }
    }

    #[test]
    fn rho_zero_is_uniform_within_binomial_bounds() {
        let spec = DatasetSpec::new(4, 6, 6000, 24, 0.0, 11).unwrap();
        let mut counts = [0usize; 6];
        for i in 0..spec.n_train {
            counts[example_labels(&spec, Split::Train, i).1] += 1;
        }
        let n: f64 = 6000.0;
        let p = 1.0 / 6.0;
        let sd = (n * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n * p).abs() <= 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn test_split_is_exactly_balanced() {
        let spec = DatasetSpec::new(4, 6, 10, 1200, 0.95, 1).unwrap();
        let mut cells = vec![vec![0usize; 6]; 4];
        for i in 0..spec.n_test {
            let (c, g, _) = example_labels(&spec, Split::Test, i);
            cells[c][g] += 1;
        }
        assert!(cells.iter().flatten().all(|&n| n == 50));
    }

    #[test]
    fn class_color_rate_matches_rho() {
        for rho in [0.0, 0.5, 0.95] {
            let spec = DatasetSpec::new(4, 6, 10_000, 24, rho, 5).unwrap();
            let hits = (0..spec.n_train)
                .filter(|&i| {
                    let (c, g, _) = example_labels(&spec, Split::Train, i);
                    g == spec.class_colors[c]
                })
                .count();
            let want = rho + (1.0 - rho) / 6.0;
            let got = hits as f64 / 10_000.0;
            assert!((got - want).abs() <= 0.02, "rho {rho}: {got} vs {want}");
        }
    }

    #[test]
    fn generation_is_order_independent() {
        let spec = DatasetSpec::new(3, 4, 24, 12, 0.7, 2).unwrap().with_size(16, 16).unwrap();
        let ds = generate_dataset(&spec).unwrap();
        let again = generate_dataset(&spec).unwrap();
        assert_eq!(ds, again);
        for i in (0..spec.n_train).rev() {
            assert_eq!(generate_example(&spec, Split::Train, i).unwrap(), ds.train[i]);
        }
    }
}
