use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::AnnotationTable;

/// One row of a predictions file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub index: usize,
    pub true_class: usize,
    pub pred_class: usize,
}

pub fn read_predictions<R: Read>(reader: R) -> Result<Vec<Prediction>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize()
        .enumerate()
        .map(|(n, r)| {
            r.map_err(|e| Error::Parse {
                row: n + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    read_predictions(File::open(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub count: usize,
    pub correct: usize,
}

impl Cell {
    pub fn accuracy(&self) -> Option<f64> {
        (self.count > 0).then(|| self.correct as f64 / self.count as f64)
    }
}

/// Example counts and hits per (class, background group).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupAccuracyTable {
    classes: Vec<String>,
    groups: Vec<String>,
    /// `cells[class][group]`.
    cells: Vec<Vec<Cell>>,
}

impl SubgroupAccuracyTable {
    pub fn new(classes: Vec<String>, groups: Vec<String>) -> Self {
        let cells = vec![vec![Cell::default(); groups.len()]; classes.len()];
        Self { classes, groups, cells }
    }

    pub fn record(&mut self, class: usize, group: usize, correct: bool) {
        let cell = &mut self.cells[class][group];
        cell.count += 1;
        cell.correct += correct as usize;
    }

    /// Overwrites a cell with `count` examples of which `correct` were hits.
    pub fn set(&mut self, class: usize, group: usize, count: usize, correct: usize) -> Result<()> {
        if correct > count {
            return Err(Error::invalid("more hits than examples"));
        }
        self.cells[class][group] = Cell { count, correct };
        Ok(())
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn cell(&self, class: usize, group: usize) -> Cell {
        self.cells[class][group]
    }

    pub fn accuracy(&self, class: usize, group: usize) -> Option<f64> {
        self.cells[class][group].accuracy()
    }

    /// `(group, accuracy, count)` for every populated cell of `class`.
    pub fn populated(&self, class: usize) -> Vec<(usize, f64, usize)> {
        self.cells[class]
            .iter()
            .enumerate()
            .filter_map(|(g, c)| c.accuracy().map(|a| (g, a, c.count)))
            .collect()
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.cells[class].iter().map(|c| c.count).sum()
    }

    pub fn class_accuracy(&self, class: usize) -> Option<f64> {
        let n = self.class_count(class);
        (n > 0).then(|| self.cells[class].iter().map(|c| c.correct).sum::<usize>() as f64 / n as f64)
    }

    pub fn total_count(&self) -> usize {
        (0..self.classes.len()).map(|c| self.class_count(c)).sum()
    }

    pub fn total_accuracy(&self) -> Option<f64> {
        let n = self.total_count();
        let hits: usize = self.cells.iter().flatten().map(|c| c.correct).sum();
        (n > 0).then(|| hits as f64 / n as f64)
    }

    /// Copy with the cells of `group` emptied.
    pub fn without_group(&self, group: usize) -> Self {
        let mut t = self.clone();
        for row in &mut t.cells {
            if let Some(c) = row.get_mut(group) {
                *c = Cell::default();
            }
        }
        t
    }

    /// Pools classes into superclasses; superclasses appear in order of first use.
    pub fn regroup(&self, grouping: &BTreeMap<String, String>) -> Result<Self> {
        let mut supers: Vec<String> = Vec::new();
        let mut target = Vec::with_capacity(self.classes.len());
        for c in &self.classes {
            let s = grouping
                .get(c)
                .ok_or_else(|| Error::invalid(format!("class {c:?} has no superclass")))?;
            let i = supers.iter().position(|x| x == s).unwrap_or_else(|| {
                supers.push(s.clone());
                supers.len() - 1
            });
            target.push(i);
        }
        let mut out = Self::new(supers, self.groups.clone());
        for (c, &s) in target.iter().enumerate() {
            for (g, cell) in self.cells[c].iter().enumerate() {
                let o = &mut out.cells[s][g];
                o.count += cell.count;
                o.correct += cell.correct;
            }
        }
        Ok(out)
    }
}

/// Class labels sorted numerically when all are integers, otherwise lexicographically.
fn class_universe<'a>(labels: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut v: Vec<String> = labels.map(str::to_string).collect();
    v.sort();
    v.dedup();
    if v.iter().all(|s| s.parse::<u64>().is_ok()) {
        v.sort_by_key(|s| s.parse::<u64>().expect("checked"));
    }
    v
}

/// Joins predictions with annotations. Classes come from the annotation labels;
/// an integer label must agree with the prediction's `true_class`.
pub fn subgroup_accuracies(predictions: &[Prediction], annotations: &AnnotationTable) -> Result<SubgroupAccuracyTable> {
    let missing: Vec<usize> = predictions
        .iter()
        .filter(|p| annotations.get(p.index).is_none())
        .map(|p| p.index)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Join(missing));
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(p) = predictions.iter().find(|p| !seen.insert(p.index)) {
        return Err(Error::invalid(format!("duplicate prediction index {}", p.index)));
    }
    let anns: Vec<_> = predictions.iter().map(|p| annotations.get(p.index).expect("joined")).collect();
    let classes = class_universe(anns.iter().map(|a| a.class_label.as_str()));
    let mut table = SubgroupAccuracyTable::new(classes, annotations.palette().to_vec());
    for (p, a) in predictions.iter().zip(&anns) {
        if let Ok(c) = a.class_label.parse::<usize>() {
            if c != p.true_class {
                return Err(Error::invalid(format!(
                    "example {}: annotated class {c} but predictions say {}",
                    p.index, p.true_class
                )));
            }
        }
        let ci = table.classes.iter().position(|c| *c == a.class_label).expect("in universe");
        table.record(ci, a.bg_group, p.pred_class == p.true_class);
    }
    Ok(table)
}
