use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::stats::{macro_std, weighted_std};
use super::table::SubgroupAccuracyTable;
use crate::error::{Error, Result};
use crate::synthdata::OTHERS;

/// Weighted std of the populated subgroup accuracies of `class`.
pub fn class_weighted_std(table: &SubgroupAccuracyTable, class: usize) -> Result<f64> {
    let cells = table.populated(class);
    let s: Vec<f64> = cells.iter().map(|c| c.1).collect();
    let w: Vec<f64> = cells.iter().map(|c| c.2 as f64).collect();
    weighted_std(&s, &w)
}

/// Weighted std over every populated (class, group) cell at once.
pub fn overall_weighted_std(table: &SubgroupAccuracyTable) -> Result<f64> {
    let cells: Vec<_> = (0..table.classes().len()).flat_map(|c| table.populated(c)).collect();
    let s: Vec<f64> = cells.iter().map(|c| c.1).collect();
    let w: Vec<f64> = cells.iter().map(|c| c.2 as f64).collect();
    weighted_std(&s, &w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstSubgroup {
    pub class: String,
    pub group: String,
    pub group_index: usize,
    pub accuracy: f64,
    pub class_accuracy: f64,
    /// Class accuracy minus the worst subgroup accuracy.
    pub gap: f64,
}

/// Lowest-accuracy populated group per class; ties go to the lowest group index.
/// Classes without examples are skipped.
pub fn worst_subgroup(table: &SubgroupAccuracyTable) -> Vec<WorstSubgroup> {
    (0..table.classes().len())
        .filter_map(|c| {
            let class_accuracy = table.class_accuracy(c)?;
            let (g, a, _) = table
                .populated(c)
                .into_iter()
                .fold(None::<(usize, f64, usize)>, |best, cell| match best {
                    Some(b) if b.1 <= cell.1 => Some(b),
                    _ => Some(cell),
                })?;
            Some(WorstSubgroup {
                class: table.classes()[c].clone(),
                group: table.groups()[g].clone(),
                group_index: g,
                accuracy: a,
                class_accuracy,
                gap: class_accuracy - a,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSigma {
    pub class: String,
    pub sigma_w: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Drop the "others" group before computing any metric.
    pub exclude_others: bool,
    /// Optional class -> superclass pooling applied first.
    pub grouping: Option<BTreeMap<String, String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub per_class_sigma_w: Vec<ClassSigma>,
    pub macro_std: f64,
    pub overall_weighted_std: f64,
    pub total_accuracy: f64,
    pub worst_subgroup: Vec<WorstSubgroup>,
    pub table: SubgroupAccuracyTable,
}

impl DiscrepancyReport {
    pub fn from_table(table: &SubgroupAccuracyTable, opts: &EvalOptions) -> Result<Self> {
        let mut table = match &opts.grouping {
            Some(g) => table.regroup(g)?,
            None => table.clone(),
        };
        if opts.exclude_others {
            if let Some(o) = table.groups().iter().position(|g| g == OTHERS) {
                table = table.without_group(o);
            }
        }
        let total_accuracy = table
            .total_accuracy()
            .ok_or_else(|| Error::invalid("no examples to evaluate"))?;
        let per_class_sigma_w = (0..table.classes().len())
            .filter(|&c| table.class_count(c) > 0)
            .map(|c| {
                Ok(ClassSigma {
                    class: table.classes()[c].clone(),
                    sigma_w: class_weighted_std(&table, c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let sig: Vec<f64> = per_class_sigma_w.iter().map(|c| c.sigma_w).collect();
        Ok(Self {
            macro_std: macro_std(&sig)?,
            overall_weighted_std: overall_weighted_std(&table)?,
            total_accuracy,
            worst_subgroup: worst_subgroup(&table),
            per_class_sigma_w,
            table,
        })
    }

    /// Flat `class,group,count,correct,accuracy` rows for every populated cell.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let err = |e: csv::Error| Error::invalid(format!("CSV write failed: {e}"));
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["class", "group", "count", "correct", "accuracy"]).map_err(err)?;
        let t = &self.table;
        for c in 0..t.classes().len() {
            for (g, a, n) in t.populated(c) {
                w.write_record([
                    t.classes()[c].clone(),
                    t.groups()[g].clone(),
                    n.to_string(),
                    t.cell(c, g).correct.to_string(),
                    format!("{a:.6}"),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::invalid(format!("CSV write failed: {e}")))
    }
}

/// One row of a methods x seeds summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub seed: u64,
    pub total_accuracy: f64,
    pub macro_std: f64,
    pub weighted_std: f64,
}

impl RunSummary {
    pub fn new(method: impl Into<String>, seed: u64, report: &DiscrepancyReport) -> Self {
        Self {
            method: method.into(),
            seed,
            total_accuracy: report.total_accuracy,
            macro_std: report.macro_std,
            weighted_std: report.overall_weighted_std,
        }
    }
}
