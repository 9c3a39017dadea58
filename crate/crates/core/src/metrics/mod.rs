//! Subgroup accuracy tables and discrepancy statistics.

mod report;
mod stats;
mod table;

pub use report::{
    class_weighted_std, overall_weighted_std, worst_subgroup, ClassSigma, DiscrepancyReport, EvalOptions, RunSummary,
    WorstSubgroup,
};
pub use stats::{correlation, macro_std, weighted_std, CorrelationKind};
pub use table::{load_predictions, read_predictions, subgroup_accuracies, Cell, Prediction, SubgroupAccuracyTable};
