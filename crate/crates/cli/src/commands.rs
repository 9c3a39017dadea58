//! Single-stage operations shared by the subcommands and the pipeline.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use flowlab_core::flowaug::{augment_batch, AugmentationSpec};
use flowlab_core::flowcore::{train_flow, FlowArch, FlowModel};
use flowlab_core::metrics::{load_predictions, subgroup_accuracies, DiscrepancyReport, EvalOptions, RunSummary};
use flowlab_core::synthdata::{
    generate_dataset, load_annotations, load_dataset, save_annotations, save_dataset, AnnotationOptions, Dataset,
    LabeledExample,
};
use flowlab_core::trainer::{train, write_predictions, Classifier, TrainConfig};
use flowlab_core::{Error, Image, Result};
use serde::{Deserialize, Serialize};

use crate::config::{DataGenConfig, FlowStageConfig};
use crate::figures::{emit_figures, ReportEntry};

pub const ANNOTATIONS_FILE: &str = "test_annotations.csv";

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(io_err(path))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let raw = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&raw).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Writes the dataset plus its test-split annotation file.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    save_dataset(ds, dir)?;
    save_annotations(&ds.test_annotations(), &dir.join(ANNOTATIONS_FILE))
}

pub fn generate_data(cfg: &DataGenConfig, dir: &Path) -> Result<Dataset> {
    let ds = generate_dataset(&cfg.spec()?)?;
    write_dataset(&ds, dir)?;
    Ok(ds)
}

/// Re-emits an existing dataset directory in canonical form.
pub fn ingest_data(from: &Path, dir: &Path) -> Result<Dataset> {
    let ds = load_dataset(from)?;
    write_dataset(&ds, dir)?;
    Ok(ds)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowLogFile {
    pub arch: FlowArch,
    pub epoch_bpd: Vec<f64>,
}

/// Trains on the train split; writes the checkpoint and `<stem>_log.json` beside it.
pub fn train_flow_stage(data_dir: &Path, cfg: &FlowStageConfig, out: &Path) -> Result<FlowLogFile> {
    let ds = load_dataset(data_dir)?;
    let arch = cfg
        .arch
        .clone()
        .unwrap_or_else(|| FlowArch::new(ds.meta.height, ds.meta.width));
    let images: Vec<&Image> = ds.train.iter().map(|e| &e.image).collect();
    let (model, log) = train_flow(&images, arch.clone(), &cfg.train)?;
    if let Some(parent) = out.parent() {
        create_dir(parent)?;
    }
    model.save(out)?;
    let log = FlowLogFile {
        arch,
        epoch_bpd: log.epoch_bpd,
    };
    write_json(&flow_log_path(out), &log)?;
    Ok(log)
}

pub fn flow_log_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    checkpoint.with_file_name(format!("{stem}_log.json"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentProvenance {
    pub tool: String,
    pub version: String,
    pub source: PathBuf,
    pub flow: PathBuf,
    pub spec: AugmentationSpec,
}

/// Augmented copies of the train split, written as a dataset whose train split
/// holds the outputs. Their background group is unknown and recorded as "others".
pub fn augment(data_dir: &Path, flow: &Path, spec: &AugmentationSpec, out: &Path) -> Result<usize> {
    let ds = load_dataset(data_dir)?;
    let model = FlowModel::load(flow)?;
    let outputs = augment_batch(&model, &ds.train, spec)?;
    let others = ds.meta.palette.len() - 1;
    let mut meta = ds.meta.clone();
    meta.spec = None;
    let aug = Dataset {
        meta,
        train: outputs
            .into_iter()
            .map(|(image, class_label)| LabeledExample {
                image,
                class_label,
                bg_group: others,
            })
            .collect(),
        test: Vec::new(),
    };
    save_dataset(&aug, out)?;
    write_json(
        &out.join("provenance.json"),
        &AugmentProvenance {
            tool: crate::manifest::TOOL.into(),
            version: crate::manifest::VERSION.into(),
            source: data_dir.to_path_buf(),
            flow: flow.to_path_buf(),
            spec: *spec,
        },
    )?;
    Ok(aug.train.len())
}

pub const RUN_FILES: [&str; 4] = ["config.json", "last.bin", "best.bin", "log.jsonl"];

/// Trains a classifier; writes the resolved config, both checkpoints and the log.
pub fn train_stage(cfg: &TrainConfig, data_dir: &Path, flow: Option<&Path>, out: &Path) -> Result<Option<f64>> {
    let ds = load_dataset(data_dir)?;
    let mut cfg = cfg.clone();
    if let Some(f) = flow {
        cfg.flow_checkpoint = Some(f.to_path_buf());
    }
    create_dir(out)?;
    write_json(&out.join("config.json"), &cfg)?;
    let outcome = train(&ds.train, &ds.test, ds.meta.num_classes, &cfg, None)?;
    outcome.last.save(&out.join("last.bin"))?;
    outcome.best.save(&out.join("best.bin"))?;
    let log = out.join("log.jsonl");
    fs::write(&log, outcome.log.to_json_lines()?).map_err(io_err(&log))?;
    Ok(outcome.log.last_accuracy)
}

/// Predictions for the test split as `index,true_class,pred_class`.
pub fn predict(model: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    let ds = load_dataset(data_dir)?;
    let clf = Classifier::load(model)?;
    let images: Vec<&Image> = ds.test.iter().map(|e| &e.image).collect();
    let pred = clf.predict(&images)?;
    let truth: Vec<usize> = ds.test.iter().map(|e| e.class_label).collect();
    if let Some(parent) = out.parent() {
        create_dir(parent)?;
    }
    write_predictions(out, &truth, &pred)
}

/// `class,superclass` rows.
pub fn load_superclasses(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    let mut map = BTreeMap::new();
    for (n, rec) in rdr.deserialize::<(String, String)>().enumerate() {
        let (class, sup) = rec.map_err(|e| Error::Parse {
            row: n + 1,
            msg: e.to_string(),
        })?;
        if map.insert(class.clone(), sup).is_some() {
            return Err(Error::Parse {
                row: n + 1,
                msg: format!("class {class:?} listed twice"),
            });
        }
    }
    Ok(map)
}

pub struct EvalInputs<'a> {
    pub predictions: &'a Path,
    pub annotations: &'a Path,
    /// Group names in index order; the default eight-color palette otherwise.
    pub palette: Option<Vec<String>>,
    pub options: EvalOptions,
}

/// Writes `report.json` and `report.csv` into `out`.
pub fn evaluate(inputs: &EvalInputs, out: &Path) -> Result<DiscrepancyReport> {
    let preds = load_predictions(inputs.predictions)?;
    let mut opts = AnnotationOptions::default();
    if let Some(p) = &inputs.palette {
        opts.palette = p.clone();
    }
    let ann = load_annotations(inputs.annotations, &opts)?;
    let table = subgroup_accuracies(&preds, &ann)?;
    let report = DiscrepancyReport::from_table(&table, &inputs.options)?;
    create_dir(out)?;
    write_json(&out.join("report.json"), &report)?;
    let csv_path = out.join("report.csv");
    let f = fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
    report.write_csv(f)?;
    Ok(report)
}

pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Summary table (CSV at 4 decimals, JSON at full precision) and figures.
/// Returns every file written, relative to `out`.
pub fn report(entries: &[ReportEntry], out: &Path) -> Result<Vec<String>> {
    create_dir(out)?;
    let rows: Vec<RunSummary> = entries.iter().map(|e| RunSummary::new(&e.label, e.seed, &e.report)).collect();
    let mut csv = String::from("method,seed,total_accuracy,macro_std,weighted_std\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4}\n",
            r.method, r.seed, r.total_accuracy, r.macro_std, r.weighted_std
        ));
    }
    let csv_path = out.join(SUMMARY_CSV);
    fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;
    write_json(&out.join(SUMMARY_JSON), &rows)?;
    let figs = emit_figures(entries, &out.join("figures")).map_err(io_err(out))?;
    let mut written = vec![SUMMARY_CSV.to_string(), SUMMARY_JSON.to_string()];
    written.extend(figs.iter().map(|p| crate::manifest::rel_string(out, p)));
    Ok(written)
}
