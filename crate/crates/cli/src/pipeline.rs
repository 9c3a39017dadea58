//! The `run` pipeline: data, flow, then train/predict/evaluate per (method,
//! seed), then the summary report. Each stage is skipped when its key and its
//! recorded outputs still match the previous manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use flowlab_core::metrics::DiscrepancyReport;
use flowlab_core::synthdata::load_dataset;
use flowlab_core::Error;
use serde::Serialize;

use crate::commands::{self, EvalInputs, ANNOTATIONS_FILE};
use crate::config::{DataSource, ExperimentConfig, FlowSource, FlowStageConfig};
use crate::error::{CliError, CliResult};
use crate::figures::ReportEntry;
use crate::manifest::{
    display, output_matches, outputs_digest, record_output, sha256_file, stage_key, ExperimentManifest, StageRecord,
    MANIFEST_FILE, TOOL,
};

const DATA_FILES: [&str; 4] = ["meta.json", "images.bin", "labels.csv", ANNOTATIONS_FILE];

struct Runner {
    root: PathBuf,
    previous: Option<ExperimentManifest>,
    manifest: ExperimentManifest,
    verbose: bool,
}

impl Runner {
    fn save(&self) -> CliResult<()> {
        let path = self.root.join(MANIFEST_FILE);
        self.manifest.save(&path).map_err(|source| CliError::Stage {
            stage: "manifest".into(),
            source: Error::Io { path, source },
        })
    }

    /// Runs `work` unless an identical stage already completed; `outputs` are
    /// relative to the root, and `work` may list extra outputs it discovers.
    fn stage(
        &mut self,
        name: &str,
        key: String,
        command: Vec<String>,
        outputs: &[String],
        work: impl FnOnce() -> flowlab_core::Result<Vec<String>>,
    ) -> CliResult<StageRecord> {
        let start = Instant::now();
        let reusable = self.previous.as_ref().and_then(|m| m.stage(name)).filter(|old| {
            old.key == key
                && old.outputs.iter().all(|o| output_matches(&self.root, o))
                && outputs.iter().all(|p| old.output(p).is_some())
        });
        let rec = if let Some(old) = reusable {
            if self.verbose {
                eprintln!("[{name}] up to date, skipped");
            }
            StageRecord {
                seconds: start.elapsed().as_secs_f64(),
                skipped: true,
                ..old.clone()
            }
        } else {
            if self.verbose {
                eprintln!("[{name}] running");
            }
            let fail = |source| CliError::Stage {
                stage: name.to_string(),
                source,
            };
            let extra = match work() {
                Ok(extra) => extra,
                Err(e) => {
                    // Keep what finished so far on record.
                    self.save()?;
                    return Err(fail(e));
                }
            };
            let mut recs = Vec::new();
            for p in outputs.iter().chain(&extra) {
                let r = record_output(&self.root, p).map_err(|source| {
                    fail(Error::Io {
                        path: self.root.join(p),
                        source,
                    })
                })?;
                recs.push(r);
            }
            StageRecord {
                name: name.to_string(),
                key,
                command,
                outputs: recs,
                seconds: start.elapsed().as_secs_f64(),
                skipped: false,
            }
        };
        self.manifest.stages.push(rec.clone());
        self.save()?;
        Ok(rec)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn arg(&self, rel: &str) -> String {
        display(&self.root.join(rel))
    }
}

fn argv(parts: &[&str]) -> Vec<String> {
    std::iter::once(TOOL).chain(parts.iter().copied()).map(String::from).collect()
}

fn file_digests(dir: &Path, files: &[&str]) -> CliResult<Vec<String>> {
    files
        .iter()
        .map(|f| {
            let p = dir.join(f);
            sha256_file(&p)
                .map(|d| d.0)
                .map_err(|e| CliError::validation(format!("cannot read {}: {e}", p.display())))
        })
        .collect()
}

#[derive(Serialize)]
struct EvalSettings<'a> {
    options: &'a flowlab_core::metrics::EvalOptions,
    palette: &'a [String],
}

/// Validates `config`, then executes every stage in order under `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig, verbose: bool) -> CliResult<ExperimentManifest> {
    config.validate()?;
    let root = config.output_dir.clone();
    fs::create_dir_all(&root).map_err(|e| CliError::validation(format!("cannot create {}: {e}", root.display())))?;
    let previous = ExperimentManifest::load(&root.join(MANIFEST_FILE)).ok();
    let mut r = Runner {
        root,
        previous,
        manifest: ExperimentManifest::new(config.clone()),
        verbose,
    };

    // Data.
    let data_outputs: Vec<String> = DATA_FILES.iter().map(|f| format!("data/{f}")).collect();
    let data_dir = r.path("data");
    let data_rec = match &config.data {
        DataSource::Generate(g) => {
            let g = g.clone();
            let cmd = argv(&[
                "generate-data",
                "--out",
                &r.arg("data"),
                "--num-classes",
                &g.num_classes.to_string(),
                "--num-colors",
                &g.num_colors.to_string(),
                "--n-train",
                &g.n_train.to_string(),
                "--n-test",
                &g.n_test.to_string(),
                "--rho",
                &g.rho.to_string(),
                "--height",
                &g.height.to_string(),
                "--width",
                &g.width.to_string(),
                "--seed",
                &g.seed.to_string(),
            ]);
            let dir = data_dir.clone();
            r.stage("data", stage_key("data", &config.data, &[]), cmd, &data_outputs, move || {
                commands::generate_data(&g, &dir).map(|_| Vec::new())
            })?
        }
        DataSource::Path { path } => {
            let inputs = file_digests(path, &DATA_FILES[..3])?;
            let inputs: Vec<&str> = inputs.iter().map(String::as_str).collect();
            let cmd = argv(&["generate-data", "--from", &display(path), "--out", &r.arg("data")]);
            let (from, dir) = (path.clone(), data_dir.clone());
            r.stage("data", stage_key("data", &config.data, &inputs), cmd, &data_outputs, move || {
                commands::ingest_data(&from, &dir).map(|_| Vec::new())
            })?
        }
    };
    let data_digest = outputs_digest(&data_rec);
    let meta = load_dataset(&data_dir)
        .map_err(|source| CliError::Stage {
            stage: "data".into(),
            source,
        })?
        .meta;

    // Flow.
    let mut flow: Option<(PathBuf, String)> = None;
    if config.needs_flow() {
        match &config.flow {
            FlowSource::Checkpoint { path } => {
                let d = sha256_file(path)
                    .map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))?
                    .0;
                flow = Some((path.clone(), d));
            }
            FlowSource::Train(f) => {
                let resolved = FlowStageConfig {
                    arch: Some(
                        f.arch
                            .clone()
                            .unwrap_or_else(|| flowlab_core::flowcore::FlowArch::new(meta.height, meta.width)),
                    ),
                    train: f.train.clone(),
                };
                let outputs = vec!["flow/config.json".to_string(), "flow/flow.bin".into(), "flow/flow_log.json".into()];
                let cmd = argv(&[
                    "train-flow",
                    "--config",
                    &r.arg("flow/config.json"),
                    "--data",
                    &r.arg("data"),
                    "--out",
                    &r.arg("flow/flow.bin"),
                ]);
                let (cfg_path, ck, dir) = (r.path("flow/config.json"), r.path("flow/flow.bin"), data_dir.clone());
                let key = stage_key("flow", &resolved, &[&data_digest]);
                let rec = r.stage("flow", key, cmd, &outputs, move || {
                    fs::create_dir_all(cfg_path.parent().expect("has parent")).map_err(commands::io_err(&cfg_path))?;
                    commands::write_json(&cfg_path, &resolved)?;
                    commands::train_flow_stage(&dir, &resolved, &ck).map(|_| Vec::new())
                })?;
                let d = rec.output("flow/flow.bin").expect("recorded").sha256.clone();
                flow = Some((r.path("flow/flow.bin"), d));
            }
        }
    }

    // Optional class pooling, materialised for the evaluate commands.
    let superclasses = match &config.evaluation.grouping {
        Some(g) => {
            let mut csv = String::from("class,superclass\n");
            for (c, s) in g {
                csv.push_str(&format!("{c},{s}\n"));
            }
            let path = r.path("superclasses.csv");
            fs::write(&path, csv).map_err(|source| CliError::Stage {
                stage: "evaluate".into(),
                source: Error::Io { path, source },
            })?;
            Some(r.arg("superclasses.csv"))
        }
        None => None,
    };
    let ann_digest = data_rec
        .output(&format!("data/{ANNOTATIONS_FILE}"))
        .expect("recorded")
        .sha256
        .clone();
    let palette_arg = meta.palette.join(",");

    let mut entries = Vec::new();
    let mut report_inputs = Vec::new();
    let mut report_cmd = argv(&["report", "--out", &display(&r.root)]);
    for run in &config.methods {
        for seed in &config.seeds {
            let label = run.label();
            let dir_rel = format!("runs/{label}_s{seed}");
            let run_dir = r.path(&dir_rel);
            let mut cfg = run.train_config(&config.train, *seed);
            cfg.flow_checkpoint = None;
            let uses_flow = cfg.method.needs_flow();

            // Train.
            let mut inputs = vec![data_digest.as_str()];
            let mut cmd = vec![
                "train".to_string(),
                "--config".into(),
                r.arg(&format!("{dir_rel}/config.json")),
                "--data".into(),
                r.arg("data"),
            ];
            let flow_path = if uses_flow {
                let (p, d) = flow.as_ref().expect("validated");
                inputs.push(d);
                cmd.extend(["--flow".into(), display(p)]);
                Some(p.clone())
            } else {
                None
            };
            cmd.extend(["--out".into(), r.arg(&dir_rel)]);
            let cmd = argv(&cmd.iter().map(String::as_str).collect::<Vec<_>>());
            let outputs: Vec<String> = commands::RUN_FILES.iter().map(|f| format!("{dir_rel}/{f}")).collect();
            let name = format!("train:{label}:s{seed}");
            let key = stage_key("train", &cfg, &inputs);
            let (dd, rd) = (data_dir.clone(), run_dir.clone());
            let rec = r.stage(&name, key, cmd, &outputs, move || {
                commands::train_stage(&cfg, &dd, flow_path.as_deref(), &rd).map(|_| Vec::new())
            })?;
            let model_digest = rec.output(&format!("{dir_rel}/last.bin")).expect("recorded").sha256.clone();

            // Predict.
            let pred_rel = format!("{dir_rel}/predictions.csv");
            let cmd = argv(&[
                "predict",
                "--model",
                &r.arg(&format!("{dir_rel}/last.bin")),
                "--data",
                &r.arg("data"),
                "--out",
                &r.arg(&pred_rel),
            ]);
            let name = format!("predict:{label}:s{seed}");
            let key = stage_key("predict", &(), &[&model_digest, &data_digest]);
            let (model, dd, pp) = (run_dir.join("last.bin"), data_dir.clone(), r.path(&pred_rel));
            let rec = r.stage(&name, key, cmd, std::slice::from_ref(&pred_rel), move || {
                commands::predict(&model, &dd, &pp).map(|_| Vec::new())
            })?;
            let pred_digest = rec.outputs[0].sha256.clone();

            // Evaluate.
            let mut cmd = vec![
                "evaluate".to_string(),
                "--predictions".into(),
                r.arg(&pred_rel),
                "--annotations".into(),
                r.arg(&format!("data/{ANNOTATIONS_FILE}")),
                "--palette".into(),
                palette_arg.clone(),
            ];
            if let Some(s) = &superclasses {
                cmd.extend(["--superclasses".into(), s.clone()]);
            }
            if config.evaluation.exclude_others {
                cmd.push("--exclude-others".into());
            }
            cmd.extend(["--out".into(), r.arg(&dir_rel)]);
            let cmd = argv(&cmd.iter().map(String::as_str).collect::<Vec<_>>());
            let outputs = vec![format!("{dir_rel}/report.json"), format!("{dir_rel}/report.csv")];
            let name = format!("evaluate:{label}:s{seed}");
            let settings = EvalSettings {
                options: &config.evaluation,
                palette: &meta.palette,
            };
            let key = stage_key("evaluate", &settings, &[&pred_digest, &ann_digest]);
            let inputs = EvalInputs {
                predictions: &r.path(&pred_rel),
                annotations: &data_dir.join(ANNOTATIONS_FILE),
                palette: Some(meta.palette.clone()),
                options: config.evaluation.clone(),
            };
            let rd = run_dir.clone();
            let rec = r.stage(&name, key, cmd, &outputs, move || {
                commands::evaluate(&inputs, &rd).map(|_| Vec::new())
            })?;
            let report: DiscrepancyReport =
                commands::read_json(&run_dir.join("report.json")).map_err(|source| CliError::Stage {
                    stage: name.clone(),
                    source,
                })?;
            report_inputs.push(format!("{label},{seed},{}", rec.outputs[0].sha256));
            report_cmd.extend(["--entry".into(), format!("{label},{seed},{}", r.arg(&format!("{dir_rel}/report.json")))]);
            entries.push(ReportEntry {
                label,
                seed: *seed,
                report,
            });
        }
    }

    // Report.
    let inputs: Vec<&str> = report_inputs.iter().map(String::as_str).collect();
    let key = stage_key("report", &(), &inputs);
    let root = r.root.clone();
    r.stage("report", key, report_cmd, &[], move || commands::report(&entries, &root))?;
    Ok(r.manifest)
}
