//! Argument parsing and subcommand dispatch.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowlab_core::flowaug::{AugMethod, AugmentationSpec, MixSpec, PerturbSpec, Perturbation, Target};
use flowlab_core::metrics::EvalOptions;
use flowlab_core::trainer::{Method, TrainConfig};
use serde::de::DeserializeOwned;

use crate::commands::{self, EvalInputs};
use crate::config::{DataGenConfig, ExperimentConfig, FlowStageConfig};
use crate::error::{CliError, CliResult, StageExt};
use crate::figures::ReportEntry;
use crate::pipeline::run_experiment;

#[derive(Debug, Parser)]
#[command(name = "flowlab", version, about = "Subgroup-discrepancy experiments with flow-based augmentation")]
pub struct Cli {
    /// JSON config for the subcommand; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file or directory (meaning depends on the subcommand).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (or re-emit an existing one with --from).
    GenerateData(GenerateArgs),
    /// Train the decoupled flow on a dataset's train split.
    TrainFlow(TrainFlowArgs),
    /// Write flow-augmented copies of a dataset's train split.
    Augment(AugmentArgs),
    /// Train a classifier.
    Train(TrainArgs),
    /// Write test-split predictions of a classifier checkpoint.
    Predict(PredictArgs),
    /// Subgroup metrics from predictions and annotations.
    Evaluate(EvaluateArgs),
    /// Summary table and figures from evaluated runs.
    Report(ReportArgs),
    /// Full pipeline from an experiment config.
    Run,
    /// Print the default experiment config.
    PrintConfig,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Existing dataset directory to re-emit instead of generating.
    #[arg(long)]
    pub from: Option<PathBuf>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub num_colors: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainFlowArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AugKind {
    Gaussian,
    Mix,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TargetArg {
    Z,
    Nu,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DistArg {
    TruncGaussian,
    Uniform,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub flow: PathBuf,
    #[arg(long, value_enum)]
    pub method: Option<AugKind>,
    #[arg(long, value_enum)]
    pub target: Option<TargetArg>,
    #[arg(long, value_enum)]
    pub dist: Option<DistArg>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub bound: Option<f64>,
    #[arg(long)]
    pub lo: Option<f64>,
    #[arg(long)]
    pub hi: Option<f64>,
    /// Clamp the perturbed code to the truncation bound.
    #[arg(long)]
    pub clamp_code: bool,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tr: Option<f64>,
    /// Number of outputs.
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Flow checkpoint for flow-based methods.
    #[arg(long)]
    pub flow: Option<PathBuf>,
    /// A method name, or a JSON object such as '{"name":"mixup","alpha":1.0}'.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    /// CSV `class,superclass` pooling classes before the metrics.
    #[arg(long)]
    pub superclasses: Option<PathBuf>,
    #[arg(long)]
    pub exclude_others: bool,
    /// Comma-separated group names in index order.
    #[arg(long, value_delimiter = ',')]
    pub palette: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `label,seed,path/to/report.json`; repeatable, order is kept.
    #[arg(long = "entry")]
    pub entries: Vec<String>,
}

fn read_config<T: DeserializeOwned>(p: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(p)
        .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::validation(format!("config {}: {e}", p.display())))
}

fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    path.map_or_else(|| Ok(T::default()), read_config)
}

fn require_out(out: &Option<PathBuf>) -> CliResult<&Path> {
    out.as_deref().ok_or_else(|| CliError::validation("--out is required"))
}

fn require_exists(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::validation(format!("{what} {} does not exist", path.display())))
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

pub fn parse_method(s: &str) -> CliResult<Method> {
    let s = s.trim();
    let json = if s.starts_with('{') {
        s.to_string()
    } else {
        format!("{{\"name\":{}}}", serde_json::Value::String(s.to_string()))
    };
    serde_json::from_str(&json).map_err(|e| CliError::validation(format!("bad method {s:?}: {e}")))
}

impl Cli {
    pub fn execute(self) -> CliResult<()> {
        let cfg_path = self.config.as_deref();
        let say = |msg: String| {
            if !self.quiet {
                eprintln!("{msg}");
            }
        };
        match &self.command {
            Command::GenerateData(a) => {
                let out = require_out(&self.out)?;
                if let Some(from) = &a.from {
                    require_exists(from, "dataset directory")?;
                    let ds = commands::ingest_data(from, out).stage("generate-data")?;
                    say(format!("wrote {} + {} examples to {}", ds.train.len(), ds.test.len(), out.display()));
                    return Ok(());
                }
                let mut g: DataGenConfig = load_or_default(cfg_path)?;
                set(&mut g.num_classes, a.num_classes);
                set(&mut g.num_colors, a.num_colors);
                set(&mut g.n_train, a.n_train);
                set(&mut g.n_test, a.n_test);
                set(&mut g.rho, a.rho);
                set(&mut g.height, a.height);
                set(&mut g.width, a.width);
                set(&mut g.seed, self.seed);
                g.spec().invalid()?;
                let ds = commands::generate_data(&g, out).stage("generate-data")?;
                say(format!("wrote {} + {} examples to {}", ds.train.len(), ds.test.len(), out.display()));
            }
            Command::TrainFlow(a) => {
                let out = require_out(&self.out)?;
                require_exists(&a.data, "dataset directory")?;
                let mut f: FlowStageConfig = load_or_default(cfg_path)?;
                set(&mut f.train.epochs, a.epochs);
                set(&mut f.train.batch_size, a.batch_size);
                set(&mut f.train.lr, a.lr);
                set(&mut f.train.seed, self.seed);
                f.train.validate().invalid()?;
                let log = commands::train_flow_stage(&a.data, &f, out).stage("train-flow")?;
                say(format!("flow bits/dim per epoch: {:?}", log.epoch_bpd));
            }
            Command::Augment(a) => {
                let out = require_out(&self.out)?;
                require_exists(&a.input, "dataset directory")?;
                require_exists(&a.flow, "flow checkpoint")?;
                let spec = augment_spec(cfg_path.map(read_config).transpose()?, a, self.seed)?;
                let n = commands::augment(&a.input, &a.flow, &spec, out).stage("augment")?;
                say(format!("wrote {n} augmented examples to {}", out.display()));
            }
            Command::Train(a) => {
                let out = require_out(&self.out)?;
                require_exists(&a.data, "dataset directory")?;
                let mut t: TrainConfig = load_or_default(cfg_path)?;
                if let Some(m) = &a.method {
                    t.method = parse_method(m)?;
                }
                set(&mut t.epochs, a.epochs);
                set(&mut t.batch_size, a.batch_size);
                set(&mut t.lr, a.lr);
                set(&mut t.seed, self.seed);
                if let Some(f) = &a.flow {
                    require_exists(f, "flow checkpoint")?;
                    t.flow_checkpoint = Some(f.clone());
                }
                if t.method.needs_flow() {
                    match &t.flow_checkpoint {
                        Some(f) => require_exists(f, "flow checkpoint")?,
                        None => return Err(CliError::validation(format!("{} needs --flow", t.method.name()))),
                    }
                }
                t.validate().invalid()?;
                let acc = commands::train_stage(&t, &a.data, None, out).stage("train")?;
                if let Some(acc) = acc {
                    say(format!("final test accuracy {acc:.4}"));
                }
            }
            Command::Predict(a) => {
                let out = require_out(&self.out)?;
                require_exists(&a.model, "checkpoint")?;
                require_exists(&a.data, "dataset directory")?;
                commands::predict(&a.model, &a.data, out).stage("predict")?;
            }
            Command::Evaluate(a) => {
                let out = require_out(&self.out)?;
                require_exists(&a.predictions, "predictions file")?;
                require_exists(&a.annotations, "annotations file")?;
                let mut options: EvalOptions = load_or_default(cfg_path)?;
                options.exclude_others |= a.exclude_others;
                if let Some(s) = &a.superclasses {
                    require_exists(s, "superclass map")?;
                    options.grouping = Some(commands::load_superclasses(s).invalid()?);
                }
                let inputs = EvalInputs {
                    predictions: &a.predictions,
                    annotations: &a.annotations,
                    palette: a.palette.clone(),
                    options,
                };
                let r = commands::evaluate(&inputs, out).stage("evaluate")?;
                say(format!(
                    "total accuracy {:.4}, MacroStd {:.4}, WeightedStd {:.4}",
                    r.total_accuracy, r.macro_std, r.overall_weighted_std
                ));
            }
            Command::Report(a) => {
                let out = require_out(&self.out)?;
                let entries = a.entries.iter().map(|e| parse_entry(e)).collect::<CliResult<Vec<_>>>()?;
                let files = commands::report(&entries, out).stage("report")?;
                say(format!("wrote {} files to {}", files.len(), out.display()));
            }
            Command::Run => {
                let mut cfg = match cfg_path {
                    Some(p) => ExperimentConfig::from_file(p)?,
                    None => ExperimentConfig::default(),
                };
                if let Some(o) = &self.out {
                    cfg.output_dir = o.clone();
                }
                if let Some(s) = self.seed {
                    cfg.seeds = vec![s];
                }
                let m = run_experiment(&cfg, !self.quiet)?;
                let ran = m.stages.iter().filter(|s| !s.skipped).count();
                say(format!(
                    "{} stages ({} skipped); summary in {}",
                    m.stages.len(),
                    m.stages.len() - ran,
                    cfg.output_dir.join(commands::SUMMARY_CSV).display()
                ));
            }
            Command::PrintConfig => {
                let cfg = ExperimentConfig::default();
                println!("{}", serde_json::to_string_pretty(&cfg).expect("config serialises"));
            }
        }
        Ok(())
    }
}

fn parse_entry(s: &str) -> CliResult<ReportEntry> {
    let mut parts = s.splitn(3, ',');
    let (Some(label), Some(seed), Some(path)) = (parts.next(), parts.next(), parts.next()) else {
        return Err(CliError::validation(format!("--entry {s:?}: expected label,seed,path")));
    };
    let seed = seed
        .trim()
        .parse()
        .map_err(|_| CliError::validation(format!("--entry {s:?}: bad seed")))?;
    let path = Path::new(path.trim());
    require_exists(path, "report")?;
    let report = commands::read_json(path).invalid()?;
    Ok(ReportEntry {
        label: label.trim().to_string(),
        seed,
        report,
    })
}

/// Config-file spec (or defaults) with flag overrides applied.
fn augment_spec(base: Option<AugmentationSpec>, a: &AugmentArgs, seed: Option<u64>) -> CliResult<AugmentationSpec> {
    let mut spec = base.unwrap_or(AugmentationSpec {
        method: AugMethod::Gaussian(PerturbSpec::default()),
        k: 1,
        count: 0,
        seed: 0,
    });
    match a.method {
        Some(AugKind::Gaussian) if !matches!(spec.method, AugMethod::Gaussian(_)) => {
            spec.method = AugMethod::Gaussian(PerturbSpec::default())
        }
        Some(AugKind::Mix) if !matches!(spec.method, AugMethod::Mix(_)) => spec.method = AugMethod::Mix(MixSpec::default()),
        _ => {}
    }
    let target = a.target.map(|t| match t {
        TargetArg::Z => Target::GlobalZ,
        TargetArg::Nu => Target::LocalNu,
    });
    match &mut spec.method {
        AugMethod::Gaussian(p) => {
            set(&mut p.target, target);
            p.clamp_code |= a.clamp_code;
            let dist = a.dist.unwrap_or(match p.distribution {
                Perturbation::TruncGaussian { .. } => DistArg::TruncGaussian,
                Perturbation::Uniform { .. } => DistArg::Uniform,
            });
            p.distribution = match (dist, p.distribution) {
                (DistArg::TruncGaussian, Perturbation::TruncGaussian { mu, sigma, bound }) => Perturbation::TruncGaussian {
                    mu: a.mu.unwrap_or(mu),
                    sigma: a.sigma.unwrap_or(sigma),
                    bound: a.bound.unwrap_or(bound),
                },
                (DistArg::TruncGaussian, _) => Perturbation::TruncGaussian {
                    mu: a.mu.unwrap_or(0.0),
                    sigma: a.sigma.unwrap_or(0.1),
                    bound: a.bound.unwrap_or(4.0),
                },
                (DistArg::Uniform, Perturbation::Uniform { lo, hi }) => Perturbation::Uniform {
                    lo: a.lo.unwrap_or(lo),
                    hi: a.hi.unwrap_or(hi),
                },
                (DistArg::Uniform, _) => Perturbation::Uniform {
                    lo: a.lo.unwrap_or(-0.2),
                    hi: a.hi.unwrap_or(0.2),
                },
            };
        }
        AugMethod::Mix(m) => {
            set(&mut m.target, target);
            set(&mut m.alpha, a.alpha);
            set(&mut m.tr, a.tr);
        }
    }
    set(&mut spec.count, a.count);
    set(&mut spec.seed, seed);
    if spec.count == 0 {
        return Err(CliError::validation("--count is required"));
    }
    spec.validate().invalid()?;
    Ok(spec)
}
