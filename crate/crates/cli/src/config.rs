//! Experiment configuration. Precedence: command-line flags, then the config
//! file, then the defaults below.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use flowlab_core::flowaug::{MixSpec, PerturbSpec};
use flowlab_core::flowcore::{FlowArch, FlowTrainConfig};
use flowlab_core::metrics::EvalOptions;
use flowlab_core::synthdata::DatasetSpec;
use flowlab_core::trainer::{Method, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, StageExt};

/// Parameters of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataGenConfig {
    pub num_classes: usize,
    pub num_colors: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub rho: f64,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            num_colors: 6,
            n_train: 3600,
            n_test: 480,
            rho: 0.95,
            seed: 0,
            height: 16,
            width: 16,
        }
    }
}

impl DataGenConfig {
    pub fn spec(&self) -> flowlab_core::Result<DatasetSpec> {
        DatasetSpec::new(self.num_classes, self.num_colors, self.n_train, self.n_test, self.rho, self.seed)?
            .with_size(self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Generate(DataGenConfig),
    /// An existing dataset directory.
    Path { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Generate(DataGenConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowStageConfig {
    /// Defaults to the standard architecture at the dataset's image size.
    pub arch: Option<FlowArch>,
    pub train: FlowTrainConfig,
}

impl Default for FlowStageConfig {
    fn default() -> Self {
        Self {
            arch: None,
            train: FlowTrainConfig {
                epochs: 8,
                batch_size: 32,
                lr: 2e-3,
                ..FlowTrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum FlowSource {
    Train(FlowStageConfig),
    Checkpoint { path: PathBuf },
}

impl Default for FlowSource {
    fn default() -> Self {
        FlowSource::Train(FlowStageConfig::default())
    }
}

/// One method entry; unset fields inherit from the shared training config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    /// Output and summary label; defaults to the method name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(flatten)]
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaussian: Option<PerturbSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix: Option<MixSpec>,
}

impl RunSpec {
    pub fn new(method: Method) -> Self {
        Self {
            label: None,
            method,
            gaussian: None,
            mix: None,
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.method.name().to_string())
    }

    /// The shared config specialised to this entry and `seed`.
    pub fn train_config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.method = self.method.clone();
        cfg.seed = seed;
        if let Some(g) = self.gaussian {
            cfg.gaussian = g;
        }
        if let Some(m) = self.mix {
            cfg.mix = m;
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub flow: FlowSource,
    /// Shared training settings; `method` and `seed` are set per run.
    pub train: TrainConfig,
    pub methods: Vec<RunSpec>,
    pub seeds: Vec<u64>,
    pub evaluation: EvalOptions,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            flow: FlowSource::default(),
            train: TrainConfig {
                epochs: 20,
                ..TrainConfig::standard()
            },
            methods: vec![RunSpec::new(Method::Standard), RunSpec::new(Method::FlowaugGauss)],
            seeds: vec![0],
            evaluation: EvalOptions::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(CliError::validation)
    }

    pub fn needs_flow(&self) -> bool {
        self.methods.iter().any(|m| m.method.needs_flow())
    }

    /// Checks everything that can be checked without running a stage.
    pub fn validate(&self) -> CliResult<()> {
        match &self.data {
            DataSource::Generate(g) => {
                g.spec().invalid()?;
            }
            DataSource::Path { path } => require_path(path, "dataset directory")?,
        }
        if let FlowSource::Checkpoint { path } = &self.flow {
            require_path(path, "flow checkpoint")?;
        } else if let FlowSource::Train(f) = &self.flow {
            if self.needs_flow() {
                f.train.validate().invalid()?;
            }
        }
        if self.methods.is_empty() {
            return Err(CliError::validation("no methods configured"));
        }
        if self.seeds.is_empty() {
            return Err(CliError::validation("seeds must be listed explicitly"));
        }
        let mut seen = BTreeSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(CliError::validation(format!("seed {s} listed twice")));
        }
        let mut labels = BTreeSet::new();
        for run in &self.methods {
            let label = run.label();
            if label.is_empty() || !label.chars().all(|c| c.is_ascii_alphanumeric() || "-_.+".contains(c)) {
                return Err(CliError::validation(format!("bad run label {label:?}")));
            }
            if !labels.insert(label.clone()) {
                return Err(CliError::validation(format!("run label {label:?} used twice")));
            }
            let mut cfg = run.train_config(&self.train, 0);
            // The pipeline supplies the flow itself.
            cfg.flow_checkpoint = None;
            cfg.validate().invalid()?;
        }
        Ok(())
    }
}

fn require_path(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::validation(format!("{what} {} does not exist", path.display())))
    }
}
