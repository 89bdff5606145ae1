//! Run configuration: one TOML file drives every subcommand.
//!
//! ```toml
//! seed = 0
//! workers = 4
//!
//! [data]
//! synthetic = { hospital_count = 20, min_size = 50, max_size = 500 }
//! test_fraction = 0.3
//!
//! [[scenarios]]
//! lower = 50
//! upper = 500
//!
//! [fed]
//! rounds = 10
//! learning_rate = 0.001
//!
//! [sweep]
//! epochs = [1, 5, 10, 20]
//! repeats = 3
//!
//! [output]
//! dir = "out"
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fedsim::fedavg::FedConfig;
use fedsim::scenarios::{reference_scenarios, ScenarioSpec};
use fedsim::sweep::{
    GroupBy, InitPolicy, SweepGrid, TestPolicy, DEFAULT_BATCH_SIZES, DEFAULT_EPOCHS, DEFAULT_FRACTIONS,
};
use fedsim::SyntheticSpec;
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Experiment seed: client sampling, batching, initialization, train/test split.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
    /// Re-executions allowed per client task after a transient failure.
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Record wall-clock round durations in result files.
    #[serde(default)]
    pub timing: bool,
    pub data: DataConfig,
    #[serde(default)]
    pub scenarios: Vec<ScenarioSpec>,
    /// Use the eighteen reference scenarios instead of `scenarios`.
    #[serde(default)]
    pub reference_scenarios: bool,
    #[serde(default)]
    pub fed: FedConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub csv: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    /// Feature columns; inferred from the CSV header when absent.
    pub features: Option<Vec<String>>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Which test records `train` and `sweep` evaluate on.
    #[serde(default)]
    pub evaluation: TestPolicy,
}

fn default_max_retries() -> u32 {
    fedsim::RetryPolicy::default().max_retries
}

fn default_test_fraction() -> f64 {
    0.3
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub epochs: Vec<usize>,
    pub fractions: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub repeats: usize,
    pub init: InitPolicy,
    pub group_by: GroupBy,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS.to_vec(),
            fractions: DEFAULT_FRACTIONS.to_vec(),
            batch_sizes: DEFAULT_BATCH_SIZES.to_vec(),
            repeats: 1,
            init: InitPolicy::default(),
            group_by: GroupBy::default(),
        }
    }
}

/// Artifact paths. Relative file names resolve against `dir`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub dataset: PathBuf,
    pub scenarios: PathBuf,
    pub results: PathBuf,
    pub checkpoint: PathBuf,
    pub store: PathBuf,
    pub long_report: PathBuf,
    pub summary_report: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            dataset: "dataset.csv".into(),
            scenarios: "scenarios.csv".into(),
            results: "results.jsonl".into(),
            checkpoint: "model.bin".into(),
            store: "sweep.jsonl".into(),
            long_report: "sweep_long.csv".into(),
            summary_report: "sweep_summary.csv".into(),
        }
    }
}

impl OutputConfig {
    pub fn path(&self, file: &Path) -> PathBuf {
        self.dir.join(file)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // Relative paths in the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(csv) = &cfg.data.csv {
            cfg.data.csv = Some(base.join(csv));
        }
        cfg.output.dir = base.join(&cfg.output.dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.csv, &self.data.synthetic) {
            (Some(_), Some(_)) => bail!("data: set exactly one of `csv` and `synthetic`, not both"),
            (None, None) => bail!("data: one of `csv` or `synthetic` is required"),
            (None, Some(spec)) => spec.validate().context("data.synthetic")?,
            (Some(_), None) => {}
        }
        let f = self.data.test_fraction;
        if !(f > 0.0 && f < 1.0) {
            bail!("data.test_fraction must lie in (0, 1), got {f}");
        }
        if self.workers == Some(0) {
            bail!("workers must be >= 1");
        }
        if self.reference_scenarios && !self.scenarios.is_empty() {
            bail!("`scenarios` and `reference_scenarios = true` are mutually exclusive");
        }
        for s in &self.scenarios {
            s.validate()
                .with_context(|| format!("scenario {}", s.display_label()))?;
        }
        self.fed_config().validate().context("fed")?;
        if !self.scenario_list().is_empty() {
            self.grid().validate().context("sweep")?;
        }
        Ok(())
    }

    pub fn scenario_list(&self) -> Vec<ScenarioSpec> {
        if self.reference_scenarios {
            reference_scenarios()
        } else {
            self.scenarios.clone()
        }
    }

    pub fn fed_config(&self) -> FedConfig {
        FedConfig {
            seed: self.seed,
            ..self.fed.clone()
        }
    }

    pub fn grid(&self) -> SweepGrid {
        SweepGrid {
            epochs: self.sweep.epochs.clone(),
            fractions: self.sweep.fractions.clone(),
            batch_sizes: self.sweep.batch_sizes.clone(),
            scenarios: self.scenario_list(),
            repeats: self.sweep.repeats,
            base: self.fed.clone(),
            base_seed: self.seed,
            init: self.sweep.init,
        }
    }
}
