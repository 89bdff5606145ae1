//! Hyper-parameter sweeps over `(scenario, E, C, B, repeat)` cells.
//!
//! Every cell derives its seeds from the base seed and its own coordinates,
//! so any cell can be rerun in isolation and reproduce its stored record.
//! By default the initial model depends only on the scenario, so repeats
//! differ only in client sampling and batch order, and every `(E, C, B)`
//! setting starts from the same parameters.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Prepared};
use crate::executor::Executor;
use crate::fedavg::{run_federated, FedConfig, FedError};
use crate::scenarios::{build_cohort, ScenarioError, ScenarioSpec};
use crate::seed::{self, domain};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep grid: {0}")]
    InvalidGrid(String),
    #[error("every scenario produced an empty cohort")]
    AllScenariosEmpty,
    #[error("cell {cell}: {source}")]
    Cell {
        cell: String,
        #[source]
        source: FedError,
    },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("result store {path}: {reason}")]
    Store { path: String, reason: String },
    #[error("no records to report")]
    NoRecords,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TestPolicy {
    /// Evaluate on the pooled test split of every hospital.
    #[default]
    #[serde(rename = "pooled")]
    Pooled,
    /// Evaluate only on the test records of the cohort's hospitals.
    #[serde(rename = "cohort")]
    CohortOnly,
}

/// Which cell coordinates seed the initial model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// One initial model per scenario.
    #[default]
    PerScenario,
    /// A fresh initial model for every `(scenario, repeat)`.
    PerRepeat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub epochs: Vec<usize>,
    pub fractions: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub scenarios: Vec<ScenarioSpec>,
    pub repeats: usize,
    pub base: FedConfig,
    pub base_seed: u64,
    pub init: InitPolicy,
}

pub const DEFAULT_EPOCHS: [usize; 4] = [1, 5, 10, 20];
pub const DEFAULT_FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
pub const DEFAULT_BATCH_SIZES: [usize; 4] = [4, 16, 32, 64];

impl SweepGrid {
    pub fn with_defaults(scenarios: Vec<ScenarioSpec>, base: FedConfig, base_seed: u64) -> Self {
        Self {
            epochs: DEFAULT_EPOCHS.to_vec(),
            fractions: DEFAULT_FRACTIONS.to_vec(),
            batch_sizes: DEFAULT_BATCH_SIZES.to_vec(),
            scenarios,
            repeats: 1,
            base,
            base_seed,
            init: InitPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SweepError> {
        let bad = |m: String| Err(SweepError::InvalidGrid(m));
        if self.epochs.is_empty() || self.fractions.is_empty() || self.batch_sizes.is_empty() {
            return bad("E, C and B lists must be nonempty".into());
        }
        if self.scenarios.is_empty() {
            return bad("at least one scenario is required".into());
        }
        if self.repeats < 1 {
            return bad("repeats must be >= 1".into());
        }
        for s in &self.scenarios {
            s.validate()?;
        }
        for cell in self.cells() {
            if let Err(e) = self.cell_config(&cell).validate() {
                return bad(format!("{}: {e}", cell.label()));
            }
        }
        Ok(())
    }

    /// Cartesian product in (scenario, E, C, B, repeat) order.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for s in &self.scenarios {
            for &e in &self.epochs {
                for &c in &self.fractions {
                    for &b in &self.batch_sizes {
                        for repeat in 0..self.repeats {
                            out.push(CellKey {
                                scenario: s.display_label(),
                                lower: s.lower,
                                upper: s.upper,
                                epochs: e,
                                fraction: c,
                                batch_size: b,
                                repeat,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    /// The federated configuration for one cell, seeds included.
    pub fn cell_config(&self, cell: &CellKey) -> FedConfig {
        let scenario = [seed::str_coord(&cell.scenario), cell.lower as u64, cell.upper as u64];
        let mut coords = vec![domain::CELL];
        coords.extend(scenario);
        coords.extend([
            cell.epochs as u64,
            cell.fraction.to_bits(),
            cell.batch_size as u64,
            cell.repeat as u64,
        ]);
        let mut init = vec![domain::CELL, domain::INIT];
        init.extend(scenario);
        if self.init == InitPolicy::PerRepeat {
            init.push(cell.repeat as u64);
        }
        FedConfig {
            local_epochs: cell.epochs,
            client_fraction: cell.fraction,
            batch_size: cell.batch_size,
            seed: seed::derive(self.base_seed, &coords),
            init_seed: Some(seed::derive(self.base_seed, &init)),
            ..self.base.clone()
        }
    }
}

/// Hashable form of [`CellKey`]; the fraction is compared by bits.
type CellId = (String, usize, usize, usize, u64, usize, usize);

/// Coordinates of one sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub scenario: String,
    pub lower: usize,
    pub upper: usize,
    #[serde(rename = "E")]
    pub epochs: usize,
    #[serde(rename = "C")]
    pub fraction: f64,
    #[serde(rename = "B")]
    pub batch_size: usize,
    pub repeat: usize,
}

impl CellKey {
    pub fn label(&self) -> String {
        format!(
            "scenario={} E={} C={} B={} repeat={}",
            self.scenario, self.epochs, self.fraction, self.batch_size, self.repeat
        )
    }

    fn id(&self) -> CellId {
        (
            self.scenario.clone(),
            self.lower,
            self.upper,
            self.epochs,
            self.fraction.to_bits(),
            self.batch_size,
            self.repeat,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    #[serde(flatten)]
    pub cell: CellKey,
    /// Test AUC after each round.
    pub auc: Vec<f64>,
    pub final_auc: f64,
}

/// Runs one cell. Returns `Ok(None)` when the scenario's cohort is empty.
pub fn run_cell(
    grid: &SweepGrid,
    data: &Prepared,
    cell: &CellKey,
    policy: TestPolicy,
    executor: &Executor,
) -> Result<Option<SweepRecord>, SweepError> {
    let spec = ScenarioSpec {
        lower: cell.lower,
        upper: cell.upper,
        label: Some(cell.scenario.clone()),
    };
    let cohort = match build_cohort(&data.shards, &spec) {
        Ok(c) => c,
        Err(ScenarioError::EmptyCohort { .. }) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let ids = cohort.hospital_ids();
    let clients = data.train_for(&ids);
    let test: Dataset = match policy {
        TestPolicy::Pooled => data.test.clone(),
        TestPolicy::CohortOnly => data.test_for(&ids),
    };
    let cfg = grid.cell_config(cell);
    let result = run_federated(&clients, &cfg, &test, executor).map_err(|source| SweepError::Cell {
        cell: cell.label(),
        source,
    })?;
    Ok(Some(SweepRecord {
        cell: cell.clone(),
        auc: result.auc_series(),
        final_auc: result.final_auc(),
    }))
}

/// Append-only JSON-lines store of [`SweepRecord`]s. When a cell appears
/// more than once the last line wins.
#[derive(Debug)]
pub struct ResultStore {
    path: PathBuf,
    index: HashMap<CellId, SweepRecord>,
}

impl ResultStore {
    pub fn open(path: &Path) -> Result<Self, SweepError> {
        let err = |reason: String| SweepError::Store {
            path: path.display().to_string(),
            reason,
        };
        let mut index = HashMap::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| err(e.to_string()))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: SweepRecord = serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
                index.insert(rec.cell.id(), rec);
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            index,
        })
    }

    pub fn get(&self, cell: &CellKey) -> Option<&SweepRecord> {
        self.index.get(&cell.id())
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn append(&mut self, rec: &SweepRecord) -> Result<(), SweepError> {
        let err = |reason: String| SweepError::Store {
            path: self.path.display().to_string(),
            reason,
        };
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| err(e.to_string()))?;
        let mut line = serde_json::to_string(rec).map_err(|e| err(e.to_string()))?;
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(|e| err(e.to_string()))?;
        self.index.insert(rec.cell.id(), rec.clone());
        Ok(())
    }

    /// Stored records sorted by cell coordinates.
    pub fn records(&self) -> Vec<SweepRecord> {
        let mut v: Vec<SweepRecord> = self.index.values().cloned().collect();
        v.sort_by_key(|r| r.cell.id());
        v
    }
}

/// Outcome of [`run_sweep`].
#[derive(Debug, Default)]
pub struct SweepOutcome {
    /// One record per completed cell, in grid order.
    pub records: Vec<SweepRecord>,
    /// Cells served from the store without running.
    pub reused: usize,
    /// Scenarios whose cohort was empty.
    pub skipped_scenarios: Vec<String>,
    /// Cells that failed, with the error message.
    pub failed: Vec<(CellKey, String)>,
}

/// Runs every cell of the grid. Cells already in `store` are reused unless
/// `force` is set; new records are appended as they complete.
pub fn run_sweep(
    grid: &SweepGrid,
    data: &Prepared,
    policy: TestPolicy,
    executor: &Executor,
    mut store: Option<&mut ResultStore>,
    force: bool,
) -> Result<SweepOutcome, SweepError> {
    grid.validate()?;
    let mut out = SweepOutcome::default();
    let mut empty: BTreeMap<String, bool> = BTreeMap::new();
    for s in &grid.scenarios {
        let is_empty = matches!(build_cohort(&data.shards, s), Err(ScenarioError::EmptyCohort { .. }));
        if is_empty {
            log::warn!(
                "scenario {} ({}..={}): empty cohort, skipped",
                s.display_label(),
                s.lower,
                s.upper
            );
            out.skipped_scenarios.push(s.display_label());
        }
        empty.insert(s.display_label(), is_empty);
    }
    if empty.values().all(|e| *e) {
        return Err(SweepError::AllScenariosEmpty);
    }
    for cell in grid.cells() {
        if empty[&cell.scenario] {
            continue;
        }
        if !force {
            if let Some(existing) = store.as_ref().and_then(|s| s.get(&cell)) {
                out.records.push(existing.clone());
                out.reused += 1;
                continue;
            }
        }
        match run_cell(grid, data, &cell, policy, executor) {
            Ok(Some(rec)) => {
                if let Some(s) = store.as_deref_mut() {
                    s.append(&rec)?;
                }
                log::info!("{}: final auc {:.4}", cell.label(), rec.final_auc);
                out.records.push(rec);
            }
            Ok(None) => {}
            Err(e) => {
                log::error!("{}: {e}", cell.label());
                out.failed.push((cell, e.to_string()));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum GroupBy {
    #[default]
    #[serde(rename = "E")]
    Epochs,
    #[serde(rename = "BC")]
    BatchAndFraction,
}

/// Summary group key: scenario plus the grouped hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum GroupKey {
    Epochs {
        scenario: String,
        epochs: usize,
    },
    BatchAndFraction {
        scenario: String,
        batch_size: usize,
        fraction_bits: u64,
    },
}

pub fn group_key(r: &SweepRecord, by: GroupBy) -> GroupKey {
    match by {
        GroupBy::Epochs => GroupKey::Epochs {
            scenario: r.cell.scenario.clone(),
            epochs: r.cell.epochs,
        },
        GroupBy::BatchAndFraction => GroupKey::BatchAndFraction {
            scenario: r.cell.scenario.clone(),
            batch_size: r.cell.batch_size,
            fraction_bits: r.cell.fraction.to_bits(),
        },
    }
}

pub fn group_records(records: &[SweepRecord], by: GroupBy) -> BTreeMap<GroupKey, Vec<&SweepRecord>> {
    let mut groups: BTreeMap<GroupKey, Vec<&SweepRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(group_key(r, by)).or_default().push(r);
    }
    groups
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    /// `scenario,E,C,B,repeat,round,auc`
    pub long_csv: String,
    /// Mean final AUC per group across repeats.
    pub summary_csv: String,
}

fn csv_string(rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(&row).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv output is utf-8")
}

pub fn emit_report(records: &[SweepRecord], by: GroupBy) -> Result<Report, SweepError> {
    if records.is_empty() {
        return Err(SweepError::NoRecords);
    }
    let mut long = vec![["scenario", "E", "C", "B", "repeat", "round", "auc"]
        .map(String::from)
        .to_vec()];
    for r in records {
        for (i, auc) in r.auc.iter().enumerate() {
            long.push(vec![
                r.cell.scenario.clone(),
                r.cell.epochs.to_string(),
                r.cell.fraction.to_string(),
                r.cell.batch_size.to_string(),
                r.cell.repeat.to_string(),
                (i + 1).to_string(),
                auc.to_string(),
            ]);
        }
    }
    let header: Vec<String> = match by {
        GroupBy::Epochs => vec!["scenario", "E", "count", "mean_final_auc"],
        GroupBy::BatchAndFraction => vec!["scenario", "B", "C", "count", "mean_final_auc"],
    }
    .into_iter()
    .map(String::from)
    .collect();
    let mut summary = vec![header];
    for (key, group) in group_records(records, by) {
        let mean = group.iter().map(|r| r.final_auc).sum::<f64>() / group.len() as f64;
        let mut row = match key {
            GroupKey::Epochs { scenario, epochs } => vec![scenario, epochs.to_string()],
            GroupKey::BatchAndFraction {
                scenario,
                batch_size,
                fraction_bits,
            } => vec![
                scenario,
                batch_size.to_string(),
                f64::from_bits(fraction_bits).to_string(),
            ],
        };
        row.push(group.len().to_string());
        row.push(mean.to_string());
        summary.push(row);
    }
    Ok(Report {
        long_csv: csv_string(long),
        summary_csv: csv_string(summary),
    })
}
