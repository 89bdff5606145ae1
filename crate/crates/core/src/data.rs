//! Tabular EHR data model: one [`Record`] per ICU stay, grouped into
//! per-hospital [`ClientShard`]s.
//!
//! Data enters either from a prepared flat CSV extract ([`load_csv`]) or from
//! the synthetic non-IID generator ([`generate_synthetic`]).

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{self, domain};

pub const HOSPITAL_COLUMN: &str = "hospital_id";
pub const STAY_COLUMN: &str = "stay_id";
pub const LABEL_COLUMN: &str = "label";

/// Ordered feature names shared by every record of a dataset.
pub type Schema = Arc<Vec<String>>;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("no usable rows in {0}")]
    EmptyDataset(String),
    #[error("duplicate stay_id {0}")]
    DuplicateStay(u64),
    #[error("line {line}: invalid {column} value `{value}`")]
    InvalidField { line: u64, column: String, value: String },
    #[error("stay {stay_id}: expected {expected} features, found {found}")]
    FeatureLength {
        stay_id: u64,
        expected: usize,
        found: usize,
    },
    #[error("stay {0}: non-finite feature value")]
    NonFinite(u64),
    #[error("stay {stay_id}: label must be 0 or 1, found {label}")]
    InvalidLabel { stay_id: u64, label: u8 },
    #[error("shard for hospital {0} is empty or mixes hospitals")]
    InvalidShard(u32),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("test fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("no training records")]
    NoTrainingRecords,
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// One ICU stay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub hospital_id: u32,
    pub stay_id: u64,
    pub features: Vec<f64>,
    /// 0 = survived, 1 = died.
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: Schema,
    records: Vec<Record>,
}

impl Dataset {
    /// Validates feature width, finiteness, labels and stay-id uniqueness.
    ///
    /// Class balance is not required here; [`Dataset::has_both_classes`] is
    /// checked by the consumers that need it (evaluation).
    pub fn new(schema: Schema, records: Vec<Record>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            validate_record(&schema, r)?;
            if !seen.insert(r.stay_id) {
                return Err(DataError::DuplicateStay(r.stay_id));
            }
        }
        Ok(Self { schema, records })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn into_records(self) -> Vec<Record> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.schema.len()
    }

    /// (negatives, positives)
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.records.iter().filter(|r| r.label == 1).count();
        (self.records.len() - pos, pos)
    }

    pub fn has_both_classes(&self) -> bool {
        let (neg, pos) = self.class_counts();
        neg > 0 && pos > 0
    }

    /// Writes the dataset in the ingestion CSV format.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![
            HOSPITAL_COLUMN.to_string(),
            STAY_COLUMN.to_string(),
            LABEL_COLUMN.to_string(),
        ];
        header.extend(self.schema.iter().cloned());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.hospital_id.to_string(), r.stay_id.to_string(), r.label.to_string()];
            // `{}` on f64 prints the shortest representation that parses back exactly.
            row.extend(r.features.iter().map(|v| format!("{v}")));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| DataError::Csv(e.into()))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn validate_record(schema: &Schema, r: &Record) -> Result<()> {
    if r.features.len() != schema.len() {
        return Err(DataError::FeatureLength {
            stay_id: r.stay_id,
            expected: schema.len(),
            found: r.features.len(),
        });
    }
    if r.features.iter().any(|v| !v.is_finite()) {
        return Err(DataError::NonFinite(r.stay_id));
    }
    if r.label > 1 {
        return Err(DataError::InvalidLabel {
            stay_id: r.stay_id,
            label: r.label,
        });
    }
    Ok(())
}

/// All stays of one hospital.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    hospital_id: u32,
    schema: Schema,
    records: Vec<Record>,
}

impl ClientShard {
    pub fn new(hospital_id: u32, schema: Schema, records: Vec<Record>) -> Result<Self> {
        if records.is_empty() || records.iter().any(|r| r.hospital_id != hospital_id) {
            return Err(DataError::InvalidShard(hospital_id));
        }
        Ok(Self {
            hospital_id,
            schema,
            records,
        })
    }

    pub fn hospital_id(&self) -> u32 {
        self.hospital_id
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// m_k
    pub fn size(&self) -> usize {
        self.records.len()
    }
}

/// Result of [`load_csv`]: the dataset plus the number of rows dropped for
/// missing or non-numeric feature values.
#[derive(Debug, Clone)]
pub struct LoadedCsv {
    pub dataset: Dataset,
    pub dropped_rows: usize,
}

/// Loads a prepared extract with columns `hospital_id,stay_id,label,<features>`.
///
/// Only the columns named in `schema` are used as features, in that order.
pub fn load_csv(path: &Path, schema: &[String]) -> Result<LoadedCsv> {
    let file = open(path)?;
    read_csv(file, Some(schema), &path.display().to_string())
}

/// Like [`load_csv`], using every non-key column as a feature in header order.
pub fn load_csv_inferred(path: &Path) -> Result<LoadedCsv> {
    let file = open(path)?;
    read_csv(file, None, &path.display().to_string())
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reader-level entry point behind [`load_csv`]; `source_name` is used in errors.
pub fn read_csv<R: Read>(reader: R, schema: Option<&[String]>, source_name: &str) -> Result<LoadedCsv> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let hospital_col = find(HOSPITAL_COLUMN)?;
    let stay_col = find(STAY_COLUMN)?;
    let label_col = find(LABEL_COLUMN)?;
    let feature_names: Vec<String> = match schema {
        Some(names) => names.to_vec(),
        None => headers
            .iter()
            .filter(|h| ![HOSPITAL_COLUMN, STAY_COLUMN, LABEL_COLUMN].contains(h))
            .map(str::to_string)
            .collect(),
    };
    let feature_cols = feature_names.iter().map(|n| find(n)).collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    let mut dropped = 0usize;
    let mut seen = HashSet::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |col: usize, name: &str| -> Result<&str> {
            row.get(col)
                .filter(|v| !v.is_empty())
                .ok_or_else(|| DataError::InvalidField {
                    line,
                    column: name.to_string(),
                    value: String::new(),
                })
        };
        let parse_err = |name: &str, value: &str| DataError::InvalidField {
            line,
            column: name.to_string(),
            value: value.to_string(),
        };
        let h = field(hospital_col, HOSPITAL_COLUMN)?;
        let hospital_id: u32 = h.parse().map_err(|_| parse_err(HOSPITAL_COLUMN, h))?;
        let s = field(stay_col, STAY_COLUMN)?;
        let stay_id: u64 = s.parse().map_err(|_| parse_err(STAY_COLUMN, s))?;
        let l = field(label_col, LABEL_COLUMN)?;
        let label = match l {
            "0" => 0u8,
            "1" => 1u8,
            _ => return Err(parse_err(LABEL_COLUMN, l)),
        };
        let features: Option<Vec<f64>> = feature_cols
            .iter()
            .map(|&c| row.get(c).and_then(|v| v.parse::<f64>().ok()).filter(|v| v.is_finite()))
            .collect();
        let Some(features) = features else {
            dropped += 1;
            continue;
        };
        if !seen.insert(stay_id) {
            return Err(DataError::DuplicateStay(stay_id));
        }
        records.push(Record {
            hospital_id,
            stay_id,
            features,
            label,
        });
    }
    if records.is_empty() {
        return Err(DataError::EmptyDataset(source_name.to_string()));
    }
    if dropped > 0 {
        log::info!("{source_name}: dropped {dropped} rows with missing feature values");
    }
    Ok(LoadedCsv {
        dataset: Dataset::new(Arc::new(feature_names), records)?,
        dropped_rows: dropped,
    })
}

/// One shard per distinct hospital id, sorted by id. Record order within a
/// shard follows the dataset.
pub fn partition_by_hospital(d: &Dataset) -> Vec<ClientShard> {
    let mut groups: BTreeMap<u32, Vec<Record>> = BTreeMap::new();
    for r in d.records() {
        groups.entry(r.hospital_id).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|(hospital_id, records)| ClientShard {
            hospital_id,
            schema: d.schema.clone(),
            records,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<ClientShard>,
    pub test: Dataset,
}

/// Number of records a shard of `size` sends to the test set.
pub fn test_count(size: usize, test_fraction: f64) -> usize {
    let k = (test_fraction * size as f64).round() as usize;
    k.min(size.saturating_sub(1))
}

/// Per-hospital proportional split: each shard sends `round(f * m_k)` stays
/// (at most `m_k - 1`) to the pooled test set.
///
/// Record order is preserved on both sides; the test set lists shards in
/// input order.
pub fn train_test_split(shards: &[ClientShard], test_fraction: f64, seed: u64) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::InvalidFraction(test_fraction));
    }
    let schema = shards
        .first()
        .map(|s| s.schema.clone())
        .ok_or(DataError::NoTrainingRecords)?;
    let mut train = Vec::with_capacity(shards.len());
    let mut test = Vec::new();
    for shard in shards {
        let m = shard.size();
        let k = test_count(m, test_fraction);
        let mut idx: Vec<usize> = (0..m).collect();
        let mut rng = seed::rng(seed::derive(seed, &[domain::SPLIT, u64::from(shard.hospital_id)]));
        idx.shuffle(&mut rng);
        let mut in_test = vec![false; m];
        for &i in &idx[..k] {
            in_test[i] = true;
        }
        let mut kept = Vec::with_capacity(m - k);
        for (r, &t) in shard.records.iter().zip(&in_test) {
            if t {
                test.push(r.clone());
            } else {
                kept.push(r.clone());
            }
        }
        train.push(ClientShard {
            hospital_id: shard.hospital_id,
            schema: shard.schema.clone(),
            records: kept,
        });
    }
    Ok(Split {
        train,
        test: Dataset::new(schema, test)?,
    })
}

/// Per-feature affine transform fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation; 0 marks a constant feature.
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a, I>(records: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Record> + Clone,
    {
        let mut it = records.clone().into_iter().peekable();
        let dim = it
            .peek()
            .map(|r| r.features.len())
            .ok_or(DataError::NoTrainingRecords)?;
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        for r in it {
            n += 1;
            for (m, v) in mean.iter_mut().zip(&r.features) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for r in records {
            for ((s, v), m) in var.iter_mut().zip(&r.features).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, features: &mut [f64]) {
        for ((v, m), s) in features.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = if *s > 0.0 { (*v - m) / s } else { 0.0 };
        }
    }

    fn apply_all(&self, records: &[Record]) -> Vec<Record> {
        records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                self.apply(&mut r.features);
                r
            })
            .collect()
    }

    pub fn apply_shard(&self, shard: &ClientShard) -> ClientShard {
        ClientShard {
            hospital_id: shard.hospital_id,
            schema: shard.schema.clone(),
            records: self.apply_all(&shard.records),
        }
    }

    pub fn apply_dataset(&self, d: &Dataset) -> Dataset {
        Dataset {
            schema: d.schema.clone(),
            records: self.apply_all(&d.records),
        }
    }
}

/// Fits a [`Standardizer`] on the pooled training records and applies it to
/// both sides.
pub fn standardize(train: &[ClientShard], test: &Dataset) -> Result<(Vec<ClientShard>, Dataset, Standardizer)> {
    let t = Standardizer::fit(train.iter().flat_map(|s| s.records.iter()))?;
    let train = train.iter().map(|s| t.apply_shard(s)).collect();
    let test = t.apply_dataset(test);
    Ok((train, test, t))
}

/// A dataset ready for federated runs: raw per-hospital shards (used for
/// cohort selection by full size), standardized training portions and the
/// standardized pooled test set.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub shards: Vec<ClientShard>,
    pub train: Vec<ClientShard>,
    pub test: Dataset,
    pub transform: Standardizer,
}

impl Prepared {
    /// Training portions of the given hospitals, in `hospital_ids` order.
    pub fn train_for(&self, hospital_ids: &[u32]) -> Vec<ClientShard> {
        hospital_ids
            .iter()
            .filter_map(|h| self.train.iter().find(|s| s.hospital_id == *h).cloned())
            .collect()
    }

    /// Test records belonging to the given hospitals.
    pub fn test_for(&self, hospital_ids: &[u32]) -> Dataset {
        let keep: HashSet<u32> = hospital_ids.iter().copied().collect();
        Dataset {
            schema: self.test.schema.clone(),
            records: self
                .test
                .records
                .iter()
                .filter(|r| keep.contains(&r.hospital_id))
                .cloned()
                .collect(),
        }
    }
}

/// Partition, split and standardize.
pub fn prepare(d: &Dataset, test_fraction: f64, seed: u64) -> Result<Prepared> {
    let shards = partition_by_hospital(d);
    let split = train_test_split(&shards, test_fraction, seed)?;
    let (train, test, transform) = standardize(&split.train, &split.test)?;
    Ok(Prepared {
        shards,
        train,
        test,
        transform,
    })
}

/// Parameters of the synthetic multi-hospital generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub hospital_count: usize,
    /// Shard sizes are log-uniform over `[min_size, max_size]`.
    pub min_size: usize,
    pub max_size: usize,
    pub feature_dim: usize,
    /// Norm of each hospital's feature mean shift.
    pub client_shift_strength: f64,
    pub base_positive_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            hospital_count: 20,
            min_size: 50,
            max_size: 500,
            feature_dim: 8,
            client_shift_strength: 0.5,
            base_positive_rate: 0.3,
            seed: 0,
        }
    }
}

/// Norm of the ground-truth logistic weight vector. Large enough that the
/// Bayes-optimal AUC sits near 0.98 for standard-normal features.
pub const SYNTHETIC_SIGNAL_NORM: f64 = 8.0;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.hospital_count < 1 {
            return bad("hospital_count must be >= 1");
        }
        if self.feature_dim < 1 {
            return bad("feature_dim must be >= 1");
        }
        if self.min_size < 1 || self.min_size > self.max_size {
            return bad("sizes must satisfy 1 <= min_size <= max_size");
        }
        if !(self.client_shift_strength >= 0.0 && self.client_shift_strength.is_finite()) {
            return bad("client_shift_strength must be finite and >= 0");
        }
        if !(self.base_positive_rate > 0.0 && self.base_positive_rate < 1.0) {
            return bad("base_positive_rate must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn schema(&self) -> Vec<String> {
        let d = self.feature_dim;
        (0..d)
            .map(|i| {
                if d > 1 && i == d - 1 {
                    "age".to_string()
                } else {
                    format!("apache_{:02}", i + 1)
                }
            })
            .collect()
    }

    /// The ground-truth weight vector used for labelling.
    pub fn truth_weights(&self) -> Vec<f64> {
        let mut rng = seed::rng(seed::derive(self.seed, &[domain::SYNTH, 0]));
        scaled_normal(&mut rng, self.feature_dim, SYNTHETIC_SIGNAL_NORM)
    }
}

fn scaled_normal<R: Rng>(rng: &mut R, dim: usize, norm: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if len == 0.0 {
        return vec![0.0; dim];
    }
    v.into_iter().map(|x| x * norm / len).collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Log-uniform integer in `[lo, hi]`.
fn log_uniform_size<R: Rng>(rng: &mut R, lo: usize, hi: usize) -> usize {
    if lo == hi {
        return lo;
    }
    let a = (lo as f64).ln();
    let b = ((hi + 1) as f64).ln();
    let x = (a + rng.random::<f64>() * (b - a)).exp().floor() as usize;
    x.clamp(lo, hi)
}

/// Intercept `b` such that the mean of `sigmoid(z_i + b)` equals `rate`.
fn calibrate_intercept(logits: &[f64], rate: f64) -> f64 {
    let mean_at = |b: f64| logits.iter().map(|z| sigmoid(z + b)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-100.0, 100.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) > rate {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Generates a non-IID multi-hospital dataset.
///
/// Hospital `k` (ids `1..=hospital_count`) draws its size from the log-uniform
/// law and its features from `N(shift_k, I)` with `|shift_k| =
/// client_shift_strength`. Labels are Bernoulli draws from a logistic model
/// over the features whose intercept is calibrated to `base_positive_rate`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let dim = spec.feature_dim;
    let weights = spec.truth_weights();

    let mut hospitals: Vec<(u32, Vec<Vec<f64>>)> = Vec::with_capacity(spec.hospital_count);
    for k in 0..spec.hospital_count {
        let id = k as u32 + 1;
        let mut rng = seed::rng(seed::derive(spec.seed, &[domain::SYNTH, 1, u64::from(id)]));
        let size = log_uniform_size(&mut rng, spec.min_size, spec.max_size);
        let shift = scaled_normal(&mut rng, dim, spec.client_shift_strength);
        let rows = (0..size)
            .map(|_| shift.iter().map(|s| s + rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        hospitals.push((id, rows));
    }

    let logits: Vec<f64> = hospitals
        .iter()
        .flat_map(|(_, rows)| rows.iter())
        .map(|x: &Vec<f64>| x.iter().zip(&weights).map(|(a, b)| a * b).sum())
        .collect();
    let intercept = calibrate_intercept(&logits, spec.base_positive_rate);

    let mut label_rng = seed::rng(seed::derive(spec.seed, &[domain::SYNTH, 2]));
    let mut records = Vec::with_capacity(logits.len());
    let mut stay_id = 0u64;
    let mut logit_iter = logits.iter();
    for (id, rows) in hospitals {
        for features in rows {
            stay_id += 1;
            let z = logit_iter.next().expect("one logit per row");
            let label = u8::from(label_rng.random::<f64>() < sigmoid(z + intercept));
            records.push(Record {
                hospital_id: id,
                stay_id,
                features,
                label,
            });
        }
    }
    Dataset::new(Arc::new(spec.schema()), records)
}
