//! Federated averaging.
//!
//! Each round the server samples `n = max(1, round(C * N))` clients, every
//! sampled client trains a copy of the global parameters for `E` local epochs
//! of mini-batches of size `B`, and the server replaces the global parameters
//! with the average of the returned ones. The run stops after a fixed round
//! budget.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ClientShard, Dataset};
use crate::executor::{reduce_round, ExecError, ExecEvent, Executor, Task, TaskFailure, TaskOutput};
use crate::metrics::{evaluate, MetricsError};
use crate::model::{backward, AdamConfig, MlpParams, ModelError, Optimizer, OptimizerKind};
use crate::seed::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Uniform,
    SizeWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    /// E
    pub local_epochs: usize,
    /// C
    pub client_fraction: f64,
    /// B
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rounds: usize,
    pub weighting: Weighting,
    pub optimizer: OptimizerKind,
    pub hidden_layers: Vec<usize>,
    /// Drives client sampling and local batching.
    pub seed: u64,
    /// Seed for the initial parameters; falls back to `seed`.
    pub init_seed: Option<u64>,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            local_epochs: 5,
            client_fraction: 1.0,
            batch_size: 32,
            learning_rate: 1e-4,
            rounds: 10,
            weighting: Weighting::Uniform,
            optimizer: OptimizerKind::Adam,
            hidden_layers: vec![64, 64],
            seed: 0,
            init_seed: None,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        let bad = |m: &str| Err(FedError::InvalidConfig(m.to_string()));
        if self.local_epochs < 1 {
            return bad("local_epochs must be >= 1");
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return bad("client_fraction must lie in (0, 1]");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and > 0");
        }
        if self.rounds < 1 {
            return bad("rounds must be >= 1");
        }
        if self.hidden_layers.contains(&0) {
            return bad("hidden layer widths must be >= 1");
        }
        Ok(())
    }

    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden_layers.len() + 2);
        sizes.push(input_dim);
        sizes.extend(&self.hidden_layers);
        sizes.push(1);
        sizes
    }

    pub fn initial_seed(&self) -> u64 {
        self.init_seed.unwrap_or(self.seed)
    }

    fn optimizer(&self, len: usize) -> Optimizer {
        let adam = AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        };
        Optimizer::new(self.optimizer, len, adam)
    }
}

#[derive(Debug, Error)]
pub enum FedError {
    #[error("invalid federated config: {0}")]
    InvalidConfig(String),
    #[error("no training clients")]
    NoClients,
    #[error("test set must contain both classes")]
    SingleClassTestSet,
    #[error("client {client_id} diverged in round {round}")]
    ClientDivergence { client_id: u32, round: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Number of clients sampled per round: `max(1, round(C * N))`, rounding half up.
pub fn participants(n_clients: usize, fraction: f64) -> usize {
    ((fraction * n_clients as f64).round() as usize).clamp(1, n_clients.max(1))
}

/// Uniform sample without replacement of client indices, sorted ascending.
pub fn sample_clients(n_clients: usize, fraction: f64, seed: u64, round: u32) -> Vec<usize> {
    let n = participants(n_clients, fraction);
    if n == n_clients {
        return (0..n_clients).collect();
    }
    let mut rng = seed::rng(seed::derive(seed, &[domain::SAMPLE, u64::from(round)]));
    let mut picked = rand::seq::index::sample(&mut rng, n_clients, n).into_vec();
    picked.sort_unstable();
    picked
}

/// Seed for a client's local batching in a given round.
pub fn client_seed(seed: u64, round: u32, hospital_id: u32) -> u64 {
    seed::derive(seed, &[domain::CLIENT, u64::from(round), u64::from(hospital_id)])
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub round: u32,
    /// Hospital ids, ascending.
    pub clients: Vec<u32>,
    pub client_seeds: Vec<u64>,
}

/// Samples the round's participants among `hospital_ids` (in cohort order).
pub fn plan_round(hospital_ids: &[u32], cfg: &FedConfig, round: u32) -> RoundPlan {
    let mut clients: Vec<u32> = sample_clients(hospital_ids.len(), cfg.client_fraction, cfg.seed, round)
        .into_iter()
        .map(|i| hospital_ids[i])
        .collect();
    clients.sort_unstable();
    let client_seeds = clients.iter().map(|&h| client_seed(cfg.seed, round, h)).collect();
    RoundPlan {
        round,
        clients,
        client_seeds,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub params: MlpParams,
    /// Optimizer steps taken.
    pub steps: usize,
}

impl TaskOutput for LocalUpdate {
    fn params(&self) -> &[f64] {
        self.params.as_slice()
    }
}

/// Local training on one client's training records.
///
/// The records are reshuffled at the start of every epoch and cut into
/// batches of `batch_size` (the last may be smaller). The optimizer starts
/// from fresh state.
pub fn train_client(
    shard: &ClientShard,
    theta: &MlpParams,
    cfg: &FedConfig,
    round: u32,
    client_seed: u64,
) -> Result<LocalUpdate, FedError> {
    let records = shard.records();
    if records.is_empty() {
        return Err(FedError::NoClients);
    }
    let mut params = theta.clone();
    let mut opt = cfg.optimizer(params.len());
    let mut rng = seed::rng(client_seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut steps = 0;
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let grad = backward(
                &params,
                batch
                    .iter()
                    .map(|&i| (records[i].features.as_slice(), records[i].label)),
            );
            opt.step(params.as_mut_slice(), &grad)?;
            steps += 1;
        }
    }
    if !params.all_finite() {
        return Err(FedError::ClientDivergence {
            client_id: shard.hospital_id(),
            round,
        });
    }
    Ok(LocalUpdate { params, steps })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregateError {
    Empty,
    LengthMismatch {
        client_id: u64,
        expected: usize,
        found: usize,
    },
    BadWeight {
        client_id: u64,
    },
}

impl std::fmt::Display for AggregateError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AggregateError::Empty => write!(f, "nothing to aggregate"),
            AggregateError::LengthMismatch {
                client_id,
                expected,
                found,
            } => write!(f, "client {client_id} sent {found} parameters, expected {expected}"),
            AggregateError::BadWeight { client_id } => {
                write!(f, "client {client_id} has a non-positive aggregation weight")
            }
        }
    }
}

impl std::error::Error for AggregateError {}

#[derive(Debug, Clone, Copy)]
pub struct ClientUpdate<'a> {
    pub client_id: u64,
    pub params: &'a [f64],
    /// m_k; ignored in uniform mode.
    pub weight: f64,
}

/// Averages client parameters, uniformly or weighted by `m_k / sum(m_j)`.
///
/// Updates are folded in ascending client-id order as a running mean,
/// `mean += (w_k / W_k) * (theta_k - mean)`, so the result does not depend on
/// input order and identical inputs come back unchanged.
pub fn aggregate(updates: &[ClientUpdate<'_>], mode: Weighting) -> Result<Vec<f64>, AggregateError> {
    let mut sorted: Vec<&ClientUpdate<'_>> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let first = sorted.first().ok_or(AggregateError::Empty)?;
    let len = first.params.len();
    let mut mean = vec![0.0; len];
    let mut total = 0.0;
    for u in sorted {
        if u.params.len() != len {
            return Err(AggregateError::LengthMismatch {
                client_id: u.client_id,
                expected: len,
                found: u.params.len(),
            });
        }
        let w = match mode {
            Weighting::Uniform => 1.0,
            Weighting::SizeWeighted => u.weight,
        };
        if !(w > 0.0 && w.is_finite()) {
            return Err(AggregateError::BadWeight { client_id: u.client_id });
        }
        total += w;
        let frac = w / total;
        for (m, x) in mean.iter_mut().zip(u.params) {
            *m += frac * (x - *m);
        }
    }
    Ok(mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub auc: f64,
    pub loss: f64,
    /// Sampled client (hospital) ids, ascending.
    pub clients: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped: Vec<u32>,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub rounds: Vec<RoundRecord>,
    pub final_params: MlpParams,
    pub events: Vec<ExecEvent>,
}

impl ExperimentResult {
    pub fn auc_series(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.auc).collect()
    }

    pub fn final_auc(&self) -> f64 {
        self.rounds.last().map_or(f64::NAN, |r| r.auc)
    }

    /// One JSON object per round. With `timing` off every `duration_ms` is
    /// written as 0 so that the file is a pure function of the inputs.
    pub fn write_jsonl<W: Write>(&self, mut w: W, timing: bool) -> Result<(), FedError> {
        for r in &self.rounds {
            let mut r = r.clone();
            if !timing {
                r.duration_ms = 0;
            }
            serde_json::to_writer(&mut w, &r).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// The federated server loop.
///
/// `clients` are the training portions of the cohort's shards. Size-weighted
/// aggregation uses their record counts as `m_k`.
pub fn run_federated(
    clients: &[ClientShard],
    cfg: &FedConfig,
    test: &Dataset,
    executor: &Executor,
) -> Result<ExperimentResult, FedError> {
    cfg.validate()?;
    if clients.is_empty() || clients.iter().any(|c| c.size() == 0) {
        return Err(FedError::NoClients);
    }
    if !test.has_both_classes() {
        return Err(FedError::SingleClassTestSet);
    }
    let dim = clients[0].schema().len();
    let mut theta = MlpParams::init(&cfg.layer_sizes(dim), cfg.initial_seed())?;
    let layer_sizes = theta.layer_sizes().to_vec();
    let hospital_ids: Vec<u32> = clients.iter().map(ClientShard::hospital_id).collect();
    let shard_of = |h: u32| {
        clients
            .iter()
            .find(|c| c.hospital_id() == h)
            .expect("planned client is in the cohort")
    };

    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut events = Vec::new();
    for r in 1..=cfg.rounds as u32 {
        let started = Instant::now();
        let plan = plan_round(&hospital_ids, cfg, r);
        let tasks: Vec<Task<(&ClientShard, u64)>> = plan
            .clients
            .iter()
            .zip(&plan.client_seeds)
            .map(|(&h, &s)| Task {
                client_id: u64::from(h),
                input: (shard_of(h), s),
            })
            .collect();
        let global = &theta;
        let output = executor.map_round(r, &tasks, |&(shard, s)| {
            train_client(shard, global, cfg, r, s).map_err(|e| match e {
                FedError::ClientDivergence { .. } => TaskFailure::Divergence(e.to_string()),
                other => TaskFailure::Transient(other.to_string()),
            })
        })?;
        let dropped: Vec<u32> = output
            .results
            .iter()
            .filter(|(_, o)| o.done().is_none())
            .map(|(id, _)| *id as u32)
            .collect();
        let merged = reduce_round(r, &output, |id| shard_of(id as u32).size() as f64, cfg.weighting)?;
        theta = MlpParams::from_flat(&layer_sizes, merged)?;
        events.extend(output.events);

        let report = evaluate(&theta, test)?;
        let duration_ms = started.elapsed().as_millis() as u64;
        log::info!(
            "round {r}: auc={:.4} loss={:.4} clients={} dropped={}",
            report.auc,
            report.mean_loss,
            plan.clients.len(),
            dropped.len()
        );
        rounds.push(RoundRecord {
            round: r,
            auc: report.auc,
            loss: report.mean_loss,
            clients: plan.clients,
            dropped,
            duration_ms,
        });
    }
    Ok(ExperimentResult {
        rounds,
        final_params: theta,
        events,
    })
}
