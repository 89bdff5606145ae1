//! In-process map/reduce engine for one federated round.
//!
//! The map phase runs one task per participating client on a bounded pool of
//! worker threads, validates every output, and retries transient failures
//! with unchanged inputs. Results come back sorted by client id, so the
//! reduce phase always folds in the same order and the aggregate is
//! bit-identical for any worker count or failure schedule.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::fedavg::{aggregate, AggregateError, ClientUpdate, Weighting};
use crate::seed::{self, domain};

pub const WORKERS_ENV: &str = "FEDSIM_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 2 }
    }
}

/// How a task attempt failed.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskFailure {
    /// Retried with the same inputs.
    Transient(String),
    /// Not retried; the client is dropped from the round.
    Divergence(String),
}

/// Output of a map task. Outputs whose parameters are not all finite are
/// treated as divergence.
pub trait TaskOutput {
    fn params(&self) -> &[f64];

    fn is_valid(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }
}

impl TaskOutput for Vec<f64> {
    fn params(&self) -> &[f64] {
        self
    }
}

/// Decides whether an attempt fails before it runs. Must be deterministic in
/// its arguments.
pub trait FaultInjector: Send + Sync {
    fn fails(&self, round: u32, client_id: u64, attempt: u32) -> bool;
}

/// Fails the first `failures_per_task` attempts of a pseudo-random
/// `fraction` of tasks.
#[derive(Debug, Clone)]
pub struct InjectedFaults {
    pub fraction: f64,
    pub failures_per_task: u32,
    pub seed: u64,
}

impl InjectedFaults {
    pub fn is_faulty(&self, round: u32, client_id: u64) -> bool {
        let h = seed::derive(self.seed, &[domain::FAULT, u64::from(round), client_id]);
        let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
        unit < self.fraction
    }
}

impl FaultInjector for InjectedFaults {
    fn fails(&self, round: u32, client_id: u64, attempt: u32) -> bool {
        attempt < self.failures_per_task && self.is_faulty(round, client_id)
    }
}

#[derive(Debug, Clone)]
pub struct Task<I> {
    pub client_id: u64,
    pub input: I,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome<O> {
    Done(O),
    Dropped { reason: String },
}

impl<O> Outcome<O> {
    pub fn done(&self) -> Option<&O> {
        match self {
            Outcome::Done(o) => Some(o),
            Outcome::Dropped { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Retry,
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecEvent {
    pub round: u32,
    pub client_id: u64,
    pub kind: EventKind,
    pub attempt: u32,
}

impl fmt::Display for ExecEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let event = match self.kind {
            EventKind::Retry => "retry",
            EventKind::Drop => "drop",
        };
        write!(
            f,
            "round={} client={} event={} attempt={}",
            self.round, self.client_id, event, self.attempt
        )
    }
}

#[derive(Debug, Clone)]
pub struct RoundOutput<O> {
    /// Sorted by client id.
    pub results: Vec<(u64, Outcome<O>)>,
    pub events: Vec<ExecEvent>,
    /// Total task executions, including retries.
    pub attempts: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum ExecError {
    #[error("round {0}: no tasks")]
    NoTasks(u32),
    #[error("worker count must be >= 1")]
    NoWorkers,
    #[error("round {round}: clients {clients:?} exhausted their retries")]
    RetriesExhausted { round: u32, clients: Vec<u64> },
    #[error("round {0}: every client was dropped")]
    AllDropped(u32),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
}

#[derive(Clone)]
pub struct Executor {
    workers: usize,
    policy: RetryPolicy,
    faults: Option<Arc<dyn FaultInjector>>,
}

impl fmt::Debug for Executor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Executor")
            .field("workers", &self.workers)
            .field("policy", &self.policy)
            .field("faults", &self.faults.is_some())
            .finish()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self {
            workers: 1,
            policy: RetryPolicy::default(),
            faults: None,
        }
    }
}

struct TaskResult<O> {
    client_id: u64,
    outcome: Result<Outcome<O>, ()>,
    events: Vec<ExecEvent>,
    attempts: usize,
}

impl Executor {
    pub fn new(workers: usize, policy: RetryPolicy) -> Result<Self, ExecError> {
        if workers == 0 {
            return Err(ExecError::NoWorkers);
        }
        Ok(Self {
            workers,
            policy,
            faults: None,
        })
    }

    pub fn with_faults(mut self, faults: Arc<dyn FaultInjector>) -> Self {
        self.faults = Some(faults);
        self
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn policy(&self) -> RetryPolicy {
        self.policy
    }

    fn run_task<I, O, F>(&self, round: u32, task: &Task<I>, f: &F) -> TaskResult<O>
    where
        O: TaskOutput,
        F: Fn(&I) -> Result<O, TaskFailure>,
    {
        let mut events = Vec::new();
        let mut attempt = 0u32;
        loop {
            let injected = self
                .faults
                .as_ref()
                .is_some_and(|fi| fi.fails(round, task.client_id, attempt));
            let result = if injected {
                Err(TaskFailure::Transient("injected fault".into()))
            } else {
                f(&task.input)
            };
            let event = |kind| ExecEvent {
                round,
                client_id: task.client_id,
                kind,
                attempt,
            };
            let outcome = match result {
                Ok(out) if out.is_valid() => Outcome::Done(out),
                Ok(_) => Outcome::Dropped {
                    reason: "non-finite parameters".into(),
                },
                Err(TaskFailure::Divergence(reason)) => Outcome::Dropped { reason },
                Err(TaskFailure::Transient(reason)) => {
                    if attempt < self.policy.max_retries {
                        let e = event(EventKind::Retry);
                        log::warn!("{e} reason={reason}");
                        events.push(e);
                        attempt += 1;
                        continue;
                    }
                    log::error!("round={round} client={} retries exhausted: {reason}", task.client_id);
                    return TaskResult {
                        client_id: task.client_id,
                        outcome: Err(()),
                        events,
                        attempts: attempt as usize + 1,
                    };
                }
            };
            if let Outcome::Dropped { reason } = &outcome {
                let e = event(EventKind::Drop);
                log::warn!("{e} reason={reason}");
                events.push(e);
            }
            return TaskResult {
                client_id: task.client_id,
                outcome: Ok(outcome),
                events,
                attempts: attempt as usize + 1,
            };
        }
    }

    /// Runs every task with at most `workers` in flight and returns the
    /// outcomes keyed and sorted by client id.
    pub fn map_round<I, O, F>(&self, round: u32, tasks: &[Task<I>], f: F) -> Result<RoundOutput<O>, ExecError>
    where
        I: Sync,
        O: TaskOutput + Send,
        F: Fn(&I) -> Result<O, TaskFailure> + Sync,
    {
        if tasks.is_empty() {
            return Err(ExecError::NoTasks(round));
        }
        let workers = self.workers.min(tasks.len());
        let mut finished: Vec<TaskResult<O>> = if workers == 1 {
            tasks.iter().map(|t| self.run_task(round, t, &f)).collect()
        } else {
            let next = AtomicUsize::new(0);
            let sink = Mutex::new(Vec::with_capacity(tasks.len()));
            std::thread::scope(|scope| {
                for _ in 0..workers {
                    scope.spawn(|| loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(task) = tasks.get(i) else { break };
                        let r = self.run_task(round, task, &f);
                        sink.lock().expect("result sink poisoned").push(r);
                    });
                }
            });
            sink.into_inner().expect("result sink poisoned")
        };
        finished.sort_by_key(|r| r.client_id);

        let exhausted: Vec<u64> = finished
            .iter()
            .filter(|r| r.outcome.is_err())
            .map(|r| r.client_id)
            .collect();
        if !exhausted.is_empty() {
            return Err(ExecError::RetriesExhausted {
                round,
                clients: exhausted,
            });
        }
        let attempts = finished.iter().map(|r| r.attempts).sum();
        let mut events = Vec::new();
        let mut results = Vec::with_capacity(finished.len());
        for r in finished {
            events.extend(r.events);
            results.push((r.client_id, r.outcome.expect("checked above")));
        }
        Ok(RoundOutput {
            results,
            events,
            attempts,
        })
    }
}

/// Aggregates the non-dropped results in client-id order.
///
/// `weight` supplies `m_k` for a client id; it is only consulted in
/// size-weighted mode.
pub fn reduce_round<O, W>(
    round: u32,
    output: &RoundOutput<O>,
    weight: W,
    mode: Weighting,
) -> Result<Vec<f64>, ExecError>
where
    O: TaskOutput,
    W: Fn(u64) -> f64,
{
    let updates: Vec<ClientUpdate<'_>> = output
        .results
        .iter()
        .filter_map(|(id, o)| {
            o.done().map(|out| ClientUpdate {
                client_id: *id,
                params: out.params(),
                weight: weight(*id),
            })
        })
        .collect();
    if updates.is_empty() {
        return Err(ExecError::AllDropped(round));
    }
    Ok(aggregate(&updates, mode)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    fn tasks(n: u64) -> Vec<Task<u64>> {
        (0..n).map(|i| Task { client_id: i, input: i }).collect()
    }

    fn work(i: &u64) -> Result<Vec<f64>, TaskFailure> {
        Ok(vec![*i as f64 * 0.1, (*i as f64).sqrt()])
    }

    #[test]
    fn results_sorted_and_worker_independent() {
        let t: Vec<Task<u64>> = tasks(17).into_iter().rev().collect();
        let one = Executor::new(1, RetryPolicy::default())
            .unwrap()
            .map_round(1, &t, work)
            .unwrap();
        let eight = Executor::new(8, RetryPolicy::default())
            .unwrap()
            .map_round(1, &t, work)
            .unwrap();
        let ids: Vec<u64> = one.results.iter().map(|r| r.0).collect();
        assert_eq!(ids, (0..17).collect::<Vec<_>>());
        assert_eq!(one.results, eight.results);
        assert_eq!(one.attempts, 17);
    }

    #[test]
    fn nan_output_is_dropped() {
        let ex = Executor::new(2, RetryPolicy::default()).unwrap();
        let out = ex
            .map_round(3, &tasks(3), |i| Ok(if *i == 1 { vec![f64::NAN] } else { vec![1.0] }))
            .unwrap();
        assert!(matches!(out.results[1].1, Outcome::Dropped { .. }));
        assert_eq!(out.events.len(), 1);
        assert_eq!(out.events[0].to_string(), "round=3 client=1 event=drop attempt=0");
    }

    #[test]
    fn divergence_is_not_retried() {
        let calls = AtomicU32::new(0);
        let ex = Executor::new(1, RetryPolicy::default()).unwrap();
        let out = ex
            .map_round(1, &tasks(1), |_| -> Result<Vec<f64>, _> {
                calls.fetch_add(1, Ordering::SeqCst);
                Err(TaskFailure::Divergence("boom".into()))
            })
            .unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        assert_eq!(out.results[0].1, Outcome::Dropped { reason: "boom".into() });
    }

    #[test]
    fn transient_failure_is_retried_then_exhausted() {
        let ex = Executor::new(4, RetryPolicy { max_retries: 2 }).unwrap();
        let calls = AtomicU32::new(0);
        let err = ex
            .map_round(5, &tasks(3), |i| {
                if *i == 2 {
                    calls.fetch_add(1, Ordering::SeqCst);
                    Err(TaskFailure::Transient("flaky".into()))
                } else {
                    work(i)
                }
            })
            .unwrap_err();
        assert_eq!(
            err,
            ExecError::RetriesExhausted {
                round: 5,
                clients: vec![2]
            }
        );
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn injected_faults_are_transparent() {
        let faults = Arc::new(InjectedFaults {
            fraction: 0.5,
            failures_per_task: 2,
            seed: 1,
        });
        let clean = Executor::new(3, RetryPolicy { max_retries: 2 }).unwrap();
        let faulty = clean.clone().with_faults(faults.clone());
        let t = tasks(20);
        let a = clean.map_round(1, &t, work).unwrap();
        let b = faulty.map_round(1, &t, work).unwrap();
        assert_eq!(a.results, b.results);
        let hit = (0..20).filter(|&c| faults.is_faulty(1, c)).count();
        assert!(hit > 0);
        assert_eq!(b.events.len(), 2 * hit);
        assert_eq!(b.attempts, 20 + 2 * hit);

        let strict = Executor::new(3, RetryPolicy { max_retries: 1 })
            .unwrap()
            .with_faults(faults);
        assert!(matches!(
            strict.map_round(1, &t, work),
            Err(ExecError::RetriesExhausted { .. })
        ));
    }

    #[test]
    fn rejects_empty_and_zero_workers() {
        assert_eq!(
            Executor::new(0, RetryPolicy::default()).unwrap_err(),
            ExecError::NoWorkers
        );
        let ex = Executor::default();
        assert_eq!(ex.map_round(2, &tasks(0), work).unwrap_err(), ExecError::NoTasks(2));
    }

    fn output(rows: Vec<(u64, Outcome<Vec<f64>>)>) -> RoundOutput<Vec<f64>> {
        RoundOutput {
            results: rows,
            events: vec![],
            attempts: 0,
        }
    }

    #[test]
    fn reduce_single_is_identity() {
        let o = output(vec![(4, Outcome::Done(vec![0.1, 0.7, -3.0]))]);
        assert_eq!(
            reduce_round(1, &o, |_| 1.0, Weighting::Uniform).unwrap(),
            vec![0.1, 0.7, -3.0]
        );
    }

    #[test]
    fn reduce_two_uniform() {
        let o = output(vec![
            (1, Outcome::Done(vec![1.0, 3.0])),
            (2, Outcome::Done(vec![3.0, 5.0])),
        ]);
        assert_eq!(
            reduce_round(1, &o, |_| 1.0, Weighting::Uniform).unwrap(),
            vec![2.0, 4.0]
        );
    }

    #[test]
    fn reduce_skips_dropped() {
        let vals = [[1.0, 2.0], [3.0, -1.0], [100.0, 100.0], [5.0, 0.5], [7.0, 4.5]];
        let rows = vals
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let o = if i == 2 {
                    Outcome::Dropped { reason: "x".into() }
                } else {
                    Outcome::Done(v.to_vec())
                };
                (i as u64, o)
            })
            .collect();
        let got = reduce_round(1, &output(rows), |_| 1.0, Weighting::Uniform).unwrap();
        // (1 + 3 + 5 + 7) / 4, (2 - 1 + 0.5 + 4.5) / 4
        assert!((got[0] - 4.0).abs() < 1e-12);
        assert!((got[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn reduce_all_dropped_fails() {
        let o = output(vec![(1, Outcome::Dropped { reason: "x".into() })]);
        assert_eq!(
            reduce_round(9, &o, |_| 1.0, Weighting::Uniform).unwrap_err(),
            ExecError::AllDropped(9)
        );
    }
}
