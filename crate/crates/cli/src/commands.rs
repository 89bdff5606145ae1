use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use fedsim::data::{generate_synthetic, load_csv, load_csv_inferred, partition_by_hospital, prepare, Dataset};
use fedsim::executor::{Executor, RetryPolicy};
use fedsim::fedavg::run_federated;
use fedsim::model::{write_checkpoint_binary, write_checkpoint_json};
use fedsim::scenarios::{build_cohort, cohort_stats, ScenarioError, ScenarioSpec};
use fedsim::sweep::{emit_report, run_sweep, GroupBy, ResultStore, TestPolicy};

use crate::config::RunConfig;

pub fn executor(cfg: &RunConfig, workers: Option<usize>) -> Result<Executor> {
    let workers = workers
        .or(cfg.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from));
    let policy = RetryPolicy {
        max_retries: cfg.max_retries,
    };
    Ok(Executor::new(workers, policy)?)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if let Some(spec) = &cfg.data.synthetic {
        return Ok(generate_synthetic(spec)?);
    }
    let path = cfg.data.csv.as_deref().expect("validated data source");
    let loaded = match &cfg.data.features {
        Some(features) => load_csv(path, features),
        None => load_csv_inferred(path),
    }
    .with_context(|| format!("loading {}", path.display()))?;
    if loaded.dropped_rows > 0 {
        log::warn!(
            "{}: dropped {} rows with missing features",
            path.display(),
            loaded.dropped_rows
        );
    }
    Ok(loaded.dataset)
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn generate(cfg: &RunConfig) -> Result<()> {
    let Some(spec) = &cfg.data.synthetic else {
        bail!("generate needs a [data.synthetic] section");
    };
    let d = generate_synthetic(spec)?;
    let path = cfg.output.path(&cfg.output.dataset);
    create_parent(&path)?;
    d.save_csv(&path)?;
    println!(
        "wrote {} records from {} hospitals to {}",
        d.len(),
        spec.hospital_count,
        path.display()
    );
    Ok(())
}

pub fn scenario(cfg: &RunConfig) -> Result<()> {
    let scenarios = cfg.scenario_list();
    if scenarios.is_empty() {
        bail!("no scenarios configured");
    }
    let shards = partition_by_hospital(&load_dataset(cfg)?);
    let mut out = String::from("scenario,lower,upper,n,mu,sigma\n");
    for s in &scenarios {
        let stats = match build_cohort(&shards, s) {
            Ok(c) => cohort_stats(&c),
            Err(ScenarioError::EmptyCohort { .. }) => {
                log::warn!(
                    "scenario {} ({}..={}): empty cohort",
                    s.display_label(),
                    s.lower,
                    s.upper
                );
                fedsim::scenarios::size_stats(&[])
            }
            Err(e) => return Err(e.into()),
        };
        out.push_str(&format!(
            "{},{},{},{},{:.2},{:.2}\n",
            s.display_label(),
            s.lower,
            s.upper,
            stats.n,
            stats.mu,
            stats.sigma
        ));
    }
    let path = cfg.output.path(&cfg.output.scenarios);
    write_file(&path, out.as_bytes())?;
    print!("{out}");
    Ok(())
}

fn select_scenario(cfg: &RunConfig, label: Option<&str>) -> Result<Option<ScenarioSpec>> {
    let scenarios = cfg.scenario_list();
    match label {
        Some(l) => match scenarios.into_iter().find(|s| s.display_label() == l) {
            Some(s) => Ok(Some(s)),
            None => bail!("no scenario labelled {l:?}"),
        },
        None if scenarios.len() > 1 => bail!("several scenarios configured; pick one with --scenario"),
        None => Ok(scenarios.into_iter().next()),
    }
}

pub fn train(cfg: &RunConfig, ex: &Executor, label: Option<&str>) -> Result<()> {
    let data = prepare(&load_dataset(cfg)?, cfg.data.test_fraction, cfg.seed)?;
    let ids: Vec<u32> = match select_scenario(cfg, label)? {
        Some(s) => build_cohort(&data.shards, &s)?.hospital_ids(),
        None => data.shards.iter().map(|s| s.hospital_id()).collect(),
    };
    let clients = data.train_for(&ids);
    let test = match cfg.data.evaluation {
        TestPolicy::Pooled => data.test.clone(),
        TestPolicy::CohortOnly => data.test_for(&ids),
    };
    let result = run_federated(&clients, &cfg.fed_config(), &test, ex)?;
    for e in &result.events {
        log::warn!("{e}");
    }

    let mut lines = Vec::new();
    result.write_jsonl(&mut lines, cfg.timing)?;
    let results = cfg.output.path(&cfg.output.results);
    write_file(&results, &lines)?;
    let checkpoint = cfg.output.path(&cfg.output.checkpoint);
    create_parent(&checkpoint)?;
    if checkpoint.extension().is_some_and(|e| e == "json") {
        write_checkpoint_json(&result.final_params, &checkpoint)?;
    } else {
        write_checkpoint_binary(&result.final_params, &checkpoint)?;
    }
    println!(
        "{} clients, {} rounds, final AUC {:.4}; wrote {} and {}",
        clients.len(),
        result.rounds.len(),
        result.final_auc(),
        results.display(),
        checkpoint.display()
    );
    Ok(())
}

pub fn sweep(cfg: &RunConfig, ex: &Executor, force: bool) -> Result<()> {
    let grid = cfg.grid();
    if grid.scenarios.is_empty() {
        bail!("no scenarios configured");
    }
    let data = prepare(&load_dataset(cfg)?, cfg.data.test_fraction, cfg.seed)?;
    let store_path = cfg.output.path(&cfg.output.store);
    create_parent(&store_path)?;
    let mut store = ResultStore::open(&store_path)?;
    let out = run_sweep(&grid, &data, cfg.data.evaluation, ex, Some(&mut store), force)?;
    if !out.records.is_empty() {
        write_reports(cfg, &out.records, cfg.sweep.group_by)?;
    }
    println!(
        "{} cells complete ({} reused), {} failed, {} empty scenarios skipped",
        out.records.len(),
        out.reused,
        out.failed.len(),
        out.skipped_scenarios.len()
    );
    if !out.failed.is_empty() {
        let mut err = std::io::stderr().lock();
        for (cell, msg) in &out.failed {
            writeln!(err, "failed: {} ({msg})", cell.label())?;
        }
        bail!("{} sweep cells failed", out.failed.len());
    }
    Ok(())
}

fn write_reports(cfg: &RunConfig, records: &[fedsim::SweepRecord], by: GroupBy) -> Result<()> {
    let report = emit_report(records, by)?;
    write_file(&cfg.output.path(&cfg.output.long_report), report.long_csv.as_bytes())?;
    write_file(
        &cfg.output.path(&cfg.output.summary_report),
        report.summary_csv.as_bytes(),
    )?;
    Ok(())
}

pub fn report(cfg: &RunConfig, by: Option<GroupBy>) -> Result<()> {
    let path = cfg.output.path(&cfg.output.store);
    if !path.exists() {
        bail!("no result store at {}; run `sweep` first", path.display());
    }
    let records = ResultStore::open(&path)?.records();
    write_reports(cfg, &records, by.unwrap_or(cfg.sweep.group_by))?;
    println!("{} records reported", records.len());
    Ok(())
}
