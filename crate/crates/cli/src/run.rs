//! Orchestration of both commands and atomic report emission.

use std::io::Write;
use std::path::{Path, PathBuf};

use ccsd_core::{run_pipeline, run_protocol, AccountScoreRow, ClusterReport, Method, PipelineReport};
use log::info;
use serde::Serialize;

use crate::config::{ClusterRun, Command, FraudRun, RunConfig};
use crate::error::{CliError, CliResult};
use crate::load::{load_banksim, load_ucr};

pub const CLUSTER_REPORT: &str = "cluster_report.json";
pub const FRAUD_REPORT: &str = "fraud_report.json";
pub const SCORES_CSV: &str = "scores.csv";

#[derive(Serialize)]
struct Report<'a, T> {
    config: &'a Command,
    report: &'a T,
}

/// Files written by a successful run and a one-paragraph summary.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

fn to_json<T: Serialize>(config: &Command, report: &T) -> CliResult<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(&Report { config, report })
        .map_err(|e| CliError::Config(format!("report serialization failed: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn run_cluster(run: &ClusterRun) -> CliResult<ClusterReport> {
    let (train, test) = load_ucr(&run.train, &run.test, run.method == Method::Dtw)?;
    run_protocol(&train, &test, run.method, run.cap, &run.seeds, &run.selection).map_err(CliError::core("cluster"))
}

pub fn run_fraud(run: &FraudRun) -> CliResult<PipelineReport> {
    let records = load_banksim(&run.data)?;
    run_pipeline(&records, &run.params, run.seed, &run.variant.variants()).map_err(CliError::core("fraud"))
}

fn scores_csv(rows: &[AccountScoreRow]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Config(format!("score table serialization failed: {e}"));
    w.write_record(["variant", "split", "customer", "score", "label"]).map_err(fail)?;
    for r in rows {
        w.write_record([
            r.variant.to_string(),
            r.split.to_string(),
            r.customer.clone(),
            r.score.to_string(),
            u8::from(r.fraud).to_string(),
        ])
        .map_err(fail)?;
    }
    w.into_inner().map_err(|e| CliError::Config(format!("score table serialization failed: {e}")))
}

fn execute(cfg: &RunConfig) -> CliResult<RunOutcome> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    match &cfg.command {
        Command::Cluster(run) => {
            let report = run_cluster(run)?;
            let path = cfg.out.join(CLUSTER_REPORT);
            write_atomic(&path, &to_json(&cfg.command, &report)?)?;
            let e = &report.evaluation;
            let summary = format!(
                "{:?} chosen {:?}: test NMI {:.4} +/- {:.4} over {} seeds",
                report.method,
                e.chosen,
                e.nmi_mean,
                e.nmi_std,
                e.seeds.len()
            );
            Ok(RunOutcome {
                files: vec![path],
                summary,
            })
        }
        Command::Fraud(run) => {
            let mut report = run_fraud(run)?;
            let rows = std::mem::take(&mut report.account_scores);
            let path = cfg.out.join(FRAUD_REPORT);
            write_atomic(&path, &to_json(&cfg.command, &report)?)?;
            let mut files = vec![path];
            if run.scores {
                let p = cfg.out.join(SCORES_CSV);
                write_atomic(&p, &scores_csv(&rows)?)?;
                files.push(p);
            }
            let mut summary = format!("threshold {:.6}", report.threshold);
            for v in &report.variants {
                summary.push_str(&format!(
                    "\n{}: val AUC {:.4} AP {:.4} | test AUC {:.4} AP {:.4} P {:.4} R {:.4} F1 {:.4}",
                    v.variant, v.val.auc, v.val.ap, v.test.auc, v.test.ap, v.test.precision, v.test.recall, v.test.f1
                ));
            }
            Ok(RunOutcome { files, summary })
        }
    }
}

/// Runs a resolved configuration on a worker pool of the requested size.
pub fn run(cfg: &RunConfig) -> CliResult<RunOutcome> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
    info!("running with {} worker threads", pool.current_num_threads());
    let outcome = pool.install(|| execute(cfg))?;
    for f in &outcome.files {
        info!("wrote {}", f.display());
    }
    Ok(outcome)
}
