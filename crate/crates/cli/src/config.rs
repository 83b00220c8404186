//! Run configuration: an optional JSON file merged with command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ccsd_core::{Ablation, FraudParams, Method, SelectionConfig};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "ccsd", version, about = "Conditional Cauchy-Schwarz divergence: clustering and fraud scoring")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Select hyper-parameters on a train split and cluster the test split.
    Cluster(ClusterArgs),
    /// Score accounts of a transaction log and evaluate detection quality.
    Fraud(FraudArgs),
}

#[derive(Debug, Args, Default)]
pub struct ClusterArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// ccsd or dtw.
    #[arg(long)]
    pub method: Option<Method>,
    /// Stratified cap on the number of series per split.
    #[arg(long)]
    pub cap: Option<usize>,
    /// Comma-separated k-medoids seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct FraudArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// full, no_rarity, no_decay, no_flag or all.
    #[arg(long)]
    pub variant: Option<VariantSel>,
    /// Seed of the account split.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write per-account scores to scores.csv.
    #[arg(long)]
    pub scores: bool,
}

/// One ablation variant or all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum VariantSel {
    One(Ablation),
    All,
}

impl VariantSel {
    pub fn variants(self) -> Vec<Ablation> {
        match self {
            VariantSel::One(a) => vec![a],
            VariantSel::All => Ablation::ALL.to_vec(),
        }
    }
}

impl FromStr for VariantSel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(VariantSel::All);
        }
        s.parse::<Ablation>().map(VariantSel::One).map_err(|e| e.to_string())
    }
}

impl TryFrom<String> for VariantSel {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl fmt::Display for VariantSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariantSel::One(a) => a.fmt(f),
            VariantSel::All => f.write_str("all"),
        }
    }
}

impl From<VariantSel> for String {
    fn from(v: VariantSel) -> String {
        v.to_string()
    }
}

/// Shape of the `--config` file. Every field is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub cluster: ClusterSection,
    pub fraud: FraudSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub method: Option<Method>,
    pub cap: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub selection: Option<SelectionConfig>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FraudSection {
    pub data: Option<PathBuf>,
    pub variant: Option<VariantSel>,
    pub seed: Option<u64>,
    pub scores: Option<bool>,
    pub params: Option<FraudParams>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterRun {
    pub train: PathBuf,
    pub test: PathBuf,
    pub method: Method,
    pub cap: Option<usize>,
    pub seeds: Vec<u64>,
    pub selection: SelectionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FraudRun {
    pub data: PathBuf,
    pub variant: VariantSel,
    pub seed: u64,
    pub scores: bool,
    pub params: FraudParams,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Command {
    Cluster(ClusterRun),
    Fraud(FraudRun),
}

/// Fully resolved and validated run. The output directory and thread
/// count do not affect results and are left out of reports.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub out: PathBuf,
    pub threads: Option<usize>,
}

fn required<T>(value: Option<T>, name: &str) -> CliResult<T> {
    value.ok_or_else(|| CliError::Config(format!("missing --{name} (flag or config file)")))
}

fn existing(path: PathBuf, name: &str) -> CliResult<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Config(format!("--{name}: {} does not exist", path.display())))
    }
}

impl RunConfig {
    /// Merges parsed flags over the optional config file and validates.
    pub fn resolve(cli: Cli) -> CliResult<Self> {
        let file = match &cli.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let threads = cli.threads.or(file.threads);
        if threads == Some(0) {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        let (command, out) = match cli.command {
            CliCommand::Cluster(a) => {
                let f = file.cluster;
                let seeds = a.seeds.or(f.seeds).unwrap_or_else(|| vec![0, 1, 2, 3, 4]);
                if seeds.is_empty() {
                    return Err(CliError::Config("--seeds must not be empty".into()));
                }
                let cap = a.cap.or(f.cap);
                if cap == Some(0) {
                    return Err(CliError::Config("--cap must be at least 1".into()));
                }
                let mut selection = f.selection.unwrap_or_default();
                selection.seeds = seeds.clone();
                let run = ClusterRun {
                    train: existing(required(a.train.or(f.train), "train")?, "train")?,
                    test: existing(required(a.test.or(f.test), "test")?, "test")?,
                    method: required(a.method.or(f.method), "method")?,
                    cap,
                    seeds,
                    selection,
                };
                (Command::Cluster(run), a.out)
            }
            CliCommand::Fraud(a) => {
                let f = file.fraud;
                let params = f.params.unwrap_or_default();
                params.validate().map_err(|e| CliError::Config(e.to_string()))?;
                let run = FraudRun {
                    data: existing(required(a.data.or(f.data), "data")?, "data")?,
                    variant: a.variant.or(f.variant).unwrap_or(VariantSel::One(Ablation::Full)),
                    seed: a.seed.or(f.seed).unwrap_or(0),
                    scores: a.scores || f.scores.unwrap_or(false),
                    params,
                };
                (Command::Fraud(run), a.out)
            }
        };
        Ok(RunConfig {
            command,
            out: required(out.or(file.out), "out")?,
            threads,
        })
    }
}
