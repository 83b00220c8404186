//! Command-line front end: dataset loaders, run configuration and report
//! emission for the clustering and fraud pipelines of `ccsd-core`.

pub mod config;
pub mod error;
pub mod load;
pub mod run;

pub use config::{Cli, CliCommand, ClusterRun, Command, ConfigFile, FraudRun, RunConfig, VariantSel};
pub use error::{CliError, CliResult};
pub use load::{load_banksim, load_ucr, parse_banksim, parse_ucr};
pub use run::{run, run_cluster, run_fraud, write_atomic, RunOutcome, CLUSTER_REPORT, FRAUD_REPORT, SCORES_CSV};
