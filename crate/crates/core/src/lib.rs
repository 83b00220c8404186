//! Conditional Cauchy-Schwarz divergence (C-CSD) estimators and the two
//! pipelines built on top of them.
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`kernel`] | RBF kernel, Gram matrices, bandwidth heuristics, effective rank |
//! | [`ccsd`] | Nadaraya-Watson weights, Gram-trace terms, symmetric log score, mixture score |
//! | [`cluster`] | Per-series standardization, DTW, k-medoids, leak-proof grid search |
//! | [`fraud`] | Account preprocessing, windowing, global/local mixtures, gated scoring |
//! | [`metrics`] | NMI, ROC-AUC, average precision, confusion counts, F1 threshold search |
//!
//! ```
//! use ccsd_core::{ccsd_pair_series, Bandwidth, CcsdConfig};
//!
//! let a = [0.0, 1.0, 0.0, -1.0];
//! let tau = Bandwidth::new(1.0).unwrap();
//! let sigma = Bandwidth::new(1.0).unwrap();
//! let d = ccsd_pair_series(&a, &a, tau, sigma, &CcsdConfig::default()).unwrap();
//! assert!(d.abs() < 1e-9);
//! ```

// `!(x > 0.0)` style guards deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ccsd;
pub mod cluster;
pub mod error;
pub mod fraud;
pub mod kernel;
pub mod metrics;
pub mod synthetic;

pub use ccsd::{
    ccsd_mixture, ccsd_pair_series, ccsd_score, ccsd_terms, mixture_terms, no_gate, nw_weights,
    Atom, CcsdConfig, CcsdTerms, SharedConditionEstimator, WeightMatrix, DEFAULT_EPSILON,
};
pub use cluster::{
    dissimilarities, dtw_distance, erank_filter, evaluate_test, kmedoids, kmedoids_with, pairwise_ccsd,
    pairwise_dtw, pooled_values, resolve_tau, run_protocol, select_hyperparams, stratified_cap,
    zscore_series, CandidateEval, ClusterEvalResult, ClusterReport, DissimilarityMatrix, GridPoint,
    KMedoids, KMedoidsInit, LabeledSeries, Method, ProtocolAudit, Selection, SelectionConfig,
};
pub use error::{Error, ErrorKind, Result};
pub use fraud::{
    build_library, global_mixture, local_mixture, make_windows, preprocess, rarity_weight,
    run_pipeline, score_account, score_window, split_accounts, AccountScore, AccountScoreRow,
    AccountSeries, AccountSignals, Ablation, EvalSplit, FraudParams, MixtureWeights,
    NormalLibrary, OutputSummary, PipelineAudit, PipelineReport, Preprocessed, SplitPlan,
    TransactionRecord, VariantReport, WindowRecord, WindowScore,
};
pub use kernel::{
    effective_rank, gram, gram_scalar, iqr_bandwidth, median_heuristic, rank_truncate, rbf,
    rbf_scalar, Bandwidth, GramMatrix, PairSampling, DEFAULT_MAX_PAIRS,
};
pub use metrics::{
    average_precision, best_f1_threshold, confusion_at, nmi, roc_auc, ConfusionCounts, EvalReport,
    ThresholdMetrics,
};
