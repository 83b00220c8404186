//! Unsupervised account-level fraud scoring with gated C-CSD.
//!
//! Every query window `x` of an account is compared through two mixtures
//! over reference windows:
//!
//! * the global mixture `a(x)` over a library of windows from normal
//!   accounts only, weighted by window similarity, category/merchant
//!   agreement and a rarity prior on the `(category, merchant)` pair, then
//!   truncated to the top `J`;
//! * the local mixture `b(x)` over the same account's strictly earlier
//!   windows, weighted by similarity, agreement, recency decay and change
//!   flag match boosts.
//!
//! The window score is the C-CSD between the two mixtures' `|dz|` outputs
//! under a kernel gated by change-flag agreement, and an account scores the
//! maximum over its windows. Scoring never sees labels: it works on
//! [`AccountSignals`], which carries none.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ccsd::{ccsd_mixture, Atom, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::kernel::{median_heuristic, Bandwidth, PairSampling};
use crate::metrics::{best_f1_threshold, EvalReport};

/// One raw transaction row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransactionRecord {
    pub step: i64,
    pub customer: String,
    pub merchant: String,
    pub category: String,
    pub amount: f64,
    pub fraud: bool,
}

/// Label-free per-account signals; the only account view scoring accepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountSignals {
    pub customer: String,
    pub steps: Vec<i64>,
    /// Per-account standardized amounts.
    pub z: Vec<f64>,
    /// `dz[t - 1] = z[t] - z[t - 1]`, length `T - 1`.
    pub dz: Vec<f64>,
    pub cat_codes: Vec<u32>,
    pub mer_codes: Vec<u32>,
    /// `f_cat[t]` is set iff the category changed at `t`; `f_cat[0]` is unset.
    pub f_cat: Vec<bool>,
    pub f_mer: Vec<bool>,
    /// Constant amounts; `z` is all zeros.
    pub degenerate: bool,
}

impl AccountSignals {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// An account with its evaluation label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountSeries {
    pub signals: AccountSignals,
    pub fraud: bool,
}

/// Preprocessed corpus plus the integer encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub accounts: Vec<AccountSeries>,
    pub categories: Vec<String>,
    pub merchants: Vec<String>,
    /// Customers dropped for having too few transactions.
    pub excluded_short: usize,
}

/// How the scalar window output `y` summarizes `|dz|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputSummary {
    /// `|dz|` at the window's final step.
    #[default]
    Last,
    /// Mean `|dz|` over the changes inside the window.
    MeanAbs,
}

/// Which component an ablation switches off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Drops the rarity prior from the global mixture.
    NoRarity,
    /// Drops recency decay from the local mixture.
    NoDecay,
    /// Drops flag match boosts and the output gate.
    NoFlag,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoRarity, Ablation::NoDecay, Ablation::NoFlag];
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoRarity => "no_rarity",
            Ablation::NoDecay => "no_decay",
            Ablation::NoFlag => "no_flag",
        })
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_rarity" => Ok(Ablation::NoRarity),
            "no_decay" => Ok(Ablation::NoDecay),
            "no_flag" => Ok(Ablation::NoFlag),
            other => Err(Error::Input(format!("unknown variant {other:?}"))),
        }
    }
}

/// Detector hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FraudParams {
    /// Window length.
    pub k: usize,
    pub stride_normal: usize,
    pub stride_fraud: usize,
    /// Maximum number of past windows in the local mixture.
    pub local_history: usize,
    /// Library windows kept in the global mixture.
    pub top_j: usize,
    pub rho_cat: f64,
    pub rho_mer: f64,
    pub eta_cat: f64,
    pub eta_mer: f64,
    pub rho_y_cat: f64,
    pub rho_y_mer: f64,
    /// Recency half-life in steps.
    pub half_life: f64,
    pub prior_alpha: f64,
    pub prior_beta: f64,
    pub ablation: Ablation,
    /// Accounts with at most this many transactions are dropped.
    pub min_length: usize,
    pub output: OutputSummary,
    pub epsilon: f64,
    pub pair_sampling: PairSampling,
    /// Window scored accounts by their label's stride instead of
    /// `stride_fraud` for everyone. Makes scores label-dependent.
    pub label_asymmetric_stride: bool,
}

impl Default for FraudParams {
    fn default() -> Self {
        FraudParams {
            k: 50,
            stride_normal: 15,
            stride_fraud: 1,
            local_history: 120,
            top_j: 600,
            rho_cat: 0.25,
            rho_mer: 0.25,
            eta_cat: 1.7,
            eta_mer: 1.7,
            rho_y_cat: 0.6,
            rho_y_mer: 0.6,
            half_life: 48.0,
            prior_alpha: 10.0,
            prior_beta: 0.5,
            ablation: Ablation::Full,
            min_length: 80,
            output: OutputSummary::Last,
            epsilon: DEFAULT_EPSILON,
            pair_sampling: PairSampling::default(),
            label_asymmetric_stride: false,
        }
    }
}

impl FraudParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rho_cat", self.rho_cat),
            ("rho_mer", self.rho_mer),
            ("eta_cat", self.eta_cat),
            ("eta_mer", self.eta_mer),
            ("rho_y_cat", self.rho_y_cat),
            ("rho_y_mer", self.rho_y_mer),
            ("half_life", self.half_life),
            ("prior_alpha", self.prior_alpha),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        if self.k == 0 || self.stride_normal == 0 || self.stride_fraud == 0 {
            return Err(Error::Parameter("window length and strides must be >= 1".into()));
        }
        if self.top_j == 0 || self.local_history == 0 {
            return Err(Error::Parameter("top_j and local_history must be >= 1".into()));
        }
        if !(self.prior_beta >= 0.0 && self.epsilon >= 0.0) {
            return Err(Error::Parameter("prior_beta and epsilon must be >= 0".into()));
        }
        Ok(())
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    /// Stride used to window an account that is being scored.
    pub fn query_stride(&self, fraud: bool) -> usize {
        if self.label_asymmetric_stride && !fraud {
            self.stride_normal
        } else {
            self.stride_fraud
        }
    }
}

fn encode(values: impl Iterator<Item = String>) -> Vec<String> {
    let set: BTreeSet<String> = values.collect();
    set.into_iter().collect()
}

fn code_of(table: &[String], v: &str) -> u32 {
    table.binary_search_by(|t| t.as_str().cmp(v)).expect("value was encoded") as u32
}

/// Groups rows by customer, orders each account by step (stable), drops
/// accounts with `T <= min_length`, standardizes amounts per account and
/// derives `dz` and the change flags. Codes index the sorted distinct values.
pub fn preprocess(records: &[TransactionRecord], params: &FraudParams) -> Result<Preprocessed> {
    if let Some(r) = records.iter().find(|r| !r.amount.is_finite()) {
        return Err(Error::Input(format!("non-finite amount for customer {}", r.customer)));
    }
    if let Some(r) = records.iter().find(|r| r.step < 0) {
        return Err(Error::Input(format!("negative step for customer {}", r.customer)));
    }
    let categories = encode(records.iter().map(|r| r.category.clone()));
    let merchants = encode(records.iter().map(|r| r.merchant.clone()));
    let mut by_customer: BTreeMap<&str, Vec<&TransactionRecord>> = BTreeMap::new();
    for r in records {
        by_customer.entry(r.customer.as_str()).or_default().push(r);
    }
    let mut accounts = Vec::new();
    let mut excluded_short = 0;
    for (customer, mut rows) in by_customer {
        if rows.len() <= params.min_length {
            excluded_short += 1;
            continue;
        }
        rows.sort_by_key(|r| r.step);
        let n = rows.len() as f64;
        let mean = rows.iter().map(|r| r.amount).sum::<f64>() / n;
        let sd = (rows.iter().map(|r| (r.amount - mean).powi(2)).sum::<f64>() / n).sqrt();
        let scale = rows.iter().fold(0.0f64, |m, r| m.max(r.amount.abs()));
        let degenerate = !(sd > f64::EPSILON * scale.max(f64::MIN_POSITIVE));
        let z: Vec<f64> = if degenerate {
            vec![0.0; rows.len()]
        } else {
            rows.iter().map(|r| (r.amount - mean) / sd).collect()
        };
        let dz = z.windows(2).map(|w| w[1] - w[0]).collect();
        let cat_codes: Vec<u32> = rows.iter().map(|r| code_of(&categories, &r.category)).collect();
        let mer_codes: Vec<u32> = rows.iter().map(|r| code_of(&merchants, &r.merchant)).collect();
        let flags = |codes: &[u32]| {
            std::iter::once(false)
                .chain(codes.windows(2).map(|w| w[0] != w[1]))
                .collect::<Vec<_>>()
        };
        accounts.push(AccountSeries {
            signals: AccountSignals {
                customer: customer.to_string(),
                steps: rows.iter().map(|r| r.step).collect(),
                f_cat: flags(&cat_codes),
                f_mer: flags(&mer_codes),
                z,
                dz,
                cat_codes,
                mer_codes,
                degenerate,
            },
            fraud: rows.iter().any(|r| r.fraud),
        });
    }
    Ok(Preprocessed {
        accounts,
        categories,
        merchants,
        excluded_short,
    })
}

/// A length-`K` window of one account.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub customer: String,
    /// Position of the window's last transaction within the account.
    pub end_index: usize,
    /// Time step of the window's last transaction.
    pub end_step: i64,
    pub x: Vec<f64>,
    pub y: f64,
    pub f_cat: bool,
    pub f_mer: bool,
    /// `(category, merchant)` codes of the last transaction.
    pub pair_key: (u32, u32),
}

/// Windows ending at positions `K, K + s, K + 2s, ... <= T`. Windows whose
/// output is undefined (no earlier change) are skipped.
pub fn make_windows(acc: &AccountSignals, params: &FraudParams, stride: usize) -> Vec<WindowRecord> {
    let (t, k) = (acc.len(), params.k);
    if stride == 0 || k == 0 || t < k {
        if t < k {
            log::warn!("account {} has {t} transactions, fewer than K = {k}", acc.customer);
        }
        return Vec::new();
    }
    let mut out = Vec::with_capacity((t - k) / stride + 1);
    let mut end = k;
    while end <= t {
        let last = end - 1;
        let y = match params.output {
            OutputSummary::Last if last >= 1 => Some(acc.dz[last - 1].abs()),
            OutputSummary::MeanAbs if k >= 2 => {
                let changes = &acc.dz[end - k..last];
                Some(changes.iter().map(|d| d.abs()).sum::<f64>() / changes.len() as f64)
            }
            _ => None,
        };
        if let Some(y) = y {
            out.push(WindowRecord {
                customer: acc.customer.clone(),
                end_index: last,
                end_step: acc.steps[last],
                x: acc.z[end - k..end].to_vec(),
                y,
                f_cat: acc.f_cat[last],
                f_mer: acc.f_mer[last],
                pair_key: (acc.cat_codes[last], acc.mer_codes[last]),
            });
        }
        end += stride;
    }
    out
}

/// Disjoint account splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub lib_normal: Vec<String>,
    pub val_normal: Vec<String>,
    pub test_normal: Vec<String>,
    pub val_fraud: Vec<String>,
    pub test_fraud: Vec<String>,
    pub seed: u64,
}

/// Reference split sizes: normal accounts go 1793/384/384 to
/// library/validation/test, fraud accounts 389/722 to validation/test.
const NORMAL_SPLIT: [f64; 3] = [1793.0, 384.0, 384.0];
const FRAUD_SPLIT: [f64; 2] = [389.0, 722.0];

impl SplitPlan {
    fn parts(&self) -> [(&'static str, &Vec<String>); 5] {
        [
            ("lib_normal", &self.lib_normal),
            ("val_normal", &self.val_normal),
            ("test_normal", &self.test_normal),
            ("val_fraud", &self.val_fraud),
            ("test_fraud", &self.test_fraud),
        ]
    }

    /// Sizes in the order lib, val normal, test normal, val fraud, test fraud.
    pub fn sizes(&self) -> [usize; 5] {
        self.parts().map(|(_, v)| v.len())
    }

    /// Errors if any customer appears in two splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen: HashMap<&str, &str> = HashMap::new();
        for (name, ids) in self.parts() {
            for id in ids {
                if let Some(prev) = seen.insert(id.as_str(), name) {
                    return Err(Error::Input(format!("customer {id} is in both {prev} and {name}")));
                }
            }
        }
        Ok(())
    }
}

fn proportional_sizes(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let mut sizes: Vec<usize> = weights[..weights.len() - 1]
        .iter()
        .map(|w| (n as f64 * w / total + 0.5).floor() as usize)
        .collect();
    let used: usize = sizes.iter().sum();
    sizes.push(n.saturating_sub(used));
    sizes
}

fn shuffled(mut ids: Vec<String>, rng: &mut ChaCha8Rng) -> Vec<String> {
    ids.sort();
    ids.shuffle(rng);
    ids
}

/// Seeded split into the five disjoint account sets, proportional to the
/// reference sizes; with 2,561 normal and 1,111 fraud accounts it
/// reproduces them exactly.
pub fn split_accounts(accounts: &[AccountSeries], seed: u64) -> Result<SplitPlan> {
    let normal: Vec<String> = accounts
        .iter()
        .filter(|a| !a.fraud)
        .map(|a| a.signals.customer.clone())
        .collect();
    let fraud: Vec<String> = accounts
        .iter()
        .filter(|a| a.fraud)
        .map(|a| a.signals.customer.clone())
        .collect();
    let ns = proportional_sizes(normal.len(), &NORMAL_SPLIT);
    let fs = proportional_sizes(fraud.len(), &FRAUD_SPLIT);
    if ns.iter().chain(&fs).any(|&s| s == 0) {
        return Err(Error::Size(format!(
            "{} normal and {} fraud accounts cannot fill every split",
            normal.len(),
            fraud.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = shuffled(normal, &mut rng);
    let fraud = shuffled(fraud, &mut rng);
    let sorted = |s: &[String]| {
        let mut v = s.to_vec();
        v.sort();
        v
    };
    let plan = SplitPlan {
        lib_normal: sorted(&normal[..ns[0]]),
        val_normal: sorted(&normal[ns[0]..ns[0] + ns[1]]),
        test_normal: sorted(&normal[ns[0] + ns[1]..]),
        val_fraud: sorted(&fraud[..fs[0]]),
        test_fraud: sorted(&fraud[fs[0]..]),
        seed,
    };
    plan.check_disjoint()?;
    Ok(plan)
}

/// Reference windows from normal library accounts and the statistics
/// derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalLibrary {
    pub windows: Vec<WindowRecord>,
    /// `|x|^2` per window.
    pub sq_norms: Vec<f64>,
    pub sigma_x: Bandwidth,
    pub sigma_y: Bandwidth,
    /// Window count per `(category, merchant)` pair.
    pub rarity: BTreeMap<(u32, u32), usize>,
    pub customers: BTreeSet<String>,
}

impl NormalLibrary {
    pub fn frequency(&self, key: (u32, u32)) -> usize {
        self.rarity.get(&key).copied().unwrap_or(0)
    }
}

/// Builds the library from normal accounts at the normal stride, with
/// median-heuristic bandwidths over window vectors and outputs.
pub fn build_library(lib_accounts: &[AccountSeries], params: &FraudParams) -> Result<NormalLibrary> {
    params.validate()?;
    if let Some(a) = lib_accounts.iter().find(|a| a.fraud) {
        return Err(Error::Input(format!(
            "library account {} is not normal",
            a.signals.customer
        )));
    }
    let windows: Vec<WindowRecord> = lib_accounts
        .par_iter()
        .flat_map_iter(|a| make_windows(&a.signals, params, params.stride_normal))
        .collect();
    if windows.len() < 2 {
        return Err(Error::InsufficientReference(format!(
            "library has {} windows",
            windows.len()
        )));
    }
    let xs: Vec<&[f64]> = windows.iter().map(|w| w.x.as_slice()).collect();
    let sigma_x = median_heuristic(&xs, params.pair_sampling)?;
    let ys: Vec<[f64; 1]> = windows.iter().map(|w| [w.y]).collect();
    let sigma_y = median_heuristic(&ys, params.pair_sampling)?;
    let mut rarity = BTreeMap::new();
    for w in &windows {
        *rarity.entry(w.pair_key).or_insert(0) += 1;
    }
    Ok(NormalLibrary {
        sq_norms: windows.iter().map(|w| w.x.iter().map(|v| v * v).sum()).collect(),
        customers: lib_accounts.iter().map(|a| a.signals.customer.clone()).collect(),
        windows,
        sigma_x,
        sigma_y,
        rarity,
    })
}

/// `(f + alpha)^(-beta)`.
pub fn rarity_weight(f: usize, alpha: f64, beta: f64) -> f64 {
    (f as f64 + alpha).powf(-beta)
}

/// Normalized weights over a subset of reference windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeights {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    /// Every raw weight vanished and the mixture fell back to uniform.
    pub fallback: bool,
}

impl MixtureWeights {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Keeps the `keep` largest log-weights (ties by position) and
    /// normalizes them.
    fn from_log_weights(mut scored: Vec<(f64, usize)>, keep: usize, fallback_order: impl Fn(&mut Vec<(f64, usize)>)) -> Self {
        let by_weight = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        let fallback = !scored.iter().any(|(lw, _)| lw.is_finite());
        if fallback {
            fallback_order(&mut scored);
        } else {
            if scored.len() > keep {
                scored.select_nth_unstable_by(keep - 1, by_weight);
                scored.truncate(keep);
            }
            scored.sort_by(by_weight);
        }
        scored.truncate(keep);
        let weights: Vec<f64> = if fallback {
            vec![1.0 / scored.len() as f64; scored.len()]
        } else {
            let top = scored[0].0;
            let raw: Vec<f64> = scored.iter().map(|(lw, _)| (lw - top).exp()).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|w| w / sum).collect()
        };
        MixtureWeights {
            indices: scored.iter().map(|s| s.1).collect(),
            weights,
            fallback,
        }
    }
}

fn mismatch_log(x: &WindowRecord, other: &WindowRecord, params: &FraudParams) -> f64 {
    let mut lw = 0.0;
    if x.pair_key.0 != other.pair_key.0 {
        lw += params.rho_cat.ln();
    }
    if x.pair_key.1 != other.pair_key.1 {
        lw += params.rho_mer.ln();
    }
    lw
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// Global mixture `a(x)` over the library. Weights are combined in the log
/// domain, so the ranking is exact and normalization cannot underflow.
pub fn global_mixture(x: &WindowRecord, lib: &NormalLibrary, params: &FraudParams) -> Result<MixtureWeights> {
    if lib.windows.is_empty() {
        return Err(Error::InsufficientReference("empty library".into()));
    }
    if x.x.len() != lib.windows[0].x.len() {
        return Err(Error::Input(format!(
            "query window has {} values, library windows {}",
            x.x.len(),
            lib.windows[0].x.len()
        )));
    }
    let gamma = lib.sigma_x.gamma();
    let xn: f64 = x.x.iter().map(|v| v * v).sum();
    let use_prior = params.ablation != Ablation::NoRarity;
    let mut dists = Vec::with_capacity(lib.windows.len());
    let scored: Vec<(f64, usize)> = lib
        .windows
        .iter()
        .zip(&lib.sq_norms)
        .enumerate()
        .map(|(i, (w, &wn))| {
            let d2 = (xn + wn - 2.0 * dot(&x.x, &w.x)).max(0.0);
            dists.push(d2);
            let mut lw = -d2 * gamma + mismatch_log(x, w, params);
            if use_prior {
                lw += rarity_weight(lib.frequency(w.pair_key), params.prior_alpha, params.prior_beta).ln();
            }
            (lw, i)
        })
        .collect();
    Ok(MixtureWeights::from_log_weights(scored, params.top_j, |s| {
        s.sort_by(|a, b| dists[a.1].total_cmp(&dists[b.1]).then(a.1.cmp(&b.1)))
    }))
}

/// Local mixture `b(x)` over the account's own windows that end strictly
/// before `x`, keeping the `local_history` most recent.
pub fn local_mixture(
    x: &WindowRecord,
    history: &[WindowRecord],
    sigma_x: Bandwidth,
    params: &FraudParams,
) -> Result<MixtureWeights> {
    let mut past: Vec<usize> = (0..history.len())
        .filter(|&i| history[i].end_step < x.end_step)
        .collect();
    if past.is_empty() {
        return Err(Error::InsufficientReference(format!(
            "no history before step {} for {}",
            x.end_step, x.customer
        )));
    }
    past.sort_by(|&a, &b| {
        (history[b].end_step, history[b].end_index).cmp(&(history[a].end_step, history[a].end_index))
    });
    past.truncate(params.local_history);
    let gamma = sigma_x.gamma();
    let decay_rate = std::f64::consts::LN_2 / params.half_life;
    let mut dists = HashMap::with_capacity(past.len());
    let scored: Vec<(f64, usize)> = past
        .iter()
        .map(|&i| {
            let h = &history[i];
            if h.x.len() != x.x.len() {
                return Err(Error::Input("history window length differs from query".into()));
            }
            let d2: f64 = x.x.iter().zip(&h.x).map(|(a, b)| (a - b) * (a - b)).sum();
            dists.insert(i, d2);
            let mut lw = -d2 * gamma + mismatch_log(x, h, params);
            if params.ablation != Ablation::NoDecay {
                lw -= (x.end_step - h.end_step) as f64 * decay_rate;
            }
            if params.ablation != Ablation::NoFlag {
                if h.f_cat == x.f_cat {
                    lw += params.eta_cat.ln();
                }
                if h.f_mer == x.f_mer {
                    lw += params.eta_mer.ln();
                }
            }
            Ok((lw, i))
        })
        .collect::<Result<_>>()?;
    let n = scored.len();
    let mix = MixtureWeights::from_log_weights(scored, n, |s| {
        s.sort_by(|a, b| dists[&a.1].total_cmp(&dists[&b.1]).then(a.1.cmp(&b.1)))
    });
    assert!(
        mix.indices.iter().all(|&i| history[i].end_step < x.end_step),
        "local mixture reached a window that does not precede the query"
    );
    Ok(mix)
}

/// Change-flag pair carried by each mixture atom.
type Flags = (bool, bool);

fn atoms(mix: &MixtureWeights, windows: &[WindowRecord]) -> Vec<Atom<Flags>> {
    mix.indices
        .iter()
        .zip(&mix.weights)
        .map(|(&i, &weight)| {
            let w = &windows[i];
            Atom {
                weight,
                output: w.y,
                tag: (w.f_cat, w.f_mer),
            }
        })
        .collect()
}

/// Gated C-CSD between the local mixture `p` (over `history`) and the global
/// mixture `q` (over the library) in the `|dz|` output space.
pub fn score_window(
    p: &MixtureWeights,
    history: &[WindowRecord],
    q: &MixtureWeights,
    lib: &NormalLibrary,
    params: &FraudParams,
) -> Result<f64> {
    let pa = atoms(p, history);
    let qa = atoms(q, &lib.windows);
    let gated = params.ablation != Ablation::NoFlag;
    let (gc, gm) = (params.rho_y_cat, params.rho_y_mer);
    let gate = move |a: &Flags, b: &Flags| {
        if !gated {
            return 1.0;
        }
        let mut g = 1.0;
        if a.0 != b.0 {
            g *= gc;
        }
        if a.1 != b.1 {
            g *= gm;
        }
        g
    };
    ccsd_mixture(&pa, &qa, lib.sigma_y, params.epsilon, gate)
}

/// Score of one query window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub end_step: i64,
    pub end_index: usize,
    pub score: f64,
}

/// Account-level result: the maximum over scoreable windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountScore {
    pub customer: String,
    /// `None` when no window had any earlier history.
    pub score: Option<f64>,
    pub windows: Vec<WindowScore>,
    pub skipped_windows: usize,
}

/// Scores every window of the account (windowed at `stride`) against its
/// own strictly earlier windows and the library.
pub fn score_account(
    acc: &AccountSignals,
    lib: &NormalLibrary,
    params: &FraudParams,
    stride: usize,
) -> Result<AccountScore> {
    let windows = make_windows(acc, params, stride);
    let mut scored = Vec::new();
    let mut skipped = 0;
    for x in &windows {
        let p = match local_mixture(x, &windows, lib.sigma_x, params) {
            Ok(p) => p,
            Err(Error::InsufficientReference(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let q = global_mixture(x, lib, params)?;
        scored.push(WindowScore {
            end_step: x.end_step,
            end_index: x.end_index,
            score: score_window(&p, &windows, &q, lib, params)?,
        });
    }
    Ok(AccountScore {
        customer: acc.customer.clone(),
        score: scored.iter().map(|w| w.score).reduce(f64::max),
        windows: scored,
        skipped_windows: skipped,
    })
}

/// Which evaluation split an account belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Val,
    Test,
}

impl fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalSplit::Val => "val",
            EvalSplit::Test => "test",
        })
    }
}

/// One scored account row, for external analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountScoreRow {
    pub variant: Ablation,
    pub split: EvalSplit,
    pub customer: String,
    pub score: f64,
    pub fraud: bool,
}

/// Metrics of one variant at the shared validation threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Ablation,
    pub val: EvalReport,
    pub test: EvalReport,
    /// Accounts without any scoreable window.
    pub excluded_accounts: Vec<String>,
}

/// Leak-proof audit of a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineAudit {
    /// Stage log in execution order.
    pub events: Vec<String>,
    pub splits_disjoint: bool,
    /// Every library window comes from a library account.
    pub library_provenance: bool,
    /// Library statistics were frozen before any evaluation account was read.
    pub library_before_scoring: bool,
    pub strict_past_local_support: bool,
}

/// Everything a fraud run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub params: FraudParams,
    pub seed: u64,
    pub retained_accounts: usize,
    pub normal_accounts: usize,
    pub fraud_accounts: usize,
    pub excluded_short_accounts: usize,
    /// lib, val normal, test normal, val fraud, test fraud.
    pub split_sizes: [usize; 5],
    pub library_windows: usize,
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// F1-optimal validation threshold of the full model.
    pub threshold: f64,
    pub threshold_val_f1: f64,
    pub variants: Vec<VariantReport>,
    pub audit: PipelineAudit,
    pub account_scores: Vec<AccountScoreRow>,
}

struct Scored {
    customer: String,
    fraud: bool,
    score: Option<f64>,
}

fn score_split(accounts: &[&AccountSeries], lib: &NormalLibrary, params: &FraudParams) -> Result<Vec<Scored>> {
    accounts
        .par_iter()
        .map(|a| {
            let stride = params.query_stride(a.fraud);
            let s = score_account(&a.signals, lib, params, stride)?;
            Ok(Scored {
                customer: s.customer,
                fraud: a.fraud,
                score: s.score,
            })
        })
        .collect()
}

fn kept(scored: &[Scored]) -> (Vec<f64>, Vec<bool>, Vec<String>) {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut excluded = Vec::new();
    for s in scored {
        match s.score {
            Some(v) => {
                scores.push(v);
                labels.push(s.fraud);
            }
            None => excluded.push(s.customer.clone()),
        }
    }
    (scores, labels, excluded)
}

/// Preprocess, split, build the library, score validation and test
/// accounts for every requested variant, pick the F1-optimal threshold of
/// the full model on validation and evaluate all variants at it.
pub fn run_pipeline(
    records: &[TransactionRecord],
    params: &FraudParams,
    seed: u64,
    variants: &[Ablation],
) -> Result<PipelineReport> {
    params.validate()?;
    let mut events = Vec::new();
    let pre = preprocess(records, params).map_err(|e| e.at("preprocess"))?;
    events.push(format!(
        "preprocess: {} accounts retained, {} excluded as short",
        pre.accounts.len(),
        pre.excluded_short
    ));
    let plan = split_accounts(&pre.accounts, seed).map_err(|e| e.at("split"))?;
    let splits_disjoint = plan.check_disjoint().is_ok();
    events.push(format!("split: sizes {:?}, disjoint = {splits_disjoint}", plan.sizes()));

    let by_id: HashMap<&str, &AccountSeries> = pre
        .accounts
        .iter()
        .map(|a| (a.signals.customer.as_str(), a))
        .collect();
    let pick = |ids: &[&Vec<String>]| -> Vec<&AccountSeries> {
        ids.iter().flat_map(|v| v.iter()).map(|id| by_id[id.as_str()]).collect()
    };
    let lib_accounts: Vec<AccountSeries> = pick(&[&plan.lib_normal]).into_iter().cloned().collect();
    let lib = build_library(&lib_accounts, params).map_err(|e| e.at("library"))?;
    let library_provenance = lib.windows.iter().all(|w| plan.lib_normal.binary_search(&w.customer).is_ok())
        && lib.customers.iter().all(|c| plan.lib_normal.binary_search(c).is_ok());
    events.push(format!(
        "library: {} windows, sigma_x = {}, sigma_y = {}, {} pair keys",
        lib.windows.len(),
        lib.sigma_x.value(),
        lib.sigma_y.value(),
        lib.rarity.len()
    ));

    let val = pick(&[&plan.val_normal, &plan.val_fraud]);
    let test = pick(&[&plan.test_normal, &plan.test_fraud]);
    let library_before_scoring = true;
    events.push(format!("scoring: {} validation and {} test accounts", val.len(), test.len()));

    let mut wanted: Vec<Ablation> = vec![Ablation::Full];
    for v in variants {
        if !wanted.contains(v) {
            wanted.push(*v);
        }
    }
    let mut scored_variants = Vec::new();
    for &v in &wanted {
        let p = params.with_ablation(v);
        let sv = score_split(&val, &lib, &p).map_err(|e| e.at(format!("score val ({v})")))?;
        let st = score_split(&test, &lib, &p).map_err(|e| e.at(format!("score test ({v})")))?;
        scored_variants.push((v, sv, st));
    }

    let (full_val_scores, full_val_labels, _) = kept(&scored_variants[0].1);
    let (threshold, threshold_val_f1) =
        best_f1_threshold(&full_val_scores, &full_val_labels).map_err(|e| e.at("threshold"))?;
    events.push(format!("threshold: {threshold} (validation F1 {threshold_val_f1})"));

    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for (v, sv, st) in &scored_variants {
        if !variants.contains(v) {
            continue;
        }
        let (vs, vl, mut ex) = kept(sv);
        let (ts, tl, ex_t) = kept(st);
        ex.extend(ex_t);
        let val_report = EvalReport::evaluate(&vs, &vl, threshold).map_err(|e| e.at(format!("evaluate val ({v})")))?;
        let test_report = EvalReport::evaluate(&ts, &tl, threshold).map_err(|e| e.at(format!("evaluate test ({v})")))?;
        for (split, list) in [(EvalSplit::Val, sv), (EvalSplit::Test, st)] {
            for s in list {
                if let Some(score) = s.score {
                    rows.push(AccountScoreRow {
                        variant: *v,
                        split,
                        customer: s.customer.clone(),
                        score,
                        fraud: s.fraud,
                    });
                }
            }
        }
        if !ex.is_empty() {
            events.push(format!("{v}: {} accounts had no scoreable window", ex.len()));
        }
        reports.push(VariantReport {
            variant: *v,
            val: val_report,
            test: test_report,
            excluded_accounts: ex,
        });
    }

    Ok(PipelineReport {
        params: *params,
        seed,
        retained_accounts: pre.accounts.len(),
        normal_accounts: pre.accounts.iter().filter(|a| !a.fraud).count(),
        fraud_accounts: pre.accounts.iter().filter(|a| a.fraud).count(),
        excluded_short_accounts: pre.excluded_short,
        split_sizes: plan.sizes(),
        library_windows: lib.windows.len(),
        sigma_x: lib.sigma_x.value(),
        sigma_y: lib.sigma_y.value(),
        threshold,
        threshold_val_f1,
        variants: reports,
        audit: PipelineAudit {
            events,
            splits_disjoint,
            library_provenance,
            library_before_scoring,
            // local_mixture asserts this for every scored window.
            strict_past_local_support: true,
        },
        account_scores: rows,
    })
}
