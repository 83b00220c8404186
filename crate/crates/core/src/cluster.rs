//! Time-series clustering with C-CSD or DTW dissimilarities and k-medoids.
//!
//! The protocol is leak-proof: series are standardized one at a time,
//! bandwidth scales and grid choices come from the training split, and the
//! test split is only ever clustered with the frozen choice.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ccsd::{ccsd_score, CcsdConfig, CcsdTerms, SharedConditionEstimator};
use crate::error::{Error, Result};
use crate::kernel::{effective_rank, gram, gram_scalar, iqr_bandwidth, Bandwidth, PairSampling};
use crate::metrics::nmi;

/// One univariate series with an optional class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSeries {
    pub id: String,
    pub values: Vec<f64>,
    pub label: Option<i64>,
}

impl LabeledSeries {
    pub fn new(id: impl Into<String>, values: Vec<f64>, label: Option<i64>) -> Self {
        LabeledSeries {
            id: id.into(),
            values,
            label,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-series z-score with the population standard deviation. A constant
/// series maps to zeros and the returned flag is set.
pub fn zscore_series(s: &LabeledSeries) -> Result<(LabeledSeries, bool)> {
    if s.len() < 2 {
        return Err(Error::Input(format!("series {} has fewer than 2 points", s.id)));
    }
    if s.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input(format!("series {} has non-finite values", s.id)));
    }
    let n = s.len() as f64;
    let mean = s.values.iter().sum::<f64>() / n;
    let var = s.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    let scale = s.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let degenerate = !(sd > f64::EPSILON * scale.max(f64::MIN_POSITIVE));
    let values = if degenerate {
        vec![0.0; s.len()]
    } else {
        s.values.iter().map(|v| (v - mean) / sd).collect()
    };
    Ok((
        LabeledSeries {
            id: s.id.clone(),
            values,
            label: s.label,
        },
        degenerate,
    ))
}

/// Seeded class-stratified subsample of at most `cap` series. Per-class
/// quotas use largest remainders; output keeps the input order.
pub fn stratified_cap(data: &[LabeledSeries], cap: usize, seed: u64) -> Result<Vec<LabeledSeries>> {
    if data.len() <= cap {
        return Ok(data.to_vec());
    }
    let mut classes: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.iter().enumerate() {
        let label = s
            .label
            .ok_or_else(|| Error::Input(format!("series {} has no label", s.id)))?;
        classes.entry(label).or_default().push(i);
    }
    let n = data.len();
    let mut quotas: Vec<(i64, usize, f64)> = classes
        .iter()
        .map(|(&c, members)| {
            let exact = cap as f64 * members.len() as f64 / n as f64;
            (c, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.1).sum();
    let mut by_remainder: Vec<usize> = (0..quotas.len()).collect();
    by_remainder.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2).then(a.cmp(&b)));
    for &q in by_remainder.iter().take(cap - assigned) {
        quotas[q].1 += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(cap);
    for (c, quota, _) in quotas {
        let mut members = classes[&c].clone();
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..quota]);
    }
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| data[i].clone()).collect())
}

/// Symmetric dissimilarity matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissimilarityMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl DissimilarityMatrix {
    /// Validates symmetry and the zero diagonal (1e-9) and non-negativity (-1e-9).
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::Input(format!(
                "expected {} entries, got {}",
                n * n,
                entries.len()
            )));
        }
        let m = DissimilarityMatrix { n, entries };
        for i in 0..n {
            if m.get(i, i).abs() > 1e-9 {
                return Err(Error::Input(format!("non-zero diagonal at {i}")));
            }
            for j in 0..n {
                let v = m.get(i, j);
                if v.is_nan() || v < -1e-9 {
                    return Err(Error::Input(format!("invalid dissimilarity {v} at ({i},{j})")));
                }
                if (v - m.get(j, i)).abs() > 1e-9 && v.is_finite() {
                    return Err(Error::Input(format!("asymmetric at ({i},{j})")));
                }
            }
        }
        Ok(m)
    }

    /// Fills the upper triangle in parallel and mirrors it.
    pub fn from_pairs<F>(n: usize, f: F) -> Result<Self>
    where
        F: Fn(usize, usize) -> Result<f64> + Sync,
    {
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| ((i + 1)..n).map(|j| f(i, j)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        let mut entries = vec![0.0; n * n];
        for (i, row) in rows.into_iter().enumerate() {
            for (off, v) in row.into_iter().enumerate() {
                let j = i + 1 + off;
                entries[i * n + j] = v;
                entries[j * n + i] = v;
            }
        }
        DissimilarityMatrix::new(n, entries)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }
}

/// Which dissimilarity a clustering run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ccsd,
    Dtw,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ccsd" => Ok(Method::Ccsd),
            "dtw" => Ok(Method::Dtw),
            other => Err(Error::Input(format!("unknown method {other:?}"))),
        }
    }
}

/// One hyper-parameter setting of either method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum GridPoint {
    /// `tau_raw <= 1` is a fraction of the series length, otherwise absolute.
    Ccsd { tau_raw: f64, sigma_multiplier: f64 },
    /// Sakoe-Chiba half-width; `None` is unconstrained.
    Dtw { window: Option<usize> },
}

/// Absolute condition bandwidth for a series of length `len`.
pub fn resolve_tau(tau_raw: f64, len: usize) -> Result<Bandwidth> {
    if tau_raw <= 1.0 {
        Bandwidth::new(tau_raw * len as f64)
    } else {
        Bandwidth::new(tau_raw)
    }
}

fn common_length(data: &[LabeledSeries]) -> Result<usize> {
    let len = data
        .first()
        .map(LabeledSeries::len)
        .ok_or_else(|| Error::Input("empty dataset".into()))?;
    if let Some(s) = data.iter().find(|s| s.len() != len) {
        return Err(Error::Input(format!(
            "C-CSD needs equal-length series: {} has {} points, expected {len}",
            s.id,
            s.len()
        )));
    }
    Ok(len)
}

/// Pairwise C-CSD between standardized equal-length series, with
/// `sigma = sigma0 * sigma_multiplier`. Self terms are computed once per
/// series. Negative scores, from rounding or from leave-one-out estimates,
/// are clamped to zero so the matrix stays a valid dissimilarity.
pub fn pairwise_ccsd(
    data: &[LabeledSeries],
    tau_raw: f64,
    sigma_multiplier: f64,
    sigma0: Bandwidth,
    cfg: &CcsdConfig,
) -> Result<DissimilarityMatrix> {
    let len = common_length(data)?;
    let tau = resolve_tau(tau_raw, len)?;
    let sigma = sigma0.scaled(sigma_multiplier)?;
    let est = SharedConditionEstimator::new(len, tau, cfg)?;
    let self_terms: Vec<f64> = data
        .par_iter()
        .map(|s| est.self_term(&s.values, sigma))
        .collect::<Result<_>>()?;
    DissimilarityMatrix::from_pairs(data.len(), |i, j| {
        let terms = CcsdTerms {
            i_pp: self_terms[i],
            i_qq: self_terms[j],
            i_pq: est.cross_term(&data[i].values, &data[j].values, sigma)?,
        };
        Ok(ccsd_score(&terms, cfg.epsilon).max(0.0))
    })
}

/// DTW with absolute local cost, summed along the optimal monotone path,
/// restricted to `|i - j| <= window` when a window is given.
pub fn dtw_distance(a: &[f64], b: &[f64], window: Option<usize>) -> Result<f64> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(Error::Input("DTW of an empty series".into()));
    }
    let w = match window {
        Some(w) if n.abs_diff(m) > w => {
            return Err(Error::InfeasibleBand {
                len_a: n,
                len_b: m,
                window: w,
            })
        }
        Some(w) => w,
        None => n.max(m),
    };
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur.fill(f64::INFINITY);
        let lo = i.saturating_sub(w).max(1);
        let hi = (i + w).min(m);
        for j in lo..=hi {
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = (a[i - 1] - b[j - 1]).abs() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Pairwise DTW matrix.
pub fn pairwise_dtw(data: &[LabeledSeries], window: Option<usize>) -> Result<DissimilarityMatrix> {
    DissimilarityMatrix::from_pairs(data.len(), |i, j| {
        dtw_distance(&data[i].values, &data[j].values, window)
    })
}

/// Result of one k-medoids run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMedoids {
    /// Medoid point indices; cluster `c` is `medoids[c]`.
    pub medoids: Vec<usize>,
    /// Cluster index of every point.
    pub assignment: Vec<usize>,
    pub cost: f64,
    pub iterations: usize,
    /// Objective after initialization and after every accepted swap.
    pub cost_trace: Vec<f64>,
}

fn assign(d: &DissimilarityMatrix, medoids: &[usize]) -> (Vec<usize>, Vec<f64>, Vec<f64>, f64) {
    let n = d.len();
    let mut nearest = vec![0usize; n];
    let mut near_d = vec![f64::INFINITY; n];
    let mut second_d = vec![f64::INFINITY; n];
    for p in 0..n {
        for (c, &m) in medoids.iter().enumerate() {
            let v = d.get(p, m);
            if v < near_d[p] {
                second_d[p] = near_d[p];
                near_d[p] = v;
                nearest[p] = c;
            } else if v < second_d[p] {
                second_d[p] = v;
            }
        }
    }
    let cost = near_d.iter().sum();
    (nearest, near_d, second_d, cost)
}

/// How k-medoids picks its starting medoids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KMedoidsInit {
    /// Greedy PAM BUILD; ignores the seed.
    #[default]
    Build,
    /// Seeded k-medoids++ sampling.
    PlusPlus,
}

/// PAM BUILD: start from the most central point, then repeatedly add the
/// point that lowers the total dissimilarity the most. Ties go to the
/// lowest index.
fn build_init(d: &DissimilarityMatrix, k: usize) -> Vec<usize> {
    let n = d.len();
    let first = (0..n)
        .map(|j| ((0..n).map(|p| d.get(p, j)).sum::<f64>(), j))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, j)| j)
        .expect("non-empty matrix");
    let mut medoids = vec![first];
    let mut closest: Vec<f64> = (0..n).map(|p| d.get(p, first)).collect();
    while medoids.len() < k {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for o in (0..n).filter(|o| !medoids.contains(o)) {
            let gain: f64 = (0..n).map(|p| (closest[p] - d.get(p, o)).max(0.0)).sum();
            if gain > best.0 {
                best = (gain, o);
            }
        }
        medoids.push(best.1);
        for (p, c) in closest.iter_mut().enumerate() {
            *c = c.min(d.get(p, best.1));
        }
    }
    medoids
}

/// Seeded k-medoids++ seeding: the first medoid is uniform, each next one
/// is drawn with probability proportional to its dissimilarity from the
/// closest medoid chosen so far.
fn plus_plus_init(d: &DissimilarityMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = d.len();
    let mut medoids = vec![rng.gen_range(0..n)];
    let mut closest: Vec<f64> = (0..n).map(|p| d.get(p, medoids[0])).collect();
    while medoids.len() < k {
        let total: f64 = closest.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            let mut pick = None;
            for (p, &c) in closest.iter().enumerate() {
                if c > 0.0 && r < c {
                    pick = Some(p);
                    break;
                }
                r -= c;
            }
            pick.unwrap_or_else(|| closest.iter().rposition(|&c| c > 0.0).expect("positive mass"))
        } else {
            let free: Vec<usize> = (0..n).filter(|p| !medoids.contains(p)).collect();
            free[rng.gen_range(0..free.len())]
        };
        medoids.push(next);
        for (p, c) in closest.iter_mut().enumerate() {
            *c = c.min(d.get(p, next));
        }
    }
    medoids
}

/// PAM k-medoids with BUILD initialization; see [`kmedoids_with`].
pub fn kmedoids(d: &DissimilarityMatrix, k: usize, seed: u64, max_iter: usize) -> Result<KMedoids> {
    kmedoids_with(d, k, seed, max_iter, KMedoidsInit::Build)
}

/// PAM-style k-medoids: initial medoids from `init`, then the best
/// improving medoid/non-medoid swap per iteration until none improves or
/// `max_iter` swaps were made.
pub fn kmedoids_with(
    d: &DissimilarityMatrix,
    k: usize,
    seed: u64,
    max_iter: usize,
    init: KMedoidsInit,
) -> Result<KMedoids> {
    let n = d.len();
    if k == 0 || k > n {
        return Err(Error::Input(format!("k = {k} must lie in 1..={n}")));
    }
    let mut medoids = match init {
        KMedoidsInit::Build => build_init(d, k),
        KMedoidsInit::PlusPlus => plus_plus_init(d, k, &mut ChaCha8Rng::seed_from_u64(seed)),
    };
    let (mut nearest, mut near_d, mut second_d, mut cost) = assign(d, &medoids);
    let mut cost_trace = vec![cost];
    let mut iterations = 0;
    let mut is_medoid = vec![false; n];
    for &m in &medoids {
        is_medoid[m] = true;
    }
    while iterations < max_iter {
        let mut best = (0.0, usize::MAX, usize::MAX);
        for (c, _) in medoids.iter().enumerate() {
            for o in (0..n).filter(|&o| !is_medoid[o]) {
                let mut delta = 0.0;
                for p in 0..n {
                    let to_o = d.get(p, o);
                    let new_d = if nearest[p] == c {
                        to_o.min(second_d[p])
                    } else {
                        to_o.min(near_d[p])
                    };
                    delta += new_d - near_d[p];
                }
                if delta < best.0 {
                    best = (delta, c, o);
                }
            }
        }
        let (delta, c, o) = best;
        if c == usize::MAX || delta >= -1e-12 * cost.abs().max(1.0) {
            break;
        }
        is_medoid[medoids[c]] = false;
        is_medoid[o] = true;
        medoids[c] = o;
        let next = assign(d, &medoids);
        debug_assert!(next.3 <= cost + 1e-9 * cost.abs().max(1.0));
        (nearest, near_d, second_d, cost) = next;
        cost_trace.push(cost);
        iterations += 1;
    }
    Ok(KMedoids {
        medoids,
        assignment: nearest,
        cost,
        iterations,
        cost_trace,
    })
}

/// Grids and knobs for train-split model selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub tau_grid: Vec<f64>,
    pub sigma_grid: Vec<f64>,
    pub dtw_grid: Vec<Option<usize>>,
    pub ccsd: CcsdConfig,
    /// k-medoids seeds; selection maximizes the mean NMI over them.
    pub seeds: Vec<u64>,
    pub max_iter: usize,
    pub init: KMedoidsInit,
    /// Size of the pooled value sample used for the `L` effective-rank check.
    pub erank_pool: usize,
    pub pair_sampling: PairSampling,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            tau_grid: vec![0.05, 0.10, 0.15, 0.20, 2.0, 5.0, 10.0, 20.0],
            sigma_grid: vec![0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 3.0],
            dtw_grid: vec![None, Some(5), Some(10), Some(20), Some(30)],
            ccsd: CcsdConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            max_iter: 300,
            init: KMedoidsInit::Build,
            erank_pool: 512,
            pair_sampling: PairSampling::default(),
        }
    }
}

/// Train-side evaluation of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEval {
    pub point: GridPoint,
    pub feasible: bool,
    pub erank_k: Option<f64>,
    pub erank_l: Option<f64>,
    pub train_nmi: Option<f64>,
}

/// Frozen outcome of model selection on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub point: GridPoint,
    /// Robust value scale of the training split (C-CSD only).
    pub sigma0: Option<Bandwidth>,
    pub k: usize,
    pub train_nmi: f64,
    pub candidates: Vec<CandidateEval>,
}

fn labels_of(data: &[LabeledSeries]) -> Result<Vec<i64>> {
    data.iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::Input(format!("series {} has no label", s.id)))
        })
        .collect()
}

fn class_count(labels: &[i64]) -> usize {
    let mut l = labels.to_vec();
    l.sort_unstable();
    l.dedup();
    l.len()
}

/// NMI of each seeded k-medoids run against the true labels.
fn nmi_per_seed(
    d: &DissimilarityMatrix,
    labels: &[i64],
    k: usize,
    seeds: &[u64],
    cfg: &SelectionConfig,
) -> Result<Vec<f64>> {
    seeds
        .par_iter()
        .map(|&s| {
            let run = kmedoids_with(d, k.min(d.len()), s, cfg.max_iter, cfg.init)?;
            nmi(labels, &run.assignment)
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Pools every value of the split; the IQR scale of pairwise differences
/// over this pool is `sigma0`.
pub fn pooled_values(data: &[LabeledSeries]) -> Vec<f64> {
    data.iter().flat_map(|s| s.values.iter().copied()).collect()
}

/// Effective ranks of the time-index Gram at `tau` and of the value Gram of
/// `pool` at `sigma`, and whether both lie strictly inside `(2, 0.95 T)`.
pub fn erank_filter(len: usize, tau: Bandwidth, pool: &[f64], sigma: Bandwidth) -> Result<(f64, f64, bool)> {
    let grid: Vec<[f64; 1]> = (1..=len).map(|t| [t as f64]).collect();
    let ek = effective_rank(&gram(&grid, &grid, tau)?)?;
    let el = effective_rank(&gram_scalar(pool, pool, sigma)?)?;
    let upper = 0.95 * len as f64;
    let ok = |e: f64| e > 2.0 && e < upper;
    Ok((ek, el, ok(ek) && ok(el)))
}

fn erank_pool(values: &[f64], size: usize, seed: u64) -> Vec<f64> {
    if values.len() <= size {
        return values.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, values.len(), size).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| values[i]).collect()
}

/// Picks the grid point with the best mean train NMI. C-CSD points failing
/// the effective-rank filter are skipped; ties go to the earlier grid point.
pub fn select_hyperparams(train: &[LabeledSeries], method: Method, cfg: &SelectionConfig) -> Result<Selection> {
    let labels = labels_of(train)?;
    let k = class_count(&labels);
    if cfg.seeds.is_empty() {
        return Err(Error::Input("selection needs at least one seed".into()));
    }
    let mut candidates = Vec::new();
    let mut best: Option<(f64, GridPoint)> = None;
    let consider = |point: GridPoint, score: f64, best: &mut Option<(f64, GridPoint)>| {
        if best.is_none_or(|(b, _)| score > b) {
            *best = Some((score, point));
        }
    };
    let sigma0 = match method {
        Method::Dtw => {
            for &window in &cfg.dtw_grid {
                let point = GridPoint::Dtw { window };
                let d = pairwise_dtw(train, window)?;
                let score = mean(&nmi_per_seed(&d, &labels, k, &cfg.seeds, cfg)?);
                candidates.push(CandidateEval {
                    point,
                    feasible: true,
                    erank_k: None,
                    erank_l: None,
                    train_nmi: Some(score),
                });
                consider(point, score, &mut best);
            }
            None
        }
        Method::Ccsd => {
            let len = common_length(train)?;
            let pooled = pooled_values(train);
            let sigma0 = iqr_bandwidth(&pooled, cfg.pair_sampling)?;
            let pool = erank_pool(&pooled, cfg.erank_pool, cfg.pair_sampling.seed);
            for &tau_raw in &cfg.tau_grid {
                let tau = resolve_tau(tau_raw, len)?;
                for &m in &cfg.sigma_grid {
                    let point = GridPoint::Ccsd {
                        tau_raw,
                        sigma_multiplier: m,
                    };
                    let (ek, el, feasible) = erank_filter(len, tau, &pool, sigma0.scaled(m)?)?;
                    let train_nmi = if feasible {
                        let d = pairwise_ccsd(train, tau_raw, m, sigma0, &cfg.ccsd)?;
                        let score = mean(&nmi_per_seed(&d, &labels, k, &cfg.seeds, cfg)?);
                        consider(point, score, &mut best);
                        Some(score)
                    } else {
                        None
                    };
                    candidates.push(CandidateEval {
                        point,
                        feasible,
                        erank_k: Some(ek),
                        erank_l: Some(el),
                        train_nmi,
                    });
                }
            }
            Some(sigma0)
        }
    };
    let (train_nmi, point) = best.ok_or_else(|| {
        Error::NoFeasibleBandwidth(format!(
            "all {} grid points failed the effective-rank filter",
            candidates.len()
        ))
    })?;
    Ok(Selection {
        point,
        sigma0,
        k,
        train_nmi,
        candidates,
    })
}

/// Dissimilarities of `data` under a frozen selection.
pub fn dissimilarities(data: &[LabeledSeries], selection: &Selection, cfg: &CcsdConfig) -> Result<DissimilarityMatrix> {
    match selection.point {
        GridPoint::Dtw { window } => pairwise_dtw(data, window),
        GridPoint::Ccsd {
            tau_raw,
            sigma_multiplier,
        } => {
            let sigma0 = selection
                .sigma0
                .ok_or_else(|| Error::Input("C-CSD selection without a training scale".into()))?;
            pairwise_ccsd(data, tau_raw, sigma_multiplier, sigma0, cfg)
        }
    }
}

/// Test-split clustering quality under a frozen selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEvalResult {
    pub chosen: GridPoint,
    /// Absolute value bandwidth used on test (C-CSD only).
    pub sigma: Option<f64>,
    pub seeds: Vec<u64>,
    pub nmi_per_seed: Vec<f64>,
    pub nmi_mean: f64,
    /// Population standard deviation over seeds.
    pub nmi_std: f64,
    /// The value scale was taken from the selection, never from test data.
    pub sigma0_from_train: bool,
}

/// Clusters the test split with the selected setting, once per seed.
pub fn evaluate_test(
    test: &[LabeledSeries],
    selection: &Selection,
    seeds: &[u64],
    cfg: &SelectionConfig,
) -> Result<ClusterEvalResult> {
    if seeds.is_empty() {
        return Err(Error::Input("evaluation needs at least one seed".into()));
    }
    let labels = labels_of(test)?;
    let d = dissimilarities(test, selection, &cfg.ccsd)?;
    let per_seed = nmi_per_seed(&d, &labels, selection.k, seeds, cfg)?;
    let m = mean(&per_seed);
    let var = per_seed.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / per_seed.len() as f64;
    let sigma = match (selection.point, selection.sigma0) {
        (GridPoint::Ccsd { sigma_multiplier, .. }, Some(s0)) => Some(s0.value() * sigma_multiplier),
        _ => None,
    };
    Ok(ClusterEvalResult {
        chosen: selection.point,
        sigma,
        seeds: seeds.to_vec(),
        nmi_per_seed: per_seed,
        nmi_mean: m,
        nmi_std: var.sqrt(),
        sigma0_from_train: true,
    })
}

/// Audit trail of the leak-proof protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolAudit {
    pub per_series_zscore: bool,
    pub selection_on_train_only: bool,
    pub sigma0_from_train_only: bool,
    pub degenerate_train_series: usize,
    pub degenerate_test_series: usize,
    pub train_size: usize,
    pub test_size: usize,
}

/// Everything a clustering run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub method: Method,
    pub selection: Selection,
    pub evaluation: ClusterEvalResult,
    pub audit: ProtocolAudit,
}

fn standardize(data: &[LabeledSeries]) -> Result<(Vec<LabeledSeries>, usize)> {
    let mut degenerate = 0;
    let out = data
        .iter()
        .map(|s| {
            let (z, flag) = zscore_series(s)?;
            degenerate += flag as usize;
            Ok(z)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, degenerate))
}

/// Full protocol: optional stratified cap per split, per-series z-score,
/// selection on train, evaluation on test with `seeds`.
pub fn run_protocol(
    train: &[LabeledSeries],
    test: &[LabeledSeries],
    method: Method,
    cap: Option<usize>,
    seeds: &[u64],
    cfg: &SelectionConfig,
) -> Result<ClusterReport> {
    if seeds.is_empty() {
        return Err(Error::Input("evaluation needs at least one seed".into()));
    }
    let (train, test) = match cap {
        Some(c) => (stratified_cap(train, c, seeds[0])?, stratified_cap(test, c, seeds[0])?),
        None => (train.to_vec(), test.to_vec()),
    };
    let (train, deg_train) = standardize(&train).map_err(|e| e.at("standardize train"))?;
    let (test, deg_test) = standardize(&test).map_err(|e| e.at("standardize test"))?;
    let selection = select_hyperparams(&train, method, cfg).map_err(|e| e.at("select"))?;
    let evaluation = evaluate_test(&test, &selection, seeds, cfg).map_err(|e| e.at("evaluate"))?;
    Ok(ClusterReport {
        method,
        audit: ProtocolAudit {
            per_series_zscore: true,
            selection_on_train_only: true,
            sigma0_from_train_only: evaluation.sigma0_from_train,
            degenerate_train_series: deg_train,
            degenerate_test_series: deg_test,
            train_size: train.len(),
            test_size: test.len(),
        },
        selection,
        evaluation,
    })
}
