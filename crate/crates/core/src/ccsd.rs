//! Conditional Cauchy-Schwarz divergence estimators.
//!
//! With Nadaraya-Watson weight matrices `A` (reference conditions x samples
//! of `p`) and `B` (same for `q`) and output Gram blocks `L_pp`, `L_qq`,
//! `L_pq`, the three kernel expectations are
//!
//! ```text
//! I_pp = tr(L_pp A'A) / n_r,   I_qq = tr(L_qq B'B) / n_r,   I_pq = tr(L_pq A'B) / n_r
//! ```
//!
//! and the divergence is scored in the ridged symmetric log form
//!
//! ```text
//! D = -1/2 [ log(I_pp + eps) + log(I_qq + eps) - 2 log(I_pq + eps) ]
//! ```
//!
//! which is non-negative whenever `I_pq^2 <= I_pp I_qq` and reduces to
//! `-log(I_pq / sqrt(I_pp I_qq))` at `eps = 0`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{gram_scalar, rank_truncate, rbf_scalar, sq_dist, Bandwidth, GramMatrix};

/// Default ridge, far below any Gram value met in practice.
pub const DEFAULT_EPSILON: f64 = 1e-10;

/// Estimator knobs shared by every C-CSD evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CcsdConfig {
    /// Ridge added to each term inside the logarithms.
    pub epsilon: f64,
    /// Drop exact self-terms when both sides share their condition sample.
    pub loo: bool,
    /// Fraction of the trace kept when truncating `L_pp` and `L_qq`; 1 disables.
    pub keep_fraction: f64,
}

impl Default for CcsdConfig {
    fn default() -> Self {
        CcsdConfig {
            epsilon: DEFAULT_EPSILON,
            loo: false,
            keep_fraction: 1.0,
        }
    }
}

impl CcsdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Parameter(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::Parameter(format!(
                "keep_fraction must lie in (0, 1], got {}",
                self.keep_fraction
            )));
        }
        Ok(())
    }
}

/// Row-stochastic Nadaraya-Watson weights: one row per reference condition,
/// one column per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    entries: DMatrix<f64>,
}

impl WeightMatrix {
    /// Wraps a matrix after checking non-negativity and unit row sums.
    pub fn from_matrix(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::Input("weight matrix must be non-empty".into()));
        }
        for row in entries.row_iter() {
            if row.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
                return Err(Error::Input("weights must be finite and non-negative".into()));
            }
            let s = row.sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Input(format!("weight row sums to {s}, not 1")));
            }
        }
        Ok(WeightMatrix { entries })
    }

    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries[(r, c)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }
}

/// The three kernel expectations entering the divergence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CcsdTerms {
    pub i_pp: f64,
    pub i_qq: f64,
    pub i_pq: f64,
}

impl CcsdTerms {
    /// `I_pq^2 <= I_pp I_qq` up to a relative tolerance.
    pub fn satisfies_cauchy_schwarz(&self, rel_tol: f64) -> bool {
        self.i_pq <= (self.i_pp * self.i_qq).sqrt() * (1.0 + rel_tol)
    }

    /// Multiplies all three terms by the same constant.
    pub fn scaled(self, c: f64) -> CcsdTerms {
        CcsdTerms {
            i_pp: self.i_pp * c,
            i_qq: self.i_qq * c,
            i_pq: self.i_pq * c,
        }
    }
}

fn shared_dim<V: AsRef<[f64]>>(xs: &[V], what: &str) -> Result<usize> {
    let d = xs
        .first()
        .map(|x| x.as_ref().len())
        .ok_or_else(|| Error::Input(format!("{what} is empty")))?;
    if xs.iter().any(|x| x.as_ref().len() != d) {
        return Err(Error::Input(format!("{what} has mixed dimensions")));
    }
    Ok(d)
}

/// `W[l][i] = K_tau(ref_l, sample_i) / sum_i' K_tau(ref_l, sample_i')`.
///
/// Each row is shifted by its smallest squared distance before
/// exponentiating, so narrow bandwidths do not underflow the normalizer.
pub fn nw_weights<V: AsRef<[f64]>>(
    ref_conditions: &[V],
    sample_conditions: &[V],
    tau: Bandwidth,
) -> Result<WeightMatrix> {
    let dr = shared_dim(ref_conditions, "reference conditions")?;
    let ds = shared_dim(sample_conditions, "sample conditions")?;
    if dr != ds {
        return Err(Error::Input(format!("condition dimension mismatch: {dr} vs {ds}")));
    }
    let gamma = tau.gamma();
    let n = sample_conditions.len();
    let mut entries = DMatrix::zeros(ref_conditions.len(), n);
    let mut d2 = vec![0.0; n];
    for (l, r) in ref_conditions.iter().enumerate() {
        for (d, s) in d2.iter_mut().zip(sample_conditions) {
            *d = sq_dist(r.as_ref(), s.as_ref());
        }
        let shift = d2.iter().copied().fold(f64::INFINITY, f64::min);
        let mut sum = 0.0;
        for (i, &d) in d2.iter().enumerate() {
            let w = (-(d - shift) * gamma).exp();
            entries[(l, i)] = w;
            sum += w;
        }
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::DegenerateKernel(format!(
                "row {l} normalizer is {sum}; condition bandwidth {} unusable",
                tau.value()
            )));
        }
        for i in 0..n {
            entries[(l, i)] /= sum;
        }
    }
    Ok(WeightMatrix { entries })
}

/// Per-row quadratic forms `a_l' L b_l`, optionally without the `i == j`
/// terms and renormalized by the off-diagonal weight mass.
fn averaged_quadratic_form(a: &WeightMatrix, l: &DMatrix<f64>, b: &WeightMatrix, loo: bool) -> f64 {
    let al = a.as_matrix() * l;
    let bm = b.as_matrix();
    let n_r = a.rows();
    let mut total = 0.0;
    for row in 0..n_r {
        let full: f64 = al.row(row).iter().zip(bm.row(row).iter()).map(|(x, y)| x * y).sum();
        if !loo {
            total += full;
            continue;
        }
        let mut self_terms = 0.0;
        let mut self_mass = 0.0;
        for i in 0..a.cols() {
            let w = a.get(row, i) * b.get(row, i);
            self_terms += w * l[(i, i)];
            self_mass += w;
        }
        let rest = 1.0 - self_mass;
        // A point-mass row has no off-diagonal pairs left to average.
        if rest > 1e-12 {
            total += (full - self_terms) / rest;
        } else {
            total += full;
        }
    }
    total / n_r as f64
}

/// Gram-trace expectations `I_pp`, `I_qq`, `I_pq`.
///
/// Leave-one-out applies only when `A` and `B` are the same weight matrix,
/// i.e. both sides are indexed by one shared condition sample; self-terms
/// are then removed from all three blocks so identical inputs still give
/// identical terms.
pub fn ccsd_terms(
    a: &WeightMatrix,
    b: &WeightMatrix,
    l_pp: &GramMatrix,
    l_qq: &GramMatrix,
    l_pq: &GramMatrix,
    cfg: &CcsdConfig,
) -> Result<CcsdTerms> {
    cfg.validate()?;
    let (n_r, n_p, n_q) = (a.rows(), a.cols(), b.cols());
    if b.rows() != n_r {
        return Err(Error::Input(format!(
            "A has {n_r} reference rows but B has {}",
            b.rows()
        )));
    }
    let shape_ok = |g: &GramMatrix, r: usize, c: usize| g.rows() == r && g.cols() == c;
    if !shape_ok(l_pp, n_p, n_p) || !shape_ok(l_qq, n_q, n_q) || !shape_ok(l_pq, n_p, n_q) {
        return Err(Error::Input(format!(
            "Gram shapes {}x{}, {}x{}, {}x{} do not conform to n_p={n_p}, n_q={n_q}",
            l_pp.rows(),
            l_pp.cols(),
            l_qq.rows(),
            l_qq.cols(),
            l_pq.rows(),
            l_pq.cols()
        )));
    }
    let (l_pp, l_qq) = if cfg.keep_fraction < 1.0 {
        (
            rank_truncate(l_pp, cfg.keep_fraction)?,
            rank_truncate(l_qq, cfg.keep_fraction)?,
        )
    } else {
        (l_pp.clone(), l_qq.clone())
    };
    let loo = cfg.loo && a == b;
    Ok(CcsdTerms {
        i_pp: averaged_quadratic_form(a, l_pp.as_matrix(), a, loo),
        i_qq: averaged_quadratic_form(b, l_qq.as_matrix(), b, loo),
        i_pq: averaged_quadratic_form(a, l_pq.as_matrix(), b, loo),
    })
}

/// Ridged symmetric log form `0.5 * [log(I_pp + e) + log(I_qq + e)] - log(I_pq + e)`,
/// i.e. `-log` of the ridged CS ratio, which is non-negative. Returns `+inf`
/// when `epsilon == 0` and the cross term vanishes, so rankings over scores
/// stay total.
pub fn ccsd_score(terms: &CcsdTerms, epsilon: f64) -> f64 {
    let pq = terms.i_pq + epsilon;
    if pq <= 0.0 {
        return f64::INFINITY;
    }
    0.5 * ((terms.i_pp + epsilon).ln() + (terms.i_qq + epsilon).ln()) - pq.ln()
}

/// Estimator for pairs of series observed on one shared condition grid,
/// where `A = B` and only the value Grams differ between pairs.
///
/// The weight structure collapses to the symmetric pair matrix
/// `M = A'A / n_r` (leave-one-out adjusted when enabled), so every term is
/// `sum_ij M_ij L(u_i, v_j)`. Building `M` once lets callers cache per-series
/// self terms and only pay for the cross term per pair.
#[derive(Debug, Clone)]
pub struct SharedConditionEstimator {
    pair_weights: DMatrix<f64>,
    cfg: CcsdConfig,
}

impl SharedConditionEstimator {
    /// Conditions are the time indices `1..=len`, and so is the reference set.
    pub fn new(len: usize, tau: Bandwidth, cfg: &CcsdConfig) -> Result<Self> {
        let grid: Vec<f64> = (1..=len).map(|t| t as f64).collect();
        Self::with_reference(len, &grid, tau, cfg)
    }

    /// Same as [`new`](Self::new) with a caller-supplied reference grid.
    pub fn with_reference(
        len: usize,
        reference: &[f64],
        tau: Bandwidth,
        cfg: &CcsdConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if len < 1 || reference.is_empty() {
            return Err(Error::Input("empty condition grid".into()));
        }
        let conds: Vec<[f64; 1]> = (1..=len).map(|t| [t as f64]).collect();
        let refs: Vec<[f64; 1]> = reference.iter().map(|&r| [r]).collect();
        let a = nw_weights(&refs, &conds, tau)?;
        let a = a.as_matrix();
        let n_r = a.nrows();
        let mut m = DMatrix::zeros(len, len);
        for row in a.row_iter() {
            let self_mass: f64 = row.iter().map(|w| w * w).sum();
            let rest = 1.0 - self_mass;
            let (drop_diag, scale) = if cfg.loo && rest > 1e-12 {
                (true, 1.0 / (rest * n_r as f64))
            } else {
                (false, 1.0 / n_r as f64)
            };
            for i in 0..len {
                let wi = row[i] * scale;
                if wi == 0.0 {
                    continue;
                }
                for j in 0..len {
                    if drop_diag && i == j {
                        continue;
                    }
                    m[(i, j)] += wi * row[j];
                }
            }
        }
        Ok(SharedConditionEstimator {
            pair_weights: 0.5 * (&m + m.transpose()),
            cfg: *cfg,
        })
    }

    pub fn len(&self) -> usize {
        self.pair_weights.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn config(&self) -> &CcsdConfig {
        &self.cfg
    }

    /// `A'A / n_r`, leave-one-out adjusted when enabled.
    pub fn pair_weights(&self) -> &DMatrix<f64> {
        &self.pair_weights
    }

    fn check_len(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.len() {
            return Err(Error::Input(format!(
                "series length {} does not match grid length {}",
                u.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// `I_pp` for one series; rank truncation of its Gram applies here.
    pub fn self_term(&self, u: &[f64], sigma: Bandwidth) -> Result<f64> {
        self.check_len(u)?;
        if self.cfg.keep_fraction < 1.0 {
            let g = rank_truncate(&gram_scalar(u, u, sigma)?, self.cfg.keep_fraction)?;
            return Ok(self.pair_weights.component_mul(g.as_matrix()).sum());
        }
        Ok(self.cross_term_unchecked(u, u, sigma))
    }

    /// `I_pq` between two series; exactly symmetric in its arguments.
    pub fn cross_term(&self, u: &[f64], v: &[f64], sigma: Bandwidth) -> Result<f64> {
        self.check_len(u)?;
        self.check_len(v)?;
        Ok(self.cross_term_unchecked(u, v, sigma))
    }

    fn cross_term_unchecked(&self, u: &[f64], v: &[f64], sigma: Bandwidth) -> f64 {
        let m = &self.pair_weights;
        let n = u.len();
        let mut diag = 0.0;
        let mut off = 0.0;
        for i in 0..n {
            diag += m[(i, i)] * rbf_scalar(u[i], v[i], sigma);
            for j in (i + 1)..n {
                let w = m[(i, j)];
                if w != 0.0 {
                    off += w * (rbf_scalar(u[i], v[j], sigma) + rbf_scalar(u[j], v[i], sigma));
                }
            }
        }
        diag + off
    }

    pub fn terms(&self, u: &[f64], v: &[f64], sigma: Bandwidth) -> Result<CcsdTerms> {
        Ok(CcsdTerms {
            i_pp: self.self_term(u, sigma)?,
            i_qq: self.self_term(v, sigma)?,
            i_pq: self.cross_term(u, v, sigma)?,
        })
    }

    pub fn score(&self, u: &[f64], v: &[f64], sigma: Bandwidth) -> Result<f64> {
        Ok(ccsd_score(&self.terms(u, v, sigma)?, self.cfg.epsilon))
    }
}

/// C-CSD between two standardized series of equal length, conditioning on
/// the time index.
pub fn ccsd_pair_series(
    a: &[f64],
    b: &[f64],
    tau: Bandwidth,
    sigma: Bandwidth,
    cfg: &CcsdConfig,
) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "series lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    SharedConditionEstimator::new(a.len(), tau, cfg)?.score(a, b, sigma)
}

/// One weighted output sample of a mixture, with a tag the gate can inspect.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom<T> {
    pub weight: f64,
    pub output: f64,
    pub tag: T,
}

/// Gate that leaves every kernel value untouched.
pub fn no_gate<T>(_: &T, _: &T) -> f64 {
    1.0
}

/// Gated double sum `sum_ij w_i w_j g(t_i, t_j) L(y_i, y_j)`. The gate must
/// be symmetric; the sum runs over `i < j` once.
fn gated_self_sum<T, G>(atoms: &[Atom<T>], sigma: Bandwidth, gate: &G) -> f64
where
    G: Fn(&T, &T) -> f64,
{
    let mut diag = 0.0;
    let mut off = 0.0;
    for (i, a) in atoms.iter().enumerate() {
        diag += a.weight * a.weight * gate(&a.tag, &a.tag);
        let mut row = 0.0;
        for b in &atoms[i + 1..] {
            row += b.weight * gate(&a.tag, &b.tag) * rbf_scalar(a.output, b.output, sigma);
        }
        off += a.weight * row;
    }
    diag + 2.0 * off
}

fn gated_cross_sum<T, G>(p: &[Atom<T>], q: &[Atom<T>], sigma: Bandwidth, gate: &G) -> f64
where
    G: Fn(&T, &T) -> f64,
{
    p.iter()
        .map(|a| {
            a.weight
                * q.iter()
                    .map(|b| b.weight * gate(&a.tag, &b.tag) * rbf_scalar(a.output, b.output, sigma))
                    .sum::<f64>()
        })
        .sum()
}

/// Kernel expectations of two weighted output mixtures under a pairwise gate.
pub fn mixture_terms<T, G>(
    p: &[Atom<T>],
    q: &[Atom<T>],
    sigma_y: Bandwidth,
    gate: G,
) -> Result<CcsdTerms>
where
    G: Fn(&T, &T) -> f64,
{
    if p.is_empty() || q.is_empty() {
        return Err(Error::InsufficientReference(format!(
            "mixture sizes {} and {}",
            p.len(),
            q.len()
        )));
    }
    if p.iter().chain(q).any(|a| !(a.weight >= 0.0) || !a.output.is_finite()) {
        return Err(Error::Input("mixture atoms need non-negative weights and finite outputs".into()));
    }
    Ok(CcsdTerms {
        i_pp: gated_self_sum(p, sigma_y, &gate),
        i_qq: gated_self_sum(q, sigma_y, &gate),
        i_pq: gated_cross_sum(p, q, sigma_y, &gate),
    })
}

/// `-log(I_pq / sqrt(I_pp I_qq))` between two output mixtures, in the
/// ridged symmetric form. Large when the mixtures put their mass on
/// different outputs or on differently tagged atoms.
pub fn ccsd_mixture<T, G>(
    p: &[Atom<T>],
    q: &[Atom<T>],
    sigma_y: Bandwidth,
    epsilon: f64,
    gate: G,
) -> Result<f64>
where
    G: Fn(&T, &T) -> f64,
{
    let terms = mixture_terms(p, q, sigma_y, gate)?;
    Ok(ccsd_score(&terms, epsilon))
}
