//! Gaussian kernels, Gram matrices and bandwidth heuristics.
//!
//! Every kernel in this crate has the same form
//! `k(u, v) = exp(-|u - v|^2 / (2 sigma^2))`; only the space and the
//! bandwidth change. Bandwidths come either from the IQR of pairwise scalar
//! differences (clustering) or from the median pairwise distance (fraud).

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on the number of pairs a bandwidth heuristic looks at.
pub const DEFAULT_MAX_PAIRS: usize = 2_000_000;

/// Normal-consistency constant: IQR of a unit Gaussian.
const IQR_TO_SIGMA: f64 = 1.349;

/// Relative tolerance for negative eigenvalues of a PSD matrix.
const NEG_EIG_TOL: f64 = 1e-8;

/// A strictly positive, finite kernel bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Bandwidth(f64);

impl Bandwidth {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(Bandwidth(value))
        } else {
            Err(Error::Parameter(format!(
                "bandwidth must be positive and finite, got {value}"
            )))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    /// `1 / (2 sigma^2)`, the factor multiplying squared distances.
    #[inline]
    pub fn gamma(self) -> f64 {
        0.5 / (self.0 * self.0)
    }

    /// Multiplies the bandwidth by a positive factor.
    pub fn scaled(self, factor: f64) -> Result<Self> {
        Bandwidth::new(self.0 * factor)
    }
}

impl TryFrom<f64> for Bandwidth {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Bandwidth::new(value)
    }
}

impl From<Bandwidth> for f64 {
    fn from(b: Bandwidth) -> f64 {
        b.0
    }
}

/// How many pairs a pairwise heuristic may touch, and the seed used when it
/// has to subsample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSampling {
    pub max_pairs: usize,
    pub seed: u64,
}

impl Default for PairSampling {
    fn default() -> Self {
        PairSampling {
            max_pairs: DEFAULT_MAX_PAIRS,
            seed: 0,
        }
    }
}

/// Dense kernel matrix. Self-Grams of the RBF kernel are symmetric with a
/// unit diagonal; truncated or reconstructed matrices only keep symmetry.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    entries: DMatrix<f64>,
}

impl GramMatrix {
    pub fn from_matrix(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::Input("Gram matrix must be non-empty".into()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("Gram matrix has non-finite entries".into()));
        }
        Ok(GramMatrix { entries })
    }

    /// Builds a matrix from row-major nested vectors.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Input("ragged Gram rows".into()));
        }
        GramMatrix::from_matrix(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
    }

    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn is_square(&self) -> bool {
        self.rows() == self.cols()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn transpose(&self) -> GramMatrix {
        GramMatrix {
            entries: self.entries.transpose(),
        }
    }

    pub fn trace(&self) -> f64 {
        self.entries.diagonal().sum()
    }
}

#[inline]
pub(crate) fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `exp(-|u - v|^2 / (2 sigma^2))`.
pub fn rbf(u: &[f64], v: &[f64], sigma: Bandwidth) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Input(format!(
            "dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    Ok((-sq_dist(u, v) * sigma.gamma()).exp())
}

/// Scalar RBF without the dimension check.
#[inline]
pub fn rbf_scalar(a: f64, b: f64, sigma: Bandwidth) -> f64 {
    let d = a - b;
    (-d * d * sigma.gamma()).exp()
}

fn common_dim<V: AsRef<[f64]>>(xs: &[V], what: &str) -> Result<usize> {
    let d = xs
        .first()
        .map(|x| x.as_ref().len())
        .ok_or_else(|| Error::Input(format!("{what} is empty")))?;
    if xs.iter().any(|x| x.as_ref().len() != d) {
        return Err(Error::Input(format!("{what} has mixed dimensions")));
    }
    Ok(d)
}

/// Cross Gram matrix `G[i][j] = rbf(x[i], y[j])`.
pub fn gram<V: AsRef<[f64]>>(x: &[V], y: &[V], sigma: Bandwidth) -> Result<GramMatrix> {
    let dx = common_dim(x, "X")?;
    let dy = common_dim(y, "Y")?;
    if dx != dy {
        return Err(Error::Input(format!("dimension mismatch: {dx} vs {dy}")));
    }
    let g = sigma.gamma();
    let entries = DMatrix::from_fn(x.len(), y.len(), |i, j| {
        (-sq_dist(x[i].as_ref(), y[j].as_ref()) * g).exp()
    });
    Ok(GramMatrix { entries })
}

/// Gram matrix of scalar samples.
pub fn gram_scalar(x: &[f64], y: &[f64], sigma: Bandwidth) -> Result<GramMatrix> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Input("scalar Gram of an empty sample".into()));
    }
    let entries = DMatrix::from_fn(x.len(), y.len(), |i, j| rbf_scalar(x[i], y[j], sigma));
    Ok(GramMatrix { entries })
}

/// Calls `f(i, j)` for every unordered pair `i < j` of `0..n`, or for
/// `sampling.max_pairs` seeded uniform draws of distinct pairs when there
/// are more pairs than that.
pub(crate) fn for_each_pair(n: usize, sampling: PairSampling, mut f: impl FnMut(usize, usize)) {
    let total = n.saturating_mul(n.saturating_sub(1)) / 2;
    if total <= sampling.max_pairs {
        for i in 0..n {
            for j in (i + 1)..n {
                f(i, j);
            }
        }
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    for _ in 0..sampling.max_pairs {
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        f(i.min(j), i.max(j));
    }
}

/// Quantile of sorted data with linear interpolation between order
/// statistics (`h = (n - 1) p`).
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `IQR(|v_i - v_j|, i < j) / 1.349`.
pub fn iqr_bandwidth(values: &[f64], sampling: PairSampling) -> Result<Bandwidth> {
    if values.len() < 2 {
        return Err(Error::Input("IQR bandwidth needs at least two values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("IQR bandwidth over non-finite values".into()));
    }
    let mut diffs = Vec::new();
    for_each_pair(values.len(), sampling, |i, j| {
        diffs.push((values[i] - values[j]).abs())
    });
    diffs.sort_unstable_by(f64::total_cmp);
    let iqr = quantile_sorted(&diffs, 0.75) - quantile_sorted(&diffs, 0.25);
    let sigma = iqr / IQR_TO_SIGMA;
    if !(sigma > 0.0) {
        return Err(Error::DegenerateScale(
            "pairwise differences have zero interquartile range".into(),
        ));
    }
    Bandwidth::new(sigma)
}

fn median_in_place(xs: &mut [f64]) -> f64 {
    let n = xs.len();
    let mid = n / 2;
    let (lower, upper, _) = xs.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (below + upper)
    }
}

/// Median pairwise Euclidean distance.
pub fn median_heuristic<V: AsRef<[f64]>>(xs: &[V], sampling: PairSampling) -> Result<Bandwidth> {
    if xs.len() < 2 {
        return Err(Error::Input("median heuristic needs at least two vectors".into()));
    }
    common_dim(xs, "X")?;
    let mut dists = Vec::new();
    for_each_pair(xs.len(), sampling, |i, j| {
        dists.push(sq_dist(xs[i].as_ref(), xs[j].as_ref()).sqrt())
    });
    let med = median_in_place(&mut dists);
    if !(med > 0.0) || !med.is_finite() {
        return Err(Error::DegenerateScale(
            "median pairwise distance is zero".into(),
        ));
    }
    Bandwidth::new(med)
}

/// Eigenpairs of a symmetric PSD matrix, sorted by decreasing eigenvalue,
/// with eigenvalues clipped at zero.
fn psd_spectrum(g: &GramMatrix) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if !g.is_square() {
        return Err(Error::Input(format!(
            "expected a square matrix, got {}x{}",
            g.rows(),
            g.cols()
        )));
    }
    let trace = g.trace();
    let eig = SymmetricEigen::new(g.entries.clone());
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -NEG_EIG_TOL * trace.abs().max(f64::MIN_POSITIVE) {
        return Err(Error::Numerical(format!(
            "matrix is not PSD: eigenvalue {min:e} with trace {trace:e}"
        )));
    }
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = DMatrix::from_fn(g.rows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Spectral-entropy effective rank `exp(-sum l log l)` over the normalized
/// eigenvalues; lies in `[1, n]`.
pub fn effective_rank(g: &GramMatrix) -> Result<f64> {
    let (values, _) = psd_spectrum(g)?;
    let total: f64 = values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numerical("effective rank of a zero spectrum".into()));
    }
    let entropy: f64 = values
        .iter()
        .map(|&l| l / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(entropy.exp().clamp(1.0, values.len() as f64))
}

/// Keeps the leading eigenpairs that together carry at least
/// `keep_fraction` of the trace and reconstructs the matrix from them.
pub fn rank_truncate(g: &GramMatrix, keep_fraction: f64) -> Result<GramMatrix> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Parameter(format!(
            "keep_fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    let (values, vectors) = psd_spectrum(g)?;
    let total: f64 = values.iter().sum();
    let target = keep_fraction * total;
    let mut kept = 0;
    let mut acc = 0.0;
    for &l in &values {
        kept += 1;
        acc += l;
        if acc >= target {
            break;
        }
    }
    let n = g.rows();
    let mut out = DMatrix::zeros(n, n);
    for (c, &l) in values.iter().enumerate().take(kept) {
        if l == 0.0 {
            continue;
        }
        let v = vectors.column(c);
        out += l * v * v.transpose();
    }
    // Reconstruction leaves O(eps) asymmetry.
    let sym = 0.5 * (&out + out.transpose());
    GramMatrix::from_matrix(sym)
}
