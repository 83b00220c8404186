//! Brute-force reference implementations, written from the definitions and
//! sharing no code with the library.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn k(a: f64, b: f64, s: f64) -> f64 {
    (-(a - b) * (a - b) / (2.0 * s * s)).exp()
}

pub fn kv(a: &[f64], b: &[f64], s: f64) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d / (2.0 * s * s)).exp()
}

/// Row-normalized kernel weights, computed without any stabilizing shift.
pub fn nw(reference: &[Vec<f64>], sample: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    reference
        .iter()
        .map(|r| {
            let raw: Vec<f64> = sample.iter().map(|s| kv(r, s, tau)).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|w| w / sum).collect()
        })
        .collect()
}

/// `(1 / n_r) sum_l sum_i sum_j a[l][i] b[l][j] L(u_i, v_j)`.
pub fn quadruple_sum(a: &[Vec<f64>], b: &[Vec<f64>], u: &[f64], v: &[f64], sigma: f64) -> f64 {
    let mut total = 0.0;
    for l in 0..a.len() {
        for i in 0..u.len() {
            for j in 0..v.len() {
                total += a[l][i] * b[l][j] * k(u[i], v[j], sigma);
            }
        }
    }
    total / a.len() as f64
}

pub fn ccsd_from_terms(pp: f64, qq: f64, pq: f64, eps: f64) -> f64 {
    -((pq + eps) / ((pp + eps) * (qq + eps)).sqrt()).ln()
}

/// Pair-series C-CSD with time indices `1..=T` as conditions and reference.
pub fn pair_series(a: &[f64], b: &[f64], tau: f64, sigma: f64, eps: f64) -> f64 {
    let grid: Vec<Vec<f64>> = (1..=a.len()).map(|t| vec![t as f64]).collect();
    let w = nw(&grid, &grid, tau);
    let pp = quadruple_sum(&w, &w, a, a, sigma);
    let qq = quadruple_sum(&w, &w, b, b, sigma);
    let pq = quadruple_sum(&w, &w, a, b, sigma);
    ccsd_from_terms(pp, qq, pq, eps)
}

/// `sum_i sum_j w_i w_j g(t_i, t_j) L(y_i, y_j)` over all ordered pairs.
pub fn gated_double_sum<T>(
    p: &[(f64, f64, T)],
    q: &[(f64, f64, T)],
    sigma: f64,
    gate: impl Fn(&T, &T) -> f64,
) -> f64 {
    let mut s = 0.0;
    for (wp, yp, tp) in p {
        for (wq, yq, tq) in q {
            s += wp * wq * gate(tp, tq) * k(*yp, *yq, sigma);
        }
    }
    s
}

/// DTW by enumerating every monotone alignment path from `(0, 0)` to
/// `(n - 1, m - 1)` that stays within the band.
pub fn dtw_paths(a: &[f64], b: &[f64], window: Option<usize>) -> f64 {
    fn walk(a: &[f64], b: &[f64], w: usize, i: usize, j: usize, acc: f64, best: &mut f64) {
        if i.abs_diff(j) > w {
            return;
        }
        let acc = acc + (a[i] - b[j]).abs();
        if i + 1 == a.len() && j + 1 == b.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, w, i + 1, j, acc, best);
        }
        if j + 1 < b.len() {
            walk(a, b, w, i, j + 1, acc, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, w, i + 1, j + 1, acc, best);
        }
    }
    let w = window.unwrap_or(usize::MAX);
    let mut best = f64::INFINITY;
    walk(a, b, w, 0, 0, 0.0, &mut best);
    best
}

/// Minimum k-medoids objective over every medoid subset of size `k`.
pub fn best_medoid_cost(d: &[Vec<f64>], k: usize) -> f64 {
    let n = d.len();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let medoids: Vec<usize> = (0..n).filter(|m| mask & (1 << m) != 0).collect();
        let cost: f64 = (0..n)
            .map(|p| medoids.iter().map(|&m| d[p][m]).fold(f64::INFINITY, f64::min))
            .sum();
        best = best.min(cost);
    }
    best
}

pub fn random_dissimilarity(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = rng.gen_range(0.0..10.0);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// AUC by comparing every positive with every negative.
pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Average precision from prefix counts recomputed for every cut.
pub fn ap_prefix(scores: &[f64], labels: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap().then(i.cmp(&j)));
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut ap = 0.0;
    let mut prev = 0.0;
    for cut in 1..=idx.len() {
        let tp = idx[..cut].iter().filter(|&&i| labels[i]).count() as f64;
        let recall = tp / pos;
        ap += (recall - prev) * (tp / cut as f64);
        prev = recall;
    }
    ap
}

pub fn f1_at(scores: &[f64], labels: &[bool], t: f64) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= t, l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            _ => {}
        }
    }
    if tp == 0.0 {
        return 0.0;
    }
    let p = tp / (tp + fp);
    let r = tp / (tp + fneg);
    2.0 * p * r / (p + r)
}

/// Exhaustive scan of observed-score thresholds; ties go to the lowest.
pub fn best_f1_scan(scores: &[f64], labels: &[bool]) -> (f64, f64) {
    let mut cands: Vec<f64> = scores.to_vec();
    cands.push(f64::INFINITY);
    cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best = (f64::INFINITY, -1.0);
    for &t in &cands {
        let f = f1_at(scores, labels, t);
        if f > best.1 {
            best = (t, f);
        }
    }
    best
}
