//! Evaluation metrics for both pipelines.
//!
//! Binary labels are `bool` with `true` meaning positive (fraud). Ranking
//! metrics treat larger scores as more positive.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confusion counts at a fixed threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Counts plus the metrics derived from them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub threshold: f64,
    pub confusion: ConfusionCounts,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ThresholdMetrics {
    /// Derives accuracy, precision, recall and F1, with `0/0 = 0`.
    pub fn from_counts(threshold: f64, c: ConfusionCounts) -> Self {
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        ThresholdMetrics {
            threshold,
            confusion: c,
            accuracy: ratio(c.tp + c.tn, c.total()),
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

/// Threshold-free and thresholded metrics for one evaluation split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub ap: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    pub confusion: ConfusionCounts,
}

impl EvalReport {
    pub fn evaluate(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Self> {
        let m = confusion_at(scores, labels, threshold)?;
        Ok(EvalReport {
            auc: roc_auc(scores, labels)?,
            ap: average_precision(scores, labels)?,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            threshold,
            confusion: m.confusion,
        })
    }
}

fn check_shapes(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("NaN score".into()));
    }
    Ok(())
}

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

fn require_both_classes(labels: &[bool]) -> Result<(usize, usize)> {
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "need both classes, got {pos} positives and {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `2 I(a; b) / (H(a) + H(b))`.
///
/// Two single-cluster labelings score 1 (they are the same partition); a
/// single cluster against anything else scores 0.
pub fn nmi<A, B>(a: &[A], b: &[B]) -> Result<f64>
where
    A: Ord,
    B: Ord,
{
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Input(format!(
            "labelings must be non-empty and equal length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let mut ca: BTreeMap<&A, usize> = BTreeMap::new();
    let mut cb: BTreeMap<&B, usize> = BTreeMap::new();
    let mut joint: BTreeMap<(&A, &B), usize> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
        *joint.entry((x, y)).or_default() += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    if ha == 0.0 || hb == 0.0 {
        return Ok(if ha == 0.0 && hb == 0.0 { 1.0 } else { 0.0 });
    }
    let mi: f64 = joint
        .iter()
        .map(|((x, y), &c)| {
            let pxy = c as f64 / n;
            let px = ca[x] as f64 / n;
            let py = cb[y] as f64 / n;
            pxy * (pxy / (px * py)).ln()
        })
        .sum();
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// ROC-AUC as the Mann-Whitney probability that a random positive outscores
/// a random negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_shapes(scores, labels)?;
    let (pos, neg) = require_both_classes(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    // Count, for each tie group in ascending order, positive-over-negative
    // wins as whole and half units so the numerator stays exact.
    let mut neg_below = 0usize;
    let mut half_units = 0u128;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let (gp, gn) = class_counts(&order[start..end].iter().map(|&i| labels[i]).collect::<Vec<_>>());
        half_units += 2 * (gp as u128) * (neg_below as u128) + (gp as u128) * (gn as u128);
        neg_below += gn;
        start = end;
    }
    Ok(half_units as f64 / 2.0 / (pos as f64 * neg as f64))
}

/// Descending-score order, ties kept in input order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    order
}

/// Step-wise area under the precision-recall curve,
/// `sum_k (R_k - R_{k-1}) P_k` over the ranked prefixes.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_shapes(scores, labels)?;
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(Error::UndefinedMetric("average precision without positives".into()));
    }
    let mut tp = 0usize;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (k, &i) in ranking(scores).iter().enumerate() {
        if labels[i] {
            tp += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (k + 1) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Predicts positive iff `score >= threshold`.
pub fn confusion_at(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ThresholdMetrics> {
    check_shapes(scores, labels)?;
    let mut c = ConfusionCounts::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(ThresholdMetrics::from_counts(threshold, c))
}

/// F1-maximizing threshold among the observed scores (and `+inf`). Among
/// equal F1 values the lowest threshold wins.
pub fn best_f1_threshold(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    check_shapes(scores, labels)?;
    let (pos, neg) = require_both_classes(labels)?;
    let order = ranking(scores);
    let mut best = (f64::INFINITY, 0.0);
    let mut tp = 0;
    let mut fp = 0;
    let mut k = 0;
    while k < order.len() {
        let t = scores[order[k]];
        while k < order.len() && scores[order[k]] == t {
            if labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let c = ConfusionCounts {
            tp,
            fp,
            fn_: pos - tp,
            tn: neg - fp,
        };
        let f1 = ThresholdMetrics::from_counts(t, c).f1;
        // Thresholds arrive in decreasing order, so `>=` prefers the lower one.
        if f1 >= best.1 {
            best = (t, f1);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nmi_basic_cases() {
        assert_eq!(nmi(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert!((nmi(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(nmi(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&[3, 3, 3], &[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(nmi(&[3, 3, 3], &[1, 2, 1]).unwrap(), 0.0);
        assert!(nmi::<i32, i32>(&[], &[]).is_err());
        assert!(nmi(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn auc_basic_cases() {
        let labels = [false, false, true, true];
        assert_eq!(roc_auc(&[0.1, 0.2, 0.3, 0.4], &labels).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.4, 0.3, 0.2, 0.1], &labels).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.5; 4], &labels).unwrap(), 0.5);
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ap_basic_cases() {
        assert_eq!(
            average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(),
            1.0
        );
        assert_eq!(average_precision(&[0.9, 0.1], &[false, true]).unwrap(), 0.5);
        assert!(average_precision(&[0.9], &[false]).is_err());
    }

    #[test]
    fn confusion_extremes() {
        let s = [0.2, 0.5, 0.9];
        let l = [false, true, true];
        let all = confusion_at(&s, &l, 0.0).unwrap();
        assert_eq!((all.confusion.fn_, all.confusion.tn), (0, 0));
        let none = confusion_at(&s, &l, 1.0).unwrap();
        assert_eq!((none.confusion.tp, none.confusion.fp), (0, 0));
        assert_eq!(none.precision, 0.0);
        assert_eq!(none.f1, 0.0);
    }

    #[test]
    fn best_threshold_cases() {
        let (t, f1) = best_f1_threshold(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!((t, f1), (0.8, 1.0));
        let (t, f1) = best_f1_threshold(&[0.3, 0.95, 0.2], &[false, true, false]).unwrap();
        assert_eq!((t, f1), (0.95, 1.0));
    }

    #[test]
    fn counts_total_matches_items() {
        let c = ConfusionCounts {
            tp: 1,
            fp: 2,
            fn_: 3,
            tn: 4,
        };
        let m = ThresholdMetrics::from_counts(0.5, c);
        assert_eq!(m.confusion.total(), 10);
    }
}
