//! Threshold metrics and embedding diagnostics.
//!
//! Spoof is the positive class: a sample is called spoof when its score is at
//! or above the threshold. FAR is the fraction of live samples called spoof,
//! FRR the fraction of spoof samples called live.
//!
//! Threshold metrics scan every distinct cut position of the sorted scores,
//! so ties are handled deterministically. Counts stay integral until the final
//! division.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::numkit::{cosine, Matrix};
use crate::pgirm::HyperplaneSet;
use crate::worldgen::Label;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<Label>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("scores".into()));
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn with_flipped_labels(&self) -> ScoredSet {
        ScoredSet {
            scores: self.scores.clone(),
            labels: self.labels.iter().map(|l| l.flipped()).collect(),
        }
    }

    fn require_both_classes(&self) -> Result<(u64, u64)> {
        let pos = self.count(Label::Spoof) as u64;
        let neg = self.count(Label::Live) as u64;
        if pos == 0 || neg == 0 {
            return Err(Error::invalid(format!(
                "threshold metrics need both classes, got {pos} spoof and {neg} live"
            )));
        }
        Ok((pos, neg))
    }

    /// Cumulative (false positive, true positive) counts at each cut, from
    /// the strictest threshold (nothing called spoof) down to the loosest.
    fn cuts(&self) -> Vec<Cut> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].partial_cmp(&self.scores[a]).unwrap_or(Ordering::Equal));
        let mut cuts = vec![Cut {
            threshold: f64::INFINITY,
            fp: 0,
            tp: 0,
        }];
        let (mut fp, mut tp) = (0u64, 0u64);
        let mut i = 0;
        while i < order.len() {
            let s = self.scores[order[i]];
            while i < order.len() && self.scores[order[i]] == s {
                match self.labels[order[i]] {
                    Label::Spoof => tp += 1,
                    Label::Live => fp += 1,
                }
                i += 1;
            }
            cuts.push(Cut { threshold: s, fp, tp });
        }
        cuts
    }
}

#[derive(Clone, Copy, Debug)]
struct Cut {
    threshold: f64,
    fp: u64,
    tp: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Samples with score ≥ threshold are called spoof.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Step ROC from `(0, 0)` to `(1, 1)`, one point per distinct score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

pub fn roc_curve(s: &ScoredSet) -> Result<RocCurve> {
    let (pos, neg) = s.require_both_classes()?;
    let points = s
        .cuts()
        .into_iter()
        .map(|c| RocPoint {
            threshold: c.threshold,
            fpr: c.fp as f64 / neg as f64,
            tpr: c.tp as f64 / pos as f64,
        })
        .collect();
    Ok(RocCurve { points })
}

/// Area under the ROC curve by the trapezoid rule, accumulated in integer
/// units of `1 / (2·pos·neg)`. Equals the Mann-Whitney statistic with ties
/// counted as one half.
pub fn auc(s: &ScoredSet) -> Result<f64> {
    let (pos, neg) = s.require_both_classes()?;
    let cuts = s.cuts();
    let mut twice_area: u128 = 0;
    for w in cuts.windows(2) {
        let dx = (w[1].fp - w[0].fp) as u128;
        twice_area += dx * (w[1].tp + w[0].tp) as u128;
    }
    Ok(twice_area as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Half total error rate at the equal-error threshold of this set: the cut
/// minimising `|FAR − FRR|`, ties broken by the lower HTER.
pub fn hter(s: &ScoredSet) -> Result<f64> {
    hter_with_threshold(s).map(|(h, _)| h)
}

/// HTER together with the chosen threshold.
pub fn hter_with_threshold(s: &ScoredSet) -> Result<(f64, f64)> {
    let (pos, neg) = s.require_both_classes()?;
    // FAR = fp/neg, FRR = (pos − tp)/pos; compare on the common denominator pos·neg
    let mut best: Option<(u128, u128, Cut)> = None;
    for c in s.cuts() {
        let far = c.fp as u128 * pos as u128;
        let frr = (pos - c.tp) as u128 * neg as u128;
        let gap = far.abs_diff(frr);
        let total = far + frr;
        let better = match best {
            None => true,
            Some((bg, bt, _)) => gap < bg || (gap == bg && total < bt),
        };
        if better {
            best = Some((gap, total, c));
        }
    }
    let (_, total, cut) = best.expect("at least one cut");
    Ok((total as f64 / (2 * pos as u128 * neg as u128) as f64, cut.threshold))
}

/// Largest TPR over cuts whose FPR does not exceed `fpr_cap`.
pub fn tpr_at_fpr(s: &ScoredSet, fpr_cap: f64) -> Result<f64> {
    if !(fpr_cap > 0.0 && fpr_cap < 1.0) {
        return Err(Error::invalid(format!("fpr cap must lie in (0, 1), got {fpr_cap}")));
    }
    let (pos, neg) = s.require_both_classes()?;
    let best = s
        .cuts()
        .into_iter()
        .filter(|c| c.fp as f64 / neg as f64 <= fpr_cap)
        .map(|c| c.tp)
        .max()
        .unwrap_or(0);
    Ok(best as f64 / pos as f64)
}

fn class_means(z: &Matrix, labels: &[Label]) -> Result<(Vec<f64>, Vec<f64>)> {
    if labels.len() != z.rows() {
        return Err(Error::invalid(format!("{} embeddings but {} labels", z.rows(), labels.len())));
    }
    let m = z.cols();
    let mut spoof = vec![0.0; m];
    let mut live = vec![0.0; m];
    let (mut ns, mut nl) = (0usize, 0usize);
    for (row, &l) in z.row_iter().zip(labels) {
        let (acc, n) = match l {
            Label::Spoof => (&mut spoof, &mut ns),
            Label::Live => (&mut live, &mut nl),
        };
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
        *n += 1;
    }
    if ns == 0 || nl == 0 {
        return Err(Error::invalid("class means need both classes"));
    }
    spoof.iter_mut().for_each(|v| *v /= ns as f64);
    live.iter_mut().for_each(|v| *v /= nl as f64);
    Ok((spoof, live))
}

/// `1 − cos(mean spoof embedding, mean live embedding)`, in `[0, 2]`.
pub fn s_sep(z: &Matrix, labels: &[Label]) -> Result<f64> {
    let (spoof, live) = class_means(z, labels)?;
    Ok(1.0 - cosine(&spoof, &live)?)
}

/// Mean over domains of `cos(β_e, mean spoof − mean live)`. A trailing bias
/// entry in `β_e` is ignored.
pub fn s_align(set: &HyperplaneSet, z: &Matrix, labels: &[Label]) -> Result<f64> {
    let (spoof, live) = class_means(z, labels)?;
    let diff: Vec<f64> = spoof.iter().zip(&live).map(|(s, l)| s - l).collect();
    let m = z.cols();
    if set.dim() < m {
        return Err(Error::invalid(format!(
            "hyperplanes have length {}, embeddings have width {m}",
            set.dim()
        )));
    }
    let mut sum = 0.0;
    for b in &set.betas {
        sum += cosine(&b[..m], &diff)?;
    }
    Ok(sum / set.num_domains() as f64)
}

/// Ranks starting at 1, tied values share their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("correlation of a constant sequence is undefined"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::invalid(format!("lengths differ: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::invalid("rank correlation needs at least three pairs"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub auc: f64,
    pub hter: f64,
    pub tpr_at_fpr05: f64,
    pub s_sep: f64,
    pub s_align: f64,
    pub s_cos: Option<f64>,
}
