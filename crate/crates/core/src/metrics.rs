//! Open-set evaluation: AUROC over knownness scores and the open-set
//! classification rate (OSCR), plus per-protocol averaging.

use serde::{Deserialize, Serialize};

use crate::data::OpennessSplit;
use crate::error::{HespError, Result};

/// Name recorded in every report for the score that ranks samples.
pub const KNOWNNESS_SCORE: &str = "max_p_h";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub knownness: f64,
    /// `None` marks an unknown-class sample.
    pub true_label: Option<usize>,
    pub predicted_known: usize,
}

impl ScoredSample {
    pub fn is_known(&self) -> bool {
        self.true_label.is_some()
    }

    pub fn correct(&self) -> bool {
        self.true_label == Some(self.predicted_known)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub oscr: f64,
    pub split: OpennessSplit,
    pub n_known: usize,
    pub n_unknown: usize,
    pub knownness_score: String,
    pub threshold: f64,
    /// Known samples argmax-classified correctly.
    pub closed_set_accuracy: f64,
    /// Fraction of all test samples whose open-set decision is right.
    pub open_set_accuracy: f64,
}

fn check_scores(scores: &[f64], what: &str) -> Result<()> {
    if scores.is_empty() {
        return Err(HespError::Metric(format!("no {what} scores")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(HespError::Metric(format!("non-finite {what} score")));
    }
    Ok(())
}

/// Probability that a random known sample outscores a random unknown one,
/// ties counted as one half. Rank-sum form with mid-ranks for ties.
pub fn auroc(known: &[f64], unknown: &[f64]) -> Result<f64> {
    check_scores(known, "known")?;
    check_scores(unknown, "unknown")?;
    let mut all: Vec<(f64, bool)> = known
        .iter()
        .map(|&s| (s, true))
        .chain(unknown.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the Mann-Whitney U so every count stays an integer
    let mut twice_u: u128 = 0;
    let mut unknown_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let k = all[i..j].iter().filter(|e| e.1).count() as u128;
        let u = (j - i) as u128 - k;
        twice_u += k * (2 * unknown_below + u);
        unknown_below += u;
        i = j;
    }
    let pairs = known.len() as f64 * unknown.len() as f64;
    Ok(twice_u as f64 / 2.0 / pairs)
}

/// Area under CCR against FPR as the acceptance threshold sweeps from `+∞`
/// down through every distinct knownness value to `−∞`.
pub fn oscr(samples: &[ScoredSample]) -> Result<f64> {
    let n_known = samples.iter().filter(|s| s.is_known()).count();
    let n_unknown = samples.len() - n_known;
    if n_known == 0 || n_unknown == 0 {
        return Err(HespError::Metric(format!(
            "oscr needs both populations, got {n_known} known and {n_unknown} unknown"
        )));
    }
    if samples.iter().any(|s| !s.knownness.is_finite()) {
        return Err(HespError::Metric("non-finite knownness".into()));
    }
    let mut order: Vec<&ScoredSample> = samples.iter().collect();
    order.sort_by(|a, b| b.knownness.total_cmp(&a.knownness));
    let (nk, nu) = (n_known as f64, n_unknown as f64);
    let (mut correct, mut false_pos) = (0usize, 0usize);
    let (mut prev_ccr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && order[j].knownness == order[i].knownness {
            correct += order[j].correct() as usize;
            false_pos += (!order[j].is_known()) as usize;
            j += 1;
        }
        let (ccr, fpr) = (correct as f64 / nk, false_pos as f64 / nu);
        area += (fpr - prev_fpr) * (ccr + prev_ccr) / 2.0;
        (prev_ccr, prev_fpr) = (ccr, fpr);
        i = j;
    }
    // the −∞ endpoint repeats the lowest threshold's point
    Ok(area)
}

/// Mean AUROC and mean OSCR.
pub fn aggregate(reports: &[EvalReport]) -> Result<(f64, f64)> {
    if reports.is_empty() {
        return Err(HespError::Metric("nothing to aggregate".into()));
    }
    let n = reports.len() as f64;
    Ok((
        reports.iter().map(|r| r.auroc).sum::<f64>() / n,
        reports.iter().map(|r| r.oscr).sum::<f64>() / n,
    ))
}

/// O(n²) references the fast metrics are tested against.
pub mod oracle {
    use super::ScoredSample;

    pub fn auroc_pairwise(known: &[f64], unknown: &[f64]) -> f64 {
        let mut halves = 0u64;
        for &k in known {
            for &u in unknown {
                halves += if k > u {
                    2
                } else if k == u {
                    1
                } else {
                    0
                };
            }
        }
        halves as f64 / 2.0 / (known.len() as f64 * unknown.len() as f64)
    }

    pub fn oscr_sweep(samples: &[ScoredSample]) -> f64 {
        let nk = samples.iter().filter(|s| s.is_known()).count() as f64;
        let nu = samples.len() as f64 - nk;
        let mut thresholds: Vec<f64> = samples.iter().map(|s| s.knownness).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut points = vec![(0.0, 0.0)];
        for theta in thresholds.into_iter().chain([f64::NEG_INFINITY]) {
            let accepted = samples.iter().filter(|s| s.knownness >= theta);
            let (mut c, mut f) = (0usize, 0usize);
            for s in accepted {
                c += s.correct() as usize;
                f += (!s.is_known()) as usize;
            }
            points.push((f as f64 / nu, c as f64 / nk));
        }
        points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
            .sum()
    }
}
