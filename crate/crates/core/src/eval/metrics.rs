use crate::error::{Error, Result};

/// Binary confusion counts with icing as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    /// Number of icing (positive) samples.
    pub fn n_fault(&self) -> u64 {
        self.tp + self.fn_
    }

    /// Number of normal (negative) samples.
    pub fn n_normal(&self) -> u64 {
        self.fp + self.tn
    }

    pub fn total(&self) -> u64 {
        self.n_fault() + self.n_normal()
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Usage("no scores to evaluate".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("NaN score".into()));
    }
    Ok(())
}

/// Predicts icing iff `score >= threshold`; `labels[i]` is true for icing.
pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ConfusionCounts> {
    check(scores, labels)?;
    let mut c = ConfusionCounts::default();
    for (&s, &pos) in scores.iter().zip(labels) {
        match (pos, s >= threshold) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Predict icing iff score ≥ threshold; `+inf` for the origin.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// From (0, 0) to (1, 1), one point per distinct score.
    pub points: Vec<RocPoint>,
    /// Mann-Whitney estimate with ties counted half.
    pub auc: f64,
}

impl RocCurve {
    /// Area under the piecewise-linear curve.
    pub fn trapezoid_auc(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }
}

/// ROC curve and AUC. Both classes must be present.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    check(scores, labels)?;
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Usage("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    // Mann-Whitney: each positive beats every negative ranked strictly below
    // it and ties half of those at the same score.
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut wins = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut p, mut n) = (0usize, 0usize);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                p += 1;
            } else {
                n += 1;
            }
            i += 1;
        }
        // positives in this group beat the negatives still below
        wins += p as f64 * (n_neg - fp - n) as f64 + 0.5 * (p * n) as f64;
        tp += p;
        fp += n;
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    Ok(RocCurve {
        points,
        auc: wins / (n_pos as f64 * n_neg as f64),
    })
}

/// Which denominators the competition score uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreConvention {
    /// `1 − α·FN/N_normal − (1 − α)·FP/N_fault`, as published.
    #[default]
    Verbatim,
    /// `1 − α·FN/N_fault − (1 − α)·FP/N_normal`: each error count divided
    /// by the size of its own class.
    Swapped,
}

impl ScoreConvention {
    pub fn parse(s: &str) -> Option<ScoreConvention> {
        match s {
            "verbatim" => Some(ScoreConvention::Verbatim),
            "swapped" => Some(ScoreConvention::Swapped),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScoreConvention::Verbatim => "verbatim",
            ScoreConvention::Swapped => "swapped",
        }
    }
}

/// Weighted error score with `α = N_fault / N_normal`.
///
/// Under the verbatim convention the value drops below zero once false
/// positives outnumber icing samples.
pub fn competition_score(c: &ConfusionCounts, convention: ScoreConvention) -> Result<f64> {
    let (n_normal, n_fault) = (c.n_normal() as f64, c.n_fault() as f64);
    if n_normal == 0.0 || n_fault == 0.0 {
        return Err(Error::Usage("score needs both classes".into()));
    }
    let alpha = n_fault / n_normal;
    let (fn_, fp) = (c.fn_ as f64, c.fp as f64);
    Ok(match convention {
        ScoreConvention::Verbatim => 1.0 - alpha * fn_ / n_normal - (1.0 - alpha) * fp / n_fault,
        ScoreConvention::Swapped => 1.0 - alpha * fn_ / n_fault - (1.0 - alpha) * fp / n_normal,
    })
}

/// True when a factor of the MCC denominator is zero.
pub fn mcc_degenerate(c: &ConfusionCounts) -> bool {
    c.tp + c.fp == 0 || c.tp + c.fn_ == 0 || c.tn + c.fp == 0 || c.tn + c.fn_ == 0
}

/// Matthews correlation coefficient; 0 when degenerate.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    if mcc_degenerate(c) {
        return 0.0;
    }
    let (tp, fn_, fp, tn) = (c.tp as f64, c.fn_ as f64, c.fp as f64, c.tn as f64);
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    ((tp * tn - fp * fn_) / den).clamp(-1.0, 1.0)
}
