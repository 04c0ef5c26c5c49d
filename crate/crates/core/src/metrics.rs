//! Evaluation statistics: regression quality, Bland-Altman agreement,
//! binary classification, inter-rater agreement tables and per-fold
//! aggregation.
//!
//! Conventions used throughout (all are observable in the emitted reports):
//! - Bland-Altman differences are `prediction - ground truth`, so a negative
//!   bias reads as underestimation.
//! - Spread statistics use the sample standard deviation (ddof = 1).
//! - Quantiles use linear interpolation between order statistics, so the
//!   IQR is reproducible bit-for-bit.
//! - Metrics that are undefined for the given inputs are typed as errors or
//!   `None` fields, never silent NaN.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Regression agreement between a ground-truth vector and predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub r2: f64,
    pub bias_mean: f64,
    pub bias_median: f64,
    pub deviation_std: f64,
    pub deviation_iqr: f64,
    pub n: usize,
}

/// Binary classification quality for the zero / nonzero score split.
///
/// The "nonzero" class is `total > 0`; the "zero" class is `total = 0`.
/// `mcc` and `roc_auc` are `None` when the ground truth contains a single
/// class (undefined rather than NaN).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub recall_zero: f64,
    pub recall_nonzero: f64,
    pub precision_zero: f64,
    pub precision_nonzero: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub mcc: Option<f64>,
    pub accuracy: f64,
    pub roc_auc: Option<f64>,
    pub n: usize,
}

/// Bland-Altman summary of pairwise differences, plus the plot coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub bias_mean: f64,
    pub bias_median: f64,
    pub std: f64,
    pub iqr: f64,
    /// (mean of pair, difference) per sample, for plotting.
    pub points: Vec<(f64, f64)>,
}

/// Per-pair agreement metrics for one rater pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub r2: f64,
    pub bias_mean: f64,
    pub bias_median: f64,
    pub deviation_std: f64,
    pub deviation_iqr: f64,
}

/// One row of an agreement table: an unordered rater pair and its stats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub first: String,
    pub second: String,
    pub stats: PairStats,
}

/// Pairwise inter-rater agreement plus a mean +/- sample-STD average row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementTable {
    pub rows: Vec<AgreementRow>,
    pub average: PairStats,
    pub spread: PairStats,
    pub n_studies: usize,
}

/// Mean of a slice. Panics on empty input (callers validate length).
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (ddof = 1). Requires n >= 2.
pub fn sample_std(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "sample std needs n >= 2, got {}",
            values.len()
        )));
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    Ok((ss / (values.len() - 1) as f64).sqrt())
}

/// Quantile with linear interpolation between order statistics
/// (position h = (n-1) * q).
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::UndefinedMetric("quantile of empty vector".into()));
    }
    debug_assert!((0.0..=1.0).contains(&q));
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in quantile"));
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return Ok(sorted[sorted.len() - 1]);
    }
    Ok(sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo]))
}

/// Median via the interpolated quantile at q = 0.5.
pub fn median(values: &[f64]) -> Result<f64> {
    quantile(values, 0.5)
}

/// Coefficient of determination: 1 - SSres / SStot.
///
/// Errors when fewer than two samples, lengths differ, or `y` is constant
/// (SStot = 0 makes the ratio undefined).
pub fn r2(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::ShapeMismatch(format!(
            "r2: |y| = {} vs |y_hat| = {}",
            y.len(),
            y_hat.len()
        )));
    }
    if y.len() < 2 {
        return Err(Error::UndefinedMetric("r2 needs n >= 2".into()));
    }
    let y_bar = mean(y);
    let ss_tot: f64 = y.iter().map(|v| (v - y_bar) * (v - y_bar)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric(
            "r2 undefined for constant ground truth".into(),
        ));
    }
    let ss_res: f64 = y
        .iter()
        .zip(y_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Bland-Altman statistics of the differences d_i = y_hat_i - y_i.
pub fn bland_altman(y: &[f64], y_hat: &[f64]) -> Result<BlandAltman> {
    if y.len() != y_hat.len() {
        return Err(Error::ShapeMismatch(format!(
            "bland_altman: |y| = {} vs |y_hat| = {}",
            y.len(),
            y_hat.len()
        )));
    }
    if y.len() < 2 {
        return Err(Error::UndefinedMetric("bland_altman needs n >= 2".into()));
    }
    let diffs: Vec<f64> = y_hat.iter().zip(y).map(|(p, g)| p - g).collect();
    let points: Vec<(f64, f64)> = y_hat
        .iter()
        .zip(y)
        .map(|(p, g)| ((p + g) / 2.0, p - g))
        .collect();
    let q1 = quantile(&diffs, 0.25)?;
    let q3 = quantile(&diffs, 0.75)?;
    Ok(BlandAltman {
        bias_mean: mean(&diffs),
        bias_median: median(&diffs)?,
        std: sample_std(&diffs)?,
        iqr: q3 - q1,
        points,
    })
}

/// Full regression report: r2 plus the Bland-Altman summary.
pub fn regression_report(y: &[f64], y_hat: &[f64]) -> Result<RegressionReport> {
    let ba = bland_altman(y, y_hat)?;
    Ok(RegressionReport {
        r2: r2(y, y_hat)?,
        bias_mean: ba.bias_mean,
        bias_median: ba.bias_median,
        deviation_std: ba.std,
        deviation_iqr: ba.iqr,
        n: y.len(),
    })
}

/// ROC AUC from continuous scores via the rank statistic with tie-averaging.
///
/// `None` when a class is absent.
pub fn roc_auc(y_flag: &[bool], scores: &[f64]) -> Result<Option<f64>> {
    if y_flag.len() != scores.len() {
        return Err(Error::ShapeMismatch(format!(
            "roc_auc: |y| = {} vs |scores| = {}",
            y_flag.len(),
            scores.len()
        )));
    }
    let n_pos = y_flag.iter().filter(|&&f| f).count();
    let n_neg = y_flag.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("non-finite score in roc_auc")
    });
    // Average ranks over tie groups (1-based ranks).
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg_rank;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = y_flag
        .iter()
        .zip(&ranks)
        .filter(|(&f, _)| f)
        .map(|(_, &r)| r)
        .sum();
    let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;
    Ok(Some(auc))
}

/// Binary zero / nonzero classification report.
///
/// `y_flag` / `y_hat_flag` are true for the nonzero class. `scores` are the
/// continuous predicted totals used for ROC AUC. Precision and recall use
/// the zero-division -> 0 convention; `mcc` uses the zero-denominator -> 0
/// rule, and both `mcc` and `roc_auc` are `None` when the ground truth is
/// single-class.
pub fn classification_report(
    y_flag: &[bool],
    y_hat_flag: &[bool],
    scores: &[f64],
) -> Result<ClassificationReport> {
    if y_flag.len() != y_hat_flag.len() || y_flag.len() != scores.len() {
        return Err(Error::ShapeMismatch(format!(
            "classification_report: |y| = {}, |y_hat| = {}, |scores| = {}",
            y_flag.len(),
            y_hat_flag.len(),
            scores.len()
        )));
    }
    if y_flag.is_empty() {
        return Err(Error::UndefinedMetric(
            "classification report of empty input".into(),
        ));
    }
    // Nonzero is the positive class.
    let mut tp = 0u64;
    let mut tn = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (&y, &p) in y_flag.iter().zip(y_hat_flag) {
        match (y, p) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
        }
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let recall_nonzero = ratio(tp, tp + fn_);
    let recall_zero = ratio(tn, tn + fp);
    let precision_nonzero = ratio(tp, tp + fp);
    let precision_zero = ratio(tn, tn + fn_);
    let f1 = |p: f64, r: f64| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    let f1_macro = (f1(precision_nonzero, recall_nonzero) + f1(precision_zero, recall_zero)) / 2.0;
    let both_classes = (tp + fn_) > 0 && (tn + fp) > 0;
    let mcc = if both_classes {
        let denom = ((tp + fp) as f64 * (tp + fn_) as f64 * (tn + fp) as f64 * (tn + fn_) as f64)
            .sqrt();
        Some(if denom == 0.0 {
            0.0
        } else {
            ((tp * tn) as f64 - (fp * fn_) as f64) / denom
        })
    } else {
        None
    };
    Ok(ClassificationReport {
        recall_zero,
        recall_nonzero,
        precision_zero,
        precision_nonzero,
        recall_macro: (recall_zero + recall_nonzero) / 2.0,
        f1_macro,
        mcc,
        accuracy: (tp + tn) as f64 / y_flag.len() as f64,
        roc_auc: roc_auc(y_flag, scores)?,
        n: y_flag.len(),
    })
}

/// Pair stats for one (reference, comparison) rater pair; the second-named
/// rater plays the prediction role in r2 and difference orientation.
pub fn pair_stats(first: &[f64], second: &[f64]) -> Result<PairStats> {
    let ba = bland_altman(first, second)?;
    Ok(PairStats {
        r2: r2(first, second)?,
        bias_mean: ba.bias_mean,
        bias_median: ba.bias_median,
        deviation_std: ba.std,
        deviation_iqr: ba.iqr,
    })
}

/// Pairwise agreement over >= 2 named raters scoring the same studies.
pub fn agreement_table(raters: &[(String, Vec<f64>)]) -> Result<AgreementTable> {
    if raters.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "agreement table needs >= 2 raters, got {}",
            raters.len()
        )));
    }
    let n = raters[0].1.len();
    for (name, scores) in raters {
        if scores.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "rater {name:?} has {} scores, expected {n}",
                scores.len()
            )));
        }
    }
    let mut rows = Vec::new();
    for i in 0..raters.len() {
        for j in (i + 1)..raters.len() {
            rows.push(AgreementRow {
                first: raters[i].0.clone(),
                second: raters[j].0.clone(),
                stats: pair_stats(&raters[i].1, &raters[j].1)?,
            });
        }
    }
    let (average, spread) = aggregate_pair_rows(&rows.iter().map(|r| r.stats.clone()).collect::<Vec<_>>())?;
    Ok(AgreementTable {
        rows,
        average,
        spread,
        n_studies: n,
    })
}

/// Average row logic for agreement tables: per-column mean and sample STD
/// over the pairwise rows. Exposed so published rows can be re-aggregated.
pub fn aggregate_pair_rows(rows: &[PairStats]) -> Result<(PairStats, PairStats)> {
    if rows.len() < 2 {
        return Err(Error::UndefinedMetric(
            "average row needs >= 2 pairwise rows".into(),
        ));
    }
    let col = |get: fn(&PairStats) -> f64| rows.iter().map(get).collect::<Vec<_>>();
    let agg = |values: &[f64]| -> Result<(f64, f64)> { Ok((mean(values), sample_std(values)?)) };
    let (r2_m, r2_s) = agg(&col(|s| s.r2))?;
    let (bm_m, bm_s) = agg(&col(|s| s.bias_mean))?;
    let (bmed_m, bmed_s) = agg(&col(|s| s.bias_median))?;
    let (std_m, std_s) = agg(&col(|s| s.deviation_std))?;
    let (iqr_m, iqr_s) = agg(&col(|s| s.deviation_iqr))?;
    Ok((
        PairStats {
            r2: r2_m,
            bias_mean: bm_m,
            bias_median: bmed_m,
            deviation_std: std_m,
            deviation_iqr: iqr_m,
        },
        PairStats {
            r2: r2_s,
            bias_mean: bm_s,
            bias_median: bmed_s,
            deviation_std: std_s,
            deviation_iqr: iqr_s,
        },
    ))
}

/// Inputs for population and subgroup evaluation.
#[derive(Debug, Clone)]
pub struct EvalInputs {
    pub gt_total: Vec<f64>,
    pub pred_total: Vec<f64>,
    pub pred_flag: Vec<bool>,
}

impl EvalInputs {
    pub fn new(gt_total: Vec<f64>, pred_total: Vec<f64>, pred_flag: Vec<bool>) -> Result<Self> {
        if gt_total.len() != pred_total.len() || gt_total.len() != pred_flag.len() {
            return Err(Error::ShapeMismatch(
                "eval inputs must have equal lengths".into(),
            ));
        }
        Ok(Self {
            gt_total,
            pred_total,
            pred_flag,
        })
    }

    /// Ground-truth nonzero flags.
    pub fn gt_flags(&self) -> Vec<bool> {
        self.gt_total.iter().map(|&t| t > 0.0).collect()
    }
}

/// Regression + classification reports on the subset selected by a
/// ground-truth predicate. Membership depends on labels only, never on
/// predictions.
pub fn subgroup_eval(
    inputs: &EvalInputs,
    predicate: impl Fn(f64) -> bool,
) -> Result<(RegressionReport, ClassificationReport)> {
    let keep: Vec<usize> = inputs
        .gt_total
        .iter()
        .enumerate()
        .filter(|(_, &gt)| predicate(gt))
        .map(|(i, _)| i)
        .collect();
    if keep.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "subgroup has {} studies, need >= 2",
            keep.len()
        )));
    }
    let gt: Vec<f64> = keep.iter().map(|&i| inputs.gt_total[i]).collect();
    let pred: Vec<f64> = keep.iter().map(|&i| inputs.pred_total[i]).collect();
    let gt_flags: Vec<bool> = gt.iter().map(|&t| t > 0.0).collect();
    let pred_flags: Vec<bool> = keep.iter().map(|&i| inputs.pred_flag[i]).collect();
    Ok((
        regression_report(&gt, &pred)?,
        classification_report(&gt_flags, &pred_flags, &pred)?,
    ))
}

/// Mean +/- sample STD aggregation of one metric across folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    /// Number of folds with a defined value for this metric.
    pub n_defined: usize,
}

/// Aggregate named per-fold metric values; undefined entries are excluded
/// and the count of defined folds is noted per metric.
pub fn cross_val_aggregate(
    per_fold: &[Vec<(String, Option<f64>)>],
) -> Result<Vec<(String, Aggregate)>> {
    if per_fold.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "aggregation needs >= 2 folds, got {}",
            per_fold.len()
        )));
    }
    let names: Vec<String> = per_fold[0].iter().map(|(name, _)| name.clone()).collect();
    let mut out = Vec::with_capacity(names.len());
    for name in &names {
        let values: Vec<f64> = per_fold
            .iter()
            .filter_map(|fold| {
                fold.iter()
                    .find(|(n, _)| n == name)
                    .and_then(|(_, v)| *v)
            })
            .collect();
        if values.len() < 2 {
            return Err(Error::UndefinedMetric(format!(
                "metric {name:?} defined in fewer than 2 folds"
            )));
        }
        out.push((
            name.clone(),
            Aggregate {
                mean: mean(&values),
                std: sample_std(&values)?,
                n_defined: values.len(),
            },
        ));
    }
    Ok(out)
}

impl RegressionReport {
    /// Named metric values for aggregation.
    pub fn metric_map(&self) -> Vec<(String, Option<f64>)> {
        vec![
            ("r2".into(), Some(self.r2)),
            ("bias_mean".into(), Some(self.bias_mean)),
            ("bias_median".into(), Some(self.bias_median)),
            ("deviation_std".into(), Some(self.deviation_std)),
            ("deviation_iqr".into(), Some(self.deviation_iqr)),
        ]
    }
}

impl ClassificationReport {
    /// Named metric values for aggregation.
    pub fn metric_map(&self) -> Vec<(String, Option<f64>)> {
        vec![
            ("recall_zero".into(), Some(self.recall_zero)),
            ("recall_nonzero".into(), Some(self.recall_nonzero)),
            ("precision_zero".into(), Some(self.precision_zero)),
            ("precision_nonzero".into(), Some(self.precision_nonzero)),
            ("recall_macro".into(), Some(self.recall_macro)),
            ("f1_macro".into(), Some(self.f1_macro)),
            ("mcc".into(), self.mcc),
            ("accuracy".into(), Some(self.accuracy)),
            ("roc_auc".into(), self.roc_auc),
        ]
    }
}
