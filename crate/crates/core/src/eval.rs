//! Metrics harness: ROC/AUC with bootstrap confidence intervals,
//! risk-coverage sweeps, clinically-significant miss rates, and the
//! radiologist error-rate baseline from published reader studies.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::aggregate::{Decision, StudyVerdict, TAU_REFER_ALL};
use crate::phantom::Manifest;
use crate::seeded::rng_for;
use crate::taxonomy::{any_significant, LabelVector, Taxonomy};

const STREAM_BOOTSTRAP: u64 = 0xB007;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("ROC needs both classes present")]
    SingleClass,
    #[error("data set is empty")]
    EmptyData,
    #[error("statistic undefined on every redraw of a bootstrap resample")]
    StatisticUndefined,
    #[error("no ground truth for study `{0}`")]
    MissingGroundTruth(String),
    #[error("invalid literary source: {0}")]
    BadSource(String),
    #[error("score and label counts differ")]
    LengthMismatch,
}

/// Study-uid keyed ground-truth labels.
pub type GroundTruth = BTreeMap<String, LabelVector>;

pub fn ground_truth_from_manifest(manifest: &Manifest) -> GroundTruth {
    manifest
        .records
        .iter()
        .map(|r| (r.study_uid.clone(), r.study_labels()))
        .collect()
}

// ---------------------------------------------------------------------------
// ROC
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// Non-decreasing from (0,0) to (1,1); thresholds descending.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Threshold sweep over distinct scores, descending, ties grouped; AUC by
/// trapezoid.
pub fn roc(scores: &[f64], labels: &[bool]) -> Result<RocCurve, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch);
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0usize;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
            threshold,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) * 0.5)
        .sum();
    Ok(RocCurve { points, auc })
}

/// Step-interpolated TPR at a given FPR (for CI ribbons on a common grid).
pub fn tpr_at_fpr(curve: &RocCurve, fpr: f64) -> f64 {
    let mut best = 0.0f64;
    for p in &curve.points {
        if p.fpr <= fpr {
            best = best.max(p.tpr);
        }
    }
    best
}

/// Bootstrap ROC ribbon on a fixed FPR grid: `(fpr, tpr_lo, tpr_hi)` per
/// grid point at the 95% level. None when every resample was single-class.
pub fn roc_ribbon(
    data: &[(f64, bool)],
    n_resamples: usize,
    seed: u64,
) -> Option<Vec<(f64, f64, f64)>> {
    let grid: Vec<f64> = (0..=50).map(|i| i as f64 / 50.0).collect();
    let mut bands: Vec<Vec<f64>> = vec![Vec::with_capacity(n_resamples); grid.len()];
    for r in 0..n_resamples {
        use rand::Rng;
        let mut rng = rng_for(seed, &[STREAM_BOOTSTRAP, 0xFB, r as u64]);
        let sample: Vec<(f64, bool)> = (0..data.len())
            .map(|_| data[rng.gen_range(0..data.len())])
            .collect();
        let scores: Vec<f64> = sample.iter().map(|x| x.0).collect();
        let labels: Vec<bool> = sample.iter().map(|x| x.1).collect();
        if let Ok(curve) = roc(&scores, &labels) {
            for (i, &f) in grid.iter().enumerate() {
                bands[i].push(tpr_at_fpr(&curve, f));
            }
        }
    }
    if bands[0].is_empty() {
        return None;
    }
    Some(
        grid.iter()
            .zip(bands.iter_mut())
            .map(|(&f, b)| {
                b.sort_by(|a, c| a.partial_cmp(c).expect("finite tpr"));
                (f, percentile(b, 0.025), percentile(b, 0.975))
            })
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// bootstrap
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapCi {
    pub lo: f64,
    pub hi: f64,
    /// Resamples redrawn because the statistic was undefined on them.
    pub redrawn: usize,
}

/// Percentile (2.5th, 97.5th) interval over with-replacement resamples at
/// study granularity; deterministic in `seed`. A resample on which the
/// statistic is undefined (e.g. single-class AUC) is redrawn and counted.
pub fn bootstrap_ci<T: Clone + Sync>(
    data: &[T],
    statistic: impl Fn(&[T]) -> Option<f64> + Sync,
    n_resamples: usize,
    seed: u64,
) -> Result<BootstrapCi, EvalError> {
    if data.is_empty() || n_resamples == 0 {
        return Err(EvalError::EmptyData);
    }
    let replicates: Vec<Result<(f64, usize), EvalError>> = (0..n_resamples)
        .into_par_iter()
        .map(|r| {
            use rand::Rng;
            let mut rng = rng_for(seed, &[STREAM_BOOTSTRAP, r as u64]);
            let mut redraws = 0usize;
            loop {
                let resample: Vec<T> = (0..data.len())
                    .map(|_| data[rng.gen_range(0..data.len())].clone())
                    .collect();
                if let Some(v) = statistic(&resample) {
                    return Ok((v, redraws));
                }
                redraws += 1;
                if redraws > 1000 {
                    return Err(EvalError::StatisticUndefined);
                }
            }
        })
        .collect();
    let mut stats = Vec::with_capacity(n_resamples);
    let mut redrawn = 0usize;
    for r in replicates {
        let (v, redraws) = r?;
        stats.push(v);
        redrawn += redraws;
    }
    stats.sort_by(|a, b| a.partial_cmp(b).expect("finite statistics"));
    Ok(BootstrapCi {
        lo: percentile(&stats, 0.025),
        hi: percentile(&stats, 0.975),
        redrawn,
    })
}

/// Linear interpolation between order statistics.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

// ---------------------------------------------------------------------------
// CSMR
// ---------------------------------------------------------------------------

/// Clinically significant miss rate over the reported subset.
#[derive(Debug, Clone, PartialEq)]
pub struct CsmrResult {
    pub n_reported: usize,
    pub n_missed_significant: usize,
    /// None when nothing was reported; a 0 here would overstate safety.
    pub csmr: Option<f64>,
    /// Reported fraction of all studies.
    pub coverage: f64,
}

/// A miss is a Report-decision study whose ground truth carries at least one
/// clinically significant trait. The denominator is the reported subset.
pub fn csmr(
    verdicts: &[StudyVerdict],
    truth: &GroundTruth,
    tax: &Taxonomy,
) -> Result<CsmrResult, EvalError> {
    if verdicts.is_empty() {
        return Err(EvalError::EmptyData);
    }
    let mut n_reported = 0usize;
    let mut n_missed = 0usize;
    for v in verdicts {
        let gt = truth
            .get(&v.study_uid)
            .ok_or_else(|| EvalError::MissingGroundTruth(v.study_uid.clone()))?;
        if v.decision == Decision::Report {
            n_reported += 1;
            if any_significant(gt, tax) {
                n_missed += 1;
            }
        }
    }
    Ok(CsmrResult {
        n_reported,
        n_missed_significant: n_missed,
        csmr: (n_reported > 0).then(|| n_missed as f64 / n_reported as f64),
        coverage: n_reported as f64 / verdicts.len() as f64,
    })
}

/// Zero-false-positive gate check: Report verdicts carrying a
/// predicted-positive significant trait. Must be zero by construction.
pub fn gate_violations(verdicts: &[StudyVerdict], tax: &Taxonomy) -> usize {
    verdicts
        .iter()
        .filter(|v| v.decision == Decision::Report)
        .filter(|v| tax.significant_ids().any(|k| v.trait_scores.get(k) >= 0.5))
        .count()
}

// ---------------------------------------------------------------------------
// literary baseline
// ---------------------------------------------------------------------------

/// One published reader study: cohort size and clinically significant error
/// rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiterarySource {
    pub n_studies: u64,
    pub error_rate: f64,
}

/// The five head-CT reader studies behind the radiologist baseline.
pub fn literary_sources_head_ct() -> Vec<LiterarySource> {
    vec![
        LiterarySource { n_studies: 137, error_rate: 0.04 },
        LiterarySource { n_studies: 716, error_rate: 0.02 },
        LiterarySource { n_studies: 1081, error_rate: 0.004 },
        LiterarySource { n_studies: 560, error_rate: 0.007 },
        LiterarySource { n_studies: 284, error_rate: 0.02 },
    ]
}

/// Fraction of radiologist errors that are misses (the most conservative of
/// the published rates).
pub const LITERARY_MISS_FRACTION: f64 = 0.68;

/// Weighted summation of reader-study error rates: returns `(overall error
/// rate, clinically significant miss rate)`.
pub fn literary_rate(
    sources: &[LiterarySource],
    miss_fraction: f64,
) -> Result<(f64, f64), EvalError> {
    if sources.is_empty() {
        return Err(EvalError::EmptyData);
    }
    if !(0.0..=1.0).contains(&miss_fraction) {
        return Err(EvalError::BadSource(format!(
            "miss fraction {miss_fraction} outside [0,1]"
        )));
    }
    let mut weighted = 0.0f64;
    let mut total = 0u64;
    for s in sources {
        if s.n_studies == 0 {
            return Err(EvalError::BadSource("source with zero studies".into()));
        }
        if !(0.0..=1.0).contains(&s.error_rate) {
            return Err(EvalError::BadSource(format!(
                "error rate {} outside [0,1]",
                s.error_rate
            )));
        }
        weighted += s.n_studies as f64 * s.error_rate;
        total += s.n_studies;
    }
    let overall = weighted / total as f64;
    Ok((overall, overall * miss_fraction))
}

// ---------------------------------------------------------------------------
// risk-coverage
// ---------------------------------------------------------------------------

/// Per-study inputs for the risk-coverage sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyOutcome {
    pub confidence: f32,
    /// Every clinically significant trait scored below 0.5.
    pub negative_predicted: bool,
    /// Ground truth carries a clinically significant trait.
    pub has_significant: bool,
}

pub fn study_outcomes(
    verdicts: &[StudyVerdict],
    truth: &GroundTruth,
    tax: &Taxonomy,
) -> Result<Vec<StudyOutcome>, EvalError> {
    verdicts
        .iter()
        .map(|v| {
            let gt = truth
                .get(&v.study_uid)
                .ok_or_else(|| EvalError::MissingGroundTruth(v.study_uid.clone()))?;
            Ok(StudyOutcome {
                confidence: v.confidence,
                negative_predicted: tax.significant_ids().all(|k| v.trait_scores.get(k) < 0.5),
                has_significant: any_significant(gt, tax),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskCoveragePoint {
    pub tau: f32,
    pub coverage: f64,
    pub n_reported: usize,
    pub csmr: Option<f64>,
}

/// One point per distinct reportable confidence (ascending tau), closing with
/// the refer-all sentinel; coverage is strictly decreasing along the sweep.
pub fn risk_coverage(outcomes: &[StudyOutcome]) -> Vec<RiskCoveragePoint> {
    let n_total = outcomes.len();
    let mut taus: Vec<f32> = outcomes
        .iter()
        .filter(|o| o.negative_predicted)
        .map(|o| o.confidence)
        .collect();
    taus.sort_by(|a, b| a.partial_cmp(b).expect("finite confidences"));
    taus.dedup();
    taus.push(TAU_REFER_ALL);
    taus.iter()
        .map(|&tau| {
            let reported: Vec<&StudyOutcome> = outcomes
                .iter()
                .filter(|o| o.negative_predicted && o.confidence >= tau)
                .collect();
            let n_reported = reported.len();
            let missed = reported.iter().filter(|o| o.has_significant).count();
            RiskCoveragePoint {
                tau,
                coverage: if n_total == 0 {
                    0.0
                } else {
                    n_reported as f64 / n_total as f64
                },
                n_reported,
                csmr: (n_reported > 0).then(|| missed as f64 / n_reported as f64),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// trait table
// ---------------------------------------------------------------------------

/// Per-trait incidence in the evaluated set and within each operating point's
/// reported subset, as percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct TraitTable {
    pub trait_names: Vec<String>,
    pub trial_pct: Vec<f64>,
    /// (operating point label, per-trait percentage of reported studies;
    /// None when nothing was reported).
    pub columns: Vec<(String, Vec<Option<f64>>)>,
}

pub fn trait_table(
    operating_points: &[(String, &[StudyVerdict])],
    truth: &GroundTruth,
    tax: &Taxonomy,
) -> Result<TraitTable, EvalError> {
    let k = tax.len();
    let all_uids: Vec<&String> = operating_points
        .first()
        .map(|(_, v)| v.iter().map(|x| &x.study_uid).collect())
        .unwrap_or_default();
    if all_uids.is_empty() {
        return Err(EvalError::EmptyData);
    }
    let gt_of = |uid: &String| {
        truth
            .get(uid)
            .ok_or_else(|| EvalError::MissingGroundTruth(uid.clone()))
    };
    let mut trial_counts = vec![0usize; k];
    for uid in &all_uids {
        let gt = gt_of(uid)?;
        for t in 0..k {
            if gt.get(t) != 0.0 {
                trial_counts[t] += 1;
            }
        }
    }
    let trial_pct: Vec<f64> = trial_counts
        .iter()
        .map(|&c| 100.0 * c as f64 / all_uids.len() as f64)
        .collect();
    let mut columns = Vec::new();
    for (label, verdicts) in operating_points {
        let reported: Vec<&StudyVerdict> = verdicts
            .iter()
            .filter(|v| v.decision == Decision::Report)
            .collect();
        let mut col = vec![None; k];
        if !reported.is_empty() {
            let mut counts = vec![0usize; k];
            for v in &reported {
                let gt = gt_of(&v.study_uid)?;
                for t in 0..k {
                    if gt.get(t) != 0.0 {
                        counts[t] += 1;
                    }
                }
            }
            col = counts
                .iter()
                .map(|&c| Some(100.0 * c as f64 / reported.len() as f64))
                .collect();
        }
        columns.push((label.clone(), col));
    }
    Ok(TraitTable {
        trait_names: tax.traits().iter().map(|t| t.name.clone()).collect(),
        trial_pct,
        columns,
    })
}

// ---------------------------------------------------------------------------
// metrics CSV
// ---------------------------------------------------------------------------

/// One row of the metrics file: (metric, trait_or_ALL, operating_point,
/// value, ci_lo, ci_hi).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub metric: String,
    pub trait_or_all: String,
    pub operating_point: String,
    pub value: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

impl MetricsRow {
    pub fn new(metric: &str, trait_or_all: &str, operating_point: &str, value: Option<f64>) -> Self {
        Self {
            metric: metric.into(),
            trait_or_all: trait_or_all.into(),
            operating_point: operating_point.into(),
            value,
            ci_lo: None,
            ci_hi: None,
        }
    }

    pub fn with_ci(mut self, ci: &BootstrapCi) -> Self {
        self.ci_lo = Some(ci.lo);
        self.ci_hi = Some(ci.hi);
        self
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let cell = |v: &Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
    let mut out = String::from("metric,trait_or_ALL,operating_point,value,ci_lo,ci_hi\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.metric,
            r.trait_or_all,
            r.operating_point,
            cell(&r.value),
            cell(&r.ci_lo),
            cell(&r.ci_hi)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::decide;
    use crate::taxonomy::Taxonomy;
    use rand::Rng;

    #[test]
    fn perfectly_separated_scores_have_auc_one() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [true, true, false, false];
        let c = roc(&scores, &labels).unwrap();
        assert_eq!(c.auc, 1.0);
        let first = c.points.first().unwrap();
        let last = c.points.last().unwrap();
        assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    #[test]
    fn identical_scores_have_auc_half() {
        let c = roc(&[0.5, 0.5, 0.5, 0.5], &[true, false, true, false]).unwrap();
        assert_eq!(c.auc, 0.5);
        assert_eq!(c.points.len(), 2);
    }

    #[test]
    fn single_class_is_an_error() {
        assert_eq!(
            roc(&[0.1, 0.2], &[true, true]).unwrap_err(),
            EvalError::SingleClass
        );
    }

    /// O(n^2) pair-counting oracle: P(score+ > score-) + 0.5 P(tie).
    fn auc_pair_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0u64;
        let mut ties = 0u64;
        let mut pairs = 0u64;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1;
                if scores[i] > scores[j] {
                    wins += 1;
                } else if scores[i] == scores[j] {
                    ties += 1;
                }
            }
        }
        (wins as f64 + ties as f64 * 0.5) / pairs as f64
    }

    #[test]
    fn auc_matches_pair_counting_oracle() {
        let mut rng = rng_for(51, &[0]);
        for trial in 0..30 {
            let n = 50;
            // quantized scores force plenty of ties
            let scores: Vec<f64> =
                (0..n).map(|_| (rng.gen::<f64>() * 8.0).round() / 8.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.gen::<bool>()).collect();
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                continue;
            }
            let sweep = roc(&scores, &labels).unwrap().auc;
            let oracle = auc_pair_oracle(&scores, &labels);
            assert!(
                (sweep - oracle).abs() < 1e-12,
                "trial {trial}: sweep {sweep} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn bootstrap_on_constant_data_has_zero_width() {
        let data = vec![2.5f64; 40];
        let ci = bootstrap_ci(&data, |d| Some(d.iter().sum::<f64>() / d.len() as f64), 200, 9)
            .unwrap();
        assert_eq!(ci.lo, 2.5);
        assert_eq!(ci.hi, 2.5);
        assert_eq!(ci.redrawn, 0);
    }

    #[test]
    fn bootstrap_is_deterministic_in_seed() {
        let mut rng = rng_for(52, &[0]);
        let data: Vec<f64> = (0..100).map(|_| rng.gen::<f64>()).collect();
        let mean = |d: &[f64]| Some(d.iter().sum::<f64>() / d.len() as f64);
        let a = bootstrap_ci(&data, mean, 500, 7).unwrap();
        let b = bootstrap_ci(&data, mean, 500, 7).unwrap();
        assert_eq!(a, b);
        let c = bootstrap_ci(&data, mean, 500, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bootstrap_auc_interval_contains_point_estimate() {
        let mut rng = rng_for(53, &[0]);
        let data: Vec<(f64, bool)> = (0..200)
            .map(|_| {
                let label = rng.gen::<bool>();
                let score = if label {
                    0.4 + 0.6 * rng.gen::<f64>()
                } else {
                    0.6 * rng.gen::<f64>()
                };
                (score, label)
            })
            .collect();
        let stat = |d: &[(f64, bool)]| {
            let scores: Vec<f64> = d.iter().map(|x| x.0).collect();
            let labels: Vec<bool> = d.iter().map(|x| x.1).collect();
            roc(&scores, &labels).ok().map(|c| c.auc)
        };
        let point = stat(&data).unwrap();
        let ci = bootstrap_ci(&data, stat, 500, 11).unwrap();
        assert!(ci.lo <= point && point <= ci.hi, "[{}, {}] vs {point}", ci.lo, ci.hi);
    }

    #[test]
    fn bootstrap_width_shrinks_with_sample_size() {
        let gen_data = |n: usize, seed: u64| -> Vec<f64> {
            let mut rng = rng_for(seed, &[1]);
            (0..n).map(|_| rng.gen::<f64>()).collect()
        };
        let mean = |d: &[f64]| Some(d.iter().sum::<f64>() / d.len() as f64);
        let mut wide = 0;
        for seed in 0..10 {
            let small = bootstrap_ci(&gen_data(100, seed), mean, 300, seed).unwrap();
            let large = bootstrap_ci(&gen_data(1000, seed), mean, 300, seed).unwrap();
            if large.hi - large.lo < small.hi - small.lo {
                wide += 1;
            }
        }
        assert!(wide >= 8, "larger samples should give narrower intervals");
    }

    fn tax() -> Taxonomy {
        Taxonomy::desk_default()
    }

    fn verdict(uid: &str, sig_score: f32, conf: f32, tau: f32) -> StudyVerdict {
        let t = tax();
        let mut scores = LabelVector::zeros(t.len());
        scores.set(t.by_name("intracranial_hemorrhage").unwrap().id, sig_score);
        decide(uid, scores, conf, tau, &t)
    }

    fn truth_with(uids_sig: &[(&str, bool)]) -> GroundTruth {
        let t = tax();
        uids_sig
            .iter()
            .map(|(uid, sig)| {
                let mut gt = LabelVector::zeros(t.len());
                if *sig {
                    gt.set(t.by_name("intracranial_hemorrhage").unwrap().id, 1.0);
                }
                (uid.to_string(), gt)
            })
            .collect()
    }

    #[test]
    fn csmr_counts_reported_misses() {
        let t = tax();
        let mut verdicts = Vec::new();
        let mut truth_pairs = Vec::new();
        let names: Vec<String> = (0..1000).map(|i| format!("s{i}")).collect();
        for (i, name) in names.iter().enumerate() {
            verdicts.push(verdict(name, 0.1, 0.9, 0.5)); // all reported
            truth_pairs.push((name.as_str(), i < 2)); // 2 missed significant
        }
        let truth = truth_with(&truth_pairs);
        let r = csmr(&verdicts, &truth, &t).unwrap();
        assert_eq!(r.n_reported, 1000);
        assert_eq!(r.n_missed_significant, 2);
        assert!((r.csmr.unwrap() - 0.002).abs() < 1e-12);
    }

    #[test]
    fn csmr_with_nothing_reported_is_undefined() {
        let t = tax();
        let verdicts = vec![verdict("a", 0.9, 0.9, 0.5)]; // positive -> referred
        let truth = truth_with(&[("a", true)]);
        let r = csmr(&verdicts, &truth, &t).unwrap();
        assert_eq!(r.n_reported, 0);
        assert_eq!(r.csmr, None);
    }

    #[test]
    fn oracle_scorer_has_zero_csmr() {
        // verdicts built from ground truth itself: positives score 1
        let t = tax();
        let names: Vec<String> = (0..50).map(|i| format!("s{i}")).collect();
        let pairs: Vec<(&str, bool)> =
            names.iter().enumerate().map(|(i, n)| (n.as_str(), i % 3 == 0)).collect();
        let truth = truth_with(&pairs);
        let verdicts: Vec<StudyVerdict> = pairs
            .iter()
            .map(|(uid, sig)| verdict(uid, if *sig { 1.0 } else { 0.0 }, 1.0, 0.5))
            .collect();
        let r = csmr(&verdicts, &truth, &t).unwrap();
        assert_eq!(r.n_missed_significant, 0);
        assert_eq!(r.csmr, Some(0.0));
        assert_eq!(gate_violations(&verdicts, &t), 0);
    }

    #[test]
    fn csmr_denominator_is_the_reported_subset() {
        let t = tax();
        // 4 studies: 2 reported (1 miss), 2 referred
        let verdicts = vec![
            verdict("a", 0.1, 0.9, 0.5),
            verdict("b", 0.1, 0.9, 0.5),
            verdict("c", 0.9, 0.9, 0.5),
            verdict("d", 0.1, 0.1, 0.5),
        ];
        let truth = truth_with(&[("a", true), ("b", false), ("c", true), ("d", true)]);
        let r = csmr(&verdicts, &truth, &t).unwrap();
        assert_eq!(r.n_reported, 2);
        assert_eq!(r.csmr, Some(0.5), "denominator must be 2, not 4");
        assert_eq!(r.coverage, 0.5);
    }

    #[test]
    fn missing_ground_truth_is_an_error() {
        let t = tax();
        let verdicts = vec![verdict("a", 0.1, 0.9, 0.5)];
        assert!(matches!(
            csmr(&verdicts, &GroundTruth::new(), &t),
            Err(EvalError::MissingGroundTruth(_))
        ));
    }

    #[test]
    fn literary_rates_from_the_five_sources() {
        let (overall, miss) =
            literary_rate(&literary_sources_head_ct(), LITERARY_MISS_FRACTION).unwrap();
        assert!((overall - 0.0121).abs() < 1e-4, "overall {overall}");
        assert!((miss - 0.0083).abs() < 1e-4, "miss {miss}");
        // computed values to full precision
        assert!((overall - 0.012139).abs() < 1e-6);
        assert!((miss - 0.008255).abs() < 1e-6);
    }

    #[test]
    fn literary_single_source_is_its_own_rate() {
        let (overall, miss) = literary_rate(
            &[LiterarySource { n_studies: 100, error_rate: 0.02 }],
            0.5,
        )
        .unwrap();
        assert_eq!(overall, 0.02);
        assert_eq!(miss, 0.01);
    }

    #[test]
    fn risk_coverage_sweep_properties() {
        let mut rng = rng_for(54, &[0]);
        let outcomes: Vec<StudyOutcome> = (0..300)
            .map(|_| StudyOutcome {
                confidence: (rng.gen::<f32>() * 20.0).round() / 20.0,
                negative_predicted: rng.gen::<f64>() < 0.8,
                has_significant: rng.gen::<f64>() < 0.3,
            })
            .collect();
        let pts = risk_coverage(&outcomes);
        // strictly decreasing coverage, ending at zero
        for w in pts.windows(2) {
            assert!(w[1].coverage < w[0].coverage);
        }
        assert_eq!(pts.last().unwrap().coverage, 0.0);
        assert_eq!(pts.last().unwrap().csmr, None);

        // each point matches an independent recomputation at that tau
        for p in &pts {
            let reported: Vec<&StudyOutcome> = outcomes
                .iter()
                .filter(|o| o.negative_predicted && o.confidence >= p.tau)
                .collect();
            assert_eq!(p.n_reported, reported.len());
            let miss = reported.iter().filter(|o| o.has_significant).count();
            let expect = (!reported.is_empty()).then(|| miss as f64 / reported.len() as f64);
            assert_eq!(p.csmr, expect);
        }
    }

    #[test]
    fn risk_coverage_of_all_reportable_studies_starts_at_full_coverage() {
        let outcomes: Vec<StudyOutcome> = (1..=10)
            .map(|i| StudyOutcome {
                confidence: i as f32 / 10.0,
                negative_predicted: true,
                has_significant: false,
            })
            .collect();
        let pts = risk_coverage(&outcomes);
        assert_eq!(pts.first().unwrap().coverage, 1.0);
        assert_eq!(pts.last().unwrap().coverage, 0.0);
        assert!(pts.iter().all(|p| p.csmr.unwrap_or(0.0) == 0.0));
    }

    #[test]
    fn trait_table_columns() {
        let t = tax();
        let ich = t.by_name("intracranial_hemorrhage").unwrap().id;
        // four studies, two with ICH; all negative-predicted, tau 0 reports all
        let uids = ["a", "b", "c", "d"];
        let truth = truth_with(&[("a", true), ("b", true), ("c", false), ("d", false)]);
        let all: Vec<StudyVerdict> =
            uids.iter().map(|u| verdict(u, 0.1, 1.0, 0.0)).collect();
        let table = trait_table(&[("full".into(), &all)], &truth, &t).unwrap();
        assert_eq!(table.trial_pct[ich], 50.0);
        // absent trait: incidence 0
        let mass = t.by_name("intracranial_mass").unwrap().id;
        assert_eq!(table.trial_pct[mass], 0.0);
        // full coverage: column equals incidence among the reported set
        assert_eq!(table.columns[0].1[ich], Some(50.0));

        // column counts cross-check against the truth map
        let reported_with_ich = (table.columns[0].1[ich].unwrap() / 100.0 * 4.0).round() as usize;
        let manifest_count = truth.values().filter(|g| g.get(ich) != 0.0).count();
        assert_eq!(reported_with_ich, manifest_count);
    }

    #[test]
    fn metrics_csv_renders_na_for_missing() {
        let rows = vec![
            MetricsRow::new("csmr", "SIGNIFICANT", "net-8.5", None),
            MetricsRow::new("auc", "ALL", "full", Some(0.95)),
        ];
        let csv = metrics_csv(&rows);
        assert!(csv.contains("csmr,SIGNIFICANT,net-8.5,NA,NA,NA"));
        assert!(csv.contains("auc,ALL,full,0.95,NA,NA"));
    }
}
