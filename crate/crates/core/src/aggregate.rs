//! Study-level aggregation: ensemble averaging of per-slice posteriors,
//! top-m pooling into trait scores, decision-margin confidence, and the
//! confidence-gated Report/Refer policy.
//!
//! A study is only reported when the system is confident *and* every
//! clinically significant trait reads negative, so reported studies carry no
//! positive significant finding by construction.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dicom::HuVolume;
use crate::net::{slice_to_input, Checkpoint, NetError, Network, NetworkSpec};
use crate::taxonomy::{LabelVector, Taxonomy};

/// Slice scores pooled per trait: mean of the top-m slice scores.
pub const TOP_M_SLICES: usize = 3;

/// Sentinel threshold above every confidence; calibrating to coverage 0.
pub const TAU_REFER_ALL: f32 = 1.0 + f32::EPSILON;

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("ensemble needs at least one member")]
    EmptyEnsemble,
    #[error("ensemble members disagree on spec or taxonomy hash")]
    MixedMembers,
    #[error("study volume has no slices")]
    EmptyVolume,
    #[error("taxonomy has no clinically significant traits")]
    NoSignificantTraits,
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("target coverage {0} outside [0,1]")]
    BadCoverage(f64),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Report = auto-generated negative report; Refer = human radiologist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Report,
    Refer,
}

/// Per-study aggregated scores, confidence, and gate outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyVerdict {
    pub study_uid: String,
    pub trait_scores: LabelVector,
    pub confidence: f32,
    pub decision: Decision,
    pub threshold: f32,
}

/// Mean-of-posteriors ensemble over identically-shaped members.
pub struct Ensemble {
    members: Vec<Network<f32>>,
    taxonomy_hash: u64,
}

impl Ensemble {
    pub fn new(members: Vec<Network<f32>>, taxonomy_hash: u64) -> Result<Self, AggregateError> {
        if members.is_empty() {
            return Err(AggregateError::EmptyEnsemble);
        }
        if members.iter().any(|m| m.spec() != members[0].spec()) {
            return Err(AggregateError::MixedMembers);
        }
        Ok(Self {
            members,
            taxonomy_hash,
        })
    }

    /// Load members from checkpoints, all validated against one taxonomy.
    pub fn from_checkpoints(
        spec: &NetworkSpec,
        checkpoints: &[Checkpoint],
        taxonomy_hash: u64,
    ) -> Result<Self, AggregateError> {
        if checkpoints.is_empty() {
            return Err(AggregateError::EmptyEnsemble);
        }
        let members = checkpoints
            .iter()
            .map(|c| c.instantiate(spec, taxonomy_hash))
            .collect::<Result<Vec<_>, _>>()?;
        Ensemble::new(members, taxonomy_hash)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn taxonomy_hash(&self) -> u64 {
        self.taxonomy_hash
    }

    /// Member-averaged posteriors for one slice.
    fn slice_scores(&self, pixels: &[f32], rows: usize, cols: usize) -> Result<Vec<f32>, NetError> {
        let mut acc: Option<Vec<f32>> = None;
        for m in &self.members {
            let p = m.posteriors(slice_to_input(pixels, rows, cols))?;
            match &mut acc {
                None => acc = Some(p.as_slice().to_vec()),
                Some(a) => a.iter_mut().zip(p.iter()).for_each(|(x, y)| *x += y),
            }
        }
        let mut a = acc.expect("ensemble is non-empty");
        let inv = 1.0 / self.members.len() as f32;
        a.iter_mut().for_each(|x| *x *= inv);
        Ok(a)
    }
}

/// Mean of the top-m values (m clipped to the available count).
pub fn top_m_mean(values: &[f32], m: usize) -> f32 {
    debug_assert!(!values.is_empty());
    let m = m.min(values.len()).max(1);
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("scores are finite"));
    sorted[..m].iter().sum::<f32>() / m as f32
}

/// Score every slice and pool into study-level trait scores.
///
/// Slices are scored with the member-mean posterior; the study score per
/// trait is the mean of the top-m slice scores, m = min(3, n_slices).
pub fn score_study(
    ensemble: &Ensemble,
    volume: &HuVolume,
) -> Result<(Vec<LabelVector>, LabelVector), AggregateError> {
    if volume.slices.is_empty() {
        return Err(AggregateError::EmptyVolume);
    }
    let slice_scores: Vec<Vec<f32>> = volume
        .slices
        .par_iter()
        .map(|s| ensemble.slice_scores(s, volume.rows, volume.cols))
        .collect::<Result<_, _>>()?;
    let k = slice_scores[0].len();
    let m = TOP_M_SLICES.min(volume.slices.len());
    let study: Vec<f32> = (0..k)
        .map(|t| {
            let per_slice: Vec<f32> = slice_scores.iter().map(|s| s[t]).collect();
            top_m_mean(&per_slice, m)
        })
        .collect();
    Ok((
        slice_scores.into_iter().map(LabelVector::new).collect(),
        LabelVector::new(study),
    ))
}

/// Worst-trait decision margin over the clinically significant set:
/// `min_k (1 - 2*min(s_k, 1-s_k))`. 1 when every significant score is
/// saturated, 0 when any sits at 0.5.
pub fn study_confidence(trait_scores: &LabelVector, tax: &Taxonomy) -> Result<f32, AggregateError> {
    let mut conf: Option<f32> = None;
    for k in tax.significant_ids() {
        let s = trait_scores.get(k);
        let margin = 1.0 - 2.0 * s.min(1.0 - s);
        conf = Some(conf.map_or(margin, |c| c.min(margin)));
    }
    conf.ok_or(AggregateError::NoSignificantTraits)
}

/// Apply the confidence gate: Report iff confidence clears the threshold and
/// every clinically significant trait scores below 0.5.
pub fn decide(
    study_uid: &str,
    trait_scores: LabelVector,
    confidence: f32,
    tau: f32,
    tax: &Taxonomy,
) -> StudyVerdict {
    let all_significant_negative = tax.significant_ids().all(|k| trait_scores.get(k) < 0.5);
    let decision = if confidence >= tau && all_significant_negative {
        Decision::Report
    } else {
        Decision::Refer
    };
    StudyVerdict {
        study_uid: study_uid.to_string(),
        trait_scores,
        confidence,
        decision,
        threshold: tau,
    }
}

/// Pick the smallest threshold whose coverage does not exceed the target.
///
/// Coverage counts negative-predicted studies with `confidence >= tau` over
/// the whole calibration set; ties resolve toward lower coverage. A target of
/// zero (or an unreachable one) returns the refer-all sentinel.
pub fn calibrate_threshold(
    calibration: &[(f32, bool)],
    target_coverage: f64,
) -> Result<f32, AggregateError> {
    if calibration.is_empty() {
        return Err(AggregateError::EmptyCalibration);
    }
    if !(0.0..=1.0).contains(&target_coverage) {
        return Err(AggregateError::BadCoverage(target_coverage));
    }
    let n_total = calibration.len() as f64;
    let mut confidences: Vec<f32> = calibration
        .iter()
        .filter(|(_, negative)| *negative)
        .map(|(c, _)| *c)
        .collect();
    confidences.sort_by(|a, b| a.partial_cmp(b).expect("confidences are finite"));
    confidences.dedup();
    // ascending thresholds: lower tau reports more
    let mut best = TAU_REFER_ALL;
    for &tau in confidences.iter().rev() {
        let covered = calibration
            .iter()
            .filter(|(c, negative)| *negative && *c >= tau)
            .count() as f64
            / n_total;
        if covered <= target_coverage {
            best = tau;
        } else {
            break;
        }
    }
    Ok(best)
}

/// Coverage of a threshold over outcome pairs `(confidence, negative_predicted)`.
pub fn coverage_at(outcomes: &[(f32, bool)], tau: f32) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes
        .iter()
        .filter(|(c, negative)| *negative && *c >= tau)
        .count() as f64
        / outcomes.len() as f64
}

// ---------------------------------------------------------------------------
// verdict file IO (line-delimited JSON)
// ---------------------------------------------------------------------------

pub fn write_verdicts(verdicts: &[StudyVerdict], path: &Path) -> Result<(), AggregateError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in verdicts {
        serde_json::to_writer(&mut f, v).map_err(std::io::Error::other)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_verdicts(path: &Path) -> Result<Vec<StudyVerdict>, AggregateError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded::rng_for;
    use crate::tensor::Tensor;

    fn tax() -> Taxonomy {
        Taxonomy::desk_default()
    }

    #[test]
    fn top_m_mean_examples() {
        assert_eq!(top_m_mean(&[0.0, 0.0, 0.0], 3), 0.0);
        assert_eq!(top_m_mean(&[0.9], 3), 0.9);
        let got = top_m_mean(&[0.9, 0.8, 0.1, 0.05], 3);
        assert!((got - 0.6).abs() < 1e-6, "(0.9+0.8+0.1)/3 = 0.6, got {got}");
    }

    #[test]
    fn confidence_is_the_worst_significant_margin() {
        let t = tax();
        let mut scores = LabelVector::zeros(t.len());
        assert_eq!(study_confidence(&scores, &t).unwrap(), 1.0);

        scores.set(t.by_name("intracranial_hemorrhage").unwrap().id, 0.5);
        assert_eq!(study_confidence(&scores, &t).unwrap(), 0.0);

        let mut scores = LabelVector::zeros(t.len());
        scores.set(t.by_name("intracranial_hemorrhage").unwrap().id, 0.1);
        scores.set(t.by_name("acute_infarct").unwrap().id, 0.9);
        let c = study_confidence(&scores, &t).unwrap();
        assert!((c - 0.8).abs() < 1e-6);
    }

    #[test]
    fn decide_gates_on_confidence_and_significant_negativity() {
        let t = tax();
        let neg = LabelVector::zeros(t.len());
        let v = decide("s", neg.clone(), 0.9, 0.5, &t);
        assert_eq!(v.decision, Decision::Report);

        let mut pos = neg.clone();
        pos.set(t.by_name("intracranial_hemorrhage").unwrap().id, 0.8);
        let conf = study_confidence(&pos, &t).unwrap();
        let v = decide("s", pos, conf, 0.0, &t);
        assert_eq!(v.decision, Decision::Refer, "positive findings always refer");

        let v = decide("s", neg, 1.0, TAU_REFER_ALL, &t);
        assert_eq!(v.decision, Decision::Refer, "tau above range refers everything");
    }

    #[test]
    fn report_verdicts_never_carry_positive_significant_scores() {
        let t = tax();
        let mut rng = rng_for(17, &[3]);
        for _ in 0..500 {
            use rand::Rng;
            let scores =
                LabelVector::new((0..t.len()).map(|_| rng.gen::<f32>()).collect());
            let conf = study_confidence(&scores, &t).unwrap();
            let v = decide("s", scores, conf, 0.3, &t);
            if v.decision == Decision::Report {
                for k in t.significant_ids() {
                    assert!(v.trait_scores.get(k) < 0.5);
                }
            }
        }
    }

    #[test]
    fn calibration_examples() {
        // 10 negative-predicted studies with confidences 0.1..=1.0
        let cal: Vec<(f32, bool)> = (1..=10).map(|i| (i as f32 / 10.0, true)).collect();
        let tau = calibrate_threshold(&cal, 0.4).unwrap();
        assert!((tau - 0.7).abs() < 1e-6);
        assert_eq!(
            cal.iter().filter(|(c, n)| *n && *c >= tau).count(),
            4,
            "exactly 4 reported"
        );

        // target 1.0 with everything negative-predicted: tau = min confidence
        let tau = calibrate_threshold(&cal, 1.0).unwrap();
        assert!((tau - 0.1).abs() < 1e-6);
        assert_eq!(coverage_at(&cal, tau), 1.0);

        // target 0: sentinel above range
        let tau = calibrate_threshold(&cal, 0.0).unwrap();
        assert_eq!(tau, TAU_REFER_ALL);
        assert_eq!(coverage_at(&cal, tau), 0.0);

        assert!(matches!(
            calibrate_threshold(&[], 0.5),
            Err(AggregateError::EmptyCalibration)
        ));
    }

    #[test]
    fn coverage_is_monotone_in_tau() {
        use rand::Rng;
        let mut rng = rng_for(18, &[4]);
        let outcomes: Vec<(f32, bool)> = (0..200)
            .map(|_| (rng.gen::<f32>(), rng.gen::<f64>() < 0.8))
            .collect();
        let mut taus: Vec<f32> = outcomes.iter().map(|(c, _)| *c).collect();
        taus.push(TAU_REFER_ALL);
        taus.push(0.0);
        taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut prev = f64::INFINITY;
        for &tau in &taus {
            let c = coverage_at(&outcomes, tau);
            assert!(c <= prev, "coverage must not increase as tau grows");
            prev = c;
        }
    }

    fn tiny_ensemble(n: usize, seed: u64) -> (Ensemble, NetworkSpec) {
        let spec = NetworkSpec::desk_default(32, 12, 0.0);
        let members = (0..n)
            .map(|i| Network::init(&spec, &mut rng_for(seed, &[i as u64])).unwrap())
            .collect();
        (Ensemble::new(members, 7).unwrap(), spec)
    }

    fn tiny_volume(n_slices: usize) -> HuVolume {
        let mut rng = rng_for(3, &[9]);
        use rand::Rng;
        HuVolume {
            study_uid: "u".into(),
            rows: 32,
            cols: 32,
            slices: (0..n_slices)
                .map(|_| (0..1024).map(|_| rng.gen::<f32>() * 100.0).collect())
                .collect(),
        }
    }

    #[test]
    fn identical_members_equal_the_single_member() {
        let spec = NetworkSpec::desk_default(32, 12, 0.0);
        let one = Network::init(&spec, &mut rng_for(5, &[0])).unwrap();
        let twin = Network::init(&spec, &mut rng_for(5, &[0])).unwrap();
        let single = Ensemble::new(vec![one], 7).unwrap();
        let double = {
            let a = Network::init(&spec, &mut rng_for(5, &[0])).unwrap();
            Ensemble::new(vec![twin, a], 7).unwrap()
        };
        let vol = tiny_volume(4);
        let (_, s1) = score_study(&single, &vol).unwrap();
        let (_, s2) = score_study(&double, &vol).unwrap();
        for (a, b) in s1.iter().zip(s2.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn study_scores_are_slice_order_invariant() {
        let (ens, _) = tiny_ensemble(2, 11);
        let vol = tiny_volume(5);
        let mut shuffled = vol.clone();
        shuffled.slices.reverse();
        let (_, a) = score_study(&ens, &vol).unwrap();
        let (_, b) = score_study(&ens, &shuffled).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_volume_is_an_error() {
        let (ens, _) = tiny_ensemble(1, 12);
        let vol = HuVolume {
            study_uid: "u".into(),
            rows: 32,
            cols: 32,
            slices: Vec::new(),
        };
        assert!(matches!(
            score_study(&ens, &vol),
            Err(AggregateError::EmptyVolume)
        ));
    }

    #[test]
    fn single_slice_study_score_is_the_slice_score() {
        let (ens, _) = tiny_ensemble(1, 13);
        let vol = tiny_volume(1);
        let (slices, study) = score_study(&ens, &vol).unwrap();
        assert_eq!(slices[0], study);
    }

    #[test]
    fn verdicts_round_trip_through_jsonl() {
        let t = tax();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("verdicts.jsonl");
        let verdicts: Vec<StudyVerdict> = (0..3)
            .map(|i| {
                decide(
                    &format!("uid-{i}"),
                    LabelVector::zeros(t.len()),
                    0.9,
                    0.5,
                    &t,
                )
            })
            .collect();
        write_verdicts(&verdicts, &path).unwrap();
        assert_eq!(read_verdicts(&path).unwrap(), verdicts);
    }

    #[test]
    fn mixed_member_specs_are_rejected() {
        let a = Network::init(&NetworkSpec::desk_default(32, 12, 0.0), &mut rng_for(1, &[0]))
            .unwrap();
        let b = Network::init(&NetworkSpec::desk_default(32, 8, 0.0), &mut rng_for(1, &[1]))
            .unwrap();
        assert!(matches!(
            Ensemble::new(vec![a, b], 7),
            Err(AggregateError::MixedMembers)
        ));
    }

    #[test]
    fn scoring_forwards_use_eval_mode_dropout() {
        // a dropout-heavy spec must still give deterministic eval scores
        let spec = NetworkSpec::desk_default(32, 12, 0.9);
        let net = Network::init(&spec, &mut rng_for(2, &[0])).unwrap();
        let x = Tensor::from_vec(&[1, 32, 32], vec![0.5; 1024]);
        let a = net.posteriors(x.clone()).unwrap();
        let b = net.posteriors(x).unwrap();
        assert_eq!(a, b);
    }
}
