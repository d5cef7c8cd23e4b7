//! End-to-end orchestration shared by the CLI subcommands and the
//! acceptance suite: corpus generation, ensemble training, scoring with
//! calibrated operating points, and metric emission.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use axial_core::aggregate::{
    calibrate_threshold, coverage_at, decide, read_verdicts, score_study, study_confidence,
    write_verdicts, Ensemble, StudyVerdict,
};
use axial_core::dicom;
use axial_core::eval::{
    bootstrap_ci, csmr, gate_violations, ground_truth_from_manifest, literary_rate,
    literary_sources_head_ct, metrics_csv, risk_coverage, roc, roc_ribbon, study_outcomes,
    trait_table, GroundTruth, MetricsRow, RocCurve, LITERARY_MISS_FRACTION,
};
use axial_core::net::{log_csv, train, Checkpoint, NetworkSpec, TrainConfig};
use axial_core::phantom::{
    generate_corpus_with, write_study_files, LabeledStudy, Manifest, PhantomSpec,
};
use axial_core::plot::{risk_coverage_svg, roc_svg};
use axial_core::seeded::derive_seed;
use axial_core::taxonomy::{
    any_significant, significant_max, LabelVector, Taxonomy,
};

use crate::config::{RunConfig, Splits};

const STREAM_MEMBER: u64 = 0x3E3B;
const STREAM_EVAL: u64 = 0xE7A1;

pub fn corpus_dir(out: &Path) -> PathBuf {
    out.join("corpus")
}

pub fn manifest_path(out: &Path) -> PathBuf {
    corpus_dir(out).join("manifest.jsonl")
}

pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

pub fn metrics_dir(out: &Path) -> PathBuf {
    out.join("metrics")
}

pub fn verdicts_path(out: &Path, label: &str) -> PathBuf {
    out.join(format!("verdicts_{label}.jsonl"))
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

/// Generate `n` studies, write one DICOM file per slice plus the manifest,
/// and return per-trait study counts.
pub fn generate_to_disk(
    spec: &PhantomSpec,
    tax: &Taxonomy,
    n: usize,
    out: &Path,
) -> Result<(Manifest, Vec<usize>)> {
    let dir = corpus_dir(out);
    std::fs::create_dir_all(&dir)?;
    let mut counts = vec![0usize; tax.len()];
    let mut files: Vec<Vec<String>> = Vec::with_capacity(n);
    let mut io_err: Option<anyhow::Error> = None;
    let mut manifest = generate_corpus_with(spec, tax, n, |_, study| {
        if io_err.is_some() {
            return;
        }
        for k in 0..tax.len() {
            if study.study_labels.get(k) != 0.0 {
                counts[k] += 1;
            }
        }
        match write_study_files(&study, &dir.join(&study.volume.study_uid)) {
            Ok(names) => files.push(
                names
                    .into_iter()
                    .map(|f| format!("{}/{}", study.volume.study_uid, f))
                    .collect(),
            ),
            Err(e) => io_err = Some(e.into()),
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.context("writing corpus files"));
    }
    for (record, f) in manifest.records.iter_mut().zip(files) {
        record.files = f;
    }
    manifest.write(&manifest_path(out))?;
    Ok((manifest, counts))
}

// ---------------------------------------------------------------------------
// splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SplitUids {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub calibration: Vec<String>,
    pub test: Vec<String>,
}

/// Contiguous manifest ranges in generation order; disjointness by study uid
/// is asserted and fatal.
pub fn split_manifest(manifest: &Manifest, splits: &Splits) -> Result<SplitUids> {
    if manifest.records.len() < splits.total() {
        bail!(
            "manifest has {} studies but splits need {}",
            manifest.records.len(),
            splits.total()
        );
    }
    let uids: Vec<String> = manifest.records.iter().map(|r| r.study_uid.clone()).collect();
    let (a, b, c) = (
        splits.train,
        splits.train + splits.val,
        splits.train + splits.val + splits.calibration,
    );
    let out = SplitUids {
        train: uids[..a].to_vec(),
        val: uids[a..b].to_vec(),
        calibration: uids[b..c].to_vec(),
        test: uids[c..splits.total()].to_vec(),
    };
    let mut seen = BTreeSet::new();
    for uid in out
        .train
        .iter()
        .chain(&out.val)
        .chain(&out.calibration)
        .chain(&out.test)
    {
        if !seen.insert(uid) {
            bail!("split uids are not disjoint: `{uid}` appears twice");
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// corpus loading (disk -> studies)
// ---------------------------------------------------------------------------

/// Rebuild labeled studies for `uids` from the on-disk corpus.
pub fn load_studies(out: &Path, manifest: &Manifest, uids: &[String]) -> Result<Vec<LabeledStudy>> {
    let dir = corpus_dir(out);
    let wanted: BTreeSet<&String> = uids.iter().collect();
    let mut studies = Vec::with_capacity(uids.len());
    for record in &manifest.records {
        if !wanted.contains(&record.study_uid) {
            continue;
        }
        let mut parsed = Vec::with_capacity(record.files.len());
        for f in &record.files {
            let bytes = std::fs::read(dir.join(f))
                .with_context(|| format!("reading corpus file {f}"))?;
            parsed.push(
                dicom::parse_file(&bytes)
                    .map_err(|e| anyhow::anyhow!("corpus file {f} is corrupted: {e}"))?,
            );
        }
        let (volume, excluded) = dicom::assemble_study(parsed)?;
        if excluded != 0 {
            bail!("training corpus must be fully axial CT");
        }
        studies.push(LabeledStudy {
            volume,
            study_labels: record.study_labels(),
            slice_labels: record
                .slice_labels
                .iter()
                .map(|b| LabelVector::from_bits(b))
                .collect(),
        });
    }
    if studies.len() != uids.len() {
        bail!("manifest is missing {} of the requested studies", uids.len() - studies.len());
    }
    Ok(studies)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn member_train_config(cfg: &RunConfig, member: usize) -> TrainConfig {
    let mut tc = cfg.train.clone();
    tc.seed = derive_seed(cfg.seed, &[STREAM_MEMBER, member as u64]);
    tc
}

pub fn network_spec(cfg: &RunConfig, tax: &Taxonomy) -> NetworkSpec {
    NetworkSpec::desk_default(cfg.phantom.slice_size, tax.len(), cfg.train.dropout)
}

/// Train the ensemble members; returns the best checkpoints in member order.
///
/// Persists `member_<i>.best.ckpt`, `member_<i>.latest.ckpt`, and
/// `member_<i>.log.csv` under the checkpoint directory; with `resume`, a
/// member whose latest checkpoint exists continues from it.
pub fn train_ensemble(
    cfg: &RunConfig,
    tax: &Taxonomy,
    train_studies: &[LabeledStudy],
    val_studies: &[LabeledStudy],
    out: Option<&Path>,
    resume: bool,
) -> Result<Vec<Checkpoint>> {
    let spec = network_spec(cfg, tax);
    let mut best = Vec::with_capacity(cfg.ensemble);
    for member in 0..cfg.ensemble {
        let tc = member_train_config(cfg, member);
        let (latest_path, best_path, log_path) = match out {
            Some(o) => {
                let d = checkpoint_dir(o);
                std::fs::create_dir_all(&d)?;
                (
                    Some(d.join(format!("member_{member}.latest.ckpt"))),
                    Some(d.join(format!("member_{member}.best.ckpt"))),
                    Some(d.join(format!("member_{member}.log.csv"))),
                )
            }
            None => (None, None, None),
        };
        let resume_from = match (&latest_path, resume) {
            (Some(p), true) if p.exists() => Some(Checkpoint::load(p)?),
            _ => None,
        };
        let outcome = train(
            &spec,
            &tc,
            tax,
            train_studies,
            val_studies,
            resume_from,
            |latest, _| {
                if let Some(p) = &latest_path {
                    // persisted every epoch so interruption loses nothing
                    let _ = latest.save(p);
                }
            },
        )?;
        if let Some(p) = &best_path {
            outcome.best.save(p)?;
        }
        if let Some(p) = &log_path {
            std::fs::write(p, log_csv(&outcome.log))?;
        }
        best.push(outcome.best);
    }
    Ok(best)
}

pub fn load_ensemble(cfg: &RunConfig, tax: &Taxonomy, out: &Path) -> Result<Ensemble> {
    let spec = network_spec(cfg, tax);
    let dir = checkpoint_dir(out);
    let mut checkpoints = Vec::with_capacity(cfg.ensemble);
    for member in 0..cfg.ensemble {
        let p = dir.join(format!("member_{member}.best.ckpt"));
        checkpoints
            .push(Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))?);
    }
    Ok(Ensemble::from_checkpoints(&spec, &checkpoints, tax.digest())?)
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

/// One scored study before any threshold is applied.
#[derive(Debug, Clone)]
pub struct ScoredStudy {
    pub study_uid: String,
    pub trait_scores: LabelVector,
    pub confidence: f32,
    pub negative_predicted: bool,
}

fn score_volume(ensemble: &Ensemble, tax: &Taxonomy, volume: &dicom::HuVolume) -> Result<ScoredStudy> {
    let (_, trait_scores) = score_study(ensemble, volume)?;
    let confidence = study_confidence(&trait_scores, tax)?;
    let negative_predicted = tax.significant_ids().all(|k| trait_scores.get(k) < 0.5);
    Ok(ScoredStudy {
        study_uid: volume.study_uid.clone(),
        trait_scores,
        confidence,
        negative_predicted,
    })
}

fn dcm_files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<PathBuf> =
            std::fs::read_dir(&d)?.map(|e| Ok(e?.path())).collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "dcm") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Ingestion tallies: files rejected as corrupted and slices dropped by the
/// axial/CT filter.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Exclusions {
    pub corrupted_files: usize,
    pub non_axial_slices: usize,
    pub unusable_studies: usize,
}

/// Parse every DICOM file under the corpus directory, drop corrupted files
/// and non-axial slices with counts, and assemble per-study volumes.
pub fn ingest_corpus_dir(dir: &Path) -> Result<(Vec<dicom::HuVolume>, Exclusions)> {
    let mut excl = Exclusions::default();
    let mut by_study: std::collections::BTreeMap<String, Vec<(dicom::DicomHeader, dicom::RawPixels)>> =
        std::collections::BTreeMap::new();
    for path in dcm_files_under(dir)? {
        let bytes = std::fs::read(&path)?;
        match dicom::parse_file(&bytes) {
            Ok((header, pixels)) => {
                by_study.entry(header.study_uid.clone()).or_default().push((header, pixels));
            }
            Err(_) => excl.corrupted_files += 1,
        }
    }
    let mut volumes = Vec::with_capacity(by_study.len());
    for (_, files) in by_study {
        match dicom::assemble_study(files) {
            Ok((volume, dropped)) => {
                excl.non_axial_slices += dropped;
                volumes.push(volume);
            }
            Err(_) => excl.unusable_studies += 1,
        }
    }
    Ok((volumes, excl))
}

pub struct InferOutcome {
    /// (operating-point label, tau, calibration coverage, verdicts).
    pub operating_points: Vec<(String, f32, f64, Vec<StudyVerdict>)>,
    pub exclusions: Exclusions,
    pub n_scored: usize,
}

/// Score the calibration and test splits from disk, calibrate a threshold
/// per target coverage, and write one verdicts file per operating point.
pub fn infer(cfg: &RunConfig, tax: &Taxonomy, out: &Path) -> Result<InferOutcome> {
    let manifest = Manifest::read(&manifest_path(out))?;
    let splits = split_manifest(&manifest, &cfg.splits)?;
    let ensemble = load_ensemble(cfg, tax, out)?;

    let (volumes, exclusions) = ingest_corpus_dir(&corpus_dir(out))?;
    let mut scored: std::collections::BTreeMap<String, ScoredStudy> = Default::default();
    let calibration_set: BTreeSet<&String> = splits.calibration.iter().collect();
    let test_set: BTreeSet<&String> = splits.test.iter().collect();
    for v in &volumes {
        if calibration_set.contains(&v.study_uid) || test_set.contains(&v.study_uid) {
            scored.insert(v.study_uid.clone(), score_volume(&ensemble, tax, v)?);
        }
    }

    let calibration: Vec<(f32, bool)> = splits
        .calibration
        .iter()
        .filter_map(|uid| scored.get(uid))
        .map(|s| (s.confidence, s.negative_predicted))
        .collect();
    if calibration.is_empty() {
        bail!("no calibration studies survived ingestion");
    }

    let mut operating_points = Vec::new();
    for &target in &cfg.report.target_coverages {
        let tau = calibrate_threshold(&calibration, target)?;
        let label = RunConfig::op_label(target);
        let verdicts: Vec<StudyVerdict> = splits
            .test
            .iter()
            .filter_map(|uid| scored.get(uid))
            .map(|s| decide(&s.study_uid, s.trait_scores.clone(), s.confidence, tau, tax))
            .collect();
        if verdicts.is_empty() {
            bail!("no test studies survived ingestion");
        }
        write_verdicts(&verdicts, &verdicts_path(out, &label))?;
        operating_points.push((label, tau, coverage_at(&calibration, tau), verdicts));
    }
    let n_scored = scored.len();
    Ok(InferOutcome {
        operating_points,
        exclusions,
        n_scored,
    })
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub struct EvalOutcome {
    pub rows: Vec<MetricsRow>,
    pub auc_significant: Option<f64>,
    pub gate_violations: usize,
    pub files: Vec<PathBuf>,
}

fn roc_csv(curve: &RocCurve) -> String {
    let mut s = String::from("fpr,tpr,threshold\n");
    for p in &curve.points {
        s.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
    }
    s
}

/// Evaluate persisted verdicts against the manifest ground truth; emits the
/// metrics CSV, per-trait and composite ROC files, the risk-coverage sweep,
/// and the trait table.
pub fn evaluate(cfg: &RunConfig, tax: &Taxonomy, out: &Path) -> Result<EvalOutcome> {
    let manifest = Manifest::read(&manifest_path(out))?;
    let truth = ground_truth_from_manifest(&manifest);
    let mdir = metrics_dir(out);
    std::fs::create_dir_all(&mdir)?;
    let mut files = Vec::new();
    let mut rows = Vec::new();
    let mut total_violations = 0usize;

    let mut op_verdicts: Vec<(String, Vec<StudyVerdict>)> = Vec::new();
    for &target in &cfg.report.target_coverages {
        let label = RunConfig::op_label(target);
        let verdicts = read_verdicts(&verdicts_path(out, &label))?;
        for v in &verdicts {
            if !truth.contains_key(&v.study_uid) {
                bail!("verdict for `{}` has no ground truth in the manifest", v.study_uid);
            }
        }
        op_verdicts.push((label, verdicts));
    }
    if op_verdicts.is_empty() {
        bail!("no operating points configured");
    }

    // per-operating-point miss rates
    for (label, verdicts) in &op_verdicts {
        total_violations += gate_violations(verdicts, tax);
        let r = csmr(verdicts, &truth, tax)?;
        let mut row = MetricsRow::new("csmr", "SIGNIFICANT", label, r.csmr);
        if r.csmr.is_some() {
            let data: Vec<(bool, bool)> = verdicts
                .iter()
                .map(|v| {
                    (
                        v.decision == axial_core::aggregate::Decision::Report,
                        any_significant(&truth[&v.study_uid], tax),
                    )
                })
                .collect();
            let stat = |d: &[(bool, bool)]| {
                let reported = d.iter().filter(|x| x.0).count();
                (reported > 0)
                    .then(|| d.iter().filter(|x| x.0 && x.1).count() as f64 / reported as f64)
            };
            let ci = bootstrap_ci(
                &data,
                stat,
                cfg.report.bootstrap_resamples,
                derive_seed(cfg.seed, &[STREAM_EVAL, 1]),
            )?;
            row = row.with_ci(&ci);
        }
        rows.push(row);
        rows.push(MetricsRow::new("coverage", "ALL", label, Some(r.coverage)));
        rows.push(MetricsRow::new(
            "n_reported",
            "ALL",
            label,
            Some(r.n_reported as f64),
        ));
    }

    // trait-level and composite ROC from the first operating point's scores
    // (trait scores do not depend on tau)
    let base = &op_verdicts[0].1;
    let mut auc_significant = None;
    let mut roc_jobs: Vec<(String, Vec<(f64, bool)>)> = Vec::new();
    for t in tax.traits() {
        let data: Vec<(f64, bool)> = base
            .iter()
            .map(|v| {
                (
                    v.trait_scores.get(t.id) as f64,
                    truth[&v.study_uid].get(t.id) != 0.0,
                )
            })
            .collect();
        roc_jobs.push((t.name.clone(), data));
    }
    roc_jobs.push((
        "SIGNIFICANT".into(),
        base.iter()
            .map(|v| {
                (
                    significant_max(&v.trait_scores, tax) as f64,
                    any_significant(&truth[&v.study_uid], tax),
                )
            })
            .collect(),
    ));
    for (i, (name, data)) in roc_jobs.iter().enumerate() {
        let scores: Vec<f64> = data.iter().map(|x| x.0).collect();
        let labels: Vec<bool> = data.iter().map(|x| x.1).collect();
        match roc(&scores, &labels) {
            Err(_) => rows.push(MetricsRow::new("auc", name, "full", None)),
            Ok(curve) => {
                let seed = derive_seed(cfg.seed, &[STREAM_EVAL, 2, i as u64]);
                let ci = bootstrap_ci(
                    data,
                    |d: &[(f64, bool)]| {
                        let s: Vec<f64> = d.iter().map(|x| x.0).collect();
                        let l: Vec<bool> = d.iter().map(|x| x.1).collect();
                        roc(&s, &l).ok().map(|c| c.auc)
                    },
                    cfg.report.bootstrap_resamples,
                    seed,
                )?;
                rows.push(MetricsRow::new("auc", name, "full", Some(curve.auc)).with_ci(&ci));
                if name == "SIGNIFICANT" {
                    auc_significant = Some(curve.auc);
                }
                let csv_path = mdir.join(format!("roc_{name}.csv"));
                std::fs::write(&csv_path, roc_csv(&curve))?;
                files.push(csv_path);
                let ribbon = roc_ribbon(data, cfg.report.bootstrap_resamples.min(250), seed);
                let svg_path = mdir.join(format!("roc_{name}.svg"));
                std::fs::write(&svg_path, roc_svg(&curve, ribbon.as_deref(), name))?;
                files.push(svg_path);
            }
        }
    }

    // risk-coverage sweep over the full confidence range
    let outcomes = study_outcomes(base, &truth, tax)?;
    let sweep = risk_coverage(&outcomes);
    for w in sweep.windows(2) {
        if w[1].coverage >= w[0].coverage {
            bail!("risk-coverage sweep is not strictly decreasing");
        }
    }
    let mut rc_csv = String::from("tau,coverage,n_reported,csmr\n");
    for p in &sweep {
        rc_csv.push_str(&format!(
            "{},{},{},{}\n",
            p.tau,
            p.coverage,
            p.n_reported,
            p.csmr.map_or_else(|| "NA".into(), |v: f64| v.to_string())
        ));
    }
    let rc_path = mdir.join("risk_coverage.csv");
    std::fs::write(&rc_path, rc_csv)?;
    files.push(rc_path);
    let rc_svg = mdir.join("risk_coverage.svg");
    std::fs::write(&rc_svg, risk_coverage_svg(&sweep, "risk-coverage"))?;
    files.push(rc_svg);

    // trait table across operating points
    let table_input: Vec<(String, &[StudyVerdict])> = op_verdicts
        .iter()
        .map(|(l, v)| (l.clone(), v.as_slice()))
        .collect();
    let table = trait_table(&table_input, &truth, tax)?;
    let mut tt = String::from("trait,trial_pct");
    for (label, _) in &table.columns {
        tt.push_str(&format!(",{label}_pct"));
    }
    tt.push('\n');
    for (i, name) in table.trait_names.iter().enumerate() {
        tt.push_str(&format!("{name},{}", table.trial_pct[i]));
        for (_, col) in &table.columns {
            tt.push_str(&format!(
                ",{}",
                col[i].map_or_else(|| "NA".into(), |v: f64| v.to_string())
            ));
        }
        tt.push('\n');
    }
    let tt_path = mdir.join("trait_table.csv");
    std::fs::write(&tt_path, tt)?;
    files.push(tt_path);

    // literary radiologist baseline
    let (overall, lit_csmr) = literary_rate(&literary_sources_head_ct(), LITERARY_MISS_FRACTION)?;
    rows.push(MetricsRow::new("literary_error_rate", "ALL", "literary", Some(overall)));
    rows.push(MetricsRow::new(
        "literary_csmr",
        "SIGNIFICANT",
        "literary",
        Some(lit_csmr),
    ));
    rows.push(MetricsRow::new(
        "gate_violations",
        "SIGNIFICANT",
        "ALL",
        Some(total_violations as f64),
    ));

    if total_violations != 0 {
        bail!("zero-false-positive gate violated: {total_violations} reported studies carry a positive significant score");
    }

    let metrics_path = mdir.join("metrics.csv");
    std::fs::write(&metrics_path, metrics_csv(&rows))?;
    files.push(metrics_path);

    Ok(EvalOutcome {
        rows,
        auc_significant,
        gate_violations: total_violations,
        files,
    })
}

// ---------------------------------------------------------------------------
// report bundle
// ---------------------------------------------------------------------------

/// Copy every metrics artifact into a single report directory with a short
/// plaintext summary.
pub fn bundle_report(cfg: &RunConfig, out: &Path, eval: &EvalOutcome) -> Result<PathBuf> {
    let dir = out.join("report");
    std::fs::create_dir_all(&dir)?;
    for f in &eval.files {
        if let Some(name) = f.file_name() {
            std::fs::copy(f, dir.join(name))?;
        }
    }
    let mut summary = String::new();
    summary.push_str(&format!("ensemble members: {}\n", cfg.ensemble));
    if let Some(auc) = eval.auc_significant {
        summary.push_str(&format!("significant composite AUC: {auc:.4}\n"));
    }
    for row in &eval.rows {
        if row.metric == "csmr" || row.metric == "coverage" || row.metric.starts_with("literary") {
            summary.push_str(&format!(
                "{} [{}] = {}\n",
                row.metric,
                row.operating_point,
                row.value.map_or_else(|| "NA".into(), |v| format!("{v:.6}"))
            ));
        }
    }
    summary.push_str(&format!("gate violations: {}\n", eval.gate_violations));
    let mut f = std::fs::File::create(dir.join("summary.txt"))?;
    f.write_all(summary.as_bytes())?;
    Ok(dir)
}

// ---------------------------------------------------------------------------
// desk trial (in-memory)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrialOperatingPoint {
    pub target_coverage: f64,
    pub tau: f32,
    pub realized_coverage: f64,
    pub csmr: Option<f64>,
    pub n_reported: usize,
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub auc_significant: f64,
    pub operating_points: Vec<TrialOperatingPoint>,
    pub gate_violations: usize,
}

/// Run the full pipeline in memory: generate, train, calibrate, score, and
/// evaluate the held-out test split.
pub fn desk_trial(cfg: &RunConfig) -> Result<TrialOutcome> {
    let tax = cfg.taxonomy()?;
    let spec = cfg.phantom.resolve(&tax, cfg.seed);
    let splits = cfg.splits;

    let mut train_studies = Vec::with_capacity(splits.train);
    let mut val_studies = Vec::with_capacity(splits.val);
    let mut calibration = Vec::with_capacity(splits.calibration);
    let mut test = Vec::with_capacity(splits.test);
    generate_corpus_with(&spec, &tax, splits.total(), |i, study| {
        if i < splits.train {
            train_studies.push(study);
        } else if i < splits.train + splits.val {
            val_studies.push(study);
        } else if i < splits.train + splits.val + splits.calibration {
            calibration.push(study);
        } else {
            test.push(study);
        }
    })?;

    let checkpoints = train_ensemble(cfg, &tax, &train_studies, &val_studies, None, false)?;
    drop(train_studies);
    drop(val_studies);
    let ensemble = Ensemble::from_checkpoints(&network_spec(cfg, &tax), &checkpoints, tax.digest())?;

    let cal_scored: Vec<ScoredStudy> = calibration
        .iter()
        .map(|s| score_volume(&ensemble, &tax, &s.volume))
        .collect::<Result<_>>()?;
    drop(calibration);
    let cal_pairs: Vec<(f32, bool)> = cal_scored
        .iter()
        .map(|s| (s.confidence, s.negative_predicted))
        .collect();

    let test_scored: Vec<(ScoredStudy, LabelVector)> = test
        .iter()
        .map(|s| Ok((score_volume(&ensemble, &tax, &s.volume)?, s.study_labels.clone())))
        .collect::<Result<_>>()?;
    drop(test);

    // composite significant ROC on the held-out test set
    let scores: Vec<f64> = test_scored
        .iter()
        .map(|(s, _)| significant_max(&s.trait_scores, &tax) as f64)
        .collect();
    let labels: Vec<bool> = test_scored
        .iter()
        .map(|(_, gt)| any_significant(gt, &tax))
        .collect();
    let auc_significant = roc(&scores, &labels)
        .map(|c| c.auc)
        .context("test split is single-class; increase the test split")?;

    let mut truth = GroundTruth::new();
    for (s, gt) in &test_scored {
        truth.insert(s.study_uid.clone(), gt.clone());
    }

    let mut operating_points = Vec::new();
    let mut violations = 0usize;
    for &target in &cfg.report.target_coverages {
        let tau = calibrate_threshold(&cal_pairs, target)?;
        let verdicts: Vec<StudyVerdict> = test_scored
            .iter()
            .map(|(s, _)| decide(&s.study_uid, s.trait_scores.clone(), s.confidence, tau, &tax))
            .collect();
        violations += gate_violations(&verdicts, &tax);
        let r = csmr(&verdicts, &truth, &tax)?;
        operating_points.push(TrialOperatingPoint {
            target_coverage: target,
            tau,
            realized_coverage: r.coverage,
            csmr: r.csmr,
            n_reported: r.n_reported,
        });
    }

    Ok(TrialOutcome {
        auc_significant,
        operating_points,
        gate_violations: violations,
    })
}
