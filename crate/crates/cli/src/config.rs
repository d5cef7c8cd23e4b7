//! Run configuration: a TOML file checked in per experiment, with CLI flags
//! overriding individual keys.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use axial_core::net::TrainConfig;
use axial_core::phantom::{CooccurrenceRule, PhantomSpec};
use axial_core::taxonomy::Taxonomy;

/// Phantom sampler keys; per-trait vectors fall back to the desk defaults
/// for the loaded taxonomy when omitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub slice_size: usize,
    pub n_slices: usize,
    pub trait_probs: Option<Vec<f32>>,
    pub cooccurrence: Option<Vec<CooccurrenceRule>>,
    pub severity_range: Option<Vec<(f32, f32)>>,
    pub oversample_positive: Option<f32>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            slice_size: 64,
            n_slices: 16,
            trait_probs: None,
            cooccurrence: None,
            severity_range: None,
            oversample_positive: Some(0.75),
        }
    }
}

impl PhantomConfig {
    pub fn resolve(&self, tax: &Taxonomy, seed: u64) -> PhantomSpec {
        let mut spec = PhantomSpec::desk_default(tax).with_seed(seed);
        spec.slice_size = self.slice_size;
        spec.n_slices = self.n_slices;
        if let Some(p) = &self.trait_probs {
            spec.trait_probs = p.clone();
        }
        if let Some(c) = &self.cooccurrence {
            spec.cooccurrence = c.clone();
        }
        if let Some(s) = &self.severity_range {
            spec.severity_range = s.clone();
        }
        spec.oversample_positive = self.oversample_positive;
        spec
    }
}

/// Study counts per split, disjoint by construction (contiguous manifest
/// ranges in generation order).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct Splits {
    pub train: usize,
    pub val: usize,
    pub calibration: usize,
    pub test: usize,
}

impl Default for Splits {
    fn default() -> Self {
        Self {
            train: 600,
            val: 100,
            calibration: 150,
            test: 400,
        }
    }
}

impl Splits {
    pub fn total(&self) -> usize {
        self.train + self.val + self.calibration + self.test
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    /// Operating points as target coverages.
    pub target_coverages: Vec<f64>,
    pub bootstrap_resamples: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            target_coverages: vec![0.421, 0.085],
            bootstrap_resamples: 1000,
        }
    }
}

/// One experiment: phantom sampler, splits, training recipe, operating
/// points, and output location.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Ensemble size; members train with derived per-member seeds.
    pub ensemble: usize,
    /// Taxonomy file; the builtin 12-trait desk taxonomy when omitted.
    pub taxonomy: Option<PathBuf>,
    pub phantom: PhantomConfig,
    pub splits: Splits,
    pub train: TrainConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("runs/desk"),
            ensemble: 2,
            taxonomy: None,
            phantom: PhantomConfig::default(),
            splits: Splits::default(),
            train: TrainConfig::desk_default(),
            report: ReportConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensemble == 0 {
            bail!("ensemble size must be at least 1");
        }
        if self.splits.train == 0 || self.splits.val == 0 {
            bail!("train and val splits must be non-empty");
        }
        if self.report.target_coverages.is_empty() {
            bail!("at least one target coverage is required");
        }
        for &c in &self.report.target_coverages {
            if !(0.0..=1.0).contains(&c) {
                bail!("target coverage {c} outside [0,1]");
            }
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn taxonomy(&self) -> Result<Taxonomy> {
        match &self.taxonomy {
            None => Ok(Taxonomy::desk_default()),
            Some(p) => {
                Taxonomy::load(p).with_context(|| format!("loading taxonomy {}", p.display()))
            }
        }
    }

    /// Operating-point label for a target coverage, e.g. 0.421 -> "net-42.1".
    pub fn op_label(coverage: f64) -> String {
        format!("net-{:.1}", coverage * 100.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.splits.total(), 1250);
        assert_eq!(back.report.target_coverages, vec![0.421, 0.085]);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 3\n[splits]\ntrain = 10\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.splits.train, 10);
        assert_eq!(cfg.splits.val, 100);
        assert_eq!(cfg.ensemble, 2);
    }

    #[test]
    fn op_labels_match_coverage_percentages() {
        assert_eq!(RunConfig::op_label(0.421), "net-42.1");
        assert_eq!(RunConfig::op_label(0.085), "net-8.5");
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.ensemble = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.report.target_coverages = vec![1.5];
        assert!(cfg.validate().is_err());
    }
}
