//! Pipeline entry point.
//!
//! Subcommands wire the stages end to end with reproducible configs:
//! `gen` -> `train` -> `infer` -> `eval` (or `report` for the bundle).
//! Thread count follows RAYON_NUM_THREADS.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use axial_cli::config::RunConfig;
use axial_cli::pipeline;
use axial_core::eval::{literary_rate, literary_sources_head_ct, LITERARY_MISS_FRACTION};
use axial_core::phantom::Manifest;

#[derive(Parser)]
#[command(name = "axial", about = "Synthetic head-CT triage pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML); omitted keys use the desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the taxonomy file.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(tax) = &self.taxonomy {
            cfg.taxonomy = Some(tax.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom corpus as DICOM files plus a manifest.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Number of studies; defaults to the config split total.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train the classifier ensemble on the train/val splits.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue members from their latest checkpoints.
        #[arg(long)]
        resume: bool,
    },
    /// Score calibration/test studies and write verdicts per operating point.
    Infer {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate verdicts: metrics CSV, ROC curves, risk-coverage, trait table.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Print the radiologist error-rate baseline from the published reader
    /// studies.
    Literary {
        /// Fraction of errors counted as misses.
        #[arg(long, default_value_t = LITERARY_MISS_FRACTION)]
        miss_fraction: f64,
    },
    /// Run eval and bundle every artifact into one report directory.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen { common, n } => {
            let cfg = common.resolve()?;
            let n = n.unwrap_or_else(|| cfg.splits.total());
            if n == 0 {
                bail!("--n must be at least 1");
            }
            let tax = cfg.taxonomy()?;
            let spec = cfg.phantom.resolve(&tax, cfg.seed);
            let (manifest, counts) = pipeline::generate_to_disk(&spec, &tax, n, &cfg.out_dir)?;
            println!(
                "wrote {} studies to {}",
                manifest.records.len(),
                pipeline::corpus_dir(&cfg.out_dir).display()
            );
            println!("per-trait study counts:");
            for t in tax.traits() {
                println!("  {:>4}  {}", counts[t.id], t.name);
            }
        }
        Command::Train { common, resume } => {
            let cfg = common.resolve()?;
            let tax = cfg.taxonomy()?;
            let manifest = Manifest::read(&pipeline::manifest_path(&cfg.out_dir))
                .context("corpus manifest missing; run `axial gen` first")?;
            let splits = pipeline::split_manifest(&manifest, &cfg.splits)?;
            let train_studies = pipeline::load_studies(&cfg.out_dir, &manifest, &splits.train)?;
            let val_studies = pipeline::load_studies(&cfg.out_dir, &manifest, &splits.val)?;
            let best = pipeline::train_ensemble(
                &cfg,
                &tax,
                &train_studies,
                &val_studies,
                Some(&cfg.out_dir),
                resume,
            )?;
            for (i, ckpt) in best.iter().enumerate() {
                println!("member {i}: best epoch {}", ckpt.epoch);
            }
            println!(
                "checkpoints in {}",
                pipeline::checkpoint_dir(&cfg.out_dir).display()
            );
        }
        Command::Infer { common } => {
            let cfg = common.resolve()?;
            let tax = cfg.taxonomy()?;
            let outcome = pipeline::infer(&cfg, &tax, &cfg.out_dir)?;
            println!(
                "scored {} studies ({} corrupted files excluded, {} non-axial slices dropped, {} unusable studies)",
                outcome.n_scored,
                outcome.exclusions.corrupted_files,
                outcome.exclusions.non_axial_slices,
                outcome.exclusions.unusable_studies,
            );
            for (label, tau, coverage, verdicts) in &outcome.operating_points {
                println!(
                    "{label}: tau={tau} calibration-coverage={coverage:.3} verdicts={} -> {}",
                    verdicts.len(),
                    pipeline::verdicts_path(&cfg.out_dir, label).display()
                );
            }
        }
        Command::Eval { common } => {
            let cfg = common.resolve()?;
            let tax = cfg.taxonomy()?;
            let outcome = pipeline::evaluate(&cfg, &tax, &cfg.out_dir)?;
            if let Some(auc) = outcome.auc_significant {
                println!("significant composite AUC: {auc:.4}");
            }
            println!(
                "{} metric files in {}",
                outcome.files.len(),
                pipeline::metrics_dir(&cfg.out_dir).display()
            );
        }
        Command::Literary { miss_fraction } => {
            let (overall, csmr) = literary_rate(&literary_sources_head_ct(), miss_fraction)?;
            println!("sources: 5 head-CT reader studies, 2778 examinations");
            println!("overall error rate: {:.2}%", overall * 100.0);
            println!("clinically significant miss rate: {:.2}%", csmr * 100.0);
        }
        Command::Report { common } => {
            let cfg = common.resolve()?;
            let tax = cfg.taxonomy()?;
            let outcome = pipeline::evaluate(&cfg, &tax, &cfg.out_dir)?;
            let dir = pipeline::bundle_report(&cfg, &cfg.out_dir, &outcome)?;
            println!("report bundled in {}", dir.display());
        }
    }
    Ok(())
}
