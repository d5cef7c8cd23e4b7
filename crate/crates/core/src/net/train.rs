//! Training loop: seeded shuffling, augmentation, masked losses, optimizer
//! steps, early stopping, and resumable checkpoints.
//!
//! Everything randomized draws from an RNG derived from `(seed, epoch,
//! index)`, never from shared sequential state, so a run is bit-reproducible
//! for any thread count and resuming from a checkpoint replays the exact
//! uninterrupted trajectory.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentConfig};
use super::checkpoint::{BestStash, Checkpoint};
use super::loss::{cross_entropy_loss, grad_through_sigmoid, hinge_loss, sigmoid};
use super::optim::{adam_step, sgd_momentum_step, step_lr, OptState, OptimizerKind};
use super::{slice_to_input, NetError, Network, NetworkSpec};
use crate::phantom::LabeledStudy;
use crate::seeded::rng_for;
use crate::taxonomy::{effective_target, MaskedTarget, Taxonomy};
use crate::tensor::Tensor;

const STREAM_SHUFFLE: u64 = 0x0051;
const STREAM_AUGMENT: u64 = 0x00A6;
const STREAM_DROPOUT: u64 = 0x00D0;
const STREAM_SUBSAMPLE: u64 = 0x005B;
const STREAM_INIT: u64 = 0x0011;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropySigmoid,
    Hinge,
}

/// Full training recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    /// Zero-weight lower-tier positive labels under a higher-tier positive.
    pub hierarchical_masking: bool,
    pub optimizer: OptimizerKind,
    /// Step LR policy: lr multiplies by `lr_gamma` every `lr_step_epochs`.
    pub lr_gamma: f32,
    pub lr_step_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Dropout rate used when building the default architecture.
    pub dropout: f32,
    /// Early stop after this many epochs without validation improvement.
    pub patience: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Training-slice cap per study: all lesion slices plus sampled
    /// negatives. None trains on every slice.
    pub max_slices_per_study: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl TrainConfig {
    pub fn desk_default() -> Self {
        Self {
            loss: LossKind::CrossEntropySigmoid,
            hierarchical_masking: true,
            optimizer: OptimizerKind::Adam {
                lr: 1e-2,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr_gamma: 0.5,
            lr_step_epochs: 8,
            epochs: 12,
            batch_size: 16,
            dropout: 0.05,
            patience: 12,
            // small-angle gantry-style jitter; the desk anatomy is nearly
            // axisymmetric so stronger warps mostly slow convergence
            augment: AugmentConfig {
                rotate_deg: 7.0,
                scale_lo: 0.97,
                scale_hi: 1.03,
                mirror_prob: 0.5,
            },
            seed: 0,
            max_slices_per_study: Some(6),
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        self.optimizer.validate()?;
        let bad = |msg: &str| Err(NetError::ConfigInvalid(msg.into()));
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return bad("lr_gamma must lie in (0,1]");
        }
        if self.lr_step_epochs == 0 {
            return bad("lr_step_epochs must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0,1)");
        }
        Ok(())
    }
}

/// One training log row (CSV: epoch, lr, train_loss, val_loss,
/// val_auc_significant).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Slice-level AUC of the max-significant score; None if the validation
    /// slices are single-class.
    pub val_auc_significant: Option<f64>,
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_loss,val_auc_significant\n");
    for r in rows {
        let auc = r
            .val_auc_significant
            .map_or_else(|| "NA".to_string(), |v| v.to_string());
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.lr, r.train_loss, r.val_loss, auc
        ));
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters from the best-validation epoch.
    pub best: Checkpoint,
    /// Latest full state; resuming from it replays the uninterrupted run.
    pub latest: Checkpoint,
    pub log: Vec<EpochLog>,
}

struct Item {
    pixels: Vec<f32>,
    rows: usize,
    cols: usize,
    target: MaskedTarget,
}

fn target_for(labels: &crate::taxonomy::LabelVector, tax: &Taxonomy, masking: bool) -> MaskedTarget {
    if masking {
        effective_target(labels, tax).expect("phantom labels are binary and sized")
    } else {
        MaskedTarget {
            targets: labels.as_slice().to_vec(),
            weights: vec![1.0; labels.len()],
        }
    }
}

/// Repeat positive slices so rare traits contribute a usable share of each
/// epoch (prior-balancing at the sampling level). Returns per-trait
/// repetition factors.
fn balance_factors(items: &[Item], k: usize, max_rep: usize) -> Vec<usize> {
    let mut pos_counts = vec![0usize; k];
    for item in items {
        for (c, &t) in pos_counts.iter_mut().zip(&item.target.targets) {
            if t != 0.0 {
                *c += 1;
            }
        }
    }
    let target = items.len() / (2 * k.max(1));
    pos_counts
        .iter()
        .map(|&n| {
            if n == 0 {
                1
            } else {
                (target / n).clamp(1, max_rep)
            }
        })
        .collect()
}

/// Flatten studies into training slices, capping slices per study: lesion
/// slices first, then sampled negatives.
///
/// Negatives are drawn from the central slice band where lesions live, so
/// slice position alone cannot separate the classes.
fn build_items(
    studies: &[LabeledStudy],
    tax: &Taxonomy,
    cfg: &TrainConfig,
    subsample: bool,
) -> Vec<Item> {
    let mut items = Vec::new();
    for (si, study) in studies.iter().enumerate() {
        let n = study.volume.slices.len();
        let take: Vec<usize> = match (subsample, cfg.max_slices_per_study) {
            (true, Some(cap)) if n > cap => {
                let mut rng = rng_for(cfg.seed, &[STREAM_SUBSAMPLE, si as u64]);
                let mut positives: Vec<usize> = (0..n)
                    .filter(|&z| study.slice_labels[z].iter().any(|v| v != 0.0))
                    .collect();
                let central = n / 4..n - n / 4;
                let mut negatives: Vec<usize> = central
                    .clone()
                    .filter(|z| !positives.contains(z))
                    .collect();
                let mut outer: Vec<usize> = (0..n)
                    .filter(|z| !central.contains(z) && !positives.contains(z))
                    .collect();
                shuffle(&mut positives, &mut rng);
                shuffle(&mut negatives, &mut rng);
                shuffle(&mut outer, &mut rng);
                negatives.extend(outer);
                positives.truncate(cap);
                let mut take = positives;
                take.extend(negatives.into_iter().take(cap - take.len().min(cap)));
                take.sort_unstable();
                take
            }
            _ => (0..n).collect(),
        };
        for z in take {
            items.push(Item {
                pixels: study.volume.slices[z].clone(),
                rows: study.volume.rows,
                cols: study.volume.cols,
                target: target_for(&study.slice_labels[z], tax, cfg.hierarchical_masking),
            });
        }
    }
    items
}

fn shuffle<T>(v: &mut [T], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

/// Loss and logit-space gradient for one sample.
fn sample_loss(
    logits: &Tensor<f32>,
    target: &MaskedTarget,
    kind: LossKind,
) -> Result<(f64, Tensor<f32>), NetError> {
    match kind {
        LossKind::CrossEntropySigmoid => {
            let probs: Vec<f32> = logits.data().iter().map(|&z| sigmoid(z)).collect();
            let (loss, grad_p) = cross_entropy_loss(&probs, target)?;
            let dlogits = grad_through_sigmoid(&probs, &grad_p);
            Ok((loss as f64, Tensor::from_vec(logits.shape(), dlogits)))
        }
        LossKind::Hinge => {
            let (loss, grad) = hinge_loss(logits.data(), target)?;
            Ok((loss as f64, Tensor::from_vec(logits.shape(), grad)))
        }
    }
}

/// Train a network; deterministic in `cfg.seed`. Returns the best-validation
/// checkpoint, the resumable latest state, and the per-epoch log.
///
/// `on_epoch` fires after every epoch with the resumable state; training can
/// be resumed bit-identically by passing that state back as `resume`.
pub fn train(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    tax: &Taxonomy,
    train_studies: &[LabeledStudy],
    val_studies: &[LabeledStudy],
    resume: Option<Checkpoint>,
    mut on_epoch: impl FnMut(&Checkpoint, &EpochLog),
) -> Result<TrainOutcome, NetError> {
    cfg.validate()?;
    if train_studies.is_empty() {
        return Err(NetError::EmptyCorpus);
    }
    if val_studies.is_empty() {
        return Err(NetError::EmptyValidation);
    }
    let tax_hash = tax.digest();

    let mut net: Network<f32> =
        Network::init(spec, &mut rng_for(cfg.seed, &[STREAM_INIT]))?;
    let mut opt_state = OptState::new(&cfg.optimizer, &net.param_tensors());
    let mut start_epoch = 0usize;
    let mut best: Option<BestStash> = None;
    let mut since_improve = 0u32;
    let mut log: Vec<EpochLog> = Vec::new();

    if let Some(ckpt) = resume {
        if ckpt.taxonomy_hash != tax_hash {
            return Err(NetError::TaxonomyHashMismatch {
                expected: tax_hash,
                got: ckpt.taxonomy_hash,
            });
        }
        if ckpt.seed != cfg.seed {
            return Err(NetError::ConfigInvalid(
                "resume checkpoint was trained under a different seed".into(),
            ));
        }
        net.load_params(&ckpt.params)?;
        if let Some(state) = ckpt.restore_opt_state() {
            opt_state = state;
        }
        start_epoch = ckpt.epoch as usize;
        best = ckpt.best;
        since_improve = ckpt.epochs_since_improve;
    }

    let items = build_items(train_studies, tax, cfg, true);
    let val_items = build_items(val_studies, tax, cfg, false);
    if items.is_empty() {
        return Err(NetError::EmptyCorpus);
    }
    let sig_ids: Vec<usize> = tax.significant_ids().collect();

    // Head biases start at the prevalence logits so no optimizer steps are
    // spent reproducing the trait base rates.
    if start_epoch == 0 {
        let k = tax.len();
        let mut prevalence = vec![0.0f64; k];
        for item in &items {
            for (p, &t) in prevalence.iter_mut().zip(&item.target.targets) {
                *p += t as f64;
            }
        }
        let n = items.len() as f64;
        let logits: Vec<f32> = prevalence
            .iter()
            .map(|&c| {
                let p = (c / n).clamp(1e-3, 1.0 - 1e-3);
                (p / (1.0 - p)).ln() as f32
            })
            .collect();
        let mut params = net.param_tensors_mut();
        if let Some(head_bias) = params.last_mut() {
            if head_bias.len() == k {
                head_bias
                    .data_mut()
                    .iter_mut()
                    .zip(&logits)
                    .for_each(|(b, &l)| *b = l);
            }
        }
    }

    let mut latest = snapshot_state(&net, &cfg.optimizer, &opt_state, tax_hash, cfg.seed,
        start_epoch as u32, &best, since_improve);

    // prior balancing: rare-trait lesion slices recur within an epoch
    let rep = balance_factors(&items, tax.len(), 4);
    let mut train_index: Vec<usize> = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let r = item
            .target
            .targets
            .iter()
            .enumerate()
            .filter(|&(_, &t)| t != 0.0)
            .map(|(k, _)| rep[k])
            .max()
            .unwrap_or(1);
        train_index.extend(std::iter::repeat(i).take(r));
    }

    for epoch in start_epoch..cfg.epochs {
        let lr = step_lr(epoch, cfg.optimizer.base_lr(), cfg.lr_gamma, cfg.lr_step_epochs);
        let mut order = train_index.clone();
        shuffle(&mut order, &mut rng_for(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));

        let mut loss_sum = 0.0f64;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            // per-sample forward/backward in parallel; reduce in index order
            let results: Vec<Result<(f64, super::Gradients<f32>), NetError>> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let position = (bi * cfg.batch_size + j) as u64;
                    let item = &items[i];
                    let aug = augment(
                        &item.pixels,
                        item.rows,
                        item.cols,
                        &cfg.augment,
                        &mut rng_for(cfg.seed, &[STREAM_AUGMENT, epoch as u64, position]),
                    );
                    let x = slice_to_input::<f32>(&aug, item.rows, item.cols);
                    let (logits, caches) = net.forward_train(
                        x,
                        &mut rng_for(cfg.seed, &[STREAM_DROPOUT, epoch as u64, position]),
                    )?;
                    let (loss, dlogits) = sample_loss(&logits, &item.target, cfg.loss)?;
                    let grads = net.backward(&caches, dlogits);
                    Ok((loss, grads))
                })
                .collect();

            let mut batch_grads: Option<super::Gradients<f32>> = None;
            for r in results {
                let (loss, grads) = r?;
                loss_sum += loss;
                match &mut batch_grads {
                    None => batch_grads = Some(grads),
                    Some(acc) => acc.add_assign(&grads),
                }
            }
            let mut grads = batch_grads.expect("non-empty batch");
            grads.scale(1.0 / batch.len() as f32);
            let flat = grads.flat();
            let mut params = net.param_tensors_mut();
            match cfg.optimizer {
                OptimizerKind::Adam { beta1, beta2, eps, .. } => {
                    adam_step(&mut params, &flat, &mut opt_state, lr, beta1, beta2, eps)?
                }
                OptimizerKind::SgdMomentum { momentum, .. } => {
                    sgd_momentum_step(&mut params, &flat, &mut opt_state, lr, momentum)?
                }
            }
        }
        let train_loss = loss_sum / order.len() as f64;
        if !train_loss.is_finite() {
            return Err(NetError::Divergence(epoch));
        }

        // validation pass: loss plus slice-level significant AUC
        let val: Vec<Result<(f64, f32, bool), NetError>> = val_items
            .par_iter()
            .map(|item| {
                let x = slice_to_input::<f32>(&item.pixels, item.rows, item.cols);
                let logits = net.forward_eval(x)?;
                let (loss, _) = sample_loss(&logits, &item.target, cfg.loss)?;
                let sig_score = sig_ids
                    .iter()
                    .map(|&k| sigmoid(logits.data()[k]))
                    .fold(0.0f32, f32::max);
                let sig_label = sig_ids.iter().any(|&k| item.target.targets[k] != 0.0);
                Ok((loss, sig_score, sig_label))
            })
            .collect();
        let mut val_loss = 0.0f64;
        let mut scores = Vec::with_capacity(val_items.len());
        let mut labels = Vec::with_capacity(val_items.len());
        for r in val {
            let (loss, s, l) = r?;
            val_loss += loss;
            scores.push(s as f64);
            labels.push(l);
        }
        val_loss /= val_items.len() as f64;
        let val_auc = crate::eval::roc(&scores, &labels).ok().map(|c| c.auc);

        let improved = best.as_ref().map_or(true, |b| val_loss < b.val_loss);
        if improved {
            best = Some(BestStash {
                params: net.snapshot(),
                val_loss,
                epoch: epoch as u32,
            });
            since_improve = 0;
        } else {
            since_improve += 1;
        }

        let row = EpochLog {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_auc_significant: val_auc,
        };
        latest = snapshot_state(&net, &cfg.optimizer, &opt_state, tax_hash, cfg.seed,
            epoch as u32 + 1, &best, since_improve);
        on_epoch(&latest, &row);
        log.push(row);

        if since_improve > cfg.patience as u32 {
            break;
        }
    }

    let best_stash = best.expect("at least one epoch ran");
    let best_ckpt = Checkpoint {
        taxonomy_hash: tax_hash,
        epoch: best_stash.epoch + 1,
        seed: cfg.seed,
        params: best_stash.params.clone(),
        opt: None,
        best: None,
        epochs_since_improve: 0,
    };
    Ok(TrainOutcome {
        best: best_ckpt,
        latest,
        log,
    })
}

#[allow(clippy::too_many_arguments)]
fn snapshot_state(
    net: &Network<f32>,
    opt_kind: &OptimizerKind,
    opt_state: &OptState<f32>,
    tax_hash: u64,
    seed: u64,
    epoch: u32,
    best: &Option<BestStash>,
    since: u32,
) -> Checkpoint {
    Checkpoint {
        taxonomy_hash: tax_hash,
        epoch,
        seed,
        params: net.snapshot(),
        opt: Some(Checkpoint::opt_snapshot(opt_kind, opt_state)),
        best: best.clone(),
        epochs_since_improve: since,
    }
}
