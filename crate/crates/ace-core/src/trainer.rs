//! Training loop over a source/target bundle.
//!
//! One run: initialize an ensemble from the seed, then for each epoch draw
//! `ceil(|target pool| / n_target_batch)` batches (uniform with replacement,
//! source and target drawn together so method choice never shifts the random
//! stream), apply the method's losses, and step the optimizer. Per-epoch
//! bookkeeping records train/validation losses, source validation accuracy,
//! and test metrics, then early stopping picks the checkpoint.
//!
//! Method specifics:
//!
//! * ERM: source loss only; the target batch is drawn and discarded.
//! * ACE: source loss plus the top-k pseudo-label loss. The mask is
//!   recomputed every batch from the current probabilities; an optional
//!   linear schedule ramps the mix-rate bound over epochs.
//! * DivDis: source loss plus the heads' mutual information on the target.
//! * D-BAT: sequential, with one single-head network per head slot instead
//!   of a shared trunk. The first half of the epochs trains network 0 on its
//!   source loss; the second half trains network 1 on its source loss plus
//!   the disagreement term against the finished network 0, whose parameters
//!   never move again. Reported train losses cover the live network only.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::error::{CoreError, Result};
use crate::metrics::{self, TestMetrics};
use crate::nn::{
    Arch, Batch, EnsembleModel, Grads, HeadProbs, LogitGrads, Optimizer, OptimizerConfig,
    ParamFilter,
};
use crate::objectives::{
    ace_target_loss_grad, dbat_loss_grad, divdis_loss_grad, group_prob_table, schedule_lower_bound,
    source_loss, source_loss_grad, topk_mask, MixRateConfig,
};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Erm,
    Ace,
    DivDis,
    Dbat,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Ace => "ace",
            Method::DivDis => "divdis",
            Method::Dbat => "dbat",
        }
    }
}

/// What drives checkpoint selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EarlyStopping {
    /// Source + target validation loss (target at full bound, unit weights).
    TotalValidationLoss,
    SourceValidationLoss,
    /// Maximize mean per-head source validation accuracy.
    SourceValidationAccuracy,
    /// Keep the final epoch.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub hidden: Vec<usize>,
    pub heads: usize,
    pub mix: MixRateConfig,
    /// Scalar multiplier on the method's target loss.
    pub aux_weight: f64,
    pub epochs: usize,
    pub n_source_batch: usize,
    pub n_target_batch: usize,
    pub optimizer: OptimizerConfig,
    pub early_stopping: EarlyStopping,
    /// Ramp the mix-rate bound linearly over `mix.schedule_epochs` epochs.
    /// Only meaningful for ACE.
    pub scheduling: bool,
    /// Train head j against concept j instead of the shared label.
    pub concept_labels: bool,
    /// Compute test metrics at every epoch (needed for correlation studies).
    pub per_epoch_test_metrics: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.mix.validate()?;
        self.optimizer.validate()?;
        if self.heads < 2 {
            return Err(CoreError::config("diverse training needs at least two heads"));
        }
        if self.method == Method::Dbat && self.heads != 2 {
            return Err(CoreError::config("the disagreement baseline uses exactly two heads"));
        }
        if self.epochs == 0 {
            return Err(CoreError::config("need at least one epoch"));
        }
        if self.n_source_batch == 0 || self.n_target_batch == 0 {
            return Err(CoreError::config("batch sizes must be positive"));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(CoreError::config("aux weight must be nonnegative"));
        }
        if self.scheduling && self.mix.schedule_epochs == 0 {
            return Err(CoreError::config("scheduling requires a positive schedule horizon"));
        }
        Ok(())
    }
}

/// Optional file outputs for a run.
#[derive(Debug, Clone, Default)]
pub struct RunIo {
    pub checkpoint_dir: Option<PathBuf>,
    /// Keep every epoch checkpoint instead of only the selected one.
    pub keep_all: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_source_loss: f64,
    /// Method target loss, unweighted, averaged over the epoch's batches.
    pub train_target_loss: f64,
    pub val_source_loss: f64,
    pub val_target_loss: f64,
    pub val_total_loss: f64,
    pub val_source_accuracy: f64,
    /// The scheduled mix-rate bound in effect this epoch.
    pub effective_lower_bound: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<TestMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status")]
pub enum RunStatus {
    Completed,
    Diverged { epoch: usize, batch: usize, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub seed: u64,
    pub status: RunStatus,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose checkpoint was selected by early stopping.
    pub best_epoch: usize,
    /// Criterion value at the selected epoch (negated accuracy for the
    /// accuracy mode, so smaller is always better).
    pub selected_criterion: f64,
    /// Test metrics at the selected checkpoint.
    pub final_test: Option<TestMetrics>,
    /// Where the selected checkpoint was written, when a directory was given.
    /// Methods that train one network per head write one file per network
    /// and record the first.
    pub checkpoint: Option<String>,
}

/// The networks behind one run. Joint methods train one shared-trunk model
/// with a head per concept; the sequential disagreement method trains a
/// separate single-head network per head slot so its second phase cannot
/// disturb the first network through shared parameters. Head indices run
/// across networks in order.
#[derive(Debug, Clone)]
pub enum Ensemble {
    Shared(EnsembleModel),
    Split(Vec<EnsembleModel>),
}

impl Ensemble {
    /// Per-head probabilities over a whole dataset, in head order.
    pub fn dataset_probs(&self, data: &crate::data::Dataset) -> Result<HeadProbs> {
        match self {
            Ensemble::Shared(model) => Ok(forward_dataset(model, data)?.probs),
            Ensemble::Split(models) => {
                let mut probs = Vec::new();
                for model in models {
                    probs.extend(forward_dataset(model, data)?.probs);
                }
                Ok(probs)
            }
        }
    }

    /// All parameters, networks concatenated in order.
    pub fn flat_params(&self) -> Vec<f64> {
        match self {
            Ensemble::Shared(model) => model.flat_params(),
            Ensemble::Split(models) => models.iter().flat_map(|m| m.flat_params()).collect(),
        }
    }

    /// Test metrics with heads taken across all networks.
    pub fn evaluate(&self, data: &crate::data::Dataset) -> Result<TestMetrics> {
        match self {
            Ensemble::Shared(model) => metrics::evaluate(model, data),
            Ensemble::Split(_) => {
                let probs = self.dataset_probs(data)?;
                let preds: Vec<Vec<usize>> = probs
                    .iter()
                    .map(|head| head.iter().map(|&p| metrics::predict(p)).collect())
                    .collect();
                metrics::evaluate_predictions(&preds, data)
            }
        }
    }

    /// Write one checkpoint file per network into `dir`, named from `stem`.
    /// Returns the recorded path: the single file for a shared model, the
    /// first network's file otherwise.
    fn save(&self, dir: &std::path::Path, stem: &str) -> Result<String> {
        match self {
            Ensemble::Shared(model) => {
                let path = dir.join(format!("{stem}.ckpt"));
                crate::nn::checkpoint::save(model, &path)?;
                Ok(path.to_string_lossy().into_owned())
            }
            Ensemble::Split(models) => {
                let mut first = None;
                for (i, model) in models.iter().enumerate() {
                    let path = dir.join(format!("{stem}.net{i}.ckpt"));
                    crate::nn::checkpoint::save(model, &path)?;
                    if first.is_none() {
                        first = Some(path.to_string_lossy().into_owned());
                    }
                }
                Ok(first.expect("split ensemble holds at least one network"))
            }
        }
    }
}

/// Validation losses: (total, source part, target part).
///
/// The target part is the method's loss at unit weights and the full,
/// unscheduled bound, so values are comparable across epochs and across runs
/// that only differ in scheduling.
pub fn validation_loss(
    model: &EnsembleModel,
    bundle: &DatasetBundle,
    config: &TrainConfig,
) -> Result<(f64, f64, f64)> {
    let src = forward_dataset(model, &bundle.source_val)?;
    let tgt = forward_dataset(model, &bundle.target_val)?;
    validation_from_probs(&src.probs, &tgt.probs, bundle, config)
}

/// [`validation_loss`] for a full ensemble.
pub fn validation_loss_ensemble(
    ens: &Ensemble,
    bundle: &DatasetBundle,
    config: &TrainConfig,
) -> Result<(f64, f64, f64)> {
    let src = ens.dataset_probs(&bundle.source_val)?;
    let tgt = ens.dataset_probs(&bundle.target_val)?;
    validation_from_probs(&src, &tgt, bundle, config)
}

/// [`validation_loss`] from precomputed head probabilities over the
/// validation splits.
fn validation_from_probs(
    src_probs: &HeadProbs,
    tgt_probs: &HeadProbs,
    bundle: &DatasetBundle,
    config: &TrainConfig,
) -> Result<(f64, f64, f64)> {
    let src_labels = labels_for(&bundle.source_val, config);
    let source_part = source_loss(src_probs, &src_labels)?;
    let target_part = match config.method {
        Method::Erm => 0.0,
        Method::Ace => {
            let mut eval_cfg = config.mix.clone();
            eval_cfg.group_weights = None;
            let table = group_prob_table(tgt_probs, &eval_cfg)?;
            let mask = topk_mask(&table, &eval_cfg, 1.0)?;
            crate::objectives::ace_target_loss(tgt_probs, &mask, &eval_cfg)?
        }
        Method::DivDis => crate::objectives::divdis_loss(tgt_probs)?,
        Method::Dbat => crate::objectives::dbat_loss(&tgt_probs[0], &tgt_probs[1])?,
    };
    Ok((source_part + target_part, source_part, target_part))
}

struct ForwardProbs {
    probs: crate::nn::HeadProbs,
}

fn forward_dataset(model: &EnsembleModel, data: &crate::data::Dataset) -> Result<ForwardProbs> {
    let (n, feats) = data.features();
    let fwd = model.forward(&Batch::new(n, data.dim, feats)?)?;
    Ok(ForwardProbs { probs: fwd.probs })
}

fn labels_for(data: &crate::data::Dataset, config: &TrainConfig) -> Vec<Vec<usize>> {
    (0..config.heads)
        .map(|j| data.head_labels(j.min(data.f - 1), config.concept_labels))
        .collect()
}

/// Train a fresh model on the bundle. Deterministic in (config, seed).
pub fn train(bundle: &DatasetBundle, config: &TrainConfig, seed: u64, io: &RunIo) -> Result<RunRecord> {
    let (record, _model) = train_returning_model(bundle, config, seed, io)?;
    Ok(record)
}

/// [`train`], also handing back the selected ensemble.
pub fn train_returning_model(
    bundle: &DatasetBundle,
    config: &TrainConfig,
    seed: u64,
    io: &RunIo,
) -> Result<(RunRecord, Ensemble)> {
    config.validate()?;
    if bundle.source_train.is_empty() || bundle.target_train.is_empty() {
        return Err(CoreError::config("training pools must be nonempty"));
    }

    let root = Rng::new(seed);
    let mut init_rng = root.derive(0x01);
    let mut batch_rng = root.derive(0x02);

    let dim = bundle.source_train.dim;
    let mut ens = match config.method {
        Method::Dbat => {
            let arch = Arch::new(dim, config.hidden.clone(), 1);
            let nets: Vec<EnsembleModel> = (0..config.heads)
                .map(|_| EnsembleModel::new(arch.clone(), &mut init_rng))
                .collect::<Result<_>>()?;
            Ensemble::Split(nets)
        }
        _ => {
            let arch = Arch::new(dim, config.hidden.clone(), config.heads);
            Ensemble::Shared(EnsembleModel::new(arch, &mut init_rng)?)
        }
    };
    let mut opts: Vec<Optimizer> = match &ens {
        Ensemble::Shared(model) => vec![Optimizer::new(config.optimizer, model)?],
        Ensemble::Split(models) => models
            .iter()
            .map(|m| Optimizer::new(config.optimizer, m))
            .collect::<Result<_>>()?,
    };

    let src_labels_pool = labels_for(&bundle.source_train, config);
    let batches_per_epoch =
        (bundle.target_train.len() + config.n_target_batch - 1) / config.n_target_batch;

    // D-BAT trains network 0 for the first half of the epochs, then network 1
    // against it for the rest.
    let dbat_phase1_epochs = config.epochs / 2;

    let mut epochs: Vec<EpochRecord> = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Ensemble)> = None;
    let mut status = RunStatus::Completed;

    'training: for epoch in 0..config.epochs {
        let bound_scale = if config.scheduling && config.method == Method::Ace {
            if config.mix.lower_bound > 0.0 {
                schedule_lower_bound(epoch, config.mix.schedule_epochs, config.mix.lower_bound)
                    / config.mix.lower_bound
            } else {
                1.0
            }
        } else {
            1.0
        };

        let mut epoch_src_loss = 0.0;
        let mut epoch_tgt_loss = 0.0;
        for batch_idx in 0..batches_per_epoch {
            // Source and target batches are always drawn, in this order, so
            // every method sees the same stream.
            let src_idx: Vec<usize> = (0..config.n_source_batch)
                .map(|_| batch_rng.index(bundle.source_train.len()))
                .collect();
            let tgt_idx: Vec<usize> = (0..config.n_target_batch)
                .map(|_| batch_rng.index(bundle.target_train.len()))
                .collect();

            let src_batch = gather(&bundle.source_train, &src_idx)?;
            let src_labels: Vec<Vec<usize>> = src_labels_pool
                .iter()
                .map(|lab| src_idx.iter().map(|&i| lab[i]).collect())
                .collect();

            let step = train_step(
                &mut ens,
                &mut opts,
                config,
                epoch,
                dbat_phase1_epochs,
                bound_scale,
                &src_batch,
                &src_labels,
                bundle,
                &tgt_idx,
            );
            match step {
                Ok((ls, lt)) => {
                    epoch_src_loss += ls;
                    epoch_tgt_loss += lt;
                }
                Err(CoreError::Numeric { location, detail }) => {
                    status = RunStatus::Diverged {
                        epoch,
                        batch: batch_idx,
                        detail: format!("{location}: {detail}"),
                    };
                    break 'training;
                }
                Err(e) => return Err(e),
            }
        }
        let inv_b = 1.0 / batches_per_epoch as f64;
        let src_val_probs = ens.dataset_probs(&bundle.source_val)?;
        let tgt_val_probs = ens.dataset_probs(&bundle.target_val)?;
        let (val_total, val_src, val_tgt) =
            validation_from_probs(&src_val_probs, &tgt_val_probs, bundle, config)?;
        if !val_total.is_finite() {
            status = RunStatus::Diverged {
                epoch,
                batch: batches_per_epoch,
                detail: format!("validation loss {val_total}"),
            };
            break 'training;
        }
        let val_acc =
            metrics::mean_head_accuracy(&src_val_probs, &labels_for(&bundle.source_val, config))?;
        let test = if config.per_epoch_test_metrics {
            Some(ens.evaluate(&bundle.test)?)
        } else {
            None
        };

        let rec = EpochRecord {
            epoch,
            train_source_loss: epoch_src_loss * inv_b,
            train_target_loss: epoch_tgt_loss * inv_b,
            val_source_loss: val_src,
            val_target_loss: val_tgt,
            val_total_loss: val_total,
            val_source_accuracy: val_acc,
            effective_lower_bound: bound_scale * config.mix.lower_bound,
            test,
        };

        let criterion = match config.early_stopping {
            EarlyStopping::TotalValidationLoss => val_total,
            EarlyStopping::SourceValidationLoss => val_src,
            EarlyStopping::SourceValidationAccuracy => -val_acc,
            EarlyStopping::None => 0.0,
        };
        let take = match (&best, config.early_stopping) {
            (_, EarlyStopping::None) => true,
            (None, _) => true,
            (Some((b, _, _)), _) => criterion < *b,
        };
        if take {
            best = Some((criterion, epoch, ens.clone()));
        }
        if let (Some(dir), true) = (&io.checkpoint_dir, io.keep_all) {
            std::fs::create_dir_all(dir)?;
            ens.save(dir, &format!("epoch-{epoch:04}"))?;
        }
        epochs.push(rec);
    }

    let (selected_criterion, best_epoch, best_ens) = match best {
        Some(b) => b,
        // Diverged before completing the first epoch.
        None => (f64::INFINITY, 0, ens.clone()),
    };

    let final_test = if matches!(status, RunStatus::Completed) {
        Some(best_ens.evaluate(&bundle.test)?)
    } else {
        None
    };

    let checkpoint = match &io.checkpoint_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(best_ens.save(dir, "selected")?)
        }
        None => None,
    };

    Ok((
        RunRecord {
            config: config.clone(),
            seed,
            status,
            epochs,
            best_epoch,
            selected_criterion,
            final_test,
            checkpoint,
        },
        best_ens,
    ))
}

/// One optimizer step. Returns (source loss, unweighted target loss).
#[allow(clippy::too_many_arguments)]
fn train_step(
    ens: &mut Ensemble,
    opts: &mut [Optimizer],
    config: &TrainConfig,
    epoch: usize,
    dbat_phase1_epochs: usize,
    bound_scale: f64,
    src_batch: &Batch,
    src_labels: &[Vec<usize>],
    bundle: &DatasetBundle,
    tgt_idx: &[usize],
) -> Result<(f64, f64)> {
    match ens {
        Ensemble::Shared(model) => joint_step(
            model,
            &mut opts[0],
            config,
            bound_scale,
            src_batch,
            src_labels,
            bundle,
            tgt_idx,
        ),
        Ensemble::Split(models) => dbat_step(
            models,
            opts,
            config,
            epoch,
            dbat_phase1_epochs,
            src_batch,
            src_labels,
            bundle,
            tgt_idx,
        ),
    }
}

/// Joint methods: every head trains every step on the shared model.
#[allow(clippy::too_many_arguments)]
fn joint_step(
    model: &mut EnsembleModel,
    opt: &mut Optimizer,
    config: &TrainConfig,
    bound_scale: f64,
    src_batch: &Batch,
    src_labels: &[Vec<usize>],
    bundle: &DatasetBundle,
    tgt_idx: &[usize],
) -> Result<(f64, f64)> {
    let src_fwd = model.forward(src_batch)?;
    let (src_loss_value, src_dlogits) = source_loss_grad(&src_fwd.probs, src_labels)?;

    let mut target_loss_value = 0.0;
    let mut target_pass: Option<(Batch, LogitGrads)> = None;

    match config.method {
        Method::Erm => {}
        Method::Ace => {
            let tgt_batch = gather(&bundle.target_train, tgt_idx)?;
            let tgt_fwd = model.forward(&tgt_batch)?;
            let table = group_prob_table(&tgt_fwd.probs, &config.mix)?;
            let mask = topk_mask(&table, &config.mix, bound_scale)?;
            let (lt, mut dlogits) = ace_target_loss_grad(&tgt_fwd.probs, &mask, &config.mix)?;
            target_loss_value = lt;
            if mask.counts().iter().any(|&k| k > 0) && config.aux_weight > 0.0 {
                scale_logits(&mut dlogits, config.aux_weight);
                target_pass = Some((tgt_batch, dlogits));
            }
        }
        Method::DivDis => {
            let tgt_batch = gather(&bundle.target_train, tgt_idx)?;
            let tgt_fwd = model.forward(&tgt_batch)?;
            let (lt, mut dlogits) = divdis_loss_grad(&tgt_fwd.probs)?;
            target_loss_value = lt;
            if config.aux_weight > 0.0 {
                scale_logits(&mut dlogits, config.aux_weight);
                target_pass = Some((tgt_batch, dlogits));
            }
        }
        Method::Dbat => {
            return Err(CoreError::config("the sequential method trains split networks"));
        }
    }

    let mut grads: Grads = model.backward(&src_fwd, &src_dlogits)?;
    if let Some((tgt_batch, dlogits)) = target_pass {
        let tgt_fwd = model.forward(&tgt_batch)?;
        let tgt_grads = model.backward(&tgt_fwd, &dlogits)?;
        grads.add_scaled(&tgt_grads, 1.0);
    }
    opt.step(model, &grads, &ParamFilter::all(config.heads))?;
    Ok((src_loss_value, target_loss_value))
}

/// Sequential disagreement: in the first phase network 0 fits the source; in
/// the second phase network 1 fits the source while disagreeing with the
/// finished network 0 on the target batch. Only the live network's losses
/// are returned.
#[allow(clippy::too_many_arguments)]
fn dbat_step(
    models: &mut [EnsembleModel],
    opts: &mut [Optimizer],
    config: &TrainConfig,
    epoch: usize,
    phase1_epochs: usize,
    src_batch: &Batch,
    src_labels: &[Vec<usize>],
    bundle: &DatasetBundle,
    tgt_idx: &[usize],
) -> Result<(f64, f64)> {
    let live = usize::from(epoch >= phase1_epochs);
    let labels = std::slice::from_ref(&src_labels[live]);

    let src_fwd = models[live].forward(src_batch)?;
    let (src_loss_value, src_dlogits) = source_loss_grad(&src_fwd.probs, labels)?;
    let mut grads = models[live].backward(&src_fwd, &src_dlogits)?;

    let mut target_loss_value = 0.0;
    if live == 1 {
        let tgt_batch = gather(&bundle.target_train, tgt_idx)?;
        let frozen_probs = models[0].forward(&tgt_batch)?.probs;
        let tgt_fwd = models[1].forward(&tgt_batch)?;
        let (lt, head_grad) = dbat_loss_grad(&frozen_probs[0], &tgt_fwd.probs[0])?;
        target_loss_value = lt;
        if config.aux_weight > 0.0 {
            let mut dlogits: LogitGrads = vec![head_grad];
            scale_logits(&mut dlogits, config.aux_weight);
            let tgt_grads = models[1].backward(&tgt_fwd, &dlogits)?;
            grads.add_scaled(&tgt_grads, 1.0);
        }
    }

    opts[live].step(&mut models[live], &grads, &ParamFilter::all(1))?;
    Ok((src_loss_value, target_loss_value))
}

fn scale_logits(dlogits: &mut LogitGrads, s: f64) {
    for head in dlogits.iter_mut() {
        for d in head.iter_mut() {
            d[0] *= s;
            d[1] *= s;
        }
    }
}

fn gather(data: &crate::data::Dataset, idx: &[usize]) -> Result<Batch> {
    let mut feats = Vec::with_capacity(idx.len() * data.dim);
    for &i in idx {
        feats.extend_from_slice(&data.points[i].x);
    }
    Batch::new(idx.len(), data.dim, feats)
}
