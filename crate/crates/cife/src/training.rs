//! Mini-batch adversarial training, target prediction via random source
//! draws, and replicate aggregation.
//!
//! Each iteration advances the normalized progress `p = t / total_iterations`
//! and refreshes the learning rate and the domain-adversarial weight from
//! their schedules before any update. Two update realizations are provided:
//!
//! - `Reversal`: one backward pass through the dual objective; the reversal
//!   layers carry the discriminator/extractor minimax in a single descent.
//! - `TwoPhase`: discriminators first descend the lambda-weighted adversarial
//!   losses on detached features, then the extractors and classifier descend
//!   the full objective.
//!
//! Both produce the same per-iteration gradient directions; the two-phase
//! variant simply evaluates the extractor step against freshly updated
//! discriminators.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::data::{batch_iter, Batch, DataError, DomainDataset};
use crate::models::{argmax_rows, CifeModel, DannModel, Model, ModelError, ModelWidths};
use crate::nn::{lambda_d_schedule, lr_schedule, NnError, ScheduleParams, SgdMomentum};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("model does not match configured variant {0}")]
    VariantMismatch(Variant),
    #[error("loss term {term} is not finite at iteration {iteration}")]
    NanLoss { term: &'static str, iteration: usize },
    #[error("prediction source pool is empty")]
    EmptyPool,
    #[error("prediction draw count must be at least 1")]
    ZeroDraws,
    #[error("length mismatch: {left} predictions vs {right} labels")]
    LengthMismatch { left: usize, right: usize },
    #[error("checkpoint i/o: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    CheckpointFormat(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    SourceOnly,
    Dann,
    CifeDann,
    CifeCdan,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::SourceOnly => "source-only",
            Variant::Dann => "dann",
            Variant::CifeDann => "cife-dann",
            Variant::CifeCdan => "cife-cdan",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "source-only" => Ok(Variant::SourceOnly),
            "dann" => Ok(Variant::Dann),
            "cife-dann" => Ok(Variant::CifeDann),
            "cife-cdan" => Ok(Variant::CifeCdan),
            other => Err(format!(
                "unknown variant {other:?} (expected source-only|dann|cife-dann|cife-cdan)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateMode {
    Reversal,
    TwoPhase,
}

impl FromStr for UpdateMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reversal" => Ok(UpdateMode::Reversal),
            "two-phase" => Ok(UpdateMode::TwoPhase),
            other => Err(format!(
                "unknown update mode {other:?} (expected reversal|two-phase)"
            )),
        }
    }
}

impl fmt::Display for UpdateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpdateMode::Reversal => "reversal",
            UpdateMode::TwoPhase => "two-phase",
        })
    }
}

/// All optimization hyperparameters of one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: ScheduleParams,
    pub lambda_c: f64,
    pub k_pred: usize,
    pub seed: u64,
    pub update_mode: UpdateMode,
}

impl TrainConfig {
    pub fn new(variant: Variant) -> Self {
        TrainConfig {
            variant,
            epochs: 160,
            batch_size: 128,
            schedule: ScheduleParams::default(),
            lambda_c: 0.5,
            k_pred: 32,
            seed: 0,
            update_mode: UpdateMode::Reversal,
        }
    }
}

/// The grid explored for the category-adversarial weight.
pub const LAMBDA_C_GRID: [f64; 5] = [0.0001, 0.001, 0.01, 0.1, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_c: f64,
    pub l_d: f64,
    pub l_dc: f64,
    pub lr: f64,
    pub lambda_d: f64,
    pub source_acc: f64,
    pub target_acc: f64,
}

/// Build a freshly initialized model for the configured variant.
pub fn build_model(variant: Variant, widths: ModelWidths, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match variant {
        Variant::SourceOnly | Variant::Dann => Model::Dann(DannModel::new(widths, &mut rng)),
        Variant::CifeDann => Model::Cife(CifeModel::new(widths, false, &mut rng)),
        Variant::CifeCdan => Model::Cife(CifeModel::new(widths, true, &mut rng)),
    }
}

fn check_variant(model: &Model, variant: Variant) -> Result<(), TrainError> {
    let ok = match (model, variant) {
        (Model::Dann(_), Variant::SourceOnly | Variant::Dann) => true,
        (Model::Cife(m), Variant::CifeDann) => !m.conditioned,
        (Model::Cife(m), Variant::CifeCdan) => m.conditioned,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(TrainError::VariantMismatch(variant))
    }
}

fn check_finite(value: f64, term: &'static str, iteration: usize) -> Result<(), TrainError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NanLoss { term, iteration })
    }
}

struct IterationLosses {
    l_c: f64,
    l_d: f64,
    l_dc: f64,
}

#[allow(clippy::too_many_arguments)]
fn train_iteration_cife(
    model: &mut CifeModel,
    batch: &Batch,
    lambda_d: f64,
    lambda_c: f64,
    mode: UpdateMode,
    opt_task: &mut SgdMomentum,
    opt_disc: &mut SgdMomentum,
    iteration: usize,
) -> Result<IterationLosses, TrainError> {
    if mode == UpdateMode::TwoPhase {
        // Step 1: discriminators descend the lambda-weighted adversarial
        // losses on detached features.
        let mut tape = crate::autodiff::Tape::new();
        let b = model.bind(&mut tape);
        let xs = tape.leaf(&batch.source_x);
        let xt = tape.leaf(&batch.target_x);
        let l_disc = model.discriminator_objective(
            &mut tape,
            &b,
            xs,
            &batch.source_y,
            xt,
            lambda_d,
            lambda_c,
        )?;
        check_finite(tape.scalar(l_disc), "discriminator", iteration)?;
        tape.backward(l_disc).map_err(ModelError::from)?;
        model.d_d.collect_grads(&tape, &b.d_d);
        model.d_t.collect_grads(&tape, &b.d_t);
        opt_disc.step(&mut model.disc_params_mut())?;
    }

    // Extractor/classifier step (also updates the discriminators in
    // single-pass reversal mode).
    let mut tape = crate::autodiff::Tape::new();
    let b = model.bind(&mut tape);
    let xs = tape.leaf(&batch.source_x);
    let xt = tape.leaf(&batch.target_x);
    let (total, bundle) =
        model.total_objective(&mut tape, &b, xs, &batch.source_y, xt, lambda_d, lambda_c)?;
    check_finite(bundle.l_c, "classification", iteration)?;
    check_finite(bundle.l_d, "domain", iteration)?;
    check_finite(bundle.l_dc, "category", iteration)?;
    tape.backward(total).map_err(ModelError::from)?;
    model.f_s.collect_grads(&tape, &b.f_s);
    model.f_d.collect_grads(&tape, &b.f_d);
    model.classifier.collect_grads(&tape, &b.classifier);
    if mode == UpdateMode::Reversal {
        model.d_d.collect_grads(&tape, &b.d_d);
        model.d_t.collect_grads(&tape, &b.d_t);
        opt_disc.step(&mut model.disc_params_mut())?;
    }
    opt_task.step(&mut model.task_params_mut())?;
    Ok(IterationLosses {
        l_c: bundle.l_c,
        l_d: bundle.l_d,
        l_dc: bundle.l_dc,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_iteration_dann(
    model: &mut DannModel,
    batch: &Batch,
    lambda_d: f64,
    adversarial: bool,
    mode: UpdateMode,
    opt_task: &mut SgdMomentum,
    opt_disc: &mut SgdMomentum,
    iteration: usize,
) -> Result<IterationLosses, TrainError> {
    if !adversarial {
        // Source-only: plain classification descent.
        let mut tape = crate::autodiff::Tape::new();
        let b = model.bind(&mut tape);
        let xs = tape.leaf(&batch.source_x);
        let l_c = model.loss_classification(&mut tape, &b, xs, &batch.source_y)?;
        let value = tape.scalar(l_c);
        check_finite(value, "classification", iteration)?;
        tape.backward(l_c).map_err(ModelError::from)?;
        model.extractor.collect_grads(&tape, &b.extractor);
        model.classifier.collect_grads(&tape, &b.classifier);
        opt_task.step(&mut model.task_params_mut())?;
        return Ok(IterationLosses {
            l_c: value,
            l_d: 0.0,
            l_dc: 0.0,
        });
    }

    if mode == UpdateMode::TwoPhase {
        let mut tape = crate::autodiff::Tape::new();
        let b = model.bind(&mut tape);
        let xs = tape.leaf(&batch.source_x);
        let xt = tape.leaf(&batch.target_x);
        let l_disc = model.discriminator_objective(&mut tape, &b, xs, xt, lambda_d)?;
        check_finite(tape.scalar(l_disc), "discriminator", iteration)?;
        tape.backward(l_disc).map_err(ModelError::from)?;
        model.domain_disc.collect_grads(&tape, &b.domain_disc);
        opt_disc.step(&mut model.disc_params_mut())?;
    }

    let mut tape = crate::autodiff::Tape::new();
    let b = model.bind(&mut tape);
    let xs = tape.leaf(&batch.source_x);
    let xt = tape.leaf(&batch.target_x);
    let (total, bundle) =
        model.total_objective(&mut tape, &b, xs, &batch.source_y, xt, lambda_d)?;
    check_finite(bundle.l_c, "classification", iteration)?;
    check_finite(bundle.l_d, "domain", iteration)?;
    tape.backward(total).map_err(ModelError::from)?;
    model.extractor.collect_grads(&tape, &b.extractor);
    model.classifier.collect_grads(&tape, &b.classifier);
    if mode == UpdateMode::Reversal {
        model.domain_disc.collect_grads(&tape, &b.domain_disc);
        opt_disc.step(&mut model.disc_params_mut())?;
    }
    opt_task.step(&mut model.task_params_mut())?;
    Ok(IterationLosses {
        l_c: bundle.l_c,
        l_d: bundle.l_d,
        l_dc: 0.0,
    })
}

/// Run the full training loop, mutating the model in place and returning one
/// metrics record per epoch.
pub fn train(
    model: &mut Model,
    ds: &DomainDataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>, TrainError> {
    check_variant(model, cfg.variant)?;
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    let batches_per_epoch = ds.n_source().div_ceil(cfg.batch_size);
    let total_iterations = (cfg.epochs * batches_per_epoch) as f64;
    let mut opt_task = SgdMomentum::new(0.9);
    let mut opt_disc = SgdMomentum::new(0.9);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut iteration = 0usize;

    for epoch in 0..cfg.epochs {
        let batches = batch_iter(ds, cfg.batch_size, cfg.seed, epoch as u64)?;
        let mut sums = IterationLosses {
            l_c: 0.0,
            l_d: 0.0,
            l_dc: 0.0,
        };
        let mut last_lr = 0.0;
        let mut last_lambda_d = 0.0;
        for batch in &batches {
            // Schedules refresh at the start of each iteration so both
            // phases of one iteration see the same values.
            let p = iteration as f64 / total_iterations;
            let lr = lr_schedule(p, &cfg.schedule)?;
            let lambda_d = lambda_d_schedule(p, &cfg.schedule)?;
            opt_task.set_lr(lr);
            opt_disc.set_lr(lr);
            last_lr = lr;
            last_lambda_d = lambda_d;

            let losses = match (&mut *model, cfg.variant) {
                (Model::Cife(m), Variant::CifeDann | Variant::CifeCdan) => train_iteration_cife(
                    m,
                    batch,
                    lambda_d,
                    cfg.lambda_c,
                    cfg.update_mode,
                    &mut opt_task,
                    &mut opt_disc,
                    iteration,
                )?,
                (Model::Dann(m), variant) => train_iteration_dann(
                    m,
                    batch,
                    lambda_d,
                    variant == Variant::Dann,
                    cfg.update_mode,
                    &mut opt_task,
                    &mut opt_disc,
                    iteration,
                )?,
                _ => return Err(TrainError::VariantMismatch(cfg.variant)),
            };
            sums.l_c += losses.l_c;
            sums.l_d += losses.l_d;
            sums.l_dc += losses.l_dc;
            iteration += 1;
        }
        let n = batches.len() as f64;
        let source_acc = source_accuracy(model, ds)?;
        let target_pred = predict_target(
            model,
            &ds.source_x,
            &ds.target_test_x,
            cfg.k_pred,
            cfg.seed,
        )?;
        let target_acc = evaluate_accuracy(&target_pred, &ds.target_test_y)?;
        metrics.push(EpochMetrics {
            epoch,
            l_c: sums.l_c / n,
            l_d: sums.l_d / n,
            l_dc: sums.l_dc / n,
            lr: last_lr,
            lambda_d: last_lambda_d,
            source_acc,
            target_acc,
        });
    }
    Ok(metrics)
}

/// Accuracy of the classifier on the labeled source set, using each source
/// example's own features.
pub fn source_accuracy(model: &Model, ds: &DomainDataset) -> Result<f64, TrainError> {
    let probs = match model {
        Model::Dann(m) => m.predict_probs(&ds.source_x)?,
        Model::Cife(m) => m.predict_probs_own(&ds.source_x)?,
    };
    evaluate_accuracy(&argmax_rows(&probs), &ds.source_y)
}

/// Predict labels for target inputs.
///
/// The enhanced model pairs every target example with domain-specific
/// features from `k_pred` random source draws and averages the softmax
/// outputs; when `k_pred` covers the whole pool the average is computed by
/// exhaustive enumeration instead of sampling. Ties resolve to the lowest
/// class index. The baseline model ignores the pool.
pub fn predict_target(
    model: &Model,
    source_pool: &Tensor,
    xt: &Tensor,
    k_pred: usize,
    seed: u64,
) -> Result<Vec<usize>, TrainError> {
    if k_pred == 0 {
        return Err(TrainError::ZeroDraws);
    }
    let cife = match model {
        Model::Dann(m) => {
            let probs = m.predict_probs(xt)?;
            return Ok(argmax_rows(&probs));
        }
        Model::Cife(m) => m,
    };
    let pool_size = source_pool.rows();
    if pool_size == 0 {
        return Err(TrainError::EmptyPool);
    }
    let fd_pool = cife.f_d.apply(source_pool).map_err(ModelError::from)?;
    let n = xt.rows();
    let k = cife.widths.num_classes;
    let mut acc = vec![0.0f64; n * k];
    let draws: Vec<Vec<usize>> = if k_pred >= pool_size {
        // Exhaustive: every pool element once.
        (0..pool_size).map(|j| vec![j; n]).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k_pred)
            .map(|_| (0..n).map(|_| rng.random_range(0..pool_size)).collect())
            .collect()
    };
    let n_draws = draws.len() as f64;
    for idx in &draws {
        let fd = fd_pool.select_rows(idx);
        let probs = cife.forward_predict_concat(&fd, xt)?;
        for (a, p) in acc.iter_mut().zip(probs.data()) {
            *a += p / n_draws;
        }
    }
    let avg = Tensor::new(vec![n, k], acc).expect("sized");
    Ok(argmax_rows(&avg))
}

/// Fraction of exact matches.
pub fn evaluate_accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64, TrainError> {
    if predictions.len() != truth.len() {
        return Err(TrainError::LengthMismatch {
            left: predictions.len(),
            right: truth.len(),
        });
    }
    let hits = predictions
        .iter()
        .zip(truth)
        .filter(|(p, t)| p == t)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Aggregate of repeated runs with consecutive seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(accuracies: Vec<f64>) -> RunSummary {
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let var = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    RunSummary {
        accuracies,
        mean,
        std: var.sqrt(),
    }
}

/// Train and evaluate `n_runs` replicates with seeds `seed, seed+1, ...`,
/// reporting mean and population standard deviation of target-test accuracy.
pub fn run_replicates(
    ds: &DomainDataset,
    cfg: &TrainConfig,
    widths: &ModelWidths,
    n_runs: usize,
) -> Result<RunSummary, TrainError> {
    let mut accuracies = Vec::with_capacity(n_runs);
    for r in 0..n_runs {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = cfg.seed + r as u64;
        let mut model = build_model(run_cfg.variant, widths.clone(), run_cfg.seed);
        train(&mut model, ds, &run_cfg)?;
        let pred = predict_target(
            &model,
            &ds.source_x,
            &ds.target_test_x,
            run_cfg.k_pred,
            run_cfg.seed,
        )?;
        accuracies.push(evaluate_accuracy(&pred, &ds.target_test_y)?);
    }
    Ok(summarize(accuracies))
}

/// Self-describing container for a trained model and the configuration that
/// produced it. JSON with exact (shortest round-trip) float encoding, so the
/// file is byte-stable and reload is bit-exact.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub config: TrainConfig,
    pub model: Model,
}

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let json = serde_json::to_vec_pretty(ckpt)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}
