//! Diagnostics over frozen feature representations: proxy A-distance,
//! ideal-joint-hypothesis adaptability, retrained feature probes, and the
//! category-weight sensitivity sweep.
//!
//! Every probe trains a fresh network from its own seed and never touches
//! the model that produced the features; probes are pure functions of
//! (features, labels, seed).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::data::DomainDataset;
use crate::models::{argmax_rows, ModelWidths};
use crate::nn::{lr_schedule, Mlp, NnError, OutputHead, ScheduleParams, SgdMomentum};
use crate::training::{run_replicates, TrainConfig, TrainError};

/// Fixed probe capacity: one hidden layer, trained full-batch for a fixed
/// number of epochs under the standard annealed schedule.
pub const PROBE_HIDDEN: usize = 64;
pub const PROBE_EPOCHS: usize = 200;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("need at least {need} samples per domain, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("class {0} is absent from the probe training set")]
    MissingClass(usize),
    #[error("probe labels contain a single class; nothing to separate")]
    SingleClass,
    #[error("features and labels disagree: {rows} rows vs {labels} labels")]
    RowLabelMismatch { rows: usize, labels: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Everything the diagnostic commands can report. Sections are optional so
/// one report type serves every probe kind.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ProbeReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub err_source: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub err_target: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub err_sum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category_acc_on_f_d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category_acc_on_f_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_acc_on_f_s: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub lambda_c_table: Vec<SweepRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_c: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
}

/// Train a fresh softmax probe full-batch for [`PROBE_EPOCHS`] epochs.
fn train_probe(x: &Tensor, y: &[usize], k: usize, seed: u64) -> Result<Mlp, ProbeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = Mlp::new(
        &[x.cols()?, PROBE_HIDDEN, k],
        OutputHead::SoftmaxLogits,
        &mut rng,
    );
    let sched = ScheduleParams::default();
    let mut opt = SgdMomentum::new(0.9);
    for epoch in 0..PROBE_EPOCHS {
        let p = epoch as f64 / PROBE_EPOCHS as f64;
        opt.set_lr(lr_schedule(p, &sched)?);
        let mut tape = Tape::new();
        let vars = probe.bind(&mut tape);
        let xv = tape.leaf(x);
        let logits = probe.forward(&mut tape, &vars, xv)?;
        let loss = tape.softmax_cross_entropy(logits, y)?;
        tape.backward(loss)?;
        probe.collect_grads(&tape, &vars);
        opt.step(&mut probe.params_mut())?;
    }
    Ok(probe)
}

fn probe_accuracy(probe: &Mlp, x: &Tensor, y: &[usize]) -> Result<f64, ProbeError> {
    let logits = probe.apply(x)?;
    let pred = argmax_rows(&logits);
    let hits = pred.iter().zip(y).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / y.len() as f64)
}

/// Deterministic shuffled 50/50 split of `0..n` into (train, test).
fn split_half(n: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let cut = n / 2;
    let test = idx.split_off(cut);
    (idx, test)
}

fn check_rows(x: &Tensor, y: &[usize]) -> Result<(), ProbeError> {
    if x.rows() != y.len() {
        return Err(ProbeError::RowLabelMismatch {
            rows: x.rows(),
            labels: y.len(),
        });
    }
    Ok(())
}

/// Proxy A-distance between two frozen feature sets.
///
/// Each domain is split 50/50; a fresh binary discriminator is trained on
/// the train halves and `epsilon` is its held-out error folded into
/// [0, 0.5] (`min(err, 1 - err)`), so the measure is symmetric in the
/// domain labels. Returns `(epsilon, d_a)` with `d_a = 2 (1 - 2 epsilon)`.
pub fn a_distance(
    features_s: &Tensor,
    features_t: &Tensor,
    seed: u64,
) -> Result<(f64, f64), ProbeError> {
    for f in [features_s, features_t] {
        if f.rows() < 4 {
            return Err(ProbeError::TooFewSamples {
                need: 4,
                got: f.rows(),
            });
        }
    }
    let dim = features_s.cols()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s_train, s_test) = split_half(features_s.rows(), &mut rng);
    let (t_train, t_test) = split_half(features_t.rows(), &mut rng);

    let stack = |s_idx: &[usize], t_idx: &[usize]| -> (Tensor, Vec<usize>) {
        let xs = features_s.select_rows(s_idx);
        let xt = features_t.select_rows(t_idx);
        let mut data = xs.data().to_vec();
        data.extend_from_slice(xt.data());
        let x = Tensor::new(vec![s_idx.len() + t_idx.len(), dim], data).expect("sized");
        let mut y = vec![0usize; s_idx.len()];
        y.extend(std::iter::repeat_n(1usize, t_idx.len()));
        (x, y)
    };
    let (x_train, y_train) = stack(&s_train, &t_train);
    let (x_test, y_test) = stack(&s_test, &t_test);
    let probe = train_probe(&x_train, &y_train, 2, seed)?;
    let err = 1.0 - probe_accuracy(&probe, &x_test, &y_test)?;
    let epsilon = err.min(1.0 - err).clamp(0.0, 0.5);
    Ok((epsilon, 2.0 * (1.0 - 2.0 * epsilon)))
}

/// Error rates of the ideal joint hypothesis: a fresh classifier trained on
/// the union of labeled source and target features, evaluated on held-out
/// halves of each domain. Target labels are used only here.
pub fn adaptability(
    features_s: &Tensor,
    labels_s: &[usize],
    features_t: &Tensor,
    labels_t: &[usize],
    num_classes: usize,
    seed: u64,
) -> Result<(f64, f64, f64), ProbeError> {
    check_rows(features_s, labels_s)?;
    check_rows(features_t, labels_t)?;
    for f in [features_s, features_t] {
        if f.rows() < 4 {
            return Err(ProbeError::TooFewSamples {
                need: 4,
                got: f.rows(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s_train, s_test) = split_half(features_s.rows(), &mut rng);
    let (t_train, t_test) = split_half(features_t.rows(), &mut rng);

    let gather = |feat: &Tensor, labels: &[usize], idx: &[usize]| -> (Tensor, Vec<usize>) {
        (feat.select_rows(idx), idx.iter().map(|&i| labels[i]).collect())
    };
    let (xs_tr, ys_tr) = gather(features_s, labels_s, &s_train);
    let (xt_tr, yt_tr) = gather(features_t, labels_t, &t_train);
    let mut data = xs_tr.data().to_vec();
    data.extend_from_slice(xt_tr.data());
    let x_train = Tensor::new(vec![xs_tr.rows() + xt_tr.rows(), features_s.cols()?], data)
        .expect("sized");
    let mut y_train = ys_tr;
    y_train.extend(yt_tr);
    for c in 0..num_classes {
        if !y_train.contains(&c) {
            return Err(ProbeError::MissingClass(c));
        }
    }
    let probe = train_probe(&x_train, &y_train, num_classes, seed)?;

    let (xs_te, ys_te) = gather(features_s, labels_s, &s_test);
    let (xt_te, yt_te) = gather(features_t, labels_t, &t_test);
    let err_s = 1.0 - probe_accuracy(&probe, &xs_te, &ys_te)?;
    let err_t = 1.0 - probe_accuracy(&probe, &xt_te, &yt_te)?;
    Ok((err_s, err_t, err_s + err_t))
}

/// Held-out accuracy of a fresh probe trained to predict `labels` (class or
/// domain indices) from frozen features.
pub fn feature_probe(features: &Tensor, labels: &[usize], seed: u64) -> Result<f64, ProbeError> {
    check_rows(features, labels)?;
    if features.rows() < 4 {
        return Err(ProbeError::TooFewSamples {
            need: 4,
            got: features.rows(),
        });
    }
    let k = labels.iter().max().copied().unwrap_or(0) + 1;
    let distinct = {
        let mut seen = vec![false; k];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(ProbeError::SingleClass);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, test) = split_half(features.rows(), &mut rng);
    let gather = |idx: &[usize]| -> (Tensor, Vec<usize>) {
        (
            features.select_rows(idx),
            idx.iter().map(|&i| labels[i]).collect(),
        )
    };
    let (x_tr, y_tr) = gather(&train);
    let (x_te, y_te) = gather(&test);
    if y_tr.iter().collect::<std::collections::HashSet<_>>().len() < 2 {
        return Err(ProbeError::SingleClass);
    }
    let probe = train_probe(&x_tr, &y_tr, k, seed)?;
    probe_accuracy(&probe, &x_te, &y_te)
}

/// Run the replicate pipeline once per grid value (sorted ascending) and
/// tabulate mean/std target-test accuracy.
pub fn lambda_c_sweep(
    ds: &DomainDataset,
    base: &TrainConfig,
    widths: &ModelWidths,
    grid: &[f64],
    n_runs: usize,
) -> Result<Vec<SweepRow>, ProbeError> {
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
    let mut rows = Vec::with_capacity(grid.len());
    for lambda_c in grid {
        let cfg = TrainConfig {
            lambda_c,
            ..base.clone()
        };
        let summary = run_replicates(ds, &cfg, widths, n_runs)?;
        rows.push(SweepRow {
            lambda_c,
            mean_acc: summary.mean,
            std_acc: summary.std,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_factorized, FactorizedTaskSpec};
    use crate::training::Variant;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian_block(n: usize, d: usize, mean: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let data: Vec<f64> = (0..n * d)
            .map(|_| mean + rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn identical_distributions_give_near_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = gaussian_block(600, 5, 0.0, &mut rng);
        let b = gaussian_block(600, 5, 0.0, &mut rng);
        let (eps, d_a) = a_distance(&a, &b, 3).unwrap();
        assert!(d_a.abs() < 0.2, "d_a = {d_a}, eps = {eps}");
        assert_eq!(d_a, 2.0 * (1.0 - 2.0 * eps));
    }

    #[test]
    fn constant_separated_features_give_maximal_distance() {
        let zeros = Tensor::zeros(vec![40, 3]);
        let ones = Tensor::new(vec![40, 3], vec![1.0; 120]).unwrap();
        let (eps, d_a) = a_distance(&zeros, &ones, 0).unwrap();
        assert_eq!(eps, 0.0);
        assert_eq!(d_a, 2.0);
    }

    #[test]
    fn a_distance_needs_four_samples_per_domain() {
        let small = Tensor::zeros(vec![3, 2]);
        let ok = Tensor::zeros(vec![10, 2]);
        assert!(matches!(
            a_distance(&small, &ok, 0),
            Err(ProbeError::TooFewSamples { .. })
        ));
        assert!(matches!(
            a_distance(&ok, &small, 0),
            Err(ProbeError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn a_distance_symmetric_under_domain_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = gaussian_block(200, 4, 0.0, &mut rng);
        let b = gaussian_block(200, 4, 0.8, &mut rng);
        let (e1, _) = a_distance(&a, &b, 9).unwrap();
        let (e2, _) = a_distance(&b, &a, 9).unwrap();
        // Same seed drives the same splits, and the min/clamp rule folds the
        // label swap away up to the training asymmetry of the probe; both
        // must land in [0, 0.5].
        assert!((0.0..=0.5).contains(&e1));
        assert!((0.0..=0.5).contains(&e2));
    }

    #[test]
    fn probing_twice_with_same_seed_is_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = gaussian_block(100, 4, 0.0, &mut rng);
        let b = gaussian_block(100, 4, 0.5, &mut rng);
        assert_eq!(a_distance(&a, &b, 42).unwrap(), a_distance(&a, &b, 42).unwrap());
    }

    fn one_hot_features(labels: &[usize], k: usize) -> Tensor {
        let mut data = vec![0.0; labels.len() * k];
        for (i, &l) in labels.iter().enumerate() {
            data[i * k + l] = 1.0;
        }
        Tensor::new(vec![labels.len(), k], data).unwrap()
    }

    #[test]
    fn adaptability_on_one_hot_features_is_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let labels_s: Vec<usize> = (0..200).map(|_| rng.random_range(0..4)).collect();
        let labels_t: Vec<usize> = (0..200).map(|_| rng.random_range(0..4)).collect();
        let fs = one_hot_features(&labels_s, 4);
        let ft = one_hot_features(&labels_t, 4);
        let (es, et, sum) = adaptability(&fs, &labels_s, &ft, &labels_t, 4, 1).unwrap();
        assert!(es < 0.02 && et < 0.02, "errs {es} {et}");
        assert_eq!(sum, es + et);
    }

    #[test]
    fn adaptability_on_noise_is_chance_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let labels_s: Vec<usize> = (0..400).map(|_| rng.random_range(0..4)).collect();
        let labels_t: Vec<usize> = (0..400).map(|_| rng.random_range(0..4)).collect();
        let fs = gaussian_block(400, 6, 0.0, &mut rng);
        let ft = gaussian_block(400, 6, 0.0, &mut rng);
        let (es, et, _) = adaptability(&fs, &labels_s, &ft, &labels_t, 4, 2).unwrap();
        assert!((es - 0.75).abs() < 0.12, "err_s = {es}");
        assert!((et - 0.75).abs() < 0.12, "err_t = {et}");
    }

    #[test]
    fn adaptability_rejects_missing_class() {
        let labels_s = vec![0usize; 20];
        let labels_t = vec![1usize; 20];
        let fs = one_hot_features(&labels_s, 4);
        let ft = one_hot_features(&labels_t, 4);
        assert!(matches!(
            adaptability(&fs, &labels_s, &ft, &labels_t, 4, 0),
            Err(ProbeError::MissingClass(_))
        ));
    }

    #[test]
    fn feature_probe_reads_off_an_embedded_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let labels: Vec<usize> = (0..300).map(|_| rng.random_range(0..3)).collect();
        let feats = one_hot_features(&labels, 3);
        let acc = feature_probe(&feats, &labels, 3).unwrap();
        assert!(acc > 0.98, "accuracy {acc}");
    }

    #[test]
    fn feature_probe_rejects_single_class() {
        let feats = Tensor::zeros(vec![20, 3]);
        assert!(matches!(
            feature_probe(&feats, &[2usize; 20], 0),
            Err(ProbeError::SingleClass)
        ));
    }

    #[test]
    fn sweep_single_value_matches_direct_replicates() {
        let spec =
            FactorizedTaskSpec::seeded(3, 10, 2, 2, 0.2, 60, 60, 60, 0.4, 1.0, 3).unwrap();
        let ds = gen_factorized(&spec).unwrap();
        let widths = ModelWidths {
            input_dim: ds.input_dim,
            num_classes: ds.num_classes,
            extractor_hidden: vec![12],
            m_s: 6,
            m_d: 6,
            head_hidden: 6,
        };
        let mut cfg = TrainConfig::new(Variant::CifeDann);
        cfg.epochs = 2;
        cfg.batch_size = 30;
        cfg.lambda_c = 0.05;
        let rows = lambda_c_sweep(&ds, &cfg, &widths, &[0.05], 2).unwrap();
        assert_eq!(rows.len(), 1);
        let direct = run_replicates(&ds, &cfg, &widths, 2).unwrap();
        assert_eq!(rows[0].mean_acc, direct.mean);
        assert_eq!(rows[0].std_acc, direct.std);
    }

    #[test]
    fn sweep_rows_sorted_ascending() {
        let spec =
            FactorizedTaskSpec::seeded(3, 10, 2, 2, 0.2, 60, 60, 60, 0.4, 1.0, 4).unwrap();
        let ds = gen_factorized(&spec).unwrap();
        let widths = ModelWidths {
            input_dim: ds.input_dim,
            num_classes: ds.num_classes,
            extractor_hidden: vec![12],
            m_s: 6,
            m_d: 6,
            head_hidden: 6,
        };
        let mut cfg = TrainConfig::new(Variant::CifeDann);
        cfg.epochs = 1;
        cfg.batch_size = 30;
        let rows = lambda_c_sweep(&ds, &cfg, &widths, &[0.1, 0.001, 0.01], 1).unwrap();
        let lambdas: Vec<f64> = rows.iter().map(|r| r.lambda_c).collect();
        assert_eq!(lambdas, vec![0.001, 0.01, 0.1]);
        assert!(rows.iter().all(|r| r.std_acc == 0.0));
    }
}
