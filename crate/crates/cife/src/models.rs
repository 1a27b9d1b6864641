//! Model assemblies and loss terms.
//!
//! The enhanced model has five components: a domain-invariant extractor `F_s`
//! played against a binary domain discriminator `D_d`, a domain-specific
//! extractor `F_d` played against a K-way category discriminator `D_t`, and a
//! classifier `C` fed the concatenation `[F_d(x), F_s(x)]`. The baseline
//! keeps only `F`, `C`, `D`.
//!
//! Sign convention: every adversarial term is a loss that its discriminator
//! descends. The extractor side of each minimax game is realized by a
//! gradient-reversal layer in front of the discriminator, so a single descent
//! direction trains both players. The discriminator objective as a
//! log-likelihood to ascend is the same game with the sign flipped; the
//! adversarial-sign tests pin this equivalence down.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softmax_rows, AutodiffError, Tape, Tensor, Var};
use crate::nn::{Mlp, MlpVars, OutputHead};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("prediction row {row} sums to {sum}, expected 1 within 1e-6")]
    RowSumDeviation { row: usize, sum: f64 },
    #[error("input width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
}

/// Layer widths for all components.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelWidths {
    pub input_dim: usize,
    pub num_classes: usize,
    /// Hidden widths of both extractors.
    pub extractor_hidden: Vec<usize>,
    /// Output width of the domain-invariant extractor.
    pub m_s: usize,
    /// Output width of the domain-specific extractor.
    pub m_d: usize,
    /// Hidden width of both discriminators. The classifier itself is a
    /// single fully-connected layer over the concatenated features.
    pub head_hidden: usize,
}

impl ModelWidths {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        ModelWidths {
            input_dim,
            num_classes,
            extractor_hidden: vec![32],
            m_s: 8,
            m_d: 4,
            head_hidden: 64,
        }
    }

    fn extractor_chain(&self, out: usize) -> Vec<usize> {
        let mut chain = vec![self.input_dim];
        chain.extend_from_slice(&self.extractor_hidden);
        chain.push(out);
        chain
    }
}

/// Scalar values of one evaluation of the dual objective.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_c: f64,
    pub l_d: f64,
    pub l_dc: f64,
    pub total: f64,
    pub lambda_d: f64,
    pub lambda_c: f64,
}

/// Baseline adversarial model: extractor `F`, classifier `C`, domain
/// discriminator `D`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DannModel {
    pub widths: ModelWidths,
    pub extractor: Mlp,
    pub classifier: Mlp,
    pub domain_disc: Mlp,
}

/// Dual adversarial model with category-invariant feature enhancement.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CifeModel {
    pub widths: ModelWidths,
    /// Condition the domain discriminator on classifier predictions via a
    /// flattened outer product instead of raw features.
    pub conditioned: bool,
    pub f_s: Mlp,
    pub f_d: Mlp,
    pub classifier: Mlp,
    pub d_d: Mlp,
    pub d_t: Mlp,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Model {
    Dann(DannModel),
    Cife(CifeModel),
}

impl DannModel {
    pub fn new(widths: ModelWidths, rng: &mut ChaCha8Rng) -> Self {
        let extractor = Mlp::new(
            &widths.extractor_chain(widths.m_s),
            OutputHead::Identity,
            rng,
        );
        let classifier = Mlp::new(
            &[widths.m_s, widths.num_classes],
            OutputHead::SoftmaxLogits,
            rng,
        );
        let domain_disc = Mlp::new(
            &[widths.m_s, widths.head_hidden, 1],
            OutputHead::Sigmoid,
            rng,
        );
        DannModel {
            widths,
            extractor,
            classifier,
            domain_disc,
        }
    }
}

impl CifeModel {
    pub fn new(widths: ModelWidths, conditioned: bool, rng: &mut ChaCha8Rng) -> Self {
        let f_s = Mlp::new(
            &widths.extractor_chain(widths.m_s),
            OutputHead::Identity,
            rng,
        );
        let f_d = Mlp::new(
            &widths.extractor_chain(widths.m_d),
            OutputHead::Tanh,
            rng,
        );
        // Classifier input is the concatenation width m_d + m_s. The rows
        // acting on the domain-specific half start at zero so the early
        // classification signal anchors on the invariant features; weight on
        // the complement grows only where it lowers the loss.
        let mut classifier = Mlp::new(
            &[widths.m_d + widths.m_s, widths.num_classes],
            OutputHead::SoftmaxLogits,
            rng,
        );
        let k = widths.num_classes;
        classifier.layers[0].weight.data_mut()[..widths.m_d * k].fill(0.0);
        let dd_in = if conditioned {
            widths.m_s * widths.num_classes
        } else {
            widths.m_s
        };
        let d_d = Mlp::new(&[dd_in, widths.head_hidden, 1], OutputHead::Sigmoid, rng);
        let d_t = Mlp::new(
            &[widths.m_d, widths.head_hidden, widths.num_classes],
            OutputHead::SoftmaxLogits,
            rng,
        );
        CifeModel {
            widths,
            conditioned,
            f_s,
            f_d,
            classifier,
            d_d,
            d_t,
        }
    }
}

/// Per-tape parameter bindings for a [`CifeModel`].
pub struct CifeBindings {
    pub f_s: MlpVars,
    pub f_d: MlpVars,
    pub classifier: MlpVars,
    pub d_d: MlpVars,
    pub d_t: MlpVars,
}

/// Per-tape parameter bindings for a [`DannModel`].
pub struct DannBindings {
    pub extractor: MlpVars,
    pub classifier: MlpVars,
    pub domain_disc: MlpVars,
}

/// How extractor outputs reach a discriminator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AdversarialRoute {
    /// Gradient-reversal layer with the given coefficient.
    Reverse(f64),
    /// Cut the graph: the discriminator trains, the extractor gets nothing.
    Detach,
    /// Plain connection, used by the sign-property oracles.
    Straight,
}

fn route(tape: &mut Tape, features: Var, r: AdversarialRoute) -> Var {
    match r {
        AdversarialRoute::Reverse(c) => tape.grad_reverse(features, c),
        AdversarialRoute::Detach => tape.detach(features),
        AdversarialRoute::Straight => features,
    }
}

fn check_nonempty(x: &Tensor) -> Result<(), ModelError> {
    if x.rows() == 0 {
        return Err(ModelError::EmptyBatch);
    }
    Ok(())
}

/// Domain BCE over the union of a source batch (domain index 0) and a target
/// batch (domain index 1), weighted to equal the mean over all rows.
fn domain_bce(
    tape: &mut Tape,
    p_source: Var,
    p_target: Var,
) -> Result<Var, AutodiffError> {
    let n_s = tape.shape(p_source)[0];
    let n_t = tape.shape(p_target)[0];
    let bce_s = tape.binary_cross_entropy(p_source, &vec![0u8; n_s])?;
    let bce_t = tape.binary_cross_entropy(p_target, &vec![1u8; n_t])?;
    let total = (n_s + n_t) as f64;
    let ws = tape.scale(bce_s, n_s as f64 / total);
    let wt = tape.scale(bce_t, n_t as f64 / total);
    tape.add(ws, wt)
}

/// Flattened outer product of features and predicted class probabilities,
/// validating that prediction rows are normalized.
pub fn cdan_condition(
    tape: &mut Tape,
    features: Var,
    predictions: Var,
) -> Result<Var, ModelError> {
    let k = tape.shape(predictions)[1];
    let data = tape.data(predictions);
    let n = tape.shape(predictions)[0];
    for i in 0..n {
        let sum: f64 = data[i * k..(i + 1) * k].iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(ModelError::RowSumDeviation { row: i, sum });
        }
    }
    Ok(tape.outer_rows(features, predictions)?)
}

impl CifeModel {
    pub fn bind(&self, tape: &mut Tape) -> CifeBindings {
        CifeBindings {
            f_s: self.f_s.bind(tape),
            f_d: self.f_d.bind(tape),
            classifier: self.classifier.bind(tape),
            d_d: self.d_d.bind(tape),
            d_t: self.d_t.bind(tape),
        }
    }

    /// Concatenated representation `[F_d(x), F_s(x)]`.
    fn concat_features(
        &self,
        tape: &mut Tape,
        b: &CifeBindings,
        x: Var,
    ) -> Result<Var, AutodiffError> {
        let fd = self.f_d.forward(tape, &b.f_d, x)?;
        let fs = self.f_s.forward(tape, &b.f_s, x)?;
        tape.concat(fd, fs)
    }

    /// Cross-entropy of the classifier on a labeled source batch.
    pub fn loss_classification(
        &self,
        tape: &mut Tape,
        b: &CifeBindings,
        xs: Var,
        ys: &[usize],
    ) -> Result<Var, ModelError> {
        let cat = self.concat_features(tape, b, xs)?;
        let logits = self.classifier.forward(tape, &b.classifier, cat)?;
        Ok(tape.softmax_cross_entropy(logits, ys)?)
    }

    /// Detached classifier predictions, used to condition the domain
    /// discriminator without feeding adversarial gradient back into `C`.
    fn detached_predictions(
        &self,
        tape: &mut Tape,
        b: &CifeBindings,
        x: Var,
    ) -> Result<Var, ModelError> {
        let cat = self.concat_features(tape, b, x)?;
        let logits = self.classifier.forward(tape, &b.classifier, cat)?;
        let probs = tape.softmax(logits)?;
        Ok(tape.detach(probs))
    }

    fn domain_disc_input(
        &self,
        tape: &mut Tape,
        b: &CifeBindings,
        x: Var,
        r: AdversarialRoute,
    ) -> Result<Var, ModelError> {
        let fs = self.f_s.forward(tape, &b.f_s, x)?;
        let routed = route(tape, fs, r);
        if self.conditioned {
            let preds = self.detached_predictions(tape, b, x)?;
            cdan_condition(tape, routed, preds)
        } else {
            Ok(routed)
        }
    }

    /// Domain-alignment game: BCE of `D_d` over both domains, with the
    /// extractor side wired through `route`.
    pub fn loss_domain_routed(
        &self,
        tape: &mut Tape,
        b: &CifeBindings,
        xs: Var,
        xt: Var,
        r: AdversarialRoute,
    ) -> Result<Var, ModelError> {
        if tape.shape(xs)[0] == 0 || tape.shape(xt)[0] == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let in_s = self.domain_disc_input(tape, b, xs, r)?;
        let in_t = self.domain_disc_input(tape, b, xt, r)?;
        let p_s = self.d_d.forward(tape, &b.d_d, in_s)?;
        let p_t = self.d_d.forward(tape, &b.d_d, in_t)?;
        Ok(domain_bce(tape, p_s, p_t)?)
    }

    /// Domain game with the extractor trained through gradient reversal at
    /// `lambda_d`.
    pub fn loss_domain(
        &self,
        tape: &mut Tape,
        b: &CifeBindings,
        xs: Var,
        xt: Var,
        lambda_d: f64,
    ) -> Result<Var, ModelError> {
        self.loss_domain_routed(tape, b, xs, xt, AdversarialRoute::Reverse(lambda_d))
    }

    /// Category-alignment game: cross-entropy of `D_t` on source labels, with
    /// the extractor side wired through `route`. Source batch only.
    pub fn loss_category_routed(
        &self,
        tape: &mut Tape,
        b: &CifeBindings,
        xs: Var,
        ys: &[usize],
        r: AdversarialRoute,
    ) -> Result<Var, ModelError> {
        if tape.shape(xs)[0] == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let fd = self.f_d.forward(tape, &b.f_d, xs)?;
        let routed = route(tape, fd, r);
        let logits = self.d_t.forward(tape, &b.d_t, routed)?;
        Ok(tape.softmax_cross_entropy(logits, ys)?)
    }

    pub fn loss_category(
        &self,
        tape: &mut Tape,
        b: &CifeBindings,
        xs: Var,
        ys: &[usize],
        lambda_c: f64,
    ) -> Result<Var, ModelError> {
        self.loss_category_routed(tape, b, xs, ys, AdversarialRoute::Reverse(lambda_c))
    }

    /// Dual objective `l_c + lambda_d * l_d + lambda_c * l_dc`.
    ///
    /// The adversarial terms carry a unit-coefficient reversal inside and the
    /// lambda weight outside, so one backward pass yields the discriminator
    /// gradients at weight `lambda` and the extractor gradients at `-lambda`.
    #[allow(clippy::too_many_arguments)]
    pub fn total_objective(
        &self,
        tape: &mut Tape,
        b: &CifeBindings,
        xs: Var,
        ys: &[usize],
        xt: Var,
        lambda_d: f64,
        lambda_c: f64,
    ) -> Result<(Var, LossBundle), ModelError> {
        let l_c = self.loss_classification(tape, b, xs, ys)?;
        let l_d = self.loss_domain_routed(tape, b, xs, xt, AdversarialRoute::Reverse(1.0))?;
        let l_dc = self.loss_category_routed(tape, b, xs, ys, AdversarialRoute::Reverse(1.0))?;
        let wd = tape.scale(l_d, lambda_d);
        let wc = tape.scale(l_dc, lambda_c);
        let partial = tape.add(l_c, wd)?;
        let total = tape.add(partial, wc)?;
        let bundle = LossBundle {
            l_c: tape.scalar(l_c),
            l_d: tape.scalar(l_d),
            l_dc: tape.scalar(l_dc),
            total: tape.scalar(total),
            lambda_d,
            lambda_c,
        };
        Ok((total, bundle))
    }

    /// Discriminator-phase objective: `lambda_d * l_d + lambda_c * l_dc` on
    /// detached features, so only `D_d` and `D_t` receive gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn discriminator_objective(
        &self,
        tape: &mut Tape,
        b: &CifeBindings,
        xs: Var,
        ys: &[usize],
        xt: Var,
        lambda_d: f64,
        lambda_c: f64,
    ) -> Result<Var, ModelError> {
        let l_d = self.loss_domain_routed(tape, b, xs, xt, AdversarialRoute::Detach)?;
        let l_dc = self.loss_category_routed(tape, b, xs, ys, AdversarialRoute::Detach)?;
        let wd = tape.scale(l_d, lambda_d);
        let wc = tape.scale(l_dc, lambda_c);
        Ok(tape.add(wd, wc)?)
    }

    /// Class probabilities for target inputs paired with precomputed
    /// domain-specific features from source draws: `softmax(C([fd_source, F_s(xt)]))`.
    pub fn forward_predict_concat(
        &self,
        fd_source: &Tensor,
        xt: &Tensor,
    ) -> Result<Tensor, ModelError> {
        check_nonempty(xt)?;
        if fd_source.rows() != xt.rows() {
            return Err(ModelError::Autodiff(AutodiffError::BatchMismatch {
                left: fd_source.rows(),
                right: xt.rows(),
            }));
        }
        if fd_source.cols()? != self.widths.m_d {
            return Err(ModelError::WidthMismatch {
                expected: self.widths.m_d,
                got: fd_source.cols()?,
            });
        }
        let mut tape = Tape::new();
        let fd = tape.leaf(fd_source);
        let xv = tape.leaf(xt);
        let fs = self.f_s.forward_frozen(&mut tape, xv)?;
        let cat = tape.concat(fd, fs)?;
        let logits = self.classifier.forward_frozen(&mut tape, cat)?;
        let probs = tape.softmax(logits)?;
        Ok(tape.tensor(probs))
    }

    /// Class probabilities when the input's own domain-specific features are
    /// available (source-side evaluation).
    pub fn predict_probs_own(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        check_nonempty(x)?;
        let fd = self.f_d.apply(x)?;
        self.forward_predict_concat(&fd, x)
    }

    pub fn collect_grads(&mut self, tape: &Tape, b: &CifeBindings) {
        self.f_s.collect_grads(tape, &b.f_s);
        self.f_d.collect_grads(tape, &b.f_d);
        self.classifier.collect_grads(tape, &b.classifier);
        self.d_d.collect_grads(tape, &b.d_d);
        self.d_t.collect_grads(tape, &b.d_t);
    }

    /// Parameters updated in the extractor/classifier phase.
    pub fn task_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.f_s.params_mut();
        p.extend(self.f_d.params_mut());
        p.extend(self.classifier.params_mut());
        p
    }

    /// Parameters updated in the discriminator phase.
    pub fn disc_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.d_d.params_mut();
        p.extend(self.d_t.params_mut());
        p
    }

    pub fn all_params(&self) -> Vec<&Tensor> {
        let mut p = self.f_s.params();
        p.extend(self.f_d.params());
        p.extend(self.classifier.params());
        p.extend(self.d_d.params());
        p.extend(self.d_t.params());
        p
    }
}

impl DannModel {
    pub fn bind(&self, tape: &mut Tape) -> DannBindings {
        DannBindings {
            extractor: self.extractor.bind(tape),
            classifier: self.classifier.bind(tape),
            domain_disc: self.domain_disc.bind(tape),
        }
    }

    pub fn loss_classification(
        &self,
        tape: &mut Tape,
        b: &DannBindings,
        xs: Var,
        ys: &[usize],
    ) -> Result<Var, ModelError> {
        let f = self.extractor.forward(tape, &b.extractor, xs)?;
        let logits = self.classifier.forward(tape, &b.classifier, f)?;
        Ok(tape.softmax_cross_entropy(logits, ys)?)
    }

    pub fn loss_domain_routed(
        &self,
        tape: &mut Tape,
        b: &DannBindings,
        xs: Var,
        xt: Var,
        r: AdversarialRoute,
    ) -> Result<Var, ModelError> {
        if tape.shape(xs)[0] == 0 || tape.shape(xt)[0] == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let f_s = self.extractor.forward(tape, &b.extractor, xs)?;
        let f_t = self.extractor.forward(tape, &b.extractor, xt)?;
        let in_s = route(tape, f_s, r);
        let in_t = route(tape, f_t, r);
        let p_s = self.domain_disc.forward(tape, &b.domain_disc, in_s)?;
        let p_t = self.domain_disc.forward(tape, &b.domain_disc, in_t)?;
        Ok(domain_bce(tape, p_s, p_t)?)
    }

    pub fn total_objective(
        &self,
        tape: &mut Tape,
        b: &DannBindings,
        xs: Var,
        ys: &[usize],
        xt: Var,
        lambda_d: f64,
    ) -> Result<(Var, LossBundle), ModelError> {
        let l_c = self.loss_classification(tape, b, xs, ys)?;
        let l_d = self.loss_domain_routed(tape, b, xs, xt, AdversarialRoute::Reverse(1.0))?;
        let wd = tape.scale(l_d, lambda_d);
        let total = tape.add(l_c, wd)?;
        let bundle = LossBundle {
            l_c: tape.scalar(l_c),
            l_d: tape.scalar(l_d),
            l_dc: 0.0,
            total: tape.scalar(total),
            lambda_d,
            lambda_c: 0.0,
        };
        Ok((total, bundle))
    }

    pub fn discriminator_objective(
        &self,
        tape: &mut Tape,
        b: &DannBindings,
        xs: Var,
        xt: Var,
        lambda_d: f64,
    ) -> Result<Var, ModelError> {
        let l_d = self.loss_domain_routed(tape, b, xs, xt, AdversarialRoute::Detach)?;
        Ok(tape.scale(l_d, lambda_d))
    }

    pub fn predict_probs(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        check_nonempty(x)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let f = self.extractor.forward_frozen(&mut tape, xv)?;
        let logits = self.classifier.forward_frozen(&mut tape, f)?;
        let probs = tape.softmax(logits)?;
        Ok(tape.tensor(probs))
    }

    pub fn collect_grads(&mut self, tape: &Tape, b: &DannBindings) {
        self.extractor.collect_grads(tape, &b.extractor);
        self.classifier.collect_grads(tape, &b.classifier);
        self.domain_disc.collect_grads(tape, &b.domain_disc);
    }

    pub fn task_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.extractor.params_mut();
        p.extend(self.classifier.params_mut());
        p
    }

    pub fn disc_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.domain_disc.params_mut()
    }

    pub fn all_params(&self) -> Vec<&Tensor> {
        let mut p = self.extractor.params();
        p.extend(self.classifier.params());
        p.extend(self.domain_disc.params());
        p
    }
}

impl Model {
    pub fn widths(&self) -> &ModelWidths {
        match self {
            Model::Dann(m) => &m.widths,
            Model::Cife(m) => &m.widths,
        }
    }

    /// Domain-invariant features: `F_s(x)` or the baseline's `F(x)`.
    pub fn features_invariant(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        match self {
            Model::Dann(m) => Ok(m.extractor.apply(x)?),
            Model::Cife(m) => Ok(m.f_s.apply(x)?),
        }
    }

    /// Domain-specific features `F_d(x)`; absent for the baseline.
    pub fn features_specific(&self, x: &Tensor) -> Result<Option<Tensor>, ModelError> {
        match self {
            Model::Dann(_) => Ok(None),
            Model::Cife(m) => Ok(Some(m.f_d.apply(x)?)),
        }
    }

    /// Representation the classifier consumes: `[F_d(x), F_s(x)]` or `F(x)`.
    pub fn features_concat(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        match self {
            Model::Dann(m) => Ok(m.extractor.apply(x)?),
            Model::Cife(m) => {
                let fd = m.f_d.apply(x)?;
                let fs = m.f_s.apply(x)?;
                let mut tape = Tape::new();
                let a = tape.leaf(&fd);
                let b = tape.leaf(&fs);
                let cat = tape.concat(a, b)?;
                Ok(tape.tensor(cat))
            }
        }
    }

    /// Sum of all parameter values; cheap change detector for tests and the
    /// probe no-mutation contract.
    pub fn param_checksum(&self) -> f64 {
        let params = match self {
            Model::Dann(m) => m.all_params(),
            Model::Cife(m) => m.all_params(),
        };
        params
            .iter()
            .flat_map(|t| t.data())
            .fold(0.0f64, |acc, &v| acc + v)
    }

    /// Full parameter snapshot, used for exact-diff checks.
    pub fn param_vector(&self) -> Vec<f64> {
        let params = match self {
            Model::Dann(m) => m.all_params(),
            Model::Cife(m) => m.all_params(),
        };
        params.iter().flat_map(|t| t.data().to_vec()).collect()
    }
}

/// Argmax per row with ties broken by the lowest class index.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let k = probs.shape()[1];
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Row-wise softmax of a plain logits matrix.
pub fn softmax_matrix(logits: &Tensor) -> Tensor {
    let k = logits.shape()[1];
    Tensor::new(
        logits.shape().to_vec(),
        softmax_rows(logits.data(), k),
    )
    .expect("same shape")
}
