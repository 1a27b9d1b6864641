//! Layers, parameter initialization, SGD with momentum, and the learning-rate
//! and adversarial-weight schedules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("schedule progress {p} outside [0, 1]")]
    ProgressOutOfRange { p: f64 },
    #[error("parameter {index} has no gradient")]
    MissingGradient { index: usize },
    #[error("velocity buffer shape mismatch for parameter {index}")]
    VelocityMismatch { index: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Fully connected layer; `weight` is `in x out`, `bias` is `out`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    /// Uniform Glorot-style init: weights in `[-sqrt(6/(in+out)), +sqrt(6/(in+out))]`,
    /// biases zero.
    pub fn new(in_width: usize, out_width: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (in_width + out_width) as f64).sqrt();
        let data: Vec<f64> = (0..in_width * out_width)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        LinearLayer {
            weight: Tensor::new(vec![in_width, out_width], data).expect("consistent dims"),
            bias: Tensor::zeros(vec![out_width]),
        }
    }

    pub fn in_width(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_width(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Output head applied after the last linear layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputHead {
    /// Raw outputs.
    Identity,
    /// Elementwise sigmoid (binary discriminator).
    Sigmoid,
    /// Raw logits intended for a softmax consumer (classifier, category
    /// discriminator). Forward-identical to `Identity`; kept distinct so
    /// checkpoints are self-describing.
    SoftmaxLogits,
    /// Elementwise tanh (feature extractors). Bounding the features keeps
    /// the reversed adversarial gradients from inflating feature norms.
    Tanh,
}

/// Multi-layer perceptron with relu between layers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
    pub head: OutputHead,
}

/// Tape handles for one registration of an [`Mlp`]'s parameters.
pub struct MlpVars {
    vars: Vec<(Var, Var)>,
}

impl Mlp {
    /// Build from a width chain, e.g. `[20, 64, 64, 32]`.
    pub fn new(widths: &[usize], head: OutputHead, rng: &mut ChaCha8Rng) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let layers = widths
            .windows(2)
            .map(|w| LinearLayer::new(w[0], w[1], rng))
            .collect();
        Mlp { layers, head }
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().unwrap().out_width()
    }

    /// Register all parameters as leaves on the tape.
    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        let vars = self
            .layers
            .iter()
            .map(|l| (tape.leaf(&l.weight), tape.leaf(&l.bias)))
            .collect();
        MlpVars { vars }
    }

    /// Forward through bound parameters so gradients reach the binding.
    pub fn forward(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var, AutodiffError> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in vars.vars.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add(z, b)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(match self.head {
            OutputHead::Identity | OutputHead::SoftmaxLogits => h,
            OutputHead::Sigmoid => tape.sigmoid(h),
            OutputHead::Tanh => tape.tanh(h),
        })
    }

    /// Forward without keeping parameter bindings (inference only).
    pub fn forward_frozen(&self, tape: &mut Tape, x: Var) -> Result<Var, AutodiffError> {
        let vars = self.bind(tape);
        self.forward(tape, &vars, x)
    }

    /// Evaluate on a plain matrix, returning the output values.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor, AutodiffError> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let out = self.forward_frozen(&mut tape, xv)?;
        Ok(tape.tensor(out))
    }

    /// Copy gradients from a binding into the parameters' grad buffers.
    pub fn collect_grads(&mut self, tape: &Tape, vars: &MlpVars) {
        for (layer, &(w, b)) in self.layers.iter_mut().zip(&vars.vars) {
            layer.weight.accumulate_grad(tape.grad(w));
            layer.bias.accumulate_grad(tape.grad(b));
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }
}

/// Hyperparameters of the annealing schedules: `eta_p = eta0 / (1 + theta p)^beta`
/// and the adversarial ramp `(1 - exp(-delta p)) / (1 + exp(-delta p))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub eta0: f64,
    pub theta: f64,
    pub beta: f64,
    pub delta: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            eta0: 0.01,
            theta: 10.0,
            beta: 0.75,
            delta: 10.0,
        }
    }
}

/// Annealed learning rate at training progress `p` in `[0, 1]`.
pub fn lr_schedule(p: f64, sp: &ScheduleParams) -> Result<f64, NnError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(NnError::ProgressOutOfRange { p });
    }
    Ok(sp.eta0 / (1.0 + sp.theta * p).powf(sp.beta))
}

/// Adversarial weight ramp from 0 to 1; equals `tanh(delta p / 2)`.
pub fn lambda_d_schedule(p: f64, sp: &ScheduleParams) -> Result<f64, NnError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(NnError::ProgressOutOfRange { p });
    }
    let e = (-sp.delta * p).exp();
    Ok((1.0 - e) / (1.0 + e))
}

/// Mini-batch SGD with momentum. One velocity buffer per parameter, matched
/// by position in the parameter list handed to [`SgdMomentum::step`].
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub lr: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> Self {
        SgdMomentum {
            momentum,
            lr: 0.0,
            velocity: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// `v <- momentum * v + g; param <- param - lr * v`; gradients cleared.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<(), NnError> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(NnError::VelocityMismatch {
                index: self.velocity.len().min(params.len()),
            });
        }
        for (index, param) in params.iter_mut().enumerate() {
            let v = &mut self.velocity[index];
            if v.len() != param.numel() {
                return Err(NnError::VelocityMismatch { index });
            }
            {
                let grad = param
                    .grad()
                    .ok_or(NnError::MissingGradient { index })?;
                for (vi, gi) in v.iter_mut().zip(grad) {
                    *vi = self.momentum * *vi + gi;
                }
            }
            let lr = self.lr;
            for (x, vi) in param.data_mut().iter_mut().zip(v.iter()) {
                *x -= lr * *vi;
            }
            param.clear_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_bounds_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = LinearLayer::new(1, 1, &mut rng);
        let bound = 3.0f64.sqrt();
        assert!(layer.weight.data()[0].abs() <= bound);
        assert_eq!(layer.bias.data(), &[0.0]);
    }

    #[test]
    fn init_deterministic_for_same_seed() {
        let a = LinearLayer::new(8, 8, &mut ChaCha8Rng::seed_from_u64(3));
        let b = LinearLayer::new(8, 8, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a.weight, b.weight);
    }

    #[test]
    fn init_sample_mean_near_zero() {
        // 10^4 draws from U(-b, b): the mean estimator has sd b/sqrt(3n).
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = LinearLayer::new(100, 100, &mut rng);
        let n = layer.weight.numel() as f64;
        let bound = (6.0 / 200.0f64).sqrt();
        let mean: f64 = layer.weight.data().iter().sum::<f64>() / n;
        let sigma = bound / (3.0 * n).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean} vs 3sigma {}", 3.0 * sigma);
    }

    #[test]
    fn lr_schedule_endpoints() {
        let sp = ScheduleParams::default();
        assert_eq!(lr_schedule(0.0, &sp).unwrap(), 0.01);
        let at_one = lr_schedule(1.0, &sp).unwrap();
        assert!((at_one - 0.01 / 11.0f64.powf(0.75)).abs() < 1e-15);
        let at_half = lr_schedule(0.5, &sp).unwrap();
        assert!((at_half - 0.01 / 6.0f64.powf(0.75)).abs() < 1e-15);
        assert!((at_half - 2.6084e-3).abs() < 1e-6);
    }

    #[test]
    fn lr_schedule_rejects_out_of_range() {
        let sp = ScheduleParams::default();
        assert!(lr_schedule(-0.1, &sp).is_err());
        assert!(lr_schedule(1.1, &sp).is_err());
    }

    #[test]
    fn lambda_d_schedule_endpoints_and_monotone() {
        let sp = ScheduleParams::default();
        assert_eq!(lambda_d_schedule(0.0, &sp).unwrap(), 0.0);
        let at_one = lambda_d_schedule(1.0, &sp).unwrap();
        assert!((at_one - 5.0f64.tanh()).abs() < 1e-15);
        assert!((at_one - 0.999909).abs() < 1e-6);
        let grid: Vec<f64> = (0..100)
            .map(|i| lambda_d_schedule(i as f64 / 99.0, &sp).unwrap())
            .collect();
        assert!(grid.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn lr_schedule_strictly_decreasing() {
        let sp = ScheduleParams::default();
        let grid: Vec<f64> = (0..100)
            .map(|i| lr_schedule(i as f64 / 99.0, &sp).unwrap())
            .collect();
        assert!(grid.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn sgd_vanilla_step() {
        let mut p = Tensor::scalar(1.0);
        p.accumulate_grad(&[2.0]);
        let mut opt = SgdMomentum::new(0.0);
        opt.set_lr(0.1);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        assert!(p.grad().is_none());
    }

    #[test]
    fn sgd_momentum_two_steps() {
        // v1 = 1, v2 = 1.9; with lr 1 the parameter goes 0 -> -1 -> -2.9.
        let mut p = Tensor::scalar(0.0);
        let mut opt = SgdMomentum::new(0.9);
        opt.set_lr(1.0);
        p.accumulate_grad(&[1.0]);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] + 1.0).abs() < 1e-15);
        p.accumulate_grad(&[1.0]);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn sgd_zero_gradient_drifts_by_velocity() {
        let mut p = Tensor::scalar(0.0);
        let mut opt = SgdMomentum::new(0.9);
        opt.set_lr(0.5);
        p.accumulate_grad(&[1.0]);
        opt.step(&mut [&mut p]).unwrap();
        let before = p.data()[0];
        p.accumulate_grad(&[0.0]);
        opt.step(&mut [&mut p]).unwrap();
        // param <- param - lr * momentum * v
        assert!((p.data()[0] - (before - 0.5 * 0.9 * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn sgd_missing_gradient_errors() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = SgdMomentum::new(0.9);
        opt.set_lr(0.1);
        assert!(matches!(
            opt.step(&mut [&mut p]),
            Err(NnError::MissingGradient { index: 0 })
        ));
    }

    #[test]
    fn sgd_step_decreases_convex_quadratic() {
        // loss = 0.5 x^2 at x = 1, grad = x.
        let mut p = Tensor::scalar(1.0);
        p.accumulate_grad(&[1.0]);
        let mut opt = SgdMomentum::new(0.0);
        opt.set_lr(0.01);
        opt.step(&mut [&mut p]).unwrap();
        let x = p.data()[0];
        assert!(0.5 * x * x < 0.5);
    }
}
