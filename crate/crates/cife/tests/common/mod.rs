//! Shared finite-difference gradient checking used by the gradient-check
//! suite and the acceptance gate.
//!
//! Every case builds a scalar loss from randomized leaf tensors, reads the
//! reverse-mode gradients, and compares them against central differences
//! with step [`FD_STEP`]. Relative error uses a floored denominator so
//! near-zero gradient pairs do not blow up the ratio.

use cife::autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub struct CaseResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

/// Values in `[-1.05, -0.05] U [0.05, 1.05]`, clear of the relu kink so
/// central differences never straddle it at the leaves.
fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            v + 0.05 * v.signum()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Strictly positive values in `[0.5, 2.0]` for log inputs.
fn rand_pos_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn eval_loss<F>(leaves: &[Tensor], f: &F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &vars);
    tape.scalar(loss)
}

fn eval_grads<F>(leaves: &[Tensor], f: &F) -> Vec<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    vars.iter().map(|&v| tape.grad(v).to_vec()).collect()
}

fn numeric_grads<F>(leaves: &mut [Tensor], f: &F) -> Vec<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut out = Vec::with_capacity(leaves.len());
    for i in 0..leaves.len() {
        let mut g = vec![0.0; leaves[i].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = leaves[i].data()[j];
            leaves[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval_loss(leaves, f);
            leaves[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval_loss(leaves, f);
            leaves[i].data_mut()[j] = orig;
            *gj = (plus - minus) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    out
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over every element of every leaf.
pub fn max_rel_err<F>(leaves: &mut [Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let analytic = eval_grads(leaves, &f);
    let numeric = numeric_grads(leaves, &f);
    analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

fn elementwise_cases(out: &mut Vec<CaseResult>) {
    for seed in 0..24u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut leaves = vec![
            rand_tensor(&[3, 4], &mut rng),
            rand_tensor(&[3, 4], &mut rng),
        ];
        let e = max_rel_err(&mut leaves, |t, v| {
            let r = t.relu(v[0]);
            let th = t.tanh(v[1]);
            let m = t.mul(r, th).unwrap();
            let s = t.sigmoid(m);
            let ex = t.exp(s);
            let d = t.sub(ex, v[1]).unwrap();
            let n = t.neg(d);
            let sc = t.scale(n, 0.7);
            let a = t.add(sc, v[0]).unwrap();
            t.sum(a)
        });
        out.push(CaseResult {
            name: format!("elementwise-{seed}"),
            max_rel_err: e,
            tol: 1e-6,
        });
    }
}

fn matmul_cases(out: &mut Vec<CaseResult>) {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let mut leaves = vec![
            rand_tensor(&[3, 4], &mut rng),
            rand_tensor(&[4, 2], &mut rng),
        ];
        let e = max_rel_err(&mut leaves, |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            let a = t.tanh(y);
            t.sum(a)
        });
        out.push(CaseResult {
            name: format!("matmul-{seed}"),
            max_rel_err: e,
            tol: 1e-6,
        });
    }
}

fn softmax_cases(out: &mut Vec<CaseResult>) {
    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let mut leaves = vec![
            rand_tensor(&[4, 5], &mut rng),
            rand_tensor(&[4, 5], &mut rng),
        ];
        let e = max_rel_err(&mut leaves, |t, v| {
            let p = t.softmax(v[0]).unwrap();
            let m = t.mul(p, v[1]).unwrap();
            t.sum(m)
        });
        out.push(CaseResult {
            name: format!("softmax-{seed}"),
            max_rel_err: e,
            tol: 1e-6,
        });
    }
}

fn log_cases(out: &mut Vec<CaseResult>) {
    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let mut leaves = vec![
            rand_pos_tensor(&[3, 3], &mut rng),
            rand_tensor(&[3, 3], &mut rng),
        ];
        let e = max_rel_err(&mut leaves, |t, v| {
            let l = t.log(v[0]).unwrap();
            let m = t.mul(l, v[1]).unwrap();
            t.sum(m)
        });
        out.push(CaseResult {
            name: format!("log-{seed}"),
            max_rel_err: e,
            tol: 1e-6,
        });
    }
}

fn softmax_ce_cases(out: &mut Vec<CaseResult>) {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let mut leaves = vec![rand_tensor(&[4, 5], &mut rng)];
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        let e = max_rel_err(&mut leaves, |t, v| {
            let scaled = t.scale(v[0], 2.0);
            t.softmax_cross_entropy(scaled, &labels).unwrap()
        });
        out.push(CaseResult {
            name: format!("softmax-ce-{seed}"),
            max_rel_err: e,
            tol: 1e-5,
        });
    }
}

fn bce_cases(out: &mut Vec<CaseResult>) {
    for seed in 0..16u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
        let mut leaves = vec![rand_tensor(&[6], &mut rng)];
        let targets: Vec<u8> = (0..6).map(|_| rng.random_range(0..2)).collect();
        let e = max_rel_err(&mut leaves, |t, v| {
            let p = t.sigmoid(v[0]);
            t.binary_cross_entropy(p, &targets).unwrap()
        });
        out.push(CaseResult {
            name: format!("bce-{seed}"),
            max_rel_err: e,
            tol: 1e-5,
        });
    }
}

fn concat_broadcast_cases(out: &mut Vec<CaseResult>) {
    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let mut leaves = vec![
            rand_tensor(&[3, 2], &mut rng),
            rand_tensor(&[3, 3], &mut rng),
            rand_tensor(&[5], &mut rng),
        ];
        let e = max_rel_err(&mut leaves, |t, v| {
            let c = t.concat(v[0], v[1]).unwrap();
            let h = t.add(c, v[2]).unwrap();
            let a = t.tanh(h);
            t.sum(a)
        });
        out.push(CaseResult {
            name: format!("concat-broadcast-{seed}"),
            max_rel_err: e,
            tol: 1e-6,
        });
    }
}

fn outer_rows_cases(out: &mut Vec<CaseResult>) {
    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(8000 + seed);
        let mut leaves = vec![
            rand_tensor(&[3, 2], &mut rng),
            rand_tensor(&[3, 3], &mut rng),
            rand_tensor(&[3, 6], &mut rng),
        ];
        let e = max_rel_err(&mut leaves, |t, v| {
            let o = t.outer_rows(v[0], v[1]).unwrap();
            let a = t.tanh(o);
            let m = t.mul(a, v[2]).unwrap();
            t.sum(m)
        });
        out.push(CaseResult {
            name: format!("outer-rows-{seed}"),
            max_rel_err: e,
            tol: 1e-6,
        });
    }
}

/// Two-layer MLP written out as raw ops: every parameter and the input are
/// checked at once.
fn mlp_cases(out: &mut Vec<CaseResult>) {
    for seed in 0..12u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
        let mut leaves = vec![
            rand_tensor(&[4, 5], &mut rng), // x
            rand_tensor(&[5, 8], &mut rng), // w1
            rand_tensor(&[8], &mut rng),    // b1
            rand_tensor(&[8, 3], &mut rng), // w2
            rand_tensor(&[3], &mut rng),    // b2
        ];
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let e = max_rel_err(&mut leaves, |t, v| {
            let z1 = t.matmul(v[0], v[1]).unwrap();
            let h1 = t.add(z1, v[2]).unwrap();
            let a1 = t.relu(h1);
            let z2 = t.matmul(a1, v[3]).unwrap();
            let logits = t.add(z2, v[4]).unwrap();
            t.softmax_cross_entropy(logits, &labels).unwrap()
        });
        out.push(CaseResult {
            name: format!("mlp-{seed}"),
            max_rel_err: e,
            tol: 1e-4,
        });
    }
}

/// Gradient reversal: the reverse-mode gradient through the reversal must
/// equal `-c` times the finite-difference derivative of the loss (forward is
/// the identity), while the non-reversed leaf matches plainly.
fn reversal_cases(out: &mut Vec<CaseResult>) {
    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
        let c = 0.25 + 0.2 * seed as f64;
        let mut leaves = vec![
            rand_tensor(&[3, 3], &mut rng),
            rand_tensor(&[3, 3], &mut rng),
        ];
        let f = |t: &mut Tape, v: &[Var]| {
            let g = t.grad_reverse(v[0], c);
            let a = t.tanh(g);
            let m = t.mul(a, v[1]).unwrap();
            t.sum(m)
        };
        let analytic = eval_grads(&leaves, &f);
        let numeric = numeric_grads(&mut leaves, &f);
        let mut worst = 0.0f64;
        for (a, n) in analytic[0].iter().zip(&numeric[0]) {
            worst = worst.max(rel_err(*a, -c * n));
        }
        for (a, n) in analytic[1].iter().zip(&numeric[1]) {
            worst = worst.max(rel_err(*a, *n));
        }
        out.push(CaseResult {
            name: format!("reversal-{seed}"),
            max_rel_err: worst,
            tol: 1e-5,
        });
    }
}

/// The full randomized case list; 132 checks covering every differentiable
/// op in the tape.
pub fn all_cases() -> Vec<CaseResult> {
    let mut out = Vec::new();
    elementwise_cases(&mut out);
    matmul_cases(&mut out);
    softmax_cases(&mut out);
    log_cases(&mut out);
    softmax_ce_cases(&mut out);
    bce_cases(&mut out);
    concat_broadcast_cases(&mut out);
    outer_rows_cases(&mut out);
    mlp_cases(&mut out);
    reversal_cases(&mut out);
    out
}
