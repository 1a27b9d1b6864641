//! Dense-tensor arithmetic with reverse-mode automatic differentiation.
//!
//! The design is a classic tape: every operation appends a node holding its
//! forward value and enough information to replay the backward rule. A
//! [`Var`] is a cheap handle into the tape. Parameters live outside the tape
//! as plain [`Tensor`] values; a training iteration registers them as leaves,
//! builds the loss graph, calls [`Tape::backward`], and reads the leaf
//! gradients back out.
//!
//! Everything is 64-bit. Gradients accumulate by summation across consumers,
//! and replaying a tape with identical inputs is bitwise deterministic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Clamp bound applied to probabilities before they are fed to a logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: left {left:?} vs right {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("matmul inner dimensions disagree: {left:?} vs {right:?}")]
    InnerDimMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("domain error in {op}: operand value {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("batch dimension mismatch: {left} vs {right}")]
    BatchMismatch { left: usize, right: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("empty batch")]
    EmptyBatch,
    #[error("expected a matrix, got shape {shape:?}")]
    NotAMatrix { shape: Vec<usize> },
}

/// An n-dimensional row-major array of `f64` with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutodiffError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
        }
    }

    /// Build an `n x m` matrix from rows. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AutodiffError> {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            if r.len() != m {
                return Err(AutodiffError::ShapeMismatch {
                    left: vec![n, m],
                    right: vec![n, r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![n, m], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Sum `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        let buf = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (b, gi) in buf.iter_mut().zip(g) {
            *b += gi;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Number of rows when interpreted as a matrix (or vector length).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> Result<usize, AutodiffError> {
        match self.shape.len() {
            2 => Ok(self.shape[1]),
            _ => Err(AutodiffError::NotAMatrix {
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.shape[1];
        &self.data[i * m..(i + 1) * m]
    }

    /// Select rows by index into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let m = self.shape[1];
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len(), m],
            data,
            grad: None,
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Binary op where the right operand is a width-`m` vector broadcast
    /// over the rows of an `n x m` left operand.
    BroadcastAdd(Var, Var),
    Neg(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    MatMul(Var, Var),
    /// Column-wise concatenation; `split` is the column count of the left input.
    Concat(Var, Var, usize),
    GradReverse(Var, f64),
    Scale(Var, f64),
    Sum(Var),
    /// Row-wise softmax; forward value doubles as the cached probabilities.
    Softmax(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    BinaryCrossEntropy {
        p: Var,
        targets: Vec<u8>,
    },
    /// Row-wise flattened outer product of an `n x m` and an `n x k` input.
    OuterRows(Var, Var),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Recording tape for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node {
            shape,
            data,
            grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register a tensor as a leaf (input or parameter).
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf)
    }

    /// Register raw values as a leaf with the given shape.
    pub fn leaf_values(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, AutodiffError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutodiffError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(self.push(shape, data, Op::Leaf))
    }

    /// Detached copy: same forward values, no gradient flow to the source.
    pub fn detach(&mut self, x: Var) -> Var {
        let shape = self.nodes[x.0].shape.clone();
        let data = self.nodes[x.0].data.clone();
        self.push(shape, data, Op::Leaf)
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        &self.nodes[x.0].shape
    }

    pub fn data(&self, x: Var) -> &[f64] {
        &self.nodes[x.0].data
    }

    pub fn grad(&self, x: Var) -> &[f64] {
        &self.nodes[x.0].grad
    }

    pub fn scalar(&self, x: Var) -> f64 {
        debug_assert_eq!(self.nodes[x.0].data.len(), 1);
        self.nodes[x.0].data[0]
    }

    /// Snapshot a node's forward value as a detachable tensor.
    pub fn tensor(&self, x: Var) -> Tensor {
        Tensor {
            shape: self.nodes[x.0].shape.clone(),
            data: self.nodes[x.0].data.clone(),
            grad: None,
        }
    }

    fn binary_shapes(&self, a: Var, b: Var) -> Result<BinaryKind, AutodiffError> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa == sb {
            return Ok(BinaryKind::Same);
        }
        // Bias-vector-over-batch broadcasting only.
        if sa.len() == 2 && ((sb.len() == 1 && sb[0] == sa[1]) || (sb == &vec![1, sa[1]])) {
            return Ok(BinaryKind::Broadcast);
        }
        Err(AutodiffError::ShapeMismatch {
            left: sa.clone(),
            right: sb.clone(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        match self.binary_shapes(a, b)? {
            BinaryKind::Same => {
                let data: Vec<f64> = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .map(|(x, y)| x + y)
                    .collect();
                let shape = self.nodes[a.0].shape.clone();
                Ok(self.push(shape, data, Op::Add(a, b)))
            }
            BinaryKind::Broadcast => {
                let m = self.nodes[a.0].shape[1];
                let data: Vec<f64> = self.nodes[a.0]
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x + self.nodes[b.0].data[i % m])
                    .collect();
                let shape = self.nodes[a.0].shape.clone();
                Ok(self.push(shape, data, Op::BroadcastAdd(a, b)))
            }
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        match self.binary_shapes(a, b)? {
            BinaryKind::Same => {
                let data: Vec<f64> = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .map(|(x, y)| x - y)
                    .collect();
                let shape = self.nodes[a.0].shape.clone();
                Ok(self.push(shape, data, Op::Sub(a, b)))
            }
            BinaryKind::Broadcast => {
                let nb = self.neg(b);
                self.add(a, nb)
            }
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.binary_shapes(a, b)? != BinaryKind::Same {
            return Err(AutodiffError::ShapeMismatch {
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, Op::Mul(a, b)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| -x).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Neg(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.exp()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        if let Some(&bad) = self.nodes[a.0].data.iter().find(|x| **x <= 0.0) {
            return Err(AutodiffError::Domain {
                op: "log",
                value: bad,
            });
        }
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, Op::Log(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.tanh()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Tanh(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| c * x).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::InnerDimMismatch {
                left: sa,
                right: sb,
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; n * m];
        {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            for i in 0..n {
                for l in 0..k {
                    let av = da[i * k + l];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &db[l * m..(l + 1) * m];
                    let out = &mut data[i * m..(i + 1) * m];
                    for (o, bv) in out.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        Ok(self.push(vec![n, m], data, Op::MatMul(a, b)))
    }

    /// Concatenate two matrices with equal batch dimension along columns.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                left: sa,
                right: sb,
            });
        }
        if sa[0] != sb[0] {
            return Err(AutodiffError::BatchMismatch {
                left: sa[0],
                right: sb[0],
            });
        }
        let (n, p, q) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            data.extend_from_slice(&self.nodes[a.0].data[i * p..(i + 1) * p]);
            data.extend_from_slice(&self.nodes[b.0].data[i * q..(i + 1) * q]);
        }
        Ok(self.push(vec![n, p + q], data, Op::Concat(a, b, p)))
    }

    /// Identity forward; backward multiplies the upstream gradient by
    /// `-coefficient`.
    pub fn grad_reverse(&mut self, x: Var, coefficient: f64) -> Var {
        let data = self.nodes[x.0].data.clone();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, Op::GradReverse(x, coefficient))
    }

    /// Row-wise softmax with max-subtraction stabilization.
    pub fn softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 2 {
            return Err(AutodiffError::NotAMatrix { shape });
        }
        let data = softmax_rows(&self.nodes[a.0].data, shape[1]);
        Ok(self.push(shape, data, Op::Softmax(a)))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<Var, AutodiffError> {
        let shape = self.nodes[logits.0].shape.clone();
        if shape.len() != 2 {
            return Err(AutodiffError::NotAMatrix { shape });
        }
        let (n, k) = (shape[0], shape[1]);
        if n == 0 {
            return Err(AutodiffError::EmptyBatch);
        }
        if labels.len() != n {
            return Err(AutodiffError::BatchMismatch {
                left: n,
                right: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(AutodiffError::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let probs = softmax_rows(&self.nodes[logits.0].data, k);
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let p = probs[i * k + label].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            loss -= p.ln();
        }
        loss /= n as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean of `-(t log p + (1-t) log(1-p))` over a batch of probabilities.
    pub fn binary_cross_entropy(
        &mut self,
        p: Var,
        targets: &[u8],
    ) -> Result<Var, AutodiffError> {
        let n = self.nodes[p.0].data.len();
        if n == 0 {
            return Err(AutodiffError::EmptyBatch);
        }
        if targets.len() != n {
            return Err(AutodiffError::BatchMismatch {
                left: n,
                right: targets.len(),
            });
        }
        if let Some(&bad) = self.nodes[p.0].data.iter().find(|x| **x < 0.0 || **x > 1.0) {
            return Err(AutodiffError::Domain {
                op: "binary_cross_entropy",
                value: bad,
            });
        }
        let mut loss = 0.0;
        for (x, &t) in self.nodes[p.0].data.iter().zip(targets) {
            let pc = x.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            loss -= if t == 1 { pc.ln() } else { (1.0 - pc).ln() };
        }
        loss /= n as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::BinaryCrossEntropy {
                p,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Row-wise flattened outer product: row i of the result is
    /// `a_i (x) b_i` of length `m * k`.
    pub fn outer_rows(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                left: sa,
                right: sb,
            });
        }
        if sa[0] != sb[0] {
            return Err(AutodiffError::BatchMismatch {
                left: sa[0],
                right: sb[0],
            });
        }
        let (n, m, k) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(n * m * k);
        for i in 0..n {
            for j in 0..m {
                let av = self.nodes[a.0].data[i * m + j];
                for l in 0..k {
                    data.push(av * self.nodes[b.0].data[i * k + l]);
                }
            }
        }
        Ok(self.push(vec![n, m * k], data, Op::OuterRows(a, b)))
    }

    /// Populate gradients of every node reachable from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            // Split off the current node so its inputs can be written.
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        before[a.0].grad[j] += g;
                        before[b.0].grad[j] += g;
                    }
                }
                Op::Sub(a, b) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        before[a.0].grad[j] += g;
                        before[b.0].grad[j] -= g;
                    }
                }
                Op::Mul(a, b) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        let (av, bv) = (before[a.0].data[j], before[b.0].data[j]);
                        before[a.0].grad[j] += g * bv;
                        before[b.0].grad[j] += g * av;
                    }
                }
                Op::BroadcastAdd(a, b) => {
                    let m = node.shape[1];
                    for (j, &g) in node.grad.iter().enumerate() {
                        before[a.0].grad[j] += g;
                        before[b.0].grad[j % m] += g;
                    }
                }
                Op::Neg(a) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        before[a.0].grad[j] -= g;
                    }
                }
                Op::Relu(a) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        if before[a.0].data[j] > 0.0 {
                            before[a.0].grad[j] += g;
                        }
                    }
                }
                Op::Exp(a) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        before[a.0].grad[j] += g * node.data[j];
                    }
                }
                Op::Log(a) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        before[a.0].grad[j] += g / before[a.0].data[j];
                    }
                }
                Op::Sigmoid(a) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        let s = node.data[j];
                        before[a.0].grad[j] += g * s * (1.0 - s);
                    }
                }
                Op::Tanh(a) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        let t = node.data[j];
                        before[a.0].grad[j] += g * (1.0 - t * t);
                    }
                }
                Op::Scale(a, c) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        before[a.0].grad[j] += g * c;
                    }
                }
                Op::Sum(a) => {
                    let g = node.grad[0];
                    for ga in before[a.0].grad.iter_mut() {
                        *ga += g;
                    }
                }
                Op::GradReverse(a, c) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        before[a.0].grad[j] += -c * g;
                    }
                }
                Op::MatMul(a, b) => {
                    // dA = G B^T, dB = A^T G
                    let (n, m) = (node.shape[0], node.shape[1]);
                    let k = before[a.0].shape[1];
                    let (ai, bi) = (a.0, b.0);
                    for i in 0..n {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += node.grad[i * m + j] * before[bi].data[l * m + j];
                            }
                            before[ai].grad[i * k + l] += acc;
                        }
                    }
                    for l in 0..k {
                        for j in 0..m {
                            let mut acc = 0.0;
                            for i in 0..n {
                                acc += before[ai].data[i * k + l] * node.grad[i * m + j];
                            }
                            before[bi].grad[l * m + j] += acc;
                        }
                    }
                }
                Op::Concat(a, b, split) => {
                    let n = node.shape[0];
                    let total = node.shape[1];
                    let (p, q) = (*split, total - *split);
                    for i in 0..n {
                        for j in 0..p {
                            before[a.0].grad[i * p + j] += node.grad[i * total + j];
                        }
                        for j in 0..q {
                            before[b.0].grad[i * q + j] += node.grad[i * total + p + j];
                        }
                    }
                }
                Op::Softmax(a) => {
                    let (n, k) = (node.shape[0], node.shape[1]);
                    for i in 0..n {
                        let p = &node.data[i * k..(i + 1) * k];
                        let g = &node.grad[i * k..(i + 1) * k];
                        let dot: f64 = p.iter().zip(g).map(|(pi, gi)| pi * gi).sum();
                        for j in 0..k {
                            before[a.0].grad[i * k + j] += p[j] * (g[j] - dot);
                        }
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let g = node.grad[0];
                    let n = labels.len();
                    let k = before[logits.0].shape[1];
                    let scale = g / n as f64;
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let indicator = if j == label { 1.0 } else { 0.0 };
                            before[logits.0].grad[i * k + j] +=
                                scale * (probs[i * k + j] - indicator);
                        }
                    }
                }
                Op::BinaryCrossEntropy { p, targets } => {
                    let g = node.grad[0];
                    let n = targets.len();
                    let scale = g / n as f64;
                    for (j, &t) in targets.iter().enumerate() {
                        let pv = before[p.0].data[j].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                        let d = if t == 1 { -1.0 / pv } else { 1.0 / (1.0 - pv) };
                        before[p.0].grad[j] += scale * d;
                    }
                }
                Op::OuterRows(a, b) => {
                    let n = node.shape[0];
                    let m = before[a.0].shape[1];
                    let k = before[b.0].shape[1];
                    for i in 0..n {
                        for j in 0..m {
                            let mut acc_a = 0.0;
                            for l in 0..k {
                                let g = node.grad[i * m * k + j * k + l];
                                acc_a += g * before[b.0].data[i * k + l];
                                before[b.0].grad[i * k + l] += g * before[a.0].data[i * m + j];
                            }
                            before[a.0].grad[i * m + j] += acc_a;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(PartialEq)]
enum BinaryKind {
    Same,
    Broadcast,
}

/// Numerically stabilized row-wise softmax over a flat `n x k` buffer.
pub fn softmax_rows(data: &[f64], k: usize) -> Vec<f64> {
    let n = data.len() / k;
    let mut out = vec![0.0; data.len()];
    for i in 0..n {
        let row = &data[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..k {
            let e = (row[j] - max).exp();
            out[i * k + j] = e;
            sum += e;
        }
        for j in 0..k {
            out[i * k + j] /= sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![3], vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_forward() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![2], vec![1.0, 2.0]));
        let b = tape.leaf(&t(vec![2], vec![3.0, 4.0]));
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.data(y), &[4.0, 6.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1], vec![0.0]));
        let y = tape.sigmoid(x);
        assert_eq!(tape.data(y), &[0.5]);
    }

    #[test]
    fn add_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![2], vec![1.0, 2.0]));
        let b = tape.leaf(&t(vec![3], vec![1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                left: vec![2],
                right: vec![3]
            }
        );
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![1.0, 0.0]));
        assert!(matches!(
            tape.log(x),
            Err(AutodiffError::Domain { op: "log", .. })
        ));
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(&t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let a = tape.leaf(&t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.data(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_small() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![1, 2], vec![1.0, 2.0]));
        let b = tape.leaf(&t(vec![2, 1], vec![3.0, 4.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(y), &[11.0]);
    }

    #[test]
    fn matmul_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(&Tensor::zeros(vec![2, 3]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(AutodiffError::InnerDimMismatch { .. })
        ));
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(vec![2, 3]));
        let loss = tape.softmax_cross_entropy(logits, &[0, 2]).unwrap();
        assert!((tape.scalar(loss) - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_confident_correct() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(vec![1, 2], vec![10.0, -10.0]));
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!(tape.scalar(loss) < 1e-4);
    }

    #[test]
    fn softmax_ce_label_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(vec![1, 3]));
        assert_eq!(
            tape.softmax_cross_entropy(logits, &[3]).unwrap_err(),
            AutodiffError::LabelOutOfRange {
                label: 3,
                classes: 3
            }
        );
    }

    #[test]
    fn bce_maximal_uncertainty() {
        let mut tape = Tape::new();
        let p = tape.leaf(&t(vec![2], vec![0.5, 0.5]));
        let loss = tape.binary_cross_entropy(p, &[0, 1]).unwrap();
        assert!((tape.scalar(loss) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_confident_correct() {
        let mut tape = Tape::new();
        let p = tape.leaf(&t(vec![1], vec![1.0 - 1e-9]));
        let loss = tape.binary_cross_entropy(p, &[1]).unwrap();
        assert!(tape.scalar(loss) < 1e-8);
    }

    #[test]
    fn bce_rejects_out_of_range() {
        let mut tape = Tape::new();
        let p = tape.leaf(&t(vec![1], vec![1.5]));
        assert!(matches!(
            tape.binary_cross_entropy(p, &[1]),
            Err(AutodiffError::Domain { .. })
        ));
    }

    #[test]
    fn grad_reverse_forward_identity_backward_negation() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![1.5, -2.0]));
        let y = tape.grad_reverse(x, 1.0);
        assert_eq!(tape.data(y), &[1.5, -2.0]);

        // Upstream gradient [0.5, -1]: weight the sum accordingly.
        let w = tape.leaf(&t(vec![2], vec![0.5, -1.0]));
        let prod = tape.mul(y, w).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[-0.5, 1.0]);
    }

    #[test]
    fn grad_reverse_scales_by_coefficient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1], vec![3.0]));
        let y = tape.grad_reverse(x, 0.25);
        let s = tape.scale(y, 2.0);
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[-0.5]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![3]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_across_consumers() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![3]));
        let s1 = tape.sum(x);
        let s2 = tape.sum(x);
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![3]));
        assert!(matches!(
            tape.backward(x),
            Err(AutodiffError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn concat_forward_and_backward() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![1, 2], vec![1.0, 2.0]));
        let b = tape.leaf(&t(vec![1, 1], vec![3.0]));
        let y = tape.concat(a, b).unwrap();
        assert_eq!(tape.data(y), &[1.0, 2.0, 3.0]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a), &[1.0, 1.0]);
        assert_eq!(tape.grad(b), &[1.0]);
    }

    #[test]
    fn concat_batch_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 2]));
        let b = tape.leaf(&Tensor::zeros(vec![3, 1]));
        assert_eq!(
            tape.concat(a, b).unwrap_err(),
            AutodiffError::BatchMismatch { left: 2, right: 3 }
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2, 3], vec![1.0, -2.0, 0.5, 100.0, 100.0, -50.0]));
        let p = tape.softmax(x).unwrap();
        for i in 0..2 {
            let s: f64 = tape.data(p)[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn outer_rows_one_hot() {
        let mut tape = Tape::new();
        let f = tape.leaf(&t(vec![1, 2], vec![1.0, 2.0]));
        let p = tape.leaf(&t(vec![1, 2], vec![1.0, 0.0]));
        let y = tape.outer_rows(f, p).unwrap();
        assert_eq!(tape.data(y), &[1.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn bitwise_deterministic_replay() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(&t(vec![2, 2], vec![0.3, -1.7, 2.9, 0.01]));
            let w = tape.leaf(&t(vec![2, 2], vec![1.1, 0.2, -0.4, 0.9]));
            let h = tape.matmul(x, w).unwrap();
            let a = tape.tanh(h);
            let loss = tape.softmax_cross_entropy(a, &[0, 1]).unwrap();
            tape.backward(loss).unwrap();
            (tape.grad(x).to_vec(), tape.grad(w).to_vec())
        };
        assert_eq!(run(), run());
    }
}
