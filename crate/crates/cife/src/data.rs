//! Synthetic domain-shift tasks with constructible ground truth, batch
//! sampling, and a versioned binary dataset format.
//!
//! The factorized generator draws a latent vector split into a class part
//! (a prototype plus noise) and a nuisance part (a per-domain mean plus
//! noise), then mixes it into input space with a per-domain orthonormal map.
//! Because the generative factorization is explicit, a Bayes-optimal
//! classifier is available in latent space and serves as the accuracy
//! ceiling in tests.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("batch size {requested} exceeds smallest domain size {available}")]
    BatchTooLarge { requested: usize, available: usize },
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("dataset validation failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Labeled source examples, unlabeled target training examples, and a
/// held-out labeled target split used only for evaluation.
///
/// Target-train labels do not exist anywhere in this type; training code
/// cannot read what is not stored.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub num_classes: usize,
    pub input_dim: usize,
    pub source_x: Tensor,
    pub source_y: Vec<usize>,
    pub target_train_x: Tensor,
    pub target_test_x: Tensor,
    pub target_test_y: Vec<usize>,
}

impl DomainDataset {
    pub fn n_source(&self) -> usize {
        self.source_x.rows()
    }

    pub fn n_target_train(&self) -> usize {
        self.target_train_x.rows()
    }

    fn validate(&self) -> Result<(), DataError> {
        for &y in self.source_y.iter().chain(&self.target_test_y) {
            if y >= self.num_classes {
                return Err(DataError::Validation(format!(
                    "label {y} out of range for {} classes",
                    self.num_classes
                )));
            }
        }
        if self.source_x.rows() != self.source_y.len() {
            return Err(DataError::Validation(
                "source feature/label count mismatch".into(),
            ));
        }
        if self.target_test_x.rows() != self.target_test_y.len() {
            return Err(DataError::Validation(
                "target test feature/label count mismatch".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

/// Generative description of a factorized domain-shift task.
#[derive(Clone, Debug)]
pub struct FactorizedTaskSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub class_dim: usize,
    pub nuisance_dim: usize,
    /// K prototype vectors of length `class_dim`.
    pub prototypes: Vec<Vec<f64>>,
    /// Orthonormal-column mixing maps, `input_dim x (class_dim + nuisance_dim)`.
    pub map_source: Tensor,
    pub map_target: Tensor,
    pub nuisance_mean_source: Vec<f64>,
    pub nuisance_mean_target: Vec<f64>,
    pub noise: f64,
    pub n_source: usize,
    pub n_target: usize,
    pub n_target_test: usize,
    pub seed: u64,
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

/// Orthonormalize the columns of a `d x p` matrix by modified Gram-Schmidt.
fn orthonormalize_columns(m: &[Vec<f64>], d: usize, p: usize) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = (0..p).map(|j| (0..d).map(|i| m[i][j]).collect()).collect();
    for j in 0..p {
        for k in 0..j {
            let dot: f64 = cols[j].iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
            let prev = cols[k].clone();
            for (cj, pk) in cols[j].iter_mut().zip(&prev) {
                *cj -= dot * pk;
            }
        }
        let norm: f64 = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in cols[j].iter_mut() {
            *v /= norm;
        }
    }
    (0..d)
        .map(|i| (0..p).map(|j| cols[j][i]).collect())
        .collect()
}

impl FactorizedTaskSpec {
    /// Build a spec with seeded prototypes, mixing maps, and nuisance means.
    ///
    /// `map_shift` controls how far the target mixing map is perturbed from
    /// the source map before re-orthonormalization; `nuisance_shift` is the
    /// norm of the target nuisance mean offset.
    #[allow(clippy::too_many_arguments)]
    pub fn seeded(
        num_classes: usize,
        input_dim: usize,
        class_dim: usize,
        nuisance_dim: usize,
        noise: f64,
        n_source: usize,
        n_target: usize,
        n_target_test: usize,
        map_shift: f64,
        nuisance_shift: f64,
        seed: u64,
    ) -> Result<Self, DataError> {
        let p = class_dim + nuisance_dim;
        if input_dim < p {
            return Err(DataError::InvalidSpec(format!(
                "input_dim {input_dim} smaller than latent dim {p}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Prototypes: unit Gaussian directions scaled to a fixed norm so the
        // class geometry is comparable across seeds.
        let proto_norm = 2.0;
        let prototypes: Vec<Vec<f64>> = (0..num_classes)
            .map(|_| {
                let v: Vec<f64> = (0..class_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| proto_norm * x / norm).collect()
            })
            .collect();
        let g_s = gaussian_matrix(input_dim, p, &mut rng);
        let a_s = orthonormalize_columns(&g_s, input_dim, p);
        let g_t: Vec<Vec<f64>> = {
            let noise_m = gaussian_matrix(input_dim, p, &mut rng);
            a_s.iter()
                .zip(&noise_m)
                .map(|(ar, nr)| ar.iter().zip(nr).map(|(a, n)| a + map_shift * n).collect())
                .collect()
        };
        let a_t = orthonormalize_columns(&g_t, input_dim, p);
        let nuisance_mean_source = vec![0.0; nuisance_dim];
        let nuisance_mean_target: Vec<f64> = {
            let v: Vec<f64> = (0..nuisance_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| nuisance_shift * x / norm).collect()
        };
        let spec = FactorizedTaskSpec {
            num_classes,
            input_dim,
            class_dim,
            nuisance_dim,
            prototypes,
            map_source: Tensor::from_rows(&a_s).expect("rectangular"),
            map_target: Tensor::from_rows(&a_t).expect("rectangular"),
            nuisance_mean_source,
            nuisance_mean_target,
            noise,
            n_source,
            n_target,
            n_target_test,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The default acceptance task: K=4, d=20, four class and four nuisance
    /// latent dimensions, noise 0.25, 2000 samples per domain.
    pub fn default_task(seed: u64) -> Self {
        FactorizedTaskSpec::seeded(4, 20, 4, 4, 0.25, 2000, 2000, 2000, 0.3, 1.0, seed)
            .expect("default task spec is valid")
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_classes < 2 {
            return Err(DataError::InvalidSpec(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.noise < 0.0 {
            return Err(DataError::InvalidSpec(format!(
                "negative noise scale {}",
                self.noise
            )));
        }
        if self.prototypes.len() != self.num_classes {
            return Err(DataError::InvalidSpec(
                "prototype count does not match class count".into(),
            ));
        }
        for (i, a) in self.prototypes.iter().enumerate() {
            if a.len() != self.class_dim {
                return Err(DataError::InvalidSpec(format!(
                    "prototype {i} has dim {} != class_dim {}",
                    a.len(),
                    self.class_dim
                )));
            }
            for (j, b) in self.prototypes.iter().enumerate().skip(i + 1) {
                let dist: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                if dist == 0.0 {
                    return Err(DataError::InvalidSpec(format!(
                        "prototypes {i} and {j} coincide"
                    )));
                }
            }
        }
        for (name, map) in [("source", &self.map_source), ("target", &self.map_target)] {
            let p = self.class_dim + self.nuisance_dim;
            if map.shape() != [self.input_dim, p] {
                return Err(DataError::InvalidSpec(format!(
                    "{name} map shape {:?} != [{}, {p}]",
                    map.shape(),
                    self.input_dim
                )));
            }
            for j in 0..p {
                for k in j..p {
                    let dot: f64 = (0..self.input_dim)
                        .map(|i| map.data()[i * p + j] * map.data()[i * p + k])
                        .sum();
                    let expected = if j == k { 1.0 } else { 0.0 };
                    if (dot - expected).abs() > 1e-8 {
                        return Err(DataError::InvalidSpec(format!(
                            "{name} map columns {j},{k} not orthonormal (dot {dot})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn map(&self, domain: Domain) -> &Tensor {
        match domain {
            Domain::Source => &self.map_source,
            Domain::Target => &self.map_target,
        }
    }

    fn nuisance_mean(&self, domain: Domain) -> &[f64] {
        match domain {
            Domain::Source => &self.nuisance_mean_source,
            Domain::Target => &self.nuisance_mean_target,
        }
    }

    /// Draw one example: latent `[prototype_c + noise ; mean + noise]`
    /// mixed into input space.
    fn sample(&self, domain: Domain, rng: &mut ChaCha8Rng) -> (Vec<f64>, usize) {
        let class = rng.random_range(0..self.num_classes);
        let p = self.class_dim + self.nuisance_dim;
        let mut z = Vec::with_capacity(p);
        for &proto in &self.prototypes[class] {
            let eps: f64 = StandardNormal.sample(rng);
            z.push(proto + self.noise * eps);
        }
        for &mu in self.nuisance_mean(domain) {
            let eps: f64 = StandardNormal.sample(rng);
            z.push(mu + self.noise * eps);
        }
        let map = self.map(domain);
        let x = (0..self.input_dim)
            .map(|i| (0..p).map(|j| map.data()[i * p + j] * z[j]).sum())
            .collect();
        (x, class)
    }

    /// Bayes classifier: recover the latent class part with the domain's
    /// transposed map and pick the nearest prototype.
    pub fn oracle_classify(&self, domain: Domain, x: &[f64]) -> usize {
        let map = self.map(domain);
        let p = self.class_dim + self.nuisance_dim;
        let z_class: Vec<f64> = (0..self.class_dim)
            .map(|j| (0..self.input_dim).map(|i| map.data()[i * p + j] * x[i]).sum())
            .collect();
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (c, proto) in self.prototypes.iter().enumerate() {
            let dist: f64 = proto
                .iter()
                .zip(&z_class)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if dist < best_dist {
                best_dist = dist;
                best = c;
            }
        }
        best
    }

    /// Monte-Carlo estimate of the latent-oracle accuracy on fresh samples.
    pub fn oracle_accuracy(&self, domain: Domain, n: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut correct = 0usize;
        for _ in 0..n {
            let (x, y) = self.sample(domain, &mut rng);
            if self.oracle_classify(domain, &x) == y {
                correct += 1;
            }
        }
        correct as f64 / n as f64
    }
}

/// Generate a [`DomainDataset`] from a factorized spec.
pub fn gen_factorized(spec: &FactorizedTaskSpec) -> Result<DomainDataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw = |domain: Domain, n: usize, rng: &mut ChaCha8Rng| {
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let (x, y) = spec.sample(domain, rng);
            xs.push(x);
            ys.push(y);
        }
        (Tensor::from_rows(&xs).expect("rectangular"), ys)
    };
    let (source_x, source_y) = draw(Domain::Source, spec.n_source, &mut rng);
    let (target_train_x, _hidden) = draw(Domain::Target, spec.n_target, &mut rng);
    let (target_test_x, target_test_y) = draw(Domain::Target, spec.n_target_test, &mut rng);
    let ds = DomainDataset {
        num_classes: spec.num_classes,
        input_dim: spec.input_dim,
        source_x,
        source_y,
        target_train_x,
        target_test_x,
        target_test_y,
    };
    ds.validate()?;
    Ok(ds)
}

/// Two interleaving half-circles; the target domain is the source rotated
/// about the dataset center.
#[derive(Clone, Copy, Debug)]
pub struct MoonsShiftSpec {
    pub angle_deg: f64,
    pub noise: f64,
    pub n_source: usize,
    pub n_target: usize,
    pub n_target_test: usize,
    pub seed: u64,
}

impl MoonsShiftSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(0.0..=90.0).contains(&self.angle_deg) {
            return Err(DataError::InvalidSpec(format!(
                "rotation angle {} outside [0, 90]",
                self.angle_deg
            )));
        }
        if self.noise < 0.0 {
            return Err(DataError::InvalidSpec(format!(
                "negative noise scale {}",
                self.noise
            )));
        }
        Ok(())
    }
}

const MOONS_CENTER: (f64, f64) = (0.5, 0.25);

fn moons_points(
    n: usize,
    noise: f64,
    angle_rad: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    let per_class = n.div_ceil(2);
    for i in 0..n {
        // Alternate classes so counts stay within one of n/2.
        let class = i % 2;
        let t = std::f64::consts::PI * ((i / 2) as f64 + 0.5) / per_class as f64;
        let (mut px, mut py) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let nx: f64 = StandardNormal.sample(rng);
        let ny: f64 = StandardNormal.sample(rng);
        px += noise * nx;
        py += noise * ny;
        let (cx, cy) = MOONS_CENTER;
        let (dx, dy) = (px - cx, py - cy);
        let (sin, cos) = angle_rad.sin_cos();
        xs.push(vec![cx + cos * dx - sin * dy, cy + sin * dx + cos * dy]);
        ys.push(class);
    }
    (xs, ys)
}

pub fn gen_moons_shift(spec: &MoonsShiftSpec) -> Result<DomainDataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let angle = spec.angle_deg.to_radians();
    let (sx, sy) = moons_points(spec.n_source, spec.noise, 0.0, &mut rng);
    // Same generation path for the target: angle 0 with the same seed stream
    // would reproduce the source points exactly.
    let mut target_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (tx, _ty) = moons_points(spec.n_target, spec.noise, angle, &mut target_rng);
    let (ex, ey) = moons_points(spec.n_target_test, spec.noise, angle, &mut rng);
    let ds = DomainDataset {
        num_classes: 2,
        input_dim: 2,
        source_x: Tensor::from_rows(&sx).expect("rectangular"),
        source_y: sy,
        target_train_x: Tensor::from_rows(&tx).expect("rectangular"),
        target_test_x: Tensor::from_rows(&ex).expect("rectangular"),
        target_test_y: ey,
    };
    ds.validate()?;
    Ok(ds)
}

/// One training batch: labeled source rows and unlabeled target rows.
#[derive(Clone, Debug)]
pub struct Batch {
    pub source_x: Tensor,
    pub source_y: Vec<usize>,
    pub target_x: Tensor,
}

/// Per-epoch batch plan: the shuffled source set is partitioned into
/// batches of `batch_size` (last batch may be short); target rows are drawn
/// without replacement from their own shuffled permutation, reshuffled when
/// exhausted. Deterministic in `(seed, epoch)`.
pub fn batch_iter(
    ds: &DomainDataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>, DataError> {
    let n_s = ds.n_source();
    let n_t = ds.n_target_train();
    let smallest = n_s.min(n_t);
    if batch_size == 0 || batch_size > smallest {
        return Err(DataError::BatchTooLarge {
            requested: batch_size,
            available: smallest,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));

    let mut src_idx: Vec<usize> = (0..n_s).collect();
    src_idx.shuffle(&mut rng);
    let mut tgt_pool: Vec<usize> = (0..n_t).collect();
    tgt_pool.shuffle(&mut rng);
    let mut tgt_pos = 0usize;

    let mut batches = Vec::with_capacity(n_s.div_ceil(batch_size));
    for chunk in src_idx.chunks(batch_size) {
        let mut tgt_take = Vec::with_capacity(chunk.len());
        for _ in 0..chunk.len() {
            if tgt_pos == tgt_pool.len() {
                tgt_pool.shuffle(&mut rng);
                tgt_pos = 0;
            }
            tgt_take.push(tgt_pool[tgt_pos]);
            tgt_pos += 1;
        }
        batches.push(Batch {
            source_x: ds.source_x.select_rows(chunk),
            source_y: chunk.iter().map(|&i| ds.source_y[i]).collect(),
            target_x: ds.target_train_x.select_rows(&tgt_take),
        });
    }
    Ok(batches)
}

// Binary dataset layout, version 1, all integers little-endian:
//   magic "CIFEDS\0\0" (8 bytes)
//   u32 version
//   u32 num_classes, u32 input_dim
//   u64 n_source, u64 n_target_train, u64 n_target_test
//   f64[n_source * d] source features
//   u16[n_source]     source labels
//   f64[n_target_train * d] target training features (no labels stored)
//   f64[n_target_test * d]  evaluation features
//   u16[n_target_test]      evaluation labels
const MAGIC: &[u8; 8] = b"CIFEDS\0\0";
const FORMAT_VERSION: u32 = 1;

pub fn save_dataset(ds: &DomainDataset, path: &Path) -> Result<(), DataError> {
    ds.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.num_classes as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.input_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.n_source() as u64).to_le_bytes());
    buf.extend_from_slice(&(ds.n_target_train() as u64).to_le_bytes());
    buf.extend_from_slice(&(ds.target_test_x.rows() as u64).to_le_bytes());
    for v in ds.source_x.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &ds.source_y {
        buf.extend_from_slice(&(y as u16).to_le_bytes());
    }
    for v in ds.target_train_x.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in ds.target_test_x.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &ds.target_test_y {
        buf.extend_from_slice(&(y as u16).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        if self.offset + n > self.bytes.len() {
            return Err(DataError::Parse {
                offset: self.offset,
                message: format!(
                    "truncated file: need {n} bytes for {what}, {} remain",
                    self.bytes.len() - self.offset
                ),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64_matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Tensor, DataError> {
        let raw = self.take(rows * cols * 8, what)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(vec![rows, cols], data).expect("sized above"))
    }

    fn labels(&mut self, n: usize, classes: usize, what: &str) -> Result<Vec<usize>, DataError> {
        let start = self.offset;
        let raw = self.take(n * 2, what)?;
        let labels: Vec<usize> = raw
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        if let Some(pos) = labels.iter().position(|&y| y >= classes) {
            return Err(DataError::Parse {
                offset: start + pos * 2,
                message: format!(
                    "label {} out of range for {classes} classes in {what}",
                    labels[pos]
                ),
            });
        }
        Ok(labels)
    }
}

pub fn load_dataset(path: &Path) -> Result<DomainDataset, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        offset: 0,
    };
    let magic = cur.take(8, "magic")?;
    if magic != MAGIC {
        return Err(DataError::Parse {
            offset: 0,
            message: format!("bad magic {magic:?}"),
        });
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(DataError::Parse {
            offset: 8,
            message: format!("unsupported format version {version}"),
        });
    }
    let num_classes = cur.u32("num_classes")? as usize;
    let input_dim = cur.u32("input_dim")? as usize;
    let n_s = cur.u64("n_source")? as usize;
    let n_tt = cur.u64("n_target_train")? as usize;
    let n_te = cur.u64("n_target_test")? as usize;
    let source_x = cur.f64_matrix(n_s, input_dim, "source features")?;
    let source_y = cur.labels(n_s, num_classes, "source labels")?;
    let target_train_x = cur.f64_matrix(n_tt, input_dim, "target training features")?;
    let target_test_x = cur.f64_matrix(n_te, input_dim, "evaluation features")?;
    let target_test_y = cur.labels(n_te, num_classes, "evaluation labels")?;
    if cur.offset != bytes.len() {
        return Err(DataError::Parse {
            offset: cur.offset,
            message: format!("{} trailing bytes", bytes.len() - cur.offset),
        });
    }
    let ds = DomainDataset {
        num_classes,
        input_dim,
        source_x,
        source_y,
        target_train_x,
        target_test_x,
        target_test_y,
    };
    ds.validate()
        .map_err(|e| DataError::Parse {
            offset: 0,
            message: e.to_string(),
        })?;
    Ok(ds)
}
