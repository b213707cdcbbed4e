//! Seeded task distributions: explicit quadratics with controlled condition
//! number, sinusoid regression, and synthetic N-way K-shot Gaussian-cluster
//! classification.
//!
//! Generators are pure functions of (config, seed); the same inputs always
//! reproduce the same task payloads bit for bit.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Batch;
use crate::error::{Error, Result};

/// Explicit quadratic loss payload: 0.5 phi'A phi + b'phi with A symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadPayload {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl QuadPayload {
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn value(&self, phi: &DVector<f64>) -> f64 {
        0.5 * phi.dot(&(&self.a * phi)) + self.b.dot(phi)
    }

    pub fn gradient(&self, phi: &DVector<f64>) -> DVector<f64> {
        &self.a * phi + &self.b
    }
}

/// One sampled learning task: disjoint train/test splits, plus explicit
/// quadratic payloads when the task family is the quadratic one (the train
/// payload defines the adaptation loss, the test payload the outer loss).
#[derive(Debug, Clone)]
pub struct Task {
    pub id: u64,
    pub train: Batch,
    pub test: Batch,
    pub quad_train: Option<QuadPayload>,
    pub quad_test: Option<QuadPayload>,
}

impl Task {
    pub fn is_quadratic(&self) -> bool {
        self.quad_train.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DistKind {
    Quadratic {
        dim: usize,
        kappa: f64,
        /// Number of distinct eigenvalue levels on the log-uniform grid
        /// spanning [1, kappa]. `None` draws a continuous log-uniform
        /// spectrum (endpoints pinned so the condition number is exact).
        #[serde(default)]
        spectrum_levels: Option<usize>,
    },
    Sinusoid {
        shots: usize,
    },
    GaussianClasses {
        dim: usize,
        ways: usize,
        shots: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDistribution {
    #[serde(flatten)]
    pub kind: DistKind,
    #[serde(default)]
    pub base_seed: u64,
}

impl TaskDistribution {
    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            DistKind::Quadratic { dim, kappa, .. } => {
                if *dim < 1 {
                    return Err(Error::Config("quadratic dim must be >= 1".into()));
                }
                if *kappa < 1.0 {
                    return Err(Error::Config(format!(
                        "condition number must be >= 1, got {kappa}"
                    )));
                }
            }
            DistKind::Sinusoid { shots } => {
                if *shots < 1 {
                    return Err(Error::Config("shots must be >= 1".into()));
                }
            }
            DistKind::GaussianClasses { dim, ways, shots } => {
                if *ways < 2 {
                    return Err(Error::Config("ways must be >= 2".into()));
                }
                if *shots < 1 || *dim < 1 {
                    return Err(Error::Config("shots and dim must be >= 1".into()));
                }
            }
        }
        Ok(())
    }
}

/// splitmix64; used to derive independent per-task seeds.
fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn gaussian_vector(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Seeded random orthogonal matrix from the QR factorization of a Gaussian
/// matrix, with the sign convention fixed so the result is deterministic.
fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

fn quad_spectrum(rng: &mut ChaCha8Rng, d: usize, kappa: f64, levels: Option<usize>) -> Vec<f64> {
    if kappa == 1.0 {
        return vec![1.0; d];
    }
    match levels {
        Some(levels) => {
            if d < 2 {
                return vec![1.0; d];
            }
            let l = levels.clamp(2, d);
            let lv: Vec<f64> = (0..l)
                .map(|k| (kappa.ln() * k as f64 / (l - 1) as f64).exp())
                .collect();
            (0..d).map(|i| lv[i % l]).collect()
        }
        None => {
            let mut eigs: Vec<f64> = (0..d)
                .map(|_| (rng.gen::<f64>() * kappa.ln()).exp())
                .collect();
            // Pin the extremes so the condition number is exactly kappa.
            eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            eigs[0] = 1.0;
            eigs[d - 1] = kappa;
            eigs
        }
    }
}

fn make_quad_payload(
    rng: &mut ChaCha8Rng,
    d: usize,
    kappa: f64,
    levels: Option<usize>,
) -> QuadPayload {
    if kappa == 1.0 {
        return QuadPayload {
            a: DMatrix::identity(d, d),
            b: gaussian_vector(rng, d),
        };
    }
    let q = random_orthogonal(rng, d);
    let eigs = quad_spectrum(rng, d, kappa, levels);
    let lam = DMatrix::from_diagonal(&DVector::from_vec(eigs));
    let a = &q * lam * q.transpose();
    let a = (&a + a.transpose()) * 0.5;
    QuadPayload {
        a,
        b: gaussian_vector(rng, d),
    }
}

/// Quadratic task: A = Q diag(eigs) Q' with a seeded random orthogonal Q and
/// eigenvalues spanning [1, kappa] (log-uniform); b is seeded Gaussian. The
/// test-side payload is drawn from the same family.
pub fn make_quadratic_task(
    d: usize,
    kappa: f64,
    spectrum_levels: Option<usize>,
    seed: u64,
) -> Result<Task> {
    if d < 1 {
        return Err(Error::Config("dimension must be >= 1".into()));
    }
    if kappa < 1.0 {
        return Err(Error::Config(format!(
            "condition number must be >= 1, got {kappa}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let quad_train = make_quad_payload(&mut rng, d, kappa, spectrum_levels);
    let quad_test = make_quad_payload(&mut rng, d, kappa, spectrum_levels);
    Ok(Task {
        id: seed,
        train: Batch::empty(),
        test: Batch::empty(),
        quad_train: Some(quad_train),
        quad_test: Some(quad_test),
    })
}

/// Sinusoid regression task y = a sin(x + b), a in [0.1, 5.0], b in [0, pi],
/// x in [-5, 5]; `shots` train pairs and `shots` disjoint test pairs.
pub fn make_sinusoid_task(shots: usize, seed: u64) -> Result<Task> {
    if shots < 1 {
        return Err(Error::Config("shots must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amplitude = 0.1 + rng.gen::<f64>() * 4.9;
    let phase = rng.gen::<f64>() * std::f64::consts::PI;
    let draw_split = |rng: &mut ChaCha8Rng| {
        let xs: Vec<f64> = (0..shots).map(|_| rng.gen::<f64>() * 10.0 - 5.0).collect();
        let x = DMatrix::from_fn(shots, 1, |r, _| xs[r]);
        let y = DMatrix::from_fn(shots, 1, |r, _| amplitude * (xs[r] + phase).sin());
        Batch::regression(x, y)
    };
    let train = draw_split(&mut rng);
    let test = draw_split(&mut rng);
    Ok(Task {
        id: seed,
        train,
        test,
        quad_train: None,
        quad_test: None,
    })
}

/// N-way K-shot classification toy: class means on a seeded sphere of
/// radius 3, unit covariance around each mean.
pub fn make_gaussian_class_task(dim: usize, ways: usize, shots: usize, seed: u64) -> Result<Task> {
    if ways < 2 || shots < 1 || dim < 1 {
        return Err(Error::Config(
            "gaussian-classes requires ways >= 2, shots >= 1, dim >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<DVector<f64>> = (0..ways)
        .map(|_| {
            let v = gaussian_vector(&mut rng, dim);
            let n = v.norm();
            v * (3.0 / n.max(1e-12))
        })
        .collect();
    let draw_split = |rng: &mut ChaCha8Rng| {
        let n = ways * shots;
        let mut x = DMatrix::zeros(n, dim);
        let mut labels = Vec::with_capacity(n);
        for class in 0..ways {
            for s in 0..shots {
                let row = class * shots + s;
                let sample = &means[class] + gaussian_vector(rng, dim);
                for c in 0..dim {
                    x[(row, c)] = sample[c];
                }
                labels.push(class);
            }
        }
        Batch::classification(x, labels)
    };
    let train = draw_split(&mut rng);
    let test = draw_split(&mut rng);
    Ok(Task {
        id: seed,
        train,
        test,
        quad_train: None,
        quad_test: None,
    })
}

/// Deterministic batch of independent tasks: task `i` is generated from the
/// seed `mix(base_seed ^ seed, i)`.
pub fn sample_tasks(dist: &TaskDistribution, count: usize, seed: u64) -> Result<Vec<Task>> {
    if count < 1 {
        return Err(Error::Config("task count must be >= 1".into()));
    }
    dist.validate()?;
    (0..count as u64)
        .map(|i| {
            let task_seed = mix_seed(dist.base_seed ^ seed, i);
            match &dist.kind {
                DistKind::Quadratic {
                    dim,
                    kappa,
                    spectrum_levels,
                } => make_quadratic_task(*dim, *kappa, *spectrum_levels, task_seed),
                DistKind::Sinusoid { shots } => make_sinusoid_task(*shots, task_seed),
                DistKind::GaussianClasses { dim, ways, shots } => {
                    make_gaussian_class_task(*dim, *ways, *shots, task_seed)
                }
            }
        })
        .collect()
}

// --- JSON form for reproducibility audits -------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct BatchJson {
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuadJson {
    dim: usize,
    /// Row-major entries of the symmetric matrix A.
    a: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TaskJson {
    id: u64,
    train: BatchJson,
    test: BatchJson,
    #[serde(skip_serializing_if = "Option::is_none")]
    quad_train: Option<QuadJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    quad_test: Option<QuadJson>,
}

fn batch_to_json(b: &Batch) -> BatchJson {
    BatchJson {
        x: (0..b.x.nrows())
            .map(|r| b.x.row(r).iter().copied().collect())
            .collect(),
        y: (0..b.y.nrows())
            .map(|r| b.y.row(r).iter().copied().collect())
            .collect(),
        labels: b.labels.clone(),
    }
}

fn batch_from_json(j: &BatchJson) -> Batch {
    let rows = j.x.len();
    let cols = j.x.first().map_or(0, |r| r.len());
    let x = DMatrix::from_fn(rows, cols, |r, c| j.x[r][c]);
    let ycols = j.y.first().map_or(0, |r| r.len());
    let y = DMatrix::from_fn(j.y.len(), ycols, |r, c| j.y[r][c]);
    Batch {
        x,
        y,
        labels: j.labels.clone(),
    }
}

fn quad_to_json(q: &QuadPayload) -> QuadJson {
    QuadJson {
        dim: q.dim(),
        a: (0..q.dim())
            .flat_map(|r| q.a.row(r).iter().copied().collect::<Vec<_>>())
            .collect(),
        b: q.b.iter().copied().collect(),
    }
}

fn quad_from_json(j: &QuadJson) -> QuadPayload {
    QuadPayload {
        a: DMatrix::from_row_slice(j.dim, j.dim, &j.a),
        b: DVector::from_vec(j.b.clone()),
    }
}

impl Task {
    pub fn to_json(&self) -> Result<String> {
        let j = TaskJson {
            id: self.id,
            train: batch_to_json(&self.train),
            test: batch_to_json(&self.test),
            quad_train: self.quad_train.as_ref().map(quad_to_json),
            quad_test: self.quad_test.as_ref().map(quad_to_json),
        };
        Ok(serde_json::to_string(&j)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: TaskJson = serde_json::from_str(s)?;
        Ok(Task {
            id: j.id,
            train: batch_from_json(&j.train),
            test: batch_from_json(&j.test),
            quad_train: j.quad_train.as_ref().map(quad_from_json),
            quad_test: j.quad_test.as_ref().map(quad_from_json),
        })
    }
}
