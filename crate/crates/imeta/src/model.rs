//! Parametric models and the three loss surfaces of the bi-level problem:
//! train loss, test loss, and the proximally regularized inner objective.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Batch, CompGraph};
use crate::error::{Error, Result};
use crate::tasks::Task;
use crate::telemetry::Ledger;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case")]
pub enum ModelKind {
    /// Bias-free linear predictor h(x) = W'x.
    Linear { in_dim: usize, out_dim: usize },
    /// Fully-connected network; `out_dim` is the class count under
    /// cross-entropy.
    Mlp {
        in_dim: usize,
        hidden: Vec<usize>,
        out_dim: usize,
        activation: ActivationKind,
    },
    /// The loss is the task's explicit quadratic payload.
    ExplicitQuadratic { dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationKind {
    Tanh,
    Relu,
}

impl From<ActivationKind> for Activation {
    fn from(a: ActivationKind) -> Activation {
        match a {
            ActivationKind::Tanh => Activation::Tanh,
            ActivationKind::Relu => Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SquaredError,
    /// Fused with softmax for numerical stability.
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub kind: ModelKind,
    pub loss: LossKind,
}

impl Model {
    pub fn linear(in_dim: usize, out_dim: usize) -> Self {
        Self {
            kind: ModelKind::Linear { in_dim, out_dim },
            loss: LossKind::SquaredError,
        }
    }

    pub fn mlp(in_dim: usize, hidden: Vec<usize>, out_dim: usize) -> Self {
        Self {
            kind: ModelKind::Mlp {
                in_dim,
                hidden,
                out_dim,
                activation: ActivationKind::Tanh,
            },
            loss: LossKind::SquaredError,
        }
    }

    pub fn mlp_classifier(in_dim: usize, hidden: Vec<usize>, classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp {
                in_dim,
                hidden,
                out_dim: classes,
                activation: ActivationKind::Tanh,
            },
            loss: LossKind::CrossEntropy,
        }
    }

    pub fn explicit_quadratic(dim: usize) -> Self {
        Self {
            kind: ModelKind::ExplicitQuadratic { dim },
            loss: LossKind::SquaredError,
        }
    }

    pub fn param_dim(&self) -> usize {
        match &self.kind {
            ModelKind::Linear { in_dim, out_dim } => in_dim * out_dim,
            ModelKind::Mlp {
                in_dim,
                hidden,
                out_dim,
                ..
            } => {
                let mut total = 0;
                let mut prev = *in_dim;
                for &h in hidden {
                    total += prev * h + h;
                    prev = h;
                }
                total + prev * out_dim + out_dim
            }
            ModelKind::ExplicitQuadratic { dim } => *dim,
        }
    }

    /// Differentiable loss graph for one split of a task.
    pub fn graph(&self, task: &Task, split: Split) -> Result<CompGraph> {
        match &self.kind {
            ModelKind::ExplicitQuadratic { dim } => {
                let payload = match split {
                    Split::Train => task.quad_train.as_ref(),
                    Split::Test => task.quad_test.as_ref(),
                };
                let payload = payload.ok_or_else(|| {
                    Error::UnsupportedKind("explicit-quadratic model needs a quadratic task".into())
                })?;
                if payload.dim() != *dim {
                    return Err(Error::DimensionMismatch {
                        expected: *dim,
                        got: payload.dim(),
                        context: "quadratic payload dimension",
                    });
                }
                CompGraph::quadratic(payload.a.clone(), payload.b.clone())
            }
            ModelKind::Linear { in_dim, out_dim } => {
                Ok(CompGraph::linear_regression(*in_dim, *out_dim))
            }
            ModelKind::Mlp {
                in_dim,
                hidden,
                out_dim,
                activation,
            } => {
                let classes = match self.loss {
                    LossKind::CrossEntropy => Some(*out_dim),
                    LossKind::SquaredError => None,
                };
                Ok(CompGraph::mlp(
                    *in_dim,
                    hidden,
                    *out_dim,
                    (*activation).into(),
                    classes,
                ))
            }
        }
    }

    fn split_batch<'t>(&self, task: &'t Task, split: Split) -> Result<&'t Batch> {
        let batch = match split {
            Split::Train => &task.train,
            Split::Test => &task.test,
        };
        if !matches!(self.kind, ModelKind::ExplicitQuadratic { .. }) && batch.is_empty() {
            return Err(Error::EmptySplit(match split {
                Split::Train => "train",
                Split::Test => "test",
            }));
        }
        Ok(batch)
    }

    pub fn loss(
        &self,
        params: &DVector<f64>,
        task: &Task,
        split: Split,
        meter: &Ledger,
    ) -> Result<f64> {
        let graph = self.graph(task, split)?;
        graph.evaluate(params, self.split_batch(task, split)?, meter)
    }

    pub fn train_loss(&self, params: &DVector<f64>, task: &Task, meter: &Ledger) -> Result<f64> {
        self.loss(params, task, Split::Train, meter)
    }

    pub fn test_loss(&self, params: &DVector<f64>, task: &Task, meter: &Ledger) -> Result<f64> {
        self.loss(params, task, Split::Test, meter)
    }

    pub fn loss_gradient(
        &self,
        params: &DVector<f64>,
        task: &Task,
        split: Split,
        meter: &Ledger,
    ) -> Result<DVector<f64>> {
        let graph = self.graph(task, split)?;
        graph.gradient(params, self.split_batch(task, split)?, meter)
    }

    /// Fraction of batch rows whose argmax logit matches the label.
    pub fn accuracy(
        &self,
        params: &DVector<f64>,
        task: &Task,
        split: Split,
        meter: &Ledger,
    ) -> Result<f64> {
        let batch = self.split_batch(task, split)?;
        let labels = batch
            .labels
            .as_ref()
            .ok_or(Error::UnsupportedKind("accuracy needs class labels".into()))?;
        let graph = self.graph(task, split)?;
        let logits = graph.predictions(params, batch, meter)?;
        let mut hits = 0usize;
        for (r, &label) in labels.iter().enumerate() {
            let row = logits.row(r);
            let mut best = 0usize;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            if best == label {
                hits += 1;
            }
        }
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Seeded parameter initialization: per-layer Gaussian weights scaled by
    /// 1/sqrt(fan-in), zero biases; plain Gaussian for non-layered models.
    pub fn init_params(&self, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |scale: f64| -> f64 {
            let (u1, u2) = (rng.gen::<f64>().max(1e-300), rng.gen::<f64>());
            scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        match &self.kind {
            ModelKind::Mlp {
                in_dim,
                hidden,
                out_dim,
                ..
            } => {
                let mut params = Vec::with_capacity(self.param_dim());
                let mut prev = *in_dim;
                let widths: Vec<usize> = hidden.iter().copied().chain([*out_dim]).collect();
                for w in widths {
                    let scale = 1.0 / (prev as f64).sqrt();
                    for _ in 0..prev * w {
                        params.push(gauss(scale));
                    }
                    params.extend(std::iter::repeat(0.0).take(w));
                    prev = w;
                }
                DVector::from_vec(params)
            }
            _ => DVector::from_fn(self.param_dim(), |_, _| gauss(1.0)),
        }
    }
}

/// The proximal inner objective G(phi, theta) = train_loss(phi)
/// + (lambda/2) ||phi - theta||^2 for one task.
pub struct InnerObjective<'a> {
    pub task: &'a Task,
    pub theta: DVector<f64>,
    pub lambda: f64,
    graph: CompGraph,
    batch: &'a Batch,
}

impl<'a> InnerObjective<'a> {
    pub fn new(model: &Model, task: &'a Task, theta: DVector<f64>, lambda: f64) -> Result<Self> {
        if lambda <= 0.0 {
            return Err(Error::Config(format!(
                "regularization strength lambda must be positive, got {lambda}"
            )));
        }
        let graph = model.graph(task, Split::Train)?;
        if theta.len() != graph.param_dim() {
            return Err(Error::DimensionMismatch {
                expected: graph.param_dim(),
                got: theta.len(),
                context: "meta-parameter vector",
            });
        }
        if !matches!(model.kind, ModelKind::ExplicitQuadratic { .. }) && task.train.is_empty() {
            return Err(Error::EmptySplit("train"));
        }
        Ok(Self {
            task,
            theta,
            lambda,
            graph,
            batch: &task.train,
        })
    }

    pub fn dim(&self) -> usize {
        self.graph.param_dim()
    }

    pub fn train_graph(&self) -> &CompGraph {
        &self.graph
    }

    pub fn value(&self, phi: &DVector<f64>, meter: &Ledger) -> Result<f64> {
        let base = self.graph.evaluate(phi, self.batch, meter)?;
        let diff = phi - &self.theta;
        Ok(base + 0.5 * self.lambda * diff.norm_squared())
    }

    pub fn gradient(&self, phi: &DVector<f64>, meter: &Ledger) -> Result<DVector<f64>> {
        let mut grad = self.graph.gradient(phi, self.batch, meter)?;
        grad.axpy(self.lambda, phi, 1.0);
        grad.axpy(-self.lambda, &self.theta, 1.0);
        Ok(grad)
    }

    pub fn hvp(&self, phi: &DVector<f64>, v: &DVector<f64>, meter: &Ledger) -> Result<DVector<f64>> {
        let mut hv = self
            .graph
            .hessian_vector_product(phi, self.batch, v, meter)?;
        hv.axpy(self.lambda, v, 1.0);
        Ok(hv)
    }

    /// HVP of the train loss alone (no proximal term); the curvature that
    /// enters the implicit linear system.
    pub fn train_hvp(
        &self,
        phi: &DVector<f64>,
        v: &DVector<f64>,
        meter: &Ledger,
    ) -> Result<DVector<f64>> {
        self.graph.hessian_vector_product(phi, self.batch, v, meter)
    }
}
