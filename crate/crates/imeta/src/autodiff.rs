//! Minimal reverse-mode automatic differentiation over flat parameter
//! vectors.
//!
//! Graphs are small fixed programs (affine layers, tanh/relu, squared-error
//! or softmax cross-entropy reductions, explicit quadratics) that map a
//! parameter vector and a data batch to a scalar loss. Gradients come from
//! one reverse sweep over the recorded tape. Hessian-vector products come
//! from running the same forward + reverse sweep on dual numbers whose
//! tangent carries the direction `v`: the tangent of the gradient is the
//! HVP. A dual tape stores exactly twice the scalars of a plain tape, so
//! the HVP memory proxy is exactly 2x the gradient's.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::telemetry::Ledger;

/// Scalar abstraction shared by the plain (`f64`) and tangent-carrying
/// (`Dual`) evaluation modes.
pub trait Real:
    Copy
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Neg<Output = Self>
{
    /// Number of f64 slots one recorded value occupies on the tape.
    const TAPE_WIDTH: u64;

    fn from_f64(x: f64) -> Self;
    fn zero() -> Self;
    fn one() -> Self;
    /// Primal part.
    fn primal(self) -> f64;
    fn recip(self) -> Self;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
}

impl Real for f64 {
    const TAPE_WIDTH: u64 = 1;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn primal(self) -> f64 {
        self
    }
    fn recip(self) -> Self {
        1.0 / self
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

/// Forward-mode dual number: primal value plus one tangent slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub fn new(re: f64, du: f64) -> Self {
        Self { re, du }
    }
}

impl std::ops::Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.du + o.du)
    }
}

impl std::ops::Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.du - o.du)
    }
}

impl std::ops::Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.du + self.du * o.re)
    }
}

impl std::ops::Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.du)
    }
}

impl Real for Dual {
    const TAPE_WIDTH: u64 = 2;

    fn from_f64(x: f64) -> Self {
        Dual::new(x, 0.0)
    }
    fn zero() -> Self {
        Dual::new(0.0, 0.0)
    }
    fn one() -> Self {
        Dual::new(1.0, 0.0)
    }
    fn primal(self) -> f64 {
        self.re
    }
    fn recip(self) -> Self {
        let inv = 1.0 / self.re;
        Dual::new(inv, -self.du * inv * inv)
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, self.du * (1.0 - t * t))
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.du * e)
    }
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.du / self.re)
    }
}

/// Row-major dense matrix over a generic scalar; just enough surface for
/// the forward and reverse sweeps.
#[derive(Debug, Clone)]
struct Tensor<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Real> Tensor<S> {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    fn scalar(v: S) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    fn at_mut(&mut self, r: usize, c: usize) -> &mut S {
        &mut self.data[r * self.cols + c]
    }

    fn len(&self) -> usize {
        self.data.len()
    }
}

/// One data batch: inputs as rows of `x`, regression targets as rows of
/// `y`, integer class labels for classification losses.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn regression(x: DMatrix<f64>, y: DMatrix<f64>) -> Self {
        Self { x, y, labels: None }
    }

    pub fn classification(x: DMatrix<f64>, labels: Vec<usize>) -> Self {
        let y = DMatrix::zeros(x.nrows(), 0);
        Self {
            x,
            y,
            labels: Some(labels),
        }
    }

    /// Placeholder batch for graphs that read no data (explicit quadratics).
    pub fn empty() -> Self {
        Self {
            x: DMatrix::zeros(0, 0),
            y: DMatrix::zeros(0, 0),
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone)]
enum Node {
    /// The data batch inputs.
    Input,
    /// x * W (+ b), parameters taken from a contiguous slice of the flat
    /// parameter vector.
    Affine {
        input: usize,
        offset: usize,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    },
    Tanh {
        input: usize,
    },
    Relu {
        input: usize,
    },
    /// Mean over batch and output dims of (pred - y)^2.
    MeanSquaredError {
        pred: usize,
    },
    /// Mean over batch of -log softmax(logits)[label].
    SoftmaxCrossEntropy {
        logits: usize,
    },
    /// 0.5 phi'A phi + b'phi over the whole parameter vector.
    Quadratic,
}

/// A differentiable program with a single scalar output. Immutable after
/// construction; evaluations allocate their own tapes, so one graph can be
/// read from many threads.
#[derive(Debug, Clone)]
pub struct CompGraph {
    nodes: Vec<Node>,
    param_dim: usize,
    in_dim: usize,
    quad: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl CompGraph {
    /// Explicit quadratic loss 0.5 phi'A phi + b'phi. `a` must be square and
    /// symmetric; symmetry is the caller's invariant and is debug-asserted.
    pub fn quadratic(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() || a.nrows() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: a.nrows(),
                got: b.len(),
                context: "quadratic payload A/b",
            });
        }
        let d = b.len();
        Ok(Self {
            nodes: vec![Node::Quadratic],
            param_dim: d,
            in_dim: 0,
            quad: Some((a, b)),
        })
    }

    /// Bias-free linear model h(x) = W'x with mean squared error.
    pub fn linear_regression(in_dim: usize, out_dim: usize) -> Self {
        let nodes = vec![
            Node::Input,
            Node::Affine {
                input: 0,
                offset: 0,
                in_dim,
                out_dim,
                bias: false,
            },
            Node::MeanSquaredError { pred: 1 },
        ];
        Self {
            nodes,
            param_dim: in_dim * out_dim,
            in_dim,
            quad: None,
        }
    }

    /// Fully-connected network with the given hidden widths. Squared error
    /// when `classes` is `None`, softmax cross-entropy otherwise.
    pub fn mlp(
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        activation: Activation,
        classes: Option<usize>,
    ) -> Self {
        let mut nodes = vec![Node::Input];
        let mut offset = 0;
        let mut prev_dim = in_dim;
        let mut prev_node = 0;
        for &h in hidden {
            nodes.push(Node::Affine {
                input: prev_node,
                offset,
                in_dim: prev_dim,
                out_dim: h,
                bias: true,
            });
            offset += prev_dim * h + h;
            prev_node = nodes.len() - 1;
            nodes.push(match activation {
                Activation::Tanh => Node::Tanh { input: prev_node },
                Activation::Relu => Node::Relu { input: prev_node },
            });
            prev_node = nodes.len() - 1;
            prev_dim = h;
        }
        let final_out = classes.unwrap_or(out_dim);
        nodes.push(Node::Affine {
            input: prev_node,
            offset,
            in_dim: prev_dim,
            out_dim: final_out,
            bias: true,
        });
        offset += prev_dim * final_out + final_out;
        let pred = nodes.len() - 1;
        nodes.push(if classes.is_some() {
            Node::SoftmaxCrossEntropy { logits: pred }
        } else {
            Node::MeanSquaredError { pred }
        });
        Self {
            nodes,
            param_dim: offset,
            in_dim,
            quad: None,
        }
    }

    pub fn param_dim(&self) -> usize {
        self.param_dim
    }

    fn uses_data(&self) -> bool {
        self.nodes.iter().any(|n| matches!(n, Node::Input))
    }

    fn check_inputs(&self, params: &DVector<f64>, batch: &Batch) -> Result<()> {
        if params.len() != self.param_dim {
            return Err(Error::DimensionMismatch {
                expected: self.param_dim,
                got: params.len(),
                context: "parameter vector",
            });
        }
        if self.uses_data() {
            if batch.is_empty() {
                return Err(Error::EmptySplit("batch"));
            }
            if batch.x.ncols() != self.in_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.in_dim,
                    got: batch.x.ncols(),
                    context: "batch input width",
                });
            }
        }
        Ok(())
    }

    /// Stored scalars for one plain forward tape over this batch. The
    /// memory proxy of an evaluation is this count; a gradient stores
    /// 2x (values + adjoints) and an HVP 4x (dual values + dual adjoints).
    pub fn tape_nodes(&self, batch: &Batch) -> u64 {
        let rows = if self.uses_data() { batch.len() } else { 1 };
        let mut total = 0u64;
        for node in &self.nodes {
            let elems = match node {
                Node::Input => rows * self.in_dim,
                Node::Affine { out_dim, .. } => rows * out_dim,
                Node::Tanh { input } | Node::Relu { input } => {
                    self.node_width(*input, rows) * rows
                }
                Node::MeanSquaredError { .. }
                | Node::SoftmaxCrossEntropy { .. }
                | Node::Quadratic => 1,
            };
            total += elems as u64;
        }
        total
    }

    fn node_width(&self, node: usize, _rows: usize) -> usize {
        match &self.nodes[node] {
            Node::Input => self.in_dim,
            Node::Affine { out_dim, .. } => *out_dim,
            Node::Tanh { input } | Node::Relu { input } => self.node_width(*input, _rows),
            _ => 1,
        }
    }

    fn forward<S: Real>(&self, params: &[S], batch: &Batch) -> Result<Vec<Tensor<S>>> {
        let rows = if self.uses_data() { batch.len() } else { 1 };
        let mut values: Vec<Tensor<S>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let value = match node {
                Node::Input => {
                    let mut t = Tensor::zeros(rows, self.in_dim);
                    for r in 0..rows {
                        for c in 0..self.in_dim {
                            *t.at_mut(r, c) = S::from_f64(batch.x[(r, c)]);
                        }
                    }
                    t
                }
                Node::Affine {
                    input,
                    offset,
                    in_dim,
                    out_dim,
                    bias,
                } => {
                    let x = &values[*input];
                    let mut t = Tensor::zeros(rows, *out_dim);
                    for r in 0..rows {
                        for j in 0..*out_dim {
                            let mut acc = if *bias {
                                params[offset + in_dim * out_dim + j]
                            } else {
                                S::zero()
                            };
                            for i in 0..*in_dim {
                                acc = acc + x.at(r, i) * params[offset + i * out_dim + j];
                            }
                            *t.at_mut(r, j) = acc;
                        }
                    }
                    t
                }
                Node::Tanh { input } => {
                    let x = &values[*input];
                    let mut t = Tensor::zeros(x.rows, x.cols);
                    for (o, v) in t.data.iter_mut().zip(&x.data) {
                        *o = v.tanh();
                    }
                    t
                }
                Node::Relu { input } => {
                    let x = &values[*input];
                    let mut t = Tensor::zeros(x.rows, x.cols);
                    for (o, v) in t.data.iter_mut().zip(&x.data) {
                        *o = if v.primal() > 0.0 { *v } else { S::zero() };
                    }
                    t
                }
                Node::MeanSquaredError { pred } => {
                    let p = &values[*pred];
                    if batch.y.nrows() != p.rows || batch.y.ncols() != p.cols {
                        return Err(Error::DimensionMismatch {
                            expected: p.cols,
                            got: batch.y.ncols(),
                            context: "regression targets",
                        });
                    }
                    let mut acc = S::zero();
                    for r in 0..p.rows {
                        for c in 0..p.cols {
                            let diff = p.at(r, c) - S::from_f64(batch.y[(r, c)]);
                            acc = acc + diff * diff;
                        }
                    }
                    let scale = S::from_f64(1.0 / (p.rows * p.cols) as f64);
                    Tensor::scalar(acc * scale)
                }
                Node::SoftmaxCrossEntropy { logits } => {
                    let l = &values[*logits];
                    let labels = batch
                        .labels
                        .as_ref()
                        .ok_or(Error::EmptySplit("class labels"))?;
                    if labels.len() != l.rows {
                        return Err(Error::DimensionMismatch {
                            expected: l.rows,
                            got: labels.len(),
                            context: "class labels",
                        });
                    }
                    let mut acc = S::zero();
                    for r in 0..l.rows {
                        // Shift by the primal max; constant shifts leave
                        // both value and derivative of logsumexp intact.
                        let m = (0..l.cols)
                            .map(|c| l.at(r, c).primal())
                            .fold(f64::NEG_INFINITY, f64::max);
                        let shift = S::from_f64(m);
                        let mut sum = S::zero();
                        for c in 0..l.cols {
                            sum = sum + (l.at(r, c) - shift).exp();
                        }
                        acc = acc + shift + sum.ln() - l.at(r, labels[r]);
                    }
                    Tensor::scalar(acc * S::from_f64(1.0 / l.rows as f64))
                }
                Node::Quadratic => {
                    let (a, b) = self.quad.as_ref().expect("quadratic payload");
                    let d = self.param_dim;
                    let mut acc = S::zero();
                    for i in 0..d {
                        let mut row = S::zero();
                        for j in 0..d {
                            row = row + S::from_f64(a[(i, j)]) * params[j];
                        }
                        acc = acc + params[i] * (row * S::from_f64(0.5) + S::from_f64(b[i]));
                    }
                    Tensor::scalar(acc)
                }
            };
            if value.data.iter().any(|v| !v.primal().is_finite()) {
                return Err(Error::NonFinite { node: idx });
            }
            values.push(value);
        }
        Ok(values)
    }

    fn backward<S: Real>(
        &self,
        params: &[S],
        batch: &Batch,
        values: &[Tensor<S>],
    ) -> Vec<S> {
        let mut adjoints: Vec<Tensor<S>> = values
            .iter()
            .map(|v| Tensor::zeros(v.rows, v.cols))
            .collect();
        let mut grad = vec![S::zero(); self.param_dim];
        *adjoints.last_mut().expect("nonempty graph").at_mut(0, 0) = S::one();

        for (idx, node) in self.nodes.iter().enumerate().rev() {
            match node {
                Node::Input => {}
                Node::Affine {
                    input,
                    offset,
                    in_dim,
                    out_dim,
                    bias,
                } => {
                    let rows = values[idx].rows;
                    for r in 0..rows {
                        for j in 0..*out_dim {
                            let g = adjoints[idx].at(r, j);
                            for i in 0..*in_dim {
                                grad[offset + i * out_dim + j] =
                                    grad[offset + i * out_dim + j] + values[*input].at(r, i) * g;
                            }
                            if *bias {
                                grad[offset + in_dim * out_dim + j] =
                                    grad[offset + in_dim * out_dim + j] + g;
                            }
                        }
                    }
                    // Propagate to the input activations.
                    let (head, tail) = adjoints.split_at_mut(idx);
                    let adj_out = &tail[0];
                    let adj_in = &mut head[*input];
                    for r in 0..rows {
                        for i in 0..*in_dim {
                            let mut acc = adj_in.at(r, i);
                            for j in 0..*out_dim {
                                acc = acc + adj_out.at(r, j) * params[offset + i * out_dim + j];
                            }
                            *adj_in.at_mut(r, i) = acc;
                        }
                    }
                }
                Node::Tanh { input } => {
                    let (head, tail) = adjoints.split_at_mut(idx);
                    let adj_out = &tail[0];
                    let adj_in = &mut head[*input];
                    for k in 0..adj_out.len() {
                        let t = values[idx].data[k];
                        adj_in.data[k] =
                            adj_in.data[k] + adj_out.data[k] * (S::one() - t * t);
                    }
                }
                Node::Relu { input } => {
                    let (head, tail) = adjoints.split_at_mut(idx);
                    let adj_out = &tail[0];
                    let adj_in = &mut head[*input];
                    for k in 0..adj_out.len() {
                        if values[*input].data[k].primal() > 0.0 {
                            adj_in.data[k] = adj_in.data[k] + adj_out.data[k];
                        }
                    }
                }
                Node::MeanSquaredError { pred } => {
                    let seed = adjoints[idx].at(0, 0);
                    let p = &values[*pred];
                    let scale = S::from_f64(2.0 / (p.rows * p.cols) as f64) * seed;
                    let (head, tail) = adjoints.split_at_mut(idx);
                    let _ = tail;
                    let adj_in = &mut head[*pred];
                    for r in 0..p.rows {
                        for c in 0..p.cols {
                            let diff = p.at(r, c) - S::from_f64(batch.y[(r, c)]);
                            let cur = adj_in.at(r, c);
                            *adj_in.at_mut(r, c) = cur + diff * scale;
                        }
                    }
                }
                Node::SoftmaxCrossEntropy { logits } => {
                    let seed = adjoints[idx].at(0, 0);
                    let l = &values[*logits];
                    let labels = batch.labels.as_ref().expect("labels checked in forward");
                    let scale = S::from_f64(1.0 / l.rows as f64) * seed;
                    let (head, _) = adjoints.split_at_mut(idx);
                    let adj_in = &mut head[*logits];
                    for r in 0..l.rows {
                        let m = (0..l.cols)
                            .map(|c| l.at(r, c).primal())
                            .fold(f64::NEG_INFINITY, f64::max);
                        let shift = S::from_f64(m);
                        let mut sum = S::zero();
                        for c in 0..l.cols {
                            sum = sum + (l.at(r, c) - shift).exp();
                        }
                        let inv = sum.recip();
                        for c in 0..l.cols {
                            let mut soft = (l.at(r, c) - shift).exp() * inv;
                            if c == labels[r] {
                                soft = soft - S::one();
                            }
                            *adj_in.at_mut(r, c) = adj_in.at(r, c) + soft * scale;
                        }
                    }
                }
                Node::Quadratic => {
                    let seed = adjoints[idx].at(0, 0);
                    let (a, b) = self.quad.as_ref().expect("quadratic payload");
                    let d = self.param_dim;
                    for i in 0..d {
                        let mut row = S::zero();
                        for j in 0..d {
                            row = row + S::from_f64(a[(i, j)]) * params[j];
                        }
                        grad[i] = grad[i] + (row + S::from_f64(b[i])) * seed;
                    }
                }
            }
        }
        grad
    }

    /// Model outputs feeding the loss node (predictions or logits), one row
    /// per batch element. Not available for explicit quadratics.
    pub fn predictions(
        &self,
        params: &DVector<f64>,
        batch: &Batch,
        meter: &Ledger,
    ) -> Result<DMatrix<f64>> {
        self.check_inputs(params, batch)?;
        let pred_node = match self.nodes.last() {
            Some(Node::MeanSquaredError { pred }) => *pred,
            Some(Node::SoftmaxCrossEntropy { logits }) => *logits,
            _ => {
                return Err(Error::UnsupportedKind(
                    "graph has no prediction node".into(),
                ))
            }
        };
        let n = self.tape_nodes(batch);
        meter.alloc(n);
        let result = self.forward(params.as_slice(), batch);
        meter.release(n);
        let values = result?;
        let p = &values[pred_node];
        Ok(DMatrix::from_fn(p.rows, p.cols, |r, c| p.at(r, c)))
    }

    /// Scalar loss of the graph at `params` on `batch`.
    pub fn evaluate(&self, params: &DVector<f64>, batch: &Batch, meter: &Ledger) -> Result<f64> {
        self.check_inputs(params, batch)?;
        let n = self.tape_nodes(batch);
        meter.alloc(n);
        let result = self.forward(params.as_slice(), batch);
        meter.release(n);
        Ok(result?.last().expect("nonempty graph").at(0, 0))
    }

    /// Gradient of the scalar loss with respect to `params`.
    pub fn gradient(
        &self,
        params: &DVector<f64>,
        batch: &Batch,
        meter: &Ledger,
    ) -> Result<DVector<f64>> {
        self.check_inputs(params, batch)?;
        let n = self.tape_nodes(batch);
        meter.alloc(2 * n); // forward values + adjoints
        let result = self.forward(params.as_slice(), batch).map(|values| {
            let grad = self.backward(params.as_slice(), batch, &values);
            DVector::from_vec(grad)
        });
        meter.release(2 * n);
        meter.count_gradient();
        result
    }

    /// Hessian-vector product via the tangent of the reverse sweep: running
    /// forward + reverse on duals with param tangent `v` yields grad tangent
    /// equal to (d^2 L) v. Tape cost is exactly 2x a gradient's.
    pub fn hessian_vector_product(
        &self,
        params: &DVector<f64>,
        batch: &Batch,
        v: &DVector<f64>,
        meter: &Ledger,
    ) -> Result<DVector<f64>> {
        self.check_inputs(params, batch)?;
        if v.len() != self.param_dim {
            return Err(Error::DimensionMismatch {
                expected: self.param_dim,
                got: v.len(),
                context: "HVP direction",
            });
        }
        let dual_params: Vec<Dual> = params
            .iter()
            .zip(v.iter())
            .map(|(&p, &t)| Dual::new(p, t))
            .collect();
        let n = self.tape_nodes(batch);
        meter.alloc(4 * n); // dual values + dual adjoints, 2 slots each
        let result = self.forward(&dual_params, batch).map(|values| {
            let grad = self.backward(&dual_params, batch, &values);
            DVector::from_iterator(grad.len(), grad.iter().map(|g| g.du))
        });
        meter.release(4 * n);
        meter.count_hvp();
        result
    }
}
