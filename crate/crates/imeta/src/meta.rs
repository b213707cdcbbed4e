//! Per-task meta-gradient engines: implicit differentiation through the
//! inner optimum, full path differentiation through the unrolled inner loop,
//! the first-order approximation, and the proximal-point update.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cg::conjugate_gradient;
use crate::error::{Error, Result};
use crate::model::{InnerObjective, Model, Split};
use crate::solvers::{solve, InnerBudget, SolveMethod, SolveResult};
use crate::tasks::Task;
use crate::telemetry::Ledger;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "engine", rename_all = "kebab-case")]
pub enum Engine {
    /// Implicit meta-gradient: inner solve, then CG on the
    /// (I + Hessian/lambda) system seeded by the test gradient.
    Imaml { cg_steps: u64, cg_tol: f64 },
    /// Full backpropagation through the unrolled inner gradient descent.
    Maml,
    /// Test gradient at the adapted parameters, no curvature correction.
    Fomaml,
    /// Update direction toward the adapted parameters.
    Reptile,
}

impl Engine {
    pub fn tag(&self) -> &'static str {
        match self {
            Engine::Imaml { .. } => "imaml",
            Engine::Maml => "maml",
            Engine::Fomaml => "fomaml",
            Engine::Reptile => "reptile",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaGradReport {
    pub g: DVector<f64>,
    pub method: String,
    pub inner: SolveResult,
    pub cg_iterations: Option<u64>,
    pub cg_residual: Option<f64>,
    pub grad_evals: u64,
    pub hvps: u64,
    pub peak_tape_nodes: u64,
    pub wall_ms: f64,
}

/// Dispatch over the engine kinds; MAML derives its unroll step size and
/// count from the gradient-descent inner budget.
pub fn meta_gradient(
    engine: &Engine,
    model: &Model,
    task: &Task,
    theta: &DVector<f64>,
    lambda: f64,
    inner: &InnerBudget,
) -> Result<MetaGradReport> {
    match engine {
        Engine::Imaml { cg_steps, cg_tol } => {
            imaml_meta_gradient(model, task, theta, lambda, inner, *cg_steps, *cg_tol)
        }
        Engine::Maml => {
            let alpha = match inner.method {
                SolveMethod::Gd { lr } => lr,
                _ => {
                    return Err(Error::Config(
                        "path-differentiated meta-gradient requires the gradient descent inner method"
                            .into(),
                    ))
                }
            };
            maml_meta_gradient(model, task, theta, lambda, alpha, inner.steps)
        }
        Engine::Fomaml => fomaml_meta_gradient(model, task, theta, lambda, inner),
        Engine::Reptile => reptile_meta_gradient(model, task, theta, lambda, inner),
    }
}

fn report(
    g: DVector<f64>,
    method: &str,
    inner: SolveResult,
    cg_iterations: Option<u64>,
    cg_residual: Option<f64>,
    meter: &Ledger,
    start: Instant,
) -> MetaGradReport {
    MetaGradReport {
        g,
        method: method.to_string(),
        inner,
        cg_iterations,
        cg_residual,
        grad_evals: meter.grad_evals(),
        hvps: meter.hvps(),
        peak_tape_nodes: meter.peak_nodes(),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

/// Implicit meta-gradient. With a zero CG budget the linear solve is skipped
/// entirely and the raw test gradient is returned, which makes the
/// first-order engine's output reproducible bit for bit.
pub fn imaml_meta_gradient(
    model: &Model,
    task: &Task,
    theta: &DVector<f64>,
    lambda: f64,
    inner: &InnerBudget,
    cg_steps: u64,
    cg_tol: f64,
) -> Result<MetaGradReport> {
    let start = Instant::now();
    let meter = Ledger::new();
    let obj = InnerObjective::new(model, task, theta.clone(), lambda)?;
    let solved = solve(&obj, theta, inner, &meter)?;
    let v = model.loss_gradient(&solved.phi, task, Split::Test, &meter)?;
    if cg_steps == 0 {
        let g = v.clone();
        return Ok(report(
            g,
            "imaml",
            solved,
            Some(0),
            Some(v.norm()),
            &meter,
            start,
        ));
    }
    let phi = solved.phi.clone();
    let cg = conjugate_gradient(
        |w| {
            let hv = obj.train_hvp(&phi, w, &meter)?;
            Ok(w + hv / lambda)
        },
        &v,
        cg_steps,
        cg_tol,
    )?;
    Ok(report(
        cg.w,
        "imaml",
        solved,
        Some(cg.iterations),
        Some(cg.residual_norm),
        &meter,
        start,
    ))
}

/// Full path differentiation. The forward pass unrolls gradient descent on
/// the proximal objective keeping every iterate; the backward pass applies
/// the transposed step Jacobians with one curvature product per step,
/// accumulating the direct dependence of each step on theta.
///
/// Every unrolled step's gradient tape stays retained until the backward
/// pass finishes, so the peak memory proxy grows affinely with the step
/// count. That retention is the point of the comparison with the implicit
/// route and is accounted explicitly on the meter.
pub fn maml_meta_gradient(
    model: &Model,
    task: &Task,
    theta: &DVector<f64>,
    lambda: f64,
    alpha: f64,
    steps: u64,
) -> Result<MetaGradReport> {
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(Error::Config(format!(
            "unroll step size must be positive, got {alpha}"
        )));
    }
    let start = Instant::now();
    let meter = Ledger::new();
    let obj = InnerObjective::new(model, task, theta.clone(), lambda)?;
    let graph = model.graph(task, Split::Train)?;
    let retained_per_step = 2 * graph.tape_nodes(&task.train);

    let mut path = Vec::with_capacity(steps as usize + 1);
    let mut phi = theta.clone();
    path.push(phi.clone());
    for step in 0..steps {
        let grad = obj.gradient(&phi, &meter)?;
        // The step's tape is held for the backward pass.
        meter.alloc(retained_per_step);
        phi.axpy(-alpha, &grad, 1.0);
        if !phi.iter().all(|x| x.is_finite()) {
            return Err(Error::Divergence { step: step + 1 });
        }
        path.push(phi.clone());
    }

    let mut w = model.loss_gradient(&phi, task, Split::Test, &meter)?;
    let mut acc = DVector::zeros(w.len());
    for k in (0..steps as usize).rev() {
        // Direct dependence of step k+1 on theta through the proximal pull.
        acc.axpy(alpha * lambda, &w, 1.0);
        let hw = obj.train_hvp(&path[k], &w, &meter)?;
        w *= 1.0 - alpha * lambda;
        w.axpy(-alpha, &hw, 1.0);
    }
    meter.release(retained_per_step * steps);
    let g = &w + &acc;

    let inner = SolveResult {
        grad_norm: obj.gradient(&phi, &Ledger::new())?.norm(),
        phi,
        iterations: steps,
        grad_evals: steps + 1,
        hvps: steps,
        line_search_exhausted: false,
    };
    Ok(report(g, "maml", inner, None, None, &meter, start))
}

/// First-order approximation: the test gradient at the adapted parameters,
/// treating the adaptation as constant in theta.
pub fn fomaml_meta_gradient(
    model: &Model,
    task: &Task,
    theta: &DVector<f64>,
    lambda: f64,
    inner: &InnerBudget,
) -> Result<MetaGradReport> {
    let start = Instant::now();
    let meter = Ledger::new();
    let obj = InnerObjective::new(model, task, theta.clone(), lambda)?;
    let solved = solve(&obj, theta, inner, &meter)?;
    let g = model.loss_gradient(&solved.phi, task, Split::Test, &meter)?;
    Ok(report(g, "fomaml", solved, None, None, &meter, start))
}

/// Proximal-point update direction: from theta toward the adapted
/// parameters. At an exact inner solve this equals the train-loss gradient
/// at the solution scaled by 1/lambda.
pub fn reptile_meta_gradient(
    model: &Model,
    task: &Task,
    theta: &DVector<f64>,
    lambda: f64,
    inner: &InnerBudget,
) -> Result<MetaGradReport> {
    let start = Instant::now();
    let meter = Ledger::new();
    let obj = InnerObjective::new(model, task, theta.clone(), lambda)?;
    let solved = solve(&obj, theta, inner, &meter)?;
    let g = theta - &solved.phi;
    Ok(report(g, "reptile", solved, None, None, &meter, start))
}
