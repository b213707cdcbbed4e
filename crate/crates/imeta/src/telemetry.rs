//! Cost accounting: gradient/HVP counters and the live-tape-node memory proxy.
//!
//! The memory proxy counts recorded tape scalars rather than bytes. It is
//! deterministic and portable, which is all the trade-off comparisons need.

use std::cell::Cell;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cg::DEFAULT_RESIDUAL_TOL;
use crate::error::{Error, Result};
use crate::meta::{self, Engine};
use crate::model::Model;
use crate::oracle::exact_meta_gradient;
use crate::solvers::InnerBudget;
use crate::tasks::Task;

/// Inner-step sweep bracketing the regimes where the path-differentiated
/// baseline is and is not competitive on memory.
pub const DEFAULT_INNER_GRID: [u64; 4] = [4, 16, 64, 256];
/// CG budgets from the first-order limit up to effectively exact solves.
pub const DEFAULT_CG_GRID: [u64; 5] = [0, 1, 2, 5, 10];

/// Per-call runtime meter. Tapes register their storage on creation and
/// release it when dropped; solvers bump the gradient/HVP counters.
///
/// Cell-based so immutable objectives can share it; one meter per task
/// computation, never across threads.
#[derive(Debug, Default)]
pub struct Ledger {
    grad_evals: Cell<u64>,
    hvps: Cell<u64>,
    live_nodes: Cell<u64>,
    peak_nodes: Cell<u64>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&self, nodes: u64) {
        let live = self.live_nodes.get() + nodes;
        self.live_nodes.set(live);
        if live > self.peak_nodes.get() {
            self.peak_nodes.set(live);
        }
    }

    pub fn release(&self, nodes: u64) {
        let live = self.live_nodes.get();
        debug_assert!(live >= nodes, "released more tape nodes than live");
        self.live_nodes.set(live.saturating_sub(nodes));
    }

    pub fn count_gradient(&self) {
        self.grad_evals.set(self.grad_evals.get() + 1);
    }

    pub fn count_hvp(&self) {
        self.hvps.set(self.hvps.get() + 1);
    }

    pub fn grad_evals(&self) -> u64 {
        self.grad_evals.get()
    }

    pub fn hvps(&self) -> u64 {
        self.hvps.get()
    }

    pub fn live_nodes(&self) -> u64 {
        self.live_nodes.get()
    }

    pub fn peak_nodes(&self) -> u64 {
        self.peak_nodes.get()
    }
}

/// Immutable cost summary attached to reports and comparison tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub grad_evals: u64,
    pub hvps: u64,
    pub peak_tape_nodes: u64,
    pub wall_ms: f64,
    pub method: String,
    /// Sweep coordinates: (inner steps, CG steps, kappa, lambda).
    pub inner_steps: Option<u64>,
    pub cg_steps: Option<u64>,
    pub kappa: Option<f64>,
    pub lambda: Option<f64>,
}

impl CostLedger {
    pub fn from_meter(meter: &Ledger, method: &str) -> Self {
        Self {
            grad_evals: meter.grad_evals(),
            hvps: meter.hvps(),
            peak_tape_nodes: meter.peak_nodes(),
            wall_ms: 0.0,
            method: method.to_string(),
            inner_steps: None,
            cg_steps: None,
            kappa: None,
            lambda: None,
        }
    }
}

/// Counter sums, peak maxima. Associative and commutative over the counters;
/// string/coordinate fields are kept from the first non-empty operand.
pub fn merge(ledgers: &[CostLedger]) -> CostLedger {
    let mut out = CostLedger::default();
    for l in ledgers {
        out.grad_evals += l.grad_evals;
        out.hvps += l.hvps;
        out.peak_tape_nodes = out.peak_tape_nodes.max(l.peak_tape_nodes);
        out.wall_ms += l.wall_ms;
        if out.method.is_empty() {
            out.method = l.method.clone();
        }
        if out.inner_steps.is_none() {
            out.inner_steps = l.inner_steps;
        }
        if out.cg_steps.is_none() {
            out.cg_steps = l.cg_steps;
        }
        if out.kappa.is_none() {
            out.kappa = l.kappa;
        }
        if out.lambda.is_none() {
            out.lambda = l.lambda;
        }
    }
    out
}

/// One cell of the method/budget comparison table: the mean relative
/// deviation from the closed-form meta-gradient over the task family, plus
/// merged cost counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub inner_steps: u64,
    pub cg_steps: Option<u64>,
    pub exact_solve_error: f64,
    pub ledger: CostLedger,
}

fn gd_learning_rate(task: &Task, lambda: f64) -> Result<f64> {
    let q = task.quad_train.as_ref().ok_or_else(|| {
        Error::UnsupportedKind("method comparison needs quadratic tasks for the exact oracle".into())
    })?;
    let eigs = q.a.clone().symmetric_eigen().eigenvalues;
    Ok(2.0 / (2.0 * lambda + eigs.min() + eigs.max()))
}

/// Sweeps every engine over the inner-step grid (and the CG grid for the
/// implicit engine) on a quadratic task family, scoring each cell against
/// the closed-form meta-gradient.
pub fn compare_methods(
    tasks: &[Task],
    theta: &DVector<f64>,
    lambda: f64,
    inner_grid: &[u64],
    cg_grid: &[u64],
) -> Result<Vec<CompareRow>> {
    if tasks.is_empty() {
        return Err(Error::Config("method comparison needs at least one task".into()));
    }
    let d = theta.len();
    let model = Model::explicit_quadratic(d);
    let mut rows = Vec::new();

    let cell = |engine: &Engine, steps: u64, cg_steps: Option<u64>| -> Result<CompareRow> {
        let mut err_sum = 0.0;
        let mut ledgers = Vec::new();
        for task in tasks {
            let lr = gd_learning_rate(task, lambda)?;
            let budget = InnerBudget::gd(lr, steps);
            let rep = meta::meta_gradient(engine, &model, task, theta, lambda, &budget)?;
            let exact = exact_meta_gradient(task, theta, lambda)?.grad;
            err_sum += (&rep.g - &exact).norm() / exact.norm().max(f64::MIN_POSITIVE);
            ledgers.push(CostLedger {
                grad_evals: rep.grad_evals,
                hvps: rep.hvps,
                peak_tape_nodes: rep.peak_tape_nodes,
                wall_ms: rep.wall_ms,
                method: rep.method,
                inner_steps: Some(steps),
                cg_steps,
                kappa: None,
                lambda: Some(lambda),
            });
        }
        Ok(CompareRow {
            method: engine.tag().to_string(),
            inner_steps: steps,
            cg_steps,
            exact_solve_error: err_sum / tasks.len() as f64,
            ledger: merge(&ledgers),
        })
    };

    for &steps in inner_grid {
        for &cg in cg_grid {
            let engine = Engine::Imaml {
                cg_steps: cg,
                cg_tol: DEFAULT_RESIDUAL_TOL,
            };
            rows.push(cell(&engine, steps, Some(cg))?);
        }
        rows.push(cell(&Engine::Maml, steps, None)?);
        rows.push(cell(&Engine::Fomaml, steps, None)?);
        rows.push(cell(&Engine::Reptile, steps, None)?);
    }
    Ok(rows)
}
