//! Approximate solvers for the proximal inner problem: gradient descent,
//! Nesterov accelerated gradient descent for strongly convex objectives, and
//! Hessian-free Newton-CG with backtracking line search.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cg::{conjugate_gradient, DEFAULT_RESIDUAL_TOL};
use crate::error::{Error, Result};
use crate::model::InnerObjective;
use crate::telemetry::Ledger;

pub const BACKTRACK_SHRINK: f64 = 0.5;
pub const ARMIJO_C: f64 = 1e-4;
pub const MAX_BACKTRACKS: u32 = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum SolveMethod {
    Gd {
        lr: f64,
    },
    /// Strongly convex Nesterov momentum; `mu` and `beta` are the strong
    /// convexity and smoothness constants of G.
    Agd {
        mu: f64,
        beta: f64,
    },
    NewtonCg {
        cg_steps: u64,
        repetitions: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerBudget {
    #[serde(flatten)]
    pub method: SolveMethod,
    pub steps: u64,
    /// Early-stop target on the solution error; enforced via the gradient
    /// norm proxy ||grad G|| <= mu * delta when mu is known.
    pub target_delta: Option<f64>,
}

impl InnerBudget {
    pub fn gd(lr: f64, steps: u64) -> Self {
        Self {
            method: SolveMethod::Gd { lr },
            steps,
            target_delta: None,
        }
    }

    pub fn agd(mu: f64, beta: f64, steps: u64, target_delta: f64) -> Self {
        Self {
            method: SolveMethod::Agd { mu, beta },
            steps,
            target_delta: Some(target_delta),
        }
    }

    pub fn newton_cg(cg_steps: u64, repetitions: u64) -> Self {
        Self {
            method: SolveMethod::NewtonCg {
                cg_steps,
                repetitions,
            },
            steps: repetitions,
            target_delta: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            SolveMethod::Gd { lr } => {
                if lr <= 0.0 || !lr.is_finite() {
                    return Err(Error::Config(format!(
                        "gradient descent learning rate must be positive, got {lr}"
                    )));
                }
            }
            SolveMethod::Agd { mu, beta } => {
                if !(mu > 0.0 && beta >= mu && beta.is_finite()) {
                    return Err(Error::Config(format!(
                        "accelerated gradient needs 0 < mu <= beta, got mu={mu} beta={beta}"
                    )));
                }
            }
            SolveMethod::NewtonCg { .. } => {}
        }
        if let Some(d) = self.target_delta {
            if d <= 0.0 || !d.is_finite() {
                return Err(Error::Config(format!(
                    "target delta must be positive, got {d}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub phi: DVector<f64>,
    pub iterations: u64,
    pub grad_norm: f64,
    pub grad_evals: u64,
    pub hvps: u64,
    /// Set when a Newton-CG line search exhausted its backtracks and the
    /// best iterate so far was kept.
    pub line_search_exhausted: bool,
}

fn check_finite(phi: &DVector<f64>, step: u64) -> Result<()> {
    if phi.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { step })
    }
}

/// Overflow inside the loss evaluation on a runaway iterate is divergence,
/// not a model defect; relabel it with the offending step.
fn grad_or_diverged(
    obj: &InnerObjective,
    phi: &DVector<f64>,
    step: u64,
    meter: &Ledger,
) -> Result<DVector<f64>> {
    match obj.gradient(phi, meter) {
        Err(Error::NonFinite { .. }) => Err(Error::Divergence { step }),
        other => other,
    }
}

/// Dispatches on the budget's method.
pub fn solve(
    obj: &InnerObjective,
    init: &DVector<f64>,
    budget: &InnerBudget,
    meter: &Ledger,
) -> Result<SolveResult> {
    budget.validate()?;
    match budget.method {
        SolveMethod::Gd { lr } => solve_gd(obj, init, lr, budget.steps, meter),
        SolveMethod::Agd { mu, beta } => {
            solve_agd(obj, init, mu, beta, budget.steps, budget.target_delta, meter)
        }
        SolveMethod::NewtonCg {
            cg_steps,
            repetitions,
        } => solve_newton_cg(obj, init, cg_steps, repetitions, meter),
    }
}

/// Plain gradient descent on G with a fixed learning rate. Runs the full
/// step budget; delta targets are only enforced where mu is known (AGD).
pub fn solve_gd(
    obj: &InnerObjective,
    init: &DVector<f64>,
    lr: f64,
    steps: u64,
    meter: &Ledger,
) -> Result<SolveResult> {
    let start_grads = meter.grad_evals();
    let mut phi = init.clone();
    let mut iterations = 0u64;
    let mut grad = obj.gradient(&phi, meter)?;
    for step in 0..steps {
        phi.axpy(-lr, &grad, 1.0);
        check_finite(&phi, step + 1)?;
        iterations += 1;
        grad = grad_or_diverged(obj, &phi, step + 1, meter)?;
    }
    Ok(SolveResult {
        grad_norm: grad.norm(),
        phi,
        iterations,
        grad_evals: meter.grad_evals() - start_grads,
        hvps: 0,
        line_search_exhausted: false,
    })
}

/// Nesterov accelerated gradient descent for mu-strongly convex, beta-smooth
/// G with the constant-momentum schedule. Stops early once
/// ||grad G|| <= mu * delta, which certifies ||phi - phi*|| <= delta.
pub fn solve_agd(
    obj: &InnerObjective,
    init: &DVector<f64>,
    mu: f64,
    beta: f64,
    steps: u64,
    target_delta: Option<f64>,
    meter: &Ledger,
) -> Result<SolveResult> {
    if !(mu > 0.0 && beta >= mu && beta.is_finite()) {
        return Err(Error::Config(format!(
            "accelerated gradient needs 0 < mu <= beta, got mu={mu} beta={beta}"
        )));
    }
    let start_grads = meter.grad_evals();
    let kappa = beta / mu;
    let momentum = (kappa.sqrt() - 1.0) / (kappa.sqrt() + 1.0);
    let stop = target_delta.map(|d| mu * d);

    let mut x = init.clone();
    let mut y = init.clone();
    let mut iterations = 0u64;
    let mut grad = obj.gradient(&y, meter)?;
    for step in 0..steps {
        if let Some(s) = stop {
            // The gradient at x certifies the distance bound; at the first
            // step y == x so the lookahead gradient doubles for it.
            let gx = if iterations == 0 {
                grad.norm()
            } else {
                obj.gradient(&x, meter)?.norm()
            };
            if gx <= s {
                break;
            }
        }
        let x_next = &y - &grad * (1.0 / beta);
        y = &x_next + (&x_next - &x) * momentum;
        x = x_next;
        check_finite(&x, step + 1)?;
        iterations += 1;
        grad = grad_or_diverged(obj, &y, step + 1, meter)?;
    }
    let final_grad = obj.gradient(&x, meter)?;
    Ok(SolveResult {
        grad_norm: final_grad.norm(),
        phi: x,
        iterations,
        grad_evals: meter.grad_evals() - start_grads,
        hvps: 0,
        line_search_exhausted: false,
    })
}

/// Backtracking Armijo line search on G along a descent direction. Returns
/// the accepted step size, or the pair (best step, true) when the backtrack
/// budget runs out without satisfying sufficient decrease.
pub fn line_search(
    obj: &InnerObjective,
    phi: &DVector<f64>,
    direction: &DVector<f64>,
    grad: &DVector<f64>,
    meter: &Ledger,
) -> Result<(f64, bool)> {
    let slope = grad.dot(direction);
    if slope >= 0.0 {
        return Err(Error::NotDescent { slope });
    }
    let f0 = obj.value(phi, meter)?;
    let mut alpha = 1.0;
    for _ in 0..=MAX_BACKTRACKS {
        let trial = phi + direction * alpha;
        let f = obj.value(&trial, meter)?;
        if f <= f0 + ARMIJO_C * alpha * slope {
            return Ok((alpha, false));
        }
        alpha *= BACKTRACK_SHRINK;
    }
    Ok((alpha / BACKTRACK_SHRINK, true))
}

/// Hessian-free Newton-CG: per repetition, CG approximates the Newton
/// direction from HVPs of G, then a backtracking line search picks the step.
pub fn solve_newton_cg(
    obj: &InnerObjective,
    init: &DVector<f64>,
    cg_steps: u64,
    repetitions: u64,
    meter: &Ledger,
) -> Result<SolveResult> {
    let start_grads = meter.grad_evals();
    let start_hvps = meter.hvps();
    let mut phi = init.clone();
    let mut iterations = 0u64;
    let mut exhausted = false;
    let mut grad = obj.gradient(&phi, meter)?;
    for step in 0..repetitions {
        if grad.norm() == 0.0 {
            break;
        }
        let rhs = -&grad;
        let direction = match conjugate_gradient(
            |v| obj.hvp(&phi, v, meter),
            &rhs,
            cg_steps,
            DEFAULT_RESIDUAL_TOL,
        ) {
            Ok(cg) if cg.iterations > 0 => cg.w,
            Ok(_) => break,
            // Indefinite curvature at this iterate: fall back to steepest
            // descent for the repetition, which is always a descent direction.
            Err(Error::NonPositiveCurvature { .. }) => rhs.clone(),
            Err(e) => return Err(e),
        };
        let (alpha, hit_limit) = line_search(obj, &phi, &direction, &grad, meter)?;
        if hit_limit {
            // Keep the best iterate found so far and flag the diagnostic.
            exhausted = true;
            break;
        }
        phi.axpy(alpha, &direction, 1.0);
        check_finite(&phi, step + 1)?;
        iterations += 1;
        grad = obj.gradient(&phi, meter)?;
    }
    Ok(SolveResult {
        grad_norm: grad.norm(),
        phi,
        iterations,
        grad_evals: meter.grad_evals() - start_grads,
        hvps: meter.hvps() - start_hvps,
        line_search_exhausted: exhausted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use crate::tasks::{make_quadratic_task, make_sinusoid_task};
    use nalgebra::DMatrix;

    fn meter() -> Ledger {
        Ledger::new()
    }

    fn quad_setup(
        d: usize,
        kappa: f64,
        _lambda: f64,
        seed: u64,
    ) -> (Model, crate::tasks::Task, DVector<f64>) {
        let task = make_quadratic_task(d, kappa, None, seed).unwrap();
        let model = Model::explicit_quadratic(d);
        let theta = model.init_params(seed + 100);
        (model, task, theta)
    }

    fn closed_form_phi(task: &crate::tasks::Task, theta: &DVector<f64>, lambda: f64) -> DVector<f64> {
        let q = task.quad_train.as_ref().unwrap();
        let d = q.dim();
        (&q.a + DMatrix::identity(d, d) * lambda)
            .lu()
            .solve(&(theta * lambda - &q.b))
            .unwrap()
    }

    #[test]
    fn gd_one_exact_newton_step_in_1d() {
        // 1-d quadratic: lr = 1/curvature lands on the minimizer in one step.
        let mut task = make_quadratic_task(1, 1.0, None, 3).unwrap();
        task.quad_train = Some(crate::tasks::QuadPayload {
            a: DMatrix::from_element(1, 1, 3.0),
            b: DVector::from_element(1, -6.0),
        });
        let model = Model::explicit_quadratic(1);
        let theta = DVector::from_element(1, 0.0);
        let lambda = 1.0;
        let obj = InnerObjective::new(&model, &task, theta.clone(), lambda).unwrap();
        let out = solve_gd(&obj, &theta, 1.0 / (3.0 + lambda), 1, &meter()).unwrap();
        let phi_star = closed_form_phi(&task, &theta, lambda);
        assert!((out.phi - phi_star).norm() < 1e-12);
    }

    #[test]
    fn gd_reaches_closed_form_solution() {
        let lambda = 5.0;
        let (model, task, theta) = quad_setup(50, 50.0, lambda, 7);
        let q = task.quad_train.as_ref().unwrap();
        let eigs = q.a.clone().symmetric_eigen().eigenvalues;
        let (mu, beta) = (lambda + eigs.min(), lambda + eigs.max());
        let obj = InnerObjective::new(&model, &task, theta.clone(), lambda).unwrap();
        let out = solve_gd(&obj, &theta, 2.0 / (mu + beta), 400, &meter()).unwrap();
        let phi_star = closed_form_phi(&task, &theta, lambda);
        assert!(
            (out.phi - phi_star).norm() < 1e-6,
            "grad norm left {}",
            out.grad_norm
        );
    }

    #[test]
    fn gd_zero_steps_returns_init() {
        let (model, task, theta) = quad_setup(4, 10.0, 2.0, 1);
        let obj = InnerObjective::new(&model, &task, theta.clone(), 2.0).unwrap();
        let out = solve_gd(&obj, &theta, 0.1, 0, &meter()).unwrap();
        assert_eq!(out.phi, theta);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn gd_counts_one_gradient_per_step_plus_final() {
        let (model, task, theta) = quad_setup(4, 10.0, 2.0, 2);
        let obj = InnerObjective::new(&model, &task, theta.clone(), 2.0).unwrap();
        let out = solve_gd(&obj, &theta, 0.05, 7, &meter()).unwrap();
        assert_eq!(out.iterations, 7);
        assert_eq!(out.grad_evals, 8);
    }

    #[test]
    fn gd_diverges_with_huge_learning_rate() {
        let (model, task, theta) = quad_setup(6, 50.0, 5.0, 4);
        let obj = InnerObjective::new(&model, &task, theta.clone(), 5.0).unwrap();
        let err = solve_gd(&obj, &theta, 1e6, 2000, &meter()).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn agd_identity_hessian_within_bound() {
        // A = I so G has kappa = 1 and AGD is plain GD with lr 1/beta.
        let mut task = make_quadratic_task(5, 1.0, None, 6).unwrap();
        task.quad_train = Some(crate::tasks::QuadPayload {
            a: DMatrix::identity(5, 5),
            b: DVector::from_element(5, 0.3),
        });
        let lambda = 1.0;
        let model = Model::explicit_quadratic(5);
        let theta = model.init_params(8);
        let obj = InnerObjective::new(&model, &task, theta.clone(), lambda).unwrap();
        let phi_star = closed_form_phi(&task, &theta, lambda);
        let delta = 1e-6;
        // Closed-form bound at kappa = 1: 2 * ln(2 ||x*|| / delta) iterations
        // measured from the zero init.
        let bound = (2.0 * ((2.0 * phi_star.norm() / delta).ln())).ceil() as u64;
        let init = DVector::zeros(5);
        let out = solve_agd(&obj, &init, 2.0, 2.0, 10_000, Some(delta), &meter()).unwrap();
        assert!((&out.phi - &phi_star).norm() <= delta);
        assert!(out.iterations <= bound, "{} > {}", out.iterations, bound);
    }

    #[test]
    fn agd_kappa_50_within_iteration_bound() {
        let lambda = 5.0;
        let (model, task, theta) = quad_setup(30, 50.0, lambda, 9);
        let q = task.quad_train.as_ref().unwrap();
        let eigs = q.a.clone().symmetric_eigen().eigenvalues;
        let (mu, beta) = (lambda + eigs.min(), lambda + eigs.max());
        let kappa = beta / mu;
        let obj = InnerObjective::new(&model, &task, theta.clone(), lambda).unwrap();
        let phi_star = closed_form_phi(&task, &theta, lambda);
        let delta = 1e-6;
        let init = DVector::zeros(theta.len());
        let bound =
            (2.0 * kappa.sqrt() * (2.0 * kappa * phi_star.norm() / delta).ln()).ceil() as u64;
        let out = solve_agd(&obj, &init, mu, beta, 100_000, Some(delta), &meter()).unwrap();
        assert!(
            (&out.phi - &phi_star).norm() <= delta,
            "distance {}",
            (&out.phi - &phi_star).norm()
        );
        assert!(out.iterations <= bound, "{} > {}", out.iterations, bound);
    }

    #[test]
    fn agd_converged_init_returns_immediately() {
        let lambda = 2.0;
        let (model, task, theta) = quad_setup(4, 10.0, lambda, 12);
        let q = task.quad_train.as_ref().unwrap();
        let eigs = q.a.clone().symmetric_eigen().eigenvalues;
        let (mu, beta) = (lambda + eigs.min(), lambda + eigs.max());
        let obj = InnerObjective::new(&model, &task, theta.clone(), lambda).unwrap();
        let phi_star = closed_form_phi(&task, &theta, lambda);
        let out = solve_agd(&obj, &phi_star, mu, beta, 100, Some(1.0), &meter()).unwrap();
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn agd_invalid_constants_rejected() {
        let (model, task, theta) = quad_setup(3, 5.0, 1.0, 2);
        let obj = InnerObjective::new(&model, &task, theta.clone(), 1.0).unwrap();
        assert!(solve_agd(&obj, &theta, 0.0, 1.0, 10, None, &meter()).is_err());
        assert!(solve_agd(&obj, &theta, 2.0, 1.0, 10, None, &meter()).is_err());
    }

    #[test]
    fn newton_cg_exact_on_quadratic_in_one_repetition() {
        let lambda = 2.0;
        let (model, task, theta) = quad_setup(4, 20.0, lambda, 15);
        let obj = InnerObjective::new(&model, &task, theta.clone(), lambda).unwrap();
        // d <= cg steps so CG computes the exact Newton direction.
        let out = solve_newton_cg(&obj, &theta, 5, 1, &meter()).unwrap();
        let phi_star = closed_form_phi(&task, &theta, lambda);
        assert!(
            (out.phi - phi_star).norm() < 1e-8,
            "grad norm {}",
            out.grad_norm
        );
        assert!(!out.line_search_exhausted);
    }

    #[test]
    fn newton_cg_stationary_init_is_a_fixed_point() {
        let lambda = 3.0;
        let (model, task, theta) = quad_setup(4, 10.0, lambda, 18);
        let obj = InnerObjective::new(&model, &task, theta.clone(), lambda).unwrap();
        let phi_star = closed_form_phi(&task, &theta, lambda);
        // Gradient there is ~0 but not exactly; verify no movement when exact.
        let grad = obj.gradient(&phi_star, &meter()).unwrap();
        assert!(grad.norm() < 1e-9);
        let out = solve_newton_cg(&obj, &phi_star, 5, 3, &meter()).unwrap();
        assert!((out.phi - phi_star).norm() < 1e-8);
    }

    #[test]
    fn newton_cg_monotone_on_sinusoid_mlp() {
        let task = make_sinusoid_task(10, 40).unwrap();
        let model = Model::mlp(1, vec![8], 1);
        let theta = model.init_params(5);
        let obj = InnerObjective::new(&model, &task, theta.clone(), 2.0).unwrap();
        let m = meter();
        let mut phi = theta.clone();
        let mut prev = obj.value(&phi, &m).unwrap();
        for _ in 0..3 {
            let out = solve_newton_cg(&obj, &phi, 5, 1, &m).unwrap();
            let val = obj.value(&out.phi, &m).unwrap();
            assert!(val <= prev + 1e-12, "objective rose: {prev} -> {val}");
            prev = val;
            phi = out.phi;
        }
    }

    #[test]
    fn line_search_accepts_newton_step_in_1d() {
        let mut task = make_quadratic_task(1, 1.0, None, 3).unwrap();
        task.quad_train = Some(crate::tasks::QuadPayload {
            a: DMatrix::from_element(1, 1, 2.0),
            b: DVector::from_element(1, 1.0),
        });
        let model = Model::explicit_quadratic(1);
        let obj = InnerObjective::new(&model, &task, DVector::zeros(1), 1.0).unwrap();
        let phi = DVector::from_element(1, 1.0);
        let m = meter();
        let grad = obj.gradient(&phi, &m).unwrap();
        // Exact Newton direction: -(A + lambda)^{-1} grad.
        let dir = -&grad / 3.0;
        let (alpha, flag) = line_search(&obj, &phi, &dir, &grad, &m).unwrap();
        assert_eq!(alpha, 1.0);
        assert!(!flag);
    }

    #[test]
    fn line_search_rejects_zero_and_ascent_directions() {
        let (model, task, theta) = quad_setup(3, 5.0, 1.0, 2);
        let obj = InnerObjective::new(&model, &task, theta.clone(), 1.0).unwrap();
        let m = meter();
        let phi = &theta + DVector::from_element(3, 1.0);
        let grad = obj.gradient(&phi, &m).unwrap();
        assert!(matches!(
            line_search(&obj, &phi, &DVector::zeros(3), &grad, &m),
            Err(Error::NotDescent { .. })
        ));
        assert!(matches!(
            line_search(&obj, &phi, &grad.clone(), &grad, &m),
            Err(Error::NotDescent { .. })
        ));
    }

    #[test]
    fn line_search_backtracks_on_overshoot() {
        // Full gradient step with an exaggerated direction overshoots a
        // narrow quadratic; Armijo must shrink alpha below 1.
        let mut task = make_quadratic_task(1, 1.0, None, 3).unwrap();
        task.quad_train = Some(crate::tasks::QuadPayload {
            a: DMatrix::from_element(1, 1, 100.0),
            b: DVector::zeros(1),
        });
        let model = Model::explicit_quadratic(1);
        let obj = InnerObjective::new(&model, &task, DVector::zeros(1), 1.0).unwrap();
        let phi = DVector::from_element(1, 1.0);
        let m = meter();
        let grad = obj.gradient(&phi, &m).unwrap();
        let dir = -&grad;
        let (alpha, flag) = line_search(&obj, &phi, &dir, &grad, &m).unwrap();
        assert!(alpha < 1.0);
        assert!(!flag);
        let f0 = obj.value(&phi, &m).unwrap();
        let f1 = obj.value(&(&phi + &dir * alpha), &m).unwrap();
        assert!(f1 < f0);
    }

    #[test]
    fn all_solvers_shrink_gradient_norm() {
        let lambda = 2.0;
        let (model, task, theta) = quad_setup(8, 25.0, lambda, 23);
        let q = task.quad_train.as_ref().unwrap();
        let eigs = q.a.clone().symmetric_eigen().eigenvalues;
        let (mu, beta) = (lambda + eigs.min(), lambda + eigs.max());
        let obj = InnerObjective::new(&model, &task, theta.clone(), lambda).unwrap();
        let m = meter();
        let init = DVector::zeros(8);
        let g0 = obj.gradient(&init, &m).unwrap().norm();
        for budget in [
            InnerBudget::gd(2.0 / (mu + beta), 20),
            InnerBudget::agd(mu, beta, 20, 1e-9),
            InnerBudget::newton_cg(8, 2),
        ] {
            let out = solve(&obj, &init, &budget, &m).unwrap();
            assert!(out.grad_norm <= g0, "{:?}", budget.method);
        }
    }
}
