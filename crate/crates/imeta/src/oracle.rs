//! Ground truth for verification: closed-form inner solutions and
//! meta-gradients on quadratic tasks, dense implicit Jacobians at small
//! dimension, a finite-difference meta-gradient, and checkers for the
//! iteration-count and error bounds the solvers are expected to satisfy.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, Split};
use crate::tasks::Task;
use crate::telemetry::Ledger;

/// Dense oracle operations are capped here to keep verification runs fast.
pub const MAX_DENSE_DIM: usize = 200;

/// Regularity constants of one task instance. Exact from spectra on
/// quadratics; caller-supplied estimates anywhere else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConstants {
    /// Gradient-norm bound of the test loss at the inner solution.
    pub b: f64,
    /// Smoothness (largest Hessian eigenvalue magnitude) of the test loss.
    pub l: f64,
    /// Hessian Lipschitz constant of the train loss; zero on quadratics.
    pub rho: f64,
    /// Strong convexity of the proximal inner objective.
    pub mu: f64,
    /// Smoothness of the proximal inner objective.
    pub beta: f64,
    pub kappa: f64,
    /// Norm bound on the exact inner solution.
    pub d_diam: f64,
    pub lambda: f64,
}

impl AnalysisConstants {
    pub fn validate(&self) -> Result<()> {
        let ok = self.mu > 0.0
            && self.beta >= self.mu
            && self.kappa >= 1.0
            && self.b >= 0.0
            && self.l >= 0.0
            && self.rho >= 0.0
            && self.d_diam >= 0.0
            && self.lambda > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid analysis constants {self:?}")))
        }
    }

    /// Exact constants for a quadratic task at the given meta-parameters.
    /// The gradient bound is evaluated at the exact inner solution, the
    /// tightest choice that still satisfies the error-bound hypotheses.
    pub fn from_quadratic(task: &Task, theta: &DVector<f64>, lambda: f64) -> Result<Self> {
        let train = task
            .quad_train
            .as_ref()
            .ok_or_else(|| Error::UnsupportedKind("analysis constants need a quadratic task".into()))?;
        let test = task
            .quad_test
            .as_ref()
            .ok_or_else(|| Error::UnsupportedKind("analysis constants need a quadratic test split".into()))?;
        let train_eigs = train.a.clone().symmetric_eigen().eigenvalues;
        let test_eigs = test.a.clone().symmetric_eigen().eigenvalues;
        let mu = lambda + train_eigs.min();
        let beta = lambda + train_eigs.max();
        let l = test_eigs.iter().fold(0.0f64, |m, &e| m.max(e.abs()));
        let phi_star = exact_inner_solution(task, theta, lambda)?;
        let b = test.gradient(&phi_star).norm();
        let out = Self {
            b,
            l,
            rho: 0.0,
            mu,
            beta,
            kappa: beta / mu,
            d_diam: phi_star.norm(),
            lambda,
        };
        out.validate()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactMetaGrad {
    pub grad: DVector<f64>,
    pub phi_star: DVector<f64>,
}

fn shifted_train_matrix(task: &Task, lambda: f64) -> Result<DMatrix<f64>> {
    let q = task
        .quad_train
        .as_ref()
        .ok_or_else(|| Error::UnsupportedKind("closed forms need a quadratic train payload".into()))?;
    let d = q.dim();
    Ok(&q.a + DMatrix::identity(d, d) * lambda)
}

/// Closed-form minimizer of the proximal inner objective on a quadratic
/// task: the solution of (A + lambda I) phi = lambda theta - b.
pub fn exact_inner_solution(task: &Task, theta: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let q = task.quad_train.as_ref().ok_or_else(|| {
        Error::UnsupportedKind("closed forms need a quadratic train payload".into())
    })?;
    let shifted = shifted_train_matrix(task, lambda)?;
    shifted
        .lu()
        .solve(&(theta * lambda - &q.b))
        .ok_or_else(|| Error::Singular("curvature-shifted train matrix".into()))
}

/// Closed-form total derivative of the test loss through the exact inner
/// solution: lambda (A + lambda I)^{-1} applied to the test gradient.
pub fn exact_meta_gradient(task: &Task, theta: &DVector<f64>, lambda: f64) -> Result<ExactMetaGrad> {
    let test = task.quad_test.as_ref().ok_or_else(|| {
        Error::UnsupportedKind("closed forms need a quadratic test payload".into())
    })?;
    let phi_star = exact_inner_solution(task, theta, lambda)?;
    let test_grad = test.gradient(&phi_star);
    let shifted = shifted_train_matrix(task, lambda)?;
    let grad = shifted
        .lu()
        .solve(&(test_grad * lambda))
        .ok_or_else(|| Error::Singular("curvature-shifted train matrix".into()))?;
    Ok(ExactMetaGrad { grad, phi_star })
}

/// Dense inverse of (I + Hessian/lambda) at phi, the Jacobian of the exact
/// inner solution with respect to theta. The Hessian is assembled one column
/// per HVP, so this works for any differentiable train loss, not just the
/// quadratic payloads.
pub fn implicit_jacobian_dense(
    model: &Model,
    task: &Task,
    phi: &DVector<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let d = phi.len();
    if d > MAX_DENSE_DIM {
        return Err(Error::Config(format!(
            "dense Jacobian capped at dimension {MAX_DENSE_DIM}, got {d}"
        )));
    }
    let graph = model.graph(task, Split::Train)?;
    let meter = Ledger::new();
    let mut system = DMatrix::identity(d, d);
    for j in 0..d {
        let mut e = DVector::zeros(d);
        e[j] = 1.0;
        let col = graph.hessian_vector_product(phi, &task.train, &e, &meter)?;
        for i in 0..d {
            system[(i, j)] += col[i] / lambda;
        }
    }
    system
        .try_inverse()
        .ok_or_else(|| Error::Singular("identity-plus-scaled-Hessian system".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdMetaGrad {
    pub grad: DVector<f64>,
    /// Set when the inner-solve accuracy is too coarse for the requested h,
    /// in which case the central-difference quotient is unreliable.
    pub accuracy_warning: bool,
}

/// Central finite differences of theta -> test_loss(exact inner solution).
/// Uses the closed-form inner solve, so it is an oracle fully independent of
/// the implicit-equation route.
pub fn finite_difference_meta_gradient(
    task: &Task,
    theta: &DVector<f64>,
    lambda: f64,
    h: f64,
    inner_accuracy: Option<f64>,
) -> Result<FdMetaGrad> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Config(format!("step size must be positive, got {h}")));
    }
    let test = task.quad_test.as_ref().ok_or_else(|| {
        Error::UnsupportedKind("finite differences need a quadratic test payload".into())
    })?;
    let loss_at = |t: &DVector<f64>| -> Result<f64> {
        let phi = exact_inner_solution(task, t, lambda)?;
        Ok(test.value(&phi))
    };
    let mut grad = DVector::zeros(theta.len());
    for i in 0..theta.len() {
        let mut t = theta.clone();
        t[i] += h;
        let up = loss_at(&t)?;
        t[i] -= 2.0 * h;
        let down = loss_at(&t)?;
        grad[i] = (up - down) / (2.0 * h);
    }
    let accuracy_warning = inner_accuracy.is_some_and(|acc| acc > h * h);
    Ok(FdMetaGrad {
        grad,
        accuracy_warning,
    })
}

/// Iteration count sufficient for accelerated gradient descent to bring a
/// kappa-conditioned strongly convex problem within delta of its minimizer,
/// starting ||x*|| away: ceil(2 sqrt(kappa) log(2 kappa ||x*|| / delta)),
/// clamped at zero when the log argument is already below one.
pub fn agd_iteration_bound(kappa: f64, delta: f64, x_star_norm: f64) -> Result<u64> {
    if kappa < 1.0 || delta <= 0.0 || x_star_norm < 0.0 {
        return Err(Error::Config(format!(
            "iteration bound needs kappa >= 1, delta > 0, ||x*|| >= 0; got {kappa}, {delta}, {x_star_norm}"
        )));
    }
    let arg = 2.0 * kappa * x_star_norm / delta;
    if arg <= 1.0 {
        return Ok(0);
    }
    Ok((2.0 * kappa.sqrt() * arg.ln()).ceil() as u64)
}

/// Error bound for the implicitly computed meta-gradient given inner-solve
/// accuracy delta and linear-system accuracy delta': B1 * delta + delta'
/// with B1 = 2 lambda rho B / mu^2 + lambda L / mu. Requires the hypothesis
/// delta < mu / (2 rho) when the train Hessian actually varies (rho > 0).
pub fn implicit_gradient_error_bound(consts: &AnalysisConstants, delta: f64, delta_prime: f64) -> Result<f64> {
    consts.validate()?;
    if delta < 0.0 || delta_prime < 0.0 {
        return Err(Error::Config(format!(
            "accuracies must be nonnegative, got {delta}, {delta_prime}"
        )));
    }
    if consts.rho > 0.0 {
        let limit = consts.mu / (2.0 * consts.rho);
        if delta >= limit {
            return Err(Error::BoundHypothesis { delta, limit });
        }
    }
    let b1 = 2.0 * consts.lambda * consts.rho * consts.b / (consts.mu * consts.mu)
        + consts.lambda * consts.l / consts.mu;
    Ok(b1 * delta + delta_prime)
}

/// Upper bound on the number of per-task meta-gradient computations needed
/// for batch outer gradient descent on an L_F-smooth outer objective F to
/// reach ||grad F|| <= eps: 4 M L_F (F(0) - min F) / eps^2.
pub fn stationary_point_call_bound(
    tasks: u64,
    l_f: f64,
    f_at_start: f64,
    f_min: f64,
    eps: f64,
) -> Result<f64> {
    if l_f <= 0.0 || eps <= 0.0 || f_at_start < f_min {
        return Err(Error::Config(format!(
            "call bound needs L_F > 0, eps > 0, F(0) >= min F; got {l_f}, {eps}, {f_at_start} vs {f_min}"
        )));
    }
    Ok(4.0 * tasks as f64 * l_f * (f_at_start - f_min) / (eps * eps))
}

/// A fixed set of quadratic tasks whose averaged outer objective
/// F(theta) = mean_i test_loss_i(exact inner solution_i(theta)) is itself an
/// explicitly computable quadratic in theta.
pub struct QuadraticFamily {
    pub tasks: Vec<Task>,
    pub lambda: f64,
}

impl QuadraticFamily {
    pub fn new(tasks: Vec<Task>, lambda: f64) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Config("quadratic family needs at least one task".into()));
        }
        if lambda <= 0.0 {
            return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
        }
        for t in &tasks {
            if !t.is_quadratic() {
                return Err(Error::UnsupportedKind(
                    "quadratic family requires quadratic payloads".into(),
                ));
            }
        }
        Ok(Self { tasks, lambda })
    }

    pub fn dim(&self) -> usize {
        self.tasks[0].quad_train.as_ref().unwrap().dim()
    }

    pub fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        let mut total = 0.0;
        for task in &self.tasks {
            let phi = exact_inner_solution(task, theta, self.lambda)?;
            total += task.quad_test.as_ref().unwrap().value(&phi);
        }
        Ok(total / self.tasks.len() as f64)
    }

    pub fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let mut total = DVector::zeros(self.dim());
        for task in &self.tasks {
            total += exact_meta_gradient(task, theta, self.lambda)?.grad;
        }
        Ok(total / self.tasks.len() as f64)
    }

    /// Constant Hessian of F: the average over tasks of
    /// lambda^2 S A_test S with S = (A_train + lambda I)^{-1}.
    pub fn hessian(&self) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let mut total = DMatrix::zeros(d, d);
        for task in &self.tasks {
            let shifted = shifted_train_matrix(task, self.lambda)?;
            let s = shifted
                .try_inverse()
                .ok_or_else(|| Error::Singular("curvature-shifted train matrix".into()))?;
            let a_test = &task.quad_test.as_ref().unwrap().a;
            total += &s * a_test * &s * (self.lambda * self.lambda);
        }
        Ok(total / self.tasks.len() as f64)
    }

    /// Smoothness constant of F: spectral radius of its constant Hessian.
    pub fn smoothness(&self) -> Result<f64> {
        let eigs = self.hessian()?.symmetric_eigen().eigenvalues;
        Ok(eigs.iter().fold(0.0f64, |m, &e| m.max(e.abs())))
    }

    /// Global minimum of F, via the stationarity condition of the explicit
    /// quadratic. Requires a positive definite family Hessian.
    pub fn minimum(&self) -> Result<(DVector<f64>, f64)> {
        let h = self.hessian()?;
        let g0 = self.gradient(&DVector::zeros(self.dim()))?;
        let theta_star = h
            .lu()
            .solve(&(-g0))
            .ok_or_else(|| Error::Singular("family outer Hessian".into()))?;
        let fmin = self.value(&theta_star)?;
        Ok((theta_star, fmin))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{make_quadratic_task, sample_tasks, DistKind, QuadPayload, TaskDistribution};

    fn zero_a_task(d: usize, b: DVector<f64>) -> Task {
        let mut task = make_quadratic_task(d, 1.0, None, 1).unwrap();
        task.quad_train = Some(QuadPayload {
            a: DMatrix::zeros(d, d),
            b,
        });
        task
    }

    #[test]
    fn inner_solution_linear_loss_is_proximal_step() {
        let b = DVector::from_vec(vec![2.0, -4.0]);
        let task = zero_a_task(2, b.clone());
        let theta = DVector::from_vec(vec![1.0, 1.0]);
        let lambda = 2.0;
        let phi = exact_inner_solution(&task, &theta, lambda).unwrap();
        assert!((phi - (&theta - &b / lambda)).norm() < 1e-14);
    }

    #[test]
    fn inner_solution_zero_inputs_gives_zero() {
        let mut task = make_quadratic_task(3, 5.0, None, 2).unwrap();
        task.quad_train.as_mut().unwrap().b = DVector::zeros(3);
        let phi = exact_inner_solution(&task, &DVector::zeros(3), 1.0).unwrap();
        assert!(phi.norm() < 1e-14);
    }

    #[test]
    fn inner_solution_is_stationary() {
        use crate::model::{InnerObjective, Model};
        let task = make_quadratic_task(6, 25.0, None, 4).unwrap();
        let model = Model::explicit_quadratic(6);
        let theta = model.init_params(7);
        let lambda = 2.0;
        let phi = exact_inner_solution(&task, &theta, lambda).unwrap();
        let obj = InnerObjective::new(&model, &task, theta, lambda).unwrap();
        let g = obj.gradient(&phi, &Ledger::new()).unwrap();
        assert!(g.norm() < 1e-10);
    }

    #[test]
    fn meta_gradient_zero_test_gradient_is_zero() {
        let mut task = make_quadratic_task(3, 4.0, None, 5).unwrap();
        task.quad_test = Some(QuadPayload {
            a: DMatrix::zeros(3, 3),
            b: DVector::zeros(3),
        });
        let out = exact_meta_gradient(&task, &DVector::from_element(3, 0.7), 2.0).unwrap();
        assert!(out.grad.norm() < 1e-14);
    }

    #[test]
    fn meta_gradient_zero_train_hessian_is_identity_jacobian() {
        let task = zero_a_task(2, DVector::from_vec(vec![1.0, -1.0]));
        let theta = DVector::from_vec(vec![0.5, 0.5]);
        let lambda = 3.0;
        let out = exact_meta_gradient(&task, &theta, lambda).unwrap();
        let test = task.quad_test.as_ref().unwrap();
        let direct = test.gradient(&out.phi_star);
        assert!((out.grad - direct).norm() < 1e-12);
    }

    #[test]
    fn meta_gradient_matches_finite_differences() {
        let task = make_quadratic_task(5, 10.0, None, 42).unwrap();
        let model = Model::explicit_quadratic(5);
        let theta = model.init_params(11);
        let lambda = 2.0;
        let exact = exact_meta_gradient(&task, &theta, lambda).unwrap();
        let fd = finite_difference_meta_gradient(&task, &theta, lambda, 1e-5, None).unwrap();
        let rel = (&exact.grad - &fd.grad).norm() / exact.grad.norm();
        assert!(rel < 1e-6, "relative error {rel}");
        assert!(!fd.accuracy_warning);
    }

    #[test]
    fn finite_differences_converge_second_order() {
        let task = make_quadratic_task(4, 8.0, None, 13).unwrap();
        let model = Model::explicit_quadratic(4);
        let theta = model.init_params(14);
        let lambda = 1.5;
        let exact = exact_meta_gradient(&task, &theta, lambda).unwrap().grad;
        let err = |h: f64| {
            let fd = finite_difference_meta_gradient(&task, &theta, lambda, h, None)
                .unwrap()
                .grad;
            (&fd - &exact).norm()
        };
        // On an exactly quadratic map the central difference is exact up to
        // rounding; use a cubic perturbation via a larger h pair instead:
        // quadratic F means both errors sit at rounding level.
        let (e1, e2) = (err(1e-3), err(5e-4));
        assert!(e2 <= e1.max(1e-9));
    }

    #[test]
    fn fd_constant_test_loss_gives_zero() {
        let mut task = make_quadratic_task(3, 4.0, None, 5).unwrap();
        task.quad_test = Some(QuadPayload {
            a: DMatrix::zeros(3, 3),
            b: DVector::zeros(3),
        });
        let fd =
            finite_difference_meta_gradient(&task, &DVector::from_element(3, 1.0), 2.0, 1e-5, None)
                .unwrap();
        assert!(fd.grad.norm() < 1e-12);
    }

    #[test]
    fn fd_accuracy_warning_flag() {
        let task = make_quadratic_task(2, 2.0, None, 3).unwrap();
        let theta = DVector::zeros(2);
        let fd = finite_difference_meta_gradient(&task, &theta, 1.0, 1e-5, Some(1e-6)).unwrap();
        assert!(fd.accuracy_warning);
    }

    #[test]
    fn dense_jacobian_zero_hessian_is_identity() {
        let task = zero_a_task(3, DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let model = Model::explicit_quadratic(3);
        let j = implicit_jacobian_dense(&model, &task, &DVector::zeros(3), 2.0).unwrap();
        assert!((j - DMatrix::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn dense_jacobian_matches_algebraic_identity() {
        let task = make_quadratic_task(6, 15.0, None, 21).unwrap();
        let model = Model::explicit_quadratic(6);
        let lambda = 2.5;
        let phi = model.init_params(22);
        let j = implicit_jacobian_dense(&model, &task, &phi, lambda).unwrap();
        let shifted = shifted_train_matrix(&task, lambda).unwrap();
        let expected = shifted.try_inverse().unwrap() * lambda;
        assert!((j - expected).norm() < 1e-10);
    }

    #[test]
    fn dense_jacobian_matches_perturb_and_resolve() {
        let task = make_quadratic_task(5, 12.0, None, 31).unwrap();
        let model = Model::explicit_quadratic(5);
        let lambda = 2.0;
        let theta = model.init_params(32);
        let phi = exact_inner_solution(&task, &theta, lambda).unwrap();
        let j = implicit_jacobian_dense(&model, &task, &phi, lambda).unwrap();
        let h = 1e-6;
        let mut numeric = DMatrix::zeros(5, 5);
        for col in 0..5 {
            let mut t = theta.clone();
            t[col] += h;
            let up = exact_inner_solution(&task, &t, lambda).unwrap();
            t[col] -= 2.0 * h;
            let down = exact_inner_solution(&task, &t, lambda).unwrap();
            let diff = (up - down) / (2.0 * h);
            numeric.set_column(col, &diff);
        }
        let rel = (&j - &numeric).norm() / j.norm();
        assert!(rel < 1e-5, "relative Frobenius error {rel}");
    }

    #[test]
    fn dense_jacobian_dimension_cap() {
        let task = make_quadratic_task(2, 2.0, None, 1).unwrap();
        let model = Model::explicit_quadratic(2);
        let phi = DVector::zeros(MAX_DENSE_DIM + 1);
        assert!(implicit_jacobian_dense(&model, &task, &phi, 1.0).is_err());
    }

    #[test]
    fn iteration_bound_direct_substitutions() {
        // kappa = 1, ||x*|| = delta: bound is ceil(2 ln 2).
        assert_eq!(agd_iteration_bound(1.0, 0.5, 0.5).unwrap(), 2);
        // Independent arithmetic for kappa = 50, ||x*|| = 10, delta = 1e-6.
        let expected = (2.0 * 50.0f64.sqrt() * (2.0f64 * 50.0 * 10.0 / 1e-6).ln()).ceil() as u64;
        assert_eq!(agd_iteration_bound(50.0, 1e-6, 10.0).unwrap(), expected);
        // Already within tolerance: clamped to zero.
        assert_eq!(agd_iteration_bound(2.0, 1.0, 0.1).unwrap(), 0);
    }

    #[test]
    fn error_bound_quadratic_case() {
        let consts = AnalysisConstants {
            b: 1.0,
            l: 4.0,
            rho: 0.0,
            mu: 2.0,
            beta: 8.0,
            kappa: 4.0,
            d_diam: 1.0,
            lambda: 2.0,
        };
        // rho = 0: bound reduces to (lambda L / mu) delta + delta'.
        let got = implicit_gradient_error_bound(&consts, 1e-4, 1e-6).unwrap();
        assert!((got - (2.0 * 4.0 / 2.0 * 1e-4 + 1e-6)).abs() < 1e-18);
        assert_eq!(implicit_gradient_error_bound(&consts, 0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn error_bound_hypothesis_violation() {
        let consts = AnalysisConstants {
            b: 1.0,
            l: 1.0,
            rho: 1.0,
            mu: 1.0,
            beta: 2.0,
            kappa: 2.0,
            d_diam: 1.0,
            lambda: 1.0,
        };
        // delta must stay below mu / (2 rho) = 0.5.
        assert!(matches!(
            implicit_gradient_error_bound(&consts, 0.6, 0.0),
            Err(Error::BoundHypothesis { .. })
        ));
        assert!(implicit_gradient_error_bound(&consts, 0.4, 0.0).is_ok());
    }

    #[test]
    fn constants_from_quadratic_are_exact() {
        let lambda = 2.0;
        let task = make_quadratic_task(8, 10.0, None, 55).unwrap();
        let theta = DVector::from_element(8, 0.3);
        let c = AnalysisConstants::from_quadratic(&task, &theta, lambda).unwrap();
        let eigs = task
            .quad_train
            .as_ref()
            .unwrap()
            .a
            .clone()
            .symmetric_eigen()
            .eigenvalues;
        assert!((c.mu - (lambda + eigs.min())).abs() < 1e-10);
        assert!((c.beta - (lambda + eigs.max())).abs() < 1e-10);
        assert!((c.kappa - c.beta / c.mu).abs() < 1e-12);
        assert_eq!(c.rho, 0.0);
    }

    #[test]
    fn family_gradient_matches_finite_differences() {
        let dist = TaskDistribution {
            kind: DistKind::Quadratic {
                dim: 4,
                kappa: 10.0,
                spectrum_levels: None,
            },
            base_seed: 9,
        };
        let tasks = sample_tasks(&dist, 4, 1).unwrap();
        let family = QuadraticFamily::new(tasks, 2.0).unwrap();
        let theta = DVector::from_vec(vec![0.2, -0.4, 0.1, 0.8]);
        let grad = family.gradient(&theta).unwrap();
        let h = 1e-6;
        let mut fd = DVector::zeros(4);
        for i in 0..4 {
            let mut t = theta.clone();
            t[i] += h;
            let up = family.value(&t).unwrap();
            t[i] -= 2.0 * h;
            let down = family.value(&t).unwrap();
            fd[i] = (up - down) / (2.0 * h);
        }
        assert!((&grad - &fd).norm() / grad.norm() < 1e-7);
    }

    #[test]
    fn family_minimum_is_stationary_and_minimal() {
        let dist = TaskDistribution {
            kind: DistKind::Quadratic {
                dim: 5,
                kappa: 8.0,
                spectrum_levels: None,
            },
            base_seed: 77,
        };
        let tasks = sample_tasks(&dist, 6, 3).unwrap();
        let family = QuadraticFamily::new(tasks, 2.0).unwrap();
        let (theta_star, fmin) = family.minimum().unwrap();
        assert!(family.gradient(&theta_star).unwrap().norm() < 1e-9);
        for seed in 0..4u64 {
            let probe = &theta_star
                + Model::explicit_quadratic(5).init_params(seed) * 0.1;
            assert!(family.value(&probe).unwrap() >= fmin - 1e-12);
        }
    }

    #[test]
    fn call_bound_arithmetic_and_validation() {
        let got = stationary_point_call_bound(8, 2.0, 5.0, 1.0, 1e-2).unwrap();
        assert!((got - 4.0 * 8.0 * 2.0 * 4.0 / 1e-4).abs() < 1e-6);
        assert!(stationary_point_call_bound(8, 0.0, 5.0, 1.0, 1e-2).is_err());
        assert!(stationary_point_call_bound(8, 1.0, 0.0, 1.0, 1e-2).is_err());
    }
}
