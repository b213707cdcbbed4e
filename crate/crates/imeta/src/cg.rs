//! Matrix-free conjugate gradient for symmetric positive definite systems.
//!
//! The implicit meta-gradient solve only touches its curvature matrix through
//! matrix-vector products, so the operator is an opaque closure here.

use nalgebra::DVector;

use crate::error::{Error, Result};

pub const DEFAULT_RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CgResult {
    pub w: DVector<f64>,
    pub iterations: u64,
    pub residual_norm: f64,
    pub matvecs: u64,
}

/// Solves M w = rhs starting from w = 0, stopping after `max_iters`
/// iterations or once the recurrence residual norm drops to `residual_tol`.
///
/// Truncation is deliberate: a small fixed iteration budget yields an
/// approximate solve whose error the surrounding theory bounds. Negative or
/// zero curvature p'Mp along a search direction means the operator is not
/// positive definite and is reported as an error.
pub fn conjugate_gradient<F>(
    mut matvec: F,
    rhs: &DVector<f64>,
    max_iters: u64,
    residual_tol: f64,
) -> Result<CgResult>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let n = rhs.len();
    let mut w = DVector::zeros(n);
    // From w = 0 the initial residual is the right-hand side itself.
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rs = r.norm_squared();
    let mut matvecs = 0u64;
    let mut iterations = 0u64;

    while iterations < max_iters && rs.sqrt() > residual_tol {
        let mp = matvec(&p)?;
        matvecs += 1;
        let curvature = p.dot(&mp);
        if curvature <= 0.0 {
            return Err(Error::NonPositiveCurvature { curvature });
        }
        let alpha = rs / curvature;
        w.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &mp, 1.0);
        let rs_next = r.norm_squared();
        let beta = rs_next / rs;
        p = &r + &p * beta;
        rs = rs_next;
        iterations += 1;
    }

    Ok(CgResult {
        w,
        iterations,
        residual_norm: rs.sqrt(),
        matvecs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_matvec(m: DMatrix<f64>) -> impl FnMut(&DVector<f64>) -> Result<DVector<f64>> {
        move |v| Ok(&m * v)
    }

    #[test]
    fn identity_converges_in_one_iteration() {
        let rhs = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let out =
            conjugate_gradient(dense_matvec(DMatrix::identity(3, 3)), &rhs, 10, 1e-12).unwrap();
        assert_eq!(out.iterations, 1);
        assert!((out.w - rhs).norm() < 1e-14);
    }

    #[test]
    fn two_by_two_matches_direct_solve() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let rhs = DVector::from_vec(vec![1.0, 2.0]);
        let expected = m.clone().lu().solve(&rhs).unwrap();
        let out = conjugate_gradient(dense_matvec(m), &rhs, 2, 0.0).unwrap();
        assert!(out.iterations <= 2);
        assert!((out.w - expected).norm() < 1e-12);
    }

    #[test]
    fn zero_rhs_returns_zero_without_iterating() {
        let out = conjugate_gradient(
            dense_matvec(DMatrix::identity(4, 4)),
            &DVector::zeros(4),
            10,
            1e-10,
        )
        .unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.matvecs, 0);
        assert_eq!(out.w, DVector::zeros(4));
    }

    #[test]
    fn zero_iteration_budget_returns_zero_vector() {
        let rhs = DVector::from_vec(vec![1.0, 1.0]);
        let out = conjugate_gradient(dense_matvec(DMatrix::identity(2, 2)), &rhs, 0, 1e-10).unwrap();
        assert_eq!(out.w, DVector::zeros(2));
        assert_eq!(out.iterations, 0);
        assert_eq!(out.residual_norm, rhs.norm());
    }

    #[test]
    fn reported_residual_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let raw = DMatrix::from_fn(6, 6, |_, _| rng.gen::<f64>() - 0.5);
        let m = &raw * raw.transpose() + DMatrix::identity(6, 6) * 0.5;
        let rhs = DVector::from_fn(6, |_, _| rng.gen::<f64>() - 0.5);
        let out = conjugate_gradient(dense_matvec(m.clone()), &rhs, 3, 0.0).unwrap();
        let true_res = (&rhs - &m * &out.w).norm();
        assert!(
            (out.residual_norm - true_res).abs() < 1e-10,
            "recurrence residual {} vs direct {}",
            out.residual_norm,
            true_res
        );
    }

    #[test]
    fn finite_termination_at_dimension_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw = DMatrix::from_fn(8, 8, |_, _| rng.gen::<f64>() - 0.5);
        let m = &raw * raw.transpose() + DMatrix::identity(8, 8);
        let rhs = DVector::from_fn(8, |_, _| rng.gen::<f64>() - 0.5);
        let expected = m.clone().lu().solve(&rhs).unwrap();
        let out = conjugate_gradient(dense_matvec(m), &rhs, 8, 0.0).unwrap();
        assert!((out.w - expected).norm() < 1e-9);
    }

    #[test]
    fn indefinite_operator_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let rhs = DVector::from_vec(vec![0.0, 1.0]);
        let err = conjugate_gradient(dense_matvec(m), &rhs, 5, 1e-10).unwrap_err();
        assert!(matches!(err, Error::NonPositiveCurvature { .. }));
    }

    #[test]
    fn matvec_count_equals_iterations() {
        let m = DMatrix::from_row_slice(3, 3, &[5.0, 1.0, 0.0, 1.0, 4.0, 1.0, 0.0, 1.0, 3.0]);
        let rhs = DVector::from_vec(vec![1.0, 0.0, -1.0]);
        let out = conjugate_gradient(dense_matvec(m), &rhs, 2, 0.0).unwrap();
        assert_eq!(out.matvecs, out.iterations);
    }
}
