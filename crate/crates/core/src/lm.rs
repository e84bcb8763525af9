//! Dense Levenberg-Marquardt for small parameter counts.
//!
//! Residuals are `data - model`; the problem supplies the model Jacobian
//! `d model / d p`. Damping scales the diagonal of `J^T J` and moves by a
//! factor of 10 after each accepted or rejected step.

use nalgebra::{DMatrix, DVector};

pub(crate) trait LeastSquares {
    fn n_residuals(&self) -> usize;

    /// Fills `residuals` (len m) and `jacobian` (m x n) at `params`.
    fn evaluate(&self, params: &[f64], residuals: &mut DVector<f64>, jacobian: &mut DMatrix<f64>);

    /// Residuals only; used to test trial steps.
    fn residuals(&self, params: &[f64], residuals: &mut DVector<f64>);
}

#[derive(Debug, Clone)]
pub(crate) struct LmOutcome {
    pub params: Vec<f64>,
    /// Sum of squared residuals.
    pub cost: f64,
    pub converged: bool,
    #[allow(dead_code)]
    pub iterations: usize,
}

const LAMBDA_INIT: f64 = 1e-3;
const LAMBDA_MAX: f64 = 1e12;

/// Converged when an accepted step satisfies `|dp_i| <= tol * (|p_i| + tol)`
/// for every parameter, so parameters should be scaled to order one.
pub(crate) fn levenberg_marquardt<P: LeastSquares>(
    problem: &P,
    initial: &[f64],
    max_iterations: usize,
    tol: f64,
) -> LmOutcome {
    let n = initial.len();
    let m = problem.n_residuals();
    let mut params = initial.to_vec();
    let mut r = DVector::zeros(m);
    let mut jac = DMatrix::zeros(m, n);
    let mut trial_r = DVector::zeros(m);
    let mut lambda = LAMBDA_INIT;

    problem.evaluate(&params, &mut r, &mut jac);
    let mut cost = r.norm_squared();
    let mut iterations = 0;

    while iterations < max_iterations {
        iterations += 1;
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;
        if jtr.amax() == 0.0 {
            return LmOutcome {
                params,
                cost,
                converged: true,
                iterations,
            };
        }

        let mut accepted = None;
        while lambda <= LAMBDA_MAX {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-300);
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&jtr);
            let trial: Vec<f64> = params.iter().zip(step.iter()).map(|(p, d)| p + d).collect();
            problem.residuals(&trial, &mut trial_r);
            let trial_cost = trial_r.norm_squared();
            if trial_cost.is_finite() && trial_cost <= cost {
                accepted = Some((trial, step, trial_cost));
                lambda = (lambda / 10.0).max(1e-12);
                break;
            }
            lambda *= 10.0;
        }

        let Some((trial, step, trial_cost)) = accepted else {
            // Damping exhausted: no descent direction left at this precision.
            return LmOutcome {
                params,
                cost,
                converged: true,
                iterations,
            };
        };
        let small = trial
            .iter()
            .zip(step.iter())
            .all(|(p, d)| d.abs() <= tol * (p.abs() + tol));
        params = trial;
        cost = trial_cost;
        problem.evaluate(&params, &mut r, &mut jac);
        if small {
            return LmOutcome {
                params,
                cost,
                converged: true,
                iterations,
            };
        }
    }
    LmOutcome {
        params,
        cost,
        converged: false,
        iterations,
    }
}
