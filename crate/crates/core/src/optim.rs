//! Damped Newton minimization for the strongly convex potentials.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{FullPotential, PotentialSpec};

pub const GRAD_TOL: f64 = 1e-10;
const MAX_ITERS: usize = 200;

/// Minimizes a strongly convex function by Newton steps with Armijo backtracking.
///
/// Stops when the gradient norm drops below `tol`. If rounding makes further
/// progress impossible first, the point is accepted as long as the gradient is
/// already negligible relative to the objective's scale.
pub fn newton_minimize(
    x0: DVector<f64>,
    f: impl Fn(&DVector<f64>) -> f64,
    grad: impl Fn(&DVector<f64>) -> DVector<f64>,
    hess: impl Fn(&DVector<f64>) -> DMatrix<f64>,
    tol: f64,
) -> Result<DVector<f64>> {
    let mut x = x0;
    let mut fx = f(&x);
    for _ in 0..MAX_ITERS {
        let g = grad(&x);
        let gn = g.norm();
        if gn <= tol {
            return Ok(x);
        }
        let h = hess(&x);
        let step = h
            .cholesky()
            .ok_or_else(|| Error::NoConvergence("Hessian lost positive definiteness".into()))?
            .solve(&g);
        let slope = -g.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &x - &step * t;
            let fc = f(&cand);
            if fc <= fx + 1e-4 * t * slope {
                x = cand;
                fx = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No representable decrease left: accept if we are at the rounding floor.
            if gn <= 1e-7 * fx.abs().max(1.0) {
                return Ok(x);
            }
            return Err(Error::NoConvergence(format!("line search stalled with gradient norm {gn:e}")));
        }
    }
    let gn = grad(&x).norm();
    if gn <= 1e-7 * fx.abs().max(1.0) {
        Ok(x)
    } else {
        Err(Error::NoConvergence(format!("gradient norm {gn:e} after {MAX_ITERS} iterations")))
    }
}

/// Minimizer θ* of the full potential `Σ U_i(A_i θ)`.
pub fn theta_star(specs: &[PotentialSpec]) -> Result<DVector<f64>> {
    let full = FullPotential::new(specs);
    newton_minimize(
        DVector::zeros(full.dim()),
        |t| full.value(t),
        |t| full.grad(t),
        |t| full.hessian(t),
        GRAD_TOL,
    )
}

/// Minimizer of one worker potential over its own block, i.e. the point
/// `A_i θ_i*` at which `∇U_i` vanishes.
pub fn local_minimizer(spec: &PotentialSpec) -> Result<DVector<f64>> {
    newton_minimize(
        DVector::zeros(spec.dim_out),
        |z| spec.value(z),
        |z| spec.grad(z),
        |z| spec.hessian(z),
        GRAD_TOL,
    )
}

/// `u* = (A_i θ* − A_i θ_i*)_i` stacked, returned as per-block squared norms.
pub fn heterogeneity_sq(specs: &[PotentialSpec]) -> Result<Vec<f64>> {
    let ts = theta_star(specs)?;
    specs
        .iter()
        .map(|s| Ok((&s.matrix_a * &ts - local_minimizer(s)?).norm_squared()))
        .collect()
}
