//! BFGS ascent with a backtracking (Armijo) line search.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct AscentOptions {
    pub max_iters: usize,
    /// Relative objective change regarded as stalled.
    pub tol: f64,
    /// Consecutive stalled iterations required to declare convergence.
    pub patience: usize,
    /// Largest allowed change of any single coordinate per step.
    pub max_step: f64,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self { max_iters: 500, tol: 1e-6, patience: 3, max_step: 2.0 }
    }
}

#[derive(Debug, Clone)]
pub struct AscentOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after the starting point and after every accepted step.
    pub trace: Vec<f64>,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

/// Maximizes `f`, which returns the objective and its gradient.
///
/// Every accepted step increases the objective. A failed evaluation at a
/// trial point counts as a rejected step; a failure at `x0` is returned.
pub fn maximize<F>(mut f: F, x0: DVector<f64>, opts: &AscentOptions) -> Result<AscentOutcome>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = f(&x)?;
    let mut trace = vec![fx];
    // inverse Hessian of -f
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut stalled = 0;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iters {
        if g.amax() == 0.0 {
            converged = true;
            break;
        }
        // ascent direction for f: d = H g
        let mut d = &hinv * &g;
        let mut slope = g.dot(&d);
        if !(slope > 0.0) || !slope.is_finite() {
            hinv = DMatrix::identity(n, n);
            fresh = true;
            d = g.clone();
            slope = g.dot(&d);
        }
        let mut step = if fresh { 1.0 / g.norm().max(1.0) } else { 1.0 };
        let biggest = d.amax() * step;
        if biggest > opts.max_step {
            step *= opts.max_step / biggest;
        }

        let first_step = step;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial = &x + &d * step;
            if let Ok((ft, gt)) = f(&trial) {
                if ft.is_finite() && ft >= fx + ARMIJO_C1 * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            if fresh {
                // no progress even along the gradient: converged only if the
                // predicted gain was already below tolerance
                converged = first_step * slope <= opts.tol * fx.abs().max(1.0);
                break;
            }
            hinv = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };
        iterations += 1;

        let s = &x_new - &x;
        // y for the minimization of -f
        let y = &g - &g_new;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                let scale = sy / y.norm_squared();
                hinv = DMatrix::identity(n, n) * scale;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s hy^T + hy s^T) + (rho^2 yHy + rho) s s^T
            hinv -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho);
            fresh = false;
        }

        let rel = (f_new - fx).abs() / fx.abs().max(1.0);
        x = x_new;
        fx = f_new;
        g = g_new;
        trace.push(fx);
        if rel < opts.tol {
            stalled += 1;
            if stalled >= opts.patience {
                converged = true;
                break;
            }
        } else {
            stalled = 0;
        }
    }

    Ok(AscentOutcome { x, value: fx, iterations, converged, trace })
}
