//! Second-order least-squares approximations of scalar nonlinearities.
//!
//! A nonlinearity `f` is replaced on an interval by `a x^2 + b x + c`, with the
//! coefficients minimizing the squared error over a uniform grid. Everything
//! downstream of the marginal likelihood depends on these three numbers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid resolution used for all per-neuron fits.
pub const DEFAULT_GRID_STEP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    lo: f64,
    hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidInterval { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    /// `[center - half_width, center + half_width]`
    pub fn centered(center: f64, half_width: f64) -> Result<Self> {
        Self::new(center - half_width, center + half_width)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    /// Uniform grid `lo, lo + step, ...` that always ends exactly at `hi`.
    ///
    /// When the width is not a multiple of `step` the final point is clamped
    /// to `hi`, so the last spacing is shorter than `step`.
    pub fn grid(&self, step: f64) -> Result<Vec<f64>> {
        if !(step > 0.0 && step.is_finite() && step < self.width()) {
            return Err(Error::InvalidGridStep { step, width: self.width() });
        }
        let span = self.width() / step;
        // tolerate representation error in widths like 4.0 / 0.01
        let steps = (span + 1e-9).floor() as usize;
        let mut xs: Vec<f64> = (0..=steps).map(|k| self.lo + k as f64 * step).collect();
        let last = *xs.last().expect("grid has at least one point");
        if (self.hi - last).abs() <= 1e-9 * step {
            *xs.last_mut().unwrap() = self.hi;
        } else {
            xs.push(self.hi);
        }
        Ok(xs)
    }
}

/// Quadratic `a x^2 + b x + c` together with the interval it was fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadApprox {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub interval: Interval,
}

impl QuadApprox {
    pub fn eval(&self, x: f64) -> f64 {
        (self.a * x + self.b) * x + self.c
    }

    /// Largest absolute deviation from `f` over the grid of the fit interval.
    pub fn max_abs_error<F: Fn(f64) -> f64>(&self, f: F, grid_step: f64) -> Result<f64> {
        let grid = self.interval.grid(grid_step)?;
        Ok(grid
            .into_iter()
            .map(|x| (f(x) - self.eval(x)).abs())
            .fold(0.0, f64::max))
    }
}

/// Evaluates `a x^2 + b x + c`; valid outside the fit interval as well.
pub fn eval_quadratic(q: &QuadApprox, x: f64) -> f64 {
    q.eval(x)
}

pub fn max_abs_error<F: Fn(f64) -> f64>(q: &QuadApprox, f: F, grid_step: f64) -> Result<f64> {
    q.max_abs_error(f, grid_step)
}

/// Least-squares quadratic fit of `f` over the uniform grid on `interval`.
///
/// The normal equations are assembled in the centred and scaled variable
/// `u = (x - m) / h` (with `m` the midpoint and `h` the half-width), solved by
/// Gaussian elimination with partial pivoting, and mapped back to monomial
/// coefficients in `x`. The least-squares minimizer is the same in either
/// basis; the shift only keeps the 3x3 system well conditioned for intervals
/// far from the origin.
pub fn fit_quadratic<F: Fn(f64) -> f64>(f: F, interval: Interval, grid_step: f64) -> Result<QuadApprox> {
    let grid = interval.grid(grid_step)?;
    if grid.len() < 3 {
        return Err(Error::SingularNormalEquations { points: grid.len() });
    }
    let m = interval.midpoint();
    let h = 0.5 * interval.width();

    // moments[k] = sum u^k, rhs[k] = sum u^k f(x)
    let mut moments = [0.0f64; 5];
    let mut rhs = [0.0f64; 3];
    for &x in &grid {
        let fx = f(x);
        if !fx.is_finite() {
            return Err(Error::NonFiniteValue { x });
        }
        let u = (x - m) / h;
        let mut p = 1.0;
        for (k, mk) in moments.iter_mut().enumerate() {
            *mk += p;
            if k < 3 {
                rhs[k] += p * fx;
            }
            p *= u;
        }
    }
    let mut normal = [[0.0f64; 3]; 3];
    for (r, row) in normal.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = moments[r + c];
        }
    }
    // coefficients of 1, u, u^2
    let [c0, c1, c2] = solve3(normal, rhs).ok_or(Error::SingularNormalEquations { points: grid.len() })?;

    // c2 (x - m)^2 / h^2 + c1 (x - m) / h + c0
    let a = c2 / (h * h);
    let b = c1 / h - 2.0 * m * a;
    let c = c0 - c1 * m / h + a * m * m;
    if !(a.is_finite() && b.is_finite() && c.is_finite()) {
        return Err(Error::SingularNormalEquations { points: grid.len() });
    }
    Ok(QuadApprox { a, b, c, interval })
}

/// Solves a 3x3 system by Gaussian elimination with partial pivoting.
fn solve3(mut m: [[f64; 3]; 3], mut rhs: [f64; 3]) -> Option<[f64; 3]> {
    let scale = m.iter().flatten().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        if m[pivot][col].abs() <= 1e-13 * scale {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..3 {
            let factor = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= factor * m[col][k];
            }
            rhs[row] -= factor * rhs[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let tail: f64 = (row + 1..3).map(|k| m[row][k] * x[k]).sum();
        x[row] = (rhs[row] - tail) / m[row][row];
    }
    Some(x)
}
