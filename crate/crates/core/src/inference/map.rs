use nalgebra::{DMatrix, DVector};

use crate::dataset::CountDataset;
use crate::error::{Error, Result};
use crate::kernels::{stack_latents, unstack_latents, GpPrior, PriorFactorization};
use crate::obs_models::ObservationModel;
use crate::pal::{failing_pivot, BinPrecision, LoadingMatrix, PalProblem};

const MAX_NEWTON_STEPS: usize = 100;
const GRAD_TOL: f64 = 1e-6;

/// Mode of the exact conditional posterior over stacked latents.
#[derive(Debug, Clone)]
pub struct MapEstimate {
    /// Stacked latents, latent-major.
    pub latents: DVector<f64>,
    /// Negative Hessian of the log posterior at the mode.
    pub curvature: DMatrix<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    n_latents: usize,
}

impl MapEstimate {
    /// Latents as a `P x T` matrix.
    pub fn latents_matrix(&self) -> DMatrix<f64> {
        let t = self.latents.len() / self.n_latents;
        unstack_latents(&self.latents, self.n_latents, t).expect("consistent shape")
    }
}

fn predictors(w: &LoadingMatrix, x: &DVector<f64>, n_bins: usize) -> Result<DMatrix<f64>> {
    let xm = unstack_latents(x, w.n_latents(), n_bins)?;
    Ok(w.as_matrix() * xm)
}

fn check(data: &CountDataset, w: &LoadingMatrix, fact: &PriorFactorization) -> Result<()> {
    if w.n_neurons() != data.n_neurons() || fact.n_latents() != w.n_latents() || fact.n_bins() != data.n_bins() {
        return Err(Error::Dimension(format!(
            "loadings {}x{}, prior {} latents x {} bins, data {} neurons x {} bins",
            w.n_neurons(),
            w.n_latents(),
            fact.n_latents(),
            fact.n_bins(),
            data.n_neurons(),
            data.n_bins()
        )));
    }
    Ok(())
}

/// Exact log conditional posterior `log p(Y | W, x) - 1/2 x^T K^{-1} x`
/// (the prior's normalizer omitted).
pub fn log_posterior(
    data: &CountDataset,
    w: &LoadingMatrix,
    fact: &PriorFactorization,
    model: &ObservationModel,
    x: &DVector<f64>,
) -> Result<f64> {
    check(data, w, fact)?;
    let eta = predictors(w, x, data.n_bins())?;
    let z = fact.l_solve(x)?;
    Ok(model.exact_loglik(data, &eta)? - 0.5 * z.norm_squared())
}

/// Data part of the gradient, `(W (x) I)^T d`, and the per-bin curvatures.
fn data_terms(
    data: &CountDataset,
    y_sum: &DMatrix<f64>,
    w: &LoadingMatrix,
    model: &ObservationModel,
    x: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let eta = predictors(w, x, data.n_bins())?;
    let (n, t_bins) = eta.shape();
    let mut d1 = DMatrix::zeros(n, t_bins);
    let mut curv = DMatrix::zeros(n, t_bins);
    for i in 0..n {
        for t in 0..t_bins {
            let (g, c) = model.loglik_derivatives(i, y_sum[(i, t)], data.n_trials(), eta[(i, t)]);
            d1[(i, t)] = g;
            curv[(i, t)] = c;
        }
    }
    Ok((stack_latents(&w.as_matrix().tr_mul(&d1)), curv))
}

/// Analytic gradient of [`log_posterior`] with respect to `x`.
pub fn log_posterior_gradient(
    data: &CountDataset,
    w: &LoadingMatrix,
    fact: &PriorFactorization,
    model: &ObservationModel,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    check(data, w, fact)?;
    model.validate(data)?;
    let (gd, _) = data_terms(data, &data.trial_sums(), w, model, x)?;
    Ok(gd - fact.solve(x)?)
}

/// MAP latents starting from the approximate posterior mean.
pub fn map_latents(data: &CountDataset, w: &LoadingMatrix, prior: &GpPrior, model: &ObservationModel) -> Result<MapEstimate> {
    let fact = prior.factorize()?;
    check(data, w, &fact)?;
    let init = PalProblem::new(model.clone(), data)?.posterior(w, &fact)?.mean;
    map_latents_from(data, w, &fact, model, &init)
}

/// Newton ascent on the exact log posterior from `init`.
///
/// Iterates in whitened coordinates `z = L^{-1} x`, where the Newton system
/// `I + L^T (W (x) I)^T D (W (x) I) L` is well conditioned. Stops once
/// `|g|_inf < 1e-6` in `x`; if the line search stalls first (roundoff), the
/// mode is accepted as long as `|g|_inf < 1e-6 (1 + |objective|)`.
pub fn map_latents_from(
    data: &CountDataset,
    w: &LoadingMatrix,
    fact: &PriorFactorization,
    model: &ObservationModel,
    init: &DVector<f64>,
) -> Result<MapEstimate> {
    check(data, w, fact)?;
    model.validate(data)?;
    let y_sum = data.trial_sums();
    let objective = |z: &DVector<f64>| -> Result<f64> {
        let x = fact.l_mul(z)?;
        let eta = predictors(w, &x, data.n_bins())?;
        Ok(model.exact_loglik(data, &eta)? - 0.5 * z.norm_squared())
    };

    let mut z = fact.l_solve(init)?;
    let mut obj = objective(&z)?;
    let mut grad_norm = f64::INFINITY;
    for iteration in 0..=MAX_NEWTON_STEPS {
        let x = fact.l_mul(&z)?;
        let (gd, curv) = data_terms(data, &y_sum, w, model, &x)?;
        let gx = &gd - fact.lt_solve(&z)?;
        grad_norm = gx.amax();
        let h = BinPrecision::new(w.as_matrix(), &curv, false);
        let done = move |h: &BinPrecision, x: DVector<f64>| {
            let curvature = h.dense() + fact.dense_inverse();
            Ok(MapEstimate { latents: x, curvature, objective: obj, iterations: iteration, grad_norm, n_latents: w.n_latents() })
        };
        if grad_norm < GRAD_TOL {
            return done(&h, x);
        }
        let stalled_ok = grad_norm < GRAD_TOL * (1.0 + obj.abs());
        if iteration == MAX_NEWTON_STEPS {
            if stalled_ok {
                return done(&h, x);
            }
            break;
        }
        let gz = fact.lt_mul(&gd)? - &z;
        let b = h.whitened(fact);
        let chol = match b.clone().cholesky() {
            Some(c) => c,
            None => return Err(Error::PrecisionNotPositiveDefinite { pivot: failing_pivot(&b) }),
        };
        let dz = chol.solve(&gz);
        let slope = gz.dot(&dz);
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..50 {
            let trial = &z + &dz * step;
            let f = objective(&trial)?;
            if f.is_finite() && f >= obj + 1e-4 * step * slope {
                z = trial;
                obj = f;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            if stalled_ok {
                return done(&h, x);
            }
            break;
        }
    }
    Err(Error::MapNotConverged { iterations: MAX_NEWTON_STEPS, grad_norm })
}

/// Rates implied by loadings `w` and `P x T` latents `x`.
pub fn reconstruct_rates(w: &LoadingMatrix, x: &DMatrix<f64>, model: &ObservationModel) -> Result<DMatrix<f64>> {
    if x.nrows() != w.n_latents() {
        return Err(Error::Dimension(format!(
            "latents have {} rows, loadings {} columns",
            x.nrows(),
            w.n_latents()
        )));
    }
    model.rate(&(w.as_matrix() * x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::kernel_matrix;
    use crate::simulate::paper_setup;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn models(n: usize) -> Vec<ObservationModel> {
        vec![
            ObservationModel::poisson(),
            ObservationModel::binomial(vec![8; n]).unwrap(),
            ObservationModel::negbinom(1.0).unwrap(),
        ]
    }

    fn setup(n: usize, t: usize, r: usize, seed: u64) -> (CountDataset, LoadingMatrix, GpPrior) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let counts = (0..n * t * r).map(|_| rng.random_range(0..=8) as f64).collect();
        let data = CountDataset::new(n, t, r, counts).unwrap();
        let w = LoadingMatrix::new(DMatrix::from_fn(n, 2, |_, _| rng.random_range(-0.8..0.8))).unwrap();
        (data, w, GpPrior::new(vec![3.0, 7.0], t).unwrap())
    }

    fn random_x(len: usize, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DVector::from_fn(len, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn zero_loadings_give_zero_latents() {
        let (data, _, prior) = setup(4, 10, 2, 1);
        for model in models(4) {
            let m = map_latents(&data, &LoadingMatrix::zeros(4, 2), &prior, &model).unwrap();
            assert!(m.latents.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn poisson_mode_is_stationary() {
        let (data, w, _) = setup(5, 25, 3, 2);
        // enough jitter that the explicit inverse below is accurate
        let prior = GpPrior::with_jitter(vec![3.0, 7.0], 25, 1e-2).unwrap();
        let model = ObservationModel::poisson();
        let m = map_latents(&data, &w, &prior, &model).unwrap();
        // gradient rebuilt from the likelihood with an explicit K^{-1}
        let mut k = DMatrix::zeros(50, 50);
        for (j, &l) in prior.length_scales.iter().enumerate() {
            let kj = kernel_matrix(l, 25) + DMatrix::identity(25, 25) * prior.jitter;
            k.view_mut((j * 25, j * 25), (25, 25)).copy_from(&kj);
        }
        let x = m.latents_matrix();
        let eta = w.as_matrix() * &x;
        let resid = data.trial_sums() - eta.map(|e| 3.0 * e.exp());
        let g = stack_latents(&w.as_matrix().tr_mul(&resid)) - k.try_inverse().unwrap() * &m.latents;
        assert!(g.amax() < 1e-6, "gradient {} (internal {}, iters {})", g.amax(), m.grad_norm, m.iterations);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (data, w, prior) = setup(4, 8, 2, 3);
        let fact = prior.factorize().unwrap();
        for model in models(4) {
            for s in 0..5 {
                let x = random_x(16, 100 + s);
                let g = log_posterior_gradient(&data, &w, &fact, &model, &x).unwrap();
                let h = 1e-5;
                for k in 0..16 {
                    let mut up = x.clone();
                    let mut dn = x.clone();
                    up[k] += h;
                    dn[k] -= h;
                    let fd = (log_posterior(&data, &w, &fact, &model, &up).unwrap()
                        - log_posterior(&data, &w, &fact, &model, &dn).unwrap())
                        / (2.0 * h);
                    assert!((fd - g[k]).abs() < 1e-5 * (1.0 + g[k].abs()), "{model:?} coord {k}: {} vs {fd}", g[k]);
                }
            }
        }
    }

    #[test]
    fn random_starts_reach_the_same_mode() {
        let (data, w, prior) = setup(5, 20, 2, 4);
        let fact = prior.factorize().unwrap();
        for model in models(5) {
            let objs: Vec<f64> = (0..5)
                .map(|s| map_latents_from(&data, &w, &fact, &model, &random_x(40, 200 + s)).unwrap().objective)
                .collect();
            let best = objs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for o in &objs {
                assert!((o - best).abs() < 1e-6 * (1.0 + best.abs()), "{model:?}: {objs:?}");
            }
        }
    }

    #[test]
    fn curvature_is_negative_hessian() {
        let (data, w, prior) = setup(3, 6, 2, 5);
        let fact = prior.factorize().unwrap();
        for model in models(3) {
            let m = map_latents(&data, &w, &prior, &model).unwrap();
            let h = 1e-5;
            for k in 0..12 {
                let mut up = m.latents.clone();
                let mut dn = m.latents.clone();
                up[k] += h;
                dn[k] -= h;
                let col = (log_posterior_gradient(&data, &w, &fact, &model, &up).unwrap()
                    - log_posterior_gradient(&data, &w, &fact, &model, &dn).unwrap())
                    / (2.0 * h);
                for r in 0..12 {
                    let c = m.curvature[(r, k)];
                    assert!((c + col[r]).abs() < 1e-4 * (1.0 + c.abs()));
                }
            }
        }
    }

    #[test]
    fn pal_initialization_is_no_slower() {
        let mut from_mu = Vec::new();
        let mut from_zero = Vec::new();
        for seed in 0..10 {
            let sim = paper_setup(crate::ModelKind::Poisson, seed).unwrap();
            let w = LoadingMatrix::new(sim.w_true.clone()).unwrap();
            let prior = GpPrior::new(sim.spec.length_scales.clone(), sim.spec.n_bins).unwrap();
            let fact = prior.factorize().unwrap();
            from_mu.push(map_latents(&sim.data, &w, &prior, &sim.model).unwrap().iterations);
            let zero = DVector::zeros(fact.dim());
            from_zero.push(map_latents_from(&sim.data, &w, &fact, &sim.model, &zero).unwrap().iterations);
        }
        from_mu.sort_unstable();
        from_zero.sort_unstable();
        assert!(from_mu[5] <= from_zero[5], "{from_mu:?} vs {from_zero:?}");
    }

    #[test]
    fn rates_at_zero_latents() {
        let x = DMatrix::zeros(2, 7);
        let w = LoadingMatrix::from_row_major(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap();
        let r = reconstruct_rates(&w, &x, &ObservationModel::poisson()).unwrap();
        assert!(r.iter().all(|&v| v == 1.0));
        let r = reconstruct_rates(&w, &x, &ObservationModel::binomial_shared(10, 3).unwrap()).unwrap();
        assert!(r.iter().all(|&v| v == 5.0));
        let x = DMatrix::from_fn(2, 7, |p, t| 0.1 * (p + t) as f64);
        let model = ObservationModel::negbinom(2.0).unwrap();
        let r = reconstruct_rates(&w, &x, &model).unwrap();
        let eta = w.as_matrix() * &x;
        for i in 0..3 {
            for t in 0..7 {
                assert_eq!(r[(i, t)], model.rate_at(i, eta[(i, t)]));
            }
        }
        assert!(reconstruct_rates(&w, &DMatrix::zeros(3, 7), &model).is_err());
    }
}
