//! Fitting loadings and length scales by maximizing the approximate evidence,
//! and MAP estimation of the latents under the exact likelihood.

mod map;
pub mod optimizer;

pub use map::{log_posterior, log_posterior_gradient, map_latents, map_latents_from, reconstruct_rates, MapEstimate};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::CountDataset;
use crate::error::{Error, Result};
use crate::kernels::GpPrior;
use crate::obs_models::ObservationModel;
use crate::pal::{LoadingMatrix, PalProblem};
use optimizer::{maximize, AscentOptions};

/// How the optimizer obtains evidence gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Closed-form gradient in the loadings and log length scales.
    Analytic,
    /// Central differences in every coordinate.
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Relative evidence change regarded as converged (three iterations in a row).
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
    pub optimize_alpha: bool,
    pub finite_diff_step: f64,
    pub gradient: GradientMode,
    pub jitter: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-6,
            restarts: 3,
            seed: 0,
            optimize_alpha: false,
            finite_diff_step: 1e-5,
            gradient: GradientMode::Analytic,
            jitter: crate::kernels::DEFAULT_JITTER,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tol {} must be positive", self.tol)));
        }
        if self.restarts < 1 {
            return Err(Error::InvalidParameter("restarts must be at least 1".into()));
        }
        if !(self.finite_diff_step > 0.0) {
            return Err(Error::InvalidParameter("finite_diff_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Model with its final parameters (fitted `alpha` when optimized).
    pub model: ObservationModel,
    pub loadings: LoadingMatrix,
    pub length_scales: Vec<f64>,
    pub alpha: Option<f64>,
    pub final_evidence: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Final objective of every restart; `None` where the restart failed.
    pub restart_evidences: Vec<Option<f64>>,
    /// Objective after each accepted step of the winning restart.
    pub trace: Vec<f64>,
}

impl FitResult {
    pub fn prior(&self, n_bins: usize, jitter: f64) -> Result<GpPrior> {
        GpPrior::with_jitter(self.length_scales.clone(), n_bins, jitter)
    }
}

/// The evidence as a function of one flat parameter vector:
/// `[W row-major (N*P), log l (P), log alpha (optional)]`.
pub struct EvidenceObjective<'a> {
    data: &'a CountDataset,
    model: ObservationModel,
    n_latents: usize,
    optimize_alpha: bool,
    jitter: f64,
    fd_step: f64,
    fixed: Option<PalProblem>,
}

impl<'a> EvidenceObjective<'a> {
    pub fn new(data: &'a CountDataset, model: ObservationModel, n_latents: usize, cfg: &FitConfig) -> Result<Self> {
        let optimize_alpha = cfg.optimize_alpha && model.alpha().is_some();
        let fixed = if optimize_alpha { None } else { Some(PalProblem::new(model.clone(), data)?) };
        Ok(Self {
            data,
            model,
            n_latents,
            optimize_alpha,
            jitter: cfg.jitter,
            fd_step: cfg.finite_diff_step,
            fixed,
        })
    }

    pub fn n_params(&self) -> usize {
        self.data.n_neurons() * self.n_latents + self.n_latents + usize::from(self.optimize_alpha)
    }

    pub fn pack(&self, w: &LoadingMatrix, length_scales: &[f64], alpha: Option<f64>) -> DVector<f64> {
        let mut v: Vec<f64> = w.to_row_major();
        v.extend(length_scales.iter().map(|l| l.ln()));
        if self.optimize_alpha {
            v.push(alpha.or(self.model.alpha()).unwrap_or(1.0).ln());
        }
        DVector::from_vec(v)
    }

    /// Loadings, prior, and model encoded by `params`.
    pub fn unpack(&self, params: &DVector<f64>) -> Result<(LoadingMatrix, GpPrior, ObservationModel)> {
        if params.len() != self.n_params() {
            return Err(Error::Dimension(format!(
                "parameter vector has length {}, expected {}",
                params.len(),
                self.n_params()
            )));
        }
        let (n, p) = (self.data.n_neurons(), self.n_latents);
        let w = LoadingMatrix::from_row_major(n, p, &params.as_slice()[..n * p])?;
        let ells = params.as_slice()[n * p..n * p + p].iter().map(|l| l.exp()).collect();
        let prior = GpPrior::with_jitter(ells, self.data.n_bins(), self.jitter)?;
        let model = if self.optimize_alpha {
            ObservationModel::negbinom(params[n * p + p].exp())?
        } else {
            self.model.clone()
        };
        Ok((w, prior, model))
    }

    fn problem_for(&self, model: &ObservationModel) -> Result<std::borrow::Cow<'_, PalProblem>> {
        match &self.fixed {
            Some(p) => Ok(std::borrow::Cow::Borrowed(p)),
            None => Ok(std::borrow::Cow::Owned(PalProblem::new(model.clone(), self.data)?)),
        }
    }

    /// Evidence at `params` (plus the alpha-dependent constants when alpha is
    /// a parameter).
    pub fn value(&self, params: &DVector<f64>) -> Result<f64> {
        let (w, prior, model) = self.unpack(params)?;
        let problem = self.problem_for(&model)?;
        let fact = prior.factorize()?;
        let mut v = problem.log_evidence(&w, &fact)?;
        if self.optimize_alpha {
            v += problem.alpha_constant(self.data);
        }
        Ok(v)
    }

    /// Value and gradient; the alpha coordinate always uses central differences.
    pub fn value_and_gradient(&self, params: &DVector<f64>, mode: GradientMode) -> Result<(f64, DVector<f64>)> {
        match mode {
            GradientMode::FiniteDifference => Ok((self.value(params)?, self.gradient_fd(params, self.fd_step)?)),
            GradientMode::Analytic => {
                let (w, prior, model) = self.unpack(params)?;
                let problem = self.problem_for(&model)?;
                let fact = prior.factorize()?;
                let eg = problem.evidence_with_gradient(&w, &fact)?;
                let mut grad = DVector::zeros(self.n_params());
                let (n, p) = (self.data.n_neurons(), self.n_latents);
                for i in 0..n {
                    for j in 0..p {
                        grad[i * p + j] = eg.d_loadings[(i, j)];
                    }
                }
                for j in 0..p {
                    grad[n * p + j] = eg.d_log_length_scales[j];
                }
                let mut value = eg.value;
                if self.optimize_alpha {
                    value += problem.alpha_constant(self.data);
                    let k = n * p + p;
                    grad[k] = self.partial_fd(params, k, self.fd_step)?;
                }
                Ok((value, grad))
            }
        }
    }

    fn partial_fd(&self, params: &DVector<f64>, k: usize, step: f64) -> Result<f64> {
        let mut up = params.clone();
        let mut dn = params.clone();
        up[k] += step;
        dn[k] -= step;
        Ok((self.value(&up)? - self.value(&dn)?) / (2.0 * step))
    }

    /// Central-difference gradient with step `step` per coordinate.
    pub fn gradient_fd(&self, params: &DVector<f64>, step: f64) -> Result<DVector<f64>> {
        if !(step > 0.0) {
            return Err(Error::InvalidParameter(format!("finite-difference step {step} must be positive")));
        }
        let mut g = DVector::zeros(params.len());
        for k in 0..params.len() {
            g[k] = self.partial_fd(params, k, step)?;
        }
        Ok(g)
    }
}

/// Central-difference gradient of the evidence objective.
pub fn evidence_gradient_fd(objective: &EvidenceObjective<'_>, params: &DVector<f64>, step: f64) -> Result<DVector<f64>> {
    objective.gradient_fd(params, step)
}

/// Initial loadings (`0.1 * N(0, 1)` entries) and length scales (`T / 10`)
/// for restart `restart`.
pub fn initial_point(n_neurons: usize, n_latents: usize, n_bins: usize, seed: u64, restart: usize) -> (LoadingMatrix, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64 + 1);
    let w = DMatrix::from_fn(n_neurons, n_latents, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        0.1 * z
    });
    let ell = (n_bins as f64 / 10.0).max(1.0);
    (LoadingMatrix::new(w).expect("finite initial loadings"), vec![ell; n_latents])
}

/// Maximizes the approximate evidence over loadings, log length scales, and
/// (optionally) log alpha, keeping the best of `cfg.restarts` runs.
pub fn fit(data: &CountDataset, n_latents: usize, model: &ObservationModel, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    if n_latents < 1 || n_latents >= data.n_neurons() {
        return Err(Error::InvalidParameter(format!(
            "need 1 <= P < N, got P = {n_latents} with N = {}",
            data.n_neurons()
        )));
    }
    model.validate(data)?;
    let objective = EvidenceObjective::new(data, model.clone(), n_latents, cfg)?;
    let opts = AscentOptions { max_iters: cfg.max_iters, tol: cfg.tol, ..Default::default() };

    let runs: Vec<Result<_>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|k| {
            let (w0, ell0) = initial_point(data.n_neurons(), n_latents, data.n_bins(), cfg.seed, k);
            let x0 = objective.pack(&w0, &ell0, model.alpha());
            maximize(|x| objective.value_and_gradient(x, cfg.gradient), x0, &opts)
        })
        .collect();

    let restart_evidences: Vec<Option<f64>> = runs.iter().map(|r| r.as_ref().ok().map(|o| o.value)).collect();
    let mut best: Option<usize> = None;
    for (k, v) in restart_evidences.iter().enumerate() {
        if let Some(v) = v {
            if best.is_none_or(|b| *v > restart_evidences[b].unwrap()) {
                best = Some(k);
            }
        }
    }
    let Some(best) = best else {
        let last = runs.into_iter().rev().find_map(|r| r.err()).map(|e| e.to_string()).unwrap_or_default();
        return Err(Error::AllRestartsFailed { restarts: cfg.restarts, last });
    };
    let outcome = runs.into_iter().nth(best).unwrap().expect("best restart succeeded");
    let (loadings, prior, fitted_model) = objective.unpack(&outcome.x)?;
    Ok(FitResult {
        alpha: fitted_model.alpha(),
        model: fitted_model,
        loadings,
        length_scales: prior.length_scales,
        final_evidence: outcome.value,
        iterations: outcome.iterations,
        converged: outcome.converged,
        restart_evidences,
        trace: outcome.trace,
    })
}
