//! Recovery metrics: linear alignment of latents, rate error, and error as a
//! function of population size.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::CountDataset;
use crate::error::{Error, Result};
use crate::inference::{fit, map_latents, reconstruct_rates, FitConfig, FitResult, MapEstimate};
use crate::obs_models::{ModelKind, ObservationModel};
use crate::simulate::{paper_setup, SimOutput};

#[derive(Debug, Clone)]
pub struct AlignmentResult {
    /// `A` minimizing `|A X_hat - X_true|^2`.
    pub transform: DMatrix<f64>,
    pub aligned_latents: DMatrix<f64>,
    /// `|A X_hat - X_true|^2 / |X_true|^2`
    pub normalized_error: f64,
    /// `X_hat X_hat^T` was singular and a pseudo-inverse was used.
    pub rank_deficient: bool,
}

/// Regresses estimated latents onto the true ones.
///
/// `X_hat` may have fewer rows than `X_true` (a smaller fitted model); the
/// transform is then `P_true x P_hat`.
pub fn align_latents(x_hat: &DMatrix<f64>, x_true: &DMatrix<f64>) -> Result<AlignmentResult> {
    if x_hat.ncols() != x_true.ncols() {
        return Err(Error::Dimension(format!(
            "estimated latents have {} bins, true latents {}",
            x_hat.ncols(),
            x_true.ncols()
        )));
    }
    if x_hat.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidData("estimated latents are identically zero".into()));
    }
    let gram = x_hat * x_hat.transpose();
    let cross = x_true * x_hat.transpose();
    let eig = gram.clone().symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    let rank_deficient = lo <= 1e-12 * hi;
    let transform = if rank_deficient {
        let pinv = gram
            .pseudo_inverse(1e-12 * hi)
            .map_err(|e| Error::InvalidData(format!("pseudo-inverse failed: {e}")))?;
        cross * pinv
    } else {
        // A G = C  =>  G A^T = C^T
        let chol = gram.cholesky().ok_or_else(|| Error::InvalidData("latent Gram matrix not positive definite".into()))?;
        chol.solve(&cross.transpose()).transpose()
    };
    let aligned_latents = &transform * x_hat;
    let denom = x_true.norm_squared();
    if denom == 0.0 {
        return Err(Error::InvalidData("true latents are identically zero".into()));
    }
    let normalized_error = (&aligned_latents - x_true).norm_squared() / denom;
    Ok(AlignmentResult { transform, aligned_latents, normalized_error, rank_deficient })
}

/// Mean squared difference over all entries.
pub fn rate_mse(rates_hat: &DMatrix<f64>, rates_true: &DMatrix<f64>) -> Result<f64> {
    if rates_hat.shape() != rates_true.shape() {
        return Err(Error::Dimension(format!(
            "rate matrices have shapes {:?} and {:?}",
            rates_hat.shape(),
            rates_true.shape()
        )));
    }
    Ok((rates_hat - rates_true).norm_squared() / rates_hat.len() as f64)
}

/// Everything produced by fit, MAP inference, and alignment on one dataset.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub fit: FitResult,
    pub map: MapEstimate,
    pub alignment: AlignmentResult,
    pub rates: DMatrix<f64>,
    pub rate_mse: f64,
}

/// Fits `n_latents` latents to `data` with the default model of `kind`,
/// infers MAP latents, and scores them against the ground truth.
pub fn run_pipeline(
    kind: ModelKind,
    data: &CountDataset,
    x_true: &DMatrix<f64>,
    rates_true: &DMatrix<f64>,
    n_latents: usize,
    cfg: &FitConfig,
) -> Result<PipelineOutcome> {
    run_pipeline_with(&ObservationModel::for_data(kind, data), data, x_true, rates_true, n_latents, cfg)
}

/// [`run_pipeline`] with an explicit observation model.
pub fn run_pipeline_with(
    model: &ObservationModel,
    data: &CountDataset,
    x_true: &DMatrix<f64>,
    rates_true: &DMatrix<f64>,
    n_latents: usize,
    cfg: &FitConfig,
) -> Result<PipelineOutcome> {
    let fitted = fit(data, n_latents, model, cfg)?;
    let prior = fitted.prior(data.n_bins(), cfg.jitter)?;
    let map = map_latents(data, &fitted.loadings, &prior, &fitted.model)?;
    let x_map = map.latents_matrix();
    let alignment = align_latents(&x_map, x_true)?;
    let rates = reconstruct_rates(&fitted.loadings, &x_map, &fitted.model)?;
    let rate_mse = rate_mse(&rates, rates_true)?;
    Ok(PipelineOutcome { fit: fitted, map, alignment, rates, rate_mse })
}

/// One point of an error-versus-population-size curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n_neurons: usize,
    pub error: Option<f64>,
    pub failure: Option<String>,
}

/// Aligned-latent error after fitting only the first `N` neurons of `sim`,
/// for each `N` in `neuron_counts`. The fitted dimensionality is
/// `min(P, N - 1)`.
pub fn error_vs_neurons_for(sim: &SimOutput, neuron_counts: &[usize], cfg: &FitConfig) -> Result<Vec<CurvePoint>> {
    let n_max = sim.data.n_neurons();
    if let Some(&bad) = neuron_counts.iter().find(|&&n| n < 2 || n > n_max) {
        return Err(Error::InvalidParameter(format!("neuron count {bad} outside [2, {n_max}]")));
    }
    let rates_true = sim.true_rates()?;
    let kind = sim.spec.model;
    Ok(neuron_counts
        .iter()
        .map(|&n| {
            let idx: Vec<usize> = (0..n).collect();
            let outcome = sim.data.subset_neurons(&idx).and_then(|data| {
                let rates = rates_true.rows(0, n).into_owned();
                let p = sim.x_true.nrows().min(n - 1);
                run_pipeline(kind, &data, &sim.x_true, &rates, p, cfg)
            });
            match outcome {
                Ok(o) => CurvePoint { n_neurons: n, error: Some(o.alignment.normalized_error), failure: None },
                Err(e) => CurvePoint { n_neurons: n, error: None, failure: Some(e.to_string()) },
            }
        })
        .collect())
}

/// [`error_vs_neurons_for`] on one draw of the standard simulation setup.
pub fn error_vs_neurons(kind: ModelKind, seed: u64, neuron_counts: &[usize], cfg: &FitConfig) -> Result<Vec<CurvePoint>> {
    let sim = paper_setup(kind, seed)?;
    error_vs_neurons_for(&sim, neuron_counts, cfg)
}

/// Copy of `sim` whose every trial holds the true rates instead of counts.
/// Diagnostic only: the counts are no longer integers.
pub fn noiseless(sim: &SimOutput) -> Result<SimOutput> {
    let rates = sim.true_rates()?;
    let trials = vec![rates; sim.data.n_trials()];
    let mut out = sim.clone();
    out.data = CountDataset::from_trials(&trials)?;
    Ok(out)
}
