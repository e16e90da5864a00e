//! Synthetic count-GPFA datasets.
//!
//! All randomness comes from one ChaCha8 seed. Independent streams of that
//! seed drive the latents, the loadings, and the counts, so changing one
//! stage's consumption never shifts the others.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::CountDataset;
use crate::error::{Error, Result};
use crate::kernels::{GpPrior, PriorFactorization};
use crate::obs_models::{ModelKind, ObservationModel, DEFAULT_ALPHA};
use crate::pal::LoadingMatrix;

const STREAM_LATENTS: u64 = 11;
const STREAM_LOADINGS: u64 = 12;
const STREAM_COUNTS: u64 = 13;

/// Binomial `n` used for simulated data.
pub const DEFAULT_SIM_BINOMIAL_N: u32 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub n_neurons: usize,
    pub n_bins: usize,
    pub n_trials: usize,
    pub n_latents: usize,
    pub length_scales: Vec<f64>,
    pub w_low: f64,
    pub w_high: f64,
    pub model: ModelKind,
    /// Shared binomial `n` (binomial only).
    pub binomial_n: u32,
    /// Negative-binomial `alpha` (negative binomial only).
    pub alpha: f64,
    pub seed: u64,
}

impl SimSpec {
    /// 20 neurons, 200 bins, 20 trials, two latents with length scales 15
    /// and 60, loadings uniform on `[0, 2]`.
    pub fn paper_setup(model: ModelKind, seed: u64) -> Self {
        Self {
            n_neurons: 20,
            n_bins: 200,
            n_trials: 20,
            n_latents: 2,
            length_scales: vec![15.0, 60.0],
            w_low: 0.0,
            w_high: 2.0,
            model,
            binomial_n: DEFAULT_SIM_BINOMIAL_N,
            alpha: DEFAULT_ALPHA,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_neurons == 0 || self.n_bins == 0 || self.n_trials == 0 || self.n_latents == 0 {
            return Err(Error::InvalidParameter("N, T, R and P must all be at least 1".into()));
        }
        if self.length_scales.len() != self.n_latents {
            return Err(Error::InvalidParameter(format!(
                "{} length scales for {} latents",
                self.length_scales.len(),
                self.n_latents
            )));
        }
        if !(self.w_low <= self.w_high) {
            return Err(Error::InvalidParameter(format!("w_low {} exceeds w_high {}", self.w_low, self.w_high)));
        }
        Ok(())
    }

    /// Observation model used to generate counts.
    pub fn observation_model(&self) -> Result<ObservationModel> {
        match self.model {
            ModelKind::Binomial => ObservationModel::binomial_shared(self.binomial_n, self.n_neurons),
            ModelKind::Poisson => Ok(ObservationModel::Poisson),
            ModelKind::NegBinomial => ObservationModel::negbinom(self.alpha),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub spec: SimSpec,
    pub model: ObservationModel,
    pub data: CountDataset,
    /// `P x T`
    pub x_true: DMatrix<f64>,
    /// `N x P`
    pub w_true: DMatrix<f64>,
}

impl SimOutput {
    /// True rates `f(W X)`, `N x T`.
    pub fn true_rates(&self) -> Result<DMatrix<f64>> {
        self.model.rate(&(&self.w_true * &self.x_true))
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One draw of all latents from a factorized prior, `P x T`.
pub fn sample_gp_latents_with<R: Rng + ?Sized>(fact: &PriorFactorization, rng: &mut R) -> DMatrix<f64> {
    let t = fact.n_bins();
    let mut x = DMatrix::zeros(fact.n_latents(), t);
    for j in 0..fact.n_latents() {
        let z = nalgebra::DVector::from_fn(t, |_, _| StandardNormal.sample(rng));
        let row = fact.factor(j) * z;
        x.row_mut(j).copy_from(&row.transpose());
    }
    x
}

/// Latents drawn as `L z` per row, deterministic in `seed`.
pub fn sample_gp_latents(prior: &GpPrior, seed: u64) -> Result<DMatrix<f64>> {
    let fact = prior.factorize()?;
    Ok(sample_gp_latents_with(&fact, &mut stream(seed, STREAM_LATENTS)))
}

/// One count from the model at predictor `eta`.
pub fn sample_count<R: Rng + ?Sized>(model: &ObservationModel, neuron: usize, eta: f64, rng: &mut R) -> f64 {
    let m = model.rate_at(neuron, eta);
    match model {
        ObservationModel::Poisson => sample_poisson(m, rng),
        ObservationModel::Binomial { n } => {
            let p = m / n[neuron] as f64;
            Binomial::new(n[neuron] as u64, p.clamp(0.0, 1.0)).expect("valid binomial").sample(rng) as f64
        }
        ObservationModel::NegBinomial { alpha } => {
            // gamma-mixed Poisson: shape 1/alpha, mean m
            let shape = 1.0 / alpha;
            let lambda = Gamma::new(shape, m / shape).expect("valid gamma").sample(rng);
            sample_poisson(lambda, rng)
        }
    }
}

fn sample_poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    Poisson::new(lambda).expect("positive finite rate").sample(rng)
}

/// `n_trials` independent trials of counts at predictors `W X`.
pub fn sample_counts(
    model: &ObservationModel,
    w: &LoadingMatrix,
    x: &DMatrix<f64>,
    n_trials: usize,
    seed: u64,
) -> Result<CountDataset> {
    if x.nrows() != w.n_latents() {
        return Err(Error::Dimension(format!(
            "latents have {} rows but loadings have {} columns",
            x.nrows(),
            w.n_latents()
        )));
    }
    let eta = w.as_matrix() * x;
    let (n, t) = eta.shape();
    let mut rng = stream(seed, STREAM_COUNTS);
    let mut counts = Vec::with_capacity(n * t * n_trials);
    for _ in 0..n_trials {
        for i in 0..n {
            for b in 0..t {
                counts.push(sample_count(model, i, eta[(i, b)], &mut rng));
            }
        }
    }
    CountDataset::new(n, t, n_trials, counts)
}

/// Simulates latents, loadings, and counts for `spec`.
pub fn simulate(spec: &SimSpec) -> Result<SimOutput> {
    spec.validate()?;
    let model = spec.observation_model()?;
    let prior = GpPrior::new(spec.length_scales.clone(), spec.n_bins)?;
    let x_true = sample_gp_latents(&prior, spec.seed)?;
    let mut wrng = stream(spec.seed, STREAM_LOADINGS);
    let w_true = DMatrix::from_fn(spec.n_neurons, spec.n_latents, |_, _| {
        if spec.w_low == spec.w_high {
            spec.w_low
        } else {
            wrng.random_range(spec.w_low..spec.w_high)
        }
    });
    let loadings = LoadingMatrix::new(w_true.clone())?;
    let data = sample_counts(&model, &loadings, &x_true, spec.n_trials, spec.seed)?;
    Ok(SimOutput { spec: spec.clone(), model, data, x_true, w_true })
}

/// Simulation with the standard 20-neuron, 200-bin, 20-trial setup.
pub fn paper_setup(model: ModelKind, seed: u64) -> Result<SimOutput> {
    simulate(&SimSpec::paper_setup(model, seed))
}
