//! Count-observation Gaussian process factor analysis with polynomial
//! approximate log-likelihoods.
//!
//! Binned spike counts `Y` (`N` neurons, `T` bins, `R` trials) are modelled as
//! draws from a binomial, Poisson, or negative-binomial distribution whose
//! rate is a nonlinear function of `W X`, where each row of the `P x T` latent
//! matrix `X` is a squared-exponential Gaussian process. Replacing the single
//! nonlinear term of each log-likelihood by a per-neuron quadratic makes the
//! latents integrate out in closed form, which yields an approximate marginal
//! likelihood that can be maximized directly over `W` and the length scales.
//!
//! Modules, bottom up:
//!
//! - [`poly_approx`]: least-squares quadratic fits on a grid.
//! - [`kernels`]: squared-exponential priors and their block factorization.
//! - [`obs_models`]: rates, exact likelihoods, interval rules.
//! - [`pal`]: closed-form marginalization and the approximate evidence.
//! - [`inference`]: evidence maximization and MAP latents.
//! - [`simulate`]: synthetic datasets.
//! - [`evaluate`]: latent alignment and error metrics.
//! - [`io`]: file formats shared with the command-line tool.

pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod inference;
pub mod io;
pub mod kernels;
pub mod obs_models;
pub mod pal;
pub mod poly_approx;
pub mod simulate;

pub use dataset::CountDataset;
pub use error::{Error, Result};
pub use inference::{fit, map_latents, reconstruct_rates, FitConfig, FitResult, MapEstimate};
pub use kernels::{GpPrior, PriorFactorization};
pub use obs_models::{ModelKind, ObservationModel};
pub use pal::{ApproxPosterior, LoadingMatrix, PalProblem};
pub use poly_approx::{Interval, QuadApprox};
