//! Count observation models: rates, exact log-likelihoods, the nonlinear
//! terms that get a quadratic stand-in, and the per-neuron interval rules.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::dataset::CountDataset;
use crate::error::{Error, Result};
use crate::poly_approx::{fit_quadratic, Interval, QuadApprox, DEFAULT_GRID_STEP};

/// Linear predictors above this value are clamped before exponentiation.
pub const MAX_PREDICTOR: f64 = 30.0;

pub const DEFAULT_ALPHA: f64 = 1.0;

pub const POISSON_HALF_WIDTH: f64 = 2.0;
pub const BINOMIAL_HALF_WIDTH: f64 = 4.0;
pub const NEGBINOM_HALF_WIDTH: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Binomial,
    Poisson,
    #[serde(rename = "negbinom")]
    NegBinomial,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Binomial, ModelKind::Poisson, ModelKind::NegBinomial];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Binomial => "binomial",
            ModelKind::Poisson => "poisson",
            ModelKind::NegBinomial => "negbinom",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binomial" => Ok(ModelKind::Binomial),
            "poisson" => Ok(ModelKind::Poisson),
            "negbinom" => Ok(ModelKind::NegBinomial),
            other => Err(Error::InvalidParameter(format!(
                "unknown model '{other}' (expected binomial, poisson or negbinom)"
            ))),
        }
    }
}

/// Distribution of a single count given its linear predictor.
#[derive(Debug, Clone, PartialEq)]
pub enum ObservationModel {
    /// `y ~ Binomial(n_i, sigmoid(eta))`, one `n` per neuron.
    Binomial { n: Vec<u32> },
    /// `y ~ Poisson(exp(eta))`
    Poisson,
    /// Mean `exp(eta)`, variance `m + alpha m^2`.
    NegBinomial { alpha: f64 },
}

/// Scalar nonlinearity appearing in a model's log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NonlinearTerm {
    /// `exp(x)`
    Exp,
    /// `-log(1 + exp(-x))`, the log-sigmoid.
    LogSigmoid,
    /// `log(1 + exp(-x))`
    SoftplusNeg,
    /// `log(1 + alpha exp(x))`
    LogOnePlusAlphaExp(f64),
}

impl NonlinearTerm {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            NonlinearTerm::Exp => x.exp(),
            NonlinearTerm::LogSigmoid => -softplus(-x),
            NonlinearTerm::SoftplusNeg => softplus(-x),
            NonlinearTerm::LogOnePlusAlphaExp(alpha) => softplus(x + alpha.ln()),
        }
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamped_exp(x: f64) -> f64 {
    x.min(MAX_PREDICTOR).exp()
}

/// Per-neuron approximation intervals and their centres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronIntervals {
    pub intervals: Vec<Interval>,
    pub centers: Vec<f64>,
}

impl ObservationModel {
    pub fn poisson() -> Self {
        ObservationModel::Poisson
    }

    pub fn binomial(n: Vec<u32>) -> Result<Self> {
        if n.is_empty() || n.contains(&0) {
            return Err(Error::InvalidParameter("binomial n must be at least 1 for every neuron".into()));
        }
        Ok(ObservationModel::Binomial { n })
    }

    /// The same `n` for all `n_neurons` neurons.
    pub fn binomial_shared(n: u32, n_neurons: usize) -> Result<Self> {
        Self::binomial(vec![n; n_neurons])
    }

    /// Per-neuron `n` set to the largest count observed for that neuron (at least 1).
    pub fn binomial_from_data(data: &CountDataset) -> Self {
        let n = (0..data.n_neurons())
            .map(|i| data.max_count(i).ceil().max(1.0) as u32)
            .collect();
        ObservationModel::Binomial { n }
    }

    pub fn negbinom(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("negative-binomial alpha {alpha} must be positive")));
        }
        Ok(ObservationModel::NegBinomial { alpha })
    }

    /// Default model of the given kind fitted to `data` (binomial `n` from the
    /// per-neuron maxima, negative-binomial `alpha = 1`).
    pub fn for_data(kind: ModelKind, data: &CountDataset) -> Self {
        match kind {
            ModelKind::Binomial => Self::binomial_from_data(data),
            ModelKind::Poisson => ObservationModel::Poisson,
            ModelKind::NegBinomial => ObservationModel::NegBinomial { alpha: DEFAULT_ALPHA },
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ObservationModel::Binomial { .. } => ModelKind::Binomial,
            ObservationModel::Poisson => ModelKind::Poisson,
            ObservationModel::NegBinomial { .. } => ModelKind::NegBinomial,
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            ObservationModel::NegBinomial { alpha } => Some(*alpha),
            _ => None,
        }
    }

    pub fn binomial_n(&self) -> Option<&[u32]> {
        match self {
            ObservationModel::Binomial { n } => Some(n),
            _ => None,
        }
    }

    /// Checks that the model's per-neuron parameters fit the dataset.
    pub fn validate(&self, data: &CountDataset) -> Result<()> {
        match self {
            ObservationModel::Binomial { n } => {
                if n.len() != data.n_neurons() {
                    return Err(Error::Dimension(format!(
                        "binomial model has {} n values for {} neurons",
                        n.len(),
                        data.n_neurons()
                    )));
                }
                for (i, &ni) in n.iter().enumerate() {
                    let max = data.max_count(i);
                    if max > ni as f64 {
                        return Err(Error::InvalidData(format!(
                            "neuron {i} has count {max} exceeding binomial n = {ni}"
                        )));
                    }
                }
                Ok(())
            }
            ObservationModel::Poisson => Ok(()),
            ObservationModel::NegBinomial { alpha } => {
                if !(*alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::InvalidParameter(format!("alpha {alpha} must be positive")));
                }
                Ok(())
            }
        }
    }

    fn check_neurons(&self, n_neurons: usize) -> Result<()> {
        match self {
            ObservationModel::Binomial { n } if n.len() != n_neurons => Err(Error::Dimension(format!(
                "binomial model has {} n values for {n_neurons} neurons",
                n.len()
            ))),
            _ => Ok(()),
        }
    }

    /// Expected count of `neuron` at linear predictor `eta`.
    pub fn rate_at(&self, neuron: usize, eta: f64) -> f64 {
        match self {
            ObservationModel::Binomial { n } => n[neuron] as f64 * sigmoid(eta),
            ObservationModel::Poisson | ObservationModel::NegBinomial { .. } => clamped_exp(eta),
        }
    }

    /// Elementwise rates for an `N x T` predictor matrix.
    pub fn rate(&self, eta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_neurons(eta.nrows())?;
        Ok(DMatrix::from_fn(eta.nrows(), eta.ncols(), |i, t| self.rate_at(i, eta[(i, t)])))
    }

    /// Exact log-likelihood of one count, constants included.
    pub fn loglik_at(&self, neuron: usize, y: f64, eta: f64) -> f64 {
        match self {
            ObservationModel::Poisson => y * eta - clamped_exp(eta) - ln_gamma(y + 1.0),
            ObservationModel::Binomial { n } => {
                let n = n[neuron] as f64;
                ln_gamma(n + 1.0) - ln_gamma(y + 1.0) - ln_gamma(n - y + 1.0) + y * eta - n * softplus(eta)
            }
            ObservationModel::NegBinomial { alpha } => {
                let r = 1.0 / alpha;
                let la = alpha.ln();
                ln_gamma(y + r) - ln_gamma(r) - ln_gamma(y + 1.0) + y * (la + eta) - (y + r) * softplus(eta + la)
            }
        }
    }

    /// Exact log-likelihood of the whole dataset given `N x T` predictors
    /// shared by all trials.
    pub fn exact_loglik(&self, data: &CountDataset, eta: &DMatrix<f64>) -> Result<f64> {
        if eta.shape() != (data.n_neurons(), data.n_bins()) {
            return Err(Error::Dimension(format!(
                "predictor shape {:?} does not match dataset {} x {}",
                eta.shape(),
                data.n_neurons(),
                data.n_bins()
            )));
        }
        self.validate(data)?;
        let mut total = 0.0;
        for r in 0..data.n_trials() {
            for i in 0..data.n_neurons() {
                for t in 0..data.n_bins() {
                    total += self.loglik_at(i, data.count(r, i, t), eta[(i, t)]);
                }
            }
        }
        Ok(total)
    }

    /// First derivative and negated second derivative of the log-likelihood of
    /// `n_trials` counts (summing to `y_sum`) with respect to their shared
    /// predictor.
    pub fn loglik_derivatives(&self, neuron: usize, y_sum: f64, n_trials: usize, eta: f64) -> (f64, f64) {
        let r_trials = n_trials as f64;
        match self {
            ObservationModel::Poisson => {
                let e = clamped_exp(eta);
                (y_sum - r_trials * e, r_trials * e)
            }
            ObservationModel::Binomial { n } => {
                let n = n[neuron] as f64;
                let s = sigmoid(eta);
                (y_sum - r_trials * n * s, r_trials * n * s * (1.0 - s))
            }
            ObservationModel::NegBinomial { alpha } => {
                let weight = y_sum + r_trials / alpha;
                let s = sigmoid(eta + alpha.ln());
                (y_sum - weight * s, weight * s * (1.0 - s))
            }
        }
    }

    /// The nonlinear term as it appears in the log-likelihood:
    /// `-log(1+e^-x)` (binomial), `e^x` (Poisson), `log(1+alpha e^x)` (negative binomial).
    pub fn nonlinear_term(&self) -> NonlinearTerm {
        match self {
            ObservationModel::Binomial { .. } => NonlinearTerm::LogSigmoid,
            ObservationModel::Poisson => NonlinearTerm::Exp,
            ObservationModel::NegBinomial { alpha } => NonlinearTerm::LogOnePlusAlphaExp(*alpha),
        }
    }

    /// The convex function whose quadratic fit enters the approximate
    /// log-joint with a negative sign. For the binomial model this is
    /// `log(1+e^-x)`, the negation of [`Self::nonlinear_term`]; for the other
    /// two models the terms coincide.
    pub fn penalty_term(&self) -> NonlinearTerm {
        match self {
            ObservationModel::Binomial { .. } => NonlinearTerm::SoftplusNeg,
            other => other.nonlinear_term(),
        }
    }

    pub fn half_width(&self) -> f64 {
        match self {
            ObservationModel::Binomial { .. } => BINOMIAL_HALF_WIDTH,
            ObservationModel::Poisson => POISSON_HALF_WIDTH,
            ObservationModel::NegBinomial { .. } => NEGBINOM_HALF_WIDTH,
        }
    }

    /// Centres each neuron's interval at the predictor that reproduces its
    /// empirical mean rate. Silent neurons use a floor rate of `1/(T R)`.
    pub fn select_intervals(&self, data: &CountDataset) -> Result<NeuronIntervals> {
        self.check_neurons(data.n_neurons())?;
        let floor = 1.0 / (data.n_bins() * data.n_trials()) as f64;
        let half = self.half_width();
        let mut intervals = Vec::with_capacity(data.n_neurons());
        let mut centers = Vec::with_capacity(data.n_neurons());
        for i in 0..data.n_neurons() {
            let mean = data.neuron_mean(i);
            let center = match self {
                ObservationModel::Binomial { n } => {
                    let n = n[i] as f64;
                    let eps = floor / n;
                    let p = (mean / n).clamp(eps, 1.0 - eps);
                    (p / (1.0 - p)).ln()
                }
                _ => mean.max(floor).ln(),
            };
            intervals.push(Interval::centered(center, half)?);
            centers.push(center);
        }
        Ok(NeuronIntervals { intervals, centers })
    }

    /// Least-squares quadratic of [`Self::penalty_term`] on each neuron's interval.
    pub fn fit_neuron_quadratics(&self, intervals: &NeuronIntervals) -> Result<Vec<QuadApprox>> {
        let term = self.penalty_term();
        intervals
            .intervals
            .iter()
            .map(|&iv| fit_quadratic(|x| term.eval(x), iv, DEFAULT_GRID_STEP))
            .collect()
    }
}

pub fn rate(model: &ObservationModel, eta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    model.rate(eta)
}

pub fn exact_loglik(model: &ObservationModel, data: &CountDataset, eta: &DMatrix<f64>) -> Result<f64> {
    model.exact_loglik(data, eta)
}

pub fn nonlinear_term(model: &ObservationModel) -> NonlinearTerm {
    model.nonlinear_term()
}

pub fn select_intervals(model: &ObservationModel, data: &CountDataset) -> Result<NeuronIntervals> {
    model.select_intervals(data)
}

pub fn fit_neuron_quadratics(model: &ObservationModel, intervals: &NeuronIntervals) -> Result<Vec<QuadApprox>> {
    model.fit_neuron_quadratics(intervals)
}
