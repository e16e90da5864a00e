//! Spike-count observations: `N` neurons by `T` time bins by `R` trials.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Binned counts for a population recorded over repeated trials.
///
/// Counts are stored as `f64` so that diagnostic datasets (true rates in place
/// of counts) share the same code path; [`CountDataset::is_integral`] tells the
/// two apart. The bin size is documentation only: rates are always in
/// counts per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct CountDataset {
    n_neurons: usize,
    n_bins: usize,
    n_trials: usize,
    bin_size: f64,
    // index: (trial * N + neuron) * T + bin
    counts: Vec<f64>,
}

impl CountDataset {
    pub fn new(n_neurons: usize, n_bins: usize, n_trials: usize, counts: Vec<f64>) -> Result<Self> {
        if n_neurons == 0 || n_bins == 0 || n_trials == 0 {
            return Err(Error::InvalidData(format!(
                "dataset dimensions must be positive (N={n_neurons}, T={n_bins}, R={n_trials})"
            )));
        }
        let expected = n_neurons * n_bins * n_trials;
        if counts.len() != expected {
            return Err(Error::Dimension(format!(
                "expected {expected} counts for N={n_neurons}, T={n_bins}, R={n_trials}, got {}",
                counts.len()
            )));
        }
        if let Some(pos) = counts.iter().position(|c| !c.is_finite() || *c < 0.0) {
            let (r, i, t) = (pos / (n_neurons * n_bins), (pos / n_bins) % n_neurons, pos % n_bins);
            return Err(Error::InvalidData(format!(
                "count {} at trial {r}, neuron {i}, bin {t} is not a nonnegative number",
                counts[pos]
            )));
        }
        Ok(Self { n_neurons, n_bins, n_trials, bin_size: 1.0, counts })
    }

    /// Builds a dataset from one `N x T` matrix per trial.
    pub fn from_trials(trials: &[DMatrix<f64>]) -> Result<Self> {
        let first = trials
            .first()
            .ok_or_else(|| Error::InvalidData("no trials".into()))?;
        let (n, t) = first.shape();
        let mut counts = Vec::with_capacity(n * t * trials.len());
        for (r, m) in trials.iter().enumerate() {
            if m.shape() != (n, t) {
                return Err(Error::Dimension(format!(
                    "trial {r} has shape {:?}, expected {:?}",
                    m.shape(),
                    (n, t)
                )));
            }
            for i in 0..n {
                counts.extend(m.row(i).iter());
            }
        }
        Self::new(n, t, trials.len(), counts)
    }

    pub fn n_neurons(&self) -> usize {
        self.n_neurons
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_trials(&self) -> usize {
        self.n_trials
    }

    pub fn bin_size(&self) -> f64 {
        self.bin_size
    }

    #[inline]
    pub fn count(&self, trial: usize, neuron: usize, bin: usize) -> f64 {
        self.counts[(trial * self.n_neurons + neuron) * self.n_bins + bin]
    }

    /// Raw storage in `(trial, neuron, bin)` order.
    pub fn as_slice(&self) -> &[f64] {
        &self.counts
    }

    /// One trial as an `N x T` matrix.
    pub fn trial(&self, trial: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_neurons, self.n_bins, |i, t| self.count(trial, i, t))
    }

    /// Counts summed over trials, `N x T`.
    pub fn trial_sums(&self) -> DMatrix<f64> {
        let mut sums = DMatrix::zeros(self.n_neurons, self.n_bins);
        for r in 0..self.n_trials {
            for i in 0..self.n_neurons {
                for t in 0..self.n_bins {
                    sums[(i, t)] += self.count(r, i, t);
                }
            }
        }
        sums
    }

    /// Mean count per bin for one neuron, pooled over bins and trials.
    pub fn neuron_mean(&self, neuron: usize) -> f64 {
        let total: f64 = (0..self.n_trials)
            .flat_map(|r| (0..self.n_bins).map(move |t| (r, t)))
            .map(|(r, t)| self.count(r, neuron, t))
            .sum();
        total / (self.n_bins * self.n_trials) as f64
    }

    /// Largest count observed for one neuron in any bin of any trial.
    pub fn max_count(&self, neuron: usize) -> f64 {
        (0..self.n_trials)
            .flat_map(|r| (0..self.n_bins).map(move |t| (r, t)))
            .map(|(r, t)| self.count(r, neuron, t))
            .fold(0.0, f64::max)
    }

    pub fn is_integral(&self) -> bool {
        self.counts.iter().all(|c| c.fract() == 0.0)
    }

    /// Keeps only the listed neurons, in the given order.
    pub fn subset_neurons(&self, neurons: &[usize]) -> Result<Self> {
        if let Some(&bad) = neurons.iter().find(|&&i| i >= self.n_neurons) {
            return Err(Error::Dimension(format!(
                "neuron index {bad} out of range for {} neurons",
                self.n_neurons
            )));
        }
        let mut counts = Vec::with_capacity(neurons.len() * self.n_bins * self.n_trials);
        for r in 0..self.n_trials {
            for &i in neurons {
                let start = (r * self.n_neurons + i) * self.n_bins;
                counts.extend_from_slice(&self.counts[start..start + self.n_bins]);
            }
        }
        Self::new(neurons.len(), self.n_bins, self.n_trials, counts)
    }
}
