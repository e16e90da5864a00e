//! Shared fixtures for the benchmarks.

use countgpfa::simulate::{simulate, SimOutput, SimSpec};
use countgpfa::{GpPrior, LoadingMatrix, ModelKind};

/// Paper-scale dataset plus the true loadings and prior.
pub fn fixture(kind: ModelKind, seed: u64) -> (SimOutput, LoadingMatrix, GpPrior) {
    let spec = SimSpec::paper_setup(kind, seed);
    let sim = simulate(&spec).expect("simulation");
    let w = LoadingMatrix::new(sim.w_true.clone()).expect("loadings");
    let prior = GpPrior::new(spec.length_scales.clone(), spec.n_bins).expect("prior");
    (sim, w, prior)
}
