//! Closed-form marginalization of the quadratic approximate log-joint.
//!
//! With every nonlinear term replaced by its per-neuron quadratic, the
//! log-joint over stacked latents `x` is
//!
//! ```text
//! v^T x - 1/2 x^T H x + log N(x; 0, K) + const
//! ```
//!
//! so the latents integrate out exactly. The posterior precision is
//! `Sigma^{-1} = H + K^{-1}`, the mean is `mu = Sigma v`, and the log evidence
//! (dropping terms that do not depend on the loadings or length scales) is
//!
//! ```text
//! 1/2 log|Sigma| + 1/2 mu^T Sigma^{-1} mu - 1/2 log|K|.
//! ```
//!
//! `H` couples latents only within a time bin: at bin `t` it is the `P x P`
//! matrix `sum_i g_it w_i w_i^T`. The Kronecker-structured predictor map
//! `W (x) I_T` is never materialized.
//!
//! Numerically the evidence is evaluated in whitened coordinates: with
//! `K = L L^T` blockwise and `B = I + L^T H L = C C^T`,
//! `log|Sigma| - log|K| = -log|B|` and `mu^T Sigma^{-1} mu = |C^{-1} L^T v|^2`.
//! `B` has eigenvalues at least one regardless of how close to singular the
//! squared-exponential blocks are.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::dataset::CountDataset;
use crate::error::{Error, Result};
use crate::kernels::{kernel_matrix_dlog_length, GpPrior, PriorFactorization};
use crate::obs_models::{NeuronIntervals, ObservationModel};
use crate::poly_approx::QuadApprox;

/// `N x P` loading matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingMatrix(DMatrix<f64>);

impl LoadingMatrix {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("loading matrix has non-finite entries".into()));
        }
        Ok(Self(w))
    }

    pub fn zeros(n_neurons: usize, n_latents: usize) -> Self {
        Self(DMatrix::zeros(n_neurons, n_latents))
    }

    pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "loading data has {} entries, expected {rows} x {cols}",
                data.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(rows, cols, data))
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let (n, p) = self.0.shape();
        (0..n).flat_map(|i| (0..p).map(move |j| (i, j))).map(|ij| self.0[ij]).collect()
    }

    pub fn n_neurons(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_latents(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

/// Gaussian approximation to the posterior over stacked latents.
#[derive(Debug, Clone)]
pub struct ApproxPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub log_evidence: f64,
    n_latents: usize,
    n_bins: usize,
}

impl ApproxPosterior {
    /// Posterior mean reshaped to `P x T`.
    pub fn mean_latents(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_latents, self.n_bins, |p, t| self.mean[p * self.n_bins + t])
    }

    /// Lower Cholesky factor of the posterior covariance.
    pub fn sigma_cholesky(&self) -> Result<DMatrix<f64>> {
        self.covariance
            .clone()
            .cholesky()
            .map(|c| c.unpack())
            .ok_or(Error::PrecisionNotPositiveDefinite { pivot: f64::NAN })
    }
}

/// Evidence together with its gradient in the loadings and log length scales.
#[derive(Debug, Clone)]
pub struct EvidenceGradient {
    pub value: f64,
    pub d_loadings: DMatrix<f64>,
    pub d_log_length_scales: DVector<f64>,
}

/// `H` restricted to one bin: `P x P` per bin.
pub(crate) struct BinPrecision {
    p: usize,
    t: usize,
    // (t * P + p) * P + q
    data: Vec<f64>,
}

impl BinPrecision {
    /// `H_t = sum_i weights[i, t] w_i w_i^T`. With `time_invariant` only
    /// column 0 of `weights` is read.
    pub(crate) fn new(wm: &DMatrix<f64>, weights: &DMatrix<f64>, time_invariant: bool) -> Self {
        let (n, p) = wm.shape();
        let t_bins = weights.ncols();
        let mut data = vec![0.0; t_bins * p * p];
        let fill = |out: &mut [f64], t: usize| {
            for i in 0..n {
                let g = weights[(i, t)];
                if g == 0.0 {
                    continue;
                }
                for a in 0..p {
                    let ga = g * wm[(i, a)];
                    for b in 0..p {
                        out[a * p + b] += ga * wm[(i, b)];
                    }
                }
            }
        };
        if time_invariant {
            let mut block = vec![0.0; p * p];
            fill(&mut block, 0);
            for t in 0..t_bins {
                data[t * p * p..(t + 1) * p * p].copy_from_slice(&block);
            }
        } else {
            for t in 0..t_bins {
                fill(&mut data[t * p * p..(t + 1) * p * p], t);
            }
        }
        BinPrecision { p, t: t_bins, data }
    }

    /// `B = I + L^T H L` for the block-diagonal prior factor `L`.
    pub(crate) fn whitened(&self, fact: &PriorFactorization) -> DMatrix<f64> {
        let (p, t_bins) = (self.p, self.t);
        let d = p * t_bins;
        let mut b = DMatrix::<f64>::zeros(d, d);
        let mut scaled = DMatrix::<f64>::zeros(t_bins, t_bins);
        for pp in 0..p {
            let lpt = fact.factor(pp).transpose();
            for qq in pp..p {
                let lq = fact.factor(qq);
                let mut any = false;
                for t in 0..t_bins {
                    let s = self.get(pp, qq, t);
                    any |= s != 0.0;
                    scaled.row_mut(t).copy_from(&(lq.row(t) * s));
                }
                if !any {
                    continue;
                }
                let block = &lpt * &scaled;
                b.view_mut((pp * t_bins, qq * t_bins), (t_bins, t_bins)).copy_from(&block);
                if qq != pp {
                    b.view_mut((qq * t_bins, pp * t_bins), (t_bins, t_bins)).copy_from(&block.transpose());
                }
            }
        }
        for k in 0..d {
            b[(k, k)] += 1.0;
        }
        // symmetrize round-off in diagonal blocks
        for pp in 0..p {
            let mut blk = b.view_mut((pp * t_bins, pp * t_bins), (t_bins, t_bins));
            for r in 0..t_bins {
                for c in 0..r {
                    let m = 0.5 * (blk[(r, c)] + blk[(c, r)]);
                    blk[(r, c)] = m;
                    blk[(c, r)] = m;
                }
            }
        }
        b
    }

    #[inline]
    fn get(&self, p: usize, q: usize, t: usize) -> f64 {
        self.data[(t * self.p + p) * self.p + q]
    }

    pub(crate) fn dense(&self) -> DMatrix<f64> {
        let d = self.p * self.t;
        let mut out = DMatrix::zeros(d, d);
        for t in 0..self.t {
            for p in 0..self.p {
                for q in 0..self.p {
                    out[(p * self.t + t, q * self.t + t)] = self.get(p, q, t);
                }
            }
        }
        out
    }

    /// `H x` for a stacked vector.
    pub(crate) fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.p * self.t, |k, _| {
            let (p, t) = (k / self.t, k % self.t);
            (0..self.p).map(|q| self.get(p, q, t) * x[q * self.t + t]).sum()
        })
    }
}

/// Data-dependent pieces of the approximate log-joint for one model and
/// dataset. The quadratics depend only on the data, never on the loadings or
/// length scales, so they are computed once here.
#[derive(Debug, Clone)]
pub struct PalProblem {
    model: ObservationModel,
    n_neurons: usize,
    n_bins: usize,
    n_trials: usize,
    y_sum: DMatrix<f64>,
    intervals: Option<NeuronIntervals>,
    quads: Vec<QuadApprox>,
    // g_it: weight of w_i w_i^T in H at bin t
    precision_weights: DMatrix<f64>,
    // u_it: v = (W (x) I)^T vec(u)
    residuals: DMatrix<f64>,
    time_invariant: bool,
}

impl PalProblem {
    /// Selects intervals and fits the per-neuron quadratics from the data.
    pub fn new(model: ObservationModel, data: &CountDataset) -> Result<Self> {
        model.validate(data)?;
        let intervals = model.select_intervals(data)?;
        let quads = model.fit_neuron_quadratics(&intervals)?;
        let mut problem = Self::with_quads(model, data, quads)?;
        problem.intervals = Some(intervals);
        Ok(problem)
    }

    /// Uses caller-supplied quadratics (one per neuron).
    pub fn with_quads(model: ObservationModel, data: &CountDataset, quads: Vec<QuadApprox>) -> Result<Self> {
        model.validate(data)?;
        let (n, t_bins, r) = (data.n_neurons(), data.n_bins(), data.n_trials());
        if quads.len() != n {
            return Err(Error::Dimension(format!("{} quadratics for {n} neurons", quads.len())));
        }
        let y_sum = data.trial_sums();
        let rf = r as f64;
        let mut precision_weights = DMatrix::zeros(n, t_bins);
        let mut residuals = DMatrix::zeros(n, t_bins);
        for i in 0..n {
            let QuadApprox { a, b, .. } = quads[i];
            for t in 0..t_bins {
                let y = y_sum[(i, t)];
                let (weight, resid) = match &model {
                    ObservationModel::Poisson => (rf, y - rf * b),
                    ObservationModel::Binomial { n } => {
                        let ni = n[i] as f64;
                        (rf * ni, y - rf * ni - rf * ni * b)
                    }
                    ObservationModel::NegBinomial { alpha } => (rf / alpha + y, y - y * b - rf / alpha * b),
                };
                precision_weights[(i, t)] = 2.0 * a * weight;
                residuals[(i, t)] = resid;
            }
        }
        let time_invariant = !matches!(model, ObservationModel::NegBinomial { .. });
        Ok(Self {
            model,
            n_neurons: n,
            n_bins: t_bins,
            n_trials: r,
            y_sum,
            intervals: None,
            quads,
            precision_weights,
            residuals,
            time_invariant,
        })
    }

    pub fn model(&self) -> &ObservationModel {
        &self.model
    }

    pub fn quads(&self) -> &[QuadApprox] {
        &self.quads
    }

    pub fn intervals(&self) -> Option<&NeuronIntervals> {
        self.intervals.as_ref()
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

    /// Per-(neuron, bin) weights `g_it` with `H_t = sum_i g_it w_i w_i^T`.
    pub fn precision_weights(&self) -> &DMatrix<f64> {
        &self.precision_weights
    }

    /// Per-(neuron, bin) residuals `u_it` with `v = (W (x) I)^T vec(u)`.
    pub fn residuals(&self) -> &DMatrix<f64> {
        &self.residuals
    }

    fn check(&self, w: &LoadingMatrix, fact: Option<&PriorFactorization>) -> Result<()> {
        if w.n_neurons() != self.n_neurons {
            return Err(Error::Dimension(format!(
                "loading matrix has {} rows for {} neurons",
                w.n_neurons(),
                self.n_neurons
            )));
        }
        if let Some(f) = fact {
            if f.n_latents() != w.n_latents() || f.n_bins() != self.n_bins {
                return Err(Error::Dimension(format!(
                    "prior is {} latents x {} bins, loadings have {} latents and data {} bins",
                    f.n_latents(),
                    f.n_bins(),
                    w.n_latents(),
                    self.n_bins
                )));
            }
        }
        Ok(())
    }

    fn bin_precision(&self, w: &LoadingMatrix) -> BinPrecision {
        BinPrecision::new(w.as_matrix(), &self.precision_weights, self.time_invariant)
    }

    /// Dense `Sigma^{-1} = H + K^{-1}`.
    pub fn precision(&self, w: &LoadingMatrix, fact: &PriorFactorization) -> Result<DMatrix<f64>> {
        self.check(w, Some(fact))?;
        Ok(self.bin_precision(w).dense() + fact.dense_inverse())
    }

    /// `v` with `mu = Sigma v`.
    pub fn linear_term(&self, w: &LoadingMatrix) -> Result<DVector<f64>> {
        self.check(w, None)?;
        // P x T
        let v = w.as_matrix().tr_mul(&self.residuals);
        let (p, t) = v.shape();
        Ok(DVector::from_fn(p * t, |k, _| v[(k / t, k % t)]))
    }

    fn whiten(&self, w: &LoadingMatrix, fact: &PriorFactorization) -> Result<Whitened> {
        self.check(w, Some(fact))?;
        let h = self.bin_precision(w);
        let b = h.whitened(fact);
        let chol = match b.clone().cholesky() {
            Some(c) => c.unpack(),
            None => return Err(Error::PrecisionNotPositiveDefinite { pivot: failing_pivot(&b) }),
        };
        let log_det_b = 2.0 * chol.diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let v = self.linear_term(w)?;
        let s = fact.lt_mul(&v)?;
        let beta = chol.solve_lower_triangular(&s).expect("positive diagonal");
        let gamma = chol.tr_solve_lower_triangular(&beta).expect("positive diagonal");
        let mean = fact.l_mul(&gamma)?;
        let value = -0.5 * log_det_b + 0.5 * beta.norm_squared();
        Ok(Whitened { h, chol, value, v, mean })
    }

    /// Approximate log evidence alone.
    pub fn log_evidence(&self, w: &LoadingMatrix, fact: &PriorFactorization) -> Result<f64> {
        Ok(self.whiten(w, fact)?.value)
    }

    fn covariance(&self, wh: &Whitened, fact: &PriorFactorization) -> DMatrix<f64> {
        let t_bins = fact.n_bins();
        let d = fact.dim();
        let mut lt = DMatrix::zeros(d, d);
        for j in 0..fact.n_latents() {
            lt.view_mut((j * t_bins, j * t_bins), (t_bins, t_bins))
                .copy_from(&fact.factor(j).transpose());
        }
        // Z = C^{-1} L^T, Sigma = Z^T Z
        let z = wh.chol.solve_lower_triangular(&lt).expect("positive diagonal");
        z.tr_mul(&z)
    }

    /// Evidence and the Gaussian posterior over stacked latents.
    pub fn posterior(&self, w: &LoadingMatrix, fact: &PriorFactorization) -> Result<ApproxPosterior> {
        let wh = self.whiten(w, fact)?;
        let covariance = self.covariance(&wh, fact);
        Ok(ApproxPosterior {
            mean: wh.mean,
            covariance,
            log_evidence: wh.value,
            n_latents: w.n_latents(),
            n_bins: self.n_bins,
        })
    }

    /// Evidence with its exact gradient in `W` and `log l`.
    ///
    /// With `M = Sigma + mu mu^T`, `dE = mu^T dv - 1/2 tr(M dH)` for the
    /// loadings. For the length scales,
    /// `dE = 1/2 tr[(psi psi^T - H + H Sigma H) dK]` with `psi = v - H mu = K^{-1} mu`;
    /// neither expression needs `K^{-1}`.
    pub fn evidence_with_gradient(&self, w: &LoadingMatrix, fact: &PriorFactorization) -> Result<EvidenceGradient> {
        let wh = self.whiten(w, fact)?;
        let sigma = self.covariance(&wh, fact);
        let (n, p) = w.as_matrix().shape();
        let t_bins = self.n_bins;
        let wm = w.as_matrix();
        let mu = &wh.mean;

        // S_t = Sigma_tt + mu_t mu_t^T, P x P per bin
        let s_block = |t: usize, a: usize, b: usize| sigma[(a * t_bins + t, b * t_bins + t)] + mu[a * t_bins + t] * mu[b * t_bins + t];

        let mut d_w = DMatrix::zeros(n, p);
        // mu^T dv part: sum_t mu_p(t) u_it
        for i in 0..n {
            for a in 0..p {
                d_w[(i, a)] = (0..t_bins).map(|t| mu[a * t_bins + t] * self.residuals[(i, t)]).sum();
            }
        }
        if self.time_invariant {
            let mut s_sum = DMatrix::<f64>::zeros(p, p);
            for t in 0..t_bins {
                for a in 0..p {
                    for b in 0..p {
                        s_sum[(a, b)] += s_block(t, a, b);
                    }
                }
            }
            for i in 0..n {
                let g = self.precision_weights[(i, 0)];
                for a in 0..p {
                    let sw: f64 = (0..p).map(|b| s_sum[(a, b)] * wm[(i, b)]).sum();
                    d_w[(i, a)] -= g * sw;
                }
            }
        } else {
            for t in 0..t_bins {
                for i in 0..n {
                    let g = self.precision_weights[(i, t)];
                    for a in 0..p {
                        let sw: f64 = (0..p).map(|b| s_block(t, a, b) * wm[(i, b)]).sum();
                        d_w[(i, a)] -= g * sw;
                    }
                }
            }
        }

        let psi = &wh.v - wh.h.apply(mu);
        let mut d_ell = DVector::zeros(p);
        for a in 0..p {
            let dk = kernel_matrix_dlog_length(fact.length_scales()[a], t_bins);
            let psi_a = psi.rows(a * t_bins, t_bins);
            let quad = (psi_a.transpose() * &dk * psi_a)[(0, 0)];
            // sum_{t,s} (H Sigma H)_aa[t,s] dK[t,s]
            let mut hsh = 0.0;
            for q in 0..p {
                for r in 0..p {
                    for t in 0..t_bins {
                        let hq = wh.h.get(a, q, t);
                        if hq == 0.0 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for s in 0..t_bins {
                            acc += sigma[(q * t_bins + t, r * t_bins + s)] * wh.h.get(r, a, s) * dk[(t, s)];
                        }
                        hsh += hq * acc;
                    }
                }
            }
            d_ell[a] = 0.5 * (quad + hsh);
        }
        Ok(EvidenceGradient { value: wh.value, d_loadings: d_w, d_log_length_scales: d_ell })
    }

    /// Terms that depend on the negative-binomial `alpha` but not on the
    /// loadings or length scales. Zero for the other models. Added to the
    /// evidence when `alpha` itself is optimized.
    pub fn alpha_constant(&self, data: &CountDataset) -> f64 {
        let ObservationModel::NegBinomial { alpha } = self.model else {
            return 0.0;
        };
        let r = 1.0 / alpha;
        let la = alpha.ln();
        let mut total = 0.0;
        for tr in 0..data.n_trials() {
            for i in 0..data.n_neurons() {
                for t in 0..data.n_bins() {
                    let y = data.count(tr, i, t);
                    total += ln_gamma(y + r) - ln_gamma(r) + y * la;
                }
            }
        }
        let rf = self.n_trials as f64;
        for i in 0..self.n_neurons {
            let c = self.quads[i].c;
            for t in 0..self.n_bins {
                total -= (self.y_sum[(i, t)] + rf * r) * c;
            }
        }
        total
    }
}

struct Whitened {
    h: BinPrecision,
    chol: DMatrix<f64>,
    value: f64,
    v: DVector<f64>,
    mean: DVector<f64>,
}

/// First non-positive pivot met by an unpivoted Cholesky sweep.
pub(crate) fn failing_pivot(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let d = m[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if d <= 0.0 || !d.is_finite() {
            return d;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            l[(i, j)] = (m[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>()) / ljj;
        }
    }
    f64::NAN
}

/// Dense posterior precision `Sigma^{-1}` for the given quadratics.
pub fn assemble_precision(
    model: &ObservationModel,
    w: &LoadingMatrix,
    quads: &[QuadApprox],
    fact: &PriorFactorization,
    data: &CountDataset,
) -> Result<DMatrix<f64>> {
    PalProblem::with_quads(model.clone(), data, quads.to_vec())?.precision(w, fact)
}

/// Linear term `v` of the quadratic log-joint, accumulated over trials.
pub fn assemble_linear(
    model: &ObservationModel,
    w: &LoadingMatrix,
    quads: &[QuadApprox],
    data: &CountDataset,
) -> Result<DVector<f64>> {
    PalProblem::with_quads(model.clone(), data, quads.to_vec())?.linear_term(w)
}

/// Approximate log evidence and posterior, recomputing intervals and
/// quadratics from the data.
pub fn evidence(
    model: &ObservationModel,
    w: &LoadingMatrix,
    prior: &GpPrior,
    data: &CountDataset,
) -> Result<(f64, ApproxPosterior)> {
    let problem = PalProblem::new(model.clone(), data)?;
    let fact = prior.factorize()?;
    let post = problem.posterior(w, &fact)?;
    Ok((post.log_evidence, post))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::kernel_matrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn models(n_neurons: usize) -> Vec<ObservationModel> {
        vec![
            ObservationModel::poisson(),
            ObservationModel::binomial(vec![6; n_neurons]).unwrap(),
            ObservationModel::negbinom(0.7).unwrap(),
        ]
    }

    fn random_data(n: usize, t: usize, r: usize, seed: u64) -> CountDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CountDataset::new(n, t, r, (0..n * t * r).map(|_| rng.random_range(0..=6) as f64).collect()).unwrap()
    }

    fn random_w(n: usize, p: usize, scale: f64, seed: u64) -> LoadingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LoadingMatrix::new(DMatrix::from_fn(n, p, |_, _| scale * rng.random_range(-1.0..1.0))).unwrap()
    }

    /// Dense prior covariance built straight from the kernel.
    fn dense_k(ells: &[f64], t: usize, jitter: f64) -> DMatrix<f64> {
        let p = ells.len();
        let mut k = DMatrix::zeros(p * t, p * t);
        for (j, &l) in ells.iter().enumerate() {
            let kj = kernel_matrix(l, t) + DMatrix::identity(t, t) * jitter;
            k.view_mut((j * t, j * t), (t, t)).copy_from(&kj);
        }
        k
    }

    /// Evidence from the textbook formula, with explicit inverses.
    fn literal_evidence(h: &DMatrix<f64>, v: &DVector<f64>, k: &DMatrix<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let k_inv = k.clone().try_inverse().unwrap();
        let prec = h + &k_inv;
        let sigma = prec.clone().try_inverse().unwrap();
        let mu = &sigma * v;
        let e = 0.5 * sigma.determinant().ln() + 0.5 * (mu.transpose() * &prec * &mu)[(0, 0)] - 0.5 * k.determinant().ln();
        (e, mu, sigma)
    }

    #[test]
    fn matches_literal_formula() {
        let ells = [1.3, 2.1];
        let (n, t, r) = (3, 4, 2);
        let data = random_data(n, t, r, 1);
        for model in models(n) {
            let problem = PalProblem::new(model.clone(), &data).unwrap();
            let w = random_w(n, 2, 0.8, 2);
            let fact = GpPrior::with_jitter(ells.to_vec(), t, 1e-3).unwrap().factorize().unwrap();
            let k = dense_k(&ells, t, 1e-3);
            let h = problem.precision(&w, &fact).unwrap() - fact.dense_inverse();
            let v = problem.linear_term(&w).unwrap();
            let (e, mu, sigma) = literal_evidence(&h, &v, &k);
            let post = problem.posterior(&w, &fact).unwrap();
            assert!((post.log_evidence - e).abs() < 1e-8 * (1.0 + e.abs()), "{model:?}: {} vs {e}", post.log_evidence);
            assert!((&post.mean - mu).amax() < 1e-8);
            assert!((&post.covariance - sigma).amax() < 1e-8);
        }
    }

    #[test]
    fn zero_loadings_give_zero_evidence() {
        let data = random_data(4, 6, 3, 5);
        for model in models(4) {
            let problem = PalProblem::new(model, &data).unwrap();
            let fact = GpPrior::new(vec![3.0, 8.0], 6).unwrap().factorize().unwrap();
            let post = problem.posterior(&LoadingMatrix::zeros(4, 2), &fact).unwrap();
            assert_eq!(post.log_evidence, 0.0);
            assert!(post.mean.iter().all(|&m| m == 0.0));
        }
    }

    #[test]
    fn precision_blocks_scale_with_trials() {
        let single = random_data(3, 5, 1, 9);
        let w = random_w(3, 2, 1.0, 10);
        let fact = GpPrior::new(vec![2.0, 4.0], 5).unwrap().factorize().unwrap();
        for r in [2usize, 3] {
            let trials = vec![single.trial(0); r];
            let stacked = CountDataset::from_trials(&trials).unwrap();
            for model in models(3) {
                let p1 = PalProblem::new(model.clone(), &single).unwrap();
                let pr = PalProblem::new(model.clone(), &stacked).unwrap();
                assert_eq!(p1.quads(), pr.quads());
                let rf = r as f64;
                let h1 = p1.precision(&w, &fact).unwrap() - fact.dense_inverse();
                let hr = pr.precision(&w, &fact).unwrap() - fact.dense_inverse();
                assert!((&hr - &h1 * rf).amax() < 1e-9 * (1.0 + hr.amax()));
                let v1 = p1.linear_term(&w).unwrap();
                let vr = pr.linear_term(&w).unwrap();
                assert!((&vr - &v1 * rf).amax() < 1e-9 * (1.0 + vr.amax()));
                // evidence from the scaled single-trial terms
                let k = dense_k(&[2.0, 4.0], 5, fact.jitter(0));
                let (e, _, _) = literal_evidence(&(h1 * rf), &(v1 * rf), &k);
                let got = pr.log_evidence(&w, &fact).unwrap();
                assert!((got - e).abs() < 1e-7 * (1.0 + e.abs()), "{model:?} R={r}: {got} vs {e}");
            }
        }
    }

    #[test]
    fn adding_a_neuron_never_widens_the_posterior() {
        let data = random_data(4, 6, 2, 21);
        let w = random_w(4, 2, 1.0, 22);
        let fact = GpPrior::new(vec![2.0, 5.0], 6).unwrap().factorize().unwrap();
        for model in [ObservationModel::poisson(), ObservationModel::binomial(vec![6; 4]).unwrap()] {
            let full = PalProblem::new(model.clone(), &data).unwrap().posterior(&w, &fact).unwrap();
            let sub_model = match &model {
                ObservationModel::Binomial { n } => ObservationModel::binomial(n[..3].to_vec()).unwrap(),
                m => m.clone(),
            };
            let sub_data = data.subset_neurons(&[0, 1, 2]).unwrap();
            let sub_w = LoadingMatrix::new(w.as_matrix().rows(0, 3).into_owned()).unwrap();
            let sub = PalProblem::new(sub_model, &sub_data).unwrap().posterior(&sub_w, &fact).unwrap();
            for k in 0..full.covariance.nrows() {
                assert!(full.covariance[(k, k)] <= sub.covariance[(k, k)] + 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (n, t) = (4, 7);
        let data = random_data(n, t, 2, 31);
        for model in models(n) {
            let problem = PalProblem::new(model.clone(), &data).unwrap();
            let w = random_w(n, 2, 0.7, 32);
            let ells = [2.5, 4.0];
            let eval = |w: &LoadingMatrix, ells: &[f64]| {
                let fact = GpPrior::new(ells.to_vec(), t).unwrap().factorize().unwrap();
                problem.log_evidence(w, &fact).unwrap()
            };
            let fact = GpPrior::new(ells.to_vec(), t).unwrap().factorize().unwrap();
            let g = problem.evidence_with_gradient(&w, &fact).unwrap();
            assert_eq!(g.value, eval(&w, &ells));
            let h = 1e-5;
            for i in 0..n {
                for j in 0..2 {
                    let mut up = w.as_matrix().clone();
                    let mut dn = up.clone();
                    up[(i, j)] += h;
                    dn[(i, j)] -= h;
                    let fd = (eval(&LoadingMatrix::new(up).unwrap(), &ells) - eval(&LoadingMatrix::new(dn).unwrap(), &ells)) / (2.0 * h);
                    let an = g.d_loadings[(i, j)];
                    assert!((fd - an).abs() < 1e-5 * (1.0 + an.abs()), "{model:?} W[{i},{j}]: {an} vs {fd}");
                }
            }
            for j in 0..2 {
                let mut up = ells;
                let mut dn = ells;
                up[j] *= h.exp();
                dn[j] *= (-h).exp();
                let fd = (eval(&w, &up) - eval(&w, &dn)) / (2.0 * h);
                let an = g.d_log_length_scales[j];
                assert!((fd - an).abs() < 1e-5 * (1.0 + an.abs()), "{model:?} log l[{j}]: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn negative_curvature_is_reported() {
        let data = random_data(2, 3, 1, 41);
        let quads = vec![QuadApprox { a: -50.0, b: 0.0, c: 0.0, interval: crate::poly_approx::Interval::new(-1.0, 1.0).unwrap() }; 2];
        let problem = PalProblem::with_quads(ObservationModel::poisson(), &data, quads).unwrap();
        let fact = GpPrior::new(vec![1.0], 3).unwrap().factorize().unwrap();
        let w = LoadingMatrix::from_row_major(2, 1, &[1.0, 1.0]).unwrap();
        match problem.log_evidence(&w, &fact) {
            Err(Error::PrecisionNotPositiveDefinite { pivot }) => assert!(pivot <= 0.0),
            other => panic!("expected precision failure, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let data = random_data(3, 4, 1, 51);
        let problem = PalProblem::new(ObservationModel::poisson(), &data).unwrap();
        let fact = GpPrior::new(vec![1.0], 4).unwrap().factorize().unwrap();
        assert!(problem.log_evidence(&LoadingMatrix::zeros(2, 1), &fact).is_err());
        assert!(problem.log_evidence(&LoadingMatrix::zeros(3, 2), &fact).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn mean_solves_precision_system(seed in 0u64..1000, model_ix in 0usize..3, l1 in 0.5f64..5.0, l2 in 0.5f64..5.0) {
            let data = random_data(3, 5, 2, seed);
            let model = models(3).swap_remove(model_ix);
            let problem = PalProblem::new(model, &data).unwrap();
            let w = random_w(3, 2, 1.5, seed + 1);
            let fact = GpPrior::new(vec![l1, l2], 5).unwrap().factorize().unwrap();
            let post = problem.posterior(&w, &fact).unwrap();
            let v = problem.linear_term(&w).unwrap();
            let lhs = problem.precision(&w, &fact).unwrap() * &post.mean;
            prop_assert!((&lhs - &v).norm() <= 1e-8 * (1.0 + v.norm()));
        }
    }
}
