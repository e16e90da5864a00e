//! Squared-exponential GP priors over the latent time courses.
//!
//! The prior over all `P` latents is block diagonal with one `T x T` block per
//! latent. Blocks are factorized independently and the full `PT x PT` matrix
//! is never formed. Stacked latent vectors are latent-major: latent 0's `T`
//! values, then latent 1's, and so on.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_JITTER: f64 = 1e-6;
const MAX_JITTER: f64 = 1e-2;

/// `exp(-(t - t')^2 / (2 l^2))`
pub fn se_kernel(t: f64, t_prime: f64, length_scale: f64) -> f64 {
    let d = t - t_prime;
    (-d * d / (2.0 * length_scale * length_scale)).exp()
}

/// Gram matrix of [`se_kernel`] on bins `0..n_bins`, without jitter.
pub fn kernel_matrix(length_scale: f64, n_bins: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n_bins, n_bins, |t, s| se_kernel(t as f64, s as f64, length_scale))
}

/// Elementwise derivative of the Gram matrix with respect to `log(length_scale)`.
pub fn kernel_matrix_dlog_length(length_scale: f64, n_bins: usize) -> DMatrix<f64> {
    let l2 = length_scale * length_scale;
    DMatrix::from_fn(n_bins, n_bins, |t, s| {
        let d = t as f64 - s as f64;
        se_kernel(t as f64, s as f64, length_scale) * d * d / l2
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpPrior {
    pub length_scales: Vec<f64>,
    pub n_bins: usize,
    pub jitter: f64,
}

impl GpPrior {
    pub fn new(length_scales: Vec<f64>, n_bins: usize) -> Result<Self> {
        Self::with_jitter(length_scales, n_bins, DEFAULT_JITTER)
    }

    pub fn with_jitter(length_scales: Vec<f64>, n_bins: usize, jitter: f64) -> Result<Self> {
        let prior = Self { length_scales, n_bins, jitter };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins == 0 {
            return Err(Error::InvalidParameter("prior needs at least one time bin".into()));
        }
        if self.length_scales.is_empty() {
            return Err(Error::InvalidParameter("prior needs at least one latent".into()));
        }
        if let Some(l) = self.length_scales.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::InvalidParameter(format!("length scale {l} must be positive")));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::InvalidParameter(format!("jitter {} must be nonnegative", self.jitter)));
        }
        Ok(())
    }

    pub fn n_latents(&self) -> usize {
        self.length_scales.len()
    }

    pub fn factorize(&self) -> Result<PriorFactorization> {
        build_prior(self)
    }
}

/// Per-latent Cholesky factors of `K_j + jitter I`.
#[derive(Debug, Clone)]
pub struct PriorFactorization {
    n_bins: usize,
    length_scales: Vec<f64>,
    factors: Vec<DMatrix<f64>>,
    jitters: Vec<f64>,
    block_log_dets: Vec<f64>,
    log_det: f64,
}

/// Factorizes every prior block, escalating jitter by factors of ten (up to
/// 1e-2) when a block is numerically singular.
pub fn build_prior(prior: &GpPrior) -> Result<PriorFactorization> {
    prior.validate()?;
    let t = prior.n_bins;
    let mut factors = Vec::with_capacity(prior.n_latents());
    let mut jitters = Vec::with_capacity(prior.n_latents());
    let mut block_log_dets = Vec::with_capacity(prior.n_latents());
    for (j, &ell) in prior.length_scales.iter().enumerate() {
        let base = kernel_matrix(ell, t);
        let mut jitter = prior.jitter;
        let l = loop {
            let mut k = base.clone();
            for d in 0..t {
                k[(d, d)] += jitter;
            }
            if let Some(chol) = k.cholesky() {
                let l = chol.unpack();
                if l.diagonal().iter().all(|&d| d > 0.0 && d.is_finite()) {
                    break l;
                }
            }
            let next = if jitter == 0.0 { DEFAULT_JITTER } else { jitter * 10.0 };
            if next > MAX_JITTER * (1.0 + 1e-12) {
                return Err(Error::PriorNotPositiveDefinite { latent: j, length_scale: ell, jitter });
            }
            jitter = next;
        };
        let ld = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        factors.push(l);
        jitters.push(jitter);
        block_log_dets.push(ld);
    }
    let log_det = block_log_dets.iter().sum();
    Ok(PriorFactorization {
        n_bins: t,
        length_scales: prior.length_scales.clone(),
        factors,
        jitters,
        block_log_dets,
        log_det,
    })
}

/// `K^{-1} v` for a stacked latent vector.
pub fn prior_solve(fact: &PriorFactorization, v: &DVector<f64>) -> Result<DVector<f64>> {
    fact.solve(v)
}

impl PriorFactorization {
    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_latents(&self) -> usize {
        self.factors.len()
    }

    pub fn dim(&self) -> usize {
        self.n_bins * self.factors.len()
    }

    pub fn length_scales(&self) -> &[f64] {
        &self.length_scales
    }

    /// Lower Cholesky factor of latent `j`'s block.
    pub fn factor(&self, j: usize) -> &DMatrix<f64> {
        &self.factors[j]
    }

    /// Jitter actually added to block `j` after escalation.
    pub fn jitter(&self, j: usize) -> f64 {
        self.jitters[j]
    }

    pub fn block_log_det(&self, j: usize) -> f64 {
        self.block_log_dets[j]
    }

    /// `log |K|` summed over blocks.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    fn check_len(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "stacked latent vector has length {}, expected {} (P={} x T={})",
                v.len(),
                self.dim(),
                self.n_latents(),
                self.n_bins
            )));
        }
        Ok(())
    }

    fn blockwise(&self, v: &DVector<f64>, op: impl Fn(&DMatrix<f64>, DVector<f64>) -> DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(v)?;
        let t = self.n_bins;
        let mut out = DVector::zeros(v.len());
        for (j, l) in self.factors.iter().enumerate() {
            let block = op(l, v.rows(j * t, t).into_owned());
            out.rows_mut(j * t, t).copy_from(&block);
        }
        Ok(out)
    }

    /// `K^{-1} v` via two triangular solves per block.
    pub fn solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.blockwise(v, |l, b| {
            let y = l.solve_lower_triangular(&b).expect("factor has positive diagonal");
            l.tr_solve_lower_triangular(&y).expect("factor has positive diagonal")
        })
    }

    /// `K v` (including jitter).
    pub fn mul(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.blockwise(v, |l, b| l * (l.transpose() * b))
    }

    /// `L v` with `L` the block-diagonal Cholesky factor.
    pub fn l_mul(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.blockwise(v, |l, b| l * b)
    }

    /// `L^T v`
    pub fn lt_mul(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.blockwise(v, |l, b| l.tr_mul(&b))
    }

    /// `L^{-1} v`
    pub fn l_solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.blockwise(v, |l, b| l.solve_lower_triangular(&b).expect("factor has positive diagonal"))
    }

    /// `L^{-T} v`
    pub fn lt_solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.blockwise(v, |l, b| l.tr_solve_lower_triangular(&b).expect("factor has positive diagonal"))
    }

    /// Dense `K^{-1}` as a `PT x PT` block-diagonal matrix. Test and
    /// diagnostic use only.
    pub fn dense_inverse(&self) -> DMatrix<f64> {
        let t = self.n_bins;
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        for (j, l) in self.factors.iter().enumerate() {
            let linv = l
                .solve_lower_triangular(&DMatrix::identity(t, t))
                .expect("factor has positive diagonal");
            out.view_mut((j * t, j * t), (t, t)).copy_from(&linv.tr_mul(&linv));
        }
        out
    }
}

/// Flattens a `P x T` latent matrix into the latent-major stacked vector.
pub fn stack_latents(x: &DMatrix<f64>) -> DVector<f64> {
    let (p, t) = x.shape();
    DVector::from_fn(p * t, |k, _| x[(k / t, k % t)])
}

/// Inverse of [`stack_latents`].
pub fn unstack_latents(v: &DVector<f64>, n_latents: usize, n_bins: usize) -> Result<DMatrix<f64>> {
    if v.len() != n_latents * n_bins {
        return Err(Error::Dimension(format!(
            "cannot reshape vector of length {} into {n_latents} x {n_bins}",
            v.len()
        )));
    }
    Ok(DMatrix::from_fn(n_latents, n_bins, |p, t| v[p * n_bins + t]))
}
