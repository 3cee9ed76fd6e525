//! Exponential-family Gaussian arithmetic.
//!
//! A Gaussian over z ∈ ℝ^D is carried either in natural form (h, J), with
//! unnormalized density exp(hᵀz − ½ zᵀJz), or in moment form (μ, Σ) with
//! J = Σ⁻¹ and h = Σ⁻¹μ. The log-normalizer
//!
//! > Φ(h, J) = ½ hᵀJ⁻¹h − ½ log det J + (D/2) log 2π
//!
//! satisfies ∫ exp(hᵀz − ½ zᵀJz) dz = exp(Φ(h, J)). Products of factors add
//! natural parameters, and the constant linking two *normalized* densities to
//! their normalized product is log Z = Φ(η_a + η_b) − Φ(η_a) − Φ(η_b).
//!
//! Everything here is a pure function of immutable inputs; precision matrices
//! are stored dense and factorized by Cholesky on demand.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// log 2π, the per-dimension constant in Gaussian log-normalizers.
pub const LN_2PI: f64 = 1.8378770664093454;

/// Relative asymmetry above which a would-be symmetric matrix is rejected
/// instead of silently repaired.
const SYMMETRY_TOL: f64 = 1e-8;

/// Replaces a nearly-symmetric matrix by its symmetric part (M + Mᵀ)/2,
/// erroring if the asymmetry exceeds [`SYMMETRY_TOL`] relative to its norm.
pub(crate) fn symmetrized(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let asym = (&m - m.transpose()).norm();
    if asym > SYMMETRY_TOL * m.norm().max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "{what} is not symmetric (‖M − Mᵀ‖ = {asym:.3e})"
        )));
    }
    Ok((&m + m.transpose()) * 0.5)
}

/// Cholesky-factorizes a symmetric matrix, mapping failure to a domain error
/// naming the offending matrix.
pub(crate) fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone())
        .ok_or_else(|| Error::NotPositiveDefinite(format!("{what} ({}×{})", m.nrows(), m.ncols())))
}

/// log det of an SPD matrix given its Cholesky factor.
pub(crate) fn ln_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Gaussian in natural (exponential-family) parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianExpFam {
    /// Precision-times-mean natural parameter h = Σ⁻¹μ.
    pub h: DVector<f64>,
    /// Precision natural parameter J = Σ⁻¹ (symmetric; PD whenever the value
    /// is used as a normalized density).
    pub j: DMatrix<f64>,
}

impl GaussianExpFam {
    /// Builds a natural-parameter Gaussian, symmetrizing J and rejecting
    /// asymmetry beyond tolerance. J is *not* required to be PD here, so
    /// degenerate unnormalized factors are representable; they are rejected
    /// later by any operation that needs a normalizer.
    pub fn new(h: DVector<f64>, j: DMatrix<f64>) -> Result<Self> {
        if j.nrows() != j.ncols() || h.len() != j.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "natural parameters h ({}) vs J ({}×{})",
                h.len(),
                j.nrows(),
                j.ncols()
            )));
        }
        let j = symmetrized(j, "precision matrix J")?;
        Ok(Self { h, j })
    }

    /// Standard normal N(0, I) in natural form — the stationary marginal of
    /// the latent chain.
    pub fn standard(dim: usize) -> Self {
        Self { h: DVector::zeros(dim), j: DMatrix::identity(dim, dim) }
    }

    pub fn dim(&self) -> usize {
        self.h.len()
    }

    /// Φ(h, J) = ½ hᵀJ⁻¹h − ½ log det J + (D/2) log 2π.
    pub fn log_normalizer(&self) -> Result<f64> {
        let chol = cholesky(&self.j, "precision matrix J")?;
        let mu = chol.solve(&self.h);
        Ok(0.5 * self.h.dot(&mu) - 0.5 * ln_det(&chol) + 0.5 * self.dim() as f64 * LN_2PI)
    }

    /// Moment form (μ, Σ) = (J⁻¹h, J⁻¹). Fails on indefinite J.
    pub fn to_moments(&self) -> Result<GaussianMoments> {
        let chol = cholesky(&self.j, "precision matrix J")?;
        let mean = chol.solve(&self.h);
        let cov = chol.inverse();
        GaussianMoments::new(mean, (&cov + cov.transpose()) * 0.5)
    }

    /// Unnormalized product: natural parameters add. The second return value
    /// is log Z = Φ(η_a+η_b) − Φ(η_a) − Φ(η_b), the log normalization
    /// constant relating the two normalized input densities to their
    /// normalized product.
    pub fn product(&self, other: &Self) -> Result<(Self, f64)> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch(format!(
                "product of Gaussians of dimension {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        let prod = Self { h: &self.h + &other.h, j: &self.j + &other.j };
        let log_z = prod.log_normalizer()? - self.log_normalizer()? - other.log_normalizer()?;
        Ok((prod, log_z))
    }

    /// ⟨log f(z)⟩ under z ~ N(μ, Σ) for the normalized density f with these
    /// natural parameters: hᵀμ − ½ tr(J(Σ + μμᵀ)) − Φ(h, J).
    pub fn expected_log_density(&self, under: &GaussianMoments) -> Result<f64> {
        if self.dim() != under.dim() {
            return Err(Error::DimensionMismatch(format!(
                "expected log-density of dimension {} under moments of dimension {}",
                self.dim(),
                under.dim()
            )));
        }
        let second_moment = &under.cov + &under.mean * under.mean.transpose();
        let trace = (&self.j * &second_moment).trace();
        Ok(self.h.dot(&under.mean) - 0.5 * trace - self.log_normalizer()?)
    }
}

/// Gaussian in moment parameters (mean, covariance).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    /// Symmetric positive-definite covariance.
    pub cov: DMatrix<f64>,
}

impl GaussianMoments {
    /// Builds a moment-form Gaussian; the covariance is symmetrized and must
    /// pass a Cholesky factorization.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != cov.ncols() || mean.len() != cov.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "moments mean ({}) vs covariance ({}×{})",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        let cov = symmetrized(cov, "covariance matrix")?;
        cholesky(&cov, "covariance matrix")?;
        Ok(Self { mean, cov })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: DVector::zeros(dim), cov: DMatrix::identity(dim, dim) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Natural form (h, J) = (Σ⁻¹μ, Σ⁻¹).
    pub fn to_natural(&self) -> Result<GaussianExpFam> {
        let chol = cholesky(&self.cov, "covariance matrix")?;
        let j = chol.inverse();
        GaussianExpFam::new(chol.solve(&self.mean), (&j + j.transpose()) * 0.5)
    }
}

/// KL(q ‖ p) between moment-form Gaussians:
/// ½ [tr(Σ_p⁻¹Σ_q) + (μ_p−μ_q)ᵀΣ_p⁻¹(μ_p−μ_q) − D + log det Σ_p − log det Σ_q].
pub fn kl_divergence(q: &GaussianMoments, p: &GaussianMoments) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::DimensionMismatch(format!(
            "KL between dimensions {} and {}",
            q.dim(),
            p.dim()
        )));
    }
    let chol_p = cholesky(&p.cov, "covariance of p")?;
    let chol_q = cholesky(&q.cov, "covariance of q")?;
    let trace = chol_p.solve(&q.cov).trace();
    let diff = &p.mean - &q.mean;
    let maha = diff.dot(&chol_p.solve(&diff));
    Ok(0.5 * (trace + maha - q.dim() as f64 + ln_det(&chol_p) - ln_det(&chol_q)))
}
