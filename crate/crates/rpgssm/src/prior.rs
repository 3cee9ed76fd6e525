//! The stable linear-Gaussian latent chain.
//!
//! The latent prior is parametrized by a single transition matrix A with
//! largest singular value below 1: z₁ ~ N(0, I), z_{t+1} ~ N(Az_t, I − AAᵀ).
//! This choice makes N(0, I) the stationary (and every marginal) distribution
//! of the chain.
//!
//! The module also carries the machinery that justifies the parametrization:
//! any stable Gaussian chain Θ = (m₁, Q₁, A, b, Q) can be canonicalized by an
//! affine latent change of variables u = Gz + c — with G built from the
//! eigendecomposition of the stationary covariance Q∞ (the solution of the
//! Lyapunov equation Q∞ = AQ∞Aᵀ + Q) and c absorbing the bias — into an
//! equivalent chain with zero bias and stationary covariance I, without
//! changing the observation likelihood when the emission is composed with the
//! inverse map. Singular-value clipping projects a transition matrix back
//! into the stable region after each optimizer step.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gaussian::{cholesky, ln_det, symmetrized, LN_2PI};

/// Largest singular value (operator 2-norm).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max)
}

/// Stationary latent chain: z₁ ~ N(0, I), z_{t+1} ~ N(Az_t, I − AAᵀ).
#[derive(Debug, Clone, PartialEq)]
pub struct StablePrior {
    a: DMatrix<f64>,
}

impl StablePrior {
    /// Requires ‖A‖₂ < 1, which makes I − AAᵀ positive definite and the
    /// chain stationary at N(0, I).
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "transition matrix must be square, got {}×{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let norm = spectral_norm(&a);
        if !(norm < 1.0) {
            return Err(Error::Unstable(format!("operator norm {norm} >= 1")));
        }
        // The singular-value bound implies positive definiteness; assert it
        // directly so downstream Cholesky factorizations cannot surprise us.
        let q = DMatrix::identity(a.nrows(), a.nrows()) - &a * a.transpose();
        cholesky(&q, "implied transition covariance I − AAᵀ")?;
        Ok(Self { a })
    }

    pub fn latent_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Transition covariance Q = I − AAᵀ.
    pub fn transition_cov(&self) -> DMatrix<f64> {
        DMatrix::identity(self.latent_dim(), self.latent_dim()) - &self.a * self.a.transpose()
    }

    /// Samples a latent trajectory of length `t` (rows are time steps),
    /// deterministic per seed.
    pub fn sample_chain(&self, t: usize, seed: u64) -> DMatrix<f64> {
        assert!(t >= 1, "sample_chain needs at least one step");
        let d = self.latent_dim();
        let chol_q = cholesky(&self.transition_cov(), "transition covariance")
            .expect("I − AAᵀ is PD for a stable prior");
        let l = chol_q.l();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha20Rng| {
            DVector::from_fn(d, |_, _| StandardNormal.sample(rng))
        };
        let mut out = DMatrix::zeros(t, d);
        let mut z = draw(&mut rng);
        out.row_mut(0).copy_from(&z.transpose());
        for step in 1..t {
            z = &self.a * &z + &l * draw(&mut rng);
            out.row_mut(step).copy_from(&z.transpose());
        }
        out
    }
}

/// A general stable Gaussian chain Θ = (m₁, Q₁, A, b, Q), optionally carrying
/// a linear-Gaussian emission x_t ~ N(Cz_t + d, R) for likelihood tests.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralGssmParams {
    pub m1: DVector<f64>,
    pub q1: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub q: DMatrix<f64>,
    pub emission: Option<LinearEmission>,
}

/// Linear-Gaussian emission x_t ~ N(Cz_t + d, R).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEmission {
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    pub r: DMatrix<f64>,
}

impl GeneralGssmParams {
    pub fn latent_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.latent_dim();
        if self.a.ncols() != d
            || self.m1.len() != d
            || self.b.len() != d
            || self.q1.shape() != (d, d)
            || self.q.shape() != (d, d)
        {
            return Err(Error::DimensionMismatch("chain parameter shapes disagree".into()));
        }
        cholesky(&self.q1, "initial covariance Q₁")?;
        cholesky(&self.q, "transition covariance Q")?;
        let rho = spectral_radius(&self.a);
        if !(rho < 1.0) {
            return Err(Error::Unstable(format!("spectral radius {rho} >= 1")));
        }
        Ok(())
    }
}

/// Solves the discrete Lyapunov equation Q∞ = AQ∞Aᵀ + Q for a stable A by
/// the direct vectorized linear solve (I − A⊗A)⁻¹ vec(Q).
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    assert!(a.ncols() == d && q.shape() == (d, d), "solve_lyapunov: shape mismatch");
    let rho = spectral_radius(a);
    if !(rho < 1.0) {
        return Err(Error::Unstable(format!(
            "spectral radius {rho} >= 1, no stationary solution"
        )));
    }
    let q = symmetrized(q.clone(), "Lyapunov right-hand side")?;
    let system = DMatrix::identity(d * d, d * d) - a.kronecker(a);
    let vec_q = DVector::from_column_slice(q.as_slice());
    let solved = system
        .lu()
        .solve(&vec_q)
        .ok_or_else(|| Error::Unstable("I − A⊗A is singular".into()))?;
    symmetrized(DMatrix::from_column_slice(d, d, solved.as_slice()), "Lyapunov solution")
}

/// Stationary mean m∞ = (I − A)⁻¹b of a stable chain with bias b.
pub fn stationary_mean(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let d = a.nrows();
    (DMatrix::identity(d, d) - a)
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Unstable("I − A is singular (eigenvalue 1)".into()))
}

/// Affine latent reparametrization u = Gz + c sending a stable chain to its
/// canonical form: zero bias, stationary covariance I, transitions GAG⁻¹.
/// The emission, if present, is composed with the inverse map
/// h(u) = G⁻¹(u − c), i.e. (C, d) ↦ (CG⁻¹, d − CG⁻¹c), which leaves the
/// observation likelihood unchanged.
///
/// G is fixed as S^{−1/2}Uᵀ from the stationary covariance Q∞ = USUᵀ with
/// eigenvalues sorted descending; any orthogonal rotation of a valid G is
/// also valid, so tests should check invariants, never G entrywise.
pub fn canonicalize(
    params: &GeneralGssmParams,
) -> Result<(DMatrix<f64>, DVector<f64>, GeneralGssmParams)> {
    params.validate()?;
    let d = params.latent_dim();
    let q_inf = solve_lyapunov(&params.a, &params.q)?;

    let eig = q_inf.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    if eig.eigenvalues.iter().any(|s| *s <= 0.0) {
        return Err(Error::NotPositiveDefinite("stationary covariance Q∞".into()));
    }
    let mut g = DMatrix::zeros(d, d);
    let mut g_inv = DMatrix::zeros(d, d);
    for (row, &k) in order.iter().enumerate() {
        let s = eig.eigenvalues[k];
        let u = eig.eigenvectors.column(k);
        g.row_mut(row).copy_from(&(u.transpose() / s.sqrt()));
        g_inv.column_mut(row).copy_from(&(u * s.sqrt()));
    }

    let a_t = &g * &params.a * &g_inv;
    let gb = &g * &params.b;
    let c = (&a_t - DMatrix::identity(d, d))
        .lu()
        .solve(&gb)
        .ok_or_else(|| Error::Unstable("GAG⁻¹ − I is singular (eigenvalue 1)".into()))?;

    let canonical = GeneralGssmParams {
        m1: &g * &params.m1 + &c,
        q1: symmetrized(&g * &params.q1 * g.transpose(), "transformed Q₁")?,
        b: (DMatrix::identity(d, d) - &a_t) * &c + &gb,
        q: symmetrized(&g * &params.q * g.transpose(), "transformed Q")?,
        a: a_t,
        emission: params.emission.as_ref().map(|e| {
            let c_new = &e.c * &g_inv;
            LinearEmission { d: &e.d - &c_new * &c, c: c_new, r: e.r.clone() }
        }),
    };
    Ok((g, c, canonical))
}

/// Clips the singular values of a matrix into (0, 1−eps]: values above the
/// cap are set to it, zeros are left at zero (a strictly positive floor would
/// perturb the zero matrix arbitrarily), and the matrix is returned unchanged
/// — bit-identical — when already feasible.
pub fn clip_singular_values(a: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    assert!((0.0..1.0).contains(&eps), "clip_singular_values: eps must be in [0, 1)");
    let cap = 1.0 - eps;
    let svd = a.clone().svd(true, true);
    if svd.singular_values.max() <= cap {
        return a.clone();
    }
    let clipped = svd.singular_values.map(|s| s.min(cap));
    let u = svd.u.expect("SVD with vectors requested");
    let v_t = svd.v_t.expect("SVD with vectors requested");
    u * DMatrix::from_diagonal(&clipped) * v_t
}

/// Exact Kalman-filter log-likelihood of an observation sequence (rows are
/// time steps) under a general chain with linear-Gaussian emissions.
pub fn kalman_loglik(params: &GeneralGssmParams, observations: &DMatrix<f64>) -> Result<f64> {
    params.validate()?;
    let emission = params
        .emission
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("kalman_loglik requires an emission model".into()))?;
    let (c, d, r) = (&emission.c, &emission.d, &emission.r);
    let obs_dim = c.nrows();
    if observations.ncols() != obs_dim {
        return Err(Error::DimensionMismatch(format!(
            "observations have {} columns, emission expects {obs_dim}",
            observations.ncols()
        )));
    }

    let eye = DMatrix::<f64>::identity(params.latent_dim(), params.latent_dim());
    let mut mean = params.m1.clone();
    let mut cov = params.q1.clone();
    let mut loglik = 0.0;
    for t in 0..observations.nrows() {
        let y = observations.row(t).transpose();
        let resid = &y - c * &mean - d;
        let s = symmetrized(c * &cov * c.transpose() + r, "innovation covariance")?;
        let chol_s = cholesky(&s, "innovation covariance").map_err(|_| Error::Breakdown {
            time: t,
            message: "innovation covariance is not positive definite".into(),
        })?;
        loglik += -0.5
            * (obs_dim as f64 * LN_2PI + ln_det(&chol_s) + resid.dot(&chol_s.solve(&resid)));

        // Joseph-form update keeps the covariance symmetric PSD.
        let gain = &cov * c.transpose() * chol_s.inverse();
        let shrink = &eye - &gain * c;
        cov = &shrink * &cov * shrink.transpose() + &gain * r * gain.transpose();
        cov = (&cov + cov.transpose()) * 0.5;
        mean += &gain * resid;

        mean = &params.a * mean + &params.b;
        cov = &params.a * cov * params.a.transpose() + &params.q;
        cov = (&cov + cov.transpose()) * 0.5;
    }
    Ok(loglik)
}
