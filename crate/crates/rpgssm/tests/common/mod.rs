//! Brute-force dense joint-Gaussian oracle: the whole latent chain is
//! assembled as one TD-dimensional Gaussian, so marginals, cross-moments,
//! normalizers, and KLs come from plain dense linear algebra with none of
//! the smoother's recursions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rpgssm::gaussian::{kl_divergence, GaussianExpFam, GaussianMoments};
use rpgssm::prior::{clip_singular_values, StablePrior};

/// Everything the dense path can say about a potential-conditioned chain.
pub struct DensePosterior {
    pub marginals: Vec<GaussianMoments>,
    /// Cov(z_{t+1}, z_t) for consecutive steps.
    pub pairwise: Vec<DMatrix<f64>>,
    /// log ∫ p(z₁..z_T) Π_t N(z_t; m_t, S_t) dz with (m_t, S_t) the moment
    /// form of each potential.
    pub log_normalizer: f64,
    /// KL(posterior ‖ prior) of the full joint.
    pub kl_to_prior: f64,
}

/// Joint precision of the stationary prior over T stacked D-blocks:
/// block-tridiagonal with N(0, I) at the start and Q = I − AAᵀ transitions.
pub fn joint_prior_precision(prior: &StablePrior, t_len: usize) -> DMatrix<f64> {
    let d = prior.latent_dim();
    let a = prior.a();
    let q_inv = prior
        .transition_cov()
        .cholesky()
        .expect("transition covariance is PD for a stable prior")
        .inverse();
    let mut j = DMatrix::zeros(t_len * d, t_len * d);
    for r in 0..d {
        j[(r, r)] = 1.0;
    }
    let at_qi_a = a.transpose() * &q_inv * a;
    let at_qi = a.transpose() * &q_inv;
    for t in 0..t_len.saturating_sub(1) {
        let (i0, i1) = (t * d, (t + 1) * d);
        for r in 0..d {
            for c in 0..d {
                j[(i0 + r, i0 + c)] += at_qi_a[(r, c)];
                j[(i1 + r, i1 + c)] += q_inv[(r, c)];
                j[(i0 + r, i1 + c)] -= at_qi[(r, c)];
                j[(i1 + r, i0 + c)] -= at_qi[(c, r)];
            }
        }
    }
    j
}

pub fn dense_smooth(prior: &StablePrior, potentials: &[GaussianExpFam]) -> DensePosterior {
    let d = prior.latent_dim();
    let t_len = potentials.len();
    let dim = t_len * d;

    let j_prior = joint_prior_precision(prior, t_len);
    let mut j_post = j_prior.clone();
    let mut h_post = DVector::zeros(dim);
    let mut sum_phi = 0.0;
    for (t, pot) in potentials.iter().enumerate() {
        for r in 0..d {
            h_post[t * d + r] += pot.h[r];
            for c in 0..d {
                j_post[(t * d + r, t * d + c)] += pot.j[(r, c)];
            }
        }
        sum_phi += pot.log_normalizer().unwrap();
    }

    let prior_joint = GaussianExpFam::new(DVector::zeros(dim), j_prior).unwrap();
    let post_joint = GaussianExpFam::new(h_post, j_post).unwrap();
    let log_normalizer =
        post_joint.log_normalizer().unwrap() - prior_joint.log_normalizer().unwrap() - sum_phi;

    let post_moments = post_joint.to_moments().unwrap();
    let prior_moments = prior_joint.to_moments().unwrap();
    let kl_to_prior = kl_divergence(&post_moments, &prior_moments).unwrap();

    let marginals = (0..t_len)
        .map(|t| {
            GaussianMoments::new(
                post_moments.mean.rows(t * d, d).into_owned(),
                post_moments.cov.view((t * d, t * d), (d, d)).into_owned(),
            )
            .unwrap()
        })
        .collect();
    let pairwise = (0..t_len.saturating_sub(1))
        .map(|t| post_moments.cov.view(((t + 1) * d, t * d), (d, d)).into_owned())
        .collect();

    DensePosterior { marginals, pairwise, log_normalizer, kl_to_prior }
}

/// A stable prior with i.i.d. normal entries clipped to the given operator
/// norm.
pub fn random_stable_prior(d: usize, max_norm: f64, rng: &mut ChaCha20Rng) -> StablePrior {
    let raw = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    StablePrior::new(clip_singular_values(&raw, 1.0 - max_norm)).unwrap()
}

/// Random well-conditioned natural-parameter potentials.
pub fn random_potentials(d: usize, t_len: usize, rng: &mut ChaCha20Rng) -> Vec<GaussianExpFam> {
    (0..t_len)
        .map(|_| {
            let w = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let j = &w * w.transpose() + DMatrix::identity(d, d) * 0.4;
            let h = DVector::from_fn(d, |_, _| rng.random::<f64>() * 3.0 - 1.5);
            GaussianExpFam::new(h, j).unwrap()
        })
        .collect()
}
