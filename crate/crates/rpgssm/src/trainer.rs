//! The auxiliary free energy 𝓖 and its generalized-EM optimization loop.
//!
//! For a batch of sequences x¹..x^N with recognition delta-factors η^Δ(x_tⁿ)
//! and exact smoothed posteriors qⁿ, the objective is
//!
//! > 𝓖 = Σ_n [ Σ_t ( ⟨log f^Δ(z_t|x_tⁿ)⟩_{qⁿ(z_t)} − log Γ̃^{tn} ) − KL(qⁿ‖p) ]
//!
//! where the Γ̃ term combines Gaussian log-normalizers Φ with a within-batch
//! log-sum-exp (see [`log_gamma_tilde`]). When qⁿ is the exact posterior the
//! same number collapses to Σ_n [ log_normalizer(qⁿ) − Σ_t log Γ̃^{tn} ];
//! both forms are implemented and cross-checked in tests.
//!
//! Training alternates an E-step (exact smoothing, posteriors detached) with
//! an M-step (one Adam step on −𝓖 with respect to the transition matrix A
//! and the recognition parameters, followed by a singular-value projection of
//! A). The prior marginal η₀ = N(0, I) is a constant of the stationary
//! parametrization, so A receives gradient only through the chain KL.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::{self, Write};
use std::time::Instant;

use crate::autodiff::{Tape, Var};
use crate::data::derive_seed;
use crate::error::{Error, Result};
use crate::gaussian::{GaussianExpFam, LN_2PI};
use crate::prior::{clip_singular_values, spectral_norm, StablePrior};
use crate::recognition::{CovarianceKind, RecognitionModel, TapedCovariance};
use crate::smoother::{chain_kl, smooth, SmoothedPosterior};

/// Which observations feed the Γ̃ mixture sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixtureScope {
    /// The current minibatch (cost O(batch²) per time step).
    Batch,
    /// The whole dataset; intended for small datasets.
    Full,
}

/// Hyperparameters of a training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub clip_eps: f64,
    pub seed: u64,
    pub architecture: crate::recognition::Architecture,
    pub covariance: CovarianceKind,
    pub mixture_scope: MixtureScope,
    pub m_steps_per_e_step: usize,
}

impl TrainConfig {
    /// Defaults: batch 32, learning rate 1e-3, clip 1e-3, batch-scoped
    /// mixture, one M-step per E-step.
    pub fn new(
        latent_dim: usize,
        iterations: usize,
        architecture: crate::recognition::Architecture,
        covariance: CovarianceKind,
        seed: u64,
    ) -> Self {
        Self {
            latent_dim,
            batch_size: 32,
            learning_rate: 1e-3,
            iterations,
            clip_eps: 1e-3,
            seed,
            architecture,
            covariance,
            mixture_scope: MixtureScope::Batch,
            m_steps_per_e_step: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::InvalidArgument("latent_dim must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(
                "batch_size must be at least 2 (the mixture sum is degenerate at 1)".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::InvalidArgument("clip_eps must lie in (0, 1)".into()));
        }
        if self.m_steps_per_e_step == 0 {
            return Err(Error::InvalidArgument("m_steps_per_e_step must be positive".into()));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam with fixed (β₁, β₂, ε); state is never reset during a run.
#[derive(Debug, Clone)]
struct Adam {
    step: u64,
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
}

impl Adam {
    fn new(shapes: &[(usize, usize)]) -> Self {
        let zeros: Vec<DMatrix<f64>> =
            shapes.iter().map(|&(r, c)| DMatrix::zeros(r, c)).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }

    fn update(&mut self, lr: f64, params: &mut [DMatrix<f64>], grads: &[DMatrix<f64>]) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for idx in 0..p.len() {
                m[idx] = ADAM_BETA1 * m[idx] + (1.0 - ADAM_BETA1) * g[idx];
                v[idx] = ADAM_BETA2 * v[idx] + (1.0 - ADAM_BETA2) * g[idx] * g[idx];
                p[idx] -= lr * (m[idx] / bc1) / ((v[idx] / bc2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Mutable state of a run: the stable prior, the recognition network, and
/// the optimizer moments.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub prior: StablePrior,
    pub recognition: RecognitionModel,
    pub iteration: usize,
    adam: Adam,
}

impl TrainState {
    /// Draw the initial transition (entries N(0, 1/D_Z), projected to
    /// operator norm ≤ 0.95) and recognition network from seeds derived
    /// from the config seed.
    pub fn init(config: &TrainConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        let d = config.latent_dim;
        let mut rng =
            ChaCha20Rng::seed_from_u64(derive_seed(config.seed, "init/transition"));
        let scale = 1.0 / (d as f64).sqrt();
        let raw = DMatrix::from_fn(d, d, |_, _| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g * scale
        });
        let prior = StablePrior::new(clip_singular_values(&raw, 0.05))?;
        let recognition = RecognitionModel::init(
            input_dim,
            d,
            config.architecture.clone(),
            config.covariance,
            derive_seed(config.seed, "init/recognition"),
        )?;
        let mut shapes = vec![(d, d)];
        shapes.extend(recognition.params().iter().map(|p| p.shape()));
        Ok(Self {
            config: config.clone(),
            prior,
            recognition,
            iteration: 0,
            adam: Adam::new(&shapes),
        })
    }

    /// Assemble a state from stored parts with fresh optimizer moments,
    /// e.g. after deserializing a saved model.
    pub fn from_parts(
        config: TrainConfig,
        prior: StablePrior,
        recognition: RecognitionModel,
    ) -> Result<Self> {
        config.validate()?;
        if prior.latent_dim() != config.latent_dim
            || recognition.latent_dim() != config.latent_dim
        {
            return Err(Error::DimensionMismatch(format!(
                "latent dims disagree: config {}, prior {}, recognition {}",
                config.latent_dim,
                prior.latent_dim(),
                recognition.latent_dim()
            )));
        }
        let mut shapes = vec![(config.latent_dim, config.latent_dim)];
        shapes.extend(recognition.params().iter().map(|p| p.shape()));
        Ok(Self { config, prior, recognition, iteration: 0, adam: Adam::new(&shapes) })
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn phi_of_sum(a: &GaussianExpFam, b: &GaussianExpFam) -> Result<f64> {
    GaussianExpFam::new(&a.h + &b.h, &a.j + &b.j)?.log_normalizer()
}

/// The per-(t, n) mixture normalizer term
/// log Γ̃ = Φ(η₀+η^Δ) − Φ(η₀) − Φ(η^Δ) − log N
///        + log Σ_{n'} exp( Φ(η_q+η^Δ(x^{n'})) − Φ(η₀+η^Δ(x^{n'})) ),
/// evaluated with log-sum-exp stabilization over the batch deltas.
pub fn log_gamma_tilde(
    eta0: &GaussianExpFam,
    eta_delta: &GaussianExpFam,
    eta_q: &GaussianExpFam,
    batch_deltas: &[GaussianExpFam],
) -> Result<f64> {
    if batch_deltas.is_empty() {
        return Err(Error::InvalidArgument("the mixture sum needs at least one term".into()));
    }
    let head = phi_of_sum(eta0, eta_delta)? - eta0.log_normalizer()? - eta_delta.log_normalizer()?;
    let terms = batch_deltas
        .iter()
        .map(|delta| Ok(phi_of_sum(eta_q, delta)? - phi_of_sum(eta0, delta)?))
        .collect::<Result<Vec<f64>>>()?;
    let value = head - (batch_deltas.len() as f64).ln() + log_sum_exp(&terms);
    if !value.is_finite() {
        return Err(Error::NonFinite("log Γ̃".into()));
    }
    Ok(value)
}

fn same_slices(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> bool {
    std::ptr::eq(a.as_ptr(), b.as_ptr()) && a.len() == b.len()
}

/// Per-time-step recognition deltas for every mixture sequence:
/// `result[t][n']` is η^Δ(x_t^{n'}).
fn mixture_deltas_by_time(
    recognition: &RecognitionModel,
    mixture: &[DMatrix<f64>],
) -> Result<Vec<Vec<GaussianExpFam>>> {
    let t_len = mixture.first().map_or(0, |m| m.ncols());
    let mut by_time: Vec<Vec<GaussianExpFam>> =
        (0..t_len).map(|_| Vec::with_capacity(mixture.len())).collect();
    for x in mixture {
        let deltas = recognition.apply_cols(x)?;
        for (t, delta) in deltas.into_iter().enumerate() {
            by_time[t].push(delta);
        }
    }
    Ok(by_time)
}

/// Expectation-form 𝓖 for a batch at the given posteriors, with η_q taken
/// directly from the posterior marginals.
fn expectation_form(
    prior: &StablePrior,
    recognition: &RecognitionModel,
    batch: &[DMatrix<f64>],
    mixture: &[DMatrix<f64>],
    posteriors: &[SmoothedPosterior],
) -> Result<f64> {
    let eta0 = GaussianExpFam::standard(prior.latent_dim());
    let mix_by_t = mixture_deltas_by_time(recognition, mixture)?;

    let mut total = 0.0;
    for (n, (x, posterior)) in batch.iter().zip(posteriors).enumerate() {
        let deltas = recognition.apply_cols(x)?;
        if deltas.len() != posterior.len() {
            return Err(Error::DimensionMismatch(format!(
                "sequence {n}: posterior length {} vs {} observations",
                posterior.len(),
                deltas.len()
            )));
        }
        for (t, (delta, marginal)) in deltas.iter().zip(&posterior.marginals).enumerate() {
            let eta_q = marginal.to_natural()?;
            total += delta.expected_log_density(marginal)?;
            total -= log_gamma_tilde(&eta0, delta, &eta_q, &mix_by_t[t])?;
        }
        total -= chain_kl(posterior, prior)?;
    }
    Ok(total)
}

/// Leave-own-factor-out posterior marginals η_cav^{tn} = η_q^{tn} − η^Δ(x_tⁿ),
/// one row per batch sequence. Exact for the chain posterior: the marginal
/// factorizes as (forward message · backward message) · f^Δ_t, so subtracting
/// the local factor recovers the message product, and its precision stays
/// dominated by the prior marginal's identity. Call with the recognition
/// model that produced `posteriors`.
pub fn recognition_cavities(
    recognition: &RecognitionModel,
    batch: &[DMatrix<f64>],
    posteriors: &[SmoothedPosterior],
) -> Result<Vec<Vec<GaussianExpFam>>> {
    if batch.len() != posteriors.len() {
        return Err(Error::DimensionMismatch("one posterior per batch sequence".into()));
    }
    batch
        .iter()
        .zip(posteriors)
        .enumerate()
        .map(|(n, (x, posterior))| {
            let deltas = recognition.apply_cols(x)?;
            if deltas.len() != posterior.len() {
                return Err(Error::DimensionMismatch(format!(
                    "sequence {n}: posterior length {} vs {} observations",
                    posterior.len(),
                    deltas.len()
                )));
            }
            deltas
                .iter()
                .zip(&posterior.marginals)
                .map(|(delta, marginal)| {
                    let q = marginal.to_natural()?;
                    GaussianExpFam::new(q.h - &delta.h, q.j - &delta.j)
                })
                .collect()
        })
        .collect()
}

/// The M-step objective: 𝓖 with posterior moments and cavities frozen at the
/// E-step while A and the recognition parameters stay live. Inside each Γ̃
/// the posterior natural parameter is reconstituted as η_cav + η^Δ(x_tⁿ), so
/// the mixture normalizer's feedback through the model's own factor belongs
/// to this function (and its gradients) instead of being a constant. At the
/// parameters that produced the posteriors its value equals
/// `auxiliary_free_energy`.
pub fn m_step_objective(
    prior: &StablePrior,
    recognition: &RecognitionModel,
    batch: &[DMatrix<f64>],
    mixture: &[DMatrix<f64>],
    posteriors: &[SmoothedPosterior],
    cavities: &[Vec<GaussianExpFam>],
) -> Result<f64> {
    if batch.len() != posteriors.len() || batch.len() != cavities.len() {
        return Err(Error::DimensionMismatch(
            "one posterior and one cavity row per batch sequence".into(),
        ));
    }
    let eta0 = GaussianExpFam::standard(prior.latent_dim());
    let mix_by_t = mixture_deltas_by_time(recognition, mixture)?;

    let mut total = 0.0;
    for (n, (x, posterior)) in batch.iter().zip(posteriors).enumerate() {
        let deltas = recognition.apply_cols(x)?;
        if deltas.len() != posterior.len() {
            return Err(Error::DimensionMismatch(format!(
                "sequence {n}: posterior length {} vs {} observations",
                posterior.len(),
                deltas.len()
            )));
        }
        for (t, (delta, marginal)) in deltas.iter().zip(&posterior.marginals).enumerate() {
            let cav = &cavities[n][t];
            let eta_q = GaussianExpFam::new(&cav.h + &delta.h, &cav.j + &delta.j)?;
            total += delta.expected_log_density(marginal)?;
            total -= log_gamma_tilde(&eta0, delta, &eta_q, &mix_by_t[t])?;
        }
        total -= chain_kl(posterior, prior)?;
    }
    Ok(total)
}

/// Value and exact reverse-mode gradients of the M-step objective, ordered
/// `[A, recognition params…]` to match `[prior.a()] ++ recognition.params()`.
pub fn m_step_gradients(
    prior: &StablePrior,
    recognition: &RecognitionModel,
    batch: &[DMatrix<f64>],
    mixture: &[DMatrix<f64>],
    posteriors: &[SmoothedPosterior],
    cavities: &[Vec<GaussianExpFam>],
) -> Result<(f64, Vec<DMatrix<f64>>)> {
    if batch.len() != posteriors.len() || batch.len() != cavities.len() {
        return Err(Error::DimensionMismatch(
            "one posterior and one cavity row per batch sequence".into(),
        ));
    }
    let consts = posterior_constants(prior, posteriors, cavities)?;
    let taped = build_objective_tape(prior, recognition, batch, mixture, &consts)?;
    let value = taped.tape.scalar(taped.objective);
    let mut inputs = vec![taped.a_var];
    inputs.extend_from_slice(&taped.rec_vars);
    let grads = taped.tape.gradient(taped.objective, &inputs)?;
    Ok((value, grads))
}

/// E-step plus expectation-form 𝓖: smooth every batch sequence exactly,
/// then evaluate the objective at those posteriors.
pub fn auxiliary_free_energy(
    prior: &StablePrior,
    recognition: &RecognitionModel,
    batch: &[DMatrix<f64>],
    mixture: &[DMatrix<f64>],
) -> Result<(f64, Vec<SmoothedPosterior>)> {
    let posteriors = smooth_batch(prior, recognition, batch)?;
    let value = expectation_form(prior, recognition, batch, mixture, &posteriors)?;
    Ok((value, posteriors))
}

/// Collapsed form of 𝓖, valid at the exact posterior:
/// Σ_n [ log_normalizer(qⁿ) − Σ_t log Γ̃^{tn} ].
pub fn auxiliary_free_energy_collapsed(
    prior: &StablePrior,
    recognition: &RecognitionModel,
    batch: &[DMatrix<f64>],
    mixture: &[DMatrix<f64>],
) -> Result<(f64, Vec<SmoothedPosterior>)> {
    let posteriors = smooth_batch(prior, recognition, batch)?;
    let eta0 = GaussianExpFam::standard(prior.latent_dim());
    let mix_by_t = mixture_deltas_by_time(recognition, mixture)?;

    let mut total = 0.0;
    for (x, posterior) in batch.iter().zip(&posteriors) {
        total += posterior.log_normalizer;
        let deltas = recognition.apply_cols(x)?;
        for (t, (delta, marginal)) in deltas.iter().zip(&posterior.marginals).enumerate() {
            let eta_q = marginal.to_natural()?;
            total -= log_gamma_tilde(&eta0, delta, &eta_q, &mix_by_t[t])?;
        }
    }
    Ok((total, posteriors))
}

fn smooth_batch(
    prior: &StablePrior,
    recognition: &RecognitionModel,
    batch: &[DMatrix<f64>],
) -> Result<Vec<SmoothedPosterior>> {
    batch
        .iter()
        .enumerate()
        .map(|(n, x)| {
            let potentials = recognition.apply_cols(x)?;
            let posterior = smooth(prior, &potentials)?;
            if !posterior.log_normalizer.is_finite() {
                return Err(Error::NonFinite(format!(
                    "smoother log-normalizer on batch sequence {n}"
                )));
            }
            Ok(posterior)
        })
        .collect()
}

/// Posterior statistics hoisted out of the taped objective. Columns are laid
/// out time-major: column t·N + n belongs to (time t, sequence n).
struct PosteriorConstants {
    /// Posterior means μ_tn, D × TN.
    means: DMatrix<f64>,
    /// diag(Σ_tn + μμᵀ) per column, D × TN.
    second_diag: DMatrix<f64>,
    /// Σ_{t,n} (Σ_tn + μμᵀ), D × D.
    second_sum: DMatrix<f64>,
    /// Leave-own-factor-out marginal natural parameters per column,
    /// time-major; the taped objective adds the live η^Δ back on top.
    cavity: Vec<GaussianExpFam>,
    /// Σ E[z_t z_tᵀ], Σ E[z_{t+1} z_tᵀ], Σ E[z_{t+1} z_{t+1}ᵀ] over all
    /// consecutive pairs of all sequences.
    g_a: DMatrix<f64>,
    g_b: DMatrix<f64>,
    g_c: DMatrix<f64>,
    pairs: usize,
    /// A-independent part of Σ_n KL(qⁿ‖p): the full KL at the reference A
    /// minus the A-dependent ½(tr(Q⁻¹X) + pairs·logdet Q).
    kl_const: f64,
}

fn posterior_constants(
    prior: &StablePrior,
    posteriors: &[SmoothedPosterior],
    cavities: &[Vec<GaussianExpFam>],
) -> Result<PosteriorConstants> {
    let d = prior.latent_dim();
    let n_seq = posteriors.len();
    let t_len = posteriors.first().map_or(0, |p| p.len());
    let cols = n_seq * t_len;

    let mut means = DMatrix::zeros(d, cols);
    let mut second_diag = DMatrix::zeros(d, cols);
    let mut second_sum = DMatrix::zeros(d, d);
    let mut cavity = Vec::with_capacity(cols);
    for t in 0..t_len {
        for (n, posterior) in posteriors.iter().enumerate() {
            let marginal = &posterior.marginals[t];
            let col = t * n_seq + n;
            means.set_column(col, &marginal.mean);
            let second = &marginal.cov + &marginal.mean * marginal.mean.transpose();
            for r in 0..d {
                second_diag[(r, col)] = second[(r, r)];
            }
            second_sum += &second;
            cavity.push(cavities[n][t].clone());
        }
    }

    let mut g_a = DMatrix::zeros(d, d);
    let mut g_b = DMatrix::zeros(d, d);
    let mut g_c = DMatrix::zeros(d, d);
    let mut pairs = 0;
    for posterior in posteriors {
        for t in 0..posterior.pairwise.len() {
            let cur = &posterior.marginals[t];
            let nxt = &posterior.marginals[t + 1];
            g_a += &cur.cov + &cur.mean * cur.mean.transpose();
            g_c += &nxt.cov + &nxt.mean * nxt.mean.transpose();
            g_b += &posterior.pairwise[t] + &nxt.mean * cur.mean.transpose();
            pairs += 1;
        }
    }

    // KL decomposes as (A-independent constant) + ½(tr(Q⁻¹X) + pairs·logdetQ)
    // with X = G_c − G_bAᵀ − AG_bᵀ + AG_aAᵀ; isolate the constant by
    // subtracting the A-dependent part at the reference transition.
    let mut kl_total = 0.0;
    for posterior in posteriors {
        kl_total += chain_kl(posterior, prior)?;
    }
    let a = prior.a();
    let q = prior.transition_cov();
    let chol = crate::gaussian::cholesky(&q, "transition covariance")?;
    let x = &g_c - &g_b * a.transpose() - a * g_b.transpose() + a * &g_a * a.transpose();
    let a_dep =
        0.5 * (chol.solve(&x).trace() + pairs as f64 * crate::gaussian::ln_det(&chol));
    Ok(PosteriorConstants {
        means,
        second_diag,
        second_sum,
        cavity,
        g_a,
        g_b,
        g_c,
        pairs,
        kl_const: kl_total - a_dep,
    })
}

/// Observation columns of `seqs` concatenated time-major (column t·N + n).
fn concat_time_major(seqs: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = seqs.len();
    let t_len = seqs.first().map_or(0, |m| m.ncols());
    let d = seqs.first().map_or(0, |m| m.nrows());
    DMatrix::from_fn(d, n * t_len, |r, c| seqs[c % n][(r, c / n)])
}

struct TapedObjective {
    tape: Tape,
    objective: Var,
    a_var: Var,
    rec_vars: Vec<Var>,
}

/// Build 𝓖 on a tape with posterior statistics as constants. The two
/// Φ(η^Δ) occurrences (−Φ in ⟨log f^Δ⟩, +Φ in −log Γ̃) cancel exactly and
/// are omitted from the graph. Inside the mixture log-sum-exp, η_q is
/// reconstituted as (frozen cavity) + (live own η^Δ), so the normalizer's
/// feedback through the sequence's own factor is differentiated.
fn build_objective_tape(
    prior: &StablePrior,
    recognition: &RecognitionModel,
    batch: &[DMatrix<f64>],
    mixture: &[DMatrix<f64>],
    consts: &PosteriorConstants,
) -> Result<TapedObjective> {
    let d = prior.latent_dim();
    let n_batch = batch.len();
    let t_len = batch.first().map_or(0, |m| m.ncols());
    let batch_cols = n_batch * t_len;

    let tape = Tape::new();
    let a_var = tape.var(prior.a().clone());
    let rec_vars: Vec<Var> =
        recognition.params().iter().map(|p| tape.var(p.clone())).collect();

    let shared = same_slices(batch, mixture);
    let out_b = recognition.forward_tape(&tape, &rec_vars, &concat_time_major(batch))?;
    let (out_m, n_mix) = if shared {
        (out_b, n_batch)
    } else {
        let out = recognition.forward_tape(&tape, &rec_vars, &concat_time_major(mixture))?;
        (out, mixture.len())
    };

    let eye = tape.constant(DMatrix::identity(d, d));
    let u_const = tape.constant(consts.means.clone());

    // Σ ⟨log f^Δ⟩ without its −Φ(η^Δ) part: Σ h^Δᵀμ − ½ Σ tr(J^Δ(Σ+μμᵀ)).
    let term_hu = tape.sum_all(tape.mul(out_b.naturals, u_const));
    let term_tr = match out_b.cov {
        TapedCovariance::Full { j } => {
            let s = tape.constant(consts.second_sum.clone());
            tape.scale(tape.trace(tape.matmul(j, s)), -0.5)
        }
        TapedCovariance::Diag { precisions } => {
            let s = tape.constant(consts.second_diag.clone());
            tape.scale(tape.sum_all(tape.mul(precisions, s)), -0.5)
        }
    };

    // Σ Φ(η₀+η^Δ) over batch columns (the head of Σ log Γ̃).
    let phi_head_sum = match out_b.cov {
        TapedCovariance::Full { j } => {
            tape.sum_all(tape.phi_multi(out_b.naturals, tape.add(j, eye))?)
        }
        TapedCovariance::Diag { precisions } => {
            let ones = tape.constant(DMatrix::from_element(d, batch_cols, 1.0));
            tape.sum_all(tape.phi_diag(out_b.naturals, tape.add(precisions, ones))?)
        }
    };

    // Within-batch log-sum-exp terms, one per (t, n).
    let data_dependent = matches!(recognition.covariance(), CovarianceKind::DataDiag);
    let mut lses: Vec<Var> = Vec::with_capacity(batch_cols);
    if !data_dependent {
        // One shared delta precision: batched Φ over the mixture block per t.
        let j_mix = match out_m.cov {
            TapedCovariance::Full { j } => j,
            TapedCovariance::Diag { precisions } => {
                tape.diag_from_vec(tape.slice_cols(precisions, 0, 1))
            }
        };
        let j_own = match out_b.cov {
            TapedCovariance::Full { j } => j,
            TapedCovariance::Diag { precisions } => {
                tape.diag_from_vec(tape.slice_cols(precisions, 0, 1))
            }
        };
        let j_own_mix = tape.add(j_own, j_mix);
        for t in 0..t_len {
            let mix_h = tape.slice_cols(out_m.naturals, t * n_mix, n_mix);
            let phi0 = match out_m.cov {
                TapedCovariance::Full { j } => tape.phi_multi(mix_h, tape.add(j, eye))?,
                TapedCovariance::Diag { precisions } => {
                    let block = tape.slice_cols(precisions, t * n_mix, n_mix);
                    let ones = tape.constant(DMatrix::from_element(d, n_mix, 1.0));
                    tape.phi_diag(mix_h, tape.add(block, ones))?
                }
            };
            for n in 0..n_batch {
                let col = t * n_batch + n;
                let cav = &consts.cavity[col];
                let own_h = tape.slice_cols(out_b.naturals, col, 1);
                let h_q = tape.add(tape.constant_vec(cav.h.clone()), own_h);
                let h_row = tape.add_colvec(mix_h, h_q);
                let j_cross = tape.add(tape.constant(cav.j.clone()), j_own_mix);
                let phi_cross = tape.phi_multi(h_row, j_cross)?;
                lses.push(tape.logsumexp(tape.sub(phi_cross, phi0)));
            }
        }
    } else {
        // Data-dependent diagonal deltas: every (t, n, n') has its own
        // precision sum, so the cross Φ runs column-by-column. O(N²T)
        // factorizations — acceptable at gradient-check scales.
        let precisions = match out_m.cov {
            TapedCovariance::Diag { precisions } => precisions,
            TapedCovariance::Full { .. } => unreachable!("data-diag emits diagonal precisions"),
        };
        let precisions_b = match out_b.cov {
            TapedCovariance::Diag { precisions } => precisions,
            TapedCovariance::Full { .. } => unreachable!("data-diag emits diagonal precisions"),
        };
        let ones1 = tape.constant(DMatrix::from_element(d, 1, 1.0));
        let mix_cols: Vec<(Var, Var, Var)> = (0..t_len * n_mix)
            .map(|c| {
                let h_col = tape.slice_cols(out_m.naturals, c, 1);
                let p_col = tape.slice_cols(precisions, c, 1);
                (h_col, p_col, tape.diag_from_vec(p_col))
            })
            .collect();
        let phi0_cols: Vec<Var> = mix_cols
            .iter()
            .map(|&(h_col, p_col, _)| tape.phi_diag(h_col, tape.add(p_col, ones1)))
            .collect::<Result<Vec<_>>>()?;
        for t in 0..t_len {
            for n in 0..n_batch {
                let col = t * n_batch + n;
                let cav = &consts.cavity[col];
                let own_h = tape.slice_cols(out_b.naturals, col, 1);
                let own_j = tape.diag_from_vec(tape.slice_cols(precisions_b, col, 1));
                let h_q = tape.add(tape.constant_vec(cav.h.clone()), own_h);
                let j_q = tape.add(tape.constant(cav.j.clone()), own_j);
                let diffs: Vec<Var> = (0..n_mix)
                    .map(|m| {
                        let c = t * n_mix + m;
                        let (h_col, _, j_dd) = mix_cols[c];
                        let phi_cross =
                            tape.phi_multi(tape.add(h_col, h_q), tape.add(j_q, j_dd))?;
                        Ok(tape.sub(phi_cross, phi0_cols[c]))
                    })
                    .collect::<Result<Vec<_>>>()?;
                lses.push(tape.logsumexp(tape.concat_cols(&diffs)));
            }
        }
    }
    let lse_sum = tape.sum_all(tape.concat_cols(&lses));

    // −Σ log Γ̃ constants: each of the TN terms contributes +Φ(η₀)+log N_mix.
    let phi0_const = 0.5 * d as f64 * LN_2PI;
    let gamma_const = batch_cols as f64 * (phi0_const + (n_mix as f64).ln());

    // Chain KL: ½(tr(Q⁻¹X) + pairs·logdet Q) + const, Q = I − AAᵀ.
    let q_mat = tape.sub(eye, tape.matmul(a_var, tape.transpose(a_var)));
    let g_a = tape.constant(consts.g_a.clone());
    let g_b = tape.constant(consts.g_b.clone());
    let g_c = tape.constant(consts.g_c.clone());
    let x_mat = tape.add(
        tape.sub(
            tape.sub(g_c, tape.matmul(g_b, tape.transpose(a_var))),
            tape.matmul(a_var, tape.transpose(g_b)),
        ),
        tape.matmul(a_var, tape.matmul(g_a, tape.transpose(a_var))),
    );
    let kl_var = tape.scale(
        tape.add(
            tape.trace(tape.spd_solve(q_mat, x_mat)?),
            tape.scale(tape.chol_logdet(q_mat)?, consts.pairs as f64),
        ),
        0.5,
    );

    let mut objective = tape.add(term_hu, term_tr);
    objective = tape.sub(objective, phi_head_sum);
    objective = tape.sub(objective, lse_sum);
    objective = tape.sub(objective, kl_var);
    objective = tape.add(
        objective,
        tape.constant_scalar(gamma_const - consts.kl_const),
    );
    Ok(TapedObjective { tape, objective, a_var, rec_vars })
}

/// One generalized-EM step: exact smoothing at the current parameters, then
/// `m_steps_per_e_step` Adam updates on −𝓖, each followed by the
/// singular-value projection of A. Posterior moments and leave-own-factor-out
/// cavities are frozen at the E-step; the recognition factor inside each Γ̃'s
/// η_q stays live, so the mixture normalizer's own-factor feedback reaches
/// the gradient. Returns the batch 𝓖 evaluated at the parameters the step
/// started from.
pub fn em_step(
    state: &mut TrainState,
    batch: &[DMatrix<f64>],
    mixture: &[DMatrix<f64>],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("batch must be nonempty".into()));
    }
    let posteriors = smooth_batch(&state.prior, &state.recognition, batch)?;
    let cavities = recognition_cavities(&state.recognition, batch, &posteriors)?;
    let consts = posterior_constants(&state.prior, &posteriors, &cavities)?;

    let mut entry_objective = f64::NAN;
    for m_step in 0..state.config.m_steps_per_e_step {
        let taped = build_objective_tape(
            &state.prior,
            &state.recognition,
            batch,
            mixture,
            &consts,
        )?;
        let value = taped.tape.scalar(taped.objective);
        if !value.is_finite() {
            let bad = posteriors
                .iter()
                .position(|p| !p.log_normalizer.is_finite())
                .map_or("unknown".to_string(), |n| n.to_string());
            return Err(Error::NonFinite(format!(
                "objective at iteration {} (offending batch sequence: {bad})",
                state.iteration
            )));
        }
        if m_step == 0 {
            entry_objective = value;
        }

        let mut inputs = vec![taped.a_var];
        inputs.extend_from_slice(&taped.rec_vars);
        let mut grads = taped.tape.gradient(taped.objective, &inputs)?;
        // Adam *descends*; the objective is maximized.
        for g in &mut grads {
            g.neg_mut();
        }

        let mut params = vec![state.prior.a().clone()];
        params.extend_from_slice(state.recognition.params());
        self::Adam::update(&mut state.adam, state.config.learning_rate, &mut params, &grads);

        let a_new = clip_singular_values(&params[0], state.config.clip_eps);
        state.prior = StablePrior::new(a_new)?;
        state.recognition.set_params(params.split_off(1))?;
    }
    state.iteration += 1;
    Ok(entry_objective)
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub objective: f64,
    pub spectral_norm_a: f64,
    pub wall_ms: f64,
}

/// Write the metrics trace as CSV with the canonical header.
pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricsRow]) -> io::Result<()> {
    writeln!(w, "iteration,objective,spectral_norm_A,wall_ms")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.iteration, r.objective, r.spectral_norm_a, r.wall_ms)?;
    }
    Ok(())
}

/// Run generalized EM on uniformly sampled minibatches.
///
/// The trace has `iterations + 1` rows: row i < iterations records the batch
/// objective at the parameters *entering* iteration i (and ‖A‖₂ after its
/// projection); the final row is a fresh-batch evaluation of the finished
/// model. Fixed seeds give bit-identical traces up to the wall_ms column.
pub fn train(
    config: &TrainConfig,
    dataset: &[DMatrix<f64>],
) -> Result<(TrainState, Vec<MetricsRow>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset must be nonempty".into()));
    }
    let d_x = dataset[0].nrows();
    let t_len = dataset[0].ncols();
    if dataset.iter().any(|m| m.nrows() != d_x || m.ncols() != t_len) {
        return Err(Error::DimensionMismatch(
            "all sequences must share observation dimension and length".into(),
        ));
    }
    if config.batch_size > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "batch_size {} exceeds the {} available sequences",
            config.batch_size,
            dataset.len()
        )));
    }

    let mut state = TrainState::init(config, d_x)?;
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, "train/batches"));
    let draw_batch = |rng: &mut ChaCha20Rng| -> Vec<DMatrix<f64>> {
        rand::seq::index::sample(rng, dataset.len(), config.batch_size)
            .iter()
            .map(|i| dataset[i].clone())
            .collect()
    };

    let mut rows = Vec::with_capacity(config.iterations + 1);
    for i in 0..config.iterations {
        let start = Instant::now();
        let batch = draw_batch(&mut rng);
        let objective = match config.mixture_scope {
            MixtureScope::Batch => em_step(&mut state, &batch, &batch)?,
            MixtureScope::Full => em_step(&mut state, &batch, dataset)?,
        };
        rows.push(MetricsRow {
            iteration: i,
            objective,
            spectral_norm_a: spectral_norm(state.prior.a()),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }

    let start = Instant::now();
    let batch = draw_batch(&mut rng);
    let mixture: &[DMatrix<f64>] = match config.mixture_scope {
        MixtureScope::Batch => &batch,
        MixtureScope::Full => dataset,
    };
    let (objective, _) =
        auxiliary_free_energy(&state.prior, &state.recognition, &batch, mixture)?;
    rows.push(MetricsRow {
        iteration: config.iterations,
        objective,
        spectral_norm_a: spectral_norm(state.prior.a()),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    });
    Ok((state, rows))
}
