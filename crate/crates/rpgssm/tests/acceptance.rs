//! Acceptance suite: one integration test per release criterion, each named
//! after the property it certifies. The two training-based criteria share a
//! single lazily-trained linear-task model; with the default single test
//! thread that model is trained exactly once per run.

mod common;

use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rpgssm::data::{gen_linear, gen_pendulum, Dataset};
use rpgssm::eval::{fit_r2, rollout_predict, smoothed_means, RegressionReport};
use rpgssm::gaussian::GaussianExpFam;
use rpgssm::prior::{
    canonicalize, kalman_loglik, solve_lyapunov, GeneralGssmParams, LinearEmission, StablePrior,
};
use rpgssm::recognition::{Activation, Architecture, CovarianceKind};
use rpgssm::smoother::{chain_kl, smooth};
use rpgssm::trainer::{
    auxiliary_free_energy, auxiliary_free_energy_collapsed, log_gamma_tilde,
    m_step_gradients, m_step_objective, recognition_cavities, train, MetricsRow, TrainConfig,
    TrainState,
};

fn random_obs(d_x: usize, t: usize, rng: &mut ChaCha20Rng) -> DMatrix<f64> {
    DMatrix::from_fn(d_x, t, |_, _| rng.random::<f64>() * 2.0 - 1.0)
}

fn random_spd(d: usize, floor: f64, rng: &mut ChaCha20Rng) -> DMatrix<f64> {
    let w = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    &w * w.transpose() + DMatrix::identity(d, d) * floor
}

/// Criterion: the forward–backward smoother agrees with a dense joint-
/// Gaussian solve — marginals, consecutive cross-covariances, log-normalizer,
/// and chain KL — to 1e-8 absolute on 100 randomized instances, in under 10 s.
#[test]
fn smoother_matches_the_dense_joint_gaussian_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    for case in 0..100 {
        let d = 1 + case % 3;
        let t_len = 2 + case % 4;
        let max_norm = 0.2 + 0.7 * rng.random::<f64>();
        let prior = common::random_stable_prior(d, max_norm, &mut rng);
        let potentials = common::random_potentials(d, t_len, &mut rng);

        let fast = smooth(&prior, &potentials).unwrap();
        let dense = common::dense_smooth(&prior, &potentials);

        for (t, (a, b)) in fast.marginals.iter().zip(&dense.marginals).enumerate() {
            let mean_err = (&a.mean - &b.mean).amax();
            let cov_err = (&a.cov - &b.cov).amax();
            assert!(mean_err <= 1e-8, "case {case} t {t}: marginal mean off by {mean_err}");
            assert!(cov_err <= 1e-8, "case {case} t {t}: marginal cov off by {cov_err}");
        }
        for (t, (a, b)) in fast.pairwise.iter().zip(&dense.pairwise).enumerate() {
            let err = (a - b).amax();
            assert!(err <= 1e-8, "case {case} t {t}: pairwise cross-cov off by {err}");
        }
        let ln_err = (fast.log_normalizer - dense.log_normalizer).abs();
        assert!(ln_err <= 1e-8, "case {case}: log-normalizer off by {ln_err}");
        let kl_err = (chain_kl(&fast, &prior).unwrap() - dense.kl_to_prior).abs();
        assert!(kl_err <= 1e-8, "case {case}: chain KL off by {kl_err}");
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "oracle comparison took {elapsed:.1} s, budget is 10 s");
}

/// Criterion: canonicalization leaves the Kalman log-likelihood unchanged to
/// 1e-8 on 50 randomized stable systems, and every canonical system has
/// ‖b‖ ≤ 1e-10 and ‖Q∞ − I‖_F ≤ 1e-9.
#[test]
fn canonical_form_preserves_the_kalman_likelihood() {
    let mut rng = ChaCha20Rng::seed_from_u64(202);
    for case in 0..50 {
        let d = 1 + case % 4;
        let t_len = 2 + case % 9;
        let d_x = 1 + case % 3;
        let prior = common::random_stable_prior(d, 0.9, &mut rng);
        let params = GeneralGssmParams {
            m1: nalgebra::DVector::from_fn(d, |_, _| rng.random::<f64>() * 2.0 - 1.0),
            q1: random_spd(d, 0.3, &mut rng),
            a: prior.a().clone(),
            b: nalgebra::DVector::from_fn(d, |_, _| rng.random::<f64>() * 2.0 - 1.0),
            q: random_spd(d, 0.3, &mut rng),
            emission: Some(LinearEmission {
                c: DMatrix::from_fn(d_x, d, |_, _| rng.random::<f64>() * 2.0 - 1.0),
                d: nalgebra::DVector::from_fn(d_x, |_, _| rng.random::<f64>()),
                r: random_spd(d_x, 0.4, &mut rng),
            }),
        };
        // Likelihood invariance is algebraic, so any observation matrix
        // (rows are time steps) exercises it.
        let observations = DMatrix::from_fn(t_len, d_x, |_, _| rng.random::<f64>() * 4.0 - 2.0);

        let before = kalman_loglik(&params, &observations).unwrap();
        let (_, _, canonical) = canonicalize(&params).unwrap();
        let after = kalman_loglik(&canonical, &observations).unwrap();
        let err = (before - after).abs();
        assert!(
            err <= 1e-8 * before.abs().max(1.0),
            "case {case}: log-likelihood moved by {err} ({before} → {after})"
        );

        let bias = canonical.b.norm();
        assert!(bias <= 1e-10, "case {case}: canonical bias has norm {bias}");
        let q_inf = solve_lyapunov(&canonical.a, &canonical.q).unwrap();
        let q_err = (&q_inf - DMatrix::identity(d, d)).norm();
        assert!(q_err <= 1e-9, "case {case}: ‖Q∞ − I‖_F = {q_err}");
    }
}

/// Criterion: reverse-mode gradients of the M-step objective match central
/// finite differences to 1e-5 relative on N=3/T=4/D_Z=2/D_X=3 instances for
/// both architectures and all three covariance parametrizations, in under
/// 30 s.
#[test]
fn taped_gradients_match_finite_differences_for_every_parametrization() {
    let started = Instant::now();
    let archs = [
        Architecture::Linear,
        Architecture::Mlp { hidden: vec![5], activation: Activation::Tanh },
    ];
    let covs =
        [CovarianceKind::ConstantFull, CovarianceKind::ConstantDiag, CovarianceKind::DataDiag];

    let mut seed = 300;
    for arch in &archs {
        for &cov in &covs {
            seed += 1;
            let config = TrainConfig::new(2, 0, arch.clone(), cov, seed);
            let state = TrainState::init(&config, 3).unwrap();
            let mut rng = ChaCha20Rng::seed_from_u64(seed + 1000);
            let batch: Vec<DMatrix<f64>> = (0..3).map(|_| random_obs(3, 4, &mut rng)).collect();

            let posteriors: Vec<_> = batch
                .iter()
                .map(|x| {
                    let pots = state.recognition.apply_cols(x).unwrap();
                    smooth(&state.prior, &pots).unwrap()
                })
                .collect();
            let cavities =
                recognition_cavities(&state.recognition, &batch, &posteriors).unwrap();
            let (_, grads) = m_step_gradients(
                &state.prior,
                &state.recognition,
                &batch,
                &batch,
                &posteriors,
                &cavities,
            )
            .unwrap();

            let eval = |a: &DMatrix<f64>, rec_params: &[DMatrix<f64>]| -> f64 {
                let prior = StablePrior::new(a.clone()).unwrap();
                let mut rec = state.recognition.clone();
                rec.set_params(rec_params.to_vec()).unwrap();
                m_step_objective(&prior, &rec, &batch, &batch, &posteriors, &cavities)
                    .unwrap()
            };
            let base_a = state.prior.a().clone();
            let base_rec = state.recognition.params().to_vec();
            let h = 1e-5;
            for (pi, grad) in grads.iter().enumerate() {
                let mut fd = DMatrix::zeros(grad.nrows(), grad.ncols());
                for r in 0..grad.nrows() {
                    for c in 0..grad.ncols() {
                        let bump = |sign: f64| -> f64 {
                            let mut a = base_a.clone();
                            let mut rec = base_rec.clone();
                            if pi == 0 {
                                a[(r, c)] += sign * h;
                            } else {
                                rec[pi - 1][(r, c)] += sign * h;
                            }
                            eval(&a, &rec)
                        };
                        fd[(r, c)] = (bump(1.0) - bump(-1.0)) / (2.0 * h);
                    }
                }
                let rel = (grad - &fd).norm() / fd.norm().max(1.0);
                assert!(
                    rel <= 1e-5,
                    "{arch:?}/{cov:?} param {pi}: gradient relative error {rel}"
                );
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "gradient check took {elapsed:.1} s, budget is 30 s");
}

/// Criterion: with the posterior marginal pinned to the prior marginal,
/// log Γ̃ collapses to −log Z = Φ(η₀+η^Δ) − Φ(η₀) − Φ(η^Δ) on 100 random
/// batches, to 1e-10.
#[test]
fn gamma_tilde_at_the_prior_marginal_is_minus_log_z() {
    let mut rng = ChaCha20Rng::seed_from_u64(404);
    for case in 0..100 {
        let d = 1 + case % 3;
        let batch_size = 1 + case % 8;
        let deltas = common::random_potentials(d, batch_size, &mut rng);
        let eta0 = GaussianExpFam::standard(d);
        for delta in &deltas {
            let value = log_gamma_tilde(&eta0, delta, &eta0, &deltas).unwrap();
            let (_, minus_log_z) = eta0.product(delta).unwrap();
            let err = (value - minus_log_z).abs();
            assert!(err <= 1e-10, "case {case}: log Γ̃ − (−log Z) = {err}");
        }
    }
}

/// Criterion: the expectation form and the collapsed form of the objective
/// agree at the exact posterior to 1e-8 relative on 50 random small
/// instances spanning both architectures and all covariance kinds.
#[test]
fn expectation_and_collapsed_objectives_agree_at_the_exact_posterior() {
    let covs =
        [CovarianceKind::ConstantFull, CovarianceKind::ConstantDiag, CovarianceKind::DataDiag];
    for case in 0..50 {
        let arch = if case % 2 == 0 {
            Architecture::Linear
        } else {
            Architecture::Mlp { hidden: vec![4], activation: Activation::Tanh }
        };
        let config = TrainConfig::new(1 + case % 3, 0, arch, covs[case % 3], 500 + case as u64);
        let state = TrainState::init(&config, 2 + case % 3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(900 + case as u64);
        let batch: Vec<DMatrix<f64>> = (0..2 + case % 3)
            .map(|_| random_obs(2 + case % 3, 2 + case % 4, &mut rng))
            .collect();

        let (expectation, _) =
            auxiliary_free_energy(&state.prior, &state.recognition, &batch, &batch).unwrap();
        let (collapsed, _) =
            auxiliary_free_energy_collapsed(&state.prior, &state.recognition, &batch, &batch)
                .unwrap();
        let err = (expectation - collapsed).abs();
        assert!(
            err <= 1e-8 * expectation.abs().max(1.0),
            "case {case}: |{expectation} − {collapsed}| = {err}"
        );
    }
}

/// A linear-task model trained with the reference hyper-parameters, shared by
/// the recovery, stability, and rollout criteria. Seeds are tried lazily in
/// order; the first run whose held-out mean R² clears 0.90 wins.
struct SharedLinear {
    dataset: Dataset,
    state: TrainState,
    rows: Vec<MetricsRow>,
    report: RegressionReport,
    seed_results: Vec<(u64, f64)>,
    passed: bool,
    slowest_run_min: f64,
}

fn shared_linear() -> &'static SharedLinear {
    static SHARED: OnceLock<SharedLinear> = OnceLock::new();
    SHARED.get_or_init(|| {
        let dataset = gen_linear(4, 16, 200, 100, 42).unwrap();
        let mut seed_results = Vec::new();
        let mut best: Option<(TrainState, Vec<MetricsRow>, RegressionReport)> = None;
        let mut slowest_run_min = 0.0_f64;
        for seed in [1, 2, 3] {
            let config = TrainConfig::new(
                4,
                10_000,
                Architecture::Linear,
                CovarianceKind::ConstantDiag,
                seed,
            );
            let started = Instant::now();
            let (state, rows) = train(&config, &dataset.observations).unwrap();
            slowest_run_min = slowest_run_min.max(started.elapsed().as_secs_f64() / 60.0);
            let features =
                smoothed_means(&state.prior, &state.recognition, &dataset.observations)
                    .unwrap();
            let report = fit_r2(&features, &dataset.ground_truth, 0).unwrap();
            seed_results.push((seed, report.mean_r2));
            let improved =
                best.as_ref().map_or(true, |(_, _, b)| report.mean_r2 > b.mean_r2);
            if improved {
                best = Some((state, rows, report));
            }
            if seed_results.last().unwrap().1 >= 0.90 {
                break;
            }
        }
        let (state, rows, report) = best.unwrap();
        let passed = seed_results.iter().any(|&(_, r2)| r2 >= 0.90);
        SharedLinear { dataset, state, rows, report, seed_results, passed, slowest_run_min }
    })
}

/// Criterion: on gen_linear(4, 16, 200, 100) with linear recognition and the
/// reference hyper-parameters (batch 32, learning rate 1e-3, 10 000
/// iterations), held-out mean R² against the true latents reaches 0.90 on at
/// least one of three seeds, each run under 20 minutes.
#[test]
fn linear_task_training_recovers_the_true_latents() {
    let shared = shared_linear();
    assert!(
        shared.slowest_run_min < 20.0,
        "slowest training run took {:.1} min, budget is 20 min",
        shared.slowest_run_min
    );
    assert!(
        shared.passed,
        "no seed reached mean R² 0.90: {:?}",
        shared.seed_results
    );
}

/// Iteration budget for the pendulum criterion, calibrated so the first seed
/// clears the R² floors with margin at roughly 0.2 s per iteration.
const PENDULUM_ITERATIONS: usize = 1500;

/// Criterion: on gen_pendulum(n=64) with an MLP recognition network (two
/// hidden layers of 128) and D_Z = 8, held-out linear R² reaches 0.7 for
/// sin θ and 0.3 for ω on at least one of three seeds.
#[test]
fn pendulum_training_recovers_angle_and_velocity() {
    let dataset = gen_pendulum(64, 100, 11, 16).unwrap();
    let mut results = Vec::new();
    let mut passed = false;
    for seed in [1, 2, 3] {
        let config = TrainConfig::new(
            8,
            PENDULUM_ITERATIONS,
            Architecture::Mlp { hidden: vec![128, 128], activation: Activation::Tanh },
            CovarianceKind::ConstantFull,
            seed,
        );
        let (state, _) = train(&config, &dataset.observations).unwrap();
        let features =
            smoothed_means(&state.prior, &state.recognition, &dataset.observations).unwrap();
        let report = fit_r2(&features, &dataset.ground_truth, 0).unwrap();
        let (r2_sin, r2_omega) = (report.per_target_r2[0], report.per_target_r2[1]);
        results.push((seed, r2_sin, r2_omega));
        if r2_sin >= 0.7 && r2_omega >= 0.3 {
            passed = true;
            break;
        }
    }
    assert!(passed, "no seed reached R²(sin θ) 0.7 and R²(ω) 0.3: {results:?}");
}

/// Criterion: chains sampled from both a trained prior and random stable
/// priors have pooled empirical second moments within 5 standard errors of
/// the identity, over at least 10⁵ pooled samples per prior.
#[test]
fn sampled_chains_stay_standard_normal_in_the_stationary_regime() {
    let chains = 1000;
    let t_len = 100;

    let mut rng = ChaCha20Rng::seed_from_u64(808);
    let mut priors = vec![shared_linear().state.prior.clone()];
    for max_norm in [0.3, 0.6, 0.95] {
        priors.push(common::random_stable_prior(2 + priors.len() % 3, max_norm, &mut rng));
    }

    for (pi, prior) in priors.iter().enumerate() {
        let d = prior.latent_dim();
        // One second-moment average per chain; chains are i.i.d., so the
        // entrywise standard error across chains is honest even though the
        // samples inside a chain are strongly autocorrelated.
        let mut sum = DMatrix::zeros(d, d);
        let mut sum_sq = DMatrix::zeros(d, d);
        for c in 0..chains {
            let z = prior.sample_chain(t_len, 9000 + (pi * chains + c) as u64);
            let moment = z.transpose() * &z / t_len as f64;
            sum += &moment;
            sum_sq += moment.component_mul(&moment);
        }
        let mean = &sum / chains as f64;
        for r in 0..d {
            for c in 0..d {
                let var = (sum_sq[(r, c)] / chains as f64 - mean[(r, c)].powi(2)).max(0.0);
                let se = (var / chains as f64).sqrt();
                let target = if r == c { 1.0 } else { 0.0 };
                let dev = (mean[(r, c)] - target).abs();
                assert!(
                    dev <= 5.0 * se,
                    "prior {pi} entry ({r},{c}): |{:.5} − {target}| = {dev:.5} > 5·SE = {:.5}",
                    mean[(r, c)],
                    5.0 * se
                );
            }
        }
    }
}

/// Criterion: ‖A‖₂ ≤ 0.999 at every recorded iteration of an entire training
/// run — checked on the shared 10 000-iteration run and on a short
/// high-learning-rate run that actively drives A into the cap.
#[test]
fn every_recorded_iteration_respects_the_stability_margin() {
    let shared = shared_linear();
    for row in &shared.rows {
        assert!(
            row.spectral_norm_a <= 0.999 + 1e-12,
            "iteration {}: ‖A‖₂ = {}",
            row.iteration,
            row.spectral_norm_a
        );
    }

    let dataset = gen_linear(3, 8, 40, 30, 77).unwrap();
    let config = TrainConfig {
        batch_size: 8,
        learning_rate: 0.01,
        ..TrainConfig::new(3, 200, Architecture::Linear, CovarianceKind::ConstantDiag, 5)
    };
    let (_, rows) = train(&config, &dataset.observations).unwrap();
    let max_norm = rows.iter().map(|r| r.spectral_norm_a).fold(0.0, f64::max);
    assert!(max_norm <= 0.999 + 1e-12, "stress run reached ‖A‖₂ = {max_norm}");
    assert!(
        max_norm >= 0.99,
        "stress run never approached the cap (max ‖A‖₂ = {max_norm}); the check is vacuous"
    );
}

/// Criterion: with the trained linear-task model, 50-step rollouts after a
/// 50-step context reach R² ≥ 0.5 against the true latents over the first 10
/// predicted steps, and per-step R² at step 1 exceeds step 25.
#[test]
fn rollout_predictions_track_the_future_before_degrading() {
    let shared = shared_linear();
    let (context, horizon) = (50, 50);
    let d_g = shared.dataset.ground_truth[0].nrows();

    // Predicted targets and ground truth per held-out sequence, horizon-major.
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for &i in &shared.report.test_sequences {
        let obs = &shared.dataset.observations[i];
        let latents = rollout_predict(&shared.state, obs, context, horizon).unwrap();
        preds.push(shared.report.predict(&latents.transpose()));
        truths.push(shared.dataset.ground_truth[i].columns(context, horizon).into_owned());
    }

    // Pooled R² over the first `steps` predicted steps, averaged over targets.
    let pooled_r2 = |steps: std::ops::Range<usize>| -> f64 {
        let mut r2_sum = 0.0;
        for g in 0..d_g {
            let rows: Vec<(f64, f64)> = preds
                .iter()
                .zip(&truths)
                .flat_map(|(p, y)| steps.clone().map(move |k| (p[(g, k)], y[(g, k)])))
                .collect();
            let mean = rows.iter().map(|&(_, y)| y).sum::<f64>() / rows.len() as f64;
            let sse: f64 = rows.iter().map(|&(p, y)| (p - y).powi(2)).sum();
            let sst: f64 = rows.iter().map(|&(_, y)| (y - mean).powi(2)).sum();
            r2_sum += 1.0 - sse / sst;
        }
        r2_sum / d_g as f64
    };

    let early = pooled_r2(0..10);
    assert!(early >= 0.5, "first-10-step rollout R² = {early:.3}, floor is 0.5");
    let step1 = pooled_r2(0..1);
    let step25 = pooled_r2(24..25);
    assert!(
        step1 > step25,
        "rollout quality must degrade with horizon: step-1 R² {step1:.3} vs step-25 {step25:.3}"
    );
}
