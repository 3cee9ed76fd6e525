//! Evaluation probes: a linear-regression readout from posterior means to
//! ground-truth targets, and mean-dynamics rollouts for forecasting.
//!
//! The regression probe pools (sequence, time) rows, fits ordinary least
//! squares with an intercept on an 80/20 sequence-level split, and reports
//! the coefficient of determination per target dimension on the held-out
//! rows. Splitting at sequence granularity keeps temporally adjacent (and
//! hence correlated) rows of one sequence on one side of the split.

use nalgebra::{Cholesky, DMatrix, DVector, RowDVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::prior::StablePrior;
use crate::recognition::RecognitionModel;
use crate::smoother::smooth;
use crate::trainer::TrainState;

/// Result of the linear readout probe.
#[derive(Debug, Clone)]
pub struct RegressionReport {
    /// Held-out R² per target dimension.
    pub per_target_r2: Vec<f64>,
    /// Mean of `per_target_r2`.
    pub mean_r2: f64,
    /// Readout weights, targets × features.
    pub weights: DMatrix<f64>,
    /// Readout intercept, one entry per target.
    pub intercept: DVector<f64>,
    /// Sequence indices used for fitting.
    pub train_sequences: Vec<usize>,
    /// Sequence indices used for scoring.
    pub test_sequences: Vec<usize>,
    /// True when the normal equations needed a ridge jitter to factorize.
    pub ridge_fallback: bool,
}

impl RegressionReport {
    /// Apply the fitted readout to a features-by-time matrix.
    pub fn predict(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        let ones = RowDVector::from_element(features.ncols(), 1.0);
        &self.weights * features + &self.intercept * ones
    }

    /// CSV rows `target,r2` followed by a `mean,<value>` row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "target,r2")?;
        for (g, r2) in self.per_target_r2.iter().enumerate() {
            writeln!(w, "{g},{r2}")?;
        }
        writeln!(w, "mean,{}", self.mean_r2)
    }
}

fn validate_pairs(features: &[DMatrix<f64>], targets: &[DMatrix<f64>]) -> Result<(usize, usize)> {
    if features.is_empty() || features.len() != targets.len() {
        return Err(Error::InvalidArgument(
            "need one nonempty target sequence per feature sequence".into(),
        ));
    }
    let d_f = features[0].nrows();
    let d_g = targets[0].nrows();
    let mut rows = 0;
    for (i, (f, g)) in features.iter().zip(targets).enumerate() {
        if f.nrows() != d_f || g.nrows() != d_g {
            return Err(Error::DimensionMismatch(format!(
                "sequence {i}: inconsistent feature or target dimension"
            )));
        }
        if f.ncols() != g.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "sequence {i}: {} feature steps vs {} target steps",
                f.ncols(),
                g.ncols()
            )));
        }
        rows += f.ncols();
    }
    if rows < 2 {
        return Err(Error::InvalidArgument("regression needs at least 2 samples".into()));
    }
    Ok((d_f, d_g))
}

/// Stack the time columns of the selected sequences as rows.
fn pool_rows(seqs: &[DMatrix<f64>], idx: &[usize]) -> DMatrix<f64> {
    let d = seqs[0].nrows();
    let rows: usize = idx.iter().map(|&i| seqs[i].ncols()).sum();
    let mut out = DMatrix::zeros(rows, d);
    let mut row = 0;
    for &i in idx {
        for t in 0..seqs[i].ncols() {
            for r in 0..d {
                out[(row, r)] = seqs[i][(r, t)];
            }
            row += 1;
        }
    }
    out
}

/// Least squares with intercept via the normal equations. A gram matrix
/// that fails to factorize falls back to a ridge jitter (starting at 1e-8)
/// and sets the fallback flag.
fn ols_with_intercept(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>, bool)> {
    let (rows, d) = x.shape();
    let mut xa = DMatrix::from_element(rows, d + 1, 1.0);
    xa.view_mut((0, 0), (rows, d)).copy_from(x);
    let gram = xa.transpose() * &xa;
    let rhs = xa.transpose() * y;

    let mut ridge_fallback = false;
    let chol = match Cholesky::new(gram.clone()) {
        Some(c) => c,
        None => {
            ridge_fallback = true;
            let mut jitter = 1e-8;
            loop {
                let damped = &gram + DMatrix::identity(d + 1, d + 1) * jitter;
                if let Some(c) = Cholesky::new(damped) {
                    break c;
                }
                jitter *= 10.0;
                if jitter > 1.0 {
                    return Err(Error::NotPositiveDefinite(
                        "regression normal equations stayed singular under ridge jitter".into(),
                    ));
                }
            }
        }
    };
    let w_aug = chol.solve(&rhs);
    let weights = w_aug.rows(0, d).transpose();
    let intercept = DVector::from_fn(y.ncols(), |g, _| w_aug[(d, g)]);
    Ok((weights, intercept, ridge_fallback))
}

fn r2_per_target(y: &DMatrix<f64>, y_hat: &DMatrix<f64>) -> Vec<f64> {
    (0..y.ncols())
        .map(|g| {
            let col = y.column(g);
            let mean = col.mean();
            let ssr: f64 =
                col.iter().zip(y_hat.column(g).iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            let sst: f64 = col.iter().map(|a| (a - mean) * (a - mean)).sum();
            if sst == 0.0 {
                if ssr <= 1e-24 {
                    1.0
                } else {
                    0.0
                }
            } else {
                1.0 - ssr / sst
            }
        })
        .collect()
}

fn fit_on_split(
    features: &[DMatrix<f64>],
    targets: &[DMatrix<f64>],
    train: Vec<usize>,
    test: Vec<usize>,
) -> Result<RegressionReport> {
    let x_train = pool_rows(features, &train);
    let y_train = pool_rows(targets, &train);
    let (weights, intercept, ridge_fallback) = ols_with_intercept(&x_train, &y_train)?;

    let x_test = pool_rows(features, &test);
    let y_test = pool_rows(targets, &test);
    let ones = DVector::from_element(x_test.nrows(), 1.0);
    let y_hat = &x_test * weights.transpose() + ones * intercept.transpose();
    let per_target_r2 = r2_per_target(&y_test, &y_hat);
    let mean_r2 = per_target_r2.iter().sum::<f64>() / per_target_r2.len() as f64;
    if !mean_r2.is_finite() {
        return Err(Error::NonFinite("regression R²".into()));
    }
    Ok(RegressionReport {
        per_target_r2,
        mean_r2,
        weights,
        intercept,
        train_sequences: train,
        test_sequences: test,
        ridge_fallback,
    })
}

/// Fit the readout on an 80/20 sequence-level split drawn from `split_seed`
/// and score it on the held-out sequences. Sequences are features-by-time.
pub fn fit_r2(
    features: &[DMatrix<f64>],
    targets: &[DMatrix<f64>],
    split_seed: u64,
) -> Result<RegressionReport> {
    validate_pairs(features, targets)?;
    let n = features.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "a sequence-level split needs at least 2 sequences; use fit_r2_pooled".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(split_seed);
    idx.shuffle(&mut rng);
    let n_test = ((n as f64 * 0.2).round() as usize).clamp(1, n - 1);
    let (train, test) = idx.split_at(n - n_test);
    fit_on_split(features, targets, train.to_vec(), test.to_vec())
}

/// Fit and score on the same pooled rows (no held-out split).
pub fn fit_r2_pooled(
    features: &[DMatrix<f64>],
    targets: &[DMatrix<f64>],
) -> Result<RegressionReport> {
    validate_pairs(features, targets)?;
    let all: Vec<usize> = (0..features.len()).collect();
    fit_on_split(features, targets, all.clone(), all)
}

/// Smooth every sequence under the model and collect the posterior means as
/// one latent-by-time matrix per sequence — the feature extractor feeding
/// [`fit_r2`].
pub fn smoothed_means(
    prior: &StablePrior,
    recognition: &RecognitionModel,
    sequences: &[DMatrix<f64>],
) -> Result<Vec<DMatrix<f64>>> {
    sequences
        .iter()
        .map(|x| {
            let potentials = recognition.apply_cols(x)?;
            let posterior = smooth(prior, &potentials)?;
            let mut means = DMatrix::zeros(prior.latent_dim(), posterior.len());
            for (t, marginal) in posterior.marginals.iter().enumerate() {
                means.set_column(t, &marginal.mean);
            }
            Ok(means)
        })
        .collect()
}

/// Smooth the first `context_len` observations, then propagate the final
/// posterior mean through the noiseless mean dynamics μ_{t+1} = A μ_t.
/// Returns a horizon × latent-dim matrix (row k is the k+1-step-ahead
/// predicted mean); a zero horizon yields an empty matrix.
pub fn rollout_predict(
    state: &TrainState,
    sequence: &DMatrix<f64>,
    context_len: usize,
    horizon: usize,
) -> Result<DMatrix<f64>> {
    if context_len == 0 {
        return Err(Error::InvalidArgument("rollout context must cover at least 1 step".into()));
    }
    if context_len > sequence.ncols() {
        return Err(Error::InvalidArgument(format!(
            "context length {context_len} exceeds the {}-step sequence",
            sequence.ncols()
        )));
    }
    let context = sequence.columns(0, context_len).into_owned();
    let potentials = state.recognition.apply_cols(&context)?;
    let posterior = smooth(&state.prior, &potentials)?;
    let mut mu = posterior.marginals.last().expect("nonempty context").mean.clone();

    let mut out = DMatrix::zeros(horizon, state.prior.latent_dim());
    for k in 0..horizon {
        mu = state.prior.a() * mu;
        out.row_mut(k).copy_from(&mu.transpose());
    }
    Ok(out)
}
