//! Recognition networks: parametrized maps from an observation x to the
//! natural parameters (h, J) of a normalized Gaussian factor over the latent
//! state.
//!
//! The network parametrizes the factor in moment form — a mean head m(x) and
//! a covariance Σ that is constant (full or diagonal) or a data-dependent
//! diagonal — and emits natural parameters J = Σ⁻¹, h = Σ⁻¹ m(x). Positivity
//! is built in: diagonal variances pass through softplus, full covariances
//! through a Cholesky factor with softplus diagonal, so J passes a Cholesky
//! factorization for every input and every parameter setting.
//!
//! Two evaluation paths share the same arithmetic: [`RecognitionModel::apply`]
//! / [`RecognitionModel::apply_cols`] produce concrete [`GaussianExpFam`]
//! factors for smoothing, while [`RecognitionModel::forward_tape`] builds the
//! same quantities on an autodiff [`Tape`] so the training objective can
//! differentiate through the network parameters.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{softplus_inverse, softplus_scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::gaussian::GaussianExpFam;

/// Activation used in MLP hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidArgument(format!("unknown activation '{other}'"))),
        }
    }
}

/// Mean-head architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    /// m(x) = Wx + b.
    Linear,
    /// Fully connected layers with the given hidden widths and activation,
    /// followed by a linear output layer.
    Mlp { hidden: Vec<usize>, activation: Activation },
}

impl Architecture {
    fn hidden(&self) -> &[usize] {
        match self {
            Architecture::Linear => &[],
            Architecture::Mlp { hidden, .. } => hidden,
        }
    }
}

/// How the factor covariance is parametrized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceKind {
    /// One shared Σ = LLᵀ with a learned Cholesky factor (strictly lower
    /// entries free, diagonal through softplus).
    ConstantFull,
    /// One shared diagonal Σ with softplus-positive variances.
    ConstantDiag,
    /// Per-observation diagonal variances from a softplus head on the last
    /// mean-head representation.
    DataDiag,
}

/// Natural parameters of a batch of recognition factors, built on a tape.
#[derive(Debug, Clone, Copy)]
pub enum TapedCovariance {
    /// Shared full precision J (D_Z × D_Z), one for all columns.
    Full { j: Var },
    /// Per-column diagonal precisions (D_Z × K); column k belongs to
    /// observation k.
    Diag { precisions: Var },
}

/// Result of a taped batched forward pass: `naturals` holds h = Jm column
/// per observation, `cov` the matching precision representation.
#[derive(Debug, Clone, Copy)]
pub struct TapedRecognition {
    pub naturals: Var,
    pub cov: TapedCovariance,
}

/// A recognition network with a flat parameter list.
///
/// Parameter layout: mean-head layers in order, weight then bias
/// ((out × in), (out × 1)); then the covariance parameters —
/// `ConstantFull`: one raw Cholesky matrix (D_Z × D_Z); `ConstantDiag`: one
/// raw variance vector (D_Z × 1); `DataDiag`: a head weight
/// (D_Z × rep_dim) and bias (D_Z × 1) applied to the last mean-head
/// representation (the input itself for the linear architecture).
#[derive(Debug, Clone)]
pub struct RecognitionModel {
    input_dim: usize,
    latent_dim: usize,
    architecture: Architecture,
    covariance: CovarianceKind,
    params: Vec<DMatrix<f64>>,
}

fn expected_shapes(
    input_dim: usize,
    latent_dim: usize,
    architecture: &Architecture,
    covariance: CovarianceKind,
) -> Result<Vec<(usize, usize)>> {
    if input_dim == 0 || latent_dim == 0 {
        return Err(Error::InvalidArgument("dimensions must be positive".into()));
    }
    if architecture.hidden().iter().any(|&w| w == 0) {
        return Err(Error::InvalidArgument("hidden layer width must be positive".into()));
    }
    let mut shapes = Vec::new();
    let mut fan_in = input_dim;
    for &width in architecture.hidden() {
        shapes.push((width, fan_in));
        shapes.push((width, 1));
        fan_in = width;
    }
    let rep_dim = fan_in;
    shapes.push((latent_dim, rep_dim));
    shapes.push((latent_dim, 1));
    match covariance {
        CovarianceKind::ConstantFull => shapes.push((latent_dim, latent_dim)),
        CovarianceKind::ConstantDiag => shapes.push((latent_dim, 1)),
        CovarianceKind::DataDiag => {
            shapes.push((latent_dim, rep_dim));
            shapes.push((latent_dim, 1));
        }
    }
    Ok(shapes)
}

impl RecognitionModel {
    /// Fan-in-scaled random initialization: weights ~ N(0, 1/fan_in), biases
    /// zero, covariance parameters chosen so the emitted covariance is the
    /// identity. Deterministic per seed.
    pub fn init(
        input_dim: usize,
        latent_dim: usize,
        architecture: Architecture,
        covariance: CovarianceKind,
        seed: u64,
    ) -> Result<Self> {
        let shapes = expected_shapes(input_dim, latent_dim, &architecture, covariance)?;
        let n_mean = 2 * (architecture.hidden().len() + 1);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let raw_unit_variance = softplus_inverse(1.0);

        let mut params = Vec::with_capacity(shapes.len());
        for (idx, &(rows, cols)) in shapes.iter().enumerate() {
            let m = if idx < n_mean {
                if cols == 1 && idx % 2 == 1 {
                    DMatrix::zeros(rows, cols)
                } else {
                    let scale = 1.0 / (cols as f64).sqrt();
                    DMatrix::from_fn(rows, cols, |_, _| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        g * scale
                    })
                }
            } else {
                match covariance {
                    CovarianceKind::ConstantFull => {
                        DMatrix::from_diagonal_element(rows, cols, raw_unit_variance)
                    }
                    CovarianceKind::ConstantDiag => {
                        DMatrix::from_element(rows, cols, raw_unit_variance)
                    }
                    CovarianceKind::DataDiag => {
                        if cols == 1 {
                            DMatrix::from_element(rows, cols, raw_unit_variance)
                        } else {
                            DMatrix::zeros(rows, cols)
                        }
                    }
                }
            };
            params.push(m);
        }
        Ok(Self { input_dim, latent_dim, architecture, covariance, params })
    }

    /// Rebuild a model from stored parameters, validating the layout.
    pub fn from_parts(
        input_dim: usize,
        latent_dim: usize,
        architecture: Architecture,
        covariance: CovarianceKind,
        params: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let shapes = expected_shapes(input_dim, latent_dim, &architecture, covariance)?;
        if params.len() != shapes.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter arrays, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (p, &(rows, cols)) in params.iter().zip(&shapes) {
            if p.shape() != (rows, cols) {
                return Err(Error::InvalidArgument(format!(
                    "parameter shape {:?} does not match expected ({rows}, {cols})",
                    p.shape()
                )));
            }
        }
        Ok(Self { input_dim, latent_dim, architecture, covariance, params })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn covariance(&self) -> CovarianceKind {
        self.covariance
    }

    pub fn params(&self) -> &[DMatrix<f64>] {
        &self.params
    }

    /// Replace all parameters (shapes must match the existing layout).
    pub fn set_params(&mut self, params: Vec<DMatrix<f64>>) -> Result<()> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::InvalidArgument("parameter layout mismatch".into()));
        }
        self.params = params;
        Ok(())
    }

    fn mean_layer_count(&self) -> usize {
        self.architecture.hidden().len() + 1
    }

    /// Mean-head forward over a batch of observation columns; returns the
    /// representation fed to the last layer and the mean outputs.
    fn mean_forward(&self, xs: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let k = xs.ncols();
        let ones_row = DMatrix::from_element(1, k, 1.0);
        let mut rep = xs.clone();
        for layer in 0..self.mean_layer_count() - 1 {
            let w = &self.params[2 * layer];
            let b = &self.params[2 * layer + 1];
            rep = (w * &rep + b * &ones_row).map(f64::tanh);
        }
        let last = self.mean_layer_count() - 1;
        let means = &self.params[2 * last] * &rep + &self.params[2 * last + 1] * &ones_row;
        (rep, means)
    }

    /// The Cholesky factor L with Σ = LLᵀ for the constant-full
    /// parametrization (softplus diagonal, free strictly-lower part).
    fn constant_chol_factor(&self) -> DMatrix<f64> {
        let raw = self.params.last().expect("constant-full model has parameters");
        let d = self.latent_dim;
        DMatrix::from_fn(d, d, |r, c| {
            if r == c {
                softplus_scalar(raw[(r, c)])
            } else if r > c {
                raw[(r, c)]
            } else {
                0.0
            }
        })
    }

    /// Natural parameters η^Δ(x_k) for each observation column of `xs`.
    pub fn apply_cols(&self, xs: &DMatrix<f64>) -> Result<Vec<GaussianExpFam>> {
        if xs.nrows() != self.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "observation dimension {} does not match model input {}",
                xs.nrows(),
                self.input_dim
            )));
        }
        let (rep, means) = self.mean_forward(xs);
        let k = xs.ncols();

        let factors = match self.covariance {
            CovarianceKind::ConstantFull => {
                let l = self.constant_chol_factor();
                let eye = DMatrix::identity(self.latent_dim, self.latent_dim);
                let y = l
                    .solve_lower_triangular(&eye)
                    .ok_or_else(|| Error::NonFinite("recognition Cholesky factor".into()))?;
                let j = y.transpose() * &y; // Σ⁻¹ = L⁻ᵀL⁻¹
                let naturals = &j * &means;
                (0..k)
                    .map(|c| {
                        GaussianExpFam::new(naturals.column(c).into_owned(), j.clone())
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            CovarianceKind::ConstantDiag => {
                let raw = self.params.last().expect("constant-diag model has parameters");
                let prec: DVector<f64> =
                    raw.column(0).map(|v| 1.0 / softplus_scalar(v)).column(0).into_owned();
                let j = DMatrix::from_diagonal(&prec);
                (0..k)
                    .map(|c| {
                        let h = means.column(c).component_mul(&prec);
                        GaussianExpFam::new(h, j.clone())
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            CovarianceKind::DataDiag => {
                let w_s = &self.params[self.params.len() - 2];
                let b_s = &self.params[self.params.len() - 1];
                let ones_row = DMatrix::from_element(1, k, 1.0);
                let prec = (w_s * &rep + b_s * &ones_row).map(|v| 1.0 / softplus_scalar(v));
                (0..k)
                    .map(|c| {
                        let p = prec.column(c).into_owned();
                        let h = means.column(c).component_mul(&p);
                        GaussianExpFam::new(h.into_owned(), DMatrix::from_diagonal(&p))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };

        for f in &factors {
            if !f.h.iter().all(|v| v.is_finite()) || !f.j.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("recognition network output".into()));
            }
        }
        Ok(factors)
    }

    /// Natural parameters η^Δ(x) for a single observation.
    pub fn apply(&self, x: &DVector<f64>) -> Result<GaussianExpFam> {
        let xs = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        Ok(self.apply_cols(&xs)?.remove(0))
    }

    /// Build the batched forward pass on a tape. `params` must be tape
    /// variables (or constants) matching the layout of [`Self::params`];
    /// columns of `xs` are independent observations.
    pub fn forward_tape(
        &self,
        tape: &Tape,
        params: &[Var],
        xs: &DMatrix<f64>,
    ) -> Result<TapedRecognition> {
        if xs.nrows() != self.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "observation dimension {} does not match model input {}",
                xs.nrows(),
                self.input_dim
            )));
        }
        if params.len() != self.params.len()
            || params
                .iter()
                .zip(&self.params)
                .any(|(v, p)| (v.rows(), v.cols()) != p.shape())
        {
            return Err(Error::InvalidArgument(
                "tape parameter layout does not match the model".into(),
            ));
        }
        let d = self.latent_dim;
        let k = xs.ncols();

        let mut rep = tape.constant(xs.clone());
        for layer in 0..self.mean_layer_count() - 1 {
            let z = tape.add_colvec(tape.matmul(params[2 * layer], rep), params[2 * layer + 1]);
            rep = tape.tanh(z);
        }
        let last = self.mean_layer_count() - 1;
        let means = tape.add_colvec(tape.matmul(params[2 * last], rep), params[2 * last + 1]);

        match self.covariance {
            CovarianceKind::ConstantFull => {
                let raw = params[params.len() - 1];
                let strict_lower = tape.constant(DMatrix::from_fn(d, d, |r, c| {
                    if r > c {
                        1.0
                    } else {
                        0.0
                    }
                }));
                let eye = tape.constant(DMatrix::identity(d, d));
                let l = tape.add(
                    tape.mul(raw, strict_lower),
                    tape.mul(tape.softplus(raw), eye),
                );
                let sigma = tape.matmul(l, tape.transpose(l));
                let j = tape.spd_solve(sigma, eye)?;
                let naturals = tape.matmul(j, means);
                Ok(TapedRecognition { naturals, cov: TapedCovariance::Full { j } })
            }
            CovarianceKind::ConstantDiag => {
                let raw = params[params.len() - 1];
                let ones = tape.constant(DMatrix::from_element(d, 1, 1.0));
                let prec = tape.div(ones, tape.softplus(raw));
                let precisions = tape.repeat_col(prec, k);
                let naturals = tape.mul(means, precisions);
                Ok(TapedRecognition { naturals, cov: TapedCovariance::Diag { precisions } })
            }
            CovarianceKind::DataDiag => {
                let w_s = params[params.len() - 2];
                let b_s = params[params.len() - 1];
                let z = tape.add_colvec(tape.matmul(w_s, rep), b_s);
                let ones = tape.constant(DMatrix::from_element(d, k, 1.0));
                let precisions = tape.div(ones, tape.softplus(z));
                let naturals = tape.mul(means, precisions);
                Ok(TapedRecognition { naturals, cov: TapedCovariance::Diag { precisions } })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::GaussianMoments;
    use rand::Rng;

    fn all_kinds() -> [CovarianceKind; 3] {
        [CovarianceKind::ConstantFull, CovarianceKind::ConstantDiag, CovarianceKind::DataDiag]
    }

    fn archs() -> [Architecture; 2] {
        [
            Architecture::Linear,
            Architecture::Mlp { hidden: vec![4], activation: Activation::Tanh },
        ]
    }

    fn random_inputs(d: usize, k: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        DMatrix::from_fn(d, k, |_, _| rng.random::<f64>() * 4.0 - 2.0)
    }

    #[test]
    fn zero_linear_model_emits_standard_naturals() {
        for kind in all_kinds() {
            let mut model =
                RecognitionModel::init(3, 2, Architecture::Linear, kind, 0).unwrap();
            let mut params = model.params().to_vec();
            params[0].fill(0.0);
            params[1].fill(0.0);
            model.set_params(params).unwrap();

            let f = model.apply(&DVector::from_vec(vec![0.7, -1.3, 0.2])).unwrap();
            assert!(f.h.norm() < 1e-14, "zero map should give h = 0");
            let eye = DMatrix::identity(2, 2);
            assert!((&f.j - &eye).norm() < 1e-12, "identity covariance at init");
        }
    }

    #[test]
    fn linear_known_weights_match_moment_conversion() {
        // Realize a specific full covariance through the raw Cholesky
        // parameters and compare (h, J) with the moment→natural oracle.
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let l = sigma.clone().cholesky().unwrap().l();
        let raw = DMatrix::from_fn(2, 2, |r, c| {
            if r == c {
                softplus_inverse(l[(r, c)])
            } else if r > c {
                l[(r, c)]
            } else {
                0.0
            }
        });
        let w = DMatrix::from_row_slice(2, 3, &[0.5, -0.2, 0.1, 0.3, 0.8, -0.6]);
        let b = DMatrix::from_column_slice(2, 1, &[0.4, -1.1]);

        let mut model = RecognitionModel::init(
            3,
            2,
            Architecture::Linear,
            CovarianceKind::ConstantFull,
            0,
        )
        .unwrap();
        model.set_params(vec![w.clone(), b.clone(), raw]).unwrap();

        let x = DVector::from_vec(vec![1.2, -0.7, 0.3]);
        let f = model.apply(&x).unwrap();
        let mean = &w * &x + b.column(0);
        let oracle = GaussianMoments::new(mean, sigma).unwrap().to_natural().unwrap();
        assert!((&f.h - &oracle.h).norm() < 1e-10);
        assert!((&f.j - &oracle.j).norm() < 1e-10);
    }

    #[test]
    fn mlp_outputs_are_finite_and_positive_definite() {
        for kind in all_kinds() {
            let model = RecognitionModel::init(
                5,
                3,
                Architecture::Mlp { hidden: vec![16, 8], activation: Activation::Tanh },
                kind,
                5,
            )
            .unwrap();
            let xs = random_inputs(5, 1000, 42);
            for f in model.apply_cols(&xs).unwrap() {
                assert!(f.h.iter().all(|v| v.is_finite()));
                assert!(f.to_moments().is_ok(), "precision must pass Cholesky");
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        for arch in archs() {
            for kind in all_kinds() {
                let a = RecognitionModel::init(4, 2, arch.clone(), kind, 33).unwrap();
                let b = RecognitionModel::init(4, 2, arch.clone(), kind, 33).unwrap();
                assert_eq!(a.params(), b.params());
                let c = RecognitionModel::init(4, 2, arch.clone(), kind, 34).unwrap();
                assert_ne!(a.params(), c.params(), "different seed should differ");
            }
        }
    }

    #[test]
    fn covariance_is_identity_at_init() {
        let eye = DMatrix::identity(2, 2);
        for arch in archs() {
            for kind in all_kinds() {
                let model = RecognitionModel::init(4, 2, arch.clone(), kind, 7).unwrap();
                for x in random_inputs(4, 5, 9).column_iter() {
                    let f = model.apply(&x.into_owned()).unwrap();
                    assert!((&f.j - &eye).norm() < 1e-12, "{kind:?} init precision");
                }
            }
        }
    }

    #[test]
    fn fan_in_scaling_preserves_input_variance() {
        // Pre-activation variance on standardized inputs stays near 1.
        let model = RecognitionModel::init(
            20,
            2,
            Architecture::Mlp { hidden: vec![32], activation: Activation::Tanh },
            CovarianceKind::ConstantDiag,
            11,
        )
        .unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(100);
        let xs = DMatrix::from_fn(20, 10_000, |_, _| StandardNormal.sample(&mut rng));
        let pre = &model.params()[0] * xs;
        let n = pre.len() as f64;
        let mean = pre.sum() / n;
        let var = pre.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 0.1, "pre-activation variance {var}");
    }

    #[test]
    fn constant_covariance_is_input_independent() {
        for kind in [CovarianceKind::ConstantFull, CovarianceKind::ConstantDiag] {
            let model = RecognitionModel::init(3, 2, Architecture::Linear, kind, 21).unwrap();
            let f1 = model.apply(&DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
            let f2 = model.apply(&DVector::from_vec(vec![-5.0, 0.0, 9.0])).unwrap();
            assert_eq!(f1.j, f2.j, "precision must not depend on the input");
        }
    }

    #[test]
    fn taped_forward_matches_plain_apply() {
        for arch in archs() {
            for kind in all_kinds() {
                let model = RecognitionModel::init(3, 2, arch.clone(), kind, 55).unwrap();
                let xs = random_inputs(3, 7, 56);
                let plain = model.apply_cols(&xs).unwrap();

                let tape = Tape::new();
                let vars: Vec<Var> =
                    model.params().iter().map(|p| tape.var(p.clone())).collect();
                let taped = model.forward_tape(&tape, &vars, &xs).unwrap();
                let naturals = tape.value(taped.naturals);
                for (c, f) in plain.iter().enumerate() {
                    assert!((naturals.column(c) - &f.h).norm() < 1e-12);
                }
                match taped.cov {
                    TapedCovariance::Full { j } => {
                        let jv = tape.value(j);
                        assert!((&jv - &plain[0].j).norm() < 1e-10);
                    }
                    TapedCovariance::Diag { precisions } => {
                        let pv = tape.value(precisions);
                        for (c, f) in plain.iter().enumerate() {
                            let d = f.j.diagonal();
                            assert!((pv.column(c) - d).norm() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn taped_gradients_match_finite_differences() {
        // A scalar probe that touches the mean head (quadratically) and every
        // covariance parameter, differentiated and checked entry-by-entry.
        let xs = random_inputs(3, 3, 77);
        for arch in archs() {
            for kind in all_kinds() {
                let model = RecognitionModel::init(3, 2, arch.clone(), kind, 78).unwrap();

                let eval = |params: &[DMatrix<f64>]| -> f64 {
                    let tape = Tape::new();
                    let vars: Vec<Var> =
                        params.iter().map(|p| tape.var(p.clone())).collect();
                    let out = model.forward_tape(&tape, &vars, &xs).unwrap();
                    let mut obj = tape.sum_all(tape.mul(out.naturals, out.naturals));
                    obj = match out.cov {
                        TapedCovariance::Full { j } => {
                            tape.add(obj, tape.chol_logdet(j).unwrap())
                        }
                        TapedCovariance::Diag { precisions } => {
                            tape.add(obj, tape.sum_all(precisions))
                        }
                    };
                    tape.scalar(obj)
                };

                let tape = Tape::new();
                let vars: Vec<Var> =
                    model.params().iter().map(|p| tape.var(p.clone())).collect();
                let out = model.forward_tape(&tape, &vars, &xs).unwrap();
                let mut obj = tape.sum_all(tape.mul(out.naturals, out.naturals));
                obj = match out.cov {
                    TapedCovariance::Full { j } => tape.add(obj, tape.chol_logdet(j).unwrap()),
                    TapedCovariance::Diag { precisions } => {
                        tape.add(obj, tape.sum_all(precisions))
                    }
                };
                let grads = tape.gradient(obj, &vars).unwrap();

                let base = model.params().to_vec();
                for (pi, grad) in grads.iter().enumerate() {
                    let mut fd = DMatrix::zeros(grad.nrows(), grad.ncols());
                    for r in 0..grad.nrows() {
                        for c in 0..grad.ncols() {
                            let h = 1e-5;
                            let mut plus = base.clone();
                            plus[pi][(r, c)] += h;
                            let mut minus = base.clone();
                            minus[pi][(r, c)] -= h;
                            fd[(r, c)] = (eval(&plus) - eval(&minus)) / (2.0 * h);
                        }
                    }
                    let rel = (grad - &fd).norm() / fd.norm().max(1.0);
                    assert!(
                        rel <= 1e-5,
                        "{arch:?}/{kind:?} param {pi}: gradient mismatch {rel}"
                    );
                }
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(matches!(
            RecognitionModel::init(
                3,
                2,
                Architecture::Mlp { hidden: vec![0], activation: Activation::Tanh },
                CovarianceKind::ConstantDiag,
                0,
            ),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            "relu".parse::<Activation>(),
            Err(Error::InvalidArgument(_))
        ));
        assert!("tanh".parse::<Activation>().is_ok());

        let model =
            RecognitionModel::init(3, 2, Architecture::Linear, CovarianceKind::ConstantDiag, 0)
                .unwrap();
        assert!(matches!(
            model.apply(&DVector::zeros(4)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn non_finite_output_is_reported() {
        let mut model =
            RecognitionModel::init(3, 2, Architecture::Linear, CovarianceKind::ConstantDiag, 0)
                .unwrap();
        let mut params = model.params().to_vec();
        params[0][(0, 0)] = f64::NAN;
        model.set_params(params).unwrap();
        assert!(matches!(
            model.apply(&DVector::from_vec(vec![1.0, 1.0, 1.0])),
            Err(Error::NonFinite(_))
        ));
    }
}
