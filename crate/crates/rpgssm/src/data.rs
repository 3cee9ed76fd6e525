//! Synthetic dataset generators: a linear-Gaussian state-space task with a
//! planted rotation dynamics, and a rendered single-pendulum video task.
//!
//! All randomness is derived from a master seed by fixed-label splitting
//! ([`derive_seed`]), so each sequence's initial conditions, dynamics noise,
//! and observation noise come from independent, reproducible streams.
//! Sequences are stored one matrix per sequence with columns as time steps,
//! matching the convention used by the recognition and smoothing code.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::prior::StablePrior;

/// Deterministic sub-seed: SHA-256 of the master seed and a textual label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("SHA-256 digest is long enough"))
}

/// Generator provenance stored alongside a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    pub params: BTreeMap<String, f64>,
}

/// A set of observation sequences with aligned ground-truth variables.
///
/// `observations[n]` is D_X × T, `ground_truth[n]` is D_G × T; columns are
/// time steps.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub observations: Vec<DMatrix<f64>>,
    pub ground_truth: Vec<DMatrix<f64>>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn num_sequences(&self) -> usize {
        self.observations.len()
    }

    pub fn sequence_len(&self) -> usize {
        self.observations.first().map_or(0, |m| m.ncols())
    }

    pub fn observation_dim(&self) -> usize {
        self.observations.first().map_or(0, |m| m.nrows())
    }
}

/// The planted transition of the linear task: rotation by π/5 inside a
/// uniformly random 2-plane (identity on its orthogonal complement), scaled
/// to operator norm 0.95.
pub fn linear_task_transition(dz: usize, seed: u64) -> Result<DMatrix<f64>> {
    if dz < 2 {
        return Err(Error::InvalidArgument(
            "a 2-plane rotation needs latent dimension at least 2".into(),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    // Orthonormal basis (u, v) of a random plane via Gram–Schmidt on two
    // Gaussian directions.
    let gauss = |rng: &mut ChaCha20Rng| -> DVector<f64> {
        DVector::from_fn(dz, |_, _| StandardNormal.sample(rng))
    };
    let u = gauss(&mut rng).normalize();
    let mut v = gauss(&mut rng);
    v -= &u * u.dot(&v);
    let v = v.normalize();

    let angle = std::f64::consts::PI / 5.0;
    let eye = DMatrix::identity(dz, dz);
    let rotation = eye
        + (&u * u.transpose() + &v * v.transpose()) * (angle.cos() - 1.0)
        + (&v * u.transpose() - &u * v.transpose()) * angle.sin();
    Ok(rotation * 0.95)
}

/// Linear-Gaussian dataset: stationary latent chain z_t with the planted
/// rotation dynamics, observed through a random affine map with isotropic
/// noise x_t ~ N(Cz_t + d, 0.3·I). Ground truth is the latent trajectory.
pub fn gen_linear(dz: usize, dx: usize, n: usize, t: usize, seed: u64) -> Result<Dataset> {
    if dx == 0 || n == 0 {
        return Err(Error::InvalidArgument("need at least one sequence and dx ≥ 1".into()));
    }
    if t < 2 {
        return Err(Error::InvalidArgument("sequences must have at least two steps".into()));
    }
    let b = linear_task_transition(dz, derive_seed(seed, "linear/structure/plane"))?;
    let prior = StablePrior::new(b)?;

    let mut structure_rng =
        ChaCha20Rng::seed_from_u64(derive_seed(seed, "linear/structure/emission"));
    let c = DMatrix::from_fn(dx, dz, |_, _| StandardNormal.sample(&mut structure_rng));
    let d = DVector::from_fn(dx, |_, _| StandardNormal.sample(&mut structure_rng));
    let noise_std = 0.3_f64.sqrt();

    let mut observations = Vec::with_capacity(n);
    let mut ground_truth = Vec::with_capacity(n);
    for i in 0..n {
        let chain = prior.sample_chain(t, derive_seed(seed, &format!("linear/chain/{i}")));
        let z = chain.transpose(); // dz × t, columns are time steps
        let mut obs_rng =
            ChaCha20Rng::seed_from_u64(derive_seed(seed, &format!("linear/obs-noise/{i}")));
        let ones = nalgebra::RowDVector::from_element(t, 1.0);
        let mut x: DMatrix<f64> = &c * &z + &d * &ones;
        x.apply(|v| {
            let e: f64 = StandardNormal.sample(&mut obs_rng);
            *v += noise_std * e;
        });
        observations.push(x);
        ground_truth.push(z);
    }

    let mut params = BTreeMap::new();
    params.insert("dz".into(), dz as f64);
    params.insert("dx".into(), dx as f64);
    params.insert("n".into(), n as f64);
    params.insert("t".into(), t as f64);
    params.insert("obs_noise_var".into(), 0.3);
    Ok(Dataset {
        observations,
        ground_truth,
        meta: DatasetMeta { generator: "linear".into(), seed, params },
    })
}

/// Gravity over arm length for the pendulum task, s⁻².
pub const PENDULUM_G_OVER_L: f64 = 9.81;
/// Frame interval for the pendulum task, seconds.
pub const PENDULUM_DT: f64 = 0.01;
const PENDULUM_SUBSTEPS: usize = 4;

/// Velocity-Verlet integration of θ̈ = −(g/L) sin θ, recording (θ, ω) at
/// every frame interval including the initial state. The symplectic update
/// runs on sub-divided steps so the discrete energy drift stays below the
/// 1e-4 relative tolerance asserted in the tests.
pub(crate) fn integrate_pendulum(theta0: f64, omega0: f64, frames: usize) -> Vec<(f64, f64)> {
    let h = PENDULUM_DT / PENDULUM_SUBSTEPS as f64;
    let accel = |theta: f64| -PENDULUM_G_OVER_L * theta.sin();
    let mut theta = theta0;
    let mut omega = omega0;
    let mut out = Vec::with_capacity(frames);
    out.push((theta, omega));
    for _ in 1..frames {
        for _ in 0..PENDULUM_SUBSTEPS {
            let omega_half = omega + 0.5 * h * accel(theta);
            theta += h * omega_half;
            omega = omega_half + 0.5 * h * accel(theta);
        }
        out.push((theta, omega));
    }
    out
}

/// Render one anti-aliased pendulum frame: an arm of length 0.9·(img/2)
/// pixels from the image center, about two pixels wide, intensity 1 on a 0
/// background. θ = 0 hangs straight down (rows grow downward).
pub(crate) fn render_pendulum_frame(theta: f64, img: usize) -> DMatrix<f64> {
    let center = (img as f64 - 1.0) / 2.0;
    let arm = 0.9 * img as f64 / 2.0;
    let (tip_x, tip_y) = (center + arm * theta.sin(), center + arm * theta.cos());
    DMatrix::from_fn(img, img, |row, col| {
        let (px, py) = (col as f64, row as f64);
        // Distance from the pixel center to the segment center→tip.
        let (dx, dy) = (tip_x - center, tip_y - center);
        let along = ((px - center) * dx + (py - center) * dy) / (arm * arm);
        let s = along.clamp(0.0, 1.0);
        let (cx, cy) = (center + s * dx, center + s * dy);
        let dist = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
        (1.5 - dist).clamp(0.0, 1.0)
    })
}

/// Pendulum video dataset: img×img frames of a swinging arm, flattened
/// row-major into observation vectors, with i.i.d. N(0, 0.05²) pixel noise
/// clipped to [0, 1]. Ground-truth columns are (sin θ_t, ω_t); initial
/// conditions are θ ~ U(−π, π), ω ~ U(−4, 4).
pub fn gen_pendulum(n: usize, t: usize, seed: u64, img: usize) -> Result<Dataset> {
    if img < 8 {
        return Err(Error::InvalidArgument("image side must be at least 8 pixels".into()));
    }
    if n == 0 || t < 2 {
        return Err(Error::InvalidArgument(
            "need at least one sequence of at least two frames".into(),
        ));
    }
    let d_x = img * img;
    let mut observations = Vec::with_capacity(n);
    let mut ground_truth = Vec::with_capacity(n);
    for i in 0..n {
        let mut ic_rng =
            ChaCha20Rng::seed_from_u64(derive_seed(seed, &format!("pendulum/init/{i}")));
        let theta0 = ic_rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let omega0 = ic_rng.random_range(-4.0..4.0);
        let states = integrate_pendulum(theta0, omega0, t);

        let mut noise_rng =
            ChaCha20Rng::seed_from_u64(derive_seed(seed, &format!("pendulum/noise/{i}")));
        let mut x = DMatrix::zeros(d_x, t);
        let mut g = DMatrix::zeros(2, t);
        for (step, &(theta, omega)) in states.iter().enumerate() {
            let frame = render_pendulum_frame(theta, img);
            for row in 0..img {
                for col in 0..img {
                    let e: f64 = StandardNormal.sample(&mut noise_rng);
                    x[(row * img + col, step)] = (frame[(row, col)] + 0.05 * e).clamp(0.0, 1.0);
                }
            }
            g[(0, step)] = theta.sin();
            g[(1, step)] = omega;
        }
        observations.push(x);
        ground_truth.push(g);
    }

    let mut params = BTreeMap::new();
    params.insert("n".into(), n as f64);
    params.insert("t".into(), t as f64);
    params.insert("img".into(), img as f64);
    params.insert("g_over_l".into(), PENDULUM_G_OVER_L);
    params.insert("dt".into(), PENDULUM_DT);
    params.insert("noise_std".into(), 0.05);
    Ok(Dataset {
        observations,
        ground_truth,
        meta: DatasetMeta { generator: "pendulum".into(), seed, params },
    })
}
