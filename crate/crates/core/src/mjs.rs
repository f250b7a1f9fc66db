//! Closed-loop analysis, simulation and exact second-moment propagation.
//!
//! The second moments tracked here are the per-mode covariances
//! `Σ_i(t) = E[x_t x_tᵀ 1{ω(t) = i}]`. Stacking their column-major
//! vectorizations gives the vector `s_t ∈ R^{s n²}`, which evolves as
//!
//! ```text
//! s_{t+1} = L̃ s_t + B̃_{t+1} vec(Σ_z) + Π̃_{t+1} vec(Σ_w)
//! ```
//!
//! where block `(i, j)` of the augmented matrix `L̃` is `[T]_ji (L_j ⊗ L_j)`.
//! `E‖x_t‖² = Σ_i tr Σ_i(t)`, and the system is mean-square stable exactly
//! when `ρ(L̃) < 1`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{MjsError, Result};
use crate::linalg::{self, spectral_norm, symmetrize, vec_of};
use crate::markov::{self, MarkovChain};
use crate::model::{MjsModel, ModeController, NoiseSpec, Trajectory};

const PSD_TOL: f64 = 1e-10;

/// `L_i = A_i + B_i K_i` for every mode.
pub fn closed_loop(model: &MjsModel, controller: &ModeController) -> Result<Vec<DMatrix<f64>>> {
    controller.check_against(model)?;
    Ok(model
        .a()
        .iter()
        .zip(model.b())
        .zip(controller.gains())
        .map(|((a, b), k)| a + b * k)
        .collect())
}

/// Dense `s n² × s n²` augmented second-moment matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedMatrix {
    matrix: DMatrix<f64>,
    n: usize,
    s: usize,
}

impl AugmentedMatrix {
    /// Assembles `[L̃]_ij = [T]_ji (L_j ⊗ L_j)` from closed-loop matrices.
    pub fn from_closed_loops(loops: &[DMatrix<f64>], chain: &MarkovChain) -> Result<Self> {
        let s = chain.modes();
        if loops.len() != s {
            return Err(MjsError::ShapeMismatch(format!(
                "{} closed-loop matrices for {s} modes",
                loops.len()
            )));
        }
        let n = loops[0].nrows();
        let nn = n * n;
        let mut matrix = DMatrix::zeros(s * nn, s * nn);
        for (j, l) in loops.iter().enumerate() {
            let kron = l.kronecker(l);
            for i in 0..s {
                let w = chain.prob(j, i);
                if w != 0.0 {
                    matrix.view_mut((i * nn, j * nn), (nn, nn)).copy_from(&(&kron * w));
                }
            }
        }
        Ok(Self { matrix, n, s })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let nn = self.n * self.n;
        self.matrix.view((i * nn, j * nn), (nn, nn)).into_owned()
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn spectral_radius(&self) -> Result<f64> {
        linalg::spectral_radius(&self.matrix)
    }
}

pub fn augmented_matrix(model: &MjsModel, controller: &ModeController) -> Result<AugmentedMatrix> {
    AugmentedMatrix::from_closed_loops(&closed_loop(model, controller)?, model.chain())
}

/// Applies `L̃` to per-mode matrices without forming it:
/// `out_i = Σ_j [T]_ji L_j X_j L_jᵀ`.
pub fn apply_augmented(
    loops: &[DMatrix<f64>],
    chain: &MarkovChain,
    blocks: &[DMatrix<f64>],
) -> Vec<DMatrix<f64>> {
    let n = loops[0].nrows();
    let pushed: Vec<DMatrix<f64>> = loops
        .iter()
        .zip(blocks)
        .map(|(l, x)| l * x * l.transpose())
        .collect();
    (0..chain.modes())
        .map(|i| {
            let mut acc = DMatrix::zeros(n, n);
            for (j, pj) in pushed.iter().enumerate() {
                let w = chain.prob(j, i);
                if w != 0.0 {
                    acc += pj * w;
                }
            }
            acc
        })
        .collect()
}

/// `ρ(L̃)` for a set of closed loops. Small problems go through the dense
/// eigen path; above [`linalg::DENSE_EIGEN_THRESHOLD`] power iteration runs
/// on the structured operator, started from `(I, …, I)` inside the PSD cone.
pub fn augmented_spectral_radius(loops: &[DMatrix<f64>], chain: &MarkovChain) -> Result<f64> {
    let n = loops[0].nrows();
    let s = chain.modes();
    if s * n * n <= linalg::DENSE_EIGEN_THRESHOLD {
        return AugmentedMatrix::from_closed_loops(loops, chain)?.spectral_radius();
    }
    let nn = n * n;
    let identity = vec_of(&DMatrix::<f64>::identity(n, n));
    let start = DVector::from_fn(s * nn, |k, _| identity[k % nn]);
    linalg::power_iteration_radius(
        |v| {
            let blocks: Vec<DMatrix<f64>> = (0..s)
                .map(|i| linalg::unvec(&v.as_slice()[i * nn..(i + 1) * nn], n))
                .collect();
            stack(&apply_augmented(loops, chain, &blocks))
        },
        start,
        1e-11,
        linalg::POWER_MAX_ITER,
    )
}

/// Outcome of a mean-square stability test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MssReport {
    pub mss: bool,
    pub rho: f64,
}

/// Mean-square stable iff `ρ(L̃) < 1 − margin`.
pub fn is_mss(model: &MjsModel, controller: &ModeController, margin: f64) -> Result<MssReport> {
    let loops = closed_loop(model, controller)?;
    let rho = augmented_spectral_radius(&loops, model.chain())?;
    Ok(MssReport {
        mss: rho < 1.0 - margin,
        rho,
    })
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, dim: usize, sigma: f64) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| {
        let g: f64 = rng.sample(StandardNormal);
        sigma * g
    })
}

/// Deterministic rollout from explicit mode, exploration and disturbance
/// sequences. `modes` has one more entry than the other two.
pub fn rollout(
    model: &MjsModel,
    controller: &ModeController,
    x0: &DVector<f64>,
    modes: &[usize],
    explorations: &[DVector<f64>],
    disturbances: &[DVector<f64>],
) -> Result<Trajectory> {
    controller.check_against(model)?;
    let horizon = explorations.len();
    if modes.len() != horizon + 1 || disturbances.len() != horizon {
        return Err(MjsError::ShapeMismatch(
            "rollout needs T+1 modes and T explorations and disturbances".into(),
        ));
    }
    if x0.len() != model.n() {
        return Err(MjsError::ShapeMismatch(format!(
            "x0 has length {}, expected {}",
            x0.len(),
            model.n()
        )));
    }
    if modes.iter().any(|&m| m >= model.s()) {
        return Err(MjsError::InvalidInput("mode index out of range".into()));
    }
    if explorations.iter().any(|z| z.len() != model.p())
        || disturbances.iter().any(|w| w.len() != model.n())
    {
        return Err(MjsError::ShapeMismatch("noise vector length".into()));
    }
    let mut states = Vec::with_capacity(horizon + 1);
    let mut inputs = Vec::with_capacity(horizon);
    let mut x = x0.clone();
    for t in 0..horizon {
        let m = modes[t];
        let u = controller.gain(m) * &x + &explorations[t];
        let next = &model.a()[m] * &x + &model.b()[m] * &u + &disturbances[t];
        states.push(x);
        inputs.push(u);
        x = next;
    }
    states.push(x);
    Ok(Trajectory {
        states,
        modes: modes.to_vec(),
        explorations: explorations.to_vec(),
        inputs,
        disturbances: disturbances.to_vec(),
    })
}

/// Simulates `horizon` steps drawing from `rng`.
///
/// Per step the draws are, in order: `z_t` (p normals), `w_t` (n normals),
/// then the next mode. The initial mode is drawn from `omega0_dist` first.
pub fn simulate_with<R: Rng + ?Sized>(
    model: &MjsModel,
    controller: &ModeController,
    noise: NoiseSpec,
    x0: &DVector<f64>,
    omega0_dist: &[f64],
    horizon: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    controller.check_against(model)?;
    markov::validate_distribution(omega0_dist, model.s())?;
    if horizon == 0 {
        return Err(MjsError::InvalidInput("horizon must be at least 1".into()));
    }
    if x0.len() != model.n() {
        return Err(MjsError::ShapeMismatch(format!(
            "x0 has length {}, expected {}",
            x0.len(),
            model.n()
        )));
    }
    let mode0 = markov::draw_index(rng, omega0_dist.iter().copied());
    simulate_from_mode(model, controller, noise, x0, mode0, horizon, rng)
}

/// Like [`simulate_with`] but starting from a known mode, so no draw is
/// spent on `ω(0)`. Used to continue a run across epochs.
pub fn simulate_from_mode<R: Rng + ?Sized>(
    model: &MjsModel,
    controller: &ModeController,
    noise: NoiseSpec,
    x0: &DVector<f64>,
    mode0: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if mode0 >= model.s() {
        return Err(MjsError::InvalidInput(format!("initial mode {mode0} out of range")));
    }
    if horizon == 0 {
        return Err(MjsError::InvalidInput("horizon must be at least 1".into()));
    }
    let (n, p) = (model.n(), model.p());
    let chain = model.chain();
    let mut modes = Vec::with_capacity(horizon + 1);
    let mut explorations = Vec::with_capacity(horizon);
    let mut disturbances = Vec::with_capacity(horizon);
    let mut mode = mode0;
    modes.push(mode);
    for _ in 0..horizon {
        explorations.push(gaussian(rng, p, noise.sigma_z));
        disturbances.push(gaussian(rng, n, noise.sigma_w));
        mode = markov::draw_index(rng, chain.matrix().row(mode).iter().copied());
        modes.push(mode);
    }
    rollout(model, controller, x0, &modes, &explorations, &disturbances)
}

/// Seeded simulation; identical seeds reproduce identical trajectories.
pub fn simulate(
    model: &MjsModel,
    controller: &ModeController,
    noise: NoiseSpec,
    x0: &DVector<f64>,
    omega0_dist: &[f64],
    horizon: usize,
    rng_seed: u64,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    simulate_with(model, controller, noise, x0, omega0_dist, horizon, &mut rng)
}

/// Exact per-mode second moments `Σ_i(t)` for `t = 0..=horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSequence {
    /// `blocks[t][i] = Σ_i(t)`.
    pub blocks: Vec<Vec<DMatrix<f64>>>,
    /// `mode_dist[t] = π_t`.
    pub mode_dist: Vec<DVector<f64>>,
}

impl CovarianceSequence {
    /// The stacked vector `s_t`.
    pub fn stacked(&self, t: usize) -> DVector<f64> {
        stack(&self.blocks[t])
    }

    /// `E‖x_t‖² = Σ_i tr Σ_i(t)`.
    pub fn second_moment(&self, t: usize) -> f64 {
        self.blocks[t].iter().map(|b| b.trace()).sum()
    }

    pub fn horizon(&self) -> usize {
        self.blocks.len() - 1
    }
}

pub(crate) fn stack(blocks: &[DMatrix<f64>]) -> DVector<f64> {
    let nn: usize = blocks.first().map_or(0, |b| b.len());
    let mut out = DVector::zeros(nn * blocks.len());
    for (i, b) in blocks.iter().enumerate() {
        out.rows_mut(i * nn, nn).copy_from_slice(b.as_slice());
    }
    out
}

/// `Σ_i(0) = π₀(i) · E[x₀x₀ᵀ]` for an initial state independent of `ω(0)`.
pub fn initial_covariances(x0_second_moment: &DMatrix<f64>, initial_mode_dist: &[f64]) -> Vec<DMatrix<f64>> {
    initial_mode_dist.iter().map(|&p| x0_second_moment * p).collect()
}

fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let scale = m.abs().max().max(1.0);
    if linalg::min_sym_eigenvalue(m) < -PSD_TOL * scale {
        return Err(MjsError::NotPsd(what.to_string()));
    }
    Ok(())
}

/// Second-moment recursion with general noise covariances.
///
/// `Σ_i(t+1) = Σ_j [T]_ji L_j Σ_j(t) L_jᵀ + Σ_j π_t(j) [T]_ji B_j Σ_z B_jᵀ
///            + π_{t+1}(i) Σ_w`.
pub fn covariance_recursion_general(
    model: &MjsModel,
    controller: &ModeController,
    sigma_w: &DMatrix<f64>,
    sigma_z: &DMatrix<f64>,
    initial: &[DMatrix<f64>],
    initial_mode_dist: &[f64],
    horizon: usize,
) -> Result<CovarianceSequence> {
    let (n, p, s) = (model.n(), model.p(), model.s());
    let loops = closed_loop(model, controller)?;
    markov::validate_distribution(initial_mode_dist, s)?;
    if sigma_w.shape() != (n, n) || sigma_z.shape() != (p, p) {
        return Err(MjsError::ShapeMismatch("noise covariance shape".into()));
    }
    if initial.len() != s || initial.iter().any(|m| m.shape() != (n, n)) {
        return Err(MjsError::ShapeMismatch(
            "need one n×n initial covariance per mode".into(),
        ));
    }
    check_psd(sigma_w, "Σ_w")?;
    check_psd(sigma_z, "Σ_z")?;
    for (i, m) in initial.iter().enumerate() {
        check_psd(m, &format!("Σ_{i}(0)"))?;
    }

    let chain = model.chain();
    let exploration: Vec<DMatrix<f64>> =
        model.b().iter().map(|b| b * sigma_z * b.transpose()).collect();
    let mut blocks = Vec::with_capacity(horizon + 1);
    let mut mode_dist = Vec::with_capacity(horizon + 1);
    blocks.push(initial.iter().map(symmetrize).collect::<Vec<_>>());
    mode_dist.push(DVector::from_column_slice(initial_mode_dist));

    for t in 0..horizon {
        let pi_t = &mode_dist[t];
        let pi_next = chain.propagate(pi_t);
        let mut next = apply_augmented(&loops, chain, &blocks[t]);
        for (i, block) in next.iter_mut().enumerate() {
            for (j, e) in exploration.iter().enumerate() {
                let w = pi_t[j] * chain.prob(j, i);
                if w != 0.0 {
                    *block += e * w;
                }
            }
            *block += sigma_w * pi_next[i];
            *block = symmetrize(block);
        }
        blocks.push(next);
        mode_dist.push(pi_next);
    }
    Ok(CovarianceSequence { blocks, mode_dist })
}

/// Isotropic-noise form of [`covariance_recursion_general`].
pub fn covariance_recursion(
    model: &MjsModel,
    controller: &ModeController,
    noise: NoiseSpec,
    initial: &[DMatrix<f64>],
    initial_mode_dist: &[f64],
    horizon: usize,
) -> Result<CovarianceSequence> {
    let sw = DMatrix::identity(model.n(), model.n()) * noise.sigma_w.powi(2);
    let sz = DMatrix::identity(model.p(), model.p()) * noise.sigma_z.powi(2);
    covariance_recursion_general(model, controller, &sw, &sz, initial, initial_mode_dist, horizon)
}

/// The matrices `B̃_t` (`s n² × p²`) and `Π̃_t = π_t ⊗ I_{n²}` driving the
/// vectorized recursion, given `π_{t−1}` and `π_t`.
pub fn noise_input_matrices(
    model: &MjsModel,
    pi_prev: &DVector<f64>,
    pi_t: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, p, s) = (model.n(), model.p(), model.s());
    let nn = n * n;
    let chain = model.chain();
    let mut b_tilde = DMatrix::zeros(s * nn, p * p);
    for i in 0..s {
        let mut acc = DMatrix::zeros(nn, p * p);
        for (j, b) in model.b().iter().enumerate() {
            acc += b.kronecker(b) * (pi_prev[j] * chain.prob(j, i));
        }
        b_tilde.view_mut((i * nn, 0), (nn, p * p)).copy_from(&acc);
    }
    let pi_tilde = DMatrix::from_column_slice(s, 1, pi_t.as_slice())
        .kronecker(&DMatrix::<f64>::identity(nn, nn));
    (b_tilde, pi_tilde)
}

/// A decay envelope `‖L̃ᵏ‖ ≤ τ ρᵏ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayPair {
    pub tau: f64,
    pub rho: f64,
}

/// Fits `τ = max_{k ≤ k_cap} ‖L̃ᵏ‖ / ρᵏ` at `ρ = ρ(L̃) + margin`.
///
/// This under-approximates the supremum over all `k`; it is meant for
/// diagnostics on small augmented matrices.
pub fn fit_decay(aug: &AugmentedMatrix, margin: f64, k_cap: usize) -> Result<DecayPair> {
    let rho = aug.spectral_radius()? + margin;
    if !(rho < 1.0) {
        return Err(MjsError::InvalidDecayPair { rho });
    }
    let mut power = DMatrix::identity(aug.dim(), aug.dim());
    let mut tau: f64 = 1.0;
    for k in 1..=k_cap {
        power = &power * aug.matrix();
        tau = tau.max(spectral_norm(&power) / rho.powi(k as i32));
    }
    Ok(DecayPair { tau, rho })
}

/// Upper bound on `E‖x_t‖²`, `t = 0..=horizon`:
/// `√(ns) τ ρᵗ E‖x₀‖² + n√s (‖B‖² σ_z² + σ_w²) τ / (1 − ρ)`.
pub fn second_moment_bound(
    model: &MjsModel,
    noise: NoiseSpec,
    x0_second_moment: f64,
    decay: DecayPair,
    horizon: usize,
) -> Result<Vec<f64>> {
    let DecayPair { tau, rho } = decay;
    if !(0.0..1.0).contains(&rho) {
        return Err(MjsError::InvalidDecayPair { rho });
    }
    if tau < 1.0 {
        return Err(MjsError::InvalidInput(format!("tau must be at least 1, got {tau}")));
    }
    let n = model.n() as f64;
    let s = model.s() as f64;
    let b2 = model.b_norm().powi(2);
    let steady =
        n * s.sqrt() * (b2 * noise.sigma_z.powi(2) + noise.sigma_w.powi(2)) * tau / (1.0 - rho);
    Ok((0..=horizon)
        .map(|t| (n * s).sqrt() * tau * rho.powi(t as i32) * x0_second_moment + steady)
        .collect())
}
