//! Clipped per-mode least squares for `(A_i, B_i)` and empirical transition
//! frequencies for `T`, from a single closed-loop trajectory.
//!
//! For mode `i` the regression is
//!
//! ```text
//! (Θ₁, Θ₂) = argmin Σ_{k∈S_i} ‖x_{k+1} − Θ₁ x_k/σ_w − Θ₂ z_k/σ_z‖²
//! ```
//!
//! over the clipped index set `S_i`, after which `B̂_i = Θ₂/σ_z` and
//! `Â_i = Θ₁/σ_w − B̂_i K_i` (`Θ₁` estimates `σ_w L_i`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MjsError, Result};
use crate::linalg::spectral_norm;
use crate::markov::{estimate_transition, MarkovChain};
use crate::model::{ModelDocument, MjsModel, ModeController, NoiseSpec, Trajectory};

const RANK_TOL: f64 = 1e-10;

/// Clipping coefficients and the per-mode sample floor. Unset fields take
/// the dimension-dependent defaults `c_x = 5√n`, `c_z = 5√p`,
/// `min_samples_per_mode = 2(n+p)` (or `2n` with known `B`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SysidConfig {
    pub c_x: Option<f64>,
    pub c_z: Option<f64>,
    pub known_b: bool,
    pub min_samples_per_mode: Option<usize>,
}

/// A [`SysidConfig`] with every field resolved for given dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedSysid {
    pub c_x: f64,
    pub c_z: f64,
    pub known_b: bool,
    pub min_samples: usize,
}

impl SysidConfig {
    /// No clipping at all.
    pub fn unclipped() -> Self {
        Self {
            c_x: Some(f64::INFINITY),
            c_z: Some(f64::INFINITY),
            ..Self::default()
        }
    }

    pub fn resolve(&self, n: usize, p: usize) -> Result<ResolvedSysid> {
        let c_x = self.c_x.unwrap_or(5.0 * (n as f64).sqrt());
        let c_z = self.c_z.unwrap_or(5.0 * (p.max(1) as f64).sqrt());
        if !(c_x > 0.0 && c_z > 0.0) {
            return Err(MjsError::InvalidInput(format!(
                "clipping coefficients must be positive, got c_x={c_x}, c_z={c_z}"
            )));
        }
        let regressors = if self.known_b { n } else { n + p };
        let min_samples = self.min_samples_per_mode.unwrap_or(2 * regressors);
        if min_samples < regressors {
            return Err(MjsError::InvalidInput(format!(
                "min_samples_per_mode = {min_samples} is below the {regressors} regressors"
            )));
        }
        Ok(ResolvedSysid {
            c_x,
            c_z,
            known_b: self.known_b,
            min_samples,
        })
    }
}

/// Estimated model plus the raw regression output.
#[derive(Debug, Clone, PartialEq)]
pub struct SysidResult {
    pub a_hat: Vec<DMatrix<f64>>,
    pub b_hat: Vec<DMatrix<f64>>,
    pub t_hat: MarkovChain,
    /// `|S_i|` per mode.
    pub samples_per_mode: Vec<usize>,
    /// Modes with fewer than the required clipped samples; their estimates
    /// are zero.
    pub flagged_modes: Vec<usize>,
    /// `Θ̂₁` per mode (`n×n`).
    pub theta1: Vec<DMatrix<f64>>,
    /// `Θ̂₂` per mode (`n×p`); empty columns with known `B`.
    pub theta2: Vec<DMatrix<f64>>,
}

impl SysidResult {
    pub fn model(&self) -> Result<MjsModel> {
        MjsModel::new(self.a_hat.clone(), self.b_hat.clone(), self.t_hat.clone())
    }

    pub fn samples_min(&self) -> usize {
        self.samples_per_mode.iter().copied().min().unwrap_or(0)
    }
}

#[derive(Serialize)]
struct SysidDocument {
    #[serde(flatten)]
    model: ModelDocument,
    samples_per_mode: Vec<usize>,
    flagged_modes: Vec<usize>,
}

impl Serialize for SysidResult {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let model = self.model().map_err(serde::ser::Error::custom)?;
        SysidDocument {
            model: ModelDocument::from_model(&model, None),
            samples_per_mode: self.samples_per_mode.clone(),
            flagged_modes: self.flagged_modes.clone(),
        }
        .serialize(serializer)
    }
}

/// `S_i = {t < T : ω(t) = i, ‖x_t‖ ≤ c_x σ_w √ln T, ‖z_t‖ ≤ c_z σ_z}`.
///
/// With known `B` the exploration condition is dropped.
pub fn clip_indices(traj: &Trajectory, noise: NoiseSpec, config: &ResolvedSysid, mode: usize) -> Vec<usize> {
    let horizon = traj.len();
    let log_t = (horizon.max(2) as f64).ln();
    let x_bound = config.c_x * noise.sigma_w * log_t.sqrt();
    let z_bound = config.c_z * noise.sigma_z;
    (0..horizon)
        .filter(|&t| {
            traj.modes[t] == mode
                && traj.states[t].norm() <= x_bound
                && (config.known_b || traj.explorations[t].norm() <= z_bound)
        })
        .collect()
}

/// Least squares `min ‖X Θᵀ − Y‖` via thin QR, with a relative rank check
/// on the diagonal of `R`.
fn least_squares(x: &DMatrix<f64>, y: &DMatrix<f64>, mode: usize) -> Result<DMatrix<f64>> {
    let qr = x.clone().qr();
    let r = qr.r();
    let diag = r.diagonal().abs();
    let scale = diag.max();
    if scale == 0.0 || diag.iter().any(|&d| d <= RANK_TOL * scale) {
        return Err(MjsError::DegenerateRegressors { mode });
    }
    let qty = qr.q().transpose() * y;
    let theta_t = r
        .solve_upper_triangular(&qty)
        .ok_or(MjsError::DegenerateRegressors { mode })?;
    Ok(theta_t.transpose())
}

fn check_trajectory(traj: &Trajectory, controller: &ModeController) -> Result<(usize, usize, usize)> {
    let s = controller.gains().len();
    if s == 0 || traj.is_empty() {
        return Err(MjsError::InvalidInput("empty trajectory or controller".into()));
    }
    let (p, n) = controller.gain(0).shape();
    if traj.len() < 2 {
        return Err(MjsError::InvalidInput("identification needs T ≥ 2".into()));
    }
    if traj.states.len() != traj.len() + 1
        || traj.modes.len() != traj.len() + 1
        || traj.inputs.len() != traj.len()
        || traj.disturbances.len() != traj.len()
    {
        return Err(MjsError::ShapeMismatch("inconsistent trajectory lengths".into()));
    }
    if traj.states.iter().any(|x| x.len() != n) || traj.explorations.iter().any(|z| z.len() != p) {
        return Err(MjsError::ShapeMismatch("trajectory does not match controller dimensions".into()));
    }
    if traj.modes.iter().any(|&m| m >= s) {
        return Err(MjsError::InvalidInput("mode index out of range".into()));
    }
    Ok((n, p, s))
}

fn positive_scale(sigma: f64, what: &str) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(MjsError::InvalidInput(format!("{what} must be positive, got {sigma}")));
    }
    Ok(())
}

/// Identifies `(A_i, B_i)` per mode and `T` from one trajectory generated
/// under `u_t = K_{ω(t)} x_t + z_t`.
pub fn mjs_sysid(
    traj: &Trajectory,
    controller: &ModeController,
    noise: NoiseSpec,
    config: &SysidConfig,
) -> Result<SysidResult> {
    let (n, p, s) = check_trajectory(traj, controller)?;
    if config.known_b {
        return Err(MjsError::InvalidInput(
            "known_b is set; use mjs_sysid_known_b".into(),
        ));
    }
    positive_scale(noise.sigma_w, "sigma_w")?;
    positive_scale(noise.sigma_z, "sigma_z")?;
    let cfg = config.resolve(n, p)?;
    let mut result = empty_result(traj, n, p, s)?;
    for i in 0..s {
        let idx = clip_indices(traj, noise, &cfg, i);
        result.samples_per_mode[i] = idx.len();
        if idx.len() < cfg.min_samples {
            result.flagged_modes.push(i);
            continue;
        }
        let x = DMatrix::from_fn(idx.len(), n + p, |r, c| {
            let k = idx[r];
            if c < n {
                traj.states[k][c] / noise.sigma_w
            } else {
                traj.explorations[k][c - n] / noise.sigma_z
            }
        });
        let y = DMatrix::from_fn(idx.len(), n, |r, c| traj.states[idx[r] + 1][c]);
        let theta = least_squares(&x, &y, i)?;
        let theta1 = theta.columns(0, n).into_owned();
        let theta2 = theta.columns(n, p).into_owned();
        let b_hat = &theta2 / noise.sigma_z;
        result.a_hat[i] = &theta1 / noise.sigma_w - &b_hat * controller.gain(i);
        result.b_hat[i] = b_hat;
        result.theta1[i] = theta1;
        result.theta2[i] = theta2;
    }
    Ok(result)
}

/// Identifies `A_i` by regressing `x_{k+1} − B_i u_k` on `x_k/σ_w`, with the
/// true `B` supplied. `B̂` echoes `model_b`.
pub fn mjs_sysid_known_b(
    traj: &Trajectory,
    controller: &ModeController,
    model_b: &[DMatrix<f64>],
    noise: NoiseSpec,
    config: &SysidConfig,
) -> Result<SysidResult> {
    let (n, p, s) = check_trajectory(traj, controller)?;
    if model_b.len() != s || model_b.iter().any(|b| b.shape() != (n, p)) {
        return Err(MjsError::ShapeMismatch(format!(
            "known B must be {s} matrices of shape {n}x{p}"
        )));
    }
    positive_scale(noise.sigma_w, "sigma_w")?;
    let cfg = SysidConfig {
        known_b: true,
        ..*config
    }
    .resolve(n, p)?;
    let mut result = empty_result(traj, n, p, s)?;
    for i in 0..s {
        let idx = clip_indices(traj, noise, &cfg, i);
        result.samples_per_mode[i] = idx.len();
        result.b_hat[i] = model_b[i].clone();
        if idx.len() < cfg.min_samples {
            result.flagged_modes.push(i);
            continue;
        }
        let x = DMatrix::from_fn(idx.len(), n, |r, c| traj.states[idx[r]][c] / noise.sigma_w);
        let y = DMatrix::from_fn(idx.len(), n, |r, c| {
            let k = idx[r];
            let bu: DVector<f64> = &model_b[i] * &traj.inputs[k];
            traj.states[k + 1][c] - bu[c]
        });
        let theta1 = least_squares(&x, &y, i)?;
        result.a_hat[i] = &theta1 / noise.sigma_w;
        result.theta1[i] = theta1;
    }
    Ok(result)
}

fn empty_result(traj: &Trajectory, n: usize, p: usize, s: usize) -> Result<SysidResult> {
    Ok(SysidResult {
        a_hat: vec![DMatrix::zeros(n, n); s],
        b_hat: vec![DMatrix::zeros(n, p); s],
        t_hat: estimate_transition(&traj.modes, s)?.chain,
        samples_per_mode: vec![0; s],
        flagged_modes: Vec::new(),
        theta1: vec![DMatrix::zeros(n, n); s],
        theta2: vec![DMatrix::zeros(n, p); s],
    })
}

/// Error metrics of an estimate against the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimationError {
    /// `max_i ‖Â_i − A_i‖`.
    pub err_a: f64,
    /// `max_i ‖B̂_i − B_i‖`.
    pub err_b: f64,
    /// `‖T̂ − T‖_∞`.
    pub err_t: f64,
    /// `max_i ‖Ψ̂_i − Ψ_i‖ / ‖Ψ_i‖` with `Ψ_i = [A_i, B_i]`.
    pub rel_psi: f64,
}

impl EstimationError {
    /// `max(err_A, err_B)`.
    pub fn parameter_error(&self) -> f64 {
        self.err_a.max(self.err_b)
    }
}

pub fn estimation_error(result: &SysidResult, truth: &MjsModel) -> Result<EstimationError> {
    let (n, p, s) = (truth.n(), truth.p(), truth.s());
    if result.a_hat.len() != s
        || result.b_hat.len() != s
        || result.t_hat.modes() != s
        || result.a_hat.iter().any(|a| a.shape() != (n, n))
        || result.b_hat.iter().any(|b| b.shape() != (n, p))
    {
        return Err(MjsError::ShapeMismatch("estimate does not match the true model".into()));
    }
    let mut err = EstimationError {
        err_a: 0.0,
        err_b: 0.0,
        err_t: 0.0,
        rel_psi: 0.0,
    };
    for i in 0..s {
        let da = &result.a_hat[i] - &truth.a()[i];
        let db = &result.b_hat[i] - &truth.b()[i];
        err.err_a = err.err_a.max(spectral_norm(&da));
        err.err_b = err.err_b.max(spectral_norm(&db));
        let psi = concat(&truth.a()[i], &truth.b()[i]);
        let norm = spectral_norm(&psi);
        let diff = spectral_norm(&concat(&da, &db));
        let rel = if norm > 0.0 { diff / norm } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
        err.rel_psi = err.rel_psi.max(rel);
    }
    let dt = result.t_hat.matrix() - truth.chain().matrix();
    err.err_t = dt
        .row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    Ok(err)
}

fn concat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    m.columns_mut(0, a.ncols()).copy_from(a);
    m.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    m
}
