//! Coupled Riccati equations, optimal mode-dependent gains, and exact
//! quadratic costs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MjsError, Result};
use crate::linalg::{self, spectral_norm, symmetrize, vec_of};
use crate::markov::{stationary_distribution, MarkovChain};
use crate::mjs::{self, CovarianceSequence};
use crate::model::{matrix_from_rows, matrix_rows, MjsModel, ModeController, NoiseSpec};

/// Per-mode quadratic weights `Q_i ⪰ 0`, `R_i ≻ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CostDocument", into = "CostDocument")]
pub struct CostSpec {
    q: Vec<DMatrix<f64>>,
    r: Vec<DMatrix<f64>>,
}

impl CostSpec {
    /// Symmetrizes both lists and checks `λ_min(Q_i) ≥ −1e-10`, `λ_min(R_i) > 0`.
    pub fn new(q: Vec<DMatrix<f64>>, r: Vec<DMatrix<f64>>) -> Result<Self> {
        if q.len() != r.len() || q.is_empty() {
            return Err(MjsError::ShapeMismatch(format!(
                "{} Q matrices and {} R matrices",
                q.len(),
                r.len()
            )));
        }
        let (n, p) = (q[0].nrows(), r[0].nrows());
        for (i, (qi, ri)) in q.iter().zip(&r).enumerate() {
            if qi.shape() != (n, n) || ri.shape() != (p, p) {
                return Err(MjsError::ShapeMismatch(format!("cost matrices of mode {i}")));
            }
            if qi.iter().chain(ri.iter()).any(|x| !x.is_finite()) {
                return Err(MjsError::InvalidInput(format!("non-finite cost in mode {i}")));
            }
        }
        let q: Vec<_> = q.iter().map(symmetrize).collect();
        let r: Vec<_> = r.iter().map(symmetrize).collect();
        for (i, qi) in q.iter().enumerate() {
            if linalg::min_sym_eigenvalue(qi) < -1e-10 {
                return Err(MjsError::NotPsd(format!("Q_{i}")));
            }
        }
        for (i, ri) in r.iter().enumerate() {
            if p > 0 && linalg::min_sym_eigenvalue(ri) <= 0.0 {
                return Err(MjsError::NotPsd(format!("R_{i} (must be positive definite)")));
            }
        }
        Ok(Self { q, r })
    }

    /// The same `Q` and `R` in every mode.
    pub fn uniform(q: DMatrix<f64>, r: DMatrix<f64>, s: usize) -> Result<Self> {
        Self::new(vec![q; s], vec![r; s])
    }

    pub fn q(&self) -> &[DMatrix<f64>] {
        &self.q
    }

    pub fn r(&self) -> &[DMatrix<f64>] {
        &self.r
    }

    fn check_against(&self, model: &MjsModel) -> Result<()> {
        if self.q.len() != model.s()
            || self.q[0].nrows() != model.n()
            || self.r[0].nrows() != model.p()
        {
            return Err(MjsError::ShapeMismatch(format!(
                "cost for s={}, n={}, p={} does not fit model with s={}, n={}, p={}",
                self.q.len(),
                self.q[0].nrows(),
                self.r[0].nrows(),
                model.s(),
                model.n(),
                model.p()
            )));
        }
        Ok(())
    }

    /// `M_i = Q_i + K_iᵀ R_i K_i`.
    pub fn closed_loop_weights(&self, controller: &ModeController) -> Vec<DMatrix<f64>> {
        self.q
            .iter()
            .zip(&self.r)
            .zip(controller.gains())
            .map(|((q, r), k)| q + k.transpose() * r * k)
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct CostDocument {
    #[serde(rename = "Q")]
    q: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "R")]
    r: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<CostDocument> for CostSpec {
    type Error = MjsError;

    fn try_from(doc: CostDocument) -> Result<Self> {
        let square = |rows: &Vec<Vec<f64>>, what: &str| {
            let n = rows.len();
            matrix_from_rows(rows, n, n, what)
        };
        let q = doc.q.iter().map(|m| square(m, "Q")).collect::<Result<_>>()?;
        let r = doc.r.iter().map(|m| square(m, "R")).collect::<Result<_>>()?;
        CostSpec::new(q, r)
    }
}

impl From<CostSpec> for CostDocument {
    fn from(c: CostSpec) -> Self {
        CostDocument {
            q: c.q.iter().map(matrix_rows).collect(),
            r: c.r.iter().map(matrix_rows).collect(),
        }
    }
}

/// `φ_j(P) = Σ_k [T]_jk P_k`.
pub fn coupling(p: &[DMatrix<f64>], chain: &MarkovChain, j: usize) -> Result<DMatrix<f64>> {
    if p.len() != chain.modes() || p.is_empty() {
        return Err(MjsError::ShapeMismatch(format!(
            "{} matrices for {} modes",
            p.len(),
            chain.modes()
        )));
    }
    if j >= p.len() {
        return Err(MjsError::ShapeMismatch(format!("mode {j} out of range")));
    }
    let shape = p[0].shape();
    if p.iter().any(|m| m.shape() != shape) {
        return Err(MjsError::ShapeMismatch("matrices differ in shape".into()));
    }
    let mut acc = DMatrix::zeros(shape.0, shape.1);
    for (k, pk) in p.iter().enumerate() {
        let w = chain.prob(j, k);
        if w != 0.0 {
            acc += pk * w;
        }
    }
    Ok(acc)
}

/// Solution of the coupled Riccati equations.
#[derive(Debug, Clone, PartialEq)]
pub struct CdareSolution {
    pub p: Vec<DMatrix<f64>>,
    pub iterations: usize,
    /// Max over modes of the spectral norm of the last update.
    pub final_residual: f64,
    /// Update norms of every iteration, in order.
    pub residuals: Vec<f64>,
}

/// Inner solve `(R_j + B_jᵀφB_j)⁻¹ B_jᵀφA_j`, i.e. `−K_j`.
fn neg_gain(
    phi: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    mode: usize,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if b.ncols() == 0 {
        return Ok(DMatrix::zeros(0, n));
    }
    let bt_phi = b.transpose() * phi;
    let inner = symmetrize(&(r + &bt_phi * b));
    let rhs = &bt_phi * a;
    let chol = inner.cholesky().ok_or(MjsError::SingularInnerSolve { mode })?;
    let sol = chol.solve(&rhs);
    if sol.iter().any(|x| !x.is_finite()) {
        return Err(MjsError::SingularInnerSolve { mode });
    }
    Ok(sol)
}

/// One application of the coupled Riccati map.
pub fn riccati_step(model: &MjsModel, cost: &CostSpec, p: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
    let chain = model.chain();
    (0..model.s())
        .map(|j| {
            let phi = coupling(p, chain, j)?;
            let (a, b) = (&model.a()[j], &model.b()[j]);
            let at_phi = a.transpose() * &phi;
            let mut next = &at_phi * a + &cost.q()[j];
            if b.ncols() > 0 {
                let g = neg_gain(&phi, a, b, &cost.r()[j], j)?;
                next -= &at_phi * b * g;
            }
            Ok(symmetrize(&next))
        })
        .collect()
}

/// Value iteration on the coupled Riccati equations, started at `P = Q`.
///
/// Stops when the largest per-mode spectral-norm update drops to `tol`.
pub fn solve_cdare(model: &MjsModel, cost: &CostSpec, tol: f64, max_iter: usize) -> Result<CdareSolution> {
    cost.check_against(model)?;
    let mut p: Vec<DMatrix<f64>> = cost.q().to_vec();
    let mut residuals = Vec::new();
    for iter in 1..=max_iter {
        let next = riccati_step(model, cost, &p)?;
        let change = next
            .iter()
            .zip(&p)
            .map(|(a, b)| spectral_norm(&(a - b)))
            .fold(0.0, f64::max);
        if !change.is_finite() || next.iter().any(|m| m.iter().any(|x| !x.is_finite())) {
            return Err(MjsError::NoConvergence {
                what: "coupled Riccati iteration",
                iterations: iter,
                residual: f64::INFINITY,
            });
        }
        residuals.push(change);
        p = next;
        if change <= tol {
            return Ok(CdareSolution {
                p,
                iterations: iter,
                final_residual: change,
                residuals,
            });
        }
    }
    Err(MjsError::NoConvergence {
        what: "coupled Riccati iteration",
        iterations: max_iter,
        residual: residuals.last().copied().unwrap_or(f64::NAN),
    })
}

/// `K_j = −(R_j + B_jᵀφ_jB_j)⁻¹ B_jᵀφ_jA_j` with `φ_j = φ_j(P)`.
pub fn optimal_controller(model: &MjsModel, cost: &CostSpec, solution: &CdareSolution) -> Result<ModeController> {
    cost.check_against(model)?;
    let gains = (0..model.s())
        .map(|j| {
            let phi = coupling(&solution.p, model.chain(), j)?;
            Ok(-neg_gain(&phi, &model.a()[j], &model.b()[j], &cost.r()[j], j)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModeController::new(gains))
}

/// Solves the cDARE with the default tolerance and returns the optimal gains.
pub fn lqr_controller(model: &MjsModel, cost: &CostSpec) -> Result<ModeController> {
    let sol = solve_cdare(model, cost, 1e-6, 10_000)?;
    optimal_controller(model, cost, &sol)
}

/// Components of the expected finite-horizon cost.
///
/// `initial` is driven by `x₀` alone, `exploration_state` by `z` through the
/// state, `exploration_input` is the direct `E zᵀRz` term, `disturbance` is
/// driven by `w`. They add up to `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    pub initial: f64,
    pub exploration_state: f64,
    pub exploration_input: f64,
    pub disturbance: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.initial + self.exploration_state + self.exploration_input + self.disturbance
    }
}

fn state_cost(seq: &CovarianceSequence, m: &[DMatrix<f64>], horizon: usize) -> f64 {
    (1..=horizon)
        .map(|t| {
            seq.blocks[t]
                .iter()
                .zip(m)
                .map(|(sigma, mi)| (mi * sigma).trace())
                .sum::<f64>()
        })
        .sum()
}

/// Exact per-source decomposition of [`finite_horizon_cost`].
#[allow(clippy::too_many_arguments)]
pub fn finite_horizon_cost_breakdown(
    model: &MjsModel,
    controller: &ModeController,
    noise: NoiseSpec,
    x0: &DVector<f64>,
    omega0_dist: &[f64],
    cost: &CostSpec,
    horizon: usize,
) -> Result<CostBreakdown> {
    cost.check_against(model)?;
    controller.check_against(model)?;
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
    let n = model.n();
    let m = cost.closed_loop_weights(controller);
    let x0x0 = x0 * x0.transpose();
    let zero = DMatrix::zeros(n, n);
    let run = |init: &DMatrix<f64>, sw: f64, sz: f64| -> Result<CovarianceSequence> {
        mjs::covariance_recursion(
            model,
            controller,
            NoiseSpec { sigma_w: sw, sigma_z: sz },
            &mjs::initial_covariances(init, omega0_dist),
            omega0_dist,
            horizon,
        )
    };
    let from_x0 = run(&x0x0, 0.0, 0.0)?;
    let from_z = run(&zero, 0.0, noise.sigma_z)?;
    let from_w = run(&zero, noise.sigma_w, 0.0)?;
    let sz2 = noise.sigma_z.powi(2);
    let exploration_input = (1..=horizon)
        .map(|t| {
            from_x0.mode_dist[t]
                .iter()
                .zip(cost.r())
                .map(|(pi, r)| pi * r.trace() * sz2)
                .sum::<f64>()
        })
        .sum();
    Ok(CostBreakdown {
        initial: state_cost(&from_x0, &m, horizon),
        exploration_state: state_cost(&from_z, &m, horizon),
        exploration_input,
        disturbance: state_cost(&from_w, &m, horizon),
    })
}

/// `Σ_{t=1}^T E[x_tᵀQ_{ω(t)}x_t + u_tᵀR_{ω(t)}u_t]` from the exact
/// second-moment recursion.
#[allow(clippy::too_many_arguments)]
pub fn finite_horizon_cost(
    model: &MjsModel,
    controller: &ModeController,
    noise: NoiseSpec,
    x0: &DVector<f64>,
    omega0_dist: &[f64],
    cost: &CostSpec,
    horizon: usize,
) -> Result<f64> {
    cost.check_against(model)?;
    controller.check_against(model)?;
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
    let m = cost.closed_loop_weights(controller);
    let seq = mjs::covariance_recursion(
        model,
        controller,
        noise,
        &mjs::initial_covariances(&(x0 * x0.transpose()), omega0_dist),
        omega0_dist,
        horizon,
    )?;
    let sz2 = noise.sigma_z.powi(2);
    let input: f64 = (1..=horizon)
        .map(|t| {
            seq.mode_dist[t]
                .iter()
                .zip(cost.r())
                .map(|(pi, r)| pi * r.trace() * sz2)
                .sum::<f64>()
        })
        .sum();
    Ok(state_cost(&seq, &m, horizon) + input)
}

/// Long-run average cost without exploration,
/// `J = Σ_i tr(M_i Σ_i(∞))` where `(I − L̃) s_∞ = (π_∞ ⊗ I) vec(σ_w² I)`.
pub fn infinite_horizon_avg_cost(
    model: &MjsModel,
    controller: &ModeController,
    sigma_w: f64,
    cost: &CostSpec,
) -> Result<f64> {
    cost.check_against(model)?;
    let loops = mjs::closed_loop(model, controller)?;
    let rho = mjs::augmented_spectral_radius(&loops, model.chain())?;
    if rho >= 1.0 - 1e-10 {
        return Err(MjsError::NotMss { rho });
    }
    let (n, s) = (model.n(), model.s());
    let nn = n * n;
    let pi = stationary_distribution(model.chain())?.pi;
    let vw = vec_of(&(DMatrix::<f64>::identity(n, n) * sigma_w.powi(2)));
    let rhs = DVector::from_fn(s * nn, |k, _| pi[k / nn] * vw[k % nn]);
    let aug = mjs::AugmentedMatrix::from_closed_loops(&loops, model.chain())?;
    let system = DMatrix::identity(s * nn, s * nn) - aug.matrix();
    let lu = system.clone().lu();
    let mut y = lu.solve(&rhs).ok_or(MjsError::NotMss { rho })?;
    // one residual-correction pass
    let residual = &rhs - &system * &y;
    if let Some(dy) = lu.solve(&residual) {
        y += dy;
    }
    let m = cost.closed_loop_weights(controller);
    Ok((0..s)
        .map(|i| (&m[i] * linalg::unvec(&y.as_slice()[i * nn..(i + 1) * nn], n)).trace())
        .sum())
}
