//! Model, controller, noise and trajectory types plus their JSON form.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MjsError, Result};
use crate::lqr::CostSpec;
use crate::markov::MarkovChain;

/// Row-major nested representation of a matrix.
pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Builds a `rows×cols` matrix from nested rows, checking every length.
pub fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(MjsError::ShapeMismatch(format!(
            "{what} must be {nrows}x{ncols}"
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn check_shape(m: &DMatrix<f64>, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(MjsError::ShapeMismatch(format!(
            "{what} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// A Markov jump linear system `x_{t+1} = A_{ω(t)} x_t + B_{ω(t)} u_t + w_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MjsModel {
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    chain: MarkovChain,
    n: usize,
    p: usize,
}

impl MjsModel {
    /// `b` may hold `n×0` matrices for autonomous systems.
    pub fn new(a: Vec<DMatrix<f64>>, b: Vec<DMatrix<f64>>, chain: MarkovChain) -> Result<Self> {
        let s = chain.modes();
        if a.len() != s || b.len() != s {
            return Err(MjsError::ShapeMismatch(format!(
                "expected {s} mode matrices, got {} A and {} B",
                a.len(),
                b.len()
            )));
        }
        let n = a[0].nrows();
        if n == 0 {
            return Err(MjsError::ShapeMismatch("state dimension must be positive".into()));
        }
        let p = b[0].ncols();
        for (i, (ai, bi)) in a.iter().zip(&b).enumerate() {
            check_shape(ai, n, n, &format!("A[{i}]"))?;
            check_shape(bi, n, p, &format!("B[{i}]"))?;
        }
        Ok(Self { a, b, chain, n, p })
    }

    /// Autonomous model (`p = 0`).
    pub fn autonomous(a: Vec<DMatrix<f64>>, chain: MarkovChain) -> Result<Self> {
        let b = a.iter().map(|ai| DMatrix::zeros(ai.nrows(), 0)).collect();
        Self::new(a, b, chain)
    }

    pub fn a(&self) -> &[DMatrix<f64>] {
        &self.a
    }

    pub fn b(&self) -> &[DMatrix<f64>] {
        &self.b
    }

    pub fn chain(&self) -> &MarkovChain {
        &self.chain
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn s(&self) -> usize {
        self.chain.modes()
    }

    /// Same model with the input matrices replaced.
    pub fn with_b(&self, b: Vec<DMatrix<f64>>) -> Result<Self> {
        Self::new(self.a.clone(), b, self.chain.clone())
    }

    /// `max_i ‖B_i‖`.
    pub fn b_norm(&self) -> f64 {
        self.b.iter().map(crate::linalg::spectral_norm).fold(0.0, f64::max)
    }
}

/// Mode-dependent feedback gains `u_t = K_{ω(t)} x_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeController {
    k: Vec<DMatrix<f64>>,
}

impl ModeController {
    pub fn new(k: Vec<DMatrix<f64>>) -> Self {
        Self { k }
    }

    pub fn zeros(model: &MjsModel) -> Self {
        Self {
            k: vec![DMatrix::zeros(model.p(), model.n()); model.s()],
        }
    }

    pub fn gains(&self) -> &[DMatrix<f64>] {
        &self.k
    }

    pub fn gain(&self, mode: usize) -> &DMatrix<f64> {
        &self.k[mode]
    }

    /// Checks that there is one `p×n` gain per mode of `model`.
    pub fn check_against(&self, model: &MjsModel) -> Result<()> {
        if self.k.len() != model.s() {
            return Err(MjsError::ShapeMismatch(format!(
                "controller has {} gains for {} modes",
                self.k.len(),
                model.s()
            )));
        }
        for (i, k) in self.k.iter().enumerate() {
            check_shape(k, model.p(), model.n(), &format!("K[{i}]"))?;
        }
        Ok(())
    }

    /// Largest per-mode spectral-norm distance to another controller.
    pub fn distance(&self, other: &ModeController) -> f64 {
        self.k
            .iter()
            .zip(&other.k)
            .map(|(a, b)| crate::linalg::spectral_norm(&(a - b)))
            .fold(0.0, f64::max)
    }
}

impl Serialize for ModeController {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<Vec<f64>>> = self.k.iter().map(matrix_rows).collect();
        rows.serialize(serializer)
    }
}

/// Isotropic process and exploration noise levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma_w: f64,
    pub sigma_z: f64,
}

impl NoiseSpec {
    pub fn new(sigma_w: f64, sigma_z: f64) -> Result<Self> {
        if !(sigma_w >= 0.0 && sigma_z >= 0.0) {
            return Err(MjsError::InvalidInput(format!(
                "noise levels must be nonnegative, got sigma_w={sigma_w}, sigma_z={sigma_z}"
            )));
        }
        Ok(Self { sigma_w, sigma_z })
    }

    pub fn silent() -> Self {
        Self {
            sigma_w: 0.0,
            sigma_z: 0.0,
        }
    }
}

/// A recorded rollout: `T+1` states and modes, `T` explorations, inputs and
/// disturbances.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub modes: Vec<usize>,
    pub explorations: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub disturbances: Vec<DVector<f64>>,
}

impl Trajectory {
    /// Number of transitions `T`.
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Realized stage cost `x_tᵀ Q_{ω(t)} x_t + u_tᵀ R_{ω(t)} u_t` for each
    /// `t` with an applied input.
    pub fn stage_costs(&self, cost: &CostSpec) -> Vec<f64> {
        (0..self.len())
            .map(|t| {
                let m = self.modes[t];
                let x = &self.states[t];
                let u = &self.inputs[t];
                x.dot(&(&cost.q()[m] * x)) + u.dot(&(&cost.r()[m] * u))
            })
            .collect()
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn final_mode(&self) -> usize {
        *self.modes.last().expect("trajectory has at least one mode")
    }
}

/// JSON document `{n, p, s, A, B, T}` with optional `{Q, R}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDocument {
    pub n: usize,
    pub p: usize,
    pub s: usize,
    #[serde(rename = "A")]
    pub a: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "T")]
    pub t: Vec<Vec<f64>>,
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<Vec<Vec<f64>>>>,
}

impl ModelDocument {
    pub fn from_model(model: &MjsModel, cost: Option<&CostSpec>) -> Self {
        Self {
            n: model.n(),
            p: model.p(),
            s: model.s(),
            a: model.a().iter().map(matrix_rows).collect(),
            b: model.b().iter().map(matrix_rows).collect(),
            t: matrix_rows(model.chain().matrix()),
            q: cost.map(|c| c.q().iter().map(matrix_rows).collect()),
            r: cost.map(|c| c.r().iter().map(matrix_rows).collect()),
        }
    }

    pub fn to_model(&self) -> Result<MjsModel> {
        let (n, p, s) = (self.n, self.p, self.s);
        if self.a.len() != s || self.b.len() != s {
            return Err(MjsError::ShapeMismatch(format!(
                "A and B must each list s = {s} matrices"
            )));
        }
        let a = self
            .a
            .iter()
            .enumerate()
            .map(|(i, m)| matrix_from_rows(m, n, n, &format!("A[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        let b = self
            .b
            .iter()
            .enumerate()
            .map(|(i, m)| {
                // an n×0 matrix may be written as [] as well as [[], …, []]
                if p == 0 && m.is_empty() {
                    Ok(DMatrix::zeros(n, 0))
                } else {
                    matrix_from_rows(m, n, p, &format!("B[{i}]"))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let chain = MarkovChain::from_rows(&self.t)?;
        if chain.modes() != s {
            return Err(MjsError::ShapeMismatch(format!("T must be {s}x{s}")));
        }
        MjsModel::new(a, b, chain)
    }

    /// The cost matrices if both `Q` and `R` are present.
    pub fn to_cost(&self) -> Result<Option<CostSpec>> {
        match (&self.q, &self.r) {
            (Some(q), Some(r)) => {
                let q = q
                    .iter()
                    .map(|m| matrix_from_rows(m, self.n, self.n, "Q"))
                    .collect::<Result<Vec<_>>>()?;
                let r = r
                    .iter()
                    .map(|m| matrix_from_rows(m, self.p, self.p, "R"))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Some(CostSpec::new(q, r)?))
            }
            (None, None) => Ok(None),
            _ => Err(MjsError::InvalidInput("Q and R must be given together".into())),
        }
    }
}
