//! Finite ergodic Markov chains.
//!
//! Modes are zero-based everywhere in the API: a chain with `s` modes
//! produces paths over `0..s`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MjsError, Result};

const ROW_SUM_TOL: f64 = 1e-12;
const STATIONARY_RESIDUAL_TOL: f64 = 1e-10;

/// Default threshold of [`mixing_time`]: the unhalved ℓ₁ distance 0.5,
/// i.e. total variation 1/4.
pub const DEFAULT_MIXING_EPSILON: f64 = 0.5;

/// A row-stochastic transition matrix, `[T]_ij = P(next = j | current = i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct MarkovChain {
    t: DMatrix<f64>,
}

impl MarkovChain {
    pub fn new(t: DMatrix<f64>) -> Result<Self> {
        let s = t.nrows();
        if s == 0 || t.ncols() != s {
            return Err(MjsError::ShapeMismatch(format!(
                "transition matrix must be square and non-empty, got {}x{}",
                t.nrows(),
                t.ncols()
            )));
        }
        for (i, row) in t.row_iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(MjsError::InvalidInput(format!(
                    "row {i} has an entry outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(MjsError::InvalidInput(format!(
                    "row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { t })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::try_from(rows.to_vec())
    }

    /// The single-mode chain `T = [1]`.
    pub fn single() -> Self {
        Self {
            t: DMatrix::from_element(1, 1, 1.0),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.t
    }

    /// Number of modes.
    pub fn modes(&self) -> usize {
        self.t.nrows()
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.t[(from, to)]
    }

    /// One step of the mode distribution: `πᵀ ← πᵀ T`.
    pub fn propagate(&self, dist: &DVector<f64>) -> DVector<f64> {
        self.t.tr_mul(dist)
    }

    /// Irreducibility and aperiodicity of the support graph.
    pub fn check_ergodic(&self) -> Result<()> {
        let s = self.modes();
        let adj: Vec<Vec<usize>> = (0..s)
            .map(|i| (0..s).filter(|&j| self.t[(i, j)] > 0.0).collect())
            .collect();

        // BFS levels from mode 0 on the forward graph.
        let mut level = vec![usize::MAX; s];
        level[0] = 0;
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if level[v] == usize::MAX {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        if level.contains(&usize::MAX) {
            return Err(MjsError::NotErgodic("chain is reducible".into()));
        }
        // reverse reachability
        let mut seen = vec![false; s];
        seen[0] = true;
        let mut stack = vec![0usize];
        while let Some(v) = stack.pop() {
            for u in 0..s {
                if !seen[u] && self.t[(u, v)] > 0.0 {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        if seen.contains(&false) {
            return Err(MjsError::NotErgodic("chain is reducible".into()));
        }

        // Period of an irreducible chain: gcd over edges of level(u)+1-level(v).
        let mut period = 0usize;
        for u in 0..s {
            for &v in &adj[u] {
                let diff = (level[u] as i64 + 1 - level[v] as i64).unsigned_abs() as usize;
                period = gcd(period, diff);
            }
        }
        if period != 1 {
            return Err(MjsError::NotErgodic(format!("chain has period {period}")));
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl TryFrom<Vec<Vec<f64>>> for MarkovChain {
    type Error = MjsError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let s = rows.len();
        if rows.iter().any(|r| r.len() != s) {
            return Err(MjsError::ShapeMismatch(
                "transition matrix rows must all have length s".into(),
            ));
        }
        Self::new(DMatrix::from_fn(s, s, |i, j| rows[i][j]))
    }
}

impl From<MarkovChain> for Vec<Vec<f64>> {
    fn from(c: MarkovChain) -> Self {
        crate::model::matrix_rows(&c.t)
    }
}

/// Stationary distribution of an ergodic chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationaryDistribution {
    pub pi: DVector<f64>,
    pub pi_min: f64,
}

/// Solves the bordered system `[Tᵀ − I; 1ᵀ] π = [0; 1]` in the least-squares
/// sense after checking ergodicity combinatorially.
pub fn stationary_distribution(chain: &MarkovChain) -> Result<StationaryDistribution> {
    chain.check_ergodic()?;
    let s = chain.modes();
    let mut system = DMatrix::zeros(s + 1, s);
    system
        .view_mut((0, 0), (s, s))
        .copy_from(&(chain.matrix().transpose() - DMatrix::identity(s, s)));
    system.row_mut(s).fill(1.0);
    let mut rhs = DVector::zeros(s + 1);
    rhs[s] = 1.0;

    let svd = system.svd(true, true);
    let pi = svd
        .solve(&rhs, 1e-14)
        .map_err(|e| MjsError::NotErgodic(e.to_string()))?;

    let pi_min = pi.min();
    if pi_min <= 0.0 {
        return Err(MjsError::NotErgodic(
            "stationary vector has a non-positive entry".into(),
        ));
    }
    let residual = (chain.propagate(&pi) - &pi).lp_norm(1);
    if residual > STATIONARY_RESIDUAL_TOL {
        return Err(MjsError::NotErgodic(format!(
            "stationary residual {residual:e} exceeds tolerance"
        )));
    }
    Ok(StationaryDistribution { pi, pi_min })
}

/// `max_i ‖row_i(Tᵗ) − π‖₁` for `t = 1..=horizon`.
pub fn mixing_profile(chain: &MarkovChain, horizon: usize) -> Result<Vec<f64>> {
    let pi = stationary_distribution(chain)?.pi;
    let mut power = chain.matrix().clone();
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        out.push(row_distance(&power, &pi));
        power = &power * chain.matrix();
    }
    Ok(out)
}

fn row_distance(power: &DMatrix<f64>, pi: &DVector<f64>) -> f64 {
    power
        .row_iter()
        .map(|row| row.iter().zip(pi.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Smallest `t ∈ 1..=cap` with `max_i ‖row_i(Tᵗ) − π‖₁ ≤ epsilon`.
///
/// With the default `epsilon = 0.5` this is the usual `t_MC = t_mix(1/4)`.
pub fn mixing_time(chain: &MarkovChain, epsilon: f64, cap: usize) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(MjsError::InvalidInput(format!(
            "epsilon must be in (0, 1), got {epsilon}"
        )));
    }
    if cap == 0 {
        return Err(MjsError::InvalidInput("cap must be at least 1".into()));
    }
    let pi = stationary_distribution(chain)?.pi;
    let mut power = chain.matrix().clone();
    for t in 1..=cap {
        if row_distance(&power, &pi) <= epsilon {
            return Ok(t);
        }
        power = &power * chain.matrix();
    }
    Err(MjsError::CapExceeded { cap })
}

/// Draws an index from a probability vector using one uniform variate.
pub(crate) fn draw_index<R: Rng + ?Sized>(rng: &mut R, probs: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the cumulative sum
    last
}

pub(crate) fn validate_distribution(dist: &[f64], s: usize) -> Result<()> {
    if dist.len() != s {
        return Err(MjsError::ShapeMismatch(format!(
            "distribution has length {}, expected {s}",
            dist.len()
        )));
    }
    if dist.iter().any(|p| !(0.0..=1.0).contains(p))
        || (dist.iter().sum::<f64>() - 1.0).abs() > 1e-10
    {
        return Err(MjsError::InvalidInput("not a probability vector".into()));
    }
    Ok(())
}

/// Samples `length` modes with `rng`, the first drawn from `initial_dist`.
pub fn sample_path_with<R: Rng + ?Sized>(
    chain: &MarkovChain,
    initial_dist: &[f64],
    length: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    validate_distribution(initial_dist, chain.modes())?;
    if length == 0 {
        return Err(MjsError::InvalidInput("path length must be at least 1".into()));
    }
    let mut path = Vec::with_capacity(length);
    let mut mode = draw_index(rng, initial_dist.iter().copied());
    path.push(mode);
    for _ in 1..length {
        mode = draw_index(rng, chain.matrix().row(mode).iter().copied());
        path.push(mode);
    }
    Ok(path)
}

/// Seeded mode path; identical seeds give identical paths.
pub fn sample_path(
    chain: &MarkovChain,
    initial_dist: &[f64],
    length: usize,
    rng_seed: u64,
) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_path_with(chain, initial_dist, length, &mut rng)
}

/// Empirical transition frequencies of a mode path.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionEstimate {
    pub chain: MarkovChain,
    /// `counts[(j, i)]` = number of observed `j → i` transitions.
    pub counts: DMatrix<usize>,
    /// Number of times each mode was left (the row totals of `counts`).
    pub visits: Vec<usize>,
    /// Modes never left; their rows are uniform.
    pub unvisited: Vec<usize>,
}

/// `[T̂]_ji = #{t : ω(t−1)=j, ω(t)=i} / #{t : ω(t−1)=j}`; rows with no
/// visits are returned uniform and listed in `unvisited`.
pub fn estimate_transition(modes: &[usize], s: usize) -> Result<TransitionEstimate> {
    if modes.len() < 2 {
        return Err(MjsError::InvalidInput(
            "need at least two modes to count transitions".into(),
        ));
    }
    if s == 0 {
        return Err(MjsError::InvalidInput("mode count must be positive".into()));
    }
    if let Some(&m) = modes.iter().find(|&&m| m >= s) {
        return Err(MjsError::InvalidInput(format!("mode {m} out of range 0..{s}")));
    }
    let mut counts = DMatrix::<usize>::zeros(s, s);
    for w in modes.windows(2) {
        counts[(w[0], w[1])] += 1;
    }
    let visits: Vec<usize> = (0..s).map(|j| counts.row(j).iter().sum()).collect();
    let mut unvisited = Vec::new();
    let t = DMatrix::from_fn(s, s, |j, i| {
        if visits[j] == 0 {
            1.0 / s as f64
        } else {
            counts[(j, i)] as f64 / visits[j] as f64
        }
    });
    for (j, &v) in visits.iter().enumerate() {
        if v == 0 {
            unvisited.push(j);
        }
    }
    Ok(TransitionEstimate {
        chain: MarkovChain::new(t)?,
        counts,
        visits,
        unvisited,
    })
}
