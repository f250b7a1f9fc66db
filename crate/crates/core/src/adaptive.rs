//! Epoch-based certainty-equivalent adaptive LQR for MJS, regret
//! accounting, and the random model family used by the benchmarks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MjsError, Result};
use crate::linalg::{self, spectral_norm};
use crate::lqr::{self, CostSpec};
use crate::markov::{stationary_distribution, MarkovChain};
use crate::mjs;
use crate::model::{MjsModel, ModeController, NoiseSpec, Trajectory};
use crate::sysid::{self, EstimationError, SysidConfig, SysidResult};

/// Epoch lengths `T_i = ⌊T₀ γⁱ⌋`, `i = 0..num_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSchedule {
    #[serde(rename = "T0")]
    pub t0: usize,
    pub gamma: f64,
    pub num_epochs: usize,
}

impl Default for EpochSchedule {
    fn default() -> Self {
        Self {
            t0: 2000,
            gamma: 2.0,
            num_epochs: 5,
        }
    }
}

impl EpochSchedule {
    pub fn new(t0: usize, gamma: f64, num_epochs: usize) -> Result<Self> {
        let s = Self { t0, gamma, num_epochs };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t0 < 2 {
            return Err(MjsError::InvalidInput(format!("T0 must be at least 2, got {}", self.t0)));
        }
        if !(self.gamma > 1.0 && self.gamma.is_finite()) {
            return Err(MjsError::InvalidInput(format!("gamma must exceed 1, got {}", self.gamma)));
        }
        if self.num_epochs == 0 {
            return Err(MjsError::InvalidInput("num_epochs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn epoch_length(&self, i: usize) -> usize {
        (self.t0 as f64 * self.gamma.powi(i as i32)).floor() as usize
    }

    pub fn lengths(&self) -> Vec<usize> {
        (0..self.num_epochs).map(|i| self.epoch_length(i)).collect()
    }

    pub fn total(&self) -> usize {
        self.lengths().iter().sum()
    }
}

/// Variants of the adaptive loop.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AdaptiveOptions {
    /// Use the true `B`, no exploration, and identify only `A`.
    pub known_b: bool,
    /// Skip identification and hand the true model to the controller
    /// synthesis step.
    pub oracle: bool,
    /// Keep the concatenated trajectory in the record.
    pub keep_trajectory: bool,
}

/// What happened in one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub length: usize,
    pub sigma_z: f64,
    /// Controller applied during the epoch.
    pub controller: ModeController,
    /// Identification from this epoch's data; `None` in oracle mode or if
    /// the regression failed.
    pub sysid: Option<SysidResult>,
    pub errors: Option<EstimationError>,
    /// Realized cost summed over the epoch.
    pub epoch_cost: f64,
    /// Controller synthesis after this epoch failed; the next epoch reuses
    /// `controller`.
    pub cdare_failed: bool,
    pub failure: Option<String>,
    pub first_state: DVector<f64>,
    pub last_state: DVector<f64>,
}

/// Full record of an adaptive run.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveRunRecord {
    pub epochs: Vec<EpochRecord>,
    /// Realized stage cost at every step with an applied input.
    pub stage_costs: Vec<f64>,
    pub j_star: f64,
    pub optimal_controller: ModeController,
    pub trajectory: Option<Trajectory>,
}

impl AdaptiveRunRecord {
    pub fn total_steps(&self) -> usize {
        self.stage_costs.len()
    }

    /// Cumulative step counts at the end of each epoch.
    pub fn boundaries(&self) -> Vec<usize> {
        self.epochs
            .iter()
            .scan(0, |acc, e| {
                *acc += e.length;
                Some(*acc)
            })
            .collect()
    }

    /// `(t, Regret(t))` at every epoch boundary.
    pub fn regret_samples(&self) -> Vec<(usize, f64)> {
        let mut cum = 0.0;
        let mut out = Vec::with_capacity(self.epochs.len());
        let mut t = 0;
        for e in &self.epochs {
            cum += e.epoch_cost;
            t += e.length;
            out.push((t, cum - t as f64 * self.j_star));
        }
        out
    }

    /// `epoch_cost / T_i − J⋆` per epoch.
    pub fn excess_costs(&self) -> Vec<f64> {
        self.epochs
            .iter()
            .map(|e| e.epoch_cost / e.length as f64 - self.j_star)
            .collect()
    }
}

#[derive(Serialize)]
struct EpochDocument {
    epoch: usize,
    #[serde(rename = "T_i")]
    length: usize,
    sigma_z: f64,
    #[serde(rename = "err_A")]
    err_a: Option<f64>,
    #[serde(rename = "err_B")]
    err_b: Option<f64>,
    #[serde(rename = "err_T")]
    err_t: Option<f64>,
    epoch_cost: f64,
    cdare_failed: bool,
}

#[derive(Serialize)]
struct RunDocument {
    j_star: f64,
    epochs: Vec<EpochDocument>,
    regret: Vec<(usize, f64)>,
}

impl Serialize for AdaptiveRunRecord {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        RunDocument {
            j_star: self.j_star,
            epochs: self
                .epochs
                .iter()
                .map(|e| EpochDocument {
                    epoch: e.epoch,
                    length: e.length,
                    sigma_z: e.sigma_z,
                    err_a: e.errors.map(|x| x.err_a),
                    err_b: e.errors.map(|x| x.err_b),
                    err_t: e.errors.map(|x| x.err_t),
                    epoch_cost: e.epoch_cost,
                    cdare_failed: e.cdare_failed,
                })
                .collect(),
            regret: self.regret_samples(),
        }
        .serialize(serializer)
    }
}

/// `Regret(t) = Σ_{k<t} c_k − t J⋆` with realized stage costs `c_k`.
pub fn regret(record: &AdaptiveRunRecord, horizon_prefix: usize) -> Result<f64> {
    if horizon_prefix > record.total_steps() {
        return Err(MjsError::InvalidInput(format!(
            "prefix {horizon_prefix} exceeds the {} recorded steps",
            record.total_steps()
        )));
    }
    let cost: f64 = record.stage_costs[..horizon_prefix].iter().sum();
    Ok(cost - horizon_prefix as f64 * record.j_star)
}

/// Runs the adaptive loop on the true `model` for every epoch of `schedule`.
///
/// Epoch `i` applies `u = K⁽ⁱ⁾x + z` with `σ_{z,i}² = σ_w²/√T_i` (zero with
/// known `B`), then identifies the model from that epoch's data and sets
/// `K⁽ⁱ⁺¹⁾` to the optimal gains of the estimate. The state and mode carry
/// over between epochs. `x₀ = 0`, `ω(0) ~ π_∞`.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_mjs_lqr(
    model: &MjsModel,
    cost: &CostSpec,
    sigma_w: f64,
    initial_controller: &ModeController,
    schedule: &EpochSchedule,
    sysid_config: &SysidConfig,
    options: AdaptiveOptions,
    rng_seed: u64,
) -> Result<AdaptiveRunRecord> {
    schedule.validate()?;
    initial_controller.check_against(model)?;
    if !(sigma_w > 0.0 && sigma_w.is_finite()) {
        return Err(MjsError::InvalidInput(format!("sigma_w must be positive, got {sigma_w}")));
    }
    let optimal = lqr::lqr_controller(model, cost)?;
    let j_star = lqr::infinite_horizon_avg_cost(model, &optimal, sigma_w, cost)?;
    let sysid_config = SysidConfig {
        known_b: options.known_b,
        ..*sysid_config
    };

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let pi = stationary_distribution(model.chain())?.pi;
    let mut mode = crate::markov::draw_index(&mut rng, pi.iter().copied());
    let mut x = DVector::zeros(model.n());
    let mut controller = initial_controller.clone();
    let mut epochs = Vec::with_capacity(schedule.num_epochs);
    let mut stage_costs = Vec::with_capacity(schedule.total());
    let mut full: Option<Trajectory> = None;

    for (i, length) in schedule.lengths().into_iter().enumerate() {
        let sigma_z = if options.known_b {
            0.0
        } else {
            sigma_w / (length as f64).powf(0.25)
        };
        let noise = NoiseSpec::new(sigma_w, sigma_z)?;
        let traj = mjs::simulate_from_mode(model, &controller, noise, &x, mode, length, &mut rng)?;
        let costs = traj.stage_costs(cost);
        let epoch_cost: f64 = costs.iter().sum();
        stage_costs.extend_from_slice(&costs);

        let mut failure = None;
        let estimate: Option<(MjsModel, Option<SysidResult>)> = if options.oracle {
            Some((model.clone(), None))
        } else {
            let res = if options.known_b {
                sysid::mjs_sysid_known_b(&traj, &controller, model.b(), noise, &sysid_config)
            } else {
                sysid::mjs_sysid(&traj, &controller, noise, &sysid_config)
            };
            match res.and_then(|r| r.model().map(|m| (m, r))) {
                Ok((m, r)) => Some((m, Some(r))),
                Err(e) => {
                    failure = Some(e.to_string());
                    None
                }
            }
        };
        let errors = match &estimate {
            Some((_, Some(r))) => Some(sysid::estimation_error(r, model)?),
            _ => None,
        };
        let next = estimate
            .as_ref()
            .map(|(m, _)| lqr::lqr_controller(m, cost))
            .transpose()
            .unwrap_or_else(|e| {
                failure = Some(e.to_string());
                None
            });

        epochs.push(EpochRecord {
            epoch: i,
            length,
            sigma_z,
            controller: controller.clone(),
            sysid: estimate.and_then(|(_, r)| r),
            errors,
            epoch_cost,
            cdare_failed: next.is_none(),
            failure,
            first_state: traj.states[0].clone(),
            last_state: traj.final_state().clone(),
        });

        x = traj.final_state().clone();
        mode = traj.final_mode();
        if options.keep_trajectory {
            full = Some(match full {
                None => traj,
                Some(mut acc) => {
                    acc.states.pop();
                    acc.modes.pop();
                    acc.states.extend(traj.states);
                    acc.modes.extend(traj.modes);
                    acc.explorations.extend(traj.explorations);
                    acc.inputs.extend(traj.inputs);
                    acc.disturbances.extend(traj.disturbances);
                    acc
                }
            });
        }
        if let Some(k) = next {
            controller = k;
        }
    }

    Ok(AdaptiveRunRecord {
        epochs,
        stage_costs,
        j_star,
        optimal_controller: optimal,
        trajectory: full,
    })
}

fn randn<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Draws one row from a Dirichlet distribution with the given
/// concentrations, via normalized Gamma variates.
fn dirichlet_row<R: Rng + ?Sized>(rng: &mut R, alpha: &[f64]) -> Vec<f64> {
    let draws: Vec<f64> = alpha
        .iter()
        .map(|&a| rng.sample(Gamma::new(a, 1.0).expect("positive shape")))
        .collect();
    let total: f64 = draws.iter().sum();
    let mut row: Vec<f64> = draws.iter().map(|g| g / total).collect();
    // absorb rounding into the largest entry so the row sums to 1
    let sum: f64 = row.iter().sum();
    let (imax, _) = row
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    row[imax] += 1.0 - sum;
    row
}

/// Random model family for the benchmarks: `A_i` with standard normal
/// entries rescaled to `‖A_i‖ = spectral_cap`, standard normal `B_i`,
/// Gram-matrix costs `Q_i = Q̲Q̲ᵀ`, `R_i = R̲R̲ᵀ` (with `λ_min(R_i) ≥ 1e-6`),
/// and Dirichlet rows of `T` with concentration `s` on the diagonal and `1`
/// elsewhere. Redraws up to 10 times until the open loop is mean-square
/// stable.
pub fn random_model(
    n: usize,
    p: usize,
    s: usize,
    spectral_cap: f64,
    rng_seed: u64,
) -> Result<(MjsModel, CostSpec)> {
    if n == 0 || p == 0 || s == 0 {
        return Err(MjsError::InvalidInput("n, p and s must be positive".into()));
    }
    if !(spectral_cap > 0.0 && spectral_cap.is_finite()) {
        return Err(MjsError::InvalidInput(format!("spectral_cap must be positive, got {spectral_cap}")));
    }
    const ATTEMPTS: usize = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    for _ in 0..ATTEMPTS {
        let a: Vec<DMatrix<f64>> = (0..s)
            .map(|_| {
                let m = randn(&mut rng, n, n);
                let norm = spectral_norm(&m);
                m * (spectral_cap / norm)
            })
            .collect();
        let b: Vec<DMatrix<f64>> = (0..s).map(|_| randn(&mut rng, n, p)).collect();
        let q: Vec<DMatrix<f64>> = (0..s)
            .map(|_| {
                let g = randn(&mut rng, n, n);
                &g * g.transpose()
            })
            .collect();
        let r: Vec<DMatrix<f64>> = (0..s)
            .map(|_| {
                let g = randn(&mut rng, p, p);
                let mut r = &g * g.transpose();
                let low = linalg::min_sym_eigenvalue(&r);
                if low < 1e-6 {
                    for d in 0..p {
                        r[(d, d)] += 1e-6 - low;
                    }
                }
                r
            })
            .collect();
        let rows: Vec<Vec<f64>> = (0..s)
            .map(|j| {
                let alpha: Vec<f64> = (0..s).map(|i| if i == j { s as f64 } else { 1.0 }).collect();
                dirichlet_row(&mut rng, &alpha)
            })
            .collect();
        let chain = MarkovChain::from_rows(&rows)?;
        let model = MjsModel::new(a, b, chain)?;
        if mjs::is_mss(&model, &ModeController::zeros(&model), 0.0)?.mss {
            return Ok((model, CostSpec::new(q, r)?));
        }
    }
    Err(MjsError::GenerationFailed { attempts: ATTEMPTS })
}
