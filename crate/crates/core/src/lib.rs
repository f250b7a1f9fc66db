//! Markov jump linear systems (MJS): simulation, mean-square stability,
//! clipped least-squares identification, coupled Riccati LQR, and an
//! epoch-based certainty-equivalent adaptive controller.
//!
//! ```
//! use mjs_core::{is_mss, MarkovChain, MjsModel, ModeController};
//! use nalgebra::DMatrix;
//!
//! let chain = MarkovChain::from_rows(&[vec![0.6, 0.4], vec![0.3, 0.7]]).unwrap();
//! let model = MjsModel::autonomous(
//!     vec![DMatrix::from_element(1, 1, 1.2), DMatrix::from_element(1, 1, 0.7)],
//!     chain,
//! )
//! .unwrap();
//! let report = is_mss(&model, &ModeController::zeros(&model), 0.0).unwrap();
//! assert!(report.mss);
//! assert!((report.rho - 0.9941).abs() < 1e-3);
//! ```

pub mod adaptive;
pub mod error;
pub mod linalg;
pub mod lqr;
pub mod markov;
pub mod mjs;
pub mod model;
pub mod sysid;

pub use adaptive::{adaptive_mjs_lqr, random_model, regret, AdaptiveOptions, AdaptiveRunRecord, EpochSchedule};
pub use error::{MjsError, Result};
pub use lqr::{
    coupling, finite_horizon_cost, infinite_horizon_avg_cost, optimal_controller, solve_cdare, CdareSolution,
    CostSpec,
};
pub use markov::{estimate_transition, mixing_time, stationary_distribution, MarkovChain};
pub use mjs::{augmented_matrix, closed_loop, covariance_recursion, is_mss, rollout, simulate};
pub use model::{MjsModel, ModeController, ModelDocument, NoiseSpec, Trajectory};
pub use sysid::{estimation_error, mjs_sysid, mjs_sysid_known_b, EstimationError, SysidConfig, SysidResult};

// One module per chapter so a failing snippet names its chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/markov.md")]
    mod markov {}
    #[doc = include_str!("../../../book/src/stability.md")]
    mod stability {}
    #[doc = include_str!("../../../book/src/costs.md")]
    mod costs {}
    #[doc = include_str!("../../../book/src/riccati.md")]
    mod riccati {}
    #[doc = include_str!("../../../book/src/identification.md")]
    mod identification {}
    #[doc = include_str!("../../../book/src/adaptive.md")]
    mod adaptive {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
