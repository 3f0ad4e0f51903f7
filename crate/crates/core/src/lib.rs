//! Solver for the infinite-horizon consumption-investment problem with a
//! sale-only endowed asset.
//!
//! The agent holds a bond, a frictionlessly traded hedge asset and an
//! endowed asset that can only be sold. The optimum is characterised by a
//! boundary-crossing problem for a first-order ODE: [`ode`] solves it,
//! [`params`] classifies the resulting regimes, [`policy`] reconstructs the
//! value function, certainty-equivalent price and feedback controls, and
//! [`sim`] simulates the optimal reflected wealth dynamics for Monte Carlo
//! cross-validation.

pub mod error;
pub mod ode;
pub mod params;
pub mod policy;
pub mod sim;

pub use error::{EndowError, Result};
pub use ode::{
    find_b3_crit, integrate_n, n_prime, CoefficientSet, OdeSolution, Termination,
    ToleranceOptions,
};
pub use params::{
    b2_via_identity, b3_illposed_frontier, b3_upper_bound, classify_regime, derive_aux_params,
    validate_wellposed, AuxParams, MarketParams, Regime, RegimeReport,
};
pub use policy::{
    build_g_finite_ratio, build_g_no_finite_ratio, build_transforms, BuildOptions, Policy,
    PolicyPoint, PolicySummary, ResidualReport, ShapeReport, TransformKind, TransformTables,
    VerifyThresholds,
};
pub use sim::{
    check_paths, demo_illposed, initial_lump_sale, mc_value, mc_value_refined, simulate_regime1,
    simulate_regime2, simulate_regime3, suggested_horizon, AdmissibilityReport, McSummary,
    Scheme, SimConfig, SimPath, UtilityGrowthReport,
};
