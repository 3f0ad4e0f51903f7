//! Market parameters, derived auxiliary parameters and regime classification.
//!
//! The market consists of a bond paying rate `r`, a frictionlessly traded
//! hedge asset (drift `mu`, volatility `sigma`) and an endowed asset (drift
//! `alpha`, volatility `eta`, correlation `rho` with the hedge asset) that
//! can only be sold. The agent has CRRA utility with relative risk aversion
//! `R` and discount rate `beta`. The solution depends on the market only
//! through four dimensionless combinations `b1..b4` and `R`; `b1` acts as a
//! normalized discount rate, `b3` as the effective Sharpe ratio of the
//! endowed asset per unit of idiosyncratic volatility, `b2` measures how far
//! the hedging and investment motives are from cancelling, and `b4` scales
//! the value function.

use serde::Deserialize;

use crate::error::{EndowError, Result};
use crate::ode::{self, ToleranceOptions};

/// Raw model constants plus the initial position.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketParams {
    /// Risk-free rate (1/time).
    pub r: f64,
    /// Utility discount rate (1/time).
    pub beta: f64,
    /// Hedge-asset drift (1/time).
    pub mu: f64,
    /// Hedge-asset volatility (> 0).
    pub sigma: f64,
    /// Endowed-asset drift (1/time).
    pub alpha: f64,
    /// Endowed-asset volatility (> 0).
    pub eta: f64,
    /// Correlation between the two risky assets, in (-1, 1).
    pub rho: f64,
    /// Relative risk aversion, positive and different from 1.
    #[serde(rename = "R")]
    pub risk_aversion: f64,
    /// Initial liquid wealth (>= 0).
    pub x0: f64,
    /// Initial endowed-asset price (> 0).
    pub y0: f64,
    /// Initial endowed-asset quantity (>= 0).
    pub theta0: f64,
}

impl MarketParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.r,
            self.beta,
            self.mu,
            self.sigma,
            self.alpha,
            self.eta,
            self.rho,
            self.risk_aversion,
            self.x0,
            self.y0,
            self.theta0,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(EndowError::InvalidParams("non-finite input".into()));
        }
        if self.sigma <= 0.0 {
            return Err(EndowError::InvalidParams(format!("sigma = {} <= 0", self.sigma)));
        }
        if self.eta <= 0.0 {
            return Err(EndowError::InvalidParams(format!("eta = {} <= 0", self.eta)));
        }
        if self.rho.abs() >= 1.0 {
            return Err(EndowError::InvalidParams(format!("|rho| = {} >= 1", self.rho.abs())));
        }
        let ra = self.risk_aversion;
        if ra <= 0.0 || ra == 1.0 {
            return Err(EndowError::InvalidParams(format!(
                "risk aversion R = {ra} must be positive and != 1"
            )));
        }
        if self.x0 < 0.0 {
            return Err(EndowError::InvalidParams(format!("x0 = {} < 0", self.x0)));
        }
        if self.y0 <= 0.0 {
            return Err(EndowError::InvalidParams(format!("y0 = {} <= 0", self.y0)));
        }
        if self.theta0 < 0.0 {
            return Err(EndowError::InvalidParams(format!("theta0 = {} < 0", self.theta0)));
        }
        if self.x0 + self.y0 * self.theta0 <= 0.0 {
            return Err(EndowError::InvalidParams("x0 + y0*theta0 must be positive".into()));
        }
        Ok(())
    }

    /// Canonical market embedding of a quadruple of auxiliary parameters.
    ///
    /// Many quantities (the critical ratio, the value function, the
    /// certainty-equivalent price) depend on the market only through
    /// `(b1, b2, b3, b4, R)`. For workflows that start from those
    /// parameters this constructor picks one market consistent with them:
    /// `rho = 0`, `sigma = 1`, `r = 0.02`, and then
    /// `eta = sqrt(2/b4)`, `lambda = eta*R*sqrt(b2-1)`, `zeta = b3*eta/2`.
    /// When `b4` is omitted it defaults to `b1/R`, which normalizes
    /// `g(0) = 1`.
    pub fn from_aux(
        b1: f64,
        b2: f64,
        b3: f64,
        risk_aversion: f64,
        b4: Option<f64>,
        x0: f64,
        y0: f64,
        theta0: f64,
    ) -> Result<Self> {
        let ra = risk_aversion;
        if !(ra > 0.0) || ra == 1.0 || !ra.is_finite() {
            return Err(EndowError::InvalidParams(format!(
                "risk aversion R = {ra} must be positive and != 1"
            )));
        }
        let b4 = b4.unwrap_or(b1 / ra);
        if !(b4 > 0.0) {
            return Err(EndowError::InvalidParams(format!("b4 = {b4} must be positive")));
        }
        // Tiny negative b2-1 from roundoff is clamped; a genuinely smaller
        // b2 is unreachable from any market.
        let b2m1 = b2 - 1.0;
        if b2m1 < -1e-12 {
            return Err(EndowError::InvalidParams(format!("b2 = {b2} < 1 is unreachable")));
        }
        let r = 0.02;
        let sigma = 1.0;
        let eta = (2.0 / b4).sqrt();
        let lambda = eta * ra * b2m1.max(0.0).sqrt();
        let zeta = 0.5 * b3 * eta;
        let beta = b1 / b4 + r * (1.0 - ra) + lambda * lambda * (1.0 - ra) / (2.0 * ra);
        let mp = MarketParams {
            r,
            beta,
            mu: r + lambda * sigma,
            sigma,
            alpha: r + zeta * eta,
            eta,
            rho: 0.0,
            risk_aversion: ra,
            x0,
            y0,
            theta0,
        };
        mp.validate()?;
        Ok(mp)
    }

    /// Hedge-asset Sharpe ratio (mu - r)/sigma.
    pub fn lambda(&self) -> f64 {
        (self.mu - self.r) / self.sigma
    }

    /// Endowed-asset Sharpe ratio (alpha - r)/eta.
    pub fn zeta(&self) -> f64 {
        (self.alpha - self.r) / self.eta
    }
}

/// Derived dimensionless parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxParams {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    /// Hedge-asset Sharpe ratio.
    pub lambda: f64,
    /// Endowed-asset Sharpe ratio.
    pub zeta: f64,
}

impl AuxParams {
    /// Direct construction from the b-parameters under the canonical
    /// embedding of [`MarketParams::from_aux`].
    pub fn from_b(b1: f64, b2: f64, b3: f64, b4: f64, risk_aversion: f64) -> Result<Self> {
        let mp = MarketParams::from_aux(b1, b2, b3, risk_aversion, Some(b4), 1.0, 1.0, 1.0)?;
        Ok(AuxParams {
            b1,
            b2,
            b3,
            b4,
            lambda: mp.lambda(),
            zeta: mp.zeta(),
        })
    }

    /// True iff the non-degeneracy condition b1 > 0 holds.
    pub fn is_wellposed(&self) -> bool {
        self.b1 > 0.0
    }
}

/// Compute the auxiliary parameters from raw market constants.
pub fn derive_aux_params(mp: &MarketParams) -> Result<AuxParams> {
    mp.validate()?;
    let ra = mp.risk_aversion;
    let lambda = mp.lambda();
    let zeta = mp.zeta();
    let omr2 = 1.0 - mp.rho * mp.rho;
    let b4 = 2.0 / (mp.eta * mp.eta * omr2);
    let b1 = b4 * (mp.beta - mp.r * (1.0 - ra) - lambda * lambda * (1.0 - ra) / (2.0 * ra));
    let b2 = (lambda * lambda - 2.0 * ra * mp.eta * mp.rho * lambda
        + mp.eta * mp.eta * ra * ra)
        / (mp.eta * mp.eta * ra * ra * omr2);
    let b3 = 2.0 * (zeta - lambda * mp.rho) / (mp.eta * omr2);
    Ok(AuxParams {
        b1,
        b2,
        b3,
        b4,
        lambda,
        zeta,
    })
}

/// Cross-check for b2 via the sum-of-squares identity
/// b2 = 1 + (lambda/(eta R) - rho)^2 / (1 - rho^2).
pub fn b2_via_identity(mp: &MarketParams) -> f64 {
    let d = mp.lambda() / (mp.eta * mp.risk_aversion) - mp.rho;
    1.0 + d * d / (1.0 - mp.rho * mp.rho)
}

/// Returns an error unless the non-degeneracy condition b1 > 0 holds.
pub fn validate_wellposed(ap: &AuxParams, _risk_aversion: f64) -> Result<()> {
    if ap.b1 > 0.0 {
        Ok(())
    } else {
        Err(EndowError::DegenerateMerton { b1: ap.b1 })
    }
}

/// Optimal-behaviour regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// b3 <= 0: sell the entire endowed holding at time zero.
    SellAll,
    /// 0 < b3 < b3_crit: sales keep the wealth ratio below a finite z*.
    FiniteRatio,
    /// b3 >= b3_crit (and below the ill-posed frontier when R < 1): no sales
    /// until liquid wealth is exhausted; z* is infinite.
    NoFiniteRatio,
    /// R < 1 and b3 >= b1/(1-R) + b2*R: the value function is infinite.
    IllPosed,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::SellAll => "SellAll",
            Regime::FiniteRatio => "FiniteRatio",
            Regime::NoFiniteRatio => "NoFiniteRatio",
            Regime::IllPosed => "IllPosed",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Classification result with supporting diagnostics.
#[derive(Debug, Clone)]
pub struct RegimeReport {
    pub regime: Regime,
    /// Critical effective Sharpe ratio; only populated when the
    /// classification actually required the bisection.
    pub b3_crit: Option<f64>,
    /// First crossing point of the boundary ODE, in [0, 1].
    pub qstar: f64,
    /// Value of the ODE solution at the crossing (or at the right endpoint).
    pub n_qstar: f64,
    /// Diagnostics.
    pub notes: String,
}

impl RegimeReport {
    /// Critical wealth ratio z* = q*/(1-q*); infinite when q* = 1.
    pub fn zstar(&self) -> f64 {
        if self.qstar >= 1.0 {
            f64::INFINITY
        } else {
            self.qstar / (1.0 - self.qstar)
        }
    }
}

/// Upper bound for the critical effective Sharpe ratio at given (b1, R).
pub fn b3_upper_bound(b1: f64, risk_aversion: f64) -> f64 {
    let ra = risk_aversion;
    if ra > 1.0 {
        2.0 * ra
    } else {
        (2.0 * ra).min(ra + b1 / (1.0 - ra))
    }
}

/// Ill-posedness frontier in b3 for R < 1 (infinite for R > 1).
pub fn b3_illposed_frontier(ap: &AuxParams, risk_aversion: f64) -> f64 {
    let ra = risk_aversion;
    if ra < 1.0 {
        ap.b1 / (1.0 - ra) + ap.b2 * ra
    } else {
        f64::INFINITY
    }
}

/// Classify the regime for a well-posed parameter set.
///
/// Boundary conventions: b3 = 0 is `SellAll`, b3 = b3_crit is
/// `NoFiniteRatio`, and for R < 1 equality on the ill-posed frontier is
/// `IllPosed`. The bisection for b3_crit only runs when the cheap bounds
/// R < b3_crit <= b3_upper_bound cannot already decide.
pub fn classify_regime(ap: &AuxParams, risk_aversion: f64) -> Result<RegimeReport> {
    validate_wellposed(ap, risk_aversion)?;
    let ra = risk_aversion;
    if ap.b3 <= 0.0 {
        return Ok(RegimeReport {
            regime: Regime::SellAll,
            b3_crit: None,
            qstar: 0.0,
            n_qstar: 1.0,
            notes: "b3 <= 0: endowed asset is never worth holding".into(),
        });
    }
    if ra < 1.0 && ap.b3 >= b3_illposed_frontier(ap, ra) {
        return Ok(RegimeReport {
            regime: Regime::IllPosed,
            b3_crit: None,
            qstar: 1.0,
            n_qstar: 0.0,
            notes: "b3 >= b1/(1-R) + b2*R with R < 1: value function infinite".into(),
        });
    }

    let cs = ode::CoefficientSet::new(ap.b1, ap.b2, ap.b3, ra)?;
    let sol = ode::integrate_n(&cs, &ToleranceOptions::default())?;
    let bbar = b3_upper_bound(ap.b1, ra);

    if ap.b3 <= ra {
        // b3_crit always exceeds R, so no bisection is needed here.
        return Ok(RegimeReport {
            regime: Regime::FiniteRatio,
            b3_crit: None,
            qstar: sol.qstar,
            n_qstar: sol.n_qstar,
            notes: "b3 <= R < b3_crit".into(),
        });
    }
    if ap.b3 >= bbar {
        return Ok(RegimeReport {
            regime: Regime::NoFiniteRatio,
            b3_crit: None,
            qstar: 1.0,
            n_qstar: sol.n_qstar,
            notes: format!("b3 >= upper bound {bbar} >= b3_crit"),
        });
    }
    let b3c = ode::find_b3_crit(ap.b1, ap.b2, ra, 1e-6)?;
    if ap.b3 < b3c {
        Ok(RegimeReport {
            regime: Regime::FiniteRatio,
            b3_crit: Some(b3c),
            qstar: sol.qstar,
            n_qstar: sol.n_qstar,
            notes: String::new(),
        })
    } else {
        Ok(RegimeReport {
            regime: Regime::NoFiniteRatio,
            b3_crit: Some(b3c),
            qstar: 1.0,
            n_qstar: sol.n_qstar,
            notes: String::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_market() -> MarketParams {
        MarketParams {
            r: 0.02,
            beta: 0.10,
            mu: 0.07,
            sigma: 0.30,
            alpha: 0.05,
            eta: 0.40,
            rho: 0.30,
            risk_aversion: 0.5,
            x0: 1.0,
            y0: 1.0,
            theta0: 1.0,
        }
    }

    #[test]
    fn aux_params_reference_values() {
        // Frozen from an independent one-off evaluation of the defining
        // formulas.
        let ap = derive_aux_params(&spec_market()).unwrap();
        assert!((ap.lambda - 1.0 / 6.0).abs() < 1e-15);
        assert!((ap.zeta - 0.075).abs() < 1e-15);
        assert!((ap.b1 - 1.0454822954822953).abs() < 1e-12);
        assert!((ap.b2 - 1.3125763125763128).abs() < 1e-12);
        assert!((ap.b3 - 0.13736263736263732).abs() < 1e-12);
        assert!((ap.b4 - 13.736263736263734).abs() < 1e-11);
    }

    #[test]
    fn b2_identity_cross_check() {
        let mp = spec_market();
        let ap = derive_aux_params(&mp).unwrap();
        let rel = (ap.b2 - b2_via_identity(&mp)).abs() / ap.b2;
        assert!(rel < 1e-12);
        assert!(ap.b2 >= 1.0 - 1e-12);
    }

    #[test]
    fn b2_is_one_without_hedging_or_investment_motive() {
        let mut mp = spec_market();
        mp.mu = mp.r; // lambda = 0
        mp.rho = 0.0;
        let ap = derive_aux_params(&mp).unwrap();
        assert!((ap.b2 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn b3_vanishes_when_excess_return_is_pure_correlation() {
        let mut mp = spec_market();
        // alpha = r + lambda*eta*rho makes zeta = lambda*rho.
        mp.alpha = mp.r + mp.lambda() * mp.eta * mp.rho;
        let ap = derive_aux_params(&mp).unwrap();
        assert!(ap.b3.abs() < 1e-14);
    }

    #[test]
    fn wellposedness_gate() {
        let mut ap = derive_aux_params(&spec_market()).unwrap();
        assert!(validate_wellposed(&ap, 0.5).is_ok());
        ap.b1 = 0.0;
        assert!(matches!(
            validate_wellposed(&ap, 0.5),
            Err(EndowError::DegenerateMerton { .. })
        ));
        ap.b1 = -0.3;
        assert!(matches!(
            validate_wellposed(&ap, 0.5),
            Err(EndowError::DegenerateMerton { .. })
        ));
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut mp = spec_market();
        mp.sigma = 0.0;
        assert!(matches!(derive_aux_params(&mp), Err(EndowError::InvalidParams(_))));
        let mut mp = spec_market();
        mp.rho = 1.0;
        assert!(matches!(derive_aux_params(&mp), Err(EndowError::InvalidParams(_))));
        let mut mp = spec_market();
        mp.risk_aversion = 1.0;
        assert!(matches!(derive_aux_params(&mp), Err(EndowError::InvalidParams(_))));
        let mut mp = spec_market();
        mp.risk_aversion = -0.5;
        assert!(matches!(derive_aux_params(&mp), Err(EndowError::InvalidParams(_))));
    }

    #[test]
    fn classify_examples() {
        let ap = AuxParams::from_b(1.0, 1.3, -0.5, 2.0, 0.5).unwrap();
        let rep = classify_regime(&ap, 0.5).unwrap();
        assert_eq!(rep.regime, Regime::SellAll);
        assert_eq!(rep.qstar, 0.0);

        let ap = AuxParams::from_b(1.0, 1.3125763125763128, 0.13736263736263732, 2.0, 0.5).unwrap();
        let rep = classify_regime(&ap, 0.5).unwrap();
        assert_eq!(rep.regime, Regime::FiniteRatio);
        assert!(rep.qstar > 0.0 && rep.qstar < 1.0);
        // fast path: b3 <= R, so no bisection ran
        assert!(rep.b3_crit.is_none());

        // b1/(1-R) + b2*R = 2.5 <= 2.6 with R = 0.5: ill-posed.
        let ap = AuxParams::from_b(1.0, 1.0, 2.6, 2.0, 0.5).unwrap();
        let rep = classify_regime(&ap, 0.5).unwrap();
        assert_eq!(rep.regime, Regime::IllPosed);
    }

    #[test]
    fn classify_boundary_flips() {
        // Across b3 = 0 the regime flips SellAll <-> FiniteRatio.
        let ap = AuxParams::from_b(1.0, 1.3, -1e-4, 2.0, 0.5).unwrap();
        assert_eq!(classify_regime(&ap, 0.5).unwrap().regime, Regime::SellAll);
        let ap = AuxParams::from_b(1.0, 1.3, 1e-4, 2.0, 0.5).unwrap();
        assert_eq!(classify_regime(&ap, 0.5).unwrap().regime, Regime::FiniteRatio);

        // Across b3_crit the regime flips FiniteRatio <-> NoFiniteRatio.
        let b3c = ode::find_b3_crit(1.0, 2.0, 0.5, 1e-7).unwrap();
        let ap = AuxParams::from_b(1.0, 2.0, b3c - 1e-4, 2.0, 0.5).unwrap();
        assert_eq!(classify_regime(&ap, 0.5).unwrap().regime, Regime::FiniteRatio);
        let ap = AuxParams::from_b(1.0, 2.0, b3c + 1e-4, 2.0, 0.5).unwrap();
        assert_eq!(classify_regime(&ap, 0.5).unwrap().regime, Regime::NoFiniteRatio);
    }

    #[test]
    fn aux_embedding_round_trips() {
        // Deriving aux parameters from the canonical embedding returns the
        // original quadruple.
        let (b1, b2, b3, ra) = (1.3, 1.7, 0.45, 0.5);
        let mp = MarketParams::from_aux(b1, b2, b3, ra, None, 1.0, 1.0, 1.0).unwrap();
        let ap = derive_aux_params(&mp).unwrap();
        assert!((ap.b1 - b1).abs() < 1e-12);
        assert!((ap.b2 - b2).abs() < 1e-12);
        assert!((ap.b3 - b3).abs() < 1e-12);
        assert!((ap.b4 - b1 / ra).abs() < 1e-12);
    }
}
