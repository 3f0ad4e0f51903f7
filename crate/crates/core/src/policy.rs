//! Value-function reconstruction and feedback policies.
//!
//! Everything downstream of the boundary ODE is exact algebra in the state
//! (q, 1-q, n(q), n'(q)) once the monotone change of variables between
//! u = ln z (log wealth ratio) and q (fraction of total wealth in the
//! endowed asset) is available:
//!
//!   N(q)    = n(q)^(-R) (1-q)^(R-1),           h* = N(q*)
//!   g(z)    = g0 N(q(z)),                       g0 = (b1/(b4 R))^(-R)
//!   z g'(z) = g0 (1-R) N q
//!   z^2 g'' = z g' (w'(N) - 1),  w'(s) = (1-R) q + (1-R)/nu,
//!                                 nu = N'/N = -R n'/n + (1-R)/(1-q)
//!   C/x     = (b1/(b4 R)) n/(1-q)
//!
//! with the no-sale region parameterized by the ODE solution and the sale
//! region (z > z*) by the same algebra with n frozen at n(q*), q = z/(1+z)
//! and n' = 0. The change of variables solves du/dq = nu/((1-R) q); its
//! log-singular parts at q = 0 and q = 1 are integrated in closed form and
//! only the regular remainder P(q) is carried numerically by the ODE run.

use crate::error::{EndowError, Result};
use crate::ode::{self, CoefficientSet, OdeSolution, Termination, ToleranceOptions};
use crate::params::{
    classify_regime, derive_aux_params, validate_wellposed, AuxParams, MarketParams, Regime,
    RegimeReport,
};

/// Which branch of the construction a set of transforms belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    /// Interior crossing: finite critical ratio.
    FiniteRatio,
    /// No interior crossing: sales only at zero liquid wealth.
    NoFiniteRatio,
}

/// Free-boundary transform tables built from one ODE solution.
#[derive(Debug, Clone)]
pub struct TransformTables {
    pub kind: TransformKind,
    pub ra: f64,
    /// ODE grid and solution values.
    pub qs: Vec<f64>,
    pub ns: Vec<f64>,
    pub fs: Vec<f64>,
    /// N(q) at the grid nodes.
    pub ngrid: Vec<f64>,
    /// u = ln z at the grid nodes.
    pub us: Vec<f64>,
    pub qstar: f64,
    pub n_qstar: f64,
    /// h* = N(q*) (finite-ratio case).
    pub hstar: f64,
    /// z* = q*/(1-q*); infinite in the no-finite-ratio case.
    pub zstar: f64,
    /// u* = ln z*; infinite in the no-finite-ratio case.
    pub ustar: f64,
    /// n'(0).
    pub chi0: f64,
    /// N'(0) = (1-R) - R n'(0).
    pub nu0: f64,
    /// Anchor constant of the u(q) map.
    anchor: f64,
    sol: OdeSolution,
}

impl TransformTables {
    /// Closed-form singular part of the u(q) map.
    fn a_part(&self, q: f64) -> f64 {
        (self.nu0 / (1.0 - self.ra)) * q.ln() - (1.0 - q).ln()
    }

    /// u(q) for q within the ODE grid.
    pub fn u_of_q(&self, q: f64) -> f64 {
        self.a_part(q) + self.sol.eval_p(q) + self.anchor
    }

    /// du/dq = nu/((1-R) q), evaluated from the dense solution.
    pub fn du_dq(&self, q: f64) -> f64 {
        let n = self.sol.eval_n(q);
        let f = self.sol.cs.f_rhs(q, n);
        1.0 / (q * (1.0 - q)) - self.ra * f / (n * (1.0 - self.ra) * q)
    }

    /// n(q) by dense Hermite evaluation.
    pub fn n_of_q(&self, q: f64) -> f64 {
        self.sol.eval_n(q)
    }

    /// N(q) from the dense solution.
    pub fn big_n(&self, q: f64) -> f64 {
        let n = self.sol.eval_n(q);
        n.powf(-self.ra) * (1.0 - q).powf(self.ra - 1.0)
    }

    /// W(s): inverse of N, by bracketed Newton polish on the stored grid.
    pub fn w_inverse(&self, s: f64) -> f64 {
        let incr = self.ra < 1.0;
        let grid = &self.ngrid;
        let len = grid.len();
        // locate bracketing interval (N monotone on the grid)
        let cmp = |v: f64| if incr { v } else { -v };
        let target = cmp(s);
        if target <= cmp(grid[0]) {
            return self.qs[0];
        }
        if target >= cmp(grid[len - 1]) {
            return *self.qs.last().unwrap();
        }
        let mut lo = 0;
        let mut hi = len - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if cmp(grid[mid]) <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (mut qa, mut qb) = (self.qs[lo], self.qs[hi]);
        let t = (target - cmp(grid[lo])) / (cmp(grid[hi]) - cmp(grid[lo]));
        let mut q = qa + t * (qb - qa);
        // safeguarded Newton on N(q) - s
        for _ in 0..60 {
            let n = self.sol.eval_n(q);
            let f = self.sol.cs.f_rhs(q, n);
            let big = n.powf(-self.ra) * (1.0 - q).powf(self.ra - 1.0);
            let nu = -self.ra * f / n + (1.0 - self.ra) / (1.0 - q);
            let resid = big - s;
            if cmp(big) > target {
                qb = q;
            } else {
                qa = q;
            }
            if resid.abs() <= 1e-12 * (1.0 + s.abs()) {
                break;
            }
            let step = resid / (big * nu);
            let mut qn = q - step;
            if !(qn > qa && qn < qb) {
                qn = 0.5 * (qa + qb);
            }
            if (qn - q).abs() <= 1e-16 * q.abs().max(1e-300) {
                q = qn;
                break;
            }
            q = qn;
        }
        q
    }

    /// w(s) = (1-R) s W(s).
    pub fn w_fun(&self, s: f64) -> f64 {
        (1.0 - self.ra) * s * self.w_inverse(s)
    }
}

/// Build the transform tables for a regime 2/3 solution.
pub fn build_transforms(sol: &OdeSolution, _ap: &AuxParams, ra: f64) -> Result<TransformTables> {
    if sol.qgrid.len() < 4 {
        return Err(EndowError::InvalidParams(
            "ODE solution has no interior grid (regime 1?)".into(),
        ));
    }
    let kind = match sol.terminated_by {
        Termination::CrossedM if sol.qstar < 1.0 && sol.qstar > 0.0 => TransformKind::FiniteRatio,
        Termination::CrossedM => {
            return Err(EndowError::InvalidParams(
                "trivial crossing at q = 0 has no transforms".into(),
            ))
        }
        _ => TransformKind::NoFiniteRatio,
    };
    let chi0 = sol.chi0;
    let nu0 = (1.0 - ra) - ra * chi0;
    let ngrid: Vec<f64> = sol
        .qgrid
        .iter()
        .zip(&sol.nvals)
        .map(|(&q, &n)| n.max(1e-300).powf(-ra) * (1.0 - q).powf(ra - 1.0))
        .collect();
    // strict monotonicity of N in the (1-R) order
    let sgn = if ra < 1.0 { 1.0 } else { -1.0 };
    for i in 1..ngrid.len() {
        if sgn * (ngrid[i] - ngrid[i - 1]) <= 0.0 {
            return Err(EndowError::MonotonicityViolation(format!(
                "N not strictly monotone between q = {} and q = {}",
                sol.qgrid[i - 1],
                sol.qgrid[i]
            )));
        }
    }

    let a_part = |q: f64| (nu0 / (1.0 - ra)) * q.ln() - (1.0 - q).ln();
    let (qstar, n_qstar, hstar, zstar, ustar, anchor);
    match kind {
        TransformKind::FiniteRatio => {
            qstar = sol.qstar;
            n_qstar = sol.n_qstar;
            hstar = n_qstar.powf(-ra) * (1.0 - qstar).powf(ra - 1.0);
            zstar = qstar / (1.0 - qstar);
            ustar = zstar.ln();
            anchor = ustar - a_part(qstar) - *sol.pvals.last().unwrap();
        }
        TransformKind::NoFiniteRatio => {
            qstar = 1.0;
            n_qstar = sol.n_end().max(1e-300);
            hstar = f64::INFINITY;
            zstar = f64::INFINITY;
            ustar = f64::INFINITY;
            // Anchor at the right endpoint: u(q_end) = -ln(1-q_end) - I/(1-R)
            // where I is the first-order completion of the improper
            // integral over (q_end, 1).
            let q_end = sol.q_last();
            let f_end = *sol.fvals.last().unwrap();
            let n_end = sol.n_end().max(1e-300);
            let fval = (1.0 - ra) - ra * (1.0 - q_end) * f_end / n_end;
            let i_tail = fval * (-q_end.ln());
            let u_end = -(1.0 - q_end).ln() - i_tail / (1.0 - ra);
            anchor = u_end - a_part(q_end) - *sol.pvals.last().unwrap();
        }
    }

    let tt = TransformTables {
        kind,
        ra,
        qs: sol.qgrid.clone(),
        ns: sol.nvals.clone(),
        fs: sol.fvals.clone(),
        ngrid,
        us: Vec::new(),
        qstar,
        n_qstar,
        hstar,
        zstar,
        ustar,
        chi0,
        nu0,
        anchor,
        sol: sol.clone(),
    };
    let mut tt = tt;
    tt.us = tt.qs.iter().map(|&q| tt.u_of_q(q)).collect();
    // boundary identity of the finite-ratio case (construction contract)
    if kind == TransformKind::FiniteRatio {
        let lhs = tt.n_qstar.powf(-ra);
        let rhs = tt.hstar * (1.0 - tt.qstar).powf(1.0 - ra);
        if ((lhs - rhs) / lhs).abs() > 1e-10 {
            return Err(EndowError::MonotonicityViolation(format!(
                "free-boundary identity violated: {lhs} vs {rhs}"
            )));
        }
    }
    Ok(tt)
}

/// Uniform-in-u resample of the transform map for O(1) evaluation.
#[derive(Debug, Clone)]
struct UniTable {
    u0: f64,
    du: f64,
    q: Vec<f64>,
    dqdu: Vec<f64>,
    n: Vec<f64>,
    dndu: Vec<f64>,
}

impl UniTable {
    fn eval(&self, u: f64) -> (f64, f64) {
        let t = (u - self.u0) / self.du;
        let i = (t.floor() as usize).min(self.q.len() - 2);
        let s = t - i as f64;
        let h = self.du;
        let hermite = |y0: f64, y1: f64, d0: f64, d1: f64| {
            let s2 = s * s;
            let s3 = s2 * s;
            y0 * (2.0 * s3 - 3.0 * s2 + 1.0)
                + d0 * h * (s3 - 2.0 * s2 + s)
                + y1 * (-2.0 * s3 + 3.0 * s2)
                + d1 * h * (s3 - s2)
        };
        (
            hermite(self.q[i], self.q[i + 1], self.dqdu[i], self.dqdu[i + 1]),
            hermite(self.n[i], self.n[i + 1], self.dndu[i], self.dndu[i + 1]),
        )
    }

}

/// Point on the solution manifold used by all policy algebra.
#[derive(Debug, Clone, Copy)]
pub struct PolicyPoint {
    pub q: f64,
    /// 1 - q, tracked separately so the deep tail keeps full precision.
    pub omq: f64,
    pub n: f64,
    /// n'(q).
    pub f: f64,
}

/// Solved policy for one parameter set: the value-shape function g, its
/// derivatives, the critical ratio and the feedback controls.
#[derive(Debug, Clone)]
pub struct Policy {
    pub report: RegimeReport,
    pub mp: MarketParams,
    pub aux: AuxParams,
    pub ra: f64,
    /// g(0) = (b1/(b4 R))^(-R).
    pub g0: f64,
    /// Critical wealth ratio: 0 when every holding is sold immediately,
    /// finite in the finite-ratio regime, infinite otherwise.
    pub zstar: f64,
    pub transforms: Option<TransformTables>,
    uni: Option<UniTable>,
    /// n at the crossing (regime 2), at the right endpoint (regime 3), or 1.
    n_ref: f64,
    f_end: f64,
    /// 1 - q at the right endpoint of the grid (regime 3 tail anchor).
    omq_end: f64,
    u_end: f64,
    u_lo: f64,
    q_lo: f64,
}

/// Construction options.
#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    pub tol: ToleranceOptions,
    /// Use the reduced equation with the square-root term forced to zero.
    /// Only valid for b2 = 1; exists to cross-check the reduction.
    pub force_upsilon_zero: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            tol: ToleranceOptions::tight(),
            force_upsilon_zero: false,
        }
    }
}

impl Policy {
    pub fn build(mp: &MarketParams) -> Result<Policy> {
        Self::build_with(mp, &BuildOptions::default())
    }

    pub fn build_with(mp: &MarketParams, opts: &BuildOptions) -> Result<Policy> {
        let aux = derive_aux_params(mp)?;
        let ra = mp.risk_aversion;
        validate_wellposed(&aux, ra)?;
        let report = classify_regime(&aux, ra)?;
        let g0 = (aux.b1 / (aux.b4 * ra)).powf(-ra);
        match report.regime {
            Regime::IllPosed => Err(EndowError::IllPosedValue),
            Regime::SellAll => Ok(Policy {
                report,
                mp: *mp,
                aux,
                ra,
                g0,
                zstar: 0.0,
                transforms: None,
                uni: None,
                n_ref: 1.0,
                f_end: 0.0,
                omq_end: 0.0,
                u_end: f64::INFINITY,
                u_lo: f64::NEG_INFINITY,
                q_lo: 0.0,
            }),
            Regime::FiniteRatio | Regime::NoFiniteRatio => {
                let mut cs = CoefficientSet::new(aux.b1, aux.b2, aux.b3, ra)?;
                if opts.force_upsilon_zero {
                    if (aux.b2 - 1.0).abs() > 1e-9 {
                        return Err(EndowError::InvalidParams(
                            "reduced equation is only valid for b2 = 1".into(),
                        ));
                    }
                    cs.force_upsilon_zero = true;
                }
                let sol = ode::integrate_n(&cs, &opts.tol)?;
                let tt = build_transforms(&sol, &aux, ra)?;
                // refresh the crossing diagnostics from the tight run
                let mut report = report;
                report.qstar = sol.qstar;
                report.n_qstar = sol.n_qstar;
                match tt.kind {
                    TransformKind::FiniteRatio => build_g_finite_ratio(tt, &aux, ra, mp, report),
                    TransformKind::NoFiniteRatio => {
                        build_g_no_finite_ratio(&sol, tt, &aux, ra, mp, report)
                    }
                }
            }
        }
    }

    fn from_transforms(
        tt: TransformTables,
        aux: &AuxParams,
        ra: f64,
        mp: &MarketParams,
        report: RegimeReport,
    ) -> Result<Policy> {
        let g0 = (aux.b1 / (aux.b4 * ra)).powf(-ra);
        let u_lo = tt.us[0];
        let q_lo = tt.qs[0];
        let u_hi = match tt.kind {
            TransformKind::FiniteRatio => tt.ustar,
            TransformKind::NoFiniteRatio => *tt.us.last().unwrap(),
        };
        if !(u_hi > u_lo) {
            return Err(EndowError::IntegrationFailure(format!(
                "empty u range [{u_lo}, {u_hi}]"
            )));
        }
        let m = (((u_hi - u_lo) / 5e-4).ceil() as usize).clamp(8192, 40000);
        let du = (u_hi - u_lo) / m as f64;
        let mut qv = Vec::with_capacity(m + 1);
        let mut dqv = Vec::with_capacity(m + 1);
        let mut nv = Vec::with_capacity(m + 1);
        let mut dnv = Vec::with_capacity(m + 1);
        let mut node = 0usize;
        for j in 0..=m {
            let uj = u_lo + du * j as f64;
            while node + 2 < tt.us.len() && tt.us[node + 1] < uj {
                node += 1;
            }
            let (ua, ub) = (tt.us[node], tt.us[node + 1]);
            let (qa, qb) = (tt.qs[node], tt.qs[node + 1]);
            let mut q = if ub > ua {
                qa + (qb - qa) * ((uj - ua) / (ub - ua)).clamp(0.0, 1.0)
            } else {
                qa
            };
            // Newton polish of u(q) = uj within the node bracket
            let (mut lo, mut hi) = (qa, qb);
            for _ in 0..40 {
                let resid = tt.u_of_q(q) - uj;
                if resid > 0.0 {
                    hi = q;
                } else {
                    lo = q;
                }
                if resid.abs() < 1e-13 * uj.abs().max(1.0) {
                    break;
                }
                let d = tt.du_dq(q);
                let mut qn = q - resid / d;
                if !(qn > lo && qn < hi) {
                    qn = 0.5 * (lo + hi);
                }
                if (qn - q).abs() <= f64::EPSILON * q.abs() {
                    q = qn;
                    break;
                }
                q = qn;
            }
            let n = tt.sol.eval_n(q);
            let f = tt.sol.cs.f_rhs(q, n);
            let dqdu = 1.0 / tt.du_dq(q);
            qv.push(q);
            dqv.push(dqdu);
            nv.push(n);
            dnv.push(f * dqdu);
        }
        // exact endpoints
        if tt.kind == TransformKind::FiniteRatio {
            *qv.last_mut().unwrap() = tt.qstar;
            *nv.last_mut().unwrap() = tt.n_qstar;
        }
        let omq_end = 1.0 - *tt.qs.last().unwrap();
        let f_end = *tt.fs.last().unwrap();
        let n_ref = match tt.kind {
            TransformKind::FiniteRatio => tt.n_qstar,
            TransformKind::NoFiniteRatio => *tt.ns.last().unwrap(),
        };
        Ok(Policy {
            report,
            mp: *mp,
            aux: *aux,
            ra,
            g0,
            zstar: tt.zstar,
            u_end: u_hi,
            u_lo,
            q_lo,
            n_ref,
            f_end,
            omq_end,
            uni: Some(UniTable {
                u0: u_lo,
                du,
                q: qv,
                dqdu: dqv,
                n: nv,
                dndu: dnv,
            }),
            transforms: Some(tt),
        })
    }

    /// Resolve the manifold point backing z = y*theta/x.
    pub fn state(&self, z: f64) -> PolicyPoint {
        let ra = self.ra;
        if self.report.regime == Regime::SellAll {
            // value shape is the frictionless one: n = 1, q = z/(1+z)
            let q = z / (1.0 + z);
            return PolicyPoint {
                q,
                omq: 1.0 / (1.0 + z),
                n: 1.0,
                f: 0.0,
            };
        }
        if z <= 0.0 {
            return PolicyPoint {
                q: 0.0,
                omq: 1.0,
                n: 1.0,
                f: self.transforms.as_ref().map_or(0.0, |t| t.chi0),
            };
        }
        let u = z.ln();
        let tt = self.transforms.as_ref().expect("non-trivial regime");
        if u >= self.u_end {
            match tt.kind {
                TransformKind::FiniteRatio => {
                    // sale region: frozen n, q = z/(1+z)
                    let q = z / (1.0 + z);
                    PolicyPoint {
                        q,
                        omq: 1.0 / (1.0 + z),
                        n: self.n_ref,
                        f: 0.0,
                    }
                }
                TransformKind::NoFiniteRatio => {
                    // exponential tail: 1-q decays like 1/z
                    let omq = self.omq_end * (-(u - self.u_end)).exp();
                    PolicyPoint {
                        q: 1.0 - omq,
                        omq,
                        n: self.n_ref,
                        f: self.f_end,
                    }
                }
            }
        } else if u <= self.u_lo {
            // power-law approach to the frictionless point
            let q = self.q_lo * ((u - self.u_lo) * (1.0 - ra) / tt.nu0).exp();
            PolicyPoint {
                q,
                omq: 1.0 - q,
                n: 1.0 + tt.chi0 * q,
                f: tt.chi0,
            }
        } else {
            let (q, n) = self.uni.as_ref().unwrap().eval(u);
            PolicyPoint {
                q,
                omq: 1.0 - q,
                n,
                f: tt.sol.cs.f_rhs(q, n),
            }
        }
    }

    /// N at a manifold point.
    fn big_n_at(&self, p: &PolicyPoint) -> f64 {
        p.n.powf(-self.ra) * p.omq.powf(self.ra - 1.0)
    }

    /// w'(N(q)) - 1 at a manifold point, in the form that keeps full
    /// precision as q -> 1 (the direct expression cancels there).
    fn wprime_m1_at(&self, p: &PolicyPoint) -> f64 {
        let ra = self.ra;
        let d = (1.0 - ra) * p.n - ra * p.f * p.omq;
        ra * (p.f * p.omq * (ra + (1.0 - ra) * p.omq) - (1.0 - ra) * p.n * p.q) / d
    }

    /// w'(N(q)) at a manifold point.
    fn wprime_at(&self, p: &PolicyPoint) -> f64 {
        1.0 + self.wprime_m1_at(p)
    }

    pub fn g(&self, z: f64) -> f64 {
        let p = self.state(z);
        self.g0 * self.big_n_at(&p)
    }

    /// z g'(z).
    pub fn zgp(&self, z: f64) -> f64 {
        let p = self.state(z);
        self.g0 * (1.0 - self.ra) * self.big_n_at(&p) * p.q
    }

    /// z^2 g''(z).
    pub fn z2gpp(&self, z: f64) -> f64 {
        let p = self.state(z);
        let zgp = self.g0 * (1.0 - self.ra) * self.big_n_at(&p) * p.q;
        zgp * self.wprime_m1_at(&p)
    }

    pub fn gp(&self, z: f64) -> f64 {
        if z > 0.0 {
            self.zgp(z) / z
        } else if self.report.regime == Regime::SellAll {
            (1.0 - self.ra) * self.g0
        } else {
            f64::INFINITY * (1.0 - self.ra).signum()
        }
    }

    pub fn gpp(&self, z: f64) -> f64 {
        if z > 0.0 {
            self.z2gpp(z) / (z * z)
        } else if self.report.regime == Regime::SellAll {
            -self.ra * (1.0 - self.ra) * self.g0
        } else {
            f64::NEG_INFINITY * (1.0 - self.ra).signum()
        }
    }

    /// Consumption-to-liquid-wealth ratio C/x at ratio z.
    pub fn consumption_over_x(&self, z: f64) -> f64 {
        let p = self.state(z);
        (self.aux.b1 / (self.aux.b4 * self.ra)) * p.n / p.omq
    }

    /// lambda * Psi_g(z): hedge exposure per unit liquid wealth times sigma.
    pub fn lambda_psi(&self, z: f64) -> f64 {
        let p = self.state(z);
        self.lambda_psi_at(&p)
    }

    fn lambda_psi_at(&self, p: &PolicyPoint) -> f64 {
        // cancellation-free resolution of
        //   (lam (1-q) - eta rho R q - eta rho q (w'-1))
        //     / (R (1-2q) - q (w'-1)):
        // both numerator and denominator carry a factor (1-q).
        let ra = self.ra;
        let lam = self.mp.lambda();
        let er = self.mp.eta * self.mp.rho;
        let d = (1.0 - ra) * p.n - ra * p.f * p.omq;
        let num = lam * d - er * ra * (1.0 - ra) * p.q * (p.n + p.f * p.omq);
        let den = ra * p.omq * (d - p.q * p.f);
        num / den
    }

    /// Psi_g(z) itself; NaN when lambda = 0 (the ratio is then undefined,
    /// and the portfolio lambda*Psi_g is identically zero).
    pub fn psi_g(&self, z: f64) -> f64 {
        self.lambda_psi(z) / self.mp.lambda()
    }

    /// Consumption scaled for the zero-liquid-wealth limit: (C/(y theta))(k)
    /// as a function of k = x/(y theta). Finite and positive at k = 0.
    pub fn consumption_over_position(&self, k: f64) -> f64 {
        if k <= 0.0 {
            let p = self.tail_point();
            // k c(1/k) -> (b1/(b4 R)) n(1) * lim k/(1-q): the tail keeps
            // (1-q) z constant, equal to omq_end * z_end.
            let scale = self.omq_end * self.u_end.exp();
            return (self.aux.b1 / (self.aux.b4 * self.ra)) * p.n / scale;
        }
        k * self.consumption_over_x(1.0 / k)
    }

    /// Hedge exposure scaled for the zero-liquid-wealth limit:
    /// k * lambda Psi_g(1/k), finite at k = 0.
    pub fn hedge_over_position(&self, k: f64) -> f64 {
        if k <= 0.0 {
            // limit of k lambda Psi(1/k): lambda Psi grows linearly in z in
            // the tail, so evaluate the slope at the grid edge.
            let p = self.tail_point();
            return self.lambda_psi_at(&p) * (-self.u_end).exp();
        }
        k * self.lambda_psi(1.0 / k)
    }

    fn tail_point(&self) -> PolicyPoint {
        PolicyPoint {
            q: 1.0 - self.omq_end,
            omq: self.omq_end,
            n: self.n_ref,
            f: self.f_end,
        }
    }

    /// Time-zero value function.
    pub fn value(&self, x: f64, y: f64, theta: f64) -> Result<f64> {
        if !(x >= 0.0) || !(y > 0.0) || !(theta >= 0.0) || x + y * theta <= 0.0 {
            return Err(EndowError::InvalidParams(format!(
                "value requested at inadmissible state ({x}, {y}, {theta})"
            )));
        }
        let ra = self.ra;
        if self.report.regime == Regime::SellAll {
            let w = x + y * theta;
            return Ok(self.g0 * w.powf(1.0 - ra) / (1.0 - ra));
        }
        if x == 0.0 {
            let w = y * theta;
            return Ok(w.powf(1.0 - ra) / (1.0 - ra) * self.g0 * self.n_ref.powf(-ra));
        }
        let z = y * theta / x;
        // Closed forms for large ratios, where x^(1-R) * g(z) would lose
        // range even though the product is moderate.
        if self.zstar.is_finite() && z >= self.zstar {
            let w = x + y * theta;
            return Ok(self.g0 * self.n_ref.powf(-ra) * w.powf(1.0 - ra) / (1.0 - ra));
        }
        if z.ln() > self.u_end {
            // value on the exponential tail: constant * (y theta)^(1-R)
            let w = y * theta;
            let corr = (self.omq_end * self.u_end.exp()).powf(ra - 1.0);
            return Ok(w.powf(1.0 - ra) / (1.0 - ra) * self.g0 * self.n_ref.powf(-ra) * corr);
        }
        Ok(x.powf(1.0 - ra) / (1.0 - ra) * self.g(z))
    }

    /// Certainty-equivalent price of the endowed position.
    pub fn certainty_equivalent(&self, x: f64, y: f64, theta: f64) -> Result<f64> {
        if !(x > 0.0) || !(y > 0.0) || !(theta >= 0.0) {
            return Err(EndowError::InvalidParams(format!(
                "certainty equivalent requested at inadmissible state ({x}, {y}, {theta})"
            )));
        }
        if self.report.regime == Regime::SellAll {
            return Ok(y * theta);
        }
        let ra = self.ra;
        let z = y * theta / x;
        if self.zstar.is_finite() && z >= self.zstar {
            // sale branch in closed form: (g/g0)^(1/(1-R)) = n*^(-R/(1-R)) (1+z)
            let c = self.n_ref.powf(-ra / (1.0 - ra));
            return Ok(x * (c * (1.0 + z) - 1.0));
        }
        if z.ln() > self.u_end {
            let c = self.n_ref.powf(-ra / (1.0 - ra)) / (self.omq_end * self.u_end.exp());
            return Ok(y * theta * c - x);
        }
        let ratio = self.g(z) / self.g0;
        Ok(x * (ratio.powf(1.0 / (1.0 - ra)) - 1.0))
    }

    /// Feedback consumption rate.
    pub fn feedback_consumption(&self, x: f64, y: f64, theta: f64) -> Result<f64> {
        if !(x > 0.0) {
            return Err(EndowError::InvalidParams(format!("x = {x} must be positive")));
        }
        let z = y * theta / x;
        let p = self.state(z);
        if !(p.n > 0.0) || !(p.omq > 0.0) {
            return Err(EndowError::NonpositiveBase { z });
        }
        Ok(x * (self.aux.b1 / (self.aux.b4 * self.ra)) * p.n / p.omq)
    }

    /// Feedback cash position in the hedge asset.
    pub fn feedback_portfolio(&self, x: f64, y: f64, theta: f64) -> Result<f64> {
        if !(x > 0.0) {
            return Err(EndowError::InvalidParams(format!("x = {x} must be positive")));
        }
        let z = y * theta / x;
        Ok(x * self.lambda_psi(z) / self.mp.sigma)
    }

    /// Reference n used by the zero-liquid-wealth limit (crossing value in
    /// the finite-ratio case, right-endpoint value otherwise).
    pub fn n_reference(&self) -> f64 {
        self.n_ref
    }
}

// ---------------------------------------------------------------------------
// construction entry points per regime
// ---------------------------------------------------------------------------

/// Finite-critical-ratio construction (interior crossing).
pub fn build_g_finite_ratio(
    tt: TransformTables,
    ap: &AuxParams,
    ra: f64,
    mp: &MarketParams,
    report: RegimeReport,
) -> Result<Policy> {
    if tt.kind != TransformKind::FiniteRatio {
        return Err(EndowError::InvalidParams(
            "transforms are not from an interior crossing".into(),
        ));
    }
    Policy::from_transforms(tt, ap, ra, mp, report)
}

/// No-finite-ratio construction (no interior crossing; z* infinite).
pub fn build_g_no_finite_ratio(
    _sol: &OdeSolution,
    tt: TransformTables,
    ap: &AuxParams,
    ra: f64,
    mp: &MarketParams,
    report: RegimeReport,
) -> Result<Policy> {
    if tt.kind != TransformKind::NoFiniteRatio {
        return Err(EndowError::InvalidParams(
            "transforms are from an interior crossing".into(),
        ));
    }
    Policy::from_transforms(tt, ap, ra, mp, report)
}

// ---------------------------------------------------------------------------
// verification
// ---------------------------------------------------------------------------

/// Residual thresholds used by the verifier suites.
#[derive(Debug, Clone, Copy)]
pub struct VerifyThresholds {
    /// |L G - beta G| / |beta G| in the no-sale region.
    pub rel_generator: f64,
    /// Lower bound for the sale operator in the no-sale region.
    pub m_lower: f64,
    /// |sale operator| in the sale region.
    pub m_sale: f64,
    /// Upper bound for the Hessian combination.
    pub hessian: f64,
    /// |Hessian combination| at z*.
    pub hessian_at_boundary: f64,
}

impl Default for VerifyThresholds {
    fn default() -> Self {
        VerifyThresholds {
            rel_generator: 1e-6,
            m_lower: -1e-9,
            m_sale: 1e-9,
            hessian: 1e-9,
            hessian_at_boundary: 1e-8,
        }
    }
}

/// One row of the residual report.
#[derive(Debug, Clone, Copy)]
pub struct ResidualRow {
    pub z: f64,
    /// L G - beta G at (x, y, theta) = (1, 1, z).
    pub generator: f64,
    pub beta_g: f64,
    /// Sale operator M G / (x^-R y) = (1+z) g'/(1-R) - g.
    pub sale_op: f64,
    /// (1-R) g z^2 g'' + R (z g')^2, from differenced derivatives.
    pub hessian: f64,
    pub in_sale_region: bool,
}

/// HJB residual report. Derivatives of g are estimated by finite
/// differences of g alone, so the check is independent of the analytic
/// derivative relations used by the policy itself.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    pub rows: Vec<ResidualRow>,
    pub max_rel_generator_no_sale: f64,
    pub min_sale_op_no_sale: f64,
    pub max_abs_sale_op_sale: f64,
    pub max_generator_sale: f64,
    pub hessian_max: f64,
    pub hessian_at_boundary: Option<f64>,
}

impl ResidualReport {
    pub fn passes(&self, t: &VerifyThresholds) -> bool {
        self.max_rel_generator_no_sale <= t.rel_generator
            && self.min_sale_op_no_sale >= t.m_lower
            && self.max_abs_sale_op_sale <= t.m_sale
            && self.max_generator_sale <= t.m_sale.max(1e-9)
            && self.hessian_max <= t.hessian
            && self.hessian_at_boundary.map_or(true, |h| h.abs() <= t.hessian_at_boundary)
    }
}

/// Shape report: curvature of g, the Hessian combination, and the bounds
/// on w' sampled by finite differences of w on the stored transform grid.
#[derive(Debug, Clone)]
pub struct ShapeReport {
    pub curvature_violations: usize,
    pub hessian_max: f64,
    pub hessian_at_boundary: Option<f64>,
    pub wprime_lower_violations: usize,
    pub wprime_upper_violations: usize,
    /// |w'(h*) - (1 - R w(h*)/((1-R) h*))| at the boundary node.
    pub wprime_boundary_gap: Option<f64>,
    /// w at the left edge of the table (s near 1); tends to zero.
    pub w_at_left_edge: f64,
}

impl Policy {
    /// Finite-difference derivatives of g in u = ln z: returns
    /// (g, z g', z^2 g'') at z, using 4th-order stencils and one-sided
    /// variants within `reach` of a boundary at u*.
    fn fd_derivs(&self, z: f64, h: f64) -> (f64, f64, f64) {
        let u = z.ln();
        let g_at = |uu: f64| self.g(uu.exp());
        let boundary = if self.zstar.is_finite() && self.zstar > 0.0 {
            Some(self.zstar.ln())
        } else {
            None
        };
        let mode = match boundary {
            Some(ub) if u <= ub && ub - u < 5.5 * h => -1, // left-sided
            Some(ub) if u > ub && u - ub < 5.5 * h => 1,   // right-sided
            _ => 0,
        };
        let g0v = g_at(u);
        match mode {
            0 => {
                let gm2 = g_at(u - 2.0 * h);
                let gm1 = g_at(u - h);
                let gp1 = g_at(u + h);
                let gp2 = g_at(u + 2.0 * h);
                let du = (-gp2 + 8.0 * gp1 - 8.0 * gm1 + gm2) / (12.0 * h);
                let duu = (-gp2 + 16.0 * gp1 - 30.0 * g0v + 16.0 * gm1 - gm2) / (12.0 * h * h);
                (g0v, du, duu - du)
            }
            side => {
                let s = side as f64; // -1: use nodes at u - k h; +1: u + k h
                let f: Vec<f64> = (0..6).map(|k| g_at(u + s * k as f64 * h)).collect();
                let du = s * (-25.0 * f[0] + 48.0 * f[1] - 36.0 * f[2] + 16.0 * f[3]
                    - 3.0 * f[4])
                    / (12.0 * h);
                let duu = (15.0 / 4.0 * f[0] - 77.0 / 6.0 * f[1] + 107.0 / 6.0 * f[2]
                    - 13.0 * f[3]
                    + 61.0 / 12.0 * f[4]
                    - 5.0 / 6.0 * f[5])
                    / (h * h);
                (g0v, du, duu - du)
            }
        }
    }

    /// Generator residual L G - beta G at (x, y, theta) = (1, 1, z) given
    /// (g, z g', z^2 g'').
    fn generator_residual(&self, z: f64, g: f64, zgp: f64, z2gpp: f64) -> (f64, f64) {
        let ra = self.ra;
        let mp = &self.mp;
        let lam = mp.lambda();
        let big_g = g / (1.0 - ra);
        let gx = g - zgp / (1.0 - ra);
        let gxx = -ra * g + 2.0 * ra * zgp / (1.0 - ra) + z2gpp / (1.0 - ra);
        let ygy = zgp / (1.0 - ra);
        let y2gyy = z2gpp / (1.0 - ra);
        let ygxy = -(ra * zgp + z2gpp) / (1.0 - ra);
        let _ = z;
        let lg = ra / (1.0 - ra) * gx.powf((ra - 1.0) / ra)
            + mp.r * gx
            + mp.alpha * ygy
            + 0.5 * mp.eta * mp.eta * y2gyy
            - (mp.eta * mp.rho * ygxy + lam * gx).powi(2) / (2.0 * gxx)
            - mp.beta * big_g;
        (lg, mp.beta * big_g)
    }

    /// Closed-form generator residual of the sell-everything value shape,
    /// used as a second route in the sell-all regime.
    pub fn generator_residual_sell_all(&self, z: f64) -> f64 {
        let ra = self.ra;
        let q = z / (1.0 + z);
        self.g0 * (1.0 + z).powf(1.0 - ra) * (self.aux.b3 * q - ra * q * q) / self.aux.b4
    }

    /// Evaluate the HJB residuals over a z grid.
    pub fn verify_hjb(&self, zgrid: &[f64]) -> ResidualReport {
        let h = 8e-3;
        let ra = self.ra;
        let mut rows = Vec::with_capacity(zgrid.len());
        let mut max_rel = 0.0f64;
        let mut min_m_nosale = f64::INFINITY;
        let mut max_m_sale = 0.0f64;
        let mut max_gen_sale = f64::NEG_INFINITY;
        let mut hess_max = f64::NEG_INFINITY;
        for &z in zgrid {
            if !(z > 0.0) {
                // exact point: the generator residual vanishes at z = 0
                rows.push(ResidualRow {
                    z,
                    generator: 0.0,
                    beta_g: self.mp.beta * self.g0 / (1.0 - ra),
                    sale_op: f64::NAN,
                    hessian: 0.0,
                    in_sale_region: false,
                });
                continue;
            }
            let (g, zgp, z2gpp) = self.fd_derivs(z, h);
            let (gen, beta_g) = self.generator_residual(z, g, zgp, z2gpp);
            let sale_op = (1.0 + z) / z * zgp / (1.0 - ra) - g;
            let hess = (1.0 - ra) * g * z2gpp + ra * zgp * zgp;
            let in_sale = match self.report.regime {
                Regime::SellAll => true,
                Regime::FiniteRatio => z >= self.zstar,
                _ => false,
            };
            if in_sale {
                max_m_sale = max_m_sale.max(sale_op.abs());
                max_gen_sale = max_gen_sale.max(gen);
            } else {
                max_rel = max_rel.max((gen / beta_g).abs());
                min_m_nosale = min_m_nosale.min(sale_op);
            }
            hess_max = hess_max.max(hess);
            rows.push(ResidualRow {
                z,
                generator: gen,
                beta_g,
                sale_op,
                hessian: hess,
                in_sale_region: in_sale,
            });
        }
        let hess_boundary = if self.zstar.is_finite() && self.zstar > 0.0 {
            let (g, zgp, z2gpp) = self.fd_derivs(self.zstar * (1.0 - 1e-12), h);
            Some((1.0 - ra) * g * z2gpp + ra * zgp * zgp)
        } else {
            None
        };
        ResidualReport {
            rows,
            max_rel_generator_no_sale: max_rel,
            min_sale_op_no_sale: if min_m_nosale.is_finite() { min_m_nosale } else { 0.0 },
            max_abs_sale_op_sale: max_m_sale,
            max_generator_sale: if max_gen_sale.is_finite() { max_gen_sale } else { 0.0 },
            hessian_max: if hess_max.is_finite() { hess_max } else { 0.0 },
            hessian_at_boundary: hess_boundary,
        }
    }

    /// Shape checks for the value-shape function and the transform w.
    pub fn verify_shape(&self, zgrid: &[f64]) -> ShapeReport {
        let ra = self.ra;
        let h = 8e-3;
        let mut curvature_violations = 0usize;
        let mut hessian_max = f64::NEG_INFINITY;
        for &z in zgrid {
            if !(z > 0.0) {
                continue;
            }
            let (g, zgp, z2gpp) = self.fd_derivs(z, h);
            // concave for R < 1, convex (and positive) for R > 1
            if (1.0 - ra).signum() * z2gpp > 1e-9 * g.abs().max(1.0) {
                curvature_violations += 1;
            }
            if ra > 1.0 && g < 0.0 {
                curvature_violations += 1;
            }
            hessian_max = hessian_max.max((1.0 - ra) * g * z2gpp + ra * zgp * zgp);
        }
        let hessian_at_boundary = if self.zstar.is_finite() && self.zstar > 0.0 {
            let (g, zgp, z2gpp) = self.fd_derivs(self.zstar * (1.0 - 1e-12), h);
            Some((1.0 - ra) * g * z2gpp + ra * zgp * zgp)
        } else {
            None
        };

        // w' bounds by finite differences of w on the stored table
        let mut lower_viol = 0usize;
        let mut upper_viol = 0usize;
        let mut boundary_gap = None;
        let mut w_left = f64::NAN;
        if let Some(tt) = &self.transforms {
            let m = tt.qs.len();
            let stride = (m / 240).max(1);
            let w_node = |i: usize| (1.0 - ra) * tt.ngrid[i] * tt.qs[i];
            w_left = w_node(0);
            let mut prev: Option<usize> = None;
            for i in (0..m).step_by(stride) {
                if let Some(j) = prev {
                    let ds = tt.ngrid[i] - tt.ngrid[j];
                    if ds.abs() > 1e-14 {
                        let wp = (w_node(i) - w_node(j)) / ds;
                        let smid = 0.5 * (tt.ngrid[i] + tt.ngrid[j]);
                        let wmid = 0.5 * (w_node(i) + w_node(j));
                        let upper = 1.0 - ra * wmid / ((1.0 - ra) * smid);
                        if wp < (1.0 - ra) - 1e-7 {
                            lower_viol += 1;
                        }
                        if wp > upper + 1e-7 {
                            upper_viol += 1;
                        }
                    }
                }
                prev = Some(i);
            }
            if tt.kind == TransformKind::FiniteRatio {
                // analytic w' at the crossing equals the upper bound
                let p = PolicyPoint {
                    q: tt.qstar,
                    omq: 1.0 - tt.qstar,
                    n: tt.n_qstar,
                    f: 0.0,
                };
                let wp = self.wprime_at(&p);
                let wh = (1.0 - ra) * tt.hstar * tt.qstar;
                let upper = 1.0 - ra * wh / ((1.0 - ra) * tt.hstar);
                boundary_gap = Some((wp - upper).abs());
            }
        }
        ShapeReport {
            curvature_violations,
            hessian_max: if hessian_max.is_finite() { hessian_max } else { 0.0 },
            hessian_at_boundary,
            wprime_lower_violations: lower_viol,
            wprime_upper_violations: upper_viol,
            wprime_boundary_gap: boundary_gap,
            w_at_left_edge: w_left,
        }
    }

    /// Geometric grid inside the no-sale region plus, in the finite-ratio
    /// case, a linear extension into the sale region.
    pub fn default_verify_grid(&self, n_inside: usize, n_sale: usize) -> Vec<f64> {
        let z_hi = if self.zstar.is_finite() && self.zstar > 0.0 {
            self.zstar
        } else {
            50.0
        };
        let mut grid = Vec::new();
        let lo = (z_hi * 1e-3).max(1e-4);
        for i in 0..n_inside {
            let t = i as f64 / (n_inside - 1) as f64;
            grid.push(lo * (z_hi * (1.0 - 1e-9) / lo).powf(t));
        }
        if self.zstar.is_finite() && self.zstar > 0.0 {
            for i in 1..=n_sale {
                grid.push(self.zstar * (1.0 + 3.0 * i as f64 / n_sale as f64));
            }
        }
        grid
    }
}

/// Summary of one solved parameter set (the JSON export payload).
#[derive(Debug, Clone)]
pub struct PolicySummary {
    pub regime: Regime,
    pub b3_crit: Option<f64>,
    pub qstar: f64,
    pub zstar: f64,
    pub n_qstar: f64,
    pub g0: f64,
    /// Certainty-equivalent price at the configured initial state.
    pub p: f64,
}

impl Policy {
    pub fn summary(&self) -> Result<PolicySummary> {
        let p = if self.mp.x0 > 0.0 {
            self.certainty_equivalent(self.mp.x0, self.mp.y0, self.mp.theta0)?
        } else {
            // zero-liquid-wealth limit of the certainty equivalent
            self.mp.y0 * self.mp.theta0 * self.n_ref.powf(-self.ra / (1.0 - self.ra))
        };
        Ok(PolicySummary {
            regime: self.report.regime,
            b3_crit: self.report.b3_crit,
            qstar: self.report.qstar,
            zstar: self.zstar,
            n_qstar: self.n_reference(),
            g0: self.g0,
            p,
        })
    }
}
