//! First-order free-boundary ODE: solve n(q) on [0, 1] from the singular
//! initial condition n(0) = 1, detect the first crossing q* of n with the
//! parabola m, and locate the critical effective Sharpe ratio b3_crit by
//! monotone bisection.
//!
//! The solution n lives in the band between m and ell (in the (1-R) order)
//! and crosses m tangentially at q*; the crossing encodes the free boundary
//! of the control problem through z* = q*/(1-q*).

use crate::error::{EndowError, Result};

/// Scalar coefficient functions of the boundary ODE for one parameter set.
#[derive(Debug, Clone, Copy)]
pub struct CoefficientSet {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    /// Relative risk aversion R.
    pub ra: f64,
    /// Force the square-root term to zero. Only meaningful for b2 = 1,
    /// where it holds identically on the admissible band; used to cross
    /// check the reduced equation against the full one.
    pub force_upsilon_zero: bool,
}

impl CoefficientSet {
    pub fn new(b1: f64, b2: f64, b3: f64, ra: f64) -> Result<Self> {
        if !(b1.is_finite() && b2.is_finite() && b3.is_finite()) {
            return Err(EndowError::InvalidParams("non-finite b parameters".into()));
        }
        if !(ra > 0.0) || ra == 1.0 {
            return Err(EndowError::InvalidParams(format!(
                "risk aversion R = {ra} must be positive and != 1"
            )));
        }
        if b2 < 1.0 - 1e-9 {
            return Err(EndowError::InvalidParams(format!("b2 = {b2} < 1")));
        }
        Ok(CoefficientSet {
            b1,
            b2: b2.max(1.0),
            b3,
            ra,
            force_upsilon_zero: false,
        })
    }

    /// Lower edge of the band: m(q) = (1-R)R/b1 q^2 - b3(1-R)/b1 q + 1.
    pub fn m(&self, q: f64) -> f64 {
        let ra = self.ra;
        (1.0 - ra) * ra / self.b1 * q * q - self.b3 * (1.0 - ra) / self.b1 * q + 1.0
    }

    /// m'(q).
    pub fn m_prime(&self, q: f64) -> f64 {
        let ra = self.ra;
        (1.0 - ra) * (2.0 * ra * q - self.b3) / self.b1
    }

    /// Band width scale: S(q) = b1 (ell(q) - m(q)).
    pub fn band_gap(&self, q: f64) -> f64 {
        let ra = self.ra;
        (1.0 - ra) * q * (1.0 - q)
            + (self.b2 - 1.0) * ra * (1.0 - ra) * q / ((1.0 - ra) * q + ra)
    }

    /// Upper edge of the band (in the (1-R) order).
    pub fn ell(&self, q: f64) -> f64 {
        self.m(q) + self.band_gap(q) / self.b1
    }

    /// ell'(0) = (b2 - b3)(1-R)/b1.
    pub fn ell_prime0(&self) -> f64 {
        (self.b2 - self.b3) * (1.0 - self.ra) / self.b1
    }

    pub fn phi(&self, q: f64, n: f64) -> f64 {
        let ra = self.ra;
        self.b1 * (n - 1.0)
            + (1.0 - ra) * (self.b3 - 2.0 * ra) * q
            + (2.0 - self.b2) * ra * (1.0 - ra)
    }

    /// E(q)^2 = 4 R^2 (1-R)^2 (b2 - 1)(1-q)^2 >= 0.
    pub fn e_sq(&self, q: f64) -> f64 {
        let ra = self.ra;
        let c = ra * (1.0 - ra) * (1.0 - q);
        4.0 * c * c * (self.b2 - 1.0)
    }

    /// upsilon(q, n) = phi - sgn(1-R) sqrt(phi^2 + E^2).
    pub fn upsilon(&self, q: f64, n: f64) -> f64 {
        if self.force_upsilon_zero {
            return 0.0;
        }
        let p = self.phi(q, n);
        let root = (p * p + self.e_sq(q)).sqrt();
        if self.ra < 1.0 {
            p - root
        } else {
            p + root
        }
    }

    /// upsilon along the lower edge in closed form: -2R(1-R)(b2-1).
    pub fn upsilon_on_m(&self) -> f64 {
        if self.force_upsilon_zero {
            return 0.0;
        }
        -2.0 * self.ra * (1.0 - self.ra) * (self.b2 - 1.0)
    }

    /// True iff (q, n) lies strictly inside the admissible band.
    pub fn in_band(&self, q: f64, n: f64) -> bool {
        (1.0 - self.ra) * (self.ell(q) - n) > 0.0
    }

    /// Right-hand side n'(q) = F(q, n), in the form whose denominator
    /// b1(ell - n) stays away from zero near the crossing n = m.
    pub fn f_rhs(&self, q: f64, n: f64) -> f64 {
        let ra = self.ra;
        let qr = (1.0 - ra) * q + ra;
        let dm = n - self.m(q);
        let num = 2.0 * self.b1 * qr * dm - q * (self.upsilon(q, n) - self.upsilon_on_m());
        let den = 2.0 * ra * (1.0 - q) * qr * (self.band_gap(q) - self.b1 * dm);
        -(1.0 - ra) * n * num / den
    }

    /// Same right-hand side via the log-derivative form.
    pub fn f_rhs_form_a(&self, q: f64, n: f64) -> f64 {
        let ra = self.ra;
        let qr = (1.0 - ra) * q + ra;
        let gap = self.ell(q) - n;
        n * ((1.0 - ra) / (ra * (1.0 - q))
            - (1.0 - ra) * (1.0 - ra) / (self.b1 * ra) * q / gap
            + (1.0 - ra) * q / (2.0 * self.b1 * ra * (1.0 - q) * qr) * self.upsilon(q, n) / gap)
    }

    /// Same right-hand side via the resolved-square-root form.
    pub fn f_rhs_form_b(&self, q: f64, n: f64) -> f64 {
        let ra = self.ra;
        let qr = (1.0 - ra) * q + ra;
        let p = self.phi(q, n);
        let root = if self.force_upsilon_zero {
            p.abs() * if self.ra < 1.0 { 1.0 } else { -1.0 }
        } else {
            (p * p + self.e_sq(q)).sqrt()
        };
        let sgn = if ra < 1.0 { 1.0 } else { -1.0 };
        let den = 2.0 * (1.0 - ra) * (1.0 - q) * qr - p - sgn * root;
        (1.0 - ra) * n / (ra * (1.0 - q)) - 2.0 * (1.0 - ra) * (1.0 - ra) * q * n / (ra * den)
    }

    /// Initial slope n'(0): root of the quadratic
    /// Phi(chi) = b1 R chi^2 + R(1-R)(b3 - b2 - b1/R) chi - b3 (1-R)^2,
    /// the smaller root for R < 1 and the larger for R > 1.
    pub fn initial_slope(&self) -> f64 {
        let (a, b, c) = self.slope_quadratic();
        let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
        // a = b1 R > 0 on well-posed inputs
        if self.ra < 1.0 {
            (-b - disc) / (2.0 * a)
        } else {
            (-b + disc) / (2.0 * a)
        }
    }

    /// Coefficients (a, b, c) of the initial-slope quadratic.
    pub fn slope_quadratic(&self) -> (f64, f64, f64) {
        let ra = self.ra;
        (
            self.b1 * ra,
            ra * (1.0 - ra) * (self.b3 - self.b2 - self.b1 / ra),
            -self.b3 * (1.0 - ra) * (1.0 - ra),
        )
    }

    /// N'(0)/N(0) = (1-R) - R n'(0).
    pub fn nu0(&self) -> f64 {
        (1.0 - self.ra) - self.ra * self.initial_slope()
    }

    /// Second derivative n''(q) = F_q + F_n F along a solution through
    /// (q, n), by central differences of the right-hand side.
    pub fn curve_curvature(&self, q: f64, n: f64, f: f64) -> f64 {
        let dq = 1e-6 * q.abs().max(1e-2);
        let dq = dq.min(0.45 * (1.0 - q)).min(0.45 * q).max(1e-12);
        let dn = 1e-6 * n.abs().max(1e-2);
        let fq = (self.f_rhs(q + dq, n) - self.f_rhs(q - dq, n)) / (2.0 * dq);
        let fn_ = (self.f_rhs(q, n + dn) - self.f_rhs(q, n - dn)) / (2.0 * dn);
        fq + fn_ * f
    }
}

/// Guarded evaluation of n'(q) = F(q, n).
pub fn n_prime(q: f64, n: f64, cs: &CoefficientSet) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) || !cs.in_band(q, n) {
        return Err(EndowError::DomainViolation { q, n });
    }
    Ok(cs.f_rhs(q, n))
}

/// How an integration run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// n met m at an interior q*.
    CrossedM,
    /// Integration reached the right endpoint q = 1 - 1e-9.
    ReachedOne,
    /// n decayed below 1e-12 (zero is absorbing).
    HitZero,
}

/// Integration tolerances.
#[derive(Debug, Clone, Copy)]
pub struct ToleranceOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for ToleranceOptions {
    fn default() -> Self {
        ToleranceOptions {
            rtol: 1e-10,
            atol: 1e-12,
            max_steps: 400_000,
        }
    }
}

impl ToleranceOptions {
    /// Tight tolerances used when the solution feeds the policy transforms.
    pub fn tight() -> Self {
        ToleranceOptions {
            rtol: 3e-12,
            atol: 1e-14,
            max_steps: 2_000_000,
        }
    }
}

pub const Q_START: f64 = 1e-6;
pub const Q_END: f64 = 1.0 - 1e-9;
/// Crossings refined beyond this point count as boundary touches.
pub const Q_CROSS_GUARD: f64 = 1.0 - 1e-6;

/// Grid solution of the boundary ODE.
///
/// Stores the accepted integration nodes together with the slope F and the
/// regularized quadrature
///   P(q) = -R/(1-R) * int_{q0}^{q} (F/n - n'(0)) / t dt,
/// the smooth part of the change of variables u = ln z <-> q used by the
/// policy transforms. Dense evaluation between nodes is cubic Hermite.
#[derive(Debug, Clone)]
pub struct OdeSolution {
    pub qgrid: Vec<f64>,
    pub nvals: Vec<f64>,
    pub fvals: Vec<f64>,
    /// Curve second derivative n''(q) = F_q + F_n F along the solution.
    pub dfvals: Vec<f64>,
    pub pvals: Vec<f64>,
    pub qstar: f64,
    pub n_qstar: f64,
    pub terminated_by: Termination,
    /// Initial slope n'(0).
    pub chi0: f64,
    pub cs: CoefficientSet,
}

impl OdeSolution {
    fn locate(&self, q: f64) -> usize {
        match self.qgrid.binary_search_by(|x| x.partial_cmp(&q).unwrap()) {
            Ok(i) => i.min(self.qgrid.len() - 2),
            Err(i) => i.clamp(1, self.qgrid.len() - 1) - 1,
        }
    }

    /// Dense evaluation of n(q) on the grid span (quintic Hermite; the
    /// downstream verifiers difference the result twice, so the dense
    /// output has to be accurate well beyond the step tolerance).
    pub fn eval_n(&self, q: f64) -> f64 {
        let i = self.locate(q);
        quintic(
            q,
            self.qgrid[i],
            self.qgrid[i + 1],
            [self.nvals[i], self.fvals[i], self.dfvals[i]],
            [self.nvals[i + 1], self.fvals[i + 1], self.dfvals[i + 1]],
        )
    }

    /// Dense evaluation of the regularized quadrature P(q).
    pub fn eval_p(&self, q: f64) -> f64 {
        let i = self.locate(q);
        let cs = &self.cs;
        let ra = cs.ra;
        let pd = |q: f64, n: f64, f: f64| -ra * (f / n - self.chi0) / ((1.0 - ra) * q);
        let pdd = |q: f64, n: f64, f: f64, df: f64| {
            -ra * (df * n - f * f) / (n * n) / ((1.0 - ra) * q)
                + ra * (f / n - self.chi0) / ((1.0 - ra) * q * q)
        };
        let (qa, qb) = (self.qgrid[i], self.qgrid[i + 1]);
        let (na, nb) = (self.nvals[i], self.nvals[i + 1]);
        let (fa, fb) = (self.fvals[i], self.fvals[i + 1]);
        quintic(
            q,
            qa,
            qb,
            [self.pvals[i], pd(qa, na, fa), pdd(qa, na, fa, self.dfvals[i])],
            [self.pvals[i + 1], pd(qb, nb, fb), pdd(qb, nb, fb, self.dfvals[i + 1])],
        )
    }

    /// Endpoint grid value, used as n(1) when the run reached the boundary.
    pub fn n_end(&self) -> f64 {
        *self.nvals.last().unwrap()
    }

    pub fn q_last(&self) -> f64 {
        *self.qgrid.last().unwrap()
    }
}

fn hermite(x: f64, x0: f64, x1: f64, y0: f64, y1: f64, d0: f64, d1: f64) -> f64 {
    let h = x1 - x0;
    if h == 0.0 {
        return y0;
    }
    let t = (x - x0) / h;
    let t2 = t * t;
    let t3 = t2 * t;
    y0 * (2.0 * t3 - 3.0 * t2 + 1.0)
        + d0 * h * (t3 - 2.0 * t2 + t)
        + y1 * (-2.0 * t3 + 3.0 * t2)
        + d1 * h * (t3 - t2)
}

/// Two-point quintic Hermite from `[value, slope, curvature]` at each end.
fn quintic(x: f64, x0: f64, x1: f64, a: [f64; 3], b: [f64; 3]) -> f64 {
    let h = x1 - x0;
    if h == 0.0 {
        return a[0];
    }
    let t = (x - x0) / h;
    let t2 = t * t;
    let t3 = t2 * t;
    let t4 = t3 * t;
    let t5 = t4 * t;
    let h0 = 1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5;
    let h1 = t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5;
    let h2 = 0.5 * (t2 - 3.0 * t3 + 3.0 * t4 - t5);
    let h3 = 0.5 * (t3 - 2.0 * t4 + t5);
    let h4 = -4.0 * t3 + 7.0 * t4 - 3.0 * t5;
    let h5 = 10.0 * t3 - 15.0 * t4 + 6.0 * t5;
    a[0] * h0 + a[1] * h * h1 + a[2] * h * h * h2 + b[2] * h * h * h3 + b[1] * h * h4 + b[0] * h5
}

// Dormand-Prince 5(4) tableau.
const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [
    19372.0 / 6561.0,
    -25360.0 / 2187.0,
    64448.0 / 6561.0,
    -212.0 / 729.0,
];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
const B5: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];
const C: [f64; 5] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0];

/// Integrate n (plus the quadrature rider) from the singular start.
///
/// Terminates at the first of: a sign change of (1-R)(n - m) (refined to a
/// crossing point), the right endpoint q = 1 - 1e-9, or absorption of n at
/// zero. Crossings refined beyond 1 - 1e-6 are classified as boundary
/// touches rather than interior crossings; so are trajectories detected to
/// be slaved onto m where m is moving away from the band (those cannot
/// cross and would otherwise force unboundedly small explicit steps).
pub fn integrate_n(cs: &CoefficientSet, opts: &ToleranceOptions) -> Result<OdeSolution> {
    if cs.b1 <= 0.0 {
        return Err(EndowError::DegenerateMerton { b1: cs.b1 });
    }
    let chi0 = cs.initial_slope();
    if cs.b3 <= 0.0 {
        return Ok(OdeSolution {
            qgrid: vec![0.0],
            nvals: vec![1.0],
            fvals: vec![chi0],
            dfvals: vec![0.0],
            pvals: vec![0.0],
            qstar: 0.0,
            n_qstar: 1.0,
            terminated_by: Termination::CrossedM,
            chi0,
            cs: *cs,
        });
    }

    let ra = cs.ra;
    let sgn = if ra < 1.0 { 1.0 } else { -1.0 };
    // rhs of the augmented state [n, P]
    let rhs = |q: f64, y: [f64; 2]| -> [f64; 2] {
        let f = cs.f_rhs(q, y[0]);
        let pdot = -ra * (f / y[0] - chi0) / ((1.0 - ra) * q);
        [f, pdot]
    };

    let mut q = Q_START;
    let mut y = [1.0 + Q_START * chi0, 0.0];
    let f0 = cs.f_rhs(q, y[0]);
    let mut qs = vec![q];
    let mut ns = vec![y[0]];
    let mut fs = vec![f0];
    let mut dfs = vec![cs.curve_curvature(q, y[0], f0)];
    let mut ps = vec![0.0];

    let finish = |qs: Vec<f64>,
                  ns: Vec<f64>,
                  fs: Vec<f64>,
                  dfs: Vec<f64>,
                  ps: Vec<f64>,
                  qstar: f64,
                  n_qstar: f64,
                  term: Termination| {
        Ok(OdeSolution {
            qgrid: qs,
            nvals: ns,
            fvals: fs,
            dfvals: dfs,
            pvals: ps,
            qstar,
            n_qstar,
            terminated_by: term,
            chi0,
            cs: *cs,
        })
    };

    let mut h = Q_START / 50.0;
    let mut steps = 0usize;
    loop {
        steps += 1;
        if steps > opts.max_steps {
            return Err(EndowError::StiffnessFailure { q });
        }
        if h < 1e-16 * q.max(1e-3) {
            // Explicit steps have collapsed. If the state is pressed onto m
            // in the right-endpoint pinch, the solution is slaved to m from
            // here on; otherwise report the stiffness.
            let s = sgn * (y[0] - cs.m(q));
            if q > 0.5 && s.abs() <= 1e3 * (opts.atol + opts.rtol * y[0].abs()) {
                return ride_boundary(cs, chi0, q, qs, ns, fs, dfs, ps);
            }
            return Err(EndowError::StiffnessFailure { q });
        }
        // The step cap bounds the dense-output interpolation error, which
        // downstream verifiers probe with second differences.
        h = h.min(Q_END - q).min(0.002);

        // one Dormand-Prince step
        let k1 = rhs(q, y);
        let st = |coef: &[f64], ks: &[[f64; 2]]| {
            let mut out = y;
            for d in 0..2 {
                for (c, k) in coef.iter().zip(ks) {
                    out[d] += h * c * k[d];
                }
            }
            out
        };
        let k2 = rhs(q + C[0] * h, st(&A2, &[k1]));
        let k3 = rhs(q + C[1] * h, st(&A3, &[k1, k2]));
        let k4 = rhs(q + C[2] * h, st(&A4, &[k1, k2, k3]));
        let k5 = rhs(q + C[3] * h, st(&A5, &[k1, k2, k3, k4]));
        let k6 = rhs(q + C[4] * h, st(&A6, &[k1, k2, k3, k4, k5]));
        let ks = [k1, k2, k3, k4, k5, k6];
        let mut y5 = y;
        for d in 0..2 {
            for (c, k) in B5.iter().zip(&ks) {
                y5[d] += h * c * k[d];
            }
        }
        let k7 = rhs(q + h, y5);
        let ks7 = [k1, k2, k3, k4, k5, k6, k7];
        let mut y4 = y;
        for d in 0..2 {
            for (c, k) in B4.iter().zip(&ks7) {
                y4[d] += h * c * k[d];
            }
        }
        let mut err: f64 = 0.0;
        let mut bad = false;
        for d in 0..2 {
            if !y5[d].is_finite() || !y4[d].is_finite() {
                bad = true;
                break;
            }
            let sc = opts.atol + opts.rtol * y[d].abs().max(y5[d].abs());
            err = err.max(((y5[d] - y4[d]) / sc).abs());
        }
        if bad || err > 1.0 {
            h *= if bad { 0.25 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 0.9) };
            continue;
        }

        let q_new = q + h;
        let n_new = y5[0];
        let f_new = k7[0];

        // event: crossing of m
        let s_old = sgn * (y[0] - cs.m(q));
        let s_new = sgn * (n_new - cs.m(q_new));
        if s_new <= 0.0 {
            let (qc, nc) = refine_crossing(cs, sgn, q, q_new, y[0], n_new, fs[fs.len() - 1], f_new);
            if qc >= Q_CROSS_GUARD {
                // Boundary-touch rather than interior crossing: carry the
                // solution to the endpoint along m, where it is pinned
                // within integration accuracy.
                let fc = cs.f_rhs(qc, nc);
                qs.push(qc);
                ns.push(nc);
                fs.push(fc);
                dfs.push(cs.curve_curvature(qc, nc, fc));
                ps.push(y[1] + (y5[1] - y[1]) * (qc - q) / h);
                return ride_boundary(cs, chi0, qc, qs, ns, fs, dfs, ps);
            }
            let fc = 0.0; // tangential contact: n'(q*) = 0
            qs.push(qc);
            ns.push(nc);
            fs.push(fc);
            dfs.push(cs.curve_curvature(qc, nc, fc));
            // quadrature value at the crossing via the step's Hermite
            let pc = hermite(qc, q, q_new, y[1], y5[1], ks[0][1], k7[1]);
            ps.push(pc);
            return finish(qs, ns, fs, dfs, ps, qc, nc, Termination::CrossedM);
        }
        let _ = s_old;

        // event: absorption at zero
        if n_new <= 1e-12 {
            qs.push(q_new);
            ns.push(n_new.max(0.0));
            fs.push(f_new);
            dfs.push(0.0);
            ps.push(y5[1]);
            return finish(qs, ns, fs, dfs, ps, 1.0, n_new.max(0.0), Termination::HitZero);
        }

        q = q_new;
        y = y5;
        qs.push(q);
        ns.push(y[0]);
        fs.push(f_new);
        dfs.push(cs.curve_curvature(q, y[0], f_new));
        ps.push(y[1]);

        if q >= Q_END {
            let n_end = y[0];
            return finish(qs, ns, fs, dfs, ps, 1.0, n_end, Termination::ReachedOne);
        }

        // slaved-trajectory detection: n pressed onto m while m still moves
        // away from the interior of the band ((1-R) m' <= 0, so no crossing
        // can occur before m turns). Continuing explicitly would force
        // h ~ (1-q)^2; ride m analytically instead. Only armed in the
        // right-endpoint pinch: near q = 0 the whole band is proportionally
        // thin and these signals are meaningless.
        let s = sgn * (y[0] - cs.m(q));
        let relax = ra * (1.0 - q) * (cs.band_gap(q) / cs.b1 - (y[0] - cs.m(q)))
            / ((1.0 - ra).abs() * y[0]);
        if q > 0.5
            && s <= 1e3 * (opts.atol + opts.rtol * y[0].abs())
            && sgn * (1.0 - ra) * cs.m_prime(q) <= 0.0
            && relax.abs() < 1e-6
        {
            let q_turn = cs.b3 / (2.0 * cs.ra);
            if q_turn >= Q_END {
                return ride_boundary(cs, chi0, q, qs, ns, fs, dfs, ps);
            }
            // Ride m up to its turning point, then resume; the crossing
            // fires immediately after the turn.
            let m_curv = 2.0 * (1.0 - ra) * ra / cs.b1;
            let mut qr = q;
            while qr < q_turn - 1e-9 {
                qr = (qr + (q_turn - qr) * 0.1).min(q_turn);
                qs.push(qr);
                ns.push(cs.m(qr));
                fs.push(cs.m_prime(qr));
                dfs.push(m_curv);
                let pd = -ra * (cs.m_prime(qr) / cs.m(qr) - chi0) / ((1.0 - ra) * qr);
                ps.push(ps.last().unwrap() + pd * (qr - qs[qs.len() - 2]));
            }
            q = q_turn;
            y[0] = cs.m(q_turn) + sgn * 10.0 * (opts.atol + opts.rtol);
            y[1] = *ps.last().unwrap();
            h = 1e-6;
            continue;
        }

        h *= (0.9 * err.max(1e-10).powf(-0.2)).clamp(0.2, 5.0);
    }
}

/// Carry a slaved solution along m to the right endpoint.
#[allow(clippy::too_many_arguments)]
fn ride_boundary(
    cs: &CoefficientSet,
    chi0: f64,
    q_from: f64,
    mut qs: Vec<f64>,
    mut ns: Vec<f64>,
    mut fs: Vec<f64>,
    mut dfs: Vec<f64>,
    mut ps: Vec<f64>,
) -> Result<OdeSolution> {
    let ra = cs.ra;
    let m_curv = 2.0 * (1.0 - ra) * ra / cs.b1;
    let mut qr = q_from;
    while qr < Q_END {
        let q_prev = qr;
        qr = (qr + (1.0 - qr) * 0.1).min(Q_END).max(qr + 1e-12);
        let pd_prev = -ra * (*fs.last().unwrap() / *ns.last().unwrap() - chi0)
            / ((1.0 - ra) * q_prev);
        qs.push(qr);
        ns.push(cs.m(qr));
        fs.push(cs.m_prime(qr));
        dfs.push(m_curv);
        let pd = -ra * (cs.m_prime(qr) / cs.m(qr) - chi0) / ((1.0 - ra) * qr);
        ps.push(ps.last().unwrap() + 0.5 * (pd + pd_prev) * (qr - q_prev));
        if qr >= Q_END {
            break;
        }
    }
    let n_end = *ns.last().unwrap();
    Ok(OdeSolution {
        qgrid: qs,
        nvals: ns,
        fvals: fs,
        dfvals: dfs,
        pvals: ps,
        qstar: 1.0,
        n_qstar: n_end,
        terminated_by: Termination::ReachedOne,
        chi0,
        cs: *cs,
    })
}

/// Refine a bracketed crossing of s(q) = sgn (n - m(q)) by bisection on the
/// step's cubic Hermite interpolant.
fn refine_crossing(
    cs: &CoefficientSet,
    sgn: f64,
    qa: f64,
    qb: f64,
    na: f64,
    nb: f64,
    fa: f64,
    fb: f64,
) -> (f64, f64) {
    let nq = |q: f64| hermite(q, qa, qb, na, nb, fa, fb);
    let s = |q: f64| sgn * (nq(q) - cs.m(q));
    let (mut lo, mut hi) = (qa, qb);
    for _ in 0..90 {
        if hi - lo < 1e-15 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if s(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let qc = 0.5 * (lo + hi);
    (qc, nq(qc))
}

/// Locate the critical b3 by bisection on the interior-crossing predicate.
///
/// The bracket is [R, b3_upper_bound]; the crossing point is monotone in b3
/// so the predicate flips exactly once. The predicate counts crossings
/// refined beyond 1 - 1e-6 as boundary touches.
pub fn find_b3_crit(b1: f64, b2: f64, ra: f64, tol: f64) -> Result<f64> {
    if !(b1 > 0.0) {
        return Err(EndowError::DegenerateMerton { b1 });
    }
    if !(tol > 0.0) {
        return Err(EndowError::InvalidParams(format!("tol = {tol} must be positive")));
    }
    let bbar = crate::params::b3_upper_bound(b1, ra);
    let opts = ToleranceOptions::default();
    let interior = |b3: f64| -> Result<bool> {
        let cs = CoefficientSet::new(b1, b2, b3, ra)?;
        let sol = integrate_n(&cs, &opts)?;
        Ok(sol.terminated_by == Termination::CrossedM && sol.qstar < Q_CROSS_GUARD)
    };
    let mut lo = ra;
    let mut hi = bbar;
    if !interior(lo + 1e-12)? {
        return Err(EndowError::BracketFailure(format!(
            "no interior crossing at left endpoint b3 = {lo} (b1 = {b1}, b2 = {b2}, R = {ra})"
        )));
    }
    if interior(hi)? {
        // The threshold coincides with the upper bound within resolution.
        return Ok(hi);
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if interior(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cs(b1: f64, b2: f64, b3: f64, ra: f64) -> CoefficientSet {
        CoefficientSet::new(b1, b2, b3, ra).unwrap()
    }

    /// Independent fixed-step RK4 crossing oracle on the same right-hand
    /// side, stepped at dq = 1e-6 with a plain sign scan.
    fn rk4_crossing_oracle(c: &CoefficientSet) -> (f64, f64, bool) {
        let sgn = if c.ra < 1.0 { 1.0 } else { -1.0 };
        let mut q = 1e-6;
        let mut n = 1.0 + q * c.initial_slope();
        let dq = 1e-6;
        while q < 1.0 - 1e-9 {
            let h = (q / 20.0).max(1e-9).min(dq).min(1.0 - 1e-9 - q);
            let k1 = c.f_rhs(q, n);
            let k2 = c.f_rhs(q + 0.5 * h, n + 0.5 * h * k1);
            let k3 = c.f_rhs(q + 0.5 * h, n + 0.5 * h * k2);
            let k4 = c.f_rhs(q + h, n + h * k3);
            let n2 = n + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            let q2 = q + h;
            if sgn * (n2 - c.m(q2)) <= 0.0 {
                let s1 = sgn * (n - c.m(q));
                let s2 = sgn * (n2 - c.m(q2));
                let t = s1 / (s1 - s2);
                return (q + t * h, n + t * (n2 - n), true);
            }
            q = q2;
            n = n2;
        }
        (1.0, n, false)
    }

    #[test]
    fn initial_slope_reference() {
        // Closed-form quadratic: for (1, 1, 0.4, 0.5) the smaller root is
        // 0.65 - sqrt(0.6225).
        let c = cs(1.0, 1.0, 0.4, 0.5);
        let slope = c.initial_slope();
        assert!((slope - (0.65 - 0.6225_f64.sqrt())).abs() < 1e-14);
        assert!((slope - (-0.13898669190297497)).abs() < 1e-14);
        let (a, b, q0) = c.slope_quadratic();
        let resid = a * slope * slope + b * slope + q0;
        assert!(resid.abs() <= 1e-12 * a.abs().max(b.abs()).max(q0.abs()).max(1.0));
        // side condition: slope/(1-R) < (b2-b3)/b1 strictly
        assert!(slope / (1.0 - 0.5) < (1.0 - 0.4) / 1.0);
    }

    #[test]
    fn initial_slope_zero_when_b3_zero() {
        let c = cs(1.3, 1.2, 0.0, 0.5);
        assert_eq!(c.initial_slope(), 0.0);
    }

    #[test]
    fn initial_slope_market_set() {
        let c = cs(1.0, 1.3125763125763128, 0.13736263736263732, 0.5);
        let slope = c.initial_slope();
        assert!(slope < 0.0);
        let (a, b, q0) = c.slope_quadratic();
        assert!((a * slope * slope + b * slope + q0).abs() < 1e-13);
    }

    #[test]
    fn rhs_zero_on_m() {
        // exact in exact arithmetic; the square-root evaluation leaves
        // roundoff of order machine epsilon
        let c = cs(1.0, 1.4, 0.4, 0.5);
        for q in [0.05, 0.3, 0.7, 0.95] {
            assert!(c.f_rhs(q, c.m(q)).abs() < 1e-13);
        }
    }

    #[test]
    fn rhs_forms_agree() {
        // 1000 quasi-random points in the admissible band, both risk
        // aversions, forms A/B/C within 1e-10 relative.
        let sets = [cs(1.0, 1.4, 0.4, 0.5), cs(0.8, 2.5, 1.1, 2.0)];
        for c in sets {
            let mut st = 0x9e3779b97f4a7c15u64;
            let mut unit = || {
                st = st.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (st >> 11) as f64 / (1u64 << 53) as f64
            };
            for _ in 0..500 {
                let q = 0.01 + 0.97 * unit();
                let t = 0.02 + 0.96 * unit();
                // n strictly between m and ell
                let n = c.m(q) + t * (c.ell(q) - c.m(q));
                if !c.in_band(q, n) {
                    continue;
                }
                let fa = c.f_rhs_form_a(q, n);
                let fb = c.f_rhs_form_b(q, n);
                let fc = c.f_rhs(q, n);
                let scale = fc.abs().max(1e-6);
                assert!(
                    (fa - fc).abs() / scale < 1e-10,
                    "A vs C at q={q} n={n}: {fa} {fc}"
                );
                assert!(
                    (fb - fc).abs() / scale < 1e-10,
                    "B vs C at q={q} n={n}: {fb} {fc}"
                );
            }
        }
    }

    #[test]
    fn rhs_b2_one_reduction() {
        // With b2 = 1 the square-root term vanishes on the admissible side,
        // so the reduced equation matches the full one.
        let full = cs(1.0, 1.0, 0.4, 0.5);
        let mut reduced = full;
        reduced.force_upsilon_zero = true;
        for i in 0..60 {
            let q = 0.015 * (i as f64 + 1.0);
            for t in [0.1, 0.5, 0.9] {
                let n = full.m(q) + t * (full.ell(q) - full.m(q));
                let a = full.f_rhs(q, n);
                let b = reduced.f_rhs(q, n);
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn n_prime_guards_band() {
        let c = cs(1.0, 1.4, 0.4, 0.5);
        assert!(n_prime(0.3, c.ell(0.3) + 0.01, &c).is_err());
        assert!(n_prime(0.3, 0.5 * (c.m(0.3) + c.ell(0.3)), &c).is_ok());
    }

    #[test]
    fn integrate_no_crossing_for_nonpositive_b3() {
        let c = cs(1.0, 1.2, -0.3, 0.5);
        let sol = integrate_n(&c, &ToleranceOptions::default()).unwrap();
        assert_eq!(sol.qstar, 0.0);
        assert_eq!(sol.terminated_by, Termination::CrossedM);
        assert_eq!(sol.qgrid.len(), 1);
    }

    #[test]
    fn integrate_reference_set_matches_oracle() {
        let c = cs(1.0, 1.0, 0.4, 0.5);
        let sol = integrate_n(&c, &ToleranceOptions::tight()).unwrap();
        assert_eq!(sol.terminated_by, Termination::CrossedM);
        // frozen from the fixed-step RK4 oracle below
        assert!((sol.qstar - 0.46952226).abs() < 1e-6, "qstar = {}", sol.qstar);
        assert!((sol.n_qstar - 0.96120834).abs() < 1e-6);
        let (qo, no, crossed) = rk4_crossing_oracle(&c);
        assert!(crossed);
        assert!((sol.qstar - qo).abs() < 1e-7, "impl {} oracle {}", sol.qstar, qo);
        assert!((sol.n_qstar - no).abs() < 1e-7);
        // crossing consistency and the lower bound on the crossing point
        assert!((sol.n_qstar - c.m(sol.qstar)).abs() <= 1e-8);
        assert!(sol.qstar > c.b3 / (2.0 * c.ra));
        assert!(sol.qstar > 0.4 && sol.qstar < 1.0);
    }

    #[test]
    fn integrate_r_above_one_matches_oracle() {
        let c = cs(1.0, 1.0, 3.5, 2.0);
        let sol = integrate_n(&c, &ToleranceOptions::tight()).unwrap();
        assert_eq!(sol.terminated_by, Termination::CrossedM);
        let (qo, _no, crossed) = rk4_crossing_oracle(&c);
        assert!(crossed);
        assert!((sol.qstar - qo).abs() < 1e-6, "impl {} oracle {}", sol.qstar, qo);
        assert!(sol.qstar > c.b3 / (2.0 * c.ra));
    }

    #[test]
    fn integrate_boundary_case_reaches_one() {
        // b3 exactly on the ill-posed frontier with b2 > 1: the run ends at
        // the right endpoint with n small and positive.
        let (b1, b2, ra) = (1.0, 1.3, 0.5);
        let b3 = b1 / (1.0 - ra) + b2 * ra;
        let c = cs(b1, b2, b3, ra);
        let sol = integrate_n(&c, &ToleranceOptions::default()).unwrap();
        assert_eq!(sol.terminated_by, Termination::ReachedOne);
        assert_eq!(sol.qstar, 1.0);
        assert!(sol.n_end() >= 0.0 && sol.n_end() < 0.05);
    }

    #[test]
    fn monotone_band_invariants() {
        for c in [cs(1.0, 1.4, 0.4, 0.5), cs(0.7, 1.1, 0.3, 0.5), cs(1.0, 1.5, 2.6, 2.0)] {
            let sol = integrate_n(&c, &ToleranceOptions::default()).unwrap();
            for i in 1..sol.qgrid.len() - 1 {
                let (q, n, f) = (sol.qgrid[i], sol.nvals[i], sol.fvals[i]);
                assert!(
                    (1.0 - c.ra) * (c.ell(q) - n) > 0.0,
                    "band violated at q={q}"
                );
                // n always moves toward m: sign(n') = sign(m - n)
                let side = c.m(q) - n;
                if side.abs() > 1e-9 {
                    assert!(f * side >= 0.0 || f.abs() < 1e-9, "slope sign at q={q}");
                }
            }
        }
    }

    #[test]
    fn b3_crit_reference_cases() {
        // b2 = 1: threshold equals the closed-form upper bound.
        let b = find_b3_crit(1.0, 1.0, 0.5, 1e-6).unwrap();
        assert!((b - 1.0).abs() < 1e-4, "{b}");
        let b = find_b3_crit(0.2, 1.0, 0.5, 1e-6).unwrap();
        assert!((b - 0.9).abs() < 1e-4, "{b}");
        let b = find_b3_crit(1.0, 1.0, 2.0, 1e-6).unwrap();
        assert!((b - 4.0).abs() < 1e-4, "{b}");
        // large b2: threshold collapses to R
        let b = find_b3_crit(1.0, 1e4, 0.5, 1e-5).unwrap();
        assert!((b - 0.5).abs() < 0.05, "{b}");
    }

    #[test]
    fn qstar_monotone_in_parameters() {
        // q* is decreasing in b1 and increasing in b3. It is increasing in
        // b2 as well: m does not depend on b2 while (1-R) n is pointwise
        // increasing in it, so the crossing can only move right -- which is
        // also what the critical-threshold limit (b3_crit -> R as
        // b2 -> infinity) requires.
        let opts = ToleranceOptions::default();
        let qs = |b1: f64, b2: f64, b3: f64| {
            integrate_n(&cs(b1, b2, b3, 0.5), &opts).unwrap().qstar
        };
        let base = qs(1.0, 1.2, 0.4);
        assert!(qs(1.3, 1.2, 0.4) < base);
        assert!(qs(1.0, 1.6, 0.4) > base);
        assert!(qs(1.0, 1.2, 0.45) > base);
    }

    #[test]
    fn pointwise_n_monotone_in_parameters() {
        // (1-R) n pointwise increasing in b1 and b2, decreasing in b3.
        let opts = ToleranceOptions::default();
        let sol = |b1: f64, b2: f64, b3: f64| integrate_n(&cs(b1, b2, b3, 0.5), &opts).unwrap();
        let base = sol(1.0, 1.2, 0.4);
        let up_b1 = sol(1.15, 1.2, 0.4);
        let up_b2 = sol(1.0, 1.4, 0.4);
        let up_b3 = sol(1.0, 1.2, 0.5);
        let qmax = base
            .qstar
            .min(up_b1.qstar)
            .min(up_b2.qstar)
            .min(up_b3.qstar)
            * 0.95;
        for i in 1..20 {
            let q = qmax * i as f64 / 20.0;
            let b = base.eval_n(q);
            assert!(up_b1.eval_n(q) >= b - 1e-9, "b1 monotonicity at q={q}");
            assert!(up_b2.eval_n(q) >= b - 1e-9, "b2 monotonicity at q={q}");
            assert!(up_b3.eval_n(q) <= b + 1e-9, "b3 monotonicity at q={q}");
        }
    }
}
