//! Hamiltonian/Lagrangian models and the pointwise shock quantities built
//! from them: the Rankine-Hugoniot velocity `v`, the boundary drift rate
//! `beta`, the transport coefficient `K`, the Legendre transform, and
//! closed-form fundamental solutions for (x,t)-independent Hamiltonians.

use std::sync::Arc;

use crate::error::{CoreError, Result};

/// Shared closure over (x, t, rho) or (x, t, v).
pub type Map3 = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// Structural class of the Hamiltonian.
///
/// `Increasing` models have `H_rho > 0` on the momentum box, so all shocks
/// travel left and the boundary process in time is Markov. `Coercive`
/// models admit a finite Legendre transform and drive the
/// fundamental-solution machinery instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    Increasing,
    Coercive,
}

/// A `C^2` Hamiltonian `H(x, t, rho)` with momentum bounds and derivative
/// closures. Missing derivatives fall back to central differences; the two
/// routes are compared by [`HamiltonianModel::self_check`] at startup.
#[derive(Clone)]
pub struct HamiltonianModel {
    pub name: String,
    pub flavor: Flavor,
    pub p_minus: f64,
    pub p_plus: f64,
    h: Map3,
    h_rho: Option<Map3>,
    h_x: Option<Map3>,
    h_rho_rho: Option<Map3>,
    h_rho_x: Option<Map3>,
    h_xx: Option<Map3>,
    lagrangian: Option<ClosedLagrangian>,
    xt_dependent: bool,
}

#[derive(Clone)]
struct ClosedLagrangian {
    l: Map3,
    l_v: Map3,
    l_x: Map3,
    c0: f64,
    c1: f64,
    c2: f64,
}

const FD_STEP_FIRST: f64 = 1e-5;
const FD_STEP_SECOND: f64 = 1e-4;

#[inline]
fn fd_scale(v: f64) -> f64 {
    1.0f64.max(v.abs())
}

impl HamiltonianModel {
    /// Model with derivative fallbacks only.
    pub fn from_h(name: &str, flavor: Flavor, p_minus: f64, p_plus: f64, h: Map3) -> Self {
        assert!(p_plus > p_minus);
        HamiltonianModel {
            name: name.to_string(),
            flavor,
            p_minus,
            p_plus,
            h,
            h_rho: None,
            h_x: None,
            h_rho_rho: None,
            h_rho_x: None,
            h_xx: None,
            lagrangian: None,
            xt_dependent: true,
        }
    }

    pub fn with_derivatives(
        mut self,
        h_rho: Map3,
        h_x: Map3,
        h_rho_rho: Map3,
        h_rho_x: Map3,
        h_xx: Map3,
    ) -> Self {
        self.h_rho = Some(h_rho);
        self.h_x = Some(h_x);
        self.h_rho_rho = Some(h_rho_rho);
        self.h_rho_x = Some(h_rho_x);
        self.h_xx = Some(h_xx);
        self
    }

    fn with_closed_lagrangian(
        mut self,
        l: Map3,
        l_v: Map3,
        l_x: Map3,
        c: (f64, f64, f64),
    ) -> Self {
        self.lagrangian = Some(ClosedLagrangian {
            l,
            l_v,
            l_x,
            c0: c.0,
            c1: c.1,
            c2: c.2,
        });
        self
    }

    fn mark_xt_independent(mut self) -> Self {
        self.xt_dependent = false;
        self
    }

    pub fn is_xt_dependent(&self) -> bool {
        self.xt_dependent
    }

    pub fn momentum_span(&self) -> f64 {
        self.p_plus - self.p_minus
    }

    #[inline]
    pub fn h(&self, x: f64, t: f64, rho: f64) -> f64 {
        (self.h)(x, t, rho)
    }

    #[inline]
    pub fn h_rho(&self, x: f64, t: f64, rho: f64) -> f64 {
        match &self.h_rho {
            Some(f) => f(x, t, rho),
            None => {
                let e = FD_STEP_FIRST * fd_scale(rho);
                ((self.h)(x, t, rho + e) - (self.h)(x, t, rho - e)) / (2.0 * e)
            }
        }
    }

    #[inline]
    pub fn h_x(&self, x: f64, t: f64, rho: f64) -> f64 {
        match &self.h_x {
            Some(f) => f(x, t, rho),
            None => {
                let e = FD_STEP_FIRST * fd_scale(x);
                ((self.h)(x + e, t, rho) - (self.h)(x - e, t, rho)) / (2.0 * e)
            }
        }
    }

    #[inline]
    pub fn h_rho_rho(&self, x: f64, t: f64, rho: f64) -> f64 {
        match &self.h_rho_rho {
            Some(f) => f(x, t, rho),
            None => {
                let e = FD_STEP_SECOND * fd_scale(rho);
                ((self.h)(x, t, rho + e) - 2.0 * (self.h)(x, t, rho) + (self.h)(x, t, rho - e))
                    / (e * e)
            }
        }
    }

    #[inline]
    pub fn h_rho_x(&self, x: f64, t: f64, rho: f64) -> f64 {
        match &self.h_rho_x {
            Some(f) => f(x, t, rho),
            None => {
                let er = FD_STEP_SECOND * fd_scale(rho);
                let ex = FD_STEP_SECOND * fd_scale(x);
                ((self.h)(x + ex, t, rho + er) - (self.h)(x + ex, t, rho - er)
                    - (self.h)(x - ex, t, rho + er)
                    + (self.h)(x - ex, t, rho - er))
                    / (4.0 * ex * er)
            }
        }
    }

    #[inline]
    pub fn h_xx(&self, x: f64, t: f64, rho: f64) -> f64 {
        match &self.h_xx {
            Some(f) => f(x, t, rho),
            None => {
                let e = FD_STEP_SECOND * fd_scale(x);
                ((self.h)(x + e, t, rho) - 2.0 * (self.h)(x, t, rho) + (self.h)(x - e, t, rho))
                    / (e * e)
            }
        }
    }

    pub fn check_momentum(&self, what: &'static str, rho: f64) -> Result<()> {
        let slack = 1e-9 * self.momentum_span().max(1.0);
        if rho < self.p_minus - slack || rho > self.p_plus + slack {
            return Err(CoreError::DomainViolation {
                what,
                value: rho,
                lo: self.p_minus,
                hi: self.p_plus,
            });
        }
        Ok(())
    }

    /// Compare analytic derivative closures with the finite-difference
    /// fallbacks on a sample box. Also enforces convexity and, for
    /// `Increasing` models, positivity of `H_rho`.
    pub fn self_check(&self, xs: &[f64], ts: &[f64]) -> Result<()> {
        let fd = HamiltonianModel {
            h_rho: None,
            h_x: None,
            h_rho_rho: None,
            h_rho_x: None,
            h_xx: None,
            ..self.clone()
        };
        let nrho = 9;
        for &x in xs {
            for &t in ts {
                for k in 0..nrho {
                    let rho = self.p_minus
                        + self.momentum_span() * (k as f64 + 0.5) / nrho as f64;
                    let pairs = [
                        ("H_rho", self.h_rho(x, t, rho), fd.h_rho(x, t, rho), 1e-6),
                        ("H_x", self.h_x(x, t, rho), fd.h_x(x, t, rho), 1e-6),
                        (
                            "H_rho_rho",
                            self.h_rho_rho(x, t, rho),
                            fd.h_rho_rho(x, t, rho),
                            1e-5,
                        ),
                        (
                            "H_rho_x",
                            self.h_rho_x(x, t, rho),
                            fd.h_rho_x(x, t, rho),
                            1e-5,
                        ),
                        ("H_xx", self.h_xx(x, t, rho), fd.h_xx(x, t, rho), 1e-5),
                    ];
                    for (what, a, b, tol) in pairs {
                        let scale = 1.0 + a.abs().max(b.abs());
                        if (a - b).abs() > tol * scale {
                            return Err(CoreError::Hypothesis(format!(
                                "analytic {what}({x}, {t}, {rho}) = {a} disagrees with finite differences {b}"
                            )));
                        }
                    }
                    if self.h_rho_rho(x, t, rho) < -1e-9 {
                        return Err(CoreError::Hypothesis(format!(
                            "H_rho_rho({x}, {t}, {rho}) < 0: not convex in rho"
                        )));
                    }
                    if self.flavor == Flavor::Increasing && self.h_rho(x, t, rho) <= 0.0 {
                        return Err(CoreError::Hypothesis(format!(
                            "flavor = Increasing but H_rho({x}, {t}, {rho}) <= 0"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Relative coincidence threshold for the removable `0/0` in divided
/// differences of the flux.
const COINCIDENCE_REL: f64 = 1e-9;

/// Divided flux difference without domain checks; shared by `v` and `v_hat`.
#[inline]
pub(crate) fn flux_slope(
    model: &HamiltonianModel,
    x: f64,
    t: f64,
    rho_minus: f64,
    rho_plus: f64,
    span: f64,
) -> f64 {
    if (rho_plus - rho_minus).abs() < COINCIDENCE_REL * span.max(1e-300) {
        model.h_rho(x, t, 0.5 * (rho_minus + rho_plus))
    } else {
        (model.h(x, t, rho_minus) - model.h(x, t, rho_plus)) / (rho_minus - rho_plus)
    }
}

/// Rankine-Hugoniot shock velocity
/// `v = (H(rho-) - H(rho+)) / (rho- - rho+)`, with the coincidence limit
/// `H_rho` when the two states merge. Symmetric in its momentum arguments.
pub fn shock_velocity(
    model: &HamiltonianModel,
    x: f64,
    t: f64,
    rho_minus: f64,
    rho_plus: f64,
) -> Result<f64> {
    model.check_momentum("rho_minus", rho_minus)?;
    model.check_momentum("rho_plus", rho_plus)?;
    Ok(flux_slope(model, x, t, rho_minus, rho_plus, model.momentum_span()))
}

/// Drift in momentum space evaluated along a field: anything whose value
/// `b(x, t, rho)` can be read pointwise.
pub trait Drift: Send + Sync {
    fn eval(&self, x: f64, t: f64, rho: f64) -> f64;

    /// `d b / d rho`, central differences by default.
    fn eval_rho(&self, x: f64, t: f64, rho: f64) -> f64 {
        let e = 1e-6 * fd_scale(rho);
        (self.eval(x, t, rho + e) - self.eval(x, t, rho - e)) / (2.0 * e)
    }

    /// Constant value, when the field is spatially and temporally uniform.
    /// Enables closed-form in-x flows on hot paths.
    fn const_value(&self) -> Option<f64> {
        None
    }

    /// Momentum range outside of which trajectories count as escaped.
    fn rho_bounds(&self) -> Option<(f64, f64)> {
        None
    }
}

pub struct ZeroDrift;

impl Drift for ZeroDrift {
    fn eval(&self, _x: f64, _t: f64, _rho: f64) -> f64 {
        0.0
    }
    fn eval_rho(&self, _x: f64, _t: f64, _rho: f64) -> f64 {
        0.0
    }
    fn const_value(&self) -> Option<f64> {
        Some(0.0)
    }
}

pub struct ConstDrift(pub f64);

impl Drift for ConstDrift {
    fn eval(&self, _x: f64, _t: f64, _rho: f64) -> f64 {
        self.0
    }
    fn eval_rho(&self, _x: f64, _t: f64, _rho: f64) -> f64 {
        0.0
    }
    fn const_value(&self) -> Option<f64> {
        Some(self.0)
    }
}

/// Drift backed by a closure.
pub struct FnDrift<F>(pub F);

impl<F: Fn(f64, f64, f64) -> f64 + Send + Sync> Drift for FnDrift<F> {
    fn eval(&self, x: f64, t: f64, rho: f64) -> f64 {
        (self.0)(x, t, rho)
    }
}

/// `beta(x, t, rho) = H_x + b H_rho`: the rate of change of the boundary
/// value in time.
#[inline]
pub fn beta(model: &HamiltonianModel, drift: &dyn Drift, x: f64, t: f64, rho: f64) -> f64 {
    model.h_x(x, t, rho) + drift.eval(x, t, rho) * model.h_rho(x, t, rho)
}

/// `K(x, t, rho_first, rho_second) = b(rho_first) v(rho_second, rho_first)
/// - beta(rho_first)`.
///
/// The drift and `beta` are evaluated at the *first* momentum argument; `v`
/// is symmetric so the order of its arguments is immaterial.
pub fn k_coeff(
    model: &HamiltonianModel,
    drift: &dyn Drift,
    x: f64,
    t: f64,
    rho_first: f64,
    rho_second: f64,
) -> Result<f64> {
    let v = shock_velocity(model, x, t, rho_second, rho_first)?;
    Ok(drift.eval(x, t, rho_first) * v - beta(model, drift, x, t, rho_first))
}

/// Unchecked variants for solver hot loops where arguments are grid nodes
/// already known to lie in the momentum box.
#[inline]
pub fn shock_velocity_unchecked(
    model: &HamiltonianModel,
    x: f64,
    t: f64,
    rho_minus: f64,
    rho_plus: f64,
) -> f64 {
    flux_slope(model, x, t, rho_minus, rho_plus, model.momentum_span())
}

#[inline]
pub fn k_coeff_unchecked(
    model: &HamiltonianModel,
    drift: &dyn Drift,
    x: f64,
    t: f64,
    rho_first: f64,
    rho_second: f64,
) -> f64 {
    drift.eval(x, t, rho_first) * shock_velocity_unchecked(model, x, t, rho_second, rho_first)
        - beta(model, drift, x, t, rho_first)
}

/// `d v / d rho_minus` at fixed `rho_plus`, with its coincidence limit
/// `H_rho_rho / 2`.
pub fn shock_velocity_d_minus(
    model: &HamiltonianModel,
    x: f64,
    t: f64,
    rho_minus: f64,
    rho_plus: f64,
) -> f64 {
    let span = model.momentum_span();
    if (rho_plus - rho_minus).abs() < 1e-6 * span.max(1.0) {
        0.5 * model.h_rho_rho(x, t, rho_minus)
    } else {
        let v = flux_slope(model, x, t, rho_minus, rho_plus, span);
        (model.h_rho(x, t, rho_minus) - v) / (rho_minus - rho_plus)
    }
}

/// Legendre pair of a coercive Hamiltonian:
/// `L(x, t, v) = inf_p (p v + H(x, t, p))`.
#[derive(Clone)]
pub struct LagrangianModel {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    kind: LagrangianKind,
}

#[derive(Clone)]
enum LagrangianKind {
    Closed { l: Map3, l_v: Map3, l_x: Map3 },
    Numeric(NumericLegendre),
}

#[derive(Clone)]
struct NumericLegendre {
    h: Map3,
    h_rho: Map3,
    h_rho_rho: Map3,
    p_lo: f64,
    p_hi: f64,
    n: usize,
}

impl NumericLegendre {
    /// Grid argmin of `p v + H(x, t, p)` with one Newton refinement.
    fn argmin(&self, x: f64, t: f64, v: f64) -> Result<f64> {
        let dp = (self.p_hi - self.p_lo) / (self.n - 1) as f64;
        let mut best = (f64::INFINITY, 0usize);
        for k in 0..self.n {
            let p = self.p_lo + dp * k as f64;
            let g = p * v + (self.h)(x, t, p);
            if g < best.0 {
                best = (g, k);
            }
        }
        if best.1 == 0 || best.1 == self.n - 1 {
            return Err(CoreError::NonCoercive { v });
        }
        let mut p = self.p_lo + dp * best.1 as f64;
        let d2 = (self.h_rho_rho)(x, t, p);
        if d2 > 1e-12 {
            let step = (v + (self.h_rho)(x, t, p)) / d2;
            let refined = p - step;
            if refined > p - dp && refined < p + dp {
                p = refined;
            }
        }
        Ok(p)
    }
}

impl LagrangianModel {
    pub fn l(&self, x: f64, t: f64, v: f64) -> Result<f64> {
        match &self.kind {
            LagrangianKind::Closed { l, .. } => Ok(l(x, t, v)),
            LagrangianKind::Numeric(n) => {
                let p = n.argmin(x, t, v)?;
                Ok(p * v + (n.h)(x, t, p))
            }
        }
    }

    /// `L_v`; for the numeric route this is the argmin itself (envelope
    /// theorem).
    pub fn l_v(&self, x: f64, t: f64, v: f64) -> Result<f64> {
        match &self.kind {
            LagrangianKind::Closed { l_v, .. } => Ok(l_v(x, t, v)),
            LagrangianKind::Numeric(n) => n.argmin(x, t, v),
        }
    }

    pub fn l_x(&self, x: f64, t: f64, v: f64) -> Result<f64> {
        match &self.kind {
            LagrangianKind::Closed { l_x, .. } => Ok(l_x(x, t, v)),
            LagrangianKind::Numeric(n) => {
                let p = n.argmin(x, t, v)?;
                let e = FD_STEP_FIRST * fd_scale(x);
                Ok(((n.h)(x + e, t, p) - (n.h)(x - e, t, p)) / (2.0 * e))
            }
        }
    }
}

/// Number of momentum nodes in the numeric Legendre grid.
const LEGENDRE_GRID: usize = 513;

/// Build the Legendre transform of `model` numerically: grid infimum over
/// `[P-, P+]` with one Newton refinement from the grid argmin.
///
/// Probes a fan of velocities first; if any infimum escapes the grid the
/// Hamiltonian is not coercive on the declared box and a structured error
/// is returned (linear Hamiltonians degenerate this way).
pub fn legendre_transform(model: &HamiltonianModel) -> Result<LagrangianModel> {
    let h = model.h.clone();
    let hr = {
        let m = model.clone();
        Arc::new(move |x: f64, t: f64, p: f64| m.h_rho(x, t, p)) as Map3
    };
    let hrr = {
        let m = model.clone();
        Arc::new(move |x: f64, t: f64, p: f64| m.h_rho_rho(x, t, p)) as Map3
    };
    let numeric = NumericLegendre {
        h,
        h_rho: hr,
        h_rho_rho: hrr,
        p_lo: model.p_minus,
        p_hi: model.p_plus,
        n: LEGENDRE_GRID,
    };

    // Interior argmins exist exactly for v in (-H_rho(P+), -H_rho(P-)).
    let v_hi = -model.h_rho(0.0, 0.0, model.p_minus);
    let v_lo = -model.h_rho(0.0, 0.0, model.p_plus);
    let width = v_hi - v_lo;
    if !(width > 1e-9 * fd_scale(v_hi)) {
        return Err(CoreError::NonCoercive { v: v_lo });
    }
    let mut probes = Vec::new();
    let n_probe = 17;
    for k in 0..n_probe {
        let v = v_lo + width * (0.05 + 0.9 * k as f64 / (n_probe - 1) as f64);
        numeric.argmin(0.0, 0.0, v)?;
        probes.push(v);
    }

    // Growth constants estimated on the probe fan; descriptive only.
    let mut c1 = 1e-6f64;
    let mut neg_l = Vec::new();
    for &v in &probes {
        let p = numeric.argmin(0.0, 0.0, v)?;
        let l = p * v + (numeric.h)(0.0, 0.0, p);
        neg_l.push((v, -l));
        c1 = c1.max(-l / (1.0 + v * v));
    }
    c1 *= 1.05;
    let c0 = 1.0f64.max(c1);
    let mut c2 = f64::INFINITY;
    for &(v, nl) in &neg_l {
        if v * v > 0.25 {
            c2 = c2.min((nl + c0) / (v * v));
        }
    }
    if !c2.is_finite() {
        c2 = c1;
    }
    c2 = (0.95 * c2).max(1e-6);

    Ok(LagrangianModel {
        c0,
        c1,
        c2,
        kind: LagrangianKind::Numeric(numeric),
    })
}

/// Inverse transform `H(x, t, p) = sup_v (L(x, t, v) - p v)` by grid search
/// with one Newton refinement; used to close the round trip `H -> L -> H`.
pub fn legendre_inverse(
    lag: &LagrangianModel,
    x: f64,
    t: f64,
    p: f64,
    v_range: (f64, f64),
    n: usize,
) -> Result<f64> {
    let n = n.max(3);
    let dv = (v_range.1 - v_range.0) / (n - 1) as f64;
    let mut best = (f64::NEG_INFINITY, v_range.0);
    for k in 0..n {
        let v = v_range.0 + dv * k as f64;
        let g = lag.l(x, t, v)? - p * v;
        if g > best.0 {
            best = (g, v);
        }
    }
    let v = best.1;
    // Newton on g'(v) = L_v - p with FD curvature.
    let e = dv.max(1e-7);
    let lv = lag.l_v(x, t, v)?;
    let lvv = (lag.l_v(x, t, v + e)? - lag.l_v(x, t, v - e)?) / (2.0 * e);
    let mut v_ref = v;
    if lvv < -1e-12 {
        let cand = v - (lv - p) / lvv;
        if cand > v - dv && cand < v + dv {
            v_ref = cand;
        }
    }
    Ok(lag.l(x, t, v_ref)? - p * v_ref)
}

/// Fundamental-solution momentum `M(x, t; y, s) = L_v((x - y)/(t - s))`,
/// implemented for (x,t)-independent Hamiltonians only.
pub fn fundamental_m(model: &HamiltonianModel, x: f64, t: f64, y: f64, s: f64) -> Result<f64> {
    if t <= s {
        return Err(CoreError::TimeOrder { t, s });
    }
    if model.xt_dependent {
        return Err(CoreError::Unsupported(
            "fundamental solutions require an (x,t)-independent Hamiltonian",
        ));
    }
    let slope = (x - y) / (t - s);
    match &model.lagrangian {
        Some(cl) => Ok((cl.l_v)(x, t, slope)),
        None => {
            let lag = legendre_transform(model)?;
            lag.l_v(x, t, slope)
        }
    }
}

/// Velocity of a shock separating two fundamental solutions:
/// the flux divided difference across `M(y-)` and `M(y+)`.
pub fn vhat(
    model: &HamiltonianModel,
    x: f64,
    t: f64,
    y_minus: f64,
    y_plus: f64,
    s: f64,
) -> Result<f64> {
    let m_minus = fundamental_m(model, x, t, y_minus, s)?;
    let m_plus = fundamental_m(model, x, t, y_plus, s)?;
    let span = 1.0f64.max(m_minus.abs() + m_plus.abs());
    Ok(flux_slope(model, x, t, m_minus, m_plus, span))
}

/// The closed Lagrangian attached to a built-in model, if any.
pub fn closed_lagrangian(model: &HamiltonianModel) -> Option<LagrangianModel> {
    model.lagrangian.as_ref().map(|cl| LagrangianModel {
        c0: cl.c0,
        c1: cl.c1,
        c2: cl.c2,
        kind: LagrangianKind::Closed {
            l: cl.l.clone(),
            l_v: cl.l_v.clone(),
            l_x: cl.l_x.clone(),
        },
    })
}

/// Built-in model library. Every entry carries analytic derivatives, so the
/// finite-difference fallback is exercised against them in `self_check`.
pub mod library {
    use super::*;

    /// `H = rho^2 / 2`.
    pub fn burgers(p_minus: f64, p_plus: f64) -> HamiltonianModel {
        HamiltonianModel::from_h(
            "burgers",
            Flavor::Coercive,
            p_minus,
            p_plus,
            Arc::new(|_x, _t, r| 0.5 * r * r),
        )
        .with_derivatives(
            Arc::new(|_x, _t, r| r),
            Arc::new(|_x, _t, _r| 0.0),
            Arc::new(|_x, _t, _r| 1.0),
            Arc::new(|_x, _t, _r| 0.0),
            Arc::new(|_x, _t, _r| 0.0),
        )
        .with_closed_lagrangian(
            Arc::new(|_x, _t, v| -0.5 * v * v),
            Arc::new(|_x, _t, v| -v),
            Arc::new(|_x, _t, _v| 0.0),
            (0.1, 0.5, 0.5),
        )
        .mark_xt_independent()
    }

    /// `H = rho + rho^2 / 2`, increasing on `rho >= 0`.
    pub fn shifted_burgers(p_minus: f64, p_plus: f64) -> HamiltonianModel {
        assert!(p_minus >= 0.0, "shifted Burgers is increasing on rho >= 0");
        HamiltonianModel::from_h(
            "shifted_burgers",
            Flavor::Increasing,
            p_minus,
            p_plus,
            Arc::new(|_x, _t, r| r + 0.5 * r * r),
        )
        .with_derivatives(
            Arc::new(|_x, _t, r| 1.0 + r),
            Arc::new(|_x, _t, _r| 0.0),
            Arc::new(|_x, _t, _r| 1.0),
            Arc::new(|_x, _t, _r| 0.0),
            Arc::new(|_x, _t, _r| 0.0),
        )
        .with_closed_lagrangian(
            Arc::new(|_x, _t, v| -0.5 * (v + 1.0) * (v + 1.0)),
            Arc::new(|_x, _t, v| -(v + 1.0)),
            Arc::new(|_x, _t, _v| 0.0),
            (0.6, 1.0, 0.25),
        )
        .mark_xt_independent()
    }

    /// `H = c rho`.
    pub fn linear(c: f64, p_minus: f64, p_plus: f64) -> HamiltonianModel {
        let flavor = if c > 0.0 {
            Flavor::Increasing
        } else {
            Flavor::Coercive
        };
        HamiltonianModel::from_h(
            "linear",
            flavor,
            p_minus,
            p_plus,
            Arc::new(move |_x, _t, r| c * r),
        )
        .with_derivatives(
            Arc::new(move |_x, _t, _r| c),
            Arc::new(|_x, _t, _r| 0.0),
            Arc::new(|_x, _t, _r| 0.0),
            Arc::new(|_x, _t, _r| 0.0),
            Arc::new(|_x, _t, _r| 0.0),
        )
        .mark_xt_independent()
    }

    /// `H = rho + rho^2/2 - eps sin(x) rho`: the (x,t)-dependent test model.
    ///
    /// `H_xx = eps sin(x) rho`, so on windows with `sin(x) <= 0` and
    /// `rho >= 0` the model satisfies `H_xx <= 0` and nonpositive drifts
    /// stay nonpositive.
    pub fn eps_sin(eps: f64, p_minus: f64, p_plus: f64) -> HamiltonianModel {
        assert!(p_minus >= 0.0 && eps < 1.0, "needs H_rho = 1 + rho - eps sin x > 0");
        HamiltonianModel::from_h(
            "eps_sin",
            Flavor::Increasing,
            p_minus,
            p_plus,
            Arc::new(move |x, _t, r| r + 0.5 * r * r - eps * x.sin() * r),
        )
        .with_derivatives(
            Arc::new(move |x, _t, r| 1.0 + r - eps * x.sin()),
            Arc::new(move |x, _t, r| -eps * x.cos() * r),
            Arc::new(|_x, _t, _r| 1.0),
            Arc::new(move |x, _t, _r| -eps * x.cos()),
            Arc::new(move |x, _t, r| eps * x.sin() * r),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::library::*;
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn self_check_accepts_library_models() {
        for m in [
            burgers(-3.0, 3.0),
            shifted_burgers(0.0, 1.0),
            linear(2.0, 0.0, 1.0),
            eps_sin(0.2, 0.0, 1.0),
        ] {
            m.self_check(&[-2.0, 0.3, 1.7], &[0.0, 0.5]).unwrap();
        }
    }

    #[test]
    fn self_check_rejects_wrong_derivative() {
        let bad = burgers(-3.0, 3.0).with_derivatives(
            Arc::new(|_x, _t, r| r + 0.1),
            Arc::new(|_x, _t, _r| 0.0),
            Arc::new(|_x, _t, _r| 1.0),
            Arc::new(|_x, _t, _r| 0.0),
            Arc::new(|_x, _t, _r| 0.0),
        );
        assert!(bad.self_check(&[0.0], &[0.0]).is_err());
    }

    #[test]
    fn shock_velocity_burgers_is_mean_of_states() {
        let m = burgers(-3.0, 3.0);
        let v = shock_velocity(&m, 0.0, 0.0, 1.0, 3.0).unwrap();
        assert_eq!(v, 2.0);
    }

    #[test]
    fn shock_velocity_linear_is_the_slope() {
        let m = linear(1.5, -3.0, 3.0);
        for (a, b) in [(-1.0, 2.0), (0.0, 0.25), (-2.5, -2.0)] {
            assert!((shock_velocity(&m, 0.3, 0.1, a, b).unwrap() - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn shock_velocity_coincidence_limit_is_h_rho() {
        let m = burgers(-3.0, 3.0);
        let v = shock_velocity(&m, 0.0, 0.0, 1.25, 1.25).unwrap();
        assert!((v - 1.25).abs() < 1e-12);
        let almost = shock_velocity(&m, 0.0, 0.0, 1.25, 1.25 + 1e-12).unwrap();
        assert!((almost - 1.25).abs() < 1e-9);
    }

    #[test]
    fn shock_velocity_rejects_out_of_range_momentum() {
        let m = burgers(-1.0, 1.0);
        assert!(matches!(
            shock_velocity(&m, 0.0, 0.0, 0.0, 2.0),
            Err(CoreError::DomainViolation { .. })
        ));
    }

    #[test]
    fn shock_velocity_is_symmetric_and_monotone_in_slopes() {
        let m = shifted_burgers(0.0, 1.0);
        let mut rng = stream(11, 0);
        for _ in 0..200 {
            let mut v: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let (lo, mid, hi) = (v[0], v[1], v[2]);
            let ab = shock_velocity(&m, 0.0, 0.0, lo, hi).unwrap();
            let ba = shock_velocity(&m, 0.0, 0.0, hi, lo).unwrap();
            assert_eq!(ab, ba);
            let left = shock_velocity(&m, 0.0, 0.0, lo, mid).unwrap();
            let right = shock_velocity(&m, 0.0, 0.0, mid, hi).unwrap();
            assert!(right >= left - 1e-13);
            // Increasing flavor: every admissible shock moves left.
            assert!(ab > 0.0);
        }
    }

    #[test]
    fn beta_and_k_coeff_arithmetic() {
        let m = burgers(-3.0, 3.0);
        let b = ConstDrift(-1.0);
        assert_eq!(beta(&m, &ZeroDrift, 0.4, 0.2, 2.0), 0.0);
        assert_eq!(beta(&m, &b, 0.4, 0.2, 2.0), -2.0);
        let k = k_coeff(&m, &b, 0.0, 0.0, 2.0, 0.0).unwrap();
        assert_eq!(k, 1.0);
        assert_eq!(k_coeff(&m, &ZeroDrift, 0.0, 0.0, 2.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn beta_matches_raw_derivative_recomputation() {
        let m = eps_sin(0.3, 0.0, 1.0);
        let b = FnDrift(|x: f64, t: f64, r: f64| -0.2 - 0.1 * (x + t) * r);
        let mut rng = stream(12, 0);
        for _ in 0..50 {
            let x = -3.0 + 6.0 * rng.gen::<f64>();
            let t = rng.gen::<f64>();
            let r = rng.gen::<f64>();
            let direct = m.h_x(x, t, r) + b.eval(x, t, r) * m.h_rho(x, t, r);
            assert!((beta(&m, &b, x, t, r) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn legendre_burgers_is_negative_half_v_squared() {
        let m = burgers(-6.0, 6.0);
        let lag = legendre_transform(&m).unwrap();
        for v in [-2.0, -0.5, 0.0, 1.0, 3.0] {
            assert!((lag.l(0.0, 0.0, v).unwrap() + 0.5 * v * v).abs() < 1e-8);
            assert!((lag.l_v(0.0, 0.0, v).unwrap() + v).abs() < 1e-8);
        }
    }

    #[test]
    fn legendre_shifted_quadratic_matches_analytic_infimum() {
        // H = p^2/2 + p gives L(v) = -(v + 1)^2 / 2.
        let m = HamiltonianModel::from_h(
            "shifted-quadratic",
            Flavor::Coercive,
            -6.0,
            6.0,
            Arc::new(|_x, _t, p| 0.5 * p * p + p),
        )
        .mark_xt_independent();
        let lag = legendre_transform(&m).unwrap();
        for v in [-2.0, 0.0, 1.5, 3.0] {
            let want = -0.5 * (v + 1.0) * (v + 1.0);
            assert!((lag.l(0.0, 0.0, v).unwrap() - want).abs() < 1e-8);
        }
    }

    #[test]
    fn legendre_rejects_linear_hamiltonian() {
        let m = linear(1.0, -3.0, 3.0);
        assert!(matches!(
            legendre_transform(&m),
            Err(CoreError::NonCoercive { .. })
        ));
    }

    #[test]
    fn legendre_round_trip_reproduces_h() {
        let m = burgers(-6.0, 6.0);
        let lag = legendre_transform(&m).unwrap();
        let dp = m.momentum_span() / (LEGENDRE_GRID - 1) as f64;
        let tol = 5.0 * dp * dp;
        let mut worst = 0.0f64;
        for k in 0..41 {
            let p = -3.0 + 6.0 * k as f64 / 40.0;
            let back = legendre_inverse(&lag, 0.0, 0.0, p, (-5.0, 5.0), 801).unwrap();
            worst = worst.max((back - m.h(0.0, 0.0, p)).abs());
        }
        assert!(worst <= tol, "round-trip error {worst} > {tol}");
    }

    #[test]
    fn lagrangian_growth_and_concavity_hold_at_probes() {
        let m = burgers(-6.0, 6.0);
        let lag = legendre_transform(&m).unwrap();
        for k in 0..21 {
            let v = -4.0 + 8.0 * k as f64 / 20.0;
            let nl = -lag.l(0.0, 0.0, v).unwrap();
            assert!(nl <= lag.c0 + lag.c1 * v * v + 1e-9);
            assert!(nl >= -lag.c0 + lag.c2 * v * v - 1e-9);
            let e = 1e-4;
            let lvv = (lag.l(0.0, 0.0, v + e).unwrap() - 2.0 * lag.l(0.0, 0.0, v).unwrap()
                + lag.l(0.0, 0.0, v - e).unwrap())
                / (e * e);
            assert!(lvv < 0.0, "L_vv = {lvv} at v = {v}");
        }
    }

    #[test]
    fn fundamental_m_burgers_closed_form() {
        let m = burgers(-6.0, 6.0);
        let got = fundamental_m(&m, 0.5, 2.0, 1.5, 0.0).unwrap();
        assert!((got - (1.5 - 0.5) / 2.0).abs() < 1e-12);
        // x = y rides the zero-slope ray.
        let at0 = fundamental_m(&m, 1.0, 2.0, 1.0, 0.0).unwrap();
        assert_eq!(at0, 0.0);
    }

    #[test]
    fn fundamental_m_is_increasing_in_y() {
        let m = burgers(-6.0, 6.0);
        let mut rng = stream(13, 0);
        for _ in 0..100 {
            let y1 = rng.gen::<f64>();
            let y2 = y1 + 0.1 + rng.gen::<f64>();
            let a = fundamental_m(&m, -0.3, 1.5, y1, 0.0).unwrap();
            let b = fundamental_m(&m, -0.3, 1.5, y2, 0.0).unwrap();
            assert!(a < b);
        }
    }

    #[test]
    fn fundamental_m_error_paths() {
        let m = burgers(-6.0, 6.0);
        assert!(matches!(
            fundamental_m(&m, 0.0, 0.0, 1.0, 1.0),
            Err(CoreError::TimeOrder { .. })
        ));
        let dep = eps_sin(0.2, 0.0, 1.0);
        assert!(matches!(
            fundamental_m(&dep, 0.0, 1.0, 0.5, 0.0),
            Err(CoreError::Unsupported(_))
        ));
    }

    #[test]
    fn vhat_burgers_closed_form_and_coincidence() {
        let m = burgers(-6.0, 6.0);
        let (x, t, s) = (0.25, 1.5, 0.0);
        let (ym, yp) = (0.4, 1.1);
        let got = vhat(&m, x, t, ym, yp, s).unwrap();
        let want = ((ym - x) + (yp - x)) / (2.0 * (t - s));
        assert!((got - want).abs() < 1e-12);
        let coincide = vhat(&m, x, t, ym, ym, s).unwrap();
        let m_val = fundamental_m(&m, x, t, ym, s).unwrap();
        assert!((coincide - m.h_rho(x, t, m_val)).abs() < 1e-12);
    }

    #[test]
    fn vhat_outflow_sign_at_large_a_plus() {
        // Labels in a bounded box, a+ beyond the support: shocks at a+ must
        // exit to the right, i.e. v_hat(a+) < 0 so xdot = -v_hat > 0.
        let m = burgers(-60.0, 60.0);
        let (y_lo, y_hi, s, a_plus) = (0.0, 1.0, 0.0, 8.0);
        let mut rng = stream(14, 0);
        for _ in 0..200 {
            let ym = y_lo + (y_hi - y_lo) * rng.gen::<f64>();
            let yp = ym + (y_hi - ym) * rng.gen::<f64>();
            let t = 1.0 + rng.gen::<f64>();
            let v = vhat(&m, a_plus, t, ym, yp.max(ym + 1e-9), s).unwrap();
            assert!(v < 0.0, "v_hat({a_plus}) = {v} should be negative");
        }
    }
}
