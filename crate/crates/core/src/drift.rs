//! The drift PDE solved by the method of characteristics, and the three
//! flows built on it: the in-x flow `phi`, the Hamiltonian flow `Theta`,
//! and the boundary flow `gamma`.
//!
//! Along the Hamiltonian characteristic `xdot = -H_rho, rhodot = H_x` the
//! drift satisfies the Riccati ODE
//! `bdot = H_rho_rho b^2 + 2 H_rho_x b + H_xx`,
//! so each grid node is filled by tracing its characteristic back to the
//! initial time, reading the initial field, and integrating forward.

use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::grid::Axis;
use crate::model::{beta, Drift, HamiltonianModel};
use crate::ode::{integrate_fixed, integrate_richardson};

/// Default integrator accuracy target for flow evaluations.
pub const FLOW_TOL: f64 = 1e-10;

/// Gridded solution `b(x, t, rho)` of the drift PDE with trilinear
/// interpolation. Immutable once built; shareable across workers.
pub struct DriftField {
    pub xs: Axis,
    pub ts: Axis,
    pub rhos: Axis,
    values: Vec<f64>,
    /// Earliest time at which `|b|` crossed the cap, if any.
    pub blow_up_time: Option<f64>,
    pub cap: f64,
}

impl DriftField {
    #[inline]
    fn idx(&self, ix: usize, it: usize, ir: usize) -> usize {
        (ix * self.ts.n + it) * self.rhos.n + ir
    }

    pub fn node(&self, ix: usize, it: usize, ir: usize) -> f64 {
        self.values[self.idx(ix, it, ir)]
    }

    /// Rows of (x, t, rho, b) for CSV export.
    pub fn rows(&self) -> impl Iterator<Item = [f64; 4]> + '_ {
        (0..self.xs.n).flat_map(move |ix| {
            (0..self.ts.n).flat_map(move |it| {
                (0..self.rhos.n).map(move |ir| {
                    [
                        self.xs.coord(ix),
                        self.ts.coord(it),
                        self.rhos.coord(ir),
                        self.node(ix, it, ir),
                    ]
                })
            })
        })
    }
}

impl Drift for DriftField {
    fn eval(&self, x: f64, t: f64, rho: f64) -> f64 {
        let (ix, wx) = self.xs.locate(x);
        let (it, wt) = self.ts.locate(t);
        let (ir, wr) = self.rhos.locate(rho);
        let mut acc = 0.0;
        for (dx, fx) in [(0usize, 1.0 - wx), (1, wx)] {
            if fx == 0.0 && self.xs.n > 1 {
                continue;
            }
            let ix2 = if self.xs.n > 1 { ix + dx } else { 0 };
            let fx = if self.xs.n > 1 { fx } else if dx == 0 { 1.0 } else { 0.0 };
            for (dt, ft) in [(0usize, 1.0 - wt), (1, wt)] {
                let it2 = if self.ts.n > 1 { it + dt } else { 0 };
                let ft = if self.ts.n > 1 { ft } else if dt == 0 { 1.0 } else { 0.0 };
                for (dr, fr) in [(0usize, 1.0 - wr), (1, wr)] {
                    let ir2 = if self.rhos.n > 1 { ir + dr } else { 0 };
                    let fr = if self.rhos.n > 1 { fr } else if dr == 0 { 1.0 } else { 0.0 };
                    let w = fx * ft * fr;
                    if w != 0.0 {
                        acc += w * self.node(ix2, it2, ir2);
                    }
                }
            }
        }
        acc
    }

    fn eval_rho(&self, x: f64, t: f64, rho: f64) -> f64 {
        // Full-cell step: inside a cell the interpolant's slope is
        // constant, so a sub-cell stencil would stall at first order.
        let e = self.rhos.step().max(1e-9);
        (self.eval(x, t, rho + e) - self.eval(x, t, rho - e)) / (2.0 * e)
    }

    fn rho_bounds(&self) -> Option<(f64, f64)> {
        Some((self.rhos.lo, self.rhos.hi))
    }
}

/// Options for [`solve_drift`].
#[derive(Debug, Clone, Copy)]
pub struct DriftSolveOptions {
    /// Characteristic integration step in t.
    pub dt: f64,
    /// Blow-up cap on `|b|`.
    pub cap: f64,
}

impl Default for DriftSolveOptions {
    fn default() -> Self {
        DriftSolveOptions {
            dt: 0.005,
            cap: 1e6,
        }
    }
}

/// Solve the drift PDE on the grid `(xs, ts, rhos)` from the initial field
/// `b0(x, rho)` at `ts.lo`.
///
/// Blow-up is detected, not assumed away: if the Riccati integration
/// crosses the cap, the field is truncated there and `blow_up_time` set;
/// the caller decides whether that is fatal.
pub fn solve_drift(
    model: &HamiltonianModel,
    b0: &(dyn Fn(f64, f64) -> f64 + Sync),
    xs: Axis,
    ts: Axis,
    rhos: Axis,
    opts: DriftSolveOptions,
) -> DriftField {
    let t0 = ts.lo;
    let hamilton = |t: f64, y: &[f64; 2]| [-model.h_rho(y[0], t, y[1]), model.h_x(y[0], t, y[1])];

    let node_count = xs.n * ts.n * rhos.n;
    let results: Vec<(f64, Option<f64>)> = (0..node_count)
        .into_par_iter()
        .map(|flat| {
            let ix = flat / (ts.n * rhos.n);
            let it = (flat / rhos.n) % ts.n;
            let ir = flat % rhos.n;
            let (x, t, rho) = (xs.coord(ix), ts.coord(it), rhos.coord(ir));
            if it == 0 || t <= t0 {
                return (b0(x, rho), None);
            }
            let n_back = ((t - t0) / opts.dt).ceil() as usize;
            let foot = integrate_fixed(&hamilton, t, [x, rho], t0, n_back.max(4));
            let b_init = b0(foot[0], foot[1]);

            // Forward leg: carry (x, rho, b) together so the Riccati
            // coefficients ride the same characteristic.
            let full = |s: f64, y: &[f64; 3]| {
                let (xx, rr, bb) = (y[0], y[1], y[2]);
                [
                    -model.h_rho(xx, s, rr),
                    model.h_x(xx, s, rr),
                    model.h_rho_rho(xx, s, rr) * bb * bb
                        + 2.0 * model.h_rho_x(xx, s, rr) * bb
                        + model.h_xx(xx, s, rr),
                ]
            };
            let n_fwd = n_back.max(4);
            let dt = (t - t0) / n_fwd as f64;
            let mut y = [foot[0], foot[1], b_init];
            let mut s = t0;
            for _ in 0..n_fwd {
                y = crate::ode::rk4_step(&full, s, &y, dt);
                s += dt;
                if !y[2].is_finite() || y[2].abs() > opts.cap {
                    return (y[2].signum() * opts.cap, Some(s));
                }
            }
            (y[2], None)
        })
        .collect();

    let mut values = Vec::with_capacity(node_count);
    let mut blow_up_time: Option<f64> = None;
    for (v, blow) in results {
        values.push(v);
        if let Some(tb) = blow {
            blow_up_time = Some(blow_up_time.map_or(tb, |cur: f64| cur.min(tb)));
        }
    }
    DriftField {
        xs,
        ts,
        rhos,
        values,
        blow_up_time,
        cap: opts.cap,
    }
}

fn check_bounds(drift: &dyn Drift, rho: f64) -> Result<()> {
    if let Some((lo, hi)) = drift.rho_bounds() {
        let slack = 1e-6 * (hi - lo).max(1.0);
        if rho < lo - slack || rho > hi + slack {
            return Err(CoreError::DomainViolation {
                what: "phi/gamma flow momentum",
                value: rho,
                lo,
                hi,
            });
        }
    }
    Ok(())
}

/// In-x flow `phi_a^x(m; t)`: solve `d rho / dz = b(z, t, rho)` from
/// `rho(a) = m` to `z = x` at frozen `t`.
pub fn phi_flow(drift: &dyn Drift, a: f64, x: f64, m: f64, t: f64) -> Result<f64> {
    if let Some(c) = drift.const_value() {
        let out = m + c * (x - a);
        check_bounds(drift, out)?;
        return Ok(out);
    }
    let f = |z: f64, y: &[f64; 1]| [drift.eval(z, t, y[0])];
    let out = integrate_richardson(&f, a, [m], x, FLOW_TOL)?;
    check_bounds(drift, out[0])?;
    Ok(out[0])
}

/// `phi` together with its momentum sensitivity `d phi / d m`, obtained by
/// integrating the variational ODE `Jdot = b_rho J` alongside the flow
/// (not by differencing the flow).
pub fn phi_flow_with_sensitivity(
    drift: &dyn Drift,
    a: f64,
    x: f64,
    m: f64,
    t: f64,
) -> Result<(f64, f64)> {
    if let Some(c) = drift.const_value() {
        let _ = c;
        let out = phi_flow(drift, a, x, m, t)?;
        return Ok((out, 1.0));
    }
    let f = |z: f64, y: &[f64; 2]| {
        [
            drift.eval(z, t, y[0]),
            drift.eval_rho(z, t, y[0]) * y[1],
        ]
    };
    let out = integrate_richardson(&f, a, [m, 1.0], x, FLOW_TOL)?;
    check_bounds(drift, out[0])?;
    Ok((out[0], out[1]))
}

/// Fixed-step variant of `phi` for hot loops; accuracy is governed by the
/// caller-supplied spatial step.
pub fn phi_flow_fixed(drift: &dyn Drift, a: f64, x: f64, m: f64, t: f64, h: f64) -> f64 {
    if let Some(c) = drift.const_value() {
        return m + c * (x - a);
    }
    let n = ((x - a).abs() / h).ceil().max(2.0) as usize;
    let f = |z: f64, y: &[f64; 1]| [drift.eval(z, t, y[0])];
    integrate_fixed(&f, a, [m], x, n)[0]
}

/// Hamiltonian flow `Theta_s^t(a, m)`: `xdot = -H_rho, rhodot = H_x`.
pub fn hamiltonian_flow(
    model: &HamiltonianModel,
    a: f64,
    m: f64,
    s: f64,
    t: f64,
) -> Result<(f64, f64)> {
    let f = |th: f64, y: &[f64; 2]| [-model.h_rho(y[0], th, y[1]), model.h_x(y[0], th, y[1])];
    let out = integrate_richardson(&f, s, [a, m], t, FLOW_TOL)?;
    Ok((out[0], out[1]))
}

/// Boundary flow `gamma_s^t(m)` at the fixed point `a_plus`:
/// `zetadot = beta(a_plus, th, zeta)`.
pub fn gamma_flow(
    model: &HamiltonianModel,
    drift: &dyn Drift,
    a_plus: f64,
    m: f64,
    s: f64,
    t: f64,
) -> Result<f64> {
    let f = |th: f64, y: &[f64; 1]| [beta(model, drift, a_plus, th, y[0])];
    let out = integrate_richardson(&f, s, [m], t, FLOW_TOL)?;
    check_bounds(drift, out[0])?;
    Ok(out[0])
}
