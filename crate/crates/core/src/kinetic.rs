//! Kinetic integro-PDEs for the jump kernels and the boundary marginal.
//!
//! The f-kernel solves `f_t - (v f)_x - C(f) = Q(f)` with the
//! coagulation-like gain `Q+`, the loss `f Jf`, and the first-order
//! transport terms `C+`/`C-`. The g-kernel (fundamental-solution class)
//! solves the same equation with `v` replaced by `v_hat` and no C terms.
//! The marginal solves the forward equation of the boundary process.
//!
//! Discretization: method of lines, explicit Euler (RK2 optional),
//! first-order upwind in x, trapezoid quadrature in the inner momentum,
//! central differences for the C terms. Kernels are stored on the simplex
//! `rho_- <= rho_+` only; queries outside return zero.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::grid::{interp1, Axis};
use crate::model::{
    beta, shock_velocity_d_minus, shock_velocity_unchecked, vhat, Drift, HamiltonianModel,
    ZeroDrift,
};
use crate::quad::{cumulative_trapezoid_uniform, trapezoid_nodes, trapezoid_uniform};

/// Which kinetic equation a kernel belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelVariant {
    /// Jump kernel `f(x, t, rho_-, rho_+)` of the PDMP class.
    F,
    /// Jump kernel `g(x, t, y_-, y_+)` of the fundamental-solution class;
    /// `s` is the seeding time of the fundamental solutions.
    G { s: f64 },
}

/// One time slab of a jump kernel on the simplex `lo <= hi` of its value
/// axis, with `nx` spatial columns.
#[derive(Clone)]
pub struct JumpKernel {
    pub variant: KernelVariant,
    pub t: f64,
    pub xs: Axis,
    pub rho: Axis,
    values: Vec<f64>,
    /// Mass removed by positivity clipping, accumulated over the run.
    pub clipped_mass: f64,
}

impl JumpKernel {
    pub fn pair_count(n: usize) -> usize {
        n * (n + 1) / 2
    }

    #[inline]
    pub fn pair_idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i <= j && j < self.rho.n);
        i * self.rho.n - i * (i + 1) / 2 + j
    }

    pub fn from_fn(
        variant: KernelVariant,
        t: f64,
        xs: Axis,
        rho: Axis,
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> Self {
        let np = Self::pair_count(rho.n);
        let mut values = vec![0.0; xs.n * np];
        for ix in 0..xs.n {
            let x = xs.coord(ix);
            let mut p = ix * np;
            for i in 0..rho.n {
                for j in i..rho.n {
                    values[p] = f(x, rho.coord(i), rho.coord(j));
                    p += 1;
                }
            }
        }
        JumpKernel {
            variant,
            t,
            xs,
            rho,
            values,
            clipped_mass: 0.0,
        }
    }

    #[inline]
    pub fn node(&self, ix: usize, i: usize, j: usize) -> f64 {
        self.values[ix * Self::pair_count(self.rho.n) + self.pair_idx(i, j)]
    }

    /// Kernel value at arbitrary `(x, lo, hi)`; zero off the simplex and
    /// outside the value box, continuous on the closed simplex.
    pub fn eval(&self, x: f64, lo: f64, hi: f64) -> f64 {
        if hi < lo {
            return 0.0;
        }
        if !self.rho.contains(lo) || !self.rho.contains(hi) {
            return 0.0;
        }
        let (ix, wx) = self.xs.locate(x);
        let v0 = self.eval_column(ix, lo, hi);
        if self.xs.n == 1 || wx == 0.0 {
            return v0;
        }
        let v1 = self.eval_column(ix + 1, lo, hi);
        v0 * (1.0 - wx) + v1 * wx
    }

    fn eval_column(&self, ix: usize, lo: f64, hi: f64) -> f64 {
        let (i, u) = self.rho.locate(lo);
        let (j, w) = self.rho.locate(hi);
        if j > i {
            // Off-diagonal cell: plain bilinear.
            let f00 = self.node(ix, i, j);
            let f10 = self.node(ix, i + 1, j);
            let f01 = self.node(ix, i, j + 1);
            let f11 = self.node(ix, i + 1, j + 1);
            f00 * (1.0 - u) * (1.0 - w)
                + f10 * u * (1.0 - w)
                + f01 * (1.0 - u) * w
                + f11 * u * w
        } else {
            // Diagonal cell: the query lies in the triangle
            // (i,i)-(i,i+1)-(i+1,i+1); interpolate linearly there.
            let w = w.max(u);
            let fa = self.node(ix, i, i);
            let fb = if i + 1 < self.rho.n {
                self.node(ix, i + 1, i + 1)
            } else {
                fa
            };
            let fc = if i + 1 < self.rho.n {
                self.node(ix, i, i + 1)
            } else {
                fa
            };
            fa + u * (fb - fa) + (w - u) * (fc - fa)
        }
    }

    /// Row integral `A(f)(x_ix, rho_i) = int_{rho_i} f(rho_i, s) ds`.
    pub fn a_row(&self, ix: usize, i: usize) -> f64 {
        let np = Self::pair_count(self.rho.n);
        let start = ix * np + self.pair_idx(i, i);
        let row = &self.values[start..start + (self.rho.n - i)];
        trapezoid_uniform(row, self.rho.step())
    }

    /// Weighted row integral `int w(rho_i, s) f(rho_i, s) ds`.
    pub fn a_row_weighted(&self, ix: usize, i: usize, w: impl Fn(f64, f64) -> f64) -> f64 {
        let lo = self.rho.coord(i);
        let vals: Vec<f64> = (i..self.rho.n)
            .map(|j| w(lo, self.rho.coord(j)) * self.node(ix, i, j))
            .collect();
        trapezoid_uniform(&vals, self.rho.step())
    }

    /// `A(f)` at arbitrary `(x, rho)` by interpolating node rows.
    pub fn a_of(&self, x: f64, rho: f64) -> f64 {
        if !self.rho.contains(rho) {
            return 0.0;
        }
        let (ix, wx) = self.xs.locate(x);
        let col = |ixc: usize| {
            let (i, u) = self.rho.locate(rho);
            let a0 = self.a_row(ixc, i);
            let a1 = self.a_row(ixc, (i + 1).min(self.rho.n - 1));
            a0 * (1.0 - u) + a1 * u
        };
        if self.xs.n == 1 || wx == 0.0 {
            col(ix)
        } else {
            col(ix) * (1.0 - wx) + col(ix + 1) * wx
        }
    }

    /// Velocity attached to a value pair: `v` for the F class, `v_hat` for
    /// the G class.
    pub fn velocity(
        &self,
        model: &HamiltonianModel,
        x: f64,
        t: f64,
        lo: f64,
        hi: f64,
    ) -> Result<f64> {
        match self.variant {
            KernelVariant::F => Ok(shock_velocity_unchecked(model, x, t, lo, hi)),
            KernelVariant::G { s } => vhat(model, x, t, lo, hi, s),
        }
    }

    /// Replace the packed value array (same grid).
    pub(crate) fn with_values(mut self, values: Vec<f64>) -> Self {
        assert_eq!(
            values.len(),
            self.xs.n * Self::pair_count(self.rho.n),
            "value array does not match the grid"
        );
        self.values = values;
        self
    }

    /// Same kernel values relabeled to time `t` (static trajectories).
    pub fn at_time(&self, t: f64) -> JumpKernel {
        JumpKernel {
            t,
            ..self.clone()
        }
    }

    pub fn total_mass(&self) -> f64 {
        let dr = self.rho.step();
        let cell = dr * dr * if self.xs.n > 1 { self.xs.step() } else { 1.0 };
        self.values.iter().sum::<f64>() * cell
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Rows of (x, t, rho_minus, rho_plus, f) for CSV export.
    pub fn rows(&self) -> impl Iterator<Item = [f64; 5]> + '_ {
        (0..self.xs.n).flat_map(move |ix| {
            (0..self.rho.n).flat_map(move |i| {
                (i..self.rho.n).map(move |j| {
                    [
                        self.xs.coord(ix),
                        self.t,
                        self.rho.coord(i),
                        self.rho.coord(j),
                        self.node(ix, i, j),
                    ]
                })
            })
        })
    }
}

/// Integration nodes covering `[lo, hi]` within the kernel's value axis:
/// the interior grid nodes plus the exact endpoints.
fn span_nodes(axis: &Axis, lo: f64, hi: f64) -> Vec<f64> {
    let mut xs = vec![lo];
    for k in 0..axis.n {
        let c = axis.coord(k);
        if c > lo + 1e-14 && c < hi - 1e-14 {
            xs.push(c);
        }
    }
    xs.push(hi);
    xs
}

/// Gain operator `Q+`: rate of a chain `rho_- -> rho_* -> rho_+` closing
/// into a single jump, integrated over the intermediate state.
pub fn q_plus(
    f: &JumpKernel,
    model: &HamiltonianModel,
    x: f64,
    t: f64,
    rho_minus: f64,
    rho_plus: f64,
) -> Result<f64> {
    if rho_plus <= rho_minus {
        return Ok(0.0);
    }
    let nodes = span_nodes(&f.rho, rho_minus, rho_plus);
    let mut vals = Vec::with_capacity(nodes.len());
    for &s in &nodes {
        let dv = f.velocity(model, x, t, s, rho_plus)? - f.velocity(model, x, t, rho_minus, s)?;
        vals.push(dv * f.eval(x, rho_minus, s) * f.eval(x, s, rho_plus));
    }
    Ok(trapezoid_nodes(&nodes, &vals))
}

/// `A(f)` at an arbitrary point by direct row quadrature (value-based route
/// used by the operator API; node rows use [`JumpKernel::a_row`]).
pub fn a_operator(f: &JumpKernel, x: f64, rho: f64) -> f64 {
    if !f.rho.contains(rho) {
        return 0.0;
    }
    let nodes = span_nodes(&f.rho, rho, f.rho.hi);
    let vals: Vec<f64> = nodes.iter().map(|&s| f.eval(x, rho, s)).collect();
    trapezoid_nodes(&nodes, &vals)
}

/// `A(vf)` at an arbitrary point.
pub fn a_operator_weighted(
    f: &JumpKernel,
    model: &HamiltonianModel,
    x: f64,
    t: f64,
    rho: f64,
) -> Result<f64> {
    if !f.rho.contains(rho) {
        return Ok(0.0);
    }
    let nodes = span_nodes(&f.rho, rho, f.rho.hi);
    let mut vals = Vec::with_capacity(nodes.len());
    for &s in &nodes {
        vals.push(f.velocity(model, x, t, rho, s)? * f.eval(x, rho, s));
    }
    Ok(trapezoid_nodes(&nodes, &vals))
}

/// The linear loss factor `Jf`; the loss operator is `Q-(f) = f Jf`.
pub fn j_of_f(
    f: &JumpKernel,
    model: &HamiltonianModel,
    x: f64,
    t: f64,
    rho_minus: f64,
    rho_plus: f64,
) -> Result<f64> {
    let a2p = a_operator_weighted(f, model, x, t, rho_plus)?;
    let a2m = a_operator_weighted(f, model, x, t, rho_minus)?;
    let a1p = a_operator(f, x, rho_plus);
    let a1m = a_operator(f, x, rho_minus);
    let v = f.velocity(model, x, t, rho_minus, rho_plus)?;
    Ok(a2p - a2m - v * (a1p - a1m))
}

/// Transport term `C+ f = d/d rho_+ [ K(rho_+, rho_-) f ]`.
pub fn c_plus(
    f: &JumpKernel,
    model: &HamiltonianModel,
    drift: &dyn Drift,
    x: f64,
    t: f64,
    rho_minus: f64,
    rho_plus: f64,
) -> Result<f64> {
    let h = f.rho.step();
    let kf = |rp: f64| -> Result<f64> {
        let v = f.velocity(model, x, t, rho_minus, rp)?;
        let k = drift.eval(x, t, rp) * v - beta(model, drift, x, t, rp);
        Ok(k * f.eval(x, rho_minus, rp))
    };
    // One-sided at the diagonal (the kernel kinks there) and at the top.
    if rho_plus - rho_minus < h {
        Ok((kf(rho_plus + h)? - kf(rho_plus)?) / h)
    } else if rho_plus + h > f.rho.hi {
        Ok((kf(rho_plus)? - kf(rho_plus - h)?) / h)
    } else {
        Ok((kf(rho_plus + h)? - kf(rho_plus - h)?) / (2.0 * h))
    }
}

/// Both algebraic forms of `C- f`:
/// `b (vf)_{rho_-} - beta f_{rho_-}` and
/// `b v_{rho_-} f + K(rho_-, rho_+) f_{rho_-}`.
/// Their difference is a product-rule self-check.
pub fn c_minus_forms(
    f: &JumpKernel,
    model: &HamiltonianModel,
    drift: &dyn Drift,
    x: f64,
    t: f64,
    rho_minus: f64,
    rho_plus: f64,
) -> Result<(f64, f64)> {
    let h = f.rho.step();
    let b = drift.eval(x, t, rho_minus);
    let be = beta(model, drift, x, t, rho_minus);

    let vf = |rm: f64| -> Result<f64> {
        Ok(f.velocity(model, x, t, rm, rho_plus)? * f.eval(x, rm, rho_plus))
    };
    let ff = |rm: f64| f.eval(x, rm, rho_plus);

    // Derivative in rho_- on [axis.lo, rho_plus].
    let (d_vf, d_f) = if rho_minus - h < f.rho.lo {
        (
            (vf(rho_minus + h)? - vf(rho_minus)?) / h,
            (ff(rho_minus + h) - ff(rho_minus)) / h,
        )
    } else if rho_minus + h > rho_plus {
        (
            (vf(rho_minus)? - vf(rho_minus - h)?) / h,
            (ff(rho_minus) - ff(rho_minus - h)) / h,
        )
    } else {
        (
            (vf(rho_minus + h)? - vf(rho_minus - h)?) / (2.0 * h),
            (ff(rho_minus + h) - ff(rho_minus - h)) / (2.0 * h),
        )
    };
    let form1 = b * d_vf - be * d_f;

    let v = f.velocity(model, x, t, rho_minus, rho_plus)?;
    let v_dm = shock_velocity_d_minus(model, x, t, rho_minus, rho_plus);
    let k_mm = b * v - be;
    let form2 = b * v_dm * f.eval(x, rho_minus, rho_plus) + k_mm * d_f;
    Ok((form1, form2))
}

/// Route A for the collision right-hand side: `C(f) + Q(f)` from the
/// operator definitions.
pub fn collision_rhs(
    f: &JumpKernel,
    model: &HamiltonianModel,
    drift: &dyn Drift,
    x: f64,
    t: f64,
    rho_minus: f64,
    rho_plus: f64,
) -> Result<f64> {
    let qp = q_plus(f, model, x, t, rho_minus, rho_plus)?;
    let qm = f.eval(x, rho_minus, rho_plus) * j_of_f(f, model, x, t, rho_minus, rho_plus)?;
    let cp = c_plus(f, model, drift, x, t, rho_minus, rho_plus)?;
    let (cm, _) = c_minus_forms(f, model, drift, x, t, rho_minus, rho_plus)?;
    Ok(cp + cm + qp - qm)
}

/// Route B: the antisymmetrized compact bracket
/// `QQ(f^1, f^2) - QQ(f^2, f^1)` with
/// `QQ(f^j, f^i) = f^j * f^i - A(f^j) (x) f^i - f^j (x) A(f^i) +
/// b^j (x) f^i_{rho_-} - (f^j (x) b^i)_{rho_+}`.
///
/// Must agree with route A pointwise for any smooth kernel.
pub fn compact_collision_rhs(
    f: &JumpKernel,
    model: &HamiltonianModel,
    drift: &dyn Drift,
    x: f64,
    t: f64,
    rho_minus: f64,
    rho_plus: f64,
) -> Result<f64> {
    let h = f.rho.step();
    let f1 = |rm: f64, rp: f64| f.eval(x, rm, rp);
    let f2 = |rm: f64, rp: f64| -> Result<f64> {
        Ok(f.velocity(model, x, t, rm, rp)? * f.eval(x, rm, rp))
    };
    let b1 = |r: f64| drift.eval(x, t, r);
    let b2 = |r: f64| beta(model, drift, x, t, r);

    // Convolutions over the intermediate state.
    let nodes = span_nodes(&f.rho, rho_minus, rho_plus);
    let mut conv12 = Vec::with_capacity(nodes.len());
    let mut conv21 = Vec::with_capacity(nodes.len());
    for &s in &nodes {
        conv12.push(f1(rho_minus, s) * f2(s, rho_plus)?);
        conv21.push(f2(rho_minus, s)? * f1(s, rho_plus));
    }
    let star = trapezoid_nodes(&nodes, &conv12) - trapezoid_nodes(&nodes, &conv21);

    let a1 = |r: f64| a_operator(f, x, r);
    let a2 = |r: f64| a_operator_weighted(f, model, x, t, r);

    let left_weight = -a1(rho_minus) * f2(rho_minus, rho_plus)?
        + a2(rho_minus)? * f1(rho_minus, rho_plus);
    let right_weight =
        -f1(rho_minus, rho_plus) * a2(rho_plus)? + f2(rho_minus, rho_plus)? * a1(rho_plus);

    // b^j (x) f^i_{rho_-}: one-sided near the axis edges as elsewhere.
    let d_minus = |g: &dyn Fn(f64) -> Result<f64>| -> Result<f64> {
        if rho_minus - h < f.rho.lo {
            Ok((g(rho_minus + h)? - g(rho_minus)?) / h)
        } else if rho_minus + h > rho_plus {
            Ok((g(rho_minus)? - g(rho_minus - h)?) / h)
        } else {
            Ok((g(rho_minus + h)? - g(rho_minus - h)?) / (2.0 * h))
        }
    };
    let df2 = d_minus(&|rm| f2(rm, rho_plus))?;
    let df1 = d_minus(&|rm| Ok(f1(rm, rho_plus)))?;
    let drift_minus = b1(rho_minus) * df2 - b2(rho_minus) * df1;

    // (f^j (x) b^i)_{rho_+}.
    let d_plus = |g: &dyn Fn(f64) -> Result<f64>| -> Result<f64> {
        if rho_plus - rho_minus < h {
            Ok((g(rho_plus + h)? - g(rho_plus)?) / h)
        } else if rho_plus + h > f.rho.hi {
            Ok((g(rho_plus)? - g(rho_plus - h)?) / h)
        } else {
            Ok((g(rho_plus + h)? - g(rho_plus - h)?) / (2.0 * h))
        }
    };
    let d_fb2 = d_plus(&|rp| Ok(f1(rho_minus, rp) * b2(rp)))?;
    let d_fb1 = d_plus(&|rp| Ok(f2(rho_minus, rp)? * b1(rp)))?;
    let drift_plus = -d_fb2 + d_fb1;

    Ok(star + left_weight + right_weight + drift_minus + drift_plus)
}

/// Time scheme for the kernel/marginal steppers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeScheme {
    #[default]
    Euler,
    Rk2,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOptions {
    pub scheme: TimeScheme,
    pub cfl_max: f64,
    /// Clipped-mass fraction per step above which a warning is counted.
    pub clip_warn_fraction: f64,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            scheme: TimeScheme::Euler,
            cfl_max: 0.9,
            clip_warn_fraction: 1e-3,
        }
    }
}

/// Per-slab coefficient tables at a fixed time.
struct SlabTables {
    /// Velocity per (ix, pair).
    vel: Vec<f64>,
    /// Drift per (ix, node).
    b: Vec<f64>,
    /// beta per (ix, node).
    be: Vec<f64>,
}

fn build_tables(
    k: &JumpKernel,
    model: &HamiltonianModel,
    drift: &dyn Drift,
    t: f64,
) -> Result<SlabTables> {
    let n = k.rho.n;
    let np = JumpKernel::pair_count(n);
    let mut vel = vec![0.0; k.xs.n * np];
    let mut b = vec![0.0; k.xs.n * n];
    let mut be = vec![0.0; k.xs.n * n];
    for ix in 0..k.xs.n {
        let x = k.xs.coord(ix);
        let mut p = ix * np;
        for i in 0..n {
            for j in i..n {
                vel[p] = k.velocity(model, x, t, k.rho.coord(i), k.rho.coord(j))?;
                p += 1;
            }
        }
        for i in 0..n {
            let r = k.rho.coord(i);
            b[ix * n + i] = drift.eval(x, t, r);
            be[ix * n + i] = beta(model, drift, x, t, r);
        }
    }
    Ok(SlabTables { vel, b, be })
}

/// Node-level collision + advection right-hand side for one slab.
fn kernel_rhs(
    k: &JumpKernel,
    vals: &[f64],
    tab: &SlabTables,
    with_c_terms: bool,
    out: &mut [f64],
) {
    let n = k.rho.n;
    let np = JumpKernel::pair_count(n);
    let dr = k.rho.step();
    let dx = k.xs.step();
    let pidx = |i: usize, j: usize| i * n - i * (i + 1) / 2 + j;

    // Row integrals A(f) and A(vf) per column and row start.
    let mut a1 = vec![0.0; k.xs.n * n];
    let mut a2 = vec![0.0; k.xs.n * n];
    for ix in 0..k.xs.n {
        for i in 0..n {
            let base = ix * np + pidx(i, i);
            let row = &vals[base..base + (n - i)];
            let vrow = &tab.vel[base..base + (n - i)];
            a1[ix * n + i] = trapezoid_uniform(row, dr);
            let weighted: Vec<f64> = row.iter().zip(vrow).map(|(f, v)| f * v).collect();
            a2[ix * n + i] = trapezoid_uniform(&weighted, dr);
        }
    }

    for ix in 0..k.xs.n {
        let col = &vals[ix * np..(ix + 1) * np];
        for i in 0..n {
            for j in i..n {
                let p = pidx(i, j);
                let fp = col[p];
                let v = tab.vel[ix * np + p];

                // Advection (vf)_x, upwind: transport speed is -v.
                let mut rhs = 0.0;
                if k.xs.n > 1 {
                    let vf_at = |c: usize| vals[c * np + p] * tab.vel[c * np + p];
                    let here = vf_at(ix);
                    rhs += if v >= 0.0 {
                        let right = if ix + 1 < k.xs.n { vf_at(ix + 1) } else { here };
                        (right - here) / dx
                    } else {
                        let left = if ix > 0 { vf_at(ix - 1) } else { here };
                        (here - left) / dx
                    };
                }

                // Q+ by trapezoid over the intermediate node.
                if j > i {
                    let mut acc = 0.0;
                    for kk in i..=j {
                        let w = if kk == i || kk == j { 0.5 } else { 1.0 };
                        let dv = tab.vel[ix * np + pidx(kk, j)] - tab.vel[ix * np + pidx(i, kk)];
                        acc += w * dv * col[pidx(i, kk)] * col[pidx(kk, j)];
                    }
                    rhs += acc * dr;
                }

                // Loss f Jf.
                let jf = (a2[ix * n + j] - a2[ix * n + i]) - v * (a1[ix * n + j] - a1[ix * n + i]);
                rhs -= fp * jf;

                if with_c_terms {
                    // C+ = d/d rho_+ [K(rho_+, rho_-) f], K = b v - beta at rho_+.
                    let kf = |jj: usize| {
                        tab.b[ix * n + jj] * tab.vel[ix * np + pidx(i, jj)] * col[pidx(i, jj)]
                            - tab.be[ix * n + jj] * col[pidx(i, jj)]
                    };
                    rhs += if j == n - 1 {
                        // Corner node (top of the row): no valid stencil in
                        // rho_+; the kernel vanishes at P_+ so the term is 0.
                        if j == i { 0.0 } else { (kf(j) - kf(j - 1)) / dr }
                    } else if j == i {
                        (kf(j + 1) - kf(j)) / dr
                    } else {
                        (kf(j + 1) - kf(j - 1)) / (2.0 * dr)
                    };

                    // C- = b (vf)_{rho_-} - beta f_{rho_-} at rho_-.
                    let vf = |ii: usize| tab.vel[ix * np + pidx(ii, j)] * col[pidx(ii, j)];
                    let ff = |ii: usize| col[pidx(ii, j)];
                    let (dvf, df) = if i == 0 {
                        if j == 0 {
                            (0.0, 0.0)
                        } else {
                            ((vf(1) - vf(0)) / dr, (ff(1) - ff(0)) / dr)
                        }
                    } else if i == j {
                        ((vf(i) - vf(i - 1)) / dr, (ff(i) - ff(i - 1)) / dr)
                    } else {
                        (
                            (vf(i + 1) - vf(i - 1)) / (2.0 * dr),
                            (ff(i + 1) - ff(i - 1)) / (2.0 * dr),
                        )
                    };
                    rhs += tab.b[ix * n + i] * dvf - tab.be[ix * n + i] * df;
                }

                out[ix * np + p] = rhs;
            }
        }
    }
}

fn step_kernel(
    k: &JumpKernel,
    model: &HamiltonianModel,
    drift: &dyn Drift,
    with_c_terms: bool,
    dt: f64,
    opts: &StepOptions,
) -> Result<JumpKernel> {
    if !k.is_finite() {
        return Err(CoreError::RateFailure("kernel has non-finite entries".into()));
    }
    let tab = build_tables(k, model, drift, k.t)?;
    if k.xs.n > 1 {
        let vmax = tab.vel.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let dt_max = opts.cfl_max * k.xs.step() / vmax.max(1e-300);
        if dt > dt_max {
            return Err(CoreError::CflViolation { dt, dt_max });
        }
    }

    let np = JumpKernel::pair_count(k.rho.n);
    let mut rhs = vec![0.0; k.xs.n * np];
    kernel_rhs(k, &k.values, &tab, with_c_terms, &mut rhs);

    let mut new_vals = k.values.clone();
    match opts.scheme {
        TimeScheme::Euler => {
            for (v, r) in new_vals.iter_mut().zip(&rhs) {
                *v += dt * r;
            }
        }
        TimeScheme::Rk2 => {
            let mut mid = k.values.clone();
            for (v, r) in mid.iter_mut().zip(&rhs) {
                *v += 0.5 * dt * r;
            }
            let mid_kernel = JumpKernel {
                values: mid,
                t: k.t + 0.5 * dt,
                ..k.clone()
            };
            let tab_mid = build_tables(&mid_kernel, model, drift, mid_kernel.t)?;
            let mut rhs2 = vec![0.0; k.xs.n * np];
            kernel_rhs(&mid_kernel, &mid_kernel.values, &tab_mid, with_c_terms, &mut rhs2);
            for (v, r) in new_vals.iter_mut().zip(&rhs2) {
                *v += dt * r;
            }
        }
    }

    // Positivity: clip and account, never ignore.
    let dr = k.rho.step();
    let cell = dr * dr * if k.xs.n > 1 { k.xs.step() } else { 1.0 };
    let mut clipped = 0.0;
    for v in new_vals.iter_mut() {
        if *v < 0.0 {
            clipped += -*v * cell;
            *v = 0.0;
        }
    }
    Ok(JumpKernel {
        variant: k.variant,
        t: k.t + dt,
        xs: k.xs,
        rho: k.rho,
        values: new_vals,
        clipped_mass: k.clipped_mass + clipped,
    })
}

/// One explicit step of the f-equation (advection + C + Q).
pub fn step_f(
    f: &JumpKernel,
    drift: &dyn Drift,
    model: &HamiltonianModel,
    dt: f64,
    opts: &StepOptions,
) -> Result<JumpKernel> {
    debug_assert!(matches!(f.variant, KernelVariant::F));
    step_kernel(f, model, drift, true, dt, opts)
}

/// One explicit step of the g-equation (advection by `v_hat` + collisions,
/// no C terms: the fundamental-solution class has no drift transport).
pub fn step_g(
    g: &JumpKernel,
    model: &HamiltonianModel,
    dt: f64,
    opts: &StepOptions,
) -> Result<JumpKernel> {
    debug_assert!(matches!(g.variant, KernelVariant::G { .. }));
    step_kernel(g, model, &ZeroDrift, false, dt, opts)
}

/// Probability density of the boundary value, evolving under the adjoint
/// generator.
#[derive(Clone)]
pub struct MarginalLaw {
    /// Current evolution coordinate (t for the boundary law, x for the
    /// in-x marginal).
    pub coord: f64,
    pub axis: Axis,
    pub values: Vec<f64>,
    pub anchor: f64,
    pub mass_warnings: u32,
}

impl MarginalLaw {
    /// Delta initial data mollified to a Gaussian of width `2 * drho`,
    /// renormalized on the grid. The width is tied to the grid so it
    /// vanishes under refinement.
    pub fn delta(axis: Axis, m0: f64, anchor: f64, coord: f64) -> Self {
        let sigma = 2.0 * axis.step();
        Self::from_density(
            axis,
            |r| (-0.5 * ((r - m0) / sigma).powi(2)).exp(),
            anchor,
            coord,
        )
    }

    pub fn from_density(
        axis: Axis,
        density: impl Fn(f64) -> f64,
        anchor: f64,
        coord: f64,
    ) -> Self {
        let mut values: Vec<f64> = axis.coords().map(|r| density(r).max(0.0)).collect();
        let mass = trapezoid_uniform(&values, axis.step());
        assert!(mass > 0.0, "initial marginal has zero mass");
        for v in values.iter_mut() {
            *v /= mass;
        }
        MarginalLaw {
            coord,
            axis,
            values,
            anchor,
            mass_warnings: 0,
        }
    }

    pub fn mass(&self) -> f64 {
        trapezoid_uniform(&self.values, self.axis.step())
    }

    pub fn mean(&self) -> f64 {
        let weighted: Vec<f64> = self
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.axis.coord(i))
            .collect();
        trapezoid_uniform(&weighted, self.axis.step()) / self.mass()
    }

    pub fn density_at(&self, rho: f64) -> f64 {
        if !self.axis.contains(rho) {
            return 0.0;
        }
        interp1(&self.axis, &self.values, rho)
    }

    /// Normalized CDF at the grid nodes.
    pub fn cdf(&self) -> Vec<f64> {
        let mut out = Vec::new();
        cumulative_trapezoid_uniform(&self.values, self.axis.step(), &mut out);
        let total = *out.last().unwrap();
        if total > 0.0 {
            for v in out.iter_mut() {
                *v /= total;
            }
        }
        out
    }

    pub fn cdf_at(&self, rho: f64) -> f64 {
        if rho <= self.axis.lo {
            return 0.0;
        }
        if rho >= self.axis.hi {
            return 1.0;
        }
        interp1(&self.axis, &self.cdf(), rho)
    }

    /// Inverse-CDF sample; the Monte Carlo pipeline draws its initial
    /// values from exactly this grid law.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let cdf = self.cdf();
        let u: f64 = rng.gen();
        match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(i) => self.axis.coord(i),
            Err(i) => {
                if i == 0 {
                    self.axis.lo
                } else if i >= cdf.len() {
                    self.axis.hi
                } else {
                    let c0 = cdf[i - 1];
                    let c1 = cdf[i];
                    let w = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
                    self.axis.coord(i - 1) + w * self.axis.step()
                }
            }
        }
    }

    /// Rows of (coord, rho, ell) for CSV export.
    pub fn rows(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        (0..self.axis.n).map(move |i| [self.coord, self.axis.coord(i), self.values[i]])
    }
}

/// Shared adjoint step: gain by the incoming rate rows, loss by the
/// outgoing row integral, and an upwind drift flux.
fn adjoint_step(
    ell: &MarginalLaw,
    rate: &impl Fn(f64, f64) -> f64,
    drift_coeff: &impl Fn(f64) -> f64,
    dstep: f64,
) -> MarginalLaw {
    let n = ell.axis.n;
    let dr = ell.axis.step();
    let mut rate_out = vec![0.0; n];
    for i in 0..n {
        let lo = ell.axis.coord(i);
        let vals: Vec<f64> = (i..n).map(|j| rate(lo, ell.axis.coord(j))).collect();
        rate_out[i] = trapezoid_uniform(&vals, dr);
    }

    let mut new_vals = ell.values.clone();
    // Gain and loss.
    for i in 0..n {
        let hi = ell.axis.coord(i);
        let gain_vals: Vec<f64> = (0..=i)
            .map(|k| ell.values[k] * rate(ell.axis.coord(k), hi))
            .collect();
        let gain = trapezoid_uniform(&gain_vals, dr);
        new_vals[i] += dstep * (gain - rate_out[i] * ell.values[i]);
    }
    // Drift flux -(c nu)_rho, conservative upwind with outflow boundaries.
    let mut flux = vec![0.0; n + 1];
    for half in 1..n {
        let c = drift_coeff(ell.axis.coord(half) - 0.5 * dr);
        flux[half] = if c > 0.0 {
            c * ell.values[half - 1]
        } else {
            c * ell.values[half]
        };
    }
    let c_lo = drift_coeff(ell.axis.lo);
    if c_lo < 0.0 {
        flux[0] = c_lo * ell.values[0];
    }
    let c_hi = drift_coeff(ell.axis.hi);
    if c_hi > 0.0 {
        flux[n] = c_hi * ell.values[n - 1];
    }
    for i in 0..n {
        new_vals[i] -= dstep * (flux[i + 1] - flux[i]) / dr;
    }
    for v in new_vals.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }

    let mut out = MarginalLaw {
        coord: ell.coord + dstep,
        axis: ell.axis,
        values: new_vals,
        anchor: ell.anchor,
        mass_warnings: ell.mass_warnings,
    };
    if (out.mass() - ell.mass()).abs() > 1e-2 {
        out.mass_warnings += 1;
    }
    out
}

/// One explicit step of the boundary-marginal forward equation at the
/// anchor point, driven by the kernel slab at the current time.
///
/// F class: rates `f^2 = v f` and drift flux `beta`; G class: rates
/// `g^2 = v_hat g` and no drift flux (the equation is the adjoint one;
/// the generator form would not preserve probability).
pub fn step_ell(
    ell: &MarginalLaw,
    kernel: &JumpKernel,
    drift: &dyn Drift,
    model: &HamiltonianModel,
    dt: f64,
) -> Result<MarginalLaw> {
    let a = ell.anchor;
    let t = ell.coord;
    match kernel.variant {
        KernelVariant::F => {
            let rate = |lo: f64, hi: f64| {
                shock_velocity_unchecked(model, a, t, lo, hi) * kernel.eval(a, lo, hi)
            };
            let drift_coeff = |r: f64| beta(model, drift, a, t, r);
            Ok(adjoint_step(ell, &rate, &drift_coeff, dt))
        }
        KernelVariant::G { s } => {
            // v_hat can fail only through fundamental_m; probe once.
            vhat(model, a, t, ell.axis.lo, ell.axis.hi, s)?;
            let rate = |lo: f64, hi: f64| {
                vhat(model, a, t, lo, hi, s).unwrap_or(0.0) * kernel.eval(a, lo, hi)
            };
            let drift_coeff = |_r: f64| 0.0;
            Ok(adjoint_step(ell, &rate, &drift_coeff, dt))
        }
    }
}

/// One explicit step of the in-x forward equation for the marginal of the
/// path value (adjoint of the x-generator: rates `f^1`, drift `b`).
pub fn step_marginal_in_x(
    pi: &MarginalLaw,
    kernel: &JumpKernel,
    drift: &dyn Drift,
    t: f64,
    dx: f64,
) -> MarginalLaw {
    let x = pi.coord;
    let rate = |lo: f64, hi: f64| kernel.eval(x, lo, hi);
    let drift_coeff = |r: f64| drift.eval(x, t, r);
    adjoint_step(pi, &rate, &drift_coeff, dx)
}

/// A saved trajectory of kernel slabs with linear interpolation in time.
#[derive(Clone)]
pub struct KernelSeries {
    pub slabs: Vec<JumpKernel>,
}

impl KernelSeries {
    pub fn new(slabs: Vec<JumpKernel>) -> Self {
        assert!(!slabs.is_empty());
        KernelSeries { slabs }
    }

    pub fn t0(&self) -> f64 {
        self.slabs.first().unwrap().t
    }

    pub fn t1(&self) -> f64 {
        self.slabs.last().unwrap().t
    }

    pub fn eval(&self, x: f64, t: f64, lo: f64, hi: f64) -> f64 {
        let (k, w) = self.locate(t);
        if w == 0.0 || k + 1 >= self.slabs.len() {
            self.slabs[k].eval(x, lo, hi)
        } else {
            (1.0 - w) * self.slabs[k].eval(x, lo, hi) + w * self.slabs[k + 1].eval(x, lo, hi)
        }
    }

    pub fn locate(&self, t: f64) -> (usize, f64) {
        let n = self.slabs.len();
        if n == 1 || t <= self.slabs[0].t {
            return (0, 0.0);
        }
        if t >= self.slabs[n - 1].t {
            return (n - 1, 0.0);
        }
        let mut k = 0;
        while k + 1 < n && self.slabs[k + 1].t <= t {
            k += 1;
        }
        if k + 1 >= n {
            return (n - 1, 0.0);
        }
        let dt = self.slabs[k + 1].t - self.slabs[k].t;
        (k, if dt > 0.0 { (t - self.slabs[k].t) / dt } else { 0.0 })
    }

    /// Nearest stored slab.
    pub fn slab_at(&self, t: f64) -> &JumpKernel {
        let (k, w) = self.locate(t);
        if w > 0.5 && k + 1 < self.slabs.len() {
            &self.slabs[k + 1]
        } else {
            &self.slabs[k]
        }
    }
}

/// Output of a kinetic run: the kernel trajectory and the boundary
/// marginal trajectory.
pub struct KineticRun {
    pub kernels: KernelSeries,
    pub marginals: Vec<MarginalLaw>,
}

/// Drive the kernel and marginal equations from `f0`/`ell0` to `t_final`
/// with `n_steps` explicit steps, saving every `save_stride`-th slab (the
/// initial and final slabs are always kept).
pub fn solve_kinetic(
    model: &HamiltonianModel,
    drift: &dyn Drift,
    f0: JumpKernel,
    ell0: Option<MarginalLaw>,
    t_final: f64,
    n_steps: usize,
    save_stride: usize,
    opts: &StepOptions,
) -> Result<KineticRun> {
    let n_steps = n_steps.max(1);
    let stride = save_stride.max(1);
    let dt = (t_final - f0.t) / n_steps as f64;
    let mut kernel = f0;
    let mut ell = ell0;
    let mut slabs = vec![kernel.clone()];
    let mut marginals: Vec<MarginalLaw> = ell.iter().cloned().collect();
    for step in 0..n_steps {
        if let Some(cur) = ell.take() {
            ell = Some(step_ell(&cur, &kernel, drift, model, dt)?);
        }
        kernel = match kernel.variant {
            KernelVariant::F => step_f(&kernel, drift, model, dt, opts)?,
            KernelVariant::G { .. } => step_g(&kernel, model, dt, opts)?,
        };
        if (step + 1) % stride == 0 || step + 1 == n_steps {
            slabs.push(kernel.clone());
            if let Some(cur) = &ell {
                marginals.push(cur.clone());
            }
        }
    }
    Ok(KineticRun {
        kernels: KernelSeries::new(slabs),
        marginals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::library::{burgers, eps_sin, linear};
    use crate::model::{ConstDrift, FnDrift};
    use crate::rng::stream;

    fn unit_kernel(n: usize) -> JumpKernel {
        JumpKernel::from_fn(
            KernelVariant::F,
            0.0,
            Axis::point(0.0),
            Axis::new(0.0, 2.0, n),
            |_x, _lo, _hi| 1.0,
        )
    }

    /// Quartic bump vanishing at both momentum bounds.
    fn bump(lo: f64, hi: f64) -> impl Fn(f64) -> f64 + Copy {
        move |r: f64| {
            if r <= lo || r >= hi {
                0.0
            } else {
                let u = (r - lo) / (hi - lo);
                16.0 * u * u * (1.0 - u) * (1.0 - u)
            }
        }
    }

    #[test]
    fn q_plus_vanishes_on_empty_range() {
        let m = burgers(-3.0, 3.0);
        let f = unit_kernel(65);
        assert_eq!(q_plus(&f, &m, 0.0, 0.0, 1.3, 1.3).unwrap(), 0.0);
    }

    #[test]
    fn q_plus_unit_kernel_burgers_closed_form() {
        // Integrand is the constant (rho_+ - rho_-)/2, so
        // Q+ = (rho_+ - rho_-)^2 / 2; at (0, 2) this is 2.
        let m = burgers(-3.0, 3.0);
        let f = unit_kernel(129);
        let got = q_plus(&f, &m, 0.0, 0.0, 0.0, 2.0).unwrap();
        assert!((got - 2.0).abs() <= 1e-6, "Q+ = {got}");
        let got = q_plus(&f, &m, 0.0, 0.0, 0.5, 1.25).unwrap();
        assert!((got - 0.75f64.powi(2) / 2.0).abs() <= 1e-6);
    }

    #[test]
    fn q_plus_disjoint_bands_cannot_chain() {
        let m = burgers(-3.0, 3.0);
        let f = JumpKernel::from_fn(
            KernelVariant::F,
            0.0,
            Axis::point(0.0),
            Axis::new(0.0, 2.0, 81),
            |_x, lo, hi| {
                let band = |r: f64| (0.0..=0.4).contains(&r) || (1.6..=2.0).contains(&r);
                let same = |a: f64, b: f64| (a <= 0.4 && b <= 0.4) || (a >= 1.6 && b >= 1.6);
                if band(lo) && band(hi) && same(lo, hi) {
                    1.0
                } else {
                    0.0
                }
            },
        );
        let got = q_plus(&f, &m, 0.0, 0.0, 0.1, 1.8).unwrap();
        assert!(got.abs() < 1e-12, "no chain should exist, got {got}");
    }

    #[test]
    fn j_of_f_zero_kernel_and_linear_hamiltonian() {
        let zero = JumpKernel::from_fn(
            KernelVariant::F,
            0.0,
            Axis::point(0.0),
            Axis::new(0.0, 2.0, 33),
            |_, _, _| 0.0,
        );
        let m = burgers(-3.0, 3.0);
        assert_eq!(j_of_f(&zero, &m, 0.0, 0.0, 0.2, 1.7).unwrap(), 0.0);

        // Linear flux: v is constant, the bracket telescopes to zero.
        let lin = linear(1.5, -3.0, 3.0);
        let f = unit_kernel(65);
        let got = j_of_f(&f, &lin, 0.0, 0.0, 0.25, 1.5).unwrap();
        assert!(got.abs() < 1e-12);
    }

    #[test]
    fn j_of_f_unit_kernel_burgers_closed_form() {
        // A(f)(r) = 2 - r, A(vf)(r) = r + 1 - 3 r^2 / 4, hence
        // Jf = (rho_+ - rho_-)(1 - (rho_- + rho_+)/4).
        let m = burgers(-3.0, 3.0);
        let f = unit_kernel(129);
        for (rm, rp) in [(0.0, 2.0), (0.25, 1.0), (0.5, 1.75)] {
            let a1 = a_operator(&f, 0.0, rm);
            assert!((a1 - (2.0 - rm)).abs() <= 1e-9);
            let a2 = a_operator_weighted(&f, &m, 0.0, 0.0, rm).unwrap();
            assert!((a2 - (rm + 1.0 - 0.75 * rm * rm)).abs() <= 1e-9);
            let jf = j_of_f(&f, &m, 0.0, 0.0, rm, rp).unwrap();
            let want = (rp - rm) * (1.0 - 0.25 * (rm + rp));
            assert!((jf - want).abs() <= 1e-6, "Jf({rm},{rp}) = {jf}, want {want}");
        }
    }

    #[test]
    fn c_terms_vanish_without_drift_or_x_dependence() {
        let m = burgers(-3.0, 3.0);
        let f = unit_kernel(65);
        let cp = c_plus(&f, &m, &ZeroDrift, 0.0, 0.0, 0.4, 1.2).unwrap();
        let (cm1, cm2) = c_minus_forms(&f, &m, &ZeroDrift, 0.0, 0.0, 0.4, 1.2).unwrap();
        assert_eq!(cp, 0.0);
        assert_eq!(cm1, 0.0);
        assert_eq!(cm2, 0.0);
    }

    #[test]
    fn c_terms_hand_expansion_for_linear_kernel() {
        // f = rho_+ - rho_-, H = rho^2/2, b = -1:
        // K(rho_+, rho_-) = (rho_+ - rho_-)/2, so C+ f = rho_+ - rho_-,
        // and the two C- terms cancel exactly.
        let m = burgers(-3.0, 3.0);
        let b = ConstDrift(-1.0);
        let f = JumpKernel::from_fn(
            KernelVariant::F,
            0.0,
            Axis::point(0.0),
            Axis::new(0.0, 2.0, 129),
            |_x, lo, hi| hi - lo,
        );
        for (rm, rp) in [(0.25, 1.0), (0.5, 1.5), (0.75, 1.25)] {
            let cp = c_plus(&f, &m, &b, 0.0, 0.0, rm, rp).unwrap();
            assert!((cp - (rp - rm)).abs() <= 1e-9, "C+ = {cp}");
            let (cm1, cm2) = c_minus_forms(&f, &m, &b, 0.0, 0.0, rm, rp).unwrap();
            assert!(cm1.abs() <= 1e-9, "C- form1 = {cm1}");
            assert!(cm2.abs() <= 1e-9, "C- form2 = {cm2}");
        }
    }

    #[test]
    fn c_minus_two_forms_agree_to_second_order() {
        let m = burgers(-3.0, 3.0);
        let b = FnDrift(|_x: f64, _t: f64, r: f64| -0.5 - 0.2 * r);
        let worst = |n: usize| {
            let s = bump(0.0, 2.0);
            let f = JumpKernel::from_fn(
                KernelVariant::F,
                0.0,
                Axis::point(0.0),
                Axis::new(0.0, 2.0, n),
                move |_x, lo, hi| s(lo) * s(hi),
            );
            let mut w = 0.0f64;
            for (rm, rp) in [(0.3, 1.1), (0.5, 1.6), (0.9, 1.4)] {
                let (c1, c2) = c_minus_forms(&f, &m, &b, 0.0, 0.0, rm, rp).unwrap();
                w = w.max((c1 - c2).abs());
            }
            w
        };
        let coarse = worst(41);
        let fine = worst(81);
        assert!(coarse / fine >= 3.0, "ratio {} (coarse {coarse}, fine {fine})", coarse / fine);
    }

    #[test]
    fn compact_bracket_matches_operator_route() {
        // Route A (Q and C operators) against route B (the compact
        // antisymmetrized bracket); both on a smooth bump kernel with an
        // (x,t)-dependent model and smooth drift.
        let m = eps_sin(0.2, 0.0, 1.0);
        let b = FnDrift(|x: f64, _t: f64, r: f64| -0.3 - 0.1 * x.sin() * (1.0 + r));
        let worst = |n: usize| {
            let s = bump(0.0, 1.0);
            let f = JumpKernel::from_fn(
                KernelVariant::F,
                0.3,
                Axis::new(-1.0, 1.0, 5),
                Axis::new(0.0, 1.0, n),
                move |x, lo, hi| (1.0 + 0.2 * x.cos()) * s(lo) * s(hi),
            );
            let mut w = 0.0f64;
            for (rm, rp) in [(0.2, 0.7), (0.35, 0.9), (0.5, 0.6)] {
                let a = collision_rhs(&f, &m, &b, 0.25, 0.3, rm, rp).unwrap();
                let bb = compact_collision_rhs(&f, &m, &b, 0.25, 0.3, rm, rp).unwrap();
                w = w.max((a - bb).abs());
            }
            w
        };
        // The bracket regroups the exact same quadratures and stencils, so
        // the two routes must agree to roundoff at any resolution.
        assert!(worst(41) < 1e-12);
        assert!(worst(81) < 1e-12);
    }

    #[test]
    fn step_f_keeps_zero_kernel_zero() {
        let m = burgers(-3.0, 3.0);
        let f = JumpKernel::from_fn(
            KernelVariant::F,
            0.0,
            Axis::new(-1.0, 1.0, 5),
            Axis::new(0.0, 2.0, 17),
            |_, _, _| 0.0,
        );
        let next = step_f(&f, &ZeroDrift, &m, 0.01, &StepOptions::default()).unwrap();
        assert_eq!(next.max_abs(), 0.0);
        assert_eq!(next.clipped_mass, 0.0);
    }

    #[test]
    fn step_f_rejects_cfl_violation() {
        let m = burgers(-3.0, 3.0);
        let f = unit_kernel(17);
        let f = JumpKernel {
            xs: Axis::new(-1.0, 1.0, 21),
            values: vec![1.0; 21 * JumpKernel::pair_count(17)],
            ..f
        };
        assert!(matches!(
            step_f(&f, &ZeroDrift, &m, 1.0, &StepOptions::default()),
            Err(CoreError::CflViolation { .. })
        ));
    }

    #[test]
    fn row_conservation_of_q_holds_at_roundoff() {
        // int Q(f)(rho, .) d rho_+ = 0 on the evolved kernel.
        let m = burgers(-3.0, 3.0);
        let row_residual = |n: usize| {
            let s = bump(0.0, 2.0);
            let mut f = JumpKernel::from_fn(
                KernelVariant::F,
                0.0,
                Axis::point(0.0),
                Axis::new(0.0, 2.0, n),
                move |_x, lo, hi| s(lo) * s(hi),
            );
            for _ in 0..5 {
                f = step_f(&f, &ZeroDrift, &m, 0.002, &StepOptions::default()).unwrap();
            }
            let dr = f.rho.step();
            let mut worst = 0.0f64;
            for i in 0..f.rho.n {
                let vals: Vec<f64> = (i..f.rho.n)
                    .map(|j| {
                        let (rm, rp) = (f.rho.coord(i), f.rho.coord(j));
                        let qp = q_plus(&f, &m, 0.0, f.t, rm, rp).unwrap();
                        let qm = f.node(0, i, j) * j_of_f(&f, &m, 0.0, f.t, rm, rp).unwrap();
                        qp - qm
                    })
                    .collect();
                worst = worst.max(trapezoid_uniform(&vals, dr).abs());
            }
            worst
        };
        // The trapezoid weights telescope exactly, so the discrete row sums
        // vanish to roundoff at any resolution.
        assert!(row_residual(33) < 1e-12);
        assert!(row_residual(65) < 1e-12);
    }

    #[test]
    fn evolution_residual_is_first_order_in_dt() {
        // x-independent band: the saved trajectory must satisfy
        // f_t = C(f) + Q(f) with an O(dt) defect measured by central
        // differences across slabs.
        let m = burgers(-3.0, 3.0);
        let resid = |n_steps: usize| {
            let s = bump(0.0, 2.0);
            let f0 = JumpKernel::from_fn(
                KernelVariant::F,
                0.0,
                Axis::point(0.0),
                Axis::new(0.0, 2.0, 41),
                move |_x, lo, hi| s(lo) * s(hi),
            );
            let run = solve_kinetic(
                &m,
                &ZeroDrift,
                f0,
                None,
                0.2,
                n_steps,
                n_steps / 4,
                &StepOptions::default(),
            )
            .unwrap();
            let slabs = &run.kernels.slabs;
            assert!(slabs.len() >= 3);
            let k = slabs.len() / 2;
            let (prev, mid, next) = (&slabs[k - 1], &slabs[k], &slabs[k + 1]);
            let two_dt = next.t - prev.t;
            let mut worst = 0.0f64;
            for i in 0..mid.rho.n {
                for j in i..mid.rho.n {
                    let (rm, rp) = (mid.rho.coord(i), mid.rho.coord(j));
                    let dfdt = (next.node(0, i, j) - prev.node(0, i, j)) / two_dt;
                    let rhs = collision_rhs(mid, &m, &ZeroDrift, 0.0, mid.t, rm, rp).unwrap();
                    worst = worst.max((dfdt - rhs).abs());
                }
            }
            worst
        };
        let coarse = resid(64);
        let fine = resid(128);
        assert!(
            coarse / fine >= 1.7,
            "dt-residual ratio {} (coarse {coarse}, fine {fine})",
            coarse / fine
        );
    }

    #[test]
    fn step_g_zero_kernel_and_balance_residual() {
        let m = burgers(-10.0, 10.0);
        let zero = JumpKernel::from_fn(
            KernelVariant::G { s: -1.0 },
            0.0,
            Axis::new(-1.0, 2.0, 5),
            Axis::new(0.0, 1.0, 17),
            |_, _, _| 0.0,
        );
        let next = step_g(&zero, &m, 0.005, &StepOptions::default()).unwrap();
        assert_eq!(next.max_abs(), 0.0);

        // A(g^1)_t = A(g^2)_x residual decays ~first order.
        let resid = |n_steps: usize, nx: usize, ny: usize| {
            let s = bump(0.0, 1.0);
            let g0 = JumpKernel::from_fn(
                KernelVariant::G { s: -1.0 },
                0.0,
                Axis::new(-1.0, 2.0, nx),
                Axis::new(0.0, 1.0, ny),
                move |x, lo, hi| (1.0 + 0.3 * x.sin()) * s(lo) * s(hi),
            );
            let run = solve_kinetic(
                &m,
                &ZeroDrift,
                g0,
                None,
                0.1,
                n_steps,
                n_steps / 4,
                &StepOptions::default(),
            )
            .unwrap();
            let slabs = &run.kernels.slabs;
            let k = slabs.len() / 2;
            let (prev, mid, next) = (&slabs[k - 1], &slabs[k], &slabs[k + 1]);
            let two_dt = next.t - prev.t;
            let dx = mid.xs.step();
            let mut worst = 0.0f64;
            for ix in 1..mid.xs.n - 1 {
                for i in 0..mid.rho.n {
                    let lhs = (next.a_row(ix, i) - prev.a_row(ix, i)) / two_dt;
                    let w = |ixx: usize| {
                        let x = mid.xs.coord(ixx);
                        mid.a_row_weighted(ixx, i, |lo, hi| {
                            mid.velocity(&m, x, mid.t, lo, hi).unwrap()
                        })
                    };
                    let rhs = (w(ix + 1) - w(ix - 1)) / (2.0 * dx);
                    worst = worst.max((lhs - rhs).abs());
                }
            }
            worst
        };
        let coarse = resid(40, 9, 17);
        let fine = resid(80, 17, 33);
        assert!(
            coarse / fine >= 1.7,
            "balance ratio {} (coarse {coarse}, fine {fine})",
            coarse / fine
        );
    }

    #[test]
    fn step_ell_constant_without_rates_or_drift() {
        let m = burgers(-3.0, 3.0);
        let zero = JumpKernel::from_fn(
            KernelVariant::F,
            0.0,
            Axis::point(0.0),
            Axis::new(0.0, 2.0, 33),
            |_, _, _| 0.0,
        );
        let ell0 = MarginalLaw::delta(Axis::new(0.0, 2.0, 33), 1.0, 0.0, 0.0);
        let mut ell = ell0.clone();
        for _ in 0..20 {
            ell = step_ell(&ell, &zero, &ZeroDrift, &m, 0.01).unwrap();
        }
        for (a, b) in ell.values.iter().zip(&ell0.values) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(ell.mass_warnings, 0);
    }

    #[test]
    fn step_ell_pure_transport_advects_the_mean() {
        // Zero kernel, H = c rho with b = 1 gives beta = c: the density
        // translates at speed c in rho.
        let c = 0.8;
        let m = linear(c, -1.0, 4.0);
        let zero = JumpKernel::from_fn(
            KernelVariant::F,
            0.0,
            Axis::point(0.0),
            Axis::new(-1.0, 4.0, 201),
            |_, _, _| 0.0,
        );
        let mut ell = MarginalLaw::from_density(
            Axis::new(-1.0, 4.0, 201),
            |r| (-8.0 * (r - 0.5) * (r - 0.5)).exp(),
            0.0,
            0.0,
        );
        let m0 = ell.mean();
        let dt = 0.002;
        for _ in 0..250 {
            ell = step_ell(&ell, &zero, &ConstDrift(1.0), &m, dt).unwrap();
        }
        let shift = ell.mean() - m0;
        assert!((shift - c * 0.5).abs() < 0.02 * c, "mean shift {shift}");
        assert!((ell.mass() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn marginal_sampling_matches_its_own_cdf() {
        let ell = MarginalLaw::from_density(
            Axis::new(0.0, 1.0, 101),
            |r| 1.0 + 0.8 * (6.0 * r).sin().powi(2),
            0.0,
            0.0,
        );
        let mut rng = stream(31, 0);
        let samples: Vec<f64> = (0..8000).map(|_| ell.sample(&mut rng)).collect();
        let sorted = crate::stats::sort_samples(samples);
        let d = crate::stats::ks_statistic(&sorted, |r| ell.cdf_at(r));
        assert!(
            crate::stats::ks_p_value(d, sorted.len()) > 0.01,
            "KS D = {d}"
        );
    }

    #[test]
    fn kernel_series_interpolates_in_time() {
        let mk = |t: f64, v: f64| {
            JumpKernel::from_fn(
                KernelVariant::F,
                t,
                Axis::point(0.0),
                Axis::new(0.0, 1.0, 9),
                move |_, _, _| v,
            )
        };
        let series = KernelSeries::new(vec![mk(0.0, 1.0), mk(1.0, 3.0)]);
        assert!((series.eval(0.0, 0.5, 0.2, 0.8) - 2.0).abs() < 1e-12);
        assert_eq!(series.slab_at(0.9).t, 1.0);
    }
}

#[cfg(test)]
mod scheme_tests {
    use super::*;
    use crate::model::library::shifted_burgers;
    use crate::model::ZeroDrift;

    #[test]
    fn rk2_beats_euler_against_a_fine_reference() {
        let m = shifted_burgers(0.0, 1.0);
        let bump = |r: f64| {
            if r <= 0.0 || r >= 1.0 {
                0.0
            } else {
                16.0 * (r * (1.0 - r)).powi(2)
            }
        };
        let f0 = JumpKernel::from_fn(
            KernelVariant::F,
            0.0,
            Axis::point(0.0),
            Axis::new(0.0, 1.0, 41),
            move |_x, lo, hi| 5.0 * bump(lo) * bump(hi),
        );
        let run_with = |scheme: TimeScheme, steps: usize| {
            let opts = StepOptions {
                scheme,
                ..Default::default()
            };
            let mut f = f0.clone();
            let dt = 0.4 / steps as f64;
            for _ in 0..steps {
                f = step_f(&f, &ZeroDrift, &m, dt, &opts).unwrap();
            }
            f
        };
        let reference = run_with(TimeScheme::Euler, 1024);
        let err = |f: &JumpKernel| {
            let mut worst = 0.0f64;
            for i in 0..f.rho.n {
                for j in i..f.rho.n {
                    worst = worst.max((f.node(0, i, j) - reference.node(0, i, j)).abs());
                }
            }
            worst
        };
        let euler = err(&run_with(TimeScheme::Euler, 32));
        let rk2 = err(&run_with(TimeScheme::Rk2, 32));
        assert!(
            rk2 < 0.2 * euler,
            "RK2 error {rk2} should be well under Euler error {euler}"
        );
    }
}
