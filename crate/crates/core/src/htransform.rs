//! Conditioning machinery for the fundamental-solution class: the
//! harmonic function `h(x, y)` of the label process conditioned to stay
//! inside a window `U` up to `a_plus`, the transformed kernel
//! `g_hat = (h(y_+) / h(y_-)) g`, and residual checks that the
//! transformed kernel still solves the kinetic equation.
//!
//! `h` comes in two independent flavors that cross-validate: a jump-count
//! series (survival weight times iterated quadrature over ordered jump
//! configurations) and a Monte Carlo estimate from the raw path sampler.

use crate::error::{CoreError, Result};
use crate::grid::Axis;
use crate::kinetic::{JumpKernel, KernelSeries};
use crate::model::HamiltonianModel;
use crate::pdmp::{sample_y_process, RateRows, SampleOptions};
use crate::quad::trapezoid_uniform;
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HSource {
    Series { n_max: usize },
    MonteCarlo { n_paths: usize },
    Synthetic,
}

/// Gridded `h(x, y)` on `[a_-, a_+] x U` at one time slice.
#[derive(Clone)]
pub struct HFunction {
    pub t: f64,
    pub xs: Axis,
    pub ys: Axis,
    pub window: (f64, f64),
    pub values: Vec<f64>,
    pub source: HSource,
}

impl HFunction {
    #[inline]
    pub fn node(&self, ix: usize, iy: usize) -> f64 {
        self.values[ix * self.ys.n + iy]
    }

    /// Bilinear evaluation; zero outside the window.
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        if y < self.window.0 || y >= self.window.1 {
            return 0.0;
        }
        let (ix, wx) = self.xs.locate(x);
        let (iy, wy) = self.ys.locate(y);
        let at = |i: usize, j: usize| self.node(i.min(self.xs.n - 1), j.min(self.ys.n - 1));
        at(ix, iy) * (1.0 - wx) * (1.0 - wy)
            + at(ix + 1, iy) * wx * (1.0 - wy)
            + at(ix, iy + 1) * (1.0 - wx) * wy
            + at(ix + 1, iy + 1) * wx * wy
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Rows of (x, t, y, h) for CSV export.
    pub fn rows(&self) -> impl Iterator<Item = [f64; 4]> + '_ {
        (0..self.xs.n).flat_map(move |ix| {
            (0..self.ys.n).map(move |iy| {
                [
                    self.xs.coord(ix),
                    self.t,
                    self.ys.coord(iy),
                    self.node(ix, iy),
                ]
            })
        })
    }

    /// Synthetic h from a closure (used by negative controls).
    pub fn from_fn(
        t: f64,
        xs: Axis,
        ys: Axis,
        window: (f64, f64),
        f: impl Fn(f64, f64) -> f64,
    ) -> Self {
        let mut values = vec![0.0; xs.n * ys.n];
        for ix in 0..xs.n {
            for iy in 0..ys.n {
                values[ix * ys.n + iy] = f(xs.coord(ix), ys.coord(iy));
            }
        }
        HFunction {
            t,
            xs,
            ys,
            window,
            values,
            source: HSource::Synthetic,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SeriesOptions {
    pub n_max: usize,
    /// Poisson-domination bound on the truncated tail.
    pub tail_tol: f64,
    /// Refinement of the x quadrature grid relative to the kernel's.
    pub x_refine: usize,
}

impl Default for SeriesOptions {
    fn default() -> Self {
        SeriesOptions {
            n_max: 4,
            tail_tol: 1e-4,
            x_refine: 8,
        }
    }
}

/// Jump-count series for `h(x, y)`: the zero-jump term is the survival
/// weight `exp(-Gamma(x, a_plus, y))`; each further term integrates one
/// more in-window jump against the previous term.
pub fn compute_h_series(
    g: &JumpKernel,
    window: (f64, f64),
    opts: &SeriesOptions,
) -> Result<HFunction> {
    let a_plus = g.xs.hi;
    let nz = (g.xs.n - 1).max(1) * opts.x_refine.max(1) + 1;
    let xs = Axis::new(g.xs.lo, a_plus, nz);
    let ny = ((window.1 - window.0) / g.rho.step()).round() as usize + 1;
    let ys = Axis::new(window.0, window.1, ny.max(9));
    let rates = RateRows::plain(g);

    // Tail bound: the number of in-window jumps is dominated by a Poisson
    // variable with mean sup(A g) * span.
    let mut rate_sup = 0.0f64;
    for ix in 0..nz {
        for iy in 0..ys.n {
            rate_sup = rate_sup.max(rates.eval(xs.coord(ix), ys.coord(iy)));
        }
    }
    let lam = rate_sup * (a_plus - xs.lo);
    // Tail of the Poisson series: lam^(N+1)/(N+1)! times the geometric
    // factor 1/(1 - lam/(N+2)), valid once N + 2 > lam.
    let mut head = lam.powi(opts.n_max as i32 + 1);
    for k in 1..=(opts.n_max + 1) {
        head /= k as f64;
    }
    let tail = if (opts.n_max + 2) as f64 > lam {
        head / (1.0 - lam / (opts.n_max + 2) as f64)
    } else {
        f64::INFINITY
    };
    if tail > opts.tail_tol {
        return Err(CoreError::TruncationTail {
            estimate: tail,
            tol: opts.tail_tol,
            n_max: opts.n_max,
        });
    }

    // Cumulative outgoing intensity G(z, y) = int_{lo}^z A(g)(u, y) du.
    let dz = xs.step();
    let mut cum = vec![0.0; nz * ys.n];
    for iy in 0..ys.n {
        let y = ys.coord(iy);
        for ix in 1..nz {
            let a = rates.eval(xs.coord(ix - 1), y);
            let b = rates.eval(xs.coord(ix), y);
            cum[ix * ys.n + iy] = cum[(ix - 1) * ys.n + iy] + 0.5 * (a + b) * dz;
        }
    }
    let gamma = |ix: usize, jx: usize, iy: usize| cum[jx * ys.n + iy] - cum[ix * ys.n + iy];

    // h_0 and the iterated terms.
    let mut total = vec![0.0; nz * ys.n];
    let mut term = vec![0.0; nz * ys.n];
    for ix in 0..nz {
        for iy in 0..ys.n {
            term[ix * ys.n + iy] = (-gamma(ix, nz - 1, iy)).exp();
        }
    }
    for (t, v) in total.iter_mut().zip(&term) {
        *t += v;
    }
    let dy = ys.step();
    for _n in 1..=opts.n_max {
        // S(z, y) = int_U g(z, y, y1) term(z, y1) dy1.
        let mut s = vec![0.0; nz * ys.n];
        for ix in 0..nz {
            let x = xs.coord(ix);
            for iy in 0..ys.n {
                let y = ys.coord(iy);
                // Integrate targets over [y, window top] only: the
                // integrand is positive at y1 = y, so running the
                // quadrature across the support edge would add a spurious
                // half cell per term.
                let vals: Vec<f64> = (iy..ys.n)
                    .map(|jy| g.eval(x, y, ys.coord(jy)) * term[ix * ys.n + jy])
                    .collect();
                s[ix * ys.n + iy] = trapezoid_uniform(&vals, dy);
            }
        }
        // next(x, y) = int_x^{a+} exp(-Gamma(x, z, y)) S(z, y) dz.
        let mut next = vec![0.0; nz * ys.n];
        for ix in 0..nz {
            for iy in 0..ys.n {
                let vals: Vec<f64> = (ix..nz)
                    .map(|jx| (-gamma(ix, jx, iy)).exp() * s[jx * ys.n + iy])
                    .collect();
                next[ix * ys.n + iy] = trapezoid_uniform(&vals, dz);
            }
        }
        for (t, v) in total.iter_mut().zip(&next) {
            *t += v;
        }
        term = next;
    }

    for v in total.iter_mut() {
        // Probability bounds can overshoot 1 by quadrature error only.
        if *v > 1.0 + 2e-2 {
            return Err(CoreError::Hypothesis(format!(
                "series h = {v} exceeds 1 beyond quadrature error"
            )));
        }
        *v = v.min(1.0);
    }
    Ok(HFunction {
        t: g.t,
        xs,
        ys,
        window,
        values: total,
        source: HSource::Series { n_max: opts.n_max },
    })
}

/// Monte Carlo estimate of `h` at probe points: fraction of label paths
/// started at (x, y) that stay inside the window up to `a_plus`.
pub fn compute_h_mc(
    g: &JumpKernel,
    window: (f64, f64),
    points: &[(f64, f64)],
    n_paths: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let a_plus = g.xs.hi;
    let rates = RateRows::plain(g);
    let opts = SampleOptions::default();
    let mut out = Vec::with_capacity(points.len());
    for (pi, &(x, y)) in points.iter().enumerate() {
        let mut hits = 0usize;
        for k in 0..n_paths {
            let mut rng = stream(seed.wrapping_add(pi as u64), k as u64);
            let path = sample_y_process(g, &rates, x, a_plus, y, &mut rng, &opts)?;
            let stayed = path
                .jumps
                .iter()
                .all(|j| j.post >= window.0 && j.post < window.1);
            if stayed {
                hits += 1;
            }
        }
        let p = hits as f64 / n_paths as f64;
        let se = (p * (1.0 - p) / n_paths as f64).sqrt();
        out.push((p, se));
    }
    Ok(out)
}

/// Positivity floor below which the ratio weight is rejected.
pub const H_FLOOR: f64 = 1e-12;

/// The conditioned kernel `g_hat(x, y_-, y_+) = h(y_+)/h(y_-) g`, with
/// support clipped to the window.
pub fn transform_kernel(g: &JumpKernel, h: &HFunction) -> Result<JumpKernel> {
    let mut values = Vec::with_capacity(g.xs.n * JumpKernel::pair_count(g.rho.n));
    for ix in 0..g.xs.n {
        let x = g.xs.coord(ix);
        for i in 0..g.rho.n {
            for j in i..g.rho.n {
                let (ym, yp) = (g.rho.coord(i), g.rho.coord(j));
                let raw = g.node(ix, i, j);
                let in_window = |y: f64| y >= h.window.0 && y < h.window.1;
                if raw == 0.0 || !in_window(ym) || !in_window(yp) {
                    values.push(0.0);
                    continue;
                }
                let h_minus = h.eval(x, ym);
                if h_minus < H_FLOOR {
                    return Err(CoreError::PositivityFloor {
                        value: h_minus,
                        floor: H_FLOOR,
                    });
                }
                values.push(h.eval(x, yp) / h_minus * raw);
            }
        }
    }
    Ok(JumpKernel::from_fn(
        g.variant,
        g.t,
        g.xs,
        g.rho,
        |_, _, _| 0.0,
    )
    .with_values(values))
}

/// Residual of the x-direction harmonicity `h_x + B^1 h = 0` on the grid
/// interior (h is extended by zero outside the window, which folds the
/// kill term into the jump integral).
pub fn h_equation_residual_x(h: &HFunction, g: &JumpKernel) -> f64 {
    let hx = h.xs.step();
    let mut worst = 0.0f64;
    for ix in 1..h.xs.n - 1 {
        let x = h.xs.coord(ix);
        for iy in 0..h.ys.n.saturating_sub(1) {
            let y = h.ys.coord(iy);
            let h_x = (h.node(ix + 1, iy) - h.node(ix - 1, iy)) / (2.0 * hx);
            let gen = generator_row(h, g, x, y, h.node(ix, iy), None);
            worst = worst.max((h_x + gen).abs());
        }
    }
    worst
}

/// `B^i h(x, y) = int (h(y1) - h(y)) w g(x, y, y1) dy1` with an optional
/// velocity weight (`w = v_hat` gives `B^2`).
fn generator_row(
    h: &HFunction,
    g: &JumpKernel,
    x: f64,
    y: f64,
    h_at: f64,
    weight: Option<&dyn Fn(f64, f64) -> f64>,
) -> f64 {
    let axis = g.rho;
    let vals: Vec<f64> = (0..axis.n)
        .map(|j| {
            let y1 = axis.coord(j);
            if y1 <= y {
                return 0.0;
            }
            let w = weight.map_or(1.0, |w| w(y, y1));
            let h1 = if y1 >= h.window.0 && y1 < h.window.1 {
                h.eval(x, y1)
            } else {
                0.0
            };
            (h1 - h_at) * w * g.eval(x, y, y1)
        })
        .collect();
    trapezoid_uniform(&vals, axis.step())
}

/// Residual of the t-direction equation `h_t + B^2 h = 0` at `x = a_minus`,
/// from a family of h slices riding a kernel trajectory. Checking the
/// t-equation at the left edge suffices when the x-equation holds.
pub fn h_equation_residual_t_at_left(
    hs: &[HFunction],
    gs: &KernelSeries,
    model: &HamiltonianModel,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for k in 1..hs.len().saturating_sub(1) {
        let (prev, mid, next) = (&hs[k - 1], &hs[k], &hs[k + 1]);
        let two_dt = next.t - prev.t;
        let g = gs.slab_at(mid.t);
        let x = mid.xs.lo;
        let s = match g.variant {
            crate::kinetic::KernelVariant::G { s } => s,
            _ => {
                return Err(CoreError::Unsupported(
                    "t-equation residual needs a fundamental-class kernel",
                ))
            }
        };
        let weight =
            |lo: f64, hi: f64| crate::model::vhat(model, x, mid.t, lo, hi, s).unwrap_or(0.0);
        for iy in 0..mid.ys.n.saturating_sub(1) {
            let y = mid.ys.coord(iy);
            let h_t = (next.node(0, iy) - prev.node(0, iy)) / two_dt;
            let gen = generator_row(mid, g, x, y, mid.node(0, iy), Some(&weight));
            worst = worst.max((h_t + gen).abs());
        }
    }
    Ok(worst)
}

/// Kinetic-equation residual of a (possibly transformed) kernel
/// trajectory, by central differences across slabs and in x, with the
/// collision operators evaluated value-based. Pairs are restricted to the
/// margin-trimmed window when one is given (the transform clips support
/// there).
pub fn kinetic_residual_g(
    series: &KernelSeries,
    model: &HamiltonianModel,
    window: Option<(f64, f64)>,
) -> Result<f64> {
    let n_slabs = series.slabs.len();
    if n_slabs < 3 {
        return Err(CoreError::InvalidConfiguration(
            "need at least three saved slabs for the residual".into(),
        ));
    }
    let k = n_slabs / 2;
    let (prev, mid, next) = (&series.slabs[k - 1], &series.slabs[k], &series.slabs[k + 1]);
    let two_dt = next.t - prev.t;
    let margin = 2.0 * mid.rho.step();
    let (w_lo, w_hi) = window
        .map(|(a, b)| (a + margin, b - margin))
        .unwrap_or((mid.rho.lo, mid.rho.hi));
    let dx = mid.xs.step();
    let mut worst = 0.0f64;
    for ix in 1..mid.xs.n.saturating_sub(1) {
        let x = mid.xs.coord(ix);
        for i in 0..mid.rho.n {
            for j in i..mid.rho.n {
                let (ym, yp) = (mid.rho.coord(i), mid.rho.coord(j));
                if ym < w_lo || yp > w_hi {
                    continue;
                }
                let g_t = (next.node(ix, i, j) - prev.node(ix, i, j)) / two_dt;
                let vg = |c: usize| -> Result<f64> {
                    let xx = mid.xs.coord(c);
                    Ok(mid.velocity(model, xx, mid.t, ym, yp)? * mid.node(c, i, j))
                };
                let adv = (vg(ix + 1)? - vg(ix - 1)?) / (2.0 * dx);
                let qp = crate::kinetic::q_plus(mid, model, x, mid.t, ym, yp)?;
                let qm =
                    mid.node(ix, i, j) * crate::kinetic::j_of_f(mid, model, x, mid.t, ym, yp)?;
                worst = worst.max((g_t - adv - qp + qm).abs());
            }
        }
    }
    Ok(worst)
}

/// Telescoping consistency of the conditioned kernel:
/// `h(b, y) / h(a, y) = exp(-int_a^b [A(g_hat) - A(g)](z, y) dz)`.
pub fn telescoping_residual(
    h: &HFunction,
    g: &JumpKernel,
    g_hat: &JumpKernel,
    y_probes: &[f64],
) -> f64 {
    let mut worst = 0.0f64;
    let a = h.xs.lo;
    let b = h.xs.hi;
    let n = 4 * h.xs.n;
    for &y in y_probes {
        let integrand = |z: f64| {
            let a_hat = {
                let vals: Vec<f64> = (0..g_hat.rho.n)
                    .map(|j| g_hat.eval(z, y, g_hat.rho.coord(j)))
                    .collect();
                trapezoid_uniform(&vals, g_hat.rho.step())
            };
            let a_raw = {
                let vals: Vec<f64> = (0..g.rho.n)
                    .map(|j| g.eval(z, y, g.rho.coord(j)))
                    .collect();
                trapezoid_uniform(&vals, g.rho.step())
            };
            a_hat - a_raw
        };
        let integral = crate::quad::trapezoid_fn(integrand, a, b, n);
        // Log scale: the raw ratio amplifies absolute h errors by 1/h^2.
        let lhs = (h.eval(b - 1e-12, y) / h.eval(a, y)).ln();
        worst = worst.max((lhs + integral).abs());
    }
    worst
}

/// Window family of the conditioning construction: `U(delta) =
/// [y_floor, (1 - delta) a_plus)`. Returns `h(a_minus, y0)` per delta;
/// growing windows must push it monotonically toward 1.
pub fn h_delta_ladder(
    g: &JumpKernel,
    y_floor: f64,
    y0: f64,
    deltas: &[f64],
    opts: &SeriesOptions,
) -> Result<Vec<f64>> {
    let a_plus = g.xs.hi;
    let mut out = Vec::with_capacity(deltas.len());
    for &d in deltas {
        let window = (y_floor, (1.0 - d) * a_plus);
        if window.1 <= y0 {
            return Err(CoreError::InvalidConfiguration(format!(
                "window [{}, {}) excludes y0 = {y0}",
                window.0, window.1
            )));
        }
        let h = compute_h_series(g, window, opts)?;
        out.push(h.eval(g.xs.lo, y0));
    }
    Ok(out)
}
