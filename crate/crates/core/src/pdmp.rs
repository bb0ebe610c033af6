//! Exact samplers for the stochastic objects of the theory: PDMP initial
//! paths in x, the boundary jump process in t, pure-jump y-processes of
//! the fundamental class, and the candidate law densities `mu^n`.
//!
//! Jump times come from exact integrated-rate inversion: the cumulative
//! rate is integrated along the drift flow until it crosses a standard
//! exponential clock, and the crossing is localized by bisection. No rate
//! majorant is needed. Jump targets are drawn by inverse CDF on the
//! quadrature grid of the kernel row.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::grid::Axis;
use crate::kinetic::{JumpKernel, KernelSeries, MarginalLaw};
use crate::model::{beta, Drift, HamiltonianModel};
use crate::quad::trapezoid_nodes;
use crate::rng::exp1;
use crate::shockline::{ParticleClass, RightMode, ShockConfiguration};

/// Coordinate semantics of a sampled path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    /// `x`-path with drift between jumps (PDMP initial data).
    SpaceDrift,
    /// `t`-path at the right boundary (drift `beta`, jumps by `f^2`).
    TimeBoundary,
    /// `x`-path with no drift (fundamental-solution labels).
    SpaceJump,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Jump {
    pub location: f64,
    pub pre: f64,
    pub post: f64,
    /// Exponential clock consumed by this jump (Exp(1) by construction).
    pub clock: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathRealization {
    pub kind: PathKind,
    /// Start coordinate (a_minus, or t0 for boundary paths).
    pub anchor: f64,
    /// End coordinate (a_plus, or the final time).
    pub end: f64,
    pub init: f64,
    pub jumps: Vec<Jump>,
    pub final_value: f64,
    /// (seed, stream) bookkeeping for reproducibility reports.
    pub seed: Option<(u64, u64)>,
}

impl PathRealization {
    pub fn jump_count(&self) -> usize {
        self.jumps.len()
    }

    /// Segment starts: (coordinate, value just after it).
    pub fn segments(&self) -> Vec<(f64, f64)> {
        let mut out = vec![(self.anchor, self.init)];
        out.extend(self.jumps.iter().map(|j| (j.location, j.post)));
        out
    }

    /// Jumps must strictly increase the value.
    pub fn check_monotone_jumps(&self) -> Result<()> {
        for j in &self.jumps {
            if !(j.post > j.pre) {
                return Err(CoreError::Hypothesis(format!(
                    "jump at {} decreased the value: {} -> {}",
                    j.location, j.pre, j.post
                )));
            }
        }
        Ok(())
    }

    /// Rows of (coordinate, value, jump flag) for CSV export: one row per
    /// segment start plus the final point.
    pub fn rows(&self) -> Vec<[f64; 3]> {
        let mut out = vec![[self.anchor, self.init, 0.0]];
        for j in &self.jumps {
            out.push([j.location, j.pre, 1.0]);
            out.push([j.location, j.post, 1.0]);
        }
        out.push([self.end, self.final_value, 0.0]);
        out
    }
}

/// Precomputed outgoing-rate rows `lambda(x, value) = A(kernel)(x, value)`
/// with bilinear evaluation; zero outside the value box.
pub struct RateRows {
    pub xs: Axis,
    pub rho: Axis,
    vals: Vec<f64>,
}

impl RateRows {
    pub fn plain(kernel: &JumpKernel) -> Self {
        let mut vals = vec![0.0; kernel.xs.n * kernel.rho.n];
        for ix in 0..kernel.xs.n {
            for i in 0..kernel.rho.n {
                vals[ix * kernel.rho.n + i] = kernel.a_row(ix, i);
            }
        }
        RateRows {
            xs: kernel.xs,
            rho: kernel.rho,
            vals,
        }
    }

    pub fn eval(&self, x: f64, rho: f64) -> f64 {
        if !self.rho.contains(rho) {
            return 0.0;
        }
        let (ir, wr) = self.rho.locate(rho);
        let col = |ix: usize| {
            self.vals[ix * self.rho.n + ir] * (1.0 - wr)
                + self.vals[ix * self.rho.n + (ir + 1).min(self.rho.n - 1)] * wr
        };
        if self.xs.n == 1 {
            return col(0);
        }
        let (ix, wx) = self.xs.locate(x);
        col(ix) * (1.0 - wx) + col(ix + 1) * wx
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SampleOptions {
    /// Leg count across the sampling span.
    pub n_legs: usize,
    /// Bisection tolerance for jump locations, relative to the span.
    pub bisect_tol: f64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            n_legs: 256,
            bisect_tol: 1e-13,
        }
    }
}

/// Generic inhomogeneous jump-path sampler over `[span.0, span.1]` with
/// `dvalue/dz = drift(z, value)` between jumps.
fn sample_path(
    drift_fn: &dyn Fn(f64, f64) -> f64,
    rate_fn: &dyn Fn(f64, f64) -> f64,
    target_fn: &dyn Fn(f64, f64, &mut ChaCha8Rng) -> Result<f64>,
    span: (f64, f64),
    init: f64,
    kind: PathKind,
    rng: &mut ChaCha8Rng,
    opts: &SampleOptions,
) -> Result<PathRealization> {
    let (z0, z1) = span;
    let width = z1 - z0;
    assert!(width > 0.0, "empty sampling span");
    let leg = width / opts.n_legs as f64;
    let tol = opts.bisect_tol * width;

    // One RK4 leg of [value, accumulated rate] over [a, a + dz].
    let advance = |a: f64, val: f64, dz: f64| -> Result<(f64, f64)> {
        let f = |z: f64, y: &[f64; 2]| [drift_fn(z, y[0]), rate_fn(z, y[0])];
        let steps = 4;
        let out = crate::ode::integrate_fixed(&f, a, [val, 0.0], a + dz, steps);
        if !out[0].is_finite() || !out[1].is_finite() {
            return Err(CoreError::RateFailure(format!(
                "non-finite state while integrating rates at z = {a}"
            )));
        }
        Ok((out[0], out[1]))
    };

    let mut z = z0;
    let mut val = init;
    let mut acc = 0.0;
    let mut budget = exp1(rng);
    let mut jumps = Vec::new();

    while z < z1 - 1e-14 * width {
        let dz = leg.min(z1 - z);
        let (val_next, inc) = advance(z, val, dz)?;
        if acc + inc < budget {
            z += dz;
            val = val_next;
            acc += inc;
            continue;
        }
        // A jump fires inside this leg; bisect the crossing.
        let mut lo = 0.0;
        let mut hi = dz;
        for _ in 0..80 {
            if hi - lo <= tol {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let (_, inc_mid) = advance(z, val, mid)?;
            if acc + inc_mid >= budget {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let (val_at, _) = advance(z, val, hi)?;
        let zj = z + hi;
        let post = target_fn(zj, val_at, rng)?;
        jumps.push(Jump {
            location: zj,
            pre: val_at,
            post,
            clock: budget,
        });
        z = zj;
        val = post;
        acc = 0.0;
        budget = exp1(rng);
    }

    Ok(PathRealization {
        kind,
        anchor: z0,
        end: z1,
        init,
        jumps,
        final_value: val,
        seed: None,
    })
}

/// Inverse-CDF draw from a kernel row at `(x, value)`, restricted to
/// targets above `value`.
fn sample_row_target(
    kernel: &JumpKernel,
    weight: Option<&dyn Fn(f64, f64) -> f64>,
    x: f64,
    value: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let axis = kernel.rho;
    let hi = axis.hi;
    if value >= hi {
        return Err(CoreError::RateFailure(format!(
            "jump fired at value {value} with empty target range"
        )));
    }
    let mut nodes = vec![value];
    for k in 0..axis.n {
        let c = axis.coord(k);
        if c > value + 1e-14 && c < hi - 1e-14 {
            nodes.push(c);
        }
    }
    nodes.push(hi);
    let mut cdf = vec![0.0];
    let mut vals = Vec::with_capacity(nodes.len());
    for &s in &nodes {
        let w = weight.map_or(1.0, |w| w(value, s));
        let f = w * kernel.eval(x, value, s);
        if f < -1e-12 {
            return Err(CoreError::Hypothesis(format!(
                "negative jump rate {f} at ({x}, {value}, {s}); increasing-flavor hypothesis violated"
            )));
        }
        vals.push(f.max(0.0));
    }
    for k in 1..nodes.len() {
        let seg = 0.5 * (vals[k] + vals[k - 1]) * (nodes[k] - nodes[k - 1]);
        let prev = cdf[k - 1];
        cdf.push(prev + seg);
    }
    let total = *cdf.last().unwrap();
    if total <= 0.0 {
        return Err(CoreError::RateFailure(format!(
            "jump fired at ({x}, {value}) but the target row has zero mass"
        )));
    }
    let u: f64 = rng.gen::<f64>() * total;
    let mut k = 1;
    while k < cdf.len() - 1 && cdf[k] < u {
        k += 1;
    }
    let (c0, c1) = (cdf[k - 1], cdf[k]);
    let w = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
    let target = nodes[k - 1] + w * (nodes[k] - nodes[k - 1]);
    Ok(target.max(value + 1e-12 * (hi - axis.lo)))
}

/// Sample one PDMP path in x at the kernel's time slice: drift `b` between
/// jumps, rate rows `A(f)`, targets from the f-row at the current state.
pub fn sample_pdmp_path(
    drift: &dyn Drift,
    kernel: &JumpKernel,
    rates: &RateRows,
    a_minus: f64,
    a_plus: f64,
    init: f64,
    rng: &mut ChaCha8Rng,
    opts: &SampleOptions,
) -> Result<PathRealization> {
    let t = kernel.t;
    let drift_fn = |z: f64, val: f64| drift.eval(z, t, val);
    let rate_fn = |z: f64, val: f64| rates.eval(z, val);
    let target_fn = |z: f64, val: f64, rng: &mut ChaCha8Rng| {
        sample_row_target(kernel, None, z, val, rng)
    };
    let path = sample_path(
        &drift_fn,
        &rate_fn,
        &target_fn,
        (a_minus, a_plus),
        init,
        PathKind::SpaceDrift,
        rng,
        opts,
    )?;
    path.check_monotone_jumps()?;
    Ok(path)
}

/// Sample the fundamental-class label process: piecewise constant, jump
/// rate rows `A(g)`.
pub fn sample_y_process(
    g: &JumpKernel,
    rates: &RateRows,
    a_minus: f64,
    a_plus: f64,
    y0: f64,
    rng: &mut ChaCha8Rng,
    opts: &SampleOptions,
) -> Result<PathRealization> {
    let drift_fn = |_z: f64, _val: f64| 0.0;
    let rate_fn = |z: f64, val: f64| rates.eval(z, val);
    let target_fn =
        |z: f64, val: f64, rng: &mut ChaCha8Rng| sample_row_target(g, None, z, val, rng);
    let path = sample_path(
        &drift_fn,
        &rate_fn,
        &target_fn,
        (a_minus, a_plus),
        y0,
        PathKind::SpaceJump,
        rng,
        opts,
    )?;
    path.check_monotone_jumps()?;
    Ok(path)
}

/// Boundary jump rates `eta(t, m) = A(f^2)(a_plus, t, m)` tabulated over
/// the saved kernel slabs, with a nonnegativity check of the integrand
/// (`f^2 >= 0` is what makes the boundary process Markov).
pub struct EtaSeries {
    times: Vec<f64>,
    rho: Axis,
    vals: Vec<f64>,
}

impl EtaSeries {
    pub fn build(
        series: &KernelSeries,
        model: &HamiltonianModel,
        a_plus: f64,
    ) -> Result<Self> {
        let rho = series.slabs[0].rho;
        let mut times = Vec::new();
        let mut vals = Vec::new();
        for slab in &series.slabs {
            times.push(slab.t);
            for i in 0..rho.n {
                let m = rho.coord(i);
                let mut nodes = Vec::new();
                let mut integrand = Vec::new();
                for j in i..rho.n {
                    let s = rho.coord(j);
                    let w = slab.velocity(model, a_plus, slab.t, m, s)?;
                    let f = slab.eval(a_plus, m, s);
                    let v = w * f;
                    if v < -1e-12 {
                        return Err(CoreError::Hypothesis(format!(
                            "f^2({a_plus}, {}, {m}, {s}) = {v} < 0; boundary process \
                             requires an increasing Hamiltonian",
                            slab.t
                        )));
                    }
                    nodes.push(s);
                    integrand.push(v.max(0.0));
                }
                vals.push(trapezoid_nodes(&nodes, &integrand));
            }
        }
        Ok(EtaSeries { times, rho, vals })
    }

    pub fn eval(&self, t: f64, m: f64) -> f64 {
        if !self.rho.contains(m) {
            return 0.0;
        }
        let (ir, wr) = self.rho.locate(m);
        let n = self.rho.n;
        let at = |k: usize| {
            self.vals[k * n + ir] * (1.0 - wr) + self.vals[k * n + (ir + 1).min(n - 1)] * wr
        };
        let nt = self.times.len();
        if nt == 1 || t <= self.times[0] {
            return at(0);
        }
        if t >= self.times[nt - 1] {
            return at(nt - 1);
        }
        let mut k = 0;
        while k + 1 < nt && self.times[k + 1] <= t {
            k += 1;
        }
        let dt = self.times[k + 1] - self.times[k];
        let w = if dt > 0.0 { (t - self.times[k]) / dt } else { 0.0 };
        at(k) * (1.0 - w) + at(k + 1) * w
    }
}

/// Sample the boundary process at `a_plus` over `[t0, t1]`: drift by the
/// gamma flow (`zetadot = beta`), jumps at rate `eta`, targets from the
/// velocity-weighted kernel row at the jump time.
#[allow(clippy::too_many_arguments)]
pub fn sample_boundary_process(
    model: &HamiltonianModel,
    drift: &dyn Drift,
    series: &KernelSeries,
    eta: &EtaSeries,
    a_plus: f64,
    t_range: (f64, f64),
    init: f64,
    rng: &mut ChaCha8Rng,
    opts: &SampleOptions,
) -> Result<PathRealization> {
    let drift_fn = |th: f64, m: f64| beta(model, drift, a_plus, th, m);
    let rate_fn = |th: f64, m: f64| eta.eval(th, m);
    let target_fn = |th: f64, m: f64, rng: &mut ChaCha8Rng| {
        let slab = series.slab_at(th);
        let weight = |lo: f64, hi: f64| {
            slab.velocity(model, a_plus, th, lo, hi).unwrap_or(0.0)
        };
        sample_row_target(slab, Some(&weight), a_plus, m, rng)
    };
    let path = sample_path(
        &drift_fn,
        &rate_fn,
        &target_fn,
        t_range,
        init,
        PathKind::TimeBoundary,
        rng,
        opts,
    )?;
    path.check_monotone_jumps()?;
    Ok(path)
}

/// Stochastic-right boundary mode for the particle simulator, built from
/// the kernel trajectory.
pub fn boundary_injector<'a>(
    model: &'a HamiltonianModel,
    series: &'a KernelSeries,
    eta: &'a EtaSeries,
    a_plus: f64,
    rng: &'a mut ChaCha8Rng,
) -> RightMode<'a> {
    RightMode::Stochastic {
        eta: Box::new(move |t, m| eta.eval(t, m)),
        target: Box::new(move |t, m, rng: &mut ChaCha8Rng| {
            let slab = series.slab_at(t);
            let weight =
                |lo: f64, hi: f64| slab.velocity(model, a_plus, t, lo, hi).unwrap_or(0.0);
            sample_row_target(slab, Some(&weight), a_plus, m, rng)
        }),
        rng,
    }
}

/// Recompute the exponential clock increments of a sampled path by
/// re-integrating the rate along the recorded segments with a finer step.
/// The final censored segment is excluded.
pub fn clock_increments(
    path: &PathRealization,
    drift_fn: &dyn Fn(f64, f64) -> f64,
    rate_fn: &dyn Fn(f64, f64) -> f64,
    steps_per_segment: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(path.jumps.len());
    let mut start = (path.anchor, path.init);
    for j in &path.jumps {
        let f = |z: f64, y: &[f64; 2]| [drift_fn(z, y[0]), rate_fn(z, y[0])];
        let res = crate::ode::integrate_fixed(
            &f,
            start.0,
            [start.1, 0.0],
            j.location,
            steps_per_segment.max(8),
        );
        out.push(res[1]);
        start = (j.location, j.post);
    }
    out
}

/// Turn a sampled initial path into a shock configuration at the path's
/// time slice.
pub fn path_to_configuration(
    path: &PathRealization,
    class: ParticleClass,
    t: f64,
    a_plus: f64,
) -> Result<ShockConfiguration> {
    let shocks: Vec<(f64, f64)> = path
        .jumps
        .iter()
        .map(|j| (j.location, j.post))
        .filter(|&(x, _)| x < a_plus)
        .collect();
    ShockConfiguration::new(class, path.anchor, a_plus, t, path.init, &shocks)
}

/// Survival exponent `Gamma(q, t)`: the outgoing jump intensity integrated
/// along the reconstructed profile.
pub fn gamma_big(
    q: &ShockConfiguration,
    kernel: &JumpKernel,
    drift: &dyn Drift,
) -> Result<f64> {
    let t = q.t;
    let mut total = 0.0;
    let n = q.particles.len();
    for i in 0..n {
        let (x_i, v_i) = q.particles[i];
        let x_next = if i + 1 < n {
            q.particles[i + 1].0
        } else {
            q.a_plus
        };
        if x_next <= x_i {
            continue;
        }
        match q.class {
            ParticleClass::Pdmp => {
                let f = |z: f64, y: &[f64; 2]| {
                    [drift.eval(z, t, y[0]), kernel.a_of(z, y[0])]
                };
                let steps = 32;
                let out = crate::ode::integrate_fixed(&f, x_i, [v_i, 0.0], x_next, steps);
                total += out[1];
            }
            ParticleClass::Fundamental { .. } => {
                let f = |z: f64, y: &[f64; 1]| {
                    let _ = y;
                    [kernel.a_of(z, v_i)]
                };
                let out = crate::ode::integrate_fixed(&f, x_i, [0.0], x_next, 32);
                total += out[0];
            }
        }
    }
    Ok(total)
}

/// Candidate law density `mu^n(q, t) = ell(t, value_0) exp(-Gamma)
/// prod_i f(x_i, t, transported left value, value_i)`.
pub fn mu_n_density(
    q: &ShockConfiguration,
    ell: &MarginalLaw,
    kernel: &JumpKernel,
    model: &HamiltonianModel,
    drift: &dyn Drift,
    phi_substep: f64,
) -> Result<f64> {
    let mut density = ell.density_at(q.particles[0].1);
    density *= (-gamma_big(q, kernel, drift)?).exp();
    for i in 1..q.particles.len() {
        let (x_i, v_i) = q.particles[i];
        let left = crate::shockline::left_value(q, i, model, drift, phi_substep)?;
        density *= kernel.eval(x_i, left, v_i);
    }
    Ok(density)
}

/// Fraction of sampled label paths with `y(a_plus) / a_plus < 1`, per
/// right-endpoint: the sublinear-growth diagnostic.
pub fn escape_fraction(
    g: &JumpKernel,
    a_minus: f64,
    a_plus_ladder: &[f64],
    y0: f64,
    n_paths: usize,
    seed: u64,
    opts: &SampleOptions,
) -> Result<Vec<f64>> {
    let rates = RateRows::plain(g);
    let mut out = Vec::with_capacity(a_plus_ladder.len());
    for &a_plus in a_plus_ladder {
        let mut hits = 0usize;
        for k in 0..n_paths {
            let mut rng = crate::rng::stream(seed, k as u64);
            let path = sample_y_process(g, &rates, a_minus, a_plus, y0, &mut rng, opts)?;
            if path.final_value / a_plus < 1.0 {
                hits += 1;
            }
        }
        out.push(hits as f64 / n_paths as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetic::{step_ell, step_marginal_in_x, KernelVariant};
    use crate::model::library::{burgers, linear, shifted_burgers};
    use crate::model::{ConstDrift, ZeroDrift};
    use crate::rng::stream;
    use crate::stats::{ks_p_value, ks_statistic, sort_samples};

    fn unit_band_kernel(p_plus: f64, n: usize) -> JumpKernel {
        JumpKernel::from_fn(
            KernelVariant::F,
            0.0,
            Axis::point(0.0),
            Axis::new(0.0, p_plus, n),
            |_x, _lo, _hi| 1.0,
        )
    }

    #[test]
    fn zero_kernel_gives_pure_drift_path() {
        let zero = JumpKernel::from_fn(
            KernelVariant::F,
            0.0,
            Axis::point(0.0),
            Axis::new(-2.0, 2.0, 17),
            |_, _, _| 0.0,
        );
        let rates = RateRows::plain(&zero);
        let mut rng = stream(1, 0);
        let path = sample_pdmp_path(
            &ConstDrift(-0.5),
            &zero,
            &rates,
            0.0,
            2.0,
            1.0,
            &mut rng,
            &SampleOptions::default(),
        )
        .unwrap();
        assert_eq!(path.jump_count(), 0);
        assert!((path.final_value - (1.0 - 0.5 * 2.0)).abs() < 1e-9);
    }

    #[test]
    fn mean_jump_count_matches_forward_equation() {
        // b = 0, f = 1 on the simplex over [0, 2]: lambda(rho) = 2 - rho.
        // The forward equation in x supplies the expected jump count.
        let f = unit_band_kernel(2.0, 65);
        let rates = RateRows::plain(&f);
        let m = burgers(-1.0, 3.0);

        // Deterministic prediction: evolve pi in x, accumulate
        // int lambda d pi dx.
        let axis = Axis::new(0.0, 2.0, 201);
        let mut pi = MarginalLaw::from_density(
            axis,
            |r| (-0.5 * (r / 0.02).powi(2)).exp(),
            0.0,
            0.0,
        );
        let n_steps = 400;
        let dx = 1.0 / n_steps as f64;
        let mut expected = 0.0;
        for _ in 0..n_steps {
            let lam: Vec<f64> = (0..axis.n)
                .map(|i| rates.eval(0.0, axis.coord(i)) * pi.values[i])
                .collect();
            expected += dx * crate::quad::trapezoid_uniform(&lam, axis.step());
            pi = step_marginal_in_x(&pi, &f, &ZeroDrift, 0.0, dx);
        }
        let _ = m;

        let n_paths = 4000;
        let mut counts = Vec::with_capacity(n_paths);
        for k in 0..n_paths {
            let mut rng = stream(5, k as u64);
            let path = sample_pdmp_path(
                &ZeroDrift,
                &f,
                &rates,
                0.0,
                1.0,
                0.0,
                &mut rng,
                &SampleOptions::default(),
            )
            .unwrap();
            path.check_monotone_jumps().unwrap();
            counts.push(path.jump_count() as f64);
        }
        let mean = crate::stats::mean(&counts);
        let se = crate::stats::std_error(&counts);
        assert!(
            (mean - expected).abs() <= 3.0 * se + 0.01,
            "MC mean {mean} vs forward-equation {expected} (se {se})"
        );
    }

    #[test]
    fn time_changed_clocks_are_standard_exponential() {
        // First increments only: over a long domain the total integrated
        // rate from the start state is ~2 L >= 20, so censoring of the
        // first clock is negligible and its law is exactly Exp(1). The
        // recomputation goes through an independent fine quadrature, so
        // this also pins the inversion accuracy.
        let f = unit_band_kernel(2.0, 65);
        let rates = RateRows::plain(&f);
        let span = 10.0;
        let mut firsts = Vec::new();
        let mut worst_inversion = 0.0f64;
        for k in 0..2500 {
            let mut rng = stream(6, k as u64);
            let path = sample_pdmp_path(
                &ZeroDrift,
                &f,
                &rates,
                0.0,
                span,
                0.0,
                &mut rng,
                &SampleOptions::default(),
            )
            .unwrap();
            let rate_fn = |z: f64, val: f64| rates.eval(z, val);
            let drift_fn = |_z: f64, _v: f64| 0.0;
            let recomputed = clock_increments(&path, &drift_fn, &rate_fn, 64);
            for (got, jump) in recomputed.iter().zip(&path.jumps) {
                worst_inversion = worst_inversion.max((got - jump.clock).abs());
            }
            if let Some(first) = recomputed.first() {
                firsts.push(*first);
            }
        }
        assert!(worst_inversion <= 1e-8, "inversion error {worst_inversion}");
        assert!(firsts.len() > 2400);
        let sorted = sort_samples(firsts);
        let d = ks_statistic(&sorted, |x| 1.0 - (-x).exp());
        let p = ks_p_value(d, sorted.len());
        assert!(p > 0.01, "KS D = {d}, p = {p}, n = {}", sorted.len());
    }

    #[test]
    fn boundary_process_with_unit_rate_is_poisson() {
        // H = c rho makes v = c = 1, and exponential jump displacements
        // f(m, s) = exp(-(s - m)) on a wide box keep eta(m) = 1 wherever
        // the state can reach: jump times form a unit-rate Poisson
        // process. Pooled jump times are then uniform on the window and
        // counts have mean T.
        let m = linear(1.0, 0.0, 50.0);
        let f = JumpKernel::from_fn(
            KernelVariant::F,
            0.0,
            Axis::point(5.0),
            Axis::new(0.0, 50.0, 1025),
            |_x, lo, hi| (-(hi - lo)).exp(),
        );
        let series = KernelSeries::new(vec![f.clone(), f.at_time(40.0)]);
        let eta = EtaSeries::build(&series, &m, 5.0).unwrap();
        for mm in [0.0, 3.0, 10.0, 20.0] {
            assert!((eta.eval(3.0, mm) - 1.0).abs() < 1e-3, "eta({mm})");
        }
        let t1 = 6.0;
        let mut times = Vec::new();
        let mut counts = Vec::new();
        for k in 0..700 {
            let mut rng = stream(7, k as u64);
            let path = sample_boundary_process(
                &m,
                &ZeroDrift,
                &series,
                &eta,
                5.0,
                (0.0, t1),
                0.0,
                &mut rng,
                &SampleOptions {
                    n_legs: 1024,
                    ..Default::default()
                },
            )
            .unwrap();
            counts.push(path.jump_count() as f64);
            times.extend(path.jumps.iter().map(|j| j.location));
        }
        let mean = crate::stats::mean(&counts);
        let se = crate::stats::std_error(&counts);
        assert!((mean - t1).abs() <= 3.0 * se + 0.05, "count mean {mean}");
        let sorted = sort_samples(times);
        let d = ks_statistic(&sorted, |x| (x / t1).clamp(0.0, 1.0));
        let p = ks_p_value(d, sorted.len());
        assert!(p > 0.01, "KS D = {d}, p = {p}, n = {}", sorted.len());
    }

    #[test]
    fn boundary_marginal_agrees_with_forward_equation() {
        // Increasing model, x-independent band kernel: the empirical
        // boundary marginal must match the step_ell solution.
        let m = shifted_burgers(0.0, 1.0);
        let bump = |r: f64| {
            if r <= 0.0 || r >= 1.0 {
                0.0
            } else {
                16.0 * (r * (1.0 - r)).powi(2)
            }
        };
        let f = JumpKernel::from_fn(
            KernelVariant::F,
            0.0,
            Axis::point(0.0),
            Axis::new(0.0, 1.0, 65),
            move |_x, lo, hi| 6.0 * bump(lo) * bump(hi),
        );
        let series = KernelSeries::new(vec![f.clone(), f.at_time(1.0)]);
        let eta = EtaSeries::build(&series, &m, 0.0).unwrap();

        let axis = Axis::new(0.0, 1.0, 129);
        let mut ell = MarginalLaw::delta(axis, 0.2, 0.0, 0.0);
        let init_law = ell.clone();
        let t1 = 1.0;
        let n_steps = 200;
        for _ in 0..n_steps {
            ell = step_ell(&ell, &f, &ZeroDrift, &m, t1 / n_steps as f64).unwrap();
        }

        let n_paths = 3000;
        let mut finals = Vec::with_capacity(n_paths);
        for k in 0..n_paths {
            let mut rng = stream(8, k as u64);
            let init = init_law.sample(&mut rng);
            let path = sample_boundary_process(
                &m,
                &ZeroDrift,
                &series,
                &eta,
                0.0,
                (0.0, t1),
                init,
                &mut rng,
                &SampleOptions::default(),
            )
            .unwrap();
            finals.push(path.final_value);
        }
        let sorted = sort_samples(finals);
        let d = ks_statistic(&sorted, |r| ell.cdf_at(r));
        let allowance = 1.0 / (n_paths as f64).sqrt() + axis.step();
        assert!(d <= 3.0 * allowance, "KS D = {d}, allowance = {allowance}");
    }

    #[test]
    fn y_process_zero_kernel_is_constant() {
        let g = JumpKernel::from_fn(
            KernelVariant::G { s: -1.0 },
            0.0,
            Axis::point(0.0),
            Axis::new(0.0, 1.0, 17),
            |_, _, _| 0.0,
        );
        let rates = RateRows::plain(&g);
        let mut rng = stream(9, 0);
        let path =
            sample_y_process(&g, &rates, -1.0, 4.0, 0.3, &mut rng, &SampleOptions::default())
                .unwrap();
        assert_eq!(path.jump_count(), 0);
        assert_eq!(path.final_value, 0.3);
    }

    #[test]
    fn y_process_no_jump_probability_matches_survival_exponent() {
        let g = JumpKernel::from_fn(
            KernelVariant::G { s: -1.0 },
            0.0,
            Axis::new(-1.0, 1.0, 9),
            Axis::new(0.0, 1.0, 65),
            |_x, _lo, _hi| 0.8,
        );
        let rates = RateRows::plain(&g);
        let y0 = 0.25;
        // Survival over [a-, a+] at constant row integral 0.8 (1 - y0).
        let lam = 0.8 * (1.0 - y0);
        let want = (-lam * 2.0f64).exp();
        let n_paths = 4000;
        let mut zero_jumps = 0;
        for k in 0..n_paths {
            let mut rng = stream(10, k as u64);
            let path = sample_y_process(
                &g,
                &rates,
                -1.0,
                1.0,
                y0,
                &mut rng,
                &SampleOptions::default(),
            )
            .unwrap();
            if path.jump_count() == 0 {
                zero_jumps += 1;
            }
        }
        let frac = zero_jumps as f64 / n_paths as f64;
        let se = (want * (1.0 - want) / n_paths as f64).sqrt();
        assert!(
            (frac - want).abs() <= 3.0 * se + 1e-3,
            "no-jump fraction {frac} vs exp(-Gamma) = {want}"
        );
    }

    #[test]
    fn escape_fraction_reaches_one_for_bounded_support() {
        let g = JumpKernel::from_fn(
            KernelVariant::G { s: -1.0 },
            0.0,
            Axis::point(0.0),
            Axis::new(0.0, 1.0, 33),
            |_x, _lo, _hi| 1.0,
        );
        let fr = escape_fraction(&g, 0.0, &[1.5, 3.0, 6.0], 0.1, 200, 11, &SampleOptions::default())
            .unwrap();
        assert!(fr.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        assert_eq!(*fr.last().unwrap(), 1.0);
    }

    #[test]
    fn gamma_big_constant_intensity() {
        // Rows integrating to a constant c: Gamma = c (a+ - a-).
        let c = 0.7;
        let p_plus = 2.0;
        let f = JumpKernel::from_fn(
            KernelVariant::F,
            0.0,
            Axis::point(0.0),
            Axis::new(0.0, p_plus, 257),
            move |_x, lo, _hi| {
                if lo < p_plus - 1e-9 {
                    c / (p_plus - lo)
                } else {
                    0.0
                }
            },
        );
        let m = burgers(-1.0, 3.0);
        let q = ShockConfiguration::new(
            ParticleClass::Pdmp,
            -1.0,
            1.0,
            0.0,
            0.5,
            &[(0.2, 1.0)],
        )
        .unwrap();
        let _ = m;
        let got = gamma_big(&q, &f, &ZeroDrift).unwrap();
        assert!((got - c * 2.0).abs() < 1e-2, "Gamma = {got}");
    }

    #[test]
    fn no_jump_fraction_matches_mu_zero_weight() {
        // P(no jump) = E[exp(-Gamma)] for the x-sampler with fixed init.
        let m = burgers(-1.0, 3.0);
        let bump = |r: f64| {
            if r <= 0.0 || r >= 2.0 {
                0.0
            } else {
                let u = r / 2.0;
                16.0 * (u * (1.0 - u)).powi(2)
            }
        };
        let f = JumpKernel::from_fn(
            KernelVariant::F,
            0.0,
            Axis::point(0.0),
            Axis::new(0.0, 2.0, 65),
            move |_x, lo, hi| 2.0 * bump(lo) * bump(hi),
        );
        let rates = RateRows::plain(&f);
        let init = 0.4;
        let q0 = ShockConfiguration::new(ParticleClass::Pdmp, 0.0, 1.0, 0.0, init, &[])
            .unwrap();
        let _ = m;
        let want = (-gamma_big(&q0, &f, &ZeroDrift).unwrap()).exp();
        let n_paths = 4000;
        let mut zero = 0;
        for k in 0..n_paths {
            let mut rng = stream(12, k as u64);
            let p = sample_pdmp_path(
                &ZeroDrift,
                &f,
                &rates,
                0.0,
                1.0,
                init,
                &mut rng,
                &SampleOptions::default(),
            )
            .unwrap();
            if p.jump_count() == 0 {
                zero += 1;
            }
        }
        let frac = zero as f64 / n_paths as f64;
        let se = (want * (1.0 - want) / n_paths as f64).sqrt();
        assert!(
            (frac - want).abs() <= 3.0 * se + 1e-3,
            "fraction {frac} vs E[exp(-Gamma)] = {want}"
        );
    }

    #[test]
    fn identical_seed_reproduces_the_path_exactly() {
        let f = unit_band_kernel(2.0, 33);
        let rates = RateRows::plain(&f);
        let run = || {
            let mut rng = stream(13, 42);
            sample_pdmp_path(
                &ZeroDrift,
                &f,
                &rates,
                0.0,
                1.0,
                0.1,
                &mut rng,
                &SampleOptions::default(),
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }
}
