//! Event-driven evolution of the shock-particle system and reconstruction
//! of the entropy solution from a configuration.
//!
//! A configuration holds the anchor value at `a_minus` plus ordered shock
//! particles. Between events, positions obey `xdot_i = -v` and post-shock
//! values obey `rhodot_i = -K` (the anchor value follows `beta`); the
//! fundamental class moves positions by `-v_hat` with frozen labels.
//! Events: left exit (relabel), pairwise collision (merge), and, in
//! stochastic-right mode, injection of a fresh particle at `a_plus`.

use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::model::{
    beta, fundamental_m, shock_velocity_unchecked, vhat, Drift, HamiltonianModel,
};
use crate::ode::Rk4Scratch;
use crate::rng::exp1;

/// Which reconstruction the configuration uses between particles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParticleClass {
    /// Drift flow between shocks; particles are (x_i, rho_i).
    Pdmp,
    /// Fundamental solutions seeded at time `s`; particles are (x_i, y_i).
    Fundamental { s: f64 },
}

/// A point of the configuration space: ordered particles with the anchor
/// at index 0 pinned to `a_minus`.
#[derive(Debug, Clone)]
pub struct ShockConfiguration {
    pub class: ParticleClass,
    pub a_minus: f64,
    pub a_plus: f64,
    pub t: f64,
    /// `(x_i, value_i)`; `particles[0].0 == a_minus`.
    pub particles: Vec<(f64, f64)>,
}

impl ShockConfiguration {
    pub fn new(
        class: ParticleClass,
        a_minus: f64,
        a_plus: f64,
        t: f64,
        anchor_value: f64,
        shocks: &[(f64, f64)],
    ) -> Result<Self> {
        let mut particles = vec![(a_minus, anchor_value)];
        particles.extend_from_slice(shocks);
        let q = ShockConfiguration {
            class,
            a_minus,
            a_plus,
            t,
            particles,
        };
        q.check_ordering()?;
        Ok(q)
    }

    pub fn n_shocks(&self) -> usize {
        self.particles.len() - 1
    }

    /// Strict ordering `a_- = x_0 < x_1 < ... < x_n < a_+` (for the
    /// fundamental class also `y_0 < y_1 < ...`).
    pub fn check_ordering(&self) -> Result<()> {
        let mut prev = self.a_minus;
        for (k, &(x, _)) in self.particles.iter().enumerate() {
            if k == 0 {
                if x != self.a_minus {
                    return Err(CoreError::InvalidConfiguration(format!(
                        "anchor at {x}, expected a_minus = {}",
                        self.a_minus
                    )));
                }
                continue;
            }
            if !(x > prev) || !(x <= self.a_plus) {
                return Err(CoreError::InvalidConfiguration(format!(
                    "particle {k} at x = {x} breaks ordering (prev = {prev}, a_plus = {})",
                    self.a_plus
                )));
            }
            prev = x;
        }
        if let ParticleClass::Fundamental { .. } = self.class {
            for w in self.particles.windows(2) {
                if !(w[1].1 > w[0].1) {
                    return Err(CoreError::InvalidConfiguration(format!(
                        "labels must increase: {} then {}",
                        w[0].1, w[1].1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Index of the segment containing `x`.
    fn segment(&self, x: f64) -> Result<usize> {
        if x < self.a_minus - 1e-12 || x > self.a_plus + 1e-12 {
            return Err(CoreError::DomainViolation {
                what: "reconstruct position",
                value: x,
                lo: self.a_minus,
                hi: self.a_plus,
            });
        }
        let mut i = 0;
        for (k, &(xk, _)) in self.particles.iter().enumerate() {
            if xk <= x {
                i = k;
            } else {
                break;
            }
        }
        Ok(i)
    }
}

/// Step used by value transport along the drift between particles.
fn phi_seg(drift: &dyn Drift, a: f64, x: f64, m: f64, t: f64, h: f64) -> f64 {
    crate::drift::phi_flow_fixed(drift, a, x, m, t, h)
}

/// The entropy solution value at `x` implied by a configuration.
pub fn reconstruct(
    q: &ShockConfiguration,
    x: f64,
    model: &HamiltonianModel,
    drift: &dyn Drift,
    phi_substep: f64,
) -> Result<f64> {
    let i = q.segment(x)?;
    let (xi, vi) = q.particles[i];
    match q.class {
        ParticleClass::Pdmp => Ok(phi_seg(drift, xi, x, vi, q.t, phi_substep)),
        ParticleClass::Fundamental { s } => fundamental_m(model, x, q.t, vi, s),
    }
}

/// Left limit of the solution at particle `i >= 1`: the previous value
/// transported to `x_i`.
pub fn left_value(
    q: &ShockConfiguration,
    i: usize,
    model: &HamiltonianModel,
    drift: &dyn Drift,
    phi_substep: f64,
) -> Result<f64> {
    let (x_prev, v_prev) = q.particles[i - 1];
    let (x_i, _) = q.particles[i];
    match q.class {
        ParticleClass::Pdmp => Ok(phi_seg(drift, x_prev, x_i, v_prev, q.t, phi_substep)),
        ParticleClass::Fundamental { s } => fundamental_m(model, x_i, q.t, v_prev, s),
    }
}

/// Sampled profile with the exact jump locations and one-sided limits.
#[derive(Debug, Clone)]
pub struct SolutionProfile {
    pub t: f64,
    pub xs: Vec<f64>,
    pub values: Vec<f64>,
    /// `(x_i, left limit, right limit)`.
    pub jumps: Vec<(f64, f64, f64)>,
}

pub fn profile(
    q: &ShockConfiguration,
    n_samples: usize,
    model: &HamiltonianModel,
    drift: &dyn Drift,
    phi_substep: f64,
) -> Result<SolutionProfile> {
    let n = n_samples.max(2);
    let mut xs = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for k in 0..n {
        let x = q.a_minus + (q.a_plus - q.a_minus) * k as f64 / (n - 1) as f64;
        xs.push(x);
        values.push(reconstruct(q, x, model, drift, phi_substep)?);
    }
    let mut jumps = Vec::new();
    for i in 1..q.particles.len() {
        let left = left_value(q, i, model, drift, phi_substep)?;
        jumps.push((q.particles[i].0, left, q.particles[i].1));
    }
    Ok(SolutionProfile {
        t: q.t,
        xs,
        values,
        jumps,
    })
}

/// L1 distance between the reconstructions of two configurations on their
/// shared interval, integrating piecewise between the union of
/// breakpoints.
pub fn l1_distance(
    qa: &ShockConfiguration,
    qb: &ShockConfiguration,
    model: &HamiltonianModel,
    drift: &dyn Drift,
    nodes_per_segment: usize,
    phi_substep: f64,
) -> Result<f64> {
    let mut brk: Vec<f64> = vec![qa.a_minus, qa.a_plus];
    for &(x, _) in qa.particles.iter().chain(qb.particles.iter()) {
        if x > qa.a_minus && x < qa.a_plus {
            brk.push(x);
        }
    }
    brk.sort_by(|a, b| a.partial_cmp(b).unwrap());
    brk.dedup_by(|a, b| (*a - *b).abs() < 1e-13);
    let m = nodes_per_segment.max(2);
    let mut total = 0.0;
    for w in brk.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi - lo < 1e-13 {
            continue;
        }
        // Open the interval slightly to stay on one side of each jump.
        let eps = 1e-12 * (hi - lo);
        let mut acc = 0.0;
        for k in 0..m {
            let x = (lo + eps) + (hi - lo - 2.0 * eps) * k as f64 / (m - 1) as f64;
            let d = (reconstruct(qa, x, model, drift, phi_substep)?
                - reconstruct(qb, x, model, drift, phi_substep)?)
                .abs();
            acc += if k == 0 || k == m - 1 { 0.5 * d } else { d };
        }
        total += acc * (hi - lo) / (m - 1) as f64;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    /// `x_1` reached `a_minus`; the exiting particle becomes the anchor.
    LeftExit { new_anchor_value: f64 },
    /// `x_{i+1}` caught `x_i`; the i-th particle is dropped.
    Merge { index: usize },
    /// Boundary process fired: a particle entered at `a_plus`.
    Injection { value: f64 },
    /// Fundamental class only: the last particle reached `a_plus` and
    /// left the window (both endpoints are free there).
    RightExit { value: f64 },
    /// The fundamental-class velocity jumped at particle `index`
    /// (an interior shock of `M` crossed it); logged, no state change.
    VhatJump { index: usize },
}

#[derive(Debug, Clone)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
}

/// Dense output of one evolution.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub times: Vec<f64>,
    pub states: Vec<Vec<(f64, f64)>>,
    /// Index into `times` where a fresh uniform run starts (after events).
    pub run_starts: Vec<usize>,
    pub events: Vec<Event>,
    /// Boundary trace `(t, rho(a_plus-, t))`.
    pub boundary: Vec<(f64, f64)>,
}

/// Right-boundary dynamics: open (free outflow, nothing enters) or the
/// stochastic entry process with rate `eta(t, m)` and a target sampler.
pub enum RightMode<'a> {
    Open,
    Stochastic {
        eta: Box<dyn Fn(f64, f64) -> f64 + 'a>,
        target: Box<dyn Fn(f64, f64, &mut ChaCha8Rng) -> Result<f64> + 'a>,
        rng: &'a mut ChaCha8Rng,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct EvolveOptions {
    /// Macro integration step; events are localized inside one step.
    pub macro_dt: f64,
    /// Spatial substep for transported left values.
    pub phi_substep: f64,
    /// Record dense output.
    pub record: bool,
    /// Event-time bisection tolerance as a fraction of the horizon.
    pub event_tol_factor: f64,
    /// Relative velocity change that counts as a v_hat discontinuity.
    pub vhat_jump_threshold: f64,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions {
            macro_dt: 1e-3,
            phi_substep: 0.02,
            record: true,
            event_tol_factor: 1e-10,
            vhat_jump_threshold: 0.25,
        }
    }
}

/// Internal state layout helpers. PDMP: `[rho_0, x_1, rho_1, ..., x_n,
/// rho_n]`; fundamental: `[x_1, ..., x_n]` with labels on the side.
struct Packed {
    class: ParticleClass,
    a_minus: f64,
    /// Fundamental-class labels `y_0..y_n` (unused for PDMP).
    labels: Vec<f64>,
}

impl Packed {
    fn pack(q: &ShockConfiguration) -> (Self, Vec<f64>) {
        match q.class {
            ParticleClass::Pdmp => {
                let mut y = Vec::with_capacity(2 * q.particles.len() - 1);
                y.push(q.particles[0].1);
                for &(x, r) in &q.particles[1..] {
                    y.push(x);
                    y.push(r);
                }
                (
                    Packed {
                        class: q.class,
                        a_minus: q.a_minus,
                        labels: Vec::new(),
                    },
                    y,
                )
            }
            ParticleClass::Fundamental { .. } => {
                let labels = q.particles.iter().map(|&(_, v)| v).collect();
                let y = q.particles[1..].iter().map(|&(x, _)| x).collect();
                (
                    Packed {
                        class: q.class,
                        a_minus: q.a_minus,
                        labels,
                    },
                    y,
                )
            }
        }
    }

    fn n_shocks(&self, y: &[f64]) -> usize {
        match self.class {
            ParticleClass::Pdmp => (y.len() - 1) / 2,
            ParticleClass::Fundamental { .. } => y.len(),
        }
    }

    fn shock_x(&self, y: &[f64], i: usize) -> f64 {
        match self.class {
            ParticleClass::Pdmp => y[2 * i - 1],
            ParticleClass::Fundamental { .. } => y[i - 1],
        }
    }

    fn unpack(&self, q_template: &ShockConfiguration, t: f64, y: &[f64]) -> ShockConfiguration {
        let mut particles = Vec::new();
        match self.class {
            ParticleClass::Pdmp => {
                particles.push((self.a_minus, y[0]));
                let n = (y.len() - 1) / 2;
                for i in 1..=n {
                    particles.push((y[2 * i - 1], y[2 * i]));
                }
            }
            ParticleClass::Fundamental { .. } => {
                particles.push((self.a_minus, self.labels[0]));
                for (i, &x) in y.iter().enumerate() {
                    particles.push((x, self.labels[i + 1]));
                }
            }
        }
        ShockConfiguration {
            class: self.class,
            a_minus: q_template.a_minus,
            a_plus: q_template.a_plus,
            t,
            particles,
        }
    }
}

/// Evolve a configuration to `t_target`, detecting and processing events
/// in causal order. Sign changes of the gap functions are localized by
/// bisection; simultaneous events are processed left to right.
pub fn evolve(
    q0: &ShockConfiguration,
    t_target: f64,
    model: &HamiltonianModel,
    drift: &dyn Drift,
    right: &mut RightMode,
    opts: &EvolveOptions,
) -> Result<(ShockConfiguration, Trace)> {
    q0.check_ordering()?;
    if t_target < q0.t {
        return Err(CoreError::TimeOrder {
            t: t_target,
            s: q0.t,
        });
    }
    let horizon = (t_target - q0.t).max(1e-300);
    let event_tol = opts.event_tol_factor * horizon;
    let a_minus = q0.a_minus;
    let a_plus = q0.a_plus;

    let (mut packed, mut y) = Packed::pack(q0);
    let mut t = q0.t;
    let mut scratch = Rk4Scratch::new();
    let mut trace = Trace::default();
    let mut vhat_err: Option<CoreError> = None;

    // Boundary clock for the stochastic right mode.
    let mut clock_acc = 0.0f64;
    let mut clock_budget = match right {
        RightMode::Open => f64::INFINITY,
        RightMode::Stochastic { rng, .. } => exp1(*rng),
    };

    let boundary_value = |packed: &Packed, y: &[f64], t: f64| -> f64 {
        let n = packed.n_shocks(y);
        match packed.class {
            ParticleClass::Pdmp => {
                let (x_last, v_last) = if n == 0 {
                    (a_minus, y[0])
                } else {
                    (y[2 * n - 1], y[2 * n])
                };
                phi_seg(drift, x_last, a_plus, v_last, t, opts.phi_substep)
            }
            ParticleClass::Fundamental { s } => {
                let label = *packed.labels.last().unwrap();
                fundamental_m(model, a_plus, t, label, s).unwrap_or(f64::NAN)
            }
        }
    };

    // Velocity table used by the v_hat jump monitor.
    let shock_velocities = |packed: &Packed, y: &[f64], t: f64| -> Vec<f64> {
        let n = packed.n_shocks(y);
        (1..=n)
            .map(|i| match packed.class {
                ParticleClass::Pdmp => 0.0,
                ParticleClass::Fundamental { s } => {
                    vhat(model, packed.shock_x(y, i), t, packed.labels[i - 1], packed.labels[i], s)
                        .unwrap_or(f64::NAN)
                }
            })
            .collect()
    };

    // Integrate from (t, y) forward by `dt`; returns the new state and the
    // boundary-clock increment (trapezoid of eta along the a_plus trace).
    let integrate_leg = |packed: &Packed,
                         y: &[f64],
                         t: f64,
                         dt: f64,
                         scratch: &mut Rk4Scratch,
                         vhat_err: &mut Option<CoreError>,
                         right: &RightMode|
     -> (Vec<f64>, f64) {
        let mut out = y.to_vec();
        let n_sub = 4usize;
        let h = dt / n_sub as f64;
        let mut tt = t;
        let mut clock_inc = 0.0;
        for _ in 0..n_sub {
            let rate_before = match right {
                RightMode::Stochastic { eta, .. } => eta(tt, boundary_value(packed, &out, tt)),
                RightMode::Open => 0.0,
            };
            let mut rhs_fn = |a: f64, b: &[f64], c: &mut [f64]| {
                rhs_inner(packed, model, drift, a_minus, opts.phi_substep, a, b, c, vhat_err);
            };
            scratch.step(&mut rhs_fn, tt, &mut out, h);
            tt += h;
            if let RightMode::Stochastic { eta, .. } = right {
                let rate_after = eta(tt, boundary_value(packed, &out, tt));
                clock_inc += 0.5 * (rate_before + rate_after) * h;
            }
        }
        (out, clock_inc)
    };

    let record_state = |trace: &mut Trace, packed: &Packed, t: f64, y: &[f64], boundary: f64| {
        trace.times.push(t);
        let q = packed.unpack(q0, t, y);
        trace.states.push(q.particles.clone());
        trace.boundary.push((t, boundary));
    };

    if opts.record {
        trace.run_starts.push(0);
        let b = boundary_value(&packed, &y, t);
        record_state(&mut trace, &packed, t, &y, b);
    }

    let mut velocities_prev = shock_velocities(&packed, &y, t);

    while t < t_target - 1e-14 * horizon {
        let h = opts.macro_dt.min(t_target - t);
        let (y_trial, clock_inc) =
            integrate_leg(&packed, &y, t, h, &mut scratch, &mut vhat_err, right);
        if let Some(e) = vhat_err.take() {
            return Err(e);
        }

        // Gap functions at the trial state; the fundamental class also
        // watches the free right boundary.
        let n = packed.n_shocks(&y_trial);
        let right_exit_possible = matches!(packed.class, ParticleClass::Fundamental { .. });
        let mut fired: Vec<(usize, f64)> = Vec::new(); // (gap index, value)
        for i in 0..n {
            let g = if i == 0 {
                packed.shock_x(&y_trial, 1) - a_minus
            } else {
                packed.shock_x(&y_trial, i + 1) - packed.shock_x(&y_trial, i)
            };
            if g <= 0.0 {
                fired.push((i, g));
            }
        }
        if right_exit_possible && n > 0 && a_plus - packed.shock_x(&y_trial, n) <= 0.0 {
            fired.push((n, a_plus - packed.shock_x(&y_trial, n)));
        }
        let clock_fired = clock_acc + clock_inc >= clock_budget;

        if fired.is_empty() && !clock_fired {
            t += h;
            y = y_trial;
            clock_acc += clock_inc;
            if opts.record {
                let b = boundary_value(&packed, &y, t);
                record_state(&mut trace, &packed, t, &y, b);
            }
            // v_hat discontinuity monitor (fundamental class only).
            if matches!(packed.class, ParticleClass::Fundamental { .. }) {
                let velocities_now = shock_velocities(&packed, &y, t);
                for (i, (v0, v1)) in velocities_prev.iter().zip(&velocities_now).enumerate() {
                    if (v1 - v0).abs() > opts.vhat_jump_threshold * (1.0 + v0.abs()) {
                        trace.events.push(Event {
                            t,
                            kind: EventKind::VhatJump { index: i + 1 },
                        });
                    }
                }
                velocities_prev = velocities_now;
            }
            continue;
        }

        // Locate the earliest event by bisection over the step.
        let event_at = |dt_probe: f64,
                        scratch: &mut Rk4Scratch,
                        vhat_err: &mut Option<CoreError>|
         -> (bool, Vec<f64>, f64) {
            let (yy, inc) = integrate_leg(&packed, &y, t, dt_probe, scratch, vhat_err, right);
            let nn = packed.n_shocks(&yy);
            let mut hit = clock_acc + inc >= clock_budget;
            for i in 0..nn {
                let g = if i == 0 {
                    packed.shock_x(&yy, 1) - a_minus
                } else {
                    packed.shock_x(&yy, i + 1) - packed.shock_x(&yy, i)
                };
                if g <= 0.0 {
                    hit = true;
                }
            }
            if right_exit_possible && nn > 0 && a_plus - packed.shock_x(&yy, nn) <= 0.0 {
                hit = true;
            }
            (hit, yy, inc)
        };

        let mut lo = 0.0f64;
        let mut hi = h;
        for _ in 0..80 {
            if hi - lo <= event_tol {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let (hit, _, _) = event_at(mid, &mut scratch, &mut vhat_err);
            if hit {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let (_, y_event, clock_inc_event) = event_at(hi, &mut scratch, &mut vhat_err);
        if let Some(e) = vhat_err.take() {
            return Err(e);
        }
        let t_event = t + hi;

        // Classify: smallest gap index first (left-to-right), boundary
        // events last.
        let n_ev = packed.n_shocks(&y_event);
        let mut gap_hit: Option<usize> = None;
        for i in 0..n_ev {
            let g = if i == 0 {
                packed.shock_x(&y_event, 1) - a_minus
            } else {
                packed.shock_x(&y_event, i + 1) - packed.shock_x(&y_event, i)
            };
            if g <= event_tol.max(1e-12) {
                gap_hit = Some(i);
                break;
            }
        }
        let mut right_exit_hit = false;
        if gap_hit.is_none()
            && right_exit_possible
            && n_ev > 0
            && a_plus - packed.shock_x(&y_event, n_ev) <= event_tol.max(1e-12)
        {
            right_exit_hit = true;
        }

        t = t_event;
        y = y_event;
        clock_acc += clock_inc_event;

        if let Some(i) = gap_hit {
            if i == 0 {
                // Left exit: shock 1 crosses a_minus; its value becomes the
                // new anchor value at the crossing time.
                match packed.class {
                    ParticleClass::Pdmp => {
                        let new_anchor = y[2];
                        let mut ny = vec![new_anchor];
                        ny.extend_from_slice(&y[3..]);
                        y = ny;
                        trace.events.push(Event {
                            t,
                            kind: EventKind::LeftExit {
                                new_anchor_value: new_anchor,
                            },
                        });
                    }
                    ParticleClass::Fundamental { .. } => {
                        let new_anchor = packed.labels[1];
                        packed.labels.remove(0);
                        y.remove(0);
                        trace.events.push(Event {
                            t,
                            kind: EventKind::LeftExit {
                                new_anchor_value: new_anchor,
                            },
                        });
                    }
                }
            } else {
                // Merge: drop particle i, keep particle i+1 (the new jump
                // spans old-left-of-i to old-right-of-(i+1)).
                match packed.class {
                    ParticleClass::Pdmp => {
                        y.drain(2 * i - 1..2 * i + 1);
                    }
                    ParticleClass::Fundamental { .. } => {
                        packed.labels.remove(i);
                        y.remove(i - 1);
                    }
                }
                trace.events.push(Event {
                    t,
                    kind: EventKind::Merge { index: i },
                });
            }
        } else if right_exit_hit {
            // The last particle leaves through the free right boundary.
            let dropped = *packed.labels.last().unwrap();
            packed.labels.pop();
            y.pop();
            trace.events.push(Event {
                t,
                kind: EventKind::RightExit { value: dropped },
            });
        } else {
            // Injection at a_plus.
            if let RightMode::Stochastic { target, rng, .. } = right {
                let trace_val = boundary_value(&packed, &y, t);
                let new_val = target(t, trace_val, rng)?;
                match packed.class {
                    ParticleClass::Pdmp => {
                        y.push(a_plus);
                        y.push(new_val);
                    }
                    ParticleClass::Fundamental { .. } => {
                        packed.labels.push(new_val);
                        y.push(a_plus);
                    }
                }
                clock_acc = 0.0;
                clock_budget = exp1(*rng);
                trace.events.push(Event {
                    t,
                    kind: EventKind::Injection { value: new_val },
                });
            }
        }

        // Nudge the state strictly inside the open configuration set.
        let q_check = packed.unpack(q0, t, &y);
        if let Err(e) = q_check.check_ordering() {
            // Events at identical positions within tolerance: separate by
            // a hair and re-check.
            if let ParticleClass::Pdmp = packed.class {
                let n_now = (y.len() - 1) / 2;
                for i in 2..=n_now {
                    if y[2 * i - 1] <= y[2 * i - 3] {
                        y[2 * i - 1] = y[2 * i - 3] + 1e-12 * horizon;
                    }
                }
            }
            let q2 = packed.unpack(q0, t, &y);
            q2.check_ordering().map_err(|_| e)?;
        }

        if opts.record {
            trace.run_starts.push(trace.times.len());
            let b = boundary_value(&packed, &y, t);
            record_state(&mut trace, &packed, t, &y, b);
        }
        velocities_prev = shock_velocities(&packed, &y, t);
    }

    let q_final = packed.unpack(q0, t_target, &y);
    q_final.check_ordering()?;
    Ok((q_final, trace))
}

/// Shared right-hand side of the particle ODE system.
#[allow(clippy::too_many_arguments)]
fn rhs_inner(
    packed: &Packed,
    model: &HamiltonianModel,
    drift: &dyn Drift,
    a_minus: f64,
    phi_substep: f64,
    t: f64,
    y: &[f64],
    dy: &mut [f64],
    vhat_err: &mut Option<CoreError>,
) {
    match packed.class {
        ParticleClass::Pdmp => {
            let n = (y.len() - 1) / 2;
            dy[0] = beta(model, drift, a_minus, t, y[0]);
            let mut prev_x = a_minus;
            let mut prev_rho = y[0];
            for i in 1..=n {
                let xi = y[2 * i - 1];
                let rho_i = y[2 * i];
                let rho_hat = phi_seg(drift, prev_x, xi, prev_rho, t, phi_substep);
                let v = shock_velocity_unchecked(model, xi, t, rho_hat, rho_i);
                dy[2 * i - 1] = -v;
                dy[2 * i] =
                    -(drift.eval(xi, t, rho_i) * v - beta(model, drift, xi, t, rho_i));
                prev_x = xi;
                prev_rho = rho_i;
            }
        }
        ParticleClass::Fundamental { s } => {
            for (i, d) in dy.iter_mut().enumerate() {
                match vhat(model, y[i], t, packed.labels[i], packed.labels[i + 1], s) {
                    Ok(v) => *d = -v,
                    Err(e) => {
                        if vhat_err.is_none() {
                            *vhat_err = Some(e);
                        }
                        *d = 0.0;
                    }
                }
            }
        }
    }
}

/// Residual diagnostics from a dense trace: finite-difference slopes of
/// the recorded positions/values against the governing right-hand sides,
/// plus an entropy-admissibility scan.
#[derive(Debug, Clone, Default)]
pub struct TraceDiagnostics {
    pub max_position_residual: f64,
    pub max_value_residual: f64,
    pub max_anchor_residual: f64,
    pub entropy_violations: usize,
    pub samples_checked: usize,
}

pub fn entropy_and_rh_residuals(
    trace: &Trace,
    q_template: &ShockConfiguration,
    model: &HamiltonianModel,
    drift: &dyn Drift,
    phi_substep: f64,
) -> Result<TraceDiagnostics> {
    let mut diag = TraceDiagnostics::default();
    let n_samples = trace.times.len();
    if n_samples == 0 {
        return Ok(diag);
    }
    let mut run_bounds: Vec<(usize, usize)> = Vec::new();
    for (k, &start) in trace.run_starts.iter().enumerate() {
        let end = trace
            .run_starts
            .get(k + 1)
            .copied()
            .unwrap_or(n_samples);
        run_bounds.push((start, end));
    }

    for &(start, end) in &run_bounds {
        if end - start < 5 {
            continue;
        }
        // Uniform spacing check; the final (truncated) sample is dropped.
        let h = trace.times[start + 1] - trace.times[start];
        let mut uniform_end = end;
        for k in start + 1..end {
            if (trace.times[k] - trace.times[k - 1] - h).abs() > 1e-12 * h.max(1e-12) {
                uniform_end = k;
                break;
            }
        }
        if uniform_end - start < 5 {
            continue;
        }
        let n_particles = trace.states[start].len();
        for k in start + 2..uniform_end - 2 {
            let t = trace.times[k];
            let q = ShockConfiguration {
                class: q_template.class,
                a_minus: q_template.a_minus,
                a_plus: q_template.a_plus,
                t,
                particles: trace.states[k].clone(),
            };
            let fd4 = |get: &dyn Fn(usize) -> f64| {
                (-get(k + 2) + 8.0 * get(k + 1) - 8.0 * get(k - 1) + get(k - 2)) / (12.0 * h)
            };
            // Anchor value ODE.
            if let ParticleClass::Pdmp = q.class {
                let slope = fd4(&|kk| trace.states[kk][0].1);
                let want = beta(model, drift, q.a_minus, t, q.particles[0].1);
                diag.max_anchor_residual = diag.max_anchor_residual.max((slope - want).abs());
            }
            for i in 1..n_particles {
                let left = left_value(&q, i, model, drift, phi_substep)?;
                let right = q.particles[i].1;
                if left >= right - 1e-12 {
                    diag.entropy_violations += 1;
                }
                let x_slope = fd4(&|kk| trace.states[kk][i].0);
                match q.class {
                    ParticleClass::Pdmp => {
                        let v = shock_velocity_unchecked(model, q.particles[i].0, t, left, right);
                        diag.max_position_residual =
                            diag.max_position_residual.max((x_slope + v).abs());
                        let r_slope = fd4(&|kk| trace.states[kk][i].1);
                        let k_val = drift.eval(q.particles[i].0, t, right) * v
                            - beta(model, drift, q.particles[i].0, t, right);
                        diag.max_value_residual =
                            diag.max_value_residual.max((r_slope + k_val).abs());
                    }
                    ParticleClass::Fundamental { s } => {
                        let v = vhat(
                            model,
                            q.particles[i].0,
                            t,
                            q.particles[i - 1].1,
                            q.particles[i].1,
                            s,
                        )?;
                        diag.max_position_residual =
                            diag.max_position_residual.max((x_slope + v).abs());
                    }
                }
            }
            diag.samples_checked += 1;
        }
    }
    Ok(diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::library::burgers;
    use crate::model::ZeroDrift;
    use crate::rng::stream;
    use rand::Rng;

    fn open_evolve(
        q: &ShockConfiguration,
        t1: f64,
        model: &HamiltonianModel,
        opts: &EvolveOptions,
    ) -> (ShockConfiguration, Trace) {
        evolve(q, t1, model, &ZeroDrift, &mut RightMode::Open, opts).unwrap()
    }

    #[test]
    fn single_burgers_shock_moves_at_rankine_hugoniot_speed() {
        let m = burgers(-3.0, 3.0);
        let q = ShockConfiguration::new(
            ParticleClass::Pdmp,
            -2.0,
            2.0,
            0.0,
            0.0,
            &[(1.0, 2.0)],
        )
        .unwrap();
        let (qf, trace) = open_evolve(&q, 0.5, &m, &EvolveOptions::default());
        // v = (0 + 2)/2 = 1, so the shock moved left by 0.5.
        assert!((qf.particles[1].0 - 0.5).abs() < 1e-9);
        assert!((qf.particles[1].1 - 2.0).abs() < 1e-12);
        assert!((qf.particles[0].1 - 0.0).abs() < 1e-12);
        assert!(trace.events.is_empty());
    }

    #[test]
    fn two_shock_merge_time_and_outer_values() {
        // Shocks 0->1 at 0.5 (speed -0.5) and 1->2 at 0.6 (speed -1.5):
        // the rear one catches up at t* = 0.1; the merged shock is 0->2.
        let m = burgers(-3.0, 3.0);
        let q = ShockConfiguration::new(
            ParticleClass::Pdmp,
            -2.0,
            2.0,
            0.0,
            0.0,
            &[(0.5, 1.0), (0.6, 2.0)],
        )
        .unwrap();
        let (qf, trace) = open_evolve(&q, 0.3, &m, &EvolveOptions::default());
        let merges: Vec<&Event> = trace
            .events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Merge { .. }))
            .collect();
        assert_eq!(merges.len(), 1);
        assert!(
            (merges[0].t - 0.1).abs() <= 1e-6,
            "merge at {} (want 0.1)",
            merges[0].t
        );
        assert_eq!(qf.n_shocks(), 1);
        assert!((qf.particles[1].1 - 2.0).abs() < 1e-9);
        // Post-merge speed is -1: from the merge point (0.45) the shock
        // drifts a further 0.2 left by t = 0.3.
        assert!((qf.particles[1].0 - 0.25).abs() < 1e-6);
    }

    #[test]
    fn left_exit_relabels_the_anchor() {
        let m = burgers(-3.0, 3.0);
        // Shock 0->2 at x = 0.1 moves left at speed 1, exits at t = 0.1.
        let q = ShockConfiguration::new(
            ParticleClass::Pdmp,
            0.0,
            2.0,
            0.0,
            0.0,
            &[(0.1, 2.0)],
        )
        .unwrap();
        let (qf, trace) = open_evolve(&q, 0.2, &m, &EvolveOptions::default());
        assert_eq!(qf.n_shocks(), 0);
        let exits: Vec<&Event> = trace
            .events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::LeftExit { .. }))
            .collect();
        assert_eq!(exits.len(), 1);
        assert!((exits[0].t - 0.1).abs() < 1e-6);
        assert!((qf.particles[0].1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn reconstruct_constant_and_entropy_straddle() {
        let m = burgers(-3.0, 3.0);
        let q = ShockConfiguration::new(
            ParticleClass::Pdmp,
            -1.0,
            1.0,
            0.0,
            0.7,
            &[],
        )
        .unwrap();
        for x in [-1.0, -0.3, 0.9] {
            assert_eq!(reconstruct(&q, x, &m, &ZeroDrift, 0.01).unwrap(), 0.7);
        }
        let q2 = ShockConfiguration::new(
            ParticleClass::Pdmp,
            -1.0,
            1.0,
            0.0,
            0.0,
            &[(0.2, 1.5)],
        )
        .unwrap();
        let left = left_value(&q2, 1, &m, &ZeroDrift, 0.01).unwrap();
        assert!(left < q2.particles[1].1);
        assert!(reconstruct(&q2, 0.2, &m, &ZeroDrift, 0.01).unwrap() == 1.5);
        assert!(reconstruct(&q2, 0.19, &m, &ZeroDrift, 0.01).unwrap() == 0.0);
    }

    #[test]
    fn fundamental_burgers_matches_closed_form_trajectories() {
        // xdot = -v_hat = (2x - y0 - y1) / (2 (t - s)) gives
        // x(t) = ybar + (x(t0) - ybar) (t - s)/(t0 - s).
        let m = burgers(-30.0, 30.0);
        let s = 0.0;
        let q = ShockConfiguration::new(
            ParticleClass::Fundamental { s },
            -1.0,
            3.0,
            1.0,
            0.2,
            &[(0.5, 0.8), (1.5, 1.4)],
        )
        .unwrap();
        let opts = EvolveOptions {
            macro_dt: 5e-4,
            ..Default::default()
        };
        let t1 = 1.4;
        let (qf, trace) = evolve(&q, t1, &m, &ZeroDrift, &mut RightMode::Open, &opts).unwrap();
        assert!(!trace
            .events
            .iter()
            .any(|e| matches!(e.kind, EventKind::VhatJump { .. })));
        for (i, &(x0, _)) in q.particles.iter().enumerate().skip(1) {
            let ybar = 0.5 * (q.particles[i - 1].1 + q.particles[i].1);
            let want = ybar + (x0 - ybar) * (t1 - s) / (q.t - s);
            assert!(
                (qf.particles[i].0 - want).abs() < 1e-8,
                "particle {i}: got {}, want {want}",
                qf.particles[i].0
            );
        }
        // Shape preservation: the evolved profile is exactly the
        // M-reconstruction from the evolved labels.
        for k in 0..40 {
            let x = qf.a_minus + (qf.a_plus - qf.a_minus) * k as f64 / 39.0;
            let via_reconstruct = reconstruct(&qf, x, &m, &ZeroDrift, 0.01).unwrap();
            let seg = qf
                .particles
                .iter()
                .rev()
                .find(|&&(xx, _)| xx <= x)
                .unwrap();
            let direct = fundamental_m(&m, x, t1, seg.1, s).unwrap();
            assert!((via_reconstruct - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_diagnostics_on_constant_coefficient_run() {
        let m = burgers(-3.0, 3.0);
        let q = ShockConfiguration::new(
            ParticleClass::Pdmp,
            -2.0,
            2.0,
            0.0,
            0.0,
            &[(0.5, 1.0), (1.2, 2.0)],
        )
        .unwrap();
        let (_, trace) = open_evolve(&q, 0.2, &m, &EvolveOptions::default());
        let diag = entropy_and_rh_residuals(&trace, &q, &m, &ZeroDrift, 0.01).unwrap();
        assert!(diag.samples_checked > 50);
        assert_eq!(diag.entropy_violations, 0);
        assert!(diag.max_position_residual <= 1e-10, "{diag:?}");
        assert!(diag.max_value_residual <= 1e-10);
        assert!(diag.max_anchor_residual <= 1e-10);
    }

    #[test]
    fn stochastic_right_injects_at_a_plus() {
        let m = burgers(-3.0, 3.0);
        let q = ShockConfiguration::new(ParticleClass::Pdmp, -2.0, 2.0, 0.0, 0.0, &[])
            .unwrap();
        let mut rng = stream(77, 0);
        let mut mode = RightMode::Stochastic {
            eta: Box::new(|_t, _m| 4.0),
            target: Box::new(|_t, m, rng: &mut ChaCha8Rng| {
                Ok(m + 0.5 + 0.5 * rng.gen::<f64>())
            }),
            rng: &mut rng,
        };
        let (qf, trace) =
            evolve(&q, 1.0, &m, &ZeroDrift, &mut mode, &EvolveOptions::default()).unwrap();
        let injections = trace
            .events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Injection { .. }))
            .count();
        assert!(injections >= 1, "expected at least one injection");
        // Injected particles enter exactly at a_plus and drift left.
        for e in &trace.events {
            if let EventKind::Injection { value } = e.kind {
                assert!(value > 0.0);
            }
        }
        qf.check_ordering().unwrap();
    }

    #[test]
    fn l1_distance_of_identical_configurations_is_zero() {
        let m = burgers(-3.0, 3.0);
        let q = ShockConfiguration::new(
            ParticleClass::Pdmp,
            -1.0,
            1.0,
            0.0,
            0.3,
            &[(0.0, 1.0)],
        )
        .unwrap();
        let d = l1_distance(&q, &q, &m, &ZeroDrift, 8, 0.01).unwrap();
        assert!(d < 1e-14);
        let q2 = ShockConfiguration::new(
            ParticleClass::Pdmp,
            -1.0,
            1.0,
            0.0,
            0.3,
            &[(0.5, 1.0)],
        )
        .unwrap();
        let d2 = l1_distance(&q, &q2, &m, &ZeroDrift, 8, 0.01).unwrap();
        // Profiles differ by 0.7 on (0, 0.5).
        assert!((d2 - 0.35).abs() < 1e-9, "d2 = {d2}");
    }
}
