//! Classic RK4 with a Richardson accuracy check and step halving.
//!
//! Reproducibility beats adaptivity here: integrations are deterministic
//! functions of their arguments, so repeated runs agree bit for bit.

use crate::error::{CoreError, Result};

/// One RK4 step for a fixed-dimension system.
#[inline]
pub fn rk4_step<const N: usize>(
    f: &impl Fn(f64, &[f64; N]) -> [f64; N],
    t: f64,
    y: &[f64; N],
    dt: f64,
) -> [f64; N] {
    let k1 = f(t, y);
    let mut y2 = *y;
    for i in 0..N {
        y2[i] = y[i] + 0.5 * dt * k1[i];
    }
    let k2 = f(t + 0.5 * dt, &y2);
    for i in 0..N {
        y2[i] = y[i] + 0.5 * dt * k2[i];
    }
    let k3 = f(t + 0.5 * dt, &y2);
    for i in 0..N {
        y2[i] = y[i] + dt * k3[i];
    }
    let k4 = f(t + dt, &y2);
    let mut out = *y;
    for i in 0..N {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Integrate from `t0` to `t1` with `n` equal RK4 steps (`t1 < t0` allowed).
pub fn integrate_fixed<const N: usize>(
    f: &impl Fn(f64, &[f64; N]) -> [f64; N],
    t0: f64,
    y0: [f64; N],
    t1: f64,
    n: usize,
) -> [f64; N] {
    let n = n.max(1);
    let dt = (t1 - t0) / n as f64;
    let mut y = y0;
    let mut t = t0;
    for _ in 0..n {
        y = rk4_step(f, t, &y, dt);
        t += dt;
    }
    y
}

/// Integrate with doubling until the Richardson error estimate
/// `|y_n - y_2n| / 15` drops below `tol` (relative to `1 + |y|`).
pub fn integrate_richardson<const N: usize>(
    f: &impl Fn(f64, &[f64; N]) -> [f64; N],
    t0: f64,
    y0: [f64; N],
    t1: f64,
    tol: f64,
) -> Result<[f64; N]> {
    if t0 == t1 {
        return Ok(y0);
    }
    let span = (t1 - t0).abs();
    let mut n = ((span / 0.05).ceil() as usize).max(16);
    let mut coarse = integrate_fixed(f, t0, y0, t1, n);
    for _ in 0..16 {
        n *= 2;
        let fine = integrate_fixed(f, t0, y0, t1, n);
        let mut err = 0.0f64;
        for i in 0..N {
            let scale = 1.0 + coarse[i].abs().max(fine[i].abs());
            err = err.max((fine[i] - coarse[i]).abs() / (15.0 * scale));
        }
        if !err.is_finite() {
            return Err(CoreError::OdeFailure(format!(
                "non-finite state while integrating over [{t0}, {t1}]"
            )));
        }
        if err <= tol {
            return Ok(fine);
        }
        coarse = fine;
    }
    Err(CoreError::OdeFailure(format!(
        "Richardson check did not reach tol = {tol} over [{t0}, {t1}]"
    )))
}

/// Buffers for RK4 on dynamically sized states (the particle system).
#[derive(Default)]
pub struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Scratch {
    pub fn new() -> Self {
        Self::default()
    }

    /// One RK4 step in place; `f(t, y, dy)` fills the slope.
    pub fn step(
        &mut self,
        f: &mut impl FnMut(f64, &[f64], &mut [f64]),
        t: f64,
        y: &mut [f64],
        dt: f64,
    ) {
        let n = y.len();
        for buf in [
            &mut self.k1,
            &mut self.k2,
            &mut self.k3,
            &mut self.k4,
            &mut self.tmp,
        ] {
            buf.resize(n, 0.0);
        }
        f(t, y, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = y[i] + 0.5 * dt * self.k1[i];
        }
        f(t + 0.5 * dt, &self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = y[i] + 0.5 * dt * self.k2[i];
        }
        f(t + 0.5 * dt, &self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = y[i] + dt * self.k3[i];
        }
        f(t + dt, &self.tmp, &mut self.k4);
        for i in 0..n {
            y[i] += dt / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let f = |_t: f64, y: &[f64; 1]| [-y[0]];
        let y = integrate_richardson(&f, 0.0, [1.0], 2.0, 1e-12).unwrap();
        assert!((y[0] - (-2.0f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn backward_integration_inverts_forward() {
        let f = |t: f64, y: &[f64; 2]| [y[1], -y[0] + 0.1 * t];
        let fwd = integrate_fixed(&f, 0.0, [1.0, 0.0], 3.0, 400);
        let back = integrate_fixed(&f, 3.0, fwd, 0.0, 400);
        assert!((back[0] - 1.0).abs() < 1e-9);
        assert!(back[1].abs() < 1e-9);
    }

    #[test]
    fn dynamic_state_matches_fixed() {
        let f = |_t: f64, y: &[f64; 1]| [-y[0]];
        let fixed = integrate_fixed(&f, 0.0, [1.0], 1.0, 100);
        let mut scratch = Rk4Scratch::new();
        let mut y = vec![1.0];
        let mut rhs = |_t: f64, s: &[f64], out: &mut [f64]| out[0] = -s[0];
        let dt = 0.01;
        for k in 0..100 {
            scratch.step(&mut rhs, k as f64 * dt, &mut y, dt);
        }
        assert!((y[0] - fixed[0]).abs() < 1e-14);
    }
}
