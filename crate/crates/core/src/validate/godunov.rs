//! First-order Godunov finite-volume reference solver.
//!
//! The equation here reads `rho_t = H(x, t, rho)_x`; reflecting the axis
//! (`x -> -x`) turns it into the standard conservation law
//! `rho_t + H(rho)_x = 0`, so the solver runs in reflected coordinates and
//! reuses the classical convex-flux Riemann logic. Used purely as an
//! independent oracle for the particle simulator.

use crate::error::{CoreError, Result};
use crate::model::HamiltonianModel;

/// Cell-averaged snapshot at one probe time.
#[derive(Debug, Clone)]
pub struct FvSnapshot {
    pub t: f64,
    /// Cell centers in original (unreflected) coordinates, increasing.
    pub centers: Vec<f64>,
    pub cells: Vec<f64>,
    pub dx: f64,
}

impl FvSnapshot {
    pub fn total_variation(&self) -> f64 {
        self.cells.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
    }
}

/// Godunov interface flux for a convex flux function at fixed `(x, t)`.
fn godunov_flux(model: &HamiltonianModel, x: f64, t: f64, u_left: f64, u_right: f64) -> f64 {
    let h = |r: f64| model.h(x, t, r);
    if u_left <= u_right {
        // Minimum over [u_left, u_right]: at the sonic point if interior.
        if model.h_rho(x, t, u_left) >= 0.0 {
            h(u_left)
        } else if model.h_rho(x, t, u_right) <= 0.0 {
            h(u_right)
        } else {
            let (mut lo, mut hi) = (u_left, u_right);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if model.h_rho(x, t, mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            h(0.5 * (lo + hi))
        }
    } else {
        h(u_left).max(h(u_right))
    }
}

/// Right-boundary data for the reflected sweep: the prescribed trace at
/// `a_plus` (inflow side for increasing H) as a function of time.
pub type BoundaryTrace<'a> = &'a dyn Fn(f64) -> f64;

/// March the finite-volume solution from `init` over `[t0, t1]`, returning
/// snapshots at each requested probe time (always including `t1`).
#[allow(clippy::too_many_arguments)]
pub fn godunov_solve(
    model: &HamiltonianModel,
    init: &dyn Fn(f64) -> f64,
    interval: (f64, f64),
    t_range: (f64, f64),
    n_cells: usize,
    right_trace: BoundaryTrace,
    probes: &[f64],
    cfl: f64,
) -> Result<Vec<FvSnapshot>> {
    let (a_minus, a_plus) = interval;
    let (t0, t1) = t_range;
    if !(a_plus > a_minus) || !(t1 >= t0) {
        return Err(CoreError::InvalidConfiguration(
            "godunov_solve needs a_plus > a_minus and t1 >= t0".into(),
        ));
    }
    if !(cfl > 0.0 && cfl <= 0.9) {
        return Err(CoreError::CflViolation {
            dt: cfl,
            dt_max: 0.9,
        });
    }
    let n = n_cells.max(4);
    let dx = (a_plus - a_minus) / n as f64;
    let centers: Vec<f64> = (0..n).map(|i| a_minus + (i as f64 + 0.5) * dx).collect();

    // Reflected state: cell 0 sits at a_plus.
    let mut u: Vec<f64> = (0..n)
        .map(|j| {
            let x = a_plus - (j as f64 + 0.5) * dx;
            // Three-point average of the initial profile per cell.
            (init(x - 0.25 * dx) + 2.0 * init(x) + init(x + 0.25 * dx)) / 4.0
        })
        .collect();

    let mut want: Vec<f64> = probes
        .iter()
        .cloned()
        .filter(|&p| p > t0 && p <= t1)
        .collect();
    want.push(t1);
    want.sort_by(|a, b| a.partial_cmp(b).unwrap());
    want.dedup_by(|a, b| (*a - *b).abs() < 1e-14);

    let snapshot = |t: f64, u: &[f64]| -> FvSnapshot {
        let mut cells: Vec<f64> = u.to_vec();
        cells.reverse();
        FvSnapshot {
            t,
            centers: centers.clone(),
            cells,
            dx,
        }
    };

    let mut out = Vec::new();
    let mut t = t0;
    let mut flux = vec![0.0; n + 1];
    for &stop in &want {
        while t < stop - 1e-14 {
            let mut wave = 1e-12f64;
            for (j, &uj) in u.iter().enumerate() {
                let x = a_plus - (j as f64 + 0.5) * dx;
                wave = wave.max(model.h_rho(x, t, uj).abs());
            }
            let dt = (cfl * dx / wave).min(stop - t);

            // Interface j+1/2 sits between reflected cells j and j+1; its
            // original coordinate is a_plus - (j + 1) dx.
            let ghost_left = right_trace(t);
            let ghost_right = u[n - 1];
            for j in 0..=n {
                let ul = if j == 0 { ghost_left } else { u[j - 1] };
                let ur = if j == n { ghost_right } else { u[j] };
                let x_face = a_plus - j as f64 * dx;
                flux[j] = godunov_flux(model, x_face, t, ul, ur);
            }
            for j in 0..n {
                u[j] -= dt / dx * (flux[j + 1] - flux[j]);
            }
            t += dt;
        }
        out.push(snapshot(stop, &u));
    }
    Ok(out)
}
