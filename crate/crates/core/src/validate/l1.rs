//! L1 stability of entropy solutions: for two piecewise-C1 solutions on
//! `[a_minus, a_plus]`,
//!
//! `||rho' - rho||_1(t) <= e^{C0 (t-s)} [ ||rho' - rho||_1(s)
//!    + int_s^t |H(a_plus, th, rho'(a_plus)) - H(a_plus, th, rho(a_plus))| d th ]`
//!
//! with `C0 = max |H_x_rho|` over the box.

use crate::error::Result;
use crate::model::{Drift, HamiltonianModel};
use crate::shockline::{evolve, l1_distance, EvolveOptions, RightMode, ShockConfiguration};

#[derive(Debug, Clone)]
pub struct L1Trial {
    pub t: f64,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct L1Report {
    pub trials: Vec<L1Trial>,
    pub c0: f64,
    pub passes: usize,
    pub failures: usize,
}

impl L1Report {
    pub fn all_pass(&self) -> bool {
        self.failures == 0 && self.passes > 0
    }
}

/// `C0 = max |H_x_rho|` sampled over the scenario box.
pub fn stability_constant(
    model: &HamiltonianModel,
    x_range: (f64, f64),
    t_range: (f64, f64),
) -> f64 {
    let mut c0 = 0.0f64;
    let n = 21;
    for i in 0..n {
        let x = x_range.0 + (x_range.1 - x_range.0) * i as f64 / (n - 1) as f64;
        for j in 0..5 {
            let t = t_range.0 + (t_range.1 - t_range.0) * j as f64 / 4.0;
            for k in 0..9 {
                let r = model.p_minus + model.momentum_span() * k as f64 / 8.0;
                c0 = c0.max(model.h_rho_x(x, t, r).abs());
            }
        }
    }
    c0
}

/// Verify the inequality for one pair of initial configurations at the
/// sample times; both run open-right (deterministic), and the boundary
/// flux-difference integral is assembled from the recorded a_plus traces.
pub fn l1_stability_check(
    pairs: &[(ShockConfiguration, ShockConfiguration)],
    model: &HamiltonianModel,
    drift: &dyn Drift,
    t_samples: &[f64],
    opts: &EvolveOptions,
) -> Result<L1Report> {
    let mut report = L1Report::default();
    for (qa0, qb0) in pairs {
        let t0 = qa0.t;
        let c0 = stability_constant(model, (qa0.a_minus, qa0.a_plus), (t0, *t_samples.last().unwrap()));
        report.c0 = report.c0.max(c0);
        let l1_0 = l1_distance(qa0, qb0, model, drift, 16, opts.phi_substep)?;

        let mut qa = qa0.clone();
        let mut qb = qb0.clone();
        let mut boundary_integral = 0.0;
        let rec_opts = EvolveOptions {
            record: true,
            ..*opts
        };
        for &tp in t_samples {
            let (qa_next, tra) = evolve(&qa, tp, model, drift, &mut RightMode::Open, &rec_opts)?;
            let (qb_next, trb) = evolve(&qb, tp, model, drift, &mut RightMode::Open, &rec_opts)?;
            // Flux difference along the shared time grid of the two
            // recorded traces (both run the same macro step).
            let m = tra.boundary.len().min(trb.boundary.len());
            for k in 1..m {
                let (ta, za) = tra.boundary[k];
                let (_, zb) = trb.boundary[k];
                let (ta0, za0) = tra.boundary[k - 1];
                let (_, zb0) = trb.boundary[k - 1];
                let g1 = (model.h(qa.a_plus, ta, za) - model.h(qa.a_plus, ta, zb)).abs();
                let g0 = (model.h(qa.a_plus, ta0, za0) - model.h(qa.a_plus, ta0, zb0)).abs();
                boundary_integral += 0.5 * (g0 + g1) * (ta - ta0);
            }
            let lhs = l1_distance(&qa_next, &qb_next, model, drift, 16, opts.phi_substep)?;
            let rhs = ((tp - t0) * c0).exp() * (l1_0 + boundary_integral);
            // Small slack for quadrature of the two L1 integrals.
            let ok = lhs <= rhs * (1.0 + 1e-6) + 1e-9;
            if ok {
                report.passes += 1;
            } else {
                report.failures += 1;
            }
            report.trials.push(L1Trial { t: tp, lhs, rhs });
            qa = qa_next;
            qb = qb_next;
        }
    }
    Ok(report)
}
