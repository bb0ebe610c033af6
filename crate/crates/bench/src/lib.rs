//! Shared fixtures for the benchmark targets.

use shocklaw_core::grid::Axis;
use shocklaw_core::kinetic::{JumpKernel, KernelVariant};
use shocklaw_core::model::library::shifted_burgers;
use shocklaw_core::HamiltonianModel;

pub fn bench_model() -> HamiltonianModel {
    shifted_burgers(0.0, 1.0)
}

/// Smooth band kernel on the unit momentum box.
pub fn band_kernel(nx: usize, nrho: usize) -> JumpKernel {
    let bump = |r: f64| {
        if r <= 0.0 || r >= 1.0 {
            0.0
        } else {
            16.0 * (r * (1.0 - r)).powi(2)
        }
    };
    let xs = if nx <= 1 {
        Axis::point(1.0)
    } else {
        Axis::new(0.0, 2.0, nx)
    };
    JumpKernel::from_fn(KernelVariant::F, 0.0, xs, Axis::new(0.0, 1.0, nrho), move |_x, lo, hi| {
        6.0 * bump(lo) * bump(hi)
    })
}
