fn main() {
    let t0 = std::time::Instant::now();
    let m = shocklaw_core::model::library::eps_sin(0.2, 0.0, 1.0);
    let suite = shocklaw_core::validate::lemma21_residual_suite(
        &m,
        &|x: f64, r: f64| -0.1 - 0.04 * x.cos() * (1.0 + r),
        shocklaw_core::validate::SuiteBox {
            x_range: (-3.0, -0.2),
            t_range: (0.0, 0.5),
            rho_range: (0.0, 1.0),
        },
        4,
        1234,
    )
    .unwrap();
    println!("suite: {:.1} s ({} identities)", t0.elapsed().as_secs_f64(), suite.identities.len());
    let t1 = std::time::Instant::now();
    let unit = shocklaw_core::kinetic::JumpKernel::from_fn(
        shocklaw_core::kinetic::KernelVariant::F,
        0.0,
        shocklaw_core::grid::Axis::point(0.0),
        shocklaw_core::grid::Axis::new(0.0, 2.0, 1449),
        |_, _, _| 1.0,
    );
    let b = shocklaw_core::model::library::burgers(-3.0, 3.0);
    let rows = shocklaw_core::validate::q_row_sums(&unit, &b).unwrap();
    println!("row sums: {:.1} s ({rows:.2e})", t1.elapsed().as_secs_f64());
}
