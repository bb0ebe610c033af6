//! Subcommand runners: scenario in, CSV artifacts and a manifest out.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use shocklaw_core::drift::{solve_drift, DriftSolveOptions};
use shocklaw_core::grid::Axis;
use shocklaw_core::io::write_csv;
use shocklaw_core::kinetic::{
    solve_kinetic, JumpKernel, KernelSeries, KernelVariant, MarginalLaw, StepOptions,
};
use shocklaw_core::model::Drift;
use shocklaw_core::pdmp::{
    boundary_injector, path_to_configuration, sample_pdmp_path, sample_y_process, EtaSeries,
    RateRows, SampleOptions,
};
use shocklaw_core::rng::stream;
use shocklaw_core::shockline::{
    entropy_and_rh_residuals, evolve, reconstruct, EvolveOptions, ParticleClass, RightMode,
    ShockConfiguration,
};
use shocklaw_core::validate::{
    compare_particle_vs_fv, lemma21_residual_suite, q_row_sums, theorem_comparison,
    ComparisonScenario, SuiteBox,
};
use shocklaw_core::{CoreError, HamiltonianModel};

use crate::scenario::{Scenario, ScenarioClass, ScenarioDrift};

#[derive(Debug)]
pub enum RunError {
    Config(String),
    Failure(String),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(m) => write!(f, "configuration error: {m}"),
            RunError::Failure(m) => write!(f, "run failed: {m}"),
        }
    }
}
impl std::error::Error for RunError {}

impl From<CoreError> for RunError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidConfiguration(m) => RunError::Config(m),
            other => RunError::Failure(other.to_string()),
        }
    }
}

pub type RunResult = Result<bool, RunError>;

/// Per-run manifest: everything needed to trace an artifact back to its
/// configuration. Deliberately free of timestamps and worker counts so
/// artifact directories are byte-reproducible.
pub fn write_manifest(dir: &Path, scn: &Scenario, subcommand: &str) -> Result<(), RunError> {
    let mut hasher = Sha256::new();
    hasher.update(scn.raw.as_bytes());
    let digest = hasher.finalize();
    let mut hex = String::new();
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    let body = format!(
        "scenario = {}\nclass = {}\nconfig_sha256 = {}\nseed = {}\nversion = {}\nsubcommand = {}\n",
        scn.name,
        match scn.class {
            ScenarioClass::PdmpF => "pdmp-f",
            ScenarioClass::FundamentalG => "fundamental-g",
        },
        hex,
        scn.seed,
        env!("CARGO_PKG_VERSION"),
        subcommand,
    );
    std::fs::write(dir.join("manifest.txt"), body)
        .map_err(|e| RunError::Failure(format!("manifest: {e}")))?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(dir).map_err(|e| {
        RunError::Failure(format!("cannot create output dir {}: {e}", dir.display()))
    })
}

/// Names resolve and grids were prechecked by the loader; solve the drift
/// PDE and decide whether the exact-zero fast path is sound.
fn solve_scenario_drift(scn: &Scenario) -> ScenarioDrift {
    if scn.drift_is_trivially_zero() {
        return ScenarioDrift::Zero(scn.zero_drift());
    }
    let nx = scn.nx.max(9);
    let field = solve_drift(
        &scn.model,
        &*scn.b0,
        Axis::new(scn.a_minus, scn.a_plus, nx),
        Axis::new(scn.t0, scn.t_final, 17),
        Axis::new(scn.value_lo, scn.value_hi, scn.nrho.max(17)),
        DriftSolveOptions::default(),
    );
    let field_max = field.rows().map(|r| r[3].abs()).fold(0.0, f64::max);
    if scn.check_zero_drift(field_max) {
        ScenarioDrift::Zero(scn.zero_drift())
    } else {
        ScenarioDrift::Field(field)
    }
}

fn build_initial_kernel(scn: &Scenario) -> JumpKernel {
    let variant = match scn.class {
        ScenarioClass::PdmpF => KernelVariant::F,
        ScenarioClass::FundamentalG => KernelVariant::G { s: scn.s },
    };
    let xs = if scn.nx <= 1 {
        Axis::point(0.5 * (scn.a_minus + scn.a_plus))
    } else {
        Axis::new(scn.a_minus, scn.a_plus, scn.nx)
    };
    let rho = Axis::new(scn.value_lo, scn.value_hi, scn.nrho);
    JumpKernel::from_fn(variant, scn.t0, xs, rho, |x, lo, hi| (scn.f0)(x, lo, hi))
}

fn kinetic_run(
    scn: &Scenario,
    drift: &dyn Drift,
    with_marginal: bool,
) -> Result<shocklaw_core::kinetic::KineticRun, RunError> {
    let f0 = build_initial_kernel(scn);
    let ell0 = with_marginal.then(|| {
        MarginalLaw::delta(
            Axis::new(scn.value_lo, scn.value_hi, scn.nrho),
            scn.m0,
            scn.a_minus,
            scn.t0,
        )
    });
    Ok(solve_kinetic(
        &scn.model,
        drift,
        f0,
        ell0,
        scn.t_final,
        scn.nt,
        scn.save_stride,
        &StepOptions::default(),
    )?)
}

fn evolve_options(scn: &Scenario) -> EvolveOptions {
    EvolveOptions {
        macro_dt: ((scn.t_final - scn.t0) / 250.0).min(2e-3),
        record: false,
        ..Default::default()
    }
}

/// `simulate`: the particle ensemble, with per-realization summaries and
/// marginal samples at the probe times.
pub fn simulate(scn: &Scenario, out: &Path) -> RunResult {
    ensure_dir(out)?;
    write_manifest(out, scn, "simulate")?;
    let drift = solve_scenario_drift(scn);
    let drift = drift.as_dyn();
    let run = kinetic_run(scn, drift, matches!(scn.class, ScenarioClass::PdmpF))?;
    let kernels = &run.kernels;
    let f0_slab = kernels.slabs[0].clone();
    let rates0 = RateRows::plain(&f0_slab);
    let eta = match scn.class {
        ScenarioClass::PdmpF => Some(EtaSeries::build(kernels, &scn.model, scn.a_plus)?),
        ScenarioClass::FundamentalG => None,
    };
    let ell0 = run.marginals.first().cloned();

    let mut times = scn.probes_t.clone();
    times.push(scn.t_final);
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
    let opts = evolve_options(scn);
    let sopts = SampleOptions::default();

    struct Row {
        summary: [f64; 5],
        snapshots: Vec<ShockConfiguration>,
        path_rows: Vec<[f64; 4]>,
    }
    let rows: Vec<Result<Row, CoreError>> = (0..scn.n_paths)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(scn.seed, k as u64);
            let init = match (&ell0, scn.class) {
                (Some(l), ScenarioClass::PdmpF) => l.sample(&mut rng),
                _ => scn.m0,
            };
            let path = match scn.class {
                ScenarioClass::PdmpF => sample_pdmp_path(
                    drift, &f0_slab, &rates0, scn.a_minus, scn.a_plus, init, &mut rng, &sopts,
                )?,
                ScenarioClass::FundamentalG => sample_y_process(
                    &f0_slab, &rates0, scn.a_minus, scn.a_plus, init, &mut rng, &sopts,
                )?,
            };
            let class = match scn.class {
                ScenarioClass::PdmpF => ParticleClass::Pdmp,
                ScenarioClass::FundamentalG => ParticleClass::Fundamental { s: scn.s },
            };
            let n_jumps = path.jump_count();
            let path_rows = if k < 3 {
                path.rows()
                    .into_iter()
                    .map(|r| [k as f64, r[0], r[1], r[2]])
                    .collect()
            } else {
                Vec::new()
            };
            let mut q = path_to_configuration(&path, class, scn.t0, scn.a_plus)?;
            let mut n_events = 0usize;
            let mut snapshots = Vec::with_capacity(times.len());
            for &tp in &times {
                let trace_events = match (&eta, scn.class) {
                    (Some(eta), ScenarioClass::PdmpF) => {
                        let mut mode =
                            boundary_injector(&scn.model, kernels, eta, scn.a_plus, &mut rng);
                        let (qn, tr) = evolve(&q, tp, &scn.model, drift, &mut mode, &opts)?;
                        q = qn;
                        tr.events.len()
                    }
                    _ => {
                        let (qn, tr) =
                            evolve(&q, tp, &scn.model, drift, &mut RightMode::Open, &opts)?;
                        q = qn;
                        tr.events.len()
                    }
                };
                n_events += trace_events;
                snapshots.push(q.clone());
            }
            Ok(Row {
                summary: [
                    k as f64,
                    init,
                    n_jumps as f64,
                    n_events as f64,
                    q.particles[0].1,
                ],
                snapshots,
                path_rows,
            })
        })
        .collect();

    let mut summaries = Vec::with_capacity(scn.n_paths);
    let mut snapshots: Vec<Vec<ShockConfiguration>> = vec![Vec::new(); times.len()];
    let mut path_rows = Vec::new();
    for r in rows {
        let row = r.map_err(RunError::from)?;
        summaries.push(row.summary);
        path_rows.extend(row.path_rows);
        for (slot, q) in snapshots.iter_mut().zip(row.snapshots) {
            slot.push(q);
        }
    }
    write_csv(
        &out.join("paths_sample.csv"),
        &["realization", "coordinate", "value", "jump_flag"],
        path_rows.iter(),
    )?;
    write_csv(
        &out.join("ensemble_summary.csv"),
        &["realization", "init", "n_jumps_initial", "n_events", "final_anchor"],
        summaries.iter(),
    )?;

    let time_rows: Vec<[f64; 2]> = times.iter().enumerate().map(|(i, &t)| [i as f64, t]).collect();
    write_csv(&out.join("snapshot_times.csv"), &["index", "t"], time_rows.iter())?;
    for (ti, _) in times.iter().enumerate() {
        let rows: Vec<[f64; 2]> = snapshots[ti]
            .iter()
            .enumerate()
            .map(|(k, q)| [k as f64, q.particles[0].1])
            .collect();
        write_csv(
            &out.join(format!("marginal_t{ti}.csv")),
            &["realization", "anchor_value"],
            rows.iter(),
        )?;
    }

    // Mean profile at the final time.
    let final_idx = times.len() - 1;
    let n_mean = 41;
    let mut mean_rows = Vec::with_capacity(n_mean);
    for k in 0..n_mean {
        let x = scn.a_minus + (scn.a_plus - scn.a_minus) * k as f64 / (n_mean - 1) as f64;
        let vals: Vec<f64> = snapshots[final_idx]
            .iter()
            .map(|q| reconstruct(q, x, &scn.model, drift, opts.phi_substep))
            .collect::<Result<_, _>>()
            .map_err(RunError::from)?;
        mean_rows.push([
            x,
            shocklaw_core::stats::mean(&vals),
            shocklaw_core::stats::std_error(&vals),
        ]);
    }
    write_csv(
        &out.join("mean_profile.csv"),
        &["x", "mean_rho", "std_error"],
        mean_rows.iter(),
    )?;
    Ok(true)
}

/// `kinetic`: the field pipeline alone; exports kernel and marginal
/// trajectories (and the drift field for the pdmp class).
pub fn kinetic(scn: &Scenario, out: &Path) -> RunResult {
    ensure_dir(out)?;
    write_manifest(out, scn, "kinetic")?;
    let drift = solve_scenario_drift(scn);
    if let ScenarioDrift::Field(field) = &drift {
        write_csv(
            &out.join("drift_field.csv"),
            &["x", "t", "rho", "b"],
            field.rows(),
        )?;
        if let Some(tb) = field.blow_up_time {
            return Err(RunError::Failure(format!(
                "drift field blew up at t = {tb}; shrink the horizon"
            )));
        }
    }
    let run = kinetic_run(scn, drift.as_dyn(), matches!(scn.class, ScenarioClass::PdmpF))?;
    let first = run.kernels.slabs.first().unwrap();
    let last = run.kernels.slabs.last().unwrap();
    write_csv(
        &out.join("kernel_initial.csv"),
        &["x", "t", "rho_minus", "rho_plus", "f"],
        first.rows(),
    )?;
    write_csv(
        &out.join("kernel_final.csv"),
        &["x", "t", "rho_minus", "rho_plus", "f"],
        last.rows(),
    )?;
    let marg_rows: Vec<[f64; 3]> = run.marginals.iter().flat_map(|m| m.rows()).collect();
    if !marg_rows.is_empty() {
        write_csv(
            &out.join("marginals.csv"),
            &["t", "rho", "ell"],
            marg_rows.iter(),
        )?;
    }
    let clip = last.clipped_mass;
    if clip > 1e-3 * last.total_mass().max(1e-12) {
        eprintln!("warning: positivity clipping removed mass {clip:.3e}");
    }
    Ok(true)
}

fn verdict_line(out: &mut String, name: &str, pass: bool, detail: impl std::fmt::Display) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(out, "[{tag}] {name}: {detail}");
}

/// `validate`: the two-pipeline statistical comparison plus the identity
/// suites, with a structured verdict report.
pub fn validate(scn: &Scenario, out: &Path) -> RunResult {
    ensure_dir(out)?;
    write_manifest(out, scn, "validate")?;
    match scn.class {
        ScenarioClass::PdmpF => validate_pdmp(scn, out),
        ScenarioClass::FundamentalG => validate_fundamental(scn, out),
    }
}

fn validate_pdmp(scn: &Scenario, out: &Path) -> RunResult {
    let mut probes: Vec<(f64, f64)> = Vec::new();
    for &xp in &scn.probes_x {
        for &tp in &scn.probes_t {
            probes.push((xp, tp));
        }
    }
    let comparison = ComparisonScenario {
        model: &scn.model,
        a_minus: scn.a_minus,
        a_plus: scn.a_plus,
        t0: scn.t0,
        t1: scn.t_final,
        m0: scn.m0,
        f0: &*scn.f0,
        b0: &*scn.b0,
        n_paths: scn.n_paths,
        seed: scn.seed,
        kinetic_nx: scn.nx,
        kinetic_nrho: scn.nrho,
        kinetic_steps: scn.nt,
        save_stride: scn.save_stride,
        pair_probes: &probes,
        pair_window: scn.pair_window,
        pair_bins: scn.pair_bins,
        mean_points: scn.mean_points,
    };
    let report = theorem_comparison(&comparison)?;

    let mut text = String::new();
    let mut csv_rows: Vec<Vec<f64>> = Vec::new();
    verdict_line(
        &mut text,
        "boundary-marginal KS",
        report.marginal_pass,
        format!(
            "D = {:.5}, threshold = {:.5} (N = {})",
            report.marginal_ks, report.marginal_threshold, report.n_paths
        ),
    );
    csv_rows.push(vec![
        0.0,
        scn.a_minus,
        scn.t_final,
        report.marginal_ks,
        report.marginal_threshold,
        report.marginal_pass as u8 as f64,
    ]);
    for v in &report.pair_verdicts {
        verdict_line(
            &mut text,
            "jump-pair intensity",
            v.pass,
            format!(
                "probe (x = {}, t = {}): {}/{} occupied bins within 3 sigma",
                v.x, v.t, v.within, v.occupied
            ),
        );
        csv_rows.push(vec![
            1.0,
            v.x,
            v.t,
            v.within as f64,
            v.occupied as f64,
            v.pass as u8 as f64,
        ]);
    }
    verdict_line(
        &mut text,
        "mean profile",
        report.mean_pass,
        format!("{} comparison points", report.mean_rows.len()),
    );
    for r in &report.mean_rows {
        csv_rows.push(vec![
            2.0,
            r.x,
            scn.t_final,
            r.mc_mean,
            r.kinetic_mean,
            r.pass as u8 as f64,
        ]);
    }

    // Identity suites: reference scenarios with fixed boxes.
    let suite_model = shocklaw_core::model::library::eps_sin(0.2, 0.0, 1.0);
    let suite = lemma21_residual_suite(
        &suite_model,
        &|x: f64, r: f64| -0.1 - 0.04 * x.cos() * (1.0 + r),
        SuiteBox {
            x_range: (-3.0, -0.2),
            t_range: (0.0, 0.5),
            rho_range: (0.0, 1.0),
        },
        4,
        scn.seed,
    )?;
    let mut suite_pass = true;
    for id in &suite.identities {
        let ok = id.ratio() >= 3.5;
        suite_pass &= ok;
        verdict_line(
            &mut text,
            id.name,
            ok,
            format!(
                "coarse {:.3e}, fine {:.3e}, ratio {:.2}",
                id.coarse,
                id.fine,
                id.ratio()
            ),
        );
    }
    let unit = JumpKernel::from_fn(
        KernelVariant::F,
        0.0,
        Axis::point(0.0),
        Axis::new(0.0, 2.0, 1449),
        |_, _, _| 1.0,
    );
    let burgers = shocklaw_core::model::library::burgers(-3.0, 3.0);
    let row_sums = q_row_sums(&unit, &burgers)?;
    let rows_ok = row_sums <= 1e-6;
    verdict_line(
        &mut text,
        "collision row conservation",
        rows_ok,
        format!("max |row sum| = {row_sums:.3e}"),
    );

    let pass = report.pass && suite_pass && rows_ok;
    verdict_line(&mut text, "overall", pass, "");
    print!("{text}");
    std::fs::write(out.join("verdict.txt"), &text)
        .map_err(|e| RunError::Failure(e.to_string()))?;
    write_csv(
        &out.join("verdict.csv"),
        &["kind", "coord_a", "coord_b", "value_a", "value_b", "pass"],
        csv_rows.iter().map(|r| r.as_slice().to_vec()),
    )?;
    Ok(pass)
}

fn validate_fundamental(scn: &Scenario, out: &Path) -> RunResult {
    if scn.model.is_xt_dependent() {
        return Err(RunError::Config(
            "fundamental-g validation needs an (x,t)-independent model".into(),
        ));
    }
    let mut text = String::new();

    // Shape preservation: evolved positions against the closed-form
    // reconstruction from the evolved labels, on a seeded configuration.
    let f0 = build_initial_kernel(scn);
    let rates = RateRows::plain(&f0);
    // Scan seed streams for a realization with at least two jumps so the
    // check exercises genuine shock interaction.
    let mut chosen = None;
    for k in 0..200u64 {
        let mut rng = stream(scn.seed, k);
        let path = sample_y_process(
            &f0,
            &rates,
            scn.a_minus,
            scn.a_plus,
            scn.m0,
            &mut rng,
            &SampleOptions::default(),
        )?;
        if path.jump_count() >= 2 {
            chosen = Some(path);
            break;
        }
        if chosen.is_none() && path.jump_count() >= 1 {
            chosen = Some(path);
        }
    }
    let path = chosen.ok_or_else(|| {
        RunError::Config("initial kernel produces no jumps; raise f0_scale".into())
    })?;
    let q0 = path_to_configuration(
        &path,
        ParticleClass::Fundamental { s: scn.s },
        scn.t0,
        scn.a_plus,
    )?;
    let opts = EvolveOptions {
        macro_dt: 5e-4,
        ..Default::default()
    };
    let (qf, trace) = evolve(
        &q0,
        scn.t_final,
        &scn.model,
        &shocklaw_core::model::ZeroDrift,
        &mut RightMode::Open,
        &opts,
    )?;
    let mut worst = 0.0f64;
    for k in 0..60 {
        let x = scn.a_minus + (scn.a_plus - scn.a_minus) * k as f64 / 59.0;
        let via = reconstruct(
            &qf,
            x,
            &scn.model,
            &shocklaw_core::model::ZeroDrift,
            opts.phi_substep,
        )?;
        let label = qf
            .particles
            .iter()
            .rev()
            .find(|&&(xx, _)| xx <= x)
            .map(|&(_, y)| y)
            .unwrap();
        let direct = shocklaw_core::model::fundamental_m(&scn.model, x, qf.t, label, scn.s)?;
        worst = worst.max((via - direct).abs());
    }
    let shape_ok = worst <= 1e-8;
    verdict_line(
        &mut text,
        "shape preservation",
        shape_ok,
        format!(
            "max |profile - reconstruction| = {worst:.3e} over {} events",
            trace.events.len()
        ),
    );

    // Kernel balance residual under refinement of all grids together.
    let resid = |nt: usize, nx: usize, ny: usize, stride: usize| -> Result<f64, RunError> {
        let variant = KernelVariant::G { s: scn.s };
        let f0 = JumpKernel::from_fn(
            variant,
            scn.t0,
            Axis::new(scn.a_minus, scn.a_plus, nx),
            Axis::new(scn.value_lo, scn.value_hi, ny),
            |x, lo, hi| (scn.f0)(x, lo, hi),
        );
        let run = solve_kinetic(
            &scn.model,
            &shocklaw_core::model::ZeroDrift,
            f0,
            None,
            scn.t_final,
            nt,
            stride,
            &StepOptions::default(),
        )?;
        let slabs = &run.kernels.slabs;
        let k = slabs.len() / 2;
        let (prev, mid, next) = (&slabs[k - 1], &slabs[k], &slabs[k + 1]);
        let two_dt = next.t - prev.t;
        let dx = mid.xs.step();
        let mut worst = 0.0f64;
        for ix in 1..mid.xs.n.saturating_sub(1) {
            for i in 0..mid.rho.n {
                let lhs = (next.a_row(ix, i) - prev.a_row(ix, i)) / two_dt;
                let w = |ixx: usize| -> Result<f64, CoreError> {
                    let x = mid.xs.coord(ixx);
                    let mut acc = Vec::new();
                    for j in i..mid.rho.n {
                        acc.push(
                            mid.velocity(&scn.model, x, mid.t, mid.rho.coord(i), mid.rho.coord(j))?
                                * mid.node(ixx, i, j),
                        );
                    }
                    Ok(shocklaw_core::quad::trapezoid_uniform(&acc, mid.rho.step()))
                };
                let rhs = (w(ix + 1)? - w(ix - 1)?) / (2.0 * dx);
                worst = worst.max((lhs - rhs).abs());
            }
        }
        Ok(worst)
    };
    // Fixed stride: halving nt with the same stride halves the slab
    // spacing along with the grids.
    let half = |n: usize| (n - 1) / 2 + 1;
    let coarse = resid(scn.nt / 2, half(scn.nx.max(5)), half(scn.nrho), scn.save_stride)?;
    let fine = resid(scn.nt, scn.nx.max(5), scn.nrho, scn.save_stride)?;
    let balance_ok = coarse / fine.max(1e-300) >= 1.7;
    verdict_line(
        &mut text,
        "kernel balance refinement",
        balance_ok,
        format!("coarse {coarse:.3e}, fine {fine:.3e}, ratio {:.2}", coarse / fine),
    );

    let pass = shape_ok && balance_ok;
    verdict_line(&mut text, "overall", pass, "");
    print!("{text}");
    std::fs::write(out.join("verdict.txt"), &text)
        .map_err(|e| RunError::Failure(e.to_string()))?;
    Ok(pass)
}

/// `htransform`: conditioned-kernel pipeline for fundamental-class
/// scenarios.
pub fn htransform(scn: &Scenario, out: &Path) -> RunResult {
    ensure_dir(out)?;
    write_manifest(out, scn, "htransform")?;
    if !matches!(scn.class, ScenarioClass::FundamentalG) {
        return Err(RunError::Config(
            "htransform needs a fundamental-g scenario".into(),
        ));
    }
    let spec = scn.htransform.as_ref().ok_or_else(|| {
        RunError::Config("htransform needs an [htransform] section".into())
    })?;
    let window = (spec.window_lo, (1.0 - spec.delta) * scn.a_plus);
    if window.1 <= window.0 {
        return Err(RunError::Config(format!(
            "empty conditioning window [{}, {})",
            window.0, window.1
        )));
    }
    let run = kinetic_run(scn, &shocklaw_core::model::ZeroDrift, false)?;
    let sopts = shocklaw_core::htransform::SeriesOptions {
        n_max: spec.n_max,
        tail_tol: 1e-3,
        x_refine: 4,
    };
    let mut text = String::new();
    let hs: Vec<shocklaw_core::htransform::HFunction> = run
        .kernels
        .slabs
        .iter()
        .map(|slab| shocklaw_core::htransform::compute_h_series(slab, window, &sopts))
        .collect::<Result<_, _>>()?;
    write_csv(
        &out.join("h_field.csv"),
        &["x", "t", "y", "h"],
        hs.iter().flat_map(|h| h.rows()),
    )?;

    let eps_h = hs
        .iter()
        .zip(&run.kernels.slabs)
        .map(|(h, g)| shocklaw_core::htransform::h_equation_residual_x(h, g))
        .fold(0.0f64, f64::max);
    verdict_line(&mut text, "x-equation residual", true, format!("{eps_h:.3e}"));

    // Monte Carlo cross-check at probe points of the final slab.
    let g_last = run.kernels.slabs.last().unwrap();
    let h_last = hs.last().unwrap();
    let probe_y: Vec<(f64, f64)> = (1..4)
        .map(|k| {
            (
                scn.a_minus,
                window.0 + (window.1 - window.0) * k as f64 / 4.0,
            )
        })
        .collect();
    let mc = shocklaw_core::htransform::compute_h_mc(
        g_last,
        window,
        &probe_y,
        spec.mc_paths,
        scn.seed,
    )?;
    let mut mc_ok = true;
    for (&(x, y), &(p, se)) in probe_y.iter().zip(&mc) {
        let hv = h_last.eval(x, y);
        let ok = (hv - p).abs() <= 3.0 * (se + 1e-2);
        mc_ok &= ok;
        verdict_line(
            &mut text,
            "series vs Monte Carlo h",
            ok,
            format!("h({x:.3}, {y:.3}) = {hv:.4} vs {p:.4} (se {se:.4})"),
        );
    }

    // Transformed kernel still solves the kinetic equation.
    let hat_slabs: Vec<JumpKernel> = run
        .kernels
        .slabs
        .iter()
        .zip(&hs)
        .map(|(g, h)| shocklaw_core::htransform::transform_kernel(g, h))
        .collect::<Result<_, _>>()?;
    let g_resid = shocklaw_core::htransform::kinetic_residual_g(&run.kernels, &scn.model, None)?;
    let hat_resid = shocklaw_core::htransform::kinetic_residual_g(
        &KernelSeries::new(hat_slabs),
        &scn.model,
        Some(window),
    )?;
    let slab0 = &run.kernels.slabs[0];
    let delta = slab0.rho.step()
        + slab0.xs.step()
        + (run.kernels.slabs[1].t - slab0.t);
    let bound = 3.0 * (eps_h + g_resid + delta);
    let prop_ok = hat_resid <= bound;
    verdict_line(
        &mut text,
        "transformed-kernel residual",
        prop_ok,
        format!("{hat_resid:.3e} <= bound {bound:.3e}"),
    );

    let pass = mc_ok && prop_ok;
    verdict_line(&mut text, "overall", pass, "");
    print!("{text}");
    std::fs::write(out.join("htransform_report.txt"), &text)
        .map_err(|e| RunError::Failure(e.to_string()))?;
    Ok(pass)
}

/// `oracle`: run the Godunov reference from a seeded realization of the
/// initial data and report L1 distances to the particle solution.
pub fn oracle(scn: &Scenario, out: &Path) -> RunResult {
    ensure_dir(out)?;
    write_manifest(out, scn, "oracle")?;
    if !matches!(scn.class, ScenarioClass::PdmpF) {
        return Err(RunError::Config("oracle needs a pdmp-f scenario".into()));
    }
    let drift = solve_scenario_drift(scn);
    let drift = drift.as_dyn();
    let f0 = build_initial_kernel(scn);
    let rates = RateRows::plain(&f0);
    let mut rng = stream(scn.seed, 0);
    let path = sample_pdmp_path(
        drift,
        &f0,
        &rates,
        scn.a_minus,
        scn.a_plus,
        scn.m0,
        &mut rng,
        &SampleOptions::default(),
    )?;
    let q0 = path_to_configuration(&path, ParticleClass::Pdmp, scn.t0, scn.a_plus)?;
    let probes: Vec<f64> = if scn.probes_t.is_empty() {
        vec![scn.t_final]
    } else {
        scn.probes_t.clone()
    };

    // Dense trace of the realization plus profile snapshots.
    let trace_opts = EvolveOptions {
        record: true,
        ..Default::default()
    };
    let (q_end, trace) = evolve(
        &q0,
        *probes.last().unwrap(),
        &scn.model,
        drift,
        &mut RightMode::Open,
        &trace_opts,
    )?;
    let mut trace_rows: Vec<[f64; 5]> = Vec::new();
    for (k, t) in trace.times.iter().enumerate() {
        let is_event = trace.events.iter().any(|e| (e.t - t).abs() < 1e-15);
        for (i, &(x, v)) in trace.states[k].iter().enumerate() {
            trace_rows.push([*t, i as f64, x, v, is_event as u8 as f64]);
        }
    }
    write_csv(
        &out.join("particle_trace.csv"),
        &["t", "particle", "x", "value", "event_flag"],
        trace_rows.iter(),
    )?;
    let prof = shocklaw_core::shockline::profile(&q_end, 201, &scn.model, drift, 0.02)?;
    let prof_rows: Vec<[f64; 2]> = prof
        .xs
        .iter()
        .zip(&prof.values)
        .map(|(&x, &v)| [x, v])
        .collect();
    write_csv(
        &out.join("profile_final.csv"),
        &["x", "rho"],
        prof_rows.iter(),
    )?;

    let rows = compare_particle_vs_fv(
        &q0,
        &scn.model,
        drift,
        &probes,
        &[256, 512],
        &EvolveOptions::default(),
    )?;
    let mut pass = true;
    let csv: Vec<[f64; 5]> = rows
        .iter()
        .map(|r| {
            pass &= r.l1 <= r.bound;
            [r.probe_t, r.n_cells as f64, r.dx, r.l1, r.bound]
        })
        .collect();
    write_csv(
        &out.join("fv_compare.csv"),
        &["t", "cells", "dx", "l1", "bound"],
        csv.iter(),
    )?;
    for r in &rows {
        println!(
            "[{}] oracle t = {:.4}, cells = {}: L1 = {:.4e} (bound {:.4e})",
            if r.l1 <= r.bound { "PASS" } else { "FAIL" },
            r.probe_t,
            r.n_cells,
            r.l1,
            r.bound
        );
    }
    Ok(pass)
}

/// Residual diagnostics helper shared by tests.
pub fn diag_residuals(
    q: &ShockConfiguration,
    t1: f64,
    model: &HamiltonianModel,
    drift: &dyn Drift,
) -> Result<shocklaw_core::shockline::TraceDiagnostics, RunError> {
    let opts = EvolveOptions {
        record: true,
        ..Default::default()
    };
    let (_, trace) = evolve(q, t1, model, drift, &mut RightMode::Open, &opts)?;
    Ok(entropy_and_rh_residuals(&trace, q, model, drift, opts.phi_substep)?)
}

/// Run a closure inside a deterministic worker pool.
pub fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("worker pool");
    pool.install(f)
}

/// Output directory for a subcommand, honoring the `--out` override.
pub fn resolve_out_dir(scn: &Scenario, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| scn.out_dir.clone())
}
