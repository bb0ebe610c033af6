//! Scenario files: a single TOML document describing the model, domain,
//! initial data, grids, ensemble, and outputs. The schema is documented
//! in the repository README; every run is keyed by an explicit seed.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use shocklaw_core::model::{library, ConstDrift, Drift, ZeroDrift};
use shocklaw_core::HamiltonianModel;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub scenario: ScenarioHeader,
    pub model: ModelSpec,
    pub domain: DomainSpec,
    pub initial: InitialSpec,
    pub grid: GridSpec,
    #[serde(default)]
    pub ensemble: EnsembleSpec,
    #[serde(default)]
    pub htransform: Option<HTransformSpec>,
    pub output: OutputSpec,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioHeader {
    pub name: String,
    /// `pdmp-f` or `fundamental-g`.
    pub class: String,
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub p_minus: f64,
    pub p_plus: f64,
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default)]
    pub eps: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub a_minus: f64,
    pub a_plus: f64,
    pub t0: f64,
    pub t_final: f64,
    /// Fundamental-class seeding time (must predate t0).
    #[serde(default)]
    pub s: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    /// Anchor value: m0 for the pdmp class, y0 for the fundamental class.
    pub m0: f64,
    #[serde(default = "default_zero_name")]
    pub b0: String,
    #[serde(default)]
    pub b0_value: Option<f64>,
    #[serde(default = "default_band_name")]
    pub f0: String,
    #[serde(default = "default_scale")]
    pub f0_scale: f64,
    /// Label box for the fundamental class.
    #[serde(default)]
    pub y_minus: Option<f64>,
    #[serde(default)]
    pub y_plus: Option<f64>,
}

fn default_zero_name() -> String {
    "zero".into()
}
fn default_band_name() -> String {
    "smooth_band".into()
}
fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub nrho: usize,
    pub nt: usize,
    #[serde(default = "default_stride")]
    pub save_stride: usize,
}

fn default_stride() -> usize {
    8
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub probes_x: Vec<f64>,
    #[serde(default)]
    pub probes_t: Vec<f64>,
    #[serde(default = "default_window")]
    pub pair_window: f64,
    #[serde(default = "default_bins")]
    pub pair_bins: usize,
    #[serde(default = "default_mean_points")]
    pub mean_points: usize,
}

fn default_n() -> usize {
    2000
}
fn default_window() -> f64 {
    0.3
}
fn default_bins() -> usize {
    6
}
fn default_mean_points() -> usize {
    5
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HTransformSpec {
    pub window_lo: f64,
    /// Window top is `(1 - delta) a_plus`.
    pub delta: f64,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default = "default_mc_paths")]
    pub mc_paths: usize,
}

fn default_n_max() -> usize {
    4
}
fn default_mc_paths() -> usize {
    10000
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
}

/// Class tag after validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioClass {
    PdmpF,
    FundamentalG,
}

/// A validated scenario with resolved closures.
pub struct Scenario {
    pub name: String,
    pub class: ScenarioClass,
    pub seed: u64,
    pub model: HamiltonianModel,
    pub a_minus: f64,
    pub a_plus: f64,
    pub t0: f64,
    pub t_final: f64,
    pub s: f64,
    pub m0: f64,
    pub value_lo: f64,
    pub value_hi: f64,
    pub b0: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    pub b0_is_zero: bool,
    pub b0_const: Option<f64>,
    pub f0: Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>,
    pub nx: usize,
    pub nrho: usize,
    pub nt: usize,
    pub save_stride: usize,
    pub n_paths: usize,
    pub probes_x: Vec<f64>,
    pub probes_t: Vec<f64>,
    pub pair_window: f64,
    pub pair_bins: usize,
    pub mean_points: usize,
    pub htransform: Option<HTransformSpec>,
    pub out_dir: PathBuf,
    pub raw: String,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}
impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

pub fn load(path: &Path) -> Result<Scenario, ConfigError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    let file: ScenarioFile = toml::from_str(&raw).map_err(|e| {
        // toml errors carry line/column context.
        ConfigError(format!("{}: {e}", path.display()))
    })?;
    resolve(file, raw)
}

pub fn resolve(file: ScenarioFile, raw: String) -> Result<Scenario, ConfigError> {
    let class = match file.scenario.class.as_str() {
        "pdmp-f" => ScenarioClass::PdmpF,
        "fundamental-g" => ScenarioClass::FundamentalG,
        other => return err(format!("unknown class `{other}` (pdmp-f | fundamental-g)")),
    };

    let m = &file.model;
    let model = match m.name.as_str() {
        "burgers" => library::burgers(m.p_minus, m.p_plus),
        "shifted_burgers" => library::shifted_burgers(m.p_minus, m.p_plus),
        "linear" => {
            let c = m.c.ok_or(ConfigError("model `linear` needs `c`".into()))?;
            library::linear(c, m.p_minus, m.p_plus)
        }
        "eps_sin" => {
            let eps = m
                .eps
                .ok_or(ConfigError("model `eps_sin` needs `eps`".into()))?;
            library::eps_sin(eps, m.p_minus, m.p_plus)
        }
        other => return err(format!("unknown model name `{other}`")),
    };
    model
        .self_check(&[file.domain.a_minus, file.domain.a_plus], &[file.domain.t0])
        .map_err(|e| ConfigError(format!("model self-check failed: {e}")))?;

    let d = &file.domain;
    if !(d.a_plus > d.a_minus) || !(d.t_final > d.t0) {
        return err("domain must satisfy a_plus > a_minus and t_final > t0");
    }
    let s = match class {
        ScenarioClass::FundamentalG => {
            let s = d
                .s
                .ok_or(ConfigError("fundamental-g needs domain.s".into()))?;
            if s >= d.t0 {
                return err("fundamental-g needs s < t0");
            }
            s
        }
        ScenarioClass::PdmpF => d.s.unwrap_or(d.t0 - 1.0),
    };

    // Value box: momentum for the pdmp class, labels for the fundamental
    // class.
    let (value_lo, value_hi) = match class {
        ScenarioClass::PdmpF => (m.p_minus, m.p_plus),
        ScenarioClass::FundamentalG => {
            let lo = file
                .initial
                .y_minus
                .ok_or(ConfigError("fundamental-g needs initial.y_minus".into()))?;
            let hi = file
                .initial
                .y_plus
                .ok_or(ConfigError("fundamental-g needs initial.y_plus".into()))?;
            if !(hi > lo) {
                return err("initial.y_plus must exceed initial.y_minus");
            }
            (lo, hi)
        }
    };
    if file.initial.m0 < value_lo || file.initial.m0 > value_hi {
        return err(format!(
            "initial.m0 = {} outside the value box [{value_lo}, {value_hi}]",
            file.initial.m0
        ));
    }

    let (b0, b0_is_zero, b0_const): (Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>, bool, Option<f64>) =
        match file.initial.b0.as_str() {
            "zero" => (Arc::new(|_x: f64, _r: f64| 0.0), true, Some(0.0)),
            "const" => {
                let v = file
                    .initial
                    .b0_value
                    .ok_or(ConfigError("b0 = const needs b0_value".into()))?;
                (Arc::new(move |_x: f64, _r: f64| v), v == 0.0, Some(v))
            }
            other => return err(format!("unknown b0 spec `{other}` (zero | const)")),
        };

    let scale = file.initial.f0_scale;
    let (lo, hi) = (value_lo, value_hi);
    let f0: Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync> = match file.initial.f0.as_str() {
        "zero" => Arc::new(|_x, _a, _b| 0.0),
        "uniform" => Arc::new(move |_x, a, b| {
            if a >= lo && b <= hi && b >= a {
                scale
            } else {
                0.0
            }
        }),
        "smooth_band" => Arc::new(move |_x, a, b| {
            let bump = |r: f64| {
                if r <= lo || r >= hi {
                    0.0
                } else {
                    let u = (r - lo) / (hi - lo);
                    16.0 * (u * (1.0 - u)).powi(2)
                }
            };
            scale * bump(a) * bump(b)
        }),
        other => return err(format!("unknown f0 spec `{other}` (zero | uniform | smooth_band)")),
    };

    let g = &file.grid;
    if g.nrho < 9 || g.nt < 2 || g.nx < 1 {
        return err("grid must have nrho >= 9, nt >= 2, nx >= 1");
    }

    // CFL precheck on the declared grids.
    if g.nx > 1 {
        let dx = (d.a_plus - d.a_minus) / (g.nx - 1) as f64;
        let dt = (d.t_final - d.t0) / g.nt as f64;
        let mut vmax = 1e-12f64;
        for k in 0..=16 {
            let r = value_lo + (value_hi - value_lo) * k as f64 / 16.0;
            for x in [d.a_minus, 0.5 * (d.a_minus + d.a_plus), d.a_plus] {
                match class {
                    ScenarioClass::PdmpF => {
                        vmax = vmax.max(model.h_rho(x, d.t0, r).abs());
                    }
                    ScenarioClass::FundamentalG => {
                        if let Ok(v) = shocklaw_core::model::vhat(&model, x, d.t0, r, value_hi, s)
                        {
                            vmax = vmax.max(v.abs());
                        }
                    }
                }
            }
        }
        if dt * vmax / dx > 0.9 {
            return err(format!(
                "CFL precheck failed: dt * vmax / dx = {:.3} > 0.9 (raise grid.nt)",
                dt * vmax / dx
            ));
        }
    }

    for &xp in &file.ensemble.probes_x {
        if xp < d.a_minus || xp > d.a_plus {
            return err(format!("probe x = {xp} outside [{}, {}]", d.a_minus, d.a_plus));
        }
    }
    for &tp in &file.ensemble.probes_t {
        if tp <= d.t0 || tp > d.t_final {
            return err(format!("probe t = {tp} outside ({}, {}]", d.t0, d.t_final));
        }
    }

    Ok(Scenario {
        name: file.scenario.name,
        class,
        seed: file.scenario.seed,
        model,
        a_minus: d.a_minus,
        a_plus: d.a_plus,
        t0: d.t0,
        t_final: d.t_final,
        s,
        m0: file.initial.m0,
        value_lo,
        value_hi,
        b0,
        b0_is_zero,
        b0_const,
        f0,
        nx: g.nx,
        nrho: g.nrho,
        nt: g.nt,
        save_stride: g.save_stride,
        n_paths: file.ensemble.n,
        probes_x: file.ensemble.probes_x,
        probes_t: file.ensemble.probes_t,
        pair_window: file.ensemble.pair_window,
        pair_bins: file.ensemble.pair_bins,
        mean_points: file.ensemble.mean_points,
        htransform: file.htransform,
        out_dir: file.output.dir,
        raw,
    })
}

impl Scenario {
    /// Scale grid resolutions by the `--resolution-scale` flag.
    pub fn apply_resolution_scale(&mut self, r: f64) {
        if (r - 1.0).abs() < 1e-12 {
            return;
        }
        let scale = |n: usize| (((n - 1) as f64 * r).round() as usize + 1).max(2);
        if self.nx > 1 {
            self.nx = scale(self.nx);
        }
        self.nrho = scale(self.nrho);
        self.nt = ((self.nt as f64 * r).round() as usize).max(2);
    }

    /// Drift evaluator for hot paths when the initial drift vanishes (and
    /// hence the solved field is identically zero for x-independent
    /// Hamiltonians with H_xx = 0).
    pub fn zero_drift(&self) -> ZeroDrift {
        ZeroDrift
    }

    pub fn const_drift(&self) -> Option<ConstDrift> {
        self.b0_const.map(ConstDrift)
    }

    pub fn drift_is_trivially_zero(&self) -> bool {
        self.b0_is_zero && !self.model.is_xt_dependent()
    }

    /// Assert the drift really vanishes if the fast path is taken.
    pub fn check_zero_drift(&self, field_max: f64) -> bool {
        let _ = self;
        field_max <= 1e-12
    }
}

/// A dyn-compatible handle for the drift the runners use.
pub enum ScenarioDrift {
    Zero(ZeroDrift),
    Field(shocklaw_core::drift::DriftField),
}

impl ScenarioDrift {
    pub fn as_dyn(&self) -> &dyn Drift {
        match self {
            ScenarioDrift::Zero(z) => z,
            ScenarioDrift::Field(f) => f,
        }
    }
}
