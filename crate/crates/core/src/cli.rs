//! Command-line driver: run configuration, scenario assembly and the
//! `synth`, `eval`, `bode` and `model gen` commands.
//!
//! A run configuration is a flat `key = value` file. Blank lines and `#`
//! comments are ignored; relative paths resolve against the directory of
//! the configuration file.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `scenario` | required | `beam`, `building` or `custom` |
//! | `grid` | required | comma-separated parameter values |
//! | `nominal` | middle grid value | grid value used for the nominal synthesis |
//! | `n_k`, `n_delta` | 2, 1 | controller order and parameter repetitions |
//! | `class` | `full-hinf` | or `strictly-proper-h2` |
//! | `dependency` | `rational` | or `affine` |
//! | `ak_shape` | `full` | or `tridiagonal` |
//! | `wk.kind` | `first-order-lag` | or `biquad-notch`, `static` |
//! | `wk.gain`, `wk.corner` | 0.1, 100 | lag and static parameters |
//! | `wk.w_m`, `wk.alpha`, `wk.m`, `wk.rho_scale` | 5.2, 10, 0.1, true | biquad parameters |
//! | `opt.max_iter`, `opt.tol`, `opt.restarts`, `opt.seed` | 500, 1e-4, 3, 0 | optimizer |
//! | `opt.freeze_nominal_first` | false | optimize parameter-coupled blocks first |
//! | `sweep.rho_min`, `sweep.rho_max` | grid range | sweep bounds |
//! | `sweep.n_points` | 21 | sweep size |
//! | `sweep.metric` | `hinf` | or `h2` |
//! | `sweep.output_rho` | unset | evaluate the performance output at this fixed parameter value |
//! | `bode.omega_min`, `bode.omega_max`, `bode.n_points` | 1e-2, 1e3, 400 | Bode frequency grid |
//! | `beam.n_elements` | 15 | beam discretization |
//! | `building.n_modes`, `building.peak_omega`, `building.seed` | 4, 5.2, 0 | building surrogate |
//! | `plant.files` | | custom: one state-space file per grid value |
//! | `plant.inputs`, `plant.outputs` | 1,1 | custom: `n_w,n_u` and `n_z,n_y` |
//! | `out.controller`, `out.trace`, `out.summary` | `controller.txt`, `trace.csv`, `summary.txt` | synth outputs |
//! | `out.nominal_controller` | unset | also save the nominal controller |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::lft::{self, ControllerBlock};
use crate::models::{self, BeamSpec, WeightSpec};
use crate::norms;
use crate::statespace::{FreqEvaluator, PartitionedSystem, StateSpace};
use crate::synth::{
    self, AkShape, ControllerClass, Dependency, Status, Structure, SynthOptions, SynthesisProblem, SynthesisResult,
};
use crate::csv_float;

/// Exit code for configuration, parse and I/O errors.
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_ITERATION_LIMIT: i32 = 2;
pub const EXIT_STABILIZATION_FAILED: i32 = 3;

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "LFTSYNTH_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Beam,
    Building,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Hinf,
    H2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub rho_min: f64,
    pub rho_max: f64,
    pub n_points: usize,
    pub metric: Metric,
    pub output_rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodeConfig {
    pub omega_min: f64,
    pub omega_max: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub grid: Vec<f64>,
    pub nominal: f64,
    pub structure: Structure,
    pub weight: WeightSpec,
    pub options: SynthOptions,
    pub sweep: SweepConfig,
    pub bode: BodeConfig,
    pub beam_elements: usize,
    pub building_modes: usize,
    pub building_peak: f64,
    pub building_seed: u64,
    pub plant_files: Vec<PathBuf>,
    pub plant_inputs: Vec<usize>,
    pub plant_outputs: Vec<usize>,
    pub out_controller: PathBuf,
    pub out_trace: PathBuf,
    pub out_summary: PathBuf,
    pub out_nominal: Option<PathBuf>,
}

const KNOWN_KEYS: &[&str] = &[
    "scenario",
    "grid",
    "nominal",
    "n_k",
    "n_delta",
    "class",
    "dependency",
    "ak_shape",
    "wk.kind",
    "wk.gain",
    "wk.corner",
    "wk.w_m",
    "wk.alpha",
    "wk.m",
    "wk.rho_scale",
    "opt.max_iter",
    "opt.tol",
    "opt.restarts",
    "opt.seed",
    "opt.freeze_nominal_first",
    "sweep.rho_min",
    "sweep.rho_max",
    "sweep.n_points",
    "sweep.metric",
    "sweep.output_rho",
    "bode.omega_min",
    "bode.omega_max",
    "bode.n_points",
    "beam.n_elements",
    "building.n_modes",
    "building.peak_omega",
    "building.seed",
    "plant.files",
    "plant.inputs",
    "plant.outputs",
    "out.controller",
    "out.trace",
    "out.summary",
    "out.nominal_controller",
];

struct Entries {
    values: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse { line: line_no, msg: format!("expected `key = value`, got `{line}`") });
            };
            let key = k.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Parse { line: line_no, msg: format!("unknown key `{key}`") });
            }
            if values.insert(key.clone(), (line_no, v.trim().to_string())).is_some() {
                return Err(Error::Parse { line: line_no, msg: format!("key `{key}` given twice") });
            }
        }
        Ok(Self { values })
    }

    fn bad(&self, key: &str, msg: impl std::fmt::Display) -> Error {
        let line = self.values.get(key).map(|v| v.0).unwrap_or(0);
        Error::Parse { line, msg: format!("key `{key}`: {msg}") }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|v| v.1.as_str())
    }

    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.bad(key, format!("cannot parse `{v}`"))),
        }
    }

    fn get_opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| self.bad(key, format!("cannot parse `{v}`"))),
        }
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| self.bad(key, format!("cannot parse `{}`", s.trim()))))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    fn positive(&self, key: &str, default: f64) -> Result<f64> {
        let v: f64 = self.get(key, default)?;
        if !(v.is_finite() && v > 0.0) {
            return Err(self.bad(key, "must be a positive number"));
        }
        Ok(v)
    }
}

impl RunConfig {
    /// Parse configuration text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let e = Entries::parse(text)?;
        let scenario = match e.raw("scenario") {
            Some("beam") => Scenario::Beam,
            Some("building") => Scenario::Building,
            Some("custom") => Scenario::Custom,
            Some(other) => return Err(e.bad("scenario", format!("unknown scenario `{other}`"))),
            None => return Err(Error::Parse { line: 0, msg: "missing key `scenario`".into() }),
        };
        let grid: Vec<f64> = e
            .list("grid")?
            .ok_or_else(|| Error::Parse { line: 0, msg: "missing key `grid`".into() })?;
        if grid.is_empty() || grid.iter().any(|g| !g.is_finite()) {
            return Err(e.bad("grid", "needs finite values"));
        }
        for (i, a) in grid.iter().enumerate() {
            if grid[..i].contains(a) {
                return Err(e.bad("grid", format!("value {a} is repeated")));
            }
        }
        let nominal = match e.get_opt::<f64>("nominal")? {
            Some(v) if grid.contains(&v) => v,
            Some(v) => return Err(e.bad("nominal", format!("{v} is not a grid value"))),
            None => grid[(grid.len() - 1) / 2],
        };

        let class = match e.raw("class").unwrap_or("full-hinf") {
            "full-hinf" => ControllerClass::FullHinf,
            "strictly-proper-h2" => ControllerClass::StrictlyProperH2,
            other => return Err(e.bad("class", format!("unknown class `{other}`"))),
        };
        let dependency = match e.raw("dependency").unwrap_or("rational") {
            "rational" => Dependency::Rational,
            "affine" => Dependency::Affine,
            other => return Err(e.bad("dependency", format!("unknown dependency `{other}`"))),
        };
        let a_k_shape = match e.raw("ak_shape").unwrap_or("full") {
            "full" => AkShape::Full,
            "tridiagonal" => AkShape::Tridiagonal,
            other => return Err(e.bad("ak_shape", format!("unknown shape `{other}`"))),
        };
        let structure = Structure {
            n_k: e.get("n_k", 2)?,
            n_delta: e.get("n_delta", 1)?,
            class,
            dependency,
            a_k_shape,
        };

        let weight = match e.raw("wk.kind").unwrap_or("first-order-lag") {
            "first-order-lag" => WeightSpec::FirstOrderLag {
                gain: e.get("wk.gain", 0.1)?,
                corner: e.positive("wk.corner", 100.0)?,
            },
            "static" => WeightSpec::Static { gain: e.get("wk.gain", 0.1)? },
            "biquad-notch" => WeightSpec::BiquadNotch {
                w_m: e.positive("wk.w_m", 5.2)?,
                alpha: e.positive("wk.alpha", 10.0)?,
                m: e.positive("wk.m", 0.1)?,
                rho_scale: e.get("wk.rho_scale", true)?,
            },
            other => return Err(e.bad("wk.kind", format!("unknown weight kind `{other}`"))),
        };

        let tol: f64 = e.get("opt.tol", 1e-4)?;
        if !(tol.is_finite() && tol >= 0.0) {
            return Err(e.bad("opt.tol", "must be a nonnegative number"));
        }
        let options = SynthOptions {
            max_iter: e.get("opt.max_iter", 500)?,
            tol,
            restarts: e.get("opt.restarts", 3)?,
            seed: e.get("opt.seed", 0)?,
            freeze_nominal_first: e.get("opt.freeze_nominal_first", false)?,
            ..SynthOptions::default()
        };

        let lo = grid.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let rho_min: f64 = e.get("sweep.rho_min", lo)?;
        let rho_max: f64 = e.get("sweep.rho_max", hi)?;
        if !(rho_min.is_finite() && rho_max.is_finite()) || rho_min > lo || rho_max < hi {
            return Err(e.bad("sweep.rho_min", format!("sweep [{rho_min}, {rho_max}] must cover the grid [{lo}, {hi}]")));
        }
        let n_points: usize = e.get("sweep.n_points", 21)?;
        if n_points == 0 {
            return Err(e.bad("sweep.n_points", "must be at least 1"));
        }
        let metric = match e.raw("sweep.metric").unwrap_or("hinf") {
            "hinf" => Metric::Hinf,
            "h2" => Metric::H2,
            other => return Err(e.bad("sweep.metric", format!("unknown metric `{other}`"))),
        };
        let sweep = SweepConfig { rho_min, rho_max, n_points, metric, output_rho: e.get_opt("sweep.output_rho")? };

        let bode = BodeConfig {
            omega_min: e.positive("bode.omega_min", 1e-2)?,
            omega_max: e.positive("bode.omega_max", 1e3)?,
            n_points: e.get("bode.n_points", 400)?,
        };
        if bode.omega_max <= bode.omega_min || bode.n_points < 2 {
            return Err(e.bad("bode.omega_max", "needs omega_max > omega_min and at least 2 points"));
        }

        let path = |key: &str, default: &str| -> PathBuf { base.join(e.raw(key).unwrap_or(default)) };
        let plant_files: Vec<PathBuf> = e
            .list::<String>("plant.files")?
            .unwrap_or_default()
            .into_iter()
            .map(|p| base.join(p))
            .collect();
        if scenario == Scenario::Custom && plant_files.len() != grid.len() {
            return Err(e.bad("plant.files", format!("custom scenario needs {} plant files", grid.len())));
        }
        let plant_inputs = e.list("plant.inputs")?.unwrap_or(vec![1, 1]);
        let plant_outputs = e.list("plant.outputs")?.unwrap_or(vec![1, 1]);
        if plant_inputs.len() != 2 {
            return Err(e.bad("plant.inputs", "expected `n_w,n_u`"));
        }
        if plant_outputs.len() != 2 {
            return Err(e.bad("plant.outputs", "expected `n_z,n_y`"));
        }

        let beam_elements = e.get("beam.n_elements", 15)?;
        if beam_elements < 2 {
            return Err(e.bad("beam.n_elements", "needs at least 2 elements"));
        }
        let building_modes = e.get("building.n_modes", 4)?;
        if building_modes < 2 {
            return Err(e.bad("building.n_modes", "needs at least 2 modes"));
        }

        Ok(Self {
            scenario,
            grid,
            nominal,
            structure,
            weight,
            options,
            sweep,
            bode,
            beam_elements,
            building_modes,
            building_peak: e.positive("building.peak_omega", 5.2)?,
            building_seed: e.get("building.seed", 0)?,
            plant_files,
            plant_inputs,
            plant_outputs,
            out_controller: path("out.controller", "controller.txt"),
            out_trace: path("out.trace", "trace.csv"),
            out_summary: path("out.summary", "summary.txt"),
            out_nominal: e.raw("out.nominal_controller").map(|p| base.join(p)),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    /// Sweep parameter values; the grid values for the custom scenario.
    pub fn sweep_points(&self) -> Vec<f64> {
        if self.scenario == Scenario::Custom {
            return self.grid.clone();
        }
        let n = self.sweep.n_points;
        if n == 1 {
            return vec![self.sweep.rho_min];
        }
        let (a, b) = (self.sweep.rho_min, self.sweep.rho_max);
        (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
    }
}

/// Builds generalized plants and weights for a configuration.
pub struct ScenarioModel {
    config: RunConfig,
    building: Option<StateSpace>,
    custom: Vec<PartitionedSystem>,
}

impl ScenarioModel {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let building = match config.scenario {
            Scenario::Building => Some(models::building_surrogate(
                config.building_modes,
                config.building_peak,
                config.building_seed,
            )?),
            _ => None,
        };
        let custom = match config.scenario {
            Scenario::Custom => config
                .plant_files
                .iter()
                .map(|p| {
                    let sys = models::load_statespace(p)
                        .map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
                    PartitionedSystem::new(sys, config.plant_inputs.clone(), config.plant_outputs.clone())
                })
                .collect::<Result<_>>()?,
            _ => Vec::new(),
        };
        Ok(Self { config: config.clone(), building, custom })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Generalized plant at parameter value `rho`.
    pub fn plant(&self, rho: f64) -> Result<PartitionedSystem> {
        self.plant_with_output(rho, rho)
    }

    /// Generalized plant at `rho` with the performance output taken at `output_rho`.
    pub fn plant_with_output(&self, rho: f64, output_rho: f64) -> Result<PartitionedSystem> {
        match self.config.scenario {
            Scenario::Beam => {
                let spec = BeamSpec { n_elements: self.config.beam_elements, ..BeamSpec::steel(rho) };
                models::beam_generalized_plant(&models::timoshenko_beam(&spec)?)
            }
            Scenario::Building => {
                models::lah_generalized_plant(self.building.as_ref().expect("building model"), output_rho)
            }
            Scenario::Custom => {
                let j = self
                    .config
                    .grid
                    .iter()
                    .position(|g| *g == rho)
                    .ok_or_else(|| Error::Domain(format!("custom scenario has no plant at {rho}")))?;
                Ok(self.custom[j].clone())
            }
        }
    }

    /// Plant used by sweeps and Bode plots, honoring `sweep.output_rho`.
    pub fn measurement_plant(&self, rho: f64) -> Result<PartitionedSystem> {
        self.plant_with_output(rho, self.config.sweep.output_rho.unwrap_or(rho))
    }

    pub fn weight(&self, rho: f64) -> Result<StateSpace> {
        let w = models::make_weight(&self.config.weight, rho)?;
        let n_u = match self.config.scenario {
            Scenario::Custom => self.config.plant_inputs[1],
            _ => 1,
        };
        if n_u == 1 {
            return Ok(w);
        }
        crate::statespace::append_diag(&vec![w; n_u])
    }

    pub fn problem(&self) -> Result<SynthesisProblem> {
        let grid = self.config.grid.clone();
        let plants = grid.iter().map(|&r| self.plant(r)).collect::<Result<Vec<_>>>()?;
        let weights = grid.iter().map(|&r| self.weight(r)).collect::<Result<Vec<_>>>()?;
        SynthesisProblem::new(plants, grid, weights, self.config.structure)
    }

    pub fn nominal_index(&self) -> usize {
        self.config.grid.iter().position(|g| *g == self.config.nominal).unwrap_or(0)
    }
}

/// One row of a parameter sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub rho: f64,
    /// `None` when the closed loop is unstable or ill-posed.
    pub value: Option<f64>,
    pub stable: bool,
}

fn sweep_point(model: &ScenarioModel, kb: &ControllerBlock, rho: f64) -> Result<SweepRow> {
    let flagged = SweepRow { rho, value: None, stable: false };
    let k = match lft::eval_controller(kb, rho) {
        Ok(k) => k,
        Err(Error::IllPosed { .. }) => return Ok(flagged),
        Err(e) => return Err(e),
    };
    let plant = model.measurement_plant(rho)?;
    let cl = match lft::lower_lft_ss(&plant, &k) {
        Ok(cl) => cl,
        Err(Error::IllPosed { .. }) => return Ok(flagged),
        Err(e) => return Err(e),
    };
    if cl.order() > 0 && cl.spectral_abscissa()? >= 0.0 {
        return Ok(flagged);
    }
    let value = match model.config.sweep.metric {
        Metric::Hinf => norms::hinf_norm(&cl, norms::DEFAULT_REL_TOL)?.value,
        Metric::H2 => norms::h2_norm(&cl)?,
    };
    Ok(SweepRow { rho, value: Some(value), stable: true })
}

/// Performance-channel metric of the controller family over the sweep.
pub fn sweep(model: &ScenarioModel, kb: &ControllerBlock) -> Result<Vec<SweepRow>> {
    model
        .config
        .sweep_points()
        .into_par_iter()
        .map(|rho| sweep_point(model, kb, rho))
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("rho,metric_value,closed_loop_stable\n");
    for r in rows {
        let v = r.value.map(csv_float).unwrap_or_default();
        s.push_str(&format!("{},{},{}\n", csv_float(r.rho), v, u8::from(r.stable)));
    }
    s
}

/// Frequency grid of a Bode plot: log-spaced points plus the open-loop peak.
pub fn bode_frequencies(config: &BodeConfig, open_loop: &StateSpace) -> Result<Vec<f64>> {
    let mut w = norms::log_grid(config.omega_min, config.omega_max, config.n_points);
    if open_loop.order() > 0 && open_loop.is_stable()? {
        let peak = norms::hinf_norm(open_loop, norms::DEFAULT_REL_TOL)?.peak_omega;
        if peak.is_finite() && peak > 0.0 && !w.contains(&peak) {
            w.push(peak);
            w.sort_by(f64::total_cmp);
        }
    }
    Ok(w)
}

/// Bode magnitude table: open loop at the first requested value, then the
/// closed loop at each requested value.
pub fn bode_table(model: &ScenarioModel, kb: &ControllerBlock, rhos: &[f64]) -> Result<String> {
    if rhos.is_empty() {
        return Err(Error::Domain("bode needs at least one parameter value".into()));
    }
    let open = model.measurement_plant(rhos[0])?.channel(0, 0)?;
    let omegas = bode_frequencies(&model.config.bode, &open)?;
    let mut columns: Vec<Vec<Option<f64>>> = vec![magnitudes(&open, &omegas)?];
    let closed: Vec<Vec<Option<f64>>> = rhos
        .par_iter()
        .map(|&rho| -> Result<Vec<Option<f64>>> {
            let k = match lft::eval_controller(kb, rho) {
                Ok(k) => k,
                Err(Error::IllPosed { .. }) => return Ok(vec![None; omegas.len()]),
                Err(e) => return Err(e),
            };
            match lft::lower_lft_ss(&model.measurement_plant(rho)?, &k) {
                Ok(cl) => magnitudes(&cl, &omegas),
                Err(Error::IllPosed { .. }) => Ok(vec![None; omegas.len()]),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    columns.extend(closed);

    let mut s = String::from("omega,open_loop");
    for r in rhos {
        s.push_str(&format!(",closed_loop_rho={r}"));
    }
    s.push('\n');
    for (i, w) in omegas.iter().enumerate() {
        s.push_str(&csv_float(*w));
        for c in &columns {
            s.push(',');
            if let Some(v) = c[i] {
                s.push_str(&csv_float(v));
            }
        }
        s.push('\n');
    }
    Ok(s)
}

fn magnitudes(sys: &StateSpace, omegas: &[f64]) -> Result<Vec<Option<f64>>> {
    let ev = FreqEvaluator::new(sys)?;
    Ok(omegas
        .iter()
        .map(|&w| ev.eval(w).ok().map(|g| crate::matops::max_singular_value_complex(&g)))
        .collect())
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| csv_float(*x)).collect::<Vec<_>>().join(",")
}

/// Human-readable `key = value` summary of a synthesis run.
pub fn summary_text(result: &SynthesisResult, nominal: Option<&SynthesisResult>, wall_ms: f64) -> String {
    let mut s = String::new();
    s.push_str(&format!("status = {}\n", result.status.as_str()));
    s.push_str(&format!("gamma = {}\n", csv_float(result.gamma)));
    s.push_str(&format!(
        "performance_gamma = {}\n",
        csv_float(result.performance_norms.iter().cloned().fold(0.0, f64::max))
    ));
    s.push_str(&format!("initial_objective = {}\n", csv_float(result.initial_objective)));
    s.push_str(&format!("per_point_norms = {}\n", join(&result.per_point_norms)));
    s.push_str(&format!("performance_norms = {}\n", join(&result.performance_norms)));
    s.push_str(&format!("weight_norms = {}\n", join(&result.weight_norms)));
    s.push_str(&format!("free_parameters = {}\n", result.controller.free_params().len()));
    s.push_str(&format!("iterations = {}\n", result.trace.last().map(|t| t.iter).unwrap_or(0)));
    if let Some(n) = nominal {
        s.push_str(&format!("nominal_gamma = {}\n", csv_float(n.gamma)));
    }
    s.push_str(&format!("wall_ms = {}\n", csv_float(wall_ms)));
    s
}

/// Exit code for a synthesis status.
pub fn exit_code(status: Status) -> i32 {
    match status {
        Status::Converged => 0,
        Status::IterationLimit => EXIT_ITERATION_LIMIT,
        Status::StabilizationFailed => EXIT_STABILIZATION_FAILED,
    }
}

/// Run a synthesis from a configuration file and write its outputs.
pub fn cmd_synth(config_path: &Path) -> Result<(SynthesisResult, i32)> {
    let clock = Instant::now();
    let config = RunConfig::load(config_path)?;
    let model = ScenarioModel::new(&config)?;
    let problem = model.problem()?;
    let (result, nominal) = match synth::init_from_nominal(&problem, model.nominal_index(), &config.options) {
        Ok((kb, nominal)) => (synth::optimize(&problem, &kb, &config.options)?, Some(nominal)),
        Err(Error::StabilizationFailed(_)) => {
            let r = synth::optimize(&problem, &problem.zero_controller(), &config.options)?;
            (r, None)
        }
        Err(e) => return Err(e),
    };
    write_atomic(&config.out_controller, result.controller.to_text().as_bytes())?;
    write_atomic(&config.out_trace, synth::trace_csv(&result.trace).as_bytes())?;
    if let (Some(path), Some(n)) = (&config.out_nominal, &nominal) {
        let embedded = synth::embed_nominal(&problem, &n.controller)?;
        write_atomic(path, embedded.to_text().as_bytes())?;
    }
    let summary = summary_text(&result, nominal.as_ref(), clock.elapsed().as_secs_f64() * 1e3);
    write_atomic(&config.out_summary, summary.as_bytes())?;
    let code = exit_code(result.status);
    Ok((result, code))
}

pub fn load_controller(path: &Path) -> Result<ControllerBlock> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    ControllerBlock::from_text(&text)
}

fn check_controller(model: &ScenarioModel, kb: &ControllerBlock) -> Result<()> {
    let p = model.plant(model.config.grid[0])?;
    let d = kb.dims();
    if d.n_u != p.input_partition()[1] || d.n_y != p.output_partition()[1] {
        return Err(Error::Dimension(format!(
            "controller maps {} measurements to {} controls, plant has {} and {}",
            d.n_y,
            d.n_u,
            p.output_partition()[1],
            p.input_partition()[1]
        )));
    }
    Ok(())
}

pub fn cmd_eval(controller: &Path, config_path: &Path, out: &Path) -> Result<Vec<SweepRow>> {
    let config = RunConfig::load(config_path)?;
    let kb = load_controller(controller)?;
    let model = ScenarioModel::new(&config)?;
    check_controller(&model, &kb)?;
    let rows = sweep(&model, &kb)?;
    write_atomic(out, sweep_csv(&rows).as_bytes())?;
    Ok(rows)
}

pub fn cmd_bode(controller: &Path, config_path: &Path, rhos: &[f64], out: &Path) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let kb = load_controller(controller)?;
    let model = ScenarioModel::new(&config)?;
    check_controller(&model, &kb)?;
    write_atomic(out, bode_table(&model, &kb, rhos)?.as_bytes())
}

/// Generated open-loop model for `model gen`.
pub fn generate_model(scenario: &str, param: Option<f64>, n_elements: usize, n_modes: usize, seed: u64) -> Result<StateSpace> {
    match scenario {
        "beam" => {
            let spec = BeamSpec { n_elements, ..BeamSpec::steel(param.unwrap_or(15.0)) };
            models::timoshenko_beam(&spec)
        }
        "building" => models::building_surrogate(n_modes, param.unwrap_or(5.2), seed),
        other => Err(Error::Domain(format!("unknown scenario `{other}` (expected beam or building)"))),
    }
}

pub fn cmd_model_gen(
    scenario: &str,
    param: Option<f64>,
    n_elements: usize,
    n_modes: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let sys = generate_model(scenario, param, n_elements, n_modes, seed)?;
    models::save_statespace(out, &sys)
}

/// Configure the global worker pool from the environment.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::Domain(format!("{THREADS_ENV} must be a thread count, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Domain(e.to_string()))
}
