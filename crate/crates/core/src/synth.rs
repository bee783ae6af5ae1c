//! Worst-case H∞ synthesis of a structured parametric controller over a
//! finite parameter grid.
//!
//! For every grid value `ρ_j` the controller `K★(s, ρ_j)` closes the plant
//! `T(s, ρ_j)`, and the weighted controller `W_K(s) K★(s, ρ_j)` is stacked
//! alongside as a separate channel. The objective is the largest H∞ norm
//! over those `2M` channels, minimized over the free entries of `K`.
//!
//! The minimization is local. Search directions come from a smoothed
//! maximum over frequency samples (log-sum-exp with a shrinking
//! temperature) with central-difference gradients and BFGS updates; a step
//! is accepted only when the Hamiltonian-certified objective does not
//! increase and every closed loop stays strictly stable. Peaks found by the
//! certification and missed by the frequency samples are added to them.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lft::{self, Block, BlockDims, ControllerBlock, EntryKind};
use crate::matops;
use crate::norms;
use crate::statespace::{self, FreqEvaluator, PartitionedSystem, StateSpace};

/// Admissible controller set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerClass {
    /// Every block of `K` is tunable.
    FullHinf,
    /// `D_yu`, `D_zu` and `D_yw` are pinned to zero: strictly proper controller.
    StrictlyProperH2,
}

/// How the controller matrices depend on the parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dependency {
    Rational,
    /// `D_zw = 0`, making the realization affine in `ρ`.
    Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AkShape {
    Full,
    Tridiagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Structure {
    pub n_k: usize,
    pub n_delta: usize,
    pub class: ControllerClass,
    pub dependency: Dependency,
    pub a_k_shape: AkShape,
}

impl Structure {
    pub fn new(n_k: usize, n_delta: usize) -> Self {
        Self {
            n_k,
            n_delta,
            class: ControllerClass::FullHinf,
            dependency: Dependency::Rational,
            a_k_shape: AkShape::Full,
        }
    }

    pub fn affine(mut self) -> Self {
        self.dependency = Dependency::Affine;
        self
    }

    pub fn strictly_proper(mut self) -> Self {
        self.class = ControllerClass::StrictlyProperH2;
        self
    }

    pub fn tridiagonal(mut self) -> Self {
        self.a_k_shape = AkShape::Tridiagonal;
        self
    }
}

/// Free/zero mask implied by a structure.
pub fn build_mask(dims: BlockDims, structure: &Structure) -> DMatrix<EntryKind> {
    let mut mask = DMatrix::from_element(dims.rows(), dims.cols(), EntryKind::Free);
    let mut pin = |block: Block| {
        let (r, c, nr, nc) = block.region(&dims);
        mask.view_mut((r, c), (nr, nc)).fill(EntryKind::Zero);
    };
    if structure.class == ControllerClass::StrictlyProperH2 {
        pin(Block::Dyu);
        pin(Block::Dzu);
        pin(Block::Dyw);
    }
    if structure.dependency == Dependency::Affine {
        pin(Block::Dzw);
    }
    if structure.a_k_shape == AkShape::Tridiagonal {
        for i in 0..dims.n_k {
            for j in 0..dims.n_k {
                if i.abs_diff(j) > 1 {
                    mask[(i, j)] = EntryKind::Zero;
                }
            }
        }
    }
    mask
}

/// Plants on a parameter grid together with the controller weight at each point.
#[derive(Debug, Clone)]
pub struct SynthesisProblem {
    plants: Vec<PartitionedSystem>,
    grid: Vec<f64>,
    weights: Vec<StateSpace>,
    structure: Structure,
}

impl SynthesisProblem {
    /// `weights[j]` multiplies the controller output at grid point `j`.
    pub fn new(
        plants: Vec<PartitionedSystem>,
        grid: Vec<f64>,
        weights: Vec<StateSpace>,
        structure: Structure,
    ) -> Result<Self> {
        if plants.is_empty() {
            return Err(Error::Domain("synthesis needs at least one grid point".into()));
        }
        if plants.len() != grid.len() || weights.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "{} plants, {} grid values and {} weights",
                plants.len(),
                grid.len(),
                weights.len()
            )));
        }
        if grid.iter().any(|r| !r.is_finite()) {
            return Err(Error::Domain("grid values must be finite".into()));
        }
        for (i, a) in grid.iter().enumerate() {
            if grid[..i].contains(a) {
                return Err(Error::Domain(format!("grid value {a} is repeated")));
            }
        }
        let first = &plants[0];
        if first.input_partition().len() != 2 || first.output_partition().len() != 2 {
            return Err(Error::Dimension("plants must be partitioned as [w; u] -> [z; y]".into()));
        }
        for p in &plants[1..] {
            if p.input_partition() != first.input_partition() || p.output_partition() != first.output_partition() {
                return Err(Error::Dimension("plants have different channel dimensions".into()));
            }
        }
        let n_u = first.input_partition()[1];
        for w in &weights {
            if w.n_inputs() != n_u {
                return Err(Error::Dimension(format!(
                    "controller weight has {} inputs, controller has {n_u} outputs",
                    w.n_inputs()
                )));
            }
        }
        Ok(Self { plants, grid, weights, structure })
    }

    pub fn with_common_weight(
        plants: Vec<PartitionedSystem>,
        grid: Vec<f64>,
        weight: StateSpace,
        structure: Structure,
    ) -> Result<Self> {
        let weights = vec![weight; plants.len()];
        Self::new(plants, grid, weights, structure)
    }

    pub fn plants(&self) -> &[PartitionedSystem] {
        &self.plants
    }
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }
    pub fn weights(&self) -> &[StateSpace] {
        &self.weights
    }
    pub fn structure(&self) -> &Structure {
        &self.structure
    }

    pub fn dims(&self) -> BlockDims {
        let p = &self.plants[0];
        BlockDims {
            n_k: self.structure.n_k,
            n_delta: self.structure.n_delta,
            n_u: p.input_partition()[1],
            n_y: p.output_partition()[1],
        }
    }

    pub fn mask(&self) -> DMatrix<EntryKind> {
        build_mask(self.dims(), &self.structure)
    }

    /// All-zero controller block carrying the structure mask.
    pub fn zero_controller(&self) -> ControllerBlock {
        ControllerBlock::zeros(self.dims())
            .with_mask(self.mask())
            .expect("mask matches block dimensions")
    }

    /// Single-point, non-parametric problem at grid index `index`.
    pub fn nominal(&self, index: usize) -> Result<Self> {
        if index >= self.grid.len() {
            return Err(Error::Domain(format!("nominal index {index} outside grid of {}", self.grid.len())));
        }
        let mut structure = self.structure;
        structure.n_delta = 0;
        Self::new(
            vec![self.plants[index].clone()],
            vec![self.grid[index]],
            vec![self.weights[index].clone()],
            structure,
        )
    }

    fn check_block(&self, kb: &ControllerBlock) -> Result<()> {
        if kb.dims() != self.dims() {
            return Err(Error::Dimension(format!(
                "controller block {:?} does not match problem {:?}",
                kb.dims(),
                self.dims()
            )));
        }
        Ok(())
    }
}

/// Exact objective at one controller.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    /// Worst channel norm, or the instability penalty.
    pub value: f64,
    /// `max(performance[j], weight[j])` per grid point.
    pub per_point: Vec<f64>,
    /// Norm of the closed loop `w -> z` per grid point.
    pub performance: Vec<f64>,
    /// Norm of `W_K K★(s, ρ_j)` per grid point.
    pub weight: Vec<f64>,
    /// Peak frequency per channel: `[perf_0, weight_0, perf_1, ...]`; 0 at unstable points.
    pub peaks: Vec<f64>,
    pub stable: bool,
    /// Largest real part over all closed-loop and controller poles.
    pub max_abscissa: f64,
}

/// Multiplier applied to unstable iterates: `penalty_scale · (1 + max_abscissa)`.
pub const UNSTABLE_PENALTY: f64 = 1e6;

struct PointEval {
    perf: Option<norms::NormResult>,
    weight: Option<norms::NormResult>,
    abscissa: f64,
}

fn system_abscissa(sys: &StateSpace) -> Result<f64> {
    if sys.order() == 0 {
        Ok(f64::NEG_INFINITY)
    } else {
        sys.spectral_abscissa()
    }
}

/// Closed loop `w -> z` and weighted controller `W_K K★` at grid point `j`.
pub fn grid_point_channels(
    problem: &SynthesisProblem,
    kb: &ControllerBlock,
    j: usize,
) -> Result<(StateSpace, StateSpace)> {
    let k = lft::eval_controller(kb, problem.grid[j]).map_err(|e| tag_index(e, j))?;
    let cl = lft::lower_lft_ss(&problem.plants[j], &k).map_err(|e| tag_index(e, j))?;
    let wk = statespace::series(&k, &problem.weights[j])?;
    Ok((cl, wk))
}

fn tag_index(e: Error, j: usize) -> Error {
    match e {
        Error::IllPosed { .. } => Error::IllPosed { index: Some(j) },
        other => other,
    }
}

fn eval_point(problem: &SynthesisProblem, kb: &ControllerBlock, j: usize, rel_tol: f64) -> Result<PointEval> {
    let (cl, wk) = grid_point_channels(problem, kb, j)?;
    let abscissa = system_abscissa(&cl)?.max(system_abscissa(&wk)?);
    if abscissa >= 0.0 {
        return Ok(PointEval { perf: None, weight: None, abscissa });
    }
    Ok(PointEval {
        perf: Some(norms::hinf_norm(&cl, rel_tol)?),
        weight: Some(norms::hinf_norm(&wk, rel_tol)?),
        abscissa,
    })
}

/// Evaluate the stacked objective at `kb` with certified norms.
pub fn objective(problem: &SynthesisProblem, kb: &ControllerBlock) -> Result<ObjectiveValue> {
    evaluate(problem, kb, norms::DEFAULT_REL_TOL, true, 1.0)
}

/// Evaluate the objective with an explicit tolerance, optionally in parallel
/// over grid points. Both modes give identical results.
pub fn evaluate(
    problem: &SynthesisProblem,
    kb: &ControllerBlock,
    rel_tol: f64,
    parallel: bool,
    penalty_scale: f64,
) -> Result<ObjectiveValue> {
    problem.check_block(kb)?;
    let m = problem.grid.len();
    let points: Vec<PointEval> = if parallel {
        (0..m)
            .into_par_iter()
            .map(|j| eval_point(problem, kb, j, rel_tol))
            .collect::<Result<_>>()?
    } else {
        (0..m).map(|j| eval_point(problem, kb, j, rel_tol)).collect::<Result<_>>()?
    };
    let max_abscissa = points.iter().map(|p| p.abscissa).fold(f64::NEG_INFINITY, f64::max);
    let stable = points.iter().all(|p| p.perf.is_some());
    let penalty = UNSTABLE_PENALTY * penalty_scale * (1.0 + max_abscissa.max(0.0));
    let mut performance = Vec::with_capacity(m);
    let mut weight = Vec::with_capacity(m);
    let mut peaks = Vec::with_capacity(2 * m);
    for p in &points {
        match (&p.perf, &p.weight) {
            (Some(a), Some(b)) => {
                performance.push(a.value);
                weight.push(b.value);
                peaks.push(a.peak_omega);
                peaks.push(b.peak_omega);
            }
            _ => {
                performance.push(penalty);
                weight.push(penalty);
                peaks.push(0.0);
                peaks.push(0.0);
            }
        }
    }
    let per_point: Vec<f64> = performance.iter().zip(&weight).map(|(a, b)| a.max(*b)).collect();
    let value = if stable { per_point.iter().cloned().fold(0.0, f64::max) } else { penalty };
    Ok(ObjectiveValue { value, per_point, performance, weight, peaks, stable, max_abscissa })
}

/// Largest real part over closed-loop and controller poles across the grid.
pub fn max_abscissa(problem: &SynthesisProblem, kb: &ControllerBlock) -> Result<f64> {
    problem.check_block(kb)?;
    let mut worst = f64::NEG_INFINITY;
    for j in 0..problem.grid.len() {
        let (cl, wk) = grid_point_channels(problem, kb, j)?;
        worst = worst.max(system_abscissa(&cl)?).max(system_abscissa(&wk)?);
    }
    Ok(worst)
}

/// Smoothed spectral abscissa `T log Σ exp(Re λ / T)` over all closed-loop
/// and controller poles, plus the true abscissa.
fn smoothed_abscissa(problem: &SynthesisProblem, kb: &ControllerBlock, temp: f64) -> Result<(f64, f64)> {
    let mut re: Vec<f64> = Vec::new();
    for j in 0..problem.grid.len() {
        let (cl, wk) = grid_point_channels(problem, kb, j)?;
        for sys in [&cl, &wk] {
            if sys.order() > 0 {
                re.extend(matops::eigenvalues(sys.a())?.iter().map(|z| z.re));
            }
        }
    }
    if re.is_empty() {
        return Ok((f64::NEG_INFINITY, f64::NEG_INFINITY));
    }
    let top = re.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = re.iter().map(|r| ((r - top) / temp).exp()).sum();
    Ok((top + temp * sum.ln(), top))
}

const STABILITY_MARGIN: f64 = 1e-6;

/// Move the free entries of `kb0` until every closed loop and every
/// controller `K★(s, ρ_j)` is strictly stable.
///
/// Minimizes a smoothed maximum of pole real parts by gradient steps with
/// central differences, then falls back to a compass search. `budget`
/// bounds the number of iterations of each stage.
pub fn stabilize(problem: &SynthesisProblem, kb0: &ControllerBlock, budget: usize) -> Result<ControllerBlock> {
    problem.check_block(kb0)?;
    let alpha0 = max_abscissa(problem, kb0)?;
    if alpha0 < 0.0 {
        return Ok(kb0.clone());
    }
    let mut kb = kb0.clone();
    let mut theta = kb.free_params();
    if theta.is_empty() {
        return Err(Error::StabilizationFailed(alpha0));
    }
    let target = -STABILITY_MARGIN;
    let mut best_alpha = alpha0;
    let eval = |th: &[f64], temp: f64| -> Option<(f64, f64)> {
        let k = kb0.with_free_params(th).ok()?;
        smoothed_abscissa(problem, &k, temp).ok()
    };

    let mut temp = 0.1 * (1.0 + alpha0.abs());
    let mut step = 0.1 * (1.0 + norm2(&theta));
    for _ in 0..budget {
        let Some((f0, a0)) = eval(&theta, temp) else { break };
        best_alpha = best_alpha.min(a0);
        if a0 <= target {
            kb.set_free_params(&theta)?;
            return Ok(kb);
        }
        let grad = central_gradient(&theta, |th| eval(th, temp).map(|v| v.0));
        let gn = norm2(&grad);
        if !(gn > 0.0 && gn.is_finite()) {
            break;
        }
        let mut moved = false;
        let mut t = step / gn;
        for _ in 0..40 {
            let trial: Vec<f64> = theta.iter().zip(&grad).map(|(x, g)| x - t * g).collect();
            if let Some((ft, at)) = eval(&trial, temp) {
                if ft < f0 - 1e-4 * t * gn * gn {
                    theta = trial;
                    best_alpha = best_alpha.min(at);
                    step = (2.0 * t * gn).min(1e3 * (1.0 + norm2(&theta)));
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            if temp > 1e-8 * (1.0 + a0.abs()) {
                temp *= 0.1;
                continue;
            }
            break;
        }
    }

    // compass search on the true abscissa
    let abscissa_at = |th: &[f64]| -> f64 {
        kb0.with_free_params(th)
            .ok()
            .and_then(|k| max_abscissa(problem, &k).ok())
            .unwrap_or(f64::INFINITY)
    };
    let mut current = abscissa_at(&theta);
    let mut delta = 0.1 * (1.0 + norm2(&theta) / (theta.len() as f64).sqrt());
    for _ in 0..budget {
        if current <= target {
            kb.set_free_params(&theta)?;
            return Ok(kb);
        }
        let mut improved = false;
        'dirs: for i in 0..theta.len() {
            for sign in [1.0, -1.0] {
                let mut trial = theta.clone();
                trial[i] += sign * delta;
                let v = abscissa_at(&trial);
                if v < current {
                    theta = trial;
                    current = v;
                    improved = true;
                    break 'dirs;
                }
            }
        }
        if !improved {
            delta *= 0.5;
            if delta < 1e-12 {
                break;
            }
        }
    }
    best_alpha = best_alpha.min(current);
    if current <= target {
        kb.set_free_params(&theta)?;
        return Ok(kb);
    }
    Err(Error::StabilizationFailed(best_alpha))
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn central_gradient<F>(theta: &[f64], f: F) -> Vec<f64>
where
    F: Fn(&[f64]) -> Option<f64>,
{
    let mut g = vec![0.0; theta.len()];
    let mut x = theta.to_vec();
    let f0 = f(theta);
    for i in 0..theta.len() {
        let h = 1e-6 * (1.0 + theta[i].abs());
        x[i] = theta[i] + h;
        let fp = f(&x);
        x[i] = theta[i] - h;
        let fm = f(&x);
        x[i] = theta[i];
        g[i] = match (fp, fm, f0) {
            (Some(a), Some(b), _) if a.is_finite() && b.is_finite() => (a - b) / (2.0 * h),
            (Some(a), _, Some(c)) if a.is_finite() && c.is_finite() => (a - c) / h,
            (_, Some(b), Some(c)) if b.is_finite() && c.is_finite() => (c - b) / h,
            _ => 0.0,
        };
    }
    g
}

/// Optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub max_iter: usize,
    /// Relative decrease over 10 accepted iterations below which the run has converged.
    pub tol: f64,
    /// Number of starting points: the initial block plus `restarts - 1` perturbations.
    pub restarts: usize,
    pub seed: u64,
    /// Iteration budget of each stabilization stage.
    pub stabilize_budget: usize,
    /// First optimize only the parameter-coupled blocks with the nominal blocks frozen.
    pub freeze_nominal_first: bool,
    /// Evaluate grid points concurrently.
    pub parallel: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-4,
            restarts: 3,
            seed: 0,
            stabilize_budget: 300,
            freeze_nominal_first: false,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    IterationLimit,
    StabilizationFailed,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Converged => "converged",
            Status::IterationLimit => "iteration-limit",
            Status::StabilizationFailed => "stabilization-failed",
        }
    }
}

/// One accepted iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iter: usize,
    pub objective: f64,
    pub max_abscissa: f64,
    pub step_norm: f64,
    pub wall_ms: f64,
}

/// CSV with header `iter,objective,max_abscissa,step_norm,wall_ms`.
pub fn trace_csv(trace: &[TraceEntry]) -> String {
    let mut s = String::from("iter,objective,max_abscissa,step_norm,wall_ms\n");
    for t in trace {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            t.iter,
            crate::csv_float(t.objective),
            crate::csv_float(t.max_abscissa),
            crate::csv_float(t.step_norm),
            crate::csv_float(t.wall_ms)
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub controller: ControllerBlock,
    /// Worst channel norm, including the weighted-controller channels.
    pub gamma: f64,
    pub per_point_norms: Vec<f64>,
    /// Closed-loop `w -> z` norms alone.
    pub performance_norms: Vec<f64>,
    /// `W_K K★` norms alone.
    pub weight_norms: Vec<f64>,
    /// Certified objective of the starting block.
    pub initial_objective: f64,
    pub trace: Vec<TraceEntry>,
    pub status: Status,
}

/// Objective samples on per-grid-point frequency lists, with the plant and
/// weight responses cached.
struct Surrogate<'a> {
    problem: &'a SynthesisProblem,
    points: Vec<SampledPoint>,
}

struct SampledPoint {
    omegas: Vec<f64>,
    plant: Vec<DMatrix<Complex64>>,
    weight: Vec<DMatrix<Complex64>>,
    plant_eval: FreqEvaluator,
    weight_eval: FreqEvaluator,
}

const MAX_SAMPLES_PER_POINT: usize = 4000;

impl<'a> Surrogate<'a> {
    fn new(problem: &'a SynthesisProblem) -> Result<Self> {
        let mut points = Vec::with_capacity(problem.grid.len());
        for j in 0..problem.grid.len() {
            let sys = problem.plants[j].sys();
            let mut eig = matops::eigenvalues(sys.a())?;
            eig.extend(matops::eigenvalues(problem.weights[j].a())?);
            let omegas = norms::grid_from_eigenvalues(&eig, 200);
            let mut pt = SampledPoint {
                omegas: Vec::new(),
                plant: Vec::new(),
                weight: Vec::new(),
                plant_eval: FreqEvaluator::new(sys)?,
                weight_eval: FreqEvaluator::new(&problem.weights[j])?,
            };
            for w in omegas {
                pt.insert(w)?;
            }
            points.push(pt);
        }
        Ok(Self { problem, points })
    }

    /// Add a frequency to point `j`; false when already sampled or on a plant pole.
    fn add(&mut self, j: usize, w: f64) -> Result<bool> {
        if !w.is_finite() || w < 0.0 {
            return Ok(false);
        }
        let pt = &mut self.points[j];
        if pt.omegas.len() >= MAX_SAMPLES_PER_POINT {
            return Ok(false);
        }
        if pt.omegas.iter().any(|x| (x - w).abs() <= 1e-5 * (1e-3 + w)) {
            return Ok(false);
        }
        pt.insert(w)
    }

    /// Sampled channel magnitudes at `kb`, or `None` if the controller is
    /// ill-posed somewhere on the grid.
    fn samples(&self, kb: &ControllerBlock) -> Option<Vec<f64>> {
        let mut out = Vec::new();
        for (j, pt) in self.points.iter().enumerate() {
            let k = lft::eval_controller(kb, self.problem.grid[j]).ok()?;
            let kev = FreqEvaluator::new(&k).ok()?;
            for (idx, &w) in pt.omegas.iter().enumerate() {
                let kw = match kev.eval(w) {
                    Ok(v) => v,
                    Err(_) => {
                        out.push(f64::INFINITY);
                        continue;
                    }
                };
                let cl = match lft::lower_lft_matrix(&pt.plant[idx], &kw) {
                    Ok(v) => matops::max_singular_value_complex(&v),
                    Err(_) => f64::INFINITY,
                };
                out.push(cl);
                out.push(matops::max_singular_value_complex(&(&pt.weight[idx] * &kw)));
            }
        }
        Some(out)
    }

    /// Smoothed maximum and plain maximum of the samples.
    fn smoothed(&self, kb: &ControllerBlock, temp: f64) -> Option<(f64, f64)> {
        let v = self.samples(kb)?;
        let top = v.iter().cloned().fold(0.0, f64::max);
        if !top.is_finite() {
            return None;
        }
        let sum: f64 = v.iter().map(|x| ((x - top) / temp).exp()).sum();
        Some((top + temp * sum.ln(), top))
    }
}

impl SampledPoint {
    fn insert(&mut self, w: f64) -> Result<bool> {
        let p = match self.plant_eval.eval(w) {
            Ok(p) => p,
            Err(Error::Singular(_)) => return Ok(false),
            Err(e) => return Err(e),
        };
        let wt = match self.weight_eval.eval(w) {
            Ok(p) => p,
            Err(Error::Singular(_)) => return Ok(false),
            Err(e) => return Err(e),
        };
        self.omegas.push(w);
        self.plant.push(p);
        self.weight.push(wt);
        Ok(true)
    }
}

struct LocalRun {
    kb: ControllerBlock,
    value: f64,
    trace: Vec<TraceEntry>,
    status: Status,
}

const INTERNAL_REL_TOL: f64 = 1e-4;

fn local_descent(
    problem: &SynthesisProblem,
    start: &ControllerBlock,
    opts: &SynthOptions,
    clock: &Instant,
) -> Result<LocalRun> {
    let exact = |kb: &ControllerBlock| -> Result<Option<ObjectiveValue>> {
        match evaluate(problem, kb, INTERNAL_REL_TOL, opts.parallel, 1.0) {
            Ok(v) if v.stable => Ok(Some(v)),
            Ok(_) | Err(Error::IllPosed { .. }) | Err(Error::Numerical(_)) | Err(Error::Singular(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let Some(mut current) = exact(start)? else {
        return Err(Error::StabilizationFailed(max_abscissa(problem, start).unwrap_or(f64::INFINITY)));
    };
    let mut kb = start.clone();
    let mut theta = kb.free_params();
    let mut trace = vec![TraceEntry {
        iter: 0,
        objective: current.value,
        max_abscissa: current.max_abscissa,
        step_norm: 0.0,
        wall_ms: clock.elapsed().as_secs_f64() * 1e3,
    }];
    if theta.is_empty() {
        return Ok(LocalRun { kb, value: current.value, trace, status: Status::Converged });
    }

    let mut sur = Surrogate::new(problem)?;
    for (c, &w) in current.peaks.iter().enumerate() {
        sur.add(c / 2, w)?;
    }

    let n = theta.len();
    let mut tau = 1e-2;
    let mut hinv: Option<DMatrix<f64>> = None;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut status = Status::IterationLimit;
    let mut iter = 0;
    let mut refinements = 0;
    while iter < opts.max_iter {
        let temp = tau * current.value.max(f64::MIN_POSITIVE);
        let f = |sur: &Surrogate, th: &[f64]| sur.smoothed(&kb.with_free_params(th).ok()?, temp);
        let Some((f0, _)) = f(&sur, &theta) else { break };
        let grad = central_gradient(&theta, |th| f(&sur, th).map(|v| v.0));
        let g = DVector::from_vec(grad.clone());

        if let (Some(h), Some((th_prev, g_prev))) = (hinv.as_mut(), prev.as_ref()) {
            let s = DVector::from_iterator(n, theta.iter().zip(th_prev).map(|(a, b)| a - b));
            let y = DVector::from_iterator(n, grad.iter().zip(g_prev).map(|(a, b)| a - b));
            let sy = s.dot(&y);
            if sy > 1e-12 * s.norm() * y.norm() {
                let rho = 1.0 / sy;
                let hy = &*h * &y;
                let yhy = y.dot(&hy);
                *h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            }
        }
        let h = hinv.get_or_insert_with(|| {
            let gn = g.norm().max(f64::MIN_POSITIVE);
            DMatrix::identity(n, n) * (0.1 * (1.0 + norm2(&theta)) / gn)
        });
        let mut d = -(&*h * &g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            let gn = g.norm().max(f64::MIN_POSITIVE);
            *h = DMatrix::identity(n, n) * (0.1 * (1.0 + norm2(&theta)) / gn);
            d = -(&*h * &g);
            slope = g.dot(&d);
        }

        let mut t = 1.0;
        let mut accepted: Option<(Vec<f64>, ObjectiveValue)> = None;
        let mut grid_changed = false;
        if slope < 0.0 {
            for _ in 0..40 {
                let trial: Vec<f64> = theta.iter().zip(d.iter()).map(|(x, di)| x + t * di).collect();
                if let Some((ft, top)) = f(&sur, &trial) {
                    if ft <= f0 + 1e-4 * t * slope && top <= current.value {
                        let kt = kb.with_free_params(&trial)?;
                        if let Some(ev) = exact(&kt)? {
                            if ev.value <= current.value {
                                accepted = Some((trial, ev));
                                break;
                            }
                            // certified peaks above the sampled maximum were missed by the grid
                            let mut added = false;
                            for (c, &w) in ev.peaks.iter().enumerate() {
                                let v = if c % 2 == 0 { ev.performance[c / 2] } else { ev.weight[c / 2] };
                                if v > top {
                                    added |= sur.add(c / 2, w)?;
                                }
                            }
                            if added {
                                grid_changed = true;
                                break;
                            }
                        }
                    }
                }
                t *= 0.5;
            }
        }

        match accepted {
            Some((trial, ev)) => {
                iter += 1;
                refinements = 0;
                let step = norm2(&trial.iter().zip(&theta).map(|(a, b)| a - b).collect::<Vec<_>>());
                prev = Some((theta.clone(), grad));
                theta = trial;
                kb.set_free_params(&theta)?;
                current = ev;
                trace.push(TraceEntry {
                    iter,
                    objective: current.value,
                    max_abscissa: current.max_abscissa,
                    step_norm: step,
                    wall_ms: clock.elapsed().as_secs_f64() * 1e3,
                });
                let k = trace.len();
                if k > 10 {
                    let old = trace[k - 11].objective;
                    if (old - current.value) <= opts.tol * old {
                        status = Status::Converged;
                        break;
                    }
                }
            }
            None if grid_changed && refinements < 20 => {
                refinements += 1;
                hinv = None;
                prev = None;
            }
            None => {
                refinements = 0;
                hinv = None;
                prev = None;
                if tau > 1e-5 {
                    tau *= 0.1;
                } else {
                    status = Status::Converged;
                    break;
                }
            }
        }
    }
    Ok(LocalRun { kb, value: current.value, trace, status })
}

fn free_param_scale(kb: &ControllerBlock) -> f64 {
    let v: Vec<f64> = kb.free_params().into_iter().filter(|x| *x != 0.0).collect();
    if v.is_empty() {
        1.0
    } else {
        (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
    }
}

/// Gaussian perturbation of the free entries with standard deviation
/// `fraction · s_i`, where `s_i` is the entry's magnitude or, for zero
/// entries, the RMS of the nonzero free entries. Entries of
/// parameter-coupled blocks enter in products with `ρ`, so their zero-entry
/// scale is divided by `sqrt(max |ρ|)`.
fn perturb(kb: &ControllerBlock, grid: &[f64], fraction: f64, rng: &mut ChaCha8Rng, only_zero_delta: bool) -> ControllerBlock {
    let dims = kb.dims();
    let rms = free_param_scale(kb);
    let rho_scale = grid.iter().map(|r| r.abs()).fold(0.0, f64::max).max(1.0).sqrt();
    let mut k = kb.matrix().clone();
    for block in Block::ALL {
        let (r, c, nr, nc) = block.region(&dims);
        for i in r..r + nr {
            for j in c..c + nc {
                if kb.mask()[(i, j)] != EntryKind::Free {
                    continue;
                }
                let v = k[(i, j)];
                if only_zero_delta && !(block.is_delta_coupled() && v == 0.0) {
                    continue;
                }
                let s = if v != 0.0 {
                    v.abs()
                } else if block.is_delta_coupled() {
                    rms / rho_scale
                } else {
                    rms
                };
                let z: f64 = StandardNormal.sample(rng);
                k[(i, j)] = v + fraction * s * z;
            }
        }
    }
    ControllerBlock::new(dims, k, kb.mask().clone()).expect("perturbation keeps the mask")
}

/// Minimize the stacked worst-case objective over the free entries of `kb_init`.
///
/// Runs one local descent from `kb_init` (stabilized first if needed, and
/// with exactly-zero parameter-coupled entries nudged off the saddle they
/// form) and `restarts - 1` more from Gaussian perturbations of it, keeping
/// the best. The returned objective never exceeds that of `kb_init` when
/// `kb_init` is stabilizing.
pub fn optimize(problem: &SynthesisProblem, kb_init: &ControllerBlock, opts: &SynthOptions) -> Result<SynthesisResult> {
    problem.check_block(kb_init)?;
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let init_eval = evaluate(problem, kb_init, norms::DEFAULT_REL_TOL, opts.parallel, 1.0);
    let init_stable = matches!(&init_eval, Ok(v) if v.stable);
    let base = if init_stable {
        kb_init.clone()
    } else {
        match stabilize(problem, kb_init, opts.stabilize_budget) {
            Ok(kb) => kb,
            Err(Error::StabilizationFailed(alpha)) => {
                return Ok(failed_result(problem, kb_init, alpha, &clock));
            }
            Err(e) => return Err(e),
        }
    };
    let base_eval = evaluate(problem, &base, norms::DEFAULT_REL_TOL, opts.parallel, 1.0)?;

    let mut starts = Vec::new();
    let has_zero_delta = base.free_indices().iter().any(|&i| {
        let (r, c) = (i % base.matrix().nrows(), i / base.matrix().nrows());
        base.matrix()[(r, c)] == 0.0 && block_of(&base.dims(), r, c).is_delta_coupled()
    });
    starts.push(if has_zero_delta { perturb(&base, &problem.grid, 1e-3, &mut rng, true) } else { base.clone() });
    for _ in 1..opts.restarts.max(1) {
        starts.push(perturb(&base, &problem.grid, 0.1, &mut rng, false));
    }

    let mut best: Option<LocalRun> = None;
    for start in starts {
        let start = match evaluate(problem, &start, INTERNAL_REL_TOL, opts.parallel, 1.0) {
            Ok(v) if v.stable => start,
            _ => match stabilize(problem, &start, opts.stabilize_budget) {
                Ok(kb) => kb,
                Err(Error::StabilizationFailed(_)) | Err(Error::IllPosed { .. }) => continue,
                Err(e) => return Err(e),
            },
        };
        let run = if opts.freeze_nominal_first {
            let frozen = freeze_nominal_blocks(&start);
            let first = local_descent(problem, &frozen, opts, &clock)?;
            let restored = start.with_free_params(&{
                let mut s = start.clone();
                s.set_block_values_from(&first.kb);
                s.free_params()
            })?;
            let mut second = local_descent(problem, &restored, opts, &clock)?;
            let mut trace = first.trace;
            let offset = trace.last().map(|t| t.iter).unwrap_or(0);
            trace.extend(second.trace.drain(1..).map(|mut t| {
                t.iter += offset;
                t
            }));
            LocalRun { trace, ..second }
        } else {
            local_descent(problem, &start, opts, &clock)?
        };
        let better = match &best {
            None => true,
            Some(b) => {
                run.value < b.value
                    || (run.value == b.value && norm2(&run.kb.free_params()) < norm2(&b.kb.free_params()))
            }
        };
        if better {
            best = Some(run);
        }
    }

    let Some(best) = best else {
        return Ok(finish(problem, base.clone(), base_eval.clone(), base_eval.value, Vec::new(), Status::Converged, &clock));
    };
    let final_eval = evaluate(problem, &best.kb, norms::DEFAULT_REL_TOL, opts.parallel, 1.0)?;
    if !final_eval.stable || final_eval.value > base_eval.value {
        let trace = vec![TraceEntry {
            iter: 0,
            objective: base_eval.value,
            max_abscissa: base_eval.max_abscissa,
            step_norm: 0.0,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        }];
        return Ok(finish(problem, base, base_eval.clone(), base_eval.value, trace, best.status, &clock));
    }
    Ok(finish(problem, best.kb, final_eval, base_eval.value, best.trace, best.status, &clock))
}

fn block_of(dims: &BlockDims, r: usize, c: usize) -> Block {
    Block::ALL
        .into_iter()
        .find(|b| {
            let (r0, c0, nr, nc) = b.region(dims);
            r >= r0 && r < r0 + nr && c >= c0 && c < c0 + nc
        })
        .expect("entry lies in some block")
}

fn freeze_nominal_blocks(kb: &ControllerBlock) -> ControllerBlock {
    let dims = kb.dims();
    let mut mask = kb.mask().clone();
    for block in [Block::Ak, Block::Bu, Block::Cy, Block::Dyu] {
        let (r, c, nr, nc) = block.region(&dims);
        for i in r..r + nr {
            for j in c..c + nc {
                if mask[(i, j)] == EntryKind::Free {
                    mask[(i, j)] = EntryKind::Frozen;
                }
            }
        }
    }
    kb.clone().with_mask(mask).expect("same shape")
}

impl ControllerBlock {
    /// Copy every entry value of `other` (same dimensions), keeping this mask.
    fn set_block_values_from(&mut self, other: &ControllerBlock) {
        for block in Block::ALL {
            let _ = self.set_block(block, &other.block(block));
        }
    }
}

fn finish(
    problem: &SynthesisProblem,
    kb: ControllerBlock,
    ev: ObjectiveValue,
    initial: f64,
    mut trace: Vec<TraceEntry>,
    status: Status,
    clock: &Instant,
) -> SynthesisResult {
    if trace.is_empty() {
        trace.push(TraceEntry {
            iter: 0,
            objective: ev.value,
            max_abscissa: ev.max_abscissa,
            step_norm: 0.0,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        });
    }
    let _ = problem;
    SynthesisResult {
        controller: kb,
        gamma: ev.value,
        per_point_norms: ev.per_point,
        performance_norms: ev.performance,
        weight_norms: ev.weight,
        initial_objective: initial,
        trace,
        status,
    }
}

fn failed_result(problem: &SynthesisProblem, kb: &ControllerBlock, alpha: f64, clock: &Instant) -> SynthesisResult {
    let value = UNSTABLE_PENALTY * (1.0 + alpha.max(0.0));
    let m = problem.grid.len();
    SynthesisResult {
        controller: kb.clone(),
        gamma: value,
        per_point_norms: vec![value; m],
        performance_norms: vec![value; m],
        weight_norms: vec![value; m],
        initial_objective: value,
        trace: vec![TraceEntry {
            iter: 0,
            objective: value,
            max_abscissa: alpha,
            step_norm: 0.0,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        }],
        status: Status::StabilizationFailed,
    }
}

/// Seeded stable starting controller for a problem.
///
/// Controller poles are placed at the frequency `ω_c` of the largest
/// open-loop gain of the control channel `u -> y` at the first grid point,
/// and the input/output blocks are random with a loop gain around 0.1.
pub fn heuristic_init(problem: &SynthesisProblem, seed: u64) -> Result<ControllerBlock> {
    let dims = problem.dims();
    let plant = &problem.plants[0];
    let uy = plant.channel(1, 1)?;
    let (omega_c, gain) = if uy.order() == 0 {
        (1.0, matops::max_singular_value(uy.d()))
    } else {
        let grid = norms::default_grid(&uy)?;
        let r = norms::hinf_lower_bound_grid(&uy, &grid)?;
        (r.peak_omega.max(1e-3), r.value)
    };
    let omega_c = if omega_c.is_finite() { omega_c } else { 1.0 };
    let gain = if gain > 0.0 && gain.is_finite() { gain } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut kb = problem.zero_controller();
    let nk = dims.n_k;
    let io_scale = (0.1 * omega_c / gain / nk.max(1) as f64).sqrt();
    let mut ak = DMatrix::zeros(nk, nk);
    for i in 0..nk {
        ak[(i, i)] = -omega_c * (1.0 + 0.1 * normal().abs());
        if i + 1 < nk {
            ak[(i, i + 1)] = 0.1 * omega_c * normal();
        }
    }
    kb.set_block(Block::Ak, &ak)?;
    kb.set_block(Block::Bu, &DMatrix::from_fn(nk, dims.n_y, |_, _| io_scale * normal()))?;
    kb.set_block(Block::Cy, &DMatrix::from_fn(dims.n_u, nk, |_, _| io_scale * normal()))?;
    if nk == 0 {
        kb.set_block(Block::Dyu, &DMatrix::from_fn(dims.n_u, dims.n_y, |_, _| 0.1 / gain * normal()))?;
    }
    Ok(kb)
}

/// Nominal-point initialization: synthesize a non-parametric controller at
/// grid index `nominal_index`, then embed it with every parameter-coupled
/// block set to zero.
pub fn init_from_nominal(
    problem: &SynthesisProblem,
    nominal_index: usize,
    opts: &SynthOptions,
) -> Result<(ControllerBlock, SynthesisResult)> {
    let reduced = problem.nominal(nominal_index)?;
    let start = heuristic_init(&reduced, opts.seed)?;
    let nominal = optimize(&reduced, &start, opts)?;
    if nominal.status == Status::StabilizationFailed {
        return Err(Error::StabilizationFailed(
            max_abscissa(&reduced, &nominal.controller).unwrap_or(f64::INFINITY),
        ));
    }
    let kb = embed_nominal(problem, &nominal.controller)?;
    Ok((kb, nominal))
}

/// Embed a non-parametric block into the parametric structure of `problem`.
pub fn embed_nominal(problem: &SynthesisProblem, nominal: &ControllerBlock) -> Result<ControllerBlock> {
    let mut kb = problem.zero_controller();
    let nd = nominal.dims();
    let d = problem.dims();
    if nd.n_k != d.n_k || nd.n_u != d.n_u || nd.n_y != d.n_y || nd.n_delta != 0 {
        return Err(Error::Dimension("nominal controller does not fit the parametric structure".into()));
    }
    for block in [Block::Ak, Block::Bu, Block::Cy, Block::Dyu] {
        kb.set_block(block, &nominal.block(block))?;
    }
    Ok(kb)
}

/// Full pipeline: nominal initialization followed by parametric optimization.
pub fn synthesize(problem: &SynthesisProblem, nominal_index: usize, opts: &SynthOptions) -> Result<SynthesisResult> {
    let kb = match init_from_nominal(problem, nominal_index, opts) {
        Ok((kb, _)) => kb,
        Err(Error::StabilizationFailed(alpha)) => {
            return Ok(failed_result(problem, &problem.zero_controller(), alpha, &Instant::now()));
        }
        Err(e) => return Err(e),
    };
    optimize(problem, &kb, opts)
}
