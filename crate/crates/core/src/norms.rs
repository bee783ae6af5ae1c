//! H∞ and H2 norms of stable continuous-time systems.
//!
//! The H∞ norm uses the Hamiltonian characterization: `γ > σ_max(D)` is a
//! singular value of `H(iω)` exactly when `iω` is an eigenvalue of
//!
//! ```text
//!   [ A + B R⁻¹ DᵀC          B R⁻¹ Bᵀ          ]
//!   [ -Cᵀ(I + D R⁻¹ Dᵀ)C     -(A + B R⁻¹ DᵀC)ᵀ ],   R = γ²I - DᵀD.
//! ```
//!
//! Starting from a frequency-grid lower bound, the level `γ` is raised to
//! the best value found at the midpoints between consecutive crossing
//! frequencies until `(1 + rel_tol)·γ` has no crossing left.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::matops;
use crate::statespace::{FreqEvaluator, StateSpace};

pub const DEFAULT_REL_TOL: f64 = 1e-6;
const IMAG_AXIS_TOL: f64 = 1e-8;
const MAX_LEVEL_ITERS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormResult {
    pub value: f64,
    /// Frequency (rad/s) where `value` is attained; `f64::INFINITY` for a feedthrough peak.
    pub peak_omega: f64,
    /// `true` when the value is certified by the Hamiltonian test.
    pub certified: bool,
    /// Stability of the system the bound was computed on.
    pub stable: bool,
}

/// Frequencies used for grid lower bounds: 200 log-spaced points across
/// `[1e-3, 1e3]` times the spectral radius of `a`, DC, and the imaginary
/// parts of all eigenvalues of `a`.
pub fn default_grid(sys: &StateSpace) -> Result<Vec<f64>> {
    let eig = matops::eigenvalues(sys.a())?;
    Ok(grid_from_eigenvalues(&eig, 200))
}

pub(crate) fn grid_from_eigenvalues(eig: &[Complex64], points: usize) -> Vec<f64> {
    let radius = eig.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let scale = if radius > 0.0 { radius } else { 1.0 };
    let mut grid = log_grid(1e-3 * scale, 1e3 * scale, points);
    grid.push(0.0);
    grid.extend(eig.iter().filter(|z| z.im >= 0.0).map(|z| z.im.abs()));
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// `points` logarithmically spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (l0, l1) = (lo.log10(), hi.log10());
            (0..points)
                .map(|k| 10f64.powf(l0 + (l1 - l0) * k as f64 / (points - 1) as f64))
                .collect()
        }
    }
}

/// Largest `σ_max(H(iω))` over the given frequencies (not certified).
///
/// Unstable systems are accepted; the result is then only the supremum
/// estimate along the imaginary axis, with `stable = false`. A frequency
/// sitting on a pole gives an infinite value.
pub fn hinf_lower_bound_grid(sys: &StateSpace, omegas: &[f64]) -> Result<NormResult> {
    if omegas.is_empty() {
        return Err(Error::Domain("empty frequency grid".into()));
    }
    let stable = sys.is_stable()?;
    let ev = FreqEvaluator::new(sys)?;
    let mut best = NormResult { value: 0.0, peak_omega: omegas[0], certified: false, stable };
    for &w in omegas {
        let v = match ev.eval(w) {
            Ok(g) => matops::max_singular_value_complex(&g),
            Err(Error::Singular(_)) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        if v > best.value {
            best.value = v;
            best.peak_omega = w;
        }
    }
    Ok(best)
}

/// Certified H∞ norm of a stable system, to relative accuracy `rel_tol`.
pub fn hinf_norm(sys: &StateSpace, rel_tol: f64) -> Result<NormResult> {
    if !(rel_tol > 0.0 && rel_tol <= 0.1) {
        return Err(Error::Domain(format!("rel_tol {rel_tol} outside (0, 0.1]")));
    }
    let d_gain = matops::max_singular_value(sys.d());
    if sys.order() == 0 || sys.b().amax() == 0.0 || sys.c().amax() == 0.0 {
        if sys.order() > 0 {
            let abscissa = sys.spectral_abscissa()?;
            if abscissa >= 0.0 {
                return Err(Error::Unstable(abscissa));
            }
        }
        return Ok(NormResult { value: d_gain, peak_omega: f64::INFINITY, certified: true, stable: true });
    }
    let eig = matops::eigenvalues(sys.a())?;
    let abscissa = eig.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    if abscissa >= 0.0 {
        return Err(Error::Unstable(abscissa));
    }
    let grid = grid_from_eigenvalues(&eig, 200);
    let lb = hinf_lower_bound_grid(sys, &grid)?;
    let ev = FreqEvaluator::new(sys)?;
    let sigma = |w: f64| -> Result<f64> { Ok(matops::max_singular_value_complex(&ev.eval(w)?)) };

    let (mut best, mut peak) = (lb.value, lb.peak_omega);
    if d_gain >= best {
        best = d_gain;
        peak = f64::INFINITY;
    }
    for _ in 0..MAX_LEVEL_ITERS {
        let mut gamma = best * (1.0 + rel_tol);
        let crossings = loop {
            match imaginary_crossings(sys, gamma) {
                Ok(c) => break c,
                // R = γ²I - DᵀD too close to singular: nudge the level upward
                Err(Error::Singular(_)) => gamma *= 1.0 + 1e-3 * rel_tol,
                Err(e) => return Err(e),
            }
        };
        if crossings.is_empty() {
            return Ok(NormResult { value: best, peak_omega: peak, certified: true, stable: true });
        }
        let mut candidates: Vec<f64> = crossings.windows(2).map(|p| 0.5 * (p[0] + p[1])).collect();
        candidates.extend_from_slice(&crossings);
        let mut improved = false;
        for w in candidates {
            let v = sigma(w)?;
            if v > best * (1.0 + 1e-12) {
                best = v;
                peak = w;
                improved = true;
            }
        }
        if !improved {
            // crossings come from eigenvalue noise; refine around them locally
            let refined = refine_peaks(&sigma, &crossings, best)?;
            if refined.0 > best * (1.0 + 1e-12) {
                best = refined.0;
                peak = refined.1;
            } else {
                return Ok(NormResult { value: best, peak_omega: peak, certified: false, stable: true });
            }
        }
    }
    Err(Error::Numerical("H-infinity level iteration did not converge".into()))
}

/// Golden-section search of `σ_max` in a small bracket around each frequency.
fn refine_peaks<F>(sigma: &F, freqs: &[f64], floor: f64) -> Result<(f64, f64)>
where
    F: Fn(f64) -> Result<f64>,
{
    let mut best = (floor, f64::NAN);
    for &w0 in freqs {
        let (mut lo, mut hi) = ((w0 * 0.99).max(0.0), w0 * 1.01 + 1e-12);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..60 {
            let a = hi - g * (hi - lo);
            let b = lo + g * (hi - lo);
            if sigma(a)? > sigma(b)? {
                hi = b;
            } else {
                lo = a;
            }
        }
        let w = 0.5 * (lo + hi);
        let v = sigma(w)?;
        if v > best.0 {
            best = (v, w);
        }
    }
    Ok(best)
}

/// Nonnegative frequencies where some singular value of `H(iω)` equals `gamma`, sorted.
fn imaginary_crossings(sys: &StateSpace, gamma: f64) -> Result<Vec<f64>> {
    let h = hamiltonian(sys, gamma)?;
    let eig = matops::eigenvalues(&h)?;
    let mut out: Vec<f64> = eig
        .iter()
        .filter(|z| z.im >= 0.0 && z.re.abs() <= IMAG_AXIS_TOL * (1.0 + z.norm()))
        .map(|z| z.im)
        .collect();
    out.sort_by(f64::total_cmp);
    out.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
    Ok(out)
}

fn hamiltonian(sys: &StateSpace, gamma: f64) -> Result<DMatrix<f64>> {
    let (a, b, c, d) = (sys.a(), sys.b(), sys.c(), sys.d());
    let n = sys.order();
    let m = sys.n_inputs();
    let p = sys.n_outputs();
    let r = DMatrix::<f64>::identity(m, m) * (gamma * gamma) - d.transpose() * d;
    // [R⁻¹ Dᵀ C | R⁻¹ Bᵀ] in one solve
    let mut rhs = DMatrix::zeros(m, 2 * n);
    rhs.view_mut((0, 0), (m, n)).copy_from(&(d.transpose() * c));
    rhs.view_mut((0, n), (m, n)).copy_from(&b.transpose());
    let (sol, cond) = matops::solve_with_condition(&r, &rhs)?;
    if cond > 1e12 {
        return Err(Error::Singular(cond));
    }
    let rdc = sol.columns(0, n);
    let rbt = sol.columns(n, n);
    let a_bar = a + b * rdc;
    let dr = d * matops::solve_linear(&r, &d.transpose())?;
    let q = c.transpose() * (DMatrix::<f64>::identity(p, p) + dr) * c;
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(&a_bar);
    h.view_mut((0, n), (n, n)).copy_from(&(b * rbt));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a_bar.transpose()));
    Ok(h)
}

/// H2 norm `sqrt(trace(C P Cᵀ))`, with `A P + P Aᵀ + B Bᵀ = 0`.
pub fn h2_norm(sys: &StateSpace) -> Result<f64> {
    if sys.d().amax() > 1e-12 {
        return Err(Error::Domain("H2 norm requires a strictly proper system".into()));
    }
    if sys.order() == 0 {
        return Ok(0.0);
    }
    let abscissa = sys.spectral_abscissa()?;
    if abscissa >= 0.0 {
        return Err(Error::Unstable(abscissa));
    }
    let bbt = sys.b() * sys.b().transpose();
    let p = matops::solve_lyapunov(sys.a(), &bbt)?;
    let tr = (sys.c() * p * sys.c().transpose()).trace();
    Ok(tr.max(0.0).sqrt())
}
