//! Plant generators for the beam and building case studies, weighting
//! filters, and generalized-plant assembly.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matops;
use crate::norms;
use crate::statespace::{PartitionedSystem, StateSpace};

/// Material and cross-section of a prismatic beam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamMaterial {
    /// Young's modulus (Pa).
    pub youngs_modulus: f64,
    /// Shear modulus (Pa).
    pub shear_modulus: f64,
    /// Density (kg/m³).
    pub density: f64,
    /// Rectangular section width (m).
    pub width: f64,
    /// Rectangular section height (m).
    pub height: f64,
    /// Timoshenko shear correction factor.
    pub shear_factor: f64,
}

impl BeamMaterial {
    /// Steel, 0.05 m x 0.05 m section.
    pub fn steel() -> Self {
        Self {
            youngs_modulus: 210e9,
            shear_modulus: 81e9,
            density: 7850.0,
            width: 0.05,
            height: 0.05,
            shear_factor: 5.0 / 6.0,
        }
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn second_moment(&self) -> f64 {
        self.width * self.height.powi(3) / 12.0
    }
}

/// Rayleigh damping `C = alpha_m M + beta_k K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayleighDamping {
    pub alpha_m: f64,
    pub beta_k: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamSpec {
    /// Beam length (m); the model parameter.
    pub length: f64,
    pub n_elements: usize,
    pub material: BeamMaterial,
    pub damping: RayleighDamping,
}

impl BeamSpec {
    /// Default steel beam with 15 elements (60 states).
    pub fn steel(length: f64) -> Self {
        Self {
            length,
            n_elements: 15,
            material: BeamMaterial::steel(),
            damping: RayleighDamping { alpha_m: 1e-3, beta_k: 1e-4 },
        }
    }

    fn validate(&self) -> Result<()> {
        let m = &self.material;
        let positive = [
            ("length", self.length),
            ("Young's modulus", m.youngs_modulus),
            ("shear modulus", m.shear_modulus),
            ("density", m.density),
            ("width", m.width),
            ("height", m.height),
            ("shear factor", m.shear_factor),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("beam {name} must be positive, got {v}")));
            }
        }
        if self.n_elements < 2 {
            return Err(Error::Domain("beam needs at least 2 elements".into()));
        }
        let d = &self.damping;
        if !(d.alpha_m >= 0.0 && d.beta_k >= 0.0) || d.alpha_m + d.beta_k == 0.0 {
            return Err(Error::Domain("Rayleigh damping coefficients must be nonnegative and not both zero".into()));
        }
        Ok(())
    }

    /// Static tip compliance of a Timoshenko cantilever, `L³/(3EI) + L/(κGA)`.
    pub fn analytic_tip_compliance(&self) -> f64 {
        let m = &self.material;
        let l = self.length;
        l.powi(3) / (3.0 * m.youngs_modulus * m.second_moment()) + l / (m.shear_factor * m.shear_modulus * m.area())
    }
}

/// Assembled mass and stiffness of the clamped beam, free DOFs only.
/// DOFs per free node are `[w, θ]`; the tip transverse DOF is the
/// second-to-last one.
pub fn beam_mass_stiffness(spec: &BeamSpec) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    spec.validate()?;
    let m = &spec.material;
    let ne = spec.n_elements;
    let le = spec.length / ne as f64;
    let (e, g, rho) = (m.youngs_modulus, m.shear_modulus, m.density);
    let (area, inertia, kappa) = (m.area(), m.second_moment(), m.shear_factor);

    // interdependent-interpolation Timoshenko element
    let phi = 12.0 * e * inertia / (kappa * g * area * le * le);
    let kf = e * inertia / ((1.0 + phi) * le.powi(3));
    let ke = DMatrix::from_row_slice(
        4,
        4,
        &[
            12.0, 6.0 * le, -12.0, 6.0 * le,
            6.0 * le, (4.0 + phi) * le * le, -6.0 * le, (2.0 - phi) * le * le,
            -12.0, -6.0 * le, 12.0, -6.0 * le,
            6.0 * le, (2.0 - phi) * le * le, -6.0 * le, (4.0 + phi) * le * le,
        ],
    ) * kf;
    // consistent translational mass plus rotary inertia
    let mt = DMatrix::from_row_slice(
        4,
        4,
        &[
            156.0, 22.0 * le, 54.0, -13.0 * le,
            22.0 * le, 4.0 * le * le, 13.0 * le, -3.0 * le * le,
            54.0, 13.0 * le, 156.0, -22.0 * le,
            -13.0 * le, -3.0 * le * le, -22.0 * le, 4.0 * le * le,
        ],
    ) * (rho * area * le / 420.0);
    let mr = DMatrix::from_row_slice(
        4,
        4,
        &[
            36.0, 3.0 * le, -36.0, 3.0 * le,
            3.0 * le, 4.0 * le * le, -3.0 * le, -le * le,
            -36.0, -3.0 * le, 36.0, -3.0 * le,
            3.0 * le, -le * le, -3.0 * le, 4.0 * le * le,
        ],
    ) * (rho * inertia / (30.0 * le));
    let me = mt + mr;

    let ndof = 2 * (ne + 1);
    let mut mass = DMatrix::zeros(ndof, ndof);
    let mut stiff = DMatrix::zeros(ndof, ndof);
    for el in 0..ne {
        let o = 2 * el;
        for i in 0..4 {
            for j in 0..4 {
                mass[(o + i, o + j)] += me[(i, j)];
                stiff[(o + i, o + j)] += ke[(i, j)];
            }
        }
    }
    // clamp node 0
    let free = ndof - 2;
    Ok((
        mass.view((2, 2), (free, free)).into_owned(),
        stiff.view((2, 2), (free, free)).into_owned(),
    ))
}

/// Undamped natural frequencies (rad/s), ascending.
pub fn beam_natural_frequencies(spec: &BeamSpec) -> Result<Vec<f64>> {
    let (mass, stiff) = beam_mass_stiffness(spec)?;
    // symmetric reduction with the Cholesky factor of M
    let chol = mass
        .cholesky()
        .ok_or_else(|| Error::Numerical("beam mass matrix is not positive definite".into()))?;
    let l = chol.l();
    let linv = matops::solve_linear(&l, &DMatrix::identity(l.nrows(), l.nrows()))?;
    let sym = &linv * stiff * linv.transpose();
    let sym = (&sym + sym.transpose()) * 0.5;
    let mut w: Vec<f64> = sym.symmetric_eigenvalues().iter().map(|v| v.max(0.0).sqrt()).collect();
    w.sort_by(f64::total_cmp);
    Ok(w)
}

/// Clamped Timoshenko beam, force at the free tip to tip displacement.
///
/// States are `[q; M q̇]` (displacements and momenta) so that the input and
/// output matrices do not depend on the length; only `A(L)` does.
/// Order is `4 n_elements`.
pub fn timoshenko_beam(spec: &BeamSpec) -> Result<StateSpace> {
    let (mass, stiff) = beam_mass_stiffness(spec)?;
    let nd = mass.nrows();
    let minv = matops::solve_linear(&mass, &DMatrix::identity(nd, nd))?;
    let damp = &mass * spec.damping.alpha_m + &stiff * spec.damping.beta_k;
    let n = 2 * nd;
    let mut a = DMatrix::zeros(n, n);
    a.view_mut((0, nd), (nd, nd)).copy_from(&minv);
    a.view_mut((nd, 0), (nd, nd)).copy_from(&(-&stiff));
    a.view_mut((nd, nd), (nd, nd)).copy_from(&(-(damp * &minv)));
    let tip = nd - 2;
    let mut b = DMatrix::zeros(n, 1);
    b[(nd + tip, 0)] = 1.0;
    let mut c = DMatrix::zeros(1, n);
    c[(0, tip)] = 1.0;
    StateSpace::new(a, b, c, DMatrix::zeros(1, 1))
}

fn require_siso(sys: &StateSpace, what: &str) -> Result<()> {
    if sys.n_inputs() != 1 || sys.n_outputs() != 1 {
        return Err(Error::Dimension(format!(
            "{what} must be single-input single-output, got {}x{}",
            sys.n_outputs(),
            sys.n_inputs()
        )));
    }
    Ok(())
}

/// `ẋ = A x + B w + B u, z = C x, y = C x`.
pub fn beam_generalized_plant(beam: &StateSpace) -> Result<PartitionedSystem> {
    require_siso(beam, "beam model")?;
    output_weighted_plant(beam, 1.0)
}

/// `ẋ = A x + B w + B u, z = ρ C x, y = C x`.
pub fn lah_generalized_plant(building: &StateSpace, rho: f64) -> Result<PartitionedSystem> {
    require_siso(building, "building model")?;
    output_weighted_plant(building, rho)
}

fn output_weighted_plant(sys: &StateSpace, z_gain: f64) -> Result<PartitionedSystem> {
    let n = sys.order();
    let mut b = DMatrix::zeros(n, 2);
    b.column_mut(0).copy_from(&sys.b().column(0));
    b.column_mut(1).copy_from(&sys.b().column(0));
    let mut c = DMatrix::zeros(2, n);
    c.row_mut(0).copy_from(&(sys.c().row(0) * z_gain));
    c.row_mut(1).copy_from(&sys.c().row(0));
    let full = StateSpace::new(sys.a().clone(), b, c, DMatrix::zeros(2, 2))?;
    PartitionedSystem::new(full, vec![1, 1], vec![1, 1])
}

/// Lightly damped modal model of a flexible building, normalized to unit H∞ norm.
///
/// The first mode sits at `peak_omega` and dominates; the others are spread
/// over higher frequencies with smaller residues. Seeded and deterministic.
pub fn building_surrogate(n_modes: usize, peak_omega: f64, seed: u64) -> Result<StateSpace> {
    if n_modes < 2 {
        return Err(Error::Domain("building surrogate needs at least 2 modes".into()));
    }
    if !(peak_omega.is_finite() && peak_omega > 0.0) {
        return Err(Error::Domain(format!("invalid peak frequency {peak_omega}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 * n_modes;
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, 1);
    let mut c = DMatrix::zeros(1, n);
    let zeta0 = 0.02;
    // peak of r/(s² + 2ζωs + ω²) is r/(2ζω²); the first mode sets the reference
    let ref_peak = 1.0 / (2.0 * zeta0 * peak_omega * peak_omega);
    let mut omega = peak_omega;
    for k in 0..n_modes {
        let zeta = if k == 0 { zeta0 } else { rng.random_range(0.02..0.05) };
        if k > 0 {
            omega *= rng.random_range(1.6..2.4);
        }
        let rel_peak = if k == 0 { 1.0 } else { rng.random_range(0.05..0.3) / k as f64 };
        let residue = rel_peak * ref_peak * 2.0 * zeta * omega * omega;
        let i = 2 * k;
        a[(i, i + 1)] = omega;
        a[(i + 1, i)] = -omega;
        a[(i + 1, i + 1)] = -2.0 * zeta * omega;
        // scaled states [ω q, q̇] keep entries of the same magnitude
        b[(i + 1, 0)] = residue.sqrt();
        c[(0, i)] = residue.sqrt() / omega;
    }
    let raw = StateSpace::new(a, b, c, DMatrix::zeros(1, 1))?;
    let norm = norms::hinf_norm(&raw, 1e-10)?.value;
    Ok(raw.scale_outputs(1.0 / norm))
}

/// Frequency weight shapes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightSpec {
    Static { gain: f64 },
    /// `gain / (s/corner + 1)`.
    FirstOrderLag { gain: f64, corner: f64 },
    /// `(1/ρ)(s²/(α w_m)² + 2 m s/w_m + α⁻²) / (s²/w_m² + 2 m s/w_m + 1)`;
    /// the `1/ρ` factor applies when `rho_scale` is set.
    BiquadNotch { w_m: f64, alpha: f64, m: f64, rho_scale: bool },
}

/// State-space realization of a weight at parameter value `rho`.
pub fn make_weight(spec: &WeightSpec, rho: f64) -> Result<StateSpace> {
    let scalar = |v: f64| DMatrix::from_element(1, 1, v);
    match *spec {
        WeightSpec::Static { gain } => StateSpace::static_gain(scalar(gain)),
        WeightSpec::FirstOrderLag { gain, corner } => {
            if !(corner.is_finite() && corner > 0.0) {
                return Err(Error::Domain(format!("lag corner must be positive, got {corner}")));
            }
            StateSpace::new(scalar(-corner), scalar(1.0), scalar(gain * corner), scalar(0.0))
        }
        WeightSpec::BiquadNotch { w_m, alpha, m, rho_scale } => {
            if !(w_m > 0.0 && alpha > 0.0 && m > 0.0) || !(w_m.is_finite() && alpha.is_finite() && m.is_finite()) {
                return Err(Error::Domain("biquad weight needs positive w_m, alpha and m".into()));
            }
            let scale = if rho_scale {
                if !(rho.is_finite() && rho > 0.0) {
                    return Err(Error::Domain(format!("biquad weight needs rho > 0, got {rho}")));
                }
                1.0 / rho
            } else {
                1.0
            };
            // num = den/α² + 2 m w_m (1 - α⁻²) s after scaling by w_m²
            let inv_a2 = 1.0 / (alpha * alpha);
            let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -w_m * w_m, -2.0 * m * w_m]);
            let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
            let c = DMatrix::from_row_slice(1, 2, &[0.0, scale * 2.0 * m * w_m * (1.0 - inv_a2)]);
            StateSpace::new(a, b, c, scalar(scale * inv_a2))
        }
    }
}

/// Read a state-space text file.
pub fn load_statespace(path: impl AsRef<Path>) -> Result<StateSpace> {
    let text = std::fs::read_to_string(path.as_ref())?;
    StateSpace::from_text(&text)
}

/// Write a state-space text file through a temporary file and a rename.
pub fn save_statespace(path: impl AsRef<Path>, sys: &StateSpace) -> Result<()> {
    crate::io::write_atomic(path.as_ref(), sys.to_text().as_bytes())
}
