#![allow(dead_code)]

use lftsynth::lft::{BlockDims, ControllerBlock, EntryKind};
use lftsynth::statespace::{FreqEvaluator, StateSpace};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Random stable system whose poles keep a damping ratio of at least `min_damping`.
pub fn random_stable(rng: &mut ChaCha8Rng, n: usize, m: usize, p: usize, min_damping: f64) -> StateSpace {
    let mut a = DMatrix::zeros(n, n);
    let mut i = 0;
    while i < n {
        let mag = 10f64.powf(rng.random_range(-1.0..1.5));
        if i + 1 < n && rng.random_bool(0.6) {
            let zeta = rng.random_range(min_damping..0.9);
            let re = -zeta * mag;
            let im = mag * (1.0 - zeta * zeta).sqrt();
            a[(i, i)] = re;
            a[(i + 1, i + 1)] = re;
            a[(i, i + 1)] = im;
            a[(i + 1, i)] = -im;
            i += 2;
        } else {
            a[(i, i)] = -mag;
            i += 1;
        }
    }
    // mix the modal form with a well-conditioned similarity
    let t = DMatrix::identity(n, n) + random_matrix(rng, n, n) * 0.3;
    let tinv = t.clone().try_inverse().expect("near-identity similarity is invertible");
    let a = &t * a * tinv;
    let d = if rng.random_bool(0.5) { random_matrix(rng, p, m) * 0.5 } else { DMatrix::zeros(p, m) };
    StateSpace::new(a, random_matrix(rng, n, m), random_matrix(rng, p, n), d).unwrap()
}

fn sigma(ev: &FreqEvaluator, w: f64) -> f64 {
    ev.eval(w).map(|g| lftsynth::matops::max_singular_value_complex(&g)).unwrap_or(f64::INFINITY)
}

/// Dense-sweep H∞ estimate: 2000 log-spaced points plus the high-frequency
/// limit, then golden-section refinement around the best sample.
pub fn dense_sweep_hinf(sys: &StateSpace) -> f64 {
    let ev = FreqEvaluator::new(sys).unwrap();
    let eig = lftsynth::matops::eigenvalues(sys.a()).unwrap();
    let mags: Vec<f64> = eig.iter().map(|z| z.norm()).filter(|m| *m > 0.0).collect();
    let lo = mags.iter().cloned().fold(f64::INFINITY, f64::min).min(1.0) * 1e-3;
    let hi = mags.iter().cloned().fold(0.0, f64::max).max(1.0) * 1e3;
    let n = 2000;
    let mut omegas: Vec<f64> = (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect();
    omegas.insert(0, 0.0);
    let vals: Vec<f64> = omegas.iter().map(|&w| sigma(&ev, w)).collect();
    let (k, mut best) = vals
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
    let mut a = omegas[k.saturating_sub(1)];
    let mut b = omegas[(k + 1).min(omegas.len() - 1)];
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if sigma(&ev, c) > sigma(&ev, d) {
            b = d;
        } else {
            a = c;
        }
    }
    best = best.max(sigma(&ev, 0.5 * (a + b)));
    best.max(lftsynth::matops::max_singular_value(sys.d()))
}

/// Lyapunov solution `A X + X Aᵀ + Q = 0` from the Kronecker form.
pub fn kron_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let big = eye.kronecker(a) + a.kronecker(&eye);
    let rhs = -DMatrix::from_column_slice(n * n, 1, q.as_slice());
    let x = big.lu().solve(&rhs).expect("nonsingular Kronecker system");
    DMatrix::from_column_slice(n, n, x.as_slice())
}

/// Random all-free controller block.
pub fn random_block(rng: &mut ChaCha8Rng, dims: BlockDims, scale: f64) -> ControllerBlock {
    let k = random_matrix(rng, dims.rows(), dims.cols()) * scale;
    ControllerBlock::new(dims, k, DMatrix::from_element(dims.rows(), dims.cols(), EntryKind::Free)).unwrap()
}

pub fn complex(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|v| Complex64::new(v, 0.0))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
