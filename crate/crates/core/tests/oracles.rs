mod common;

use lftsynth::lft::{self, Block, BlockDims, EntryKind};
use lftsynth::matops;
use lftsynth::models;
use lftsynth::norms;
use lftsynth::statespace::{FreqEvaluator, PartitionedSystem, StateSpace};
use lftsynth::synth::{self, Structure, SynthOptions, SynthesisProblem};
use nalgebra::DMatrix;
use num_complex::Complex64;

#[test]
fn eigenvalues_recovered_from_constructed_matrix() {
    let mut rng = common::rng(11);
    let wanted = [
        Complex64::new(-0.5, 2.0),
        Complex64::new(-0.5, -2.0),
        Complex64::new(1.5, 0.0),
        Complex64::new(-3.0, 0.0),
        Complex64::new(0.25, 7.0),
        Complex64::new(0.25, -7.0),
    ];
    let mut block = DMatrix::zeros(6, 6);
    let mut i = 0;
    while i < 6 {
        let z = wanted[i];
        if z.im != 0.0 {
            block[(i, i)] = z.re;
            block[(i + 1, i + 1)] = z.re;
            block[(i, i + 1)] = z.im;
            block[(i + 1, i)] = -z.im;
            i += 2;
        } else {
            block[(i, i)] = z.re;
            i += 1;
        }
    }
    let v = DMatrix::identity(6, 6) + common::random_matrix(&mut rng, 6, 6) * 0.5;
    let a = &v * block * v.clone().try_inverse().unwrap();
    let got = matops::eigenvalues(&a).unwrap();
    for z in wanted {
        let d = got.iter().map(|g| (g - z).norm()).fold(f64::INFINITY, f64::min);
        assert!(d <= 1e-9 * z.norm(), "eigenvalue {z} missing, closest at {d:e}");
    }
}

#[test]
fn lyapunov_matches_kronecker_solve() {
    let mut rng = common::rng(5);
    for n in [1, 2, 3, 5, 8] {
        let g = common::random_stable(&mut rng, n, 2, 1, 0.05);
        let q = {
            let r = common::random_matrix(&mut rng, n, n);
            &r * r.transpose()
        };
        let x = matops::solve_lyapunov(g.a(), &q).unwrap();
        let oracle = common::kron_lyapunov(g.a(), &q);
        assert!((&x - &oracle).amax() <= 1e-9 * oracle.amax().max(1.0), "n = {n}");
    }
}

#[test]
fn hinf_matches_dense_sweep() {
    let mut rng = common::rng(21);
    for case in 0..12 {
        let n = 1 + case % 6;
        let (m, p) = if case % 3 == 0 { (2, 2) } else { (1, 1) };
        let g = common::random_stable(&mut rng, n, m, p, 0.05);
        let cert = norms::hinf_norm(&g, 1e-6).unwrap();
        let oracle = common::dense_sweep_hinf(&g);
        assert!(cert.certified);
        assert!((cert.value - oracle).abs() <= 1e-4 * oracle, "case {case}: {} vs {oracle}", cert.value);
    }
}

#[test]
fn h2_matches_frequency_integral() {
    // ‖G‖₂² = (1/π) ∫₀^∞ ‖G(iω)‖_F² dω, with ω = tan θ
    let mut rng = common::rng(8);
    for _ in 0..5 {
        let g = common::random_stable(&mut rng, 4, 1, 2, 0.2);
        let g = StateSpace::new(g.a().clone(), g.b().clone(), g.c().clone(), DMatrix::zeros(2, 1)).unwrap();
        let ev = FreqEvaluator::new(&g).unwrap();
        let n = 40_000;
        let h = std::f64::consts::FRAC_PI_2 / n as f64;
        let f = |theta: f64| -> f64 {
            if theta >= std::f64::consts::FRAC_PI_2 {
                return (g.c() * g.b()).norm_squared();
            }
            let w = theta.tan();
            let r = ev.eval(w).unwrap();
            r.iter().map(|z| z.norm_sqr()).sum::<f64>() / theta.cos().powi(2)
        };
        let mut sum = f(0.0) + f(std::f64::consts::FRAC_PI_2);
        for k in 1..n {
            sum += if k % 2 == 1 { 4.0 } else { 2.0 } * f(k as f64 * h);
        }
        let integral = sum * h / 3.0;
        let oracle = (integral / std::f64::consts::PI).sqrt();
        let got = norms::h2_norm(&g).unwrap();
        assert!((got - oracle).abs() <= 1e-6 * oracle, "{got} vs {oracle}");
    }
}

#[test]
fn tridiagonal_mask_count_matches_enumeration() {
    let dims = BlockDims { n_k: 5, n_delta: 1, n_u: 1, n_y: 1 };
    let mask = synth::build_mask(dims, &Structure::new(5, 1).tridiagonal());
    let free = mask.iter().filter(|e| **e == EntryKind::Free).count();
    let size: usize = 5 + 1 + 1;
    let mut expected = 0;
    for i in 0..size {
        for j in 0..size {
            let in_ak = i < 5 && j < 5;
            if !in_ak || i.abs_diff(j) <= 1 {
                expected += 1;
            }
        }
    }
    assert_eq!(free, expected);
    assert_eq!((0..5).flat_map(|i| (0..5).map(move |j| (i, j))).filter(|(i, j)| mask[(*i, *j)] == EntryKind::Free).count(), 13);
}

fn toy_plant(stiffness: f64) -> PartitionedSystem {
    // ẍ + 0.4 ẋ + k x = w + u, z = y = x
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -stiffness, -0.4]);
    let b = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]);
    let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
    let sys = StateSpace::new(a, b, c, DMatrix::zeros(2, 2)).unwrap();
    PartitionedSystem::new(sys, vec![1, 1], vec![1, 1]).unwrap()
}

#[test]
fn nominal_embedding_objective_is_max_of_nominal_closures() {
    let grid = vec![0.5, 1.0, 2.0];
    let plants: Vec<_> = grid.iter().map(|&k| toy_plant(k)).collect();
    let wk = models::make_weight(&models::WeightSpec::FirstOrderLag { gain: 0.1, corner: 100.0 }, 0.0).unwrap();
    let p = SynthesisProblem::with_common_weight(plants, grid.clone(), wk.clone(), Structure::new(1, 1)).unwrap();
    let opts = SynthOptions { max_iter: 50, restarts: 1, ..SynthOptions::default() };
    let (kb, nominal) = synth::init_from_nominal(&p, 1, &opts).unwrap();
    let k0 = lft::eval_controller(&nominal.controller, 0.0).unwrap();
    let mut expected: f64 = 0.0;
    for (j, &rho) in grid.iter().enumerate() {
        assert_eq!(lft::eval_controller(&kb, rho).unwrap(), k0);
        let cl = lft::lower_lft_ss(&p.plants()[j], &k0).unwrap();
        let wch = lftsynth::statespace::series(&k0, &wk).unwrap();
        expected = expected
            .max(norms::hinf_norm(&cl, 1e-6).unwrap().value)
            .max(norms::hinf_norm(&wch, 1e-6).unwrap().value);
    }
    let got = synth::objective(&p, &kb).unwrap();
    assert!((got.value - expected).abs() <= 1e-12 * expected);
    for block in [Block::Bw, Block::Cz, Block::Dzw, Block::Dzu, Block::Dyw] {
        assert!(kb.block(block).iter().all(|v| *v == 0.0));
    }
}

#[test]
fn single_point_synthesis_beats_open_loop() {
    let mut rng = common::rng(3);
    let g = common::random_stable(&mut rng, 3, 2, 2, 0.1);
    let g = StateSpace::new(g.a().clone(), g.b().clone(), g.c().clone(), DMatrix::zeros(2, 2)).unwrap();
    let open = norms::hinf_norm(&g.select(&[0], &[0]).unwrap(), 1e-6).unwrap().value;
    let plant = PartitionedSystem::new(g, vec![1, 1], vec![1, 1]).unwrap();
    let wk = StateSpace::static_gain(DMatrix::from_element(1, 1, 0.1)).unwrap();
    let p = SynthesisProblem::with_common_weight(vec![plant], vec![0.0], wk, Structure::new(0, 0)).unwrap();
    let r = synth::optimize(&p, &p.zero_controller(), &SynthOptions::default()).unwrap();
    assert!((r.initial_objective - open).abs() <= 1e-9 * open);
    assert!(r.gamma <= open);
}

#[test]
fn beam_plant_stabilizes_from_zero_controller() {
    let beam = models::timoshenko_beam(&models::BeamSpec::steel(15.0)).unwrap();
    let plant = models::beam_generalized_plant(&beam).unwrap();
    let wk = models::make_weight(&models::WeightSpec::FirstOrderLag { gain: 0.1, corner: 100.0 }, 0.0).unwrap();
    let p = SynthesisProblem::with_common_weight(vec![plant], vec![15.0], wk, Structure::new(2, 0)).unwrap();
    let zero = p.zero_controller();
    assert!(synth::max_abscissa(&p, &zero).unwrap() >= 0.0);
    let kb = synth::stabilize(&p, &zero, 300).unwrap();
    assert!(synth::max_abscissa(&p, &kb).unwrap() < 0.0);
}

#[test]
fn building_closed_loop_scales_with_performance_output() {
    let g = models::building_surrogate(4, 5.2, 0).unwrap();
    let mut rng = common::rng(2);
    let dims = BlockDims { n_k: 1, n_delta: 0, n_u: 1, n_y: 1 };
    let mut kb = common::random_block(&mut rng, dims, 0.3);
    kb.set_block(Block::Ak, &DMatrix::from_element(1, 1, -5.0)).unwrap();
    let k = lft::eval_controller(&kb, 0.0).unwrap();
    let base = lft::lower_lft_ss(&models::lah_generalized_plant(&g, 1.0).unwrap(), &k).unwrap();
    for rho in [0.5, 1.5] {
        let cl = lft::lower_lft_ss(&models::lah_generalized_plant(&g, rho).unwrap(), &k).unwrap();
        let (a, b) = (norms::h2_norm(&cl).unwrap(), norms::h2_norm(&base).unwrap());
        assert!((a - rho * b).abs() <= 1e-9 * a);
    }
}
