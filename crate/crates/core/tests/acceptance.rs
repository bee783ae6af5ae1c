//! Acceptance suite: one pass/fail line per criterion, non-zero exit on any failure.

mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use lftsynth::cli::{self, Metric, RunConfig, ScenarioModel};
use lftsynth::lft::{self, Block, BlockDims, ControllerBlock};
use lftsynth::norms;
use lftsynth::statespace::{self, FreqEvaluator, PartitionedSystem, StateSpace};
use lftsynth::synth::{self, Structure, SynthOptions, SynthesisProblem, SynthesisResult};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use tempfile::TempDir;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok { Ok(detail) } else { Err(detail) }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn criterion_1() -> Outcome {
    let clock = Instant::now();
    let mut rng = common::rng(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..=10);
        let (m, p) = if rng.random_bool(0.5) { (1, 1) } else { (rng.random_range(1..=3), rng.random_range(1..=3)) };
        let g = common::random_stable(&mut rng, n, m, p, 0.02);
        let cert = norms::hinf_norm(&g, norms::DEFAULT_REL_TOL).map_err(|e| e.to_string())?;
        worst = worst.max(rel(cert.value, common::dense_sweep_hinf(&g)));
    }
    let secs = clock.elapsed().as_secs_f64();
    check(worst <= 1e-4 && secs < 30.0, format!("max rel err {worst:.2e}, {secs:.1} s"))
}

fn criterion_2() -> Outcome {
    let zeta: f64 = 0.1;
    let res = StateSpace::new(
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -2.0 * zeta]),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DMatrix::zeros(1, 1),
    )
    .unwrap();
    let peak = norms::hinf_norm(&res, norms::DEFAULT_REL_TOL).map_err(|e| e.to_string())?.value;
    let lag = StateSpace::new(
        DMatrix::from_element(1, 1, -1.0),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::zeros(1, 1),
    )
    .unwrap();
    let h2 = norms::h2_norm(&lag).map_err(|e| e.to_string())?;
    // 0.7071068 is 1/√2 to seven digits; the 1e-9 check needs the exact value
    let (e1, e2) = (rel(peak, 5.0252), rel(h2, std::f64::consts::FRAC_1_SQRT_2));
    check(e1 <= 1e-4 && e2 <= 1e-9, format!("peak {peak:.6} (rel {e1:.1e}), h2 {h2:.9} (rel {e2:.1e})"))
}

fn criterion_3() -> Outcome {
    let mut rng = common::rng(77);
    let (mut fu_err, mut affine_err, mut zero_ok, mut checked): (f64, f64, bool, usize) = (0.0, 0.0, true, 0);
    for _ in 0..100 {
        let dims = BlockDims {
            n_k: rng.random_range(1..=3),
            n_delta: rng.random_range(1..=3),
            n_u: rng.random_range(1..=2),
            n_y: rng.random_range(1..=2),
        };
        let kb = common::random_block(&mut rng, dims, 0.5);
        let rho = rng.random_range(-1.5..1.5);

        if let Ok(k) = lft::eval_controller(&kb, rho) {
            let ev = FreqEvaluator::new(&k).map_err(|e| e.to_string())?;
            for i in 0..30 {
                let w = 0.01 * 10f64.powf(4.0 * i as f64 / 29.0);
                let Ok(direct) = ev.eval(w) else { continue };
                let integ = DMatrix::identity(dims.n_k, dims.n_k).map(|v: f64| Complex64::new(v, 0.0) / Complex64::new(0.0, w));
                let inner = lft::upper_lft_matrix(&common::complex(kb.matrix()), &integ).map_err(|e| e.to_string())?;
                let delta = DMatrix::identity(dims.n_delta, dims.n_delta).map(|v: f64| Complex64::new(v * rho, 0.0));
                let nested = lft::upper_lft_matrix(&inner, &delta).map_err(|e| e.to_string())?;
                fu_err = fu_err.max((&direct - &nested).camax() / (1.0 + direct.camax()));
                checked += 1;
            }
        }

        let mut aff = kb.clone();
        aff.set_block(Block::Dzw, &DMatrix::zeros(dims.n_delta, dims.n_delta)).unwrap();
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let (ka, kb2, mid) = (
            lft::eval_controller(&aff, a).unwrap(),
            lft::eval_controller(&aff, b).unwrap(),
            lft::eval_controller(&aff, 0.5 * (a + b)).unwrap(),
        );
        for (x, y, z) in [(ka.a(), kb2.a(), mid.a()), (ka.b(), kb2.b(), mid.b()), (ka.c(), kb2.c(), mid.c()), (ka.d(), kb2.d(), mid.d())] {
            affine_err = affine_err.max(((x + y) * 0.5 - z).amax() / (1.0 + z.amax()));
        }

        let k0 = lft::eval_controller(&kb, 0.0).unwrap();
        zero_ok &= k0.a() == &kb.block(Block::Ak)
            && k0.b() == &kb.block(Block::Bu)
            && k0.c() == &kb.block(Block::Cy)
            && k0.d() == &kb.block(Block::Dyu);
    }
    check(
        fu_err <= 1e-8 && affine_err <= 1e-12 && zero_ok && checked > 2000,
        format!("Fu∘Fu err {fu_err:.1e} over {checked} samples, affine err {affine_err:.1e}, Δ=0 exact: {zero_ok}"),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = common::rng(404);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (n1, n2) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let g1 = common::random_stable(&mut rng, n1, 1, 2, 0.05);
        let g2 = common::random_stable(&mut rng, n2, 2, 1, 0.05);
        let n = |g: &StateSpace| norms::hinf_norm(g, norms::DEFAULT_REL_TOL).map(|r| r.value).map_err(|e| e.to_string());
        let both = n(&statespace::append_diag(&[g1.clone(), g2.clone()]).unwrap())?;
        worst = worst.max(rel(both, n(&g1)?.max(n(&g2)?)));
    }
    check(worst <= 2.0 * norms::DEFAULT_REL_TOL, format!("max rel gap {worst:.1e}"))
}

fn toy_plant(stiffness: f64) -> PartitionedSystem {
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -stiffness, -0.4]);
    let b = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]);
    let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
    PartitionedSystem::new(StateSpace::new(a, b, c, DMatrix::zeros(2, 2)).unwrap(), vec![1, 1], vec![1, 1]).unwrap()
}

fn criterion_5() -> Outcome {
    let clock = Instant::now();
    let grid = vec![0.5, 1.0, 2.0];
    let plants = grid.iter().map(|&k| toy_plant(k)).collect();
    let wk = lftsynth::models::make_weight(
        &lftsynth::models::WeightSpec::FirstOrderLag { gain: 0.1, corner: 100.0 },
        0.0,
    )
    .unwrap();
    let p = SynthesisProblem::with_common_weight(plants, grid, wk, Structure::new(1, 1)).map_err(|e| e.to_string())?;
    let kb0 = synth::heuristic_init(&p, 0).map_err(|e| e.to_string())?;
    let r = synth::optimize(&p, &kb0, &SynthOptions::default()).map_err(|e| e.to_string())?;
    let recomputed = synth::objective(&p, &r.controller).map_err(|e| e.to_string())?;
    let within = recomputed.per_point.iter().all(|v| *v <= r.gamma * (1.0 + 1e-6));
    let secs = clock.elapsed().as_secs_f64();
    check(
        r.gamma <= r.initial_objective && recomputed.stable && within && secs < 60.0,
        format!(
            "initial {:.4} -> gamma {:.4}, stable {}, per-point within gamma {within}, {secs:.1} s",
            r.initial_objective, r.gamma, recomputed.stable
        ),
    )
}

struct Design {
    model: ScenarioModel,
    parametric: SynthesisResult,
    nominal: ControllerBlock,
    secs: f64,
}

fn design(config: &str) -> Result<Design, String> {
    let clock = Instant::now();
    let cfg = RunConfig::parse(config, Path::new(".")).map_err(|e| e.to_string())?;
    let model = ScenarioModel::new(&cfg).map_err(|e| e.to_string())?;
    let problem = model.problem().map_err(|e| e.to_string())?;
    let (kb, nominal) =
        synth::init_from_nominal(&problem, model.nominal_index(), &cfg.options).map_err(|e| e.to_string())?;
    let parametric = synth::optimize(&problem, &kb, &cfg.options).map_err(|e| e.to_string())?;
    let nominal = synth::embed_nominal(&problem, &nominal.controller).map_err(|e| e.to_string())?;
    Ok(Design { model, parametric, nominal, secs: clock.elapsed().as_secs_f64() })
}

const BEAM: &str = "scenario = beam
grid = 10, 12.5, 15, 17.5, 20
nominal = 15
n_k = 2
n_delta = 1
dependency = affine
wk.kind = first-order-lag
wk.gain = 0.1
wk.corner = 100
sweep.n_points = 21
";

const BUILDING: &str = "scenario = building
grid = 0.5, 0.75, 1.0, 1.25, 1.5
nominal = 1.0
n_k = 4
n_delta = 1
dependency = affine
wk.kind = biquad-notch
sweep.n_points = 21
sweep.metric = h2
sweep.output_rho = 1
";

fn worst(rows: &[cli::SweepRow]) -> f64 {
    rows.iter().map(|r| r.value.unwrap_or(f64::INFINITY)).fold(0.0, f64::max)
}

fn criterion_6(beam: &Design) -> Outcome {
    let par = cli::sweep(&beam.model, &beam.parametric.controller).map_err(|e| e.to_string())?;
    let nom = cli::sweep(&beam.model, &beam.nominal).map_err(|e| e.to_string())?;
    let (wp, wn) = (worst(&par), worst(&nom));
    check(
        wp < wn && beam.secs < 900.0,
        format!("worst-case parametric {wp:.4} vs nominal {wn:.4}, synthesis {:.1} s", beam.secs),
    )
}

fn criterion_7(beam: &Design) -> Outcome {
    let cfg = beam.model.config();
    let mut err: f64 = 0.0;
    for (j, &rho) in cfg.grid.iter().enumerate() {
        let mut one = cfg.clone();
        one.sweep.rho_min = rho;
        one.sweep.rho_max = rho;
        one.sweep.n_points = 1;
        let model = ScenarioModel::new(&one).map_err(|e| e.to_string())?;
        let row = &cli::sweep(&model, &beam.parametric.controller).map_err(|e| e.to_string())?[0];
        let v = row.value.ok_or(format!("closed loop unstable at {rho}"))?;
        err = err.max(rel(v, beam.parametric.performance_norms[j]));
    }
    check(err <= 1e-4, format!("max rel mismatch {err:.1e}"))
}

fn criterion_8(building: &Design) -> Outcome {
    assert_eq!(building.model.config().sweep.metric, Metric::H2);
    let rows = cli::sweep(&building.model, &building.parametric.controller).map_err(|e| e.to_string())?;
    if let Some(r) = rows.iter().find(|r| r.value.is_none()) {
        return Err(format!("closed loop unstable at rho = {}", r.rho));
    }
    let rho: Vec<f64> = rows.iter().map(|r| r.rho).collect();
    let h2: Vec<f64> = rows.iter().map(|r| r.value.unwrap()).collect();
    let s = common::spearman(&rho, &h2);
    check(
        s <= -0.9 && building.secs < 900.0,
        format!("spearman {s:.3}, H2 {:.4} -> {:.4}, synthesis {:.1} s", h2[0], h2[h2.len() - 1], building.secs),
    )
}

fn attenuation(model: &ScenarioModel, kb: &ControllerBlock, rho: f64) -> Result<f64, String> {
    let plant = model.measurement_plant(rho).map_err(|e| e.to_string())?;
    let open = plant.channel(0, 0).map_err(|e| e.to_string())?;
    let peak = norms::hinf_norm(&open, norms::DEFAULT_REL_TOL).map_err(|e| e.to_string())?;
    let k = lft::eval_controller(kb, rho).map_err(|e| e.to_string())?;
    let cl = lft::lower_lft_ss(&plant, &k).map_err(|e| e.to_string())?;
    let g = cl.eval(peak.peak_omega).map_err(|e| e.to_string())?;
    Ok(g[(0, 0)].norm() / peak.value)
}

fn criterion_9(building: &Design) -> Outcome {
    let mut worst_nom: f64 = 0.0;
    let mut worst_par: (f64, f64) = (0.0, f64::NAN);
    for rho in building.model.config().sweep_points() {
        worst_nom = worst_nom.max(attenuation(&building.model, &building.nominal, rho)?);
        let r = attenuation(&building.model, &building.parametric.controller, rho)?;
        if r > worst_par.0 {
            worst_par = (r, rho);
        }
    }
    check(
        worst_nom <= 0.7 && worst_par.0 <= 0.7,
        format!(
            "closed/open at the open-loop peak: nominal worst {worst_nom:.3}, parametric worst {:.3} at rho = {}",
            worst_par.0, worst_par.1
        ),
    )
}

fn run_cli(dir: &Path, args: &[&str]) -> (i32, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_lftsynth"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    (out.status.code().unwrap_or(-1), out.stdout)
}

fn criterion_10() -> Outcome {
    let tmp = TempDir::new().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let write = |name: &str, text: &str| fs::write(dir.join(name), text).unwrap();
    let read = |name: &str| fs::read(dir.join(name)).unwrap();
    let mut failures = Vec::new();

    let mut files = Vec::new();
    for (i, k) in [0.5, 1.0, 2.0].iter().enumerate() {
        write(&format!("p{i}.ss"), &toy_plant(*k).sys().to_text());
        files.push(format!("p{i}.ss"));
    }
    let base = format!(
        "scenario = custom\ngrid = 0.5, 1, 2\nplant.files = {}\nn_k = 1\nn_delta = 1\ndependency = affine\nopt.restarts = 2\n",
        files.join(", ")
    );
    for tag in ["a", "b"] {
        write(
            &format!("{tag}.cfg"),
            &format!("{base}out.controller = k_{tag}.txt\nout.trace = t_{tag}.csv\nout.summary = s_{tag}.txt\n"),
        );
        let (code, _) = run_cli(dir, &["synth", "--config", &format!("{tag}.cfg")]);
        if code != 0 {
            failures.push(format!("synth exit {code}"));
        }
    }
    let strip = |bytes: Vec<u8>| -> Vec<String> {
        String::from_utf8_lossy(&bytes)
            .lines()
            .map(|l| l.rsplit_once(',').map(|(h, _)| h.to_string()).unwrap_or_default())
            .collect()
    };
    if read("k_a.txt") != read("k_b.txt") || strip(read("t_a.csv")) != strip(read("t_b.csv")) {
        failures.push("synth outputs differ between runs".into());
    }
    for tag in ["x", "y"] {
        run_cli(dir, &["eval", "--controller", "k_a.txt", "--config", "a.cfg", "--out", &format!("e_{tag}.csv")]);
        run_cli(
            dir,
            &["bode", "--controller", "k_a.txt", "--config", "a.cfg", "--rho", "0.5,2", "--out", &format!("b_{tag}.csv")],
        );
    }
    if read("e_x.csv") != read("e_y.csv") || read("b_x.csv") != read("b_y.csv") {
        failures.push("eval/bode CSVs differ between runs".into());
    }

    let kb_text = String::from_utf8(read("k_a.txt")).unwrap();
    if ControllerBlock::from_text(&kb_text).map(|k| k.to_text()).ok().as_deref() != Some(kb_text.as_str()) {
        failures.push("controller file does not round-trip".into());
    }
    let ss_text = toy_plant(1.0).sys().to_text();
    if StateSpace::from_text(&ss_text).map(|s| s.to_text()).ok().as_deref() != Some(ss_text.as_str()) {
        failures.push("state-space file does not round-trip".into());
    }

    write("bad_key.cfg", &format!("{base}opt.iterations = 3\n"));
    write("bad_k.txt", "1 0 1 1\n0 0\n");
    write("limit.cfg", &format!("{base}opt.max_iter = 1\n"));
    write(
        "u.ss",
        &StateSpace::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            DMatrix::zeros(2, 2),
        )
        .unwrap()
        .to_text(),
    );
    write("unstab.cfg", "scenario = custom\ngrid = 0, 1\nplant.files = u.ss, u.ss\nn_k = 1\nn_delta = 1\n");
    let cases: [(&[&str], i32); 5] = [
        (&["synth", "--config", "bad_key.cfg"], 1),
        (&["eval", "--controller", "bad_k.txt", "--config", "a.cfg", "--out", "z.csv"], 1),
        (&["synth", "--config", "missing.cfg"], 1),
        (&["synth", "--config", "limit.cfg"], 2),
        (&["synth", "--config", "unstab.cfg"], 3),
    ];
    for (args, want) in cases {
        let (got, _) = run_cli(dir, args);
        if got != want {
            failures.push(format!("`{}` exited {got}, expected {want}", args.join(" ")));
        }
    }
    check(failures.is_empty(), if failures.is_empty() { "CSVs bit-identical, files round-trip, exit codes 1/2/3".into() } else { failures.join("; ") })
}

fn main() {
    let clock = Instant::now();
    let mut results: Vec<(usize, Outcome)> = vec![
        (1, criterion_1()),
        (2, criterion_2()),
        (3, criterion_3()),
        (4, criterion_4()),
        (5, criterion_5()),
    ];
    match design(BEAM) {
        Ok(beam) => {
            results.push((6, criterion_6(&beam)));
            results.push((7, criterion_7(&beam)));
        }
        Err(e) => {
            results.push((6, Err(e.clone())));
            results.push((7, Err(e)));
        }
    }
    match design(BUILDING) {
        Ok(building) => {
            results.push((8, criterion_8(&building)));
            results.push((9, criterion_9(&building)));
        }
        Err(e) => {
            results.push((8, Err(e.clone())));
            results.push((9, Err(e)));
        }
    }
    results.push((10, criterion_10()));

    let mut failed = 0;
    for (n, r) in &results {
        match r {
            Ok(d) => println!("criterion {n}: PASS ({d})"),
            Err(d) => {
                failed += 1;
                println!("criterion {n}: FAIL ({d})");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed, {:.1} s",
        results.len() - failed,
        clock.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
