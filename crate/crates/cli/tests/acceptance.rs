//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines are always printed.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sebeu::aggregate::Gains;
use sebeu::error::Assumption;
use sebeu::estimator::{moment_propagation, FilterPlan};
use sebeu::example::{epsilon_nash_gap, example_gains, example_row, gap_slope, gaps_nonincreasing, ExampleSpec};
use sebeu::fixtures;
use sebeu::linalg::{self, Mat, Vector};
use sebeu::model::validate;
use sebeu::pipeline::{solve, solve_meanfield_spec, synthesize};
use sebeu::simulate::{simulate_objective, simulation_horizon, SimOptions};
use sebeu::synthesis::{are_solve, riccati_backward};
use sebeu::verify::{
    check_identities, check_meanfield_consistency, check_meanfield_nash, check_sebeu, moment_z_scores,
    MeanFieldConfig, SebeuConfig,
};
use sebeu::{Horizon, Tolerances};

const PATHS: usize = 100_000;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

/// Gain identities on random valid specs, both horizons.
fn criterion_1() -> Verdict {
    let start = Instant::now();
    let tol = Tolerances::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut identity, mut are, mut radius) = (0.0_f64, 0.0_f64, 0.0_f64);
    let (mut finite, mut infinite) = (0, 0);
    while finite + infinite < 50 {
        let horizon = if (finite + infinite) % 2 == 0 {
            Horizon::Finite(1 + (finite % 8))
        } else {
            Horizon::Infinite
        };
        let spec = fixtures::random_game(&mut rng, horizon, 0.3);
        if !validate(&spec, &tol).is_valid() {
            continue;
        }
        let gains = match synthesize(&spec, &tol) {
            Ok(g) => g,
            Err(e) => return verdict(false, format!("synthesis failed on a valid spec: {e}")),
        };
        match &gains {
            Gains::Finite(schedules) => {
                finite += 1;
                for (s, p) in schedules.iter().zip(&spec.players) {
                    identity = identity.max(s.gain_identity_residual(p));
                }
            }
            Gains::Stationary(list) => {
                infinite += 1;
                for (g, p) in list.iter().zip(&spec.players) {
                    identity = identity.max(g.gain_identity_residual(p));
                    are = are.max(g.are_residual);
                    radius = radius.max(g.closed_loop_radius);
                }
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        identity < 1e-10 && are < 1e-10 && radius < 1.0 && within(elapsed, 30.0),
        format!(
            "{finite} finite + {infinite} infinite specs: gain identity {identity:.2e}, ARE residual {are:.2e}, \
             max closed-loop radius {radius:.4}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Finite-horizon Riccati values approach the ARE solution.
fn criterion_2() -> Verdict {
    let tol = Tolerances::default();
    let mut scalar = fixtures::scalar_game(1.2, 1.0, 1.0, 0.5, 0.9, 0.5, Horizon::Finite(200)).players.remove(0);
    scalar.stages.0[0].c = Mat::from_element(1, 1, 0.3);
    scalar.stages.0[0].k = Mat::from_element(1, 1, 0.2);
    scalar.stages.0[0].l = Mat::from_element(1, 1, 0.1);
    let mut pair = fixtures::weakly_coupled_pair(Horizon::Finite(200)).players.remove(0);
    pair.beta = 0.9;
    let mut worst = 0.0_f64;
    for player in [scalar, pair] {
        let w = Vector::zeros(player.n_x());
        let finite = riccati_backward(&player, 200, std::slice::from_ref(&w), &tol);
        let stationary = are_solve(&player, &w, &tol);
        match (finite, stationary) {
            (Ok(f), Ok(s)) => worst = worst.max(linalg::max_abs(&(&f.m[0] - &s.m))),
            (f, s) => return verdict(false, format!("solver failure: {:?} / {:?}", f.err(), s.err())),
        }
    }
    verdict(worst < 1e-6, format!("max |M_0(200) - M_ARE| = {worst:.2e} on scalar and 2-dim players"))
}

/// Nesting identity on solvable specs; engineered coupling hits the
/// uniqueness failure.
fn criterion_3() -> Verdict {
    let tol = Tolerances::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0_f64;
    let mut solved = 0;
    let mut specs: Vec<_> = (0..30).map(|i| fixtures::random_game(&mut rng, Horizon::Finite(2 + i % 7), 0.2)).collect();
    specs.push(fixtures::weakly_coupled_pair(Horizon::Finite(8)));
    for (k, spec) in specs.iter().enumerate() {
        let Ok(sol) = solve(spec, &tol) else { continue };
        solved += 1;
        let report = check_identities(&sol, &tol, 100, k as u64);
        worst = worst.max(report.get("nesting").map_or(f64::INFINITY, |c| c.value));
    }

    let mut spec = fixtures::scalar_game(1.0, 1.0, 1.0, 1.0, 1.0, 0.5, Horizon::Finite(1));
    spec.players[0].stages.0[0].k[(0, 0)] = 1.0;
    let g00 = match synthesize(&spec, &tol) {
        Ok(Gains::Finite(s)) => s[0].g[0][0][(0, 0)],
        _ => return verdict(false, "could not synthesize the coupling probe".into()),
    };
    spec.environment.stages.0[0].e1[0][(0, 0)] = 1.0 / g00;
    let failure = match solve(&spec, &tol) {
        Err(e) => e.assumption() == Some(Assumption::UniqueFinitePrediction),
        Ok(_) => false,
    };
    verdict(
        worst < 1e-8 && solved >= 25 && failure,
        format!(
            "max nesting residual {worst:.2e} over {solved} solvable specs (100 probes each); \
             singular coupling reported as {}: {failure}",
            Assumption::UniqueFinitePrediction
        ),
    )
}

fn vstack(blocks: &[Mat]) -> Mat {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Mat::zeros(rows, blocks[0].ncols());
    let mut at = 0;
    for b in blocks {
        linalg::set_block(&mut out, at, 0, b);
        at += b.nrows();
    }
    out
}

/// Filter against brute-force Gaussian conditioning, steady state residual
/// and drift.
fn criterion_4() -> Verdict {
    let tol = Tolerances::default();
    let horizon = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sol = loop {
        let spec = fixtures::random_game(&mut rng, Horizon::Finite(horizon), 0.2);
        if let Ok(sol) = solve(&spec, &tol) {
            if sol.model.n_state() == 5 {
                break sol;
            }
        }
    };
    let model = &sol.model;
    let (n, m) = (model.n_state(), model.n_y());
    let plan = match FilterPlan::new(model, horizon, &tol) {
        Ok(p) => p,
        Err(e) => return verdict(false, format!("filter failed: {e}")),
    };

    // Primitives: X_0, w_0..w_{T-1}, ξ_0..ξ_{T-1}, all centered.
    let n_prim = n + horizon * (n + m);
    let w_at = |t: usize| n + t * n;
    let xi_at = |t: usize| n + horizon * n + t * m;
    let mut prim_cov = Mat::zeros(n_prim, n_prim);
    linalg::set_block(&mut prim_cov, 0, 0, &model.x0_cov);
    for t in 0..horizon {
        linalg::set_block(&mut prim_cov, w_at(t), w_at(t), &model.stage(t).w_cov);
        linalg::set_block(&mut prim_cov, xi_at(t), xi_at(t), &model.stage(t).xi_cov);
    }
    let factor = linalg::psd_factor(&prim_cov, 0.0);
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let e = &factor * Vector::from_fn(n_prim, |_, _| StandardNormal.sample(&mut rng));
        let mut px = Mat::zeros(n, n_prim);
        px.view_mut((0, 0), (n, n)).fill_with_identity();
        let mut cx = model.x0_mean.clone();
        let mut ph = Mat::zeros(n, n_prim);
        let mut ch = model.x0_mean.clone();
        let mut py_rows: Vec<Mat> = Vec::new();
        for t in 0..horizon {
            if t > 0 {
                let py = vstack(&py_rows);
                let cov_xy = &px * &prim_cov * py.transpose();
                let cov_yy = &py * &prim_cov * py.transpose();
                let Some(chol) = cov_yy.cholesky() else {
                    return verdict(false, format!("observation covariance at t = {t} is singular"));
                };
                let cond_mean = &cx + &cov_xy * chol.solve(&(&py * &e));
                let cond_cov = &px * &prim_cov * px.transpose() - &cov_xy * chol.solve(&cov_xy.transpose());
                let x_hat = &ph * &e + &ch;
                worst = worst.max(linalg::max_abs_vec(&(x_hat - cond_mean)));
                worst = worst.max(linalg::max_abs(&(&plan.steps[t].sigma - cond_cov)));
            }
            let st = model.stage(t);
            let step = &plan.steps[t];
            let mut py = &st.d * &px + &st.gp * &ph;
            linalg::add_block(&mut py, 0, xi_at(t), &Mat::identity(m, m));
            let cy = &st.d * &cx + &st.gp * &ch + &st.hp + &st.xi_mean;
            let mut px_next = &st.a * &px + &st.gx * &ph + &st.c * &py;
            linalg::add_block(&mut px_next, 0, w_at(t), &Mat::identity(n, n));
            cx = &st.a * &cx + &st.gx * &ch + &st.c * &cy + &st.hx + &st.w_mean;
            ph = &step.phi * &ph + &step.gamma * &py;
            ch = &step.phi * &ch + &step.gamma * &cy + &step.offset;
            px = px_next;
            py_rows.push(py);
        }
    }

    let sol_inf = match solve(&fixtures::weakly_coupled_pair(Horizon::Infinite), &tol) {
        Ok(s) => s,
        Err(e) => return verdict(false, format!("infinite reference failed: {e}")),
    };
    let Some(steady) = sol_inf.steady.clone() else {
        return verdict(false, "no steady-state covariance".into());
    };
    let mut stationary = sol_inf.model.clone();
    stationary.x0_cov = steady.sigma.clone();
    let drift = match FilterPlan::new(&stationary, 1000, &tol) {
        Ok(p) => p.steps.iter().map(|s| linalg::max_abs(&(&s.sigma - &steady.sigma))).fold(0.0, f64::max),
        Err(e) => return verdict(false, format!("stationary filter failed: {e}")),
    };
    verdict(
        worst < 1e-9 && steady.residual < 1e-9 && drift < 1e-10,
        format!(
            "conditioning oracle gap {worst:.2e} (T = {horizon}, dim {n}); steady residual {:.2e}; \
             drift over 1000 steps {drift:.2e}",
            steady.residual
        ),
    )
}

/// Objective environment moments against the subjective model.
fn criterion_5() -> Verdict {
    let tol = Tolerances::default();
    let stages = 21;
    let mut lines = Vec::new();
    let mut passed = true;
    for (name, spec) in [
        ("decoupled", fixtures::decoupled_pair()),
        ("weakly coupled", fixtures::weakly_coupled_pair(Horizon::Infinite)),
    ] {
        let start = Instant::now();
        let result = solve(&spec, &tol).and_then(|sol| {
            let natural = simulation_horizon(&spec, &SimOptions::new(PATHS, 5), &tol);
            let plan = sol.filter_plan(natural.max(stages), &tol)?;
            let batch = simulate_objective(&spec, &sol.profile, &plan, &SimOptions::new(PATHS, 5).horizon(stages), &tol)?;
            let analytic = moment_propagation(&sol.model, &plan, stages);
            let n = sol.model.n_state();
            let idx: Vec<usize> = (n..n + sol.model.n_y()).collect();
            Ok(moment_z_scores(&batch.moments, |t| analytic.mean_y(t), |t| analytic.cov_y(t), &idx, stages))
        });
        let elapsed = start.elapsed();
        match result {
            Ok((zm, zc)) => {
                passed &= zm < 4.0 && zc < 4.0 && within(elapsed, 120.0);
                lines.push(format!("{name} |z| mean {zm:.2} cov {zc:.2} ({:.1}s)", elapsed.as_secs_f64()));
            }
            Err(e) => {
                passed = false;
                lines.push(format!("{name}: {e}"));
            }
        }
    }
    let start = Instant::now();
    let result = solve_meanfield_spec(&fixtures::meanfield_scalar(), &tol)
        .and_then(|sol| check_meanfield_consistency(&sol, 200, PATHS, 5, stages, &tol));
    let elapsed = start.elapsed();
    match result {
        Ok(report) => {
            passed &= report.all_passed() && within(elapsed, 120.0);
            let z: Vec<String> = report.checks.iter().map(|c| format!("{} {:.2}", c.name, c.value)).collect();
            lines.push(format!("mean-field {} ({:.1}s)", z.join(", "), elapsed.as_secs_f64()));
        }
        Err(e) => {
            passed = false;
            lines.push(format!("mean-field: {e}"));
        }
    }
    verdict(passed, format!("P = {PATHS}, t <= 20: {}", lines.join("; ")))
}

/// Deviation suite and negative control.
fn criterion_6() -> Verdict {
    let tol = Tolerances::default();
    let result = solve(&fixtures::weakly_coupled_pair(Horizon::Finite(8)), &tol)
        .and_then(|sol| check_sebeu(&sol, &SebeuConfig::new(PATHS, 6), &tol));
    match result {
        Ok(report) => {
            let parts: Vec<String> = report
                .checks
                .iter()
                .filter(|c| c.name.starts_with("optimality") || c.name.starts_with("negative_control"))
                .map(|c| format!("{} {:.2}", c.name, c.value))
                .collect();
            let passed = report
                .checks
                .iter()
                .filter(|c| c.name.starts_with("optimality") || c.name.starts_with("negative_control"))
                .all(|c| c.passed);
            verdict(passed, format!("60 random + 2 structured deviations, P = {PATHS}: {}", parts.join(", ")))
        }
        Err(e) => verdict(false, e.to_string()),
    }
}

/// Two-stage population example: limits, slopes and the ε-Nash gap.
fn criterion_7() -> Verdict {
    let start = Instant::now();
    let ex = ExampleSpec::default();
    let result = example_gains(&ex).and_then(|gains| {
        let rows = (1..=10).map(|k| example_row(&ex, &gains, 1 << k)).collect::<Result<Vec<_>, _>>()?;
        let gaps = [2, 8, 32, 128]
            .iter()
            .map(|&n| epsilon_nash_gap(&ex, &gains, n, PATHS, 7))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((rows, gaps))
    });
    let (rows, gaps) = match result {
        Ok(r) => r,
        Err(e) => return verdict(false, e.to_string()),
    };
    let limit = gap_slope(&rows, |r| r.g1_limit_gap);
    let br = [
        ("F0", gap_slope(&rows, |r| r.f0_gap)),
        ("F1", gap_slope(&rows, |r| r.f1_gap)),
        ("G1", gap_slope(&rows, |r| r.g1_gap)),
    ];
    let monotone = gaps_nonincreasing(&gaps, 2.0);
    let elapsed = start.elapsed();
    let passed = (limit + 1.0).abs() <= 0.05
        && br.iter().all(|(_, s)| (s + 1.0).abs() <= 0.1)
        && monotone
        && within(elapsed, 300.0);
    let gap_text: Vec<String> = gaps.iter().map(|g| format!("N={} {:.2e}±{:.1e}", g.n, g.gap.mean, g.gap.stderr)).collect();
    let br_text: Vec<String> = br.iter().map(|(n, s)| format!("{n} {s:.3}")).collect();
    verdict(
        passed,
        format!(
            "limit slope {limit:.4}; best-response gap slopes {}; eps-Nash {} monotone {monotone} ({:.1}s)",
            br_text.join(", "),
            gap_text.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

/// Mean-field equations, CLT bands and single-deviator scaling.
fn criterion_8() -> Verdict {
    let tol = Tolerances::default();
    let result = solve_meanfield_spec(&fixtures::meanfield_scalar(), &tol)
        .and_then(|sol| Ok((sol.residual, check_meanfield_nash(&sol, &MeanFieldConfig::new(8), &tol)?)));
    match result {
        Ok((residual, report)) => {
            let wanted = ["population_average_mean", "population_average_spread", "deviation_effect_slope"];
            let mut passed = residual < 1e-12;
            let mut parts = vec![format!("residual {residual:.2e}")];
            for name in wanted {
                match report.get(name) {
                    Some(c) => {
                        passed &= c.passed;
                        parts.push(format!("{name} {:.3e} ({} {:.2})", c.value, c.comparison, c.tolerance));
                    }
                    None => {
                        passed = false;
                        parts.push(format!("{name} missing"));
                    }
                }
            }
            verdict(passed, parts.join(", "))
        }
        Err(e) => verdict(false, e.to_string()),
    }
}

fn sebeu_bin() -> &'static str {
    env!("CARGO_BIN_EXE_sebeu")
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn run(args: &[&str]) -> Result<(), String> {
    let out = Command::new(sebeu_bin()).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`sebeu {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

/// Every command twice into separate directories; artifacts must match
/// byte for byte.
fn criterion_9() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let finite = scenario("weakly_coupled_finite.json");
    let meanfield = scenario("meanfield.json");
    let (finite, meanfield) = (finite.to_str().unwrap(), meanfield.to_str().unwrap());
    let mut compared = 0;
    for copy in ["a", "b"] {
        let game = tmp.path().join(copy).join("game");
        let mf = tmp.path().join(copy).join("meanfield");
        let ex = tmp.path().join(copy).join("example");
        let (game, mf, ex) = (game.to_str().unwrap(), mf.to_str().unwrap(), ex.to_str().unwrap());
        let steps: [&[&str]; 7] = [
            &["validate", "--scenario", finite],
            &["solve", "--scenario", finite, "--out", game],
            &["simulate", "--scenario", finite, "--out", game, "--paths", "2000", "--seed", "9", "--trajectories"],
            &["verify", "--scenario", finite, "--out", game, "--paths", "2000", "--seed", "9"],
            &["solve", "--scenario", meanfield, "--out", mf],
            &["simulate", "--scenario", meanfield, "--out", mf, "--paths", "500", "--seed", "9"],
            &["example", "--out", ex, "--paths", "2000", "--nash-n-list", "2,8"],
        ];
        for args in steps {
            if let Err(e) = run(args) {
                return verdict(false, e);
            }
        }
    }
    for sub in ["game", "meanfield", "example"] {
        let a = read_dir_bytes(&tmp.path().join("a").join(sub));
        let b = read_dir_bytes(&tmp.path().join("b").join(sub));
        if a != b {
            let names: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
            return verdict(false, format!("{sub}: artifacts differ ({})", names.join(", ")));
        }
        compared += a.len();
    }
    verdict(true, format!("{compared} artifacts identical across re-runs of validate/solve/simulate/verify/example"))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("gain identities", criterion_1),
        ("finite to infinite consistency", criterion_2),
        ("fixed-point nesting", criterion_3),
        ("Kalman exactness", criterion_4),
        ("environment consistency", criterion_5),
        ("subjective optimality", criterion_6),
        ("population example", criterion_7),
        ("mean-field", criterion_8),
        ("determinism", criterion_9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id) {
            continue;
        }
        let v = check();
        println!("criterion {id} [{}] {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        if !v.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
