//! Certificates for a constructed equilibrium: structural identities,
//! subjective optimality against a declared deviation family, consistency
//! of the objective environment distribution with the subjective model,
//! and the mean-field Nash property.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aggregate::Gains;
use crate::error::Result;
use crate::estimator::{covariance_residual, moment_propagation};
use crate::fixed_point::{equation_residual, nesting_residual, EnvFixedPoint};
use crate::linalg::{self, Mat, Vector};
use crate::pipeline::{MeanFieldSolution, Solution};
use crate::simulate::{
    meanfield_state_moments, simulate_meanfield, simulate_objective, simulate_subjective, simulation_horizon,
    sub_seed, CostSummary, MomentSummary, SimOptions,
};
use crate::strategy::{AffineStrategy, Perturbation};
use crate::tolerances::Tolerances;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Comparison {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
    #[serde(rename = "<")]
    Below,
}

impl Comparison {
    fn holds(self, value: f64, tolerance: f64) -> bool {
        match self {
            Comparison::AtMost => value <= tolerance,
            Comparison::AtLeast => value >= tolerance,
            Comparison::Below => value < tolerance,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Comparison::AtMost => "<=",
            Comparison::AtLeast => ">=",
            Comparison::Below => "<",
        }
    }
}

impl std::fmt::Display for Comparison {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub comparison: Comparison,
    pub tolerance: f64,
    /// The property the check certifies.
    pub certifies: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VerificationReport {
    pub checks: Vec<Check>,
}

impl VerificationReport {
    pub fn push(&mut self, name: impl Into<String>, value: f64, comparison: Comparison, tolerance: f64, certifies: &str) {
        self.checks.push(Check {
            name: name.into(),
            passed: comparison.holds(value, tolerance),
            value,
            comparison,
            tolerance,
            certifies: certifies.to_string(),
        });
    }

    pub fn extend(&mut self, other: VerificationReport) {
        self.checks.extend(other.checks);
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(4).max(5);
        let mut out = String::new();
        writeln!(out, "{:<width$}  {:<6}  {:>12}    {:>10}  certifies", "check", "status", "value", "tolerance")
            .unwrap();
        for c in &self.checks {
            writeln!(
                out,
                "{:<width$}  {:<6}  {:>12.4e} {:>2} {:>10.3e}  {}",
                c.name,
                if c.passed { "pass" } else { "FAIL" },
                c.value,
                c.comparison.symbol(),
                c.tolerance,
                c.certifies
            )
            .unwrap();
        }
        out
    }
}

/// Gain identities, prediction-system certificates and, for the infinite
/// horizon, the Riccati and filter fixed points.
pub fn check_identities(sol: &Solution, tol: &Tolerances, probes: usize, seed: u64) -> VerificationReport {
    let mut report = VerificationReport::default();
    match &sol.gains {
        Gains::Finite(schedules) => {
            for (i, (s, p)) in schedules.iter().zip(&sol.spec.players).enumerate() {
                report.push(
                    format!("gain_identity[{}]", i + 1),
                    s.gain_identity_residual(p),
                    Comparison::AtMost,
                    tol.gain_identity,
                    "R F_k + beta B' M_{k+1} (A + B F_k) = 0 at every stage",
                );
            }
        }
        Gains::Stationary(gains) => {
            for (i, (g, p)) in gains.iter().zip(&sol.spec.players).enumerate() {
                report.push(
                    format!("gain_identity[{}]", i + 1),
                    g.gain_identity_residual(p),
                    Comparison::AtMost,
                    tol.gain_identity,
                    "R F + beta B' M (A + B F) = 0",
                );
                report.push(
                    format!("are_residual[{}]", i + 1),
                    g.are_residual,
                    Comparison::AtMost,
                    tol.are_residual,
                    "M solves the algebraic Riccati equation",
                );
                report.push(
                    format!("closed_loop_radius[{}]", i + 1),
                    g.closed_loop_radius,
                    Comparison::Below,
                    1.0,
                    "sqrt(beta)(A + B F) is stable",
                );
            }
        }
    }
    match &sol.fixed_point {
        EnvFixedPoint::Finite(fp) => {
            report.push(
                "nesting",
                nesting_residual(&sol.aggregated, fp, probes, seed),
                Comparison::AtMost,
                tol.nesting,
                "predictions from stage k agree with predictions from later stages",
            );
            report.push(
                "prediction_equations",
                equation_residual(&sol.aggregated, fp, probes, sub_seed(seed, "equations")),
                Comparison::AtMost,
                tol.nesting,
                "conditional means solve the stage-k mean equations",
            );
            let worst = fp.certificates.iter().map(|c| c.cond).fold(1.0, f64::max);
            report.push(
                "prediction_system_cond",
                worst,
                Comparison::AtMost,
                tol.lambda_cond_cap,
                "I - Lambda_k is uniquely solvable at every stage",
            );
        }
        EnvFixedPoint::Stationary(fp) => {
            report.push(
                "truncation_change",
                fp.last_delta,
                Comparison::AtMost,
                tol.trunc_conv,
                "truncated stationary predictions have converged",
            );
            report.push(
                "stationary_system_cond",
                fp.cond,
                Comparison::AtMost,
                tol.lambda_cond_cap,
                "stationary mean equations are uniquely solvable",
            );
            if let Some(steady) = &sol.steady {
                let residual = covariance_residual(sol.model.stage(0), &steady.sigma, tol).unwrap_or(f64::INFINITY);
                report.push(
                    "steady_covariance_residual",
                    residual,
                    Comparison::AtMost,
                    tol.steady_residual,
                    "steady-state filter covariance is a fixed point",
                );
            }
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq)]
pub struct SebeuConfig {
    pub paths: usize,
    pub seed: u64,
    pub magnitudes: Vec<f64>,
    pub directions: usize,
    /// Stages compared in the consistency test.
    pub moment_stages: usize,
    pub negative_control: bool,
}

impl SebeuConfig {
    pub fn new(paths: usize, seed: u64) -> Self {
        SebeuConfig {
            paths,
            seed,
            magnitudes: vec![0.01, 0.05, 0.2],
            directions: 20,
            moment_stages: 21,
            negative_control: true,
        }
    }
}

/// Largest standardized discrepancy between sampled and analytic moments
/// of the coordinates `idx`, over stages `0..stages`.
pub fn moment_z_scores(
    sampled: &MomentSummary,
    mean: impl Fn(usize) -> Vector,
    cov: impl Fn(usize) -> Mat,
    idx: &[usize],
    stages: usize,
) -> (f64, f64) {
    let p = sampled.paths as f64;
    let (mut z_mean, mut z_cov) = (0.0_f64, 0.0_f64);
    for t in 0..stages {
        let (m, c) = (mean(t), cov(t));
        for (a, &ia) in idx.iter().enumerate() {
            let se = (c[(a, a)] / p).sqrt();
            let z = if se > 0.0 {
                (sampled.mean[t][ia] - m[a]).abs() / se
            } else if sampled.mean[t][ia] == m[a] {
                0.0
            } else {
                f64::INFINITY
            };
            z_mean = z_mean.max(z);
            for (b, &ib) in idx.iter().enumerate().skip(a) {
                let se = ((c[(a, a)] * c[(b, b)] + c[(a, b)] * c[(a, b)]) / p).sqrt();
                let diff = (sampled.cov[t][(ia, ib)] - c[(a, b)]).abs();
                let z = if se > 0.0 { diff / se } else if diff < 1e-12 { 0.0 } else { f64::INFINITY };
                z_cov = z_cov.max(z);
            }
        }
    }
    (z_mean, z_cov)
}

/// Smallest standardized gap `(J(dev) − J(base)) / stderr` over deviations.
fn worst_gap(diffs: &[CostSummary]) -> (f64, usize) {
    let mut worst = (f64::INFINITY, 0);
    for (s, d) in diffs.iter().enumerate().skip(1) {
        let z = if !d.mean.is_finite() {
            if d.mean > 0.0 {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            }
        } else if d.stderr > 0.0 {
            d.mean / d.stderr
        } else if d.mean >= 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        };
        if z < worst.0 {
            worst = (z, s);
        }
    }
    worst
}

/// Objective-versus-subjective consistency of the environment variable and
/// subjective optimality against random and structured deviations.
pub fn check_sebeu(sol: &Solution, cfg: &SebeuConfig, tol: &Tolerances) -> Result<VerificationReport> {
    let mut report = VerificationReport::default();
    let spec = &sol.spec;
    let natural = simulation_horizon(spec, &SimOptions::new(cfg.paths, cfg.seed), tol);
    let stages = natural.min(cfg.moment_stages);
    let plan = sol.filter_plan(natural.max(stages), tol)?;

    let opts = SimOptions::new(cfg.paths, sub_seed(cfg.seed, "objective")).horizon(stages);
    let batch = simulate_objective(spec, &sol.profile, &plan, &opts, tol)?;
    let analytic = moment_propagation(&sol.model, &plan, stages);
    let n = sol.model.n_state();
    let y_idx: Vec<usize> = (n..n + sol.model.n_y()).collect();
    let (z_mean, z_cov) = moment_z_scores(&batch.moments, |t| analytic.mean_y(t), |t| analytic.cov_y(t), &y_idx, stages);
    report.push(
        "consistency.y_mean",
        z_mean,
        Comparison::Below,
        tol.z_score,
        "objective mean of y_t matches the subjective model (max |z| over stages)",
    );
    report.push(
        "consistency.y_cov",
        z_cov,
        Comparison::Below,
        tol.z_score,
        "objective covariance of y_t matches the subjective model (max |z| over stages)",
    );

    let sub_opts = SimOptions::new(cfg.paths, sub_seed(cfg.seed, "subjective"));
    for (i, base) in sol.profile.players.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "deviations"));
        rng.set_stream(i as u64);
        let mut strategies = vec![base.clone()];
        for &mag in &cfg.magnitudes {
            for _ in 0..cfg.directions {
                strategies.push(base.perturbed(&Perturbation::random(base, mag, &mut rng)));
            }
        }
        strategies.push(base.zero_gains());
        strategies.push(base.environment_blind(&sol.profile.h_raw[i]));
        let run = simulate_subjective(spec, i, &strategies, &sol.model, &plan, &sub_opts, tol)?;
        let (z, which) = worst_gap(&run.diffs);
        let label = deviation_label(which, cfg);
        report.push(
            format!("optimality[{}]", i + 1),
            z,
            Comparison::AtLeast,
            -tol.gap_stderr,
            &format!(
                "no deviation lowers subjective cost ({} deviations; worst: {label})",
                strategies.len() - 1
            ),
        );
        if cfg.negative_control {
            let corrupted = AffineStrategy {
                f: base.f.iter().map(|f| Mat::zeros(f.nrows(), f.ncols())).collect(),
                g: base.g.clone(),
                h: base.h.clone(),
            };
            let control = simulate_subjective(spec, i, &[corrupted, base.clone()], &sol.model, &plan, &sub_opts, tol)?;
            let d = control.diffs[1];
            let improvement = if d.stderr > 0.0 { -d.mean / d.stderr } else { f64::INFINITY * -d.mean.signum() };
            report.push(
                format!("negative_control[{}]", i + 1),
                improvement,
                Comparison::AtLeast,
                5.0,
                "with F = 0 the deviation test detects an improvement (power check)",
            );
        }
    }
    Ok(report)
}

fn deviation_label(index: usize, cfg: &SebeuConfig) -> String {
    let random = cfg.magnitudes.len() * cfg.directions;
    if index == 0 {
        "none".into()
    } else if index <= random {
        let k = index - 1;
        format!("random magnitude {} direction {}", cfg.magnitudes[k / cfg.directions], k % cfg.directions)
    } else if index == random + 1 {
        "zero gains".into()
    } else {
        "environment-blind".into()
    }
}

/// Limit moments of `y_t` for a mean-field population.
pub fn meanfield_y_moments(sol: &MeanFieldSolution, stages: usize) -> (Vec<Vector>, Vec<Mat>) {
    let (mx, _) = meanfield_state_moments(sol, stages);
    let f = &sol.strategy.f[0];
    let offset = sol.offset();
    let means = mx
        .iter()
        .map(|m| &sol.spec.e1 * (f * m + &offset) + &sol.spec.e2 * m + &sol.spec.xi_mean)
        .collect();
    (means, vec![sol.spec.xi_cov.clone(); stages])
}

/// Finite-population environment moments against the mean-field limit.
pub fn check_meanfield_consistency(
    sol: &MeanFieldSolution,
    population: usize,
    paths: usize,
    seed: u64,
    stages: usize,
    tol: &Tolerances,
) -> Result<VerificationReport> {
    let mut report = VerificationReport::default();
    let opts = SimOptions::new(paths, sub_seed(seed, "meanfield-consistency")).horizon(stages);
    let run = simulate_meanfield(sol, population, None, &opts, tol)?;
    let nx = sol.spec.player.n_x();
    let (ym, yc) = meanfield_y_moments(sol, stages);
    let idx: Vec<usize> = (nx..nx + sol.spec.n_y()).collect();
    let (z_mean, z_cov) = moment_z_scores(&run.moments, |t| ym[t].clone(), |t| yc[t].clone(), &idx, stages);
    report.push(
        "consistency.y_mean",
        z_mean,
        Comparison::Below,
        tol.z_score,
        "population mean of y_t matches the mean-field limit (max |z| over stages)",
    );
    report.push(
        "consistency.y_cov",
        z_cov,
        Comparison::Below,
        tol.z_score,
        "population covariance of y_t matches the mean-field limit (max |z| over stages)",
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldConfig {
    pub populations: Vec<usize>,
    pub deviation_paths: usize,
    pub clt_paths: usize,
    pub symmetry_population: usize,
    pub symmetry_paths: usize,
    pub seed: u64,
    pub stages: usize,
}

impl MeanFieldConfig {
    pub fn new(seed: u64) -> Self {
        MeanFieldConfig {
            populations: vec![100, 1_000, 10_000],
            deviation_paths: 16,
            clt_paths: 200,
            symmetry_population: 100,
            symmetry_paths: 20_000,
            seed,
            stages: 21,
        }
    }
}

/// Largest `|Δy_t|` when player 0 switches to `deviator`, over paths and
/// stages, with all randomness shared.
pub fn deviation_effect(
    sol: &MeanFieldSolution,
    population: usize,
    deviator: &AffineStrategy,
    paths: usize,
    seed: u64,
    stages: usize,
    tol: &Tolerances,
) -> Result<f64> {
    let opts = SimOptions::new(paths, seed).horizon(stages).recording();
    let base = simulate_meanfield(sol, population, None, &opts, tol)?;
    let dev = simulate_meanfield(sol, population, Some(deviator), &opts, tol)?;
    let (a, b) = (base.y_paths.unwrap_or_default(), dev.y_paths.unwrap_or_default());
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

pub fn check_meanfield_nash(sol: &MeanFieldSolution, cfg: &MeanFieldConfig, tol: &Tolerances) -> Result<VerificationReport> {
    let mut report = VerificationReport::default();
    report.push(
        "meanfield_residual",
        sol.residual,
        Comparison::Below,
        tol.meanfield_residual,
        "(y_0, x_0) solves the mean-field equations",
    );
    report.push(
        "initial_mean_gap",
        sol.initial_mean_gap,
        Comparison::AtMost,
        tol.nesting,
        "E[x_0] equals the stationary mean x_0 the construction presumes",
    );

    let zero = sol.strategy.zero_gains();
    let zero = AffineStrategy { h: vec![Vector::zeros(zero.h[0].len())], ..zero };
    let seed = sub_seed(cfg.seed, "meanfield-deviation");
    let mut effects = Vec::with_capacity(cfg.populations.len());
    for &m in &cfg.populations {
        effects.push(deviation_effect(sol, m, &zero, cfg.deviation_paths, seed, cfg.stages, tol)?);
    }
    if cfg.populations.len() >= 2 {
        let x: Vec<f64> = cfg.populations.iter().map(|&m| m as f64).collect();
        let slope = linalg::loglog_slope(&x, &effects);
        report.push(
            "deviation_effect_slope",
            (slope + 1.0).abs(),
            Comparison::AtMost,
            0.15,
            "a single deviator moves y by O(1/population) (|slope + 1|)",
        );
    }

    // Law of large numbers for the population average.
    let m = cfg.populations.iter().copied().max().unwrap_or(1);
    let opts = SimOptions::new(cfg.clt_paths, sub_seed(cfg.seed, "meanfield-clt")).horizon(cfg.stages);
    let run = simulate_meanfield(sol, m, None, &opts, tol)?;
    let (mx, cx) = meanfield_state_moments(sol, cfg.stages);
    let nx = sol.spec.player.n_x();
    let idx: Vec<usize> = (0..nx).collect();
    let scale = 1.0 / m as f64;
    let (z_mean, z_cov) = moment_z_scores(&run.moments, |t| mx[t].clone(), |t| &cx[t] * scale, &idx, cfg.stages);
    report.push(
        "population_average_mean",
        z_mean,
        Comparison::Below,
        tol.z_score,
        &format!("population average tracks E[x_t] within CLT bands (population {m})"),
    );
    report.push(
        "population_average_spread",
        z_cov,
        Comparison::Below,
        tol.z_score,
        &format!("population average fluctuates as cov[x_t]/population (population {m})"),
    );

    let opts = SimOptions::new(cfg.symmetry_paths, sub_seed(cfg.seed, "meanfield-symmetry"));
    let run = simulate_meanfield(sol, cfg.symmetry_population, None, &opts, tol)?;
    let first = run.costs[0];
    let z = run.costs[1..]
        .iter()
        .map(|c| (c.mean - first.mean).abs() / (c.stderr * c.stderr + first.stderr * first.stderr).sqrt())
        .fold(0.0, f64::max);
    report.push(
        "agent_cost_symmetry",
        z,
        Comparison::Below,
        tol.z_score,
        "identical agents incur statistically indistinguishable costs",
    );
    Ok(report)
}
