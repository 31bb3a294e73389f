//! Primitive problem data: player dynamics and costs, the environment
//! system, noise moments and the horizon.
//!
//! Player `i` evolves as `x' = A x + B u + C y + w` and pays
//! `|x|²_Q + |u|²_R + 2 y'(K u + L x)` per stage. The environment state and
//! variables follow
//! `x⁰' = A0 x⁰ + Σ_i (B1_i u_i + B2_i x_i) + w⁰` and
//! `y = D x⁰ + Σ_i (E1_i u_i + E2_i x_i) + ξ`.
//!
//! Stacked vectors always order the environment block first:
//! `X = (x⁰, x¹, …, xᴺ)`.

use std::fmt;
use std::ops::Range;

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use crate::error::Assumption;
use crate::linalg::{self, Mat, Vector};
use crate::tolerances::Tolerances;

/// Per-stage data: one entry for time-invariant data, `T` entries otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Staged<T>(pub Vec<T>);

impl<T> Staged<T> {
    pub fn constant(value: T) -> Self {
        Staged(vec![value])
    }

    pub fn at(&self, t: usize) -> &T {
        if self.0.len() == 1 {
            &self.0[0]
        } else {
            &self.0[t]
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_time_invariant(&self) -> bool {
        self.0.len() == 1
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.0.iter()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlayerStage {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub q: Mat,
    pub r: Mat,
    pub k: Mat,
    pub l: Mat,
}

impl PlayerStage {
    /// Stage cost `|x|²_Q + |u|²_R + 2 y'(K u + L x)`.
    pub fn stage_cost(&self, x: &Vector, u: &Vector, y: &Vector) -> f64 {
        x.dot(&(&self.q * x)) + u.dot(&(&self.r * u)) + 2.0 * y.dot(&(&self.k * u + &self.l * x))
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlayerSpec {
    pub stages: Staged<PlayerStage>,
    /// Terminal weight; required for finite horizons, unused otherwise.
    pub q_terminal: Option<Mat>,
    pub beta: f64,
}

impl PlayerSpec {
    pub fn time_invariant(stage: PlayerStage, q_terminal: Option<Mat>, beta: f64) -> Self {
        Self { stages: Staged::constant(stage), q_terminal, beta }
    }

    pub fn stage(&self, t: usize) -> &PlayerStage {
        self.stages.at(t)
    }

    pub fn n_x(&self) -> usize {
        self.stages.at(0).n_x()
    }

    pub fn n_u(&self) -> usize {
        self.stages.at(0).n_u()
    }

    pub fn terminal_cost(&self, x: &Vector) -> f64 {
        self.q_terminal.as_ref().map_or(0.0, |q| x.dot(&(q * x)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvStage {
    pub a0: Mat,
    pub b1: Vec<Mat>,
    pub b2: Vec<Mat>,
    pub d: Mat,
    pub e1: Vec<Mat>,
    pub e2: Vec<Mat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentSpec {
    pub stages: Staged<EnvStage>,
}

impl EnvironmentSpec {
    pub fn stage(&self, t: usize) -> &EnvStage {
        self.stages.at(t)
    }

    pub fn n_env(&self) -> usize {
        self.stages.at(0).a0.nrows()
    }

    pub fn n_y(&self) -> usize {
        self.stages.at(0).d.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    Gaussian,
    /// Only first and second moments are specified.
    SecondOrder,
}

impl fmt::Display for NoiseFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseFamily::Gaussian => f.write_str("gaussian"),
            NoiseFamily::SecondOrder => f.write_str("second_order"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseStage {
    pub w_mean: Vector,
    pub w_cov: Mat,
    pub xi_mean: Vector,
    pub xi_cov: Mat,
}

/// Moments of the stacked initial state `X_0`, the stacked disturbance `W_t`
/// and the environment noise `ξ_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub x0_mean: Vector,
    pub x0_cov: Mat,
    pub stages: Staged<NoiseStage>,
    pub family: NoiseFamily,
}

impl NoiseSpec {
    pub fn stage(&self, t: usize) -> &NoiseStage {
        self.stages.at(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Horizon {
    Finite(usize),
    Infinite,
}

impl Horizon {
    pub fn finite(self) -> Option<usize> {
        match self {
            Horizon::Finite(t) => Some(t),
            Horizon::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Horizon::Infinite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameSpec {
    pub players: Vec<PlayerSpec>,
    pub environment: EnvironmentSpec,
    pub noise: NoiseSpec,
    pub horizon: Horizon,
}

/// A population of identical players whose environment variable is the
/// population average `y = avg_j(E1 u_j + E2 x_j) + ξ`. Infinite horizon,
/// no direct environment input into the player dynamics (`C = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldSpec {
    pub player: PlayerSpec,
    pub e1: Mat,
    pub e2: Mat,
    /// Per-player moments (every player draws iid from these).
    pub x0_mean: Vector,
    pub x0_cov: Mat,
    pub w_mean: Vector,
    pub w_cov: Mat,
    pub xi_mean: Vector,
    pub xi_cov: Mat,
    pub family: NoiseFamily,
}

impl MeanFieldSpec {
    pub fn n_y(&self) -> usize {
        self.e1.nrows()
    }

    /// The finite-population game with `n` players and no environment state.
    pub fn finite_population(&self, n: usize) -> GameSpec {
        assert!(n >= 1, "population must be positive");
        let scale = 1.0 / n as f64;
        let ny = self.n_y();
        let env = EnvStage {
            a0: Mat::zeros(0, 0),
            b1: vec![Mat::zeros(0, self.player.n_u()); n],
            b2: vec![Mat::zeros(0, self.player.n_x()); n],
            d: Mat::zeros(ny, 0),
            e1: vec![&self.e1 * scale; n],
            e2: vec![&self.e2 * scale; n],
        };
        let x0_covs: Vec<&Mat> = std::iter::repeat(&self.x0_cov).take(n).collect();
        let w_covs: Vec<&Mat> = std::iter::repeat(&self.w_cov).take(n).collect();
        let x0_means: Vec<&Vector> = std::iter::repeat(&self.x0_mean).take(n).collect();
        let w_means: Vec<&Vector> = std::iter::repeat(&self.w_mean).take(n).collect();
        GameSpec {
            players: vec![self.player.clone(); n],
            environment: EnvironmentSpec { stages: Staged::constant(env) },
            noise: NoiseSpec {
                x0_mean: linalg::vec_concat(&x0_means),
                x0_cov: linalg::block_diag(&x0_covs),
                stages: Staged::constant(NoiseStage {
                    w_mean: linalg::vec_concat(&w_means),
                    w_cov: linalg::block_diag(&w_covs),
                    xi_mean: self.xi_mean.clone(),
                    xi_cov: self.xi_cov.clone(),
                }),
                family: self.family,
            },
            horizon: Horizon::Infinite,
        }
    }

    pub fn validate(&self, tol: &Tolerances) -> ValidationReport {
        let mut report = ValidationReport::default();
        let p = &self.player;
        let (nx, nu, ny) = (p.n_x(), p.n_u(), self.n_y());
        if !p.stages.is_time_invariant() {
            report.push("player", "mean-field players must be time invariant", Some(Assumption::MeanField));
        }
        check_player_stage(&mut report, "player", p.stage(0), ny, tol);
        if linalg::max_abs(&p.stage(0).c) != 0.0 {
            report.push("player.C", "mean-field players require C = 0", Some(Assumption::MeanField));
        }
        if !(0.0..1.0).contains(&p.beta) {
            report.push("player.beta", "infinite horizon requires beta in [0,1)", Some(Assumption::Primitives));
        }
        check_shape(&mut report, "meanfield.E1", &self.e1, ny, nu);
        check_shape(&mut report, "meanfield.E2", &self.e2, ny, nx);
        check_moments(&mut report, "noise.x0", &self.x0_mean, &self.x0_cov, nx, tol);
        check_moments(&mut report, "noise.w", &self.w_mean, &self.w_cov, nx, tol);
        check_moments(&mut report, "noise.xi", &self.xi_mean, &self.xi_cov, ny, tol);
        if report.is_valid() && !is_stabilizable(&p.stage(0).a, &p.stage(0).b) {
            report.push("player", "(A, B) is not stabilizable", Some(Assumption::MeanField));
        }
        report
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Issue {
    pub field: String,
    pub message: String,
    pub assumption: Option<Assumption>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }

    fn push(&mut self, field: impl Into<String>, message: impl Into<String>, assumption: Option<Assumption>) {
        self.issues.push(Issue { field: field.into(), message: message.into(), assumption });
    }

    pub(crate) fn single(field: &str, message: &str, assumption: Option<Assumption>) -> Self {
        let mut report = Self::default();
        report.push(field, message, assumption);
        report
    }

    pub fn mentions(&self, needle: &str) -> bool {
        self.issues
            .iter()
            .any(|i| i.message.contains(needle) || i.field.contains(needle))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.issues.is_empty() {
            return writeln!(f, "valid");
        }
        for issue in &self.issues {
            write!(f, "  {}: {}", issue.field, issue.message)?;
            if let Some(a) = issue.assumption {
                write!(f, " [{a}]")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn check_shape(report: &mut ValidationReport, field: &str, m: &Mat, rows: usize, cols: usize) -> bool {
    if m.nrows() != rows || m.ncols() != cols {
        report.push(
            field,
            format!("expected {rows}x{cols}, got {}x{}", m.nrows(), m.ncols()),
            Some(Assumption::Primitives),
        );
        return false;
    }
    if !linalg::all_finite(m) {
        report.push(field, "contains non-finite entries", Some(Assumption::Primitives));
        return false;
    }
    true
}

fn check_pd(report: &mut ValidationReport, field: &str, m: &Mat, tol: &Tolerances) {
    if !linalg::is_symmetric(m, 1e-12) {
        report.push(field, format!("{field} not symmetric"), Some(Assumption::Primitives));
        return;
    }
    if linalg::min_sym_eigenvalue(m) <= tol.pd {
        report.push(field, format!("{field} not positive definite"), Some(Assumption::Primitives));
    }
}

fn check_moments(report: &mut ValidationReport, field: &str, mean: &Vector, cov: &Mat, n: usize, tol: &Tolerances) {
    if mean.len() != n {
        report.push(
            format!("{field}_mean"),
            format!("expected length {n}, got {}", mean.len()),
            Some(Assumption::Primitives),
        );
    } else if !mean.iter().all(|v| v.is_finite()) {
        report.push(format!("{field}_mean"), "contains non-finite entries", Some(Assumption::Primitives));
    }
    let cov_field = format!("{field}_cov");
    if check_shape(report, &cov_field, cov, n, n) {
        if !linalg::is_symmetric(cov, 1e-12) {
            report.push(&cov_field, "covariance not symmetric", Some(Assumption::Primitives));
        } else if linalg::min_sym_eigenvalue(cov) < -tol.psd {
            report.push(&cov_field, "covariance not positive semidefinite", Some(Assumption::Primitives));
        }
    }
}

fn check_player_stage(report: &mut ValidationReport, field: &str, s: &PlayerStage, ny: usize, tol: &Tolerances) {
    let (nx, nu) = (s.a.nrows(), s.b.ncols());
    if nx == 0 || nu == 0 {
        report.push(field, "player state and control dimensions must be positive", Some(Assumption::Primitives));
        return;
    }
    let ok = [
        check_shape(report, &format!("{field}.A"), &s.a, nx, nx),
        check_shape(report, &format!("{field}.B"), &s.b, nx, nu),
        check_shape(report, &format!("{field}.C"), &s.c, nx, ny),
        check_shape(report, &format!("{field}.Q_stage"), &s.q, nx, nx),
        check_shape(report, &format!("{field}.R"), &s.r, nu, nu),
        check_shape(report, &format!("{field}.K"), &s.k, ny, nu),
        check_shape(report, &format!("{field}.L"), &s.l, ny, nx),
    ];
    if ok[3] {
        check_pd(report, &format!("{field}.Q_stage"), &s.q, tol);
    }
    if ok[4] {
        // Message names the field the way users refer to it.
        if !linalg::is_symmetric(&s.r, 1e-12) {
            report.push(format!("{field}.R"), "R_i not symmetric", Some(Assumption::Primitives));
        } else if linalg::min_sym_eigenvalue(&s.r) <= tol.pd {
            report.push(format!("{field}.R"), "R_i not positive definite", Some(Assumption::Primitives));
        }
    }
}

/// PBH test: every eigenvalue `λ` of `a` with `|λ| ≥ 1` must satisfy
/// `rank [a − λI, b] = n`.
pub fn is_stabilizable(a: &Mat, b: &Mat) -> bool {
    let n = a.nrows();
    for lambda in linalg::complex_eigenvalues(a) {
        if lambda.norm() < 1.0 {
            continue;
        }
        let mut pbh = nalgebra::DMatrix::<Complex<f64>>::zeros(n, n + b.ncols());
        for i in 0..n {
            for j in 0..n {
                let diag = if i == j { lambda } else { Complex::new(0.0, 0.0) };
                pbh[(i, j)] = Complex::new(a[(i, j)], 0.0) - diag;
            }
            for j in 0..b.ncols() {
                pbh[(i, n + j)] = Complex::new(b[(i, j)], 0.0);
            }
        }
        if linalg::complex_rank(&pbh, 1e-9) < n {
            return false;
        }
    }
    true
}

/// Checks every invariant of the specification; never fails, only reports.
pub fn validate(spec: &GameSpec, tol: &Tolerances) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = spec.players.len();
    if n == 0 {
        report.push("players", "at least one player is required (N >= 1)", Some(Assumption::Primitives));
        return report;
    }
    let stage_counts_ok = |len: usize| match spec.horizon {
        Horizon::Finite(t) => len == 1 || len == t,
        Horizon::Infinite => len == 1,
    };
    match spec.horizon {
        Horizon::Finite(0) => report.push("horizon", "finite horizon must satisfy T >= 1", Some(Assumption::Primitives)),
        Horizon::Finite(_) | Horizon::Infinite => {}
    }
    let env = &spec.environment;
    if env.stages.is_empty() || spec.noise.stages.is_empty() || spec.players.iter().any(|p| p.stages.is_empty()) {
        report.push("stages", "every stage list must be non-empty", Some(Assumption::Primitives));
        return report;
    }
    let ny = env.n_y();
    let n0 = env.n_env();

    for (i, p) in spec.players.iter().enumerate() {
        let field = format!("players[{i}]");
        if !stage_counts_ok(p.stages.len()) {
            let assumption = if spec.horizon.is_infinite() { Assumption::IidNoise } else { Assumption::Primitives };
            report.push(&field, "stage list length must be 1 or T (1 for infinite horizon)", Some(assumption));
            continue;
        }
        let (nx, nu) = (p.n_x(), p.n_u());
        for (t, s) in p.stages.iter().enumerate() {
            let sf = if p.stages.is_time_invariant() { field.clone() } else { format!("{field}[t={t}]") };
            if s.n_x() != nx || s.n_u() != nu {
                report.push(&sf, "player dimensions change across stages", Some(Assumption::Primitives));
                continue;
            }
            check_player_stage(&mut report, &sf, s, ny, tol);
        }
        match (spec.horizon, &p.q_terminal) {
            (Horizon::Finite(_), None) => {
                report.push(format!("{field}.Q_terminal"), "finite horizon requires Q_terminal", Some(Assumption::Primitives))
            }
            (Horizon::Finite(_), Some(qt)) => {
                if check_shape(&mut report, &format!("{field}.Q_terminal"), qt, nx, nx) {
                    check_pd(&mut report, &format!("{field}.Q_terminal"), qt, tol);
                }
            }
            (Horizon::Infinite, _) => {}
        }
        let beta_ok = match spec.horizon {
            Horizon::Finite(_) => (0.0..=1.0).contains(&p.beta),
            Horizon::Infinite => (0.0..1.0).contains(&p.beta),
        };
        if !beta_ok {
            report.push(
                format!("{field}.beta"),
                "beta must lie in [0,1] ([0,1) for infinite horizon)",
                Some(Assumption::Primitives),
            );
        }
    }

    if !stage_counts_ok(env.stages.len()) {
        let assumption = if spec.horizon.is_infinite() { Assumption::IidNoise } else { Assumption::Primitives };
        report.push("environment", "stage list length must be 1 or T (1 for infinite horizon)", Some(assumption));
    } else {
        for (t, s) in env.stages.iter().enumerate() {
            let f = |name: &str| {
                if env.stages.is_time_invariant() {
                    format!("environment.{name}")
                } else {
                    format!("environment[t={t}].{name}")
                }
            };
            check_shape(&mut report, &f("A0"), &s.a0, n0, n0);
            check_shape(&mut report, &f("D"), &s.d, ny, n0);
            for (name, list) in [("B1", &s.b1), ("B2", &s.b2), ("E1", &s.e1), ("E2", &s.e2)] {
                if list.len() != n {
                    report.push(f(name), format!("expected one matrix per player ({n}), got {}", list.len()), Some(Assumption::Primitives));
                    continue;
                }
                for (j, (m, p)) in list.iter().zip(&spec.players).enumerate() {
                    let (rows, cols) = match name {
                        "B1" => (n0, p.n_u()),
                        "B2" => (n0, p.n_x()),
                        "E1" => (ny, p.n_u()),
                        _ => (ny, p.n_x()),
                    };
                    check_shape(&mut report, &format!("{}[{j}]", f(name)), m, rows, cols);
                }
            }
        }
        if spec.horizon.is_infinite() && n0 > 0 {
            let a0 = &env.stage(0).a0;
            if a0.nrows() == n0 && a0.ncols() == n0 && linalg::spectral_radius(a0) >= 1.0 {
                report.push("environment.A0", "A0 not stable", Some(Assumption::StableEnvironment));
            }
        }
    }

    let n_state: usize = n0 + spec.players.iter().map(|p| p.n_x()).sum::<usize>();
    let noise = &spec.noise;
    check_moments(&mut report, "noise.x0", &noise.x0_mean, &noise.x0_cov, n_state, tol);
    if !stage_counts_ok(noise.stages.len()) {
        let assumption = if spec.horizon.is_infinite() { Assumption::IidNoise } else { Assumption::Primitives };
        report.push("noise", "per-stage moments must have length 1 or T (1 for infinite horizon)", Some(assumption));
    } else {
        for (t, s) in noise.stages.iter().enumerate() {
            let prefix = if noise.stages.is_time_invariant() { "noise".to_string() } else { format!("noise[t={t}]") };
            check_moments(&mut report, &format!("{prefix}.w"), &s.w_mean, &s.w_cov, n_state, tol);
            check_moments(&mut report, &format!("{prefix}.xi"), &s.xi_mean, &s.xi_cov, ny, tol);
        }
    }

    if spec.horizon.is_infinite() && report.is_valid() {
        for (i, p) in spec.players.iter().enumerate() {
            if !is_stabilizable(&p.stage(0).a, &p.stage(0).b) {
                report.push(format!("players[{i}]"), "(A_i, B_i) not stabilizable", Some(Assumption::StableEnvironment));
            }
        }
    }
    report
}

/// Whether players `i` and `j` are identical: equal dynamics, costs and
/// discount at every stage, and equal marginal moments of their initial
/// states and disturbances.
pub fn are_identical(spec: &GameSpec, i: usize, j: usize) -> Result<bool, crate::Error> {
    let n = spec.players.len();
    if i >= n || j >= n {
        return Err(crate::Error::Usage(format!("player index out of range (N = {n})")));
    }
    if i == j {
        return Ok(true);
    }
    let (pi, pj) = (&spec.players[i], &spec.players[j]);
    if pi.beta != pj.beta || pi.q_terminal != pj.q_terminal || pi.n_x() != pj.n_x() || pi.n_u() != pj.n_u() {
        return Ok(false);
    }
    let stages = pi.stages.len().max(pj.stages.len());
    if (0..stages).any(|t| pi.stage(t) != pj.stage(t)) {
        return Ok(false);
    }
    let dims = stack_dimensions(spec);
    let (ri, rj) = (dims.players[i].x.clone(), dims.players[j].x.clone());
    let noise = &spec.noise;
    let same_moments = |mean: &Vector, cov: &Mat| {
        mean.rows_range(ri.clone()) == mean.rows_range(rj.clone())
            && cov.view_range(ri.clone(), ri.clone()) == cov.view_range(rj.clone(), rj.clone())
    };
    if !same_moments(&noise.x0_mean, &noise.x0_cov) {
        return Ok(false);
    }
    Ok(noise.stages.iter().all(|s| same_moments(&s.w_mean, &s.w_cov)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlayerBlock {
    pub x: Range<usize>,
    pub u: Range<usize>,
}

/// Block layout of the stacked state `(x⁰, x¹, …, xᴺ)` and the stacked
/// decision vector `(u¹, …, uᴺ)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DimensionTable {
    pub env: Range<usize>,
    pub players: Vec<PlayerBlock>,
    pub n_state: usize,
    pub n_control: usize,
    pub n_y: usize,
}

impl DimensionTable {
    pub fn n_players(&self) -> usize {
        self.players.len()
    }
}

pub fn stack_dimensions(spec: &GameSpec) -> DimensionTable {
    let n0 = spec.environment.n_env();
    let mut x_at = n0;
    let mut u_at = 0;
    let players = spec
        .players
        .iter()
        .map(|p| {
            let block = PlayerBlock { x: x_at..x_at + p.n_x(), u: u_at..u_at + p.n_u() };
            x_at += p.n_x();
            u_at += p.n_u();
            block
        })
        .collect();
    DimensionTable { env: 0..n0, players, n_state: x_at, n_control: u_at, n_y: spec.environment.n_y() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::scalar_game;

    #[test]
    fn scalar_infinite_spec_is_valid() {
        let spec = scalar_game(1.0, 1.0, 1.0, 1.0, 0.9, 0.5, Horizon::Infinite);
        let report = validate(&spec, &Tolerances::default());
        assert!(report.is_valid(), "{report}");
    }

    #[test]
    fn zero_r_is_rejected() {
        let spec = scalar_game(1.0, 1.0, 1.0, 0.0, 0.9, 0.5, Horizon::Infinite);
        let report = validate(&spec, &Tolerances::default());
        assert!(report.mentions("R_i not positive definite"), "{report}");
    }

    #[test]
    fn unstable_environment_is_rejected() {
        let spec = scalar_game(1.0, 1.0, 1.0, 1.0, 0.9, 1.0, Horizon::Infinite);
        let report = validate(&spec, &Tolerances::default());
        assert!(report.mentions("A0 not stable"), "{report}");
        assert_eq!(report.issues[0].assumption, Some(Assumption::StableEnvironment));
        // The same data is fine for a finite horizon.
        let finite = scalar_game(1.0, 1.0, 1.0, 1.0, 0.9, 1.0, Horizon::Finite(3));
        assert!(validate(&finite, &Tolerances::default()).is_valid());
    }

    #[test]
    fn empty_player_list_is_rejected() {
        let mut spec = scalar_game(1.0, 1.0, 1.0, 1.0, 0.9, 0.5, Horizon::Infinite);
        spec.players.clear();
        assert!(validate(&spec, &Tolerances::default()).mentions("N >= 1"));
    }

    #[test]
    fn validation_is_idempotent() {
        let spec = scalar_game(1.0, 1.0, 1.0, 0.0, 1.5, 1.2, Horizon::Infinite);
        let tol = Tolerances::default();
        assert_eq!(validate(&spec, &tol), validate(&spec, &tol));
    }

    #[test]
    fn stabilizability_pbh() {
        let a = Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        assert!(is_stabilizable(&a, &Mat::from_row_slice(2, 1, &[1.0, 0.0])));
        assert!(!is_stabilizable(&a, &Mat::from_row_slice(2, 1, &[0.0, 1.0])));
    }

    #[test]
    fn dimension_table_layout() {
        use crate::fixtures::GameBuilder;
        let spec = GameBuilder::new(1, 1).player(2, 1).player(2, 1).finite(2).build();
        let dims = stack_dimensions(&spec);
        assert_eq!(dims.n_state, 5);
        assert_eq!(dims.players[0].x, 1..3);
        assert_eq!(dims.players[1].x, 3..5);
        assert_eq!(dims.env, 0..1);

        let spec = GameBuilder::new(3, 1).player(1, 1).finite(2).build();
        assert_eq!(stack_dimensions(&spec).n_state, 4);
    }

    #[test]
    fn identical_players() {
        use crate::fixtures::GameBuilder;
        let spec = GameBuilder::new(1, 1).player(1, 1).player(1, 1).finite(2).build();
        assert!(are_identical(&spec, 0, 1).unwrap());
        assert!(are_identical(&spec, 1, 1).unwrap());
        assert!(are_identical(&spec, 0, 2).is_err());

        let mut beta = spec.clone();
        beta.players[1].beta = 0.5;
        assert!(!are_identical(&beta, 0, 1).unwrap());

        let mut cov = spec.clone();
        let s = &mut cov.noise.stages.0[0];
        s.w_cov[(2, 2)] = 3.0;
        assert!(!are_identical(&cov, 0, 1).unwrap());
    }
}
