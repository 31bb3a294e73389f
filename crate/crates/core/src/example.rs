//! Two-stage game with `N` identical players who observe the population
//! average through noise, `y_t = avg_j x_t^j + ξ_t`.
//!
//! Closed forms for the equilibrium gains, the exact Nash best response of
//! one player against the others' equilibrium strategies, and a paired
//! Monte Carlo estimate of the ε-Nash gap.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::{
    EnvStage, EnvironmentSpec, GameSpec, Horizon, NoiseFamily, NoiseSpec, NoiseStage, PlayerSpec, PlayerStage, Staged,
};
use crate::simulate::{path_rng, CostSummary, Sampler, ScalarSums, CHUNK};

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleSpec {
    /// Player data at stages 0 and 1; `y` has the dimension of `x`.
    pub stages: [PlayerStage; 2],
    pub q_terminal: Mat,
    pub beta: f64,
    /// Per-player `cov[x_0]`.
    pub x0_cov: Mat,
    /// Per-player `E[x_0]`; the closed forms need it to vanish.
    pub x0_mean: Option<Vector>,
    pub xi_cov: [Mat; 2],
    pub w_cov: [Mat; 2],
}

impl Default for ExampleSpec {
    /// Scalar data `A = B = Q = R = β = 1`, `C = 0.1`, `cov[x_0] = 1`,
    /// `cov[ξ_0] = 4`, `cov[ξ_1] = cov[w_t] = 1`.
    fn default() -> Self {
        let s = |v: f64| Mat::from_element(1, 1, v);
        let stage = PlayerStage { a: s(1.0), b: s(1.0), c: s(0.1), q: s(1.0), r: s(1.0), k: s(0.0), l: s(0.0) };
        ExampleSpec {
            stages: [stage.clone(), stage],
            q_terminal: s(1.0),
            beta: 1.0,
            x0_cov: s(1.0),
            x0_mean: None,
            xi_cov: [s(4.0), s(1.0)],
            w_cov: [s(1.0), s(1.0)],
        }
    }
}

impl ExampleSpec {
    pub fn n_x(&self) -> usize {
        self.stages[0].a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.stages[0].b.ncols()
    }

    pub fn check(&self) -> Result<()> {
        let (nx, nu) = (self.n_x(), self.n_u());
        let mut bad = Vec::new();
        for (t, s) in self.stages.iter().enumerate() {
            for (name, m, r, c) in [
                ("A", &s.a, nx, nx),
                ("B", &s.b, nx, nu),
                ("C", &s.c, nx, nx),
                ("Q", &s.q, nx, nx),
                ("R", &s.r, nu, nu),
                ("K", &s.k, nx, nu),
                ("L", &s.l, nx, nx),
            ] {
                if m.shape() != (r, c) {
                    bad.push(format!("{name}_{t} is {}x{}, expected {r}x{c}", m.nrows(), m.ncols()));
                }
            }
        }
        for (name, m) in [
            ("Q_2", &self.q_terminal),
            ("cov[x_0]", &self.x0_cov),
            ("cov[xi_0]", &self.xi_cov[0]),
            ("cov[xi_1]", &self.xi_cov[1]),
            ("cov[w_0]", &self.w_cov[0]),
            ("cov[w_1]", &self.w_cov[1]),
        ] {
            if m.shape() != (nx, nx) {
                bad.push(format!("{name} is {}x{}, expected {nx}x{nx}", m.nrows(), m.ncols()));
            }
        }
        if let Some(m) = &self.x0_mean {
            if m.len() != nx {
                bad.push(format!("E[x_0] has length {}, expected {nx}", m.len()));
            }
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            bad.push("beta must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Usage(bad.join("; ")))
        }
    }

    /// The same game in the general form, `N` players and no environment state.
    pub fn as_game(&self, n: usize) -> GameSpec {
        let nx = self.n_x();
        let scale = 1.0 / n as f64;
        let player = PlayerSpec {
            stages: Staged(self.stages.to_vec()),
            q_terminal: Some(self.q_terminal.clone()),
            beta: self.beta,
        };
        let env = EnvStage {
            a0: Mat::zeros(0, 0),
            b1: vec![Mat::zeros(0, self.n_u()); n],
            b2: vec![Mat::zeros(0, nx); n],
            d: Mat::zeros(nx, 0),
            e1: vec![Mat::zeros(nx, self.n_u()); n],
            e2: vec![Mat::identity(nx, nx) * scale; n],
        };
        let mean = self.x0_mean.clone().unwrap_or_else(|| Vector::zeros(nx));
        let x0_means: Vec<&Vector> = vec![&mean; n];
        let x0_covs: Vec<&Mat> = vec![&self.x0_cov; n];
        let noise_stage = |t: usize| {
            let w: Vec<&Mat> = vec![&self.w_cov[t]; n];
            NoiseStage {
                w_mean: Vector::zeros(n * nx),
                w_cov: linalg::block_diag(&w),
                xi_mean: Vector::zeros(nx),
                xi_cov: self.xi_cov[t].clone(),
            }
        };
        GameSpec {
            players: vec![player; n],
            environment: EnvironmentSpec { stages: Staged::constant(env) },
            noise: NoiseSpec {
                x0_mean: linalg::vec_concat(&x0_means),
                x0_cov: linalg::block_diag(&x0_covs),
                stages: Staged(vec![noise_stage(0), noise_stage(1)]),
                family: NoiseFamily::Gaussian,
            },
            horizon: Horizon::Finite(2),
        }
    }
}

/// Optimal-response gains of the two-stage problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleGains {
    pub f0: Mat,
    pub f1: Mat,
    pub g00: Mat,
    pub g01: Mat,
    pub g11: Mat,
    pub m1: Mat,
    pub s0: Mat,
    pub s1: Mat,
}

fn inverse(m: &Mat, what: &str) -> Result<Mat> {
    m.clone().try_inverse().ok_or_else(|| Error::Usage(format!("{what} is singular")))
}

fn pinv(m: &Mat) -> Mat {
    if m.nrows() == 0 {
        return m.clone();
    }
    m.clone().pseudo_inverse(1e-14 * m.norm().max(1.0)).unwrap_or_else(|_| Mat::zeros(m.ncols(), m.nrows()))
}

pub fn example_gains(ex: &ExampleSpec) -> Result<ExampleGains> {
    ex.check()?;
    let [s0, s1] = &ex.stages;
    let beta = ex.beta;
    let q2 = &ex.q_terminal;
    let hess1 = &s1.r + beta * s1.b.transpose() * q2 * &s1.b;
    let inv1 = inverse(&hess1, "S_1")?;
    let f1 = -beta * &inv1 * s1.b.transpose() * q2 * &s1.a;
    let g11 = -&inv1 * (s1.k.transpose() + beta * s1.b.transpose() * q2 * &s1.c);
    let mut m1 = &s1.q + beta * s1.a.transpose() * q2 * (&s1.a + &s1.b * &f1);
    linalg::symmetrize(&mut m1);
    let hess0 = &s0.r + beta * s0.b.transpose() * &m1 * &s0.b;
    let inv0 = inverse(&hess0, "S_0")?;
    let f0 = -beta * &inv0 * s0.b.transpose() * &m1 * &s0.a;
    let g00 = -&inv0 * (s0.k.transpose() + beta * s0.b.transpose() * &m1 * &s0.c);
    let carry = beta * (&s1.a + &s1.b * &f1).transpose() * q2 * &s1.c + f1.transpose() * s1.k.transpose() + s1.l.transpose();
    let g01 = -beta * &inv0 * s0.b.transpose() * carry;
    Ok(ExampleGains { f0, f1, g00, g01, g11, m1, s0: hess0, s1: hess1 })
}

/// Equilibrium prediction `E[y_1]` made at stage 0. Fails when the linear
/// system `(I − B_0 G_{0,1}) ŷ_1 = (A_0 + B_0(F_0 + G_{0,0}) + C_0) E[x_0]`
/// has no solution or more than one.
pub fn initial_prediction(ex: &ExampleSpec, gains: &ExampleGains) -> Result<Vector> {
    let nx = ex.n_x();
    let s0 = &ex.stages[0];
    let mean = ex.x0_mean.clone().unwrap_or_else(|| Vector::zeros(nx));
    let lhs = Mat::identity(nx, nx) - &s0.b * &gains.g01;
    let rhs = (&s0.a + &s0.b * (&gains.f0 + &gains.g00) + &s0.c) * &mean;
    let svd = lhs.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = 1e-12 * smax.max(1.0) * nx as f64;
    let nullity = svd.singular_values.iter().filter(|s| **s <= cutoff).count();
    if nullity == 0 {
        return Ok(lhs.lu().solve(&rhs).expect("nonsingular"));
    }
    let candidate = svd.solve(&rhs, cutoff).map_err(|e| Error::Usage(e.to_string()))?;
    let residual = linalg::max_abs_vec(&(&lhs * &candidate - &rhs));
    if residual > 1e-10 * (1.0 + linalg::max_abs_vec(&rhs)) {
        Err(Error::NoEquilibrium(format!(
            "I - B_0 G_01 is singular and the stage-0 prediction equations are inconsistent (residual {residual:.3e}); \
             no equilibrium exists"
        )))
    } else {
        Err(Error::NoEquilibrium(format!(
            "I - B_0 G_01 is singular with null space of dimension {nullity}; every prediction in an affine \
             family of that dimension is an equilibrium, so it is not unique"
        )))
    }
}

/// Equilibrium strategies `u_0 = F_0 x_0`, `u_1 = F_1 x_1 + G_1^N y_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleSebeu {
    pub n: usize,
    pub f0: Mat,
    pub f1: Mat,
    pub g1: Mat,
    /// `lim_{N→∞} G_1^N = G_{1,1} C_0`.
    pub g1_limit: Mat,
}

fn require_zero_mean(ex: &ExampleSpec) -> Result<()> {
    match &ex.x0_mean {
        Some(m) if m.iter().any(|v| *v != 0.0) => {
            Err(Error::Usage("closed-form gains assume E[x_0] = 0".into()))
        }
        _ => Ok(()),
    }
}

pub fn example_sebeu(ex: &ExampleSpec, gains: &ExampleGains, n: usize) -> Result<ExampleSebeu> {
    if n == 0 {
        return Err(Error::Usage("N must be positive".into()));
    }
    initial_prediction(ex, gains)?;
    require_zero_mean(ex)?;
    let s0 = &ex.stages[0];
    let abar = &s0.a + &s0.b * &gains.f0;
    let var = &ex.x0_cov / n as f64;
    let weight = &var * pinv(&(&var + &ex.xi_cov[0]));
    let g1 = &gains.g11 * (abar * weight + &s0.c);
    Ok(ExampleSebeu { n, f0: gains.f0.clone(), f1: gains.f1.clone(), g1, g1_limit: &gains.g11 * &s0.c })
}

/// Player 1's best response when everyone else plays the equilibrium:
/// `u_0 = F̃_0 x_0`, `u_1 = F̃_1 x_1 + G̃_1 y_0 + F̃_{1,0} x_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleBestResponse {
    pub n: usize,
    pub f0: Mat,
    pub f1: Mat,
    pub g1: Mat,
    pub f10: Mat,
    /// Stage-1 value `[x; ŷ]' V [x; ŷ]` up to a constant.
    pub value: Mat,
}

pub fn example_best_response(ex: &ExampleSpec, gains: &ExampleGains, n: usize) -> Result<ExampleBestResponse> {
    if n == 0 {
        return Err(Error::Usage("N must be positive".into()));
    }
    initial_prediction(ex, gains)?;
    require_zero_mean(ex)?;
    let nx = ex.n_x();
    let nf = n as f64;
    let [s0, s1] = &ex.stages;
    let (beta, q2) = (ex.beta, &ex.q_terminal);

    // E[avg of the others' x_0 | y_0, x_0] = κ (y_0 − x_0 / N).
    let others = &ex.x0_cov * ((nf - 1.0) / (nf * nf));
    let kappa = &others * pinv(&(&others + &ex.xi_cov[0]));
    let abar = &s0.a + &s0.b * &gains.f0;
    // ŷ_1 = x_1 / N + Ā κ (y_0 − x_0/N) + (N−1)/N C_0 y_0
    let f1 = &gains.f1 + &gains.g11 / nf;
    let g1 = &gains.g11 * (&abar * &kappa + &s0.c * ((nf - 1.0) / nf));
    let f10 = -(&gains.g11 * &abar * &kappa) / nf;

    let inv1 = inverse(&gains.s1, "S_1")?;
    let w = s1.k.transpose() + beta * s1.b.transpose() * q2 * &s1.c;
    let vxy = s1.l.transpose() + beta * s1.a.transpose() * q2 * &s1.c
        - beta * s1.a.transpose() * q2 * &s1.b * &inv1 * &w;
    let vyy = beta * s1.c.transpose() * q2 * &s1.c - w.transpose() * &inv1 * &w;
    let mut value = Mat::zeros(2 * nx, 2 * nx);
    linalg::set_block(&mut value, 0, 0, &gains.m1);
    linalg::set_block(&mut value, 0, nx, &vxy);
    linalg::set_block(&mut value, nx, 0, &vxy.transpose());
    linalg::set_block(&mut value, nx, nx, &vyy);
    linalg::symmetrize(&mut value);

    let mut px = Mat::zeros(2 * nx, nx);
    linalg::set_block(&mut px, 0, 0, &(&s0.a + &s0.c / nf));
    linalg::set_block(&mut px, nx, 0, &((&s0.a + &s0.c) / nf));
    let mut pu = Mat::zeros(2 * nx, ex.n_u());
    linalg::set_block(&mut pu, 0, 0, &s0.b);
    linalg::set_block(&mut pu, nx, 0, &(&s0.b / nf));
    let hess = &s0.r + beta * pu.transpose() * &value * &pu;
    let f0 = -inverse(&hess, "stage-0 best-response Hessian")? * (s0.k.transpose() / nf + beta * pu.transpose() * &value * &px);
    Ok(ExampleBestResponse { n, f0, f1, g1, f10, value })
}

/// Closed-form quantities at one population size.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleRow {
    pub n: usize,
    pub sebeu: ExampleSebeu,
    pub best: ExampleBestResponse,
    /// `|G_1^N − G_{1,1} C_0|`.
    pub g1_limit_gap: f64,
    /// `|F̃_0 − F_0|`, `|F̃_1 − F_1|`, `|G̃_1 − G_1^N|`, `|F̃_{1,0}|`.
    pub f0_gap: f64,
    pub f1_gap: f64,
    pub g1_gap: f64,
    pub f10_gap: f64,
}

pub fn example_row(ex: &ExampleSpec, gains: &ExampleGains, n: usize) -> Result<ExampleRow> {
    let sebeu = example_sebeu(ex, gains, n)?;
    let best = example_best_response(ex, gains, n)?;
    Ok(ExampleRow {
        n,
        g1_limit_gap: linalg::max_abs(&(&sebeu.g1 - &sebeu.g1_limit)),
        f0_gap: linalg::max_abs(&(&best.f0 - &sebeu.f0)),
        f1_gap: linalg::max_abs(&(&best.f1 - &sebeu.f1)),
        g1_gap: linalg::max_abs(&(&best.g1 - &sebeu.g1)),
        f10_gap: linalg::max_abs(&best.f10),
        sebeu,
        best,
    })
}

/// Log-log slope of `gap(row)` against `N`.
pub fn gap_slope(rows: &[ExampleRow], gap: impl Fn(&ExampleRow) -> f64) -> f64 {
    let x: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let y: Vec<f64> = rows.iter().map(gap).collect();
    linalg::loglog_slope(&x, &y)
}

/// Paired estimate of `J_1(equilibrium) − J_1(best response)` in the true
/// `N`-player closed loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonNash {
    pub n: usize,
    pub paths: usize,
    pub seed: u64,
    pub gap: CostSummary,
    pub equilibrium_cost: CostSummary,
}

fn stage_cost(s: &PlayerStage, x: &Vector, u: &Vector, y: &Vector) -> f64 {
    x.dot(&(&s.q * x)) + u.dot(&(&s.r * u)) + 2.0 * y.dot(&(&s.k * u + &s.l * x))
}

pub fn epsilon_nash_gap(ex: &ExampleSpec, gains: &ExampleGains, n: usize, paths: usize, seed: u64) -> Result<EpsilonNash> {
    if paths < 2 {
        return Err(Error::Usage("at least two paths are required".into()));
    }
    let eq = example_sebeu(ex, gains, n)?;
    let br = example_best_response(ex, gains, n)?;
    let nx = ex.n_x();
    let zero = Vector::zeros(nx);
    let x0 = Sampler::new(&zero, &ex.x0_cov, 0.0);
    let xi = [Sampler::new(&zero, &ex.xi_cov[0], 0.0), Sampler::new(&zero, &ex.xi_cov[1], 0.0)];
    let w = [Sampler::new(&zero, &ex.w_cov[0], 0.0), Sampler::new(&zero, &ex.w_cov[1], 0.0)];
    let [s0, s1] = &ex.stages;
    let nf = n as f64;
    let beta = ex.beta;
    let abar = &s0.a + &s0.b * &gains.f0;

    let chunks: Vec<(ScalarSums, ScalarSums)> = (0..paths.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut gap = ScalarSums::default();
            let mut cost = ScalarSums::default();
            let mut z = Vector::zeros(nx);
            let (mut a, mut b) = (Vector::zeros(nx), Vector::zeros(nx));
            for path in c * CHUNK..((c + 1) * CHUNK).min(paths) {
                let mut env = path_rng(seed, path, 0);
                let mut xi0 = Vector::zeros(nx);
                let mut xi1 = Vector::zeros(nx);
                xi[0].sample_into(&mut env, &mut z, &mut xi0);
                xi[1].sample_into(&mut env, &mut z, &mut xi1);
                // Player 1 draws x_0, w_0, w_1; the others only need x_0, w_0.
                let mut own = path_rng(seed, path, 1);
                let mut x0_own = Vector::zeros(nx);
                let (mut w0_own, mut w1_own) = (Vector::zeros(nx), Vector::zeros(nx));
                x0.sample_into(&mut own, &mut z, &mut x0_own);
                w[0].sample_into(&mut own, &mut z, &mut w0_own);
                w[1].sample_into(&mut own, &mut z, &mut w1_own);
                let mut sum_x0 = x0_own.clone();
                let mut sum_w0 = Vector::zeros(nx);
                let mut others_x0 = Vector::zeros(nx);
                for j in 1..n {
                    let mut rng = path_rng(seed, path, 1 + j);
                    x0.sample_into(&mut rng, &mut z, &mut a);
                    w[0].sample_into(&mut rng, &mut z, &mut b);
                    sum_x0 += &a;
                    others_x0 += &a;
                    sum_w0 += &b;
                }
                let y0 = &sum_x0 / nf + &xi0;
                // Σ_{j≠1} x_1^j, identical under both profiles.
                let others_x1 = &abar * &others_x0 + &s0.c * &y0 * (nf - 1.0) + &sum_w0;
                let run = |u0: Vector, stage1: &dyn Fn(&Vector) -> Vector| {
                    let x1 = &s0.a * &x0_own + &s0.b * &u0 + &s0.c * &y0 + &w0_own;
                    let y1 = (&others_x1 + &x1) / nf + &xi1;
                    let u1 = stage1(&x1);
                    let x2 = &s1.a * &x1 + &s1.b * &u1 + &s1.c * &y1 + &w1_own;
                    stage_cost(s0, &x0_own, &u0, &y0)
                        + beta * stage_cost(s1, &x1, &u1, &y1)
                        + beta * beta * x2.dot(&(&ex.q_terminal * &x2))
                };
                let j_eq = run(&eq.f0 * &x0_own, &|x1| &eq.f1 * x1 + &eq.g1 * &y0);
                let j_br = run(&br.f0 * &x0_own, &|x1| &br.f1 * x1 + &br.g1 * &y0 + &br.f10 * &x0_own);
                gap.add(j_eq - j_br);
                cost.add(j_eq);
            }
            (gap, cost)
        })
        .collect();
    let (mut gap, mut cost) = (ScalarSums::default(), ScalarSums::default());
    for (g, c) in &chunks {
        gap.merge(g);
        cost.merge(c);
    }
    Ok(EpsilonNash { n, paths, seed, gap: gap.summary(), equilibrium_cost: cost.summary() })
}

/// `true` when each gap is below its predecessor up to `z` combined standard errors.
pub fn gaps_nonincreasing(gaps: &[EpsilonNash], z: f64) -> bool {
    gaps.windows(2).all(|w| {
        let (a, b) = (w[0].gap, w[1].gap);
        b.mean <= a.mean + z * (a.stderr * a.stderr + b.stderr * b.stderr).sqrt()
    })
}

/// Row-major entries of `m` as `name[i,j]` columns.
fn entries(name: &str, m: &Mat, header: &mut Vec<String>, values: &mut Vec<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            header.push(if m.len() == 1 { name.to_string() } else { format!("{name}[{i},{j}]") });
            values.push(m[(i, j)]);
        }
    }
}

/// One row per population size: equilibrium gains, best-response gains and
/// the gaps.
pub fn rows_csv(rows: &[ExampleRow]) -> String {
    let mut out = String::new();
    for (k, r) in rows.iter().enumerate() {
        let mut header = vec!["n".to_string()];
        let mut values = Vec::new();
        for (name, m) in [
            ("f0", &r.sebeu.f0),
            ("f1", &r.sebeu.f1),
            ("g1", &r.sebeu.g1),
            ("g1_limit", &r.sebeu.g1_limit),
            ("br_f0", &r.best.f0),
            ("br_f1", &r.best.f1),
            ("br_g1", &r.best.g1),
            ("br_f10", &r.best.f10),
        ] {
            entries(name, m, &mut header, &mut values);
        }
        header.extend(["g1_limit_gap", "f0_gap", "f1_gap", "g1_gap", "f10_gap"].map(String::from));
        values.extend([r.g1_limit_gap, r.f0_gap, r.f1_gap, r.g1_gap, r.f10_gap]);
        if k == 0 {
            writeln!(out, "{}", header.join(",")).unwrap();
        }
        write!(out, "{}", r.n).unwrap();
        for v in values {
            write!(out, ",{v:e}").unwrap();
        }
        out.push('\n');
    }
    out
}
