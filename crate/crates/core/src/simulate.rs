//! Seeded Monte Carlo for the objective closed loop, the subjective
//! exogenous model and finite mean-field populations.
//!
//! Every path draws from its own ChaCha8 stream keyed by `(seed, path,
//! lane)`, and paths are processed in fixed-size chunks whose partial sums
//! are combined in chunk order. Results are therefore bit-identical for any
//! number of worker threads.

use std::fmt::Write as _;
use std::io::{self, Write};

use nalgebra::DVectorView;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimator::{state_labels, ClosedLoopModel, FilterPlan};
use crate::linalg::{self, Mat, Vector};
use crate::model::{stack_dimensions, GameSpec, Horizon, NoiseFamily, NoiseSpec, PlayerStage};
use crate::pipeline::MeanFieldSolution;
use crate::strategy::{AffineStrategy, StrategyProfile};
use crate::tolerances::Tolerances;

/// Paths per work unit.
pub const CHUNK: usize = 256;

/// Per-path random stream. Lane 0 is the shared environment, lane `1 + i`
/// belongs to player `i`.
pub fn path_rng(seed: u64, path: usize, lane: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((path as u64) << 24) | lane as u64);
    rng
}

/// Independent seed for a named sub-experiment (splitmix64 over an FNV-1a tag hash).
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Smallest `T` with `β^T` below `tail`.
pub fn truncation_horizon(beta: f64, tail: f64) -> usize {
    if beta <= 0.0 {
        return 1;
    }
    if beta >= 1.0 {
        return usize::MAX;
    }
    ((tail.ln() / beta.ln()).floor() as usize + 1).max(1)
}

#[derive(Debug, Clone)]
pub struct Sampler {
    pub mean: Vector,
    pub factor: Mat,
}

impl Sampler {
    pub fn new(mean: &Vector, cov: &Mat, clip: f64) -> Self {
        Sampler { mean: mean.clone(), factor: linalg::psd_factor(cov, clip) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample_into(&self, rng: &mut ChaCha8Rng, z: &mut Vector, out: &mut Vector) {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        out.copy_from(&self.mean);
        out.gemv(1.0, &self.factor, z, 1.0);
    }
}

/// Samplers for the stacked primitives `X_0`, `ξ_t`, `W_t`. Draw order on a
/// stream is `X_0`, then `ξ_t, W_t` for each stage.
#[derive(Debug, Clone)]
pub struct Primitives {
    pub x0: Sampler,
    pub xi: Vec<Sampler>,
    pub w: Vec<Sampler>,
}

impl Primitives {
    pub fn new(noise: &NoiseSpec, clip: f64) -> Self {
        Primitives {
            x0: Sampler::new(&noise.x0_mean, &noise.x0_cov, clip),
            xi: noise.stages.iter().map(|s| Sampler::new(&s.xi_mean, &s.xi_cov, clip)).collect(),
            w: noise.stages.iter().map(|s| Sampler::new(&s.w_mean, &s.w_cov, clip)).collect(),
        }
    }

    fn from_model(model: &ClosedLoopModel, clip: f64) -> Self {
        Primitives {
            x0: Sampler::new(&model.x0_mean, &model.x0_cov, clip),
            xi: model.stages.iter().map(|s| Sampler::new(&s.xi_mean, &s.xi_cov, clip)).collect(),
            w: model.stages.iter().map(|s| Sampler::new(&s.w_mean, &s.w_cov, clip)).collect(),
        }
    }

    pub fn xi(&self, t: usize) -> &Sampler {
        &self.xi[if self.xi.len() == 1 { 0 } else { t }]
    }

    pub fn w(&self, t: usize) -> &Sampler {
        &self.w[if self.w.len() == 1 { 0 } else { t }]
    }
}

/// One player's marginal `x_0` and `w_t` samplers.
fn player_primitives(noise: &NoiseSpec, range: std::ops::Range<usize>, clip: f64) -> Primitives {
    let sub_v = |v: &Vector| v.rows_range(range.clone()).into_owned();
    let sub_m = |m: &Mat| m.view((range.start, range.start), (range.len(), range.len())).into_owned();
    Primitives {
        x0: Sampler::new(&sub_v(&noise.x0_mean), &sub_m(&noise.x0_cov), clip),
        xi: Vec::new(),
        w: noise.stages.iter().map(|s| Sampler::new(&sub_v(&s.w_mean), &sub_m(&s.w_cov), clip)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub paths: usize,
    pub seed: u64,
    /// Simulated stages; `None` uses the game horizon or, for an infinite
    /// horizon, the discount truncation.
    pub horizon: Option<usize>,
    /// Keep per-path trajectories.
    pub record: bool,
}

impl SimOptions {
    pub fn new(paths: usize, seed: u64) -> Self {
        SimOptions { paths, seed, horizon: None, record: false }
    }

    pub fn horizon(mut self, horizon: usize) -> Self {
        self.horizon = Some(horizon);
        self
    }

    pub fn recording(mut self) -> Self {
        self.record = true;
        self
    }
}

/// Stage count used for a game. Costs of a finite game include the terminal
/// term only when the full horizon is simulated.
pub fn simulation_horizon(spec: &GameSpec, opts: &SimOptions, tol: &Tolerances) -> usize {
    let natural = match spec.horizon {
        Horizon::Finite(t) => t,
        Horizon::Infinite => {
            let beta = spec.players.iter().map(|p| p.beta).fold(0.0, f64::max);
            truncation_horizon(beta, tol.discount_tail)
        }
    };
    opts.horizon.unwrap_or(natural)
}

/// Sample mean and covariance of a vector observed at each stage.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSums {
    pub count: usize,
    pub sum: Vec<Vector>,
    pub outer: Vec<Mat>,
}

impl MomentSums {
    pub fn new(horizon: usize, dim: usize) -> Self {
        MomentSums { count: 0, sum: vec![Vector::zeros(dim); horizon], outer: vec![Mat::zeros(dim, dim); horizon] }
    }

    pub fn add(&mut self, t: usize, v: &Vector) {
        self.sum[t] += v;
        self.outer[t].ger(1.0, v, v, 1.0);
    }

    pub fn merge(&mut self, other: &MomentSums) {
        self.count += other.count;
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.outer.iter_mut().zip(&other.outer) {
            *a += b;
        }
    }

    pub fn summary(&self) -> MomentSummary {
        let n = self.count as f64;
        let mean: Vec<Vector> = self.sum.iter().map(|s| s / n).collect();
        let cov = self
            .outer
            .iter()
            .zip(&mean)
            .map(|(o, m)| {
                let mut c = (o - m * m.transpose() * n) / (n - 1.0);
                linalg::symmetrize(&mut c);
                c
            })
            .collect();
        MomentSummary { paths: self.count, mean, cov }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentSummary {
    pub paths: usize,
    pub mean: Vec<Vector>,
    pub cov: Vec<Mat>,
}

impl MomentSummary {
    pub fn stderr(&self, t: usize, i: usize) -> f64 {
        (self.cov[t][(i, i)] / self.paths as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostSummary {
    pub mean: f64,
    pub stderr: f64,
}

/// Running sum and sum of squares of a scalar sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScalarSums {
    pub sum: f64,
    pub sumsq: f64,
    pub count: usize,
}

impl ScalarSums {
    pub fn add(&mut self, v: f64) {
        self.sum += v;
        self.sumsq += v * v;
        self.count += 1;
    }

    pub fn merge(&mut self, o: &ScalarSums) {
        self.sum += o.sum;
        self.sumsq += o.sumsq;
        self.count += o.count;
    }

    pub fn summary(&self) -> CostSummary {
        let n = self.count as f64;
        let mean = self.sum / n;
        let var = ((self.sumsq - n * mean * mean) / (n - 1.0)).max(0.0);
        CostSummary { mean, stderr: (var / n).sqrt() }
    }
}

/// Per-path trajectories, row-major `[path][row][var]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectories {
    pub n_var: usize,
    /// Stages plus one: the last row holds the final state and `NaN` for
    /// the environment and decisions.
    pub n_rows: usize,
    pub paths: usize,
    pub data: Vec<f64>,
    /// `[path][player]` discounted costs.
    pub costs: Vec<f64>,
}

impl Trajectories {
    pub fn row(&self, path: usize, row: usize) -> &[f64] {
        let at = (path * self.n_rows + row) * self.n_var;
        &self.data[at..at + self.n_var]
    }

    /// Little-endian dump: magic `SEBEUTRJ`, then `n_var`, `n_rows`, `paths`
    /// as `u64`, then the data as `f64`.
    pub fn write_binary<W: Write>(&self, mut out: W) -> io::Result<()> {
        out.write_all(b"SEBEUTRJ")?;
        for v in [self.n_var, self.n_rows, self.paths] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationBatch {
    pub seed: u64,
    pub paths: usize,
    pub horizon: usize,
    /// Names of the coordinates of `[X_t; y_t]`.
    pub labels: Vec<String>,
    pub moments: MomentSummary,
    /// Discounted cost per player.
    pub costs: Vec<CostSummary>,
    /// Mean discounted stage cost `β^t E[c_t]` per player and stage.
    pub stage_cost_mean: Vec<Vec<f64>>,
    /// Bound on the cost beyond the simulated horizon (zero for a fully
    /// simulated finite game).
    pub tail_bound: Vec<f64>,
    pub trajectories: Option<Trajectories>,
}

impl SimulationBatch {
    /// Rows `t,var,mean,stderr` for every stage and coordinate of
    /// `[X_t; y_t]`, then `total,J[i],mean,stderr` per player.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("t,var,mean,stderr\n");
        for t in 0..self.horizon {
            for (i, label) in self.labels.iter().enumerate() {
                writeln!(out, "{t},{label},{:e},{:e}", self.moments.mean[t][i], self.moments.stderr(t, i)).unwrap();
            }
        }
        for (i, c) in self.costs.iter().enumerate() {
            writeln!(out, "total,J[{}],{:e},{:e}", i + 1, c.mean, c.stderr).unwrap();
        }
        out
    }
}

fn require_gaussian(family: NoiseFamily) -> Result<()> {
    match family {
        NoiseFamily::Gaussian => Ok(()),
        other => Err(Error::NonGaussian(other.to_string())),
    }
}

/// Scratch space for `x'Qx + u'Ru + 2y'(Ku + Lx)`.
struct CostScratch {
    tx: Vector,
    tu: Vector,
    ty: Vector,
}

impl CostScratch {
    fn new(nx: usize, nu: usize, ny: usize) -> Self {
        CostScratch { tx: Vector::zeros(nx), tu: Vector::zeros(nu), ty: Vector::zeros(ny) }
    }

    fn stage_cost(&mut self, st: &PlayerStage, x: &DVectorView<f64>, u: &Vector, y: &Vector) -> f64 {
        self.tx.gemv(1.0, &st.q, x, 0.0);
        self.tu.gemv(1.0, &st.r, u, 0.0);
        self.ty.gemv(1.0, &st.k, u, 0.0);
        self.ty.gemv(1.0, &st.l, x, 1.0);
        x.dot(&self.tx) + u.dot(&self.tu) + 2.0 * y.dot(&self.ty)
    }

    fn terminal(&mut self, q: &Mat, x: &DVectorView<f64>) -> f64 {
        self.tx.gemv(1.0, q, x, 0.0);
        x.dot(&self.tx)
    }
}

fn overflowed(v: &Vector, cap: f64) -> Option<f64> {
    let norm = v.norm();
    (!(norm <= cap)).then_some(norm)
}

struct ObjectiveChunk {
    moments: MomentSums,
    costs: Vec<ScalarSums>,
    stage_costs: Vec<Vec<f64>>,
    data: Vec<f64>,
    path_costs: Vec<f64>,
}

/// Simulates the true coupled system: every player applies its strategy to
/// the shared estimate, which is driven by the realized environment.
pub fn simulate_objective(
    spec: &GameSpec,
    profile: &StrategyProfile,
    plan: &FilterPlan,
    opts: &SimOptions,
    tol: &Tolerances,
) -> Result<SimulationBatch> {
    require_gaussian(spec.noise.family)?;
    let horizon = simulation_horizon(spec, opts, tol);
    if plan.len() < horizon {
        return Err(Error::Usage(format!("filter plan covers {} stages, need {horizon}", plan.len())));
    }
    let dims = stack_dimensions(spec);
    let prims = Primitives::new(&spec.noise, tol.factor_clip);
    let terminal = spec.horizon.finite() == Some(horizon);
    let n_players = spec.players.len();
    let (n, m) = (dims.n_state, dims.n_y);
    let n_var = n + m + dims.n_control;
    let n_chunks = opts.paths.div_ceil(CHUNK);

    let run_chunk = |chunk: usize| -> Result<ObjectiveChunk> {
        let start = chunk * CHUNK;
        let end = (start + CHUNK).min(opts.paths);
        let mut out = ObjectiveChunk {
            moments: MomentSums::new(horizon, n + m),
            costs: vec![ScalarSums::default(); n_players],
            stage_costs: vec![vec![0.0; horizon]; n_players],
            data: Vec::new(),
            path_costs: Vec::new(),
        };
        if opts.record {
            out.data.reserve((end - start) * (horizon + 1) * n_var);
        }
        let mut x = Vector::zeros(n);
        let mut x_next = Vector::zeros(n);
        let mut x_hat = Vector::zeros(n);
        let mut x_hat_next = Vector::zeros(n);
        let mut y = Vector::zeros(m);
        let mut xi = Vector::zeros(m);
        let mut w = Vector::zeros(n);
        let mut zx = Vector::zeros(n);
        let mut zy = Vector::zeros(m);
        let mut obs = Vector::zeros(n + m);
        let mut u: Vec<Vector> = spec.players.iter().map(|p| Vector::zeros(p.n_u())).collect();
        let mut scratch: Vec<CostScratch> =
            spec.players.iter().map(|p| CostScratch::new(p.n_x(), p.n_u(), m)).collect();
        let mut path_cost = vec![0.0; n_players];
        for path in start..end {
            let mut rng = path_rng(opts.seed, path, 0);
            prims.x0.sample_into(&mut rng, &mut zx, &mut x);
            x_hat.copy_from(&spec.noise.x0_mean);
            path_cost.iter_mut().for_each(|c| *c = 0.0);
            for t in 0..horizon {
                prims.xi(t).sample_into(&mut rng, &mut zy, &mut xi);
                prims.w(t).sample_into(&mut rng, &mut zx, &mut w);
                let env = spec.environment.stage(t);
                // Decisions.
                for (i, block) in dims.players.iter().enumerate() {
                    let (f, g, h) = profile.players[i].stage(t);
                    let xi_view = x.rows(block.x.start, block.x.len());
                    u[i].copy_from(h);
                    u[i].gemv(1.0, f, &xi_view, 1.0);
                    u[i].gemv(1.0, g, &x_hat, 1.0);
                }
                // Environment variable.
                y.copy_from(&xi);
                if !dims.env.is_empty() {
                    y.gemv(1.0, &env.d, &x.rows(0, dims.env.len()), 1.0);
                }
                for (i, block) in dims.players.iter().enumerate() {
                    y.gemv(1.0, &env.e1[i], &u[i], 1.0);
                    y.gemv(1.0, &env.e2[i], &x.rows(block.x.start, block.x.len()), 1.0);
                }
                // Costs.
                for (i, block) in dims.players.iter().enumerate() {
                    let p = &spec.players[i];
                    let disc = p.beta.powi(t as i32);
                    let c = disc * scratch[i].stage_cost(p.stage(t), &x.rows(block.x.start, block.x.len()), &u[i], &y);
                    path_cost[i] += c;
                    out.stage_costs[i][t] += c;
                }
                obs.rows_mut(0, n).copy_from(&x);
                obs.rows_mut(n, m).copy_from(&y);
                out.moments.add(t, &obs);
                if opts.record {
                    out.data.extend(x.iter());
                    out.data.extend(y.iter());
                    for ui in &u {
                        out.data.extend(ui.iter());
                    }
                }
                // State transition.
                x_next.copy_from(&w);
                if !dims.env.is_empty() {
                    let n0 = dims.env.len();
                    let mut env_next = x_next.rows_mut(0, n0);
                    env_next.gemv(1.0, &env.a0, &x.rows(0, n0), 1.0);
                    for (i, block) in dims.players.iter().enumerate() {
                        env_next.gemv(1.0, &env.b1[i], &u[i], 1.0);
                        env_next.gemv(1.0, &env.b2[i], &x.rows(block.x.start, block.x.len()), 1.0);
                    }
                }
                for (i, block) in dims.players.iter().enumerate() {
                    let st = spec.players[i].stage(t);
                    let mut own = x_next.rows_mut(block.x.start, block.x.len());
                    own.gemv(1.0, &st.a, &x.rows(block.x.start, block.x.len()), 1.0);
                    own.gemv(1.0, &st.b, &u[i], 1.0);
                    own.gemv(1.0, &st.c, &y, 1.0);
                }
                let step = &plan.steps[t];
                x_hat_next.copy_from(&step.offset);
                x_hat_next.gemv(1.0, &step.phi, &x_hat, 1.0);
                x_hat_next.gemv(1.0, &step.gamma, &y, 1.0);
                std::mem::swap(&mut x, &mut x_next);
                std::mem::swap(&mut x_hat, &mut x_hat_next);
                if let Some(norm) = overflowed(&x, tol.overflow_cap) {
                    return Err(Error::Unstable { path, stage: t + 1, norm });
                }
            }
            if terminal {
                for (i, block) in dims.players.iter().enumerate() {
                    let p = &spec.players[i];
                    if let Some(qt) = &p.q_terminal {
                        let c = p.beta.powi(horizon as i32)
                            * scratch[i].terminal(qt, &x.rows(block.x.start, block.x.len()));
                        path_cost[i] += c;
                    }
                }
            }
            if opts.record {
                out.data.extend(x.iter());
                out.data.extend(std::iter::repeat_n(f64::NAN, n_var - n));
                out.path_costs.extend(path_cost.iter());
            }
            out.moments.count += 1;
            for (s, c) in out.costs.iter_mut().zip(&path_cost) {
                s.add(*c);
            }
        }
        Ok(out)
    };

    let chunks: Vec<Result<ObjectiveChunk>> = (0..n_chunks).into_par_iter().map(run_chunk).collect();
    let mut moments = MomentSums::new(horizon, n + m);
    let mut costs = vec![ScalarSums::default(); n_players];
    let mut stage_costs = vec![vec![0.0; horizon]; n_players];
    let mut data = Vec::new();
    let mut path_costs = Vec::new();
    for chunk in chunks {
        let chunk = chunk?;
        moments.merge(&chunk.moments);
        for (a, b) in costs.iter_mut().zip(&chunk.costs) {
            a.merge(b);
        }
        for (a, b) in stage_costs.iter_mut().zip(&chunk.stage_costs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        data.extend(chunk.data);
        path_costs.extend(chunk.path_costs);
    }
    let p = opts.paths as f64;
    let stage_cost_mean: Vec<Vec<f64>> = stage_costs.iter().map(|s| s.iter().map(|v| v / p).collect()).collect();
    let tail_bound = spec
        .players
        .iter()
        .zip(&stage_cost_mean)
        .map(|(pl, sc)| tail_bound(pl.beta, horizon, sc, spec.horizon, terminal))
        .collect();
    Ok(SimulationBatch {
        seed: opts.seed,
        paths: opts.paths,
        horizon,
        labels: state_labels(&dims),
        moments: moments.summary(),
        costs: costs.iter().map(ScalarSums::summary).collect(),
        stage_cost_mean,
        tail_bound,
        trajectories: opts.record.then(|| Trajectories {
            n_var,
            n_rows: horizon + 1,
            paths: opts.paths,
            data,
            costs: path_costs,
        }),
    })
}

/// `β^T/(1−β)` times the largest undiscounted mean stage cost observed.
fn tail_bound(beta: f64, horizon: usize, discounted: &[f64], game: Horizon, terminal: bool) -> f64 {
    if terminal || horizon == 0 {
        return 0.0;
    }
    let envelope = discounted
        .iter()
        .enumerate()
        .map(|(t, c)| c.abs() / beta.powi(t as i32))
        .fold(0.0, f64::max);
    match game {
        Horizon::Infinite if beta < 1.0 => beta.powi(horizon as i32) / (1.0 - beta) * envelope,
        _ => f64::INFINITY,
    }
}

/// Recomputes each player's discounted cost from a recorded trajectory.
pub fn recompute_costs(spec: &GameSpec, traj: &Trajectories, path: usize) -> Vec<f64> {
    let dims = stack_dimensions(spec);
    let (n, m) = (dims.n_state, dims.n_y);
    let horizon = traj.n_rows - 1;
    let terminal = spec.horizon.finite() == Some(horizon);
    let mut costs = vec![0.0; spec.players.len()];
    for t in 0..horizon {
        let row = traj.row(path, t);
        let y = Vector::from_column_slice(&row[n..n + m]);
        for (i, block) in dims.players.iter().enumerate() {
            let p = &spec.players[i];
            let x = Vector::from_column_slice(&row[block.x.clone()]);
            let u = Vector::from_column_slice(&row[n + m + block.u.start..n + m + block.u.end]);
            costs[i] += p.beta.powi(t as i32) * p.stage(t).stage_cost(&x, &u, &y);
        }
    }
    if terminal {
        let row = traj.row(path, horizon);
        for (i, block) in dims.players.iter().enumerate() {
            let x = Vector::from_column_slice(&row[block.x.clone()]);
            costs[i] += spec.players[i].beta.powi(horizon as i32) * spec.players[i].terminal_cost(&x);
        }
    }
    costs
}

/// Subjective cost estimates for several strategies of one player, all run
/// against the same exogenous environment samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectiveRun {
    pub player: usize,
    pub seed: u64,
    pub paths: usize,
    pub horizon: usize,
    pub costs: Vec<CostSummary>,
    /// Paired differences `J(strategy s) − J(strategy 0)`.
    pub diffs: Vec<CostSummary>,
    pub tail_bound: f64,
}

/// Draws environment sequences from the closed-loop model, independent of
/// the player's own actions, and runs the player's dynamics against them.
#[allow(clippy::too_many_arguments)]
pub fn simulate_subjective(
    spec: &GameSpec,
    player: usize,
    strategies: &[AffineStrategy],
    model: &ClosedLoopModel,
    plan: &FilterPlan,
    opts: &SimOptions,
    tol: &Tolerances,
) -> Result<SubjectiveRun> {
    require_gaussian(spec.noise.family)?;
    if strategies.is_empty() {
        return Err(Error::Usage("no strategies to evaluate".into()));
    }
    let horizon = simulation_horizon(spec, opts, tol);
    if plan.len() < horizon {
        return Err(Error::Usage(format!("filter plan covers {} stages, need {horizon}", plan.len())));
    }
    let dims = stack_dimensions(spec);
    let block = dims.players[player].x.clone();
    let p = &spec.players[player];
    let (n, m, nx, nu) = (dims.n_state, dims.n_y, p.n_x(), p.n_u());
    let env_prims = Primitives::from_model(model, tol.factor_clip);
    let own_prims = player_primitives(&spec.noise, block, tol.factor_clip);
    let terminal = spec.horizon.finite() == Some(horizon);
    let n_s = strategies.len();
    let n_chunks = opts.paths.div_ceil(CHUNK);

    let run_chunk = |chunk: usize| -> Result<(Vec<ScalarSums>, Vec<ScalarSums>, Vec<f64>)> {
        let start = chunk * CHUNK;
        let end = (start + CHUNK).min(opts.paths);
        let mut sums = vec![ScalarSums::default(); n_s];
        let mut diffs = vec![ScalarSums::default(); n_s];
        let mut stage = vec![0.0; horizon];
        let mut xb = Vector::zeros(n);
        let mut xb_next = Vector::zeros(n);
        let mut xh_next = Vector::zeros(n);
        let mut xi = Vector::zeros(m);
        let mut w = Vector::zeros(n);
        let mut zx = Vector::zeros(n);
        let mut zy = Vector::zeros(m);
        let mut zo = Vector::zeros(nx);
        let mut ys = vec![Vector::zeros(m); horizon];
        let mut xhs = vec![Vector::zeros(n); horizon];
        let mut own_w = vec![Vector::zeros(nx); horizon];
        let mut own_x0 = Vector::zeros(nx);
        let mut x = Vector::zeros(nx);
        let mut x_next = Vector::zeros(nx);
        let mut u = Vector::zeros(nu);
        let mut scratch = CostScratch::new(nx, nu, m);
        let mut costs = vec![0.0; n_s];
        for path in start..end {
            // Exogenous environment replica.
            let mut rng = path_rng(opts.seed, path, 0);
            env_prims.x0.sample_into(&mut rng, &mut zx, &mut xb);
            xhs[0].copy_from(&model.x0_mean);
            for t in 0..horizon {
                env_prims.xi(t).sample_into(&mut rng, &mut zy, &mut xi);
                env_prims.w(t).sample_into(&mut rng, &mut zx, &mut w);
                let st = model.stage(t);
                let y = &mut ys[t];
                y.copy_from(&st.hp);
                *y += &xi;
                y.gemv(1.0, &st.d, &xb, 1.0);
                y.gemv(1.0, &st.gp, &xhs[t], 1.0);
                xb_next.copy_from(&st.hx);
                xb_next += &w;
                xb_next.gemv(1.0, &st.a, &xb, 1.0);
                xb_next.gemv(1.0, &st.gx, &xhs[t], 1.0);
                xb_next.gemv(1.0, &st.c, y, 1.0);
                let step = &plan.steps[t];
                xh_next.copy_from(&step.offset);
                xh_next.gemv(1.0, &step.phi, &xhs[t], 1.0);
                xh_next.gemv(1.0, &step.gamma, y, 1.0);
                std::mem::swap(&mut xb, &mut xb_next);
                if t + 1 < horizon {
                    xhs[t + 1].copy_from(&xh_next);
                }
                if let Some(norm) = overflowed(&xb, tol.overflow_cap) {
                    return Err(Error::Unstable { path, stage: t + 1, norm });
                }
            }
            // Own primitives.
            let mut rng = path_rng(opts.seed, path, 1 + player);
            own_prims.x0.sample_into(&mut rng, &mut zo, &mut own_x0);
            for (t, wt) in own_w.iter_mut().enumerate() {
                own_prims.w(t).sample_into(&mut rng, &mut zo, wt);
            }
            for (s, strategy) in strategies.iter().enumerate() {
                x.copy_from(&own_x0);
                let mut cost = 0.0;
                let mut unstable = false;
                for t in 0..horizon {
                    let st = p.stage(t);
                    let (f, g, h) = strategy.stage(t);
                    u.copy_from(h);
                    u.gemv(1.0, f, &x, 1.0);
                    u.gemv(1.0, g, &xhs[t], 1.0);
                    let c = p.beta.powi(t as i32) * scratch.stage_cost(st, &x.rows(0, nx), &u, &ys[t]);
                    cost += c;
                    if s == 0 {
                        stage[t] += c;
                    }
                    x_next.copy_from(&own_w[t]);
                    x_next.gemv(1.0, &st.a, &x, 1.0);
                    x_next.gemv(1.0, &st.b, &u, 1.0);
                    x_next.gemv(1.0, &st.c, &ys[t], 1.0);
                    std::mem::swap(&mut x, &mut x_next);
                    if overflowed(&x, tol.overflow_cap).is_some() {
                        unstable = true;
                        break;
                    }
                }
                if unstable {
                    if s == 0 {
                        let norm = x.norm();
                        return Err(Error::Unstable { path, stage: horizon, norm });
                    }
                    cost = f64::INFINITY;
                } else if terminal {
                    if let Some(qt) = &p.q_terminal {
                        cost += p.beta.powi(horizon as i32) * scratch.terminal(qt, &x.rows(0, nx));
                    }
                }
                costs[s] = cost;
            }
            for s in 0..n_s {
                sums[s].add(costs[s]);
                diffs[s].add(costs[s] - costs[0]);
            }
        }
        Ok((sums, diffs, stage))
    };

    let chunks: Vec<_> = (0..n_chunks).into_par_iter().map(run_chunk).collect();
    let mut sums = vec![ScalarSums::default(); n_s];
    let mut diffs = vec![ScalarSums::default(); n_s];
    let mut stage = vec![0.0; horizon];
    for chunk in chunks {
        let (s, d, st) = chunk?;
        for (a, b) in sums.iter_mut().zip(&s) {
            a.merge(b);
        }
        for (a, b) in diffs.iter_mut().zip(&d) {
            a.merge(b);
        }
        for (a, b) in stage.iter_mut().zip(&st) {
            *a += b;
        }
    }
    let stage_mean: Vec<f64> = stage.iter().map(|v| v / opts.paths as f64).collect();
    Ok(SubjectiveRun {
        player,
        seed: opts.seed,
        paths: opts.paths,
        horizon,
        costs: sums.iter().map(ScalarSums::summary).collect(),
        diffs: diffs.iter().map(ScalarSums::summary).collect(),
        tail_bound: tail_bound(p.beta, horizon, &stage_mean, spec.horizon, terminal),
    })
}

/// Finite-population run of a mean-field game.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldRun {
    pub population: usize,
    pub seed: u64,
    pub paths: usize,
    pub horizon: usize,
    /// Moments of `[avg_j x_t^j; y_t]`.
    pub moments: MomentSummary,
    /// Discounted cost per player.
    pub costs: Vec<CostSummary>,
    /// Per-path `y_t`, `[path][t][component]`, when recorded.
    pub y_paths: Option<Vec<f64>>,
}

/// Mean and covariance of one player's state under the mean-field strategy.
pub fn meanfield_state_moments(sol: &MeanFieldSolution, horizon: usize) -> (Vec<Vector>, Vec<Mat>) {
    let st = sol.spec.player.stage(0);
    let closed = &st.a + &st.b * &sol.strategy.f[0];
    let drift = &st.b * sol.offset() + &sol.spec.w_mean;
    let mut mean = Vec::with_capacity(horizon);
    let mut cov = Vec::with_capacity(horizon);
    let (mut m, mut p) = (sol.spec.x0_mean.clone(), sol.spec.x0_cov.clone());
    for _ in 0..horizon {
        mean.push(m.clone());
        cov.push(p.clone());
        m = &closed * &m + &drift;
        p = &closed * &p * closed.transpose() + &sol.spec.w_cov;
        linalg::symmetrize(&mut p);
    }
    (mean, cov)
}

/// `population` players apply the mean-field rule `u = F x + G ŷ_0 + H`;
/// player 0 may instead use `deviator`, which sees the same constant `ŷ_0`.
/// Player `j` draws from lane `1 + j` and `ξ` from lane 0, so paired runs
/// share all randomness.
pub fn simulate_meanfield(
    sol: &MeanFieldSolution,
    population: usize,
    deviator: Option<&AffineStrategy>,
    opts: &SimOptions,
    tol: &Tolerances,
) -> Result<MeanFieldRun> {
    require_gaussian(sol.spec.family)?;
    if population == 0 {
        return Err(Error::Usage("population must be positive".into()));
    }
    let spec = &sol.spec;
    let p = &spec.player;
    let st = p.stage(0);
    let (nx, nu, ny) = (p.n_x(), p.n_u(), spec.n_y());
    let horizon = opts.horizon.unwrap_or_else(|| truncation_horizon(p.beta, tol.discount_tail));
    let x0 = Sampler::new(&spec.x0_mean, &spec.x0_cov, tol.factor_clip);
    let wn = Sampler::new(&spec.w_mean, &spec.w_cov, tol.factor_clip);
    let xin = Sampler::new(&spec.xi_mean, &spec.xi_cov, tol.factor_clip);
    let offset = sol.offset();
    let f = &sol.strategy.f[0];
    let dev = deviator.map(|d| {
        let (df, dg, dh) = d.stage(0);
        (df.clone(), dg * &sol.fixed_point.y0 + dh)
    });
    let n_chunks = opts.paths.div_ceil(CHUNK);

    let run_chunk = |chunk: usize| -> Result<(MomentSums, Vec<ScalarSums>, Vec<f64>)> {
        let start = chunk * CHUNK;
        let end = (start + CHUNK).min(opts.paths);
        let mut moments = MomentSums::new(horizon, nx + ny);
        let mut sums = vec![ScalarSums::default(); population];
        let mut y_rec = Vec::new();
        let mut xs = Mat::zeros(nx, population);
        let mut us = Mat::zeros(nu, population);
        let mut xs_next = Mat::zeros(nx, population);
        let mut rngs: Vec<ChaCha8Rng> = Vec::with_capacity(population);
        let mut zx = Vector::zeros(nx);
        let mut zy = Vector::zeros(ny);
        let mut v = Vector::zeros(nx);
        let mut xi = Vector::zeros(ny);
        let mut y = Vector::zeros(ny);
        let mut obs = Vector::zeros(nx + ny);
        let mut qx = Mat::zeros(nx, population);
        let mut ru = Mat::zeros(nu, population);
        let mut ky = Vector::zeros(nu);
        let mut ly = Vector::zeros(nx);
        let mut costs = vec![0.0; population];
        for path in start..end {
            rngs.clear();
            let mut env_rng = path_rng(opts.seed, path, 0);
            for j in 0..population {
                let mut rng = path_rng(opts.seed, path, 1 + j);
                x0.sample_into(&mut rng, &mut zx, &mut v);
                xs.column_mut(j).copy_from(&v);
                rngs.push(rng);
            }
            costs.iter_mut().for_each(|c| *c = 0.0);
            for t in 0..horizon {
                xin.sample_into(&mut env_rng, &mut zy, &mut xi);
                us.gemm(1.0, f, &xs, 0.0);
                for mut col in us.column_iter_mut() {
                    col += &offset;
                }
                if let Some((df, dc)) = &dev {
                    let mut c0 = us.column_mut(0);
                    c0.copy_from(dc);
                    c0.gemv(1.0, df, &xs.column(0), 1.0);
                }
                let x_avg = xs.column_mean();
                let u_avg = us.column_mean();
                y.copy_from(&xi);
                y.gemv(1.0, &spec.e1, &u_avg, 1.0);
                y.gemv(1.0, &spec.e2, &x_avg, 1.0);
                // Stage costs of every member at once.
                let disc = p.beta.powi(t as i32);
                qx.gemm(1.0, &st.q, &xs, 0.0);
                ru.gemm(1.0, &st.r, &us, 0.0);
                ky.gemv_tr(2.0, &st.k, &y, 0.0);
                ly.gemv_tr(2.0, &st.l, &y, 0.0);
                let (xd, qd, ud, rd) = (xs.as_slice(), qx.as_slice(), us.as_slice(), ru.as_slice());
                for (j, c) in costs.iter_mut().enumerate() {
                    let xj = &xd[j * nx..(j + 1) * nx];
                    let uj = &ud[j * nu..(j + 1) * nu];
                    let mut stage = 0.0;
                    for r in 0..nx {
                        stage += xj[r] * (qd[j * nx + r] + ly[r]);
                    }
                    for r in 0..nu {
                        stage += uj[r] * (rd[j * nu + r] + ky[r]);
                    }
                    *c += disc * stage;
                }
                obs.rows_mut(0, nx).copy_from(&x_avg);
                obs.rows_mut(nx, ny).copy_from(&y);
                moments.add(t, &obs);
                if opts.record {
                    y_rec.extend(y.iter());
                }
                xs_next.gemm(1.0, &st.a, &xs, 0.0);
                xs_next.gemm(1.0, &st.b, &us, 1.0);
                for (j, rng) in rngs.iter_mut().enumerate() {
                    wn.sample_into(rng, &mut zx, &mut v);
                    let mut col = xs_next.column_mut(j);
                    col += &v;
                }
                std::mem::swap(&mut xs, &mut xs_next);
                let norm = linalg::max_abs(&xs);
                if !(norm <= tol.overflow_cap) {
                    return Err(Error::Unstable { path, stage: t + 1, norm });
                }
            }
            moments.count += 1;
            for (s, c) in sums.iter_mut().zip(&costs) {
                s.add(*c);
            }
        }
        Ok((moments, sums, y_rec))
    };

    let chunks: Vec<_> = (0..n_chunks).into_par_iter().map(run_chunk).collect();
    let mut moments = MomentSums::new(horizon, nx + ny);
    let mut sums = vec![ScalarSums::default(); population];
    let mut y_paths = Vec::new();
    for chunk in chunks {
        let (m, s, y) = chunk?;
        moments.merge(&m);
        for (a, b) in sums.iter_mut().zip(&s) {
            a.merge(b);
        }
        y_paths.extend(y);
    }
    Ok(MeanFieldRun {
        population,
        seed: opts.seed,
        paths: opts.paths,
        horizon,
        moments: moments.summary(),
        costs: sums.iter().map(ScalarSums::summary).collect(),
        y_paths: opts.record.then_some(y_paths),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::pipeline::{solve, solve_meanfield_spec};

    #[test]
    fn truncation_horizon_meets_tail() {
        let t = truncation_horizon(0.9, 1e-8);
        assert!(0.9_f64.powi(t as i32) < 1e-8);
        assert!(0.9_f64.powi(t as i32 - 1) >= 1e-8);
        assert_eq!(truncation_horizon(0.0, 1e-8), 1);
    }

    #[test]
    fn streams_are_distinct_and_reproducible() {
        use rand::Rng;
        let a: u64 = path_rng(1, 0, 0).random();
        let b: u64 = path_rng(1, 0, 1).random();
        let c: u64 = path_rng(1, 1, 0).random();
        let again: u64 = path_rng(1, 0, 0).random();
        assert_eq!(a, again);
        assert!(a != b && a != c && b != c);
    }

    #[test]
    fn moment_sums_merge_in_order() {
        let mut whole = MomentSums::new(1, 2);
        let mut left = MomentSums::new(1, 2);
        let mut right = MomentSums::new(1, 2);
        for k in 0..10 {
            let v = Vector::from_vec(vec![k as f64, (k * k) as f64]);
            whole.add(0, &v);
            whole.count += 1;
            let part = if k < 4 { &mut left } else { &mut right };
            part.add(0, &v);
            part.count += 1;
        }
        left.merge(&right);
        assert_eq!(left, whole);
        let s = whole.summary();
        assert_eq!(s.mean[0][0], 4.5);
        assert!((s.cov[0][(0, 0)] - 55.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_zero_means_gives_zero_paths() {
        let mut spec = fixtures::weakly_coupled_pair(Horizon::Finite(5));
        spec.noise.x0_mean.fill(0.0);
        spec.noise.x0_cov.fill(0.0);
        for s in &mut spec.noise.stages.0 {
            s.w_mean.fill(0.0);
            s.w_cov.fill(0.0);
            s.xi_mean.fill(0.0);
        }
        let sol = solve(&spec, &Tolerances::default()).unwrap();
        // ξ keeps a covariance so the filter stays defined; sample it at zero.
        spec.noise.stages.0[0].xi_cov.fill(0.0);
        let plan = sol.filter_plan(5, &Tolerances::default()).unwrap();
        let batch = simulate_objective(&spec, &sol.profile, &plan, &SimOptions::new(10, 3), &Tolerances::default()).unwrap();
        assert!(batch.moments.mean.iter().all(|m| m.iter().all(|v| *v == 0.0)));
        assert!(batch.costs.iter().all(|c| c.mean == 0.0));
    }

    #[test]
    fn single_member_population_is_its_own_average() {
        let sol = solve_meanfield_spec(&fixtures::meanfield_scalar(), &Tolerances::default()).unwrap();
        let opts = SimOptions::new(3, 5).horizon(4).recording();
        let run = simulate_meanfield(&sol, 1, None, &opts, &Tolerances::default()).unwrap();
        // Replay the single player by hand.
        let spec = &sol.spec;
        let ys = run.y_paths.unwrap();
        let tol = Tolerances::default();
        for path in 0..3 {
            let mut rng = path_rng(5, path, 1);
            let mut env = path_rng(5, path, 0);
            let mut z = Vector::zeros(1);
            let mut x = Vector::zeros(1);
            Sampler::new(&spec.x0_mean, &spec.x0_cov, tol.factor_clip).sample_into(&mut rng, &mut z, &mut x);
            for t in 0..4 {
                let mut xi = Vector::zeros(1);
                Sampler::new(&spec.xi_mean, &spec.xi_cov, tol.factor_clip).sample_into(&mut env, &mut z, &mut xi);
                let u = &sol.strategy.f[0] * &x + sol.offset();
                let y = &spec.e1 * &u + &spec.e2 * &x + &xi;
                assert!((y[0] - ys[path * 4 + t]).abs() < 1e-14);
                let mut w = Vector::zeros(1);
                Sampler::new(&spec.w_mean, &spec.w_cov, tol.factor_clip).sample_into(&mut rng, &mut z, &mut w);
                x = &spec.player.stage(0).a * &x + &spec.player.stage(0).b * &u + w;
            }
        }
    }

    #[test]
    fn non_gaussian_is_refused() {
        let mut spec = fixtures::decoupled_pair();
        let sol = solve(&spec, &Tolerances::default()).unwrap();
        spec.noise.family = NoiseFamily::SecondOrder;
        let plan = sol.filter_plan(5, &Tolerances::default()).unwrap();
        let opts = SimOptions::new(4, 0).horizon(5);
        assert!(matches!(
            simulate_objective(&spec, &sol.profile, &plan, &opts, &Tolerances::default()),
            Err(Error::NonGaussian(_))
        ));
    }
}
