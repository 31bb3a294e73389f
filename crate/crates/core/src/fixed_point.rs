//! Equilibrium environment means.
//!
//! For each stage `k` the conditional means `ŷ_{t|k−1}`, `t ≥ k`, solve the
//! linear system obtained by taking expectations of the vector-form
//! equations given `X̂_{k|k−1}`. Under unique solvability the solution is
//! affine, `ŷ_{t|k−1} = a_{t,k−1} X̂_{k|k−1} + b_{t,k−1}`. The input is
//! augmented with a constant coordinate so one solve yields both `a` and `b`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::aggregate::{AggStage, AggregatedDynamics};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::{Horizon, MeanFieldSpec};
use crate::synthesis::StationaryGains;
use crate::tolerances::Tolerances;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageCertificate {
    pub k: usize,
    pub sigma_min: f64,
    pub cond: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteFixedPoint {
    pub horizon: usize,
    /// `a[k][t − k] = a_{t,k−1}`.
    pub a: Vec<Vec<Mat>>,
    pub b: Vec<Vec<Vector>>,
    pub certificates: Vec<StageCertificate>,
}

impl FiniteFixedPoint {
    pub fn a_at(&self, t: usize, k: usize) -> &Mat {
        &self.a[k][t - k]
    }

    pub fn b_at(&self, t: usize, k: usize) -> &Vector {
        &self.b[k][t - k]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryFixedPoint {
    /// `ŷ_{t+n|t−1} = a[n] X̂_{t|t−1} + b[n]` for `n ∈ [0, n_trunc]`.
    pub a: Vec<Mat>,
    pub b: Vec<Vector>,
    /// Fixed point of the time-invariant mean equations.
    pub y_inf: Vector,
    pub x_inf: Vector,
    pub t_trunc: usize,
    /// Change of the returned coefficients at the last doubling.
    pub last_delta: f64,
    /// Conditioning of the stationary mean equations.
    pub sigma_min: f64,
    pub cond: f64,
    /// Conditioning of the smallest truncated system.
    pub trunc_sigma_min: f64,
    pub trunc_cond: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvFixedPoint {
    Finite(FiniteFixedPoint),
    Stationary(StationaryFixedPoint),
}

/// Solution of `(I − Λ) Y = Υ [X̂; 1]` over a window of stages.
struct WindowSolution {
    coeffs: Mat,
    sigma_min: f64,
    cond: f64,
}

/// Assembles and solves the stacked system for unknowns `ŷ_0..ŷ_{len−1}` of
/// a window starting at `X̂_0`. Lags reaching past the window use `tail`.
fn solve_window<'a>(
    stage: impl Fn(usize) -> &'a AggStage,
    len: usize,
    n_x: usize,
    n_y: usize,
    tail: Option<&Vector>,
    cond_cap: Option<f64>,
) -> std::result::Result<WindowSolution, (f64, f64)> {
    let n_unknown = len * n_y;
    let n_in = n_x + 1;
    let mut lambda = Mat::zeros(n_unknown, n_unknown);
    let mut upsilon = Mat::zeros(n_unknown, n_in);
    // X̂_s = P Y + R [X̂_0; 1]
    let mut p = Mat::zeros(n_x, n_unknown);
    let mut r = Mat::zeros(n_x, n_in);
    r.view_mut((0, 0), (n_x, n_x)).fill_with_identity();
    for s in 0..len {
        let st = stage(s);
        let row = s * n_y;
        lambda.view_mut((row, 0), (n_y, n_unknown)).copy_from(&(&st.d * &p));
        upsilon.view_mut((row, 0), (n_y, n_in)).copy_from(&(&st.d * &r));
        let mut constant = &st.hp + &st.xi_mean;
        for (l, g) in st.gp.iter().enumerate() {
            if s + l < len {
                linalg::add_block(&mut lambda, row, (s + l) * n_y, g);
            } else if let Some(tail) = tail {
                constant += g * tail;
            }
        }
        let mut col = upsilon.view_mut((row, n_x), (n_y, 1));
        col += &constant;

        let mut p_next = &st.a * &p;
        let mut r_next = &st.a * &r;
        linalg::add_block(&mut p_next, 0, row, &st.c);
        let mut constant = &st.hx + &st.w_mean;
        for (l, g) in st.gx.iter().enumerate() {
            if s + l < len {
                linalg::add_block(&mut p_next, 0, (s + l) * n_y, g);
            } else if let Some(tail) = tail {
                constant += g * tail;
            }
        }
        let mut col = r_next.view_mut((0, n_x), (n_x, 1));
        col += &constant;
        p = p_next;
        r = r_next;
    }
    let system = Mat::identity(n_unknown, n_unknown) - lambda;
    match cond_cap {
        Some(cap) => {
            let solved = linalg::solve_checked(&system, &upsilon, cap)?;
            Ok(WindowSolution { coeffs: solved.solution, sigma_min: solved.sigma_min, cond: solved.cond })
        }
        None => {
            let coeffs = system.lu().solve(&upsilon).ok_or((0.0, f64::INFINITY))?;
            Ok(WindowSolution { coeffs, sigma_min: f64::NAN, cond: f64::NAN })
        }
    }
}

fn split(coeffs: &Mat, count: usize, n_x: usize, n_y: usize) -> (Vec<Mat>, Vec<Vector>) {
    (0..count)
        .map(|j| {
            let a = coeffs.view((j * n_y, 0), (n_y, n_x)).into_owned();
            let b = coeffs.view((j * n_y, n_x), (n_y, 1)).column(0).into_owned();
            (a, b)
        })
        .unzip()
}

pub fn solve_finite(agg: &AggregatedDynamics, tol: &Tolerances) -> Result<FiniteFixedPoint> {
    let horizon = agg
        .horizon
        .finite()
        .ok_or_else(|| Error::Usage("solve_finite needs a finite horizon".into()))?;
    let (n_x, n_y) = (agg.n_state(), agg.n_y());
    let mut a = Vec::with_capacity(horizon);
    let mut b = Vec::with_capacity(horizon);
    let mut certificates = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let sol = solve_window(|s| agg.stage(k + s), horizon - k, n_x, n_y, None, Some(tol.lambda_cond_cap))
            .map_err(|(sigma_min, cond)| Error::PredictionSystemSingular { stage: k, sigma_min, cond })?;
        let (ak, bk) = split(&sol.coeffs, horizon - k, n_x, n_y);
        a.push(ak);
        b.push(bk);
        certificates.push(StageCertificate { k, sigma_min: sol.sigma_min, cond: sol.cond });
    }
    Ok(FiniteFixedPoint { horizon, a, b, certificates })
}

/// Fixed point `(ŷ_∞, X̂_∞)` of the time-invariant mean equations.
pub fn stationary_means(st: &AggStage, tol: &Tolerances) -> Result<(Vector, Vector, f64, f64)> {
    let (n_y, n_x) = (st.d.nrows(), st.a.nrows());
    let mut gp_sum = Mat::zeros(n_y, n_y);
    let mut gx_sum = Mat::zeros(n_x, n_y);
    for (gp, gx) in st.gp.iter().zip(&st.gx) {
        gp_sum += gp;
        gx_sum += gx;
    }
    let n = n_y + n_x;
    let mut m = Mat::identity(n, n);
    linalg::add_block(&mut m, 0, 0, &(-gp_sum));
    linalg::add_block(&mut m, 0, n_y, &(-&st.d));
    linalg::add_block(&mut m, n_y, 0, &(-(gx_sum + &st.c)));
    linalg::add_block(&mut m, n_y, n_y, &(-&st.a));
    let rhs = Mat::from_column_slice(
        n,
        1,
        linalg::vec_concat(&[&(&st.hp + &st.xi_mean), &(&st.hx + &st.w_mean)]).as_slice(),
    );
    let solved = linalg::solve_checked(&m, &rhs, tol.lambda_cond_cap)
        .map_err(|(sigma_min, cond)| Error::StationarySystemSingular { sigma_min, cond })?;
    let sol = solved.solution.column(0);
    Ok((sol.rows(0, n_y).into_owned(), sol.rows(n_y, n_x).into_owned(), solved.sigma_min, solved.cond))
}

/// Solves the infinite system by truncation with a stationary tail, doubling
/// the truncation until the returned coefficients settle.
pub fn solve_infinite(agg: &AggregatedDynamics, tol: &Tolerances) -> Result<StationaryFixedPoint> {
    if agg.horizon != Horizon::Infinite {
        return Err(Error::Usage("solve_infinite needs an infinite horizon".into()));
    }
    let st = agg.stage(0);
    let (n_x, n_y) = (agg.n_state(), agg.n_y());
    let (y_inf, x_inf, sigma_min, cond) = stationary_means(st, tol)?;
    let n_keep = st.gp.len();
    let min_trunc = 2 * n_keep.max(1);
    let mut t_trunc = Tolerances::count(tol.trunc_init).max(1);
    let max_doublings = Tolerances::count(tol.trunc_max_doublings);

    let mut previous: Option<(Vec<Mat>, Vec<Vector>)> = None;
    let mut trunc_cert = (f64::NAN, f64::NAN);
    let mut last_delta = f64::INFINITY;
    let mut doublings = 0;
    loop {
        let first = previous.is_none();
        let cap = if first { Some(tol.lambda_cond_cap) } else { None };
        let sol = solve_window(|_| st, t_trunc, n_x, n_y, Some(&y_inf), cap)
            .map_err(|(sigma_min, cond)| Error::StationarySystemSingular { sigma_min, cond })?;
        if first {
            trunc_cert = (sol.sigma_min, sol.cond);
        }
        let (a, b) = split(&sol.coeffs, n_keep.min(t_trunc), n_x, n_y);
        if !a.iter().all(linalg::all_finite) {
            return Err(Error::StationaryNoConvergence { delta: f64::INFINITY, t_trunc });
        }
        if let Some((pa, pb)) = &previous {
            if t_trunc >= min_trunc && pa.len() == a.len() {
                last_delta = a
                    .iter()
                    .zip(pa)
                    .map(|(x, y)| linalg::max_abs(&(x - y)))
                    .chain(b.iter().zip(pb).map(|(x, y)| linalg::max_abs_vec(&(x - y))))
                    .fold(0.0, f64::max);
                if last_delta < tol.trunc_conv {
                    return Ok(StationaryFixedPoint {
                        a,
                        b,
                        y_inf,
                        x_inf,
                        t_trunc,
                        last_delta,
                        sigma_min,
                        cond,
                        trunc_sigma_min: trunc_cert.0,
                        trunc_cond: trunc_cert.1,
                    });
                }
            }
        }
        if doublings >= max_doublings {
            return Err(Error::StationaryNoConvergence { delta: last_delta, t_trunc });
        }
        previous = Some((a, b));
        t_trunc *= 2;
        doublings += 1;
    }
}

/// Largest mismatch of `ŷ_{t|k−1}` computed from stage `k` and from stage
/// `ℓ > k` after propagating `X̂_{k|k−1}` through the mean equations, over
/// random probes `X̂_{k|k−1}`. Relative to `1 + |ŷ|_∞`.
pub fn nesting_residual(agg: &AggregatedDynamics, fp: &FiniteFixedPoint, probes: usize, seed: u64) -> f64 {
    let horizon = fp.horizon;
    let n_x = agg.n_state();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..probes {
        for k in 0..horizon {
            let x_k = Vector::from_fn(n_x, |_, _| StandardNormal.sample(&mut rng));
            let yhat: Vec<Vector> = (k..horizon).map(|t| fp.a_at(t, k) * &x_k + fp.b_at(t, k)).collect();
            let scale = 1.0 + yhat.iter().map(linalg::max_abs_vec).fold(0.0, f64::max);
            let mut x = x_k.clone();
            for l in k..horizon {
                if l > k {
                    for t in l..horizon {
                        let again = fp.a_at(t, l) * &x + fp.b_at(t, l);
                        worst = worst.max(linalg::max_abs_vec(&(again - &yhat[t - k])) / scale);
                    }
                }
                let st = agg.stage(l);
                let mut next = &st.a * &x + &st.hx + &st.w_mean + &st.c * &yhat[l - k];
                for (lag, g) in st.gx.iter().enumerate() {
                    next += g * &yhat[l + lag - k];
                }
                x = next;
            }
        }
    }
    worst
}

/// Largest residual of the stage-`k` mean equations at the emitted solution,
/// over random probes. Relative to `1 + |ŷ|_∞`.
pub fn equation_residual(agg: &AggregatedDynamics, fp: &FiniteFixedPoint, probes: usize, seed: u64) -> f64 {
    let horizon = fp.horizon;
    let n_x = agg.n_state();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..probes {
        for k in 0..horizon {
            let mut x = Vector::from_fn(n_x, |_, _| StandardNormal.sample(&mut rng));
            let yhat: Vec<Vector> = (k..horizon).map(|t| fp.a_at(t, k) * &x + fp.b_at(t, k)).collect();
            let scale = 1.0 + yhat.iter().map(linalg::max_abs_vec).fold(0.0, f64::max);
            for t in k..horizon {
                let st = agg.stage(t);
                let mut rhs = &st.d * &x + &st.hp + &st.xi_mean;
                let mut next = &st.a * &x + &st.hx + &st.w_mean + &st.c * &yhat[t - k];
                for (lag, (gp, gx)) in st.gp.iter().zip(&st.gx).enumerate() {
                    rhs += gp * &yhat[t + lag - k];
                    next += gx * &yhat[t + lag - k];
                }
                worst = worst.max(linalg::max_abs_vec(&(rhs - &yhat[t - k])) / scale);
                x = next;
            }
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldFixedPoint {
    pub y0: Vector,
    pub x0: Vector,
    pub sigma_min: f64,
    pub cond: f64,
}

/// Residual of the two mean-field equations at `(ŷ_0, x̂_0)`, `‖·‖_∞`.
pub fn meanfield_residual(spec: &MeanFieldSpec, gains: &StationaryGains, y0: &Vector, x0: &Vector) -> f64 {
    let st = spec.player.stage(0);
    let g = gains.g_sum();
    let u = &gains.f * x0 + &g * y0 + &gains.h;
    let r1 = &spec.e1 * &u + &spec.e2 * x0 + &spec.xi_mean - y0;
    let r2 = &st.a * x0 + &st.b * &u + &spec.w_mean - x0;
    linalg::max_abs_vec(&r1).max(linalg::max_abs_vec(&r2))
}

pub fn solve_meanfield(spec: &MeanFieldSpec, gains: &StationaryGains, tol: &Tolerances) -> Result<MeanFieldFixedPoint> {
    let st = spec.player.stage(0);
    let (ny, nx) = (spec.n_y(), spec.player.n_x());
    let g = gains.g_sum();
    let n = ny + nx;
    let mut m = Mat::identity(n, n);
    linalg::add_block(&mut m, 0, 0, &(-(&spec.e1 * &g)));
    linalg::add_block(&mut m, 0, ny, &(-(&spec.e1 * &gains.f + &spec.e2)));
    linalg::add_block(&mut m, ny, 0, &(-(&st.b * &g)));
    linalg::add_block(&mut m, ny, ny, &(-(&st.a + &st.b * &gains.f)));
    let rhs_y = &spec.e1 * &gains.h + &spec.xi_mean;
    let rhs_x = &st.b * &gains.h + &spec.w_mean;
    let rhs = Mat::from_column_slice(n, 1, linalg::vec_concat(&[&rhs_y, &rhs_x]).as_slice());
    let solved = linalg::solve_checked(&m, &rhs, tol.lambda_cond_cap)
        .map_err(|(sigma_min, _)| Error::MeanFieldSingular { sigma_min })?;
    let sol = solved.solution.column(0);
    Ok(MeanFieldFixedPoint {
        y0: sol.rows(0, ny).into_owned(),
        x0: sol.rows(ny, nx).into_owned(),
        sigma_min: solved.sigma_min,
        cond: solved.cond,
    })
}
