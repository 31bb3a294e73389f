//! Optimal response of one player to an exogenous environment process.
//!
//! Against a belief under which `z_t` is exogenous, the optimal decision is
//! affine in the own state and the conditional means of current and future
//! environment variables:
//! `u_k = F_k x_k + Σ_{t≥k} G_{k,t} E[z_t | Z_{k−1}] + H_k`.
//! The finite horizon uses the backward Riccati recursion, the infinite
//! horizon the stationary solution of the algebraic Riccati equation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::{PlayerSpec, PlayerStage, ValidationReport};
use crate::tolerances::Tolerances;

/// Stage cost rewritten by completing the squares:
/// `c = |x + Q⁻¹L'z|²_Q + |u + R⁻¹K'z|²_R − |z|²_W` with
/// `W = L Q⁻¹ L' + K R⁻¹ K'`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedCost {
    pub q: Mat,
    pub r: Mat,
    /// `Q⁻¹ L'`
    pub x_shift: Mat,
    /// `R⁻¹ K'`
    pub u_shift: Mat,
    /// `L Q⁻¹ L' + K R⁻¹ K'`
    pub z_weight: Mat,
}

impl TransformedCost {
    pub fn shifted(&self, x: &Vector, u: &Vector, z: &Vector) -> f64 {
        let xs = x + &self.x_shift * z;
        let us = u + &self.u_shift * z;
        xs.dot(&(&self.q * &xs)) + us.dot(&(&self.r * &us))
    }

    /// The original stage cost recovered from the completed squares.
    pub fn cost(&self, x: &Vector, u: &Vector, z: &Vector) -> f64 {
        self.shifted(x, u, z) - z.dot(&(&self.z_weight * z))
    }
}

pub fn completed_square_cost(stage: &PlayerStage) -> Result<TransformedCost> {
    let not_pd = |field: &str| {
        Error::Invalid(ValidationReport::single(
            field,
            &format!("{field} not positive definite"),
            Some(crate::error::Assumption::Primitives),
        ))
    };
    let q_chol = stage.q.clone().cholesky().ok_or_else(|| not_pd("Q_stage"))?;
    let r_chol = stage.r.clone().cholesky().ok_or_else(|| not_pd("R"))?;
    let x_shift = q_chol.solve(&stage.l.transpose());
    let u_shift = r_chol.solve(&stage.k.transpose());
    let mut z_weight = &stage.l * &x_shift + &stage.k * &u_shift;
    linalg::symmetrize(&mut z_weight);
    Ok(TransformedCost { q: stage.q.clone(), r: stage.r.clone(), x_shift, u_shift, z_weight })
}

/// Gains of the finite-horizon optimal response, `k ∈ [0, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteGainSchedule {
    pub horizon: usize,
    pub beta: f64,
    pub f: Vec<Mat>,
    /// `g[k][j] = G_{k,k+j}`.
    pub g: Vec<Vec<Mat>>,
    pub h: Vec<Vector>,
    /// `m[k]` for `k ∈ [0, T]`, `m[T] = Q_terminal`.
    pub m: Vec<Mat>,
    pub s: Vec<Mat>,
    /// `phi[k][j] = Φ_{k,k+j}`.
    pub phi: Vec<Vec<Mat>>,
}

impl FiniteGainSchedule {
    /// `G_{k,t}` for `t ≥ k`.
    pub fn g_at(&self, k: usize, t: usize) -> &Mat {
        &self.g[k][t - k]
    }

    /// Largest `‖R F_k + β B' M_{k+1} (A + B F_k)‖_∞` over stages.
    pub fn gain_identity_residual(&self, player: &PlayerSpec) -> f64 {
        (0..self.horizon)
            .map(|k| {
                let st = player.stage(k);
                let lhs = &st.r * &self.f[k]
                    + self.beta * st.b.transpose() * &self.m[k + 1] * (&st.a + &st.b * &self.f[k]);
                linalg::max_abs(&lhs)
            })
            .fold(0.0, f64::max)
    }
}

fn pick(w_mean: &[Vector], t: usize) -> &Vector {
    if w_mean.len() == 1 {
        &w_mean[0]
    } else {
        &w_mean[t]
    }
}

/// Cholesky factor of `S = R + β B' M B` after the conditioning check.
fn stage_hessian(
    stage: &PlayerStage,
    m_next: &Mat,
    beta: f64,
    index: usize,
    tol: &Tolerances,
) -> Result<(Mat, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
    let mut s = &stage.r + beta * stage.b.transpose() * m_next * &stage.b;
    linalg::symmetrize(&mut s);
    let cond = linalg::spd_condition(&s);
    if !(cond <= tol.s_cond_cap) {
        return Err(Error::SingularStageHessian { player: 0, stage: index, cond });
    }
    let chol = s
        .clone()
        .cholesky()
        .ok_or(Error::SingularStageHessian { player: 0, stage: index, cond })?;
    Ok((s, chol))
}

/// Backward Riccati recursion over `horizon` stages. `w_mean` holds the
/// player's disturbance mean, one entry or one per stage.
pub fn riccati_backward(
    player: &PlayerSpec,
    horizon: usize,
    w_mean: &[Vector],
    tol: &Tolerances,
) -> Result<FiniteGainSchedule> {
    let beta = player.beta;
    let q_terminal = player
        .q_terminal
        .clone()
        .ok_or_else(|| Error::Usage("finite horizon requires Q_terminal".into()))?;
    let nx = player.n_x();
    let mut m = vec![Mat::zeros(nx, nx); horizon + 1];
    m[horizon] = q_terminal;
    let mut f = vec![Mat::zeros(0, 0); horizon];
    let mut s = vec![Mat::zeros(0, 0); horizon];
    let mut s_chol = Vec::with_capacity(horizon);
    let mut g_diag = vec![Mat::zeros(0, 0); horizon];

    for k in (0..horizon).rev() {
        let st = player.stage(k);
        let (sk, chol) = stage_hessian(st, &m[k + 1], beta, k, tol)?;
        let btm = st.b.transpose() * &m[k + 1];
        f[k] = -beta * chol.solve(&(&btm * &st.a));
        g_diag[k] = -chol.solve(&(st.k.transpose() + beta * &btm * &st.c));
        let mut mk = &st.q + beta * st.a.transpose() * &m[k + 1] * (&st.a + &st.b * &f[k]);
        linalg::symmetrize(&mut mk);
        m[k] = mk;
        s[k] = sk;
        s_chol.push(chol);
    }
    s_chol.reverse();

    // Φ_{k,t} = Φ_{k,t−1} β (A_t + B_t F_t)'.
    let closed: Vec<Mat> = (0..horizon)
        .map(|t| {
            let st = player.stage(t);
            beta * (&st.a + &st.b * &f[t]).transpose()
        })
        .collect();
    let mut phi = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let mut row = Vec::with_capacity(horizon - k);
        row.push(Mat::identity(nx, nx));
        for t in k + 1..horizon {
            let next = row.last().unwrap() * &closed[t];
            row.push(next);
        }
        phi.push(row);
    }

    let mut g = Vec::with_capacity(horizon);
    let mut h = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let st = player.stage(k);
        let bt = st.b.transpose();
        let mut row = Vec::with_capacity(horizon - k);
        row.push(g_diag[k].clone());
        for t in k + 1..horizon {
            let su = player.stage(t);
            let coupling = f[t].transpose() * su.k.transpose() + su.l.transpose();
            let inner = &phi[k][t - k] * &m[t + 1] * &su.c + &phi[k][t - 1 - k] * coupling;
            row.push(-beta * s_chol[k].solve(&(&bt * inner)));
        }
        g.push(row);
        let mut acc = Vector::zeros(nx);
        for t in k..horizon {
            acc += &phi[k][t - k] * (&m[t + 1] * pick(w_mean, t));
        }
        h.push(-beta * s_chol[k].solve(&(&bt * acc)));
    }

    Ok(FiniteGainSchedule { horizon, beta, f, g, h, m, s, phi })
}

/// Environment gains recomputed by unrolling the recursion one stage at a
/// time instead of through the products `Φ_{k,t}`: `result[k][j] = G_{k,k+j}`.
pub fn unrolled_environment_gains(player: &PlayerSpec, schedule: &FiniteGainSchedule) -> Vec<Vec<Mat>> {
    let horizon = schedule.horizon;
    let beta = schedule.beta;
    let mut out: Vec<Vec<Mat>> = (0..horizon).map(|k| vec![Mat::zeros(0, 0); horizon - k]).collect();
    for k in 0..horizon {
        out[k][0] = schedule.g[k][0].clone();
    }
    for t in 1..horizon {
        let st = player.stage(t);
        let closed_t = &st.a + &st.b * &schedule.f[t];
        // Sensitivity of the cost-to-go from stage t on to `z_t`, seen from x_t.
        let mut n = schedule.f[t].transpose() * st.k.transpose()
            + st.l.transpose()
            + beta * closed_t.transpose() * &schedule.m[t + 1] * &st.c;
        for k in (0..t).rev() {
            let sk = player.stage(k);
            let chol = schedule.s[k].clone().cholesky().expect("S_k is positive definite");
            out[k][t - k] = -beta * chol.solve(&(sk.b.transpose() * &n));
            let closed_k = &sk.a + &sk.b * &schedule.f[k];
            n = beta * closed_k.transpose() * n;
        }
    }
    out
}

/// Stationary optimal response for the infinite horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryGains {
    pub beta: f64,
    pub m: Mat,
    pub s: Mat,
    pub f: Mat,
    /// `g[n] = G_n` for `n ∈ [0, n_tail]`; later terms are below tolerance.
    pub g: Vec<Mat>,
    pub h: Vector,
    /// Spectral radius of `√β (A + B F)`.
    pub closed_loop_radius: f64,
    /// `‖ARE(M) − M‖_∞ / max(1, ‖M‖_∞)`.
    pub are_residual: f64,
    pub iterations: usize,
}

impl StationaryGains {
    pub fn n_tail(&self) -> usize {
        self.g.len() - 1
    }

    /// `G = Σ_n G_n`, the aggregate gain on a constant environment mean.
    pub fn g_sum(&self) -> Mat {
        let mut sum = Mat::zeros(self.f.nrows(), self.g[0].ncols());
        for g in &self.g {
            sum += g;
        }
        sum
    }

    /// `‖R F + β B' M (A + B F)‖_∞`.
    pub fn gain_identity_residual(&self, player: &PlayerSpec) -> f64 {
        let st = player.stage(0);
        linalg::max_abs(&(&st.r * &self.f + self.beta * st.b.transpose() * &self.m * (&st.a + &st.b * &self.f)))
    }
}

/// Right side of the algebraic Riccati equation at `m`.
pub fn riccati_map(stage: &PlayerStage, beta: f64, m: &Mat) -> Result<Mat> {
    let mut s = &stage.r + beta * stage.b.transpose() * m * &stage.b;
    linalg::symmetrize(&mut s);
    let chol = s.cholesky().ok_or(Error::SingularStageHessian { player: 0, stage: 0, cond: f64::INFINITY })?;
    let f = -beta * chol.solve(&(stage.b.transpose() * m * &stage.a));
    let mut next = &stage.q + beta * stage.a.transpose() * m * (&stage.a + &stage.b * f);
    linalg::symmetrize(&mut next);
    Ok(next)
}

/// Solves the algebraic Riccati equation by iterating the Riccati map from
/// zero, then forms the stationary gains.
pub fn are_solve(player: &PlayerSpec, w_mean: &Vector, tol: &Tolerances) -> Result<StationaryGains> {
    let st = player.stage(0);
    let beta = player.beta;
    let nx = player.n_x();
    let max_iter = Tolerances::count(tol.riccati_max_iter);
    let mut m = Mat::zeros(nx, nx);
    let mut iterations = 0;
    let mut delta = f64::INFINITY;
    while iterations < max_iter {
        let next = riccati_map(st, beta, &m)?;
        delta = linalg::max_abs(&(&next - &m));
        m = next;
        iterations += 1;
        if !delta.is_finite() {
            break;
        }
        if delta < tol.riccati_conv {
            break;
        }
    }
    if !(delta < tol.riccati_conv) {
        return Err(Error::RiccatiNoConvergence { player: 0, iterations, residual: delta });
    }

    let (s, chol) = stage_hessian(st, &m, beta, 0, tol)?;
    let bt = st.b.transpose();
    let f = -beta * chol.solve(&(&bt * &m * &st.a));
    let closed = &st.a + &st.b * &f;
    let closed_loop_radius = linalg::spectral_radius(&(beta.sqrt() * &closed));
    if !(closed_loop_radius < 1.0) {
        return Err(Error::UnstableFeedback { player: 0, radius: closed_loop_radius });
    }
    let are_residual = linalg::max_abs(&(riccati_map(st, beta, &m)? - &m)) / linalg::max_abs(&m).max(1.0);

    let p = beta * closed.transpose();
    let g0 = -chol.solve(&(st.k.transpose() + beta * &bt * &m * &st.c));
    // G_n = −β S⁻¹ B' P^{n−1} ((F'K' + L') + P M C), P = β (A + B F)'.
    let mut v = f.transpose() * st.k.transpose() + st.l.transpose() + &p * &m * &st.c;
    let next_gain = |v: &Mat| -beta * chol.solve(&(&bt * v));
    let g1 = next_gain(&v);
    let reference = linalg::max_abs(&g0).max(linalg::max_abs(&g1));
    let mut g = vec![g0];
    if reference > 0.0 {
        let max_terms = Tolerances::count(tol.g_tail_max_terms);
        let mut gn = g1;
        loop {
            let small = linalg::max_abs(&gn) < tol.g_tail_rel * reference;
            g.push(gn);
            if small {
                break;
            }
            if g.len() > max_terms {
                return Err(Error::GainTailNoDecay { player: 0, terms: max_terms });
            }
            v = &p * v;
            gn = next_gain(&v);
        }
    }

    let i_minus_p = Mat::identity(nx, nx) - &p;
    let resolvent = i_minus_p
        .lu()
        .solve(&(&m * w_mean))
        .ok_or(Error::UnstableFeedback { player: 0, radius: closed_loop_radius })?;
    let h = -beta * chol.solve(&(&bt * resolvent));

    Ok(StationaryGains { beta, m, s, f, g, h, closed_loop_radius, are_residual, iterations })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BellmanResidual {
    pub max: f64,
    pub mean: f64,
    pub samples: usize,
}

/// Compares the stationary gains against the exact minimizer of the
/// Bellman right-hand side at random states and environment-mean profiles.
///
/// The minimizer is `−S⁻¹(K'ẑ_0 + βB'M(Ax + Cẑ_0 + ŵ) + βB'N)` where `N`
/// collects the linear value-function term generated by the future means,
/// summed directly until the terms vanish.
pub fn bellman_residual(
    player: &PlayerSpec,
    gains: &StationaryGains,
    w_mean: &Vector,
    samples: usize,
    seed: u64,
) -> BellmanResidual {
    let st = player.stage(0);
    let beta = gains.beta;
    let (nx, ny) = (player.n_x(), st.c.ncols());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| Vector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let closed = &st.a + &st.b * &gains.f;
    let p = beta * closed.transpose();
    let coupling = gains.f.transpose() * st.k.transpose() + st.l.transpose();
    let mc_w = &p * &gains.m * w_mean;
    let chol = gains.s.clone().cholesky().expect("S is positive definite");
    let horizon = gains.n_tail() + 8;

    let mut max = 0.0_f64;
    let mut total = 0.0;
    for _ in 0..samples {
        let x = draw(nx);
        let z: Vec<Vector> = (0..horizon).map(|_| draw(ny)).collect();
        // N = Σ_{n≥0} P^n v_{1+n}, v_j = (F'K' + L') ẑ_j + P M (C ẑ_j + ŵ).
        let mut n_term = Vector::zeros(nx);
        let mut power = Mat::identity(nx, nx);
        let mut j = 1;
        loop {
            let v = match z.get(j) {
                Some(zj) => &coupling * zj + &p * &gains.m * (&st.c * zj) + &mc_w,
                None => mc_w.clone(),
            };
            let term = &power * v;
            n_term += &term;
            if j >= horizon && linalg::max_abs(&power) < 1e-18 {
                break;
            }
            power = &power * &p;
            j += 1;
            if j > 10_000_000 {
                break;
            }
        }
        let rhs = st.k.transpose() * &z[0]
            + beta * st.b.transpose() * &gains.m * (&st.a * &x + &st.c * &z[0] + w_mean)
            + beta * st.b.transpose() * n_term;
        let argmin = -chol.solve(&rhs);
        let mut u = &gains.f * &x + &gains.h;
        for (n, g) in gains.g.iter().enumerate() {
            u += g * &z[n];
        }
        let err = linalg::max_abs_vec(&(argmin - u)) / (1.0 + linalg::max_abs_vec(&x));
        max = max.max(err);
        total += err;
    }
    BellmanResidual { max, mean: if samples > 0 { total / samples as f64 } else { 0.0 }, samples }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::Horizon;
    use proptest::prelude::*;

    fn scalar(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    fn scalar_player(a: f64, b: f64, c: f64, q: f64, r: f64, k: f64, l: f64, beta: f64) -> PlayerSpec {
        PlayerSpec::time_invariant(
            PlayerStage {
                a: scalar(a),
                b: scalar(b),
                c: scalar(c),
                q: scalar(q),
                r: scalar(r),
                k: scalar(k),
                l: scalar(l),
            },
            Some(scalar(1.0)),
            beta,
        )
    }

    #[test]
    fn completed_square_without_cross_terms() {
        let p = scalar_player(1.0, 1.0, 0.0, 2.0, 3.0, 0.0, 0.0, 1.0);
        let tc = completed_square_cost(p.stage(0)).unwrap();
        assert_eq!(tc.z_weight[(0, 0)], 0.0);
        let (x, u, z) = (Vector::from_element(1, 0.7), Vector::from_element(1, -1.1), Vector::from_element(1, 2.0));
        assert_eq!(tc.shifted(&x, &u, &z), p.stage(0).stage_cost(&x, &u, &z));
    }

    #[test]
    fn completed_square_scalar_expansion() {
        // (x + 2z)² − 4z² = x² + 4xz, which is 2 z L x with L = 2.
        let p = scalar_player(1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 2.0, 1.0);
        let tc = completed_square_cost(p.stage(0)).unwrap();
        assert_eq!(tc.x_shift[(0, 0)], 2.0);
        assert_eq!(tc.z_weight[(0, 0)], 4.0);
    }

    #[test]
    fn completed_square_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut unif = |lo: f64, hi: f64| rand::Rng::random_range(&mut rng, lo..hi);
            let p = scalar_player(1.0, 1.0, 0.0, unif(0.1, 3.0), unif(0.1, 3.0), unif(-2.0, 2.0), unif(-2.0, 2.0), 1.0);
            let tc = completed_square_cost(p.stage(0)).unwrap();
            for _ in 0..100 {
                let x = Vector::from_element(1, unif(-5.0, 5.0));
                let u = Vector::from_element(1, unif(-5.0, 5.0));
                let z = Vector::from_element(1, unif(-5.0, 5.0));
                let direct = p.stage(0).stage_cost(&x, &u, &z);
                assert!((direct - tc.cost(&x, &u, &z)).abs() < 1e-12 * (1.0 + direct.abs()));
            }
        }
    }

    #[test]
    fn one_step_scalar_dynamic_programming() {
        // min_u x² + u² + (x + u)² is attained at u = −x/2, value 1.5 x².
        let p = scalar_player(1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0);
        let sched = riccati_backward(&p, 1, &[Vector::zeros(1)], &Tolerances::default()).unwrap();
        assert_eq!(sched.s[0][(0, 0)], 2.0);
        assert!((sched.f[0][(0, 0)] + 0.5).abs() < 1e-15);
        assert!((sched.m[0][(0, 0)] - 1.5).abs() < 1e-15);
        assert_eq!(sched.m[1][(0, 0)], 1.0);
    }

    #[test]
    fn no_environment_channel_means_no_environment_gains() {
        let p = scalar_player(0.9, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.95);
        let sched = riccati_backward(&p, 6, &[Vector::from_element(1, 0.3)], &Tolerances::default()).unwrap();
        assert!(sched.g.iter().flatten().all(|g| linalg::max_abs(g) == 0.0));
        let sched = riccati_backward(&p, 6, &[Vector::zeros(1)], &Tolerances::default()).unwrap();
        assert!(sched.h.iter().all(|h| linalg::max_abs_vec(h) == 0.0));
    }

    #[test]
    fn scalar_are_matches_quadratic_formula() {
        let p = scalar_player(1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.9);
        let gains = are_solve(&p, &Vector::zeros(1), &Tolerances::default()).unwrap();
        let exact = (0.8 + 4.24_f64.sqrt()) / 1.8;
        assert!((gains.m[(0, 0)] - exact).abs() < 1e-11);
        assert!(gains.g.iter().all(|g| linalg::max_abs(g) == 0.0));
        assert_eq!(gains.h[0], 0.0);
        assert!(gains.are_residual < 1e-10);
    }

    #[test]
    fn heavy_discounting_suppresses_future() {
        let p = scalar_player(1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1e-6);
        let gains = are_solve(&p, &Vector::zeros(1), &Tolerances::default()).unwrap();
        assert!((gains.m[(0, 0)] - 1.0).abs() < 1e-5);
        assert!(gains.f[(0, 0)].abs() < 1e-5);
    }

    #[test]
    fn bellman_decoupled_scalar() {
        let p = scalar_player(1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.9);
        let w = Vector::zeros(1);
        let gains = are_solve(&p, &w, &Tolerances::default()).unwrap();
        let res = bellman_residual(&p, &gains, &w, 1000, 3);
        assert!(res.max < 1e-9, "{res:?}");
        // Closed-form scalar argmin −(R + βB'MB)⁻¹ βB'MA x at x = 1.
        let m = gains.m[(0, 0)];
        assert!((gains.f[(0, 0)] + 0.9 * m / (1.0 + 0.9 * m)).abs() < 1e-12);
    }

    #[test]
    fn bellman_coupled_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let spec = fixtures::random_game(&mut rng, Horizon::Infinite, 0.3);
            let w = Vector::from_element(spec.players[0].n_x(), 0.2);
            let gains = are_solve(&spec.players[0], &w, &Tolerances::default()).unwrap();
            let res = bellman_residual(&spec.players[0], &gains, &w, 50, 9);
            assert!(res.max < 1e-8, "{res:?}");
        }
    }

    #[test]
    fn unrolled_gains_match_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let spec = fixtures::random_game(&mut rng, Horizon::Finite(6), 0.4);
            let player = &spec.players[0];
            let sched = riccati_backward(player, 6, &[Vector::zeros(player.n_x())], &Tolerances::default()).unwrap();
            let unrolled = unrolled_environment_gains(player, &sched);
            for (row_a, row_b) in sched.g.iter().zip(&unrolled) {
                for (a, b) in row_a.iter().zip(row_b) {
                    assert!(linalg::max_abs(&(a - b)) < 1e-10 * (1.0 + linalg::max_abs(a)));
                }
            }
        }
    }

    #[test]
    fn finite_converges_to_stationary() {
        let p = scalar_player(1.2, 1.0, 0.1, 1.0, 0.5, 0.1, 0.2, 0.9);
        let gains = are_solve(&p, &Vector::zeros(1), &Tolerances::default()).unwrap();
        let sched = riccati_backward(&p, 200, &[Vector::zeros(1)], &Tolerances::default()).unwrap();
        assert!(linalg::max_abs(&(&sched.m[0] - &gains.m)) < 1e-6);
        // Leading environment gains agree as well.
        for n in 0..5 {
            assert!(linalg::max_abs(&(sched.g_at(0, n) - &gains.g[n])) < 1e-6);
        }
    }

    #[test]
    fn stationary_gain_tail_decays_geometrically() {
        let p = scalar_player(1.0, 1.0, 0.3, 1.0, 1.0, 0.2, 0.1, 0.9);
        let gains = are_solve(&p, &Vector::zeros(1), &Tolerances::default()).unwrap();
        let ratio_bound = 0.9_f64.sqrt() * gains.closed_loop_radius + 1e-9;
        for n in 1..gains.n_tail() {
            let (a, b) = (linalg::max_abs(&gains.g[n]), linalg::max_abs(&gains.g[n + 1]));
            assert!(b <= ratio_bound * a * (1.0 + 1e-9));
        }
        assert!(linalg::max_abs(gains.g.last().unwrap()) < 1e-12 * linalg::max_abs(&gains.g[0]).max(linalg::max_abs(&gains.g[1])));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn finite_gain_identity_holds(seed in any::<u64>(), horizon in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = fixtures::random_game(&mut rng, Horizon::Finite(horizon), 0.3);
            for player in &spec.players {
                let sched = riccati_backward(player, horizon, &[Vector::zeros(player.n_x())], &Tolerances::default()).unwrap();
                prop_assert!(sched.gain_identity_residual(player) < 1e-10);
                for m in &sched.m {
                    prop_assert!(linalg::is_symmetric(m, 1e-12));
                    prop_assert!(linalg::min_sym_eigenvalue(m) > -1e-10);
                }
            }
        }

        #[test]
        fn riccati_monotone_in_horizon(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = fixtures::random_game(&mut rng, Horizon::Infinite, 0.3);
            let mut player = spec.players[0].clone();
            let nx = player.n_x();
            player.q_terminal = Some(Mat::zeros(nx, nx));
            let sched = riccati_backward(&player, 30, &[Vector::zeros(nx)], &Tolerances::default()).unwrap();
            // M_k of the 30-stage problem is the value matrix of a (30 − k)-stage problem.
            for k in 0..30 {
                let diff = &sched.m[k] - &sched.m[k + 1];
                prop_assert!(linalg::min_sym_eigenvalue(&diff) > -1e-10 * (1.0 + linalg::max_abs(&sched.m[k])));
            }
        }
    }
}
