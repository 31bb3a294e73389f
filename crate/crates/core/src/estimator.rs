//! Conditional means of the stacked state under the subjective model.
//!
//! Substituting the fixed-point coefficients into the vector form gives a
//! closed-loop model driven by the estimate `X̂_{t|t−1}`:
//!
//! ```text
//! ȳ_t     = 𝒟_t X̄_t + 𝒢^p_t X̂_{t|t−1} + ℋ̌^p_t + ξ_t
//! X̄_{t+1} = 𝒜_t X̄_t + 𝒢^X_t X̂_{t|t−1} + ℋ̌^X_t + 𝒞_t ȳ_t + W_t
//! ```
//!
//! and, for Gaussian primitives, `X̂` is produced exactly by a Kalman filter.
//! The filter covariance does not depend on the observations, so
//! [`FilterPlan`] precomputes it together with the affine update
//! `X̂_{t+1|t} = Φ_t X̂_{t|t−1} + Γ_t y_t + c_t`.

use std::fmt::Write as _;

use crate::aggregate::AggregatedDynamics;
use crate::error::{Error, Result};
use crate::fixed_point::EnvFixedPoint;
use crate::linalg::{self, Mat, Vector};
use crate::model::{DimensionTable, Horizon, NoiseFamily};
use crate::tolerances::Tolerances;

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopStage {
    pub a: Mat,
    /// `𝒢^X_t`, acting on the estimate.
    pub gx: Mat,
    pub c: Mat,
    pub d: Mat,
    /// `𝒢^p_t`, acting on the estimate.
    pub gp: Mat,
    /// `ℋ̌^p_t` without the noise mean.
    pub hp: Vector,
    /// `ℋ̌^X_t` without the noise mean.
    pub hx: Vector,
    pub xi_mean: Vector,
    pub xi_cov: Mat,
    pub w_mean: Vector,
    pub w_cov: Mat,
}

impl ClosedLoopStage {
    /// `ȳ_t` for a realization of `X̄_t`, the estimate and the noise.
    pub fn observe(&self, x: &Vector, x_hat: &Vector, xi: &Vector) -> Vector {
        &self.d * x + &self.gp * x_hat + &self.hp + xi
    }

    /// `X̄_{t+1}` for a realization.
    pub fn advance(&self, x: &Vector, x_hat: &Vector, y: &Vector, w: &Vector) -> Vector {
        &self.a * x + &self.gx * x_hat + &self.hx + &self.c * y + w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopModel {
    pub horizon: Horizon,
    pub dims: DimensionTable,
    /// One entry per stage (finite) or a single stationary entry.
    pub stages: Vec<ClosedLoopStage>,
    pub x0_mean: Vector,
    pub x0_cov: Mat,
    pub family: NoiseFamily,
}

impl ClosedLoopModel {
    pub fn stage(&self, t: usize) -> &ClosedLoopStage {
        if self.stages.len() == 1 {
            &self.stages[0]
        } else {
            &self.stages[t]
        }
    }

    pub fn n_state(&self) -> usize {
        self.x0_mean.len()
    }

    pub fn n_y(&self) -> usize {
        self.stages[0].d.nrows()
    }

    pub fn is_time_invariant(&self) -> bool {
        self.stages.len() == 1
    }

    /// Whether the filter output is the conditional expectation. Otherwise it
    /// is the best linear estimate only.
    pub fn is_exact(&self) -> bool {
        self.family == NoiseFamily::Gaussian
    }
}

/// Substitutes the fixed-point coefficients into the vector form.
pub fn closed_loop(agg: &AggregatedDynamics, fp: &EnvFixedPoint) -> Result<ClosedLoopModel> {
    let stages = match (agg.horizon, fp) {
        (Horizon::Finite(t_max), EnvFixedPoint::Finite(fp)) => (0..t_max)
            .map(|t| {
                let st = agg.stage(t);
                stage_from(st, &fp.a[t], &fp.b[t])
            })
            .collect(),
        (Horizon::Infinite, EnvFixedPoint::Stationary(fp)) => {
            vec![stage_from(agg.stage(0), &fp.a, &fp.b)]
        }
        _ => return Err(Error::Usage("fixed point does not match the horizon".into())),
    };
    Ok(ClosedLoopModel {
        horizon: agg.horizon,
        dims: agg.dims.clone(),
        stages,
        x0_mean: agg.x0_mean.clone(),
        x0_cov: agg.x0_cov.clone(),
        family: agg.family,
    })
}

fn stage_from(st: &crate::aggregate::AggStage, a: &[Mat], b: &[Vector]) -> ClosedLoopStage {
    let (n_x, n_y) = (st.a.nrows(), st.d.nrows());
    let mut gp = Mat::zeros(n_y, n_x);
    let mut gx = Mat::zeros(n_x, n_x);
    let mut hp = st.hp.clone();
    let mut hx = st.hx.clone();
    for (l, (gpl, gxl)) in st.gp.iter().zip(&st.gx).enumerate() {
        gp += gpl * &a[l];
        gx += gxl * &a[l];
        hp += gpl * &b[l];
        hx += gxl * &b[l];
    }
    ClosedLoopStage {
        a: st.a.clone(),
        gx,
        c: st.c.clone(),
        d: st.d.clone(),
        gp,
        hp,
        hx,
        xi_mean: st.xi_mean.clone(),
        xi_cov: st.xi_cov.clone(),
        w_mean: st.w_mean.clone(),
        w_cov: st.w_cov.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub t: usize,
    /// `X̂_{t|t−1}`.
    pub x_hat: Vector,
    /// `Σ_{t|t−1}`.
    pub sigma: Mat,
    /// Innovation covariance and gain of the step that produced this state.
    pub innovation_cov: Mat,
    pub gain: Mat,
}

impl FilterState {
    pub fn initial(model: &ClosedLoopModel) -> Self {
        let (n, m) = (model.n_state(), model.n_y());
        FilterState {
            t: 0,
            x_hat: model.x0_mean.clone(),
            sigma: model.x0_cov.clone(),
            innovation_cov: Mat::zeros(m, m),
            gain: Mat::zeros(n, m),
        }
    }
}

/// One covariance step: returns `(𝒜Σ𝒟'S⁻¹, S, Σ_next)`.
pub fn covariance_step(stage: &ClosedLoopStage, sigma: &Mat, t: usize, cond_cap: f64) -> Result<(Mat, Mat, Mat)> {
    let s = &stage.d * sigma * stage.d.transpose() + &stage.xi_cov;
    let cond = linalg::spd_condition(&s);
    if !(cond < cond_cap) {
        return Err(Error::SingularInnovation { stage: t, cond });
    }
    let chol = s.clone().cholesky().ok_or(Error::SingularInnovation { stage: t, cond })?;
    // Σ𝒟'S⁻¹ from S X = 𝒟Σ.
    let sd_sinv = chol.solve(&(&stage.d * sigma)).transpose();
    let gain = &stage.a * &sd_sinv;
    let reduced = sigma - &sd_sinv * &stage.d * sigma;
    let mut next = &stage.a * reduced * stage.a.transpose() + &stage.w_cov;
    linalg::symmetrize(&mut next);
    Ok((gain, s, next))
}

pub fn filter_step(model: &ClosedLoopModel, state: &FilterState, y: &Vector, tol: &Tolerances) -> Result<FilterState> {
    let st = model.stage(state.t);
    let (gain, s, sigma) = covariance_step(st, &state.sigma, state.t, tol.innovation_cond_cap)?;
    let innovation = y - (&st.d + &st.gp) * &state.x_hat - &st.hp - &st.xi_mean;
    let x_hat = (&st.a + &st.gx) * &state.x_hat + &st.hx + &st.c * y + &st.w_mean + &gain * innovation;
    Ok(FilterState { t: state.t + 1, x_hat, sigma, innovation_cov: s, gain })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanStep {
    /// `Σ_{t|t−1}`.
    pub sigma: Mat,
    pub gain: Mat,
    pub phi: Mat,
    pub gamma: Mat,
    pub offset: Vector,
}

/// Affine filter updates for stages `0..len`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPlan {
    pub steps: Vec<PlanStep>,
}

impl FilterPlan {
    pub fn new(model: &ClosedLoopModel, len: usize, tol: &Tolerances) -> Result<Self> {
        let mut sigma = model.x0_cov.clone();
        let mut steps = Vec::with_capacity(len);
        for t in 0..len {
            let st = model.stage(t);
            let (gain, _, next) = covariance_step(st, &sigma, t, tol.innovation_cond_cap)?;
            let phi = &st.a + &st.gx - &gain * (&st.d + &st.gp);
            let gamma = &st.c + &gain;
            let offset = &st.hx + &st.w_mean - &gain * (&st.hp + &st.xi_mean);
            steps.push(PlanStep { sigma, gain, phi, gamma, offset });
            sigma = next;
        }
        Ok(FilterPlan { steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn update(&self, t: usize, x_hat: &Vector, y: &Vector) -> Vector {
        let s = &self.steps[t];
        &s.phi * x_hat + &s.gamma * y + &s.offset
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyCovariance {
    pub sigma: Mat,
    pub residual: f64,
    pub iterations: usize,
}

/// Fixed point of the covariance recursion for a time-invariant model,
/// iterated from `cov[X_0]`.
pub fn steady_state_covariance(model: &ClosedLoopModel, tol: &Tolerances) -> Result<SteadyCovariance> {
    if !model.is_time_invariant() {
        return Err(Error::Usage("steady-state covariance needs a time-invariant model".into()));
    }
    let st = model.stage(0);
    let max_iter = Tolerances::count(tol.sigma_max_iter);
    let mut sigma = model.x0_cov.clone();
    let mut delta = f64::INFINITY;
    for it in 0..max_iter {
        let (_, _, next) = covariance_step(st, &sigma, it, tol.innovation_cond_cap)?;
        let trace = next.trace();
        if !trace.is_finite() || trace > tol.divergence_trace {
            return Err(Error::CovarianceDiverged { iterations: it + 1, trace });
        }
        delta = linalg::max_abs(&(&next - &sigma));
        sigma = next;
        if delta < tol.sigma_conv {
            let residual = covariance_residual(st, &sigma, tol)?;
            return Ok(SteadyCovariance { sigma, residual, iterations: it + 1 });
        }
    }
    Err(Error::CovarianceNoConvergence { iterations: max_iter, delta })
}

/// `‖Σ − (𝒜(Σ − Σ𝒟'S⁻¹𝒟Σ)𝒜' + cov[W])‖_∞`.
pub fn covariance_residual(stage: &ClosedLoopStage, sigma: &Mat, tol: &Tolerances) -> Result<f64> {
    let (_, _, next) = covariance_step(stage, sigma, 0, tol.innovation_cond_cap)?;
    Ok(linalg::max_abs(&(next - sigma)))
}

/// Exact first and second moments of `(X̄_t, X̂_{t|t−1}, ȳ_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTrajectory {
    pub n_x: usize,
    pub n_y: usize,
    /// Joint mean of `[X̄_t; X̂_t; ȳ_t]`.
    pub mean: Vec<Vector>,
    pub cov: Vec<Mat>,
}

impl MomentTrajectory {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mean_x(&self, t: usize) -> Vector {
        self.mean[t].rows(0, self.n_x).into_owned()
    }

    pub fn mean_x_hat(&self, t: usize) -> Vector {
        self.mean[t].rows(self.n_x, self.n_x).into_owned()
    }

    pub fn mean_y(&self, t: usize) -> Vector {
        self.mean[t].rows(2 * self.n_x, self.n_y).into_owned()
    }

    pub fn cov_x(&self, t: usize) -> Mat {
        self.cov[t].view((0, 0), (self.n_x, self.n_x)).into_owned()
    }

    pub fn cov_y(&self, t: usize) -> Mat {
        let o = 2 * self.n_x;
        self.cov[t].view((o, o), (self.n_y, self.n_y)).into_owned()
    }

    /// Mean and covariance of `[X̄_t; ȳ_t]`.
    pub fn observable(&self, t: usize) -> (Vector, Mat) {
        let idx: Vec<usize> = (0..self.n_x).chain(2 * self.n_x..2 * self.n_x + self.n_y).collect();
        let mean = Vector::from_fn(idx.len(), |i, _| self.mean[t][idx[i]]);
        let cov = Mat::from_fn(idx.len(), idx.len(), |i, j| self.cov[t][(idx[i], idx[j])]);
        (mean, cov)
    }

    /// CSV with columns `t, mean[...], cov[...]` over `[X̄_t; ȳ_t]`,
    /// flattened row-major. Labels name block positions.
    pub fn to_csv(&self, dims: &DimensionTable) -> String {
        let labels = state_labels(dims);
        let mut out = String::from("t");
        for l in &labels {
            write!(out, ",mean[{l}]").unwrap();
        }
        for a in &labels {
            for b in &labels {
                write!(out, ",cov[{a};{b}]").unwrap();
            }
        }
        out.push('\n');
        for t in 0..self.len() {
            let (mean, cov) = self.observable(t);
            write!(out, "{t}").unwrap();
            for v in mean.iter() {
                write!(out, ",{v:e}").unwrap();
            }
            for i in 0..cov.nrows() {
                for j in 0..cov.ncols() {
                    write!(out, ",{:e}", cov[(i, j)]).unwrap();
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Names for the coordinates of `[X; y]`: `x0[j]` for the environment
/// state, `x{i}[j]` for player `i` (1-based) and `y[j]`.
pub fn state_labels(dims: &DimensionTable) -> Vec<String> {
    let mut labels: Vec<String> = dims.env.clone().map(|j| format!("x0[{j}]")).collect();
    for (i, block) in dims.players.iter().enumerate() {
        labels.extend((0..block.x.len()).map(|j| format!("x{}[{j}]", i + 1)));
    }
    labels.extend((0..dims.n_y).map(|j| format!("y[{j}]")));
    labels
}

/// Propagates the augmented linear state `(X̄, X̂)` through the closed loop
/// with the filter in place.
pub fn moment_propagation(model: &ClosedLoopModel, plan: &FilterPlan, horizon: usize) -> MomentTrajectory {
    let (n, m) = (model.n_state(), model.n_y());
    let mut z_mean = linalg::vec_concat(&[&model.x0_mean, &model.x0_mean]);
    let mut z_cov = linalg::block_diag(&[&model.x0_cov, &Mat::zeros(n, n)]);
    let mut mean = Vec::with_capacity(horizon);
    let mut cov = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let st = model.stage(t);
        let step = &plan.steps[t];
        // y = O z + ℋ̌^p + ξ
        let mut o = Mat::zeros(m, 2 * n);
        linalg::set_block(&mut o, 0, 0, &st.d);
        linalg::set_block(&mut o, 0, n, &st.gp);
        let y_mean = &o * &z_mean + &st.hp + &st.xi_mean;
        let oc = &o * &z_cov;
        let y_cov = &oc * o.transpose() + &st.xi_cov;
        let mut joint = Mat::zeros(2 * n + m, 2 * n + m);
        linalg::set_block(&mut joint, 0, 0, &z_cov);
        linalg::set_block(&mut joint, 2 * n, 0, &oc);
        linalg::set_block(&mut joint, 0, 2 * n, &oc.transpose());
        linalg::set_block(&mut joint, 2 * n, 2 * n, &y_cov);
        mean.push(linalg::vec_concat(&[&z_mean, &y_mean]));
        cov.push(joint);

        // z' = T z + Γ_y y + const
        let mut tr = Mat::zeros(2 * n, 2 * n);
        linalg::set_block(&mut tr, 0, 0, &st.a);
        linalg::set_block(&mut tr, 0, n, &st.gx);
        linalg::set_block(&mut tr, n, n, &step.phi);
        let mut gy = Mat::zeros(2 * n, m);
        linalg::set_block(&mut gy, 0, 0, &st.c);
        linalg::set_block(&mut gy, n, 0, &step.gamma);
        let constant = linalg::vec_concat(&[&(&st.hx + &st.w_mean), &step.offset]);
        let next_mean = &tr * &z_mean + &gy * &y_mean + constant;
        let full = &tr + &gy * &o;
        let mut next_cov = &full * &z_cov * full.transpose() + &gy * &st.xi_cov * gy.transpose();
        linalg::add_block(&mut next_cov, 0, 0, &st.w_cov);
        linalg::symmetrize(&mut next_cov);
        z_mean = next_mean;
        z_cov = next_cov;
    }
    MomentTrajectory { n_x: n, n_y: m, mean, cov }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PlayerBlock;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn dims(n: usize, m: usize) -> DimensionTable {
        DimensionTable {
            env: 0..0,
            players: vec![PlayerBlock { x: 0..n, u: 0..n }],
            n_state: n,
            n_control: n,
            n_y: m,
        }
    }

    fn scalar(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    fn scalar_model(xi_cov: f64) -> ClosedLoopModel {
        ClosedLoopModel {
            horizon: Horizon::Infinite,
            dims: dims(1, 1),
            stages: vec![ClosedLoopStage {
                a: scalar(1.0),
                gx: scalar(0.0),
                c: scalar(0.0),
                d: scalar(1.0),
                gp: scalar(0.0),
                hp: Vector::zeros(1),
                hx: Vector::zeros(1),
                xi_mean: Vector::zeros(1),
                xi_cov: scalar(xi_cov),
                w_mean: Vector::zeros(1),
                w_cov: scalar(0.5),
            }],
            x0_mean: Vector::zeros(1),
            x0_cov: scalar(1.0),
            family: NoiseFamily::Gaussian,
        }
    }

    fn normal(rng: &mut impl Rng, n: usize) -> Vector {
        Vector::from_fn(n, |_, _| StandardNormal.sample(rng))
    }

    fn random_mat(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> Mat {
        Mat::from_fn(r, c, |_, _| { let v: f64 = StandardNormal.sample(rng); scale * v })
    }

    fn random_spd(rng: &mut impl Rng, n: usize, floor: f64) -> Mat {
        let l = random_mat(rng, n, n, 0.5);
        &l * l.transpose() + Mat::identity(n, n) * floor
    }

    fn random_model(rng: &mut impl Rng, n: usize, m: usize, horizon: usize) -> ClosedLoopModel {
        let stages = (0..horizon)
            .map(|_| ClosedLoopStage {
                a: random_mat(rng, n, n, 0.3),
                gx: random_mat(rng, n, n, 0.1),
                c: random_mat(rng, n, m, 0.2),
                d: random_mat(rng, m, n, 0.7),
                gp: random_mat(rng, m, n, 0.1),
                hp: normal(rng, m),
                hx: normal(rng, n),
                xi_mean: normal(rng, m) * 0.2,
                xi_cov: random_spd(rng, m, 0.2),
                w_mean: normal(rng, n) * 0.2,
                w_cov: random_spd(rng, n, 0.05),
            })
            .collect();
        ClosedLoopModel {
            horizon: Horizon::Finite(horizon),
            dims: dims(n, m),
            stages,
            x0_mean: normal(rng, n),
            x0_cov: random_spd(rng, n, 0.1),
            family: NoiseFamily::Gaussian,
        }
    }

    #[test]
    fn scalar_gain_and_fixed_point() {
        let model = scalar_model(1.0);
        let tol = Tolerances::default();
        let (gain, s, next) = covariance_step(model.stage(0), &model.x0_cov, 0, tol.innovation_cond_cap).unwrap();
        assert!((gain[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(s[(0, 0)], 2.0);
        assert!((next[(0, 0)] - 1.0).abs() < 1e-15);
        let steady = steady_state_covariance(&model, &tol).unwrap();
        assert!((steady.sigma[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(steady.residual < 1e-12);
    }

    #[test]
    fn iteration_oracle_for_scalar_fixed_point() {
        // From Σ = 5 the scalar map σ ↦ σ/(σ+1) + 1/2 contracts to 1.
        let mut model = scalar_model(1.0);
        model.x0_cov = scalar(5.0);
        let steady = steady_state_covariance(&model, &Tolerances::default()).unwrap();
        assert!((steady.sigma[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(steady.iterations > 5);
    }

    #[test]
    fn uninformative_observation_gives_open_loop_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = random_model(&mut rng, 3, 2, 6);
        for st in &mut model.stages {
            st.xi_cov = Mat::identity(2, 2) * 1e12;
        }
        let tol = Tolerances::default();
        let mut state = FilterState::initial(&model);
        let mut open_loop = model.x0_mean.clone();
        for t in 0..6 {
            let st = model.stage(t);
            let y = normal(&mut rng, 2) * 3.0;
            state = filter_step(&model, &state, &y, &tol).unwrap();
            open_loop = (&st.a + &st.gx) * &open_loop + &st.hx + &st.c * &y + &st.w_mean;
            assert!(linalg::max_abs_vec(&(&state.x_hat - &open_loop)) < 1e-6);
        }
    }

    #[test]
    fn no_process_noise_with_stable_loop_has_zero_covariance() {
        let mut model = scalar_model(1.0);
        model.stages[0].a = scalar(0.5);
        model.stages[0].w_cov = scalar(0.0);
        let steady = steady_state_covariance(&model, &Tolerances::default()).unwrap();
        assert!(steady.sigma[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn singular_innovation_is_reported_with_stage() {
        let mut model = scalar_model(0.0);
        model.x0_cov = scalar(0.0);
        model.stages[0].w_cov = scalar(0.0);
        let err = filter_step(&model, &FilterState::initial(&model), &Vector::zeros(1), &Tolerances::default());
        assert!(matches!(err, Err(Error::SingularInnovation { stage: 0, .. })));
    }

    #[test]
    fn unstable_loop_diverges() {
        let mut model = scalar_model(1.0);
        model.stages[0].a = scalar(3.0);
        model.stages[0].d = scalar(0.0);
        assert!(matches!(
            steady_state_covariance(&model, &Tolerances::default()),
            Err(Error::CovarianceDiverged { .. })
        ));
    }

    /// Conditions the stacked Gaussian `(X_0, W_0.., ξ_0..)` directly.
    #[test]
    fn filter_matches_joint_gaussian_conditioning() {
        let (n, m, horizon) = (5, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = random_model(&mut rng, n, m, horizon);
        let tol = Tolerances::default();
        let plan = FilterPlan::new(&model, horizon, &tol).unwrap();

        let n_prim = n + horizon * (n + m);
        let w_at = |t: usize| n + t * n;
        let xi_at = |t: usize| n + horizon * n + t * m;
        let mut prim_cov = Mat::zeros(n_prim, n_prim);
        linalg::set_block(&mut prim_cov, 0, 0, &model.x0_cov);
        for t in 0..horizon {
            linalg::set_block(&mut prim_cov, w_at(t), w_at(t), &model.stage(t).w_cov);
            linalg::set_block(&mut prim_cov, xi_at(t), xi_at(t), &model.stage(t).xi_cov);
        }

        for _ in 0..5 {
            // One realization of the centered primitives.
            let e = linalg::psd_factor(&prim_cov, 0.0) * normal(&mut rng, n_prim);
            // Affine maps of X̄_t, X̂_t and y_t in the primitives.
            let mut px = Mat::zeros(n, n_prim);
            px.view_mut((0, 0), (n, n)).fill_with_identity();
            let mut cx = model.x0_mean.clone();
            let mut ph = Mat::zeros(n, n_prim);
            let mut ch = model.x0_mean.clone();
            let mut py_rows: Vec<Mat> = Vec::new();
            let mut cy_rows: Vec<Vector> = Vec::new();
            for t in 0..horizon {
                if t > 0 {
                    let py = linalg_vstack(&py_rows);
                    let cy = linalg::vec_concat(&cy_rows.iter().collect::<Vec<_>>());
                    let y_obs = &py * &e + &cy;
                    let cov_xy = &px * &prim_cov * py.transpose();
                    let cov_yy = &py * &prim_cov * py.transpose();
                    let solve = cov_yy.clone().cholesky().unwrap();
                    let cond_mean = &cx + &cov_xy * solve.solve(&(&y_obs - &cy));
                    let cond_cov = &px * &prim_cov * px.transpose() - &cov_xy * solve.solve(&cov_xy.transpose());
                    let x_hat = &ph * &e + &ch;
                    assert!(
                        linalg::max_abs_vec(&(&x_hat - &cond_mean)) < 1e-9,
                        "t={t}: {}",
                        linalg::max_abs_vec(&(&x_hat - &cond_mean))
                    );
                    assert!(linalg::max_abs(&(&plan.steps[t].sigma - cond_cov)) < 1e-9);
                }
                let st = model.stage(t);
                let mut py = &st.d * &px + &st.gp * &ph;
                linalg::add_block(&mut py, 0, xi_at(t), &Mat::identity(m, m));
                let cy = &st.d * &cx + &st.gp * &ch + &st.hp + &st.xi_mean;
                let step = &plan.steps[t];
                let mut px_next = &st.a * &px + &st.gx * &ph + &st.c * &py;
                linalg::add_block(&mut px_next, 0, w_at(t), &Mat::identity(n, n));
                let cx_next = &st.a * &cx + &st.gx * &ch + &st.c * &cy + &st.hx + &st.w_mean;
                let ph_next = &step.phi * &ph + &step.gamma * &py;
                let ch_next = &step.phi * &ch + &step.gamma * &cy + &step.offset;
                py_rows.push(py);
                cy_rows.push(cy);
                px = px_next;
                cx = cx_next;
                ph = ph_next;
                ch = ch_next;
            }
        }
    }

    fn linalg_vstack(blocks: &[Mat]) -> Mat {
        let rows = blocks.iter().map(|b| b.nrows()).sum();
        let mut out = Mat::zeros(rows, blocks[0].ncols());
        let mut at = 0;
        for b in blocks {
            linalg::set_block(&mut out, at, 0, b);
            at += b.nrows();
        }
        out
    }

    #[test]
    fn sequential_filter_equals_plan_and_mean_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = random_model(&mut rng, 4, 2, 8);
        let tol = Tolerances::default();
        let plan = FilterPlan::new(&model, 8, &tol).unwrap();
        let moments = moment_propagation(&model, &plan, 8);
        // With every primitive at its mean the path is the mean path.
        let mut state = FilterState::initial(&model);
        let mut x = model.x0_mean.clone();
        for t in 0..8 {
            let st = model.stage(t);
            let y = st.observe(&x, &state.x_hat, &st.xi_mean);
            assert!(linalg::max_abs_vec(&(&y - moments.mean_y(t))) < 1e-10);
            assert!(linalg::max_abs_vec(&(&state.x_hat - moments.mean_x_hat(t))) < 1e-10);
            assert!(linalg::max_abs_vec(&(&x - moments.mean_x(t))) < 1e-10);
            let planned = plan.update(t, &state.x_hat, &y);
            let next_x = st.advance(&x, &state.x_hat, &y, &st.w_mean);
            state = filter_step(&model, &state, &y, &tol).unwrap();
            assert!(linalg::max_abs_vec(&(&planned - &state.x_hat)) < 1e-12);
            assert!(linalg::max_abs(&(&state.sigma - &state.sigma.transpose())) == 0.0);
            x = next_x;
        }
    }

    #[test]
    fn steady_state_initialization_does_not_drift() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = random_model(&mut rng, 3, 2, 1);
        model.horizon = Horizon::Infinite;
        let tol = Tolerances::default();
        let steady = steady_state_covariance(&model, &tol).unwrap();
        assert!(steady.residual < 1e-9);
        model.x0_cov = steady.sigma.clone();
        let plan = FilterPlan::new(&model, 1000, &tol).unwrap();
        let drift = plan.steps.iter().map(|s| linalg::max_abs(&(&s.sigma - &steady.sigma))).fold(0.0, f64::max);
        assert!(drift < 1e-10, "drift {drift}");
    }

    #[test]
    fn decoupled_y_covariance_is_a_noise_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = random_model(&mut rng, 3, 1, 5);
        for st in &mut model.stages {
            st.gx.fill(0.0);
            st.gp.fill(0.0);
            st.c.fill(0.0);
        }
        let plan = FilterPlan::new(&model, 5, &Tolerances::default()).unwrap();
        let mom = moment_propagation(&model, &plan, 5);
        for t in 0..5 {
            let st = model.stage(t);
            let expected = &st.d * mom.cov_x(t) * st.d.transpose() + &st.xi_cov;
            assert!(linalg::max_abs(&(mom.cov_y(t) - expected)) < 1e-12);
        }
    }

    #[test]
    fn zero_means_stay_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = random_model(&mut rng, 3, 2, 4);
        model.x0_mean.fill(0.0);
        for st in &mut model.stages {
            st.hp.fill(0.0);
            st.hx.fill(0.0);
            st.xi_mean.fill(0.0);
            st.w_mean.fill(0.0);
        }
        let plan = FilterPlan::new(&model, 4, &Tolerances::default()).unwrap();
        let mom = moment_propagation(&model, &plan, 4);
        assert!(mom.mean.iter().all(|m| linalg::max_abs_vec(m) == 0.0));
    }

    #[test]
    fn csv_has_one_header_and_labelled_blocks() {
        let model = scalar_model(1.0);
        let plan = FilterPlan::new(&model, 3, &Tolerances::default()).unwrap();
        let csv = moment_propagation(&model, &plan, 3).to_csv(&model.dims);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "t,mean[x1[0]],mean[y[0]],cov[x1[0];x1[0]],cov[x1[0];y[0]],cov[y[0];x1[0]],cov[y[0];y[0]]");
        assert!(lines[1].starts_with("0,"));
    }
}
