//! End-to-end construction: validation, optimal responses, vector form,
//! fixed point, closed-loop model and strategies.

use crate::aggregate::{aggregate, AggregatedDynamics, Gains};
use crate::error::{Error, Result};
use crate::estimator::{closed_loop, steady_state_covariance, ClosedLoopModel, FilterPlan, SteadyCovariance};
use crate::fixed_point::{
    meanfield_residual, solve_finite, solve_infinite, solve_meanfield, EnvFixedPoint, MeanFieldFixedPoint,
};
use crate::linalg::{self, Vector};
use crate::model::{stack_dimensions, validate, GameSpec, Horizon, MeanFieldSpec};
use crate::strategy::{build_profile, AffineStrategy, StrategyProfile};
use crate::synthesis::{are_solve, riccati_backward, StationaryGains};
use crate::tolerances::Tolerances;

#[derive(Debug, Clone)]
pub struct Solution {
    pub spec: GameSpec,
    pub gains: Gains,
    pub aggregated: AggregatedDynamics,
    pub fixed_point: EnvFixedPoint,
    pub model: ClosedLoopModel,
    pub profile: StrategyProfile,
    /// Steady-state filter covariance (infinite horizon only).
    pub steady: Option<SteadyCovariance>,
}

impl Solution {
    /// Filter updates over `len` stages starting from `cov[X_0]`.
    pub fn filter_plan(&self, len: usize, tol: &Tolerances) -> Result<FilterPlan> {
        FilterPlan::new(&self.model, len, tol)
    }
}

/// Player `i`'s disturbance means, one per stage.
pub fn player_w_means(spec: &GameSpec, i: usize) -> Vec<Vector> {
    let block = stack_dimensions(spec).players[i].x.clone();
    spec.noise.stages.iter().map(|s| s.w_mean.rows_range(block.clone()).into_owned()).collect()
}

pub fn synthesize(spec: &GameSpec, tol: &Tolerances) -> Result<Gains> {
    match spec.horizon {
        Horizon::Finite(t) => spec
            .players
            .iter()
            .enumerate()
            .map(|(i, p)| riccati_backward(p, t, &player_w_means(spec, i), tol).map_err(|e| e.for_player(i)))
            .collect::<Result<Vec<_>>>()
            .map(Gains::Finite),
        Horizon::Infinite => spec
            .players
            .iter()
            .enumerate()
            .map(|(i, p)| are_solve(p, &player_w_means(spec, i)[0], tol).map_err(|e| e.for_player(i)))
            .collect::<Result<Vec<_>>>()
            .map(Gains::Stationary),
    }
}

pub fn solve(spec: &GameSpec, tol: &Tolerances) -> Result<Solution> {
    let report = validate(spec, tol);
    if !report.is_valid() {
        return Err(Error::Invalid(report));
    }
    let gains = synthesize(spec, tol)?;
    let aggregated = aggregate(spec, &gains)?;
    let fixed_point = match spec.horizon {
        Horizon::Finite(_) => EnvFixedPoint::Finite(solve_finite(&aggregated, tol)?),
        Horizon::Infinite => EnvFixedPoint::Stationary(solve_infinite(&aggregated, tol)?),
    };
    let model = closed_loop(&aggregated, &fixed_point)?;
    let steady = match spec.horizon {
        Horizon::Finite(t) => {
            FilterPlan::new(&model, t, tol)?;
            None
        }
        Horizon::Infinite => Some(steady_state_covariance(&model, tol)?),
    };
    let profile = build_profile(&gains, &fixed_point)?;
    Ok(Solution { spec: spec.clone(), gains, aggregated, fixed_point, model, profile, steady })
}

#[derive(Debug, Clone)]
pub struct MeanFieldSolution {
    pub spec: MeanFieldSpec,
    pub gains: StationaryGains,
    pub fixed_point: MeanFieldFixedPoint,
    /// Residual of the mean-field equations at the solution.
    pub residual: f64,
    /// `‖E[x_0] − x̂_0‖_∞`; the construction presumes it vanishes.
    pub initial_mean_gap: f64,
    pub strategy: AffineStrategy,
}

pub fn solve_meanfield_spec(spec: &MeanFieldSpec, tol: &Tolerances) -> Result<MeanFieldSolution> {
    let report = spec.validate(tol);
    if !report.is_valid() {
        return Err(Error::Invalid(report));
    }
    let gains = are_solve(&spec.player, &spec.w_mean, tol).map_err(|e| e.for_player(0))?;
    let fixed_point = solve_meanfield(spec, &gains, tol)?;
    let residual = meanfield_residual(spec, &gains, &fixed_point.y0, &fixed_point.x0);
    let initial_mean_gap = linalg::max_abs_vec(&(&spec.x0_mean - &fixed_point.x0));
    let strategy = AffineStrategy {
        f: vec![gains.f.clone()],
        g: vec![gains.g_sum()],
        h: vec![gains.h.clone()],
    };
    Ok(MeanFieldSolution { spec: spec.clone(), gains, fixed_point, residual, initial_mean_gap, strategy })
}

impl MeanFieldSolution {
    /// Constant offset `G ŷ_0 + H` of the mean-field decision rule.
    pub fn offset(&self) -> Vector {
        &self.strategy.g[0] * &self.fixed_point.y0 + &self.strategy.h[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Assumption;
    use crate::fixtures;
    use crate::linalg::Mat;

    #[test]
    fn decoupled_has_zero_environment_gains() {
        let sol = solve(&fixtures::decoupled_pair(), &Tolerances::default()).unwrap();
        for p in &sol.profile.players {
            assert!(p.g.iter().all(|g| linalg::max_abs(g) == 0.0));
        }
    }

    #[test]
    fn weakly_coupled_both_horizons_solve() {
        for h in [Horizon::Finite(8), Horizon::Infinite] {
            let sol = solve(&fixtures::weakly_coupled_pair(h), &Tolerances::default()).unwrap();
            assert_eq!(sol.profile.players.len(), 2);
            assert_eq!(sol.steady.is_some(), h.is_infinite());
        }
    }

    #[test]
    fn identical_players_get_identical_strategies() {
        let mf = fixtures::meanfield_scalar();
        let spec = mf.finite_population(3);
        let sol = solve(&spec, &Tolerances::default()).unwrap();
        let first = &sol.profile.players[0];
        for p in &sol.profile.players[1..] {
            assert_eq!(p, first);
        }
    }

    #[test]
    fn unstable_environment_cites_assumption() {
        let mut spec = fixtures::decoupled_pair();
        spec.environment.stages.0[0].a0 = Mat::from_element(1, 1, 1.2);
        let err = solve(&spec, &Tolerances::default()).unwrap_err();
        assert_eq!(err.assumption(), Some(Assumption::StableEnvironment));
    }

    #[test]
    fn synthesis_failures_name_the_player() {
        let mut spec = fixtures::decoupled_pair();
        // Player 2 cannot be stabilized: unit-free drift with no control authority.
        spec.players[1].stages.0[0].a = Mat::from_element(1, 1, 2.0);
        spec.players[1].stages.0[0].b = Mat::from_element(1, 1, 0.0);
        spec.players[1].beta = 0.9;
        match synthesize(&spec, &Tolerances::default()) {
            Err(Error::RiccatiNoConvergence { player, .. }) | Err(Error::UnstableFeedback { player, .. }) => {
                assert_eq!(player, 1)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn meanfield_solution_and_gap() {
        let mf = fixtures::meanfield_scalar();
        let sol = solve_meanfield_spec(&mf, &Tolerances::default()).unwrap();
        assert!(sol.residual < 1e-12);
        assert!(sol.initial_mean_gap < 1e-12, "fixture should start at x̂_0");
    }
}
