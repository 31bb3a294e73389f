//! Vector form of the equilibrium equations.
//!
//! With every player applying its optimal response, the environment
//! variables and the stacked state obey
//!
//! ```text
//! y_t     = 𝒟_t X_t + Σ_l 𝒢^p_{t,l} ŷ_{t+l} + ℋ^p_t + ξ_t
//! X_{t+1} = 𝒜_t X_t + Σ_l 𝒢^X_{t,l} ŷ_{t+l} + ℋ^X_t + 𝒞_t y_t + W_t
//! ```
//!
//! where `ŷ_{t+l}` are the conditional means the players feed into their
//! strategies. Coefficients are stored by lag `l = n − t`.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::{stack_dimensions, DimensionTable, GameSpec, Horizon, NoiseFamily};
use crate::synthesis::{FiniteGainSchedule, StationaryGains};

/// Synthesized gains for every player.
#[derive(Debug, Clone, PartialEq)]
pub enum Gains {
    Finite(Vec<FiniteGainSchedule>),
    Stationary(Vec<StationaryGains>),
}

impl Gains {
    pub fn n_players(&self) -> usize {
        match self {
            Gains::Finite(g) => g.len(),
            Gains::Stationary(g) => g.len(),
        }
    }

    /// `(F, [G_{t,t+l}]_l, H)` of player `i` at stage `t`.
    pub fn stage(&self, i: usize, t: usize) -> (&Mat, &[Mat], &Vector) {
        match self {
            Gains::Finite(g) => (&g[i].f[t], &g[i].g[t], &g[i].h[t]),
            Gains::Stationary(g) => (&g[i].f, &g[i].g, &g[i].h),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggStage {
    pub d: Mat,
    pub gp: Vec<Mat>,
    pub hp: Vector,
    pub a: Mat,
    pub gx: Vec<Mat>,
    pub hx: Vector,
    pub c: Mat,
    pub xi_mean: Vector,
    pub xi_cov: Mat,
    pub w_mean: Vector,
    pub w_cov: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedDynamics {
    pub horizon: Horizon,
    pub dims: DimensionTable,
    /// One entry per stage (finite) or a single stationary entry.
    pub stages: Vec<AggStage>,
    pub x0_mean: Vector,
    pub x0_cov: Mat,
    pub family: NoiseFamily,
}

impl AggregatedDynamics {
    pub fn stage(&self, t: usize) -> &AggStage {
        if self.stages.len() == 1 {
            &self.stages[0]
        } else {
            &self.stages[t]
        }
    }

    pub fn n_state(&self) -> usize {
        self.dims.n_state
    }

    pub fn n_y(&self) -> usize {
        self.dims.n_y
    }
}

pub fn aggregate(spec: &GameSpec, gains: &Gains) -> Result<AggregatedDynamics> {
    if gains.n_players() != spec.players.len() {
        return Err(Error::Usage(format!(
            "gains for {} players, spec has {}",
            gains.n_players(),
            spec.players.len()
        )));
    }
    match (spec.horizon, gains) {
        (Horizon::Finite(_), Gains::Finite(_)) | (Horizon::Infinite, Gains::Stationary(_)) => {}
        _ => return Err(Error::Usage("gain type does not match the horizon".into())),
    }
    let dims = stack_dimensions(spec);
    let (nn, ny, n0) = (dims.n_state, dims.n_y, dims.env.len());
    let stage_count = spec.horizon.finite().unwrap_or(1);
    let lags = |t: usize| match gains {
        Gains::Finite(_) => stage_count - t,
        Gains::Stationary(g) => g.iter().map(|s| s.g.len()).max().unwrap_or(1),
    };

    let stages = (0..stage_count)
        .map(|t| {
            let env = spec.environment.stage(t);
            let noise = spec.noise.stage(t);
            let n_lags = lags(t);
            let mut d = Mat::zeros(ny, nn);
            let mut a = Mat::zeros(nn, nn);
            let mut c = Mat::zeros(nn, ny);
            let mut gp = vec![Mat::zeros(ny, ny); n_lags];
            let mut gx = vec![Mat::zeros(nn, ny); n_lags];
            let mut hp = Vector::zeros(ny);
            let mut hx = Vector::zeros(nn);
            linalg::set_block(&mut d, 0, 0, &env.d);
            linalg::set_block(&mut a, 0, 0, &env.a0);
            for (j, block) in dims.players.iter().enumerate() {
                let p = spec.players[j].stage(t);
                let (f, g, h) = gains.stage(j, t);
                let (e1, e2, b1, b2) = (&env.e1[j], &env.e2[j], &env.b1[j], &env.b2[j]);
                let r = block.x.start;
                linalg::set_block(&mut d, 0, r, &(e1 * f + e2));
                linalg::set_block(&mut a, 0, r, &(b1 * f + b2));
                linalg::set_block(&mut a, r, r, &(&p.a + &p.b * f));
                linalg::set_block(&mut c, r, 0, &p.c);
                for (l, gl) in g.iter().enumerate() {
                    gp[l] += e1 * gl;
                    linalg::add_block(&mut gx[l], 0, 0, &(b1 * gl));
                    linalg::add_block(&mut gx[l], r, 0, &(&p.b * gl));
                }
                hp += e1 * h;
                let mut env_rows = hx.rows_mut(0, n0);
                env_rows += b1 * h;
                let mut own_rows = hx.rows_mut(r, block.x.len());
                own_rows += &p.b * h;
            }
            AggStage {
                d,
                gp,
                hp,
                a,
                gx,
                hx,
                c,
                xi_mean: noise.xi_mean.clone(),
                xi_cov: noise.xi_cov.clone(),
                w_mean: noise.w_mean.clone(),
                w_cov: noise.w_cov.clone(),
            }
        })
        .collect();

    Ok(AggregatedDynamics {
        horizon: spec.horizon,
        dims,
        stages,
        x0_mean: spec.noise.x0_mean.clone(),
        x0_cov: spec.noise.x0_cov.clone(),
        family: spec.noise.family,
    })
}
