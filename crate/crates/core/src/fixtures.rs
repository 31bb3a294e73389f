//! Ready-made games: small hand-built specs, a builder for layout tests, a
//! random generator for property tests, and the reference scenarios the
//! verification suite runs on.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::fixed_point::solve_meanfield;
use crate::linalg::{self, Mat, Vector};
use crate::model::{
    EnvStage, EnvironmentSpec, GameSpec, Horizon, MeanFieldSpec, NoiseFamily, NoiseSpec, NoiseStage, PlayerSpec,
    PlayerStage, Staged,
};
use crate::synthesis::are_solve;
use crate::tolerances::Tolerances;

fn scalar(v: f64) -> Mat {
    Mat::from_element(1, 1, v)
}

/// One scalar player with no environment coupling and a scalar environment
/// state `x⁰' = a0 x⁰ + w⁰`, `y = x⁰ + ξ`.
pub fn scalar_game(a: f64, b: f64, q: f64, r: f64, beta: f64, a0: f64, horizon: Horizon) -> GameSpec {
    let player = PlayerSpec::time_invariant(
        PlayerStage {
            a: scalar(a),
            b: scalar(b),
            c: scalar(0.0),
            q: scalar(q),
            r: scalar(r),
            k: scalar(0.0),
            l: scalar(0.0),
        },
        Some(scalar(1.0)),
        beta,
    );
    GameSpec {
        players: vec![player],
        environment: EnvironmentSpec {
            stages: Staged::constant(EnvStage {
                a0: scalar(a0),
                b1: vec![scalar(0.0)],
                b2: vec![scalar(0.0)],
                d: scalar(1.0),
                e1: vec![scalar(0.0)],
                e2: vec![scalar(0.0)],
            }),
        },
        noise: NoiseSpec {
            x0_mean: Vector::zeros(2),
            x0_cov: Mat::identity(2, 2),
            stages: Staged::constant(NoiseStage {
                w_mean: Vector::zeros(2),
                w_cov: Mat::identity(2, 2) * 0.1,
                xi_mean: Vector::zeros(1),
                xi_cov: scalar(1.0),
            }),
            family: NoiseFamily::Gaussian,
        },
        horizon,
    }
}

/// Builds uncoupled games of arbitrary block layout.
#[derive(Debug, Clone)]
pub struct GameBuilder {
    n_env: usize,
    n_y: usize,
    players: Vec<(usize, usize)>,
    horizon: Horizon,
}

impl GameBuilder {
    pub fn new(n_env: usize, n_y: usize) -> Self {
        Self { n_env, n_y, players: Vec::new(), horizon: Horizon::Infinite }
    }

    pub fn player(mut self, n_x: usize, n_u: usize) -> Self {
        self.players.push((n_x, n_u));
        self
    }

    pub fn finite(mut self, t: usize) -> Self {
        self.horizon = Horizon::Finite(t);
        self
    }

    pub fn infinite(mut self) -> Self {
        self.horizon = Horizon::Infinite;
        self
    }

    pub fn build(self) -> GameSpec {
        let ny = self.n_y;
        let players: Vec<PlayerSpec> = self
            .players
            .iter()
            .map(|&(nx, nu)| {
                let mut b = Mat::zeros(nx, nu);
                for i in 0..nx {
                    b[(i, i % nu)] = 1.0;
                }
                PlayerSpec::time_invariant(
                    PlayerStage {
                        a: Mat::identity(nx, nx) * 0.5,
                        b,
                        c: Mat::zeros(nx, ny),
                        q: Mat::identity(nx, nx),
                        r: Mat::identity(nu, nu),
                        k: Mat::zeros(ny, nu),
                        l: Mat::zeros(ny, nx),
                    },
                    Some(Mat::identity(nx, nx)),
                    0.9,
                )
            })
            .collect();
        let n0 = self.n_env;
        let env = EnvStage {
            a0: Mat::identity(n0, n0) * 0.5,
            b1: players.iter().map(|p| Mat::zeros(n0, p.n_u())).collect(),
            b2: players.iter().map(|p| Mat::zeros(n0, p.n_x())).collect(),
            d: Mat::from_fn(ny, n0, |i, j| if i == j { 1.0 } else { 0.0 }),
            e1: players.iter().map(|p| Mat::zeros(ny, p.n_u())).collect(),
            e2: players.iter().map(|p| Mat::zeros(ny, p.n_x())).collect(),
        };
        let n = n0 + players.iter().map(|p| p.n_x()).sum::<usize>();
        GameSpec {
            players,
            environment: EnvironmentSpec { stages: Staged::constant(env) },
            noise: NoiseSpec {
                x0_mean: Vector::zeros(n),
                x0_cov: Mat::identity(n, n),
                stages: Staged::constant(NoiseStage {
                    w_mean: Vector::zeros(n),
                    w_cov: Mat::identity(n, n) * 0.1,
                    xi_mean: Vector::zeros(ny),
                    xi_cov: Mat::identity(ny, ny),
                }),
                family: NoiseFamily::Gaussian,
            },
            horizon: self.horizon,
        }
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn random_spd<R: Rng + ?Sized>(rng: &mut R, n: usize, floor: f64) -> Mat {
    let g = normal(rng, n, n, 1.0);
    let mut m = &g * g.transpose() / n as f64 + Mat::identity(n, n) * floor;
    linalg::symmetrize(&mut m);
    m
}

fn with_radius(mut m: Mat, radius: f64) -> Mat {
    let rho = linalg::spectral_radius(&m);
    if rho > radius {
        m *= radius / rho;
    }
    m
}

/// Random valid game: 1–3 players, player states of dimension ≤ 4, a stable
/// environment and coupling matrices of size `coupling`. Finite-horizon specs
/// are time varying.
pub fn random_game<R: Rng + ?Sized>(rng: &mut R, horizon: Horizon, coupling: f64) -> GameSpec {
    let n = rng.random_range(1..=3);
    let ny = rng.random_range(1..=2);
    let n0 = rng.random_range(0..=2);
    let stages = horizon.finite().unwrap_or(1);
    let dims: Vec<(usize, usize)> = (0..n)
        .map(|_| {
            let nx = rng.random_range(1..=4);
            (nx, rng.random_range(1..=nx))
        })
        .collect();
    let beta = match horizon {
        Horizon::Finite(_) => rng.random_range(0.5..=1.0),
        Horizon::Infinite => rng.random_range(0.5..0.95),
    };
    let players = dims
        .iter()
        .map(|&(nx, nu)| {
            let stage_list = (0..stages)
                .map(|_| PlayerStage {
                    a: with_radius(normal(rng, nx, nx, 1.0 / (nx as f64).sqrt()), 1.2),
                    b: normal(rng, nx, nu, 1.0),
                    c: normal(rng, nx, ny, coupling),
                    q: random_spd(rng, nx, 0.5),
                    r: random_spd(rng, nu, 0.5),
                    k: normal(rng, ny, nu, coupling),
                    l: normal(rng, ny, nx, coupling),
                })
                .collect();
            PlayerSpec { stages: Staged(stage_list), q_terminal: Some(random_spd(rng, nx, 0.5)), beta }
        })
        .collect();
    let env_stages = (0..stages)
        .map(|_| EnvStage {
            a0: with_radius(normal(rng, n0, n0, 0.5), 0.8),
            b1: dims.iter().map(|&(_, nu)| normal(rng, n0, nu, coupling)).collect(),
            b2: dims.iter().map(|&(nx, _)| normal(rng, n0, nx, coupling)).collect(),
            d: normal(rng, ny, n0, 1.0),
            e1: dims.iter().map(|&(_, nu)| normal(rng, ny, nu, coupling)).collect(),
            e2: dims.iter().map(|&(nx, _)| normal(rng, ny, nx, coupling)).collect(),
        })
        .collect();
    let nstate = n0 + dims.iter().map(|d| d.0).sum::<usize>();
    let noise_stages = (0..stages)
        .map(|_| NoiseStage {
            w_mean: normal(rng, nstate, 1, 0.3).column(0).into_owned(),
            w_cov: random_spd(rng, nstate, 0.05) * 0.2,
            xi_mean: normal(rng, ny, 1, 0.3).column(0).into_owned(),
            xi_cov: random_spd(rng, ny, 0.2),
        })
        .collect();
    GameSpec {
        players,
        environment: EnvironmentSpec { stages: Staged(env_stages) },
        noise: NoiseSpec {
            x0_mean: normal(rng, nstate, 1, 0.5).column(0).into_owned(),
            x0_cov: random_spd(rng, nstate, 0.1),
            stages: Staged(noise_stages),
            family: NoiseFamily::Gaussian,
        },
        horizon,
    }
}

/// Two scalar players that neither affect nor react to the environment.
pub fn decoupled_pair() -> GameSpec {
    let mut spec = GameBuilder::new(1, 1).player(1, 1).player(1, 1).infinite().build();
    for p in &mut spec.players {
        p.stages.0[0].a = scalar(1.0);
        p.q_terminal = None;
    }
    spec.environment.stages.0[0].a0 = scalar(0.8);
    spec.noise.x0_mean = Vector::from_vec(vec![0.5, 1.0, -1.0]);
    spec.noise.stages.0[0].w_mean = Vector::from_vec(vec![0.1, 0.0, 0.05]);
    spec.noise.stages.0[0].xi_mean = Vector::from_vec(vec![0.2]);
    spec
}

/// Two players, a scalar environment state and a scalar environment variable;
/// every coupling channel is active but small.
pub fn weakly_coupled_pair(horizon: Horizon) -> GameSpec {
    let p1 = PlayerStage {
        a: Mat::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.9]),
        b: Mat::from_row_slice(2, 1, &[0.0, 1.0]),
        c: Mat::from_row_slice(2, 1, &[0.1, 0.05]),
        q: Mat::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 0.5]),
        r: scalar(0.5),
        k: scalar(0.1),
        l: Mat::from_row_slice(1, 2, &[0.2, -0.1]),
    };
    let p2 = PlayerStage {
        a: scalar(0.95),
        b: scalar(0.8),
        c: scalar(-0.1),
        q: scalar(2.0),
        r: scalar(1.0),
        k: scalar(-0.05),
        l: scalar(0.15),
    };
    let beta = if horizon.is_infinite() { 0.9 } else { 0.95 };
    let q_terminal = |q: &Mat| horizon.finite().map(|_| q.clone());
    let players = vec![
        PlayerSpec::time_invariant(p1.clone(), q_terminal(&p1.q), beta),
        PlayerSpec::time_invariant(p2.clone(), q_terminal(&p2.q), beta),
    ];
    let env = EnvStage {
        a0: scalar(0.7),
        b1: vec![scalar(0.1), scalar(0.05)],
        b2: vec![Mat::from_row_slice(1, 2, &[0.05, 0.0]), scalar(0.1)],
        d: scalar(1.0),
        e1: vec![scalar(0.1), scalar(-0.1)],
        e2: vec![Mat::from_row_slice(1, 2, &[0.1, 0.05]), scalar(0.15)],
    };
    let x0_cov = Mat::from_row_slice(
        4,
        4,
        &[1.0, 0.1, 0.0, 0.0, 0.1, 1.0, 0.2, 0.0, 0.0, 0.2, 0.8, 0.0, 0.0, 0.0, 0.0, 1.2],
    );
    GameSpec {
        players,
        environment: EnvironmentSpec { stages: Staged::constant(env) },
        noise: NoiseSpec {
            x0_mean: Vector::from_vec(vec![0.5, 1.0, -0.5, 0.8]),
            x0_cov,
            stages: Staged::constant(NoiseStage {
                w_mean: Vector::from_vec(vec![0.1, 0.0, 0.05, -0.1]),
                w_cov: Mat::from_diagonal(&Vector::from_vec(vec![0.2, 0.1, 0.1, 0.15])),
                xi_mean: Vector::from_vec(vec![0.1]),
                xi_cov: scalar(0.5),
            }),
            family: NoiseFamily::Gaussian,
        },
        horizon,
    }
}

/// Scalar identical players whose environment variable averages states and
/// decisions. The initial mean sits at the stationary mean `x̂_0`.
pub fn meanfield_scalar() -> MeanFieldSpec {
    let mut spec = MeanFieldSpec {
        player: PlayerSpec::time_invariant(
            PlayerStage {
                a: scalar(0.9),
                b: scalar(1.0),
                c: scalar(0.0),
                q: scalar(1.0),
                r: scalar(1.0),
                k: scalar(0.2),
                l: scalar(0.3),
            },
            None,
            0.9,
        ),
        e1: scalar(0.3),
        e2: scalar(0.5),
        x0_mean: Vector::from_vec(vec![0.5]),
        x0_cov: scalar(1.0),
        w_mean: Vector::from_vec(vec![0.1]),
        w_cov: scalar(0.2),
        xi_mean: Vector::from_vec(vec![0.05]),
        xi_cov: scalar(0.3),
        family: NoiseFamily::Gaussian,
    };
    let tol = Tolerances::default();
    let gains = are_solve(&spec.player, &spec.w_mean, &tol).expect("fixture gains");
    spec.x0_mean = solve_meanfield(&spec, &gains, &tol).expect("fixture fixed point").x0;
    spec
}
