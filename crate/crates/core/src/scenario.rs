//! Scenario documents: JSON on disk, [`GameSpec`] or [`MeanFieldSpec`] in
//! memory.
//!
//! Matrices are written as `{"shape": [rows, cols], "data": [row-major]}`,
//! vectors as plain arrays. Any per-stage field may be a single value or a
//! list with one entry per stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::example::ExampleSpec;
use crate::linalg::{Mat, Vector};
use crate::model::{
    EnvStage, EnvironmentSpec, GameSpec, Horizon, MeanFieldSpec, NoiseFamily, NoiseSpec, NoiseStage, PlayerSpec,
    PlayerStage, Staged,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixDoc {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl MatrixDoc {
    pub fn from_mat(m: &Mat) -> Self {
        let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
        Self { shape: [m.nrows(), m.ncols()], data }
    }

    pub fn to_mat(&self, field: &str) -> Result<Mat> {
        let [rows, cols] = self.shape;
        if rows * cols != self.data.len() {
            return Err(Error::Scenario(format!(
                "{field}: shape {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                self.data.len()
            )));
        }
        Ok(Mat::from_row_slice(rows, cols, &self.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }

    fn from_vec(mut v: Vec<T>) -> Self {
        if v.len() == 1 {
            OneOrMany::One(v.remove(0))
        } else {
            OneOrMany::Many(v)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HorizonDoc {
    Finite(usize),
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlayerDoc {
    #[serde(rename = "A")]
    pub a: OneOrMany<MatrixDoc>,
    #[serde(rename = "B")]
    pub b: OneOrMany<MatrixDoc>,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    pub c: Option<OneOrMany<MatrixDoc>>,
    #[serde(rename = "Q_stage")]
    pub q_stage: OneOrMany<MatrixDoc>,
    #[serde(rename = "R")]
    pub r: OneOrMany<MatrixDoc>,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<OneOrMany<MatrixDoc>>,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub l: Option<OneOrMany<MatrixDoc>>,
    #[serde(rename = "Q_terminal", default, skip_serializing_if = "Option::is_none")]
    pub q_terminal: Option<MatrixDoc>,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvStageDoc {
    #[serde(rename = "A0")]
    pub a0: MatrixDoc,
    #[serde(rename = "B1")]
    pub b1: Vec<MatrixDoc>,
    #[serde(rename = "B2")]
    pub b2: Vec<MatrixDoc>,
    #[serde(rename = "D")]
    pub d: MatrixDoc,
    #[serde(rename = "E1")]
    pub e1: Vec<MatrixDoc>,
    #[serde(rename = "E2")]
    pub e2: Vec<MatrixDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvironmentDoc {
    Stages {
        stages: Vec<EnvStageDoc>,
    },
    Constant(EnvStageDoc),
}

fn default_family() -> NoiseFamily {
    NoiseFamily::Gaussian
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseDoc {
    #[serde(default = "default_family")]
    pub family: NoiseFamily,
    pub x0_mean: Vec<f64>,
    pub x0_cov: MatrixDoc,
    pub w_mean: OneOrMany<Vec<f64>>,
    pub w_cov: OneOrMany<MatrixDoc>,
    pub xi_mean: OneOrMany<Vec<f64>>,
    pub xi_cov: OneOrMany<MatrixDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanFieldDoc {
    #[serde(rename = "E1")]
    pub e1: MatrixDoc,
    #[serde(rename = "E2")]
    pub e2: MatrixDoc,
    /// Finite population used to stand in for the countable limit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    pub horizon: HorizonDoc,
    pub players: Vec<PlayerDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub environment: Option<EnvironmentDoc>,
    pub noise: NoiseDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meanfield: Option<MeanFieldDoc>,
}

pub const DEFAULT_POPULATION: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    Game(GameSpec),
    MeanField { spec: MeanFieldSpec, population: usize },
}

fn mats(doc: &OneOrMany<MatrixDoc>, field: &str) -> Result<Vec<Mat>> {
    let list = doc.to_vec();
    if list.is_empty() {
        return Err(Error::Scenario(format!("{field}: empty stage list")));
    }
    list.iter().map(|m| m.to_mat(field)).collect()
}

fn vecs(doc: &OneOrMany<Vec<f64>>) -> Vec<Vector> {
    doc.to_vec().into_iter().map(Vector::from_vec).collect()
}

/// Expands per-field stage lists to a common stage count.
fn stage_count(field: &str, lens: &[usize]) -> Result<usize> {
    let n = lens.iter().copied().max().unwrap_or(1);
    if lens.iter().any(|&l| l != 1 && l != n) {
        return Err(Error::Scenario(format!("{field}: per-stage lists have inconsistent lengths {lens:?}")));
    }
    Ok(n)
}

fn pick<T: Clone>(list: &[T], t: usize) -> T {
    if list.len() == 1 {
        list[0].clone()
    } else {
        list[t].clone()
    }
}

fn parse_horizon(doc: &HorizonDoc) -> Result<Horizon> {
    match doc {
        HorizonDoc::Finite(t) => Ok(Horizon::Finite(*t)),
        HorizonDoc::Named(s) if s == "infinite" => Ok(Horizon::Infinite),
        HorizonDoc::Named(s) => Err(Error::Scenario(format!("horizon must be an integer T or \"infinite\", got {s:?}"))),
    }
}

fn parse_player(doc: &PlayerDoc, i: usize, ny: usize) -> Result<PlayerSpec> {
    let f = |name: &str| format!("players[{i}].{name}");
    let a = mats(&doc.a, &f("A"))?;
    let b = mats(&doc.b, &f("B"))?;
    let q = mats(&doc.q_stage, &f("Q_stage"))?;
    let r = mats(&doc.r, &f("R"))?;
    let nx = a[0].nrows();
    let nu = b[0].ncols();
    let optional = |m: &Option<OneOrMany<MatrixDoc>>, name: &str, rows: usize, cols: usize| -> Result<Vec<Mat>> {
        match m {
            Some(m) => mats(m, &f(name)),
            None => Ok(vec![Mat::zeros(rows, cols)]),
        }
    };
    let c = optional(&doc.c, "C", nx, ny)?;
    let k = optional(&doc.k, "K", ny, nu)?;
    let l = optional(&doc.l, "L", ny, nx)?;
    let n = stage_count(&f("*"), &[a.len(), b.len(), c.len(), q.len(), r.len(), k.len(), l.len()])?;
    let stages = (0..n)
        .map(|t| PlayerStage {
            a: pick(&a, t),
            b: pick(&b, t),
            c: pick(&c, t),
            q: pick(&q, t),
            r: pick(&r, t),
            k: pick(&k, t),
            l: pick(&l, t),
        })
        .collect();
    let q_terminal = doc.q_terminal.as_ref().map(|m| m.to_mat(&f("Q_terminal"))).transpose()?;
    Ok(PlayerSpec { stages: Staged(stages), q_terminal, beta: doc.beta })
}

fn parse_env_stage(doc: &EnvStageDoc, prefix: &str) -> Result<EnvStage> {
    let list = |v: &[MatrixDoc], name: &str| -> Result<Vec<Mat>> {
        v.iter().enumerate().map(|(j, m)| m.to_mat(&format!("{prefix}.{name}[{j}]"))).collect()
    };
    Ok(EnvStage {
        a0: doc.a0.to_mat(&format!("{prefix}.A0"))?,
        b1: list(&doc.b1, "B1")?,
        b2: list(&doc.b2, "B2")?,
        d: doc.d.to_mat(&format!("{prefix}.D"))?,
        e1: list(&doc.e1, "E1")?,
        e2: list(&doc.e2, "E2")?,
    })
}

fn parse_noise_stages(doc: &NoiseDoc) -> Result<Staged<NoiseStage>> {
    let w_mean = vecs(&doc.w_mean);
    let w_cov = mats(&doc.w_cov, "noise.w_cov")?;
    let xi_mean = vecs(&doc.xi_mean);
    let xi_cov = mats(&doc.xi_cov, "noise.xi_cov")?;
    let n = stage_count("noise", &[w_mean.len(), w_cov.len(), xi_mean.len(), xi_cov.len()])?;
    Ok(Staged(
        (0..n)
            .map(|t| NoiseStage {
                w_mean: pick(&w_mean, t),
                w_cov: pick(&w_cov, t),
                xi_mean: pick(&xi_mean, t),
                xi_cov: pick(&xi_cov, t),
            })
            .collect(),
    ))
}

impl ScenarioDoc {
    pub fn into_scenario(self) -> Result<Scenario> {
        let horizon = parse_horizon(&self.horizon)?;
        if let Some(mf) = &self.meanfield {
            if self.environment.is_some() {
                return Err(Error::Scenario("a mean-field scenario has no `environment` section".into()));
            }
            if self.players.len() != 1 {
                return Err(Error::Scenario("a mean-field scenario lists exactly one representative player".into()));
            }
            if horizon != Horizon::Infinite {
                return Err(Error::Scenario("mean-field scenarios require horizon \"infinite\"".into()));
            }
            let e1 = mf.e1.to_mat("meanfield.E1")?;
            let e2 = mf.e2.to_mat("meanfield.E2")?;
            let player = parse_player(&self.players[0], 0, e1.nrows())?;
            let noise = parse_noise_stages(&self.noise)?;
            if noise.len() != 1 {
                return Err(Error::Scenario("mean-field noise moments must be time invariant".into()));
            }
            let stage = noise.at(0).clone();
            let population = mf.population.unwrap_or(DEFAULT_POPULATION);
            if population == 0 {
                return Err(Error::Scenario("meanfield.population must be positive".into()));
            }
            let spec = MeanFieldSpec {
                player,
                e1,
                e2,
                x0_mean: Vector::from_vec(self.noise.x0_mean.clone()),
                x0_cov: self.noise.x0_cov.to_mat("noise.x0_cov")?,
                w_mean: stage.w_mean,
                w_cov: stage.w_cov,
                xi_mean: stage.xi_mean,
                xi_cov: stage.xi_cov,
                family: self.noise.family,
            };
            return Ok(Scenario::MeanField { spec, population });
        }
        let env_doc = self
            .environment
            .as_ref()
            .ok_or_else(|| Error::Scenario("missing `environment` section".into()))?;
        let env_stages = match env_doc {
            EnvironmentDoc::Constant(s) => vec![parse_env_stage(s, "environment")?],
            EnvironmentDoc::Stages { stages } => stages
                .iter()
                .enumerate()
                .map(|(t, s)| parse_env_stage(s, &format!("environment.stages[{t}]")))
                .collect::<Result<_>>()?,
        };
        if env_stages.is_empty() {
            return Err(Error::Scenario("environment.stages is empty".into()));
        }
        let ny = env_stages[0].d.nrows();
        let players = self
            .players
            .iter()
            .enumerate()
            .map(|(i, p)| parse_player(p, i, ny))
            .collect::<Result<Vec<_>>>()?;
        let noise = NoiseSpec {
            x0_mean: Vector::from_vec(self.noise.x0_mean.clone()),
            x0_cov: self.noise.x0_cov.to_mat("noise.x0_cov")?,
            stages: parse_noise_stages(&self.noise)?,
            family: self.noise.family,
        };
        Ok(Scenario::Game(GameSpec {
            players,
            environment: EnvironmentSpec { stages: Staged(env_stages) },
            noise,
            horizon,
        }))
    }
}

pub fn parse(text: &str) -> Result<Scenario> {
    let doc: ScenarioDoc = serde_json::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
    doc.into_scenario()
}

pub fn load(path: &std::path::Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Scenario(format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

/// Data for the two-stage example: one representative player (one or two
/// stages), per-player initial moments and the two noise stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleDoc {
    pub player: PlayerDoc,
    pub x0_cov: MatrixDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0_mean: Option<Vec<f64>>,
    pub xi_cov: OneOrMany<MatrixDoc>,
    pub w_cov: OneOrMany<MatrixDoc>,
}

impl ExampleDoc {
    pub fn into_spec(self) -> Result<ExampleSpec> {
        let nx = self.player.a.to_vec().first().map_or(0, |m| m.shape[0]);
        let player = parse_player(&self.player, 0, nx)?;
        if player.stages.len() > 2 {
            return Err(Error::Scenario("example player data covers at most two stages".into()));
        }
        let q_terminal = player
            .q_terminal
            .clone()
            .ok_or_else(|| Error::Scenario("players[0].Q_terminal is required".into()))?;
        let two = |doc: &OneOrMany<MatrixDoc>, field: &str| -> Result<[Mat; 2]> {
            let list = mats(doc, field)?;
            if list.len() > 2 {
                return Err(Error::Scenario(format!("{field}: at most two stages")));
            }
            Ok([pick(&list, 0), pick(&list, 1)])
        };
        let spec = ExampleSpec {
            stages: [player.stage(0).clone(), player.stage(1).clone()],
            q_terminal,
            beta: player.beta,
            x0_cov: self.x0_cov.to_mat("x0_cov")?,
            x0_mean: self.x0_mean.map(Vector::from_vec),
            xi_cov: two(&self.xi_cov, "xi_cov")?,
            w_cov: two(&self.w_cov, "w_cov")?,
        };
        spec.check().map_err(|e| Error::Scenario(e.to_string()))?;
        Ok(spec)
    }

    pub fn from_spec(spec: &ExampleSpec) -> Self {
        let player = PlayerSpec {
            stages: Staged(spec.stages.to_vec()),
            q_terminal: Some(spec.q_terminal.clone()),
            beta: spec.beta,
        };
        let pair = |m: &[Mat; 2]| OneOrMany::Many(m.iter().map(MatrixDoc::from_mat).collect());
        ExampleDoc {
            player: player_doc(&player),
            x0_cov: MatrixDoc::from_mat(&spec.x0_cov),
            x0_mean: spec.x0_mean.as_ref().map(|v| v.iter().copied().collect()),
            xi_cov: pair(&spec.xi_cov),
            w_cov: pair(&spec.w_cov),
        }
    }
}

pub fn parse_example(text: &str) -> Result<ExampleSpec> {
    let doc: ExampleDoc = serde_json::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
    doc.into_spec()
}

fn horizon_doc(h: Horizon) -> HorizonDoc {
    match h {
        Horizon::Finite(t) => HorizonDoc::Finite(t),
        Horizon::Infinite => HorizonDoc::Named("infinite".into()),
    }
}

fn player_doc(p: &PlayerSpec) -> PlayerDoc {
    let field = |get: fn(&PlayerStage) -> &Mat| {
        OneOrMany::from_vec(p.stages.iter().map(|s| MatrixDoc::from_mat(get(s))).collect())
    };
    PlayerDoc {
        a: field(|s| &s.a),
        b: field(|s| &s.b),
        c: Some(field(|s| &s.c)),
        q_stage: field(|s| &s.q),
        r: field(|s| &s.r),
        k: Some(field(|s| &s.k)),
        l: Some(field(|s| &s.l)),
        q_terminal: p.q_terminal.as_ref().map(MatrixDoc::from_mat),
        beta: p.beta,
    }
}

fn env_stage_doc(s: &EnvStage) -> EnvStageDoc {
    let list = |v: &[Mat]| v.iter().map(MatrixDoc::from_mat).collect();
    EnvStageDoc {
        a0: MatrixDoc::from_mat(&s.a0),
        b1: list(&s.b1),
        b2: list(&s.b2),
        d: MatrixDoc::from_mat(&s.d),
        e1: list(&s.e1),
        e2: list(&s.e2),
    }
}

fn noise_doc(x0_mean: &Vector, x0_cov: &Mat, stages: &[NoiseStage], family: NoiseFamily) -> NoiseDoc {
    let v = |x: &Vector| x.iter().copied().collect::<Vec<f64>>();
    NoiseDoc {
        family,
        x0_mean: v(x0_mean),
        x0_cov: MatrixDoc::from_mat(x0_cov),
        w_mean: OneOrMany::from_vec(stages.iter().map(|s| v(&s.w_mean)).collect()),
        w_cov: OneOrMany::from_vec(stages.iter().map(|s| MatrixDoc::from_mat(&s.w_cov)).collect()),
        xi_mean: OneOrMany::from_vec(stages.iter().map(|s| v(&s.xi_mean)).collect()),
        xi_cov: OneOrMany::from_vec(stages.iter().map(|s| MatrixDoc::from_mat(&s.xi_cov)).collect()),
    }
}

impl Scenario {
    pub fn to_doc(&self) -> ScenarioDoc {
        match self {
            Scenario::Game(spec) => {
                let env = &spec.environment.stages;
                ScenarioDoc {
                    horizon: horizon_doc(spec.horizon),
                    players: spec.players.iter().map(player_doc).collect(),
                    environment: Some(if env.is_time_invariant() {
                        EnvironmentDoc::Constant(env_stage_doc(env.at(0)))
                    } else {
                        EnvironmentDoc::Stages { stages: env.iter().map(env_stage_doc).collect() }
                    }),
                    noise: noise_doc(&spec.noise.x0_mean, &spec.noise.x0_cov, &spec.noise.stages.0, spec.noise.family),
                    meanfield: None,
                }
            }
            Scenario::MeanField { spec, population } => {
                let stage = NoiseStage {
                    w_mean: spec.w_mean.clone(),
                    w_cov: spec.w_cov.clone(),
                    xi_mean: spec.xi_mean.clone(),
                    xi_cov: spec.xi_cov.clone(),
                };
                ScenarioDoc {
                    horizon: horizon_doc(Horizon::Infinite),
                    players: vec![player_doc(&spec.player)],
                    environment: None,
                    noise: noise_doc(&spec.x0_mean, &spec.x0_cov, &[stage], spec.family),
                    meanfield: Some(MeanFieldDoc {
                        e1: MatrixDoc::from_mat(&spec.e1),
                        e2: MatrixDoc::from_mat(&spec.e2),
                        population: Some(*population),
                    }),
                }
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("scenario documents always serialize")
    }
}
