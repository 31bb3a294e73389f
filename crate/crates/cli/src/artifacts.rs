//! JSON and CSV artifacts and the per-directory manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use sebeu::aggregate::Gains;
use sebeu::estimator::ClosedLoopModel;
use sebeu::fixed_point::EnvFixedPoint;
use sebeu::linalg::{Mat, Vector};
use sebeu::pipeline::{MeanFieldSolution, Solution};
use sebeu::scenario::MatrixDoc;
use sebeu::simulate::MeanFieldRun;
use sebeu::strategy::AffineStrategy;
use sebeu::Tolerances;

pub const MANIFEST: &str = "manifest.json";

pub fn mat(m: &Mat) -> Value {
    serde_json::to_value(MatrixDoc::from_mat(m)).expect("matrix documents serialize")
}

pub fn vector(v: &Vector) -> Value {
    json!(v.iter().copied().collect::<Vec<f64>>())
}

fn mats(list: &[Mat]) -> Value {
    Value::Array(list.iter().map(mat).collect())
}

fn vectors(list: &[Vector]) -> Value {
    Value::Array(list.iter().map(vector).collect())
}

fn strategy(s: &AffineStrategy) -> Value {
    json!({ "F": mats(&s.f), "G": mats(&s.g), "H": vectors(&s.h) })
}

pub fn gains_json(sol: &Solution) -> Value {
    let players: Vec<Value> = match &sol.gains {
        Gains::Finite(schedules) => schedules
            .iter()
            .zip(&sol.profile.players)
            .map(|(s, p)| {
                json!({
                    "F": mats(&s.f),
                    "G_env": s.g.iter().map(|row| mats(row)).collect::<Vec<_>>(),
                    "H": vectors(&s.h),
                    "M": mats(&s.m),
                    "strategy": strategy(p),
                })
            })
            .collect(),
        Gains::Stationary(gains) => gains
            .iter()
            .zip(&sol.profile.players)
            .map(|(g, p)| {
                json!({
                    "F": mat(&g.f),
                    "G_env": mats(&g.g),
                    "H": vector(&g.h),
                    "M": mat(&g.m),
                    "are_residual": g.are_residual,
                    "closed_loop_radius": g.closed_loop_radius,
                    "iterations": g.iterations,
                    "strategy": strategy(p),
                })
            })
            .collect(),
    };
    json!({ "horizon": horizon_json(&sol.spec.horizon), "players": players })
}

fn horizon_json(h: &sebeu::Horizon) -> Value {
    match h {
        sebeu::Horizon::Finite(t) => json!(t),
        sebeu::Horizon::Infinite => json!("infinite"),
    }
}

pub fn fixed_point_json(fp: &EnvFixedPoint) -> Value {
    match fp {
        EnvFixedPoint::Finite(fp) => json!({
            "kind": "finite",
            "horizon": fp.horizon,
            "a": fp.a.iter().map(|row| mats(row)).collect::<Vec<_>>(),
            "b": fp.b.iter().map(|row| vectors(row)).collect::<Vec<_>>(),
            "certificates": fp.certificates,
        }),
        EnvFixedPoint::Stationary(fp) => json!({
            "kind": "stationary",
            "a": mats(&fp.a),
            "b": vectors(&fp.b),
            "y_inf": vector(&fp.y_inf),
            "x_inf": vector(&fp.x_inf),
            "truncation": fp.t_trunc,
            "last_change": fp.last_delta,
            "sigma_min": fp.sigma_min,
            "cond": fp.cond,
        }),
    }
}

pub fn estimator_json(model: &ClosedLoopModel, sol: &Solution, sigmas: &[Mat], gains: &[Mat]) -> Value {
    let stages: Vec<Value> = model
        .stages
        .iter()
        .map(|s| {
            json!({
                "A": mat(&s.a), "G_x": mat(&s.gx), "C": mat(&s.c), "D": mat(&s.d), "G_p": mat(&s.gp),
                "h_p": vector(&s.hp), "h_x": vector(&s.hx),
            })
        })
        .collect();
    let steady = sol.steady.as_ref().map(|s| {
        json!({ "sigma": mat(&s.sigma), "residual": s.residual, "iterations": s.iterations })
    });
    json!({
        "state_dimension": model.n_state(),
        "observation_dimension": model.n_y(),
        "stages": stages,
        "filter": { "sigma": mats(sigmas), "gain": mats(gains) },
        "steady_state": steady,
    })
}

pub fn meanfield_json(sol: &MeanFieldSolution) -> (Value, Value) {
    let g = &sol.gains;
    let gains = json!({
        "F": mat(&g.f),
        "G_env": mats(&g.g),
        "H": vector(&g.h),
        "M": mat(&g.m),
        "are_residual": g.are_residual,
        "closed_loop_radius": g.closed_loop_radius,
        "strategy": { "F": mat(&sol.strategy.f[0]), "G": mat(&sol.strategy.g[0]), "offset": vector(&sol.offset()) },
    });
    let fp = &sol.fixed_point;
    let fixed = json!({
        "kind": "meanfield",
        "y0": vector(&fp.y0),
        "x0": vector(&fp.x0),
        "sigma_min": fp.sigma_min,
        "cond": fp.cond,
        "residual": sol.residual,
        "initial_mean_gap": sol.initial_mean_gap,
    });
    (gains, fixed)
}

pub fn meanfield_summary_csv(run: &MeanFieldRun, nx: usize) -> String {
    let mut out = String::from("t,var,mean,stderr\n");
    let labels: Vec<String> = (0..nx)
        .map(|j| format!("avg_x[{j}]"))
        .chain((0..run.moments.mean[0].len() - nx).map(|j| format!("y[{j}]")))
        .collect();
    for t in 0..run.horizon {
        for (i, l) in labels.iter().enumerate() {
            writeln!(out, "{t},{l},{:e},{:e}", run.moments.mean[t][i], run.moments.stderr(t, i)).unwrap();
        }
    }
    for (j, c) in run.costs.iter().enumerate() {
        writeln!(out, "total,J[{}],{:e},{:e}", j + 1, c.mean, c.stderr).unwrap();
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Files written by one command, with their digests.
pub struct ArtifactSet {
    dir: PathBuf,
    pub files: BTreeMap<String, String>,
}

impl ArtifactSet {
    pub fn new(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(ArtifactSet { dir: dir.to_path_buf(), files: BTreeMap::new() })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &Value) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(value).expect("artifact values serialize");
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

/// Everything needed to repeat one command.
pub struct RunRecord<'a> {
    pub command: &'a str,
    pub scenario: Option<(&'a Path, &'a [u8])>,
    pub settings: Value,
    pub tolerances: &'a Tolerances,
    pub overrides: &'a BTreeMap<String, f64>,
}

pub fn read_manifest(dir: &Path) -> Option<Value> {
    let text = fs::read_to_string(dir.join(MANIFEST)).ok()?;
    serde_json::from_str(&text).ok()
}

/// Records `run` under `runs.<command>` in the directory manifest, keeping
/// entries for other commands.
pub fn update_manifest(dir: &Path, run: &RunRecord<'_>, artifacts: &ArtifactSet) -> std::io::Result<()> {
    let mut manifest = read_manifest(dir).unwrap_or_else(|| json!({}));
    let scenario = run.scenario.map(|(path, bytes)| json!({ "path": path.display().to_string(), "sha256": sha256_hex(bytes) }));
    let entry = json!({
        "scenario": scenario,
        "settings": run.settings,
        "tolerances": run.tolerances,
        "tolerance_overrides": run.overrides,
        "artifacts": artifacts.files,
    });
    manifest["tool"] = json!("sebeu");
    manifest["version"] = json!(env!("CARGO_PKG_VERSION"));
    if !manifest["runs"].is_object() {
        manifest["runs"] = json!({});
    }
    manifest["runs"][run.command] = entry;
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)
}
