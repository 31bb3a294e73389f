//! `sebeu`: construct and verify subjective equilibria for linear-quadratic
//! stochastic dynamic games from JSON scenario files.
//!
//! Exit codes: 0 success, 1 assumption or verification failure, 2 input error.

mod artifacts;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use artifacts::{ArtifactSet, RunRecord};
use sebeu::example::{
    epsilon_nash_gap, example_gains, example_row, gap_slope, gaps_nonincreasing, rows_csv, ExampleSpec,
};
use sebeu::model::{stack_dimensions, validate};
use sebeu::pipeline::{solve, solve_meanfield_spec};
use sebeu::scenario::{self, Scenario};
use sebeu::simulate::{simulate_meanfield, simulate_objective, simulation_horizon, SimOptions};
use sebeu::verify::{
    check_identities, check_meanfield_consistency, check_meanfield_nash, check_sebeu, MeanFieldConfig, SebeuConfig,
};
use sebeu::{Error, Tolerances};

/// Stages compared when checking environment moments.
const MOMENT_STAGES: usize = 21;
const IDENTITY_PROBES: usize = 100;

#[derive(Parser, Debug)]
#[command(
    name = "sebeu",
    version,
    about = "Subjective equilibria for linear-quadratic stochastic dynamic games",
    after_help = "Any threshold can be overridden with --tol.NAME VALUE (for example --tol.nesting 1e-9)."
)]
struct Cli {
    /// Worker threads for Monte Carlo runs (results do not depend on this).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a scenario against the standing assumptions.
    Validate(ValidateArgs),
    /// Construct the equilibrium and write gains, fixed point and estimator.
    Solve(SolveArgs),
    /// Simulate the objective closed loop of a solved scenario.
    Simulate(SimulateArgs),
    /// Run the verification suite on a solved scenario.
    Verify(VerifyArgs),
    /// Closed forms and ε-Nash scaling for the two-stage population example.
    Example(ExampleArgs),
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    scenario: PathBuf,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    paths: usize,
    /// Stages to simulate (default: the finite horizon, or the discount truncation).
    #[arg(long)]
    horizon: Option<usize>,
    /// Also write every path to `trajectories.bin`.
    #[arg(long)]
    trajectories: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100_000)]
    paths: usize,
    /// Stages compared in the consistency checks.
    #[arg(long, default_value_t = MOMENT_STAGES)]
    horizon: usize,
}

#[derive(Args, Debug)]
struct ExampleArgs {
    /// Example data; the scalar defaults are used when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100_000)]
    paths: usize,
    /// Population sizes for the equilibrium gain table.
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32,64,128,256,512,1024")]
    n_list: Vec<usize>,
    /// Population sizes for the best-response gap slopes.
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32,64,128,256")]
    br_n_list: Vec<usize>,
    /// Population sizes for the simulated ε-Nash gap (empty to skip).
    #[arg(long, value_delimiter = ',', default_value = "2,8,32,128")]
    nash_n_list: Vec<usize>,
}

enum Failure {
    /// Assumption violated or verification failed.
    Check(String),
    Input(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Scenario(_) | Error::Usage(_) => Failure::Input(e.to_string()),
            other => {
                let mut msg = other.to_string();
                if let Some(a) = other.assumption() {
                    if !msg.contains(a.label()) {
                        write!(msg, " [{a}]").unwrap();
                    }
                }
                Failure::Check(msg)
            }
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(format!("i/o: {e}"))
    }
}

type Outcome = Result<(), Failure>;

/// Pulls `--tol.NAME VALUE` and `--tol.NAME=VALUE` out of the arguments.
fn split_tolerances(args: Vec<String>) -> Result<(Vec<String>, BTreeMap<String, f64>), String> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = BTreeMap::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(spec) = arg.strip_prefix("--tol.") else {
            rest.push(arg);
            continue;
        };
        let (name, value) = match spec.split_once('=') {
            Some((n, v)) => (n.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| format!("--tol.{spec} needs a value"))?;
                (spec.to_string(), v)
            }
        };
        let value: f64 = value.parse().map_err(|_| format!("--tol.{name}: `{value}` is not a number"))?;
        overrides.insert(name, value);
    }
    Ok((rest, overrides))
}

struct Context {
    tol: Tolerances,
    overrides: BTreeMap<String, f64>,
}

fn load_scenario(path: &Path) -> Result<(Vec<u8>, Scenario), Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::Input(format!("cannot read {}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| Failure::Input("scenario is not UTF-8".into()))?;
    Ok((bytes, scenario::parse(&text)?))
}

fn cmd_validate(args: &ValidateArgs, ctx: &Context) -> Outcome {
    let (_, scenario) = load_scenario(&args.scenario)?;
    let report = match &scenario {
        Scenario::Game(spec) => validate(spec, &ctx.tol),
        Scenario::MeanField { spec, .. } => spec.validate(&ctx.tol),
    };
    if report.is_valid() {
        println!("valid");
        Ok(())
    } else {
        Err(Failure::Check(format!("invalid game specification:\n{report}")))
    }
}

fn record<'a>(
    command: &'a str,
    scenario: Option<(&'a Path, &'a [u8])>,
    settings: serde_json::Value,
    ctx: &'a Context,
) -> RunRecord<'a> {
    RunRecord { command, scenario, settings, tolerances: &ctx.tol, overrides: &ctx.overrides }
}

fn cmd_solve(args: &SolveArgs, ctx: &Context) -> Outcome {
    let (bytes, scenario) = load_scenario(&args.scenario)?;
    let mut out = ArtifactSet::new(&args.out)?;
    write_solution(&scenario, &ctx.tol, &mut out)?;
    artifacts::update_manifest(&args.out, &record("solve", Some((&args.scenario, &bytes)), json!({}), ctx), &out)?;
    println!("solved; wrote {} to {}", out.files.keys().cloned().collect::<Vec<_>>().join(", "), args.out.display());
    Ok(())
}

fn write_solution(scenario: &Scenario, tol: &Tolerances, out: &mut ArtifactSet) -> Outcome {
    match scenario {
        Scenario::Game(spec) => {
            let sol = solve(spec, tol)?;
            let len = spec.horizon.finite().unwrap_or(MOMENT_STAGES);
            let plan = sol.filter_plan(len, tol)?;
            let sigmas: Vec<_> = plan.steps.iter().map(|s| s.sigma.clone()).collect();
            let gains: Vec<_> = plan.steps.iter().map(|s| s.gain.clone()).collect();
            out.write_json("gains.json", &artifacts::gains_json(&sol))?;
            out.write_json("fixed_point.json", &artifacts::fixed_point_json(&sol.fixed_point))?;
            out.write_json("estimator.json", &artifacts::estimator_json(&sol.model, &sol, &sigmas, &gains))?;
            let moments = sebeu::estimator::moment_propagation(&sol.model, &plan, len);
            out.write("moments.csv", moments.to_csv(&stack_dimensions(spec)).as_bytes())?;
        }
        Scenario::MeanField { spec, .. } => {
            let sol = solve_meanfield_spec(spec, tol)?;
            let (gains, fixed) = artifacts::meanfield_json(&sol);
            out.write_json("gains.json", &gains)?;
            out.write_json("fixed_point.json", &fixed)?;
        }
    }
    Ok(())
}

/// Confirms that `dir` holds solve artifacts for this scenario and these
/// tolerances.
fn require_solved(dir: &Path, bytes: &[u8], scenario: &Scenario, tol: &Tolerances) -> Outcome {
    let manifest = artifacts::read_manifest(dir);
    let solved = manifest.as_ref().map(|m| &m["runs"]["solve"]).filter(|s| s.is_object());
    let Some(solved) = solved else {
        return Err(Failure::Input(format!(
            "no solve artifacts in {}; run `sebeu solve` with the same --out first",
            dir.display()
        )));
    };
    if solved["scenario"]["sha256"] != json!(artifacts::sha256_hex(bytes)) {
        return Err(Failure::Input(format!("solve artifacts in {} belong to a different scenario", dir.display())));
    }
    let scratch = std::env::temp_dir().join(format!("sebeu-check-{}", std::process::id()));
    let mut fresh = ArtifactSet::new(&scratch)?;
    let result = write_solution(scenario, tol, &mut fresh);
    let _ = std::fs::remove_dir_all(&scratch);
    result?;
    if solved["artifacts"]["gains.json"] != json!(fresh.files["gains.json"]) {
        return Err(Failure::Input(format!(
            "solve artifacts in {} are stale (different tolerances?); re-run `sebeu solve`",
            dir.display()
        )));
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs, ctx: &Context) -> Outcome {
    let (bytes, scenario) = load_scenario(&args.scenario)?;
    require_solved(&args.out, &bytes, &scenario, &ctx.tol)?;
    if args.paths < 2 {
        return Err(Failure::Input("--paths must be at least 2".into()));
    }
    let mut opts = SimOptions::new(args.paths, args.seed);
    opts.horizon = args.horizon;
    opts.record = args.trajectories;
    let mut out = ArtifactSet::new(&args.out)?;
    let mut report = String::new();
    match &scenario {
        Scenario::Game(spec) => {
            let sol = solve(spec, &ctx.tol)?;
            let horizon = simulation_horizon(spec, &opts, &ctx.tol);
            let plan = sol.filter_plan(horizon, &ctx.tol)?;
            let batch = simulate_objective(spec, &sol.profile, &plan, &opts, &ctx.tol)?;
            out.write("summary.csv", batch.summary_csv().as_bytes())?;
            if let Some(traj) = &batch.trajectories {
                let mut buf = Vec::new();
                traj.write_binary(&mut buf)?;
                out.write("trajectories.bin", &buf)?;
            }
            for (i, (c, tail)) in batch.costs.iter().zip(&batch.tail_bound).enumerate() {
                writeln!(report, "J[{}] = {:.6} ± {:.2e} (truncation bound {:.1e})", i + 1, c.mean, c.stderr, tail)
                    .unwrap();
            }
        }
        Scenario::MeanField { spec, population } => {
            let sol = solve_meanfield_spec(spec, &ctx.tol)?;
            let run = simulate_meanfield(&sol, *population, None, &opts, &ctx.tol)?;
            out.write("summary.csv", artifacts::meanfield_summary_csv(&run, spec.player.n_x()).as_bytes())?;
            let mean = run.costs.iter().map(|c| c.mean).sum::<f64>() / run.costs.len() as f64;
            writeln!(report, "population {population}: average J = {mean:.6}").unwrap();
        }
    }
    let settings = json!({ "seed": args.seed, "paths": args.paths, "horizon": args.horizon, "trajectories": args.trajectories });
    artifacts::update_manifest(&args.out, &record("simulate", Some((&args.scenario, &bytes)), settings, ctx), &out)?;
    print!("{report}");
    Ok(())
}

fn cmd_verify(args: &VerifyArgs, ctx: &Context) -> Outcome {
    let (bytes, scenario) = load_scenario(&args.scenario)?;
    require_solved(&args.out, &bytes, &scenario, &ctx.tol)?;
    if args.paths < 2 {
        return Err(Failure::Input("--paths must be at least 2".into()));
    }
    let report = match &scenario {
        Scenario::Game(spec) => {
            let sol = solve(spec, &ctx.tol)?;
            let mut report = check_identities(&sol, &ctx.tol, IDENTITY_PROBES, args.seed);
            let mut cfg = SebeuConfig::new(args.paths, args.seed);
            cfg.moment_stages = args.horizon;
            report.extend(check_sebeu(&sol, &cfg, &ctx.tol)?);
            report
        }
        Scenario::MeanField { spec, population } => {
            let sol = solve_meanfield_spec(spec, &ctx.tol)?;
            let mut report =
                check_meanfield_consistency(&sol, *population, args.paths, args.seed, args.horizon, &ctx.tol)?;
            report.extend(check_meanfield_nash(&sol, &MeanFieldConfig::new(args.seed), &ctx.tol)?);
            report
        }
    };
    let mut out = ArtifactSet::new(&args.out)?;
    out.write_json("report.json", &json!({ "passed": report.all_passed(), "checks": report.checks }))?;
    out.write("report.txt", report.table().as_bytes())?;
    let settings = json!({ "seed": args.seed, "paths": args.paths, "horizon": args.horizon });
    artifacts::update_manifest(&args.out, &record("verify", Some((&args.scenario, &bytes)), settings, ctx), &out)?;
    print!("{}", report.table());
    if report.all_passed() {
        println!("all {} checks passed", report.checks.len());
        Ok(())
    } else {
        let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        Err(Failure::Check(format!("verification failed: {}", failed.join(", "))))
    }
}

fn cmd_example(args: &ExampleArgs, ctx: &Context) -> Outcome {
    let (bytes, spec) = match &args.scenario {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| Failure::Input(format!("cannot read {}: {e}", path.display())))?;
            let text = String::from_utf8(bytes.clone()).map_err(|_| Failure::Input("scenario is not UTF-8".into()))?;
            (Some(bytes), scenario::parse_example(&text)?)
        }
        None => (None, ExampleSpec::default()),
    };
    if args.n_list.iter().chain(&args.br_n_list).chain(&args.nash_n_list).any(|&n| n == 0) {
        return Err(Failure::Input("population sizes must be positive".into()));
    }
    let gains = example_gains(&spec)?;
    let rows = args.n_list.iter().map(|&n| example_row(&spec, &gains, n)).collect::<Result<Vec<_>, _>>()?;
    let br_rows = args.br_n_list.iter().map(|&n| example_row(&spec, &gains, n)).collect::<Result<Vec<_>, _>>()?;

    let mut slopes = String::from("quantity,slope,n_min,n_max\n");
    let mut summary = String::new();
    let range = |list: &[usize]| (list.iter().min().copied().unwrap_or(0), list.iter().max().copied().unwrap_or(0));
    let mut fits: Vec<(&str, f64, (usize, usize))> = Vec::new();
    if rows.len() >= 2 {
        fits.push(("g1_limit_gap", gap_slope(&rows, |r| r.g1_limit_gap), range(&args.n_list)));
    }
    if br_rows.len() >= 2 {
        let r = range(&args.br_n_list);
        fits.push(("f0_gap", gap_slope(&br_rows, |r| r.f0_gap), r));
        fits.push(("f1_gap", gap_slope(&br_rows, |r| r.f1_gap), r));
        fits.push(("g1_gap", gap_slope(&br_rows, |r| r.g1_gap), r));
        fits.push(("f10_gap", gap_slope(&br_rows, |r| r.f10_gap), r));
    }
    for (name, slope, (lo, hi)) in &fits {
        writeln!(slopes, "{name},{slope:e},{lo},{hi}").unwrap();
        writeln!(summary, "slope {name:<13} {slope:+.4} over N in [{lo}, {hi}]").unwrap();
    }

    let mut out = ArtifactSet::new(&args.out)?;
    out.write("example.csv", rows_csv(&rows).as_bytes())?;
    out.write("best_response.csv", rows_csv(&br_rows).as_bytes())?;
    out.write("slopes.csv", slopes.as_bytes())?;
    if !args.nash_n_list.is_empty() {
        if args.paths < 2 {
            return Err(Failure::Input("--paths must be at least 2".into()));
        }
        let gaps = args
            .nash_n_list
            .iter()
            .map(|&n| epsilon_nash_gap(&spec, &gains, n, args.paths, args.seed))
            .collect::<Result<Vec<_>, _>>()?;
        let mut csv = String::from("n,gap,gap_stderr,equilibrium_cost,equilibrium_cost_stderr\n");
        for g in &gaps {
            writeln!(
                csv,
                "{},{:e},{:e},{:e},{:e}",
                g.n, g.gap.mean, g.gap.stderr, g.equilibrium_cost.mean, g.equilibrium_cost.stderr
            )
            .unwrap();
            writeln!(summary, "epsilon-Nash gap N = {:<5} {:.3e} ± {:.1e}", g.n, g.gap.mean, g.gap.stderr).unwrap();
        }
        writeln!(summary, "gap nonincreasing within 2 standard errors: {}", gaps_nonincreasing(&gaps, 2.0)).unwrap();
        out.write("epsilon_nash.csv", csv.as_bytes())?;
    }
    let settings = json!({
        "seed": args.seed,
        "paths": args.paths,
        "n_list": args.n_list,
        "br_n_list": args.br_n_list,
        "nash_n_list": args.nash_n_list,
    });
    let scenario = args.scenario.as_deref().zip(bytes.as_deref());
    artifacts::update_manifest(&args.out, &record("example", scenario, settings, ctx), &out)?;
    print!("{summary}");
    Ok(())
}

fn run() -> Outcome {
    let (args, overrides) = split_tolerances(std::env::args().collect()).map_err(Failure::Input)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code == 0 {
                return Ok(());
            }
            return Err(Failure::Input(String::new()));
        }
    };
    let mut tol = Tolerances::default();
    for (name, value) in &overrides {
        tol.set(name, *value)?;
    }
    if let Some(workers) = cli.workers {
        if workers == 0 {
            return Err(Failure::Input("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| Failure::Input(e.to_string()))?;
    }
    let ctx = Context { tol, overrides };
    match &cli.command {
        Command::Validate(a) => cmd_validate(a, &ctx),
        Command::Solve(a) => cmd_solve(a, &ctx),
        Command::Simulate(a) => cmd_simulate(a, &ctx),
        Command::Verify(a) => cmd_verify(a, &ctx),
        Command::Example(a) => cmd_example(a, &ctx),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            if !msg.is_empty() {
                eprintln!("error: {msg}");
            }
            ExitCode::from(2)
        }
    }
}
