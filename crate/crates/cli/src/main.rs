use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use delta_opf::conic::{ConicBackend, SolveOptions};
use delta_opf::cost::CostWeights;
use delta_opf::equivalence::check_equivalence;
use delta_opf::feeder::{bundled, load_feeder, Feeder};
use delta_opf::recovery::{sweep, RecoveryConfig, RecoveryReport, SweepTrend, TableRow, DEFAULT_RANK_TOL};
use delta_opf::registry;

/// Overrides the solver's relative gap and feasibility tolerance.
const TOL_ENV: &str = "DELTA_OPF_SOLVER_TOL";
/// Largest relative BIM/BFM gap `equiv` accepts.
const EQUIV_GAP_TOL: f64 = 1e-5;
/// Rounding allowance on mapped residuals, per unit.
const EQUIV_FLOOR_PU: f64 = 1e-9;

#[derive(Parser)]
#[command(name = "delta-opf", version, about = "Three-phase OPF relaxations with delta-connected devices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one relaxation and recover an operating point.
    Solve(SolveArgs),
    /// Run the penalized algorithm over a list of penalty weights.
    Sweep(SweepArgs),
    /// Compare the bus-injection and branch-flow relaxations.
    Equiv(EquivArgs),
}

#[derive(Args)]
struct Common {
    /// Fixture file, or the name of a bundled feeder (ieee13, ieee37, ieee123, ...).
    #[arg(long)]
    feeder: String,
    /// Voltage band in percent around 1 pu; defaults to the fixture's band.
    #[arg(long)]
    vlimit: Option<f64>,
    #[arg(long, default_value = "clarabel")]
    backend: String,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "bim")]
    model: String,
    #[arg(long, default_value = "post")]
    algorithm: String,
    /// Penalty weight; 0 for `post`, 10 for `penalty` when omitted.
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
    rank_tol: f64,
    /// Write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Relaxation model; repeat for several.
    #[arg(long, default_value = "bim")]
    model: Vec<String>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_value = "0,0.1,1,10,100")]
    lambdas: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
    rank_tol: f64,
    /// Steps below this many kW count as ties in the trend summary.
    #[arg(long, default_value_t = 0.0)]
    trend_tol: f64,
    /// Write the rows as CSV, or JSON when the name ends in `.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EquivArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    lambda: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let run = match cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Equiv(a) => cmd_equiv(a),
    };
    match run {
        Ok(exact) if exact => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn solve_options() -> Result<SolveOptions> {
    let mut opts = SolveOptions::default();
    if let Ok(raw) = std::env::var(TOL_ENV) {
        let tol: f64 = raw.trim().parse().map_err(|_| anyhow!("{TOL_ENV}={raw} is not a number"))?;
        if !(tol > 0.0 && tol.is_finite()) {
            return Err(anyhow!("{TOL_ENV} must be positive, got {tol}"));
        }
        opts.tol = tol;
    }
    Ok(opts)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(anyhow!("lambda must be a nonnegative number, got {lambda}"));
    }
    Ok(())
}

fn load(common: &Common) -> Result<Feeder> {
    let path = Path::new(&common.feeder);
    let feeder = if path.exists() {
        load_feeder(path).with_context(|| format!("reading {}", path.display()))?
    } else {
        bundled(&common.feeder).ok_or_else(|| anyhow!("no fixture file or bundled feeder named `{}`", common.feeder))?
    };
    match common.vlimit {
        Some(pct) if !(pct > 0.0 && pct < 100.0) => Err(anyhow!("--vlimit must be a percentage in (0, 100), got {pct}")),
        Some(pct) => Ok(feeder.with_voltage_band(pct)?),
        None => Ok(feeder),
    }
}

fn pick<'a, T: ?Sized>(reg: &'a registry::Registry<T>, kind: &str, name: &str) -> Result<&'a T> {
    reg.get(name).ok_or_else(|| anyhow!("unknown {kind} `{name}` (known: {})", reg.names().join(", ")))
}

fn print_rows(rows: &[TableRow]) {
    println!(
        "{:<16} {:<5} {:<15} {:>7} {:>10} {:>10} {:>13} {:>11} {:>8}  status",
        "feeder", "model", "algorithm", "lambda", "W-ratio", "M-ratios", "Infeas. (kW)", "Cost", "time (s)"
    );
    for r in rows {
        let algorithm = serde_json::to_value(r.algorithm).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        let status = serde_json::to_value(r.status).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        println!(
            "{:<16} {:<5} {:<15} {:>7} {:>10.3e} {:>10.3e} {:>13.3e} {:>11.4} {:>8.2}  {}",
            r.feeder, r.model, algorithm, r.lambda, r.w_ratio, r.m_ratio, r.infeasibility_kw, r.cost, r.seconds, status
        );
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_solve(a: SolveArgs) -> Result<bool> {
    let feeder = load(&a.common)?;
    let (backends, models, algorithms) = (registry::backends(), registry::models(), registry::algorithms());
    let backend = pick(&backends, "backend", &a.common.backend)?;
    let model = pick(&models, "model", &a.model)?;
    let algorithm = pick(&algorithms, "algorithm", &a.algorithm)?;
    let lambda = a.lambda.unwrap_or(if a.algorithm == "penalty" { 10.0 } else { 0.0 });
    check_lambda(lambda)?;
    if a.algorithm == "post" && lambda != 0.0 {
        return Err(anyhow!("--algorithm post solves without penalty; drop --lambda or use --algorithm penalty"));
    }
    let config = RecoveryConfig { rank_tol: a.rank_tol, solve: solve_options()?, ..Default::default() };
    let weights = CostWeights::for_feeder(&feeder);
    let rec = algorithm.run(&feeder, &weights, lambda, model, backend, &config)?;
    print_rows(&[rec.report.row()]);
    println!("voltage band [{:.4}, {:.4}] pu", rec.report.v_min, rec.report.v_max);
    if let Some(out) = &a.out {
        write_json(out, &rec.report)?;
    }
    Ok(rec.report.is_exact())
}

fn cmd_sweep(a: SweepArgs) -> Result<bool> {
    for &l in &a.lambdas {
        check_lambda(l)?;
    }
    if a.lambdas.is_empty() {
        bail!("--lambdas is empty");
    }
    let feeder = load(&a.common)?;
    let backends = registry::backends();
    let backend: &dyn ConicBackend = pick(&backends, "backend", &a.common.backend)?;
    let models = registry::models();
    let config = RecoveryConfig { rank_tol: a.rank_tol, solve: solve_options()?, ..Default::default() };
    let weights = CostWeights::for_feeder(&feeder);
    let mut lambdas = a.lambdas.clone();
    lambdas.sort_by(f64::total_cmp);
    let mut all: Vec<Vec<RecoveryReport>> = Vec::new();
    for name in &a.model {
        let model = pick(&models, "model", name)?;
        all.push(sweep(&feeder, &weights, &lambdas, model, backend, &config)?);
    }
    let rows: Vec<TableRow> = all.iter().flatten().map(RecoveryReport::row).collect();
    print_rows(&rows);
    for (name, reps) in a.model.iter().zip(&all) {
        let t = SweepTrend::of(reps, a.trend_tol);
        println!("{name}: cost nondecreasing: {}, infeasibility nonincreasing: {}", t.cost_nondecreasing, t.infeasibility_nonincreasing);
    }
    if all.len() > 1 {
        for (i, &l) in lambdas.iter().enumerate() {
            let costs: Vec<f64> = all.iter().map(|r| r[i].objective_kw).collect();
            let hi = costs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = costs.iter().copied().fold(f64::INFINITY, f64::min);
            println!("lambda {l}: relative objective spread across models {:.3e}", (hi - lo) / hi.abs().max(f64::MIN_POSITIVE));
        }
    }
    if let Some(out) = &a.out {
        if out.extension().is_some_and(|e| e == "json") {
            write_json(out, &all.concat())?;
        } else {
            let mut w = csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    Ok(true)
}

fn cmd_equiv(a: EquivArgs) -> Result<bool> {
    check_lambda(a.lambda)?;
    let feeder = load(&a.common)?;
    let backends = registry::backends();
    let backend = pick(&backends, "backend", &a.common.backend)?;
    let weights = CostWeights::for_feeder(&feeder);
    let rep = check_equivalence(&feeder, &weights, a.lambda, backend, &solve_options()?).map_err(|e| anyhow!(e))?;
    let holds = rep.holds(feeder.power_base_kva, EQUIV_GAP_TOL, EQUIV_FLOOR_PU);
    println!("{}", serde_json::to_string_pretty(&rep)?);
    println!(
        "{}: lambda {} relative gap {:.3e}, equivalence {}",
        rep.feeder,
        rep.lambda,
        rep.rel_gap,
        if holds { "holds" } else { "does not hold" }
    );
    if let Some(out) = &a.out {
        write_json(out, &rep)?;
    }
    Ok(holds)
}
