use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use ssdid::dgp::{monte_carlo, parse_spec, simulate, McEstimator, MonteCarloConfig};
use ssdid::inference::{
    bootstrap, BootstrapConfig, BootstrapResult, EstimatorSpec, Granularity, IntervalKind, LayoutSpec, PanelSource,
};
use ssdid::io;
use ssdid::oracle::{check_affine_hull, run_joint_ols, run_sequential_ols, tightest_config, OracleConfig};
use ssdid::panel::{validate, CohortPanel, CovariateScheme, ValidatedPanel};
use ssdid::placebo::{run_placebo, PlaceboOptions};
use ssdid::sequential::{run_sequential_with_eta, EtaChoice, Mu, SsdidConfig};
use ssdid::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "ssdid", version, about = "Sequential synthetic difference-in-differences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate cell and horizon effects, optionally with bootstrap inference.
    Estimate(EstimateArgs),
    /// Backdate adoption and check that placebo effects center at zero.
    Placebo(PlaceboArgs),
    /// Draw a simulated panel from a design file.
    Simulate(SimulateArgs),
    /// Repeat simulation and estimation to tabulate RMSE, coverage and t-statistics.
    Montecarlo(MonteCarloArgs),
    /// Compare the sequential and joint oracle regressions given known factors.
    OracleCheck(OracleArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LayoutArg {
    /// One series per adoption cohort.
    Cohort,
    /// Cohort series plus one never-treated series per group.
    HybridSplit,
    /// One series per group.
    Grouped,
    /// One series per unit (pre-aggregated input).
    PerUnit,
}

impl LayoutArg {
    fn spec(self) -> LayoutSpec {
        match self {
            LayoutArg::Cohort => LayoutSpec::Scheme(CovariateScheme::default()),
            LayoutArg::HybridSplit => LayoutSpec::Scheme(CovariateScheme::hybrid(true)),
            LayoutArg::Grouped => LayoutSpec::Scheme(CovariateScheme::grouped()),
            LayoutArg::PerUnit => LayoutSpec::PerUnit,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum IntervalArg {
    Wald,
    Percentile,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GranularityArg {
    Unit,
    Row,
}

#[derive(Args, Debug, Clone)]
struct EstimatorArgs {
    /// Smallest cohort to estimate (default: earliest adoption ≥ 2).
    #[arg(long)]
    a_min: Option<u32>,
    /// Largest cohort to estimate (default: latest adoption with a + K ≤ T).
    #[arg(long)]
    a_max: Option<u32>,
    #[arg(long, default_value_t = 0)]
    k_max: u32,
    /// `auto`, `inf` or a positive number.
    #[arg(long, default_value = "auto")]
    eta: String,
    /// `shares` or a CSV file `a,mu`.
    #[arg(long, default_value = "shares")]
    mu: String,
    #[arg(long, value_enum, default_value = "cohort")]
    layout: LayoutArg,
}

#[derive(Args, Debug, Clone)]
struct BootstrapArgs {
    /// Bootstrap replicates (0 disables inference).
    #[arg(long, default_value_t = 0)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "wald")]
    interval: IntervalArg,
    #[arg(long, value_enum, default_value = "unit")]
    granularity: GranularityArg,
    #[arg(long)]
    seed: Option<u64>,
    /// Run replicates on all cores (results are identical).
    #[arg(long)]
    parallel: bool,
    /// Also write every replicate to replicates.csv.
    #[arg(long)]
    dump_replicates: bool,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
    #[command(flatten)]
    est: EstimatorArgs,
    #[command(flatten)]
    boot: BootstrapArgs,
}

#[derive(Args, Debug)]
struct PlaceboArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
    #[arg(long)]
    placebo_p: u32,
    /// Horizon cap on the shifted timeline; lags ≥ P then target true effects.
    #[arg(long)]
    anticipation: Option<u32>,
    #[arg(long, default_value_t = 1.96)]
    threshold: f64,
    #[command(flatten)]
    est: EstimatorArgs,
    #[command(flatten)]
    boot: BootstrapArgs,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    design_spec: PathBuf,
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Layout used for the factors file.
    #[arg(long, value_enum, default_value = "cohort")]
    layout: LayoutArg,
}

#[derive(Args, Debug)]
struct MonteCarloArgs {
    #[arg(long)]
    design_spec: PathBuf,
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
    #[arg(long)]
    reps: usize,
    /// Also report sequential OLS with the simulated factors.
    #[arg(long)]
    oracle: bool,
    #[command(flatten)]
    est: EstimatorArgs,
    #[command(flatten)]
    boot: BootstrapArgs,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    factors: PathBuf,
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
    #[arg(long)]
    a_star: Option<u32>,
    #[arg(long)]
    t_star: Option<u32>,
    #[arg(long, default_value_t = 1e-8)]
    tolerance: f64,
    #[arg(long, value_enum, default_value = "cohort")]
    layout: LayoutArg,
}

fn usage_error(message: &str) -> ! {
    Cli::command().error(clap::error::ErrorKind::MissingRequiredArgument, message).exit()
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic(dir: &Path, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<PathBuf> {
    let mut buf = Vec::new();
    fill(&mut buf)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&buf)?;
    let path = dir.join(name);
    tmp.persist(&path).map_err(|e| Error::Io(e.error))?;
    Ok(path)
}

fn write_json(dir: &Path, name: &str, value: &Value) -> Result<PathBuf> {
    write_atomic(dir, name, |buf| {
        serde_json::to_writer_pretty(&mut *buf, value)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        buf.push(b'\n');
        Ok(())
    })
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn load_panel(path: &Path) -> Result<ValidatedPanel> {
    validate(&io::read_panel_path(path)?)
}

fn finite_adoptions(panel: &CohortPanel) -> Vec<u32> {
    panel.rows().iter().filter_map(|r| r.adoption.period()).filter(|&a| a >= 2).collect()
}

fn resolve_config(args: &EstimatorArgs, panel: &CohortPanel) -> Result<SsdidConfig> {
    let adoptions = finite_adoptions(panel);
    let t = panel.periods();
    let a_min = match args.a_min {
        Some(a) => a,
        None => *adoptions.iter().min().ok_or(Error::EmptyCohortRange { a_min: 2, a_max: t })?,
    };
    let a_max = match args.a_max {
        Some(a) => a,
        None => adoptions
            .iter()
            .copied()
            .filter(|&a| a + args.k_max <= t && a >= a_min)
            .max()
            .ok_or(Error::HorizonOverflow { a_max: a_min, k_max: args.k_max, periods: t })?,
    };
    let mu = if args.mu == "shares" { Mu::Shares } else { io::read_mu_path(Path::new(&args.mu))? };
    let mut cfg = SsdidConfig::new(a_min, a_max, args.k_max).with_eta(EtaChoice::parse(&args.eta)?);
    cfg.mu = mu;
    cfg.validate(t)?;
    Ok(cfg)
}

fn bootstrap_config(args: &BootstrapArgs, seed: u64) -> BootstrapConfig {
    let mut b = BootstrapConfig::new(args.bootstrap, seed);
    b.alpha = args.alpha;
    b.interval = match args.interval {
        IntervalArg::Wald => IntervalKind::Wald,
        IntervalArg::Percentile => IntervalKind::Percentile,
    };
    b.granularity = match args.granularity {
        GranularityArg::Unit => Granularity::Unit,
        GranularityArg::Row => Granularity::CohortRow,
    };
    b.parallel = args.parallel;
    b
}

fn require_seed(seed: Option<u64>, what: &str) -> u64 {
    seed.unwrap_or_else(|| usage_error(&format!("--seed is required for {what}")))
}

fn versions() -> Value {
    json!({ "ssdid": env!("CARGO_PKG_VERSION") })
}

fn argv() -> Value {
    json!(std::env::args().skip(1).collect::<Vec<_>>())
}

fn estimate(args: &EstimateArgs) -> Result<()> {
    let panel = load_panel(&args.input)?;
    fs::create_dir_all(&args.output_dir)?;
    let layout = args.est.layout.spec();
    let source = PanelSource::Units { panel, layout };
    let cohort = source.cohort_panel()?;
    let cfg = resolve_config(&args.est, &cohort)?;
    let eta = source.resolve_eta(cfg.eta)?;

    let seed = (args.boot.bootstrap > 0).then(|| require_seed(args.boot.seed, "bootstrap inference"));
    let (grid, boot): (_, Option<BootstrapResult>) = match seed {
        Some(seed) => {
            let bcfg = bootstrap_config(&args.boot, seed);
            let res = bootstrap(&source, &EstimatorSpec::Sequential(cfg.clone()), &bcfg)?;
            (res.point.clone(), Some(res))
        }
        None => (run_sequential_with_eta(&cohort, &cfg, eta)?, None),
    };

    let dir = &args.output_dir;
    let mut outputs = vec![
        write_atomic(dir, "estimates.csv", |b| io::write_estimates(b, &grid))?,
        write_atomic(dir, "horizon.csv", |b| io::write_horizons(b, &grid, boot.as_ref()))?,
    ];
    if let (Some(res), true) = (&boot, args.boot.dump_replicates) {
        outputs.push(write_atomic(dir, "replicates.csv", |b| io::write_replicates(b, res))?);
    }
    let run = json!({
        "command": "estimate",
        "argv": argv(),
        "input": args.input,
        "layout": to_json(&layout),
        "config": to_json(&cfg),
        "estimator_kind": grid.kind.to_string(),
        "eta": to_json(&grid.eta),
        "seed": seed,
        "bootstrap": boot.as_ref().map(|_| to_json(&bootstrap_config(&args.boot, seed.unwrap_or(0)))),
        "row_level_bootstrap": boot.as_ref().map(|b| b.row_level),
        "panel": { "series": cohort.n_rows(), "periods": cohort.periods(), "units": cohort.n_units() },
        "outputs": outputs.iter().map(|p| p.file_name().unwrap().to_string_lossy().to_string()).collect::<Vec<_>>(),
        "versions": versions(),
    });
    write_json(dir, "run.json", &run)?;
    Ok(())
}

fn placebo(args: &PlaceboArgs) -> Result<()> {
    let panel = load_panel(&args.input)?;
    fs::create_dir_all(&args.output_dir)?;
    let layout = args.est.layout.spec();
    let source = PanelSource::Units { panel, layout };
    let cohort = source.cohort_panel()?;
    // The estimator range is resolved on the true timeline with the placebo horizon.
    let mut est = args.est.clone();
    est.k_max = args.anticipation.unwrap_or(args.placebo_p.saturating_sub(1));
    let cfg = resolve_config(&est, &cohort)?;
    let seed = require_seed(args.boot.seed, "placebo inference");
    let mut bargs = args.boot.clone();
    if bargs.bootstrap == 0 {
        bargs.bootstrap = 100;
    }
    let bcfg = bootstrap_config(&bargs, seed);
    let mut opts = PlaceboOptions::new(args.placebo_p);
    opts.threshold = args.threshold;
    opts.k_max_override = args.anticipation;
    let report = run_placebo(&source, &cfg, &opts, &bcfg)?;

    let dir = &args.output_dir;
    write_atomic(dir, "placebo.csv", |b| io::write_placebo(b, &report))?;
    write_atomic(dir, "estimates.csv", |b| io::write_estimates(b, report.grid()))?;
    let run = json!({
        "command": "placebo",
        "argv": argv(),
        "input": args.input,
        "layout": to_json(&layout),
        "shift": report.shift,
        "k_max": report.k_max,
        "threshold": report.threshold,
        "pass": report.pass,
        "config": to_json(&report.config),
        "estimator_kind": report.grid().kind.to_string(),
        "eta": to_json(&report.grid().eta),
        "seed": seed,
        "bootstrap": to_json(&bcfg),
        "horizons": to_json(&report.horizons),
        "versions": versions(),
    });
    write_json(dir, "run.json", &run)?;
    Ok(())
}

fn read_spec(path: &Path, seed: Option<u64>) -> Result<ssdid::dgp::DgpSpec> {
    let text = fs::read_to_string(path)?;
    let has_seed = text.lines().any(|l| l.split('#').next().unwrap_or("").trim_start().starts_with("seed"));
    let mut spec = parse_spec(&text)?;
    match (seed, has_seed) {
        (Some(s), _) => spec.seed = s,
        (None, true) => {}
        (None, false) => usage_error("--seed is required (or set `seed` in the design file)"),
    }
    Ok(spec)
}

fn simulate_cmd(args: &SimulateArgs) -> Result<()> {
    let spec = read_spec(&args.design_spec, args.seed)?;
    let sim = simulate(&spec)?;
    fs::create_dir_all(&args.output_dir)?;
    let layout = args.layout.spec();
    let rows = layout.build(&sim.panel)?;
    let cohort = rows.aggregate(&sim.panel)?;
    let factors = sim.cohort_factors(&rows)?;
    let dir = &args.output_dir;
    write_atomic(dir, "panel.csv", |b| io::write_panel(b, &sim.panel.records()))?;
    write_atomic(dir, "truths.csv", |b| io::write_truths(b, &sim.truths()))?;
    write_atomic(dir, "factors.csv", |b| io::write_factors(b, &factors, &cohort))?;
    let run = json!({
        "command": "simulate",
        "argv": argv(),
        "spec": to_json(&spec),
        "layout": to_json(&layout),
        "ife_scale": sim.ife_scale,
        "seed": spec.seed,
        "versions": versions(),
    });
    write_json(dir, "run.json", &run)?;
    Ok(())
}

fn montecarlo_cmd(args: &MonteCarloArgs) -> Result<()> {
    let spec = read_spec(&args.design_spec, args.boot.seed)?;
    fs::create_dir_all(&args.output_dir)?;
    let layout = args.est.layout.spec();
    // Cohort range comes from the assignment window unless given.
    let (start, end) = spec.assignment.window().unwrap_or((2, spec.periods));
    let a_min = args.est.a_min.unwrap_or(start);
    let a_max = args.est.a_max.unwrap_or(end.min(spec.periods.saturating_sub(args.est.k_max)));
    let mut cfg = SsdidConfig::new(a_min, a_max, args.est.k_max).with_eta(EtaChoice::parse(&args.est.eta)?);
    if args.est.mu != "shares" {
        cfg.mu = io::read_mu_path(Path::new(&args.est.mu))?;
    }
    cfg.validate(spec.periods)?;
    let mut estimators = vec![
        McEstimator::Sequential { name: "SSDID".into(), config: cfg.clone() },
        McEstimator::Sequential { name: "SEQ_DID".into(), config: cfg.clone().with_eta(EtaChoice::Inf) },
    ];
    if args.oracle {
        estimators.push(McEstimator::SequentialOls { name: "SEQ_OLS".into() });
    }
    let bcfg = (args.boot.bootstrap > 0).then(|| bootstrap_config(&args.boot, spec.seed));
    let mc = MonteCarloConfig { reps: args.reps, layout, estimators, bootstrap: bcfg.clone() };
    let summary = monte_carlo(&spec, &mc)?;
    let dir = &args.output_dir;
    write_atomic(dir, "rmse.csv", |b| io::write_mc_rmse(b, &summary))?;
    write_atomic(dir, "coverage.csv", |b| io::write_mc_coverage(b, &summary))?;
    write_atomic(dir, "tstats.csv", |b| io::write_mc_tstats(b, &summary))?;
    let run = json!({
        "command": "montecarlo",
        "argv": argv(),
        "spec": to_json(&spec),
        "reps": args.reps,
        "layout": to_json(&layout),
        "config": to_json(&cfg),
        "bootstrap": bcfg.as_ref().map(to_json),
        "seed": spec.seed,
        "versions": versions(),
    });
    write_json(dir, "run.json", &run)?;
    Ok(())
}

fn oracle_check(args: &OracleArgs) -> Result<()> {
    let panel = load_panel(&args.input)?;
    fs::create_dir_all(&args.output_dir)?;
    let layout = args.layout.spec();
    let cohort = layout.build(&panel)?.aggregate(&panel)?;
    let factors = io::read_factors_path(&args.factors, &cohort)?;
    let t = cohort.periods();
    let cfg = match (args.a_star, args.t_star) {
        (Some(a_star), Some(t_star)) => OracleConfig { a_star, t_star },
        (Some(a_star), None) => OracleConfig { a_star, t_star: 2 },
        _ => match tightest_config(&factors, &cohort)? {
            Some(c) => OracleConfig { t_star: args.t_star.unwrap_or(c.t_star), ..c },
            None => {
                // Report the failure at the widest nominal range.
                let a_star = cohort
                    .rows()
                    .iter()
                    .filter_map(|r| r.adoption.period())
                    .filter(|&a| cohort.rows().iter().any(|c| c.adoption.is_after(a)))
                    .max()
                    .unwrap_or(t);
                OracleConfig { a_star, t_star: a_star.max(2) }
            }
        },
    };
    cfg.validate(t)?;
    let report = check_affine_hull(&factors, &cohort, &cfg)?;
    let dir = &args.output_dir;
    let mut run = json!({
        "command": "oracle-check",
        "argv": argv(),
        "input": args.input,
        "factors": args.factors,
        "layout": to_json(&layout),
        "oracle": to_json(&cfg),
        "affine_hull": to_json(&report),
        "tolerance": args.tolerance,
        "versions": versions(),
    });
    if !report.holds {
        write_json(dir, "run.json", &run)?;
        report.into_result()?;
        unreachable!();
    }
    let seq = run_sequential_ols(&cohort, &factors, &cfg)?;
    let joint = run_joint_ols(&cohort, &factors, &cfg)?;
    let mut max_dev = 0.0f64;
    let mut rows = Vec::new();
    for c in seq.sorted_cells() {
        let j = joint
            .cell(c.row, c.k)
            .ok_or_else(|| Error::InvalidConfig(format!("joint fit lacks cell {}:{}", c.label, c.k)))?;
        let dev = (c.tau_hat - j.tau_hat).abs();
        max_dev = max_dev.max(dev);
        rows.push((c.a, c.k, c.label.clone(), c.tau_hat, j.tau_hat, dev));
    }
    write_atomic(dir, "oracle.csv", |b| {
        let mut w = Vec::new();
        writeln!(w, "a,k,series,sequential,joint,abs_diff")?;
        for (a, k, label, s, jt, d) in &rows {
            writeln!(w, "{a},{k},{label},{s},{jt},{d}")?;
        }
        b.extend_from_slice(&w);
        Ok(())
    })?;
    run["max_deviation"] = json!(max_dev);
    run["equivalent"] = json!(max_dev <= args.tolerance);
    write_json(dir, "run.json", &run)?;
    if max_dev > args.tolerance {
        return Err(Error::InvalidConfig(format!(
            "sequential and joint fits differ by {max_dev:e} (tolerance {:e})",
            args.tolerance
        )));
    }
    Ok(())
}

fn error_code(e: &Error, command: &Command) -> &'static str {
    match (e, command) {
        (Error::InvalidConfig(m), Command::OracleCheck(_)) if m.starts_with("sequential and joint") => {
            "oracle.equivalence"
        }
        _ => e.code(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Estimate(a) => estimate(a),
        Command::Placebo(a) => placebo(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Montecarlo(a) => montecarlo_cmd(a),
        Command::OracleCheck(a) => oracle_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = json!({ "error": { "code": error_code(&e, &cli.command), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::from(1)
        }
    }
}
