use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use pdmp_core::config::{load_config, parse_config, RunConfig};
use pdmp_core::experiments::{
    clt_experiment, deterministic_pipeline, langevin_pipeline, langevin_vs_pdmp, lln_experiment, mean_cov_pipeline,
    residual_scaling_experiment, simulate_pipeline, trace_convergence_experiment, ExperimentOutput, RawTable,
};
use pdmp_core::output::{Manifest, OutputDir};
use pdmp_core::Error;

/// Simulation and limit analysis of compartmental hybrid PDMP models.
#[derive(Parser, Debug)]
#[command(name = "pdmp-limits", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Eq)]
enum Command {
    /// Simulate trajectories on the configured partition.
    Simulate(Common),
    /// Solve the deterministic limit.
    Deterministic(Common),
    /// Solve the Galerkin mean and covariance equations.
    MeanCov(Common),
    /// Simulate the Galerkin Langevin approximation.
    Langevin(Common),
    /// Law of large numbers along the refinement ladder.
    Lln(Common),
    /// Fluctuation statistics against the limiting covariance.
    Clt(Common),
    /// Convergence of the quadratic-variation trace.
    Trace(Common),
    /// Orders of the fluid-limit residual and the jump second moment.
    Residual(Common),
    /// PDMP, Langevin and covariance-ODE comparison.
    Compare(Common),
    /// Every experiment, each in its own subdirectory.
    All(Common),
}

#[derive(Args, Debug, Clone, PartialEq, Eq)]
struct Common {
    #[command(flatten)]
    source: Source,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override every replica count.
    #[arg(long)]
    replicas: Option<usize>,
    /// Worker threads (default: available parallelism).
    #[arg(long, env = "PDMP_LIMITS_THREADS")]
    threads: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Exit with code 3 when any acceptance criterion fails.
    #[arg(long = "assert")]
    assert: bool,
    /// Also dump the potential on the grid (simulate only).
    #[arg(long)]
    grid_snapshots: bool,
}

#[derive(Args, Debug, Clone, PartialEq, Eq)]
#[group(multiple = false)]
struct Source {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON config given on the command line.
    #[arg(long)]
    inline: Option<String>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Deterministic(_) => "deterministic",
            Command::MeanCov(_) => "mean-cov",
            Command::Langevin(_) => "langevin",
            Command::Lln(_) => "lln",
            Command::Clt(_) => "clt",
            Command::Trace(_) => "trace",
            Command::Residual(_) => "residual",
            Command::Compare(_) => "compare",
            Command::All(_) => "all",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Simulate(c)
            | Command::Deterministic(c)
            | Command::MeanCov(c)
            | Command::Langevin(c)
            | Command::Lln(c)
            | Command::Clt(c)
            | Command::Trace(c)
            | Command::Residual(c)
            | Command::Compare(c)
            | Command::All(c) => c,
        }
    }
}

enum Failure {
    Config(Error),
    Run(Error),
    Assert,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            // unreadable files and malformed JSON are config errors too
            ExitCode::from(if e.exit_code() == 1 { 2 } else { e.exit_code() as u8 })
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(Failure::Assert) => {
            eprintln!("error: acceptance criteria failed");
            ExitCode::from(3)
        }
    }
}

type Loaded = (RunConfig, Vec<String>, BTreeMap<String, String>);

fn load(common: &Common) -> Result<Loaded, Error> {
    let (mut config, mut warnings) = match (&common.source.config, &common.source.inline) {
        (Some(path), _) => load_config(path)?,
        (None, Some(text)) => parse_config(text)?,
        (None, None) => parse_config("{}")?,
    };
    let mut overrides = BTreeMap::new();
    if let Some(seed) = common.seed {
        config.seed = seed;
        overrides.insert("seed".into(), seed.to_string());
    }
    if let Some(r) = common.replicas {
        config.experiment.replicas = r;
        config.experiment.langevin_replicas = r;
        config.experiment.residual.replicas = r;
        config.experiment.batches = config.experiment.batches.min(r);
        overrides.insert("replicas".into(), r.to_string());
    }
    if let Some(out) = &common.output {
        config.output = out.display().to_string();
        overrides.insert("output".into(), out.display().to_string());
    }
    if let Some(t) = common.threads {
        overrides.insert("threads".into(), t.to_string());
    }
    if !overrides.is_empty() {
        warnings = config.validate()?;
    }
    Ok((config, warnings, overrides))
}

fn run(command: Command) -> Result<(), Failure> {
    let common = command.common().clone();
    let (config, warnings, overrides) = load(&common).map_err(Failure::Config)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = common.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| Failure::Config(Error::Invalid(format!("thread pool: {e}"))))?;
    pool.install(|| dispatch(&command, &common, &config, warnings, overrides))
}

fn dispatch(
    command: &Command,
    common: &Common,
    config: &RunConfig,
    warnings: Vec<String>,
    overrides: BTreeMap<String, String>,
) -> Result<(), Failure> {
    let start = Instant::now();
    let out = OutputDir::create(&config.output).map_err(Failure::Run)?;
    let mut manifest = Manifest::new(command.name(), config)?;
    manifest.warnings = warnings;
    manifest.overrides = overrides;
    let mut all_passed = true;
    match command {
        Command::Simulate(_) => {
            let replicas = common.replicas.unwrap_or(1);
            let (tables, summary) = simulate_pipeline(config, replicas, common.grid_snapshots)?;
            write_tables(&out, &tables)?;
            manifest.summary = summary;
        }
        Command::Deterministic(_) => {
            out.write_table(&deterministic_pipeline(config)?)?;
        }
        Command::MeanCov(_) => {
            let (mc, times) = mean_cov_pipeline(config)?;
            let mut mean = RawTable { name: "mean".into(), header: strings(&["t", "i", "mean"]), rows: Vec::new() };
            let mut cov = RawTable { name: "covariance".into(), header: strings(&["t", "i", "j", "cov"]), rows: Vec::new() };
            for &t in &times {
                let (m, c) = (mc.mean_at(t), mc.cov_at(t));
                for i in 0..m.len() {
                    mean.rows.push(vec![t, i as f64, m[i]]);
                    for j in 0..m.len() {
                        cov.rows.push(vec![t, i as f64, j as f64, c[(i, j)]]);
                    }
                }
            }
            write_tables(&out, &[mean, cov])?;
            out.write_json("covariance_header.json", &basis_layout(mc.n, mc.coupled))?;
        }
        Command::Langevin(_) => {
            let replicas = config.experiment.langevin_replicas;
            let (table, cov) = langevin_pipeline(config, replicas)?;
            let mut ct = RawTable { name: "covariance_t_end".into(), header: strings(&["i", "j", "cov"]), rows: Vec::new() };
            for i in 0..cov.nrows() {
                for j in 0..cov.ncols() {
                    ct.rows.push(vec![i as f64, j as f64, cov[(i, j)]]);
                }
            }
            write_tables(&out, &[table, ct])?;
            let n = config.solver.basis_size;
            out.write_json("covariance_header.json", &basis_layout(n, cov.nrows() == 2 * n))?;
        }
        Command::All(_) => {
            let mut summary = BTreeMap::new();
            for name in ["lln", "clt", "trace", "residual", "compare"] {
                let result = experiment(name, config)?;
                let sub = out.subdir(name)?;
                all_passed &= finish_experiment(&sub, &result)?;
                summary.insert(name.to_string(), if result.report.passed() { 1.0 } else { 0.0 });
                let mut m = manifest.clone();
                m.subcommand = name.into();
                m.wall_time_s = start.elapsed().as_secs_f64();
                sub.write_manifest(&m)?;
            }
            manifest.summary = summary;
        }
        _ => {
            let result = experiment(command.name(), config)?;
            all_passed = finish_experiment(&out, &result)?;
        }
    }
    manifest.wall_time_s = start.elapsed().as_secs_f64();
    out.write_manifest(&manifest)?;
    if common.assert && !all_passed {
        return Err(Failure::Assert);
    }
    Ok(())
}

fn experiment(name: &str, config: &RunConfig) -> Result<ExperimentOutput, Error> {
    match name {
        "lln" => lln_experiment(config),
        "clt" => clt_experiment(config),
        "trace" => trace_convergence_experiment(config),
        "residual" => residual_scaling_experiment(config),
        "compare" => langevin_vs_pdmp(config),
        _ => unreachable!("unknown experiment {name}"),
    }
}

fn finish_experiment(out: &OutputDir, result: &ExperimentOutput) -> Result<bool, Error> {
    write_tables(out, &result.tables)?;
    out.write_report(&result.report)?;
    for c in &result.report.criteria {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        let budget = if c.budget { " [budget]" } else { "" };
        println!("{verdict} {}/{}{budget}: {}", result.report.experiment, c.name, c.detail);
    }
    Ok(result.report.passed())
}

fn write_tables(out: &OutputDir, tables: &[RawTable]) -> Result<(), Error> {
    for t in tables {
        out.write_table(t)?;
    }
    Ok(())
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn basis_layout(n: usize, coupled: bool) -> serde_json::Value {
    let mut rows = Vec::new();
    for i in 0..n {
        rows.push(serde_json::json!({"index": i, "field": if coupled { "u" } else { "p" }, "mode": i + 1}));
    }
    if coupled {
        for i in 0..n {
            rows.push(serde_json::json!({"index": n + i, "field": "p", "mode": i + 1}));
        }
    }
    serde_json::json!({"basis": "sqrt(2/l) sin(i pi x / l)", "indices": rows})
}
