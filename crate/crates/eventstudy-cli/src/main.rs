//! Command-line pipeline: `simulate`, `assign`, `estimate`, `diagnose`,
//! `distribution`.
//!
//! Every command resolves its configuration as flag > file > default,
//! rejects unknown config keys, writes a `config_echo.json` that reproduces
//! the run byte-identically, and exits with a stable code:
//!
//! * 0 — success
//! * 2 — configuration error
//! * 3 — data validation error
//! * 4 — estimator non-convergence
//! * 5 — degenerate model
//! * 6 — every diagnostic suite failed

use std::fs;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use eventstudy::design::{Mode, ModelSpec};
use eventstudy::dgp::{simulate_panel, DgpConfig};
use eventstudy::error::Error;
use eventstudy::estimator::FitOptions;
use eventstudy::geo::{read_centroids_csv, read_events_csv, write_centroids_csv, write_eventmap_csv, write_events_csv};
use eventstudy::panel::{
    ingest_students_csv, write_students_csv, Codebook, FilterConfig, ValidationConfig,
    BALANCE_COVARIATES,
};
use eventstudy::pipeline::{self, PreparedData};
use eventstudy::report;

#[derive(Parser)]
#[command(
    name = "eventstudy",
    version,
    about = "Staggered-adoption event-study pipeline: synthetic data, buffer assignment, \
             two-way fixed-effects estimation and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the effort-choice model.
    Simulate(SimulateArgs),
    /// Assign municipalities to their nearest opening event by buffer.
    Assign(AssignArgs),
    /// Run the estimation pipeline and write results.
    Estimate(AnalysisArgs),
    /// Run the pre-trend, placebo and balance diagnostic suites.
    Diagnose(AnalysisArgs),
    /// Tabulate the treatment-variable distribution.
    Distribution(AnalysisArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Generator configuration (JSON `DgpConfig`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Also print the truth path to stdout.
    #[arg(long)]
    stdout: bool,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct AssignArgs {
    #[arg(long)]
    centroids: PathBuf,
    #[arg(long)]
    events: PathBuf,
    /// JSON config with a `radii` array.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Buffer radii in km, comma separated.
    #[arg(long, value_delimiter = ',')]
    radii: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
    /// Also print the event map CSV to stdout.
    #[arg(long)]
    stdout: bool,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Pretrend,
    Semidynamic,
    Placebo,
    Balance,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Pretrend => Mode::Pretrend,
            ModeArg::Semidynamic => Mode::Semidynamic,
            ModeArg::Placebo => Mode::Placebo,
            ModeArg::Balance => Mode::Balance,
        }
    }
}

#[derive(Args)]
struct AnalysisArgs {
    #[arg(long)]
    students: PathBuf,
    #[arg(long)]
    centroids: PathBuf,
    #[arg(long)]
    events: PathBuf,
    /// Full run configuration (JSON `AnalysisConfig`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model specification (JSON `ModelSpec`); replaces the config's spec.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Categorical codebook (JSON); defaults to the built-in codebook.
    #[arg(long)]
    codebook: Option<PathBuf>,
    #[arg(long)]
    mode: Option<ModeArg>,
    /// Absorption tolerance override.
    #[arg(long)]
    tol: Option<f64>,
    /// Absorption sweep cap override.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Buffer radii in km, comma separated.
    #[arg(long, value_delimiter = ',')]
    radii: Option<Vec<f64>>,
    /// Balance covariates, comma separated (diagnose only).
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    #[arg(long)]
    out: PathBuf,
    /// Also print the primary JSON/CSV artifact to stdout.
    #[arg(long)]
    stdout: bool,
    #[arg(long)]
    threads: Option<usize>,
}

/// File-level configuration for estimate/diagnose/distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AnalysisConfig {
    spec: ModelSpec,
    fit: FitOptions,
    radii: Vec<f64>,
    filter: FilterConfig,
    validation: ValidationConfig,
    /// Cap on the relative time shown in text tables (estimation window is
    /// unaffected).
    report_k_max: Option<i32>,
    covariates: Vec<String>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            spec: ModelSpec::default(),
            fit: FitOptions::default(),
            radii: vec![10.0, 25.0, 50.0],
            filter: FilterConfig::default(),
            validation: ValidationConfig::default(),
            report_k_max: Some(5),
            covariates: BALANCE_COVARIATES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let threads = match &cli.command {
        Command::Simulate(a) => a.threads,
        Command::Assign(a) => a.threads,
        Command::Estimate(a) | Command::Diagnose(a) | Command::Distribution(a) => a.threads,
    };
    let run = || match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Assign(args) => cmd_assign(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Distribution(args) => cmd_distribution(args),
    };
    let result = match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .expect("thread pool");
            pool.install(run)
        }
        None => run(),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Json(_) | Error::Spec(_) => 2,
        Error::NonConvergence { .. } => 4,
        Error::DegenerateModel(_) => 5,
        _ => 3,
    }
}

fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let file = File::open(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
}

fn open_data(path: &Path) -> Result<BufReader<File>, Error> {
    let file = File::open(path)
        .map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))?;
    Ok(BufReader::new(file))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String, Error> {
    let text = format!("{}\n", serde_json::to_string_pretty(value)?);
    fs::write(path, &text)?;
    Ok(text)
}

fn out_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path)
        .map_err(|e| Error::Config(format!("cannot create output dir {}: {e}", path.display())))
}

fn cmd_simulate(args: SimulateArgs) -> Result<i32, Error> {
    let mut config: DgpConfig = match &args.config {
        Some(path) => load_config(path)?,
        None => DgpConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    out_dir(&args.out)?;
    let sim = simulate_panel(&config)?;

    let mut students = BufWriter::new(File::create(args.out.join("students.csv"))?);
    write_students_csv(&mut students, &sim.dataset)?;
    students.flush()?;
    let mut centroids = BufWriter::new(File::create(args.out.join("centroids.csv"))?);
    write_centroids_csv(&mut centroids, &sim.centroids)?;
    centroids.flush()?;
    let mut events = BufWriter::new(File::create(args.out.join("events.csv"))?);
    write_events_csv(&mut events, &sim.events)?;
    events.flush()?;
    let truth = write_json(&args.out.join("truth.json"), &sim.truth)?;
    write_json(&args.out.join("config_echo.json"), &config)?;
    eprintln!(
        "simulated {} records over {} municipalities; truth post effect {:.4}",
        sim.dataset.records.len(),
        config.n_municipalities,
        sim.truth.post_effect
    );
    if args.stdout {
        print!("{truth}");
    }
    Ok(0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AssignConfig {
    radii: Vec<f64>,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            radii: vec![10.0, 25.0, 50.0],
        }
    }
}

fn cmd_assign(args: AssignArgs) -> Result<i32, Error> {
    let mut config: AssignConfig = match &args.config {
        Some(path) => load_config(path)?,
        None => AssignConfig::default(),
    };
    if let Some(radii) = &args.radii {
        config.radii = radii.clone();
    }
    let centroids = read_centroids_csv(open_data(&args.centroids)?)?;
    let events = read_events_csv(open_data(&args.events)?)?;
    let map = eventstudy::geo::assign_events(&centroids, &events, &config.radii)?;

    out_dir(&args.out)?;
    let mut buf = Vec::new();
    write_eventmap_csv(&mut buf, &map)?;
    fs::write(args.out.join("eventmap.csv"), &buf)?;
    write_json(&args.out.join("config_echo.json"), &config)?;
    eprintln!(
        "assigned {} municipalities ({} in the analysis sample, {} in the ring)",
        map.len(),
        map.analysis_municipalities().len(),
        map.ring_municipalities().len()
    );
    if args.stdout {
        print!("{}", String::from_utf8_lossy(&buf));
    }
    Ok(0)
}

fn resolve_analysis(args: &AnalysisArgs) -> Result<(AnalysisConfig, Codebook), Error> {
    let mut config: AnalysisConfig = match &args.config {
        Some(path) => load_config(path)?,
        None => AnalysisConfig::default(),
    };
    if let Some(path) = &args.spec {
        config.spec = load_config(path)?;
    }
    if let Some(mode) = args.mode {
        config.spec.mode = mode.into();
    }
    if let Some(tol) = args.tol {
        config.fit.tol = tol;
    }
    if let Some(max_iter) = args.max_iter {
        config.fit.max_iter = max_iter;
    }
    if let Some(radii) = &args.radii {
        config.radii = radii.clone();
    }
    if let Some(covariates) = &args.covariates {
        config.covariates = covariates.clone();
    }
    let codebook = match &args.codebook {
        Some(path) => Codebook::from_json(open_data(path)?)?,
        None => Codebook::default(),
    };
    Ok((config, codebook))
}

fn prepare_inputs(
    args: &AnalysisArgs,
    config: &AnalysisConfig,
    codebook: &Codebook,
) -> Result<PreparedData, Error> {
    let (dataset, _) =
        ingest_students_csv(open_data(&args.students)?, codebook, &config.validation)?;
    let centroids = read_centroids_csv(open_data(&args.centroids)?)?;
    let events = read_events_csv(open_data(&args.events)?)?;
    pipeline::prepare(dataset, &centroids, &events, &config.radii, &config.filter)
}

fn cmd_estimate(args: AnalysisArgs) -> Result<i32, Error> {
    let (config, codebook) = resolve_analysis(&args)?;
    let prepared = prepare_inputs(&args, &config, &codebook)?;
    let fit = pipeline::estimate(&prepared, &config.spec, &config.fit)?;

    out_dir(&args.out)?;
    let fit_json = write_json(&args.out.join("fit.json"), &fit)?;
    write_json(&args.out.join("ingest_report.json"), &prepared.ingest)?;

    let table = report::effects_table_text(
        &fit,
        "OLS results - dependent variable: standardized grade",
        config.report_k_max,
        false,
    );
    fs::write(args.out.join("table.txt"), &table)?;

    let ks: Vec<i32> = fit
        .spec
        .as_ref()
        .map(|s| match s.mode {
            Mode::Pretrend => (s.k_min..=s.k_max)
                .filter(|k| !s.omitted_leads.contains(k))
                .collect(),
            _ => (s.baseline_below..=s.k_max).collect(),
        })
        .unwrap_or_default();
    let points = report::coefficient_plot(&fit, &ks, config.spec.confidence_level);
    let mut plot = Vec::new();
    report::write_plot_csv(&mut plot, &points)?;
    fs::write(args.out.join("effects_plot.csv"), &plot)?;
    write_json(&args.out.join("config_echo.json"), &config)?;

    eprintln!(
        "estimated {} coefficients on {} rows in {} clusters (adj R2 {:.3})",
        fit.coefficients.len(),
        fit.n_obs,
        fit.n_clusters,
        fit.adj_r2
    );
    if args.stdout {
        print!("{fit_json}");
    }
    Ok(0)
}

fn cmd_diagnose(args: AnalysisArgs) -> Result<i32, Error> {
    let (config, codebook) = resolve_analysis(&args)?;
    let prepared = prepare_inputs(&args, &config, &codebook)?;
    let diagnostics = pipeline::diagnose(&prepared, &config.spec, &config.covariates, &config.fit);

    out_dir(&args.out)?;
    let json = write_json(&args.out.join("diagnostics.json"), &diagnostics)?;
    if let Some(pretrend) = diagnostics.pretrend.as_ok() {
        let mut buf = Vec::new();
        report::write_plot_csv(&mut buf, &pretrend.coefficients)?;
        fs::write(args.out.join("pretrend_plot.csv"), &buf)?;
        eprintln!(
            "pretrend joint test: W = {:.3} (df {}), chi-square p = {:.4}{}",
            pretrend.wald.statistic,
            pretrend.wald.df,
            pretrend.wald.p_value,
            pretrend
                .wald
                .p_value_small_sample
                .map(|p| format!(", small-sample F p = {p:.4}"))
                .unwrap_or_default()
        );
    }
    if let Some(placebo) = diagnostics.placebo.as_ok() {
        let mut buf = Vec::new();
        report::write_plot_csv(&mut buf, &placebo.coefficients)?;
        fs::write(args.out.join("placebo_plot.csv"), &buf)?;
        for w in &placebo.warnings {
            eprintln!("warning: {w}");
        }
    }
    if let Some(balance) = diagnostics.balance.as_ok() {
        let table = report::balance_table_text(balance, config.spec.baseline_below, 5);
        fs::write(args.out.join("balance_table.txt"), &table)?;
    }
    write_json(&args.out.join("config_echo.json"), &config)?;

    for (name, ok) in [
        ("pretrend", diagnostics.pretrend.is_ok()),
        ("placebo", diagnostics.placebo.is_ok()),
        ("balance", diagnostics.balance.is_ok()),
    ] {
        eprintln!("suite {name}: {}", if ok { "ok" } else { "failed" });
    }
    if args.stdout {
        print!("{json}");
    }
    Ok(if diagnostics.any_suite_succeeded() { 0 } else { 6 })
}

fn cmd_distribution(args: AnalysisArgs) -> Result<i32, Error> {
    let (config, codebook) = resolve_analysis(&args)?;
    let prepared = prepare_inputs(&args, &config, &codebook)?;
    let dist = pipeline::distribution(&prepared)?;

    out_dir(&args.out)?;
    let mut csv_buf = Vec::new();
    report::write_distribution_csv(&mut csv_buf, &dist)?;
    fs::write(args.out.join("distribution.csv"), &csv_buf)?;
    let text = report::distribution_text(&dist);
    fs::write(args.out.join("distribution.txt"), &text)?;
    write_json(&args.out.join("config_echo.json"), &config)?;
    if args.stdout {
        print!("{}", String::from_utf8_lossy(&csv_buf));
    }
    Ok(0)
}
