//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mpdqte::bootstrap::{run_bootstrap, BootstrapConfig, BootstrapDraws, Method, SieveChoice};
use mpdqte::data::{format_real, load_csv, ColumnMap};
use mpdqte::design::{assign_treatment, match_pairs};
use mpdqte::inference::InferenceReport;
use mpdqte::quantile::{ate_estimate, diq_estimate, QuantileGrid};
use mpdqte::rng::stream;
use mpdqte::sieve::{cv_candidates, SieveSpec};
use mpdqte::simulation::{mc_rejection, DgpSpec, McConfig, Model};
use mpdqte::{Error, ErrorClass};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "mpdqte", version, about = "Quantile and average treatment effect inference for matched-pairs experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate effects in a dataset and report bootstrap inference.
    Analyze(AnalyzeArgs),
    /// Run a Monte Carlo rejection study on a simulated design.
    Simulate(SimulateArgs),
    /// Pair units on their covariates and optionally assign treatment.
    Match(MatchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Naive,
    NaivePair,
    Gradient,
    Ipw,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Naive => Method::NaiveMultiplier,
            MethodArg::NaivePair => Method::NaivePair,
            MethodArg::Gradient => Method::Gradient,
            MethodArg::Ipw => Method::IpwMultiplier,
        }
    }
}

#[derive(Debug, Args)]
pub struct Common {
    /// Seed of every random stream.
    #[arg(long)]
    pub seed: u64,
    /// Bootstrap replicates per analysis.
    #[arg(long, default_value_t = 5000)]
    pub b_reps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Comma-separated quantile indices.
    #[arg(long, value_delimiter = ',', conflicts_with = "tau_grid")]
    pub taus: Option<Vec<f64>>,
    /// Evenly spaced grid `lo:hi:step`.
    #[arg(long)]
    pub tau_grid: Option<String>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Worker threads; the output does not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value_t = MethodArg::Gradient)]
    pub method: MethodArg,
    #[arg(long)]
    pub y_col: String,
    #[arg(long)]
    pub a_col: String,
    /// Comma-separated covariate columns.
    #[arg(long, value_delimiter = ',', required = true)]
    pub x_cols: Vec<String>,
    #[arg(long)]
    pub pair_col: Option<String>,
    /// Propensity basis: `default`, `intercept`, `power:R` or `spline:R:k1/k2/...`,
    /// optionally followed by `+int` for pairwise interactions.
    #[arg(long, conflicts_with = "cv")]
    pub sieve: Option<String>,
    /// Choose the propensity basis by leave-one-out cross-validation.
    #[arg(long)]
    pub cv: bool,
    /// Also estimate the average treatment effect.
    #[arg(long)]
    pub ate: bool,
    /// Write the raw bootstrap draws (one row per replicate) to this file.
    #[arg(long)]
    pub draws_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Model name: m1, m2, m3 or m4.
    #[arg(long, default_value = "m1")]
    pub model: String,
    #[arg(long, default_value_t = 100)]
    pub n_pairs: usize,
    /// Monte Carlo repetitions.
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    /// Comma-separated bootstrap methods.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "naive,naive-pair,gradient,ipw")]
    pub method: Vec<MethodArg>,
    /// Comma-separated offsets from the truth; 0 gives size, others power.
    #[arg(long, value_delimiter = ',', default_value = "0,0.5")]
    pub delta: Vec<f64>,
    /// Also run the uniform band test on the 0.25..0.75 simulation grid
    /// (or on `--tau-grid` when given).
    #[arg(long)]
    pub band: bool,
    /// Also test the average treatment effect.
    #[arg(long)]
    pub ate: bool,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Comma-separated covariate columns.
    #[arg(long, value_delimiter = ',', required = true)]
    pub x_cols: Vec<String>,
    /// Seed of the within-pair coin flips (required unless `--no-assign`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Emit pairs only, without treatment assignment.
    #[arg(long)]
    pub no_assign: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e.class() {
            ErrorClass::Config => EXIT_CONFIG,
            ErrorClass::Data => EXIT_DATA,
            ErrorClass::Numerical => EXIT_NUMERICAL,
        };
        Self {
            code,
            message: format!("{}: {e}", e.kind()),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name) and runs the command, returning the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let workers = match &cli.command {
        Command::Analyze(a) => a.common.workers,
        Command::Simulate(s) => s.common.workers,
        Command::Match(m) => m.workers,
    };
    let pool = match workers {
        Some(0) => return Err(CliError::config("Config: --workers must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    }
    .map_err(|e| CliError::config(format!("Config: cannot start worker pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Simulate(s) => cmd_simulate(&s),
        Command::Match(m) => cmd_match(&m),
    })
}

fn parse_grid(common: &Common, default: QuantileGrid) -> CliResult<QuantileGrid> {
    if let Some(t) = &common.taus {
        return Ok(QuantileGrid::new(t.clone())?);
    }
    match &common.tau_grid {
        Some(spec) => parse_tau_grid(spec),
        None => Ok(default),
    }
}

fn parse_tau_grid(spec: &str) -> CliResult<QuantileGrid> {
    let parts: Vec<&str> = spec.split(':').collect();
    let nums: Option<Vec<f64>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
    match nums.as_deref() {
        Some(&[lo, hi, step]) if parts.len() == 3 => Ok(QuantileGrid::from_range(lo, hi, step)?),
        _ => Err(CliError::config(format!(
            "InvalidGrid: expected `lo:hi:step`, got `{spec}`"
        ))),
    }
}

/// Parses the `--sieve` grammar described on [`AnalyzeArgs::sieve`].
pub fn parse_sieve(text: &str, dim: usize) -> CliResult<SieveSpec> {
    let bad = || CliError::config(format!("BadSpec: cannot parse sieve `{text}`"));
    let (body, interactions) = match text.strip_suffix("+int") {
        Some(b) => (b, true),
        None => (text, false),
    };
    let parts: Vec<&str> = body.split(':').collect();
    let spec = match parts.as_slice() {
        ["default"] => SieveSpec::default_for(dim),
        ["intercept"] => SieveSpec::intercept_only(),
        ["power", r] => SieveSpec::power(r.parse().map_err(|_| bad())?),
        ["spline", r] => SieveSpec::spline(r.parse().map_err(|_| bad())?, Vec::new()),
        ["spline", r, knots] => {
            let levels = knots
                .split('/')
                .map(|k| k.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad())?;
            SieveSpec::spline(r.parse().map_err(|_| bad())?, levels)
        }
        _ => return Err(bad()),
    };
    Ok(if interactions { spec.with_interactions() } else { spec })
}

fn open_output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(Error::from)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: serde::Serialize>(value: &T, out: &mut dyn Write) -> CliResult<()> {
    serde_json::to_writer_pretty(&mut *out, value)
        .map_err(|e| CliError::from(Error::Io(io::Error::other(e))))?;
    writeln!(out).map_err(Error::from)?;
    Ok(())
}

fn write_draws(path: &Path, draws: &BootstrapDraws) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    let mut header: Vec<String> = draws.taus.iter().map(|t| format!("q({t})")).collect();
    if draws.ate.is_some() {
        header.push("ate".into());
    }
    w.write_record(&header).map_err(Error::from)?;
    for b in 0..draws.reps() {
        let mut row: Vec<String> = draws.row(b).iter().map(|&v| format_real(v)).collect();
        if let Some(a) = &draws.ate {
            row.push(format_real(a[b]));
        }
        w.write_record(&row).map_err(Error::from)?;
    }
    w.flush().map_err(Error::from)?;
    Ok(())
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> CliResult<()> {
    let method = Method::from(args.method);
    if method.needs_pairs() && args.pair_col.is_none() {
        return Err(CliError::config(format!(
            "MissingPairs: the {method} bootstrap needs pair identities (--pair-col)"
        )));
    }
    if args.ate && !method.supports_ate() {
        return Err(CliError::config(format!(
            "Config: the {method} bootstrap does not produce ATE draws"
        )));
    }
    let grid = parse_grid(&args.common, QuantileGrid::simulation_band_grid())?;
    let schema = ColumnMap {
        outcome: args.y_col.clone(),
        treatment: args.a_col.clone(),
        covariates: args.x_cols.clone(),
        pair: args.pair_col.clone(),
    };
    let sample = load_csv(&args.input, &schema)?;
    let dim = sample.covariate_dim();

    let mut config = BootstrapConfig::new(method, args.common.b_reps, args.common.seed, grid.clone());
    if method == Method::IpwMultiplier {
        config.sieve = Some(if args.cv {
            SieveChoice::CrossValidated(cv_candidates(dim))
        } else {
            SieveChoice::Fixed(match &args.sieve {
                Some(s) => parse_sieve(s, dim)?,
                None => SieveSpec::default_for(dim),
            })
        });
    }
    config.ate = args.ate;

    let estimates = diq_estimate(&sample, grid.taus())?;
    let draws = run_bootstrap(&sample, &config)?;
    let report = InferenceReport::build(
        &draws,
        &estimates,
        args.ate.then(|| ate_estimate(&sample)),
        args.common.alpha,
    )?;
    if let Some(p) = &args.draws_out {
        write_draws(p, &draws)?;
    }
    let mut out = open_output(args.common.out.as_deref())?;
    match args.common.format {
        Format::Csv => report.write_csv(&mut out)?,
        Format::Json => write_json(&report, &mut out)?,
    }
    out.flush().map_err(Error::from)?;
    Ok(())
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    let model = Model::parse(&args.model)
        .ok_or_else(|| CliError::config(format!("Config: unknown model `{}`", args.model)))?;
    let spec = DgpSpec::new(model, args.n_pairs);
    let methods: Vec<Method> = args.method.iter().map(|&m| m.into()).collect();
    let mut config = McConfig::new(spec, methods, args.reps, args.common.b_reps, args.common.seed);
    config.alpha = args.common.alpha;
    config.deltas = args.delta.clone();
    config.ate = args.ate;
    if let Some(t) = &args.common.taus {
        config.taus = QuantileGrid::new(t.clone())?.taus().to_vec();
        config.difference = match (config.taus.first(), config.taus.last()) {
            (Some(&a), Some(&b)) if config.taus.len() > 1 => Some((a, b)),
            _ => None,
        };
    }
    if args.band || args.common.tau_grid.is_some() {
        config.band_grid = Some(match &args.common.tau_grid {
            Some(g) => parse_tau_grid(g)?,
            None => QuantileGrid::simulation_band_grid(),
        });
    }
    let result = mc_rejection(&config)?;
    let mut out = open_output(args.common.out.as_deref())?;
    match args.common.format {
        Format::Csv => result.write_csv(&mut out)?,
        Format::Json => write_json(&result, &mut out)?,
    }
    out.flush().map_err(Error::from)?;
    Ok(())
}

/// Reads the covariate columns of a headed CSV file.
fn read_covariates(path: &Path, columns: &[String]) -> CliResult<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(Error::from)?;
    let headers = reader.headers().map_err(Error::from)?.clone();
    let idx = columns
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h == c)
                .ok_or_else(|| CliError::config(format!("Config: column `{c}` not found")))
        })
        .collect::<CliResult<Vec<usize>>>()?;
    let mut out = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(Error::from)?;
        let row = idx
            .iter()
            .zip(columns)
            .map(|(&i, name)| {
                record
                    .get(i)
                    .and_then(|v| v.parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        CliError::from(Error::Parse {
                            row: r + 1,
                            column: name.clone(),
                            message: format!("`{}` is not a finite number", record.get(i).unwrap_or("")),
                        })
                    })
            })
            .collect::<CliResult<Vec<f64>>>()?;
        out.push(row);
    }
    Ok(out)
}

pub fn cmd_match(args: &MatchArgs) -> CliResult<()> {
    let seed = match (args.seed, args.no_assign) {
        (Some(s), _) => Some(s),
        (None, true) => None,
        (None, false) => {
            return Err(CliError::config("Config: --seed is required unless --no-assign is given"))
        }
    };
    let covariates = read_covariates(&args.input, &args.x_cols)?;
    let pairs = match_pairs(&covariates)?;
    let mut pair_of = vec![0usize; covariates.len()];
    for (j, &(u, v)) in pairs.iter().enumerate() {
        pair_of[u] = j;
        pair_of[v] = j;
    }
    let treated = match (seed, args.no_assign) {
        (Some(s), false) => Some(assign_treatment(&pairs, covariates.len(), &mut stream(s, 0))),
        _ => None,
    };
    let mut w = csv::Writer::from_writer(open_output(args.out.as_deref())?);
    let write = |w: &mut csv::Writer<Box<dyn Write>>, rec: Vec<String>| -> CliResult<()> {
        w.write_record(rec).map_err(|e| CliError::from(Error::from(e)))
    };
    if treated.is_some() {
        write(&mut w, vec!["unit_id".into(), "pair_id".into(), "a".into()])?;
    } else {
        write(&mut w, vec!["unit_id".into(), "pair_id".into()])?;
    }
    for (i, &p) in pair_of.iter().enumerate() {
        let mut rec = vec![i.to_string(), p.to_string()];
        if let Some(t) = &treated {
            rec.push(if t[i] { "1" } else { "0" }.to_string());
        }
        write(&mut w, rec)?;
    }
    w.flush().map_err(Error::from)?;
    Ok(())
}
