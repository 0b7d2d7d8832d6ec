// SPDX-License-Identifier: Apache-2.0

//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on numerical or I/O failure during a run,
//! 2 on invalid arguments. Data goes to stdout or `--output`; progress and
//! diagnostics go to stderr.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::amp::{amp_run, AmpConfig, InitMode};
use crate::error::{invalid, Error, Result};
use crate::model::{Instance, PriorFamily, PriorSpec, MAX_DIMENSION};
use crate::parallel;
use crate::phase::{find_transitions, scan_to_csv, Axis, PhasePoint, TransitionSet};
use crate::state_evolution::{se_fixed_point, se_trajectory, FixedPointReport, SeConfig};

/// Environment variable holding the default worker count.
pub const THREADS_ENV: &str = "SPCA_THREADS";

#[derive(Debug, Parser)]
#[command(name = "spca", version, about = "AMP and state evolution for rank-r sparse PCA")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run AMP on one synthetic instance.
    Amp(AmpArgs),
    /// Iterate the state evolution to its fixed point(s).
    Se(SeArgs),
    /// Locate the phase transitions along Δ or ρ.
    Transitions(TransitionArgs),
    /// Scan a (ρ, Δ) grid and write a resumable CSV.
    Scan(ScanArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InitChoice {
    Uninformative,
    Informative,
    Both,
}

impl InitChoice {
    fn modes(self) -> Vec<InitMode> {
        match self {
            InitChoice::Uninformative => vec![InitMode::Uninformative],
            InitChoice::Informative => vec![InitMode::Informative],
            InitChoice::Both => vec![InitMode::Uninformative, InitMode::Informative],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AxisChoice {
    Delta,
    Rho,
}

#[derive(Debug, Args)]
struct PriorArgs {
    /// Prior family: gb, spike or rademacher.
    #[arg(long, default_value = "gb")]
    family: PriorFamily,
    /// Density of nonzero components.
    #[arg(long, default_value_t = 0.1)]
    rho: f64,
    /// Rank r (discrete families require 1).
    #[arg(long, default_value_t = 1)]
    rank: usize,
}

impl PriorArgs {
    fn prior(&self) -> Result<PriorSpec> {
        PriorSpec::new(self.family, self.rho, self.rank)
    }
}

#[derive(Debug, Args)]
struct OutputArgs {
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Write data here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AmpArgs {
    #[command(flatten)]
    prior: PriorArgs,
    #[arg(long, default_value_t = 4000)]
    n: usize,
    #[arg(long)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "uninformative")]
    init: InitChoice,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 2000)]
    max_iter: usize,
    #[arg(long, default_value_t = 0.0)]
    damping: f64,
    /// Drop the Onsager correction (diagnostic only).
    #[arg(long)]
    no_onsager: bool,
    /// Also write the generated instance in the binary instance format.
    #[arg(long)]
    dump_instance: Option<PathBuf>,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Debug, Args)]
struct SeArgs {
    #[command(flatten)]
    prior: PriorArgs,
    #[arg(long)]
    delta: f64,
    #[arg(long, value_enum, default_value = "both")]
    init: InitChoice,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 100_000)]
    max_iter: usize,
    /// Stop on the Aitken-extrapolated change.
    #[arg(long)]
    aitken: bool,
    /// Number of trajectory iterates to print.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Debug, Args)]
struct TransitionArgs {
    #[command(flatten)]
    prior: PriorArgs,
    #[arg(long, value_enum, default_value = "delta")]
    axis: AxisChoice,
    /// Noise level held fixed on the ρ axis.
    #[arg(long)]
    delta: Option<f64>,
    /// Lower end of the search range.
    #[arg(long)]
    lo: Option<f64>,
    /// Upper end of the search range.
    #[arg(long)]
    hi: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Debug, Args)]
struct ScanArgs {
    #[arg(long, default_value = "gb")]
    family: PriorFamily,
    #[arg(long, default_value_t = 1)]
    rank: usize,
    /// ρ values: `a,b,c`, `lin:lo:hi:n` or `log:lo:hi:n`.
    #[arg(long)]
    rho_grid: String,
    /// Δ values, same syntax as `--rho-grid`.
    #[arg(long)]
    delta_grid: String,
    /// CSV file; existing rows are kept and skipped.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Write a gnuplot script rendering the scan.
    #[arg(long)]
    plot_script: Option<PathBuf>,
    #[arg(long, default_value_t = 100_000)]
    max_iter: usize,
}

/// Parses `a,b,c`, `lin:lo:hi:n` or `log:lo:hi:n`.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| invalid(format!("'{s}' is not a number")))
    };
    let parts: Vec<&str> = spec.split(':').collect();
    let grid = match parts.as_slice() {
        [kind @ ("lin" | "log"), lo, hi, n] => {
            let (lo, hi) = (num(lo)?, num(hi)?);
            let n: usize = n
                .trim()
                .parse()
                .map_err(|_| invalid(format!("'{n}' is not a point count")))?;
            if n == 0 || !(lo < hi) || (*kind == "log" && !(lo > 0.0)) {
                return Err(invalid(format!("bad grid '{spec}'")));
            }
            if n == 1 {
                vec![lo]
            } else {
                let t = |k: usize| k as f64 / (n - 1) as f64;
                let mut g: Vec<f64> = if *kind == "lin" {
                    (0..n).map(|k| lo + (hi - lo) * t(k)).collect()
                } else {
                    (0..n).map(|k| (lo.ln() + (hi.ln() - lo.ln()) * t(k)).exp()).collect()
                };
                g[0] = lo;
                g[n - 1] = hi;
                g
            }
        }
        [list] => list.split(',').map(num).collect::<Result<_>>()?,
        _ => return Err(invalid(format!("bad grid '{spec}'"))),
    };
    if grid.iter().any(|v| !v.is_finite()) || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(invalid(format!("grid '{spec}' must be finite and strictly increasing")));
    }
    Ok(grid)
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(invalid(format!("delta must be positive, got {delta}")));
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(invalid(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

/// Opens the data sink before any computation so a bad path fails fast.
fn open_sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

/// One finite-N run as written by `amp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmpRecord {
    pub family: PriorFamily,
    pub n: usize,
    pub r: usize,
    pub rho: f64,
    pub delta: f64,
    pub seed: u64,
    pub init: InitMode,
    pub iterations: usize,
    pub converged: bool,
    pub mse: f64,
    pub phi: f64,
    pub q_trajectory: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct AmpCsvRow<'a> {
    family: &'a str,
    n: usize,
    r: usize,
    rho: f64,
    delta: f64,
    seed: u64,
    init: InitMode,
    iterations: usize,
    converged: bool,
    mse: f64,
    phi: f64,
    q_trajectory: String,
}

/// One state-evolution run as written by `se`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeRecord {
    #[serde(flatten)]
    pub report: FixedPointReport,
    pub trajectory: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct TransitionCsvRow {
    family: &'static str,
    axis: String,
    fixed: f64,
    r: usize,
    delta_u: Option<f64>,
    delta_amp: Option<f64>,
    delta_c: Option<f64>,
    delta_2nd: Option<f64>,
    order: String,
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter(_) | Error::InvalidBracket { .. } => Failure::Usage(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

fn sink_error(e: Error) -> Failure {
    Failure::Usage(format!("cannot open output: {e}"))
}

fn run_amp(a: &AmpArgs) -> std::result::Result<(), Failure> {
    let prior = a.prior.prior()?;
    check_delta(a.delta)?;
    if a.n < 2 || a.n > MAX_DIMENSION {
        return Err(invalid(format!("n must lie in [2, {MAX_DIMENSION}], got {}", a.n)).into());
    }
    let config = AmpConfig {
        tol: a.tol,
        max_iter: a.max_iter,
        damping: a.damping,
        onsager: !a.no_onsager,
    };
    config.validate()?;
    let mut sink = open_sink(a.out.output.as_deref()).map_err(sink_error)?;
    let dump = match &a.dump_instance {
        Some(p) => Some(File::create(p).map_err(|e| sink_error(e.into()))?),
        None => None,
    };

    eprintln!("generating instance: n={} delta={} seed={}", a.n, a.delta, a.seed);
    let instance = Instance::generate(&prior, a.n, a.delta, a.seed)?;
    if let Some(f) = dump {
        instance.write_to(BufWriter::new(f))?;
    }
    let mut records = Vec::new();
    for mode in a.init.modes() {
        eprintln!("running AMP ({mode})");
        let rep = amp_run(&instance, &prior, mode, &config)?;
        records.push(AmpRecord {
            family: prior.family(),
            n: a.n,
            r: prior.rank(),
            rho: prior.rho(),
            delta: a.delta,
            seed: a.seed,
            init: mode,
            iterations: rep.iterations,
            converged: rep.converged,
            mse: rep.mse,
            phi: rep.phi,
            q_trajectory: rep.q_trajectory,
        });
    }
    match a.out.format {
        Format::Json => write_json(&mut sink, &records)?,
        Format::Csv => {
            let mut wr = csv::Writer::from_writer(&mut sink);
            for r in &records {
                wr.serialize(AmpCsvRow {
                    family: r.family.short_name(),
                    n: r.n,
                    r: r.r,
                    rho: r.rho,
                    delta: r.delta,
                    seed: r.seed,
                    init: r.init,
                    iterations: r.iterations,
                    converged: r.converged,
                    mse: r.mse,
                    phi: r.phi,
                    q_trajectory: r
                        .q_trajectory
                        .iter()
                        .map(|q| q.to_string())
                        .collect::<Vec<_>>()
                        .join(";"),
                })
                .map_err(Error::from)?;
            }
            wr.flush()?;
        }
    }
    sink.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(sink: &mut dyn Write, records: &[T]) -> std::result::Result<(), Failure> {
    if records.len() == 1 {
        serde_json::to_writer_pretty(&mut *sink, &records[0]).map_err(Error::from)?;
    } else {
        serde_json::to_writer_pretty(&mut *sink, records).map_err(Error::from)?;
    }
    writeln!(sink)?;
    Ok(())
}

fn run_se(a: &SeArgs) -> std::result::Result<(), Failure> {
    let prior = a.prior.prior()?;
    check_delta(a.delta)?;
    check_positive("tol", a.tol)?;
    if a.max_iter == 0 {
        return Err(invalid("max-iter must be at least 1").into());
    }
    let config = SeConfig {
        tol: a.tol,
        max_iter: a.max_iter,
        aitken: a.aitken,
        ..SeConfig::default()
    };
    let mut sink = open_sink(a.out.output.as_deref()).map_err(sink_error)?;
    let mut records = Vec::new();
    for mode in a.init.modes() {
        eprintln!("state evolution ({mode})");
        let report = se_fixed_point(&prior, a.delta, mode, &config)?;
        let q0 = match mode {
            InitMode::Uninformative => config.epsilon,
            InitMode::Informative => prior.component_second_moment(),
        };
        let steps = a.steps.min(report.iterations);
        let trajectory = se_trajectory(&prior, a.delta, q0, steps)?;
        records.push(SeRecord { report, trajectory });
    }
    match a.out.format {
        Format::Json => write_json(&mut sink, &records)?,
        Format::Csv => {
            let mut wr = csv::Writer::from_writer(&mut sink);
            for r in &records {
                wr.serialize(&r.report).map_err(Error::from)?;
            }
            wr.flush()?;
        }
    }
    sink.flush()?;
    Ok(())
}

fn run_transitions(a: &TransitionArgs) -> std::result::Result<(), Failure> {
    check_positive("tol", a.tol)?;
    let axis = match a.axis {
        AxisChoice::Delta => Axis::Delta {
            prior: a.prior.prior()?,
        },
        AxisChoice::Rho => {
            let delta = a.delta.ok_or_else(|| invalid("--axis rho requires --delta"))?;
            check_delta(delta)?;
            // Validates family/rank independently of the swept density.
            PriorSpec::new(a.prior.family, 0.5, a.prior.rank)?;
            Axis::Rho {
                family: a.prior.family,
                rank: a.prior.rank,
                delta,
            }
        }
    };
    let range = match (a.lo, a.hi) {
        (None, None) => None,
        (lo, hi) => {
            let (dlo, dhi) = axis.default_range();
            let (lo, hi) = (lo.unwrap_or(dlo), hi.unwrap_or(dhi));
            if !(lo > 0.0 && hi > lo) {
                return Err(invalid(format!("need 0 < lo < hi, got ({lo}, {hi})")).into());
            }
            if matches!(axis, Axis::Rho { .. }) && hi > 1.0 {
                return Err(invalid("rho range must lie in (0, 1]").into());
            }
            Some((lo, hi))
        }
    };
    let mut sink = open_sink(a.out.output.as_deref()).map_err(sink_error)?;
    eprintln!("locating transitions along {}", axis.name());
    let set = find_transitions(&axis, range, a.tol, &SeConfig::default())?;
    write_transitions(&mut sink, &set, a.out.format)?;
    sink.flush()?;
    Ok(())
}

fn write_transitions(sink: &mut dyn Write, set: &TransitionSet, format: Format) -> std::result::Result<(), Failure> {
    match format {
        Format::Json => write_json(sink, std::slice::from_ref(set)),
        Format::Csv => {
            let mut wr = csv::Writer::from_writer(sink);
            wr.serialize(TransitionCsvRow {
                family: set.family.short_name(),
                axis: set.axis.clone(),
                fixed: set.fixed,
                r: set.r,
                delta_u: set.delta_u,
                delta_amp: set.delta_amp,
                delta_c: set.delta_c,
                delta_2nd: set.delta_2nd,
                order: set.order.to_string(),
            })
            .map_err(Error::from)?;
            wr.flush()?;
            Ok(())
        }
    }
}

/// Gnuplot script for a scan CSV: MSE against Δ when a single density was
/// scanned, otherwise the labeled (Δ, ρ) plane.
pub fn plot_script(csv_path: &Path, rho_grid: &[f64]) -> String {
    let file = csv_path.display();
    let mut s = String::new();
    s.push_str("set datafile separator ','\nset key outside\n");
    if rho_grid.len() == 1 {
        s.push_str(&format!(
            "set xlabel 'Delta'\nset ylabel 'MSE'\n\
             plot '{file}' every ::1 using 3:7 with linespoints title 'uninformative', \\\n     \
             '{file}' every ::1 using 3:8 with linespoints title 'informative'\n"
        ));
    } else {
        s.push_str(&format!(
            "set xlabel 'Delta'\nset ylabel 'rho'\nset logscale x\n\
             labels = \"undetectable amp_optimal hard single_phase\"\n\
             plot for [L in labels] '{file}' every ::1 \
             using 3:(strcol(11) eq L ? $2 : 1/0) with points pt 7 title L\n"
        ));
    }
    s
}

fn run_scan(a: &ScanArgs) -> std::result::Result<(), Failure> {
    let rho_grid = parse_grid(&a.rho_grid)?;
    let delta_grid = parse_grid(&a.delta_grid)?;
    for &rho in &rho_grid {
        PriorSpec::new(a.family, rho, a.rank)?;
    }
    for &d in &delta_grid {
        check_delta(d)?;
    }
    if a.max_iter == 0 {
        return Err(invalid("max-iter must be at least 1").into());
    }
    let config = SeConfig {
        max_iter: a.max_iter,
        ..SeConfig::default()
    };
    let total = rho_grid.len();
    let progress = |done: usize, total: usize| eprintln!("scan: {done}/{total} density rows");
    match &a.output {
        Some(path) => {
            probe_append(path).map_err(|e| sink_error(e.into()))?;
            scan_to_csv(path, a.family, &rho_grid, &delta_grid, a.rank, &config, progress)?;
            if let Some(script) = &a.plot_script {
                std::fs::write(script, plot_script(path, &rho_grid))?;
            }
        }
        None => {
            let mut out = csv::Writer::from_writer(io::stdout());
            for (k, &rho) in rho_grid.iter().enumerate() {
                let rows: Vec<PhasePoint> =
                    crate::phase::scan_phase_diagram(a.family, &[rho], &delta_grid, a.rank, &config)?;
                for row in &rows {
                    out.serialize(row).map_err(Error::from)?;
                }
                out.flush()?;
                progress(k + 1, total);
            }
            if let Some(script) = &a.plot_script {
                std::fs::write(script, plot_script(Path::new("scan.csv"), &rho_grid))?;
            }
        }
    }
    Ok(())
}

/// Checks that `path` can be opened for appending without truncating it.
fn probe_append(path: &Path) -> io::Result<()> {
    std::fs::OpenOptions::new().create(true).append(true).open(path).map(|_| ())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if cli.threads == Some(0) {
        eprintln!("error: --threads must be at least 1");
        return 2;
    }
    let result = parallel::with_threads(cli.threads, || match &cli.command {
        Command::Amp(a) => run_amp(a),
        Command::Se(a) => run_se(a),
        Command::Transitions(a) => run_transitions(a),
        Command::Scan(a) => run_scan(a),
    });
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun with --help for usage.");
            2
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}
