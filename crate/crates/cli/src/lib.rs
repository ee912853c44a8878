//! Command-line front end for the `renyi-mix` library.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use renyi_mix::chain::{AtomicDistribution, PropagationSettings, Resolution, TailPolicy};
use renyi_mix::levy::{self, FGrid, Quantity};
use renyi_mix::mixing::{MixingConfig, MixingReport};
use renyi_mix::report;
use renyi_mix::{Bounds, Error, ExpansionParams};

pub mod verify;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const RESOURCE: i32 = 3;
    pub const VERIFICATION: i32 = 4;
}

#[derive(Debug, Parser)]
#[command(
    name = "renyi-mix",
    version,
    about = "Renyi-type continued fractions: digits, chain laws, convergence bounds and mixing coefficients"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Digit expansion of a point and its reconstruction.
    Digits(DigitsArgs),
    /// Law of the past-state chain after n steps, with sampled G and F curves.
    Distribution(DistributionArgs),
    /// Observed cdf distances against the geometric convergence bounds.
    Bounds(BoundsArgs),
    /// Exact, estimated and bounded mixing coefficients.
    Mixing(MixingArgs),
    /// Run every invariant suite and print a JSON report.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct Output {
    /// Output file (standard output when absent).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct DigitsArgs {
    #[arg(long = "N", default_value_t = 2)]
    pub n: u32,
    #[arg(long, allow_negative_numbers = true)]
    pub x: f64,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
}

#[derive(Debug, Args)]
pub struct PropagationArgs {
    #[arg(long, default_value_t = 400)]
    pub cap: u64,
    #[arg(long, default_value_t = 1e-12)]
    pub weight_floor: f64,
    #[arg(long, default_value_t = 1e-13)]
    pub merge_tol: f64,
    /// Grid width once the exact atom count would exceed --exact-limit.
    #[arg(long, default_value_t = 1e-5)]
    pub bin_width: f64,
    #[arg(long, default_value_t = 1_000_000)]
    pub exact_limit: usize,
    /// Keep digits above the cap as interval atoms of at most this image width
    /// instead of discarding their mass.
    #[arg(long)]
    pub lump_width: Option<f64>,
    #[arg(long, default_value_t = 50_000_000)]
    pub max_atoms: usize,
}

impl PropagationArgs {
    pub fn settings(&self) -> PropagationSettings {
        PropagationSettings {
            digit_cap: self.cap,
            weight_floor: self.weight_floor,
            merge_tol: self.merge_tol,
            resolution: Resolution::Auto {
                width: self.bin_width,
                exact_limit: self.exact_limit,
            },
            tail: match self.lump_width {
                Some(width) => TailPolicy::Lump { width },
                None => TailPolicy::Discard,
            },
            max_atoms: self.max_atoms,
        }
    }
}

#[derive(Debug, Args)]
pub struct DistributionArgs {
    #[arg(long = "N", default_value_t = 2)]
    pub n: u32,
    #[arg(long, default_value_t = 0.0)]
    pub t: f64,
    /// Number of chain steps.
    #[arg(long = "n", default_value_t = 1)]
    pub level: u32,
    #[command(flatten)]
    pub propagation: PropagationArgs,
    /// Points of the sampled G and F curves.
    #[arg(long, default_value_t = 101)]
    pub curve_points: usize,
    /// CSV file for the sampled curves (CSV output only).
    #[arg(long)]
    pub curves: Option<PathBuf>,
    #[command(flatten)]
    pub out: Output,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[arg(long = "N", default_value_t = 2)]
    pub n: u32,
    #[arg(long, default_value_t = 5)]
    pub nmax: u32,
    /// Number of equally spaced starting points t in [0, 1].
    #[arg(long, default_value_t = 21)]
    pub t_points: usize,
    #[arg(long, default_value_t = 10_000)]
    pub x_points: usize,
    #[arg(long, default_value_t = 400)]
    pub cap: u64,
    #[arg(long, default_value_t = 1e-12)]
    pub weight_floor: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub bin_width: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub lump_width: f64,
    #[command(flatten)]
    pub out: Output,
}

impl BoundsArgs {
    pub fn settings(&self) -> PropagationSettings {
        PropagationSettings {
            digit_cap: self.cap,
            weight_floor: self.weight_floor,
            resolution: Resolution::Auto {
                width: self.bin_width,
                exact_limit: 1_000_000,
            },
            tail: TailPolicy::Lump {
                width: self.lump_width,
            },
            ..Default::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct MixingArgs {
    #[arg(long = "N", default_value_t = 2)]
    pub n: u32,
    #[arg(long, default_value_t = 6)]
    pub nmax: u32,
    /// Points per axis of the (t, x) lattice; 0 skips the estimates.
    #[arg(long, default_value_t = 101)]
    pub grid: usize,
    /// Largest n for the lattice estimates.
    #[arg(long, default_value_t = 3)]
    pub estimate_nmax: u32,
    #[arg(long, default_value_t = 400)]
    pub cap: u64,
    /// Digit cap of the brute-force cylinder estimates; 0 skips them.
    #[arg(long, default_value_t = 40)]
    pub bruteforce_cap: u64,
    #[command(flatten)]
    pub out: Output,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Corrupt the named suite (for testing the failure path).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::AtomBudget { .. } | Error::QuadratureBudget { .. } | Error::Underflow { .. } => {
                exit::RESOURCE
            }
            _ => exit::USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(e: io::Error) -> Failure {
    Failure {
        code: exit::RESOURCE,
        message: e.to_string(),
    }
}

fn open_output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(io_failure)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

/// Run a parsed command; returns the exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Digits(a) => cmd_digits(&a),
        Command::Distribution(a) => cmd_distribution(&a),
        Command::Bounds(a) => cmd_bounds(&a),
        Command::Mixing(a) => cmd_mixing(&a),
        Command::Verify(a) => cmd_verify(&a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn cmd_digits(a: &DigitsArgs) -> Result<i32, Failure> {
    let params = ExpansionParams::new(a.n)?;
    let e = params.digits_of(a.x, a.count)?;
    let digits: Vec<String> = e.block.digits().iter().map(u64::to_string).collect();
    let back = e.block.eval_forward(e.remainder);
    let mut out = io::stdout().lock();
    let w = |out: &mut io::StdoutLock, s: String| writeln!(out, "{s}").map_err(io_failure);
    w(&mut out, digits.join(" "))?;
    w(
        &mut out,
        format!("reconstruction={}", report::fmt_f64(back)),
    )?;
    w(
        &mut out,
        format!("round_trip_error={}", report::fmt_f64((back - a.x).abs())),
    )?;
    if e.truncated {
        w(&mut out, "truncated=true".to_string())?;
    }
    Ok(exit::OK)
}

/// Sampled enclosures of `G` and `F` on a uniform grid.
#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub x: f64,
    pub g: Bounds,
    pub f: Bounds,
}

pub fn sample_curves(dist: &AtomicDistribution, points: usize) -> Vec<CurvePoint> {
    levy::uniform_grid(points)
        .into_iter()
        .map(|x| CurvePoint {
            x,
            g: dist.g_cdf(x),
            f: dist.f_cdf(x),
        })
        .collect()
}

pub fn cmd_distribution(a: &DistributionArgs) -> Result<i32, Failure> {
    let params = ExpansionParams::new(a.n)?;
    let settings = a.propagation.settings();
    settings.validate(params)?;
    let dist = AtomicDistribution::at_level(params, a.t, a.level, &settings)?;
    let curves = sample_curves(&dist, a.curve_points);
    let mut out = open_output(&a.out.output)?;
    match a.out.format {
        Format::Csv => {
            report::write_distribution_csv(&dist, &mut out)?;
            if let Some(path) = &a.curves {
                let mut w = csv_writer(path)?;
                w.write_record(["x", "g_lo", "g_hi", "f_lo", "f_hi"])
                    .map_err(csv_failure)?;
                for c in &curves {
                    w.write_record(
                        [c.x, c.g.lower, c.g.upper, c.f.lower, c.f.upper].map(report::fmt_f64),
                    )
                    .map_err(csv_failure)?;
                }
                w.flush().map_err(io_failure)?;
            }
        }
        Format::Json => {
            #[derive(Serialize)]
            struct Doc<'a> {
                distribution: &'a AtomicDistribution,
                curves: &'a [CurvePoint],
            }
            report::write_json(
                &Doc {
                    distribution: &dist,
                    curves: &curves,
                },
                &mut out,
            )?;
        }
    }
    out.flush().map_err(io_failure)?;
    Ok(exit::OK)
}

fn csv_writer(path: &PathBuf) -> Result<csv::Writer<File>, Failure> {
    csv::Writer::from_path(path).map_err(csv_failure)
}

fn csv_failure(e: csv::Error) -> Failure {
    Failure {
        code: exit::RESOURCE,
        message: e.to_string(),
    }
}

pub fn cmd_bounds(a: &BoundsArgs) -> Result<i32, Failure> {
    let params = ExpansionParams::new(a.n)?;
    if a.t_points < 1 || a.x_points < 2 {
        return Err(Error::Config("grids need at least 2 points".into()).into());
    }
    let grid = FGrid {
        points: a.x_points,
        ..Default::default()
    };
    let rep = levy::verify_geometric_bounds(
        params,
        &levy::uniform_grid(a.t_points),
        a.nmax,
        &a.settings(),
        grid,
    )?;
    let mut out = open_output(&a.out.output)?;
    match a.out.format {
        Format::Csv => report::write_bounds_csv(&rep, &mut out)?,
        Format::Json => report::write_json(&rep, &mut out)?,
    }
    out.flush().map_err(io_failure)?;
    let bad = rep.violations(Quantity::G) + rep.violations(Quantity::F);
    if bad > 0 {
        eprintln!(
            "{bad} bound violation(s): G {}, F {}",
            rep.violations(Quantity::G),
            rep.violations(Quantity::F)
        );
        return Ok(exit::VERIFICATION);
    }
    Ok(exit::OK)
}

pub fn cmd_mixing(a: &MixingArgs) -> Result<i32, Failure> {
    let params = ExpansionParams::new(a.n)?;
    if a.grid == 1 {
        return Err(Error::Config("grids need at least 2 points".into()).into());
    }
    let cfg = MixingConfig {
        n_max: a.nmax,
        grid: (a.grid >= 2).then_some(a.grid),
        estimate_n_max: a.estimate_nmax,
        settings: PropagationSettings {
            digit_cap: a.cap,
            tail: TailPolicy::Lump { width: 1e-4 },
            resolution: Resolution::Auto {
                width: 1e-4,
                exact_limit: 1_000_000,
            },
            ..Default::default()
        },
        bruteforce_cap: (a.bruteforce_cap > 0).then_some(a.bruteforce_cap),
    };
    let rep = MixingReport::build(params, &cfg)?;
    let mut out = open_output(&a.out.output)?;
    match a.out.format {
        Format::Csv => report::write_mixing_csv(&rep, &mut out)?,
        Format::Json => report::write_json(&rep, &mut out)?,
    }
    out.flush().map_err(io_failure)?;
    let bad = rep.dominance_violations();
    if !bad.is_empty() {
        eprintln!("{} estimate(s) exceed a known value or bound", bad.len());
        return Ok(exit::VERIFICATION);
    }
    Ok(exit::OK)
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<i32, Failure> {
    if let Some(s) = &a.inject_fault {
        if !verify::SUITES.contains(&s.as_str()) {
            return Err(Error::Config(format!("unknown suite `{s}`")).into());
        }
    }
    let results = verify::run_all(a.seed, a.inject_fault.as_deref())?;
    let mut out = open_output(&a.output)?;
    report::write_json(&results, &mut out)?;
    out.flush().map_err(io_failure)?;
    let failed = results
        .iter()
        .filter(|r| r.status == verify::Status::Fail)
        .count();
    Ok(if failed == 0 {
        exit::OK
    } else {
        exit::VERIFICATION
    })
}

/// Apply `RENYI_MIX_THREADS` to the global thread pool.
pub fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("RENYI_MIX_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| Failure {
            code: exit::USAGE,
            message: format!("RENYI_MIX_THREADS must be a positive integer, got `{v}`"),
        })?;
        if n == 0 {
            return Err(Failure {
                code: exit::USAGE,
                message: "RENYI_MIX_THREADS must be positive".into(),
            });
        }
        // a pool may already exist when running inside tests
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}
