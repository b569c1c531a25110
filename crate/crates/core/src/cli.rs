//! Command-line front end.
//!
//! Expands the scenario/profile/policy selection into a run matrix, replays
//! every (cell, replication) pair, and writes the reports: one summary CSV
//! per cell, a cross-cell comparison table, and optionally per-run rows and
//! event logs. Replications may run concurrently, but every output file is
//! assembled in cell order from per-run seeds, so reruns are byte-identical.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, ValueEnum};
use rayon::prelude::*;

use crate::config::{self, LoadedConfig};
use crate::metrics::{aggregate, finalize_run, MetricSummary, RunReport, METRIC_NAMES};
use crate::model::{
    build_scenario, Interactivity, PolicyKind, Provision, ScenarioConfig,
};
use crate::swarm::run_scenario;

/// How much detail lands on disk. Levels are cumulative: `per-run` adds one
/// CSV row per replication, `trace` adds an event log per replication on top.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum EmitLevel {
    Summary,
    PerRun,
    Trace,
}

/// One point of the scenario × profile × policy grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunCell {
    pub provision: Provision,
    pub interactivity: Interactivity,
    pub policy: PolicyKind,
}

impl RunCell {
    /// `<scenario>_<profile>_<policy>`, used in file names.
    pub fn label(&self) -> String {
        format!(
            "{}_{}_{}",
            self.provision.label(),
            self.interactivity.label(),
            self.policy.label()
        )
    }
}

/// A fully resolved batch: the grid cells in output order plus the knobs
/// shared by every replication.
#[derive(Clone, Debug)]
pub struct RunMatrix {
    pub cells: Vec<RunCell>,
    pub reps: usize,
    pub base_seed: u64,
    /// Media, swarm, and policy settings applied to every cell.
    pub base: ScenarioConfig,
    pub out_dir: PathBuf,
    pub emit: EmitLevel,
}

impl RunMatrix {
    /// Seed for replication `rep` of `cells[cell]`. Injective over the
    /// matrix, so no two runs share a random stream.
    pub fn run_seed(&self, cell: usize, rep: usize) -> u64 {
        self.base_seed + (cell * self.reps + rep) as u64
    }
}

/// A problem detected before any simulation runs.
#[derive(Debug)]
pub enum CliError {
    /// `--help` or `--version`: print to stdout and exit 0.
    Informational(String),
    /// Bad flag, bad value, or a selection that contradicts the config file:
    /// print to stderr and exit 2.
    Usage(String),
}

#[derive(Parser, Debug)]
#[command(
    name = "vodswarm",
    version,
    about = "Simulate video-on-demand swarms under interactive viewer workloads"
)]
struct Args {
    /// Bandwidth scenario: op, lp, bp, or all [default: all]
    #[arg(long, value_name = "SCENARIO")]
    scenario: Option<String>,

    /// Viewer interactivity profile: hi, mi, li, or all [default: all]
    #[arg(long, value_name = "PROFILE")]
    profile: Option<String>,

    /// Peer-selection policy: original, sbnp, qbps, or all [default: all]
    #[arg(long, value_name = "POLICY")]
    policy: Option<String>,

    /// Replications per cell [default: 30]
    #[arg(long, value_name = "N")]
    reps: Option<usize>,

    /// Base seed for the whole batch [default: 1]
    #[arg(long, value_name = "S")]
    seed: Option<u64>,

    /// Simulated seconds per replication [default: 7200]
    #[arg(long, value_name = "SECONDS")]
    duration: Option<f64>,

    /// Config file overriding the stock defaults
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Directory the report files are written into
    #[arg(long, value_name = "DIR", default_value = "results")]
    out: PathBuf,

    /// Report detail level
    #[arg(long, value_enum, default_value_t = EmitLevel::Summary)]
    emit: EmitLevel,
}

/// Parses the command line (and the config file, if given) into a run
/// matrix. Grid axes left at `all` expand to every value; a config file that
/// pins an axis narrows it instead, and an explicit flag that contradicts
/// such a pin is rejected rather than silently resolved.
pub fn parse_args<I, T>(argv: I) -> Result<RunMatrix, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = Args::try_parse_from(argv).map_err(|err| {
        let text = err.render().to_string();
        match err.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                CliError::Informational(text)
            }
            _ => CliError::Usage(text),
        }
    })?;
    build_matrix(args)
}

fn usage(message: impl Into<String>) -> CliError {
    CliError::Usage(format!("error: {}", message.into()))
}

/// Resolves one grid axis from its flag and the config pin. `None` means
/// "run all three values".
fn select_axis<T: Copy + PartialEq>(
    flag: &str,
    raw: Option<&str>,
    parse: fn(&str) -> Result<T, String>,
    pin: Option<T>,
    pin_key: &str,
    label: fn(T) -> &'static str,
) -> Result<Option<T>, CliError> {
    let chosen = match raw {
        None | Some("all") => None,
        Some(value) => Some(parse(value).map_err(|e| usage(format!("{flag}: {e}")))?),
    };
    match (chosen, pin) {
        (Some(c), Some(p)) if c != p => Err(usage(format!(
            "{flag} {} contradicts the config file, which pins {pin_key} = {}",
            label(c),
            label(p)
        ))),
        (Some(c), _) => Ok(Some(c)),
        (None, pin) => Ok(pin),
    }
}

fn build_matrix(args: Args) -> Result<RunMatrix, CliError> {
    let loaded = match &args.config {
        Some(path) => config::load_config(path).map_err(|e| match e {
            config::ConfigError::Io { .. } => usage(e.to_string()),
            other => usage(format!("{}: {other}", path.display())),
        })?,
        None => LoadedConfig::default(),
    };
    let mut base = loaded.base;

    let provision = select_axis(
        "--scenario",
        args.scenario.as_deref(),
        config::parse_provision,
        loaded.pinned_provision.then_some(base.provision),
        "swarm.provision",
        Provision::label,
    )?;
    let profile = select_axis(
        "--profile",
        args.profile.as_deref(),
        config::parse_profile,
        loaded.pinned_profile.then_some(base.interactivity),
        "workload.profile",
        Interactivity::label,
    )?;
    let policy = select_axis(
        "--policy",
        args.policy.as_deref(),
        config::parse_policy,
        loaded.pinned_policy.then_some(base.policy),
        "policy.kind",
        PolicyKind::label,
    )?;

    let reps = args.reps.unwrap_or(base.replications);
    if reps == 0 {
        return Err(usage("--reps must be at least 1"));
    }
    base.replications = reps;
    base.seed = args.seed.unwrap_or(base.seed);
    let duration = args.duration.unwrap_or(base.duration_s);
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(usage("--duration must be a positive number of seconds"));
    }
    base.duration_s = duration;

    let provisions: Vec<Provision> = match provision {
        Some(p) => vec![p],
        None => Provision::ALL.to_vec(),
    };
    let profiles: Vec<Interactivity> = match profile {
        Some(p) => vec![p],
        None => Interactivity::ALL.to_vec(),
    };
    let policies: Vec<PolicyKind> = match policy {
        Some(p) => vec![p],
        None => PolicyKind::ALL.to_vec(),
    };

    let mut cells = Vec::with_capacity(provisions.len() * profiles.len() * policies.len());
    for &provision in &provisions {
        for &interactivity in &profiles {
            for &policy in &policies {
                cells.push(RunCell {
                    provision,
                    interactivity,
                    policy,
                });
            }
        }
    }

    Ok(RunMatrix {
        cells,
        reps,
        base_seed: base.seed,
        base,
        out_dir: args.out,
        emit: args.emit,
    })
}

/// Formats a float for CSV: six decimals, with `nan`/`inf`/`-inf` spelled
/// out so the files stay byte-stable across platforms.
fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.6}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), fmt_f)
}

/// Runs every (cell, replication) pair and writes the reports. Returns
/// whether any confidence interval missed the 5% relative-width target; the
/// files are written either way. Files for finished cells are already on
/// disk if a later cell fails.
pub fn execute(matrix: &RunMatrix) -> io::Result<bool> {
    fs::create_dir_all(&matrix.out_dir)?;

    let jobs: Vec<(usize, usize)> = (0..matrix.cells.len())
        .flat_map(|cell| (0..matrix.reps).map(move |rep| (cell, rep)))
        .collect();
    let reports: Vec<RunReport> = jobs
        .par_iter()
        .map(|&(cell_idx, rep)| run_one(matrix, cell_idx, rep))
        .collect::<io::Result<Vec<_>>>()?;

    let mut flagged = false;
    // Per-metric means for each cell, reused by the comparison table.
    let mut cell_means: Vec<[Option<f64>; 6]> = Vec::with_capacity(matrix.cells.len());
    let mut report_text = String::new();

    for (cell_idx, cell) in matrix.cells.iter().enumerate() {
        let runs = &reports[cell_idx * matrix.reps..(cell_idx + 1) * matrix.reps];
        let label = cell.label();

        let mut summary_csv =
            String::from("scenario,profile,policy,metric,mean,ci_low,ci_high,rel_halfwidth,reps\n");
        let mut means = [None; 6];
        let _ = writeln!(report_text, "cell {label}");
        for (mi, name) in METRIC_NAMES.iter().enumerate() {
            let samples: Vec<f64> = runs.iter().filter_map(|r| r.metrics()[mi]).collect();
            let prefix = format!(
                "{},{},{},{name}",
                cell.provision.label(),
                cell.interactivity.label(),
                cell.policy.label()
            );
            match aggregate(&samples) {
                Some(s) => {
                    let _ = writeln!(
                        summary_csv,
                        "{prefix},{},{},{},{},{}",
                        fmt_f(s.mean),
                        fmt_f(s.ci_low),
                        fmt_f(s.ci_high),
                        fmt_f(s.rel_half_width),
                        s.n
                    );
                    let _ = writeln!(report_text, "  {name}: {}", describe(&s));
                    flagged |= s.flagged();
                    means[mi] = Some(s.mean);
                }
                None => {
                    let _ = writeln!(summary_csv, "{prefix},nan,nan,nan,nan,0");
                    let _ = writeln!(report_text, "  {name}: no samples");
                }
            }
        }
        cell_means.push(means);

        let zero_served = runs.iter().filter(|r| r.ps == 0).count();
        if zero_served > 0 {
            eprintln!(
                "warning: {zero_served} of {} runs in cell {label} served no peers",
                runs.len()
            );
            let _ = writeln!(report_text, "  zero-served runs: {zero_served}");
        }
        let violations: u64 = runs.iter().map(|r| r.violations.total()).sum();
        let _ = writeln!(report_text, "  invariant violations: {violations}");

        fs::write(matrix.out_dir.join(format!("summary_{label}.csv")), summary_csv)?;
        if matrix.emit >= EmitLevel::PerRun {
            fs::write(
                matrix.out_dir.join(format!("runs_{label}.csv")),
                per_run_csv(matrix, cell_idx, runs),
            )?;
        }
    }

    fs::write(
        matrix.out_dir.join("comparison.csv"),
        comparison_csv(matrix, &cell_means),
    )?;
    let _ = writeln!(
        report_text,
        "ci target: {}",
        if flagged { "missed" } else { "met" }
    );
    fs::write(matrix.out_dir.join("report.txt"), report_text)?;

    Ok(flagged)
}

/// Parses the command line, runs the batch, and maps the outcome to an exit
/// code: 0 clean, 1 runtime error, 2 usage error or missed CI target.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matrix = match parse_args(argv) {
        Ok(matrix) => matrix,
        Err(CliError::Informational(text)) => {
            println!("{text}");
            return 0;
        }
        Err(CliError::Usage(text)) => {
            eprintln!("{text}");
            return 2;
        }
    };
    match execute(&matrix) {
        Ok(false) => 0,
        Ok(true) => 2,
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}

fn run_one(matrix: &RunMatrix, cell_idx: usize, rep: usize) -> io::Result<RunReport> {
    let cell = matrix.cells[cell_idx];
    let mut cfg = matrix.base.clone();
    cfg.provision = cell.provision;
    cfg.interactivity = cell.interactivity;
    cfg.policy = cell.policy;
    cfg.seed = matrix.run_seed(cell_idx, rep);
    let scenario = build_scenario(&cfg).map_err(|e| {
        io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("cell {}: {e}", cell.label()),
        )
    })?;
    let trace = run_scenario(&scenario, matrix.emit == EmitLevel::Trace);
    if matrix.emit == EmitLevel::Trace {
        let mut text = trace.log.join("\n");
        text.push('\n');
        fs::write(
            matrix
                .out_dir
                .join(format!("trace_{}_rep{rep}.log", cell.label())),
            text,
        )?;
    }
    Ok(finalize_run(&trace, scenario.media.media_rate_bps, 0.0))
}

fn describe(s: &MetricSummary) -> String {
    format!(
        "mean={} ci=[{}, {}] rel={} n={}{}",
        fmt_f(s.mean),
        fmt_f(s.ci_low),
        fmt_f(s.ci_high),
        fmt_f(s.rel_half_width),
        s.n,
        if s.flagged() { " (flagged)" } else { "" }
    )
}

fn per_run_csv(matrix: &RunMatrix, cell_idx: usize, runs: &[RunReport]) -> String {
    let cell = matrix.cells[cell_idx];
    let mut text =
        String::from("scenario,profile,policy,rep,seed,erc,ps,est,sd,ni,tr,zero_byte_peers\n");
    for (rep, report) in runs.iter().enumerate() {
        let m = report.metrics();
        let _ = writeln!(
            text,
            "{},{},{},{rep},{},{},{},{},{},{},{},{}",
            cell.provision.label(),
            cell.interactivity.label(),
            cell.policy.label(),
            matrix.run_seed(cell_idx, rep),
            fmt_opt(m[0]),
            fmt_opt(m[1]),
            fmt_opt(m[2]),
            fmt_opt(m[3]),
            fmt_opt(m[4]),
            fmt_opt(m[5]),
            report.zero_byte_peers,
        );
    }
    text
}

/// One row per (scenario, profile, metric) with the per-policy means side by
/// side, in the policy order the matrix was built with.
fn comparison_csv(matrix: &RunMatrix, cell_means: &[[Option<f64>; 6]]) -> String {
    let mut policies: Vec<PolicyKind> = Vec::new();
    let mut groups: Vec<(Provision, Interactivity)> = Vec::new();
    for cell in &matrix.cells {
        if !policies.contains(&cell.policy) {
            policies.push(cell.policy);
        }
        let group = (cell.provision, cell.interactivity);
        if !groups.contains(&group) {
            groups.push(group);
        }
    }

    let mut text = String::from("scenario,profile,metric");
    for policy in &policies {
        let _ = write!(text, ",{}", policy.label());
    }
    text.push('\n');

    for &(provision, interactivity) in &groups {
        for (mi, name) in METRIC_NAMES.iter().enumerate() {
            let _ = write!(text, "{},{},{name}", provision.label(), interactivity.label());
            for &policy in &policies {
                let mean = matrix
                    .cells
                    .iter()
                    .position(|c| {
                        c.provision == provision
                            && c.interactivity == interactivity
                            && c.policy == policy
                    })
                    .and_then(|idx| cell_means[idx][mi]);
                let _ = write!(text, ",{}", fmt_opt(mean));
            }
            text.push('\n');
        }
    }
    text
}
