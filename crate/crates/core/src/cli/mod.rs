//! Command-line front end: `solve`, `bid` and `experiment`.

pub mod config;
pub mod output;

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::bidding::{run_bidding, Behavior, Schedule, Termination};
use crate::equilibrium::{
    solve_gne_direct, solve_self_sufficiency_profile, solve_social_optimum, MarketInstance,
};
use crate::error::SharingError;
use crate::metrics::{poa_lower_bound, OutcomeReport};
use crate::prosumer::DEFAULT_TOL;
use crate::scenarios::{
    default_misreport_scales, delay_experiment, delay_report, diversity_experiment,
    diversity_report, diversity_summary, misreport_report, misreport_sweep, poa_report,
    poa_vs_size, sensitivity_report, sensitivity_sweep, Regime,
};

pub use config::{InstanceSource, RunConfig};
use output::{fmt_num, write_report, write_rows};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{origin}:{line}: {message}")]
    Config {
        origin: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Model(#[from] SharingError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("did not converge: {0}")]
    NotConverged(String),
}

impl CliError {
    /// 1 usage or config, 2 infeasible market, 3 non-convergence.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Model(
                SharingError::MarketInfeasible { .. }
                | SharingError::SelfSufficiencyInfeasible { .. }
                | SharingError::NonNegativeSelfCost { .. },
            ) => 2,
            CliError::NotConverged(_) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "energy-sharing",
    version,
    about = "Prosumer energy-sharing market solver"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    #[command(flatten)]
    pub options: Options,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Social optimum, sharing equilibrium and self-sufficiency side by side.
    Solve,
    /// Run the iterative bidding process and write its trace.
    Bid,
    /// Run one experiment: misreport, poa_vs_size, diversity, delay or sensitivity.
    Experiment {
        /// Overrides the `experiment` key of the config file.
        tag: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Strategic,
    PriceTaker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Sync,
    Async,
}

#[derive(Debug, Default, Args)]
pub struct Options {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Market sensitivity.
    #[arg(long, global = true)]
    pub a: Option<f64>,
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    #[arg(long = "max-iter", global = true)]
    pub max_iter: Option<usize>,
    #[arg(long, value_enum, global = true)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum, global = true)]
    pub schedule: Option<ScheduleArg>,
    #[arg(long = "miss-prob", global = true)]
    pub miss_prob: Option<f64>,
    #[arg(long = "max-delay", global = true)]
    pub max_delay: Option<usize>,
    /// `builtin`, `random` or a path to an instance file.
    #[arg(long, global = true)]
    pub instance: Option<String>,
    /// Number of prosumers for random instances and the diversity experiment.
    #[arg(long, global = true)]
    pub size: Option<usize>,
}

impl Options {
    /// Config file (if any) with command-line flags applied on top.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.a.is_some() {
            cfg.a = self.a;
        }
        if let Some(e) = self.epsilon {
            cfg.epsilon = e;
        }
        if let Some(m) = self.max_iter {
            cfg.max_iterations = m;
        }
        if let Some(mode) = self.mode {
            cfg.behavior = match mode {
                ModeArg::Strategic => Behavior::Strategic,
                ModeArg::PriceTaker => Behavior::PriceTaker,
            };
        }
        if let Some(s) = self.schedule {
            cfg.asynchronous = s == ScheduleArg::Async;
        }
        if let Some(q) = self.miss_prob {
            cfg.miss_probability = q;
        }
        if let Some(d) = self.max_delay {
            cfg.max_delay = d;
        }
        if self.size.is_some() {
            cfg.size = self.size;
        }
        match self.instance.as_deref() {
            Some("builtin") => cfg.source = InstanceSource::Builtin,
            Some("random") => {
                let size = cfg
                    .size
                    .ok_or_else(|| CliError::Usage("--instance random needs --size".into()))?;
                cfg.source = InstanceSource::Random { size };
            }
            Some(path) => cfg.source = InstanceSource::File(PathBuf::from(path)),
            None => {
                if let (Some(size), InstanceSource::Random { .. }) = (self.size, &cfg.source) {
                    cfg.source = InstanceSource::Random { size };
                }
            }
        }
        Ok(cfg)
    }
}

/// Runs a parsed command line and returns the files it wrote.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let mut cfg = cli.options.resolve()?;
    match &cli.command {
        Command::Solve => cmd_solve(&cfg),
        Command::Bid => cmd_bid(&cfg),
        Command::Experiment { tag } => {
            if tag.is_some() {
                cfg.experiment = tag.clone();
            }
            cmd_experiment(&cfg)
        }
    }
}

fn prepare(cfg: &RunConfig) -> Result<MarketInstance, CliError> {
    let inst = cfg.instance()?;
    inst.check_feasible()?;
    inst.check_self_sufficiency_feasible()?;
    Ok(inst)
}

fn out_path(cfg: &RunConfig, name: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.out)?;
    Ok(cfg.out.join(name))
}

/// Writes `solution.csv` (per-prosumer rows plus a total) and `summary.csv`.
pub fn cmd_solve(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let inst = prepare(cfg)?;
    let gne = solve_gne_direct(&inst, DEFAULT_TOL)?;
    let social = solve_social_optimum(&inst, DEFAULT_TOL)?;
    let alone = solve_self_sufficiency_profile(&inst, DEFAULT_TOL)?;
    let report = OutcomeReport::build(&inst, &gne, &social, &alone)?;
    let bids = gne
        .bids
        .as_ref()
        .ok_or(SharingError::MissingField("bids"))?;

    let header: Vec<String> = [
        "prosumer",
        "gne_p",
        "gne_d",
        "gne_bid",
        "gne_net_cost",
        "gne_payment",
        "gne_payoff",
        "social_p",
        "social_d",
        "social_net_cost",
        "self_p",
        "self_d",
        "self_net_cost",
        "pareto_margin",
        "pareto_pass",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut rows = Vec::with_capacity(inst.len() + 1);
    for (i, pr) in inst.prosumers().iter().enumerate() {
        rows.push(vec![
            pr.id().to_string(),
            fmt_num(gne.p[i]),
            fmt_num(gne.d[i]),
            fmt_num(bids[i]),
            fmt_num(report.gne_cost[i]),
            fmt_num(report.gne_payment[i]),
            fmt_num(report.gne_payoff[i]),
            fmt_num(social.p[i]),
            fmt_num(social.d[i]),
            fmt_num(report.social_cost[i]),
            fmt_num(alone.p[i]),
            fmt_num(alone.d[i]),
            fmt_num(report.self_cost[i]),
            fmt_num(report.pareto.margins[i]),
            (report.pareto.passes[i] as u8).to_string(),
        ]);
    }
    let sum = |xs: &[f64]| fmt_num(xs.iter().sum());
    rows.push(vec![
        "total".into(),
        sum(&gne.p),
        sum(&gne.d),
        sum(bids),
        fmt_num(report.total_gne_cost),
        sum(&report.gne_payment),
        fmt_num(report.total_gne_payoff),
        sum(&social.p),
        sum(&social.d),
        fmt_num(report.total_social_cost),
        sum(&alone.p),
        sum(&alone.d),
        fmt_num(report.total_self_cost),
        sum(&report.pareto.margins),
        (report.pareto.all_pass() as u8).to_string(),
    ]);
    let solution_path = out_path(cfg, "solution.csv")?;
    write_rows(&solution_path, &header, &rows)?;

    let bound = poa_lower_bound(&inst, &alone).ok();
    let mut summary: Vec<(&str, String)> = vec![
        ("prosumers", inst.len().to_string()),
        ("a", fmt_num(inst.market_sensitivity())),
        ("a_min", fmt_num(inst.min_market_sensitivity())),
        ("social_price", fmt_num(report.social_price)),
        ("sharing_price", fmt_num(report.sharing_price)),
        ("price_gap", fmt_num(report.price_gap)),
        ("poa", fmt_num(report.poa.ratio)),
        ("poa_relative_gap", fmt_num(report.poa.relative_gap)),
        ("poa_absolute_gap", fmt_num(report.poa.absolute_gap)),
        (
            "poa_lower_bound",
            bound.map(|b| fmt_num(b.bound)).unwrap_or_default(),
        ),
        (
            "pareto_all_pass",
            (report.pareto.all_pass() as u8).to_string(),
        ),
        (
            "pareto_strict_improvement",
            (report.pareto.strict_improvement as u8).to_string(),
        ),
        ("kkt_residual_gne", fmt_num(gne.kkt_residual)),
        ("kkt_residual_social", fmt_num(social.kkt_residual)),
    ];
    if let Some((lo, hi)) = social.dual_interval {
        summary.push(("social_price_interval_low", fmt_num(lo)));
        summary.push(("social_price_interval_high", fmt_num(hi)));
    }
    let summary_rows: Vec<Vec<String>> = summary
        .into_iter()
        .map(|(k, v)| vec![k.to_string(), v])
        .collect();
    let summary_path = out_path(cfg, "summary.csv")?;
    write_rows(
        &summary_path,
        &["metric".into(), "value".into()],
        &summary_rows,
    )?;
    Ok(vec![solution_path, summary_path])
}

/// Writes `trace.csv`; fails with a non-convergence error after writing it.
pub fn cmd_bid(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let inst = prepare(cfg)?;
    let (solution, trace) = run_bidding(&inst, &cfg.bidding())?;
    let ids: Vec<usize> = inst.prosumers().iter().map(|p| p.id()).collect();
    let mut header = vec!["k".to_string(), "lambda".to_string()];
    for prefix in ["p", "d", "b", "updated"] {
        header.extend(ids.iter().map(|id| format!("{prefix}_{id}")));
    }
    header.push("termination".into());

    let mut rows = Vec::with_capacity(trace.records.len() + 1);
    for rec in &trace.records {
        let mut row = vec![rec.iteration.to_string(), fmt_num(rec.price)];
        row.extend(rec.p.iter().map(|&x| fmt_num(x)));
        row.extend(rec.d.iter().map(|&x| fmt_num(x)));
        row.extend(rec.bids.iter().map(|&x| fmt_num(x)));
        row.extend(rec.updated.iter().map(|&u| (u as u8).to_string()));
        row.push(String::new());
        rows.push(row);
    }
    let mut last = vec![
        "final".to_string(),
        solution.price.map(fmt_num).unwrap_or_default(),
    ];
    last.extend(solution.p.iter().map(|&x| fmt_num(x)));
    last.extend(solution.d.iter().map(|&x| fmt_num(x)));
    match &solution.bids {
        Some(b) => last.extend(b.iter().map(|&x| fmt_num(x))),
        None => last.extend(ids.iter().map(|_| String::new())),
    }
    last.extend(ids.iter().map(|_| String::new()));
    last.push(trace.termination.as_str().to_string());
    rows.push(last);

    let path = out_path(cfg, "trace.csv")?;
    write_rows(&path, &header, &rows)?;
    if trace.termination != Termination::Converged {
        return Err(CliError::NotConverged(format!(
            "bidding stopped with `{}` after {} iterations; trace written to {}",
            trace.termination.as_str(),
            trace.iterations(),
            path.display()
        )));
    }
    Ok(vec![path])
}

fn seeds_or(cfg: &RunConfig, count: u64) -> Vec<u64> {
    cfg.seeds
        .clone()
        .unwrap_or_else(|| (cfg.seed..cfg.seed + count).collect())
}

/// Dispatches on `cfg.experiment` and writes one series file per experiment.
pub fn cmd_experiment(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let tag = cfg
        .experiment
        .as_deref()
        .ok_or_else(|| CliError::Usage("no experiment tag given".into()))?;
    match tag {
        "misreport" => {
            let inst = prepare(cfg)?;
            let scales = default_misreport_scales();
            let mut points = misreport_sweep(&inst, cfg.prosumer, &scales, Regime::Centralized)?;
            points.extend(misreport_sweep(&inst, cfg.prosumer, &scales, Regime::Sharing)?);
            let path = out_path(cfg, "misreport.csv")?;
            write_report(&path, &misreport_report(&points, inst.len()))?;
            let unilateral = misreport_sweep(&inst, cfg.prosumer, &scales, Regime::SharingUnilateral)?;
            let unilateral_path = out_path(cfg, "misreport_unilateral.csv")?;
            write_report(&unilateral_path, &misreport_report(&unilateral, inst.len()))?;
            Ok(vec![path, unilateral_path])
        }
        "poa_vs_size" => {
            let sizes = cfg.sizes.clone().unwrap_or_else(|| (2..=50).collect());
            let points = poa_vs_size(&sizes, cfg.a.unwrap_or(100.0), &seeds_or(cfg, 5))?;
            let path = out_path(cfg, "poa_vs_size.csv")?;
            write_report(&path, &poa_report(&points))?;
            Ok(vec![path])
        }
        "diversity" => {
            let size = cfg.size.unwrap_or(100);
            let types = cfg.types.clone().unwrap_or_else(|| vec![1, 2, 4, 5, 10, 20, 50, 100]);
            let points = diversity_experiment(size, &types, cfg.draws.unwrap_or(50), cfg.a.unwrap_or(100.0), cfg.seed)?;
            let rows = out_path(cfg, "diversity.csv")?;
            let summary = out_path(cfg, "diversity_summary.csv")?;
            write_report(&rows, &diversity_report(&points, cfg.seed))?;
            write_report(&summary, &diversity_summary(&points, cfg.seed))?;
            Ok(vec![rows, summary])
        }
        "delay" => {
            let inst = prepare(cfg)?;
            let mut base = cfg.bidding();
            base.schedule = Schedule::Synchronous;
            let delays = cfg.delays.clone().unwrap_or_else(|| vec![3, 6, 9]);
            let points = delay_experiment(&inst, &base, &delays, &seeds_or(cfg, 20))?;
            let path = out_path(cfg, "delay.csv")?;
            write_report(&path, &delay_report(&points))?;
            let failed = points.iter().filter(|p| !p.converged).count();
            if failed > 0 {
                return Err(CliError::NotConverged(format!(
                    "{failed} of {} asynchronous runs did not converge; series written to {}",
                    points.len(),
                    path.display()
                )));
            }
            Ok(vec![path])
        }
        "sensitivity" => {
            let inst = prepare(cfg)?;
            let a_values = cfg.a_values.clone().unwrap_or_else(|| vec![25.0, 50.0, 75.0, 100.0, 125.0]);
            let points = sensitivity_sweep(&inst, &a_values, &cfg.bidding())?;
            let seed = matches!(cfg.source, InstanceSource::Random { .. }).then_some(cfg.seed);
            let path = out_path(cfg, "sensitivity.csv")?;
            write_report(&path, &sensitivity_report(&points, seed))?;
            Ok(vec![path])
        }
        other => Err(CliError::Usage(format!(
            "unknown experiment `{other}` (expected misreport, poa_vs_size, diversity, delay or sensitivity)"
        ))),
    }
}

/// Convenience for tests and scripts: parse `args` (without the program name) and run.
pub fn run_args<I, S>(args: I) -> Result<Vec<PathBuf>, CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv = std::iter::once(std::ffi::OsString::from("energy-sharing"))
        .chain(args.into_iter().map(Into::into));
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Usage(e.to_string()))?;
    run(&cli)
}
