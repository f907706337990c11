//! `spillover`: estimate, test and simulate policy effects under partial interference.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spillover::simgen::{OracleMethod, Scenario};
use spillover::{DesignPropensity, EffectKind};

use config::{parse_gamma_list, parse_scenario, AutoGrid, GammaSpec, OracleSettings, RunConfig};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "spillover", version, about = "Policy effects under partial interference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw; required by stochastic commands.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Target mean propensity of the policies.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Policy coefficients, e.g. "0,0;0.5,0;-0.5,0".
    #[arg(long, global = true, allow_hyphen_values = true)]
    gamma: Option<String>,
    /// Points per axis of a data-driven gamma grid.
    #[arg(long, global = true)]
    grid_points: Option<usize>,
    /// Null draws of the heterogeneity test.
    #[arg(long = "B", global = true)]
    draws: Option<usize>,
    /// Cluster bootstrap replicates (0 disables).
    #[arg(long, global = true)]
    boot_reps: Option<usize>,
    /// CI level for `estimate`, significance level for `test`.
    #[arg(long, global = true)]
    level: Option<f64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate(ScenarioArgs),
    /// Estimate average potential outcomes and effects over a gamma grid.
    Estimate(DataArgs),
    /// Test for heterogeneity of an effect across gamma.
    Test(TestArgs),
    /// True effects of a simulation scenario.
    Oracle(OracleArgs),
    /// Data-driven gamma ranges per covariate.
    GammaGrid(DataArgs),
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// linear (1) or diffusion (2).
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    clusters: Option<usize>,
    /// Correlation of the two binary covariates.
    #[arg(long)]
    rho: Option<f64>,
    /// Transmission probability of the diffusion scenario.
    #[arg(long)]
    pd: Option<f64>,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    /// Constant Bernoulli design probability.
    #[arg(long)]
    design_p: Option<f64>,
}

#[derive(Debug, Args)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    /// DE, IE0, IE1 or OE.
    #[arg(long)]
    effect: Option<EffectKind>,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// mc or exact.
    #[arg(long)]
    method: Option<String>,
    /// Monte-Carlo replicates.
    #[arg(long)]
    reps: Option<usize>,
}

fn apply_common(cfg: &mut RunConfig, c: &Common) -> Result<(), CliError> {
    cfg.seed = c.seed.or(cfg.seed);
    cfg.alpha = c.alpha.or(cfg.alpha);
    cfg.draws = c.draws.or(cfg.draws);
    cfg.boot_reps = c.boot_reps.or(cfg.boot_reps);
    cfg.level = c.level.or(cfg.level);
    cfg.out = c.out.clone().or(cfg.out.take());
    if let Some(g) = &c.gamma {
        cfg.gamma = Some(GammaSpec::Values(parse_gamma_list(g)?));
    } else if let Some(points) = c.grid_points {
        let mut auto = match cfg.gamma.take() {
            Some(GammaSpec::Auto(a)) => a,
            _ => AutoGrid::default(),
        };
        auto.points = points;
        cfg.gamma = Some(GammaSpec::Auto(auto));
    }
    Ok(())
}

fn apply_scenario(cfg: &mut RunConfig, s: &ScenarioArgs) -> Result<(), CliError> {
    if let Some(name) = &s.scenario {
        let chosen = parse_scenario(name)?;
        // Keep configured parameters when the kind matches.
        let same_kind = std::mem::discriminant(&chosen) == std::mem::discriminant(&cfg.scenario());
        if cfg.scenario.is_none() || !same_kind {
            cfg.scenario = Some(chosen);
        }
    }
    let mut scenario = cfg.scenario();
    match &mut scenario {
        Scenario::Linear(p) => {
            if s.pd.is_some() {
                return Err(CliError::Config("--pd applies to the diffusion scenario only".into()));
            }
            p.clusters = s.clusters.unwrap_or(p.clusters);
            p.rho = s.rho.unwrap_or(p.rho);
        }
        Scenario::Diffusion(p) => {
            p.clusters = s.clusters.unwrap_or(p.clusters);
            p.rho = s.rho.unwrap_or(p.rho);
            p.p_d = s.pd.unwrap_or(p.p_d);
        }
    }
    scenario.validate()?;
    cfg.scenario = Some(scenario);
    Ok(())
}

fn apply_data(cfg: &mut RunConfig, d: &DataArgs) {
    cfg.input = d.input.clone().or(cfg.input.take());
    if let Some(p) = d.design_p {
        cfg.design = Some(DesignPropensity::ConstantBernoulli { p });
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    apply_common(&mut cfg, &cli.common)?;
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let name = match &cli.command {
        Command::Simulate(_) => "simulate",
        Command::Estimate(_) => "estimate",
        Command::Test(_) => "test",
        Command::Oracle(_) => "oracle",
        Command::GammaGrid(_) => "gamma-grid",
    };
    if let Some(c) = &cfg.command {
        if c != name {
            return Err(CliError::Config(format!("config is for `{c}`, but `{name}` was invoked")));
        }
    }
    cfg.command = Some(name.to_string());
    match &cli.command {
        Command::Simulate(s) => {
            apply_scenario(&mut cfg, s)?;
            commands::simulate(&cfg)
        }
        Command::Estimate(d) => {
            apply_data(&mut cfg, d);
            commands::estimate(&cfg)
        }
        Command::Test(t) => {
            apply_data(&mut cfg, &t.data);
            cfg.effect = t.effect.or(cfg.effect);
            commands::test(&cfg)
        }
        Command::Oracle(o) => {
            apply_scenario(&mut cfg, &o.scenario)?;
            let mut settings = cfg.oracle.clone().unwrap_or_default();
            if let Some(m) = &o.method {
                settings.method = match m.as_str() {
                    "mc" => OracleMethod::Mc,
                    "exact" => OracleMethod::Exact,
                    other => return Err(CliError::Config(format!("unknown oracle method `{other}`"))),
                };
            }
            settings.reps = o.reps.unwrap_or(settings.reps);
            cfg.oracle = Some(OracleSettings { ..settings });
            commands::oracle(&cfg, cli.common.grid_points)
        }
        Command::GammaGrid(d) => {
            apply_data(&mut cfg, d);
            let explicit_out = cfg.out.is_some();
            commands::gamma_grid(&cfg, explicit_out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
