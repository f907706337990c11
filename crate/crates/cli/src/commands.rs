//! One function per subcommand. Each takes the merged configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use spillover::data::{self, ValidationFlag, ValidationOptions};
use spillover::estimators::{contrast_effects, estimate_mu_set};
use spillover::gamma_grid::{self, GammaRange};
use spillover::het_test::{het_test_fit, MIN_DRAWS};
use spillover::inference::{cluster_bootstrap, BootstrapOptions, BootstrapResult};
use spillover::simgen::{
    exact_true_effects, oracle_true_effects, scenario2_exact_effects, LinearLaw, OracleMethod, Scenario, TrueEffects,
};
use spillover::{
    AllocationPolicy, ColumnSchema, Dataset, DesignPropensity, EffectKind, EffectReport, Estimand, Fit, HetTestResult,
    HetTestSpec, MuSet,
};

use crate::config::{AutoGrid, GammaSpec, OracleSettings, RunConfig};
use crate::error::CliError;
use crate::output::{gamma_columns, gamma_label, num, render_csv, say, write_csv_to, OutputDir};

/// Metadata written next to simulated data; `estimate` reads its `design`.
#[derive(Debug, Serialize, serde::Deserialize)]
struct DataSidecar {
    scenario: Scenario,
    seed: u64,
    design: DesignPropensity,
    n_clusters: usize,
    n_units: usize,
    covariates: Vec<String>,
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let seed = cfg.require_seed()?;
    let scenario = cfg.scenario();
    let ds = scenario.generate(seed)?;
    let out = OutputDir::create(cfg.out_dir(), cfg.digest())?;
    let csv = out.path("data.csv");
    data::save_dataset(&csv, &ds, &[out.digest_comment()])?;
    out.write_json(
        "data.json",
        &DataSidecar {
            scenario,
            seed,
            design: scenario.design(),
            n_clusters: ds.n_clusters(),
            n_units: ds.n_units(),
            covariates: ds.covariate_names().to_vec(),
        },
    )?;
    say(format_args!("simulated {} clusters, {} units -> {}", ds.n_clusters(), ds.n_units(), csv.display()));
    Ok(())
}

fn input_path(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.input
        .as_deref()
        .ok_or_else(|| CliError::Config("an input file is required (--input)".into()))
}

/// Column layout: configured, or inferred from the header of a file in the
/// layout written by `simulate`.
fn schema(cfg: &RunConfig, path: &Path) -> Result<ColumnSchema, CliError> {
    if let Some(s) = &cfg.columns {
        return Ok(s.clone());
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let header = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .ok_or_else(|| CliError::Data(format!("{}: no header row", path.display())))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let reserved = ["cluster", "unit", "treatment", "outcome"];
    let covariates: Vec<String> = names.iter().filter(|n| !reserved.contains(&n.as_str())).cloned().collect();
    let mut s = ColumnSchema::canonical(&covariates);
    if !names.iter().any(|n| n == "unit") {
        s.unit = None;
    }
    Ok(s)
}

fn load(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let path = input_path(cfg)?;
    let s = schema(cfg, path)?;
    Ok(data::load_dataset(path, &s)?)
}

/// Configured design, else the `design` of a `.json` sidecar next to the input.
fn design(cfg: &RunConfig) -> Result<DesignPropensity, CliError> {
    if let Some(d) = &cfg.design {
        return Ok(d.clone());
    }
    let sidecar = input_path(cfg)?.with_extension("json");
    if let Ok(text) = fs::read_to_string(&sidecar) {
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", sidecar.display())))?;
        if let Some(d) = v.get("design") {
            return serde_json::from_value(d.clone())
                .map_err(|e| CliError::Config(format!("{}: {e}", sidecar.display())));
        }
    }
    Err(CliError::Config(
        "no design given: set `design` in the config or pass --design-p".into(),
    ))
}

fn alpha(cfg: &RunConfig) -> Result<f64, CliError> {
    cfg.alpha.ok_or_else(|| CliError::Config("alpha is required (--alpha)".into()))
}

/// The policy grid, with the all-zero reference appended when absent.
fn gammas(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<Vec<f64>>, CliError> {
    let k = ds.n_covariates();
    match cfg.gamma.clone().unwrap_or(GammaSpec::Auto(AutoGrid::default())) {
        GammaSpec::Values(mut v) => {
            if v.is_empty() {
                return Err(CliError::Config("empty gamma list".into()));
            }
            if let Some(g) = v.iter().find(|g| g.len() != k) {
                return Err(CliError::Config(format!(
                    "gamma {} has {} components; the data has {k} covariates",
                    gamma_label(g),
                    g.len()
                )));
            }
            let zero = vec![0.0; k];
            if !v.contains(&zero) {
                v.push(zero);
            }
            Ok(v)
        }
        GammaSpec::Auto(auto) => {
            let ranges = ranges(ds, &auto)?;
            Ok(gamma_grid::materialize_grid(&ranges, k, auto.points)?)
        }
    }
}

fn ranges(ds: &Dataset, auto: &AutoGrid) -> Result<Vec<GammaRange>, CliError> {
    let indices: Vec<usize> = if auto.covariates.is_empty() {
        (0..ds.n_covariates()).collect()
    } else {
        auto.covariates
            .iter()
            .map(|n| ds.covariate_index(n).ok_or_else(|| CliError::Config(format!("unknown covariate `{n}`"))))
            .collect::<Result<_, _>>()?
    };
    Ok(indices
        .into_iter()
        .map(|k| gamma_grid::gamma_range(ds, k, auto.percentiles))
        .collect::<Result<_, _>>()?)
}

#[derive(Serialize)]
struct EstimateReport<'a> {
    alpha: f64,
    level: f64,
    n_clusters: usize,
    n_units: usize,
    gamma_ref: Vec<f64>,
    mu: &'a MuSet,
    effects: &'a [EffectReport],
    validation: &'a [ValidationFlag],
}

#[derive(Serialize)]
struct BootstrapReport<'a> {
    reps: usize,
    reps_used: usize,
    discarded: usize,
    seed: u64,
    level: f64,
    interval: spillover::inference::BootstrapInterval,
    labels: &'a [String],
    mu: &'a [f64],
    se: Vec<f64>,
    mu_intervals: &'a [(f64, f64)],
    effects: &'a [spillover::inference::BootstrapEffect],
}

pub fn estimate(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = load(cfg)?;
    let design = design(cfg)?;
    let alpha = alpha(cfg)?;
    let grid = gammas(cfg, &ds)?;
    let level = cfg.level();
    let zero = vec![0.0; ds.n_covariates()];

    let policies = grid
        .iter()
        .map(|g| AllocationPolicy::new(alpha, g.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut vopts = ValidationOptions::default();
    if let Some(w) = cfg.max_relative_weight {
        vopts.max_relative_weight = w;
    }
    let validation = data::validate_assumptions(&ds, &design, &policies, &vopts);
    for f in &validation.flags {
        eprintln!("warning: {}", serde_json::to_string(f).unwrap_or_default());
    }

    // A single cluster admits point estimates but no sandwich variance.
    let (mu, cov, effects) = if ds.n_clusters() >= 2 {
        let fit = Fit::new(&ds, &design, alpha, &grid)?;
        let effects = fit.report(&zero, level)?;
        (fit.mu, Some(fit.covariance.matrix), effects)
    } else {
        eprintln!("warning: one cluster only; standard errors are not available");
        let mu = estimate_mu_set(&ds, &design, alpha, &grid)?;
        let mut effects = Vec::new();
        for g in &grid {
            for c in contrast_effects(&mu, g, &zero)? {
                if c.kind != EffectKind::DE && g == &zero {
                    continue;
                }
                effects.push(EffectReport {
                    kind: c.kind,
                    gamma: c.gamma,
                    gamma_ref: c.gamma_ref,
                    estimate: c.estimate,
                    variance: f64::NAN,
                    ci: (f64::NAN, f64::NAN),
                    level,
                });
            }
        }
        effects.sort_by_key(|e| EffectKind::ALL.iter().position(|k| *k == e.kind));
        (mu, None, effects)
    };

    let boot = match cfg.boot_reps.unwrap_or(0) {
        0 => None,
        reps => {
            let seed = cfg.require_seed()?;
            let opts = BootstrapOptions { reps, seed, level, interval: cfg.boot_interval.unwrap_or_default() };
            Some((cluster_bootstrap(&ds, &design, alpha, &grid, &opts)?, seed))
        }
    };

    let out = OutputDir::create(cfg.out_dir(), cfg.digest())?;
    let k = ds.n_covariates();
    let z = spillover::inference::normal_quantile(0.5 * (1.0 + level));

    let mut header: Vec<String> = vec!["estimand".into(), "alpha".into()];
    header.extend(gamma_columns("gamma", k));
    header.extend(["estimate", "se", "ci_lo", "ci_hi"].map(String::from));
    let rows: Vec<Vec<String>> = (0..mu.len())
        .map(|m| {
            let (estimand, r) = mu.position(m);
            let se = cov.as_ref().map_or(f64::NAN, |c| c[(m, m)].max(0.0).sqrt());
            let v = mu.values[m];
            let mut row = vec![estimand_name(estimand).to_string(), num(alpha)];
            row.extend(mu.gammas[r].iter().map(|g| num(*g)));
            row.extend([num(v), num(se), num(v - z * se), num(v + z * se)]);
            row
        })
        .collect();
    out.write_csv("estimates.csv", &header, &rows)?;

    if let Some(c) = &cov {
        let mut header = vec!["label".to_string()];
        header.extend(mu.labels.iter().cloned());
        let rows: Vec<Vec<String>> = (0..mu.len())
            .map(|i| {
                let mut row = vec![mu.labels[i].clone()];
                row.extend((0..mu.len()).map(|j| num(c[(i, j)])));
                row
            })
            .collect();
        out.write_csv("covariance.csv", &header, &rows)?;
    }

    let mut header: Vec<String> = vec!["effect".into(), "alpha".into()];
    header.extend(gamma_columns("gamma", k));
    header.extend(gamma_columns("gamma_ref", k));
    header.extend(["estimate", "se", "ci_lo", "ci_hi", "level"].map(String::from));
    let rows: Vec<Vec<String>> = effects
        .iter()
        .map(|e| {
            let mut row = vec![e.kind.to_string(), num(alpha)];
            row.extend(e.gamma.iter().map(|g| num(*g)));
            match &e.gamma_ref {
                Some(r) => row.extend(r.iter().map(|g| num(*g))),
                None => row.extend(std::iter::repeat_n(String::new(), k)),
            }
            row.extend([num(e.estimate), num(e.variance.sqrt()), num(e.ci.0), num(e.ci.1), num(e.level)]);
            row
        })
        .collect();
    out.write_csv("effects.csv", &header, &rows)?;

    out.write_json(
        "effects.json",
        &EstimateReport {
            alpha,
            level,
            n_clusters: ds.n_clusters(),
            n_units: ds.n_units(),
            gamma_ref: zero.clone(),
            mu: &mu,
            effects: &effects,
            validation: &validation.flags,
        },
    )?;

    if let Some((b, seed)) = &boot {
        write_bootstrap(&out, b, *seed)?;
    }

    for e in &effects {
        let reference = e.gamma_ref.as_deref().map(|r| format!(" vs {}", gamma_label(r))).unwrap_or_default();
        say(format_args!(
            "{} gamma={}{}: estimate={:.6} se={:.6} ci=[{:.6}, {:.6}]",
            e.kind,
            gamma_label(&e.gamma),
            reference,
            e.estimate,
            e.variance.sqrt(),
            e.ci.0,
            e.ci.1
        ));
    }
    Ok(())
}

fn write_bootstrap(out: &OutputDir, b: &BootstrapResult, seed: u64) -> Result<(), CliError> {
    out.write_json(
        "bootstrap.json",
        &BootstrapReport {
            reps: b.reps_used + b.discarded,
            reps_used: b.reps_used,
            discarded: b.discarded,
            seed,
            level: b.level,
            interval: b.interval,
            labels: &b.mu.labels,
            mu: &b.mu.values,
            se: b.std_errors(),
            mu_intervals: &b.mu_intervals,
            effects: &b.effects,
        },
    )?;
    Ok(())
}

fn estimand_name(e: Estimand) -> &'static str {
    match e {
        Estimand::Untreated => "mu0",
        Estimand::Treated => "mu1",
        Estimand::Overall => "mu",
    }
}

#[derive(Serialize)]
struct TestReport<'a> {
    alpha: f64,
    seed: u64,
    #[serde(flatten)]
    result: &'a HetTestResult,
}

pub fn test(cfg: &RunConfig) -> Result<(), CliError> {
    let seed = cfg.require_seed()?;
    let ds = load(cfg)?;
    let design = design(cfg)?;
    let alpha = alpha(cfg)?;
    let grid = gammas(cfg, &ds)?;
    let mut spec = HetTestSpec::new(cfg.effect.unwrap_or(EffectKind::OE), seed);
    spec.level = cfg.level.unwrap_or(0.05);
    spec.draws = cfg.draws.unwrap_or(spec.draws);
    if spec.draws < MIN_DRAWS {
        return Err(CliError::Config(format!("B must be at least {MIN_DRAWS}")));
    }
    spec.s1 = cfg.s1.clone();
    spec.s2 = cfg.s2.clone();
    let fit = Fit::new(&ds, &design, alpha, &grid)?;
    let result = het_test_fit(&fit, &spec)?;
    let out = OutputDir::create(cfg.out_dir(), cfg.digest())?;
    out.write_json("test.json", &TestReport { alpha, seed, result: &result })?;
    say(format_args!(
        "{} heterogeneity: T={:.6} p={:.4} critical={:.6} B={} level={} -> {}",
        result.effect,
        result.statistic,
        result.p_value,
        result.critical_value,
        result.draws,
        result.level,
        if result.reject { "reject" } else { "do not reject" }
    ));
    Ok(())
}

pub fn oracle(cfg: &RunConfig, grid_points: Option<usize>) -> Result<(), CliError> {
    let scenario = cfg.scenario();
    scenario.validate()?;
    let alpha = alpha(cfg)?;
    let settings = cfg.oracle.clone().unwrap_or_default();
    let grid = match &cfg.gamma {
        Some(GammaSpec::Values(v)) => {
            let mut v = v.clone();
            if v.iter().any(|g| g.len() != 2) {
                return Err(CliError::Config("oracle gammas need two components (x1, x2)".into()));
            }
            if !v.contains(&vec![0.0, 0.0]) {
                v.push(vec![0.0, 0.0]);
            }
            v
        }
        Some(GammaSpec::Auto(_)) => {
            return Err(CliError::Config("oracle needs an explicit gamma list (no data to derive a grid)".into()))
        }
        None => gamma_grid::grid_from_bounds(&[(0, -1.0, 1.0)], 2, grid_points.unwrap_or(5))?,
    };
    let truth = run_oracle(cfg, &scenario, alpha, &grid, &settings)?;

    let out = OutputDir::create(cfg.out_dir(), cfg.digest())?;
    let name = match scenario {
        Scenario::Linear(_) => "linear",
        Scenario::Diffusion(_) => "diffusion",
    };
    let method = match truth.method {
        OracleMethod::Mc => "mc",
        OracleMethod::Exact => "exact",
    };
    let mut header: Vec<String> = ["scenario", "alpha"].map(String::from).to_vec();
    header.extend(gamma_columns("gamma", 2));
    header.extend(
        ["method", "reps", "mu0", "mu1", "mu", "de", "ie0", "ie1", "oe", "se_de", "se_ie0", "se_ie1", "se_oe"]
            .map(String::from),
    );
    let rows: Vec<Vec<String>> = truth
        .entries
        .iter()
        .map(|e| {
            let mut row = vec![name.to_string(), num(alpha)];
            row.extend(e.gamma.iter().map(|g| num(*g)));
            row.extend([method.to_string(), truth.reps.to_string()]);
            row.extend(
                [e.mu0, e.mu1, e.mu, e.de, e.ie0, e.ie1, e.oe, e.se_de, e.se_ie0, e.se_ie1, e.se_oe].map(num),
            );
            row
        })
        .collect();
    out.write_csv("oracle.csv", &header, &rows)?;
    for e in &truth.entries {
        say(format_args!(
            "{name} gamma={}: DE={:.6} IE0={:.6} IE1={:.6} OE={:.6} (se_oe={:.2e})",
            gamma_label(&e.gamma),
            e.de,
            e.ie0,
            e.ie1,
            e.oe,
            e.se_oe
        ));
    }
    Ok(())
}

fn run_oracle(
    cfg: &RunConfig,
    scenario: &Scenario,
    alpha: f64,
    grid: &[Vec<f64>],
    settings: &OracleSettings,
) -> Result<TrueEffects, CliError> {
    Ok(match (settings.method, scenario) {
        (OracleMethod::Mc, _) => oracle_true_effects(scenario, alpha, grid, settings.reps, cfg.require_seed()?)?,
        (OracleMethod::Exact, Scenario::Diffusion(p)) => scenario2_exact_effects(p, alpha, grid)?,
        // Exact truth for the linear scenario is conditional on one draw of covariates.
        (OracleMethod::Exact, Scenario::Linear(p)) => {
            let ds = scenario.generate(cfg.require_seed()?)?;
            exact_true_effects(&ds, &LinearLaw(p.beta), alpha, grid)?
        }
    })
}

pub fn gamma_grid(cfg: &RunConfig, explicit_out: bool) -> Result<(), CliError> {
    let ds = load(cfg)?;
    let auto = match &cfg.gamma {
        Some(GammaSpec::Auto(a)) => a.clone(),
        _ => AutoGrid::default(),
    };
    let ranges = ranges(&ds, &auto)?;
    let header: Vec<String> = ["covariate", "lo", "hi", "n_converged", "n_dropped"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = ranges
        .iter()
        .map(|r| vec![r.name.clone(), num(r.lo), num(r.hi), r.n_converged.to_string(), r.n_dropped.to_string()])
        .collect();
    let mut stdout = std::io::stdout().lock();
    render_csv(&mut stdout, &header, &rows)?;
    if explicit_out {
        let dir: PathBuf = cfg.out_dir();
        fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        write_csv_to(&dir.join("gamma_grid.csv"), &cfg.digest(), &header, &rows)?;
    }
    Ok(())
}
