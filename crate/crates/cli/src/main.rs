//! Command-line front end: ingestion, estimation, diagnostics, MSE and
//! bootstrap, and the seeded simulation study. All outputs are CSV (plus
//! optional SVG box plots) with a comment header carrying the seed, the
//! tool version, and a hash of the effective configuration, so every file
//! is reproducible from its own header.

mod output;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sae_ipw::bootstrap::{
    block_bootstrap_mq, parametric_bootstrap_eblup, BootstrapConfig, BootstrapMethod,
};
use sae_ipw::diagnostics::{balance_test, common_support_filter, SupportBounds};
use sae_ipw::error::Error;
use sae_ipw::estimators::{
    benchmark_weights, estimate_ipw_eblup, estimate_ipw_mq, ipw_direct, national_effect, Method,
};
use sae_ipw::frames::{load_population, PopulationFrame, Schema};
use sae_ipw::glmm::{fit_logit_laplace_subset, predict_propensity};
use sae_ipw::mse::{confidence_interval, mse_eblup_analytic, mse_mq_analytic, AreaMse, MseParts};
use sae_ipw::simgen::{run_study, ScenarioSpec, StudyConfig};
use sae_ipw::svgplot::{boxplot_svg, BoxSpec};

use output::{fnv1a, OutputSet};

#[derive(Parser)]
#[command(
    name = "sae-ipw",
    version,
    about = "Small-area average treatment effects via inverse propensity weighting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate area effects from a population CSV.
    Estimate(EstimateArgs),
    /// Run a seeded model-based simulation study.
    Simulate(SimulateArgs),
    /// Covariate-balance and common-support diagnostics.
    Diagnose(DiagnoseArgs),
    /// Estimate with a bootstrap add-on for propensity-estimation variance.
    Bootstrap(EstimateArgs),
}

#[derive(Args, Clone)]
struct SharedArgs {
    /// Input population CSV.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Column mapping, e.g. "area=region,w=treated,y=outcome,x=age+income".
    #[arg(long)]
    schema: Option<String>,
    /// Master seed recorded in every output.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Propensity clipping bound.
    #[arg(long, default_value_t = 0.005)]
    clip: f64,
    /// Optional flat key=value config file; flags override file entries.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct EstimateArgs {
    #[command(flatten)]
    shared: SharedArgs,
    /// Comma-separated methods: direct, eblup, mq.
    #[arg(long, default_value = "direct,eblup,mq")]
    methods: String,
    /// MSE mode: "analytic" or "analytic+bootstrap".
    #[arg(long, default_value = "analytic")]
    mse: String,
    /// Bootstrap replications for the add-on variance.
    #[arg(long, default_value_t = 200)]
    boot_reps: usize,
    /// Also write balance/support diagnostics.
    #[arg(long, default_value_t = false)]
    diagnostics: bool,
}

#[derive(Args, Clone)]
struct SimulateArgs {
    #[command(flatten)]
    shared: SharedArgs,
    /// Scenario identifier: 1a..4b.
    #[arg(long)]
    scenario: String,
    /// Number of areas.
    #[arg(long, default_value_t = 50)]
    areas: usize,
    /// Population units per area.
    #[arg(long, default_value_t = 100)]
    pop: usize,
    /// Sampled units per area.
    #[arg(long, default_value_t = 5)]
    samp: usize,
    /// Monte Carlo replications.
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    /// Comma-separated methods to compare.
    #[arg(long, default_value = "direct,eblup,mq")]
    methods: String,
    /// Worker threads (0 = rayon default).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Emit SVG box plots of the per-area metrics.
    #[arg(long, default_value_t = false)]
    svg: bool,
}

#[derive(Args, Clone)]
struct DiagnoseArgs {
    #[command(flatten)]
    shared: SharedArgs,
    /// Column holding propensities (otherwise fit --prop-model).
    #[arg(long)]
    e_col: Option<String>,
    /// Propensity model when no column is given: "glmm".
    #[arg(long)]
    prop_model: Option<String>,
    /// Support bounds: "minmax" or "quantile".
    #[arg(long, default_value = "minmax")]
    support: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Estimate(args) => cmd_estimate(args, false),
        Command::Bootstrap(args) => cmd_estimate(args, true),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Diagnose(args) => cmd_diagnose(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: kind={} message={err}", error_kind(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 1 for user/data errors, 2 for numerical failures.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Schema { .. }
        | Error::Parse { .. }
        | Error::Validation(_)
        | Error::Bounds(_)
        | Error::Contract(_)
        | Error::Io(_)
        | Error::Csv(_) => 1,
        Error::Rank(_)
        | Error::Convergence { .. }
        | Error::Separation(_)
        | Error::Degenerate(_)
        | Error::Bootstrap(_) => 2,
        Error::Pipeline { source, .. } => exit_code(source),
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::Schema { .. } => "schema",
        Error::Parse { .. } => "parse",
        Error::Validation(_) => "validation",
        Error::Bounds(_) => "bounds",
        Error::Rank(_) => "rank",
        Error::Convergence { .. } => "convergence",
        Error::Separation(_) => "separation",
        Error::Degenerate(_) => "degenerate",
        Error::Bootstrap(_) => "bootstrap",
        Error::Contract(_) => "contract",
        Error::Pipeline { .. } => "pipeline",
        Error::Io(_) => "io",
        Error::Csv(_) => "csv",
    }
}

/// Apply config-file defaults: flags win, file fills gaps. The file is a
/// flat `key = value` list using the long flag names.
fn config_overlay(path: &Option<PathBuf>) -> Result<BTreeMap<String, String>, Error> {
    let mut map = BTreeMap::new();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                row: lineno + 1,
                message: format!("config line is not key=value: '{line}'"),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    Ok(map)
}

fn parse_schema(spec: &Option<String>) -> Result<Schema, Error> {
    let mut schema = Schema::default();
    if let Some(spec) = spec {
        for part in spec.split(',') {
            let (k, v) = part.split_once('=').ok_or_else(|| {
                Error::Contract(format!("schema entry '{part}' is not key=value"))
            })?;
            match k.trim() {
                "area" => schema.area = v.trim().to_string(),
                "w" => schema.w = v.trim().to_string(),
                "y" => schema.y = v.trim().to_string(),
                "in_sample" => schema.in_sample = Some(v.trim().to_string()),
                "x" => {
                    schema.x = v.split('+').map(|s| s.trim().to_string()).collect();
                }
                other => {
                    return Err(Error::Contract(format!("unknown schema role '{other}'")))
                }
            }
        }
    }
    Ok(schema)
}

fn parse_methods(spec: &str) -> Result<Vec<Method>, Error> {
    spec.split(',')
        .map(|m| m.trim().parse::<Method>())
        .collect()
}

fn load_input(shared: &SharedArgs) -> Result<PopulationFrame, Error> {
    let path = shared
        .input
        .as_ref()
        .ok_or_else(|| Error::Contract("--input is required".into()))?;
    let schema = parse_schema(&shared.schema)?;
    load_population(path, &schema)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn flags_string(flags: &[sae_ipw::estimators::AreaFlag]) -> String {
    flags
        .iter()
        .map(|f| f.as_str())
        .collect::<Vec<_>>()
        .join(";")
}

fn mse_columns(mse: Option<&AreaMse>) -> [String; 6] {
    match mse {
        None => Default::default(),
        Some(m) => {
            let warn = m
                .warnings
                .iter()
                .map(|w| w.as_str())
                .collect::<Vec<_>>()
                .join(";");
            match m.parts {
                MseParts::Eblup { g1, g2, g3, design } => [
                    g1.to_string(),
                    g2.to_string(),
                    g3.to_string(),
                    design.to_string(),
                    m.total.to_string(),
                    warn,
                ],
                MseParts::Mq {
                    var,
                    bias2,
                    qvar,
                    design,
                } => [
                    var.to_string(),
                    bias2.to_string(),
                    qvar.to_string(),
                    design.to_string(),
                    m.total.to_string(),
                    warn,
                ],
            }
        }
    }
}

fn cmd_estimate(args: EstimateArgs, force_bootstrap: bool) -> Result<(), Error> {
    let mut args = args;
    let overlay = config_overlay(&args.shared.config)?;
    if let Some(v) = overlay.get("clip") {
        if args.shared.clip == 0.005 {
            args.shared.clip = v
                .parse()
                .map_err(|_| Error::Contract(format!("bad clip value '{v}'")))?;
        }
    }
    if let Some(v) = overlay.get("methods") {
        if args.methods == "direct,eblup,mq" {
            args.methods = v.clone();
        }
    }
    let methods = parse_methods(&args.methods)?;
    let with_bootstrap = force_bootstrap || args.mse == "analytic+bootstrap";
    if args.mse != "analytic" && args.mse != "analytic+bootstrap" {
        return Err(Error::Contract(format!("unknown --mse mode '{}'", args.mse)));
    }
    let pop = load_input(&args.shared)?;

    let opts = sae_ipw::estimators::EstimatorOptions {
        clip: args.shared.clip,
        ..Default::default()
    };
    let config_desc = format!(
        "estimate methods={} mse={} boot_reps={} clip={} seed={}",
        args.methods, args.mse, args.boot_reps, args.shared.clip, args.shared.seed
    );
    let mut out = OutputSet::new(&args.shared.out_dir, args.shared.seed, fnv1a(&config_desc));

    // Rows: area, method, estimate, rmse, ci, flags, mse breakdown.
    let mut estimates = String::from(
        "area,method,estimate,rmse,ci_lo,ci_hi,flags,c1,c2,c3,design,mse_total,warnings\n",
    );
    let mut national = String::from("method,estimate\n");
    let mut boot_log =
        String::from("rep,area,tau_star,tau_hat_star,status\n");
    let mut wrote_boot_log = false;

    // The EBLUP pipeline doubles as the propensity source for the direct
    // estimator.
    let need_glmm = methods.contains(&Method::Direct) || methods.contains(&Method::Eblup);
    let eblup = if need_glmm {
        Some(estimate_ipw_eblup(&pop, &opts)?)
    } else {
        None
    };

    for method in &methods {
        match method {
            Method::Direct => {
                let est = eblup.as_ref().expect("glmm ran for direct");
                let table = ipw_direct(&pop.sample_view(), &est.ehat);
                for row in &table.rows {
                    estimates.push_str(&format!(
                        "{},direct,{},,,,{},,,,,,\n",
                        pop.area_label(row.area),
                        fmt_opt(row.estimate),
                        flags_string(&row.flags),
                    ));
                }
            }
            Method::Eblup => {
                let est = eblup.as_ref().expect("eblup ran");
                let mut mse = mse_eblup_analytic(&pop, &est.lmm, &est.weights)?;
                if with_bootstrap {
                    let cfg = BootstrapConfig {
                        b: args.boot_reps,
                        seed: args.shared.seed,
                        method: BootstrapMethod::Parametric,
                    };
                    let boot =
                        parametric_bootstrap_eblup(&est.lmm, &est.glmm, &pop, &cfg, &opts)?;
                    add_bootstrap(&mut mse, &boot);
                    log_bootstrap(&mut boot_log, &pop, &boot);
                    wrote_boot_log = true;
                }
                write_method_rows(&mut estimates, &pop, &est.table, &mse, "eblup");
                let bench = benchmark_weights(&est.weights);
                national.push_str(&format!(
                    "eblup,{}\n",
                    national_effect(&est.table, &bench)?
                ));
            }
            Method::Mq => {
                let est = estimate_ipw_mq(&pop, &opts)?;
                let mut mse = mse_mq_analytic(&pop, &est.ensemble, &est.weights)?;
                if with_bootstrap {
                    let cfg = BootstrapConfig {
                        b: args.boot_reps,
                        seed: args.shared.seed,
                        method: BootstrapMethod::Block,
                    };
                    let boot =
                        block_bootstrap_mq(&pop, &est.ensemble, &est.binary, &cfg, &opts)?;
                    add_bootstrap(&mut mse, &boot);
                    log_bootstrap(&mut boot_log, &pop, &boot);
                    wrote_boot_log = true;
                }
                write_method_rows(&mut estimates, &pop, &est.table, &mse, "mq");
                let bench = benchmark_weights(&est.weights);
                national.push_str(&format!("mq,{}\n", national_effect(&est.table, &bench)?));
            }
        }
    }

    out.add("estimates.csv", estimates);
    out.add("national.csv", national);
    if wrote_boot_log {
        out.add("boot_log.csv", boot_log);
    }
    if args.diagnostics {
        let est = match &eblup {
            Some(e) => e.ehat.clone(),
            None => {
                let fit = fit_logit_laplace_subset(&pop.sample_view(), None)?;
                predict_propensity(&fit, &pop)
            }
        };
        out.add("diagnostics.csv", balance_csv(&pop, &est)?);
    }
    out.write_all()
}

fn write_method_rows(
    buffer: &mut String,
    pop: &PopulationFrame,
    table: &sae_ipw::estimators::AreaEffectTable,
    mse: &[Option<AreaMse>],
    method: &str,
) {
    for row in &table.rows {
        let m = mse[row.area].as_ref();
        let rmse = m.map(|v| v.rmse());
        let ci = match (row.estimate, rmse) {
            (Some(e), Some(r)) => confidence_interval(e, r).ok(),
            _ => None,
        };
        let cols = mse_columns(m);
        buffer.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            pop.area_label(row.area),
            method,
            fmt_opt(row.estimate),
            fmt_opt(rmse),
            fmt_opt(ci.map(|c| c.0)),
            fmt_opt(ci.map(|c| c.1)),
            flags_string(&row.flags),
            cols[0],
            cols[1],
            cols[2],
            cols[3],
            cols[4],
            cols[5],
        ));
    }
}

fn add_bootstrap(mse: &mut [Option<AreaMse>], boot: &sae_ipw::bootstrap::BootstrapVariance) {
    for (j, slot) in mse.iter_mut().enumerate() {
        if let (Some(m), Some(v)) = (slot.as_mut(), boot.var[j]) {
            m.total += v;
        }
    }
}

fn log_bootstrap(
    buffer: &mut String,
    pop: &PopulationFrame,
    boot: &sae_ipw::bootstrap::BootstrapVariance,
) {
    for rec in &boot.log {
        buffer.push_str(&format!(
            "{},{},{},{},{}\n",
            rec.rep,
            rec.area.map(|j| pop.area_label(j).to_string()).unwrap_or_default(),
            fmt_opt(rec.tau_star),
            fmt_opt(rec.tau_hat_star),
            rec.status
        ));
    }
}

fn balance_csv(pop: &PopulationFrame, e: &[f64]) -> Result<String, Error> {
    let report = balance_test(pop, e)?;
    let mut csv = String::from("area,delta,df,p_value,n_treated,n_control,flags\n");
    for row in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            pop.area_label(row.area),
            fmt_opt(row.delta),
            fmt_opt(row.df),
            fmt_opt(row.p_value),
            row.n_treated,
            row.n_control,
            if row.skipped { "skipped" } else { "" }
        ));
    }
    Ok(csv)
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Error> {
    let mut spec = ScenarioSpec::parse_id(&args.scenario)?;
    spec.areas = args.areas;
    spec.pop_per_area = args.pop;
    spec.samp_per_area = args.samp;
    spec.seed = args.shared.seed;
    let methods = parse_methods(&args.methods)?;
    let cfg = StudyConfig::default();

    let config_desc = format!(
        "simulate scenario={} areas={} pop={} samp={} reps={} methods={} seed={}",
        args.scenario,
        args.areas,
        args.pop,
        args.samp,
        args.reps,
        args.methods,
        args.shared.seed
    );
    let mut out = OutputSet::new(&args.shared.out_dir, args.shared.seed, fnv1a(&config_desc));

    let result = if args.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(args.workers)
            .build()
            .map_err(|e| Error::Contract(format!("cannot build thread pool: {e}")))?;
        pool.install(|| run_study(&spec, &methods, args.reps, &cfg))?
    } else {
        run_study(&spec, &methods, args.reps, &cfg)?
    };

    let mut study = String::from("area,method,rb,rrmse,cr\n");
    let mut summary =
        String::from("method,median_abs_rb,median_rrmse,median_cr,median_rmse_rb,failures\n");
    for &method in &methods {
        let rows = result.area_summaries(method);
        for row in &rows {
            study.push_str(&format!(
                "area{:03},{},{},{},{}\n",
                row.area,
                method.as_str(),
                fmt_opt(row.rb),
                fmt_opt(row.rrmse),
                fmt_opt(row.cr)
            ));
        }
        summary.push_str(&format!(
            "{},{},{},{},{},{}\n",
            method.as_str(),
            fmt_opt(result.median_over_areas(method, |a| a.rb.map(f64::abs))),
            fmt_opt(result.median_over_areas(method, |a| a.rrmse)),
            fmt_opt(result.median_over_areas(method, |a| a.cr)),
            fmt_opt(result.median_over_areas(method, |a| a.rmse_rb)),
            result.series(method).failures
        ));
    }
    out.add("study.csv", study);
    out.add("summary.csv", summary);

    let metadata = format!(
        "scenario = {}\nareas = {}\npop_per_area = {}\nsamp_per_area = {}\nreps = {}\n\
         methods = {}\nseed = {}\n",
        spec.id(),
        spec.areas,
        spec.pop_per_area,
        spec.samp_per_area,
        args.reps,
        args.methods,
        args.shared.seed
    );
    out.add("metadata.txt", metadata);

    if args.svg {
        for (name, field) in [
            ("rb", 0usize),
            ("rrmse", 1usize),
        ] {
            let boxes: Vec<BoxSpec> = methods
                .iter()
                .map(|&m| BoxSpec {
                    label: m.as_str().to_string(),
                    values: result
                        .area_summaries(m)
                        .iter()
                        .filter_map(|a| if field == 0 { a.rb } else { a.rrmse })
                        .collect(),
                })
                .collect();
            let title = if field == 0 {
                "Relative bias (%) per area"
            } else {
                "Relative root MSE (%) per area"
            };
            out.add(
                &format!("{name}_boxplot.svg"),
                boxplot_svg(title, "percent", &boxes),
            );
        }
    }
    out.write_all()
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<(), Error> {
    let pop = load_input(&args.shared)?;
    let e = match (&args.e_col, &args.prop_model) {
        (Some(col), _) => {
            // Re-read the named column from the input file.
            let path = args.shared.input.as_ref().unwrap();
            read_column(path, col)?
        }
        (None, Some(model)) if model == "glmm" => {
            let fit = fit_logit_laplace_subset(&pop.sample_view(), None)?;
            predict_propensity(&fit, &pop)
        }
        (None, Some(other)) => {
            return Err(Error::Contract(format!(
                "unknown propensity model '{other}' (expected: glmm)"
            )))
        }
        (None, None) => {
            return Err(Error::Contract(
                "diagnose needs a propensity source: --e-col or --prop-model".into(),
            ))
        }
    };
    if e.len() != pop.n_units() {
        return Err(Error::Validation(format!(
            "propensity column has {} values for {} units",
            e.len(),
            pop.n_units()
        )));
    }
    let bounds = match args.support.as_str() {
        "minmax" => SupportBounds::MinMax,
        "quantile" => SupportBounds::QuantileTrimmed,
        other => {
            return Err(Error::Contract(format!(
                "unknown support bounds '{other}' (expected: minmax, quantile)"
            )))
        }
    };
    let config_desc = format!(
        "diagnose support={} seed={}",
        args.support, args.shared.seed
    );
    let mut out = OutputSet::new(&args.shared.out_dir, args.shared.seed, fnv1a(&config_desc));
    out.add("balance.csv", balance_csv(&pop, &e)?);

    let (_, support) = common_support_filter(&pop, &e, bounds);
    let mut csv = String::from("area,dropped,retained,lo,hi,flags\n");
    for row in &support.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            pop.area_label(row.area),
            row.dropped,
            row.retained,
            fmt_opt(row.lo),
            fmt_opt(row.hi),
            if row.non_overlapping { "non-overlapping" } else { "" }
        ));
    }
    out.add("support.csv", csv);
    out.write_all()
}

fn read_column(path: &PathBuf, col: &str) -> Result<Vec<f64>, Error> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(sae_ipw::Error::from)?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(sae_ipw::Error::from)?
        .iter()
        .map(str::to_string)
        .collect();
    let idx = headers
        .iter()
        .position(|h| h == col)
        .ok_or_else(|| Error::Schema {
            column: col.to_string(),
        })?;
    let mut out = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(sae_ipw::Error::from)?;
        let field = record.get(idx).unwrap_or("");
        out.push(field.parse::<f64>().map_err(|_| Error::Parse {
            row: row_idx + 1,
            message: format!("propensity value '{field}' is not a number"),
        })?);
    }
    Ok(out)
}
