//! `acdc`: screening, diagnostics, population projections and simulation
//! experiments from the command line.
//!
//! Exit codes: 0 on success, 2 for bad arguments, configs or inputs, 3 when
//! a numerical routine fails.

mod config;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acdc_core::data::{self, Dataset};
use acdc_core::engine::{self, AcOptions, ConditionVariant};
use acdc_core::experiments;
use acdc_core::faithfulness::{self, Example, ExampleParams, GridFunction};
use acdc_core::shape::{Shape, ZERO_THRESHOLD};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use config::{CvFile, PathFile, RecoverFile, SimulateFile};

#[derive(Parser)]
#[command(name = "acdc", version, about = "Variable screening for additive convex regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the sparse additive convex model and write it as JSON.
    Fit(FitArgs),
    /// Run both stages and write the screening report as JSON.
    Screen(ScreenArgs),
    /// Check the deterministic zero condition for the residual of a fit
    /// restricted to a support.
    Diagnose(DiagnoseArgs),
    /// Population additive projections of the built-in examples, as csv.
    Faithfulness(FaithfulnessArgs),
    /// Draw a dataset from a simulation config and write it as csv.
    Simulate(ExperimentArgs),
    /// Exact-recovery rates over a grid of sample sizes.
    Recover(ExperimentArgs),
    /// Norms and selections along a λ grid.
    Path(ExperimentArgs),
    /// Repeated k-fold prediction error along a λ grid.
    Cv(ExperimentArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Csv file with a header row.
    #[arg(long)]
    input: PathBuf,
    /// Name of the response column.
    #[arg(long)]
    response: String,
    /// Penalty; defaults to 4·sqrt(ln(np)/n).
    #[arg(long)]
    lambda: Option<f64>,
    /// Relative convergence tolerance of block coordinate descent.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_cycles: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ScreenArgs {
    #[command(flatten)]
    fit: FitArgs,
    /// Sup-norms at or below this count as zero.
    #[arg(long, default_value_t = ZERO_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    screen: ScreenArgs,
    /// Comma-separated column names or 0-based indices of the support; the
    /// screened selection when absent.
    #[arg(long)]
    support: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Projection {
    Additive,
    Convex,
}

#[derive(Args)]
struct FaithfulnessArgs {
    /// Example name; all examples when absent.
    #[arg(long)]
    example: Option<String>,
    /// Points per axis.
    #[arg(long)]
    resolution: Option<usize>,
    /// Correlation of the Gaussian examples.
    #[arg(long)]
    alpha: Option<f64>,
    /// Unconstrained backfitting, or convex components followed by the
    /// concave fits of zeroed axes.
    #[arg(long, value_enum, default_value_t = Projection::Additive)]
    projection: Projection,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 5000)]
    max_sweeps: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML config, or JSON when the name ends in `.json`.
    #[arg(long)]
    config: PathBuf,
    /// Csv output; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    /// JSON metadata; next to the csv output when absent, stderr without
    /// either.
    #[arg(long)]
    metadata: Option<PathBuf>,
}

/// Error with its exit code.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<acdc_core::Error> for Failure {
    fn from(e: acdc_core::Error) -> Self {
        Failure {
            code: if e.is_numeric() { 3 } else { 2 },
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::config(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::config(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => fit(&a),
        Command::Screen(a) => screen(&a),
        Command::Diagnose(a) => diagnose(&a),
        Command::Faithfulness(a) => faithfulness(&a),
        Command::Simulate(a) => simulate(&a),
        Command::Recover(a) => recover(&a),
        Command::Path(a) => path(&a),
        Command::Cv(a) => cv(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => {
            Box::new(BufWriter::new(File::create(p).map_err(|e| {
                Failure::config(format!("cannot create {}: {e}", p.display()))
            })?))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> Result<(), Failure> {
    let mut out = sink(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn load_data(a: &FitArgs) -> Result<(Dataset, AcOptions), Failure> {
    let ds = data::load_csv(&a.input, &a.response)?;
    let mut opts = AcOptions::for_dataset(&ds);
    if let Some(l) = a.lambda {
        opts.lambda = l;
    }
    if let Some(t) = a.tol {
        opts.tol = t;
    }
    if let Some(m) = a.max_cycles {
        opts.max_cycles = m;
    }
    Ok((ds, opts))
}

fn fit(a: &FitArgs) -> Result<(), Failure> {
    let (ds, opts) = load_data(a)?;
    let model = engine::fit_ac(&ds, &opts)?;
    write_json(
        a.output.as_deref(),
        &json!({
            "names": ds.names(),
            "options": opts,
            "objective": engine::additive_objective(ds.y(), &model),
            "model": model,
        }),
    )
}

fn selected_names(ds: &Dataset, selected: &[usize]) -> Vec<String> {
    selected.iter().map(|&k| ds.names()[k].clone()).collect()
}

fn screen(a: &ScreenArgs) -> Result<(), Failure> {
    let (ds, opts) = load_data(&a.fit)?;
    let run = engine::screen_with(&ds, &opts, a.threshold, None)?;
    write_json(
        a.fit.output.as_deref(),
        &json!({
            "names": ds.names(),
            "selected_names": selected_names(&ds, &run.report.selected),
            "report": run.report,
        }),
    )
}

fn parse_support(ds: &Dataset, text: &str) -> Result<Vec<usize>, Failure> {
    let mut out = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let k = match ds.index_of(item) {
            Some(k) => k,
            None => item
                .parse::<usize>()
                .map_err(|_| Failure::config(format!("unknown column {item:?}")))?,
        };
        if k >= ds.p() {
            return Err(Failure::config(format!(
                "column index {k} out of range (p = {})",
                ds.p()
            )));
        }
        out.push(k);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn diagnose(a: &DiagnoseArgs) -> Result<(), Failure> {
    let (ds, opts) = load_data(&a.screen.fit)?;
    let support = match &a.support {
        Some(text) => parse_support(&ds, text)?,
        None => {
            engine::screen_with(&ds, &opts, a.screen.threshold, None)?
                .report
                .selected
        }
    };
    let shapes: Vec<(usize, Shape)> = support.iter().map(|&k| (k, Shape::Convex)).collect();
    let restricted = engine::fit_additive(&ds, &shapes, &opts, None)?;
    let r = engine::residual(&ds, &restricted);
    let complement: Vec<usize> = (0..ds.p()).filter(|k| support.binary_search(k).is_err()).collect();
    // each block is the univariate problem at λ/2
    let block_lambda = opts.block_options().lambda;
    let report = engine::check_deterministic_condition(&ds, &r, &complement, block_lambda)?;
    write_json(
        a.screen.fit.output.as_deref(),
        &json!({
            "names": ds.names(),
            "support": support,
            "lambda": opts.lambda,
            "block_lambda": block_lambda,
            "main_text_holds": report.holds_all(ConditionVariant::MainText),
            "appendix_holds": report.holds_all(ConditionVariant::Appendix),
            "report": report,
        }),
    )
}

fn faithfulness(a: &FaithfulnessArgs) -> Result<(), Failure> {
    let examples = match &a.example {
        Some(name) => vec![name.parse::<Example>()?],
        None => Example::ALL.to_vec(),
    };
    let mut params = ExampleParams {
        resolution: a.resolution,
        ..ExampleParams::default()
    };
    if let Some(alpha) = a.alpha {
        params.alpha = alpha;
    }
    let mut out = sink(a.output.as_deref())?;
    writeln!(out, "example,component,index,x,value")?;
    for ex in examples {
        let (f, dens) = faithfulness::canonical_example(ex, &params)?;
        let mut rows: Vec<(String, GridFunction)> = Vec::new();
        match a.projection {
            Projection::Additive => {
                let proj = faithfulness::additive_projection_grid(&f, &dens, a.tol, a.max_sweeps)?;
                rows.extend(
                    proj.components
                        .into_iter()
                        .enumerate()
                        .map(|(k, c)| (format!("f{}", k + 1), c)),
                );
            }
            Projection::Convex => {
                let proj = faithfulness::convex_additive_projection_grid(&f, &dens, a.tol, a.max_sweeps)?;
                for (k, c) in proj.components.iter().enumerate() {
                    if c.sup_norm() <= ZERO_THRESHOLD {
                        let g = faithfulness::decoupled_concave_projection_grid(&f, &dens, &proj, k)?;
                        rows.push((format!("g{}", k + 1), g));
                    }
                }
                let convex = proj
                    .components
                    .into_iter()
                    .enumerate()
                    .map(|(k, c)| (format!("f{}", k + 1), c));
                rows.splice(0..0, convex);
            }
        }
        for (label, comp) in rows {
            for (i, (x, v)) in comp.axes()[0].iter().zip(comp.values()).enumerate() {
                writeln!(out, "{},{label},{i},{x:?},{v:?}", ex.name())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the metadata record for an experiment run.
fn write_metadata(
    a: &ExperimentArgs,
    command: &str,
    config_text: &str,
    config: &impl Serialize,
    seed: Option<u64>,
    summary: serde_json::Value,
) -> Result<(), Failure> {
    let meta = json!({
        "command": command,
        "config_path": a.config,
        "config_sha256": hex(&Sha256::digest(config_text.as_bytes())),
        "config": config,
        "seed": seed,
        "rng": "chacha20",
        "versions": {
            "acdc": env!("CARGO_PKG_VERSION"),
            "acdc-core": acdc_core::VERSION,
        },
        "summary": summary,
    });
    let target = a
        .metadata
        .clone()
        .or_else(|| a.output.as_ref().map(|p| p.with_extension("json")));
    match target {
        Some(p) => write_json(Some(&p), &meta),
        None => {
            eprintln!("{}", serde_json::to_string_pretty(&meta)?);
            Ok(())
        }
    }
}

fn simulate(a: &ExperimentArgs) -> Result<(), Failure> {
    let file = config::load::<SimulateFile>(&a.config)?;
    let cfg = file.value.simulate.to_config()?;
    let ds = experiments::simulate(&cfg)?;
    let mut out = sink(a.output.as_deref())?;
    data::write_csv(&ds, "y", &mut out)?;
    out.flush()?;
    write_metadata(
        a,
        "simulate",
        &file.text,
        &file.value,
        Some(cfg.seed),
        json!({ "n": ds.n(), "p": ds.p(), "relevant": cfg.relevant, "q": cfg.q }),
    )
}

fn recover(a: &ExperimentArgs) -> Result<(), Failure> {
    let file = config::load::<RecoverFile>(&a.config)?;
    let cfg = file.value.simulate.to_config()?;
    let table = experiments::recovery_curve(&cfg, &file.value.n_grid, file.value.trials)?;
    let mut out = sink(a.output.as_deref())?;
    writeln!(out, "n,p,trials,successes,exact_recovery_rate")?;
    for r in &table.rows {
        writeln!(
            out,
            "{},{},{},{},{:?}",
            r.n, r.p, r.trials, r.successes, r.exact_recovery_rate
        )?;
    }
    out.flush()?;
    write_metadata(
        a,
        "recover",
        &file.text,
        &file.value,
        Some(cfg.seed),
        json!({ "q": cfg.q }),
    )
}

fn path(a: &ExperimentArgs) -> Result<(), Failure> {
    let file = config::load::<PathFile>(&a.config)?;
    let ds = file.value.data.load(&file.dir)?;
    let result =
        experiments::regularization_path(&ds, &file.value.lambda_grid, &AcOptions::new(0.0), file.value.threshold)?;
    let mut out = sink(a.output.as_deref())?;
    let norm_cols: Vec<String> = ds.names().iter().map(|n| format!("norm_{n}")).collect();
    writeln!(
        out,
        "lambda,normalized_norm,n_selected,selected,{}",
        norm_cols.join(",")
    )?;
    for t in 0..result.lambdas.len() {
        let selected: Vec<String> = selected_names(&ds, &result.selected[t]);
        let norms: Vec<String> = result.ac_norms[t].iter().map(|v| format!("{v:?}")).collect();
        writeln!(
            out,
            "{:?},{:?},{},{},{}",
            result.lambdas[t],
            result.normalized_norm[t],
            selected.len(),
            selected.join(";"),
            norms.join(",")
        )?;
    }
    out.flush()?;
    let seed = file.value.data.simulate.as_ref().map(|s| s.seed);
    write_metadata(
        a,
        "path",
        &file.text,
        &file.value,
        seed,
        json!({ "monotonicity_violations": result.monotonicity_violations }),
    )
}

fn cv(a: &ExperimentArgs) -> Result<(), Failure> {
    let file = config::load::<CvFile>(&a.config)?;
    let c = &file.value;
    let ds = c.data.load(&file.dir)?;
    let table = experiments::cross_validate(&ds, c.folds, &c.lambda_grid, c.repeats, c.seed, &AcOptions::new(0.0))?;
    let mut out = sink(a.output.as_deref())?;
    writeln!(out, "lambda,mse_mean,mse_sd,evaluations")?;
    for r in &table.rows {
        writeln!(out, "{:?},{:?},{:?},{}", r.lambda, r.mse_mean, r.mse_sd, r.evaluations)?;
    }
    out.flush()?;
    let best: BTreeMap<&str, f64> = table
        .best()
        .map(|b| BTreeMap::from([("lambda", b.lambda), ("mse_mean", b.mse_mean)]))
        .unwrap_or_default();
    write_metadata(a, "cv", &file.text, c, Some(c.seed), json!({ "best": best }))
}
