//! The `lawfit` command line.
//!
//! Every subcommand prints a comma-separated table on stdout (or to `--out`)
//! and, with `--report PATH`, writes a JSON report alongside. Exit status is
//! 0 on success, 1 for usage errors and 2 for data or fit errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lawfit_core::analysis::{
    allocation_sweep, annotate_allocations, budget_ladder, differential_perspectives, evaluate_held_out,
    robustness_curve, surface_compare, RobustnessConfig,
};
use lawfit_core::io::{format_grid, load_annotations, load_grid_with_lambda, load_law, save_law, LawFile, Provenance};
use lawfit_core::model::{FarseerParams, DEFAULT_LAMBDA};
use lawfit_core::nonlinear::{fit_nonlinear_report, MultiStartConfig, ObjectiveSpace};
use lawfit_core::piecewise::{fit_farseer_with, residual_diagnostics, PiecewiseConfig, StretchedExp};
use lawfit_core::report::FitMethod;
use lawfit_core::synth::{generate_surface, reference_d_ladder, reference_n_ladder, Ladder, SurfaceSpec};
use lawfit_core::{Error, Family, Law, LossGrid, ScalingLaw};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "LAWFIT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "lawfit", version, about = "Fit and analyse neural scaling laws")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a law to a grid file and save it.
    Fit(FitArgs),
    /// Evaluate a saved law at one point.
    Predict(PredictArgs),
    /// Relative errors of a saved law on a grid.
    Eval(EvalArgs),
    /// Held-out error as the largest fitted model size grows.
    Robustness(RobustnessArgs),
    /// Compute-optimal allocation under C = 6ND.
    Optimal(OptimalArgs),
    /// Differential perspectives and residual series of a grid.
    Diagnose(DiagnoseArgs),
    /// Relative difference between two laws over a lattice.
    Compare(CompareArgs),
    /// Generate a synthetic grid.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FamilyArg {
    Farseer,
    Chinchilla,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Farseer => Family::Farseer,
            FamilyArg::Chinchilla => Family::Chinchilla,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Piecewise,
    Nonlinear,
}

impl From<MethodArg> for FitMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Piecewise => FitMethod::Piecewise,
            MethodArg::Nonlinear => FitMethod::Nonlinear,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Squared,
    SquaredLog,
}

#[derive(Debug, Args)]
struct Output {
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[arg(long)]
    grid: PathBuf,
    /// Ratio between paired data sizes.
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
}

#[derive(Debug, Args)]
struct NonlinearArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    starts: usize,
    #[arg(long, default_value_t = 2000)]
    max_steps: usize,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Squared)]
    objective: ObjectiveArg,
}

impl NonlinearArgs {
    fn config(&self) -> MultiStartConfig {
        MultiStartConfig {
            starts: self.starts,
            seed: self.seed,
            max_steps: self.max_steps,
            objective: match self.objective {
                ObjectiveArg::Squared => ObjectiveSpace::Squared,
                ObjectiveArg::SquaredLog => ObjectiveSpace::SquaredLog,
            },
            ..MultiStartConfig::default()
        }
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long, value_enum, default_value_t = FamilyArg::Farseer)]
    family: FamilyArg,
    #[arg(long, value_enum, default_value_t = MethodArg::Piecewise)]
    method: MethodArg,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    nonlinear: NonlinearArgs,
    /// Law file to write; the parameter table goes to stdout.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    law: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    d: Vec<f64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    law: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
    /// Write per-point residuals here.
    #[arg(long)]
    points: Option<PathBuf>,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
struct RobustnessArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long)]
    held_out_n: f64,
    #[arg(long, value_delimiter = ',', required = true)]
    caps: Vec<f64>,
    #[arg(long, value_enum, default_value_t = FamilyArg::Farseer)]
    family: FamilyArg,
    #[arg(long, value_enum, default_value_t = MethodArg::Piecewise)]
    method: MethodArg,
    #[command(flatten)]
    nonlinear: NonlinearArgs,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
struct OptimalArgs {
    #[arg(long)]
    law: PathBuf,
    #[arg(long, default_value_t = 1e20)]
    c_min: f64,
    #[arg(long, default_value_t = 1e26)]
    c_max: f64,
    #[arg(long, default_value_t = 1)]
    per_decade: usize,
    /// `label,n,d` CSV of configurations to compare with the optimum at equal compute;
    /// the comparison table follows the sweep after a blank line.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Farseer law for the residual series; fitted piecewise when absent.
    #[arg(long)]
    law: Option<PathBuf>,
    /// Directory for the per-series files.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    law_a: PathBuf,
    #[arg(long)]
    law_b: PathBuf,
    /// `lo hi`
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [1e8, 1e12])]
    n_range: Vec<f64>,
    /// `lo hi`
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [1e9, 1e13])]
    d_range: Vec<f64>,
    #[arg(long, default_value_t = 25)]
    resolution: usize,
    /// Write the sign-change points here.
    #[arg(long)]
    crossings: Option<PathBuf>,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value_t = FamilyArg::Farseer)]
    family: FamilyArg,
    /// Comma-separated parameters in canonical order; defaults to the reference Farseer law.
    #[arg(long, value_delimiter = ',')]
    params: Option<Vec<f64>>,
    #[arg(long)]
    n_min: Option<f64>,
    #[arg(long)]
    n_max: Option<f64>,
    #[arg(long)]
    n_ratio: Option<f64>,
    #[arg(long)]
    d_min: Option<f64>,
    #[arg(long)]
    d_max: Option<f64>,
    #[arg(long)]
    d_ratio: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: Output,
}

enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

type CliResult = Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return 1;
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got '{value}'"))?;
    // a pool configured earlier in the same process stays in place
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Fit(a) => fit(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Robustness(a) => robustness(a),
        Command::Optimal(a) => optimal(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Compare(a) => compare(a),
        Command::Synth(a) => synth(a),
    }
}

fn emit(out: &Option<PathBuf>, text: &str) -> CliResult {
    match out {
        Some(path) => write_file(path, text),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| CliError::Data(Error::Io(e.to_string())))
        }
    }
}

fn write_file(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| CliError::Data(Error::Io(format!("{}: {e}", path.display()))))
}

fn write_report(path: &Option<PathBuf>, value: &impl Serialize) -> CliResult {
    let Some(path) = path else { return Ok(()) };
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(Error::Io(e.to_string())))?;
    write_file(path, &(text + "\n"))
}

fn load_grid(args: &GridArgs) -> Result<LossGrid, CliError> {
    if args.lambda.is_nan() || args.lambda <= 1.0 {
        return Err(usage(format!("--lambda must exceed 1, got {}", args.lambda)));
    }
    Ok(load_grid_with_lambda(&args.grid, args.lambda)?)
}

fn family_of(law: &Law) -> Family {
    law.family()
}

fn parameter_table(law: &Law) -> String {
    let mut out = String::from("parameter,value\n");
    for (name, v) in family_of(law).parameter_names().iter().zip(law.parameters()) {
        let _ = writeln!(out, "{name},{v}");
    }
    out
}

fn fit(a: FitArgs) -> CliResult {
    let family = Family::from(a.family);
    if FitMethod::from(a.method) == FitMethod::Piecewise && family == Family::Chinchilla {
        return Err(usage("piecewise fitting is only available for --family farseer"));
    }
    let grid = load_grid(&a.grid)?;
    let (law, report, provenance) = match (FitMethod::from(a.method), family) {
        (FitMethod::Piecewise, Family::Farseer) => {
            let cfg = PiecewiseConfig::default();
            let (params, report) = fit_farseer_with(&grid, &cfg)?;
            let warnings = report.warnings.iter().map(ToString::to_string).collect();
            (
                Law::Farseer(params),
                report,
                Provenance::piecewise(&grid, &cfg, warnings),
            )
        }
        (FitMethod::Piecewise, Family::Chinchilla) => unreachable!("rejected above"),
        (FitMethod::Nonlinear, family) => {
            let cfg = a.nonlinear.config();
            if cfg.starts == 0 {
                return Err(usage("--starts must be at least 1"));
            }
            let (result, report) = fit_nonlinear_report(family, &grid, &cfg)?;
            let warnings = report.warnings.iter().map(ToString::to_string).collect();
            (result.law, report, Provenance::nonlinear(&grid, &cfg, warnings))
        }
    };
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    save_law(&LawFile::with_provenance(law, provenance), &a.out)?;
    let mut table = parameter_table(&law);
    let _ = writeln!(table, "mean_rel_err,{}", report.mean_rel_err);
    let _ = writeln!(table, "max_rel_err,{}", report.max_rel_err);
    let _ = writeln!(table, "objective,{}", report.objective);
    emit(&None, &table)?;
    write_report(&a.report, &report)
}

fn predict(a: PredictArgs) -> CliResult {
    let law = load_law(&a.law)?.law;
    if a.n.len() != a.d.len() && a.n.len() != 1 && a.d.len() != 1 {
        return Err(usage(
            "--n and --d must have the same length, or one of them a single value",
        ));
    }
    let count = a.n.len().max(a.d.len());
    let mut rows = Vec::with_capacity(count);
    let mut table = String::from("n,d,loss\n");
    for i in 0..count {
        let n = a.n[i.min(a.n.len() - 1)];
        let d = a.d[i.min(a.d.len() - 1)];
        let loss = law.loss(n, d)?;
        let _ = writeln!(table, "{n},{d},{loss}");
        rows.push(serde_json::json!({ "n": n, "d": d, "loss": loss }));
    }
    emit(&a.output.out, &table)?;
    write_report(
        &a.output.report,
        &serde_json::json!({ "law": law, "predictions": rows }),
    )
}

fn residual_table(points: &[lawfit_core::report::PointResidual]) -> String {
    let mut out = String::from("n,d,actual,predicted,rel_err\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{},{}", p.n, p.d, p.actual, p.predicted, p.rel_err);
    }
    out
}

fn eval(a: EvalArgs) -> CliResult {
    let law = load_law(&a.law)?.law;
    let grid = load_grid(&a.grid)?;
    let mut report = evaluate_held_out(&law, grid.points())?;
    report.fit_subset_description = format!("{} points from {}", grid.len(), a.grid.grid.display());
    if let Some(path) = &a.points {
        write_file(path, &residual_table(&report.held_out))?;
    }
    let table = format!(
        "metric,value\npoints,{}\nmean_rel_err,{}\nmax_rel_err,{}\n",
        report.held_out.len(),
        report.mean_rel_err,
        report.max_rel_err
    );
    emit(&a.output.out, &table)?;
    write_report(&a.output.report, &report)
}

fn robustness(a: RobustnessArgs) -> CliResult {
    let method = FitMethod::from(a.method);
    let family = Family::from(a.family);
    if method == FitMethod::Piecewise && family == Family::Chinchilla {
        return Err(usage("piecewise fitting is only available for --family farseer"));
    }
    let grid = load_grid(&a.grid)?;
    let cfg = RobustnessConfig {
        piecewise: PiecewiseConfig::default(),
        nonlinear: a.nonlinear.config(),
    };
    let curve = robustness_curve(&grid, a.held_out_n, &a.caps, method, family, &cfg)?;
    for w in &curve.warnings {
        eprintln!("warning: {w}");
    }
    let mut table = String::from("cap,mean_rel_err,max_rel_err,held_out_points\n");
    for (cap, r) in &curve.entries {
        let _ = writeln!(table, "{cap},{},{},{}", r.mean_rel_err, r.max_rel_err, r.held_out.len());
    }
    emit(&a.output.out, &table)?;
    write_report(&a.output.report, &curve)
}

fn optimal(a: OptimalArgs) -> CliResult {
    let law = load_law(&a.law)?.law;
    let budgets = budget_ladder(a.c_min, a.c_max, a.per_decade).map_err(|e| usage(e.to_string()))?;
    let sweep = allocation_sweep(&law, &budgets)?;
    let mut table = String::from("c,n_star,d_star,ratio,loss,at_boundary\n");
    for p in &sweep {
        if p.at_boundary {
            eprintln!("warning: optimum for c={:e} lies at the search boundary", p.c);
        }
        let _ = writeln!(
            table,
            "{},{},{},{},{},{}",
            p.c, p.n_star, p.d_star, p.ratio, p.loss_at_opt, p.at_boundary
        );
    }
    let annotated = match &a.annotations {
        Some(path) => annotate_allocations(&law, &load_annotations(path)?)?,
        None => Vec::new(),
    };
    if !annotated.is_empty() {
        table.push_str("\nlabel,n,d,c,loss,n_star,d_star,loss_at_opt\n");
        for r in &annotated {
            let _ = writeln!(
                table,
                "{},{},{},{},{},{},{},{}",
                r.annotation.label,
                r.annotation.n,
                r.annotation.d,
                r.c,
                r.loss,
                r.optimum.n_star,
                r.optimum.d_star,
                r.optimum.loss_at_opt
            );
        }
    }
    emit(&a.output.out, &table)?;
    write_report(
        &a.output.report,
        &serde_json::json!({ "sweep": sweep, "annotations": annotated }),
    )
}

fn diagnose(a: DiagnoseArgs) -> CliResult {
    let grid = load_grid(&a.grid)?;
    let views = differential_perspectives(&grid)?;
    let params: FarseerParams = match &a.law {
        Some(path) => match load_law(path)?.law {
            Law::Farseer(p) => p,
            Law::Chinchilla(_) => return Err(usage("residual series need a farseer law")),
        },
        None => fit_farseer_with(&grid, &PiecewiseConfig::default())?.0,
    };
    let theta_a = StretchedExp {
        a: params.a1,
        b: params.b1,
        exponent: params.alpha,
    };
    let theta_b = StretchedExp {
        a: params.a2,
        b: params.b2,
        exponent: params.beta,
    };
    let residuals = residual_diagnostics(&grid, &theta_a, &theta_b)?;

    let mut table = String::from("perspective,mean_r2,slices\n");
    for v in &views {
        let r2 = v.mean_r2.map_or_else(|| "unavailable".to_string(), |r| r.to_string());
        let _ = writeln!(table, "{},{r2},{}", perspective_name(v.perspective), v.fits.len());
    }
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(Error::Io(format!("{}: {e}", dir.display()))))?;
        for v in &views {
            let name = perspective_name(v.perspective);
            let mut diffs = String::from("n,d,difference\n");
            for (n, d, r) in &v.differences {
                let _ = writeln!(diffs, "{n},{d},{r}");
            }
            write_file(&dir.join(format!("{name}_differences.csv")), &diffs)?;
            let mut fits = String::from("fixed,slope,intercept,r2,points\n");
            for f in &v.fits {
                let _ = writeln!(fits, "{},{},{},{},{}", f.fixed, f.slope, f.intercept, f.r2, f.points);
            }
            write_file(&dir.join(format!("{name}_fits.csv")), &fits)?;
        }
        let mut o = String::from("n,d,o,centered\n");
        for ((n, d, ov), (_, _, c)) in residuals.o_values.iter().zip(&residuals.centered) {
            let _ = writeln!(o, "{n},{d},{ov},{c}");
        }
        write_file(&dir.join("residual_o.csv"), &o)?;
        let mut g = String::from("n,g\n");
        for (n, gv) in &residuals.g_values {
            let _ = writeln!(g, "{n},{gv}");
        }
        write_file(&dir.join("residual_g.csv"), &g)?;
    }
    emit(&a.output.out, &table)?;
    write_report(
        &a.output.report,
        &serde_json::json!({ "perspectives": views, "law": Law::Farseer(params), "residuals": residuals }),
    )
}

fn perspective_name(p: lawfit_core::analysis::Perspective) -> &'static str {
    use lawfit_core::analysis::Perspective::*;
    match p {
        DataDiffVsData => "data_diff_vs_d",
        DataDiffVsModel => "data_diff_vs_n",
        ModelDiffVsData => "model_diff_vs_d",
        ModelDiffVsModel => "model_diff_vs_n",
    }
}

fn range(v: &[f64], name: &str) -> Result<(f64, f64), CliError> {
    match v {
        [lo, hi] if *lo > 0.0 && hi > lo => Ok((*lo, *hi)),
        _ => Err(usage(format!(
            "--{name} must be two increasing positive values 'lo,hi'"
        ))),
    }
}

fn compare(a: CompareArgs) -> CliResult {
    let law_a = load_law(&a.law_a)?.law;
    let law_b = load_law(&a.law_b)?.law;
    let n_range = range(&a.n_range, "n-range")?;
    let d_range = range(&a.d_range, "d-range")?;
    if a.resolution < 2 {
        return Err(usage("--resolution must be at least 2"));
    }
    let delta = surface_compare(&law_a, &law_b, n_range, d_range, a.resolution)?;
    let mut table = String::from("n,d,delta\n");
    for (n, d, v) in delta.cells() {
        let _ = writeln!(table, "{n},{d},{v}");
    }
    if let Some(path) = &a.crossings {
        let mut c = String::from("n,d,edge\n");
        for z in &delta.zero_crossings {
            let edge = match z.axis {
                lawfit_core::analysis::Axis::N => "n",
                lawfit_core::analysis::Axis::D => "d",
            };
            let _ = writeln!(c, "{},{},{edge}", z.n, z.d);
        }
        write_file(path, &c)?;
    }
    emit(&a.output.out, &table)?;
    write_report(&a.output.report, &delta)
}

fn synth(a: SynthArgs) -> CliResult {
    let family = Family::from(a.family);
    let law = match (&a.params, family) {
        (Some(p), f) => Law::from_parameters(f, p).map_err(|e| usage(e.to_string()))?,
        (None, Family::Farseer) => Law::Farseer(FarseerParams::reference()),
        (None, Family::Chinchilla) => {
            return Err(usage("--params is required for --family chinchilla (A,alpha,B,beta,E)"));
        }
    };
    let (rn, rd) = (reference_n_ladder(), reference_d_ladder());
    let ladder = |min: Option<f64>, max: Option<f64>, ratio: Option<f64>, r: Ladder| {
        Ladder::new(min.unwrap_or(r.min), max.unwrap_or(r.max), ratio.unwrap_or(r.ratio))
            .map_err(|e| usage(e.to_string()))
    };
    let spec = SurfaceSpec {
        law,
        n_ladder: ladder(a.n_min, a.n_max, a.n_ratio, rn)?,
        d_ladder: ladder(a.d_min, a.d_max, a.d_ratio, rd)?,
        noise_sigma: a.sigma,
        noise_schedule: Default::default(),
        seed: a.seed,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let grid = generate_surface(&spec)?;
    emit(&a.output.out, &format_grid(&grid))?;
    write_report(
        &a.output.report,
        &serde_json::json!({ "spec": spec, "points": grid.len() }),
    )
}
