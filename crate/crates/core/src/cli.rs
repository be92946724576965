//! Command-line surface: `forecast`, `tune`, `evaluate`, `intervals` and
//! `plotdata`, all sharing one set of run flags.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::composition::DeathCountPanel;
use crate::error::{Error, Result};
use crate::intervals::{bootstrap_intervals, IntervalConfig};
use crate::io::{self, IngestReport, RunManifest};
use crate::lee_carter::FactorMode;
use crate::pipeline::{reconstruct_counts, FittedModel, PipelineConfig};
use crate::transforms::{TransformTag, ZeroStrategy};
use crate::tuning::{
    default_alpha_grid, default_methods, evaluate_methods, make_fold_plan, tune_alpha, Criterion,
    EvalOptions, Method, ScoreScale,
};

/// Forecast cause-of-death compositions with log-ratio and alpha-transformations.
#[derive(Debug, Parser)]
#[command(name = "coda-forecast", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Point forecasts of death densities.
    Forecast(RunArgs),
    /// Choose alpha by expanding-window cross-validation.
    Tune(RunArgs),
    /// Compare methods on the held-out test years.
    Evaluate(RunArgs),
    /// Bootstrap interval forecasts.
    Intervals(RunArgs),
    /// Cause shares over time: observed, fitted and forecast.
    Plotdata(RunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Forecast(_) => "forecast",
            Command::Tune(_) => "tune",
            Command::Evaluate(_) => "evaluate",
            Command::Intervals(_) => "intervals",
            Command::Plotdata(_) => "plotdata",
        }
    }

    pub fn args(&self) -> &RunArgs {
        match self {
            Command::Forecast(a)
            | Command::Tune(a)
            | Command::Evaluate(a)
            | Command::Intervals(a)
            | Command::Plotdata(a) => a,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Long-format CSV with columns year,age_band,cause,sex,deaths.
    #[arg(long)]
    pub input: PathBuf,
    /// Keep rows of this sex; required when the file holds several.
    #[arg(long)]
    pub sex: Option<String>,
    /// Sidecar CSV `kind,label` fixing the age band and cause order.
    #[arg(long)]
    pub order: Option<PathBuf>,
    /// CSV `year,total` of death totals used to turn densities into counts.
    #[arg(long)]
    pub totals: Option<PathBuf>,
    /// clr, ilr, rda, alpha or alpha:<value>.
    #[arg(long, default_value = "alpha")]
    pub transform: String,
    /// Alpha used when --transform is `alpha`.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Comma-separated alpha grid for tuning and evaluation.
    #[arg(long, value_delimiter = ',')]
    pub alpha_grid: Option<Vec<f64>>,
    /// none, omit or replace:<count>.
    #[arg(long, default_value = "none")]
    pub zeros: String,
    #[arg(long, default_value_t = 10)]
    pub horizon: usize,
    /// Years held out at the end of the panel.
    #[arg(long, default_value_t = 4)]
    pub n_test: usize,
    #[arg(long, default_value_t = 4)]
    pub n_folds: usize,
    /// rmse or mae.
    #[arg(long, default_value = "mae")]
    pub criterion: String,
    /// Score on `densities` or on `counts` scaled by observed totals.
    #[arg(long, default_value = "densities")]
    pub score_on: String,
    /// Comma-separated methods for `evaluate`, e.g. clr:omit,ilr:replace:0.5,alpha:0.3.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long, default_value_t = 1000)]
    pub n_boot: usize,
    #[arg(long, default_value_t = 0.9)]
    pub coverage: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// One time factor across all causes instead of one per cause.
    #[arg(long)]
    pub global_factor: bool,
    /// Close the lower and upper bands so each row sums to one.
    #[arg(long)]
    pub reclose_bands: bool,
}

/// Flags resolved into library types.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub pipeline: PipelineConfig,
    pub grid: Vec<f64>,
    pub criterion: Criterion,
    pub scale: ScoreScale,
    pub methods: Vec<Method>,
    pub interval: IntervalConfig,
}

impl RunArgs {
    pub fn transform_tag(&self) -> Result<TransformTag> {
        let tag = match self.transform.trim().to_ascii_lowercase().as_str() {
            "alpha" => TransformTag::Alpha(self.alpha),
            other => other.parse()?,
        };
        tag.validate()?;
        Ok(tag)
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let zeros: ZeroStrategy = self.zeros.parse()?;
        let pipeline = PipelineConfig {
            factor_mode: if self.global_factor {
                FactorMode::Global
            } else {
                FactorMode::PerCause
            },
            seed: self.seed,
            ..PipelineConfig::new(self.transform_tag()?, zeros, self.horizon)
        };
        pipeline.validate()?;
        let grid = self.alpha_grid.clone().unwrap_or_else(default_alpha_grid);
        for &a in &grid {
            TransformTag::Alpha(a).validate()?;
        }
        let scale = match self.score_on.trim().to_ascii_lowercase().as_str() {
            "densities" => ScoreScale::Densities,
            "counts" => ScoreScale::Counts,
            other => return Err(Error::InvalidConfig(format!("unknown score scale {other:?}"))),
        };
        let methods = match &self.methods {
            Some(list) => list.iter().map(|m| m.parse()).collect::<Result<Vec<Method>>>()?,
            None => default_methods(&grid),
        };
        for m in &methods {
            m.transform.validate()?;
            m.zero_strategy.validate()?;
        }
        let interval = IntervalConfig {
            n_boot: self.n_boot,
            coverage: self.coverage,
            seed: self.seed,
            reclose: self.reclose_bands,
        };
        interval.validate()?;
        Ok(Resolved {
            pipeline,
            grid,
            criterion: self.criterion.parse()?,
            scale,
            methods,
            interval,
        })
    }

    /// Provenance record of these flags for `command`.
    pub fn manifest(&self, command: &str, r: &Resolved) -> RunManifest {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        RunManifest {
            command: command.to_string(),
            input: self.input.display().to_string(),
            sex: self.sex.clone(),
            order: path(&self.order),
            totals: path(&self.totals),
            transform: r.pipeline.transform.to_string(),
            alpha_grid: r.grid.clone(),
            zeros: r.pipeline.zero_strategy.to_string(),
            horizon: r.pipeline.horizon,
            n_test: self.n_test,
            n_folds: self.n_folds,
            criterion: r.criterion.to_string(),
            score_on: self.score_on.trim().to_ascii_lowercase(),
            methods: r.methods.iter().map(|m| m.to_string()).collect(),
            n_boot: r.interval.n_boot,
            coverage: r.interval.coverage,
            seed: self.seed,
            out_dir: self.out_dir.display().to_string(),
            global_factor: self.global_factor,
            reclose_bands: self.reclose_bands,
        }
    }
}

fn test_years(panel: &DeathCountPanel, n_test: usize) -> Result<Vec<i32>> {
    let years = panel.years();
    if n_test == 0 || n_test >= years.len() {
        return Err(Error::InsufficientYears(format!(
            "cannot hold out {n_test} of {} years",
            years.len()
        )));
    }
    Ok(years[years.len() - n_test..].to_vec())
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}

/// Run one command; returns the files written.
pub fn execute(command: &Command) -> Result<Vec<PathBuf>> {
    let args = command.args();
    let resolved = args.resolve()?;
    let manifest = args.manifest(command.name(), &resolved);
    let (panel, report) = io::ingest(&args.input, args.sex.as_deref(), args.order.as_deref())?;
    report_zeros(&report);
    let dir = args.out_dir.as_path();
    fs::create_dir_all(dir)?;

    let mut written = vec![write_json(
        dir,
        "manifest.json",
        &serde_json::json!({
            "version": crate::VERSION,
            "manifest": &manifest,
            "ingest": &report,
        }),
    )?];
    let mut emit = |name: &str, f: &mut dyn FnMut(&mut dyn Write) -> Result<()>| -> Result<()> {
        let mut out = io::create(dir, name)?;
        f(&mut out)?;
        out.flush()?;
        written.push(dir.join(name));
        Ok(())
    };

    let cfg = &resolved.pipeline;
    let options = EvalOptions {
        zero_strategy: Some(cfg.zero_strategy),
        factor_mode: cfg.factor_mode,
        scale: resolved.scale,
    };
    match command {
        Command::Forecast(_) => {
            let fs = FittedModel::fit(&panel, cfg)?.forecast(cfg.horizon)?;
            let counts = match &args.totals {
                Some(path) => {
                    let totals = io::read_totals(fs::File::open(path)?)?;
                    let by_year = fs
                        .years
                        .iter()
                        .map(|y| {
                            totals
                                .iter()
                                .find(|(ty, _)| ty == y)
                                .map(|(_, t)| *t)
                                .ok_or_else(|| Error::InvalidConfig(format!("no total for year {y}")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Some(reconstruct_counts(&fs, &by_year)?)
                }
                None => None,
            };
            if !fs.clamp_events.is_empty() {
                eprintln!("note: {} forecast cells were clamped to zero", fs.clamp_events.len());
            }
            emit("forecast.csv", &mut |w| io::write_forecast(&fs, counts.as_ref(), w, &manifest))?;
            emit("clamps.csv", &mut |w| io::write_clamps(&fs, w, &manifest))?;
        }
        Command::Tune(_) => {
            let plan = make_fold_plan(panel.years(), args.n_test, args.n_folds)?;
            let tune = tune_alpha(&panel, &resolved.grid, &plan, resolved.criterion, options)?;
            emit("alpha_grid.csv", &mut |w| io::write_alpha_grid(&tune, w, &manifest))?;
            emit("chosen_alpha", &mut |w| io::write_chosen_alpha(&tune, w, &manifest))?;
            let plan_json = serde_json::json!({
                "version": crate::VERSION,
                "manifest": &manifest,
                "fold_plan": &plan,
            });
            emit("fold_plan.json", &mut |w| {
                serde_json::to_writer_pretty(&mut *w, &plan_json)?;
                writeln!(w)?;
                Ok(())
            })?;
        }
        Command::Evaluate(_) => {
            let test = test_years(&panel, args.n_test)?;
            let rows = evaluate_methods(&panel, &resolved.methods, &test, options)?;
            emit("methods_table.csv", &mut |w| io::write_methods_table(&rows, w, &manifest))?;
        }
        Command::Intervals(_) => {
            let iv = bootstrap_intervals(&panel, cfg, &resolved.interval)?;
            if !iv.order_violations.is_empty() {
                eprintln!("warning: point forecast outside its band in {} cells", iv.order_violations.len());
            }
            if !iv.band_sum_warnings.is_empty() {
                eprintln!("warning: {} band rows sum outside [0.9, 1.1]", iv.band_sum_warnings.len());
            }
            emit("intervals.csv", &mut |w| io::write_intervals(&iv, w, &manifest))?;
        }
        Command::Plotdata(_) => {
            let model = FittedModel::fit(&panel, cfg)?;
            let fitted = model.fitted()?;
            let fs = model.forecast(cfg.horizon)?;
            let mut points = io::observed_shares(&panel)?;
            points.extend(io::cause_shares("fitted", panel.years(), &fitted, panel.causes()));
            points.extend(io::cause_shares("forecast", &fs.years, &fs.densities, panel.causes()));
            emit("plotdata.csv", &mut |w| io::write_plotdata(&points, w, &manifest))?;
        }
    }
    Ok(written)
}

fn report_zeros(report: &IngestReport) {
    if !report.zero_cells.is_empty() {
        eprintln!(
            "note: {} of {} cells are zero ({:.1}%)",
            report.zero_cells.len(),
            report.n_cells,
            100.0 * report.zero_share()
        );
    }
}

/// Cap rayon at `CODA_THREADS` threads when set.
pub fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("CODA_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::InvalidConfig(format!("CODA_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidConfig(e.to_string()))
}

/// Parse `argv`, run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                crate::ErrorFamily::Config.exit_code()
            } else {
                0
            };
            let _ = e.print();
            return code;
        }
    };
    match configure_threads().and_then(|_| execute(&cli.command)) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            0
        }
        Err(e) => {
            let tag = e.stage().map_or_else(|| format!("{:?}", e.family()).to_lowercase(), |s| s.to_string());
            eprintln!("error [{tag}]: {e}");
            e.family().exit_code()
        }
    }
}
