//! Long-format CSV ingestion of death-count panels and CSV emission of
//! forecasts, tables, bands and plot series.
//!
//! Every emitted file starts with two `#` comment lines: the library
//! version and the JSON run manifest.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::composition::{build_composition, DeathCountPanel};
use crate::error::{Error, Result};
use crate::intervals::IntervalForecast;
use crate::pipeline::ForecastSet;
use crate::tuning::{EvalResult, TuneResult};
use crate::VERSION;

/// Column names of the panel file, in order.
pub const PANEL_HEADER: [&str; 5] = ["year", "age_band", "cause", "sex", "deaths"];

/// Everything a command was run with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub input: String,
    pub sex: Option<String>,
    pub order: Option<String>,
    pub totals: Option<String>,
    pub transform: String,
    pub alpha_grid: Vec<f64>,
    pub zeros: String,
    pub horizon: usize,
    pub n_test: usize,
    pub n_folds: usize,
    pub criterion: String,
    pub score_on: String,
    pub methods: Vec<String>,
    pub n_boot: usize,
    pub coverage: f64,
    pub seed: u64,
    pub out_dir: String,
    pub global_factor: bool,
    pub reclose_bands: bool,
}

impl RunManifest {
    /// The two comment lines heading every output file.
    pub fn header(&self) -> Result<String> {
        Ok(format!("# {VERSION}\n# manifest: {}\n", serde_json::to_string(self)?))
    }
}

/// Explicit label ordering read from a sidecar file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelOrder {
    pub age_bands: Option<Vec<String>>,
    pub causes: Option<Vec<String>>,
}

/// Read a `kind,label` sidecar where `kind` is `age_band` or `cause`.
/// Rows of each kind give that label set's order.
pub fn read_label_order<R: Read>(reader: R) -> Result<LabelOrder> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["kind", "label"] {
        return Err(Error::Parse {
            line: 1,
            message: "order file header must be kind,label".into(),
        });
    }
    let (mut ages, mut causes) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let target = match &rec[0] {
            "age_band" => &mut ages,
            "cause" => &mut causes,
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown kind {other:?}"),
                })
            }
        };
        if target.iter().any(|l| l == &rec[1]) {
            return Err(Error::Parse {
                line,
                message: format!("label {:?} listed twice", &rec[1]),
            });
        }
        target.push(rec[1].to_string());
    }
    Ok(LabelOrder {
        age_bands: (!ages.is_empty()).then_some(ages),
        causes: (!causes.is_empty()).then_some(causes),
    })
}

/// What ingestion found.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub rows_other_sex: usize,
    /// `(year, age_band, cause)` of every zero-count cell.
    pub zero_cells: Vec<(i32, String, String)>,
    pub n_cells: usize,
}

impl IngestReport {
    pub fn zero_share(&self) -> f64 {
        if self.n_cells == 0 {
            0.0
        } else {
            self.zero_cells.len() as f64 / self.n_cells as f64
        }
    }
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn ordered_labels(seen: Vec<String>, explicit: &Option<Vec<String>>, kind: &str) -> Result<Vec<String>> {
    let Some(explicit) = explicit else {
        return Ok(seen);
    };
    let mut a = seen.clone();
    let mut b = explicit.clone();
    a.sort();
    b.sort();
    if a != b {
        return Err(Error::InvalidPanel(format!(
            "{kind} order file lists {explicit:?} but the data has {seen:?}"
        )));
    }
    Ok(explicit.clone())
}

/// Parse a long-format panel, keeping rows of `sex` (or the only sex present).
pub fn read_panel<R: Read>(reader: R, sex: Option<&str>, order: &LabelOrder) -> Result<(DeathCountPanel, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != PANEL_HEADER {
        return Err(Error::Parse {
            line: header.position().map_or(1, |p| p.line()),
            message: format!("header must be {}", PANEL_HEADER.join(",")),
        });
    }

    let mut report = IngestReport::default();
    let (mut ages, mut causes, mut sexes): (Vec<String>, Vec<String>, Vec<String>) = Default::default();
    let mut cells: HashMap<(i32, usize, usize), (f64, u64)> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = line_of(&rec);
        report.rows_read += 1;
        let row_sex = &rec[3];
        if !sexes.iter().any(|s| s == row_sex) {
            sexes.push(row_sex.to_string());
            if sex.is_none() && sexes.len() > 1 {
                return Err(Error::InvalidConfig(format!(
                    "file holds several sexes {sexes:?}; choose one with --sex"
                )));
            }
        }
        if sex.is_some_and(|s| s != row_sex) {
            report.rows_other_sex += 1;
            continue;
        }
        let year: i32 = rec[0].parse().map_err(|_| Error::Parse {
            line,
            message: format!("year {:?} is not an integer", &rec[0]),
        })?;
        let deaths: f64 = rec[4].parse().map_err(|_| Error::Parse {
            line,
            message: format!("deaths {:?} is not a number", &rec[4]),
        })?;
        if !deaths.is_finite() {
            return Err(Error::Parse {
                line,
                message: format!("deaths {:?} is not finite", &rec[4]),
            });
        }
        if deaths < 0.0 {
            return Err(Error::NegativeDeaths { line });
        }
        let index_of = |labels: &mut Vec<String>, l: &str| match labels.iter().position(|x| x == l) {
            Some(i) => i,
            None => {
                labels.push(l.to_string());
                labels.len() - 1
            }
        };
        let u = index_of(&mut ages, &rec[1]);
        let c = index_of(&mut causes, &rec[2]);
        if cells.insert((year, u, c), (deaths, line)).is_some() {
            return Err(Error::DuplicateCell {
                line,
                year,
                age_band: rec[1].to_string(),
                cause: rec[2].to_string(),
            });
        }
    }
    let sex = match sex {
        Some(s) => s.to_string(),
        None => sexes.first().cloned().unwrap_or_default(),
    };
    if cells.is_empty() {
        return Err(Error::InvalidPanel(format!("no rows for sex {sex:?}")));
    }

    let age_order = ordered_labels(ages.clone(), &order.age_bands, "age band")?;
    let cause_order = ordered_labels(causes.clone(), &order.causes, "cause")?;
    let first = cells.keys().map(|k| k.0).min().expect("non-empty");
    let last = cells.keys().map(|k| k.0).max().expect("non-empty");
    let mut counts = Vec::with_capacity(cells.len());
    for year in first..=last {
        for age in &age_order {
            let u = ages.iter().position(|a| a == age).expect("same label set");
            for cause in &cause_order {
                let c = causes.iter().position(|x| x == cause).expect("same label set");
                let Some(&(d, _)) = cells.get(&(year, u, c)) else {
                    return Err(Error::MissingCell {
                        year,
                        age_band: age.clone(),
                        cause: cause.clone(),
                    });
                };
                if d == 0.0 {
                    report.zero_cells.push((year, age.clone(), cause.clone()));
                }
                counts.push(d);
            }
        }
    }
    report.n_cells = counts.len();
    let panel = DeathCountPanel::new((first..=last).collect(), age_order, cause_order, sex, counts)?;
    Ok((panel, report))
}

/// Read a panel file, with an optional label-order sidecar.
pub fn ingest(path: &Path, sex: Option<&str>, order: Option<&Path>) -> Result<(DeathCountPanel, IngestReport)> {
    let order = match order {
        Some(p) => read_label_order(File::open(p)?)?,
        None => LabelOrder::default(),
    };
    read_panel(File::open(path)?, sex, &order)
}

/// Read `year,total` rows of exogenous death totals.
pub fn read_totals<R: Read>(reader: R) -> Result<Vec<(i32, f64)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let bad = |what: &str| Error::Parse {
            line,
            message: format!("bad {what}"),
        };
        if rec.len() != 2 {
            return Err(bad("row; expected year,total"));
        }
        out.push((
            rec[0].parse().map_err(|_| bad("year"))?,
            rec[1].parse().map_err(|_| bad("total"))?,
        ));
    }
    Ok(out)
}

/// Output sink that writes the provenance header first.
pub struct Emitter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> Emitter<W> {
    pub fn new(mut out: W, manifest: &RunManifest, header: &[&str]) -> Result<Self> {
        out.write_all(manifest.header()?.as_bytes())?;
        let mut inner = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        inner.write_record(header)?;
        Ok(Self { inner })
    }

    pub fn row<I, T>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        self.inner.write_record(fields)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

/// Create `dir/name` for writing.
pub fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Long-format panel, readable by [`read_panel`].
pub fn write_panel<W: Write>(panel: &DeathCountPanel, out: W, manifest: &RunManifest) -> Result<()> {
    let mut e = Emitter::new(out, manifest, &PANEL_HEADER)?;
    let c_n = panel.causes().len();
    for (t, year) in panel.years().iter().enumerate() {
        for (u, age) in panel.age_bands().iter().enumerate() {
            for c in 0..c_n {
                e.row([
                    year.to_string(),
                    age.clone(),
                    panel.causes()[c].clone(),
                    panel.sex().to_string(),
                    panel.count(t, u, c).to_string(),
                ])?;
            }
        }
    }
    e.finish()
}

/// `year,age_band,cause,density[,deaths]`.
pub fn write_forecast<W: Write>(fs: &ForecastSet, counts: Option<&nalgebra::DMatrix<f64>>, out: W, manifest: &RunManifest) -> Result<()> {
    let mut header = vec!["year", "age_band", "cause", "density"];
    if counts.is_some() {
        header.push("deaths");
    }
    let mut e = Emitter::new(out, manifest, &header)?;
    for (j, year) in fs.years.iter().enumerate() {
        for (p, part) in fs.parts.iter().enumerate() {
            let mut row = vec![
                year.to_string(),
                fs.age_labels[part.age].clone(),
                fs.cause_labels[part.cause].clone(),
                fs.densities[(j, p)].to_string(),
            ];
            if let Some(m) = counts {
                row.push(m[(j, p)].to_string());
            }
            e.row(row)?;
        }
    }
    e.finish()
}

/// `year,age_band,cause,raw_value` for every clamped forecast cell.
pub fn write_clamps<W: Write>(fs: &ForecastSet, out: W, manifest: &RunManifest) -> Result<()> {
    let mut e = Emitter::new(out, manifest, &["year", "age_band", "cause", "raw_value"])?;
    for ev in &fs.clamp_events {
        e.row([
            ev.year.to_string(),
            fs.age_labels[ev.part.age].clone(),
            fs.cause_labels[ev.part.cause].clone(),
            ev.raw_value.to_string(),
        ])?;
    }
    e.finish()
}

/// `alpha,rmse_x100,mae_x100` then per-fold RMSE and MAE columns.
pub fn write_alpha_grid<W: Write>(tune: &TuneResult, out: W, manifest: &RunManifest) -> Result<()> {
    let n_folds = tune.rows.first().map_or(0, |r| r.per_fold.len());
    let mut header = vec!["alpha".to_string(), "rmse_x100".into(), "mae_x100".into()];
    for f in 1..=n_folds {
        header.push(format!("fold{f}_rmse_x100"));
        header.push(format!("fold{f}_mae_x100"));
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut e = Emitter::new(out, manifest, &header)?;
    for r in &tune.rows {
        let mut row = vec![
            r.alpha().map_or(String::new(), |a| a.to_string()),
            format!("{:.4}", r.rmse_x100),
            format!("{:.4}", r.mae_x100),
        ];
        for s in &r.per_fold {
            row.push(format!("{:.4}", s.rmse_x100));
            row.push(format!("{:.4}", s.mae_x100));
        }
        e.row(row)?;
    }
    e.finish()
}

/// The chosen alpha on a line of its own after the provenance header.
pub fn write_chosen_alpha<W: Write>(tune: &TuneResult, mut out: W, manifest: &RunManifest) -> Result<()> {
    out.write_all(manifest.header()?.as_bytes())?;
    writeln!(out, "{}", tune.best_alpha)?;
    out.flush()?;
    Ok(())
}

/// `method,rmse_x100,mae_x100,scale`.
pub fn write_methods_table<W: Write>(rows: &[EvalResult], out: W, manifest: &RunManifest) -> Result<()> {
    let mut e = Emitter::new(out, manifest, &["method", "rmse_x100", "mae_x100", "scale"])?;
    for r in rows {
        let scale = serde_json::to_value(r.scale)?;
        e.row([
            r.label.clone(),
            format!("{:.4}", r.rmse_x100),
            format!("{:.4}", r.mae_x100),
            scale.as_str().unwrap_or_default().to_string(),
        ])?;
    }
    e.finish()
}

/// `year,age_band,cause,lower,point,upper`.
pub fn write_intervals<W: Write>(iv: &IntervalForecast, out: W, manifest: &RunManifest) -> Result<()> {
    let mut e = Emitter::new(out, manifest, &["year", "age_band", "cause", "lower", "point", "upper"])?;
    for (j, year) in iv.years.iter().enumerate() {
        for (p, part) in iv.parts.iter().enumerate() {
            e.row([
                year.to_string(),
                iv.age_labels[part.age].clone(),
                iv.cause_labels[part.cause].clone(),
                iv.lower[(j, p)].to_string(),
                iv.point[(j, p)].to_string(),
                iv.upper[(j, p)].to_string(),
            ])?;
        }
    }
    e.finish()
}

/// One point of a cause-level plot series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub series: String,
    pub year: i32,
    pub cause: String,
    pub value: f64,
}

/// Sum densities over age bands, one point per (year, cause).
pub fn cause_shares(series: &str, years: &[i32], densities: &nalgebra::DMatrix<f64>, causes: &[String]) -> Vec<PlotPoint> {
    let c_n = causes.len();
    let mut out = Vec::with_capacity(years.len() * c_n);
    for (t, &year) in years.iter().enumerate() {
        for (c, cause) in causes.iter().enumerate() {
            let value = (c..densities.ncols()).step_by(c_n).map(|p| densities[(t, p)]).sum();
            out.push(PlotPoint {
                series: series.to_string(),
                year,
                cause: cause.clone(),
                value,
            });
        }
    }
    out
}

/// Observed cause shares of a panel.
pub fn observed_shares(panel: &DeathCountPanel) -> Result<Vec<PlotPoint>> {
    let m = build_composition(panel)?;
    Ok(cause_shares("observed", panel.years(), m.values(), panel.causes()))
}

/// `series,year,cause,value`.
pub fn write_plotdata<W: Write>(points: &[PlotPoint], out: W, manifest: &RunManifest) -> Result<()> {
    let mut e = Emitter::new(out, manifest, &["series", "year", "cause", "value"])?;
    for pt in points {
        e.row([pt.series.clone(), pt.year.to_string(), pt.cause.clone(), pt.value.to_string()])?;
    }
    e.finish()
}
