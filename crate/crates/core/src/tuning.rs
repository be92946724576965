//! Expanding-window cross-validation, forecast scoring, alpha grid search
//! and head-to-head method evaluation.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composition::{build_composition, DeathCountPanel};
use crate::error::{Error, Result, Stage, StageExt};
use crate::lee_carter::{FactorMode, MIN_YEARS};
use crate::pipeline::{run_point_forecast, PipelineConfig};
use crate::transforms::{TransformTag, ZeroStrategy};

/// Default alpha grid `{0.1, 0.2, ..., 1.0}`.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

/// One expanding-window fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train_years: Vec<i32>,
    pub validation_years: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
    pub test_years: Vec<i32>,
}

impl FoldPlan {
    pub fn n_folds(&self) -> usize {
        self.folds.len()
    }
}

/// Expanding-window folds over the years before a held-out test block.
///
/// The last `n_test` years are the test set. Of the remaining `M` years,
/// fold `k` (1-based) trains on the first `M - n_folds + k - 1` years and
/// validates on the rest, so fold 1 validates on `n_folds` years and the
/// last fold on one.
pub fn make_fold_plan(years: &[i32], n_test: usize, n_folds: usize) -> Result<FoldPlan> {
    if n_folds == 0 {
        return Err(Error::InsufficientYears("at least one fold is required".into()));
    }
    let pre_test = years
        .len()
        .checked_sub(n_test)
        .ok_or_else(|| Error::InsufficientYears(format!("{} years cannot hold {n_test} test years", years.len())))?;
    let first_train = pre_test.saturating_sub(n_folds);
    if pre_test < n_folds || first_train < MIN_YEARS {
        return Err(Error::InsufficientYears(format!(
            "{} years with {n_test} test years and {n_folds} folds leaves {first_train} training years in fold 1 (need {MIN_YEARS})",
            years.len()
        )));
    }
    let folds = (0..n_folds)
        .map(|k| {
            let train_len = first_train + k;
            Fold {
                train_years: years[..train_len].to_vec(),
                validation_years: years[train_len..pre_test].to_vec(),
            }
        })
        .collect();
    Ok(FoldPlan {
        folds,
        test_years: years[pre_test..].to_vec(),
    })
}

/// RMSE and MAE over every cell, multiplied by 100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub rmse_x100: f64,
    pub mae_x100: f64,
}

/// Score predicted against observed densities.
pub fn score(observed: &DMatrix<f64>, predicted: &DMatrix<f64>) -> Result<Score> {
    if observed.shape() != predicted.shape() {
        return Err(Error::ShapeMismatch(format!(
            "observed {:?} vs predicted {:?}",
            observed.shape(),
            predicted.shape()
        )));
    }
    let n = observed.len();
    if n == 0 {
        return Err(Error::ShapeMismatch("no cells to score".into()));
    }
    let (mut sq, mut abs) = (0.0, 0.0);
    for (o, p) in observed.iter().zip(predicted.iter()) {
        let d = o - p;
        sq += d * d;
        abs += d.abs();
    }
    Ok(Score {
        rmse_x100: 100.0 * (sq / n as f64).sqrt(),
        mae_x100: 100.0 * abs / n as f64,
    })
}

/// What scores are computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreScale {
    /// Death densities (proportions).
    #[default]
    Densities,
    /// Counts: densities scaled by the observed yearly totals.
    Counts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Rmse,
    #[default]
    Mae,
}

impl Criterion {
    pub fn pick(self, s: &Score) -> f64 {
        match self {
            Criterion::Rmse => s.rmse_x100,
            Criterion::Mae => s.mae_x100,
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Rmse => "rmse",
            Criterion::Mae => "mae",
        })
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rmse" => Ok(Criterion::Rmse),
            "mae" => Ok(Criterion::Mae),
            other => Err(Error::InvalidConfig(format!("unknown criterion {other:?}"))),
        }
    }
}

/// A transform paired with a zero strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub transform: TransformTag,
    pub zero_strategy: ZeroStrategy,
}

impl Method {
    pub fn new(transform: TransformTag, zero_strategy: ZeroStrategy) -> Self {
        Self {
            transform,
            zero_strategy,
        }
    }

    /// Human-readable row label, e.g. `CLR (zeros omitted)`.
    pub fn label(&self) -> String {
        let zeros = match self.zero_strategy {
            ZeroStrategy::None => None,
            ZeroStrategy::OmitParts => Some("zeros omitted".to_string()),
            ZeroStrategy::Replace(x) => Some(format!("{x} zero replacement")),
        };
        let base = match self.transform {
            TransformTag::Clr => "CLR".to_string(),
            TransformTag::Ilr => "ILR".to_string(),
            TransformTag::Rda => "RDA".to_string(),
            TransformTag::Alpha(1.0) => "alpha = 1 (RDA)".to_string(),
            TransformTag::Alpha(a) => format!("alpha = {a}"),
        };
        match zeros {
            Some(z) => format!("{base} ({z})"),
            None => base,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.transform, self.zero_strategy)
    }
}

impl FromStr for Method {
    type Err = Error;

    /// `<transform>` or `<transform>:<zeros>`, e.g. `clr:omit`,
    /// `ilr:replace:0.5`, `alpha:0.5`, `alpha:0.5:none`, `rda`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (transform, rest) = if let Some(rest) = s.strip_prefix("alpha:") {
            match rest.split_once(':') {
                Some((a, z)) => (format!("alpha:{a}"), Some(z.to_string())),
                None => (s.clone(), None),
            }
        } else {
            match s.split_once(':') {
                Some((t, z)) => (t.to_string(), Some(z.to_string())),
                None => (s.clone(), None),
            }
        };
        let transform: TransformTag = transform.parse()?;
        let zero_strategy = match rest {
            Some(z) => z.parse()?,
            None => ZeroStrategy::None,
        };
        Ok(Method::new(transform, zero_strategy))
    }
}

/// Standard comparison set: CLR and ILR with zeros omitted or replaced by
/// 0.25 / 0.5 counts, then the alpha-transformation at each `alphas` value.
pub fn default_methods(alphas: &[f64]) -> Vec<Method> {
    let mut out = Vec::new();
    for t in [TransformTag::Clr, TransformTag::Ilr] {
        for z in [
            ZeroStrategy::OmitParts,
            ZeroStrategy::Replace(0.25),
            ZeroStrategy::Replace(0.5),
        ] {
            out.push(Method::new(t, z));
        }
    }
    out.extend(
        alphas
            .iter()
            .map(|&a| Method::new(TransformTag::Alpha(a), ZeroStrategy::None)),
    );
    out
}

/// One row of an evaluation or tuning table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub method: Method,
    pub label: String,
    pub rmse_x100: f64,
    pub mae_x100: f64,
    /// One entry per fold (tuning) or a single entry for the test window.
    pub per_fold: Vec<Score>,
    pub scale: ScoreScale,
}

impl EvalResult {
    pub fn alpha(&self) -> Option<f64> {
        self.method.transform.alpha()
    }
}

fn year_range(panel: &DeathCountPanel, years: &[i32]) -> Result<std::ops::Range<usize>> {
    let first = panel.years()[0];
    let (Some(&a), Some(&b)) = (years.first(), years.last()) else {
        return Err(Error::InsufficientYears("empty year window".into()));
    };
    let start = usize::try_from(a - first).map_err(|_| Error::InsufficientYears(format!("year {a} precedes the panel")))?;
    let end = usize::try_from(b - first + 1).map_err(|_| Error::InsufficientYears(format!("year {b} precedes the panel")))?;
    if end > panel.n_years() {
        return Err(Error::InsufficientYears(format!("year {b} is after the panel")));
    }
    Ok(start..end)
}

/// Train on `train_years`, forecast `target_years`, score against the
/// observed composition of the target years.
pub fn score_window(
    panel: &DeathCountPanel,
    train_years: &[i32],
    target_years: &[i32],
    method: Method,
    factor_mode: FactorMode,
    scale: ScoreScale,
) -> Result<Score> {
    let train = panel.slice_years(year_range(panel, train_years)?)?;
    let target = panel.slice_years(year_range(panel, target_years)?)?;
    let cfg = PipelineConfig {
        factor_mode,
        ..PipelineConfig::new(method.transform, method.zero_strategy, target_years.len())
    };
    let forecast = run_point_forecast(&train, &cfg)?;
    let observed = build_composition(&target).at(Stage::Scoring)?;
    let (mut obs, mut pred) = (observed.values().clone(), forecast.densities);
    if scale == ScoreScale::Counts {
        for (j, total) in target.totals().into_iter().enumerate() {
            obs.row_mut(j).scale_mut(total);
            pred.row_mut(j).scale_mut(total);
        }
    }
    score(&obs, &pred).at(Stage::Scoring)
}

fn average(scores: &[Score]) -> Score {
    let n = scores.len() as f64;
    Score {
        rmse_x100: scores.iter().map(|s| s.rmse_x100).sum::<f64>() / n,
        mae_x100: scores.iter().map(|s| s.mae_x100).sum::<f64>() / n,
    }
}

/// Cross-validated score of every method, fold scores averaged with equal weights.
pub fn cross_validate(
    panel: &DeathCountPanel,
    methods: &[Method],
    plan: &FoldPlan,
    factor_mode: FactorMode,
    scale: ScoreScale,
) -> Result<Vec<EvalResult>> {
    let jobs: Vec<(usize, usize)> = (0..methods.len())
        .flat_map(|m| (0..plan.n_folds()).map(move |f| (m, f)))
        .collect();
    let scores = jobs
        .par_iter()
        .map(|&(m, f)| {
            let fold = &plan.folds[f];
            score_window(
                panel,
                &fold.train_years,
                &fold.validation_years,
                methods[m],
                factor_mode,
                scale,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(methods
        .iter()
        .zip(scores.chunks(plan.n_folds()))
        .map(|(method, folds)| {
            let mean = average(folds);
            EvalResult {
                method: *method,
                label: method.label(),
                rmse_x100: mean.rmse_x100,
                mae_x100: mean.mae_x100,
                per_fold: folds.to_vec(),
                scale,
            }
        })
        .collect())
}

/// Result of an alpha grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best_alpha: f64,
    pub criterion: Criterion,
    /// One row per grid value, in grid order.
    pub rows: Vec<EvalResult>,
}

/// Options shared by tuning and evaluation runs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalOptions {
    pub zero_strategy: Option<ZeroStrategy>,
    pub factor_mode: FactorMode,
    pub scale: ScoreScale,
}

/// Pick alpha from `grid` by cross-validated RMSE or MAE.
///
/// Ties go to the smaller alpha.
pub fn tune_alpha(
    panel: &DeathCountPanel,
    grid: &[f64],
    plan: &FoldPlan,
    criterion: Criterion,
    options: EvalOptions,
) -> Result<TuneResult> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("alpha grid is empty".into()));
    }
    let zeros = options.zero_strategy.unwrap_or(ZeroStrategy::None);
    let methods = grid
        .iter()
        .map(|&a| {
            TransformTag::Alpha(a).validate()?;
            Ok(Method::new(TransformTag::Alpha(a), zeros))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = cross_validate(panel, &methods, plan, options.factor_mode, options.scale)?;
    let best = rows
        .iter()
        .min_by(|a, b| {
            let (va, vb) = (criterion.pick(&score_of(a)), criterion.pick(&score_of(b)));
            va.total_cmp(&vb)
                .then(a.alpha().unwrap_or(1.0).total_cmp(&b.alpha().unwrap_or(1.0)))
        })
        .expect("grid is non-empty");
    Ok(TuneResult {
        best_alpha: best.alpha().expect("alpha methods only"),
        criterion,
        rows,
    })
}

fn score_of(r: &EvalResult) -> Score {
    Score {
        rmse_x100: r.rmse_x100,
        mae_x100: r.mae_x100,
    }
}

/// Fit every method on the pre-test years and score it on the test years.
pub fn evaluate_methods(
    panel: &DeathCountPanel,
    methods: &[Method],
    test_years: &[i32],
    options: EvalOptions,
) -> Result<Vec<EvalResult>> {
    let test_range = year_range(panel, test_years)?;
    if test_range.end != panel.n_years() {
        return Err(Error::InvalidConfig("test window must end with the panel".into()));
    }
    let train_years = &panel.years()[..test_range.start];
    if train_years.len() < MIN_YEARS {
        return Err(Error::InsufficientYears(format!(
            "{} training years before the test window",
            train_years.len()
        )));
    }
    let plan = FoldPlan {
        folds: vec![Fold {
            train_years: train_years.to_vec(),
            validation_years: test_years.to_vec(),
        }],
        test_years: Vec::new(),
    };
    cross_validate(panel, methods, &plan, options.factor_mode, options.scale)
}
