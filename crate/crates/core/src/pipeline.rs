//! End-to-end forecasting: zero handling, composition, geometric-mean
//! centring, transform, Lee-Carter fit, drift forecast, inverse transform
//! and perturbation back by the geometric mean.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::composition::{
    center_rows, compute_geometric_mean_ignoring_zeros, part_index, perturb_by_mean,
    DeathCountPanel, GeometricMeanVector, Part,
};
use crate::error::{Error, Result, Stage, StageExt};
use crate::lee_carter::{self, fit_drift, forecast_k, DriftModel, FactorMode, LeeCarterFit, Normalization};
use crate::transforms::{
    apply_zero_strategy, clr_inverse, inverse, part_space_to_coords, transform_matrix, ClampReport,
    TransformTag, ZeroReport, ZeroStrategy,
};

/// Settings for one pipeline run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub transform: TransformTag,
    pub zero_strategy: ZeroStrategy,
    pub horizon: usize,
    pub factor_mode: FactorMode,
    /// Only used by bootstrap intervals.
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(transform: TransformTag, zero_strategy: ZeroStrategy, horizon: usize) -> Self {
        Self {
            transform,
            zero_strategy,
            horizon,
            factor_mode: FactorMode::PerCause,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.transform.validate()?;
        self.zero_strategy.validate()?;
        if self.horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        Ok(())
    }
}

/// A forecast hitting the simplex boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClampEvent {
    pub year: i32,
    pub part: Part,
    /// `v_p` before clamping.
    pub raw_value: f64,
}

/// Forecast densities for the years after the training window.
///
/// Rows always span every (age band, cause) part of the input panel;
/// omitted parts carry density zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSet {
    pub years: Vec<i32>,
    pub densities: DMatrix<f64>,
    pub parts: Vec<Part>,
    pub age_labels: Vec<String>,
    pub cause_labels: Vec<String>,
    pub clamp_events: Vec<ClampEvent>,
    pub omitted_parts: Vec<Part>,
    pub config: PipelineConfig,
    pub normalization: Normalization,
}

impl ForecastSet {
    pub fn row(&self, j: usize) -> Vec<f64> {
        self.densities.row(j).iter().copied().collect()
    }
}

/// Everything estimated from the training panel.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub config: PipelineConfig,
    pub years: Vec<i32>,
    pub age_labels: Vec<String>,
    pub cause_labels: Vec<String>,
    /// Parts that were modelled (after omission), aligned with `g` and the fit.
    pub parts: Vec<Part>,
    pub g: GeometricMeanVector,
    pub fit: LeeCarterFit,
    pub drift: Vec<DriftModel>,
    pub zero_report: ZeroReport,
}

impl FittedModel {
    /// Steps up to and including the drift fit.
    pub fn fit(panel: &DeathCountPanel, config: &PipelineConfig) -> Result<Self> {
        config.validate()?;
        let (composition, zero_report) =
            apply_zero_strategy(panel, config.zero_strategy).at(Stage::ZeroStrategy)?;
        let g = compute_geometric_mean_ignoring_zeros(&composition);
        if g.values().iter().all(|v| *v == 0.0) {
            return Err(Error::AllZeroVector).at(Stage::GeometricMean);
        }
        let centred = center_rows(&composition, &g).at(Stage::Centring)?;
        let transformed = transform_matrix(&centred, config.transform).at(Stage::Transform)?;
        let fit = lee_carter::fit(&transformed, config.factor_mode).at(Stage::Fit)?;
        let drift = fit_drift(&fit).at(Stage::Drift)?;
        Ok(Self {
            config: *config,
            years: panel.years().to_vec(),
            age_labels: panel.age_bands().to_vec(),
            cause_labels: panel.causes().to_vec(),
            parts: composition.parts().to_vec(),
            g,
            fit,
            drift,
            zero_report,
        })
    }

    pub fn n_full_parts(&self) -> usize {
        self.age_labels.len() * self.cause_labels.len()
    }

    /// Every (age band, cause) part of the panel in part order.
    pub fn full_parts(&self) -> Vec<Part> {
        let c_n = self.cause_labels.len();
        (0..self.n_full_parts())
            .map(|p| crate::composition::part_coords(p, c_n))
            .collect()
    }

    fn full_index(&self, j: usize) -> usize {
        let part = self.parts[j];
        part_index(part.age, part.cause, self.cause_labels.len())
    }

    /// Map a part-space row back to a full-width composition.
    ///
    /// Clamp-report indices refer to full-width parts.
    pub fn to_composition(&self, w: &[f64]) -> Result<(Vec<f64>, ClampReport)> {
        let tag = self.config.transform;
        let (centred, report) = match tag {
            TransformTag::Clr => (clr_inverse(w).at(Stage::InverseTransform)?, ClampReport::default()),
            _ => {
                let coords = part_space_to_coords(w, tag).at(Stage::InverseTransform)?;
                inverse(&coords, tag).at(Stage::InverseTransform)?
            }
        };
        let moved = perturb_by_mean(&centred, &self.g).at(Stage::Perturbation)?;
        let mut full = vec![0.0; self.n_full_parts()];
        for (j, v) in moved.into_iter().enumerate() {
            full[self.full_index(j)] = v;
        }
        let report = ClampReport {
            parts: report.parts.iter().map(|&j| self.full_index(j)).collect(),
            raw_values: report.raw_values,
        };
        Ok((full, report))
    }

    /// Point forecast of the time factors, `[block][j]`.
    pub fn forecast_factors(&self, horizon: usize) -> Vec<Vec<f64>> {
        self.drift.iter().map(|dm| forecast_k(dm, horizon)).collect()
    }

    /// Point forecasts for `horizon` years after the training window.
    pub fn forecast(&self, horizon: usize) -> Result<ForecastSet> {
        let last = *self.years.last().expect("panel has at least one year");
        let ks = self.forecast_factors(horizon);
        let mut densities = DMatrix::zeros(horizon, self.n_full_parts());
        let mut clamp_events = Vec::new();
        let full_parts = self.full_parts();
        for j in 0..horizon {
            let year = last + j as i32 + 1;
            let k_j: Vec<f64> = ks.iter().map(|k| k[j]).collect();
            let (row, report) = self.to_composition(&self.fit.reconstruct(&k_j))?;
            for (p, v) in row.into_iter().enumerate() {
                densities[(j, p)] = v;
            }
            clamp_events.extend(report.parts.iter().zip(&report.raw_values).map(|(&p, &raw)| {
                ClampEvent {
                    year,
                    part: full_parts[p],
                    raw_value: raw,
                }
            }));
        }
        Ok(ForecastSet {
            years: (1..=horizon as i32).map(|j| last + j).collect(),
            densities,
            parts: full_parts,
            age_labels: self.age_labels.clone(),
            cause_labels: self.cause_labels.clone(),
            clamp_events,
            omitted_parts: self.zero_report.omitted_parts.clone(),
            config: PipelineConfig {
                horizon,
                ..self.config
            },
            normalization: self.fit.normalization,
        })
    }

    /// In-sample fitted densities `b k_t` (no residual), one row per training year.
    pub fn fitted(&self) -> Result<DMatrix<f64>> {
        let t_n = self.years.len();
        let mut out = DMatrix::zeros(t_n, self.n_full_parts());
        for t in 0..t_n {
            let (row, _) = self.to_composition(&self.fit.fitted_row(t))?;
            for (p, v) in row.into_iter().enumerate() {
                out[(t, p)] = v;
            }
        }
        Ok(out)
    }
}

/// Fit on the whole panel and forecast `cfg.horizon` years.
pub fn run_point_forecast(panel: &DeathCountPanel, cfg: &PipelineConfig) -> Result<ForecastSet> {
    FittedModel::fit(panel, cfg)?.forecast(cfg.horizon)
}

/// Scale forecast densities by exogenous yearly death totals.
///
/// Totals are supplied by the caller; this crate does not forecast them.
pub fn reconstruct_counts(fs: &ForecastSet, totals: &[f64]) -> Result<DMatrix<f64>> {
    if totals.len() != fs.densities.nrows() {
        return Err(Error::LengthMismatch {
            expected: fs.densities.nrows(),
            found: totals.len(),
        });
    }
    if let Some(index) = totals.iter().position(|t| !(*t > 0.0 && t.is_finite())) {
        return Err(Error::NonPositiveComponent { index });
    }
    Ok(DMatrix::from_fn(
        fs.densities.nrows(),
        fs.densities.ncols(),
        |j, p| fs.densities[(j, p)] * totals[j],
    ))
}
