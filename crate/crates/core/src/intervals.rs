//! Bootstrap interval forecasts.
//!
//! Each replicate resamples the centred first differences of every time
//! factor to build a k-path, adds a residual drawn from each cell's own
//! residual history, maps the result back to the simplex and perturbs by
//! the geometric mean. Bands are per-cell empirical quantiles of the
//! replicate densities.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composition::{closure, DeathCountPanel, Part};
use crate::error::{Error, Result};
use crate::pipeline::{FittedModel, PipelineConfig};

/// Fewest training years for which a bootstrap is attempted.
pub const MIN_BOOTSTRAP_YEARS: usize = 4;
/// Fewest bootstrap replicates accepted.
pub const MIN_BOOT: usize = 100;
/// Band rows whose sum falls outside this range are flagged.
pub const BAND_SUM_RANGE: (f64, f64) = (0.9, 1.1);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalConfig {
    pub n_boot: usize,
    pub coverage: f64,
    pub seed: u64,
    /// Close the lower and upper band rows to sum to one.
    pub reclose: bool,
}

impl Default for IntervalConfig {
    fn default() -> Self {
        Self {
            n_boot: 1000,
            coverage: 0.9,
            seed: 0,
            reclose: false,
        }
    }
}

impl IntervalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_boot < MIN_BOOT {
            return Err(Error::InvalidConfig(format!(
                "n_boot must be at least {MIN_BOOT}, got {}",
                self.n_boot
            )));
        }
        if !(self.coverage > 0.0 && self.coverage < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "coverage must lie in (0, 1), got {}",
                self.coverage
            )));
        }
        Ok(())
    }

    /// Lower and upper quantile levels.
    pub fn levels(&self) -> (f64, f64) {
        levels(self.coverage)
    }
}

fn levels(coverage: f64) -> (f64, f64) {
    let tail = (1.0 - coverage) / 2.0;
    (tail, 1.0 - tail)
}

/// Type-7 quantile: linear interpolation between order statistics at
/// position `(n - 1) * level` (zero-based).
pub fn empirical_quantile(samples: &[f64], level: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::InvalidConfig(format!("quantile level {level} outside [0, 1]")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quantile samples".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, level))
}

fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * level;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

/// Replicate forecast densities, `paths[r]` is `horizon x P`.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapSamples {
    pub paths: Vec<DMatrix<f64>>,
    /// Total number of clamped cells over all replicates.
    pub clamp_count: usize,
}

impl BootstrapSamples {
    /// Per-cell lower and upper quantiles for a central `coverage` band.
    ///
    /// `coverage = 0` gives the per-cell median twice.
    pub fn bands(&self, coverage: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if !(0.0..1.0).contains(&coverage) {
            return Err(Error::InvalidConfig(format!("coverage {coverage} outside [0, 1)")));
        }
        let first = self.paths.first().ok_or(Error::EmptySamples)?;
        let (h, p) = first.shape();
        let (lo_level, hi_level) = levels(coverage);
        let mut lower = DMatrix::zeros(h, p);
        let mut upper = DMatrix::zeros(h, p);
        let mut cell = Vec::with_capacity(self.paths.len());
        for j in 0..h {
            for q in 0..p {
                cell.clear();
                cell.extend(self.paths.iter().map(|m| m[(j, q)]));
                cell.sort_by(f64::total_cmp);
                lower[(j, q)] = quantile_sorted(&cell, lo_level);
                upper[(j, q)] = quantile_sorted(&cell, hi_level);
            }
        }
        Ok((lower, upper))
    }
}

/// Simulate `n_boot` replicate forecasts from a fitted model.
///
/// Replicate `r` draws from its own ChaCha stream `r` under `seed`, so the
/// result does not depend on scheduling.
pub fn simulate_paths(model: &FittedModel, horizon: usize, icfg: &IntervalConfig) -> Result<BootstrapSamples> {
    let fit = &model.fit;
    let n_years = fit.n_years();
    let replicates = (0..icfg.n_boot)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(icfg.seed);
            rng.set_stream(r as u64);
            let mut k: Vec<f64> = vec![0.0; model.drift.len()];
            let mut shocks: Vec<f64> = vec![0.0; model.drift.len()];
            let mut out = DMatrix::zeros(horizon, model.n_full_parts());
            let mut clamps = 0;
            for j in 0..horizon {
                for (b, dm) in model.drift.iter().enumerate() {
                    shocks[b] += dm.innovations[rng.random_range(0..dm.innovations.len())];
                    k[b] = dm.last_value + (j + 1) as f64 * dm.drift + shocks[b];
                }
                let mut w = fit.reconstruct(&k);
                for (p, w_p) in w.iter_mut().enumerate() {
                    *w_p += fit.residuals[(rng.random_range(0..n_years), p)];
                }
                let (row, report) = model.to_composition(&w)?;
                clamps += report.parts.len();
                for (q, v) in row.into_iter().enumerate() {
                    out[(j, q)] = v;
                }
            }
            Ok((out, clamps))
        })
        .collect::<Result<Vec<_>>>()?;
    let clamp_count = replicates.iter().map(|(_, c)| c).sum();
    Ok(BootstrapSamples {
        paths: replicates.into_iter().map(|(m, _)| m).collect(),
        clamp_count,
    })
}

/// Interval forecast with per-cell bands around the point forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalForecast {
    pub years: Vec<i32>,
    pub parts: Vec<Part>,
    pub age_labels: Vec<String>,
    pub cause_labels: Vec<String>,
    pub lower: DMatrix<f64>,
    pub point: DMatrix<f64>,
    pub upper: DMatrix<f64>,
    pub config: IntervalConfig,
    /// Cells `(row, part)` where the point lies outside its band.
    pub order_violations: Vec<(usize, usize)>,
    /// Rows whose lower or upper band sums outside [`BAND_SUM_RANGE`]
    /// before any re-closure.
    pub band_sum_warnings: Vec<usize>,
    pub clamp_count: usize,
}

/// Bands from an already fitted model.
pub fn intervals_from_model(model: &FittedModel, horizon: usize, icfg: &IntervalConfig) -> Result<IntervalForecast> {
    icfg.validate()?;
    if model.years.len() < MIN_BOOTSTRAP_YEARS {
        return Err(Error::TooFewYears {
            needed: MIN_BOOTSTRAP_YEARS,
            found: model.years.len(),
        });
    }
    let point = model.forecast(horizon)?;
    let samples = simulate_paths(model, horizon, icfg)?;
    let (mut lower, mut upper) = samples.bands(icfg.coverage)?;

    let mut order_violations = Vec::new();
    for j in 0..horizon {
        for q in 0..lower.ncols() {
            let x = point.densities[(j, q)];
            if x < lower[(j, q)] || x > upper[(j, q)] {
                order_violations.push((j, q));
            }
        }
    }
    let (lo, hi) = BAND_SUM_RANGE;
    let band_sum_warnings = (0..horizon)
        .filter(|&j| {
            let (a, b) = (lower.row(j).sum(), upper.row(j).sum());
            !(lo..=hi).contains(&a) || !(lo..=hi).contains(&b)
        })
        .collect();
    if icfg.reclose {
        for m in [&mut lower, &mut upper] {
            for j in 0..horizon {
                let row: Vec<f64> = m.row(j).iter().copied().collect();
                let closed = closure(&row)?;
                for (q, v) in closed.into_iter().enumerate() {
                    m[(j, q)] = v;
                }
            }
        }
    }
    Ok(IntervalForecast {
        years: point.years,
        parts: point.parts,
        age_labels: point.age_labels,
        cause_labels: point.cause_labels,
        lower,
        point: point.densities,
        upper,
        config: *icfg,
        order_violations,
        band_sum_warnings,
        clamp_count: samples.clamp_count,
    })
}

/// Fit on the whole panel and bootstrap `cfg.horizon` years ahead.
pub fn bootstrap_intervals(panel: &DeathCountPanel, cfg: &PipelineConfig, icfg: &IntervalConfig) -> Result<IntervalForecast> {
    icfg.validate()?;
    if panel.n_years() < MIN_BOOTSTRAP_YEARS {
        return Err(Error::TooFewYears {
            needed: MIN_BOOTSTRAP_YEARS,
            found: panel.n_years(),
        });
    }
    let model = FittedModel::fit(panel, cfg)?;
    intervals_from_model(&model, cfg.horizon, icfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::{TransformTag, ZeroStrategy};
    use proptest::prelude::*;

    #[test]
    fn quantile_examples() {
        let s = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(empirical_quantile(&s, 0.5).unwrap(), 2.5);
        assert_eq!(empirical_quantile(&s, 0.0).unwrap(), 1.0);
        assert_eq!(empirical_quantile(&s, 1.0).unwrap(), 4.0);
        // position 3 * 0.9 = 2.7 between 3 and 4
        assert!((empirical_quantile(&s, 0.9).unwrap() - 3.7).abs() < 1e-12);
        assert!(matches!(empirical_quantile(&[], 0.5), Err(Error::EmptySamples)));
        assert!(empirical_quantile(&s, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn quantile_matches_brute_force(
            xs in prop::collection::vec(-100.0f64..100.0, 1..60),
            level in 0.0f64..=1.0,
        ) {
            // brute force: count-based bracket around position (n - 1) * level
            let n = xs.len();
            let pos = (n - 1) as f64 * level;
            let rank_lo = pos.floor() as usize;
            let rank_hi = pos.ceil() as usize;
            let nth = |r: usize| {
                *xs.iter()
                    .find(|&&x| {
                        let below = xs.iter().filter(|&&y| y < x).count();
                        let equal = xs.iter().filter(|&&y| y == x).count();
                        below <= r && r < below + equal
                    })
                    .unwrap()
            };
            let (a, b) = (nth(rank_lo), nth(rank_hi));
            let expected = a + (pos - rank_lo as f64) * (b - a);
            let got = empirical_quantile(&xs, level).unwrap();
            prop_assert!((got - expected).abs() <= 1e-9 * (1.0 + expected.abs()));
            prop_assert!(got >= a.min(b) - 1e-12 && got <= a.max(b) + 1e-12);
        }
    }

    fn noisy_panel(noise: f64) -> DeathCountPanel {
        let mut counts = Vec::new();
        for t in 0..12 {
            for u in 0..3 {
                for c in 0..2 {
                    let wiggle = noise * (((t * 7 + u * 3 + c * 5) % 11) as f64 - 5.0) / 5.0;
                    let trend = [0.04, -0.03][c] * (u as f64 + 1.0) * t as f64;
                    counts.push(200.0 * (1 + u + 2 * c) as f64 * (trend + wiggle).exp());
                }
            }
        }
        DeathCountPanel::new(
            (2000..2012).collect(),
            vec!["0-29".into(), "30-59".into(), "60+".into()],
            vec!["a".into(), "b".into()],
            "f",
            counts,
        )
        .unwrap()
    }

    fn icfg(seed: u64) -> IntervalConfig {
        IntervalConfig {
            n_boot: 200,
            coverage: 0.9,
            seed,
            reclose: false,
        }
    }

    fn cfg(tag: TransformTag) -> PipelineConfig {
        PipelineConfig::new(tag, ZeroStrategy::None, 3)
    }

    #[test]
    fn seed_determinism() {
        let panel = noisy_panel(0.1);
        let a = bootstrap_intervals(&panel, &cfg(TransformTag::Alpha(0.5)), &icfg(7)).unwrap();
        let b = bootstrap_intervals(&panel, &cfg(TransformTag::Alpha(0.5)), &icfg(7)).unwrap();
        assert_eq!(a, b);
        let c = bootstrap_intervals(&panel, &cfg(TransformTag::Alpha(0.5)), &icfg(8)).unwrap();
        assert_ne!(a.lower, c.lower);
    }

    #[test]
    fn serial_matches_parallel() {
        let panel = noisy_panel(0.1);
        let model = FittedModel::fit(&panel, &cfg(TransformTag::Clr)).unwrap();
        let par = simulate_paths(&model, 2, &icfg(3)).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let ser = pool.install(|| simulate_paths(&model, 2, &icfg(3))).unwrap();
        assert_eq!(par, ser);
    }

    #[test]
    fn degenerate_bootstrap_collapses_to_point() {
        let mut counts = Vec::new();
        for t in 0..8 {
            for c in 0..3 {
                counts.push(100.0 * (1 + c) as f64 * ([0.05, 0.0, -0.05][c] * t as f64).exp());
            }
        }
        let panel = DeathCountPanel::new(
            (1990..1998).collect(),
            vec!["all".into()],
            vec!["x".into(), "y".into(), "z".into()],
            "m",
            counts,
        )
        .unwrap();
        let mut model = FittedModel::fit(&panel, &cfg(TransformTag::Clr)).unwrap();
        model.fit.residuals.fill(0.0);
        for dm in &mut model.drift {
            dm.innovations.iter_mut().for_each(|e| *e = 0.0);
        }
        let iv = intervals_from_model(&model, 3, &icfg(1)).unwrap();
        assert_eq!(iv.lower, iv.point);
        assert_eq!(iv.upper, iv.point);
    }

    #[test]
    fn width_shrinks_with_noise() {
        let model = FittedModel::fit(&noisy_panel(0.2), &cfg(TransformTag::Alpha(0.4))).unwrap();
        let mut widths = Vec::new();
        for scale in [1.0, 0.1, 0.01, 0.0] {
            let mut m = model.clone();
            m.fit.residuals *= scale;
            for dm in &mut m.drift {
                dm.innovations.iter_mut().for_each(|e| *e *= scale);
            }
            let iv = intervals_from_model(&m, 2, &icfg(5)).unwrap();
            widths.push((&iv.upper - &iv.lower).max());
        }
        assert!(widths.windows(2).all(|w| w[1] < w[0] || w[1] == 0.0));
        assert_eq!(widths[3], 0.0);
    }

    #[test]
    fn bands_nest_and_collapse_to_median() {
        let panel = noisy_panel(0.15);
        let model = FittedModel::fit(&panel, &cfg(TransformTag::Ilr)).unwrap();
        let samples = simulate_paths(&model, 3, &icfg(11)).unwrap();
        let (l90, u90) = samples.bands(0.9).unwrap();
        let (l95, u95) = samples.bands(0.95).unwrap();
        assert!(l95.iter().zip(l90.iter()).all(|(a, b)| a <= b));
        assert!(u95.iter().zip(u90.iter()).all(|(a, b)| a >= b));
        let (lm, um) = samples.bands(0.0).unwrap();
        assert_eq!(lm, um);
        let cell: Vec<f64> = samples.paths.iter().map(|m| m[(1, 2)]).collect();
        assert_eq!(lm[(1, 2)], empirical_quantile(&cell, 0.5).unwrap());
    }

    #[test]
    fn every_path_row_is_a_composition() {
        for tag in [TransformTag::Clr, TransformTag::Alpha(0.3), TransformTag::Rda] {
            let model = FittedModel::fit(&noisy_panel(0.3), &cfg(tag)).unwrap();
            let samples = simulate_paths(&model, 4, &icfg(2)).unwrap();
            for m in &samples.paths {
                for j in 0..m.nrows() {
                    assert!((m.row(j).sum() - 1.0).abs() < 1e-10);
                    assert!(m.row(j).iter().all(|v| *v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn reclosed_bands_sum_to_one() {
        let panel = noisy_panel(0.2);
        let mut ic = icfg(4);
        ic.reclose = true;
        let iv = bootstrap_intervals(&panel, &cfg(TransformTag::Alpha(0.5)), &ic).unwrap();
        for j in 0..3 {
            assert!((iv.lower.row(j).sum() - 1.0).abs() < 1e-12);
            assert!((iv.upper.row(j).sum() - 1.0).abs() < 1e-12);
        }
        let raw = bootstrap_intervals(&panel, &cfg(TransformTag::Alpha(0.5)), &icfg(4)).unwrap();
        assert_eq!(iv.band_sum_warnings, raw.band_sum_warnings);
        assert_ne!(iv.lower, raw.lower);
    }

    #[test]
    fn config_errors() {
        let panel = noisy_panel(0.1);
        let mut ic = icfg(0);
        ic.n_boot = 10;
        assert!(matches!(
            bootstrap_intervals(&panel, &cfg(TransformTag::Clr), &ic),
            Err(Error::InvalidConfig(_))
        ));
        let short = panel.slice_years(0..3).unwrap();
        assert!(matches!(
            bootstrap_intervals(&short, &cfg(TransformTag::Clr), &icfg(0)),
            Err(Error::TooFewYears { needed: 4, found: 3 })
        ));
        let mut ic = icfg(0);
        ic.coverage = 1.0;
        assert!(ic.validate().is_err());
    }
}
