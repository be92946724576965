//! Lee-Carter factor fits on transformed compositions, random-walk-with-drift
//! forecasts of the time factors, and the classical log-rate model.

use std::fmt;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composition::DeathCountPanel;
use crate::error::{Error, Result};
use crate::transforms::{TransformTag, TransformedMatrix};

/// Minimum number of years for a fit (the drift sd needs two differences).
pub const MIN_YEARS: usize = 3;

/// Blocks whose largest absolute entry is at or below this are treated as
/// identically zero.
pub const DEGENERATE_TOLERANCE: f64 = 1e-13;

/// Whether each cause gets its own rank-1 factor or one factor spans all parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactorMode {
    #[default]
    PerCause,
    Global,
}

/// Sign and scale convention applied to the loadings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalization {
    pub mode: FactorMode,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            FactorMode::PerCause => "per-cause",
            FactorMode::Global => "global",
        };
        write!(f, "{mode}; sum(b^2)=1; sum(b)>=0")
    }
}

/// One rank-1 factor: loadings over the block's columns and a time index.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorBlock {
    /// Cause index for per-cause blocks, `None` for the global block.
    pub cause: Option<usize>,
    /// Part-space columns covered by this block.
    pub columns: Vec<usize>,
    pub b: Vec<f64>,
    pub k: Vec<f64>,
    /// The block was identically zero; `k` is all zeros.
    pub degenerate: bool,
}

/// Lee-Carter fit in part space: `w[t][p] = b[p] k[t] + e[t][p]` per block.
#[derive(Debug, Clone, PartialEq)]
pub struct LeeCarterFit {
    pub blocks: Vec<FactorBlock>,
    /// `T x P` residuals, defined by subtraction.
    pub residuals: DMatrix<f64>,
    pub transform_tag: TransformTag,
    pub normalization: Normalization,
}

impl LeeCarterFit {
    pub fn n_years(&self) -> usize {
        self.residuals.nrows()
    }

    pub fn n_parts(&self) -> usize {
        self.residuals.ncols()
    }

    /// Part-space row `b * k` for one time-factor value per block.
    pub fn reconstruct(&self, k_values: &[f64]) -> Vec<f64> {
        let mut w = vec![0.0; self.n_parts()];
        for (block, &k) in self.blocks.iter().zip(k_values) {
            for (&col, &b) in block.columns.iter().zip(&block.b) {
                w[col] = b * k;
            }
        }
        w
    }

    /// Fitted part-space value `b k` for training year `t`.
    pub fn fitted_row(&self, t: usize) -> Vec<f64> {
        let ks: Vec<f64> = self.blocks.iter().map(|b| b.k[t]).collect();
        self.reconstruct(&ks)
    }

    pub fn degenerate_blocks(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.degenerate)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Best rank-1 approximation `k b^T` of a `T x U` block, with `|b| = 1` and
/// `sum(b) >= 0`. Returns `(b, k, degenerate)`.
pub fn rank_one(block: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>, bool)> {
    let (rows, cols) = block.shape();
    if block.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("factor block".into()));
    }
    if block.amax() <= DEGENERATE_TOLERANCE {
        let b = vec![1.0 / (cols as f64).sqrt(); cols];
        return Ok((b, vec![0.0; rows], true));
    }
    let (sigma, v) = leading_right_singular_vector(block);
    if sigma <= 0.0 {
        return Err(Error::NonFinite("rank-1 factor has zero singular value".into()));
    }
    let mut b = v;
    let mut k: Vec<f64> = (0..rows)
        .map(|t| (0..cols).map(|u| block[(t, u)] * b[u]).sum())
        .collect();

    let norm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    b.iter_mut().for_each(|x| *x /= norm);
    k.iter_mut().for_each(|x| *x *= norm);

    let sum: f64 = b.iter().sum();
    let flip = sum < 0.0
        || (sum == 0.0 && b.iter().find(|x| **x != 0.0).is_some_and(|x| *x < 0.0));
    if flip {
        b.iter_mut().for_each(|x| *x = -*x);
        k.iter_mut().for_each(|x| *x = -*x);
    }
    Ok((b, k, false))
}

/// Largest singular value and its right singular vector, by one-sided
/// (Hestenes) Jacobi rotations on the columns of `a`.
fn leading_right_singular_vector(a: &DMatrix<f64>) -> (f64, Vec<f64>) {
    const MAX_SWEEPS: usize = 60;
    let (m, n) = a.shape();
    let mut work = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for r in 0..m {
                    let (x, y) = (work[(r, i)], work[(r, j)]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let (x, y) = (work[(r, i)], work[(r, j)]);
                    work[(r, i)] = c * x - s * y;
                    work[(r, j)] = s * x + c * y;
                }
                for r in 0..n {
                    let (x, y) = (v[(r, i)], v[(r, j)]);
                    v[(r, i)] = c * x - s * y;
                    v[(r, j)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|j| work.column(j).norm()).collect();
    let lead = (0..n).fold(0, |best, j| if norms[j] > norms[best] { j } else { best });
    (norms[lead], v.column(lead).iter().copied().collect())
}

fn gather_columns(m: &DMatrix<f64>, columns: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), columns.len(), |t, j| m[(t, columns[j])])
}

/// Fit the factor structure to transformed training data.
///
/// ILR and alpha coordinates are first mapped back to part space
/// (`H^T z`), where every column is one (age band, cause) part.
pub fn fit(tm: &TransformedMatrix, mode: FactorMode) -> Result<LeeCarterFit> {
    let w = tm.part_space()?;
    let t_n = w.nrows();
    if t_n < MIN_YEARS {
        return Err(Error::TooFewYears {
            needed: MIN_YEARS,
            found: t_n,
        });
    }
    let groups: Vec<(Option<usize>, Vec<usize>)> = match mode {
        FactorMode::Global => vec![(None, (0..w.ncols()).collect())],
        FactorMode::PerCause => {
            let mut causes: Vec<usize> = tm.parts().iter().map(|p| p.cause).collect();
            causes.sort_unstable();
            causes.dedup();
            causes
                .into_iter()
                .map(|c| {
                    let cols = tm
                        .parts()
                        .iter()
                        .enumerate()
                        .filter(|(_, p)| p.cause == c)
                        .map(|(i, _)| i)
                        .collect();
                    (Some(c), cols)
                })
                .collect()
        }
    };

    let blocks = groups
        .into_par_iter()
        .map(|(cause, columns)| {
            let (b, k, degenerate) = rank_one(&gather_columns(&w, &columns))?;
            Ok(FactorBlock {
                cause,
                columns,
                b,
                k,
                degenerate,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut fit = LeeCarterFit {
        blocks,
        residuals: DMatrix::zeros(t_n, w.ncols()),
        transform_tag: tm.tag(),
        normalization: Normalization { mode },
    };
    for t in 0..t_n {
        let fitted = fit.fitted_row(t);
        for (p, f) in fitted.into_iter().enumerate() {
            fit.residuals[(t, p)] = w[(t, p)] - f;
        }
    }
    Ok(fit)
}

/// Random walk with drift for one time-factor series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftModel {
    pub drift: f64,
    /// Sample sd of the first differences, divisor `T - 2`.
    pub innovation_sd: f64,
    pub last_value: f64,
    /// First differences minus the drift.
    pub innovations: Vec<f64>,
}

impl DriftModel {
    pub fn from_series(k: &[f64]) -> Result<Self> {
        let n = k.len();
        if n < MIN_YEARS {
            return Err(Error::TooFewYears {
                needed: MIN_YEARS,
                found: n,
            });
        }
        let drift = (k[n - 1] - k[0]) / (n - 1) as f64;
        let innovations: Vec<f64> = k.windows(2).map(|w| (w[1] - w[0]) - drift).collect();
        let ss: f64 = innovations.iter().map(|e| e * e).sum();
        Ok(Self {
            drift,
            innovation_sd: (ss / (n - 2) as f64).sqrt(),
            last_value: k[n - 1],
            innovations,
        })
    }
}

/// One drift model per factor block, in block order.
pub fn fit_drift(fit: &LeeCarterFit) -> Result<Vec<DriftModel>> {
    fit.blocks
        .iter()
        .map(|b| DriftModel::from_series(&b.k))
        .collect()
}

/// Point forecasts `last + j * drift` for `j = 1..=h`.
pub fn forecast_k(dm: &DriftModel, h: usize) -> Vec<f64> {
    (1..=h).map(|j| dm.last_value + j as f64 * dm.drift).collect()
}

/// Classical Lee-Carter fit of `ln m = mu + b k + e`, one per cause.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalLCFit {
    /// Per cause, time-mean log rate per age band.
    pub mu: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub residuals: Vec<DMatrix<f64>>,
}

impl ClassicalLCFit {
    /// Forecast log rates of cause `c` for the given time-factor value.
    pub fn log_rates(&self, cause: usize, k: f64) -> Vec<f64> {
        self.mu[cause]
            .iter()
            .zip(&self.b[cause])
            .map(|(m, b)| m + b * k)
            .collect()
    }

    /// Point forecast of rates `h` years ahead for every cause (`[cause][j][age]`).
    pub fn forecast_rates(&self, h: usize) -> Result<Vec<Vec<Vec<f64>>>> {
        (0..self.k.len())
            .map(|c| {
                let dm = DriftModel::from_series(&self.k[c])?;
                Ok(forecast_k(&dm, h)
                    .into_iter()
                    .map(|k| self.log_rates(c, k).into_iter().map(f64::exp).collect())
                    .collect())
            })
            .collect()
    }
}

/// Fit the classical model to per-cause `T x U` matrices of central rates.
pub fn fit_classical_lc(rates: &[DMatrix<f64>]) -> Result<ClassicalLCFit> {
    let mut out = ClassicalLCFit {
        mu: Vec::new(),
        b: Vec::new(),
        k: Vec::new(),
        residuals: Vec::new(),
    };
    for m in rates {
        let (t_n, u_n) = m.shape();
        if t_n < MIN_YEARS {
            return Err(Error::TooFewYears {
                needed: MIN_YEARS,
                found: t_n,
            });
        }
        if let Some(i) = m.iter().position(|r| !(*r > 0.0)) {
            // column-major storage
            return Err(Error::NonPositiveRate {
                row: i % t_n,
                col: i / t_n,
            });
        }
        let logs = m.map(f64::ln);
        let mu: Vec<f64> = (0..u_n).map(|u| logs.column(u).mean()).collect();
        let centred = DMatrix::from_fn(t_n, u_n, |t, u| logs[(t, u)] - mu[u]);
        let (b, k, _) = rank_one(&centred)?;
        let residuals = DMatrix::from_fn(t_n, u_n, |t, u| centred[(t, u)] - b[u] * k[t]);
        out.mu.push(mu);
        out.b.push(b);
        out.k.push(k);
        out.residuals.push(residuals);
    }
    Ok(out)
}

/// Central rates `D[t][u][c] / L[t][u]` as one `T x U` matrix per cause.
///
/// `exposures` holds person-years lived, year-major (`T * U` values).
pub fn central_rates(panel: &DeathCountPanel, exposures: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    let (t_n, u_n, c_n) = (
        panel.n_years(),
        panel.age_bands().len(),
        panel.causes().len(),
    );
    if exposures.len() != t_n * u_n {
        return Err(Error::LengthMismatch {
            expected: t_n * u_n,
            found: exposures.len(),
        });
    }
    if exposures.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidPanel("exposures must be positive".into()));
    }
    Ok((0..c_n)
        .map(|c| DMatrix::from_fn(t_n, u_n, |t, u| panel.count(t, u, c) / exposures[t * u_n + u]))
        .collect())
}
