//! Death-count panels, composition matrices and the simplex operations
//! (closure, perturbation, geometric-mean centring) built on them.
//!
//! Parts are ordered with the cause index running faster than the age
//! index: part `p = u * C + c` for zero-based age band `u` and cause `c`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum tolerance for compositions.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

/// An (age band, cause) pair identifying one part of the composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Part {
    pub age: usize,
    pub cause: usize,
}

/// Flat part index for `(age, cause)` given `n_causes` causes.
pub fn part_index(age: usize, cause: usize, n_causes: usize) -> usize {
    age * n_causes + cause
}

/// Inverse of [`part_index`].
pub fn part_coords(p: usize, n_causes: usize) -> Part {
    Part {
        age: p / n_causes,
        cause: p % n_causes,
    }
}

/// Dense panel of death counts for one sex, indexed `[year][age band][cause]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeathCountPanel {
    years: Vec<i32>,
    age_bands: Vec<String>,
    causes: Vec<String>,
    sex: String,
    counts: Vec<f64>,
}

impl DeathCountPanel {
    /// `counts` is laid out year-major, then age band, then cause.
    pub fn new(
        years: Vec<i32>,
        age_bands: Vec<String>,
        causes: Vec<String>,
        sex: impl Into<String>,
        counts: Vec<f64>,
    ) -> Result<Self> {
        if years.is_empty() || age_bands.is_empty() || causes.is_empty() {
            return Err(Error::InvalidPanel(
                "panel needs at least one year, age band and cause".into(),
            ));
        }
        for w in years.windows(2) {
            if w[1] != w[0] + 1 {
                return Err(Error::InvalidPanel(format!(
                    "years must be consecutive: {} followed by {}",
                    w[0], w[1]
                )));
            }
        }
        let expected = years.len() * age_bands.len() * causes.len();
        if counts.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                found: counts.len(),
            });
        }
        if let Some((index, &value)) = counts
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(if value.is_finite() {
                Error::NegativeEntry { index, value }
            } else {
                Error::NonFinite(format!("count at flat index {index}"))
            });
        }
        Ok(Self {
            years,
            age_bands,
            causes,
            sex: sex.into(),
            counts,
        })
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn age_bands(&self) -> &[String] {
        &self.age_bands
    }

    pub fn causes(&self) -> &[String] {
        &self.causes
    }

    pub fn sex(&self) -> &str {
        &self.sex
    }

    pub fn n_years(&self) -> usize {
        self.years.len()
    }

    pub fn n_parts(&self) -> usize {
        self.age_bands.len() * self.causes.len()
    }

    pub fn count(&self, t: usize, u: usize, c: usize) -> f64 {
        self.counts[(t * self.age_bands.len() + u) * self.causes.len() + c]
    }

    /// Counts of year `t` in part order.
    pub fn year_row(&self, t: usize) -> &[f64] {
        let p = self.n_parts();
        &self.counts[t * p..(t + 1) * p]
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    /// Total deaths per year.
    pub fn totals(&self) -> Vec<f64> {
        (0..self.n_years())
            .map(|t| self.year_row(t).iter().sum())
            .collect()
    }

    /// Sub-panel covering the half-open year-index range.
    pub fn slice_years(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.n_years() {
            return Err(Error::InvalidPanel(format!(
                "year range {range:?} outside 0..{}",
                self.n_years()
            )));
        }
        let p = self.n_parts();
        Self::new(
            self.years[range.clone()].to_vec(),
            self.age_bands.clone(),
            self.causes.clone(),
            self.sex.clone(),
            self.counts[range.start * p..range.end * p].to_vec(),
        )
    }

    /// Same labels with replaced counts.
    pub fn with_counts(&self, counts: Vec<f64>) -> Result<Self> {
        Self::new(
            self.years.clone(),
            self.age_bands.clone(),
            self.causes.clone(),
            self.sex.clone(),
            counts,
        )
    }

    /// `(year, age band, cause)` index triples of every zero cell.
    pub fn zero_cells(&self) -> Vec<(usize, usize, usize)> {
        let (u_n, c_n) = (self.age_bands.len(), self.causes.len());
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, v)| **v == 0.0)
            .map(|(i, _)| (i / (u_n * c_n), (i / c_n) % u_n, i % c_n))
            .collect()
    }
}

/// `T x P` matrix of death densities; every row is a composition.
///
/// After part omission the matrix may carry fewer columns than the panel
/// has parts; `parts` maps each column back to its (age band, cause) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionMatrix {
    values: DMatrix<f64>,
    years: Vec<i32>,
    parts: Vec<Part>,
    age_labels: Vec<String>,
    cause_labels: Vec<String>,
}

impl CompositionMatrix {
    /// Validates non-negativity and unit row sums.
    pub fn new(
        values: DMatrix<f64>,
        years: Vec<i32>,
        parts: Vec<Part>,
        age_labels: Vec<String>,
        cause_labels: Vec<String>,
    ) -> Result<Self> {
        if values.nrows() != years.len() {
            return Err(Error::LengthMismatch {
                expected: years.len(),
                found: values.nrows(),
            });
        }
        if values.ncols() != parts.len() {
            return Err(Error::LengthMismatch {
                expected: parts.len(),
                found: values.ncols(),
            });
        }
        for (t, row) in values.row_iter().enumerate() {
            if let Some((index, &value)) = row.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
                return Err(Error::NegativeEntry { index, value });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidPanel(format!(
                    "row {t} sums to {sum}, not 1"
                )));
            }
        }
        Ok(Self {
            values,
            years,
            parts,
            age_labels,
            cause_labels,
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn parts(&self) -> &[Part] {
        &self.parts
    }

    pub fn age_labels(&self) -> &[String] {
        &self.age_labels
    }

    pub fn cause_labels(&self) -> &[String] {
        &self.cause_labels
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_parts(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, t: usize) -> Vec<f64> {
        self.values.row(t).iter().copied().collect()
    }

    pub(crate) fn with_values(&self, values: DMatrix<f64>) -> Result<Self> {
        Self::new(
            values,
            self.years.clone(),
            self.parts.clone(),
            self.age_labels.clone(),
            self.cause_labels.clone(),
        )
    }

    /// Keep only the listed columns and re-close every row.
    pub fn select_parts(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() {
            return Err(Error::AllPartsDropped);
        }
        let mut values = DMatrix::zeros(self.n_rows(), keep.len());
        for t in 0..self.n_rows() {
            let picked: Vec<f64> = keep.iter().map(|&p| self.values[(t, p)]).collect();
            let closed = closure(&picked)?;
            for (j, v) in closed.into_iter().enumerate() {
                values[(t, j)] = v;
            }
        }
        Self::new(
            values,
            self.years.clone(),
            keep.iter().map(|&p| self.parts[p]).collect(),
            self.age_labels.clone(),
            self.cause_labels.clone(),
        )
    }
}

/// Column-wise geometric mean of a composition matrix.
///
/// Entries produced by [`compute_geometric_mean`] are strictly positive.
/// [`compute_geometric_mean_ignoring_zeros`] may also produce exact zeros,
/// marking parts that are zero in every year.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometricMeanVector {
    values: Vec<f64>,
}

impl GeometricMeanVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Indices of parts that are zero throughout.
    pub fn structural_zeros(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, g)| **g == 0.0)
            .map(|(p, _)| p)
            .collect()
    }
}

/// `d[t][p] = D[t][u][c] / D_t`.
pub fn build_composition(panel: &DeathCountPanel) -> Result<CompositionMatrix> {
    let (t_n, p_n) = (panel.n_years(), panel.n_parts());
    let mut values = DMatrix::zeros(t_n, p_n);
    for t in 0..t_n {
        let row = panel.year_row(t);
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            return Err(Error::YearWithZeroTotal {
                year: panel.years()[t],
            });
        }
        for (p, v) in row.iter().enumerate() {
            values[(t, p)] = v / total;
        }
    }
    let c_n = panel.causes().len();
    CompositionMatrix::new(
        values,
        panel.years().to_vec(),
        (0..p_n).map(|p| part_coords(p, c_n)).collect(),
        panel.age_bands().to_vec(),
        panel.causes().to_vec(),
    )
}

/// Normalise a non-negative vector to unit sum.
pub fn closure(v: &[f64]) -> Result<Vec<f64>> {
    if let Some((index, &value)) = v.iter().enumerate().find(|(_, x)| !(**x >= 0.0)) {
        return Err(Error::NegativeEntry { index, value });
    }
    let sum: f64 = v.iter().sum();
    if sum <= 0.0 {
        return Err(Error::AllZeroVector);
    }
    if !sum.is_finite() {
        return Err(Error::NonFinite("closure sum".into()));
    }
    // Already closed up to summation rounding: returning the input keeps
    // closure idempotent bit for bit.
    if (sum - 1.0).abs() <= v.len() as f64 * f64::EPSILON {
        return Ok(v.to_vec());
    }
    Ok(v.iter().map(|x| x / sum).collect())
}

fn check_perturbation(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    if let Some(index) = y.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::NonPositivePerturbation { index });
    }
    Ok(())
}

/// `x ⊕ y = C(x_1 y_1, ..., x_n y_n)`.
pub fn perturb(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check_perturbation(x, y)?;
    let prod: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    closure(&prod)
}

/// `x ⊖ y = C(x_1 / y_1, ..., x_n / y_n)`; zero parts of `x` stay zero.
pub fn inverse_perturb(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check_perturbation(x, y)?;
    let ratio: Vec<f64> = x.iter().zip(y).map(|(a, b)| a / b).collect();
    closure(&ratio)
}

fn log_mean_column(m: &CompositionMatrix, p: usize) -> f64 {
    let col = m.values.column(p);
    col.iter().map(|v| v.ln()).sum::<f64>() / col.len() as f64
}

/// `g_p = exp(mean_t ln d[t][p])`. Every entry of `m` must be positive.
pub fn compute_geometric_mean(m: &CompositionMatrix) -> Result<GeometricMeanVector> {
    let mut values = Vec::with_capacity(m.n_parts());
    for p in 0..m.n_parts() {
        if m.values.column(p).iter().any(|v| *v <= 0.0) {
            return Err(Error::ZeroInColumn { part: p });
        }
        values.push(log_mean_column(m, p).exp());
    }
    Ok(GeometricMeanVector { values })
}

/// Geometric mean over the strictly positive entries of each column.
///
/// A column that is zero in every year gets `g_p = 0`; [`center_rows`]
/// keeps such parts at zero and they are restored as zero after forecasting.
pub fn compute_geometric_mean_ignoring_zeros(m: &CompositionMatrix) -> GeometricMeanVector {
    let values = (0..m.n_parts())
        .map(|p| {
            let logs: Vec<f64> = m
                .values
                .column(p)
                .iter()
                .filter(|v| **v > 0.0)
                .map(|v| v.ln())
                .collect();
            if logs.is_empty() {
                0.0
            } else {
                (logs.iter().sum::<f64>() / logs.len() as f64).exp()
            }
        })
        .collect();
    GeometricMeanVector { values }
}

/// Inverse-perturb every row by `g`. Parts with `g_p = 0` must be zero in
/// every row and stay zero.
pub fn center_rows(m: &CompositionMatrix, g: &GeometricMeanVector) -> Result<CompositionMatrix> {
    let support = support_of(g, m.n_parts())?;
    let mut values = DMatrix::zeros(m.n_rows(), m.n_parts());
    for t in 0..m.n_rows() {
        let row = m.row(t);
        for &p in &support.zeros {
            if row[p] != 0.0 {
                return Err(Error::NonPositivePerturbation { index: p });
            }
        }
        let centred = inverse_perturb(&support.gather(&row), &support.gather(g.values()))?;
        support.scatter(&centred, |p, v| values[(t, p)] = v);
    }
    m.with_values(values)
}

/// Perturb a composition by `g`, leaving parts with `g_p = 0` at zero.
pub fn perturb_by_mean(x: &[f64], g: &GeometricMeanVector) -> Result<Vec<f64>> {
    let support = support_of(g, x.len())?;
    let moved = perturb(&support.gather(x), &support.gather(g.values()))?;
    let mut out = vec![0.0; x.len()];
    support.scatter(&moved, |p, v| out[p] = v);
    Ok(out)
}

struct Support {
    positive: Vec<usize>,
    zeros: Vec<usize>,
}

impl Support {
    fn gather(&self, v: &[f64]) -> Vec<f64> {
        self.positive.iter().map(|&p| v[p]).collect()
    }

    fn scatter(&self, v: &[f64], mut put: impl FnMut(usize, f64)) {
        for (&p, &x) in self.positive.iter().zip(v) {
            put(p, x);
        }
    }
}

fn support_of(g: &GeometricMeanVector, width: usize) -> Result<Support> {
    if g.len() != width {
        return Err(Error::LengthMismatch {
            expected: width,
            found: g.len(),
        });
    }
    let (positive, zeros): (Vec<usize>, Vec<usize>) = (0..width).partition(|&p| g.values[p] > 0.0);
    if let Some(&index) = zeros.iter().find(|&&p| !(g.values[p] == 0.0)) {
        return Err(Error::NonPositivePerturbation { index });
    }
    if positive.is_empty() {
        return Err(Error::AllZeroVector);
    }
    Ok(Support { positive, zeros })
}
