//! Log-ratio and power transformations of compositions.
//!
//! All transforms map a composition of `P` parts to real coordinates:
//! CLR gives `P` zero-sum values, ILR and the alpha-transformation give
//! `P - 1` unconstrained values through the Helmert sub-matrix. The
//! alpha-transformation is defined for compositions with zero parts when
//! alpha is positive, and equals raw-data analysis (RDA) at alpha = 1.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock, RwLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::composition::{build_composition, closure, CompositionMatrix, DeathCountPanel, Part};
use crate::error::{Error, Result};

/// Values of `v = alpha * H^T z + 1` below `-CLAMP_REPORT_TOLERANCE` are
/// reported as clamp events; smaller excursions are rounding noise at the
/// boundary and are zeroed silently.
pub const CLAMP_REPORT_TOLERANCE: f64 = 1e-12;

/// Which transformation produced a set of coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum TransformTag {
    Clr,
    Ilr,
    Alpha(f64),
    Rda,
}

impl TransformTag {
    /// Power parameter for the alpha family, `None` for log-ratio transforms.
    pub fn alpha(&self) -> Option<f64> {
        match self {
            TransformTag::Alpha(a) => Some(*a),
            TransformTag::Rda => Some(1.0),
            _ => None,
        }
    }

    pub fn is_log_ratio(&self) -> bool {
        matches!(self, TransformTag::Clr | TransformTag::Ilr)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TransformTag::Alpha(a) => check_alpha(*a),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for TransformTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformTag::Clr => f.write_str("clr"),
            TransformTag::Ilr => f.write_str("ilr"),
            TransformTag::Alpha(a) => write!(f, "alpha:{a}"),
            TransformTag::Rda => f.write_str("rda"),
        }
    }
}

impl FromStr for TransformTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let tag = match s.as_str() {
            "clr" => TransformTag::Clr,
            "ilr" => TransformTag::Ilr,
            "rda" => TransformTag::Rda,
            other => {
                let value = other
                    .strip_prefix("alpha:")
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown transform {other:?}")))?;
                let a: f64 = value
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad alpha value {value:?}")))?;
                TransformTag::Alpha(a)
            }
        };
        tag.validate()?;
        Ok(tag)
    }
}

impl From<TransformTag> for String {
    fn from(t: TransformTag) -> Self {
        t.to_string()
    }
}

impl TryFrom<String> for TransformTag {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// How zero death counts are resolved before transforming.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ZeroStrategy {
    /// Leave zeros in place; log-ratio transforms will then fail.
    None,
    /// Drop every part that is zero in any year.
    OmitParts,
    /// Replace zero counts by a small positive count.
    Replace(f64),
}

impl ZeroStrategy {
    pub fn validate(&self) -> Result<()> {
        match self {
            ZeroStrategy::Replace(x) if !(x.is_finite() && *x > 0.0) => Err(Error::InvalidConfig(
                format!("replacement count must be positive, got {x}"),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for ZeroStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ZeroStrategy::None => f.write_str("none"),
            ZeroStrategy::OmitParts => f.write_str("omit"),
            ZeroStrategy::Replace(x) => write!(f, "replace:{x}"),
        }
    }
}

impl FromStr for ZeroStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let strategy = match s.as_str() {
            "none" => ZeroStrategy::None,
            "omit" => ZeroStrategy::OmitParts,
            other => {
                let value = other
                    .strip_prefix("replace:")
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown zero strategy {other:?}")))?;
                let x: f64 = value
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad replacement {value:?}")))?;
                ZeroStrategy::Replace(x)
            }
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

impl From<ZeroStrategy> for String {
    fn from(z: ZeroStrategy) -> Self {
        z.to_string()
    }
}

impl TryFrom<String> for ZeroStrategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// What a zero strategy changed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ZeroReport {
    /// Number of count cells replaced.
    pub replaced_cells: usize,
    /// Parts removed by [`ZeroStrategy::OmitParts`].
    pub omitted_parts: Vec<Part>,
}

/// Resolve zeros and build the composition matrix.
pub fn apply_zero_strategy(
    panel: &DeathCountPanel,
    strategy: ZeroStrategy,
) -> Result<(CompositionMatrix, ZeroReport)> {
    strategy.validate()?;
    match strategy {
        ZeroStrategy::None => Ok((build_composition(panel)?, ZeroReport::default())),
        ZeroStrategy::Replace(amount) => {
            let mut replaced_cells = 0;
            let counts = panel
                .counts()
                .iter()
                .map(|&c| {
                    if c == 0.0 {
                        replaced_cells += 1;
                        amount
                    } else {
                        c
                    }
                })
                .collect();
            let m = build_composition(&panel.with_counts(counts)?)?;
            Ok((
                m,
                ZeroReport {
                    replaced_cells,
                    omitted_parts: Vec::new(),
                },
            ))
        }
        ZeroStrategy::OmitParts => {
            let m = build_composition(panel)?;
            let (keep, drop): (Vec<usize>, Vec<usize>) = (0..m.n_parts())
                .partition(|&p| m.values().column(p).iter().all(|v| *v > 0.0));
            if drop.is_empty() {
                return Ok((m, ZeroReport::default()));
            }
            let omitted_parts = drop.iter().map(|&p| m.parts()[p]).collect();
            Ok((
                m.select_parts(&keep)?,
                ZeroReport {
                    replaced_cells: 0,
                    omitted_parts,
                },
            ))
        }
    }
}

/// The `(P-1) x P` Helmert sub-matrix: the Helmert orthogonal matrix with
/// its first (constant) row removed.
#[derive(Debug, Clone, PartialEq)]
pub struct HelmertSubMatrix {
    matrix: DMatrix<f64>,
}

impl HelmertSubMatrix {
    pub fn parts(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `H w` for a length-`P` vector.
    pub fn apply(&self, w: &[f64]) -> Result<Vec<f64>> {
        if w.len() != self.parts() {
            return Err(Error::LengthMismatch {
                expected: self.parts(),
                found: w.len(),
            });
        }
        Ok((&self.matrix * DVector::from_column_slice(w)).as_slice().to_vec())
    }

    /// `H^T z` for a length-`P-1` vector.
    pub fn apply_transpose(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() + 1 != self.parts() {
            return Err(Error::LengthMismatch {
                expected: self.parts() - 1,
                found: z.len(),
            });
        }
        Ok((self.matrix.tr_mul(&DVector::from_column_slice(z)))
            .as_slice()
            .to_vec())
    }
}

/// Build the Helmert sub-matrix for `p` parts.
///
/// Row `j` (1-based) holds `1/sqrt(j(j+1))` in its first `j` positions and
/// `-j/sqrt(j(j+1))` in position `j+1`.
pub fn helmert(p: usize) -> Result<HelmertSubMatrix> {
    if p < 2 {
        return Err(Error::PartCountTooSmall { parts: p });
    }
    let mut matrix = DMatrix::zeros(p - 1, p);
    for row in 0..p - 1 {
        let j = (row + 1) as f64;
        let scale = (j * (j + 1.0)).sqrt();
        for col in 0..=row {
            matrix[(row, col)] = 1.0 / scale;
        }
        matrix[(row, row + 1)] = -j / scale;
    }
    Ok(HelmertSubMatrix { matrix })
}

/// Shared Helmert sub-matrix for `p` parts, built once per `p`.
pub fn helmert_cached(p: usize) -> Result<Arc<HelmertSubMatrix>> {
    static CACHE: OnceLock<RwLock<HashMap<usize, Arc<HelmertSubMatrix>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| RwLock::new(HashMap::new()));
    if let Some(h) = cache.read().expect("helmert cache poisoned").get(&p) {
        return Ok(Arc::clone(h));
    }
    let built = Arc::new(helmert(p)?);
    let mut guard = cache.write().expect("helmert cache poisoned");
    Ok(Arc::clone(guard.entry(p).or_insert(built)))
}

fn check_positive(row: &[f64]) -> Result<()> {
    match row.iter().position(|x| !(*x > 0.0)) {
        Some(index) => Err(Error::NonPositiveComponent { index }),
        None => Ok(()),
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::AlphaOutOfRange(alpha))
    }
}

/// Centred log-ratio: `ln x_p - mean_q ln x_q`.
pub fn clr(row: &[f64]) -> Result<Vec<f64>> {
    check_positive(row)?;
    let logs: Vec<f64> = row.iter().map(|x| x.ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    Ok(logs.into_iter().map(|l| l - mean).collect())
}

/// `closure(exp(w))`, shifted by `max(w)` to avoid overflow.
pub fn clr_inverse(w: &[f64]) -> Result<Vec<f64>> {
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("clr coordinates".into()));
    }
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|x| (x - max).exp()).collect();
    closure(&e)
}

/// Isometric log-ratio: `H clr(x)`.
pub fn ilr(row: &[f64]) -> Result<Vec<f64>> {
    let h = helmert_cached(row.len())?;
    h.apply(&clr(row)?)
}

/// `clr_inverse(H^T z)`.
pub fn ilr_inverse(z: &[f64]) -> Result<Vec<f64>> {
    let h = helmert_cached(z.len() + 1)?;
    clr_inverse(&h.apply_transpose(z)?)
}

fn check_composition(row: &[f64]) -> Result<()> {
    if let Some((index, &value)) = row.iter().enumerate().find(|(_, x)| !(**x >= 0.0)) {
        return Err(Error::NegativeEntry { index, value });
    }
    if !row.iter().any(|x| *x > 0.0) {
        return Err(Error::AllZeroRow);
    }
    Ok(())
}

/// Pre-image of the alpha-transformation before the Helmert projection:
/// `w_p = (P x_p^a / sum_q x_q^a - 1) / a`, with `0^a = 0`.
///
/// Satisfies `sum_p w_p = 0` and `-1/a <= w_p <= (P-1)/a`.
pub fn alpha_pre_image(row: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    check_composition(row)?;
    let powered: Vec<f64> = row
        .iter()
        .map(|&x| if x == 0.0 { 0.0 } else { x.powf(alpha) })
        .collect();
    let s: f64 = powered.iter().sum();
    let p = row.len() as f64;
    Ok(powered.iter().map(|xa| (p * xa / s - 1.0) / alpha).collect())
}

/// Alpha-transformation `H w` of a composition, zeros allowed.
pub fn alpha_forward(row: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let w = alpha_pre_image(row, alpha)?;
    helmert_cached(row.len())?.apply(&w)
}

/// Parts whose inverse-image fell outside the alpha-space and were set to
/// the simplex boundary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClampReport {
    /// Indices of clamped parts.
    pub parts: Vec<usize>,
    /// The raw `v_p` values before clamping, aligned with `parts`.
    pub raw_values: Vec<f64>,
}

impl ClampReport {
    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }
}

/// Invert alpha coordinates given the length-`P` pre-image `w`.
pub(crate) fn alpha_inverse_from_pre_image(
    w: &[f64],
    alpha: f64,
) -> Result<(Vec<f64>, ClampReport)> {
    check_alpha(alpha)?;
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("alpha coordinates".into()));
    }
    let mut report = ClampReport::default();
    let powered: Vec<f64> = w
        .iter()
        .enumerate()
        .map(|(p, &wp)| {
            let v = alpha * wp + 1.0;
            if v > 0.0 {
                if alpha == 1.0 {
                    v
                } else {
                    v.powf(1.0 / alpha)
                }
            } else {
                if v < -CLAMP_REPORT_TOLERANCE {
                    report.parts.push(p);
                    report.raw_values.push(v);
                }
                0.0
            }
        })
        .collect();
    if powered.iter().all(|x| *x == 0.0) {
        return Err(Error::AllComponentsClamped);
    }
    Ok((closure(&powered)?, report))
}

/// Inverse alpha-transformation: `v = a H^T z + 1`, negative `v_p` clamped
/// to the boundary, then `closure(v^(1/a))`.
pub fn alpha_inverse(z: &[f64], alpha: f64) -> Result<(Vec<f64>, ClampReport)> {
    check_alpha(alpha)?;
    let h = helmert_cached(z.len() + 1)?;
    alpha_inverse_from_pre_image(&h.apply_transpose(z)?, alpha)
}

/// Raw-data analysis: the alpha-transformation at alpha = 1.
pub fn rda_forward(row: &[f64]) -> Result<Vec<f64>> {
    alpha_forward(row, 1.0)
}

pub fn rda_inverse(z: &[f64]) -> Result<(Vec<f64>, ClampReport)> {
    alpha_inverse(z, 1.0)
}

/// Apply the forward transform for `tag`.
pub fn forward(row: &[f64], tag: TransformTag) -> Result<Vec<f64>> {
    match tag {
        TransformTag::Clr => clr(row),
        TransformTag::Ilr => ilr(row),
        TransformTag::Alpha(a) => alpha_forward(row, a),
        TransformTag::Rda => rda_forward(row),
    }
}

/// Apply the inverse transform for `tag`; only alpha transforms can clamp.
pub fn inverse(coords: &[f64], tag: TransformTag) -> Result<(Vec<f64>, ClampReport)> {
    match tag {
        TransformTag::Clr => Ok((clr_inverse(coords)?, ClampReport::default())),
        TransformTag::Ilr => Ok((ilr_inverse(coords)?, ClampReport::default())),
        TransformTag::Alpha(a) => alpha_inverse(coords, a),
        TransformTag::Rda => rda_inverse(coords),
    }
}

/// Rows of transformed coordinates together with the transform that made them.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedMatrix {
    values: DMatrix<f64>,
    tag: TransformTag,
    parts: Vec<Part>,
}

impl TransformedMatrix {
    pub fn new(values: DMatrix<f64>, tag: TransformTag, parts: Vec<Part>) -> Result<Self> {
        let width = match tag {
            TransformTag::Clr => parts.len(),
            _ => parts.len().saturating_sub(1),
        };
        if values.ncols() != width {
            return Err(Error::LengthMismatch {
                expected: width,
                found: values.ncols(),
            });
        }
        Ok(Self { values, tag, parts })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn tag(&self) -> TransformTag {
        self.tag
    }

    pub fn parts(&self) -> &[Part] {
        &self.parts
    }

    /// Length-`P` representation of every row: the CLR values themselves,
    /// or `H^T z` for ILR and alpha coordinates.
    pub fn part_space(&self) -> Result<DMatrix<f64>> {
        match self.tag {
            TransformTag::Clr => Ok(self.values.clone()),
            _ => {
                let h = helmert_cached(self.parts.len())?;
                Ok((&self.values * h.matrix()).clone_owned())
            }
        }
    }
}

/// Transform every row of a composition matrix.
pub fn transform_matrix(m: &CompositionMatrix, tag: TransformTag) -> Result<TransformedMatrix> {
    tag.validate()?;
    let width = match tag {
        TransformTag::Clr => m.n_parts(),
        _ => {
            if m.n_parts() < 2 {
                return Err(Error::PartCountTooSmall { parts: m.n_parts() });
            }
            m.n_parts() - 1
        }
    };
    let mut values = DMatrix::zeros(m.n_rows(), width);
    for t in 0..m.n_rows() {
        for (j, v) in forward(&m.row(t), tag)?.into_iter().enumerate() {
            values[(t, j)] = v;
        }
    }
    TransformedMatrix::new(values, tag, m.parts().to_vec())
}

/// Map a length-`P` part-space row back to the coordinates of `tag`.
pub(crate) fn part_space_to_coords(w: &[f64], tag: TransformTag) -> Result<Vec<f64>> {
    match tag {
        TransformTag::Clr => Ok(w.to_vec()),
        _ => helmert_cached(w.len())?.apply(w),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn close_all(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn helmert_small_cases() {
        let h = helmert(2).unwrap();
        let s = 0.5f64.sqrt();
        assert!(close_all(h.matrix().as_slice(), &[s, -s], 1e-15));

        // Gram-Schmidt on the complement of the constant vector, by hand.
        let h = helmert(3).unwrap();
        let m = h.matrix();
        let r2 = 2f64.sqrt();
        let r6 = 6f64.sqrt();
        let expected = [[1.0 / r2, -1.0 / r2, 0.0], [1.0 / r6, 1.0 / r6, -2.0 / r6]];
        for (i, row) in expected.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((m[(i, j)] - v).abs() < 1e-15);
            }
        }
        assert!(matches!(helmert(1), Err(Error::PartCountTooSmall { parts: 1 })));
    }

    #[test]
    fn helmert_is_orthonormal_and_centred() {
        for p in 2..=120 {
            let h = helmert(p).unwrap();
            let m = h.matrix();
            let hht = m * m.transpose();
            let hth = m.transpose() * m;
            for i in 0..p - 1 {
                for j in 0..p - 1 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((hht[(i, j)] - e).abs() < 1e-12);
                }
                assert!(m.row(i).sum().abs() < 1e-12);
            }
            for i in 0..p {
                for j in 0..p {
                    let e = if i == j { 1.0 } else { 0.0 } - 1.0 / p as f64;
                    assert!((hth[(i, j)] - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn helmert_cache_shares_instances() {
        let a = helmert_cached(17).unwrap();
        let b = helmert_cached(17).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(*a, helmert(17).unwrap());
    }

    #[test]
    fn clr_examples() {
        assert!(close_all(&clr(&[0.25; 4]).unwrap(), &[0.0; 4], 1e-15));
        let w = clr(&[0.5, 0.25, 0.25]).unwrap();
        assert!(close_all(
            &w,
            &[2.0 * LN_2 / 3.0, -LN_2 / 3.0, -LN_2 / 3.0],
            1e-15
        ));
        let x = [0.1, 0.2, 0.3, 0.4];
        assert!(close_all(&clr_inverse(&clr(&x).unwrap()).unwrap(), &x, 1e-12));
        assert!(matches!(
            clr(&[0.5, 0.0, 0.5]),
            Err(Error::NonPositiveComponent { index: 1 })
        ));
    }

    #[test]
    fn clr_inverse_examples() {
        assert!(close_all(&clr_inverse(&[0.0; 5]).unwrap(), &[0.2; 5], 1e-15));
        // exp(ln 2, 0, 0) = (2, 1, 1) -> (1/2, 1/4, 1/4)
        assert!(close_all(
            &clr_inverse(&[LN_2, 0.0, 0.0]).unwrap(),
            &[0.5, 0.25, 0.25],
            1e-15
        ));
    }

    #[test]
    fn ilr_examples() {
        assert!(close_all(&ilr(&[0.2; 5]).unwrap(), &[0.0; 4], 1e-15));
        // clr(0.5, 0.25, 0.25) = ln2 (2/3, -1/3, -1/3); rows of H from helmert_small_cases.
        let z = ilr(&[0.5, 0.25, 0.25]).unwrap();
        let expected = [LN_2 / 2f64.sqrt(), LN_2 / 6f64.sqrt()];
        assert!(close_all(&z, &expected, 1e-15));
        assert!(close_all(&ilr_inverse(&z).unwrap(), &[0.5, 0.25, 0.25], 1e-12));
    }

    #[test]
    fn alpha_examples() {
        for a in [0.1, 0.5, 1.0] {
            assert!(close_all(&alpha_forward(&[0.25; 4], a).unwrap(), &[0.0; 3], 1e-14));
        }
        let w = alpha_pre_image(&[0.0, 0.3, 0.7], 0.5).unwrap();
        assert_eq!(w[0], -2.0);

        let row = [0.1, 0.2, 0.3, 0.4];
        let d = sup_dist(&alpha_forward(&row, 1e-6).unwrap(), &ilr(&row).unwrap());
        assert!(d < 1e-4, "{d}");

        assert!(matches!(
            alpha_forward(&row, 0.0),
            Err(Error::AlphaOutOfRange(_))
        ));
        assert!(matches!(
            alpha_forward(&row, 1.5),
            Err(Error::AlphaOutOfRange(_))
        ));
        assert!(matches!(
            alpha_forward(&[0.0, 0.0], 0.5),
            Err(Error::AllZeroRow)
        ));
    }

    #[test]
    fn alpha_inverse_examples() {
        let (x, report) = alpha_inverse(&[0.0; 3], 0.4).unwrap();
        assert!(close_all(&x, &[0.25; 4], 1e-15));
        assert!(report.is_empty());

        let row = [0.0, 0.1, 0.2, 0.7];
        let (back, report) = alpha_inverse(&alpha_forward(&row, 0.3).unwrap(), 0.3).unwrap();
        assert!(close_all(&back, &row, 1e-10));
        assert_eq!(back[0], 0.0);
        assert!(report.is_empty());

        // Pre-image with v_0 = 0.5 * w_0 + 1 = -0.2.
        let alpha = 0.5;
        let w = [-2.4, 0.8, 0.8, 0.8];
        let z = helmert(4).unwrap().apply(&w).unwrap();
        let (x, report) = alpha_inverse(&z, alpha).unwrap();
        assert_eq!(x[0], 0.0);
        assert_eq!(report.parts, vec![0]);
        assert!((report.raw_values[0] + 0.2).abs() < 1e-12);
        assert!(close_all(&x[1..], &[1.0 / 3.0; 3], 1e-12));

        let w = [-4.0, -4.0, 8.0];
        let z = helmert(3).unwrap().apply(&w).unwrap();
        assert!(alpha_inverse(&z, 0.5).is_ok());
        let w = [-4.0, -4.0];
        let z = helmert(2).unwrap().apply(&w).unwrap();
        // w sums to -8, H^T H w = 0 so v = 1: not clamped.
        assert!(alpha_inverse(&z, 0.5).is_ok());
        assert!(matches!(
            alpha_inverse_from_pre_image(&[-3.0, -3.0], 0.5),
            Err(Error::AllComponentsClamped)
        ));
    }

    #[test]
    fn rda_matches_alpha_one_bitwise() {
        let row = [0.05, 0.15, 0.0, 0.8];
        let z = rda_forward(&row).unwrap();
        assert_eq!(z, alpha_forward(&row, 1.0).unwrap());
        assert!(close_all(&rda_forward(&[0.25; 4]).unwrap(), &[0.0; 3], 1e-15));
        let (back, _) = rda_inverse(&z).unwrap();
        assert!(close_all(&back, &row, 1e-12));
        assert_eq!(back, alpha_inverse(&z, 1.0).unwrap().0);
    }

    #[test]
    fn limit_distance_shrinks_with_alpha() {
        let row = [0.05, 0.1, 0.15, 0.3, 0.4];
        let il = ilr(&row).unwrap();
        let dists: Vec<f64> = [0.1, 0.01, 0.001, 1e-4]
            .iter()
            .map(|a| sup_dist(&alpha_forward(&row, *a).unwrap(), &il))
            .collect();
        assert!(dists.windows(2).all(|w| w[1] < w[0]), "{dists:?}");
    }

    #[test]
    fn tags_parse_and_print() {
        for s in ["clr", "ilr", "rda", "alpha:0.5"] {
            assert_eq!(s.parse::<TransformTag>().unwrap().to_string(), s);
        }
        assert!("alpha:0".parse::<TransformTag>().is_err());
        assert!("logit".parse::<TransformTag>().is_err());
        for s in ["none", "omit", "replace:0.25"] {
            assert_eq!(s.parse::<ZeroStrategy>().unwrap().to_string(), s);
        }
        assert!("replace:0".parse::<ZeroStrategy>().is_err());
    }

    fn panel(counts: Vec<f64>, years: usize, ages: usize, causes: usize) -> DeathCountPanel {
        DeathCountPanel::new(
            (0..years as i32).collect(),
            (0..ages).map(|i| format!("a{i}")).collect(),
            (0..causes).map(|i| format!("c{i}")).collect(),
            "m",
            counts,
        )
        .unwrap()
    }

    #[test]
    fn replace_strategy_substitutes_counts() {
        let p = panel(vec![2.0, 0.0, 1.0, 1.0], 1, 2, 2);
        let (m, report) = apply_zero_strategy(&p, ZeroStrategy::Replace(0.5)).unwrap();
        assert_eq!(report.replaced_cells, 1);
        assert!(close_all(
            &m.row(0),
            &[2.0 / 4.5, 0.5 / 4.5, 1.0 / 4.5, 1.0 / 4.5],
            1e-15
        ));
    }

    #[test]
    fn omit_strategy_drops_columns() {
        let p = panel(vec![1.0, 2.0, 3.0, 1.0, 0.0, 3.0], 2, 1, 3);
        let (m, report) = apply_zero_strategy(&p, ZeroStrategy::OmitParts).unwrap();
        assert_eq!(report.omitted_parts, vec![Part { age: 0, cause: 1 }]);
        assert_eq!(m.n_parts(), 2);
        assert!(close_all(&m.row(0), &[0.25, 0.75], 1e-15));

        let p = panel(vec![0.0, 1.0, 1.0, 0.0], 2, 1, 2);
        assert!(matches!(
            apply_zero_strategy(&p, ZeroStrategy::OmitParts),
            Err(Error::AllPartsDropped)
        ));
    }

    #[test]
    fn strategies_leave_positive_data_alone() {
        let p = panel(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 1, 3);
        let base = build_composition(&p).unwrap();
        for s in [
            ZeroStrategy::None,
            ZeroStrategy::OmitParts,
            ZeroStrategy::Replace(0.25),
        ] {
            let (m, report) = apply_zero_strategy(&p, s).unwrap();
            assert_eq!(m, base);
            assert_eq!(report, ZeroReport::default());
        }
    }

    fn composition(len: std::ops::Range<usize>, zeros: bool) -> impl Strategy<Value = Vec<f64>> {
        len.prop_flat_map(move |n| {
            prop::collection::vec((0.001f64..10.0, 0.0f64..1.0), n).prop_map(move |v| {
                let mut raw: Vec<f64> = v
                    .iter()
                    .map(|(x, u)| if zeros && *u < 0.3 { 0.0 } else { *x })
                    .collect();
                if raw.iter().all(|x| *x == 0.0) {
                    raw[0] = 1.0;
                }
                closure(&raw).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn clr_sums_to_zero(row in composition(2..40, false)) {
            prop_assert!(clr(&row).unwrap().iter().sum::<f64>().abs() < 1e-10);
        }

        #[test]
        fn clr_and_ilr_round_trip(row in composition(2..40, false)) {
            prop_assert!(close_all(&clr_inverse(&clr(&row).unwrap()).unwrap(), &row, 1e-10));
            prop_assert!(close_all(&ilr_inverse(&ilr(&row).unwrap()).unwrap(), &row, 1e-10));
        }

        #[test]
        fn alpha_round_trips_with_zeros(row in composition(2..40, true), alpha in 0.05f64..=1.0) {
            let (back, report) = alpha_inverse(&alpha_forward(&row, alpha).unwrap(), alpha).unwrap();
            prop_assert!(close_all(&back, &row, 1e-10));
            prop_assert!(report.is_empty());
        }

        #[test]
        fn alpha_pre_image_lies_in_alpha_space(row in composition(2..40, true), alpha in 0.01f64..=1.0) {
            let w = alpha_pre_image(&row, alpha).unwrap();
            let p = row.len() as f64;
            prop_assert!(w.iter().sum::<f64>().abs() < 1e-10);
            for v in &w {
                prop_assert!(*v >= -1.0 / alpha - 1e-12 && *v <= (p - 1.0) / alpha + 1e-12);
            }
        }

        #[test]
        fn clr_is_permutation_equivariant(row in composition(2..20, false), seed in any::<u64>()) {
            let n = row.len();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (s >> 33) as usize % (i + 1));
            }
            let permuted: Vec<f64> = perm.iter().map(|&i| row[i]).collect();
            let a = clr(&row).unwrap();
            let b = clr(&permuted).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((b[j] - a[i]).abs() < 1e-12);
            }
        }
    }
}
