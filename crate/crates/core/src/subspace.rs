//! Concept subspace estimation at a point: spanning-prompt bases and masks.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{OracleRequest, ScoreOracle};

/// Default explained-variance fraction for basis projectors.
pub const DEFAULT_THRES: f64 = 0.99;
/// Default relative threshold for mask projectors.
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.1;
/// Singular values at or below this fraction of the largest do not count
/// towards numerical rank.
pub const RANK_TOL: f64 = 1e-8;

/// Columns `field(x_i) - field(x_0)` for spanning prompts `x_1..x_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMatrix {
    columns: DMatrix<f64>,
}

impl DeltaMatrix {
    /// Builds the matrix from a baseline vector and `K >= 1` others.
    pub fn from_fields(base: &[f64], others: &[Vec<f64>]) -> Result<Self> {
        if others.is_empty() {
            return Err(Error::InvalidPlan("need at least two spanning prompts".into()));
        }
        let m = base.len();
        for o in others {
            if o.len() != m {
                return Err(Error::DimensionMismatch { expected: m, got: o.len() });
            }
        }
        let columns = DMatrix::from_fn(m, others.len(), |i, k| others[k][i] - base[i]);
        if columns.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPlan("non-finite entry in delta matrix".into()));
        }
        Ok(Self { columns })
    }

    pub fn from_matrix(columns: DMatrix<f64>) -> Result<Self> {
        if columns.ncols() == 0 {
            return Err(Error::InvalidPlan("delta matrix needs at least one column".into()));
        }
        Ok(Self { columns })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { columns: &self.columns * factor }
    }

    /// Singular values in descending order.
    pub fn singular_values(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.columns.clone().svd(false, false).singular_values.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    /// Count of singular values above [`RANK_TOL`] times the largest.
    pub fn numerical_rank(&self) -> usize {
        numerical_rank(&self.singular_values(), RANK_TOL)
    }
}

pub fn numerical_rank(sorted_desc: &[f64], rel_tol: f64) -> usize {
    match sorted_desc.first() {
        Some(&s1) if s1 > 0.0 => sorted_desc.iter().filter(|s| **s > rel_tol * s1).count(),
        _ => 0,
    }
}

/// Evaluates the spanning prompts at `(y, t)`; `prompts[0]` is the reference.
pub fn delta_matrix<O: ScoreOracle + ?Sized>(oracle: &O, y: &[f64], t: usize, prompts: &[&str]) -> Result<DeltaMatrix> {
    let Some((first, rest)) = prompts.split_first() else {
        return Err(Error::InvalidPlan("no spanning prompts".into()));
    };
    let base = oracle.field(&OracleRequest::new(first, y, t))?;
    let others = rest
        .iter()
        .map(|p| oracle.field(&OracleRequest::new(p, y, t)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    DeltaMatrix::from_fields(&base, &others)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubspaceWarning {
    /// The spanning prompts produced identical fields.
    IndistinguishablePrompts,
    /// No coordinate cleared the mask threshold.
    EmptyMask,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProjectorForm {
    /// Orthonormal columns spanning the subspace.
    Basis(DMatrix<f64>),
    /// Diagonal 0/1 entries.
    Mask(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceProjector {
    form: ProjectorForm,
    dim: usize,
    warning: Option<SubspaceWarning>,
}

impl SubspaceProjector {
    pub fn zero(dim: usize) -> Self {
        Self { form: ProjectorForm::Basis(DMatrix::zeros(dim, 0)), dim, warning: None }
    }

    pub fn identity(dim: usize) -> Self {
        Self { form: ProjectorForm::Mask(vec![true; dim]), dim, warning: None }
    }

    /// Orthonormalizes the columns of `span` (which must have full column rank).
    pub fn from_span(span: &DMatrix<f64>) -> Self {
        let q = span.clone().qr().q();
        Self { dim: span.nrows(), form: ProjectorForm::Basis(q), warning: None }
    }

    pub fn from_mask(bits: Vec<bool>) -> Self {
        Self { dim: bits.len(), form: ProjectorForm::Mask(bits), warning: None }
    }

    pub fn form(&self) -> &ProjectorForm {
        &self.form
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        match &self.form {
            ProjectorForm::Basis(q) => q.ncols(),
            ProjectorForm::Mask(bits) => bits.iter().filter(|b| **b).count(),
        }
    }

    pub fn warning(&self) -> Option<SubspaceWarning> {
        self.warning
    }

    /// Orthonormal basis of the range.
    pub fn basis(&self) -> DMatrix<f64> {
        match &self.form {
            ProjectorForm::Basis(q) => q.clone(),
            ProjectorForm::Mask(bits) => {
                let idx: Vec<usize> = (0..self.dim).filter(|&i| bits[i]).collect();
                DMatrix::from_fn(self.dim, idx.len(), |i, k| if idx[k] == i { 1.0 } else { 0.0 })
            }
        }
    }

    /// The dense `m x m` projection matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        match &self.form {
            ProjectorForm::Basis(q) => q * q.transpose(),
            ProjectorForm::Mask(bits) => {
                DMatrix::from_diagonal(&DVector::from_iterator(self.dim, bits.iter().map(|&b| f64::from(u8::from(b)))))
            }
        }
    }

    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: v.len() });
        }
        Ok(match &self.form {
            ProjectorForm::Basis(q) => {
                let x = DVector::from_column_slice(v);
                let coef = q.tr_mul(&x);
                (q * coef).as_slice().to_vec()
            }
            ProjectorForm::Mask(bits) => v.iter().zip(bits).map(|(x, &b)| if b { *x } else { 0.0 }).collect(),
        })
    }

    /// Projector onto the orthogonal complement of the range.
    pub fn complement(&self) -> Self {
        match &self.form {
            ProjectorForm::Mask(bits) => Self::from_mask(bits.iter().map(|b| !b).collect()),
            ProjectorForm::Basis(q) => {
                let resid = DMatrix::identity(self.dim, self.dim) - q * q.transpose();
                let svd = resid.svd(true, false);
                let u = svd.u.expect("left singular vectors requested");
                let keep: Vec<usize> = (0..svd.singular_values.len())
                    .filter(|&i| svd.singular_values[i] > 0.5)
                    .collect();
                let basis = DMatrix::from_fn(self.dim, keep.len(), |i, k| u[(i, keep[k])]);
                Self { form: ProjectorForm::Basis(basis), dim: self.dim, warning: None }
            }
        }
    }

    /// The mask bits, or `None` for basis projectors.
    pub fn mask(&self) -> Option<&[bool]> {
        match &self.form {
            ProjectorForm::Mask(b) => Some(b),
            ProjectorForm::Basis(_) => None,
        }
    }
}

/// Projector onto the top left singular vectors of `dm` that together explain
/// at least `thres` of the squared singular-value mass.
pub fn find_subspace_basis(dm: &DeltaMatrix, thres: f64) -> Result<SubspaceProjector> {
    if !(thres > 0.0 && thres <= 1.0) {
        return Err(Error::InvalidPlan(format!("thres {thres} outside (0, 1]")));
    }
    let m = dm.columns.nrows();
    let svd = dm.columns.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let energy: Vec<f64> = order.iter().map(|&i| svd.singular_values[i].powi(2)).collect();
    let total: f64 = energy.iter().sum();
    if total == 0.0 {
        let mut p = SubspaceProjector::zero(m);
        p.warning = Some(SubspaceWarning::IndistinguishablePrompts);
        return Ok(p);
    }
    let mut acc = 0.0;
    let mut keep = energy.len();
    for (r, e) in energy.iter().enumerate() {
        acc += e;
        if acc / total >= thres {
            keep = r + 1;
            break;
        }
    }
    let q = DMatrix::from_fn(m, keep, |i, k| u[(i, order[k])]);
    Ok(SubspaceProjector { form: ProjectorForm::Basis(q), dim: m, warning: None })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    /// Fraction of the largest `|delta|` a coordinate must exceed. Zero keeps
    /// every nonzero coordinate.
    #[serde(default = "default_mask_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub blur_sigma: f64,
    /// `(rows, cols)` layout of the coordinates, row-major; needed for blurring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<(usize, usize)>,
}

fn default_mask_threshold() -> f64 {
    DEFAULT_MASK_THRESHOLD
}

impl Default for MaskParams {
    fn default() -> Self {
        Self { threshold: DEFAULT_MASK_THRESHOLD, blur_sigma: 0.0, grid: None }
    }
}

fn reflect(mut i: isize, n: isize) -> usize {
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Separable isotropic Gaussian blur with radius `ceil(3 sigma)` and
/// reflected boundaries.
pub fn gaussian_blur(values: &[f64], rows: usize, cols: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let mut tmp = vec![0.0; values.len()];
    for r in 0..rows {
        for c in 0..cols {
            tmp[r * cols + c] = (-radius..=radius)
                .zip(&kernel)
                .map(|(k, w)| w * values[r * cols + reflect(c as isize + k, cols as isize)])
                .sum();
        }
    }
    let mut out = vec![0.0; values.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = (-radius..=radius)
                .zip(&kernel)
                .map(|(k, w)| w * tmp[reflect(r as isize + k, rows as isize) * cols + c])
                .sum();
        }
    }
    out
}

/// Mask from the coordinates where two prompts' fields differ.
pub fn mask_from_difference(delta: &[f64], params: &MaskParams) -> Result<SubspaceProjector> {
    if !(params.threshold >= 0.0) {
        return Err(Error::InvalidPlan(format!("mask threshold {} is negative", params.threshold)));
    }
    let mut mag: Vec<f64> = delta.iter().map(|d| d.abs()).collect();
    if params.blur_sigma > 0.0 {
        let (rows, cols) = params
            .grid
            .ok_or_else(|| Error::InvalidPlan("blurring needs a grid shape".into()))?;
        if rows * cols != delta.len() {
            return Err(Error::DimensionMismatch { expected: rows * cols, got: delta.len() });
        }
        mag = gaussian_blur(&mag, rows, cols, params.blur_sigma);
    }
    let max = mag.iter().copied().fold(0.0, f64::max);
    let cut = params.threshold * max;
    let bits: Vec<bool> = mag.iter().map(|v| *v > cut).collect();
    let mut p = SubspaceProjector::from_mask(bits);
    if p.rank() == 0 {
        p.warning = Some(SubspaceWarning::EmptyMask);
    }
    Ok(p)
}

pub fn find_subspace_mask<O: ScoreOracle + ?Sized>(
    oracle: &O,
    y: &[f64],
    t: usize,
    pair: (&str, &str),
    params: &MaskParams,
) -> Result<SubspaceProjector> {
    let a = oracle.field(&OracleRequest::new(pair.0, y, t))?;
    let b = oracle.field(&OracleRequest::new(pair.1, y, t))?;
    let delta: Vec<f64> = a.iter().zip(&b).map(|(x, z)| x - z).collect();
    mask_from_difference(&delta, params)
}

/// Largest principal angle between the ranges of two projectors, in radians.
/// Ranges of different dimension are at a right angle.
pub fn max_principal_angle(a: &SubspaceProjector, b: &SubspaceProjector) -> f64 {
    if a.rank() != b.rank() || a.dim() != b.dim() {
        return std::f64::consts::FRAC_PI_2;
    }
    if a.rank() == 0 {
        return 0.0;
    }
    let qa = a.basis();
    let qb = b.basis();
    // sin of the largest angle is the norm of the part of Q_b outside range(Q_a).
    let resid = &qb - &qa * qa.tr_mul(&qb);
    let s = resid.svd(false, false).singular_values.iter().copied().fold(0.0, f64::max);
    s.min(1.0).asin()
}
