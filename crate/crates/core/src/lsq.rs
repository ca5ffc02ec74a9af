//! Voxel-wise least squares.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::grid::Mask;

/// Lower bound applied to every per-voxel variance before it is used as a
/// denominator.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Images of `n` subjects over the active voxels of a mask.
#[derive(Debug, Clone)]
pub struct SubjectStack {
    mask: Arc<Mask>,
    /// `n × N_D`; row `i` is subject `i`.
    y: DMatrix<f64>,
}

impl SubjectStack {
    pub fn new(mask: Arc<Mask>, y: DMatrix<f64>) -> Result<Self> {
        if y.ncols() != mask.n_active() {
            return Err(Error::DimensionMismatch(format!(
                "stack has {} columns but the mask has {} active voxels",
                y.ncols(),
                mask.n_active()
            )));
        }
        if let Some(pos) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite value for subject {} at voxel rank {}",
                pos % y.nrows(),
                pos / y.nrows()
            )));
        }
        Ok(Self { mask, y })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn mask(&self) -> &Arc<Mask> {
        &self.mask
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn into_parts(self) -> (Arc<Mask>, DMatrix<f64>) {
        (self.mask, self.y)
    }

    /// The stack with subject `i` removed.
    pub fn without_subject(&self, i: usize) -> SubjectStack {
        SubjectStack {
            mask: self.mask.clone(),
            y: self.y.clone().remove_row(i),
        }
    }
}

/// Per-voxel coefficient estimates at one smoothing scale.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    pub mask: Arc<Mask>,
    /// `p × N_D`; column `d` is the coefficient vector at voxel rank `d`.
    pub beta: DMatrix<f64>,
    /// `p × N_D` per-coefficient variance estimates.
    pub var_diag: DMatrix<f64>,
    /// 0 for the raw least-squares fit, `s` after `s` smoothing steps.
    pub scale_index: usize,
}

impl CoefficientField {
    pub fn p(&self) -> usize {
        self.beta.nrows()
    }

    pub fn n_voxels(&self) -> usize {
        self.beta.ncols()
    }

    /// Estimated standard error of coefficient `j` at voxel rank `d`.
    pub fn std_error(&self, j: usize, d: usize) -> f64 {
        self.var_diag[(j, d)].sqrt()
    }

    /// Row `j` of `beta` as a plain vector over voxel ranks.
    pub fn coefficient_map(&self, j: usize) -> Vec<f64> {
        self.beta.row(j).iter().copied().collect()
    }
}

/// Variance map together with how many entries hit the floor.
#[derive(Debug, Clone)]
pub struct VarianceMap {
    pub values: DMatrix<f64>,
    pub floored: usize,
}

/// `β̂(d) = Ω⁻¹ Σᵢ xᵢ yᵢ(d)` at every voxel. Variances use the plug-in
/// `Σ̂_y(d,d) = n⁻¹ Σᵢ rᵢ(d)²` until a noise model replaces them.
pub fn ls_fit(stack: &SubjectStack, design: &DesignMatrix) -> Result<CoefficientField> {
    if stack.n() != design.n() {
        return Err(Error::DimensionMismatch(format!(
            "stack has {} subjects, design has {}",
            stack.n(),
            design.n()
        )));
    }
    let projector = design.omega_inv() * design.x().transpose();
    let beta = projector * stack.y();
    let mut field = CoefficientField {
        mask: stack.mask().clone(),
        beta,
        var_diag: DMatrix::zeros(design.p(), stack.mask().n_active()),
        scale_index: 0,
    };
    let r = residuals(stack, design, &field)?;
    let n = stack.n() as f64;
    let sigma_y: Vec<f64> = r
        .column_iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>() / n)
        .collect();
    let var = raw_variance(design, &sigma_y);
    if var.floored > 0 {
        log::warn!("{} raw variances clamped to the floor", var.floored);
    }
    field.var_diag = var.values;
    Ok(field)
}

/// `rᵢ(d) = yᵢ(d) − xᵢᵀβ̂(d)`, as an `n × N_D` matrix.
pub fn residuals(
    stack: &SubjectStack,
    design: &DesignMatrix,
    field: &CoefficientField,
) -> Result<DMatrix<f64>> {
    if stack.n() != design.n() || field.p() != design.p() || field.n_voxels() != stack.y().ncols() {
        return Err(Error::DimensionMismatch(
            "stack, design and coefficient field disagree in shape".into(),
        ));
    }
    Ok(stack.y() - design.x() * &field.beta)
}

/// `var[j,d] = e_jᵀΩ⁻¹e_j · Σ̂_y(d,d)` for a per-voxel total variance
/// `sigma_y_diag` (indexed by rank), floored at [`VARIANCE_FLOOR`].
pub fn raw_variance(design: &DesignMatrix, sigma_y_diag: &[f64]) -> VarianceMap {
    let p = design.p();
    let mut floored = 0;
    let values = DMatrix::from_fn(p, sigma_y_diag.len(), |j, d| {
        let v = design.coeff_scale(j) * sigma_y_diag[d];
        if v < VARIANCE_FLOOR {
            floored += 1;
            VARIANCE_FLOOR
        } else {
            v
        }
    });
    VarianceMap { values, floored }
}
