//! Non-adaptive comparison methods: local-constant smoothing of the raw
//! coefficient maps (LCE) and Gaussian smoothing of the images followed by
//! voxel-wise least squares (GKS).

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv;
use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::fpca::NoiseModel;
use crate::infer::radial_weights;
use crate::lsq::{ls_fit, CoefficientField, SubjectStack, VARIANCE_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    Lce,
    Gks,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    /// Kernel radius for LCE, Gaussian σ for GKS.
    pub bandwidth: f64,
}

impl BaselineConfig {
    pub const SMALL: f64 = 1.1;
    pub const MODERATE: f64 = 2.0;
    pub const LARGE: f64 = 4.0;
}

/// `K(u) = 0.75 (1 − u²)` on `|u| ≤ 1`.
pub fn epanechnikov(u: f64) -> f64 {
    if u.abs() <= 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct LceFit {
    pub field: CoefficientField,
    /// Normalized weights per voxel rank, shared by all coefficients.
    pub weights: Vec<Vec<(usize, f64)>>,
}

/// Kernel-weighted average of the raw estimates inside radius `h`, with
/// variances from the noise model treating the weights as fixed.
pub fn lce_smooth(
    raw: &CoefficientField,
    h: f64,
    noise: &NoiseModel,
    design: &DesignMatrix,
) -> Result<LceFit> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bandwidth must be positive, got {h}"
        )));
    }
    if noise.eta_hat.ncols() != raw.n_voxels() || design.p() != raw.p() {
        return Err(Error::DimensionMismatch(
            "noise model, design and field disagree".into(),
        ));
    }
    let weights = radial_weights(raw, h, |dist| epanechnikov(dist / h));
    let p = raw.p();
    let nd = raw.n_voxels();
    let base: Vec<f64> = weights
        .par_iter()
        .map_init(
            || vec![0.0; noise.n()],
            |scratch, w| noise.weighted_variance(w.iter().copied(), scratch),
        )
        .collect();
    let beta = DMatrix::from_fn(p, nd, |j, d| {
        weights[d].iter().map(|&(m, w)| w * raw.beta[(j, m)]).sum()
    });
    let var_diag = DMatrix::from_fn(p, nd, |j, d| {
        (design.coeff_scale(j) * base[d]).max(VARIANCE_FLOOR)
    });
    Ok(LceFit {
        field: CoefficientField {
            mask: raw.mask.clone(),
            beta,
            var_diag,
            scale_index: 0,
        },
        weights,
    })
}

/// Per-axis Gaussian taps truncated at `3σ`.
fn gaussian_taps(spacing: f64, sigma: f64, dim: usize) -> Vec<f64> {
    let reach = ((3.0 * sigma / spacing).floor() as usize).min(dim.saturating_sub(1)) as isize;
    (-reach..=reach)
        .map(|t| {
            let x = t as f64 * spacing;
            (-(x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Gaussian smoothing of one rank-indexed image, renormalized over the mask.
pub fn gaussian_smooth_image(mask: &crate::grid::Mask, values: &[f64], sigma: f64) -> Vec<f64> {
    let grid = mask.grid();
    let (dims, sp) = (grid.dims(), grid.spacing());
    let taps: Vec<Vec<f64>> = (0..3)
        .map(|a| gaussian_taps(sp[a], sigma, dims[a]))
        .collect();
    let indicator: Vec<f64> = mask.flags().into_iter().map(|b| b as u8 as f64).collect();
    let norm = conv::separable(dims, &indicator, [&taps[0], &taps[1], &taps[2]]);
    let num = conv::separable(
        dims,
        &mask.scatter(values, 0.0),
        [&taps[0], &taps[1], &taps[2]],
    );
    mask.voxels().iter().map(|&id| num[id] / norm[id]).collect()
}

/// Smooths every subject image with a truncated Gaussian of scale `sigma`,
/// then fits voxel-wise least squares with plug-in variances.
pub fn gks_pipeline(
    stack: &SubjectStack,
    design: &DesignMatrix,
    sigma: f64,
) -> Result<CoefficientField> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "Gaussian scale must be positive, got {sigma}"
        )));
    }
    let mask = stack.mask();
    let y = stack.y();
    let rows: Vec<Vec<f64>> = (0..y.nrows())
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = y.row(i).iter().copied().collect();
            gaussian_smooth_image(mask, &row, sigma)
        })
        .collect();
    let smoothed = DMatrix::from_fn(y.nrows(), y.ncols(), |i, d| rows[i][d]);
    ls_fit(&SubjectStack::new(mask.clone(), smoothed)?, design)
}
