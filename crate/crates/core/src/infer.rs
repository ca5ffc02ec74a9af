//! Wald tests on coefficient maps, cluster-extent detection and prediction.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::fpca::NoiseModel;
use crate::grid::{connected_components, Connectivity, Stencil};
use crate::lsq::CoefficientField;
use crate::mass::{MassState, ScaleSchedule};
use crate::stats::chi2_sf;

/// `H₀: R β(d) = b`.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    r: DMatrix<f64>,
    b: DVector<f64>,
}

impl Hypothesis {
    pub fn new(r: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if r.nrows() == 0 || r.nrows() > r.ncols() || b.len() != r.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "hypothesis is {}×{} with a right-hand side of length {}",
                r.nrows(),
                r.ncols(),
                b.len()
            )));
        }
        let sv = r.clone().svd(false, false).singular_values;
        let max = sv.max();
        if !(max > 0.0) || sv.iter().any(|&s| s <= 1e-10 * max) {
            return Err(Error::RankDeficientHypothesis);
        }
        Ok(Self { r, b })
    }

    /// `β_j(d) = 0` for a zero-based coefficient index.
    pub fn coefficient(j: usize, p: usize) -> Result<Self> {
        let e = crate::design::coeff_selector(j, p)?;
        Self::new(
            DMatrix::from_row_slice(1, p, e.as_slice()),
            DVector::zeros(1),
        )
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn df(&self) -> usize {
        self.r.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    /// Voxel ranks, ascending.
    pub ranks: Vec<usize>,
    pub size: usize,
}

#[derive(Debug, Clone)]
pub struct WaldMap {
    pub statistic: Vec<f64>,
    pub df: usize,
    pub p_value: Vec<f64>,
    /// Voxels where `R Σ Rᵀ` could not be inverted (p-value set to 1).
    pub singular: Vec<bool>,
    pub clusters: Vec<Cluster>,
}

/// Smallest reported p-value, so `−log₁₀ p` stays finite.
pub const MIN_P_VALUE: f64 = f64::MIN_POSITIVE;

fn p_value(w: f64, df: usize) -> f64 {
    chi2_sf(w, df).clamp(MIN_P_VALUE, 1.0)
}

/// `W = (Rβ̂ − b)ᵀ (R Σ Rᵀ)⁻¹ (Rβ̂ − b)` at every voxel, with `Σ = cov(d)`.
pub fn wald_test(
    field: &CoefficientField,
    cov: &(dyn Fn(usize) -> Result<DMatrix<f64>> + Sync),
    hyp: &Hypothesis,
) -> Result<WaldMap> {
    if hyp.r.ncols() != field.p() {
        return Err(Error::DimensionMismatch(format!(
            "hypothesis has {} columns, field has {} coefficients",
            hyp.r.ncols(),
            field.p()
        )));
    }
    let df = hyp.df();
    let results: Vec<(f64, f64, bool)> = (0..field.n_voxels())
        .into_par_iter()
        .map(|d| -> Result<(f64, f64, bool)> {
            let sigma = cov(d)?;
            let resid = &hyp.r * field.beta.column(d) - &hyp.b;
            let middle = &hyp.r * sigma * hyp.r.transpose();
            let middle = (&middle + middle.transpose()) * 0.5;
            match middle.cholesky() {
                Some(chol) => {
                    let w = resid.dot(&chol.solve(&resid)).max(0.0);
                    Ok((w, p_value(w, df), false))
                }
                None => Ok((0.0, 1.0, true)),
            }
        })
        .collect::<Result<_>>()?;
    let singular_count = results.iter().filter(|r| r.2).count();
    if singular_count > 0 {
        log::warn!("{singular_count} voxels have a singular Wald middle matrix; p-value set to 1");
    }
    Ok(WaldMap {
        statistic: results.iter().map(|r| r.0).collect(),
        df,
        p_value: results.iter().map(|r| r.1).collect(),
        singular: results.iter().map(|r| r.2).collect(),
        clusters: Vec::new(),
    })
}

/// Wald test of `β_j(d) = b` using the field's own variance map.
pub fn coefficient_wald(field: &CoefficientField, j: usize, b: f64) -> WaldMap {
    let statistic: Vec<f64> = (0..field.n_voxels())
        .map(|d| {
            let diff = field.beta[(j, d)] - b;
            diff * diff / field.var_diag[(j, d)]
        })
        .collect();
    WaldMap {
        p_value: statistic.iter().map(|&w| p_value(w, 1)).collect(),
        singular: vec![false; statistic.len()],
        statistic,
        df: 1,
        clusters: Vec::new(),
    }
}

/// Connected groups of voxels with `p < alpha` and at least `min_size`
/// members, largest first.
pub fn detect_clusters(
    wald: &WaldMap,
    field: &CoefficientField,
    alpha: f64,
    min_size: usize,
    connectivity: Connectivity,
) -> Result<Vec<Cluster>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    if min_size == 0 {
        return Err(Error::InvalidArgument(
            "minimum cluster size must be at least 1".into(),
        ));
    }
    let significant: Vec<usize> = (0..wald.p_value.len())
        .filter(|&d| wald.p_value[d] < alpha)
        .collect();
    Ok(
        connected_components(&field.mask, &significant, connectivity)
            .into_iter()
            .filter(|c| c.len() >= min_size)
            .map(|mut ranks| {
                ranks.sort_unstable();
                Cluster {
                    size: ranks.len(),
                    ranks,
                }
            })
            .collect(),
    )
}

/// `Σ(d) = Σ̂_y(d,d) Ω⁻¹` for an unsmoothed fit with total variance `sigma_y`.
pub fn plug_in_covariance<'a>(
    design: &'a DesignMatrix,
    sigma_y: &'a [f64],
) -> impl Fn(usize) -> Result<DMatrix<f64>> + Sync + 'a {
    move |d| Ok(design.omega_inv() * sigma_y[d])
}

/// Covariance of coefficients built from fixed per-voxel weights:
/// `Σ(d)_{jk} = Ω⁻¹_{jk} Σ_{m,m'} w_{j,m} w_{k,m'} Σ̂_y(d_m, d_m')`.
pub fn weighted_covariance(
    design: &DesignMatrix,
    noise: &NoiseModel,
    weights: &[Vec<(usize, f64)>],
) -> Result<DMatrix<f64>> {
    let p = design.p();
    if weights.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "{} weight vectors for p={p}",
            weights.len()
        )));
    }
    let mut out = DMatrix::zeros(p, p);
    for j in 0..p {
        for k in j..p {
            let c = design.omega_inv()[(j, k)] * noise.cross_covariance(&weights[j], &weights[k]);
            out[(j, k)] = c;
            out[(k, j)] = c;
        }
    }
    Ok(clip_psd(out))
}

fn clip_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return m;
    }
    log::debug!("clipping negative eigenvalues of a coefficient covariance");
    let lambda = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0)));
    let v = &eig.eigenvectors;
    v * lambda * v.transpose()
}

/// Full `p × p` covariance of the smoothed coefficients, using each
/// coefficient's own final weights.
pub struct MassCovariance<'a> {
    state: &'a MassState,
    schedule: &'a ScaleSchedule,
    noise: &'a NoiseModel,
    design: &'a DesignMatrix,
}

impl<'a> MassCovariance<'a> {
    pub fn new(
        state: &'a MassState,
        schedule: &'a ScaleSchedule,
        noise: &'a NoiseModel,
        design: &'a DesignMatrix,
    ) -> Self {
        Self {
            state,
            schedule,
            noise,
            design,
        }
    }

    /// Final weight vectors of every coefficient at `d0`.
    pub fn weights(&self, d0: usize) -> Result<Vec<Vec<(usize, f64)>>> {
        (0..self.design.p())
            .map(|j| self.state.final_weights(self.schedule, j, d0))
            .collect()
    }

    pub fn at(&self, d0: usize) -> Result<DMatrix<f64>> {
        weighted_covariance(self.design, self.noise, &self.weights(d0)?)
    }
}

/// `ŷ(d) = x_newᵀ β̂(d)`.
pub fn predict_subject(field: &CoefficientField, x_new: &DVector<f64>) -> Result<Vec<f64>> {
    if x_new.len() != field.p() {
        return Err(Error::DimensionMismatch(format!(
            "covariate vector has length {}, field has {} coefficients",
            x_new.len(),
            field.p()
        )));
    }
    Ok((x_new.transpose() * &field.beta).iter().copied().collect())
}

/// Fixed (non-adaptive) weights from a radial kernel, one vector per voxel,
/// normalized to sum to 1.
pub(crate) fn radial_weights(
    field: &CoefficientField,
    radius: f64,
    kernel: impl Fn(f64) -> f64 + Sync,
) -> Vec<Vec<(usize, f64)>> {
    let mask = &field.mask;
    let stencil = Stencil::ball(mask.grid(), radius);
    (0..field.n_voxels())
        .into_par_iter()
        .map(|d| {
            let mut w: Vec<(usize, f64)> = stencil
                .members(mask, mask.voxel_of(d))
                .into_iter()
                .map(|(m, dist)| (m, kernel(dist)))
                .filter(|&(_, k)| k > 0.0)
                .collect();
            let total: f64 = w.iter().map(|x| x.1).sum();
            if total > 0.0 {
                w.iter_mut().for_each(|x| x.1 /= total);
                w
            } else {
                vec![(d, 1.0)]
            }
        })
        .collect()
}
