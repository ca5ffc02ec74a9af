//! Spatial noise model: local-linear smoothing of residual images, GCV
//! bandwidth selection, covariance estimates and functional principal
//! components computed through the `n × n` Gram matrix.
//!
//! The local-linear smoother uses the product kernel
//! `K_h(δ) = Π_k K((δ_k)/h)` with `K(u) = (1 − |u|)₊`. Because the kernel
//! factorizes over axes, the moment matrix `Σ K z zᵀ` and the right-hand
//! sides `Σ K z r` are computed with separable correlation passes over the
//! grid instead of explicit neighborhood sums. [`LocalLinearSmoother::weights_at`]
//! builds the same weights explicitly for a single voxel.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv;
use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::lsq::{residuals, CoefficientField, SubjectStack, VARIANCE_FLOOR};

fn k_loc(u: f64) -> f64 {
    (1.0 - u.abs()).max(0.0)
}

/// Largest integer offset along an axis that still has positive kernel weight.
fn axis_reach(spacing: f64, h: f64, dim: usize) -> usize {
    let reach = (h / spacing).ceil() as usize;
    reach.saturating_sub(1).min(dim.saturating_sub(1))
}

/// Tap vectors `u^k K(u)` for `k = 0, 1, 2` along one axis.
fn axis_taps(spacing: f64, h: f64, dim: usize) -> [Vec<f64>; 3] {
    let r = axis_reach(spacing, h, dim) as isize;
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for t in -r..=r {
        let u = t as f64 * spacing / h;
        let k = k_loc(u);
        out[0].push(k);
        out[1].push(u * k);
        out[2].push(u * u * k);
    }
    out
}

/// First column of the inverse of a symmetric 4×4 moment matrix, restricted
/// to the `used` coordinates (unused ones are zero in the result).
fn first_inverse_column(m: &[[f64; 4]; 4], used: [bool; 4]) -> Option<[f64; 4]> {
    let idx: Vec<usize> = (0..4).filter(|&k| used[k]).collect();
    let q = idx.len();
    let mut a = [[0.0f64; 5]; 4];
    for (r, &i) in idx.iter().enumerate() {
        for (c, &j) in idx.iter().enumerate() {
            a[r][c] = m[i][j];
        }
        a[r][q] = if i == 0 { 1.0 } else { 0.0 };
    }
    let scale = (0..q).map(|r| a[r][r].abs()).fold(0.0, f64::max);
    if scale <= 0.0 {
        return None;
    }
    for col in 0..q {
        let piv = (col..q)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap();
        if a[piv][col].abs() <= 1e-10 * scale {
            return None;
        }
        a.swap(col, piv);
        let d = a[col][col];
        for c in col..=q {
            a[col][c] /= d;
        }
        for r in 0..q {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    for c in col..=q {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
    }
    let mut out = [0.0; 4];
    for (r, &i) in idx.iter().enumerate() {
        out[i] = a[r][q];
    }
    Some(out)
}

/// Solves for the local-linear coefficient vector `a = M⁻¹e₀`. Axes with no
/// spread in the window are dropped from the linear term; if the remaining
/// system is still singular the local-constant solution is returned and the
/// voxel is flagged.
fn local_linear_coefs(m: &[[f64; 4]; 4]) -> ([f64; 4], bool) {
    let m00 = m[0][0];
    let mut used = [true; 4];
    for k in 1..4 {
        if m[k][k] <= 1e-12 * m00 {
            used[k] = false;
        }
    }
    match first_inverse_column(m, used) {
        Some(a) => (a, false),
        None => ([1.0 / m00, 0.0, 0.0, 0.0], true),
    }
}

/// Effective kernel row of the local-linear smoother at one voxel.
#[derive(Debug, Clone)]
pub struct LocalLinearWeights {
    /// Rank of the target voxel.
    pub target: usize,
    pub bandwidth: f64,
    /// `(rank, weight)` pairs, ascending by rank.
    pub contributors: Vec<(usize, f64)>,
    /// The local-linear system was singular and local-constant weights were used.
    pub fallback: bool,
}

/// Builds the local-linear weights at `target` (a rank) by direct summation
/// over the kernel window.
pub fn local_linear_weights(mask: &Mask, target: usize, h: f64) -> Result<LocalLinearWeights> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bandwidth must be positive, got {h}"
        )));
    }
    if target >= mask.n_active() {
        return Err(Error::InvalidArgument(format!(
            "rank {target} out of range"
        )));
    }
    let grid = mask.grid();
    let (dims, sp) = (grid.dims(), grid.spacing());
    let reach: Vec<isize> = (0..3)
        .map(|a| axis_reach(sp[a], h, dims[a]) as isize)
        .collect();
    let center = mask.voxel_of(target);
    let mut window = Vec::new();
    for dk in -reach[2]..=reach[2] {
        for dj in -reach[1]..=reach[1] {
            for di in -reach[0]..=reach[0] {
                let Some(id) = grid.offset(center, [di, dj, dk]) else {
                    continue;
                };
                let Some(rank) = mask.rank_of(id) else {
                    continue;
                };
                let u = [
                    di as f64 * sp[0] / h,
                    dj as f64 * sp[1] / h,
                    dk as f64 * sp[2] / h,
                ];
                let k = k_loc(u[0]) * k_loc(u[1]) * k_loc(u[2]);
                if k > 0.0 {
                    window.push((rank, k, [1.0, u[0], u[1], u[2]]));
                }
            }
        }
    }
    let mut m = [[0.0; 4]; 4];
    for (_, k, z) in &window {
        for a in 0..4 {
            for b in 0..4 {
                m[a][b] += k * z[a] * z[b];
            }
        }
    }
    let (coef, fallback) = local_linear_coefs(&m);
    let contributors = window
        .into_iter()
        .map(|(rank, k, z)| (rank, k * (0..4).map(|a| coef[a] * z[a]).sum::<f64>()))
        .collect();
    Ok(LocalLinearWeights {
        target,
        bandwidth: h,
        contributors,
        fallback,
    })
}

/// Local-linear smoother for one bandwidth, shared by all subjects.
#[derive(Debug, Clone)]
pub struct LocalLinearSmoother {
    mask: Arc<Mask>,
    bandwidth: f64,
    taps: [[Vec<f64>; 3]; 3],
    /// `M⁻¹e₀` per active voxel.
    coefs: Vec<[f64; 4]>,
    fallback: Vec<bool>,
}

impl LocalLinearSmoother {
    pub fn new(mask: Arc<Mask>, h: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bandwidth must be positive, got {h}"
            )));
        }
        let grid = mask.grid();
        let (dims, sp) = (grid.dims(), grid.spacing());
        let taps = [
            axis_taps(sp[0], h, dims[0]),
            axis_taps(sp[1], h, dims[1]),
            axis_taps(sp[2], h, dims[2]),
        ];
        let indicator: Vec<f64> = mask.flags().into_iter().map(|b| b as u8 as f64).collect();
        // power of u along each axis for the ten distinct moment entries
        let pairs: [(usize, usize); 10] = [
            (0, 0),
            (0, 1),
            (0, 2),
            (0, 3),
            (1, 1),
            (2, 2),
            (3, 3),
            (1, 2),
            (1, 3),
            (2, 3),
        ];
        let moments: Vec<Vec<f64>> = pairs
            .par_iter()
            .map(|&(a, b)| {
                let mut pow = [0usize; 3];
                for c in [a, b] {
                    if c > 0 {
                        pow[c - 1] += 1;
                    }
                }
                conv::separable(
                    dims,
                    &indicator,
                    [&taps[0][pow[0]], &taps[1][pow[1]], &taps[2][pow[2]]],
                )
            })
            .collect();
        let (coefs, fallback): (Vec<[f64; 4]>, Vec<bool>) = mask
            .voxels()
            .par_iter()
            .map(|&id| {
                let mut m = [[0.0; 4]; 4];
                for (e, &(a, b)) in pairs.iter().enumerate() {
                    m[a][b] = moments[e][id];
                    m[b][a] = moments[e][id];
                }
                local_linear_coefs(&m)
            })
            .unzip();
        Ok(Self {
            mask,
            bandwidth: h,
            taps,
            coefs,
            fallback,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Number of voxels that fell back to local-constant weights.
    pub fn fallback_count(&self) -> usize {
        self.fallback.iter().filter(|&&f| f).count()
    }

    pub fn fallback_flags(&self) -> &[bool] {
        &self.fallback
    }

    /// Diagonal of the smoothing matrix (the self-weights).
    pub fn self_weights(&self) -> Vec<f64> {
        self.coefs.iter().map(|a| a[0]).collect()
    }

    /// `tr(S)`.
    pub fn trace(&self) -> f64 {
        self.coefs.iter().map(|a| a[0]).sum()
    }

    /// Smooths one rank-indexed image.
    pub fn smooth_image(&self, values: &[f64]) -> Vec<f64> {
        let grid = self.mask.grid();
        let dims = grid.dims();
        let full = self.mask.scatter(values, 0.0);
        let len = full.len();
        let t = &self.taps;
        let (mut kz, mut uz) = (vec![0.0; len], vec![0.0; len]);
        conv::pass(dims, &full, 2, &t[2][0], &mut kz);
        conv::pass(dims, &full, 2, &t[2][1], &mut uz);
        let (mut kzky, mut kzuy, mut uzky) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
        conv::pass(dims, &kz, 1, &t[1][0], &mut kzky);
        conv::pass(dims, &kz, 1, &t[1][1], &mut kzuy);
        conv::pass(dims, &uz, 1, &t[1][0], &mut uzky);
        let mut b = [kz, uz, vec![0.0; len], vec![0.0; len]];
        conv::pass(dims, &kzky, 0, &t[0][0], &mut b[0]);
        conv::pass(dims, &kzky, 0, &t[0][1], &mut b[1]);
        conv::pass(dims, &kzuy, 0, &t[0][0], &mut b[2]);
        conv::pass(dims, &uzky, 0, &t[0][0], &mut b[3]);
        self.mask
            .voxels()
            .iter()
            .zip(&self.coefs)
            .map(|(&id, a)| a[0] * b[0][id] + a[1] * b[1][id] + a[2] * b[2][id] + a[3] * b[3][id])
            .collect()
    }

    /// Smooths every row of an `n × N_D` matrix.
    pub fn smooth(&self, images: &DMatrix<f64>) -> DMatrix<f64> {
        let rows: Vec<Vec<f64>> = (0..images.nrows())
            .into_par_iter()
            .map(|i| {
                let row: Vec<f64> = images.row(i).iter().copied().collect();
                self.smooth_image(&row)
            })
            .collect();
        DMatrix::from_fn(images.nrows(), images.ncols(), |i, d| rows[i][d])
    }

    /// Explicit weights at one voxel, using this smoother's solved coefficients.
    pub fn weights_at(&self, target: usize) -> LocalLinearWeights {
        let grid = self.mask.grid();
        let sp = grid.spacing();
        let h = self.bandwidth;
        let center = self.mask.voxel_of(target);
        let a = self.coefs[target];
        let mut contributors = Vec::new();
        let reach: Vec<isize> = (0..3)
            .map(|ax| (self.taps[ax][0].len() / 2) as isize)
            .collect();
        for dk in -reach[2]..=reach[2] {
            for dj in -reach[1]..=reach[1] {
                for di in -reach[0]..=reach[0] {
                    let Some(id) = grid.offset(center, [di, dj, dk]) else {
                        continue;
                    };
                    let Some(rank) = self.mask.rank_of(id) else {
                        continue;
                    };
                    let u = [
                        di as f64 * sp[0] / h,
                        dj as f64 * sp[1] / h,
                        dk as f64 * sp[2] / h,
                    ];
                    let k = k_loc(u[0]) * k_loc(u[1]) * k_loc(u[2]);
                    if k > 0.0 {
                        contributors
                            .push((rank, k * (a[0] + a[1] * u[0] + a[2] * u[1] + a[3] * u[2])));
                    }
                }
            }
        }
        LocalLinearWeights {
            target,
            bandwidth: h,
            contributors,
            fallback: self.fallback[target],
        }
    }
}

/// `η̂ᵢ = S rᵢ` for every subject.
pub fn smooth_residuals(
    residuals: &DMatrix<f64>,
    mask: &Arc<Mask>,
    h: f64,
) -> Result<DMatrix<f64>> {
    check_columns(residuals, mask)?;
    Ok(LocalLinearSmoother::new(mask.clone(), h)?.smooth(residuals))
}

fn check_columns(m: &DMatrix<f64>, mask: &Mask) -> Result<()> {
    if m.ncols() != mask.n_active() {
        return Err(Error::DimensionMismatch(format!(
            "matrix has {} columns, mask has {} active voxels",
            m.ncols(),
            mask.n_active()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GcvScore {
    pub bandwidth: f64,
    pub trace: f64,
    /// `None` when `tr(S) >= N_D`.
    pub score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct GcvSelection {
    pub bandwidth: f64,
    pub scores: Vec<GcvScore>,
    /// Smoothed residuals at the selected bandwidth.
    pub eta_hat: DMatrix<f64>,
    pub fallback_voxels: usize,
}

/// Default GCV candidate grid `1.25^k`, `k = 0..=8`, in units of the
/// smallest voxel spacing.
pub fn default_gcv_grid(mask: &Mask) -> Vec<f64> {
    let base = mask
        .grid()
        .spacing()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    (0..=8).map(|k| base * 1.25f64.powi(k)).collect()
}

/// Picks the bandwidth minimizing
/// `GCV(h) = Σᵢ ‖(I − S)rᵢ‖² / (1 − tr(S)/N_D)²`; ties go to the smaller `h`.
pub fn gcv_select(
    residuals: &DMatrix<f64>,
    mask: &Arc<Mask>,
    candidates: &[f64],
) -> Result<GcvSelection> {
    check_columns(residuals, mask)?;
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("GCV candidate list is empty".into()));
    }
    if let Some(h) = candidates.iter().find(|&&h| !(h > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "GCV candidate {h} is not positive"
        )));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let nd = mask.n_active() as f64;
    let mut scores = Vec::with_capacity(sorted.len());
    let mut best: Option<(f64, f64, DMatrix<f64>, usize)> = None;
    for &h in &sorted {
        let smoother = LocalLinearSmoother::new(mask.clone(), h)?;
        let trace = smoother.trace();
        if trace >= nd * (1.0 - 1e-12) {
            log::debug!("GCV candidate h={h} disqualified: tr(S)={trace} >= N_D={nd}");
            scores.push(GcvScore {
                bandwidth: h,
                trace,
                score: None,
            });
            continue;
        }
        let eta = smoother.smooth(residuals);
        let rss: f64 = residuals
            .iter()
            .zip(eta.iter())
            .map(|(r, e)| (r - e) * (r - e))
            .sum();
        let denom = (1.0 - trace / nd).powi(2);
        let score = rss / denom;
        scores.push(GcvScore {
            bandwidth: h,
            trace,
            score: Some(score),
        });
        if best.as_ref().is_none_or(|b| score < b.1) {
            best = Some((h, score, eta, smoother.fallback_count()));
        }
    }
    let (bandwidth, _, eta_hat, fallback_voxels) = best.ok_or(Error::AllCandidatesDisqualified)?;
    Ok(GcvSelection {
        bandwidth,
        scores,
        eta_hat,
        fallback_voxels,
    })
}

/// `Σ̂_ε(d,d) = n⁻¹ Σᵢ (yᵢ(d) − xᵢᵀβ̂(d) − η̂ᵢ(d))²`.
pub fn estimate_sigma_eps(
    stack: &SubjectStack,
    design: &DesignMatrix,
    field: &CoefficientField,
    eta_hat: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let r = residuals(stack, design, field)?;
    if r.shape() != eta_hat.shape() {
        return Err(Error::DimensionMismatch(
            "residuals and η̂ differ in shape".into(),
        ));
    }
    let n = r.nrows() as f64;
    Ok((0..r.ncols())
        .map(|d| {
            r.column(d)
                .iter()
                .zip(eta_hat.column(d).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n
        })
        .collect())
}

/// `Σ̂_η(d,d') = (n − p)⁻¹ Σᵢ η̂ᵢ(d) η̂ᵢ(d')` for ranks `d`, `d'`.
pub fn sigma_eta_at(eta_hat: &DMatrix<f64>, p: usize, d: usize, d2: usize) -> f64 {
    let n = eta_hat.nrows();
    eta_hat.column(d).dot(&eta_hat.column(d2)) / (n - p) as f64
}

/// Eigenpairs of the empirical covariance operator of `η̂`.
#[derive(Debug, Clone)]
pub struct EigenSet {
    /// Nonzero eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// One row per eigenvalue, over voxel ranks, unit norm in the
    /// voxel-volume-weighted inner product.
    pub eigenfunctions: DMatrix<f64>,
    /// Number of leading components reaching the cumulative threshold.
    pub n_components: usize,
}

/// Eigendecomposition of `Σ̂_η` through the `n × n` Gram matrix `VᵀV`,
/// `V = η̂ᵀ`. Eigenvalues are `𝒱 μ_l / (n − p)`; eigenfunctions are `Vξ_l`
/// rescaled to unit discrete norm and signed so their largest-magnitude
/// entry is positive. When `center` is set, each voxel's values are
/// mean-centered across subjects first.
pub fn eigendecompose(
    eta_hat: &DMatrix<f64>,
    mask: &Mask,
    p: usize,
    cum_threshold: f64,
    center: bool,
) -> Result<EigenSet> {
    check_columns(eta_hat, mask)?;
    let n = eta_hat.nrows();
    if n < 2 || n <= p {
        return Err(Error::InvalidArgument(format!(
            "need n >= 2 and n > p, got n={n}, p={p}"
        )));
    }
    if !(cum_threshold > 0.0 && cum_threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "cumulative threshold must lie in (0, 1], got {cum_threshold}"
        )));
    }
    let centered;
    let eta = if center {
        let mut c = eta_hat.clone();
        for mut col in c.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        centered = c;
        &centered
    } else {
        eta_hat
    };
    let gram = eta * eta.transpose();
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mu_max = eig.eigenvalues[order[0]].max(0.0);
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&k| mu_max > 0.0 && eig.eigenvalues[k] > 1e-12 * mu_max)
        .collect();
    let volume = mask.grid().voxel_volume();
    let nd = eta.ncols();
    let mut eigenvalues = Vec::with_capacity(keep.len());
    let mut eigenfunctions = DMatrix::zeros(keep.len(), nd);
    for (l, &k) in keep.iter().enumerate() {
        let mu = eig.eigenvalues[k];
        let xi = eig.eigenvectors.column(k);
        let mut psi = eta.transpose() * xi;
        // Renormalize explicitly rather than trusting μ, which loses
        // relative accuracy for small eigenvalues.
        let norm = (psi.norm_squared() * volume).sqrt();
        psi /= norm;
        let imax = psi.iamax();
        if psi[imax] < 0.0 {
            psi.neg_mut();
        }
        eigenfunctions.row_mut(l).copy_from(&psi.transpose());
        eigenvalues.push(mu * volume / (n - p) as f64);
    }
    let total: f64 = eigenvalues.iter().sum();
    let mut n_components = 0;
    if total > 0.0 {
        let mut acc = 0.0;
        for (l, lam) in eigenvalues.iter().enumerate() {
            acc += lam;
            if acc / total >= cum_threshold * (1.0 - 1e-12) {
                n_components = l + 1;
                break;
            }
        }
    }
    Ok(EigenSet {
        eigenvalues,
        eigenfunctions,
        n_components,
    })
}

/// `ξ̂_{i,l} = Σ_m η̂ᵢ(d_m) ψ̂_l(d_m) 𝒱(d_m)`, an `n × L` matrix.
pub fn fpc_scores(
    eta_hat: &DMatrix<f64>,
    eigenfunctions: &DMatrix<f64>,
    mask: &Mask,
) -> Result<DMatrix<f64>> {
    check_columns(eta_hat, mask)?;
    if eigenfunctions.ncols() != eta_hat.ncols() {
        return Err(Error::DimensionMismatch(
            "eigenfunctions and η̂ differ in voxel count".into(),
        ));
    }
    Ok(eta_hat * eigenfunctions.transpose() * mask.grid().voxel_volume())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FpcaConfig {
    /// Candidate bandwidths; `None` uses [`default_gcv_grid`].
    pub gcv_grid: Option<Vec<f64>>,
    /// Skip GCV and use this bandwidth.
    pub bandwidth: Option<f64>,
    pub cum_threshold: f64,
    /// Mean-center η̂ across subjects before the eigendecomposition.
    pub center: bool,
}

impl Default for FpcaConfig {
    fn default() -> Self {
        Self {
            gcv_grid: None,
            bandwidth: None,
            cum_threshold: 0.8,
            center: false,
        }
    }
}

/// Everything Stage I learns about the spatial noise.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    /// `n × N_D` smoothed individual deviations.
    pub eta_hat: DMatrix<f64>,
    pub sigma_eps: Vec<f64>,
    pub eigen: EigenSet,
    /// `n × L` FPC scores for all retained eigenfunctions.
    pub scores: DMatrix<f64>,
    pub bandwidth: f64,
    pub gcv_scores: Vec<GcvScore>,
    pub cum_threshold: f64,
    pub fallback_voxels: usize,
    p: usize,
}

impl NoiseModel {
    /// Runs local-linear smoothing (bandwidth by GCV unless fixed), the
    /// `Σ̂_ε` estimate, the eigendecomposition and the FPC scores.
    pub fn fit(
        stack: &SubjectStack,
        design: &DesignMatrix,
        field: &CoefficientField,
        config: &FpcaConfig,
    ) -> Result<NoiseModel> {
        let mask = stack.mask();
        let r = residuals(stack, design, field)?;
        let selection = match config.bandwidth {
            Some(h) => {
                let smoother = LocalLinearSmoother::new(mask.clone(), h)?;
                GcvSelection {
                    bandwidth: h,
                    scores: Vec::new(),
                    eta_hat: smoother.smooth(&r),
                    fallback_voxels: smoother.fallback_count(),
                }
            }
            None => {
                let grid = config
                    .gcv_grid
                    .clone()
                    .unwrap_or_else(|| default_gcv_grid(mask));
                gcv_select(&r, mask, &grid)?
            }
        };
        let eta_hat = selection.eta_hat;
        let n = r.nrows() as f64;
        let sigma_eps: Vec<f64> = (0..r.ncols())
            .map(|d| {
                r.column(d)
                    .iter()
                    .zip(eta_hat.column(d).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / n
            })
            .collect();
        let eigen = eigendecompose(
            &eta_hat,
            mask,
            design.p(),
            config.cum_threshold,
            config.center,
        )?;
        let scores = fpc_scores(&eta_hat, &eigen.eigenfunctions, mask)?;
        Ok(NoiseModel {
            eta_hat,
            sigma_eps,
            eigen,
            scores,
            bandwidth: selection.bandwidth,
            gcv_scores: selection.scores,
            cum_threshold: config.cum_threshold,
            fallback_voxels: selection.fallback_voxels,
            p: design.p(),
        })
    }

    /// Assembles a model from precomputed parts.
    pub fn from_parts(
        eta_hat: DMatrix<f64>,
        sigma_eps: Vec<f64>,
        p: usize,
        mask: &Mask,
    ) -> Result<NoiseModel> {
        check_columns(&eta_hat, mask)?;
        if sigma_eps.len() != eta_hat.ncols() {
            return Err(Error::DimensionMismatch(
                "Σ̂_ε length differs from voxel count".into(),
            ));
        }
        let eigen = eigendecompose(&eta_hat, mask, p, 0.8, false)?;
        let scores = fpc_scores(&eta_hat, &eigen.eigenfunctions, mask)?;
        Ok(NoiseModel {
            eta_hat,
            sigma_eps,
            eigen,
            scores,
            bandwidth: f64::NAN,
            gcv_scores: Vec::new(),
            cum_threshold: 0.8,
            fallback_voxels: 0,
            p,
        })
    }

    pub fn n(&self) -> usize {
        self.eta_hat.nrows()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Leading `L_S` eigenvalues.
    pub fn leading_eigenvalues(&self) -> &[f64] {
        &self.eigen.eigenvalues[..self.eigen.n_components]
    }

    pub fn sigma_eta(&self, d: usize, d2: usize) -> f64 {
        sigma_eta_at(&self.eta_hat, self.p, d, d2)
    }

    /// `Σ̂_y(d,d') = Σ̂_η(d,d') + Σ̂_ε(d,d)·1{d = d'}`.
    pub fn sigma_y(&self, d: usize, d2: usize) -> f64 {
        let eta = self.sigma_eta(d, d2);
        if d == d2 {
            eta + self.sigma_eps[d]
        } else {
            eta
        }
    }

    /// `Σ̂_y(d,d)` at every voxel.
    pub fn sigma_y_diag(&self) -> Vec<f64> {
        (0..self.eta_hat.ncols())
            .map(|d| self.sigma_y(d, d))
            .collect()
    }

    /// `Σ_m Σ_m' w_m v_m' Σ̂_y(d_m, d_m')` for two sparse weight vectors
    /// given as rank-sorted `(rank, weight)` lists.
    ///
    /// Uses `Σ̂_η = (n − p)⁻¹ η̂ᵀη̂`, so the double sum collapses to
    /// `(n − p)⁻¹ Σᵢ (Σ_m w_m η̂ᵢ(d_m))(Σ_m v_m η̂ᵢ(d_m))` plus the diagonal
    /// `Σ̂_ε` term on shared voxels.
    pub fn cross_covariance(&self, w: &[(usize, f64)], v: &[(usize, f64)]) -> f64 {
        let n = self.n();
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        self.project(w.iter().copied(), &mut a);
        self.project(v.iter().copied(), &mut b);
        let eta: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (n - self.p) as f64;
        let (mut i, mut j, mut eps) = (0, 0, 0.0);
        while i < w.len() && j < v.len() {
            match w[i].0.cmp(&v[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    eps += w[i].1 * v[j].1 * self.sigma_eps[w[i].0];
                    i += 1;
                    j += 1;
                }
            }
        }
        eta + eps
    }

    /// `wᵀ Σ̂_y w` for a weight vector over voxel ranks. `scratch` must have
    /// length `n`.
    pub fn weighted_variance(
        &self,
        w: impl Iterator<Item = (usize, f64)> + Clone,
        scratch: &mut [f64],
    ) -> f64 {
        self.project(w.clone(), scratch);
        let eta: f64 = scratch.iter().map(|x| x * x).sum::<f64>() / (self.n() - self.p) as f64;
        let eps: f64 = w.map(|(r, wt)| wt * wt * self.sigma_eps[r]).sum();
        (eta + eps).max(0.0)
    }

    fn project(&self, w: impl Iterator<Item = (usize, f64)>, acc: &mut [f64]) {
        acc.iter_mut().for_each(|x| *x = 0.0);
        let n = self.n();
        let data = self.eta_hat.as_slice();
        for (r, wt) in w {
            let col = &data[r * n..(r + 1) * n];
            for (a, e) in acc.iter_mut().zip(col) {
                *a += wt * e;
            }
        }
    }

    /// Raw-scale variances `e_jᵀΩ⁻¹e_j · Σ̂_y(d,d)`, floored.
    pub fn raw_variance(&self, design: &DesignMatrix) -> DMatrix<f64> {
        let sy = self.sigma_y_diag();
        DMatrix::from_fn(design.p(), sy.len(), |j, d| {
            (design.coeff_scale(j) * sy[d]).max(VARIANCE_FLOOR)
        })
    }
}
