//! Multiscale adaptive sequential smoothing of coefficient maps.
//!
//! At scale `s` each coefficient `j` at voxel `d₀` is re-estimated as a
//! weighted average of the raw least-squares estimates inside the ball of
//! radius `h_s`. The weights combine a location kernel with a similarity
//! kernel computed from the scale `s − 1` estimates, so averaging does not
//! cross edges of the coefficient map. After each sweep, entries that moved
//! too far from their raw value revert to the previous scale and freeze.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::fpca::NoiseModel;
use crate::grid::{Mask, Stencil};
use crate::lsq::{CoefficientField, VARIANCE_FLOOR};
use crate::stats::{chi2_lower_quantile, chi2_upper_quantile};

/// How `χ²₁(a)` is read in `C_n = n^0.4 χ²₁(0.8)` and `C_s = χ²₁(0.8/s)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantileConvention {
    /// `P(χ²₁ ≤ q) = a`: `C_n ≈ 1.64 n^0.4`, `C_s` shrinks with `s`.
    #[default]
    Lower,
    /// `P(χ²₁ > q) = a`: `C_n ≈ 0.064 n^0.4`, `C_s` grows with `s`.
    Upper,
}

impl QuantileConvention {
    pub fn quantile(self, a: f64) -> Result<f64> {
        match self {
            QuantileConvention::Lower => chi2_lower_quantile(1, a),
            QuantileConvention::Upper => chi2_upper_quantile(1, a),
        }
    }
}

/// Similarity kernel `K_st`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructuralKernel {
    /// `exp(−u)`.
    #[default]
    Exponential,
    /// `min(1, 2(1 − u))₊`.
    Truncated,
}

impl StructuralKernel {
    pub fn eval(self, u: f64) -> f64 {
        match self {
            StructuralKernel::Exponential => (-u).exp(),
            StructuralKernel::Truncated => (2.0 * (1.0 - u)).clamp(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MassConfig {
    pub c_h: f64,
    /// Number of smoothing steps `S`.
    pub steps: usize,
    pub quantile: QuantileConvention,
    /// Overrides the default `C_n = n^0.4 χ²₁(0.8)`.
    pub c_n: Option<f64>,
    /// Overrides the per-step stop thresholds; length must equal `steps`.
    pub c_s: Option<Vec<f64>>,
    pub kernel: StructuralKernel,
}

impl Default for MassConfig {
    fn default() -> Self {
        Self {
            c_h: 1.1,
            steps: 10,
            quantile: QuantileConvention::Lower,
            c_n: None,
            c_s: None,
            kernel: StructuralKernel::Exponential,
        }
    }
}

/// Bandwidths and thresholds for scales `1..=S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    pub c_h: f64,
    /// `h_s = c_h^s · δ` for `s = 1..=S`, where `δ` is the smallest voxel spacing.
    pub bandwidths: Vec<f64>,
    pub c_n: f64,
    /// `C_s` for `s = 1..=S`.
    pub c_s: Vec<f64>,
    pub kernel: StructuralKernel,
}

impl ScaleSchedule {
    pub fn new(config: &MassConfig, n: usize, mask: &Mask) -> Result<Self> {
        if !(config.c_h > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "c_h must exceed 1, got {}",
                config.c_h
            )));
        }
        let c_n = match config.c_n {
            Some(c) if c > 0.0 => c,
            Some(c) => {
                return Err(Error::InvalidArgument(format!(
                    "C_n must be positive, got {c}"
                )))
            }
            None => (n as f64).powf(0.4) * config.quantile.quantile(0.8)?,
        };
        let delta = mask
            .grid()
            .spacing()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let bandwidths = (1..=config.steps)
            .map(|s| delta * config.c_h.powi(s as i32))
            .collect();
        let c_s = match &config.c_s {
            Some(c) if c.len() == config.steps && c.iter().all(|&v| v > 0.0) => c.clone(),
            Some(c) => {
                return Err(Error::InvalidArgument(format!(
                    "{} positive stop thresholds required, got {c:?}",
                    config.steps
                )))
            }
            None => (1..=config.steps)
                .map(|s| config.quantile.quantile(0.8 / s as f64))
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(Self {
            c_h: config.c_h,
            bandwidths,
            c_n,
            c_s,
            kernel: config.kernel,
        })
    }

    pub fn steps(&self) -> usize {
        self.bandwidths.len()
    }

    /// `h_s` for `s ≥ 1`.
    pub fn bandwidth(&self, s: usize) -> f64 {
        self.bandwidths[s - 1]
    }

    /// `C_s` for `s ≥ 1`.
    pub fn threshold(&self, s: usize) -> f64 {
        self.c_s[s - 1]
    }
}

/// `D = (β̂_j(d₀) − β̂_j(d₁))² / Var(β̂_j(d₀))` on the given field.
pub fn similarity(field: &CoefficientField, j: usize, d0: usize, d1: usize) -> f64 {
    let diff = field.beta[(j, d0)] - field.beta[(j, d1)];
    diff * diff / field.var_diag[(j, d0)].max(VARIANCE_FLOOR)
}

/// `ω = (1 − dist/h)₊ · K_st(D / C_n)`.
pub fn adaptive_weight(dist: f64, h: f64, d: f64, c_n: f64, kernel: StructuralKernel) -> f64 {
    let loc = (1.0 - dist / h).max(0.0);
    if loc == 0.0 {
        return 0.0;
    }
    loc * kernel.eval(d / c_n)
}

/// Progress of the smoothing sequence.
#[derive(Debug, Clone)]
pub struct MassState {
    /// Fields after each completed scale; entry 0 is the raw fit.
    history: Vec<CoefficientField>,
    /// `p × N_D`, column-major like the fields.
    frozen: Vec<bool>,
    stopped_at: Vec<Option<usize>>,
    /// Scale whose weights produced the current value of each entry.
    final_scale: Vec<usize>,
}

impl MassState {
    pub fn new(raw: CoefficientField) -> Result<Self> {
        if raw.scale_index != 0 {
            return Err(Error::InvalidArgument(format!(
                "smoothing must start from the raw field, got scale {}",
                raw.scale_index
            )));
        }
        let cells = raw.beta.len();
        Ok(Self {
            history: vec![raw],
            frozen: vec![false; cells],
            stopped_at: vec![None; cells],
            final_scale: vec![0; cells],
        })
    }

    pub fn raw(&self) -> &CoefficientField {
        &self.history[0]
    }

    pub fn current(&self) -> &CoefficientField {
        self.history.last().unwrap()
    }

    pub fn scale(&self) -> usize {
        self.history.len() - 1
    }

    /// Field after scale `s`.
    pub fn field_at(&self, s: usize) -> &CoefficientField {
        &self.history[s]
    }

    pub fn into_current(mut self) -> CoefficientField {
        self.history.pop().unwrap()
    }

    fn cell(&self, j: usize, d: usize) -> usize {
        j + self.raw().p() * d
    }

    pub fn is_frozen(&self, j: usize, d: usize) -> bool {
        self.frozen[self.cell(j, d)]
    }

    /// Scale at which `(j, d)` was frozen, if it was.
    pub fn stopped_at(&self, j: usize, d: usize) -> Option<usize> {
        self.stopped_at[self.cell(j, d)]
    }

    /// Scale whose weights produced the current value of `(j, d)`.
    pub fn final_scale(&self, j: usize, d: usize) -> usize {
        self.final_scale[self.cell(j, d)]
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().filter(|&&f| f).count()
    }

    /// Normalized weights `ω̃_j(d₀, ·; h_s)` as rank-sorted `(rank, weight)`
    /// pairs, computed from the field at scale `s − 1`. Scale 0 gives the
    /// indicator of `d₀`.
    pub fn weights(
        &self,
        schedule: &ScaleSchedule,
        j: usize,
        d0: usize,
        s: usize,
    ) -> Result<Vec<(usize, f64)>> {
        if s == 0 {
            return Ok(vec![(d0, 1.0)]);
        }
        let mask = &self.raw().mask;
        let stencil = Stencil::ball(mask.grid(), schedule.bandwidth(s));
        let mut out = Vec::new();
        normalized_weights(&self.history[s - 1], &stencil, schedule, j, d0, s, &mut out)?;
        Ok(out)
    }

    /// Weights that produced the current value of `(j, d0)`.
    pub fn final_weights(
        &self,
        schedule: &ScaleSchedule,
        j: usize,
        d0: usize,
    ) -> Result<Vec<(usize, f64)>> {
        self.weights(schedule, j, d0, self.final_scale(j, d0))
    }

    /// One smoothing pass at the next scale. Frozen entries are copied.
    pub fn sweep(
        &self,
        schedule: &ScaleSchedule,
        noise: &NoiseModel,
        design: &DesignMatrix,
    ) -> Result<CoefficientField> {
        let s = self.scale() + 1;
        if s > schedule.steps() {
            return Err(Error::InvalidArgument(format!(
                "scale {s} exceeds the schedule's {} steps",
                schedule.steps()
            )));
        }
        let prev = self.current();
        let raw = self.raw();
        let mask = &raw.mask;
        let p = raw.p();
        let nd = raw.n_voxels();
        if noise.eta_hat.ncols() != nd || design.p() != p {
            return Err(Error::DimensionMismatch(
                "noise model, design and field disagree".into(),
            ));
        }
        let stencil = Stencil::ball(mask.grid(), schedule.bandwidth(s));
        let cols: Vec<(Vec<f64>, Vec<f64>)> = (0..nd)
            .into_par_iter()
            .map_init(
                || (Vec::with_capacity(stencil.len()), vec![0.0; noise.n()]),
                |(weights, scratch), d0| -> Result<(Vec<f64>, Vec<f64>)> {
                    let mut beta = vec![0.0; p];
                    let mut var = vec![0.0; p];
                    for j in 0..p {
                        if self.frozen[j + p * d0] {
                            beta[j] = prev.beta[(j, d0)];
                            var[j] = prev.var_diag[(j, d0)];
                            continue;
                        }
                        normalized_weights(prev, &stencil, schedule, j, d0, s, weights)?;
                        beta[j] = weights.iter().map(|&(m, w)| w * raw.beta[(j, m)]).sum();
                        let v = design.coeff_scale(j)
                            * noise.weighted_variance(weights.iter().copied(), scratch);
                        var[j] = v.max(VARIANCE_FLOOR);
                    }
                    Ok((beta, var))
                },
            )
            .collect::<Result<_>>()?;
        let beta = DMatrix::from_fn(p, nd, |j, d| cols[d].0[j]);
        let var_diag = DMatrix::from_fn(p, nd, |j, d| cols[d].1[j]);
        Ok(CoefficientField {
            mask: mask.clone(),
            beta,
            var_diag,
            scale_index: s,
        })
    }

    /// Applies the stop rule to a freshly swept field and records it as the
    /// next scale. Entries with
    /// `(β̂_j(d₀) − β̂_j(d₀; h_s))² / Var(β̂_j(d₀)) > C_s` revert to scale
    /// `s − 1` and freeze.
    pub fn stop_check(
        &mut self,
        mut candidate: CoefficientField,
        schedule: &ScaleSchedule,
    ) -> Result<usize> {
        let s = self.scale() + 1;
        if candidate.scale_index != s {
            return Err(Error::InvalidArgument(format!(
                "expected a field at scale {s}, got {}",
                candidate.scale_index
            )));
        }
        let threshold = schedule.threshold(s);
        let prev = self.current();
        let raw = self.raw();
        let p = raw.p();
        let mut reverted = Vec::new();
        for d in 0..raw.n_voxels() {
            for j in 0..p {
                let cell = j + p * d;
                if self.frozen[cell] {
                    continue;
                }
                let diff = raw.beta[(j, d)] - candidate.beta[(j, d)];
                let dist = diff * diff / raw.var_diag[(j, d)].max(VARIANCE_FLOOR);
                if dist > threshold {
                    candidate.beta[(j, d)] = prev.beta[(j, d)];
                    candidate.var_diag[(j, d)] = prev.var_diag[(j, d)];
                    reverted.push(cell);
                }
            }
        }
        for cell in 0..self.frozen.len() {
            if !self.frozen[cell] {
                self.final_scale[cell] = s;
            }
        }
        for &cell in &reverted {
            self.frozen[cell] = true;
            self.stopped_at[cell] = Some(s);
            self.final_scale[cell] = s - 1;
        }
        self.history.push(candidate);
        Ok(reverted.len())
    }
}

fn normalized_weights(
    prev: &CoefficientField,
    stencil: &Stencil,
    schedule: &ScaleSchedule,
    j: usize,
    d0: usize,
    s: usize,
    out: &mut Vec<(usize, f64)>,
) -> Result<()> {
    out.clear();
    let mask = &prev.mask;
    let h = schedule.bandwidth(s);
    let center = mask.voxel_of(d0);
    let b0 = prev.beta[(j, d0)];
    let inv_var = 1.0 / prev.var_diag[(j, d0)].max(VARIANCE_FLOOR);
    let mut total = 0.0;
    stencil.for_each_member(mask, center, |m, dist| {
        let diff = b0 - prev.beta[(j, m)];
        let w = adaptive_weight(
            dist,
            h,
            diff * diff * inv_var,
            schedule.c_n,
            schedule.kernel,
        );
        if w > 0.0 {
            out.push((m, w));
            total += w;
        }
    });
    if !(total > 0.0) {
        return Err(Error::ZeroWeight(d0));
    }
    for (_, w) in out.iter_mut() {
        *w /= total;
    }
    Ok(())
}

/// Runs all scales of the schedule from the raw field.
///
/// The raw variances are replaced by the noise-model values
/// `Ω⁻¹_jj Σ̂_y(d, d)` before the first sweep. `observer` sees the state
/// after every scale (including scale 0).
pub fn run_mass(
    raw: CoefficientField,
    schedule: &ScaleSchedule,
    noise: &NoiseModel,
    design: &DesignMatrix,
    mut observer: impl FnMut(&MassState),
) -> Result<MassState> {
    let mut raw = raw;
    if noise.eta_hat.ncols() != raw.n_voxels() {
        return Err(Error::DimensionMismatch(
            "noise model and field differ in voxel count".into(),
        ));
    }
    raw.var_diag = noise.raw_variance(design);
    let mut state = MassState::new(raw)?;
    observer(&state);
    for s in 1..=schedule.steps() {
        let candidate = state.sweep(schedule, noise, design)?;
        let reverted = state.stop_check(candidate, schedule)?;
        log::debug!(
            "scale {s}: h={:.4}, {reverted} entries frozen, {} frozen in total",
            schedule.bandwidth(s),
            state.frozen_count()
        );
        observer(&state);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid3;
    use std::sync::Arc;

    #[test]
    fn weight_examples() {
        let k = StructuralKernel::Exponential;
        assert_eq!(adaptive_weight(0.0, 1.1, 0.0, 0.3, k), 1.0);
        assert_eq!(adaptive_weight(1.1, 1.1, 0.0, 0.3, k), 0.0);
        assert_eq!(adaptive_weight(2.0, 1.1, 0.0, 0.3, k), 0.0);
        let w = adaptive_weight(0.55, 1.1, 0.3, 0.3, k);
        assert!((w - 0.5 * (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn truncated_kernel_shape() {
        let k = StructuralKernel::Truncated;
        assert_eq!(k.eval(0.0), 1.0);
        assert_eq!(k.eval(0.5), 1.0);
        assert!((k.eval(0.75) - 0.5).abs() < 1e-15);
        assert_eq!(k.eval(1.0), 0.0);
        assert_eq!(k.eval(3.0), 0.0);
    }

    #[test]
    fn similarity_formula() {
        let grid = Grid3::unit([2, 1, 1]).unwrap();
        let field = CoefficientField {
            mask: Arc::new(Mask::full(grid)),
            beta: DMatrix::from_row_slice(1, 2, &[1.0, 1.2]),
            var_diag: DMatrix::from_row_slice(1, 2, &[0.04, 1.0]),
            scale_index: 0,
        };
        assert!((similarity(&field, 0, 0, 1) - 1.0).abs() < 1e-12);
        assert!((similarity(&field, 0, 1, 0) - 0.04).abs() < 1e-12);
        assert_eq!(similarity(&field, 0, 0, 0), 0.0);
    }

    #[test]
    fn schedule_defaults() {
        let mask = Mask::full(Grid3::unit([4, 4, 4]).unwrap());
        let s = ScaleSchedule::new(&MassConfig::default(), 60, &mask).unwrap();
        assert_eq!(s.steps(), 10);
        assert!((s.bandwidth(1) - 1.1).abs() < 1e-15);
        assert!((s.bandwidth(10) - 1.1f64.powi(10)).abs() < 1e-12);
        let q = chi2_lower_quantile(1, 0.8).unwrap();
        assert!((q - 1.642_374_415_149_817).abs() < 1e-9);
        assert!((s.c_n - 60f64.powf(0.4) * q).abs() < 1e-12);
        assert!(s.c_s.windows(2).all(|w| w[0] > w[1]));
        let upper = MassConfig {
            quantile: QuantileConvention::Upper,
            ..MassConfig::default()
        };
        let s = ScaleSchedule::new(&upper, 60, &mask).unwrap();
        let q = chi2_upper_quantile(1, 0.8).unwrap();
        assert!((s.c_n - 60f64.powf(0.4) * q).abs() < 1e-12);
        assert!((s.c_n - 0.33).abs() < 2e-3);
        assert!(s.c_s.windows(2).all(|w| w[0] < w[1]));
        assert!(ScaleSchedule::new(
            &MassConfig {
                c_h: 1.0,
                ..MassConfig::default()
            },
            60,
            &mask
        )
        .is_err());
    }
}
