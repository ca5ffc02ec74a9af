//! Synthetic phantom studies: data generation and Monte-Carlo summaries.
//!
//! The phantom has three coefficient maps built from five value levels
//! laid out as shapes in the four quadrants of every slice, three spatial
//! eigenfunctions with variances `0.6, 0.3, 0.1`, and independent
//! Gaussian or centered chi-square measurement noise.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{gks_pipeline, lce_smooth};
use crate::design::{fit_design, DesignMatrix};
use crate::error::{Error, Result};
use crate::fpca::{EigenSet, FpcaConfig, NoiseModel};
use crate::grid::{Grid3, Mask};
use crate::infer::coefficient_wald;
use crate::io::{fmt_f64, write_csv, write_volume, Volume};
use crate::lsq::{ls_fit, CoefficientField, SubjectStack};
use crate::mass::{run_mass, MassConfig, ScaleSchedule};
use crate::pipeline::RunConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    #[default]
    Gaussian,
    /// `χ²(3) − 3`.
    Chisq3,
}

/// How the binary group covariate enters the design.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupCoding {
    /// `x₂ ∈ {−1, +1}`.
    #[default]
    Signed,
    /// `x₂ ∈ {0, 1}`.
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum RoiShape {
    Square {
        side: f64,
    },
    Disk {
        radius: f64,
    },
    Ring {
        outer: f64,
        width: f64,
    },
    /// Isosceles, apex pointing toward lower `y`, base equal to the height.
    Triangle {
        height: f64,
    },
}

impl RoiShape {
    /// Whether an in-plane offset from the shape center lies inside.
    pub fn contains(self, dx: f64, dy: f64) -> bool {
        match self {
            RoiShape::Square { side } => dx.abs() < side / 2.0 && dy.abs() < side / 2.0,
            RoiShape::Disk { radius } => dx.hypot(dy) <= radius,
            RoiShape::Ring { outer, width } => {
                let r = dx.hypot(dy);
                r <= outer && r > outer - width
            }
            RoiShape::Triangle { height } => {
                let top = -height / 2.0;
                dy >= top && dy <= height / 2.0 && dx.abs() <= (dy - top) / 2.0
            }
        }
    }
}

/// One shape placed in one quadrant with a constant coefficient value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    #[serde(flatten)]
    pub shape: RoiShape,
    /// Quadrant index 0..4: x-major (0: low x low y, 1: high x low y,
    /// 2: low x high y, 3: high x high y).
    pub quadrant: usize,
    pub value: f64,
}

pub fn default_rois() -> Vec<Roi> {
    vec![
        Roi {
            shape: RoiShape::Square { side: 12.0 },
            quadrant: 0,
            value: 0.2,
        },
        Roi {
            shape: RoiShape::Disk { radius: 7.0 },
            quadrant: 1,
            value: 0.4,
        },
        Roi {
            shape: RoiShape::Ring {
                outer: 9.0,
                width: 4.0,
            },
            quadrant: 2,
            value: 0.6,
        },
        Roi {
            shape: RoiShape::Triangle { height: 14.0 },
            quadrant: 3,
            value: 0.8,
        },
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub n: usize,
    pub noise: NoiseKind,
    /// Multiplies the noise draws; 0 gives noiseless measurement error.
    pub noise_scale: f64,
    pub score_vars: [f64; 3],
    pub group_coding: GroupCoding,
    pub rois: Vec<Roi>,
    /// In-plane shift of every shape, per coefficient index, in voxels.
    pub coefficient_shift: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [64, 64, 8],
            n: 60,
            noise: NoiseKind::Gaussian,
            noise_scale: 1.0,
            score_vars: [0.6, 0.3, 0.1],
            group_coding: GroupCoding::Signed,
            rois: default_rois(),
            coefficient_shift: 2.0,
            seed: 20_140_301,
        }
    }
}

/// Number of coefficients in the phantom model.
pub const P: usize = 3;

impl PhantomSpec {
    pub fn grid(&self) -> Result<Grid3> {
        Grid3::unit(self.dims)
    }

    /// True coefficient maps, `P × N` over all voxels in id order.
    pub fn truth(&self) -> Result<CoefficientField> {
        let grid = self.grid()?;
        let [nx, ny, _] = self.dims;
        let (hx, hy) = (nx as f64 / 2.0, ny as f64 / 2.0);
        let beta = DMatrix::from_fn(P, grid.len(), |j, id| {
            let [i, k, _] = grid.coords(id);
            let (x, y) = (i as f64 + 0.5, k as f64 + 0.5);
            let shift = j as f64 * self.coefficient_shift;
            self.rois
                .iter()
                .find(|roi| {
                    let cx = hx / 2.0 + hx * (roi.quadrant % 2) as f64 + shift;
                    let cy = hy / 2.0 + hy * (roi.quadrant / 2) as f64 + shift;
                    roi.shape.contains(x - cx, y - cy)
                })
                .map_or(0.0, |roi| roi.value)
        });
        let len = grid.len();
        Ok(CoefficientField {
            mask: Arc::new(Mask::full(grid)),
            beta,
            var_diag: DMatrix::zeros(P, len),
            scale_index: 0,
        })
    }

    /// True eigenfunctions `ψ₁, ψ₂, ψ₃` over all voxels, using 1-based
    /// voxel coordinates.
    pub fn eigenfunctions(&self) -> Result<DMatrix<f64>> {
        let grid = self.grid()?;
        let [nx, ny, _] = self.dims;
        let c3 = (1.0f64 / 2.625).sqrt();
        Ok(DMatrix::from_fn(3, grid.len(), |l, id| {
            let [i, j, k] = grid.coords(id);
            let (d1, d2, d3) = ((i + 1) as f64, (j + 1) as f64, (k + 1) as f64);
            match l {
                0 => 0.5 * (2.0 * std::f64::consts::PI * d1 / nx as f64).sin(),
                1 => 0.5 * (2.0 * std::f64::consts::PI * d2 / ny as f64).cos(),
                _ => c3 * (9.0 / 8.0 - d3 / 4.0),
            }
        }))
    }
}

/// One simulated data set.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub stack: SubjectStack,
    pub design: DesignMatrix,
    pub truth: CoefficientField,
    /// `3 × N` true eigenfunctions.
    pub eigenfunctions: DMatrix<f64>,
    /// `n × 3` drawn scores.
    pub scores: DMatrix<f64>,
}

/// Random stream for one subject of one replicate.
pub fn subject_rng(seed: u64, replicate: u64, subject: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((replicate << 32) | subject);
    rng
}

/// Draws replicate `replicate` of the phantom study.
pub fn generate(spec: &PhantomSpec, replicate: u64) -> Result<Phantom> {
    if spec.n <= P {
        return Err(Error::InvalidArgument(format!(
            "need more than {P} subjects, got {}",
            spec.n
        )));
    }
    if spec.score_vars.iter().any(|&v| !(v >= 0.0)) || !(spec.noise_scale >= 0.0) {
        return Err(Error::InvalidArgument(
            "variances must be non-negative".into(),
        ));
    }
    let truth = spec.truth()?;
    let psi = spec.eigenfunctions()?;
    let nd = truth.n_voxels();
    let sd: Vec<f64> = spec.score_vars.iter().map(|v| v.sqrt()).collect();
    let group = Bernoulli::new(0.5).unwrap();
    let age = Uniform::new(1.0, 2.0).unwrap();
    let subjects: Vec<([f64; P], [f64; 3], Vec<f64>)> = (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = subject_rng(spec.seed, replicate, i as u64);
            let g = group.sample(&mut rng);
            let x2 = match spec.group_coding {
                GroupCoding::Signed => {
                    if g {
                        1.0
                    } else {
                        -1.0
                    }
                }
                GroupCoding::Binary => g as u8 as f64,
            };
            let x = [1.0, x2, age.sample(&mut rng)];
            let mut xi = [0.0; 3];
            for l in 0..3 {
                let z: f64 = rng.sample(StandardNormal);
                xi[l] = sd[l] * z;
            }
            let y = (0..nd)
                .map(|d| {
                    let eps = match spec.noise {
                        NoiseKind::Gaussian => rng.sample::<f64, _>(StandardNormal),
                        NoiseKind::Chisq3 => {
                            (0..3)
                                .map(|_| rng.sample::<f64, _>(StandardNormal).powi(2))
                                .sum::<f64>()
                                - 3.0
                        }
                    };
                    let mean: f64 = (0..P).map(|j| x[j] * truth.beta[(j, d)]).sum();
                    let eta: f64 = (0..3).map(|l| xi[l] * psi[(l, d)]).sum();
                    mean + eta + spec.noise_scale * eps
                })
                .collect();
            (x, xi, y)
        })
        .collect();
    let x = DMatrix::from_fn(spec.n, P, |i, j| subjects[i].0[j]);
    let scores = DMatrix::from_fn(spec.n, 3, |i, l| subjects[i].1[l]);
    let y = DMatrix::from_fn(spec.n, nd, |i, d| subjects[i].2[d]);
    Ok(Phantom {
        stack: SubjectStack::new(truth.mask.clone(), y)?,
        design: fit_design(x)?,
        truth,
        eigenfunctions: psi,
        scores,
    })
}

/// What to fit on every replicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub fpca: FpcaConfig,
    pub mass: MassConfig,
    /// Smoothing scales whose fields are summarized.
    pub record_scales: Vec<usize>,
    pub lce_bandwidths: Vec<f64>,
    pub gks_sigmas: Vec<f64>,
    pub alpha: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            fpca: FpcaConfig::default(),
            mass: MassConfig::default(),
            record_scales: vec![0, 5, 10],
            lce_bandwidths: Vec::new(),
            gks_sigmas: Vec::new(),
            alpha: 0.05,
        }
    }
}

/// Fits of one replicate, keyed by method label (`svcm:h0`, `lce:2`, ...).
#[derive(Debug, Clone)]
pub struct ReplicateFit {
    pub fields: BTreeMap<String, CoefficientField>,
    pub eigen: EigenSet,
    pub bandwidth: f64,
    pub frozen: usize,
}

pub fn svcm_label(scale: usize) -> String {
    format!("svcm:h{scale}")
}

pub fn lce_label(h: f64) -> String {
    format!("lce:{h}")
}

pub fn gks_label(sigma: f64) -> String {
    format!("gks:{sigma}")
}

/// Runs the full pipeline and the requested baselines on one data set.
pub fn fit_phantom(phantom: &Phantom, config: &StudyConfig) -> Result<ReplicateFit> {
    let Phantom { stack, design, .. } = phantom;
    let raw = ls_fit(stack, design).map_err(|e| e.in_stage("least squares"))?;
    let noise = NoiseModel::fit(stack, design, &raw, &config.fpca)
        .map_err(|e| e.in_stage("noise model"))?;
    let schedule = ScaleSchedule::new(&config.mass, stack.n(), stack.mask())?;
    let mut fields = BTreeMap::new();
    let state = run_mass(raw.clone(), &schedule, &noise, design, |state| {
        if config.record_scales.contains(&state.scale()) {
            fields.insert(svcm_label(state.scale()), state.current().clone());
        }
    })
    .map_err(|e| e.in_stage("adaptive smoothing"))?;
    let mut raw_noise = raw;
    raw_noise.var_diag = noise.raw_variance(design);
    for &h in &config.lce_bandwidths {
        fields.insert(
            lce_label(h),
            lce_smooth(&raw_noise, h, &noise, design)?.field,
        );
    }
    for &sigma in &config.gks_sigmas {
        fields.insert(gks_label(sigma), gks_pipeline(stack, design, sigma)?);
    }
    Ok(ReplicateFit {
        fields,
        eigen: noise.eigen.clone(),
        bandwidth: noise.bandwidth,
        frozen: state.frozen_count(),
    })
}

/// Running per-voxel sums over replicates for one method.
#[derive(Debug, Clone)]
pub struct FieldAccumulator {
    pub reps: usize,
    sum: DMatrix<f64>,
    sum_sq: DMatrix<f64>,
    sum_err_sq: DMatrix<f64>,
    sum_se: DMatrix<f64>,
    rejections: DMatrix<f64>,
    /// Per replicate, per `(j, level)`: fraction of ROI voxels rejected.
    roi_rejection: Vec<Vec<f64>>,
}

impl FieldAccumulator {
    fn new(p: usize, nd: usize) -> Self {
        Self {
            reps: 0,
            sum: DMatrix::zeros(p, nd),
            sum_sq: DMatrix::zeros(p, nd),
            sum_err_sq: DMatrix::zeros(p, nd),
            sum_se: DMatrix::zeros(p, nd),
            rejections: DMatrix::zeros(p, nd),
            roi_rejection: Vec::new(),
        }
    }

    fn add(
        &mut self,
        field: &CoefficientField,
        truth: &CoefficientField,
        levels: &RoiLevels,
        alpha: f64,
    ) {
        self.reps += 1;
        let mut roi = vec![0.0; levels.groups.len()];
        for j in 0..field.p() {
            let wald = coefficient_wald(field, j, 0.0);
            for d in 0..field.n_voxels() {
                let b = field.beta[(j, d)];
                let err = b - truth.beta[(j, d)];
                self.sum[(j, d)] += b;
                self.sum_sq[(j, d)] += b * b;
                self.sum_err_sq[(j, d)] += err * err;
                self.sum_se[(j, d)] += field.var_diag[(j, d)].sqrt();
                if wald.p_value[d] < alpha {
                    self.rejections[(j, d)] += 1.0;
                }
            }
            for (g, group) in levels.groups.iter().enumerate() {
                if group.coefficient == j {
                    let hits = group
                        .ranks
                        .iter()
                        .filter(|&&d| wald.p_value[d] < alpha)
                        .count();
                    roi[g] = hits as f64 / group.ranks.len() as f64;
                }
            }
        }
        self.roi_rejection.push(roi);
    }

    pub fn mean(&self, j: usize, d: usize) -> f64 {
        self.sum[(j, d)] / self.reps as f64
    }

    pub fn bias(&self, truth: &CoefficientField, j: usize, d: usize) -> f64 {
        self.mean(j, d) - truth.beta[(j, d)]
    }

    pub fn rms(&self, j: usize, d: usize) -> f64 {
        (self.sum_err_sq[(j, d)] / self.reps as f64).sqrt()
    }

    /// Monte-Carlo standard deviation across replicates.
    pub fn mc_sd(&self, j: usize, d: usize) -> f64 {
        let r = self.reps as f64;
        let m = self.mean(j, d);
        ((self.sum_sq[(j, d)] / r - m * m).max(0.0) * r / (r - 1.0)).sqrt()
    }

    /// Mean of the estimated standard errors.
    pub fn mean_se(&self, j: usize, d: usize) -> f64 {
        self.sum_se[(j, d)] / self.reps as f64
    }

    pub fn rejection_rate(&self, j: usize, d: usize) -> f64 {
        self.rejections[(j, d)] / self.reps as f64
    }
}

/// Voxels grouped by `(coefficient, true value)`.
#[derive(Debug, Clone)]
pub struct RoiLevels {
    pub groups: Vec<RoiGroup>,
}

#[derive(Debug, Clone)]
pub struct RoiGroup {
    pub coefficient: usize,
    pub level: f64,
    pub ranks: Vec<usize>,
}

impl RoiLevels {
    pub fn from_truth(truth: &CoefficientField) -> Self {
        let mut map: BTreeMap<(usize, u64), Vec<usize>> = BTreeMap::new();
        for j in 0..truth.p() {
            for d in 0..truth.n_voxels() {
                let v = truth.beta[(j, d)];
                map.entry((j, (v * 1e6).round() as u64))
                    .or_default()
                    .push(d);
            }
        }
        let groups = map
            .into_iter()
            .map(|((coefficient, key), ranks)| RoiGroup {
                coefficient,
                level: key as f64 / 1e6,
                ranks,
            })
            .collect();
        Self { groups }
    }

    pub fn find(&self, coefficient: usize, level: f64) -> Option<usize> {
        self.groups
            .iter()
            .position(|g| g.coefficient == coefficient && (g.level - level).abs() < 1e-9)
    }
}

/// ROI-averaged summaries for one method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoiMetrics {
    pub method: String,
    pub coefficient: usize,
    pub level: f64,
    pub bias: f64,
    pub rms: f64,
    pub sd: f64,
    /// `rms / sd`.
    pub re: f64,
    /// Mean rejection rate of `β_j(d) = 0`.
    pub es: f64,
    /// Standard deviation across replicates of the ROI rejection rate.
    pub se: f64,
}

/// Everything accumulated over a Monte-Carlo study.
#[derive(Debug, Clone)]
pub struct StudyResult {
    pub spec: PhantomSpec,
    pub truth: CoefficientField,
    pub levels: RoiLevels,
    pub methods: BTreeMap<String, FieldAccumulator>,
    /// Per replicate, `|cos|` between estimated and true eigenfunctions
    /// (`NaN` where fewer than three components were estimated).
    pub eigen_cosines: Vec<[f64; 3]>,
    /// Per replicate, whether the first three eigenvalues are descending.
    pub eigen_ordered: Vec<bool>,
    pub bandwidths: Vec<f64>,
}

impl StudyResult {
    pub fn reps(&self) -> usize {
        self.eigen_ordered.len()
    }

    /// Table of ROI metrics for one method.
    pub fn roi_metrics(&self, method: &str) -> Result<Vec<RoiMetrics>> {
        let acc = self
            .methods
            .get(method)
            .ok_or_else(|| Error::InvalidArgument(format!("no results for method {method}")))?;
        Ok(self
            .levels
            .groups
            .iter()
            .enumerate()
            .map(|(g, group)| {
                let j = group.coefficient;
                let count = group.ranks.len() as f64;
                let avg = |f: &dyn Fn(usize) -> f64| {
                    group.ranks.iter().map(|&d| f(d)).sum::<f64>() / count
                };
                let bias = avg(&|d| acc.bias(&self.truth, j, d));
                let rms = avg(&|d| acc.rms(j, d));
                let sd = avg(&|d| acc.mean_se(j, d));
                let rates: Vec<f64> = acc.roi_rejection.iter().map(|r| r[g]).collect();
                let es = rates.iter().sum::<f64>() / rates.len() as f64;
                let se = if rates.len() > 1 {
                    (rates.iter().map(|r| (r - es) * (r - es)).sum::<f64>()
                        / (rates.len() - 1) as f64)
                        .sqrt()
                } else {
                    0.0
                };
                RoiMetrics {
                    method: method.to_owned(),
                    coefficient: j,
                    level: group.level,
                    bias,
                    rms,
                    sd,
                    re: if sd > 0.0 { rms / sd } else { f64::NAN },
                    es,
                    se,
                }
            })
            .collect())
    }
}

fn abs_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).abs()
}

/// Runs `reps` replicates, calling `progress(rep, fit)` after each.
pub fn run_study(
    spec: &PhantomSpec,
    reps: usize,
    config: &StudyConfig,
    mut progress: impl FnMut(usize, &ReplicateFit),
) -> Result<StudyResult> {
    if reps < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 replicates, got {reps}"
        )));
    }
    let truth = spec.truth()?;
    let levels = RoiLevels::from_truth(&truth);
    let psi = spec.eigenfunctions()?;
    let mut methods: BTreeMap<String, FieldAccumulator> = BTreeMap::new();
    let mut eigen_cosines = Vec::with_capacity(reps);
    let mut eigen_ordered = Vec::with_capacity(reps);
    let mut bandwidths = Vec::with_capacity(reps);
    for rep in 0..reps {
        let phantom = generate(spec, rep as u64)?;
        let fit = fit_phantom(&phantom, config)?;
        for (label, field) in &fit.fields {
            methods
                .entry(label.clone())
                .or_insert_with(|| FieldAccumulator::new(truth.p(), truth.n_voxels()))
                .add(field, &truth, &levels, config.alpha);
        }
        let ev = &fit.eigen;
        let mut cos = [f64::NAN; 3];
        for l in 0..3.min(ev.eigenvalues.len()) {
            let est: Vec<f64> = ev.eigenfunctions.row(l).iter().copied().collect();
            let tru: Vec<f64> = psi.row(l).iter().copied().collect();
            cos[l] = abs_cosine(&est, &tru);
        }
        eigen_cosines.push(cos);
        eigen_ordered.push(
            ev.eigenvalues.len() >= 3
                && ev.eigenvalues[0] > ev.eigenvalues[1]
                && ev.eigenvalues[1] > ev.eigenvalues[2],
        );
        bandwidths.push(fit.bandwidth);
        progress(rep, &fit);
    }
    Ok(StudyResult {
        spec: spec.clone(),
        truth,
        levels,
        methods,
        eigen_cosines,
        eigen_ordered,
        bandwidths,
    })
}

/// Bias, RMS, SD and RE per ROI level at the recorded smoothing scales.
pub fn run_table1(
    spec: &PhantomSpec,
    reps: usize,
    config: &StudyConfig,
) -> Result<Vec<RoiMetrics>> {
    let result = run_study(spec, reps, config, |_, _| {})?;
    let mut out = Vec::new();
    for label in result.methods.keys() {
        out.extend(result.roi_metrics(label)?);
    }
    Ok(out)
}

/// Rejection rates of `β_j(d) = 0` per ROI level; identical runs to
/// [`run_table1`], reported through the `es` and `se` columns.
pub fn run_table2(
    spec: &PhantomSpec,
    reps: usize,
    config: &StudyConfig,
) -> Result<Vec<RoiMetrics>> {
    run_table1(spec, reps, config)
}

/// Writes replicate `replicate` of the phantom as Vol1 subject images, a
/// covariate CSV, the true maps and a `run.json` that fits it. Returns the
/// path of `run.json`.
pub fn write_dataset(spec: &PhantomSpec, replicate: u64, dir: &Path) -> Result<PathBuf> {
    let phantom = generate(spec, replicate)?;
    let mask = phantom.stack.mask();
    fs::create_dir_all(dir.join("subjects"))?;
    let mut subjects = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let rel = PathBuf::from(format!("subjects/subject_{i:03}.vol"));
        let row: Vec<f64> = phantom.stack.y().row(i).iter().copied().collect();
        write_volume(&dir.join(&rel), &Volume::from_ranks(mask, &row, 0.0))?;
        subjects.push(rel);
    }
    let x = phantom.design.x();
    write_csv(
        &dir.join("covariates.csv"),
        &["intercept", "group", "age"],
        (0..spec.n).map(|i| (0..P).map(|j| fmt_f64(x[(i, j)])).collect::<Vec<_>>()),
    )?;
    for j in 0..P {
        write_volume(
            &dir.join(format!("truth_beta_{j}.vol")),
            &Volume::from_ranks(mask, &phantom.truth.coefficient_map(j), 0.0),
        )?;
    }
    for l in 0..phantom.eigenfunctions.nrows() {
        let psi: Vec<f64> = phantom.eigenfunctions.row(l).iter().copied().collect();
        write_volume(
            &dir.join(format!("truth_psi_{l}.vol")),
            &Volume::from_ranks(mask, &psi, 0.0),
        )?;
    }
    let config = RunConfig {
        subjects,
        covariates: "covariates.csv".into(),
        output: "fit".into(),
        seed: spec.seed,
        ..RunConfig::default()
    };
    let path = dir.join("run.json");
    config.to_json_file(&path)?;
    Ok(path)
}
