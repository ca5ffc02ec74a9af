//! Run configuration, manifest and the end-to-end fitting pipeline.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::baselines::{gks_pipeline, lce_smooth};
use crate::design::{fit_design, read_covariates_csv, DesignMatrix};
use crate::error::{Error, Result};
use crate::fpca::{FpcaConfig, NoiseModel};
use crate::grid::{Connectivity, Mask};
use crate::infer::{
    detect_clusters, predict_subject, wald_test, weighted_covariance, Hypothesis, MassCovariance,
    WaldMap,
};
use crate::io::{
    auto_mask, fmt_f64, read_mask, read_subjects, read_volume, write_csv, write_mask, write_volume,
    Volume,
};
use crate::lsq::{ls_fit, CoefficientField, SubjectStack};
use crate::mass::{run_mass, MassConfig, ScaleSchedule};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Svcm,
    Lce,
    Gks,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "svcm" => Ok(Method::Svcm),
            "lce" => Ok(Method::Lce),
            "gks" => Ok(Method::Gks),
            other => Err(Error::InvalidArgument(format!(
                "unknown method `{other}` (expected svcm, lce or gks)"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Svcm => "svcm",
            Method::Lce => "lce",
            Method::Gks => "gks",
        })
    }
}

/// `"auto"` or a path to a `u8` Vol1 mask.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum MaskSource {
    #[default]
    Auto,
    File(PathBuf),
}

impl From<String> for MaskSource {
    fn from(s: String) -> Self {
        if s == "auto" {
            MaskSource::Auto
        } else {
            MaskSource::File(s.into())
        }
    }
}

impl From<MaskSource> for String {
    fn from(m: MaskSource) -> String {
        match m {
            MaskSource::Auto => "auto".into(),
            MaskSource::File(p) => p.to_string_lossy().into_owned(),
        }
    }
}

/// `R β(d) = b`, tested at every voxel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSpec {
    pub name: String,
    /// Rows of `R`.
    pub r: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl HypothesisSpec {
    pub fn to_hypothesis(&self) -> Result<Hypothesis> {
        let rows = self.r.len();
        let cols = self.r.first().map_or(0, Vec::len);
        if rows == 0 || self.r.iter().any(|row| row.len() != cols) || self.b.len() != rows {
            return Err(Error::InvalidArgument(format!(
                "hypothesis `{}` needs a non-empty rectangular R and one b entry per row",
                self.name
            )));
        }
        let flat: Vec<f64> = self.r.iter().flatten().copied().collect();
        Hypothesis::new(
            DMatrix::from_row_slice(rows, cols, &flat),
            DVector::from_vec(self.b.clone()),
        )
    }

    /// `β_j = 0` for one coefficient.
    pub fn coefficient(name: &str, j: usize, p: usize) -> Self {
        let mut row = vec![0.0; p];
        row[j] = 1.0;
        Self {
            name: name.to_owned(),
            r: vec![row],
            b: vec![0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub subjects: Vec<PathBuf>,
    /// Header row of covariate names, one row per subject.
    pub covariates: PathBuf,
    pub mask: MaskSource,
    pub fpca: FpcaConfig,
    pub mass: MassConfig,
    /// Empty means one `β_j = 0` test per non-intercept coefficient.
    pub hypotheses: Vec<HypothesisSpec>,
    pub alpha: f64,
    pub min_cluster_size: usize,
    pub connectivity: Connectivity,
    pub output: PathBuf,
    pub method: Method,
    /// LCE radius or GKS σ.
    pub baseline_bandwidth: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            subjects: Vec::new(),
            covariates: PathBuf::new(),
            mask: MaskSource::Auto,
            fpca: FpcaConfig::default(),
            mass: MassConfig::default(),
            hypotheses: Vec::new(),
            alpha: 0.05,
            min_cluster_size: 50,
            connectivity: Connectivity::Face6,
            output: PathBuf::from("svcm-out"),
            method: Method::Svcm,
            baseline_bandwidth: 2.0,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Resolves relative input and output paths against `base`.
    pub fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        self.subjects.iter_mut().for_each(fix);
        fix(&mut self.covariates);
        fix(&mut self.output);
        if let MaskSource::File(p) = &mut self.mask {
            fix(p);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub hypothesis: String,
    pub count: usize,
    pub largest: usize,
}

/// Everything needed to replay a run, plus what it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub status: RunStatus,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub config: RunConfig,
    pub covariate_names: Vec<String>,
    pub n_subjects: usize,
    pub dims: Option<[usize; 3]>,
    pub spacing: Option<[f64; 3]>,
    pub n_voxels: usize,
    /// Bandwidth `h̃` picked by GCV (or fixed by the config).
    pub bandwidth: Option<f64>,
    /// `L_S`.
    pub n_components: Option<usize>,
    pub eigenvalues: Vec<f64>,
    pub schedule: Option<ScaleSchedule>,
    pub frozen_entries: Option<usize>,
    pub clusters: Vec<ClusterSummary>,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<String>,
    pub started_unix: u64,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    fn new(config: &RunConfig) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").into(),
            status: RunStatus::Running,
            failed_stage: None,
            error: None,
            config: config.clone(),
            covariate_names: Vec::new(),
            n_subjects: 0,
            dims: None,
            spacing: None,
            n_voxels: 0,
            bandwidth: None,
            n_components: None,
            eigenvalues: Vec::new(),
            schedule: None,
            frozen_entries: None,
            clusters: Vec::new(),
            stages: Vec::new(),
            artifacts: Vec::new(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Zeroes the wall-clock fields so two runs can be compared.
    pub fn without_timing(mut self) -> Self {
        self.started_unix = 0;
        self.stages.iter_mut().for_each(|s| s.seconds = 0.0);
        self
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

struct Run<'a> {
    config: &'a RunConfig,
    manifest: Manifest,
    current: &'static str,
}

impl Run<'_> {
    fn stage<T>(
        &mut self,
        name: &'static str,
        f: impl FnOnce(&mut Self) -> Result<T>,
    ) -> Result<T> {
        self.current = name;
        let start = Instant::now();
        log::info!("stage: {name}");
        let out = f(self).map_err(|e| e.in_stage(name))?;
        self.manifest.stages.push(StageRecord {
            name: name.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.output.join(name)
    }

    fn volume(&mut self, name: String, mask: &Mask, values: &[f64]) -> Result<()> {
        write_volume(&self.out(&name), &Volume::from_ranks(mask, values, 0.0))?;
        self.manifest.artifacts.push(name);
        Ok(())
    }

    fn field(&mut self, tag: &str, field: &CoefficientField) -> Result<()> {
        for j in 0..field.p() {
            let beta = field.coefficient_map(j);
            self.volume(format!("beta_{tag}_{j}.vol"), &field.mask, &beta)?;
            let var: Vec<f64> = field.var_diag.row(j).iter().copied().collect();
            self.volume(format!("var_{tag}_{j}.vol"), &field.mask, &var)?;
        }
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
        write_csv(&self.out(name), header, rows)?;
        self.manifest.artifacts.push(name.into());
        Ok(())
    }
}

/// Runs Stage I, II and III as configured and writes every artifact into
/// `config.output`. The manifest is written even when a stage fails, with
/// status `FAILED` and the failing stage named.
pub fn run_pipeline(config: &RunConfig) -> Result<Manifest> {
    fs::create_dir_all(&config.output)?;
    let mut run = Run {
        config,
        manifest: Manifest::new(config),
        current: "setup",
    };
    let result = execute(&mut run);
    match &result {
        Ok(()) => run.manifest.status = RunStatus::Completed,
        Err(e) => {
            run.manifest.status = RunStatus::Failed;
            run.manifest.failed_stage = Some(run.current.into());
            run.manifest.error = Some(e.to_string());
        }
    }
    run.manifest.write(&config.output)?;
    result.map(|()| run.manifest)
}

/// Reads the subject volumes, covariates and mask named in `config`.
pub fn load_inputs(config: &RunConfig) -> Result<(SubjectStack, DesignMatrix, Vec<String>)> {
    let (grid, y_full) = read_subjects(&config.subjects)?;
    let (names, x) = read_covariates_csv(&config.covariates)?;
    if x.nrows() != y_full.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} subject volumes but {} covariate rows in {}",
            y_full.nrows(),
            x.nrows(),
            config.covariates.display()
        )));
    }
    let mask = match &config.mask {
        MaskSource::Auto => auto_mask(&grid, &y_full)?,
        MaskSource::File(path) => {
            let m = read_mask(path)?;
            if m.grid() != &grid {
                return Err(Error::GridMismatch {
                    first: config.subjects[0].clone(),
                    other: path.clone(),
                    detail: "mask grid differs from the subject grid".into(),
                });
            }
            m
        }
    };
    let y = DMatrix::from_fn(y_full.nrows(), mask.n_active(), |i, r| {
        y_full[(i, mask.voxel_of(r))]
    });
    let stack = SubjectStack::new(Arc::new(mask), y)?;
    Ok((stack, fit_design(x)?, names))
}

fn execute(run: &mut Run) -> Result<()> {
    let config = run.config;
    let (stack, design, hypotheses) = run.stage("load", |run| {
        let (stack, design, names) = load_inputs(config)?;
        let p = design.p();
        let hypotheses: Vec<HypothesisSpec> = if config.hypotheses.is_empty() {
            (1..p)
                .map(|j| HypothesisSpec::coefficient(&names[j], j, p))
                .collect()
        } else {
            config.hypotheses.clone()
        };
        let tests = hypotheses
            .iter()
            .map(|h| h.to_hypothesis().map(|t| (h.name.clone(), t)))
            .collect::<Result<Vec<_>>>()?;
        let m = &mut run.manifest;
        m.covariate_names = names;
        m.n_subjects = stack.n();
        m.dims = Some(stack.mask().grid().dims());
        m.spacing = Some(stack.mask().grid().spacing());
        m.n_voxels = stack.mask().n_active();
        write_mask(&run.out("mask.vol"), stack.mask())?;
        run.manifest.artifacts.push("mask.vol".into());
        Ok((stack, design, tests))
    })?;
    let mask = stack.mask().clone();
    let p = design.p();

    let raw = run.stage("least squares", |_| ls_fit(&stack, &design))?;

    let noise = run.stage("noise model", |run| {
        let noise = NoiseModel::fit(&stack, &design, &raw, &config.fpca)?;
        let m = &mut run.manifest;
        m.bandwidth = Some(noise.bandwidth);
        m.n_components = Some(noise.eigen.n_components);
        m.eigenvalues = noise.leading_eigenvalues().to_vec();
        let total: f64 = noise.eigen.eigenvalues.iter().sum();
        let mut cum = 0.0;
        let rows = noise
            .eigen
            .eigenvalues
            .iter()
            .enumerate()
            .map(|(l, &ev)| {
                cum += ev;
                let frac = if total > 0.0 { cum / total } else { 0.0 };
                vec![l.to_string(), fmt_f64(ev), fmt_f64(frac)]
            })
            .collect();
        run.csv(
            "eigenvalues.csv",
            &["component", "eigenvalue", "cumulative"],
            rows,
        )?;
        for l in 0..noise.eigen.n_components {
            let psi: Vec<f64> = noise.eigen.eigenfunctions.row(l).iter().copied().collect();
            run.volume(format!("psi_{l}.vol"), &mask, &psi)?;
        }
        let mut header = vec!["subject".to_string()];
        header.extend((0..noise.scores.ncols()).map(|l| format!("xi_{l}")));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = (0..noise.scores.nrows())
            .map(|i| {
                std::iter::once(i.to_string())
                    .chain(noise.scores.row(i).iter().map(|&v| fmt_f64(v)))
                    .collect()
            })
            .collect();
        run.csv("scores.csv", &header, rows)?;
        let rows = noise
            .gcv_scores
            .iter()
            .map(|g| {
                vec![
                    fmt_f64(g.bandwidth),
                    fmt_f64(g.trace),
                    g.score.map_or("NA".into(), fmt_f64),
                ]
            })
            .collect();
        run.csv("gcv.csv", &["bandwidth", "trace", "score"], rows)?;
        run.volume("sigma_eps.vol".into(), &mask, &noise.sigma_eps)?;
        Ok(noise)
    })?;

    match config.method {
        Method::Svcm => {
            let (schedule, state) = run.stage("adaptive smoothing", |run| {
                let schedule = ScaleSchedule::new(&config.mass, stack.n(), &mask)?;
                let state = run_mass(raw.clone(), &schedule, &noise, &design, |_| {})?;
                for s in 0..=state.scale() {
                    run.field(&format!("h{s}"), state.field_at(s))?;
                }
                run.manifest.schedule = Some(schedule.clone());
                run.manifest.frozen_entries = Some(state.frozen_count());
                Ok((schedule, state))
            })?;
            run.stage("inference", |run| {
                let cov = MassCovariance::new(&state, &schedule, &noise, &design);
                let field = state.current();
                for (name, hyp) in &hypotheses {
                    let wald = wald_test(field, &|d| cov.at(d), hyp)?;
                    write_wald(run, name, field, wald)?;
                }
                Ok(())
            })
        }
        Method::Lce => {
            let h = config.baseline_bandwidth;
            let fit = run.stage("baseline smoothing", |run| {
                let mut raw_noise = raw.clone();
                raw_noise.var_diag = noise.raw_variance(&design);
                let fit = lce_smooth(&raw_noise, h, &noise, &design)?;
                run.field("lce", &fit.field)?;
                Ok(fit)
            })?;
            run.stage("inference", |run| {
                let cov = |d: usize| {
                    weighted_covariance(&design, &noise, &vec![fit.weights[d].clone(); p])
                };
                for (name, hyp) in &hypotheses {
                    let wald = wald_test(&fit.field, &cov, hyp)?;
                    write_wald(run, name, &fit.field, wald)?;
                }
                Ok(())
            })
        }
        Method::Gks => {
            let sigma = config.baseline_bandwidth;
            let field = run.stage("baseline smoothing", |run| {
                let field = gks_pipeline(&stack, &design, sigma)?;
                run.field("gks", &field)?;
                Ok(field)
            })?;
            run.stage("inference", |run| {
                let scale0 = design.coeff_scale(0);
                let cov = |d: usize| Ok(design.omega_inv() * (field.var_diag[(0, d)] / scale0));
                for (name, hyp) in &hypotheses {
                    let wald = wald_test(&field, &cov, hyp)?;
                    write_wald(run, name, &field, wald)?;
                }
                Ok(())
            })
        }
    }
}

fn write_wald(
    run: &mut Run,
    name: &str,
    field: &CoefficientField,
    mut wald: WaldMap,
) -> Result<()> {
    let config = run.config;
    let mask = &field.mask;
    run.volume(format!("wald_{name}.vol"), mask, &wald.statistic)?;
    run.volume(format!("p_{name}.vol"), mask, &wald.p_value)?;
    let logp: Vec<f64> = wald.p_value.iter().map(|p| -p.log10()).collect();
    run.volume(format!("logp_{name}.vol"), mask, &logp)?;
    wald.clusters = detect_clusters(
        &wald,
        field,
        config.alpha,
        config.min_cluster_size,
        config.connectivity,
    )?;
    let grid = mask.grid();
    let rows = wald
        .clusters
        .iter()
        .enumerate()
        .map(|(c, cluster)| {
            let peak = *cluster
                .ranks
                .iter()
                .min_by(|&&a, &&b| wald.p_value[a].total_cmp(&wald.p_value[b]).then(a.cmp(&b)))
                .expect("clusters are non-empty");
            let [x, y, z] = grid.coords(mask.voxel_of(peak));
            vec![
                c.to_string(),
                cluster.size.to_string(),
                fmt_f64(wald.p_value[peak]),
                x.to_string(),
                y.to_string(),
                z.to_string(),
            ]
        })
        .collect();
    run.csv(
        &format!("clusters_{name}.csv"),
        &["cluster", "size", "peak_p", "peak_x", "peak_y", "peak_z"],
        rows,
    )?;
    run.manifest.clusters.push(ClusterSummary {
        hypothesis: name.to_owned(),
        count: wald.clusters.len(),
        largest: wald.clusters.first().map_or(0, |c| c.size),
    });
    Ok(())
}

/// Fixed-effect prediction `xᵀβ̂` from the final coefficient maps of a
/// finished run directory.
pub fn predict_from_run(dir: &Path, x_new: &[f64]) -> Result<Volume> {
    let manifest = Manifest::from_json_file(&dir.join(MANIFEST_FILE))?;
    if manifest.status != RunStatus::Completed {
        return Err(Error::InvalidArgument(format!(
            "{} is not a completed run",
            dir.display()
        )));
    }
    let p = manifest.covariate_names.len();
    if x_new.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "{} covariate values given, the run has {p} ({})",
            x_new.len(),
            manifest.covariate_names.join(", ")
        )));
    }
    let tag = match manifest.config.method {
        Method::Svcm => format!("h{}", manifest.schedule.as_ref().map_or(0, |s| s.steps())),
        other => other.to_string(),
    };
    let mask = read_mask(&dir.join("mask.vol"))?;
    let beta_rows = (0..p)
        .map(|j| read_volume_ranks(&dir.join(format!("beta_{tag}_{j}.vol")), &mask))
        .collect::<Result<Vec<_>>>()?;
    let field = CoefficientField {
        beta: DMatrix::from_fn(p, mask.n_active(), |j, d| beta_rows[j][d]),
        var_diag: DMatrix::zeros(p, mask.n_active()),
        mask: Arc::new(mask),
        scale_index: 0,
    };
    let y = predict_subject(&field, &DVector::from_row_slice(x_new))?;
    Ok(Volume::from_ranks(&field.mask, &y, 0.0))
}

fn read_volume_ranks(path: &Path, mask: &Mask) -> Result<Vec<f64>> {
    read_volume(path)?.to_ranks(mask)
}
