use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use svcm::io::{self, fmt_f64, Volume};
use svcm::mass::QuantileConvention;
use svcm::pipeline::{self, HypothesisSpec, MaskSource, Method, RunConfig};
use svcm::simulate::{self, NoiseKind, PhantomSpec, StudyConfig};
use svcm::{Error, Result};

#[derive(Parser)]
#[command(
    name = "svcm",
    version,
    about = "Spatially varying coefficient models for volumetric images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model and write coefficient, variance, eigen and test maps.
    Fit(RunArgs),
    /// Draw a phantom data set, or run a Monte Carlo study with --reps.
    Simulate(SimulateArgs),
    /// Fit and test the given hypotheses only.
    Test(TestArgs),
    /// Predict an image from a finished run for new covariate values.
    Predict(PredictArgs),
    /// Convert a Vol1 volume to CSV, PGM or raw f32, or raw f32 to Vol1.
    Convert(ConvertArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Svcm,
    Lce,
    Gks,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Svcm => Method::Svcm,
            MethodArg::Lce => Method::Lce,
            MethodArg::Gks => Method::Gks,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum QuantileArg {
    Lower,
    Upper,
}

#[derive(Args)]
struct RunArgs {
    /// JSON RunConfig; other flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest of an earlier run to replay.
    #[arg(long, conflicts_with = "config")]
    replay: Option<PathBuf>,
    /// Subject volumes (Vol1 f32).
    #[arg(long, num_args = 1..)]
    subjects: Vec<PathBuf>,
    /// Covariate CSV with a header row, one row per subject.
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Mask volume, or `auto`.
    #[arg(long)]
    mask: Option<String>,
    /// Output directory.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// LCE radius or GKS sigma.
    #[arg(long)]
    baseline_bandwidth: Option<f64>,
    /// Fixed smoothing bandwidth for the residuals (skips GCV).
    #[arg(long)]
    eta_bandwidth: Option<f64>,
    /// Number of adaptive smoothing scales.
    #[arg(long)]
    steps: Option<usize>,
    /// Ratio between successive radii.
    #[arg(long)]
    c_h: Option<f64>,
    /// Stopping threshold; defaults to the chi-square quantile rule.
    #[arg(long)]
    c_n: Option<f64>,
    /// Tail convention for the default C_n and C_s.
    #[arg(long, value_enum)]
    quantile: Option<QuantileArg>,
    /// Voxel-level significance for cluster forming.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    min_cluster_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    run: RunArgs,
    /// `name=R;b`, e.g. `group=0,1,0;0` or `both=0,1,0|0,0,1;0,0`.
    #[arg(long = "hypothesis", required = true)]
    hypotheses: Vec<String>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    n: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [64usize, 64, 8])]
    dims: Vec<usize>,
    #[arg(long, value_enum, default_value = "gaussian")]
    noise: NoiseArg,
    #[arg(long, default_value_t = 20_140_301)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    replicate: u64,
    /// Run this many replicates and print ROI summaries instead of writing data.
    #[arg(long)]
    reps: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Gaussian,
    Chisq3,
}

#[derive(Args)]
struct PredictArgs {
    /// Output directory of a completed `fit`.
    #[arg(long)]
    run: PathBuf,
    /// Covariate values in the run's column order.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        required = true
    )]
    x: Vec<f64>,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConvertTarget {
    Csv,
    Pgm,
    Raw,
    Vol1,
}

#[derive(Args)]
struct ConvertArgs {
    input: PathBuf,
    #[arg(long, value_enum)]
    to: ConvertTarget,
    #[arg(long, short)]
    output: PathBuf,
    /// Slice index for PGM output.
    #[arg(long, default_value_t = 0)]
    slice: usize,
    /// Grid dims when reading raw f32 input.
    #[arg(long, value_delimiter = ',')]
    dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1.0, 1.0])]
    spacing: Vec<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(args) => fit(args, Vec::new()),
        Command::Test(args) => parse_hypotheses(&args.hypotheses).and_then(|h| fit(args.run, h)),
        Command::Simulate(args) => simulate_cmd(args),
        Command::Predict(args) => predict(args),
        Command::Convert(args) => convert(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("SVCM_THREADS") else {
        return Ok(());
    };
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "SVCM_THREADS must be a positive integer, got `{value}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn build_config(args: RunArgs) -> Result<RunConfig> {
    let mut config = if let Some(path) = &args.replay {
        pipeline::Manifest::from_json_file(path)?.config
    } else if let Some(path) = &args.config {
        let mut c = RunConfig::from_json_file(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        c.resolve_relative_to(&fs::canonicalize(base.join("."))?);
        c
    } else {
        RunConfig::default()
    };
    if !args.subjects.is_empty() {
        config.subjects = args.subjects;
    }
    if let Some(c) = args.covariates {
        config.covariates = c;
    }
    if let Some(m) = args.mask {
        config.mask = MaskSource::from(m);
    }
    if let Some(o) = args.output {
        config.output = o;
    }
    if let Some(m) = args.method {
        config.method = m.into();
    }
    if let Some(b) = args.baseline_bandwidth {
        config.baseline_bandwidth = b;
    }
    if let Some(h) = args.eta_bandwidth {
        config.fpca.bandwidth = Some(h);
    }
    if let Some(s) = args.steps {
        config.mass.steps = s;
    }
    if let Some(c) = args.c_h {
        config.mass.c_h = c;
    }
    if let Some(c) = args.c_n {
        config.mass.c_n = Some(c);
    }
    if let Some(q) = args.quantile {
        config.mass.quantile = match q {
            QuantileArg::Lower => QuantileConvention::Lower,
            QuantileArg::Upper => QuantileConvention::Upper,
        };
    }
    if let Some(a) = args.alpha {
        config.alpha = a;
    }
    if let Some(m) = args.min_cluster_size {
        config.min_cluster_size = m;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if config.subjects.is_empty() {
        return Err(Error::InvalidArgument(
            "no subjects given (use --subjects or --config)".into(),
        ));
    }
    Ok(config)
}

fn parse_hypotheses(specs: &[String]) -> Result<Vec<HypothesisSpec>> {
    specs
        .iter()
        .map(|s| {
            let bad = || Error::InvalidArgument(format!("cannot parse hypothesis `{s}`"));
            let (name, rest) = s.split_once('=').ok_or_else(bad)?;
            let (r, b) = rest.split_once(';').ok_or_else(bad)?;
            let nums = |t: &str| -> Result<Vec<f64>> {
                t.split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
                    .collect()
            };
            Ok(HypothesisSpec {
                name: name.trim().to_owned(),
                r: r.split('|').map(nums).collect::<Result<_>>()?,
                b: nums(b)?,
            })
        })
        .collect()
}

fn fit(args: RunArgs, hypotheses: Vec<HypothesisSpec>) -> Result<()> {
    let mut config = build_config(args)?;
    if !hypotheses.is_empty() {
        config.hypotheses = hypotheses;
    }
    let manifest = pipeline::run_pipeline(&config)?;
    log::info!(
        "done: {} artifacts in {}",
        manifest.artifacts.len(),
        config.output.display()
    );
    for c in &manifest.clusters {
        println!(
            "{}: {} clusters, largest {} voxels",
            c.hypothesis, c.count, c.largest
        );
    }
    Ok(())
}

fn simulate_cmd(args: SimulateArgs) -> Result<()> {
    let dims: [usize; 3] = args
        .dims
        .as_slice()
        .try_into()
        .map_err(|_| Error::InvalidArgument("--dims takes three values".into()))?;
    let spec = PhantomSpec {
        dims,
        n: args.n,
        noise: match args.noise {
            NoiseArg::Gaussian => NoiseKind::Gaussian,
            NoiseArg::Chisq3 => NoiseKind::Chisq3,
        },
        seed: args.seed,
        ..PhantomSpec::default()
    };
    if let Some(reps) = args.reps {
        let config = StudyConfig::default();
        let result = simulate::run_study(&spec, reps, &config, |r, _| {
            log::info!("replicate {r} done")
        })?;
        println!("method,coefficient,level,bias,rms,sd,re,es,se");
        for method in result.methods.keys() {
            for m in result.roi_metrics(method)? {
                println!(
                    "{method},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                    m.coefficient, m.level, m.bias, m.rms, m.sd, m.re, m.es, m.se
                );
            }
        }
        return Ok(());
    }
    let out = args
        .output
        .ok_or_else(|| Error::InvalidArgument("--output is required".into()))?;
    let written = simulate::write_dataset(&spec, args.replicate, &out)?;
    println!("{}", written.display());
    Ok(())
}

fn predict(args: PredictArgs) -> Result<()> {
    let volume = pipeline::predict_from_run(&args.run, &args.x)?;
    io::write_volume(&args.output, &volume)
}

fn convert(args: ConvertArgs) -> Result<()> {
    if let ConvertTarget::Vol1 = args.to {
        let dims: [usize; 3] = args
            .dims
            .as_slice()
            .try_into()
            .map_err(|_| Error::InvalidArgument("--dims takes three values".into()))?;
        let spacing: [f64; 3] = args
            .spacing
            .as_slice()
            .try_into()
            .map_err(|_| Error::InvalidArgument("--spacing takes three values".into()))?;
        let bytes = fs::read(&args.input)?;
        let grid = svcm::grid::Grid3::new(dims, spacing)?;
        if bytes.len() != grid.len() * 4 {
            return Err(Error::Truncated {
                path: args.input,
                offset: bytes.len(),
                expected: grid.len() * 4,
            });
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        return io::write_volume(&args.output, &Volume::new(grid, values)?);
    }
    let volume = io::read_volume(&args.input)?;
    match args.to {
        ConvertTarget::Csv => {
            let grid = volume.grid.clone();
            io::write_csv(
                &args.output,
                &["x", "y", "z", "value"],
                volume.values.iter().enumerate().map(|(id, &v)| {
                    let [x, y, z] = grid.coords(id);
                    vec![
                        x.to_string(),
                        y.to_string(),
                        z.to_string(),
                        fmt_f64(v as f64),
                    ]
                }),
            )
        }
        ConvertTarget::Pgm => io::write_pgm_slice(&args.output, &volume, args.slice),
        ConvertTarget::Raw => {
            let bytes = volume.to_bytes();
            fs::write(&args.output, &bytes[io::HEADER_LEN..])?;
            let [nx, ny, nz] = volume.grid.dims();
            let [sx, sy, sz] = volume.grid.spacing();
            println!("dim = [3, {nx}, {ny}, {nz}]");
            println!("pixdim = [1, {sx}, {sy}, {sz}]");
            println!("datatype = 16 (FLOAT32), little-endian, x fastest, vox_offset = 0");
            Ok(())
        }
        ConvertTarget::Vol1 => unreachable!(),
    }
}
