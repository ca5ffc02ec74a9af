//! The on-disk workflow: write a simulated data set as Vol1 volumes and a
//! covariate CSV, run the three stages from a JSON config, inspect the
//! manifest and predict a new subject from the stored maps.
//!
//! ```text
//! cargo run --release --example file_pipeline [directory]
//! ```

use std::path::PathBuf;

use svcm::io::{read_volume, write_pgm_slice};
use svcm::pipeline::{predict_from_run, run_pipeline, RunConfig};
use svcm::simulate::{write_dataset, PhantomSpec};

fn main() -> svcm::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("svcm-example"), PathBuf::from);
    let spec = PhantomSpec {
        dims: [64, 64, 2],
        n: 40,
        ..PhantomSpec::default()
    };
    let config_path = write_dataset(&spec, 0, &dir)?;
    println!("data set written to {}", dir.display());

    let mut config = RunConfig::from_json_file(&config_path)?;
    config.resolve_relative_to(&dir);
    let manifest = run_pipeline(&config)?;
    println!(
        "status {:?}, h = {:.3}, L_S = {:?}",
        manifest.status,
        manifest.bandwidth.unwrap_or(f64::NAN),
        manifest.n_components
    );
    for stage in &manifest.stages {
        println!("  {:<20} {:.3} s", stage.name, stage.seconds);
    }
    for c in &manifest.clusters {
        println!(
            "  {}: {} clusters, largest {}",
            c.hypothesis, c.count, c.largest
        );
    }

    let beta = read_volume(&config.output.join("beta_h10_1.vol"))?;
    let pgm = config.output.join("beta_h10_1_z0.pgm");
    write_pgm_slice(&pgm, &beta, 0)?;
    println!("slice preview {}", pgm.display());

    let pred = predict_from_run(&config.output, &[1.0, 1.0, 1.5])?;
    let mean = pred.values.iter().map(|&v| v as f64).sum::<f64>() / pred.values.len() as f64;
    println!("predicted image for x = (1, 1, 1.5): mean {mean:.4}");
    Ok(())
}
