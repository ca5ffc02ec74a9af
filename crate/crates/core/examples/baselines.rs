//! Adaptive smoothing against local-constant smoothing of the coefficient
//! maps and Gaussian smoothing of the images: bias at the ROI edges and
//! error in the flat interior, averaged over a few replicates.
//!
//! ```text
//! cargo run --release --example baselines [replicates]
//! ```

use svcm::grid::Stencil;
use svcm::simulate::{gks_label, lce_label, run_study, svcm_label, PhantomSpec, StudyConfig};

fn main() -> svcm::Result<()> {
    let reps = std::env::args()
        .nth(1)
        .map_or(5, |s| s.parse().expect("replicates"));
    let spec = PhantomSpec {
        dims: [64, 64, 2],
        ..PhantomSpec::default()
    };
    let config = StudyConfig {
        record_scales: vec![0, 10],
        lce_bandwidths: vec![1.1, 2.0, 4.0],
        gks_sigmas: vec![1.1, 2.0, 4.0],
        ..StudyConfig::default()
    };
    let study = run_study(&spec, reps, &config, |rep, _| {
        eprintln!("replicate {rep} done")
    })?;

    let truth = &study.truth;
    let mask = &truth.mask;
    let stencil = Stencil::ball(mask.grid(), 2.0);
    let edge: Vec<bool> = (0..truth.n_voxels())
        .map(|d| {
            let mut hit = false;
            stencil.for_each_member(mask, mask.voxel_of(d), |m, _| {
                hit |= truth.beta[(1, m)] != truth.beta[(1, d)];
            });
            hit
        })
        .collect();

    let mut labels = vec![svcm_label(0), svcm_label(10)];
    for h in [1.1, 2.0, 4.0] {
        labels.push(lce_label(h));
        labels.push(gks_label(h));
    }
    println!(
        "{:<10} {:>12} {:>12} {:>10}",
        "method", "edge |bias|", "inner RMS", "inner RE"
    );
    for label in &labels {
        let acc = &study.methods[label];
        let (mut edge_bias, mut n_edge, mut rms, mut se, mut n_in) = (0.0, 0, 0.0, 0.0, 0);
        for d in 0..truth.n_voxels() {
            if edge[d] {
                edge_bias += acc.bias(truth, 1, d).abs();
                n_edge += 1;
            } else {
                rms += acc.rms(1, d);
                se += acc.mean_se(1, d);
                n_in += 1;
            }
        }
        println!(
            "{label:<10} {:>12.4} {:>12.4} {:>10.3}",
            edge_bias / n_edge as f64,
            rms / n_in as f64,
            rms / se
        );
    }
    Ok(())
}
