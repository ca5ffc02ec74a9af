//! Stage I noise modeling: GCV bandwidth choice for the residual smoother,
//! the eigendecomposition of the smoothed deviations and recovery of the
//! true eigenfunctions.
//!
//! ```text
//! cargo run --release --example noise_model
//! ```

use svcm::fpca::{FpcaConfig, NoiseModel};
use svcm::lsq::ls_fit;
use svcm::simulate::{generate, PhantomSpec};

fn main() -> svcm::Result<()> {
    let spec = PhantomSpec {
        dims: [64, 64, 4],
        ..PhantomSpec::default()
    };
    let phantom = generate(&spec, 0)?;
    let raw = ls_fit(&phantom.stack, &phantom.design)?;
    let noise = NoiseModel::fit(
        &phantom.stack,
        &phantom.design,
        &raw,
        &FpcaConfig::default(),
    )?;

    println!("bandwidth   trace    GCV");
    for g in &noise.gcv_scores {
        let score = g.score.map_or("-".into(), |s| format!("{s:.2}"));
        println!("{:>9.3} {:>7.1} {score:>10}", g.bandwidth, g.trace);
    }
    println!("selected h = {:.3}", noise.bandwidth);

    let total: f64 = noise.eigen.eigenvalues.iter().sum();
    let mut cum = 0.0;
    for (l, lam) in noise.eigen.eigenvalues.iter().take(5).enumerate() {
        cum += lam;
        println!(
            "lambda_{} = {lam:10.3}  cumulative {:.3}",
            l + 1,
            cum / total
        );
    }
    println!("L_S = {}", noise.eigen.n_components);

    for l in 0..3 {
        let est = noise.eigen.eigenfunctions.row(l);
        let tru = phantom.eigenfunctions.row(l);
        let cos = est.dot(&tru) / (est.norm() * tru.norm());
        println!("|cos(psi_hat_{0}, psi_{0})| = {1:.4}", l + 1, cos.abs());
    }
    let var: Vec<f64> = (0..3)
        .map(|l| {
            let col = noise.scores.column(l);
            col.dot(&col) / col.len() as f64
        })
        .collect();
    let total: f64 = var.iter().sum();
    let share: Vec<f64> = var.iter().map(|v| v / total).collect();
    let truth: f64 = spec.score_vars.iter().sum();
    let expected: Vec<f64> = spec.score_vars.iter().map(|v| v / truth).collect();
    println!("score variance shares {share:.3?} (truth {expected:.3?})");
    Ok(())
}
