//! Wald tests of single coefficients and of a joint two-row hypothesis on
//! the smoothed maps, with cluster-extent thresholding.
//!
//! ```text
//! cargo run --release --example hypothesis_test
//! ```

use nalgebra::{DMatrix, DVector};

use svcm::fpca::{FpcaConfig, NoiseModel};
use svcm::grid::Connectivity;
use svcm::infer::{detect_clusters, wald_test, Hypothesis, MassCovariance};
use svcm::lsq::ls_fit;
use svcm::mass::{run_mass, MassConfig, ScaleSchedule};
use svcm::simulate::{generate, PhantomSpec};

fn main() -> svcm::Result<()> {
    let spec = PhantomSpec {
        dims: [64, 64, 2],
        ..PhantomSpec::default()
    };
    let phantom = generate(&spec, 3)?;
    let (stack, design) = (&phantom.stack, &phantom.design);
    let raw = ls_fit(stack, design)?;
    let noise = NoiseModel::fit(stack, design, &raw, &FpcaConfig::default())?;
    let schedule = ScaleSchedule::new(&MassConfig::default(), stack.n(), stack.mask())?;
    let state = run_mass(raw, &schedule, &noise, design, |_| {})?;
    let cov = MassCovariance::new(&state, &schedule, &noise, design);
    let field = state.current();

    let tests = [
        ("beta_2 = 0", Hypothesis::coefficient(1, 3)?),
        ("beta_3 = 0", Hypothesis::coefficient(2, 3)?),
        (
            "beta_2 = beta_3 = 0",
            Hypothesis::new(
                DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
                DVector::zeros(2),
            )?,
        ),
    ];
    for (name, hyp) in &tests {
        let mut wald = wald_test(field, &|d| cov.at(d), hyp)?;
        wald.clusters = detect_clusters(&wald, field, 0.05, 50, Connectivity::Face6)?;
        let hits = wald.p_value.iter().filter(|&&p| p < 0.05).count();
        let sizes: Vec<usize> = wald.clusters.iter().map(|c| c.size).collect();
        println!(
            "{name:<20} df {}  {hits:>5} voxels with p < 0.05, clusters {sizes:?}",
            wald.df
        );
    }
    Ok(())
}
