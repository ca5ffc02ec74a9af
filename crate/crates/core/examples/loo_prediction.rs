//! Leave-one-out prediction of held-out subjects from the voxel-wise fit
//! and from the adaptively smoothed maps.
//!
//! ```text
//! cargo run --release --example loo_prediction [draws]
//! ```

use svcm::fpca::{FpcaConfig, NoiseModel};
use svcm::infer::predict_subject;
use svcm::lsq::ls_fit;
use svcm::mass::{run_mass, MassConfig, ScaleSchedule};
use svcm::simulate::{generate, PhantomSpec};

fn main() -> svcm::Result<()> {
    let draws = std::env::args()
        .nth(1)
        .map_or(10, |s| s.parse().expect("draws"));
    let spec = PhantomSpec {
        dims: [64, 64, 2],
        ..PhantomSpec::default()
    };
    let phantom = generate(&spec, 0)?;
    println!("subject   voxel-wise MAE   adaptive MAE");
    for i in 0..draws.min(spec.n) {
        let stack = phantom.stack.without_subject(i);
        let design = phantom.design.without_subject(i)?;
        let raw = ls_fit(&stack, &design)?;
        let noise = NoiseModel::fit(&stack, &design, &raw, &FpcaConfig::default())?;
        let schedule = ScaleSchedule::new(&MassConfig::default(), stack.n(), stack.mask())?;
        let smooth = run_mass(raw.clone(), &schedule, &noise, &design, |_| {})?.into_current();
        let x = phantom.design.row(i);
        let y = phantom.stack.y().row(i);
        let mae = |pred: Vec<f64>| {
            pred.iter()
                .zip(y.iter())
                .map(|(p, t)| (p - t).abs())
                .sum::<f64>()
                / pred.len() as f64
        };
        println!(
            "{i:>7} {:>16.5} {:>14.5}",
            mae(predict_subject(&raw, &x)?),
            mae(predict_subject(&smooth, &x)?)
        );
    }
    Ok(())
}
