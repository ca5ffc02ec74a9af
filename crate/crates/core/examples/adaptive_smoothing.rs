//! The multiscale adaptive smoother on a noisy step: a profile across the
//! edge at every scale, with the adaptive weights of one voxel beside it.
//!
//! ```text
//! cargo run --release --example adaptive_smoothing
//! ```

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use svcm::design::fit_design;
use svcm::fpca::{FpcaConfig, NoiseModel};
use svcm::grid::{Grid3, Mask};
use svcm::lsq::{ls_fit, SubjectStack};
use svcm::mass::{run_mass, MassConfig, ScaleSchedule};

fn main() -> svcm::Result<()> {
    let (nx, ny, n) = (24, 12, 40);
    let mask = Arc::new(Mask::full(Grid3::unit([nx, ny, 1])?));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 1 && i % 2 == 1 { -1.0 } else { 1.0 });
    let design = fit_design(x)?;
    let step = |d: usize| {
        if mask.grid().coords(d)[0] < nx / 2 {
            0.0
        } else {
            0.5
        }
    };
    let y = DMatrix::from_fn(n, mask.n_active(), |i, d| {
        design.x()[(i, 1)] * step(d) + rng.sample::<f64, _>(StandardNormal)
    });
    let stack = SubjectStack::new(mask.clone(), y)?;
    let raw = ls_fit(&stack, &design)?;
    let noise = NoiseModel::fit(&stack, &design, &raw, &FpcaConfig::default())?;
    let schedule = ScaleSchedule::new(&MassConfig::default(), n, &mask)?;
    println!("C_n = {:.3}, C_s = {:.3?}", schedule.c_n, schedule.c_s);

    let row = ny / 2;
    let state = run_mass(raw, &schedule, &noise, &design, |state| {
        let f = state.current();
        let profile: Vec<String> = (0..nx)
            .map(|i| format!("{:5.2}", f.beta[(1, mask.grid().index(i, row, 0))]))
            .collect();
        println!("h{:<2} {}", state.scale(), profile.join(""));
    })?;

    let d0 = mask.grid().index(nx / 2 - 1, row, 0);
    println!("final weights of the voxel left of the edge:");
    for (m, w) in state.final_weights(&schedule, 1, d0)? {
        let [i, j, _] = mask.grid().coords(m);
        if w > 0.01 {
            println!("  ({i:>2},{j:>2}) {w:.3}");
        }
    }
    Ok(())
}
