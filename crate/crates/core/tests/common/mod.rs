//! Helpers shared by the integration test targets.

#![allow(dead_code)]

pub mod oracles;

use svcm::grid::Stencil;
use svcm::lsq::CoefficientField;
use svcm::simulate::{FieldAccumulator, RoiGroup, StudyResult};

/// Voxels whose open ball of `radius` holds a different value of
/// coefficient `j`.
pub fn boundary_band(truth: &CoefficientField, j: usize, radius: f64) -> Vec<bool> {
    let mask = &truth.mask;
    let stencil = Stencil::ball(mask.grid(), radius);
    (0..truth.n_voxels())
        .map(|d| {
            let v = truth.beta[(j, d)];
            let mut hit = false;
            stencil.for_each_member(mask, mask.voxel_of(d), |m, _| {
                hit |= truth.beta[(j, m)] != v;
            });
            hit
        })
        .collect()
}

/// Voxels whose open ball of `radius` is constant in every coefficient.
pub fn interior(truth: &CoefficientField, radius: f64) -> Vec<bool> {
    let bands: Vec<Vec<bool>> = (0..truth.p())
        .map(|j| boundary_band(truth, j, radius))
        .collect();
    (0..truth.n_voxels())
        .map(|d| bands.iter().all(|b| !b[d]))
        .collect()
}

/// Mean over flagged voxels of `|MC bias|` for coefficient `j`.
pub fn mean_abs_bias(result: &StudyResult, label: &str, j: usize, flags: &[bool]) -> f64 {
    let acc = &result.methods[label];
    let (mut sum, mut count) = (0.0, 0usize);
    for (d, &f) in flags.iter().enumerate() {
        if f {
            sum += acc.bias(&result.truth, j, d).abs();
            count += 1;
        }
    }
    sum / count as f64
}

pub fn accumulator<'a>(result: &'a StudyResult, label: &str) -> &'a FieldAccumulator {
    &result.methods[label]
}

pub fn group(result: &StudyResult, j: usize, level: f64) -> &RoiGroup {
    let g = result
        .levels
        .find(j, level)
        .expect("level present in the phantom");
    &result.levels.groups[g]
}

pub fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}
