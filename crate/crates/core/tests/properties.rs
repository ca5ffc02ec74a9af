//! Structural invariants checked over randomized inputs.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use svcm::baselines::lce_smooth;
use svcm::design::{fit_design, DesignMatrix};
use svcm::fpca::{eigendecompose, fpc_scores, FpcaConfig, NoiseModel};
use svcm::grid::{ball_neighbors, connected_components, Connectivity, Grid3, Mask};
use svcm::infer::{plug_in_covariance, wald_test, Hypothesis};
use svcm::io::{fmt_f64, Volume};
use svcm::lsq::{ls_fit, CoefficientField, SubjectStack};
use svcm::mass::{run_mass, MassConfig, MassState, ScaleSchedule};
use svcm::stats::chi2_sf;

fn normal_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal))
}

fn random_mask(r: &mut ChaCha8Rng, dims: [usize; 3], spacing: [f64; 3], keep: f64) -> Mask {
    let grid = Grid3::new(dims, spacing).unwrap();
    let mut flags: Vec<bool> = (0..grid.len()).map(|_| r.random::<f64>() < keep).collect();
    flags[0] = true;
    Mask::from_flags(grid, &flags).unwrap()
}

fn design_with_intercept(r: &mut ChaCha8Rng, n: usize, p: usize) -> DesignMatrix {
    let x = DMatrix::from_fn(n, p, |_, j| {
        if j == 0 {
            1.0
        } else {
            r.sample(StandardNormal)
        }
    });
    fit_design(x).unwrap()
}

struct Fixture {
    stack: SubjectStack,
    design: DesignMatrix,
    raw: CoefficientField,
    noise: NoiseModel,
}

/// Smooth coefficient maps plus correlated noise on a small grid.
fn fixture(seed: u64, dims: [usize; 3], n: usize, p: usize) -> Fixture {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mask = Arc::new(Mask::full(Grid3::unit(dims).unwrap()));
    let nd = mask.n_active();
    let design = design_with_intercept(&mut r, n, p);
    let beta = DMatrix::from_fn(p, nd, |j, d| {
        let [x, _, _] = mask.grid().coords(d);
        if x * 2 >= dims[0] {
            0.5 * (j + 1) as f64
        } else {
            0.0
        }
    });
    let scores = normal_matrix(&mut r, n, 1);
    let psi = DMatrix::from_fn(1, nd, |_, d| (d as f64 * 0.3).sin());
    let y = design.x() * &beta + &scores * &psi + normal_matrix(&mut r, n, nd) * 0.5;
    let stack = SubjectStack::new(mask, y).unwrap();
    let raw = ls_fit(&stack, &design).unwrap();
    let config = FpcaConfig {
        bandwidth: Some(1.5),
        ..FpcaConfig::default()
    };
    let noise = NoiseModel::fit(&stack, &design, &raw, &config).unwrap();
    Fixture {
        stack,
        design,
        raw,
        noise,
    }
}

fn small_schedule(n: usize, mask: &Mask, steps: usize) -> ScaleSchedule {
    let config = MassConfig {
        c_h: 1.3,
        steps,
        ..MassConfig::default()
    };
    ScaleSchedule::new(&config, n, mask).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn balls_nest_and_are_symmetric(
        seed in any::<u64>(),
        nx in 2usize..7, ny in 2usize..7, nz in 1usize..4,
        sx in 0.5f64..2.0, sy in 0.5f64..2.0, sz in 0.5f64..2.0,
        h1 in 0.0f64..3.0, dh in 0.0f64..2.0,
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mask = random_mask(&mut r, [nx, ny, nz], [sx, sy, sz], 0.7);
        let h2 = h1 + dh;
        for &c in mask.voxels() {
            let small = ball_neighbors(&mask, c, h1).unwrap();
            let large = ball_neighbors(&mask, c, h2).unwrap();
            let big: BTreeSet<usize> = large.members.iter().copied().collect();
            prop_assert!(small.members.iter().all(|m| big.contains(m)));
            prop_assert!(small.members.windows(2).all(|w| w[0] < w[1]));
            let self_rank = mask.rank_of(c).unwrap();
            prop_assert_eq!(small.members.contains(&self_rank), h1 > 0.0);
            for &m in &small.members {
                let back = ball_neighbors(&mask, mask.voxel_of(m), h1).unwrap();
                prop_assert!(back.members.contains(&self_rank));
                prop_assert!(mask.grid().distance(c, mask.voxel_of(m)) < h1);
            }
        }
    }

    #[test]
    fn components_partition_the_selection(
        seed in any::<u64>(),
        nx in 1usize..8, ny in 1usize..8, nz in 1usize..4,
        conn in prop::sample::select(vec![6u8, 18, 26]),
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mask = random_mask(&mut r, [nx, ny, nz], [1.0, 1.0, 1.0], 0.8);
        let connectivity = Connectivity::try_from(conn).unwrap();
        let selected: Vec<usize> =
            (0..mask.n_active()).filter(|_| r.random::<f64>() < 0.5).collect();
        let comps = connected_components(&mask, &selected, connectivity);
        let mut label = vec![usize::MAX; mask.n_active()];
        for (k, comp) in comps.iter().enumerate() {
            prop_assert!(!comp.is_empty());
            for &m in comp {
                prop_assert_eq!(label[m], usize::MAX);
                label[m] = k;
            }
        }
        let covered: Vec<usize> = (0..mask.n_active()).filter(|&m| label[m] != usize::MAX).collect();
        prop_assert_eq!(&covered, &selected);
        prop_assert!(comps.windows(2).all(|w| w[0].len() >= w[1].len()));
        let grid = mask.grid();
        for &a in &selected {
            for off in connectivity.offsets() {
                if let Some(nb) = grid.offset(mask.voxel_of(a), off).and_then(|id| mask.rank_of(id)) {
                    if label[nb] != usize::MAX {
                        prop_assert_eq!(label[a], label[nb]);
                    }
                }
            }
        }
    }

    #[test]
    fn design_inverse_scales_inversely(seed in any::<u64>(), n in 6usize..30, p in 1usize..5, c in 0.1f64..10.0) {
        prop_assume!(n > p + 1);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let design = design_with_intercept(&mut r, n, p);
        for j in 0..p {
            prop_assert!(design.coeff_scale(j) > 0.0);
        }
        let scaled = fit_design(design.x() * c).unwrap();
        let omega = design.omega() * (c * c);
        let inv = design.omega_inv() / (c * c);
        prop_assert!((scaled.omega() - &omega).norm() <= 1e-10 * omega.norm());
        prop_assert!((scaled.omega_inv() - &inv).norm() <= 1e-8 * inv.norm());
        let ident = design.omega() * design.omega_inv();
        prop_assert!((ident - DMatrix::identity(p, p)).norm() < 1e-8);
    }

    #[test]
    fn least_squares_is_equivariant(seed in any::<u64>(), a in -3.0f64..3.0) {
        prop_assume!(a.abs() > 0.05);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (n, p, nd) = (12, 3, 10);
        let mask = Arc::new(Mask::full(Grid3::unit([5, 2, 1]).unwrap()));
        let design = design_with_intercept(&mut r, n, p);
        let y = normal_matrix(&mut r, n, nd);
        let gamma = normal_matrix(&mut r, p, nd);
        let base = ls_fit(&SubjectStack::new(mask.clone(), y.clone()).unwrap(), &design).unwrap();
        let moved = y * a + design.x() * &gamma;
        let fit = ls_fit(&SubjectStack::new(mask, moved).unwrap(), &design).unwrap();
        let expect = &base.beta * a + &gamma;
        prop_assert!((&fit.beta - &expect).norm() < 1e-9 * (1.0 + expect.norm()));
        let var = &base.var_diag * (a * a);
        prop_assert!((&fit.var_diag - &var).norm() < 1e-9 * (1.0 + var.norm()));
    }

    #[test]
    fn centered_scores_have_zero_mean(seed in any::<u64>(), n in 5usize..15) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mask = random_mask(&mut r, [4, 4, 2], [1.0, 1.3, 0.8], 0.9);
        let eta = normal_matrix(&mut r, n, mask.n_active());
        let eig = eigendecompose(&eta, &mask, 1, 0.9, true).unwrap();
        let mut centered = eta.clone();
        for mut col in centered.column_iter_mut() {
            let m = col.mean();
            col.add_scalar_mut(-m);
        }
        let scores = fpc_scores(&centered, &eig.eigenfunctions, &mask).unwrap();
        for (l, lam) in eig.eigenvalues.iter().enumerate() {
            let mean = scores.column(l).mean();
            prop_assert!(mean.abs() <= 1e-6 * lam.sqrt(), "component {l}: mean {mean}");
        }
        prop_assert!(eig.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn full_rank_scores_reconstruct_deviations(seed in any::<u64>(), n in 4usize..12) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mask = random_mask(&mut r, [5, 4, 2], [0.9, 1.1, 1.6], 0.9);
        let eta = normal_matrix(&mut r, n, mask.n_active());
        let eig = eigendecompose(&eta, &mask, 1, 1.0, false).unwrap();
        prop_assert_eq!(eig.eigenvalues.len(), n.min(mask.n_active()));
        let scores = fpc_scores(&eta, &eig.eigenfunctions, &mask).unwrap();
        let back = &scores * &eig.eigenfunctions;
        prop_assert!((&back - &eta).norm() <= 1e-6 * eta.norm());
    }

    #[test]
    fn vol1_round_trip_is_bit_exact(seed in any::<u64>(), nx in 1usize..6, ny in 1usize..6, nz in 1usize..4) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let spacing = [r.random_range(0.1..3.0), r.random_range(0.1..3.0), r.random_range(0.1..3.0)];
        let grid = Grid3::new([nx, ny, nz], spacing).unwrap();
        let values: Vec<f32> = (0..grid.len())
            .map(|_| f32::from_bits(r.random::<u32>()))
            .map(|v| if v.is_finite() { v } else { 0.0 })
            .collect();
        let vol = Volume::new(grid, values).unwrap();
        let bytes = vol.to_bytes();
        let back = Volume::from_bytes(&bytes, Path::new("mem.vol")).unwrap();
        prop_assert_eq!(back.grid.spacing().map(f64::to_bits), vol.grid.spacing().map(f64::to_bits));
        let a: Vec<u32> = back.values.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = vol.values.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn csv_numbers_round_trip(bits in any::<u64>()) {
        let v = f64::from_bits(bits);
        prop_assume!(v.is_finite());
        let parsed: f64 = fmt_f64(v).parse().unwrap();
        prop_assert_eq!(parsed.to_bits(), v.to_bits());
    }

    #[test]
    fn wald_ignores_row_scaling(seed in any::<u64>(), c1 in 0.1f64..10.0, c2 in -10.0f64..-0.1) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let p = 3;
        let design = design_with_intercept(&mut r, 15, p);
        let mask = Arc::new(Mask::full(Grid3::unit([4, 1, 1]).unwrap()));
        let field = CoefficientField {
            mask,
            beta: normal_matrix(&mut r, p, 4),
            var_diag: DMatrix::from_element(p, 4, 1.0),
            scale_index: 0,
        };
        let sigma: Vec<f64> = (0..4).map(|_| r.random_range(0.5..2.0)).collect();
        let cov = plug_in_covariance(&design, &sigma);
        let rm = normal_matrix(&mut r, 2, p);
        let b = normal_matrix(&mut r, 2, 1).column(0).into_owned();
        let scale = DMatrix::from_diagonal(&DVector::from_vec(vec![c1, c2]));
        let base = wald_test(&field, &cov, &Hypothesis::new(rm.clone(), b.clone()).unwrap()).unwrap();
        let scaled = wald_test(&field, &cov, &Hypothesis::new(&scale * rm, &scale * b).unwrap()).unwrap();
        for d in 0..4 {
            let (w0, w1) = (base.statistic[d], scaled.statistic[d]);
            prop_assert!((w0 - w1).abs() <= 1e-8 * (1.0 + w0));
        }
    }

    #[test]
    fn p_values_decrease_in_the_statistic(df in 1usize..6, a in 0.0f64..60.0, b in 0.0f64..60.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (plo, phi) = (chi2_sf(lo, df), chi2_sf(hi, df));
        prop_assert!(phi <= plo);
        prop_assert!((0.0..=1.0).contains(&plo) && (0.0..=1.0).contains(&phi));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn adaptive_weights_are_normalized(seed in any::<u64>()) {
        let f = fixture(seed, [5, 4, 2], 10, 2);
        let schedule = small_schedule(10, f.stack.mask(), 4);
        let state = run_mass(f.raw.clone(), &schedule, &f.noise, &f.design, |_| {}).unwrap();
        for s in 0..=schedule.steps() {
            for j in 0..2 {
                for d0 in 0..f.raw.n_voxels() {
                    let w = state.weights(&schedule, j, d0, s).unwrap();
                    let total: f64 = w.iter().map(|x| x.1).sum();
                    prop_assert!((total - 1.0).abs() < 1e-12);
                    prop_assert!(w.iter().all(|x| (0.0..=1.0).contains(&x.1)));
                    prop_assert!(w.iter().any(|x| x.0 == d0));
                    if s > 0 {
                        let ball = ball_neighbors(&f.raw.mask, f.raw.mask.voxel_of(d0), schedule.bandwidth(s)).unwrap();
                        prop_assert!(w.iter().all(|x| ball.members.contains(&x.0)));
                    }
                }
            }
        }
    }

    #[test]
    fn frozen_entries_never_change(seed in any::<u64>()) {
        let f = fixture(seed, [6, 4, 2], 10, 2);
        let schedule = small_schedule(10, f.stack.mask(), 6);
        let state = run_mass(f.raw.clone(), &schedule, &f.noise, &f.design, |_| {}).unwrap();
        for j in 0..2 {
            for d in 0..f.raw.n_voxels() {
                let Some(stop) = state.stopped_at(j, d) else { continue };
                prop_assert!(state.is_frozen(j, d));
                let kept = state.field_at(stop);
                prop_assert_eq!(kept.beta[(j, d)].to_bits(), state.field_at(stop - 1).beta[(j, d)].to_bits());
                for t in stop..=schedule.steps() {
                    let later = state.field_at(t);
                    prop_assert_eq!(later.beta[(j, d)].to_bits(), kept.beta[(j, d)].to_bits());
                    prop_assert_eq!(later.var_diag[(j, d)].to_bits(), kept.var_diag[(j, d)].to_bits());
                }
            }
        }
    }

    #[test]
    fn smoothed_variance_is_bounded_by_the_ball(seed in any::<u64>()) {
        let f = fixture(seed, [5, 4, 2], 10, 2);
        let schedule = small_schedule(10, f.stack.mask(), 4);
        let sy = f.noise.sigma_y_diag();
        let state = run_mass(f.raw.clone(), &schedule, &f.noise, &f.design, |_| {}).unwrap();
        let out = state.current();
        for j in 0..2 {
            for d in 0..out.n_voxels() {
                let v = out.var_diag[(j, d)];
                prop_assert!(v > 0.0);
                let w = state.final_weights(&schedule, j, d).unwrap();
                let bound = w.iter().map(|&(m, _)| sy[m]).fold(0.0, f64::max) * f.design.coeff_scale(j);
                prop_assert!(v <= bound * (1.0 + 1e-9), "variance {v} above {bound}");
            }
        }
    }

    #[test]
    fn noiseless_piecewise_constant_field_is_reproduced(seed in any::<u64>(), huge in prop::bool::ANY) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let dims = [8, 6, 2];
        let mask = Arc::new(Mask::full(Grid3::unit(dims).unwrap()));
        let nd = mask.n_active();
        let design = design_with_intercept(&mut r, 10, 2);
        let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
        let level = [sign * r.random_range(0.5..2.0), -sign * r.random_range(0.5..2.0)];
        let truth = DMatrix::from_fn(2, nd, |j, d| {
            let [x, _, _] = mask.grid().coords(d);
            if x < 4 { 0.0 } else { level[j] }
        });
        let raw = CoefficientField {
            mask: mask.clone(),
            beta: truth.clone(),
            var_diag: DMatrix::from_element(2, nd, 1.0),
            scale_index: 0,
        };
        let noise = NoiseModel::from_parts(DMatrix::zeros(10, nd), vec![0.01; nd], 2, &mask).unwrap();
        let config = MassConfig {
            c_h: 1.3,
            steps: 6,
            c_n: if huge { Some(1e300) } else { None },
            ..MassConfig::default()
        };
        let schedule = ScaleSchedule::new(&config, 10, &mask).unwrap();
        let state = run_mass(raw, &schedule, &noise, &design, |_| {}).unwrap();
        let out = state.current();
        let reach = schedule.bandwidth(schedule.steps());
        for d in 0..nd {
            let [x, _, _] = mask.grid().coords(d);
            let interior = (x as f64 + 0.5 - 4.0).abs() >= reach;
            for j in 0..2 {
                if interior || !huge {
                    prop_assert!((out.beta[(j, d)] - truth[(j, d)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn local_constant_weights_are_normalized(seed in any::<u64>(), h in 0.5f64..3.5) {
        let f = fixture(seed, [5, 4, 2], 10, 2);
        let mut raw = f.raw.clone();
        raw.var_diag = f.noise.raw_variance(&f.design);
        let fit = lce_smooth(&raw, h, &f.noise, &f.design).unwrap();
        for (d, w) in fit.weights.iter().enumerate() {
            let total: f64 = w.iter().map(|x| x.1).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|x| x.1 >= 0.0));
            let expect: f64 = w.iter().map(|&(m, wt)| wt * raw.beta[(1, m)]).sum();
            prop_assert!((fit.field.beta[(1, d)] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn fixture_exercises_the_stop_rule() {
    let frozen: usize = (0..6)
        .map(|seed| {
            let f = fixture(seed, [6, 4, 2], 10, 2);
            let schedule = small_schedule(10, f.stack.mask(), 6);
            run_mass(f.raw, &schedule, &f.noise, &f.design, |_| {})
                .unwrap()
                .frozen_count()
        })
        .sum();
    assert!(frozen > 0);
}

#[test]
fn mass_state_rejects_smoothed_start() {
    let f = fixture(3, [3, 3, 1], 8, 2);
    let mut field = f.raw;
    field.scale_index = 2;
    assert!(MassState::new(field).is_err());
}
