//! Independent dense re-derivations of the fast paths. Each check panics on
//! a mismatch.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use svcm::design::fit_design;
use svcm::fpca::{eigendecompose, gcv_select, LocalLinearSmoother, NoiseModel};
use svcm::grid::{Grid3, Mask};
use svcm::infer::{wald_test, weighted_covariance, Hypothesis};
use svcm::lsq::{ls_fit, CoefficientField, SubjectStack};
use svcm::mass::{run_mass, MassConfig, ScaleSchedule, StructuralKernel};
use svcm::stats::{chi2_sf, chi2_upper_quantile};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal))
}

fn holey_mask() -> Arc<Mask> {
    let grid = Grid3::new([6, 5, 3], [1.0, 1.2, 0.9]).unwrap();
    let holes = [7usize, 31, 52, 77];
    let flags: Vec<bool> = (0..grid.len()).map(|i| !holes.contains(&i)).collect();
    Arc::new(Mask::from_flags(grid, &flags).unwrap())
}

/// Smoother matrix assembled row by row from weighted least squares.
fn dense_smoother(mask: &Mask, h: f64) -> DMatrix<f64> {
    let grid = mask.grid();
    let nd = mask.n_active();
    let mut s = DMatrix::zeros(nd, nd);
    for t in 0..nd {
        let ct = grid.center(mask.voxel_of(t));
        let mut rows = Vec::new();
        for m in 0..nd {
            let cm = grid.center(mask.voxel_of(m));
            let u: Vec<f64> = (0..3).map(|a| (cm[a] - ct[a]) / h).collect();
            let k: f64 = u.iter().map(|v| (1.0 - v.abs()).max(0.0)).product();
            if k > 0.0 {
                rows.push((m, k, DVector::from_vec(vec![1.0, u[0], u[1], u[2]])));
            }
        }
        let mut mom = DMatrix::<f64>::zeros(4, 4);
        for (_, k, z) in &rows {
            mom += z * z.transpose() * *k;
        }
        let a = mom
            .lu()
            .solve(&DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]))
            .expect("oracle moment matrix must be invertible");
        for (m, k, z) in &rows {
            s[(t, *m)] = k * z.dot(&a);
        }
    }
    s
}

pub fn smoother_and_gcv_match_assembled_matrix() {
    let mask = holey_mask();
    let nd = mask.n_active() as f64;
    let mut r = rng(11);
    let resid = normal_matrix(&mut r, 5, mask.n_active());
    let hs = [1.5, 2.1, 2.9];
    let sel = gcv_select(&resid, &mask, &hs).unwrap();
    for (k, &h) in hs.iter().enumerate() {
        let s = dense_smoother(&mask, h);
        let fast = LocalLinearSmoother::new(mask.clone(), h).unwrap();
        assert_eq!(fast.fallback_count(), 0);
        assert!((fast.trace() - s.trace()).abs() < 1e-8, "trace at h={h}");
        let smoothed = fast.smooth(&resid);
        let dense = &resid * s.transpose();
        assert!((&smoothed - &dense).amax() < 1e-8, "smoothing at h={h}");
        let rss = (&resid - &dense).norm_squared();
        let want = rss / (1.0 - s.trace() / nd).powi(2);
        let got = sel.scores[k].score.unwrap();
        assert!(
            (got - want).abs() <= 1e-8 * want,
            "gcv at h={h}: {got} vs {want}"
        );
    }
    let best = hs
        .iter()
        .zip(&sel.scores)
        .min_by(|a, b| a.1.score.unwrap().total_cmp(&b.1.score.unwrap()))
        .unwrap();
    assert_eq!(sel.bandwidth, *best.0);
}

pub fn gram_eigenpairs_match_dense_operator() {
    let grid = Grid3::new([5, 3, 2], [1.0, 1.5, 2.0]).unwrap();
    let mask = Mask::full(grid);
    let vol = 3.0;
    let (n, p) = (7, 2);
    let mut r = rng(5);
    let eta = normal_matrix(&mut r, n, 30);
    let set = eigendecompose(&eta, &mask, p, 0.9, false).unwrap();
    let op = eta.transpose() * &eta * (vol / (n - p) as f64);
    let eig = op.symmetric_eigen();
    let mut order: Vec<usize> = (0..30).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    assert_eq!(set.eigenvalues.len(), n);
    for l in 0..n {
        let lam = eig.eigenvalues[order[l]];
        assert!(
            (set.eigenvalues[l] - lam).abs() <= 1e-8 * lam,
            "eigenvalue {l}"
        );
        let mut psi = eig.eigenvectors.column(order[l]) / vol.sqrt();
        if psi[psi.iamax()] < 0.0 {
            psi.neg_mut();
        }
        for d in 0..30 {
            assert!(
                (set.eigenfunctions[(l, d)] - psi[d]).abs() < 1e-8,
                "eigenfunction {l} at {d}"
            );
        }
    }
    let threshold_count = {
        let total: f64 = set.eigenvalues.iter().sum();
        let mut acc = 0.0;
        set.eigenvalues
            .iter()
            .position(|v| {
                acc += v;
                acc / total >= 0.9
            })
            .unwrap()
            + 1
    };
    assert_eq!(set.n_components, threshold_count);
}

struct Dense1d {
    beta: Vec<DMatrix<f64>>,
    var: Vec<DMatrix<f64>>,
    frozen: Vec<bool>,
}

/// Adaptive smoothing on a line of voxels with every sum written out.
fn dense_mass(
    raw_beta: &DMatrix<f64>,
    omega_inv: &DMatrix<f64>,
    sigma_y: &DMatrix<f64>,
    hs: &[f64],
    c_n: f64,
    c_s: &[f64],
) -> Dense1d {
    let (p, nd) = raw_beta.shape();
    let raw_var = DMatrix::from_fn(p, nd, |j, d| omega_inv[(j, j)] * sigma_y[(d, d)]);
    let mut beta = vec![raw_beta.clone()];
    let mut var = vec![raw_var.clone()];
    let mut frozen = vec![false; p * nd];
    for (s, &h) in hs.iter().enumerate() {
        let (pb, pv) = (beta[s].clone(), var[s].clone());
        let mut nb = pb.clone();
        let mut nv = pv.clone();
        for d0 in 0..nd {
            for j in 0..p {
                if frozen[j + p * d0] {
                    continue;
                }
                let mut w = DVector::zeros(nd);
                for m in 0..nd {
                    let dist = (m as f64 - d0 as f64).abs();
                    let loc = (1.0 - dist / h).max(0.0);
                    let diff = pb[(j, d0)] - pb[(j, m)];
                    w[m] = loc * (-(diff * diff / pv[(j, d0)]) / c_n).exp();
                }
                w /= w.sum();
                nb[(j, d0)] = (0..nd).map(|m| w[m] * raw_beta[(j, m)]).sum();
                nv[(j, d0)] = omega_inv[(j, j)] * (w.transpose() * sigma_y * &w)[(0, 0)];
                let gap = raw_beta[(j, d0)] - nb[(j, d0)];
                if gap * gap / raw_var[(j, d0)] > c_s[s] {
                    nb[(j, d0)] = pb[(j, d0)];
                    nv[(j, d0)] = pv[(j, d0)];
                    frozen[j + p * d0] = true;
                }
            }
        }
        beta.push(nb);
        var.push(nv);
    }
    Dense1d { beta, var, frozen }
}

pub fn adaptive_smoothing_matches_dense_line() {
    let (n, p, nd) = (12, 2, 8);
    let mask = Arc::new(Mask::full(Grid3::unit([nd, 1, 1]).unwrap()));
    let mut r = rng(3);
    let x = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { (i % 3) as f64 - 1.0 });
    let design = fit_design(x.clone()).unwrap();
    let truth = DMatrix::from_fn(p, nd, |j, d| if d < 4 { 0.0 } else { 1.0 + j as f64 });
    let y = &x * &truth + normal_matrix(&mut r, n, nd) * 0.4;
    let stack = SubjectStack::new(mask.clone(), y).unwrap();
    let raw = ls_fit(&stack, &design).unwrap();
    let eta = normal_matrix(&mut r, n, nd) * 0.3;
    let sigma_eps: Vec<f64> = (0..nd).map(|d| 0.1 + 0.02 * d as f64).collect();
    let noise = NoiseModel::from_parts(eta.clone(), sigma_eps.clone(), p, &mask).unwrap();
    let sigma_y = eta.transpose() * &eta / (n - p) as f64
        + DMatrix::from_diagonal(&DVector::from_vec(sigma_eps));
    let c_s = vec![2.0, 1.5, 1.0, 0.6, 0.3, 0.2];
    let config = MassConfig {
        c_h: 1.3,
        steps: 6,
        c_n: Some(2.5),
        c_s: Some(c_s.clone()),
        kernel: StructuralKernel::Exponential,
        ..MassConfig::default()
    };
    let schedule = ScaleSchedule::new(&config, n, &mask).unwrap();
    let state = run_mass(raw.clone(), &schedule, &noise, &design, |_| {}).unwrap();
    let dense = dense_mass(
        &raw.beta,
        design.omega_inv(),
        &sigma_y,
        &schedule.bandwidths,
        2.5,
        &c_s,
    );
    for s in 0..=6 {
        let f = state.field_at(s);
        assert!(
            (&f.beta - &dense.beta[s]).amax() < 1e-10,
            "beta at scale {s}"
        );
        assert!(
            (&f.var_diag - &dense.var[s]).amax() < 1e-10,
            "variance at scale {s}"
        );
    }
    for d in 0..nd {
        for j in 0..p {
            assert_eq!(
                state.is_frozen(j, d),
                dense.frozen[j + p * d],
                "frozen ({j},{d})"
            );
        }
    }
    let n_frozen = dense.frozen.iter().filter(|&&f| f).count();
    assert!(
        n_frozen > 0 && n_frozen < p * nd,
        "case must exercise the stop rule"
    );
}

pub fn weighted_covariance_matches_kronecker_form() {
    let mask = Mask::full(Grid3::unit([3, 2, 1]).unwrap());
    let nd = 6;
    for p in 1..=3 {
        let n = 9;
        let mut r = rng(100 + p as u64);
        let x = normal_matrix(&mut r, n, p);
        let design = fit_design(x.clone()).unwrap();
        let eta = normal_matrix(&mut r, n, nd);
        let sigma_eps: Vec<f64> = (0..nd).map(|d| 0.5 + 0.1 * d as f64).collect();
        let noise = NoiseModel::from_parts(eta.clone(), sigma_eps.clone(), p, &mask).unwrap();
        let sigma_y = eta.transpose() * &eta / (n - p) as f64
            + DMatrix::from_diagonal(&DVector::from_vec(sigma_eps));
        // β̂_all = (I_N ⊗ Ω⁻¹Xᵀ) vec(Y), Cov(vec Y) = Σ_y ⊗ I_n.
        let b = design.omega_inv() * x.transpose();
        let a = DMatrix::<f64>::identity(nd, nd).kronecker(&b);
        let cov_y = sigma_y.kronecker(&DMatrix::<f64>::identity(n, n));
        let cov_beta = &a * cov_y * a.transpose();
        let weights: Vec<Vec<(usize, f64)>> = (0..p)
            .map(|j| {
                let raw: Vec<f64> = (0..nd).map(|_| r.random_range(0.0..1.0)).collect();
                let tot: f64 = raw.iter().sum();
                (0..nd)
                    .filter(|&m| (m + j) % 4 != 3)
                    .map(|m| (m, raw[m] / tot))
                    .collect()
            })
            .collect();
        let mut g = DMatrix::zeros(p, nd * p);
        for (j, w) in weights.iter().enumerate() {
            for &(m, wt) in w {
                g[(j, m * p + j)] = wt;
            }
        }
        let want = &g * cov_beta * g.transpose();
        let got = weighted_covariance(&design, &noise, &weights).unwrap();
        assert!(
            (&got - &want).amax() < 1e-10 * want.amax().max(1.0),
            "p={p}\n{got}\n{want}"
        );
    }
}

/// Closed-form upper tails for small degrees of freedom.
fn erf_sf(df: usize, x: f64) -> f64 {
    let t = (x / 2.0).sqrt();
    match df {
        1 => libm::erfc(t),
        2 => (-x / 2.0).exp(),
        3 => libm::erfc(t) + (2.0 * x / std::f64::consts::PI).sqrt() * (-x / 2.0).exp(),
        _ => unreachable!(),
    }
}

fn erf_upper_quantile(df: usize, a: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 200.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if erf_sf(df, mid) > a {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn chi2_quantiles_match_erf_bisection() {
    for df in 1..=3 {
        for a in [0.8, 0.4, 0.8 / 3.0, 0.2, 0.1, 0.08, 0.05, 0.01, 1e-3, 1e-6] {
            let got = chi2_upper_quantile(df, a).unwrap();
            let want = erf_upper_quantile(df, a);
            assert!((got - want).abs() < 1e-10, "df={df} a={a}: {got} vs {want}");
        }
    }
}

pub fn chi2_tail_matches_statrs() {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    for df in [1usize, 2, 3, 5, 9, 20] {
        let dist = ChiSquared::new(df as f64).unwrap();
        for x in [0.01, 0.3, 1.0, 2.5, 6.0, 15.0, 40.0] {
            let want = dist.sf(x);
            let got = chi2_sf(x, df);
            assert!(
                (got - want).abs() <= 1e-12_f64.max(1e-9 * want),
                "df={df} x={x}"
            );
        }
    }
}

pub fn two_row_wald_statistic_by_hand() {
    let mask = Arc::new(Mask::full(Grid3::unit([2, 1, 1]).unwrap()));
    let field = CoefficientField {
        mask,
        beta: DMatrix::from_row_slice(3, 2, &[0.3, 0.0, 0.5, 0.1, -0.4, 0.2]),
        var_diag: DMatrix::from_element(3, 2, 1.0),
        scale_index: 0,
    };
    let sigma = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 0.5, 0.2, 0.1, 0.2, 0.8]);
    let hyp = Hypothesis::new(
        DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
        DVector::from_vec(vec![0.1, 0.0]),
    )
    .unwrap();
    let s2 = sigma.clone();
    let wald = wald_test(&field, &move |_| Ok(s2.clone()), &hyp).unwrap();
    for d in 0..2 {
        let r1 = field.beta[(1, d)] - 0.1;
        let r2 = field.beta[(2, d)];
        let (a, b, c) = (sigma[(1, 1)], sigma[(1, 2)], sigma[(2, 2)]);
        let det = a * c - b * b;
        let w = (c * r1 * r1 - 2.0 * b * r1 * r2 + a * r2 * r2) / det;
        assert!((wald.statistic[d] - w).abs() < 1e-12);
        assert!((wald.p_value[d] - (-w / 2.0).exp()).abs() < 1e-12);
    }
    assert_eq!(wald.df, 2);
}
