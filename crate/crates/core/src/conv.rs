//! Separable correlation passes over full-grid arrays (x fastest).

/// `out[x] = sum_t taps[t + r] * src[x + t·e_axis]`, where `taps.len() == 2r+1`
/// and samples outside the grid contribute nothing.
pub(crate) fn pass(dims: [usize; 3], src: &[f64], axis: usize, taps: &[f64], out: &mut [f64]) {
    let [nx, ny, nz] = dims;
    debug_assert_eq!(src.len(), nx * ny * nz);
    debug_assert_eq!(taps.len() % 2, 1);
    let r = (taps.len() / 2) as isize;
    out.iter_mut().for_each(|v| *v = 0.0);
    match axis {
        0 => {
            for row in 0..ny * nz {
                let base = row * nx;
                let s = &src[base..base + nx];
                let o = &mut out[base..base + nx];
                for (ti, &w) in taps.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let t = ti as isize - r;
                    let (lo, hi) = (
                        0.max(-t) as usize,
                        (nx as isize).min(nx as isize - t).max(0) as usize,
                    );
                    for x in lo..hi {
                        o[x] += w * s[(x as isize + t) as usize];
                    }
                }
            }
        }
        1 => {
            for k in 0..nz {
                for j in 0..ny {
                    let dst = (k * ny + j) * nx;
                    for (ti, &w) in taps.iter().enumerate() {
                        let t = ti as isize - r;
                        let jj = j as isize + t;
                        if w == 0.0 || jj < 0 || jj >= ny as isize {
                            continue;
                        }
                        let srow = (k * ny + jj as usize) * nx;
                        for x in 0..nx {
                            out[dst + x] += w * src[srow + x];
                        }
                    }
                }
            }
        }
        _ => {
            let plane = nx * ny;
            for k in 0..nz {
                let dst = k * plane;
                for (ti, &w) in taps.iter().enumerate() {
                    let t = ti as isize - r;
                    let kk = k as isize + t;
                    if w == 0.0 || kk < 0 || kk >= nz as isize {
                        continue;
                    }
                    let srow = kk as usize * plane;
                    for x in 0..plane {
                        out[dst + x] += w * src[srow + x];
                    }
                }
            }
        }
    }
}

/// Applies one tap vector per axis (x, y, z).
pub(crate) fn separable(dims: [usize; 3], src: &[f64], taps: [&[f64]; 3]) -> Vec<f64> {
    let mut a = vec![0.0; src.len()];
    let mut b = vec![0.0; src.len()];
    pass(dims, src, 2, taps[2], &mut a);
    pass(dims, &a, 1, taps[1], &mut b);
    pass(dims, &b, 0, taps[0], &mut a);
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_matches_direct_triple_sum() {
        let dims = [5, 4, 3];
        let src: Vec<f64> = (0..60).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let tx = [0.5, 1.0, -0.25];
        let ty = [0.2, 1.0, 0.3];
        let tz = [1.0, 2.0, 0.0];
        let got = separable(dims, &src, [&tx, &ty, &tz]);
        for k in 0..3isize {
            for j in 0..4isize {
                for i in 0..5isize {
                    let mut want = 0.0;
                    for c in -1..=1isize {
                        for b in -1..=1isize {
                            for a in -1..=1isize {
                                let (x, y, z) = (i + a, j + b, k + c);
                                if x < 0 || y < 0 || z < 0 || x >= 5 || y >= 4 || z >= 3 {
                                    continue;
                                }
                                let w = tx[(a + 1) as usize]
                                    * ty[(b + 1) as usize]
                                    * tz[(c + 1) as usize];
                                want += w * src[(x + 5 * (y + 4 * z)) as usize];
                            }
                        }
                    }
                    let idx = (i + 5 * (j + 4 * k)) as usize;
                    assert!((got[idx] - want).abs() < 1e-12);
                }
            }
        }
    }
}
