//! Dense kernels shared by forward and backward passes. Inner products
//! accumulate in `f64` regardless of the element type.

use super::tensor::Real;

/// `a[m×k] · b[k×n]`. Each output sums over `k` in index order, so results
/// do not depend on the blocking below.
pub(crate) fn gemm<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    const JB: usize = 256;
    let mut out = vec![S::zero(); m * n];
    let mut acc = [[0f64; JB]; 4];
    for j0 in (0..n).step_by(JB) {
        let jw = JB.min(n - j0);
        let mut i = 0;
        while i < m {
            let rows = 4.min(m - i);
            for r in acc.iter_mut().take(rows) {
                r[..jw].iter_mut().for_each(|v| *v = 0.0);
            }
            for p in 0..k {
                let brow = &b[p * n + j0..p * n + j0 + jw];
                if rows == 4 {
                    let av = [0, 1, 2, 3].map(|r| a[(i + r) * k + p].as_f64());
                    let [a0, a1, a2, a3] = &mut acc;
                    for (jj, &bv) in brow.iter().enumerate() {
                        let bv = bv.as_f64();
                        a0[jj] += av[0] * bv;
                        a1[jj] += av[1] * bv;
                        a2[jj] += av[2] * bv;
                        a3[jj] += av[3] * bv;
                    }
                } else {
                    for (r, accr) in acc.iter_mut().enumerate().take(rows) {
                        let av = a[(i + r) * k + p].as_f64();
                        for (x, &bv) in accr[..jw].iter_mut().zip(brow) {
                            *x += av * bv.as_f64();
                        }
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate().take(rows) {
                let dst = &mut out[(i + r) * n + j0..(i + r) * n + j0 + jw];
                for (o, &v) in dst.iter_mut().zip(&accr[..jw]) {
                    *o = S::of(v);
                }
            }
            i += rows;
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ` as row dot products. Eight fixed partial sums keep
/// the result independent of vector width.
pub(crate) fn gemm_nt<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut part = [0f64; 8];
            let (ac, at) = arow.split_at(k - k % 8);
            let (bc, bt) = brow.split_at(k - k % 8);
            for (x, y) in ac.chunks_exact(8).zip(bc.chunks_exact(8)) {
                for l in 0..8 {
                    part[l] += x[l].as_f64() * y[l].as_f64();
                }
            }
            let mut sum: f64 = part.iter().sum();
            for (x, y) in at.iter().zip(bt) {
                sum += x.as_f64() * y.as_f64();
            }
            out[i * n + j] = S::of(sum);
        }
    }
    out
}

pub(crate) fn transpose<S: Real>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Unfolds a `[b, c, h, w]` batch into a `[c·k·k, b·h·w]` patch matrix for a
/// stride-1 convolution with `k/2` zero padding.
pub(crate) fn im2col<S: Real>(x: &[S], b: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<S> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let ncols = b * hw;
    let mut cols = vec![S::zero(); c * k * k * ncols];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let dst = &mut cols[r * ncols..(r + 1) * ncols];
                for bi in 0..b {
                    let src = &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    for oy in 0..h {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..w {
                            let ix = ox as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dst[bi * hw + oy * w + ox] = src[iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub(crate) fn col2im<S: Real>(cols: &[S], b: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<S> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let ncols = b * hw;
    let mut x = vec![0f64; b * c * hw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let src = &cols[r * ncols..(r + 1) * ncols];
                for bi in 0..b {
                    let dst = &mut x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    for oy in 0..h {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..w {
                            let ix = ox as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dst[iy as usize * w + ix as usize] += src[bi * hw + oy * w + ox].as_f64();
                        }
                    }
                }
            }
        }
    }
    x.into_iter().map(S::of).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        assert_eq!(gemm(&a, &b, 2, 3, 2), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gemm_nt_matches_gemm() {
        let (m, k, n) = (3, 19, 5);
        let a: Vec<f64> = (0..m * k).map(|v| ((v * 7) % 11) as f64 - 5.0).collect();
        let b: Vec<f64> = (0..n * k).map(|v| ((v * 5) % 13) as f64 - 6.0).collect();
        assert_eq!(gemm_nt(&a, &b, m, k, n), gemm(&a, &transpose(&b, n, k), m, k, n));
    }

    #[test]
    fn im2col_center_tap_is_identity() {
        let x: Vec<f64> = (0..2 * 3 * 4 * 5).map(|v| v as f64).collect();
        let cols = im2col(&x, 2, 3, 4, 5, 3);
        let ncols = 2 * 20;
        for ci in 0..3 {
            let r = ci * 9 + 4;
            for bi in 0..2 {
                for p in 0..20 {
                    assert_eq!(cols[r * ncols + bi * 20 + p], x[(bi * 3 + ci) * 20 + p]);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (b, c, h, w, k) = (2, 2, 3, 4, 3);
        let x: Vec<f64> = (0..b * c * h * w).map(|v| ((v * 7) % 11) as f64 - 5.0).collect();
        let ncols = c * k * k * b * h * w;
        let y: Vec<f64> = (0..ncols).map(|v| ((v * 5) % 13) as f64 - 6.0).collect();
        let lhs: f64 = im2col(&x, b, c, h, w, k).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, b, c, h, w, k)).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
