//! Raw fp64 compute kernels behind the tape ops.

/// `c = a · b + beta · c` for row-major `a [m,k]`, `b [k,n]`, `c [m,n]`.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = aᵀ · b + beta · c` for row-major `a [k,m]`, `b [k,n]`, `c [m,n]`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a · bᵀ + beta · c` for row-major `a [m,k]`, `b [n,k]`, `c [m,n]`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold `x [c_in, h, w]` into columns `[c_in*kh*kw, out_h*out_w]`.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let out_h = (h + 2 * pad - kh) / stride + 1;
    let out_w = (w + 2 * pad - kw) / stride + 1;
    debug_assert_eq!(out.len(), c_in * kh * kw * out_h * out_w);
    let mut row = 0;
    for c in 0..c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut out[row * out_h * out_w..(row + 1) * out_h * out_w];
                let mut idx = 0;
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst[idx..idx + out_w].fill(0.0);
                        idx += out_w;
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[idx] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold columns back onto an image, accumulating overlaps (adjoint of im2col).
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let out_h = (h + 2 * pad - kh) / stride + 1;
    let out_w = (w + 2 * pad - kw) / stride + 1;
    debug_assert_eq!(cols.len(), c_in * kh * kw * out_h * out_w);
    debug_assert_eq!(out.len(), c_in * h * w);
    out.fill(0.0);
    let mut row = 0;
    for c in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &cols[row * out_h * out_w..(row + 1) * out_h * out_w];
                let mut idx = 0;
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        idx += out_w;
                        continue;
                    }
                    let base = c * h * w + iy as usize * w;
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += src[idx];
                        }
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(
        x: &[f64],
        c_in: usize,
        h: usize,
        w: usize,
        wgt: &[f64],
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (w + 2 * pad - kw) / stride + 1;
        let mut y = vec![0.0; c_out * out_h * out_w];
        for co in 0..c_out {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    let xi = x[ci * h * w + iy as usize * w + ix as usize];
                                    let wi = wgt[((co * c_in + ci) * kh + ky) * kw + kx];
                                    acc += xi * wi;
                                }
                            }
                        }
                    }
                    y[co * out_h * out_w + oy * out_w + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 + 0.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64) * 0.25 - 1.0).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm_nn(2, 3, 4, &a, &b, &mut c, 0.0);
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += a[i * 3 + k] * b[k * 4 + j];
                }
                assert!((c[i * 4 + j] - acc).abs() < 1e-12);
            }
        }
        // a·bᵀ with b as [4,3]
        let bt: Vec<f64> = (0..12)
            .map(|i| b[(i % 4) * 3 / 3 * 0 + 0] * 0.0 + b[(i / 3) + (i % 3) * 4])
            .collect();
        let mut c2 = vec![0.0; 8];
        gemm_nt(2, 3, 4, &a, &bt, &mut c2, 0.0);
        for (x, y) in c.iter().zip(c2.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_conv_matches_naive() {
        let (c_in, h, w, c_out) = (2, 5, 4, 3);
        let x: Vec<f64> = (0..c_in * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let wgt: Vec<f64> = (0..c_out * c_in * 9).map(|i| (i as f64 * 0.11).cos()).collect();
        for (stride, pad) in [(1, 1), (2, 1)] {
            let out_h = (h + 2 * pad - 3) / stride + 1;
            let out_w = (w + 2 * pad - 3) / stride + 1;
            let mut cols = vec![0.0; c_in * 9 * out_h * out_w];
            im2col(&x, c_in, h, w, 3, 3, stride, pad, &mut cols);
            let mut y = vec![0.0; c_out * out_h * out_w];
            gemm_nn(c_out, c_in * 9, out_h * out_w, &wgt, &cols, &mut y, 0.0);
            let want = naive_conv(&x, c_in, h, w, &wgt, c_out, 3, 3, stride, pad);
            for (a, b) in y.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let (c_in, h, w, stride, pad) = (2, 4, 4, 1, 1);
        let out_h = (h + 2 * pad - 3) / stride + 1;
        let out_w = (w + 2 * pad - 3) / stride + 1;
        let x: Vec<f64> = (0..c_in * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..c_in * 9 * out_h * out_w)
            .map(|i| (i as f64 * 0.3).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c_in, h, w, 3, 3, stride, pad, &mut cols);
        let lhs: f64 = cols.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let mut img = vec![0.0; x.len()];
        col2im(&y, c_in, h, w, 3, 3, stride, pad, &mut img);
        let rhs: f64 = x.iter().zip(img.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
