//! 2-d convolution kernels: forward, transposed, and weight-gradient.
//!
//! The three routines form a closed family under differentiation: the input
//! gradient of `conv2d` is `conv_t2d`, the weight gradient is `conv2d_wgrad`,
//! and the gradients of those two are again members of the family. The tape
//! layer exploits this to support gradients of gradients.
//!
//! Layouts: activations are `[B, C, H, W]`; `conv2d` weights are
//! `[Cout, Cin, kh, kw]`; `conv_t2d` weights are `[Cin, Cout, kh, kw]`.

use ndarray::{ArrayD, IxDyn};

pub fn conv2d_out_hw(h: usize, w: usize, kh: usize, kw: usize, s: usize, p: usize) -> (usize, usize) {
    assert!(h + 2 * p >= kh && w + 2 * p >= kw, "kernel larger than padded input");
    ((h + 2 * p - kh) / s + 1, (w + 2 * p - kw) / s + 1)
}

pub fn conv_t2d_min_out_hw(h: usize, w: usize, kh: usize, kw: usize, s: usize, p: usize) -> (usize, usize) {
    ((h - 1) * s + kh - 2 * p, (w - 1) * s + kw - 2 * p)
}

/// cols[(c*kh+u)*kw+v, i*wo+j] = x[c, i*s+u-p, j*s+v-p], zero outside.
fn im2col(
    x: &[f64],
    (ci, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    s: usize,
    p: usize,
    (ho, wo): (usize, usize),
    cols: &mut [f64],
) {
    debug_assert_eq!(cols.len(), ci * kh * kw * ho * wo);
    let plane = ho * wo;
    for c in 0..ci {
        for u in 0..kh {
            for v in 0..kw {
                let row = ((c * kh + u) * kw + v) * plane;
                for i in 0..ho {
                    let src_i = i * s + u;
                    if src_i < p || src_i - p >= h {
                        cols[row + i * wo..row + (i + 1) * wo].fill(0.0);
                        continue;
                    }
                    let xr = (c * h + (src_i - p)) * w;
                    for j in 0..wo {
                        let src_j = j * s + v;
                        cols[row + i * wo + j] = if src_j < p || src_j - p >= w {
                            0.0
                        } else {
                            x[xr + src_j - p]
                        };
                    }
                }
            }
        }
    }
}

/// y[co, i*s+u-p, j*s+v-p] += cols[(co*kh+u)*kw+v, i*w+j], drops out-of-range.
fn col2im_add(
    cols: &[f64],
    (co, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    s: usize,
    p: usize,
    (oh, ow): (usize, usize),
    y: &mut [f64],
) {
    let plane = h * w;
    for c in 0..co {
        for u in 0..kh {
            for v in 0..kw {
                let row = ((c * kh + u) * kw + v) * plane;
                for i in 0..h {
                    let dst_i = i * s + u;
                    if dst_i < p || dst_i - p >= oh {
                        continue;
                    }
                    let yr = (c * oh + (dst_i - p)) * ow;
                    for j in 0..w {
                        let dst_j = j * s + v;
                        if dst_j >= p && dst_j - p < ow {
                            y[yr + dst_j - p] += cols[row + i * w + j];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
unsafe fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: *const f64,
    rsa: isize,
    csa: isize,
    b: *const f64,
    rsb: isize,
    csb: isize,
    beta: f64,
    c: *mut f64,
) {
    matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

pub fn conv2d(x: &ArrayD<f64>, w: &ArrayD<f64>, s: usize, p: usize) -> ArrayD<f64> {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, ci2, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(ci, ci2, "conv2d channel mismatch");
    let (ho, wo) = conv2d_out_hw(h, wd, kh, kw, s, p);
    let xs = x.as_standard_layout();
    let ws = w.as_standard_layout();
    let xsl = xs.as_slice().unwrap();
    let wsl = ws.as_slice().unwrap();
    let kdim = ci * kh * kw;
    let mut cols = vec![0.0f64; kdim * ho * wo];
    let mut out = vec![0.0f64; b * co * ho * wo];
    for bi in 0..b {
        im2col(
            &xsl[bi * ci * h * wd..],
            (ci, h, wd),
            (kh, kw),
            s,
            p,
            (ho, wo),
            &mut cols,
        );
        unsafe {
            gemm(
                co,
                kdim,
                ho * wo,
                wsl.as_ptr(),
                kdim as isize,
                1,
                cols.as_ptr(),
                (ho * wo) as isize,
                1,
                0.0,
                out[bi * co * ho * wo..].as_mut_ptr(),
            );
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, co, ho, wo]), out).unwrap()
}

/// Transposed convolution with an explicit output size.
///
/// `out_hw` must satisfy `min <= out_hw < min + s` where
/// `min = (h-1)*s + k - 2p`; the slack is the usual output padding.
pub fn conv_t2d(x: &ArrayD<f64>, w: &ArrayD<f64>, s: usize, p: usize, out_hw: (usize, usize)) -> ArrayD<f64> {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ci2, co, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(ci, ci2, "conv_t2d channel mismatch");
    let (mh, mw) = conv_t2d_min_out_hw(h, wd, kh, kw, s, p);
    assert!(
        out_hw.0 >= mh && out_hw.0 < mh + s && out_hw.1 >= mw && out_hw.1 < mw + s,
        "conv_t2d out_hw {:?} unreachable from input {}x{} (min {}x{}, stride {})",
        out_hw,
        h,
        wd,
        mh,
        mw,
        s
    );
    let xs = x.as_standard_layout();
    let ws = w.as_standard_layout();
    let xsl = xs.as_slice().unwrap();
    let wsl = ws.as_slice().unwrap();
    let kdim = co * kh * kw;
    let mut cols = vec![0.0f64; kdim * h * wd];
    let mut out = vec![0.0f64; b * co * out_hw.0 * out_hw.1];
    for bi in 0..b {
        // cols = w^T (kdim x ci) * x_b (ci x h*w)
        unsafe {
            gemm(
                kdim,
                ci,
                h * wd,
                wsl.as_ptr(),
                1,
                kdim as isize,
                xsl[bi * ci * h * wd..].as_ptr(),
                (h * wd) as isize,
                1,
                0.0,
                cols.as_mut_ptr(),
            );
        }
        col2im_add(
            &cols,
            (co, h, wd),
            (kh, kw),
            s,
            p,
            out_hw,
            &mut out[bi * co * out_hw.0 * out_hw.1..(bi + 1) * co * out_hw.0 * out_hw.1],
        );
    }
    ArrayD::from_shape_vec(IxDyn(&[b, co, out_hw.0, out_hw.1]), out).unwrap()
}

/// dw[o,c,u,v] = sum_{b,i,j} dy[b,o,i,j] * x[b,c,i*s+u-p,j*s+v-p].
pub fn conv2d_wgrad(
    x: &ArrayD<f64>,
    dy: &ArrayD<f64>,
    s: usize,
    p: usize,
    kh: usize,
    kw: usize,
) -> ArrayD<f64> {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (b2, co, ho, wo) = (dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    assert_eq!(b, b2, "conv2d_wgrad batch mismatch");
    debug_assert_eq!((ho, wo), conv2d_out_hw(h, wd, kh, kw, s, p));
    let xs = x.as_standard_layout();
    let dys = dy.as_standard_layout();
    let xsl = xs.as_slice().unwrap();
    let dysl = dys.as_slice().unwrap();
    let kdim = ci * kh * kw;
    let mut cols = vec![0.0f64; kdim * ho * wo];
    let mut out = vec![0.0f64; co * kdim];
    for bi in 0..b {
        im2col(
            &xsl[bi * ci * h * wd..],
            (ci, h, wd),
            (kh, kw),
            s,
            p,
            (ho, wo),
            &mut cols,
        );
        // dw += dy_b (co x ho*wo) * cols^T (ho*wo x kdim)
        unsafe {
            gemm(
                co,
                ho * wo,
                kdim,
                dysl[bi * co * ho * wo..].as_ptr(),
                (ho * wo) as isize,
                1,
                cols.as_ptr(),
                1,
                (ho * wo) as isize,
                1.0,
                out.as_mut_ptr(),
            );
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[co, ci, kh, kw]), out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv2d(x: &ArrayD<f64>, w: &ArrayD<f64>, s: usize, p: usize) -> ArrayD<f64> {
        let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let (ho, wo) = conv2d_out_hw(h, wd, kh, kw, s, p);
        let mut y = ArrayD::zeros(IxDyn(&[b, co, ho, wo]));
        for bi in 0..b {
            for o in 0..co {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for u in 0..kh {
                                for v in 0..kw {
                                    let si = i * s + u;
                                    let sj = j * s + v;
                                    if si >= p && si - p < h && sj >= p && sj - p < wd {
                                        acc += x[[bi, c, si - p, sj - p]] * w[[o, c, u, v]];
                                    }
                                }
                            }
                        }
                        y[[bi, o, i, j]] = acc;
                    }
                }
            }
        }
        y
    }

    fn arange(shape: &[usize]) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..n).map(|i| (i as f64) * 0.1 - (n as f64) * 0.05).collect(),
        )
        .unwrap()
    }

    #[test]
    fn conv2d_matches_naive() {
        for &(s, p) in &[(1usize, 0usize), (1, 1), (2, 1), (3, 1)] {
            let x = arange(&[2, 3, 7, 8]);
            let w = arange(&[4, 3, 3, 3]);
            if 7 + 2 * p < 3 {
                continue;
            }
            let got = conv2d(&x, &w, s, p);
            let want = naive_conv2d(&x, &w, s, p);
            assert_eq!(got.shape(), want.shape());
            for (g, wv) in got.iter().zip(want.iter()) {
                assert!((g - wv).abs() < 1e-10, "s={} p={}", s, p);
            }
        }
    }

    #[test]
    fn conv_t2d_adjoint_of_conv2d() {
        // <conv(x, w), y> == <x, conv_t(y, w)> for all x, y: the pair are
        // exact adjoints, which is precisely what backward needs.
        let (s, p) = (2usize, 1usize);
        let x = arange(&[2, 3, 6, 6]);
        let w = arange(&[4, 3, 3, 3]);
        let y = conv2d(&x, &w, s, p);
        let cot = arange(y.shape());
        let lhs: f64 = (&y * &cot).sum();
        let back = conv_t2d(&cot, &w, s, p, (6, 6));
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn wgrad_matches_finite_difference() {
        let (s, p) = (2usize, 1usize);
        let x = arange(&[2, 2, 5, 5]);
        let mut w = arange(&[3, 2, 3, 3]);
        let cot = arange(conv2d(&x, &w, s, p).shape());
        let dw = conv2d_wgrad(&x, &cot, s, p, 3, 3);
        let eps = 1e-6;
        for idx in [[0usize, 0, 0, 0], [1, 1, 2, 1], [2, 0, 1, 2]] {
            let orig = w[IxDyn(&idx)];
            w[IxDyn(&idx)] = orig + eps;
            let up: f64 = (&conv2d(&x, &w, s, p) * &cot).sum();
            w[IxDyn(&idx)] = orig - eps;
            let dn: f64 = (&conv2d(&x, &w, s, p) * &cot).sum();
            w[IxDyn(&idx)] = orig;
            let fd = (up - dn) / (2.0 * eps);
            assert!((fd - dw[IxDyn(&idx)]).abs() < 1e-6, "at {:?}", idx);
        }
    }

    #[test]
    fn conv_t2d_output_padding_range() {
        let x = arange(&[1, 2, 4, 4]);
        let w = arange(&[2, 3, 4, 4]);
        // min out = (4-1)*2 + 4 - 2 = 8; stride 2 allows 8 or 9.
        let y8 = conv_t2d(&x, &w, 2, 1, (8, 8));
        assert_eq!(y8.shape(), &[1, 3, 8, 8]);
        let y9 = conv_t2d(&x, &w, 2, 1, (9, 9));
        assert_eq!(y9.shape(), &[1, 3, 9, 9]);
    }
}
