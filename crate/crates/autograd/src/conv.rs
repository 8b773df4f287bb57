//! 2-D convolution, pooling, and bilinear resampling ops.
//!
//! Convolution runs as one batched im2col + GEMM per call; the patch matrix
//! is rebuilt during backward instead of being kept alive on the graph.

use crate::element::Element;
use crate::tensor::Tensor;
use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewMut2};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        assert!(stride >= 1 && dilation >= 1);
        Conv2dSpec {
            stride,
            padding,
            dilation,
        }
    }

    fn out_dim(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        assert!(
            input + 2 * self.padding >= span,
            "conv2d: input {input} too small for kernel span {span}"
        );
        (input + 2 * self.padding - span) / self.stride + 1
    }
}

/// Fill the patch matrix rows for one input tensor.
///
/// `patches` has shape [Cin*kh*kw, N*Ho*Wo]; row k = (ci*kh + ky)*kw + kx,
/// column = n*(Ho*Wo) + y*Wo + x. Rows are filled in parallel.
fn im2col<T: Element>(
    x: &ArrayD<T>,
    kh: usize,
    kw: usize,
    spec: Conv2dSpec,
    ho: usize,
    wo: usize,
) -> Array2<T> {
    let (n, cin, h, w) = {
        let s = x.shape();
        (s[0], s[1], s[2], s[3])
    };
    let k = cin * kh * kw;
    let m = ho * wo;
    let xs = x.as_slice().expect("im2col: non-contiguous input");
    let mut buf = vec![T::zero(); k * n * m];
    buf.par_chunks_mut(n * m).enumerate().for_each(|(row, out)| {
        let ci = row / (kh * kw);
        let ky = (row / kw) % kh;
        let kx = row % kw;
        for ni in 0..n {
            let src_plane = &xs[(ni * cin + ci) * h * w..(ni * cin + ci + 1) * h * w];
            let dst_plane = &mut out[ni * m..(ni + 1) * m];
            for yo in 0..ho {
                let yi = (yo * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                if yi < 0 || yi >= h as isize {
                    continue;
                }
                let src_row = &src_plane[yi as usize * w..(yi as usize + 1) * w];
                let dst_row = &mut dst_plane[yo * wo..(yo + 1) * wo];
                if spec.stride == 1 {
                    // xi = xo + kx*d - p: one contiguous span of valid taps
                    let off = kx as isize * spec.dilation as isize - spec.padding as isize;
                    let xo_lo = (-off).max(0) as usize;
                    let xo_hi = ((w as isize - off).min(wo as isize)).max(0) as usize;
                    if xo_lo < xo_hi {
                        let src_lo = (xo_lo as isize + off) as usize;
                        dst_row[xo_lo..xo_hi]
                            .copy_from_slice(&src_row[src_lo..src_lo + (xo_hi - xo_lo)]);
                    }
                } else {
                    for (xo, d) in dst_row.iter_mut().enumerate() {
                        let xi = (xo * spec.stride + kx * spec.dilation) as isize
                            - spec.padding as isize;
                        if xi >= 0 && xi < w as isize {
                            *d = src_row[xi as usize];
                        }
                    }
                }
            }
        }
    });
    Array2::from_shape_vec((k, n * m), buf).unwrap()
}

/// Scatter-add the patch-gradient matrix back onto the input layout.
fn col2im<T: Element>(
    gp: &Array2<T>,
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: Conv2dSpec,
    ho: usize,
    wo: usize,
) -> ArrayD<T> {
    let m = ho * wo;
    let gps = gp.as_slice().expect("col2im: non-contiguous gradient");
    let mut out = vec![T::zero(); n * cin * h * w];
    // Parallel over batch items: each writes a disjoint slice.
    out.par_chunks_mut(cin * h * w).enumerate().for_each(|(ni, dst)| {
        for row in 0..cin * kh * kw {
            let ci = row / (kh * kw);
            let ky = (row / kw) % kh;
            let kx = row % kw;
            let src_plane = &gps[row * n * m + ni * m..row * n * m + (ni + 1) * m];
            for yo in 0..ho {
                let yi = (yo * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                if yi < 0 || yi >= h as isize {
                    continue;
                }
                let base = ci * h * w + yi as usize * w;
                let src_row = &src_plane[yo * wo..(yo + 1) * wo];
                if spec.stride == 1 {
                    let off = kx as isize * spec.dilation as isize - spec.padding as isize;
                    let xo_lo = (-off).max(0) as usize;
                    let xo_hi = ((w as isize - off).min(wo as isize)).max(0) as usize;
                    if xo_lo < xo_hi {
                        let dst_lo = (xo_lo as isize + off) as usize + base;
                        for (d, s) in dst[dst_lo..dst_lo + (xo_hi - xo_lo)]
                            .iter_mut()
                            .zip(&src_row[xo_lo..xo_hi])
                        {
                            *d += *s;
                        }
                    }
                } else {
                    for (xo, s) in src_row.iter().enumerate() {
                        let xi = (xo * spec.stride + kx * spec.dilation) as isize
                            - spec.padding as isize;
                        if xi >= 0 && xi < w as isize {
                            dst[base + xi as usize] += *s;
                        }
                    }
                }
            }
        }
    });
    ArrayD::from_shape_vec(vec![n, cin, h, w], out).unwrap()
}

/// GEMM with the output columns split across rayon threads. Each output
/// element is produced by exactly one single-threaded `general_mat_mul`
/// call, so results are deterministic regardless of thread count.
fn gemm<T: Element>(a: ArrayView2<T>, b: ArrayView2<T>, c: &mut ArrayViewMut2<T>) {
    const MIN_COLS_PER_CHUNK: usize = 192;
    let cols = c.shape()[1];
    let threads = rayon::current_num_threads().max(1);
    let chunks = threads.min(cols.div_ceil(MIN_COLS_PER_CHUNK)).max(1);
    if chunks == 1 {
        ndarray::linalg::general_mat_mul(T::one(), &a, &b, T::zero(), c);
        return;
    }
    let step = cols.div_ceil(chunks);
    let b_blocks = split_cols(b, step);
    let c_blocks = split_cols_mut(c.view_mut(), step);
    rayon::scope(|s| {
        for (bb, mut cb) in b_blocks.into_iter().zip(c_blocks) {
            let a = a.reborrow();
            s.spawn(move |_| {
                ndarray::linalg::general_mat_mul(T::one(), &a, &bb, T::zero(), &mut cb);
            });
        }
    });
}

fn split_cols<T: Element>(v: ArrayView2<T>, step: usize) -> Vec<ArrayView2<T>> {
    let mut out = Vec::new();
    let mut rest = v;
    while rest.shape()[1] > step {
        let (head, tail) = rest.split_at(ndarray::Axis(1), step);
        out.push(head);
        rest = tail;
    }
    out.push(rest);
    out
}

fn split_cols_mut<T: Element>(v: ArrayViewMut2<T>, step: usize) -> Vec<ArrayViewMut2<T>> {
    let mut out = Vec::new();
    let mut rest = v;
    while rest.shape()[1] > step {
        let (head, tail) = rest.split_at(ndarray::Axis(1), step);
        out.push(head);
        rest = tail;
    }
    out.push(rest);
    out
}

/// 2-D convolution of `x` [N, Cin, H, W] with `weight` [Cout, Cin, kh, kw]
/// and `bias` [Cout]. Differentiable in all three arguments.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: Conv2dSpec,
) -> Tensor<T> {
    let (n, cin, h, w) = x.dims4();
    let (cout, wcin, kh, kw) = weight.dims4();
    assert_eq!(cin, wcin, "conv2d: channel mismatch");
    assert_eq!(bias.shape(), &[cout], "conv2d: bias shape mismatch");
    let ho = spec.out_dim(h, kh);
    let wo = spec.out_dim(w, kw);
    let m = ho * wo;
    let k = cin * kh * kw;

    let wmat_owned;
    let wmat: ArrayView2<T> = {
        wmat_owned = weight.data().view().into_shape_with_order((cout, k)).unwrap();
        wmat_owned
    };

    // 1x1 stride-1 convolutions skip the patch copy entirely.
    let out_mat = if kh == 1 && kw == 1 && spec.stride == 1 && spec.padding == 0 {
        let xmat = reshape_nchw_to_cnm(x.data(), n, cin, h * w);
        let mut out = Array2::zeros((cout, n * m));
        gemm(wmat, xmat.view(), &mut out.view_mut());
        out
    } else {
        let patches = im2col(x.data(), kh, kw, spec, ho, wo);
        let mut out = Array2::zeros((cout, n * m));
        gemm(wmat, patches.view(), &mut out.view_mut());
        out
    };

    let mut data = vec![T::zero(); n * cout * m];
    let om = out_mat.as_slice().unwrap();
    let bs = bias.data().as_slice().unwrap();
    data.par_chunks_mut(cout * m).enumerate().for_each(|(ni, dst)| {
        for co in 0..cout {
            let src = &om[co * n * m + ni * m..co * n * m + (ni + 1) * m];
            let d = &mut dst[co * m..(co + 1) * m];
            let b = bs[co];
            for (di, si) in d.iter_mut().zip(src) {
                *di = *si + b;
            }
        }
    });
    let data = ArrayD::from_shape_vec(vec![n, cout, ho, wo], data).unwrap();

    Tensor::from_op(
        vec![x.clone(), weight.clone(), bias.clone()],
        data,
        move |node, g| {
            let x = node.parent_data(0);
            let wt = node.parent_data(1);
            let need_x = node.parents()[0].needs_grad();
            let need_w = node.parents()[1].needs_grad();
            let need_b = node.parents()[2].needs_grad();

            // [Cout, N*M] view of the output gradient.
            let gs = g.as_slice().unwrap();
            let mut gmat = vec![T::zero(); cout * n * m];
            gmat.par_chunks_mut(n * m).enumerate().for_each(|(co, dst)| {
                for ni in 0..n {
                    let src = &gs[(ni * cout + co) * m..(ni * cout + co + 1) * m];
                    dst[ni * m..(ni + 1) * m].copy_from_slice(src);
                }
            });
            let gmat = Array2::from_shape_vec((cout, n * m), gmat).unwrap();

            let gb = if need_b {
                let mut b = ArrayD::zeros(vec![cout]);
                for (co, row) in gmat.rows().into_iter().enumerate() {
                    b[[co]] = row.sum();
                }
                Some(b)
            } else {
                None
            };

            let one_by_one = kh == 1 && kw == 1 && spec.stride == 1 && spec.padding == 0;
            let wmat = wt.view().into_shape_with_order((cout, k)).unwrap();

            let gw = if need_w {
                let patches = if one_by_one {
                    reshape_nchw_to_cnm(x, n, cin, h * w)
                } else {
                    im2col(x, kh, kw, spec, ho, wo)
                };
                let mut gwm = Array2::zeros((cout, k));
                gemm(gmat.view(), patches.t(), &mut gwm.view_mut());
                Some(
                    gwm.into_shape_with_order(vec![cout, cin, kh, kw])
                        .unwrap()
                        .into_dyn(),
                )
            } else {
                None
            };

            let gx = if need_x {
                let mut gp = Array2::zeros((k, n * m));
                gemm(wmat.t(), gmat.view(), &mut gp.view_mut());
                if one_by_one {
                    Some(reshape_cnm_to_nchw(&gp, n, cin, h, w))
                } else {
                    Some(col2im(&gp, n, cin, h, w, kh, kw, spec, ho, wo))
                }
            } else {
                None
            };

            vec![gx, gw, gb]
        },
    )
}

/// [N, C, H*W] -> [C, N*(H*W)] copy used by the 1x1 fast path.
fn reshape_nchw_to_cnm<T: Element>(x: &ArrayD<T>, n: usize, c: usize, m: usize) -> Array2<T> {
    let xs = x.as_slice().unwrap();
    let mut buf = vec![T::zero(); c * n * m];
    buf.par_chunks_mut(n * m).enumerate().for_each(|(ci, dst)| {
        for ni in 0..n {
            let src = &xs[(ni * c + ci) * m..(ni * c + ci + 1) * m];
            dst[ni * m..(ni + 1) * m].copy_from_slice(src);
        }
    });
    Array2::from_shape_vec((c, n * m), buf).unwrap()
}

fn reshape_cnm_to_nchw<T: Element>(
    x: &Array2<T>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> ArrayD<T> {
    let m = h * w;
    let xs = x.as_slice().unwrap();
    let mut buf = vec![T::zero(); n * c * m];
    buf.par_chunks_mut(c * m).enumerate().for_each(|(ni, dst)| {
        for ci in 0..c {
            let src = &xs[ci * n * m + ni * m..ci * n * m + (ni + 1) * m];
            dst[ci * m..(ci + 1) * m].copy_from_slice(src);
        }
    });
    ArrayD::from_shape_vec(vec![n, c, h, w], buf).unwrap()
}

/// 2x2 average pooling with stride 2. Requires even spatial dims.
pub fn avg_pool2<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert!(
        h % 2 == 0 && w % 2 == 0,
        "avg_pool2: odd input {h}x{w}"
    );
    let (ho, wo) = (h / 2, w / 2);
    let xs = x.data().as_slice().unwrap();
    let quarter = T::from_f64(0.25);
    let mut buf = vec![T::zero(); n * c * ho * wo];
    buf.par_chunks_mut(ho * wo).enumerate().for_each(|(plane, dst)| {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        for yo in 0..ho {
            let r0 = &src[2 * yo * w..2 * yo * w + w];
            let r1 = &src[(2 * yo + 1) * w..(2 * yo + 1) * w + w];
            let d = &mut dst[yo * wo..(yo + 1) * wo];
            for xo in 0..wo {
                d[xo] = (r0[2 * xo] + r0[2 * xo + 1] + r1[2 * xo] + r1[2 * xo + 1]) * quarter;
            }
        }
    });
    let data = ArrayD::from_shape_vec(vec![n, c, ho, wo], buf).unwrap();
    Tensor::from_op(vec![x.clone()], data, move |_, g| {
        let gsl = g.as_slice().unwrap();
        let quarter = T::from_f64(0.25);
        let mut gx = vec![T::zero(); n * c * h * w];
        gx.par_chunks_mut(h * w).enumerate().for_each(|(plane, dst)| {
            let src = &gsl[plane * ho * wo..(plane + 1) * ho * wo];
            for yo in 0..ho {
                for xo in 0..wo {
                    let gv = src[yo * wo + xo] * quarter;
                    dst[2 * yo * w + 2 * xo] += gv;
                    dst[2 * yo * w + 2 * xo + 1] += gv;
                    dst[(2 * yo + 1) * w + 2 * xo] += gv;
                    dst[(2 * yo + 1) * w + 2 * xo + 1] += gv;
                }
            }
        });
        vec![Some(ArrayD::from_shape_vec(vec![n, c, h, w], gx).unwrap())]
    })
}

/// Sampling plan for one output axis of a bilinear resize
/// (half-pixel-centre convention, edges clamped).
fn resize_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let i0 = src.floor();
            let frac = src - i0;
            let a = (i0.max(0.0) as usize).min(in_len - 1);
            let b = ((i0 + 1.0).max(0.0) as usize).min(in_len - 1);
            (a, b, frac)
        })
        .collect()
}

/// Bilinear resize of an NCHW tensor to `(ho, wo)`. Differentiable in `x`.
pub fn bilinear_resize<T: Element>(x: &Tensor<T>, ho: usize, wo: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let ytaps = resize_taps(ho, h);
    let xtaps = resize_taps(wo, w);
    let buf = bilinear_resize_planes(
        x.data().as_slice().unwrap(),
        n * c,
        h,
        w,
        &ytaps,
        &xtaps,
        ho,
        wo,
    );
    let data = ArrayD::from_shape_vec(vec![n, c, ho, wo], buf).unwrap();
    Tensor::from_op(vec![x.clone()], data, move |_, g| {
        let gs = g.as_slice().unwrap();
        let mut gx = vec![T::zero(); n * c * h * w];
        gx.par_chunks_mut(h * w).enumerate().for_each(|(plane, dst)| {
            let src = &gs[plane * ho * wo..(plane + 1) * ho * wo];
            for yo in 0..ho {
                let (y0, y1, fy) = ytaps[yo];
                let wy0 = T::from_f64(1.0 - fy);
                let wy1 = T::from_f64(fy);
                for xo in 0..wo {
                    let (x0, x1, fx) = xtaps[xo];
                    let wx0 = T::from_f64(1.0 - fx);
                    let wx1 = T::from_f64(fx);
                    let gv = src[yo * wo + xo];
                    dst[y0 * w + x0] += gv * wy0 * wx0;
                    dst[y0 * w + x1] += gv * wy0 * wx1;
                    dst[y1 * w + x0] += gv * wy1 * wx0;
                    dst[y1 * w + x1] += gv * wy1 * wx1;
                }
            }
        });
        vec![Some(ArrayD::from_shape_vec(vec![n, c, h, w], gx).unwrap())]
    })
}

/// Resample `planes` independent HxW planes; shared by the tensor op and by
/// plain-array callers in the data pipeline.
#[allow(clippy::too_many_arguments)]
pub fn bilinear_resize_planes<T: Element>(
    xs: &[T],
    planes: usize,
    h: usize,
    w: usize,
    ytaps: &[(usize, usize, f64)],
    xtaps: &[(usize, usize, f64)],
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut buf = vec![T::zero(); planes * ho * wo];
    buf.par_chunks_mut(ho * wo).enumerate().for_each(|(plane, dst)| {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        for yo in 0..ho {
            let (y0, y1, fy) = ytaps[yo];
            let wy0 = T::from_f64(1.0 - fy);
            let wy1 = T::from_f64(fy);
            let d = &mut dst[yo * wo..(yo + 1) * wo];
            for (xo, dv) in d.iter_mut().enumerate() {
                let (x0, x1, fx) = xtaps[xo];
                let wx0 = T::from_f64(1.0 - fx);
                let wx1 = T::from_f64(fx);
                *dv = (src[y0 * w + x0] * wx0 + src[y0 * w + x1] * wx1) * wy0
                    + (src[y1 * w + x0] * wx0 + src[y1 * w + x1] * wx1) * wy1;
            }
        }
    });
    buf
}

/// Plain-array bilinear resize of one plane (half-pixel centres, clamped).
pub fn resize_plane<T: Element>(src: &[T], h: usize, w: usize, ho: usize, wo: usize) -> Vec<T> {
    let ytaps = resize_taps(ho, h);
    let xtaps = resize_taps(wo, w);
    bilinear_resize_planes(src, 1, h, w, &ytaps, &xtaps, ho, wo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;
    use ndarray::ArrayD;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Naive direct convolution for cross-checking.
    fn conv_naive(
        x: &ArrayD<f64>,
        wt: &ArrayD<f64>,
        b: &ArrayD<f64>,
        spec: Conv2dSpec,
    ) -> ArrayD<f64> {
        let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, _, kh, kw) = (wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]);
        let ho = spec.out_dim(h, kh);
        let wo = spec.out_dim(w, kw);
        let mut out = ArrayD::zeros(vec![n, cout, ho, wo]);
        for ni in 0..n {
            for co in 0..cout {
                for yo in 0..ho {
                    for xo in 0..wo {
                        let mut acc = b[[co]];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let yi = (yo * spec.stride + ky * spec.dilation) as isize
                                        - spec.padding as isize;
                                    let xi = (xo * spec.stride + kx * spec.dilation) as isize
                                        - spec.padding as isize;
                                    if yi >= 0 && yi < h as isize && xi >= 0 && xi < w as isize {
                                        acc += x[[ni, ci, yi as usize, xi as usize]]
                                            * wt[[co, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        out[[ni, co, yo, xo]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(stride, pad, dil) in &[(1usize, 1usize, 1usize), (2, 1, 1), (2, 2, 2), (1, 2, 2)] {
            let x = rand_arr(&[2, 3, 8, 10], &mut rng);
            let wt = rand_arr(&[4, 3, 3, 3], &mut rng);
            let b = rand_arr(&[4], &mut rng);
            let spec = Conv2dSpec::new(stride, pad, dil);
            let expect = conv_naive(&x, &wt, &b, spec);
            let got = conv2d(
                &Tensor::constant(x),
                &Tensor::constant(wt),
                &Tensor::constant(b),
                spec,
            );
            let diff = (&expect - got.data())
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-12, "stride={stride} pad={pad} dil={dil}: {diff}");
        }
    }

    #[test]
    fn conv_one_by_one_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_arr(&[2, 5, 4, 6], &mut rng);
        let wt = rand_arr(&[3, 5, 1, 1], &mut rng);
        let b = rand_arr(&[3], &mut rng);
        let spec = Conv2dSpec::new(1, 0, 1);
        let expect = conv_naive(&x, &wt, &b, spec);
        let got = conv2d(
            &Tensor::constant(x),
            &Tensor::constant(wt),
            &Tensor::constant(b),
            spec,
        );
        let diff = (&expect - got.data())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-12);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = rand_arr(&[1, 2, 6, 6], &mut rng);
        let w0 = rand_arr(&[3, 2, 3, 3], &mut rng);
        let b0 = rand_arr(&[3], &mut rng);
        let spec = Conv2dSpec::new(2, 2, 2);

        let loss = |x: &ArrayD<f64>, wt: &ArrayD<f64>, b: &ArrayD<f64>| -> f64 {
            let y = conv_naive(x, wt, b, spec);
            y.iter().map(|v| v * v).sum()
        };

        let x = Tensor::leaf(x0.clone());
        let wt = Tensor::leaf(w0.clone());
        let b = Tensor::leaf(b0.clone());
        let y = conv2d(&x, &wt, &b, spec);
        let l = y.mul(&y).sum_all();
        let grads = backward(&l);

        let eps = 1e-5;
        for (tensor, arr) in [(&x, &x0), (&wt, &w0), (&b, &b0)] {
            let ga = grads.wrt(tensor).unwrap();
            let mut max_rel: f64 = 0.0;
            for idx in 0..arr.len() {
                let mut plus = arr.clone();
                let mut minus = arr.clone();
                plus.as_slice_mut().unwrap()[idx] += eps;
                minus.as_slice_mut().unwrap()[idx] -= eps;
                let (lp, lm) = match tensor.id() {
                    i if i == x.id() => (loss(&plus, &w0, &b0), loss(&minus, &w0, &b0)),
                    i if i == wt.id() => (loss(&x0, &plus, &b0), loss(&x0, &minus, &b0)),
                    _ => (loss(&x0, &w0, &plus), loss(&x0, &w0, &minus)),
                };
                let fd = (lp - lm) / (2.0 * eps);
                let an = ga.as_slice().unwrap()[idx];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
            assert!(max_rel < 1e-4, "max rel err {max_rel}");
        }
    }

    #[test]
    fn avg_pool_and_resize_shapes() {
        let x = Tensor::<f64>::constant(ArrayD::from_elem(vec![1, 2, 4, 6], 0.5));
        let p = avg_pool2(&x);
        assert_eq!(p.shape(), &[1, 2, 2, 3]);
        assert!(p.data().iter().all(|&v| v == 0.5));

        let up = bilinear_resize(&x, 8, 12);
        assert_eq!(up.shape(), &[1, 2, 8, 12]);
        assert!(up.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn resize_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_arr(&[1, 1, 3, 4], &mut rng);
        let x = Tensor::leaf(x0.clone());
        let y = bilinear_resize(&x, 6, 8);
        let l = y.mul(&y).sum_all();
        let grads = backward(&l);
        let ga = grads.wrt(&x).unwrap();

        let loss = |arr: &ArrayD<f64>| {
            let t = Tensor::constant(arr.clone());
            let y = bilinear_resize(&t, 6, 8);
            y.data().iter().map(|v| v * v).sum::<f64>()
        };
        let eps = 1e-6;
        for idx in 0..x0.len() {
            let mut plus = x0.clone();
            let mut minus = x0.clone();
            plus.as_slice_mut().unwrap()[idx] += eps;
            minus.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let an = ga.as_slice().unwrap()[idx];
            assert!(
                (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8) < 1e-4,
                "idx {idx}: analytic {an} vs fd {fd}"
            );
        }
    }
}
