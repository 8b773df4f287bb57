//! Differentiable backward warping by bilinear sampling.

use super::{expect_same_nhw, Padding};
use crate::error::{Error, Result};
use ndarray::ArrayD;
use rayon::prelude::*;
use semarflow_autograd::{Element, Tensor};

#[inline]
fn corners(s: f64, len: usize, padding: Padding) -> ((isize, isize), f64) {
    let i0 = s.floor();
    let frac = s - i0;
    let i0 = i0 as isize;
    let i1 = i0 + 1;
    match padding {
        Padding::Zeros => ((i0, i1), frac),
        Padding::Border => (
            (
                i0.clamp(0, len as isize - 1),
                i1.clamp(0, len as isize - 1),
            ),
            frac,
        ),
    }
}

#[inline]
fn tap<T: Element>(plane: &[T], w: usize, h: usize, y: isize, x: isize) -> T {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        T::zero()
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// `out(p) = field(p + flow(p))`, sampled bilinearly. Differentiable in both
/// the field and the flow. `field` is [N, C, H, W], `flow` is [N, 2, H, W].
pub fn warp_backward<T: Element>(
    field: &Tensor<T>,
    flow: &Tensor<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    expect_same_nhw(field, flow, "warp_backward")?;
    let (n, c, h, w) = field.dims4();
    if flow.shape()[1] != 2 {
        return Err(Error::dimension(
            "channels",
            format!("flow must have 2 channels, got {}", flow.shape()[1]),
        ));
    }

    let data = warp_forward(field.data(), flow.data(), n, c, h, w, padding);

    Ok(Tensor::from_op(
        vec![field.clone(), flow.clone()],
        data,
        move |node, g| {
            let fd = node.parent_data(0).as_slice().unwrap();
            let fl = node.parent_data(1).as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let need_field = node.parents()[0].needs_grad();
            let need_flow = node.parents()[1].needs_grad();

            let mut gfield = if need_field {
                vec![T::zero(); n * c * h * w]
            } else {
                Vec::new()
            };
            let mut gflow = if need_flow {
                vec![T::zero(); n * 2 * h * w]
            } else {
                Vec::new()
            };

            // batch items write disjoint regions
            let field_chunks: Vec<&mut [T]> = if need_field {
                gfield.chunks_mut(c * h * w).collect()
            } else {
                Vec::new()
            };
            let flow_chunks: Vec<&mut [T]> = if need_flow {
                gflow.chunks_mut(2 * h * w).collect()
            } else {
                Vec::new()
            };
            let mut zipped: Vec<(usize, Option<&mut [T]>, Option<&mut [T]>)> = {
                let mut fi = field_chunks.into_iter();
                let mut li = flow_chunks.into_iter();
                (0..n).map(|ni| (ni, fi.next(), li.next())).collect()
            };

            zipped.par_iter_mut().for_each(|(ni, gf, gl)| {
                let ni = *ni;
                let u_plane = &fl[ni * 2 * h * w..ni * 2 * h * w + h * w];
                let v_plane = &fl[ni * 2 * h * w + h * w..(ni + 1) * 2 * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let pix = y * w + x;
                        let sx = x as f64 + u_plane[pix].as_f64();
                        let sy = y as f64 + v_plane[pix].as_f64();
                        let ((x0, x1), fx) = corners(sx, w, padding);
                        let ((y0, y1), fy) = corners(sy, h, padding);
                        let wx0 = T::from_f64(1.0 - fx);
                        let wx1 = T::from_f64(fx);
                        let wy0 = T::from_f64(1.0 - fy);
                        let wy1 = T::from_f64(fy);

                        let mut du = T::zero();
                        let mut dv = T::zero();
                        for ci in 0..c {
                            let src = &fd[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                            let gv = gs[(ni * c + ci) * h * w + pix];
                            let v00 = tap(src, w, h, y0, x0);
                            let v01 = tap(src, w, h, y0, x1);
                            let v10 = tap(src, w, h, y1, x0);
                            let v11 = tap(src, w, h, y1, x1);
                            if let Some(gf) = gf.as_deref_mut() {
                                let dst = &mut gf[ci * h * w..(ci + 1) * h * w];
                                let mut add = |yy: isize, xx: isize, wgt: T| {
                                    if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                                        dst[yy as usize * w + xx as usize] += gv * wgt;
                                    }
                                };
                                add(y0, x0, wy0 * wx0);
                                add(y0, x1, wy0 * wx1);
                                add(y1, x0, wy1 * wx0);
                                add(y1, x1, wy1 * wx1);
                            }
                            // d(out)/d(sx) and d(out)/d(sy) of the bilinear form
                            du += gv * (wy0 * (v01 - v00) + wy1 * (v11 - v10));
                            dv += gv * (wx0 * (v10 - v00) + wx1 * (v11 - v01));
                        }
                        if let Some(gl) = gl.as_deref_mut() {
                            gl[pix] += du;
                            gl[h * w + pix] += dv;
                        }
                    }
                }
            });

            let gfield = need_field
                .then(|| ArrayD::from_shape_vec(vec![n, c, h, w], gfield).unwrap());
            let gflow =
                need_flow.then(|| ArrayD::from_shape_vec(vec![n, 2, h, w], gflow).unwrap());
            vec![gfield, gflow]
        },
    ))
}

pub(crate) fn warp_forward<T: Element>(
    field: &ArrayD<T>,
    flow: &ArrayD<T>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    padding: Padding,
) -> ArrayD<T> {
    let fd = field.as_slice().unwrap();
    let fl = flow.as_slice().unwrap();
    let mut out = vec![T::zero(); n * c * h * w];
    out.par_chunks_mut(c * h * w).enumerate().for_each(|(ni, dst)| {
        let u_plane = &fl[ni * 2 * h * w..ni * 2 * h * w + h * w];
        let v_plane = &fl[ni * 2 * h * w + h * w..(ni + 1) * 2 * h * w];
        for y in 0..h {
            for x in 0..w {
                let pix = y * w + x;
                let sx = x as f64 + u_plane[pix].as_f64();
                let sy = y as f64 + v_plane[pix].as_f64();
                let ((x0, x1), fx) = corners(sx, w, padding);
                let ((y0, y1), fy) = corners(sy, h, padding);
                let wx0 = T::from_f64(1.0 - fx);
                let wx1 = T::from_f64(fx);
                let wy0 = T::from_f64(1.0 - fy);
                let wy1 = T::from_f64(fy);
                for ci in 0..c {
                    let src = &fd[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    let v = (tap(src, w, h, y0, x0) * wx0 + tap(src, w, h, y0, x1) * wx1) * wy0
                        + (tap(src, w, h, y1, x0) * wx0 + tap(src, w, h, y1, x1) * wx1) * wy1;
                    dst[ci * h * w + pix] = v;
                }
            }
        }
    });
    ArrayD::from_shape_vec(vec![n, c, h, w], out).unwrap()
}
