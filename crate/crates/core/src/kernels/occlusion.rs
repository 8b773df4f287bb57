//! Forward-backward consistency occlusion estimation.
//!
//! The mask is binary and therefore not differentiable; it enters the losses
//! as a constant weight.

use crate::error::{Error, Result};
use ndarray::ArrayD;
use rayon::prelude::*;
use semarflow_autograd::Element;

/// Default consistency thresholds (the standard values of the
/// forward-backward check; see the module notes in the README).
pub const OCC_A1: f64 = 0.01;
pub const OCC_A2: f64 = 0.5;

/// Mark pixel p occluded (1) iff
/// `||fw(p) + bw(p + fw(p))||^2 > a1 * (||fw(p)||^2 + ||bw(p + fw(p))||^2) + a2`,
/// with `bw` sampled bilinearly at border-clamped coordinates.
///
/// `fw`, `bw` are [N, 2, H, W]; the result is [N, 1, H, W] with values in
/// {0, 1}.
pub fn occlusion_from_fb<T: Element>(
    fw: &ArrayD<T>,
    bw: &ArrayD<T>,
    a1: f64,
    a2: f64,
) -> Result<ArrayD<T>> {
    if fw.shape() != bw.shape() {
        return Err(Error::dimension(
            "height/width",
            format!(
                "forward {:?} and backward {:?} flows disagree",
                fw.shape(),
                bw.shape()
            ),
        ));
    }
    let (n, c, h, w) = (fw.shape()[0], fw.shape()[1], fw.shape()[2], fw.shape()[3]);
    assert_eq!(c, 2, "flow tensors must have 2 channels");
    let fws = fw.as_slice().unwrap();
    let bws = bw.as_slice().unwrap();

    let mut out = vec![T::zero(); n * h * w];
    out.par_chunks_mut(h * w).enumerate().for_each(|(ni, dst)| {
        let fu = &fws[ni * 2 * h * w..ni * 2 * h * w + h * w];
        let fv = &fws[ni * 2 * h * w + h * w..(ni + 1) * 2 * h * w];
        let bu = &bws[ni * 2 * h * w..ni * 2 * h * w + h * w];
        let bv = &bws[ni * 2 * h * w + h * w..(ni + 1) * 2 * h * w];
        for y in 0..h {
            for x in 0..w {
                let pix = y * w + x;
                let u = fu[pix].as_f64();
                let v = fv[pix].as_f64();
                let bx = sample_border(bu, h, w, x as f64 + u, y as f64 + v);
                let by = sample_border(bv, h, w, x as f64 + u, y as f64 + v);
                let sum_sq = (u + bx).powi(2) + (v + by).powi(2);
                let mag_sq = u * u + v * v + bx * bx + by * by;
                if sum_sq > a1 * mag_sq + a2 {
                    dst[pix] = T::one();
                }
            }
        }
    });
    Ok(ArrayD::from_shape_vec(vec![n, 1, h, w], out).unwrap())
}

fn sample_border<T: Element>(plane: &[T], h: usize, w: usize, sx: f64, sy: f64) -> f64 {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let cx = |v: f64| (v.max(0.0) as usize).min(w - 1);
    let cy = |v: f64| (v.max(0.0) as usize).min(h - 1);
    let (x0c, x1c) = (cx(x0), cx(x0 + 1.0));
    let (y0c, y1c) = (cy(y0), cy(y0 + 1.0));
    let v00 = plane[y0c * w + x0c].as_f64();
    let v01 = plane[y0c * w + x1c].as_f64();
    let v10 = plane[y1c * w + x0c].as_f64();
    let v11 = plane[y1c * w + x1c].as_f64();
    (v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy) + (v10 * (1.0 - fx) + v11 * fx) * fy
}
