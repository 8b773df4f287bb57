//! Photometric difference measures: L1, SSIM, and the soft ternary census
//! loss, each averaged over a stop-gradient per-pixel weight mask.

use crate::error::Result;
use ndarray::ArrayD;
use rayon::prelude::*;
use semarflow_autograd::{Element, Tensor};

/// Denominator guard for empty support masks.
pub const EPS_SUPPORT: f64 = 1e-6;
/// SSIM stabilizers for unit-range images.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Census transform saturation (applied to intensity differences on the
/// 255-scaled grayscale) and distance saturation.
const CENSUS_EPS: f64 = 0.81;
const CENSUS_DIST_EPS: f64 = 0.1;
const CENSUS_RADIUS: isize = 3; // 7x7 window

/// A loss value plus a degeneracy flag (raised when the support mask was
/// empty and the value fell back to zero).
pub struct LossValue<T: Element> {
    pub value: Tensor<T>,
    pub degenerate: bool,
}

/// Shifted copy: `out(y, x) = in(clamp(y + dy), clamp(x + dx))`.
pub fn shift<T: Element>(x: &Tensor<T>, dy: isize, dx: isize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let xs = x.data().as_slice().unwrap();
    let mut out = vec![T::zero(); n * c * h * w];
    out.par_chunks_mut(h * w).enumerate().for_each(|(plane, dst)| {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
            for x in 0..w {
                let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                dst[y * w + x] = src[sy * w + sx];
            }
        }
    });
    let data = ArrayD::from_shape_vec(vec![n, c, h, w], out).unwrap();
    Tensor::from_op(vec![x.clone()], data, move |_, g| {
        let gs = g.as_slice().unwrap();
        let mut gx = vec![T::zero(); n * c * h * w];
        gx.par_chunks_mut(h * w).enumerate().for_each(|(plane, dst)| {
            let src = &gs[plane * h * w..(plane + 1) * h * w];
            for y in 0..h {
                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for x in 0..w {
                    let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    dst[sy * w + sx] += src[y * w + x];
                }
            }
        });
        vec![Some(ArrayD::from_shape_vec(vec![n, c, h, w], gx).unwrap())]
    })
}

/// 3x3 box filter with replicate borders (keeps constants exact).
pub fn box3<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let ninth = T::from_f64(1.0 / 9.0);
    let mut acc: Option<Tensor<T>> = None;
    for dy in -1..=1 {
        for dx in -1..=1 {
            let s = shift(x, dy, dx);
            acc = Some(match acc {
                None => s,
                Some(a) => a.add(&s),
            });
        }
    }
    acc.unwrap().scale(ninth)
}

/// (r + g + b) / 3 of an [N, 3, H, W] image.
pub fn grayscale<T: Element>(img: &Tensor<T>) -> Tensor<T> {
    assert_eq!(img.shape()[1], 3, "grayscale expects 3 channels");
    let third = T::from_f64(1.0 / 3.0);
    img.slice_channels(0, 1)
        .add(&img.slice_channels(1, 1))
        .add(&img.slice_channels(2, 1))
        .scale(third)
}

/// Weighted mean over pixels: `sum(x * w) / max(sum(w), eps)`, with `w` a
/// stop-gradient [N, 1, H, W] mask in [0, 1].
pub fn weighted_mean<T: Element>(map: &Tensor<T>, weights: &Tensor<T>) -> LossValue<T> {
    let wsum: f64 = weights.data().iter().map(|v| v.as_f64()).sum();
    let degenerate = wsum <= 0.0;
    let denom = wsum.max(EPS_SUPPORT);
    let value = map
        .mul_mask(&weights.detach())
        .sum_all()
        .scale(T::from_f64(1.0 / denom));
    LossValue { value, degenerate }
}

/// Mean absolute difference over weighted pixels (channel-averaged).
pub fn l1_loss<T: Element>(a: &Tensor<T>, b: &Tensor<T>, nonocc: &Tensor<T>) -> Result<LossValue<T>> {
    super::expect_same_nhw(a, b, "l1_loss")?;
    let c = a.shape()[1];
    let per_pixel = a
        .sub(b)
        .abs()
        .sum_channels()
        .scale(T::from_f64(1.0 / c as f64));
    Ok(weighted_mean(&per_pixel, nonocc))
}

/// Mean of (1 - SSIM)/2 over weighted pixels, 3x3 box windows,
/// channel-averaged.
pub fn ssim_loss<T: Element>(a: &Tensor<T>, b: &Tensor<T>, nonocc: &Tensor<T>) -> Result<LossValue<T>> {
    super::expect_same_nhw(a, b, "ssim_loss")?;
    let c = a.shape()[1];
    let c1 = T::from_f64(SSIM_C1);
    let c2 = T::from_f64(SSIM_C2);
    let two = T::from_f64(2.0);

    let mu_a = box3(a);
    let mu_b = box3(b);
    let mu_aa = mu_a.mul(&mu_a);
    let mu_bb = mu_b.mul(&mu_b);
    let mu_ab = mu_a.mul(&mu_b);
    let var_a = box3(&a.mul(a)).sub(&mu_aa);
    let var_b = box3(&b.mul(b)).sub(&mu_bb);
    let cov = box3(&a.mul(b)).sub(&mu_ab);

    let num = mu_ab.scale(two).add_scalar(c1).mul(&cov.scale(two).add_scalar(c2));
    let den = mu_aa
        .add(&mu_bb)
        .add_scalar(c1)
        .mul(&var_a.add(&var_b).add_scalar(c2));
    let ssim = num.div(&den);
    let half = T::from_f64(0.5);
    let per_pixel = ssim
        .neg()
        .add_scalar(T::one())
        .scale(half)
        .sum_channels()
        .scale(T::from_f64(1.0 / c as f64));
    Ok(weighted_mean(&per_pixel, nonocc))
}

/// Soft ternary census loss over a 7x7 window.
///
/// Intensities are grayscale scaled by 255 (the saturation constant is
/// calibrated for that range). Per neighbor k: d_k = I(p + o_k) - I(p),
/// t_k = d_k / sqrt(0.81 + d_k^2); the per-pixel distance is
/// sum_k q_k^2 / (0.1 + q_k^2) with q_k = t_k(a) - t_k(b), then a weighted
/// mean over pixels.
pub fn census_loss<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    nonocc: &Tensor<T>,
) -> Result<LossValue<T>> {
    super::expect_same_nhw(a, b, "census_loss")?;
    let scale = T::from_f64(255.0);
    let ga = grayscale(a).scale(scale);
    let gb = grayscale(b).scale(scale);
    let dist = census_distance_map(&ga, &gb);
    Ok(weighted_mean(&dist, nonocc))
}

/// Per-pixel soft Hamming distance between the census transforms of two
/// single-channel images. Fused op with hand-derived backward.
fn census_distance_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = a.dims4();
    assert_eq!(c, 1);
    let asl = a.data().as_slice().unwrap();
    let bsl = b.data().as_slice().unwrap();

    let mut out = vec![T::zero(); n * h * w];
    out.par_chunks_mut(h * w).enumerate().for_each(|(ni, dst)| {
        let ap = &asl[ni * h * w..(ni + 1) * h * w];
        let bp = &bsl[ni * h * w..(ni + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let pix = y * w + x;
                let mut acc = 0.0f64;
                for dy in -CENSUS_RADIUS..=CENSUS_RADIUS {
                    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -CENSUS_RADIUS..=CENSUS_RADIUS {
                        let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        let da = ap[sy * w + sx].as_f64() - ap[pix].as_f64();
                        let db = bp[sy * w + sx].as_f64() - bp[pix].as_f64();
                        let ta = da / (CENSUS_EPS + da * da).sqrt();
                        let tb = db / (CENSUS_EPS + db * db).sqrt();
                        let q = ta - tb;
                        acc += q * q / (CENSUS_DIST_EPS + q * q);
                    }
                }
                dst[pix] = T::from_f64(acc);
            }
        }
    });
    let data = ArrayD::from_shape_vec(vec![n, 1, h, w], out).unwrap();

    Tensor::from_op(vec![a.clone(), b.clone()], data, move |node, g| {
        let asl = node.parent_data(0).as_slice().unwrap();
        let bsl = node.parent_data(1).as_slice().unwrap();
        let gs = g.as_slice().unwrap();
        let need_a = node.parents()[0].needs_grad();
        let need_b = node.parents()[1].needs_grad();
        let mut ga = vec![T::zero(); if need_a { n * h * w } else { 0 }];
        let mut gb = vec![T::zero(); if need_b { n * h * w } else { 0 }];

        let ga_chunks: Vec<_> = ga.chunks_mut(h * w).collect();
        let gb_chunks: Vec<_> = gb.chunks_mut(h * w).collect();
        let mut per_batch: Vec<(usize, Option<&mut [T]>, Option<&mut [T]>)> = {
            let mut i1 = ga_chunks.into_iter();
            let mut i2 = gb_chunks.into_iter();
            (0..n).map(|ni| (ni, i1.next(), i2.next())).collect()
        };

        per_batch.par_iter_mut().for_each(|(ni, ga, gb)| {
            let ni = *ni;
            let ap = &asl[ni * h * w..(ni + 1) * h * w];
            let bp = &bsl[ni * h * w..(ni + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let pix = y * w + x;
                    let gv = gs[ni * h * w + pix].as_f64();
                    if gv == 0.0 {
                        continue;
                    }
                    for dy in -CENSUS_RADIUS..=CENSUS_RADIUS {
                        let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        for dx in -CENSUS_RADIUS..=CENSUS_RADIUS {
                            let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                            let da = ap[sy * w + sx].as_f64() - ap[pix].as_f64();
                            let db = bp[sy * w + sx].as_f64() - bp[pix].as_f64();
                            let sa = (CENSUS_EPS + da * da).sqrt();
                            let sb = (CENSUS_EPS + db * db).sqrt();
                            let ta = da / sa;
                            let tb = db / sb;
                            let q = ta - tb;
                            let denom = CENSUS_DIST_EPS + q * q;
                            // d(q^2/(eps+q^2))/dq = 2*eps*q / (eps+q^2)^2
                            let dq = 2.0 * CENSUS_DIST_EPS * q / (denom * denom);
                            // dt/dd = eps_c / (eps_c + d^2)^(3/2)
                            let dta = CENSUS_EPS / (sa * sa * sa);
                            let dtb = CENSUS_EPS / (sb * sb * sb);
                            if let Some(ga) = ga.as_deref_mut() {
                                let v = T::from_f64(gv * dq * dta);
                                ga[sy * w + sx] += v;
                                ga[pix] -= v;
                            }
                            if let Some(gb) = gb.as_deref_mut() {
                                let v = T::from_f64(gv * dq * dtb);
                                gb[sy * w + sx] -= v;
                                gb[pix] += v;
                            }
                        }
                    }
                }
            }
        });

        let ga = need_a.then(|| ArrayD::from_shape_vec(vec![n, 1, h, w], ga).unwrap());
        let gb = need_b.then(|| ArrayD::from_shape_vec(vec![n, 1, h, w], gb).unwrap());
        vec![ga, gb]
    })
}
