//! Learned convex upsampling of flow fields.

use crate::error::{Error, Result};
use ndarray::ArrayD;
use rayon::prelude::*;
use semarflow_autograd::{Element, Tensor};

/// Fixed upsampling factor.
pub const UPSAMPLE_FACTOR: usize = 4;
/// 16 spatial sub-positions x 9 neighbor coefficients.
pub const UPSAMPLE_MASK_CHANNELS: usize = 144;

#[inline]
fn clamp_i(v: isize, len: usize) -> usize {
    v.clamp(0, len as isize - 1) as usize
}

/// Upsample `flow` [N, 2, H, W] to [N, 2, 4H, 4W]. Each fine pixel is a
/// softmax-convex combination of its coarse 3x3 neighborhood (borders
/// replicate-clamped so a constant field stays constant), scaled by 4 to
/// convert displacements to the fine grid. `mask` holds the 144-channel
/// logits: group g = i*4+j covers fine sub-position (i, j); within a group,
/// coefficient k = (dy+1)*3 + (dx+1).
pub fn convex_upsample<T: Element>(flow: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, cf, h, w) = flow.dims4();
    let (nm, cm, hm, wm) = mask.dims4();
    if cf != 2 {
        return Err(Error::dimension(
            "channels",
            format!("flow must have 2 channels, got {cf}"),
        ));
    }
    if cm != UPSAMPLE_MASK_CHANNELS {
        return Err(Error::dimension(
            "channels",
            format!("upsample mask must have {UPSAMPLE_MASK_CHANNELS} channels, got {cm}"),
        ));
    }
    if (nm, hm, wm) != (n, h, w) {
        return Err(Error::dimension(
            "height/width",
            format!(
                "mask {:?} does not match flow {:?}",
                mask.shape(),
                flow.shape()
            ),
        ));
    }

    let (ho, wo) = (UPSAMPLE_FACTOR * h, UPSAMPLE_FACTOR * w);
    let fl = flow.data().as_slice().unwrap();
    let mk = mask.data().as_slice().unwrap();
    let four = T::from_f64(4.0);

    // softmax coefficients, same layout as the mask; reused by backward
    let mut coefs = vec![T::zero(); n * UPSAMPLE_MASK_CHANNELS * h * w];
    coefs
        .par_chunks_mut(UPSAMPLE_MASK_CHANNELS * h * w)
        .enumerate()
        .for_each(|(ni, dst)| {
            let mbase = ni * UPSAMPLE_MASK_CHANNELS * h * w;
            let mut coef = [T::zero(); 9];
            for pix in 0..h * w {
                for group in 0..UPSAMPLE_FACTOR * UPSAMPLE_FACTOR {
                    softmax9(mk, mbase + group * 9 * h * w, h * w, pix, &mut coef);
                    for k in 0..9 {
                        dst[(group * 9 + k) * h * w + pix] = coef[k];
                    }
                }
            }
        });
    let coefs = std::sync::Arc::new(coefs);

    let mut out = vec![T::zero(); n * 2 * ho * wo];
    {
        let coefs = &coefs;
        out.par_chunks_mut(2 * ho * wo).enumerate().for_each(|(ni, dst)| {
            let cbase = ni * UPSAMPLE_MASK_CHANNELS * h * w;
            let fbase = ni * 2 * h * w;
            for y in 0..h {
                for x in 0..w {
                    let pix = y * w + x;
                    for gi in 0..UPSAMPLE_FACTOR {
                        for gj in 0..UPSAMPLE_FACTOR {
                            let group = gi * UPSAMPLE_FACTOR + gj;
                            let fy = UPSAMPLE_FACTOR * y + gi;
                            let fx = UPSAMPLE_FACTOR * x + gj;
                            for ch in 0..2 {
                                let src = &fl[fbase + ch * h * w..fbase + (ch + 1) * h * w];
                                let mut acc = T::zero();
                                for k in 0..9 {
                                    let c = coefs[cbase + (group * 9 + k) * h * w + pix];
                                    let dy = (k / 3) as isize - 1;
                                    let dx = (k % 3) as isize - 1;
                                    let yy = clamp_i(y as isize + dy, h);
                                    let xx = clamp_i(x as isize + dx, w);
                                    acc += c * src[yy * w + xx];
                                }
                                dst[ch * ho * wo + fy * wo + fx] = acc * four;
                            }
                        }
                    }
                }
            }
        });
    }
    let data = ArrayD::from_shape_vec(vec![n, 2, ho, wo], out).unwrap();

    Ok(Tensor::from_op(
        vec![flow.clone(), mask.clone()],
        data,
        move |node, g| {
            let fl = node.parent_data(0).as_slice().unwrap();
            let coefs = &coefs;
            let gs = g.as_slice().unwrap();
            let need_flow = node.parents()[0].needs_grad();
            let need_mask = node.parents()[1].needs_grad();

            let mut gflow = vec![T::zero(); if need_flow { n * 2 * h * w } else { 0 }];
            let mut gmask = vec![
                T::zero();
                if need_mask {
                    n * UPSAMPLE_MASK_CHANNELS * h * w
                } else {
                    0
                }
            ];
            let gf_chunks: Vec<_> = gflow.chunks_mut(2 * h * w).collect();
            let gm_chunks: Vec<_> = gmask.chunks_mut(UPSAMPLE_MASK_CHANNELS * h * w).collect();
            let mut per_batch: Vec<(usize, Option<&mut [T]>, Option<&mut [T]>)> = {
                let mut i1 = gf_chunks.into_iter();
                let mut i2 = gm_chunks.into_iter();
                (0..n).map(|ni| (ni, i1.next(), i2.next())).collect()
            };

            per_batch.par_iter_mut().for_each(|(ni, gf, gm)| {
                let ni = *ni;
                let cbase = ni * UPSAMPLE_MASK_CHANNELS * h * w;
                let fbase = ni * 2 * h * w;
                let gbase = ni * 2 * ho * wo;
                let mut coef = [T::zero(); 9];
                for y in 0..h {
                    for x in 0..w {
                        let pix = y * w + x;
                        for gi in 0..UPSAMPLE_FACTOR {
                            for gj in 0..UPSAMPLE_FACTOR {
                                let group = gi * UPSAMPLE_FACTOR + gj;
                                for (k, c) in coef.iter_mut().enumerate() {
                                    *c = coefs[cbase + (group * 9 + k) * h * w + pix];
                                }
                                let fy = UPSAMPLE_FACTOR * y + gi;
                                let fx = UPSAMPLE_FACTOR * x + gj;
                                // s[k] = sum over channels of g_out * 4 * flow(nbr_k)
                                let mut s = [T::zero(); 9];
                                for ch in 0..2 {
                                    let gv = gs[gbase + ch * ho * wo + fy * wo + fx];
                                    if gv == T::zero() {
                                        continue;
                                    }
                                    let src = &fl[fbase + ch * h * w..fbase + (ch + 1) * h * w];
                                    for k in 0..9 {
                                        let dy = (k / 3) as isize - 1;
                                        let dx = (k % 3) as isize - 1;
                                        let yy = clamp_i(y as isize + dy, h);
                                        let xx = clamp_i(x as isize + dx, w);
                                        s[k] += gv * four * src[yy * w + xx];
                                        if let Some(gf) = gf.as_deref_mut() {
                                            gf[ch * h * w + yy * w + xx] +=
                                                gv * four * coef[k];
                                        }
                                    }
                                }
                                if let Some(gm) = gm.as_deref_mut() {
                                    let dot: T =
                                        (0..9).map(|k| coef[k] * s[k]).fold(T::zero(), |a, b| a + b);
                                    for k in 0..9 {
                                        gm[(group * 9 + k) * h * w + pix] +=
                                            coef[k] * (s[k] - dot);
                                    }
                                }
                            }
                        }
                    }
                }
            });

            let gflow =
                need_flow.then(|| ArrayD::from_shape_vec(vec![n, 2, h, w], gflow).unwrap());
            let gmask = need_mask.then(|| {
                ArrayD::from_shape_vec(vec![n, UPSAMPLE_MASK_CHANNELS, h, w], gmask).unwrap()
            });
            vec![gflow, gmask]
        },
    ))
}

/// Numerically-stable softmax over the 9 logits of one group at one pixel.
/// Logit k for group g lives at channel g*9 + k.
#[inline]
fn softmax9<T: Element>(mask: &[T], group_base: usize, plane: usize, pix: usize, out: &mut [T; 9]) {
    let mut maxv = T::neg_infinity();
    for k in 0..9 {
        let v = mask[group_base + k * plane + pix];
        if v > maxv {
            maxv = v;
        }
    }
    let mut sum = T::zero();
    for k in 0..9 {
        let e = (mask[group_base + k * plane + pix] - maxv).exp();
        out[k] = e;
        sum += e;
    }
    for v in out.iter_mut() {
        *v = *v / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn constant_flow_upsamples_to_scaled_constant() {
        let flow = Tensor::<f64>::constant(ArrayD::from_elem(vec![1, 2, 3, 5], 2.0));
        let mask = Tensor::constant(ArrayD::from_shape_fn(vec![1, 144, 3, 5], |ix| {
            (ix[1] as f64 * 0.37).sin() // arbitrary logits
        }));
        let up = convex_upsample(&flow, &mask).unwrap();
        assert_eq!(up.shape(), &[1, 2, 12, 20]);
        for &v in up.data().iter() {
            assert!((v - 8.0).abs() < 1e-12, "expected 8.0, got {v}");
        }
    }

    #[test]
    fn equal_logits_yield_uniform_coefficients() {
        let mask = vec![0.3f64; 9];
        let mut coef = [0.0; 9];
        softmax9(&mask, 0, 1, 0, &mut coef);
        for c in coef {
            assert!((c - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn paper_level6_shape() {
        let flow = Tensor::<f64>::constant(ArrayD::zeros(vec![1, 2, 4, 13]));
        let mask = Tensor::constant(ArrayD::zeros(vec![1, 144, 4, 13]));
        let up = convex_upsample(&flow, &mask).unwrap();
        assert_eq!(up.shape(), &[1, 2, 16, 52]);
    }

    #[test]
    fn wrong_mask_channel_count_is_rejected() {
        let flow = Tensor::<f64>::constant(ArrayD::zeros(vec![1, 2, 4, 4]));
        let mask = Tensor::constant(ArrayD::zeros(vec![1, 143, 4, 4]));
        assert!(convex_upsample(&flow, &mask).is_err());
    }
}
