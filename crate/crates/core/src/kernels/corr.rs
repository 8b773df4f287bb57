//! Local correlation cost volume.

use super::expect_same_nhw;
use crate::error::{Error, Result};
use ndarray::ArrayD;
use rayon::prelude::*;
use semarflow_autograd::{Element, Tensor};

/// Correlation scores between `f1(p)` and `f2(p + d)` for every offset with
/// `||d||_inf <= radius`, normalized by the channel count. Output channels
/// are row-major over d: dy from -r..r outer, dx inner. Out-of-range taps of
/// `f2` act as zero vectors.
pub fn correlation_volume<T: Element>(
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    radius: usize,
) -> Result<Tensor<T>> {
    expect_same_nhw(f1, f2, "correlation_volume")?;
    if f1.shape()[1] != f2.shape()[1] {
        return Err(Error::dimension(
            "channels",
            format!(
                "feature channel mismatch: {} vs {}",
                f1.shape()[1],
                f2.shape()[1]
            ),
        ));
    }
    let (n, c, h, w) = f1.dims4();
    let side = 2 * radius + 1;
    let d_count = side * side;
    let inv_c = T::from_f64(1.0 / c as f64);

    let a = f1.data().as_slice().unwrap();
    let b = f2.data().as_slice().unwrap();
    let mut out = vec![T::zero(); n * d_count * h * w];
    out.par_chunks_mut(d_count * h * w)
        .enumerate()
        .for_each(|(ni, dst)| {
            let abase = ni * c * h * w;
            for (di, (dy, dx)) in offsets(radius).enumerate() {
                let plane = &mut dst[di * h * w..(di + 1) * h * w];
                let (y_lo, y_hi) = shift_range(h, dy);
                let (x_lo, x_hi) = shift_range(w, dx);
                if y_lo >= y_hi || x_lo >= x_hi {
                    continue;
                }
                for ci in 0..c {
                    let ap = &a[abase + ci * h * w..abase + (ci + 1) * h * w];
                    let bp = &b[abase + ci * h * w..abase + (ci + 1) * h * w];
                    for y in y_lo..y_hi {
                        let sy = (y as isize + dy) as usize;
                        let arow = &ap[y * w + x_lo..y * w + x_hi];
                        let brow =
                            &bp[sy * w + (x_lo as isize + dx) as usize..][..x_hi - x_lo];
                        let orow = &mut plane[y * w + x_lo..y * w + x_hi];
                        for ((o, av), bv) in orow.iter_mut().zip(arow).zip(brow) {
                            *o += *av * *bv;
                        }
                    }
                }
                for v in plane.iter_mut() {
                    *v = *v * inv_c;
                }
            }
        });
    let data = ArrayD::from_shape_vec(vec![n, d_count, h, w], out).unwrap();

    Ok(Tensor::from_op(
        vec![f1.clone(), f2.clone()],
        data,
        move |node, g| {
            let a = node.parent_data(0).as_slice().unwrap();
            let b = node.parent_data(1).as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let need1 = node.parents()[0].needs_grad();
            let need2 = node.parents()[1].needs_grad();
            let mut g1 = vec![T::zero(); if need1 { n * c * h * w } else { 0 }];
            let mut g2 = vec![T::zero(); if need2 { n * c * h * w } else { 0 }];

            let g1_chunks: Vec<_> = g1.chunks_mut(c * h * w).collect();
            let g2_chunks: Vec<_> = g2.chunks_mut(c * h * w).collect();
            let mut per_batch: Vec<(usize, Option<&mut [T]>, Option<&mut [T]>)> = {
                let mut i1 = g1_chunks.into_iter();
                let mut i2 = g2_chunks.into_iter();
                (0..n).map(|ni| (ni, i1.next(), i2.next())).collect()
            };

            per_batch.par_iter_mut().for_each(|(ni, d1, d2)| {
                let ni = *ni;
                let base = ni * c * h * w;
                for (di, (dy, dx)) in offsets(radius).enumerate() {
                    let gplane = &gs[(ni * d_count + di) * h * w..(ni * d_count + di + 1) * h * w];
                    let (y_lo, y_hi) = shift_range(h, dy);
                    let (x_lo, x_hi) = shift_range(w, dx);
                    if y_lo >= y_hi || x_lo >= x_hi {
                        continue;
                    }
                    for ci in 0..c {
                        let co = ci * h * w;
                        for y in y_lo..y_hi {
                            let sy = (y as isize + dy) as usize;
                            let srow = (sy * w) as isize + dx;
                            let grow = &gplane[y * w + x_lo..y * w + x_hi];
                            if let Some(d1) = d1.as_deref_mut() {
                                let bp = &b[base + co..base + co + h * w];
                                let drow = &mut d1[co + y * w + x_lo..co + y * w + x_hi];
                                let brow = &bp[(srow + x_lo as isize) as usize..][..x_hi - x_lo];
                                for ((d, gv), bv) in drow.iter_mut().zip(grow).zip(brow) {
                                    *d += *gv * *bv * inv_c;
                                }
                            }
                            if let Some(d2) = d2.as_deref_mut() {
                                let ap = &a[base + co..base + co + h * w];
                                let arow = &ap[y * w + x_lo..y * w + x_hi];
                                let drow = &mut d2[(co as isize + srow + x_lo as isize) as usize..]
                                    [..x_hi - x_lo];
                                for ((d, gv), av) in drow.iter_mut().zip(grow).zip(arow) {
                                    *d += *gv * *av * inv_c;
                                }
                            }
                        }
                    }
                }
            });

            let g1 = need1.then(|| ArrayD::from_shape_vec(vec![n, c, h, w], g1).unwrap());
            let g2 = need2.then(|| ArrayD::from_shape_vec(vec![n, c, h, w], g2).unwrap());
            vec![g1, g2]
        },
    ))
}

/// Rows y with both y and y+shift in range: [lo, hi).
fn shift_range(len: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = ((len as isize - shift).min(len as isize)).max(0) as usize;
    (lo, hi)
}

fn offsets(radius: usize) -> impl Iterator<Item = (isize, isize)> {
    let r = radius as isize;
    (-r..=r).flat_map(move |dy| (-r..=r).map(move |dx| (dy, dx)))
}
