//! Pure differentiable kernels shared by the network and the losses.
//!
//! Tensor layout is NCHW throughout. Flow tensors are [N, 2, H, W] with
//! channel 0 = u (x displacement) and channel 1 = v (y displacement), in
//! pixels of their own grid, under the backward-warping convention.

mod corr;
mod occlusion;
mod photometric;
mod upsample;
mod warp;

pub use corr::correlation_volume;
pub use occlusion::{occlusion_from_fb, OCC_A1, OCC_A2};
pub use photometric::{
    box3, census_loss, grayscale, l1_loss, shift, ssim_loss, weighted_mean, LossValue,
    EPS_SUPPORT, SSIM_C1, SSIM_C2,
};
pub use upsample::{convex_upsample, UPSAMPLE_FACTOR, UPSAMPLE_MASK_CHANNELS};
pub use warp::warp_backward;

use crate::error::{Error, Result};
use semarflow_autograd::{avg_pool2, Element, Tensor};

/// Out-of-range sampling policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Out-of-range taps contribute zero.
    Zeros,
    /// Coordinates are clamped to the border.
    Border,
}

/// Image pyramid by repeated 2x2 average pooling. Element 0 is the input;
/// element k has resolution (H/2^k, W/2^k).
pub fn build_pyramid<T: Element>(img: &Tensor<T>, levels: usize) -> Result<Vec<Tensor<T>>> {
    if levels < 1 {
        return Err(Error::dimension("levels", "pyramid needs at least 1 level"));
    }
    let (_, _, h, w) = img.dims4();
    let div = 1usize << (levels - 1);
    if h % div != 0 {
        return Err(Error::dimension(
            "height",
            format!("{h} not divisible by {div} for {levels} levels"),
        ));
    }
    if w % div != 0 {
        return Err(Error::dimension(
            "width",
            format!("{w} not divisible by {div} for {levels} levels"),
        ));
    }
    let mut out = Vec::with_capacity(levels);
    out.push(img.clone());
    for _ in 1..levels {
        let next = avg_pool2(out.last().unwrap());
        out.push(next);
    }
    Ok(out)
}

pub(crate) fn expect_same_nhw<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    what: &str,
) -> Result<()> {
    let (na, _, ha, wa) = a.dims4();
    let (nb, _, hb, wb) = b.dims4();
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::dimension(
            "height/width",
            format!(
                "{what}: {:?} vs {:?} disagree on batch or resolution",
                a.shape(),
                b.shape()
            ),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn pyramid_of_constant_stays_constant() {
        let img = Tensor::<f64>::constant(ArrayD::from_elem(vec![1, 3, 8, 8], 0.5));
        let pyr = build_pyramid(&img, 3).unwrap();
        assert_eq!(pyr.len(), 3);
        assert_eq!(pyr[0].shape(), &[1, 3, 8, 8]);
        assert_eq!(pyr[1].shape(), &[1, 3, 4, 4]);
        assert_eq!(pyr[2].shape(), &[1, 3, 2, 2]);
        for p in &pyr {
            assert!(p.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn pyramid_of_checkerboard_averages_to_half() {
        // 8x8 checkerboard of 0/1 at period 1: every 2x2 cell holds two ones
        // and two zeros, so level 1 is constant 0.5.
        let data = ArrayD::from_shape_fn(vec![1, 1, 8, 8], |ix| {
            let (y, x) = (ix[2], ix[3]);
            ((y + x) % 2) as f64
        });
        let pyr = build_pyramid(&Tensor::constant(data), 2).unwrap();
        assert!(pyr[1].data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn pyramid_rejects_non_divisible_height() {
        let img = Tensor::<f64>::constant(ArrayD::zeros(vec![1, 1, 6, 8]));
        let err = build_pyramid(&img, 3).unwrap_err();
        match err {
            Error::Dimension { axis, .. } => assert_eq!(axis, "height"),
            other => panic!("expected dimension error, got {other}"),
        }
    }
}
