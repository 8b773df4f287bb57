//! The training loss stack: multi-scale bidirectional occlusion-masked
//! photometric loss, the two self-supervision losses of the augmentation
//! passes, the scheduled total, and an optional smoothness term kept for the
//! ablation switchboard.

use crate::error::Result;
use crate::kernels::{
    build_pyramid, census_loss, l1_loss, occlusion_from_fb, shift, ssim_loss, warp_backward,
    weighted_mean, Padding, EPS_SUPPORT, OCC_A1, OCC_A2,
};
use crate::model::{Direction, NetworkOutput};
use ndarray::ArrayD;
use semarflow_autograd::{Element, Tensor};
use serde::{Deserialize, Serialize};

/// Photometric-measure and augmentation weights (Eq.-level constants).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossWeights {
    /// Per-scale weights a_l for levels 2..6.
    pub level_weights: [f64; 5],
    /// Measure weights c_k for (L1, SSIM, census).
    pub measure_weights: [f64; 3],
    /// Weight of the self-supervision terms.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            level_weights: [1.0, 1.0, 1.0, 1.0, 0.0],
            measure_weights: [0.15, 0.85, 0.0],
            lambda: 0.02,
        }
    }
}

/// Iteration thresholds, expressed as fractions of the total run so toy
/// schedules keep the phase structure of the full-scale one.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    /// Switch from (0.15, 0.85, 0) to census-only (0, 0, 1).
    pub measure_switch_frac: f64,
    /// Appearance/spatial augmentation pass starts here.
    pub pass2_start_frac: f64,
    /// Semantic augmentation pass starts here.
    pub pass3_start_frac: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            measure_switch_frac: 0.25,
            pass2_start_frac: 0.25,
            pass3_start_frac: 0.75,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("measure_switch_frac", self.measure_switch_frac),
            ("pass2_start_frac", self.pass2_start_frac),
            ("pass3_start_frac", self.pass3_start_frac),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(crate::error::Error::Config(format!(
                    "{name} must be in [0, 1], got {v}"
                )));
            }
        }
        if self.pass3_start_frac < self.pass2_start_frac {
            return Err(crate::error::Error::Config(
                "pass3_start_frac must not precede pass2_start_frac".into(),
            ));
        }
        Ok(())
    }

    pub fn measure_weights(&self, iteration: u64, total: u64) -> [f64; 3] {
        if (iteration as f64) < self.measure_switch_frac * total as f64 {
            [0.15, 0.85, 0.0]
        } else {
            [0.0, 0.0, 1.0]
        }
    }

    pub fn pass2_active(&self, iteration: u64, total: u64) -> bool {
        iteration as f64 >= self.pass2_start_frac * total as f64
    }

    pub fn pass3_active(&self, iteration: u64, total: u64) -> bool {
        iteration as f64 >= self.pass3_start_frac * total as f64
    }
}

/// Occlusion-masked multi-scale photometric loss (both directions, halved).
///
/// For each level l with a_l > 0, the images are average-pooled to the
/// resolution of U^(l), the target frame is warped by U^(l), the occlusion
/// mask comes from forward-backward consistency at that resolution, and the
/// three measures combine with the c_k weights over non-occluded pixels.
pub fn photometric_loss<T: Element>(
    i1: &Tensor<T>,
    i2: &Tensor<T>,
    out: &NetworkOutput<T>,
    w: &LossWeights,
) -> Result<Tensor<T>> {
    let n = i1.shape()[0];
    let pyr1 = build_pyramid(i1, 5)?;
    let pyr2 = build_pyramid(i2, 5)?;
    let mut total = Tensor::constant(ArrayD::zeros(vec![1]));
    let [c1, c2, c3] = w.measure_weights;

    for l in 2..=6usize {
        let a_l = w.level_weights[l - 2];
        if a_l == 0.0 {
            continue;
        }
        let u_fw = out.flow(Direction::Forward, l);
        let u_bw = out.flow(Direction::Backward, l);
        let occ_fw = occlusion_from_fb(u_fw.data(), u_bw.data(), OCC_A1, OCC_A2)?;
        let occ_bw = occlusion_from_fb(u_bw.data(), u_fw.data(), OCC_A1, OCC_A2)?;
        let nonocc = Tensor::constant(ndarray::concatenate(
            ndarray::Axis(0),
            &[
                occ_fw.mapv(|v| T::one() - v).view(),
                occ_bw.mapv(|v| T::one() - v).view(),
            ],
        )
        .unwrap());

        // Both directions share one warp/measure evaluation as a doubled
        // batch; the per-direction means are taken separately below.
        let src = Tensor::concat_batch(&[pyr1[l - 2].clone(), pyr2[l - 2].clone()]);
        let tgt = Tensor::concat_batch(&[pyr2[l - 2].clone(), pyr1[l - 2].clone()]);
        let flow = Tensor::concat_batch(&[u_fw.clone(), u_bw.clone()]);
        let warped = warp_backward(&tgt, &flow, Padding::Border)?;

        let mut level_term = Tensor::constant(ArrayD::zeros(vec![1]));
        for dir in 0..2 {
            let s = src.slice_batch(dir * n, n);
            let wp = warped.slice_batch(dir * n, n);
            let nw = nonocc.slice_batch(dir * n, n);
            let mut dir_term = Tensor::constant(ArrayD::zeros(vec![1]));
            if c1 > 0.0 {
                dir_term = dir_term.add(&l1_loss(&s, &wp, &nw)?.value.scale(T::from_f64(c1)));
            }
            if c2 > 0.0 {
                dir_term = dir_term.add(&ssim_loss(&s, &wp, &nw)?.value.scale(T::from_f64(c2)));
            }
            if c3 > 0.0 {
                dir_term = dir_term.add(&census_loss(&s, &wp, &nw)?.value.scale(T::from_f64(c3)));
            }
            level_term = level_term.add(&dir_term);
        }
        total = total.add(&level_term.scale(T::from_f64(a_l)));
    }
    Ok(total.scale(T::from_f64(0.5)))
}

/// Per-pixel |u| + |v| of the difference against a stop-gradient target.
fn flow_l1_map<T: Element>(pred: &Tensor<T>, target: &ArrayD<T>) -> Tensor<T> {
    let t = Tensor::constant(target.clone());
    pred.sub(&t).abs().sum_channels()
}

/// Second-pass self-supervision: mean L1 distance to the transported
/// first-pass flow over its transported non-occluded region. Gradients reach
/// only `u_pred`; the target is a constant. Per-sample ratios are averaged
/// over the batch; a sample with empty support contributes zero and raises
/// the degenerate flag.
pub fn ar_loss<T: Element>(
    u_target: &ArrayD<T>,
    u_pred: &Tensor<T>,
    occ_target: &ArrayD<T>,
) -> (Tensor<T>, bool) {
    let n = u_pred.shape()[0];
    let d = flow_l1_map(u_pred, u_target);
    let support = Tensor::constant(occ_target.mapv(|v| T::one() - v));
    let mut acc = Tensor::constant(ArrayD::zeros(vec![1]));
    let mut degenerate = false;
    for i in 0..n {
        let lv = weighted_mean(&d.slice_batch(i, 1), &support.slice_batch(i, 1));
        degenerate |= lv.degenerate;
        acc = acc.add(&lv.value);
    }
    (acc.scale(T::from_f64(1.0 / n as f64)), degenerate)
}

/// Which pixels the third-pass loss covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossRegion {
    /// Originally non-occluded pixels plus the pasted mask:
    /// support = max(1 - O, M).
    FullSupport,
    /// Only the pasted mask (the "loss on new occ" ablation).
    NewOcclusionsOnly,
}

/// Third-pass self-supervision over the semantic-augmentation support.
pub fn semaug_loss<T: Element>(
    u_target: &ArrayD<T>,
    u_pred: &Tensor<T>,
    occ_orig: &ArrayD<T>,
    paste_mask: &ArrayD<T>,
    region: LossRegion,
) -> (Tensor<T>, bool) {
    let n = u_pred.shape()[0];
    let support_arr = match region {
        LossRegion::FullSupport => {
            let mut s = occ_orig.mapv(|v| T::one() - v);
            s.zip_mut_with(paste_mask, |sv, &mv| {
                if mv > *sv {
                    *sv = mv;
                }
            });
            s
        }
        LossRegion::NewOcclusionsOnly => paste_mask.clone(),
    };
    let d = flow_l1_map(u_pred, u_target);
    let support = Tensor::constant(support_arr);
    let mut acc = Tensor::constant(ArrayD::zeros(vec![1]));
    let mut degenerate = false;
    for i in 0..n {
        let lv = weighted_mean(&d.slice_batch(i, 1), &support.slice_batch(i, 1));
        degenerate |= lv.degenerate;
        acc = acc.add(&lv.value);
    }
    (acc.scale(T::from_f64(1.0 / n as f64)), degenerate)
}

/// Scheduled total: `l_ph + lambda * (l_ar + l_aug)`, with inactive passes
/// contributing exactly zero.
pub fn total_loss<T: Element>(
    l_ph: &Tensor<T>,
    l_ar: Option<&Tensor<T>>,
    l_aug: Option<&Tensor<T>>,
    w: &LossWeights,
) -> Tensor<T> {
    let mut extra: Option<Tensor<T>> = None;
    for term in [l_ar, l_aug].into_iter().flatten() {
        extra = Some(match extra {
            None => term.clone(),
            Some(e) => e.add(term),
        });
    }
    match extra {
        None => l_ph.clone(),
        Some(e) => l_ph.add(&e.scale(T::from_f64(w.lambda))),
    }
}

/// Edge-weighted second-order smoothness (ablation axis only; off by
/// default because it conflicts with the learned upsampler). The weight map
/// exp(-beta * ||grad I||_1) is a constant; second differences are taken on
/// interior pixels.
pub const SMOOTHNESS_BETA: f64 = 10.0;

pub fn smoothness_loss<T: Element>(u: &Tensor<T>, img: &Tensor<T>) -> Result<Tensor<T>> {
    crate::kernels::expect_same_nhw(u, img, "smoothness_loss")?;
    let (n, c, h, w) = img.dims4();
    let beta = T::from_f64(SMOOTHNESS_BETA);

    // stop-gradient edge weights
    let im = img.data();
    let mut wmap = ArrayD::zeros(vec![n, 1, h, w]);
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut g = T::zero();
                for ci in 0..c {
                    let v = im[[ni, ci, y, x]];
                    let vx = if x + 1 < w { im[[ni, ci, y, x + 1]] } else { v };
                    let vy = if y + 1 < h { im[[ni, ci, y + 1, x]] } else { v };
                    g += (vx - v).abs() + (vy - v).abs();
                }
                g = g / T::from_f64(c as f64);
                wmap[[ni, 0, y, x]] = (-beta * g).exp();
            }
        }
    }

    // interior masks kill the replicate-border artifacts of shift()
    let mut mask_x = ArrayD::zeros(vec![n, 1, h, w]);
    let mut mask_y = ArrayD::zeros(vec![n, 1, h, w]);
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                if x >= 1 && x + 1 < w {
                    mask_x[[ni, 0, y, x]] = T::one();
                }
                if y >= 1 && y + 1 < h {
                    mask_y[[ni, 0, y, x]] = T::one();
                }
            }
        }
    }
    let mask_x = Tensor::constant(mask_x);
    let mask_y = Tensor::constant(mask_y);

    let two = T::from_f64(2.0);
    let uxx = shift(u, 0, -1)
        .add(&shift(u, 0, 1))
        .sub(&u.scale(two))
        .abs()
        .sum_channels()
        .mul_mask(&mask_x);
    let uyy = shift(u, -1, 0)
        .add(&shift(u, 1, 0))
        .sub(&u.scale(two))
        .abs()
        .sum_channels()
        .mul_mask(&mask_y);
    let curvature = uxx.add(&uyy);
    let weighted = curvature.mul_mask(&Tensor::constant(wmap));
    Ok(weighted.sum_all().scale(T::from_f64(1.0 / (n * h * w) as f64)))
}

/// Support-mask helpers shared with the trainer.
pub fn occlusion_weights<T: Element>(occ: &ArrayD<T>) -> ArrayD<T> {
    occ.mapv(|v| T::one() - v)
}

pub const LOSS_EPS_SUPPORT: f64 = EPS_SUPPORT;
