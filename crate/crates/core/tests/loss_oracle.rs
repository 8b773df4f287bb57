//! Loop-based oracle implementations of every loss, compared against the
//! production path at 1e-10 relative tolerance on random 16x16 samples.
//! The oracle shares no code with the implementation under test.

use ndarray::ArrayD;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use semarflow_autograd::Tensor;
use semarflow_core::losses::{
    ar_loss, photometric_loss, semaug_loss, total_loss, LossRegion, LossWeights,
};
use semarflow_core::model::NetworkOutput;

const EPS: f64 = 1e-6;

// ---------------------------------------------------------------------------
// oracle building blocks (plain loops over [C][H][W] vectors)
// ---------------------------------------------------------------------------

#[derive(Clone)]
struct Plane {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }
    fn getc(&self, c: usize, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.get(c, y, x)
    }
}

fn avg_pool(p: &Plane) -> Plane {
    let (h, w) = (p.h / 2, p.w / 2);
    let mut v = vec![0.0; p.c * h * w];
    for c in 0..p.c {
        for y in 0..h {
            for x in 0..w {
                v[(c * h + y) * w + x] = 0.25
                    * (p.get(c, 2 * y, 2 * x)
                        + p.get(c, 2 * y, 2 * x + 1)
                        + p.get(c, 2 * y + 1, 2 * x)
                        + p.get(c, 2 * y + 1, 2 * x + 1));
            }
        }
    }
    Plane { c: p.c, h, w, v }
}

/// Bilinear sample with border clamping.
fn sample_border(p: &Plane, c: usize, sy: f64, sx: f64) -> f64 {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let v00 = p.getc(c, y0 as isize, x0 as isize);
    let v01 = p.getc(c, y0 as isize, x0 as isize + 1);
    let v10 = p.getc(c, y0 as isize + 1, x0 as isize);
    let v11 = p.getc(c, y0 as isize + 1, x0 as isize + 1);
    (v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy) + (v10 * (1.0 - fx) + v11 * fx) * fy
}

/// Backward warp with border padding: out(p) = img(p + flow(p)).
fn warp(img: &Plane, flow: &Plane) -> Plane {
    let mut out = img.clone();
    for c in 0..img.c {
        for y in 0..img.h {
            for x in 0..img.w {
                let u = flow.get(0, y, x);
                let v = flow.get(1, y, x);
                out.v[(c * img.h + y) * img.w + x] =
                    sample_border(img, c, y as f64 + v, x as f64 + u);
            }
        }
    }
    out
}

/// Forward-backward occlusion mask (1 = occluded).
fn occlusion(fw: &Plane, bw: &Plane) -> Vec<f64> {
    let (h, w) = (fw.h, fw.w);
    let mut occ = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let u = fw.get(0, y, x);
            let v = fw.get(1, y, x);
            let bu = sample_border(bw, 0, y as f64 + v, x as f64 + u);
            let bv = sample_border(bw, 1, y as f64 + v, x as f64 + u);
            let sum_sq = (u + bu).powi(2) + (v + bv).powi(2);
            let mag = u * u + v * v + bu * bu + bv * bv;
            if sum_sq > 0.01 * mag + 0.5 {
                occ[y * w + x] = 1.0;
            }
        }
    }
    occ
}

fn weighted_mean(map: &[f64], wts: &[f64]) -> f64 {
    let num: f64 = map.iter().zip(wts).map(|(m, w)| m * w).sum();
    let den: f64 = wts.iter().sum();
    num / den.max(EPS)
}

fn rho_l1(a: &Plane, b: &Plane, wts: &[f64]) -> f64 {
    let mut map = vec![0.0; a.h * a.w];
    for y in 0..a.h {
        for x in 0..a.w {
            let mut acc = 0.0;
            for c in 0..a.c {
                acc += (a.get(c, y, x) - b.get(c, y, x)).abs();
            }
            map[y * a.w + x] = acc / a.c as f64;
        }
    }
    weighted_mean(&map, wts)
}

fn box3(p: &Plane, c: usize, y: usize, x: usize) -> f64 {
    let mut acc = 0.0;
    for dy in -1..=1 {
        for dx in -1..=1 {
            acc += p.getc(c, y as isize + dy, x as isize + dx);
        }
    }
    acc / 9.0
}

fn rho_ssim(a: &Plane, b: &Plane, wts: &[f64]) -> f64 {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let sq = |p: &Plane| {
        let mut q = p.clone();
        for v in q.v.iter_mut() {
            *v = *v * *v;
        }
        q
    };
    let prod = {
        let mut q = a.clone();
        for (v, bv) in q.v.iter_mut().zip(&b.v) {
            *v *= bv;
        }
        q
    };
    let aa = sq(a);
    let bb = sq(b);
    let mut map = vec![0.0; a.h * a.w];
    for y in 0..a.h {
        for x in 0..a.w {
            let mut acc = 0.0;
            for c in 0..a.c {
                let mu_a = box3(a, c, y, x);
                let mu_b = box3(b, c, y, x);
                let var_a = box3(&aa, c, y, x) - mu_a * mu_a;
                let var_b = box3(&bb, c, y, x) - mu_b * mu_b;
                let cov = box3(&prod, c, y, x) - mu_a * mu_b;
                let ssim = ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
                    / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2));
                acc += (1.0 - ssim) / 2.0;
            }
            map[y * a.w + x] = acc / a.c as f64;
        }
    }
    weighted_mean(&map, wts)
}

fn census_transform(p: &Plane) -> Vec<f64> {
    // grayscale * 255, then 7x7 soft ternary signature per pixel
    let (h, w) = (p.h, p.w);
    let mut gray = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            gray[y * w + x] = (p.get(0, y, x) + p.get(1, y, x) + p.get(2, y, x)) / 3.0 * 255.0;
        }
    }
    let mut sig = vec![0.0; h * w * 49];
    for y in 0..h {
        for x in 0..w {
            let center = gray[y * w + x];
            let mut k = 0;
            for dy in -3isize..=3 {
                for dx in -3isize..=3 {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    let d = gray[yy * w + xx] - center;
                    sig[(y * w + x) * 49 + k] = d / (0.81 + d * d).sqrt();
                    k += 1;
                }
            }
        }
    }
    sig
}

fn rho_census(a: &Plane, b: &Plane, wts: &[f64]) -> f64 {
    let sa = census_transform(a);
    let sb = census_transform(b);
    let mut map = vec![0.0; a.h * a.w];
    for (i, m) in map.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in 0..49 {
            let q = sa[i * 49 + k] - sb[i * 49 + k];
            acc += q * q / (0.1 + q * q);
        }
        *m = acc;
    }
    weighted_mean(&map, wts)
}

/// Direct evaluation of the photometric sum over directions, scales, and
/// measures, halved.
fn oracle_photometric(
    i1: &Plane,
    i2: &Plane,
    u_fw: &[Plane],
    u_bw: &[Plane],
    a: &[f64; 5],
    c: &[f64; 3],
) -> f64 {
    let mut total = 0.0;
    for (src0, tgt0, flows, backs) in [(i1, i2, u_fw, u_bw), (i2, i1, u_bw, u_fw)] {
        let mut src = src0.clone();
        let mut tgt = tgt0.clone();
        for (li, l) in (2..=6usize).enumerate() {
            if li > 0 {
                src = avg_pool(&src);
                tgt = avg_pool(&tgt);
            }
            if a[li] == 0.0 {
                continue;
            }
            let flow = &flows[l - 2];
            let occ = occlusion(flow, &backs[l - 2]);
            let wts: Vec<f64> = occ.iter().map(|o| 1.0 - o).collect();
            let warped = warp(&tgt, flow);
            let mut term = 0.0;
            if c[0] > 0.0 {
                term += c[0] * rho_l1(&src, &warped, &wts);
            }
            if c[1] > 0.0 {
                term += c[1] * rho_ssim(&src, &warped, &wts);
            }
            if c[2] > 0.0 {
                term += c[2] * rho_census(&src, &warped, &wts);
            }
            total += a[li] * term;
        }
    }
    0.5 * total
}

fn oracle_self_supervision(target: &Plane, pred: &Plane, support: &[f64]) -> f64 {
    let mut num = 0.0;
    for y in 0..target.h {
        for x in 0..target.w {
            let d = (target.get(0, y, x) - pred.get(0, y, x)).abs()
                + (target.get(1, y, x) - pred.get(1, y, x)).abs();
            num += support[y * target.w + x] * d;
        }
    }
    num / support.iter().sum::<f64>().max(EPS)
}

// ---------------------------------------------------------------------------
// fixtures
// ---------------------------------------------------------------------------

fn rand_plane(c: usize, h: usize, w: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Plane {
    Plane {
        c,
        h,
        w,
        v: (0..c * h * w).map(|_| rng.random_range(lo..hi)).collect(),
    }
}

fn to_tensor(p: &Plane) -> Tensor<f64> {
    Tensor::constant(ArrayD::from_shape_vec(vec![1, p.c, p.h, p.w], p.v.clone()).unwrap())
}

fn to_array(p: &Plane) -> ArrayD<f64> {
    ArrayD::from_shape_vec(vec![1, p.c, p.h, p.w], p.v.clone()).unwrap()
}

fn rel_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1.0)
}

// ---------------------------------------------------------------------------
// the checks
// ---------------------------------------------------------------------------

#[test]
fn photometric_matches_oracle_for_both_measure_phases() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (h, w) = (16usize, 16usize);
    for trial in 0..3 {
        let i1 = rand_plane(3, h, w, 0.0, 1.0, &mut rng);
        let i2 = rand_plane(3, h, w, 0.0, 1.0, &mut rng);
        let mut u_fw = Vec::new();
        let mut u_bw = Vec::new();
        for l in 2..=6usize {
            let (lh, lw) = (h >> (l - 2), w >> (l - 2));
            u_fw.push(rand_plane(2, lh, lw, -2.0, 2.0, &mut rng));
            u_bw.push(rand_plane(2, lh, lw, -2.0, 2.0, &mut rng));
        }
        let out = NetworkOutput {
            u_fw: u_fw.iter().map(to_tensor).collect(),
            u_bw: u_bw.iter().map(to_tensor).collect(),
        };
        for measures in [[0.15, 0.85, 0.0], [0.0, 0.0, 1.0], [0.3, 0.3, 0.4]] {
            let weights = LossWeights {
                level_weights: [1.0, 1.0, 1.0, 1.0, 0.0],
                measure_weights: measures,
                lambda: 0.02,
            };
            let got = photometric_loss(&to_tensor(&i1), &to_tensor(&i2), &out, &weights)
                .unwrap()
                .item();
            let expect = oracle_photometric(
                &i1,
                &i2,
                &u_fw,
                &u_bw,
                &weights.level_weights,
                &measures,
            );
            assert!(
                rel_close(got, expect),
                "trial {trial} measures {measures:?}: {got} vs {expect}"
            );
        }
    }
}

#[test]
fn ar_loss_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..5 {
        let target = rand_plane(2, 16, 16, -3.0, 3.0, &mut rng);
        let pred = rand_plane(2, 16, 16, -3.0, 3.0, &mut rng);
        let occ = Plane {
            c: 1,
            h: 16,
            w: 16,
            v: (0..256)
                .map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 })
                .collect(),
        };
        let support: Vec<f64> = occ.v.iter().map(|o| 1.0 - o).collect();
        let (got, _) = ar_loss(&to_array(&target), &to_tensor(&pred), &to_array(&occ));
        let expect = oracle_self_supervision(&target, &pred, &support);
        assert!(rel_close(got.item(), expect), "{} vs {expect}", got.item());
    }
}

#[test]
fn semaug_loss_matches_oracle_with_max_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..5 {
        let target = rand_plane(2, 16, 16, -3.0, 3.0, &mut rng);
        let pred = rand_plane(2, 16, 16, -3.0, 3.0, &mut rng);
        let occ = Plane {
            c: 1,
            h: 16,
            w: 16,
            v: (0..256)
                .map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
                .collect(),
        };
        let mask = Plane {
            c: 1,
            h: 16,
            w: 16,
            v: (0..256)
                .map(|_| if rng.random_bool(0.2) { 1.0 } else { 0.0 })
                .collect(),
        };
        // support = max(1 - O, M); equivalently 1 - (1 - max(1 - O, M))
        let support: Vec<f64> = occ
            .v
            .iter()
            .zip(&mask.v)
            .map(|(o, m)| (1.0 - o).max(*m))
            .collect();
        let (got, _) = semaug_loss(
            &to_array(&target),
            &to_tensor(&pred),
            &to_array(&occ),
            &to_array(&mask),
            LossRegion::FullSupport,
        );
        let expect = oracle_self_supervision(&target, &pred, &support);
        assert!(rel_close(got.item(), expect), "{} vs {expect}", got.item());
    }
}

#[test]
fn total_matches_eq5_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..10 {
        let ph = rng.random_range(0.0..2.0);
        let ar = rng.random_range(0.0..2.0);
        let aug = rng.random_range(0.0..2.0);
        let w = LossWeights::default();
        let t = |v: f64| Tensor::constant(ArrayD::from_elem(vec![1], v));
        let got = total_loss(&t(ph), Some(&t(ar)), Some(&t(aug)), &w).item();
        assert!(rel_close(got, ph + 0.02 * (ar + aug)));
        let got2 = total_loss(&t(ph), Some(&t(ar)), None, &w).item();
        assert!(rel_close(got2, ph + 0.02 * ar));
    }
}

#[test]
fn total_is_monotone_in_each_component() {
    let w = LossWeights::default();
    let t = |v: f64| Tensor::constant(ArrayD::from_elem(vec![1], v));
    let base = total_loss(&t(1.0), Some(&t(1.0)), Some(&t(1.0)), &w).item();
    assert!(total_loss(&t(1.5), Some(&t(1.0)), Some(&t(1.0)), &w).item() > base);
    assert!(total_loss(&t(1.0), Some(&t(1.5)), Some(&t(1.0)), &w).item() > base);
    assert!(total_loss(&t(1.0), Some(&t(1.0)), Some(&t(1.5)), &w).item() > base);
}
