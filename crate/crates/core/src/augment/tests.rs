use super::*;
use crate::data::{generate_toy_scene, random_scene_spec, SceneGenParams};
use ndarray::Array3;
use rand::SeedableRng;

fn toy() -> (Sample, FlowField, OcclusionMask) {
    let spec = random_scene_spec(64, 128, 11, &SceneGenParams::default());
    let s = generate_toy_scene(&spec).unwrap();
    let flow = s.gt_flow.clone().unwrap();
    let occ = s.gt_occ.clone().unwrap();
    (s, flow, occ)
}

/// A blank canvas at the paper's reference width so the cutout thresholds
/// take their published values.
fn reference_sample() -> (Sample, FlowField) {
    let (h, w) = (256usize, 832usize);
    Sample {
        i1: Image::new(Array3::from_elem((3, h, w), 0.5)),
        i2: Image::new(Array3::from_elem((3, h, w), 0.5)),
        s1: SemanticMap::from_raw(Array2::zeros((h, w))),
        s2: SemanticMap::from_raw(Array2::zeros((h, w))),
        gt_flow: None,
        gt_valid: None,
        gt_occ: None,
        id: "ref".into(),
    }
    .pipe_with_flow()
}

trait Pipe {
    fn pipe_with_flow(self) -> (Sample, FlowField);
}
impl Pipe for Sample {
    fn pipe_with_flow(self) -> (Sample, FlowField) {
        let f = FlowField::new(Array3::from_shape_fn(
            (2, self.height(), self.width()),
            |(c, _, _)| if c == 0 { 3.0 } else { 0.5 },
        ));
        (self, f)
    }
}

fn paint_rect(sem: &mut SemanticMap, class: u8, x: usize, y: usize, w: usize, h: usize) {
    for yy in y..y + h {
        for xx in x..x + w {
            sem.ids[[yy, xx]] = class;
        }
    }
}

#[test]
fn identity_transform_preserves_targets() {
    let (s, flow, occ) = toy();
    let params = ArTransformParams {
        max_rotation_deg: 0.0,
        scale_range: (1.0, 1.0),
        appearance_jitter: 0.0,
        noise_sigma_max: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = arflow_transform(&s, &flow, &occ, &params, &mut rng).unwrap();
    for y in 0..s.height() {
        for x in 0..s.width() {
            assert!((t.u_target.data[[0, y, x]] - flow.data[[0, y, x]]).abs() < 1e-5);
            assert!((t.u_target.data[[1, y, x]] - flow.data[[1, y, x]]).abs() < 1e-5);
            assert_eq!(t.occ_target.data[[y, x]], occ.data[[y, x]]);
        }
    }
    assert_eq!(t.s1.ids, s.s1.ids);
}

#[test]
fn pure_scaling_transports_flow_by_the_coordinate_map() {
    let (s, _, occ) = toy();
    let (h, w) = (s.height(), s.width());
    // a spatially varying flow so resampling matters
    let flow = FlowField::new(Array3::from_shape_fn((2, h, w), |(c, y, x)| {
        if c == 0 {
            0.05 * x as f32
        } else {
            0.03 * y as f32
        }
    }));
    let params = ArTransformParams {
        max_rotation_deg: 0.0,
        scale_range: (1.1, 1.1),
        appearance_jitter: 0.0,
        noise_sigma_max: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = arflow_transform(&s, &flow, &occ, &params, &mut rng).unwrap();

    // direct coordinate-map oracle: u'(p') = 1.1 * u(T^-1 p')
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    for y in (4..h - 4).step_by(7) {
        for x in (4..w - 4).step_by(11) {
            let sx = (x as f64 - cx) / 1.1 + cx;
            let sy = (y as f64 - cy) / 1.1 + cy;
            // bilinear of the linear ramp equals the ramp itself
            let expect_u = 1.1 * 0.05 * sx;
            let expect_v = 1.1 * 0.03 * sy;
            assert!(
                (t.u_target.data[[0, y, x]] as f64 - expect_u).abs() < 1e-4,
                "u at ({y},{x})"
            );
            assert!(
                (t.u_target.data[[1, y, x]] as f64 - expect_v).abs() < 1e-4,
                "v at ({y},{x})"
            );
        }
    }
}

#[test]
fn transform_keeps_the_label_set_closed() {
    let (s, flow, occ) = toy();
    let params = ArTransformParams::default();
    for seed in 0..8 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = arflow_transform(&s, &flow, &occ, &params, &mut rng).unwrap();
        assert!(t.s1.is_valid());
        assert!(t.s2.is_valid());
        assert!(t.i1.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn vehicle_cutout_acceptance_thresholds() {
    // accepted: 100x80 bbox, fill 1.0 (rectangle)
    let (mut s, flow) = reference_sample();
    paint_rect(&mut s.s1, CLASS_CAR, 100, 60, 100, 80);
    let cuts = extract_vehicle_cutouts(&s, &flow);
    assert_eq!(cuts.len(), 1);
    assert_eq!(cuts[0].bbox, (100, 60, 100, 80));
    assert_eq!(cuts[0].class_group, ClassGroup::Vehicle);
    assert!((cuts[0].mean_flow.0 - 3.0).abs() < 1e-6);

    // rejected: bbox 40 wide (under 50)
    let (mut s, flow) = reference_sample();
    paint_rect(&mut s.s1, CLASS_CAR, 100, 60, 40, 80);
    assert!(extract_vehicle_cutouts(&s, &flow).is_empty());

    // rejected: fill ratio 0.5 (two 25-row bands in a 100-row bbox)
    let (mut s, flow) = reference_sample();
    paint_rect(&mut s.s1, CLASS_CAR, 100, 60, 100, 25);
    paint_rect(&mut s.s1, CLASS_CAR, 100, 135, 100, 25);
    // connect the bands with a 1px column so they form one component
    for y in 60..160 {
        s.s1.ids[[y, 100]] = CLASS_CAR;
    }
    let cuts = extract_vehicle_cutouts(&s, &flow);
    assert!(cuts.is_empty(), "fill {} should be rejected", 0.5);

    // rejected: bbox 160 tall (over 150)
    let (mut s, flow) = reference_sample();
    paint_rect(&mut s.s1, CLASS_CAR, 100, 60, 100, 160);
    assert!(extract_vehicle_cutouts(&s, &flow).is_empty());
}

#[test]
fn vehicle_extraction_is_deterministic() {
    let (mut s, flow) = reference_sample();
    paint_rect(&mut s.s1, CLASS_CAR, 100, 60, 100, 80);
    paint_rect(&mut s.s1, CLASS_BUS, 400, 100, 120, 90);
    let a = extract_vehicle_cutouts(&s, &flow);
    let b = extract_vehicle_cutouts(&s, &flow);
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.bbox, y.bbox);
        assert_eq!(x.mask, y.mask);
    }
}

#[test]
fn pole_window_rule() {
    // >10% pole pixels in the best 200-px window -> one grouped cutout
    let (mut s, flow) = reference_sample();
    // two poles inside one window: 30 and 28 columns wide, full quarters
    paint_rect(&mut s.s1, CLASS_POLE, 300, 0, 30, 256);
    paint_rect(&mut s.s1, CLASS_TRAFFIC_SIGN, 360, 0, 28, 256);
    let cuts = extract_pole_cutouts(&s, &flow);
    assert_eq!(cuts.len(), 1, "grouped poles should form a single cutout");
    assert_eq!(cuts[0].class_group, ClassGroup::Pole);
    // the grouped mask spans both poles
    assert!(cuts[0].bbox.2 >= 88);

    // max window has only ~5% pole pixels -> nothing
    let (mut s, flow) = reference_sample();
    paint_rect(&mut s.s1, CLASS_POLE, 300, 0, 10, 256); // 10/200 = 5%
    assert!(extract_pole_cutouts(&s, &flow).is_empty());
}

#[test]
fn cache_capacity_and_replacement() {
    let (mut s, flow) = reference_sample();
    paint_rect(&mut s.s1, CLASS_CAR, 100, 60, 100, 80);
    let cutout = extract_vehicle_cutouts(&s, &flow).pop().unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cache = OccluderCache::new(3);
    for _ in 0..5 {
        cache.push(cutout.clone(), &mut rng);
        assert!(cache.len() <= 3);
    }
    assert_eq!(cache.len(), 3);
}

#[test]
fn cache_sampling_statistics() {
    let (mut s, flow) = reference_sample();
    paint_rect(&mut s.s1, CLASS_CAR, 100, 60, 100, 80);
    let mut cutout = extract_vehicle_cutouts(&s, &flow).pop().unwrap();
    cutout.mean_flow = (10.0, 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cache = OccluderCache::new(4);
    cache.push(cutout, &mut rng);

    let mut negatives = 0usize;
    let draws = 10_000usize;
    for _ in 0..draws {
        let (_, aug) = cache.sample(&mut rng).unwrap();
        let mag = aug.0.abs();
        assert!(
            (8.0..=15.0).contains(&mag),
            "magnitude {mag} escaped [8, 15]"
        );
        if aug.0 < 0.0 {
            negatives += 1;
        }
    }
    let rate = negatives as f64 / draws as f64;
    assert!((rate - 0.5).abs() < 0.02, "sign-flip rate {rate}");
}

#[test]
fn empty_cache_signals_no_occluder() {
    let cache = OccluderCache::new(8);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    assert!(cache.sample(&mut rng).is_none());
    let set = CacheSet::new(8);
    assert!(set.sample(&mut rng).is_none());
}

fn mined_toy_cutout() -> (Sample, FlowField, OcclusionMask, OccluderCutout) {
    let (s, flow, occ) = toy();
    // paint a synthetic car into a copy to mine from
    let mut donor = s.clone();
    paint_rect(&mut donor.s1, CLASS_CAR, 50, 40, 20, 10);
    let mut donor_flow = flow.clone();
    for y in 40..50 {
        for x in 50..70 {
            donor_flow.data[[0, y, x]] = 5.0;
            donor_flow.data[[1, y, x]] = 0.0;
        }
    }
    let cuts = extract_vehicle_cutouts(&donor, &donor_flow);
    assert!(!cuts.is_empty());
    (s, flow, occ, cuts.into_iter().next().unwrap())
}

#[test]
fn stationary_paste_keeps_location_and_zeroes_target() {
    let (s, flow, occ, cutout) = mined_toy_cutout();
    let aug = apply_semantic_augmentation(&s, &flow, &occ, &cutout, (0.0, 0.0)).unwrap();
    let (bx, by, bw, bh) = cutout.bbox;
    for yy in 0..bh {
        for xx in 0..bw {
            if cutout.mask[[yy, xx]] != 0 {
                let (y, x) = (by + yy, bx + xx);
                assert_eq!(aug.paste_mask[[y, x]], 1);
                assert_eq!(aug.u_target.data[[0, y, x]], 0.0);
                assert_eq!(aug.u_target.data[[1, y, x]], 0.0);
                // frame-2 paste at the identical location
                for c in 0..3 {
                    assert_eq!(aug.i2.data[[c, y, x]], cutout.src_i1.data[[c, yy, xx]]);
                }
            }
        }
    }
}

#[test]
fn integer_offset_paste_lands_at_shifted_location() {
    let (s, flow, occ, cutout) = mined_toy_cutout();
    let aug = apply_semantic_augmentation(&s, &flow, &occ, &cutout, (12.0, 0.0)).unwrap();
    let (bx, by, bw, bh) = cutout.bbox;
    for yy in 0..bh {
        for xx in 0..bw {
            if cutout.mask[[yy, xx]] != 0 {
                let (y, x) = (by + yy, bx + xx);
                assert_eq!(aug.u_target.data[[0, y, x]], 12.0);
                for c in 0..3 {
                    assert_eq!(
                        aug.i2.data[[c, y, x + 12]],
                        cutout.src_i1.data[[c, yy, xx]]
                    );
                    assert_eq!(aug.i1.data[[c, y, x]], cutout.src_i1.data[[c, yy, xx]]);
                }
                assert_eq!(aug.s2.ids[[y, x + 12]], cutout.sem[[yy, xx]]);
            }
        }
    }
}

#[test]
fn newly_covered_background_keeps_first_pass_flow() {
    let (s, flow, occ, cutout) = mined_toy_cutout();
    let aug = apply_semantic_augmentation(&s, &flow, &occ, &cutout, (12.0, 0.0)).unwrap();
    let (bx, by, bw, _) = cutout.bbox;
    // a pixel covered by the frame-2 paste but outside the frame-1 mask
    let probe_x = bx + bw + 5;
    let probe_y = by + 2;
    assert_eq!(aug.paste_mask[[probe_y, probe_x]], 0);
    if s.s1.ids[[probe_y, probe_x]] != CLASS_SKY {
        assert_eq!(
            aug.u_target.data[[0, probe_y, probe_x]],
            flow.data[[0, probe_y, probe_x]]
        );
    }
}

#[test]
fn augmentation_edits_only_the_masked_regions() {
    let (s, flow, occ, cutout) = mined_toy_cutout();
    let aug = apply_semantic_augmentation(&s, &flow, &occ, &cutout, (9.0, 3.0)).unwrap();
    let (h, w) = (s.height(), s.width());
    // frame-2 mask: pixels whose color or labels changed
    let (bx, by, bw, bh) = cutout.bbox;
    for y in 0..h {
        for x in 0..w {
            let on_m1 = aug.paste_mask[[y, x]] != 0;
            let near_m2 = y as i64 >= by as i64 + 2
                && (y as i64) < (by + bh) as i64 + 4
                && x as i64 >= bx as i64 + 8
                && (x as i64) < (bx + bw) as i64 + 10;
            if !on_m1 {
                for c in 0..3 {
                    assert_eq!(aug.i1.data[[c, y, x]], s.i1.data[[c, y, x]]);
                }
                assert_eq!(aug.s1.ids[[y, x]], s.s1.ids[[y, x]]);
                // off-mask flow edits only via the sky shrink
                if s.s1.ids[[y, x]] != CLASS_SKY {
                    assert_eq!(aug.u_target.data[[0, y, x]], flow.data[[0, y, x]]);
                }
            }
            if !near_m2 {
                for c in 0..3 {
                    assert_eq!(aug.i2.data[[c, y, x]], s.i2.data[[c, y, x]]);
                }
            }
        }
    }
}

#[test]
fn fully_clipped_paste_is_no_occluder() {
    let (s, flow, occ, cutout) = mined_toy_cutout();
    let err = apply_semantic_augmentation(&s, &flow, &occ, &cutout, (10_000.0, 0.0)).unwrap_err();
    assert!(matches!(err, Error::NoOccluder));
}

#[test]
fn sky_shrink_halves_exactly_class_ten() {
    let (h, w) = (8usize, 8usize);
    let flow = FlowField::new(Array3::from_shape_fn((2, h, w), |(c, _, _)| {
        if c == 0 {
            4.0
        } else {
            2.0
        }
    }));
    let mut sem = SemanticMap::from_raw(Array2::zeros((h, w)));
    sem.ids[[0, 0]] = CLASS_SKY;
    sem.ids[[1, 1]] = IGNORE_LABEL;
    let out = shrink_sky_flow(&flow, &sem);
    assert_eq!(out.data[[0, 0, 0]], 2.0);
    assert_eq!(out.data[[1, 0, 0]], 1.0);
    assert_eq!(out.data[[0, 1, 1]], 4.0); // ignore label untouched
    assert_eq!(out.data[[0, 5, 5]], 4.0);

    // no sky at all -> identity
    let no_sky = SemanticMap::from_raw(Array2::zeros((h, w)));
    assert_eq!(shrink_sky_flow(&flow, &no_sky).data, flow.data);

    // linearity on a fixed map: shrink(a * U) == a * shrink(U)
    let scaled = FlowField::new(flow.data.mapv(|v| v * 3.0));
    let lhs = shrink_sky_flow(&scaled, &sem);
    let rhs = FlowField::new(shrink_sky_flow(&flow, &sem).data.mapv(|v| v * 3.0));
    assert_eq!(lhs.data, rhs.data);
}
