//! Synthetic driving-scene generator with exact flow, semantics, and
//! z-order occlusion ground truth.
//!
//! The world is a stack of layers: a static sky band, a ground plane
//! displaced by the camera motion, and textured foreground objects with
//! their own motions. Every layer's texture is a procedural value-noise
//! function evaluable at arbitrary real coordinates, so both frames sample
//! the same function and brightness constancy holds exactly.

use crate::error::{Error, Result};
use crate::types::*;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

/// Shape of a foreground object mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ObjectShape {
    Rectangle,
    Ellipse,
}

/// One foreground object: class, geometry in frame 1, own motion, depth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: u8,
    pub shape: ObjectShape,
    /// Top-left corner in frame 1, pixels.
    pub x: i64,
    pub y: i64,
    pub width: usize,
    pub height: usize,
    /// Displacement frame-1 -> frame-2, pixels.
    pub motion: (f32, f32),
    /// Larger z draws on top.
    pub z: u32,
}

/// Full description of one synthetic sample; the seed pins every texture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Rows [0, sky_rows) are a static sky band (class 10, zero flow).
    pub sky_rows: usize,
    /// Ground-plane displacement induced by camera motion.
    pub camera_motion: (f32, f32),
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

/// Tunable knobs for random scene drawing (the `gen-data` CLI accepts these
/// from a TOML file).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneGenParams {
    pub min_vehicles: usize,
    pub max_vehicles: usize,
    pub max_pole_clusters: usize,
    /// Camera |u| range, pixels (sign drawn separately).
    pub camera_u: (f32, f32),
    pub camera_v_max: f32,
    /// Vehicle |u| range, pixels.
    pub vehicle_u: (f32, f32),
    pub vehicle_v_max: f32,
    pub sky_fraction: f64,
}

impl Default for SceneGenParams {
    fn default() -> Self {
        SceneGenParams {
            min_vehicles: 1,
            max_vehicles: 3,
            max_pole_clusters: 1,
            camera_u: (2.0, 6.0),
            camera_v_max: 1.0,
            vehicle_u: (3.0, 8.0),
            vehicle_v_max: 1.0,
            sky_fraction: 0.2,
        }
    }
}

// splitmix64: stateless per-coordinate hash for lattice noise.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, layer: u64, channel: u64, ix: i64, iy: i64) -> f32 {
    let h = splitmix(
        seed ^ layer.wrapping_mul(0xA24B_AED4_963E_E407)
            ^ channel.wrapping_mul(0x9FB2_1C65_1E98_DF25)
            ^ (ix as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93)
            ^ (iy as u64).wrapping_mul(0xCA5A_8263_9512_1157),
    );
    (h >> 40) as f32 / (1u64 << 24) as f32
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Band-limited value noise in [0, 1], C1-smooth, evaluable anywhere.
fn value_noise(seed: u64, layer: u64, channel: u64, x: f32, y: f32, cell: f32) -> f32 {
    let gx = x / cell;
    let gy = y / cell;
    let ix = gx.floor() as i64;
    let iy = gy.floor() as i64;
    let tx = smoothstep(gx - ix as f32);
    let ty = smoothstep(gy - iy as f32);
    let v00 = lattice(seed, layer, channel, ix, iy);
    let v01 = lattice(seed, layer, channel, ix + 1, iy);
    let v10 = lattice(seed, layer, channel, ix, iy + 1);
    let v11 = lattice(seed, layer, channel, ix + 1, iy + 1);
    (v00 * (1.0 - tx) + v01 * tx) * (1.0 - ty) + (v10 * (1.0 - tx) + v11 * tx) * ty
}

/// Two-octave textured color for one layer at a world coordinate.
fn texture(seed: u64, layer: u64, channel: u64, x: f32, y: f32) -> f32 {
    let base = lattice(seed, layer ^ 0x5EED, channel, 0, 0) * 0.5 + 0.25;
    let coarse = value_noise(seed, layer, channel, x, y, 9.0);
    let fine = value_noise(seed, layer ^ 0xF17E, channel, x, y, 3.5);
    (base + 0.45 * (coarse - 0.5) + 0.3 * (fine - 0.5)).clamp(0.02, 0.98)
}

const LAYER_SKY: u64 = 1;
const LAYER_GROUND: u64 = 2;
const LAYER_OBJ_BASE: u64 = 16;

/// Surface id at a pixel: sky, ground, or object index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Owner {
    Sky,
    Ground,
    Object(usize),
}

impl SceneSpec {
    fn object_mask_contains(obj: &SceneObject, px: f32, py: f32) -> bool {
        let lx = px - obj.x as f32;
        let ly = py - obj.y as f32;
        if lx < 0.0 || ly < 0.0 || lx >= obj.width as f32 || ly >= obj.height as f32 {
            return false;
        }
        match obj.shape {
            ObjectShape::Rectangle => true,
            ObjectShape::Ellipse => {
                let cx = obj.width as f32 / 2.0;
                let cy = obj.height as f32 / 2.0;
                let nx = (lx + 0.5 - cx) / cx;
                let ny = (ly + 0.5 - cy) / cy;
                nx * nx + ny * ny <= 1.0
            }
        }
    }

    /// Visible surface at integer pixel (x, y) in frame `f` (0 or 1).
    fn owner(&self, x: i64, y: i64, frame: usize) -> Owner {
        let mut best: Option<(u32, usize)> = None;
        for (i, obj) in self.objects.iter().enumerate() {
            let (mx, my) = if frame == 0 {
                (x as f32, y as f32)
            } else {
                (x as f32 - obj.motion.0, y as f32 - obj.motion.1)
            };
            if Self::object_mask_contains(obj, mx, my) {
                match best {
                    Some((z, _)) if z >= obj.z => {}
                    _ => best = Some((obj.z, i)),
                }
            }
        }
        if let Some((_, i)) = best {
            return Owner::Object(i);
        }
        if (y as usize) < self.sky_rows {
            Owner::Sky
        } else {
            Owner::Ground
        }
    }

    fn surface_motion(&self, owner: Owner) -> (f32, f32) {
        match owner {
            Owner::Sky => (0.0, 0.0),
            Owner::Ground => self.camera_motion,
            Owner::Object(i) => self.objects[i].motion,
        }
    }

    fn surface_class(&self, owner: Owner) -> u8 {
        match owner {
            Owner::Sky => CLASS_SKY,
            Owner::Ground => CLASS_ROAD,
            Owner::Object(i) => self.objects[i].class_id,
        }
    }

    /// Color of the surface at a pixel of frame `f`; textures are anchored
    /// to each surface so they translate rigidly with it.
    fn color(&self, owner: Owner, x: f32, y: f32, frame: usize, channel: u64) -> f32 {
        let (layer, anchor) = match owner {
            Owner::Sky => (LAYER_SKY, (0.0f32, 0.0f32)),
            Owner::Ground => (LAYER_GROUND, self.camera_motion),
            Owner::Object(i) => (
                LAYER_OBJ_BASE + i as u64,
                self.objects[i].motion,
            ),
        };
        let (sx, sy) = if frame == 0 {
            (x, y)
        } else {
            (x - anchor.0, y - anchor.1)
        };
        let v = texture(self.seed, layer, channel, sx, sy);
        // Sky band is brighter and flatter; vehicles get stronger texture.
        match owner {
            Owner::Sky => 0.6 + 0.3 * v,
            _ => v,
        }
    }
}

/// Render a [`SceneSpec`] into a fully-labeled [`Sample`].
pub fn generate_toy_scene(spec: &SceneSpec) -> Result<Sample> {
    let (h, w) = (spec.height, spec.width);
    if spec.sky_rows > h {
        return Err(Error::Scene(format!(
            "sky_rows {} exceeds height {h}",
            spec.sky_rows
        )));
    }
    for (i, obj) in spec.objects.iter().enumerate() {
        if obj.x < 0
            || obj.y < 0
            || obj.x + obj.width as i64 > w as i64
            || obj.y + obj.height as i64 > h as i64
        {
            return Err(Error::Scene(format!(
                "object {i} ({}x{} at {},{}) is out of frame in frame 1",
                obj.width, obj.height, obj.x, obj.y
            )));
        }
    }

    let mut i1 = Array3::<f32>::zeros((3, h, w));
    let mut i2 = Array3::<f32>::zeros((3, h, w));
    let mut s1 = Array2::<u8>::zeros((h, w));
    let mut s2 = Array2::<u8>::zeros((h, w));
    let mut flow = Array3::<f32>::zeros((2, h, w));
    let mut occ = Array2::<u8>::zeros((h, w));

    for y in 0..h {
        for x in 0..w {
            let o1 = spec.owner(x as i64, y as i64, 0);
            let o2 = spec.owner(x as i64, y as i64, 1);
            s1[[y, x]] = spec.surface_class(o1);
            s2[[y, x]] = spec.surface_class(o2);
            for c in 0..3u64 {
                i1[[c as usize, y, x]] = spec.color(o1, x as f32, y as f32, 0, c);
                i2[[c as usize, y, x]] = spec.color(o2, x as f32, y as f32, 1, c);
            }
            let (u, v) = spec.surface_motion(o1);
            flow[[0, y, x]] = u;
            flow[[1, y, x]] = v;

            // Occluded iff the target leaves the frame or lands on a
            // different surface in frame 2 (nearest-pixel test).
            let tx = (x as f32 + u).round() as i64;
            let ty = (y as f32 + v).round() as i64;
            let occluded = if tx < 0 || ty < 0 || tx >= w as i64 || ty >= h as i64 {
                true
            } else {
                spec.owner(tx, ty, 1) != o1
            };
            if occluded {
                occ[[y, x]] = 1;
            }
        }
    }

    Ok(Sample {
        i1: Image::new(i1),
        i2: Image::new(i2),
        s1: SemanticMap::from_raw(s1),
        s2: SemanticMap::from_raw(s2),
        gt_flow: Some(FlowField::new(flow)),
        gt_valid: Some(Array2::ones((h, w))),
        gt_occ: Some(OcclusionMask { data: occ }),
        id: format!("scene{:016x}", spec.seed),
    })
}

/// Draw a random scene spec. Deterministic in (resolution, seed, params);
/// independent of any caller RNG state so parallel generation stays
/// order-independent.
pub fn random_scene_spec(
    height: usize,
    width: usize,
    seed: u64,
    params: &SceneGenParams,
) -> SceneSpec {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0xABCD_EF01_2345_6789));

    let sky_rows = ((height as f64 * params.sky_fraction) as usize).min(height);
    let sign = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let cam_u = sign(&mut rng) * rng.random_range(params.camera_u.0..=params.camera_u.1).round();
    let cam_v = rng.random_range(-params.camera_v_max..=params.camera_v_max).round();

    let mut objects = Vec::new();
    let n_vehicles = rng.random_range(params.min_vehicles..=params.max_vehicles);
    for k in 0..n_vehicles {
        let ow = rng.random_range(12..=40usize.min(width / 3));
        let oh = rng.random_range(8..=20usize.min(height / 3));
        let x = rng.random_range(0..=(width - ow)) as i64;
        let ylo = sky_rows.min(height - oh);
        let y = rng.random_range(ylo..=(height - oh)) as i64;
        let u = sign(&mut rng) * rng.random_range(params.vehicle_u.0..=params.vehicle_u.1).round();
        let v = rng.random_range(-params.vehicle_v_max..=params.vehicle_v_max).round();
        let class = *[CLASS_CAR, CLASS_CAR, CLASS_CAR, CLASS_TRUCK, CLASS_BUS]
            .choose(&mut rng)
            .unwrap();
        objects.push(SceneObject {
            class_id: class,
            shape: if rng.random_bool(0.5) {
                ObjectShape::Rectangle
            } else {
                ObjectShape::Ellipse
            },
            x,
            y,
            width: ow,
            height: oh,
            motion: (u, v),
            z: 10 + k as u32,
        });
    }

    let n_clusters = rng.random_range(0..=params.max_pole_clusters);
    for k in 0..n_clusters {
        let n_poles = rng.random_range(2..=3);
        let base_x = rng.random_range(0..width.saturating_sub(20).max(1)) as i64;
        for p in 0..n_poles {
            let pw = rng.random_range(2..=4usize);
            let ph = rng.random_range(height / 3..=height / 2);
            let x = (base_x + p as i64 * rng.random_range(4..9)) // nearby group
                .min(width as i64 - pw as i64)
                .max(0);
            let y = rng.random_range(sky_rows.min(height - ph)..=(height - ph)) as i64;
            let class = *POLE_CLASSES.choose(&mut rng).unwrap();
            objects.push(SceneObject {
                class_id: class,
                shape: ObjectShape::Rectangle,
                x,
                y,
                width: pw,
                height: ph,
                motion: (cam_u, cam_v), // poles are static scenery
                z: 100 + (k * 8 + p) as u32,
            });
        }
    }

    SceneSpec {
        height,
        width,
        sky_rows,
        camera_motion: (cam_u, cam_v),
        objects,
        seed: splitmix(seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_spec() -> SceneSpec {
        SceneSpec {
            height: 32,
            width: 48,
            sky_rows: 6,
            camera_motion: (0.0, 0.0),
            objects: vec![],
            seed: 42,
        }
    }

    #[test]
    fn static_scene_has_zero_flow_and_equal_frames() {
        let s = generate_toy_scene(&base_spec()).unwrap();
        assert!(s.gt_flow.as_ref().unwrap().data.iter().all(|&v| v == 0.0));
        assert_eq!(s.i1, s.i2);
        assert!(s.gt_occ.as_ref().unwrap().data.iter().all(|&v| v == 0));
    }

    #[test]
    fn moving_rectangle_has_constructive_ground_truth() {
        let mut spec = base_spec();
        spec.objects.push(SceneObject {
            class_id: CLASS_CAR,
            shape: ObjectShape::Rectangle,
            x: 10,
            y: 12,
            width: 8,
            height: 6,
            motion: (6.0, 0.0),
            z: 1,
        });
        let s = generate_toy_scene(&spec).unwrap();
        let flow = &s.gt_flow.as_ref().unwrap().data;
        for y in 0..32 {
            for x in 0..48 {
                let inside = x >= 10 && x < 18 && y >= 12 && y < 18;
                let expect = if inside { 6.0 } else { 0.0 };
                assert_eq!(flow[[0, y, x]], expect, "at ({y}, {x})");
                assert_eq!(flow[[1, y, x]], 0.0);
            }
        }
        // The car's class appears where it sits in each frame.
        assert_eq!(s.s1.ids[[14, 12]], CLASS_CAR);
        assert_eq!(s.s2.ids[[14, 18]], CLASS_CAR);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let spec = random_scene_spec(32, 64, 7, &SceneGenParams::default());
        let a = generate_toy_scene(&spec).unwrap();
        let b = generate_toy_scene(&spec).unwrap();
        assert_eq!(a.i1, b.i1);
        assert_eq!(a.i2, b.i2);
        assert_eq!(a.gt_flow, b.gt_flow);
        assert_eq!(a.s1.ids, b.s1.ids);
    }

    #[test]
    fn out_of_frame_object_is_rejected() {
        let mut spec = base_spec();
        spec.objects.push(SceneObject {
            class_id: CLASS_CAR,
            shape: ObjectShape::Rectangle,
            x: 44,
            y: 0,
            width: 8,
            height: 4,
            motion: (0.0, 0.0),
            z: 1,
        });
        assert!(matches!(
            generate_toy_scene(&spec),
            Err(Error::Scene(_))
        ));
    }

    #[test]
    fn sky_band_is_class_ten_with_zero_flow() {
        let mut spec = base_spec();
        spec.camera_motion = (4.0, 0.0);
        let s = generate_toy_scene(&spec).unwrap();
        let flow = &s.gt_flow.as_ref().unwrap().data;
        for x in 0..48 {
            assert_eq!(s.s1.ids[[2, x]], CLASS_SKY);
            assert_eq!(flow[[0, 2, x]], 0.0);
            assert_eq!(flow[[0, 20, x]], 4.0); // ground moves with the camera
        }
    }
}
