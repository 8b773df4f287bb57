//! Self-supervision sample synthesis: the appearance/spatial transform of
//! the second pass, and the semantic copy-paste machinery of the third pass
//! (cutout mining, the occluder cache, paste-with-known-motion, sky-flow
//! shrinking).

use crate::error::{Error, Result};
use crate::types::*;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Reference width the paper's pixel thresholds are stated at; all cutout
/// thresholds scale by `width / 832`.
pub const REFERENCE_WIDTH: f64 = 832.0;
/// Vehicle bounding-box acceptance window at reference resolution, pixels.
pub const VEHICLE_WIDTH_RANGE: (f64, f64) = (50.0, 300.0);
pub const VEHICLE_HEIGHT_RANGE: (f64, f64) = (50.0, 150.0);
/// Minimum mask fill ratio of the vehicle bounding box.
pub const VEHICLE_FILL_MIN: f64 = 0.6;
/// Pole sliding-window width at reference resolution, pixels.
pub const POLE_WINDOW_WIDTH: f64 = 200.0;
/// Minimum pole-pixel fraction within the window.
pub const POLE_FRACTION_MIN: f64 = 0.10;
/// Occluder mean-flow rescaling range when sampling from the cache.
pub const CACHE_SCALE_RANGE: (f32, f32) = (0.8, 1.5);

// ---------------------------------------------------------------------------
// pass 2: appearance + spatial transform
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ArTransformParams {
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    /// Brightness/contrast/saturation jitter amplitude.
    pub appearance_jitter: f64,
    pub noise_sigma_max: f64,
}

impl Default for ArTransformParams {
    fn default() -> Self {
        ArTransformParams {
            max_rotation_deg: 5.0,
            scale_range: (0.9, 1.1),
            appearance_jitter: 0.1,
            noise_sigma_max: 0.02,
        }
    }
}

/// Inputs and self-supervision targets of the second pass.
#[derive(Debug, Clone)]
pub struct TransformedSample {
    pub i1: Image,
    pub i2: Image,
    pub s1: SemanticMap,
    pub s2: SemanticMap,
    /// Transported first-pass flow (the detached target).
    pub u_target: FlowField,
    /// Transported occlusion mask, with out-of-view pixels marked occluded.
    pub occ_target: OcclusionMask,
}

#[derive(Debug, Clone, Copy)]
struct Similarity {
    cos: f64,
    sin: f64,
    scale: f64,
    cx: f64,
    cy: f64,
}

impl Similarity {
    fn identity(h: usize, w: usize) -> Self {
        Similarity {
            cos: 1.0,
            sin: 0.0,
            scale: 1.0,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
        }
    }

    /// Source point of target pixel (x', y') under the inverse map.
    fn inverse(&self, xp: f64, yp: f64) -> (f64, f64) {
        let dx = (xp - self.cx) / self.scale;
        let dy = (yp - self.cy) / self.scale;
        // R^-1 = R(-theta)
        let x = self.cos * dx + self.sin * dy + self.cx;
        let y = -self.sin * dx + self.cos * dy + self.cy;
        (x, y)
    }

    /// Transport a displacement vector: scale * R * u.
    fn map_vector(&self, u: f64, v: f64) -> (f64, f64) {
        (
            self.scale * (self.cos * u - self.sin * v),
            self.scale * (self.sin * u + self.cos * v),
        )
    }
}

fn bilinear_plane(plane: &ndarray::ArrayView2<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = (plane.shape()[0], plane.shape()[1]);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = (x - x0) as f32;
    let fy = (y - y0) as f32;
    let cx = |v: f64| (v.max(0.0) as usize).min(w - 1);
    let cy = |v: f64| (v.max(0.0) as usize).min(h - 1);
    let (x0c, x1c) = (cx(x0), cx(x0 + 1.0));
    let (y0c, y1c) = (cy(y0), cy(y0 + 1.0));
    (plane[[y0c, x0c]] * (1.0 - fx) + plane[[y0c, x1c]] * fx) * (1.0 - fy)
        + (plane[[y1c, x0c]] * (1.0 - fx) + plane[[y1c, x1c]] * fx) * fy
}

fn nearest_u8(arr: &Array2<u8>, y: f64, x: f64) -> u8 {
    let (h, w) = (arr.shape()[0], arr.shape()[1]);
    let yy = (y.round().max(0.0) as usize).min(h - 1);
    let xx = (x.round().max(0.0) as usize).min(w - 1);
    arr[[yy, xx]]
}

fn jitter_image(img: &mut Image, params: &ArTransformParams, rng: &mut ChaCha8Rng) {
    let j = params.appearance_jitter;
    let brightness = rng.random_range(-j..=j) as f32;
    let contrast = 1.0 + rng.random_range(-j..=j) as f32;
    let saturation = 1.0 + rng.random_range(-j..=j) as f32;
    let sigma = rng.random_range(0.0..=params.noise_sigma_max) as f32;
    let (h, w) = (img.height(), img.width());
    for y in 0..h {
        for x in 0..w {
            let r = img.data[[0, y, x]];
            let g = img.data[[1, y, x]];
            let b = img.data[[2, y, x]];
            let gray = (r + g + b) / 3.0;
            for (c, v) in [r, g, b].into_iter().enumerate() {
                let sat = gray + saturation * (v - gray);
                let out = (sat - 0.5) * contrast + 0.5 + brightness;
                // Box-Muller on two uniform draws
                let (a, bdraw): (f32, f32) = (rng.random_range(1e-9..1.0), rng.random());
                let noise = sigma
                    * (-2.0 * a.ln()).sqrt()
                    * (2.0 * std::f32::consts::PI * bdraw).cos();
                img.data[[c, y, x]] = (out + noise).clamp(0.0, 1.0);
            }
        }
    }
}

/// Fraction of target pixels whose source falls outside the frame.
fn out_of_view_fraction(t: &Similarity, h: usize, w: usize) -> f64 {
    let mut out = 0usize;
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = t.inverse(x as f64, y as f64);
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                out += 1;
            }
        }
    }
    out as f64 / (h * w) as f64
}

/// Sample a random appearance + similarity transform of the pair, transport
/// the first-pass flow and occlusion mask through it, and return the
/// second-pass inputs and targets. Transforms pushing more than 30% of the
/// pixels out of frame are redrawn (bounded retry, falling back to the
/// identity).
pub fn arflow_transform(
    sample: &Sample,
    u_first_pass: &FlowField,
    occ_first_pass: &OcclusionMask,
    params: &ArTransformParams,
    rng: &mut ChaCha8Rng,
) -> Result<TransformedSample> {
    let (h, w) = (sample.height(), sample.width());
    if u_first_pass.height() != h || u_first_pass.width() != w {
        return Err(Error::dimension(
            "height/width",
            "first-pass flow resolution must match the sample".to_string(),
        ));
    }

    let mut transform = Similarity::identity(h, w);
    for _attempt in 0..10 {
        let angle = rng
            .random_range(-params.max_rotation_deg..=params.max_rotation_deg)
            .to_radians();
        let scale = rng.random_range(params.scale_range.0..=params.scale_range.1);
        let candidate = Similarity {
            cos: angle.cos(),
            sin: angle.sin(),
            scale,
            ..Similarity::identity(h, w)
        };
        if out_of_view_fraction(&candidate, h, w) <= 0.30 {
            transform = candidate;
            break;
        }
    }

    let warp_image = |img: &Image| {
        let mut out = Array3::<f32>::zeros((3, h, w));
        for c in 0..3 {
            let plane = img.data.index_axis(ndarray::Axis(0), c);
            for y in 0..h {
                for x in 0..w {
                    let (sx, sy) = transform.inverse(x as f64, y as f64);
                    out[[c, y, x]] = bilinear_plane(&plane, sy, sx);
                }
            }
        }
        Image::new(out)
    };
    let warp_sem = |sem: &SemanticMap| {
        let mut out = Array2::<u8>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = transform.inverse(x as f64, y as f64);
                out[[y, x]] = nearest_u8(&sem.ids, sy, sx);
            }
        }
        SemanticMap::from_raw(out)
    };

    let mut i1 = warp_image(&sample.i1);
    let mut i2 = warp_image(&sample.i2);
    let s1 = warp_sem(&sample.s1);
    let s2 = warp_sem(&sample.s2);

    let mut u_target = Array3::<f32>::zeros((2, h, w));
    let mut occ_target = Array2::<u8>::zeros((h, w));
    let u_plane = u_first_pass.data.index_axis(ndarray::Axis(0), 0);
    let v_plane = u_first_pass.data.index_axis(ndarray::Axis(0), 1);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = transform.inverse(x as f64, y as f64);
            let in_view =
                sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64;
            let u = bilinear_plane(&u_plane, sy, sx) as f64;
            let v = bilinear_plane(&v_plane, sy, sx) as f64;
            let (tu, tv) = transform.map_vector(u, v);
            u_target[[0, y, x]] = tu as f32;
            u_target[[1, y, x]] = tv as f32;
            let occ = nearest_u8(&occ_first_pass.data, sy, sx);
            occ_target[[y, x]] = if in_view { occ } else { 1 };
        }
    }

    // Appearance jitter applies per frame, after the shared spatial map.
    jitter_image(&mut i1, params, rng);
    jitter_image(&mut i2, params, rng);

    Ok(TransformedSample {
        i1,
        i2,
        s1,
        s2,
        u_target: FlowField::new(u_target),
        occ_target: OcclusionMask { data: occ_target },
    })
}

// ---------------------------------------------------------------------------
// pass 3: cutout mining
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassGroup {
    Vehicle,
    Pole,
}

/// A mined foreground object: bbox-local crops of both frames, the binary
/// mask and class labels inside the bbox, and the mean flow over the mask.
#[derive(Debug, Clone)]
pub struct OccluderCutout {
    pub src_i1: Image,
    pub src_i2: Image,
    /// Binary mask in bbox-local coordinates (frame 1).
    pub mask: Array2<u8>,
    /// Class labels inside the bbox (frame 1).
    pub sem: Array2<u8>,
    pub mean_flow: (f32, f32),
    /// (x, y, w, h) in frame-1 coordinates.
    pub bbox: (usize, usize, usize, usize),
    pub class_group: ClassGroup,
    /// Top-left paste anchor: identical to the bbox origin ("same location
    /// they occupied").
    pub src_location: (usize, usize),
}

fn crop_image(img: &Image, x: usize, y: usize, w: usize, h: usize) -> Image {
    let mut out = Array3::<f32>::zeros((3, h, w));
    for c in 0..3 {
        for yy in 0..h {
            for xx in 0..w {
                out[[c, yy, xx]] = img.data[[c, y + yy, x + xx]];
            }
        }
    }
    Image::new(out)
}

fn mean_flow_over(flow: &FlowField, pixels: &[(usize, usize)]) -> (f32, f32) {
    let mut su = 0.0f64;
    let mut sv = 0.0f64;
    for &(y, x) in pixels {
        su += flow.data[[0, y, x]] as f64;
        sv += flow.data[[1, y, x]] as f64;
    }
    let n = pixels.len().max(1) as f64;
    ((su / n) as f32, (sv / n) as f32)
}

fn build_cutout(
    sample: &Sample,
    flow: &FlowField,
    pixels: &[(usize, usize)],
    group: ClassGroup,
) -> OccluderCutout {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for &(y, x) in pixels {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut mask = Array2::<u8>::zeros((bh, bw));
    let mut sem = Array2::<u8>::from_elem((bh, bw), IGNORE_LABEL);
    for &(y, x) in pixels {
        mask[[y - y0, x - x0]] = 1;
        sem[[y - y0, x - x0]] = sample.s1.ids[[y, x]];
    }
    OccluderCutout {
        src_i1: crop_image(&sample.i1, x0, y0, bw, bh),
        src_i2: crop_image(&sample.i2, x0, y0, bw, bh),
        mask,
        sem,
        mean_flow: mean_flow_over(flow, pixels),
        bbox: (x0, y0, bw, bh),
        class_group: group,
        src_location: (x0, y0),
    }
}

/// 8-connected components of the vehicle-class union, filtered by the
/// scaled bounding-box window and the fill-ratio rule.
pub fn extract_vehicle_cutouts(sample: &Sample, flow: &FlowField) -> Vec<OccluderCutout> {
    let (h, w) = (sample.height(), sample.width());
    let s = w as f64 / REFERENCE_WIDTH;
    let w_range = (VEHICLE_WIDTH_RANGE.0 * s, VEHICLE_WIDTH_RANGE.1 * s);
    let h_range = (VEHICLE_HEIGHT_RANGE.0 * s, VEHICLE_HEIGHT_RANGE.1 * s);

    let is_vehicle = |y: usize, x: usize| VEHICLE_CLASSES.contains(&sample.s1.ids[[y, x]]);
    let mut seen = Array2::<u8>::zeros((h, w));
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if seen[[y, x]] != 0 || !is_vehicle(y, x) {
                continue;
            }
            // flood fill, 8-connected
            let mut pixels = Vec::new();
            let mut stack = vec![(y, x)];
            seen[[y, x]] = 1;
            while let Some((cy, cx)) = stack.pop() {
                pixels.push((cy, cx));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (cy as i64 + dy, cx as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if seen[[ny, nx]] == 0 && is_vehicle(ny, nx) {
                            seen[[ny, nx]] = 1;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
            for &(py, px) in &pixels {
                x0 = x0.min(px);
                y0 = y0.min(py);
                x1 = x1.max(px);
                y1 = y1.max(py);
            }
            let bw = (x1 - x0 + 1) as f64;
            let bh = (y1 - y0 + 1) as f64;
            let fill = pixels.len() as f64 / (bw * bh);
            if bw >= w_range.0
                && bw <= w_range.1
                && bh >= h_range.0
                && bh <= h_range.1
                && fill >= VEHICLE_FILL_MIN
            {
                out.push(build_cutout(sample, flow, &pixels, ClassGroup::Vehicle));
            }
        }
    }
    out
}

/// Full-height sliding window over the pole-class union; the window with
/// the most pole pixels is kept iff its pole fraction exceeds the threshold.
/// Nearby poles inside one window form a single grouped cutout.
pub fn extract_pole_cutouts(sample: &Sample, flow: &FlowField) -> Vec<OccluderCutout> {
    let (h, w) = (sample.height(), sample.width());
    let s = w as f64 / REFERENCE_WIDTH;
    let win = ((POLE_WINDOW_WIDTH * s).round() as usize).max(1).min(w);

    let is_pole = |y: usize, x: usize| POLE_CLASSES.contains(&sample.s1.ids[[y, x]]);
    // per-column pole counts -> sliding sums
    let mut col_counts = vec![0usize; w];
    for x in 0..w {
        for y in 0..h {
            if is_pole(y, x) {
                col_counts[x] += 1;
            }
        }
    }
    let mut best_x = 0usize;
    let mut current: usize = col_counts[..win].iter().sum();
    let mut best_count = current;
    for x0 in 1..=w - win {
        current = current - col_counts[x0 - 1] + col_counts[x0 + win - 1];
        if current > best_count {
            best_count = current;
            best_x = x0;
        }
    }
    let fraction = best_count as f64 / (win * h) as f64;
    if fraction <= POLE_FRACTION_MIN {
        return Vec::new();
    }
    let mut pixels = Vec::new();
    for y in 0..h {
        for x in best_x..best_x + win {
            if is_pole(y, x) {
                pixels.push((y, x));
            }
        }
    }
    vec![build_cutout(sample, flow, &pixels, ClassGroup::Pole)]
}

// ---------------------------------------------------------------------------
// occluder cache
// ---------------------------------------------------------------------------

/// Bounded store of mined cutouts with random replacement when full.
pub struct OccluderCache {
    capacity: usize,
    entries: Vec<OccluderCutout>,
}

impl OccluderCache {
    pub fn new(capacity: usize) -> Self {
        OccluderCache {
            capacity,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, cutout: OccluderCutout, rng: &mut ChaCha8Rng) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() < self.capacity {
            self.entries.push(cutout);
        } else {
            let victim = rng.random_range(0..self.entries.len());
            self.entries[victim] = cutout;
        }
    }

    /// Uniform draw plus motion augmentation: the stored mean flow is
    /// rescaled by a uniform factor in [0.8, 1.5] and reversed with
    /// probability one half. Returns `None` on an empty cache (the caller
    /// skips the third pass for that batch).
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Option<(&OccluderCutout, (f32, f32))> {
        if self.entries.is_empty() {
            return None;
        }
        let idx = rng.random_range(0..self.entries.len());
        let cutout = &self.entries[idx];
        let scale = rng.random_range(CACHE_SCALE_RANGE.0..=CACHE_SCALE_RANGE.1);
        let sign = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
        let aug = (
            cutout.mean_flow.0 * scale * sign,
            cutout.mean_flow.1 * scale * sign,
        );
        Some((cutout, aug))
    }
}

/// One cache per class group.
pub struct CacheSet {
    pub vehicles: OccluderCache,
    pub poles: OccluderCache,
}

impl CacheSet {
    pub fn new(capacity_per_group: usize) -> Self {
        CacheSet {
            vehicles: OccluderCache::new(capacity_per_group),
            poles: OccluderCache::new(capacity_per_group),
        }
    }

    pub fn total_len(&self) -> usize {
        self.vehicles.len() + self.poles.len()
    }

    pub fn push(&mut self, cutout: OccluderCutout, rng: &mut ChaCha8Rng) {
        match cutout.class_group {
            ClassGroup::Vehicle => self.vehicles.push(cutout, rng),
            ClassGroup::Pole => self.poles.push(cutout, rng),
        }
    }

    /// Uniform over all entries across both groups.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Option<(&OccluderCutout, (f32, f32))> {
        let total = self.total_len();
        if total == 0 {
            return None;
        }
        let idx = rng.random_range(0..total);
        let cutout = if idx < self.vehicles.len() {
            &self.vehicles.entries[idx]
        } else {
            &self.poles.entries[idx - self.vehicles.len()]
        };
        let scale = rng.random_range(CACHE_SCALE_RANGE.0..=CACHE_SCALE_RANGE.1);
        let sign = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
        let aug = (
            cutout.mean_flow.0 * scale * sign,
            cutout.mean_flow.1 * scale * sign,
        );
        Some((cutout, aug))
    }
}

// ---------------------------------------------------------------------------
// pass 3: paste synthesis
// ---------------------------------------------------------------------------

/// Third-pass input: the current sample with one cached occluder pasted in
/// with a known motion, plus the edited self-supervision target.
#[derive(Debug, Clone)]
pub struct AugmentedSample {
    pub i1: Image,
    pub i2: Image,
    pub s1: SemanticMap,
    pub s2: SemanticMap,
    /// Flow target: first-pass flow, overwritten with `aug_flow` on the
    /// paste mask and sky-shrunk.
    pub u_target: FlowField,
    /// Frame-1 paste mask M.
    pub paste_mask: Array2<u8>,
    /// First-pass occlusion mask (support = max(1 - O, M)).
    pub occ_orig: OcclusionMask,
}

/// Paste `cutout` into both frames: frame 1 at its source location, frame 2
/// shifted by `aug_flow` (bilinear placement for fractional offsets, mask
/// thresholded at 0.5). The flow target takes `aug_flow` on the mask and
/// keeps the first-pass flow elsewhere, so background pixels newly covered
/// in frame 2 stay supervised by their reliable first-pass values. Sky flow
/// is halved last.
pub fn apply_semantic_augmentation(
    sample: &Sample,
    u_first_pass: &FlowField,
    occ_first_pass: &OcclusionMask,
    cutout: &OccluderCutout,
    aug_flow: (f32, f32),
) -> Result<AugmentedSample> {
    let (h, w) = (sample.height(), sample.width());
    let (bx, by) = cutout.src_location;
    let (bh, bw) = (cutout.mask.shape()[0], cutout.mask.shape()[1]);
    if by + bh > h || bx + bw > w {
        return Err(Error::NoOccluder);
    }

    let mut i1 = sample.i1.clone();
    let mut i2 = sample.i2.clone();
    let mut s1 = sample.s1.clone();
    let mut s2 = sample.s2.clone();
    let mut u_target = u_first_pass.clone();
    let mut paste_mask = Array2::<u8>::zeros((h, w));

    // Frame 1: direct masked paste at the source location; M keeps only
    // pixels whose frame-2 position stays inside the frame.
    for yy in 0..bh {
        for xx in 0..bw {
            if cutout.mask[[yy, xx]] == 0 {
                continue;
            }
            let (y, x) = (by + yy, bx + xx);
            for c in 0..3 {
                i1.data[[c, y, x]] = cutout.src_i1.data[[c, yy, xx]];
            }
            s1.ids[[y, x]] = cutout.sem[[yy, xx]];
            let tx = x as f32 + aug_flow.0;
            let ty = y as f32 + aug_flow.1;
            if tx >= 0.0 && ty >= 0.0 && tx <= (w - 1) as f32 && ty <= (h - 1) as f32 {
                paste_mask[[y, x]] = 1;
                u_target.data[[0, y, x]] = aug_flow.0;
                u_target.data[[1, y, x]] = aug_flow.1;
            }
        }
    }
    if paste_mask.iter().all(|&v| v == 0) {
        return Err(Error::NoOccluder);
    }

    // Frame 2: backward placement of the same pixels at the shifted
    // location. For each candidate target pixel, sample the bbox-local mask
    // bilinearly and accept where it clears 0.5.
    let y_lo = ((by as f32 + aug_flow.1).floor().max(0.0)) as usize;
    let y_hi = (((by + bh) as f32 + aug_flow.1).ceil().min(h as f32)) as usize;
    let x_lo = ((bx as f32 + aug_flow.0).floor().max(0.0)) as usize;
    let x_hi = (((bx + bw) as f32 + aug_flow.0).ceil().min(w as f32)) as usize;
    let maskf = cutout.mask.mapv(|v| v as f32);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let ly = y as f64 - aug_flow.1 as f64 - by as f64;
            let lx = x as f64 - aug_flow.0 as f64 - bx as f64;
            if ly < -0.5 || lx < -0.5 || ly > bh as f64 - 0.5 || lx > bw as f64 - 0.5 {
                continue;
            }
            let mv = bilinear_plane(&maskf.view(), ly, lx);
            if mv >= 0.5 {
                for c in 0..3 {
                    let plane = cutout.src_i1.data.index_axis(ndarray::Axis(0), c);
                    i2.data[[c, y, x]] = bilinear_plane(&plane, ly, lx);
                }
                s2.ids[[y, x]] = nearest_u8(&cutout.sem, ly, lx);
            }
        }
    }

    let u_target = shrink_sky_flow(&u_target, &s1);

    Ok(AugmentedSample {
        i1,
        i2,
        s1,
        s2,
        u_target,
        paste_mask,
        occ_orig: occ_first_pass.clone(),
    })
}

/// Halve the flow on sky-class pixels (class 10); everything else, including
/// ignore-labeled pixels, is untouched.
pub fn shrink_sky_flow(flow: &FlowField, sem: &SemanticMap) -> FlowField {
    let mut out = flow.clone();
    for y in 0..flow.height() {
        for x in 0..flow.width() {
            if sem.ids[[y, x]] == CLASS_SKY {
                out.data[[0, y, x]] *= 0.5;
                out.data[[1, y, x]] *= 0.5;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
