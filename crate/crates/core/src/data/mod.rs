//! Dataset generation, on-disk layout, preprocessing, and file codecs.
//!
//! Directory layout: `<root>/<id>_img1.png`, `<id>_img2.png`,
//! `<id>_sem1.png`, `<id>_sem2.png`, optional `<id>_flow.png` (KITTI
//! encoding) or `<id>_flow.flo`, plus `manifest.txt` with one
//! `<id> <train|val>` line per sample.

pub mod codecs;
pub mod scene;

pub use codecs::{
    read_flo, read_image, read_kitti_png, read_semantic, write_flo, write_image, write_kitti_png,
    write_semantic, FLO_MAGIC,
};
pub use scene::{
    generate_toy_scene, random_scene_spec, ObjectShape, SceneGenParams, SceneObject, SceneSpec,
};

use crate::error::{Error, Result};
use crate::types::*;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use semarflow_autograd::resize_plane;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub entries: Vec<(String, Split)>,
}

impl Manifest {
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let mut text = String::new();
    for (id, split) in &manifest.entries {
        text.push_str(&format!("{id} {split}\n"));
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(path.clone(), e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let id = parts.next().unwrap().to_string();
        let split = match parts.next() {
            Some("train") => Split::Train,
            Some("val") => Split::Val,
            other => {
                return Err(Error::format(
                    &path,
                    0,
                    format!("manifest line {}: bad split {:?}", lineno + 1, other),
                ))
            }
        };
        entries.push((id, split));
    }
    Ok(Manifest { entries })
}

/// Write one sample in the directory layout (ground-truth flow, when
/// present, goes to the KITTI PNG codec so validity is preserved).
pub fn write_sample(dir: &Path, sample: &Sample) -> Result<()> {
    let p = |suffix: &str| dir.join(format!("{}_{suffix}", sample.id));
    write_image(&p("img1.png"), &sample.i1)?;
    write_image(&p("img2.png"), &sample.i2)?;
    write_semantic(&p("sem1.png"), &sample.s1)?;
    write_semantic(&p("sem2.png"), &sample.s2)?;
    if let (Some(flow), Some(valid)) = (&sample.gt_flow, &sample.gt_valid) {
        write_kitti_png(&p("flow.png"), flow, valid)?;
    }
    Ok(())
}

pub fn load_sample(dir: &Path, id: &str) -> Result<Sample> {
    let p = |suffix: &str| dir.join(format!("{id}_{suffix}"));
    let i1 = read_image(&p("img1.png"))?;
    let i2 = read_image(&p("img2.png"))?;
    let s1 = read_semantic(&p("sem1.png"))?;
    let s2 = read_semantic(&p("sem2.png"))?;
    let (gt_flow, gt_valid) = {
        let png = p("flow.png");
        let flo = p("flow.flo");
        if png.exists() {
            let (f, v) = read_kitti_png(&png)?;
            (Some(f), Some(v))
        } else if flo.exists() {
            let f = read_flo(&flo)?;
            let v = Array2::ones((f.height(), f.width()));
            (Some(f), Some(v))
        } else {
            (None, None)
        }
    };
    let sample = Sample {
        i1,
        i2,
        s1,
        s2,
        gt_flow,
        gt_valid,
        gt_occ: None,
        id: id.to_string(),
    };
    sample.check_consistent()?;
    Ok(sample)
}

/// Deterministically generate `count` samples in memory. Per-sample seeds
/// derive from (base seed, index), so generation order is irrelevant.
pub fn generate_dataset_in_memory(
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
    params: &SceneGenParams,
) -> Result<Vec<Sample>> {
    check_resolution(height, width)?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let spec = random_scene_spec(height, width, seed ^ (i as u64).wrapping_mul(0x9E37), params);
            let mut s = generate_toy_scene(&spec)?;
            s.id = format!("{i:06}");
            Ok(s)
        })
        .collect()
}

/// Generate and write a dataset directory plus manifest (90/10 train/val
/// split by index). Byte-identical across runs with the same arguments.
pub fn generate_dataset(
    dir: &Path,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
    params: &SceneGenParams,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let samples = generate_dataset_in_memory(count, height, width, seed, params)?;
    let mut manifest = Manifest::default();
    for (i, s) in samples.iter().enumerate() {
        write_sample(dir, s)?;
        let split = if count >= 10 && i % 10 == 9 {
            Split::Val
        } else {
            Split::Train
        };
        manifest.entries.push((s.id.clone(), split));
    }
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn check_resolution(height: usize, width: usize) -> Result<()> {
    if height == 0 || height % 64 != 0 {
        return Err(Error::dimension(
            "height",
            format!("{height} is not a positive multiple of 64"),
        ));
    }
    if width == 0 || width % 64 != 0 {
        return Err(Error::dimension(
            "width",
            format!("{width} is not a positive multiple of 64"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Target (height, width); `None` keeps the input resolution.
    pub target: Option<(usize, usize)>,
    pub hflip_prob: f64,
    pub swap_prob: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target: None,
            hflip_prob: 0.5,
            swap_prob: 0.5,
        }
    }
}

fn nearest_taps(out_len: usize, in_len: usize) -> Vec<usize> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            (src.round().max(0.0) as usize).min(in_len - 1)
        })
        .collect()
}

fn resize_image(img: &Image, ho: usize, wo: usize) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = Array3::<f32>::zeros((3, ho, wo));
    for c in 0..3 {
        let plane: Vec<f32> = img.data.index_axis(ndarray::Axis(0), c).iter().copied().collect();
        let res = resize_plane(&plane, h, w, ho, wo);
        out.index_axis_mut(ndarray::Axis(0), c)
            .assign(&Array2::from_shape_vec((ho, wo), res).unwrap());
    }
    Image::new(out)
}

fn resize_nearest_u8(arr: &Array2<u8>, ho: usize, wo: usize) -> Array2<u8> {
    let (h, w) = (arr.shape()[0], arr.shape()[1]);
    let ys = nearest_taps(ho, h);
    let xs = nearest_taps(wo, w);
    Array2::from_shape_fn((ho, wo), |(y, x)| arr[[ys[y], xs[x]]])
}

fn resize_flow(flow: &FlowField, ho: usize, wo: usize) -> FlowField {
    let (h, w) = (flow.height(), flow.width());
    let su = wo as f32 / w as f32;
    let sv = ho as f32 / h as f32;
    let mut out = Array3::<f32>::zeros((2, ho, wo));
    for (c, s) in [(0usize, su), (1usize, sv)] {
        let plane: Vec<f32> = flow.data.index_axis(ndarray::Axis(0), c).iter().copied().collect();
        let res = resize_plane(&plane, h, w, ho, wo);
        let scaled: Vec<f32> = res.into_iter().map(|v| v * s).collect();
        out.index_axis_mut(ndarray::Axis(0), c)
            .assign(&Array2::from_shape_vec((ho, wo), scaled).unwrap());
    }
    FlowField::new(out)
}

fn hflip_sample(s: &mut Sample) {
    let flip3 = |a: &mut Array3<f32>| a.invert_axis(ndarray::Axis(2));
    let flip2u8 = |a: &mut Array2<u8>| a.invert_axis(ndarray::Axis(1));
    flip3(&mut s.i1.data);
    flip3(&mut s.i2.data);
    flip2u8(&mut s.s1.ids);
    flip2u8(&mut s.s2.ids);
    if let Some(f) = &mut s.gt_flow {
        f.data.invert_axis(ndarray::Axis(2));
        // mirrored x axis negates the horizontal component
        f.data.index_axis_mut(ndarray::Axis(0), 0).mapv_inplace(|v| -v);
    }
    if let Some(v) = &mut s.gt_valid {
        flip2u8(v);
    }
    if let Some(o) = &mut s.gt_occ {
        flip2u8(&mut o.data);
    }
}

/// Resize / random horizontal flip / random frame swap. Swapping reverses
/// time, so ground truth is dropped (the reverse field is not available
/// without forward-warping). One-hot semantic encoding is deferred to the
/// network input.
pub fn preprocess(sample: &Sample, cfg: &PreprocessConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let mut s = sample.clone();
    if let Some((ho, wo)) = cfg.target {
        check_resolution(ho, wo)?;
        if (ho, wo) != (s.height(), s.width()) {
            s.i1 = resize_image(&s.i1, ho, wo);
            s.i2 = resize_image(&s.i2, ho, wo);
            s.s1 = SemanticMap::from_raw(resize_nearest_u8(&s.s1.ids, ho, wo));
            s.s2 = SemanticMap::from_raw(resize_nearest_u8(&s.s2.ids, ho, wo));
            s.gt_flow = s.gt_flow.map(|f| resize_flow(&f, ho, wo));
            s.gt_valid = s.gt_valid.map(|v| resize_nearest_u8(&v, ho, wo));
            s.gt_occ = s.gt_occ.map(|o| OcclusionMask {
                data: resize_nearest_u8(&o.data, ho, wo),
            });
        }
    }
    // Stable draw order regardless of probabilities.
    let do_flip = rng.random_bool(cfg.hflip_prob.clamp(0.0, 1.0));
    let do_swap = rng.random_bool(cfg.swap_prob.clamp(0.0, 1.0));
    if do_flip {
        hflip_sample(&mut s);
    }
    if do_swap {
        std::mem::swap(&mut s.i1, &mut s.i2);
        std::mem::swap(&mut s.s1, &mut s.s2);
        s.gt_flow = None;
        s.gt_valid = None;
        s.gt_occ = None;
    }
    Ok(s)
}

/// Convenience: dataset root plus manifest.
pub struct DiskDataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl DiskDataset {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(DiskDataset {
            root: root.to_path_buf(),
            manifest: read_manifest(root)?,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.manifest
            .ids(split)
            .into_iter()
            .map(|id| load_sample(&self.root, id))
            .collect()
    }
}
