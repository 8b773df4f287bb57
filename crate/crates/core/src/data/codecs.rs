//! Bit-exact file codecs: Middlebury .flo rasters, KITTI 16-bit flow PNGs,
//! and 8-bit semantic-map / image PNGs.

use crate::error::{Error, Result};
use crate::types::{FlowField, Image, SemanticMap, IGNORE_LABEL, NUM_CLASSES};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Middlebury magic number ("PIEH" as a little-endian f32).
pub const FLO_MAGIC: f32 = 202021.25;
/// Sanity bound on raster dimensions.
const MAX_DIM: i32 = 100_000;
/// KITTI PNG offset: stored = value * 64 + 2^15.
const KITTI_SCALE: f32 = 64.0;
const KITTI_OFFSET: f32 = 32768.0;

/// Write a Middlebury .flo raster. The format carries no validity channel,
/// so `valid` is not representable here (use the KITTI PNG codec for that).
pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.write_f32::<LittleEndian>(FLO_MAGIC).map_err(io_err)?;
    w.write_i32::<LittleEndian>(flow.width() as i32)
        .map_err(io_err)?;
    w.write_i32::<LittleEndian>(flow.height() as i32)
        .map_err(io_err)?;
    for y in 0..flow.height() {
        for x in 0..flow.width() {
            w.write_f32::<LittleEndian>(flow.data[[0, y, x]])
                .map_err(io_err)?;
            w.write_f32::<LittleEndian>(flow.data[[1, y, x]])
                .map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let io_err = |e: std::io::Error| Error::io(path, e);
    let magic = r.read_f32::<LittleEndian>().map_err(io_err)?;
    if magic != FLO_MAGIC {
        return Err(Error::format(
            path,
            0,
            format!("bad magic {magic}, expected {FLO_MAGIC}"),
        ));
    }
    let w = r.read_i32::<LittleEndian>().map_err(io_err)?;
    if w <= 0 || w > MAX_DIM {
        return Err(Error::format(path, 4, format!("width {w} out of range")));
    }
    let h = r.read_i32::<LittleEndian>().map_err(io_err)?;
    if h <= 0 || h > MAX_DIM {
        return Err(Error::format(path, 8, format!("height {h} out of range")));
    }
    let (w, h) = (w as usize, h as usize);
    let mut data = Array3::<f32>::zeros((2, h, w));
    let mut buf = vec![0u8; w * 2 * 4];
    for y in 0..h {
        r.read_exact(&mut buf).map_err(|_| {
            Error::format(
                path,
                12 + (y * w * 8) as u64,
                "truncated flow data".to_string(),
            )
        })?;
        for x in 0..w {
            data[[0, y, x]] = f32::from_le_bytes(buf[8 * x..8 * x + 4].try_into().unwrap());
            data[[1, y, x]] = f32::from_le_bytes(buf[8 * x + 4..8 * x + 8].try_into().unwrap());
        }
    }
    Ok(FlowField::new(data))
}

/// Write a KITTI-style 16-bit 3-channel flow PNG: u16 = round(v * 64 + 2^15),
/// third channel = validity in {0, 1}. Invalid pixels store zero flow.
pub fn write_kitti_png(path: &Path, flow: &FlowField, valid: &Array2<u8>) -> Result<()> {
    let (h, w) = (flow.height(), flow.width());
    if valid.shape() != [h, w] {
        return Err(Error::dimension(
            "height/width",
            format!("valid mask {:?} vs flow {h}x{w}", valid.shape()),
        ));
    }
    let mut buf = vec![0u16; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let ok = valid[[y, x]] != 0;
            let idx = (y * w + x) * 3;
            if ok {
                for (c, off) in [(0usize, 0usize), (1, 1)] {
                    let v = flow.data[[c, y, x]];
                    let enc = (v * KITTI_SCALE + KITTI_OFFSET).round();
                    if !(0.0..=65535.0).contains(&enc) {
                        return Err(Error::format(
                            path,
                            0,
                            format!("flow value {v} at ({y}, {x}) overflows the 16-bit encoding"),
                        ));
                    }
                    buf[idx + off] = enc as u16;
                }
                buf[idx + 2] = 1;
            } else {
                buf[idx] = KITTI_OFFSET as u16;
                buf[idx + 1] = KITTI_OFFSET as u16;
                buf[idx + 2] = 0;
            }
        }
    }
    let img: image::ImageBuffer<image::Rgb<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(w as u32, h as u32, buf).unwrap();
    image::DynamicImage::ImageRgb16(img)
        .save(path)
        .map_err(|e| Error::format(path, 0, format!("png encode failed: {e}")))
}

pub fn read_kitti_png(path: &Path) -> Result<(FlowField, Array2<u8>)> {
    let img = image::open(path).map_err(|e| Error::format(path, 0, format!("png open failed: {e}")))?;
    let rgb16 = match img {
        image::DynamicImage::ImageRgb16(b) => b,
        other => {
            return Err(Error::format(
                path,
                0,
                format!(
                    "wrong bit depth or layout: expected 16-bit RGB, got {:?}",
                    other.color()
                ),
            ))
        }
    };
    let (w, h) = (rgb16.width() as usize, rgb16.height() as usize);
    let raw = rgb16.into_raw();
    let mut data = Array3::<f32>::zeros((2, h, w));
    let mut valid = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let idx = (y * w + x) * 3;
            data[[0, y, x]] = (raw[idx] as f32 - KITTI_OFFSET) / KITTI_SCALE;
            data[[1, y, x]] = (raw[idx + 1] as f32 - KITTI_OFFSET) / KITTI_SCALE;
            let v = raw[idx + 2];
            valid[[y, x]] = if v != 0 { 1 } else { 0 };
            if v == 0 {
                data[[0, y, x]] = 0.0;
                data[[1, y, x]] = 0.0;
            }
        }
    }
    Ok((FlowField::new(data), valid))
}

/// Write a trainId semantic map as an 8-bit single-channel PNG.
pub fn write_semantic(path: &Path, map: &SemanticMap) -> Result<()> {
    let (h, w) = (map.height(), map.width());
    let buf: Vec<u8> = map.ids.iter().copied().collect();
    let img: image::ImageBuffer<image::Luma<u8>, Vec<u8>> =
        image::ImageBuffer::from_raw(w as u32, h as u32, buf).unwrap();
    img.save(path)
        .map_err(|e| Error::format(path, 0, format!("png encode failed: {e}")))
}

pub fn read_semantic(path: &Path) -> Result<SemanticMap> {
    let img = image::open(path).map_err(|e| Error::format(path, 0, format!("png open failed: {e}")))?;
    let luma = match img {
        image::DynamicImage::ImageLuma8(b) => b,
        other => {
            return Err(Error::format(
                path,
                0,
                format!(
                    "wrong bit depth or layout: expected 8-bit grayscale, got {:?}",
                    other.color()
                ),
            ))
        }
    };
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    let raw = luma.into_raw();
    for (i, &v) in raw.iter().enumerate() {
        if v as usize >= NUM_CLASSES && v != IGNORE_LABEL {
            return Err(Error::format(
                path,
                0,
                format!("invalid trainId {v} at pixel ({}, {})", i / w, i % w),
            ));
        }
    }
    Ok(SemanticMap::from_raw(
        Array2::from_shape_vec((h, w), raw).unwrap(),
    ))
}

/// Write an RGB image as an 8-bit PNG (values clamped to [0, 1]).
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut buf = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = img.data[[c, y, x]].clamp(0.0, 1.0);
                buf[(y * w + x) * 3 + c] = (v * 255.0).round() as u8;
            }
        }
    }
    let out: image::ImageBuffer<image::Rgb<u8>, Vec<u8>> =
        image::ImageBuffer::from_raw(w as u32, h as u32, buf).unwrap();
    out.save(path)
        .map_err(|e| Error::format(path, 0, format!("png encode failed: {e}")))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::format(path, 0, format!("png open failed: {e}")))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    let mut data = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[[c, y, x]] = raw[(y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Ok(Image::new(data))
}
