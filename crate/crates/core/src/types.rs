//! Core domain types: images, flow fields, semantic maps, samples.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};

/// Number of semantic classes (Cityscapes trainId convention).
pub const NUM_CLASSES: usize = 19;
/// Ignore label for unlabeled pixels.
pub const IGNORE_LABEL: u8 = 255;

pub const CLASS_ROAD: u8 = 0;
pub const CLASS_SIDEWALK: u8 = 1;
pub const CLASS_BUILDING: u8 = 2;
pub const CLASS_WALL: u8 = 3;
pub const CLASS_FENCE: u8 = 4;
pub const CLASS_POLE: u8 = 5;
pub const CLASS_TRAFFIC_LIGHT: u8 = 6;
pub const CLASS_TRAFFIC_SIGN: u8 = 7;
pub const CLASS_VEGETATION: u8 = 8;
pub const CLASS_TERRAIN: u8 = 9;
pub const CLASS_SKY: u8 = 10;
pub const CLASS_PERSON: u8 = 11;
pub const CLASS_RIDER: u8 = 12;
pub const CLASS_CAR: u8 = 13;
pub const CLASS_TRUCK: u8 = 14;
pub const CLASS_BUS: u8 = 15;
pub const CLASS_TRAIN: u8 = 16;
pub const CLASS_MOTORCYCLE: u8 = 17;
pub const CLASS_BICYCLE: u8 = 18;

/// Vehicle classes mined for copy-paste occluders.
pub const VEHICLE_CLASSES: [u8; 4] = [CLASS_CAR, CLASS_TRUCK, CLASS_BUS, CLASS_TRAIN];
/// Pole-like classes mined via the sliding window.
pub const POLE_CLASSES: [u8; 3] = [CLASS_POLE, CLASS_TRAFFIC_LIGHT, CLASS_TRAFFIC_SIGN];

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

/// RGB image, layout [3, H, W], values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub data: Array3<f32>,
}

impl Image {
    pub fn new(data: Array3<f32>) -> Self {
        debug_assert_eq!(data.shape()[0], 3);
        Image { data }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Clamp values into [0, 1] (applied at I/O boundaries).
    pub fn clamped(mut self) -> Self {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        self
    }
}

/// Dense displacement field frame-1 -> frame-2 under the backward-warping
/// convention. Layout [2, H, W]; channel 0 is u (x), channel 1 is v (y),
/// both in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub data: Array3<f32>,
}

impl FlowField {
    pub fn new(data: Array3<f32>) -> Self {
        debug_assert_eq!(data.shape()[0], 2);
        FlowField { data }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            data: Array3::zeros((2, h, w)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Per-pixel occlusion indicator; 1 = occluded.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask {
    pub data: Array2<u8>,
}

impl OcclusionMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        OcclusionMask {
            data: Array2::zeros((h, w)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Per-pixel class ids in the 19-class trainId convention (255 = ignore).
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap {
    pub ids: Array2<u8>,
}

impl SemanticMap {
    pub fn new(ids: Array2<u8>) -> Result<Self> {
        for (idx, &v) in ids.iter().enumerate() {
            if v as usize >= NUM_CLASSES && v != IGNORE_LABEL {
                let w = ids.shape()[1];
                return Err(Error::format(
                    "<memory>",
                    0,
                    format!(
                        "invalid trainId {v} at pixel ({}, {})",
                        idx / w,
                        idx % w
                    ),
                ));
            }
        }
        Ok(SemanticMap { ids })
    }

    /// Construct without label validation (generator output is valid by
    /// construction).
    pub fn from_raw(ids: Array2<u8>) -> Self {
        SemanticMap { ids }
    }

    pub fn height(&self) -> usize {
        self.ids.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.ids.shape()[1]
    }

    pub fn is_valid(&self) -> bool {
        self.ids
            .iter()
            .all(|&v| (v as usize) < NUM_CLASSES || v == IGNORE_LABEL)
    }
}

/// One training/evaluation unit: an image pair with semantic maps and
/// optional exact ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub i1: Image,
    pub i2: Image,
    pub s1: SemanticMap,
    pub s2: SemanticMap,
    pub gt_flow: Option<FlowField>,
    pub gt_valid: Option<Array2<u8>>,
    /// Exact z-order occlusion from the scene generator, when available.
    pub gt_occ: Option<OcclusionMask>,
    pub id: String,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.i1.height()
    }

    pub fn width(&self) -> usize {
        self.i1.width()
    }

    pub fn check_consistent(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let same = |ah: usize, aw: usize| ah == h && aw == w;
        if !same(self.i2.height(), self.i2.width())
            || !same(self.s1.height(), self.s1.width())
            || !same(self.s2.height(), self.s2.width())
        {
            return Err(Error::dimension(
                "height/width",
                format!("sample {} fields disagree on resolution", self.id),
            ));
        }
        if self.gt_flow.is_some() != self.gt_valid.is_some() {
            return Err(Error::Config(format!(
                "sample {}: gt_valid must be present iff gt_flow is",
                self.id
            )));
        }
        Ok(())
    }
}
