//! EPE / Fl metrics with non-occluded/occluded and per-semantic-class
//! breakdowns, plus JSON and CSV report serialization.
//!
//! All accumulation runs in f64. Whole-image metrics are derived from the
//! partition sums, so the share-weighted combination identity holds exactly.

use crate::error::{Error, Result};
use crate::types::{FlowField, OcclusionMask, SemanticMap, CLASS_NAMES, IGNORE_LABEL, NUM_CLASSES};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// A pixel is an outlier iff its endpoint error is >= 3 px AND >= 5% of the
/// ground-truth magnitude (the complement of the benchmark's "correct").
pub const FL_ABS_THRESHOLD: f64 = 3.0;
pub const FL_REL_THRESHOLD: f64 = 0.05;

fn endpoint_error(pred: &FlowField, gt: &FlowField, y: usize, x: usize) -> f64 {
    let du = pred.data[[0, y, x]] as f64 - gt.data[[0, y, x]] as f64;
    let dv = pred.data[[1, y, x]] as f64 - gt.data[[1, y, x]] as f64;
    (du * du + dv * dv).sqrt()
}

fn gt_magnitude(gt: &FlowField, y: usize, x: usize) -> f64 {
    let u = gt.data[[0, y, x]] as f64;
    let v = gt.data[[1, y, x]] as f64;
    (u * u + v * v).sqrt()
}

fn is_outlier(err: f64, mag: f64) -> bool {
    err >= FL_ABS_THRESHOLD && err >= FL_REL_THRESHOLD * mag
}

fn check_same_shape(pred: &FlowField, gt: &FlowField, valid: &Array2<u8>) -> Result<()> {
    if pred.data.shape() != gt.data.shape() || valid.shape() != [pred.height(), pred.width()] {
        return Err(Error::dimension(
            "height/width",
            format!(
                "pred {:?}, gt {:?}, valid {:?}",
                pred.data.shape(),
                gt.data.shape(),
                valid.shape()
            ),
        ));
    }
    Ok(())
}

/// Mean L2 endpoint error over valid pixels.
pub fn epe(pred: &FlowField, gt: &FlowField, valid: &Array2<u8>) -> Result<f64> {
    check_same_shape(pred, gt, valid)?;
    let mut sum = 0.0;
    let mut count = 0u64;
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            if valid[[y, x]] != 0 {
                sum += endpoint_error(pred, gt, y, x);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("epe over zero valid pixels".into()));
    }
    Ok(sum / count as f64)
}

/// Outlier percentage over valid pixels.
pub fn fl_rate(pred: &FlowField, gt: &FlowField, valid: &Array2<u8>) -> Result<f64> {
    check_same_shape(pred, gt, valid)?;
    let mut outliers = 0u64;
    let mut count = 0u64;
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            if valid[[y, x]] != 0 {
                count += 1;
                if is_outlier(endpoint_error(pred, gt, y, x), gt_magnitude(gt, y, x)) {
                    outliers += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("fl over zero valid pixels".into()));
    }
    Ok(100.0 * outliers as f64 / count as f64)
}

/// Relative improvement of a metric, percent: (base - new) / base * 100.
pub fn relative_improvement(baseline: f64, new: f64) -> f64 {
    (baseline - new) / baseline * 100.0
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
struct Bucket {
    epe_sum: f64,
    outliers: u64,
    count: u64,
}

impl Bucket {
    fn add(&mut self, err: f64, outlier: bool) {
        self.epe_sum += err;
        self.outliers += u64::from(outlier);
        self.count += 1;
    }

    fn merge(&mut self, other: &Bucket) {
        self.epe_sum += other.epe_sum;
        self.outliers += other.outliers;
        self.count += other.count;
    }

    fn epe(&self) -> Option<f64> {
        (self.count > 0).then(|| self.epe_sum / self.count as f64)
    }

    fn fl(&self) -> Option<f64> {
        (self.count > 0).then(|| 100.0 * self.outliers as f64 / self.count as f64)
    }
}

/// Per-class row of the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_name: String,
    /// Fraction of evaluated (valid, labeled) pixels in this class.
    pub pixel_share: f64,
    pub fl: f64,
    pub epe: f64,
    /// Percent improvement over a baseline report, when one was given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relative_improvement: Option<f64>,
    /// Share of the total share-weighted Fl improvement, percent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reweighed_contribution: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub epe_all: f64,
    pub epe_noc: Option<f64>,
    pub epe_occ: Option<f64>,
    pub fl_all: f64,
    pub fl_noc: Option<f64>,
    pub per_class: BTreeMap<u8, ClassMetrics>,
    /// Classes absent from the evaluated pixels (flagged, not silently
    /// dropped).
    pub absent_classes: Vec<u8>,
    pub sample_count: usize,
}

/// Streaming accumulator over samples.
#[derive(Debug, Clone, Default)]
pub struct ReportAccumulator {
    noc: Bucket,
    occ: Bucket,
    per_class: BTreeMap<u8, Bucket>,
    samples: usize,
}

impl ReportAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add one sample. `occ` marks occluded pixels (1 = occluded); `sem`
    /// assigns per-class buckets (ignore-labeled pixels count only in the
    /// global partitions).
    pub fn add_sample(
        &mut self,
        pred: &FlowField,
        gt: &FlowField,
        valid: &Array2<u8>,
        occ: &OcclusionMask,
        sem: &SemanticMap,
    ) -> Result<()> {
        check_same_shape(pred, gt, valid)?;
        if occ.data.shape() != valid.shape() || sem.ids.shape() != valid.shape() {
            return Err(Error::dimension(
                "height/width",
                "occlusion/semantic maps disagree with the flow resolution".to_string(),
            ));
        }
        for y in 0..pred.height() {
            for x in 0..pred.width() {
                if valid[[y, x]] == 0 {
                    continue;
                }
                let err = endpoint_error(pred, gt, y, x);
                let outlier = is_outlier(err, gt_magnitude(gt, y, x));
                if occ.data[[y, x]] != 0 {
                    self.occ.add(err, outlier);
                } else {
                    self.noc.add(err, outlier);
                }
                let class = sem.ids[[y, x]];
                if class != IGNORE_LABEL {
                    self.per_class.entry(class).or_default().add(err, outlier);
                }
            }
        }
        self.samples += 1;
        Ok(())
    }

    pub fn finalize(&self, baseline: Option<&EvalReport>) -> Result<EvalReport> {
        let mut all = Bucket::default();
        all.merge(&self.noc);
        all.merge(&self.occ);
        if all.count == 0 {
            return Err(Error::UndefinedMetric(
                "report over zero valid pixels".into(),
            ));
        }
        let labeled_total: u64 = self.per_class.values().map(|b| b.count).sum();

        // Baseline-relative columns need the total share-weighted Fl gain.
        let mut total_gain = 0.0;
        if let Some(base) = baseline {
            for (class, bucket) in &self.per_class {
                if let (Some(base_row), Some(fl)) = (base.per_class.get(class), bucket.fl()) {
                    let share = bucket.count as f64 / labeled_total as f64;
                    total_gain += share * (base_row.fl - fl);
                }
            }
        }

        let mut per_class = BTreeMap::new();
        for (class, bucket) in &self.per_class {
            let fl = bucket.fl().unwrap();
            let share = bucket.count as f64 / labeled_total as f64;
            let (rel, contrib) = match baseline.and_then(|b| b.per_class.get(class)) {
                Some(base_row) => (
                    Some(relative_improvement(base_row.fl, fl)),
                    (total_gain != 0.0)
                        .then(|| 100.0 * share * (base_row.fl - fl) / total_gain),
                ),
                None => (None, None),
            };
            per_class.insert(
                *class,
                ClassMetrics {
                    class_name: CLASS_NAMES[*class as usize].to_string(),
                    pixel_share: share,
                    fl,
                    epe: bucket.epe().unwrap(),
                    relative_improvement: rel,
                    reweighed_contribution: contrib,
                },
            );
        }
        let absent_classes = (0..NUM_CLASSES as u8)
            .filter(|c| !per_class.contains_key(c))
            .collect();

        Ok(EvalReport {
            epe_all: all.epe().unwrap(),
            epe_noc: self.noc.epe(),
            epe_occ: self.occ.epe(),
            fl_all: all.fl().unwrap(),
            fl_noc: self.noc.fl(),
            per_class,
            absent_classes,
            sample_count: self.samples,
        })
    }
}

/// Single-sample report with all/noc/occ partitions and per-class rows.
pub fn region_report(
    pred: &FlowField,
    gt: &FlowField,
    valid: &Array2<u8>,
    occ: &OcclusionMask,
    sem: &SemanticMap,
    baseline: Option<&EvalReport>,
) -> Result<EvalReport> {
    let mut acc = ReportAccumulator::new();
    acc.add_sample(pred, gt, valid, occ, sem)?;
    acc.finalize(baseline)
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            path: "<report>".into(),
            offset: 0,
            msg: format!("bad report JSON: {e}"),
        })
    }

    /// Per-class CSV table (one row per present class).
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from(
            "class_id,class_name,pixel_share,fl,epe,relative_improvement,reweighed_contribution\n",
        );
        for (id, row) in &self.per_class {
            let rel = row
                .relative_improvement
                .map(|v| format!("{v:.4}"))
                .unwrap_or_default();
            let contrib = row
                .reweighed_contribution
                .map(|v| format!("{v:.4}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{id},{},{:.6},{:.4},{:.4},{rel},{contrib}\n",
                row.class_name, row.pixel_share, row.fl, row.epe
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn flow_of(u: f32, v: f32, h: usize, w: usize) -> FlowField {
        FlowField::new(Array3::from_shape_fn((2, h, w), |(c, _, _)| {
            if c == 0 {
                u
            } else {
                v
            }
        }))
    }

    #[test]
    fn epe_examples() {
        let (h, w) = (4, 6);
        let valid = Array2::ones((h, w));
        let gt = flow_of(1.0, 2.0, h, w);
        assert_eq!(epe(&gt, &gt, &valid).unwrap(), 0.0);

        let pred = flow_of(4.0, 6.0, h, w); // error (3, 4) -> 5
        assert_eq!(epe(&pred, &gt, &valid).unwrap(), 5.0);

        // half pixels off by (1, 0), half exact -> 0.5
        let mut p = gt.clone();
        for y in 0..h {
            for x in 0..w / 2 {
                p.data[[0, y, x]] += 1.0;
            }
        }
        assert_eq!(epe(&p, &gt, &valid).unwrap(), 0.5);
    }

    #[test]
    fn epe_with_no_valid_pixels_is_undefined() {
        let valid = Array2::zeros((3, 3));
        let f = flow_of(0.0, 0.0, 3, 3);
        assert!(matches!(
            epe(&f, &f, &valid),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn fl_rule_boundary_cases() {
        let valid = Array2::ones((1, 1));
        // error 2 px, |gt| = 10 -> correct (under 3 px)
        let gt = flow_of(10.0, 0.0, 1, 1);
        let pred = flow_of(12.0, 0.0, 1, 1);
        assert_eq!(fl_rate(&pred, &gt, &valid).unwrap(), 0.0);

        // error 4 px, |gt| = 100 -> correct (4 < 5% of 100)
        let gt = flow_of(100.0, 0.0, 1, 1);
        let pred = flow_of(104.0, 0.0, 1, 1);
        assert_eq!(fl_rate(&pred, &gt, &valid).unwrap(), 0.0);

        // error 4 px, |gt| = 10 -> outlier (>= 3 px and >= 0.5 px)
        let gt = flow_of(10.0, 0.0, 1, 1);
        let pred = flow_of(14.0, 0.0, 1, 1);
        assert_eq!(fl_rate(&pred, &gt, &valid).unwrap(), 100.0);
    }

    #[test]
    fn metrics_agree_with_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..5 {
            let (h, w) = (32, 32);
            let pred = FlowField::new(Array3::from_shape_fn((2, h, w), |_| {
                rng.random_range(-30.0f32..30.0)
            }));
            let gt = FlowField::new(Array3::from_shape_fn((2, h, w), |_| {
                rng.random_range(-30.0f32..30.0)
            }));
            let valid = Array2::from_shape_fn((h, w), |_| u8::from(rng.random_bool(0.8)));

            // brute force
            let mut sum = 0.0f64;
            let mut outliers = 0u64;
            let mut n = 0u64;
            for y in 0..h {
                for x in 0..w {
                    if valid[[y, x]] == 0 {
                        continue;
                    }
                    let du = pred.data[[0, y, x]] as f64 - gt.data[[0, y, x]] as f64;
                    let dv = pred.data[[1, y, x]] as f64 - gt.data[[1, y, x]] as f64;
                    let e = du.hypot(dv);
                    let m = (gt.data[[0, y, x]] as f64).hypot(gt.data[[1, y, x]] as f64);
                    sum += e;
                    if e >= 3.0 && e >= 0.05 * m {
                        outliers += 1;
                    }
                    n += 1;
                }
            }
            let expect_epe = sum / n as f64;
            let expect_fl = 100.0 * outliers as f64 / n as f64;
            assert!((epe(&pred, &gt, &valid).unwrap() - expect_epe).abs() < 1e-12);
            assert!((fl_rate(&pred, &gt, &valid).unwrap() - expect_fl).abs() < 1e-12);
        }
    }

    #[test]
    fn fl_is_invariant_under_joint_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (h, w) = (8, 8);
        let pred = FlowField::new(Array3::from_shape_fn((2, h, w), |_| {
            rng.random_range(-20.0f32..20.0)
        }));
        let gt = FlowField::new(Array3::from_shape_fn((2, h, w), |_| {
            rng.random_range(-20.0f32..20.0)
        }));
        let valid = Array2::ones((h, w));
        let base = fl_rate(&pred, &gt, &valid).unwrap();
        for angle in [0.3f32, 1.2, 2.9] {
            let (s, c) = angle.sin_cos();
            let rot = |f: &FlowField| {
                let mut g = f.clone();
                for y in 0..h {
                    for x in 0..w {
                        let (u, v) = (f.data[[0, y, x]], f.data[[1, y, x]]);
                        g.data[[0, y, x]] = c * u - s * v;
                        g.data[[1, y, x]] = s * u + c * v;
                    }
                }
                g
            };
            let got = fl_rate(&rot(&pred), &rot(&gt), &valid).unwrap();
            assert!((got - base).abs() < 1e-9, "angle {angle}: {got} vs {base}");
        }
    }

    fn two_class_setup() -> (FlowField, FlowField, Array2<u8>, OcclusionMask, SemanticMap) {
        let (h, w) = (10, 10);
        let gt = flow_of(0.0, 0.0, h, w);
        let pred = flow_of(1.0, 0.0, h, w);
        let valid = Array2::ones((h, w));
        let occ = OcclusionMask::zeros(h, w);
        // class 0 covers 60 pixels, class 13 covers 40
        let sem = SemanticMap::from_raw(Array2::from_shape_fn((h, w), |(y, _)| {
            if y < 6 {
                0u8
            } else {
                13u8
            }
        }));
        (pred, gt, valid, occ, sem)
    }

    #[test]
    fn uniform_error_report_shares_and_epe() {
        let (pred, gt, valid, occ, sem) = two_class_setup();
        let report = region_report(&pred, &gt, &valid, &occ, &sem, None).unwrap();
        assert!((report.epe_all - 1.0).abs() < 1e-12);
        let road = &report.per_class[&0];
        let car = &report.per_class[&13];
        assert!((road.pixel_share - 0.6).abs() < 1e-12);
        assert!((car.pixel_share - 0.4).abs() < 1e-12);
        assert!((road.epe - 1.0).abs() < 1e-12);
        assert!((car.epe - 1.0).abs() < 1e-12);
        assert!(report.absent_classes.contains(&10));
        let share_sum: f64 = report.per_class.values().map(|r| r.pixel_share).sum();
        assert!((share_sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn whole_image_metrics_equal_share_weighted_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let (h, w) = (16, 16);
        let pred = FlowField::new(Array3::from_shape_fn((2, h, w), |_| {
            rng.random_range(-10.0f32..10.0)
        }));
        let gt = FlowField::new(Array3::from_shape_fn((2, h, w), |_| {
            rng.random_range(-10.0f32..10.0)
        }));
        let valid = Array2::ones((h, w));
        let occ = OcclusionMask {
            data: Array2::from_shape_fn((h, w), |_| u8::from(rng.random_bool(0.3))),
        };
        let sem = SemanticMap::from_raw(Array2::zeros((h, w)));
        let r = region_report(&pred, &gt, &valid, &occ, &sem, None).unwrap();
        let n_occ = occ.data.iter().filter(|&&v| v != 0).count() as f64;
        let n_noc = (h * w) as f64 - n_occ;
        let total = n_occ + n_noc;
        let combo = (n_noc * r.epe_noc.unwrap() + n_occ * r.epe_occ.unwrap()) / total;
        assert!((combo - r.epe_all).abs() < 1e-12);
    }

    #[test]
    fn baseline_columns_reproduce_reference_arithmetic() {
        // relative improvement for the car row's published numbers
        let rel = relative_improvement(15.79, 10.17);
        assert!((rel - 35.6).abs() < 0.1, "got {rel}");

        // end-to-end through reports: make two runs with controlled fl
        let (h, w) = (10, 10);
        let gt = flow_of(10.0, 0.0, h, w);
        let valid = Array2::ones((h, w));
        let occ = OcclusionMask::zeros(h, w);
        let sem = SemanticMap::from_raw(Array2::zeros((h, w)));
        // baseline: all pixels outliers; new: 40 of 100 outliers
        let base_pred = flow_of(20.0, 0.0, h, w);
        let mut new_pred = flow_of(10.0, 0.0, h, w);
        for y in 0..4 {
            for x in 0..w {
                new_pred.data[[0, y, x]] = 20.0;
            }
        }
        let base = region_report(&base_pred, &gt, &valid, &occ, &sem, None).unwrap();
        let new = region_report(&new_pred, &gt, &valid, &occ, &sem, Some(&base)).unwrap();
        let row = &new.per_class[&0];
        assert!((row.relative_improvement.unwrap() - 60.0).abs() < 1e-9);
        assert!((row.reweighed_contribution.unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn report_roundtrips_through_json_and_emits_csv() {
        let (pred, gt, valid, occ, sem) = two_class_setup();
        let report = region_report(&pred, &gt, &valid, &occ, &sem, None).unwrap();
        let json = report.to_json();
        let back = EvalReport::from_json(&json).unwrap();
        assert_eq!(back.sample_count, 1);
        assert!((back.epe_all - report.epe_all).abs() < 1e-12);
        let csv = report.per_class_csv();
        assert!(csv.lines().count() == 3); // header + 2 classes
        assert!(csv.contains("car"));
    }
}
