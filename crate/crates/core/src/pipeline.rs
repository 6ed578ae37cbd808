//! Mask validity, size routing and the two-branch bookkeeping.
//!
//! A pseudo-mask is valid when the box around its foreground overlaps the
//! annotated box with IoU at least the threshold (0.5 by default). Instances
//! are small when their box area is below `threshold_area` (4096 = 64x64 by
//! default); exactly 4096 counts as large.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grabcut::{self, GrabCutConfig, GrabCutError};
use crate::types::{rasterize_ellipse, BBox, GeometryError, Image, MaskInstance};

pub const DEFAULT_VALIDITY_IOU: f64 = 0.5;
pub const DEFAULT_SIZE_AREA: u64 = 64 * 64;

/// Upper area bounds (exclusive) of the invalid-instance size histogram; the
/// last bucket is open-ended.
pub const HISTOGRAM_UPPER_AREAS: [u64; 5] = [16 * 16, 32 * 32, 64 * 64, 128 * 128, 256 * 256];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("detection score {0} is outside [0, 1]")]
    BadScore(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    GrabCut(#[from] GrabCutError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Validity {
    Valid,
    Invalid,
}

impl Validity {
    pub fn is_valid(self) -> bool {
        self == Validity::Valid
    }
}

/// Valid iff the mask's own box has IoU >= `threshold` with `gt_box`.
/// Empty masks are always invalid.
pub fn validity(mask: &MaskInstance, gt_box: &BBox, threshold: f64) -> Validity {
    match mask.bbox() {
        Some(b) if b.iou(gt_box) >= threshold => Validity::Valid,
        _ => Validity::Invalid,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedMasks {
    pub valid: Vec<(MaskInstance, BBox)>,
    pub invalid: Vec<(MaskInstance, BBox)>,
    pub threshold: f64,
}

/// Stable split into valid and invalid groups.
pub fn partition<I>(masks: I, threshold: f64) -> PartitionedMasks
where
    I: IntoIterator<Item = (MaskInstance, BBox)>,
{
    let (valid, invalid) = masks
        .into_iter()
        .partition(|(m, b)| validity(m, b, threshold).is_valid());
    PartitionedMasks {
        valid,
        invalid,
        threshold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Large,
}

pub fn size_class(bbox: &BBox, threshold_area: u64) -> SizeClass {
    if bbox.area() < threshold_area {
        SizeClass::Small
    } else {
        SizeClass::Large
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBucket {
    /// Exclusive upper bound on box area; `None` for the open last bucket.
    pub bucket_upper_area: Option<u64>,
    pub count: usize,
}

/// Invalid-mask statistics over a corpus of (pseudo-mask, annotated box) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub total_instances: usize,
    pub invalid_count: usize,
    pub invalid_fraction: f64,
    pub small_invalid_over_invalid: f64,
    pub invalid_over_small: f64,
    pub invalid_over_large: f64,
    pub histogram: Vec<HistogramBucket>,
    /// Names of fractions whose denominator was zero; those report 0.
    pub undefined_fractions: Vec<String>,
    pub validity_threshold: f64,
    pub size_threshold_area: u64,
}

fn histogram_bucket(area: u64) -> usize {
    HISTOGRAM_UPPER_AREAS
        .iter()
        .position(|&upper| area < upper)
        .unwrap_or(HISTOGRAM_UPPER_AREAS.len())
}

/// Instance size is the annotated box area.
pub fn compute_stats(
    masks: &[(MaskInstance, BBox)],
    threshold: f64,
    threshold_area: u64,
) -> StatsReport {
    let mut counts = vec![0usize; HISTOGRAM_UPPER_AREAS.len() + 1];
    let (mut invalid, mut small, mut small_invalid, mut large_invalid) = (0, 0, 0, 0);
    for (mask, gt) in masks {
        let is_small = size_class(gt, threshold_area) == SizeClass::Small;
        small += is_small as usize;
        if !validity(mask, gt, threshold).is_valid() {
            invalid += 1;
            counts[histogram_bucket(gt.area())] += 1;
            if is_small {
                small_invalid += 1;
            } else {
                large_invalid += 1;
            }
        }
    }
    let total = masks.len();
    let large = total - small;

    let mut undefined = Vec::new();
    let mut ratio = |name: &str, num: usize, den: usize| {
        if den == 0 {
            undefined.push(name.to_string());
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let invalid_fraction = ratio("invalid_fraction", invalid, total);
    let small_invalid_over_invalid = ratio("small_invalid_over_invalid", small_invalid, invalid);
    let invalid_over_small = ratio("invalid_over_small", small_invalid, small);
    let invalid_over_large = ratio("invalid_over_large", large_invalid, large);

    let histogram = counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBucket {
            bucket_upper_area: HISTOGRAM_UPPER_AREAS.get(i).copied(),
            count,
        })
        .collect();

    StatsReport {
        total_instances: total,
        invalid_count: invalid,
        invalid_fraction,
        small_invalid_over_invalid,
        invalid_over_small,
        invalid_over_large,
        histogram,
        undefined_fractions: undefined,
        validity_threshold: threshold,
        size_threshold_area: threshold_area,
    }
}

impl StatsReport {
    /// `bucket_upper_area,count` rows; the open bucket is written as `inf`.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bucket_upper_area,count\n");
        for b in &self.histogram {
            match b.bucket_upper_area {
                Some(a) => out.push_str(&format!("{a},{}\n", b.count)),
                None => out.push_str(&format!("inf,{}\n", b.count)),
            }
        }
        out
    }
}

/// A detector output consumed by the small-object branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64) -> Result<Self, PipelineError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(PipelineError::BadScore(score));
        }
        Ok(Self { bbox, score })
    }

    pub fn class_id(&self) -> u32 {
        self.bbox.class_id()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskOrigin {
    GrabCut,
    Ellipse,
}

/// GrabCut seeded by the detection box, replaced by the inscribed ellipse when
/// the result fails the validity test against that box.
pub fn segment_detection(
    image: &Image,
    detection: &Detection,
    config: &GrabCutConfig,
    quality_threshold: f64,
) -> Result<(MaskInstance, MaskOrigin), PipelineError> {
    let result = grabcut::run(image, &detection.bbox, config)?;
    let (mask, origin) = if validity(&result.mask, &detection.bbox, quality_threshold).is_valid() {
        (result.mask, MaskOrigin::GrabCut)
    } else {
        let ellipse = rasterize_ellipse(&detection.bbox, image.width(), image.height())?;
        (ellipse, MaskOrigin::Ellipse)
    };
    Ok((
        mask.with_class(detection.class_id()).with_score(detection.score),
        origin,
    ))
}

/// Sequential detect-then-segment: one mask per detection, in order.
pub fn small_branch_segment(
    image: &Image,
    detections: &[Detection],
    config: &GrabCutConfig,
    quality_threshold: f64,
) -> Result<Vec<MaskInstance>, PipelineError> {
    detections
        .iter()
        .map(|d| segment_detection(image, d, config, quality_threshold).map(|(m, _)| m))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Large,
    Small,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedInstance {
    pub branch: Branch,
    /// Position of the mask in its branch's input list.
    pub source_index: usize,
    pub mask: MaskInstance,
}

/// Size routing: large-branch masks that classify Large, then small-branch
/// masks that classify Small. Empty masks are dropped.
pub fn fuse(large_branch: &[MaskInstance], small_branch: &[MaskInstance], threshold_area: u64) -> Vec<FusedInstance> {
    let keep = |branch: Branch, wanted: SizeClass, masks: &[MaskInstance]| -> Vec<FusedInstance> {
        masks
            .iter()
            .enumerate()
            .filter(|(_, m)| m.bbox().is_some_and(|b| size_class(&b, threshold_area) == wanted))
            .map(|(i, m)| FusedInstance {
                branch,
                source_index: i,
                mask: m.clone(),
            })
            .collect()
    };
    let mut out = keep(Branch::Large, SizeClass::Large, large_branch);
    out.extend(keep(Branch::Small, SizeClass::Small, small_branch));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: u32, y0: u32, x1: u32, y1: u32) -> BBox {
        BBox::new(x0, y0, x1, y1, 0).unwrap()
    }

    fn rect_mask(w: u32, h: u32, b: BBox) -> MaskInstance {
        MaskInstance::from_fn(w, h, b.class_id(), 1.0, |x, y| b.contains(x, y)).unwrap()
    }

    #[test]
    fn validity_examples() {
        let gt = bx(5, 0, 15, 10);
        assert_eq!(validity(&rect_mask(20, 20, gt), &gt, 0.5), Validity::Valid);
        assert_eq!(
            validity(&MaskInstance::empty(20, 20, 0, 1.0).unwrap(), &gt, 0.0),
            Validity::Invalid
        );
        assert_eq!(validity(&rect_mask(20, 20, bx(0, 0, 10, 10)), &gt, 0.5), Validity::Invalid);
    }

    #[test]
    fn partition_counts() {
        assert!(partition(Vec::new(), 0.5).valid.is_empty());
        let gt = bx(5, 0, 15, 10);
        let mut items = Vec::new();
        for i in 0..3 {
            items.push((rect_mask(20, 20, gt).with_score(i as f64), gt));
        }
        items.push((rect_mask(20, 20, bx(0, 0, 10, 10)), gt));
        items.push((MaskInstance::empty(20, 20, 0, 1.0).unwrap(), gt));
        let p = partition(items, 0.5);
        assert_eq!((p.valid.len(), p.invalid.len()), (3, 2));
        let order: Vec<f64> = p.valid.iter().map(|(m, _)| m.score()).collect();
        assert_eq!(order, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn size_class_boundaries() {
        assert_eq!(size_class(&bx(0, 0, 63, 63), DEFAULT_SIZE_AREA), SizeClass::Small);
        assert_eq!(size_class(&bx(0, 0, 64, 64), DEFAULT_SIZE_AREA), SizeClass::Large);
        assert_eq!(size_class(&bx(0, 0, 1, 4095), DEFAULT_SIZE_AREA), SizeClass::Small);
    }

    #[test]
    fn stats_counting_example() {
        // 10 instances: 4 small (2 invalid), 6 large (1 invalid)
        let (w, h) = (200, 200);
        let mut items = Vec::new();
        let small = bx(0, 0, 20, 20);
        let large = bx(0, 0, 100, 100);
        for i in 0..4 {
            let m = if i < 2 { MaskInstance::empty(w, h, 0, 1.0).unwrap() } else { rect_mask(w, h, small) };
            items.push((m, small));
        }
        for i in 0..6 {
            let m = if i < 1 { MaskInstance::empty(w, h, 0, 1.0).unwrap() } else { rect_mask(w, h, large) };
            items.push((m, large));
        }
        let r = compute_stats(&items, 0.5, DEFAULT_SIZE_AREA);
        assert_eq!(r.total_instances, 10);
        assert_eq!(r.invalid_count, 3);
        assert_eq!(r.small_invalid_over_invalid, 2.0 / 3.0);
        assert_eq!(r.invalid_over_small, 0.5);
        assert_eq!(r.invalid_over_large, 1.0 / 6.0);
        assert_eq!(r.histogram.iter().map(|b| b.count).sum::<usize>(), 3);
        // 20x20 = 400 falls in the <32^2 bucket, 100x100 in <128^2
        assert_eq!(r.histogram[1].count, 2);
        assert_eq!(r.histogram[3].count, 1);
    }

    #[test]
    fn stats_all_valid_and_empty() {
        let b = bx(0, 0, 10, 10);
        let r = compute_stats(&[(rect_mask(16, 16, b), b)], 0.5, DEFAULT_SIZE_AREA);
        assert_eq!(r.invalid_fraction, 0.0);
        assert_eq!(r.undefined_fractions, vec!["small_invalid_over_invalid", "invalid_over_large"]);
        let r = compute_stats(&[], 0.5, DEFAULT_SIZE_AREA);
        assert_eq!(r.undefined_fractions.len(), 4);
        assert_eq!(r.histogram_csv().lines().count(), 1 + HISTOGRAM_UPPER_AREAS.len() + 1);
    }

    #[test]
    fn csv_format() {
        let r = compute_stats(&[], 0.5, DEFAULT_SIZE_AREA);
        let csv = r.histogram_csv();
        assert!(csv.starts_with("bucket_upper_area,count\n256,0\n"));
        assert!(csv.ends_with("inf,0\n"));
    }

    #[test]
    fn fuse_routing() {
        let (w, h) = (200, 200);
        let small = rect_mask(w, h, bx(0, 0, 32, 32));
        let large = rect_mask(w, h, bx(50, 50, 178, 178));
        let out = fuse(&[large.clone()], &[small.clone()], DEFAULT_SIZE_AREA);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].branch, Branch::Large);
        assert_eq!(out[1].branch, Branch::Small);

        assert!(fuse(&[small.clone()], &[], DEFAULT_SIZE_AREA).is_empty());
        assert!(fuse(&[], &[], DEFAULT_SIZE_AREA).is_empty());
        let empty = MaskInstance::empty(w, h, 0, 1.0).unwrap();
        assert!(fuse(&[empty.clone()], &[empty], DEFAULT_SIZE_AREA).is_empty());
        let boundary = rect_mask(w, h, bx(0, 0, 64, 64));
        assert_eq!(fuse(&[boundary.clone()], &[boundary], DEFAULT_SIZE_AREA).len(), 1);
    }

    #[test]
    fn detection_score_range() {
        assert!(Detection::new(bx(0, 0, 2, 2), 1.5).is_err());
        assert!(Detection::new(bx(0, 0, 2, 2), 0.5).is_ok());
    }

    #[test]
    fn constant_region_falls_back_to_ellipse() {
        let img = Image::filled(40, 40, [128, 128, 128]).unwrap();
        let det = Detection::new(BBox::new(5, 6, 25, 20, 2).unwrap(), 0.7).unwrap();
        let (mask, origin) = segment_detection(&img, &det, &GrabCutConfig::default(), 0.5).unwrap();
        let ellipse = rasterize_ellipse(&det.bbox, 40, 40).unwrap();
        assert_eq!(origin, MaskOrigin::Ellipse);
        assert_eq!(mask.bits(), ellipse.bits());
        assert_eq!(mask.bbox(), Some(det.bbox));
        assert_eq!((mask.class_id(), mask.score()), (2, 0.7));
    }
}
