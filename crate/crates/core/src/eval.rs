//! Region-level AP at mask-IoU thresholds, mAP over classes, and ABO.
//!
//! Predictions of one class are ranked by descending score over the whole
//! corpus (ties keep image order, then list order). Within an image each
//! prediction greedily takes the unmatched ground truth of the same class
//! with the highest mask IoU, counting as a true positive when that IoU
//! reaches the threshold.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{mask_iou, MaskInstance};

pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.5, 0.75];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{predictions} prediction lists for {images} ground-truth images")]
    ImageCountMismatch { predictions: usize, images: usize },
    #[error("image {image}: mask {index} is {got_w}x{got_h}, image is {width}x{height}")]
    DimensionMismatch {
        image: usize,
        index: usize,
        got_w: u32,
        got_h: u32,
        width: u32,
        height: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthImage {
    pub width: u32,
    pub height: u32,
    pub instances: Vec<MaskInstance>,
}

/// Ground-truth masks per image. Class ids come from the masks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthSet {
    images: Vec<GroundTruthImage>,
}

fn check_dims(image: usize, width: u32, height: u32, masks: &[MaskInstance]) -> Result<(), EvalError> {
    for (index, m) in masks.iter().enumerate() {
        if m.width() != width || m.height() != height {
            return Err(EvalError::DimensionMismatch {
                image,
                index,
                got_w: m.width(),
                got_h: m.height(),
                width,
                height,
            });
        }
    }
    Ok(())
}

impl GroundTruthSet {
    pub fn new(images: Vec<GroundTruthImage>) -> Result<Self, EvalError> {
        for (i, img) in images.iter().enumerate() {
            check_dims(i, img.width, img.height, &img.instances)?;
        }
        Ok(Self { images })
    }

    pub fn images(&self) -> &[GroundTruthImage] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self) -> BTreeSet<u32> {
        self.images
            .iter()
            .flat_map(|i| i.instances.iter().map(MaskInstance::class_id))
            .collect()
    }

    fn check_predictions(&self, predictions: &[Vec<MaskInstance>]) -> Result<(), EvalError> {
        if predictions.len() != self.images.len() {
            return Err(EvalError::ImageCountMismatch {
                predictions: predictions.len(),
                images: self.images.len(),
            });
        }
        for (i, (img, preds)) in self.images.iter().zip(predictions).enumerate() {
            check_dims(i, img.width, img.height, preds)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MatchLabel {
    Tp,
    Fp,
}

/// Indices of `scores` by descending score, ties in input order.
fn rank_by_score(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy matching within one image. The labels are returned in the input
/// order of `predictions`.
pub fn match_instances(predictions: &[MaskInstance], ground_truth: &[MaskInstance], iou_threshold: f64) -> Vec<MatchLabel> {
    let mut labels = vec![MatchLabel::Fp; predictions.len()];
    let mut taken = vec![false; ground_truth.len()];
    for p in rank_by_score(predictions.iter().map(MaskInstance::score)) {
        let pred = &predictions[p];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truth.iter().enumerate() {
            if taken[g] || gt.class_id() != pred.class_id() {
                continue;
            }
            let iou = mask_iou(pred, gt);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, iou)) = best {
            if iou >= iou_threshold {
                taken[g] = true;
                labels[p] = MatchLabel::Tp;
            }
        }
    }
    labels
}

/// All-point interpolated AP of a ranked TP/FP sequence.
pub fn average_precision(sequence: &[MatchLabel], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(sequence.len());
    let mut recall = Vec::with_capacity(sequence.len());
    let mut tp = 0usize;
    for (i, l) in sequence.iter().enumerate() {
        tp += (*l == MatchLabel::Tp) as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Per-class ABO for every class present in the ground truth.
pub fn abo_per_class(predictions: &[Vec<MaskInstance>], ground_truth: &GroundTruthSet) -> Result<BTreeMap<u32, f64>, EvalError> {
    ground_truth.check_predictions(predictions)?;
    let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for (img, preds) in ground_truth.images.iter().zip(predictions) {
        for gt in &img.instances {
            let best = preds
                .iter()
                .filter(|p| p.class_id() == gt.class_id())
                .map(|p| mask_iou(p, gt))
                .fold(0.0, f64::max);
            let e = sums.entry(gt.class_id()).or_default();
            e.0 += best;
            e.1 += 1;
        }
    }
    Ok(sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect())
}

/// Mean of the per-class ABO values; 0 without ground truth.
pub fn abo(predictions: &[Vec<MaskInstance>], ground_truth: &GroundTruthSet) -> Result<f64, EvalError> {
    Ok(mean(abo_per_class(predictions, ground_truth)?.values().copied()))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Per-class AP at one threshold, for every class that has ground truth or
/// predictions.
pub fn ap_per_class(
    predictions: &[Vec<MaskInstance>],
    ground_truth: &GroundTruthSet,
    iou_threshold: f64,
) -> Result<BTreeMap<u32, f64>, EvalError> {
    ground_truth.check_predictions(predictions)?;
    // (score, image, position, label) per class
    let mut ranked: BTreeMap<u32, Vec<(f64, usize, usize, MatchLabel)>> = BTreeMap::new();
    let mut num_gt: BTreeMap<u32, usize> = BTreeMap::new();
    for (i, (img, preds)) in ground_truth.images.iter().zip(predictions).enumerate() {
        for gt in &img.instances {
            *num_gt.entry(gt.class_id()).or_default() += 1;
        }
        let labels = match_instances(preds, &img.instances, iou_threshold);
        for (j, (p, l)) in preds.iter().zip(labels).enumerate() {
            ranked.entry(p.class_id()).or_default().push((p.score(), i, j, l));
        }
    }
    let classes: BTreeSet<u32> = ranked.keys().chain(num_gt.keys()).copied().collect();
    Ok(classes
        .into_iter()
        .map(|c| {
            let mut seq = ranked.remove(&c).unwrap_or_default();
            seq.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
            let labels: Vec<MatchLabel> = seq.into_iter().map(|s| s.3).collect();
            (c, average_precision(&labels, num_gt.get(&c).copied().unwrap_or(0)))
        })
        .collect())
}

/// Mean AP over classes at one threshold.
pub fn mean_ap(predictions: &[Vec<MaskInstance>], ground_truth: &GroundTruthSet, iou_threshold: f64) -> Result<f64, EvalError> {
    Ok(mean(ap_per_class(predictions, ground_truth, iou_threshold)?.values().copied()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub class_id: u32,
    pub num_gt: usize,
    pub num_predictions: usize,
    pub ap_50: f64,
    pub ap_75: f64,
    /// `None` for classes without ground truth.
    pub abo: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map_50: f64,
    pub map_75: f64,
    pub abo: f64,
    pub per_class_ap: Vec<ClassEval>,
}

/// AP at 0.5 and 0.75 per class, their class means, and ABO.
pub fn evaluate(predictions: &[Vec<MaskInstance>], ground_truth: &GroundTruthSet) -> Result<EvalResult, EvalError> {
    let [t50, t75] = DEFAULT_THRESHOLDS;
    let ap50 = ap_per_class(predictions, ground_truth, t50)?;
    let ap75 = ap_per_class(predictions, ground_truth, t75)?;
    let abos = abo_per_class(predictions, ground_truth)?;

    let count = |it: &mut dyn Iterator<Item = u32>| {
        let mut m: BTreeMap<u32, usize> = BTreeMap::new();
        for c in it {
            *m.entry(c).or_default() += 1;
        }
        m
    };
    let gt_counts = count(&mut ground_truth.images.iter().flat_map(|i| i.instances.iter().map(|m| m.class_id())));
    let pred_counts = count(&mut predictions.iter().flatten().map(|m| m.class_id()));

    let per_class_ap = ap50
        .iter()
        .map(|(&c, &a50)| ClassEval {
            class_id: c,
            num_gt: gt_counts.get(&c).copied().unwrap_or(0),
            num_predictions: pred_counts.get(&c).copied().unwrap_or(0),
            ap_50: a50,
            ap_75: ap75[&c],
            abo: abos.get(&c).copied(),
        })
        .collect::<Vec<_>>();
    Ok(EvalResult {
        map_50: mean(per_class_ap.iter().map(|c| c.ap_50)),
        map_75: mean(per_class_ap.iter().map(|c| c.ap_75)),
        abo: mean(abos.values().copied()),
        per_class_ap,
    })
}
