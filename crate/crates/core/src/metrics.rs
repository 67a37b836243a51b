//! COCO-style box evaluation: IoU, GIoU, and size-stratified average precision.
//!
//! Matching follows the COCO evaluator: per image and class, detections are
//! visited in descending score order and greedily take the best still-free
//! ground truth with IoU at or above the threshold. Ground truths outside the
//! area range are ignored, as are detections matched to them and unmatched
//! detections whose own area falls outside the range. The precision/recall
//! curve is summarized by 101-point interpolation.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Sentinel reported when an area bucket holds no ground truth.
pub const EMPTY_BUCKET: f64 = -1.0;

/// Detections kept per image and class, as in COCO's `maxDets = 100`.
pub const MAX_DETS_PER_IMAGE: usize = 100;

/// Upper area bound of the small bucket (32 x 32 pixels).
pub const SMALL_AREA: f64 = 32.0 * 32.0;
/// Upper area bound of the medium bucket (96 x 96 pixels).
pub const MEDIUM_AREA: f64 = 96.0 * 96.0;

/// Axis-aligned box in absolute pixel corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXyxy {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxXyxy {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    /// Box from normalized `(cx, cy, w, h)` scaled to a `width x height` image.
    pub fn from_cxcywh(c: [f64; 4], width: f64, height: f64) -> Self {
        Self {
            x1: (c[0] - c[2] / 2.0) * width,
            y1: (c[1] - c[3] / 2.0) * height,
            x2: (c[0] + c[2] / 2.0) * width,
            y2: (c[1] + c[3] / 2.0) * height,
        }
    }

    /// Normalized `(cx, cy, w, h)` relative to a `width x height` image.
    pub fn to_cxcywh(&self, width: f64, height: f64) -> [f64; 4] {
        [
            (self.x1 + self.x2) / 2.0 / width,
            (self.y1 + self.y2) / 2.0 / height,
            (self.x2 - self.x1) / width,
            (self.y2 - self.y1) / height,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::InvalidArgument(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    fn clipped(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }
}

fn intersection(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w > 0.0 && h > 0.0 {
        w * h
    } else {
        0.0
    }
}

pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

fn iou_unchecked(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let inter = intersection(a, b);
    inter / (a.area() + b.area() - inter)
}

/// Generalized IoU: IoU minus the share of the enclosing box not covered by the union.
pub fn giou(a: &BoxXyxy, b: &BoxXyxy) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let hull = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    // the hull covers the union; clamp rounding when one box contains the other
    Ok(inter / union - ((hull - union) / hull).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: BoxXyxy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class: usize,
    pub bbox: BoxXyxy,
    /// Pixel area used for size bucketing.
    pub area: f64,
}

impl GroundTruth {
    pub fn new(class: usize, bbox: BoxXyxy) -> Self {
        Self {
            class,
            bbox,
            area: bbox.area(),
        }
    }
}

/// Scored detections, one list per image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub images: Vec<Vec<Detection>>,
}

/// Ground-truth boxes, one list per image (same image order as detections).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub images: Vec<Vec<GroundTruth>>,
}

/// Pixel-area bucket `[min, max)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaRange {
    pub min: f64,
    pub max: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange {
        min: 0.0,
        max: f64::INFINITY,
    };
    pub const SMALL: AreaRange = AreaRange {
        min: 0.0,
        max: SMALL_AREA,
    };
    pub const MEDIUM: AreaRange = AreaRange {
        min: SMALL_AREA,
        max: MEDIUM_AREA,
    };
    pub const LARGE: AreaRange = AreaRange {
        min: MEDIUM_AREA,
        max: f64::INFINITY,
    };

    pub fn contains(&self, area: f64) -> bool {
        area >= self.min && area < self.max
    }
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> [f64; 10] {
    let step = (0.95 - 0.5) / 9.0;
    std::array::from_fn(|i| 0.5 + step * i as f64)
}

/// The six-column metric row: AP, AP50, AP75, AP-S, AP-M, AP-L.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
}

impl ApReport {
    pub const CSV_HEADER: &'static str = "AP,AP50,AP75,AP_S,AP_M,AP_L";

    pub fn values(&self) -> [f64; 6] {
        [self.ap, self.ap50, self.ap75, self.ap_s, self.ap_m, self.ap_l]
    }

    pub fn to_csv_row(&self) -> String {
        self.values()
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    /// JSON object keyed by the CSV column names.
    pub fn to_json(&self) -> serde_json::Value {
        let names = Self::CSV_HEADER.split(',');
        serde_json::Value::Object(
            names
                .zip(self.values())
                .map(|(k, v)| (k.to_string(), serde_json::json!(v)))
                .collect(),
        )
    }
}

/// Detection outcome at one threshold after matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

/// Descending score; remaining ties resolved by box geometry so the order
/// does not depend on how detections were listed.
fn score_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then(a.bbox.x2.total_cmp(&b.bbox.x2))
        .then(a.bbox.y2.total_cmp(&b.bbox.y2))
        .then(a.class.cmp(&b.class))
}

/// Greedy matching of one image's detections of one class.
///
/// `dets` must already be in [`score_order`].
fn match_image(dets: &[Detection], gts: &[GroundTruth], thr: f64, range: AreaRange) -> (Vec<Outcome>, usize) {
    // non-ignored ground truths first, keeping input order within each group
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by_key(|&g| !range.contains(gts[g].area));
    let ignored: Vec<bool> = order.iter().map(|&g| !range.contains(gts[g].area)).collect();
    let eligible = ignored.iter().filter(|&&i| !i).count();
    let mut taken = vec![false; order.len()];
    let floor = thr.min(1.0 - 1e-10);

    let outcomes = dets
        .iter()
        .map(|d| {
            let mut best = floor;
            let mut matched: Option<usize> = None;
            for (slot, &g) in order.iter().enumerate() {
                if taken[slot] {
                    continue;
                }
                if matched.is_some_and(|m| !ignored[m]) && ignored[slot] {
                    break;
                }
                let overlap = iou_unchecked(&d.bbox, &gts[g].bbox);
                if overlap < best {
                    continue;
                }
                best = overlap;
                matched = Some(slot);
            }
            match matched {
                Some(slot) => {
                    taken[slot] = true;
                    if ignored[slot] {
                        Outcome::Ignored
                    } else {
                        Outcome::TruePositive
                    }
                }
                None if !range.contains(d.bbox.area()) => Outcome::Ignored,
                None => Outcome::FalsePositive,
            }
        })
        .collect();
    (outcomes, eligible)
}

/// 101-point interpolated AP from outcomes already in global score order.
fn interpolated_ap(outcomes: &[Outcome], eligible: usize) -> f64 {
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for o in outcomes {
        match o {
            Outcome::TruePositive => tp += 1,
            Outcome::FalsePositive => fp += 1,
            Outcome::Ignored => continue,
        }
        recall.push(tp as f64 / eligible as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 * 0.01;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    total / 101.0
}

/// AP of one class, or `None` when the class has no eligible ground truth.
fn class_ap(dets: &DetectionSet, gts: &AnnotationSet, class: usize, thr: f64, range: AreaRange) -> Option<f64> {
    let mut scored: Vec<(f64, usize, usize, Outcome)> = Vec::new();
    let mut eligible = 0;
    let empty = Vec::new();
    for img in 0..gts.images.len().max(dets.images.len()) {
        let img_gts: Vec<GroundTruth> = gts
            .images
            .get(img)
            .unwrap_or(&empty)
            .iter()
            .filter(|g| g.class == class)
            .copied()
            .collect();
        let mut img_dets: Vec<Detection> = dets
            .images
            .get(img)
            .map(|d| d.iter().filter(|d| d.class == class).copied().collect())
            .unwrap_or_default();
        img_dets.sort_by(score_order);
        img_dets.truncate(MAX_DETS_PER_IMAGE);
        let (outcomes, n) = match_image(&img_dets, &img_gts, thr, range);
        eligible += n;
        scored.extend(
            img_dets
                .iter()
                .zip(outcomes)
                .enumerate()
                .map(|(rank, (d, o))| (d.score, img, rank, o)),
        );
    }
    if eligible == 0 {
        return None;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let outcomes: Vec<Outcome> = scored.into_iter().map(|s| s.3).collect();
    Some(interpolated_ap(&outcomes, eligible))
}

fn classes_in(gts: &AnnotationSet) -> Vec<usize> {
    let mut classes: Vec<usize> = gts.images.iter().flatten().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
}

/// Per-class APs at one threshold and area range (classes without eligible
/// ground truth are skipped).
fn class_aps(dets: &DetectionSet, gts: &AnnotationSet, thr: f64, range: AreaRange) -> Vec<f64> {
    classes_in(gts)
        .into_iter()
        .filter_map(|c| class_ap(dets, gts, c, thr, range))
        .collect()
}

/// Class-averaged AP at a single IoU threshold for ground truths in `range`.
///
/// Returns [`EMPTY_BUCKET`] when no ground truth falls in the range.
pub fn ap_at_iou(dets: &DetectionSet, gts: &AnnotationSet, thr: f64, range: AreaRange) -> Result<f64> {
    if !(thr > 0.0 && thr <= 1.0) {
        return Err(Error::InvalidArgument(format!("IoU threshold {thr} outside (0, 1]")));
    }
    validate_sets(dets, gts)?;
    let aps = class_aps(dets, gts, thr, range);
    if aps.is_empty() {
        return Ok(EMPTY_BUCKET);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

fn validate_sets(dets: &DetectionSet, gts: &AnnotationSet) -> Result<()> {
    for d in dets.images.iter().flatten() {
        d.bbox.validate()?;
        if !d.score.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite detection score {}", d.score)));
        }
    }
    for g in gts.images.iter().flatten() {
        g.bbox.validate()?;
    }
    Ok(())
}

/// Mean over all (threshold, class) cells that have eligible ground truth.
fn mean_over_thresholds(dets: &DetectionSet, gts: &AnnotationSet, thresholds: &[f64], range: AreaRange) -> f64 {
    let per_thr = par::map(thresholds, |&t| class_aps(dets, gts, t, range));
    let cells: Vec<f64> = per_thr.into_iter().flatten().collect();
    if cells.is_empty() {
        EMPTY_BUCKET
    } else {
        cells.iter().sum::<f64>() / cells.len() as f64
    }
}

/// Full six-metric report.
pub fn coco_ap_report(dets: &DetectionSet, gts: &AnnotationSet) -> Result<ApReport> {
    validate_sets(dets, gts)?;
    let thr = coco_iou_thresholds();
    let single = |t: f64| {
        let aps = class_aps(dets, gts, t, AreaRange::ALL);
        if aps.is_empty() {
            EMPTY_BUCKET
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        }
    };
    Ok(ApReport {
        ap: mean_over_thresholds(dets, gts, &thr, AreaRange::ALL),
        ap50: single(thr[0]),
        ap75: single(thr[5]),
        ap_s: mean_over_thresholds(dets, gts, &thr, AreaRange::SMALL),
        ap_m: mean_over_thresholds(dets, gts, &thr, AreaRange::MEDIUM),
        ap_l: mean_over_thresholds(dets, gts, &thr, AreaRange::LARGE),
    })
}

/// Turns normalized per-query predictions into pixel-space detections.
///
/// `scores` is `(Q, K)` class probabilities, `boxes` `(Q, 4)` normalized
/// `(cx, cy, w, h)`. The highest `max_dets` (query, class) scores are kept,
/// boxes clipped to the image.
pub fn decode_detections(
    scores: &[f64],
    boxes: &[f64],
    num_classes: usize,
    width: f64,
    height: f64,
    max_dets: usize,
) -> Vec<Detection> {
    let mut cand: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cand.truncate(max_dets);
    cand.into_iter()
        .filter_map(|(i, score)| {
            let (q, class) = (i / num_classes, i % num_classes);
            let c: [f64; 4] = boxes[q * 4..q * 4 + 4].try_into().ok()?;
            let bbox = BoxXyxy::from_cxcywh(c, width, height).clipped(width, height);
            bbox.validate().ok()?;
            Some(Detection { class, score, bbox })
        })
        .collect()
}
