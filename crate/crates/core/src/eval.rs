//! Detection and classification scoring.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{containment_fraction, iou, Rect};

pub const NMS_THRESHOLD: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image: usize,
    pub rect: Rect,
    pub confidence: f64,
}

/// When a detection counts as a hit on a ground-truth box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Criterion {
    /// `iou(gt, det) ≥ t`.
    Iou(f64),
    /// `containment_fraction(gt, det) ≥ t`: the detection lies mostly inside
    /// the box, whatever its size.
    Inclusion(f64),
}

impl Criterion {
    pub fn value(&self, gt: &Rect, det: &Rect) -> f64 {
        match self {
            Criterion::Iou(_) => iou(gt, det),
            Criterion::Inclusion(_) => containment_fraction(gt, det),
        }
    }

    pub fn threshold(&self) -> f64 {
        match self {
            Criterion::Iou(t) | Criterion::Inclusion(t) => *t,
        }
    }
}

/// Confidence descending, then image id, then rect order.
fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.image.cmp(&b.image))
        .then_with(|| a.rect.lex_cmp(&b.rect))
}

/// Greedy non-maximum suppression over the detections of one image.
pub fn nms(detections: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut order: Vec<Detection> = detections.to_vec();
    order.sort_by(rank_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        if kept.iter().all(|k| iou(&k.rect, &d.rect) < threshold) {
            kept.push(d);
        }
    }
    kept
}

/// [`nms`] applied image by image.
pub fn nms_per_image(detections: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut by_image: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    for d in detections {
        by_image.entry(d.image).or_default().push(*d);
    }
    by_image
        .values()
        .flat_map(|ds| nms(ds, threshold))
        .collect()
}

/// Area under the all-point interpolated precision envelope of a ranked
/// hit list.
pub fn average_precision(hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return f64::NAN;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / (k + 1) as f64));
    }
    // Envelope: precision at recall r is the best precision at recall ≥ r.
    let mut best = 0.0f64;
    for p in points.iter_mut().rev() {
        best = best.max(p.1);
        p.1 = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        if recall > prev_recall {
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
    }
    ap
}

/// Ranks `detections` across images and greedily matches each to the
/// best-valued unmatched ground truth meeting `criterion`.
pub fn match_detections(
    detections: &[Detection],
    ground_truth: &BTreeMap<usize, Vec<Rect>>,
    criterion: Criterion,
) -> Vec<bool> {
    let mut order: Vec<&Detection> = detections.iter().collect();
    order.sort_by(|a, b| rank_order(a, b));
    let mut matched: BTreeMap<usize, Vec<bool>> = ground_truth
        .iter()
        .map(|(k, v)| (*k, vec![false; v.len()]))
        .collect();
    order
        .iter()
        .map(|d| {
            let Some(gts) = ground_truth.get(&d.image) else {
                return false;
            };
            let used = matched.get_mut(&d.image).unwrap();
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] {
                    continue;
                }
                let v = criterion.value(gt, &d.rect);
                if v >= criterion.threshold() && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Detection average precision. Detections are expected to be
/// NMS-filtered already.
pub fn detection_ap(
    detections: &[Detection],
    ground_truth: &BTreeMap<usize, Vec<Rect>>,
    criterion: Criterion,
) -> Result<f64> {
    let positives: usize = ground_truth.values().map(Vec::len).sum();
    if positives == 0 {
        return Err(Error::NoGroundTruth);
    }
    let hits = match_detections(detections, ground_truth, criterion);
    Ok(average_precision(&hits, positives))
}

/// Image classification AP from `(image id, score, is positive)`. Ties in
/// score are ranked by image id.
pub fn classification_ap(scores: &[(usize, f64, bool)]) -> Result<f64> {
    let positives = scores.iter().filter(|s| s.2).count();
    if positives == 0 {
        return Err(Error::NoGroundTruth);
    }
    let mut order: Vec<&(usize, f64, bool)> = scores.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let hits: Vec<bool> = order.iter().map(|s| s.2).collect();
    Ok(average_precision(&hits, positives))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation (zero for fewer than two values).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// `|H_final| / |R|` over episodes.
    pub evaluated_fraction: MeanStd,
    pub evaluated_regions: MeanStd,
    pub initial_fraction: f64,
    /// Exhaustive evaluated count over sequential evaluated count.
    pub speedup: f64,
    /// Exhaustive wall-clock over sequential wall-clock, when timings are
    /// supplied.
    pub wall_clock_speedup: Option<f64>,
}

/// Per-episode cost input: `(initially observed, finally observed, total)`.
pub fn cost_report(
    episodes: &[(usize, usize, usize)],
    timings: Option<(f64, f64)>,
) -> CostReport {
    let fractions: Vec<f64> = episodes
        .iter()
        .map(|&(_, e, n)| e as f64 / n as f64)
        .collect();
    let counts: Vec<f64> = episodes.iter().map(|&(_, e, _)| e as f64).collect();
    let total: usize = episodes.iter().map(|e| e.2).sum();
    let evaluated: usize = episodes.iter().map(|e| e.1).sum();
    let initial: usize = episodes.iter().map(|e| e.0).sum();
    CostReport {
        evaluated_fraction: MeanStd::of(&fractions),
        evaluated_regions: MeanStd::of(&counts),
        initial_fraction: initial as f64 / total as f64,
        speedup: total as f64 / evaluated as f64,
        wall_clock_speedup: timings.map(|(exhaustive, sequential)| exhaustive / sequential),
    }
}
