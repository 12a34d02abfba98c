//! Detection metrics: greedy NMS, average precision (11-point and
//! area-under-curve variants), and per-class localization accuracy.
//!
//! Matching follows the classic protocol: detections are consumed in score
//! order, each ground-truth box can be claimed once, and a match requires
//! IoU strictly above the threshold.

use crate::boxes::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image_id: usize,
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub image_id: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

/// Serialize one detection as the interchange line
/// `image_id class_id score x1 y1 x2 y2`.
pub fn format_detection(d: &Detection) -> String {
    format!(
        "{} {} {} {} {} {} {}",
        d.image_id, d.class_id, d.score, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2
    )
}

/// Parse the line format produced by [`format_detection`].
pub fn parse_detection(line: &str) -> Result<Detection, String> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 7 {
        return Err(format!("expected 7 fields, got {}: {:?}", parts.len(), line));
    }
    let err = |what: &str| format!("bad {} in detection line {:?}", what, line);
    Ok(Detection {
        image_id: parts[0].parse().map_err(|_| err("image_id"))?,
        class_id: parts[1].parse().map_err(|_| err("class_id"))?,
        score: parts[2].parse().map_err(|_| err("score"))?,
        bbox: BBox::new(
            parts[3].parse().map_err(|_| err("x1"))?,
            parts[4].parse().map_err(|_| err("y1"))?,
            parts[5].parse().map_err(|_| err("x2"))?,
            parts[6].parse().map_err(|_| err("y2"))?,
        ),
    })
}

/// Greedy non-maximum suppression over one class in one image. Keeps boxes
/// in descending score order (ties by input position); a box is suppressed
/// when its IoU with any kept box strictly exceeds `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        if kept.iter().all(|k| iou(&k.bbox, &dets[i].bbox) <= iou_thresh) {
            kept.push(dets[i]);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApMode {
    /// Eleven-point interpolation at recalls 0.0, 0.1, ..., 1.0.
    Voc07ElevenPoint,
    /// Area under the monotone precision envelope.
    Area,
}

#[derive(Debug, Clone, Copy)]
pub struct ApResult {
    pub ap: f64,
    /// True when the class had no ground truth at all (AP defined as 0).
    pub no_gt: bool,
}

/// Average precision for one class. `dets` are that class's detections over
/// all images (any order); `gts` its ground-truth boxes.
pub fn average_precision(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thresh: f64,
    mode: ApMode,
) -> ApResult {
    if gts.is_empty() {
        return ApResult { ap: 0.0, no_gt: true };
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut gt_used = vec![false; gts.len()];
    let mut tp = vec![0.0; dets.len()];
    let mut fp = vec![0.0; dets.len()];
    for (rank, &di) in order.iter().enumerate() {
        let d = &dets[di];
        let mut best = (None, 0.0f64);
        for (gi, gt) in gts.iter().enumerate() {
            if gt.image_id != d.image_id {
                continue;
            }
            let ov = iou(&d.bbox, &gt.bbox);
            if ov > best.1 {
                best = (Some(gi), ov);
            }
        }
        match best {
            (Some(gi), ov) if ov > iou_thresh && !gt_used[gi] => {
                gt_used[gi] = true;
                tp[rank] = 1.0;
            }
            _ => fp[rank] = 1.0,
        }
    }
    // cumulative precision/recall along the ranking
    let npos = gts.len() as f64;
    let mut cum_tp = 0.0;
    let mut cum_fp = 0.0;
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    for r in 0..dets.len() {
        cum_tp += tp[r];
        cum_fp += fp[r];
        recall.push(cum_tp / npos);
        precision.push(cum_tp / (cum_tp + cum_fp));
    }
    let ap = match mode {
        ApMode::Voc07ElevenPoint => {
            let mut acc = 0.0;
            for t in 0..=10 {
                let level = t as f64 / 10.0;
                let p = recall
                    .iter()
                    .zip(&precision)
                    .filter(|(r, _)| **r >= level - 1e-12)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max);
                acc += p;
            }
            acc / 11.0
        }
        ApMode::Area => {
            // monotone envelope over recall breakpoints
            let mut mrec = vec![0.0];
            mrec.extend_from_slice(&recall);
            mrec.push(1.0);
            let mut mpre = vec![0.0];
            mpre.extend_from_slice(&precision);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            let mut acc = 0.0;
            for i in 0..mrec.len() - 1 {
                acc += (mrec[i + 1] - mrec[i]) * mpre[i + 1];
            }
            acc
        }
    };
    ApResult { ap, no_gt: false }
}

/// Fraction of class-positive images whose single best detection overlaps a
/// ground truth of that class with IoU strictly above 0.5. `None` when the
/// class appears in no image (excluded from averages).
pub fn corloc(top_dets: &[Detection], gts: &[GroundTruth]) -> Option<f64> {
    let mut positives: Vec<usize> = gts.iter().map(|g| g.image_id).collect();
    positives.sort_unstable();
    positives.dedup();
    if positives.is_empty() {
        return None;
    }
    let mut correct = 0usize;
    for &img in &positives {
        let top = top_dets
            .iter()
            .filter(|d| d.image_id == img)
            .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap());
        if let Some(d) = top {
            let hit = gts
                .iter()
                .any(|g| g.image_id == img && iou(&d.bbox, &g.bbox) > 0.5);
            if hit {
                correct += 1;
            }
        }
    }
    Some(correct as f64 / positives.len() as f64)
}

/// Per-class and mean metrics over a full detection/ground-truth set.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_class_ap: Vec<ApResult>,
    pub map: f64,
    /// `None` for classes present in no image.
    pub per_class_corloc: Vec<Option<f64>>,
    pub mean_corloc: f64,
}

/// Evaluate detections against ground truth for `classes` classes.
/// `dets` should already be NMS-filtered per class and image.
pub fn evaluate_detections(
    dets: &[Detection],
    gts: &[GroundTruth],
    classes: usize,
    iou_thresh: f64,
    mode: ApMode,
) -> EvalReport {
    let mut per_class_ap = Vec::with_capacity(classes);
    let mut per_class_corloc = Vec::with_capacity(classes);
    for c in 0..classes {
        let cd: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).copied().collect();
        let cg: Vec<GroundTruth> = gts.iter().filter(|g| g.class_id == c).copied().collect();
        per_class_ap.push(average_precision(&cd, &cg, iou_thresh, mode));
        per_class_corloc.push(corloc(&cd, &cg));
    }
    let map = per_class_ap.iter().map(|a| a.ap).sum::<f64>() / classes.max(1) as f64;
    let with_pos: Vec<f64> = per_class_corloc.iter().flatten().copied().collect();
    let mean_corloc = if with_pos.is_empty() {
        0.0
    } else {
        with_pos.iter().sum::<f64>() / with_pos.len() as f64
    };
    EvalReport { per_class_ap, map, per_class_corloc, mean_corloc }
}
