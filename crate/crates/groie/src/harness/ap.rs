//! Average precision over a detection set: greedy score-ordered matching,
//! 101-point interpolated precision envelope, per-class mean.

use crate::pyramid::RoiBox;

#[derive(Debug, Clone)]
pub struct Detection {
    pub scene: usize,
    pub class_id: usize,
    pub score: f64,
    pub roi: RoiBox,
    /// Binary mask at image resolution when scoring mask overlap.
    pub mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct GtInstance {
    pub scene: usize,
    pub class_id: usize,
    pub roi: RoiBox,
    pub mask: Option<Vec<bool>>,
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 { 0.0 } else { inter as f64 / union as f64 }
}

fn overlap(det: &Detection, gt: &GtInstance, use_mask: bool) -> f64 {
    if use_mask {
        match (&det.mask, &gt.mask) {
            (Some(a), Some(b)) => mask_iou(a, b),
            _ => 0.0,
        }
    } else {
        det.roi.iou(&gt.roi)
    }
}

/// AP for one class-agnostic pool of detections and ground truths.
///
/// Detections are sorted by descending score (stable, so ties keep input
/// order) and matched greedily: each takes the unmatched same-scene ground
/// truth with the highest overlap, counting as a true positive when that
/// overlap reaches `iou_threshold`. The precision/recall points are then
/// summarized by the 101-point interpolated envelope.
pub fn compute_ap(
    detections: &[Detection],
    gts: &[GtInstance],
    iou_threshold: f64,
    use_mask: bool,
) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut matched = vec![false; gts.len()];
    let mut tps = Vec::with_capacity(order.len());
    for &di in &order {
        let det = &detections[di];
        let mut best = (0.0_f64, usize::MAX);
        for (gi, gt) in gts.iter().enumerate() {
            if matched[gi] || gt.scene != det.scene {
                continue;
            }
            let ov = overlap(det, gt, use_mask);
            if ov > best.0 {
                best = (ov, gi);
            }
        }
        if best.0 >= iou_threshold && best.1 != usize::MAX {
            matched[best.1] = true;
            tps.push(true);
        } else {
            tps.push(false);
        }
    }
    let mut precisions = Vec::with_capacity(tps.len());
    let mut recalls = Vec::with_capacity(tps.len());
    let mut tp = 0usize;
    for (i, &hit) in tps.iter().enumerate() {
        tp += hit as usize;
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / gts.len() as f64);
    }
    // Precision envelope: best precision at recall >= r, sampled at
    // r = 0.00, 0.01, .., 1.00.
    let mut sum = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        let p = precisions
            .iter()
            .zip(&recalls)
            .filter(|&(_, &rec)| rec >= r - 1e-12)
            .map(|(&p, _)| p)
            .fold(0.0_f64, f64::max);
        sum += p;
    }
    sum / 101.0
}

/// Mean of per-class AP over classes that appear in the ground truth.
pub fn mean_ap(
    detections: &[Detection],
    gts: &[GtInstance],
    iou_threshold: f64,
    use_mask: bool,
    num_classes: usize,
) -> f64 {
    let mut total = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        let class_gts: Vec<GtInstance> =
            gts.iter().filter(|g| g.class_id == c).cloned().collect();
        if class_gts.is_empty() {
            continue;
        }
        let class_dets: Vec<Detection> =
            detections.iter().filter(|d| d.class_id == c).cloned().collect();
        total += compute_ap(&class_dets, &class_gts, iou_threshold, use_mask);
        present += 1;
    }
    if present == 0 { 0.0 } else { total / present as f64 }
}

/// Greedy non-maximum suppression over one class's detections in one scene.
/// Returns indices of the kept detections, highest score first.
pub fn nms(boxes: &[RoiBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut keep = Vec::new();
    for &i in &order {
        if keep.iter().all(|&k: &usize| boxes[i].iou(&boxes[k]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}
