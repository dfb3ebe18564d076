//! Proposal boxes for training and evaluation: jittered copies of ground
//! truth plus random negatives, labeled by IoU.

use crate::error::{Error, Result};
use crate::pyramid::RoiBox;
use crate::rng::SeededRng;

use super::scene::GroundTruth;

pub const JITTERS_PER_OBJECT: usize = 4;
pub const NEGATIVES_PER_SCENE: usize = 8;
pub const MATCH_IOU: f64 = 0.5;

/// Minimum side length a proposal keeps after clipping; avoids degenerate
/// boxes when a jittered copy lands mostly outside the image.
const MIN_SIDE: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct Proposal {
    pub roi: RoiBox,
    /// 0 is background, 1..=NUM_CLASSES are shape classes.
    pub label: usize,
    /// Index into the scene's ground-truth objects for positives.
    pub gt_index: Option<usize>,
}

fn clip(batch_idx: usize, x1: f64, y1: f64, x2: f64, y2: f64, img: f64) -> RoiBox {
    let cx1 = x1.clamp(0.0, img - MIN_SIDE);
    let cy1 = y1.clamp(0.0, img - MIN_SIDE);
    let cx2 = x2.clamp(cx1 + MIN_SIDE, img);
    let cy2 = y2.clamp(cy1 + MIN_SIDE, img);
    RoiBox::new(batch_idx, cx1, cy1, cx2, cy2).unwrap()
}

fn label_by_iou(roi: &RoiBox, gt: &GroundTruth) -> (usize, Option<usize>) {
    let mut best = (0.0, None);
    for (i, o) in gt.objects.iter().enumerate() {
        let iou = roi.iou(&o.roi);
        if iou > best.0 {
            best = (iou, Some(i));
        }
    }
    match best {
        (iou, Some(i)) if iou >= MATCH_IOU => (gt.objects[i].class_id + 1, Some(i)),
        _ => (0, None),
    }
}

/// Build the proposal set for one scene: four jittered copies of every object
/// (scale 0.8..1.25, center shift up to 10% of the side) and eight random
/// boxes, everything clipped to the image and labeled against ground truth.
pub fn make_proposals(gt: &GroundTruth, rng: &mut SeededRng) -> Result<Vec<Proposal>> {
    if gt.objects.is_empty() {
        return Err(Error::Input("scene has no objects to propose around".into()));
    }
    let img = gt.image_size as f64;
    let mut out = Vec::with_capacity(gt.objects.len() * JITTERS_PER_OBJECT + NEGATIVES_PER_SCENE);
    for o in &gt.objects {
        let (w, h) = (o.roi.width(), o.roi.height());
        let (cx, cy) = ((o.roi.x1 + o.roi.x2) / 2.0, (o.roi.y1 + o.roi.y2) / 2.0);
        for _ in 0..JITTERS_PER_OBJECT {
            let sw = w * rng.uniform_range(0.8, 1.25);
            let sh = h * rng.uniform_range(0.8, 1.25);
            let jx = cx + w * rng.uniform_range(-0.1, 0.1);
            let jy = cy + h * rng.uniform_range(-0.1, 0.1);
            let roi = clip(o.roi.batch_idx, jx - sw / 2.0, jy - sh / 2.0, jx + sw / 2.0, jy + sh / 2.0, img);
            let (label, gt_index) = label_by_iou(&roi, gt);
            out.push(Proposal { roi, label, gt_index });
        }
    }
    for _ in 0..NEGATIVES_PER_SCENE {
        let w = rng.log_uniform(8.0, 96.0);
        let h = rng.log_uniform(8.0, 96.0);
        let x1 = rng.uniform_range(0.0, img - w.min(img - MIN_SIDE));
        let y1 = rng.uniform_range(0.0, img - h.min(img - MIN_SIDE));
        let roi = clip(0, x1, y1, x1 + w, y1 + h, img);
        let (label, gt_index) = label_by_iou(&roi, gt);
        out.push(Proposal { roi, label, gt_index });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scene::{generate_scene, SceneSpec};

    #[test]
    fn proposals_are_clipped_and_counted() {
        let spec = SceneSpec::default();
        for seed in 0..20 {
            let mut rng = SeededRng::new(seed);
            let (_, gt) = generate_scene(&mut rng, &spec);
            let props = make_proposals(&gt, &mut rng).unwrap();
            assert_eq!(
                props.len(),
                gt.objects.len() * JITTERS_PER_OBJECT + NEGATIVES_PER_SCENE
            );
            for p in &props {
                assert!(p.roi.x1 >= 0.0 && p.roi.y1 >= 0.0);
                assert!(p.roi.x2 <= 128.0 && p.roi.y2 <= 128.0);
            }
        }
    }

    #[test]
    fn labels_agree_with_iou_threshold() {
        let spec = SceneSpec::default();
        for seed in 0..20 {
            let mut rng = SeededRng::new(100 + seed);
            let (_, gt) = generate_scene(&mut rng, &spec);
            for p in make_proposals(&gt, &mut rng).unwrap() {
                let best = gt
                    .objects
                    .iter()
                    .map(|o| p.roi.iou(&o.roi))
                    .fold(0.0_f64, f64::max);
                if p.label == 0 {
                    assert!(best < MATCH_IOU);
                    assert!(p.gt_index.is_none());
                } else {
                    let i = p.gt_index.unwrap();
                    assert!(p.roi.iou(&gt.objects[i].roi) >= MATCH_IOU);
                    assert_eq!(p.label, gt.objects[i].class_id + 1);
                }
            }
        }
    }

    #[test]
    fn empty_scene_is_rejected() {
        let gt = GroundTruth { image_size: 128, objects: vec![] };
        assert!(make_proposals(&gt, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn most_jitters_are_positive() {
        let spec = SceneSpec::default();
        let mut positives = 0usize;
        let mut jitters = 0usize;
        for seed in 0..50 {
            let mut rng = SeededRng::new(200 + seed);
            let (_, gt) = generate_scene(&mut rng, &spec);
            let props = make_proposals(&gt, &mut rng).unwrap();
            let nj = gt.objects.len() * JITTERS_PER_OBJECT;
            jitters += nj;
            positives += props[..nj].iter().filter(|p| p.label > 0).count();
        }
        assert!(
            positives as f64 > 0.6 * jitters as f64,
            "{positives}/{jitters} jittered proposals matched"
        );
    }
}
