//! Detection evaluation: run the model over a scene set, decode and suppress
//! detections, and score box and mask AP.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::pyramid::RoiBox;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::ap::{mean_ap, nms, Detection, GtInstance};
use super::model::{decode_deltas, paste_mask, ToyModel, MASK_SIZE};
use super::proposals::make_proposals;
use super::scene::{generate_scene, GroundTruth, SceneSpec, NUM_CLASSES};

pub const SCORE_FLOOR: f64 = 0.05;
pub const NMS_IOU: f64 = 0.5;
pub const MAX_DETECTIONS: usize = 100;

/// Rng stream tags; scene index is added to the base so every scene gets an
/// independent deterministic stream.
pub const STREAM_TRAIN_SCENE: u64 = 0x1_0000_0000;
pub const STREAM_EVAL_SCENE: u64 = 0x2_0000_0000;
pub const STREAM_EVAL_PROPOSALS: u64 = 0x3_0000_0000;
pub const STREAM_MODEL_INIT: u64 = 0x4_0000_0000;

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub scenes: usize,
    pub ap_box_50: f64,
    pub ap_box_75: f64,
    pub ap_mask_50: f64,
}

pub fn make_dataset(seed: u64, stream_base: u64, count: usize) -> Vec<(Tensor, GroundTruth)> {
    let spec = SceneSpec::default();
    (0..count)
        .map(|i| generate_scene(&mut SeededRng::derive(seed, stream_base + i as u64), &spec))
        .collect()
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Decode one scene's detections: per-class score floor, per-class NMS, a
/// per-scene detection cap, then mask prediction on the surviving boxes.
fn detect_scene(
    model: &ToyModel,
    image: Tensor,
    gt: &GroundTruth,
    scene_idx: usize,
    seed: u64,
) -> Result<Vec<Detection>> {
    let img = gt.image_size;
    let mut prop_rng = SeededRng::derive(seed, STREAM_EVAL_PROPOSALS + scene_idx as u64);
    let proposals = make_proposals(gt, &mut prop_rng)?;
    let boxes: Vec<RoiBox> = proposals.iter().map(|p| p.roi).collect();

    let mut g = Graph::new();
    let pyramid = model.backbone(&mut g, image)?;
    let feats = model.extract_box(&mut g, &pyramid, &boxes, &mut prop_rng)?;
    let (logits_id, deltas_id) = model.box_head(&mut g, feats)?;
    let logits = g.value(logits_id).data().to_vec();
    let deltas = g.value(deltas_id).data().to_vec();

    // Candidates per class, then NMS within the class.
    let mut kept: Vec<(usize, f64, RoiBox)> = Vec::new();
    for class in 0..NUM_CLASSES {
        let mut cls_boxes = Vec::new();
        let mut cls_scores = Vec::new();
        for (i, _) in boxes.iter().enumerate() {
            let probs = softmax_row(&logits[i * (NUM_CLASSES + 1)..(i + 1) * (NUM_CLASSES + 1)]);
            let score = probs[class + 1];
            if score < SCORE_FLOOR {
                continue;
            }
            let decoded = decode_deltas(&boxes[i], &deltas[i * 4..i * 4 + 4], img as f64)?;
            cls_boxes.push(decoded);
            cls_scores.push(score);
        }
        for k in nms(&cls_boxes, &cls_scores, NMS_IOU) {
            kept.push((class, cls_scores[k], cls_boxes[k]));
        }
    }
    kept.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    kept.truncate(MAX_DETECTIONS);
    if kept.is_empty() {
        return Ok(Vec::new());
    }

    let det_boxes: Vec<RoiBox> = kept.iter().map(|(_, _, b)| *b).collect();
    let mfeats = model.extract_mask(&mut g, &pyramid, &det_boxes, &mut prop_rng)?;
    let mprobs_id = model.mask_head(&mut g, mfeats)?;
    let mprobs = g.value(mprobs_id).data();

    let per_mask = MASK_SIZE * MASK_SIZE;
    Ok(kept
        .into_iter()
        .enumerate()
        .map(|(i, (class, score, roi))| Detection {
            scene: scene_idx,
            class_id: class,
            score,
            roi,
            mask: Some(paste_mask(&mprobs[i * per_mask..(i + 1) * per_mask], &roi, img)),
        })
        .collect())
}

/// Evaluate on a scene set: box AP at IoU 0.5 and 0.75 plus mask AP at 0.5,
/// each a mean over the classes present.
pub fn evaluate(model: &ToyModel, scenes: &[(Tensor, GroundTruth)], seed: u64) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let mut detections = Vec::new();
    let mut gts = Vec::new();
    for (i, (image, gt)) in scenes.iter().enumerate() {
        detections.extend(detect_scene(model, image.clone(), gt, i, seed)?);
        for o in &gt.objects {
            gts.push(GtInstance {
                scene: i,
                class_id: o.class_id,
                roi: o.roi,
                mask: Some(o.mask.clone()),
            });
        }
    }
    Ok(EvalReport {
        scenes: scenes.len(),
        ap_box_50: mean_ap(&detections, &gts, 0.5, false, NUM_CLASSES),
        ap_box_75: mean_ap(&detections, &gts, 0.75, false, NUM_CLASSES),
        ap_mask_50: mean_ap(&detections, &gts, 0.5, true, NUM_CLASSES),
    })
}
