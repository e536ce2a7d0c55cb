//! From head outputs to final detections: sigmoid scores, per-level
//! thresholding and top-k, delta decoding, clipping, and class-wise NMS.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decode, iou, BBox, BoxDelta};
use crate::model::DetectorModel;
use crate::tensor::{sigmoid_scalar, Tensor};

/// One detected object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Inference pipeline knobs with the standard defaults: confidence 0.05,
/// top 1000 candidates per level, NMS at IoU 0.5, 100 detections cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub per_level_topk: usize,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for InferenceConfig {
    fn default() -> InferenceConfig {
        InferenceConfig {
            score_threshold: 0.05,
            per_level_topk: 1000,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("score_threshold", self.score_threshold), ("nms_iou", self.nms_iou)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {v}")));
            }
        }
        if self.per_level_topk == 0 {
            return Err(Error::Config("per_level_topk must be at least 1".into()));
        }
        if self.max_detections == 0 {
            return Err(Error::Config("max_detections must be at least 1".into()));
        }
        Ok(())
    }
}

/// Deterministic candidate order: score descending, then top-left corner
/// ascending. Residual ties keep input order (all sorts here are stable).
fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap()
        .then(a.bbox.x1.partial_cmp(&b.bbox.x1).unwrap())
        .then(a.bbox.y1.partial_cmp(&b.bbox.y1).unwrap())
}

/// Candidates from one pyramid level: sigmoid the logits, drop scores
/// below the threshold, keep the level's top-k, then decode those against
/// their anchors and clip to the image rectangle.
pub fn decode_level(
    cls_logits: &Tensor,
    box_deltas: &Tensor,
    anchors: &[BBox],
    num_classes: usize,
    image_size: (f64, f64),
    cfg: &InferenceConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let (cs, bs) = (cls_logits.shape(), box_deltas.shape());
    if cs.len() != 4 || bs.len() != 4 || cs[2] != bs[2] || cs[3] != bs[3] {
        return Err(Error::Shape(format!(
            "mismatched head outputs: cls {cs:?} vs box {bs:?}"
        )));
    }
    let (h, w) = (cs[2], cs[3]);
    let a = bs[1] / 4;
    if cs[1] != a * num_classes || bs[1] != 4 * a {
        return Err(Error::Shape(format!(
            "head depths {} / {} do not factor into A={a}, K={num_classes}",
            cs[1], bs[1]
        )));
    }
    if anchors.len() != h * w * a {
        return Err(Error::Shape(format!(
            "{} anchors for a {h}x{w} level with A={a}",
            anchors.len()
        )));
    }

    // (score, anchor index, class) survivors of the threshold
    let logits = cls_logits.values();
    let mut kept: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..h {
        for j in 0..w {
            for ai in 0..a {
                for k in 0..num_classes {
                    let score = sigmoid_scalar(logits[((ai * num_classes + k) * h + i) * w + j]);
                    if score >= cfg.score_threshold {
                        kept.push((score, (i * w + j) * a + ai, k));
                    }
                }
            }
        }
    }
    drop(logits);
    kept.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    kept.truncate(cfg.per_level_topk);

    let deltas = box_deltas.values();
    let (img_w, img_h) = image_size;
    let detections = kept
        .into_iter()
        .map(|(score, anchor_idx, class_id)| {
            let cell = anchor_idx / a;
            let ai = anchor_idx % a;
            let (i, j) = (cell / w, cell % w);
            let at = |d: usize| deltas[((ai * 4 + d) * h + i) * w + j];
            let delta = BoxDelta::new(at(0), at(1), at(2), at(3));
            let bbox = decode(&delta, &anchors[anchor_idx]).clip(img_w, img_h);
            Detection { bbox, class_id, score }
        })
        .collect();
    Ok(detections)
}

/// Greedy class-wise non-maximum suppression: walk candidates best-first
/// and drop any that overlap an already-kept detection of the same class
/// with IoU strictly above the threshold. Output keeps the sorted order.
pub fn nms(candidates: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted: Vec<Detection> = candidates.to_vec();
    sorted.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::new();
    for cand in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == cand.class_id && iou(&k.bbox, &cand.bbox) > iou_threshold);
        if !suppressed {
            kept.push(cand);
        }
    }
    kept
}

/// The whole pipeline for one image: forward pass, per-level decoding,
/// cross-level NMS, and the final cap. Results come back sorted by
/// descending score.
pub fn detect(model: &DetectorModel, image: &Tensor, cfg: &InferenceConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let s = image.shape();
    let (img_h, img_w) = match s.len() {
        3 => (s[1], s[2]),
        4 => (s[2], s[3]),
        _ => return Err(Error::Shape(format!("expected an image tensor, got {s:?}"))),
    };
    let output = model.forward(image)?;
    let level_anchors = model.anchors_for(&output);
    let mut candidates = Vec::new();
    for (level, anchors) in output.levels.iter().zip(&level_anchors) {
        candidates.extend(decode_level(
            &level.cls_logits,
            &level.box_deltas,
            anchors,
            model.config.num_classes,
            (img_w as f64, img_h as f64),
            cfg,
        )?);
    }
    let mut final_dets = nms(&candidates, cfg.nms_iou);
    final_dets.truncate(cfg.max_detections);
    Ok(final_dets)
}

/// One line of a detection dump: the eval module's input contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class_id: usize,
    pub score: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl DetectionRecord {
    pub fn new(image_id: &str, d: &Detection) -> DetectionRecord {
        DetectionRecord {
            image_id: image_id.to_string(),
            class_id: d.class_id,
            score: d.score,
            x1: d.bbox.x1,
            y1: d.bbox.y1,
            x2: d.bbox.x2,
            y2: d.bbox.y2,
        }
    }

    pub fn detection(&self) -> Detection {
        Detection {
            bbox: BBox::new(self.x1, self.y1, self.x2, self.y2),
            class_id: self.class_id,
            score: self.score,
        }
    }
}

/// Append one image's detections to a JSON-lines stream.
pub fn write_detections_jsonl<W: Write>(
    out: &mut W,
    image_id: &str,
    detections: &[Detection],
) -> Result<()> {
    for d in detections {
        let record = DetectionRecord::new(image_id, d);
        serde_json::to_writer(&mut *out, &record)?;
        out.write_all(b"\n").map_err(|e| Error::Json(serde_json::Error::io(e)))?;
    }
    Ok(())
}

/// Read a whole JSON-lines detection dump.
pub fn read_detections_jsonl<R: BufRead>(input: R) -> Result<Vec<DetectionRecord>> {
    let mut records = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| Error::Json(serde_json::Error::io(e)))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}
