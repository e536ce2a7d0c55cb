//! Detection-quality metrics (per-class AP, mAP over an IoU sweep) and a
//! small wall-clock throughput harness.
//!
//! Matching follows the usual greedy protocol: detections are visited in
//! descending score order and claim the unmatched ground-truth box of the
//! same image with the highest IoU at or above the threshold. A detection
//! whose only qualifying overlap is with an ignore-flagged box counts as
//! neither a true nor a false positive. Ignore boxes are class-agnostic:
//! they absorb detections of any class.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::inference::DetectionRecord;

/// One ground-truth box. `ignore` marks regions that should neither be
/// rewarded nor penalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub bbox: BBox,
    pub class_id: usize,
    pub ignore: bool,
}

impl Annotation {
    pub fn new(image_id: &str, bbox: BBox, class_id: usize) -> Annotation {
        Annotation { image_id: image_id.to_string(), bbox, class_id, ignore: false }
    }
}

/// One point of a precision/recall curve, tagged with the score cutoff
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub score: f64,
}

/// Per-class results: AP at every evaluated IoU threshold plus the
/// precision/recall curve at the first threshold (0.5 in the usual sweep).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub class_id: usize,
    pub gt_count: usize,
    pub ap_by_threshold: Vec<(f64, f64)>,
    pub pr_curve: Vec<PrPoint>,
}

impl ClassEval {
    pub fn mean_ap(&self) -> f64 {
        let n = self.ap_by_threshold.len().max(1) as f64;
        self.ap_by_threshold.iter().map(|(_, ap)| ap).sum::<f64>() / n
    }

    pub fn ap_at(&self, threshold: f64) -> Option<f64> {
        self.ap_by_threshold
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-9)
            .map(|(_, ap)| *ap)
    }
}

/// The full evaluation summary. `map` averages over classes and IoU
/// thresholds; `map50` averages AP at IoU 0.5 only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassEval>,
    pub iou_thresholds: Vec<f64>,
    pub map: f64,
    pub map50: f64,
    pub fps: Option<FpsReport>,
}

/// The IoU sweep used for the headline mAP number: 0.50 to 0.95 in steps
/// of 0.05.
pub fn standard_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Internal: ground truth prepared for one class — real boxes grouped per
/// image plus the class-agnostic ignore regions.
struct ClassTruth<'a> {
    real: HashMap<&'a str, Vec<&'a BBox>>,
    ignored: HashMap<&'a str, Vec<&'a BBox>>,
    real_count: usize,
}

fn collect_truth<'a>(annotations: &'a [Annotation], class_id: usize) -> ClassTruth<'a> {
    let mut real: HashMap<&str, Vec<&BBox>> = HashMap::new();
    let mut ignored: HashMap<&str, Vec<&BBox>> = HashMap::new();
    let mut real_count = 0;
    for ann in annotations {
        if ann.ignore {
            ignored.entry(&ann.image_id).or_default().push(&ann.bbox);
        } else if ann.class_id == class_id {
            real.entry(&ann.image_id).or_default().push(&ann.bbox);
            real_count += 1;
        }
    }
    ClassTruth { real, ignored, real_count }
}

fn sort_detections(dets: &mut [&DetectionRecord]) {
    dets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.image_id.cmp(&b.image_id))
            .then(a.x1.partial_cmp(&b.x1).unwrap())
            .then(a.y1.partial_cmp(&b.y1).unwrap())
    });
}

/// Average precision for one class at one IoU threshold, with the raw
/// precision/recall points. `detections` must already be restricted to
/// the class under evaluation; `truth` carries that class's boxes and the
/// ignore regions.
fn class_average_precision(
    detections: &[&DetectionRecord],
    truth: &ClassTruth<'_>,
    iou_threshold: f64,
) -> (f64, Vec<PrPoint>) {
    let mut order: Vec<&DetectionRecord> = detections.to_vec();
    sort_detections(&mut order);

    let mut matched: HashMap<&str, Vec<bool>> =
        truth.real.iter().map(|(id, boxes)| (*id, vec![false; boxes.len()])).collect();
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for det in order {
        let dbox = BBox::new(det.x1, det.y1, det.x2, det.y2);
        // best unmatched real box of this image
        let mut best: Option<(usize, f64)> = None;
        if let Some(boxes) = truth.real.get(det.image_id.as_str()) {
            let flags = &matched[det.image_id.as_str()];
            for (gi, gt) in boxes.iter().enumerate() {
                if flags[gi] {
                    continue;
                }
                let overlap = iou(&dbox, gt);
                if overlap >= iou_threshold && best.map_or(true, |(_, b)| overlap > b) {
                    best = Some((gi, overlap));
                }
            }
        }
        if let Some((gi, _)) = best {
            matched.get_mut(det.image_id.as_str()).unwrap()[gi] = true;
            tp += 1;
        } else {
            let on_ignore = truth
                .ignored
                .get(det.image_id.as_str())
                .map_or(false, |boxes| boxes.iter().any(|g| iou(&dbox, g) >= iou_threshold));
            if on_ignore {
                continue; // neither TP nor FP
            }
            fp += 1;
        }
        curve.push(PrPoint {
            recall: tp as f64 / truth.real_count as f64,
            precision: tp as f64 / (tp + fp) as f64,
            score: det.score,
        });
    }

    (area_under_pr(&curve), curve)
}

/// All-points interpolation: clamp the precision curve to be monotone
/// non-increasing from the right, then integrate over recall.
fn area_under_pr(curve: &[PrPoint]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in curve.iter().zip(&envelope) {
        if p.recall > prev_recall {
            ap += (p.recall - prev_recall) * env;
            prev_recall = p.recall;
        }
    }
    ap
}

/// Average precision over arbitrary single-class inputs. Ignore-flagged
/// annotations act as ignore regions; all others must carry the same
/// class as the detections. Errors if there is no non-ignored box.
pub fn average_precision(
    detections: &[DetectionRecord],
    annotations: &[Annotation],
    iou_threshold: f64,
) -> Result<(f64, Vec<PrPoint>)> {
    validate_records(detections)?;
    let class_id = annotations
        .iter()
        .find(|a| !a.ignore)
        .map(|a| a.class_id)
        .ok_or_else(|| Error::Eval("no non-ignored ground truth to evaluate against".into()))?;
    let truth = collect_truth(annotations, class_id);
    let refs: Vec<&DetectionRecord> = detections.iter().collect();
    Ok(class_average_precision(&refs, &truth, iou_threshold))
}

fn validate_records(detections: &[DetectionRecord]) -> Result<()> {
    for d in detections {
        let finite =
            d.score.is_finite() && [d.x1, d.y1, d.x2, d.y2].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Eval(format!(
                "non-finite detection for image {}: score {} box ({}, {}, {}, {})",
                d.image_id, d.score, d.x1, d.y1, d.x2, d.y2
            )));
        }
    }
    Ok(())
}

/// Evaluate a detection dump against ground truth over a sweep of IoU
/// thresholds. Classes with no non-ignored ground truth are left out of
/// the report (their AP is undefined); an entirely empty ground-truth set
/// is an error.
pub fn evaluate(
    detections: &[DetectionRecord],
    annotations: &[Annotation],
    iou_thresholds: &[f64],
) -> Result<EvalReport> {
    validate_records(detections)?;
    if iou_thresholds.is_empty() {
        return Err(Error::Eval("need at least one IoU threshold".into()));
    }
    let mut class_ids: Vec<usize> =
        annotations.iter().filter(|a| !a.ignore).map(|a| a.class_id).collect();
    class_ids.sort_unstable();
    class_ids.dedup();
    if class_ids.is_empty() {
        return Err(Error::Eval("no non-ignored ground truth to evaluate against".into()));
    }

    let mut classes = Vec::new();
    for &class_id in &class_ids {
        let truth = collect_truth(annotations, class_id);
        let dets: Vec<&DetectionRecord> =
            detections.iter().filter(|d| d.class_id == class_id).collect();
        let mut ap_by_threshold = Vec::new();
        let mut pr_curve = Vec::new();
        for (ti, &thr) in iou_thresholds.iter().enumerate() {
            let (ap, curve) = class_average_precision(&dets, &truth, thr);
            ap_by_threshold.push((thr, ap));
            if ti == 0 {
                pr_curve = curve;
            }
        }
        classes.push(ClassEval { class_id, gt_count: truth.real_count, ap_by_threshold, pr_curve });
    }

    let map = classes.iter().map(ClassEval::mean_ap).sum::<f64>() / classes.len() as f64;
    let map50s: Vec<f64> = classes
        .iter()
        .map(|c| c.ap_at(0.5).unwrap_or_else(|| c.ap_by_threshold[0].1))
        .collect();
    let map50 = map50s.iter().sum::<f64>() / map50s.len() as f64;

    Ok(EvalReport {
        classes,
        iou_thresholds: iou_thresholds.to_vec(),
        map,
        map50,
        fps: None,
    })
}

/// Throughput numbers from [`benchmark_fps`]. `fps` is measured frames
/// divided by the wall-clock time of the measured section only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpsReport {
    pub fps: f64,
    pub warmup_frames: usize,
    pub measured_frames: usize,
    pub total_seconds: f64,
    pub p50_latency_ms: f64,
    pub p95_latency_ms: f64,
}

/// Run `frame(i)` for `warmup + measured` iterations. The clock starts
/// after the warmup frames finish, so one-time setup costs (allocator
/// warm-up, first-touch page faults) do not pollute the throughput
/// number. Latency percentiles use the nearest-rank method.
pub fn benchmark_fps<F>(mut frame: F, warmup: usize, measured: usize) -> Result<FpsReport>
where
    F: FnMut(usize) -> Result<()>,
{
    if measured == 0 {
        return Err(Error::Config("need at least one measured frame".into()));
    }
    for i in 0..warmup {
        frame(i)?;
    }
    let mut latencies_ms = Vec::with_capacity(measured);
    let start = Instant::now();
    for i in 0..measured {
        let t0 = Instant::now();
        frame(warmup + i)?;
        latencies_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let total_seconds = start.elapsed().as_secs_f64();

    latencies_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = |q: f64| {
        let idx = (q * measured as f64).ceil() as usize;
        latencies_ms[idx.clamp(1, measured) - 1]
    };
    Ok(FpsReport {
        fps: measured as f64 / total_seconds,
        warmup_frames: warmup,
        measured_frames: measured,
        total_seconds,
        p50_latency_ms: rank(0.50),
        p95_latency_ms: rank(0.95),
    })
}

/// Pretty-printed summary table.
pub fn write_report_table<W: Write>(out: &mut W, report: &EvalReport) -> std::io::Result<()> {
    writeln!(out, "{:>8}  {:>8}  {:>8}  {:>8}", "class", "gts", "AP@0.50", "AP")?;
    for c in &report.classes {
        let ap50 = c.ap_at(0.5).unwrap_or_else(|| c.ap_by_threshold[0].1);
        writeln!(out, "{:>8}  {:>8}  {:>8.4}  {:>8.4}", c.class_id, c.gt_count, ap50, c.mean_ap())?;
    }
    writeln!(out, "mAP      = {:.4}", report.map)?;
    writeln!(out, "mAP@0.50 = {:.4}", report.map50)?;
    if let Some(fps) = &report.fps {
        writeln!(
            out,
            "fps      = {:.2} ({} frames, p50 {:.2} ms, p95 {:.2} ms)",
            fps.fps, fps.measured_frames, fps.p50_latency_ms, fps.p95_latency_ms
        )?;
    }
    Ok(())
}

/// Machine-readable report (pretty JSON).
pub fn write_report_json<W: Write>(out: &mut W, report: &EvalReport) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, report)?;
    out.write_all(b"\n").map_err(|e| Error::Json(serde_json::Error::io(e)))?;
    Ok(())
}
