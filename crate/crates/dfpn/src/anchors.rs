//! Anchor grids and ground-truth assignment.
//!
//! Every pyramid level carries 9 anchors per cell: three aspect ratios
//! (1:1, 1:2, 2:1) crossed with three scale factors (1, 2^(1/3), 2^(2/3)).
//! Anchor order is the contract tying the anchor list to head channels:
//! cells run row-major, and within a cell the index is
//! `ratio_index · scales + scale_index`, so the anchor at list position
//! `(i·W + j)·A + a` corresponds to head channel block `a` at cell (i, j).

use std::io::Write;

use crate::error::{Error, Result};
use crate::geometry::{encode, iou, BBox, BoxDelta};

/// IoU at or above which an anchor becomes a positive example.
pub const POSITIVE_IOU: f64 = 0.5;
/// IoU below which an anchor becomes background; the band between the two
/// thresholds is ignored during training.
pub const BACKGROUND_IOU: f64 = 0.4;

/// Shape set for the per-cell anchors. `ratios` are width/height factors;
/// `scale_factors` multiply the base size; the base size itself is
/// `base_size_factor × stride` for the level being generated.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    pub ratios: Vec<f64>,
    pub scale_factors: Vec<f64>,
    pub base_size_factor: f64,
}

impl Default for AnchorConfig {
    fn default() -> AnchorConfig {
        AnchorConfig {
            ratios: vec![1.0, 0.5, 2.0],
            scale_factors: vec![1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)],
            base_size_factor: 4.0,
        }
    }
}

impl AnchorConfig {
    pub fn anchors_per_location(&self) -> usize {
        self.ratios.len() * self.scale_factors.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() || self.scale_factors.is_empty() {
            return Err(Error::Config("anchor ratios and scales must be non-empty".into()));
        }
        if self.ratios.iter().chain(&self.scale_factors).any(|&v| !(v > 0.0)) {
            return Err(Error::Config("anchor ratios and scales must be positive".into()));
        }
        if !(self.base_size_factor > 0.0) {
            return Err(Error::Config("anchor base size factor must be positive".into()));
        }
        Ok(())
    }

    /// The 9 (w, h) shapes for one level, in per-cell order.
    fn shapes(&self, stride: usize) -> Vec<(f64, f64)> {
        let base = self.base_size_factor * stride as f64;
        let mut shapes = Vec::with_capacity(self.anchors_per_location());
        for &r in &self.ratios {
            for &s in &self.scale_factors {
                let side = base * s;
                shapes.push((side * r.sqrt(), side / r.sqrt()));
            }
        }
        shapes
    }
}

/// All anchors for one `height × width` level at the given stride. The
/// anchor for cell (i, j) is centered at ((j+0.5)·stride, (i+0.5)·stride);
/// boxes may extend past the image border and are deliberately not
/// clipped.
pub fn generate_anchors(height: usize, width: usize, stride: usize, cfg: &AnchorConfig) -> Vec<BBox> {
    let shapes = cfg.shapes(stride);
    let mut anchors = Vec::with_capacity(height * width * shapes.len());
    for i in 0..height {
        let cy = (i as f64 + 0.5) * stride as f64;
        for j in 0..width {
            let cx = (j as f64 + 0.5) * stride as f64;
            for &(w, h) in &shapes {
                anchors.push(BBox::from_center_size(cx, cy, w, h));
            }
        }
    }
    anchors
}

/// Per-anchor training role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched a ground truth: learn its class and box offsets.
    Positive { class: usize, gt_index: usize },
    /// Clearly empty: learn to predict nothing.
    Background,
    /// In the ambiguous IoU band: excluded from the loss entirely.
    Ignore,
}

/// Output of [`assign_targets`]: one label per anchor plus, for positive
/// anchors only, the encoded regression target.
#[derive(Debug, Clone)]
pub struct AssignmentResult {
    pub labels: Vec<AnchorLabel>,
    pub deltas: Vec<Option<BoxDelta>>,
}

impl AssignmentResult {
    pub fn positive_count(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Positive { .. }))
            .count()
    }

    /// (positive, background, ignore) counts; always sums to the anchor
    /// total.
    pub fn counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for l in &self.labels {
            match l {
                AnchorLabel::Positive { .. } => c.0 += 1,
                AnchorLabel::Background => c.1 += 1,
                AnchorLabel::Ignore => c.2 += 1,
            }
        }
        c
    }
}

/// Label every anchor against the ground truths by max IoU:
/// ≥ 0.5 takes the best-overlapping gt's class (ties to the lowest gt
/// index), < 0.4 is background, and the band between is ignored.
/// Ground truths with non-positive area are skipped with a warning.
pub fn assign_targets(
    anchors: &[BBox],
    gts: &[(BBox, usize)],
    num_classes: usize,
) -> Result<AssignmentResult> {
    if num_classes == 0 {
        return Err(Error::Config("assign_targets requires at least one class".into()));
    }
    if anchors.is_empty() {
        return Err(Error::Config("assign_targets requires at least one anchor".into()));
    }
    let mut valid: Vec<(usize, &BBox, usize)> = Vec::with_capacity(gts.len());
    for (gi, (gbox, class)) in gts.iter().enumerate() {
        if gbox.is_degenerate() {
            log::warn!("skipping ground truth {gi} with non-positive area: {gbox:?}");
            continue;
        }
        if *class >= num_classes {
            return Err(Error::Dataset(format!(
                "ground truth {gi} has class {class}, but only {num_classes} classes exist"
            )));
        }
        valid.push((gi, gbox, *class));
    }

    let mut labels = Vec::with_capacity(anchors.len());
    let mut deltas = Vec::with_capacity(anchors.len());
    for anchor in anchors {
        let mut best = 0.0;
        let mut best_gt: Option<(usize, &BBox, usize)> = None;
        for &(gi, gbox, class) in &valid {
            let v = iou(anchor, gbox);
            if v > best {
                best = v;
                best_gt = Some((gi, gbox, class));
            }
        }
        if best >= POSITIVE_IOU {
            let (gi, gbox, class) = best_gt.expect("positive IoU implies a matched gt");
            labels.push(AnchorLabel::Positive { class, gt_index: gi });
            deltas.push(Some(encode(gbox, anchor)?));
        } else if best < BACKGROUND_IOU {
            labels.push(AnchorLabel::Background);
            deltas.push(None);
        } else {
            labels.push(AnchorLabel::Ignore);
            deltas.push(None);
        }
    }
    Ok(AssignmentResult { labels, deltas })
}

/// Write one level's anchors as CSV for visualization tooling. Columns:
/// level, cell_y, cell_x, ratio, scale, x1, y1, x2, y2.
pub fn dump_anchors_csv<W: Write>(
    out: &mut W,
    level: usize,
    height: usize,
    width: usize,
    stride: usize,
    cfg: &AnchorConfig,
) -> std::io::Result<()> {
    let anchors = generate_anchors(height, width, stride, cfg);
    let per_loc = cfg.anchors_per_location();
    let scales = cfg.scale_factors.len();
    writeln!(out, "level,cell_y,cell_x,ratio,scale,x1,y1,x2,y2")?;
    for (idx, a) in anchors.iter().enumerate() {
        let cell = idx / per_loc;
        let within = idx % per_loc;
        let ratio = cfg.ratios[within / scales];
        let scale = cfg.scale_factors[within % scales];
        writeln!(
            out,
            "{level},{},{},{ratio},{scale},{},{},{},{}",
            cell / width,
            cell % width,
            a.x1,
            a.y1,
            a.x2,
            a.y2
        )?;
    }
    Ok(())
}
