//! Axis-aligned boxes, IoU, and the center/log-size offset encoding used
//! for box regression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Corner-coordinate box in pixels: top-left inclusive, bottom-right
/// exclusive, so `width = x2 − x1` with no ±0.5 adjustments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox { x1: x, y1: y, x2: x + w, y2: y + h }
    }

    /// Box of the given size centered at (cx, cy).
    pub fn from_center_size(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox { x1: cx - 0.5 * w, y1: cy - 0.5 * h, x2: cx + 0.5 * w, y2: cy + 0.5 * h }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Zero or negative extent on either axis.
    pub fn is_degenerate(&self) -> bool {
        self.width() <= 0.0 || self.height() <= 0.0
    }

    pub fn shifted(&self, dx: f64, dy: f64) -> BBox {
        BBox { x1: self.x1 + dx, y1: self.y1 + dy, x2: self.x2 + dx, y2: self.y2 + dy }
    }

    /// Intersect with the image rectangle `[0, w) × [0, h)`. May produce a
    /// degenerate box when the input lies entirely outside.
    pub fn clip(&self, image_w: f64, image_h: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, image_w),
            y1: self.y1.clamp(0.0, image_h),
            x2: self.x2.clamp(0.0, image_w),
            y2: self.y2.clamp(0.0, image_h),
        }
    }
}

/// Intersection over union in [0, 1]. Degenerate boxes (zero or negative
/// area) score 0 against everything, which keeps matching total without
/// NaN checks downstream.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Regression target relating a box to an anchor: center offsets
/// normalized by the anchor size, plus log size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta { tx: 0.0, ty: 0.0, tw: 0.0, th: 0.0 };

    pub fn new(tx: f64, ty: f64, tw: f64, th: f64) -> BoxDelta {
        BoxDelta { tx, ty, tw, th }
    }
}

/// Largest log-ratio [`decode`] will exponentiate; anything bigger is a
/// sign the network diverged, not a real box.
const MAX_LOG_RATIO: f64 = 50.0;

/// Express `gt` relative to `anchor`:
/// tx = (gx − ax)/aw, ty = (gy − ay)/ah on centers, tw = ln(gw/aw),
/// th = ln(gh/ah). The anchor must have positive extent; a non-positive
/// ground-truth size is a malformed annotation and is reported as an error.
pub fn encode(gt: &BBox, anchor: &BBox) -> Result<BoxDelta> {
    debug_assert!(!anchor.is_degenerate(), "encode against degenerate anchor {anchor:?}");
    let (gw, gh) = (gt.width(), gt.height());
    if gw <= 0.0 || gh <= 0.0 {
        return Err(Error::Dataset(format!(
            "cannot encode box with non-positive size {gw}x{gh}"
        )));
    }
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    Ok(BoxDelta {
        tx: (gcx - acx) / aw,
        ty: (gcy - acy) / ah,
        tw: (gw / aw).ln(),
        th: (gh / ah).ln(),
    })
}

/// Invert [`encode`]: apply a delta to its anchor. Log ratios above
/// [`MAX_LOG_RATIO`] are clamped before exponentiation so a wild
/// prediction cannot overflow to infinity; clamping is logged at debug
/// level. No clipping to image bounds happens here.
pub fn decode(delta: &BoxDelta, anchor: &BBox) -> BBox {
    debug_assert!(!anchor.is_degenerate(), "decode against degenerate anchor {anchor:?}");
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = anchor.center();
    let mut tw = delta.tw;
    let mut th = delta.th;
    if tw > MAX_LOG_RATIO || th > MAX_LOG_RATIO {
        log::debug!("decode clamping oversized log ratios tw={tw} th={th}");
        tw = tw.min(MAX_LOG_RATIO);
        th = th.min(MAX_LOG_RATIO);
    }
    let w = aw * tw.exp();
    let h = ah * th.exp();
    let cx = acx + delta.tx * aw;
    let cy = acy + delta.ty * ah;
    BBox::from_center_size(cx, cy, w, h)
}
