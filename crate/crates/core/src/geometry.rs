//! Axis-aligned box arithmetic.
//!
//! Coordinates are continuous pixels with the top-left corner at `(x1, y1)`
//! and the bottom-right corner at `(x2, y2)`. Area has no `+1` term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(c: [f64; 4]) -> Self {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    /// Checks the ordering and finiteness invariants.
    pub fn is_valid(&self) -> bool {
        let finite = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite());
        finite && self.x1 <= self.x2 && self.y1 <= self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        area(self)
    }

    pub fn scaled(&self, k: f64) -> BBox {
        BBox::new(self.x1 * k, self.y1 * k, self.x2 * k, self.y2 * k)
    }
}

/// Image extent in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageSize {
    pub w: f64,
    pub h: f64,
}

impl ImageSize {
    pub fn new(w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "image size must be positive, got {w}x{h}"
            )));
        }
        Ok(ImageSize { w, h })
    }
}

pub fn area(b: &BBox) -> f64 {
    (b.x2 - b.x1).max(0.0) * (b.y2 - b.y1).max(0.0)
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Scale-invariant log encoding of a box relative to its image:
/// `ln(x1/w + 0.5), ln(y1/h + 0.5), ln(x2/w + 0.5), ln(y2/h + 0.5)`.
pub fn normalize_geometric(b: &BBox, img: ImageSize) -> Result<[f64; 4]> {
    let args = [
        b.x1 / img.w + 0.5,
        b.y1 / img.h + 0.5,
        b.x2 / img.w + 0.5,
        b.y2 / img.h + 0.5,
    ];
    if args.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "box {b:?} lies too far outside image {}x{} for log normalization",
            img.w, img.h
        )));
    }
    Ok(args.map(f64::ln))
}
