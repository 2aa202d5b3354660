//! Box geometry and the six-component pairwise spatial feature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box given by its center and extent, in image-normalized
/// units (`y` grows downward).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Normalizes a pixel-space box (top-left corner plus size) by the image size.
    pub fn from_pixels(x0: f64, y0: f64, w: f64, h: f64, image_w: f64, image_h: f64) -> Result<Self> {
        if !(image_w > 0.0 && image_h > 0.0) {
            return Err(Error::validation("image size must be positive"));
        }
        let b = Self::new(
            (x0 + w / 2.0) / image_w,
            (y0 + h / 2.0) / image_h,
            w / image_w,
            h / image_h,
        );
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::validation(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Smallest box covering both.
    pub fn union_box(&self, other: &BoundingBox) -> BoundingBox {
        let x0 = self.x0().min(other.x0());
        let x1 = self.x1().max(other.x1());
        let y0 = self.y0().min(other.y0());
        let y1 = self.y1().max(other.y1());
        BoundingBox::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BoundingBox {
        BoundingBox::new(self.cx + dx, self.cy + dy, self.w, self.h)
    }

    pub fn scaled(&self, s: f64) -> BoundingBox {
        BoundingBox::new(self.cx * s, self.cy * s, self.w * s, self.h * s)
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    // Corner-derived areas so that identical boxes give exactly 1.
    let area = |r: &BoundingBox| (r.x1() - r.x0()) * (r.y1() - r.y0());
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub const SPATIAL_DIM: usize = 6;

/// Pairwise layout of box `j` relative to box `i`: center offset in units of
/// `sqrt(area_i)` (x then y), `sqrt(area_j / area_i)`, IoU, and the two
/// width/height aspect ratios.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialFeature(pub [f64; SPATIAL_DIM]);

impl SpatialFeature {
    pub fn dx(&self) -> f64 {
        self.0[0]
    }

    pub fn dy(&self) -> f64 {
        self.0[1]
    }

    pub fn size_ratio(&self) -> f64 {
        self.0[2]
    }

    pub fn iou(&self) -> f64 {
        self.0[3]
    }

    pub fn aspect_i(&self) -> f64 {
        self.0[4]
    }

    pub fn aspect_j(&self) -> f64 {
        self.0[5]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn spatial_feature(bi: &BoundingBox, bj: &BoundingBox) -> Result<SpatialFeature> {
    bi.validate()?;
    bj.validate()?;
    let scale = (bi.w * bi.h).sqrt();
    Ok(SpatialFeature([
        (bj.cx - bi.cx) / scale,
        (bj.cy - bi.cy) / scale,
        ((bj.w * bj.h) / (bi.w * bi.h)).sqrt(),
        iou(bi, bj),
        bi.w / bi.h,
        bj.w / bj.h,
    ]))
}
