//! Head boxes and the IoU family of overlap measures.
//!
//! Boxes live in normalized center form ([`BoundingBox`]); the corner form
//! ([`CornerBox`]) is only used for overlap arithmetic and file I/O.

use serde::{Deserialize, Serialize};

use crate::error::{MgtrError, Result};

/// Guards the division by the enclosing-box area (and its diagonal).
pub const ENCLOSING_EPS: f64 = 1e-9;

/// Normalized center-format box: all fields are fractions of the image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner-format box, `x1 < x2` and `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let BoundingBox { cx, cy, w, h } = *self;
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(MgtrError::InvalidBox(format!("non-finite field in {self:?}")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(MgtrError::InvalidBox(format!("zero or negative extent in {self:?}")));
        }
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
            return Err(MgtrError::InvalidBox(format!("center outside the image in {self:?}")));
        }
        Ok(())
    }

    pub fn to_corner(&self) -> CornerBox {
        center_to_corner(self)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Field tuple used for canonical ordering: cx, then cy, then w, then h.
    pub fn order_key(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn bits(&self) -> [u64; 4] {
        [self.cx.to_bits(), self.cy.to_bits(), self.w.to_bits(), self.h.to_bits()]
    }

    /// Horizontal mirror of the box inside the unit frame.
    pub fn flipped(&self) -> Self {
        BoundingBox {
            cx: 1.0 - self.cx,
            ..*self
        }
    }
}

impl CornerBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = CornerBox { x1, y1, x2, y2 };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) || x1 >= x2 || y1 >= y2 {
            return Err(MgtrError::InvalidBox(format!("degenerate corner box {b:?}")));
        }
        Ok(b)
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

    pub fn to_center(&self) -> BoundingBox {
        corner_to_center(self)
    }

    /// Scales a pixel-space box into unit fractions of a `w × h` image.
    pub fn normalized(&self, w: f64, h: f64) -> CornerBox {
        CornerBox {
            x1: self.x1 / w,
            y1: self.y1 / h,
            x2: self.x2 / w,
            y2: self.y2 / h,
        }
    }

    pub fn clipped(&self, x_max: f64, y_max: f64) -> CornerBox {
        CornerBox {
            x1: self.x1.clamp(0.0, x_max),
            y1: self.y1.clamp(0.0, y_max),
            x2: self.x2.clamp(0.0, x_max),
            y2: self.y2.clamp(0.0, y_max),
        }
    }
}

pub fn center_to_corner(b: &BoundingBox) -> CornerBox {
    CornerBox {
        x1: b.cx - b.w / 2.0,
        y1: b.cy - b.h / 2.0,
        x2: b.cx + b.w / 2.0,
        y2: b.cy + b.h / 2.0,
    }
}

pub fn corner_to_center(c: &CornerBox) -> BoundingBox {
    BoundingBox {
        cx: (c.x1 + c.x2) / 2.0,
        cy: (c.y1 + c.y2) / 2.0,
        w: c.x2 - c.x1,
        h: c.y2 - c.y1,
    }
}

fn intersection(a: &CornerBox, b: &CornerBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    iw * ih
}

fn enclosing(a: &CornerBox, b: &CornerBox) -> CornerBox {
    CornerBox {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
    }
}

/// Returns (intersection, union).
fn overlap(a: &CornerBox, b: &CornerBox) -> (f64, f64) {
    let inter = intersection(a, b);
    (inter, a.area() + b.area() - inter)
}

pub fn iou(a: &CornerBox, b: &CornerBox) -> f64 {
    let (inter, union) = overlap(a, b);
    inter / union
}

pub fn giou(a: &CornerBox, b: &CornerBox) -> f64 {
    let (inter, union) = overlap(a, b);
    let hull = enclosing(a, b).area();
    inter / union - (hull - union) / hull.max(ENCLOSING_EPS)
}

fn center_penalty(a: &CornerBox, b: &CornerBox) -> f64 {
    let ca = a.to_center();
    let cb = b.to_center();
    let rho2 = (ca.cx - cb.cx).powi(2) + (ca.cy - cb.cy).powi(2);
    let hull = enclosing(a, b);
    let diag2 = hull.width().powi(2) + hull.height().powi(2);
    rho2 / diag2.max(ENCLOSING_EPS)
}

/// Distance-IoU: IoU minus squared center distance over the squared
/// enclosing-box diagonal.
pub fn diou(a: &CornerBox, b: &CornerBox) -> f64 {
    iou(a, b) - center_penalty(a, b)
}

/// Complete-IoU: DIoU minus the aspect-ratio consistency term `α·v`.
pub fn ciou(a: &CornerBox, b: &CornerBox) -> f64 {
    let i = iou(a, b);
    let v = 4.0 / (std::f64::consts::PI * std::f64::consts::PI)
        * ((a.width() / a.height()).atan() - (b.width() / b.height()).atan()).powi(2);
    let alpha = if v == 0.0 { 0.0 } else { v / ((1.0 - i) + v) };
    i - center_penalty(a, b) - alpha * v
}

pub fn l1_box(a: &BoundingBox, b: &BoundingBox) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

/// Which overlap measure drives the box-regression term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapKind {
    #[default]
    Giou,
    Diou,
    Ciou,
}

impl OverlapKind {
    pub fn eval(self, a: &CornerBox, b: &CornerBox) -> f64 {
        match self {
            OverlapKind::Giou => giou(a, b),
            OverlapKind::Diou => diou(a, b),
            OverlapKind::Ciou => ciou(a, b),
        }
    }
}
