//! Center-size boxes, IoU, and the delta coding used for anchor and box
//! regression targets.

use crate::error::{Error, Result};

/// Axis-aligned box as center `(x, y)` and extents `(w, h)`, in input-image
/// pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxXywh {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Regression target `(d_x, d_y, d_w, d_h)`; the size terms are log-ratios.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Deltas {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl Deltas {
    pub const ZERO: Deltas = Deltas {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Deltas {
            dx: a[0],
            dy: a[1],
            dw: a[2],
            dh: a[3],
        }
    }
}

impl BoxXywh {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            x: 0.5 * (x0 + x1),
            y: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn x0(&self) -> f64 {
        self.x - 0.5 * self.w
    }
    pub fn y0(&self) -> f64 {
        self.y - 0.5 * self.h
    }
    pub fn x1(&self) -> f64 {
        self.x + 0.5 * self.w
    }
    pub fn y1(&self) -> f64 {
        self.y + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite()
    }

    pub fn iou(&self, other: &BoxXywh) -> f64 {
        let iw = (self.x1().min(other.x1()) - self.x0().max(other.x0())).max(0.0);
        let ih = (self.y1().min(other.y1()) - self.y0().max(other.y0())).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Intersection with `[0, width] × [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BoxXywh {
        let x0 = self.x0().clamp(0.0, width);
        let y0 = self.y0().clamp(0.0, height);
        let x1 = self.x1().clamp(0.0, width);
        let y1 = self.y1().clamp(0.0, height);
        BoxXywh::from_corners(x0, y0, x1, y1)
    }
}

fn check_extents(op: &'static str, b: &BoxXywh) -> Result<()> {
    if b.w > 0.0 && b.h > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(
            op,
            format!("box extents must be positive, got w={} h={}", b.w, b.h),
        ))
    }
}

/// Center offsets are raw pixel differences unless `normalized`, in which
/// case they are divided by the reference box extents.
pub fn encode_deltas(p: &BoxXywh, g: &BoxXywh, normalized: bool) -> Result<Deltas> {
    check_extents("encode_deltas", p)?;
    check_extents("encode_deltas", g)?;
    let (sx, sy) = if normalized { (p.w, p.h) } else { (1.0, 1.0) };
    Ok(Deltas {
        dx: (g.x - p.x) / sx,
        dy: (g.y - p.y) / sy,
        dw: (g.w / p.w).ln(),
        dh: (g.h / p.h).ln(),
    })
}

/// Log-size deltas beyond this are clamped before `exp` so a wild
/// prediction cannot overflow.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

pub fn decode_deltas(p: &BoxXywh, d: &Deltas, normalized: bool) -> Result<BoxXywh> {
    check_extents("decode_deltas", p)?;
    let (sx, sy) = if normalized { (p.w, p.h) } else { (1.0, 1.0) };
    Ok(BoxXywh {
        x: p.x + d.dx * sx,
        y: p.y + d.dy * sy,
        w: p.w * d.dw.min(MAX_LOG_SCALE).exp(),
        h: p.h * d.dh.min(MAX_LOG_SCALE).exp(),
    })
}
