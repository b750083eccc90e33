//! Box geometry and the center-code transform.
//!
//! Corner boxes are `[xmin, ymin, xmax, ymax]`, center boxes
//! `[cx, cy, w, h]`; both in image-normalised coordinates.

use serde::{Deserialize, Serialize};

pub type CornerBox = [f64; 4];
pub type CenterBox = [f64; 4];

/// Regression variances `(v0, v1, v2, v3)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Variances(pub [f64; 4]);

impl Default for Variances {
    fn default() -> Self {
        Variances([0.1, 0.1, 0.2, 0.2])
    }
}

/// Bound on the log-size term before exponentiation.
pub const MAX_LOG_SCALE: f64 = 10.0;

pub fn to_center(b: &CornerBox) -> CenterBox {
    [
        0.5 * (b[0] + b[2]),
        0.5 * (b[1] + b[3]),
        b[2] - b[0],
        b[3] - b[1],
    ]
}

pub fn to_corner(c: &CenterBox) -> CornerBox {
    [
        c[0] - 0.5 * c[2],
        c[1] - 0.5 * c[3],
        c[0] + 0.5 * c[2],
        c[1] + 0.5 * c[3],
    ]
}

pub fn area(b: &CornerBox) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Intersection over union; 0 when either box has zero area.
pub fn iou(a: &CornerBox, b: &CornerBox) -> f64 {
    let (aa, ab) = (area(a), area(b));
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    (inter / (aa + ab - inter)).clamp(0.0, 1.0)
}

pub fn clip_unit(b: &CornerBox) -> CornerBox {
    b.map(|v| v.clamp(0.0, 1.0))
}

/// True when `xmin < xmax`, `ymin < ymax` and every coordinate is in `[0, 1]`.
pub fn is_well_formed(b: &CornerBox) -> bool {
    b[0] < b[2] && b[1] < b[3] && b.iter().all(|v| (0.0..=1.0).contains(v))
}

/// Center-code offsets of `gt` relative to `prior`.
pub fn encode(gt: &CornerBox, prior: &CenterBox, v: &Variances) -> [f64; 4] {
    let g = to_center(gt);
    let v = v.0;
    [
        (g[0] - prior[0]) / (prior[2] * v[0]),
        (g[1] - prior[1]) / (prior[3] * v[1]),
        (g[2] / prior[2]).ln() / v[2],
        (g[3] / prior[3]).ln() / v[3],
    ]
}

/// Inverse of [`encode`] before clipping. The log-size terms are clamped
/// to `±MAX_LOG_SCALE` so the exponential cannot overflow.
pub fn decode_unclipped(t: &[f64; 4], prior: &CenterBox, v: &Variances) -> CornerBox {
    let v = v.0;
    let cx = prior[0] + t[0] * v[0] * prior[2];
    let cy = prior[1] + t[1] * v[1] * prior[3];
    let w = prior[2] * (t[2] * v[2]).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let h = prior[3] * (t[3] * v[3]).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    to_corner(&[cx, cy, w, h])
}

/// Decoded corner box clipped to the unit square.
pub fn decode(t: &[f64; 4], prior: &CenterBox, v: &Variances) -> CornerBox {
    clip_unit(&decode_unclipped(t, prior, v))
}

/// Mirror about the vertical centre line.
pub fn flip_horizontal(b: &CornerBox) -> CornerBox {
    [1.0 - b[2], b[1], 1.0 - b[0], b[3]]
}
