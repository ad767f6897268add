//! Oriented 3D boxes, rotated BEV IoU via convex polygon clipping, greedy
//! NMS, and anchor-relative box encoding/decoding.

use crate::error::{Error, Result};
use std::f64::consts::PI;

/// Oriented 3D box: center (x, y, z), width (across heading), length
/// (along heading), height, yaw in radians in (-pi, pi].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box3D {
    /// BEV footprint diagonal.
    pub fn diag(&self) -> f64 {
        (self.w * self.w + self.l * self.l).sqrt()
    }

    /// Footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [(f64, f64); 4] {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let hl = self.l / 2.0;
        let hw = self.w / 2.0;
        let local = [(hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)];
        local.map(|(dx, dy)| (self.x + dx * c - dy * s, self.y + dx * s + dy * c))
    }
}

/// Wrap an angle into (-pi, pi].
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut a = yaw.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Orientation bin of a yaw angle: 0 for [0, pi), 1 for [-pi, 0).
pub fn yaw_bin(yaw: f64) -> u8 {
    if normalize_yaw(yaw) >= 0.0 {
        0
    } else {
        1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub box3d: Box3D,
    pub class_id: usize,
    pub score: f64,
}

fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % poly.len()];
        acc += x1 * y2 - x2 * y1;
    }
    acc.abs() / 2.0
}

/// Clip a polygon by the half-plane left of the directed edge a -> b
/// (Sutherland-Hodgman step; the clip rectangle is counter-clockwise).
fn clip_by_edge(poly: &[(f64, f64)], a: (f64, f64), b: (f64, f64)) -> Vec<(f64, f64)> {
    let inside = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= 0.0;
    let intersect = |p: (f64, f64), q: (f64, f64)| {
        let d1 = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let d2 = (b.0 - a.0) * (q.1 - a.1) - (b.1 - a.1) * (q.0 - a.0);
        let t = d1 / (d1 - d2);
        (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
    };
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let cur = poly[i];
        let next = poly[(i + 1) % poly.len()];
        match (inside(cur), inside(next)) {
            (true, true) => out.push(next),
            (true, false) => out.push(intersect(cur, next)),
            (false, true) => {
                out.push(intersect(cur, next));
                out.push(next);
            }
            (false, false) => {}
        }
    }
    out
}

/// Intersection area of two yawed rectangles in the ground plane.
fn footprint_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let clip = b.bev_corners();
    let mut poly: Vec<(f64, f64)> = a.bev_corners().to_vec();
    for i in 0..4 {
        if poly.is_empty() {
            return 0.0;
        }
        poly = clip_by_edge(&poly, clip[i], clip[(i + 1) % 4]);
    }
    polygon_area(&poly)
}

/// Rotated BEV IoU in [0, 1]; degenerate (zero-area) boxes score 0.
pub fn rotated_iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let area_a = a.w * a.l;
    let area_b = b.w * b.l;
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    // Quick reject: farther apart than the circumradii sum cannot overlap.
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let reach = (a.diag() + b.diag()) / 2.0;
    if dx * dx + dy * dy > reach * reach {
        return 0.0;
    }
    let inter = footprint_intersection(a, b).min(area_a).min(area_b);
    let union = area_a + area_b - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy descending-score suppression with rotated BEV IoU. Ties are
/// broken by earlier input index.
pub fn nms_bev(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept
            .iter()
            .any(|&j| rotated_iou_bev(&dets[i].box3d, &dets[j].box3d) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

/// Anchor-relative decoding. `deltas` is (dx, dy, dz, dw, dl, dh, dyaw);
/// offsets are scaled by the anchor diagonal (xy) and height (z), sizes are
/// log-ratios. When `dir_bin` is given and disagrees with the decoded yaw's
/// orientation bin, the yaw is flipped by pi.
pub fn decode_box(deltas: &[f64; 7], anchor: &Box3D, dir_bin: Option<u8>) -> Box3D {
    let da = anchor.diag();
    let mut yaw = anchor.yaw + deltas[6];
    if let Some(bin) = dir_bin {
        if yaw_bin(yaw) != bin {
            yaw += PI;
        }
    }
    Box3D {
        x: anchor.x + deltas[0] * da,
        y: anchor.y + deltas[1] * da,
        z: anchor.z + deltas[2] * anchor.h,
        w: anchor.w * deltas[3].exp(),
        l: anchor.l * deltas[4].exp(),
        h: anchor.h * deltas[5].exp(),
        yaw: normalize_yaw(yaw),
    }
}

/// Algebraic inverse of [`decode_box`] (without the direction flip).
pub fn encode_box(target: &Box3D, anchor: &Box3D) -> [f64; 7] {
    let da = anchor.diag();
    [
        (target.x - anchor.x) / da,
        (target.y - anchor.y) / da,
        (target.z - anchor.z) / anchor.h,
        (target.w / anchor.w).ln(),
        (target.l / anchor.l).ln(),
        (target.h / anchor.h).ln(),
        target.yaw - anchor.yaw,
    ]
}

/// Decode one anchor's regression output, dropping non-finite deltas.
pub fn decode_checked(
    deltas: &[f64; 7],
    anchor: &Box3D,
    dir_bin: Option<u8>,
) -> Result<Box3D> {
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("box regression deltas".into()));
    }
    Ok(decode_box(deltas, anchor, dir_bin))
}
