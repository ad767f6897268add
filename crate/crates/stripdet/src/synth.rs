//! Synthetic scenes for desk-scale training: car-sized boxes placed inside
//! the grid with points sampled on their surfaces, plus uniform ground
//! clutter.

use crate::boxes::Box3D;
use crate::pillars::{GridSpec, PointCloud};
use crate::seed::{stream_rng, STREAM_SCENE};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

const CAR_W: f64 = 1.6;
const CAR_L: f64 = 3.9;
const CAR_H: f64 = 1.56;
const CAR_Z: f64 = -1.78;
const POINTS_PER_BOX: usize = 200;
const CLUTTER_PER_BOX: usize = 150;
/// Surface samples are pulled slightly toward the box center so every
/// sampled point tests strictly inside the footprint.
const INSET: f64 = 0.99;

/// Deterministically place `n_boxes` yawed car-sized boxes inside the grid
/// and sample a point cloud from their surfaces plus ground clutter.
pub fn synth_scene(grid: &GridSpec, seed: u64, n_boxes: usize) -> (PointCloud, Vec<Box3D>) {
    let mut rng = stream_rng(seed, STREAM_SCENE);
    let margin = Box3D {
        x: 0.0,
        y: 0.0,
        z: 0.0,
        w: CAR_W,
        l: CAR_L,
        h: CAR_H,
        yaw: 0.0,
    }
    .diag()
        / 2.0
        + 0.5;

    let mut boxes: Vec<Box3D> = Vec::with_capacity(n_boxes);
    while boxes.len() < n_boxes {
        let candidate = Box3D {
            x: rng.gen_range(grid.x_range.0 + margin..grid.x_range.1 - margin),
            y: rng.gen_range(grid.y_range.0 + margin..grid.y_range.1 - margin),
            z: CAR_Z,
            w: CAR_W,
            l: CAR_L,
            h: CAR_H,
            yaw: rng.gen_range(-PI..PI),
        };
        let clear = boxes.iter().all(|b| {
            let dx = b.x - candidate.x;
            let dy = b.y - candidate.y;
            (dx * dx + dy * dy).sqrt() > CAR_L + 1.0
        });
        if clear {
            boxes.push(candidate);
        }
    }

    let mut points = Vec::new();
    for b in &boxes {
        for _ in 0..POINTS_PER_BOX {
            points.push(sample_surface_point(b, &mut rng));
        }
    }
    for _ in 0..CLUTTER_PER_BOX * n_boxes {
        points.push([
            rng.gen_range(grid.x_range.0..grid.x_range.1) as f32,
            rng.gen_range(grid.y_range.0..grid.y_range.1) as f32,
            rng.gen_range(grid.z_range.0 + 0.1..grid.z_range.0 + 0.4) as f32,
            rng.gen_range(0.0..1.0) as f32,
        ]);
    }

    (PointCloud { points }, boxes)
}

/// Sample a point on one of the four side faces or the top, chosen
/// proportionally to face area, then rotate and translate into the scene.
fn sample_surface_point(b: &Box3D, rng: &mut ChaCha8Rng) -> [f32; 4] {
    let side_l = b.l * b.h; // faces at y = +-w/2
    let side_w = b.w * b.h; // faces at x = +-l/2
    let top = b.l * b.w;
    let total = 2.0 * side_l + 2.0 * side_w + top;
    let pick = rng.gen_range(0.0..total);

    let (lx, ly, lz) = if pick < 2.0 * side_l {
        let sign = if pick < side_l { 1.0 } else { -1.0 };
        (
            rng.gen_range(-b.l / 2.0..b.l / 2.0) * INSET,
            sign * b.w / 2.0 * INSET,
            rng.gen_range(-b.h / 2.0..b.h / 2.0),
        )
    } else if pick < 2.0 * side_l + 2.0 * side_w {
        let sign = if pick < 2.0 * side_l + side_w { 1.0 } else { -1.0 };
        (
            sign * b.l / 2.0 * INSET,
            rng.gen_range(-b.w / 2.0..b.w / 2.0) * INSET,
            rng.gen_range(-b.h / 2.0..b.h / 2.0),
        )
    } else {
        (
            rng.gen_range(-b.l / 2.0..b.l / 2.0) * INSET,
            rng.gen_range(-b.w / 2.0..b.w / 2.0) * INSET,
            b.h / 2.0,
        )
    };

    let (c, s) = (b.yaw.cos(), b.yaw.sin());
    [
        (b.x + lx * c - ly * s) as f32,
        (b.y + lx * s + ly * c) as f32,
        (b.z + lz) as f32,
        rng.gen_range(0.0..1.0) as f32,
    ]
}

/// True when (x, y) lies inside the box footprint.
pub fn point_in_footprint(b: &Box3D, x: f64, y: f64) -> bool {
    let (c, s) = (b.yaw.cos(), b.yaw.sin());
    let dx = x - b.x;
    let dy = y - b.y;
    // Rotate into the box frame.
    let lx = dx * c + dy * s;
    let ly = -dx * s + dy * c;
    lx.abs() <= b.l / 2.0 && ly.abs() <= b.w / 2.0
}
