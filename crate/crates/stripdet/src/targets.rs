//! Anchor grid generation and target assignment for training: per-anchor
//! class labels, encoded box deltas and orientation bins, laid out to match
//! the head's output maps element for element.

use crate::boxes::{encode_box, rotated_iou_bev, yaw_bin, Box3D};
use crate::config::{ModelConfig, ANCHOR_YAWS, BOX_CODE_SIZE};
use crate::error::Result;

/// One ground-truth object: box plus class index.
#[derive(Clone, Debug)]
pub struct GtBox {
    pub box3d: Box3D,
    pub class_id: usize,
}

/// Anchor index layout: a = class_id * 2 + yaw_idx, flattened as
/// (a * h + i) * w + j over the head grid.
pub fn anchor_index(a: usize, i: usize, j: usize, h: usize, w: usize) -> usize {
    (a * h + i) * w + j
}

/// Class of anchor slot `a`.
pub fn anchor_class(a: usize) -> usize {
    a / ANCHOR_YAWS.len()
}

/// Generate the per-cell anchor boxes for a head grid of (h, w) cells.
/// The head runs at stride 2 over the BEV grid, so each cell spans two
/// pillars in each direction.
pub fn generate_anchors(cfg: &ModelConfig, h: usize, w: usize) -> Result<Vec<Box3D>> {
    let grid = &cfg.grid;
    let cell_dx = grid.pillar_dx * (grid.width()? as f64 / w as f64);
    let cell_dy = grid.pillar_dy * (grid.height()? as f64 / h as f64);
    let a_total = cfg.anchors_per_cell();
    let mut anchors = Vec::with_capacity(a_total * h * w);
    for a in 0..a_total {
        let spec = &cfg.anchors[anchor_class(a)];
        let yaw = ANCHOR_YAWS[a % ANCHOR_YAWS.len()];
        for i in 0..h {
            for j in 0..w {
                anchors.push(Box3D {
                    x: grid.x_range.0 + (j as f64 + 0.5) * cell_dx,
                    y: grid.y_range.0 + (i as f64 + 0.5) * cell_dy,
                    z: spec.z_center,
                    w: spec.width,
                    l: spec.length,
                    h: spec.height,
                    yaw,
                });
            }
        }
    }
    Ok(anchors)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    /// Matched to the ground-truth box with this index.
    Positive(usize),
    Negative,
    Ignore,
}

/// Match anchors to ground truth by rotated BEV IoU, per class:
/// IoU >= match_iou is positive, below unmatch_iou negative, in between
/// ignored. Every ground-truth box additionally claims its argmax-IoU
/// anchor (when that IoU is nonzero), processed in ground-truth order.
pub fn assign_targets(
    cfg: &ModelConfig,
    anchors: &[Box3D],
    gts: &[GtBox],
) -> Vec<Assignment> {
    let plane = anchors.len() / cfg.anchors_per_cell();
    let mut out = vec![Assignment::Negative; anchors.len()];
    let mut best_for_gt: Vec<(usize, f64)> = vec![(usize::MAX, 0.0); gts.len()];

    for (ai, anchor) in anchors.iter().enumerate() {
        // Anchors are laid out a-major: slot index a = ai / (h*w).
        let class = anchor_class(ai / plane);
        let spec = &cfg.anchors[class];
        let mut best_iou = 0.0;
        let mut best_gt = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt.class_id != class {
                continue;
            }
            let iou = rotated_iou_bev(anchor, &gt.box3d);
            if iou > best_iou {
                best_iou = iou;
                best_gt = Some(gi);
            }
            if iou > best_for_gt[gi].1 {
                best_for_gt[gi] = (ai, iou);
            }
        }
        out[ai] = match best_gt {
            Some(gi) if best_iou >= spec.match_iou => Assignment::Positive(gi),
            _ if best_iou < spec.unmatch_iou => Assignment::Negative,
            _ => Assignment::Ignore,
        };
    }

    // Force-match each gt's best anchor, in gt order.
    for (gi, &(ai, iou)) in best_for_gt.iter().enumerate() {
        if ai != usize::MAX && iou > 0.0 {
            out[ai] = Assignment::Positive(gi);
        }
    }
    out
}

/// Flattened training targets aligned with the head output maps.
pub struct LossTargets {
    pub cls_targets: Vec<bool>,
    pub cls_mask: Vec<bool>,
    pub cls_norm: f64,
    pub box_targets: Vec<f64>,
    pub box_mask: Vec<bool>,
    pub box_norm: f64,
    pub dir_bins: Vec<u8>,
    pub dir_mask: Vec<bool>,
    pub dir_norm: f64,
    pub num_pos: usize,
}

/// Expand per-anchor assignments into loss-aligned target vectors for a
/// head grid of (h, w) cells.
pub fn build_loss_targets(
    cfg: &ModelConfig,
    h: usize,
    w: usize,
    anchors: &[Box3D],
    assignments: &[Assignment],
    gts: &[GtBox],
) -> LossTargets {
    let n_cls = cfg.num_classes();
    let a_total = cfg.anchors_per_cell();
    let n_anchor = a_total * h * w;
    debug_assert_eq!(anchors.len(), n_anchor);

    let mut cls_targets = vec![false; n_anchor * n_cls];
    let mut cls_mask = vec![false; n_anchor * n_cls];
    let mut box_targets = vec![0.0; n_anchor * BOX_CODE_SIZE];
    let mut box_mask = vec![false; n_anchor * BOX_CODE_SIZE];
    let mut dir_bins = vec![0u8; n_anchor];
    let mut dir_mask = vec![false; n_anchor];
    let mut num_pos = 0usize;

    let plane = h * w;
    for a in 0..a_total {
        for i in 0..h {
            for j in 0..w {
                let el = anchor_index(a, i, j, h, w);
                let cell = i * w + j;
                match assignments[el] {
                    Assignment::Ignore => {}
                    Assignment::Negative => {
                        for k in 0..n_cls {
                            cls_mask[(a * n_cls + k) * plane + cell] = true;
                        }
                    }
                    Assignment::Positive(gi) => {
                        num_pos += 1;
                        let gt = &gts[gi];
                        for k in 0..n_cls {
                            let idx = (a * n_cls + k) * plane + cell;
                            cls_mask[idx] = true;
                            cls_targets[idx] = k == gt.class_id;
                        }
                        let deltas = encode_box(&gt.box3d, &anchors[el]);
                        for (d, &delta) in deltas.iter().enumerate() {
                            let idx = (a * BOX_CODE_SIZE + d) * plane + cell;
                            box_targets[idx] = delta;
                            box_mask[idx] = true;
                        }
                        dir_bins[el] = yaw_bin(gt.box3d.yaw);
                        dir_mask[el] = true;
                    }
                }
            }
        }
    }

    let pos_norm = (num_pos as f64).max(1.0);
    LossTargets {
        cls_targets,
        cls_mask,
        cls_norm: pos_norm,
        box_targets,
        box_mask,
        box_norm: ((num_pos * BOX_CODE_SIZE) as f64).max(1.0),
        dir_bins,
        dir_mask,
        dir_norm: pos_norm,
        num_pos,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn toy_cfg() -> ModelConfig {
        ModelConfig::toy()
    }

    #[test]
    fn anchor_grid_layout() {
        let cfg = toy_cfg();
        let anchors = generate_anchors(&cfg, 64, 64).unwrap();
        assert_eq!(anchors.len(), cfg.anchors_per_cell() * 64 * 64);
        // First anchor sits at the first cell center with yaw 0.
        let a0 = anchors[anchor_index(0, 0, 0, 64, 64)];
        assert!((a0.x - (cfg.grid.x_range.0 + 0.16)).abs() < 1e-9);
        assert!((a0.y - (cfg.grid.y_range.0 + 0.16)).abs() < 1e-9);
        assert_eq!(a0.yaw, 0.0);
        // Second yaw variant of the same cell.
        let a1 = anchors[anchor_index(1, 0, 0, 64, 64)];
        assert!((a1.yaw - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn identical_anchor_is_positive_with_zero_deltas() {
        let cfg = toy_cfg();
        let anchors = generate_anchors(&cfg, 64, 64).unwrap();
        let gt_box = anchors[anchor_index(0, 30, 20, 64, 64)];
        let gts = vec![GtBox {
            box3d: gt_box,
            class_id: 0,
        }];
        let assignments = assign_targets(&cfg, &anchors, &gts);
        assert_eq!(
            assignments[anchor_index(0, 30, 20, 64, 64)],
            Assignment::Positive(0)
        );
        let lt = build_loss_targets(&cfg, 64, 64, &anchors, &assignments, &gts);
        assert!(lt.num_pos >= 1);
        // The exactly-matching anchor regresses zero deltas.
        let cell = 30 * 64 + 20;
        for d in 0..BOX_CODE_SIZE {
            let idx = d * 64 * 64 + cell;
            assert!(lt.box_mask[idx]);
            assert!(lt.box_targets[idx].abs() < 1e-12);
        }
    }

    #[test]
    fn no_gt_all_negative() {
        let cfg = toy_cfg();
        let anchors = generate_anchors(&cfg, 16, 16).unwrap();
        let assignments = assign_targets(&cfg, &anchors, &[]);
        assert!(assignments.iter().all(|&a| a == Assignment::Negative));
        let lt = build_loss_targets(&cfg, 16, 16, &anchors, &assignments, &[]);
        assert_eq!(lt.num_pos, 0);
        assert!(lt.cls_mask.iter().all(|&m| m));
        assert!(lt.cls_targets.iter().all(|&t| !t));
    }

    #[test]
    fn weak_gt_still_claims_argmax_anchor() {
        let cfg = toy_cfg();
        let anchors = generate_anchors(&cfg, 16, 16).unwrap();
        // A small off-grid-aligned box overlapping every anchor below
        // unmatch_iou still gets its best anchor.
        let gt = GtBox {
            box3d: Box3D {
                x: cfg.grid.x_range.0 + 5.0,
                y: 0.33,
                z: -1.78,
                w: 0.5,
                l: 1.0,
                h: 1.56,
                yaw: 0.4,
            },
            class_id: 0,
        };
        let assignments = assign_targets(&cfg, &anchors, std::slice::from_ref(&gt));

        // Independent brute force over all anchors.
        let mut best = (usize::MAX, 0.0);
        for (ai, anchor) in anchors.iter().enumerate() {
            let iou = rotated_iou_bev(anchor, &gt.box3d);
            if iou > best.1 {
                best = (ai, iou);
            }
        }
        assert!(best.1 > 0.0 && best.1 < cfg.anchors[0].unmatch_iou);
        assert_eq!(assignments[best.0], Assignment::Positive(0));
        let positives = assignments
            .iter()
            .filter(|a| matches!(a, Assignment::Positive(_)))
            .count();
        assert_eq!(positives, 1);
    }
}
