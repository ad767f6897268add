//! Architecture hyperparameters: stage widths/depths, strip length, grid,
//! anchors, loss weights and detection thresholds.

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::pillars::GridSpec;

/// Every anchor class contributes two yaw variants per cell.
pub const ANCHOR_YAWS: [f64; 2] = [0.0, std::f64::consts::FRAC_PI_2];

/// Box regression targets per anchor: dx, dy, dz, dw, dl, dh, dyaw.
pub const BOX_CODE_SIZE: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSpec {
    pub class: String,
    /// Box width (across heading), meters.
    pub width: f64,
    /// Box length (along heading), meters.
    pub length: f64,
    pub height: f64,
    pub z_center: f64,
    pub match_iou: f64,
    pub unmatch_iou: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// BEV feature channels produced by the pillar encoder.
    pub c0: usize,
    pub stage_channels: [usize; 3],
    /// Strip attention blocks per stage.
    pub stage_depths: [usize; 3],
    /// Strip kernel length; must be odd.
    pub k: usize,
    /// Mid channels of each detection-head branch.
    pub head_channels: usize,
    /// Whether convolutions carry biases.
    pub conv_bias: bool,
    pub grid: GridSpec,
    pub anchors: Vec<AnchorSpec>,
    pub loss: LossConfig,
    pub score_threshold: f64,
    pub nms_iou_threshold: f64,
}

impl ModelConfig {
    pub fn num_classes(&self) -> usize {
        self.anchors.len()
    }

    /// Anchors per BEV-head cell: one per (class, yaw) pair.
    pub fn anchors_per_cell(&self) -> usize {
        self.anchors.len() * ANCHOR_YAWS.len()
    }

    /// Channel count after multi-scale fusion.
    pub fn fused_channels(&self) -> usize {
        self.stage_channels.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.c0 == 0 || self.head_channels == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if self.stage_channels.contains(&0) || self.stage_depths.contains(&0)
        {
            return Err(Error::Config("stage channels and depths must be >= 1".into()));
        }
        if self.k.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "strip kernel length must be odd, got {}",
                self.k
            )));
        }
        let (h, w) = (self.grid.height()?, self.grid.width()?);
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!(
                "grid {h}x{w} must be divisible by 8 for the three-stage backbone"
            )));
        }
        if self.anchors.is_empty() {
            return Err(Error::Config("at least one anchor class is required".into()));
        }
        for a in &self.anchors {
            if a.width <= 0.0 || a.length <= 0.0 || a.height <= 0.0 {
                return Err(Error::Config(format!("anchor {} has non-positive size", a.class)));
            }
            if !(0.0 <= a.unmatch_iou && a.unmatch_iou < a.match_iou && a.match_iou <= 1.0) {
                return Err(Error::Config(format!(
                    "anchor {}: need 0 <= unmatch_iou < match_iou <= 1",
                    a.class
                )));
            }
        }
        let w = &self.loss.weights;
        if w.w_cls <= 0.0 || w.w_bbox <= 0.0 || w.w_dir <= 0.0 {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        if !(0.0 < self.loss.focal_alpha && self.loss.focal_alpha < 1.0)
            || self.loss.focal_gamma < 0.0
            || self.loss.smooth_l1_beta <= 0.0
        {
            return Err(Error::Config("invalid focal/smooth-l1 parameters".into()));
        }
        Ok(())
    }

    /// Shipped reference configuration. Stage widths, depths and the head
    /// width were chosen so the analyzer lands near a 0.65M-parameter /
    /// 9.5G-MAC budget on the default 496x432 grid.
    pub fn reference() -> Self {
        ModelConfig {
            c0: 64,
            stage_channels: [32, 64, 96],
            stage_depths: [2, 3, 3],
            k: 7,
            head_channels: 16,
            conv_bias: true,
            grid: GridSpec {
                x_range: (0.0, 69.12),
                y_range: (-39.68, 39.68),
                z_range: (-3.0, 1.0),
                pillar_dx: 0.16,
                pillar_dy: 0.16,
                max_points_per_pillar: 32,
                max_pillars: 12000,
            },
            anchors: vec![
                AnchorSpec {
                    class: "car".into(),
                    width: 1.6,
                    length: 3.9,
                    height: 1.56,
                    z_center: -1.78,
                    match_iou: 0.6,
                    unmatch_iou: 0.45,
                },
                AnchorSpec {
                    class: "pedestrian".into(),
                    width: 0.6,
                    length: 0.8,
                    height: 1.73,
                    z_center: -0.6,
                    match_iou: 0.5,
                    unmatch_iou: 0.35,
                },
                AnchorSpec {
                    class: "cyclist".into(),
                    width: 0.6,
                    length: 1.76,
                    height: 1.73,
                    z_center: -0.6,
                    match_iou: 0.5,
                    unmatch_iou: 0.35,
                },
            ],
            loss: LossConfig::default(),
            score_threshold: 0.3,
            nms_iou_threshold: 0.5,
        }
    }

    /// Small single-class configuration on a 128x128 grid, for synthetic
    /// overfit runs and fast end-to-end tests.
    pub fn toy() -> Self {
        ModelConfig {
            c0: 32,
            stage_channels: [16, 24, 32],
            stage_depths: [1, 1, 1],
            k: 7,
            head_channels: 8,
            conv_bias: true,
            grid: GridSpec {
                x_range: (0.0, 20.48),
                y_range: (-10.24, 10.24),
                z_range: (-3.0, 1.0),
                pillar_dx: 0.16,
                pillar_dy: 0.16,
                max_points_per_pillar: 32,
                max_pillars: 4000,
            },
            anchors: vec![AnchorSpec {
                class: "car".into(),
                width: 1.6,
                length: 3.9,
                height: 1.56,
                z_center: -1.78,
                match_iou: 0.6,
                unmatch_iou: 0.45,
            }],
            loss: LossConfig::default(),
            score_threshold: 0.3,
            nms_iou_threshold: 0.5,
        }
    }
}
