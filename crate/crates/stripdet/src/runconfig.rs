//! Human-readable TOML run configuration. Unknown keys are rejected;
//! missing keys fall back to the reference configuration with a notice.

use crate::config::{AnchorSpec, LossConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::pillars::GridSpec;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct FileRoot {
    seed: Option<u64>,
    paths: Option<FilePaths>,
    model: Option<FileModel>,
    grid: Option<FileGrid>,
    loss: Option<FileLoss>,
    anchors: Option<Vec<FileAnchor>>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct FilePaths {
    points: Option<PathBuf>,
    weights: Option<PathBuf>,
    output: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct FileModel {
    c0: Option<usize>,
    stage_channels: Option<[usize; 3]>,
    stage_depths: Option<[usize; 3]>,
    k: Option<usize>,
    head_channels: Option<usize>,
    conv_bias: Option<bool>,
    score_threshold: Option<f64>,
    nms_iou_threshold: Option<f64>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct FileGrid {
    x_range: Option<[f64; 2]>,
    y_range: Option<[f64; 2]>,
    z_range: Option<[f64; 2]>,
    pillar_dx: Option<f64>,
    pillar_dy: Option<f64>,
    max_points_per_pillar: Option<usize>,
    max_pillars: Option<usize>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct FileLoss {
    w_cls: Option<f64>,
    w_bbox: Option<f64>,
    w_dir: Option<f64>,
    focal_alpha: Option<f64>,
    focal_gamma: Option<f64>,
    smooth_l1_beta: Option<f64>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct FileAnchor {
    class: String,
    width: f64,
    length: f64,
    height: f64,
    z_center: f64,
    match_iou: f64,
    unmatch_iou: f64,
}

/// A parsed and validated run configuration.
#[derive(Debug)]
pub struct RunConfig {
    pub config: ModelConfig,
    pub seed: u64,
    pub points: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// One line per defaulted key, for the CLI to surface.
    pub notices: Vec<String>,
}

macro_rules! pick {
    ($notices:expr, $field:expr, $default:expr, $name:literal) => {
        match $field {
            Some(v) => v,
            None => {
                $notices.push(format!(concat!("using default ", $name, " = {:?}"), $default));
                $default
            }
        }
    };
}

/// Parse a TOML document against the given base configuration (usually
/// [`ModelConfig::reference`]).
pub fn parse_run_config(text: &str, base: &ModelConfig) -> Result<RunConfig> {
    let root: FileRoot =
        toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
    let mut notices = Vec::new();

    let seed = pick!(notices, root.seed, 0u64, "seed");

    let m = root.model.unwrap_or_default();
    let g = root.grid.unwrap_or_default();
    let l = root.loss.unwrap_or_default();

    let grid = GridSpec {
        x_range: pick!(notices, g.x_range.map(|r| (r[0], r[1])), base.grid.x_range, "grid.x_range"),
        y_range: pick!(notices, g.y_range.map(|r| (r[0], r[1])), base.grid.y_range, "grid.y_range"),
        z_range: pick!(notices, g.z_range.map(|r| (r[0], r[1])), base.grid.z_range, "grid.z_range"),
        pillar_dx: pick!(notices, g.pillar_dx, base.grid.pillar_dx, "grid.pillar_dx"),
        pillar_dy: pick!(notices, g.pillar_dy, base.grid.pillar_dy, "grid.pillar_dy"),
        max_points_per_pillar: pick!(
            notices,
            g.max_points_per_pillar,
            base.grid.max_points_per_pillar,
            "grid.max_points_per_pillar"
        ),
        max_pillars: pick!(notices, g.max_pillars, base.grid.max_pillars, "grid.max_pillars"),
    };

    let anchors = match root.anchors {
        Some(list) if !list.is_empty() => list
            .into_iter()
            .map(|a| AnchorSpec {
                class: a.class,
                width: a.width,
                length: a.length,
                height: a.height,
                z_center: a.z_center,
                match_iou: a.match_iou,
                unmatch_iou: a.unmatch_iou,
            })
            .collect(),
        Some(_) | None => {
            notices.push(format!(
                "using default anchors ({} classes)",
                base.anchors.len()
            ));
            base.anchors.clone()
        }
    };

    let config = ModelConfig {
        c0: pick!(notices, m.c0, base.c0, "model.c0"),
        stage_channels: pick!(notices, m.stage_channels, base.stage_channels, "model.stage_channels"),
        stage_depths: pick!(notices, m.stage_depths, base.stage_depths, "model.stage_depths"),
        k: pick!(notices, m.k, base.k, "model.k"),
        head_channels: pick!(notices, m.head_channels, base.head_channels, "model.head_channels"),
        conv_bias: pick!(notices, m.conv_bias, base.conv_bias, "model.conv_bias"),
        grid,
        anchors,
        loss: LossConfig {
            weights: LossWeights {
                w_cls: pick!(notices, l.w_cls, base.loss.weights.w_cls, "loss.w_cls"),
                w_bbox: pick!(notices, l.w_bbox, base.loss.weights.w_bbox, "loss.w_bbox"),
                w_dir: pick!(notices, l.w_dir, base.loss.weights.w_dir, "loss.w_dir"),
            },
            focal_alpha: pick!(notices, l.focal_alpha, base.loss.focal_alpha, "loss.focal_alpha"),
            focal_gamma: pick!(notices, l.focal_gamma, base.loss.focal_gamma, "loss.focal_gamma"),
            smooth_l1_beta: pick!(
                notices,
                l.smooth_l1_beta,
                base.loss.smooth_l1_beta,
                "loss.smooth_l1_beta"
            ),
        },
        score_threshold: pick!(notices, m.score_threshold, base.score_threshold, "model.score_threshold"),
        nms_iou_threshold: pick!(
            notices,
            m.nms_iou_threshold,
            base.nms_iou_threshold,
            "model.nms_iou_threshold"
        ),
    };
    config.validate()?;

    let paths = root.paths.unwrap_or_default();
    Ok(RunConfig {
        config,
        seed,
        points: paths.points,
        weights: paths.weights,
        output: paths.output,
        notices,
    })
}

pub fn load_run_config(path: &Path, base: &ModelConfig) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_run_config(&text, base)
}

/// Render a configuration as a complete TOML document.
pub fn to_toml(cfg: &ModelConfig, seed: u64) -> String {
    let root = FileRoot {
        seed: Some(seed),
        paths: None,
        model: Some(FileModel {
            c0: Some(cfg.c0),
            stage_channels: Some(cfg.stage_channels),
            stage_depths: Some(cfg.stage_depths),
            k: Some(cfg.k),
            head_channels: Some(cfg.head_channels),
            conv_bias: Some(cfg.conv_bias),
            score_threshold: Some(cfg.score_threshold),
            nms_iou_threshold: Some(cfg.nms_iou_threshold),
        }),
        grid: Some(FileGrid {
            x_range: Some([cfg.grid.x_range.0, cfg.grid.x_range.1]),
            y_range: Some([cfg.grid.y_range.0, cfg.grid.y_range.1]),
            z_range: Some([cfg.grid.z_range.0, cfg.grid.z_range.1]),
            pillar_dx: Some(cfg.grid.pillar_dx),
            pillar_dy: Some(cfg.grid.pillar_dy),
            max_points_per_pillar: Some(cfg.grid.max_points_per_pillar),
            max_pillars: Some(cfg.grid.max_pillars),
        }),
        loss: Some(FileLoss {
            w_cls: Some(cfg.loss.weights.w_cls),
            w_bbox: Some(cfg.loss.weights.w_bbox),
            w_dir: Some(cfg.loss.weights.w_dir),
            focal_alpha: Some(cfg.loss.focal_alpha),
            focal_gamma: Some(cfg.loss.focal_gamma),
            smooth_l1_beta: Some(cfg.loss.smooth_l1_beta),
        }),
        anchors: Some(
            cfg.anchors
                .iter()
                .map(|a| FileAnchor {
                    class: a.class.clone(),
                    width: a.width,
                    length: a.length,
                    height: a.height,
                    z_center: a.z_center,
                    match_iou: a.match_iou,
                    unmatch_iou: a.unmatch_iou,
                })
                .collect(),
        ),
    };
    toml::to_string_pretty(&root).expect("config serializes")
}
