//! Static per-layer parameter and multiply-accumulate accounting over a
//! model configuration, plus the strip-vs-full-kernel scaling study.
//!
//! Convolution MACs are `out_elements * (in_ch/groups) * kh * kw`; biases
//! and elementwise ops (activations, residual adds, gating, normalization,
//! upsample replication) are tallied at one FLOP per output element in a
//! separate minor-ops bucket excluded from the headline figure.

use crate::config::{ModelConfig, BOX_CODE_SIZE};
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::pillars::POINT_FEATURES;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerStats {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug)]
pub struct CostReport {
    pub layers: Vec<LayerStats>,
    /// Elementwise work outside the headline MAC count.
    pub minor_flops: u64,
    pub bev_h: usize,
    pub bev_w: usize,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    /// FLOPs under the 2-FLOPs-per-MAC convention.
    pub fn total_flops(&self) -> u64 {
         2 * self.total_macs()
    }
}

fn linear_params(in_f: usize, out_f: usize) -> u64 {
    (in_f * out_f + out_f) as u64
}

/// Walk every layer of the architecture at the given BEV resolution.
pub fn analyze(cfg: &ModelConfig, bev_h: usize, bev_w: usize) -> Result<CostReport> {
    cfg.validate()?;
    if !bev_h.is_multiple_of(8) || !bev_w.is_multiple_of(8) {
        return Err(Error::InvalidSpec(format!(
            "analyzer resolution {bev_h}x{bev_w} must be divisible by 8"
        )));
    }
    let bias = cfg.conv_bias;
    let mut layers = Vec::new();
    let mut minor: u64 = 0;

    // Pillar encoder: per-point linear at nominal full pillar occupancy.
    let nominal_points = (cfg.grid.max_pillars * cfg.grid.max_points_per_pillar) as u64;
    layers.push(LayerStats {
        name: "pfn".into(),
        params: linear_params(POINT_FEATURES, cfg.c0),
        macs: nominal_points * (POINT_FEATURES * cfg.c0) as u64,
    });
    minor += nominal_points * cfg.c0 as u64; // ReLU + max pooling

    let conv_layer = |layers: &mut Vec<LayerStats>, name: String, spec: ConvSpec, oh: usize, ow: usize| {
        layers.push(LayerStats {
            name,
            params: spec.param_count(bias) as u64,
            macs: spec.mac_count(oh, ow),
        });
    };

    let (mut h, mut w) = (bev_h, bev_w);
    let mut in_ch = cfg.c0;
    for s in 0..3 {
        let out_ch = cfg.stage_channels[s];
        let prefix = format!("backbone.stage{s}");
        h /= 2;
        w /= 2;
        conv_layer(
            &mut layers,
            format!("{prefix}.down.dw"),
            ConvSpec::depthwise(in_ch, 3, 2, 1),
            h,
            w,
        );
        conv_layer(
            &mut layers,
            format!("{prefix}.down.pw"),
            ConvSpec::pointwise(in_ch, out_ch),
            h,
            w,
        );
        let px = (h * w) as u64;
        for i in 0..cfg.stage_depths[s] {
            let sp = format!("{prefix}.sab{i}");
            let c = out_ch;
            layers.push(LayerStats {
                name: format!("{sp}.pre_linear"),
                params: linear_params(c, c),
                macs: px * (c * c) as u64,
            });
            conv_layer(&mut layers, format!("{sp}.sam.dw3x3"), ConvSpec::depthwise(c, 3, 1, 1), h, w);
            conv_layer(&mut layers, format!("{sp}.sam.dw1xk"), ConvSpec::strip_horizontal(c, cfg.k), h, w);
            conv_layer(&mut layers, format!("{sp}.sam.dwkx1"), ConvSpec::strip_vertical(c, cfg.k), h, w);
            conv_layer(&mut layers, format!("{sp}.sam.pw"), ConvSpec::pointwise(c, c), h, w);
            layers.push(LayerStats {
                name: format!("{sp}.sam.proj"),
                params: linear_params(c, c),
                macs: px * (c * c) as u64,
            });
            layers.push(LayerStats {
                name: format!("{sp}.ln"),
                params: 2 * c as u64,
                macs: 0,
            });
            conv_layer(&mut layers, format!("{sp}.conv3x3"), ConvSpec::standard(c, c, 3, 1, 1), h, w);
            // GeLU x2, gate, two residual adds, normalization.
            minor += 6 * px * c as u64;
        }
        in_ch = out_ch;
    }

    // Fusion at the stride-2 resolution: nearest upsample replication.
    let (hf, wf) = (bev_h / 2, bev_w / 2);
    let fused_px = (hf * wf) as u64;
    minor += fused_px * (cfg.stage_channels[1] + cfg.stage_channels[2]) as u64;

    let fused = cfg.fused_channels();
    let a = cfg.anchors_per_cell();
    for (branch, out_ch) in [
        ("cls", a * cfg.num_classes()),
        ("bbox", a * BOX_CODE_SIZE),
        ("dir", a * 2),
    ] {
        conv_layer(
            &mut layers,
            format!("head.{branch}.conv3x3"),
            ConvSpec::standard(fused, cfg.head_channels, 3, 1, 1),
            hf,
            wf,
        );
        conv_layer(
            &mut layers,
            format!("head.{branch}.out1x1"),
            ConvSpec::pointwise(cfg.head_channels, out_ch),
            hf,
            wf,
        );
    }

    Ok(CostReport {
        layers,
        minor_flops: minor,
        bev_h,
        bev_w,
    })
}

/// Per-layer parameter counts (resolution-independent).
pub fn count_params(cfg: &ModelConfig) -> Result<Vec<LayerStats>> {
    let h = cfg.grid.height()?;
    let w = cfg.grid.width()?;
    Ok(analyze(cfg, h, w)?.layers)
}

/// Per-layer MAC counts at an explicit BEV resolution.
pub fn count_macs(cfg: &ModelConfig, bev_h: usize, bev_w: usize) -> Result<CostReport> {
    analyze(cfg, bev_h, bev_w)
}

/// Cost of the sequential strip pair vs a hypothetical full KxK depthwise
/// replacement, swept over kernel sizes, with fitted growth exponents.
#[derive(Clone, Debug)]
pub struct ScalingReport {
    pub channels: usize,
    pub px: u64,
    pub k_values: Vec<usize>,
    pub strip_params: Vec<u64>,
    pub full_params: Vec<u64>,
    pub strip_macs: Vec<u64>,
    pub full_macs: Vec<u64>,
    pub strip_param_exponent: f64,
    pub full_param_exponent: f64,
    pub strip_mac_exponent: f64,
    pub full_mac_exponent: f64,
}

/// Least-squares slope of ln(cost) against ln(k).
fn fit_exponent(ks: &[usize], costs: &[u64]) -> f64 {
    let n = ks.len() as f64;
    let xs: Vec<f64> = ks.iter().map(|&k| (k as f64).ln()).collect();
    let ys: Vec<f64> = costs.iter().map(|&c| (c as f64).ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

pub fn scaling_study(cfg: &ModelConfig, k_values: &[usize]) -> Result<ScalingReport> {
    if k_values.len() < 3 {
        return Err(Error::InvalidSpec(format!(
            "scaling study needs at least 3 kernel sizes, got {}",
            k_values.len()
        )));
    }
    for &k in k_values {
        if k % 2 == 0 {
            return Err(Error::InvalidSpec(format!("kernel sizes must be odd, got {k}")));
        }
    }
    let c = cfg.c0;
    let bias = cfg.conv_bias;
    let px = ((cfg.grid.height()? / 2) * (cfg.grid.width()? / 2)) as u64;

    let mut strip_params = Vec::new();
    let mut full_params = Vec::new();
    let mut strip_macs = Vec::new();
    let mut full_macs = Vec::new();
    for &k in k_values {
        let sh = ConvSpec::strip_horizontal(c, k);
        let sv = ConvSpec::strip_vertical(c, k);
        let full = ConvSpec::depthwise(c, k, 1, (k - 1) / 2);
        strip_params.push((sh.param_count(bias) + sv.param_count(bias)) as u64);
        full_params.push(full.param_count(bias) as u64);
        strip_macs.push(px * (2 * k) as u64 * c as u64);
        full_macs.push(px * (k * k) as u64 * c as u64);
    }

    Ok(ScalingReport {
        channels: c,
        px,
        strip_param_exponent: fit_exponent(k_values, &strip_params),
        full_param_exponent: fit_exponent(k_values, &full_params),
        strip_mac_exponent: fit_exponent(k_values, &strip_macs),
        full_mac_exponent: fit_exponent(k_values, &full_macs),
        k_values: k_values.to_vec(),
        strip_params,
        full_params,
        strip_macs,
        full_macs,
    })
}
