//! Three-stage hierarchical backbone: each stage downsamples with a
//! depthwise-separable stride-2 convolution and stacks strip attention
//! blocks; stage outputs are fused by nearest upsampling and channel
//! concatenation at the stride-2 resolution.

use crate::attention::{
    random_conv, sab_forward, visit_conv, visit_conv_mut, LiftedSab, SabParams,
};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::ops::{ConvParams, ConvSpec};
use crate::real::Real;
use crate::tape::{LiftedConv, Tape, ValueId};
use crate::tensor::Tensor4;
use rand::Rng;

/// Depthwise 3x3 stride-2 followed by a pointwise channel change.
#[derive(Clone, Debug)]
pub struct DownsampleParams<T> {
    pub dw: ConvParams<T>,
    pub pw: ConvParams<T>,
}

impl<T: Real> DownsampleParams<T> {
    pub fn random(in_ch: usize, out_ch: usize, bias: bool, rng: &mut impl Rng) -> Self {
        DownsampleParams {
            dw: random_conv(ConvSpec::depthwise(in_ch, 3, 2, 1), bias, rng),
            pw: random_conv(ConvSpec::pointwise(in_ch, out_ch), bias, rng),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor4<T>)) {
        visit_conv(&self.dw, &format!("{prefix}.dw"), f);
        visit_conv(&self.pw, &format!("{prefix}.pw"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor4<T>)) {
        visit_conv_mut(&mut self.dw, &format!("{prefix}.dw"), f);
        visit_conv_mut(&mut self.pw, &format!("{prefix}.pw"), f);
    }

    pub fn lift(&self, tape: &mut Tape<T>, trainable: bool) -> LiftedDownsample {
        LiftedDownsample {
            dw: tape.lift_conv(&self.dw, trainable),
            pw: tape.lift_conv(&self.pw, trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LiftedDownsample {
    pub dw: LiftedConv,
    pub pw: LiftedConv,
}

/// Halve the spatial dims and change channel width.
pub fn downsample_forward<T: Real>(
    tape: &mut Tape<T>,
    x: ValueId,
    p: &LiftedDownsample,
) -> Result<ValueId> {
    let mid = tape.conv(x, &p.dw)?;
    tape.conv(mid, &p.pw)
}

/// Tape-free convenience wrapper around [`downsample_forward`].
pub fn downsample_eval<T: Real>(x: &Tensor4<T>, p: &DownsampleParams<T>) -> Result<Tensor4<T>> {
    let mut tape = Tape::new();
    let xid = tape.constant(x.clone());
    let lifted = p.lift(&mut tape, false);
    let out = downsample_forward(&mut tape, xid, &lifted)?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Debug)]
pub struct StageParams<T> {
    pub down: DownsampleParams<T>,
    pub sabs: Vec<SabParams<T>>,
}

#[derive(Clone, Debug)]
pub struct BackboneParams<T> {
    pub stages: Vec<StageParams<T>>,
}

impl<T: Real> BackboneParams<T> {
    pub fn random(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut stages = Vec::with_capacity(3);
        let mut in_ch = cfg.c0;
        for s in 0..3 {
            let out_ch = cfg.stage_channels[s];
            let down = DownsampleParams::random(in_ch, out_ch, cfg.conv_bias, rng);
            let sabs = (0..cfg.stage_depths[s])
                .map(|_| SabParams::random(out_ch, cfg.k, cfg.conv_bias, rng))
                .collect();
            stages.push(StageParams { down, sabs });
            in_ch = out_ch;
        }
        BackboneParams { stages }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor4<T>)) {
        for (s, stage) in self.stages.iter().enumerate() {
            stage.down.visit(&format!("{prefix}.stage{s}.down"), f);
            for (i, sab) in stage.sabs.iter().enumerate() {
                sab.visit(&format!("{prefix}.stage{s}.sab{i}"), f);
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor4<T>)) {
        for (s, stage) in self.stages.iter_mut().enumerate() {
            stage.down.visit_mut(&format!("{prefix}.stage{s}.down"), f);
            for (i, sab) in stage.sabs.iter_mut().enumerate() {
                sab.visit_mut(&format!("{prefix}.stage{s}.sab{i}"), f);
            }
        }
    }

    pub fn lift(&self, tape: &mut Tape<T>, trainable: bool) -> LiftedBackbone {
        LiftedBackbone {
            stages: self
                .stages
                .iter()
                .map(|st| LiftedStage {
                    down: st.down.lift(tape, trainable),
                    sabs: st.sabs.iter().map(|s| s.lift(tape, trainable)).collect(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LiftedStage {
    pub down: LiftedDownsample,
    pub sabs: Vec<LiftedSab>,
}

#[derive(Clone, Debug)]
pub struct LiftedBackbone {
    pub stages: Vec<LiftedStage>,
}

/// Run the three stages at strides 2/4/8 and fuse them at stride 2.
/// The BEV map's spatial dims must be divisible by 8.
pub fn backbone_forward<T: Real>(
    tape: &mut Tape<T>,
    bev: ValueId,
    p: &LiftedBackbone,
) -> Result<ValueId> {
    let d = tape.value(bev).dims();
    if !d.h.is_multiple_of(8) || !d.w.is_multiple_of(8) {
        return Err(Error::InvalidSpec(format!(
            "backbone input {}x{} must be divisible by 8",
            d.h, d.w
        )));
    }
    let mut stage_outs = Vec::with_capacity(3);
    let mut x = bev;
    for stage in &p.stages {
        x = downsample_forward(tape, x, &stage.down)?;
        for sab in &stage.sabs {
            x = sab_forward(tape, x, sab)?;
        }
        stage_outs.push(x);
    }
    let up1 = stage_outs[0];
    let up2 = tape.upsample_nearest(stage_outs[1], 2)?;
    let up4 = tape.upsample_nearest(stage_outs[2], 4)?;
    tape.concat_channels(&[up1, up2, up4])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{stream_rng, STREAM_WEIGHTS};
    use crate::tensor::Dims4;

    #[test]
    fn downsample_shapes_and_composition() {
        let mut rng = stream_rng(0, STREAM_WEIGHTS);
        let p = DownsampleParams::<f64>::random(1, 3, true, &mut rng);
        let x = Tensor4::filled(Dims4::new(1, 1, 4, 4), 1.0);
        let out = downsample_eval(&x, &p).unwrap();
        assert_eq!(out.dims(), Dims4::new(1, 3, 2, 2));

        // Equals the two-conv composition exactly, by construction.
        let mid = crate::ops::conv2d(&x, &p.dw.spec, &p.dw.weight, p.dw.bias.as_ref()).unwrap();
        let direct = crate::ops::conv2d(&mid, &p.pw.spec, &p.pw.weight, p.pw.bias.as_ref()).unwrap();
        assert_eq!(out, direct);
    }

    #[test]
    fn downsample_param_count_closed_form() {
        let mut rng = stream_rng(1, STREAM_WEIGHTS);
        let (in_ch, out_ch) = (6, 10);
        let p = DownsampleParams::<f64>::random(in_ch, out_ch, true, &mut rng);
        let mut scalars = 0usize;
        p.visit("d", &mut |_, t| scalars += t.len());
        assert_eq!(scalars, in_ch * 9 + in_ch + in_ch * out_ch + out_ch);
    }

    #[test]
    fn backbone_fused_shape() {
        let mut cfg = ModelConfig::toy();
        cfg.c0 = 8;
        cfg.stage_channels = [4, 6, 8];
        cfg.stage_depths = [1, 1, 1];
        cfg.k = 3;
        let mut rng = stream_rng(2, STREAM_WEIGHTS);
        let params = BackboneParams::<f64>::random(&cfg, &mut rng);

        let mut tape = Tape::new();
        let bev = tape.constant(Tensor4::filled(Dims4::new(1, 8, 16, 24), 0.1));
        let lifted = params.lift(&mut tape, false);
        let out = backbone_forward(&mut tape, bev, &lifted).unwrap();
        assert_eq!(tape.value(out).dims(), Dims4::new(1, 18, 8, 12));
    }

    #[test]
    fn backbone_zero_input_stays_finite() {
        let mut cfg = ModelConfig::toy();
        cfg.c0 = 4;
        cfg.stage_channels = [3, 4, 5];
        cfg.stage_depths = [1, 2, 1];
        cfg.k = 3;
        let mut rng = stream_rng(3, STREAM_WEIGHTS);
        let params = BackboneParams::<f64>::random(&cfg, &mut rng);
        let mut tape = Tape::new();
        let bev = tape.constant(Tensor4::zeros(Dims4::new(1, 4, 8, 8)));
        let lifted = params.lift(&mut tape, false);
        let out = backbone_forward(&mut tape, bev, &lifted).unwrap();
        assert!(tape.value(out).all_finite());
    }

    #[test]
    fn backbone_rejects_non_divisible_input() {
        let mut cfg = ModelConfig::toy();
        cfg.c0 = 4;
        cfg.stage_channels = [3, 4, 5];
        cfg.stage_depths = [1, 1, 1];
        cfg.k = 3;
        let mut rng = stream_rng(4, STREAM_WEIGHTS);
        let params = BackboneParams::<f64>::random(&cfg, &mut rng);
        let mut tape = Tape::new();
        let bev = tape.constant(Tensor4::zeros(Dims4::new(1, 4, 12, 8)));
        let lifted = params.lift(&mut tape, false);
        assert!(backbone_forward(&mut tape, bev, &lifted).is_err());
    }
}
