//! Strip attention: a spatial attention map built from a 3x3 depthwise
//! refinement followed by sequential 1xK and Kx1 depthwise strips and a
//! pointwise mix, gating a GeLU-activated linear projection of the input.
//! The block form wraps the module in two residual sub-blocks.

use crate::error::Result;
use crate::ops::{ConvParams, ConvSpec, LayerNormParams, LinearParams};
use crate::real::Real;
use crate::tape::{LiftedConv, LiftedLayerNorm, LiftedLinear, Tape, ValueId};
use crate::tensor::{Dims4, Tensor4};
use rand::Rng;

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Strip attention module weights at channel width C with strip length K.
#[derive(Clone, Debug)]
pub struct SamParams<T> {
    pub dw3x3: ConvParams<T>,
    pub dw_1xk: ConvParams<T>,
    pub dw_kx1: ConvParams<T>,
    pub pw: ConvParams<T>,
    pub proj: LinearParams<T>,
}

/// Strip attention block weights: pre-projection, the attention module,
/// and the LayerNorm + 3x3 conv sub-block.
#[derive(Clone, Debug)]
pub struct SabParams<T> {
    pub pre_linear: LinearParams<T>,
    pub sam: SamParams<T>,
    pub ln: LayerNormParams<T>,
    pub conv3x3: ConvParams<T>,
}

/// Kaiming-uniform init for a weight tensor with the given fan-in.
pub fn kaiming_uniform<T: Real>(dims: Dims4, fan_in: usize, rng: &mut impl Rng) -> Tensor4<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..dims.count())
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor4::from_vec(dims, data).expect("dims match generated length")
}

pub fn random_conv<T: Real>(spec: ConvSpec, bias: bool, rng: &mut impl Rng) -> ConvParams<T> {
    let fan_in = (spec.in_channels / spec.groups) * spec.kernel_h * spec.kernel_w;
    let weight = kaiming_uniform(spec.weight_dims(), fan_in, rng);
    let b = bias.then(|| Tensor4::zeros(Dims4::new(spec.out_channels, 1, 1, 1)));
    ConvParams::new(spec, weight, b).expect("generated shapes match spec")
}

pub fn random_linear<T: Real>(in_f: usize, out_f: usize, rng: &mut impl Rng) -> LinearParams<T> {
    let weight = kaiming_uniform(Dims4::new(out_f, in_f, 1, 1), in_f, rng);
    let bias = Tensor4::zeros(Dims4::new(out_f, 1, 1, 1));
    LinearParams::new(weight, bias).expect("generated shapes are valid")
}

impl<T: Real> SamParams<T> {
    pub fn random(channels: usize, k: usize, bias: bool, rng: &mut impl Rng) -> Self {
        SamParams {
            dw3x3: random_conv(ConvSpec::depthwise(channels, 3, 1, 1), bias, rng),
            dw_1xk: random_conv(ConvSpec::strip_horizontal(channels, k), bias, rng),
            dw_kx1: random_conv(ConvSpec::strip_vertical(channels, k), bias, rng),
            pw: random_conv(ConvSpec::pointwise(channels, channels), bias, rng),
            proj: random_linear(channels, channels, rng),
        }
    }

    /// All weights and biases zero; the attention map and the gated
    /// projection then vanish identically.
    pub fn zeros(channels: usize, k: usize, bias: bool) -> Self {
        let zc = |spec: ConvSpec| {
            let b = bias.then(|| Tensor4::zeros(Dims4::new(spec.out_channels, 1, 1, 1)));
            ConvParams::new(spec, Tensor4::zeros(spec.weight_dims()), b).unwrap()
        };
        SamParams {
            dw3x3: zc(ConvSpec::depthwise(channels, 3, 1, 1)),
            dw_1xk: zc(ConvSpec::strip_horizontal(channels, k)),
            dw_kx1: zc(ConvSpec::strip_vertical(channels, k)),
            pw: zc(ConvSpec::pointwise(channels, channels)),
            proj: LinearParams::new(
                Tensor4::zeros(Dims4::new(channels, channels, 1, 1)),
                Tensor4::zeros(Dims4::new(channels, 1, 1, 1)),
            )
            .unwrap(),
        }
    }

    pub fn channels(&self) -> usize {
        self.pw.spec.in_channels
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor4<T>)) {
        visit_conv(&self.dw3x3, &format!("{prefix}.dw3x3"), f);
        visit_conv(&self.dw_1xk, &format!("{prefix}.dw1xk"), f);
        visit_conv(&self.dw_kx1, &format!("{prefix}.dwkx1"), f);
        visit_conv(&self.pw, &format!("{prefix}.pw"), f);
        visit_linear(&self.proj, &format!("{prefix}.proj"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor4<T>)) {
        visit_conv_mut(&mut self.dw3x3, &format!("{prefix}.dw3x3"), f);
        visit_conv_mut(&mut self.dw_1xk, &format!("{prefix}.dw1xk"), f);
        visit_conv_mut(&mut self.dw_kx1, &format!("{prefix}.dwkx1"), f);
        visit_conv_mut(&mut self.pw, &format!("{prefix}.pw"), f);
        visit_linear_mut(&mut self.proj, &format!("{prefix}.proj"), f);
    }
}

impl<T: Real> SabParams<T> {
    pub fn random(channels: usize, k: usize, bias: bool, rng: &mut impl Rng) -> Self {
        SabParams {
            pre_linear: random_linear(channels, channels, rng),
            sam: SamParams::random(channels, k, bias, rng),
            ln: LayerNormParams::identity(channels, LAYERNORM_EPS),
            conv3x3: random_conv(ConvSpec::standard(channels, channels, 3, 1, 1), bias, rng),
        }
    }

    /// Zero weights with an identity norm: the whole block reduces to the
    /// identity map.
    pub fn zeros(channels: usize, k: usize, bias: bool) -> Self {
        SabParams {
            pre_linear: LinearParams::new(
                Tensor4::zeros(Dims4::new(channels, channels, 1, 1)),
                Tensor4::zeros(Dims4::new(channels, 1, 1, 1)),
            )
            .unwrap(),
            sam: SamParams::zeros(channels, k, bias),
            ln: LayerNormParams::identity(channels, LAYERNORM_EPS),
            conv3x3: {
                let spec = ConvSpec::standard(channels, channels, 3, 1, 1);
                let b = bias.then(|| Tensor4::zeros(Dims4::new(channels, 1, 1, 1)));
                ConvParams::new(spec, Tensor4::zeros(spec.weight_dims()), b).unwrap()
            },
        }
    }

    pub fn channels(&self) -> usize {
        self.sam.channels()
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor4<T>)) {
        visit_linear(&self.pre_linear, &format!("{prefix}.pre_linear"), f);
        self.sam.visit(&format!("{prefix}.sam"), f);
        f(format!("{prefix}.ln.gamma"), &self.ln.gamma);
        f(format!("{prefix}.ln.beta"), &self.ln.beta);
        visit_conv(&self.conv3x3, &format!("{prefix}.conv3x3"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor4<T>)) {
        visit_linear_mut(&mut self.pre_linear, &format!("{prefix}.pre_linear"), f);
        self.sam.visit_mut(&format!("{prefix}.sam"), f);
        f(format!("{prefix}.ln.gamma"), &mut self.ln.gamma);
        f(format!("{prefix}.ln.beta"), &mut self.ln.beta);
        visit_conv_mut(&mut self.conv3x3, &format!("{prefix}.conv3x3"), f);
    }
}

pub(crate) fn visit_conv<'a, T: Real>(
    p: &'a ConvParams<T>,
    prefix: &str,
    f: &mut dyn FnMut(String, &'a Tensor4<T>),
) {
    f(format!("{prefix}.weight"), &p.weight);
    if let Some(b) = &p.bias {
        f(format!("{prefix}.bias"), b);
    }
}

pub(crate) fn visit_conv_mut<T: Real>(
    p: &mut ConvParams<T>,
    prefix: &str,
    f: &mut dyn FnMut(String, &mut Tensor4<T>),
) {
    f(format!("{prefix}.weight"), &mut p.weight);
    if let Some(b) = &mut p.bias {
        f(format!("{prefix}.bias"), b);
    }
}

pub(crate) fn visit_linear<'a, T: Real>(
    p: &'a LinearParams<T>,
    prefix: &str,
    f: &mut dyn FnMut(String, &'a Tensor4<T>),
) {
    f(format!("{prefix}.weight"), &p.weight);
    f(format!("{prefix}.bias"), &p.bias);
}

pub(crate) fn visit_linear_mut<T: Real>(
    p: &mut LinearParams<T>,
    prefix: &str,
    f: &mut dyn FnMut(String, &mut Tensor4<T>),
) {
    f(format!("{prefix}.weight"), &mut p.weight);
    f(format!("{prefix}.bias"), &mut p.bias);
}

// ---------------------------------------------------------------------------
// Lifted forms and forward passes
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct LiftedSam {
    pub dw3x3: LiftedConv,
    pub dw_1xk: LiftedConv,
    pub dw_kx1: LiftedConv,
    pub pw: LiftedConv,
    pub proj: LiftedLinear,
}

#[derive(Clone, Copy, Debug)]
pub struct LiftedSab {
    pub pre_linear: LiftedLinear,
    pub sam: LiftedSam,
    pub ln: LiftedLayerNorm,
    pub conv3x3: LiftedConv,
}

impl<T: Real> SamParams<T> {
    pub fn lift(&self, tape: &mut Tape<T>, trainable: bool) -> LiftedSam {
        LiftedSam {
            dw3x3: tape.lift_conv(&self.dw3x3, trainable),
            dw_1xk: tape.lift_conv(&self.dw_1xk, trainable),
            dw_kx1: tape.lift_conv(&self.dw_kx1, trainable),
            pw: tape.lift_conv(&self.pw, trainable),
            proj: tape.lift_linear(&self.proj, trainable),
        }
    }
}

impl<T: Real> SabParams<T> {
    pub fn lift(&self, tape: &mut Tape<T>, trainable: bool) -> LiftedSab {
        LiftedSab {
            pre_linear: tape.lift_linear(&self.pre_linear, trainable),
            sam: self.sam.lift(tape, trainable),
            ln: tape.lift_layernorm(&self.ln, trainable),
            conv3x3: tape.lift_conv(&self.conv3x3, trainable),
        }
    }
}

/// Strip attention module: refine with a 3x3 depthwise, sweep 1xK then Kx1
/// strips, mix pointwise into an attention map, and gate the activated
/// linear projection of the input with it. Spatial dims are preserved.
pub fn sam_forward<T: Real>(tape: &mut Tape<T>, x: ValueId, p: &LiftedSam) -> Result<ValueId> {
    let refined = tape.conv(x, &p.dw3x3)?;
    let horiz = tape.conv(refined, &p.dw_1xk)?;
    let vert = tape.conv(horiz, &p.dw_kx1)?;
    let attn = tape.conv(vert, &p.pw)?;
    let proj = tape.linear_p(x, &p.proj)?;
    let gated = tape.gelu(proj);
    tape.mul(gated, attn)
}

/// Strip attention block: residual attention sub-block followed by a
/// residual LayerNorm + 3x3 conv sub-block.
pub fn sab_forward<T: Real>(tape: &mut Tape<T>, x: ValueId, p: &LiftedSab) -> Result<ValueId> {
    let pre = tape.linear_p(x, &p.pre_linear)?;
    let act = tape.gelu(pre);
    let attn_out = sam_forward(tape, act, &p.sam)?;
    let f1 = tape.add(x, attn_out)?;
    let normed = tape.layernorm_p(f1, &p.ln)?;
    let conv = tape.conv(normed, &p.conv3x3)?;
    tape.add(f1, conv)
}

/// Tape-free convenience wrapper around [`sam_forward`].
pub fn sam_eval<T: Real>(x: &Tensor4<T>, p: &SamParams<T>) -> Result<Tensor4<T>> {
    let mut tape = Tape::new();
    let xid = tape.constant(x.clone());
    let lifted = p.lift(&mut tape, false);
    let out = sam_forward(&mut tape, xid, &lifted)?;
    Ok(tape.value(out).clone())
}

/// Tape-free convenience wrapper around [`sab_forward`].
pub fn sab_eval<T: Real>(x: &Tensor4<T>, p: &SabParams<T>) -> Result<Tensor4<T>> {
    let mut tape = Tape::new();
    let xid = tape.constant(x.clone());
    let lifted = p.lift(&mut tape, false);
    let out = sab_forward(&mut tape, xid, &lifted)?;
    Ok(tape.value(out).clone())
}
