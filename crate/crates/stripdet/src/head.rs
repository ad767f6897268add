//! Anchor detection head: three parallel branches (classification, box
//! regression, orientation), each a 3x3 conv followed by a 1x1 projection
//! to its per-anchor output channels.

use crate::attention::{random_conv, visit_conv, visit_conv_mut};
use crate::config::{ModelConfig, BOX_CODE_SIZE};
use crate::error::Result;
use crate::ops::{ConvParams, ConvSpec};
use crate::real::Real;
use crate::tape::{LiftedConv, Tape, ValueId};
use crate::tensor::Tensor4;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct BranchParams<T> {
    pub conv3x3: ConvParams<T>,
    pub out1x1: ConvParams<T>,
}

impl<T: Real> BranchParams<T> {
    fn random(in_ch: usize, mid_ch: usize, out_ch: usize, bias: bool, rng: &mut impl Rng) -> Self {
        BranchParams {
            conv3x3: random_conv(ConvSpec::standard(in_ch, mid_ch, 3, 1, 1), bias, rng),
            out1x1: random_conv(ConvSpec::pointwise(mid_ch, out_ch), bias, rng),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor4<T>)) {
        visit_conv(&self.conv3x3, &format!("{prefix}.conv3x3"), f);
        visit_conv(&self.out1x1, &format!("{prefix}.out1x1"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor4<T>)) {
        visit_conv_mut(&mut self.conv3x3, &format!("{prefix}.conv3x3"), f);
        visit_conv_mut(&mut self.out1x1, &format!("{prefix}.out1x1"), f);
    }

    pub fn lift(&self, tape: &mut Tape<T>, trainable: bool) -> LiftedBranch {
        LiftedBranch {
            conv3x3: tape.lift_conv(&self.conv3x3, trainable),
            out1x1: tape.lift_conv(&self.out1x1, trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LiftedBranch {
    pub conv3x3: LiftedConv,
    pub out1x1: LiftedConv,
}

#[derive(Clone, Debug)]
pub struct HeadParams<T> {
    pub cls: BranchParams<T>,
    pub bbox: BranchParams<T>,
    pub dir: BranchParams<T>,
}

impl<T: Real> HeadParams<T> {
    pub fn random(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let in_ch = cfg.fused_channels();
        let mid = cfg.head_channels;
        let a = cfg.anchors_per_cell();
        HeadParams {
            cls: BranchParams::random(in_ch, mid, a * cfg.num_classes(), cfg.conv_bias, rng),
            bbox: BranchParams::random(in_ch, mid, a * BOX_CODE_SIZE, cfg.conv_bias, rng),
            dir: BranchParams::random(in_ch, mid, a * 2, cfg.conv_bias, rng),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor4<T>)) {
        self.cls.visit(&format!("{prefix}.cls"), f);
        self.bbox.visit(&format!("{prefix}.bbox"), f);
        self.dir.visit(&format!("{prefix}.dir"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor4<T>)) {
        self.cls.visit_mut(&format!("{prefix}.cls"), f);
        self.bbox.visit_mut(&format!("{prefix}.bbox"), f);
        self.dir.visit_mut(&format!("{prefix}.dir"), f);
    }

    pub fn lift(&self, tape: &mut Tape<T>, trainable: bool) -> LiftedHead {
        LiftedHead {
            cls: self.cls.lift(tape, trainable),
            bbox: self.bbox.lift(tape, trainable),
            dir: self.dir.lift(tape, trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LiftedHead {
    pub cls: LiftedBranch,
    pub bbox: LiftedBranch,
    pub dir: LiftedBranch,
}

/// Per-anchor logit maps: classification, box deltas, orientation bins.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub cls: ValueId,
    pub bbox: ValueId,
    pub dir: ValueId,
}

fn branch_forward<T: Real>(tape: &mut Tape<T>, x: ValueId, p: &LiftedBranch) -> Result<ValueId> {
    let mid = tape.conv(x, &p.conv3x3)?;
    tape.conv(mid, &p.out1x1)
}

pub fn head_forward<T: Real>(tape: &mut Tape<T>, feat: ValueId, p: &LiftedHead) -> Result<HeadOutputs> {
    Ok(HeadOutputs {
        cls: branch_forward(tape, feat, &p.cls)?,
        bbox: branch_forward(tape, feat, &p.bbox)?,
        dir: branch_forward(tape, feat, &p.dir)?,
    })
}
