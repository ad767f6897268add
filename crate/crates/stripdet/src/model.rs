//! Full detector: pillar encoder weights + backbone + head, end-to-end
//! forward on the gradient tape, and the inference pipeline from a point
//! cloud to post-NMS detections.

use crate::backbone::{backbone_forward, BackboneParams, LiftedBackbone};
use crate::boxes::{decode_checked, nms_bev, Detection};
use crate::config::{ModelConfig, ANCHOR_YAWS, BOX_CODE_SIZE};
use crate::error::{Error, Result};
use crate::head::{head_forward, HeadOutputs, HeadParams, LiftedHead};
use crate::ops::LinearParams;
use crate::pillars::{pillarize, PillarBatch, PointCloud, POINT_FEATURES};
use crate::real::Real;
use crate::seed::{stream_rng, STREAM_WEIGHTS};
use crate::tape::{LiftedLinear, Tape, ValueId};
use crate::targets::{anchor_class, generate_anchors};
use crate::tensor::Tensor4;

/// Every learned tensor of the detector.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub pfn: LinearParams<T>,
    pub backbone: BackboneParams<T>,
    pub head: HeadParams<T>,
}

impl<T: Real> ModelParams<T> {
    /// Deterministic random initialization from the root seed (weights
    /// stream). Traversal order is pfn, backbone stages, head branches.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, STREAM_WEIGHTS);
        let mut params = ModelParams {
            pfn: crate::attention::random_linear(POINT_FEATURES, cfg.c0, &mut rng),
            backbone: BackboneParams::random(cfg, &mut rng),
            head: HeadParams::random(cfg, &mut rng),
        };
        params.temper_init();
        Ok(params)
    }

    /// Point coordinates arrive in meters, so activations are far from
    /// unit variance. Start every residual branch and head output at zero
    /// (attention gate at one, classification at a low prior) so the first
    /// forward passes stay bounded and the optimizer sees a sane loss.
    fn temper_init(&mut self) {
        let pfn_scale = T::from_f64(0.125);
        for v in self.pfn.weight.data_mut() {
            *v *= pfn_scale;
        }
        for stage in &mut self.backbone.stages {
            for sab in &mut stage.sabs {
                zero_fill(&mut sab.conv3x3.weight);
                zero_fill(&mut sab.sam.pw.weight);
                if let Some(b) = &mut sab.sam.pw.bias {
                    for v in b.data_mut() {
                        *v = T::ONE;
                    }
                }
            }
        }
        for branch in [&mut self.head.cls, &mut self.head.bbox, &mut self.head.dir] {
            zero_fill(&mut branch.out1x1.weight);
        }
        if let Some(b) = &mut self.head.cls.out1x1.bias {
            // Initial class probability ~1/100 keeps the focal loss of the
            // overwhelmingly negative anchors small.
            let prior = T::from_f64(-(99.0f64).ln());
            for v in b.data_mut() {
                *v = prior;
            }
        }
    }

    /// Visit every tensor with its path name, in a fixed order shared with
    /// [`LiftedModel::visit_ids`].
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor4<T>)) {
        crate::attention::visit_linear(&self.pfn, "pfn", f);
        self.backbone.visit("backbone", f);
        self.head.visit("head", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor4<T>)) {
        crate::attention::visit_linear_mut(&mut self.pfn, "pfn", f);
        self.backbone.visit_mut("backbone", f);
        self.head.visit_mut("head", f);
    }

    /// Total number of stored scalars.
    pub fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.all_finite());
        ok
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        // Rebuild structurally via visit pairing would lose structure, so
        // cast field by field.
        ModelParams {
            pfn: LinearParams {
                weight: self.pfn.weight.cast(),
                bias: self.pfn.bias.cast(),
            },
            backbone: BackboneParams {
                stages: self
                    .backbone
                    .stages
                    .iter()
                    .map(|s| crate::backbone::StageParams {
                        down: crate::backbone::DownsampleParams {
                            dw: cast_conv(&s.down.dw),
                            pw: cast_conv(&s.down.pw),
                        },
                        sabs: s.sabs.iter().map(cast_sab).collect(),
                    })
                    .collect(),
            },
            head: HeadParams {
                cls: cast_branch(&self.head.cls),
                bbox: cast_branch(&self.head.bbox),
                dir: cast_branch(&self.head.dir),
            },
        }
    }

    pub fn lift(&self, tape: &mut Tape<T>, trainable: bool) -> LiftedModel {
        LiftedModel {
            pfn: tape.lift_linear(&self.pfn, trainable),
            backbone: self.backbone.lift(tape, trainable),
            head: self.head.lift(tape, trainable),
        }
    }
}

fn zero_fill<T: Real>(t: &mut Tensor4<T>) {
    for v in t.data_mut() {
        *v = T::ZERO;
    }
}

fn cast_conv<T: Real, U: Real>(p: &crate::ops::ConvParams<T>) -> crate::ops::ConvParams<U> {
    crate::ops::ConvParams {
        spec: p.spec,
        weight: p.weight.cast(),
        bias: p.bias.as_ref().map(|b| b.cast()),
    }
}

fn cast_linear<T: Real, U: Real>(p: &LinearParams<T>) -> LinearParams<U> {
    LinearParams {
        weight: p.weight.cast(),
        bias: p.bias.cast(),
    }
}

fn cast_sab<T: Real, U: Real>(p: &crate::attention::SabParams<T>) -> crate::attention::SabParams<U> {
    crate::attention::SabParams {
        pre_linear: cast_linear(&p.pre_linear),
        sam: crate::attention::SamParams {
            dw3x3: cast_conv(&p.sam.dw3x3),
            dw_1xk: cast_conv(&p.sam.dw_1xk),
            dw_kx1: cast_conv(&p.sam.dw_kx1),
            pw: cast_conv(&p.sam.pw),
            proj: cast_linear(&p.sam.proj),
        },
        ln: crate::ops::LayerNormParams {
            gamma: p.ln.gamma.cast(),
            beta: p.ln.beta.cast(),
            eps: p.ln.eps,
        },
        conv3x3: cast_conv(&p.conv3x3),
    }
}

fn cast_branch<T: Real, U: Real>(p: &crate::head::BranchParams<T>) -> crate::head::BranchParams<U> {
    crate::head::BranchParams {
        conv3x3: cast_conv(&p.conv3x3),
        out1x1: cast_conv(&p.out1x1),
    }
}

/// Tape handles for every learned tensor.
#[derive(Clone, Debug)]
pub struct LiftedModel {
    pub pfn: LiftedLinear,
    pub backbone: LiftedBackbone,
    pub head: LiftedHead,
}

impl LiftedModel {
    /// Value ids in the same order as [`ModelParams::visit`].
    pub fn visit_ids(&self, f: &mut dyn FnMut(ValueId)) {
        f(self.pfn.w);
        f(self.pfn.b);
        for st in &self.backbone.stages {
            visit_conv_ids(&st.down.dw, f);
            visit_conv_ids(&st.down.pw, f);
            for sab in &st.sabs {
                f(sab.pre_linear.w);
                f(sab.pre_linear.b);
                visit_conv_ids(&sab.sam.dw3x3, f);
                visit_conv_ids(&sab.sam.dw_1xk, f);
                visit_conv_ids(&sab.sam.dw_kx1, f);
                visit_conv_ids(&sab.sam.pw, f);
                f(sab.sam.proj.w);
                f(sab.sam.proj.b);
                f(sab.ln.gamma);
                f(sab.ln.beta);
                visit_conv_ids(&sab.conv3x3, f);
            }
        }
        for br in [&self.head.cls, &self.head.bbox, &self.head.dir] {
            visit_conv_ids(&br.conv3x3, f);
            visit_conv_ids(&br.out1x1, f);
        }
    }

    pub fn ids(&self) -> Vec<ValueId> {
        let mut out = Vec::new();
        self.visit_ids(&mut |id| out.push(id));
        out
    }
}

fn visit_conv_ids(c: &crate::tape::LiftedConv, f: &mut dyn FnMut(ValueId)) {
    f(c.w);
    if let Some(b) = c.b {
        f(b);
    }
}

/// Encode a pillar batch into the BEV map on the tape: per-point linear,
/// ReLU, masked max over each pillar's points, scatter to the grid.
pub fn encode_bev<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    pfn: &LiftedLinear,
    batch: &PillarBatch<T>,
) -> Result<ValueId> {
    let feats = tape.constant(batch.features.clone());
    let projected = tape.linear_p(feats, pfn)?;
    let activated = tape.relu(projected);
    let pooled = tape.masked_max_points(activated, batch.counts.clone())?;
    tape.scatter_bev(
        pooled,
        batch.coords.clone(),
        cfg.grid.height()?,
        cfg.grid.width()?,
    )
}

/// Full forward from a pillar batch to the three head maps.
pub fn forward_points<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    model: &LiftedModel,
    batch: &PillarBatch<T>,
) -> Result<HeadOutputs> {
    let bev = encode_bev(tape, cfg, &model.pfn, batch)?;
    forward_bev(tape, model, bev)
}

/// Backbone + head from an already-encoded BEV map.
pub fn forward_bev<T: Real>(
    tape: &mut Tape<T>,
    model: &LiftedModel,
    bev: ValueId,
) -> Result<HeadOutputs> {
    let fused = backbone_forward(tape, bev, &model.backbone)?;
    head_forward(tape, fused, &model.head)
}

/// Inference statistics worth surfacing next to the detections.
#[derive(Clone, Copy, Debug, Default)]
pub struct InferStats {
    pub pillars: usize,
    pub above_threshold: usize,
    pub dropped_non_finite: usize,
}

/// Run the detector on a point cloud and return post-NMS detections,
/// sorted by descending score.
pub fn infer<T: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    cloud: &PointCloud,
) -> Result<(Vec<Detection>, InferStats)> {
    cfg.validate()?;
    let batch = pillarize::<T>(cloud, &cfg.grid)?;
    let mut stats = InferStats {
        pillars: batch.num_pillars(),
        ..Default::default()
    };

    let mut tape = Tape::new();
    let model = params.lift(&mut tape, false);
    let outputs = if batch.num_pillars() == 0 {
        // No pillars: the BEV map is all zeros.
        let bev = tape.constant(Tensor4::zeros(crate::tensor::Dims4::new(
            1,
            cfg.c0,
            cfg.grid.height()?,
            cfg.grid.width()?,
        )));
        forward_bev(&mut tape, &model, bev)?
    } else {
        forward_points(&mut tape, cfg, &model, &batch)?
    };

    let cls = tape.value(outputs.cls);
    let bbox = tape.value(outputs.bbox);
    let dir = tape.value(outputs.dir);
    let (hf, wf) = (cls.dims().h, cls.dims().w);
    let n_cls = cfg.num_classes();
    let a_total = cfg.anchors_per_cell();
    if cls.dims().c != a_total * n_cls {
        return Err(Error::InvalidSpec(format!(
            "classification map has {} channels, expected {}",
            cls.dims().c,
            a_total * n_cls
        )));
    }
    let anchors = generate_anchors(cfg, hf, wf)?;

    let mut dets = Vec::new();
    for a in 0..a_total {
        for i in 0..hf {
            for j in 0..wf {
                // Anchor slot a detects only its own class.
                let class = anchor_class(a);
                let logit = cls.get(0, a * n_cls + class, i, j).to_f64();
                let score = crate::ops::sigmoid_scalar(logit);
                if score < cfg.score_threshold {
                    continue;
                }
                stats.above_threshold += 1;
                let mut deltas = [0.0f64; 7];
                for (d, slot) in deltas.iter_mut().enumerate() {
                    *slot = bbox.get(0, a * BOX_CODE_SIZE + d, i, j).to_f64();
                }
                let z0 = dir.get(0, 2 * a, i, j).to_f64();
                let z1 = dir.get(0, 2 * a + 1, i, j).to_f64();
                let bin = if z1 > z0 { 1 } else { 0 };
                let anchor = &anchors[crate::targets::anchor_index(a, i, j, hf, wf)];
                match decode_checked(&deltas, anchor, Some(bin)) {
                    Ok(box3d) => dets.push(Detection {
                        box3d,
                        class_id: class,
                        score,
                    }),
                    Err(_) => stats.dropped_non_finite += 1,
                }
            }
        }
    }
    let kept = nms_bev(&dets, cfg.nms_iou_threshold);
    Ok((kept, stats))
}

/// Number of yaw variants per anchor class (used by analyzer cross-checks).
pub fn yaw_variants() -> usize {
    ANCHOR_YAWS.len()
}
