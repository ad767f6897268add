//! Toy trainer: AdamW with a one-cycle schedule and global-norm gradient
//! clipping, overfitting the detector on one synthetic scene.

use crate::boxes::{Box3D, Detection};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::losses::total_loss;
use crate::model::{forward_points, infer, ModelParams};
use crate::pillars::pillarize;
use crate::synth::synth_scene;
use crate::tape::Tape;
use crate::targets::{assign_targets, build_loss_targets, generate_anchors, GtBox, LossTargets};
use crate::tensor::Tensor4;

/// Decoupled-decay Adam over the model's tensors in visit order. Biases
/// and norm affines are excluded from weight decay.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Tensor4<f64>>,
    v: Vec<Tensor4<f64>>,
    decay: Vec<bool>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ModelParams<f64>, weight_decay: f64) -> Self {
        let mut m = Vec::new();
        let mut decay = Vec::new();
        params.visit(&mut |name, t| {
            m.push(Tensor4::zeros(t.dims()));
            let skip = name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta");
            decay.push(!skip);
        });
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            v: m.clone(),
            m,
            decay,
            t: 0,
        }
    }

    /// Apply one update. `grads` must align with the visit order.
    pub fn step(&mut self, params: &mut ModelParams<f64>, grads: &[Tensor4<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut idx = 0;
        params.visit_mut(&mut |_, tensor| {
            let g = &grads[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let wd = if self.decay[idx] { self.weight_decay } else { 0.0 };
            for ((p, &gi), (mi, vi)) in tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + self.eps) + wd * *p);
            }
            idx += 1;
        });
    }
}

/// One-cycle schedule: cosine warmup from peak/div_start to peak over the
/// first `pct_start` of training, cosine anneal to peak/div_final after.
#[derive(Clone, Copy, Debug)]
pub struct OneCycle {
    pub peak: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_start: f64,
    pub div_final: f64,
}

impl OneCycle {
    pub fn new(peak: f64, total_steps: usize) -> Self {
        OneCycle {
            peak,
            total_steps,
            pct_start: 0.3,
            div_start: 25.0,
            div_final: 100.0,
        }
    }

    /// Learning rate at a zero-indexed step.
    pub fn lr(&self, step: usize) -> f64 {
        let warm = ((self.total_steps as f64 * self.pct_start).round() as usize).max(1);
        let anneal = |a: f64, b: f64, frac: f64| b + (a - b) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0;
        if step < warm {
            anneal(self.peak / self.div_start, self.peak, step as f64 / warm as f64)
        } else {
            let rest = (self.total_steps - warm).max(1);
            anneal(
                self.peak,
                self.peak / self.div_final,
                (step - warm) as f64 / rest as f64,
            )
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor4<f64>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for &v in g.data() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub cls: f64,
    pub bbox: f64,
    pub dir: f64,
    pub total: f64,
    pub lr: f64,
}

pub struct TrainResult {
    pub losses: Vec<StepLoss>,
    pub detections: Vec<Detection>,
    pub gt_boxes: Vec<Box3D>,
    pub params: ModelParams<f64>,
}

pub struct TrainSettings {
    pub steps: usize,
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub n_boxes: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 500,
            lr_peak: 2e-3,
            weight_decay: 0.01,
            clip_norm: 10.0,
            n_boxes: 2,
        }
    }
}

/// Overfit the detector on one synthetic scene and run inference with the
/// trained weights. `log` receives every step's losses.
pub fn train_toy(
    cfg: &ModelConfig,
    seed: u64,
    settings: &TrainSettings,
    mut log: impl FnMut(usize, &StepLoss),
) -> Result<TrainResult> {
    cfg.validate()?;
    let (cloud, gt_boxes) = synth_scene(&cfg.grid, seed, settings.n_boxes);
    let gts: Vec<GtBox> = gt_boxes
        .iter()
        .map(|&box3d| GtBox { box3d, class_id: 0 })
        .collect();

    let batch = pillarize::<f64>(&cloud, &cfg.grid)?;
    if batch.num_pillars() == 0 {
        return Err(Error::InvalidSpec("synthetic scene produced no pillars".into()));
    }
    let (hf, wf) = (cfg.grid.height()? / 2, cfg.grid.width()? / 2);
    let anchors = generate_anchors(cfg, hf, wf)?;
    let assignments = assign_targets(cfg, &anchors, &gts);
    let targets: LossTargets = build_loss_targets(cfg, hf, wf, &anchors, &assignments, &gts);
    if targets.num_pos == 0 {
        return Err(Error::InvalidSpec("no positive anchors for the synthetic scene".into()));
    }

    let mut params = ModelParams::<f64>::random(cfg, seed)?;
    let mut opt = AdamW::new(&params, settings.weight_decay);
    let schedule = OneCycle::new(settings.lr_peak, settings.steps);
    let lw = &cfg.loss;

    let mut losses = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let mut tape = Tape::new();
        let lifted = params.lift(&mut tape, true);
        let out = forward_points(&mut tape, cfg, &lifted, &batch)?;

        let cls_loss = tape.focal_loss(
            out.cls,
            targets.cls_targets.clone(),
            targets.cls_mask.clone(),
            lw.focal_alpha,
            lw.focal_gamma,
            targets.cls_norm,
        )?;
        let box_loss = tape.smooth_l1(
            out.bbox,
            targets.box_targets.clone(),
            targets.box_mask.clone(),
            lw.smooth_l1_beta,
            targets.box_norm,
        )?;
        let dir_loss = tape.dir_cross_entropy(
            out.dir,
            targets.dir_bins.clone(),
            targets.dir_mask.clone(),
            targets.dir_norm,
        )?;
        let wc = tape.scale(cls_loss, lw.weights.w_cls);
        let wb = tape.scale(box_loss, lw.weights.w_bbox);
        let wd = tape.scale(dir_loss, lw.weights.w_dir);
        let partial = tape.add(wc, wb)?;
        let total = tape.add(partial, wd)?;

        let step_loss = StepLoss {
            cls: tape.value(cls_loss).scalar_value(),
            bbox: tape.value(box_loss).scalar_value(),
            dir: tape.value(dir_loss).scalar_value(),
            total: tape.value(total).scalar_value(),
            lr: schedule.lr(step),
        };
        if !step_loss.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }

        let grads = tape.backward(total)?;
        let ids = lifted.ids();
        let mut grad_vec: Vec<Tensor4<f64>> = Vec::with_capacity(ids.len());
        let mut tensor_dims = Vec::new();
        params.visit(&mut |_, t| tensor_dims.push(t.dims()));
        for (id, dims) in ids.iter().zip(tensor_dims) {
            grad_vec.push(match grads.get(*id) {
                Some(g) => g.clone(),
                None => Tensor4::zeros(dims),
            });
        }
        clip_global_norm(&mut grad_vec, settings.clip_norm);
        opt.step(&mut params, &grad_vec, step_loss.lr);

        log(step, &step_loss);
        losses.push(step_loss);
    }

    let (detections, _) = infer(cfg, &params, &cloud)?;
    Ok(TrainResult {
        losses,
        detections,
        gt_boxes,
        params,
    })
}

/// Consistency check used by tests: the weighted sum recomputed from the
/// components must match the recorded total.
pub fn check_total(step: &StepLoss, cfg: &ModelConfig) -> bool {
    let w = &cfg.loss.weights;
    (total_loss(step.cls, step.bbox, step.dir, w) - step.total).abs() < 1e-12
}
