//! Reverse-mode gradient tape. Forward ops append nodes in execution order
//! (a valid topological order by construction); `backward` replays the tape
//! in reverse, dispatching each primitive's backward kernel.
//!
//! A tape is confined to one logical execution: build it, run backward,
//! read gradients, drop it.

use crate::error::{Error, Result};
use crate::losses;
use crate::ops::{self, ConvSpec, LayerNormParams};
use crate::pillars;
use crate::real::Real;
use crate::tensor::{Dims4, Tensor4};

/// Handle to a value slot on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

enum TapeOp {
    Leaf,
    Add(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Scale(ValueId, f64),
    Sum(ValueId),
    Conv2d {
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        spec: ConvSpec,
    },
    Linear {
        x: ValueId,
        w: ValueId,
        b: ValueId,
    },
    Gelu(ValueId),
    Sigmoid(ValueId),
    Relu(ValueId),
    LayerNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    },
    Upsample {
        x: ValueId,
        factor: usize,
    },
    Concat(Vec<ValueId>),
    MaskedMaxPoints {
        x: ValueId,
        counts: Vec<usize>,
    },
    ScatterBev {
        x: ValueId,
        coords: Vec<(usize, usize)>,
    },
    FocalLoss {
        logits: ValueId,
        targets: Vec<bool>,
        mask: Vec<bool>,
        alpha: f64,
        gamma: f64,
        norm: f64,
    },
    SmoothL1 {
        pred: ValueId,
        target: Vec<f64>,
        mask: Vec<bool>,
        beta: f64,
        norm: f64,
    },
    DirCrossEntropy {
        logits: ValueId,
        bins: Vec<u8>,
        mask: Vec<bool>,
        norm: f64,
    },
}

struct Node<T> {
    value: Tensor4<T>,
    op: TapeOp,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`ValueId`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor4<T>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for a slot that is known to require one.
    pub fn expect(&self, id: ValueId) -> &Tensor4<T> {
        self.grads[id.0].as_ref().expect("no gradient for slot")
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor4<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor4<T>, op: TapeOp, requires_grad: bool) -> ValueId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn requires(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Insert a differentiable leaf (an input or parameter).
    pub fn leaf(&mut self, value: Tensor4<T>) -> ValueId {
        self.push(value, TapeOp::Leaf, true)
    }

    /// Insert a constant leaf; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor4<T>) -> ValueId {
        self.push(value, TapeOp::Leaf, false)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = ops::add(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(v, TapeOp::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = ops::mul(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(v, TapeOp::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: ValueId, alpha: f64) -> ValueId {
        let v = ops::scale(self.value(x), alpha);
        let rg = self.requires(x);
        self.push(v, TapeOp::Scale(x, alpha), rg)
    }

    /// Sum all elements into a 1x1x1x1 scalar slot.
    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let v = Tensor4::scalar(ops::sum_all(self.value(x)));
        let rg = self.requires(x);
        self.push(v, TapeOp::Sum(x), rg)
    }

    pub fn conv2d(&mut self, x: ValueId, w: ValueId, b: Option<ValueId>, spec: ConvSpec) -> Result<ValueId> {
        let v = ops::conv2d(
            self.value(x),
            &spec,
            self.value(w),
            b.map(|bi| self.value(bi)),
        )?;
        let rg = self.requires(x) || self.requires(w) || b.is_some_and(|bi| self.requires(bi));
        Ok(self.push(v, TapeOp::Conv2d { x, w, b, spec }, rg))
    }

    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let v = ops::linear(self.value(x), self.value(w), self.value(b))?;
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(v, TapeOp::Linear { x, w, b }, rg))
    }

    pub fn gelu(&mut self, x: ValueId) -> ValueId {
        let v = ops::gelu(self.value(x));
        let rg = self.requires(x);
        self.push(v, TapeOp::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let v = ops::sigmoid(self.value(x));
        let rg = self.requires(x);
        self.push(v, TapeOp::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let v = ops::relu(self.value(x));
        let rg = self.requires(x);
        self.push(v, TapeOp::Relu(x), rg)
    }

    pub fn layernorm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId, eps: f64) -> Result<ValueId> {
        let p = LayerNormParams {
            gamma: self.value(gamma).clone(),
            beta: self.value(beta).clone(),
            eps,
        };
        let v = ops::layernorm(self.value(x), &p)?;
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(v, TapeOp::LayerNorm { x, gamma, beta, eps }, rg))
    }

    pub fn upsample_nearest(&mut self, x: ValueId, factor: usize) -> Result<ValueId> {
        let v = ops::upsample_nearest(self.value(x), factor)?;
        let rg = self.requires(x);
        Ok(self.push(v, TapeOp::Upsample { x, factor }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        let tensors: Vec<&Tensor4<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat_channels(&tensors)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(v, TapeOp::Concat(parts.to_vec()), rg))
    }

    pub fn masked_max_points(&mut self, x: ValueId, counts: Vec<usize>) -> Result<ValueId> {
        let v = pillars::masked_max_points(self.value(x), &counts)?;
        let rg = self.requires(x);
        Ok(self.push(v, TapeOp::MaskedMaxPoints { x, counts }, rg))
    }

    pub fn scatter_bev(
        &mut self,
        x: ValueId,
        coords: Vec<(usize, usize)>,
        grid_h: usize,
        grid_w: usize,
    ) -> Result<ValueId> {
        let v = pillars::scatter_to_bev(self.value(x), &coords, grid_h, grid_w)?;
        let rg = self.requires(x);
        Ok(self.push(v, TapeOp::ScatterBev { x, coords }, rg))
    }

    pub fn focal_loss(
        &mut self,
        logits: ValueId,
        targets: Vec<bool>,
        mask: Vec<bool>,
        alpha: f64,
        gamma: f64,
        norm: f64,
    ) -> Result<ValueId> {
        let v = losses::focal_loss(self.value(logits), &targets, &mask, alpha, gamma, norm)?;
        let rg = self.requires(logits);
        Ok(self.push(
            Tensor4::scalar(T::from_f64(v)),
            TapeOp::FocalLoss {
                logits,
                targets,
                mask,
                alpha,
                gamma,
                norm,
            },
            rg,
        ))
    }

    pub fn smooth_l1(
        &mut self,
        pred: ValueId,
        target: Vec<f64>,
        mask: Vec<bool>,
        beta: f64,
        norm: f64,
    ) -> Result<ValueId> {
        let v = losses::smooth_l1(self.value(pred), &target, &mask, beta, norm)?;
        let rg = self.requires(pred);
        Ok(self.push(
            Tensor4::scalar(T::from_f64(v)),
            TapeOp::SmoothL1 {
                pred,
                target,
                mask,
                beta,
                norm,
            },
            rg,
        ))
    }

    pub fn dir_cross_entropy(
        &mut self,
        logits: ValueId,
        bins: Vec<u8>,
        mask: Vec<bool>,
        norm: f64,
    ) -> Result<ValueId> {
        let v = losses::dir_cross_entropy(self.value(logits), &bins, &mask, norm)?;
        let rg = self.requires(logits);
        Ok(self.push(
            Tensor4::scalar(T::from_f64(v)),
            TapeOp::DirCrossEntropy {
                logits,
                bins,
                mask,
                norm,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss slot. Every node reachable backwards
    /// from `loss` that requires a gradient receives one; leaves keep theirs
    /// in the returned [`Gradients`].
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<T>> {
        let loss_dims = self.value(loss).dims();
        if loss_dims.count() != 1 {
            return Err(Error::NonScalarLoss {
                dims: loss_dims.as_array(),
            });
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::filled(loss_dims, T::ONE));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                TapeOp::Leaf => {
                    grads[idx] = Some(dout);
                    continue;
                }
                TapeOp::Add(a, b) => {
                    self.accumulate(&mut grads, *a, dout.clone());
                    self.accumulate(&mut grads, *b, dout);
                }
                TapeOp::Mul(a, b) => {
                    let da = ops::mul(&dout, self.value(*b))?;
                    let db = ops::mul(&dout, self.value(*a))?;
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                TapeOp::Scale(x, alpha) => {
                    self.accumulate(&mut grads, *x, ops::scale(&dout, *alpha));
                }
                TapeOp::Sum(x) => {
                    let g = dout.scalar_value();
                    self.accumulate(&mut grads, *x, Tensor4::filled(self.value(*x).dims(), g));
                }
                TapeOp::Conv2d { x, w, b, spec } => {
                    let g = ops::conv2d_backward(
                        self.value(*x),
                        spec,
                        self.value(*w),
                        b.is_some(),
                        &dout,
                    );
                    self.accumulate(&mut grads, *x, g.dx);
                    self.accumulate(&mut grads, *w, g.dw);
                    if let (Some(bi), Some(db)) = (b, g.db) {
                        self.accumulate(&mut grads, *bi, db);
                    }
                }
                TapeOp::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), &dout);
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *w, dw);
                    self.accumulate(&mut grads, *b, db);
                }
                TapeOp::Gelu(x) => {
                    self.accumulate(&mut grads, *x, ops::gelu_backward(self.value(*x), &dout));
                }
                TapeOp::Sigmoid(x) => {
                    self.accumulate(&mut grads, *x, ops::sigmoid_backward(self.value(*x), &dout));
                }
                TapeOp::Relu(x) => {
                    self.accumulate(&mut grads, *x, ops::relu_backward(self.value(*x), &dout));
                }
                TapeOp::LayerNorm { x, gamma, beta, eps } => {
                    let p = LayerNormParams {
                        gamma: self.value(*gamma).clone(),
                        beta: self.value(*beta).clone(),
                        eps: *eps,
                    };
                    let (dx, dg, db) = ops::layernorm_backward(self.value(*x), &p, &dout);
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *gamma, dg);
                    self.accumulate(&mut grads, *beta, db);
                }
                TapeOp::Upsample { x, factor } => {
                    let dx = ops::upsample_nearest_backward(self.value(*x).dims(), *factor, &dout);
                    self.accumulate(&mut grads, *x, dx);
                }
                TapeOp::Concat(parts) => {
                    let dims: Vec<Dims4> = parts.iter().map(|&p| self.value(p).dims()).collect();
                    let gs = ops::concat_channels_backward(&dims, &dout);
                    for (&p, g) in parts.iter().zip(gs) {
                        self.accumulate(&mut grads, p, g);
                    }
                }
                TapeOp::MaskedMaxPoints { x, counts } => {
                    let dx = pillars::masked_max_points_backward(self.value(*x), counts, &dout);
                    self.accumulate(&mut grads, *x, dx);
                }
                TapeOp::ScatterBev { x, coords } => {
                    let dx =
                        pillars::scatter_to_bev_backward(self.value(*x).dims(), coords, &dout);
                    self.accumulate(&mut grads, *x, dx);
                }
                TapeOp::FocalLoss {
                    logits,
                    targets,
                    mask,
                    alpha,
                    gamma,
                    norm,
                } => {
                    let dl = losses::focal_loss_backward(
                        self.value(*logits),
                        targets,
                        mask,
                        *alpha,
                        *gamma,
                        *norm,
                        dout.scalar_value().to_f64(),
                    );
                    self.accumulate(&mut grads, *logits, dl);
                }
                TapeOp::SmoothL1 {
                    pred,
                    target,
                    mask,
                    beta,
                    norm,
                } => {
                    let dl = losses::smooth_l1_backward(
                        self.value(*pred),
                        target,
                        mask,
                        *beta,
                        *norm,
                        dout.scalar_value().to_f64(),
                    );
                    self.accumulate(&mut grads, *pred, dl);
                }
                TapeOp::DirCrossEntropy {
                    logits,
                    bins,
                    mask,
                    norm,
                } => {
                    let dl = losses::dir_cross_entropy_backward(
                        self.value(*logits),
                        bins,
                        mask,
                        *norm,
                        dout.scalar_value().to_f64(),
                    );
                    self.accumulate(&mut grads, *logits, dl);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor4<T>>], id: ValueId, g: Tensor4<T>) {
        if !self.requires(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, &n) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += n;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

// ---------------------------------------------------------------------------
// Lifted parameter handles
// ---------------------------------------------------------------------------

/// Tape handles for a convolution's weights.
#[derive(Clone, Copy, Debug)]
pub struct LiftedConv {
    pub w: ValueId,
    pub b: Option<ValueId>,
    pub spec: ConvSpec,
}

#[derive(Clone, Copy, Debug)]
pub struct LiftedLinear {
    pub w: ValueId,
    pub b: ValueId,
}

#[derive(Clone, Copy, Debug)]
pub struct LiftedLayerNorm {
    pub gamma: ValueId,
    pub beta: ValueId,
    pub eps: f64,
}

impl<T: Real> Tape<T> {
    fn insert(&mut self, value: Tensor4<T>, trainable: bool) -> ValueId {
        if trainable {
            self.leaf(value)
        } else {
            self.constant(value)
        }
    }

    pub fn lift_conv(&mut self, p: &ops::ConvParams<T>, trainable: bool) -> LiftedConv {
        LiftedConv {
            w: self.insert(p.weight.clone(), trainable),
            b: p.bias.as_ref().map(|b| self.insert(b.clone(), trainable)),
            spec: p.spec,
        }
    }

    pub fn lift_linear(&mut self, p: &ops::LinearParams<T>, trainable: bool) -> LiftedLinear {
        LiftedLinear {
            w: self.insert(p.weight.clone(), trainable),
            b: self.insert(p.bias.clone(), trainable),
        }
    }

    pub fn lift_layernorm(&mut self, p: &LayerNormParams<T>, trainable: bool) -> LiftedLayerNorm {
        LiftedLayerNorm {
            gamma: self.insert(p.gamma.clone(), trainable),
            beta: self.insert(p.beta.clone(), trainable),
            eps: p.eps,
        }
    }

    pub fn conv(&mut self, x: ValueId, p: &LiftedConv) -> Result<ValueId> {
        self.conv2d(x, p.w, p.b, p.spec)
    }

    pub fn linear_p(&mut self, x: ValueId, p: &LiftedLinear) -> Result<ValueId> {
        self.linear(x, p.w, p.b)
    }

    pub fn layernorm_p(&mut self, x: ValueId, p: &LiftedLayerNorm) -> Result<ValueId> {
        self.layernorm(x, p.gamma, p.beta, p.eps)
    }
}
