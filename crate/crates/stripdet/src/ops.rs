//! Primitive neural operators: generalized 2D convolution (standard,
//! depthwise, pointwise, 1xK / Kx1 strip), per-pixel linear projection,
//! GeLU, sigmoid, ReLU, channel LayerNorm, nearest upsampling and channel
//! concatenation. Each forward kernel has a matching backward kernel used
//! by the gradient tape.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Dims4, Tensor4};
use rayon::prelude::*;

// ---------------------------------------------------------------------------
// Convolution spec and parameters
// ---------------------------------------------------------------------------

/// Geometry of a 2D convolution. `groups == in_channels == out_channels`
/// is the depthwise form; 1x1 with groups 1 the pointwise form; 1xK / Kx1
/// depthwise the strip forms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn standard(in_c: usize, out_c: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvSpec {
            in_channels: in_c,
            out_channels: out_c,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            pad_h: pad,
            pad_w: pad,
            groups: 1,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvSpec {
            in_channels: channels,
            out_channels: channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            pad_h: pad,
            pad_w: pad,
            groups: channels,
        }
    }

    pub fn pointwise(in_c: usize, out_c: usize) -> Self {
        ConvSpec {
            in_channels: in_c,
            out_channels: out_c,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            pad_h: 0,
            pad_w: 0,
            groups: 1,
        }
    }

    /// Depthwise 1xK strip; pads only along the long axis so spatial dims
    /// are preserved. K must be odd.
    pub fn strip_horizontal(channels: usize, k: usize) -> Self {
        debug_assert!(k % 2 == 1, "strip length must be odd for same padding");
        ConvSpec {
            in_channels: channels,
            out_channels: channels,
            kernel_h: 1,
            kernel_w: k,
            stride: 1,
            pad_h: 0,
            pad_w: (k - 1) / 2,
            groups: channels,
        }
    }

    /// Depthwise Kx1 strip.
    pub fn strip_vertical(channels: usize, k: usize) -> Self {
        debug_assert!(k % 2 == 1, "strip length must be odd for same padding");
        ConvSpec {
            in_channels: channels,
            out_channels: channels,
            kernel_h: k,
            kernel_w: 1,
            stride: 1,
            pad_h: (k - 1) / 2,
            pad_w: 0,
            groups: channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.stride == 0 {
            return Err(Error::InvalidSpec("groups and stride must be >= 1".into()));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::InvalidSpec(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::InvalidSpec("kernel dims must be >= 1".into()));
        }
        Ok(())
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    /// Output spatial dims under zero padding: floor((in + 2*pad - kernel)/stride) + 1.
    pub fn out_spatial(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let padded_h = h + 2 * self.pad_h;
        let padded_w = w + 2 * self.pad_w;
        if self.kernel_h > padded_h || self.kernel_w > padded_w {
            return Err(Error::InvalidSpec(format!(
                "kernel {}x{} larger than padded input {}x{}",
                self.kernel_h, self.kernel_w, padded_h, padded_w
            )));
        }
        Ok((
            (padded_h - self.kernel_h) / self.stride + 1,
            (padded_w - self.kernel_w) / self.stride + 1,
        ))
    }

    /// Shape of the weight tensor: (out, in/groups, kh, kw).
    pub fn weight_dims(&self) -> Dims4 {
        Dims4::new(
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_h,
            self.kernel_w,
        )
    }

    pub fn weight_count(&self) -> usize {
        self.weight_dims().count()
    }

    pub fn param_count(&self, bias: bool) -> usize {
        self.weight_count() + if bias { self.out_channels } else { 0 }
    }

    /// Multiply-accumulates at the given output resolution.
    pub fn mac_count(&self, out_h: usize, out_w: usize) -> u64 {
        (self.out_channels * out_h * out_w) as u64
            * ((self.in_channels / self.groups) * self.kernel_h * self.kernel_w) as u64
    }
}

/// Learned convolution weights. Shapes are validated against the spec at
/// construction so downstream kernels can index without re-checking.
#[derive(Clone, Debug)]
pub struct ConvParams<T> {
    pub spec: ConvSpec,
    pub weight: Tensor4<T>,
    pub bias: Option<Tensor4<T>>,
}

impl<T: Real> ConvParams<T> {
    pub fn new(spec: ConvSpec, weight: Tensor4<T>, bias: Option<Tensor4<T>>) -> Result<Self> {
        spec.validate()?;
        if weight.dims() != spec.weight_dims() {
            return Err(Error::ShapeMismatch {
                op: "conv weights",
                left: weight.dims().as_array(),
                right: spec.weight_dims().as_array(),
            });
        }
        if let Some(b) = &bias {
            if b.dims() != Dims4::new(spec.out_channels, 1, 1, 1) {
                return Err(Error::ShapeMismatch {
                    op: "conv bias",
                    left: b.dims().as_array(),
                    right: [spec.out_channels, 1, 1, 1],
                });
            }
        }
        Ok(ConvParams { spec, weight, bias })
    }

    pub fn scalar_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }
}

/// Per-pixel channel projection weights: weight (out, in, 1, 1), bias (out, 1, 1, 1).
#[derive(Clone, Debug)]
pub struct LinearParams<T> {
    pub weight: Tensor4<T>,
    pub bias: Tensor4<T>,
}

impl<T: Real> LinearParams<T> {
    pub fn new(weight: Tensor4<T>, bias: Tensor4<T>) -> Result<Self> {
        let d = weight.dims();
        if d.h != 1 || d.w != 1 {
            return Err(Error::InvalidSpec(format!(
                "linear weight must be (out, in, 1, 1), got {d}"
            )));
        }
        if bias.dims() != Dims4::new(d.n, 1, 1, 1) {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                left: bias.dims().as_array(),
                right: [d.n, 1, 1, 1],
            });
        }
        Ok(LinearParams { weight, bias })
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims().n
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims().c
    }
}

/// Per-channel affine normalization weights.
#[derive(Clone, Debug)]
pub struct LayerNormParams<T> {
    pub gamma: Tensor4<T>,
    pub beta: Tensor4<T>,
    pub eps: f64,
}

impl<T: Real> LayerNormParams<T> {
    pub fn identity(channels: usize, eps: f64) -> Self {
        LayerNormParams {
            gamma: Tensor4::filled(Dims4::new(channels, 1, 1, 1), T::ONE),
            beta: Tensor4::zeros(Dims4::new(channels, 1, 1, 1)),
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.dims().n
    }
}

// ---------------------------------------------------------------------------
// Convolution kernels
// ---------------------------------------------------------------------------

/// Valid output index range [lo, hi) such that `oj*stride + k_off - pad`
/// stays inside [0, in_len).
#[inline]
fn valid_out_range(
    in_len: usize,
    k_off: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
) -> (usize, usize) {
    let lo = if pad > k_off {
        (pad - k_off).div_ceil(stride)
    } else {
        0
    };
    let hi = if in_len + pad > k_off {
        ((in_len + pad - 1 - k_off) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(out_len), hi)
}

fn check_conv_inputs<T: Real>(
    x: &Tensor4<T>,
    spec: &ConvSpec,
    weight: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
) -> Result<(usize, usize)> {
    spec.validate()?;
    if x.dims().c != spec.in_channels {
        return Err(Error::ChannelMismatch {
            op: "conv2d",
            expected: spec.in_channels,
            actual: x.dims().c,
        });
    }
    if weight.dims() != spec.weight_dims() {
        return Err(Error::ShapeMismatch {
            op: "conv2d weights",
            left: weight.dims().as_array(),
            right: spec.weight_dims().as_array(),
        });
    }
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(Error::LengthMismatch {
                expected: spec.out_channels,
                actual: b.len(),
            });
        }
    }
    spec.out_spatial(x.dims().h, x.dims().w)
}

/// Generalized grouped 2D convolution with zero padding.
pub fn conv2d<T: Real>(
    x: &Tensor4<T>,
    spec: &ConvSpec,
    weight: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
) -> Result<Tensor4<T>> {
    let (oh, ow) = check_conv_inputs(x, spec, weight, bias)?;
    let (n, h, w) = (x.dims().n, x.dims().h, x.dims().w);
    let (kh, kw, s) = (spec.kernel_h, spec.kernel_w, spec.stride);
    let (ph, pw) = (spec.pad_h, spec.pad_w);
    let in_per_group = spec.in_channels / spec.groups;
    let out_per_group = spec.out_channels / spec.groups;

    let mut out = Tensor4::zeros(Dims4::new(n, spec.out_channels, oh, ow));
    let wdims = weight.dims();

    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane_idx, out_plane)| {
            let b = plane_idx / spec.out_channels;
            let o = plane_idx % spec.out_channels;
            let base_c = (o / out_per_group) * in_per_group;
            if let Some(bv) = bias {
                let bo = bv.data()[o];
                out_plane.iter_mut().for_each(|e| *e = bo);
            }
            for cl in 0..in_per_group {
                let c = base_c + cl;
                for oi in 0..oh {
                    let out_row = &mut out_plane[oi * ow..(oi + 1) * ow];
                    for u in 0..kh {
                        let yi = (oi * s + u) as isize - ph as isize;
                        if yi < 0 || yi >= h as isize {
                            continue;
                        }
                        let x_row = x.row(b, c, yi as usize);
                        for v in 0..kw {
                            let wv = weight.data()[wdims.index(o, cl, u, v)];
                            let (lo, hi) = valid_out_range(w, v, s, pw, ow);
                            if lo >= hi {
                                continue;
                            }
                            if s == 1 {
                                let xoff = lo + v - pw;
                                for (oe, &xe) in out_row[lo..hi]
                                    .iter_mut()
                                    .zip(&x_row[xoff..xoff + (hi - lo)])
                                {
                                    *oe += wv * xe;
                                }
                            } else {
                                for oj in lo..hi {
                                    out_row[oj] += wv * x_row[oj * s + v - pw];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

pub struct ConvGrads<T> {
    pub dx: Tensor4<T>,
    pub dw: Tensor4<T>,
    pub db: Option<Tensor4<T>>,
}

/// Backward pass of [`conv2d`]: gradients w.r.t. input, weights and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor4<T>,
    spec: &ConvSpec,
    weight: &Tensor4<T>,
    has_bias: bool,
    dout: &Tensor4<T>,
) -> ConvGrads<T> {
    let (n, h, w) = (x.dims().n, x.dims().h, x.dims().w);
    let (oh, ow) = (dout.dims().h, dout.dims().w);
    let (kh, kw, s) = (spec.kernel_h, spec.kernel_w, spec.stride);
    let (ph, pw) = (spec.pad_h, spec.pad_w);
    let in_per_group = spec.in_channels / spec.groups;
    let out_per_group = spec.out_channels / spec.groups;
    let wdims = weight.dims();

    let db = if has_bias {
        let mut db = Tensor4::zeros(Dims4::new(spec.out_channels, 1, 1, 1));
        db.data_mut()
            .par_iter_mut()
            .enumerate()
            .for_each(|(o, slot)| {
                let mut acc = T::ZERO;
                for b in 0..n {
                    for &g in dout.plane(b, o) {
                        acc += g;
                    }
                }
                *slot = acc;
            });
        Some(db)
    } else {
        None
    };

    // dw: each output channel owns a disjoint weight slice.
    let mut dw = Tensor4::zeros(wdims);
    let per_out = in_per_group * kh * kw;
    dw.data_mut()
        .par_chunks_mut(per_out)
        .enumerate()
        .for_each(|(o, dw_o)| {
            let base_c = (o / out_per_group) * in_per_group;
            for b in 0..n {
                let dout_plane = dout.plane(b, o);
                for cl in 0..in_per_group {
                    let c = base_c + cl;
                    for u in 0..kh {
                        for oi in 0..oh {
                            let yi = (oi * s + u) as isize - ph as isize;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            let x_row = x.row(b, c, yi as usize);
                            let dout_row = &dout_plane[oi * ow..(oi + 1) * ow];
                            for v in 0..kw {
                                let (lo, hi) = valid_out_range(w, v, s, pw, ow);
                                if lo >= hi {
                                    continue;
                                }
                                let mut acc = T::ZERO;
                                if s == 1 {
                                    let xoff = lo + v - pw;
                                    for (&g, &xe) in dout_row[lo..hi]
                                        .iter()
                                        .zip(&x_row[xoff..xoff + (hi - lo)])
                                    {
                                        acc += g * xe;
                                    }
                                } else {
                                    for oj in lo..hi {
                                        acc += dout_row[oj] * x_row[oj * s + v - pw];
                                    }
                                }
                                dw_o[(cl * kh + u) * kw + v] += acc;
                            }
                        }
                    }
                }
            }
        });

    // dx: each (batch, input-channel) plane gathers from its group's outputs.
    let mut dx = Tensor4::zeros(x.dims());
    dx.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane_idx, dx_plane)| {
            let b = plane_idx / spec.in_channels;
            let c = plane_idx % spec.in_channels;
            let g = c / in_per_group;
            let cl = c % in_per_group;
            for o in g * out_per_group..(g + 1) * out_per_group {
                let dout_plane = dout.plane(b, o);
                for oi in 0..oh {
                    let dout_row = &dout_plane[oi * ow..(oi + 1) * ow];
                    for u in 0..kh {
                        let yi = (oi * s + u) as isize - ph as isize;
                        if yi < 0 || yi >= h as isize {
                            continue;
                        }
                        let dx_row = &mut dx_plane[yi as usize * w..(yi as usize + 1) * w];
                        for v in 0..kw {
                            let wv = weight.data()[wdims.index(o, cl, u, v)];
                            let (lo, hi) = valid_out_range(w, v, s, pw, ow);
                            if lo >= hi {
                                continue;
                            }
                            if s == 1 {
                                let xoff = lo + v - pw;
                                for (xe, &g) in dx_row[xoff..xoff + (hi - lo)]
                                    .iter_mut()
                                    .zip(&dout_row[lo..hi])
                                {
                                    *xe += wv * g;
                                }
                            } else {
                                for oj in lo..hi {
                                    dx_row[oj * s + v - pw] += wv * dout_row[oj];
                                }
                            }
                        }
                    }
                }
            }
        });

    ConvGrads { dx, dw, db }
}

// ---------------------------------------------------------------------------
// Linear (per-pixel channel projection)
// ---------------------------------------------------------------------------

/// Per-pixel channel projection; equivalent to a 1x1 conv with groups 1.
pub fn linear<T: Real>(x: &Tensor4<T>, weight: &Tensor4<T>, bias: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (out_f, in_f) = (weight.dims().n, weight.dims().c);
    if x.dims().c != in_f {
        return Err(Error::ChannelMismatch {
            op: "linear",
            expected: in_f,
            actual: x.dims().c,
        });
    }
    if bias.len() != out_f {
        return Err(Error::LengthMismatch {
            expected: out_f,
            actual: bias.len(),
        });
    }
    let (n, h, w) = (x.dims().n, x.dims().h, x.dims().w);
    let mut out = Tensor4::zeros(Dims4::new(n, out_f, h, w));
    out.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane_idx, out_plane)| {
            let b = plane_idx / out_f;
            let o = plane_idx % out_f;
            let bo = bias.data()[o];
            out_plane.iter_mut().for_each(|e| *e = bo);
            for c in 0..in_f {
                let wv = weight.get(o, c, 0, 0);
                for (oe, &xe) in out_plane.iter_mut().zip(x.plane(b, c)) {
                    *oe += wv * xe;
                }
            }
        });
    Ok(out)
}

pub fn linear_backward<T: Real>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    dout: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>, Tensor4<T>) {
    let (out_f, in_f) = (weight.dims().n, weight.dims().c);
    let (n, h, w) = (x.dims().n, x.dims().h, x.dims().w);

    let mut dx = Tensor4::zeros(x.dims());
    dx.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane_idx, dx_plane)| {
            let b = plane_idx / in_f;
            let c = plane_idx % in_f;
            for o in 0..out_f {
                let wv = weight.get(o, c, 0, 0);
                for (xe, &g) in dx_plane.iter_mut().zip(dout.plane(b, o)) {
                    *xe += wv * g;
                }
            }
        });

    let mut dw = Tensor4::zeros(weight.dims());
    dw.data_mut()
        .par_chunks_mut(in_f)
        .enumerate()
        .for_each(|(o, dw_row)| {
            for b in 0..n {
                let dout_plane = dout.plane(b, o);
                for (c, slot) in dw_row.iter_mut().enumerate() {
                    let mut acc = T::ZERO;
                    for (&g, &xe) in dout_plane.iter().zip(x.plane(b, c)) {
                        acc += g * xe;
                    }
                    *slot += acc;
                }
            }
        });

    let mut db = Tensor4::zeros(Dims4::new(out_f, 1, 1, 1));
    for o in 0..out_f {
        let mut acc = T::ZERO;
        for b in 0..n {
            for &g in dout.plane(b, o) {
                acc += g;
            }
        }
        db.data_mut()[o] = acc;
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Scalar math and elementwise activations
// ---------------------------------------------------------------------------

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF via erf.
#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

/// Exact (erf-based) GeLU: x * Phi(x).
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

/// d/dx of GeLU: Phi(x) + x * phi(x).
#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    std_normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Numerically stable logistic sigmoid.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable ln(1 + e^x).
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn gelu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| T::from_f64(gelu_scalar(v.to_f64())))
}

pub fn gelu_backward<T: Real>(x: &Tensor4<T>, dout: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(x.dims());
    for ((d, &xv), &g) in dx.data_mut().iter_mut().zip(x.data()).zip(dout.data()) {
        *d = T::from_f64(gelu_grad_scalar(xv.to_f64())) * g;
    }
    dx
}

pub fn sigmoid<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| T::from_f64(sigmoid_scalar(v.to_f64())))
}

pub fn sigmoid_backward<T: Real>(x: &Tensor4<T>, dout: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(x.dims());
    for ((d, &xv), &g) in dx.data_mut().iter_mut().zip(x.data()).zip(dout.data()) {
        let s = sigmoid_scalar(xv.to_f64());
        *d = T::from_f64(s * (1.0 - s)) * g;
    }
    dx
}

pub fn relu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

pub fn relu_backward<T: Real>(x: &Tensor4<T>, dout: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(x.dims());
    for ((d, &xv), &g) in dx.data_mut().iter_mut().zip(x.data()).zip(dout.data()) {
        *d = if xv > T::ZERO { g } else { T::ZERO };
    }
    dx
}

// ---------------------------------------------------------------------------
// Elementwise binary ops
// ---------------------------------------------------------------------------

fn check_same_shape<T: Real>(op: &'static str, a: &Tensor4<T>, b: &Tensor4<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.dims().as_array(),
            right: b.dims().as_array(),
        });
    }
    Ok(())
}

pub fn add<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_same_shape("add", a, b)?;
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o += bv;
    }
    Ok(out)
}

pub fn mul<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_same_shape("mul", a, b)?;
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= bv;
    }
    Ok(out)
}

pub fn scale<T: Real>(x: &Tensor4<T>, alpha: f64) -> Tensor4<T> {
    let a = T::from_f64(alpha);
    x.map(|v| v * a)
}

pub fn sum_all<T: Real>(x: &Tensor4<T>) -> T {
    let mut acc = T::ZERO;
    for &v in x.data() {
        acc += v;
    }
    acc
}

// ---------------------------------------------------------------------------
// LayerNorm over the channel axis, per spatial location
// ---------------------------------------------------------------------------

/// Normalize the channel vector at each (b, i, j) to zero mean / unit
/// variance (population variance, eps under the square root), then apply
/// the per-channel affine.
pub fn layernorm<T: Real>(x: &Tensor4<T>, p: &LayerNormParams<T>) -> Result<Tensor4<T>> {
    let d = x.dims();
    if p.channels() != d.c {
        return Err(Error::ChannelMismatch {
            op: "layernorm",
            expected: p.channels(),
            actual: d.c,
        });
    }
    let cf = T::from_f64(d.c as f64);
    let mut out = Tensor4::zeros(d);
    let mut mean = vec![T::ZERO; d.w];
    let mut inv = vec![T::ZERO; d.w];
    for b in 0..d.n {
        for i in 0..d.h {
            mean.iter_mut().for_each(|m| *m = T::ZERO);
            for c in 0..d.c {
                for (m, &xv) in mean.iter_mut().zip(x.row(b, c, i)) {
                    *m += xv;
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / cf);
            inv.iter_mut().for_each(|v| *v = T::ZERO);
            for c in 0..d.c {
                for ((v, &xv), &m) in inv.iter_mut().zip(x.row(b, c, i)).zip(mean.iter()) {
                    let dlt = xv - m;
                    *v += dlt * dlt;
                }
            }
            for v in inv.iter_mut() {
                let var = (*v / cf).to_f64();
                *v = T::from_f64(1.0 / (var + p.eps).sqrt());
            }
            for c in 0..d.c {
                let g = p.gamma.data()[c];
                let bta = p.beta.data()[c];
                let start = d.index(b, c, i, 0);
                for j in 0..d.w {
                    let xv = x.data()[start + j];
                    out.data_mut()[start + j] = g * (xv - mean[j]) * inv[j] + bta;
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`layernorm`]: gradients for x, gamma and beta.
pub fn layernorm_backward<T: Real>(
    x: &Tensor4<T>,
    p: &LayerNormParams<T>,
    dout: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>, Tensor4<T>) {
    let d = x.dims();
    let cf = T::from_f64(d.c as f64);
    let mut dx = Tensor4::zeros(d);
    let mut dgamma = Tensor4::zeros(Dims4::new(d.c, 1, 1, 1));
    let mut dbeta = Tensor4::zeros(Dims4::new(d.c, 1, 1, 1));

    let mut mean = vec![T::ZERO; d.w];
    let mut inv = vec![T::ZERO; d.w];
    let mut s1 = vec![T::ZERO; d.w]; // sum over channels of gamma*dout
    let mut s2 = vec![T::ZERO; d.w]; // sum over channels of gamma*dout*xhat
    for b in 0..d.n {
        for i in 0..d.h {
            mean.iter_mut().for_each(|m| *m = T::ZERO);
            for c in 0..d.c {
                for (m, &xv) in mean.iter_mut().zip(x.row(b, c, i)) {
                    *m += xv;
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / cf);
            inv.iter_mut().for_each(|v| *v = T::ZERO);
            for c in 0..d.c {
                for ((v, &xv), &m) in inv.iter_mut().zip(x.row(b, c, i)).zip(mean.iter()) {
                    let dlt = xv - m;
                    *v += dlt * dlt;
                }
            }
            for v in inv.iter_mut() {
                let var = (*v / cf).to_f64();
                *v = T::from_f64(1.0 / (var + p.eps).sqrt());
            }
            s1.iter_mut().for_each(|v| *v = T::ZERO);
            s2.iter_mut().for_each(|v| *v = T::ZERO);
            for c in 0..d.c {
                let gma = p.gamma.data()[c];
                let start = d.index(b, c, i, 0);
                let mut dg = T::ZERO;
                let mut db = T::ZERO;
                for j in 0..d.w {
                    let xhat = (x.data()[start + j] - mean[j]) * inv[j];
                    let g = dout.data()[start + j];
                    dg += g * xhat;
                    db += g;
                    s1[j] += gma * g;
                    s2[j] += gma * g * xhat;
                }
                dgamma.data_mut()[c] += dg;
                dbeta.data_mut()[c] += db;
            }
            for c in 0..d.c {
                let gma = p.gamma.data()[c];
                let start = d.index(b, c, i, 0);
                for j in 0..d.w {
                    let xhat = (x.data()[start + j] - mean[j]) * inv[j];
                    let g = dout.data()[start + j];
                    dx.data_mut()[start + j] =
                        inv[j] * (gma * g - (s1[j] + xhat * s2[j]) / cf);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// Nearest-neighbor upsampling and channel concatenation
// ---------------------------------------------------------------------------

pub fn upsample_nearest<T: Real>(x: &Tensor4<T>, factor: usize) -> Result<Tensor4<T>> {
    if factor == 0 {
        return Err(Error::InvalidSpec("upsample factor must be >= 1".into()));
    }
    let d = x.dims();
    let mut out = Tensor4::zeros(Dims4::new(d.n, d.c, d.h * factor, d.w * factor));
    let od = out.dims();
    for b in 0..d.n {
        for c in 0..d.c {
            for i in 0..od.h {
                let src = x.row(b, c, i / factor);
                let start = od.index(b, c, i, 0);
                let dst = &mut out.data_mut()[start..start + od.w];
                for (j, e) in dst.iter_mut().enumerate() {
                    *e = src[j / factor];
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest_backward<T: Real>(
    in_dims: Dims4,
    factor: usize,
    dout: &Tensor4<T>,
) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(in_dims);
    let od = dout.dims();
    for b in 0..in_dims.n {
        for c in 0..in_dims.c {
            for i in 0..od.h {
                let src = dout.row(b, c, i);
                let start = in_dims.index(b, c, i / factor, 0);
                let dst = &mut dx.data_mut()[start..start + in_dims.w];
                for (j, &g) in src.iter().enumerate() {
                    dst[j / factor] += g;
                }
            }
        }
    }
    dx
}

pub fn concat_channels<T: Real>(parts: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    if parts.is_empty() {
        return Err(Error::InvalidSpec("concat of zero parts".into()));
    }
    let first = parts[0].dims();
    for (idx, p) in parts.iter().enumerate().skip(1) {
        let d = p.dims();
        if d.n != first.n || d.h != first.h || d.w != first.w {
            return Err(Error::InvalidSpec(format!(
                "concat: part {idx} has dims {d}, incompatible with part 0 dims {first}"
            )));
        }
    }
    let total_c: usize = parts.iter().map(|p| p.dims().c).sum();
    let mut out = Tensor4::zeros(Dims4::new(first.n, total_c, first.h, first.w));
    let od = out.dims();
    for b in 0..first.n {
        let mut c_off = 0;
        for p in parts {
            for c in 0..p.dims().c {
                let start = od.plane(b, c_off + c);
                let len = od.plane_len();
                out.data_mut()[start..start + len].copy_from_slice(p.plane(b, c));
            }
            c_off += p.dims().c;
        }
    }
    Ok(out)
}

/// Split an upstream gradient back into per-part gradients.
pub fn concat_channels_backward<T: Real>(part_dims: &[Dims4], dout: &Tensor4<T>) -> Vec<Tensor4<T>> {
    let od = dout.dims();
    let mut grads: Vec<Tensor4<T>> = part_dims.iter().map(|&d| Tensor4::zeros(d)).collect();
    for b in 0..od.n {
        let mut c_off = 0;
        for g in grads.iter_mut() {
            let d = g.dims();
            for c in 0..d.c {
                let start = d.plane(b, c);
                let len = d.plane_len();
                g.data_mut()[start..start + len].copy_from_slice(dout.plane(b, c_off + c));
            }
            c_off += d.c;
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn t(dims: (usize, usize, usize, usize), data: Vec<f64>) -> Tensor4<f64> {
        Tensor4::from_vec(Dims4::new(dims.0, dims.1, dims.2, dims.3), data).unwrap()
    }

    fn random_t(rng: &mut StdRng, dims: Dims4) -> Tensor4<f64> {
        let data = (0..dims.count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor4::from_vec(dims, data).unwrap()
    }

    /// Random small-integer tensor; integer arithmetic keeps f64 exact.
    fn random_int_t(rng: &mut StdRng, dims: Dims4) -> Tensor4<f64> {
        let data = (0..dims.count())
            .map(|_| rng.gen_range(-3i32..=3) as f64)
            .collect();
        Tensor4::from_vec(dims, data).unwrap()
    }

    #[test]
    fn conv_1x1_single() {
        let x = t((1, 1, 1, 1), vec![3.0]);
        let spec = ConvSpec::pointwise(1, 1);
        let w = t((1, 1, 1, 1), vec![2.0]);
        let b = t((1, 1, 1, 1), vec![1.0]);
        let out = conv2d(&x, &spec, &w, Some(&b)).unwrap();
        assert_eq!(out.data(), &[7.0]);
    }

    #[test]
    fn conv_depthwise_identity_kernel() {
        let mut rng = StdRng::seed_from_u64(7);
        let x = random_t(&mut rng, Dims4::new(1, 3, 5, 4));
        let spec = ConvSpec::depthwise(3, 3, 1, 1);
        let mut w = Tensor4::zeros(spec.weight_dims());
        for c in 0..3 {
            w.set(c, 0, 1, 1, 1.0); // center tap only
        }
        let out = conv2d(&x, &spec, &w, None).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn conv_strip_hand_case() {
        // Row [1,2,3], 1x3 all-ones kernel, zero padding: [3, 6, 5].
        let x = t((1, 1, 1, 3), vec![1.0, 2.0, 3.0]);
        let spec = ConvSpec::strip_horizontal(1, 3);
        let w = t((1, 1, 1, 3), vec![1.0, 1.0, 1.0]);
        let out = conv2d(&x, &spec, &w, None).unwrap();
        assert_eq!(out.data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv_groups_equal_independent_slices() {
        let mut rng = StdRng::seed_from_u64(11);
        let groups = 3;
        let x = random_t(&mut rng, Dims4::new(2, 6, 5, 5));
        let spec = ConvSpec {
            in_channels: 6,
            out_channels: 6,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            pad_h: 1,
            pad_w: 1,
            groups,
        };
        let w = random_t(&mut rng, spec.weight_dims());
        let b = random_t(&mut rng, Dims4::new(6, 1, 1, 1));
        let full = conv2d(&x, &spec, &w, Some(&b)).unwrap();

        // Per-group slices, convolved independently with groups=1.
        for g in 0..groups {
            let mut xs = Tensor4::zeros(Dims4::new(2, 2, 5, 5));
            for bi in 0..2 {
                for c in 0..2 {
                    xs.plane_mut(bi, c).copy_from_slice(x.plane(bi, g * 2 + c));
                }
            }
            let sub_spec = ConvSpec {
                in_channels: 2,
                out_channels: 2,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                pad_h: 1,
                pad_w: 1,
                groups: 1,
            };
            let mut ws = Tensor4::zeros(sub_spec.weight_dims());
            let mut bs = Tensor4::zeros(Dims4::new(2, 1, 1, 1));
            for o in 0..2 {
                bs.data_mut()[o] = b.data()[g * 2 + o];
                for c in 0..2 {
                    for u in 0..3 {
                        for v in 0..3 {
                            ws.set(o, c, u, v, w.get(g * 2 + o, c, u, v));
                        }
                    }
                }
            }
            let sub = conv2d(&xs, &sub_spec, &ws, Some(&bs)).unwrap();
            for bi in 0..2 {
                for o in 0..2 {
                    assert_eq!(sub.plane(bi, o), full.plane(bi, g * 2 + o), "group {g}");
                }
            }
        }
    }

    #[test]
    fn strip_pair_equals_outer_product_kernel() {
        // 1xK then Kx1 depthwise == KxK depthwise iff the KxK kernel is the
        // outer product of the strips. Integer-valued data keeps it exact.
        let mut rng = StdRng::seed_from_u64(5);
        for k in [3usize, 5, 7] {
            let c = 4;
            let x = random_int_t(&mut rng, Dims4::new(1, c, 9, 9));
            let kh = random_int_t(&mut rng, ConvSpec::strip_horizontal(c, k).weight_dims());
            let kv = random_int_t(&mut rng, ConvSpec::strip_vertical(c, k).weight_dims());
            let fh = conv2d(&x, &ConvSpec::strip_horizontal(c, k), &kh, None).unwrap();
            let pair = conv2d(&fh, &ConvSpec::strip_vertical(c, k), &kv, None).unwrap();

            let full_spec = ConvSpec::depthwise(c, k, 1, (k - 1) / 2);
            let mut full_w = Tensor4::zeros(full_spec.weight_dims());
            for ch in 0..c {
                for u in 0..k {
                    for v in 0..k {
                        full_w.set(ch, 0, u, v, kv.get(ch, 0, u, 0) * kh.get(ch, 0, 0, v));
                    }
                }
            }
            let full = conv2d(&x, &full_spec, &full_w, None).unwrap();
            assert_eq!(pair, full, "K={k}");
        }
    }

    #[test]
    fn conv_shape_floor_formula_sweep() {
        let x = Tensor4::<f64>::zeros(Dims4::new(1, 1, 9, 11));
        for kernel in [1usize, 3, 7] {
            for stride in [1usize, 2] {
                for pad in [0usize, 1, 3] {
                    let spec = ConvSpec::standard(1, 1, kernel, stride, pad);
                    let w = Tensor4::zeros(spec.weight_dims());
                    match spec.out_spatial(9, 11) {
                        Ok((oh, ow)) => {
                            assert_eq!(oh, (9 + 2 * pad - kernel) / stride + 1);
                            assert_eq!(ow, (11 + 2 * pad - kernel) / stride + 1);
                            let out = conv2d(&x, &spec, &w, None).unwrap();
                            assert_eq!((out.dims().h, out.dims().w), (oh, ow));
                        }
                        Err(_) => {
                            assert!(kernel > 9 + 2 * pad || kernel > 11 + 2 * pad);
                            assert!(conv2d(&x, &spec, &w, None).is_err());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor4::<f64>::zeros(Dims4::new(1, 2, 3, 3));
        let spec = ConvSpec::pointwise(3, 1);
        let w = Tensor4::zeros(spec.weight_dims());
        assert!(matches!(
            conv2d(&x, &spec, &w, None),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn linear_identity_and_dot() {
        let x = t((1, 2, 1, 1), vec![3.0, 4.0]);
        let w_id = t((2, 2, 1, 1), vec![1.0, 0.0, 0.0, 1.0]);
        let b0 = Tensor4::zeros(Dims4::new(2, 1, 1, 1));
        assert_eq!(linear(&x, &w_id, &b0).unwrap(), x);

        let w = t((1, 2, 1, 1), vec![1.0, 1.0]);
        let b = Tensor4::zeros(Dims4::new(1, 1, 1, 1));
        let out = linear(&x, &w, &b).unwrap();
        assert_eq!(out.data(), &[7.0]);
    }

    #[test]
    fn linear_equals_pointwise_conv() {
        let mut rng = StdRng::seed_from_u64(3);
        let x = random_t(&mut rng, Dims4::new(2, 5, 4, 3));
        let w = random_t(&mut rng, Dims4::new(7, 5, 1, 1));
        let b = random_t(&mut rng, Dims4::new(7, 1, 1, 1));
        let via_linear = linear(&x, &w, &b).unwrap();
        let via_conv = conv2d(&x, &ConvSpec::pointwise(5, 7), &w, Some(&b)).unwrap();
        assert_eq!(via_linear, via_conv);
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(1.0) - 0.841345).abs() < 1e-6);
        assert!(gelu_scalar(-10.0).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_reference_values() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(3.0f64.ln()) - 0.75).abs() < 1e-12);
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..50 {
            let x: f64 = rng.gen_range(-20.0..20.0);
            assert!((sigmoid_scalar(x) + sigmoid_scalar(-x) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_constant_and_two_point() {
        let p = LayerNormParams::<f64>::identity(3, 1e-5);
        let x = t((1, 3, 1, 1), vec![4.0, 4.0, 4.0]);
        let out = layernorm(&x, &p).unwrap();
        assert!(out.data().iter().all(|&v| v.abs() < 1e-9));

        let p2 = LayerNormParams::<f64>::identity(2, 1e-12);
        let x2 = t((1, 2, 1, 1), vec![1.0, 3.0]);
        let out2 = layernorm(&x2, &p2).unwrap();
        assert!((out2.data()[0] + 1.0).abs() < 1e-6);
        assert!((out2.data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layernorm_statistics() {
        let mut rng = StdRng::seed_from_u64(21);
        let x = random_t(&mut rng, Dims4::new(1, 16, 6, 5));
        let p = LayerNormParams::<f64>::identity(16, 1e-9);
        let out = layernorm(&x, &p).unwrap();
        for i in 0..6 {
            for j in 0..5 {
                let vals: Vec<f64> = (0..16).map(|c| out.get(0, c, i, j)).collect();
                let mean: f64 = vals.iter().sum::<f64>() / 16.0;
                let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
                assert!(mean.abs() <= 1e-6);
                assert!((var - 1.0).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn upsample_cases() {
        let x = t((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(upsample_nearest(&x, 1).unwrap(), x);
        let up = upsample_nearest(&x, 2).unwrap();
        assert_eq!(up.dims(), Dims4::new(1, 1, 4, 4));
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(up.get(0, 0, i, j), x.get(0, 0, i / 2, j / 2));
            }
        }
        assert_eq!(sum_all(&up), 4.0 * sum_all(&x));
    }

    #[test]
    fn concat_cases() {
        let mut rng = StdRng::seed_from_u64(17);
        let a = random_t(&mut rng, Dims4::new(1, 2, 3, 3));
        let b = random_t(&mut rng, Dims4::new(1, 3, 3, 3));
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.dims().c, 5);
        assert_eq!(cat.plane(0, 0), a.plane(0, 0));
        assert_eq!(cat.plane(0, 2), b.plane(0, 0));

        let bad = random_t(&mut rng, Dims4::new(1, 1, 4, 3));
        let err = concat_channels(&[&a, &bad]).unwrap_err();
        assert!(err.to_string().contains("part 1"), "{err}");
    }

    #[test]
    fn elementwise_cases() {
        let a = t((1, 3, 1, 1), vec![1.0, 2.0, 3.0]);
        let b = t((1, 3, 1, 1), vec![4.0, 5.0, 6.0]);
        assert_eq!(mul(&a, &b).unwrap().data(), &[4.0, 10.0, 18.0]);
        let zeros = Tensor4::zeros(a.dims());
        let ones = Tensor4::filled(a.dims(), 1.0);
        assert_eq!(add(&a, &zeros).unwrap(), a);
        assert_eq!(mul(&a, &ones).unwrap(), a);
        let bad = Tensor4::<f64>::zeros(Dims4::new(1, 2, 1, 1));
        assert!(matches!(add(&a, &bad), Err(Error::ShapeMismatch { .. })));
    }
}
