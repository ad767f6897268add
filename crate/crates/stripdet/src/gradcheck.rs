//! Finite-difference certification of every differentiable operation.
//!
//! `gradcheck` compares a tape backward pass against central differences at
//! one point; `run_suite` instantiates a named case per primitive (each
//! differentiable argument separately) plus the composed attention module,
//! block, downsample and head.

use crate::attention::{sab_forward, sam_forward, SabParams, SamParams};
use crate::backbone::{downsample_forward, DownsampleParams};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::head::{head_forward, HeadParams};
use crate::ops::ConvSpec;
use crate::seed::{stream_rng, STREAM_GRADCHECK};
use crate::tape::{Tape, ValueId};
use crate::tensor::{Dims4, Tensor4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Central finite-difference step (balances truncation and round-off at
/// 64-bit precision).
pub const FD_STEP: f64 = 1e-4;

/// Denominator guard for the relative error.
const REL_EPS: f64 = 1e-12;

type CheckFn = Box<dyn Fn(&mut Tape<f64>, ValueId) -> Result<ValueId>>;

fn tape_gradient<F>(f: &F, x: &Tensor4<f64>) -> Result<Tensor4<f64>>
where
    F: Fn(&mut Tape<f64>, ValueId) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let id = tape.leaf(x.clone());
    let out = f(&mut tape, id)?;
    let v = tape.value(out);
    if v.dims().count() != 1 {
        return Err(Error::NonScalarLoss {
            dims: v.dims().as_array(),
        });
    }
    if !v.scalar_value().is_finite() {
        return Err(Error::NonFinite("gradcheck objective".into()));
    }
    let grads = tape.backward(out)?;
    Ok(match grads.get(id) {
        Some(g) => g.clone(),
        None => Tensor4::zeros(x.dims()),
    })
}

/// Maximum relative error between the tape gradient of `f` at `x` and a
/// central finite difference with the given step.
///
/// `f` must map the slot of `x` to a scalar slot on the same tape.
pub fn gradcheck<F>(f: F, x: &Tensor4<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, ValueId) -> Result<ValueId>,
{
    if step <= 0.0 {
        return Err(Error::InvalidSpec("finite-difference step must be > 0".into()));
    }
    let eval = |point: &Tensor4<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let id = tape.constant(point.clone());
        let out = f(&mut tape, id)?;
        let v = tape.value(out);
        if v.dims().count() != 1 {
            return Err(Error::NonScalarLoss {
                dims: v.dims().as_array(),
            });
        }
        let s = v.scalar_value();
        if !s.is_finite() {
            return Err(Error::NonFinite("gradcheck objective".into()));
        }
        Ok(s)
    };

    let analytic = tape_gradient(&f, x)?;

    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_EPS);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: Dims4, lo: f64, hi: f64) -> Tensor4<f64> {
    let data = (0..dims.count()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor4::from_vec(dims, data).unwrap()
}

/// Random values in [-2, 2] kept away from zero, for kinked ops (ReLU).
fn random_away_from_zero(rng: &mut ChaCha8Rng, dims: Dims4) -> Tensor4<f64> {
    let data = (0..dims.count())
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor4::from_vec(dims, data).unwrap()
}

/// Random values whose pairwise gaps within each (pillar, channel) row
/// exceed the finite-difference step comfortably, so the max is stable.
fn random_with_gaps(rng: &mut ChaCha8Rng, dims: Dims4, counts: &[usize]) -> Tensor4<f64> {
    let mut t = Tensor4::zeros(dims);
    for p in 0..dims.n {
        for c in 0..dims.c {
            'draw: loop {
                let vals: Vec<f64> = (0..dims.w).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = counts[p];
                for i in 0..n {
                    for j in i + 1..n {
                        if (vals[i] - vals[j]).abs() < 1e-2 {
                            continue 'draw;
                        }
                    }
                }
                for (k, &v) in vals.iter().enumerate() {
                    t.set(p, c, 0, k, v);
                }
                break;
            }
        }
    }
    t
}

struct Case {
    name: &'static str,
    input: Tensor4<f64>,
    f: CheckFn,
}

/// Central differences at the fixed step resolve gradients down to roughly
/// the truncation error of a sum-of-many-outputs objective; elements with a
/// (nonzero) gradient below this floor make the relative-error metric
/// meaningless rather than the backward rule wrong.
const GRAD_FLOOR: f64 = 5e-3;

/// Deterministically move input elements off near-stationary points.
/// Structural zeros (elements the objective does not depend on) keep an
/// exactly-zero gradient and are left alone.
fn condition_input<F>(f: &F, input: &mut Tensor4<f64>) -> Result<()>
where
    F: Fn(&mut Tape<f64>, ValueId) -> Result<ValueId>,
{
    for _ in 0..25 {
        let g = tape_gradient(f, input)?;
        let mut nudged = false;
        for (slot, &gv) in input.data_mut().iter_mut().zip(g.data()) {
            if gv != 0.0 && gv.abs() < GRAD_FLOOR {
                *slot += 0.21;
                nudged = true;
            }
        }
        if !nudged {
            return Ok(());
        }
    }
    Ok(())
}

fn conv_cases(rng: &mut ChaCha8Rng, cases: &mut Vec<Case>) {
    let variants: Vec<(&'static str, ConvSpec)> = vec![
        ("conv_std3x3", ConvSpec::standard(8, 5, 3, 1, 1)),
        ("conv_dw3x3", ConvSpec::depthwise(8, 3, 1, 1)),
        ("conv_pw", ConvSpec::pointwise(8, 6)),
        ("conv_strip_1xk", ConvSpec::strip_horizontal(8, 7)),
        ("conv_strip_kx1", ConvSpec::strip_vertical(8, 7)),
        ("conv_stride2", ConvSpec::standard(8, 4, 3, 2, 1)),
    ];
    let x_dims = Dims4::new(1, 8, 6, 6);
    for (name, spec) in variants {
        let x = random_tensor(rng, x_dims, -1.0, 1.0);
        let w = random_tensor(rng, spec.weight_dims(), -1.0, 1.0);
        let b = random_tensor(rng, Dims4::new(spec.out_channels, 1, 1, 1), -0.5, 0.5);

        let (wc, bc, xc) = (w.clone(), b.clone(), x.clone());
        cases.push(Case {
            name: leak(format!("{name}.x")),
            input: x.clone(),
            f: Box::new(move |tape, xid| {
                let wid = tape.constant(wc.clone());
                let bid = tape.constant(bc.clone());
                let y = tape.conv2d(xid, wid, Some(bid), spec)?;
                Ok(tape.sum(y))
            }),
        });
        let (bc2, xc2) = (b.clone(), xc.clone());
        cases.push(Case {
            name: leak(format!("{name}.w")),
            input: w.clone(),
            f: Box::new(move |tape, wid| {
                let xid = tape.constant(xc2.clone());
                let bid = tape.constant(bc2.clone());
                let y = tape.conv2d(xid, wid, Some(bid), spec)?;
                Ok(tape.sum(y))
            }),
        });
        let (wc3, xc3) = (w.clone(), x.clone());
        cases.push(Case {
            name: leak(format!("{name}.b")),
            input: b,
            f: Box::new(move |tape, bid| {
                let xid = tape.constant(xc3.clone());
                let wid = tape.constant(wc3.clone());
                let y = tape.conv2d(xid, wid, Some(bid), spec)?;
                Ok(tape.sum(y))
            }),
        });
    }
}

/// Case names are built once per suite; leaking them keeps the Case type
/// simple ('static strs) at a trivial, bounded cost.
fn leak(s: String) -> &'static str {
    Box::leak(s.into_boxed_str())
}

/// Build the full suite at one seed and return (name, max relative error)
/// per case.
pub fn run_suite(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = stream_rng(seed, STREAM_GRADCHECK);
    let dims = Dims4::new(1, 8, 6, 6);
    let mut cases: Vec<Case> = Vec::new();

    cases.push(Case {
        name: "sum",
        input: random_tensor(&mut rng, dims, -2.0, 2.0),
        f: Box::new(|tape, x| Ok(tape.sum(x))),
    });

    let partner = random_tensor(&mut rng, dims, -1.0, 1.0);
    let (p1, p2) = (partner.clone(), partner.clone());
    cases.push(Case {
        name: "add.lhs",
        input: random_tensor(&mut rng, dims, -1.0, 1.0),
        f: Box::new(move |tape, x| {
            let c = tape.constant(p1.clone());
            let y = tape.add(x, c)?;
            Ok(tape.sum(y))
        }),
    });
    cases.push(Case {
        name: "mul.lhs",
        input: random_tensor(&mut rng, dims, -1.0, 1.0),
        f: Box::new(move |tape, x| {
            let c = tape.constant(p2.clone());
            let y = tape.mul(x, c)?;
            Ok(tape.sum(y))
        }),
    });
    cases.push(Case {
        name: "mul.both",
        input: random_tensor(&mut rng, dims, -1.0, 1.0),
        f: Box::new(|tape, x| {
            let y = tape.mul(x, x)?;
            Ok(tape.sum(y))
        }),
    });
    cases.push(Case {
        name: "scale",
        input: random_tensor(&mut rng, dims, -1.0, 1.0),
        f: Box::new(|tape, x| {
            let s = tape.sum(x);
            Ok(tape.scale(s, -1.7))
        }),
    });

    conv_cases(&mut rng, &mut cases);

    // Linear: x, w, b.
    {
        let x = random_tensor(&mut rng, dims, -1.0, 1.0);
        let w = random_tensor(&mut rng, Dims4::new(5, 8, 1, 1), -1.0, 1.0);
        let b = random_tensor(&mut rng, Dims4::new(5, 1, 1, 1), -0.5, 0.5);
        let (wc, bc) = (w.clone(), b.clone());
        cases.push(Case {
            name: "linear.x",
            input: x.clone(),
            f: Box::new(move |tape, xid| {
                let wid = tape.constant(wc.clone());
                let bid = tape.constant(bc.clone());
                let y = tape.linear(xid, wid, bid)?;
                Ok(tape.sum(y))
            }),
        });
        let (xc, bc2) = (x.clone(), b.clone());
        cases.push(Case {
            name: "linear.w",
            input: w.clone(),
            f: Box::new(move |tape, wid| {
                let xid = tape.constant(xc.clone());
                let bid = tape.constant(bc2.clone());
                let y = tape.linear(xid, wid, bid)?;
                Ok(tape.sum(y))
            }),
        });
        let (xc2, wc2) = (x, w);
        cases.push(Case {
            name: "linear.b",
            input: b,
            f: Box::new(move |tape, bid| {
                let xid = tape.constant(xc2.clone());
                let wid = tape.constant(wc2.clone());
                let y = tape.linear(xid, wid, bid)?;
                Ok(tape.sum(y))
            }),
        });
    }

    // GeLU's derivative crosses zero near x = -0.7518; relative error is
    // meaningless against a ~0 denominator, so keep draws off that point.
    let gelu_input = {
        let data = (0..dims.count())
            .map(|_| loop {
                let v: f64 = rng.gen_range(-2.0..2.0);
                if (v + 0.7518).abs() > 0.05 {
                    break v;
                }
            })
            .collect();
        Tensor4::from_vec(dims, data).unwrap()
    };
    cases.push(Case {
        name: "gelu",
        input: gelu_input,
        f: Box::new(|tape, x| {
            let y = tape.gelu(x);
            Ok(tape.sum(y))
        }),
    });
    cases.push(Case {
        name: "sigmoid",
        input: random_tensor(&mut rng, dims, -3.0, 3.0),
        f: Box::new(|tape, x| {
            let y = tape.sigmoid(x);
            let sq = tape.mul(y, y)?; // exercise non-trivial upstream grads
            Ok(tape.sum(sq))
        }),
    });
    cases.push(Case {
        name: "relu",
        input: random_away_from_zero(&mut rng, dims),
        f: Box::new(|tape, x| {
            let y = tape.relu(x);
            Ok(tape.sum(y))
        }),
    });

    // LayerNorm: x, gamma, beta.
    {
        let x = random_tensor(&mut rng, dims, -1.5, 1.5);
        let gamma = random_tensor(&mut rng, Dims4::new(8, 1, 1, 1), 0.5, 1.5);
        let beta = random_tensor(&mut rng, Dims4::new(8, 1, 1, 1), -0.5, 0.5);
        let up = random_tensor(&mut rng, dims, -1.0, 1.0);
        let (gc, bc, uc) = (gamma.clone(), beta.clone(), up.clone());
        cases.push(Case {
            name: "layernorm.x",
            input: x.clone(),
            f: Box::new(move |tape, xid| {
                let g = tape.constant(gc.clone());
                let b = tape.constant(bc.clone());
                let y = tape.layernorm(xid, g, b, 1e-5)?;
                // Weight the output so the gradient is not constant.
                let u = tape.constant(uc.clone());
                let yw = tape.mul(y, u)?;
                Ok(tape.sum(yw))
            }),
        });
        let (xc, bc2, uc2) = (x.clone(), beta.clone(), up.clone());
        cases.push(Case {
            name: "layernorm.gamma",
            input: gamma.clone(),
            f: Box::new(move |tape, gid| {
                let xid = tape.constant(xc.clone());
                let b = tape.constant(bc2.clone());
                let y = tape.layernorm(xid, gid, b, 1e-5)?;
                let u = tape.constant(uc2.clone());
                let yw = tape.mul(y, u)?;
                Ok(tape.sum(yw))
            }),
        });
        let (xc2, gc2, uc3) = (x, gamma, up);
        cases.push(Case {
            name: "layernorm.beta",
            input: beta,
            f: Box::new(move |tape, bid| {
                let xid = tape.constant(xc2.clone());
                let g = tape.constant(gc2.clone());
                let y = tape.layernorm(xid, g, bid, 1e-5)?;
                let u = tape.constant(uc3.clone());
                let yw = tape.mul(y, u)?;
                Ok(tape.sum(yw))
            }),
        });
    }

    {
        let up = random_tensor(&mut rng, Dims4::new(1, 8, 12, 12), -1.0, 1.0);
        cases.push(Case {
            name: "upsample2",
            input: random_tensor(&mut rng, dims, -1.0, 1.0),
            f: Box::new(move |tape, x| {
                let y = tape.upsample_nearest(x, 2)?;
                let u = tape.constant(up.clone());
                let yw = tape.mul(y, u)?;
                Ok(tape.sum(yw))
            }),
        });
    }

    {
        let a = random_tensor(&mut rng, Dims4::new(1, 3, 6, 6), -1.0, 1.0);
        let b = random_tensor(&mut rng, Dims4::new(1, 2, 6, 6), -1.0, 1.0);
        let up = random_tensor(&mut rng, Dims4::new(1, 13, 6, 6), -1.0, 1.0);
        cases.push(Case {
            name: "concat.mid",
            input: random_tensor(&mut rng, dims, -1.0, 1.0),
            f: Box::new(move |tape, x| {
                let ac = tape.constant(a.clone());
                let bc = tape.constant(b.clone());
                let y = tape.concat_channels(&[ac, x, bc])?;
                let u = tape.constant(up.clone());
                let yw = tape.mul(y, u)?;
                Ok(tape.sum(yw))
            }),
        });
    }

    {
        let counts = vec![1usize, 3, 6, 4];
        let md = Dims4::new(4, 5, 1, 6);
        let input = random_with_gaps(&mut rng, md, &counts);
        cases.push(Case {
            name: "masked_max",
            input,
            f: Box::new(move |tape, x| {
                let y = tape.masked_max_points(x, counts.clone())?;
                Ok(tape.sum(y))
            }),
        });
    }

    {
        let coords = vec![(0usize, 0usize), (2, 3), (5, 1), (3, 3)];
        let up = random_tensor(&mut rng, Dims4::new(1, 5, 6, 4), -1.0, 1.0);
        cases.push(Case {
            name: "scatter_bev",
            input: random_tensor(&mut rng, Dims4::new(4, 5, 1, 1), -1.0, 1.0),
            f: Box::new(move |tape, x| {
                let y = tape.scatter_bev(x, coords.clone(), 6, 4)?;
                let u = tape.constant(up.clone());
                let yw = tape.mul(y, u)?;
                Ok(tape.sum(yw))
            }),
        });
    }

    // Losses.
    {
        let n = dims.count();
        let targets: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        mask[0] = true;
        let norm = targets.iter().zip(&mask).filter(|(&t, &m)| t && m).count().max(1) as f64;
        cases.push(Case {
            name: "focal_loss",
            input: random_tensor(&mut rng, dims, -2.5, 2.5),
            f: Box::new(move |tape, x| {
                tape.focal_loss(x, targets.clone(), mask.clone(), 0.25, 2.0, norm)
            }),
        });
    }
    {
        let pd = Dims4::new(1, 14, 6, 6);
        let pred = random_tensor(&mut rng, pd, -2.0, 2.0);
        // Keep |pred - target| away from the quadratic/linear switch.
        let target: Vec<f64> = pred
            .data()
            .iter()
            .map(|&p| loop {
                let t = p - rng.gen_range(-2.0f64..2.0);
                let d = (p - t).abs();
                if (d - 1.0).abs() > 1e-2 {
                    break t;
                }
            })
            .collect();
        let mask: Vec<bool> = (0..pd.count()).map(|_| rng.gen_bool(0.6)).collect();
        let norm = mask.iter().filter(|&&m| m).count().max(1) as f64;
        cases.push(Case {
            name: "smooth_l1",
            input: pred,
            f: Box::new(move |tape, x| {
                tape.smooth_l1(x, target.clone(), mask.clone(), 1.0, norm)
            }),
        });
    }
    {
        let ld = Dims4::new(1, 4, 6, 6); // two anchors
        let n_el = 2 * 6 * 6;
        let bins: Vec<u8> = (0..n_el).map(|_| u8::from(rng.gen_bool(0.5))).collect();
        let mut mask: Vec<bool> = (0..n_el).map(|_| rng.gen_bool(0.5)).collect();
        mask[7] = true;
        let norm = mask.iter().filter(|&&m| m).count() as f64;
        cases.push(Case {
            name: "dir_cross_entropy",
            input: random_tensor(&mut rng, ld, -2.0, 2.0),
            f: Box::new(move |tape, x| {
                tape.dir_cross_entropy(x, bins.clone(), mask.clone(), norm)
            }),
        });
    }

    // Composed modules.
    {
        let sam = SamParams::<f64>::random(8, 7, true, &mut rng);
        cases.push(Case {
            name: "sam.x",
            input: random_tensor(&mut rng, dims, -1.0, 1.0),
            f: Box::new(move |tape, x| {
                let lifted = sam.lift(tape, false);
                let y = sam_forward(tape, x, &lifted)?;
                Ok(tape.sum(y))
            }),
        });
    }
    {
        let sab = SabParams::<f64>::random(8, 7, true, &mut rng);
        cases.push(Case {
            name: "sab.x",
            input: random_tensor(&mut rng, dims, -1.0, 1.0),
            f: Box::new(move |tape, x| {
                let lifted = sab.lift(tape, false);
                let y = sab_forward(tape, x, &lifted)?;
                Ok(tape.sum(y))
            }),
        });
    }
    {
        let down = DownsampleParams::<f64>::random(8, 6, true, &mut rng);
        cases.push(Case {
            name: "downsample.x",
            input: random_tensor(&mut rng, dims, -1.0, 1.0),
            f: Box::new(move |tape, x| {
                let lifted = down.lift(tape, false);
                let y = downsample_forward(tape, x, &lifted)?;
                Ok(tape.sum(y))
            }),
        });
    }
    {
        let mut cfg = ModelConfig::toy();
        cfg.stage_channels = [2, 2, 4]; // fused channels 8
        cfg.head_channels = 4;
        let head = HeadParams::<f64>::random(&cfg, &mut rng);
        cases.push(Case {
            name: "head.x",
            input: random_tensor(&mut rng, dims, -1.0, 1.0),
            f: Box::new(move |tape, x| {
                let lifted = head.lift(tape, false);
                let out = head_forward(tape, x, &lifted)?;
                let s1 = tape.sum(out.cls);
                let s2 = tape.sum(out.bbox);
                let s3 = tape.sum(out.dir);
                let s12 = tape.add(s1, s2)?;
                tape.add(s12, s3)
            }),
        });
    }

    let mut results = Vec::with_capacity(cases.len());
    for mut case in cases {
        // Loss objectives are small in magnitude, so their small gradients
        // stay resolvable; everything else gets moved off near-stationary
        // input elements before checking.
        let is_loss = matches!(case.name, "focal_loss" | "smooth_l1" | "dir_cross_entropy");
        if !is_loss {
            condition_input(&case.f, &mut case.input)?;
        }
        let err = gradcheck(&case.f, &case.input, FD_STEP)?;
        results.push((case.name.to_string(), err));
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_exact() {
        let mut rng = stream_rng(0, STREAM_GRADCHECK);
        let x = random_tensor(&mut rng, Dims4::new(1, 3, 4, 4), -2.0, 2.0);
        let err = gradcheck(|tape, x| Ok(tape.sum(x)), &x, FD_STEP).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn gelu_gradient_tight() {
        let mut rng = stream_rng(1, STREAM_GRADCHECK);
        let x = random_tensor(&mut rng, Dims4::new(1, 4, 5, 5), -2.0, 2.0);
        let err = gradcheck(
            |tape, x| {
                let y = tape.gelu(x);
                Ok(tape.sum(y))
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn conv_gradient_tight() {
        let mut rng = stream_rng(2, STREAM_GRADCHECK);
        let spec = ConvSpec::standard(3, 2, 3, 1, 1);
        let x = random_tensor(&mut rng, Dims4::new(1, 3, 5, 5), -1.0, 1.0);
        let w = random_tensor(&mut rng, spec.weight_dims(), -1.0, 1.0);
        let err = gradcheck(
            move |tape, xid| {
                let wid = tape.constant(w.clone());
                let y = tape.conv2d(xid, wid, None, spec)?;
                Ok(tape.sum(y))
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor4::filled(Dims4::new(1, 1, 1, 1), 1.0e308);
        let r = gradcheck(
            |tape, x| {
                let y = tape.mul(x, x)?; // overflows to inf
                Ok(tape.sum(y))
            },
            &x,
            FD_STEP,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn full_suite_passes_at_seed_zero() {
        let results = run_suite(0).unwrap();
        assert!(results.len() >= 30);
        for (name, err) in results {
            assert!(err <= 1e-5, "{name}: {err}");
        }
    }
}
