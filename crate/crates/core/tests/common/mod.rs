//! Finite-difference gradient checks shared by the test targets.
#![allow(dead_code)]

use catpress::arch::PadMode;
use catpress::ka::{ka_f64, ka_grad, ka_grad_f64, FeatureMatrix, Mat};
use catpress::tensor::{Scalar, Tape, Tensor, Var};
use catpress::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const F32_TOL: f64 = 1e-3;
pub const F64_TOL: f64 = 1e-6;
pub const INSTANCES: usize = 20;
pub const GRAD_SEED: u64 = 0x6AD;

/// Central-difference step, applied to f64 copies of the inputs.
const STEP: f64 = 1e-5;

pub const OPS: &[&str] = &[
    "conv2d",
    "depthwise_conv2d",
    "conv_transpose2d",
    "instance_norm",
    "batch_norm",
    "norm_fixed",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "scale",
    "add",
    "concat_channels",
    "sum",
    "l1",
    "mse",
    "bce_with_logits",
    "ka",
    "weighted_sum",
];

/// A scalar-valued function of several tensors, built from one op.
pub struct GradCase {
    pub inputs: Vec<Tensor<f64>>,
    build: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>,
    build32: Box<dyn Fn(&mut Tape<f32>, &[Var]) -> Result<Var>>,
}

fn tensor<R: Rng>(rng: &mut R, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Entries bounded away from zero, so kinks at zero are not straddled.
fn away_from_zero<R: Rng>(rng: &mut R, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn cast<T: Scalar>(t: &Tensor<f64>) -> Tensor<T> {
    t.cast::<T>()
}

/// Wraps an op producing a tensor into `mse(op(..), target)`.
macro_rules! case {
    ($inputs:expr, $target:expr, |$tape:ident, $v:ident| $body:expr) => {{
        let target: Option<Tensor<f64>> = $target;
        let t64 = target.clone();
        let t32 = target.map(|t| cast::<f32>(&t));
        GradCase {
            inputs: $inputs,
            build: Box::new(move |$tape: &mut Tape<f64>, $v: &[Var]| {
                let out = $body?;
                match &t64 {
                    Some(t) => {
                        let c = $tape.constant(t.clone());
                        $tape.mse(out, c)
                    }
                    None => Ok(out),
                }
            }),
            build32: Box::new(move |$tape: &mut Tape<f32>, $v: &[Var]| {
                let out = $body?;
                match &t32 {
                    Some(t) => {
                        let c = $tape.constant(t.clone());
                        $tape.mse(out, c)
                    }
                    None => Ok(out),
                }
            }),
        }
    }};
}

/// Builds instance `index` of `op`. Convolution instances cycle through
/// geometries that select each dense loop order.
pub fn make_case(op: &str, index: usize) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(GRAD_SEED);
    rng.set_stream(index as u64 * 97 + OPS.iter().position(|&o| o == op).expect("known op") as u64);
    let r = &mut rng;
    let n = r.gen_range(1..=2);
    match op {
        "conv2d" => {
            let (cin, cout, size) = match index % 3 {
                0 => (r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(5..=8)),
                1 => (r.gen_range(1..=4), r.gen_range(16..=18), r.gen_range(3..=5)),
                _ => (r.gen_range(16..=18), r.gen_range(1..=4), r.gen_range(3..=5)),
            };
            let k = [1, 3][r.gen_range(0..2)];
            let stride = r.gen_range(1..=2);
            let pad = if r.gen_bool(0.7) { k / 2 } else { 0 };
            let mode = if pad > 0 && r.gen_bool(0.5) { PadMode::Reflect } else { PadMode::Zero };
            let bias = r.gen_bool(0.5);
            let x = tensor(r, [n, cin, size, size]);
            let w = tensor(r, [cout, cin, k, k]);
            let b = tensor(r, [1, cout, 1, 1]);
            let o = (size + 2 * pad - k) / stride + 1;
            let target = Some(tensor(r, [n, cout, o, o]));
            let inputs = if bias { vec![x, w, b] } else { vec![x, w] };
            case!(inputs, target, |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad, mode))
        }
        "depthwise_conv2d" => {
            let c = r.gen_range(1..=4);
            let k = [3, 5][r.gen_range(0..2)];
            let size = r.gen_range(5..=7);
            let stride = r.gen_range(1..=2);
            let pad = k / 2;
            let mode = if r.gen_bool(0.5) { PadMode::Reflect } else { PadMode::Zero };
            let x = tensor(r, [n, c, size, size]);
            let w = tensor(r, [c, 1, k, k]);
            let o = (size + 2 * pad - k) / stride + 1;
            let target = Some(tensor(r, [n, c, o, o]));
            case!(vec![x, w], target, |t, v| t.depthwise_conv2d(v[0], v[1], stride, pad, mode))
        }
        "conv_transpose2d" => {
            let (cin, cout) = if index % 2 == 0 {
                (r.gen_range(1..=4), r.gen_range(1..=4))
            } else {
                (r.gen_range(16..=18), r.gen_range(16..=18))
            };
            let k = 3;
            let stride = r.gen_range(1..=2);
            let pad = 1;
            let out_pad = stride - 1;
            let size = r.gen_range(2..=4);
            let x = tensor(r, [n, cin, size, size]);
            let w = tensor(r, [cin, cout, k, k]);
            let b = tensor(r, [1, cout, 1, 1]);
            let o = (size - 1) * stride + k + out_pad - 2 * pad;
            let target = Some(tensor(r, [n, cout, o, o]));
            case!(vec![x, w, b], target, |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad, out_pad))
        }
        "instance_norm" | "batch_norm" | "norm_fixed" => {
            let n = if op == "batch_norm" { r.gen_range(2..=3) } else { n };
            let c = r.gen_range(1..=3);
            let x = tensor(r, [n, c, 3, 3]);
            let g = tensor(r, [1, c, 1, 1]);
            let b = tensor(r, [1, c, 1, 1]);
            let target = Some(tensor(r, [n, c, 3, 3]));
            let mean: Vec<f64> = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| r.gen_range(0.5..2.0)).collect();
            match op {
                "instance_norm" => case!(vec![x, g, b], target, |t, v| t.instance_norm(v[0], v[1], v[2])),
                "batch_norm" => case!(vec![x, g, b], target, |t, v| t.batch_norm(v[0], v[1], v[2]).map(|r| r.0)),
                _ => {
                    let (m32, v32): (Vec<f32>, Vec<f32>) =
                        (mean.iter().map(|&v| v as f32).collect(), var.iter().map(|&v| v as f32).collect());
                    let (m64, v64) = (mean.clone(), var.clone());
                    let target32 = target.as_ref().map(cast::<f32>);
                    let target64 = target.clone();
                    GradCase {
                        inputs: vec![x, g, b],
                        build: Box::new(move |t, v| {
                            let y = t.norm_fixed(v[0], v[1], v[2], &m64, &v64)?;
                            let c = t.constant(target64.clone().unwrap());
                            t.mse(y, c)
                        }),
                        build32: Box::new(move |t, v| {
                            let y = t.norm_fixed(v[0], v[1], v[2], &m32, &v32)?;
                            let c = t.constant(target32.clone().unwrap());
                            t.mse(y, c)
                        }),
                    }
                }
            }
        }
        "relu" | "leaky_relu" | "tanh" | "sigmoid" | "scale" | "sum" => {
            let shape = [n, r.gen_range(1..=3), 3, 3];
            let x = away_from_zero(r, shape);
            let target = Some(tensor(r, shape));
            let s = r.gen_range(-2.0..2.0);
            match op {
                "relu" => case!(vec![x], target, |t, v| Ok::<_, catpress::Error>(t.relu(v[0]))),
                "leaky_relu" => case!(vec![x], target, |t, v| Ok::<_, catpress::Error>(t.leaky_relu(v[0], 0.2))),
                "tanh" => case!(vec![x], target, |t, v| Ok::<_, catpress::Error>(t.tanh(v[0]))),
                "sigmoid" => case!(vec![x], target, |t, v| Ok::<_, catpress::Error>(t.sigmoid(v[0]))),
                "scale" => case!(vec![x], target, |t, v| Ok::<_, catpress::Error>(t.scale(v[0], s))),
                _ => case!(vec![x], Some(Tensor::full([1, 1, 1, 1], 0.3)), |t, v| Ok::<_, catpress::Error>(t.sum(v[0]))),
            }
        }
        "add" | "concat_channels" | "l1" | "mse" => {
            let shape = [n, r.gen_range(1..=3), 3, 3];
            let a = tensor(r, shape);
            match op {
                "add" => {
                    let b = tensor(r, shape);
                    let target = Some(tensor(r, shape));
                    case!(vec![a, b], target, |t, v| t.add(v[0], v[1]))
                }
                "concat_channels" => {
                    let c2 = r.gen_range(1..=3);
                    let b = tensor(r, [n, c2, 3, 3]);
                    let target = Some(tensor(r, [n, shape[1] + c2, 3, 3]));
                    case!(vec![a, b], target, |t, v| t.concat_channels(&[v[0], v[1]]))
                }
                "l1" => {
                    let gap = away_from_zero(r, shape);
                    let b = Tensor::from_fn(shape, |i| a.data()[i] + gap.data()[i]);
                    case!(vec![a, b], None, |t, v| t.l1(v[0], v[1]))
                }
                _ => {
                    let b = tensor(r, shape);
                    case!(vec![a, b], None, |t, v| t.mse(v[0], v[1]))
                }
            }
        }
        "bce_with_logits" => {
            let x = Tensor::from_fn([n, 1, 3, 3], |_| r.gen_range(-3.0..3.0));
            let target = if r.gen_bool(0.5) { 1.0 } else { 0.0 };
            case!(vec![x], None, |t, v| Ok::<_, catpress::Error>(t.bce_with_logits(v[0], target)))
        }
        "ka" => {
            let rows = r.gen_range(2..=4);
            let (cx, cy) = (r.gen_range(1..=3), r.gen_range(1..=3));
            let x = tensor(r, [rows, cx, 2, 2]);
            let y = tensor(r, [rows, cy, 2, 2]);
            case!(vec![x, y], None, |t, v| t.ka(v[0], v[1]))
        }
        "weighted_sum" => {
            let a = tensor(r, [n, 2, 2, 2]);
            let b = tensor(r, [n, 2, 2, 2]);
            let (wa, wb) = (r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0));
            case!(vec![a, b], None, |t, v| {
                let (sa, sb) = (t.sum(v[0]), t.tanh(v[1]));
                let sb = t.sum(sb);
                t.weighted_sum(&[(sa, wa), (sb, wb)])
            })
        }
        other => panic!("no gradient case for {other}"),
    }
}

fn loss_value(case: &GradCase, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars).expect("case builds");
    tape.value(out).item()
}

fn numeric_grad(case: &GradCase) -> Vec<f64> {
    let mut inputs = case.inputs.clone();
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + STEP;
            let up = loss_value(case, &inputs);
            inputs[i].data_mut()[j] = orig - STEP;
            let down = loss_value(case, &inputs);
            inputs[i].data_mut()[j] = orig;
            out.push((up - down) / (2.0 * STEP));
        }
    }
    out
}

fn analytic<T: Scalar>(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>) -> Vec<f64> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(cast::<T>(t))).collect();
    let loss = build(&mut tape, &vars).expect("case builds");
    let grads = tape.backward(loss).expect("backward");
    vars.iter()
        .flat_map(|&v| grads.get(v).expect("input gradient").data().iter().map(|x| x.f64()).collect::<Vec<_>>())
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Worst relative error over `INSTANCES` instances, as `(f32, f64)`.
pub fn op_errors(op: &str) -> (f64, f64) {
    let mut worst = (0.0f64, 0.0f64);
    for i in 0..INSTANCES {
        let case = make_case(op, i);
        let num = numeric_grad(&case);
        let e32 = relative_error(&analytic::<f32>(&case.inputs, &*case.build32), &num);
        let e64 = relative_error(&analytic::<f64>(&case.inputs, &*case.build), &num);
        worst = (worst.0.max(e32), worst.1.max(e64));
    }
    worst
}

/// Same measure for the standalone kernel-alignment gradient.
pub fn ka_grad_errors() -> (f64, f64) {
    let mut worst = (0.0f64, 0.0f64);
    for i in 0..INSTANCES {
        let mut r = ChaCha8Rng::seed_from_u64(GRAD_SEED);
        r.set_stream(10_000 + i as u64);
        let n = r.gen_range(2..=6);
        let (p, q) = (r.gen_range(1..=7), r.gen_range(1..=7));
        let mut x: Vec<f64> = (0..n * p).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut y: Vec<f64> = (0..n * q).map(|_| r.gen_range(-1.0..1.0)).collect();
        let f = |x: &[f64], y: &[f64]| ka_f64(Mat::new(n, p, x), Mat::new(n, q, y)).unwrap();
        let mut num = Vec::new();
        for j in 0..x.len() {
            let o = x[j];
            x[j] = o + STEP;
            let up = f(&x, &y);
            x[j] = o - STEP;
            let down = f(&x, &y);
            x[j] = o;
            num.push((up - down) / (2.0 * STEP));
        }
        for j in 0..y.len() {
            let o = y[j];
            y[j] = o + STEP;
            let up = f(&x, &y);
            y[j] = o - STEP;
            let down = f(&x, &y);
            y[j] = o;
            num.push((up - down) / (2.0 * STEP));
        }
        let (_, gx, gy) = ka_grad_f64(Mat::new(n, p, &x), Mat::new(n, q, &y)).unwrap();
        let g64: Vec<f64> = gx.into_iter().chain(gy).collect();
        let fx = FeatureMatrix::new(n, p, x.iter().map(|&v| v as f32).collect(), "x");
        let fy = FeatureMatrix::new(n, q, y.iter().map(|&v| v as f32).collect(), "y");
        let (gx, gy) = ka_grad(&fx, &fy).unwrap();
        let g32: Vec<f64> = gx.into_iter().chain(gy).map(|v| v as f64).collect();
        worst = (worst.0.max(relative_error(&g32, &num)), worst.1.max(relative_error(&g64, &num)));
    }
    worst
}
