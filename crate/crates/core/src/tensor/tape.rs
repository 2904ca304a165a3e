use std::sync::atomic::{AtomicU64, Ordering};

use crate::arch::PadMode;
use crate::error::{Error, Result};
use crate::ka::{ka_grad_f64, Mat};

use super::kernels::{self, ConvGeom, NormGeom, NormSaved};
use super::{ParamId, ParamStore, Scalar, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tape: u64,
}

enum Op<T> {
    Input,
    Param {
        store: u64,
        id: ParamId,
    },
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        xp: Vec<T>,
        pad: usize,
        mode: PadMode,
    },
    Depthwise {
        x: usize,
        w: usize,
        geom: ConvGeom,
        xp: Vec<T>,
        pad: usize,
        mode: PadMode,
    },
    Transposed {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        xd: Vec<T>,
        wf: Vec<T>,
        stride: usize,
        lo: usize,
    },
    Norm {
        x: usize,
        gamma: usize,
        beta: usize,
        geom: NormGeom,
        saved: NormSaved<T>,
    },
    NormFixed {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv: Vec<f64>,
    },
    Relu(usize),
    Leaky(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Add(usize, usize),
    Concat(Vec<usize>),
    Scale(usize, f64),
    Sum(usize),
    L1(usize, usize),
    Mse(usize, usize),
    Bce(usize, f64),
    Ka {
        x: usize,
        y: usize,
        gx: Vec<f64>,
        gy: Vec<f64>,
    },
    WeightedSum(Vec<(usize, f64)>),
}

struct Node<T> {
    value: Tensor<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Records operations in execution order for one reverse pass.
pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    consumed: bool,
    muls: u64,
    nonfinite: Vec<&'static str>,
}

/// Result of [`Tape::backward`]: gradients of the loss with respect to every
/// recorded value that needed one.
pub struct Gradients<T: Scalar = f32> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, u64, ParamId)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    /// Adds parameter gradients into `store`'s accumulators. Only parameters
    /// read from this very store are touched. Returns how many were updated.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> usize {
        let mut n = 0;
        for &(idx, uid, id) in &self.params {
            if uid != store.uid() {
                continue;
            }
            if let Some(g) = &self.grads[idx] {
                store.entry_mut(id).grad.add_assign(g);
                n += 1;
            }
        }
        n
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

fn add_into<T: Scalar>(grads: &mut [Option<Tensor<T>>], idx: usize, shape: [usize; 4], data: Vec<T>) {
    match &mut grads[idx] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(data) {
                *a += b;
            }
        }
        slot => *slot = Some(Tensor::new(shape, data)),
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
            muls: 0,
            nonfinite: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scalar multiplies executed by convolution and statistics-computing
    /// normalization ops so far.
    pub fn muls(&self) -> u64 {
        self.muls
    }

    /// Names of ops whose output contained NaN or infinity. Only populated
    /// in debug builds.
    pub fn nonfinite(&self) -> &[&'static str] {
        &self.nonfinite
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.value(v).shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> Var {
        if cfg!(debug_assertions) && !value.is_finite() {
            self.nonfinite.push(name);
        }
        self.nodes.push(Node { value, needs_grad, op });
        Var {
            idx: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        v.idx
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// A differentiable input (gradient available after backward).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push("input", t, true, Op::Input)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push("constant", t, false, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let id = store
            .id(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        Ok(self.param_id(store, id))
    }

    pub fn param_id(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let e = store.entry(id);
        self.push(
            "param",
            e.value.clone(),
            e.trainable,
            Op::Param {
                store: store.uid(),
                id,
            },
        )
    }

    /// Dense convolution with symmetric padding `pad`. `w` is
    /// `(cout, cin, k, k)`, `b` has `cout` entries.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, mode: PadMode) -> Result<Var> {
        let (xi, wi) = (self.idx(x), self.idx(w));
        let bi = b.map(|b| self.idx(b));
        let [n, c, h, wd] = self.nodes[xi].value.shape();
        let [co, ci, k, k2] = self.nodes[wi].value.shape();
        if ci != c || k != k2 {
            return Err(shape_err(format!("conv2d weight {:?} on input {:?}", [co, ci, k, k2], [n, c, h, wd])));
        }
        if let Some(bi) = bi {
            if self.nodes[bi].value.numel() != co {
                return Err(shape_err(format!("conv2d bias has {} entries, expected {co}", self.nodes[bi].value.numel())));
            }
        }
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(shape_err(format!("conv2d kernel {k} does not fit input {h}x{wd}")));
        }
        if mode == PadMode::Reflect && (pad >= h || pad >= wd) {
            return Err(shape_err(format!("reflect pad {pad} too large for {h}x{wd}")));
        }
        let xp = kernels::pad(self.nodes[xi].value.data(), n * c, h, wd, pad, pad, mode);
        let geom = ConvGeom::new(n, c, co, h + 2 * pad, wd + 2 * pad, k, stride);
        let mut out = vec![T::zero(); n * co * geom.ho * geom.wo];
        let bias = bi.map(|bi| self.nodes[bi].value.data());
        self.muls += kernels::conv_forward(&xp, &geom, self.nodes[wi].value.data(), bias, &mut out);
        let needs = self.ng(xi) || self.ng(wi) || bi.is_some_and(|b| self.ng(b));
        let t = Tensor::new([n, co, geom.ho, geom.wo], out);
        Ok(self.push(
            "conv2d",
            t,
            needs,
            Op::Conv {
                x: xi,
                w: wi,
                b: bi,
                geom,
                xp,
                pad,
                mode,
            },
        ))
    }

    /// Depthwise convolution; `w` is `(c, 1, k, k)`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, mode: PadMode) -> Result<Var> {
        let (xi, wi) = (self.idx(x), self.idx(w));
        let [n, c, h, wd] = self.nodes[xi].value.shape();
        let [cw, one, k, k2] = self.nodes[wi].value.shape();
        if cw != c || one != 1 || k != k2 {
            return Err(shape_err(format!("depthwise weight {:?} on input {:?}", [cw, one, k, k2], [n, c, h, wd])));
        }
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(shape_err(format!("depthwise kernel {k} does not fit input {h}x{wd}")));
        }
        if mode == PadMode::Reflect && (pad >= h || pad >= wd) {
            return Err(shape_err(format!("reflect pad {pad} too large for {h}x{wd}")));
        }
        let xp = kernels::pad(self.nodes[xi].value.data(), n * c, h, wd, pad, pad, mode);
        let geom = ConvGeom::new(n, c, c, h + 2 * pad, wd + 2 * pad, k, stride);
        let mut out = vec![T::zero(); n * c * geom.ho * geom.wo];
        self.muls += kernels::depthwise_forward(&xp, &geom, self.nodes[wi].value.data(), &mut out);
        let needs = self.ng(xi) || self.ng(wi);
        let t = Tensor::new([n, c, geom.ho, geom.wo], out);
        Ok(self.push(
            "depthwise_conv2d",
            t,
            needs,
            Op::Depthwise {
                x: xi,
                w: wi,
                geom,
                xp,
                pad,
                mode,
            },
        ))
    }

    /// Transposed convolution; `w` is `(cin, cout, k, k)`. Output size is
    /// `(h - 1)·stride − 2·pad + k + output_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let (xi, wi) = (self.idx(x), self.idx(w));
        let bi = b.map(|b| self.idx(b));
        let [n, c, h, wd] = self.nodes[xi].value.shape();
        let [ci, co, k, k2] = self.nodes[wi].value.shape();
        if ci != c || k != k2 {
            return Err(shape_err(format!("transposed weight {:?} on input {:?}", [ci, co, k, k2], [n, c, h, wd])));
        }
        if pad + 1 > k || output_pad >= stride.max(1) || stride == 0 {
            return Err(shape_err(format!("transposed conv pad {pad}, output_pad {output_pad} invalid for kernel {k}")));
        }
        if let Some(bi) = bi {
            if self.nodes[bi].value.numel() != co {
                return Err(shape_err(format!("transposed bias has {} entries, expected {co}", self.nodes[bi].value.numel())));
            }
        }
        let lo = k - 1 - pad;
        let hi = lo + output_pad;
        let xd = kernels::dilate_pad(self.nodes[xi].value.data(), n * c, h, wd, stride, lo, hi);
        let wf = kernels::transpose_flip(self.nodes[wi].value.data(), ci, co, k);
        let hd = (h - 1) * stride + 1 + lo + hi;
        let wdd = (wd - 1) * stride + 1 + lo + hi;
        let geom = ConvGeom::new(n, c, co, hd, wdd, k, 1);
        let mut out = vec![T::zero(); n * co * geom.ho * geom.wo];
        let bias = bi.map(|bi| self.nodes[bi].value.data());
        self.muls += kernels::conv_forward(&xd, &geom, &wf, bias, &mut out);
        let needs = self.ng(xi) || self.ng(wi) || bi.is_some_and(|b| self.ng(b));
        let t = Tensor::new([n, co, geom.ho, geom.wo], out);
        Ok(self.push(
            "conv_transpose2d",
            t,
            needs,
            Op::Transposed {
                x: xi,
                w: wi,
                b: bi,
                geom,
                xd,
                wf,
                stride,
                lo,
            },
        ))
    }

    fn check_affine(&self, xi: usize, gi: usize, bi: usize) -> Result<[usize; 4]> {
        let s = self.nodes[xi].value.shape();
        let (gn, bn) = (self.nodes[gi].value.numel(), self.nodes[bi].value.numel());
        if gn != s[1] || bn != s[1] {
            return Err(shape_err(format!("norm affine sizes {gn}/{bn} for {} channels", s[1])));
        }
        Ok(s)
    }

    fn norm(&mut self, x: Var, gamma: Var, beta: Var, per_sample: bool, name: &'static str) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (xi, gi, bi) = (self.idx(x), self.idx(gamma), self.idx(beta));
        let [n, c, h, w] = self.check_affine(xi, gi, bi)?;
        let geom = NormGeom {
            n,
            c,
            hw: h * w,
            per_sample,
        };
        let (y, saved, muls) = kernels::norm_forward(
            self.nodes[xi].value.data(),
            &geom,
            self.nodes[gi].value.data(),
            self.nodes[bi].value.data(),
            super::NORM_EPS,
        );
        self.muls += muls;
        let (mean, var) = (saved.mean.clone(), saved.var.clone());
        let needs = self.ng(xi) || self.ng(gi) || self.ng(bi);
        let v = self.push(
            name,
            Tensor::new([n, c, h, w], y),
            needs,
            Op::Norm {
                x: xi,
                gamma: gi,
                beta: bi,
                geom,
                saved,
            },
        );
        Ok((v, mean, var))
    }

    /// Per-sample, per-channel normalization followed by `γ·x̂ + β`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.norm(x, gamma, beta, true, "instance_norm").map(|r| r.0)
    }

    /// Training-mode batch normalization. Also returns the batch mean and
    /// biased variance per channel.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        self.norm(x, gamma, beta, false, "batch_norm")
    }

    /// Normalization with fixed statistics (batch norm in eval mode).
    pub fn norm_fixed(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T]) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x), self.idx(gamma), self.idx(beta));
        let [n, c, h, w] = self.check_affine(xi, gi, bi)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err(format!("running statistics sized {}/{} for {c} channels", mean.len(), var.len())));
        }
        let (y, xhat, inv) = kernels::norm_fixed_forward(
            self.nodes[xi].value.data(),
            n,
            c,
            h * w,
            self.nodes[gi].value.data(),
            self.nodes[bi].value.data(),
            mean,
            var,
            super::NORM_EPS,
        );
        let needs = self.ng(xi) || self.ng(gi) || self.ng(bi);
        Ok(self.push(
            "norm_fixed",
            Tensor::new([n, c, h, w], y),
            needs,
            Op::NormFixed {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv,
            },
        ))
    }

    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(T) -> T, op: impl FnOnce(usize) -> Op<T>) -> Var {
        let xi = self.idx(x);
        let t = self.nodes[xi].value.map(f);
        let needs = self.ng(xi);
        self.push(name, t, needs, op(xi))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, "relu", |v| v.max(T::zero()), Op::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        self.unary(x, "leaky_relu", move |v| if v > T::zero() { v } else { s * v }, |i| Op::Leaky(i, slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, "tanh", |v| v.tanh(), Op::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, "sigmoid", |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let k = T::of(s);
        self.unary(x, "scale", move |v| v * k, |i| Op::Scale(i, s))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        if sa != sb {
            return Err(shape_err(format!("add of {sa:?} and {sb:?}")));
        }
        let mut t = self.nodes[ai].value.clone();
        t.add_assign(&self.nodes[bi].value);
        let needs = self.ng(ai) || self.ng(bi);
        Ok(self.push("add", t, needs, Op::Add(ai, bi)))
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let first = *idx.first().ok_or_else(|| shape_err("concat of nothing".into()))?;
        let [n, _, h, w] = self.nodes[first].value.shape();
        let mut c = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s[0] != n || s[2] != h || s[3] != w {
                return Err(shape_err(format!("concat of {s:?} with batch {n} at {h}x{w}")));
            }
            c += s[1];
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * c * hw);
        for s in 0..n {
            for &i in &idx {
                let ci = self.nodes[i].value.shape()[1];
                data.extend_from_slice(&self.nodes[i].value.data()[s * ci * hw..(s + 1) * ci * hw]);
            }
        }
        let needs = idx.iter().any(|&i| self.ng(i));
        Ok(self.push("concat", Tensor::new([n, c, h, w], data), needs, Op::Concat(idx)))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let s: f64 = self.nodes[xi].value.data().iter().map(|v| v.f64()).sum();
        let needs = self.ng(xi);
        self.push("sum", Tensor::scalar(T::of(s)), needs, Op::Sum(xi))
    }

    fn pair(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        if sa != sb {
            return Err(shape_err(format!("{what} of {sa:?} and {sb:?}")));
        }
        Ok((ai, bi))
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.pair(a, b, "l1")?;
        let (x, y) = (self.nodes[ai].value.data(), self.nodes[bi].value.data());
        let s: f64 = x.iter().zip(y).map(|(p, q)| (p.f64() - q.f64()).abs()).sum::<f64>() / x.len() as f64;
        let needs = self.ng(ai) || self.ng(bi);
        Ok(self.push("l1", Tensor::scalar(T::of(s)), needs, Op::L1(ai, bi)))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.pair(a, b, "mse")?;
        let (x, y) = (self.nodes[ai].value.data(), self.nodes[bi].value.data());
        let s: f64 = x
            .iter()
            .zip(y)
            .map(|(p, q)| {
                let d = p.f64() - q.f64();
                d * d
            })
            .sum::<f64>()
            / x.len() as f64;
        let needs = self.ng(ai) || self.ng(bi);
        Ok(self.push("mse", Tensor::scalar(T::of(s)), needs, Op::Mse(ai, bi)))
    }

    /// Mean binary cross-entropy of logits against a constant target, in
    /// the stable `max(z,0) − z·t + ln(1 + e^−|z|)` form. Logits are clamped
    /// to ±30.
    pub fn bce_with_logits(&mut self, x: Var, target: f64) -> Var {
        let xi = self.idx(x);
        let d = self.nodes[xi].value.data();
        let s: f64 = d
            .iter()
            .map(|v| {
                let z = v.f64().clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
                z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
            })
            .sum::<f64>()
            / d.len() as f64;
        let needs = self.ng(xi);
        self.push("bce_with_logits", Tensor::scalar(T::of(s)), needs, Op::Bce(xi, target))
    }

    /// Uncentered kernel alignment between the per-sample flattenings of
    /// `x` and `y`.
    pub fn ka(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xi, yi) = (self.idx(x), self.idx(y));
        let [nx, ..] = self.nodes[xi].value.shape();
        let [ny, ..] = self.nodes[yi].value.shape();
        if nx != ny {
            return Err(Error::BatchMismatch { left: nx, right: ny });
        }
        let xd: Vec<f64> = self.nodes[xi].value.data().iter().map(|v| v.f64()).collect();
        let yd: Vec<f64> = self.nodes[yi].value.data().iter().map(|v| v.f64()).collect();
        let xm = Mat::new(nx, xd.len() / nx, &xd);
        let ym = Mat::new(ny, yd.len() / ny, &yd);
        let (v, gx, gy) = ka_grad_f64(xm, ym)?;
        let needs = self.ng(xi) || self.ng(yi);
        Ok(self.push(
            "ka",
            Tensor::scalar(T::of(v)),
            needs,
            Op::Ka {
                x: xi,
                y: yi,
                gx,
                gy,
            },
        ))
    }

    /// `Σ wᵢ·sᵢ` over scalar values.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut idx = Vec::with_capacity(terms.len());
        let mut s = 0.0;
        for &(v, w) in terms {
            let i = self.idx(v);
            let t = &self.nodes[i].value;
            if t.numel() != 1 {
                return Err(shape_err(format!("weighted_sum term of shape {:?}", t.shape())));
            }
            s += w * t.data()[0].f64();
            idx.push((i, w));
        }
        let needs = idx.iter().any(|&(i, _)| self.ng(i));
        Ok(self.push("weighted_sum", Tensor::scalar(T::of(s)), needs, Op::WeightedSum(idx)))
    }

    /// Reverse pass from a scalar `loss`. May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let li = self.idx(loss);
        if self.nodes[li].value.numel() != 1 {
            return Err(shape_err(format!("loss of shape {:?} is not a scalar", self.nodes[li].value.shape())));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(Tensor::new(self.nodes[li].value.shape(), vec![T::one()]));
        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param { store, id } => Some((i, store, id)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            params,
        })
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let val = |j: usize| &nodes[j].value;
        let ng = |j: usize| nodes[j].needs_grad;
        let gd = g.data();
        match &nodes[i].op {
            Op::Input | Op::Param { .. } => {}
            Op::Conv {
                x,
                w,
                b,
                geom,
                xp,
                pad,
                mode,
            } => {
                let [n, c, h, wd] = val(*x).shape();
                // zero padding contributes nothing, so only the interior is needed
                let window = match mode {
                    PadMode::Zero => kernels::Window::interior(geom, *pad),
                    PadMode::Reflect => kernels::Window::full(geom),
                };
                let mut dx = ng(*x).then(|| vec![T::zero(); n * c * window.h * window.w]);
                let mut dw = ng(*w).then(|| vec![T::zero(); val(*w).numel()]);
                let mut db = b.filter(|&b| ng(b)).map(|_| vec![T::zero(); geom.cout]);
                kernels::conv_backward(
                    xp,
                    geom,
                    val(*w).data(),
                    gd,
                    dx.as_deref_mut().map(|d| (d, window)),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    let dx = match mode {
                        PadMode::Zero => dx,
                        PadMode::Reflect => kernels::pad_backward(&dx, n * c, h, wd, *pad, *pad, *mode),
                    };
                    add_into(grads, *x, [n, c, h, wd], dx);
                }
                if let Some(dw) = dw {
                    add_into(grads, *w, val(*w).shape(), dw);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    add_into(grads, *b, val(*b).shape(), db);
                }
            }
            Op::Depthwise {
                x,
                w,
                geom,
                xp,
                pad,
                mode,
            } => {
                let mut dxp = ng(*x).then(|| vec![T::zero(); xp.len()]);
                let mut dw = ng(*w).then(|| vec![T::zero(); val(*w).numel()]);
                kernels::depthwise_backward(xp, geom, val(*w).data(), gd, dxp.as_deref_mut(), dw.as_deref_mut());
                if let Some(dxp) = dxp {
                    let [n, c, h, wd] = val(*x).shape();
                    let dx = kernels::pad_backward(&dxp, n * c, h, wd, *pad, *pad, *mode);
                    add_into(grads, *x, [n, c, h, wd], dx);
                }
                if let Some(dw) = dw {
                    add_into(grads, *w, val(*w).shape(), dw);
                }
            }
            Op::Transposed {
                x,
                w,
                b,
                geom,
                xd,
                wf,
                stride,
                lo,
            } => {
                let [n, c, h, wd] = val(*x).shape();
                // input pixels sit at every `stride`-th position after the leading pad
                let window = kernels::Window {
                    y0: *lo,
                    x0: *lo,
                    h,
                    w: wd,
                    step: *stride,
                };
                let mut dx = ng(*x).then(|| vec![T::zero(); n * c * h * wd]);
                let mut dwf = ng(*w).then(|| vec![T::zero(); wf.len()]);
                let mut db = b.filter(|&b| ng(b)).map(|_| vec![T::zero(); geom.cout]);
                kernels::conv_backward(
                    xd,
                    geom,
                    wf,
                    gd,
                    dx.as_deref_mut().map(|d| (d, window)),
                    dwf.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    add_into(grads, *x, [n, c, h, wd], dx);
                }
                if let Some(dwf) = dwf {
                    let s = val(*w).shape();
                    let mut dw = vec![T::zero(); wf.len()];
                    kernels::transpose_flip_backward(&dwf, s[0], s[1], s[2], &mut dw);
                    add_into(grads, *w, s, dw);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    add_into(grads, *b, val(*b).shape(), db);
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                geom,
                saved,
            } => {
                let mut dx = ng(*x).then(|| vec![T::zero(); val(*x).numel()]);
                let mut dg = ng(*gamma).then(|| vec![T::zero(); geom.c]);
                let mut dbt = ng(*beta).then(|| vec![T::zero(); geom.c]);
                kernels::norm_backward(
                    gd,
                    geom,
                    val(*gamma).data(),
                    saved,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    dbt.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    add_into(grads, *x, val(*x).shape(), dx);
                }
                if let Some(dg) = dg {
                    add_into(grads, *gamma, val(*gamma).shape(), dg);
                }
                if let Some(db) = dbt {
                    add_into(grads, *beta, val(*beta).shape(), db);
                }
            }
            Op::NormFixed {
                x,
                gamma,
                beta,
                xhat,
                inv,
            } => {
                let [n, c, h, w] = val(*x).shape();
                let hw = h * w;
                let gm = val(*gamma).data();
                let mut dx = vec![T::zero(); n * c * hw];
                let mut dg = vec![T::zero(); c];
                let mut dbt = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let scale = T::of(gm[ch].f64() * inv[ch]);
                        let off = (s * c + ch) * hw;
                        for j in off..off + hw {
                            dx[j] = gd[j] * scale;
                            dg[ch] += gd[j] * xhat[j];
                            dbt[ch] += gd[j];
                        }
                    }
                }
                if ng(*x) {
                    add_into(grads, *x, [n, c, h, w], dx);
                }
                if ng(*gamma) {
                    add_into(grads, *gamma, val(*gamma).shape(), dg);
                }
                if ng(*beta) {
                    add_into(grads, *beta, val(*beta).shape(), dbt);
                }
            }
            Op::Relu(x) => {
                let d = val(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                add_into(grads, *x, val(*x).shape(), d);
            }
            Op::Leaky(x, slope) => {
                let s = T::of(*slope);
                let d = val(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| if v > T::zero() { g } else { s * g })
                    .collect();
                add_into(grads, *x, val(*x).shape(), d);
            }
            Op::Tanh(x) => {
                let y = nodes[i].value.data();
                let d = y.iter().zip(gd).map(|(&y, &g)| g * (T::one() - y * y)).collect();
                add_into(grads, *x, val(*x).shape(), d);
            }
            Op::Sigmoid(x) => {
                let y = nodes[i].value.data();
                let d = y.iter().zip(gd).map(|(&y, &g)| g * y * (T::one() - y)).collect();
                add_into(grads, *x, val(*x).shape(), d);
            }
            Op::Scale(x, s) => {
                let k = T::of(*s);
                add_into(grads, *x, val(*x).shape(), gd.iter().map(|&g| g * k).collect());
            }
            Op::Add(a, b) => {
                for j in [*a, *b] {
                    if ng(j) {
                        add_into(grads, j, g.shape(), gd.to_vec());
                    }
                }
            }
            Op::Concat(parts) => {
                let [n, c, h, w] = g.shape();
                let hw = h * w;
                let mut off = 0;
                for &p in parts {
                    let cp = val(p).shape()[1];
                    if ng(p) {
                        let mut d = Vec::with_capacity(n * cp * hw);
                        for s in 0..n {
                            let base = (s * c + off) * hw;
                            d.extend_from_slice(&gd[base..base + cp * hw]);
                        }
                        add_into(grads, p, val(p).shape(), d);
                    }
                    off += cp;
                }
            }
            Op::Sum(x) => {
                add_into(grads, *x, val(*x).shape(), vec![gd[0]; val(*x).numel()]);
            }
            Op::L1(a, b) => {
                let (xa, xb) = (val(*a).data(), val(*b).data());
                let k = gd[0].f64() / xa.len() as f64;
                let d: Vec<T> = xa
                    .iter()
                    .zip(xb)
                    .map(|(&p, &q)| {
                        let diff = p.f64() - q.f64();
                        T::of(if diff > 0.0 {
                            k
                        } else if diff < 0.0 {
                            -k
                        } else {
                            0.0
                        })
                    })
                    .collect();
                self.pair_grads(*a, *b, d, grads);
            }
            Op::Mse(a, b) => {
                let (xa, xb) = (val(*a).data(), val(*b).data());
                let k = 2.0 * gd[0].f64() / xa.len() as f64;
                let d: Vec<T> = xa.iter().zip(xb).map(|(&p, &q)| T::of(k * (p.f64() - q.f64()))).collect();
                self.pair_grads(*a, *b, d, grads);
            }
            Op::Bce(x, t) => {
                let xs = val(*x).data();
                let k = gd[0].f64() / xs.len() as f64;
                let d = xs
                    .iter()
                    .map(|&v| {
                        let z = v.f64();
                        if z.abs() > LOGIT_CLAMP {
                            T::zero()
                        } else {
                            T::of(k * (1.0 / (1.0 + (-z).exp()) - t))
                        }
                    })
                    .collect();
                add_into(grads, *x, val(*x).shape(), d);
            }
            Op::Ka { x, y, gx, gy } => {
                let k = gd[0].f64();
                if ng(*x) {
                    add_into(grads, *x, val(*x).shape(), gx.iter().map(|&v| T::of(k * v)).collect());
                }
                if ng(*y) {
                    add_into(grads, *y, val(*y).shape(), gy.iter().map(|&v| T::of(k * v)).collect());
                }
            }
            Op::WeightedSum(terms) => {
                for &(j, w) in terms {
                    if ng(j) {
                        add_into(grads, j, val(j).shape(), vec![T::of(w * gd[0].f64())]);
                    }
                }
            }
        }
    }

    fn pair_grads(&self, a: usize, b: usize, d: Vec<T>, grads: &mut [Option<Tensor<T>>]) {
        let shape = self.nodes[a].value.shape();
        if self.nodes[b].needs_grad {
            add_into(grads, b, shape, d.iter().map(|&v| -v).collect());
        }
        if self.nodes[a].needs_grad {
            add_into(grads, a, shape, d);
        }
    }
}

const LOGIT_CLAMP: f64 = 30.0;
