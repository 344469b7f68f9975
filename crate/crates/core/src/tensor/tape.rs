use std::collections::HashMap;

pub use super::conv::PadMode;

use super::conv::{self, ConvGeom};
use super::{matmul_acc, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::math;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch-norm behaviour: batch statistics in `Train`, running statistics
/// in `Eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistics buffers of one batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct BnStats {
    pub mean: ParamId,
    pub var: ParamId,
}

/// Batch statistics observed in train mode, to be folded into the running
/// buffers after the step.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub stats: BnStats,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

impl BnUpdate {
    pub fn apply<T: Scalar>(&self, store: &mut ParamStore<T>, momentum: f64) {
        let blend = |t: &mut Tensor<T>, src: &[f64]| {
            for (r, &b) in t.data_mut().iter_mut().zip(src) {
                *r = T::from_f64((1.0 - momentum) * r.as_f64() + momentum * b);
            }
        };
        blend(store.get_mut(self.stats.mean), &self.mean);
        blend(store.get_mut(self.stats.var), &self.var);
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Box<ConvGeom>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    PixelUnshuffle {
        x: Var,
        r: usize,
    },
    BatchNormTrain {
        x: Var,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        inv_std: Vec<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        x: Var,
        s: T,
    },
    AddScalar {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    AvgPool {
        x: Var,
        f: usize,
    },
    Upsample {
        x: Var,
        f: usize,
    },
    ChannelBroadcast {
        x: Var,
    },
    Softplus {
        x: Var,
    },
    Exp {
        x: Var,
    },
    ClampMin {
        x: Var,
        floor: T,
    },
    Round {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    GaussianBits {
        y: Var,
        mu: Var,
        sigma: Var,
        d_y: Vec<T>,
        d_sigma: Vec<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    grad: bool,
}

/// Records executed operations and their outputs for reverse-mode
/// differentiation.
///
/// Nodes are appended in execution order, which is a topological order, so
/// backward is a single reverse sweep.
pub struct Tape<'s, T: Scalar = f32> {
    store: &'s ParamStore<T>,
    mode: Mode,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate>,
    clamped: usize,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    vars: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.vars.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> &[(ParamId, Vec<T>)] {
        &self.params
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in &self.params {
            store.get_mut(*id).accumulate_grad(g);
        }
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<'s, T: Scalar> Tape<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self {
            store,
            mode,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            bn_updates: Vec::new(),
            clamped: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and saved activation.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
        self.bn_updates.clear();
        self.clamped = 0;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Number of rate terms clamped at the probability floor so far.
    pub fn clamped_count(&self) -> usize {
        self.clamped
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Records a constant.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Records an input that gradients are requested for.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("input", t, Op::Leaf, true)
    }

    /// Records (once per tape) a parameter from the store.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let p = self.store.param(id);
        let grad = p.trainable;
        let v = self.push("param", p.tensor.clone(), Op::Param(id), grad)?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    /// 2-D convolution, `x: N×C×H×W`, `w: O×C×k×k`, `b: O`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, wc, k, k2) = self.value(w).dims4()?;
        if wc != c || k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} vs weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {o} outputs", self.shape(b))));
            }
        }
        let geom = ConvGeom::new(c, h, wd, k, stride, pad, mode)?;
        let out = conv::forward(
            &geom,
            n,
            o,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_raw(vec![n, o, geom.ho, geom.wo], out);
        let grad = self.g(x) || self.g(w) || b.is_some_and(|b| self.g(b));
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom: Box::new(geom),
            },
            grad,
        )
    }

    /// Fully connected layer, `x: N×I`, `w: O×I`, `b: O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, i) = match self.shape(x) {
            &[n, i] => (n, i),
            s => return Err(Error::shape("linear", format!("input must be rank 2, got {s:?}"))),
        };
        let o = match self.shape(w) {
            &[o, wi] if wi == i => o,
            s => return Err(Error::shape("linear", format!("weight {s:?} for input width {i}"))),
        };
        let mut out = vec![T::zero(); n * o];
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("linear", "bias length"));
            }
            let bias = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bias);
            }
        }
        matmul_acc(n, i, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, T::one());
        let grad = self.g(x) || self.g(w) || b.is_some_and(|b| self.g(b));
        self.push("linear", Tensor::from_raw(vec![n, o], out), Op::Linear { x, w, b }, grad)
    }

    /// `N×C·r²×H×W → N×C×rH×rW`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (n, cr, h, w) = self.value(x).dims4()?;
        if r == 0 || cr % (r * r) != 0 {
            return Err(Error::shape(
                "pixel_shuffle",
                format!("{cr} channels not divisible by {}", r * r),
            ));
        }
        let c = cr / (r * r);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for_each_shuffle(n, c, h, w, r, |si, di| out[di] = src[si]);
        let grad = self.g(x);
        self.push(
            "pixel_shuffle",
            Tensor::from_raw(vec![n, c, h * r, w * r], out),
            Op::PixelShuffle { x, r },
            grad,
        )
    }

    /// Inverse of [`Tape::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (n, c, hr, wr) = self.value(x).dims4()?;
        if r == 0 || hr % r != 0 || wr % r != 0 {
            return Err(Error::shape("pixel_unshuffle", format!("{hr}x{wr} not divisible by {r}")));
        }
        let (h, w) = (hr / r, wr / r);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for_each_shuffle(n, c, h, w, r, |si, di| out[si] = src[di]);
        let grad = self.g(x);
        self.push(
            "pixel_unshuffle",
            Tensor::from_raw(vec![n, c * r * r, h, w], out),
            Op::PixelUnshuffle { x, r },
            grad,
        )
    }

    /// Affine-free batch normalisation over `(N, H, W)` per channel.
    pub fn batch_norm(&mut self, x: Var, stats: Option<BnStats>, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let m = n * hw;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); c];
        match self.mode {
            Mode::Train => {
                if m < 2 {
                    return Err(Error::shape(
                        "batch_norm",
                        "train mode needs at least two values per channel",
                    ));
                }
                let mut means = vec![0.0; c];
                let mut vars = vec![0.0; c];
                for ch in 0..c {
                    let mut sum = 0.0f64;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for v in &src[base..base + hw] {
                            sum += v.as_f64();
                        }
                    }
                    let mean = sum / m as f64;
                    let mut sq = 0.0f64;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for v in &src[base..base + hw] {
                            let d = v.as_f64() - mean;
                            sq += d * d;
                        }
                    }
                    let var = sq / m as f64;
                    let is = 1.0 / (var + eps).sqrt();
                    inv_std[ch] = T::from_f64(is);
                    means[ch] = mean;
                    vars[ch] = sq / (m - 1) as f64;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            out[i] = T::from_f64((src[i].as_f64() - mean) * is);
                        }
                    }
                }
                if let Some(stats) = stats {
                    self.bn_updates.push(BnUpdate {
                        stats,
                        mean: means,
                        var: vars,
                    });
                }
                let grad = self.g(x);
                self.push(
                    "batch_norm",
                    Tensor::from_raw(vec![n, c, h, w], out),
                    Op::BatchNormTrain { x, inv_std },
                    grad,
                )
            }
            Mode::Eval => {
                let stats = stats.ok_or_else(|| {
                    Error::Config("eval-mode batch norm requires running statistics".into())
                })?;
                let rm = self.store.get(stats.mean).data();
                let rv = self.store.get(stats.var).data();
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape("batch_norm", "running stats length"));
                }
                for ch in 0..c {
                    let mean = rm[ch].as_f64();
                    let is = 1.0 / (rv[ch].as_f64() + eps).sqrt();
                    inv_std[ch] = T::from_f64(is);
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            out[i] = T::from_f64((src[i].as_f64() - mean) * is);
                        }
                    }
                }
                let grad = self.g(x);
                self.push(
                    "batch_norm",
                    Tensor::from_raw(vec![n, c, h, w], out),
                    Op::BatchNormEval { x, inv_std },
                    grad,
                )
            }
        }
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = T::from_f64(slope);
        let v = self.value(x);
        let out = v
            .data()
            .iter()
            .map(|&a| if a > T::zero() { a } else { a * s })
            .collect();
        let value = Tensor::from_raw(v.shape().to_vec(), out);
        let grad = self.g(x);
        self.push("leaky_relu", value, Op::LeakyRelu { x, slope: s }, grad)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let va = self.value(a);
        let vb = self.value(b);
        let out = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_raw(va.shape().to_vec(), out);
        let grad = self.g(a) || self.g(b);
        self.push(name, value, op, grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let v = self.value(x);
        let value = Tensor::from_raw(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect());
        let grad = self.g(x);
        self.push(name, value, op, grad)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        self.unary("scale", x, |a| a * s, Op::Scale { x, s })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        self.unary("add_scalar", x, |a| a + c, Op::AddScalar { x })
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, |a| T::from_f64(math::softplus(a.as_f64())), Op::Softplus { x })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |a| a.exp(), Op::Exp { x })
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        let f = T::from_f64(floor);
        self.unary("clamp_min", x, |a| if a > f { a } else { f }, Op::ClampMin { x, floor: f })
    }

    /// Rounds half away from zero in the forward pass; identity gradient.
    pub fn round_ste(&mut self, x: Var) -> Result<Var> {
        self.unary("round_ste", x, |a| a.round(), Op::Round { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let grad = self.g(x);
        self.push("reshape", v, Op::Reshape { x }, grad)
    }

    /// Concatenates along `axis`; every other dim must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let d = self.shape(x)[axis];
                let src = self.value(x).data();
                out.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let grad = xs.iter().any(|&x| self.g(x));
        self.push(
            "concat",
            Tensor::from_raw(shape, out),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            grad,
        )
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = shape[axis];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * d + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let grad = self.g(x);
        self.push("narrow", Tensor::from_raw(new_shape, out), Op::Narrow { x, axis, start }, grad)
    }

    /// Mean over non-overlapping `f×f` blocks.
    pub fn avg_downsample(&mut self, x: Var, f: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::shape("avg_downsample", format!("{h}x{w} not divisible by {f}")));
        }
        if f == 1 {
            return Ok(x);
        }
        let (ho, wo) = (h / f, w / f);
        let src = self.value(x).data();
        let inv = T::from_f64(1.0 / (f * f) as f64);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for dy in 0..f {
                        let row = (p * h + oy * f + dy) * w + ox * f;
                        for dx in 0..f {
                            acc = acc + src[row + dx];
                        }
                    }
                    out[(p * ho + oy) * wo + ox] = acc * inv;
                }
            }
        }
        let grad = self.g(x);
        self.push(
            "avg_downsample",
            Tensor::from_raw(vec![n, c, ho, wo], out),
            Op::AvgPool { x, f },
            grad,
        )
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, f: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if f == 0 {
            return Err(Error::shape("upsample_nearest", "factor must be positive"));
        }
        if f == 1 {
            return Ok(x);
        }
        let (ho, wo) = (h * f, w * f);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    out[(p * ho + oy) * wo + ox] = src[(p * h + oy / f) * w + ox / f];
                }
            }
        }
        let grad = self.g(x);
        self.push(
            "upsample_nearest",
            Tensor::from_raw(vec![n, c, ho, wo], out),
            Op::Upsample { x, f },
            grad,
        )
    }

    /// Broadcasts a per-channel vector (`C` or `N×C`) over `N×C×H×W`.
    pub fn channel_broadcast(&mut self, x: Var, n: usize, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (xn, c) = match s[..] {
            [c] => (1, c),
            [xn, c] => (xn, c),
            _ => return Err(Error::shape("channel_broadcast", format!("{s:?}"))),
        };
        if xn != 1 && xn != n {
            return Err(Error::shape("channel_broadcast", format!("batch {xn} vs {n}")));
        }
        let src = self.value(x).data();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c * hw);
        for b in 0..n {
            let row = if xn == 1 { 0 } else { b };
            for ch in 0..c {
                let v = src[row * c + ch];
                out.extend(std::iter::repeat_n(v, hw));
            }
        }
        let grad = self.g(x);
        self.push(
            "channel_broadcast",
            Tensor::from_raw(vec![n, c, h, w], out),
            Op::ChannelBroadcast { x },
            grad,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        let grad = self.g(x);
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, grad)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().fold(T::zero(), |a, &e| a + e) / T::from_f64(v.len() as f64);
        let grad = self.g(x);
        self.push("mean", Tensor::scalar(s), Op::Mean { x }, grad)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mse", self.shape(a), self.shape(b))?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let s = va
            .iter()
            .zip(vb)
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
            / T::from_f64(va.len() as f64);
        let grad = self.g(a) || self.g(b);
        self.push("mse", Tensor::scalar(s), Op::Mse { a, b }, grad)
    }

    /// Element-wise `−log₂ P(y)` where `P` is the Gaussian bin mass of
    /// `N(mu, sigma²) * U(−½, ½)` evaluated at the (possibly continuous) `y`.
    /// Probabilities below [`math::P_MIN`] are clamped and counted.
    pub fn gaussian_bits(&mut self, y: Var, mu: Var, sigma: Var) -> Result<Var> {
        same_shape("gaussian_bits", self.shape(y), self.shape(mu))?;
        same_shape("gaussian_bits", self.shape(y), self.shape(sigma))?;
        let n = self.value(y).len();
        let mut bits = Vec::with_capacity(n);
        let mut d_y = Vec::with_capacity(n);
        let mut d_sigma = Vec::with_capacity(n);
        let mut clamped = 0;
        {
            let yv = self.value(y).data();
            let mv = self.value(mu).data();
            let sv = self.value(sigma).data();
            for i in 0..n {
                let (p, dpy, dps) =
                    math::gaussian_bin_with_grads(yv[i].as_f64(), mv[i].as_f64(), sv[i].as_f64());
                if p < math::P_MIN {
                    clamped += 1;
                    bits.push(T::from_f64(math::bits_of(p)));
                    d_y.push(T::zero());
                    d_sigma.push(T::zero());
                } else {
                    let k = -1.0 / (p * math::ln2());
                    bits.push(T::from_f64(-p.log2()));
                    d_y.push(T::from_f64(k * dpy));
                    d_sigma.push(T::from_f64(k * dps));
                }
            }
        }
        self.clamped += clamped;
        let shape = self.shape(y).to_vec();
        let grad = self.g(y) || self.g(mu) || self.g(sigma);
        self.push(
            "gaussian_bits",
            Tensor::from_raw(shape, bits),
            Op::GaussianBits {
                y,
                mu,
                sigma,
                d_y,
                d_sigma,
            },
            grad,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                grads[i] = None;
                continue;
            }
            let g = match &node.op {
                Op::Leaf | Op::Param(_) => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop(node, &g, &mut grads)?;
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) if n.grad => grads[i].as_ref().map(|g| (id, g.clone())),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            vars: grads,
            params,
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].grad {
            return;
        }
        match grads[v.0].as_mut() {
            Some(existing) => add_into(existing, &g),
            None => grads[v.0] = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce() -> Vec<T>) {
        if self.nodes[v.0].grad {
            let g = f();
            self.acc(grads, v, g);
        }
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, geom } => {
                let n = self.value(*x).shape()[0];
                let o = self.value(*w).shape()[0];
                let cg = conv::backward(
                    geom,
                    n,
                    o,
                    val(*x),
                    val(*w),
                    g,
                    self.g(*x),
                    self.g(*w),
                    b.is_some_and(|b| self.g(b)),
                );
                if let Some(dx) = cg.dx {
                    self.acc(grads, *x, dx);
                }
                if let Some(dw) = cg.dw {
                    self.acc(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.acc(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, i) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                self.acc_with(grads, *x, || {
                    let mut dx = vec![T::zero(); n * i];
                    matmul_acc(n, o, i, g, false, val(*w), false, &mut dx, T::zero());
                    dx
                });
                self.acc_with(grads, *w, || {
                    let mut dw = vec![T::zero(); o * i];
                    matmul_acc(o, n, i, g, true, val(*x), false, &mut dw, T::zero());
                    dw
                });
                if let Some(b) = b {
                    self.acc_with(grads, *b, || {
                        let mut db = vec![T::zero(); o];
                        for row in g.chunks(o) {
                            add_into(&mut db, row);
                        }
                        db
                    });
                }
            }
            Op::PixelShuffle { x, r } => {
                let (n, c, h, w) = node.value.dims4()?;
                let (h, w) = (h / r, w / r);
                let mut dx = vec![T::zero(); g.len()];
                for_each_shuffle(n, c, h, w, *r, |si, di| dx[si] = g[di]);
                self.acc(grads, *x, dx);
            }
            Op::PixelUnshuffle { x, r } => {
                let (n, cr, h, w) = node.value.dims4()?;
                let c = cr / (r * r);
                let mut dx = vec![T::zero(); g.len()];
                for_each_shuffle(n, c, h, w, *r, |si, di| dx[di] = g[si]);
                self.acc(grads, *x, dx);
            }
            Op::BatchNormTrain { x, inv_std } => {
                let (n, c, h, w) = node.value.dims4()?;
                let hw = h * w;
                let m = (n * hw) as f64;
                let yv = node.value.data();
                let mut dx = vec![T::zero(); g.len()];
                for ch in 0..c {
                    let mut sg = 0.0;
                    let mut sgy = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            sg += g[i].as_f64();
                            sgy += g[i].as_f64() * yv[i].as_f64();
                        }
                    }
                    let is = inv_std[ch].as_f64();
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            let v = is / m * (m * g[i].as_f64() - sg - yv[i].as_f64() * sgy);
                            dx[i] = T::from_f64(v);
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::BatchNormEval { x, inv_std } => {
                let (n, c, h, w) = node.value.dims4()?;
                let hw = h * w;
                let mut dx = g.to_vec();
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for v in &mut dx[base..base + hw] {
                            *v = *v * inv_std[ch];
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = val(*x);
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { gi * *slope })
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.acc_with(grads, *a, || g.to_vec());
                self.acc_with(grads, *b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, || g.to_vec());
                self.acc_with(grads, *b, || g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                self.acc_with(grads, *a, || g.iter().zip(val(*b)).map(|(&gi, &bi)| gi * bi).collect());
                self.acc_with(grads, *b, || g.iter().zip(val(*a)).map(|(&gi, &ai)| gi * ai).collect());
            }
            Op::Scale { x, s } => self.acc(grads, *x, g.iter().map(|&v| v * *s).collect()),
            Op::AddScalar { x } | Op::Round { x } | Op::Reshape { x } => {
                self.acc(grads, *x, g.to_vec())
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &x in xs {
                    let d = self.shape(x)[*axis];
                    self.acc_with(grads, x, || {
                        let mut dx = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[from..from + d * inner]);
                        }
                        dx
                    });
                    offset += d;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let d = shape[*axis];
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for o in 0..outer {
                    let to = (o * d + start) * inner;
                    dx[to..to + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *x, dx);
            }
            Op::AvgPool { x, f } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (ho, wo) = (h / f, w / f);
                let inv = T::from_f64(1.0 / (f * f) as f64);
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[(p * h + y) * w + xx] = g[(p * ho + y / f) * wo + xx / f] * inv;
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Upsample { x, f } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (ho, wo) = (h * f, w * f);
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let d = &mut dx[(p * h + oy / f) * w + ox / f];
                            *d = *d + g[(p * ho + oy) * wo + ox];
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::ChannelBroadcast { x } => {
                let (n, c, h, w) = node.value.dims4()?;
                let hw = h * w;
                let xlen = self.value(*x).len();
                let mut dx = vec![T::zero(); xlen];
                for b in 0..n {
                    let row = if xlen == c { 0 } else { b };
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        let s = g[base..base + hw].iter().fold(T::zero(), |a, &v| a + v);
                        dx[row * c + ch] = dx[row * c + ch] + s;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Softplus { x } => {
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&gi, &xi)| gi * T::from_f64(math::sigmoid(xi.as_f64())))
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::Exp { x } => {
                let dx = g.iter().zip(node.value.data()).map(|(&gi, &yi)| gi * yi).collect();
                self.acc(grads, *x, dx);
            }
            Op::ClampMin { x, floor } => {
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&gi, &xi)| if xi > *floor { gi } else { T::zero() })
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                self.acc(grads, *x, vec![g[0]; n]);
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                self.acc(grads, *x, vec![g[0] / T::from_f64(n as f64); n]);
            }
            Op::Mse { a, b } => {
                let va = val(*a);
                let vb = val(*b);
                let k = T::from_f64(2.0 / va.len() as f64) * g[0];
                let da: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| (x - y) * k).collect();
                if self.g(*b) {
                    self.acc(grads, *b, da.iter().map(|&v| -v).collect());
                }
                self.acc(grads, *a, da);
            }
            Op::GaussianBits {
                y,
                mu,
                sigma,
                d_y,
                d_sigma,
            } => {
                self.acc_with(grads, *y, || g.iter().zip(d_y).map(|(&a, &b)| a * b).collect());
                self.acc_with(grads, *mu, || g.iter().zip(d_y).map(|(&a, &b)| -(a * b)).collect());
                self.acc_with(grads, *sigma, || g.iter().zip(d_sigma).map(|(&a, &b)| a * b).collect());
            }
        }
        Ok(())
    }
}

/// Visits (source index in `N×C·r²×H×W`, destination index in
/// `N×C×rH×rW`) pairs of the pixel-shuffle permutation.
fn for_each_shuffle(n: usize, c: usize, h: usize, w: usize, r: usize, mut f: impl FnMut(usize, usize)) {
    let (ho, wo) = (h * r, w * r);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let sc = (b * c + ch) * r * r + i * r + j;
                    for y in 0..h {
                        for x in 0..w {
                            let si = (sc * h + y) * w + x;
                            let di = ((b * c + ch) * ho + y * r + i) * wo + x * r + j;
                            f(si, di);
                        }
                    }
                }
            }
        }
    }
}
